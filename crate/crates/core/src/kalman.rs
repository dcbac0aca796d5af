//! Scalar Kalman filters for the phase and intensity estimates.
//!
//! The phase filter predicts zero residual offset (the LO correction has
//! already absorbed the previous estimates) with variance growing by one
//! random-walk step per symbol. The intensity filter propagates the mean
//! and variance of the OU process over the `N` symbols of a period.

use crate::error::Result;
use crate::estimate::MIN_INTENSITY;
use crate::noise::OuParams;

/// Filter state carried between estimation periods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    /// Posterior variance of the phase.
    pub phase_variance: f64,
    /// Posterior variance of the intensity.
    pub intensity_variance: f64,
    /// Accumulated LO phase correction `delta`.
    pub correction: f64,
    /// Current LO intensity `B`.
    pub lo_intensity: f64,
}

impl KalmanState {
    /// Zero variances, no correction, LO at `lo_intensity`.
    pub fn new(lo_intensity: f64) -> Self {
        Self {
            phase_variance: 0.0,
            intensity_variance: 0.0,
            correction: 0.0,
            lo_intensity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Update {
    pub estimate: f64,
    pub variance: f64,
    pub gain: f64,
}

#[inline]
fn gain(predicted: f64, measurement: f64) -> f64 {
    if predicted == 0.0 {
        0.0
    } else {
        predicted / (predicted + measurement)
    }
}

/// Phase prediction over `periods` symbols with per-symbol walk variance
/// `step_variance`.
pub fn predict_phase(state: &KalmanState, periods: usize, step_variance: f64) -> Prediction {
    Prediction {
        mean: 0.0,
        variance: state.phase_variance + periods as f64 * step_variance,
    }
}

pub fn update_phase(raw: f64, pred: Prediction, measurement_variance: f64) -> Update {
    let k = gain(pred.variance, measurement_variance);
    Update {
        estimate: k * raw + (1.0 - k) * pred.mean,
        variance: (1.0 - k) * pred.variance,
        gain: k,
    }
}

/// Intensity prediction: the OU mean and variance propagated over
/// `periods` Euler steps of length `dt`, starting from the LO intensity
/// and the current posterior variance.
pub fn predict_intensity(
    state: &KalmanState,
    periods: usize,
    ou: &OuParams,
    dt: f64,
) -> Result<Prediction> {
    ou.check_step(dt)?;
    let decay = 1.0 - ou.bandwidth * dt;
    let (mut mean_sum, mut var_sum) = (0.0, 0.0);
    let (mut pow, mut pow2) = (1.0, 1.0);
    for _ in 0..periods {
        mean_sum += pow;
        var_sum += pow2;
        pow *= decay;
        pow2 *= decay * decay;
    }
    // pow = decay^N, pow2 = decay^(2N) after the loop.
    Ok(Prediction {
        mean: pow * state.lo_intensity + ou.bandwidth * ou.mean_intensity * dt * mean_sum,
        variance: pow2 * state.intensity_variance + ou.diffusion * ou.diffusion * dt * var_sum,
    })
}

/// Intensity update; the filtered estimate is clamped at [`MIN_INTENSITY`].
pub fn update_intensity(raw: f64, pred: Prediction, measurement_variance: f64) -> Update {
    let k = gain(pred.variance, measurement_variance);
    Update {
        estimate: (k * raw + (1.0 - k) * pred.mean).max(MIN_INTENSITY),
        variance: (1.0 - k) * pred.variance,
        gain: k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::DEFAULT_SYMBOL_PERIOD;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn phase_prediction() {
        let s = KalmanState::new(5.0);
        let p = predict_phase(&s, 10, 1.2566e-4);
        assert_eq!(p.mean, 0.0);
        assert!((p.variance - 1.2566e-3).abs() < 1e-12);
        let s = KalmanState {
            phase_variance: 0.02,
            ..s
        };
        assert_eq!(predict_phase(&s, 10, 0.0).variance, 0.02);
    }

    #[test]
    fn phase_update_cases() {
        let u = update_phase(0.4, Prediction { mean: 0.0, variance: 0.01 }, 0.01);
        assert_eq!(u.gain, 0.5);
        assert_eq!(u.estimate, 0.2);
        let u = update_phase(0.4, Prediction { mean: 0.0, variance: 0.01 }, 1e-300);
        assert!((u.estimate - 0.4).abs() < 1e-12);
        let u = update_phase(0.4, Prediction { mean: 0.0, variance: 0.0 }, 0.01);
        assert_eq!(u.estimate, 0.0);
        assert_eq!(u.variance, 0.0);
    }

    #[test]
    fn intensity_prediction_without_reversion() {
        let ou = OuParams::new(0.0, 300.0, 5.0).unwrap();
        let s = KalmanState {
            intensity_variance: 0.1,
            ..KalmanState::new(4.2)
        };
        let p = predict_intensity(&s, 10, &ou, DEFAULT_SYMBOL_PERIOD).unwrap();
        assert_eq!(p.mean, 4.2);
        assert!((p.variance - (0.1 + 300.0f64.powi(2) * 10.0 * DEFAULT_SYMBOL_PERIOD)).abs() < 1e-12);
    }

    #[test]
    fn intensity_fixed_point() {
        let ou = OuParams::new(25e3, 0.0, 5.0).unwrap();
        let p = predict_intensity(&KalmanState::new(5.0), 10, &ou, DEFAULT_SYMBOL_PERIOD).unwrap();
        assert!((p.mean - 5.0).abs() < 1e-12);
        assert_eq!(p.variance, 0.0);
    }

    #[test]
    fn intensity_prediction_operating_point() {
        let ou = OuParams::new(25e3, 75_000f64.sqrt(), 5.0).unwrap();
        let p = predict_intensity(&KalmanState::new(5.0), 10, &ou, 1e-8).unwrap();
        assert!((p.mean - 5.0).abs() < 1e-12);
        // 75000 * 1e-8 * sum_{k<10} (1 - 2.5e-4)^(2k), summed independently.
        let sum: f64 = (0..10).map(|k| (1.0 - 2.5e-4f64).powi(2 * k)).sum();
        let expect = 75_000.0 * 1e-8 * sum;
        assert!((p.variance - expect).abs() < 1e-12);
        assert!((p.variance - 7.483e-3).abs() < 1e-6);
    }

    #[test]
    fn unstable_step_is_rejected() {
        let ou = OuParams::new(1e8, 1.0, 5.0).unwrap();
        assert!(predict_intensity(&KalmanState::new(5.0), 10, &ou, 1e-8).is_err());
    }

    #[test]
    fn intensity_update_cases() {
        let pred = Prediction {
            mean: 4.0,
            variance: 0.3,
        };
        let u = update_intensity(6.0, pred, 0.3);
        assert!((u.estimate - 5.0).abs() < 1e-12);
        let u = update_intensity(6.0, pred, f64::INFINITY);
        assert_eq!(u.estimate, 4.0);
        assert_eq!(u.variance, pred.variance);
        let u = update_intensity(-3.0, Prediction { mean: 0.0, variance: 1.0 }, 1e-9);
        assert_eq!(u.estimate, MIN_INTENSITY);
    }

    #[test]
    fn gains_and_variances_on_random_inputs() {
        let mut r = rng::seeded(1);
        for _ in 0..10_000 {
            let pred = Prediction {
                mean: r.random_range(0.0..20.0),
                variance: r.random_range(0.0..5.0),
            };
            let meas = r.random_range(1e-6..5.0);
            let raw = r.random_range(-1.0..20.0);
            for u in [update_phase(raw, pred, meas), update_intensity(raw, pred, meas)] {
                assert!((0.0..=1.0).contains(&u.gain));
                assert!(u.variance <= pred.variance);
                assert!(u.variance >= 0.0);
            }
        }
    }
}
