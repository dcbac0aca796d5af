//! Adaptive L-step discrimination of PSK coherent states and the
//! detection-matrix bookkeeping used for channel estimation.
//!
//! The input pulse is split into `L` equal temporal slices. In each slice the
//! receiver displaces its current most-likely hypothesis towards vacuum and
//! counts photons; the count updates the posterior over hypotheses, which
//! picks the LO phase for the next slice.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{displaced_mean, draw_count, log_pnr_pmf, MeanPhotonNumber, PhysicsConfig};

/// Largest supported alphabet; keeps the posterior on the stack.
pub const MAX_ALPHABET: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverConfig {
    /// Alphabet size `M` (4 for QPSK).
    pub alphabet: usize,
    /// Adaptive steps `L` per symbol.
    pub steps: usize,
    #[serde(skip)]
    pub physics: PhysicsConfig,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            alphabet: 4,
            steps: 10,
            physics: PhysicsConfig::default(),
        }
    }
}

impl ReceiverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet < 2 || self.alphabet > MAX_ALPHABET {
            return Err(Error::Config(format!(
                "alphabet size must lie in 2..={MAX_ALPHABET}, got {}",
                self.alphabet
            )));
        }
        if self.steps < 1 {
            return Err(Error::Config("at least one adaptive step is required".into()));
        }
        self.physics.validate()
    }

    /// Phase of constellation point `k`.
    #[inline]
    pub fn symbol_phase(&self, k: usize) -> f64 {
        TAU * k as f64 / self.alphabet as f64
    }

    /// Length of the flattened, normalized detection matrix.
    pub fn matrix_len(&self) -> usize {
        self.alphabet * (self.physics.pnr + 1)
    }
}

/// A transmitted symbol as seen at the receiver input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolInstance {
    /// Constellation index `k`.
    pub index: usize,
    /// Input intensity `A` (mean photons per pulse).
    pub intensity: f64,
    /// Channel phase offset `phi`.
    pub phase: f64,
}

/// Local-oscillator settings held fixed over an estimation period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoState {
    /// LO intensity `B`.
    pub intensity: f64,
    /// Phase correction `delta` added to every LO phase.
    pub correction: f64,
}

/// One adaptive step: the LO hypothesis index and the photon count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub lo_index: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminationResult {
    /// Index of the maximum-a-posteriori hypothesis after the last step.
    pub guess: usize,
    pub steps: Vec<Step>,
    pub correct: bool,
}

impl DiscriminationResult {
    /// Guessed phase `theta_disc`.
    pub fn guessed_phase(&self, alphabet: usize) -> f64 {
        TAU * self.guess as f64 / alphabet as f64
    }
}

/// Receiver with its likelihood table precomputed for one LO setting.
///
/// The likelihoods assume an input of intensity `B` with no residual phase
/// offset: the receiver only knows its own LO settings.
#[derive(Debug, Clone)]
pub struct Receiver {
    cfg: ReceiverConfig,
    lo: LoState,
    slice_lo: f64,
    // log P(count | hypothesis - lo_index = r), flattened [r][count].
    log_lik: Vec<f64>,
}

impl Receiver {
    pub fn new(cfg: ReceiverConfig, lo: LoState) -> Result<Self> {
        cfg.validate()?;
        if !(lo.intensity >= 0.0 && lo.intensity.is_finite()) {
            return Err(Error::Domain(format!(
                "LO intensity must be non-negative, got {}",
                lo.intensity
            )));
        }
        let m = cfg.physics.pnr;
        let slice_lo = lo.intensity / cfg.steps as f64;
        let mut log_lik = Vec::with_capacity(cfg.alphabet * (m + 1));
        for r in 0..cfg.alphabet {
            let mean = displaced_mean(
                slice_lo,
                slice_lo,
                cfg.symbol_phase(r).cos(),
                &cfg.physics,
            );
            log_lik.extend(log_pnr_pmf(MeanPhotonNumber::new(mean)?, m));
        }
        Ok(Self {
            cfg,
            lo,
            slice_lo,
            log_lik,
        })
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.cfg
    }

    pub fn lo(&self) -> LoState {
        self.lo
    }

    /// Runs the adaptive measurement, reporting each step to `on_step`, and
    /// returns the final guess.
    #[inline]
    pub fn run<R: Rng + ?Sized>(
        &self,
        symbol: &SymbolInstance,
        rng: &mut R,
        mut on_step: impl FnMut(Step),
    ) -> usize {
        let m_alpha = self.cfg.alphabet;
        let m = self.cfg.physics.pnr;
        let slice_in = symbol.intensity.max(0.0) / self.cfg.steps as f64;
        // cos of the true relative phase when the LO sits r points below the
        // true symbol.
        let residual = symbol.phase - self.lo.correction;
        let mut cos_rel = [0.0f64; MAX_ALPHABET];
        for (r, c) in cos_rel.iter_mut().enumerate().take(m_alpha) {
            *c = (self.cfg.symbol_phase(r) + residual).cos();
        }
        let mut log_post = [0.0f64; MAX_ALPHABET];
        for _ in 0..self.cfg.steps {
            let lo_index = argmax(&log_post[..m_alpha]);
            let r_true = (symbol.index + m_alpha - lo_index) % m_alpha;
            let mean = displaced_mean(slice_in, self.slice_lo, cos_rel[r_true], &self.cfg.physics);
            let count = draw_count(mean, m, rng);
            for (h, lp) in log_post.iter_mut().enumerate().take(m_alpha) {
                let r = (h + m_alpha - lo_index) % m_alpha;
                *lp += self.log_lik[r * (m + 1) + count];
            }
            on_step(Step { lo_index, count });
        }
        argmax(&log_post[..m_alpha])
    }

    pub fn discriminate<R: Rng + ?Sized>(
        &self,
        symbol: &SymbolInstance,
        rng: &mut R,
    ) -> DiscriminationResult {
        let mut steps = Vec::with_capacity(self.cfg.steps);
        let guess = self.run(symbol, rng, |s| steps.push(s));
        DiscriminationResult {
            guess,
            steps,
            correct: guess == symbol.index,
        }
    }

    /// Discriminates and bins the outcome into `matrix`; returns whether the
    /// guess was correct.
    pub fn discriminate_into<R: Rng + ?Sized>(
        &self,
        symbol: &SymbolInstance,
        rng: &mut R,
        matrix: &mut DetectionMatrix,
    ) -> bool {
        let mut buf = [Step {
            lo_index: 0,
            count: 0,
        }; 64];
        if self.cfg.steps > buf.len() {
            let result = self.discriminate(symbol, rng);
            matrix
                .accumulate(&result)
                .expect("receiver produces on-grid results");
            return result.correct;
        }
        let mut n = 0;
        let guess = self.run(symbol, rng, |s| {
            buf[n] = s;
            n += 1;
        });
        for s in &buf[..n] {
            matrix.record(s.lo_index, guess, s.count);
        }
        matrix.experiments += 1;
        guess == symbol.index
    }
}

/// Index of the largest entry; ties go to the lowest index.
#[inline]
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Runs one adaptive discrimination of `symbol` with LO settings `lo`.
pub fn discriminate<R: Rng + ?Sized>(
    symbol: &SymbolInstance,
    lo: LoState,
    cfg: &ReceiverConfig,
    rng: &mut R,
) -> Result<DiscriminationResult> {
    if symbol.index >= cfg.alphabet {
        return Err(Error::Domain(format!(
            "symbol index {} outside alphabet of size {}",
            symbol.index, cfg.alphabet
        )));
    }
    Ok(Receiver::new(*cfg, lo)?.discriminate(symbol, rng))
}

/// Histogram of (relative phase bin, photon count) pairs over an
/// estimation period. Rows are phase bins `(theta_j - theta_disc)`, columns
/// are photon counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionMatrix {
    alphabet: usize,
    pnr: usize,
    counts: Vec<u64>,
    experiments: u64,
}

impl DetectionMatrix {
    pub fn new(alphabet: usize, pnr: usize) -> Self {
        Self {
            alphabet,
            pnr,
            counts: vec![0; alphabet * (pnr + 1)],
            experiments: 0,
        }
    }

    pub fn for_receiver(cfg: &ReceiverConfig) -> Self {
        Self::new(cfg.alphabet, cfg.physics.pnr)
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn pnr(&self) -> usize {
        self.pnr
    }

    pub fn experiments(&self) -> u64 {
        self.experiments
    }

    pub fn get(&self, bin: usize, count: usize) -> u64 {
        self.counts[bin * (self.pnr + 1) + count]
    }

    pub fn row(&self, bin: usize) -> &[u64] {
        let w = self.pnr + 1;
        &self.counts[bin * w..(bin + 1) * w]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    #[inline]
    fn record(&mut self, lo_index: usize, guess: usize, count: usize) {
        let bin = (lo_index + self.alphabet - guess) % self.alphabet;
        self.counts[bin * (self.pnr + 1) + count] += 1;
    }

    /// Adds a single (bin, count) observation without touching the
    /// experiment counter.
    pub fn add(&mut self, bin: usize, count: usize, times: u64) -> Result<()> {
        if bin >= self.alphabet || count > self.pnr {
            return Err(Error::Domain(format!(
                "cell ({bin}, {count}) outside a {}x{} matrix",
                self.alphabet,
                self.pnr + 1
            )));
        }
        self.counts[bin * (self.pnr + 1) + count] += times;
        Ok(())
    }

    /// Bins every step of `result` relative to its final guess.
    pub fn accumulate(&mut self, result: &DiscriminationResult) -> Result<()> {
        if result.guess >= self.alphabet {
            return Err(Error::Domain(format!("guess {} off the phase grid", result.guess)));
        }
        for s in &result.steps {
            if s.lo_index >= self.alphabet || s.count > self.pnr {
                return Err(Error::Domain(format!(
                    "step {:?} outside a {}x{} matrix",
                    s,
                    self.alphabet,
                    self.pnr + 1
                )));
            }
        }
        for s in &result.steps {
            self.record(s.lo_index, result.guess, s.count);
        }
        self.experiments += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.experiments = 0;
    }

    /// Row-normalized, row-major flattening. Empty rows map to zeros.
    pub fn to_input_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.counts.len());
        self.write_input_vector(&mut out);
        out
    }

    pub(crate) fn write_input_vector(&self, out: &mut Vec<f64>) {
        for row in self.counts.chunks(self.pnr + 1) {
            let sum: u64 = row.iter().sum();
            if sum == 0 {
                out.extend(std::iter::repeat_n(0.0, row.len()));
            } else {
                let s = sum as f64;
                out.extend(row.iter().map(|&c| c as f64 / s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{pnr_pmf, PhysicsConfig};
    use crate::rng;

    fn cfg(steps: usize, physics: PhysicsConfig) -> ReceiverConfig {
        ReceiverConfig {
            alphabet: 4,
            steps,
            physics,
        }
    }

    #[test]
    fn vacuum_input_stays_uniform_and_picks_index_zero() {
        let c = cfg(10, PhysicsConfig::ideal(10));
        let mut r = rng::seeded(3);
        for k in 0..4 {
            let sym = SymbolInstance {
                index: k,
                intensity: 0.0,
                phase: 0.0,
            };
            let res = discriminate(
                &sym,
                LoState {
                    intensity: 0.0,
                    correction: 0.0,
                },
                &c,
                &mut r,
            )
            .unwrap();
            assert_eq!(res.guess, 0);
            assert!(res.steps.iter().all(|s| s.count == 0 && s.lo_index == 0));
            assert_eq!(res.correct, k == 0);
        }
    }

    #[test]
    fn exact_nulling_never_abandons_the_true_state() {
        let c = cfg(10, PhysicsConfig::ideal(10));
        let lo = LoState {
            intensity: 5.0,
            correction: 0.0,
        };
        let rx = Receiver::new(c, lo).unwrap();
        let mut r = rng::seeded(9);
        for i in 0..20_000 {
            let sym = SymbolInstance {
                index: i % 4,
                intensity: 5.0,
                phase: 0.0,
            };
            let res = rx.discriminate(&sym, &mut r);
            // Once the LO sits on the true symbol no photon can arrive.
            let mut on_true = false;
            for s in &res.steps {
                if on_true {
                    assert_eq!(s.lo_index, sym.index);
                }
                if s.lo_index == sym.index {
                    assert_eq!(s.count, 0);
                    on_true = true;
                }
            }
        }
    }

    #[test]
    fn first_step_uses_hypothesis_zero() {
        let c = cfg(3, PhysicsConfig::default());
        let rx = Receiver::new(
            c,
            LoState {
                intensity: 2.0,
                correction: 0.0,
            },
        )
        .unwrap();
        let mut r = rng::seeded(4);
        for k in 0..4 {
            let res = rx.discriminate(
                &SymbolInstance {
                    index: k,
                    intensity: 2.0,
                    phase: 0.1,
                },
                &mut r,
            );
            assert_eq!(res.steps.len(), 3);
            assert_eq!(res.steps[0].lo_index, 0);
        }
    }

    #[test]
    fn invalid_symbol_is_rejected() {
        let c = cfg(3, PhysicsConfig::default());
        let sym = SymbolInstance {
            index: 4,
            intensity: 1.0,
            phase: 0.0,
        };
        let lo = LoState {
            intensity: 1.0,
            correction: 0.0,
        };
        assert!(discriminate(&sym, lo, &c, &mut rng::seeded(0)).is_err());
    }

    /// Exhaustive error probability of the adaptive receiver: walk every
    /// detection history, weight it by its probability under the true
    /// symbol, and apply the MAP decision rule directly with pnr_pmf.
    fn enumerate_error(c: &ReceiverConfig, a: f64, b: f64) -> f64 {
        let m_alpha = c.alphabet;
        let m = c.physics.pnr;
        let slice_a = a / c.steps as f64;
        let slice_b = b / c.steps as f64;
        let pmf = |input: f64, lo: f64, rel: f64| {
            let n = crate::physics::mean_photon_number(input, lo, rel, &c.physics).unwrap();
            pnr_pmf(n, m)
        };
        fn recurse(
            c: &ReceiverConfig,
            k_true: usize,
            step: usize,
            post: Vec<f64>,
            prob: f64,
            pmf: &dyn Fn(f64, f64, f64) -> Vec<f64>,
            sa: f64,
            sb: f64,
        ) -> f64 {
            let m_alpha = c.alphabet;
            let best = |p: &[f64]| {
                let mut i = 0;
                for j in 1..p.len() {
                    if p[j] > p[i] {
                        i = j;
                    }
                }
                i
            };
            if step == c.steps {
                return if best(&post) == k_true { 0.0 } else { prob };
            }
            let lo = best(&post);
            let theta_lo = c.symbol_phase(lo);
            let p_true = pmf(sa, sb, c.symbol_phase(k_true) - theta_lo);
            let mut err = 0.0;
            for d in 0..=c.physics.pnr {
                if p_true[d] == 0.0 {
                    continue;
                }
                let next: Vec<f64> = (0..m_alpha)
                    .map(|h| post[h] * pmf(sb, sb, c.symbol_phase(h) - theta_lo)[d])
                    .collect();
                err += recurse(c, k_true, step + 1, next, prob * p_true[d], pmf, sa, sb);
            }
            err
        }
        let _ = m;
        (0..m_alpha)
            .map(|k| {
                recurse(c, k, 0, vec![1.0; m_alpha], 1.0 / m_alpha as f64, &pmf, slice_a, slice_b)
            })
            .sum()
    }

    #[test]
    fn monte_carlo_matches_enumeration_small_instance() {
        let physics = PhysicsConfig {
            pnr: 1,
            ..PhysicsConfig::default()
        };
        let c = cfg(2, physics);
        let exact = enumerate_error(&c, 0.2, 0.2);
        let lo = LoState {
            intensity: 0.2,
            correction: 0.0,
        };
        let rx = Receiver::new(c, lo).unwrap();
        let mut r = rng::seeded(21);
        let trials = 100_000;
        let mut errors = 0;
        for _ in 0..trials {
            let k = r.random_range(0..4);
            let res = rx.discriminate(
                &SymbolInstance {
                    index: k,
                    intensity: 0.2,
                    phase: 0.0,
                },
                &mut r,
            );
            errors += usize::from(!res.correct);
        }
        let p = errors as f64 / trials as f64;
        let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((p - exact).abs() < 3.0 * sigma, "mc={p} exact={exact}");
    }

    #[test]
    fn error_rate_is_invariant_under_relabeling() {
        // The first LO hypothesis is fixed at index 0, so individual symbols
        // do not share one error rate; the average over a uniform source must
        // not change when every label is shifted by one.
        let c = cfg(10, PhysicsConfig::default());
        let lo = LoState {
            intensity: 2.0,
            correction: 0.0,
        };
        let rx = Receiver::new(c, lo).unwrap();
        let trials = 100_000;
        let rate = |shift: usize, seed: u64| {
            let mut r = rng::seeded(seed);
            let errs = (0..trials)
                .filter(|_| {
                    let k = (r.random_range(0..4) + shift) % 4;
                    let sym = SymbolInstance {
                        index: k,
                        intensity: 2.0,
                        phase: 0.0,
                    };
                    !rx.discriminate(&sym, &mut r).correct
                })
                .count();
            errs as f64 / trials as f64
        };
        let base = rate(0, 31);
        let shifted = rate(1, 32);
        let sigma = (2.0 * base * (1.0 - base) / trials as f64).sqrt();
        assert!((base - shifted).abs() < 3.0 * sigma, "{base} vs {shifted}");
    }

    #[test]
    fn matrix_accumulate_and_reset() {
        let c = cfg(10, PhysicsConfig::default());
        let rx = Receiver::new(
            c,
            LoState {
                intensity: 5.0,
                correction: 0.0,
            },
        )
        .unwrap();
        let mut d = DetectionMatrix::for_receiver(&c);
        let mut r = rng::seeded(1);
        for i in 0..37 {
            let sym = SymbolInstance {
                index: i % 4,
                intensity: 5.0,
                phase: 0.05,
            };
            if i % 2 == 0 {
                let res = rx.discriminate(&sym, &mut r);
                d.accumulate(&res).unwrap();
            } else {
                rx.discriminate_into(&sym, &mut r, &mut d);
            }
        }
        assert_eq!(d.total(), 37 * 10);
        assert_eq!(d.experiments(), 37);
        d.reset();
        assert_eq!(d.total(), 0);
        assert_eq!(d.experiments(), 0);
        d.reset();
        assert!(d.is_empty());
    }

    #[test]
    fn all_zero_detections_at_null_land_in_first_cell() {
        let mut d = DetectionMatrix::new(4, 10);
        let res = DiscriminationResult {
            guess: 2,
            steps: vec![
                Step {
                    lo_index: 2,
                    count: 0
                };
                10
            ],
            correct: true,
        };
        d.accumulate(&res).unwrap();
        assert_eq!(d.get(0, 0), 10);
        assert_eq!(d.total(), 10);
    }

    #[test]
    fn relative_bin_wraps_around() {
        let mut d = DetectionMatrix::new(4, 10);
        let res = DiscriminationResult {
            guess: 3,
            steps: vec![Step {
                lo_index: 0,
                count: 2,
            }],
            correct: false,
        };
        d.accumulate(&res).unwrap();
        // (0 - 3) mod 4 = 1
        assert_eq!(d.get(1, 2), 1);
    }

    #[test]
    fn off_grid_steps_are_rejected() {
        let mut d = DetectionMatrix::new(4, 10);
        let res = DiscriminationResult {
            guess: 0,
            steps: vec![Step {
                lo_index: 0,
                count: 11,
            }],
            correct: true,
        };
        assert!(d.accumulate(&res).is_err());
        assert!(d.is_empty());
    }

    #[test]
    fn input_vector_layout() {
        let mut d = DetectionMatrix::new(4, 10);
        d.add(1, 3, 7).unwrap();
        let v = d.to_input_vector();
        assert_eq!(v.len(), 44);
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, if i == 11 + 3 { 1.0 } else { 0.0 });
        }
        d.add(0, 0, 3).unwrap();
        d.add(0, 2, 1).unwrap();
        let v = d.to_input_vector();
        let row0: f64 = v[..11].iter().sum();
        assert!((row0 - 1.0).abs() < 1e-12);
        assert_eq!(v[0], 0.75);
        assert!(v[22..].iter().all(|&x| x == 0.0));
    }
}
