//! Monte Carlo checks of the masking and verification formulas, the mask
//! recovery attack, and the accuracy sweep over mask scales.
//!
//! Every simulation splits its trials into fixed-size chunks, each drawing
//! from its own stream `(seed, chunk)`, so results do not depend on how the
//! chunks are scheduled.

use alloc::vec::Vec;

use crate::ceil_tolerant;
use crate::client::{detection_failure_probability, layer_input_ranges, Client, ClientError, OffloadPlan};
use crate::masking::{masking_failure_rate, DomainError};
use crate::nn::ModelSpec;
use crate::rng::DetRng;
use crate::tensor::Tensor;
use crate::worker::{LocalLink, Worker};

/// Failure rate of masking over a finite field with uniform masks: every
/// masked value is equally likely for every input.
pub const PERFECT_FIELD_FAILURE_RATE: f64 = 0.0;

pub const DEFAULT_TRIALS: u64 = 100_000;
const CHUNK: u64 = 4096;

fn chunks(trials: u64) -> impl Iterator<Item = (u64, u64)> {
    (0..trials.div_ceil(CHUNK)).map(move |c| (c, CHUNK.min(trials - c * CHUNK)))
}

/// Standard error of a binomial proportion.
pub fn binomial_std_error(p: f64, trials: u64) -> f64 {
    libm::sqrt((p * (1.0 - p)).max(0.0) / trials as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adversary {
    /// Names the only possible source when the observation falls where the
    /// two mask supports do not overlap; flips a coin otherwise.
    Region,
    /// Ignores the observation.
    CoinFlip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingGameResult {
    pub trials: u64,
    pub success_rate: f64,
    /// Fraction of observations outside the overlap of the two supports.
    pub region_rate: f64,
    /// `1/2 + 1/2 * 2/(2k+1)`, from the stated per-value failure rate.
    pub stated_success: f64,
    /// `1/(2k)`: the length of the non-overlapping part over the support.
    pub exact_region_probability: f64,
}

impl MaskingGameResult {
    /// `1/2 + 1/2 * exact_region_probability`.
    pub fn exact_success(&self) -> f64 {
        0.5 + 0.5 * self.exact_region_probability
    }
}

/// Plays the two-value distinguishing game: the challenger masks `x1` or
/// `x2` with noise uniform on `[-e, e]`, `e = k |x1 - x2|`, and the
/// adversary guesses which one it was.
pub fn simulate_masking_game(
    x1: f64,
    x2: f64,
    k: f64,
    trials: u64,
    seed: u64,
    adversary: Adversary,
) -> Result<MaskingGameResult, DomainError> {
    if !(x1 != x2 && (x1 - x2).is_finite()) {
        return Err(DomainError {
            what: "x2 - x1",
            value: x2 - x1,
        });
    }
    let stated = masking_failure_rate(k)?;
    if trials == 0 {
        return Err(DomainError {
            what: "trials",
            value: 0.0,
        });
    }
    let (lo, hi) = if x1 < x2 { (x1, x2) } else { (x2, x1) };
    let e = k * (hi - lo);
    let (mut wins, mut region) = (0u64, 0u64);
    for (c, len) in chunks(trials) {
        let mut rng = DetRng::stream(seed, c);
        for _ in 0..len {
            let secret_is_hi = rng.coin();
            let x = if secret_is_hi { hi } else { lo };
            let y = x + rng.uniform(-e, e);
            let guess_hi = match adversary {
                Adversary::CoinFlip => rng.coin(),
                Adversary::Region if y < hi - e => false,
                Adversary::Region if y > lo + e => true,
                Adversary::Region => rng.coin(),
            };
            if y < hi - e || y > lo + e {
                region += 1;
            }
            if guess_hi == secret_is_hi {
                wins += 1;
            }
        }
    }
    Ok(MaskingGameResult {
        trials,
        success_rate: wins as f64 / trials as f64,
        region_rate: region as f64 / trials as f64,
        stated_success: 0.5 + 0.5 * stated,
        exact_region_probability: 1.0 / (2.0 * k),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackTrialConfig {
    x_min: f64,
    x_max: f64,
    k: f64,
    trials: u64,
    seed: u64,
}

impl AttackTrialConfig {
    pub fn new(x_min: f64, x_max: f64, k: f64, trials: u64, seed: u64) -> Result<Self, DomainError> {
        if !(x_min < x_max && (x_max - x_min).is_finite()) {
            return Err(DomainError {
                what: "x_max - x_min",
                value: x_max - x_min,
            });
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(DomainError {
                what: "mask scale k",
                value: k,
            });
        }
        if trials == 0 {
            return Err(DomainError {
                what: "trials",
                value: 0.0,
            });
        }
        Ok(AttackTrialConfig {
            x_min,
            x_max,
            k,
            trials,
            seed,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn range(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn epsilon(&self) -> f64 {
        self.k * self.range()
    }
}

/// Mean absolute recovery errors, as fractions of the value range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackResult {
    pub random_baseline_error: f64,
    pub bounded_guess_error: f64,
}

/// Recovers `x` from `x + e`: either guessing uniformly in the value range
/// (baseline) or uniformly in `[x_m - eps, x_m + eps]` clipped to the range.
pub fn simulate_mask_attack(config: &AttackTrialConfig) -> AttackResult {
    let (lo, hi, eps) = (config.x_min, config.x_max, config.epsilon());
    let (mut baseline, mut bounded) = (0.0f64, 0.0f64);
    for (c, len) in chunks(config.trials) {
        let mut rng = DetRng::stream(config.seed, c);
        for _ in 0..len {
            let x = rng.uniform(lo, hi);
            let xm = x + rng.uniform(-eps, eps);
            baseline += libm::fabs(x - rng.uniform(lo, hi));
            let guess = rng.uniform((xm - eps).max(lo), (xm + eps).min(hi));
            bounded += libm::fabs(x - guess);
        }
    }
    let scale = config.trials as f64 * config.range();
    AttackResult {
        random_baseline_error: baseline / scale,
        bounded_guess_error: bounded / scale,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionCell {
    pub n: u64,
    pub alpha: f64,
    pub beta: f64,
    pub rounds: u32,
    pub a: u64,
    pub b: u64,
    pub closed_form: f64,
    pub simulated: f64,
    pub trials: u64,
    /// Simulation more than three standard errors from the closed form.
    pub flagged: bool,
}

/// Simulated miss rate of `rounds` independent checks of `a` out of `n`
/// units when `b` of them are bad.
pub fn simulate_detection(n: u64, a: u64, b: u64, rounds: u32, trials: u64, seed: u64) -> f64 {
    let (n_us, a_us) = (n as usize, a as usize);
    let mut misses = 0u64;
    for (c, len) in chunks(trials) {
        let mut rng = DetRng::stream(seed, c);
        for _ in 0..len {
            // Units 0..b are the corrupted ones.
            let missed = (0..rounds).all(|_| rng.sample_indices(n_us, a_us).iter().all(|&u| u as u64 >= b));
            misses += missed as u64;
        }
    }
    misses as f64 / trials as f64
}

/// Whether `observed` lies within three standard errors of `p`.
pub fn within_three_sigma(observed: f64, p: f64, trials: u64) -> bool {
    libm::fabs(observed - p) <= 3.0 * binomial_std_error(p, trials)
}

pub fn tabulate_detection(
    n_grid: &[u64],
    alpha_grid: &[f64],
    beta_grid: &[f64],
    k_grid: &[u32],
    trials: u64,
    seed: u64,
) -> Result<Vec<DetectionCell>, DomainError> {
    if n_grid.is_empty() || alpha_grid.is_empty() || beta_grid.is_empty() || k_grid.is_empty() {
        return Err(DomainError {
            what: "grid size",
            value: 0.0,
        });
    }
    if trials == 0 {
        return Err(DomainError {
            what: "trials",
            value: 0.0,
        });
    }
    let mut cells = Vec::new();
    for &n in n_grid {
        for &alpha in alpha_grid {
            for &beta in beta_grid {
                for &rounds in k_grid {
                    let closed_form = detection_failure_probability(n, alpha, beta, rounds)?;
                    let a = (ceil_tolerant(alpha * n as f64) as u64).clamp(1, n);
                    let b = (ceil_tolerant(beta * n as f64) as u64).min(n);
                    let cell_seed = seed ^ (cells.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                    let simulated = simulate_detection(n, a, b, rounds, trials, cell_seed);
                    cells.push(DetectionCell {
                        n,
                        alpha,
                        beta,
                        rounds,
                        a,
                        b,
                        closed_form,
                        simulated,
                        trials,
                        flagged: !within_three_sigma(simulated, closed_form, trials),
                    });
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepOption {
    None,
    Privacy,
    Confidentiality,
    Both,
}

impl SweepOption {
    pub fn label(self) -> &'static str {
        match self {
            SweepOption::None => "none",
            SweepOption::Privacy => "p",
            SweepOption::Confidentiality => "c",
            SweepOption::Both => "pc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub k: f32,
    pub option: SweepOption,
    /// Fraction of inputs whose argmax matches unmasked local inference.
    pub agreement: f64,
    /// Mean of `||y - y_plain|| / ||y_plain||` (L2 norms).
    pub mean_relative_error: f64,
}

fn l2(values: impl Iterator<Item = f32>) -> f64 {
    libm::sqrt(values.map(|v| (v as f64) * (v as f64)).sum())
}

/// Runs layered offload of `corpus` through in-process workers at each
/// mask scale in `ks`.
pub fn sweep_k(
    model: &ModelSpec,
    corpus: &[Tensor],
    ks: &[f32],
    option: SweepOption,
    seed: u64,
) -> Result<Vec<SweepRow>, ClientError> {
    let plain: Vec<Tensor> = corpus
        .iter()
        .map(|x| model.forward(x).map(|(y, _)| y))
        .collect::<Result<_, _>>()?;
    let ranges = layer_input_ranges(model, corpus)?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut plan = OffloadPlan::layered(model, 1.0);
        if matches!(option, SweepOption::Privacy | SweepOption::Both) {
            plan = plan.with_privacy(k);
        }
        if matches!(option, SweepOption::Confidentiality | SweepOption::Both) {
            plan = plan.with_confidentiality(k);
        }
        let links = (0..plan.workers_required())
            .map(|_| LocalLink::new(Worker::default()))
            .collect();
        let mut client = Client::new(model.clone(), plan, links)?;
        client.setup(seed)?;
        client.prepare_masks(corpus.len(), &ranges, seed.wrapping_add(1))?;
        let (mut agree, mut err_sum) = (0usize, 0.0f64);
        for (x, y0) in corpus.iter().zip(&plain) {
            let (y, _) = client.offload_infer(x)?;
            agree += (y.argmax() == y0.argmax()) as usize;
            let diff = l2(y.data().iter().zip(y0.data()).map(|(a, b)| a - b));
            let norm = l2(y0.data().iter().copied());
            err_sum += if norm > 0.0 { diff / norm } else { diff };
        }
        let count = corpus.len().max(1) as f64;
        rows.push(SweepRow {
            k,
            option,
            agreement: agree as f64 / count,
            mean_relative_error: err_sum / count,
        });
    }
    Ok(rows)
}
