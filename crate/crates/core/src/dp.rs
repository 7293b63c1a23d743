//! DP-SGD: Poisson sampling, AugMult, per-example clipping, Gaussian noise
//! and AdamW.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{backward, Guiding, PerExampleGrad, Real, TransformerParams};
use crate::sentence::{encode_row, sample_order, OrderPolicy, Vocabulary};
use crate::table::{Discretizer, LevelRow};
use crate::trie::ColumnTrieSet;

/// Clipping, noise and sampling for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip: f64,
    /// `σ`; zero disables noise and accounting.
    pub noise_multiplier: f64,
    pub expected_batch: usize,
    pub steps: u64,
    /// AugMult multiplicity.
    pub augmult: usize,
    /// `None` for non-private training.
    pub target_epsilon: Option<f64>,
    pub delta: f64,
}

impl DpConfig {
    /// Full-batch, noiseless, effectively unclipped.
    pub fn non_private(expected_batch: usize, steps: u64) -> Self {
        DpConfig {
            clip: 1e9,
            noise_multiplier: 0.0,
            expected_batch,
            steps,
            augmult: 1,
            target_epsilon: None,
            delta: 1e-6,
        }
    }

    pub fn sample_rate(&self, n: usize) -> f64 {
        self.expected_batch as f64 / n as f64
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if n == 0 {
            return bad("training set is empty".into());
        }
        if self.expected_batch == 0 || self.expected_batch > n {
            return bad(format!("expected batch {} must lie in [1, {n}]", self.expected_batch));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip norm must be positive, got {}", self.clip));
        }
        if !(self.noise_multiplier >= 0.0) {
            return bad(format!("noise multiplier must be non-negative, got {}", self.noise_multiplier));
        }
        if self.augmult == 0 {
            return bad("augmult multiplicity must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} outside (0, 1)", self.delta));
        }
        if let Some(eps) = self.target_epsilon {
            if !(eps > 0.0) {
                return bad(format!("target epsilon must be positive, got {eps}"));
            }
            if self.noise_multiplier == 0.0 {
                return bad("a finite epsilon needs a positive noise multiplier".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(total: u64) -> Self {
        LrSchedule {
            base: 5e-4,
            warmup: 100,
            total,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        lr_at(step, self.base, self.warmup, self.total)
    }
}

/// Linear warm-up from 0 to `base`, then linear decay to 0 at `total`.
pub fn lr_at(step: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    base * (total - step) as f64 / (total - warmup).max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Updates applied so far.
    pub step: u64,
    pub schedule: LrSchedule,
    pub adam: AdamW,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(len: usize, schedule: LrSchedule, adam: AdamW) -> Self {
        OptimizerState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            schedule,
            adam,
        }
    }

    /// One decoupled-weight-decay Adam update; returns the learning rate used.
    pub fn update(&mut self, params: &mut [T], grad: &[T]) -> Result<f64> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Numeric(format!(
                "optimizer holds {} moments but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at coordinate {i}")));
        }
        let a = self.adam;
        let lr = self.schedule.at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - a.beta1.powi(t);
        let bc2_sqrt = (1.0 - a.beta2.powi(t)).sqrt();
        let decay = T::lit(1.0 - lr * a.weight_decay);
        let (b1, b2) = (T::lit(a.beta1), T::lit(a.beta2));
        let (c1, c2) = (T::lit(1.0 - a.beta1), T::lit(1.0 - a.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2_sqrt);
        let eps = T::lit(a.eps);
        for (((p, m), v), &g) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
            *p *= decay;
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let denom = v.sqrt() / bc2_sqrt + eps;
            *p -= step_size * (*m / denom);
        }
        Ok(lr)
    }
}

/// Indices kept independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

/// Scales `g` to norm at most `c`.
pub fn clip<T: Real>(g: PerExampleGrad<T>, c: f64) -> PerExampleGrad<T> {
    let norm = g.norm.to_f64().unwrap_or(f64::NAN);
    if norm <= c {
        return g;
    }
    let s = T::lit(c / norm);
    PerExampleGrad::new(g.values.into_iter().map(|v| v * s).collect())
}

/// Everything a training step reads besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub vocab: &'a Vocabulary,
    pub disc: &'a Discretizer,
    pub tries: &'a ColumnTrieSet,
    pub rows: &'a [LevelRow],
}

/// Mean loss and gradient over `p` augmented copies of one row, each with
/// its own column order (under the random policy) and dropout draw.
pub fn augmult_grad<T: Real, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    data: &TrainData,
    row: &LevelRow,
    p: usize,
    policy: OrderPolicy,
    guiding: Guiding,
    rng: &mut R,
) -> Result<(T, PerExampleGrad<T>)> {
    if p == 0 {
        return Err(Error::Config("augmult multiplicity must be at least 1".into()));
    }
    let mut sum = vec![T::zero(); params.len()];
    let mut loss = T::zero();
    for _ in 0..p {
        let order = sample_order(data.vocab.num_columns(), policy, rng);
        let encoded = encode_row(data.vocab, data.disc, row, &order)?;
        let (l, g) = backward(params, data.vocab, data.tries, &encoded, guiding, true, rng)?;
        loss += l;
        for (s, v) in sum.iter_mut().zip(g.values) {
            *s += v;
        }
    }
    if p > 1 {
        let k = T::lit(p as f64);
        sum.iter_mut().for_each(|s| *s /= k);
        loss /= k;
    }
    Ok((loss, PerExampleGrad::new(sum)))
}

/// `(Σ clipped + z) / B` with `z ~ N(0, σ²C²)` per coordinate.
pub fn noisy_mean<T: Real, R: Rng + ?Sized>(
    sum: &[T],
    sigma: f64,
    clip: f64,
    expected_batch: f64,
    rng: &mut R,
) -> Vec<T> {
    let b = T::lit(expected_batch);
    if sigma == 0.0 {
        return sum.iter().map(|&s| s / b).collect();
    }
    let std = sigma * clip;
    sum.iter()
        .map(|&s| {
            let z: f64 = rng.sample(StandardNormal);
            (s + T::lit(std * z)) / b
        })
        .collect()
}

/// Privatizes the clipped sum and applies one AdamW update; returns the
/// learning rate used.
#[allow(clippy::too_many_arguments)]
pub fn noisy_step<T: Real, R: Rng + ?Sized>(
    params: &mut TransformerParams<T>,
    clipped_sum: &[T],
    sigma: f64,
    clip: f64,
    expected_batch: f64,
    opt: &mut OptimizerState<T>,
    rng: &mut R,
) -> Result<f64> {
    let g = noisy_mean(clipped_sum, sigma, clip, expected_batch, rng);
    opt.update(&mut params.data, &g)
}

/// Where Gaussian noise comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSource {
    /// Derived from the run seed; reproducible, for testing only.
    #[default]
    Seeded,
    /// Seeded from the operating system once per run.
    Os,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub dp: DpConfig,
    pub order: OrderPolicy,
    pub guiding: Guiding,
    pub seed: u64,
    /// Worker threads for per-example gradients; 0 uses all cores.
    pub workers: usize,
    pub noise: NoiseSource,
    /// Halts once this many updates are applied, leaving a resumable state.
    #[serde(default)]
    pub stop_at: Option<u64>,
}

/// One line of training telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub batch: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub grad_norm_mean: Option<f64>,
    pub grad_norm_max: Option<f64>,
    pub clipped_fraction: Option<f64>,
    pub epsilon: Option<f64>,
}

/// State handed to the per-step observer.
pub struct Progress<'a, T> {
    pub record: &'a StepRecord,
    pub params: &'a TransformerParams<T>,
    pub opt: &'a OptimizerState<T>,
    pub ledger: &'a PrivacyLedger,
}

const SAMPLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

struct Example<T> {
    loss: f64,
    norm: f64,
    grad: Vec<T>,
}

/// Runs steps `opt.step..dp.steps` (or up to `stop_at`), composing the ledger as it goes. The
/// observer sees every step after its update.
pub fn train<T: Real>(
    params: &mut TransformerParams<T>,
    opt: &mut OptimizerState<T>,
    ledger: &mut PrivacyLedger,
    data: &TrainData,
    options: &TrainOptions,
    mut observe: impl FnMut(Progress<T>) -> Result<()>,
) -> Result<()> {
    let dp = &options.dp;
    let n = data.rows.len();
    dp.validate(n)?;
    if opt.m.len() != params.len() {
        return Err(Error::Config("optimizer state does not match the model".into()));
    }
    let q = dp.sample_rate(n);
    let per_step = (dp.noise_multiplier > 0.0)
        .then(|| ledger.step_rdp(q, dp.noise_multiplier))
        .transpose()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let wave = pool.current_num_threads().max(1) * 2;
    let mut os_noise = (options.noise == NoiseSource::Os).then(ChaCha20Rng::from_os_rng);

    let last = options.stop_at.map_or(dp.steps, |s| s.min(dp.steps));
    while opt.step < last {
        let step = opt.step;
        let mut sampler = ChaCha20Rng::seed_from_u64(derive_seed(options.seed, SAMPLE_STREAM, 0));
        sampler.set_stream(step);
        let batch = poisson_sample(n, q, &mut sampler);

        let mut sum = vec![T::zero(); params.len()];
        let (mut losses, mut norms, mut clipped) = (0.0, Vec::with_capacity(batch.len()), 0usize);
        for chunk in batch.chunks(wave) {
            let shared: &TransformerParams<T> = params;
            let results: Vec<Result<Example<T>>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(options.seed, step + 3, i as u64));
                        let (loss, g) =
                            augmult_grad(shared, data, &data.rows[i], dp.augmult, options.order, options.guiding, &mut rng)?;
                        let norm = g.norm.to_f64().unwrap_or(f64::NAN);
                        let g = clip(g, dp.clip);
                        debug_assert!(g.norm.to_f64().unwrap_or(0.0) <= dp.clip * (1.0 + 1e-6));
                        Ok(Example {
                            loss: loss.to_f64().unwrap_or(f64::NAN),
                            norm,
                            grad: g.values,
                        })
                    })
                    .collect()
            });
            for r in results {
                let ex = r?;
                for (s, v) in sum.iter_mut().zip(&ex.grad) {
                    *s += *v;
                }
                losses += ex.loss;
                if ex.norm > dp.clip {
                    clipped += 1;
                }
                norms.push(ex.norm);
            }
        }

        let lr = match os_noise.as_mut() {
            Some(rng) => noisy_step(params, &sum, dp.noise_multiplier, dp.clip, dp.expected_batch as f64, opt, rng)?,
            None => {
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(options.seed, NOISE_STREAM, 0));
                rng.set_stream(step);
                noisy_step(params, &sum, dp.noise_multiplier, dp.clip, dp.expected_batch as f64, opt, &mut rng)?
            }
        };
        if !params.all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite at step {step}")));
        }

        let mut epsilon = None;
        if let Some(rdp) = &per_step {
            ledger.compose_with(rdp, q, dp.noise_multiplier, 1);
            let eps = ledger.to_epsilon(dp.delta)?.epsilon;
            if let Some(target) = dp.target_epsilon {
                if eps > target * (1.0 + 1e-9) {
                    return Err(Error::Privacy(format!(
                        "spent epsilon {eps:.4} exceeds target {target} after {} of {} steps",
                        step + 1,
                        dp.steps
                    )));
                }
            }
            epsilon = Some(eps);
        }

        let k = batch.len();
        let record = StepRecord {
            step: opt.step,
            batch: k,
            loss: (k > 0).then(|| losses / k as f64),
            lr,
            grad_norm_mean: (k > 0).then(|| norms.iter().sum::<f64>() / k as f64),
            grad_norm_max: norms.iter().copied().reduce(f64::max),
            clipped_fraction: (k > 0).then(|| clipped as f64 / k as f64),
            epsilon,
        };
        observe(Progress {
            record: &record,
            params,
            opt,
            ledger,
        })?;
    }
    Ok(())
}
