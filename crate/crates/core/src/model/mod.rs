//! A small GPT-style causal transformer with a hand-written backward pass.
//!
//! Parameters live in one flat vector in a canonical order (see
//! [`ParamLayout`]) so that per-example gradients, the optimizer and the
//! checkpoint blob all share the same indexing. The output projection is the
//! token embedding matrix itself.

mod loss;
mod transformer;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{backward, row_loss, row_nll, row_terms, Guiding, PositionTerm};
pub use transformer::{forward, ForwardCache};

/// Floating-point type the model can run in.
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// 4 layers, width 256, 4 heads.
    pub fn reference(vocab: usize, context: usize) -> Self {
        ModelConfig {
            layers: 4,
            width: 256,
            heads: 4,
            context,
            vocab,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::ModelConfig(format!(
                "d not divisible by heads ({} / {})",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.width == 0 || self.context == 0 || self.vocab == 0 {
            return Err(Error::ModelConfig("layers, width, context and vocab must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::ModelConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// A contiguous slice of the flat parameter vector, viewed as `rows x cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub wte: Tensor,
    pub wpe: Tensor,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub total: usize,
}

struct Alloc(usize);

impl Alloc {
    fn take(&mut self, rows: usize, cols: usize) -> Tensor {
        let t = Tensor {
            offset: self.0,
            rows,
            cols,
        };
        self.0 += rows * cols;
        t
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        let mut a = Alloc(0);
        let wte = a.take(cfg.vocab, d);
        let wpe = a.take(cfg.context, d);
        let layers = (0..cfg.layers)
            .map(|_| LayerLayout {
                ln1_g: a.take(1, d),
                ln1_b: a.take(1, d),
                wq: a.take(d, d),
                bq: a.take(1, d),
                wk: a.take(d, d),
                bk: a.take(1, d),
                wv: a.take(d, d),
                bv: a.take(1, d),
                wo: a.take(d, d),
                bo: a.take(1, d),
                ln2_g: a.take(1, d),
                ln2_b: a.take(1, d),
                w1: a.take(d, 4 * d),
                b1: a.take(1, 4 * d),
                w2: a.take(4 * d, d),
                b2: a.take(1, d),
            })
            .collect();
        let lnf_g = a.take(1, d);
        let lnf_b = a.take(1, d);
        ParamLayout {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            total: a.0,
        }
    }

    /// Every tensor with its canonical name, in storage order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("wte".to_string(), self.wte), ("wpe".to_string(), self.wpe)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("h.{i}.{n}");
            out.extend([
                (p("ln1.g"), l.ln1_g),
                (p("ln1.b"), l.ln1_b),
                (p("attn.wq"), l.wq),
                (p("attn.bq"), l.bq),
                (p("attn.wk"), l.wk),
                (p("attn.bk"), l.bk),
                (p("attn.wv"), l.wv),
                (p("attn.bv"), l.bv),
                (p("attn.wo"), l.wo),
                (p("attn.bo"), l.bo),
                (p("ln2.g"), l.ln2_g),
                (p("ln2.b"), l.ln2_b),
                (p("mlp.w1"), l.w1),
                (p("mlp.b1"), l.b1),
                (p("mlp.w2"), l.w2),
                (p("mlp.b2"), l.b2),
            ]);
        }
        out.push(("lnf.g".to_string(), self.lnf_g));
        out.push(("lnf.b".to_string(), self.lnf_b));
        out
    }
}

/// Closed-form parameter count for a config.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.width;
    let per_layer = 4 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
    cfg.vocab * d + cfg.context * d + cfg.layers * per_layer + 2 * d
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<T> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<T>,
}

impl<T: Real> TransformerParams<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let data = vec![T::zero(); layout.total];
        Ok(TransformerParams { config, layout, data })
    }

    pub fn from_data(config: ModelConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                data.len()
            )));
        }
        Ok(TransformerParams { config, layout, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, t: Tensor) -> &[T] {
        &self.data[t.range()]
    }

    pub fn get_mut(&mut self, t: Tensor) -> &mut [T] {
        &mut self.data[t.range()]
    }

    pub fn cast<U: Real>(&self) -> TransformerParams<U> {
        TransformerParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Gaussian weights (std 0.02), zero biases, unit layer-norm gains.
pub fn init_model<T: Real, R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<TransformerParams<T>> {
    let mut p = TransformerParams::<T>::zeros(config)?;
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let layout = p.layout.clone();
    let mut weights = vec![layout.wte, layout.wpe];
    let mut gains = vec![layout.lnf_g];
    for l in &layout.layers {
        weights.extend([l.wq, l.wk, l.wv, l.wo, l.w1, l.w2]);
        gains.extend([l.ln1_g, l.ln2_g]);
    }
    // sample in canonical order so a seed fixes every value
    for (_, t) in layout.named() {
        if weights.contains(&t) {
            for v in p.get_mut(t) {
                *v = T::lit(normal.sample(rng));
            }
        } else if gains.contains(&t) {
            p.get_mut(t).fill(T::one());
        }
    }
    Ok(p)
}

/// Gradient of one example's loss, aligned with [`ParamLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrad<T> {
    pub values: Vec<T>,
    pub norm: T,
}

impl<T: Real> PerExampleGrad<T> {
    pub fn new(values: Vec<T>) -> Self {
        let norm = l2_norm(&values);
        PerExampleGrad { values, norm }
    }
}

pub fn l2_norm<T: Real>(v: &[T]) -> T {
    // accumulate in f64 so large f32 vectors keep precision
    let s: f64 = v
        .iter()
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum();
    T::lit(s.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            width: 6,
            heads: 2,
            context: 5,
            vocab: 7,
            dropout: 0.0,
        }
    }

    #[test]
    fn count_matches_closed_form() {
        let cfg = tiny();
        // d=6: wte 42, wpe 30, per layer 4*6 + 4*42 + (144+24) + (144+6) = 510, lnf 12
        assert_eq!(parameter_count(&cfg), 42 + 30 + 2 * 510 + 12);
        assert_eq!(ParamLayout::new(&cfg).total, parameter_count(&cfg));
        let named = ParamLayout::new(&cfg).named();
        let mut next = 0;
        for (_, t) in named {
            assert_eq!(t.offset, next);
            next += t.len();
        }
        assert_eq!(next, parameter_count(&cfg));
    }

    #[test]
    fn init_is_deterministic() {
        let a: TransformerParams<f32> = init_model(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: TransformerParams<f32> = init_model(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let l = &a.layout.layers[0];
        assert!(a.get(l.bq).iter().all(|&v| v == 0.0));
        assert!(a.get(l.ln1_g).iter().all(|&v| v == 1.0));
        assert!(a.get(a.layout.wte).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = tiny();
        cfg.width = 4;
        cfg.heads = 3;
        let err = TransformerParams::<f32>::zeros(cfg).unwrap_err();
        assert!(err.to_string().contains("d not divisible by heads"));
    }
}
