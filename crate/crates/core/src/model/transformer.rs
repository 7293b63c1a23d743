//! Forward pass with activation cache, and its exact reverse-mode pass.
//!
//! Pre-norm blocks: `x += drop(attn(ln1(x)))`, `x += drop(mlp(ln2(x)))`,
//! GELU (tanh form) in the MLP, a final layer norm, and logits read off the
//! tied token embedding. Weight matrices are stored `[in x out]`.

use rand::Rng;

use super::{LayerLayout, Real, TransformerParams};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

struct LayerCache<T> {
    x_in: Vec<T>,
    a: Vec<T>,
    mu1: Vec<T>,
    rs1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    att: Vec<T>,
    y: Vec<T>,
    drop_attn: Option<Vec<T>>,
    x_mid: Vec<T>,
    m: Vec<T>,
    mu2: Vec<T>,
    rs2: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
    drop_mlp: Option<Vec<T>>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache<T> {
    tokens: Vec<u32>,
    drop_emb: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    muf: Vec<T>,
    rsf: Vec<T>,
    /// Final layer-norm output, `[T x d]`.
    pub hidden: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hidden_at(&self, t: usize, d: usize) -> &[T] {
        &self.hidden[t * d..(t + 1) * d]
    }
}

fn dropout_mask<T: Real, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (a, &b) in x.iter_mut().zip(m) {
            *a *= b;
        }
    }
}

fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut mus = Vec::with_capacity(n);
    let mut rss = Vec::with_capacity(n);
    let dd = T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mu = row.iter().copied().sum::<T>() / dd;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dd;
        let rs = T::one() / (var + eps).sqrt();
        for (i, o) in out[t * d..(t + 1) * d].iter_mut().enumerate() {
            *o = (row[i] - mu) * rs * g[i] + b[i];
        }
        mus.push(mu);
        rss.push(rs);
    }
    (out, mus, rss)
}

/// Accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_back<T: Real>(
    x: &[T],
    g: &[T],
    mus: &[T],
    rss: &[T],
    dout: &[T],
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let dd = T::lit(d as f64);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for t in 0..mus.len() {
        let (mu, rs) = (mus[t], rss[t]);
        let row = &x[t * d..(t + 1) * d];
        let drow = &dout[t * d..(t + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            xhat[i] = (row[i] - mu) * rs;
            dxhat[i] = drow[i] * g[i];
            dg[i] += drow[i] * xhat[i];
            db[i] += drow[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
        }
        mean_dxhat /= dd;
        mean_dxhat_xhat /= dd;
        for (i, o) in dx[t * d..(t + 1) * d].iter_mut().enumerate() {
            *o += rs * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

fn linear<T: Real>(x: &[T], din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let n = x.len() / din;
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    for t in 0..n {
        let yrow = &mut y[t * dout..(t + 1) * dout];
        for (i, &xi) in x[t * din..(t + 1) * din].iter().enumerate() {
            let wrow = &w[i * dout..(i + 1) * dout];
            for (yj, &wj) in yrow.iter_mut().zip(wrow) {
                *yj += xi * wj;
            }
        }
    }
    y
}

/// `dx += dy W^T`, `dw += x^T dy`.
fn linear_back<T: Real>(x: &[T], dy: &[T], din: usize, dout: usize, w: &[T], dx: &mut [T], dw: &mut [T]) {
    let n = x.len() / din;
    for t in 0..n {
        let dyrow = &dy[t * dout..(t + 1) * dout];
        for i in 0..din {
            let xi = x[t * din + i];
            let wrow = &w[i * dout..(i + 1) * dout];
            let dwrow = &mut dw[i * dout..(i + 1) * dout];
            let mut acc = T::zero();
            for j in 0..dout {
                acc += wrow[j] * dyrow[j];
                dwrow[j] += xi * dyrow[j];
            }
            dx[t * din + i] += acc;
        }
    }
}

fn bias_back<T: Real>(dy: &[T], dout: usize, db: &mut [T]) {
    for row in dy.chunks_exact(dout) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
}

fn gelu_consts<T: Real>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

fn gelu<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn attention<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut att = vec![T::zero(); heads * n * n];
    let mut y = vec![T::zero(); n * d];
    for h in 0..heads {
        let off = h * dh;
        for t in 0..n {
            let qt = &q[t * d + off..t * d + off + dh];
            let row = &mut att[(h * n + t) * n..(h * n + t) * n + n];
            let mut max = T::neg_infinity();
            for u in 0..=t {
                let ku = &k[u * d + off..u * d + off + dh];
                let s = qt.iter().zip(ku).map(|(&a, &b)| a * b).sum::<T>() * scale;
                row[u] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = T::zero();
            for r in row[..=t].iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row[..=t].iter_mut() {
                *r /= sum;
            }
            let yt = &mut y[t * d + off..t * d + off + dh];
            for u in 0..=t {
                let p = row[u];
                for (o, &vv) in yt.iter_mut().zip(&v[u * d + off..u * d + off + dh]) {
                    *o += p * vv;
                }
            }
        }
    }
    (att, y)
}

#[allow(clippy::too_many_arguments)]
fn attention_back<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    att: &[T],
    dy: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        for t in 0..n {
            let p = &att[(h * n + t) * n..(h * n + t) * n + n];
            let dyt = &dy[t * d + off..t * d + off + dh];
            let mut dot = T::zero();
            for u in 0..=t {
                let vu = &v[u * d + off..u * d + off + dh];
                dp[u] = dyt.iter().zip(vu).map(|(&a, &b)| a * b).sum();
                dot += p[u] * dp[u];
                for (o, &g) in dv[u * d + off..u * d + off + dh].iter_mut().zip(dyt) {
                    *o += p[u] * g;
                }
            }
            for u in 0..=t {
                let ds = p[u] * (dp[u] - dot) * scale;
                for i in 0..dh {
                    dq[t * d + off + i] += ds * k[u * d + off + i];
                    dk[u * d + off + i] += ds * q[t * d + off + i];
                }
            }
        }
    }
    (dq, dk, dv)
}

impl<T: Real> TransformerParams<T> {
    /// Runs the network over `tokens`; dropout is drawn from `rng` only when
    /// `train` is set and the configured rate is positive.
    pub fn forward_cached<R: Rng + ?Sized>(&self, tokens: &[u32], train: bool, rng: &mut R) -> Result<ForwardCache<T>> {
        let cfg = &self.config;
        let (n, d) = (tokens.len(), cfg.width);
        if n > cfg.context {
            return Err(Error::ContextOverflow {
                len: n,
                context: cfg.context,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: cfg.vocab,
            });
        }
        let p_drop = if train { cfg.dropout } else { 0.0 };
        let mut draw = |len: usize| -> Option<Vec<T>> {
            (p_drop > 0.0).then(|| dropout_mask(len, p_drop, rng))
        };

        let wte = self.get(self.layout.wte);
        let wpe = self.get(self.layout.wpe);
        let mut x = Vec::with_capacity(n * d);
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &wte[tok as usize * d..(tok as usize + 1) * d];
            let pe = &wpe[t * d..(t + 1) * d];
            x.extend(e.iter().zip(pe).map(|(&a, &b)| a + b));
        }
        let drop_emb = draw(n * d);
        apply_mask(&mut x, &drop_emb);

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in &self.layout.layers {
            let (a, mu1, rs1) = layer_norm(&x, self.get(l.ln1_g), self.get(l.ln1_b), d);
            let q = linear(&a, d, self.get(l.wq), self.get(l.bq), d);
            // a key bias shifts every score in a query row equally, so it cannot move the softmax
            let k = linear(&a, d, self.get(l.wk), &vec![T::zero(); d], d);
            let v = linear(&a, d, self.get(l.wv), self.get(l.bv), d);
            let (att, y) = attention(&q, &k, &v, n, d, cfg.heads);
            let mut o = linear(&y, d, self.get(l.wo), self.get(l.bo), d);
            let drop_attn = draw(n * d);
            apply_mask(&mut o, &drop_attn);
            let x_mid: Vec<T> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
            let (m, mu2, rs2) = layer_norm(&x_mid, self.get(l.ln2_g), self.get(l.ln2_b), d);
            let h_pre = linear(&m, d, self.get(l.w1), self.get(l.b1), 4 * d);
            let h_act: Vec<T> = h_pre.iter().map(|&v| gelu(v)).collect();
            let mut f = linear(&h_act, 4 * d, self.get(l.w2), self.get(l.b2), d);
            let drop_mlp = draw(n * d);
            apply_mask(&mut f, &drop_mlp);
            let x_out: Vec<T> = x_mid.iter().zip(&f).map(|(&a, &b)| a + b).collect();
            layers.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_out),
                a,
                mu1,
                rs1,
                q,
                k,
                v,
                att,
                y,
                drop_attn,
                x_mid,
                m,
                mu2,
                rs2,
                h_pre,
                h_act,
                drop_mlp,
            });
        }
        let (hidden, muf, rsf) = layer_norm(&x, self.get(self.layout.lnf_g), self.get(self.layout.lnf_b), d);
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            drop_emb,
            layers,
            x_final: x,
            muf,
            rsf,
            hidden,
        })
    }

    /// Logits for a subset of tokens given one hidden row.
    pub fn logits_for(&self, hidden: &[T], tokens: &[u32]) -> Vec<T> {
        let d = self.config.width;
        let wte = self.get(self.layout.wte);
        tokens
            .iter()
            .map(|&v| {
                let e = &wte[v as usize * d..(v as usize + 1) * d];
                e.iter().zip(hidden).map(|(&a, &b)| a * b).sum()
            })
            .collect()
    }

    pub fn logits_all(&self, hidden: &[T]) -> Vec<T> {
        let d = self.config.width;
        self.get(self.layout.wte)
            .chunks_exact(d)
            .map(|e| e.iter().zip(hidden).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// Back-propagates `d_hidden` (gradient w.r.t. the final layer-norm
    /// output) through the network, accumulating into `grad`.
    pub fn backward_cached(&self, cache: &ForwardCache<T>, d_hidden: &[T], grad: &mut [T]) {
        let cfg = &self.config;
        let (n, d) = (cache.len(), cfg.width);
        let lay = &self.layout;

        let mut dx = vec![T::zero(); n * d];
        {
            let (dg, db) = split_two(grad, lay.lnf_g.range(), lay.lnf_b.range());
            layer_norm_back(
                &cache.x_final,
                self.get(lay.lnf_g),
                &cache.muf,
                &cache.rsf,
                d_hidden,
                d,
                &mut dx,
                dg,
                db,
            );
        }

        for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_back(l, c, dx, n, grad);
        }

        apply_mask(&mut dx, &cache.drop_emb);
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let e = &mut grad[lay.wte.offset + tok as usize * d..][..d];
            for (g, &v) in e.iter_mut().zip(row) {
                *g += v;
            }
            let pe = &mut grad[lay.wpe.offset + t * d..][..d];
            for (g, &v) in pe.iter_mut().zip(row) {
                *g += v;
            }
        }
    }

    fn layer_back(&self, l: &LayerLayout, c: &LayerCache<T>, dx_out: Vec<T>, n: usize, grad: &mut [T]) -> Vec<T> {
        let d = self.config.width;
        let heads = self.config.heads;

        // mlp branch
        let mut dx_mid = dx_out.clone();
        let mut df = dx_out;
        apply_mask(&mut df, &c.drop_mlp);
        bias_back(&df, d, &mut grad[l.b2.range()]);
        let mut dh = vec![T::zero(); n * 4 * d];
        linear_back(&c.h_act, &df, 4 * d, d, self.get(l.w2), &mut dh, &mut grad[l.w2.range()]);
        for (g, &x) in dh.iter_mut().zip(&c.h_pre) {
            *g *= gelu_grad(x);
        }
        bias_back(&dh, 4 * d, &mut grad[l.b1.range()]);
        let mut dm = vec![T::zero(); n * d];
        linear_back(&c.m, &dh, d, 4 * d, self.get(l.w1), &mut dm, &mut grad[l.w1.range()]);
        {
            let (dg, db) = split_two(grad, l.ln2_g.range(), l.ln2_b.range());
            layer_norm_back(&c.x_mid, self.get(l.ln2_g), &c.mu2, &c.rs2, &dm, d, &mut dx_mid, dg, db);
        }

        // attention branch
        let mut dx_in = dx_mid.clone();
        let mut d_o = dx_mid;
        apply_mask(&mut d_o, &c.drop_attn);
        bias_back(&d_o, d, &mut grad[l.bo.range()]);
        let mut dy = vec![T::zero(); n * d];
        linear_back(&c.y, &d_o, d, d, self.get(l.wo), &mut dy, &mut grad[l.wo.range()]);
        let (dq, dk, dv) = attention_back(&c.q, &c.k, &c.v, &c.att, &dy, n, d, heads);
        let mut da = vec![T::zero(); n * d];
        for (dproj, w, b) in [(&dq, l.wq, Some(l.bq)), (&dk, l.wk, None), (&dv, l.wv, Some(l.bv))] {
            if let Some(b) = b {
                bias_back(dproj, d, &mut grad[b.range()]);
            }
            linear_back(&c.a, dproj, d, d, self.get(w), &mut da, &mut grad[w.range()]);
        }
        {
            let (dg, db) = split_two(grad, l.ln1_g.range(), l.ln1_b.range());
            layer_norm_back(&c.x_in, self.get(l.ln1_g), &c.mu1, &c.rs1, &da, d, &mut dx_in, dg, db);
        }
        dx_in
    }
}

/// Two disjoint mutable windows of `v`; `a` must precede `b`.
fn split_two<T>(v: &mut [T], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = v.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

/// Full logits `[T x vocab]` for a token sequence.
pub fn forward<T: Real, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    tokens: &[u32],
    train: bool,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    let cache = params.forward_cached(tokens, train, rng)?;
    let d = params.config.width;
    Ok((0..cache.len())
        .map(|t| params.logits_all(cache.hidden_at(t, d)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            width: 8,
            heads: 2,
            context: 6,
            vocab: 10,
            dropout: 0.0,
        }
    }

    #[test]
    fn zero_embeddings_give_uniform_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p: TransformerParams<f64> = init_model(cfg(), &mut rng).unwrap();
        let wte = p.layout.wte;
        p.get_mut(wte).fill(0.0);
        let logits = forward(&p, &[1, 2, 3], false, &mut rng).unwrap();
        for row in logits {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn causal_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: TransformerParams<f64> = init_model(cfg(), &mut rng).unwrap();
        let base = [1u32, 4, 2, 7, 3, 5];
        let ref_logits = forward(&p, &base, false, &mut rng).unwrap();
        for t in 0..base.len() {
            let mut probe = base;
            probe[t] = (probe[t] + 1) % 10;
            let logits = forward(&p, &probe, false, &mut rng).unwrap();
            for s in 0..base.len() {
                let same = logits[s] == ref_logits[s];
                assert_eq!(same, s < t, "perturb {t}, position {s}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: TransformerParams<f32> = init_model(cfg(), &mut rng).unwrap();
        assert!(matches!(
            forward(&p, &[0; 7], false, &mut rng),
            Err(Error::ContextOverflow { .. })
        ));
        assert!(matches!(
            forward(&p, &[10], false, &mut rng),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: TransformerParams<f32> = init_model(cfg(), &mut rng).unwrap();
        for row in forward(&p, &[3, 1, 4, 1, 5], false, &mut rng).unwrap() {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f32 = e.iter().sum();
            let total: f32 = e.iter().map(|v| v / s).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
