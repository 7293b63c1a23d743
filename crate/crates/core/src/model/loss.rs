//! Teacher-forced cross-entropy over a sentence, optionally trie-guided.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PerExampleGrad, Real, TransformerParams};
use crate::error::{Error, Result};
use crate::sentence::{EncodedRow, Vocabulary, IGNORE};
use crate::trie::ColumnTrieSet;

/// How next-token distributions are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Guiding {
    /// Softmax over the trie's valid continuations only.
    #[default]
    Trie,
    /// Softmax over the full vocabulary.
    None,
}

/// Negative log-likelihood of one predicted position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionTerm<T> {
    pub position: usize,
    pub column: usize,
    pub nll: T,
}

struct Scored<T> {
    position: usize,
    column: usize,
    nll: T,
    /// (token, d nll / d logit) over the normalization support.
    dlogits: Vec<(u32, T)>,
}

fn candidate_sets<'a>(
    vocab: &Vocabulary,
    tries: &'a ColumnTrieSet,
    encoded: &EncodedRow,
    guiding: Guiding,
) -> Result<Vec<Option<&'a [u32]>>> {
    match guiding {
        Guiding::Trie => tries.guide(vocab, &encoded.inputs, &encoded.targets),
        Guiding::None => {
            if let Some(&t) = encoded.targets.iter().find(|&&t| t != IGNORE && t as usize >= vocab.size()) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: vocab.size(),
                });
            }
            Ok(vec![None; encoded.len()])
        }
    }
}

fn score<T: Real, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    vocab: &Vocabulary,
    tries: &ColumnTrieSet,
    encoded: &EncodedRow,
    guiding: Guiding,
    train: bool,
    rng: &mut R,
) -> Result<(super::ForwardCache<T>, Vec<Scored<T>>)> {
    let sets = candidate_sets(vocab, tries, encoded, guiding)?;
    let cache = params.forward_cached(&encoded.inputs, train, rng)?;
    let d = params.config.width;
    let all: Vec<u32> = (0..vocab.size() as u32).collect();
    let mut column = 0;
    let mut out = Vec::new();
    for (t, &target) in encoded.targets.iter().enumerate() {
        if let Some(c) = vocab.framing_column(encoded.inputs[t]) {
            column = c;
        }
        if target == IGNORE {
            continue;
        }
        let support: &[u32] = sets[t].unwrap_or(&all);
        if support.len() == 1 {
            out.push(Scored {
                position: t,
                column,
                nll: T::zero(),
                dlogits: Vec::new(),
            });
            continue;
        }
        let logits = params.logits_for(cache.hidden_at(t, d), support);
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let ti = support.iter().position(|&s| s == target).expect("target in support");
        let nll = sum.ln() + max - logits[ti];
        let dlogits = support
            .iter()
            .zip(&exps)
            .enumerate()
            .map(|(i, (&tok, &e))| {
                let p = e / sum;
                (tok, if i == ti { p - T::one() } else { p })
            })
            .collect();
        out.push(Scored {
            position: t,
            column,
            nll,
            dlogits,
        });
    }
    Ok((cache, out))
}

/// Per-position NLL terms (nats), tagged with the column they belong to.
pub fn row_terms<T: Real, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    vocab: &Vocabulary,
    tries: &ColumnTrieSet,
    encoded: &EncodedRow,
    guiding: Guiding,
    rng: &mut R,
) -> Result<Vec<PositionTerm<T>>> {
    let (_, scored) = score(params, vocab, tries, encoded, guiding, false, rng)?;
    Ok(scored
        .into_iter()
        .map(|s| PositionTerm {
            position: s.position,
            column: s.column,
            nll: s.nll,
        })
        .collect())
}

/// Sum of per-position NLL: the row's negative log-likelihood in nats.
pub fn row_nll<T: Real, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    vocab: &Vocabulary,
    tries: &ColumnTrieSet,
    encoded: &EncodedRow,
    guiding: Guiding,
    rng: &mut R,
) -> Result<T> {
    Ok(row_terms(params, vocab, tries, encoded, guiding, rng)?
        .into_iter()
        .map(|t| t.nll)
        .sum())
}

/// Mean cross-entropy over predicted positions.
pub fn row_loss<T: Real, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    vocab: &Vocabulary,
    tries: &ColumnTrieSet,
    encoded: &EncodedRow,
    guiding: Guiding,
    train: bool,
    rng: &mut R,
) -> Result<T> {
    let (_, scored) = score(params, vocab, tries, encoded, guiding, train, rng)?;
    if scored.is_empty() {
        return Ok(T::zero());
    }
    let n = T::lit(scored.len() as f64);
    Ok(scored.iter().map(|s| s.nll).sum::<T>() / n)
}

/// Loss and exact gradient of [`row_loss`] for one example. Dropout (when
/// `train`) draws from `rng` exactly as `row_loss` would.
pub fn backward<T: Real, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    vocab: &Vocabulary,
    tries: &ColumnTrieSet,
    encoded: &EncodedRow,
    guiding: Guiding,
    train: bool,
    rng: &mut R,
) -> Result<(T, PerExampleGrad<T>)> {
    let (cache, scored) = score(params, vocab, tries, encoded, guiding, train, rng)?;
    let mut grad = vec![T::zero(); params.len()];
    if scored.is_empty() {
        return Ok((T::zero(), PerExampleGrad::new(grad)));
    }
    let d = params.config.width;
    let inv = T::one() / T::lit(scored.len() as f64);
    let loss = scored.iter().map(|s| s.nll).sum::<T>() * inv;

    let wte_off = params.layout.wte.offset;
    let wte = params.get(params.layout.wte);
    let mut d_hidden = vec![T::zero(); cache.len() * d];
    for s in &scored {
        let h = cache.hidden_at(s.position, d);
        let dh = &mut d_hidden[s.position * d..(s.position + 1) * d];
        for &(tok, g) in &s.dlogits {
            let g = g * inv;
            let row = tok as usize * d;
            let e = &wte[row..row + d];
            for i in 0..d {
                dh[i] += g * e[i];
            }
            for (gw, &hv) in grad[wte_off + row..wte_off + row + d].iter_mut().zip(h) {
                *gw += g * hv;
            }
        }
    }
    params.backward_cached(&cache, &d_hidden, &mut grad);
    Ok((loss, PerExampleGrad::new(grad)))
}
