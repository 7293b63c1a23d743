//! Trie-constrained sampling of synthetic rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{Real, TransformerParams};
use crate::sentence::{sample_order, OrderPolicy, Vocabulary};
use crate::table::{Discretizer, LevelRow};
use crate::trie::{ColumnTrieSet, RowWalker, WalkState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub rows: usize,
    pub order: OrderPolicy,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            rows: 1000,
            order: OrderPolicy::Fixed,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A generated sentence and the levels it spells.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRow {
    pub tokens: Vec<u32>,
    pub levels: LevelRow,
}

/// Draws an index from `softmax(logits / temperature)`.
fn draw<T: Real, R: Rng + ?Sized>(logits: &[T], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logits
        .iter()
        .map(|l| l.to_f64().unwrap_or(f64::NAN) / temperature)
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding left a sliver past the last positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates one row column by column in `order`, sampling each token from
/// the temperature-scaled softmax restricted to the trie's valid set.
pub fn sample_row<T: Real, R: Rng + ?Sized>(
    params: &TransformerParams<T>,
    vocab: &Vocabulary,
    tries: &ColumnTrieSet,
    order: &[usize],
    temperature: f64,
    rng: &mut R,
) -> Result<SampledRow> {
    if order.is_empty() {
        return Err(Error::Sentence("empty column order".into()));
    }
    let d = params.config.width;
    let mut walker = RowWalker::new(tries, order.to_vec());
    let mut tokens = vec![vocab.begin(order[0])];
    loop {
        let valid = tries.valid_tokens(walker.cursor());
        let token = if valid.len() == 1 {
            valid[0]
        } else {
            let cache = params.forward_cached(&tokens, false, rng)?;
            let logits = params.logits_for(cache.hidden_at(tokens.len() - 1, d), valid);
            valid[draw(&logits, temperature, rng)]
        };
        tokens.push(token);
        match walker.advance(tries, token)? {
            WalkState::Within => {}
            WalkState::NextColumn(c) => tokens.push(vocab.begin(c)),
            WalkState::Finished => break,
        }
    }
    let levels = walker
        .levels()
        .expect("a finished walk has closed every column");
    Ok(SampledRow {
        tokens,
        levels: LevelRow(levels),
    })
}

/// `rows` independent samples; each row has its own seed so the result does
/// not depend on the number of workers.
pub fn generate_rows<T: Real>(
    params: &TransformerParams<T>,
    vocab: &Vocabulary,
    tries: &ColumnTrieSet,
    config: &GenerationConfig,
) -> Result<Vec<SampledRow>> {
    config.validate()?;
    let columns = vocab.num_columns();
    (0..config.rows)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, 0x5EED, i as u64));
            let order = sample_order(columns, config.order, &mut rng);
            sample_row(params, vocab, tries, &order, config.temperature, &mut rng)
        })
        .collect()
}

/// Surface rows (original header order) and their levels.
pub fn generate_table<T: Real>(
    params: &TransformerParams<T>,
    vocab: &Vocabulary,
    tries: &ColumnTrieSet,
    disc: &Discretizer,
    config: &GenerationConfig,
) -> Result<(Vec<Vec<String>>, Vec<LevelRow>)> {
    let sampled = generate_rows(params, vocab, tries, config)?;
    let mut surface = Vec::with_capacity(sampled.len());
    let mut levels = Vec::with_capacity(sampled.len());
    for (i, row) in sampled.into_iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, 0x1A7E, i as u64));
        surface.push(disc.invert(&row.levels, &mut rng)?);
        levels.push(row.levels);
    }
    Ok((surface, levels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::sentence::{decode_sentence, TokenizerMode};
    use crate::table::{ColumnCodec, ColumnKind, ColumnSpec};
    use rand_chacha::ChaCha8Rng;

    fn cat(name: &str, k: usize) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical,
            codec: ColumnCodec::Categorical {
                categories: (0..k).map(|i| format!("{name}{i}")).collect(),
                unknown: false,
            },
        }
    }

    fn setup(cards: &[usize], mode: TokenizerMode) -> (Discretizer, Vocabulary, ColumnTrieSet) {
        let disc = Discretizer {
            columns: cards.iter().enumerate().map(|(i, &k)| cat(&format!("c{i}"), k)).collect(),
        };
        let vocab = Vocabulary::build(&disc, mode);
        let tries = ColumnTrieSet::build(&vocab, &disc).unwrap();
        (disc, vocab, tries)
    }

    fn model(vocab: usize, context: usize, seed: u64) -> TransformerParams<f32> {
        let cfg = ModelConfig {
            layers: 1,
            width: 16,
            heads: 2,
            context,
            vocab,
            dropout: 0.1,
        };
        init_model(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_levels() {
        let k = 5;
        let (_, vocab, tries) = setup(&[k], TokenizerMode::Level);
        let params = TransformerParams::<f32>::zeros(ModelConfig {
            layers: 1,
            width: 8,
            heads: 2,
            context: 3,
            vocab: vocab.size(),
            dropout: 0.0,
        })
        .unwrap();
        let n = 10_000;
        let mut counts = vec![0usize; k];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..n {
            counts[sample_row(&params, &vocab, &tries, &[0], 1.0, &mut rng).unwrap().levels.0[0]] += 1;
        }
        let p = 1.0 / k as f64;
        let band = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() <= band, "{c}");
        }
    }

    #[test]
    fn single_valued_columns_give_the_only_row() {
        let (_, vocab, tries) = setup(&[1, 1], TokenizerMode::Level);
        let params = model(vocab.size(), 6, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_row(&params, &vocab, &tries, &[0, 1], 1.0, &mut rng).unwrap().levels.0, vec![0, 0]);
        }
    }

    #[test]
    fn cold_sampling_is_argmax() {
        let (_, vocab, tries) = setup(&[4, 3, 6], TokenizerMode::Level);
        let params = model(vocab.size(), 9, 5);
        let first = sample_row(&params, &vocab, &tries, &[0, 1, 2], 1e-6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for s in 2..20 {
            let again = sample_row(&params, &vocab, &tries, &[0, 1, 2], 1e-6, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert_eq!(again, first);
        }
    }

    #[test]
    fn random_models_only_emit_valid_sentences() {
        for mode in [TokenizerMode::Level, TokenizerMode::Semantic] {
            let (disc, vocab, tries) = setup(&[3, 12, 7], mode);
            let ctx = vocab.max_sentence_len(&disc);
            let params = model(vocab.size(), ctx, 8);
            let config = GenerationConfig {
                rows: 200,
                order: OrderPolicy::Random,
                temperature: 1.0,
                seed: 4,
            };
            for row in generate_rows(&params, &vocab, &tries, &config).unwrap() {
                assert_eq!(decode_sentence(&vocab, &disc, &row.tokens).unwrap(), row.levels);
            }
        }
    }

    #[test]
    fn generation_is_reproducible_and_maps_to_surface() {
        let (disc, vocab, tries) = setup(&[3, 4], TokenizerMode::Level);
        let params = model(vocab.size(), 6, 2);
        let config = GenerationConfig {
            rows: 50,
            seed: 9,
            ..GenerationConfig::default()
        };
        let a = generate_table(&params, &vocab, &tries, &disc, &config).unwrap();
        let b = generate_table(&params, &vocab, &tries, &disc, &config).unwrap();
        assert_eq!(a, b);
        for (surface, levels) in a.0.iter().zip(&a.1) {
            assert_eq!(&disc.apply(surface, 0).unwrap(), levels);
        }
        let empty = GenerationConfig { rows: 0, ..config };
        assert!(generate_table(&params, &vocab, &tries, &disc, &empty).unwrap().0.is_empty());
    }

    #[test]
    fn bad_temperature_rejected() {
        let config = GenerationConfig {
            temperature: 0.0,
            ..GenerationConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
