//! Token vocabulary and the row <-> sentence codec.
//!
//! A row becomes `BEGIN_c value END_c` blocks concatenated in some column
//! order. BEGIN tokens are prompts: their target slots are [`IGNORE`].
//!
//! Token layout is fixed by the column count `C`: ids `[0, C)` are BEGIN
//! tokens, `[C, 2C)` are END tokens, then either one block of levels per
//! column (level mode) or 256 shared byte tokens (semantic mode).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{Discretizer, LevelRow};

/// Target sentinel for positions excluded from the loss.
pub const IGNORE: u32 = u32::MAX;

const BYTE_TOKENS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    #[default]
    Level,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OrderPolicy {
    #[default]
    Fixed,
    Random,
}

/// Serialized form: only the mode and cardinalities; ids are derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabDescriptor {
    pub mode: TokenizerMode,
    pub columns: usize,
    pub cardinalities: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    mode: TokenizerMode,
    cardinalities: Vec<usize>,
    offsets: Vec<usize>,
    size: usize,
}

impl Vocabulary {
    pub fn build(disc: &Discretizer, mode: TokenizerMode) -> Self {
        Self::from_cardinalities(disc.cardinalities(), mode)
    }

    pub fn from_cardinalities(cardinalities: Vec<usize>, mode: TokenizerMode) -> Self {
        let c = cardinalities.len();
        let mut offsets = Vec::with_capacity(c);
        let mut acc = 2 * c;
        for &card in &cardinalities {
            offsets.push(acc);
            acc += card;
        }
        let size = match mode {
            TokenizerMode::Level => acc,
            TokenizerMode::Semantic => 2 * c + BYTE_TOKENS,
        };
        Vocabulary {
            mode,
            cardinalities,
            offsets,
            size,
        }
    }

    pub fn from_descriptor(d: &VocabDescriptor) -> Result<Self> {
        if d.columns != d.cardinalities.len() {
            return Err(Error::Config(format!(
                "vocabulary descriptor lists {} cardinalities for {} columns",
                d.cardinalities.len(),
                d.columns
            )));
        }
        Ok(Self::from_cardinalities(d.cardinalities.clone(), d.mode))
    }

    pub fn descriptor(&self) -> VocabDescriptor {
        VocabDescriptor {
            mode: self.mode,
            columns: self.num_columns(),
            cardinalities: self.cardinalities.clone(),
        }
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_columns(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn begin(&self, column: usize) -> u32 {
        column as u32
    }

    pub fn end(&self, column: usize) -> u32 {
        (self.num_columns() + column) as u32
    }

    pub fn is_begin(&self, token: u32) -> bool {
        (token as usize) < self.num_columns()
    }

    pub fn is_end(&self, token: u32) -> bool {
        let c = self.num_columns();
        (c..2 * c).contains(&(token as usize))
    }

    /// Column a BEGIN or END token frames, if it is one.
    pub fn framing_column(&self, token: u32) -> Option<usize> {
        let c = self.num_columns();
        let t = token as usize;
        if t < 2 * c {
            Some(t % c)
        } else {
            None
        }
    }

    /// Level-mode token for `(column, level)`.
    pub fn level_token(&self, column: usize, level: usize) -> u32 {
        debug_assert_eq!(self.mode, TokenizerMode::Level);
        (self.offsets[column] + level) as u32
    }

    pub fn level_block(&self, column: usize) -> std::ops::Range<u32> {
        let start = self.offsets[column] as u32;
        start..start + self.cardinalities[column] as u32
    }

    pub fn byte_token(&self, byte: u8) -> u32 {
        (2 * self.num_columns()) as u32 + u32::from(byte)
    }

    pub fn token_byte(&self, token: u32) -> Option<u8> {
        let base = 2 * self.num_columns() as u32;
        token.checked_sub(base).and_then(|b| u8::try_from(b).ok())
    }

    /// Token sequence spelling `level` of `column` (without framing).
    pub fn value_tokens(&self, disc: &Discretizer, column: usize, level: usize) -> Vec<u32> {
        match self.mode {
            TokenizerMode::Level => vec![self.level_token(column, level)],
            TokenizerMode::Semantic => disc.columns[column]
                .label(level)
                .bytes()
                .map(|b| self.byte_token(b))
                .collect(),
        }
    }

    /// Longest sentence any row can encode to.
    pub fn max_sentence_len(&self, disc: &Discretizer) -> usize {
        match self.mode {
            TokenizerMode::Level => 3 * self.num_columns(),
            TokenizerMode::Semantic => (0..self.num_columns())
                .map(|j| {
                    2 + (0..self.cardinalities[j])
                        .map(|v| disc.columns[j].label(v).len())
                        .max()
                        .unwrap_or(0)
                })
                .sum(),
        }
    }
}

/// A row rendered as input tokens plus aligned prediction targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRow {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub order: Vec<usize>,
}

impl EncodedRow {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn predicted_positions(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }
}

pub fn encode_row(
    vocab: &Vocabulary,
    disc: &Discretizer,
    levels: &LevelRow,
    order: &[usize],
) -> Result<EncodedRow> {
    disc.check(levels)?;
    check_order(order, vocab.num_columns())?;
    let mut inputs = Vec::with_capacity(vocab.max_sentence_len(disc));
    for &column in order {
        inputs.push(vocab.begin(column));
        inputs.extend(vocab.value_tokens(disc, column, levels.0[column]));
        inputs.push(vocab.end(column));
    }
    let targets = targets_for(vocab, &inputs);
    Ok(EncodedRow {
        inputs,
        targets,
        order: order.to_vec(),
    })
}

/// Inputs shifted left by one, BEGIN targets and the final slot masked.
pub fn targets_for(vocab: &Vocabulary, inputs: &[u32]) -> Vec<u32> {
    let mut targets: Vec<u32> = inputs
        .iter()
        .skip(1)
        .map(|&t| if vocab.is_begin(t) { IGNORE } else { t })
        .collect();
    targets.push(IGNORE);
    targets
}

fn check_order(order: &[usize], columns: usize) -> Result<()> {
    let mut seen = vec![false; columns];
    for &c in order {
        if c >= columns || std::mem::replace(&mut seen[c], true) {
            return Err(Error::Sentence(format!("invalid column order {order:?}")));
        }
    }
    if order.len() != columns {
        return Err(Error::Sentence(format!("invalid column order {order:?}")));
    }
    Ok(())
}

/// Parses `BEGIN_c ... END_c` blocks in any order back into levels.
pub fn decode_sentence(vocab: &Vocabulary, disc: &Discretizer, tokens: &[u32]) -> Result<LevelRow> {
    let c = vocab.num_columns();
    let mut levels: Vec<Option<usize>> = vec![None; c];
    let mut i = 0;
    while i < tokens.len() {
        let begin = tokens[i];
        if !vocab.is_begin(begin) {
            return Err(Error::Sentence(format!(
                "expected a BEGIN token at position {i}, found {begin}"
            )));
        }
        let column = begin as usize;
        let name = &disc.columns[column].name;
        let end = vocab.end(column);
        let close = tokens[i + 1..]
            .iter()
            .position(|&t| t == end)
            .map(|p| p + i + 1)
            .ok_or_else(|| Error::Sentence(format!("column `{name}`: unterminated block")))?;
        let level = decode_value(vocab, disc, column, &tokens[i + 1..close])?;
        if levels[column].replace(level).is_some() {
            return Err(Error::Sentence(format!("column `{name}`: duplicated column")));
        }
        i = close + 1;
    }
    levels
        .into_iter()
        .enumerate()
        .map(|(j, l)| {
            l.ok_or_else(|| {
                Error::Sentence(format!("column `{}`: missing column", disc.columns[j].name))
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(LevelRow)
}

fn decode_value(vocab: &Vocabulary, disc: &Discretizer, column: usize, value: &[u32]) -> Result<usize> {
    let spec = &disc.columns[column];
    let bad = || Error::Sentence(format!("column `{}`: value tokens {value:?} do not name a level", spec.name));
    match vocab.mode() {
        TokenizerMode::Level => match value {
            [t] if vocab.level_block(column).contains(t) => {
                Ok((*t - vocab.level_block(column).start) as usize)
            }
            _ => Err(bad()),
        },
        TokenizerMode::Semantic => {
            let bytes = value
                .iter()
                .map(|&t| vocab.token_byte(t))
                .collect::<Option<Vec<u8>>>()
                .ok_or_else(bad)?;
            let text = String::from_utf8(bytes).map_err(|_| bad())?;
            (0..spec.cardinality())
                .find(|&v| spec.label(v) == text)
                .ok_or_else(bad)
        }
    }
}

pub fn sample_order<R: Rng + ?Sized>(columns: usize, policy: OrderPolicy, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..columns).collect();
    if policy == OrderPolicy::Random {
        order.shuffle(rng);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{ColumnCodec, ColumnKind, ColumnSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn cat(name: &str, values: &[&str]) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical,
            codec: ColumnCodec::Categorical {
                categories: values.iter().map(|s| s.to_string()).collect(),
                unknown: false,
            },
        }
    }

    fn age_job() -> Discretizer {
        let ages: Vec<String> = (0..10).map(|i| format!("{}", 20 + i)).collect();
        let ages: Vec<&str> = ages.iter().map(String::as_str).collect();
        Discretizer {
            columns: vec![cat("age", &ages), cat("job", &["a", "b", "c"])],
        }
    }

    #[test]
    fn layout_sizes() {
        let v = Vocabulary::from_cardinalities(vec![100, 100], TokenizerMode::Level);
        assert_eq!(v.size(), 204);
        assert_eq!(v.level_token(1, 5), 109);
        let v = Vocabulary::from_cardinalities(vec![1], TokenizerMode::Level);
        assert_eq!(v.size(), 3);
        let v = Vocabulary::from_cardinalities(vec![3; 7], TokenizerMode::Semantic);
        assert_eq!(v.size(), 270);
    }

    #[test]
    fn figure_one_row() {
        let d = age_job();
        let v = Vocabulary::build(&d, TokenizerMode::Level);
        let row = LevelRow(vec![7, 2]);
        let e = encode_row(&v, &d, &row, &[0, 1]).unwrap();
        let (a7, j2) = (v.level_token(0, 7), v.level_token(1, 2));
        assert_eq!(e.inputs, [0, a7, 2, 1, j2, 3]);
        assert_eq!(e.targets, [a7, 2, IGNORE, j2, 3, IGNORE]);
        assert_eq!(decode_sentence(&v, &d, &e.inputs).unwrap(), row);
    }

    #[test]
    fn single_column_sentence() {
        let d = Discretizer {
            columns: vec![cat("x", &["only"])],
        };
        let v = Vocabulary::build(&d, TokenizerMode::Level);
        let e = encode_row(&v, &d, &LevelRow(vec![0]), &[0]).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e.predicted_positions(), 2);
    }

    #[test]
    fn permuted_blocks() {
        let d = age_job();
        let v = Vocabulary::build(&d, TokenizerMode::Level);
        let e = encode_row(&v, &d, &LevelRow(vec![3, 1]), &[1, 0]).unwrap();
        let begins: Vec<usize> = e
            .inputs
            .iter()
            .enumerate()
            .filter(|(_, &t)| v.is_begin(t))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(begins, [0, 3]);
        assert_eq!(e.inputs[0], v.begin(1));
        assert_eq!(e.inputs[3], v.begin(0));
    }

    #[test]
    fn missing_and_duplicated_columns() {
        let d = age_job();
        let v = Vocabulary::build(&d, TokenizerMode::Level);
        let only_age = [0, v.level_token(0, 1), 2];
        let err = decode_sentence(&v, &d, &only_age).unwrap_err();
        assert!(err.to_string().contains("missing column"), "{err}");
        assert!(err.to_string().contains("job"), "{err}");
        let twice = [0, v.level_token(0, 1), 2, 0, v.level_token(0, 2), 2];
        assert!(decode_sentence(&v, &d, &twice).is_err());
        let wrong_block = [0, v.level_token(1, 0), 2, 1, v.level_token(1, 0), 3];
        assert!(decode_sentence(&v, &d, &wrong_block).is_err());
    }

    #[test]
    fn semantic_bin_label() {
        let d = Discretizer {
            columns: vec![ColumnSpec {
                name: "x".into(),
                kind: ColumnKind::Float,
                codec: ColumnCodec::Numeric {
                    edges: (0..=20).map(f64::from).collect(),
                },
            }],
        };
        let v = Vocabulary::build(&d, TokenizerMode::Semantic);
        let mut sentence = vec![v.begin(0)];
        sentence.extend(b"b17".iter().map(|&b| v.byte_token(b)));
        sentence.push(v.end(0));
        assert_eq!(decode_sentence(&v, &d, &sentence).unwrap(), LevelRow(vec![17]));
    }

    #[test]
    fn out_of_range_level() {
        let d = age_job();
        let v = Vocabulary::build(&d, TokenizerMode::Level);
        assert!(matches!(
            encode_row(&v, &d, &LevelRow(vec![0, 3]), &[0, 1]),
            Err(Error::LevelOutOfRange { .. })
        ));
    }

    #[test]
    fn fixed_order_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_order(5, OrderPolicy::Fixed, &mut rng), [0, 1, 2, 3, 4]);
        assert_eq!(sample_order(1, OrderPolicy::Random, &mut rng), [0]);
    }

    #[test]
    fn random_order_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        let draws = 60_000;
        for _ in 0..draws {
            *counts.entry(sample_order(3, OrderPolicy::Random, &mut rng)).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (perm, n) in counts {
            let f = n as f64 / draws as f64;
            assert!((f - 1.0 / 6.0).abs() <= 0.02, "{perm:?}: {f}");
        }
    }
}
