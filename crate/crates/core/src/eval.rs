//! Held-out likelihood, k-way marginals and total variation distance.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{row_terms, Guiding, Real, TransformerParams};
use crate::sentence::{encode_row, Vocabulary};
use crate::table::{Discretizer, LevelRow};
use crate::trie::ColumnTrieSet;

/// Rows reserved for evaluation: 10% of the table, at most 10,000.
pub fn heldout_size(n: usize) -> usize {
    (n / 10).min(10_000)
}

/// Seeded `(train, heldout)` index split, each sorted ascending.
pub fn heldout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut heldout = idx[..heldout_size(n)].to_vec();
    let mut train = idx[heldout_size(n)..].to_vec();
    heldout.sort_unstable();
    train.sort_unstable();
    (train, heldout)
}

/// Teacher-forced NLL in nats per row, split by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllSummary {
    pub rows: usize,
    pub mean: f64,
    pub per_column: Vec<f64>,
}

/// Mean row NLL over `rows`, each encoded in natural column order.
pub fn mean_nll<T: Real>(
    params: &TransformerParams<T>,
    vocab: &Vocabulary,
    disc: &Discretizer,
    tries: &ColumnTrieSet,
    rows: &[LevelRow],
    guiding: Guiding,
) -> Result<NllSummary> {
    if rows.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let c = vocab.num_columns();
    let order: Vec<usize> = (0..c).collect();
    let per_row: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|row| {
            let encoded = encode_row(vocab, disc, row, &order)?;
            let mut cols = vec![0.0; c];
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            for term in row_terms(params, vocab, tries, &encoded, guiding, &mut rng)? {
                cols[term.column] += term.nll.to_f64().unwrap_or(f64::NAN);
            }
            Ok(cols)
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mut per_column = vec![0.0; c];
    for cols in &per_row {
        for (acc, v) in per_column.iter_mut().zip(cols) {
            *acc += v;
        }
    }
    per_column.iter_mut().for_each(|v| *v /= n);
    let mean = per_row.iter().map(|cols| cols.iter().sum::<f64>()).sum::<f64>() / n;
    Ok(NllSummary {
        rows: rows.len(),
        mean,
        per_column,
    })
}

/// Normalized joint frequencies over a tuple of columns, row-major in the
/// order of `indices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    pub indices: Vec<usize>,
    pub shape: Vec<usize>,
    pub freq: Vec<f64>,
}

impl MarginalTable {
    /// Marginalizes away position `axis` of `indices`.
    pub fn sum_out(&self, axis: usize) -> Result<MarginalTable> {
        if axis >= self.indices.len() || self.indices.len() < 2 {
            return Err(Error::Config(format!("cannot sum out axis {axis} of a {}-way table", self.indices.len())));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let width = self.shape[axis];
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let mut indices = self.indices.clone();
        indices.remove(axis);
        let mut freq = vec![0.0; shape.iter().product()];
        for (i, &f) in self.freq.iter().enumerate() {
            let outer = i / (inner * width);
            let j = outer * inner + i % inner;
            freq[j] += f;
        }
        Ok(MarginalTable { indices, shape, freq })
    }
}

/// Joint distribution of the columns in `indices` (strictly increasing).
pub fn kway_marginal(rows: &[LevelRow], cardinalities: &[usize], indices: &[usize]) -> Result<MarginalTable> {
    let c = cardinalities.len();
    if indices.is_empty() || indices.len() > c {
        return Err(Error::Config(format!("marginal order {} outside [1, {c}]", indices.len())));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) || indices[indices.len() - 1] >= c {
        return Err(Error::Config(format!("marginal indices {indices:?} must increase and lie below {c}")));
    }
    if rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    let shape: Vec<usize> = indices.iter().map(|&i| cardinalities[i]).collect();
    let mut counts = vec![0u64; shape.iter().product()];
    for row in rows {
        let mut cell = 0;
        for (&i, &k) in indices.iter().zip(&shape) {
            let level = row.0[i];
            if level >= k {
                return Err(Error::LevelOutOfRange {
                    column: i.to_string(),
                    level,
                    cardinality: k,
                });
            }
            cell = cell * k + level;
        }
        counts[cell] += 1;
    }
    let n = rows.len() as f64;
    Ok(MarginalTable {
        indices: indices.to_vec(),
        shape,
        freq: counts.iter().map(|&k| k as f64 / n).collect(),
    })
}

/// Half the L1 distance between two tables over the same columns.
pub fn marginal_tvd(real: &MarginalTable, synth: &MarginalTable) -> Result<f64> {
    if real.indices != synth.indices || real.shape != synth.shape {
        return Err(Error::Config(format!(
            "marginals over {:?}{:?} and {:?}{:?} are not comparable",
            real.indices, real.shape, synth.indices, synth.shape
        )));
    }
    let tvd = 0.5 * real.freq.iter().zip(&synth.freq).map(|(p, q)| (p - q).abs()).sum::<f64>();
    Ok(tvd.clamp(0.0, 1.0))
}

/// All single columns, then all pairs if there are at most 25 columns,
/// otherwise `max_pairs` distinct pairs drawn with `seed`.
pub fn marginal_index_sets(columns: usize, max_pairs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = (0..columns).map(|i| vec![i]).collect();
    let mut pairs: Vec<Vec<usize>> = (0..columns)
        .flat_map(|i| (i + 1..columns).map(move |j| vec![i, j]))
        .collect();
    if columns > 25 && pairs.len() > max_pairs {
        pairs.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        pairs.truncate(max_pairs);
        pairs.sort();
    }
    sets.extend(pairs);
    sets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalComparison {
    pub columns: Vec<String>,
    pub indices: Vec<usize>,
    pub tvd: f64,
}

/// Real and synthetic tables for one index set.
pub type MarginalPair = (MarginalTable, MarginalTable);

/// Compares every requested marginal; returns comparisons and table pairs.
pub fn compare_marginals(
    real: &[LevelRow],
    synth: &[LevelRow],
    disc: &Discretizer,
    sets: &[Vec<usize>],
) -> Result<(Vec<MarginalComparison>, Vec<MarginalPair>)> {
    let cards = disc.cardinalities();
    let header = disc.header();
    let mut out = Vec::with_capacity(sets.len());
    let mut tables = Vec::with_capacity(sets.len());
    for idx in sets {
        let a = kway_marginal(real, &cards, idx)?;
        let b = kway_marginal(synth, &cards, idx)?;
        out.push(MarginalComparison {
            columns: idx.iter().map(|&i| header[i].to_string()).collect(),
            indices: idx.clone(),
            tvd: marginal_tvd(&a, &b)?,
        });
        tables.push((a, b));
    }
    Ok((out, tables))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvdSummary {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
}

pub fn summarize_tvd(comparisons: &[MarginalComparison]) -> Option<TvdSummary> {
    if comparisons.is_empty() {
        return None;
    }
    let n = comparisons.len();
    Some(TvdSummary {
        count: n,
        mean: comparisons.iter().map(|c| c.tvd).sum::<f64>() / n as f64,
        max: comparisons.iter().map(|c| c.tvd).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportMeta {
    pub checkpoint: Option<String>,
    pub step: Option<u64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub split_seed: Option<u64>,
    pub heldout_rows: Option<usize>,
    pub synthetic_rows: Option<usize>,
}

pub const REPORT_NOTE: &str = "NLL is in nats per row (sum over the row's tokens), teacher-forced in natural \
column order. Marginals compare synthetic rows against the full table (train + held-out). The discretizer \
was fitted on the raw data without privacy; held-out metrics are diagnostics outside the privacy budget.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub guiding: Guiding,
    pub nll: Option<NllSummary>,
    pub marginals: Vec<MarginalComparison>,
    pub tvd: Option<TvdSummary>,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn new(guiding: Guiding, nll: Option<NllSummary>, marginals: Vec<MarginalComparison>, meta: ReportMeta) -> Self {
        EvalReport {
            note: REPORT_NOTE.to_string(),
            guiding,
            tvd: summarize_tvd(&marginals),
            nll,
            marginals,
            meta,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Grouped bar chart of two marginals, one group per cell.
pub fn marginal_svg(title: &str, labels: &[String], real: &[f64], synth: &[f64]) -> String {
    let cells = real.len().max(1);
    let (w, h, pad) = (760.0, 360.0, 48.0);
    let plot_w = w - 2.0 * pad;
    let plot_h = h - 2.0 * pad;
    let top = real.iter().chain(synth).copied().fold(1e-12, f64::max);
    let group = plot_w / cells as f64;
    let bar = group * 0.4;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="24" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = pad + plot_h,
        x2 = pad + plot_w
    );
    for (i, (p, q)) in real.iter().zip(synth).enumerate() {
        let x = pad + i as f64 * group + group * 0.1;
        for (k, (v, colour)) in [(p, "#4c72b0"), (q, "#dd8452")].into_iter().enumerate() {
            let bh = v / top * plot_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{colour}"/>"#,
                x + k as f64 * bar,
                pad + plot_h - bh,
                bar,
                bh
            );
        }
        if cells <= 40 {
            if let Some(label) = labels.get(i) {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="end" transform="rotate(-45 {:.2} {:.2})">{}</text>"#,
                    x + bar,
                    pad + plot_h + 12.0,
                    x + bar,
                    pad + plot_h + 12.0,
                    escape(label)
                );
            }
        }
    }
    let legend_x = w - pad - 140.0;
    for (k, (name, colour)) in [("real", "#4c72b0"), ("synthetic", "#dd8452")].into_iter().enumerate() {
        let y = 16.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{legend_x}" y="{y}" width="10" height="10" fill="{colour}"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, legend_x + 16.0, y + 9.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Cell labels of a marginal: level labels joined with `|`.
pub fn cell_labels(disc: &Discretizer, table: &MarginalTable) -> Vec<String> {
    let mut labels = vec![String::new()];
    for (&col, &k) in table.indices.iter().zip(&table.shape) {
        let spec = &disc.columns[col];
        labels = labels
            .iter()
            .flat_map(|prefix| {
                (0..k).map(move |l| {
                    if prefix.is_empty() {
                        spec.label(l)
                    } else {
                        format!("{prefix}|{}", spec.label(l))
                    }
                })
            })
            .collect();
    }
    labels
}

/// Writes `report.json` and, if `plots` is given, one SVG per marginal.
pub fn emit_report(
    report: &EvalReport,
    dir: &Path,
    plots: Option<(&Discretizer, &[(MarginalTable, MarginalTable)])>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("report.json");
    std::fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    if let Some((disc, tables)) = plots {
        for (cmp, (real, synth)) in report.marginals.iter().zip(tables) {
            let name = format!(
                "marginal_{}.svg",
                cmp.indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("_")
            );
            let title = format!("{} (TVD {:.4})", cmp.columns.join(" x "), cmp.tvd);
            let svg = marginal_svg(&title, &cell_labels(disc, real), &real.freq, &synth.freq);
            let path = dir.join(name);
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
