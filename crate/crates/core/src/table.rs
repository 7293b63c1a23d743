//! CSV ingestion, schema inference, and the value <-> level discretizer.
//!
//! Every column is mapped onto at most [`MAX_LEVELS`] discrete levels.
//! Categorical columns keep their most frequent values and bin the rest into
//! an UNKNOWN slot; numeric columns are cut into equal-frequency bins.
//!
//! Fitting is not differentially private. Reports carry that caveat.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the number of levels of any column.
pub const MAX_LEVELS: usize = 100;
/// Number of categories kept before the rest are binned to UNKNOWN.
pub const MAX_KEPT_CATEGORIES: usize = MAX_LEVELS - 1;
/// Surface string emitted for the UNKNOWN level.
pub const UNKNOWN_LABEL: &str = "<UNK>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Integer,
    Float,
}

impl ColumnKind {
    pub fn is_numeric(self) -> bool {
        !matches!(self, ColumnKind::Categorical)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<Column>,
    pub row_count: usize,
}

impl TableSchema {
    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn header(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }
}

/// A table as read from disk: inferred schema plus the untouched cell strings.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub schema: TableSchema,
    pub rows: Vec<Vec<String>>,
}

/// One row expressed as per-column level indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LevelRow(pub Vec<usize>);

impl LevelRow {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn levels(&self) -> &[usize] {
        &self.0
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<RawTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

/// Reads a headed CSV and infers one [`ColumnKind`] per column.
pub fn read_csv<R: Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    validate_header(&header)?;

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row: i,
                expected: header.len(),
                found: record.len(),
            });
        }
        rows.push(record.iter().map(str::to_string).collect::<Vec<_>>());
    }
    if rows.is_empty() {
        return Err(Error::EmptyTable);
    }

    let columns = header
        .into_iter()
        .enumerate()
        .map(|(j, name)| Column {
            kind: infer_kind(rows.iter().map(|r| r[j].as_str())),
            name,
        })
        .collect();
    Ok(RawTable {
        schema: TableSchema {
            columns,
            row_count: rows.len(),
        },
        rows,
    })
}

fn validate_header(header: &[String]) -> Result<()> {
    if header.is_empty() {
        return Err(Error::Schema("header has no columns".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for name in header {
        if name.is_empty() {
            return Err(Error::Schema("empty column name".into()));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Schema(format!("duplicate column name `{name}`")));
        }
    }
    Ok(())
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Integer if every non-missing cell parses as an integer, float if every
/// one parses as a finite number, categorical otherwise.
pub fn infer_kind<'a>(cells: impl Iterator<Item = &'a str>) -> ColumnKind {
    let mut kind = ColumnKind::Integer;
    for cell in cells {
        if cell.is_empty() {
            continue;
        }
        if kind == ColumnKind::Integer && cell.trim().parse::<i64>().is_ok() {
            continue;
        }
        if parse_number(cell).is_some() {
            kind = ColumnKind::Float;
        } else {
            return ColumnKind::Categorical;
        }
    }
    kind
}

/// Per-column mapping between surface values and levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "codec", rename_all = "lowercase")]
pub enum ColumnCodec {
    Categorical {
        /// Kept values in level order.
        categories: Vec<String>,
        /// Whether level `categories.len()` is the UNKNOWN slot.
        unknown: bool,
    },
    Numeric {
        /// Ascending bin edges. A single edge denotes a constant column.
        #[serde(with = "decimal_edges")]
        edges: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(flatten)]
    pub codec: ColumnCodec,
}

impl ColumnSpec {
    pub fn cardinality(&self) -> usize {
        match &self.codec {
            ColumnCodec::Categorical { categories, unknown } => categories.len() + usize::from(*unknown),
            ColumnCodec::Numeric { edges } => edges.len().saturating_sub(1).max(1),
        }
    }

    fn encode(&self, cell: &str, row: usize) -> Result<usize> {
        match &self.codec {
            ColumnCodec::Categorical { categories, unknown } => {
                match categories.iter().position(|c| c == cell) {
                    Some(level) => Ok(level),
                    None if *unknown => Ok(categories.len()),
                    None => Err(Error::UnknownCategory {
                        column: self.name.clone(),
                        value: cell.to_string(),
                    }),
                }
            }
            ColumnCodec::Numeric { edges } => {
                let value = parse_number(cell).ok_or_else(|| Error::Unparsable {
                    column: self.name.clone(),
                    row,
                    value: cell.to_string(),
                })?;
                Ok(bin_index(edges, value))
            }
        }
    }

    fn decode<R: Rng + ?Sized>(&self, level: usize, rng: &mut R) -> Result<String> {
        let cardinality = self.cardinality();
        if level >= cardinality {
            return Err(Error::LevelOutOfRange {
                column: self.name.clone(),
                level,
                cardinality,
            });
        }
        match &self.codec {
            ColumnCodec::Categorical { categories, .. } => Ok(categories
                .get(level)
                .cloned()
                .unwrap_or_else(|| UNKNOWN_LABEL.to_string())),
            ColumnCodec::Numeric { edges } => {
                if edges.len() == 1 {
                    return Ok(format_value(edges[0], self.kind));
                }
                let lo = edges[level];
                let hi = edges[level + 1];
                let last = level + 2 == edges.len();
                if self.kind == ColumnKind::Integer {
                    let first = lo.ceil() as i64;
                    let mut end = hi.floor() as i64;
                    if !last && (end as f64) >= hi {
                        end -= 1;
                    }
                    if end < first {
                        return Err(Error::Numeric(format!(
                            "column `{}`: bin {level} holds no integer",
                            self.name
                        )));
                    }
                    Ok(rng.random_range(first..=end).to_string())
                } else {
                    let mut v = lo + rng.random::<f64>() * (hi - lo);
                    if !last && v >= hi {
                        v = lo;
                    }
                    Ok(format_value(v.min(hi), self.kind))
                }
            }
        }
    }

    /// Text rendering of a level used by byte-level tokenization.
    pub fn label(&self, level: usize) -> String {
        match &self.codec {
            ColumnCodec::Categorical { categories, .. } => categories
                .get(level)
                .cloned()
                .unwrap_or_else(|| UNKNOWN_LABEL.to_string()),
            ColumnCodec::Numeric { .. } => format!("b{level}"),
        }
    }
}

fn format_value(v: f64, kind: ColumnKind) -> String {
    match kind {
        ColumnKind::Integer => (v.round() as i64).to_string(),
        _ => v.to_string(),
    }
}

/// Index of the half-open bin `[e_k, e_{k+1})` holding `value`; the last bin
/// is closed and out-of-range values clamp to the end bins.
fn bin_index(edges: &[f64], value: f64) -> usize {
    if edges.len() <= 2 {
        return 0;
    }
    let interior = &edges[1..edges.len() - 1];
    interior.partition_point(|&e| e <= value)
}

/// Fitted per-column codecs; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub columns: Vec<ColumnSpec>,
}

impl Discretizer {
    pub fn fit(schema: &TableSchema, rows: &[Vec<String>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        let columns = schema
            .columns
            .iter()
            .enumerate()
            .map(|(j, col)| {
                let cells: Vec<&str> = rows.iter().map(|r| r[j].as_str()).collect();
                fit_column(col, &cells)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Discretizer { columns })
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn cardinality(&self, column: usize) -> usize {
        self.columns[column].cardinality()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.columns.iter().map(ColumnSpec::cardinality).collect()
    }

    pub fn header(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Maps one raw row to levels; `row` is only used in error messages.
    pub fn apply(&self, cells: &[String], row: usize) -> Result<LevelRow> {
        if cells.len() != self.columns.len() {
            return Err(Error::RaggedRow {
                row,
                expected: self.columns.len(),
                found: cells.len(),
            });
        }
        self.columns
            .iter()
            .zip(cells)
            .map(|(spec, cell)| spec.encode(cell, row))
            .collect::<Result<Vec<_>>>()
            .map(LevelRow)
    }

    pub fn apply_all(&self, rows: &[Vec<String>]) -> Result<Vec<LevelRow>> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| self.apply(r, i))
            .collect()
    }

    /// Draws a surface row whose levels are exactly `levels`.
    pub fn invert<R: Rng + ?Sized>(&self, levels: &LevelRow, rng: &mut R) -> Result<Vec<String>> {
        self.check(levels)?;
        self.columns
            .iter()
            .zip(levels.levels())
            .map(|(spec, &level)| spec.decode(level, rng))
            .collect()
    }

    pub fn check(&self, levels: &LevelRow) -> Result<()> {
        if levels.len() != self.columns.len() {
            return Err(Error::Schema(format!(
                "level row has {} entries, table has {} columns",
                levels.len(),
                self.columns.len()
            )));
        }
        for (spec, &level) in self.columns.iter().zip(levels.levels()) {
            if level >= spec.cardinality() {
                return Err(Error::LevelOutOfRange {
                    column: spec.name.clone(),
                    level,
                    cardinality: spec.cardinality(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn fit_column(col: &Column, cells: &[&str]) -> Result<ColumnSpec> {
    let codec = match col.kind {
        ColumnKind::Categorical => {
            let (categories, unknown) = top_categories(cells, MAX_KEPT_CATEGORIES);
            ColumnCodec::Categorical { categories, unknown }
        }
        ColumnKind::Integer | ColumnKind::Float => {
            let mut values = Vec::with_capacity(cells.len());
            let mut missing = 0usize;
            for (row, cell) in cells.iter().enumerate() {
                if cell.is_empty() {
                    missing += 1;
                    continue;
                }
                values.push(parse_number(cell).ok_or_else(|| Error::Unparsable {
                    column: col.name.clone(),
                    row,
                    value: cell.to_string(),
                })?);
            }
            if values.is_empty() {
                return Err(Error::AllMissing {
                    column: col.name.clone(),
                });
            }
            if missing > 0 {
                let row = cells.iter().position(|c| c.is_empty()).unwrap_or(0);
                return Err(Error::Unparsable {
                    column: col.name.clone(),
                    row,
                    value: String::new(),
                });
            }
            values.sort_by(f64::total_cmp);
            ColumnCodec::Numeric {
                edges: quantile_edges(&values, MAX_LEVELS),
            }
        }
    };
    Ok(ColumnSpec {
        name: col.name.clone(),
        kind: col.kind,
        codec,
    })
}

/// Most frequent values (ties by first occurrence) and whether anything was
/// left over for the UNKNOWN slot.
pub fn top_categories(cells: &[&str], keep: usize) -> (Vec<String>, bool) {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, cell) in cells.iter().enumerate() {
        counts.entry(cell).or_insert((0, i)).0 += 1;
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts
        .into_iter()
        .map(|(value, (count, first))| (value, count, first))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let unknown = ranked.len() > keep;
    let kept = ranked
        .into_iter()
        .take(keep)
        .map(|(v, _, _)| v.to_string())
        .collect();
    (kept, unknown)
}

/// Equal-frequency bin edges over `sorted` values, using linearly
/// interpolated quantiles. Repeated edges are merged and bins that would
/// hold no training value are folded into a neighbour.
pub fn quantile_edges(sorted: &[f64], bins: usize) -> Vec<f64> {
    let n = sorted.len();
    let span = (n - 1) as u128;
    let mut edges: Vec<f64> = (0..=bins)
        .map(|k| {
            let num = k as u128 * span;
            let lo = (num / bins as u128) as usize;
            let frac = (num % bins as u128) as f64 / bins as f64;
            if frac == 0.0 || lo + 1 >= n {
                sorted[lo]
            } else {
                sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
            }
        })
        .collect();
    edges.dedup();
    if edges.len() <= 2 {
        return edges;
    }

    let mut counts = vec![0usize; edges.len() - 1];
    for &v in sorted {
        counts[bin_index(&edges, v)] += 1;
    }
    let mut kept = vec![edges[0]];
    for (k, &count) in counts.iter().enumerate() {
        if count > 0 {
            kept.push(edges[k + 1]);
        }
    }
    let last = *edges.last().unwrap();
    if *kept.last().unwrap() != last {
        *kept.last_mut().unwrap() = last;
    }
    kept
}

mod decimal_edges {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(edges: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(edges.iter().map(|e| e.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(d)?
            .into_iter()
            .map(|s| s.parse::<f64>().map_err(D::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(csv: &str) -> Result<RawTable> {
        read_csv(csv.as_bytes())
    }

    #[test]
    fn header_only_is_an_error() {
        let err = table("a,b\n").unwrap_err();
        assert_eq!(err.to_string(), "no data rows");
    }

    #[test]
    fn ragged_row_reports_index() {
        let err = table("a,b\n1,2\n3\n").unwrap_err();
        assert!(matches!(err, Error::RaggedRow { row: 1, .. }), "{err}");
    }

    #[test]
    fn kind_rules() {
        let t = table("m,i,f,c\n1,1,1,x\n2.5,2,2.5,y\nx,3,,z\n").unwrap();
        let kinds: Vec<_> = t.schema.columns.iter().map(|c| c.kind).collect();
        assert_eq!(
            kinds,
            [
                ColumnKind::Categorical,
                ColumnKind::Integer,
                ColumnKind::Float,
                ColumnKind::Categorical
            ]
        );
        assert_eq!(t.schema.row_count, 3);
    }

    #[test]
    fn nan_text_is_not_numeric() {
        let t = table("a\nNaN\n1\n").unwrap();
        assert_eq!(t.schema.columns[0].kind, ColumnKind::Categorical);
    }

    #[test]
    fn duplicate_header_rejected() {
        assert!(matches!(table("a,a\n1,2\n"), Err(Error::Schema(_))));
    }

    #[test]
    fn categorical_top_99_plus_unknown() {
        let mut csv = String::from("c\n");
        for i in 0..150 {
            // value i appears (150 - i) times so the ranking is unambiguous
            for _ in 0..(150 - i) {
                csv.push_str(&format!("v{i}\n"));
            }
        }
        let t = table(&csv).unwrap();
        let d = Discretizer::fit(&t.schema, &t.rows).unwrap();
        assert_eq!(d.cardinality(0), 100);
        let ColumnCodec::Categorical { categories, unknown } = &d.columns[0].codec else {
            panic!()
        };
        assert!(unknown);
        assert_eq!(categories[0], "v0");
        assert_eq!(categories[98], "v98");
        let levels = d.apply_all(&t.rows).unwrap();
        let unk = levels.iter().filter(|r| r.0[0] == 99).count();
        let expected: usize = (99..150).map(|i| 150 - i).sum();
        assert_eq!(unk, expected);
    }

    #[test]
    fn ties_break_by_first_occurrence() {
        let cells = ["b", "a", "c", "a", "b", "c"];
        let (kept, unknown) = top_categories(&cells, 2);
        assert_eq!(kept, ["b", "a"]);
        assert!(unknown);
    }

    #[test]
    fn kept_rank_and_unseen_category() {
        let t = table("c\nred\nred\nred\nred\ngreen\ngreen\ngreen\nblack\nblack\nblue\n").unwrap();
        let mut d = Discretizer::fit(&t.schema, &t.rows).unwrap();
        assert_eq!(d.apply(&["blue".into()], 0).unwrap().0, [3]);
        // no slot when every value was kept
        assert!(matches!(
            d.apply(&["chartreuse".into()], 0),
            Err(Error::UnknownCategory { .. })
        ));
        if let ColumnCodec::Categorical { unknown, .. } = &mut d.columns[0].codec {
            *unknown = true;
        }
        assert_eq!(d.apply(&["chartreuse".into()], 0).unwrap().0, [4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(d.invert(&LevelRow(vec![3]), &mut rng).unwrap(), ["blue"]);
        assert_eq!(d.invert(&LevelRow(vec![4]), &mut rng).unwrap(), [UNKNOWN_LABEL]);
    }

    #[test]
    fn constant_numeric_column_has_one_bin() {
        let t = table("x\n7\n7\n7\n").unwrap();
        let d = Discretizer::fit(&t.schema, &t.rows).unwrap();
        assert_eq!(d.cardinality(0), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(d.invert(&LevelRow(vec![0]), &mut rng).unwrap(), ["7"]);
    }

    #[test]
    fn integers_1_to_200_give_pairs() {
        let values: Vec<f64> = (1..=200).map(f64::from).collect();
        let edges = quantile_edges(&values, 100);
        assert_eq!(edges.len(), 101);
        for v in 1..=200 {
            assert_eq!(bin_index(&edges, v as f64), (v as usize - 1) / 2, "value {v}");
        }
    }

    #[test]
    fn half_open_bins_around_edges() {
        let edges = [0.0, 10.0, 20.0];
        let cases = [
            (-1.0, 0),
            (0.0, 0),
            (9.999, 0),
            (10.0, 1),
            (19.999, 1),
            (20.0, 1),
            (25.0, 1),
        ];
        for (v, level) in cases {
            assert_eq!(bin_index(&edges, v), level, "value {v}");
        }
    }

    #[test]
    fn missing_numeric_cell_is_error() {
        let t = table("x,y\n1,a\n,b\n3,c\n").unwrap();
        assert_eq!(t.schema.columns[0].kind, ColumnKind::Integer);
        assert!(matches!(
            Discretizer::fit(&t.schema, &t.rows),
            Err(Error::Unparsable { row: 1, .. })
        ));
    }

    #[test]
    fn all_missing_column_named() {
        let t = table("x,y\n,a\n,b\n").unwrap();
        let err = Discretizer::fit(&t.schema, &t.rows).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }

    #[test]
    fn unparsable_cell_at_apply() {
        let t = table("x\n1\n2\n").unwrap();
        let d = Discretizer::fit(&t.schema, &t.rows).unwrap();
        let err = d.apply(&["oops".into()], 5).unwrap_err();
        assert!(matches!(err, Error::Unparsable { row: 5, .. }));
    }

    #[test]
    fn integer_bin_draws_stay_in_range_and_are_roughly_uniform() {
        let spec = ColumnSpec {
            name: "x".into(),
            kind: ColumnKind::Integer,
            codec: ColumnCodec::Numeric {
                edges: vec![0.0, 10.0, 20.0],
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            let v: i64 = spec.decode(0, &mut rng).unwrap().parse().unwrap();
            assert!((0..10).contains(&v));
            counts[v as usize] += 1;
        }
        // binomial(10^4, 0.1): sd = 30
        for c in counts {
            assert!((c as i64 - 1000).abs() < 150, "{counts:?}");
        }
    }

    #[test]
    fn out_of_range_level_rejected() {
        let t = table("x\n1\n2\n").unwrap();
        let d = Discretizer::fit(&t.schema, &t.rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            d.invert(&LevelRow(vec![9]), &mut rng),
            Err(Error::LevelOutOfRange { .. })
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let t = table("x,c\n0.1,a\n0.30000000000000004,b\n1e-300,a\n2.5,c\n").unwrap();
        let d = Discretizer::fit(&t.schema, &t.rows).unwrap();
        let back = Discretizer::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(d, back);
    }
}
