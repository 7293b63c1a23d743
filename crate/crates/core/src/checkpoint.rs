//! Self-describing checkpoints: `manifest.json` plus `weights.bin`, a flat
//! run of little-endian `f32` in the order the manifest lists tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::dp::{AdamW, DpConfig, LrSchedule, OptimizerState};
use crate::error::{Error, Result};
use crate::model::{Guiding, ModelConfig, ParamLayout, TransformerParams};
use crate::sentence::{OrderPolicy, VocabDescriptor};
use crate::table::Discretizer;

pub const FORMAT: &str = "rowlm-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// In elements from the start of the blob.
    pub offset: usize,
}

/// How the checkpointed model was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub split_seed: u64,
    pub order: OrderPolicy,
    pub guiding: Guiding,
    pub dp: DpConfig,
    pub schedule: LrSchedule,
    pub adam: AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    pub vocab: VocabDescriptor,
    pub discretizer: Discretizer,
    pub tensors: Vec<TensorEntry>,
    /// Optimizer updates applied.
    pub step: u64,
    pub ledger: PrivacyLedger,
    pub run: RunInfo,
    /// Whether the blob carries Adam moments after the parameters.
    pub has_moments: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: TransformerParams<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn tensor_entries(layout: &ParamLayout, moments: bool) -> Vec<TensorEntry> {
    let named = layout.named();
    let mut out: Vec<TensorEntry> = named
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: [t.rows, t.cols],
            offset: t.offset,
        })
        .collect();
    if moments {
        for (prefix, base) in [("adam.m", layout.total), ("adam.v", 2 * layout.total)] {
            out.extend(named.iter().map(|(name, t)| TensorEntry {
                name: format!("{prefix}.{name}"),
                shape: [t.rows, t.cols],
                offset: base + t.offset,
            }));
        }
    }
    out
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: TransformerParams<f32>,
        optimizer: Option<OptimizerState<f32>>,
        vocab: VocabDescriptor,
        discretizer: Discretizer,
        ledger: PrivacyLedger,
        run: RunInfo,
    ) -> Self {
        let manifest = Manifest {
            format: FORMAT.to_string(),
            model: params.config.clone(),
            vocab,
            discretizer,
            tensors: tensor_entries(&params.layout, optimizer.is_some()),
            step: optimizer.as_ref().map_or(0, |o| o.step),
            ledger,
            run,
            has_moments: optimizer.is_some(),
        };
        Checkpoint {
            manifest,
            params,
            optimizer,
        }
    }

    /// Writes both files, each via a temporary file and rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(4 * self.params.len() * if self.optimizer.is_some() { 3 } else { 1 });
        let mut put = |v: &[f32]| v.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes()));
        put(&self.params.data);
        if let Some(opt) = &self.optimizer {
            put(&opt.m);
            put(&opt.v);
        }
        write_atomic(&dir.join(BLOB_FILE), &blob)?;
        write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}` (expected `{FORMAT}`)",
                manifest.format
            )));
        }
        manifest.model.validate()?;
        let layout = ParamLayout::new(&manifest.model);
        if manifest.tensors != tensor_entries(&layout, manifest.has_moments) {
            return Err(Error::Checkpoint("tensor table does not match the model config".into()));
        }
        let path = dir.join(BLOB_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n = layout.total;
        let expected = 4 * n * if manifest.has_moments { 3 } else { 1 };
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "blob holds {} bytes, manifest implies {expected}",
                bytes.len()
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let params = TransformerParams::from_data(manifest.model.clone(), floats[..n].to_vec())?;
        let optimizer = manifest.has_moments.then(|| OptimizerState {
            m: floats[n..2 * n].to_vec(),
            v: floats[2 * n..].to_vec(),
            step: manifest.step,
            schedule: manifest.run.schedule,
            adam: manifest.run.adam,
        });
        Ok(Checkpoint {
            manifest,
            params,
            optimizer,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::sentence::{TokenizerMode, Vocabulary};
    use crate::table::{ColumnCodec, ColumnKind, ColumnSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let disc = Discretizer {
            columns: vec![ColumnSpec {
                name: "h".into(),
                kind: ColumnKind::Float,
                codec: ColumnCodec::Numeric {
                    edges: vec![0.1, 1.0 / 3.0, 2.5],
                },
            }],
        };
        let vocab = Vocabulary::build(&disc, TokenizerMode::Level);
        let cfg = ModelConfig {
            layers: 2,
            width: 8,
            heads: 2,
            context: 3,
            vocab: vocab.size(),
            dropout: 0.1,
        };
        let params: TransformerParams<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut opt = OptimizerState::new(params.len(), LrSchedule::new(10), AdamW::default());
        opt.m.iter_mut().enumerate().for_each(|(i, m)| *m = i as f32 * 1e-3);
        opt.v.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 1e-6);
        opt.step = 4;
        let mut ledger = PrivacyLedger::new();
        ledger.compose(0.01, 1.1, 4).unwrap();
        let run = RunInfo {
            seed: 1,
            split_seed: 2,
            order: OrderPolicy::Random,
            guiding: Guiding::Trie,
            dp: DpConfig::non_private(4, 10),
            schedule: opt.schedule,
            adam: opt.adam,
        };
        Checkpoint::new(params, Some(opt), vocab.descriptor(), disc, ledger, run)
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        let size = fs::metadata(dir.path().join(BLOB_FILE)).unwrap().len() as usize;
        assert_eq!(size, 3 * 4 * ckpt.params.len());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ckpt = sample();
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes.pop();
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));

        ckpt.save(dir.path()).unwrap();
        let man = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&man).unwrap().replace(FORMAT, "other/9");
        fs::write(&man, text).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
