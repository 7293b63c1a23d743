//! The pipeline behind the command-line tool, one function per subcommand.
//!
//! Files under the output directory:
//!
//! ```text
//! prepared/{schema,discretizer,vocab,split}.json
//! checkpoint/{manifest.json,weights.bin}
//! telemetry.ndjson
//! synthetic.csv, synthetic.json
//! eval/report.json, eval/marginal_*.svg
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, choose_batch, epsilon_for, PrivacyLedger};
use crate::checkpoint::{Checkpoint, RunInfo};
use crate::config::RunConfig;
use crate::dp::{train, AdamW, DpConfig, LrSchedule, OptimizerState, TrainData, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::{compare_marginals, emit_report, heldout_split, marginal_index_sets, mean_nll, EvalReport, ReportMeta};
use crate::model::{init_model, ModelConfig};
use crate::sentence::{VocabDescriptor, Vocabulary};
use crate::synth::{generate_table, GenerationConfig};
use crate::table::{load_csv, Discretizer, LevelRow, RawTable, TableSchema};
use crate::trie::ColumnTrieSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn prepared(&self) -> PathBuf {
        self.0.join("prepared")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("checkpoint")
    }
    pub fn telemetry(&self) -> PathBuf {
        self.0.join("telemetry.ndjson")
    }
    pub fn synthetic(&self) -> PathBuf {
        self.0.join("synthetic.csv")
    }
    pub fn eval(&self) -> PathBuf {
        self.0.join("eval")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn with_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub rows: usize,
    pub train_rows: usize,
    pub heldout_rows: usize,
    pub cardinalities: Vec<usize>,
    pub vocab_size: usize,
    pub max_sentence_len: usize,
}

/// Fits the discretizer on the whole table and writes it with the split.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    cfg.validate()?;
    let table = load_csv(cfg.data_path()?)?;
    let disc = Discretizer::fit(&table.schema, &table.rows)?;
    disc.apply_all(&table.rows)?;
    let n = table.rows.len();
    let (train, heldout) = heldout_split(n, cfg.split_seed);
    let vocab = Vocabulary::build(&disc, cfg.tokenizer);
    let dir = RunDir(cfg.out.clone()).prepared();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("schema.json"), &table.schema)?;
    fs::write(dir.join("discretizer.json"), disc.to_json()?).map_err(|e| Error::io(dir.join("discretizer.json"), e))?;
    write_json(&dir.join("vocab.json"), &vocab.descriptor())?;
    let summary = PrepareSummary {
        rows: n,
        train_rows: train.len(),
        heldout_rows: heldout.len(),
        cardinalities: disc.cardinalities(),
        vocab_size: vocab.size(),
        max_sentence_len: vocab.max_sentence_len(&disc),
    };
    write_json(
        &dir.join("split.json"),
        &Split {
            seed: cfg.split_seed,
            train,
            heldout,
        },
    )?;
    Ok(summary)
}

/// Prepared artifacts of a run.
pub struct Prepared {
    pub schema: TableSchema,
    pub disc: Discretizer,
    pub vocab: VocabDescriptor,
    pub split: Split,
}

pub fn load_prepared(out: &Path) -> Result<Prepared> {
    let dir = RunDir(out.to_path_buf()).prepared();
    if !dir.join("split.json").exists() {
        return Err(Error::Config(format!("{} has no prepared data; run `prepare` first", out.display())));
    }
    let text = fs::read_to_string(dir.join("discretizer.json")).map_err(|e| Error::io(dir.join("discretizer.json"), e))?;
    Ok(Prepared {
        schema: read_json(&dir.join("schema.json"))?,
        disc: Discretizer::from_json(&text)?,
        vocab: read_json(&dir.join("vocab.json"))?,
        split: read_json(&dir.join("split.json"))?,
    })
}

fn check_header(table: &RawTable, disc: &Discretizer) -> Result<()> {
    if table.schema.header() != disc.header() {
        return Err(Error::Schema(format!(
            "table header {:?} does not match the fitted columns {:?}",
            table.schema.header(),
            disc.header()
        )));
    }
    Ok(())
}

fn select(levels: &[LevelRow], idx: &[usize]) -> Result<Vec<LevelRow>> {
    idx.iter()
        .map(|&i| {
            levels
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("split index {i} beyond the table's {} rows", levels.len())))
        })
        .collect()
}

/// Expected batch and `σ` for a private run over `n` training rows.
pub fn plan_privacy(cfg: &RunConfig, n: usize) -> Result<DpConfig> {
    let p = &cfg.privacy;
    if p.non_private {
        let batch = p.batch.unwrap_or(p.initial_batch).min(n);
        return Ok(DpConfig {
            augmult: p.augmult,
            ..DpConfig::non_private(batch, p.steps)
        });
    }
    let (batch, sigma) = match (p.batch, p.noise_multiplier) {
        (Some(b), Some(s)) => (b.min(n), s),
        (Some(b), None) => {
            let b = b.min(n);
            (b, calibrate_sigma(b as f64 / n as f64, p.steps, p.epsilon, p.delta)?)
        }
        (None, Some(s)) => (p.initial_batch.min(n), s),
        (None, None) => choose_batch(n, p.steps, p.epsilon, p.delta, p.initial_batch)?,
    };
    let spent = epsilon_for(batch as f64 / n as f64, sigma, p.steps, p.delta)?;
    if spent > p.epsilon * (1.0 + 1e-9) {
        return Err(Error::Privacy(format!(
            "sigma {sigma} with batch {batch} over {} steps spends epsilon {spent:.4} > {}",
            p.steps, p.epsilon
        )));
    }
    Ok(DpConfig {
        clip: p.clip,
        noise_multiplier: sigma,
        expected_batch: batch,
        steps: p.steps,
        augmult: p.augmult,
        target_epsilon: Some(p.epsilon),
        delta: p.delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub expected_batch: usize,
    pub noise_multiplier: f64,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub final_loss: Option<f64>,
    pub parameters: usize,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let run = RunDir(cfg.out.clone());
    let prepared = load_prepared(&cfg.out)?;
    let table = load_csv(cfg.data_path()?)?;
    check_header(&table, &prepared.disc)?;
    let levels = prepared.disc.apply_all(&table.rows)?;
    let rows = select(&levels, &prepared.split.train)?;
    let disc = prepared.disc;
    let vocab = Vocabulary::from_descriptor(&prepared.vocab)?;
    let tries = ColumnTrieSet::build(&vocab, &disc)?;
    let needed = vocab.max_sentence_len(&disc);

    let resume = cfg.resume && run.checkpoint().join(crate::checkpoint::MANIFEST_FILE).exists();
    let (mut params, mut opt, mut ledger, info) = if resume {
        let ckpt = Checkpoint::load(&run.checkpoint())?;
        let opt = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("cannot resume: checkpoint has no optimizer state".into()))?;
        (ckpt.params, opt, ckpt.manifest.ledger, ckpt.manifest.run)
    } else {
        let context = cfg.model.context.unwrap_or(needed);
        let model = ModelConfig {
            layers: cfg.model.layers,
            width: cfg.model.width,
            heads: cfg.model.heads,
            context,
            vocab: vocab.size(),
            dropout: cfg.model.dropout,
        };
        let params = init_model::<f32, _>(model, &mut ChaCha20Rng::seed_from_u64(cfg.seed))?;
        let dp = plan_privacy(cfg, rows.len())?;
        let o = &cfg.optimizer;
        let schedule = LrSchedule {
            base: o.lr,
            warmup: o.warmup,
            total: dp.steps,
        };
        let adam = AdamW {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        };
        let opt = OptimizerState::new(params.len(), schedule, adam);
        let info = RunInfo {
            seed: cfg.seed,
            split_seed: prepared.split.seed,
            order: cfg.order,
            guiding: cfg.guiding,
            dp,
            schedule,
            adam,
        };
        (params, opt, PrivacyLedger::new(), info)
    };
    if params.config.context < needed {
        return Err(Error::Config(format!(
            "context {} is shorter than the longest sentence ({needed} tokens)",
            params.config.context
        )));
    }

    let options = TrainOptions {
        dp: info.dp.clone(),
        order: info.order,
        guiding: info.guiding,
        seed: info.seed,
        workers: cfg.workers,
        noise: cfg.privacy.noise_source,
        stop_at: cfg.stop_at,
    };
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let telemetry_path = run.telemetry();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&telemetry_path)
        .map_err(|e| Error::io(&telemetry_path, e))?;
    let mut telemetry = BufWriter::new(file);
    let data = TrainData {
        vocab: &vocab,
        disc: &disc,
        tries: &tries,
        rows: &rows,
    };
    let snapshot = |params: &crate::model::TransformerParams<f32>, opt: &OptimizerState<f32>, ledger: &PrivacyLedger| {
        Checkpoint::new(
            params.clone(),
            Some(opt.clone()),
            vocab.descriptor(),
            disc.clone(),
            ledger.clone(),
            info.clone(),
        )
        .save(&run.checkpoint())
    };
    let mut final_loss = None;
    train(&mut params, &mut opt, &mut ledger, &data, &options, |p| {
        serde_json::to_writer(&mut telemetry, p.record)?;
        telemetry.write_all(b"\n").map_err(|e| Error::io(&telemetry_path, e))?;
        final_loss = p.record.loss.or(final_loss);
        if cfg.checkpoint_every > 0 && p.record.step % cfg.checkpoint_every == 0 && p.record.step < info.dp.steps {
            telemetry.flush().map_err(|e| Error::io(&telemetry_path, e))?;
            snapshot(p.params, p.opt, p.ledger)?;
        }
        Ok(())
    })?;
    telemetry.flush().map_err(|e| Error::io(&telemetry_path, e))?;
    snapshot(&params, &opt, &ledger)?;
    let epsilon = (ledger.steps > 0).then(|| ledger.to_epsilon(info.dp.delta)).transpose()?.map(|r| r.epsilon);
    Ok(TrainSummary {
        steps: opt.step,
        expected_batch: info.dp.expected_batch,
        noise_multiplier: info.dp.noise_multiplier,
        epsilon,
        delta: info.dp.delta,
        final_loss,
        parameters: params.len(),
        checkpoint: run.checkpoint(),
    })
}

fn checkpoint_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| RunDir(cfg.out.clone()).checkpoint(), Path::to_path_buf)
}

fn generation_config(cfg: &RunConfig, ckpt: &Checkpoint, rows: Option<usize>) -> GenerationConfig {
    GenerationConfig {
        rows: rows.unwrap_or(cfg.generation.rows),
        order: cfg.generation.order.unwrap_or(ckpt.manifest.run.order),
        temperature: cfg.generation.temperature,
        seed: cfg.generation.seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub generation: GenerationConfig,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub ledger: PrivacyLedger,
    pub output: PathBuf,
}

/// Samples rows from a checkpoint into `synthetic.csv` plus a sidecar.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: Option<&Path>, rows: Option<usize>) -> Result<GenerationRecord> {
    cfg.validate()?;
    let dir = checkpoint_dir(cfg, checkpoint);
    let ckpt = Checkpoint::load(&dir)?;
    let disc = &ckpt.manifest.discretizer;
    let vocab = Vocabulary::from_descriptor(&ckpt.manifest.vocab)?;
    let tries = ColumnTrieSet::build(&vocab, disc)?;
    let gen = generation_config(cfg, &ckpt, rows);
    let (surface, _) = with_pool(cfg.workers, || generate_table(&ckpt.params, &vocab, &tries, disc, &gen))??;
    let run = RunDir(cfg.out.clone());
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let output = run.synthetic();
    write_table(&output, &disc.header(), &surface)?;
    let ledger = ckpt.manifest.ledger.clone();
    let delta = ckpt.manifest.run.dp.delta;
    let record = GenerationRecord {
        checkpoint: dir,
        step: ckpt.manifest.step,
        generation: gen,
        epsilon: (ledger.steps > 0).then(|| ledger.to_epsilon(delta)).transpose()?.map(|r| r.epsilon),
        delta,
        ledger,
        output: output.clone(),
    };
    write_json(&output.with_extension("json"), &record)?;
    Ok(record)
}

/// Held-out NLL and marginal TVDs; writes `eval/report.json` and plots.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let dir = checkpoint_dir(cfg, checkpoint);
    let ckpt = Checkpoint::load(&dir)?;
    let disc = &ckpt.manifest.discretizer;
    let vocab = Vocabulary::from_descriptor(&ckpt.manifest.vocab)?;
    let tries = ColumnTrieSet::build(&vocab, disc)?;
    let table = load_csv(cfg.data_path()?)?;
    check_header(&table, disc)?;
    let levels = disc.apply_all(&table.rows)?;
    let split_seed = ckpt.manifest.run.split_seed;
    let (_, heldout_idx) = heldout_split(levels.len(), split_seed);
    let heldout = select(&levels, &heldout_idx)?;

    let params64 = ckpt.params.cast::<f64>();
    let nll = if heldout.is_empty() {
        None
    } else {
        Some(with_pool(cfg.workers, || mean_nll(&params64, &vocab, disc, &tries, &heldout, cfg.guiding))??)
    };

    let synthetic = match &cfg.eval.synthetic {
        Some(path) => {
            let synth = load_csv(path)?;
            check_header(&synth, disc)?;
            disc.apply_all(&synth.rows)?
        }
        None => {
            let gen = generation_config(cfg, &ckpt, None);
            with_pool(cfg.workers, || generate_table(&ckpt.params, &vocab, &tries, disc, &gen))??.1
        }
    };
    let sets = marginal_index_sets(disc.num_columns(), cfg.eval.max_pairs, cfg.seed);
    let (marginals, tables) = if synthetic.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        compare_marginals(&levels, &synthetic, disc, &sets)?
    };
    let ledger = &ckpt.manifest.ledger;
    let delta = ckpt.manifest.run.dp.delta;
    let meta = ReportMeta {
        checkpoint: Some(dir.display().to_string()),
        step: Some(ckpt.manifest.step),
        epsilon: (ledger.steps > 0).then(|| ledger.to_epsilon(delta)).transpose()?.map(|r| r.epsilon),
        delta: Some(delta),
        split_seed: Some(split_seed),
        heldout_rows: Some(heldout.len()),
        synthetic_rows: Some(synthetic.len()),
    };
    let report = EvalReport::new(cfg.guiding, nll, marginals, meta);
    let plots = cfg.eval.plots.then_some((disc, tables.as_slice()));
    emit_report(&report, &RunDir(cfg.out.clone()).eval(), plots)?;
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccountQuery {
    pub sample_rate: Option<f64>,
    pub rows: Option<usize>,
    pub batch: Option<usize>,
    pub sigma: Option<f64>,
    pub epsilon: Option<f64>,
    pub steps: u64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountAnswer {
    pub sample_rate: f64,
    pub batch: Option<usize>,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub order: Option<f64>,
}

/// `ε` for a given `σ`, or `σ` (and, from a row count alone, a batch) for a
/// target `ε`.
pub fn cmd_account(query: &AccountQuery) -> Result<AccountAnswer> {
    let q_from = |batch: usize, rows: usize| batch as f64 / rows as f64;
    let (q, batch, sigma) = match (query.sigma, query.epsilon) {
        (Some(sigma), _) => {
            let (q, batch) = match (query.sample_rate, query.batch, query.rows) {
                (Some(q), _, _) => (q, None),
                (None, Some(b), Some(n)) => (q_from(b, n), Some(b)),
                _ => return Err(Error::Config("give --q, or --batch with --rows".into())),
            };
            (q, batch, sigma)
        }
        (None, Some(eps)) => match (query.sample_rate, query.batch, query.rows) {
            (Some(q), _, _) => (q, None, calibrate_sigma(q, query.steps, eps, query.delta)?),
            (None, Some(b), Some(n)) => (q_from(b, n), Some(b), calibrate_sigma(q_from(b, n), query.steps, eps, query.delta)?),
            (None, None, Some(n)) => {
                let (b, s) = choose_batch(n, query.steps, eps, query.delta, 64)?;
                (q_from(b, n), Some(b), s)
            }
            _ => return Err(Error::Config("give --q, --rows, or --batch with --rows".into())),
        },
        (None, None) => return Err(Error::Config("give --sigma to account or --epsilon to calibrate".into())),
    };
    let mut ledger = PrivacyLedger::new();
    ledger.compose(q, sigma, query.steps)?;
    let report = ledger.to_epsilon(query.delta)?;
    Ok(AccountAnswer {
        sample_rate: q,
        batch,
        sigma,
        steps: query.steps,
        delta: query.delta,
        epsilon: report.epsilon,
        order: report.order,
    })
}

/// Writes `rows` under `header` as CSV.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
