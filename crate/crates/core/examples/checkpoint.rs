//! Saves a model with optimizer moments and its privacy ledger, then reloads it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rowlm::accountant::PrivacyLedger;
use rowlm::checkpoint::{Checkpoint, RunInfo};
use rowlm::dp::{AdamW, DpConfig, LrSchedule, OptimizerState};
use rowlm::model::{init_model, Guiding, ModelConfig};
use rowlm::sentence::{OrderPolicy, TokenizerMode, Vocabulary};
use rowlm::table::{read_csv, Discretizer};

fn main() -> rowlm::Result<()> {
    let table = read_csv("a,b\nx,1.5\ny,2.5\nx,0.25\n".as_bytes())?;
    let disc = Discretizer::fit(&table.schema, &table.rows)?;
    let vocab = Vocabulary::build(&disc, TokenizerMode::Level);
    let cfg = ModelConfig::reference(vocab.size(), vocab.max_sentence_len(&disc));
    let params = init_model::<f32, _>(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let opt = OptimizerState::new(params.len(), LrSchedule::new(1000), AdamW::default());
    let mut ledger = PrivacyLedger::new();
    ledger.compose(0.01, 1.0, 250)?;
    let run = RunInfo {
        seed: 0,
        split_seed: 0,
        order: OrderPolicy::Fixed,
        guiding: Guiding::Trie,
        dp: DpConfig::non_private(64, 1000),
        schedule: opt.schedule,
        adam: opt.adam,
    };
    let ckpt = Checkpoint::new(params, Some(opt), vocab.descriptor(), disc, ledger, run);

    let dir = std::env::temp_dir().join("rowlm-checkpoint-example");
    ckpt.save(&dir)?;
    let back = Checkpoint::load(&dir)?;
    assert_eq!(back, ckpt);
    println!("{} parameters in {} tensors at {}", back.params.len(), back.manifest.tensors.len(), dir.display());
    for t in back.manifest.tensors.iter().take(4) {
        println!("  {:<16} {:?} @ {}", t.name, t.shape, t.offset);
    }
    println!("epsilon so far {:.3}", back.manifest.ledger.to_epsilon(1e-6)?.epsilon);
    Ok(())
}
