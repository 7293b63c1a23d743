//! DP-SGD on a small correlated table: Poisson batches, per-example clipping,
//! Gaussian noise and a running privacy ledger.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rowlm::accountant::{choose_batch, PrivacyLedger};
use rowlm::dp::{train, AdamW, DpConfig, LrSchedule, NoiseSource, OptimizerState, TrainData, TrainOptions};
use rowlm::eval::mean_nll;
use rowlm::model::{init_model, Guiding, ModelConfig, TransformerParams};
use rowlm::sentence::{OrderPolicy, TokenizerMode, Vocabulary};
use rowlm::table::{read_csv, Discretizer};
use rowlm::trie::ColumnTrieSet;

fn main() -> rowlm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut text = String::from("weather,umbrella\n");
    for _ in 0..5000 {
        let wet = rng.random_bool(0.3);
        let carry = if wet { rng.random_bool(0.9) } else { rng.random_bool(0.1) };
        text.push_str(&format!("{},{}\n", if wet { "rain" } else { "sun" }, carry));
    }
    let table = read_csv(text.as_bytes())?;
    let disc = Discretizer::fit(&table.schema, &table.rows)?;
    let rows = disc.apply_all(&table.rows)?;
    let vocab = Vocabulary::build(&disc, TokenizerMode::Level);
    let tries = ColumnTrieSet::build(&vocab, &disc)?;

    let steps = 300;
    let (batch, sigma) = choose_batch(rows.len(), steps, 3.0, 1e-6, 64)?;
    let dp = DpConfig {
        clip: 1.0,
        noise_multiplier: sigma,
        expected_batch: batch,
        steps,
        augmult: 1,
        target_epsilon: Some(3.0),
        delta: 1e-6,
    };
    println!("batch {batch}, sigma {sigma:.3}");

    let cfg = ModelConfig {
        layers: 1,
        width: 16,
        heads: 2,
        context: vocab.max_sentence_len(&disc),
        vocab: vocab.size(),
        dropout: 0.0,
    };
    let mut params: TransformerParams<f32> = init_model(cfg, &mut rng)?;
    let schedule = LrSchedule {
        base: 3e-3,
        warmup: 20,
        total: steps,
    };
    let mut opt = OptimizerState::new(params.len(), schedule, AdamW::default());
    let mut ledger = PrivacyLedger::new();
    let options = TrainOptions {
        dp,
        order: OrderPolicy::Random,
        guiding: Guiding::Trie,
        seed: 2,
        workers: 0,
        noise: NoiseSource::Os,
        stop_at: None,
    };
    let data = TrainData {
        vocab: &vocab,
        disc: &disc,
        tries: &tries,
        rows: &rows,
    };
    train(&mut params, &mut opt, &mut ledger, &data, &options, |p| {
        if p.record.step % 50 == 0 {
            println!(
                "step {:>3}  loss {:.3}  clipped {:.2}  epsilon {:.3}",
                p.record.step,
                p.record.loss.unwrap_or(f64::NAN),
                p.record.clipped_fraction.unwrap_or(0.0),
                p.record.epsilon.unwrap_or(0.0)
            );
        }
        Ok(())
    })?;
    let nll = mean_nll(&params.cast::<f64>(), &vocab, &disc, &tries, &rows, Guiding::Trie)?;
    println!("NLL {:.3} nats/row, per column {:?}", nll.mean, nll.per_column);
    Ok(())
}
