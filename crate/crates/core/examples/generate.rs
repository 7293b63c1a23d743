//! Samples rows from a model with trie-constrained decoding; every sentence is
//! valid even for an untrained network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rowlm::model::{init_model, ModelConfig, TransformerParams};
use rowlm::sentence::{OrderPolicy, TokenizerMode, Vocabulary};
use rowlm::synth::{generate_table, GenerationConfig};
use rowlm::table::{read_csv, Discretizer};
use rowlm::trie::ColumnTrieSet;

fn main() -> rowlm::Result<()> {
    let text = "make,doors,price\nvw,4,12000\nfiat,2,8000\nvw,2,15500\nbmw,4,31000\nfiat,4,9900\n";
    let table = read_csv(text.as_bytes())?;
    let disc = Discretizer::fit(&table.schema, &table.rows)?;
    for mode in [TokenizerMode::Level, TokenizerMode::Semantic] {
        let vocab = Vocabulary::build(&disc, mode);
        let tries = ColumnTrieSet::build(&vocab, &disc)?;
        let cfg = ModelConfig {
            layers: 1,
            width: 16,
            heads: 2,
            context: vocab.max_sentence_len(&disc),
            vocab: vocab.size(),
            dropout: 0.1,
        };
        let params: TransformerParams<f32> = init_model(cfg, &mut ChaCha8Rng::seed_from_u64(4))?;
        let config = GenerationConfig {
            rows: 5,
            order: OrderPolicy::Random,
            temperature: 1.0,
            seed: 7,
        };
        let (surface, _) = generate_table(&params, &vocab, &tries, &disc, &config)?;
        println!("{mode:?}");
        for row in surface {
            println!("  {}", row.join(","));
        }
    }
    Ok(())
}
