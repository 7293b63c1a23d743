//! Walks the per-column value tries and shows which tokens are allowed at each
//! position of a semantic-mode sentence.

use rowlm::sentence::{encode_row, TokenizerMode, Vocabulary};
use rowlm::table::{read_csv, Discretizer};
use rowlm::trie::{mask_logits, ColumnTrieSet};

fn main() -> rowlm::Result<()> {
    let table = read_csv("city\nparis\nperth\nporto\nrome\n".as_bytes())?;
    let disc = Discretizer::fit(&table.schema, &table.rows)?;
    let vocab = Vocabulary::build(&disc, TokenizerMode::Semantic);
    let tries = ColumnTrieSet::build(&vocab, &disc)?;
    println!("values {}, trie depth {}", tries.leaf_count(0), tries.depth(0));

    let row = disc.apply(&table.rows[1], 1)?;
    let encoded = encode_row(&vocab, &disc, &row, &[0])?;
    let show = |t: u32| match vocab.token_byte(t) {
        Some(b) => format!("'{}'", b as char),
        None if vocab.is_end(t) => "END".into(),
        None => format!("#{t}"),
    };
    for (pos, valid) in tries.guide(&vocab, &encoded.inputs, &encoded.targets)?.iter().enumerate() {
        let target = encoded.targets[pos];
        if target == u32::MAX {
            continue;
        }
        let allowed: Vec<String> = valid.map_or_else(|| vec!["(any)".into()], |v| v.iter().map(|&t| show(t)).collect());
        println!("after {:>5} predict {:>5} from {allowed:?}", show(encoded.inputs[pos]), show(target));
    }

    // the masked softmax puts no mass outside the valid set
    let logits = vec![0.5f64; vocab.size()];
    let valid = tries.valid_tokens(tries.root(0));
    let masked = mask_logits(&logits, valid)?;
    let kept = masked.iter().filter(|&&l| l > f64::MIN).count();
    println!("root keeps {kept} of {} logits", logits.len());
    Ok(())
}
