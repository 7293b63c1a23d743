//! Turns rows into token sentences in both tokenizer modes and decodes them back.

use rowlm::sentence::{decode_sentence, encode_row, TokenizerMode, Vocabulary};
use rowlm::table::{read_csv, Discretizer};

fn main() -> rowlm::Result<()> {
    let table = read_csv("colour,size\nred,10\nblue,12\ngreen,10\n".as_bytes())?;
    let disc = Discretizer::fit(&table.schema, &table.rows)?;
    let row = disc.apply(&table.rows[1], 1)?;
    for mode in [TokenizerMode::Level, TokenizerMode::Semantic] {
        let vocab = Vocabulary::build(&disc, mode);
        let encoded = encode_row(&vocab, &disc, &row, &[1, 0])?;
        println!("{mode:?}: vocab {} tokens, longest sentence {}", vocab.size(), vocab.max_sentence_len(&disc));
        println!("  inputs  {:?}", encoded.inputs);
        println!("  targets {:?}", encoded.targets);
        assert_eq!(decode_sentence(&vocab, &disc, &encoded.inputs)?, row);
    }
    Ok(())
}
