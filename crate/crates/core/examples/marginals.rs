//! k-way marginal tables and their total variation distance.

use rowlm::eval::{kway_marginal, marginal_index_sets, marginal_tvd};
use rowlm::table::LevelRow;

fn main() -> rowlm::Result<()> {
    let cards = [2, 3, 2];
    let real: Vec<LevelRow> = (0..600).map(|i| LevelRow(vec![i % 2, i % 3, (i / 2) % 2])).collect();
    let synth: Vec<LevelRow> = (0..600).map(|i| LevelRow(vec![i % 2, (i / 5) % 3, i % 2])).collect();
    for set in marginal_index_sets(cards.len(), 300, 0) {
        let a = kway_marginal(&real, &cards, &set)?;
        let b = kway_marginal(&synth, &cards, &set)?;
        println!("{set:?}: TVD {:.3}  real {:.3?}", marginal_tvd(&a, &b)?, a.freq);
    }
    let joint = kway_marginal(&real, &cards, &[0, 2])?;
    println!("summing out column 2 gives {:?}", joint.sum_out(1)?.freq);
    Ok(())
}
