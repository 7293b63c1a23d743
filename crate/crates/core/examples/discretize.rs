//! Infers column kinds from a CSV, fits the discretizer and maps rows to levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rowlm::table::{read_csv, Discretizer};

fn main() -> rowlm::Result<()> {
    let text = "age,job,hours\n\
                39,clerk,40\n\
                50,manager,13\n\
                38,,40\n\
                53,clerk,40\n\
                28,doctor,40\n\
                37,manager,80\n";
    let table = read_csv(text.as_bytes())?;
    for col in &table.schema.columns {
        println!("{:>6}: {:?}", col.name, col.kind);
    }
    let disc = Discretizer::fit(&table.schema, &table.rows)?;
    println!("levels per column: {:?}", disc.cardinalities());

    let levels = disc.apply_all(&table.rows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (raw, l) in table.rows.iter().zip(&levels) {
        println!("{raw:?} -> {:?} -> {:?}", l.levels(), disc.invert(l, &mut rng)?);
    }
    println!("\n{}", disc.to_json()?);
    Ok(())
}
