//! Privacy accounting: epsilon for a noise level, noise for a budget, and the
//! batch search that keeps the noise multiplier above 2.

use rowlm::accountant::{calibrate_sigma, choose_batch, epsilon_for, PrivacyLedger};

fn main() -> rowlm::Result<()> {
    let (delta, steps) = (1e-6, 100_000);
    let n = 30_162;

    let q = 256.0 / n as f64;
    for sigma in [1.0, 2.0, 4.0] {
        println!("q={q:.5} sigma={sigma}: epsilon {:.3}", epsilon_for(q, sigma, steps, delta)?);
    }
    let sigma = calibrate_sigma(q, steps, 5.0, delta)?;
    println!("epsilon 5 needs sigma {sigma:.4}");

    let (batch, sigma) = choose_batch(n, steps, 5.0, delta, 64)?;
    println!("batch search over {n} rows: B={batch}, sigma={sigma:.4}");

    let mut ledger = PrivacyLedger::new();
    ledger.compose(batch as f64 / n as f64, sigma, steps / 2)?;
    let half = ledger.to_epsilon(delta)?;
    ledger.compose(batch as f64 / n as f64, sigma, steps / 2)?;
    let full = ledger.to_epsilon(delta)?;
    println!("spent after half the steps {:.3}, after all {:.3} (order {:?})", half.epsilon, full.epsilon, full.order);
    Ok(())
}
