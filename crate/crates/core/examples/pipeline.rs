//! The command-line pipeline run in-process: prepare, train, generate, evaluate.

use rowlm::app::{cmd_evaluate, cmd_generate, cmd_prepare, cmd_train};
use rowlm::config::RunConfig;

fn main() -> rowlm::Result<()> {
    let dir = std::env::temp_dir().join("rowlm-pipeline-example");
    std::fs::create_dir_all(&dir).map_err(|e| rowlm::Error::io(&dir, e))?;
    let data = dir.join("shop.csv");
    let mut text = String::from("day,basket,spend\n");
    for i in 0..1500u32 {
        let day = ["mon", "tue", "sat"][(i % 7 % 3) as usize];
        let basket = if day == "sat" { 5 + i % 7 } else { 1 + i % 4 };
        text.push_str(&format!("{day},{basket},{:.2}\n", basket as f64 * 3.2 + (i % 13) as f64 * 0.1));
    }
    std::fs::write(&data, text).map_err(|e| rowlm::Error::io(&data, e))?;

    let mut cfg = RunConfig::from_toml(
        r#"
        [model]
        layers = 1
        width = 32
        heads = 2
        dropout = 0.0
        [privacy]
        epsilon = 8.0
        steps = 200
        [optimizer]
        lr = 3e-3
        warmup = 20
        [generation]
        rows = 1000
        "#,
    )?;
    cfg.data = Some(data);
    cfg.out = dir.join("run");

    println!("{:?}", cmd_prepare(&cfg)?);
    println!("{:?}", cmd_train(&cfg)?);
    println!("wrote {}", cmd_generate(&cfg, None, Some(200))?.output.display());
    let report = cmd_evaluate(&cfg, None)?;
    if let Some(nll) = &report.nll {
        println!("held-out NLL {:.3}", nll.mean);
    }
    println!("TVD {:?}", report.tvd);
    Ok(())
}
