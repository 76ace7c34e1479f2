//! Two short runs with and without the position regularizer, summarized as a
//! markdown table and loss/PSNR plots.
//!
//! cargo run --release --example compare_runs -- out_dir

use std::path::PathBuf;

use supergauss::config::RunConfig;
use supergauss::io::{generate_synthetic, SyntheticSpec};
use supergauss::report::{markdown_table, plot_losses, plot_psnr, RunReport};
use supergauss::trainer::Trainer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "compare_runs_out".into()));
    std::fs::create_dir_all(&out)?;
    let spec = SyntheticSpec { floaters: 30, ..Default::default() };

    let mut runs = Vec::new();
    for (name, lambda_pos) in [("full", 0.2), ("no_pos", 0.0)] {
        let mut cfg = RunConfig::default();
        cfg.train.iterations = 300;
        cfg.train.eval_interval = 50;
        cfg.loss.lambda_pos = lambda_pos;
        let data = generate_synthetic(&spec, cfg.seed)?.dataset;
        let mut t = Trainer::from_dataset(cfg, data)?;
        let outcome = t.run(None)?;
        let report = RunReport::new(&t, &outcome);
        report.save(&out.join(format!("{name}.json")))?;
        runs.push((name.to_string(), report));
    }

    println!("{}", markdown_table(&runs));
    plot_losses(&runs, &out.join("loss.svg"))?;
    plot_psnr(&runs, &out.join("psnr.svg"))?;
    println!("wrote {}", out.display());
    Ok(())
}
