//! Short training run on the generated three-cluster scene.
//!
//! cargo run --release --example train_synthetic -- [iterations]

use supergauss::config::RunConfig;
use supergauss::io::{generate_synthetic, SyntheticSpec};
use supergauss::trainer::Trainer;

fn main() -> supergauss::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);

    let mut cfg = RunConfig::default();
    cfg.train.iterations = iterations;
    cfg.train.grouping_iteration = 100.min(iterations / 2);
    cfg.train.eval_interval = 100;
    let scene = generate_synthetic(&SyntheticSpec::default(), cfg.seed)?;
    let mut trainer = Trainer::from_dataset(cfg, scene.dataset)?;
    let out = trainer.run(None)?;

    for e in &out.evals {
        println!("iter {:>5}  eval PSNR {:.2}  SSIM {:.4}", e.iteration, e.psnr, e.ssim);
    }
    println!(
        "train PSNR {:.2} -> {:.2}, eval PSNR {:.2} -> {:.2}, depth SROCC {:?}",
        out.initial_train.psnr, out.final_train.psnr, out.initial_eval.psnr, out.final_eval.psnr, out.final_eval.srocc
    );
    if let Some(g) = &trainer.state.grouping {
        println!("{} supergaussians over {} Gaussians", g.partition.len(), trainer.state.scene.len());
    }
    Ok(())
}
