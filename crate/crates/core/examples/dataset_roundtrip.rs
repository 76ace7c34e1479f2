//! Write a generated dataset to disk in the transforms-JSON layout, read it
//! back, and check the images survive.
//!
//! cargo run --example dataset_roundtrip -- out_dir

use std::path::PathBuf;

use supergauss::io::ply::read_ply;
use supergauss::io::{generate_synthetic, load_dataset, save_dataset, SyntheticSpec};
use supergauss::objective::psnr;

fn main() -> supergauss::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "dataset_roundtrip_out".into()));
    let scene = generate_synthetic(&SyntheticSpec { floaters: 20, ..Default::default() }, 4)?;
    save_dataset(&dir, &scene.dataset)?;

    let back = load_dataset(&dir, 1)?;
    for (a, b) in scene.dataset.train.iter().chain(&scene.dataset.eval).zip(back.train.iter().chain(&back.eval)) {
        println!("{}: PSNR after round trip {:.1} dB", b.name, psnr(b.image.data(), a.image.data())?);
    }
    let pts = read_ply(&dir.join("points3d.ply"))?;
    println!("{} initial points ({} of them floaters)", pts.len(), pts.len() - scene.ground_truth.len());

    let half = load_dataset(&dir, 2)?;
    println!("downscaled by 2: {}x{}", half.width, half.height);
    Ok(())
}
