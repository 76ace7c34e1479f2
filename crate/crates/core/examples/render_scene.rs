//! Render a handful of Gaussians and write color, alpha and depth images.
//!
//! cargo run --example render_scene -- out_dir

use std::path::PathBuf;

use nalgebra::Vector3;
use supergauss::io::image::{depth_preview, save_gray, save_rgb};
use supergauss::raster::{render, RenderSettings, Splats};
use supergauss::scene::{Camera, Gaussian, GaussianSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render_scene_out".into()));
    std::fs::create_dir_all(&out)?;

    let mut gs = vec![
        Gaussian::new(Vector3::new(-0.4, 0.0, 0.0), 0.25, [0.9, 0.2, 0.1], 0.9),
        Gaussian::new(Vector3::new(0.3, 0.1, 0.3), 0.2, [0.1, 0.4, 0.9], 0.8),
        Gaussian::new(Vector3::new(0.0, -0.3, -0.3), 0.15, [0.2, 0.8, 0.3], 0.95),
    ];
    // stretch the first one along x
    gs[0].log_scale.x += 0.8;
    let set = GaussianSet::new(gs, [1.0, 1.0, 1.0]);

    let (w, h) = (128, 96);
    let f = Camera::focal_from_fov(50f64.to_radians(), w);
    let cam = Camera::look_at(Vector3::new(0.0, -3.0, 0.8), Vector3::zeros(), Vector3::z(), f, f, w, h)?;
    let settings = RenderSettings::default().with_background(set.background);
    let img = render(&Splats::from_set(&set), &cam, &settings)?;

    let rgb: Vec<f64> = img.color.iter().flatten().copied().collect();
    save_rgb(&out.join("color.png"), &rgb, w, h)?;
    save_gray(&out.join("alpha.png"), &img.alpha, w, h)?;
    let valid: Vec<bool> = img.alpha.iter().map(|&a| a > 0.5).collect();
    save_gray(&out.join("depth.png"), &depth_preview(&img.depth, &valid), w, h)?;

    let covered = valid.iter().filter(|&&v| v).count();
    println!("{covered} of {} pixels covered, center pixel {:?}", w * h, img.pixel(w / 2, h / 2));
    println!("wrote {}", out.display());
    Ok(())
}
