//! Image and depth metrics plus the training objective on a pair of images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supergauss::autograd::{Graph, Tensor};
use supergauss::objective::{l1_loss, mask_loss, psnr, srocc, ssim, ssim_loss};

fn main() -> supergauss::Result<()> {
    let (w, h) = (48, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clean: Vec<f64> = (0..w * h * 3).map(|i| ((i / 3) % w) as f64 / w as f64).collect();
    for noise in [0.0, 0.01, 0.05, 0.2] {
        let noisy: Vec<f64> = clean.iter().map(|v| (v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0)).collect();
        println!(
            "noise {noise:<5} PSNR {:>7.2}  SSIM {:.4}",
            psnr(&noisy, &clean)?,
            ssim(&noisy, &clean, w, h, 3)?
        );
    }

    // the same terms as differentiable graph nodes
    let noisy: Vec<f64> = clean.iter().map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)).collect();
    let target = Tensor::from_vec(w * h, 3, clean.clone())?;
    let mut g = Graph::new();
    let pred = g.variable(Tensor::from_vec(w * h, 3, noisy)?);
    let l1 = l1_loss(&mut g, pred, &target, None)?;
    let s = ssim_loss(&mut g, pred, &target, w, h)?;
    let alpha = g.variable(Tensor::from_fn(w * h, 1, |_, _| 0.9));
    let m = mask_loss(&mut g, alpha, &vec![1.0; w * h])?;
    println!(
        "L1 {:.4}  1-SSIM {:.4}  mask {:.4}",
        g.value(l1).item(),
        g.value(s).item(),
        g.value(m).item()
    );

    // rank correlation only cares about ordering
    let depth: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
    let warped: Vec<f64> = depth.iter().map(|d| d.exp()).collect();
    println!("SROCC of a monotone warp: {:.3}", srocc(&warped, &depth, &[true; 100])?);
    Ok(())
}
