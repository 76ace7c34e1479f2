//! k-nearest-neighbor graph and eigenvalue shape descriptors on a toy cloud:
//! a line, a plane and a ball side by side.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supergauss::neighborhood::{build_knn, descriptors, KdTree};

fn main() -> supergauss::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pts = Vec::new();
    for _ in 0..200 {
        pts.push(Vector3::new(-3.0, 0.0, rng.gen_range(-1.0..1.0)));
    }
    for _ in 0..200 {
        pts.push(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0));
    }
    for _ in 0..200 {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        pts.push(v * 0.8 + Vector3::new(3.0, 0.0, 0.0));
    }

    let tree = KdTree::new(&pts);
    let nn = tree.knn(&pts[0], 3, Some(0));
    println!("nearest to point 0 (index, squared distance): {nn:?}");

    let graph = build_knn(&pts, 30)?;
    println!("{} nodes, {} connected components", graph.len(), graph.components().len());
    let desc = descriptors(&pts, &graph)?;
    for (name, range) in [("line", 0..200), ("plane", 200..400), ("ball", 400..600)] {
        let n = range.len() as f64;
        let (mut l, mut p, mut s, mut v) = (0.0, 0.0, 0.0, 0.0);
        for d in &desc[range] {
            l += d.linearity;
            p += d.planarity;
            s += d.scattering;
            v += d.verticality;
        }
        println!("{name:>5}: linearity {:.2}  planarity {:.2}  scattering {:.2}  verticality {:.2}", l / n, p / n, s / n, v / n);
    }
    Ok(())
}
