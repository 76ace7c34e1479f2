#![allow(dead_code)]

use supergauss::neighborhood::{Feature, NeighborGraph, FEATURE_DIM};
use supergauss::partition::partition_energy;

/// Minimum energy over every set partition of `0..n` (restricted growth strings).
pub fn brute_force_optimum(features: &[Feature], graph: &NeighborGraph, mu: f64) -> (f64, Vec<usize>) {
    let n = features.len();
    let mut labels = vec![0usize; n];
    let mut best = (f64::INFINITY, labels.clone());
    fn rec(
        i: usize,
        max: usize,
        labels: &mut Vec<usize>,
        f: &[Feature],
        g: &NeighborGraph,
        mu: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if i == labels.len() {
            let e = partition_energy(f, g, labels, mu).total;
            if e < best.0 {
                *best = (e, labels.clone());
            }
            return;
        }
        for l in 0..=max + 1 {
            labels[i] = l;
            rec(i + 1, max.max(l), labels, f, g, mu, best);
        }
    }
    if n == 0 {
        return (0.0, labels);
    }
    labels[0] = 0;
    rec(1, 0, &mut labels, features, graph, mu, &mut best);
    best
}

pub fn feature_from(v: &[f64]) -> Feature {
    let mut f = [0.0; FEATURE_DIM];
    f[..v.len()].copy_from_slice(v);
    f
}

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use supergauss::raster::Splats;
use supergauss::scene::Camera;

/// Axis-aligned camera on the −z axis looking at the origin, principal point
/// at the image center.
pub fn front_camera(w: usize, h: usize, focal: f64) -> Camera {
    Camera::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 4.0), focal, focal, w as f64 / 2.0, h as f64 / 2.0, w, h)
        .unwrap()
}

/// Random anisotropic splats inside roughly `[-1, 1]³`.
pub fn random_splats(rng: &mut impl Rng, n: usize, max_opacity: f64) -> Splats {
    let mut s = Splats {
        position: Vec::new(),
        rotation: Vec::new(),
        log_scale: Vec::new(),
        color: Vec::new(),
        opacity: Vec::new(),
    };
    for _ in 0..n {
        s.position.push(Vector3::from_fn(|_, _| rng.gen_range(-0.9..0.9)));
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        s.rotation.push(q.map(|v| v / nq));
        s.log_scale.push(Vector3::from_fn(|_, _| rng.gen_range(-2.3..-1.0)));
        s.color.push(Vector3::from_fn(|_, _| rng.gen_range(0.05..0.95)));
        s.opacity.push(rng.gen_range(0.2..max_opacity));
    }
    s
}

/// Fraction of items whose group's majority label matches their own.
pub fn purity(groups: &[Vec<usize>], labels: &[usize]) -> f64 {
    let mut hit = 0;
    for g in groups {
        let mut counts = std::collections::BTreeMap::new();
        for &i in g {
            *counts.entry(labels[i]).or_insert(0usize) += 1;
        }
        hit += counts.values().max().copied().unwrap_or(0);
    }
    hit as f64 / labels.len() as f64
}
