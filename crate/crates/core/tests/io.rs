mod common;

use std::time::Instant;

use supergauss::io::{generate_synthetic, load_dataset, save_dataset, SyntheticSpec};
use supergauss::objective::psnr;
use supergauss::partition::{group_scene, GroupingConfig};
use supergauss::raster::{render, RenderSettings, Splats};
use supergauss::scene::Camera;

#[test]
fn synthetic_is_deterministic() {
    let spec = SyntheticSpec::default();
    let a = generate_synthetic(&spec, 7).unwrap();
    let b = generate_synthetic(&spec, 7).unwrap();
    for (va, vb) in a.dataset.train.iter().chain(&a.dataset.eval).zip(b.dataset.train.iter().chain(&b.dataset.eval)) {
        assert_eq!(va.image.data(), vb.image.data());
        assert_eq!(va.mask, vb.mask);
        assert_eq!(va.depth, vb.depth);
    }
    let pa = &a.dataset.points.as_ref().unwrap().gaussians;
    let pb = &b.dataset.points.as_ref().unwrap().gaussians;
    assert!(pa.iter().zip(pb).all(|(x, y)| x.position == y.position));
    let c = generate_synthetic(&spec, 8).unwrap();
    assert_ne!(a.dataset.train[0].image.data(), c.dataset.train[0].image.data());
}

#[test]
fn ground_truth_rerender_hits_psnr_cap() {
    let scene = generate_synthetic(&SyntheticSpec::default(), 1).unwrap();
    let splats = Splats::from_set(&scene.ground_truth);
    let settings = RenderSettings::default().with_background(scene.dataset.background);
    for v in scene.dataset.train.iter().chain(&scene.dataset.eval) {
        let out = render(&splats, &v.camera, &settings).unwrap();
        let pred: Vec<f64> = out.color.iter().flat_map(|c| c.map(supergauss::io::image::quantize16)).collect();
        assert_eq!(psnr(&pred, v.image.data()).unwrap(), 100.0);
        // each view sees a good part of the scene
        let covered = v.mask.as_ref().unwrap().iter().filter(|&&m| m > 0.5).count();
        assert!(covered > 200, "{} covers only {covered} px", v.name);
    }
}

#[test]
fn grouping_recovers_clusters() {
    let scene = generate_synthetic(&SyntheticSpec::default(), 3).unwrap();
    let t = Instant::now();
    let cfg = GroupingConfig {
        target: (3, 3),
        ..Default::default()
    };
    let g = group_scene(&scene.ground_truth, &cfg).unwrap();
    let p = common::purity(&g.partition.groups, &scene.labels);
    eprintln!("G={} purity={p:.4} in {:?}", g.partition.len(), t.elapsed());
    assert_eq!(g.partition.len(), 3);
    assert!(p >= 0.95);
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        train_views: 3,
        eval_views: 5,
        ..Default::default()
    };
    let scene = generate_synthetic(&spec, 2).unwrap();
    save_dataset(dir.path(), &scene.dataset).unwrap();
    let ds = load_dataset(dir.path(), 1).unwrap();
    assert_eq!((ds.train.len(), ds.eval.len()), (3, 5));
    for (a, b) in ds.train.iter().chain(&ds.eval).zip(scene.dataset.train.iter().chain(&scene.dataset.eval)) {
        assert_eq!(a.name, b.name);
        assert!((a.camera.rotation - b.camera.rotation).abs().max() < 1e-12);
        assert!((a.camera.translation - b.camera.translation).abs().max() < 1e-12);
        assert!((a.camera.fx - b.camera.fx).abs() < 1e-12);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.depth, b.depth);
    }
    let pts = ds.points.unwrap();
    assert_eq!(pts.len(), scene.dataset.points.as_ref().unwrap().len());
}

#[test]
fn focal_from_ninety_degree_fov() {
    assert!((Camera::focal_from_fov(90f64.to_radians(), 64) - 32.0).abs() < 1e-12);
}
