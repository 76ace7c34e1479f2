//! Seeded toy scenes: a few Gaussian clusters of distinct shape and color,
//! seen by cameras on a ring, with images, masks and depths rendered by this
//! crate's own rasterizer.

use std::f64::consts::PI;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, View};
use super::image::quantize16;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::raster::{render, RenderSettings, Splats};
use crate::scene::{logit, Camera, Gaussian, GaussianSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub width: usize,
    pub height: usize,
    pub train_views: usize,
    pub eval_views: usize,
    pub ring_radius: f64,
    /// Camera height above the cluster plane.
    pub ring_height: f64,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub background: [f64; 3],
    /// Per-axis uniform jitter of the initial positions.
    pub init_jitter: f64,
    pub init_scale: f64,
    pub init_opacity: f64,
    /// Extra spurious Gaussians in the initial set, placed inside every
    /// training silhouette but away from the surfaces.
    pub floaters: usize,
    /// Minimum distance from a floater to any ground-truth Gaussian.
    pub floater_clearance: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 3,
            per_cluster: 100,
            width: 64,
            height: 64,
            train_views: 3,
            eval_views: 2,
            ring_radius: 3.5,
            ring_height: 1.3,
            fov_deg: 45.0,
            background: [1.0; 3],
            init_jitter: 0.03,
            init_scale: 0.05,
            init_opacity: 0.3,
            floaters: 0,
            floater_clearance: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| {
            Err(Error::Config {
                field: format!("data.synthetic.{f}"),
                message: m.into(),
            })
        };
        if self.clusters == 0 || self.per_cluster < 4 {
            return bad("per_cluster", "need >= 1 cluster of >= 4 Gaussians");
        }
        if self.width == 0 || self.height == 0 {
            return bad("width", "image size must be non-zero");
        }
        if self.train_views == 0 || self.eval_views == 0 {
            return bad("train_views", "need >= 1 train and >= 1 eval view");
        }
        if !(self.ring_radius > 0.0) || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("ring_radius", "ring radius must be > 0 and fov in (0, 180)");
        }
        if !(self.init_scale > 0.0) || !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_scale", "init scale must be > 0 and init opacity in (0, 1)");
        }
        Ok(())
    }
}

/// Cluster shapes, cycled over cluster indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterShape {
    Linear,
    Planar,
    Isotropic,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.7, 0.3],
    [0.25, 0.35, 0.85],
    [0.85, 0.75, 0.2],
    [0.6, 0.3, 0.7],
    [0.2, 0.75, 0.75],
];

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub dataset: Dataset,
    /// Ground truth, `group_id` = cluster.
    pub ground_truth: GaussianSet,
    /// Cluster per ground-truth Gaussian.
    pub labels: Vec<usize>,
    pub shapes: Vec<ClusterShape>,
    /// Cluster per initial Gaussian; `None` for floaters.
    pub init_labels: Vec<Option<usize>>,
}

fn unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn quat_between(from: &Vector3<f64>, to: &Vector3<f64>) -> [f64; 4] {
    let r = Rotation3::rotation_between(from, to).unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::y_axis(), PI));
    let q = UnitQuaternion::from_rotation_matrix(&r);
    [q.w, q.i, q.j, q.k]
}

fn cluster(rng: &mut impl Rng, k: usize, spec: &SyntheticSpec) -> (ClusterShape, Vec<Gaussian>) {
    let shape = [ClusterShape::Linear, ClusterShape::Planar, ClusterShape::Isotropic][k % 3];
    let ang = 2.0 * PI * k as f64 / spec.clusters as f64 + PI / 6.0;
    let spread = if spec.clusters == 1 { 0.0 } else { 0.75 };
    let center = Vector3::new(spread * ang.cos(), spread * ang.sin(), 0.2 * ((k % 3) as f64 - 1.0));
    let base = PALETTE[k % PALETTE.len()];
    let axis = unit(rng);
    let mut out = Vec::with_capacity(spec.per_cluster);
    for _ in 0..spec.per_cluster {
        let (offset, scales, rotation) = match shape {
            ClusterShape::Linear => {
                let t = rng.gen_range(-0.55..0.55);
                let side = Vector3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
                let side = side - axis * axis.dot(&side);
                (axis * t + side, Vector3::new(0.07, 0.02, 0.02), quat_between(&Vector3::x(), &axis))
            }
            ClusterShape::Planar => {
                let r = 0.45 * rng.gen::<f64>().sqrt();
                let phi = rng.gen_range(0.0..2.0 * PI);
                let q = quat_between(&Vector3::z(), &axis);
                let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
                let local = Vector3::new(r * phi.cos(), r * phi.sin(), rng.gen_range(-0.01..0.01));
                (rot * local, Vector3::new(0.06, 0.06, 0.012), q)
            }
            ClusterShape::Isotropic => {
                let v = loop {
                    let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    if v.norm() <= 1.0 {
                        break v * 0.32;
                    }
                };
                (v, Vector3::repeat(0.05), [1.0, 0.0, 0.0, 0.0])
            }
        };
        let color = base.map(|c| (c + rng.gen_range(-0.06..0.06)).clamp(0.02, 0.98));
        let mut g = Gaussian::new(center + offset, 1.0, color, 0.85);
        g.log_scale = scales.map(f64::ln);
        g.rotation = rotation;
        g.group_id = Some(k);
        out.push(g);
    }
    (shape, out)
}

/// Ring camera at angle `theta`.
pub fn ring_camera(spec: &SyntheticSpec, theta: f64) -> Result<Camera> {
    let eye = Vector3::new(spec.ring_radius * theta.cos(), spec.ring_radius * theta.sin(), spec.ring_height);
    let f = Camera::focal_from_fov(spec.fov_deg.to_radians(), spec.width);
    Camera::look_at(eye, Vector3::zeros(), Vector3::z(), f, f, spec.width, spec.height)
}

/// Renders `set` from `cam` into a stored view (16-bit color, binary mask
/// from alpha > 0.5, f32 depth).
pub fn render_view(set: &GaussianSet, cam: &Camera, name: String) -> Result<View> {
    let out = render(
        &Splats::from_set(set),
        cam,
        &RenderSettings::default().with_background(set.background),
    )?;
    let n = cam.width * cam.height;
    let image = Tensor::from_fn(n, 3, |p, k| quantize16(out.color[p][k]));
    Ok(View {
        name,
        camera: cam.clone(),
        image,
        mask: Some(out.alpha.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect()),
        depth: Some(out.depth.iter().map(|&d| d as f32 as f64).collect()),
    })
}

fn inside_mask(view: &View, x: &Vector3<f64>) -> bool {
    let cam = &view.camera;
    let t = cam.to_camera(x);
    if t.z <= 0.0 {
        return false;
    }
    let u = cam.fx * t.x / t.z + cam.cx;
    let v = cam.fy * t.y / t.z + cam.cy;
    if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
        return false;
    }
    let p = v as usize * cam.width + u as usize;
    view.mask.as_ref().map_or(true, |m| m[p] > 0.5)
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::new();
    let mut labels = Vec::new();
    let mut shapes = Vec::new();
    for k in 0..spec.clusters {
        let (shape, gs) = cluster(&mut rng, k, spec);
        labels.extend(std::iter::repeat(k).take(gs.len()));
        gaussians.extend(gs);
        shapes.push(shape);
    }
    let gt = GaussianSet::new(gaussians, spec.background);

    let views = |count: usize, offset: f64, prefix: &str| -> Result<Vec<View>> {
        (0..count)
            .map(|j| {
                let theta = 2.0 * PI * (j as f64 + offset) / count as f64;
                render_view(&gt, &ring_camera(spec, theta)?, format!("{prefix}_{j:03}"))
            })
            .collect()
    };
    let train = views(spec.train_views, 0.0, "r")?;
    let eval = views(spec.eval_views, 0.5, "e")?;

    let j = spec.init_jitter;
    let mut init: Vec<Gaussian> = gt
        .gaussians
        .iter()
        .map(|g| {
            let d = Vector3::new(rng.gen_range(-j..=j), rng.gen_range(-j..=j), rng.gen_range(-j..=j));
            Gaussian::new(g.position + d, spec.init_scale, [0.5; 3], spec.init_opacity)
        })
        .collect();
    let mut init_labels: Vec<Option<usize>> = labels.iter().map(|&k| Some(k)).collect();
    let lo = gt.bounds.min.add_scalar(-0.2);
    let hi = gt.bounds.max.add_scalar(0.2);
    let gt_pos = gt.positions();
    let budget = 20_000 * spec.floaters;
    let mut tries = 0;
    let mut placed = 0;
    while placed < spec.floaters {
        let p = Vector3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z));
        tries += 1;
        if tries == budget {
            log::warn!("synthetic: placed {placed} floaters inside the silhouettes, the rest go anywhere");
        }
        // inside every training silhouette, so only novel views expose it
        let hidden = train.iter().all(|v| inside_mask(v, &p))
            && gt_pos.iter().all(|q| (q - p).norm() > spec.floater_clearance);
        if hidden || tries >= budget {
            init.push(Gaussian::new(p, spec.init_scale, [0.5; 3], spec.init_opacity));
            init_labels.push(None);
            placed += 1;
        }
    }
    for g in &mut init {
        g.color_logit = g.color_logit.map(|_| logit(0.5));
    }
    let dataset = Dataset {
        train,
        eval,
        width: spec.width,
        height: spec.height,
        background: spec.background,
        points: Some(GaussianSet::new(init, spec.background)),
    };
    dataset.validate()?;
    Ok(SyntheticScene {
        dataset,
        ground_truth: gt,
        labels,
        shapes,
        init_labels,
    })
}
