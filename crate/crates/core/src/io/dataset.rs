//! Multi-view datasets in the NeRF-Blender layout.
//!
//! A dataset directory holds `transforms_train.json` and
//! `transforms_test.json`, each with `camera_angle_x` (horizontal field of
//! view, radians) and a list of frames with `file_path` and an OpenGL-style
//! camera-to-world `transform_matrix`. Masks are read from
//! `masks/<stem>.png`, reference depths from `depth/<stem>.depth`, and an
//! initial point set from `points3d.ply`, each when present.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use super::image::{load_rgb_scaled, read_depth, save_rgb16, write_depth};
use super::ply::{read_ply, write_ply};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianSet};

pub const POINTS_FILE: &str = "points3d.ply";

/// One posed image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    /// `(H·W)×3` RGB in `[0, 1]`.
    pub image: Tensor,
    /// Binary foreground mask per pixel.
    pub mask: Option<Vec<f64>>,
    /// Reference depth per pixel (camera-space z).
    pub depth: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<View>,
    pub eval: Vec<View>,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub points: Option<GaussianSet>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.eval.is_empty() {
            return Err(Error::invalid(format!(
                "dataset needs at least one train and one eval view (has {} / {})",
                self.train.len(),
                self.eval.len()
            )));
        }
        for v in self.train.iter().chain(&self.eval) {
            let n = self.width * self.height;
            if v.camera.width != self.width || v.camera.height != self.height || v.image.shape() != (n, 3) {
                return Err(Error::invalid(format!("view {}: size differs from the dataset", v.name)));
            }
            if v.mask.as_ref().is_some_and(|m| m.len() != n) || v.depth.as_ref().is_some_and(|d| d.len() != n) {
                return Err(Error::invalid(format!("view {}: mask or depth size differs", v.name)));
            }
            v.camera.validate()?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background: Option<[f64; 3]>,
    frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// OpenGL (x right, y up, looking down −z) to OpenCV (x right, y down, +z).
fn flip_yz() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, 1.0))
}

fn stem(file_path: &str) -> String {
    Path::new(file_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn resolve_image(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

fn load_split(dir: &Path, name: &str, factor: usize) -> Result<(Vec<View>, Option<[f64; 3]>)> {
    let path = dir.join(format!("transforms_{name}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: Manifest =
        serde_path_to_error::deserialize(de).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut views = Vec::with_capacity(manifest.frames.len());
    for frame in &manifest.frames {
        let img_path = resolve_image(dir, &frame.file_path);
        let img = load_rgb_scaled(&img_path, factor)?;
        let (w, h) = (img.width, img.height);
        let fx = Camera::focal_from_fov(manifest.camera_angle_x, w);
        let m = Matrix4::from_fn(|r, c| frame.transform_matrix[r][c]);
        let camera = Camera::from_camera_to_world(&(m * flip_yz()), fx, fx, w as f64 / 2.0, h as f64 / 2.0, w, h)
            .map_err(|e| Error::format(&path, format!("frame {}: {e}", frame.file_path)))?;
        let s = stem(&frame.file_path);
        let mask_path = dir.join("masks").join(format!("{s}.png"));
        let mask = if mask_path.exists() {
            let m = load_rgb_scaled(&mask_path, factor)?;
            if (m.width, m.height) != (w, h) {
                return Err(Error::format(&mask_path, "mask size differs from its image"));
            }
            Some(m.rgb.chunks(3).map(|c| if c[0] > 0.5 { 1.0 } else { 0.0 }).collect())
        } else {
            img.alpha
                .as_ref()
                .map(|a| a.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect())
        };
        let depth_path = dir.join("depth").join(format!("{s}.depth"));
        let depth = if depth_path.exists() {
            let (dw, dh, d) = read_depth(&depth_path)?;
            if factor == 1 && (dw, dh) != (w, h) {
                return Err(Error::format(&depth_path, "depth size differs from its image"));
            }
            // nearest sample at each downscaled pixel
            Some(
                (0..h * w)
                    .map(|p| d[((p / w) * factor).min(dh - 1) * dw + ((p % w) * factor).min(dw - 1)])
                    .collect(),
            )
        } else {
            None
        };
        views.push(View {
            name: s,
            camera,
            image: Tensor::from_vec(w * h, 3, img.rgb)?,
            mask,
            depth,
        });
    }
    Ok((views, manifest.background))
}

/// Loads a dataset directory, shrinking images by `downscale` (≥ 1).
pub fn load_dataset(dir: &Path, downscale: usize) -> Result<Dataset> {
    let factor = downscale.max(1);
    let (train, bg) = load_split(dir, "train", factor)?;
    let (eval, _) = load_split(dir, "test", factor)?;
    let first = train
        .first()
        .ok_or_else(|| Error::format(dir.join("transforms_train.json"), "no frames"))?;
    let (width, height) = (first.camera.width, first.camera.height);
    let points_path = dir.join(POINTS_FILE);
    let points = if points_path.exists() {
        Some(read_ply(&points_path)?)
    } else {
        None
    };
    let ds = Dataset {
        train,
        eval,
        width,
        height,
        background: bg.unwrap_or([1.0; 3]),
        points,
    };
    ds.validate().map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(ds)
}

fn save_split(dir: &Path, name: &str, views: &[View], background: [f64; 3]) -> Result<()> {
    let Some(first) = views.first() else {
        return Err(Error::invalid(format!("save_dataset: split {name} is empty")));
    };
    let fov = 2.0 * (first.camera.width as f64 / (2.0 * first.camera.fx)).atan();
    let mut frames = Vec::new();
    for v in views {
        let (w, h) = (v.camera.width, v.camera.height);
        let file_path = format!("{name}/{}", v.name);
        save_rgb16(&dir.join(format!("{file_path}.png")), v.image.data(), w, h)?;
        if let Some(m) = &v.mask {
            let rgb: Vec<f64> = m.iter().flat_map(|&x| [x, x, x]).collect();
            save_rgb16(&dir.join("masks").join(format!("{}.png", v.name)), &rgb, w, h)?;
        }
        if let Some(d) = &v.depth {
            write_depth(&dir.join("depth").join(format!("{}.depth", v.name)), d, w, h)?;
        }
        let m = v.camera.camera_to_world() * flip_yz();
        frames.push(Frame {
            file_path,
            transform_matrix: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
        });
    }
    let manifest = Manifest {
        camera_angle_x: fov,
        background: Some(background),
        frames,
    };
    let path = dir.join(format!("transforms_{name}.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `ds` in the layout read by [`load_dataset`]. Images are stored
/// with 16 bits per channel, depths as `f32`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_split(dir, "train", &ds.train, ds.background)?;
    save_split(dir, "test", &ds.eval, ds.background)?;
    if let Some(p) = &ds.points {
        write_ply(&dir.join(POINTS_FILE), p)?;
    }
    Ok(())
}
