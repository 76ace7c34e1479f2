//! Explicit Gaussian scene and the deterministic geometric maps used to
//! render it: quaternion → rotation, covariance assembly, and pinhole
//! projection with its first-order (EWA) Jacobian.
//!
//! Cameras use the computer-vision convention: `+x` right, `+y` down, `+z`
//! forward. Pixel `(col, row)` has its center at `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum camera-space depth for a Gaussian to be rendered.
pub const NEAR_PLANE: f64 = 1e-4;
/// Added to the diagonal of every projected covariance, in px².
pub const COV2D_DILATION: f64 = 0.3;

/// Rotation matrix of the quaternion `q = (w, x, y, z)`, renormalized first.
pub fn quaternion_to_rotation(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::invalid(format!("quaternion {q:?} cannot be normalized")));
    }
    let [w, x, y, z] = q.map(|c| c / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance(q: [f64; 4], log_scale: Vector3<f64>) -> Result<Matrix3<f64>> {
    let r = quaternion_to_rotation(q)?;
    Ok(covariance_from_rotation(&r, &log_scale))
}

pub(crate) fn covariance_from_rotation(r: &Matrix3<f64>, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    let sigma = r * d * r.transpose();
    // exact symmetry regardless of rounding
    (sigma + sigma.transpose()) * 0.5
}

/// Gradient of a loss through [`covariance`]: given `dL/dΣ` (any 3×3, not
/// necessarily symmetric) returns `(dL/dq, dL/dlog_scale)` for the
/// unnormalized quaternion.
pub fn covariance_vjp(
    q: [f64; 4],
    log_scale: &Vector3<f64>,
    d_sigma: &Matrix3<f64>,
) -> Result<([f64; 4], Vector3<f64>)> {
    let r = quaternion_to_rotation(q)?;
    // Σ = ½(RDRᵀ + (RDRᵀ)ᵀ) = RDRᵀ, so only the symmetric part of dΣ matters
    let gs = (d_sigma + d_sigma.transpose()) * 0.5;
    let dvals = log_scale.map(|s| (2.0 * s).exp());
    let d = Matrix3::from_diagonal(&dvals);
    let rt_g_r = r.transpose() * gs * r;
    let d_log_scale = Vector3::new(
        2.0 * dvals[0] * rt_g_r[(0, 0)],
        2.0 * dvals[1] * rt_g_r[(1, 1)],
        2.0 * dvals[2] * rt_g_r[(2, 2)],
    );
    let d_r = 2.0 * gs * r * d;
    Ok((rotation_vjp(q, &d_r), d_log_scale))
}

/// `dL/dq` (unnormalized) from `dL/dR` where `R = quaternion_to_rotation(q)`.
pub fn rotation_vjp(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let dh = [dw, dx, dy, dz];
    let qh = [w, x, y, z];
    let proj: f64 = dh.iter().zip(&qh).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (dh[k] - qh[k] * proj) / n;
    }
    out
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Rotation part of the world-to-camera transform.
    pub rotation: Matrix3<f64>,
    /// Translation part of the world-to-camera transform.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "camera rotation must be orthonormal with determinant +1",
            ));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::invalid("look_at: up is parallel to the view direction"));
        }
        let right = right.normalize();
        let down = fwd.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            rotation,
            translation,
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    /// Focal length in pixels for a horizontal field of view.
    pub fn focal_from_fov(fov_x: f64, width: usize) -> f64 {
        (width as f64 / 2.0) / (fov_x / 2.0).tan()
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera-to-world 4×4 (same axis convention as the camera).
    pub fn camera_to_world(&self) -> Matrix4<f64> {
        let rt = self.rotation.transpose();
        let t = -(rt * self.translation);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    pub fn from_camera_to_world(
        c2w: &Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let r = c2w.fixed_view::<3, 3>(0, 0).into_owned();
        let t = c2w.fixed_view::<3, 1>(0, 3).into_owned();
        let rotation = r.transpose();
        let translation = -(rotation * t);
        Self::new(rotation, translation, fx, fy, cx, cy, width, height)
    }
}

/// A Gaussian projected onto the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Pixel coordinates of the projected center.
    pub mean: Vector2<f64>,
    /// Screen-space covariance including the dilation floor.
    pub cov: Matrix2<f64>,
    /// Camera-space depth `t_z`.
    pub depth: f64,
    /// Camera-space center `t`.
    pub cam_point: Vector3<f64>,
    /// Projection Jacobian at `t`.
    pub jacobian: nalgebra::Matrix2x3<f64>,
}

/// Projects a Gaussian with center `position` and world covariance `sigma`.
/// Returns `None` when the center is at or behind the near plane (culled).
pub fn project(position: &Vector3<f64>, sigma: &Matrix3<f64>, cam: &Camera) -> Option<Projection> {
    let t = cam.to_camera(position);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let (tx, ty, tz) = (t.x, t.y, t.z);
    let j = nalgebra::Matrix2x3::new(
        cam.fx / tz,
        0.0,
        -cam.fx * tx / (tz * tz),
        0.0,
        cam.fy / tz,
        -cam.fy * ty / (tz * tz),
    );
    let m = cam.rotation * sigma * cam.rotation.transpose();
    let mut cov = j * m * j.transpose();
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    cov[(0, 0)] += COV2D_DILATION;
    cov[(1, 1)] += COV2D_DILATION;
    let mean = Vector2::new(cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy);
    Some(Projection {
        mean,
        cov,
        depth: tz,
        cam_point: t,
        jacobian: j,
    })
}

/// Projects `g` through `cam`; `Ok(None)` means the Gaussian is culled.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Result<Option<Projection>> {
    let sigma = covariance(g.rotation, g.log_scale)?;
    Ok(project(&g.position, &sigma, cam))
}

/// Gradient through [`project`]: given `dL/dmean`, `dL/dcov` (2×2) and
/// `dL/ddepth`, returns `(dL/dposition, dL/dΣ)`.
pub fn projection_vjp(
    proj: &Projection,
    sigma: &Matrix3<f64>,
    cam: &Camera,
    d_mean: &Vector2<f64>,
    d_cov: &Matrix2<f64>,
    d_depth: f64,
) -> (Vector3<f64>, Matrix3<f64>) {
    let t = proj.cam_point;
    let (tx, ty, tz) = (t.x, t.y, t.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let j = proj.jacobian;
    let w = cam.rotation;
    let m = w * sigma * w.transpose();
    // cov = ½(JMJᵀ + (JMJᵀ)ᵀ) + floor; symmetrize the incoming gradient
    let gc = (d_cov + d_cov.transpose()) * 0.5;
    let d_m = j.transpose() * gc * j;
    let d_j = gc * j * m.transpose() + gc.transpose() * j * m;
    let d_sigma = w.transpose() * d_m * w;

    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    let mut dt = Vector3::zeros();
    // mean
    dt.x += d_mean.x * fx / tz;
    dt.y += d_mean.y * fy / tz;
    dt.z += -d_mean.x * fx * tx / tz2 - d_mean.y * fy * ty / tz2;
    // depth
    dt.z += d_depth;
    // Jacobian entries
    dt.z += d_j[(0, 0)] * (-fx / tz2);
    dt.x += d_j[(0, 2)] * (-fx / tz2);
    dt.z += d_j[(0, 2)] * (2.0 * fx * tx / tz3);
    dt.z += d_j[(1, 1)] * (-fy / tz2);
    dt.y += d_j[(1, 2)] * (-fy / tz2);
    dt.z += d_j[(1, 2)] * (2.0 * fy * ty / tz3);

    (w.transpose() * dt, d_sigma)
}

/// One explicit 3D Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    /// Log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    /// Pre-sigmoid RGB.
    pub color_logit: Vector3<f64>,
    pub opacity_logit: f64,
    pub latent: Vec<f64>,
    pub group_id: Option<usize>,
}

impl Gaussian {
    pub fn new(position: Vector3<f64>, scale: f64, color: [f64; 3], opacity: f64) -> Self {
        Self {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            color_logit: Vector3::new(logit(color[0]), logit(color[1]), logit(color[2])),
            opacity_logit: logit(opacity),
            latent: Vec::new(),
            group_id: None,
        }
    }

    pub fn color(&self) -> Vector3<f64> {
        self.color_logit.map(sigmoid)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`], with the argument clamped away from 0 and 1.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in pts {
            min = min.inf(p);
            max = max.sup(p);
        }
        if min.x > max.x {
            min = Vector3::zeros();
            max = Vector3::zeros();
        }
        Self { min, max }
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    /// Largest side length.
    pub fn extent(&self) -> f64 {
        (self.max - self.min).max()
    }

    /// Per-axis half side lengths, floored at `1e-9`.
    pub fn half_sizes(&self) -> Vector3<f64> {
        ((self.max - self.min) * 0.5).map(|h| h.max(1e-9))
    }

    /// Maps the box onto `[-1, 1]³`.
    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center()).component_div(&self.half_sizes())
    }
}

/// The explicit scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
    pub bounds: Aabb,
    pub background: [f64; 3],
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>, background: [f64; 3]) -> Self {
        let bounds = Aabb::from_points(gaussians.iter().map(|g| &g.position));
        Self {
            gaussians,
            bounds,
            background,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    pub fn recompute_bounds(&mut self) {
        self.bounds = Aabb::from_points(self.gaussians.iter().map(|g| &g.position));
    }

    /// Number of groups implied by the assigned ids (max id + 1).
    pub fn group_count(&self) -> usize {
        self.gaussians
            .iter()
            .filter_map(|g| g.group_id)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Checks positions are finite and quaternions normalizable.
    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            if !g.position.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("gaussian {i}: non-finite position")));
            }
            quaternion_to_rotation(g.rotation)
                .map_err(|e| Error::invalid(format!("gaussian {i}: {e}")))?;
        }
        Ok(())
    }
}
