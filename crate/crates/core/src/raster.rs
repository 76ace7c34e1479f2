//! Depth-sorted alpha compositing of projected Gaussians, with an analytic
//! backward pass.
//!
//! One global sort per view (no tiles). Each pixel row keeps the sorted list
//! of Gaussians whose 3σ box touches it; rows are rendered in parallel and
//! every per-Gaussian gradient is reduced in row order, so results do not
//! depend on the thread count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::{
    covariance, covariance_vjp, project, projection_vjp, Camera, GaussianSet, Projection,
};

/// Compositing thresholds. [`RenderSettings::exact`] disables every shortcut
/// that changes the result (skip, early exit, footprint culling).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub alpha_max: f64,
    /// Contributions with α below this are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Half-width of the screen-space box in standard deviations; `None`
    /// evaluates every Gaussian at every pixel.
    pub footprint_sigma: Option<f64>,
    pub depth_eps: f64,
    pub background: [f64; 3],
    /// Keep per-pixel `(gaussian, weight)` lists in the output.
    pub keep_contributions: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            min_transmittance: 1e-4,
            footprint_sigma: Some(3.0),
            depth_eps: 1e-8,
            background: [0.0; 3],
            keep_contributions: false,
        }
    }
}

impl RenderSettings {
    pub fn exact() -> Self {
        Self {
            alpha_min: 0.0,
            min_transmittance: 0.0,
            footprint_sigma: None,
            ..Self::default()
        }
    }

    pub fn with_background(mut self, bg: [f64; 3]) -> Self {
        self.background = bg;
        self
    }
}

/// Effective (activated) attributes fed to the rasterizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Splats {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    /// RGB in `[0, 1]`.
    pub color: Vec<Vector3<f64>>,
    /// Base opacity in `(0, 1)`.
    pub opacity: Vec<f64>,
}

impl Splats {
    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn from_set(set: &GaussianSet) -> Self {
        let g = &set.gaussians;
        Self {
            position: g.iter().map(|g| g.position).collect(),
            rotation: g.iter().map(|g| g.rotation).collect(),
            log_scale: g.iter().map(|g| g.log_scale).collect(),
            color: g.iter().map(|g| g.color()).collect(),
            opacity: g.iter().map(|g| g.opacity()).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.rotation.len() != n
            || self.log_scale.len() != n
            || self.color.len() != n
            || self.opacity.len() != n
        {
            return Err(Error::invalid("splats: attribute arrays differ in length"));
        }
        Ok(())
    }
}

/// Rendered images, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    /// Expected camera-space depth, normalized by accumulated alpha.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Residual transmittance per pixel.
    pub transmittance: Vec<f64>,
    /// `(gaussian, weight)` per pixel in compositing order, when requested.
    pub contributions: Option<Vec<Vec<(usize, f64)>>>,
}

impl RenderOutput {
    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        self.color[row * self.width + col]
    }

    /// Packs `[r, g, b, depth, alpha]` per pixel into a `(H·W)×5` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.color.len() * 5);
        for p in 0..self.color.len() {
            data.extend_from_slice(&self.color[p]);
            data.push(self.depth[p]);
            data.push(self.alpha[p]);
        }
        Tensor::from_vec(self.color.len(), 5, data).expect("render tensor shape")
    }
}

/// Column offsets of the packed render tensor.
pub const RENDER_COLS: usize = 5;

/// Screen-space state of one visible Gaussian.
#[derive(Clone, Debug)]
struct Projected {
    index: usize,
    proj: Projection,
    sigma: Matrix3<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    cols: (usize, usize),
    rows: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    /// Position in the sorted visible list.
    slot: u32,
    alpha: f64,
    /// Transmittance in front of this contribution.
    trans: f64,
    /// `o·G` before clamping.
    raw: f64,
}

/// Forward state retained for [`backward`].
pub struct RenderTape {
    cam: Camera,
    settings: RenderSettings,
    visible: Vec<Projected>,
    n: usize,
    pixels: Vec<Vec<Contribution>>,
    output: RenderOutput,
}

impl RenderTape {
    pub fn output(&self) -> &RenderOutput {
        &self.output
    }

    pub fn into_output(self) -> RenderOutput {
        self.output
    }
}

/// α of a 2D Gaussian at `p`, before clamping: `o·exp(−½ dᵀ Σ⁻¹ d)`.
pub fn gaussian_weight(mean: &Vector2<f64>, conic: &Matrix2<f64>, opacity: f64, p: &Vector2<f64>) -> f64 {
    let d = p - mean;
    let power = -0.5 * (conic[(0, 0)] * d.x * d.x + 2.0 * conic[(0, 1)] * d.x * d.y + conic[(1, 1)] * d.y * d.y);
    opacity * power.exp()
}

/// `min(o·exp(−½ dᵀ Σ⁻¹ d), α_max)`; `None` when below the skip threshold.
pub fn evaluate_alpha(
    mean: &Vector2<f64>,
    cov: &Matrix2<f64>,
    opacity: f64,
    p: &Vector2<f64>,
    settings: &RenderSettings,
) -> Result<Option<f64>> {
    let conic = cov
        .try_inverse()
        .filter(|_| cov[(0, 0)] > 0.0 && cov.determinant() > 0.0)
        .ok_or_else(|| Error::invalid("evaluate_alpha: 2D covariance is not positive definite"))?;
    let a = gaussian_weight(mean, &conic, opacity, p).min(settings.alpha_max);
    Ok((a >= settings.alpha_min).then_some(a))
}

/// Front-to-back compositing of `(α, color, depth)` triples already in depth
/// order. Returns `(color, depth, alpha, transmittance, weights)`.
pub fn composite(
    stack: &[(f64, [f64; 3], f64)],
    settings: &RenderSettings,
) -> ([f64; 3], f64, f64, f64, Vec<f64>) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut dn = 0.0;
    let mut acc = 0.0;
    let mut weights = Vec::with_capacity(stack.len());
    for &(alpha, col, depth) in stack {
        let w = alpha * t;
        for k in 0..3 {
            c[k] += w * col[k];
        }
        dn += w * depth;
        acc += w;
        weights.push(w);
        t *= 1.0 - alpha;
        if t < settings.min_transmittance {
            break;
        }
    }
    for k in 0..3 {
        c[k] += t * settings.background[k];
    }
    (c, dn / acc.max(settings.depth_eps), acc, t, weights)
}

fn pixel_range(center: f64, radius: f64, size: usize) -> (usize, usize) {
    // pixel i covers center i + 0.5; keep i with |i + 0.5 - center| <= radius
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(size as f64 - 1.0);
    if !(lo <= hi) {
        return (1, 0);
    }
    (lo as usize, hi as usize)
}

fn prepare(splats: &Splats, cam: &Camera, settings: &RenderSettings) -> Result<Vec<Projected>> {
    splats.check()?;
    let mut visible = Vec::new();
    for i in 0..splats.len() {
        let sigma = covariance(splats.rotation[i], splats.log_scale[i])?;
        let Some(proj) = project(&splats.position[i], &sigma, cam) else {
            continue;
        };
        let conic = proj
            .cov
            .try_inverse()
            .ok_or_else(|| Error::invalid(format!("gaussian {i}: singular 2D covariance")))?;
        let (cols, rows) = match settings.footprint_sigma {
            Some(k) => (
                pixel_range(proj.mean.x, k * proj.cov[(0, 0)].sqrt(), cam.width),
                pixel_range(proj.mean.y, k * proj.cov[(1, 1)].sqrt(), cam.height),
            ),
            None => ((0, cam.width - 1), (0, cam.height - 1)),
        };
        if cols.0 > cols.1 || rows.0 > rows.1 {
            continue;
        }
        visible.push(Projected {
            index: i,
            proj,
            sigma,
            conic,
            opacity: splats.opacity[i],
            color: splats.color[i],
            cols,
            rows,
        });
    }
    visible.sort_by(|a, b| a.proj.depth.total_cmp(&b.proj.depth).then(a.index.cmp(&b.index)));
    Ok(visible)
}

/// Renders color, expected depth and accumulated alpha; keeps the state
/// needed by [`backward`].
pub fn render_with_tape(splats: &Splats, cam: &Camera, settings: &RenderSettings) -> Result<RenderTape> {
    cam.validate()?;
    let visible = prepare(splats, cam, settings)?;
    let (w, h) = (cam.width, cam.height);
    let mut row_lists: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (slot, v) in visible.iter().enumerate() {
        for r in v.rows.0..=v.rows.1 {
            row_lists[r].push(slot as u32);
        }
    }
    let rows: Vec<(Vec<[f64; 3]>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<Vec<Contribution>>)> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut out_c = Vec::with_capacity(w);
            let mut out_d = Vec::with_capacity(w);
            let mut out_a = Vec::with_capacity(w);
            let mut out_t = Vec::with_capacity(w);
            let mut contribs = Vec::with_capacity(w);
            let py = r as f64 + 0.5;
            for c in 0..w {
                let p = Vector2::new(c as f64 + 0.5, py);
                let mut t = 1.0;
                let mut col = [0.0; 3];
                let mut dn = 0.0;
                let mut acc = 0.0;
                let mut list = Vec::new();
                for &slot in &row_lists[r] {
                    let v = &visible[slot as usize];
                    if c < v.cols.0 || c > v.cols.1 {
                        continue;
                    }
                    let raw = gaussian_weight(&v.proj.mean, &v.conic, v.opacity, &p);
                    let alpha = raw.min(settings.alpha_max);
                    if alpha < settings.alpha_min || alpha <= 0.0 {
                        continue;
                    }
                    let wgt = alpha * t;
                    for k in 0..3 {
                        col[k] += wgt * v.color[k];
                    }
                    dn += wgt * v.proj.depth;
                    acc += wgt;
                    list.push(Contribution {
                        slot,
                        alpha,
                        trans: t,
                        raw,
                    });
                    t *= 1.0 - alpha;
                    if t < settings.min_transmittance {
                        break;
                    }
                }
                for k in 0..3 {
                    col[k] += t * settings.background[k];
                }
                out_c.push(col);
                out_d.push(dn / acc.max(settings.depth_eps));
                out_a.push(acc);
                out_t.push(t);
                contribs.push(list);
            }
            (out_c, out_d, out_a, out_t, contribs)
        })
        .collect();

    let mut output = RenderOutput {
        width: w,
        height: h,
        color: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        alpha: Vec::with_capacity(w * h),
        transmittance: Vec::with_capacity(w * h),
        contributions: None,
    };
    let mut pixels = Vec::with_capacity(w * h);
    for (c, d, a, t, p) in rows {
        output.color.extend(c);
        output.depth.extend(d);
        output.alpha.extend(a);
        output.transmittance.extend(t);
        pixels.extend(p);
    }
    if settings.keep_contributions {
        output.contributions = Some(
            pixels
                .iter()
                .map(|l: &Vec<Contribution>| {
                    l.iter()
                        .map(|c| (visible[c.slot as usize].index, c.alpha * c.trans))
                        .collect()
                })
                .collect(),
        );
    }
    Ok(RenderTape {
        cam: cam.clone(),
        settings: settings.clone(),
        visible,
        n: splats.len(),
        pixels,
        output,
    })
}

pub fn render(splats: &Splats, cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    Ok(render_with_tape(splats, cam, settings)?.into_output())
}

/// Reference renderer: evaluates every Gaussian at every pixel, no shortcuts
/// beyond those enabled in `settings`. Used as a test oracle.
pub fn render_naive(splats: &Splats, cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    splats.check()?;
    let mut items = Vec::new();
    for i in 0..splats.len() {
        let sigma = covariance(splats.rotation[i], splats.log_scale[i])?;
        if let Some(p) = project(&splats.position[i], &sigma, cam) {
            items.push((i, p));
        }
    }
    items.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));
    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput {
        width: w,
        height: h,
        color: Vec::new(),
        depth: Vec::new(),
        alpha: Vec::new(),
        transmittance: Vec::new(),
        contributions: None,
    };
    for r in 0..h {
        for c in 0..w {
            let px = Vector2::new(c as f64 + 0.5, r as f64 + 0.5);
            let mut stack = Vec::new();
            for (i, p) in &items {
                if let Some(a) = evaluate_alpha(&p.mean, &p.cov, splats.opacity[*i], &px, settings)? {
                    if a > 0.0 {
                        let col = splats.color[*i];
                        stack.push((a, [col.x, col.y, col.z], p.depth));
                    }
                }
            }
            let (col, d, a, t, _) = composite(&stack, settings);
            out.color.push(col);
            out.depth.push(d);
            out.alpha.push(a);
            out.transmittance.push(t);
        }
    }
    Ok(out)
}

/// Per-Gaussian gradients of a scalar loss through the render.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub color: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    /// Intermediate screen-space gradients (for inspection and tests).
    pub mean2d: Vec<Vector2<f64>>,
    pub cov2d: Vec<Matrix2<f64>>,
}

impl SplatGrads {
    fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            color: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            mean2d: vec![Vector2::zeros(); n],
            cov2d: vec![Matrix2::zeros(); n],
        }
    }
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

/// Backward pass. `upstream` is `dL/d(render tensor)`, shape `(H·W)×5`
/// with columns `[r, g, b, depth, alpha]`. The sort order is held constant.
pub fn backward(
    tape: &RenderTape,
    splats: &Splats,
    upstream: &Tensor,
) -> Result<SplatGrads> {
    let (w, h) = (tape.output.width, tape.output.height);
    if upstream.shape() != (w * h, RENDER_COLS) {
        return Err(Error::Shape {
            op: "render_backward",
            lhs: (w * h, RENDER_COLS),
            rhs: upstream.shape(),
        });
    }
    if splats.len() != tape.n {
        return Err(Error::invalid("render_backward: splat count changed since forward"));
    }
    let settings = &tape.settings;
    let nv = tape.visible.len();
    // per-row partial sums over visible slots, reduced in row order below
    let row_grads: Vec<Vec<(u32, ScreenGrad)>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut local: std::collections::BTreeMap<u32, ScreenGrad> = Default::default();
            for c in 0..w {
                let p = r * w + c;
                let list = &tape.pixels[p];
                if list.is_empty() {
                    continue;
                }
                let g = upstream.row(p);
                let gc = Vector3::new(g[0], g[1], g[2]);
                let (gd, ga) = (g[3], g[4]);
                let acc = tape.output.alpha[p];
                let t_final = tape.output.transmittance[p];
                let denom = acc.max(settings.depth_eps);
                let numer = tape.output.depth[p] * denom;
                let gn = gd / denom;
                let ga_eff = if acc > settings.depth_eps {
                    ga - gd * numer / (acc * acc)
                } else {
                    ga
                };
                let bg = Vector3::from(settings.background);
                let mut suffix = gc.dot(&bg) * t_final;
                let px = Vector2::new(c as f64 + 0.5, r as f64 + 0.5);
                for con in list.iter().rev() {
                    let v = &tape.visible[con.slot as usize];
                    let wgt = con.alpha * con.trans;
                    let gw = gc.dot(&v.color) + gn * v.proj.depth + ga_eff;
                    let d_alpha = gw * con.trans - suffix / (1.0 - con.alpha);
                    suffix += gw * wgt;
                    let e = local.entry(con.slot).or_default();
                    e.color += gc * wgt;
                    e.depth += gn * wgt;
                    if con.raw >= settings.alpha_max {
                        continue;
                    }
                    // α = o·G
                    let gauss = con.raw / v.opacity;
                    e.opacity += d_alpha * gauss;
                    let d_power = d_alpha * con.raw;
                    let d = px - v.proj.mean;
                    let q = &v.conic;
                    e.mean += d_power * Vector2::new(q[(0, 0)] * d.x + q[(0, 1)] * d.y, q[(1, 0)] * d.x + q[(1, 1)] * d.y);
                    e.conic += -0.5 * d_power * (d * d.transpose());
                }
            }
            local.into_iter().collect()
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); nv];
    for row in row_grads {
        for (slot, g) in row {
            let s = &mut screen[slot as usize];
            s.mean += g.mean;
            s.conic += g.conic;
            s.opacity += g.opacity;
            s.color += g.color;
            s.depth += g.depth;
        }
    }

    let mut out = SplatGrads::zeros(splats.len());
    for (slot, v) in tape.visible.iter().enumerate() {
        let s = &screen[slot];
        let i = v.index;
        let g_cov = -(v.conic.transpose() * s.conic * v.conic.transpose());
        let (g_pos, g_sigma) = projection_vjp(&v.proj, &v.sigma, &tape.cam, &s.mean, &g_cov, s.depth);
        let (g_q, g_ls) = covariance_vjp(splats.rotation[i], &splats.log_scale[i], &g_sigma)?;
        out.position[i] = g_pos;
        out.rotation[i] = g_q;
        out.log_scale[i] = g_ls;
        out.color[i] = s.color;
        out.opacity[i] = s.opacity;
        out.mean2d[i] = s.mean;
        out.cov2d[i] = g_cov;
    }
    Ok(out)
}

pub fn splats_from_tensors(pos: &Tensor, rot: &Tensor, ls: &Tensor, col: &Tensor, op: &Tensor) -> Result<Splats> {
    let n = pos.rows();
    for (name, t, c) in [("position", pos, 3), ("rotation", rot, 4), ("log_scale", ls, 3), ("color", col, 3), ("opacity", op, 1)] {
        if t.shape() != (n, c) {
            return Err(Error::invalid(format!(
                "render: {name} has shape {:?}, expected ({n}, {c})",
                t.shape()
            )));
        }
    }
    Ok(Splats {
        position: (0..n).map(|i| Vector3::from_row_slice(pos.row(i))).collect(),
        rotation: (0..n).map(|i| [rot.get(i, 0), rot.get(i, 1), rot.get(i, 2), rot.get(i, 3)]).collect(),
        log_scale: (0..n).map(|i| Vector3::from_row_slice(ls.row(i))).collect(),
        color: (0..n).map(|i| Vector3::from_row_slice(col.row(i))).collect(),
        opacity: (0..n).map(|i| op.get(i, 0)).collect(),
    })
}

/// Variables of the render op, one row per Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct SplatVars {
    pub position: Var,
    pub rotation: Var,
    pub log_scale: Var,
    pub color: Var,
    pub opacity: Var,
}

impl SplatVars {
    /// Current values as plain splats.
    pub fn splats(&self, g: &Graph) -> Result<Splats> {
        splats_from_tensors(
            g.value(self.position),
            g.value(self.rotation),
            g.value(self.log_scale),
            g.value(self.color),
            g.value(self.opacity),
        )
    }
}

/// Records the rasterizer as a custom op. The result has shape `(H·W)×5`
/// (`[r, g, b, depth, alpha]` per pixel, row-major pixels).
pub fn render_op(
    g: &mut Graph,
    vars: SplatVars,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<(Var, RenderOutput)> {
    let splats = splats_from_tensors(
        g.value(vars.position),
        g.value(vars.rotation),
        g.value(vars.log_scale),
        g.value(vars.color),
        g.value(vars.opacity),
    )?;
    let tape = render_with_tape(&splats, cam, settings)?;
    let value = tape.output.to_tensor();
    let output = tape.output.clone();
    let n = splats.len();
    let bw = Box::new(move |up: &Tensor| {
        let gr = backward(&tape, &splats, up).expect("render backward shape checked at forward");
        let mut gp = Tensor::zeros(n, 3);
        let mut gq = Tensor::zeros(n, 4);
        let mut gs = Tensor::zeros(n, 3);
        let mut gc = Tensor::zeros(n, 3);
        let mut go = Tensor::zeros(n, 1);
        for i in 0..n {
            gp.row_mut(i).copy_from_slice(gr.position[i].as_slice());
            gq.row_mut(i).copy_from_slice(&gr.rotation[i]);
            gs.row_mut(i).copy_from_slice(gr.log_scale[i].as_slice());
            gc.row_mut(i).copy_from_slice(gr.color[i].as_slice());
            go.set(i, 0, gr.opacity[i]);
        }
        vec![gp, gq, gs, gc, go]
    });
    let out = g.custom(
        &[vars.position, vars.rotation, vars.log_scale, vars.color, vars.opacity],
        value,
        bw,
    );
    Ok((out, output))
}
