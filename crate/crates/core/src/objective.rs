//! Training losses (recorded on the autograd tape) and evaluation metrics
//! (plain f64).
//!
//! Images are `(H·W)×C` tensors or flat row-major slices with interleaved
//! channels; pixel `p = row·W + col`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::neighborhood::NeighborGraph;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Blend between L1 (`lambda`) and `1 - SSIM` (`1 - lambda`).
    pub lambda: f64,
    pub lambda_pos: f64,
    pub lambda_mask: f64,
    pub lambda_avg: f64,
    pub lambda_ctr: f64,
    /// Denominator guard in the neighbor average and group centroid.
    pub eps: f64,
    /// Which neighbor edges the neighbor-distance term uses.
    pub position_edges: EdgeScope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeScope {
    /// Only edges inside a group.
    Intra,
    /// Every neighbor-graph edge.
    All,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            lambda_pos: 0.2,
            lambda_mask: 0.1,
            lambda_avg: 1.0,
            lambda_ctr: 1.0,
            eps: 1e-8,
            position_edges: EdgeScope::Intra,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config {
                field: "loss.lambda".into(),
                message: format!("must lie in [0, 1], got {}", self.lambda),
            });
        }
        for (name, v) in [
            ("loss.lambda_pos", self.lambda_pos),
            ("loss.lambda_mask", self.lambda_mask),
            ("loss.lambda_avg", self.lambda_avg),
            ("loss.lambda_ctr", self.lambda_ctr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: name.into(),
                    message: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config {
                field: "loss.eps".into(),
                message: format!("must be > 0, got {}", self.eps),
            });
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian taps of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *x = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// `n×n` matrix applying the window along one axis with zero padding.
fn blur_matrix(n: usize) -> Tensor {
    let w = gaussian_window();
    let r = (SSIM_WINDOW / 2) as isize;
    Tensor::from_fn(n, n, |i, j| {
        let d = j as isize - i as isize;
        if d.abs() <= r {
            w[(d + r) as usize]
        } else {
            0.0
        }
    })
}

fn check_mask(mask: &[f64], pixels: usize) -> Result<f64> {
    if mask.len() != pixels {
        return Err(Error::invalid(format!(
            "mask has {} pixels, image has {pixels}",
            mask.len()
        )));
    }
    let count: f64 = mask.iter().sum();
    if !(count > 0.0) {
        return Err(Error::invalid("mask selects no pixels"));
    }
    Ok(count)
}

/// Mean absolute error, restricted to pixels with `mask > 0` when given.
pub fn l1_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: Option<&[f64]>) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    match mask {
        None => Ok(g.mean(a)),
        Some(m) => {
            let count = check_mask(m, target.rows())?;
            let mc = g.constant(Tensor::column(m));
            let am = g.mul_col(a, mc)?;
            let s = g.sum(am);
            Ok(g.scale(s, 1.0 / (count * target.cols() as f64)))
        }
    }
}

/// `1 - SSIM(pred, target)` averaged over pixels and channels.
pub fn ssim_loss(g: &mut Graph, pred: Var, target: &Tensor, width: usize, height: usize) -> Result<Var> {
    let (n, c) = g.value(pred).shape();
    if n != width * height || target.shape() != (n, c) {
        return Err(Error::Shape {
            op: "ssim_loss",
            lhs: (n, c),
            rhs: target.shape(),
        });
    }
    let bh = blur_matrix(height);
    let bw = blur_matrix(width);
    let bh_v = g.constant(bh.clone());
    let bw_v = g.constant(bw.clone());
    let blur_t = |x: &Tensor| bh.matmul(x).and_then(|y| y.matmul(&bw));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = None;
    for k in 0..c {
        let y = Tensor::from_fn(height, width, |r, col| target.get(r * width + col, k));
        let mu_y = blur_t(&y)?;
        let var_y = blur_t(&y.zip_map(&y, |a, b| a * b))?.zip_map(&mu_y, |e, m| e - m * m);

        let xs = g.slice_cols(pred, k, k + 1)?;
        let x = g.reshape(xs, height, width)?;
        let blur = |g: &mut Graph, v: Var| -> Result<Var> {
            let a = g.matmul(bh_v, v)?;
            g.matmul(a, bw_v)
        };
        let mu_x = blur(g, x)?;
        let xx = g.mul(x, x)?;
        let exx = blur(g, xx)?;
        let yv = g.constant(y);
        let xy = g.mul(x, yv)?;
        let exy = blur(g, xy)?;

        let mu_x2 = g.mul(mu_x, mu_x)?;
        let var_x = g.sub(exx, mu_x2)?;
        let muy = g.constant(mu_y.clone());
        let mu_xy = g.mul(mu_x, muy)?;
        let cov = g.sub(exy, mu_xy)?;

        let a1 = g.scale(mu_xy, 2.0);
        let a1 = g.add_scalar(a1, c1);
        let a2 = g.scale(cov, 2.0);
        let a2 = g.add_scalar(a2, c2);
        let num = g.mul(a1, a2)?;
        let muy2 = g.constant(mu_y.zip_map(&mu_y, |a, b| a * b).map(|v| v + c1));
        let b1 = g.add(mu_x2, muy2)?;
        let vy = g.constant(var_y.map(|v| v + c2));
        let b2 = g.add(var_x, vy)?;
        let den = g.mul(b1, b2)?;
        let map = g.div(num, den)?;
        let m = g.mean(map);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    let s = total.ok_or_else(|| Error::invalid("ssim_loss: image has no channels"))?;
    let s = g.scale(s, -1.0 / c as f64);
    Ok(g.add_scalar(s, 1.0))
}

/// Mean over all pixels of `(A - M)²`.
pub fn mask_loss(g: &mut Graph, alpha: Var, mask: &[f64]) -> Result<Var> {
    let (n, c) = g.value(alpha).shape();
    if c != 1 || n != mask.len() {
        return Err(Error::invalid(format!(
            "mask_loss: alpha is {n}x{c}, mask has {} pixels",
            mask.len()
        )));
    }
    let m = g.constant(Tensor::column(mask));
    let d = g.sub(alpha, m)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Edges of the neighbor-distance term for `scope`.
pub fn position_edges(graph: &NeighborGraph, assignment: &[usize], scope: EdgeScope) -> Vec<(usize, usize)> {
    match scope {
        EdgeScope::Intra => intra_group_edges(graph, assignment),
        EdgeScope::All => graph.edges.clone(),
    }
}

/// Edges of `graph` whose endpoints share a group.
pub fn intra_group_edges(graph: &NeighborGraph, assignment: &[usize]) -> Vec<(usize, usize)> {
    graph
        .edges
        .iter()
        .copied()
        .filter(|&(i, j)| assignment[i] == assignment[j])
        .collect()
}

/// Mean over Gaussians of the average distance to their neighbors along the
/// undirected `edges`; `N` is the row count of `positions`.
pub fn d_avg(g: &mut Graph, positions: Var, edges: &[(usize, usize)], eps: f64) -> Result<Var> {
    let n = g.value(positions).rows();
    if n == 0 {
        return Err(Error::invalid("d_avg: no positions"));
    }
    if edges.is_empty() {
        let z = g.constant(Tensor::scalar(0.0));
        return Ok(z);
    }
    let mut deg = vec![0usize; n];
    for &(i, j) in edges {
        if i >= n || j >= n || i == j {
            return Err(Error::invalid(format!("d_avg: bad edge ({i}, {j}) for {n} nodes")));
        }
        deg[i] += 1;
        deg[j] += 1;
    }
    let a: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let b: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let w: Vec<f64> = edges
        .iter()
        .map(|&(i, j)| (1.0 / (deg[i] as f64 + eps) + 1.0 / (deg[j] as f64 + eps)) / n as f64)
        .collect();
    let xa = g.gather_rows(positions, &a)?;
    let xb = g.gather_rows(positions, &b)?;
    let d = g.sub(xa, xb)?;
    let len = g.l2_norm(d);
    let wv = g.constant(Tensor::column(&w));
    let wl = g.mul(len, wv)?;
    Ok(g.sum(wl))
}

/// Mean squared distance of each Gaussian to its (ε-shifted) group centroid.
pub fn d_ctr(g: &mut Graph, positions: Var, assignment: &[usize], groups: usize, eps: f64) -> Result<Var> {
    let n = g.value(positions).rows();
    if n == 0 || assignment.len() != n {
        return Err(Error::invalid(format!(
            "d_ctr: {n} positions, {} labels",
            assignment.len()
        )));
    }
    let mut size = vec![0usize; groups];
    for &k in assignment {
        if k >= groups {
            return Err(Error::invalid(format!("d_ctr: label {k} out of range {groups}")));
        }
        size[k] += 1;
    }
    let sums = g.segment_sum(positions, assignment, groups)?;
    let inv = g.constant(Tensor::column(&size.iter().map(|&s| 1.0 / (s as f64 + eps)).collect::<Vec<_>>()));
    let centers = g.mul_col(sums, inv)?;
    let per = g.gather_rows(centers, assignment)?;
    let d = g.sub(positions, per)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Grouping inputs for the position regularizer.
pub struct PositionTerms<'a> {
    pub assignment: &'a [usize],
    pub groups: usize,
    pub edges: &'a [(usize, usize)],
}

pub fn position_loss(g: &mut Graph, positions: Var, terms: &PositionTerms, w: &LossWeights) -> Result<Var> {
    let a = d_avg(g, positions, terms.edges, w.eps)?;
    let c = d_ctr(g, positions, terms.assignment, terms.groups, w.eps)?;
    let a = g.scale(a, w.lambda_avg);
    let c = g.scale(c, w.lambda_ctr);
    g.add(a, c)
}

/// Handles to every term of the total loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l1: Var,
    pub ssim: Var,
    pub pos: Option<Var>,
    pub mask: Option<Var>,
    pub total: Var,
}

/// Target view for [`total_loss`].
pub struct Target<'a> {
    pub image: &'a Tensor,
    pub mask: Option<&'a [f64]>,
    pub width: usize,
    pub height: usize,
}

/// `λ L1 + (1-λ)(1-SSIM) + λ_pos L_pos + λ_mask L_mask`. `render` is the
/// packed `(H·W)×5` render (`[r, g, b, depth, alpha]`). The position term is
/// skipped when `positions` is `None`, the mask term when the target has no
/// mask or `λ_mask = 0`.
pub fn total_loss(
    g: &mut Graph,
    render: Var,
    target: &Target,
    positions: Option<(Var, &PositionTerms)>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let rgb = g.slice_cols(render, 0, 3)?;
    let l1 = l1_loss(g, rgb, target.image, target.mask)?;
    let ssim = ssim_loss(g, rgb, target.image, target.width, target.height)?;
    let a = g.scale(l1, w.lambda);
    let b = g.scale(ssim, 1.0 - w.lambda);
    let mut total = g.add(a, b)?;
    let mut pos = None;
    if let Some((x, terms)) = positions {
        if w.lambda_pos > 0.0 {
            let p = position_loss(g, x, terms, w)?;
            let s = g.scale(p, w.lambda_pos);
            total = g.add(total, s)?;
            pos = Some(p);
        }
    }
    let mut mask = None;
    if let (Some(m), true) = (target.mask, w.lambda_mask > 0.0) {
        let alpha = g.slice_cols(render, 4, 5)?;
        let l = mask_loss(g, alpha, m)?;
        let s = g.scale(l, w.lambda_mask);
        total = g.add(total, s)?;
        mask = Some(l);
    }
    Ok(LossTerms {
        l1,
        ssim,
        pos,
        mask,
        total,
    })
}

// ---- metrics ----

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "mse: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR in dB for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR over the pixels with `valid[p]`; `channels` values per pixel.
pub fn psnr_masked(a: &[f64], b: &[f64], channels: usize, valid: &[bool]) -> Result<f64> {
    if a.len() != b.len() || a.len() != valid.len() * channels {
        return Err(Error::invalid("psnr_masked: size mismatch"));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (p, _) in valid.iter().enumerate().filter(|v| *v.1) {
        for k in 0..channels {
            let d = a[p * channels + k] - b[p * channels + k];
            s += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("psnr_masked: no valid pixels"));
    }
    Ok(psnr_from_mse(s / n as f64))
}

fn blur_plane(x: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let mut s = 0.0;
            for (t, wt) in win.iter().enumerate() {
                let c = col as isize + t as isize - r;
                if c >= 0 && (c as usize) < w {
                    s += wt * x[row * w + c as usize];
                }
            }
            tmp[row * w + col] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let mut s = 0.0;
            for (t, wt) in win.iter().enumerate() {
                let rr = row as isize + t as isize - r;
                if rr >= 0 && (rr as usize) < h {
                    s += wt * tmp[rr as usize * w + col];
                }
            }
            out[row * w + col] = s;
        }
    }
    out
}

/// Mean SSIM (Gaussian window, zero padding) over pixels and channels.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    let n = width * height;
    if a.len() != n * channels || b.len() != a.len() || n == 0 || channels == 0 {
        return Err(Error::invalid(format!(
            "ssim: expected {} values, got {} and {}",
            n * channels,
            a.len(),
            b.len()
        )));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for k in 0..channels {
        let x: Vec<f64> = (0..n).map(|p| a[p * channels + k]).collect();
        let y: Vec<f64> = (0..n).map(|p| b[p * channels + k]).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = blur_plane(&x, width, height, &win);
        let my = blur_plane(&y, width, height, &win);
        let exx = blur_plane(&prod(&x, &x), width, height, &win);
        let eyy = blur_plane(&prod(&y, &y), width, height, &win);
        let exy = blur_plane(&prod(&x, &y), width, height, &win);
        let mut s = 0.0;
        for p in 0..n {
            let (ux, uy) = (mx[p], my[p]);
            let vx = exx[p] - ux * ux;
            let vy = eyy[p] - uy * uy;
            let cxy = exy[p] - ux * uy;
            s += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / n as f64;
    }
    Ok(total / channels as f64)
}

fn valid_pairs(d: &[f64], r: &[f64], valid: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if d.len() != r.len() || d.len() != valid.len() {
        return Err(Error::invalid(format!(
            "depth metric: lengths {}, {}, {}",
            d.len(),
            r.len(),
            valid.len()
        )));
    }
    let (a, b): (Vec<f64>, Vec<f64>) = d
        .iter()
        .zip(r)
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|((x, y), _)| (*x, *y))
        .unzip();
    if a.is_empty() {
        return Err(Error::invalid("depth metric: empty valid mask"));
    }
    Ok((a, b))
}

pub fn depth_mae(depth: &[f64], reference: &[f64], valid: &[bool]) -> Result<f64> {
    let (a, b) = valid_pairs(depth, reference, valid)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// 1-based ranks with ties given their average rank.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation over valid pixels. Constant inputs have no rank
/// order and give 0.
pub fn srocc(depth: &[f64], reference: &[f64], valid: &[bool]) -> Result<f64> {
    let (a, b) = valid_pairs(depth, reference, valid)?;
    Ok(pearson(&midranks(&a), &midranks(&b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = vec![0.5; 12];
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = vec![0.6; 12];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_is_one() {
        let a: Vec<f64> = (0..5 * 7 * 3).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        assert_eq!(ssim(&a, &a, 5, 7, 3).unwrap(), 1.0);
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn srocc_examples() {
        let d = [1.0, 2.0, 5.0, 3.0];
        let up: Vec<f64> = d.iter().map(|x: &f64| x.exp()).collect();
        let down: Vec<f64> = d.iter().map(|x| -x).collect();
        let v = [true; 4];
        assert!((srocc(&d, &up, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((srocc(&d, &down, &v).unwrap() + 1.0).abs() < 1e-12);
        assert!(srocc(&d, &up, &[false; 4]).is_err());
    }

    #[test]
    fn total_loss_blend() {
        let w = LossWeights::default();
        assert!((w.lambda * 0.1 + (1.0 - w.lambda) * 0.2 - 0.12).abs() < 1e-15);
        assert!(LossWeights { lambda: 1.5, ..w }.validate().is_err());
    }
}
