//! Group-aware prior network: max-pooled group tokens with global
//! self-attention, per-Gaussian sparse attention over nearest neighbors, and
//! one residual MLP head per attribute.
//!
//! Everything is recorded on an autograd [`Graph`]; parameters live in a
//! [`ParamStore`] under the `net.` prefix, base Gaussian attributes under
//! `gauss.`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{posenc_width, Graph, Init, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::raster::SplatVars;
use crate::scene::{Aabb, GaussianSet};

pub const POSITION: &str = "gauss.position";
pub const ROTATION: &str = "gauss.rotation";
pub const LOG_SCALE: &str = "gauss.log_scale";
pub const COLOR_LOGIT: &str = "gauss.color_logit";
pub const OPACITY_LOGIT: &str = "gauss.opacity_logit";
pub const LATENT: &str = "gauss.latent";

/// Base attribute blocks in store order.
pub const BASE_BLOCKS: [&str; 6] = [COLOR_LOGIT, LATENT, LOG_SCALE, OPACITY_LOGIT, POSITION, ROTATION];

/// Number of non-position entries in a grouping feature.
pub const REST_DIM: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Frequencies for group centers.
    pub group_levels: usize,
    /// Frequencies for per-Gaussian positions.
    pub point_levels: usize,
    pub latent_dim: usize,
    pub neighbors: usize,
    /// Position offsets are bounded by this fraction of the scene extent.
    pub position_bound: f64,
    /// Effective scales are clamped to `[min, max] × extent`.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Attention across groups; off feeds the projected tokens straight through.
    pub global_attention: bool,
    /// Attention across neighboring Gaussians.
    pub local_attention: bool,
    /// Zero the last layer of each head so the network starts as the identity.
    pub zero_init_heads: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            group_levels: 6,
            point_levels: 4,
            latent_dim: 16,
            neighbors: 10,
            position_bound: 0.05,
            scale_min: 1e-4,
            scale_max: 1.0,
            global_attention: true,
            local_attention: true,
            zero_init_heads: true,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("net.{field}"),
                message,
            })
        };
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(
                "d_model",
                format!("{} is not divisible by {} heads", self.d_model, self.heads),
            );
        }
        if self.group_levels == 0 || self.point_levels == 0 {
            return bad("group_levels", "frequency counts must be >= 1".into());
        }
        if self.neighbors == 0 {
            return bad("neighbors", "must be >= 1".into());
        }
        if !(self.position_bound >= 0.0) {
            return bad("position_bound", format!("must be >= 0, got {}", self.position_bound));
        }
        if !(self.scale_min > 0.0 && self.scale_min < self.scale_max) {
            return bad(
                "scale_min",
                format!("need 0 < scale_min < scale_max, got {} / {}", self.scale_min, self.scale_max),
            );
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn group_in(&self) -> usize {
        posenc_width(self.group_levels, true) + REST_DIM
    }

    fn local_in(&self) -> usize {
        posenc_width(self.point_levels, true) + REST_DIM + self.latent_dim
    }

    fn head_in(&self) -> usize {
        posenc_width(self.point_levels, true) + 2 * self.d_model
    }
}

/// The five attribute heads and their output widths.
pub const HEADS: [(&str, usize); 5] = [
    ("position", 3),
    ("rotation", 4),
    ("log_scale", 3),
    ("color", 3),
    ("opacity", 1),
];

/// Writes the base attributes of `set` into `store` (replacing existing blocks).
pub fn store_base(set: &GaussianSet, latent_dim: usize, store: &mut ParamStore) -> Result<()> {
    let g = &set.gaussians;
    let n = g.len();
    if let Some(bad) = g.iter().position(|x| x.latent.len() != latent_dim) {
        return Err(Error::invalid(format!(
            "gaussian {bad} has a latent of length {}, expected {latent_dim}",
            g[bad].latent.len()
        )));
    }
    store.insert(POSITION, Tensor::from_fn(n, 3, |i, j| g[i].position[j]));
    store.insert(ROTATION, Tensor::from_fn(n, 4, |i, j| g[i].rotation[j]));
    store.insert(LOG_SCALE, Tensor::from_fn(n, 3, |i, j| g[i].log_scale[j]));
    store.insert(COLOR_LOGIT, Tensor::from_fn(n, 3, |i, j| g[i].color_logit[j]));
    store.insert(OPACITY_LOGIT, Tensor::from_fn(n, 1, |i, _| g[i].opacity_logit));
    store.insert(LATENT, Tensor::from_fn(n, latent_dim, |i, j| g[i].latent[j]));
    Ok(())
}

/// Copies the base blocks of `store` back into `set`.
pub fn load_base(store: &ParamStore, set: &mut GaussianSet) -> Result<()> {
    let get = |name: &str| {
        store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("parameter store has no block {name}")))
    };
    let (p, q, s, c, o, z) = (
        get(POSITION)?,
        get(ROTATION)?,
        get(LOG_SCALE)?,
        get(COLOR_LOGIT)?,
        get(OPACITY_LOGIT)?,
        get(LATENT)?,
    );
    let n = set.len();
    for t in [p, q, s, c, o, z] {
        if t.rows() != n {
            return Err(Error::invalid(format!(
                "parameter block has {} rows for {n} Gaussians",
                t.rows()
            )));
        }
    }
    for (i, g) in set.gaussians.iter_mut().enumerate() {
        g.position = nalgebra::Vector3::from_row_slice(p.row(i));
        g.rotation = [q.get(i, 0), q.get(i, 1), q.get(i, 2), q.get(i, 3)];
        g.log_scale = nalgebra::Vector3::from_row_slice(s.row(i));
        g.color_logit = nalgebra::Vector3::from_row_slice(c.row(i));
        g.opacity_logit = o.get(i, 0);
        g.latent = z.row(i).to_vec();
    }
    Ok(())
}

/// Base attribute variables for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BaseVars {
    pub position: Var,
    pub rotation: Var,
    pub log_scale: Var,
    pub color_logit: Var,
    pub opacity_logit: Var,
    pub latent: Var,
}

impl BaseVars {
    /// Pulls the base blocks from `store`, as trainable parameters when
    /// `trainable`, as constants otherwise.
    pub fn from_store(g: &mut Graph, store: &ParamStore, trainable: bool) -> Result<Self> {
        let mut get = |name: &str| -> Result<Var> {
            if trainable {
                g.param(store, name)
            } else {
                let t = store
                    .get(name)
                    .ok_or_else(|| Error::invalid(format!("parameter store has no block {name}")))?;
                Ok(g.constant(t.clone()))
            }
        };
        Ok(Self {
            position: get(POSITION)?,
            rotation: get(ROTATION)?,
            log_scale: get(LOG_SCALE)?,
            color_logit: get(COLOR_LOGIT)?,
            opacity_logit: get(OPACITY_LOGIT)?,
            latent: get(LATENT)?,
        })
    }
}

/// Raw head outputs.
#[derive(Clone, Copy, Debug)]
pub struct Deltas {
    pub position: Var,
    pub rotation: Var,
    pub log_scale: Var,
    pub color: Var,
    pub opacity: Var,
}

/// Scene-dependent bounds for the attribute activations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationBounds {
    pub position_scale: f64,
    pub log_scale_min: f64,
    pub log_scale_max: f64,
}

impl ActivationBounds {
    pub fn new(cfg: &PriorConfig, bounds: &Aabb) -> Self {
        let extent = bounds.extent().max(1e-9);
        Self {
            position_scale: cfg.position_bound * extent,
            log_scale_min: (cfg.scale_min * extent).ln(),
            log_scale_max: (cfg.scale_max * extent).ln(),
        }
    }
}

/// Effective rasterizer inputs from base attributes and optional head
/// outputs. With all deltas zero the result equals the `None` case bitwise.
pub fn effective_attributes(
    g: &mut Graph,
    base: &BaseVars,
    deltas: Option<&Deltas>,
    b: &ActivationBounds,
) -> Result<SplatVars> {
    let (position, rotation, log_scale, color, opacity) = match deltas {
        None => (
            base.position,
            base.rotation,
            base.log_scale,
            base.color_logit,
            base.opacity_logit,
        ),
        Some(d) => {
            let t = g.tanh(d.position);
            let t = g.scale(t, b.position_scale);
            (
                g.add(base.position, t)?,
                g.add(base.rotation, d.rotation)?,
                g.add(base.log_scale, d.log_scale)?,
                g.add(base.color_logit, d.color)?,
                g.add(base.opacity_logit, d.opacity)?,
            )
        }
    };
    Ok(SplatVars {
        position,
        rotation: g.normalize_rows(rotation),
        log_scale: g.clamp(log_scale, b.log_scale_min, b.log_scale_max),
        color: g.sigmoid(color),
        opacity: g.sigmoid(opacity),
    })
}

/// Fixed (non-parameter) inputs of the network for one grouping.
#[derive(Clone, Debug)]
pub struct NetInputs {
    pub assignment: Vec<usize>,
    pub groups: usize,
    /// Nearest-neighbor lists (self excluded).
    pub neighbors: Rc<Vec<Vec<usize>>>,
    /// `N×4` shape descriptors `[ℓ, s, v, p]`.
    pub descriptors: Tensor,
    pub bounds: Aabb,
}

impl NetInputs {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.assignment.len() != n || self.neighbors.len() != n || self.descriptors.shape() != (n, 4) {
            return Err(Error::invalid(format!(
                "network inputs cover {} / {} / {} Gaussians, scene has {n}",
                self.assignment.len(),
                self.neighbors.len(),
                self.descriptors.rows()
            )));
        }
        if let Some(&k) = self.assignment.iter().find(|&&k| k >= self.groups) {
            return Err(Error::invalid(format!("group label {k} out of range {}", self.groups)));
        }
        Ok(())
    }
}

/// Intermediate values exposed for inspection and tests.
#[derive(Clone, Debug)]
pub struct NetOutputs {
    pub deltas: Deltas,
    /// `G×d_model` projected group tokens.
    pub group_tokens: Var,
    /// `N×d_model` projected per-Gaussian tokens.
    pub local_tokens: Var,
    /// `G×d_model` group embeddings after global attention.
    pub group_embedding: Var,
    /// `N×d_model` per-Gaussian embeddings after local attention.
    pub local_embedding: Var,
    /// `N×2·d_model` unified features.
    pub unified: Var,
    /// One attention node per head (global, local); empty when disabled.
    pub global_attention: Vec<Var>,
    pub local_attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorNet {
    pub cfg: PriorConfig,
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, name: &str, bias: bool) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let y = g.matmul(x, w)?;
    if bias {
        let b = g.param(store, &format!("{name}.b"))?;
        g.add_row(y, b)
    } else {
        Ok(y)
    }
}

impl PriorNet {
    pub fn new(cfg: PriorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Adds every `net.` block to `store`.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = &self.cfg;
        let d = c.d_model;
        fn lin<R: Rng>(store: &mut ParamStore, name: &str, i: usize, o: usize, bias: bool, zero: bool, rng: &mut R) {
            let init = if zero { Init::Zeros } else { Init::XavierUniform };
            store.init_block(format!("{name}.w"), i, o, init, rng);
            if bias {
                store.init_block(format!("{name}.b"), 1, o, Init::Zeros, rng);
            }
        }
        for (path, input) in [("net.global", c.group_in()), ("net.local", c.local_in())] {
            lin(store, &format!("{path}.in"), input, d, true, false, rng);
            for p in ["q", "k", "v", "out"] {
                lin(store, &format!("{path}.{p}"), d, d, false, false, rng);
            }
        }
        for (head, out) in HEADS {
            let p = format!("net.head.{head}");
            lin(store, &format!("{p}.in"), c.head_in(), d, true, false, rng);
            lin(store, &format!("{p}.h1"), d, d, true, false, rng);
            lin(store, &format!("{p}.h2"), d, d, true, false, rng);
            lin(store, &format!("{p}.out"), d, out, true, c.zero_init_heads, rng);
        }
    }

    /// Multi-head attention with residual: `x + W_O·GELU(concat_h A_h V_h)`.
    fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        path: &str,
        keys: Rc<Vec<Vec<usize>>>,
        nodes: &mut Vec<Var>,
    ) -> Result<Var> {
        let q = linear(g, store, x, &format!("{path}.q"), false)?;
        let k = linear(g, store, x, &format!("{path}.k"), false)?;
        let v = linear(g, store, x, &format!("{path}.v"), false)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let a = g.neighbor_attention(qh, kh, vh, keys.clone(), scale)?;
            nodes.push(a);
            outs.push(a);
        }
        let cat = g.concat(&outs)?;
        let act = g.gelu(cat);
        let o = linear(g, store, act, &format!("{path}.out"), false)?;
        g.add(x, o)
    }

    fn residual_mlp(&self, g: &mut Graph, store: &ParamStore, x: Var, head: &str) -> Result<Var> {
        let p = format!("net.head.{head}");
        let mut h = linear(g, store, x, &format!("{p}.in"), true)?;
        for l in ["h1", "h2"] {
            let y = linear(g, store, h, &format!("{p}.{l}"), true)?;
            let y = g.gelu(y);
            h = g.add(h, y)?;
        }
        linear(g, store, h, &format!("{p}.out"), true)
    }

    /// `[c; log σ; ℓ, s, v, p]` per Gaussian.
    fn rest_features(&self, g: &mut Graph, base: &BaseVars, inp: &NetInputs) -> Result<Var> {
        let c = g.sigmoid(base.color_logit);
        let d = g.constant(inp.descriptors.clone());
        g.concat(&[c, base.log_scale, d])
    }

    fn normalized(&self, g: &mut Graph, x: Var, bounds: &Aabb) -> Result<Var> {
        let c = bounds.center();
        let h = bounds.half_sizes();
        let shift = g.constant(Tensor::from_vec(1, 3, vec![-c.x, -c.y, -c.z])?);
        let inv = g.constant(Tensor::from_vec(1, 3, vec![1.0 / h.x, 1.0 / h.y, 1.0 / h.z])?);
        let y = g.add_row(x, shift)?;
        g.mul_row(y, inv)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        base: &BaseVars,
        inp: &NetInputs,
    ) -> Result<NetOutputs> {
        let n = g.value(base.position).rows();
        inp.validate(n)?;
        let c = &self.cfg;
        let xn = self.normalized(g, base.position, &inp.bounds)?;
        let rest = self.rest_features(g, base, inp)?;

        // group tokens
        let xg = g.segment_mean(xn, &inp.assignment, inp.groups)?;
        let rg = g.segment_max(rest, &inp.assignment, inp.groups)?;
        let pg = g.positional_encoding(xg, c.group_levels, true)?;
        let tok = g.concat(&[pg, rg])?;
        let tok = g.layer_norm(tok);
        let u = linear(g, store, tok, "net.global.in", true)?;
        let mut global_nodes = Vec::new();
        let e = if c.global_attention {
            let all: Vec<Vec<usize>> = (0..inp.groups).map(|_| (0..inp.groups).collect()).collect();
            self.attention(g, store, u, "net.global", Rc::new(all), &mut global_nodes)?
        } else {
            u
        };

        // per-Gaussian tokens
        let px = g.positional_encoding(xn, c.point_levels, true)?;
        let lt = g.concat(&[px, rest, base.latent])?;
        let lt = g.layer_norm(lt);
        let t = linear(g, store, lt, "net.local.in", true)?;
        let mut local_nodes = Vec::new();
        let h = if c.local_attention {
            self.attention(g, store, t, "net.local", inp.neighbors.clone(), &mut local_nodes)?
        } else {
            t
        };

        let eg = g.gather_rows(e, &inp.assignment)?;
        let unified = g.concat(&[eg, h])?;
        let head_in = g.concat(&[px, unified])?;
        let mut outs = Vec::with_capacity(HEADS.len());
        for (name, _) in HEADS {
            outs.push(self.residual_mlp(g, store, head_in, name)?);
        }
        Ok(NetOutputs {
            deltas: Deltas {
                position: outs[0],
                rotation: outs[1],
                log_scale: outs[2],
                color: outs[3],
                opacity: outs[4],
            },
            group_tokens: u,
            local_tokens: t,
            group_embedding: e,
            local_embedding: h,
            unified,
            global_attention: global_nodes,
            local_attention: local_nodes,
        })
    }
}
