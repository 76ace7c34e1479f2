//! The optimization loop.
//!
//! Before the grouping iteration the base attributes are fitted directly.
//! At the grouping iteration the scene is partitioned, the prior network is
//! initialized (zero final layers, so the render does not change), and from
//! then on the effective attributes come out of the network and the
//! intra-group position term joins the loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::ply::write_ply;
use crate::io::{Dataset, View};
use crate::neighborhood::{build_knn, descriptors};
use crate::objective::{self, position_edges, total_loss, EdgeScope, PositionTerms, Target};
use crate::partition::{group_scene, group_stats, SupergaussianPartition};
use crate::priornet::{
    effective_attributes, load_base, store_base, ActivationBounds, BaseVars, NetInputs, PriorNet, BASE_BLOCKS,
    POSITION, ROTATION,
};
use crate::raster::{render, render_op, RenderOutput, RenderSettings, SplatVars, Splats};
use crate::scene::{quaternion_to_rotation, Aabb, Camera, Gaussian, GaussianSet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-block step-size multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrScale {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub color: f64,
    pub opacity: f64,
    pub latent: f64,
    pub net: f64,
}

impl Default for LrScale {
    fn default() -> Self {
        Self {
            position: 0.1,
            rotation: 1.0,
            log_scale: 5.0,
            color: 5.0,
            opacity: 20.0,
            latent: 1.0,
            net: 1.0,
        }
    }
}

impl LrScale {
    pub fn for_block(&self, name: &str) -> f64 {
        match name {
            "gauss.position" => self.position,
            "gauss.rotation" => self.rotation,
            "gauss.log_scale" => self.log_scale,
            "gauss.color_logit" => self.color,
            "gauss.opacity_logit" => self.opacity,
            "gauss.latent" => self.latent,
            _ => self.net,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// Threshold on the mean positional-gradient norm since the last pass.
    pub grad_threshold: f64,
    /// Gaussians whose largest σ exceeds this fraction of the scene extent
    /// are split, smaller ones cloned.
    pub split_scale: f64,
    pub max_gaussians: usize,
    pub prune_opacity: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            interval: 100,
            start: 200,
            stop: 1200,
            grad_threshold: 2e-4,
            split_scale: 0.02,
            max_gaussians: 5000,
            prune_opacity: 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub grouping_iteration: usize,
    /// Re-partition every this many iterations after the first grouping.
    pub regroup_interval: Option<usize>,
    /// Use the prior network after grouping.
    pub use_prior: bool,
    /// Keep updating the base attributes after grouping.
    pub train_base: bool,
    pub optimizer: AdamConfig,
    pub lr_scale: LrScale,
    /// Position step at the last iteration relative to the first; the step
    /// decays log-linearly in between. 1 keeps it constant.
    pub position_decay: f64,
    pub densify: DensifyConfig,
    /// 0 evaluates only at the start and the end.
    pub eval_interval: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    /// Leaves wall-clock timing out of reports so identical runs give
    /// identical files.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            grouping_iteration: 100,
            regroup_interval: None,
            use_prior: true,
            train_base: true,
            optimizer: AdamConfig::default(),
            lr_scale: LrScale::default(),
            position_decay: 0.01,
            densify: DensifyConfig::default(),
            eval_interval: 0,
            checkpoint_interval: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| {
            Err(Error::Config {
                field: format!("train.{f}"),
                message: m,
            })
        };
        if self.grouping_iteration >= self.iterations {
            return bad(
                "grouping_iteration",
                format!("must be < iterations ({} >= {})", self.grouping_iteration, self.iterations),
            );
        }
        if self.regroup_interval == Some(0) {
            return bad("regroup_interval", "must be >= 1 when set".into());
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer", "need lr >= 0, betas in [0, 1), eps > 0".into());
        }
        let s = &self.lr_scale;
        if [s.position, s.rotation, s.log_scale, s.color, s.opacity, s.latent, s.net]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("lr_scale", "multipliers must be >= 0".into());
        }
        if !(self.position_decay > 0.0 && self.position_decay <= 1.0) {
            return bad("position_decay", format!("must be in (0, 1], got {}", self.position_decay));
        }
        let d = &self.densify;
        if d.enabled && (d.interval == 0 || !(d.grad_threshold > 0.0) || d.max_gaussians == 0) {
            return bad("densify", "need interval >= 1, grad_threshold > 0, max_gaussians >= 1".into());
        }
        Ok(())
    }
}

/// Adam with per-block step counters, so blocks created mid-run (the
/// network, densified rows) start their bias correction from scratch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    pub steps: BTreeMap<String, u64>,
}

impl Adam {
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
        scale: &LrScale,
    ) -> Result<()> {
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown block {name}")))?;
            if p.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape(),
                    rhs: grad.shape(),
                });
            }
            if self.m.get(name).map(Tensor::shape) != Some(p.shape()) {
                self.m.insert(name.clone(), Tensor::zeros(p.rows(), p.cols()));
                self.v.insert(name.clone(), Tensor::zeros(p.rows(), p.cols()));
                self.steps.insert(name.clone(), 0);
            }
            let t = self.steps.get_mut(name).unwrap();
            *t += 1;
            let lr = cfg.lr * scale.for_block(name);
            let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                if lr > 0.0 {
                    *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
                }
            }
        }
        Ok(())
    }
}

/// State fixed at grouping time.
#[derive(Clone, Debug)]
pub struct GroupState {
    pub partition: SupergaussianPartition,
    pub inputs: NetInputs,
    /// Intra-group neighbor edges of the position term.
    pub edges: Vec<(usize, usize)>,
    /// Whether the tuned group count landed in the target range.
    pub in_range: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub view: usize,
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub pos: Option<f64>,
    pub mask: Option<f64>,
    pub gaussians: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: Option<f64>,
    pub srocc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iteration: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean over the views that have reference depth and valid pixels.
    pub depth_mae: Option<f64>,
    pub srocc: Option<f64>,
    pub views: Vec<ViewMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyStats {
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
    /// Growth was skipped because it would exceed the budget.
    pub skipped: bool,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: usize,
    /// Structure of the scene (count, group ids, background). Attribute
    /// values live in `params` and are copied back by [`Trainer::sync_scene`].
    pub scene: GaussianSet,
    pub params: ParamStore,
    pub adam: Adam,
    pub grouping: Option<GroupState>,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
    /// Bounds of the initial scene; fixes the activation clamps for the run.
    pub init_bounds: Aabb,
    order: Vec<usize>,
    cursor: usize,
    /// Densification statistics since the last pass: summed positional
    /// gradient, summed gradient norm and step count per Gaussian.
    pub grad_sum: Vec<Vector3<f64>>,
    pub grad_norm: Vec<f64>,
    pub grad_count: Vec<u32>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub state: TrainState,
    pub net: PriorNet,
    pub settings: RenderSettings,
    /// Where the non-finite diagnostic dump goes.
    pub dump_dir: Option<PathBuf>,
}

fn net_inputs(
    scene: &GaussianSet,
    partition: &SupergaussianPartition,
    k: usize,
    bounds: Aabb,
    scope: EdgeScope,
) -> Result<(NetInputs, Vec<(usize, usize)>)> {
    let pos = scene.positions();
    let k = k.min(pos.len().saturating_sub(1)).max(1);
    let graph = build_knn(&pos, k)?;
    let desc = descriptors(&pos, &graph)?;
    let d = Tensor::from_fn(pos.len(), 4, |i, j| {
        let x = &desc[i];
        [x.linearity, x.scattering, x.verticality, x.planarity][j]
    });
    let edges = position_edges(&graph, &partition.assignment, scope);
    Ok((
        NetInputs {
            assignment: partition.assignment.clone(),
            groups: partition.len(),
            neighbors: Rc::new(graph.neighbors),
            descriptors: d,
            bounds,
        },
        edges,
    ))
}

fn unit_or_zero(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: Dataset, init: GaussianSet) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        init.validate()?;
        if init.is_empty() {
            return Err(Error::invalid("initial scene has no Gaussians"));
        }
        let net = PriorNet::new(cfg.net.clone())?;
        let mut scene = init;
        for g in &mut scene.gaussians {
            if g.latent.len() != cfg.net.latent_dim {
                g.latent = vec![0.0; cfg.net.latent_dim];
            }
            g.group_id = None;
        }
        scene.background = data.background;
        let mut params = ParamStore::new();
        store_base(&scene, cfg.net.latent_dim, &mut params)?;
        let n = scene.len();
        let state = TrainState {
            iteration: 0,
            init_bounds: scene.bounds,
            scene,
            params,
            adam: Adam::default(),
            grouping: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            history: Vec::new(),
            order: Vec::new(),
            cursor: 0,
            grad_sum: vec![Vector3::zeros(); n],
            grad_norm: vec![0.0; n],
            grad_count: vec![0; n],
        };
        let settings = RenderSettings::default().with_background(data.background);
        Ok(Self {
            cfg,
            data,
            state,
            net,
            settings,
            dump_dir: None,
        })
    }

    /// Trainer on the dataset's own initial points.
    pub fn from_dataset(cfg: RunConfig, data: Dataset) -> Result<Self> {
        let init = data
            .points
            .clone()
            .ok_or_else(|| Error::invalid("dataset has no initial point set"))?;
        Self::new(cfg, data, init)
    }

    pub fn activation_bounds(&self) -> ActivationBounds {
        ActivationBounds::new(&self.cfg.net, &self.state.init_bounds)
    }

    pub fn is_grouped(&self) -> bool {
        self.state.grouping.is_some()
    }

    /// Effective attributes as graph variables. `trainable` registers the
    /// base blocks and network weights as parameters.
    pub fn effective_vars(&self, g: &mut Graph, trainable: bool) -> Result<SplatVars> {
        let st = &self.state;
        let base_trainable = trainable && (st.grouping.is_none() || self.cfg.train.train_base);
        let base = BaseVars::from_store(g, &st.params, base_trainable)?;
        let bounds = self.activation_bounds();
        match (&st.grouping, self.cfg.train.use_prior) {
            (Some(gs), true) => {
                let out = self.net.forward(g, &st.params, &base, &gs.inputs)?;
                effective_attributes(g, &base, Some(&out.deltas), &bounds)
            }
            _ => effective_attributes(g, &base, None, &bounds),
        }
    }

    pub fn effective_splats(&self) -> Result<Splats> {
        let mut g = Graph::new();
        let vars = self.effective_vars(&mut g, false)?;
        vars.splats(&g)
    }

    pub fn render_camera(&self, cam: &Camera) -> Result<RenderOutput> {
        render(&self.effective_splats()?, cam, &self.settings)
    }

    /// Copies the base attributes back into `state.scene`.
    pub fn sync_scene(&mut self) -> Result<()> {
        load_base(&self.state.params, &mut self.state.scene)?;
        self.state.scene.recompute_bounds();
        Ok(())
    }

    fn next_view(&mut self) -> usize {
        let st = &mut self.state;
        if st.cursor >= st.order.len() {
            st.order = (0..self.data.train.len()).collect();
            st.order.shuffle(&mut st.rng);
            st.cursor = 0;
        }
        st.cursor += 1;
        st.order[st.cursor - 1]
    }

    fn schedule(&mut self) -> Result<()> {
        let it = self.state.iteration;
        let t = &self.cfg.train;
        if it == t.grouping_iteration && !self.is_grouped() {
            self.run_grouping()?;
        } else if let Some(r) = t.regroup_interval {
            if it > t.grouping_iteration && (it - t.grouping_iteration) % r == 0 {
                self.run_grouping()?;
            }
        }
        let d = &self.cfg.train.densify;
        if d.enabled && it > 0 && it >= d.start && it <= d.stop && it % d.interval == 0 {
            self.densify()?;
        }
        Ok(())
    }

    /// One optimization step on the next training view.
    pub fn step(&mut self) -> Result<StepRecord> {
        self.schedule()?;
        let vi = self.next_view();
        if let Some((bad, _)) = self.state.params.iter().find(|(_, t)| !t.all_finite()) {
            log::error!("non-finite values in parameter block {bad}");
            return Err(self.non_finite(vi));
        }
        let view = &self.data.train[vi];
        let mut g = Graph::new();
        let vars = self.effective_vars(&mut g, true)?;
        let (r, _) = render_op(&mut g, vars, &view.camera, &self.settings)?;
        let target = Target {
            image: &view.image,
            mask: view.mask.as_deref(),
            width: self.data.width,
            height: self.data.height,
        };
        let terms;
        let pos = match &self.state.grouping {
            Some(gs) => {
                terms = PositionTerms {
                    assignment: &gs.inputs.assignment,
                    groups: gs.inputs.groups,
                    edges: &gs.edges,
                };
                Some((vars.position, &terms))
            }
            None => None,
        };
        let loss = total_loss(&mut g, r, &target, pos, &self.cfg.loss)?;
        let total = g.value(loss.total).item();
        if !total.is_finite() {
            return Err(self.non_finite(vi));
        }
        let grads = g.backward(loss.total)?.param_grads();
        if let Some(bad) = grads.iter().find(|(_, t)| !t.all_finite()).map(|(k, _)| k.clone()) {
            log::error!("non-finite gradient in block {bad}");
            return Err(self.non_finite(vi));
        }
        if let Some(gp) = grads.get(POSITION) {
            let st = &mut self.state;
            for i in 0..gp.rows() {
                let v = Vector3::from_row_slice(gp.row(i));
                st.grad_sum[i] += v;
                st.grad_norm[i] += v.norm();
                st.grad_count[i] += 1;
            }
        }
        let tc = &self.cfg.train;
        let mut scale = tc.lr_scale.clone();
        scale.position *= tc.position_decay.powf(self.state.iteration as f64 / tc.iterations as f64);
        self.state.adam.step(&mut self.state.params, &grads, &tc.optimizer, &scale)?;
        if grads.contains_key(ROTATION) && tc.optimizer.lr * tc.lr_scale.rotation > 0.0 {
            let q = self.state.params.get_mut(ROTATION).unwrap();
            for i in 0..q.rows() {
                let row = q.row_mut(i);
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            }
        }
        let rec = StepRecord {
            iteration: self.state.iteration,
            view: vi,
            total,
            l1: g.value(loss.l1).item(),
            ssim: g.value(loss.ssim).item(),
            pos: loss.pos.map(|v| g.value(v).item()),
            mask: loss.mask.map(|v| g.value(v).item()),
            gaussians: self.state.scene.len(),
        };
        self.state.history.push(rec.clone());
        self.state.iteration += 1;
        Ok(rec)
    }

    fn non_finite(&self, view: usize) -> Error {
        let mut table = String::from("block                          norm\n");
        for (k, v) in self.state.params.norm_table() {
            table.push_str(&format!("{k:<30} {v:.6e}\n"));
        }
        if let Some(dir) = &self.dump_dir {
            let path = dir.join("nonfinite_dump.txt");
            let body = format!("iteration {}\nview {view}\n{table}", self.state.iteration);
            if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, body)) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        Error::NonFinite {
            iteration: self.state.iteration,
            view,
            table,
        }
    }

    /// Partitions the current scene and switches the prior network on.
    pub fn run_grouping(&mut self) -> Result<()> {
        self.sync_scene()?;
        let grouping = group_scene(&self.state.scene, &self.cfg.grouping)?;
        let (lo, hi) = self.cfg.grouping.target;
        if !grouping.in_range {
            log::warn!(
                "grouping: {} groups, outside the target [{lo}, {hi}]",
                grouping.partition.len()
            );
        }
        let partition = grouping.partition;
        for (g, &k) in self.state.scene.gaussians.iter_mut().zip(&partition.assignment) {
            g.group_id = Some(k);
        }
        let (inputs, edges) = net_inputs(
            &self.state.scene,
            &partition,
            self.cfg.net.neighbors,
            self.state.scene.bounds,
            self.cfg.loss.position_edges,
        )?;
        if self.cfg.train.use_prior && !self.state.params.contains("net.global.in.w") {
            self.net.init_params(&mut self.state.params, &mut self.state.rng);
        }
        log::info!(
            "grouping at iteration {}: {} groups, mu {:.3e}",
            self.state.iteration,
            partition.len(),
            partition.mu
        );
        self.state.grouping = Some(GroupState {
            partition,
            inputs,
            edges,
            in_range: grouping.in_range,
        });
        Ok(())
    }

    /// Split, clone and prune by accumulated positional gradient and
    /// effective opacity. Children inherit the parent's group.
    pub fn densify(&mut self) -> Result<DensifyStats> {
        let d = self.cfg.train.densify.clone();
        let eff = self.effective_splats()?;
        self.sync_scene()?;
        let st = &self.state;
        let n = st.scene.len();
        let extent = st.scene.bounds.extent();
        #[derive(Clone, Copy, PartialEq)]
        enum Act {
            Keep,
            Split,
            Clone,
            Prune,
        }
        let mut acts = vec![Act::Keep; n];
        let mut stats = DensifyStats::default();
        for i in 0..n {
            if eff.opacity[i] < d.prune_opacity {
                acts[i] = Act::Prune;
                stats.pruned += 1;
            } else if st.grad_count[i] > 0 && st.grad_norm[i] / st.grad_count[i] as f64 > d.grad_threshold {
                if eff.log_scale[i].max().exp() > d.split_scale * extent {
                    acts[i] = Act::Split;
                    stats.split += 1;
                } else {
                    acts[i] = Act::Clone;
                    stats.cloned += 1;
                }
            }
        }
        if n - stats.pruned + stats.split + stats.cloned > d.max_gaussians {
            log::warn!(
                "densify: growing to {} would exceed max_gaussians {}; skipping growth",
                n - stats.pruned + stats.split + stats.cloned,
                d.max_gaussians
            );
            for a in acts.iter_mut() {
                if matches!(a, Act::Split | Act::Clone) {
                    *a = Act::Keep;
                }
            }
            stats.split = 0;
            stats.cloned = 0;
            stats.skipped = true;
        }
        if n == stats.pruned {
            log::warn!("densify: every Gaussian is below the prune threshold; pruning skipped");
            for a in acts.iter_mut() {
                if *a == Act::Prune {
                    *a = Act::Keep;
                }
            }
            stats.pruned = 0;
        }
        if acts.iter().all(|a| *a == Act::Keep) {
            self.reset_accumulators();
            return Ok(stats);
        }

        let mut out: Vec<Gaussian> = Vec::with_capacity(n + stats.split + stats.cloned);
        // row of the old moments each new row keeps, if any
        let mut origin: Vec<Option<usize>> = Vec::with_capacity(out.capacity());
        for (i, g) in st.scene.gaussians.iter().enumerate() {
            match acts[i] {
                Act::Prune => {}
                Act::Keep => {
                    out.push(g.clone());
                    origin.push(Some(i));
                }
                Act::Split => {
                    let k = g.log_scale.imax();
                    let sigma = g.log_scale[k].exp();
                    let axis = quaternion_to_rotation(g.rotation)?.column(k).into_owned();
                    for s in [-0.5, 0.5] {
                        let mut c = g.clone();
                        c.position = g.position + axis * (s * sigma);
                        c.log_scale = g.log_scale.add_scalar(-(1.6f64).ln());
                        out.push(c);
                        origin.push(None);
                    }
                }
                Act::Clone => {
                    out.push(g.clone());
                    origin.push(Some(i));
                    let dir = unit_or_zero(st.grad_sum[i]);
                    let mut c = g.clone();
                    c.position = g.position - dir * (0.5 * g.log_scale.max().exp());
                    out.push(c);
                    origin.push(None);
                }
            }
        }
        log::info!(
            "densify at iteration {}: split {}, cloned {}, pruned {} -> {} Gaussians",
            st.iteration,
            stats.split,
            stats.cloned,
            stats.pruned,
            out.len()
        );
        self.apply_structure(out, &origin)?;
        Ok(stats)
    }

    /// Replaces the Gaussian list, remapping per-Gaussian optimizer state by
    /// `origin` and rebuilding the partition from the inherited group ids.
    fn apply_structure(&mut self, gaussians: Vec<Gaussian>, origin: &[Option<usize>]) -> Result<()> {
        let background = self.state.scene.background;
        let scene = GaussianSet::new(gaussians, background);
        store_base(&scene, self.cfg.net.latent_dim, &mut self.state.params)?;
        for block in BASE_BLOCKS {
            for store in [&mut self.state.adam.m, &mut self.state.adam.v] {
                if let Some(old) = store.get(block) {
                    let t = Tensor::from_fn(origin.len(), old.cols(), |r, c| origin[r].map_or(0.0, |o| old.get(o, c)));
                    store.insert(block, t);
                }
            }
        }
        self.state.scene = scene;
        if let Some(gs) = self.state.grouping.take() {
            let ids: Vec<usize> = self
                .state
                .scene
                .gaussians
                .iter()
                .map(|g| g.group_id.ok_or_else(|| Error::invalid("grouped scene has a Gaussian without group")))
                .collect::<Result<_>>()?;
            let mut partition = SupergaussianPartition::from_assignment(&ids, gs.partition.mu);
            partition.energy = gs.partition.energy;
            let partition = group_stats(partition, &self.state.scene.positions());
            partition.validate(self.state.scene.len())?;
            for (g, &k) in self.state.scene.gaussians.iter_mut().zip(&partition.assignment) {
                g.group_id = Some(k);
            }
            let (inputs, edges) = net_inputs(
                &self.state.scene,
                &partition,
                self.cfg.net.neighbors,
                gs.inputs.bounds,
                self.cfg.loss.position_edges,
            )?;
            self.state.grouping = Some(GroupState {
                partition,
                inputs,
                edges,
                in_range: gs.in_range,
            });
        }
        self.reset_accumulators();
        Ok(())
    }

    fn reset_accumulators(&mut self) {
        let n = self.state.scene.len();
        self.state.grad_sum = vec![Vector3::zeros(); n];
        self.state.grad_norm = vec![0.0; n];
        self.state.grad_count = vec![0; n];
    }

    /// Renders every view and scores it against its image and, when
    /// present, its reference depth over pixels with A > 0.5 (and inside the
    /// mask, if any).
    pub fn evaluate(&self, views: &[View]) -> Result<EvalReport> {
        if views.is_empty() {
            return Err(Error::invalid("evaluate: no views"));
        }
        let splats = self.effective_splats()?;
        let (w, h) = (self.data.width, self.data.height);
        let mut out = Vec::with_capacity(views.len());
        for v in views {
            let r = render(&splats, &v.camera, &self.settings)?;
            let pred: Vec<f64> = r.color.iter().flat_map(|c| *c).collect();
            let psnr = objective::psnr(&pred, v.image.data())?;
            let ssim = objective::ssim(&pred, v.image.data(), w, h, 3)?;
            let (mut depth_mae, mut srocc) = (None, None);
            if let Some(d) = &v.depth {
                let valid: Vec<bool> = (0..w * h)
                    .map(|p| r.alpha[p] > 0.5 && v.mask.as_ref().map_or(true, |m| m[p] > 0.5))
                    .collect();
                if valid.iter().any(|&b| b) {
                    depth_mae = Some(objective::depth_mae(&r.depth, d, &valid)?);
                    srocc = Some(objective::srocc(&r.depth, d, &valid)?);
                }
            }
            out.push(ViewMetrics {
                name: v.name.clone(),
                psnr,
                ssim,
                depth_mae,
                srocc,
            });
        }
        let mean = |f: &dyn Fn(&ViewMetrics) -> Option<f64>| {
            let xs: Vec<f64> = out.iter().filter_map(f).collect();
            (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        };
        Ok(EvalReport {
            iteration: self.state.iteration,
            psnr: mean(&|m| Some(m.psnr)).unwrap(),
            ssim: mean(&|m| Some(m.ssim)).unwrap(),
            depth_mae: mean(&|m| m.depth_mae),
            srocc: mean(&|m| m.srocc),
            views: out,
        })
    }

    /// Trains to the configured iteration count. Evaluates train and eval
    /// views at the start, every `eval_interval` and at the end. With `out`
    /// set, periodic checkpoints go to `out/checkpoints/`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<RunOutcome> {
        let t0 = Instant::now();
        let mut evals = Vec::new();
        let initial = (self.evaluate(&self.data.train)?, self.evaluate(&self.data.eval)?);
        if self.state.iteration == 0 {
            evals.push(initial.1.clone());
        }
        let mut grouping_secs = 0.0;
        let tc = self.cfg.train.clone();
        while self.state.iteration < tc.iterations {
            let it = self.state.iteration;
            let tg = Instant::now();
            let was_grouped = self.is_grouped();
            let rec = self.step()?;
            if !was_grouped && self.is_grouped() {
                grouping_secs = tg.elapsed().as_secs_f64();
            }
            if it % 100 == 0 {
                log::info!("iter {it:>5}  loss {:.5}  l1 {:.5}", rec.total, rec.l1);
            }
            let done = self.state.iteration;
            if tc.eval_interval > 0 && done % tc.eval_interval == 0 && done < tc.iterations {
                evals.push(self.evaluate(&self.data.eval)?);
            }
            if let (Some(dir), true) = (out, tc.checkpoint_interval > 0 && done % tc.checkpoint_interval == 0) {
                self.save_checkpoint(&dir.join("checkpoints").join(format!("iter_{done:06}")))?;
            }
        }
        let fin = (self.evaluate(&self.data.train)?, self.evaluate(&self.data.eval)?);
        evals.push(fin.1.clone());
        let secs = t0.elapsed().as_secs_f64();
        Ok(RunOutcome {
            initial_train: initial.0,
            initial_eval: initial.1,
            final_train: fin.0,
            final_eval: fin.1,
            evals,
            timing: (!tc.deterministic).then(|| Timing {
                total_secs: secs,
                grouping_secs,
                per_iteration_ms: 1e3 * secs / tc.iterations.max(1) as f64,
            }),
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut scene = self.state.scene.clone();
        load_base(&self.state.params, &mut scene)?;
        write_ply(&dir.join("points.ply"), &scene)?;
        self.state.params.save(&dir.join("params.bin"))?;
        self.state.adam.m.save(&dir.join("adam_m.bin"))?;
        self.state.adam.v.save(&dir.join("adam_v.bin"))?;
        let st = &self.state;
        let ck = CheckpointState {
            version: CHECKPOINT_VERSION,
            iteration: st.iteration,
            config: self.cfg.clone(),
            background: st.scene.background,
            init_bounds: st.init_bounds,
            adam_steps: st.adam.steps.clone(),
            rng: st.rng.clone(),
            order: st.order.clone(),
            cursor: st.cursor,
            grad_sum: st.grad_sum.iter().map(|v| [v.x, v.y, v.z]).collect(),
            grad_norm: st.grad_norm.clone(),
            grad_count: st.grad_count.clone(),
            history: st.history.clone(),
            grouping: st.grouping.as_ref().map(|g| CheckpointGrouping {
                partition: g.partition.clone(),
                neighbors: (*g.inputs.neighbors).clone(),
                descriptors: g.inputs.descriptors.clone(),
                bounds: g.inputs.bounds,
                edges: g.edges.clone(),
                in_range: g.in_range,
            }),
        };
        let path = dir.join("state.json");
        let text = serde_json::to_string(&ck).map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Restores a trainer from `dir`. The run continues with `cfg` (which
    /// may differ from the saved one, for example in the iteration count).
    pub fn resume(dir: &Path, cfg: RunConfig, data: Dataset) -> Result<Self> {
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                expected: CHECKPOINT_VERSION,
                found,
            });
        }
        let ck: CheckpointState = crate::config::from_value(raw)?;
        if ck.config != cfg {
            log::warn!("resuming with a config that differs from the checkpoint's");
        }
        let params = ParamStore::load(&dir.join("params.bin"))?;
        let m = ParamStore::load(&dir.join("adam_m.bin"))?;
        let v = ParamStore::load(&dir.join("adam_v.bin"))?;
        let n = params
            .get(POSITION)
            .ok_or_else(|| Error::format(dir.join("params.bin"), "missing position block"))?
            .rows();
        let mut scene = GaussianSet::new(
            (0..n).map(|_| Gaussian::new(Vector3::zeros(), 1.0, [0.5; 3], 0.5)).collect(),
            ck.background,
        );
        load_base(&params, &mut scene)?;
        scene.recompute_bounds();
        let grouping = match ck.grouping {
            Some(g) => {
                g.partition.validate(n)?;
                for (x, &k) in scene.gaussians.iter_mut().zip(&g.partition.assignment) {
                    x.group_id = Some(k);
                }
                Some(GroupState {
                    inputs: NetInputs {
                        assignment: g.partition.assignment.clone(),
                        groups: g.partition.len(),
                        neighbors: Rc::new(g.neighbors),
                        descriptors: g.descriptors,
                        bounds: g.bounds,
                    },
                    partition: g.partition,
                    edges: g.edges,
                    in_range: g.in_range,
                })
            }
            None => None,
        };
        if let Some(gs) = &grouping {
            gs.inputs.validate(n)?;
        }
        let mut t = Self::new(cfg, data, scene.clone())?;
        t.state = TrainState {
            iteration: ck.iteration,
            scene,
            params,
            adam: Adam {
                m,
                v,
                steps: ck.adam_steps,
            },
            grouping,
            rng: ck.rng,
            history: ck.history,
            init_bounds: ck.init_bounds,
            order: ck.order,
            cursor: ck.cursor,
            grad_sum: ck.grad_sum.iter().map(|a| Vector3::from(*a)).collect(),
            grad_norm: ck.grad_norm,
            grad_count: ck.grad_count,
        };
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    pub grouping_secs: f64,
    pub per_iteration_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub initial_train: EvalReport,
    pub initial_eval: EvalReport,
    pub final_train: EvalReport,
    pub final_eval: EvalReport,
    /// Eval-view reports, initial and final included.
    pub evals: Vec<EvalReport>,
    pub timing: Option<Timing>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointGrouping {
    partition: SupergaussianPartition,
    neighbors: Vec<Vec<usize>>,
    descriptors: Tensor,
    bounds: Aabb,
    edges: Vec<(usize, usize)>,
    in_range: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointState {
    version: u32,
    iteration: usize,
    config: RunConfig,
    background: [f64; 3],
    init_bounds: Aabb,
    adam_steps: BTreeMap<String, u64>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    grad_sum: Vec<[f64; 3]>,
    grad_norm: Vec<f64>,
    grad_count: Vec<u32>,
    history: Vec<StepRecord>,
    grouping: Option<CheckpointGrouping>,
}
