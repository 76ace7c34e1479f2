use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Tolerances and sampling for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Check at most this many entries per block (sampled with `seed`).
    pub max_entries_per_block: Option<usize>,
    pub seed: u64,
    /// One-sided differences disagreeing by more than this fraction mark a kink.
    pub kink_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_entries_per_block: None,
            seed: 0,
            kink_tol: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, abs_tol)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Entries where the function is not differentiable at the probe point;
    /// excluded from pass/fail.
    pub kinks: Vec<usize>,
    pub failures: Vec<usize>,
}

impl BlockReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.blocks.iter().all(BlockReport::pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_err))
    }

    pub fn total_kinks(&self) -> usize {
        self.blocks.iter().map(|b| b.kinks.len()).sum()
    }

    pub fn block(&self, name: &str) -> Option<&BlockReport> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<32} n={:<5} max_rel={:.3e} max_abs={:.3e} kinks={} {}",
                b.name,
                b.checked,
                b.max_rel_err,
                b.max_abs_err,
                b.kinks.len(),
                if b.pass() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences, block by block.
pub fn grad_check<F>(f: F, store: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?.param_grads();
    let f0 = g.value(loss).item();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut blocks = Vec::new();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.len());
        let analytic = grads.get(&name);
        let entries: Vec<usize> = match cfg.max_entries_per_block {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut rep = BlockReport {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            kinks: Vec::new(),
            failures: Vec::new(),
        };
        for k in entries {
            let x0 = store.get(&name).unwrap().data()[k];
            let h = cfg.step;
            work.get_mut(&name).unwrap().data_mut()[k] = x0 + h;
            let fp = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = x0 - h;
            let fm = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = x0;

            let numeric = (fp - fm) / (2.0 * h);
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            let scale_1s = fwd.abs().max(bwd.abs());
            if (fwd - bwd).abs() > cfg.kink_tol * scale_1s && (fwd - bwd).abs() > 10.0 * cfg.abs_tol {
                rep.kinks.push(k);
                continue;
            }
            let a = analytic.map_or(0.0, |t| t.data()[k]);
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            rep.checked += 1;
            rep.max_abs_err = rep.max_abs_err.max(diff);
            rep.max_rel_err = rep.max_rel_err.max(diff / scale.max(cfg.abs_tol));
            if diff > cfg.rel_tol * scale + cfg.abs_tol {
                rep.failures.push(k);
            }
        }
        blocks.push(rep);
    }
    Ok(GradCheckReport { blocks })
}
