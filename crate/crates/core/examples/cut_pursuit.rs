//! Piecewise-constant partition of a noisy 1-D signal on a chain graph, for a
//! few values of the boundary penalty μ, then μ tuned for a target count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supergauss::neighborhood::{NeighborGraph, FEATURE_DIM};
use supergauss::partition::{cut_pursuit, tune_mu, CutPursuitConfig};

fn main() -> supergauss::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let levels = [0.0, 4.0, 1.0, 6.0];
    let features: Vec<_> = (0..80)
        .map(|i| {
            let mut f = [0.0; FEATURE_DIM];
            f[0] = levels[i / 20] + rng.gen_range(-0.5..0.5);
            f
        })
        .collect();
    let edges: Vec<_> = (0..79).map(|i| (i, i + 1)).collect();
    let graph = NeighborGraph::from_edges(80, &edges);

    for mu in [0.01, 1.0, 10.0, 1000.0] {
        let cfg = CutPursuitConfig { mu, min_group_size: 1, ..Default::default() };
        let p = cut_pursuit(&features, &graph, &cfg)?;
        println!("mu {mu:>7}: {} groups, sizes {:?}, energy {:.3}", p.len(), p.sizes(), p.energy.total);
    }

    let t = tune_mu(&features, &graph, (4, 4), &CutPursuitConfig::default())?;
    println!(
        "tuned mu {:.4e} -> {} groups after {} evaluations (in range: {})",
        t.mu,
        t.partition.len(),
        t.evaluations,
        t.in_range
    );
    Ok(())
}
