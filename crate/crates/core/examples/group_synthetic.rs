//! Partition the generator's ground-truth Gaussians into supergaussians and
//! score the result against the cluster labels.

use std::collections::HashMap;
use std::time::Instant;

use supergauss::io::{generate_synthetic, SyntheticSpec};
use supergauss::partition::{group_scene, GroupingConfig};

fn main() -> supergauss::Result<()> {
    let scene = generate_synthetic(&SyntheticSpec::default(), 0)?;
    for target in [(3, 3), (8, 16), (16, 64)] {
        let t0 = Instant::now();
        let g = group_scene(&scene.ground_truth, &GroupingConfig { target, ..Default::default() })?;
        let p = &g.partition;

        // each group votes for its majority label
        let mut hit = 0;
        for members in &p.groups {
            let mut votes: HashMap<usize, usize> = HashMap::new();
            for &i in members {
                *votes.entry(scene.labels[i]).or_default() += 1;
            }
            hit += votes.values().max().copied().unwrap_or(0);
        }
        println!(
            "target {target:?}: {} groups, mu {:.3e}, purity {:.3}, {:.2}s",
            p.len(),
            p.mu,
            hit as f64 / scene.labels.len() as f64,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
