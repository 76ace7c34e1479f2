//! Run the group/local attention network on a grouped synthetic scene and
//! show that the zero-initialized heads leave every attribute untouched.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use supergauss::autograd::{Graph, ParamStore, Tensor};
use supergauss::io::{generate_synthetic, SyntheticSpec};
use supergauss::neighborhood::build_knn;
use supergauss::partition::{group_scene, GroupingConfig};
use supergauss::priornet::{effective_attributes, store_base, ActivationBounds, BaseVars, NetInputs, PriorConfig, PriorNet};

fn main() -> supergauss::Result<()> {
    let scene = generate_synthetic(&SyntheticSpec { per_cluster: 40, ..Default::default() }, 0)?;
    let mut set = scene.ground_truth;
    let cfg = PriorConfig::default();
    for g in &mut set.gaussians {
        g.latent = vec![0.0; cfg.latent_dim];
    }
    let grouping = group_scene(&set, &GroupingConfig { target: (3, 9), ..Default::default() })?;
    println!("{} Gaussians in {} groups", set.len(), grouping.partition.len());

    let graph = build_knn(&set.positions(), cfg.neighbors)?;
    let desc = &grouping.descriptors;
    let inputs = NetInputs {
        assignment: grouping.partition.assignment.clone(),
        groups: grouping.partition.len(),
        neighbors: Rc::new(graph.neighbors.clone()),
        descriptors: Tensor::from_fn(set.len(), 4, |i, c| match c {
            0 => desc[i].linearity,
            1 => desc[i].scattering,
            2 => desc[i].verticality,
            _ => desc[i].planarity,
        }),
        bounds: set.bounds.clone(),
    };

    let net = PriorNet::new(cfg)?;
    let mut store = ParamStore::new();
    store_base(&set, net.cfg.latent_dim, &mut store)?;
    net.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
    let count: usize = store.iter().filter(|(k, _)| k.starts_with("net.")).map(|(_, t)| t.len()).sum();
    println!("network parameters: {count}");

    let mut g = Graph::new();
    let base = BaseVars::from_store(&mut g, &store, true)?;
    let out = net.forward(&mut g, &store, &base, &inputs)?;
    println!(
        "group embedding {:?}, local embedding {:?}, unified {:?}",
        g.value(out.group_embedding).shape(),
        g.value(out.local_embedding).shape(),
        g.value(out.unified).shape()
    );
    let bounds = ActivationBounds::new(&net.cfg, &set.bounds);
    let plain = effective_attributes(&mut g, &base, None, &bounds)?;
    let with = effective_attributes(&mut g, &base, Some(&out.deltas), &bounds)?;
    println!(
        "positions identical with zero-init heads: {}",
        g.value(plain.position) == g.value(with.position)
    );
    Ok(())
}
