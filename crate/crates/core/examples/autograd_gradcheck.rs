//! Build a small two-layer network on the tape, backpropagate, and compare
//! every parameter gradient with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supergauss::autograd::{grad_check, GradCheckConfig, Graph, ParamStore, Tensor, Var};

fn main() -> supergauss::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    store.insert("w1", Tensor::from_fn(4, 8, |_, _| rng.gen_range(-0.5..0.5)));
    store.insert("b1", Tensor::from_fn(1, 8, |_, _| rng.gen_range(-0.1..0.1)));
    store.insert("w2", Tensor::from_fn(8, 1, |_, _| rng.gen_range(-0.5..0.5)));
    let x = Tensor::from_fn(16, 4, |_, _| rng.gen_range(-1.0..1.0));
    let y = Tensor::from_fn(16, 1, |r, _| (r as f64 * 0.3).sin());

    let model = |g: &mut Graph, s: &ParamStore| -> supergauss::Result<Var> {
        let xi = g.constant(x.clone());
        let w1 = g.param(s, "w1")?;
        let b1 = g.param(s, "b1")?;
        let w2 = g.param(s, "w2")?;
        let h = g.matmul(xi, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let out = g.matmul(h, w2)?;
        let out = g.tanh(out);
        let t = g.constant(y.clone());
        let r = g.sub(out, t)?;
        let sq = g.mul(r, r)?;
        Ok(g.sum(sq))
    };

    let mut g = Graph::new();
    let loss = model(&mut g, &store)?;
    println!("loss {:.6}", g.value(loss).item());
    for (name, grad) in g.backward(loss)?.param_grads() {
        let norm = grad.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  d loss / d {name}: |g| = {norm:.4e}");
    }

    let report = grad_check(model, &store, &GradCheckConfig::default())?;
    println!("{report}");
    println!("max relative error {:.2e}", report.max_rel_err());
    Ok(())
}
