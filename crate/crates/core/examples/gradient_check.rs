//! Finite-difference check of every parameter gradient of a small residual
//! network, for plain cross-entropy and for the selectivity-regularized loss.
//!
//!     cargo run --example gradient_check

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selectroscope::selectivity::{regularized_loss, regularizer_mu_si};
use selectroscope::{grad_check_many, ArchitectureSpec, Graph, Model, Site, Tensor};

fn main() -> selectroscope::Result<()> {
    let spec = ArchitectureSpec {
        blocks_per_module: vec![1, 1],
        channels_per_module: vec![2, 4],
        strides: vec![1, 2],
        input_shape: [1, 4, 4],
        num_classes: 3,
    };
    let labels = vec![0, 1, 2];
    let step = 1e-5;
    let targeted = BTreeSet::from([0]);

    for seed in 0.. {
        let model = Model::build(&spec, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[3, 1, 4, 4], 0.0, 1.0, &mut rng);
        let sites = vec![Site::Tap(spec.taps()[0])];

        let loss = |g: &mut Graph, params: &[selectroscope::Var], alpha: f64| {
            let input = g.constant(x.clone());
            let out = model.forward_graph(g, params, input, None, &sites)?;
            let mu = (alpha != 0.0)
                .then(|| regularizer_mu_si(g, &out.captures, &labels, &targeted))
                .transpose()?;
            regularized_loss(g, out.logits, &labels, mu, alpha)
        };

        // skip points where a probe could cross a relu or argmax kink
        let mut g = Graph::new();
        let params = model.bind(&mut g, false);
        loss(&mut g, &params, -20.0)?;
        if g.kink_margin() < 1e-3 {
            continue;
        }

        for alpha in [0.0, -20.0] {
            let err = grad_check_many(|g, p| loss(g, p, alpha), model.param_tensors(), step)?;
            println!("seed {seed} alpha {alpha:>5}: max relative error {err:.3e} over {} parameters", model.param_count());
        }
        break;
    }
    Ok(())
}
