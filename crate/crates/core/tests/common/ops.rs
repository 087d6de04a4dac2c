//! Finite-difference cases for every differentiable graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selectroscope::{grad_check_many, Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub build: Build,
    /// Keep coordinates away from kinks and poles: (lower bound on |x|) per input.
    pub min_abs: &'static [f64],
}

/// Contracts an arbitrary output with fixed pseudo-random weights so every
/// output coordinate reaches the loss with a distinct coefficient.
pub fn contract(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

fn relu_case(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let y = g.relu(v[0])?;
    contract(g, y)
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", shapes: &[&[2, 3], &[2, 3]], build: |g, v| { let y = g.add(v[0], v[1])?; contract(g, y) }, min_abs: &[0.0, 0.0] },
        OpCase { name: "sub", shapes: &[&[2, 3], &[2, 3]], build: |g, v| { let y = g.sub(v[0], v[1])?; contract(g, y) }, min_abs: &[0.0, 0.0] },
        OpCase { name: "mul", shapes: &[&[2, 3], &[2, 3]], build: |g, v| { let y = g.mul(v[0], v[1])?; contract(g, y) }, min_abs: &[0.0, 0.0] },
        OpCase { name: "div", shapes: &[&[2, 3], &[2, 3]], build: |g, v| { let y = g.div(v[0], v[1])?; contract(g, y) }, min_abs: &[0.0, 0.3] },
        OpCase { name: "add_scalar", shapes: &[&[4]], build: |g, v| { let y = g.add_scalar(v[0], 0.7)?; contract(g, y) }, min_abs: &[0.0] },
        OpCase { name: "scalar_mul", shapes: &[&[4]], build: |g, v| { let y = g.scalar_mul(v[0], -1.3)?; contract(g, y) }, min_abs: &[0.0] },
        OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], build: |g, v| { let y = g.matmul(v[0], v[1])?; contract(g, y) }, min_abs: &[0.0, 0.0] },
        OpCase { name: "relu", shapes: &[&[3, 4]], build: relu_case, min_abs: &[10.0 * STEP] },
        OpCase { name: "conv2d", shapes: &[&[2, 2, 5, 5], &[3, 2, 3, 3]], build: |g, v| { let y = g.conv2d(v[0], v[1], 1, 1)?; contract(g, y) }, min_abs: &[0.0, 0.0] },
        OpCase { name: "conv2d_strided", shapes: &[&[1, 2, 6, 6], &[2, 2, 3, 3]], build: |g, v| { let y = g.conv2d(v[0], v[1], 2, 0)?; contract(g, y) }, min_abs: &[0.0, 0.0] },
        OpCase { name: "bias_add", shapes: &[&[2, 3, 2, 2], &[3]], build: |g, v| { let y = g.bias_add(v[0], v[1])?; contract(g, y) }, min_abs: &[0.0, 0.0] },
        OpCase { name: "reshape", shapes: &[&[2, 6]], build: |g, v| { let y = g.reshape(v[0], &[3, 4])?; contract(g, y) }, min_abs: &[0.0] },
        OpCase { name: "flatten", shapes: &[&[2, 3, 2, 2]], build: |g, v| { let y = g.flatten(v[0])?; contract(g, y) }, min_abs: &[0.0] },
        OpCase { name: "global_avg_pool", shapes: &[&[2, 3, 3, 2]], build: |g, v| { let y = g.global_avg_pool(v[0])?; contract(g, y) }, min_abs: &[0.0] },
        OpCase { name: "sum_over", shapes: &[&[2, 3, 4]], build: |g, v| { let y = g.sum_over(v[0], &[0, 2])?; contract(g, y) }, min_abs: &[0.0] },
        OpCase { name: "mean_over", shapes: &[&[2, 3, 4]], build: |g, v| { let y = g.mean_over(v[0], &[1])?; contract(g, y) }, min_abs: &[0.0] },
        OpCase { name: "mean_all", shapes: &[&[3, 3]], build: |g, v| { let y = g.mean_all(v[0])?; let y = g.mul(y, y)?; g.sum_all(y) }, min_abs: &[0.0] },
        OpCase { name: "max_rows", shapes: &[&[4, 3]], build: |g, v| { let y = g.max_rows(v[0])?; contract(g, y) }, min_abs: &[0.0] },
        OpCase { name: "mask_channels", shapes: &[&[2, 3, 2, 2]], build: |g, v| { let y = g.mask_channels(v[0], &[false, true, false])?; contract(g, y) }, min_abs: &[0.0] },
        OpCase { name: "softmax_cross_entropy", shapes: &[&[4, 5]], build: |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1, 4]), min_abs: &[0.0] },
    ]
}

/// Random inputs in [−1, 1] with each coordinate at least `min_abs` from 0.
pub fn draw(shape: &[usize], min_abs: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(min_abs.max(1e-12)..1.0);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error of `case` over `points` seeded points; points whose
/// kink margin is below 100 steps are redrawn.
pub fn check(case: &OpCase, seed: u64, points: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < points {
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .zip(case.min_abs)
            .map(|(s, &m)| draw(s, m, &mut rng))
            .collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        (case.build)(&mut g, &vars).unwrap();
        if g.kink_margin() < 100.0 * STEP {
            continue;
        }
        worst = worst.max(grad_check_many(case.build, &inputs, STEP).unwrap());
        done += 1;
    }
    worst
}
