//! Shared fixtures and brute-force oracles.
#![allow(dead_code)]

use selectroscope::config::{ExperimentConfig, RunConfig};
use selectroscope::data::{Dataset, Split, SyntheticSpec};
use selectroscope::{ArchitectureSpec, Model, Tensor};

pub fn small_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        blocks_per_module: vec![2, 1],
        channels_per_module: vec![3, 4],
        strides: vec![1, 2],
        input_shape: [1, 6, 6],
        num_classes: 3,
    }
}

/// A fast end-to-end configuration: 4 classes of 8×8 images.
pub fn quick_config(epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        architecture: ArchitectureSpec {
            blocks_per_module: vec![1, 1, 1],
            channels_per_module: vec![4, 4, 8],
            strides: vec![1, 2, 2],
            input_shape: [1, 8, 8],
            num_classes: 4,
        },
        data: selectroscope::config::DataConfig::Synthetic(SyntheticSpec {
            num_classes: 4,
            train_per_class: 16,
            eval_per_class: 8,
            image_shape: [1, 8, 8],
            template_seed: 3,
            noise_sigma: 0.25,
        }),
        run: RunConfig {
            epochs,
            batch_size: 16,
            seed: 11,
            sub_epoch_every: 2,
            eval_batch_size: 32,
        },
        ..ExperimentConfig::default()
    }
}

/// Direct six-loop cross-correlation.
pub fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let z = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                                    s += x.get(&[b, c, y as usize, z as usize]).unwrap()
                                        * k.get(&[o, c, u, v]).unwrap();
                                }
                            }
                        }
                    }
                    out[((b * co + o) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out).unwrap()
}

/// Linear CKA through HSIC with an explicit centering matrix:
/// `HSIC(K, L) = tr(K H L H)` with `K = X Xᵀ`, `L = Y Yᵀ`.
pub fn hsic_cka(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.shape()[0];
    let gram = |m: &Tensor| {
        let p = m.shape()[1];
        let d = m.data();
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = (0..p).map(|c| d[i * p + c] * d[j * p + c]).sum();
            }
        }
        k
    };
    let h = |i: usize, j: usize| f64::from(u8::from(i == j)) - 1.0 / n as f64;
    let center = |k: &Vec<Vec<f64>>| {
        // H K H
        let mut hk = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                hk[i][j] = (0..n).map(|t| h(i, t) * k[t][j]).sum();
            }
        }
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                out[i][j] = (0..n).map(|t| hk[i][t] * h(t, j)).sum();
            }
        }
        out
    };
    let (kc, lc) = (center(&gram(x)), center(&gram(y)));
    let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += a[i][j] * b[j][i];
            }
        }
        s
    };
    hsic(&kc, &lc) / (hsic(&kc, &kc) * hsic(&lc, &lc)).sqrt()
}

fn center_kernel(cout: usize, cin: usize, entries: &[(usize, usize, f64)]) -> Tensor {
    let mut d = vec![0.0; cout * cin * 9];
    for &(o, i, v) in entries {
        d[(o * cin + i) * 9 + 4] = v;
    }
    Tensor::new(vec![cout, cin, 3, 3], d).unwrap()
}

/// Three classes on 1×1 images with channels `(a, b, 1)`:
/// class 0 = (1, 0), class 1 = (0, 1), class 2 = (s, s) with s ∈ {1, 0.9}.
/// Tap channel 0 computes relu(a + b − 1.5) and fires only for class 2;
/// channels 1 and 2 are silent. Ablating channel 0 turns every class-2
/// prediction into class 1 and leaves the others correct.
pub fn three_class_toy() -> (Model, Dataset) {
    let spec = ArchitectureSpec {
        blocks_per_module: vec![1],
        channels_per_module: vec![3],
        strides: vec![1],
        input_shape: [3, 1, 1],
        num_classes: 3,
    };
    let mut model = Model::build(&spec, 0).unwrap();
    let set = |m: &mut Model, name: &str, t: Tensor| m.set_parameter(name, t).unwrap();
    set(&mut model, "stem.weight", center_kernel(3, 3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]));
    set(&mut model, "m0.b0.conv1", center_kernel(3, 3, &[(0, 0, 1.0), (0, 1, 1.0), (0, 2, -1.5)]));
    set(&mut model, "m0.b0.conv2", center_kernel(3, 3, &[(0, 0, 4.0)]));
    // logits from module output (c0, c1, c2 = 1):
    // z0 = c0 − 2 c1, z1 = 2 c1 − c0, z2 = c0 + c1 − 2.5
    let fc = Tensor::new(vec![3, 3], vec![1.0, -1.0, 1.0, -2.0, 2.0, 1.0, 0.0, 0.0, -2.5]).unwrap();
    set(&mut model, "fc.weight", fc);
    set(&mut model, "fc.bias", Tensor::zeros(&[3]));

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let samples: [(f64, f64, usize); 6] = [
        (1.0, 0.0, 0),
        (0.0, 1.0, 1),
        (1.0, 1.0, 2),
        (0.9, 0.9, 2),
        (1.0, 0.0, 0),
        (0.0, 1.0, 1),
    ];
    for rep in 0..5 {
        for &(a, b, l) in &samples {
            // vary the class-0/1 intensity slightly between repetitions
            let scale = 1.0 - 0.05 * rep as f64 * f64::from(u8::from(l != 2));
            images.extend([a * scale, b * scale, 1.0]);
            labels.push(l);
        }
    }
    let n = labels.len();
    let ds = Dataset::new(Tensor::new(vec![n, 3, 1, 1], images).unwrap(), labels, 3, Split::Eval).unwrap();
    (model, ds)
}
pub mod ops;

/// Small enough that kink-free finite-difference points are common.
pub fn tiny_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        blocks_per_module: vec![1, 1],
        channels_per_module: vec![2, 4],
        strides: vec![1, 2],
        input_shape: [1, 4, 4],
        num_classes: 3,
    }
}
