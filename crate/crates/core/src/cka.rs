//! Linear centered kernel alignment between representations of the same
//! samples.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, Site, TapCapture};
use crate::tensor::Tensor;

/// How a captured activation tensor becomes a sample × feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Features {
    /// One feature per channel, averaged over spatial positions.
    #[default]
    Pooled,
    /// Every activation is a feature.
    Flattened,
}

fn check_matrix(m: &Tensor, name: &str) -> Result<(usize, usize)> {
    if m.rank() != 2 {
        return Err(Error::Dimension(format!("{name} must be a matrix, got shape {:?}", m.shape())));
    }
    let (n, p) = (m.shape()[0], m.shape()[1]);
    if n < 2 {
        return Err(Error::Dimension(format!("{name} needs at least 2 samples, got {n}")));
    }
    Ok((n, p))
}

fn centered(m: &Tensor, n: usize, p: usize) -> Vec<f64> {
    let mut out = m.data().to_vec();
    for j in 0..p {
        // a constant column must centre to exact zeros, not rounding noise
        let mean = if (1..n).all(|i| out[i * p + j] == out[j]) {
            out[j]
        } else {
            (0..n).map(|i| out[i * p + j]).sum::<f64>() / n as f64
        };
        for i in 0..n {
            out[i * p + j] -= mean;
        }
    }
    out
}

/// Squared Frobenius norm of `Aᵀ B` for row-major `A` (n×p) and `B` (n×q).
fn cross_norm_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..p {
        for k in 0..q {
            let mut s = 0.0;
            for i in 0..n {
                s += a[i * p + j] * b[i * q + k];
            }
            total += s * s;
        }
    }
    total
}

/// `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)` on column-centered `X`, `Y`.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p) = check_matrix(x, "X")?;
    let (ny, q) = check_matrix(y, "Y")?;
    if n != ny {
        return Err(Error::Dimension(format!("X has {n} samples, Y has {ny}")));
    }
    let xc = centered(x, n, p);
    let yc = centered(y, n, q);
    if xc.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("X has zero variance".into()));
    }
    if yc.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("Y has zero variance".into()));
    }
    let xy = cross_norm_sq(&yc, q, &xc, p, n);
    let xx = cross_norm_sq(&xc, p, &xc, p, n).sqrt();
    let yy = cross_norm_sq(&yc, q, &yc, q, n).sqrt();
    let cka = xy / (xx * yy);
    if !cka.is_finite() {
        return Err(Error::Degenerate("CKA denominator underflowed".into()));
    }
    Ok(cka)
}

/// Turns an `[N, C, H, W]` or `[N, F]` capture into a matrix.
pub fn representation(capture: &TapCapture, features: Features) -> Result<Tensor> {
    let a = &capture.activations;
    match (a.rank(), features) {
        (2, _) => Ok(a.clone()),
        (4, Features::Flattened) => a.reshape(&[a.shape()[0], a.len() / a.shape()[0]]),
        (4, Features::Pooled) => {
            let (n, c) = (a.shape()[0], a.shape()[1]);
            let hw = a.shape()[2] * a.shape()[3];
            let data = a
                .data()
                .chunks_exact(hw)
                .map(|ch| ch.iter().sum::<f64>() / hw as f64)
                .collect();
            Tensor::new(vec![n, c], data)
        }
        _ => Err(Error::Dimension(format!("cannot form a representation from shape {:?}", a.shape()))),
    }
}

/// Representations of `sites` over the whole evaluation set, from one
/// forward pass per batch.
pub fn representations(model: &Model, eval_set: &Dataset, sites: &[Site], features: Features, batch_size: usize) -> Result<Vec<Tensor>> {
    if eval_set.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); sites.len()];
    for batch in eval_set.sequential_batches(batch_size) {
        let (images, _) = batch?;
        let (_, captures) = model.forward(&images, None, sites)?;
        for (slot, cap) in parts.iter_mut().zip(&captures) {
            slot.push(representation(cap, features)?);
        }
    }
    parts.iter().map(|p| Tensor::concat_outer(p)).collect()
}

/// Symmetric matrix of pairwise CKA; the diagonal is exactly 1.
pub fn cka_matrix(model: &Model, eval_set: &Dataset, sites: &[Site], features: Features, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let reps = representations(model, eval_set, sites, features, batch_size)?;
    cka_matrix_of(&reps)
}

pub fn cka_matrix_of(reps: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let t = reps.len();
    let mut m = vec![vec![0.0; t]; t];
    for i in 0..t {
        // raises the degenerate error for a dead representation
        linear_cka(&reps[i], &reps[i])?;
        m[i][i] = 1.0;
        for j in i + 1..t {
            let v = linear_cka(&reps[i], &reps[j])?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}
