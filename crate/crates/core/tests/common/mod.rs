//! Independent reference implementations and finite-difference helpers.
#![allow(dead_code)]

use cvtn_core::autodiff::Graph;
use cvtn_core::cve::Pass;
use cvtn_core::{CvtnModel, Group, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Row-major `[m × k] · [k × n]` by triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn naive_linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = naive_matmul(x, w.data(), rows, k, n);
    for r in 0..rows {
        for j in 0..n {
            out[r * n + j] += b.data()[j];
        }
    }
    out
}

pub fn naive_layer_norm(x: &[f64], n: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(n).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        for j in 0..n {
            out[r * n + j] = (row[j] - mean) / (var + eps).sqrt() * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

pub fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Multi-head attention over `c` tokens of width `d` for one sample, with
/// explicit double loops over token pairs.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention(
    h: &[f64],
    c: usize,
    d: usize,
    heads: usize,
    q: (&Tensor, &Tensor),
    k: (&Tensor, &Tensor),
    v: (&Tensor, &Tensor),
    out: (&Tensor, &Tensor),
) -> Vec<f64> {
    let qm = naive_linear(h, c, q.0, q.1);
    let km = naive_linear(h, c, k.0, k.1);
    let vm = naive_linear(h, c, v.0, v.1);
    let dh = d / heads;
    let mut ctx = vec![0.0; c * d];
    for hd in 0..heads {
        let off = hd * dh;
        for i in 0..c {
            let mut scores = vec![0.0; c];
            for j in 0..c {
                let mut s = 0.0;
                for p in 0..dh {
                    s += qm[i * d + off + p] * km[j * d + off + p];
                }
                scores[j] = s / (dh as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..c {
                let w = (scores[j] - mx).exp() / z;
                for p in 0..dh {
                    ctx[i * d + off + p] += w * vm[j * d + off + p];
                }
            }
        }
    }
    naive_linear(&ctx, c, out.0, out.1)
}

fn cve_loss(model: &CvtnModel, x: &Tensor, y: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (_, out) = model.forward_cve(&mut g, x, false, &mut Pass::eval()).unwrap();
    let l = g.mse_loss(out.z_cve, y).unwrap();
    g.value(l).item()
}

fn full_loss(model: &CvtnModel, x: &Tensor, y: &Tensor) -> f64 {
    let mut g = Graph::new();
    let f = model.forward_full(&mut g, x, false, false).unwrap();
    let l = g.mse_loss(f.y, y).unwrap();
    g.value(l).item()
}

/// Worst relative error between tape gradients and central differences
/// (h = 1e-5) of the MSE loss on `samples` random coordinates of `group`.
/// For the CTE group the loss is taken on the full forward.
pub fn model_gradcheck(model: &CvtnModel, group: Group, x: &Tensor, y: &Tensor, samples: usize, seed: u64) -> (f64, usize) {
    let analytic = {
        let mut g = Graph::new();
        let (loss, bound, params) = match group {
            Group::Cve => {
                let (b, out) = model.forward_cve(&mut g, x, true, &mut Pass::eval()).unwrap();
                (g.mse_loss(out.z_cve, y).unwrap(), b, model.cve().params())
            }
            Group::Cte => {
                let f = model.forward_full(&mut g, x, false, true).unwrap();
                (g.mse_loss(f.y, y).unwrap(), f.cte_bound, model.cte().params())
            }
        };
        g.backward(loss).unwrap();
        params.grads(&g, &bound).unwrap()
    };
    let loss_fn = |m: &CvtnModel| match group {
        Group::Cve => cve_loss(m, x, y),
        Group::Cte => full_loss(m, x, y),
    };
    let mut r = rng(seed);
    let sizes: Vec<usize> = model.group(group).tensors().iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for _ in 0..samples {
        let mut flat = r.gen_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        let orig = probe.group(group).tensors()[pi].data()[flat];
        probe.group_mut(group).tensors_mut()[pi].data_mut()[flat] = orig + h;
        let up = loss_fn(&probe);
        probe.group_mut(group).tensors_mut()[pi].data_mut()[flat] = orig - h;
        let down = loss_fn(&probe);
        probe.group_mut(group).tensors_mut()[pi].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[pi].data()[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    (worst, samples)
}

/// Replaces every tensor of a group with fresh uniform values so that
/// zero-initialized parts (the CTE output projection) carry gradient.
pub fn randomize_group(model: &mut CvtnModel, group: Group, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for t in model.group_mut(group).tensors_mut() {
        for v in t.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}
