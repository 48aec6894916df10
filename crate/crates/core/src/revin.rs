//! Reversible instance normalization.
//!
//! Each window is standardized with its own per-variable mean and standard
//! deviation before entering the model, and predictions are mapped back with
//! the same statistics. The statistics are constants of the graph; the
//! learnable per-variable affine (`gamma`, `beta`) is differentiable.

use std::rc::Rc;

use crate::autodiff::{ColumnStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Statistics and affine handles produced by [`revin_encode`], required by
/// [`revin_decode`].
#[derive(Clone, Debug)]
pub struct RevinState {
    stats: Rc<ColumnStats>,
    gamma: Var,
    beta: Var,
    eps: f64,
    batch: usize,
    channels: usize,
}

impl RevinState {
    pub fn mean(&self) -> &[f64] {
        &self.stats.center
    }

    /// `√(var + eps)` per instance and variable.
    pub fn std(&self) -> &[f64] {
        &self.stats.scale
    }

    pub fn stats(&self) -> Rc<ColumnStats> {
        Rc::clone(&self.stats)
    }
}

/// Per-instance, per-variable mean and `√(var + eps)` over the time axis of
/// `[L × C]` or `[B × L × C]`.
pub fn window_stats(x: &Tensor, eps: f64) -> Result<ColumnStats> {
    let (b, l, c) = match *x.shape() {
        [l, c] => (1, l, c),
        [b, l, c] => (b, l, c),
        _ => return Err(Error::Contract(format!("RevIN expects [L×C] or [B×L×C], got {:?}", x.shape()))),
    };
    if l < 2 {
        return Err(Error::Contract(format!("RevIN needs at least 2 time steps, got {l}")));
    }
    let d = x.data();
    let mut center = vec![0.0; b * c];
    let mut scale = vec![0.0; b * c];
    for bi in 0..b {
        let block = &d[bi * l * c..(bi + 1) * l * c];
        for j in 0..c {
            let mean = block.iter().skip(j).step_by(c).sum::<f64>() / l as f64;
            let var = block.iter().skip(j).step_by(c).map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64;
            center[bi * c + j] = mean;
            scale[bi * c + j] = (var + eps).sqrt();
        }
    }
    Ok(ColumnStats { center, scale })
}

/// `X' = gamma·(X − mean)/√(var + eps) + beta` per variable.
pub fn revin_encode(g: &mut Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, RevinState)> {
    if eps <= 0.0 {
        return Err(Error::Config("RevIN eps must be positive".into()));
    }
    let stats = Rc::new(window_stats(g.value(x), eps)?);
    let shape = g.shape(x);
    let (batch, channels) = if shape.len() == 3 { (shape[0], shape[2]) } else { (1, shape[1]) };
    let out = g.standardize(x, gamma, beta, Rc::clone(&stats))?;
    Ok((
        out,
        RevinState {
            stats,
            gamma,
            beta,
            eps,
            batch,
            channels,
        },
    ))
}

/// Exact inverse of the encode affine applied to a `[O × C]` or `[B × O × C]`
/// prediction.
pub fn revin_decode(g: &mut Graph, y: Var, state: &RevinState) -> Result<Var> {
    let shape = g.shape(y);
    let (batch, channels) = match *shape {
        [_, c] => (1, c),
        [b, _, c] => (b, c),
        _ => return Err(Error::Contract(format!("RevIN decode expects [O×C] or [B×O×C], got {shape:?}"))),
    };
    if (batch, channels) != (state.batch, state.channels) {
        return Err(Error::Contract(format!(
            "RevIN state was fitted on {}×{} instances/variables, decode input has {batch}×{channels}",
            state.batch, state.channels
        )));
    }
    g.destandardize(y, state.gamma, state.beta, Rc::clone(&state.stats), state.eps)
}
