//! Cross-variable encoder.
//!
//! The RevIN-encoded history `[L × C]` is transposed into `C` variate tokens
//! of width `L`. Pre-norm Transformer blocks attend across variables, a
//! linear projection maps each token to the horizon, and a parallel linear
//! trend branch maps the encoded history of each variable straight to the
//! horizon. All weights are shared across variables, so the parameter count
//! does not depend on `C`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Bound, LinearIds, ParamGroup, ParamId};
use crate::revin::{revin_decode, revin_encode, RevinState};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    fn init(group: &mut ParamGroup, name: &str, width: usize) -> Self {
        NormIds {
            gamma: group.add(format!("{name}.gamma"), Tensor::full([width], 1.0)),
            beta: group.add(format!("{name}.beta"), Tensor::zeros([width])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub norm_attn: NormIds,
    pub query: LinearIds,
    pub key: LinearIds,
    pub value: LinearIds,
    pub out: LinearIds,
    pub norm_ffn: NormIds,
    pub ffn_in: LinearIds,
    pub ffn_out: LinearIds,
}

/// Runtime switches of a forward pass.
pub struct Pass<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Pass<'_> {
    pub fn eval() -> Pass<'static> {
        Pass { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &mut ChaCha8Rng) -> Pass<'_> {
        Pass { dropout, rng: Some(rng) }
    }

    fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CveOutput {
    /// RevIN-encoded history `[B × L × C]`.
    pub x_enc: Var,
    /// Prediction before RevIN decode, `[B × O × C]`.
    pub z_norm: Var,
    /// Decoded prediction `[B × O × C]`.
    pub z_cve: Var,
    pub revin: RevinState,
}

#[derive(Clone, Debug)]
pub struct CveEncoder {
    params: ParamGroup,
    blocks: Vec<BlockIds>,
    projection: LinearIds,
    trend: Option<LinearIds>,
    revin_gamma: ParamId,
    revin_beta: ParamId,
    lookback: usize,
    horizon: usize,
    heads: usize,
    activation: Activation,
    revin_eps: f64,
}

/// `[B × L × C] → [B × C × L]`: one token per variable.
pub fn tokenize(g: &mut Graph, x: Var) -> Result<Var> {
    g.transpose(x)
}

fn rowwise(g: &mut Graph, bound: &Bound, lin: &LinearIds, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let rows: usize = s[..s.len() - 1].iter().product();
    let flat = g.reshape(x, &[rows, s[s.len() - 1]])?;
    let y = lin.apply(g, bound, flat)?;
    let out_width = g.shape(y)[1];
    let mut shape = s;
    *shape.last_mut().unwrap() = out_width;
    g.reshape(y, &shape)
}

fn layer_norm(g: &mut Graph, bound: &Bound, ids: &NormIds, x: Var) -> Result<Var> {
    g.layer_norm(x, bound[ids.gamma], bound[ids.beta], LAYER_NORM_EPS)
}

/// Multi-head self-attention across the token axis of `h[B × C × D]`,
/// heads splitting the width `D`, followed by the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    bound: &Bound,
    ids: &BlockIds,
    h: Var,
    heads: usize,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let width = g.shape(h)[2];
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "token width {width} is not divisible by {heads} heads"
        )));
    }
    let dh = width / heads;
    let q = rowwise(g, bound, &ids.query, h)?;
    let k = rowwise(g, bound, &ids.key, h)?;
    let v = rowwise(g, bound, &ids.value, h)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice(q, 2, head * dh, dh)?;
        let kh = g.slice(k, 2, head * dh, dh)?;
        let vh = g.slice(v, 2, head * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.batch_matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores)?;
        let attn = pass.dropout(g, attn)?;
        ctx.push(g.batch_matmul(attn, vh)?);
    }
    let merged = if heads == 1 { ctx[0] } else { g.concat(&ctx, 2)? };
    rowwise(g, bound, &ids.out, merged)
}

/// Pre-norm residual block:
/// `V ← V + Attn(LN(V))`, then `V ← V + FFN(LN(V))`.
pub fn transformer_block(
    g: &mut Graph,
    bound: &Bound,
    ids: &BlockIds,
    v: Var,
    heads: usize,
    activation: Activation,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let h = layer_norm(g, bound, &ids.norm_attn, v)?;
    let a = multi_head_attention(g, bound, ids, h, heads, pass)?;
    let a = pass.dropout(g, a)?;
    let v = g.add(v, a)?;
    let h = layer_norm(g, bound, &ids.norm_ffn, v)?;
    let f = rowwise(g, bound, &ids.ffn_in, h)?;
    let f = g.activation(f, activation);
    let f = rowwise(g, bound, &ids.ffn_out, f)?;
    let f = pass.dropout(g, f)?;
    g.add(v, f)
}

impl CveEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let l = cfg.lookback;
        if cfg.heads == 0 || l % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "lookback {l} is not divisible by {} attention heads",
                cfg.heads
            )));
        }
        let mut p = ParamGroup::new();
        let blocks = (0..cfg.cve_layers)
            .map(|m| {
                let n = format!("cve.block{m}");
                BlockIds {
                    norm_attn: NormIds::init(&mut p, &format!("{n}.norm_attn"), l),
                    query: LinearIds::init(&mut p, &format!("{n}.attn.query"), l, l, rng),
                    key: LinearIds::init(&mut p, &format!("{n}.attn.key"), l, l, rng),
                    value: LinearIds::init(&mut p, &format!("{n}.attn.value"), l, l, rng),
                    out: LinearIds::init(&mut p, &format!("{n}.attn.out"), l, l, rng),
                    norm_ffn: NormIds::init(&mut p, &format!("{n}.norm_ffn"), l),
                    ffn_in: LinearIds::init(&mut p, &format!("{n}.ffn.in"), l, cfg.d_ff, rng),
                    ffn_out: LinearIds::init(&mut p, &format!("{n}.ffn.out"), cfg.d_ff, l, rng),
                }
            })
            .collect();
        let projection = LinearIds::init(&mut p, "cve.projection", l, cfg.horizon, rng);
        let trend = cfg
            .trend
            .then(|| LinearIds::init(&mut p, "cve.trend", l, cfg.horizon, rng));
        let revin_gamma = p.add("cve.revin.gamma", Tensor::full([cfg.n_vars], 1.0));
        let revin_beta = p.add("cve.revin.beta", Tensor::zeros([cfg.n_vars]));
        Ok(CveEncoder {
            params: p,
            blocks,
            projection,
            trend,
            revin_gamma,
            revin_beta,
            lookback: l,
            horizon: cfg.horizon,
            heads: cfg.heads,
            activation: cfg.activation,
            revin_eps: cfg.revin_eps,
        })
    }

    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup {
        &mut self.params
    }

    pub fn blocks(&self) -> &[BlockIds] {
        &self.blocks
    }

    pub fn projection(&self) -> LinearIds {
        self.projection
    }

    pub fn trend(&self) -> Option<LinearIds> {
        self.trend
    }

    pub fn revin_affine(&self) -> (ParamId, ParamId) {
        (self.revin_gamma, self.revin_beta)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn revin_eps(&self) -> f64 {
        self.revin_eps
    }

    /// Forward pass over `x[B × L × C]` (z-scored history).
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, pass: &mut Pass<'_>) -> Result<CveOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.lookback {
            return Err(Error::Contract(format!(
                "CVE expects [B × {} × C], got {s:?}",
                self.lookback
            )));
        }
        let (b, c) = (s[0], s[2]);
        let (x_enc, revin) = revin_encode(g, x, bound[self.revin_gamma], bound[self.revin_beta], self.revin_eps)?;
        let tokens = tokenize(g, x_enc)?;
        let mut v = tokens;
        for ids in &self.blocks {
            v = transformer_block(g, bound, ids, v, self.heads, self.activation, pass)?;
        }
        let mut z = rowwise(g, bound, &self.projection, v)?;
        if let Some(trend) = &self.trend {
            let t = rowwise(g, bound, trend, tokens)?;
            z = g.add(z, t)?;
        }
        let z_norm = g.transpose(z)?;
        debug_assert_eq!(g.shape(z_norm), &[b, self.horizon, c]);
        let z_cve = revin_decode(g, z_norm, &revin)?;
        Ok(CveOutput {
            x_enc,
            z_norm,
            z_cve,
            revin,
        })
    }
}
