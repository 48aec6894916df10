//! Cross-temporal encoder.
//!
//! Works on channel-major signals `[B × F × O]` over the forecast horizon.
//! `T⁰ = Z_proj + Z_CVE`; each layer concatenates its input with an `r`
//! channel convolution and a point-wise down-sample keeps `r/2` of the new
//! channels, so layer `n` carries `C + n·r/2` channels. A final point-wise
//! map back to `C` channels is added to the CVE prediction.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Bound, LinearIds, ParamGroup, ParamId};
use crate::tensor::Tensor;

/// Frame in which the horizon projection is fused with the CVE output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CteFrame {
    /// Fuse with the pre-decode CVE output on the RevIN-encoded history and
    /// decode the sum once.
    #[default]
    Normalized,
    /// Fuse with the decoded CVE output on the z-scored history.
    Raw,
}

impl fmt::Display for CteFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CteFrame::Normalized => "normalized",
            CteFrame::Raw => "raw",
        })
    }
}

impl FromStr for CteFrame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(CteFrame::Normalized),
            "raw" => Ok(CteFrame::Raw),
            other => Err(Error::Config(format!("unknown CTE frame '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CteLayerIds {
    pub in_channels: usize,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub fds_weight: ParamId,
    pub fds_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct CteOutput {
    /// `[B × O × C]`, in the fusion frame.
    pub fused: Var,
    /// Channel count after each layer, starting with `T⁰`.
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CteEncoder {
    params: ParamGroup,
    target_projection: LinearIds,
    layers: Vec<CteLayerIds>,
    out_weight: ParamId,
    out_bias: ParamId,
    n_vars: usize,
    growth: usize,
    activation: Activation,
    frame: CteFrame,
}

/// `concat(T, act(conv(T)))` along channels: `[B × F × O] → [B × (F + r) × O]`.
pub fn cross_time_block(g: &mut Graph, bound: &Bound, ids: &CteLayerIds, t: Var, activation: Activation) -> Result<Var> {
    let conv = g.conv1d_same(t, bound[ids.conv_weight], bound[ids.conv_bias])?;
    let conv = g.activation(conv, activation);
    g.concat(&[t, conv], 1)
}

/// Point-wise down-sample `[B × (F + r) × O] → [B × (F + r/2) × O]`.
pub fn fds(g: &mut Graph, bound: &Bound, ids: &CteLayerIds, t: Var) -> Result<Var> {
    g.pointwise_conv(t, bound[ids.fds_weight], bound[ids.fds_bias])
}

impl CteEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let r = cfg.growth;
        if r == 0 || r % 2 != 0 {
            return Err(Error::Config(format!("growth r must be even and positive, got {r}")));
        }
        if cfg.kernel % 2 == 0 {
            return Err(Error::Config(format!("CTE kernel must be odd, got {}", cfg.kernel)));
        }
        let c = cfg.n_vars;
        let mut p = ParamGroup::new();
        let target_projection = LinearIds::init(&mut p, "cte.target_projection", cfg.lookback, cfg.horizon, rng);
        let mut layers = Vec::with_capacity(cfg.cte_layers);
        let mut f = c;
        for n in 0..cfg.cte_layers {
            let conv_bound = 1.0 / ((f * cfg.kernel) as f64).sqrt();
            let fds_bound = 1.0 / ((f + r) as f64).sqrt();
            layers.push(CteLayerIds {
                in_channels: f,
                conv_weight: p.add(format!("cte.layer{n}.conv.weight"), Tensor::uniform([r, f, cfg.kernel], conv_bound, rng)),
                conv_bias: p.add(format!("cte.layer{n}.conv.bias"), Tensor::uniform([r], conv_bound, rng)),
                fds_weight: p.add(format!("cte.layer{n}.fds.weight"), Tensor::uniform([f + r / 2, f + r], fds_bound, rng)),
                fds_bias: p.add(format!("cte.layer{n}.fds.bias"), Tensor::uniform([f + r / 2], fds_bound, rng)),
            });
            f += r / 2;
        }
        // zero so that the first stage-2 output is exactly the CVE output
        let out_weight = p.add("cte.projection.weight", Tensor::zeros([c, f]));
        let out_bias = p.add("cte.projection.bias", Tensor::zeros([c]));
        Ok(CteEncoder {
            params: p,
            target_projection,
            layers,
            out_weight,
            out_bias,
            n_vars: c,
            growth: r,
            activation: cfg.activation,
            frame: cfg.cte_frame,
        })
    }

    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup {
        &mut self.params
    }

    pub fn layers(&self) -> &[CteLayerIds] {
        &self.layers
    }

    pub fn target_projection_ids(&self) -> LinearIds {
        self.target_projection
    }

    pub fn output_projection(&self) -> (ParamId, ParamId) {
        (self.out_weight, self.out_bias)
    }

    pub fn frame(&self) -> CteFrame {
        self.frame
    }

    /// Channel count of `T^n`.
    pub fn channels_at(&self, n: usize) -> usize {
        self.n_vars + n * self.growth / 2
    }

    /// Per-variable shared map of the history to the horizon:
    /// `[B × L × C] → [B × O × C]`.
    pub fn target_projection(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l, c) = (s[0], s[1], s[2]);
        let tokens = g.transpose(x)?;
        let flat = g.reshape(tokens, &[b * c, l])?;
        let z = self.target_projection.apply(g, bound, flat)?;
        let o = g.shape(z)[1];
        let z = g.reshape(z, &[b, c, o])?;
        g.transpose(z)
    }

    /// `history[B × L × C]` and `base[B × O × C]` in the fusion frame.
    /// Returns `base + Projection(T^N)`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, history: Var, base: Var) -> Result<CteOutput> {
        let sb = g.shape(base).to_vec();
        if sb.len() != 3 || sb[2] != self.n_vars {
            return Err(Error::Contract(format!(
                "CTE expects a [B × O × {}] base, got {sb:?}",
                self.n_vars
            )));
        }
        let z_proj = self.target_projection(g, bound, history)?;
        let t0 = g.add(z_proj, base)?;
        let mut t = g.transpose(t0)?;
        let mut channels = vec![g.shape(t)[1]];
        for (n, ids) in self.layers.iter().enumerate() {
            let cat = cross_time_block(g, bound, ids, t, self.activation)?;
            t = fds(g, bound, ids, cat)?;
            let got = g.shape(t).to_vec();
            let want = self.channels_at(n + 1);
            if got[1] != want || got[2] != sb[1] {
                return Err(Error::Contract(format!(
                    "CTE layer {n} produced {got:?}, expected [{} × {want} × {}]",
                    sb[0], sb[1]
                )));
            }
            channels.push(got[1]);
        }
        let proj = g.pointwise_conv(t, bound[self.out_weight], bound[self.out_bias])?;
        let proj = g.transpose(proj)?;
        let fused = g.add(base, proj)?;
        Ok(CteOutput { fused, channels })
    }
}
