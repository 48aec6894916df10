//! The assembled forecaster: a [`CveEncoder`] and a [`CteEncoder`] whose
//! parameters live in two disjoint groups.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::cte::{CteEncoder, CteFrame, CteOutput};
use crate::cve::{CveEncoder, CveOutput, Pass};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup};
use crate::revin::{self, revin_decode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub n_vars: usize,
    /// Transformer blocks in the CVE (M).
    pub cve_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub trend: bool,
    pub activation: Activation,
    /// CrossTimeBlock + FDS layers in the CTE (N).
    pub cte_layers: usize,
    /// Channels added by each CrossTimeBlock (r); half survive the FDS.
    pub growth: usize,
    pub kernel: usize,
    pub cte_frame: CteFrame,
    pub revin_eps: f64,
}

impl ModelConfig {
    pub fn new(lookback: usize, horizon: usize, n_vars: usize) -> Self {
        ModelConfig {
            lookback,
            horizon,
            n_vars,
            cve_layers: 2,
            heads: 8,
            d_ff: 4 * lookback,
            dropout: 0.1,
            trend: true,
            activation: Activation::Gelu,
            cte_layers: 2,
            growth: 8,
            kernel: 3,
            cte_frame: CteFrame::Normalized,
            revin_eps: revin::DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback < 2 || self.horizon == 0 || self.n_vars == 0 {
            return Err(Error::Config(format!(
                "lookback {} (>= 2), horizon {} and variables {} must be positive",
                self.lookback, self.horizon, self.n_vars
            )));
        }
        if self.heads == 0 || self.lookback % self.heads != 0 {
            return Err(Error::Config(format!(
                "lookback {} must be divisible by heads {}",
                self.lookback, self.heads
            )));
        }
        if self.growth == 0 || self.growth % 2 != 0 {
            return Err(Error::Config(format!("growth r = {} must be even", self.growth)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if self.d_ff == 0 || self.revin_eps <= 0.0 {
            return Err(Error::Config("d_ff and revin eps must be positive".into()));
        }
        Ok(())
    }

    /// Flat key-value form used by config snapshots and checkpoints.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let act = match self.activation {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        };
        [
            ("lookback", self.lookback.to_string()),
            ("horizon", self.horizon.to_string()),
            ("n_vars", self.n_vars.to_string()),
            ("cve_layers", self.cve_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("trend", self.trend.to_string()),
            ("activation", act.to_string()),
            ("cte_layers", self.cte_layers.to_string()),
            ("growth", self.growth.to_string()),
            ("kernel", self.kernel.to_string()),
            ("cte_frame", self.cte_frame.to_string()),
            ("revin_eps", format!("{:?}", self.revin_eps)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .ok_or_else(|| Error::Config(format!("missing key '{key}'")))?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for '{key}'")))
        }
        let activation = match kv.get("activation").map(String::as_str) {
            Some("gelu") => Activation::Gelu,
            Some("relu") => Activation::Relu,
            other => return Err(Error::Config(format!("bad activation {other:?}"))),
        };
        let cfg = ModelConfig {
            lookback: get(kv, "lookback")?,
            horizon: get(kv, "horizon")?,
            n_vars: get(kv, "n_vars")?,
            cve_layers: get(kv, "cve_layers")?,
            heads: get(kv, "heads")?,
            d_ff: get(kv, "d_ff")?,
            dropout: get(kv, "dropout")?,
            trend: get(kv, "trend")?,
            activation,
            cte_layers: get(kv, "cte_layers")?,
            growth: get(kv, "growth")?,
            kernel: get(kv, "kernel")?,
            cte_frame: kv
                .get("cte_frame")
                .ok_or_else(|| Error::Config("missing key 'cte_frame'".into()))?
                .parse()?,
            revin_eps: get(kv, "revin_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Handles produced by a full forward pass.
#[derive(Clone, Debug)]
pub struct FullForward {
    pub cve_bound: Bound,
    pub cte_bound: Bound,
    pub cve: CveOutput,
    pub cte: CteOutput,
    /// Final prediction `[B × O × C]`.
    pub y: Var,
}

/// Plain-tensor predictions of both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub z_cve: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Debug)]
pub struct CvtnModel {
    config: ModelConfig,
    cve: CveEncoder,
    cte: CteEncoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Cve,
    Cte,
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [l, c] => x.reshape([1, l, c]),
        [_, _, _] => Ok(x.clone()),
        _ => Err(Error::Contract(format!("expected [L×C] or [B×L×C], got {:?}", x.shape()))),
    }
}

impl CvtnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cve = CveEncoder::new(&config, &mut rng)?;
        let cte = CteEncoder::new(&config, &mut rng)?;
        Ok(CvtnModel { config, cve, cte })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn cve(&self) -> &CveEncoder {
        &self.cve
    }

    pub fn cte(&self) -> &CteEncoder {
        &self.cte
    }

    pub fn group(&self, group: Group) -> &ParamGroup {
        match group {
            Group::Cve => self.cve.params(),
            Group::Cte => self.cte.params(),
        }
    }

    pub fn group_mut(&mut self, group: Group) -> &mut ParamGroup {
        match group {
            Group::Cve => self.cve.params_mut(),
            Group::Cte => self.cte.params_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.cve.params().num_scalars() + self.cte.params().num_scalars()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.config.lookback || s[2] != self.config.n_vars {
            return Err(Error::Contract(format!(
                "model expects [B × {} × {}] input, got {s:?}",
                self.config.lookback, self.config.n_vars
            )));
        }
        Ok(())
    }

    /// CVE only. Returns the binding and the CVE outputs.
    pub fn forward_cve(
        &self,
        g: &mut Graph,
        x: &Tensor,
        trainable: bool,
        pass: &mut Pass<'_>,
    ) -> Result<(Bound, CveOutput)> {
        self.check_input(x)?;
        let bound = self.cve.params().bind(g, trainable);
        let xv = g.constant(x.clone());
        let out = self.cve.forward(g, &bound, xv, pass)?;
        Ok((bound, out))
    }

    /// Both encoders; the CVE always runs in inference mode.
    pub fn forward_full(&self, g: &mut Graph, x: &Tensor, cve_trainable: bool, cte_trainable: bool) -> Result<FullForward> {
        self.check_input(x)?;
        let cve_bound = self.cve.params().bind(g, cve_trainable);
        let xv = g.constant(x.clone());
        let cve = self.cve.forward(g, &cve_bound, xv, &mut Pass::eval())?;
        let cte_bound = self.cte.params().bind(g, cte_trainable);
        let (cte, y) = match self.cte.frame() {
            CteFrame::Normalized => {
                let cte = self.cte.forward(g, &cte_bound, cve.x_enc, cve.z_norm)?;
                let y = revin_decode(g, cte.fused, &cve.revin)?;
                (cte, y)
            }
            CteFrame::Raw => {
                let cte = self.cte.forward(g, &cte_bound, xv, cve.z_cve)?;
                let y = cte.fused;
                (cte, y)
            }
        };
        Ok(FullForward {
            cve_bound,
            cte_bound,
            cve,
            cte,
            y,
        })
    }

    /// Inference on `[L × C]` or `[B × L × C]`; outputs keep the input rank.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let xb = as_batch(x)?;
        let mut g = Graph::new();
        let f = self.forward_full(&mut g, &xb, false, false)?;
        let (mut z, mut y) = (g.value(f.cve.z_cve).clone(), g.value(f.y).clone());
        if x.rank() == 2 {
            let shape = [self.config.horizon, self.config.n_vars];
            z = z.reshape(shape)?;
            y = y.reshape(shape)?;
        }
        Ok(Prediction { z_cve: z, y })
    }

    /// CVE-only inference.
    pub fn predict_cve(&self, x: &Tensor) -> Result<Tensor> {
        let xb = as_batch(x)?;
        let mut g = Graph::new();
        let (_, out) = self.forward_cve(&mut g, &xb, false, &mut Pass::eval())?;
        let z = g.value(out.z_cve).clone();
        if x.rank() == 2 {
            return z.reshape([self.config.horizon, self.config.n_vars]);
        }
        Ok(z)
    }
}
