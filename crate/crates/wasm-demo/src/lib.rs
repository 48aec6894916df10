//! Browser bindings: a small forecaster trained in the page on the lagged
//! sinusoid benchmark, plus the CTE channel ledger.

use cvtn_core::data::{lagged_sinusoids, mask_history_rows, MaskMode, Split, SplitScheme, TimeSeriesDataset};
use cvtn_core::trainer::{evaluate, train_epoch, AdamConfig, EvalOptions, OptimizerState};
use cvtn_core::{CvtnModel, Group, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const LOOKBACK: usize = 48;
const HORIZON: usize = 24;

fn js(e: cvtn_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Channel count of every CTE layer, `T⁰` first, for `n_vars` variables,
/// growth `r` and `layers` layers.
#[wasm_bindgen]
pub fn channel_ledger(n_vars: usize, growth: usize, layers: usize) -> Result<Vec<u32>, JsError> {
    let cfg = ModelConfig {
        heads: 1,
        cve_layers: 0,
        growth,
        cte_layers: layers,
        ..ModelConfig::new(2, 1, n_vars)
    };
    let model = CvtnModel::new(cfg, 0).map_err(js)?;
    Ok((0..=layers).map(|n| model.cte().channels_at(n) as u32).collect())
}

#[wasm_bindgen]
pub struct Demo {
    data: TimeSeriesDataset,
    model: CvtnModel,
    cve_opt: OptimizerState,
    cte_opt: OptimizerState,
    rng: ChaCha8Rng,
    epochs: [usize; 2],
}

#[wasm_bindgen]
impl Demo {
    /// Builds the benchmark (`y₂` lags `y₁` by `lag` steps) and an untrained model.
    #[wasm_bindgen(constructor)]
    pub fn new(lag: usize, noise: f64, seed: u64) -> Result<Demo, JsError> {
        let data = lagged_sinusoids(900, lag, noise, seed)
            .split(SplitScheme::RATIO_DEFAULT)
            .and_then(|d| d.zscore())
            .map_err(js)?;
        let cfg = ModelConfig {
            heads: 4,
            d_ff: 2 * LOOKBACK,
            cve_layers: 1,
            ..ModelConfig::new(LOOKBACK, HORIZON, 2)
        };
        let model = CvtnModel::new(cfg, seed).map_err(js)?;
        let adam = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
        Ok(Demo {
            cve_opt: OptimizerState::new(model.group(Group::Cve), adam),
            cte_opt: OptimizerState::new(model.group(Group::Cte), adam),
            data,
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epochs: [0, 0],
        })
    }

    pub fn lookback(&self) -> usize {
        LOOKBACK
    }

    pub fn horizon(&self) -> usize {
        HORIZON
    }

    pub fn epochs(&self, stage: u8) -> usize {
        self.epochs[usize::from(stage == 2)]
    }

    pub fn val_windows(&self) -> Result<usize, JsError> {
        Ok(self.data.windows(LOOKBACK, HORIZON, Split::Val).map_err(js)?.len())
    }

    /// One epoch of stage 1 (`stage = 1`) or stage 2. Returns
    /// `[train_loss, val_loss]`.
    pub fn train_epoch(&mut self, stage: u8) -> Result<Vec<f64>, JsError> {
        let (group, opt, slot) = match stage {
            1 => (Group::Cve, &mut self.cve_opt, 0),
            2 => (Group::Cte, &mut self.cte_opt, 1),
            _ => return Err(JsError::new("stage must be 1 or 2")),
        };
        let train = self.data.windows(LOOKBACK, HORIZON, Split::Train).map_err(js)?;
        self.epochs[slot] += 1;
        let loss = train_epoch(&mut self.model, group, &train, 32, opt, &mut self.rng, self.epochs[slot]).map_err(js)?;
        let val = self.data.windows(LOOKBACK, HORIZON, Split::Val).map_err(js)?;
        let opts = EvalOptions {
            cve_only: group == Group::Cve,
            ..EvalOptions::default()
        };
        let v = evaluate(&self.model, &val, &opts).map_err(js)?;
        Ok(vec![loss, v.mse])
    }

    /// Forecast for validation window `index` with a fraction of its history
    /// zeroed. Returns `history[L×2] ++ target[O×2] ++ z_cve[O×2] ++ y[O×2]`,
    /// all row-major.
    pub fn forecast(&self, index: usize, mask_fraction: f64, mask_seed: u64) -> Result<Vec<f64>, JsError> {
        let val = self.data.windows(LOOKBACK, HORIZON, Split::Val).map_err(js)?;
        if index >= val.len() {
            return Err(JsError::new(&format!("window {index} out of {}", val.len())));
        }
        let w = val.get(index);
        let mut history = w.history.data().to_vec();
        mask_history_rows(&mut history, 2, mask_fraction, mask_seed, MaskMode::Random);
        let x = Tensor::new([LOOKBACK, 2], history.clone()).map_err(js)?;
        let p = self.model.predict(&x).map_err(js)?;
        let mut out = history;
        out.extend_from_slice(w.target.data());
        out.extend_from_slice(p.z_cve.data());
        out.extend_from_slice(p.y.data());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_grows_by_half_the_growth() {
        assert_eq!(channel_ledger(7, 8, 3).unwrap(), vec![7, 11, 15, 19]);
    }

    #[test]
    fn demo_trains_and_forecasts() {
        let mut d = Demo::new(6, 0.05, 1).unwrap();
        let first = d.train_epoch(1).unwrap();
        let second = d.train_epoch(1).unwrap();
        assert!(second[0] < first[0]);
        let r = d.train_epoch(2).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
        assert_eq!((d.epochs(1), d.epochs(2)), (2, 1));
        let f = d.forecast(0, 0.5, 3).unwrap();
        assert_eq!(f.len(), 2 * LOOKBACK + 3 * 2 * HORIZON);
        assert_eq!(f[..2 * LOOKBACK].iter().filter(|v| **v == 0.0).count(), 2 * LOOKBACK / 2);
    }
}
