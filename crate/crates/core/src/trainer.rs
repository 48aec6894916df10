//! Two-stage optimization.
//!
//! Stage 1 fits the CVE group against the targets while the CTE group sits on
//! the graph as constants (it is not even evaluated). Stage 2 binds the CVE as
//! constants in inference mode and fits the CTE group on the final output.
//! Each stage keeps the best validation parameters it has seen, starting with
//! the parameters it was handed.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::cve::Pass;
use crate::data::{mask_history_rows, MaskMode, WindowSet};
use crate::error::{Error, Result};
use crate::model::{CvtnModel, Group};
use crate::params::ParamGroup;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers of one parameter group.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub hyper: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(group: &ParamGroup, hyper: AdamConfig) -> Self {
        let zeros = || group.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        OptimizerState {
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
/// Weight decay, when non-zero, is added to the gradient (L2 form).
pub fn adam_step(params: &mut ParamGroup, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.tensors().iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let buffers = state.m.iter_mut().zip(state.v.iter_mut());
    for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(buffers) {
        let (p, g) = (p.data_mut(), g.data());
        for i in 0..p.len() {
            let gi = g[i] + weight_decay * p[i];
            let mi = &mut m.data_mut()[i];
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = m.data()[i] / c1;
            let v_hat = v.data()[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn check_pair(pred: &Tensor, truth: &Tensor, op: &'static str) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(op, pred.shape(), truth.shape()));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair(pred, truth, "mse")?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

/// Mean absolute error over every element.
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair(pred, truth, "mae")?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation losses.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Starts from a known loss, recorded as epoch 0.
    pub fn with_baseline(patience: usize, loss: f64) -> Self {
        EarlyStopping {
            best: loss,
            ..Self::new(patience)
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Evaluate the test split after every epoch.
    pub track_test: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 10,
            epochs_stage2: 10,
            patience: 3,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            track_test: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("batch size and patience must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config(format!("bad optimizer settings {:?}", self.adam)));
        }
        Ok(())
    }
}

/// Windows visible to the trainer.
#[derive(Clone, Copy, Debug)]
pub struct StageData<'a> {
    pub train: WindowSet<'a>,
    pub val: WindowSet<'a>,
    pub test: Option<WindowSet<'a>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLosses {
    /// 1-based.
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
    pub test: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub epochs: Vec<EpochLosses>,
    /// Validation loss of the parameters the stage started from.
    pub initial_val: f64,
    pub best_val: f64,
    /// 0 when no epoch beat the starting parameters.
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub early_stopped: bool,
    /// SHA-256 of the restored parameter group.
    pub best_checkpoint: String,
    pub seconds: f64,
}

impl StageReport {
    /// Best validation loss among trained epochs only.
    pub fn best_trained_val(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val).min_by(f64::total_cmp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage1: StageReport,
    pub stage2: StageReport,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub mask_fraction: f64,
    pub mask_mode: MaskMode,
    /// Window `i` is masked with seed `mask_seed + origin_i`.
    pub mask_seed: u64,
    /// Score `Z_CVE` instead of the final output.
    pub cve_only: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mask_fraction: 0.0,
            mask_mode: MaskMode::Random,
            mask_seed: 0,
            cve_only: false,
            batch_size: 64,
        }
    }
}

/// Deterministic inference over every window, no dropout, no shuffling.
pub fn evaluate(model: &CvtnModel, windows: &WindowSet<'_>, opts: &EvalOptions) -> Result<Metrics> {
    let n = windows.len();
    if n == 0 {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let step = opts.batch_size.max(1);
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(step) {
        let (mut x, y) = windows.batch(chunk);
        if opts.mask_fraction > 0.0 {
            let per = windows.lookback() * windows.n_vars();
            for (k, &i) in chunk.iter().enumerate() {
                let seed = opts.mask_seed.wrapping_add(windows.origin(i) as u64);
                let rows = &mut x.data_mut()[k * per..(k + 1) * per];
                mask_history_rows(rows, windows.n_vars(), opts.mask_fraction, seed, opts.mask_mode);
            }
        }
        let pred = if opts.cve_only {
            model.predict_cve(&x)?
        } else {
            model.predict(&x)?.y
        };
        for (a, b) in pred.data().iter().zip(y.data()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        count += y.numel();
    }
    Ok(Metrics {
        mse: se / count as f64,
        mae: ae / count as f64,
    })
}

fn stage_rng(seed: u64, stage: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// One pass over the shuffled training windows, updating only `group`.
/// Returns the mean batch loss.
pub fn train_epoch(
    model: &mut CvtnModel,
    group: Group,
    train: &WindowSet<'_>,
    batch_size: usize,
    opt: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let stage = match group {
        Group::Cve => 1,
        Group::Cte => 2,
    };
    let dropout = model.config().dropout;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for (b, chunk) in order.chunks(batch_size.max(1)).enumerate() {
        let (x, y) = train.batch(chunk);
        let non_finite = Error::NonFiniteLoss {
            stage,
            epoch,
            batch: b,
            lr: opt.hyper.lr,
        };
        let mut g = Graph::new();
        let forward = match group {
            Group::Cve => model
                .forward_cve(&mut g, &x, true, &mut Pass::train(dropout, rng))
                .map(|(bound, out)| (bound, out.z_cve)),
            Group::Cte => model.forward_full(&mut g, &x, false, true).map(|f| (f.cte_bound, f.y)),
        };
        let (bound, pred) = match forward {
            Err(Error::Numeric(msg)) => {
                log::error!("{msg}");
                return Err(non_finite);
            }
            other => other?,
        };
        let loss = g.mse_loss(pred, &y)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(non_finite);
        }
        g.backward(loss)?;
        let grads = model.group(group).grads(&g, &bound)?;
        adam_step(model.group_mut(group), &grads, opt)?;
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn run_stage(model: &mut CvtnModel, group: Group, data: &StageData<'_>, cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    let (stage, max_epochs) = match group {
        Group::Cve => (1u8, cfg.epochs_stage1),
        Group::Cte => (2u8, cfg.epochs_stage2),
    };
    let start = Instant::now();
    let val_opts = EvalOptions {
        cve_only: group == Group::Cve,
        ..EvalOptions::default()
    };
    let initial_val = evaluate(model, &data.val, &val_opts)?.mse;
    let mut stopper = EarlyStopping::with_baseline(cfg.patience, initial_val);
    let mut best = model.group(group).clone();
    let mut opt = OptimizerState::new(model.group(group), cfg.adam);
    let mut rng = stage_rng(cfg.seed, stage);
    let mut epochs = Vec::with_capacity(max_epochs);
    let mut early_stopped = false;

    for epoch in 1..=max_epochs {
        let train = train_epoch(model, group, &data.train, cfg.batch_size, &mut opt, &mut rng, epoch)?;
        let val = evaluate(model, &data.val, &val_opts)?.mse;
        let test = match (&data.test, cfg.track_test) {
            (Some(t), true) => Some(evaluate(model, t, &val_opts)?.mse),
            _ => None,
        };
        log::info!("stage {stage} epoch {epoch}: train {train:.6} val {val:.6}");
        epochs.push(EpochLosses { epoch, train, val, test });
        match stopper.observe(epoch, val) {
            StopDecision::Improved => best.clone_from(model.group(group)),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                early_stopped = epoch < max_epochs;
                break;
            }
        }
    }
    model.group_mut(group).load_from(&best)?;
    Ok(StageReport {
        stage,
        stop_epoch: epochs.len(),
        epochs,
        initial_val,
        best_val: stopper.best(),
        best_epoch: stopper.best_epoch(),
        early_stopped,
        best_checkpoint: best.sha256(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Fits the CVE group; the CTE group is left untouched.
pub fn train_stage1(model: &mut CvtnModel, data: &StageData<'_>, cfg: &TrainConfig) -> Result<StageReport> {
    run_stage(model, Group::Cve, data, cfg)
}

/// Fits the CTE group against the final output with the CVE frozen.
pub fn train_stage2(model: &mut CvtnModel, data: &StageData<'_>, cfg: &TrainConfig) -> Result<StageReport> {
    run_stage(model, Group::Cte, data, cfg)
}

/// Stage 1 followed by stage 2.
pub fn train(model: &mut CvtnModel, data: &StageData<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    let stage1 = train_stage1(model, data, cfg)?;
    let stage2 = train_stage2(model, data, cfg)?;
    Ok(TrainReport { stage1, stage2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let z = Tensor::zeros([2]);
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        let d = Tensor::from_vec([2], vec![1.0, -1.0]);
        assert_eq!((mse(&d, &z).unwrap(), mae(&d, &z).unwrap()), (1.0, 1.0));
        let d = Tensor::from_vec([4], vec![3.0, 0.0, 0.0, 0.0]);
        let z = Tensor::zeros([4]);
        assert_eq!((mse(&d, &z).unwrap(), mae(&d, &z).unwrap()), (2.25, 0.75));
        assert!(mse(&d, &Tensor::zeros([2, 2])).is_err());
    }

    #[test]
    fn patience_example() {
        let mut s = EarlyStopping::new(3);
        let vals = [0.5, 0.4, 0.41, 0.42, 0.43];
        let decisions: Vec<_> = vals.iter().enumerate().map(|(i, &v)| s.observe(i + 1, v)).collect();
        assert_eq!(
            decisions,
            [
                StopDecision::Improved,
                StopDecision::Improved,
                StopDecision::Continue,
                StopDecision::Continue,
                StopDecision::Stop
            ]
        );
        assert_eq!(s.best_epoch(), 2);
        assert_eq!(s.best(), 0.4);
    }

    fn scalar_group(x: f64) -> ParamGroup {
        let mut g = ParamGroup::new();
        g.add("x", Tensor::from_vec([1], vec![x]));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_group(0.7);
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros([1])], &mut s).unwrap();
        }
        assert_eq!(p.tensors()[0].data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_group(0.0);
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Tensor::full([1], 1.0)], &mut s).unwrap();
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let grad = |x: f64, t: usize| 2.0 * (x - 3.0) + (t as f64 * 0.7).sin();
        let (mut x, mut m, mut v) = (0.5_f64, 0.0_f64, 0.0_f64);
        let mut p = scalar_group(0.5);
        let mut s = OptimizerState::new(&p, AdamConfig { lr, ..AdamConfig::default() });
        for t in 1..=20 {
            let g = grad(x, t);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);

            let cur = p.tensors()[0].data()[0];
            adam_step(&mut p, &[Tensor::full([1], grad(cur, t))], &mut s).unwrap();
            assert!((p.tensors()[0].data()[0] - x).abs() < 1e-12, "step {t}");
        }
        assert_eq!(s.steps(), 20);
    }

    #[test]
    fn adam_rejects_mismatched_gradients() {
        let mut p = scalar_group(0.0);
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &[Tensor::zeros([2])], &mut s).is_err());
        assert!(adam_step(&mut p, &[], &mut s).is_err());
    }
}
