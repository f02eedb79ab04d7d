//! Minibatch Adam with per-epoch learning-rate decay and early stopping,
//! plus ensembles, k-fold cross-validation and random search on top.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{kfold_split, Preprocessor};
use crate::ensemble::LossBreakdown;
use crate::error::{NamError, Result};
use crate::model::{NamModel, Penalties};
use crate::multitask::{MultitaskNam, ParamGenModel};
use crate::tensor::{derive_seed, Matrix, Parameters, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Output penalty weight.
    pub output_penalty: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub feature_dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            output_penalty: 0.0,
            weight_decay: 0.0,
            dropout: 0.0,
            feature_dropout: 0.0,
            batch_size: 1024,
            max_epochs: 1000,
            lr_decay: 0.995,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NamError::Config(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        for (name, v) in [
            ("output_penalty", self.output_penalty),
            ("weight_decay", self.weight_decay),
            ("dropout", self.dropout),
            ("feature_dropout", self.feature_dropout),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NamError::Config(format!("{name} must be >= 0")));
            }
        }
        if self.dropout >= 1.0 || self.feature_dropout >= 1.0 {
            return bad("dropout rates must be < 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be >= 1");
        }
        Ok(())
    }

    /// Parses `key = value` lines; missing keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| NamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    #[inline]
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn penalties(&self) -> Penalties {
        Penalties {
            output_penalty: self.output_penalty,
            weight_decay: self.weight_decay,
            feature_dropout: self.feature_dropout,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(NamError::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NamError::Numeric(format!(
            "non-finite gradient {} at parameter {i} (step {})",
            grads[i], state.t
        )));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Rows of features with targets and optional per-target mask / treatments.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Matrix,
    /// `[B x T]`.
    pub y: Matrix,
    pub mask: Option<Matrix>,
    pub treatments: Option<Matrix>,
}

impl Samples {
    pub fn new(x: Matrix, y: &[f64]) -> Result<Self> {
        Self::multi(x, Matrix::column_vector(y), None)
    }

    pub fn multi(x: Matrix, y: Matrix, mask: Option<Matrix>) -> Result<Self> {
        if y.rows() != x.rows() {
            return Err(NamError::Dimension(format!(
                "{} feature rows but {} target rows",
                x.rows(),
                y.rows()
            )));
        }
        if let Some(m) = &mask {
            if m.shape() != y.shape() {
                return Err(NamError::Dimension("mask shape differs from targets".into()));
            }
        }
        Ok(Self {
            x,
            y,
            mask,
            treatments: None,
        })
    }

    pub fn with_treatments(mut self, d: Matrix) -> Result<Self> {
        if d.rows() != self.x.rows() {
            return Err(NamError::Dimension("treatment rows differ from feature rows".into()));
        }
        self.treatments = Some(d);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn targets(&self) -> Vec<f64> {
        self.y.column(0)
    }

    pub fn select(&self, rows: &[usize]) -> Samples {
        Samples {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            mask: self.mask.as_ref().map(|m| m.select_rows(rows)),
            treatments: self.treatments.as_ref().map(|d| d.select_rows(rows)),
        }
    }

    /// Applies `f` to the feature matrix, keeping everything else.
    pub fn map_x(&self, f: impl FnOnce(&Matrix) -> Result<Matrix>) -> Result<Samples> {
        Ok(Samples {
            x: f(&self.x)?,
            ..self.clone()
        })
    }
}

/// A model the trainer can optimize.
pub trait Trainable: Parameters + Clone + Send + Sync {
    /// Training-mode loss and the gradient in `Parameters` order.
    fn loss_and_grad(&self, batch: &Samples, pen: &Penalties, rng: &mut Rng) -> Result<(LossBreakdown, Vec<f64>)>;

    fn eval_loss(&self, data: &Samples, pen: &Penalties) -> Result<LossBreakdown>;

    fn set_dropout(&mut self, _rate: f64) {}

    fn center(&mut self, _x_train: &Matrix) -> Result<()> {
        Ok(())
    }
}

impl Trainable for NamModel {
    fn loss_and_grad(&self, batch: &Samples, pen: &Penalties, rng: &mut Rng) -> Result<(LossBreakdown, Vec<f64>)> {
        let (l, g) = NamModel::loss_and_grad(self, &batch.x, &batch.targets(), pen, rng)?;
        Ok((l, g.flatten()))
    }

    fn eval_loss(&self, data: &Samples, pen: &Penalties) -> Result<LossBreakdown> {
        NamModel::eval_loss(self, &data.x, &data.targets(), pen)
    }

    fn set_dropout(&mut self, rate: f64) {
        NamModel::set_dropout(self, rate)
    }

    fn center(&mut self, x_train: &Matrix) -> Result<()> {
        NamModel::center(self, x_train)
    }
}

impl Trainable for MultitaskNam {
    fn loss_and_grad(&self, batch: &Samples, pen: &Penalties, rng: &mut Rng) -> Result<(LossBreakdown, Vec<f64>)> {
        let (l, g) = MultitaskNam::loss_and_grad(self, &batch.x, &batch.y, batch.mask.as_ref(), pen, rng)?;
        Ok((l, g.flatten()))
    }

    fn eval_loss(&self, data: &Samples, pen: &Penalties) -> Result<LossBreakdown> {
        MultitaskNam::eval_loss(self, &data.x, &data.y, data.mask.as_ref(), pen)
    }

    fn set_dropout(&mut self, rate: f64) {
        MultitaskNam::set_dropout(self, rate)
    }

    fn center(&mut self, x_train: &Matrix) -> Result<()> {
        MultitaskNam::center(self, x_train)
    }
}

fn treatments_of(s: &Samples) -> Result<&Matrix> {
    s.treatments
        .as_ref()
        .ok_or_else(|| NamError::Usage("treatment indicators are required".into()))
}

impl Trainable for ParamGenModel {
    fn loss_and_grad(&self, batch: &Samples, pen: &Penalties, rng: &mut Rng) -> Result<(LossBreakdown, Vec<f64>)> {
        let d = treatments_of(batch)?;
        let (l, g) = ParamGenModel::loss_and_grad(self, &batch.x, &batch.targets(), d, pen, rng)?;
        Ok((l, g.flatten()))
    }

    fn eval_loss(&self, data: &Samples, pen: &Penalties) -> Result<LossBreakdown> {
        ParamGenModel::eval_loss(self, &data.x, &data.targets(), treatments_of(data)?, pen)
    }

    fn set_dropout(&mut self, rate: f64) {
        self.base.set_dropout(rate)
    }

    fn center(&mut self, x_train: &Matrix) -> Result<()> {
        self.base.center(x_train)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch task loss per epoch (training mode).
    pub train_losses: Vec<f64>,
    /// Validation task loss per epoch (eval mode). Empty without a validation set.
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Eval-mode task loss on the full training set for the returned parameters.
    pub final_train_loss: f64,
}

/// Trains `model` in place. With a validation set the parameters of the
/// best validation epoch are restored; without one the last epoch is kept.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &Samples,
    val_set: Option<&Samples>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_callback(model, train_set, val_set, cfg, |_, _, _| false)
}

/// As [`train`], calling `on_epoch(epoch, &model, &report_so_far)` after
/// each epoch. Returning true ends training after that epoch.
pub fn train_with_callback<M, F>(
    model: &mut M,
    train_set: &Samples,
    val_set: Option<&Samples>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    M: Trainable,
    F: FnMut(usize, &M, &TrainReport) -> bool,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NamError::Usage("training set is empty".into()));
    }
    if val_set.is_some_and(|v| v.is_empty()) {
        return Err(NamError::Usage("validation set is empty".into()));
    }
    let pen = cfg.penalties();
    model.set_dropout(cfg.dropout);
    let mut rng = Rng::new(cfg.seed);
    let mut params = model.flatten();
    let mut adam = AdamState::new(params.len());
    let mut report = TrainReport::default();
    let mut best_params: Option<Vec<f64>> = None;
    let n = train_set.len();

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let order = rng.permutation(n);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.select(chunk);
            let (loss, grads) = model.loss_and_grad(&batch, &pen, &mut rng)?;
            if !loss.total.is_finite() {
                return Err(NamError::Numeric(format!(
                    "loss became {} at epoch {epoch}",
                    loss.total
                )));
            }
            adam_step(&mut params, &grads, &mut adam, lr)?;
            model.set_flat(&params);
            epoch_loss += loss.task_loss * chunk.len() as f64;
        }
        report.train_losses.push(epoch_loss / n as f64);
        report.epochs_run = epoch + 1;

        if let Some(val) = val_set {
            let vl = model.eval_loss(val, &pen)?.task_loss;
            if !vl.is_finite() {
                return Err(NamError::Numeric(format!("validation loss became {vl} at epoch {epoch}")));
            }
            report.val_losses.push(vl);
            if report.best_val_loss.is_none_or(|b| vl < b) {
                report.best_val_loss = Some(vl);
                report.best_epoch = epoch;
                best_params = Some(params.clone());
            }
            let halt = on_epoch(epoch, model, &report);
            if halt || epoch - report.best_epoch >= cfg.patience {
                report.stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        } else {
            report.best_epoch = epoch;
            if on_epoch(epoch, model, &report) {
                report.stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }
    if let Some(best) = best_params {
        model.set_flat(&best);
    }
    report.final_train_loss = model.eval_loss(train_set, &pen)?.task_loss;
    Ok(report)
}

/// Splits `0..n` into (train, val) with `val_fraction` of the rows held out.
pub fn split_indices(n: usize, val_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let perm = rng.permutation(n);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.clamp(usize::from(n > 1), n.saturating_sub(1));
    let (val, train) = perm.split_at(n_val);
    (train.to_vec(), val.to_vec())
}

/// Fraction of the non-test pool used for validation: 10% of the data
/// out of the 80% that is not held out for testing.
pub const ENSEMBLE_VAL_FRACTION: f64 = 0.125;

#[derive(Clone, Debug)]
pub struct Member<M> {
    pub model: M,
    pub report: TrainReport,
    pub seed: u64,
}

/// Trains `members` models, each on its own seeded train/val split of
/// `pool`, then centers each on its training rows.
///
/// `factory` builds an untrained model from the member's training rows.
pub fn train_ensemble<M, F>(pool: &Samples, cfg: &TrainConfig, members: usize, factory: F) -> Result<Vec<Member<M>>>
where
    M: Trainable,
    F: Fn(&Samples, &mut Rng) -> Result<M> + Sync,
{
    if members == 0 {
        return Err(NamError::Usage("members must be >= 1".into()));
    }
    cfg.validate()?;
    (0..members)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let mut split_rng = Rng::new(derive_seed(seed, 1));
            let (tr, va) = split_indices(pool.len(), ENSEMBLE_VAL_FRACTION, &mut split_rng);
            let train_rows = pool.select(&tr);
            let val_rows = pool.select(&va);
            let mut model = factory(&train_rows, &mut Rng::new(derive_seed(seed, 2)))?;
            let member_cfg = TrainConfig {
                seed: derive_seed(seed, 3),
                ..cfg.clone()
            };
            let val = (!val_rows.is_empty()).then_some(&val_rows);
            let report = train(&mut model, &train_rows, val, &member_cfg)?;
            model.center(&train_rows.x)?;
            Ok(Member { model, report, seed })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub fold_metrics: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
}

impl CvReport {
    pub fn from_metrics(fold_metrics: Vec<f64>) -> Self {
        let n = fold_metrics.len() as f64;
        let mean = fold_metrics.iter().sum::<f64>() / n;
        let std = if fold_metrics.len() > 1 {
            (fold_metrics.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            fold_metrics,
            mean,
            std,
        }
    }
}

/// K-fold cross-validation. Each fold is the test set once; features are
/// standardized with statistics from the remaining folds only, an ensemble
/// is trained on them and `metric(members, test)` is recorded.
pub fn cross_validate<M, F, G>(
    data: &Samples,
    cfg: &TrainConfig,
    folds: usize,
    members: usize,
    factory: F,
    metric: G,
) -> Result<CvReport>
where
    M: Trainable,
    F: Fn(&Samples, &mut Rng) -> Result<M> + Sync,
    G: Fn(&[M], &Samples) -> Result<f64>,
{
    if folds < 2 {
        return Err(NamError::Usage("cross-validation needs at least 2 folds".into()));
    }
    let parts = kfold_split(data.len(), folds, cfg.seed)?;
    let mut metrics = Vec::with_capacity(folds);
    for (f, test_idx) in parts.iter().enumerate() {
        let train_idx: Vec<usize> = parts
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, p)| p.iter().copied())
            .collect();
        let pool = data.select(&train_idx);
        let test = data.select(test_idx);
        let pre = Preprocessor::fit(&pool.x)?;
        let pool = pool.map_x(|x| pre.transform(x))?;
        let test = test.map_x(|x| pre.transform(x))?;
        let fold_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, 1000 + f as u64),
            ..cfg.clone()
        };
        let trained = train_ensemble(&pool, &fold_cfg, members, &factory)?;
        let models: Vec<M> = trained.into_iter().map(|m| m.model).collect();
        metrics.push(metric(&models, &test)?);
    }
    Ok(CvReport::from_metrics(metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr: (f64, f64),
    pub output_penalty: (f64, f64),
    pub weight_decay: (f64, f64),
    pub dropout: Vec<f64>,
    pub feature_dropout: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr: (1e-3, 1e-1),
            output_penalty: (1e-3, 1e-1),
            weight_decay: (1e-6, 1e-4),
            dropout: (0..19).map(|i| i as f64 * 0.05).collect(),
            feature_dropout: vec![0.0, 0.05, 0.1, 0.2],
        }
    }
}

fn log_uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    let v = (lo.ln() + rng.uniform() * (hi.ln() - lo.ln())).exp();
    // Guard the half-open upper end against rounding.
    if v >= hi {
        lo.max(hi - hi * f64::EPSILON)
    } else {
        v.max(lo)
    }
}

impl SearchSpace {
    pub fn sample(&self, base: &TrainConfig, rng: &mut Rng) -> TrainConfig {
        TrainConfig {
            lr: log_uniform(rng, self.lr),
            output_penalty: log_uniform(rng, self.output_penalty),
            weight_decay: log_uniform(rng, self.weight_decay),
            dropout: self.dropout[rng.below(self.dropout.len())],
            feature_dropout: self.feature_dropout[rng.below(self.feature_dropout.len())],
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub trials: Vec<(TrainConfig, f64)>,
    pub best: TrainConfig,
    pub best_score: f64,
}

/// Samples `budget` configurations and returns the one with the lowest
/// validation task loss after training on `train_set`.
pub fn random_search<M, F>(
    train_set: &Samples,
    val_set: &Samples,
    base: &TrainConfig,
    space: &SearchSpace,
    budget: usize,
    factory: F,
) -> Result<SearchReport>
where
    M: Trainable,
    F: Fn(&Samples, &mut Rng) -> Result<M> + Sync,
{
    if budget == 0 {
        return Err(NamError::Usage("search budget must be >= 1".into()));
    }
    let mut rng = Rng::new(derive_seed(base.seed, 77));
    let configs: Vec<TrainConfig> = (0..budget).map(|_| space.sample(base, &mut rng)).collect();
    let trials = configs
        .into_par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let mut model = factory(train_set, &mut Rng::new(derive_seed(base.seed, i as u64)))?;
            let r = train(&mut model, train_set, Some(val_set), &cfg)?;
            Ok((cfg, r.best_val_loss.unwrap_or(f64::INFINITY)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (best, best_score) = trials
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, s)| (c.clone(), *s))
        .expect("budget >= 1");
    Ok(SearchReport {
        trials,
        best,
        best_score,
    })
}
