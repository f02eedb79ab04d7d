//! End-to-end runs on the synthetic datasets.

use serde::{Deserialize, Serialize};

use crate::datasets::{gen_multitask_synthetic, MultitaskSynthConfig, ToyJump};
use crate::ensemble::Link;
use crate::error::Result;
use crate::feature_net::FeatureNetConfig;
use crate::metrics::mse;
use crate::model::{FeatureMeta, NamModel};
use crate::multitask::MultitaskNam;
use crate::tensor::{derive_seed, Matrix, Rng};
use crate::trainer::{split_indices, train, train_with_callback, Samples, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyFit {
    pub entropy_floor: f64,
    /// Eval-mode training cross-entropy of the final parameters.
    pub train_ce: f64,
    pub epochs: usize,
}

/// Fits a one-feature model to the toy jump data with no held-out set.
/// With `stop_gap`, the eval-mode training loss is checked every
/// `check_every` epochs and training ends once it is within the gap.
pub fn fit_toy_jump(
    toy: &ToyJump,
    net: &FeatureNetConfig,
    cfg: &TrainConfig,
    stop_gap: Option<f64>,
    check_every: usize,
) -> Result<ToyFit> {
    let data = toy.data.to_samples()?;
    let floor = toy.entropy_floor();
    let meta = FeatureMeta::new(vec!["x".into()], vec![(-1.0, 1.0)])?;
    let mut model = NamModel::build(net, meta, Link::Logistic, &mut Rng::new(derive_seed(cfg.seed, 1)))?;
    let pen = cfg.penalties();
    let report = train_with_callback(&mut model, &data, None, cfg, |epoch, m, _| {
        let Some(gap) = stop_gap else { return false };
        if (epoch + 1) % check_every.max(1) != 0 {
            return false;
        }
        m.eval_loss(&data.x, &data.targets(), &pen)
            .map(|l| l.task_loss - floor < gap)
            .unwrap_or(false)
    })?;
    Ok(ToyFit {
        entropy_floor: floor,
        train_ce: report.final_train_loss,
        epochs: report.epochs_run,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultitaskSetup {
    pub synth: MultitaskSynthConfig,
    pub net: FeatureNetConfig,
    pub subnets: usize,
    pub train: TrainConfig,
    /// Share of the training rows held out for early stopping.
    pub val_fraction: f64,
}

impl Default for MultitaskSetup {
    fn default() -> Self {
        Self {
            synth: MultitaskSynthConfig::default(),
            net: FeatureNetConfig::standard(vec![64, 64, 32]),
            subnets: 6,
            train: TrainConfig::default(),
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultitaskTrial {
    /// Test MSE per task for six independent single-task models.
    pub stl: Vec<f64>,
    /// Test MSE per task for one multitask model.
    pub mtl: Vec<f64>,
    pub stl_epochs: Vec<usize>,
    pub mtl_epochs: usize,
}

impl MultitaskTrial {
    pub fn stl_mean(&self) -> f64 {
        self.stl.iter().sum::<f64>() / self.stl.len() as f64
    }

    pub fn mtl_mean(&self) -> f64 {
        self.mtl.iter().sum::<f64>() / self.mtl.len() as f64
    }
}

/// One trial: fresh data, six single-task models and one multitask model
/// trained on the same rows, compared by test MSE per task.
pub fn multitask_trial(setup: &MultitaskSetup, seed: u64) -> Result<MultitaskTrial> {
    let (train_split, test_split) = gen_multitask_synthetic(&setup.synth, seed);
    let all = train_split.data.to_samples()?;
    let test = test_split.data.to_samples()?;
    let (tr, va) = split_indices(all.len(), setup.val_fraction, &mut Rng::new(derive_seed(seed, 1)));
    let train_rows = all.select(&tr);
    let val_rows = all.select(&va);
    let meta = FeatureMeta::new(
        train_split.data.feature_names.clone(),
        vec![setup.synth.input_range; 3],
    )?;
    let tasks = all.y.cols();

    let column = |s: &Samples, t: usize| Samples::new(s.x.clone(), &s.y.column(t));
    let mut stl = Vec::with_capacity(tasks);
    let mut stl_epochs = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let tr_t = column(&train_rows, t)?;
        let va_t = column(&val_rows, t)?;
        let mut m = NamModel::build(&setup.net, meta.clone(), Link::Identity, &mut Rng::new(derive_seed(seed, 10 + t as u64)))?;
        let cfg = TrainConfig {
            seed: derive_seed(seed, 20 + t as u64),
            ..setup.train.clone()
        };
        let r = train(&mut m, &tr_t, Some(&va_t), &cfg)?;
        stl.push(mse(&m.logits(&test.x)?, &test.y.column(t))?);
        stl_epochs.push(r.epochs_run);
    }

    let mut mt = MultitaskNam::build(
        &setup.net,
        meta,
        setup.subnets,
        vec![Link::Identity; tasks],
        &mut Rng::new(derive_seed(seed, 30)),
    )?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, 31),
        ..setup.train.clone()
    };
    let r = train(&mut mt, &train_rows, Some(&val_rows), &cfg)?;
    let pred = mt.logits(&test.x)?;
    let mtl = (0..tasks)
        .map(|t| mse(&pred.column(t), &test.y.column(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultitaskTrial {
        stl,
        mtl,
        stl_epochs,
        mtl_epochs: r.epochs_run,
    })
}

/// Brute-force best additive fit `a(x1) + b(x2)` of `target` on a
/// `grid x grid` lattice: the two-way ANOVA main effects.
pub fn best_additive_mse(grid: &[f64], target: impl Fn(f64, f64) -> f64) -> f64 {
    let n = grid.len();
    let vals: Vec<Vec<f64>> = grid.iter().map(|&a| grid.iter().map(|&b| target(a, b)).collect()).collect();
    let total = vals.iter().flatten().sum::<f64>() / (n * n) as f64;
    let rows: Vec<f64> = vals.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let cols: Vec<f64> = (0..n).map(|j| vals.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut sse = 0.0;
    for i in 0..n {
        for j in 0..n {
            let fit = rows[i] + cols[j] - total;
            sse += (vals[i][j] - fit).powi(2);
        }
    }
    sse / (n * n) as f64
}

/// Rows of the `grid x grid` lattice as a `[n^2 x 2]` matrix.
pub fn lattice(grid: &[f64]) -> Matrix {
    let rows: Vec<Vec<f64>> = grid
        .iter()
        .flat_map(|&a| grid.iter().map(move |&b| vec![a, b]))
        .collect();
    Matrix::from_rows(&rows).expect("two columns per row")
}
