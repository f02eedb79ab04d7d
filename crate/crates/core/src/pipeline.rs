//! Dataset-level fitting, evaluation and cross-validation, plus the
//! versioned model file shared by the command-line tool.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Preprocessor, TaskKind};
use crate::ensemble::{accumulate_mean, Link};
use crate::error::{NamError, Result};
use crate::feature_net::FeatureNetConfig;
use crate::metrics::{mse, pr_auc, rmse, roc_auc};
use crate::model::{FeatureMeta, NamModel};
use crate::multitask::{MultitaskNam, ParamGenModel};
use crate::tensor::{Matrix, Rng};
use crate::trainer::{cross_validate, train_ensemble, CvReport, Samples, TrainConfig, TrainReport, Trainable};

pub const MODEL_FORMAT: &str = "nam-model";
pub const MODEL_VERSION: u32 = 1;

/// Everything needed to refit a model from a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSpec {
    pub net: FeatureNetConfig,
    pub train: TrainConfig,
    pub members: usize,
    pub multitask: bool,
    pub subnets: usize,
    /// 0/1 treatment columns; non-empty selects the parameter-generation model.
    pub treatments: Vec<String>,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            net: FeatureNetConfig::default(),
            train: TrainConfig::default(),
            members: 1,
            multitask: false,
            subnets: 1,
            treatments: Vec::new(),
        }
    }
}

impl FitSpec {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if self.members == 0 {
            return Err(NamError::Usage("--members must be at least 1".into()));
        }
        if self.subnets == 0 {
            return Err(NamError::Usage("--subnets must be at least 1".into()));
        }
        if ds.num_targets() == 0 {
            return Err(NamError::Usage("at least one target column is required".into()));
        }
        if !self.treatments.is_empty() {
            if self.multitask {
                return Err(NamError::Usage("treatment columns cannot be combined with --multitask".into()));
            }
            if ds.num_targets() != 1 || ds.task != TaskKind::Classification {
                return Err(NamError::Usage(
                    "treatment models need exactly one binary classification target".into(),
                ));
            }
        } else if ds.num_targets() > 1 && !self.multitask {
            return Err(NamError::Usage("several targets require --multitask".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "members", rename_all = "lowercase")]
pub enum ModelBody {
    Nam(Vec<NamModel>),
    Multitask(Vec<MultitaskNam>),
    Paramgen(Vec<ParamGenModel>),
}

/// Standardized features and, for treatment models, the 0/1 indicators.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub x: Matrix,
    pub d: Option<Matrix>,
}

impl Inputs {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }
}

/// Per-row additive decomposition averaged over members:
/// `logit[b][t] = bias[b][t] + sum_k contrib[b][t][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Terms {
    /// `[B x T]`.
    pub bias: Matrix,
    /// `[b][t][k]` flattened.
    pub contrib: Vec<f64>,
    pub tasks: usize,
    pub features: usize,
}

impl Terms {
    pub fn contribution(&self, b: usize, t: usize, k: usize) -> f64 {
        self.contrib[(b * self.tasks + t) * self.features + k]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub task: TaskKind,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub preprocessor: Preprocessor,
    pub spec: FitSpec,
    pub body: ModelBody,
}

fn member_mean(parts: impl Iterator<Item = Result<Matrix>>) -> Result<Matrix> {
    let mut acc: Option<Matrix> = None;
    for (i, p) in parts.enumerate() {
        let p = p?;
        match acc.as_mut() {
            None => acc = Some(p),
            Some(a) => accumulate_mean(a.data_mut(), p.data(), i),
        }
    }
    acc.ok_or_else(|| NamError::Data("model file has no members".into()))
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelFile = serde_json::from_str(text)?;
        if m.format != MODEL_FORMAT {
            return Err(NamError::Data(format!("not a model file (format {:?})", m.format)));
        }
        if m.version != MODEL_VERSION {
            return Err(NamError::Data(format!(
                "unsupported model file version {} (expected {MODEL_VERSION})",
                m.version
            )));
        }
        if m.num_members() == 0 {
            return Err(NamError::Data("model file has no members".into()));
        }
        Ok(m)
    }

    /// Writes through a temporary file so a failed write leaves nothing behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NamError::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn num_members(&self) -> usize {
        match &self.body {
            ModelBody::Nam(m) => m.len(),
            ModelBody::Multitask(m) => m.len(),
            ModelBody::Paramgen(m) => m.len(),
        }
    }

    /// Number of predicted targets.
    pub fn num_tasks(&self) -> usize {
        self.target_names.len()
    }

    pub fn link(&self) -> Link {
        self.task.link()
    }

    pub fn treatment_names(&self) -> &[String] {
        &self.spec.treatments
    }

    pub fn is_centered(&self) -> bool {
        match &self.body {
            ModelBody::Nam(m) => m.iter().all(|m| m.centered),
            ModelBody::Multitask(m) => m.iter().all(|m| m.centered),
            ModelBody::Paramgen(m) => m.iter().all(|m| m.base.centered),
        }
    }

    /// Resolves a feature given by name or 0-based index.
    pub fn feature_index(&self, key: &str) -> Result<usize> {
        if let Some(i) = self.feature_names.iter().position(|n| n == key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.feature_names.len() => Ok(i),
            Ok(i) => Err(NamError::Index {
                index: i,
                len: self.feature_names.len(),
            }),
            Err(_) => Err(NamError::Usage(format!("unknown feature {key:?}"))),
        }
    }

    /// Pulls the model's columns out of `ds` (extra columns are ignored).
    pub fn inputs(&self, ds: &Dataset) -> Result<Inputs> {
        let mut ds = ds.clone();
        let d = if self.spec.treatments.is_empty() {
            None
        } else {
            Some(ds.take_features(&self.spec.treatments)?)
        };
        let raw = ds.take_features(&self.feature_names)?;
        Ok(Inputs {
            x: self.preprocessor.transform(&raw)?,
            d,
        })
    }

    /// One raw row: feature values in model order, then treatment indicators.
    pub fn inputs_from_row(&self, values: &[f64]) -> Result<Inputs> {
        let k = self.feature_names.len();
        let m = self.spec.treatments.len();
        if values.len() != k + m {
            return Err(NamError::Data(format!(
                "row has {} values, model expects {} features{}",
                values.len(),
                k,
                if m > 0 { format!(" and {m} treatment indicators") } else { String::new() }
            )));
        }
        let raw = Matrix::from_vec(1, k, values[..k].to_vec())?;
        Ok(Inputs {
            x: self.preprocessor.transform(&raw)?,
            d: (m > 0).then(|| Matrix::from_vec(1, m, values[k..].to_vec())).transpose()?,
        })
    }

    fn treatments<'a>(&self, inp: &'a Inputs) -> Result<&'a Matrix> {
        inp.d
            .as_ref()
            .ok_or_else(|| NamError::Usage("treatment indicators are required".into()))
    }

    /// Member-averaged logits `[B x T]`.
    pub fn logits(&self, inp: &Inputs) -> Result<Matrix> {
        match &self.body {
            ModelBody::Nam(ms) => member_mean(ms.iter().map(|m| Ok(Matrix::column_vector(&m.logits(&inp.x)?)))),
            ModelBody::Multitask(ms) => member_mean(ms.iter().map(|m| m.logits(&inp.x))),
            ModelBody::Paramgen(ms) => {
                let d = self.treatments(inp)?;
                member_mean(ms.iter().map(|m| Ok(Matrix::column_vector(&m.risk_logits(&inp.x, d)?))))
            }
        }
    }

    /// Logits with the link applied.
    pub fn predict(&self, inp: &Inputs) -> Result<Matrix> {
        let link = self.link();
        let mut out = self.logits(inp)?;
        out.data_mut().iter_mut().for_each(|v| *v = link.apply(*v));
        Ok(out)
    }

    /// Bias and per-feature contributions averaged over members.
    pub fn terms(&self, inp: &Inputs) -> Result<Terms> {
        let b = inp.rows();
        let k = self.feature_names.len();
        let eval = |m: &MultitaskNam| m.forward(&inp.x, false, &mut Rng::new(0), 0.0);
        let per_member: Vec<Result<(Matrix, Vec<f64>)>> = match &self.body {
            ModelBody::Nam(ms) => ms
                .iter()
                .map(|m| Ok((Matrix::filled(b, 1, m.bias), m.contributions(&inp.x)?.into_data())))
                .collect(),
            ModelBody::Multitask(ms) => ms
                .iter()
                .map(|m| {
                    let fwd = eval(m)?;
                    let t = m.num_tasks;
                    let bias: Vec<f64> = (0..b).flat_map(|_| m.task_bias.iter().copied()).collect();
                    Ok((Matrix::from_vec(b, t, bias)?, fwd.outputs))
                })
                .collect(),
            ModelBody::Paramgen(ms) => {
                let d = self.treatments(inp)?;
                ms.iter()
                    .map(|m| {
                        let fwd = eval(&m.base)?;
                        let heads = m.base.num_tasks;
                        let mut bias = Matrix::zeros(b, 1);
                        let mut contrib = vec![0.0; b * k];
                        for i in 0..b {
                            let mut z = m.base.task_bias[0];
                            for j in 0..k {
                                contrib[i * k + j] = fwd.outputs[i * heads * k + j];
                            }
                            for t in 0..m.treatments {
                                let dt = d.get(i, t);
                                z += dt * m.base.task_bias[1 + t];
                                for j in 0..k {
                                    contrib[i * k + j] += dt * fwd.outputs[(i * heads + 1 + t) * k + j];
                                }
                            }
                            bias.set(i, 0, z);
                        }
                        Ok((bias, contrib))
                    })
                    .collect()
            }
        };
        let mut bias: Option<Matrix> = None;
        let mut contrib: Vec<f64> = Vec::new();
        for (i, r) in per_member.into_iter().enumerate() {
            let (bm, cm) = r?;
            match bias.as_mut() {
                None => {
                    bias = Some(bm);
                    contrib = cm;
                }
                Some(acc) => {
                    accumulate_mean(acc.data_mut(), bm.data(), i);
                    accumulate_mean(&mut contrib, &cm, i);
                }
            }
        }
        let bias = bias.ok_or_else(|| NamError::Data("model file has no members".into()))?;
        Ok(Terms {
            tasks: bias.cols(),
            bias,
            contrib,
            features: k,
        })
    }

    /// Names of the exportable shape-function heads.
    pub fn shape_heads(&self) -> Vec<String> {
        match &self.body {
            ModelBody::Nam(_) | ModelBody::Multitask(_) => self.target_names.clone(),
            ModelBody::Paramgen(_) => std::iter::once("baseline".to_string())
                .chain(self.spec.treatments.iter().map(|t| format!("benefit_{t}")))
                .collect(),
        }
    }

    /// One curve per member over an even grid of standardized inputs.
    pub fn shape_curves(&self, k: usize, head: usize, grid: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let heads = self.shape_heads().len();
        if head >= heads {
            return Err(NamError::Index { index: head, len: heads });
        }
        let tables: Vec<Vec<(f64, f64)>> = match &self.body {
            ModelBody::Nam(ms) => ms.iter().map(|m| m.shape_table(k, grid)).collect::<Result<_>>()?,
            ModelBody::Multitask(ms) => ms.iter().map(|m| m.shape_table(k, head, grid)).collect::<Result<_>>()?,
            ModelBody::Paramgen(ms) => ms.iter().map(|m| m.base.shape_table(k, head, grid)).collect::<Result<_>>()?,
        };
        let xs = tables[0].iter().map(|p| p.0).collect();
        let curves = tables.iter().map(|t| t.iter().map(|p| p.1).collect()).collect();
        Ok((xs, curves))
    }

    pub fn zero_out_feature(&mut self, k: usize) -> Result<()> {
        match &mut self.body {
            ModelBody::Nam(ms) => ms.iter_mut().try_for_each(|m| m.zero_out_feature(k)),
            ModelBody::Multitask(ms) => ms.iter_mut().try_for_each(|m| m.zero_out_feature(k)),
            ModelBody::Paramgen(ms) => ms.iter_mut().try_for_each(|m| m.base.zero_out_feature(k)),
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| NamError::Usage(format!("invalid output path {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        NamError::Io(e)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub model: ModelFile,
    pub reports: Vec<TrainReport>,
}

fn fit_members<M, F>(samples: &Samples, x_full: &Matrix, spec: &FitSpec, factory: F) -> Result<(Vec<M>, Vec<TrainReport>)>
where
    M: Trainable,
    F: Fn(&Samples, &mut Rng) -> Result<M> + Sync,
{
    let trained = train_ensemble(samples, &spec.train, spec.members, factory)?;
    let mut models = Vec::with_capacity(trained.len());
    let mut reports = Vec::with_capacity(trained.len());
    for mut m in trained {
        // Re-center on every training row so ablation is unbiased on the full set.
        m.model.center(x_full)?;
        models.push(m.model);
        reports.push(m.report);
    }
    Ok((models, reports))
}

/// Standardizes features, trains `spec.members` members and centers them on
/// the full dataset.
pub fn fit(ds: &Dataset, spec: &FitSpec) -> Result<FitOutcome> {
    spec.validate(ds)?;
    let mut work = ds.clone();
    let d = if spec.treatments.is_empty() {
        None
    } else {
        Some(work.take_features(&spec.treatments)?)
    };
    if work.num_features() == 0 {
        return Err(NamError::Data("dataset has no feature columns".into()));
    }
    if work.rows() == 0 {
        return Err(NamError::Data("dataset has no rows".into()));
    }
    let raw = work.x();
    let pre = Preprocessor::fit(&raw)?;
    let xs = pre.transform(&raw)?;
    let mut samples = work.to_samples()?.map_x(|_| Ok(xs.clone()))?;
    if let Some(d) = d {
        samples = samples.with_treatments(d)?;
    }
    let meta = FeatureMeta::new(work.feature_names.clone(), FeatureMeta::from_data(&xs).ranges)?;
    let link = ds.task.link();
    let tasks = ds.num_targets();

    let (body, reports) = if !spec.treatments.is_empty() {
        let m = spec.treatments.len();
        let (ms, r) = fit_members(&samples, &xs, spec, |_, rng| {
            ParamGenModel::build(&spec.net, meta.clone(), spec.subnets, m, rng)
        })?;
        (ModelBody::Paramgen(ms), r)
    } else if spec.multitask {
        let (ms, r) = fit_members(&samples, &xs, spec, |_, rng| {
            MultitaskNam::build(&spec.net, meta.clone(), spec.subnets, vec![link; tasks], rng)
        })?;
        (ModelBody::Multitask(ms), r)
    } else {
        let (ms, r) = fit_members(&samples, &xs, spec, |_, rng| NamModel::build(&spec.net, meta.clone(), link, rng))?;
        (ModelBody::Nam(ms), r)
    };
    Ok(FitOutcome {
        model: ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            task: ds.task,
            feature_names: work.feature_names.clone(),
            target_names: ds.target_names.clone(),
            preprocessor: pre,
            spec: spec.clone(),
            body,
        },
        reports,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RocAuc,
    PrAuc,
    Rmse,
    Mse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::RocAuc => "roc_auc",
            Metric::PrAuc => "pr_auc",
            Metric::Rmse => "rmse",
            Metric::Mse => "mse",
        }
    }

    pub fn defaults(task: TaskKind) -> Vec<Metric> {
        match task {
            TaskKind::Classification => vec![Metric::RocAuc, Metric::PrAuc],
            TaskKind::Regression => vec![Metric::Rmse, Metric::Mse],
        }
    }

    pub fn check(self, task: TaskKind) -> Result<()> {
        if task == TaskKind::Regression && matches!(self, Metric::RocAuc | Metric::PrAuc) {
            return Err(NamError::Usage(format!("{} is undefined for a regression model", self.name())));
        }
        Ok(())
    }

    /// Scores logits against targets; error metrics use linked predictions.
    pub fn score(self, logits: &[f64], y: &[f64], link: Link) -> Result<f64> {
        match self {
            Metric::RocAuc => roc_auc(logits, y),
            Metric::PrAuc => pr_auc(logits, y),
            Metric::Rmse | Metric::Mse => {
                let pred: Vec<f64> = logits.iter().map(|z| link.apply(*z)).collect();
                if self == Metric::Rmse {
                    rmse(&pred, y)
                } else {
                    mse(&pred, y)
                }
            }
        }
    }

    /// Mean over tasks of the metric on each task's unmasked rows.
    pub fn score_tasks(self, logits: &Matrix, y: &Matrix, mask: Option<&Matrix>, link: Link) -> Result<f64> {
        let per = (0..y.cols())
            .map(|t| {
                let (l, v) = masked_column(logits, y, mask, t);
                self.score(&l, &v, link)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(per.iter().sum::<f64>() / per.len() as f64)
    }
}

impl FromStr for Metric {
    type Err = NamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auc" | "roc_auc" => Ok(Metric::RocAuc),
            "pr_auc" | "ap" => Ok(Metric::PrAuc),
            "rmse" => Ok(Metric::Rmse),
            "mse" => Ok(Metric::Mse),
            other => Err(NamError::Usage(format!("unknown metric {other:?}"))),
        }
    }
}

fn masked_column(logits: &Matrix, y: &Matrix, mask: Option<&Matrix>, t: usize) -> (Vec<f64>, Vec<f64>) {
    (0..y.rows())
        .filter(|&i| mask.is_none_or(|m| m.get(i, t) != 0.0))
        .map(|i| (logits.get(i, t), y.get(i, t)))
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub target: String,
    pub metric: Metric,
    pub value: f64,
}

/// Each requested metric for each target, on the rows where it is observed.
pub fn evaluate(model: &ModelFile, ds: &Dataset, metrics: &[Metric]) -> Result<Vec<MetricRow>> {
    for m in metrics {
        m.check(model.task)?;
    }
    if ds.target_names != model.target_names {
        return Err(NamError::Data(format!(
            "dataset targets {:?} do not match model targets {:?}",
            ds.target_names, model.target_names
        )));
    }
    let inp = model.inputs(ds)?;
    let labels = ds.to_samples()?;
    let logits = model.logits(&inp)?;
    let mut rows = Vec::new();
    for (t, name) in model.target_names.iter().enumerate() {
        let (l, y) = masked_column(&logits, &labels.y, labels.mask.as_ref(), t);
        for &m in metrics {
            rows.push(MetricRow {
                target: name.clone(),
                metric: m,
                value: m.score(&l, &y, model.link())?,
            });
        }
    }
    Ok(rows)
}

fn cv_generic<M, F, L>(
    samples: &Samples,
    spec: &FitSpec,
    folds: usize,
    metric: Metric,
    link: Link,
    factory: F,
    logits_of: L,
) -> Result<CvReport>
where
    M: Trainable,
    F: Fn(&Samples, &mut Rng) -> Result<M> + Sync,
    L: Fn(&M, &Samples) -> Result<Matrix>,
{
    cross_validate(samples, &spec.train, folds, spec.members, factory, |models: &[M], test: &Samples| {
        let logits = member_mean(models.iter().map(|m| logits_of(m, test)))?;
        metric.score_tasks(&logits, &test.y, test.mask.as_ref(), link)
    })
}

/// K-fold cross-validation of `spec` on `ds`, reporting `metric` per fold.
pub fn cross_validate_spec(ds: &Dataset, spec: &FitSpec, folds: usize, metric: Metric) -> Result<CvReport> {
    spec.validate(ds)?;
    metric.check(ds.task)?;
    let mut work = ds.clone();
    let d = if spec.treatments.is_empty() {
        None
    } else {
        Some(work.take_features(&spec.treatments)?)
    };
    let mut samples = work.to_samples()?;
    if let Some(d) = d {
        samples = samples.with_treatments(d)?;
    }
    let names = work.feature_names.clone();
    let meta_of = |s: &Samples| FeatureMeta::new(names.clone(), FeatureMeta::from_data(&s.x).ranges);
    let link = ds.task.link();
    let tasks = ds.num_targets();
    if !spec.treatments.is_empty() {
        let m = spec.treatments.len();
        cv_generic(
            &samples,
            spec,
            folds,
            metric,
            link,
            |s, rng| ParamGenModel::build(&spec.net, meta_of(s)?, spec.subnets, m, rng),
            |model: &ParamGenModel, s| {
                let d = s.treatments.as_ref().ok_or_else(|| NamError::Usage("treatments missing".into()))?;
                Ok(Matrix::column_vector(&model.risk_logits(&s.x, d)?))
            },
        )
    } else if spec.multitask {
        cv_generic(
            &samples,
            spec,
            folds,
            metric,
            link,
            |s, rng| MultitaskNam::build(&spec.net, meta_of(s)?, spec.subnets, vec![link; tasks], rng),
            |model: &MultitaskNam, s| model.logits(&s.x),
        )
    } else {
        cv_generic(
            &samples,
            spec,
            folds,
            metric,
            link,
            |s, rng| NamModel::build(&spec.net, meta_of(s)?, link, rng),
            |model: &NamModel, s| Ok(Matrix::column_vector(&model.logits(&s.x)?)),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_paramgen_synthetic, read_csv};

    fn small_spec() -> FitSpec {
        FitSpec {
            net: FeatureNetConfig::standard(vec![8]),
            train: TrainConfig {
                max_epochs: 5,
                batch_size: 64,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn regression_data() -> Dataset {
        let mut rng = Rng::new(4);
        let n = 200;
        let a: Vec<f64> = (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 10.0)).collect();
        let y: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a * a + 0.1 * b).collect();
        Dataset::new(vec!["a".into(), "b".into()], vec![a, b], vec!["y".into()], vec![y], TaskKind::Regression).unwrap()
    }

    #[test]
    fn fit_round_trips_through_json() {
        let ds = regression_data();
        let out = fit(&ds, &FitSpec { members: 2, ..small_spec() }).unwrap();
        assert!(out.model.is_centered());
        assert_eq!(out.reports.len(), 2);
        let back = ModelFile::from_json(&out.model.to_json().unwrap()).unwrap();
        assert_eq!(back, out.model);
        let inp = back.inputs(&ds).unwrap();
        assert_eq!(back.logits(&inp).unwrap(), out.model.logits(&inp).unwrap());
    }

    #[test]
    fn terms_sum_to_logits() {
        let ds = regression_data();
        let out = fit(&ds, &FitSpec { members: 3, ..small_spec() }).unwrap();
        let inp = out.model.inputs(&ds).unwrap();
        let terms = out.model.terms(&inp).unwrap();
        let logits = out.model.logits(&inp).unwrap();
        for i in 0..inp.rows() {
            let z = terms.bias.get(i, 0) + (0..2).map(|k| terms.contribution(i, 0, k)).sum::<f64>();
            assert!((z - logits.get(i, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_files_and_specs_rejected() {
        let ds = regression_data();
        let out = fit(&ds, &small_spec()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&out.model.to_json().unwrap()).unwrap();
        v["version"] = 2.into();
        assert!(matches!(ModelFile::from_json(&v.to_string()), Err(NamError::Data(_))));
        v["version"] = 1.into();
        v["format"] = "other".into();
        assert!(matches!(ModelFile::from_json(&v.to_string()), Err(NamError::Data(_))));

        let two = Dataset::new(
            vec!["a".into()],
            vec![vec![0.0, 1.0]],
            vec!["y".into(), "z".into()],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            TaskKind::Regression,
        )
        .unwrap();
        assert!(matches!(fit(&two, &small_spec()), Err(NamError::Usage(_))));
        assert!(matches!(Metric::RocAuc.check(TaskKind::Regression), Err(NamError::Usage(_))));
        assert!(matches!(
            evaluate(&out.model, &ds, &[Metric::RocAuc]),
            Err(NamError::Usage(_))
        ));
    }

    #[test]
    fn schema_mismatch_is_data_error() {
        let ds = regression_data();
        let out = fit(&ds, &small_spec()).unwrap();
        let other = read_csv("a,c,y\n1,2,3\n".as_bytes(), &["y".into()], TaskKind::Regression).unwrap();
        assert!(matches!(out.model.inputs(&other), Err(NamError::Data(_))));
        assert!(matches!(out.model.inputs_from_row(&[1.0]), Err(NamError::Data(_))));
        assert_eq!(out.model.feature_index("b").unwrap(), 1);
        assert_eq!(out.model.feature_index("0").unwrap(), 0);
        assert!(matches!(out.model.feature_index("7"), Err(NamError::Index { .. })));
    }

    #[test]
    fn evaluation_matches_direct_metric() {
        let ds = regression_data();
        let out = fit(&ds, &small_spec()).unwrap();
        let rows = evaluate(&out.model, &ds, &[Metric::Rmse, Metric::Mse]).unwrap();
        let pred = out.model.predict(&out.model.inputs(&ds).unwrap()).unwrap();
        assert_eq!(rows[0].value, rmse(pred.data(), &ds.targets[0]).unwrap());
        assert!((rows[0].value.powi(2) - rows[1].value).abs() < 1e-12);
    }

    #[test]
    fn paramgen_fit_and_terms() {
        let pg = gen_paramgen_synthetic(400, 2);
        let mut ds = pg.data.clone();
        for j in 0..3 {
            ds.feature_names.push(format!("d{j}"));
            ds.features.push(pg.treatments.column(j));
        }
        let spec = FitSpec {
            treatments: (0..3).map(|j| format!("d{j}")).collect(),
            ..small_spec()
        };
        let out = fit(&ds, &spec).unwrap();
        assert_eq!(out.model.feature_names, vec!["severity".to_string()]);
        assert_eq!(out.model.shape_heads().len(), 4);
        let inp = out.model.inputs(&ds).unwrap();
        let terms = out.model.terms(&inp).unwrap();
        let logits = out.model.logits(&inp).unwrap();
        for i in 0..inp.rows() {
            assert!((terms.bias.get(i, 0) + terms.contribution(i, 0, 0) - logits.get(i, 0)).abs() < 1e-12);
        }
        let cv = cross_validate_spec(&ds, &spec, 2, Metric::RocAuc).unwrap();
        assert_eq!(cv.fold_metrics.len(), 2);
    }

    #[test]
    fn multitask_cv_reports_each_fold() {
        let ds = regression_data();
        let mut mt = ds.clone();
        mt.target_names.push("y2".into());
        mt.targets.push(ds.features[1].clone());
        let spec = FitSpec {
            multitask: true,
            subnets: 2,
            ..small_spec()
        };
        let cv = cross_validate_spec(&mt, &spec, 3, Metric::Rmse).unwrap();
        assert_eq!(cv.fold_metrics.len(), 3);
        assert!(cv.fold_metrics.iter().all(|v| v.is_finite()));
    }
}
