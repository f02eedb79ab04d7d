//! CSV ingestion, preprocessing, splits, density histograms and the
//! synthetic generators.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::Link;
use crate::error::{NamError, Result};
use crate::tensor::{sigmoid, Matrix, Rng};
use crate::trainer::Samples;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn link(self) -> Link {
        match self {
            TaskKind::Classification => Link::Logistic,
            TaskKind::Regression => Link::Identity,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = NamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            other => Err(NamError::Usage(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub missing: usize,
}

/// Column-major table. Missing cells are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub target_names: Vec<String>,
    pub targets: Vec<Vec<f64>>,
    pub task: TaskKind,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        features: Vec<Vec<f64>>,
        target_names: Vec<String>,
        targets: Vec<Vec<f64>>,
        task: TaskKind,
    ) -> Result<Self> {
        if feature_names.len() != features.len() || target_names.len() != targets.len() {
            return Err(NamError::Dimension("column names and columns differ in count".into()));
        }
        let rows = features
            .first()
            .or(targets.first())
            .map_or(0, |c| c.len());
        if features.iter().chain(&targets).any(|c| c.len() != rows) {
            return Err(NamError::Dimension("columns have different lengths".into()));
        }
        Ok(Self {
            feature_names,
            features,
            target_names,
            targets,
            task,
        })
    }

    pub fn rows(&self) -> usize {
        self.features
            .first()
            .or(self.targets.first())
            .map_or(0, |c| c.len())
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn missing_count(&self) -> usize {
        self.features
            .iter()
            .chain(&self.targets)
            .flat_map(|c| c.iter())
            .filter(|v| v.is_nan())
            .count()
    }

    /// Row-major `[B x K]` feature matrix (may contain NaN).
    pub fn x(&self) -> Matrix {
        Matrix::from_columns(&self.features).unwrap_or_else(|_| Matrix::zeros(self.rows(), self.num_features()))
    }

    pub fn y(&self) -> Matrix {
        Matrix::from_columns(&self.targets).unwrap_or_else(|_| Matrix::zeros(self.rows(), self.num_targets()))
    }

    pub fn feature_stats(&self) -> Vec<ColumnStats> {
        self.features.iter().map(|c| column_stats(c)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let pick = |c: &Vec<f64>| rows.iter().map(|&r| c[r]).collect::<Vec<_>>();
        Dataset {
            feature_names: self.feature_names.clone(),
            features: self.features.iter().map(pick).collect(),
            target_names: self.target_names.clone(),
            targets: self.targets.iter().map(pick).collect(),
            task: self.task,
        }
    }

    /// Removes the named feature columns and returns them as a `[B x M]` matrix.
    pub fn take_features(&mut self, names: &[String]) -> Result<Matrix> {
        let mut cols = Vec::with_capacity(names.len());
        for name in names {
            let i = self
                .feature_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| NamError::Data(format!("no column named {name:?}")))?;
            self.feature_names.remove(i);
            cols.push(self.features.remove(i));
        }
        let rows = self.rows().max(cols.first().map_or(0, |c| c.len()));
        if cols.is_empty() {
            return Ok(Matrix::zeros(rows, 0));
        }
        Matrix::from_columns(&cols)
    }

    /// Training samples. With several targets, missing targets are masked;
    /// a single target must be complete.
    pub fn to_samples(&self) -> Result<Samples> {
        let mut y = self.y();
        if self.task == TaskKind::Classification {
            if let Some(v) = y.data().iter().find(|v| !v.is_nan() && **v != 0.0 && **v != 1.0) {
                return Err(NamError::Data(format!("classification target must be 0 or 1, got {v}")));
            }
        }
        let missing = y.data().iter().any(|v| v.is_nan());
        if !missing {
            return Samples::multi(self.x(), y, None);
        }
        if self.num_targets() == 1 {
            let r = y.data().iter().position(|v| v.is_nan()).unwrap_or(0);
            return Err(NamError::Data(format!("missing target at row {}", r + 1)));
        }
        let mut mask = Matrix::filled(y.rows(), y.cols(), 1.0);
        for (m, v) in mask.data_mut().iter_mut().zip(y.data_mut()) {
            if v.is_nan() {
                *m = 0.0;
                *v = 0.0;
            }
        }
        Samples::multi(self.x(), y, Some(mask))
    }
}

fn column_stats(c: &[f64]) -> ColumnStats {
    let present: Vec<f64> = c.iter().copied().filter(|v| !v.is_nan()).collect();
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ColumnStats {
        min: present.iter().copied().fold(f64::INFINITY, f64::min),
        max: present.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        std: var.sqrt(),
        missing: c.len() - present.len(),
    }
}

/// 17 significant digits: enough to reproduce any finite double exactly.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.16e}")
    }
}

fn parse_cell(cell: &str, row: usize, col: &str) -> Result<f64> {
    let t = cell.trim();
    if t.is_empty() {
        return Ok(f64::NAN);
    }
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| NamError::Data(format!("row {row}, column {col:?}: cannot parse {t:?} as a number")))
}

/// Reads a headered CSV. Every non-target column becomes a feature.
pub fn read_csv<R: Read>(reader: R, target_columns: &[String], task: TaskKind) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut target_idx = Vec::with_capacity(target_columns.len());
    for t in target_columns {
        let i = header
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| NamError::Data(format!("target column {t:?} not found in header")))?;
        target_idx.push(i);
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|i| !target_idx.contains(i)).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(NamError::Data(format!(
                "row {}: expected {} fields, found {}",
                r + 1,
                header.len(),
                rec.len()
            )));
        }
        for (c, cell) in rec.iter().enumerate() {
            columns[c].push(parse_cell(cell, r + 1, &header[c])?);
        }
    }
    Dataset::new(
        feature_idx.iter().map(|&i| header[i].clone()).collect(),
        feature_idx.iter().map(|&i| columns[i].clone()).collect(),
        target_idx.iter().map(|&i| header[i].clone()).collect(),
        target_idx.iter().map(|&i| columns[i].clone()).collect(),
        task,
    )
}

pub fn load_csv(path: &Path, target_columns: &[String], task: TaskKind) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| NamError::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(file), target_columns, task)
}

/// Features then targets; missing cells are written empty.
pub fn write_csv<W: Write>(writer: W, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ds.feature_names.iter().chain(&ds.target_names))?;
    for r in 0..ds.rows() {
        w.write_record(ds.features.iter().chain(&ds.targets).map(|c| fmt_f64(c[r])))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, ds)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Mean imputation and standardization with statistics from training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Preprocessor {
    pub fn fit(x: &Matrix) -> Result<Self> {
        let mut means = Vec::with_capacity(x.cols());
        let mut stds = Vec::with_capacity(x.cols());
        for k in 0..x.cols() {
            let s = column_stats(&x.column(k));
            if s.missing == x.rows() {
                return Err(NamError::Data(format!("feature column {k} has no observed values")));
            }
            means.push(s.mean);
            stds.push(s.std);
        }
        Ok(Self { means, stds })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            means: vec![0.0; k],
            stds: vec![1.0; k],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    #[inline]
    pub fn transform_value(&self, k: usize, v: f64) -> f64 {
        if v.is_nan() {
            return 0.0;
        }
        let s = self.stds[k];
        if s > 0.0 {
            (v - self.means[k]) / s
        } else {
            0.0
        }
    }

    #[inline]
    pub fn inverse_value(&self, k: usize, z: f64) -> f64 {
        let s = self.stds[k];
        if s > 0.0 {
            z * s + self.means[k]
        } else {
            self.means[k]
        }
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.len() {
            return Err(NamError::Data(format!(
                "preprocessor fitted on {} features, data has {}",
                self.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        let k = self.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.transform_value(i % k, *v);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    /// Counts divided by the largest count.
    pub counts: Vec<f64>,
}

impl DensityHistogram {
    fn bin_of(&self, v: f64) -> usize {
        let bins = self.counts.len();
        let lo = self.edges[0];
        let hi = self.edges[bins];
        if hi <= lo {
            return 0;
        }
        (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    }

    /// Normalized density of the bin containing `v` (0 outside the range).
    pub fn density_at(&self, v: f64) -> f64 {
        let bins = self.counts.len();
        if v < self.edges[0] || v > self.edges[bins] {
            return 0.0;
        }
        self.counts[self.bin_of(v)]
    }
}

pub const DEFAULT_BINS: usize = 64;

/// Equal-width histogram over `[min, max]`, max-normalized. NaNs are skipped.
pub fn density_histogram(values: &[f64], bins: usize) -> Result<DensityHistogram> {
    if bins == 0 {
        return Err(NamError::Usage("histogram needs at least one bin".into()));
    }
    let present: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if present.is_empty() {
        return Err(NamError::Usage("histogram of no values".into()));
    }
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + (hi - lo) * i as f64 / bins as f64 })
        .collect();
    let mut h = DensityHistogram {
        edges,
        counts: vec![0.0; bins],
    };
    for v in present {
        let b = h.bin_of(v);
        h.counts[b] += 1.0;
    }
    let max = h.counts.iter().copied().fold(0.0, f64::max);
    h.counts.iter_mut().for_each(|c| *c /= max);
    Ok(h)
}

/// Seeded permutation cut into `k` contiguous chunks whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(NamError::Usage(format!("cannot make {k} folds from {n} rows")));
    }
    let perm = Rng::new(seed).permutation(n);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(perm[start..start + size].to_vec());
        start += size;
    }
    Ok(folds)
}

/// Binary entropy in nats.
pub fn bernoulli_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).ln();
    }
    h
}

#[derive(Clone, Debug)]
pub struct ToyJump {
    pub data: Dataset,
    pub grid: Vec<f64>,
    /// Label probability at each grid point.
    pub probs: Vec<f64>,
}

impl ToyJump {
    pub const POINTS: usize = 100;
    pub const LABELS_PER_POINT: usize = 100;

    /// Mean Bernoulli entropy of the generating probabilities.
    pub fn entropy_floor(&self) -> f64 {
        self.probs.iter().map(|p| bernoulli_entropy(*p)).sum::<f64>() / self.probs.len() as f64
    }
}

/// 100 evenly spaced points in `[-1, 1]`, each with its own fixed
/// `p ~ U[0.1, 0.9)` and 100 Bernoulli labels.
pub fn gen_toy_jump(seed: u64) -> ToyJump {
    let mut rng = Rng::new(seed);
    let n = ToyJump::POINTS;
    let grid: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let probs: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 0.9)).collect();
    let mut x = Vec::with_capacity(n * ToyJump::LABELS_PER_POINT);
    let mut y = Vec::with_capacity(n * ToyJump::LABELS_PER_POINT);
    for (xi, p) in grid.iter().zip(&probs) {
        for _ in 0..ToyJump::LABELS_PER_POINT {
            x.push(*xi);
            y.push(if rng.bernoulli(*p) { 1.0 } else { 0.0 });
        }
    }
    let data = Dataset::new(vec!["x".into()], vec![x], vec!["y".into()], vec![y], TaskKind::Classification)
        .expect("consistent columns");
    ToyJump { data, grid, probs }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LogBase {
    Natural,
    Ten,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskSynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub log_base: LogBase,
    pub input_range: (f64, f64),
}

impl Default for MultitaskSynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2500,
            n_test: 10_000,
            noise_sd: 5.0 / 6.0,
            log_base: LogBase::Natural,
            input_range: (-1.0, 1.0),
        }
    }
}

pub fn synth_f(x0: f64, base: LogBase) -> f64 {
    let v = 100.0 * x0 + 101.0;
    match base {
        LogBase::Natural => v.ln() / 3.0,
        LogBase::Ten => v.log10() / 3.0,
    }
}

pub fn synth_g(x1: f64) -> f64 {
    -4.0 / 3.0 * (-4.0 * x1.abs()).exp()
}

pub fn synth_h(x2: f64) -> f64 {
    (10.0 * x2).sin()
}

pub fn synth_i(x2: f64) -> f64 {
    (15.0 * x2).cos()
}

/// Coefficients of `(h, i)` in each of the six tasks; every task adds `f + g`.
pub const TASK_COEFFICIENTS: [(f64, f64); 6] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (-1.0, 0.0),
    (0.0, -1.0),
    (1.0, 1.0),
    (-1.0, -1.0),
];

#[derive(Clone, Debug)]
pub struct MultitaskSplit {
    pub data: Dataset,
    /// Noise-free `[f, g, h, i]` per row.
    pub components: Vec<[f64; 4]>,
}

impl MultitaskSplit {
    pub fn clean_target(&self, row: usize, task: usize) -> f64 {
        let [f, g, h, i] = self.components[row];
        let (ch, ci) = TASK_COEFFICIENTS[task];
        f + g + ch * h + ci * i
    }
}

fn gen_multitask_rows(n: usize, cfg: &MultitaskSynthConfig, rng: &mut Rng) -> MultitaskSplit {
    let (lo, hi) = cfg.input_range;
    let mut features = vec![Vec::with_capacity(n); 3];
    let mut targets = vec![Vec::with_capacity(n); 6];
    let mut components = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..3).map(|_| rng.uniform_range(lo, hi)).collect();
        let c = [synth_f(x[0], cfg.log_base), synth_g(x[1]), synth_h(x[2]), synth_i(x[2])];
        for (col, v) in features.iter_mut().zip(&x) {
            col.push(*v);
        }
        for (t, (ch, ci)) in TASK_COEFFICIENTS.iter().enumerate() {
            let clean = c[0] + c[1] + ch * c[2] + ci * c[3];
            targets[t].push(clean + rng.normal(0.0, cfg.noise_sd));
        }
        components.push(c);
    }
    let data = Dataset::new(
        (0..3).map(|i| format!("x{i}")).collect(),
        features,
        (0..6).map(|t| format!("task{t}")).collect(),
        targets,
        TaskKind::Regression,
    )
    .expect("consistent columns");
    MultitaskSplit { data, components }
}

/// Six related regression tasks over three inputs. Returns (train, test).
pub fn gen_multitask_synthetic(cfg: &MultitaskSynthConfig, seed: u64) -> (MultitaskSplit, MultitaskSplit) {
    let mut rng = Rng::new(seed);
    let train = gen_multitask_rows(cfg.n_train, cfg, &mut rng);
    let test = gen_multitask_rows(cfg.n_test, cfg, &mut rng);
    (train, test)
}

pub const PARAMGEN_TREATMENTS: usize = 3;

pub fn paramgen_baseline(x: f64) -> f64 {
    -1.0 + 1.5 * x
}

/// True benefit (logit shift) of treatment `m` at severity `x`.
pub fn paramgen_benefit(m: usize, x: f64) -> f64 {
    match m {
        0 => -0.5 + x,
        1 => -0.3 + 0.8 * x,
        2 => 0.2 - 0.3 * x,
        _ => panic!("treatment index {m} out of range"),
    }
}

#[derive(Clone, Debug)]
pub struct ParamGenData {
    pub data: Dataset,
    /// `[B x M]` 0/1 treatment indicators.
    pub treatments: Matrix,
}

impl ParamGenData {
    pub fn to_samples(&self) -> Result<Samples> {
        self.data.to_samples()?.with_treatments(self.treatments.clone())
    }
}

/// One severity feature `x ~ U[0, 1]`, three coin-flip treatments, and
/// `y ~ Bernoulli(sigmoid(baseline(x) + sum_m d_m benefit_m(x)))`.
pub fn gen_paramgen_synthetic(n: usize, seed: u64) -> ParamGenData {
    let m = PARAMGEN_TREATMENTS;
    let mut rng = Rng::new(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut d = Matrix::zeros(n, m);
    for r in 0..n {
        let xi = rng.uniform();
        let mut logit = paramgen_baseline(xi);
        for j in 0..m {
            if rng.bernoulli(0.5) {
                d.set(r, j, 1.0);
                logit += paramgen_benefit(j, xi);
            }
        }
        x.push(xi);
        y.push(if rng.bernoulli(sigmoid(logit)) { 1.0 } else { 0.0 });
    }
    let data = Dataset::new(vec!["severity".into()], vec![x], vec!["y".into()], vec![y], TaskKind::Classification)
        .expect("consistent columns");
    ParamGenData { data, treatments: d }
}
