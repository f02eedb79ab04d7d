//! Multitask additive models and the parameter-generation head.
//!
//! Each feature owns `S` subnets. Task `t` sees feature `k` through the
//! weighted sum `sum_s a[t,k,s] * u_{k,s}(x_k)`, so every (task, feature)
//! pair still has exactly one shape function.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{task_loss, Link, LossBreakdown, Predictor};
use crate::error::{NamError, Result};
use crate::feature_net::{FeatureNet, FeatureNetConfig, ForwardCache, ParamGrads};
use crate::model::{check_input, feature_dropout_mask, grid_points, FeatureMeta, NamModel, Penalties};
use crate::tensor::{Matrix, Parameters, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskNam {
    /// Subnet `(k, s)` lives at index `k * S + s`.
    pub subnets: Vec<FeatureNet>,
    pub num_subnets: usize,
    pub num_tasks: usize,
    /// Mixing weights `a[t,k,s]` at `(t * K + k) * S + s`.
    pub mix: Vec<f64>,
    pub task_bias: Vec<f64>,
    /// Centering offsets `c[t,k]` at `t * K + k`.
    pub offsets: Vec<f64>,
    pub links: Vec<Link>,
    pub active: Vec<bool>,
    pub meta: FeatureMeta,
    pub centered: bool,
}

#[derive(Clone, Debug)]
pub struct MtForward {
    /// Subnet outputs, one column of `B` values per subnet.
    pub subnet_outputs: Vec<Vec<f64>>,
    /// Task-specific shape values before feature dropout, `[b][t][k]` flattened.
    pub outputs: Vec<f64>,
    /// `[B x T]`.
    pub logits: Matrix,
    pub caches: Vec<Option<ForwardCache>>,
    pub feature_mask: Option<Matrix>,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct MtLossGrads {
    /// `[B x T]`.
    pub d_logits: Matrix,
    /// With respect to `outputs`, `[b][t][k]` flattened.
    pub d_outputs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtGrads {
    pub subnets: Vec<ParamGrads>,
    pub mix: Vec<f64>,
    pub task_bias: Vec<f64>,
}

impl Parameters for MtGrads {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for s in &self.subnets {
            s.visit(f);
        }
        f(&self.mix);
        f(&self.task_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for s in &mut self.subnets {
            s.visit_mut(f);
        }
        f(&mut self.mix);
        f(&mut self.task_bias);
    }
}

impl Parameters for MultitaskNam {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for s in &self.subnets {
            s.visit(f);
        }
        f(&self.mix);
        f(&self.task_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for s in &mut self.subnets {
            s.visit_mut(f);
        }
        f(&mut self.mix);
        f(&mut self.task_bias);
    }
}

impl MultitaskNam {
    /// `K = meta.len()` features, `S` subnets per feature, `T = links.len()` tasks.
    pub fn build(
        cfg: &FeatureNetConfig,
        meta: FeatureMeta,
        num_subnets: usize,
        links: Vec<Link>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let k = meta.len();
        let t = links.len();
        if k == 0 || num_subnets == 0 || t == 0 {
            return Err(NamError::Config(format!(
                "multitask model needs K, S, T >= 1 (got K={k}, S={num_subnets}, T={t})"
            )));
        }
        if cfg.output_dim != 1 {
            return Err(NamError::Config("multitask subnets have one output".into()));
        }
        let mut subnets = Vec::with_capacity(k * num_subnets);
        for (j, r) in meta.ranges.iter().enumerate() {
            for _ in 0..num_subnets {
                subnets.push(FeatureNet::build(cfg, j, *r, rng)?);
            }
        }
        let bound = 1.0 / (num_subnets as f64).sqrt();
        let mix = (0..t * k * num_subnets)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Ok(Self {
            subnets,
            num_subnets,
            num_tasks: t,
            mix,
            task_bias: vec![0.0; t],
            offsets: vec![0.0; t * k],
            links,
            active: vec![true; k],
            meta,
            centered: false,
        })
    }

    /// The single-subnet, single-task model with the same parameters as `nam`.
    pub fn from_nam(nam: &NamModel) -> Self {
        let k = nam.num_features();
        Self {
            subnets: nam.nets.clone(),
            num_subnets: 1,
            num_tasks: 1,
            mix: vec![1.0; k],
            task_bias: vec![nam.bias],
            offsets: nam.offsets.clone(),
            links: vec![nam.link],
            active: nam.active.clone(),
            meta: nam.meta.clone(),
            centered: nam.centered,
        }
    }

    pub fn num_features(&self) -> usize {
        self.meta.len()
    }

    #[inline]
    fn mix_index(&self, t: usize, k: usize, s: usize) -> usize {
        (t * self.num_features() + k) * self.num_subnets + s
    }

    pub fn mix_weight(&self, t: usize, k: usize, s: usize) -> f64 {
        self.mix[self.mix_index(t, k, s)]
    }

    pub fn set_mix_weight(&mut self, t: usize, k: usize, s: usize, v: f64) {
        let i = self.mix_index(t, k, s);
        self.mix[i] = v;
    }

    pub fn set_dropout(&mut self, rate: f64) {
        self.subnets.iter_mut().for_each(|n| n.set_dropout(rate));
    }

    pub fn forward(
        &self,
        x: &Matrix,
        train_mode: bool,
        rng: &mut Rng,
        feature_dropout: f64,
    ) -> Result<MtForward> {
        let k = self.num_features();
        let s_count = self.num_subnets;
        let t_count = self.num_tasks;
        check_input(x, k)?;
        let b = x.rows();
        let columns: Vec<Vec<f64>> = (0..k).map(|j| x.column(j)).collect();
        let child_rngs: Vec<Rng> = (0..self.subnets.len()).map(|_| rng.fork()).collect();
        let per_net: Vec<(Vec<f64>, Option<ForwardCache>)> = self
            .subnets
            .par_iter()
            .zip(child_rngs)
            .enumerate()
            .map(|(idx, (net, mut r))| {
                let j = idx / s_count;
                if !self.active[j] {
                    return Ok((vec![0.0; b], None));
                }
                let (out, cache) = net.forward(&columns[j], train_mode, &mut r)?;
                Ok((out.into_data(), cache))
            })
            .collect::<Result<_>>()?;
        let (subnet_outputs, caches): (Vec<_>, Vec<_>) = per_net.into_iter().unzip();

        let mut outputs = vec![0.0; b * t_count * k];
        for i in 0..b {
            for t in 0..t_count {
                for j in 0..k {
                    if !self.active[j] {
                        continue;
                    }
                    let mut v = 0.0;
                    for s in 0..s_count {
                        v += self.mix[self.mix_index(t, j, s)] * subnet_outputs[j * s_count + s][i];
                    }
                    outputs[(i * t_count + t) * k + j] = v - self.offsets[t * k + j];
                }
            }
        }
        let feature_mask = if train_mode {
            feature_dropout_mask(b, k, feature_dropout, rng)
        } else {
            None
        };
        let mut logits = Matrix::zeros(b, t_count);
        for i in 0..b {
            for t in 0..t_count {
                let base = (i * t_count + t) * k;
                let mut z = self.task_bias[t];
                for j in 0..k {
                    let m = feature_mask.as_ref().map_or(1.0, |m| m.get(i, j));
                    z += outputs[base + j] * m;
                }
                logits.set(i, t, z);
            }
        }
        Ok(MtForward {
            subnet_outputs,
            outputs,
            logits,
            caches,
            feature_mask,
            batch: b,
        })
    }

    /// Average over all `K*S` subnets of each subnet's squared weight norm.
    pub fn weight_decay(&self) -> f64 {
        self.subnets.iter().map(|n| n.stack.weight_sq_norm()).sum::<f64>() / self.subnets.len() as f64
    }

    /// Per-task loss averaged over unmasked `(b, t)` entries. Masked targets
    /// may hold any value (including NaN).
    pub fn loss(
        &self,
        fwd: &MtForward,
        y: &Matrix,
        task_mask: Option<&Matrix>,
        pen: &Penalties,
    ) -> Result<(LossBreakdown, MtLossGrads)> {
        let b = fwd.batch;
        let t_count = self.num_tasks;
        if y.shape() != (b, t_count) {
            return Err(NamError::Dimension(format!(
                "targets are {}x{}, expected {b}x{t_count}",
                y.rows(),
                y.cols()
            )));
        }
        if let Some(m) = task_mask {
            if m.shape() != (b, t_count) {
                return Err(NamError::Dimension("task mask shape differs from targets".into()));
            }
            if m.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(NamError::Data("task mask entries must be 0 or 1".into()));
            }
        }
        let masked = |i: usize, t: usize| task_mask.map_or(1.0, |m| m.get(i, t));
        let n: f64 = (0..b)
            .flat_map(|i| (0..t_count).map(move |t| (i, t)))
            .map(|(i, t)| masked(i, t))
            .sum();
        if n == 0.0 {
            return Err(NamError::Usage("every target in the batch is masked".into()));
        }
        let mut d_logits = Matrix::zeros(b, t_count);
        let mut task = 0.0;
        for i in 0..b {
            for t in 0..t_count {
                if masked(i, t) == 0.0 {
                    continue;
                }
                let (l, g) = task_loss(self.links[t], fwd.logits.get(i, t), y.get(i, t))?;
                task += l;
                d_logits.set(i, t, g / n);
            }
        }
        task /= n;
        let (penalty, d_outputs) = self.penalty_and_grads(fwd, &d_logits, task_mask, n, pen.output_penalty);
        let breakdown = LossBreakdown::new(task, penalty, self.weight_decay(), pen.output_penalty, pen.weight_decay);
        Ok((breakdown, MtLossGrads { d_logits, d_outputs }))
    }

    fn penalty_and_grads(
        &self,
        fwd: &MtForward,
        d_logits: &Matrix,
        mask: Option<&Matrix>,
        n: f64,
        lambda1: f64,
    ) -> (f64, Vec<f64>) {
        let b = fwd.batch;
        let t_count = self.num_tasks;
        let k = self.num_features();
        let mut penalty = 0.0;
        let mut d_outputs = vec![0.0; fwd.outputs.len()];
        let scale = lambda1 * 2.0 / (n * k as f64);
        for i in 0..b {
            for t in 0..t_count {
                let m = mask.map_or(1.0, |m| m.get(i, t));
                let base = (i * t_count + t) * k;
                let dl = d_logits.get(i, t);
                for j in 0..k {
                    let o = fwd.outputs[base + j];
                    let fm = fwd.feature_mask.as_ref().map_or(1.0, |fm| fm.get(i, j));
                    if m != 0.0 {
                        penalty += o * o;
                    }
                    d_outputs[base + j] = dl * fm + m * scale * o;
                }
            }
        }
        (penalty / (n * k as f64), d_outputs)
    }

    pub fn backward(&self, fwd: &MtForward, grads: &MtLossGrads, weight_decay: f64) -> Result<MtGrads> {
        let b = fwd.batch;
        let k = self.num_features();
        let s_count = self.num_subnets;
        let t_count = self.num_tasks;

        let mut mix = vec![0.0; self.mix.len()];
        for t in 0..t_count {
            for j in 0..k {
                for s in 0..s_count {
                    let u = &fwd.subnet_outputs[j * s_count + s];
                    let mut acc = 0.0;
                    for i in 0..b {
                        acc += grads.d_outputs[(i * t_count + t) * k + j] * u[i];
                    }
                    mix[self.mix_index(t, j, s)] = acc;
                }
            }
        }
        let task_bias = grads.d_logits.column_sums();

        let wd_scale = weight_decay / self.subnets.len() as f64;
        let subnets = self
            .subnets
            .par_iter()
            .enumerate()
            .map(|(idx, net)| {
                let j = idx / s_count;
                let s = idx % s_count;
                let mut g = match &fwd.caches[idx] {
                    Some(cache) => {
                        let upstream: Vec<f64> = (0..b)
                            .map(|i| {
                                (0..t_count)
                                    .map(|t| {
                                        self.mix[self.mix_index(t, j, s)]
                                            * grads.d_outputs[(i * t_count + t) * k + j]
                                    })
                                    .sum()
                            })
                            .collect();
                        net.backward(Some(cache), &Matrix::column_vector(&upstream))?
                    }
                    None if !self.active[j] => ParamGrads::zeros_like(&net.stack),
                    None => {
                        return Err(NamError::Usage(
                            "backward requires a train-mode forward".into(),
                        ))
                    }
                };
                if wd_scale != 0.0 {
                    net.stack.add_weight_decay_grad(&mut g, wd_scale);
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MtGrads {
            subnets,
            mix,
            task_bias,
        })
    }

    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        y: &Matrix,
        task_mask: Option<&Matrix>,
        pen: &Penalties,
        rng: &mut Rng,
    ) -> Result<(LossBreakdown, MtGrads)> {
        let fwd = self.forward(x, true, rng, pen.feature_dropout)?;
        let (breakdown, lg) = self.loss(&fwd, y, task_mask, pen)?;
        let grads = self.backward(&fwd, &lg, pen.weight_decay)?;
        Ok((breakdown, grads))
    }

    pub fn eval_loss(
        &self,
        x: &Matrix,
        y: &Matrix,
        task_mask: Option<&Matrix>,
        pen: &Penalties,
    ) -> Result<LossBreakdown> {
        let fwd = self.forward(x, false, &mut Rng::new(0), 0.0)?;
        Ok(self.loss(&fwd, y, task_mask, pen)?.0)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x, false, &mut Rng::new(0), 0.0)?.logits)
    }

    /// Folds each (task, feature) training mean into the task bias.
    pub fn center(&mut self, x_train: &Matrix) -> Result<()> {
        if x_train.rows() == 0 {
            return Err(NamError::Usage("cannot center on an empty dataset".into()));
        }
        let fwd = self.forward(x_train, false, &mut Rng::new(0), 0.0)?;
        let k = self.num_features();
        let t_count = self.num_tasks;
        let n = x_train.rows() as f64;
        let mut means = vec![0.0; t_count * k];
        for i in 0..x_train.rows() {
            for (m, o) in means
                .iter_mut()
                .zip(&fwd.outputs[i * t_count * k..(i + 1) * t_count * k])
            {
                *m += o;
            }
        }
        for t in 0..t_count {
            for j in 0..k {
                if !self.active[j] {
                    continue;
                }
                let mean = means[t * k + j] / n;
                self.offsets[t * k + j] += mean;
                self.task_bias[t] += mean;
            }
        }
        self.centered = true;
        Ok(())
    }

    pub fn zero_out_feature(&mut self, k: usize) -> Result<()> {
        if k >= self.num_features() {
            return Err(NamError::Index {
                index: k,
                len: self.num_features(),
            });
        }
        if !self.centered {
            return Err(NamError::Usage(
                "zeroing out a feature requires a centered model".into(),
            ));
        }
        self.active[k] = false;
        Ok(())
    }

    /// The task-`t` shape function of feature `k` on an even grid.
    pub fn shape_table(&self, k: usize, t: usize, grid: usize) -> Result<Vec<(f64, f64)>> {
        let kk = self.num_features();
        if k >= kk {
            return Err(NamError::Index { index: k, len: kk });
        }
        if t >= self.num_tasks {
            return Err(NamError::Index {
                index: t,
                len: self.num_tasks,
            });
        }
        let xs = grid_points(self.meta.ranges[k], grid)?;
        if !self.active[k] {
            return Ok(xs.into_iter().map(|x| (x, 0.0)).collect());
        }
        let mut ys = vec![-self.offsets[t * kk + k]; xs.len()];
        for s in 0..self.num_subnets {
            let u = self.subnets[k * self.num_subnets + s].predict(&xs)?;
            let a = self.mix_weight(t, k, s);
            for (y, v) in ys.iter_mut().zip(u.data()) {
                *y += a * v;
            }
        }
        Ok(xs.into_iter().zip(ys).collect())
    }
}

impl Predictor for MultitaskNam {
    fn links(&self) -> Vec<Link> {
        self.links.clone()
    }

    fn predict_logits(&self, x: &Matrix) -> Result<Matrix> {
        self.logits(x)
    }
}

/// Baseline risk plus one additive benefit term per treatment:
/// `logit = baseline(x) + sum_m d_m * benefit_m(x)`.
///
/// Task 0 of `base` is the baseline; task `1 + m` is treatment `m`'s benefit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGenModel {
    pub base: MultitaskNam,
    pub treatments: usize,
}

impl Parameters for ParamGenModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.base.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.base.visit_mut(f)
    }
}

fn check_treatments(d: &Matrix, rows: usize, m: usize) -> Result<()> {
    if d.shape() != (rows, m) {
        return Err(NamError::Dimension(format!(
            "treatment matrix is {}x{}, expected {rows}x{m}",
            d.rows(),
            d.cols()
        )));
    }
    if d.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(NamError::Data("treatment indicators must be 0 or 1".into()));
    }
    Ok(())
}

impl ParamGenModel {
    pub fn build(
        cfg: &FeatureNetConfig,
        meta: FeatureMeta,
        num_subnets: usize,
        treatments: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if treatments == 0 {
            return Err(NamError::Config("need at least one treatment".into()));
        }
        let base = MultitaskNam::build(cfg, meta, num_subnets, vec![Link::Identity; 1 + treatments], rng)?;
        Ok(Self { base, treatments })
    }

    fn risk_from(&self, logits: &Matrix, d: &Matrix) -> Vec<f64> {
        (0..logits.rows())
            .map(|i| {
                let mut z = logits.get(i, 0);
                for m in 0..self.treatments {
                    z += d.get(i, m) * logits.get(i, 1 + m);
                }
                z
            })
            .collect()
    }

    pub fn risk_logits(&self, x: &Matrix, d: &Matrix) -> Result<Vec<f64>> {
        check_treatments(d, x.rows(), self.treatments)?;
        let logits = self.base.logits(x)?;
        Ok(self.risk_from(&logits, d))
    }

    /// Predicted risk `sigmoid(baseline + sum_m d_m benefit_m)`.
    pub fn forward(&self, x: &Matrix, d: &Matrix) -> Result<Vec<f64>> {
        Ok(self
            .risk_logits(x, d)?
            .into_iter()
            .map(crate::tensor::sigmoid)
            .collect())
    }

    pub fn baseline(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.base.logits(x)?.column(0))
    }

    /// Benefit logit of treatment `m` (its bias plus its shape functions).
    pub fn benefit(&self, m: usize, x: &Matrix) -> Result<Vec<f64>> {
        if m >= self.treatments {
            return Err(NamError::Index {
                index: m,
                len: self.treatments,
            });
        }
        Ok(self.base.logits(x)?.column(1 + m))
    }

    fn loss_from_forward(
        &self,
        fwd: &MtForward,
        y: &[f64],
        d: &Matrix,
        pen: &Penalties,
    ) -> Result<(LossBreakdown, MtLossGrads)> {
        let b = fwd.batch;
        if y.len() != b {
            return Err(NamError::Dimension(format!("{} targets for {b} rows", y.len())));
        }
        if b == 0 {
            return Err(NamError::Usage("loss over an empty batch".into()));
        }
        let t_count = 1 + self.treatments;
        let risk = self.risk_from(&fwd.logits, d);
        let mut task = 0.0;
        let mut d_logits = Matrix::zeros(b, t_count);
        for i in 0..b {
            let (l, g) = task_loss(Link::Logistic, risk[i], y[i])?;
            task += l;
            let g = g / b as f64;
            d_logits.set(i, 0, g);
            for m in 0..self.treatments {
                d_logits.set(i, 1 + m, d.get(i, m) * g);
            }
        }
        task /= b as f64;
        // Benefit shapes are only penalized where the treatment was given.
        let mut active = Matrix::zeros(b, t_count);
        for i in 0..b {
            active.set(i, 0, 1.0);
            for m in 0..self.treatments {
                active.set(i, 1 + m, d.get(i, m));
            }
        }
        let n: f64 = active.data().iter().sum();
        let (penalty, d_outputs) =
            self.base
                .penalty_and_grads(fwd, &d_logits, Some(&active), n, pen.output_penalty);
        let breakdown = LossBreakdown::new(task, penalty, self.base.weight_decay(), pen.output_penalty, pen.weight_decay);
        Ok((breakdown, MtLossGrads { d_logits, d_outputs }))
    }

    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        y: &[f64],
        d: &Matrix,
        pen: &Penalties,
        rng: &mut Rng,
    ) -> Result<(LossBreakdown, MtGrads)> {
        check_treatments(d, x.rows(), self.treatments)?;
        let fwd = self.base.forward(x, true, rng, pen.feature_dropout)?;
        let (breakdown, lg) = self.loss_from_forward(&fwd, y, d, pen)?;
        let grads = self.base.backward(&fwd, &lg, pen.weight_decay)?;
        Ok((breakdown, grads))
    }

    pub fn eval_loss(&self, x: &Matrix, y: &[f64], d: &Matrix, pen: &Penalties) -> Result<LossBreakdown> {
        check_treatments(d, x.rows(), self.treatments)?;
        let fwd = self.base.forward(x, false, &mut Rng::new(0), 0.0)?;
        Ok(self.loss_from_forward(&fwd, y, d, pen)?.0)
    }
}
