//! Single-task neural additive model: `g(E[y]) = bias + sum_k (f_k(x_k) - c_k)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{accumulate_mean, task_loss, Ensemble, Link, LossBreakdown, Predictor};
use crate::error::{NamError, Result};
use crate::feature_net::{FeatureNet, FeatureNetConfig, ForwardCache, ParamGrads};
use crate::tensor::{Matrix, Parameters, Rng};

/// Feature names and training ranges (in model input units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub names: Vec<String>,
    pub ranges: Vec<(f64, f64)>,
}

impl FeatureMeta {
    pub fn new(names: Vec<String>, ranges: Vec<(f64, f64)>) -> Result<Self> {
        if names.len() != ranges.len() {
            return Err(NamError::Dimension(format!(
                "{} feature names but {} ranges",
                names.len(),
                ranges.len()
            )));
        }
        Ok(Self { names, ranges })
    }

    /// Generic names `x0..x{k-1}` with a shared range.
    pub fn uniform(k: usize, range: (f64, f64)) -> Self {
        Self {
            names: (0..k).map(|i| format!("x{i}")).collect(),
            ranges: vec![range; k],
        }
    }

    /// Names `x0..` with ranges taken from the columns of `x`.
    pub fn from_data(x: &Matrix) -> Self {
        let ranges = (0..x.cols())
            .map(|k| {
                let col = x.column(k);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if lo.is_finite() {
                    (lo, hi)
                } else {
                    (0.0, 0.0)
                }
            })
            .collect();
        Self {
            names: (0..x.cols()).map(|i| format!("x{i}")).collect(),
            ranges,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Regularization strengths applied inside the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    /// λ1: output penalty on each feature net's prediction.
    pub output_penalty: f64,
    /// λ2: weight decay, averaged over feature nets.
    pub weight_decay: f64,
    /// λ4: feature dropout rate.
    pub feature_dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamModel {
    pub nets: Vec<FeatureNet>,
    pub bias: f64,
    pub link: Link,
    /// Centering offsets `c_k`; zero until [`NamModel::center`] runs.
    pub offsets: Vec<f64>,
    /// Features removed with [`NamModel::zero_out_feature`] are `false`.
    pub active: Vec<bool>,
    pub meta: FeatureMeta,
    pub centered: bool,
}

/// Everything a backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct NamForward {
    /// `f_k(x_k) - c_k` before feature dropout, `[B x K]`.
    pub outputs: Matrix,
    /// Contributions entering the logit (feature dropout applied), `[B x K]`.
    pub contribs: Matrix,
    pub logits: Vec<f64>,
    pub caches: Vec<Option<ForwardCache>>,
    /// Per-example, per-feature scale (0 or 1/(1-λ4)) when feature dropout ran.
    pub feature_mask: Option<Matrix>,
}

/// Derivatives of the total loss with respect to the forward outputs.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub d_logits: Vec<f64>,
    /// With respect to `outputs` (i.e. each net's prediction), `[B x K]`.
    pub d_outputs: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamGrads {
    pub nets: Vec<ParamGrads>,
    pub bias: f64,
}

impl Parameters for NamGrads {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for n in &self.nets {
            n.visit(f);
        }
        f(std::slice::from_ref(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for n in &mut self.nets {
            n.visit_mut(f);
        }
        f(std::slice::from_mut(&mut self.bias));
    }
}

impl Parameters for NamModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for n in &self.nets {
            n.visit(f);
        }
        f(std::slice::from_ref(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for n in &mut self.nets {
            n.visit_mut(f);
        }
        f(std::slice::from_mut(&mut self.bias));
    }
}

pub(crate) fn check_input(x: &Matrix, k: usize) -> Result<()> {
    if x.cols() != k {
        return Err(NamError::Dimension(format!(
            "model has {k} features, input has {}",
            x.cols()
        )));
    }
    if !x.is_finite() {
        return Err(NamError::Data("non-finite feature value (impute missing values first)".into()));
    }
    Ok(())
}

/// Draws a `[B x K]` inverted feature-dropout mask.
pub(crate) fn feature_dropout_mask(rows: usize, k: usize, rate: f64, rng: &mut Rng) -> Option<Matrix> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut m = Matrix::zeros(rows, k);
    for v in m.data_mut() {
        *v = if rng.bernoulli(keep) { scale } else { 0.0 };
    }
    Some(m)
}

impl NamModel {
    pub fn build(cfg: &FeatureNetConfig, meta: FeatureMeta, link: Link, rng: &mut Rng) -> Result<Self> {
        if meta.is_empty() {
            return Err(NamError::Config("a model needs at least one feature".into()));
        }
        if cfg.output_dim != 1 {
            return Err(NamError::Config("single-task feature nets have one output".into()));
        }
        let nets = meta
            .ranges
            .iter()
            .enumerate()
            .map(|(k, r)| FeatureNet::build(cfg, k, *r, rng))
            .collect::<Result<Vec<_>>>()?;
        let k = nets.len();
        Ok(Self {
            nets,
            bias: 0.0,
            link,
            offsets: vec![0.0; k],
            active: vec![true; k],
            meta,
            centered: false,
        })
    }

    pub fn num_features(&self) -> usize {
        self.nets.len()
    }

    pub fn set_dropout(&mut self, rate: f64) {
        self.nets.iter_mut().for_each(|n| n.set_dropout(rate));
    }

    /// Forward pass over a `[B x K]` batch.
    pub fn forward(
        &self,
        x: &Matrix,
        train_mode: bool,
        rng: &mut Rng,
        feature_dropout: f64,
    ) -> Result<NamForward> {
        let k = self.num_features();
        check_input(x, k)?;
        let b = x.rows();
        let child_rngs: Vec<Rng> = (0..k).map(|_| rng.fork()).collect();
        let per_net: Vec<(Vec<f64>, Option<ForwardCache>)> = self
            .nets
            .par_iter()
            .zip(child_rngs)
            .enumerate()
            .map(|(j, (net, mut r))| {
                if !self.active[j] {
                    return Ok((vec![0.0; b], None));
                }
                let col = x.column(j);
                let (out, cache) = net.forward(&col, train_mode, &mut r)?;
                let c = self.offsets[j];
                Ok((out.into_data().into_iter().map(|v| v - c).collect(), cache))
            })
            .collect::<Result<_>>()?;
        let mut outputs = Matrix::zeros(b, k);
        let mut caches = Vec::with_capacity(k);
        for (j, (col, cache)) in per_net.into_iter().enumerate() {
            for (i, v) in col.into_iter().enumerate() {
                outputs.set(i, j, v);
            }
            caches.push(cache);
        }
        let feature_mask = if train_mode {
            feature_dropout_mask(b, k, feature_dropout, rng)
        } else {
            None
        };
        let mut contribs = outputs.clone();
        if let Some(m) = &feature_mask {
            for (c, s) in contribs.data_mut().iter_mut().zip(m.data()) {
                *c *= s;
            }
        }
        let logits = (0..b)
            .map(|i| self.bias + contribs.row(i).iter().sum::<f64>())
            .collect();
        Ok(NamForward {
            outputs,
            contribs,
            logits,
            caches,
            feature_mask,
        })
    }

    /// Average over nets of each net's squared weight norm.
    pub fn weight_decay(&self) -> f64 {
        self.nets.iter().map(|n| n.stack.weight_sq_norm()).sum::<f64>() / self.nets.len() as f64
    }

    /// Loss of a completed forward pass and its gradient with respect to
    /// logits and per-net outputs.
    pub fn loss(&self, fwd: &NamForward, y: &[f64], pen: &Penalties) -> Result<(LossBreakdown, LossGrads)> {
        let (b, k) = fwd.outputs.shape();
        if y.len() != b {
            return Err(NamError::Dimension(format!("{} targets for {b} rows", y.len())));
        }
        if b == 0 {
            return Err(NamError::Usage("loss over an empty batch".into()));
        }
        let inv_b = 1.0 / b as f64;
        let mut task = 0.0;
        let mut d_logits = vec![0.0; b];
        for i in 0..b {
            let (l, g) = task_loss(self.link, fwd.logits[i], y[i])?;
            task += l;
            d_logits[i] = g * inv_b;
        }
        task *= inv_b;
        let penalty = fwd.outputs.sum_squares() * inv_b / k as f64;
        let wd = self.weight_decay();
        let breakdown = LossBreakdown::new(task, penalty, wd, pen.output_penalty, pen.weight_decay);

        let mut d_outputs = Matrix::zeros(b, k);
        let pen_scale = pen.output_penalty * 2.0 * inv_b / k as f64;
        for i in 0..b {
            for j in 0..k {
                let mask = fwd.feature_mask.as_ref().map_or(1.0, |m| m.get(i, j));
                d_outputs.set(i, j, d_logits[i] * mask + pen_scale * fwd.outputs.get(i, j));
            }
        }
        Ok((breakdown, LossGrads { d_logits, d_outputs }))
    }

    /// Backpropagates loss gradients through every net; adds weight decay.
    pub fn backward(&self, fwd: &NamForward, grads: &LossGrads, weight_decay: f64) -> Result<NamGrads> {
        let k = self.num_features();
        let wd_scale = weight_decay / k as f64;
        let nets = self
            .nets
            .par_iter()
            .enumerate()
            .map(|(j, net)| {
                let mut g = match &fwd.caches[j] {
                    Some(cache) => {
                        let upstream = Matrix::column_vector(&grads.d_outputs.column(j));
                        net.backward(Some(cache), &upstream)?
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
        Ok(NamGrads {
            nets,
            bias: grads.d_logits.iter().sum(),
        })
    }

    /// Train-mode loss and full parameter gradient for one batch.
    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        y: &[f64],
        pen: &Penalties,
        rng: &mut Rng,
    ) -> Result<(LossBreakdown, NamGrads)> {
        let fwd = self.forward(x, true, rng, pen.feature_dropout)?;
        let (breakdown, lg) = self.loss(&fwd, y, pen)?;
        let grads = self.backward(&fwd, &lg, pen.weight_decay)?;
        Ok((breakdown, grads))
    }

    /// Eval-mode loss (no dropout).
    pub fn eval_loss(&self, x: &Matrix, y: &[f64], pen: &Penalties) -> Result<LossBreakdown> {
        let fwd = self.forward(x, false, &mut Rng::new(0), 0.0)?;
        Ok(self.loss(&fwd, y, pen)?.0)
    }

    /// Eval-mode contributions `[B x K]`.
    pub fn contributions(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x, false, &mut Rng::new(0), 0.0)?.contribs)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(x, false, &mut Rng::new(0), 0.0)?.logits)
    }

    pub fn predict_vec(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(|z| self.link.apply(z)).collect())
    }

    /// Shifts every shape function to zero training mean and folds the
    /// shifts into the bias. Predictions are unchanged.
    pub fn center(&mut self, x_train: &Matrix) -> Result<()> {
        if x_train.rows() == 0 {
            return Err(NamError::Usage("cannot center on an empty dataset".into()));
        }
        let contribs = self.contributions(x_train)?;
        let n = x_train.rows() as f64;
        for (j, mean) in contribs.column_sums().into_iter().enumerate() {
            if !self.active[j] {
                continue;
            }
            let mean = mean / n;
            self.offsets[j] += mean;
            self.bias += mean;
        }
        self.centered = true;
        Ok(())
    }

    /// Removes feature `k` from the model; requires a centered model so the
    /// removal does not shift the average prediction.
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

    /// `(x, f_k(x) - c_k)` on an even grid over feature `k`'s training range.
    pub fn shape_table(&self, k: usize, grid: usize) -> Result<Vec<(f64, f64)>> {
        if k >= self.num_features() {
            return Err(NamError::Index {
                index: k,
                len: self.num_features(),
            });
        }
        let xs = grid_points(self.meta.ranges[k], grid)?;
        let ys: Vec<f64> = if self.active[k] {
            let out = self.nets[k].predict(&xs)?;
            out.data().iter().map(|v| v - self.offsets[k]).collect()
        } else {
            vec![0.0; xs.len()]
        };
        Ok(xs.into_iter().zip(ys).collect())
    }
}

/// `grid` evenly spaced points covering `[lo, hi]`.
pub fn grid_points(range: (f64, f64), grid: usize) -> Result<Vec<f64>> {
    if grid < 2 {
        return Err(NamError::Usage("shape grid needs at least 2 points".into()));
    }
    let (lo, hi) = range;
    let step = (hi - lo) / (grid - 1) as f64;
    Ok((0..grid)
        .map(|i| if i + 1 == grid { hi } else { lo + step * i as f64 })
        .collect())
}

impl Predictor for NamModel {
    fn links(&self) -> Vec<Link> {
        vec![self.link]
    }

    fn predict_logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(Matrix::column_vector(&self.logits(x)?))
    }
}

pub type NamEnsemble = Ensemble<NamModel>;

impl Ensemble<NamModel> {
    /// Mean member prediction for a single-task ensemble.
    pub fn predict_vec(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.into_data())
    }

    pub fn link(&self) -> Link {
        self.members[0].link
    }

    pub fn meta(&self) -> &FeatureMeta {
        &self.members[0].meta
    }

    pub fn is_centered(&self) -> bool {
        self.members.iter().all(|m| m.centered)
    }

    pub fn center(&mut self, x_train: &Matrix) -> Result<()> {
        self.members.iter_mut().try_for_each(|m| m.center(x_train))
    }

    pub fn zero_out_feature(&mut self, k: usize) -> Result<()> {
        self.members.iter_mut().try_for_each(|m| m.zero_out_feature(k))
    }

    /// Mean bias and mean per-feature contributions; these sum to the
    /// ensemble logit.
    pub fn contributions(&self, x: &Matrix) -> Result<(f64, Matrix)> {
        let mut bias = 0.0;
        let mut acc: Option<Matrix> = None;
        for (i, m) in self.members.iter().enumerate() {
            let c = m.contributions(x)?;
            let mut b = [bias];
            accumulate_mean(&mut b, &[m.bias], i);
            bias = b[0];
            match acc.as_mut() {
                None => acc = Some(c),
                Some(a) => accumulate_mean(a.data_mut(), c.data(), i),
            }
        }
        Ok((bias, acc.ok_or_else(|| NamError::Usage("empty ensemble".into()))?))
    }

    /// One shape table per member, sharing the same x grid.
    pub fn shape_tables(&self, k: usize, grid: usize) -> Result<Vec<Vec<(f64, f64)>>> {
        self.members.iter().map(|m| m.shape_table(k, grid)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_net::{Layer, LayerKind, LayerStack};
    use crate::tensor::Activation;

    /// A feature net computing `slope * x + intercept` exactly.
    pub(crate) fn linear_net(k: usize, slope: f64, intercept: f64) -> FeatureNet {
        FeatureNet {
            config: FeatureNetConfig::standard(vec![]),
            stack: LayerStack {
                layers: vec![Layer::dense(
                    Matrix::from_vec(1, 1, vec![slope]).unwrap(),
                    vec![intercept],
                    Activation::Identity,
                )],
                dropout: 0.0,
            },
            feature_index: k,
        }
    }

    pub(crate) fn hand_model(nets: Vec<FeatureNet>, bias: f64, link: Link) -> NamModel {
        let k = nets.len();
        NamModel {
            nets,
            bias,
            link,
            offsets: vec![0.0; k],
            active: vec![true; k],
            meta: FeatureMeta::uniform(k, (0.0, 1.0)),
            centered: false,
        }
    }

    fn random_model(k: usize, link: Link, seed: u64) -> NamModel {
        let cfg = FeatureNetConfig::standard(vec![8, 4]);
        let mut m = NamModel::build(&cfg, FeatureMeta::uniform(k, (-1.0, 1.0)), link, &mut Rng::new(seed)).unwrap();
        m.bias = 0.3;
        m
    }

    fn random_x(b: usize, k: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_vec(b, k, (0..b * k).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn constructed_logit() {
        let m = hand_model(vec![linear_net(0, 0.0, 0.0), linear_net(1, 1.0, 0.0)], 1.0, Link::Identity);
        let x = Matrix::from_rows(&[vec![5.0, 3.0]]).unwrap();
        assert_eq!(m.logits(&x).unwrap(), vec![4.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let m = random_model(3, Link::Identity, 1);
        assert!(matches!(m.logits(&Matrix::zeros(2, 2)), Err(NamError::Dimension(_))));
    }

    #[test]
    fn no_dropout_train_equals_eval() {
        let m = random_model(3, Link::Logistic, 2);
        let x = random_x(10, 3, 3);
        let train = m.forward(&x, true, &mut Rng::new(1), 0.0).unwrap();
        let eval = m.forward(&x, false, &mut Rng::new(2), 0.0).unwrap();
        assert_eq!(train.logits, eval.logits);
    }

    #[test]
    fn feature_dropout_is_unbiased() {
        let mut m = random_model(3, Link::Identity, 4);
        m.bias = 0.0;
        let x = random_x(1, 3, 5);
        let eval = m.logits(&x).unwrap()[0];
        let mut rng = Rng::new(6);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| m.forward(&x, true, &mut rng, 0.5).unwrap().logits[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - eval).abs() <= 0.02 * eval.abs(), "{mean} vs {eval}");
    }

    #[test]
    fn loss_symmetric_and_zero_cases() {
        let m = hand_model(vec![linear_net(0, 0.0, 0.0)], 0.0, Link::Logistic);
        let x = Matrix::from_rows(&[vec![0.3]]).unwrap();
        let l = m.eval_loss(&x, &[1.0], &Penalties::default()).unwrap();
        assert!((l.task_loss - 0.693147).abs() < 1e-6);

        let m = hand_model(vec![linear_net(0, 0.0, 0.0), linear_net(1, 0.0, 0.0)], 0.0, Link::Identity);
        let x = random_x(5, 2, 1);
        let l = m.eval_loss(&x, &[0.0; 5], &Penalties::default()).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn nan_target_is_data_error() {
        let m = random_model(2, Link::Identity, 1);
        let x = random_x(2, 2, 1);
        assert!(matches!(
            m.eval_loss(&x, &[0.0, f64::NAN], &Penalties::default()),
            Err(NamError::Data(_))
        ));
    }

    #[test]
    fn breakdown_total_identity() {
        let m = random_model(3, Link::Logistic, 7);
        let x = random_x(6, 3, 8);
        let pen = Penalties {
            output_penalty: 0.3,
            weight_decay: 0.01,
            feature_dropout: 0.0,
        };
        let l = m.eval_loss(&x, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0], &pen).unwrap();
        assert!((l.total - (l.task_loss + 0.3 * l.output_penalty + 0.01 * l.weight_decay)).abs() < 1e-15);
    }

    #[test]
    fn center_is_prediction_preserving_and_idempotent() {
        let mut m = random_model(3, Link::Logistic, 11);
        let train = random_x(50, 3, 12);
        let probe = random_x(100, 3, 13);
        let before = m.logits(&probe).unwrap();
        m.center(&train).unwrap();
        let after = m.logits(&probe).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-10);
        }
        let c = m.contributions(&train).unwrap();
        for s in c.column_sums() {
            assert!((s / 50.0).abs() < 1e-8);
        }
        let once = m.clone();
        m.center(&train).unwrap();
        for (a, b) in once.offsets.iter().zip(&m.offsets) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((once.bias - m.bias).abs() < 1e-12);
        assert!(matches!(m.center(&Matrix::zeros(0, 3)), Err(NamError::Usage(_))));
    }

    #[test]
    fn zero_out_rules() {
        let mut m = random_model(3, Link::Logistic, 21);
        assert!(matches!(m.zero_out_feature(0), Err(NamError::Usage(_))));
        let train = random_x(80, 3, 22);
        m.center(&train).unwrap();
        assert!(matches!(m.zero_out_feature(3), Err(NamError::Index { .. })));
        let mean = |m: &NamModel| m.logits(&train).unwrap().iter().sum::<f64>() / 80.0;
        let before = mean(&m);
        let bias = m.bias;
        m.zero_out_feature(1).unwrap();
        assert_eq!(m.bias, bias);
        assert!((mean(&m) - before).abs() < 1e-6);
        assert!(m.contributions(&train).unwrap().column(1).iter().all(|v| *v == 0.0));
        m.zero_out_feature(0).unwrap();
        m.zero_out_feature(2).unwrap();
        assert!(m.logits(&train).unwrap().iter().all(|v| *v == m.bias));
    }

    #[test]
    fn zero_out_flat_feature_keeps_predictions() {
        let mut m = hand_model(vec![linear_net(0, 2.0, 0.0), linear_net(1, 0.0, 0.7)], 0.1, Link::Identity);
        let train = random_x(20, 2, 1);
        m.center(&train).unwrap();
        let before = m.logits(&train).unwrap();
        m.zero_out_feature(1).unwrap();
        let after = m.logits(&train).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_table_identity_net() {
        let mut m = hand_model(vec![linear_net(0, 1.0, 0.0)], 0.0, Link::Identity);
        m.offsets[0] = 0.25;
        let t = m.shape_table(0, 3).unwrap();
        assert_eq!(t, vec![(0.0, -0.25), (0.5, 0.25), (1.0, 0.75)]);
        assert_eq!(t, m.shape_table(0, 3).unwrap());
        assert!(m.shape_table(0, 1).is_err());
    }

    #[test]
    fn shape_table_matches_hand_built_exu() {
        let exu = Layer {
            kind: LayerKind::Exu,
            weights: Matrix::from_vec(1, 2, vec![0.0, 2f64.ln()]).unwrap(),
            bias: vec![0.0, 0.5],
            activation: Activation::ReluN(1.0),
        };
        let out = Layer::dense(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap(), vec![0.0], Activation::Identity);
        let net = FeatureNet {
            config: FeatureNetConfig::exu(2, 1.0),
            stack: LayerStack { layers: vec![exu, out], dropout: 0.0 },
            feature_index: 0,
        };
        let m = hand_model(vec![net], 0.0, Link::Identity);
        for (x, f) in m.shape_table(0, 5).unwrap() {
            // min(max(x,0),1) + min(max(2(x-0.5),0),1)
            let want = x.clamp(0.0, 1.0) + (2.0 * (x - 0.5)).clamp(0.0, 1.0);
            assert!((f - want).abs() < 1e-15, "x={x}");
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let mut m = random_model(3, Link::Logistic, 31);
        m.offsets = vec![0.1, -0.2, 0.05];
        let x = random_x(7, 3, 32);
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let pen = Penalties {
            output_penalty: 0.2,
            weight_decay: 0.05,
            feature_dropout: 0.0,
        };
        let (_, g) = m.loss_and_grad(&x, &y, &pen, &mut Rng::new(0)).unwrap();
        let analytic = g.flatten();
        let h = 1e-5;
        let mut rng = Rng::new(33);
        for _ in 0..60 {
            let i = rng.below(m.num_params());
            let orig = m.param(i);
            m.set_param(i, orig + h);
            let lp = m.eval_loss(&x, &y, &pen).unwrap().total;
            m.set_param(i, orig - h);
            let lm = m.eval_loss(&x, &y, &pen).unwrap().total;
            m.set_param(i, orig);
            let numeric = (lp - lm) / (2.0 * h);
            let rel = crate::feature_net::relative_error(analytic[i], numeric);
            assert!(rel < 1e-5, "param {i}: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn descent_sanity() {
        let mut m = random_model(2, Link::Identity, 41);
        let x = random_x(10, 2, 42);
        let y: Vec<f64> = (0..10).map(|i| x.get(i, 0) - 0.5 * x.get(i, 1)).collect();
        let pen = Penalties::default();
        let start = m.eval_loss(&x, &y, &pen).unwrap().total;
        for _ in 0..100 {
            let (_, g) = m.loss_and_grad(&x, &y, &pen, &mut Rng::new(0)).unwrap();
            let gf = g.flatten();
            let mut p = m.flatten();
            for (pv, gv) in p.iter_mut().zip(&gf) {
                *pv -= 0.01 * gv;
            }
            m.set_flat(&p);
        }
        assert!(m.eval_loss(&x, &y, &pen).unwrap().total < start);
    }

    #[test]
    fn ensemble_of_identical_members_is_exact() {
        let m = random_model(2, Link::Logistic, 51);
        let e = NamEnsemble::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
        let x = random_x(5, 2, 52);
        let single = m.predict_vec(&x).unwrap();
        let ens = e.predict_vec(&x).unwrap();
        assert_eq!(single, ens);
        let one = NamEnsemble::new(vec![m.clone()]).unwrap();
        assert_eq!(one.predict_vec(&x).unwrap(), single);
    }

    #[test]
    fn ensemble_contributions_sum_to_prediction() {
        let mut a = random_model(3, Link::Logistic, 61);
        let mut b = random_model(3, Link::Logistic, 62);
        let x = random_x(30, 3, 63);
        a.center(&x).unwrap();
        b.center(&x).unwrap();
        let e = NamEnsemble::new(vec![a, b]).unwrap();
        let (bias, c) = e.contributions(&x).unwrap();
        let p = e.predict_vec(&x).unwrap();
        for i in 0..30 {
            let z = bias + c.row(i).iter().sum::<f64>();
            assert!((crate::tensor::sigmoid(z) - p[i]).abs() < 1e-12);
        }
    }
}
