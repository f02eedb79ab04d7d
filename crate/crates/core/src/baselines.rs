//! Linear/logistic regression and a fully connected network over all features.

use serde::{Deserialize, Serialize};

use crate::ensemble::{task_loss, Link, LossBreakdown, Predictor};
use crate::error::{NamError, Result};
use crate::feature_net::LayerStack;
use crate::model::{check_input, Penalties};
use crate::tensor::{Activation, InitScheme, Matrix, Parameters, Rng};
use crate::trainer::{train, Samples, TrainConfig, TrainReport, Trainable};

/// `g(E[y]) = b + sum_k w_k x_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub link: Link,
}

impl LinearModel {
    pub fn zeros(k: usize, link: Link) -> Self {
        Self {
            weights: vec![0.0; k],
            bias: 0.0,
            link,
        }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        check_input(x, self.weights.len())?;
        Ok((0..x.rows())
            .map(|i| self.bias + x.row(i).iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>())
            .collect())
    }

    /// Mean task loss plus `l2 * |w|^2`, and its gradient (weights then bias).
    pub fn objective(&self, data: &Samples, l2: f64) -> Result<(f64, Vec<f64>)> {
        let n = data.len();
        if n == 0 {
            return Err(NamError::Usage("cannot fit on an empty dataset".into()));
        }
        let z = self.logits(&data.x)?;
        let y = data.targets();
        let k = self.weights.len();
        let mut grad = vec![0.0; k + 1];
        let mut loss = 0.0;
        for i in 0..n {
            let (l, g) = task_loss(self.link, z[i], y[i])?;
            loss += l;
            let g = g / n as f64;
            for (gw, a) in grad.iter_mut().zip(data.x.row(i)) {
                *gw += g * a;
            }
            grad[k] += g;
        }
        loss /= n as f64;
        for (gw, w) in grad.iter_mut().zip(&self.weights) {
            *gw += 2.0 * l2 * w;
        }
        loss += l2 * self.weights.iter().map(|w| w * w).sum::<f64>();
        Ok((loss, grad))
    }
}

impl Parameters for LinearModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.weights);
        f(std::slice::from_ref(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.weights);
        f(std::slice::from_mut(&mut self.bias));
    }
}

impl Predictor for LinearModel {
    fn links(&self) -> Vec<Link> {
        vec![self.link]
    }

    fn predict_logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(Matrix::column_vector(&self.logits(x)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFitConfig {
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        Self {
            l2: 0.0,
            max_iters: 20_000,
            tol: 1e-10,
        }
    }
}

/// Full-batch gradient descent with a backtracking step size.
pub fn fit_linear(data: &Samples, link: Link, cfg: &LinearFitConfig) -> Result<LinearModel> {
    if !(cfg.l2 >= 0.0) {
        return Err(NamError::Config("l2 must be >= 0".into()));
    }
    let mut model = LinearModel::zeros(data.x.cols(), link);
    let (mut loss, mut grad) = model.objective(data, cfg.l2)?;
    let mut step = 1.0;
    for _ in 0..cfg.max_iters {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() < cfg.tol {
            break;
        }
        let current = model.flatten();
        loop {
            let trial: Vec<f64> = current.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
            model.set_flat(&trial);
            let (l, g) = model.objective(data, cfg.l2)?;
            if !l.is_finite() {
                return Err(NamError::Numeric("linear fit diverged".into()));
            }
            if l <= loss - 0.5 * step * gnorm2 {
                loss = l;
                grad = g;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                model.set_flat(&current);
                return Ok(model);
            }
        }
    }
    Ok(model)
}

/// Fully connected ReLU network over all features jointly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub stack: LayerStack,
    pub link: Link,
}

pub const DNN_LAYERS: usize = 10;
pub const DNN_UNITS: usize = 100;

impl Mlp {
    pub fn build(input_dim: usize, hidden: &[usize], link: Link, rng: &mut Rng) -> Self {
        Self {
            stack: LayerStack::dense(input_dim, hidden, 1, Activation::Relu, InitScheme::Kaiming, rng),
            link,
        }
    }

    /// Ten hidden layers of 100 units.
    pub fn full(input_dim: usize, link: Link, rng: &mut Rng) -> Self {
        Self::build(input_dim, &[DNN_UNITS; DNN_LAYERS], link, rng)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        check_input(x, self.stack.input_dim())?;
        Ok(self.stack.predict(x)?.into_data())
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.stack.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.stack.visit_mut(f)
    }
}

impl Predictor for Mlp {
    fn links(&self) -> Vec<Link> {
        vec![self.link]
    }

    fn predict_logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(Matrix::column_vector(&self.logits(x)?))
    }
}

fn mean_task_loss(link: Link, z: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = z.len();
    if n == 0 {
        return Err(NamError::Usage("loss over an empty batch".into()));
    }
    let mut loss = 0.0;
    let mut d = Vec::with_capacity(n);
    for (zi, yi) in z.iter().zip(y) {
        let (l, g) = task_loss(link, *zi, *yi)?;
        loss += l;
        d.push(g / n as f64);
    }
    Ok((loss / n as f64, d))
}

impl Trainable for Mlp {
    fn loss_and_grad(&self, batch: &Samples, pen: &Penalties, rng: &mut Rng) -> Result<(LossBreakdown, Vec<f64>)> {
        check_input(&batch.x, self.stack.input_dim())?;
        let (out, cache) = self.stack.forward_train(&batch.x, rng)?;
        let (task, d) = mean_task_loss(self.link, out.data(), &batch.targets())?;
        let mut g = self.stack.backward(&cache, &Matrix::column_vector(&d))?;
        if pen.weight_decay != 0.0 {
            self.stack.add_weight_decay_grad(&mut g, pen.weight_decay);
        }
        let wd = self.stack.weight_sq_norm();
        Ok((LossBreakdown::new(task, 0.0, wd, pen.output_penalty, pen.weight_decay), g.flatten()))
    }

    fn eval_loss(&self, data: &Samples, pen: &Penalties) -> Result<LossBreakdown> {
        let z = self.logits(&data.x)?;
        let (task, _) = mean_task_loss(self.link, &z, &data.targets())?;
        Ok(LossBreakdown::new(task, 0.0, self.stack.weight_sq_norm(), pen.output_penalty, pen.weight_decay))
    }

    fn set_dropout(&mut self, rate: f64) {
        self.stack.dropout = rate;
    }
}

/// Builds the ten-layer network and trains it with the shared trainer.
pub fn fit_full_dnn(
    train_set: &Samples,
    val_set: Option<&Samples>,
    link: Link,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Mlp, TrainReport)> {
    let mut model = Mlp::full(train_set.x.cols(), link, rng);
    let report = train(&mut model, train_set, val_set, cfg)?;
    Ok((model, report))
}
