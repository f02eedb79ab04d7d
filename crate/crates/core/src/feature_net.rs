//! Univariate subnets: a layer stack mapping one feature to its contribution.
//!
//! Two architectures are supported. `Standard` is a ReLU multilayer
//! perceptron; `Exu` is a single hidden layer of exp-centered units with a
//! ReLU-n cap followed by a linear read-out. Hidden layers may use inverted
//! dropout during training; the output layer is always linear.

use serde::{Deserialize, Serialize};

use crate::error::{NamError, Result};
use crate::tensor::{
    affine_forward, exu_backward, exu_forward, gemm, init_dense, init_exu, Activation, ExuCache,
    InitScheme, Matrix, Parameters, Rng,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    Standard {
        hidden: Vec<usize>,
        activation: Activation,
        init: InitScheme,
    },
    Exu {
        units: usize,
        cap: f64,
    },
}

impl Architecture {
    pub fn standard() -> Self {
        Architecture::Standard {
            hidden: vec![64, 64, 32],
            activation: Activation::Relu,
            init: InitScheme::Kaiming,
        }
    }

    pub fn exu() -> Self {
        Architecture::Exu {
            units: 1024,
            cap: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub arch: Architecture,
    /// Unit dropout rate on hidden layers.
    pub dropout: f64,
    pub output_dim: usize,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::standard(),
            dropout: 0.0,
            output_dim: 1,
        }
    }
}

impl FeatureNetConfig {
    pub fn standard(hidden: Vec<usize>) -> Self {
        Self {
            arch: Architecture::Standard {
                hidden,
                activation: Activation::Relu,
                init: InitScheme::Kaiming,
            },
            ..Self::default()
        }
    }

    pub fn exu(units: usize, cap: f64) -> Self {
        Self {
            arch: Architecture::Exu { units, cap },
            ..Self::default()
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NamError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.output_dim == 0 {
            return Err(NamError::Config("output_dim must be positive".into()));
        }
        match &self.arch {
            Architecture::Standard {
                hidden, activation, ..
            } => {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(NamError::Config("hidden layer sizes must be positive".into()));
                }
                activation.validate()
            }
            Architecture::Exu { units, cap } => {
                if *units == 0 {
                    return Err(NamError::Config("ExU layer needs at least one unit".into()));
                }
                Activation::ReluN(*cap).validate()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// `act(exp(w) * (x - b))`; weights are `1 x H` log-scales, biases are centers.
    Exu,
    /// `act(x W + b)`.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn dense(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            weights,
            bias,
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn pre_activation(&self, input: &Matrix) -> Result<Matrix> {
        match self.kind {
            LayerKind::Dense => affine_forward(input, &self.weights, &self.bias),
            LayerKind::Exu => {
                let x = input.data();
                let w = self.weights.data();
                let mut pre = Matrix::zeros(x.len(), w.len());
                let scale: Vec<f64> = w.iter().map(|v| v.exp()).collect();
                for (j, &xj) in x.iter().enumerate() {
                    for ((p, s), b) in pre.row_mut(j).iter_mut().zip(&scale).zip(&self.bias) {
                        *p = s * (xj - b);
                    }
                }
                Ok(pre)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients for every layer of a stack, in layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(stack: &LayerStack) -> Self {
        Self {
            layers: stack
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|v| *v == 0.0)
    }
}

impl Parameters for ParamGrads {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            f(l.weights.data());
            f(&l.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.weights.data_mut());
            f(&mut l.bias);
        }
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Exu(ExuCache),
    Dense { input: Matrix, pre: Matrix },
}

/// Intermediate values of a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    /// Inverted-dropout masks per hidden layer (entries 0 or 1/(1-rate)).
    masks: Vec<Option<Matrix>>,
    batch: usize,
}

impl ForwardCache {
    pub fn masks(&self) -> &[Option<Matrix>] {
        &self.masks
    }

    /// Pre-activations of each layer, row-major `[B x fan_out]`.
    pub fn pre_activations(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .map(|c| match c {
                LayerCache::Exu(e) => &e.pre,
                LayerCache::Dense { pre, .. } => pre,
            })
            .collect()
    }
}

/// An ordered stack of layers with dropout between hidden layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
    pub dropout: f64,
}

impl LayerStack {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    /// Dense ReLU-style stack with a linear output layer.
    pub fn dense(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        init: InitScheme,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(Layer::dense(
                init_dense(rng, fan_in, h, init),
                vec![0.0; h],
                activation,
            ));
            fan_in = h;
        }
        layers.push(Layer::dense(
            init_dense(rng, fan_in, output_dim, init),
            vec![0.0; output_dim],
            Activation::Identity,
        ));
        Self {
            layers,
            dropout: 0.0,
        }
    }

    /// Eval-mode forward: no dropout, no cache, no randomness.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        let mut cur = input.clone();
        for layer in &self.layers {
            let mut pre = layer.pre_activation(&cur)?;
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                pre.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            cur = pre;
        }
        Ok(cur)
    }

    /// Training-mode forward. Dropout masks are drawn from `rng` only when
    /// the dropout rate is positive.
    pub fn forward_train(&self, input: &Matrix, rng: &mut Rng) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.input_dim() {
            return Err(NamError::Dimension(format!(
                "stack expects {} inputs, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let n_layers = self.layers.len();
        let mut caches = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut out, cache) = match layer.kind {
                LayerKind::Exu => {
                    let (out, cache) = exu_forward(
                        cur.data(),
                        layer.weights.data(),
                        &layer.bias,
                        layer.activation,
                    )?;
                    (out, LayerCache::Exu(cache))
                }
                LayerKind::Dense => {
                    let pre = affine_forward(&cur, &layer.weights, &layer.bias)?;
                    let mut out = pre.clone();
                    if layer.activation != Activation::Identity {
                        let act = layer.activation;
                        out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
                    }
                    (out, LayerCache::Dense { input: cur, pre })
                }
            };
            let hidden = i + 1 < n_layers;
            let mask = if hidden && self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let scale = 1.0 / keep;
                let mut m = Matrix::zeros(out.rows(), out.cols());
                for v in m.data_mut() {
                    *v = if rng.bernoulli(keep) { scale } else { 0.0 };
                }
                for (o, k) in out.data_mut().iter_mut().zip(m.data()) {
                    *o *= k;
                }
                Some(m)
            } else {
                None
            };
            caches.push(cache);
            masks.push(mask);
            cur = out;
        }
        let batch = input.rows();
        Ok((
            cur,
            ForwardCache {
                layers: caches,
                masks,
                batch,
            },
        ))
    }

    /// Gradients of `sum_b <grad_out[b], out[b]>` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<ParamGrads> {
        if cache.layers.len() != self.layers.len() {
            return Err(NamError::Usage(
                "forward cache does not belong to this network".into(),
            ));
        }
        if grad_out.shape() != (cache.batch, self.output_dim()) {
            return Err(NamError::Dimension(format!(
                "grad_out is {}x{}, expected {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                cache.batch,
                self.output_dim()
            )));
        }
        let mut grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if let Some(mask) = &cache.masks[i] {
                for (v, m) in g.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
            }
            match &cache.layers[i] {
                LayerCache::Exu(ec) => {
                    let eg = exu_backward(ec, &g)?;
                    grads[i] = Some(LayerGrads {
                        weights: Matrix::from_vec(1, eg.w.len(), eg.w)?,
                        bias: eg.b,
                    });
                    g = Matrix::column_vector(&eg.x);
                }
                LayerCache::Dense { input, pre } => {
                    if layer.activation != Activation::Identity {
                        let act = layer.activation;
                        for (v, z) in g.data_mut().iter_mut().zip(pre.data()) {
                            *v *= act.derivative(*z);
                        }
                    }
                    let mut gw = Matrix::zeros(layer.fan_in(), layer.fan_out());
                    gemm(input, true, &g, false, &mut gw, 0.0);
                    let gb = g.column_sums();
                    if i > 0 {
                        let mut gin = Matrix::zeros(g.rows(), layer.fan_in());
                        gemm(&g, false, &layer.weights, true, &mut gin, 0.0);
                        g = gin;
                    }
                    grads[i] = Some(LayerGrads {
                        weights: gw,
                        bias: gb,
                    });
                }
            }
        }
        Ok(ParamGrads {
            layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        })
    }

    /// Sum of squared weights over all layers (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.sum_squares()).sum()
    }

    /// Adds `scale * 2 w` to the weight gradients.
    pub fn add_weight_decay_grad(&self, grads: &mut ParamGrads, scale: f64) {
        for (l, g) in self.layers.iter().zip(&mut grads.layers) {
            for (gv, w) in g.weights.data_mut().iter_mut().zip(l.weights.data()) {
                *gv += 2.0 * scale * w;
            }
        }
    }
}

impl Parameters for LayerStack {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            f(l.weights.data());
            f(&l.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.weights.data_mut());
            f(&mut l.bias);
        }
    }
}

/// One univariate shape function `f_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNet {
    pub config: FeatureNetConfig,
    pub stack: LayerStack,
    pub feature_index: usize,
}

impl FeatureNet {
    pub fn build(
        cfg: &FeatureNetConfig,
        feature_index: usize,
        feature_range: (f64, f64),
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (lo, hi) = feature_range;
        if !(lo <= hi) {
            return Err(NamError::Config(format!(
                "feature range [{lo}, {hi}] is empty"
            )));
        }
        let mut stack = match &cfg.arch {
            Architecture::Standard {
                hidden,
                activation,
                init,
            } => LayerStack::dense(1, hidden, cfg.output_dim, *activation, *init, rng),
            Architecture::Exu { units, cap } => {
                let (w, b) = init_exu(rng, *units, feature_range);
                let exu = Layer {
                    kind: LayerKind::Exu,
                    weights: Matrix::from_vec(1, *units, w)?,
                    bias: b,
                    activation: Activation::ReluN(*cap),
                };
                let out = Layer::dense(
                    init_dense(rng, *units, cfg.output_dim, InitScheme::Xavier),
                    vec![0.0; cfg.output_dim],
                    Activation::Identity,
                );
                LayerStack {
                    layers: vec![exu, out],
                    dropout: 0.0,
                }
            }
        };
        stack.dropout = cfg.dropout;
        Ok(Self {
            config: cfg.clone(),
            stack,
            feature_index,
        })
    }

    pub fn set_dropout(&mut self, rate: f64) {
        self.config.dropout = rate;
        self.stack.dropout = rate;
    }

    pub fn output_dim(&self) -> usize {
        self.stack.output_dim()
    }

    /// Eval-mode outputs `[B x output_dim]`; deterministic.
    pub fn predict(&self, x: &[f64]) -> Result<Matrix> {
        self.stack.predict(&Matrix::column_vector(x))
    }

    /// Forward pass. In train mode dropout is active and a cache is returned.
    pub fn forward(
        &self,
        x: &[f64],
        train_mode: bool,
        rng: &mut Rng,
    ) -> Result<(Matrix, Option<ForwardCache>)> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NamError::Numeric(format!(
                "non-finite input to feature net {}",
                self.feature_index
            )));
        }
        if train_mode {
            let (out, cache) = self.stack.forward_train(&Matrix::column_vector(x), rng)?;
            Ok((out, Some(cache)))
        } else {
            Ok((self.predict(x)?, None))
        }
    }

    pub fn backward(&self, cache: Option<&ForwardCache>, grad_out: &Matrix) -> Result<ParamGrads> {
        let cache = cache.ok_or_else(|| {
            NamError::Usage("backward requires the cache of a train-mode forward".into())
        })?;
        self.stack.backward(cache, grad_out)
    }
}

impl Parameters for FeatureNet {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.stack.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.stack.visit_mut(f)
    }
}

/// Relative error with a small absolute floor on the denominator, so that
/// gradients that are zero (or within rounding of zero) compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: usize,
    pub probes: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn failing_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| !l.passed).map(|l| l.layer).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

/// Draws up to `n` inputs in `range` whose pre-activations all stay at least
/// `margin` away from activation kinks.
pub fn kink_free_inputs(
    stack: &LayerStack,
    range: (f64, f64),
    n: usize,
    margin: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    let mut scratch = Rng::new(0);
    while out.len() < n && attempts < 1000 * n.max(1) {
        attempts += 1;
        let x = rng.uniform_range(range.0, range.1);
        let (_, cache) = stack.forward_train(&Matrix::column_vector(&[x]), &mut scratch)?;
        let clear = stack.layers.iter().zip(cache.pre_activations()).all(|(l, pre)| {
            pre.data()
                .iter()
                .all(|z| l.activation.kink_distance(*z) > margin)
        });
        if clear {
            out.push(x);
        }
    }
    Ok(out)
}

/// Finite-difference check of [`FeatureNet::backward`].
pub fn verify_gradients(net: &FeatureNet, probes: usize, tol: f64, rng: &mut Rng) -> Result<GradCheckReport> {
    verify_gradients_with(net, probes, tol, rng, |n, x, g| {
        let (_, cache) = n.stack.forward_train(x, &mut Rng::new(0))?;
        n.stack.backward(&cache, g)
    })
}

/// Like [`verify_gradients`] but with a caller-supplied analytic gradient,
/// which lets tests confirm that a broken backward pass is caught.
pub fn verify_gradients_with<F>(
    net: &FeatureNet,
    probes: usize,
    tol: f64,
    rng: &mut Rng,
    analytic: F,
) -> Result<GradCheckReport>
where
    F: Fn(&FeatureNet, &Matrix, &Matrix) -> Result<ParamGrads>,
{
    if probes == 0 {
        return Ok(GradCheckReport {
            layers: Vec::new(),
            tolerance: tol,
        });
    }
    let mut probe_net = net.clone();
    probe_net.set_dropout(0.0);
    let range = feature_range_of(&probe_net);
    let xs = kink_free_inputs(&probe_net.stack, range, 6, 1e-3, rng)?;
    if xs.is_empty() {
        return Err(NamError::Numeric(
            "could not find inputs away from activation kinks".into(),
        ));
    }
    let x = Matrix::column_vector(&xs);
    let out_dim = probe_net.output_dim();
    let upstream = Matrix::from_vec(
        xs.len(),
        out_dim,
        (0..xs.len() * out_dim).map(|_| rng.normal(0.0, 1.0)).collect(),
    )?;
    let grads = analytic(&probe_net, &x, &upstream)?;
    let objective = |n: &FeatureNet| -> Result<f64> {
        let out = n.stack.predict(&x)?;
        Ok(out.data().iter().zip(upstream.data()).map(|(o, g)| o * g).sum())
    };

    let n_layers = probe_net.stack.layers.len();
    let mut per_layer: Vec<(usize, f64)> = vec![(0, 0.0); n_layers];
    let h = 1e-5;
    for p in 0..probes {
        let layer = p % n_layers;
        let use_bias = (p / n_layers) % 2 == 1;
        let (analytic_value, apply): (f64, Box<dyn Fn(&mut FeatureNet, f64)>) = {
            let l = &probe_net.stack.layers[layer];
            if use_bias {
                let i = rng.below(l.bias.len());
                (
                    grads.layers[layer].bias[i],
                    Box::new(move |n: &mut FeatureNet, d: f64| n.stack.layers[layer].bias[i] += d),
                )
            } else {
                let i = rng.below(l.weights.data().len());
                (
                    grads.layers[layer].weights.data()[i],
                    Box::new(move |n: &mut FeatureNet, d: f64| {
                        n.stack.layers[layer].weights.data_mut()[i] += d
                    }),
                )
            }
        };
        let mut plus = probe_net.clone();
        apply(&mut plus, h);
        let mut minus = probe_net.clone();
        apply(&mut minus, -h);
        let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * h);
        let rel = relative_error(analytic_value, numeric);
        let entry = &mut per_layer[layer];
        entry.0 += 1;
        entry.1 = entry.1.max(rel);
    }
    Ok(GradCheckReport {
        layers: per_layer
            .into_iter()
            .enumerate()
            .filter(|(_, (n, _))| *n > 0)
            .map(|(layer, (n, e))| LayerCheck {
                layer,
                probes: n,
                max_rel_error: e,
                passed: e < tol,
            })
            .collect(),
        tolerance: tol,
    })
}

fn feature_range_of(net: &FeatureNet) -> (f64, f64) {
    match net.stack.layers.first() {
        Some(l) if l.kind == LayerKind::Exu => {
            let lo = l.bias.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = l.bias.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lo < hi {
                (lo, hi)
            } else {
                (lo - 1.0, lo + 1.0)
            }
        }
        _ => (-1.0, 1.0),
    }
}
