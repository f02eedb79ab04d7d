//! Link functions, the shared prediction interface, and logit-averaging ensembles.

use serde::{Deserialize, Serialize};

use crate::error::{NamError, Result};
use crate::tensor::{sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    /// Regression: the prediction is the logit itself.
    Identity,
    /// Binary classification: `sigmoid(logit)`.
    Logistic,
}

impl Link {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Link::Identity => z,
            Link::Logistic => sigmoid(z),
        }
    }
}

/// Lower/upper probability clamp used before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-example task loss and its derivative with respect to the logit.
///
/// Cross-entropy clamps `p` to `[1e-7, 1 - 1e-7]` for the value; the
/// derivative is the unclamped `p - y`.
pub fn task_loss(link: Link, logit: f64, y: f64) -> Result<(f64, f64)> {
    if !y.is_finite() {
        return Err(NamError::Data(format!("non-finite target {y}")));
    }
    match link {
        Link::Identity => {
            let r = logit - y;
            Ok((r * r, 2.0 * r))
        }
        Link::Logistic => {
            if y != 0.0 && y != 1.0 {
                return Err(NamError::Data(format!(
                    "classification target must be 0 or 1, got {y}"
                )));
            }
            let p = sigmoid(logit);
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let loss = -y * pc.ln() - (1.0 - y) * (1.0 - pc).ln();
            Ok((loss, p - y))
        }
    }
}

/// Components of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub output_penalty: f64,
    pub weight_decay: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(task_loss: f64, output_penalty: f64, weight_decay: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            task_loss,
            output_penalty,
            weight_decay,
            total: task_loss + lambda1 * output_penalty + lambda2 * weight_decay,
        }
    }
}

/// Anything that maps a feature matrix to one logit per task.
pub trait Predictor {
    fn links(&self) -> Vec<Link>;

    /// `[B x T]` logits.
    fn predict_logits(&self, x: &Matrix) -> Result<Matrix>;

    /// `[B x T]` predictions with each task's link applied.
    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = self.predict_logits(x)?;
        let links = self.links();
        let t = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = links[i % t].apply(*v);
        }
        Ok(out)
    }
}

/// Members averaged in logit space; the link is applied once afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble<M> {
    pub members: Vec<M>,
}

impl<M: Predictor> Ensemble<M> {
    pub fn new(members: Vec<M>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| NamError::Usage("an ensemble needs at least one member".into()))?;
        let links = first.links();
        if members.iter().any(|m| m.links() != links) {
            return Err(NamError::Config("ensemble members disagree on link".into()));
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Running mean that is exact when every sample is identical.
pub(crate) fn accumulate_mean(acc: &mut [f64], sample: &[f64], count_before: usize) {
    let n = (count_before + 1) as f64;
    for (a, s) in acc.iter_mut().zip(sample) {
        *a += (s - *a) / n;
    }
}

impl<M: Predictor> Predictor for Ensemble<M> {
    fn links(&self) -> Vec<Link> {
        self.members.first().map(|m| m.links()).unwrap_or_default()
    }

    fn predict_logits(&self, x: &Matrix) -> Result<Matrix> {
        if self.members.is_empty() {
            return Err(NamError::Usage("empty ensemble".into()));
        }
        let mut acc: Option<Matrix> = None;
        for (i, m) in self.members.iter().enumerate() {
            let l = m.predict_logits(x)?;
            match acc.as_mut() {
                None => acc = Some(l),
                Some(a) => accumulate_mean(a.data_mut(), l.data(), i),
            }
        }
        Ok(acc.expect("non-empty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64, Link);

    impl Predictor for Constant {
        fn links(&self) -> Vec<Link> {
            vec![self.1]
        }
        fn predict_logits(&self, x: &Matrix) -> Result<Matrix> {
            Ok(Matrix::filled(x.rows(), 1, self.0))
        }
    }

    #[test]
    fn two_member_logit_mean() {
        let e = Ensemble::new(vec![Constant(0.0, Link::Logistic), Constant(2.0, Link::Logistic)]).unwrap();
        let p = e.predict(&Matrix::zeros(1, 1)).unwrap().get(0, 0);
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p - want).abs() < 1e-15);
        assert!((p - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn regression_mean_of_outputs() {
        let e = Ensemble::new(vec![
            Constant(1.0, Link::Identity),
            Constant(2.0, Link::Identity),
            Constant(6.0, Link::Identity),
        ])
        .unwrap();
        assert!((e.predict(&Matrix::zeros(2, 1)).unwrap().get(1, 0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_members_are_exact() {
        let v = 0.1 + 0.2;
        let e = Ensemble::new((0..7).map(|_| Constant(v, Link::Identity)).collect()).unwrap();
        assert_eq!(e.predict(&Matrix::zeros(1, 1)).unwrap().get(0, 0).to_bits(), v.to_bits());
    }

    #[test]
    fn empty_and_mixed_links_rejected() {
        assert!(matches!(Ensemble::<Constant>::new(vec![]), Err(NamError::Usage(_))));
        assert!(Ensemble::new(vec![Constant(0.0, Link::Identity), Constant(0.0, Link::Logistic)]).is_err());
    }

    #[test]
    fn cross_entropy_symmetric_case() {
        let (l, g) = task_loss(Link::Logistic, 0.0, 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g + 0.5).abs() < 1e-15);
        assert!(task_loss(Link::Logistic, 0.0, f64::NAN).is_err());
        assert!(task_loss(Link::Logistic, 0.0, 0.5).is_err());
        // Clamp keeps the loss finite for saturated logits.
        let (l, _) = task_loss(Link::Logistic, 800.0, 0.0).unwrap();
        assert!((l + (PROB_CLAMP).ln()).abs() < 1e-6);
    }
}
