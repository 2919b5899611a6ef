//! Per-client objectives with exact gradients.
//!
//! Three model families share one interface: separable quadratics (analytic
//! optimum, used to study drift), multinomial logistic regression, and a
//! one-hidden-layer tanh network. Classification losses are mean softmax
//! cross-entropy over the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{dot_unchecked, ParamVector};
use crate::scalar::Scalar;

/// A mini-batch of examples, features stored row-major.
///
/// Analytic models ignore the batch entirely; [`Batch::analytic`] builds the
/// zero-row placeholder they are driven with.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    features: Vec<T>,
    labels: Vec<usize>,
    dim: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn new(features: Vec<T>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                left: features.len(),
                right: labels.len() * dim,
            });
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    /// Placeholder for full-batch analytic objectives.
    pub fn analytic() -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            dim: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// The same examples in a different row order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut features = Vec::with_capacity(self.features.len());
        for &i in order {
            features.extend_from_slice(self.row(i));
        }
        Self {
            features,
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossModel<T> {
    /// `f(w) = 1/2 sum_k a_k (w_k - c_k)^2` with diagonal curvature `a > 0`.
    Quadratic {
        center: ParamVector<T>,
        curvature: ParamVector<T>,
    },
    /// Multinomial logistic regression: weights `[classes x input]` then bias.
    Logistic { input_dim: usize, num_classes: usize },
    /// `tanh` hidden layer then softmax output. Parameter layout is
    /// `W1 [hidden x input], b1 [hidden], W2 [classes x hidden], b2 [classes]`.
    Mlp {
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    },
}

impl<T: Scalar> LossModel<T> {
    pub fn quadratic(center: ParamVector<T>, curvature: ParamVector<T>) -> Result<Self> {
        if center.len() != curvature.len() {
            return Err(Error::DimensionMismatch {
                left: center.len(),
                right: curvature.len(),
            });
        }
        if center.is_empty() {
            return Err(Error::Empty("quadratic center"));
        }
        if curvature.iter().any(|&a| !(a > T::zero()) || !a.is_finite()) {
            return Err(invalid("curvature", "entries must be finite and > 0"));
        }
        Ok(Self::Quadratic { center, curvature })
    }

    pub fn logistic(input_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 {
            return Err(invalid("logistic", "need input_dim >= 1 and >= 2 classes"));
        }
        Ok(Self::Logistic {
            input_dim,
            num_classes,
        })
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_classes < 2 {
            return Err(invalid("mlp", "need input/hidden dims >= 1 and >= 2 classes"));
        }
        Ok(Self::Mlp {
            input_dim,
            hidden_dim,
            num_classes,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Quadratic { .. } => ModelKind::Quadratic,
            Self::Logistic { .. } => ModelKind::Logistic,
            Self::Mlp { .. } => ModelKind::Mlp,
        }
    }

    pub fn num_params(&self) -> usize {
        match *self {
            Self::Quadratic { ref center, .. } => center.len(),
            Self::Logistic {
                input_dim,
                num_classes,
            } => num_classes * (input_dim + 1),
            Self::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => hidden_dim * (input_dim + 1) + num_classes * (hidden_dim + 1),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match *self {
            Self::Quadratic { .. } => None,
            Self::Logistic { num_classes, .. } | Self::Mlp { num_classes, .. } => {
                Some(num_classes)
            }
        }
    }

    fn input_dim(&self) -> Option<usize> {
        match *self {
            Self::Quadratic { .. } => None,
            Self::Logistic { input_dim, .. } | Self::Mlp { input_dim, .. } => Some(input_dim),
        }
    }

    /// Starting parameters. The MLP draws every weight and bias uniformly
    /// from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; the other models start at 0.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector<T> {
        match *self {
            Self::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => {
                let mut out = Vec::with_capacity(self.num_params());
                let s1 = 1.0 / (input_dim as f64).sqrt();
                let s2 = 1.0 / (hidden_dim as f64).sqrt();
                for _ in 0..hidden_dim * (input_dim + 1) {
                    out.push(T::of(rng.random_range(-s1..=s1)));
                }
                for _ in 0..num_classes * (hidden_dim + 1) {
                    out.push(T::of(rng.random_range(-s2..=s2)));
                }
                ParamVector::from_vec(out)
            }
            _ => ParamVector::zeros(self.num_params()),
        }
    }

    fn check(&self, w: &ParamVector<T>, batch: &Batch<T>) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                left: w.len(),
                right: self.num_params(),
            });
        }
        if let (Some(dim), Some(classes)) = (self.input_dim(), self.num_classes()) {
            if batch.is_empty() {
                return Err(Error::Empty("batch"));
            }
            if batch.dim() != dim {
                return Err(Error::DimensionMismatch {
                    left: batch.dim(),
                    right: dim,
                });
            }
            if let Some(&bad) = batch.labels().iter().find(|&&y| y >= classes) {
                return Err(invalid("labels", format!("label {bad} >= {classes} classes")));
            }
        }
        Ok(())
    }

    pub fn loss(&self, w: &ParamVector<T>, batch: &Batch<T>) -> Result<T> {
        self.check(w, batch)?;
        let value = match self {
            Self::Quadratic { center, curvature } => quadratic_value(w, center, curvature),
            _ => {
                let mut total = T::zero();
                let mut scratch = Scratch::new(self);
                for i in 0..batch.len() {
                    self.forward(w, batch.row(i), &mut scratch);
                    total = total + cross_entropy(&scratch.logits, batch.labels()[i]);
                }
                total / T::of_usize(batch.len())
            }
        };
        finite(value)
    }

    pub fn gradient(&self, w: &ParamVector<T>, batch: &Batch<T>) -> Result<ParamVector<T>> {
        self.loss_and_gradient(w, batch).map(|(_, g)| g)
    }

    /// Loss and its exact gradient from one forward/backward pass. A
    /// non-finite loss is reported as an error so callers can stop a
    /// diverging run.
    pub fn loss_and_gradient(
        &self,
        w: &ParamVector<T>,
        batch: &Batch<T>,
    ) -> Result<(T, ParamVector<T>)> {
        self.check(w, batch)?;
        let (value, grad) = match self {
            Self::Quadratic { center, curvature } => {
                let g = w
                    .iter()
                    .zip(center.iter())
                    .zip(curvature.iter())
                    .map(|((&wk, &ck), &ak)| ak * (wk - ck))
                    .collect();
                (quadratic_value(w, center, curvature), ParamVector::from_vec(g))
            }
            Self::Logistic { .. } | Self::Mlp { .. } => self.backprop(w, batch),
        };
        Ok((finite(value)?, grad))
    }

    fn forward(&self, w: &ParamVector<T>, x: &[T], s: &mut Scratch<T>) {
        let w = w.as_slice();
        match *self {
            Self::Logistic {
                input_dim,
                num_classes,
            } => {
                let (weights, bias) = w.split_at(num_classes * input_dim);
                for c in 0..num_classes {
                    let row = &weights[c * input_dim..(c + 1) * input_dim];
                    s.logits[c] = dot_unchecked(row, x) + bias[c];
                }
            }
            Self::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => {
                let (w1, rest) = w.split_at(hidden_dim * input_dim);
                let (b1, rest) = rest.split_at(hidden_dim);
                let (w2, b2) = rest.split_at(num_classes * hidden_dim);
                for h in 0..hidden_dim {
                    let row = &w1[h * input_dim..(h + 1) * input_dim];
                    s.hidden[h] = (dot_unchecked(row, x) + b1[h]).tanh();
                }
                for c in 0..num_classes {
                    let row = &w2[c * hidden_dim..(c + 1) * hidden_dim];
                    s.logits[c] = dot_unchecked(row, &s.hidden) + b2[c];
                }
            }
            Self::Quadratic { .. } => unreachable!("quadratic has no forward pass"),
        }
    }

    fn backprop(&self, w: &ParamVector<T>, batch: &Batch<T>) -> (T, ParamVector<T>) {
        let mut grad = vec![T::zero(); self.num_params()];
        let mut scratch = Scratch::new(self);
        let inv_b = T::one() / T::of_usize(batch.len());
        let mut total = T::zero();
        let mut dz = vec![T::zero(); scratch.logits.len()];
        for i in 0..batch.len() {
            let x = batch.row(i);
            let y = batch.labels()[i];
            self.forward(w, x, &mut scratch);
            total = total + cross_entropy(&scratch.logits, y);
            softmax_into(&scratch.logits, &mut dz);
            dz[y] = dz[y] - T::one();
            for d in dz.iter_mut() {
                *d = *d * inv_b;
            }
            match *self {
                Self::Logistic {
                    input_dim,
                    num_classes,
                } => {
                    let (gw, gb) = grad.split_at_mut(num_classes * input_dim);
                    for c in 0..num_classes {
                        let row = &mut gw[c * input_dim..(c + 1) * input_dim];
                        for (g, &xk) in row.iter_mut().zip(x) {
                            *g = *g + dz[c] * xk;
                        }
                        gb[c] = gb[c] + dz[c];
                    }
                }
                Self::Mlp {
                    input_dim,
                    hidden_dim,
                    num_classes,
                } => {
                    let w2 = &w.as_slice()[hidden_dim * (input_dim + 1)..];
                    let (g1, rest) = grad.split_at_mut(hidden_dim * input_dim);
                    let (gb1, rest) = rest.split_at_mut(hidden_dim);
                    let (g2, gb2) = rest.split_at_mut(num_classes * hidden_dim);
                    for c in 0..num_classes {
                        let row = &mut g2[c * hidden_dim..(c + 1) * hidden_dim];
                        for (g, &hk) in row.iter_mut().zip(&scratch.hidden) {
                            *g = *g + dz[c] * hk;
                        }
                        gb2[c] = gb2[c] + dz[c];
                    }
                    for h in 0..hidden_dim {
                        let mut back = T::zero();
                        for c in 0..num_classes {
                            back = back + w2[c * hidden_dim + h] * dz[c];
                        }
                        let a = scratch.hidden[h];
                        let da = back * (T::one() - a * a);
                        let row = &mut g1[h * input_dim..(h + 1) * input_dim];
                        for (g, &xk) in row.iter_mut().zip(x) {
                            *g = *g + da * xk;
                        }
                        gb1[h] = gb1[h] + da;
                    }
                }
                Self::Quadratic { .. } => unreachable!(),
            }
        }
        (total * inv_b, ParamVector::from_vec(grad))
    }

    /// Central-difference gradient, one coordinate at a time. Used as an
    /// independent check on [`LossModel::gradient`].
    pub fn finite_diff_gradient(
        &self,
        w: &ParamVector<T>,
        batch: &Batch<T>,
        h: T,
    ) -> Result<ParamVector<T>> {
        if !(h > T::zero()) || !h.is_finite() {
            return Err(invalid("h", "step must be finite and > 0"));
        }
        self.check(w, batch)?;
        let mut probe = w.clone();
        let mut out = Vec::with_capacity(w.len());
        let two_h = h + h;
        for k in 0..w.len() {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = self.loss(&probe, batch)?;
            probe[k] = orig - h;
            let down = self.loss(&probe, batch)?;
            probe[k] = orig;
            out.push((up - down) / two_h);
        }
        Ok(ParamVector::from_vec(out))
    }

    /// `|g - g_fd| / max(|g|, |g_fd|, 1e-12)`: relative distance between the
    /// analytic gradient and the central-difference oracle.
    pub fn gradient_check(&self, w: &ParamVector<T>, batch: &Batch<T>, h: T) -> Result<f64> {
        let g = self.gradient(w, batch)?;
        let fd = self.finite_diff_gradient(w, batch, h)?;
        let diff = g.sub(&fd)?.norm().as_f64();
        Ok(diff / g.norm().as_f64().max(fd.norm().as_f64()).max(1e-12))
    }

    /// Predicted class per row: argmax of the logits, ties going to the
    /// lowest class index.
    pub fn predict(&self, w: &ParamVector<T>, data: &Batch<T>) -> Result<Vec<usize>> {
        if self.kind() == ModelKind::Quadratic {
            return Err(invalid("model", "quadratic objectives have no classes"));
        }
        self.check(w, data)?;
        let mut scratch = Scratch::new(self);
        Ok((0..data.len())
            .map(|i| {
                self.forward(w, data.row(i), &mut scratch);
                argmax(&scratch.logits)
            })
            .collect())
    }

    /// Fraction of rows classified correctly.
    pub fn predict_accuracy(&self, w: &ParamVector<T>, data: &Batch<T>) -> Result<f64> {
        let predicted = self.predict(w, data)?;
        let correct = predicted
            .iter()
            .zip(data.labels())
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Minimizer of the uniform average of diagonal quadratics:
/// `w*_k = sum_i a_ik c_ik / sum_i a_ik`.
pub fn quadratic_optimum<T: Scalar>(models: &[LossModel<T>]) -> Result<ParamVector<T>> {
    let mut num: Option<ParamVector<T>> = None;
    let mut den: Option<ParamVector<T>> = None;
    for m in models {
        let LossModel::Quadratic { center, curvature } = m else {
            return Err(invalid("model", "optimum is only defined for quadratics"));
        };
        let weighted = ParamVector::from_vec(
            center
                .iter()
                .zip(curvature.iter())
                .map(|(&c, &a)| a * c)
                .collect(),
        );
        match (&mut num, &mut den) {
            (Some(n), Some(d)) => {
                if n.len() != weighted.len() {
                    return Err(Error::DimensionMismatch {
                        left: n.len(),
                        right: weighted.len(),
                    });
                }
                n.add_assign(&weighted);
                d.add_assign(curvature);
            }
            _ => {
                num = Some(weighted);
                den = Some(curvature.clone());
            }
        }
    }
    let (num, den) = num.zip(den).ok_or(Error::Empty("quadratic population"))?;
    Ok(ParamVector::from_vec(
        num.iter().zip(den.iter()).map(|(&n, &d)| n / d).collect(),
    ))
}

struct Scratch<T> {
    hidden: Vec<T>,
    logits: Vec<T>,
}

impl<T: Scalar> Scratch<T> {
    fn new(model: &LossModel<T>) -> Self {
        let hidden = match *model {
            LossModel::Mlp { hidden_dim, .. } => hidden_dim,
            _ => 0,
        };
        Self {
            hidden: vec![T::zero(); hidden],
            logits: vec![T::zero(); model.num_classes().unwrap_or(0)],
        }
    }
}

fn quadratic_value<T: Scalar>(w: &ParamVector<T>, c: &ParamVector<T>, a: &ParamVector<T>) -> T {
    let half = T::of(0.5);
    w.iter()
        .zip(c.iter())
        .zip(a.iter())
        .map(|((&wk, &ck), &ak)| {
            let d = wk - ck;
            half * ak * d * d
        })
        .sum()
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> T {
    log_sum_exp(logits) - logits[label]
}

fn softmax_into<T: Scalar>(z: &[T], out: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn argmax<T: Scalar>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn finite<T: Scalar>(v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("loss"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector<f64> {
        ParamVector::from_vec(v.to_vec())
    }

    fn quad(c: &[f64], a: &[f64]) -> LossModel<f64> {
        LossModel::quadratic(pv(c), pv(a)).unwrap()
    }

    #[test]
    fn quadratic_loss_examples() {
        let none = Batch::analytic();
        assert_eq!(quad(&[1.0, 1.0], &[1.0, 1.0]).loss(&pv(&[1.0, 1.0]), &none).unwrap(), 0.0);
        assert_eq!(quad(&[0.0], &[1.0]).loss(&pv(&[2.0]), &none).unwrap(), 2.0);
    }

    #[test]
    fn quadratic_gradient_examples() {
        let none = Batch::analytic();
        assert_eq!(quad(&[1.0], &[1.0]).gradient(&pv(&[3.0]), &none).unwrap(), pv(&[2.0]));
        let m = quad(&[0.5, -2.0], &[3.0, 0.25]);
        assert!(m.gradient(&pv(&[0.5, -2.0]), &none).unwrap().is_zero());
    }

    #[test]
    fn quadratic_central_difference_of_half_square() {
        let g = quad(&[0.0], &[1.0])
            .finite_diff_gradient(&pv(&[1.0]), &Batch::analytic(), 1e-5)
            .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let m = quad(&[0.0], &[1.0]);
        assert!(m.finite_diff_gradient(&pv(&[1.0]), &Batch::analytic(), 0.0).is_err());
        assert!(m.finite_diff_gradient(&pv(&[1.0]), &Batch::analytic(), -1e-3).is_err());
    }

    #[test]
    fn curvature_must_be_positive() {
        assert!(LossModel::quadratic(pv(&[0.0, 1.0]), pv(&[1.0, 0.0])).is_err());
        assert!(LossModel::quadratic(pv(&[0.0]), pv(&[-1.0])).is_err());
        assert!(LossModel::quadratic(pv(&[0.0]), pv(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn logistic_at_zero_is_log_two() {
        let m = LossModel::<f64>::logistic(3, 2).unwrap();
        let b = Batch::new(vec![0.3, 0.1, 0.9, 1.0, 0.0, 0.5], vec![0, 1], 3).unwrap();
        let w = ParamVector::zeros(m.num_params());
        assert!((m.loss(&w, &b).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn accuracy_counts_and_tie_break() {
        let m = LossModel::<f64>::logistic(1, 2).unwrap();
        // w = [w0, w1, b0, b1]; class 1 wins iff x * (w1 - w0) + b1 - b0 > 0.
        let w = pv(&[0.0, 1.0, 0.5, 0.0]);
        let b = Batch::new(vec![1.0, 0.0, 2.0, 0.1], vec![1, 0, 1, 1], 1).unwrap();
        assert_eq!(m.predict_accuracy(&w, &b).unwrap(), 0.75);

        let zero = ParamVector::zeros(4);
        let balanced = Batch::new(vec![0.1, 0.2, 0.3, 0.4], vec![0, 1, 0, 1], 1).unwrap();
        assert_eq!(m.predict(&zero, &balanced).unwrap(), vec![0; 4]);
        assert_eq!(m.predict_accuracy(&zero, &balanced).unwrap(), 0.5);

        let perfect = pv(&[-10.0, 10.0, 0.0, 0.0]);
        let sep = Batch::new(vec![-1.0, -2.0, 1.0, 3.0], vec![0, 0, 1, 1], 1).unwrap();
        assert_eq!(m.predict_accuracy(&perfect, &sep).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_rejects_quadratic() {
        let m = quad(&[0.0], &[1.0]);
        assert!(m.predict_accuracy(&pv(&[0.0]), &Batch::analytic()).is_err());
    }

    #[test]
    fn shape_errors() {
        let m = LossModel::<f64>::mlp(2, 3, 2).unwrap();
        assert_eq!(m.num_params(), 3 * 3 + 2 * 4);
        let b = Batch::new(vec![0.0, 1.0], vec![1], 2).unwrap();
        assert!(matches!(
            m.loss(&ParamVector::zeros(5), &b),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad_label = Batch::new(vec![0.0, 1.0], vec![2], 2).unwrap();
        assert!(m.loss(&ParamVector::zeros(m.num_params()), &bad_label).is_err());
        assert!(Batch::<f64>::new(vec![0.0], vec![0, 1], 1).is_err());
        assert!(Batch::<f64>::new(vec![], vec![], 1).is_err());
    }

    #[test]
    fn divergence_surfaces_as_error() {
        let m = LossModel::<f64>::logistic(1, 2).unwrap();
        let b = Batch::new(vec![1.0], vec![0], 1).unwrap();
        let w = pv(&[f64::NAN, 0.0, 0.0, 0.0]);
        assert!(matches!(m.loss_and_gradient(&w, &b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn optimum_of_averaged_quadratics() {
        let ms = vec![quad(&[0.0, 1.0], &[1.0, 2.0]), quad(&[3.0, -1.0], &[2.0, 2.0])];
        let w = quadratic_optimum(&ms).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-15);
        assert!((w[1] - 0.0).abs() < 1e-15);
    }
}
