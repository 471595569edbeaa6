//! Multinomial logistic regression: the model every client trains.
//!
//! Parameters are stored class-major. For `K` classes and `d` features the
//! vector has `K * (d + 1)` entries, and class `k` occupies the slots
//! `k*(d+1) .. (k+1)*(d+1)`: first its `d` weights, then its bias. The layout
//! is part of the wire contract and must not change.
//!
//! The loss is the mean cross-entropy of the softmax over the dataset plus
//! `(l2 / 2) * ||W||^2`, where `W` excludes the biases.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

/// Flat parameter vector. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T>(Vec<T>);

impl<T: Scalar> Params<T> {
    pub fn new(values: Vec<T>) -> Result<Self, ModelError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> T {
        self.0.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// `self - other`, coordinatewise.
    pub fn sub(&self, other: &Self) -> Result<Self, ModelError> {
        check_dim(self.dim(), other.dim())?;
        Self::new(self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect())
    }

    /// Convert every coordinate to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params(self.0.iter().map(|v| U::of(v.widen())).collect())
    }
}

impl<T> std::ops::Index<usize> for Params<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

/// One labelled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub features: Vec<T>,
    pub label: usize,
}

impl<T: Scalar> Example<T> {
    pub fn new(features: Vec<T>, label: usize) -> Self {
        Self { features, label }
    }
}

/// A non-empty collection of examples sharing one feature dimension and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    examples: Vec<Example<T>>,
    feature_dim: usize,
    class_count: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        examples: Vec<Example<T>>,
        feature_dim: usize,
        class_count: usize,
    ) -> Result<Self, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        for ex in &examples {
            check_dim(feature_dim, ex.features.len())?;
            if let Some(i) = ex.features.iter().position(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(i));
            }
            if ex.label >= class_count {
                return Err(ModelError::LabelOutOfRange {
                    label: ex.label,
                    classes: class_count,
                });
            }
        }
        Ok(Self {
            examples,
            feature_dim,
            class_count,
        })
    }

    pub fn examples(&self) -> &[Example<T>] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Number of examples per class.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// The examples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, ModelError> {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        Self::new(examples, self.feature_dim, self.class_count)
    }

    /// Concatenate datasets in order.
    pub fn concat(parts: &[&Self]) -> Result<Self, ModelError> {
        let first = parts.first().ok_or(ModelError::EmptyDataset)?;
        let mut examples = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for part in parts {
            check_dim(first.feature_dim, part.feature_dim)?;
            check_dim(first.class_count, part.class_count)?;
            examples.extend(part.examples.iter().cloned());
        }
        Self::new(examples, first.feature_dim, first.class_count)
    }

    /// Same examples with a larger label space.
    pub fn with_class_count(mut self, class_count: usize) -> Result<Self, ModelError> {
        if class_count < self.class_count {
            return Err(ModelError::InvalidSpec(format!(
                "cannot shrink class count from {} to {class_count}",
                self.class_count
            )));
        }
        self.class_count = class_count;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            examples: self
                .examples
                .iter()
                .map(|ex| Example {
                    features: ex.features.iter().map(|v| U::of(v.widen())).collect(),
                    label: ex.label,
                })
                .collect(),
            feature_dim: self.feature_dim,
            class_count: self.class_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    #[default]
    SoftmaxLinear,
}

/// Shape and regularization of the softmax model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub family: ModelFamily,
    pub feature_dim: usize,
    pub class_count: usize,
    #[serde(default)]
    pub l2: f64,
}

impl ModelSpec {
    pub fn new(feature_dim: usize, class_count: usize, l2: f64) -> Result<Self, ModelError> {
        let spec = Self {
            family: ModelFamily::SoftmaxLinear,
            feature_dim,
            class_count,
            l2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0 {
            return Err(ModelError::InvalidSpec("feature_dim must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(ModelError::InvalidSpec("class_count must be at least 2".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(ModelError::InvalidSpec("l2 must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `K * (d + 1)`.
    pub fn param_dim(&self) -> usize {
        self.class_count * (self.feature_dim + 1)
    }

    /// Index of weight `j` of class `k`.
    pub fn weight_index(&self, class: usize, feature: usize) -> usize {
        class * (self.feature_dim + 1) + feature
    }

    /// Index of the bias of class `k`.
    pub fn bias_index(&self, class: usize) -> usize {
        class * (self.feature_dim + 1) + self.feature_dim
    }

    pub fn predict_logits<T: Scalar>(
        &self,
        theta: &Params<T>,
        x: &[T],
    ) -> Result<Vec<T>, ModelError> {
        check_dim(self.param_dim(), theta.dim())?;
        check_dim(self.feature_dim, x.len())?;
        let mut logits = vec![T::zero(); self.class_count];
        self.logits_into(theta.as_slice(), x, &mut logits);
        Ok(logits)
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict_class<T: Scalar>(&self, theta: &Params<T>, x: &[T]) -> Result<usize, ModelError> {
        Ok(argmax(&self.predict_logits(theta, x)?))
    }

    pub fn loss<T: Scalar>(&self, theta: &Params<T>, data: &Dataset<T>) -> Result<T, ModelError> {
        self.check_data(theta.dim(), data)?;
        Ok(self.loss_raw(theta.as_slice(), data.examples().iter()))
    }

    pub fn gradient<T: Scalar>(
        &self,
        theta: &Params<T>,
        data: &Dataset<T>,
    ) -> Result<Params<T>, ModelError> {
        self.check_data(theta.dim(), data)?;
        let mut grad = vec![T::zero(); self.param_dim()];
        self.gradient_raw(theta.as_slice(), data.examples().iter(), &mut grad);
        Params::new(grad)
    }

    fn check_data<T: Scalar>(&self, dim: usize, data: &Dataset<T>) -> Result<(), ModelError> {
        check_dim(self.param_dim(), dim)?;
        check_dim(self.feature_dim, data.feature_dim())?;
        if data.class_count() > self.class_count {
            return Err(ModelError::DimensionMismatch {
                expected: self.class_count,
                actual: data.class_count(),
            });
        }
        Ok(())
    }

    pub(crate) fn logits_into<T: Scalar>(&self, theta: &[T], x: &[T], out: &mut [T]) {
        let stride = self.feature_dim + 1;
        for (k, logit) in out.iter_mut().enumerate() {
            let row = &theta[k * stride..(k + 1) * stride];
            let mut acc = T::zero();
            for (w, xi) in row[..self.feature_dim].iter().zip(x) {
                acc = acc + *w * *xi;
            }
            *logit = acc + row[self.feature_dim];
        }
    }

    fn weight_penalty<T: Scalar>(&self, theta: &[T]) -> T {
        if self.l2 == 0.0 {
            return T::zero();
        }
        let stride = self.feature_dim + 1;
        let mut sq = T::zero();
        for k in 0..self.class_count {
            for w in &theta[k * stride..k * stride + self.feature_dim] {
                sq = sq + *w * *w;
            }
        }
        T::of(self.l2 / 2.0) * sq
    }

    /// Mean cross-entropy plus penalty on an arbitrary batch. No validation;
    /// callers guarantee shapes. May return a non-finite value if `theta` has diverged.
    pub(crate) fn loss_raw<'a, T, I>(&self, theta: &[T], batch: I) -> T
    where
        T: Scalar,
        I: IntoIterator<Item = &'a Example<T>>,
    {
        let mut logits = vec![T::zero(); self.class_count];
        let mut total = T::zero();
        let mut n = 0usize;
        for ex in batch {
            self.logits_into(theta, &ex.features, &mut logits);
            let lse = log_sum_exp(&logits);
            total = total + (lse - logits[ex.label]);
            n += 1;
        }
        total / T::of(n as f64) + self.weight_penalty(theta)
    }

    /// Exact gradient of [`Self::loss_raw`] written into `out`.
    pub(crate) fn gradient_raw<'a, T, I>(&self, theta: &[T], batch: I, out: &mut [T])
    where
        T: Scalar,
        I: IntoIterator<Item = &'a Example<T>>,
    {
        let stride = self.feature_dim + 1;
        out.iter_mut().for_each(|g| *g = T::zero());
        let mut logits = vec![T::zero(); self.class_count];
        let mut n = 0usize;
        for ex in batch {
            self.logits_into(theta, &ex.features, &mut logits);
            softmax_in_place(&mut logits);
            for (k, p) in logits.iter().enumerate() {
                let coef = if k == ex.label { *p - T::one() } else { *p };
                let row = &mut out[k * stride..(k + 1) * stride];
                for (g, xi) in row[..self.feature_dim].iter_mut().zip(&ex.features) {
                    *g = *g + coef * *xi;
                }
                row[self.feature_dim] = row[self.feature_dim] + coef;
            }
            n += 1;
        }
        let n = T::of(n as f64);
        out.iter_mut().for_each(|g| *g = *g / n);
        if self.l2 != 0.0 {
            let l2 = T::of(self.l2);
            for k in 0..self.class_count {
                for j in 0..self.feature_dim {
                    let i = k * stride + j;
                    out[i] = out[i] + l2 * theta[i];
                }
            }
        }
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<(), ModelError> {
    if expected != actual {
        return Err(ModelError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `ln(sum(exp(v)))` with max subtraction.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let m = values.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

fn softmax_in_place<T: Scalar>(values: &mut [T]) {
    let m = values.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in values.iter_mut() {
        *v = (*v - m).exp();
        z = z + *v;
    }
    values.iter_mut().for_each(|v| *v = *v / z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny() -> (ModelSpec, Dataset<f64>) {
        let spec = ModelSpec::new(2, 2, 0.0).unwrap();
        let data = Dataset::new(
            vec![
                Example::new(vec![1.0, 2.0], 0),
                Example::new(vec![-1.0, 0.5], 1),
                Example::new(vec![0.3, -0.7], 1),
            ],
            2,
            2,
        )
        .unwrap();
        (spec, data)
    }

    #[test]
    fn param_dim_values() {
        assert_eq!(ModelSpec::new(2, 2, 0.0).unwrap().param_dim(), 6);
        assert_eq!(ModelSpec::new(1, 3, 0.0).unwrap().param_dim(), 6);
        assert_eq!(ModelSpec::new(10, 4, 0.0).unwrap().param_dim(), 44);
    }

    #[test]
    fn layout_is_class_major() {
        let spec = ModelSpec::new(3, 2, 0.0).unwrap();
        assert_eq!(spec.weight_index(0, 2), 2);
        assert_eq!(spec.bias_index(0), 3);
        assert_eq!(spec.weight_index(1, 0), 4);
        assert_eq!(spec.bias_index(1), 7);
    }

    #[test]
    fn zero_theta_gives_zero_logits_and_class_zero() {
        let spec = ModelSpec::new(3, 4, 0.0).unwrap();
        let theta = Params::<f64>::zeros(spec.param_dim());
        let x = [0.4, -2.0, 9.0];
        assert_eq!(spec.predict_logits(&theta, &x).unwrap(), vec![0.0; 4]);
        assert_eq!(spec.predict_class(&theta, &x).unwrap(), 0);
    }

    #[test]
    fn logits_direct_dot_product() {
        let spec = ModelSpec::new(1, 2, 0.0).unwrap();
        let theta = Params::new(vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(spec.predict_logits(&theta, &[2.0]).unwrap(), vec![2.0, -2.0]);
        assert_eq!(spec.predict_class(&theta, &[2.0]).unwrap(), 0);
    }

    #[test]
    fn argmax_ties_and_order() {
        assert_eq!(argmax(&[1.0, 1.0, 3.0]), 2);
        assert_eq!(argmax(&[2.0, -2.0]), 0);
        assert_eq!(argmax(&[5.0, 5.0, 5.0]), 0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (spec, data) = tiny();
        let bad = Params::<f64>::zeros(5);
        assert_eq!(
            spec.loss(&bad, &data),
            Err(ModelError::DimensionMismatch { expected: 6, actual: 5 })
        );
        let theta = Params::<f64>::zeros(6);
        assert!(spec.predict_logits(&theta, &[1.0]).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert_eq!(
            Dataset::<f64>::new(vec![], 2, 2).unwrap_err(),
            ModelError::EmptyDataset
        );
    }

    #[test]
    fn loss_at_zero_is_ln_k() {
        let (spec, data) = tiny();
        let theta = Params::zeros(spec.param_dim());
        assert_relative_eq!(spec.loss(&theta, &data).unwrap(), 2f64.ln(), epsilon = 1e-12);

        let spec4 = ModelSpec::new(2, 4, 0.0).unwrap();
        let data4 = data.clone().with_class_count(4).unwrap();
        let theta4 = Params::zeros(spec4.param_dim());
        assert_relative_eq!(spec4.loss(&theta4, &data4).unwrap(), 1.3862943611198906, epsilon = 1e-12);
    }

    #[test]
    fn bias_gradient_at_zero_single_example() {
        let spec = ModelSpec::new(2, 2, 0.0).unwrap();
        let data = Dataset::new(vec![Example::new(vec![0.7, -1.1], 0)], 2, 2).unwrap();
        let g = spec.gradient(&Params::zeros(6), &data).unwrap();
        assert_eq!(g[spec.bias_index(0)], -0.5);
        assert_eq!(g[spec.bias_index(1)], 0.5);
    }

    #[test]
    fn regularizer_skips_biases() {
        let spec = ModelSpec::new(1, 2, 2.0).unwrap();
        let data = Dataset::new(vec![Example::new(vec![0.0], 0)], 1, 2).unwrap();
        // Weights are multiplied by x = 0, biases are equal: the data term is ln 2.
        let theta = Params::new(vec![3.0, 5.0, 4.0, 5.0]).unwrap();
        let expected = 2f64.ln() + 0.5 * 2.0 * (9.0 + 16.0);
        assert_relative_eq!(spec.loss(&theta, &data).unwrap(), expected, epsilon = 1e-12);
        let g = spec.gradient(&theta, &data).unwrap();
        assert_relative_eq!(g[0], 6.0, epsilon = 1e-12);
        assert_relative_eq!(g[2], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let spec = ModelSpec::new(1, 2, 0.0).unwrap();
        let data = Dataset::new(vec![Example::new(vec![1.0], 1)], 1, 2).unwrap();
        let theta = Params::new(vec![800.0, 0.0, -800.0, 0.0]).unwrap();
        let loss = spec.loss(&theta, &data).unwrap();
        assert_relative_eq!(loss, 1600.0, epsilon = 1e-9);
        assert!(spec.gradient(&theta, &data).unwrap().iter().all(|v: &f64| v.is_finite()));
    }

    #[test]
    fn single_precision_works() {
        let (spec, data) = tiny();
        let data32: Dataset<f32> = data.cast();
        let theta = Params::<f32>::zeros(spec.param_dim());
        assert!((spec.loss(&theta, &data32).unwrap() - 2f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn non_finite_params_rejected() {
        assert_eq!(
            Params::new(vec![0.0, f64::NAN]).unwrap_err(),
            ModelError::NonFinite(1)
        );
    }
}
