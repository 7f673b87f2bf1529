//! Client loss functions with analytic gradients.
//!
//! `Quadratic` and `LogisticL2` are strongly convex and smooth with constants
//! that can be certified, which is what the bound validation needs. `Mlp` is
//! a small tanh network for behavioural experiments only.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, softmax, Batch, DataShard};
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::{self, Domain};

/// `F(v) = 1/2 (v - a)^T A (v - a)` with `A` symmetric positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    /// Row-major `d x d`.
    matrix: Vec<f64>,
    center: Vec<f64>,
}

impl QuadraticSpec {
    pub fn new(matrix: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        let d = center.len();
        if d == 0 || matrix.len() != d * d {
            return Err(Error::dim(d * d, matrix.len(), "quadratic matrix"));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (matrix[i * d + j], matrix[j * d + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::InvalidArgument(format!(
                        "quadratic matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let spec = QuadraticSpec { matrix, center };
        let (lo, _) = spec.eigen_range();
        if !(lo > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "quadratic matrix is not positive definite (smallest eigenvalue {lo})"
            )));
        }
        Ok(spec)
    }

    /// `A = diag(diagonal)`.
    pub fn diagonal(diagonal: &[f64], center: Vec<f64>) -> Result<Self> {
        let d = diagonal.len();
        let mut matrix = vec![0.0; d * d];
        for (i, &a) in diagonal.iter().enumerate() {
            matrix[i * d + i] = a;
        }
        Self::new(matrix, center)
    }

    pub fn identity(center: Vec<f64>) -> Self {
        let d = center.len();
        Self::diagonal(&vec![1.0; d], center).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.matrix)
    }

    /// `(lambda_min, lambda_max)` of `A`.
    pub fn eigen_range(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.to_dmatrix()).eigenvalues;
        (eig.min(), eig.max())
    }

    /// `A x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| self.matrix[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn residual(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.center).map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticSpec {
    pub features: usize,
    pub classes: usize,
    /// Ridge coefficient; also the strong-convexity constant.
    pub rho: f64,
}

impl LogisticSpec {
    pub fn new(features: usize, classes: usize, rho: f64) -> Result<Self> {
        if features == 0 || classes < 2 {
            return Err(Error::InvalidArgument(
                "logistic model needs features > 0 and classes >= 2".into(),
            ));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be > 0, got {rho}")));
        }
        Ok(LogisticSpec {
            features,
            classes,
            rho,
        })
    }

    fn is_binary(&self) -> bool {
        self.classes == 2
    }

    pub fn dim(&self) -> usize {
        if self.is_binary() {
            self.features
        } else {
            self.features * self.classes
        }
    }
}

/// Fully connected tanh network with a linear output layer. A single output
/// is a sigmoid logit; `C >= 2` outputs are softmax logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input, hidden..., output widths.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub weight_decay: f64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, weight_decay: f64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "MLP widths must have at least two positive entries, got {widths:?}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        Ok(MlpSpec {
            widths,
            weight_decay,
        })
    }

    pub fn dim(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    fn outputs(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    fn inputs(&self) -> usize {
        self.widths[0]
    }

    /// Pre-activations and activations of every layer.
    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &params[offset..offset + fan_in * fan_out];
            let bias = &params[offset + fan_in * fan_out..offset + fan_out * (fan_in + 1)];
            offset += fan_out * (fan_in + 1);
            let prev = &acts[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    bias[o]
                        + weights[o * fan_in..(o + 1) * fan_in]
                            .iter()
                            .zip(prev)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            let a = if l + 1 == layers {
                z
            } else {
                z.into_iter().map(f64::tanh).collect()
            };
            acts.push(a);
        }
        acts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Quadratic(QuadraticSpec),
    LogisticL2(LogisticSpec),
    Mlp(MlpSpec),
}

/// Loss and derivative of the output layer for one example.
fn output_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() == 1 {
        if label > 1 {
            return Err(Error::InvalidArgument(format!(
                "label {label} for a binary model"
            )));
        }
        let z = logits[0];
        let s = if label == 1 { 1.0 } else { -1.0 };
        // softplus(-s z), stable for large |z|
        let m = -s * z;
        let loss = m.max(0.0) + (-m.abs()).exp().ln_1p();
        Ok((loss, vec![sigmoid(z) - label as f64]))
    } else {
        if label >= logits.len() {
            return Err(Error::InvalidArgument(format!(
                "label {label} for a {}-class model",
                logits.len()
            )));
        }
        let p = softmax(logits);
        let loss = -p[label].max(f64::MIN_POSITIVE).ln();
        let mut delta = p;
        delta[label] -= 1.0;
        Ok((loss, delta))
    }
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Quadratic(q) => q.dim(),
            ModelSpec::LogisticL2(l) => l.dim(),
            ModelSpec::Mlp(m) => m.dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::Quadratic(_) => "quadratic",
            ModelSpec::LogisticL2(_) => "logistic_l2",
            ModelSpec::Mlp(_) => "mlp",
        }
    }

    /// Whether the model comes with certified convexity constants.
    pub fn is_convex(&self) -> bool {
        !matches!(self, ModelSpec::Mlp(_))
    }

    /// Zeros for the convex kinds; scaled Gaussian weights for the MLP.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        match self {
            ModelSpec::Mlp(m) => {
                let mut rng = rng::stream(seed, Domain::Problem, 0x4d4c50, 0);
                let mut out = Vec::with_capacity(m.dim());
                for w in m.widths.windows(2) {
                    let normal = Normal::new(0.0, 1.0 / (w[0] as f64).sqrt()).expect("finite");
                    out.extend((0..w[0] * w[1]).map(|_| normal.sample(&mut rng)));
                    out.extend(std::iter::repeat_n(0.0, w[1]));
                }
                out.into()
            }
            _ => ParamVector::zeros(self.dim()),
        }
    }

    fn check(&self, params: &[f64], batch: &Batch<'_>) -> Result<()> {
        if params.len() != self.dim() {
            return Err(Error::dim(self.dim(), params.len(), "parameters"));
        }
        let features = match self {
            ModelSpec::Quadratic(_) => return Ok(()),
            ModelSpec::LogisticL2(l) => l.features,
            ModelSpec::Mlp(m) => m.inputs(),
        };
        match batch.shard() {
            Some(s) if !batch.is_empty() => {
                if s.n_features != features {
                    return Err(Error::dim(features, s.n_features, "batch features"));
                }
                Ok(())
            }
            _ => Err(Error::EmptyBatch),
        }
    }

    /// Mean loss over the batch, plus the ridge term where the model has one.
    pub fn loss(&self, params: &[f64], batch: &Batch<'_>) -> Result<f64> {
        self.check(params, batch)?;
        let value = match self {
            ModelSpec::Quadratic(q) => {
                let r = q.residual(params);
                0.5 * q.apply(&r).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
            }
            ModelSpec::LogisticL2(l) => {
                let mut total = 0.0;
                for (x, y) in batch.rows() {
                    total += output_loss(&logistic_logits(l, params, x), y)?.0;
                }
                total / batch.len() as f64 + 0.5 * l.rho * sq_norm(params)
            }
            ModelSpec::Mlp(m) => {
                let mut total = 0.0;
                for (x, y) in batch.rows() {
                    let acts = m.forward(params, x);
                    total += output_loss(acts.last().expect("output layer"), y)?.0;
                }
                total / batch.len() as f64 + 0.5 * m.weight_decay * sq_norm(params)
            }
        };
        Ok(value)
    }

    /// Exact gradient of [`ModelSpec::loss`].
    pub fn grad(&self, params: &[f64], batch: &Batch<'_>) -> Result<ParamVector> {
        self.check(params, batch)?;
        let g = match self {
            ModelSpec::Quadratic(q) => q.apply(&q.residual(params)),
            ModelSpec::LogisticL2(l) => {
                let p = l.features;
                let mut g = vec![0.0; l.dim()];
                for (x, y) in batch.rows() {
                    let (_, delta) = output_loss(&logistic_logits(l, params, x), y)?;
                    for (c, dc) in delta.iter().enumerate() {
                        for (gi, xi) in g[c * p..(c + 1) * p].iter_mut().zip(x) {
                            *gi += dc * xi;
                        }
                    }
                }
                let n = batch.len() as f64;
                g.iter_mut()
                    .zip(params)
                    .for_each(|(gi, w)| *gi = *gi / n + l.rho * w);
                g
            }
            ModelSpec::Mlp(m) => {
                let mut g = vec![0.0; m.dim()];
                for (x, y) in batch.rows() {
                    mlp_backprop(m, params, x, y, &mut g)?;
                }
                let n = batch.len() as f64;
                g.iter_mut()
                    .zip(params)
                    .for_each(|(gi, w)| *gi = *gi / n + m.weight_decay * w);
                g
            }
        };
        Ok(g.into())
    }

    /// Predicted class for one example; `None` for the quadratic family.
    pub fn predict(&self, params: &[f64], x: &[f64]) -> Option<usize> {
        let logits = match self {
            ModelSpec::Quadratic(_) => return None,
            ModelSpec::LogisticL2(l) => logistic_logits(l, params, x),
            ModelSpec::Mlp(m) => m.forward(params, x).pop().expect("output layer"),
        };
        Some(if logits.len() == 1 {
            usize::from(logits[0] > 0.0)
        } else {
            argmax(&logits)
        })
    }

    /// Fraction of correctly classified rows; `None` when not a classifier.
    pub fn accuracy(&self, params: &[f64], shard: &DataShard) -> Option<f64> {
        if shard.is_empty() || matches!(self, ModelSpec::Quadratic(_)) {
            return None;
        }
        let hits = (0..shard.len())
            .filter(|&i| self.predict(params, shard.row(i)) == Some(shard.labels[i]))
            .count();
        Some(hits as f64 / shard.len() as f64)
    }
}

fn logistic_logits(l: &LogisticSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let p = l.features;
    (0..l.dim() / p)
        .map(|c| params[c * p..(c + 1) * p].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn mlp_backprop(m: &MlpSpec, params: &[f64], x: &[f64], y: usize, g: &mut [f64]) -> Result<()> {
    if m.outputs() >= 2 && y >= m.outputs() {
        return Err(Error::InvalidArgument(format!(
            "label {y} for a {}-output network",
            m.outputs()
        )));
    }
    let acts = m.forward(params, x);
    let (_, mut delta) = output_loss(acts.last().expect("output layer"), y)?;
    let offsets: Vec<usize> = m
        .widths
        .windows(2)
        .scan(0, |off, w| {
            let start = *off;
            *off += w[1] * (w[0] + 1);
            Some(start)
        })
        .collect();
    for l in (0..m.widths.len() - 1).rev() {
        let (fan_in, fan_out) = (m.widths[l], m.widths[l + 1]);
        let off = offsets[l];
        let prev = &acts[l];
        for o in 0..fan_out {
            let row = &mut g[off + o * fan_in..off + (o + 1) * fan_in];
            for (gi, a) in row.iter_mut().zip(prev) {
                *gi += delta[o] * a;
            }
            g[off + fan_in * fan_out + o] += delta[o];
        }
        if l > 0 {
            let weights = &params[off..off + fan_in * fan_out];
            delta = (0..fan_in)
                .map(|i| {
                    let back: f64 = (0..fan_out).map(|o| weights[o * fan_in + i] * delta[o]).sum();
                    back * (1.0 - prev[i] * prev[i])
                })
                .collect();
        }
    }
    Ok(())
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Largest eigenvalue of `X^T X / n` by power iteration.
pub fn gram_lambda_max(shard: &DataShard) -> f64 {
    let p = shard.n_features;
    let n = shard.len().max(1) as f64;
    let mut gram = vec![0.0; p * p];
    for i in 0..shard.len() {
        let x = shard.row(i);
        for a in 0..p {
            for b in 0..p {
                gram[a * p + b] += x[a] * x[b] / n;
            }
        }
    }
    let mut v: Vec<f64> = (0..p).map(|i| 1.0 + 0.1 * i as f64).collect();
    let norm = sq_norm(&v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let w: Vec<f64> = (0..p)
            .map(|a| gram[a * p..(a + 1) * p].iter().zip(&v).map(|(x, y)| x * y).sum())
            .collect();
        let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let norm = sq_norm(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-15 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Certified `(mu, L)`: strong-convexity and gradient-Lipschitz constants.
pub fn convexity_constants(spec: &ModelSpec, dataset: Option<&DataShard>) -> Result<(f64, f64)> {
    match spec {
        ModelSpec::Quadratic(q) => Ok(q.eigen_range()),
        ModelSpec::LogisticL2(l) => {
            let shard = dataset.ok_or(Error::EmptyBatch)?;
            // Hessian of the sigmoid loss is at most 1/4 x x^T; softmax is at most 1/2
            let curvature = if l.is_binary() { 0.25 } else { 0.5 };
            Ok((l.rho, l.rho + curvature * gram_lambda_max(shard)))
        }
        ModelSpec::Mlp(_) => Err(Error::Unsupported(
            "the MLP is not convex and has no certified constants".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthTask;
    use proptest::prelude::*;
    use rand::Rng;

    fn shard(classes: usize, seed: u64) -> DataShard {
        SynthTask {
            clients: 1,
            features: 3,
            samples_per_client: 25,
            classes,
            heterogeneity: 0.0,
            signal: 1.5,
            seed,
        }
        .generate()
        .unwrap()
        .remove(0)
    }

    fn random_point(dim: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = rng::stream(seed, Domain::Problem, 99, 0);
        (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
    }

    /// Central differences with step 1e-5.
    fn fd_grad(spec: &ModelSpec, x: &[f64], batch: &Batch<'_>) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut down = x.to_vec();
                up[i] += h;
                down[i] -= h;
                (spec.loss(&up, batch).unwrap() - spec.loss(&down, batch).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / sq_norm(b).sqrt().max(1e-8)
    }

    fn assert_grad_matches(spec: &ModelSpec, batch: &Batch<'_>, tol: f64, scale: f64) {
        for seed in 0..10 {
            let x = random_point(spec.dim(), seed, scale);
            let g = spec.grad(&x, batch).unwrap();
            let err = rel_err(&g, &fd_grad(spec, &x, batch));
            assert!(err < tol, "{} seed {seed}: relative error {err}", spec.kind_name());
        }
    }

    #[test]
    fn quadratic_values() {
        let q = ModelSpec::Quadratic(QuadraticSpec::identity(vec![0.0; 3]));
        assert_eq!(q.loss(&[0.0; 3], &Batch::none()).unwrap(), 0.0);
        assert_eq!(q.loss(&[1.0, 2.0, 2.0], &Batch::none()).unwrap(), 4.5);
        let q = ModelSpec::Quadratic(QuadraticSpec::identity(vec![1.0, 1.0]));
        assert_eq!(q.grad(&[0.0, 0.0], &Batch::none()).unwrap().as_ref(), &[-1.0, -1.0]);
    }

    #[test]
    fn logistic_at_zero_is_ln2() {
        let s = DataShard::new(
            vec![1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -2.0],
            2,
            vec![1, 0, 1, 0],
            2,
            0,
        )
        .unwrap();
        let l = ModelSpec::LogisticL2(LogisticSpec::new(2, 2, 0.1).unwrap());
        let v = l.loss(&[0.0, 0.0], &Batch::full(&s)).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logistic_single_sample_gradient() {
        // x = e1, y = +1 at zero: -(1 - sigmoid(0)) e1 = -1/2 e1, ridge term vanishes
        let s = DataShard::new(vec![1.0, 0.0], 2, vec![1], 2, 0).unwrap();
        let l = ModelSpec::LogisticL2(LogisticSpec::new(2, 2, 0.1).unwrap());
        let g = l.grad(&[0.0, 0.0], &Batch::full(&s)).unwrap();
        let fd = fd_grad(&l, &[0.0, 0.0], &Batch::full(&s));
        assert!((fd[0] + 0.5).abs() < 1e-9 && fd[1].abs() < 1e-12);
        assert!((g[0] + 0.5).abs() < 1e-15 && g[1] == 0.0);
    }

    #[test]
    fn finite_difference_all_kinds() {
        let mut rng = rng::stream(1, Domain::Problem, 5, 0);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let spd = &a * a.transpose() + DMatrix::identity(4, 4);
        let q = ModelSpec::Quadratic(
            QuadraticSpec::new(spd.transpose().as_slice().to_vec(), vec![0.5, -1.0, 2.0, 0.0])
                .unwrap(),
        );
        assert_grad_matches(&q, &Batch::none(), 1e-6, 3.0);
        let bin = shard(2, 3);
        let l = ModelSpec::LogisticL2(LogisticSpec::new(3, 2, 0.1).unwrap());
        assert_grad_matches(&l, &Batch::full(&bin), 1e-6, 2.0);
        let multi = shard(4, 4);
        let l = ModelSpec::LogisticL2(LogisticSpec::new(3, 4, 0.05).unwrap());
        assert_grad_matches(&l, &Batch::full(&multi), 1e-6, 2.0);
        let m = ModelSpec::Mlp(MlpSpec::new(vec![3, 5, 4, 4], 1e-3).unwrap());
        assert_grad_matches(&m, &Batch::full(&multi), 1e-4, 1.0);
        let m = ModelSpec::Mlp(MlpSpec::new(vec![3, 6, 1], 0.0).unwrap());
        assert_grad_matches(&m, &Batch::full(&bin), 1e-4, 1.0);
    }

    #[test]
    fn convexity_constants_quadratic() {
        let q = ModelSpec::Quadratic(QuadraticSpec::diagonal(&[1.0, 4.0], vec![0.0; 2]).unwrap());
        let (mu, l) = convexity_constants(&q, None).unwrap();
        assert!((mu - 1.0).abs() < 1e-14 && (l - 4.0).abs() < 1e-14);
        let q = ModelSpec::Quadratic(QuadraticSpec::identity(vec![0.0; 3]));
        let (mu, l) = convexity_constants(&q, None).unwrap();
        assert!((mu - 1.0).abs() < 1e-14 && (l - 1.0).abs() < 1e-14);
    }

    /// Power iteration against a dense symmetric eigensolver.
    #[test]
    fn logistic_smoothness_matches_dense_eigen() {
        let s = shard(2, 11);
        let x = DMatrix::from_row_slice(s.len(), s.n_features, &s.features);
        let gram = x.transpose() * &x / s.len() as f64;
        let dense = SymmetricEigen::new(gram).eigenvalues.max();
        let l = ModelSpec::LogisticL2(LogisticSpec::new(3, 2, 0.1).unwrap());
        let (mu, big_l) = convexity_constants(&l, Some(&s)).unwrap();
        assert_eq!(mu, 0.1);
        assert!((big_l - (0.1 + 0.25 * dense)).abs() < 1e-10 * big_l);
    }

    #[test]
    fn mlp_has_no_constants() {
        let m = ModelSpec::Mlp(MlpSpec::new(vec![2, 3, 1], 0.0).unwrap());
        assert!(matches!(convexity_constants(&m, None), Err(Error::Unsupported(_))));
    }

    #[test]
    fn input_errors() {
        let l = ModelSpec::LogisticL2(LogisticSpec::new(3, 2, 0.1).unwrap());
        let s = shard(2, 1);
        assert!(matches!(
            l.loss(&[0.0; 2], &Batch::full(&s)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(l.grad(&[0.0; 3], &Batch::none()), Err(Error::EmptyBatch)));
        assert!(matches!(
            l.grad(&[0.0; 3], &Batch::subset(&s, &[])),
            Err(Error::EmptyBatch)
        ));
        assert!(QuadraticSpec::new(vec![1.0, 2.0, 0.0, 1.0], vec![0.0; 2]).is_err());
        assert!(QuadraticSpec::diagonal(&[1.0, -1.0], vec![0.0; 2]).is_err());
        assert!(LogisticSpec::new(2, 2, 0.0).is_err());
    }

    #[test]
    fn batch_additivity() {
        let s = shard(4, 8);
        let l = ModelSpec::LogisticL2(LogisticSpec::new(3, 4, 0.2).unwrap());
        let x = random_point(l.dim(), 3, 1.0);
        let first: Vec<usize> = (0..10).collect();
        let second: Vec<usize> = (10..25).collect();
        let g = l.grad(&x, &Batch::full(&s)).unwrap();
        let g1 = l.grad(&x, &Batch::subset(&s, &first)).unwrap();
        let g2 = l.grad(&x, &Batch::subset(&s, &second)).unwrap();
        for i in 0..g.dim() {
            let mixed = (10.0 * g1[i] + 15.0 * g2[i]) / 25.0;
            assert!((g[i] - mixed).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_of_perfect_separator() {
        let s = DataShard::new(vec![1.0, -1.0, 2.0, -3.0], 1, vec![1, 0, 1, 0], 2, 0).unwrap();
        let l = ModelSpec::LogisticL2(LogisticSpec::new(1, 2, 0.1).unwrap());
        assert_eq!(l.accuracy(&[1.0], &s), Some(1.0));
        assert_eq!(l.accuracy(&[-1.0], &s), Some(0.0));
    }

    proptest! {
        /// Strong convexity and smoothness certificates on random pairs.
        #[test]
        fn certificates_hold(seed in 0u64..300) {
            let s = shard(2, seed % 7);
            let specs = [
                ModelSpec::LogisticL2(LogisticSpec::new(3, 2, 0.1).unwrap()),
                ModelSpec::Quadratic(QuadraticSpec::diagonal(&[0.5, 2.0, 3.0], vec![1.0, 0.0, -1.0]).unwrap()),
            ];
            for spec in &specs {
                let (mu, l) = convexity_constants(spec, Some(&s)).unwrap();
                let x = random_point(3, seed, 4.0);
                let y = random_point(3, seed + 1000, 4.0);
                let gx = spec.grad(&x, &Batch::full(&s)).unwrap();
                let gy = spec.grad(&y, &Batch::full(&s)).unwrap();
                let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                let dg: Vec<f64> = gx.iter().zip(gy.iter()).map(|(a, b)| a - b).collect();
                let inner: f64 = dg.iter().zip(&dx).map(|(a, b)| a * b).sum();
                prop_assert!(inner >= mu * sq_norm(&dx) * (1.0 - 1e-12));
                prop_assert!(sq_norm(&dg).sqrt() <= l * sq_norm(&dx).sqrt() * (1.0 + 1e-12));
            }
        }

        /// Directional derivative agrees with the gradient.
        #[test]
        fn directional_derivative(seed in 0u64..200) {
            let s = shard(3, seed % 5);
            let spec = ModelSpec::Mlp(MlpSpec::new(vec![3, 4, 3], 0.01).unwrap());
            let x = random_point(spec.dim(), seed, 1.0);
            let dir = random_point(spec.dim(), seed + 7, 1.0);
            let h = 1e-5;
            let shift = |t: f64| -> Vec<f64> { x.iter().zip(&dir).map(|(a, b)| a + t * b).collect() };
            let b = Batch::full(&s);
            let fd = (spec.loss(&shift(h), &b).unwrap() - spec.loss(&shift(-h), &b).unwrap()) / (2.0 * h);
            let g = spec.grad(&x, &b).unwrap();
            let an: f64 = g.iter().zip(&dir).map(|(a, c)| a * c).sum();
            prop_assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()));
        }
    }
}
