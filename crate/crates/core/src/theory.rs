//! Closed-form convergence quantities: the global step-size limit, the
//! contraction constant and error bound of the global model, the
//! one-step recursion for personal models, and the rate check for a
//! personal trajectory under a `g(t)`-driven local learning rate.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::channel::ChannelModel;
use crate::data::{Batch, DataShard};
use crate::error::{Error, Result};
use crate::models::{convexity_constants, ModelSpec, QuadraticSpec};
use crate::param::ParamVector;

/// Problem and channel constants entering the bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Strong convexity of every local loss.
    pub mu: f64,
    /// Smoothness of the global loss.
    pub l: f64,
    /// Largest per-client smoothness constant.
    pub l_bar: f64,
    /// Diameter of the parameter set.
    pub delta: f64,
    /// Bound on `||z_k* - w*||`.
    pub m: f64,
    /// `||w^0 - w*||^2`.
    pub r0_sq: f64,
    pub mu_h: f64,
    pub sigma_h2: f64,
    pub sigma2: f64,
    pub power: f64,
    pub d: usize,
    pub k: usize,
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [("mu", self.mu), ("L", self.l), ("mu_h", self.mu_h), ("P", self.power)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("L_bar", self.l_bar),
            ("delta", self.delta),
            ("M", self.m),
            ("r0_sq", self.r0_sq),
            ("sigma_h2", self.sigma_h2),
            ("sigma2", self.sigma2),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.mu > self.l * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "mu ({}) exceeds L ({})",
                self.mu, self.l
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        Ok(())
    }

    /// Measures every constant from the clients, their optima, the start
    /// point and the channel.
    ///
    /// `mu` is the smallest local strong-convexity constant and `l_bar` the
    /// largest local smoothness. `l` is the top eigenvalue of the mean
    /// Hessian for quadratics and `l_bar` otherwise. `delta` is twice the
    /// largest norm among `w0` and all optima, which is the diameter of the
    /// ball those points (and projected iterates) live in.
    pub fn measure(
        clients: &[(&ModelSpec, Option<&DataShard>)],
        optima: &ClientOptima,
        w0: &[f64],
        channel: &ChannelModel,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::InvalidArgument("no clients".into()));
        }
        let mut mu = f64::INFINITY;
        let mut l_bar = 0.0f64;
        for (spec, shard) in clients {
            let (m, l) = convexity_constants(spec, *shard)?;
            mu = mu.min(m);
            l_bar = l_bar.max(l);
        }
        let quads: Option<Vec<&QuadraticSpec>> = clients
            .iter()
            .map(|(s, _)| match s {
                ModelSpec::Quadratic(q) => Some(q),
                _ => None,
            })
            .collect();
        let l = match quads {
            Some(qs) => {
                let mean = mean_matrix(&qs);
                mean.symmetric_eigen().eigenvalues.max()
            }
            None => l_bar,
        };
        let w_star = &optima.w_star;
        let radius = optima
            .z_star
            .iter()
            .chain(&optima.v_star)
            .map(|v| v.norm())
            .fold(w_star.norm().max(ParamVector::from(w0).norm()), f64::max);
        let m = optima
            .z_star
            .iter()
            .map(|z| z.dist_sq(w_star).sqrt())
            .fold(0.0, f64::max);
        let (mu_h, sigma_h2) = channel.fading_moments();
        let c = TheoryConstants {
            mu,
            l: l.max(mu),
            l_bar,
            delta: 2.0 * radius,
            m,
            r0_sq: w_star.dist_sq(w0),
            mu_h,
            sigma_h2,
            sigma2: channel.sigma2,
            power: channel.power,
            d: w0.len(),
            k: clients.len(),
        };
        c.validate()?;
        Ok(c)
    }

    /// `key = value` lines for CSV headers.
    pub fn describe(&self) -> Vec<String> {
        vec![
            format!("mu = {}", self.mu),
            format!("L = {}", self.l),
            format!("L_bar = {}", self.l_bar),
            format!("delta = {}", self.delta),
            format!("M = {}", self.m),
            format!("r0_sq = {}", self.r0_sq),
            format!("mu_h = {}", self.mu_h),
            format!("sigma_h2 = {}", self.sigma_h2),
            format!("sigma2 = {}", self.sigma2),
            format!("P = {}", self.power),
            format!("d = {}", self.d),
            format!("K = {}", self.k),
        ]
    }
}

fn mean_matrix(qs: &[&QuadraticSpec]) -> DMatrix<f64> {
    let d = qs[0].dim();
    let mut sum = DMatrix::zeros(d, d);
    for q in qs {
        sum += q.to_dmatrix();
    }
    sum / qs.len() as f64
}

/// Largest admissible global learning rate.
pub fn eta_g_max(c: &TheoryConstants) -> Result<f64> {
    c.validate()?;
    let first = 2.0 / (c.mu_h * (c.mu + c.l));
    if c.sigma_h2 == 0.0 || c.l_bar == 0.0 {
        return Ok(first);
    }
    let second = 2.0 * c.mu_h * c.mu * c.l * c.k as f64
        / (c.sigma_h2 * c.l_bar * c.l_bar * (1.0 + 2.0 * c.delta) * (c.mu + c.l));
    Ok(first.min(second))
}

/// Per-round contraction factor of the global error.
///
/// Errors unless `0 < eta_g < eta_g_max` and the result lies in `(0, 1)`.
pub fn contraction_c(c: &TheoryConstants, eta_g: f64) -> Result<f64> {
    let max = eta_g_max(c)?;
    if !(eta_g > 0.0 && eta_g < max) {
        return Err(Error::StepSize(format!(
            "eta_g = {eta_g} must lie in (0, eta_g_max = {max})"
        )));
    }
    let value = 1.0 - 2.0 * eta_g * c.mu_h * c.mu * c.l / (c.mu + c.l)
        + eta_g * eta_g * c.sigma_h2 * c.l_bar * c.l_bar * (1.0 + 2.0 * c.delta) / c.k as f64;
    if !(value > 0.0 && value < 1.0) {
        return Err(Error::StepSize(format!(
            "contraction constant c = {value} is outside (0, 1) at eta_g = {eta_g}"
        )));
    }
    Ok(value)
}

/// Stationary part of the global error bound.
pub fn noise_floor(c: &TheoryConstants, eta_g: f64) -> Result<f64> {
    let cc = contraction_c(c, eta_g)?;
    let k = c.k as f64;
    let fading = c.sigma_h2 * c.delta * c.l_bar * c.l_bar * (2.0 + c.delta) / k;
    let noise = c.d as f64 * c.sigma2 / (c.power * c.power * k * k);
    Ok(eta_g * eta_g / (1.0 - cc) * (fading + noise))
}

/// Bound on `E ||w^t - w*||^2`.
pub fn global_error_bound(c: &TheoryConstants, eta_g: f64, t: usize) -> Result<f64> {
    let cc = contraction_c(c, eta_g)?;
    Ok(cc.powi(t as i32) * c.r0_sq + noise_floor(c, eta_g)?)
}

/// The bound for `t = 0..=rounds`.
pub fn global_bound_curve(c: &TheoryConstants, eta_g: f64, rounds: usize) -> Result<Vec<f64>> {
    let cc = contraction_c(c, eta_g)?;
    let floor = noise_floor(c, eta_g)?;
    let mut out = Vec::with_capacity(rounds + 1);
    let mut pow = 1.0;
    for _ in 0..=rounds {
        out.push(pow * c.r0_sq + floor);
        pow *= cc;
    }
    Ok(out)
}

/// One step of the personal-model recursion: bounds `E ||v^{t+1} - v*||^2`
/// from `prev = E ||v^t - v*||^2` and `w_err = E ||w^t - w*||^2`.
pub fn personal_recursion_bound(
    prev: f64,
    w_err: f64,
    c: &TheoryConstants,
    lambda: f64,
    eta_l: f64,
) -> Result<f64> {
    if !(prev >= 0.0 && w_err >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "errors must be nonnegative, got prev = {prev}, w_err = {w_err}"
        )));
    }
    if eta_l * c.mu > 1.0 {
        warn!("eta_l * mu = {} > 1: the recursion no longer contracts", eta_l * c.mu);
    }
    let el = eta_l * lambda;
    let el2 = el * el;
    Ok((1.0 - c.mu * eta_l) * prev
        + el2 * c.m * c.m
        + el2 * w_err
        + 2.0 * el2 * c.m * w_err.sqrt()
        + 2.0 * el * (prev * w_err).sqrt())
}

/// Iterates the recursion from `v0_err` along `w_err[t]`, with local rate
/// `eta_l[t]` (the last entry repeats). Returns `rounds + 1` values where
/// `rounds = w_err.len() - 1`.
pub fn personal_bound_curve(
    v0_err: f64,
    w_err: &[f64],
    c: &TheoryConstants,
    lambda: f64,
    eta_l: &[f64],
) -> Result<Vec<f64>> {
    if w_err.is_empty() || eta_l.is_empty() {
        return Err(Error::InvalidArgument("empty bound inputs".into()));
    }
    let mut out = vec![v0_err];
    for t in 0..w_err.len() - 1 {
        let rate = eta_l[t.min(eta_l.len() - 1)];
        let next = personal_recursion_bound(out[t], w_err[t], c, lambda, rate)?;
        out.push(next);
    }
    Ok(out)
}

/// Largest `A` with `g(t+1)/g(t) >= 1 - g(t)/A` for every consecutive pair.
pub fn choose_a(g: &[f64]) -> Result<f64> {
    check_rate_function(g)?;
    let a = g
        .windows(2)
        .filter(|w| w[0] > w[1])
        .map(|w| w[0] * w[0] / (w[0] - w[1]))
        .fold(f64::INFINITY, f64::min);
    if a.is_finite() {
        Ok(a)
    } else {
        Err(Error::InvalidArgument("g never decreases; A is unbounded".into()))
    }
}

/// Local learning rates `eta_l(t) = 2 g(t) / (A mu)`.
pub fn local_rate_schedule(g: &[f64], a: f64, mu: f64) -> Vec<f64> {
    g.iter().map(|gt| 2.0 * gt / (a * mu)).collect()
}

fn check_rate_function(g: &[f64]) -> Result<()> {
    if g.is_empty() {
        return Err(Error::InvalidArgument("empty g".into()));
    }
    if g.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::InvalidArgument("g must be positive and finite".into()));
    }
    if g.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidArgument("g must be non-increasing".into()));
    }
    Ok(())
}

/// Mann–Kendall trend statistic with tie correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannKendall {
    pub s: i64,
    pub z: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

pub fn mann_kendall(xs: &[f64]) -> MannKendall {
    let n = xs.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match xs[j].partial_cmp(&xs[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * (t - 1.0) * (2.0 * t + 5.0);
        i = j + 1;
    }
    let nf = n as f64;
    let var = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - ties) / 18.0;
    let z = if var <= 0.0 || s == 0 {
        0.0
    } else if s > 0 {
        (s - 1) as f64 / var.sqrt()
    } else {
        (s + 1) as f64 / var.sqrt()
    };
    let normal = Normal::standard();
    MannKendall {
        s,
        z,
        p_value: 2.0 * (1.0 - normal.cdf(z.abs())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateCheck {
    pub c_fit: f64,
    pub holds: bool,
    pub trend: MannKendall,
}

/// Checks `trajectory[t] <= C g(t)` for a finite `C`.
///
/// `eta_l_used[t]` must equal `2 g(t) / (A mu)` for every round that
/// produced the trajectory. `holds` requires a finite `C_fit` and no
/// upward Mann–Kendall trend in `trajectory / g` at level 0.05.
pub fn theorem2_rate_check(
    trajectory: &[f64],
    g: &[f64],
    a: f64,
    mu: f64,
    eta_l_used: &[f64],
) -> Result<RateCheck> {
    check_rate_function(g)?;
    if g.len() < trajectory.len() {
        return Err(Error::dim(trajectory.len(), g.len(), "g(t)"));
    }
    let expected = local_rate_schedule(g, a, mu);
    for (t, (used, want)) in eta_l_used.iter().zip(&expected).enumerate() {
        if (used - want).abs() > 1e-12 * want.abs() {
            return Err(Error::ScheduleMismatch {
                round: t,
                used: *used,
                expected: *want,
            });
        }
    }
    if eta_l_used.len() + 1 < trajectory.len() {
        return Err(Error::dim(trajectory.len() - 1, eta_l_used.len(), "local rate schedule"));
    }
    let ratios: Vec<f64> = trajectory.iter().zip(g).map(|(v, gt)| v / gt).collect();
    let c_fit = ratios.iter().copied().fold(0.0, f64::max);
    let trend = mann_kendall(&ratios);
    let upward = trend.s > 0 && trend.p_value < 0.05;
    Ok(RateCheck {
        c_fit,
        holds: c_fit.is_finite() && !upward,
        trend,
    })
}

/// Global, per-client and personal minimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOptima {
    pub w_star: ParamVector,
    pub z_star: Vec<ParamVector>,
    pub v_star: Vec<ParamVector>,
}

const GD_ITERATION_CAP: usize = 1_000_000;
const GD_TOLERANCE: f64 = 1e-10;

/// Minimizers of the global loss, of each local loss and of each personal
/// objective anchored at `w*`.
///
/// Closed forms for quadratics; otherwise deterministic full-batch
/// gradient descent with step `1/L` until the gradient norm is below 1e-10.
pub fn compute_optima(
    clients: &[(&ModelSpec, Option<&DataShard>)],
    lambda: f64,
) -> Result<ClientOptima> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    if let Some((s, _)) = clients.iter().find(|(s, _)| !s.is_convex()) {
        return Err(Error::Unsupported(format!("{} has no unique optimum", s.kind_name())));
    }
    let quads: Option<Vec<&QuadraticSpec>> = clients
        .iter()
        .map(|(s, _)| match s {
            ModelSpec::Quadratic(q) => Some(q),
            _ => None,
        })
        .collect();
    match quads {
        Some(qs) => quadratic_optima(&qs, lambda),
        None => descent_optima(clients, lambda),
    }
}

fn solve_spd(matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<ParamVector> {
    let chol = matrix
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("Hessian is not positive definite".into()))?;
    Ok(chol.solve(&rhs).as_slice().to_vec().into())
}

fn quadratic_optima(qs: &[&QuadraticSpec], lambda: f64) -> Result<ClientOptima> {
    let d = qs[0].dim();
    if let Some(q) = qs.iter().find(|q| q.dim() != d) {
        return Err(Error::dim(d, q.dim(), "quadratic client"));
    }
    let mut sum = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for q in qs {
        sum += q.to_dmatrix();
        rhs += DVector::from_vec(q.apply(q.center()));
    }
    let w_star = solve_spd(sum, rhs)?;
    let z_star = qs.iter().map(|q| ParamVector::from(q.center())).collect();
    let v_star = qs
        .iter()
        .map(|q| {
            let mut h = q.to_dmatrix();
            for i in 0..d {
                h[(i, i)] += lambda;
            }
            let b = DVector::from_vec(q.apply(q.center())) + DVector::from_row_slice(&w_star) * lambda;
            solve_spd(h, b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClientOptima {
        w_star,
        z_star,
        v_star,
    })
}

/// Gradient descent on `sum_i f_i(x) + lambda/2 ||x - anchor||^2` (mean over
/// the terms), starting from `x0`.
fn descend(
    terms: &[(&ModelSpec, Option<&DataShard>)],
    anchor: Option<(&[f64], f64)>,
    x0: ParamVector,
    smoothness: f64,
) -> Result<ParamVector> {
    let k = terms.len() as f64;
    let extra = anchor.map_or(0.0, |(_, l)| l);
    let step = 1.0 / (smoothness + extra);
    let mut x = x0;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..GD_ITERATION_CAP {
        let mut g = ParamVector::zeros(x.dim());
        for (spec, shard) in terms {
            let batch = shard.map_or(Batch::none(), Batch::full);
            g.axpy(1.0 / k, &spec.grad(&x, &batch)?);
        }
        if let Some((a, l)) = anchor {
            for ((gi, xi), ai) in g.iter_mut().zip(x.iter()).zip(a) {
                *gi += l * (xi - ai);
            }
        }
        grad_norm = g.norm();
        if grad_norm < GD_TOLERANCE {
            return Ok(x);
        }
        x.axpy(-step, &g);
    }
    Err(Error::NoConvergence {
        iterations: GD_ITERATION_CAP,
        grad_norm,
    })
}

fn descent_optima(clients: &[(&ModelSpec, Option<&DataShard>)], lambda: f64) -> Result<ClientOptima> {
    let mut l_max = 0.0f64;
    for (spec, shard) in clients {
        l_max = l_max.max(convexity_constants(spec, *shard)?.1);
    }
    let d = clients[0].0.dim();
    let w_star = descend(clients, None, ParamVector::zeros(d), l_max)?;
    let mut z_star = Vec::with_capacity(clients.len());
    let mut v_star = Vec::with_capacity(clients.len());
    for client in clients {
        let l = convexity_constants(client.0, client.1)?.1;
        let one = std::slice::from_ref(client);
        z_star.push(descend(one, None, w_star.clone(), l)?);
        v_star.push(descend(one, Some((&w_star, lambda)), w_star.clone(), l)?);
    }
    Ok(ClientOptima {
        w_star,
        z_star,
        v_star,
    })
}
