//! Monte-Carlo validation of the global error bound, the personal-model
//! recursion and the personal rate under the `g(t)` schedule.

use crate::config::Problem;
use crate::error::{Error, Result};
use crate::experiment::{monte_carlo, steady_state, McResult};
use crate::report::CsvTable;
use crate::theory::{
    choose_a, contraction_c, eta_g_max, global_bound_curve, local_rate_schedule,
    personal_bound_curve, theorem2_rate_check, RateCheck,
};
use crate::training::{Algorithm, LocalRate, TrainerConfig, METRIC_COLUMNS};

/// Standard errors of slack allowed above a bound.
pub const SE_SLACK: f64 = 3.0;
/// Relative slack for rounding in the Monte-Carlo mean.
const ROUNDING: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub checks: Vec<CheckLine>,
    /// Trajectory against bound, one row per round.
    pub table: CsvTable,
    /// Personal trajectory under the `g(t)` schedule, when run.
    pub rate_table: Option<CsvTable>,
    pub rate: Option<RateCheck>,
    pub eta_g_max: f64,
    pub c: f64,
    pub global: McResult,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn holds(mean: f64, se: f64, bound: f64) -> bool {
    mean <= bound * (1.0 + ROUNDING) + SE_SLACK * se
}

/// Worst `(t, excess)` of a series over its bound, excess in standard
/// errors above the allowed slack (negative when it holds).
fn worst(mean: &[f64], se: &[f64], bound: &[f64]) -> (usize, bool, f64) {
    let mut all = true;
    let mut worst_t = 0;
    let mut worst_margin = f64::NEG_INFINITY;
    for t in 0..mean.len().min(bound.len()) {
        all &= holds(mean[t], se[t], bound[t]);
        let margin = mean[t] - bound[t] - SE_SLACK * se[t];
        if margin > worst_margin {
            worst_margin = margin;
            worst_t = t;
        }
    }
    (worst_t, all, worst_margin)
}

/// Geometric decay rate of `mean - floor` while it stays above the floor.
pub fn transient_rate(mean: &[f64]) -> Result<f64> {
    let floor = steady_state(mean, mean.len() / 2)?;
    let excess = |t: usize| (mean[t] - floor).max(f64::MIN_POSITIVE);
    let mut end = 0;
    while end + 1 < mean.len() && mean[end + 1] - floor > floor {
        end += 1;
    }
    let end = end.max(1).min(mean.len() - 1);
    Ok((excess(end) / excess(0)).powf(1.0 / end as f64))
}

/// Runs `template` over `seeds` on a convex problem and checks every bound.
///
/// The personal checks need one local step per round and the personalized
/// algorithm; otherwise they are reported as skipped (passing) lines.
pub fn validate_bounds(
    template: &TrainerConfig,
    problem: &Problem,
    seeds: &[u64],
    rate_check: bool,
) -> Result<BoundReport> {
    let c = problem
        .constants
        .as_ref()
        .ok_or_else(|| Error::Unsupported("bound validation needs a convex model".into()))?;
    let optima = problem.optima.as_ref().expect("constants imply optima");
    let eta_g = template.eta_g;
    let max = eta_g_max(c)?;
    let cc = contraction_c(c, eta_g)?;
    let rounds = template.rounds;
    let bound = global_bound_curve(c, eta_g, rounds)?;
    let template = TrainerConfig {
        projection_radius: template.projection_radius.or(Some(c.delta / 2.0)),
        ..template.clone()
    };
    let reference = problem.reference();
    let mc = monte_carlo(&template, &problem.w0, &problem.clients, &problem.channel, &reference, seeds)?;
    let mut checks = Vec::new();

    let (t, ok, margin) = worst(&mc.global.mean, &mc.global.std_err, &bound);
    checks.push(CheckLine {
        name: "global error bound",
        passed: ok,
        detail: format!(
            "{} seeds, {rounds} rounds, worst margin {margin:.3e} at t = {t}",
            seeds.len()
        ),
    });
    checks.push(CheckLine {
        name: "contraction constant",
        passed: cc > 0.0 && cc < 1.0,
        detail: format!("c = {cc:.6} at eta_g = {eta_g:.6} (eta_g_max = {max:.6})"),
    });
    let rate = transient_rate(&mc.global.mean)?;
    checks.push(CheckLine {
        name: "transient decay",
        passed: rate <= cc + 0.05,
        detail: format!("measured rate {rate:.4} vs c + 0.05 = {:.4}", cc + 0.05),
    });

    let personal_ok = template.algorithm == Algorithm::PersonalizedAota && template.local_steps == 1;
    let v0_err = problem
        .clients
        .iter()
        .map(|cl| cl.v.dist_sq(&optima.v_star[cl.client_id]))
        .fold(0.0, f64::max);
    let rates: Vec<f64> = (0..rounds.max(1)).map(|t| template.eta_l.at(t)).collect();
    let personal_bound = if personal_ok {
        Some(personal_bound_curve(v0_err, &bound, c, template.lambda, &rates)?)
    } else {
        None
    };
    let v_max: Vec<f64> = (0..=rounds)
        .map(|t| mc.personal.iter().map(|s| s.mean[t]).fold(0.0, f64::max))
        .collect();
    match &personal_bound {
        Some(pb) => {
            let mut all = true;
            let mut worst_margin = f64::NEG_INFINITY;
            for s in &mc.personal {
                let (_, ok, m) = worst(&s.mean, &s.std_err, pb);
                all &= ok;
                worst_margin = worst_margin.max(m);
            }
            checks.push(CheckLine {
                name: "personal recursion bound",
                passed: all,
                detail: format!(
                    "lambda = {}, {} clients, worst margin {worst_margin:.3e}",
                    template.lambda,
                    mc.personal.len()
                ),
            });
        }
        None => checks.push(CheckLine {
            name: "personal recursion bound",
            passed: true,
            detail: "skipped: needs the personalized algorithm with local_steps = 1".into(),
        }),
    }

    let mut table = CsvTable::new(&METRIC_COLUMNS);
    for t in 0..=rounds {
        table.rows.push(vec![Some(t as f64), None, None, None, None, Some(mc.global.mean[t])]);
    }
    let col = |v: &[f64]| v.iter().map(|x| Some(*x)).collect::<Vec<_>>();
    table.push_column("w_dist_sq_se", &col(&mc.global.std_err));
    table.push_column("v_dist_sq_max", &col(&v_max));
    table.push_column(
        "personal_bound",
        &personal_bound.as_deref().map(col).unwrap_or_default(),
    );
    table.push_column("bound_t", &col(&bound));
    table.push_column("c_const", &vec![Some(cc); rounds + 1]);
    table.push_column("eta_g_max", &vec![Some(max); rounds + 1]);

    let (rate_table, rate_result) = if rate_check && personal_ok {
        let a = choose_a(&bound)?;
        let schedule = local_rate_schedule(&bound, a, c.mu);
        let cfg = TrainerConfig {
            eta_l: LocalRate::Schedule(schedule.clone()),
            ..template.clone()
        };
        let run = monte_carlo(&cfg, &problem.w0, &problem.clients, &problem.channel, &reference, seeds)?;
        let traj: Vec<f64> = (0..=rounds)
            .map(|t| run.personal.iter().map(|s| s.mean[t]).fold(0.0, f64::max))
            .collect();
        let check = theorem2_rate_check(&traj, &bound, a, c.mu, &schedule[..rounds])?;
        checks.push(CheckLine {
            name: "personal rate under g(t) schedule",
            passed: check.holds,
            detail: format!(
                "A = {a:.6}, C_fit = {:.4}, Mann-Kendall z = {:.3} (p = {:.3e})",
                check.c_fit, check.trend.z, check.trend.p_value
            ),
        });
        let mut t2 = CsvTable::new(&["round", "v_dist_sq_max", "g_t", "eta_l", "ratio"]);
        for t in 0..=rounds {
            t2.rows.push(vec![
                Some(t as f64),
                Some(traj[t]),
                Some(bound[t]),
                Some(schedule[t]),
                Some(traj[t] / bound[t]),
            ]);
        }
        (Some(t2), Some(check))
    } else {
        (None, None)
    };
    Ok(BoundReport {
        checks,
        table,
        rate_table,
        rate: rate_result,
        eta_g_max: max,
        c: cc,
        global: mc,
    })
}
