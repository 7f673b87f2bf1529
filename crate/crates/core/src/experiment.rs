//! Reusable experiment drivers: seeded quadratic ensembles, Monte-Carlo
//! averages over channel seeds, floor and slope estimates, and the
//! personalization runs on synthetic classification tasks.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelModel;
use crate::data::{inject_label_noise, DataShard, SynthTask};
use crate::error::{Error, Result};
use crate::models::{LogisticSpec, ModelSpec, QuadraticSpec};
use crate::param::ParamVector;
use crate::rng::{self, Domain};
use crate::theory::{compute_optima, ClientOptima, TheoryConstants};
use crate::training::{run_experiment, ClientState, Reference, RunResult, TrainerConfig};

/// Shape of a random quadratic ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub clients: usize,
    pub dim: usize,
    /// Eigenvalues of every `A_k` are uniform in `[eig_min, eig_max]`.
    pub eig_min: f64,
    pub eig_max: f64,
    /// Norm of the shared part of the centres.
    pub center_norm: f64,
    /// Per-coordinate standard deviation of each client's centre offset.
    pub center_spread: f64,
    pub seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            clients: 20,
            dim: 10,
            eig_min: 1.0,
            eig_max: 4.0,
            center_norm: 1.0,
            center_spread: 0.3,
            seed: 0,
        }
    }
}

/// Local losses `1/2 (w - a_k)^T A_k (w - a_k)` with `A_k = Q_k D_k Q_k^T`
/// for a random orthogonal `Q_k`.
#[derive(Debug, Clone)]
pub struct QuadraticEnsemble {
    pub specs: Vec<Arc<ModelSpec>>,
    pub w0: ParamVector,
}

impl QuadraticEnsemble {
    pub fn generate(spec: &EnsembleSpec) -> Result<Self> {
        if spec.clients == 0 || spec.dim == 0 {
            return Err(Error::InvalidArgument("ensemble needs clients and dim > 0".into()));
        }
        if !(spec.eig_min > 0.0 && spec.eig_max >= spec.eig_min) {
            return Err(Error::InvalidArgument(format!(
                "eigenvalue range [{}, {}] is not positive",
                spec.eig_min, spec.eig_max
            )));
        }
        let d = spec.dim;
        let mut shared_rng = rng::stream(spec.seed, Domain::Problem, u64::MAX, 0);
        let mut shared: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut shared_rng)).collect();
        let n = shared.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        shared.iter_mut().for_each(|x| *x *= spec.center_norm / n);
        let specs = (0..spec.clients)
            .map(|k| {
                let mut rng = rng::stream(spec.seed, Domain::Problem, k as u64, 1);
                let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
                let q = g.qr().q();
                let eig = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |_, _| {
                    rng.random_range(spec.eig_min..=spec.eig_max)
                }));
                let a = &q * eig * q.transpose();
                // exact symmetry is required by QuadraticSpec::new
                let a = (&a + a.transpose()) * 0.5;
                let center: Vec<f64> = shared
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + spec.center_spread * z
                    })
                    .collect();
                let row_major: Vec<f64> = a.transpose().iter().copied().collect();
                QuadraticSpec::new(row_major, center).map(|q| Arc::new(ModelSpec::Quadratic(q)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuadraticEnsemble {
            specs,
            w0: ParamVector::zeros(d),
        })
    }

    pub fn pairs(&self) -> Vec<(&ModelSpec, Option<&DataShard>)> {
        self.specs.iter().map(|s| (s.as_ref(), None)).collect()
    }

    pub fn optima(&self, lambda: f64) -> Result<ClientOptima> {
        compute_optima(&self.pairs(), lambda)
    }

    pub fn constants(&self, optima: &ClientOptima, channel: &ChannelModel) -> Result<TheoryConstants> {
        TheoryConstants::measure(&self.pairs(), optima, &self.w0, channel)
    }

    /// Clients whose personal models start at `w0`.
    pub fn clients(&self) -> Vec<ClientState> {
        self.specs
            .iter()
            .enumerate()
            .map(|(k, s)| ClientState::new(k, s.clone(), None, self.w0.clone()))
            .collect()
    }
}

/// Monte-Carlo mean and standard error per round.
#[derive(Debug, Clone, PartialEq)]
pub struct McSeries {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl McSeries {
    /// Column statistics of `samples[seed][t]`.
    pub fn from_samples(samples: &[Vec<f64>]) -> Self {
        let n = samples.len() as f64;
        let len = samples.iter().map(Vec::len).min().unwrap_or(0);
        let mut mean = vec![0.0; len];
        let mut std_err = vec![0.0; len];
        for t in 0..len {
            let m = samples.iter().map(|s| s[t]).sum::<f64>() / n;
            let var = if n > 1.0 {
                samples.iter().map(|s| (s[t] - m).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            mean[t] = m;
            std_err[t] = (var / n).sqrt();
        }
        McSeries { mean, std_err }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    /// `||w^t - w*||^2`.
    pub global: McSeries,
    /// `||v_k^t - v_k*||^2`, one series per client.
    pub personal: Vec<McSeries>,
    pub seeds: Vec<u64>,
}

/// Runs the same problem once per seed (channel and client streams both
/// keyed by it) and averages the squared distances to the optima.
///
/// Seeds run in parallel; results are gathered in seed order.
pub fn monte_carlo(
    template: &TrainerConfig,
    w0: &ParamVector,
    clients: &[ClientState],
    channel: &ChannelModel,
    reference: &Reference,
    seeds: &[u64],
) -> Result<McResult> {
    let runs: Vec<RunResult> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainerConfig {
                seed,
                channel_seed: Some(seed),
                eval_metrics: false,
                ..template.clone()
            };
            run_experiment(&cfg, w0.clone(), clients.to_vec(), channel, reference)
        })
        .collect::<Result<Vec<_>>>()?;
    let global: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| r.metrics.rows.iter().map(|m| m.w_dist_sq.unwrap_or(f64::NAN)).collect())
        .collect();
    let personal = if reference.v_star.is_some() {
        (0..clients.len())
            .map(|k| {
                let per_seed: Vec<Vec<f64>> = runs
                    .iter()
                    .map(|r| r.v_dist_sq.iter().map(|row| row[k]).collect())
                    .collect();
                McSeries::from_samples(&per_seed)
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(McResult {
        global: McSeries::from_samples(&global),
        personal,
        seeds: seeds.to_vec(),
    })
}

/// Mean of `series[burn_in..]`.
pub fn steady_state(series: &[f64], burn_in: usize) -> Result<f64> {
    let tail = series
        .get(burn_in..)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::InvalidArgument(format!("burn-in {burn_in} leaves no rounds")))?;
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two matching points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Synthetic classification setting for personalization runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizationTask {
    pub task: SynthTask,
    /// Dirichlet label-skew parameter; `None` keeps each client's natural mix.
    pub alpha: Option<f64>,
    pub test_fraction: f64,
    pub rho: f64,
    pub noisy_client_ratio: f64,
    pub level_lower_bound: f64,
}

/// Mean local test accuracies of the personal and global models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPair {
    pub personal: f64,
    pub generic: f64,
}

impl AccuracyPair {
    pub fn gap(&self) -> f64 {
        self.personal - self.generic
    }
}

impl PersonalizationTask {
    /// Train and clean test shards, with label noise injected into the
    /// training shards after partitioning.
    pub fn shards(&self) -> Result<(Vec<DataShard>, Vec<DataShard>)> {
        let (train, test) = match self.alpha {
            Some(alpha) => self.task.generate_label_skewed(alpha, self.test_fraction)?,
            None => {
                let n = self.task.samples_per_client;
                let n_test = ((n as f64) * self.test_fraction).ceil() as usize;
                let all = SynthTask {
                    samples_per_client: n + n_test,
                    ..self.task.clone()
                }
                .generate()?;
                let split: Vec<(DataShard, DataShard)> = all
                    .iter()
                    .map(|s| {
                        let train: Vec<usize> = (0..n).collect();
                        let test: Vec<usize> = (n..n + n_test).collect();
                        (s.select(&train, s.client_id), s.select(&test, s.client_id))
                    })
                    .collect();
                split.into_iter().unzip()
            }
        };
        let train = inject_label_noise(&train, self.noisy_client_ratio, self.level_lower_bound, self.task.seed)?;
        Ok((train, test))
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::LogisticL2(LogisticSpec::new(
            self.task.features,
            self.task.classes,
            self.rho,
        )?))
    }

    /// Trains with `cfg` and reports the final mean local test accuracies.
    pub fn run(&self, cfg: &TrainerConfig, channel: &ChannelModel) -> Result<(AccuracyPair, RunResult)> {
        let (train, test) = self.shards()?;
        let spec = Arc::new(self.spec()?);
        let w0 = spec.init_params(self.task.seed);
        let clients: Vec<ClientState> = train
            .into_iter()
            .zip(test)
            .map(|(tr, te)| {
                ClientState::new(tr.client_id, spec.clone(), Some(Arc::new(tr)), w0.clone())
                    .with_test_shard(Arc::new(te))
            })
            .collect();
        let cfg = TrainerConfig {
            clients: clients.len(),
            eval_metrics: true,
            ..cfg.clone()
        };
        let run = run_experiment(&cfg, w0, clients, channel, &Reference::default())?;
        let last = run.metrics.rows.last().expect("at least the initial row");
        let pair = AccuracyPair {
            personal: last.mean_personal_acc.unwrap_or(f64::NAN),
            generic: last.generic_acc.unwrap_or(f64::NAN),
        };
        Ok((pair, run))
    }
}
