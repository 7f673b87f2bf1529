//! Experiment configuration files (TOML) and the problems they describe.
//!
//! Every section is optional except `[model]`. Unknown keys are rejected by
//! name. The effective configuration, defaults included, is echoed into
//! output headers as `section.key = value` lines.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::channel::{BasisKind, ChannelModel, FadingKind, NoiseReference};
use crate::data::{
    dirichlet_partition, iid_partition, inject_label_noise, load_csv, DataShard, SynthTask,
};
use crate::error::{Error, Result};
use crate::experiment::{EnsembleSpec, PersonalizationTask, QuadraticEnsemble};
use crate::models::{LogisticSpec, MlpSpec, ModelSpec};
use crate::param::ParamVector;
use crate::theory::{compute_optima, eta_g_max, ClientOptima, TheoryConstants};
use crate::training::{
    AggregationMode, Algorithm, BatchSize, ClientState, LocalRate, Reference, TrainerConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub training: TrainingSection,
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    PersonalizedAota,
    OtaFedavg,
    OtaFedprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationName {
    Vector,
    Waveform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub clients: usize,
    pub rounds: usize,
    pub lambda: f64,
    /// Explicit global rate. Mutually exclusive with `eta_g_fraction`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_g: Option<f64>,
    /// Global rate as a multiple of the computed maximum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_g_fraction: Option<f64>,
    pub eta_l: f64,
    pub local_steps: usize,
    /// Minibatch size for local steps; 0 means the full shard.
    pub batch_size: usize,
    /// Batch for the uploaded gradient; 0 means the full shard.
    pub global_batch: usize,
    pub algorithm: AlgorithmName,
    pub mu_prox: f64,
    /// Ball radius for `w` and `v_k`. Bound validation defaults it to half
    /// the measured diameter.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projection_radius: Option<f64>,
    pub aggregation: AggregationName,
    pub basis: BasisKind,
    /// Waveform samples per symbol; defaults to the smallest valid count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_symbol: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            clients: 10,
            rounds: 100,
            lambda: 0.1,
            eta_g: None,
            eta_g_fraction: None,
            eta_l: 0.1,
            local_steps: 5,
            batch_size: 0,
            global_batch: 0,
            algorithm: AlgorithmName::PersonalizedAota,
            mu_prox: 0.0,
            projection_radius: None,
            aggregation: AggregationName::Vector,
            basis: BasisKind::Hadamard,
            samples_per_symbol: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Quadratic ensemble dimension.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_eig_min")]
    pub eig_min: f64,
    #[serde(default = "default_eig_max")]
    pub eig_max: f64,
    #[serde(default = "default_center_norm")]
    pub center_norm: f64,
    #[serde(default = "default_center_spread")]
    pub center_spread: f64,
    /// Ridge coefficient of the logistic model.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Hidden widths of the MLP.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_dim() -> usize {
    10
}
fn default_eig_min() -> f64 {
    1.0
}
fn default_eig_max() -> f64 {
    4.0
}
fn default_center_norm() -> f64 {
    1.0
}
fn default_center_spread() -> f64 {
    0.3
}
fn default_rho() -> f64 {
    0.01
}
fn default_hidden() -> Vec<usize> {
    vec![16]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    /// Synthetic only: each client keeps its natural label mix.
    Natural,
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub features: usize,
    pub samples_per_client: usize,
    pub classes: usize,
    pub heterogeneity: f64,
    pub signal: f64,
    pub scheme: SchemeName,
    pub alpha: f64,
    pub test_fraction: f64,
    pub noisy_client_ratio: f64,
    pub level_lower_bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub label_column: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            features: 10,
            samples_per_client: 100,
            classes: 2,
            heterogeneity: 1.0,
            signal: 2.0,
            scheme: SchemeName::Natural,
            alpha: 0.5,
            test_fraction: 0.5,
            noisy_client_ratio: 0.0,
            level_lower_bound: 0.5,
            path: None,
            label_column: "label".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub kind: FadingKind,
    pub mu_h: f64,
    /// Fading variance; only read for `gaussian_abs`.
    pub sigma_h2: f64,
    pub sigma2: f64,
    pub power: f64,
    pub noise_reference: NoiseReference,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            kind: FadingKind::Rayleigh,
            mu_h: 1.0,
            sigma_h2: 0.0,
            sigma2: 0.01,
            power: 1.0,
            noise_reference: NoiseReference::Receiver,
        }
    }
}

impl ChannelSection {
    pub fn model(&self) -> Result<ChannelModel> {
        let model = match self.kind {
            FadingKind::Rayleigh => ChannelModel::rayleigh(self.mu_h, self.sigma2, self.power)?,
            FadingKind::Constant => ChannelModel::constant(self.mu_h, self.sigma2, self.power)?,
            FadingKind::GaussianAbs => {
                ChannelModel::gaussian_abs(self.mu_h, self.sigma_h2, self.sigma2, self.power)?
            }
        };
        Ok(model.with_noise_reference(self.noise_reference))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Training/channel seeds. Takes precedence over `seed_count`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Seeds `seed, seed + 1, ...` when `seeds` is not given.
    pub seed_count: usize,
    pub seed: u64,
    /// Seed of the problem (ensemble or data). Defaults to each run seed
    /// for training and to 0 for bound validation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem_seed: Option<u64>,
    pub output_dir: PathBuf,
    pub bound_validation: bool,
    /// Also check the personal rate under the `g(t)`-driven local schedule.
    pub rate_check: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: None,
            seed_count: 1,
            seed: 0,
            problem_seed: None,
            output_dir: PathBuf::from("out"),
            bound_validation: false,
            rate_check: true,
        }
    }
}

impl RunSection {
    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.seed_count as u64).map(|i| self.seed + i).collect(),
        }
    }
}

/// Grid axes; the sweep runs their Cartesian product.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy_client_ratio: Option<Vec<f64>>,
}

/// One point of a sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub lambda: f64,
    pub clients: usize,
    pub noisy_client_ratio: f64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses, validates and, with `bound_validation` on, checks the global
    /// rate against the computed maximum.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        if cfg.run.bound_validation {
            cfg.check_step_size()?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.training;
        if t.eta_g.is_some() && t.eta_g_fraction.is_some() {
            return bad("training.eta_g and training.eta_g_fraction are mutually exclusive".into());
        }
        if let Some(f) = t.eta_g_fraction {
            if !(f > 0.0) {
                return bad(format!("training.eta_g_fraction must be > 0, got {f}"));
            }
            if self.model.kind == ModelKind::Mlp {
                return bad("training.eta_g_fraction needs a convex model".into());
            }
        }
        if self.run.bound_validation && self.model.kind == ModelKind::Mlp {
            return bad("run.bound_validation needs a convex model".into());
        }
        if self.run.seed_list().is_empty() {
            return bad("run needs at least one seed".into());
        }
        let d = &self.data;
        if self.model.kind != ModelKind::Quadratic {
            if d.source == DataSource::Csv && d.path.is_none() {
                return bad("data.path is required for csv data".into());
            }
            if d.source == DataSource::Csv && d.scheme == SchemeName::Natural {
                return bad("csv data needs data.scheme = \"iid\" or \"dirichlet\"".into());
            }
            let upper = if d.source == DataSource::Csv { 1.0 } else { f64::INFINITY };
            if !(d.test_fraction > 0.0 && d.test_fraction < upper) {
                return bad(format!("data.test_fraction {} out of range", d.test_fraction));
            }
        }
        if let Some(s) = &self.sweep {
            let lens = [
                s.lambda.as_ref().map(Vec::len),
                s.clients.as_ref().map(Vec::len),
                s.noisy_client_ratio.as_ref().map(Vec::len),
            ];
            if lens.contains(&Some(0)) {
                return bad("sweep axes must not be empty".into());
            }
        }
        self.trainer(0, 0.1, None)?.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.channel.model().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// `section.key = value` lines for every effective parameter.
    pub fn echo(&self) -> Vec<String> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        let s = self.sweep.clone().unwrap_or_default();
        let lambdas = s.lambda.unwrap_or_else(|| vec![self.training.lambda]);
        let clients = s.clients.unwrap_or_else(|| vec![self.training.clients]);
        let ratios = s.noisy_client_ratio.unwrap_or_else(|| vec![self.data.noisy_client_ratio]);
        let mut out = Vec::new();
        for &lambda in &lambdas {
            for &k in &clients {
                for &r in &ratios {
                    out.push(GridPoint {
                        lambda,
                        clients: k,
                        noisy_client_ratio: r,
                    });
                }
            }
        }
        out
    }

    /// Copy with a grid point applied.
    pub fn at_point(&self, p: &GridPoint) -> Self {
        let mut c = self.clone();
        c.training.lambda = p.lambda;
        c.training.clients = p.clients;
        c.data.noisy_client_ratio = p.noisy_client_ratio;
        c.sweep = None;
        c
    }

    /// Trainer settings for one run seed with the resolved global rate.
    pub fn trainer(&self, seed: u64, eta_g: f64, projection: Option<f64>) -> Result<TrainerConfig> {
        let t = &self.training;
        let batch = |b: usize| if b == 0 { BatchSize::Full } else { BatchSize::Mini(b) };
        let algorithm = match t.algorithm {
            AlgorithmName::PersonalizedAota => Algorithm::PersonalizedAota,
            AlgorithmName::OtaFedavg => Algorithm::OtaFedAvg,
            AlgorithmName::OtaFedprox => Algorithm::OtaFedProx { mu_prox: t.mu_prox },
        };
        let aggregation = match t.aggregation {
            AggregationName::Vector => AggregationMode::VectorLevel,
            AggregationName::Waveform => {
                let d = self.dim()?;
                let samples = t.samples_per_symbol.unwrap_or(match t.basis {
                    BasisKind::Hadamard => d.next_power_of_two(),
                    _ => d,
                });
                AggregationMode::WaveformLevel {
                    basis: t.basis,
                    samples,
                }
            }
        };
        Ok(TrainerConfig {
            lambda: t.lambda,
            eta_g,
            eta_l: LocalRate::Constant(t.eta_l),
            clients: t.clients,
            rounds: t.rounds,
            local_steps: t.local_steps,
            batch_size: batch(t.batch_size),
            global_batch: batch(t.global_batch),
            algorithm,
            seed,
            channel_seed: None,
            projection_radius: t.projection_radius.or(projection),
            aggregation,
            eval_metrics: true,
        })
    }

    /// Parameter dimension of the configured model.
    pub fn dim(&self) -> Result<usize> {
        Ok(match self.model.kind {
            ModelKind::Quadratic => self.model.dim,
            _ => self.model_spec(self.data.features, self.data.classes)?.dim(),
        })
    }

    fn model_spec(&self, features: usize, classes: usize) -> Result<ModelSpec> {
        Ok(match self.model.kind {
            ModelKind::Quadratic => unreachable!("quadratic clients carry their own specs"),
            ModelKind::Logistic => ModelSpec::LogisticL2(LogisticSpec::new(features, classes, self.model.rho)?),
            ModelKind::Mlp => {
                let out = if classes == 2 { 1 } else { classes };
                let mut widths = vec![features];
                widths.extend(&self.model.hidden);
                widths.push(out);
                ModelSpec::Mlp(MlpSpec::new(widths, self.model.weight_decay)?)
            }
        })
    }

    /// Builds clients, start point and (when `theory` is set or needed for
    /// the global rate) optima and constants.
    pub fn build_problem(&self, problem_seed: u64, theory: bool) -> Result<Problem> {
        let channel = self.channel.model()?;
        let theory = theory || self.training.eta_g_fraction.is_some() || self.run.bound_validation;
        let k = self.training.clients;
        let (clients, w0) = match self.model.kind {
            ModelKind::Quadratic => {
                let ens = QuadraticEnsemble::generate(&EnsembleSpec {
                    clients: k,
                    dim: self.model.dim,
                    eig_min: self.model.eig_min,
                    eig_max: self.model.eig_max,
                    center_norm: self.model.center_norm,
                    center_spread: self.model.center_spread,
                    seed: problem_seed,
                })?;
                (ens.clients(), ens.w0)
            }
            _ => {
                let (train, test) = self.shards(problem_seed)?;
                let classes = train[0].class_count;
                let spec = Arc::new(self.model_spec(train[0].n_features, classes)?);
                let w0 = spec.init_params(problem_seed);
                let clients = train
                    .into_iter()
                    .zip(test)
                    .map(|(tr, te)| {
                        ClientState::new(tr.client_id, spec.clone(), Some(Arc::new(tr)), w0.clone())
                            .with_test_shard(Arc::new(te))
                    })
                    .collect();
                (clients, w0)
            }
        };
        let (optima, constants) = if theory {
            let pairs: Vec<(&ModelSpec, Option<&DataShard>)> = clients
                .iter()
                .map(|c: &ClientState| (c.spec.as_ref(), c.shard.as_deref()))
                .collect();
            let optima = compute_optima(&pairs, self.training.lambda)?;
            let constants = TheoryConstants::measure(&pairs, &optima, &w0, &channel)?;
            (Some(optima), Some(constants))
        } else {
            (None, None)
        };
        let eta_g = match (self.training.eta_g, self.training.eta_g_fraction, &constants) {
            (Some(e), _, _) => e,
            (None, Some(f), Some(c)) => f * eta_g_max(c)?,
            _ => 0.1,
        };
        Ok(Problem {
            clients,
            w0,
            optima,
            constants,
            channel,
            eta_g,
        })
    }

    /// Train and test shards for classification models.
    fn shards(&self, seed: u64) -> Result<(Vec<DataShard>, Vec<DataShard>)> {
        let d = &self.data;
        let k = self.training.clients;
        match d.source {
            DataSource::Synthetic => {
                let alpha = match d.scheme {
                    SchemeName::Dirichlet => Some(d.alpha),
                    SchemeName::Natural | SchemeName::Iid => None,
                };
                PersonalizationTask {
                    task: SynthTask {
                        clients: k,
                        features: d.features,
                        samples_per_client: d.samples_per_client,
                        classes: d.classes,
                        heterogeneity: d.heterogeneity,
                        signal: d.signal,
                        seed,
                    },
                    alpha,
                    test_fraction: d.test_fraction,
                    rho: self.model.rho,
                    noisy_client_ratio: d.noisy_client_ratio,
                    level_lower_bound: d.level_lower_bound,
                }
                .shards()
            }
            DataSource::Csv => {
                let path = d.path.as_ref().expect("validated");
                let all = load_csv(path, &d.label_column, d.classes)?;
                let plan = match d.scheme {
                    SchemeName::Dirichlet => dirichlet_partition(&all.labels, k, d.alpha, seed)?,
                    _ => iid_partition(&all.labels, k, seed)?,
                };
                let mut train = Vec::with_capacity(k);
                let mut test = Vec::with_capacity(k);
                for shard in plan.apply(&all) {
                    let n = shard.len();
                    let n_test = ((n as f64) * d.test_fraction).round() as usize;
                    if n_test == 0 || n_test >= n {
                        return Err(Error::ImpossiblePartition(format!(
                            "client {} has {n} samples; cannot hold out a test split",
                            shard.client_id
                        )));
                    }
                    let tr: Vec<usize> = (0..n - n_test).collect();
                    let te: Vec<usize> = (n - n_test..n).collect();
                    train.push(shard.select(&tr, shard.client_id));
                    test.push(shard.select(&te, shard.client_id));
                }
                let train = inject_label_noise(&train, d.noisy_client_ratio, d.level_lower_bound, seed)?;
                Ok((train, test))
            }
        }
    }

    /// Rejects a global rate at or above the computed maximum.
    pub fn check_step_size(&self) -> Result<()> {
        let seed = self.run.problem_seed.unwrap_or(0);
        let p = self.build_problem(seed, true)?;
        let c = p.constants.as_ref().expect("theory requested");
        let max = eta_g_max(c)?;
        if !(p.eta_g < max) {
            return Err(Error::Config(format!(
                "training.eta_g = {} violates the step-size condition: eta_g_max = {max}",
                p.eta_g
            )));
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// A built experiment: clients, start point, channel and resolved rate.
#[derive(Debug, Clone)]
pub struct Problem {
    pub clients: Vec<ClientState>,
    pub w0: ParamVector,
    pub optima: Option<ClientOptima>,
    pub constants: Option<TheoryConstants>,
    pub channel: ChannelModel,
    pub eta_g: f64,
}

impl Problem {
    pub fn reference(&self) -> Reference {
        match &self.optima {
            Some(o) => Reference {
                w_star: Some(o.w_star.clone()),
                v_star: Some(o.v_star.clone()),
            },
            None => Reference::default(),
        }
    }
}
