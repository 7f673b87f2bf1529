//! The personalized A-OTA round loop and the OTA-FedAvg / OTA-FedProx
//! baselines.
//!
//! Per round `t`, every client evaluates its upload at the broadcast model
//! `w^t`, personalized clients then refine `v_k` on
//! `F_k(v) + lambda/2 ||v - w^t||^2`, the uploads are aggregated over the air
//! and the server steps `w^{t+1} = w^t - eta_g g^t`.

use std::sync::Arc;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    aggregate_ota, make_basis, sample_realization, Aggregation, BasisKind, ChannelModel,
    WaveformBasis,
};
use crate::data::{Batch, DataShard};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::param::ParamVector;
use crate::report::CsvTable;
use crate::rng::{self, Domain, StreamRng};

/// Norm of `w` beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Algorithm {
    PersonalizedAota,
    OtaFedAvg,
    OtaFedProx { mu_prox: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    #[default]
    Full,
    Mini(usize),
}

/// Local learning rate: fixed, or one value per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LocalRate {
    Constant(f64),
    Schedule(Vec<f64>),
}

impl LocalRate {
    pub fn at(&self, round: usize) -> f64 {
        match self {
            LocalRate::Constant(r) => *r,
            LocalRate::Schedule(s) => s[round.min(s.len() - 1)],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LocalRate::Constant(r) => *r > 0.0 && r.is_finite(),
            LocalRate::Schedule(s) => !s.is_empty() && s.iter().all(|r| *r > 0.0 && r.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("local rates must be positive and finite".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    VectorLevel,
    WaveformLevel { basis: BasisKind, samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lambda: f64,
    pub eta_g: f64,
    pub eta_l: LocalRate,
    pub clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    /// Minibatch for personal (and baseline local) steps.
    pub batch_size: BatchSize,
    /// Batch for the uploaded gradient of the global objective.
    pub global_batch: BatchSize,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Seed of the channel draws; defaults to `seed`.
    pub channel_seed: Option<u64>,
    /// Radius of the origin-centred ball `w` and `v_k` are projected onto.
    pub projection_radius: Option<f64>,
    pub aggregation: AggregationMode,
    /// Record losses and accuracies each round (distances are always kept).
    pub eval_metrics: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lambda: 0.1,
            eta_g: 0.1,
            eta_l: LocalRate::Constant(0.1),
            clients: 10,
            rounds: 100,
            local_steps: 5,
            batch_size: BatchSize::Full,
            global_batch: BatchSize::Full,
            algorithm: Algorithm::PersonalizedAota,
            seed: 0,
            channel_seed: None,
            projection_radius: None,
            aggregation: AggregationMode::VectorLevel,
            eval_metrics: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.eta_g > 0.0 && self.eta_g.is_finite()) {
            return bad(format!("eta_g must be > 0, got {}", self.eta_g));
        }
        self.eta_l.validate()?;
        if self.clients == 0 {
            return bad("need at least one client".into());
        }
        if self.local_steps == 0 {
            return bad("local_steps must be >= 1".into());
        }
        if let Algorithm::OtaFedProx { mu_prox } = self.algorithm {
            if !(mu_prox >= 0.0 && mu_prox.is_finite()) {
                return bad(format!("mu_prox must be >= 0, got {mu_prox}"));
            }
        }
        if let Some(r) = self.projection_radius {
            if !(r > 0.0) {
                return bad(format!("projection radius must be > 0, got {r}"));
            }
        }
        for b in [self.batch_size, self.global_batch] {
            if b == BatchSize::Mini(0) {
                return bad("minibatch size must be positive".into());
            }
        }
        Ok(())
    }

    pub fn channel_seed(&self) -> u64 {
        self.channel_seed.unwrap_or(self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub spec: Arc<ModelSpec>,
    pub shard: Option<Arc<DataShard>>,
    /// Held-out local data for accuracy; falls back to `shard`.
    pub test_shard: Option<Arc<DataShard>>,
    pub v: ParamVector,
}

impl ClientState {
    pub fn new(
        client_id: usize,
        spec: Arc<ModelSpec>,
        shard: Option<Arc<DataShard>>,
        v: ParamVector,
    ) -> Self {
        ClientState {
            client_id,
            spec,
            shard,
            test_shard: None,
            v,
        }
    }

    pub fn with_test_shard(mut self, test: Arc<DataShard>) -> Self {
        self.test_shard = Some(test);
        self
    }

    fn full_batch(&self) -> Batch<'_> {
        self.shard.as_deref().map_or(Batch::none(), Batch::full)
    }

    fn eval_shard(&self) -> Option<&DataShard> {
        self.test_shard.as_deref().or(self.shard.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub round: usize,
    pub w: ParamVector,
}

/// Gradient of the personal objective `F_k(v) + lambda/2 ||v - w||^2`.
pub fn personal_grad(
    spec: &ModelSpec,
    v: &[f64],
    w: &[f64],
    lambda: f64,
    batch: &Batch<'_>,
) -> Result<ParamVector> {
    if v.len() != w.len() {
        return Err(Error::dim(v.len(), w.len(), "global model"));
    }
    let mut g = spec.grad(v, batch)?;
    // lambda = 0 leaves the local gradient untouched, bit for bit
    if lambda != 0.0 {
        for ((gi, vi), wi) in g.iter_mut().zip(v).zip(w) {
            *gi += lambda * (vi - wi);
        }
    }
    Ok(g)
}

/// Draws the next batch indices; `None` means the full shard.
fn draw_batch(size: BatchSize, shard: Option<&DataShard>, rng: &mut StreamRng) -> Option<Vec<usize>> {
    match (size, shard) {
        (BatchSize::Mini(b), Some(s)) if b < s.len() => {
            Some(index::sample(rng, s.len(), b).into_vec())
        }
        _ => None,
    }
}

fn batch_of<'a>(shard: Option<&'a DataShard>, indices: &'a Option<Vec<usize>>) -> Batch<'a> {
    match (shard, indices) {
        (Some(s), Some(idx)) => Batch::subset(s, idx),
        (Some(s), None) => Batch::full(s),
        (None, _) => Batch::none(),
    }
}

/// `local_steps` SGD steps on the personal objective anchored at `w`.
pub fn personal_step(
    mut client: ClientState,
    w: &[f64],
    cfg: &TrainerConfig,
    round: usize,
) -> Result<ClientState> {
    let mut rng = rng::stream(cfg.seed, Domain::ClientPersonal, client.client_id as u64, round as u64);
    let eta = cfg.eta_l.at(round);
    let shard = client.shard.clone();
    for step in 0..cfg.local_steps {
        let idx = draw_batch(cfg.batch_size, shard.as_deref(), &mut rng);
        let batch = batch_of(shard.as_deref(), &idx);
        let g = personal_grad(&client.spec, &client.v, w, cfg.lambda, &batch)?;
        client.v.axpy(-eta, &g);
        if let Some(r) = cfg.projection_radius {
            client.v.project_ball(r);
        }
        if !client.v.is_finite() {
            return Err(Error::NonFinite {
                round,
                client: client.client_id,
                step,
            });
        }
    }
    Ok(client)
}

/// What client `k` transmits in round `t`.
///
/// The personalized scheme sends `grad F_k(w^t)`. The baselines run
/// `local_steps` local steps from `w^t` (FedProx adds the proximal pull
/// `mu_prox (u - w^t)`) and send the mean step direction
/// `(w^t - u) / (eta_l local_steps)`, which is `grad F_k(w^t)` for one
/// full-batch step.
pub fn client_upload(
    client: &ClientState,
    w: &[f64],
    cfg: &TrainerConfig,
    round: usize,
) -> Result<ParamVector> {
    let shard = client.shard.as_deref();
    let mut rng = rng::stream(cfg.seed, Domain::ClientGlobal, client.client_id as u64, round as u64);
    match cfg.algorithm {
        Algorithm::PersonalizedAota => {
            let idx = draw_batch(cfg.global_batch, shard, &mut rng);
            client.spec.grad(w, &batch_of(shard, &idx))
        }
        Algorithm::OtaFedAvg | Algorithm::OtaFedProx { .. } => {
            let mu_prox = match cfg.algorithm {
                Algorithm::OtaFedProx { mu_prox } => mu_prox,
                _ => 0.0,
            };
            let eta = cfg.eta_l.at(round);
            let mut u = ParamVector::from(w);
            for step in 0..cfg.local_steps {
                let idx = draw_batch(cfg.batch_size, shard, &mut rng);
                let g = personal_grad(&client.spec, &u, w, mu_prox, &batch_of(shard, &idx))?;
                u.axpy(-eta, &g);
                if !u.is_finite() {
                    return Err(Error::NonFinite {
                        round,
                        client: client.client_id,
                        step,
                    });
                }
            }
            let scale = 1.0 / (eta * cfg.local_steps as f64);
            Ok(w.iter().zip(u.iter()).map(|(a, b)| (a - b) * scale).collect::<Vec<f64>>().into())
        }
    }
}

/// Everything a round needs besides the states.
pub struct RoundContext<'a> {
    pub channel: &'a ChannelModel,
    pub cfg: &'a TrainerConfig,
    pub basis: Option<&'a WaveformBasis>,
}

/// One full round: uploads and personal steps in parallel, then the
/// over-the-air aggregate and the global step.
pub fn global_round(
    state: GlobalState,
    clients: Vec<ClientState>,
    ctx: &RoundContext<'_>,
) -> Result<(GlobalState, Vec<ClientState>)> {
    let cfg = ctx.cfg;
    let t = state.round;
    let w = &state.w;
    let results: Vec<Result<(ClientState, ParamVector)>> = clients
        .into_par_iter()
        .map(|client| {
            let id = client.client_id;
            let attribute = |e: Error| Error::Client {
                round: t,
                client: id,
                source: Box::new(e),
            };
            let upload = client_upload(&client, w, cfg, t).map_err(attribute)?;
            let client = if cfg.algorithm == Algorithm::PersonalizedAota {
                personal_step(client, w, cfg, t).map_err(attribute)?
            } else {
                client
            };
            Ok((client, upload))
        })
        .collect();
    let mut pairs = results.into_iter().collect::<Result<Vec<_>>>()?;
    // the superposition is summed in client-id order whatever the input order
    pairs.sort_by_key(|(c, _)| c.client_id);
    let (clients, uploads): (Vec<ClientState>, Vec<ParamVector>) = pairs.into_iter().unzip();
    let realization = sample_realization(ctx.channel, uploads.len(), w.dim(), t, cfg.channel_seed());
    let mode = ctx.basis.map_or(Aggregation::VectorLevel, Aggregation::WaveformLevel);
    let g = aggregate_ota(&uploads, &realization, ctx.channel, mode)?;
    let mut next = state.w;
    next.axpy(-cfg.eta_g, &g);
    if let Some(r) = cfg.projection_radius {
        next.project_ball(r);
    }
    Ok((
        GlobalState {
            round: t + 1,
            w: next,
        },
        clients,
    ))
}

/// Known optima for distance tracking.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reference {
    pub w_star: Option<ParamVector>,
    pub v_star: Option<Vec<ParamVector>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub global_loss: Option<f64>,
    pub mean_personal_loss: Option<f64>,
    pub mean_personal_acc: Option<f64>,
    pub generic_acc: Option<f64>,
    pub w_dist_sq: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 6] = [
    "round",
    "global_loss",
    "mean_personal_loss",
    "mean_personal_acc",
    "generic_acc",
    "w_dist_sq",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    /// `key = value` lines echoed as `#` comments.
    pub header: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&METRIC_COLUMNS);
        t.comments = self.header.clone();
        for r in &self.rows {
            t.rows.push(vec![
                Some(r.round as f64),
                r.global_loss,
                r.mean_personal_loss,
                r.mean_personal_acc,
                r.generic_acc,
                r.w_dist_sq,
            ]);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub metrics: MetricsTable,
    pub w: ParamVector,
    pub personal: Vec<ParamVector>,
    /// `||v_k^t - v_k*||^2` per round (outer) and client (inner), when the
    /// personal optima are known.
    pub v_dist_sq: Vec<Vec<f64>>,
    pub clients: Vec<ClientState>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn record(
    round: usize,
    w: &ParamVector,
    clients: &[ClientState],
    cfg: &TrainerConfig,
    reference: &Reference,
) -> Result<MetricsRow> {
    let w_dist_sq = reference.w_star.as_ref().map(|ws| w.dist_sq(ws));
    if !cfg.eval_metrics {
        return Ok(MetricsRow {
            round,
            global_loss: None,
            mean_personal_loss: None,
            mean_personal_acc: None,
            generic_acc: None,
            w_dist_sq,
        });
    }
    let personalized = cfg.algorithm == Algorithm::PersonalizedAota;
    let global_loss = clients
        .iter()
        .map(|c| c.spec.loss(w, &c.full_batch()))
        .collect::<Result<Vec<f64>>>()?;
    let personal_loss = if personalized {
        clients
            .iter()
            .map(|c| c.spec.loss(&c.v, &c.full_batch()))
            .collect::<Result<Vec<f64>>>()?
    } else {
        Vec::new()
    };
    let generic_acc = clients
        .iter()
        .filter_map(|c| c.eval_shard().and_then(|s| c.spec.accuracy(w, s)));
    let personal_acc = clients
        .iter()
        .filter(|_| personalized)
        .filter_map(|c| c.eval_shard().and_then(|s| c.spec.accuracy(&c.v, s)));
    Ok(MetricsRow {
        round,
        global_loss: mean(global_loss.into_iter()),
        mean_personal_loss: mean(personal_loss.into_iter()),
        mean_personal_acc: mean(personal_acc),
        generic_acc: mean(generic_acc),
        w_dist_sq,
    })
}

/// Runs `cfg.rounds` rounds from `w0` and the clients' current `v`.
///
/// Divergence (`||w|| > 1e12` or a non-finite `w`) stops the run with
/// [`Error::Diverged`], which carries the metrics recorded so far.
pub fn run_experiment(
    cfg: &TrainerConfig,
    w0: ParamVector,
    clients: Vec<ClientState>,
    channel: &ChannelModel,
    reference: &Reference,
) -> Result<RunResult> {
    cfg.validate()?;
    if clients.len() != cfg.clients {
        return Err(Error::dim(cfg.clients, clients.len(), "clients"));
    }
    let d = w0.dim();
    for c in &clients {
        if c.spec.dim() != d || c.v.dim() != d {
            return Err(Error::dim(d, c.v.dim(), "client model"));
        }
    }
    let basis = match cfg.aggregation {
        AggregationMode::VectorLevel => None,
        AggregationMode::WaveformLevel { basis, samples } => Some(make_basis(d, samples, basis)?),
    };
    let ctx = RoundContext {
        channel,
        cfg,
        basis: basis.as_ref(),
    };
    let v_dist = |clients: &[ClientState]| -> Vec<f64> {
        reference.v_star.as_ref().map_or_else(Vec::new, |vs| {
            clients.iter().map(|c| c.v.dist_sq(&vs[c.client_id])).collect()
        })
    };
    let mut metrics = MetricsTable::default();
    let mut v_dist_sq = vec![v_dist(&clients)];
    let mut state = GlobalState { round: 0, w: w0 };
    let mut clients = clients;
    metrics.rows.push(record(0, &state.w, &clients, cfg, reference)?);
    for _ in 0..cfg.rounds {
        let (next, updated) = global_round(state, clients, &ctx)?;
        state = next;
        clients = updated;
        let norm = state.w.norm();
        if !(norm <= DIVERGENCE_NORM) {
            let round = state.round;
            let partial = RunResult {
                metrics,
                w: state.w,
                personal: clients.iter().map(|c| c.v.clone()).collect(),
                v_dist_sq,
                clients,
            };
            return Err(Error::Diverged {
                round,
                norm,
                partial: Box::new(partial),
            });
        }
        v_dist_sq.push(v_dist(&clients));
        metrics.rows.push(record(state.round, &state.w, &clients, cfg, reference)?);
    }
    Ok(RunResult {
        metrics,
        w: state.w,
        personal: clients.iter().map(|c| c.v.clone()).collect(),
        v_dist_sq,
        clients,
    })
}
