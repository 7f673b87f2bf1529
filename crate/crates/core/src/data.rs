//! Client datasets: synthetic heterogeneous tasks, Dirichlet label skew,
//! label-noise injection and CSV ingestion.

use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub is_noisy: bool,
    pub noise_level: f64,
    pub flipped_indices: Vec<usize>,
}

/// One client's labelled examples. Features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    pub features: Vec<f64>,
    pub n_features: usize,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub client_id: usize,
    pub noise_meta: Option<NoiseMeta>,
}

impl DataShard {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        class_count: usize,
        client_id: usize,
    ) -> Result<Self> {
        if n_features == 0 || features.len() != labels.len() * n_features {
            return Err(Error::dim(
                labels.len() * n_features,
                features.len(),
                "shard features",
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(DataShard {
            features,
            n_features,
            labels,
            class_count,
            client_id,
            noise_meta: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// New shard holding the given rows, in order.
    pub fn select(&self, indices: &[usize], client_id: usize) -> DataShard {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        DataShard {
            features,
            n_features: self.n_features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            client_id,
            noise_meta: None,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// A view of some or all rows of a shard.
///
/// Models that do not consume data (the quadratic family) accept
/// [`Batch::none`].
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    shard: Option<&'a DataShard>,
    indices: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn full(shard: &'a DataShard) -> Self {
        Batch {
            shard: Some(shard),
            indices: None,
        }
    }

    pub fn subset(shard: &'a DataShard, indices: &'a [usize]) -> Self {
        Batch {
            shard: Some(shard),
            indices: Some(indices),
        }
    }

    pub fn none() -> Self {
        Batch {
            shard: None,
            indices: None,
        }
    }

    pub fn shard(&self) -> Option<&'a DataShard> {
        self.shard
    }

    pub fn len(&self) -> usize {
        match (self.shard, self.indices) {
            (None, _) => 0,
            (Some(_), Some(idx)) => idx.len(),
            (Some(s), None) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(features, label)` pairs.
    pub fn rows(&self) -> impl Iterator<Item = (&'a [f64], usize)> + '_ {
        let shard = self.shard;
        let n = self.len();
        (0..n).map(move |j| {
            let s = shard.expect("nonempty batch has a shard");
            let i = self.indices.map_or(j, |idx| idx[j]);
            (s.row(i), s.labels[i])
        })
    }
}

/// Parameters for the synthetic clustered classification task.
///
/// Client `k` labels Gaussian features with a softmax (sigmoid for two
/// classes) model whose parameter is a shared centre plus `heterogeneity`
/// times a client-specific random unit direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub clients: usize,
    pub features: usize,
    pub samples_per_client: usize,
    pub classes: usize,
    pub heterogeneity: f64,
    /// Norm of each row of the shared centre.
    pub signal: f64,
    pub seed: u64,
}

impl SynthTask {
    fn logit_rows(&self) -> usize {
        if self.classes == 2 {
            1
        } else {
            self.classes
        }
    }

    fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.features == 0 || self.samples_per_client == 0 {
            return Err(Error::InvalidArgument(
                "synthetic task counts must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if !(self.heterogeneity >= 0.0 && self.signal >= 0.0) {
            return Err(Error::InvalidArgument(
                "heterogeneity and signal must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Generative parameters, one `rows x features` row-major matrix per
    /// client (`rows = 1` for binary tasks).
    pub fn client_parameters(&self) -> Vec<Vec<f64>> {
        let p = self.features;
        let rows = self.logit_rows();
        let mut rng = rng::stream(self.seed, Domain::Synth, u64::MAX, 0);
        let centre: Vec<f64> = (0..rows)
            .flat_map(|_| unit_direction(&mut rng, p).into_iter().map(|x| x * self.signal))
            .collect();
        (0..self.clients)
            .map(|k| {
                let mut rng = rng::stream(self.seed, Domain::Synth, k as u64, 1);
                let mut theta = centre.clone();
                for r in 0..rows {
                    let dir = unit_direction(&mut rng, p);
                    for (t, u) in theta[r * p..(r + 1) * p].iter_mut().zip(dir) {
                        *t += self.heterogeneity * u;
                    }
                }
                theta
            })
            .collect()
    }

    /// Draws one example from client parameters `theta`.
    fn draw(&self, theta: &[f64], rng: &mut StreamRng, x: &mut [f64]) -> usize {
        for xi in x.iter_mut() {
            *xi = StandardNormal.sample(rng);
        }
        let p = self.features;
        let u: f64 = rng.random();
        if self.classes == 2 {
            let z: f64 = theta.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            return usize::from(u < sigmoid(z));
        }
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| theta[c * p..(c + 1) * p].iter().zip(x.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let probs = softmax(&logits);
        let mut acc = 0.0;
        for (c, pc) in probs.iter().enumerate() {
            acc += pc;
            if u < acc {
                return c;
            }
        }
        self.classes - 1
    }

    /// `samples_per_client` examples per client, with the natural label mix.
    pub fn generate(&self) -> Result<Vec<DataShard>> {
        self.validate()?;
        let thetas = self.client_parameters();
        let p = self.features;
        Ok(thetas
            .iter()
            .enumerate()
            .map(|(k, theta)| {
                let mut rng = rng::stream(self.seed, Domain::Synth, k as u64, 2);
                let mut features = vec![0.0; self.samples_per_client * p];
                let labels = features
                    .chunks_mut(p)
                    .map(|x| self.draw(theta, &mut rng, x))
                    .collect();
                DataShard {
                    features,
                    n_features: p,
                    labels,
                    class_count: self.classes,
                    client_id: k,
                    noise_meta: None,
                }
            })
            .collect())
    }

    /// Train and test shards whose per-client class counts follow a
    /// Dirichlet(`alpha`) label partition of a balanced label pool.
    ///
    /// Client `k` still labels with its own parameters; examples are drawn by
    /// rejection until each class quota is met. Test shards have the same
    /// class mix, scaled by `test_fraction` (rounded up per class).
    pub fn generate_label_skewed(
        &self,
        alpha: f64,
        test_fraction: f64,
    ) -> Result<(Vec<DataShard>, Vec<DataShard>)> {
        self.validate()?;
        if !(test_fraction > 0.0) {
            return Err(Error::InvalidArgument("test_fraction must be positive".into()));
        }
        let total = self.clients * self.samples_per_client;
        let pool: Vec<usize> = (0..total).map(|i| i % self.classes).collect();
        let plan = dirichlet_partition(&pool, self.clients, alpha, self.seed)?;
        let thetas = self.client_parameters();
        let mut train = Vec::with_capacity(self.clients);
        let mut test = Vec::with_capacity(self.clients);
        for (k, theta) in thetas.iter().enumerate() {
            let mut quota = vec![0usize; self.classes];
            for &i in &plan.assignments[k] {
                quota[pool[i]] += 1;
            }
            let test_quota: Vec<usize> = quota
                .iter()
                .map(|&q| (q as f64 * test_fraction).ceil() as usize)
                .collect();
            let mut rng = rng::stream(self.seed, Domain::Synth, k as u64, 3);
            train.push(self.fill_quota(theta, &quota, k, &mut rng)?);
            test.push(self.fill_quota(theta, &test_quota, k, &mut rng)?);
        }
        Ok((train, test))
    }

    fn fill_quota(
        &self,
        theta: &[f64],
        quota: &[usize],
        client_id: usize,
        rng: &mut StreamRng,
    ) -> Result<DataShard> {
        let p = self.features;
        let wanted: usize = quota.iter().sum();
        let mut left = quota.to_vec();
        let mut features = Vec::with_capacity(wanted * p);
        let mut labels = Vec::with_capacity(wanted);
        let mut x = vec![0.0; p];
        let cap = 10_000 * wanted.max(1);
        let mut tries = 0;
        while labels.len() < wanted {
            tries += 1;
            if tries > cap {
                return Err(Error::InvalidArgument(format!(
                    "client {client_id}: could not fill class quotas {quota:?} by rejection"
                )));
            }
            let y = self.draw(theta, rng, &mut x);
            if left[y] > 0 {
                left[y] -= 1;
                features.extend_from_slice(&x);
                labels.push(y);
            }
        }
        Ok(DataShard {
            features,
            n_features: p,
            labels,
            class_count: self.classes,
            client_id,
            noise_meta: None,
        })
    }
}

fn unit_direction(rng: &mut StreamRng, p: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Binary clustered logistic task: `K` shards of `n` examples in `R^d`.
pub fn synth_clustered(
    clients: usize,
    d: usize,
    n_per_client: usize,
    heterogeneity: f64,
    seed: u64,
) -> Result<Vec<DataShard>> {
    SynthTask {
        clients,
        features: d,
        samples_per_client: n_per_client,
        classes: 2,
        heterogeneity,
        signal: 2.0,
        seed,
    }
    .generate()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub alpha: Option<f64>,
    pub clients: usize,
    pub class_count: usize,
    /// Row `k`: class composition of client `k`'s shard (row-stochastic).
    pub proportions: Vec<Vec<f64>>,
    /// Row `c`: fraction of class `c` held by each client.
    pub class_shares: Vec<Vec<f64>>,
    /// Sorted dataset indices per client.
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    fn from_assignments(
        scheme: PartitionScheme,
        alpha: Option<f64>,
        labels: &[usize],
        class_count: usize,
        mut assignments: Vec<Vec<usize>>,
    ) -> Self {
        let clients = assignments.len();
        let mut per_class = vec![0usize; class_count];
        for &y in labels {
            per_class[y] += 1;
        }
        let mut proportions = vec![vec![0.0; class_count]; clients];
        let mut class_shares = vec![vec![0.0; clients]; class_count];
        for (k, idx) in assignments.iter_mut().enumerate() {
            idx.sort_unstable();
            let mut counts = vec![0usize; class_count];
            for &i in idx.iter() {
                counts[labels[i]] += 1;
            }
            for c in 0..class_count {
                if !idx.is_empty() {
                    proportions[k][c] = counts[c] as f64 / idx.len() as f64;
                }
                if per_class[c] > 0 {
                    class_shares[c][k] = counts[c] as f64 / per_class[c] as f64;
                }
            }
        }
        PartitionPlan {
            scheme,
            alpha,
            clients,
            class_count,
            proportions,
            class_shares,
            assignments,
        }
    }

    /// Shards of `data` per the plan; `data` is the partitioned dataset.
    pub fn apply(&self, data: &DataShard) -> Vec<DataShard> {
        self.assignments
            .iter()
            .enumerate()
            .map(|(k, idx)| data.select(idx, k))
            .collect()
    }

    /// `{"0": [indices...], "1": [...], ...}` in client order.
    pub fn to_json(&self) -> Result<String> {
        let mut out = String::from("{\n");
        for (k, idx) in self.assignments.iter().enumerate() {
            let sep = if k + 1 == self.assignments.len() { "" } else { "," };
            out.push_str(&format!("  \"{k}\": {}{sep}\n", serde_json::to_string(idx)?));
        }
        out.push('}');
        Ok(out)
    }
}

fn class_count_of(labels: &[usize]) -> Result<usize> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; classes];
    for &y in labels {
        seen[y] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidArgument(format!("class {c} has no samples")));
    }
    Ok(classes)
}

/// Even random split of `labels.len()` examples over `clients`.
pub fn iid_partition(labels: &[usize], clients: usize, seed: u64) -> Result<PartitionPlan> {
    let n = labels.len();
    if clients == 0 || clients > n {
        return Err(Error::ImpossiblePartition(format!(
            "{clients} clients for {n} samples"
        )));
    }
    let classes = class_count_of(labels)?;
    let mut rng = rng::stream(seed, Domain::Partition, 0, 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let assignments = (0..clients)
        .map(|k| order[k * n / clients..(k + 1) * n / clients].to_vec())
        .collect();
    Ok(PartitionPlan::from_assignments(
        PartitionScheme::Iid,
        None,
        labels,
        classes,
        assignments,
    ))
}

fn dirichlet_draw(rng: &mut StreamRng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        p.iter_mut().for_each(|x| *x /= sum);
    } else {
        // every gamma variate underflowed: all mass on one client
        p.fill(0.0);
        p[rng.random_range(0..k)] = 1.0;
    }
    p
}

/// Splits each class across clients with Dirichlet(`alpha`) proportions.
///
/// Every example is assigned exactly once. A draw that leaves a client empty
/// is redrawn (up to 100 attempts); after that, empty clients take one
/// example each from the currently largest shard.
pub fn dirichlet_partition(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    let n = labels.len();
    if clients == 0 || clients > n {
        return Err(Error::ImpossiblePartition(format!(
            "{clients} clients for {n} samples"
        )));
    }
    let classes = class_count_of(labels)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = rng::stream(seed, Domain::Partition, 1, 0);
    let mut assignments = Vec::new();
    for _attempt in 0..100 {
        assignments = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let p = dirichlet_draw(&mut rng, alpha, clients);
            let mut start = 0;
            let mut cum = 0.0;
            for (k, pk) in p.iter().enumerate() {
                cum += pk;
                let end = if k + 1 == clients {
                    members.len()
                } else {
                    ((cum * members.len() as f64) as usize).clamp(start, members.len())
                };
                assignments[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            break;
        }
    }
    while let Some(empty) = assignments.iter().position(|a| a.is_empty()) {
        let largest = (0..clients)
            .max_by_key(|&k| (assignments[k].len(), std::cmp::Reverse(k)))
            .expect("clients > 0");
        let moved = assignments[largest].pop().expect("largest shard is nonempty");
        assignments[empty].push(moved);
    }
    Ok(PartitionPlan::from_assignments(
        PartitionScheme::Dirichlet,
        Some(alpha),
        labels,
        classes,
        assignments,
    ))
}

/// Number of noisy clients for a ratio, robust to `0.4 * 10 = 4.000...01`.
pub fn noisy_client_count(ratio: f64, clients: usize) -> usize {
    ((ratio * clients as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Marks `ceil(ratio K)` uniformly chosen clients as noisy and flips
/// `floor(u n)` of their labels, `u ~ Uniform(lower_bound, 1)`, each to a
/// uniformly chosen different class.
pub fn inject_label_noise(
    shards: &[DataShard],
    noisy_client_ratio: f64,
    level_lower_bound: f64,
    seed: u64,
) -> Result<Vec<DataShard>> {
    if !(0.0..=1.0).contains(&noisy_client_ratio) {
        return Err(Error::InvalidArgument(format!(
            "noisy client ratio {noisy_client_ratio} outside [0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&level_lower_bound) {
        return Err(Error::InvalidArgument(format!(
            "noise level lower bound {level_lower_bound} outside [0, 1]"
        )));
    }
    let mut out = shards.to_vec();
    let noisy = noisy_client_count(noisy_client_ratio, shards.len());
    if noisy == 0 {
        return Ok(out);
    }
    if let Some(s) = shards.iter().find(|s| s.class_count < 2) {
        return Err(Error::InvalidArgument(format!(
            "client {} has {} class(es); label flipping needs at least two",
            s.client_id, s.class_count
        )));
    }
    let mut rng = rng::stream(seed, Domain::LabelNoise, u64::MAX, 0);
    let mut chosen = index::sample(&mut rng, shards.len(), noisy).into_vec();
    chosen.sort_unstable();
    for k in chosen {
        let shard = &mut out[k];
        let mut rng = rng::stream(seed, Domain::LabelNoise, shard.client_id as u64, 1);
        let level = if level_lower_bound >= 1.0 {
            1.0
        } else {
            rng.random_range(level_lower_bound..1.0)
        };
        let n = shard.len();
        let flips = ((level * n as f64).floor() as usize).min(n);
        let mut flipped = index::sample(&mut rng, n, flips).into_vec();
        flipped.sort_unstable();
        for &i in &flipped {
            let old = shard.labels[i];
            let r = rng.random_range(0..shard.class_count - 1);
            shard.labels[i] = if r >= old { r + 1 } else { r };
        }
        shard.noise_meta = Some(NoiseMeta {
            is_noisy: true,
            noise_level: level,
            flipped_indices: flipped,
        });
    }
    Ok(out)
}

/// Column layout of a CSV dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub columns: Vec<String>,
    pub label_column: String,
}

impl CsvSchema {
    fn label_position(&self) -> Option<usize> {
        self.columns.iter().position(|c| c == &self.label_column)
    }
}

pub fn load_csv(path: &Path, label_column: &str, class_count: usize) -> Result<DataShard> {
    load_csv_with_schema(path, label_column, class_count).map(|(s, _)| s)
}

pub fn load_csv_with_schema(
    path: &Path,
    label_column: &str,
    class_count: usize,
) -> Result<(DataShard, CsvSchema)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let schema = CsvSchema {
        columns,
        label_column: label_column.to_string(),
    };
    let label_pos = schema.label_position().ok_or_else(|| Error::Parse {
        row: 1,
        column: label_column.to_string(),
        message: "label column missing from header".into(),
    })?;
    let n_features = schema.columns.len() - 1;
    if n_features == 0 {
        return Err(Error::Parse {
            row: 1,
            column: label_column.to_string(),
            message: "no feature columns".into(),
        });
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != schema.columns.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!(
                    "expected {} fields, found {}",
                    schema.columns.len(),
                    record.len()
                ),
            });
        }
        for (j, field) in record.iter().enumerate() {
            let bad = |message: String| Error::Parse {
                row,
                column: schema.columns[j].clone(),
                message,
            };
            if j == label_pos {
                let y: usize = field
                    .parse()
                    .map_err(|_| bad(format!("label {field:?} is not a class index")))?;
                if y >= class_count {
                    return Err(bad(format!("label {y} outside [0, {class_count})")));
                }
                labels.push(y);
            } else {
                let x: f64 = field
                    .parse()
                    .map_err(|_| bad(format!("{field:?} is not a number")))?;
                if !x.is_finite() {
                    return Err(bad(format!("{field:?} is not finite")));
                }
                features.push(x);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            row: 2,
            column: String::new(),
            message: "no data rows".into(),
        });
    }
    let shard = DataShard::new(features, n_features, labels, class_count, 0)?;
    Ok((shard, schema))
}

/// 17 significant digits: enough to round-trip any finite `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(shard: &DataShard, schema: &CsvSchema, path: &Path) -> Result<()> {
    let label_pos = schema.label_position().ok_or_else(|| {
        Error::InvalidArgument(format!("label column {:?} not in schema", schema.label_column))
    })?;
    if schema.columns.len() != shard.n_features + 1 {
        return Err(Error::dim(
            shard.n_features + 1,
            schema.columns.len(),
            "CSV columns",
        ));
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(&schema.columns)?;
    for i in 0..shard.len() {
        let mut feats = shard.row(i).iter();
        let record: Vec<String> = (0..schema.columns.len())
            .map(|j| {
                if j == label_pos {
                    shard.labels[i].to_string()
                } else {
                    format_f64(*feats.next().expect("feature count checked"))
                }
            })
            .collect();
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{Beta, ContinuousCDF};

    /// One-sample Kolmogorov-Smirnov statistic.
    fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Asymptotic KS critical value at significance 0.01.
    fn ks_critical_01(n: usize) -> f64 {
        1.628 / (n as f64).sqrt()
    }

    #[test]
    fn synth_counts() {
        let shards = synth_clustered(10, 3, 100, 1.0, 4).unwrap();
        assert_eq!(shards.len(), 10);
        assert_eq!(shards.iter().map(|s| s.len()).sum::<usize>(), 1000);
        assert!(shards.iter().enumerate().all(|(k, s)| s.client_id == k));
    }

    #[test]
    fn zero_heterogeneity_shares_parameters() {
        let task = SynthTask {
            clients: 3,
            features: 4,
            samples_per_client: 10,
            classes: 2,
            heterogeneity: 0.0,
            signal: 2.0,
            seed: 9,
        };
        let thetas = task.client_parameters();
        assert!(thetas.iter().all(|t| t == &thetas[0]));
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(
            synth_clustered(4, 3, 20, 2.0, 1).unwrap(),
            synth_clustered(4, 3, 20, 2.0, 1).unwrap()
        );
        assert_ne!(
            synth_clustered(4, 3, 20, 2.0, 1).unwrap(),
            synth_clustered(4, 3, 20, 2.0, 2).unwrap()
        );
    }

    #[test]
    fn label_skewed_generation_respects_quotas() {
        let task = SynthTask {
            clients: 6,
            features: 3,
            samples_per_client: 50,
            classes: 3,
            heterogeneity: 1.0,
            signal: 2.0,
            seed: 2,
        };
        let (train, test) = task.generate_label_skewed(0.5, 0.5).unwrap();
        assert_eq!(train.iter().map(|s| s.len()).sum::<usize>(), 300);
        for (tr, te) in train.iter().zip(&test) {
            for (a, b) in tr.class_counts().iter().zip(te.class_counts()) {
                assert_eq!(b, (*a as f64 * 0.5).ceil() as usize);
            }
        }
    }

    #[test]
    fn partition_is_complete_and_disjoint() {
        let labels: Vec<usize> = (0..500).map(|i| (i * 7) % 3).collect();
        for alpha in [0.05, 0.5, 5.0] {
            let plan = dirichlet_partition(&labels, 8, alpha, 3).unwrap();
            let mut all: Vec<usize> = plan.assignments.concat();
            all.sort_unstable();
            assert_eq!(all, (0..500).collect::<Vec<_>>());
            assert!(plan.assignments.iter().all(|a| !a.is_empty()));
            for row in &plan.proportions {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn huge_alpha_matches_global_mix() {
        let labels: Vec<usize> = (0..4000).map(|i| usize::from(i % 4 == 0)).collect();
        let plan = dirichlet_partition(&labels, 4, 1e6, 8).unwrap();
        for row in &plan.proportions {
            assert!((row[0] - 0.75).abs() < 0.05 && (row[1] - 0.25).abs() < 0.05);
        }
    }

    #[test]
    fn tiny_alpha_still_fills_every_client() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let plan = dirichlet_partition(&labels, 30, 1e-3, 1).unwrap();
        assert!(plan.assignments.iter().all(|a| !a.is_empty()));
        assert_eq!(plan.assignments.iter().map(Vec::len).sum::<usize>(), 40);
    }

    #[test]
    fn partition_errors() {
        assert!(matches!(
            dirichlet_partition(&[0, 1, 0], 4, 1.0, 0),
            Err(Error::ImpossiblePartition(_))
        ));
        assert!(dirichlet_partition(&[0, 1, 0], 2, 0.0, 0).is_err());
        assert!(dirichlet_partition(&[0, 2, 0], 2, 1.0, 0).is_err());
    }

    /// alpha = 1 with two clients: a client's share of a class is Beta(1, 1).
    #[test]
    fn dirichlet_share_is_uniform_under_ks() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        let draws = 10_000;
        let shares: Vec<f64> = (0..draws)
            .map(|s| dirichlet_partition(&labels, 2, 1.0, s).unwrap().class_shares[0][0])
            .collect();
        let d = ks_statistic(shares, |x| x.clamp(0.0, 1.0));
        assert!(d < ks_critical_01(draws as usize), "KS statistic {d}");
    }

    /// Marginal of Dirichlet(alpha 1_K) is Beta(alpha, (K - 1) alpha).
    #[test]
    fn dirichlet_marginals_match_beta() {
        let (k, alpha) = (5, 0.5);
        let labels: Vec<usize> = (0..10_000).map(|i| i % 2).collect();
        let draws = 1500;
        let shares: Vec<f64> = (0..draws)
            .map(|s| dirichlet_partition(&labels, k, alpha, 1000 + s).unwrap().class_shares[1][2])
            .collect();
        let beta = Beta::new(alpha, (k - 1) as f64 * alpha).unwrap();
        let d = ks_statistic(shares, |x| beta.cdf(x));
        assert!(d < ks_critical_01(draws as usize), "KS statistic {d}");
    }

    #[test]
    fn iid_partition_is_even() {
        let labels: Vec<usize> = (0..103).map(|i| i % 3).collect();
        let plan = iid_partition(&labels, 10, 0).unwrap();
        let sizes: Vec<usize> = plan.assignments.iter().map(Vec::len).collect();
        assert!(sizes.iter().all(|&s| s == 10 || s == 11));
        assert_eq!(sizes.iter().sum::<usize>(), 103);
    }

    #[test]
    fn partition_json_lists_clients() {
        let labels = vec![0, 1, 0, 1, 1];
        let plan = iid_partition(&labels, 2, 0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&plan.to_json().unwrap()).unwrap();
        let mut all: Vec<u64> = ["0", "1"]
            .iter()
            .flat_map(|k| v[k].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()))
            .collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    fn ten_shards() -> Vec<DataShard> {
        SynthTask {
            clients: 10,
            features: 2,
            samples_per_client: 37,
            classes: 4,
            heterogeneity: 0.5,
            signal: 1.0,
            seed: 3,
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let shards = ten_shards();
        let out = inject_label_noise(&shards, 0.0, 0.5, 1).unwrap();
        assert_eq!(out, shards);
        assert!(out.iter().all(|s| s.noise_meta.is_none()));
    }

    #[test]
    fn full_noise_flips_everything() {
        let shards = ten_shards();
        let out = inject_label_noise(&shards, 1.0, 1.0, 1).unwrap();
        for (a, b) in shards.iter().zip(&out) {
            assert!(a.labels.iter().zip(&b.labels).all(|(x, y)| x != y));
            assert_eq!(b.noise_meta.as_ref().unwrap().noise_level, 1.0);
        }
    }

    #[test]
    fn forty_percent_noisy_clients() {
        let shards = ten_shards();
        let out = inject_label_noise(&shards, 0.4, 0.5, 6).unwrap();
        let noisy: Vec<&DataShard> = out.iter().filter(|s| s.noise_meta.is_some()).collect();
        assert_eq!(noisy.len(), 4);
        for s in noisy {
            let meta = s.noise_meta.as_ref().unwrap();
            let frac = meta.flipped_indices.len() as f64 / s.len() as f64;
            assert!((0.5 - 1.0 / s.len() as f64..=1.0).contains(&frac), "{frac}");
            assert!((frac - meta.noise_level).abs() <= 1.0 / s.len() as f64);
        }
    }

    #[test]
    fn single_class_cannot_be_flipped() {
        let s = DataShard::new(vec![0.0, 1.0], 1, vec![0, 0], 1, 0).unwrap();
        assert!(inject_label_noise(&[s], 1.0, 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn noise_touches_only_recorded_labels(seed in 0u64..200, ratio in 0.0f64..=1.0, lb in 0.0f64..=1.0) {
            let shards = ten_shards();
            let out = inject_label_noise(&shards, ratio, lb, seed).unwrap();
            prop_assert_eq!(out.iter().filter(|s| s.noise_meta.is_some()).count(), noisy_client_count(ratio, 10));
            for (a, b) in shards.iter().zip(&out) {
                prop_assert_eq!(&a.features, &b.features);
                match &b.noise_meta {
                    None => prop_assert_eq!(a, b),
                    Some(meta) => {
                        for i in 0..a.len() {
                            let flipped = meta.flipped_indices.binary_search(&i).is_ok();
                            prop_assert_eq!(flipped, a.labels[i] != b.labels[i]);
                        }
                    }
                }
            }
        }

        #[test]
        fn partitions_cover_every_sample(seed in 0u64..1000, k in 1usize..12, alpha in 0.01f64..10.0) {
            let labels: Vec<usize> = (0..120).map(|i| (i * 5 + i / 7) % 3).collect();
            let plan = dirichlet_partition(&labels, k, alpha, seed).unwrap();
            let mut all = plan.assignments.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..120).collect::<Vec<_>>());
            prop_assert!(plan.assignments.iter().all(|a| !a.is_empty()));
            prop_assert_eq!(&plan, &dirichlet_partition(&labels, k, alpha, seed).unwrap());
        }
    }
}
