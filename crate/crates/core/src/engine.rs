//! The outer federated loop: client sampling, per-client state, round
//! execution, evaluation, drift measurement and the attention-heatmap study.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{
    igfl_client_round, local_sgd_round, scaffold_client_round, ClientRoundInput, ClientState,
    Correction,
};
use crate::data::{
    dirichlet_partition, epoch_batches, load_idx, paired_partition, sort_and_partition,
    synth_gaussian_mixture, Dataset, Partition,
};
use crate::error::{invalid, Error, Result};
use crate::models::{quadratic_optimum, Batch, LossModel, ModelKind};
use crate::params::ParamVector;
use crate::scalar::Scalar;
use crate::seeding::{self, tag};
use crate::server::{
    aggregate_with_scores, attention_scores, average_aggregate, fedadam_aggregate,
    fedavgm_aggregate, scaffold_aggregate, AdamParams, AttentionOption, AttentionScores,
    RoundUpdates, ServerState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    Fedavgm,
    Fedadam,
    Scaffold,
    /// IGFL client correction, uniform averaging on the server.
    IgflC,
    /// Local SGD on clients, attention aggregation on the server.
    IgflS,
    /// IGFL client correction and attention aggregation.
    Igfl,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Self::Fedavg,
        Self::Fedavgm,
        Self::Fedadam,
        Self::Scaffold,
        Self::IgflC,
        Self::IgflS,
        Self::Igfl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fedavg => "fedavg",
            Self::Fedavgm => "fedavgm",
            Self::Fedadam => "fedadam",
            Self::Scaffold => "scaffold",
            Self::IgflC => "igfl_c",
            Self::IgflS => "igfl_s",
            Self::Igfl => "igfl",
        }
    }

    pub fn corrects_clients(self) -> bool {
        matches!(self, Self::IgflC | Self::Igfl)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Self::IgflS | Self::Igfl)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                format!("unknown algorithm `{s}` ({})", names.join("|"))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionScheme {
    /// Two label-sorted shards per client.
    Sort,
    /// Sort-and-partition where clients `2k`, `2k+1` share a label pair.
    Paired,
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

/// Every knob of a run. Field names double as the keys of the flat config
/// file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algo: Algorithm,
    pub attention: AttentionOption,
    /// Total client count `P`.
    pub clients: usize,
    pub rounds: usize,
    /// Fraction of clients sampled per round, `C`.
    pub sample_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// FedAvgM momentum.
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    /// Server step size; only FedAdam uses a value other than 1.
    pub server_lr: f64,
    pub partition: PartitionScheme,
    pub rho: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub model: ModelKind,
    pub hidden: usize,
    pub dataset: DatasetKind,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,
    pub train_images: Option<String>,
    pub train_labels: Option<String>,
    pub test_images: Option<String>,
    pub test_labels: Option<String>,
    /// Record wall-clock time; when off the elapsed column is always 0.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algo: Algorithm::Fedavg,
            attention: AttentionOption::SelfAttention,
            clients: 10,
            rounds: 100,
            sample_rate: 1.0,
            batch_size: 100,
            epochs: 1,
            lr: 0.1,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.99,
            tau: 0.1,
            server_lr: 0.1,
            partition: PartitionScheme::Sort,
            rho: 1.0,
            seed: 0,
            eval_every: 1,
            model: ModelKind::Mlp,
            hidden: 32,
            dataset: DatasetKind::Synthetic,
            synth_classes: 10,
            synth_per_class: 1000,
            synth_test_per_class: 200,
            synth_dim: 20,
            synth_separation: 3.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            timing: true,
        }
    }
}

impl RunConfig {
    /// Checks every constraint, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, format!("must be finite and > 0, got {v}")))
            }
        };
        let unit = |name: &'static str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(name, format!("must lie in [0, 1), got {v}")))
            }
        };
        let at_least_one = |name: &'static str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(invalid(name, "must be >= 1"))
            }
        };
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(invalid(
                "sample_rate",
                format!("must lie in (0, 1], got {}", self.sample_rate),
            ));
        }
        at_least_one("clients", self.clients)?;
        at_least_one("rounds", self.rounds)?;
        at_least_one("batch_size", self.batch_size)?;
        at_least_one("epochs", self.epochs)?;
        at_least_one("eval_every", self.eval_every)?;
        at_least_one("hidden", self.hidden)?;
        positive("lr", self.lr)?;
        positive("rho", self.rho)?;
        positive("tau", self.tau)?;
        positive("server_lr", self.server_lr)?;
        unit("beta", self.beta)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if self.model == ModelKind::Quadratic {
            return Err(invalid(
                "model",
                "quadratic populations are built in code, not from a dataset config",
            ));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                at_least_one("synth_classes", self.synth_classes)?;
                at_least_one("synth_per_class", self.synth_per_class)?;
                at_least_one("synth_test_per_class", self.synth_test_per_class)?;
                at_least_one("synth_dim", self.synth_dim)?;
                positive("synth_separation", self.synth_separation)?;
            }
            DatasetKind::Idx => {
                for (name, v) in [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("test_images", &self.test_images),
                    ("test_labels", &self.test_labels),
                ] {
                    if v.is_none() {
                        return Err(invalid(name, "required when dataset = idx"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of clients sampled per round: `ceil(C * P)`, at least one.
    pub fn sample_size(&self) -> usize {
        sample_size(self.clients, self.sample_rate)
    }
}

fn sample_size(clients: usize, rate: f64) -> usize {
    // The small slack keeps products like 0.1 * 100 from rounding up to 11.
    ((rate * clients as f64 - 1e-9).ceil() as usize).clamp(1, clients)
}

/// Sampled client ids for one round, ascending. The draw is uniform without
/// replacement from a generator keyed by `(seed, round)`.
pub fn sample_clients(clients: usize, rate: f64, round: usize, seed: u64) -> Vec<usize> {
    let k = sample_size(clients, rate);
    if k == clients {
        return (0..clients).collect();
    }
    let mut rng = seeding::stream(seed, &[tag::SAMPLE_CLIENTS, round as u64]);
    let mut ids = index::sample(&mut rng, clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Mean Euclidean distance of the clients' final local iterates from the
/// global parameters they started from.
pub fn drift_metric<T: Scalar>(client_finals: &[ParamVector<T>], global: &ParamVector<T>) -> Result<f64> {
    if client_finals.is_empty() {
        return Err(Error::Empty("client finals"));
    }
    let mut total = 0.0;
    for w in client_finals {
        total += w.sub(global)?.norm().as_f64();
    }
    Ok(total / client_finals.len() as f64)
}

/// Who the clients are and what they optimize.
#[derive(Clone, Debug)]
pub enum Population<T> {
    /// A shared classifier trained on partitioned data, evaluated on a
    /// held-out test set.
    Classification {
        model: LossModel<T>,
        train: Dataset<T>,
        test: Dataset<T>,
        partition: Partition,
        batch_size: usize,
        epochs: usize,
    },
    /// One analytic objective per client, run for a fixed number of
    /// full-batch local steps.
    Analytic {
        objectives: Vec<LossModel<T>>,
        local_steps: usize,
    },
}

impl<T: Scalar> Population<T> {
    pub fn num_clients(&self) -> usize {
        match self {
            Self::Classification { partition, .. } => partition.num_clients(),
            Self::Analytic { objectives, .. } => objectives.len(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Classification { model, .. } => model.num_params(),
            Self::Analytic { objectives, .. } => objectives[0].num_params(),
        }
    }

    fn objective(&self, client: usize) -> &LossModel<T> {
        match self {
            Self::Classification { model, .. } => model,
            Self::Analytic { objectives, .. } => &objectives[client],
        }
    }

    /// The batch schedule a client runs in a round. Keyed by run seed, round
    /// and client only, so every algorithm sees the same batches.
    pub fn client_batches(&self, client: usize, round: usize, seed: u64) -> Result<Vec<Batch<T>>> {
        match self {
            Self::Classification {
                train,
                partition,
                batch_size,
                epochs,
                ..
            } => {
                let key = seeding::derive_seed(seed, &[round as u64, client as u64]);
                epoch_batches(partition.client(client), *batch_size, *epochs, key)?
                    .iter()
                    .map(|idx| train.batch(idx))
                    .collect()
            }
            Self::Analytic { local_steps, .. } => Ok(vec![Batch::analytic(); *local_steps]),
        }
    }

    /// Training loss of the global model: cross-entropy over every assigned
    /// training example, or the mean client objective.
    pub fn train_loss(&self, w: &ParamVector<T>) -> Result<f64> {
        match self {
            Self::Classification {
                model,
                train,
                partition,
                ..
            } => {
                let idx: Vec<usize> = partition.clients().concat();
                Ok(model.loss(w, &train.batch(&idx)?)?.as_f64())
            }
            Self::Analytic { objectives, .. } => {
                let mut total = 0.0;
                for m in objectives {
                    total += m.loss(w, &Batch::analytic())?.as_f64();
                }
                Ok(total / objectives.len() as f64)
            }
        }
    }

    pub fn test_accuracy(&self, w: &ParamVector<T>) -> Result<Option<f64>> {
        match self {
            Self::Classification { model, test, .. } => {
                Ok(Some(model.predict_accuracy(w, &test.as_batch())?))
            }
            Self::Analytic { .. } => Ok(None),
        }
    }

    /// Exact minimizer of the population objective, when one is known.
    pub fn optimum(&self) -> Option<ParamVector<T>> {
        match self {
            Self::Analytic { objectives, .. } => quadratic_optimum(objectives).ok(),
            Self::Classification { .. } => None,
        }
    }

    /// Builds the classification population a config describes.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test): (Dataset<T>, Dataset<T>) = match cfg.dataset {
            DatasetKind::Synthetic => (
                synth_gaussian_mixture(
                    cfg.synth_classes,
                    cfg.synth_per_class,
                    cfg.synth_dim,
                    cfg.synth_separation,
                    cfg.seed,
                )?,
                synth_gaussian_mixture(
                    cfg.synth_classes,
                    cfg.synth_test_per_class,
                    cfg.synth_dim,
                    cfg.synth_separation,
                    seeding::derive_seed(cfg.seed, &[tag::SYNTHETIC, 1]),
                )?,
            ),
            DatasetKind::Idx => {
                let path = |p: &Option<String>| p.clone().unwrap_or_default();
                (
                    load_idx(path(&cfg.train_images), path(&cfg.train_labels))?,
                    load_idx(path(&cfg.test_images), path(&cfg.test_labels))?,
                )
            }
        };
        let classes = train.num_classes().max(test.num_classes());
        if test.dim() != train.dim() {
            return Err(Error::DimensionMismatch {
                left: test.dim(),
                right: train.dim(),
            });
        }
        let (train, test) = (with_classes(train, classes)?, with_classes(test, classes)?);
        let partition = match cfg.partition {
            PartitionScheme::Sort => sort_and_partition(&train, cfg.clients, cfg.seed)?,
            PartitionScheme::Paired => paired_partition(&train, cfg.clients, cfg.seed)?,
            PartitionScheme::Dirichlet => dirichlet_partition(&train, cfg.clients, cfg.rho, cfg.seed)?,
        };
        let model = match cfg.model {
            ModelKind::Logistic => LossModel::logistic(train.dim(), classes)?,
            ModelKind::Mlp => LossModel::mlp(train.dim(), cfg.hidden, classes)?,
            ModelKind::Quadratic => unreachable!("rejected by validate"),
        };
        Ok(Self::Classification {
            model,
            train,
            test,
            partition,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
        })
    }
}

fn with_classes<T: Scalar>(ds: Dataset<T>, classes: usize) -> Result<Dataset<T>> {
    if ds.num_classes() == classes {
        return Ok(ds);
    }
    Dataset::new(ds.features().to_vec(), ds.labels().to_vec(), ds.dim(), classes)
}

/// Shape of a heterogeneous quadratic population: client centers
/// `offset + U[-spread, spread]^dim`, curvatures log-uniform in
/// `[curvature_min, curvature_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticTestbed {
    pub clients: usize,
    pub dim: usize,
    pub offset: f64,
    pub spread: f64,
    pub curvature_min: f64,
    pub curvature_max: f64,
}

impl QuadraticTestbed {
    /// Ten ill-conditioned clients whose optima sit far from the origin start:
    /// curvatures span two and a half decades and the centers spread +-5
    /// around 10 in each of 20 coordinates.
    pub const DRIFT: Self = Self {
        clients: 10,
        dim: 20,
        offset: 10.0,
        spread: 5.0,
        curvature_min: 0.01,
        curvature_max: 2.0,
    };

    pub fn population<T: Scalar>(&self, local_steps: usize, seed: u64) -> Result<Population<T>> {
        if local_steps == 0 {
            return Err(invalid("local_steps", "must be >= 1"));
        }
        Ok(Population::Analytic {
            objectives: self.objectives(seed)?,
            local_steps,
        })
    }

    /// Runs `algo` on this testbed from the origin with full participation
    /// and returns the final server state.
    pub fn run<T: Scalar>(
        &self,
        algo: Algorithm,
        local_steps: usize,
        lr: f64,
        rounds: usize,
        seed: u64,
    ) -> Result<ServerState<T>> {
        let config = RunConfig {
            algo,
            clients: self.clients,
            rounds,
            lr,
            seed,
            eval_every: rounds,
            timing: false,
            ..RunConfig::default()
        };
        let mut sim = Simulation::new(config, self.population(local_steps, seed)?)?;
        sim.run_with(|_| Ok(()))?;
        Ok(sim.server.clone())
    }

    pub fn objectives<T: Scalar>(&self, seed: u64) -> Result<Vec<LossModel<T>>> {
        use rand::Rng;
        if !(self.curvature_min > 0.0 && self.curvature_max >= self.curvature_min) {
            return Err(invalid("curvature", "need 0 < min <= max"));
        }
        let mut rng = seeding::stream(seed, &[tag::POPULATION]);
        let (lo, hi) = (self.curvature_min.ln(), self.curvature_max.ln());
        (0..self.clients)
            .map(|_| {
                let c = (0..self.dim)
                    .map(|_| T::of(self.offset + rng.random_range(-self.spread..=self.spread)))
                    .collect();
                let a = (0..self.dim)
                    .map(|_| T::of(rng.random_range(lo..=hi).exp()))
                    .collect();
                LossModel::quadratic(ParamVector::from_vec(c), ParamVector::from_vec(a))
            })
            .collect()
    }
}

/// Switches that reduce IGFL to FedAvg, for equivalence testing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hooks {
    pub client_correction: Correction,
    pub uniform_attention: bool,
}

/// Metrics for one completed round. Loss and accuracy are filled in only on
/// evaluation rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// Number of completed rounds, starting at 1.
    pub round: usize,
    pub train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub drift: f64,
    pub elapsed_ms: u64,
    pub sampled: Vec<usize>,
}

impl RoundMetrics {
    pub fn evaluated(&self) -> bool {
        self.train_loss.is_some()
    }
}

/// Everything a round produced besides the new server state.
#[derive(Clone, Debug)]
pub struct RoundOutcome<T> {
    pub metrics: RoundMetrics,
    /// Attention matrix over `metrics.sampled`, for attention algorithms.
    pub attention: Option<AttentionScores<T>>,
}

/// A run in progress: configuration, population and all mutable state.
pub struct Simulation<T> {
    config: RunConfig,
    population: Population<T>,
    server: ServerState<T>,
    clients: Vec<ClientState<T>>,
    hooks: Hooks,
    started: Instant,
}

impl<T: Scalar> Simulation<T> {
    /// Starts from the model's seeded initialization (classification) or the
    /// origin (analytic objectives).
    pub fn new(config: RunConfig, population: Population<T>) -> Result<Self> {
        let init = match &population {
            Population::Classification { model, .. } => {
                model.init_params(&mut seeding::stream(config.seed, &[tag::MODEL_INIT]))
            }
            Population::Analytic { .. } => ParamVector::zeros(population.num_params()),
        };
        Self::with_params(config, population, init)
    }

    pub fn with_params(config: RunConfig, population: Population<T>, init: ParamVector<T>) -> Result<Self> {
        if population.num_clients() != config.clients {
            return Err(invalid(
                "clients",
                format!(
                    "config says {} but the population has {}",
                    config.clients,
                    population.num_clients()
                ),
            ));
        }
        if init.len() != population.num_params() {
            return Err(Error::DimensionMismatch {
                left: init.len(),
                right: population.num_params(),
            });
        }
        let n = init.len();
        Ok(Self {
            clients: (0..config.clients).map(|_| ClientState::new(n)).collect(),
            server: ServerState::new(init),
            config,
            population,
            hooks: Hooks::default(),
            started: Instant::now(),
        })
    }

    pub fn from_config(config: RunConfig) -> Result<Self> {
        let population = Population::from_config(&config)?;
        Self::new(config, population)
    }

    pub fn with_hooks(mut self, hooks: Hooks) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn population(&self) -> &Population<T> {
        &self.population
    }

    pub fn server(&self) -> &ServerState<T> {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState<T>] {
        &self.clients
    }

    /// Runs round `server.round`: sample, train the sampled clients on their
    /// seeded batch streams, store their deltas, aggregate.
    pub fn run_round(&mut self) -> Result<RoundOutcome<T>> {
        let cfg = &self.config;
        let round = self.server.round;
        let sampled = sample_clients(cfg.clients, cfg.sample_rate, round, cfg.seed);
        let lr = T::of(cfg.lr);
        let correction = match cfg.algo.corrects_clients() {
            true => self.hooks.client_correction,
            false => Correction::Off,
        };

        let results: Vec<Result<LocalResult<T>>> = sampled
            .par_iter()
            .map(|&client| {
                let batches = self.population.client_batches(client, round, cfg.seed)?;
                let input = ClientRoundInput {
                    global_params: &self.server.params,
                    global_delta: &self.server.prev_global_delta,
                    sample_count: sampled.len(),
                    lr,
                    batches: &batches,
                    round,
                    client,
                };
                let model = self.population.objective(client);
                let state = &self.clients[client];
                Ok(match cfg.algo {
                    Algorithm::Scaffold => {
                        let up = scaffold_client_round(&input, state, &self.server.control, model)?;
                        LocalResult {
                            delta: up.delta,
                            control: Some((up.control_delta, up.new_control)),
                        }
                    }
                    a if a.corrects_clients() => LocalResult {
                        delta: igfl_client_round(&input, state, model, correction)?,
                        control: None,
                    },
                    _ => LocalResult {
                        delta: local_sgd_round(&input, model)?,
                        control: None,
                    },
                })
            })
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let finals: Vec<ParamVector<T>> = results
            .iter()
            .map(|r| r.delta.add(&self.server.params))
            .collect::<Result<_>>()?;
        let drift = drift_metric(&finals, &self.server.params)?;
        if !drift.is_finite() {
            return Err(Error::GlobalDiverged {
                round,
                what: "client drift",
            });
        }

        let current: Vec<ParamVector<T>> = results.iter().map(|r| r.delta.clone()).collect();
        let previous = sampled.iter().map(|&c| self.clients[c].last_update.clone()).collect();
        let updates = RoundUpdates::new(sampled.clone(), current, previous)?;

        let mut attention = None;
        let next = match cfg.algo {
            Algorithm::Fedavg | Algorithm::IgflC => average_aggregate(&self.server, &updates)?,
            Algorithm::Fedavgm => fedavgm_aggregate(&self.server, &updates, T::of(cfg.beta))?,
            Algorithm::Fedadam => fedadam_aggregate(
                &self.server,
                &updates,
                AdamParams {
                    beta1: T::of(cfg.beta1),
                    beta2: T::of(cfg.beta2),
                    tau: T::of(cfg.tau),
                    server_lr: T::of(cfg.server_lr),
                },
            )?,
            Algorithm::Scaffold => {
                let deltas: Vec<ParamVector<T>> = results
                    .iter()
                    .map(|r| r.control.as_ref().expect("scaffold result").0.clone())
                    .collect();
                scaffold_aggregate(&self.server, &updates, &deltas, cfg.clients)?
            }
            Algorithm::IgflS | Algorithm::Igfl => {
                let scores = if self.hooks.uniform_attention {
                    AttentionScores::uniform(updates.len())
                } else {
                    attention_scores(&updates, cfg.attention)?
                };
                let next = aggregate_with_scores(&self.server, &updates, &scores)?;
                attention = Some(scores);
                next
            }
        };
        if !next.params.is_finite() {
            return Err(Error::GlobalDiverged {
                round,
                what: "global parameters",
            });
        }

        for (&c, r) in sampled.iter().zip(results) {
            let st = &mut self.clients[c];
            st.last_update = r.delta;
            st.last_round_seen = Some(round);
            if let Some((_, new_control)) = r.control {
                st.control_variate = new_control;
            }
        }
        self.server = next;

        let completed = self.server.round;
        let evaluate = completed % cfg.eval_every == 0 || completed == cfg.rounds;
        let (train_loss, test_accuracy) = if evaluate {
            let loss = self.population.train_loss(&self.server.params).map_err(|e| match e {
                Error::NonFinite(_) => Error::GlobalDiverged {
                    round,
                    what: "training loss",
                },
                e => e,
            })?;
            (Some(loss), self.population.test_accuracy(&self.server.params)?)
        } else {
            (None, None)
        };
        let elapsed_ms = if cfg.timing {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok(RoundOutcome {
            metrics: RoundMetrics {
                round: completed,
                train_loss,
                test_accuracy,
                drift,
                elapsed_ms,
                sampled,
            },
            attention,
        })
    }

    /// Runs the remaining rounds, handing each outcome to `observe` as soon
    /// as it is available.
    pub fn run_with(&mut self, mut observe: impl FnMut(&RoundOutcome<T>) -> Result<()>) -> Result<()> {
        self.started = Instant::now();
        while self.server.round < self.config.rounds {
            let outcome = self.run_round()?;
            observe(&outcome)?;
        }
        Ok(())
    }

    /// Runs every round and collects the metrics.
    pub fn run(&mut self) -> Result<TrainingReport<T>> {
        let mut metrics = Vec::with_capacity(self.config.rounds);
        self.run_with(|o| {
            metrics.push(o.metrics.clone());
            Ok(())
        })?;
        Ok(TrainingReport {
            summary_accuracy: summary_accuracy(&metrics, self.config.rounds),
            final_drift: metrics.last().map(|m| m.drift).unwrap_or(0.0),
            metrics,
            final_state: self.server.clone(),
        })
    }
}

struct LocalResult<T> {
    delta: ParamVector<T>,
    control: Option<(ParamVector<T>, ParamVector<T>)>,
}

#[derive(Clone, Debug)]
pub struct TrainingReport<T> {
    pub metrics: Vec<RoundMetrics>,
    /// Mean test accuracy over the last `ceil(R / 10)` evaluations.
    pub summary_accuracy: Option<f64>,
    pub final_drift: f64,
    pub final_state: ServerState<T>,
}

/// Number of trailing evaluations the summary averages: `ceil(R / 10)`.
pub fn summary_window(rounds: usize) -> usize {
    rounds.div_ceil(10).max(1)
}

/// Mean test accuracy over the last `ceil(rounds / 10)` evaluated rounds.
pub fn summary_accuracy(metrics: &[RoundMetrics], rounds: usize) -> Option<f64> {
    let accs: Vec<f64> = metrics.iter().filter_map(|m| m.test_accuracy).collect();
    if accs.is_empty() {
        return None;
    }
    let w = summary_window(rounds).min(accs.len());
    Some(accs[accs.len() - w..].iter().sum::<f64>() / w as f64)
}

/// Runs a configured experiment end to end.
pub fn run_training<T: Scalar>(config: &RunConfig) -> Result<TrainingReport<T>> {
    Simulation::<T>::from_config(config.clone())?.run()
}

/// Mean self-attention matrix over all rounds of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `scores[i][j]`: average attention client `i` pays to client `j`,
    /// over the rounds in which both were sampled.
    pub scores: Vec<Vec<f64>>,
    pub rounds_averaged: usize,
    /// Fraction of label-sharing client pairs whose symmetric mean score
    /// exceeds the median off-diagonal score.
    pub matching_rate: f64,
    /// Fraction of rows whose top off-diagonal score is on a client with the
    /// same label set.
    pub paired_top_rate: f64,
    /// Label set of every client.
    pub labels: Vec<Vec<usize>>,
}

/// Running mean of the attention matrix over rounds, indexed by client id.
#[derive(Clone, Debug)]
pub struct HeatmapAccumulator {
    sum: Vec<Vec<f64>>,
    count: Vec<Vec<usize>>,
    rounds: usize,
}

impl HeatmapAccumulator {
    pub fn new(clients: usize) -> Self {
        Self {
            sum: vec![vec![0.0; clients]; clients],
            count: vec![vec![0; clients]; clients],
            rounds: 0,
        }
    }

    pub fn observe<T: Scalar>(&mut self, outcome: &RoundOutcome<T>) {
        let Some(scores) = &outcome.attention else {
            return;
        };
        let ids = &outcome.metrics.sampled;
        for (a, &i) in ids.iter().enumerate() {
            for (b, &j) in ids.iter().enumerate() {
                self.sum[i][j] += scores.row(a)[b].as_f64();
                self.count[i][j] += 1;
            }
        }
        self.rounds += 1;
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// `scores[i][j]`: mean attention client `i` paid to client `j` over the
    /// rounds in which both were sampled, 0 if never.
    pub fn mean_scores(&self) -> Vec<Vec<f64>> {
        self.sum
            .iter()
            .zip(&self.count)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(&v, &n)| if n > 0 { v / n as f64 } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    pub fn finish(&self, labels: Vec<Vec<usize>>) -> Heatmap {
        let scores = self.mean_scores();
        Heatmap {
            matching_rate: matching_rate(&scores, &labels),
            paired_top_rate: paired_top_rate(&scores, &labels),
            scores,
            rounds_averaged: self.rounds,
            labels,
        }
    }
}

/// Checks that a simulation can produce a heatmap and returns each client's
/// label set.
pub fn heatmap_labels<T: Scalar>(sim: &Simulation<T>) -> Result<Vec<Vec<usize>>> {
    let cfg = sim.config();
    if !cfg.algo.uses_attention() || cfg.attention != AttentionOption::SelfAttention {
        return Err(invalid(
            "attention",
            "heatmaps need an attention algorithm (igfl or igfl_s) with self attention",
        ));
    }
    match sim.population() {
        Population::Classification { train, partition, .. } => Ok(partition.label_sets(train)),
        Population::Analytic { .. } => Err(invalid("population", "heatmaps need labelled clients")),
    }
}

/// Runs a self-attention experiment to completion and averages the
/// attention matrix over every round.
pub fn attention_heatmap<T: Scalar>(sim: &mut Simulation<T>) -> Result<Heatmap> {
    let labels = heatmap_labels(sim)?;
    let mut acc = HeatmapAccumulator::new(sim.config().clients);
    sim.run_with(|o| {
        acc.observe(o);
        Ok(())
    })?;
    Ok(acc.finish(labels))
}

/// Fraction of label-sharing client pairs whose symmetric mean score exceeds
/// the median off-diagonal score. `NaN` when no pair shares a label.
pub fn matching_rate(scores: &[Vec<f64>], labels: &[Vec<usize>]) -> f64 {
    let p = scores.len();
    let mut off: Vec<f64> = (0..p)
        .flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| scores[i][j])
        .collect();
    if off.is_empty() {
        return f64::NAN;
    }
    off.sort_by(f64::total_cmp);
    let mid = off.len() / 2;
    let median = if off.len() % 2 == 0 {
        0.5 * (off[mid - 1] + off[mid])
    } else {
        off[mid]
    };
    let mut pairs = 0;
    let mut hits = 0;
    for i in 0..p {
        for j in i + 1..p {
            if labels[i].iter().any(|l| labels[j].contains(l)) {
                pairs += 1;
                if 0.5 * (scores[i][j] + scores[j][i]) > median {
                    hits += 1;
                }
            }
        }
    }
    if pairs == 0 {
        f64::NAN
    } else {
        hits as f64 / pairs as f64
    }
}

/// Fraction of rows whose largest off-diagonal entry sits on a client with
/// the identical label set.
pub fn paired_top_rate(scores: &[Vec<f64>], labels: &[Vec<usize>]) -> f64 {
    let p = scores.len();
    let hits = (0..p)
        .filter(|&i| {
            let top = (0..p)
                .filter(|&j| j != i)
                .max_by(|&a, &b| scores[i][a].total_cmp(&scores[i][b]));
            top.is_some_and(|j| labels[j] == labels[i])
        })
        .count();
    hits as f64 / p as f64
}
