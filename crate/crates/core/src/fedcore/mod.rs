//! Federated training loop: FedProx local solvers, sample-weighted
//! aggregation and per-round server evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::data::{
    augment, build_partition, to_batch, train_test_split, AugmentationConfig, Dataset, Partition, PartitionPlan,
    SampleSource,
};
use crate::error::{Error, Result};
use crate::metrics::{confusion_tensors, metrics_from_counts, ConfusionCounts, MetricsRow, DEFAULT_THRESHOLD};
use crate::model::{AttentionUNet, ModelConfig, ParameterSet};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, tag};

/// Fraction of each client's data held out for client-side evaluation.
pub const CLIENT_TEST_FRACTION: f64 = 0.2;

/// Batch size used for forward-only evaluation passes.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Algorithm {
    /// Local gradient gains the proximal and weight-decay terms.
    #[default]
    FedProx,
    /// Plain local loss gradient; `mu` and `weight_decay` are ignored.
    FedAvg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedProx => "fedprox",
            Algorithm::FedAvg => "fedavg",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedprox" => Ok(Algorithm::FedProx),
            "fedavg" => Ok(Algorithm::FedAvg),
            _ => Err(Error::config("fed.algorithm", format!("unknown algorithm {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Per-client epoch counts; empty means every client runs `local_epochs`.
    pub client_epochs: Vec<usize>,
    pub mu: f64,
    pub weight_decay: f64,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Train clients on separate threads within a round.
    pub parallel: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 6,
            local_epochs: 10,
            client_epochs: Vec::new(),
            mu: 0.1,
            weight_decay: 0.001,
            adam_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            seed: 0,
            algorithm: Algorithm::FedProx,
            parallel: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("fed.rounds", self.rounds)?;
        positive("fed.local_epochs", self.local_epochs)?;
        positive("fed.batch_size", self.batch_size)?;
        for (i, &e) in self.client_epochs.iter().enumerate() {
            positive(&format!("fed.client_epochs[{i}]"), e)?;
        }
        let non_negative = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a finite non-negative number, got {v}")))
            }
        };
        non_negative("fed.mu", self.mu)?;
        non_negative("fed.weight_decay", self.weight_decay)?;
        if !(self.adam_lr.is_finite() && self.adam_lr > 0.0) {
            return Err(Error::config("fed.adam_lr", "must be positive"));
        }
        for (field, b) in [("fed.adam_beta1", self.adam_beta1), ("fed.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::config("fed.adam_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.adam_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn epochs_for(&self, client: usize) -> usize {
        self.client_epochs.get(client).copied().unwrap_or(self.local_epochs)
    }

    pub fn objective(&self) -> LocalObjective {
        match self.algorithm {
            Algorithm::FedProx => LocalObjective {
                mu: self.mu,
                weight_decay: self.weight_decay,
            },
            Algorithm::FedAvg => LocalObjective::default(),
        }
    }
}

/// Terms added to a client's loss: `(mu/2)·‖w − anchor‖² + (weight_decay/2)·‖w‖²`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalObjective {
    pub mu: f64,
    pub weight_decay: f64,
}

impl LocalObjective {
    /// Adds the penalty gradient to `grad`. Zero coefficients leave `grad`
    /// untouched, so a zeroed objective reproduces plain training exactly.
    pub fn add_gradient(&self, grad: &mut [f64], w: &[f64], anchor: &[f64]) {
        if self.mu > 0.0 {
            for ((g, &wi), &ai) in grad.iter_mut().zip(w).zip(anchor) {
                *g += self.mu * (wi - ai);
            }
        }
        if self.weight_decay > 0.0 {
            for (g, &wi) in grad.iter_mut().zip(w) {
                *g += self.weight_decay * wi;
            }
        }
    }

    pub fn penalty(&self, w: &[f64], anchor: &[f64]) -> f64 {
        let prox: f64 = w.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
        let decay: f64 = w.iter().map(|a| a * a).sum();
        0.5 * self.mu * prox + 0.5 * self.weight_decay * decay
    }
}

/// Shuffle and augmentation stream for one client epoch.
pub fn epoch_stream(seed: u64, client: usize, round: usize, epoch: usize, augment_seed: u64) -> rng::Rng {
    rng::stream(
        seed,
        &[tag::EPOCH, client as u64, round as u64, epoch as u64, augment_seed],
    )
}

/// Seed of the client's train/test split.
pub fn split_seed(seed: u64, client: usize) -> u64 {
    rng::derive_seed(seed, &[tag::SPLIT, client as u64])
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    optimizer: Option<Adam>,
}

impl ClientState {
    /// Splits `data` into the client's train and held-out test sets.
    pub fn new(id: usize, data: &Dataset, seed: u64) -> Result<Self> {
        let (train, test) = train_test_split(data, CLIENT_TEST_FRACTION, split_seed(seed, id))
            .map_err(|e| match e {
                Error::Config { reason, .. } => Error::config(format!("data.clients[{id}]"), reason),
                other => other,
            })?;
        Ok(ClientState {
            id,
            train,
            test,
            optimizer: None,
        })
    }

    /// Aggregation weight `n_i`: the size of the local train split.
    pub fn sample_count(&self) -> usize {
        self.train.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub client: usize,
    pub weights: Vec<f64>,
    pub sample_count: usize,
    /// Held-out metrics of the locally trained weights, before aggregation.
    pub metrics: MetricsRow,
    /// Mean soft Dice loss over the last epoch's batches.
    pub last_epoch_loss: f64,
}

/// Runs the client's local epochs starting from `global`, leaving `model`
/// holding the updated weights.
pub fn local_train(
    model: &mut AttentionUNet,
    client: &mut ClientState,
    global: &[f64],
    round: usize,
    cfg: &FedConfig,
    aug: &AugmentationConfig,
) -> Result<LocalUpdate> {
    if client.train.is_empty() {
        return Err(Error::config(
            format!("data.clients[{}]", client.id),
            "local train set is empty",
        ));
    }
    model.set_weights(global)?;
    let mut w = global.to_vec();
    let optimizer = client
        .optimizer
        .get_or_insert_with(|| Adam::new(cfg.adam(), global.len()));
    if optimizer.len() != global.len() {
        *optimizer = Adam::new(cfg.adam(), global.len());
    }
    optimizer.reset();
    let objective = cfg.objective();
    let mut last_epoch_loss = 0.0;
    for epoch in 0..cfg.epochs_for(client.id) {
        let mut rng = epoch_stream(cfg.seed, client.id, round, epoch, aug.seed);
        let mut order: Vec<usize> = (0..client.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<_> = chunk
                .iter()
                .map(|&i| augment(&client.train.samples[i], aug, &mut rng))
                .collect();
            let (images, masks) = to_batch(&samples)?;
            let (loss, mut grad) = model.loss_and_gradient(&images, &masks)?;
            objective.add_gradient(&mut grad, &w, global);
            optimizer.step(&mut w, &grad);
            model.set_weights(&w)?;
            loss_sum += loss;
            batches += 1;
        }
        last_epoch_loss = loss_sum / batches as f64;
        debug!(
            "round {} client {} epoch {}: soft dice loss {:.6}",
            round + 1,
            client.id,
            epoch + 1,
            last_epoch_loss
        );
    }
    let metrics = evaluate(model, &client.test)?;
    Ok(LocalUpdate {
        client: client.id,
        weights: w,
        sample_count: client.sample_count(),
        metrics,
        last_epoch_loss,
    })
}

/// Sample-weighted mean `Σ (n_i / Σn_j) · w_i`.
///
/// Computed as a running mean, so identical inputs return that exact vector
/// and a single input is returned unchanged.
pub fn aggregate(updates: &[(&[f64], usize)]) -> Result<Vec<f64>> {
    let Some(&(first, n0)) = updates.first() else {
        return Err(Error::Usage("aggregate needs at least one update".into()));
    };
    if let Some(i) = updates.iter().position(|&(_, n)| n == 0) {
        return Err(Error::Usage(format!("update {i} has a zero sample count")));
    }
    if let Some(i) = updates.iter().position(|(w, _)| w.len() != first.len()) {
        return Err(Error::shape(
            "aggregate",
            format!("update {i} has {} weights, update 0 has {}", updates[i].0.len(), first.len()),
        ));
    }
    let mut acc = first.to_vec();
    let mut seen = n0 as f64;
    for &(w, n) in &updates[1..] {
        seen += n as f64;
        let frac = n as f64 / seen;
        for (a, &x) in acc.iter_mut().zip(w) {
            *a += (x - *a) * frac;
        }
    }
    Ok(acc)
}

/// Pooled confusion counts of `model` on `dataset` at threshold 0.5.
pub fn evaluate_counts(model: &AttentionUNet, dataset: &Dataset) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for chunk in dataset.samples.chunks(EVAL_BATCH) {
        let (images, masks) = to_batch(chunk)?;
        let probs = model.forward(&images)?;
        total += confusion_tensors(&probs, &masks, DEFAULT_THRESHOLD)?;
    }
    Ok(total)
}

pub fn evaluate(model: &AttentionUNet, dataset: &Dataset) -> Result<MetricsRow> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    metrics_from_counts(&evaluate_counts(model, dataset)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    /// Completed rounds.
    pub round: usize,
    pub weights: Vec<f64>,
    /// Server metrics, one row per completed round.
    pub history: Vec<MetricsRow>,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    /// 1-based round number.
    pub round: usize,
    pub server_metrics: MetricsRow,
    /// Indexed by client id.
    pub per_client_metrics: Vec<MetricsRow>,
    pub client_sample_counts: Vec<usize>,
    /// Not part of equality: timing varies between identical runs.
    pub wall_time: f64,
}

impl PartialEq for RoundReport {
    fn eq(&self, other: &Self) -> bool {
        self.round == other.round
            && self.server_metrics == other.server_metrics
            && self.per_client_metrics == other.per_client_metrics
            && self.client_sample_counts == other.client_sample_counts
    }
}

/// Hooks into the round loop. Every method defaults to a no-op.
pub trait RoundObserver {
    /// Called for each client with the weights it starts training from.
    fn local_start(&mut self, _round: usize, _client: usize, _weights: &[f64]) {}

    fn local_end(&mut self, _round: usize, _update: &LocalUpdate) {}

    /// Called after aggregation and server evaluation.
    fn round_end(&mut self, _report: &RoundReport, _state: &GlobalState) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl RoundObserver for NoObserver {}

pub struct Federation {
    cfg: FedConfig,
    aug: AugmentationConfig,
    model: AttentionUNet,
    clients: Vec<ClientState>,
    server_test: Dataset,
    state: GlobalState,
}

impl Federation {
    /// Starts from `model`'s current weights as round-0 global weights.
    pub fn new(model: AttentionUNet, partition: Partition, cfg: FedConfig, aug: AugmentationConfig) -> Result<Self> {
        cfg.validate()?;
        if partition.clients.is_empty() {
            return Err(Error::config("data.clients", "at least one client is required"));
        }
        if !cfg.client_epochs.is_empty() && cfg.client_epochs.len() != partition.clients.len() {
            return Err(Error::config(
                "fed.client_epochs",
                format!(
                    "has {} entries for {} clients",
                    cfg.client_epochs.len(),
                    partition.clients.len()
                ),
            ));
        }
        if partition.server_test.is_empty() {
            return Err(Error::config("data.server_test", "server test set is empty"));
        }
        let clients = partition
            .clients
            .iter()
            .enumerate()
            .map(|(id, d)| ClientState::new(id, d, cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        let state = GlobalState {
            round: 0,
            weights: model.get_weights(),
            history: Vec::new(),
        };
        Ok(Federation {
            cfg,
            aug,
            model,
            clients,
            server_test: partition.server_test,
            state,
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server_test(&self) -> &Dataset {
        &self.server_test
    }

    /// Global weights as named tensors.
    pub fn global_parameters(&self) -> Result<ParameterSet> {
        let mut p = self.model.parameters().clone();
        p.assign(&self.state.weights)?;
        Ok(p)
    }

    pub fn global_model(&self) -> Result<AttentionUNet> {
        let mut m = self.model.clone();
        m.set_weights(&self.state.weights)?;
        Ok(m)
    }

    pub fn run_round(&mut self, observer: &mut dyn RoundObserver) -> Result<RoundReport> {
        let round = self.state.round;
        if round >= self.cfg.rounds {
            return Err(Error::Usage(format!(
                "all {} configured rounds have already run",
                self.cfg.rounds
            )));
        }
        let start = Instant::now();
        let global = self.state.weights.clone();
        for c in &self.clients {
            observer.local_start(round, c.id, &global);
        }
        let updates = if self.cfg.parallel {
            let (cfg, aug, template) = (&self.cfg, &self.aug, &self.model);
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .clients
                    .iter_mut()
                    .map(|client| {
                        let global = &global;
                        s.spawn(move || {
                            let mut model = template.clone();
                            local_train(&mut model, client, global, round, cfg, aug)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client training thread panicked"))
                    .collect::<Result<Vec<_>>>()
            })?
        } else {
            let mut out = Vec::with_capacity(self.clients.len());
            for client in &mut self.clients {
                out.push(local_train(&mut self.model, client, &global, round, &self.cfg, &self.aug)?);
            }
            out
        };
        for u in &updates {
            observer.local_end(round, u);
        }
        let pairs: Vec<(&[f64], usize)> = updates.iter().map(|u| (u.weights.as_slice(), u.sample_count)).collect();
        self.state.weights = aggregate(&pairs)?;
        self.model.set_weights(&self.state.weights)?;
        let server_metrics = evaluate(&self.model, &self.server_test)?;
        self.state.history.push(server_metrics);
        self.state.round += 1;
        let report = RoundReport {
            round: self.state.round,
            server_metrics,
            per_client_metrics: updates.iter().map(|u| u.metrics).collect(),
            client_sample_counts: updates.iter().map(|u| u.sample_count).collect(),
            wall_time: start.elapsed().as_secs_f64(),
        };
        info!(
            "round {}/{}: server dice loss {:.4}, accuracy {:.4} ({:.1}s)",
            report.round, self.cfg.rounds, server_metrics.dice_loss, server_metrics.accuracy, report.wall_time
        );
        observer.round_end(&report, &self.state)?;
        Ok(report)
    }

    /// Runs every remaining round.
    pub fn run(&mut self, observer: &mut dyn RoundObserver) -> Result<Vec<RoundReport>> {
        let mut reports = Vec::with_capacity(self.cfg.rounds - self.state.round);
        while self.state.round < self.cfg.rounds {
            reports.push(self.run_round(observer)?);
        }
        Ok(reports)
    }
}

/// Builds the model and the partition, then runs all rounds.
pub fn run_federation(
    cfg: &FedConfig,
    model_cfg: &ModelConfig,
    aug: &AugmentationConfig,
    plan: &PartitionPlan,
    source: &SampleSource<'_>,
    observer: &mut dyn RoundObserver,
) -> Result<Vec<RoundReport>> {
    let model = AttentionUNet::build(model_cfg.clone())?;
    let partition = build_partition(plan, source)?;
    let mut fed = Federation::new(model, partition, cfg.clone(), aug.clone())?;
    fed.run(observer)
}

#[cfg(test)]
mod tests;
