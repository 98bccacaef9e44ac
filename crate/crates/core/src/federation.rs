//! Synchronous federated rounds: broadcast, local training, uplink of shared
//! prompts, size-weighted aggregation.
//!
//! A round `r` is:
//!
//! 1. the server broadcasts the global shared prompt (plus, when the alignment
//!    term is on, read-only snapshots of every client's last uplink);
//! 2. each client overwrites its shared prompt with the global one and runs
//!    local SGD epochs on both prompts;
//! 3. each client uploads its shared prompt; the server averages them in
//!    ascending client-id order;
//! 4. every client is evaluated on its test split with the new global shared
//!    prompt and its own private prompt.
//!
//! Snapshots are therefore one round stale, and round 1 carries none.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EncodedSample;
use crate::embedding::{ImageEncoding, TextEncoder};
use crate::error::{Error, Result};
use crate::objective::{
    dpac_targets, predict, sgd_step, total_loss_and_grad, DpacTargets, Features, LossContext,
    ModelConfig,
};
use crate::prompt::{PromptSet, SharedPrompt};
use crate::rng::child_rng;

/// Bytes per transmitted value (`f64`).
pub const BYTES_PER_VALUE: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// A peer's shared prompt as last uploaded.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerSnapshot {
    pub client_id: usize,
    pub prompt: SharedPrompt,
}

/// Everything that crosses the wire. Only [`SharedPrompt`] values can be
/// carried; there is no field a private prompt could be placed in.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub direction: Direction,
    pub client_id: usize,
    pub round: usize,
    pub payload: SharedPrompt,
    /// Downlink only; empty on uplinks.
    pub snapshots: Vec<PeerSnapshot>,
}

impl RoundMessage {
    pub fn value_count(&self) -> usize {
        self.payload.value_count()
            + self
                .snapshots
                .iter()
                .map(|s| s.prompt.value_count())
                .sum::<usize>()
    }

    pub fn bytes(&self) -> u64 {
        self.value_count() as u64 * BYTES_PER_VALUE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            local_epochs: 1,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::range("lr", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::range("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Read-only inputs shared by every client.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub text: &'a TextEncoder,
    pub samples: &'a [EncodedSample],
    pub model: &'a ModelConfig,
    pub settings: &'a TrainSettings,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub prompts: PromptSet,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Master seed; batch order is derived from it, the client id and the round.
    pub seed: u64,
}

impl ClientState {
    pub fn data_size(&self) -> usize {
        self.train.len()
    }
}

/// Mean losses over the optimizer steps of one local training call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocalStats {
    pub ce: f64,
    pub dpac: f64,
    pub steps: usize,
}

/// Fails if any index appears in two clients or in both splits of one client.
pub fn check_disjoint(clients: &[ClientState], n_samples: usize) -> Result<()> {
    let mut owner = vec![false; n_samples];
    for c in clients {
        for &i in c.train.iter().chain(&c.test) {
            if i >= n_samples {
                return Err(Error::Config(format!(
                    "client {} references sample {i} of {n_samples}",
                    c.id
                )));
            }
            if owner[i] {
                return Err(Error::Config(format!(
                    "sample {i} assigned twice (client {})",
                    c.id
                )));
            }
            owner[i] = true;
        }
    }
    Ok(())
}

fn batch_of<'s>(samples: &'s [EncodedSample], idx: &[usize]) -> Vec<(&'s ImageEncoding, usize)> {
    idx.iter()
        .map(|&i| (&samples[i].image, samples[i].label))
        .collect()
}

/// `epochs` passes of minibatch SGD over the client's train split.
fn run_epochs(
    client: &mut ClientState,
    env: &Env<'_>,
    targets: Option<&DpacTargets>,
    round: usize,
    epochs: usize,
) -> Result<LocalStats> {
    if client.train.is_empty() {
        return Err(Error::Config(format!(
            "client {} has an empty local dataset",
            client.id
        )));
    }
    let mut stats = LocalStats::default();
    for epoch in 0..epochs {
        let mut order = client.train.clone();
        let mut rng = child_rng(
            client.seed,
            &format!("client/{}/round/{round}/epoch/{epoch}", client.id),
        );
        order.shuffle(&mut rng);
        for chunk in order.chunks(env.settings.batch_size) {
            let batch = batch_of(env.samples, chunk);
            let report = {
                let ctx = LossContext {
                    text: env.text,
                    prompts: &client.prompts,
                    model: env.model,
                    dpac: targets,
                };
                total_loss_and_grad(&ctx, &batch)?
            };
            let lr = env.settings.lr;
            sgd_step(&mut client.prompts.shared.0, report.grads.shared.view(), lr)?;
            if env.model.dual_prompt {
                sgd_step(
                    &mut client.prompts.private.0,
                    report.grads.private.view(),
                    lr,
                )?;
            }
            stats.ce += report.ce;
            stats.dpac += report.dpac;
            stats.steps += 1;
        }
    }
    if stats.steps > 0 {
        stats.ce /= stats.steps as f64;
        stats.dpac /= stats.steps as f64;
    }
    Ok(stats)
}

/// Adopts the broadcast global prompt, trains locally and returns the uplink.
pub fn local_train(
    client: &mut ClientState,
    down: &RoundMessage,
    env: &Env<'_>,
) -> Result<(RoundMessage, LocalStats)> {
    if down.direction != Direction::Down || down.client_id != client.id {
        return Err(Error::Protocol(format!(
            "client {} received a message addressed to client {} ({:?})",
            client.id, down.client_id, down.direction
        )));
    }
    if down.payload.0.dim() != client.prompts.shared.0.dim() {
        return Err(Error::Shape {
            tensor: "global shared prompt".into(),
            expected: format!("{:?}", client.prompts.shared.0.dim()),
            found: format!("{:?}", down.payload.0.dim()),
        });
    }
    client.prompts.shared = down.payload.clone();
    let targets = if env.model.uses_dpac() {
        let probe = client
            .prompts
            .class_embeddings()
            .row(env.model.probe_class)
            .to_owned();
        let peers: Vec<_> = down
            .snapshots
            .iter()
            .filter(|s| s.client_id != client.id)
            .map(|s| s.prompt.view())
            .collect();
        Some(dpac_targets(
            env.text,
            probe.view(),
            down.payload.view(),
            &peers,
        )?)
    } else {
        None
    };
    let stats = run_epochs(
        client,
        env,
        targets.as_ref(),
        down.round,
        env.settings.local_epochs,
    )?;
    let up = RoundMessage {
        direction: Direction::Up,
        client_id: client.id,
        round: down.round,
        payload: client.prompts.shared.clone(),
        snapshots: Vec::new(),
    };
    Ok((up, stats))
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_shared: SharedPrompt,
    /// `w_i = m_i / m`.
    pub client_weights: Array1<f64>,
    /// Completed aggregations.
    pub round: usize,
    /// Last uplink of every client, by id; empty before the first aggregation.
    pub shared_snapshots: Vec<SharedPrompt>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Applies the extra `1/N` factor of the printed aggregation rule.
    pub literal_mean: bool,
}

impl ServerState {
    pub fn new(
        global_shared: SharedPrompt,
        data_sizes: &[usize],
        literal_mean: bool,
    ) -> Result<Self> {
        if data_sizes.is_empty() {
            return Err(Error::range("clients", "need at least 1 client"));
        }
        if let Some(i) = data_sizes.iter().position(|&m| m == 0) {
            return Err(Error::Config(format!(
                "client {i} has an empty local dataset"
            )));
        }
        let total: usize = data_sizes.iter().sum();
        let client_weights = data_sizes
            .iter()
            .map(|&m| m as f64 / total as f64)
            .collect();
        Ok(Self {
            global_shared,
            client_weights,
            round: 0,
            shared_snapshots: Vec::new(),
            bytes_up: 0,
            bytes_down: 0,
            literal_mean,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.client_weights.len()
    }

    pub fn bytes_transmitted(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }

    /// Weighted mean of one uplink per client. Either every client is present
    /// exactly once or nothing changes.
    pub fn aggregate(&mut self, ups: &[RoundMessage]) -> Result<()> {
        let n = self.n_clients();
        let mut by_id: Vec<Option<&RoundMessage>> = vec![None; n];
        for msg in ups {
            if msg.direction != Direction::Up {
                return Err(Error::Protocol(format!(
                    "downlink message from client {} in aggregation",
                    msg.client_id
                )));
            }
            let slot = by_id.get_mut(msg.client_id).ok_or_else(|| {
                Error::Protocol(format!("unknown client id {} (N = {n})", msg.client_id))
            })?;
            if slot.is_some() {
                return Err(Error::Protocol(format!(
                    "duplicate message from client {}",
                    msg.client_id
                )));
            }
            if msg.payload.0.dim() != self.global_shared.0.dim() {
                return Err(Error::Shape {
                    tensor: format!("shared prompt from client {}", msg.client_id),
                    expected: format!("{:?}", self.global_shared.0.dim()),
                    found: format!("{:?}", msg.payload.0.dim()),
                });
            }
            *slot = Some(msg);
        }
        if let Some(missing) = by_id.iter().position(Option::is_none) {
            return Err(Error::Protocol(format!(
                "missing message from client {missing}; refusing partial aggregation"
            )));
        }
        let msgs: Vec<&RoundMessage> = by_id.into_iter().flatten().collect();
        let mut global = Array2::<f64>::zeros(self.global_shared.0.dim());
        for (msg, &w) in msgs.iter().zip(self.client_weights.iter()) {
            global.scaled_add(w, &msg.payload.0);
        }
        if self.literal_mean {
            global /= n as f64;
        }
        self.global_shared = SharedPrompt(global);
        self.shared_snapshots = msgs.iter().map(|m| m.payload.clone()).collect();
        self.bytes_up += msgs.iter().map(|m| m.bytes()).sum::<u64>();
        self.round += 1;
        Ok(())
    }

    /// One downlink per client for round `self.round + 1`.
    pub fn broadcast(&mut self, with_snapshots: bool) -> Vec<RoundMessage> {
        let snapshots: Vec<PeerSnapshot> = if with_snapshots {
            self.shared_snapshots
                .iter()
                .enumerate()
                .map(|(client_id, prompt)| PeerSnapshot {
                    client_id,
                    prompt: prompt.clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        let downs: Vec<RoundMessage> = (0..self.n_clients())
            .map(|client_id| RoundMessage {
                direction: Direction::Down,
                client_id,
                round: self.round + 1,
                payload: self.global_shared.clone(),
                snapshots: snapshots.clone(),
            })
            .collect();
        self.bytes_down += downs.iter().map(|m| m.bytes()).sum::<u64>();
        downs
    }
}

/// Fraction of `indices` whose arg-max prediction matches the label.
pub fn accuracy(prompts: &PromptSet, indices: &[usize], env: &Env<'_>) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Config("accuracy over an empty split".into()));
    }
    let features = Features::build(env.text, prompts, env.model.dual_prompt)?;
    let correct = indices
        .par_iter()
        .map(|&i| {
            let s = &env.samples[i];
            let p = predict(&features, &s.image, env.model)?;
            Ok(usize::from(argmax(p.view()) == s.label))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / indices.len() as f64)
}

/// First index of the maximum.
pub fn argmax(p: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Prompts a client is evaluated with: the server's global shared prompt and
/// the client's own private prompt.
pub fn personalized(client: &ClientState, global: &SharedPrompt) -> PromptSet {
    let mut prompts = client.prompts.clone();
    prompts.shared = global.clone();
    prompts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: usize,
    pub client_id: usize,
    pub accuracy: f64,
    pub ce: f64,
    pub dpac: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean client accuracy per round, in round order.
    pub fn mean_accuracy(&self) -> Vec<f64> {
        let rounds = self.rows.iter().map(|r| r.round).max().unwrap_or(0);
        (1..=rounds)
            .map(|round| {
                let accs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.round == round)
                    .map(|r| r.accuracy)
                    .collect();
                accs.iter().sum::<f64>() / accs.len() as f64
            })
            .collect()
    }

    pub fn final_mean_accuracy(&self) -> Option<f64> {
        self.mean_accuracy().last().copied()
    }
}

/// Runs `rounds` synchronous rounds; clients train concurrently.
pub fn run_rounds(
    clients: &mut [ClientState],
    server: &mut ServerState,
    rounds: usize,
    env: &Env<'_>,
) -> Result<History> {
    run_rounds_observed(clients, server, rounds, env, |_| {})
}

/// [`run_rounds`], handing every message that crosses the wire to `observe`.
pub fn run_rounds_observed(
    clients: &mut [ClientState],
    server: &mut ServerState,
    rounds: usize,
    env: &Env<'_>,
    mut observe: impl FnMut(&RoundMessage),
) -> Result<History> {
    if clients.len() != server.n_clients() {
        return Err(Error::Protocol(format!(
            "{} clients but the server expects {}",
            clients.len(),
            server.n_clients()
        )));
    }
    if let Some((pos, c)) = clients.iter().enumerate().find(|(pos, c)| c.id != *pos) {
        return Err(Error::Protocol(format!(
            "client at position {pos} has id {}",
            c.id
        )));
    }
    let mut history = History::default();
    for _ in 0..rounds {
        let downs = server.broadcast(env.model.uses_dpac());
        downs.iter().for_each(&mut observe);
        let results = clients
            .par_iter_mut()
            .zip(downs.par_iter())
            .map(|(client, down)| local_train(client, down, env))
            .collect::<Result<Vec<_>>>()?;
        let (ups, stats): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        ups.iter().for_each(&mut observe);
        server.aggregate(&ups)?;
        let accs = clients
            .par_iter()
            .map(|c| accuracy(&personalized(c, &server.global_shared), &c.test, env))
            .collect::<Result<Vec<_>>>()?;
        for (i, acc) in accs.into_iter().enumerate() {
            history.rows.push(HistoryRow {
                round: server.round,
                client_id: i,
                accuracy: acc,
                ce: stats[i].ce,
                dpac: stats[i].dpac,
                bytes_up: ups[i].bytes(),
                bytes_down: downs[i].bytes(),
            });
        }
    }
    Ok(history)
}

/// Plain (non-federated) prompt training on one client's data with the same
/// batch schedule a single-client federation would use.
pub fn train_centralized(client: &mut ClientState, rounds: usize, env: &Env<'_>) -> Result<()> {
    for round in 1..=rounds {
        run_epochs(client, env, None, round, env.settings.local_epochs)?;
    }
    Ok(())
}
