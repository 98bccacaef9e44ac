//! Experiment orchestration: world setup, training runs, persisted artifacts
//! and checkpoint evaluation.
//!
//! A run directory contains:
//!
//! * `history.csv` — `round,client_id,accuracy,ce,dpac,bytes_up,bytes_down`;
//! * `manifest.json` — the full config, its SHA-256, derived seeds, version;
//! * `global_shared.bin`, `class_embeddings.bin`, `client_{i}_private.bin`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{
    encode_dataset, gen_synthetic, partition, EncodedSample, PartitionResult, SyntheticDataset,
};
use crate::embedding::{build_encoders, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::federation::{
    accuracy, check_disjoint, personalized, run_rounds, ClientState, Env, History, ServerState,
    TrainSettings,
};
use crate::objective::ModelConfig;
use crate::prompt::{
    init_prompts, read_checkpoint, write_checkpoint, Checkpoint, CheckpointRole, PrivatePrompt,
    PromptSet, SharedPrompt,
};
use crate::rng::derive_seed;

pub const HISTORY_COLUMNS: [&str; 7] = [
    "round",
    "client_id",
    "accuracy",
    "ce",
    "dpac",
    "bytes_up",
    "bytes_down",
];

/// Frozen encoders, encoded data and the client partition for one config.
pub struct World {
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub settings: TrainSettings,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub data: SyntheticDataset,
    pub samples: Vec<EncodedSample>,
    pub partition: PartitionResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub encoders: u64,
    pub data: u64,
    pub global_prompt: u64,
    pub clients: Vec<u64>,
}

impl Seeds {
    pub fn derive(master: u64, n_clients: usize) -> Self {
        Self {
            master,
            encoders: derive_seed(master, "encoders"),
            data: derive_seed(master, "data"),
            global_prompt: derive_seed(master, "prompts/global"),
            clients: (0..n_clients)
                .map(|i| derive_seed(master, &format!("prompts/client/{i}")))
                .collect(),
        }
    }
}

impl World {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seeds = Seeds::derive(config.seed, config.clients);
        let (k, per_class, _) = config.dataset.shape();
        let data = gen_synthetic(k, per_class, config.embed_dim, config.sigma, seeds.data)?;
        let (image, text) = build_encoders(&config.encoder())?;
        let samples = encode_dataset(&data, &image)?;
        let partition = partition(&config.dataset.spec(config.clients, config.seed))?;
        Ok(Self {
            config: config.clone(),
            model: config.model(),
            settings: config.train_settings(),
            image,
            text,
            data,
            samples,
            partition,
        })
    }

    pub fn env(&self) -> Env<'_> {
        Env {
            text: &self.text,
            samples: &self.samples,
            model: &self.model,
            settings: &self.settings,
        }
    }

    /// Every client starts from the same global shared prompt and its own
    /// private prompt; class tokens are bound to the dataset prototypes.
    pub fn init_federation(&self) -> Result<(Vec<ClientState>, ServerState)> {
        let cfg = &self.config;
        let seeds = Seeds::derive(cfg.seed, cfg.clients);
        let k = self.data.n_classes();
        let global = init_prompts(
            cfg.shared_len,
            cfg.private_len,
            cfg.embed_dim,
            k,
            seeds.global_prompt,
        )?
        .shared;
        let mut clients = Vec::with_capacity(cfg.clients);
        for (id, split) in self.partition.clients.iter().enumerate() {
            let own = init_prompts(
                cfg.shared_len,
                cfg.private_len,
                cfg.embed_dim,
                k,
                seeds.clients[id],
            )?;
            let prompts =
                PromptSet::from_parts(global.clone(), own.private, self.data.class_embeddings())?;
            clients.push(ClientState {
                id,
                prompts,
                train: split.train.clone(),
                test: split.test.clone(),
                seed: cfg.seed,
            });
        }
        check_disjoint(&clients, self.samples.len())?;
        let sizes: Vec<usize> = clients.iter().map(ClientState::data_size).collect();
        let server = ServerState::new(global, &sizes, cfg.literal_mean)?;
        Ok((clients, server))
    }
}

pub struct RunOutcome {
    pub history: History,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
}

impl RunOutcome {
    /// Mean client test accuracy after the last round (initial prompts if no
    /// round ran).
    pub fn final_mean_accuracy(&self, world: &World) -> Result<f64> {
        if let Some(acc) = self.history.final_mean_accuracy() {
            return Ok(acc);
        }
        let env = world.env();
        let accs = self
            .clients
            .iter()
            .map(|c| accuracy(&personalized(c, &self.server.global_shared), &c.test, &env))
            .collect::<Result<Vec<_>>>()?;
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Trains in memory without touching the filesystem.
pub fn train(world: &World) -> Result<RunOutcome> {
    let (mut clients, mut server) = world.init_federation()?;
    let history = run_rounds(&mut clients, &mut server, world.config.rounds, &world.env())?;
    Ok(RunOutcome {
        history,
        clients,
        server,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Seeds,
    pub version: String,
}

/// Reads `manifest.json` from a run directory.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest.json: {e}")))
}

pub fn write_history_csv(history: &History, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_COLUMNS)?;
    for r in &history.rows {
        w.write_record([
            r.round.to_string(),
            r.client_id.to_string(),
            r.accuracy.to_string(),
            r.ce.to_string(),
            r.dpac.to_string(),
            r.bytes_up.to_string(),
            r.bytes_down.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn save_checkpoints(outcome: &RunOutcome, n_classes: usize, dir: &Path) -> Result<()> {
    let ckpt = |role, values: &Array2<f64>| Checkpoint {
        role,
        n_classes,
        values: values.clone(),
    };
    write_checkpoint(
        &dir.join("global_shared.bin"),
        &ckpt(CheckpointRole::Shared, &outcome.server.global_shared.0),
    )?;
    if let Some(first) = outcome.clients.first() {
        write_checkpoint(
            &dir.join("class_embeddings.bin"),
            &ckpt(
                CheckpointRole::ClassEmbeddings,
                &first.prompts.class_embeddings().to_owned(),
            ),
        )?;
    }
    for c in &outcome.clients {
        write_checkpoint(
            &dir.join(format!("client_{}_private.bin", c.id)),
            &ckpt(CheckpointRole::Private, &c.prompts.private.0),
        )?;
    }
    Ok(())
}

/// Trains and writes history, manifest and checkpoints into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let world = World::build(config)?;
    let outcome = train(&world)?;
    std::fs::create_dir_all(out_dir)?;
    write_history_csv(&outcome.history, &out_dir.join("history.csv"))?;
    let manifest = Manifest {
        config: config.clone(),
        config_hash: config.hash()?,
        seeds: Seeds::derive(config.seed, config.clients),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    save_checkpoints(&outcome, world.data.n_classes(), out_dir)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_client: Vec<f64>,
    pub mean_accuracy: f64,
    pub prediction_path: String,
}

fn load_role(
    path: &Path,
    role: CheckpointRole,
    expected: (usize, usize),
    tensor: &str,
) -> Result<Array2<f64>> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.role != role {
        return Err(Error::Parse(format!(
            "{} holds a {:?} checkpoint, expected {role:?}",
            path.display(),
            ckpt.role
        )));
    }
    if ckpt.values.dim() != expected {
        return Err(Error::Shape {
            tensor: tensor.into(),
            expected: format!("{expected:?}"),
            found: format!("{:?}", ckpt.values.dim()),
        });
    }
    Ok(ckpt.values)
}

/// Test accuracy of every client from checkpoints in `dir`.
pub fn evaluate(config: &ExperimentConfig, dir: &Path) -> Result<Metrics> {
    let world = World::build(config)?;
    let (clients, _) = world.init_federation()?;
    let k = world.data.n_classes();
    let e = config.embed_dim;
    let global = load_role(
        &dir.join("global_shared.bin"),
        CheckpointRole::Shared,
        (config.shared_len, e),
        "global_shared",
    )?;
    let classes = load_role(
        &dir.join("class_embeddings.bin"),
        CheckpointRole::ClassEmbeddings,
        (k, e),
        "class_embeddings",
    )?;
    let env = world.env();
    let mut per_client = Vec::with_capacity(clients.len());
    for c in &clients {
        let private = load_role(
            &dir.join(format!("client_{}_private.bin", c.id)),
            CheckpointRole::Private,
            (config.private_len, e),
            &format!("client_{}_private", c.id),
        )?;
        let prompts = PromptSet::from_parts(
            SharedPrompt(global.clone()),
            PrivatePrompt(private),
            classes.clone(),
        )?;
        per_client.push(accuracy(&prompts, &c.test, &env)?);
    }
    let mean_accuracy = per_client.iter().sum::<f64>() / per_client.len() as f64;
    Ok(Metrics {
        per_client,
        mean_accuracy,
        prediction_path: if config.cmfac { "transport" } else { "softmax" }.into(),
    })
}
