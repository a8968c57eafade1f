//! Federated orchestration: client sampling, local training, weighted
//! aggregation, evaluation, and the round loop with checkpoint/resume.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::features::{slice_store, ClientAnchors, FeatureStore};
use crate::losses::{prox_grad_into, total_loss_grad, Anchors, LossBreakdown, LossWeights};
use crate::nn::{build_model, load_checkpoint, save_checkpoint, BackboneSpec, ClientModel, Tensor};
use crate::partition::PartitionMap;
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Semanticfl,
    Fedavg,
    Fedprox,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Semanticfl => "semanticfl",
            Self::Fedavg => "fedavg",
            Self::Fedprox => "fedprox",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semanticfl" => Ok(Self::Semanticfl),
            "fedavg" => Ok(Self::Fedavg),
            "fedprox" => Ok(Self::Fedprox),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

fn d_clients() -> usize {
    5
}
fn d_epochs() -> usize {
    10
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_batch() -> usize {
    64
}
fn d_wd() -> f64 {
    1e-5
}
fn d_algorithm() -> Algorithm {
    Algorithm::Semanticfl
}
fn d_decay() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    #[serde(default = "d_clients")]
    pub clients_per_round: usize,
    #[serde(default = "d_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    /// Multiplier applied to `lr` after every round; 1 keeps it constant.
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            clients_per_round: d_clients(),
            local_epochs: d_epochs(),
            lr: d_lr(),
            momentum: d_momentum(),
            batch_size: d_batch(),
            weight_decay: d_wd(),
            algorithm: d_algorithm(),
            weights: LossWeights::default(),
            seed: 0,
            lr_decay: d_decay(),
        }
    }
}

impl RoundConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        let problems = self.problems(num_clients);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Every violated constraint, as messages.
    pub fn problems(&self, num_clients: usize) -> Vec<String> {
        let mut p = Vec::new();
        if self.clients_per_round == 0 || self.clients_per_round > num_clients {
            p.push(format!(
                "clients_per_round must be in 1..={num_clients}, got {}",
                self.clients_per_round
            ));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            p.push("local_epochs and batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            p.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            p.push("weight_decay must be non-negative".into());
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            p.push("lr_decay must be positive".into());
        }
        if let Err(Error::InvalidInput(m)) = self.weights.validate() {
            p.push(m);
        }
        p
    }

    /// The objective actually optimized: FedAvg drops the semantic terms, FedProx
    /// keeps only the proximal one, SemanticFL drops the proximal one.
    pub fn effective_weights(&self) -> LossWeights {
        let w = &self.weights;
        match self.algorithm {
            Algorithm::Semanticfl => LossWeights { mu_prox: 0.0, ..w.clone() },
            Algorithm::Fedavg => LossWeights {
                mu_prox: 0.0,
                ..LossWeights::cross_entropy_only()
            },
            Algorithm::Fedprox => LossWeights {
                mu_prox: w.mu_prox,
                ..LossWeights::cross_entropy_only()
            },
        }
    }

    pub fn needs_anchors(&self) -> bool {
        let w = self.effective_weights();
        w.lambda_kd != 0.0 || w.lambda_con != 0.0
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi(round.saturating_sub(1) as i32)
    }
}

/// Uniform draw of `m` of `k` clients without replacement, sorted ascending.
pub fn select_clients(k: usize, m: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > k {
        return invalid(format!("cannot select {m} of {k} clients"));
    }
    let mut rng = rng_from(seed, &[stream::SELECT, round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, k, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: Vec<f64>,
    pub num_samples: usize,
    /// Sample-weighted mean breakdown of each local epoch.
    pub loss_trace: Vec<LossBreakdown>,
}

/// What one client holds during a round.
#[derive(Debug, Clone, Copy)]
pub struct ClientData<'a> {
    pub client_id: usize,
    pub dataset: &'a Dataset,
    pub indices: &'a [usize],
    /// Visual rows aligned with `indices`, plus the text anchors.
    pub anchors: Option<&'a ClientAnchors>,
}

/// Mini-batch SGD with momentum and weight decay starting from `global`.
///
/// `model` is scratch space; its parameters are overwritten. The update
/// `g = grad + wd * w; v = m * v + g; w -= lr * v` matches the common
/// deep-learning convention. Normalization buffers are never decayed or
/// stepped; they follow the batch statistics.
pub fn local_train(model: &mut ClientModel, global: &[f64], client: ClientData<'_>, cfg: &RoundConfig, round: usize) -> Result<ClientUpdate> {
    let n = client.indices.len();
    if n == 0 {
        return invalid(format!("client {} has no samples", client.client_id));
    }
    let weights = cfg.effective_weights();
    let (visual, text) = if cfg.needs_anchors() {
        let a = client
            .anchors
            .ok_or_else(|| Error::State(format!("client {} has no semantic anchors", client.client_id)))?;
        if a.visual.sample_ids != client.indices {
            return Err(Error::State(format!(
                "anchors for client {} do not cover its samples",
                client.client_id
            )));
        }
        (Some(&a.visual), Some(a.text.to_tensor()))
    } else {
        (None, None)
    };
    model.set_params(global)?;
    let mask = model.trainable_mask();
    let lr = cfg.lr_at(round);
    let mut velocity = vec![0.0; global.len()];
    let mut rng = rng_from(cfg.seed, &[stream::CLIENT, round as u64, client.client_id as u64]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.local_epochs);
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let ids: Vec<usize> = batch.iter().map(|&p| client.indices[p]).collect();
            let x = client.dataset.batch(&ids);
            let labels = client.dataset.labels_of(&ids);
            let visual_rows = visual.map(|v| v.rows_tensor(batch));
            let anchors = Anchors {
                visual: visual_rows.as_ref(),
                text: text.as_ref(),
            };
            let (out, cache) = model.forward_train(&x)?;
            let (loss, grads) = total_loss_grad(&out, anchors, &labels, &weights)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    client: client.client_id,
                    epoch,
                });
            }
            let mut grad = model.backward(&cache, &grads.logits, &grads.features);
            if weights.mu_prox != 0.0 {
                prox_grad_into(model.params(), global, weights.mu_prox, &mut grad)?;
            }
            model.update_buffers(&cache);
            let params = model.params_mut();
            for i in 0..params.len() {
                if !mask[i] {
                    continue;
                }
                let g = grad[i] + cfg.weight_decay * params[i];
                velocity[i] = cfg.momentum * velocity[i] + g;
                params[i] -= lr * velocity[i];
            }
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged {
                    client: client.client_id,
                    epoch,
                });
            }
            let b = batch.len() as f64;
            sum.ce += loss.ce * b;
            sum.kd += loss.kd * b;
            sum.con += loss.con * b;
            sum.total += loss.total * b;
        }
        let n = n as f64;
        trace.push(LossBreakdown {
            ce: sum.ce / n,
            kd: sum.kd / n,
            con: sum.con / n,
            total: sum.total / n,
        });
    }
    Ok(ClientUpdate {
        client_id: client.client_id,
        params: model.params().to_vec(),
        num_samples: n,
        loss_trace: trace,
    })
}

/// `n_k / sum(n)` for each update.
pub fn aggregation_weights(updates: &[ClientUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    updates.iter().map(|u| u.num_samples as f64 / total as f64).collect()
}

/// Sample-count-weighted mean of the client parameter vectors.
///
/// Computed as `w_0 + sum_k c_k (w_k - w_0)` so identical inputs come back
/// bit-exact, then clamped to the per-coordinate client range to absorb
/// rounding.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let first = match updates.first() {
        Some(u) => u,
        None => return invalid("no client updates to aggregate"),
    };
    let len = first.params.len();
    if let Some(u) = updates.iter().find(|u| u.params.len() != len) {
        return invalid(format!(
            "client {} sent {} parameters, expected {len}",
            u.client_id,
            u.params.len()
        ));
    }
    if let Some(u) = updates.iter().find(|u| u.num_samples == 0) {
        return invalid(format!("client {} reports zero samples", u.client_id));
    }
    let coef = aggregation_weights(updates);
    let mut out = first.params.clone();
    for (u, c) in updates.iter().zip(&coef).skip(1) {
        for (o, (w, w0)) in out.iter_mut().zip(u.params.iter().zip(&first.params)) {
            *o += c * (w - w0);
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        let (lo, hi) = updates
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| (lo.min(u.params[j]), hi.max(u.params[j])));
        *o = o.clamp(lo, hi);
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub const EVAL_BATCH: usize = 256;

/// Top-1 accuracy of `params` on `test`.
pub fn evaluate(model: &mut ClientModel, params: &[f64], test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return invalid("empty test set");
    }
    model.set_params(params)?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let out = model.forward(&test.batch(chunk))?;
        let c = out.logits.shape[1];
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(&out.logits.data[r * c..(r + 1) * c]) == test.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Normalized eval-mode features of `indices`, `n x d`.
pub fn embed(model: &mut ClientModel, params: &[f64], data: &Dataset, indices: &[usize]) -> Result<Tensor> {
    model.set_params(params)?;
    let mut rows = Vec::new();
    let mut d = 0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let out = model.forward(&data.batch(chunk))?;
        d = out.features.shape[1];
        rows.extend(out.features.data);
    }
    Ok(Tensor {
        shape: [indices.len(), d, 1, 1],
        data: rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub test_acc: f64,
    /// Means over participating clients of their last local epoch.
    pub mean_ce: f64,
    pub mean_kd: f64,
    pub mean_con: f64,
    pub clients: Vec<usize>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub round: usize,
    pub params: Vec<f64>,
    pub history: Vec<MetricsRecord>,
}

impl GlobalState {
    pub fn new(params: Vec<f64>) -> Self {
        Self {
            round: 0,
            params,
            history: Vec::new(),
        }
    }
}

/// Everything a run reads but never mutates.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub spec: &'a BackboneSpec,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub partition: &'a PartitionMap,
    pub store: Option<&'a FeatureStore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RoundCheckpoint {
    round: usize,
    seed: u64,
    config_hash: String,
    history: Vec<MetricsRecord>,
}

const STATE_JSON: &str = "state.json";
const GLOBAL_DIR: &str = "global";

/// Writes the orchestration record and global parameters into `dir`.
pub fn save_round_checkpoint(dir: &Path, spec: &BackboneSpec, state: &GlobalState, seed: u64, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&dir.join(GLOBAL_DIR), spec, &state.params)?;
    let record = RoundCheckpoint {
        round: state.round,
        seed,
        config_hash: config_hash.to_string(),
        history: state.history.clone(),
    };
    let tmp = dir.join("state.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, dir.join(STATE_JSON)).map_err(|e| Error::io(dir, e))
}

/// Reads a round checkpoint if one exists; rejects checkpoints of other configs.
pub fn load_round_checkpoint(dir: &Path, config_hash: &str) -> Result<Option<GlobalState>> {
    let path = dir.join(STATE_JSON);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let record: RoundCheckpoint = serde_json::from_slice(&text)?;
    if record.config_hash != config_hash {
        return Err(Error::State(format!(
            "checkpoint in {} belongs to config {}, not {config_hash}",
            dir.display(),
            record.config_hash
        )));
    }
    let (_, params) = load_checkpoint(&dir.join(GLOBAL_DIR))?;
    Ok(Some(GlobalState {
        round: record.round,
        params,
        history: record.history,
    }))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Checkpoint after every round here, and resume from it when present.
    pub checkpoint_dir: Option<&'a Path>,
    pub config_hash: String,
    /// Stop after this many rounds in this call, for interruption tests.
    pub max_new_rounds: Option<usize>,
}

/// Advances `state` until it has completed `rounds` rounds.
pub fn run_rounds(mut state: GlobalState, fed: Federation<'_>, cfg: &RoundConfig, rounds: usize, opts: &RunOptions<'_>) -> Result<GlobalState> {
    let k = fed.partition.num_clients();
    cfg.validate(k)?;
    if cfg.needs_anchors() && fed.store.is_none() {
        return Err(Error::State("semantic objective needs a feature store".into()));
    }
    if let Some(dir) = opts.checkpoint_dir {
        if let Some(saved) = load_round_checkpoint(dir, &opts.config_hash)? {
            if saved.round > state.round {
                log::info!("resuming from round {} in {}", saved.round, dir.display());
                state = saved;
            }
        }
    }
    let mut eval_model = build_model(fed.spec)?;
    if state.params.len() != eval_model.param_len() {
        return invalid("global parameter length does not match the backbone");
    }
    let mut done = 0;
    while state.round < rounds {
        if opts.max_new_rounds.is_some_and(|m| done >= m) {
            break;
        }
        let r = state.round + 1;
        let start = Instant::now();
        let selected = select_clients(k, cfg.clients_per_round, r, cfg.seed)?;
        let anchors: Vec<Option<ClientAnchors>> = selected
            .iter()
            .map(|&c| match (cfg.needs_anchors(), fed.store) {
                (true, Some(store)) => slice_store(store, &fed.partition.client_indices[c]).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        let global = &state.params;
        let mut updates: Vec<ClientUpdate> = selected
            .par_iter()
            .zip(anchors.par_iter())
            .map(|(&c, a)| {
                let mut model = build_model(fed.spec)?;
                let client = ClientData {
                    client_id: c,
                    dataset: fed.train,
                    indices: &fed.partition.client_indices[c],
                    anchors: a.as_ref(),
                };
                local_train(&mut model, global, client, cfg, r)
            })
            .collect::<Result<_>>()?;
        updates.sort_by_key(|u| u.client_id);
        let params = fedavg_aggregate(&updates)?;
        let acc = evaluate(&mut eval_model, &params, fed.test)?;
        let m = updates.len() as f64;
        let last = |f: fn(&LossBreakdown) -> f64| updates.iter().map(|u| f(u.loss_trace.last().expect("epochs > 0"))).sum::<f64>() / m;
        state.history.push(MetricsRecord {
            round: r,
            test_acc: acc,
            mean_ce: last(|b| b.ce),
            mean_kd: last(|b| b.kd),
            mean_con: last(|b| b.con),
            clients: selected,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        state.params = params;
        state.round = r;
        done += 1;
        log::info!("round {r}/{rounds}: test_acc={acc:.4}");
        if let Some(dir) = opts.checkpoint_dir {
            save_round_checkpoint(dir, fed.spec, &state, cfg.seed, &opts.config_hash)?;
        }
    }
    Ok(state)
}

/// Fresh global state from the backbone's seeded initialization.
pub fn initial_state(spec: &BackboneSpec) -> Result<GlobalState> {
    Ok(GlobalState::new(build_model(spec)?.params().to_vec()))
}
