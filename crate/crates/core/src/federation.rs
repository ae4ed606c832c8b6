//! Federated training: client selection, local SGD, and FedAvg.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::config::{ExperimentConfig, OptimizerConfig};
use crate::encoders::{build_world, FrozenTextHead, SyntheticWorld};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::partition::{build_client_dataset, partition_classes, ClientSpec, FewShotSet};
use crate::seed;
use crate::tensor::Tensor;
use crate::translator::{init_params, BoundTranslator, TranslatorConfig};

/// Cosine-annealed learning rate: `lr0 · ½(1 + cos(π t / T))`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("cosine schedule needs T >= 1"));
    }
    if t > total {
        return Err(Error::contract(format!("round {t} is past the schedule end {total}")));
    }
    let frac = t as f64 / total as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: ParameterSet,
}

impl OptimizerState {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        let mut velocity = ParameterSet::new();
        for (name, p) in params.iter() {
            velocity
                .insert(name.clone(), Tensor::zeros(p.value.shape()))
                .expect("names are unique in the source set");
        }
        OptimizerState { velocity }
    }

    pub fn velocity(&self, name: &str) -> Result<&Tensor> {
        self.velocity.value(name)
    }
}

/// One SGD step with coupled weight decay and classical momentum:
/// `g' = grad + wd·θ; v ← μ·v + g'; θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut ParameterSet,
    state: &mut OptimizerState,
    lr: f64,
    opt: &OptimizerConfig,
) -> Result<()> {
    if params.schema() != state.velocity.schema() {
        return Err(Error::Schema("optimizer state does not match parameters".into()));
    }
    for (name, p) in params.iter_mut() {
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` has no gradient")))?;
        let v = state.velocity.get_mut(name)?;
        let (theta, g) = (p.value.data_mut(), grad.data());
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.value.data_mut()) {
            let gd = gi + opt.weight_decay * *t;
            *vi = opt.momentum * *vi + gd;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// Frozen inputs for one class: its key/value rows and pooled embedding.
#[derive(Debug, Clone)]
pub struct ClassInput {
    pub kv: Tensor,
    pub embedding: Tensor,
}

impl ClassInput {
    /// Single-row input from a unit class embedding.
    pub fn pooled(embedding: &[f64]) -> Self {
        let row = Tensor::row(embedding);
        ClassInput {
            kv: row.clone(),
            embedding: row,
        }
    }
}

/// Text features `[K×d]` for a list of classes, recorded on `g`.
pub fn text_features_node(
    g: &mut Graph,
    bound: &BoundTranslator,
    head: &FrozenTextHead,
    classes: &[ClassInput],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(classes.len());
    for c in classes {
        let kv = g.constant(c.kv.clone())?;
        let ctx = bound.context_for(g, kv)?;
        let emb = g.constant(c.embedding.clone())?;
        rows.push(head.text_feature_node(g, ctx, emb)?);
    }
    g.concat_rows(&rows)
}

/// Cross-entropy of `cos(img, txt)/τ` logits over `classes`.
pub fn batch_loss(
    g: &mut Graph,
    bound: &BoundTranslator,
    head: &FrozenTextHead,
    classes: &[ClassInput],
    images: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let txt = text_features_node(g, bound, head, classes)?;
    let img = g.constant(images.clone())?;
    let txt_t = g.transpose(txt)?;
    let cos = g.matmul(img, txt_t)?;
    let logits = g.scale(cos, 1.0 / temperature)?;
    g.cross_entropy(logits, labels)
}

/// Stacks a set of `[d]` features into a `[B×d]` matrix.
pub fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::dim("feature rows differ in length"));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), d], data)
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParameterSet,
    pub num_samples: usize,
    /// Mean pre-step batch loss over the local run.
    pub mean_loss: f64,
}

/// Everything one client needs for a local round.
pub struct LocalTask<'a> {
    pub client_id: usize,
    pub data: &'a FewShotSet,
    pub world: &'a SyntheticWorld,
    pub head: &'a FrozenTextHead,
    pub translator: &'a TranslatorConfig,
    pub optimizer: &'a OptimizerConfig,
    pub lr: f64,
    pub epochs: usize,
}

/// Trains a copy of `theta_global` on one client's data and returns it.
///
/// Momentum starts from zero every call. Each epoch reshuffles the
/// sample order with `rng` and walks it in batches of at most
/// `batch_size`; the label space is the client's own classes.
pub fn local_update(theta_global: &ParameterSet, task: &LocalTask<'_>, rng: &mut ChaCha8Rng) -> Result<ClientUpdate> {
    if task.data.is_empty() {
        return Err(Error::contract(format!("client {} has an empty dataset", task.client_id)));
    }
    if task.epochs == 0 {
        return Err(Error::contract("local epochs must be at least 1"));
    }
    let classes = task
        .data
        .class_map
        .iter()
        .map(|&c| Ok(ClassInput::pooled(task.world.class_embedding(c)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut theta = theta_global.clone();
    theta.zero_grads();
    let mut state = OptimizerState::zeros_like(&theta);
    let mut order: Vec<usize> = (0..task.data.len()).collect();
    let (mut loss_sum, mut steps) = (0.0, 0usize);

    for _ in 0..task.epochs {
        order.shuffle(rng);
        for batch in order.chunks(task.optimizer.batch_size) {
            let feats: Vec<&Tensor> = batch.iter().map(|&i| &task.data.features[i]).collect();
            let images = stack_rows(&feats)?;
            let labels: Vec<usize> = batch.iter().map(|&i| task.data.labels[i]).collect();

            let mut g = Graph::new();
            let bound = BoundTranslator::bind(&mut g, task.translator, &theta)?;
            let loss = batch_loss(
                &mut g,
                &bound,
                task.head,
                &classes,
                &images,
                &labels,
                task.optimizer.temperature,
            )?;
            loss_sum += g.value(loss).item()?;
            steps += 1;
            g.backward_into(loss, &mut theta)?;
            sgd_step(&mut theta, &mut state, task.lr, task.optimizer)?;
        }
    }
    theta.zero_grads();
    Ok(ClientUpdate {
        client_id: task.client_id,
        params: theta,
        num_samples: task.data.len(),
        mean_loss: loss_sum / steps as f64,
    })
}

/// Picks `max(1, round(fraction·N))` client ids, sorted ascending.
pub fn select_clients(n_clients: usize, fraction: f64, round: usize, seed_value: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("participation fraction {fraction} outside (0, 1]")));
    }
    if n_clients == 0 {
        return Err(Error::contract("no clients to select from"));
    }
    let count = ((fraction * n_clients as f64).round() as usize).clamp(1, n_clients);
    let mut rng = seed::rng_from(&[seed_value, seed::stream::SELECT, round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, n_clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Uniform coordinatewise mean of client parameters.
///
/// Updates are ordered by client id before aggregation, so arrival order
/// does not matter. The mean is accumulated incrementally
/// (`m ← m + (x − m)/k`), which returns identical inputs bit for bit.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParameterSet> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client updates to aggregate".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let mut seen = BTreeSet::new();
    for u in &sorted {
        if !seen.insert(u.client_id) {
            return Err(Error::Aggregation(format!("client {} submitted twice", u.client_id)));
        }
    }
    let first = sorted[0];
    let schema = first.params.schema();
    for u in &sorted[1..] {
        if u.params.schema() != schema {
            return Err(Error::Aggregation(format!(
                "client {} parameter schema differs from client {}",
                u.client_id, first.client_id
            )));
        }
    }
    let (mut mean, _) = first.params.flatten();
    for (k, u) in sorted.iter().enumerate().skip(1) {
        let (x, _) = u.params.flatten();
        let n = (k + 1) as f64;
        for (m, xi) in mean.iter_mut().zip(&x) {
            *m += (xi - *m) / n;
        }
    }
    ParameterSet::unflatten(&mean, &schema)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientLoss {
    pub client_id: usize,
    pub mean_loss: f64,
}

/// One line of the JSON-lines round log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub t: usize,
    pub lr: f64,
    pub selected: Vec<usize>,
    pub client_loss: Vec<ClientLoss>,
}

/// Frozen world, text head, partition and client datasets of a run.
pub struct Simulation {
    pub world: SyntheticWorld,
    pub head: FrozenTextHead,
    pub clients: Vec<ClientSpec>,
    pub datasets: Vec<FewShotSet>,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let world = build_world(&config.world)?;
        let head = FrozenTextHead::new(config.translator.d_model, config.derived_seed(seed::stream::HEAD))?;
        let f = &config.federation;
        let clients = partition_classes(
            &world.base_ids,
            f.n_clients,
            f.classes_per_client,
            config.derived_seed(seed::stream::PARTITION),
        )?;
        let data_seed = config.derived_seed(seed::stream::DATA);
        let datasets = clients
            .iter()
            .map(|c| build_client_dataset(&world, c, f.shots, data_seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Simulation {
            world,
            head,
            clients,
            datasets,
        })
    }

    pub fn initial_params(&self, config: &ExperimentConfig) -> Result<ParameterSet> {
        init_params(&config.translator, config.derived_seed(seed::stream::INIT))
    }

    /// Stream used by client `client_id` during round `t`.
    pub fn local_rng(config: &ExperimentConfig, t: usize, client_id: usize) -> ChaCha8Rng {
        seed::rng_from(&[config.master_seed, seed::stream::LOCAL, t as u64, client_id as u64])
    }

    pub fn task<'a>(&'a self, config: &'a ExperimentConfig, client_id: usize, lr: f64) -> LocalTask<'a> {
        LocalTask {
            client_id,
            data: &self.datasets[client_id],
            world: &self.world,
            head: &self.head,
            translator: &config.translator,
            optimizer: &config.optimizer,
            lr,
            epochs: config.federation.local_epochs,
        }
    }
}

pub struct TrainingOutcome {
    pub params: ParameterSet,
    pub logs: Vec<RoundLog>,
}

/// Runs all rounds. `on_round` sees the aggregated parameters after each
/// round and may abort the run by returning an error.
pub fn run_training_with<F>(config: &ExperimentConfig, sim: &Simulation, mut on_round: F) -> Result<TrainingOutcome>
where
    F: FnMut(&RoundLog, &ParameterSet) -> Result<()>,
{
    let f = &config.federation;
    let mut theta = sim.initial_params(config)?;
    let select_seed = config.derived_seed(seed::stream::SELECT);
    let mut logs = Vec::with_capacity(f.rounds);
    for t in 0..f.rounds {
        let lr = cosine_lr(config.optimizer.lr0, t, f.rounds)?;
        let selected = select_clients(f.n_clients, f.fraction, t, select_seed)?;
        let mut updates = Vec::with_capacity(selected.len());
        for &k in &selected {
            let mut rng = Simulation::local_rng(config, t, k);
            updates.push(local_update(&theta, &sim.task(config, k, lr), &mut rng)?);
        }
        theta = fedavg(&updates)?;
        let log = RoundLog {
            t,
            lr,
            selected,
            client_loss: updates
                .iter()
                .map(|u| ClientLoss {
                    client_id: u.client_id,
                    mean_loss: u.mean_loss,
                })
                .collect(),
        };
        on_round(&log, &theta)?;
        logs.push(log);
    }
    Ok(TrainingOutcome { params: theta, logs })
}

pub fn run_training(config: &ExperimentConfig) -> Result<TrainingOutcome> {
    let sim = Simulation::new(config)?;
    run_training_with(config, &sim, |_, _| Ok(()))
}
