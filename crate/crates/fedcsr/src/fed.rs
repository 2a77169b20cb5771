//! Federated training rounds over a simulated message channel.
//!
//! Each round the server broadcasts its parameters, every client installs
//! them, trains its visual model (and shared embedding) locally with the
//! sequence model frozen, and uploads serialized parameters back. The
//! server averages the uploads in client-id order, then, for the mutual
//! distillation method, trains the sequence model and embedding on its
//! text corpus against the aggregated visual model as a fixed teacher.
//! Only serialized parameter payloads and scalar loss traces ever cross
//! the channel; samples stay on their client.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{CuedSample, DatasetSplit, Sentence};
use crate::eval::{evaluate, DecodeHead, RoundMetrics};
use crate::loss::{
    client_batch_objective, server_batch_objective, ClientLossCfg, LossBreakdown, LossError,
    SampleView,
};
use crate::nn::{
    floats_to_le_bytes, le_bytes_to_floats, teacher_text_forward, ModelBundle, ModelConfig,
    NnError, Optimizer, Partition, Session,
};
use crate::rng::SeedStream;
use crate::tensor::{AdamHyper, Tape, Tensor, TensorError};

/// Training protocol variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedCsr,
    FedAvg,
    FedProx,
    FedBn,
    Centralized,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::FedCsr => "fedcsr",
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedBn => "fedbn",
            Method::Centralized => "centralized",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fedcsr" => Ok(Method::FedCsr),
            "fedavg" => Ok(Method::FedAvg),
            "fedprox" => Ok(Method::FedProx),
            "fedbn" => Ok(Method::FedBn),
            "centralized" => Ok(Method::Centralized),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

/// Everything a single experiment run needs beyond the data and model dims.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub batch_size: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub method: Method,
    pub seed: u64,
    pub decode_head: DecodeHead,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub freeze_phi_locally: bool,
    pub gamma_trains_phi: bool,
    pub skip_global_train: bool,
    pub weighted_mean: bool,
    pub record_wall_time: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        let adam = AdamHyper::with_lr(0.0);
        RoundConfig {
            rounds: 10,
            local_epochs: 1,
            global_epochs: 10,
            batch_size: 8,
            local_lr: 1e-3,
            global_lr: 1e-4,
            alpha: 0.005,
            beta: 0.005,
            gamma: 0.5,
            mu: 0.01,
            method: Method::FedCsr,
            seed: 1,
            decode_head: DecodeHead::Mean,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            freeze_phi_locally: false,
            gamma_trains_phi: false,
            skip_global_train: false,
            weighted_mean: false,
            record_wall_time: false,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.rounds == 0 {
            return Err("rounds must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return Err("local_epochs must be at least 1".into());
        }
        if self.global_epochs == 0 {
            return Err("global_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("local_lr", self.local_lr),
            ("global_lr", self.global_lr),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu", self.mu),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    fn client_loss_cfg(&self) -> ClientLossCfg {
        let distill = self.method == Method::FedCsr;
        ClientLossCfg {
            alpha: if distill { self.alpha } else { 0.0 },
            gamma: if distill { self.gamma } else { 0.0 },
            mu: if self.method == Method::FedProx {
                self.mu
            } else {
                0.0
            },
            linguistic_path: distill,
            gamma_trains_phi: self.gamma_trains_phi,
        }
    }
}

/// Server -> client payload: current parameters, serialized.
#[derive(Debug, Clone)]
pub struct BroadcastMessage {
    pub round: usize,
    pub phi: Vec<u8>,
    pub theta: Vec<u8>,
    pub w: Vec<u8>,
}

/// Client -> server payload: updated parameters plus scalar diagnostics.
#[derive(Debug, Clone)]
pub struct UpdateMessage {
    pub client: usize,
    pub w: Vec<u8>,
    pub phi: Vec<u8>,
    pub samples: usize,
    pub loss_trace: Vec<f64>,
    pub steps: u64,
    pub losses: LossTotals,
}

/// Sums of loss components over optimizer steps, for round reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTotals {
    pub ctc_vis: f64,
    pub ctc_lin: f64,
    pub gamma: f64,
    pub kd: f64,
    pub ce: f64,
    pub batches: usize,
}

impl LossTotals {
    fn absorb(&mut self, b: &LossBreakdown) {
        self.ctc_vis += b.ctc_vis.unwrap_or(0.0);
        self.ctc_lin += b.ctc_lin.unwrap_or(0.0);
        self.gamma += b.ctc_teacher_path.unwrap_or(0.0);
        self.kd += b.kd.unwrap_or(0.0);
        self.ce += b.ce.unwrap_or(0.0);
        self.batches += 1;
    }

    fn merge(&mut self, other: &LossTotals) {
        self.ctc_vis += other.ctc_vis;
        self.ctc_lin += other.ctc_lin;
        self.gamma += other.gamma;
        self.kd += other.kd;
        self.ce += other.ce;
        self.batches += other.batches;
    }

    fn mean(&self, field: f64) -> f64 {
        if self.batches == 0 {
            0.0
        } else {
            field / self.batches as f64
        }
    }
}

/// In-process queue of serialized messages; the only client/server link.
#[derive(Debug, Default)]
pub struct Channel {
    broadcasts: VecDeque<BroadcastMessage>,
    updates: VecDeque<UpdateMessage>,
    pub broadcasts_sent: usize,
    pub updates_sent: usize,
}

impl Channel {
    pub fn send_broadcast(&mut self, msg: BroadcastMessage) {
        self.broadcasts_sent += 1;
        self.broadcasts.push_back(msg);
    }

    pub fn recv_broadcast(&mut self) -> Option<BroadcastMessage> {
        self.broadcasts.pop_front()
    }

    pub fn send_update(&mut self, msg: UpdateMessage) {
        self.updates_sent += 1;
        self.updates.push_back(msg);
    }

    pub fn recv_update(&mut self) -> Option<UpdateMessage> {
        self.updates.pop_front()
    }
}

/// Protocol failures surface as typed errors; training NaNs arrive as
/// `LossError::Numeric` naming the offending term.
#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("loss: {0}")]
    Loss(#[from] LossError),
    #[error("payload: {0}")]
    Nn(#[from] NnError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
}

/// The server holds the model, the text corpus, and its optimizer state;
/// it never holds a client sample.
pub struct ServerState {
    pub bundle: ModelBundle,
    pub corpus: Vec<Sentence>,
    pub round: usize,
    opt: Optimizer,
}

impl ServerState {
    pub fn new(bundle: ModelBundle, corpus: Vec<Sentence>, cfg: &RoundConfig) -> ServerState {
        let mut ids = bundle.partition_ids(Partition::Linguistic);
        ids.extend(bundle.partition_ids(Partition::Embedding));
        let opt = Optimizer::new(&bundle.store, ids, cfg.adam(cfg.global_lr));
        ServerState {
            bundle,
            corpus,
            round: 0,
            opt,
        }
    }

    pub fn broadcast(&self) -> BroadcastMessage {
        BroadcastMessage {
            round: self.round,
            phi: floats_to_le_bytes(&self.bundle.serialize(Partition::Embedding)),
            theta: floats_to_le_bytes(&self.bundle.serialize(Partition::Linguistic)),
            w: floats_to_le_bytes(&self.bundle.serialize(Partition::Visual)),
        }
    }
}

/// One client: its private samples and a working copy of the model.
pub struct ClientState {
    pub id: usize,
    pub data: Vec<CuedSample>,
    pub bundle: ModelBundle,
    norm_values: Option<Vec<f64>>,
}

impl ClientState {
    pub fn new(id: usize, data: Vec<CuedSample>, bundle: ModelBundle) -> ClientState {
        assert!(!data.is_empty(), "client {id} holds no samples");
        ClientState {
            id,
            data,
            bundle,
            norm_values: None,
        }
    }

    fn install_broadcast(&mut self, msg: &BroadcastMessage) -> Result<(), NnError> {
        self.bundle
            .install(Partition::Embedding, &le_bytes_to_floats(&msg.phi)?)?;
        self.bundle
            .install(Partition::Linguistic, &le_bytes_to_floats(&msg.theta)?)?;
        self.bundle
            .install(Partition::Visual, &le_bytes_to_floats(&msg.w)?)?;
        Ok(())
    }

    fn restore_local_norms(&mut self) -> Result<(), NnError> {
        let Some(saved) = &self.norm_values else {
            return Ok(());
        };
        let mask = self.bundle.visual_norm_mask();
        let mut w = self.bundle.serialize(Partition::Visual);
        let mut k = 0;
        for (slot, keep) in w.iter_mut().zip(&mask) {
            if *keep {
                *slot = saved[k];
                k += 1;
            }
        }
        self.bundle.install(Partition::Visual, &w)
    }

    fn save_local_norms(&mut self) {
        let mask = self.bundle.visual_norm_mask();
        let w = self.bundle.serialize(Partition::Visual);
        self.norm_values = Some(
            w.iter()
                .zip(&mask)
                .filter(|(_, keep)| **keep)
                .map(|(v, _)| *v)
                .collect(),
        );
    }
}

/// Installs the broadcast, runs `local_epochs` of minibatch Adam on the
/// client objective with the sequence model frozen, and returns the
/// updated visual and embedding parameters.
pub fn local_train(
    client: &mut ClientState,
    msg: &BroadcastMessage,
    cfg: &RoundConfig,
) -> Result<UpdateMessage, FedError> {
    client.install_broadcast(msg)?;
    if cfg.method == Method::FedBn {
        client.restore_local_norms()?;
    }
    let w_ref = if cfg.method == Method::FedProx && cfg.mu != 0.0 {
        Some(client.bundle.serialize(Partition::Visual))
    } else {
        None
    };

    let mut ids = client.bundle.partition_ids(Partition::Visual);
    if !cfg.freeze_phi_locally {
        ids.extend(client.bundle.partition_ids(Partition::Embedding));
    }
    let mut opt = Optimizer::new(&client.bundle.store, ids, cfg.adam(cfg.local_lr));
    let loss_cfg = cfg.client_loss_cfg();

    let n = client.data.len();
    let mut loss_trace = Vec::with_capacity(cfg.local_epochs);
    let mut totals = LossTotals::default();
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        SeedStream::derived(
            cfg.seed,
            &[8, client.id as u64, msg.round as u64, epoch as u64],
        )
        .shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let views: Vec<SampleView> = chunk.iter().map(|i| client.data[*i].view()).collect();
            let (breakdown, grads) =
                client_batch_objective(&client.bundle, &views, &loss_cfg, w_ref.as_deref())?;
            opt.step(&mut client.bundle.store, &grads);
            epoch_loss += breakdown.total;
            batches += 1;
            totals.absorb(&breakdown);
        }
        loss_trace.push(epoch_loss / batches as f64);
    }

    if cfg.method == Method::FedBn {
        client.save_local_norms();
    }
    Ok(UpdateMessage {
        client: client.id,
        w: floats_to_le_bytes(&client.bundle.serialize(Partition::Visual)),
        phi: floats_to_le_bytes(&client.bundle.serialize(Partition::Embedding)),
        samples: n,
        loss_trace,
        steps: opt.steps(),
        losses: totals,
    })
}

/// Weighted mean accumulated relative to the first payload, so identical
/// uploads average to themselves bitwise for any client count.
fn mean_payload(payloads: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let base = payloads[0].clone();
    let mut out = base.clone();
    for (p, w) in payloads.iter().zip(weights) {
        assert_eq!(p.len(), base.len(), "mismatched payload lengths");
        for ((o, v), b) in out.iter_mut().zip(p).zip(&base) {
            *o += w * (v - b);
        }
    }
    out
}

/// Coordinate-wise mean of the uploads in client-id order. Unweighted by
/// default; sample-count weights behind the flag. For the per-client
/// normalization variant, normalization coordinates keep `w_prev`.
pub fn aggregate(
    updates: &[UpdateMessage],
    cfg: &RoundConfig,
    w_prev: &[f64],
    norm_mask: &[bool],
) -> Result<(Vec<f64>, Vec<f64>), FedError> {
    if updates.is_empty() {
        return Err(FedError::Config(
            "aggregate needs at least one update".into(),
        ));
    }
    let mut sorted: Vec<&UpdateMessage> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let weights: Vec<f64> = if cfg.weighted_mean {
        let total: usize = sorted.iter().map(|u| u.samples).sum();
        sorted
            .iter()
            .map(|u| u.samples as f64 / total as f64)
            .collect()
    } else {
        vec![1.0 / sorted.len() as f64; sorted.len()]
    };
    let ws: Vec<Vec<f64>> = sorted
        .iter()
        .map(|u| le_bytes_to_floats(&u.w))
        .collect::<Result<_, _>>()?;
    let phis: Vec<Vec<f64>> = sorted
        .iter()
        .map(|u| le_bytes_to_floats(&u.phi))
        .collect::<Result<_, _>>()?;
    let mut w_agg = mean_payload(&ws, &weights);
    let phi_agg = mean_payload(&phis, &weights);
    if cfg.method == Method::FedBn {
        assert_eq!(
            norm_mask.len(),
            w_agg.len(),
            "norm mask covers the visual payload"
        );
        for ((slot, keep), prev) in w_agg.iter_mut().zip(norm_mask).zip(w_prev) {
            if *keep {
                *slot = *prev;
            }
        }
    }
    Ok((w_agg, phi_agg))
}

/// Precomputed distillation targets: one hidden-vector sequence per corpus
/// sentence, produced by the frozen post-aggregation visual model.
fn teacher_targets(bundle: &ModelBundle, corpus: &[Sentence]) -> Result<Vec<Tensor>, TensorError> {
    corpus
        .par_iter()
        .map(|s| {
            let tape = Tape::new();
            let sess = Session::inference(&tape, &bundle.store);
            Ok(teacher_text_forward(&sess, &bundle.cmml, &s.label)?.v_lin)
        })
        .collect()
}

/// Trains the sequence model and embedding on the text corpus for
/// `global_epochs`, distilling from the aggregated visual model. The
/// visual parameters stay untouched.
pub fn global_train(server: &mut ServerState, cfg: &RoundConfig) -> Result<LossTotals, FedError> {
    let teachers = teacher_targets(&server.bundle, &server.corpus)?;
    let n = server.corpus.len();
    let mut totals = LossTotals::default();
    for epoch in 0..cfg.global_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        SeedStream::derived(cfg.seed, &[9, server.round as u64, epoch as u64]).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[usize], &Tensor)> = chunk
                .iter()
                .map(|i| (server.corpus[*i].label.as_slice(), &teachers[*i]))
                .collect();
            let (breakdown, grads) = server_batch_objective(&server.bundle, &batch, cfg.beta)?;
            server.opt.step(&mut server.bundle.store, &grads);
            totals.absorb(&breakdown);
        }
    }
    Ok(totals)
}

fn score_row(
    server: &ServerState,
    test: &[CuedSample],
    cfg: &RoundConfig,
    round: usize,
    locals: LossTotals,
    globals: LossTotals,
    started: Option<Instant>,
) -> Result<RoundMetrics, FedError> {
    let score = evaluate(&server.bundle, test, cfg.decode_head)?;
    Ok(RoundMetrics {
        round,
        method: cfg.method.name().to_string(),
        local_epochs: cfg.local_epochs,
        seed: cfg.seed,
        cer: score.cer,
        wer: score.wer,
        loss_ctc_vis: locals.mean(locals.ctc_vis),
        loss_ctc_lin: locals.mean(locals.ctc_lin),
        loss_gamma: locals.mean(locals.gamma),
        loss_kd: locals.mean(locals.kd),
        loss_ce_server: globals.mean(globals.ce),
        wall_s: started.map_or(0.0, |t| t.elapsed().as_secs_f64()),
    })
}

/// One full round: broadcast, parallel local training, aggregation, the
/// distillation method's global pass, then evaluation on the test set.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    channel: &mut Channel,
    test: &[CuedSample],
    cfg: &RoundConfig,
) -> Result<RoundMetrics, FedError> {
    let started = cfg.record_wall_time.then(Instant::now);
    for _ in 0..clients.len() {
        channel.send_broadcast(server.broadcast());
    }
    let msgs: Vec<BroadcastMessage> = (0..clients.len())
        .map(|_| {
            channel
                .recv_broadcast()
                .expect("broadcast for every client")
        })
        .collect();

    let updates: Vec<UpdateMessage> = clients
        .par_iter_mut()
        .zip(msgs)
        .map(|(client, msg)| local_train(client, &msg, cfg))
        .collect::<Result<_, _>>()?;
    for u in updates {
        channel.send_update(u);
    }
    let mut received = Vec::with_capacity(clients.len());
    while let Some(u) = channel.recv_update() {
        received.push(u);
    }

    let w_prev = server.bundle.serialize(Partition::Visual);
    let norm_mask = server.bundle.visual_norm_mask();
    let (w_agg, phi_agg) = aggregate(&received, cfg, &w_prev, &norm_mask)?;
    server.bundle.install(Partition::Visual, &w_agg)?;
    server.bundle.install(Partition::Embedding, &phi_agg)?;

    let mut locals = LossTotals::default();
    for u in &received {
        locals.merge(&u.losses);
    }
    let globals = if cfg.method == Method::FedCsr && !cfg.skip_global_train {
        global_train(server, cfg)?
    } else {
        LossTotals::default()
    };

    server.round += 1;
    score_row(server, test, cfg, server.round, locals, globals, started)
}

/// Runs an untrained round-0 evaluation followed by `rounds` full rounds
/// against an already-built server and client set.
pub fn run_rounds(
    server: &mut ServerState,
    clients: &mut [ClientState],
    test: &[CuedSample],
    cfg: &RoundConfig,
) -> Result<Vec<RoundMetrics>, FedError> {
    cfg.validate().map_err(FedError::Config)?;
    let mut channel = Channel::default();
    let mut rows = Vec::with_capacity(cfg.rounds + 1);
    let started = cfg.record_wall_time.then(Instant::now);
    rows.push(score_row(
        server,
        test,
        cfg,
        0,
        LossTotals::default(),
        LossTotals::default(),
        started,
    )?);
    for _ in 0..cfg.rounds {
        rows.push(run_round(server, clients, &mut channel, test, cfg)?);
    }
    Ok(rows)
}

/// Builds server and clients from a model seed and split; the pooled
/// method gets a single pseudo-client holding every client's data.
pub fn build_world(
    split: &DatasetSplit,
    model: &ModelConfig,
    cfg: &RoundConfig,
) -> (ServerState, Vec<ClientState>) {
    let bundle = ModelBundle::init(model, crate::rng::derive_seed(cfg.seed, &[10]));
    let server = ServerState::new(bundle.clone(), split.server_corpus.clone(), cfg);
    let clients: Vec<ClientState> = if cfg.method == Method::Centralized {
        let pooled: Vec<CuedSample> = split.clients.iter().flatten().cloned().collect();
        vec![ClientState::new(0, pooled, bundle)]
    } else {
        split
            .clients
            .iter()
            .enumerate()
            .map(|(id, data)| ClientState::new(id, data.clone(), bundle.clone()))
            .collect()
    };
    (server, clients)
}

/// Builds server and clients from a split and runs `rounds` rounds,
/// prefixed with an untrained round-0 evaluation row.
pub fn run_experiment(
    split: &DatasetSplit,
    model: &ModelConfig,
    cfg: &RoundConfig,
) -> Result<Vec<RoundMetrics>, FedError> {
    let (mut server, mut clients) = build_world(split, model, cfg);
    run_rounds(&mut server, &mut clients, &split.test, cfg)
}
