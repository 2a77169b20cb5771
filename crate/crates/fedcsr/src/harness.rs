//! Experiment commands behind the CLI: seeded training runs, the
//! distillation-weight grid, leave-one-cuer-out evaluation, the derivative
//! check suite, and dataset export.
//!
//! Every command is a deterministic function of its config, writes its
//! output files whole (no appending), and reports failures through
//! [`HarnessError`], which carries the process exit code.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{self, CuedSample};
use crate::eval::RoundMetrics;
use crate::fed::{self, ClientState, FedError, Method, ServerState};
use crate::loss::{
    client_loss_graph, ctc_loss, fedprox_penalty, frame_ce, kd_loss, server_loss_graph,
    ClientLossCfg, LossError, SampleView,
};
use crate::nn::{
    embed_text, linguistic_forward, teacher_text_forward, visual_forward, ModelBundle, ModelConfig,
    NnError, ParamId, Session,
};
use crate::rng::{derive_seed, SeedStream};
use crate::tensor::{finite_difference_check, Tape, Tensor, TensorError};

/// Command failure carrying its CLI exit code: unusable input (2), numeric
/// trouble during training (3), a failed check (4).
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("numeric failure in {term}: {detail}")]
    Numeric { term: String, detail: String },
    #[error("{0}")]
    Check(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io(_) => 2,
            HarnessError::Numeric { .. } => 3,
            HarnessError::Check(_) => 4,
        }
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => HarnessError::Io(io),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl From<LossError> for HarnessError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Numeric { term, source } => HarnessError::Numeric {
                term,
                detail: source.to_string(),
            },
            other => HarnessError::Numeric {
                term: "loss".into(),
                detail: other.to_string(),
            },
        }
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        let term = match &e {
            TensorError::NonFinite { op } => op.clone(),
            _ => "tensor".into(),
        };
        HarnessError::Numeric {
            term,
            detail: e.to_string(),
        }
    }
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        HarnessError::Numeric {
            term: "payload".into(),
            detail: e.to_string(),
        }
    }
}

impl From<FedError> for HarnessError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::Config(msg) => HarnessError::Config(msg),
            FedError::Loss(l) => l.into(),
            FedError::Tensor(t) => t.into(),
            FedError::Nn(n) => n.into(),
        }
    }
}

/// Caps the global worker pool; 0 keeps the default size. Only the first
/// call in a process can take effect.
pub fn configure_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn write_csv<R>(
    path: &Path,
    header: &str,
    rows: &[R],
    line: impl Fn(&R) -> String,
) -> std::io::Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&line(row));
        text.push('\n');
    }
    fs::write(path, text)
}

/// Trains per seed and writes `metrics.csv` (one row per round per seed,
/// seed-major, round 0 is the untrained model) plus `summary.txt` with the
/// final-round scores. Returns all rows in file order.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RoundMetrics>, HarnessError> {
    cfg.validate().map_err(HarnessError::Config)?;
    let runs: Vec<Vec<RoundMetrics>> = cfg
        .run
        .seeds
        .par_iter()
        .map(|&seed| {
            let split = cfg.build_split(seed);
            fed::run_experiment(&split, &cfg.model, &cfg.round_config(seed))
        })
        .collect::<Result<_, FedError>>()?;
    fs::create_dir_all(out)?;
    let rows: Vec<RoundMetrics> = runs.iter().flatten().cloned().collect();
    write_csv(
        &out.join("metrics.csv"),
        RoundMetrics::csv_header(),
        &rows,
        |r| r.csv_row(),
    )?;
    fs::write(out.join("summary.txt"), summary_text(cfg, &runs))?;
    Ok(rows)
}

fn summary_text(cfg: &ExperimentConfig, runs: &[Vec<RoundMetrics>]) -> String {
    let mut s = format!(
        "# final-round test scores per seed; method={} rounds={} local_epochs={}\nseed,cer,wer\n",
        cfg.federation.method.name(),
        cfg.federation.rounds,
        cfg.federation.local_epochs
    );
    let (mut cer, mut wer) = (0.0, 0.0);
    for run in runs {
        let last = run.last().expect("every run emits the round-0 row");
        s.push_str(&format!("{},{:?},{:?}\n", last.seed, last.cer, last.wer));
        cer += last.cer;
        wer += last.wer;
    }
    let n = runs.len() as f64;
    s.push_str(&format!("mean,{:?},{:?}\n", cer / n, wer / n));
    s
}

/// The (alpha, beta, gamma) cells of the distillation-weight grid. The
/// all-zero cell also disables server-side training, making it the plain
/// parameter-averaging baseline.
pub const ABLATION_GRID: [(f64, f64, f64); 5] = [
    (0.0, 0.0, 0.0),
    (0.005, 0.0, 0.5),
    (0.005, 0.005, 0.0),
    (0.0, 0.0, 0.5),
    (0.005, 0.005, 0.5),
];

/// Final-round scores for one grid cell and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub cer: f64,
    pub wer: f64,
}

impl AblationRow {
    pub fn csv_header() -> &'static str {
        "alpha,beta,gamma,seed,cer,wer"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:?},{:?},{:?},{},{:?},{:?}",
            self.alpha, self.beta, self.gamma, self.seed, self.cer, self.wer
        )
    }
}

/// Runs the whole grid for every seed and writes `ablation.csv`, rows
/// ordered by (cell, seed). Each cell trains with the mutual-distillation
/// method and the cell's weights; everything else comes from the config.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>, HarnessError> {
    cfg.validate().map_err(HarnessError::Config)?;
    let mut jobs = Vec::new();
    for &cell in ABLATION_GRID.iter() {
        for &seed in &cfg.run.seeds {
            jobs.push((cell, seed));
        }
    }
    let rows: Vec<AblationRow> = jobs
        .par_iter()
        .map(|&((alpha, beta, gamma), seed)| {
            let mut rc = cfg.round_config(seed);
            rc.method = Method::FedCsr;
            rc.alpha = alpha;
            rc.beta = beta;
            rc.gamma = gamma;
            rc.skip_global_train = alpha == 0.0 && beta == 0.0 && gamma == 0.0;
            let split = cfg.build_split(seed);
            let metrics = fed::run_experiment(&split, &cfg.model, &rc)?;
            let last = metrics.last().expect("every run emits the round-0 row");
            Ok(AblationRow {
                alpha,
                beta,
                gamma,
                seed,
                cer: last.cer,
                wer: last.wer,
            })
        })
        .collect::<Result<_, FedError>>()?;
    fs::create_dir_all(out)?;
    write_csv(
        &out.join("ablation.csv"),
        AblationRow::csv_header(),
        &rows,
        |r| r.csv_row(),
    )?;
    Ok(rows)
}

/// Final-round scores with one cuer held out; `held_out` is `None` on the
/// trailing mean row.
#[derive(Debug, Clone, PartialEq)]
pub struct LodoRow {
    pub held_out: Option<usize>,
    pub cer: f64,
    pub wer: f64,
}

impl LodoRow {
    pub fn csv_header() -> &'static str {
        "held_out,cer,wer"
    }

    pub fn csv_row(&self) -> String {
        let label = match self.held_out {
            Some(c) => c.to_string(),
            None => "mean".into(),
        };
        format!("{},{:?},{:?}", label, self.cer, self.wer)
    }
}

/// Leave-one-cuer-out: for each cuer, trains on the remaining clients
/// (keeping their original ids) and scores the held-out cuer's full data,
/// train renderings plus their share of the test set. Uses the first seed.
/// Writes `lodo.csv` with one row per cuer plus the arithmetic mean.
pub fn cmd_lodo(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<LodoRow>, HarnessError> {
    cfg.validate().map_err(HarnessError::Config)?;
    let cuers = cfg.dataset.cuers;
    if cuers < 2 {
        return Err(HarnessError::Config(
            "leave-one-cuer-out needs at least 2 cuers".into(),
        ));
    }
    let seed = cfg.run.seeds[0];
    let rc = cfg.round_config(seed);
    let split = cfg.build_split(seed);
    let finals: Vec<(f64, f64)> = (0..cuers)
        .into_par_iter()
        .map(|held| -> Result<(f64, f64), FedError> {
            let bundle = ModelBundle::init(&cfg.model, derive_seed(rc.seed, &[10]));
            let mut clients: Vec<ClientState> = split
                .clients
                .iter()
                .enumerate()
                .filter(|(id, _)| *id != held)
                .map(|(id, samples)| ClientState::new(id, samples.clone(), bundle.clone()))
                .collect();
            // The held-out cuer never trains, so its samples cannot reach
            // an upload.
            debug_assert!(clients.iter().all(|c| c.id != held));
            let mut server = ServerState::new(bundle, split.server_corpus.clone(), &rc);
            let mut eval_set: Vec<CuedSample> = split.clients[held].clone();
            eval_set.extend(split.test.iter().filter(|s| s.cuer == held).cloned());
            let rows = fed::run_rounds(&mut server, &mut clients, &eval_set, &rc)?;
            let last = rows.last().expect("every run emits the round-0 row");
            Ok((last.cer, last.wer))
        })
        .collect::<Result<_, _>>()?;
    let mut rows: Vec<LodoRow> = finals
        .iter()
        .enumerate()
        .map(|(c, &(cer, wer))| LodoRow {
            held_out: Some(c),
            cer,
            wer,
        })
        .collect();
    let n = finals.len() as f64;
    rows.push(LodoRow {
        held_out: None,
        cer: finals.iter().map(|f| f.0).sum::<f64>() / n,
        wer: finals.iter().map(|f| f.1).sum::<f64>() / n,
    });
    fs::create_dir_all(out)?;
    write_csv(&out.join("lodo.csv"), LodoRow::csv_header(), &rows, |r| {
        r.csv_row()
    })?;
    Ok(rows)
}

/// Renders the first seed's dataset split as plain-text files under `out`.
pub fn cmd_datadump(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    cfg.validate().map_err(HarnessError::Config)?;
    let split = cfg.build_split(cfg.run.seeds[0]);
    data::write_split(out, &split)?;
    Ok(())
}

/// Relative-error ceiling for a derivative check to count as a pass.
pub const CHECK_TOL: f64 = 1e-4;
const CHECK_STEP: f64 = 1e-5;

/// One finite-difference comparison. The negative control flips the verdict:
/// its gradient is broken on purpose and must exceed the threshold.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub expect_failure: bool,
}

impl CheckRow {
    pub fn ok(&self) -> bool {
        if self.expect_failure {
            self.max_rel_err > self.threshold
        } else {
            self.max_rel_err <= self.threshold
        }
    }
}

/// Folds a finished check list into the exit decision.
pub fn gradcheck_verdict(rows: &[CheckRow]) -> Result<(), HarnessError> {
    let failed: Vec<&str> = rows.iter().filter(|r| !r.ok()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Check(format!(
            "derivative checks failed: {}",
            failed.join(", ")
        )))
    }
}

/// Checks the tape gradient of every layer, every loss, and both composite
/// objectives against central differences on a tiny model, and appends a
/// deliberately broken graph the checker must flag.
pub fn cmd_gradcheck() -> Result<Vec<CheckRow>, HarnessError> {
    derivative_suite().map_err(|e| HarnessError::Numeric {
        term: "derivative_suite".into(),
        detail: e.to_string(),
    })
}

fn flatten_loss(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        LossError::Numeric { source, .. } => source,
        other => TensorError::NonFinite {
            op: other.to_string(),
        },
    }
}

fn sumsq(tape: &Tape, t: &Tensor) -> Result<Tensor, TensorError> {
    tape.sum(&tape.mul(t, t)?, None)
}

/// Gradient of a scalar graph with respect to one parameter, with every
/// other parameter held constant.
fn param_check<F>(bundle: &ModelBundle, id: ParamId, f: F) -> Result<f64, TensorError>
where
    F: Fn(&Session) -> Result<Tensor, TensorError>,
{
    let x = bundle.store.get(id).clone();
    let report = finite_difference_check(
        |tape, t| {
            let sess = Session::inference(tape, &bundle.store);
            sess.pin(id, t.clone());
            f(&sess)
        },
        &x,
        CHECK_STEP,
    )?;
    Ok(report.max_rel_err)
}

/// Gradient of a scalar graph with respect to its input tensor.
fn input_check<F>(x: &Tensor, f: F) -> Result<f64, TensorError>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    Ok(finite_difference_check(f, x, CHECK_STEP)?.max_rel_err)
}

fn pass_row(name: &'static str, max_rel_err: f64) -> CheckRow {
    CheckRow {
        name,
        max_rel_err,
        threshold: CHECK_TOL,
        expect_failure: false,
    }
}

fn derivative_suite() -> Result<Vec<CheckRow>, TensorError> {
    let model = ModelConfig {
        vocab: 5,
        feat_dim: 4,
        hidden: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        attn_blocks: 1,
        lip_dim: 3,
        shape_dim: 3,
        pos_dim: 2,
        shared_embedding: true,
    };
    let b = ModelBundle::init(&model, 23);
    let mut rng = SeedStream::new(24);
    let frames = 5;
    let mut mk = |rows: usize, cols: usize| {
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        Tensor::new(vec![rows, cols], values).expect("finite sample")
    };
    let lip = mk(frames, 3);
    let hand_shape = mk(frames, 3);
    let hand_pos = mk(frames, 2);
    let ctc_logits = mk(frames, 6);
    let ce_logits = mk(2, 6);
    let kd_student = mk(frames, 4);
    let kd_teacher = mk(frames, 4);
    let prox_w = mk(1, 6);
    let prox_ref = mk(1, 6);
    let control = Tensor::new(vec![3], vec![2.0, -1.5, 0.4]).expect("finite sample");
    let label = vec![1usize, 4];

    let lin_sumsq = |sess: &Session, logits: bool| {
        let out = linguistic_forward(sess, &b.emb, &b.lstm, &label, label.len())?;
        sumsq(sess.tape(), if logits { &out.logits } else { &out.z_lin })
    };
    let vis_sumsq = |sess: &Session, lin_side: bool| {
        let out = visual_forward(sess, &b.cmml, &lip, &hand_shape, &hand_pos)?;
        sumsq(
            sess.tape(),
            if lin_side {
                &out.lin_logits
            } else {
                &out.vis_logits
            },
        )
    };

    let mut rows = Vec::new();
    rows.push(pass_row(
        "embedding_table",
        param_check(&b, b.emb.table, |s| {
            sumsq(s.tape(), &embed_text(s, &b.emb, &label)?)
        })?,
    ));
    rows.push(pass_row(
        "embedding_projection",
        param_check(&b, b.emb.proj_w, |s| {
            sumsq(s.tape(), &embed_text(s, &b.emb, &label)?)
        })?,
    ));
    rows.push(pass_row(
        "encoder_forward_recurrence",
        param_check(&b, b.lstm.encoder[0][0].w_hh, |s| lin_sumsq(s, false))?,
    ));
    rows.push(pass_row(
        "encoder_backward_input",
        param_check(&b, b.lstm.encoder[0][1].w_ih, |s| lin_sumsq(s, false))?,
    ));
    rows.push(pass_row(
        "decoder_forward_recurrence",
        param_check(&b, b.lstm.decoder[0][0].w_hh, |s| lin_sumsq(s, false))?,
    ));
    rows.push(pass_row(
        "decoder_projection",
        param_check(&b, b.lstm.out_w, |s| lin_sumsq(s, false))?,
    ));
    rows.push(pass_row(
        "linguistic_head",
        param_check(&b, b.lstm.head_w, |s| lin_sumsq(s, true))?,
    ));
    rows.push(pass_row(
        "lip_front_end",
        param_check(&b, b.cmml.lip.w, |s| vis_sumsq(s, false))?,
    ));
    rows.push(pass_row(
        "stream_layer_norm",
        param_check(&b, b.cmml.lip.norm_scale, |s| vis_sumsq(s, false))?,
    ));
    rows.push(pass_row(
        "stream_fusion",
        param_check(&b, b.cmml.fusion_w, |s| vis_sumsq(s, false))?,
    ));
    rows.push(pass_row(
        "self_attention_query",
        param_check(&b, b.cmml.blocks[0].wq, |s| vis_sumsq(s, false))?,
    ));
    rows.push(pass_row(
        "self_attention_output",
        param_check(&b, b.cmml.blocks[0].wo, |s| vis_sumsq(s, false))?,
    ));
    rows.push(pass_row(
        "cross_attention_query",
        param_check(&b, b.cmml.cross_wq, |s| vis_sumsq(s, true))?,
    ));
    rows.push(pass_row(
        "tied_head_blank",
        param_check(&b, b.cmml.lin_blank, |s| vis_sumsq(s, true))?,
    ));
    rows.push(pass_row(
        "visual_head",
        param_check(&b, b.cmml.vis_head_w, |s| vis_sumsq(s, false))?,
    ));

    rows.push(pass_row(
        "ctc_loss",
        input_check(&ctc_logits, |tape, x| {
            ctc_loss(tape, &tape.log_softmax(x)?, &label).map_err(flatten_loss)
        })?,
    ));
    rows.push(pass_row(
        "frame_cross_entropy",
        input_check(&ce_logits, |tape, x| frame_ce(tape, x, &label))?,
    ));
    rows.push(pass_row(
        "distillation_mse",
        input_check(&kd_student, |tape, x| kd_loss(tape, x, &kd_teacher))?,
    ));
    rows.push(pass_row(
        "prox_penalty",
        input_check(&prox_w, |tape, x| fedprox_penalty(tape, x, &prox_ref, 0.7))?,
    ));

    let client_cfg = ClientLossCfg {
        alpha: 0.3,
        gamma: 0.7,
        mu: 0.0,
        linguistic_path: true,
        gamma_trains_phi: true,
    };
    let view = SampleView {
        lip: &lip,
        hand_shape: &hand_shape,
        hand_pos: &hand_pos,
        label: &label,
    };
    rows.push(pass_row(
        "client_objective_cross_attention",
        param_check(&b, b.cmml.cross_wq, |s| {
            client_loss_graph(s, &b, &view, &client_cfg)
                .map(|(loss, _)| loss)
                .map_err(flatten_loss)
        })?,
    ));
    // The distillation target is a detached copy of the text features, which
    // themselves come from the embedding table; a raw finite difference
    // would see that blocked path, so the table pin runs without it.
    let phi_cfg = ClientLossCfg {
        alpha: 0.0,
        ..client_cfg
    };
    rows.push(pass_row(
        "client_objective_embedding",
        param_check(&b, b.emb.table, |s| {
            client_loss_graph(s, &b, &view, &phi_cfg)
                .map(|(loss, _)| loss)
                .map_err(flatten_loss)
        })?,
    ));

    let teacher = {
        let tape = Tape::new();
        let sess = Session::inference(&tape, &b.store);
        teacher_text_forward(&sess, &b.cmml, &label)?.v_lin
    };
    rows.push(pass_row(
        "server_objective_projection",
        param_check(&b, b.emb.proj_w, |s| {
            server_loss_graph(s, &b, &label, &teacher, 0.4)
                .map(|(loss, _)| loss)
                .map_err(flatten_loss)
        })?,
    ));
    rows.push(pass_row(
        "server_objective_decoder",
        param_check(&b, b.lstm.decoder[0][1].w_hh, |s| {
            server_loss_graph(s, &b, &label, &teacher, 0.4)
                .map(|(loss, _)| loss)
                .map_err(flatten_loss)
        })?,
    ));

    // sum(x * detach(x)) evaluates to sum(x^2) but its tape gradient misses
    // the detached factor, so the checker must report roughly 2x vs x.
    rows.push(CheckRow {
        name: "negative_control",
        max_rel_err: input_check(&control, |tape, x| {
            tape.sum(&tape.mul(x, &x.detach())?, None)
        })?,
        threshold: CHECK_TOL,
        expect_failure: true,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.feat_dim = 6;
        cfg.model.hidden = 4;
        cfg.model.encoder_layers = 1;
        cfg.model.decoder_layers = 1;
        cfg.model.attn_blocks = 1;
        cfg.dataset.cuers = 2;
        cfg.dataset.sentences = 8;
        cfg.dataset.sentence_len = [2, 3];
        cfg.dataset.word_len = [1, 2];
        cfg.dataset.train_ratio = 0.75;
        cfg.federation.rounds = 1;
        cfg.federation.global_epochs = 1;
        cfg.federation.batch_size = 4;
        cfg.run.seeds = vec![1];
        cfg
    }

    #[test]
    fn run_emits_seed_major_rows_and_bit_identical_files() {
        let mut cfg = tiny_cfg();
        cfg.run.seeds = vec![1, 2];
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let rows = cmd_run(&cfg, dir_a.path()).unwrap();
        cmd_run(&cfg, dir_b.path()).unwrap();
        // (rounds + 1) rows per seed, untrained round 0 first.
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].round, 0);
        assert_eq!(rows[0].seed, 1);
        assert_eq!(rows[2].seed, 2);
        let a = fs::read(dir_a.path().join("metrics.csv")).unwrap();
        let b = fs::read(dir_b.path().join("metrics.csv")).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().next().unwrap(), RoundMetrics::csv_header());
        let summary = fs::read_to_string(dir_a.path().join("summary.txt")).unwrap();
        assert_eq!(summary.lines().count(), 5);
        assert!(summary.lines().last().unwrap().starts_with("mean,"));
    }

    #[test]
    fn run_rejects_a_bad_config_before_training() {
        let mut cfg = tiny_cfg();
        cfg.federation.local_epochs = 0;
        let dir = tempdir().unwrap();
        let err = cmd_run(&cfg, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!dir.path().join("metrics.csv").exists());
    }

    #[test]
    fn ablation_walks_the_grid_in_order_and_matches_plain_averaging() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        let rows = cmd_ablate(&cfg, dir.path()).unwrap();
        assert_eq!(rows.len(), 5);
        for (row, &(a, bt, g)) in rows.iter().zip(ABLATION_GRID.iter()) {
            assert_eq!((row.alpha, row.beta, row.gamma), (a, bt, g));
            assert_eq!(row.seed, 1);
            assert!(row.cer.is_finite() && row.wer.is_finite());
        }
        let mut rc = cfg.round_config(1);
        rc.method = Method::FedAvg;
        let split = cfg.build_split(1);
        let plain = fed::run_experiment(&split, &cfg.model, &rc).unwrap();
        let last = plain.last().unwrap();
        assert_eq!(rows[0].cer.to_bits(), last.cer.to_bits());
        assert_eq!(rows[0].wer.to_bits(), last.wer.to_bits());
    }

    #[test]
    fn lodo_scores_every_cuer_and_appends_the_mean() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        let rows = cmd_lodo(&cfg, dir.path()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].held_out, Some(0));
        assert_eq!(rows[1].held_out, Some(1));
        assert_eq!(rows[2].held_out, None);
        let mean = (rows[0].cer + rows[1].cer) / 2.0;
        assert!((rows[2].cer - mean).abs() <= 1e-12);
        let text = fs::read_to_string(dir.path().join("lodo.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().starts_with("mean,"));
    }

    #[test]
    fn lodo_needs_at_least_two_cuers() {
        let mut cfg = tiny_cfg();
        cfg.dataset.cuers = 1;
        let err = cmd_lodo(&cfg, tempdir().unwrap().path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn datadump_writes_the_split_files() {
        let cfg = tiny_cfg();
        let dir = tempdir().unwrap();
        cmd_datadump(&cfg, dir.path()).unwrap();
        for name in ["client_0.txt", "client_1.txt", "test.txt", "corpus.txt"] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
    }

    #[test]
    fn derivative_suite_passes_and_catches_the_broken_graph() {
        let rows = cmd_gradcheck().unwrap();
        assert!(rows.len() >= 24);
        for row in &rows {
            assert!(row.ok(), "{} err {}", row.name, row.max_rel_err);
        }
        let control = rows.iter().find(|r| r.expect_failure).unwrap();
        assert!(control.max_rel_err > control.threshold);
        assert!(gradcheck_verdict(&rows).is_ok());
        let mut broken = rows;
        broken[0].max_rel_err = 1.0;
        assert_eq!(gradcheck_verdict(&broken).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn numeric_errors_carry_the_offending_term() {
        let err = HarnessError::from(LossError::Numeric {
            term: "ctc_vis".into(),
            source: TensorError::NonFinite { op: "exp".into() },
        });
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("ctc_vis"));
    }
}
