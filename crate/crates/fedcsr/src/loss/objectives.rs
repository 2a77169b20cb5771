//! Composite training objectives for the two sides of the protocol.
//!
//! The server trains the linguistic stack and the shared embedding against
//! its text corpus, pulled toward a frozen text-routed teacher. Clients
//! train the visual model (and the embedding, through the codebook and
//! optionally the text path) under CTC supervision plus distillation from a
//! frozen linguistic snapshot. Zero-weighted terms are skipped outright, so
//! a run with all extras disabled is bit-identical to plain CTC training.

use crate::nn::{
    linguistic_from_embedded, visual_forward, ModelBundle, ParamGrads, Partition, Session,
};
use crate::tensor::{Tape, Tensor, TensorError};

use super::{ctc_loss, fedprox_penalty, frame_ce, kd_loss, term, LossError};

/// Per-term values (unweighted) plus the weighted total actually optimized.
/// Absent terms were not computed at all.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ctc_vis: Option<f64>,
    pub ctc_lin: Option<f64>,
    pub ctc_teacher_path: Option<f64>,
    pub kd: Option<f64>,
    pub ce: Option<f64>,
    pub prox: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Re-derives the total from the parts; `kd_weight` is the distillation
    /// coefficient of whichever side produced this breakdown.
    pub fn recombined(&self, kd_weight: f64, gamma: f64) -> f64 {
        self.ctc_vis.unwrap_or(0.0)
            + self.ctc_lin.unwrap_or(0.0)
            + gamma * self.ctc_teacher_path.unwrap_or(0.0)
            + kd_weight * self.kd.unwrap_or(0.0)
            + self.ce.unwrap_or(0.0)
            + self.prox.unwrap_or(0.0)
    }

    fn absorb(&mut self, other: &LossBreakdown) {
        fn acc(slot: &mut Option<f64>, v: Option<f64>) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
        acc(&mut self.ctc_vis, other.ctc_vis);
        acc(&mut self.ctc_lin, other.ctc_lin);
        acc(&mut self.ctc_teacher_path, other.ctc_teacher_path);
        acc(&mut self.kd, other.kd);
        acc(&mut self.ce, other.ce);
        acc(&mut self.prox, other.prox);
        self.total += other.total;
    }

    fn scaled(mut self, s: f64) -> LossBreakdown {
        for slot in [
            &mut self.ctc_vis,
            &mut self.ctc_lin,
            &mut self.ctc_teacher_path,
            &mut self.kd,
            &mut self.ce,
            &mut self.prox,
        ] {
            if let Some(v) = slot {
                *v *= s;
            }
        }
        self.total *= s;
        self
    }
}

/// Client-side loss shape. The linguistic path only exists for the mutual
/// distillation method; plain federated baselines train on CTC alone.
#[derive(Debug, Clone)]
pub struct ClientLossCfg {
    pub alpha: f64,
    pub gamma: f64,
    pub mu: f64,
    pub linguistic_path: bool,
    pub gamma_trains_phi: bool,
}

/// Borrowed view of one training sample's streams and transcript.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub lip: &'a Tensor,
    pub hand_shape: &'a Tensor,
    pub hand_pos: &'a Tensor,
    pub label: &'a [usize],
}

fn scalar_weighted_sum(tape: &Tape, terms: &[(f64, &Tensor)]) -> Result<Tensor, TensorError> {
    let mut total: Option<Tensor> = None;
    for (weight, t) in terms {
        let part = if *weight == 1.0 {
            (*t).clone()
        } else {
            tape.scale(t, *weight)?
        };
        total = Some(match total {
            None => part,
            Some(acc) => tape.add(&acc, &part)?,
        });
    }
    Ok(total.expect("at least one loss term"))
}

/// One sample's client loss graph on an open session. Callers that only
/// want gradients should prefer [`client_batch_objective`]; this entry
/// exists so derivative checks can pin individual parameters.
pub fn client_loss_graph(
    sess: &Session,
    bundle: &ModelBundle,
    sample: &SampleView,
    cfg: &ClientLossCfg,
) -> Result<(Tensor, LossBreakdown), LossError> {
    let tape = sess.tape();
    let vis = term(
        "visual_forward",
        visual_forward(
            sess,
            &bundle.cmml,
            sample.lip,
            sample.hand_shape,
            sample.hand_pos,
        ),
    )?;
    let lp_vis = term("ctc_vis", tape.log_softmax(&vis.vis_logits))?;
    let ctc_vis = ctc_loss(tape, &lp_vis, sample.label)?;
    let lp_lin = term("ctc_lin", tape.log_softmax(&vis.lin_logits))?;
    let ctc_lin = ctc_loss(tape, &lp_lin, sample.label)?;

    let mut parts: Vec<(f64, Tensor)> = vec![(1.0, ctc_vis.clone()), (1.0, ctc_lin.clone())];
    let mut breakdown = LossBreakdown {
        ctc_vis: Some(ctc_vis.item()),
        ctc_lin: Some(ctc_lin.item()),
        ..LossBreakdown::default()
    };

    if cfg.linguistic_path && (cfg.alpha != 0.0 || cfg.gamma != 0.0) {
        let frames = sample.lip.rows();
        let mut z_txt = term(
            "embed_text",
            crate::nn::embed_text(sess, &bundle.emb, sample.label),
        )?;
        if !cfg.gamma_trains_phi {
            z_txt = z_txt.detach();
        }
        let ling = term(
            "linguistic_forward",
            linguistic_from_embedded(sess, &bundle.lstm, &z_txt, frames),
        )?;
        if cfg.gamma != 0.0 {
            let lp_z = term("ctc_teacher_path", tape.log_softmax(&ling.logits))?;
            let ctc_z = ctc_loss(tape, &lp_z, sample.label)?;
            breakdown.ctc_teacher_path = Some(ctc_z.item());
            parts.push((cfg.gamma, ctc_z));
        }
        if cfg.alpha != 0.0 {
            let kd = term("kd", kd_loss(tape, &vis.v_lin, &ling.z_lin.detach()))?;
            breakdown.kd = Some(kd.item());
            parts.push((cfg.alpha, kd));
        }
    }

    let refs: Vec<(f64, &Tensor)> = parts.iter().map(|(w, t)| (*w, t)).collect();
    let total = term("client_total", scalar_weighted_sum(tape, &refs))?;
    breakdown.total = total.item();
    Ok((total, breakdown))
}

/// Proximal pull of the visual parameters toward the broadcast snapshot.
fn prox_graph(
    sess: &Session,
    bundle: &ModelBundle,
    w_ref: &[f64],
    mu: f64,
) -> Result<Tensor, LossError> {
    let tape = sess.tape();
    let mut at = 0;
    let mut total: Option<Tensor> = None;
    for id in bundle.partition_ids(Partition::Visual) {
        let p = sess.param(id);
        let len = p.len();
        let anchor = term(
            "prox",
            Tensor::new(p.shape().to_vec(), w_ref[at..at + len].to_vec()),
        )?;
        at += len;
        let piece = term("prox", fedprox_penalty(tape, &p, &anchor, mu))?;
        total = Some(match total {
            None => piece,
            Some(acc) => term("prox", tape.add(&acc, &piece))?,
        });
    }
    assert_eq!(at, w_ref.len(), "proximal reference length");
    Ok(total.expect("visual partition is never empty"))
}

/// One sentence's server loss graph on an open session: frame-wise cross
/// entropy plus the weighted pull toward the fixed teacher vectors.
pub fn server_loss_graph(
    sess: &Session,
    bundle: &ModelBundle,
    label: &[usize],
    teacher: &Tensor,
    beta: f64,
) -> Result<(Tensor, LossBreakdown), LossError> {
    let tape = sess.tape();
    let out = term(
        "linguistic_forward",
        crate::nn::linguistic_forward(sess, &bundle.emb, &bundle.lstm, label, label.len()),
    )?;
    let ce = term("ce", frame_ce(tape, &out.logits, label))?;
    let mut parts = LossBreakdown {
        ce: Some(ce.item()),
        ..LossBreakdown::default()
    };
    let mut total = ce;
    if beta != 0.0 {
        let kd = term("kd", kd_loss(tape, &out.z_lin, &teacher.detach()))?;
        parts.kd = Some(kd.item());
        total = term("server_total", tape.add(&total, &tape.scale(&kd, beta)?))?;
    }
    parts.total = total.item();
    Ok((total, parts))
}

/// Minibatch client objective: batch-mean of the per-sample losses, plus one
/// proximal term when `mu > 0`. Returns gradients over the visual model and
/// the embedding; the linguistic stack is frozen throughout.
pub fn client_batch_objective(
    bundle: &ModelBundle,
    samples: &[SampleView],
    cfg: &ClientLossCfg,
    w_ref: Option<&[f64]>,
) -> Result<(LossBreakdown, ParamGrads), LossError> {
    assert!(!samples.is_empty(), "empty minibatch");
    let tape = Tape::new();
    let mut sess = Session::new(&tape, &bundle.store);
    sess.freeze(&bundle.partition_ids(Partition::Linguistic));

    let mut batch_total: Option<Tensor> = None;
    let mut breakdown = LossBreakdown::default();
    for sample in samples {
        let (loss, parts) = client_loss_graph(&sess, bundle, sample, cfg)?;
        breakdown.absorb(&parts);
        batch_total = Some(match batch_total {
            None => loss,
            Some(acc) => term("client_total", tape.add(&acc, &loss))?,
        });
    }
    let scale = 1.0 / samples.len() as f64;
    let mut total = term(
        "client_total",
        tape.scale(&batch_total.expect("nonempty batch"), scale),
    )?;
    breakdown = breakdown.scaled(scale);

    if cfg.mu != 0.0 {
        let w_ref = w_ref.expect("proximal training needs the broadcast snapshot");
        let prox = prox_graph(&sess, bundle, w_ref, cfg.mu)?;
        breakdown.prox = Some(prox.item());
        breakdown.total += prox.item();
        total = term("client_total", tape.add(&total, &prox))?;
    }

    let map = term("client_total", tape.backward(&total))?;
    Ok((breakdown, sess.grads(&map)))
}

/// Single-sample convenience wrapper.
pub fn client_objective(
    bundle: &ModelBundle,
    sample: &SampleView,
    cfg: &ClientLossCfg,
    w_ref: Option<&[f64]>,
) -> Result<(LossBreakdown, ParamGrads), LossError> {
    client_batch_objective(bundle, std::slice::from_ref(sample), cfg, w_ref)
}

/// Server objective for one sentence: framewise cross-entropy of the
/// linguistic logits against the sentence, plus `beta` times the feature
/// distance to the precomputed teacher row for the same sentence. Gradients
/// cover the linguistic stack and the embedding only.
pub fn server_batch_objective(
    bundle: &ModelBundle,
    batch: &[(&[usize], &Tensor)],
    beta: f64,
) -> Result<(LossBreakdown, ParamGrads), LossError> {
    assert!(!batch.is_empty(), "empty text batch");
    let tape = Tape::new();
    let sess = Session::new(&tape, &bundle.store);

    let mut batch_total: Option<Tensor> = None;
    let mut breakdown = LossBreakdown::default();
    for (label, teacher) in batch {
        let (total, parts) = server_loss_graph(&sess, bundle, label, teacher, beta)?;
        breakdown.absorb(&parts);
        batch_total = Some(match batch_total {
            None => total,
            Some(acc) => term("server_total", tape.add(&acc, &total))?,
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let total = term(
        "server_total",
        tape.scale(&batch_total.expect("nonempty batch"), scale),
    )?;
    breakdown = breakdown.scaled(scale);

    let map = term("server_total", tape.backward(&total))?;
    Ok((breakdown, sess.grads(&map)))
}

/// Single-sentence convenience wrapper.
pub fn server_objective(
    bundle: &ModelBundle,
    label: &[usize],
    teacher: &Tensor,
    beta: f64,
) -> Result<(LossBreakdown, ParamGrads), LossError> {
    server_batch_objective(bundle, &[(label, teacher)], beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{teacher_text_forward, ModelBundle, ModelConfig};
    use crate::rng::SeedStream;
    use crate::tensor::Tape;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
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
        }
    }

    fn sample(rng: &mut SeedStream, frames: usize) -> (Tensor, Tensor, Tensor, Vec<usize>) {
        let mk = |rng: &mut SeedStream, m: usize| {
            let values: Vec<f64> = (0..frames * m).map(|_| rng.normal()).collect();
            Tensor::new(vec![frames, m], values).unwrap()
        };
        let lip = mk(rng, 3);
        let hs = mk(rng, 3);
        let hp = mk(rng, 2);
        (lip, hs, hp, vec![1, 4])
    }

    fn full_cfg() -> ClientLossCfg {
        ClientLossCfg {
            alpha: 0.005,
            gamma: 0.5,
            mu: 0.0,
            linguistic_path: true,
            gamma_trains_phi: true,
        }
    }

    #[test]
    fn client_total_is_the_weighted_sum_of_parts() {
        let bundle = ModelBundle::init(&tiny_config(), 3);
        let mut rng = SeedStream::new(60);
        let (lip, hs, hp, label) = sample(&mut rng, 6);
        let view = SampleView {
            lip: &lip,
            hand_shape: &hs,
            hand_pos: &hp,
            label: &label,
        };
        let cfg = full_cfg();
        let (parts, grads) = client_objective(&bundle, &view, &cfg, None).unwrap();
        assert!(parts.ctc_vis.is_some() && parts.ctc_lin.is_some());
        assert!(parts.ctc_teacher_path.is_some() && parts.kd.is_some());
        assert!((parts.total - parts.recombined(cfg.alpha, cfg.gamma)).abs() <= 1e-12);
        assert!(!grads.is_empty());
    }

    #[test]
    fn client_gradients_never_touch_the_linguistic_stack() {
        let bundle = ModelBundle::init(&tiny_config(), 3);
        let mut rng = SeedStream::new(61);
        let (lip, hs, hp, label) = sample(&mut rng, 6);
        let view = SampleView {
            lip: &lip,
            hand_shape: &hs,
            hand_pos: &hp,
            label: &label,
        };
        let (_, grads) = client_objective(&bundle, &view, &full_cfg(), None).unwrap();
        for id in bundle.partition_ids(crate::nn::Partition::Linguistic) {
            assert!(grads.get(id).is_none(), "{}", bundle.store.name(id));
        }
        // But the embedding and the visual model do train.
        assert!(grads.get(bundle.emb.table).is_some());
        assert!(grads.get(bundle.cmml.fusion_w).is_some());
    }

    #[test]
    fn zero_extras_reduce_to_plain_ctc_supervision_bitwise() {
        let bundle = ModelBundle::init(&tiny_config(), 5);
        let mut rng = SeedStream::new(62);
        let (lip, hs, hp, label) = sample(&mut rng, 6);
        let view = SampleView {
            lip: &lip,
            hand_shape: &hs,
            hand_pos: &hp,
            label: &label,
        };
        let zeros = ClientLossCfg {
            alpha: 0.0,
            gamma: 0.0,
            mu: 0.0,
            linguistic_path: true,
            gamma_trains_phi: true,
        };
        let plain = ClientLossCfg {
            linguistic_path: false,
            ..zeros.clone()
        };
        let (pz, gz) = client_objective(&bundle, &view, &zeros, None).unwrap();
        let (pp, gp) = client_objective(&bundle, &view, &plain, None).unwrap();
        assert_eq!(pz, pp);
        assert!(pz.kd.is_none() && pz.ctc_teacher_path.is_none());
        for id in bundle.partition_ids(crate::nn::Partition::All) {
            match (gz.get(id), gp.get(id)) {
                (Some(a), Some(b)) => assert_eq!(a.values(), b.values()),
                (None, None) => {}
                _ => panic!("gradient presence differs for {}", bundle.store.name(id)),
            }
        }
    }

    #[test]
    fn proximal_term_appears_once_and_pulls_toward_the_snapshot() {
        let bundle = ModelBundle::init(&tiny_config(), 7);
        let mut rng = SeedStream::new(63);
        let (lip, hs, hp, label) = sample(&mut rng, 6);
        let view = SampleView {
            lip: &lip,
            hand_shape: &hs,
            hand_pos: &hp,
            label: &label,
        };
        let cfg = ClientLossCfg {
            alpha: 0.0,
            gamma: 0.0,
            mu: 2.0,
            linguistic_path: false,
            gamma_trains_phi: true,
        };
        // Snapshot shifted by 1 in every coordinate: mu/2 * n * 1 = n.
        let mut w_ref = bundle.serialize(crate::nn::Partition::Visual);
        for v in &mut w_ref {
            *v += 1.0;
        }
        let both = [view, view];
        let (parts, grads) = client_batch_objective(&bundle, &both, &cfg, Some(&w_ref)).unwrap();
        let n = w_ref.len() as f64;
        assert!((parts.prox.unwrap() - n).abs() <= 1e-9);
        assert!((parts.total - parts.recombined(0.0, 0.0)).abs() <= 1e-12);
        // Gradient of the prox piece alone is mu * (w - ref) = -2 everywhere;
        // norm parameters sit outside the CTC graph in value terms but still
        // receive the prox pull.
        let shift_id = bundle.cmml.lip.norm_shift;
        let g = grads.get(shift_id).unwrap();
        // norm_shift also gets CTC gradient, so only check it is present.
        assert_eq!(g.len(), bundle.store.get(shift_id).len());
    }

    #[test]
    fn disabling_the_text_gradient_detaches_the_embedding_from_gamma() {
        let mut config = tiny_config();
        config.shared_embedding = false; // isolate the gamma path from the codebook
        let bundle = ModelBundle::init(&config, 9);
        let mut rng = SeedStream::new(64);
        let (lip, hs, hp, label) = sample(&mut rng, 6);
        let view = SampleView {
            lip: &lip,
            hand_shape: &hs,
            hand_pos: &hp,
            label: &label,
        };
        let mut cfg = full_cfg();
        let (_, with) = client_objective(&bundle, &view, &cfg, None).unwrap();
        assert!(with.get(bundle.emb.table).is_some());
        cfg.gamma_trains_phi = false;
        let (_, without) = client_objective(&bundle, &view, &cfg, None).unwrap();
        assert!(without.get(bundle.emb.table).is_none());
    }

    #[test]
    fn server_total_matches_ce_plus_weighted_kd() {
        let bundle = ModelBundle::init(&tiny_config(), 11);
        let label = vec![0usize, 3, 2];
        let teacher = {
            let tape = Tape::new();
            let sess = crate::nn::Session::inference(&tape, &bundle.store);
            teacher_text_forward(&sess, &bundle.cmml, &label)
                .unwrap()
                .v_lin
        };
        let beta = 0.005;
        let (parts, grads) = server_objective(&bundle, &label, &teacher, beta).unwrap();
        assert!((parts.total - (parts.ce.unwrap() + beta * parts.kd.unwrap())).abs() <= 1e-12);
        assert!(grads.get(bundle.emb.table).is_some());
        assert!(grads.get(bundle.lstm.out_w).is_some());
        for id in bundle.partition_ids(crate::nn::Partition::Visual) {
            assert!(grads.get(id).is_none(), "{}", bundle.store.name(id));
        }
    }

    #[test]
    fn zero_beta_is_exactly_the_autoencoder_loss() {
        let bundle = ModelBundle::init(&tiny_config(), 13);
        let label = vec![1usize, 1, 4];
        let teacher = Tensor::zeros(vec![3, 4]);
        let (parts, _) = server_objective(&bundle, &label, &teacher, 0.0).unwrap();
        assert!(parts.kd.is_none());
        assert_eq!(parts.total, parts.ce.unwrap());
    }

    #[test]
    fn client_gradient_passes_finite_differences_end_to_end() {
        use crate::tensor::finite_difference_check;
        let bundle = ModelBundle::init(&tiny_config(), 15);
        let mut rng = SeedStream::new(65);
        let (lip, hs, hp, label) = sample(&mut rng, 5);
        let cfg = full_cfg();
        let target = bundle.cmml.cross_wq;
        let x = bundle.store.get(target).clone();
        let report = finite_difference_check(
            |tape, t| {
                let mut sess = Session::new(tape, &bundle.store);
                sess.freeze(&bundle.partition_ids(Partition::Linguistic));
                sess.pin(target, t.clone());
                let view = SampleView {
                    lip: &lip,
                    hand_shape: &hs,
                    hand_pos: &hp,
                    label: &label,
                };
                let (loss, _) = client_loss_graph(&sess, &bundle, &view, &cfg).map_err(|_| {
                    crate::tensor::TensorError::NonFinite {
                        op: "client".to_string(),
                    }
                })?;
                Ok(loss)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "err {}", report.max_rel_err);
    }

    #[test]
    fn server_gradient_passes_finite_differences_end_to_end() {
        use crate::tensor::finite_difference_check;
        let bundle = ModelBundle::init(&tiny_config(), 17);
        let label = vec![0usize, 2];
        let teacher = {
            let tape = Tape::new();
            let sess = crate::nn::Session::inference(&tape, &bundle.store);
            teacher_text_forward(&sess, &bundle.cmml, &label)
                .unwrap()
                .v_lin
        };
        let target = bundle.emb.proj_w;
        let x = bundle.store.get(target).clone();
        let report = finite_difference_check(
            |tape, t| {
                let sess = Session::new(tape, &bundle.store);
                sess.pin(target, t.clone());
                let out = crate::nn::linguistic_forward(
                    &sess,
                    &bundle.emb,
                    &bundle.lstm,
                    &label,
                    label.len(),
                )?;
                let ce = frame_ce(tape, &out.logits, &label)?;
                let kd = kd_loss(tape, &out.z_lin, &teacher.detach())?;
                tape.add(&ce, &tape.scale(&kd, 0.005)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "err {}", report.max_rel_err);
    }
}
