//! Whole-model container: embedding, recurrent stack, visual model, and the
//! flat-vector transport between server and clients.
//!
//! Serialization order is fixed: embedding (table, projection weight,
//! projection bias), then the recurrent stack (encoder layers then decoder
//! layers, forward direction before backward, each as w_ih/w_hh/b, then the
//! feature projection and classifier head), then the visual model
//! (lip/shape/position front-ends each as weight/bias/norm scale/norm shift,
//! fusion, attention blocks as q/k/v/o, ffn, norm, then cross-attention,
//! visual head, blank direction, and, only when the embedding is not shared,
//! the private codebook). Payloads are plain `f64` vectors; the byte helpers
//! pack them little-endian.

use serde::{Deserialize, Serialize};

use super::cmml::{AttnBlockHandles, FrontEndHandles};
use super::embedding::EmbeddingHandles;
use super::lstm::LstmLayerHandles;
use super::{xavier, BiLstmHandles, CmmlHandles, NnError, ParamId, ParamStore};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Dimensions and layer counts; every dimension the model mentions is here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub feat_dim: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attn_blocks: usize,
    pub lip_dim: usize,
    pub shape_dim: usize,
    pub pos_dim: usize,
    pub shared_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 40,
            feat_dim: 16,
            hidden: 32,
            encoder_layers: 2,
            decoder_layers: 4,
            attn_blocks: 2,
            lip_dim: 8,
            shape_dim: 8,
            pos_dim: 2,
            shared_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            ("vocab", self.vocab),
            ("feat_dim", self.feat_dim),
            ("hidden", self.hidden),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("attn_blocks", self.attn_blocks),
            ("lip_dim", self.lip_dim),
            ("shape_dim", self.shape_dim),
            ("pos_dim", self.pos_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(format!("model.{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Which slice of the bundle a payload covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Embedding,
    Linguistic,
    Visual,
    All,
}

/// One named parameter group in serialization order.
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub len: usize,
    pub norm: bool,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub emb: EmbeddingHandles,
    pub lstm: BiLstmHandles,
    pub cmml: CmmlHandles,
    phi_ids: Vec<ParamId>,
    theta_ids: Vec<ParamId>,
    w_ids: Vec<ParamId>,
}

struct Builder {
    store: ParamStore,
    rng: SeedStream,
    ids: Vec<ParamId>,
}

impl Builder {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = xavier(&mut self.rng, rows, cols);
        let id = self.store.add(name, t);
        self.ids.push(id);
        id
    }

    fn vector(&mut self, name: &str, len: usize, fill: f64) -> ParamId {
        let id = self
            .store
            .add(name, Tensor::new(vec![len], vec![fill; len]).unwrap());
        self.ids.push(id);
        id
    }

    fn lstm_layer(&mut self, tag: &str, input: usize, hidden: usize) -> LstmLayerHandles {
        LstmLayerHandles {
            w_ih: self.weight(&format!("{tag}.w_ih"), input, 4 * hidden),
            w_hh: self.weight(&format!("{tag}.w_hh"), hidden, 4 * hidden),
            b: self.vector(&format!("{tag}.b"), 4 * hidden, 0.0),
        }
    }

    fn front_end(&mut self, tag: &str, input: usize, d: usize) -> FrontEndHandles {
        FrontEndHandles {
            w: self.weight(&format!("{tag}.w"), input, d),
            b: self.vector(&format!("{tag}.b"), d, 0.0),
            norm_scale: self.vector(&format!("{tag}.norm_scale"), d, 1.0),
            norm_shift: self.vector(&format!("{tag}.norm_shift"), d, 0.0),
        }
    }

    fn embedding(&mut self, tag: &str, vocab: usize, d: usize) -> EmbeddingHandles {
        EmbeddingHandles {
            table: self.weight(&format!("{tag}.table"), vocab, d),
            proj_w: self.weight(&format!("{tag}.proj_w"), d, d),
            proj_b: self.vector(&format!("{tag}.proj_b"), d, 0.0),
        }
    }

    fn take_ids(&mut self) -> Vec<ParamId> {
        std::mem::take(&mut self.ids)
    }
}

impl ModelBundle {
    /// Deterministic initialization: weights uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases and norm shifts zero, norm
    /// scales one.
    pub fn init(config: &ModelConfig, seed: u64) -> ModelBundle {
        let (v, d, h) = (config.vocab, config.feat_dim, config.hidden);
        let mut b = Builder {
            store: ParamStore::default(),
            rng: SeedStream::new(seed),
            ids: Vec::new(),
        };

        let emb = b.embedding("phi", v, d);
        let phi_ids = b.take_ids();

        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let input = if l == 0 { d } else { 2 * h };
            encoder.push([
                b.lstm_layer(&format!("theta.enc{l}.fwd"), input, h),
                b.lstm_layer(&format!("theta.enc{l}.bwd"), input, h),
            ]);
        }
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            decoder.push([
                b.lstm_layer(&format!("theta.dec{l}.fwd"), 2 * h, h),
                b.lstm_layer(&format!("theta.dec{l}.bwd"), 2 * h, h),
            ]);
        }
        let lstm = BiLstmHandles {
            hidden: h,
            encoder,
            decoder,
            out_w: b.weight("theta.out_w", 2 * h, d),
            out_b: b.vector("theta.out_b", d, 0.0),
            head_w: b.weight("theta.head_w", d, v + 1),
            head_b: b.vector("theta.head_b", v + 1, 0.0),
        };
        let theta_ids = b.take_ids();

        let lip = b.front_end("w.lip", config.lip_dim, d);
        let shape = b.front_end("w.shape", config.shape_dim, d);
        let pos = b.front_end("w.pos", config.pos_dim, d);
        let fusion_w = b.weight("w.fusion.w", 3 * d, d);
        let fusion_b = b.vector("w.fusion.b", d, 0.0);
        let mut blocks = Vec::with_capacity(config.attn_blocks);
        for i in 0..config.attn_blocks {
            blocks.push(AttnBlockHandles {
                wq: b.weight(&format!("w.blk{i}.wq"), d, d),
                wk: b.weight(&format!("w.blk{i}.wk"), d, d),
                wv: b.weight(&format!("w.blk{i}.wv"), d, d),
                wo: b.weight(&format!("w.blk{i}.wo"), d, d),
                ffn_w1: b.weight(&format!("w.blk{i}.ffn_w1"), d, d),
                ffn_b1: b.vector(&format!("w.blk{i}.ffn_b1"), d, 0.0),
                ffn_w2: b.weight(&format!("w.blk{i}.ffn_w2"), d, d),
                ffn_b2: b.vector(&format!("w.blk{i}.ffn_b2"), d, 0.0),
                norm_scale: b.vector(&format!("w.blk{i}.norm_scale"), d, 1.0),
                norm_shift: b.vector(&format!("w.blk{i}.norm_shift"), d, 0.0),
            });
        }
        let cross_wq = b.weight("w.cross.wq", d, d);
        let cross_wk = b.weight("w.cross.wk", d, d);
        let vis_head_w = b.weight("w.vis_head.w", d, v + 1);
        let vis_head_b = b.vector("w.vis_head.b", v + 1, 0.0);
        let lin_blank = b.weight("w.lin_blank", d, 1);
        let codebook = if config.shared_embedding {
            emb.clone()
        } else {
            b.embedding("w.codebook", v, d)
        };
        let cmml = CmmlHandles {
            lip,
            shape,
            pos,
            fusion_w,
            fusion_b,
            blocks,
            cross_wq,
            cross_wk,
            vis_head_w,
            vis_head_b,
            lin_blank,
            codebook,
        };
        let w_ids = b.take_ids();

        ModelBundle {
            config: config.clone(),
            store: b.store,
            emb,
            lstm,
            cmml,
            phi_ids,
            theta_ids,
            w_ids,
        }
    }

    pub fn partition_ids(&self, part: Partition) -> Vec<ParamId> {
        match part {
            Partition::Embedding => self.phi_ids.clone(),
            Partition::Linguistic => self.theta_ids.clone(),
            Partition::Visual => self.w_ids.clone(),
            Partition::All => {
                let mut all = self.phi_ids.clone();
                all.extend_from_slice(&self.theta_ids);
                all.extend_from_slice(&self.w_ids);
                all
            }
        }
    }

    /// Parameter groups of one partition, in serialization order.
    pub fn segments(&self, part: Partition) -> Vec<Segment> {
        self.partition_ids(part)
            .into_iter()
            .map(|id| {
                let name = self.store.name(id).to_string();
                Segment {
                    norm: name.contains(".norm_"),
                    len: self.store.get(id).len(),
                    name,
                }
            })
            .collect()
    }

    pub fn partition_len(&self, part: Partition) -> usize {
        self.partition_ids(part)
            .iter()
            .map(|id| self.store.get(*id).len())
            .sum()
    }

    /// Coordinate mask over the visual payload; true marks normalization
    /// parameters, the ones a local-norm method never aggregates.
    pub fn visual_norm_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.partition_len(Partition::Visual));
        for seg in self.segments(Partition::Visual) {
            mask.extend(std::iter::repeat(seg.norm).take(seg.len));
        }
        mask
    }

    pub fn serialize(&self, part: Partition) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.partition_len(part));
        for id in self.partition_ids(part) {
            out.extend_from_slice(self.store.get(id).values());
        }
        out
    }

    /// Inverse of `serialize` for the same config; rejects stray lengths.
    pub fn install(&mut self, part: Partition, values: &[f64]) -> Result<(), NnError> {
        let want = self.partition_len(part);
        if values.len() != want {
            return Err(NnError::PayloadLength {
                part,
                want,
                got: values.len(),
            });
        }
        let mut at = 0;
        for id in self.partition_ids(part) {
            let len = self.store.get(id).len();
            self.store.set_values(id, &values[at..at + len]);
            at += len;
        }
        Ok(())
    }
}

pub fn floats_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_floats(bytes: &[u8]) -> Result<Vec<f64>, NnError> {
    if bytes.len() % 8 != 0 {
        return Err(NnError::ByteLength(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Session;
    use crate::nn::{teacher_text_forward, visual_forward};
    use crate::tensor::Tape;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 5,
            feat_dim: 4,
            hidden: 3,
            encoder_layers: 1,
            decoder_layers: 2,
            attn_blocks: 1,
            lip_dim: 3,
            shape_dim: 3,
            pos_dim: 2,
            shared_embedding: true,
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_bundles() {
        let a = ModelBundle::init(&tiny(), 7);
        let b = ModelBundle::init(&tiny(), 7);
        assert_eq!(a.serialize(Partition::All), b.serialize(Partition::All));
        let c = ModelBundle::init(&tiny(), 8);
        assert_ne!(a.serialize(Partition::All), c.serialize(Partition::All));
    }

    #[test]
    fn biases_start_at_zero_and_norm_scales_at_one() {
        let b = ModelBundle::init(&tiny(), 1);
        for part in [
            Partition::Embedding,
            Partition::Linguistic,
            Partition::Visual,
        ] {
            for id in b.partition_ids(part) {
                let name = b.store.name(id);
                if name.ends_with(".b") || name.ends_with("_b") || name.contains("shift") {
                    assert!(b.store.get(id).values().iter().all(|v| *v == 0.0), "{name}");
                }
                if name.contains("norm_scale") {
                    assert!(b.store.get(id).values().iter().all(|v| *v == 1.0), "{name}");
                }
            }
        }
    }

    #[test]
    fn partition_lengths_sum_to_the_full_length() {
        for shared in [true, false] {
            let mut cfg = tiny();
            cfg.shared_embedding = shared;
            let b = ModelBundle::init(&cfg, 3);
            let total = b.partition_len(Partition::Embedding)
                + b.partition_len(Partition::Linguistic)
                + b.partition_len(Partition::Visual);
            assert_eq!(total, b.partition_len(Partition::All));
            assert_eq!(b.serialize(Partition::All).len(), total);
        }
    }

    #[test]
    fn expected_partition_lengths_for_a_known_config() {
        let cfg = tiny();
        let (v, d, h) = (5, 4, 3);
        let b = ModelBundle::init(&cfg, 3);
        assert_eq!(b.partition_len(Partition::Embedding), v * d + d * d + d);
        let layer = |input: usize| input * 4 * h + h * 4 * h + 4 * h;
        let theta = 2 * layer(d) // one encoder layer, both directions
            + 2 * 2 * layer(2 * h) // two decoder layers
            + 2 * h * d + d // feature projection
            + d * (v + 1) + (v + 1); // head
        assert_eq!(b.partition_len(Partition::Linguistic), theta);
        let fe = |input: usize| input * d + 3 * d;
        let w = fe(3) + fe(3) + fe(2)
            + 3 * d * d + d // fusion
            + 6 * d * d + 4 * d // one attention block
            + 2 * d * d // cross-attention
            + d * (v + 1) + (v + 1) // visual head
            + d; // blank direction
        assert_eq!(b.partition_len(Partition::Visual), w);
    }

    #[test]
    fn private_codebook_extends_the_visual_partition() {
        let mut cfg = tiny();
        let shared = ModelBundle::init(&cfg, 3).partition_len(Partition::Visual);
        cfg.shared_embedding = false;
        let own = ModelBundle::init(&cfg, 3).partition_len(Partition::Visual);
        assert_eq!(own - shared, 5 * 4 + 4 * 4 + 4);
    }

    #[test]
    fn serialize_install_round_trips_bitwise() {
        let a = ModelBundle::init(&tiny(), 11);
        let mut b = ModelBundle::init(&tiny(), 99);
        for part in [
            Partition::Embedding,
            Partition::Linguistic,
            Partition::Visual,
        ] {
            b.install(part, &a.serialize(part)).unwrap();
        }
        assert_eq!(a.serialize(Partition::All), b.serialize(Partition::All));
    }

    #[test]
    fn wrong_payload_length_is_rejected() {
        let mut b = ModelBundle::init(&tiny(), 11);
        let short = vec![0.0; 3];
        assert!(matches!(
            b.install(Partition::Embedding, &short),
            Err(NnError::PayloadLength { .. })
        ));
    }

    #[test]
    fn byte_helpers_round_trip_and_reject_ragged_input() {
        let values = vec![0.0, -1.5, f64::MIN_POSITIVE, 3.25e100];
        let bytes = floats_to_le_bytes(&values);
        assert_eq!(le_bytes_to_floats(&bytes).unwrap(), values);
        assert!(matches!(
            le_bytes_to_floats(&bytes[..9]),
            Err(NnError::ByteLength(9))
        ));
    }

    #[test]
    fn norm_mask_covers_exactly_the_norm_vectors() {
        let b = ModelBundle::init(&tiny(), 2);
        let mask = b.visual_norm_mask();
        assert_eq!(mask.len(), b.partition_len(Partition::Visual));
        // 3 front-ends and 1 block, each with scale + shift of width 4.
        let marked = mask.iter().filter(|m| **m).count();
        assert_eq!(marked, 4 * 2 * 4);
    }

    #[test]
    fn shared_embedding_update_is_visible_to_the_visual_path() {
        let mut b = ModelBundle::init(&tiny(), 21);
        let mut rng = crate::rng::SeedStream::new(50);
        let lip = crate::nn::xavier(&mut rng, 2, 3);
        let hs = crate::nn::xavier(&mut rng, 2, 3);
        let hp = crate::nn::xavier(&mut rng, 2, 2);
        let run = |b: &ModelBundle| {
            let tape = Tape::new();
            let sess = Session::inference(&tape, &b.store);
            visual_forward(&sess, &b.cmml, &lip, &hs, &hp)
                .unwrap()
                .lin_logits
                .values()
                .to_vec()
        };
        let before = run(&b);
        let mut table = b.store.get(b.emb.table).values().to_vec();
        for v in &mut table {
            *v += 0.5;
        }
        b.store.set_values(b.emb.table, &table);
        assert_ne!(before, run(&b));
    }

    #[test]
    fn forward_paths_stay_finite_on_bounded_extreme_inputs() {
        let b = ModelBundle::init(&ModelConfig::default(), 4);
        let t = 4;
        let hi = |n: usize, m: usize, s: f64| Tensor::new(vec![n, m], vec![s; n * m]).unwrap();
        for s in [-10.0, 10.0] {
            let tape = Tape::new();
            let sess = Session::inference(&tape, &b.store);
            let out =
                visual_forward(&sess, &b.cmml, &hi(t, 8, s), &hi(t, 8, s), &hi(t, 2, s)).unwrap();
            assert!(out.lin_logits.values().iter().all(|v| v.is_finite()));
            let teach = teacher_text_forward(&sess, &b.cmml, &[0, 39, 7]).unwrap();
            assert!(teach.logits.values().iter().all(|v| v.is_finite()));
        }
    }
}
