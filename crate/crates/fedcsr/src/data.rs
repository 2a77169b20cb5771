//! Synthetic multi-cuer cued-speech data.
//!
//! Forty phonemes are the full cross product of eight hand shapes and five
//! hand positions, each also carrying one of twelve lip patterns. A cuer
//! renders a sentence as three framewise feature streams (lips, hand shape,
//! hand position) built from unit-norm prototypes, colored by cuer-specific
//! offsets, scale, speed, noise, and a hand stream that runs ahead of the
//! lips by a fixed lag. Splits are sentence-level: train sentences go to
//! every client through its own cuer, held-out sentences become the shared
//! test set through all cuers, and the server sees transcripts only.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::loss::SampleView;
use crate::rng::SeedStream;
use crate::tensor::Tensor;

pub const PHONEME_COUNT: usize = 40;
pub const SHAPE_COUNT: usize = 8;
pub const POSITION_COUNT: usize = 5;
pub const LIP_PATTERN_COUNT: usize = 12;
pub const LIP_DIM: usize = 8;
pub const SHAPE_DIM: usize = 8;
pub const POSITION_DIM: usize = 2;
const BASE_DURATION: f64 = 3.0;

/// Which shape/position/lip prototype each phoneme renders as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phoneme {
    pub shape: usize,
    pub position: usize,
    pub lip: usize,
}

/// The fixed phoneme set and its unit-norm prototype vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeInventory {
    pub phonemes: Vec<Phoneme>,
    pub shape_protos: Vec<Vec<f64>>,    // [8 x SHAPE_DIM]
    pub position_protos: Vec<Vec<f64>>, // [5 x POSITION_DIM]
    pub lip_protos: Vec<Vec<f64>>,      // [12 x LIP_DIM]
}

fn unit_vector(rng: &mut SeedStream, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        v[0] = 1.0;
        return v;
    }
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Deterministic inventory: phoneme `v` is shape `v / 5` with position
/// `v % 5`, so all shapes and positions are covered; lip patterns are drawn
/// from the seed.
pub fn build_inventory(seed: u64) -> PhonemeInventory {
    let mut rng = SeedStream::derived(seed, &[1]);
    let shape_protos = (0..SHAPE_COUNT)
        .map(|_| unit_vector(&mut rng, SHAPE_DIM))
        .collect();
    let position_protos = (0..POSITION_COUNT)
        .map(|_| unit_vector(&mut rng, POSITION_DIM))
        .collect();
    let lip_protos = (0..LIP_PATTERN_COUNT)
        .map(|_| unit_vector(&mut rng, LIP_DIM))
        .collect();
    let phonemes = (0..PHONEME_COUNT)
        .map(|v| Phoneme {
            shape: v / POSITION_COUNT,
            position: v % POSITION_COUNT,
            lip: rng.below(LIP_PATTERN_COUNT),
        })
        .collect();
    PhonemeInventory {
        phonemes,
        shape_protos,
        position_protos,
        lip_protos,
    }
}

/// How one person cues: per-stream appearance offsets, movement scale,
/// speaking speed, how far the hands run ahead, and sensor noise.
#[derive(Debug, Clone, PartialEq)]
pub struct CuerProfile {
    pub id: usize,
    pub lip_offset: Vec<f64>,
    pub shape_offset: Vec<f64>,
    pub position_offset: Vec<f64>,
    pub scale: f64,
    pub speed: f64,
    pub hand_lag: usize,
    pub sigma: f64,
}

impl CuerProfile {
    /// Draws `count` cuers; offsets are centered gaussians with deviation
    /// `offset_scale`, scale and speed sit in [0.8, 1.2], lag comes from
    /// the given set.
    pub fn generate(
        count: usize,
        offset_scale: f64,
        sigma: f64,
        lags: &[usize],
        seed: u64,
    ) -> Vec<CuerProfile> {
        assert!(!lags.is_empty(), "need at least one hand lag");
        (0..count)
            .map(|id| {
                let mut rng = SeedStream::derived(seed, &[2, id as u64]);
                CuerProfile {
                    id,
                    lip_offset: (0..LIP_DIM)
                        .map(|_| rng.gaussian(0.0, offset_scale))
                        .collect(),
                    shape_offset: (0..SHAPE_DIM)
                        .map(|_| rng.gaussian(0.0, offset_scale))
                        .collect(),
                    position_offset: (0..POSITION_DIM)
                        .map(|_| rng.gaussian(0.0, offset_scale))
                        .collect(),
                    scale: rng.uniform(0.8, 1.2),
                    speed: rng.uniform(0.8, 1.2),
                    hand_lag: *rng.pick(lags),
                    sigma,
                }
            })
            .collect()
    }
}

/// A transcript: phoneme ids plus word lengths that sum to the length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub label: Vec<usize>,
    pub word_lengths: Vec<usize>,
}

/// Random sentences with lengths uniform in `len_range` and words of
/// `word_range` phonemes (both inclusive).
pub fn generate_corpus(
    n: usize,
    len_range: (usize, usize),
    word_range: (usize, usize),
    seed: u64,
) -> Vec<Sentence> {
    assert!(
        0 < len_range.0 && len_range.0 <= len_range.1,
        "sentence length range"
    );
    assert!(
        0 < word_range.0 && word_range.0 <= word_range.1,
        "word length range"
    );
    let mut rng = SeedStream::derived(seed, &[3]);
    (0..n)
        .map(|_| {
            let len = rng.range(len_range.0, len_range.1);
            let label: Vec<usize> = (0..len).map(|_| rng.below(PHONEME_COUNT)).collect();
            let mut word_lengths = Vec::new();
            let mut left = len;
            while left > 0 {
                let w = rng.range(word_range.0, word_range.1).min(left);
                word_lengths.push(w);
                left -= w;
            }
            Sentence {
                label,
                word_lengths,
            }
        })
        .collect()
}

/// One rendered utterance: three streams over the same T frames, plus the
/// transcript and the per-frame phoneme the lips show (kept for feature
/// export).
#[derive(Debug, Clone)]
pub struct CuedSample {
    pub lip: Tensor,        // [T x LIP_DIM]
    pub hand_shape: Tensor, // [T x SHAPE_DIM]
    pub hand_pos: Tensor,   // [T x POSITION_DIM]
    pub label: Vec<usize>,
    pub word_lengths: Vec<usize>,
    pub cuer: usize,
    pub frame_phonemes: Vec<usize>,
}

impl CuedSample {
    pub fn frames(&self) -> usize {
        self.lip.rows()
    }

    pub fn view(&self) -> SampleView<'_> {
        SampleView {
            lip: &self.lip,
            hand_shape: &self.hand_shape,
            hand_pos: &self.hand_pos,
            label: &self.label,
        }
    }
}

fn stream_frame(
    proto: &[f64],
    offset: &[f64],
    scale: f64,
    sigma: f64,
    rng: &mut SeedStream,
    out: &mut Vec<f64>,
) {
    for j in 0..proto.len() {
        let noise = if sigma == 0.0 {
            0.0
        } else {
            rng.gaussian(0.0, sigma)
        };
        out.push(scale * proto[j] + offset[j] + noise);
    }
}

/// Renders one sentence as one cuer would produce it. Every phoneme lasts
/// `round(3 * speed)` frames; the hand streams at frame t show the phoneme
/// the lips will show at `t + hand_lag` (clamped at the end).
pub fn render_sample(
    sentence: &Sentence,
    cuer: &CuerProfile,
    inventory: &PhonemeInventory,
    seed: u64,
) -> CuedSample {
    let duration = (BASE_DURATION * cuer.speed).round().max(1.0) as usize;
    let frames = duration * sentence.label.len();
    let frame_phonemes: Vec<usize> = (0..frames).map(|t| sentence.label[t / duration]).collect();

    let mut rng = SeedStream::derived(seed, &[4]);
    let mut lip = Vec::with_capacity(frames * LIP_DIM);
    let mut shape = Vec::with_capacity(frames * SHAPE_DIM);
    let mut pos = Vec::with_capacity(frames * POSITION_DIM);
    for t in 0..frames {
        let p = inventory.phonemes[frame_phonemes[t]];
        stream_frame(
            &inventory.lip_protos[p.lip],
            &cuer.lip_offset,
            cuer.scale,
            cuer.sigma,
            &mut rng,
            &mut lip,
        );
        let ahead = (t + cuer.hand_lag).min(frames - 1);
        let h = inventory.phonemes[frame_phonemes[ahead]];
        stream_frame(
            &inventory.shape_protos[h.shape],
            &cuer.shape_offset,
            cuer.scale,
            cuer.sigma,
            &mut rng,
            &mut shape,
        );
        stream_frame(
            &inventory.position_protos[h.position],
            &cuer.position_offset,
            cuer.scale,
            cuer.sigma,
            &mut rng,
            &mut pos,
        );
    }
    CuedSample {
        lip: Tensor::new(vec![frames, LIP_DIM], lip).expect("finite lip stream"),
        hand_shape: Tensor::new(vec![frames, SHAPE_DIM], shape).expect("finite shape stream"),
        hand_pos: Tensor::new(vec![frames, POSITION_DIM], pos).expect("finite position stream"),
        label: sentence.label.clone(),
        word_lengths: sentence.word_lengths.clone(),
        cuer: cuer.id,
        frame_phonemes,
    }
}

/// Per-client training data, the shared test set, and the text-only corpus.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub clients: Vec<Vec<CuedSample>>,
    pub test: Vec<CuedSample>,
    pub server_corpus: Vec<Sentence>,
}

/// Sentence-level split: after deduplication, `ratio` of the sentences form
/// the training side (rendered once per cuer, one cuer per client), the rest
/// form the test side (rendered by every cuer). The server corpus is the
/// training transcripts, never any stream.
pub fn make_split(
    corpus: &[Sentence],
    cuers: &[CuerProfile],
    inventory: &PhonemeInventory,
    ratio: f64,
    seed: u64,
) -> DatasetSplit {
    assert!(0.0 < ratio && ratio < 1.0, "split ratio must be in (0, 1)");
    assert!(!cuers.is_empty(), "need at least one cuer");
    let mut unique: Vec<Sentence> = Vec::with_capacity(corpus.len());
    for s in corpus {
        if !unique.contains(s) {
            unique.push(s.clone());
        }
    }
    assert!(unique.len() >= 2, "need at least two distinct sentences");

    let mut order: Vec<usize> = (0..unique.len()).collect();
    SeedStream::derived(seed, &[5]).shuffle(&mut order);
    let n_train = ((ratio * unique.len() as f64).round() as usize).clamp(1, unique.len() - 1);

    let train: Vec<&Sentence> = order[..n_train].iter().map(|i| &unique[*i]).collect();
    let held_out: Vec<&Sentence> = order[n_train..].iter().map(|i| &unique[*i]).collect();

    let clients = cuers
        .iter()
        .map(|cuer| {
            train
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let sample_seed = crate::rng::derive_seed(seed, &[6, cuer.id as u64, i as u64]);
                    render_sample(s, cuer, inventory, sample_seed)
                })
                .collect()
        })
        .collect();
    let mut test = Vec::with_capacity(held_out.len() * cuers.len());
    for (j, s) in held_out.iter().enumerate() {
        for cuer in cuers {
            let sample_seed = crate::rng::derive_seed(seed, &[7, cuer.id as u64, j as u64]);
            test.push(render_sample(s, cuer, inventory, sample_seed));
        }
    }
    DatasetSplit {
        clients,
        test,
        server_corpus: train.into_iter().cloned().collect(),
    }
}

fn join<T: std::fmt::Debug>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn sample_line(s: &CuedSample) -> String {
    format!(
        "{};{};{};{};{};{};{}\n",
        s.cuer,
        join(&s.label),
        join(&s.word_lengths),
        s.frames(),
        join(s.lip.values()),
        join(s.hand_shape.values()),
        join(s.hand_pos.values()),
    )
}

/// Writes the split as plain text: one `client_<k>.txt` per client plus
/// `test.txt` (samples) and `corpus.txt` (transcripts). Sample lines are
/// semicolon-separated fields `cuer;label;word_lengths;frames;lip;shape;pos`
/// with comma-separated numbers, streams flattened row-major.
pub fn write_split(dir: &Path, split: &DatasetSplit) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let header = "# cuer;label;word_lengths;frames;lip;hand_shape;hand_pos\n";
    for (k, samples) in split.clients.iter().enumerate() {
        let mut f = fs::File::create(dir.join(format!("client_{k}.txt")))?;
        f.write_all(header.as_bytes())?;
        for s in samples {
            f.write_all(sample_line(s).as_bytes())?;
        }
    }
    let mut f = fs::File::create(dir.join("test.txt"))?;
    f.write_all(header.as_bytes())?;
    for s in &split.test {
        f.write_all(sample_line(s).as_bytes())?;
    }
    let mut f = fs::File::create(dir.join("corpus.txt"))?;
    f.write_all(b"# label;word_lengths\n")?;
    for s in &split.server_corpus {
        f.write_all(format!("{};{}\n", join(&s.label), join(&s.word_lengths)).as_bytes())?;
    }
    Ok(())
}
