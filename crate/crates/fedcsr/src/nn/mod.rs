//! Model parameters and forward passes.
//!
//! All weights of a simulation participant live in one [`ParamStore`];
//! the embedding, seq2seq and visual sub-models hold typed [`ParamId`]
//! handles into it. Sharing the phoneme embedding between the linguistic
//! path and the visual codebook is therefore structural: both views hold
//! the same handles, and an update through either is seen by both.
//!
//! A [`Session`] binds parameters onto one tape for a single forward/backward
//! pass; frozen parameters enter as constants and never receive gradients.

mod bundle;
mod cmml;
mod embedding;
mod lstm;

pub use bundle::{
    floats_to_le_bytes, le_bytes_to_floats, ModelBundle, ModelConfig, Partition, Segment,
};
pub use cmml::{
    cross_attention, teacher_text_forward, visual_forward, AttnBlockHandles, CmmlHandles,
    CrossAttnOut, FrontEndHandles, TeacherOut, VisualOut,
};
pub use embedding::{codebook_projection, embed_text, EmbeddingHandles};
pub use lstm::{
    linguistic_forward, linguistic_from_embedded, BiLstmHandles, LinguisticOut, LstmLayerHandles,
};

use std::cell::RefCell;
use std::collections::HashMap;

use thiserror::Error;

use crate::rng::SeedStream;
use crate::tensor::{AdamHyper, AdamState, GradientMap, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{part:?} payload holds {want} values, got {got}")]
    PayloadLength {
        part: Partition,
        want: usize,
        got: usize,
    },
    #[error("parameter byte payload length {0} is not a multiple of 8")]
    ByteLength(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Handle of one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.tensors.push(t);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_values(&mut self, id: ParamId, values: &[f64]) {
        let slot = self.tensors[id.0].values_make_mut();
        assert_eq!(
            slot.len(),
            values.len(),
            "parameter {} size",
            self.names[id.0]
        );
        slot.copy_from_slice(values);
    }
}

/// Gradients keyed by parameter handle; absent means zero.
#[derive(Debug, Default)]
pub struct ParamGrads {
    grads: HashMap<usize, Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id.0)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// One forward/backward context: a tape plus the store it binds from.
///
/// The first `param` call for a handle records the leaf; later calls reuse
/// it, so a parameter used in several places accumulates one gradient.
/// Freezing must happen before the parameter is first bound.
pub struct Session<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<HashMap<usize, Tensor>>,
    frozen: Vec<bool>,
    all_frozen: bool,
    pinned: RefCell<Option<(usize, Tensor)>>,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Session {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
            frozen: vec![false; store.len()],
            all_frozen: false,
            pinned: RefCell::new(None),
        }
    }

    /// Session where every parameter is a constant: nothing is recorded,
    /// forward passes are pure evaluation.
    pub fn inference(tape: &'a Tape, store: &'a ParamStore) -> Self {
        let mut s = Session::new(tape, store);
        s.all_frozen = true;
        s
    }

    pub fn tape(&self) -> &Tape {
        self.tape
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn freeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            debug_assert!(
                !self.bound.borrow().contains_key(&id.0),
                "freeze after binding {}",
                self.store.name(*id)
            );
            self.frozen[id.0] = true;
        }
    }

    /// Substitutes an already-taped tensor for one parameter; used by the
    /// finite-difference harness to perturb a single weight group.
    pub fn pin(&self, id: ParamId, t: Tensor) {
        *self.pinned.borrow_mut() = Some((id.0, t));
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        if let Some((pin_id, t)) = self.pinned.borrow().as_ref() {
            if *pin_id == id.0 {
                return t.clone();
            }
        }
        if self.all_frozen || self.frozen[id.0] {
            return self.store.get(id).detach();
        }
        self.bound
            .borrow_mut()
            .entry(id.0)
            .or_insert_with(|| self.tape.leaf(self.store.get(id)))
            .clone()
    }

    /// Projects a backward pass onto parameter handles.
    pub fn grads(&self, map: &GradientMap) -> ParamGrads {
        let mut out = ParamGrads::default();
        for (pid, tensor) in self.bound.borrow().iter() {
            if let Some(g) = map.for_tensor(tensor) {
                out.grads.insert(*pid, g.clone());
            }
        }
        out
    }
}

/// Adam over a fixed list of parameter handles.
#[derive(Debug, Clone)]
pub struct Optimizer {
    ids: Vec<ParamId>,
    state: AdamState,
    pub hyper: AdamHyper,
}

impl Optimizer {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, hyper: AdamHyper) -> Self {
        let sizes: Vec<usize> = ids.iter().map(|id| store.get(*id).len()).collect();
        Optimizer {
            ids,
            state: AdamState::new(&sizes),
            hyper,
        }
    }

    pub fn steps(&self) -> u64 {
        self.state.steps()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        let aligned: Vec<Option<&[f64]>> = self
            .ids
            .iter()
            .map(|id| grads.get(*id).map(|t| t.values()))
            .collect();
        let position: HashMap<usize, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(k, id)| (id.0, k))
            .collect();
        let mut slots: Vec<Option<&mut Vec<f64>>> = (0..self.ids.len()).map(|_| None).collect();
        for (i, t) in store.tensors.iter_mut().enumerate() {
            if let Some(k) = position.get(&i) {
                slots[*k] = Some(t.values_make_mut());
            }
        }
        let mut params: Vec<&mut Vec<f64>> = slots
            .into_iter()
            .map(|s| s.expect("missing param"))
            .collect();
        self.state.step(&mut params, &aligned, self.hyper);
    }
}

/// Uniform init in +-sqrt(6 / (fan_in + fan_out)); biases start at zero.
pub(crate) fn xavier(rng: &mut SeedStream, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Tensor::new(vec![rows, cols], values).expect("xavier init")
}
