//! Flat parameter storage with named entries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Location of one named array inside the trainable or state buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn get<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn get_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Trainable weights live in `values`; running statistics in `state`.
    pub trainable: bool,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub state: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub(crate) fn new() -> Self {
        ParamStore {
            values: Vec::new(),
            state: Vec::new(),
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, trainable: bool, init: Vec<f64>) -> Slot {
        let buf = if trainable { &mut self.values } else { &mut self.state };
        let slot = Slot {
            offset: buf.len(),
            len: init.len(),
        };
        debug_assert_eq!(init.len(), shape.iter().product::<usize>());
        buf.extend(init);
        self.entries.push(ParamEntry {
            name,
            shape,
            trainable,
            offset: slot.offset,
        });
        slot
    }

    /// Glorot-uniform weights.
    pub(crate) fn glorot(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Slot {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len = shape.iter().product();
        let init = (0..len).map(|_| rng.random_range(-limit..limit)).collect();
        self.push(name, shape, true, init)
    }

    pub(crate) fn constant(&mut self, name: String, len: usize, value: f64, trainable: bool) -> Slot {
        self.push(name, vec![len], trainable, vec![value; len])
    }

    pub(crate) fn with_init(&mut self, name: String, init: Vec<f64>) -> Slot {
        let shape = vec![init.len()];
        self.push(name, shape, true, init)
    }

    pub fn trainable_count(&self) -> usize {
        self.values.len()
    }

    pub fn state_count(&self) -> usize {
        self.state.len()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}
