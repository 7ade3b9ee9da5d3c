use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const BUFFER_CAPACITY: usize = 50;

/// History of generated images fed to the discriminator.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    slots: Vec<(Tensor<f32>, usize)>,
    rng: ChaCha8Rng,
}

/// Outcome of one query, for callers that want to force a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferChoice {
    Fresh,
    History(usize),
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        ReplayBuffer { capacity, slots: Vec::with_capacity(capacity), rng }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(BUFFER_CAPACITY, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    pub fn slots(&self) -> &[(Tensor<f32>, usize)] {
        &self.slots
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Rebuild from persisted parts.
    pub fn restore(capacity: usize, slots: Vec<(Tensor<f32>, usize)>, rng: ChaCha8Rng) -> Self {
        ReplayBuffer { capacity, slots, rng }
    }

    /// Store `fresh` while filling up. Once full, return `fresh` with
    /// probability 0.5, otherwise swap it with a random stored image.
    pub fn query(&mut self, fresh: Tensor<f32>, style: usize) -> (Tensor<f32>, usize) {
        if !self.is_full() {
            self.slots.push((fresh.clone(), style));
            return (fresh, style);
        }
        let choice = if self.rng.gen::<f64>() < 0.5 {
            BufferChoice::Fresh
        } else {
            BufferChoice::History(self.rng.gen_range(0..self.slots.len()))
        };
        self.query_with(fresh, style, choice)
    }

    /// Deterministic form of [`query`](Self::query) on a buffer that may
    /// already hold images.
    pub fn query_with(&mut self, fresh: Tensor<f32>, style: usize, choice: BufferChoice) -> (Tensor<f32>, usize) {
        match choice {
            BufferChoice::History(i) if i < self.slots.len() => std::mem::replace(&mut self.slots[i], (fresh, style)),
            _ if !self.is_full() => {
                self.slots.push((fresh.clone(), style));
                (fresh, style)
            }
            _ => (fresh, style),
        }
    }
}
