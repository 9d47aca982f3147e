use rand::Rng;
use thiserror::Error;

use crate::task::{Observation, OBS_DIM};

/// One state transition `{o_k, a_k, r_{k+1}, o_{k+1}}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub o: Observation,
    pub a: f64,
    pub r: f64,
    pub o_next: Observation,
}

impl Experience {
    pub fn is_finite(&self) -> bool {
        self.o.iter().chain(&self.o_next).all(|v| v.is_finite()) && self.a.is_finite() && self.r.is_finite()
    }

    /// Flattened `o ‖ a ‖ r ‖ o'` (18 values).
    pub fn to_array(&self) -> [f64; 2 * OBS_DIM + 2] {
        let mut out = [0.0; 2 * OBS_DIM + 2];
        out[..OBS_DIM].copy_from_slice(&self.o);
        out[OBS_DIM] = self.a;
        out[OBS_DIM + 1] = self.r;
        out[OBS_DIM + 2..].copy_from_slice(&self.o_next);
        out
    }

    pub fn from_array(v: &[f64; 2 * OBS_DIM + 2]) -> Self {
        let mut o = [0.0; OBS_DIM];
        let mut o_next = [0.0; OBS_DIM];
        o.copy_from_slice(&v[..OBS_DIM]);
        o_next.copy_from_slice(&v[OBS_DIM + 2..]);
        Self {
            o,
            a: v[OBS_DIM],
            r: v[OBS_DIM + 1],
            o_next,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("replay buffer holds {fill} experiences, batch needs {needed}")]
pub struct InsufficientFill {
    pub fill: usize,
    pub needed: usize,
}

/// Fixed-capacity ring; once full every insert overwrites the oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Experience>,
    write_cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            write_cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn remember(&mut self, e: Experience) {
        if self.storage.len() < self.capacity {
            self.storage.push(e);
        } else {
            self.storage[self.write_cursor] = e;
        }
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
    }

    /// Stored experiences, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Experience> {
        let split = if self.storage.len() < self.capacity { 0 } else { self.write_cursor };
        self.storage[split..].iter().chain(&self.storage[..split])
    }

    /// Draws `batch_size` distinct entries uniformly at random.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Experience>, InsufficientFill> {
        if batch_size > self.storage.len() {
            return Err(InsufficientFill {
                fill: self.storage.len(),
                needed: batch_size,
            });
        }
        Ok(rand::seq::index::sample(rng, self.storage.len(), batch_size)
            .into_iter()
            .map(|i| self.storage[i])
            .collect())
    }
}
