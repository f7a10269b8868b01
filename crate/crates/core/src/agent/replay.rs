use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AgentError, ACTION_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Column-stacked transitions; one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Self {
        let items: Vec<&Transition> = items.into_iter().collect();
        let n = items.len();
        let dim = items.first().map_or(0, |t| t.state.len());
        let mut b = Self {
            states: Array2::zeros((n, dim)),
            actions: Array2::zeros((n, ACTION_DIM)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, dim)),
            dones: Array1::zeros(n),
        };
        for (r, t) in items.iter().enumerate() {
            b.states.row_mut(r).assign(&ndarray::aview1(&t.state));
            b.actions.row_mut(r).assign(&ndarray::aview1(&t.action));
            b.rewards[r] = t.reward;
            b.next_states.row_mut(r).assign(&ndarray::aview1(&t.next_state));
            b.dones[r] = if t.done { 1.0 } else { 0.0 };
        }
        b
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Fixed-capacity FIFO store with its own seeded sampling stream.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    /// Slot the next insertion overwrites once full.
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
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

    pub fn clear(&mut self) {
        self.storage.clear();
        self.head = 0;
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.storage.split_at(self.head);
        older.iter().chain(newer)
    }

    /// `n` uniform draws with replacement from the buffer's own stream.
    pub fn sample(&mut self, n: usize) -> Result<Batch, AgentError> {
        let idx = self.sample_indices(n)?;
        Ok(Batch::from_transitions(idx.iter().map(|&i| &self.storage[i])))
    }

    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>, AgentError> {
        Self::draw(self.storage.len(), n, &mut self.rng)
    }

    /// Sampling from an external seed; leaves the internal stream untouched.
    pub fn sample_seeded(&self, n: usize, seed: u64) -> Result<Batch, AgentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = Self::draw(self.storage.len(), n, &mut rng)?;
        Ok(Batch::from_transitions(idx.iter().map(|&i| &self.storage[i])))
    }

    fn draw(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, AgentError> {
        if n == 0 || len < n {
            return Err(AgentError::NotReady { size: len, needed: n.max(1) });
        }
        Ok((0..n).map(|_| rng.random_range(0..len)).collect())
    }
}
