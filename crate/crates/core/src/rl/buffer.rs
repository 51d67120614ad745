//! Per-bus experience replay.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One local transition `(v, u, c, v')`. `done` marks a terminal next state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub v: f64,
    pub u: f64,
    pub c: f64,
    pub v_next: f64,
    pub done: bool,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.u.is_finite() && self.c.is_finite() && self.v_next.is_finite()
    }
}

/// Fixed-capacity ring with FIFO eviction and a seeded sampler.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            data: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
            rng,
        }
    }

    pub fn seeded(capacity: usize, seed: u64) -> Self {
        Self::new(capacity, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// `n` distinct stored transitions (all of them if fewer are stored).
    pub fn sample(&mut self, n: usize) -> Vec<Transition> {
        let n = n.min(self.data.len());
        index::sample(&mut self.rng, self.data.len(), n)
            .into_iter()
            .map(|i| self.data[i])
            .collect()
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data[self.head..].iter().chain(&self.data[..self.head])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(v: f64) -> Transition {
        Transition {
            v,
            u: 0.0,
            c: 0.0,
            v_next: v,
            done: false,
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = ReplayBuffer::seeded(3, 1);
        for k in 0..5 {
            b.push(tr(k as f64));
        }
        assert_eq!(b.len(), 3);
        let order: Vec<f64> = b.iter().map(|t| t.v).collect();
        assert_eq!(order, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn batches_have_no_repeats() {
        let mut b = ReplayBuffer::seeded(50, 2);
        for k in 0..20 {
            b.push(tr(k as f64));
        }
        let mut s: Vec<i64> = b.sample(20).iter().map(|t| t.v as i64).collect();
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
        assert_eq!(b.sample(64).len(), 20);
    }

    #[test]
    fn sampling_is_uniform() {
        // Chi-square with 19 degrees of freedom; 43.8 is the 0.999 quantile.
        let k = 20;
        let mut b = ReplayBuffer::seeded(k, 3);
        for i in 0..k {
            b.push(tr(i as f64));
        }
        let mut counts = vec![0usize; k];
        let draws = 4000;
        for _ in 0..draws {
            for t in b.sample(5) {
                counts[t.v as usize] += 1;
            }
        }
        let expect = (draws * 5) as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }
}
