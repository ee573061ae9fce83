//! Proportional prioritized replay on a sum tree.

use ndarray::{Array1, Array2};
use rand::Rng;

/// Binary sum tree over a power-of-two number of leaves.
///
/// Parents are recomputed from their children on every write so the sums never
/// drift.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        debug_assert!(value >= 0.0 && value.is_finite());
        let mut n = self.leaves + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if mass < left || self.nodes[2 * n + 1] == 0.0 {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub weights: Array1<f64>,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1 for terminal transitions.
    pub dones: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    exponent: f64,
    floor: f64,
    data: Vec<Transition>,
    next: usize,
    tree: SumTree,
    max_priority: f64,
}

impl ReplayBuffer {
    /// `exponent` shapes sampling as `P(i) ∝ p_i^exponent`; `floor` keeps every
    /// priority positive.
    pub fn new(capacity: usize, exponent: f64, floor: f64) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            exponent,
            floor,
            data: Vec::new(),
            next: 0,
            tree: SumTree::new(capacity),
            max_priority: 1.0,
        }
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

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    /// Adds a transition at the current maximum priority, overwriting the oldest
    /// once full.
    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.tree.set(self.next, self.max_priority.powf(self.exponent));
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    /// Stratified proportional draw of `n` indices.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let total = self.tree.total();
        let seg = total / n as f64;
        (0..n)
            .map(|i| {
                let mass = (seg * (i as f64 + rng.random::<f64>())).min(total * (1.0 - f64::EPSILON));
                self.tree.find(mass).min(self.data.len() - 1)
            })
            .collect()
    }

    /// Samples a batch with importance weights `(N P(i))^-beta` divided by the
    /// batch maximum.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, beta: f64, rng: &mut R) -> Batch {
        assert!(!self.is_empty());
        let indices = self.sample_indices(n, rng);
        let len = self.len() as f64;
        let mut weights: Array1<f64> = indices
            .iter()
            .map(|&i| (len * self.probability(i)).powf(-beta))
            .collect();
        let wmax = weights.fold(0.0f64, |m, &w| m.max(w));
        weights.mapv_inplace(|w| w / wmax);

        let s = self.data[0].state.len();
        let a = self.data[0].action.len();
        let mut states = Array2::zeros((n, s));
        let mut actions = Array2::zeros((n, a));
        let mut next_states = Array2::zeros((n, s));
        let mut rewards = Array1::zeros(n);
        let mut dones = Array1::zeros(n);
        for (r, &i) in indices.iter().enumerate() {
            let t = &self.data[i];
            states.row_mut(r).assign(&ndarray::ArrayView1::from(&t.state[..]));
            actions.row_mut(r).assign(&ndarray::ArrayView1::from(&t.action[..]));
            next_states.row_mut(r).assign(&ndarray::ArrayView1::from(&t.next_state[..]));
            rewards[r] = t.reward;
            dones[r] = f64::from(u8::from(t.done));
        }
        Batch {
            indices,
            weights,
            states,
            actions,
            rewards,
            next_states,
            dones,
        }
    }

    /// Sets the priority of each index to `|td| + floor`.
    pub fn update_priorities(&mut self, indices: &[usize], td: &[f64]) {
        for (&i, &d) in indices.iter().zip(td) {
            let p = if d.is_finite() { d.abs() + self.floor } else { self.max_priority };
            self.max_priority = self.max_priority.max(p);
            self.tree.set(i, p.powf(self.exponent));
        }
    }
}
