//! Proportional prioritized replay over a sum tree.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::Scalar;
use crate::staterep::History;

/// One stored step. States are kept as the ids they are built from and are
/// recomputed with the current slot weights whenever the transition is used.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub user: usize,
    pub history: History,
    pub action: Vec<T>,
    pub reward: f64,
    pub next_history: History,
    pub terminal: bool,
}

impl<T: Scalar> Transition<T> {
    pub fn new(
        user: usize,
        history: History,
        action: Vec<T>,
        reward: f64,
        next_history: History,
        terminal: bool,
    ) -> Result<Self> {
        if !(-1.0..=1.0).contains(&reward) {
            return Err(Error::InvalidArgument(format!("reward {reward} outside [-1, 1]")));
        }
        Ok(Transition { user, history, action, reward, next_history, terminal })
    }
}

/// Binary tree of partial sums over `capacity` leaves, stored heap-style with
/// the root at index 1.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    pub fn capacity(&self) -> usize {
        self.leaves
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.leaves + leaf]
    }

    /// Sets a leaf and recomputes every ancestor from its two children.
    pub fn set(&mut self, leaf: usize, value: f64) {
        let mut idx = self.leaves + leaf;
        self.nodes[idx] = value;
        while idx > 1 {
            idx /= 2;
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1];
        }
    }

    /// Leaf whose cumulative range contains `point`; never lands on a
    /// zero-mass leaf while the total is positive.
    pub fn find(&self, point: f64) -> usize {
        let mut idx = 1;
        let mut u = point;
        while idx < self.leaves {
            let (left, right) = (self.nodes[2 * idx], self.nodes[2 * idx + 1]);
            if (u < left && left > 0.0) || right <= 0.0 {
                idx *= 2;
            } else {
                u -= left;
                idx = 2 * idx + 1;
            }
        }
        idx - self.leaves
    }

    /// Internal nodes recomputed from scratch agree with the stored ones.
    pub fn is_consistent(&self) -> bool {
        (1..self.leaves).all(|i| self.nodes[i] == self.nodes[2 * i] + self.nodes[2 * i + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub priority_floor: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig { capacity: 100_000, alpha: 0.6, priority_floor: 1e-5 }
    }
}

/// Handle to a sampled slot; goes stale once the slot is overwritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRef {
    pub slot: usize,
    pub generation: u64,
}

#[derive(Debug, Clone)]
pub struct Sample<'a, X> {
    pub items: Vec<&'a X>,
    pub slots: Vec<SlotRef>,
    pub is_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrioritizedReplay<X> {
    config: ReplayConfig,
    tree: SumTree,
    items: Vec<Option<X>>,
    generations: Vec<u64>,
    cursor: usize,
    size: usize,
    max_priority: f64,
    pushes: u64,
    stale_skipped: u64,
}

impl<X> PrioritizedReplay<X> {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be >= 1".into()));
        }
        if !(config.priority_floor > 0.0) || !(config.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "priority floor {} and alpha {} must be positive",
                config.priority_floor, config.alpha
            )));
        }
        Ok(PrioritizedReplay {
            config,
            tree: SumTree::new(config.capacity),
            items: (0..config.capacity).map(|_| None).collect(),
            generations: vec![0; config.capacity],
            cursor: 0,
            size: 0,
            max_priority: 1.0,
            pushes: 0,
            stale_skipped: 0,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn get(&self, slot: usize) -> Option<&X> {
        self.items.get(slot).and_then(Option::as_ref)
    }

    /// Largest raw priority seen so far, 1.0 before any update.
    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn stale_skipped(&self) -> u64 {
        self.stale_skipped
    }

    fn leaf_value(&self, priority: f64) -> f64 {
        priority.max(self.config.priority_floor).powf(self.config.alpha)
    }

    /// Stores `item` at the cursor, overwriting the oldest entry when full,
    /// with leaf `max(priority, floor)^alpha`. Returns the slot.
    pub fn push(&mut self, item: X, priority: f64) -> usize {
        let slot = self.cursor;
        self.items[slot] = Some(item);
        self.generations[slot] += 1;
        let p = if priority.is_finite() { priority } else { self.max_priority };
        self.max_priority = self.max_priority.max(p);
        self.tree.set(slot, self.leaf_value(p));
        self.cursor = (self.cursor + 1) % self.config.capacity;
        self.size = (self.size + 1).min(self.config.capacity);
        self.pushes += 1;
        slot
    }

    /// Push with the largest priority seen so far.
    pub fn push_max(&mut self, item: X) -> usize {
        self.push(item, self.max_priority)
    }

    /// Stratified proportional sample of `n` entries with importance weights
    /// `(size * P(i))^-beta / max_j w_j`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, beta: f64, rng: &mut R) -> Result<Sample<'_, X>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be >= 1".into()));
        }
        if self.size < n {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {n} transitions from a buffer of {}",
                self.size
            )));
        }
        let total = self.tree.total();
        let segment = total / n as f64;
        let mut slots = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for j in 0..n {
            let lo = segment * j as f64;
            let point = (lo + rng.random::<f64>() * segment).min(total);
            let slot = self.tree.find(point);
            slots.push(SlotRef { slot, generation: self.generations[slot] });
            probs.push(self.tree.get(slot) / total);
        }
        let raw: Vec<f64> = probs
            .iter()
            .map(|&p| (self.size as f64 * p).powf(-beta))
            .collect();
        let max_w = raw.iter().copied().fold(f64::MIN, f64::max);
        let is_weights = raw.iter().map(|w| w / max_w).collect();
        let items = slots
            .iter()
            .map(|s| self.items[s.slot].as_ref().expect("sampled slot is filled"))
            .collect();
        Ok(Sample { items, slots, is_weights })
    }

    /// Sets each still-current slot to `(|delta| + floor)^alpha`. Slots
    /// overwritten since sampling are skipped and counted.
    pub fn update_priorities(&mut self, slots: &[SlotRef], td_errors: &[f64]) -> Result<usize> {
        if slots.len() != td_errors.len() {
            return Err(Error::Shape(format!(
                "{} slots for {} td errors",
                slots.len(),
                td_errors.len()
            )));
        }
        let mut updated = 0;
        for (s, &d) in slots.iter().zip(td_errors) {
            if s.slot >= self.config.capacity {
                return Err(Error::IdOutOfRange { what: "replay slot", id: s.slot, count: self.config.capacity });
            }
            if self.generations[s.slot] != s.generation || self.items[s.slot].is_none() {
                self.stale_skipped += 1;
                continue;
            }
            if !d.is_finite() {
                return Err(Error::NonFinite(format!("td error {d}")));
            }
            let p = d.abs() + self.config.priority_floor;
            self.max_priority = self.max_priority.max(p);
            self.tree.set(s.slot, p.powf(self.config.alpha));
            updated += 1;
        }
        Ok(updated)
    }
}

/// Linear annealing of the importance exponent over `total` steps.
pub fn beta_at(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total == 0 || step >= total {
        return end;
    }
    start + (end - start) * step as f64 / total as f64
}
