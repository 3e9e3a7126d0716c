//! Comparison strategies: importance sampling with replacement (ISWR),
//! Selective-Backprop (SB), and online forgetting-event pruning (FORGET).

use std::collections::VecDeque;

use rand::Rng;
use thiserror::Error;

use crate::hiding::fraction_count;

#[derive(Debug, Error, PartialEq)]
pub enum ComparatorError {
    #[error("forgetting statistics are frozen once the dataset has been pruned")]
    PrunedAlready,
    #[error("pruning needs {needed} counting epochs, only {done} completed")]
    CountingIncomplete { needed: usize, done: usize },
    #[error("sample index {idx} out of range for {n} samples")]
    IndexOutOfRange { idx: usize, n: usize },
}

/// Binary indexed tree over non-negative weights supporting point updates
/// and inverse-CDF sampling in `O(log n)`.
#[derive(Debug, Clone)]
struct SumTree {
    tree: Vec<f64>,
}

impl SumTree {
    fn build(weights: &[f64]) -> Self {
        let n = weights.len();
        let mut tree = vec![0.0; n + 1];
        // children always precede their parent, so each node is complete
        // before it is folded upward
        for (i, &w) in weights.iter().enumerate() {
            let j = i + 1;
            tree[j] += w;
            let parent = j + (j & j.wrapping_neg());
            if parent <= n {
                tree[parent] += tree[j];
            }
        }
        Self { tree }
    }

    fn add(&mut self, i: usize, delta: f64) {
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut j = self.tree.len() - 1;
        let mut s = 0.0;
        while j > 0 {
            s += self.tree[j];
            j &= j - 1;
        }
        s
    }

    /// Smallest index whose inclusive prefix sum exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = if n == 0 { 0 } else { 1usize << (usize::BITS - 1 - n.leading_zeros()) };
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Loss-proportional sampler. Weights are the samples' lagging losses,
/// floored at `1e-6 · mean(weights)` so no sample starves.
#[derive(Debug, Clone)]
pub struct IswrState {
    weights: Vec<f64>,
    sum: f64,
    tree: SumTree,
}

pub const ISWR_FLOOR_RATIO: f64 = 1e-6;

impl IswrState {
    /// Uniform weights, used before any loss is known.
    pub fn uniform(n: usize) -> Self {
        Self::with_weights(vec![1.0; n])
    }

    pub fn with_weights(weights: Vec<f64>) -> Self {
        assert!(!weights.is_empty(), "ISWR needs at least one sample");
        assert!(
            weights.iter().all(|w| w.is_finite() && *w > 0.0),
            "ISWR weights must be finite and positive"
        );
        let tree = SumTree::build(&weights);
        let sum = weights.iter().sum();
        Self { weights, sum, tree }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w / self.sum).collect()
    }

    fn floor(&self) -> f64 {
        ISWR_FLOOR_RATIO * self.sum / self.weights.len() as f64
    }

    /// Sets sample `idx`'s weight from a freshly observed loss.
    pub fn update(&mut self, idx: usize, loss: f64) {
        let w = if loss.is_finite() { loss.max(self.floor()) } else { self.floor() };
        let delta = w - self.weights[idx];
        self.weights[idx] = w;
        self.sum += delta;
        self.tree.add(idx, delta);
    }

    /// Recomputes the running sums exactly; called once per epoch to shed
    /// accumulated rounding from incremental updates.
    pub fn rebuild(&mut self) {
        self.tree = SumTree::build(&self.weights);
        self.sum = self.weights.iter().sum();
    }

    /// `count` independent draws with replacement, `P(i) = w_i / Σ w`.
    pub fn draw<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<usize> {
        let total = self.tree.total();
        (0..count)
            .map(|_| self.tree.find(rng.random::<f64>() * total))
            .collect()
    }
}

/// Default loss-history window for Selective-Backprop.
pub const SB_WINDOW: usize = 1024;

/// Running loss history for Selective-Backprop.
#[derive(Debug, Clone)]
pub struct SbState {
    history: VecDeque<f64>,
    window: usize,
    pub beta: f64,
}

impl SbState {
    pub fn new(beta: f64, window: usize) -> Self {
        assert!(window >= 1, "SB window must be >= 1");
        Self {
            history: VecDeque::with_capacity(window),
            window,
            beta,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn push(&mut self, loss: f64) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(loss);
    }

    /// Mid-rank empirical CDF of `loss` in the history: `(#less + #equal/2) / len`.
    pub fn cdf(&self, loss: f64) -> f64 {
        let (mut less, mut equal) = (0usize, 0usize);
        for &h in &self.history {
            if h < loss {
                less += 1;
            } else if h == loss {
                equal += 1;
            }
        }
        (less as f64 + 0.5 * equal as f64) / self.history.len() as f64
    }

    /// Backprop probability `cdf(loss)^β`; 1 while the history is empty.
    pub fn probability(&self, loss: f64) -> f64 {
        if self.history.is_empty() {
            1.0
        } else {
            self.cdf(loss).powf(self.beta)
        }
    }
}

/// Chooses which samples of a forwarded batch get a backward pass. Returns
/// positions within `batch_losses`. One uniform draw is consumed per sample.
/// The batch's losses join the history afterwards.
pub fn sb_select<R: Rng + ?Sized>(batch_losses: &[f64], state: &mut SbState, rng: &mut R) -> Vec<usize> {
    let probs: Vec<f64> = batch_losses.iter().map(|&l| state.probability(l)).collect();
    let selected = probs
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| (rng.random::<f64>() < p).then_some(i))
        .collect();
    for &l in batch_losses {
        state.push(l);
    }
    selected
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgetPhase {
    Counting { epochs_done: usize },
    Pruned,
}

/// Forgetting-event counts from the counting phase.
#[derive(Debug, Clone)]
pub struct ForgetState {
    prev_correct: Vec<bool>,
    forget_events: Vec<u32>,
    ever_correct: Vec<bool>,
    count_epochs: usize,
    phase: ForgetPhase,
}

impl ForgetState {
    pub fn new(n: usize, count_epochs: usize) -> Self {
        Self {
            prev_correct: vec![false; n],
            forget_events: vec![0; n],
            ever_correct: vec![false; n],
            count_epochs,
            phase: ForgetPhase::Counting { epochs_done: 0 },
        }
    }

    pub fn phase(&self) -> ForgetPhase {
        self.phase
    }

    pub fn count_epochs(&self) -> usize {
        self.count_epochs
    }

    pub fn events(&self) -> &[u32] {
        &self.forget_events
    }

    pub fn ever_correct(&self) -> &[bool] {
        &self.ever_correct
    }

    /// Records one classification outcome of sample `idx`. A correct →
    /// incorrect transition is a forgetting event.
    pub fn update(&mut self, idx: usize, correct_now: bool) -> Result<(), ComparatorError> {
        if self.phase == ForgetPhase::Pruned {
            return Err(ComparatorError::PrunedAlready);
        }
        let n = self.prev_correct.len();
        if idx >= n {
            return Err(ComparatorError::IndexOutOfRange { idx, n });
        }
        if self.prev_correct[idx] && !correct_now {
            self.forget_events[idx] += 1;
        }
        self.prev_correct[idx] = correct_now;
        self.ever_correct[idx] |= correct_now;
        Ok(())
    }

    pub fn end_epoch(&mut self) -> Result<(), ComparatorError> {
        match &mut self.phase {
            ForgetPhase::Counting { epochs_done } => {
                *epochs_done += 1;
                Ok(())
            }
            ForgetPhase::Pruned => Err(ComparatorError::PrunedAlready),
        }
    }

    /// Event count used for ranking; samples never classified correctly get
    /// `u32::MAX` and are never pruned.
    pub fn ranking_events(&self, idx: usize) -> u32 {
        if self.ever_correct[idx] {
            self.forget_events[idx]
        } else {
            u32::MAX
        }
    }

    /// Prunes `⌊fraction · N⌋` samples with the fewest forgetting events
    /// (ties by index), skipping never-correct samples. Returns the pruned
    /// indices in ascending order and ends the counting phase.
    pub fn prune(&mut self, fraction: f64) -> Result<Vec<usize>, ComparatorError> {
        match self.phase {
            ForgetPhase::Pruned => return Err(ComparatorError::PrunedAlready),
            ForgetPhase::Counting { epochs_done } if epochs_done < self.count_epochs => {
                return Err(ComparatorError::CountingIncomplete {
                    needed: self.count_epochs,
                    done: epochs_done,
                })
            }
            ForgetPhase::Counting { .. } => {}
        }
        let n = self.prev_correct.len();
        let mut order: Vec<usize> = (0..n).filter(|&i| self.ever_correct[i]).collect();
        order.sort_by_key(|&i| (self.forget_events[i], i));
        order.truncate(fraction_count(fraction, n));
        order.sort_unstable();
        self.phase = ForgetPhase::Pruned;
        Ok(order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::run_rng;

    #[test]
    fn iswr_probabilities_normalize() {
        let s = IswrState::with_weights(vec![1.0, 1.0, 2.0]);
        assert_eq!(s.probabilities(), vec![0.25, 0.25, 0.5]);
    }

    #[test]
    fn sum_tree_find_matches_linear_scan() {
        let weights = [0.5, 0.0001, 3.0, 1.0, 2.5, 0.7, 0.2];
        let tree = SumTree::build(&weights);
        let total: f64 = weights.iter().sum();
        assert!((tree.total() - total).abs() < 1e-12);
        for step in 0..1000 {
            let t = total * step as f64 / 1000.0;
            let mut acc = 0.0;
            let want = weights
                .iter()
                .position(|w| {
                    acc += w;
                    acc > t
                })
                .unwrap();
            assert_eq!(tree.find(t), want, "target {t}");
        }
    }

    #[test]
    fn iswr_update_moves_mass() {
        let mut s = IswrState::uniform(4);
        s.update(2, 5.0);
        assert_eq!(s.weights(), &[1.0, 1.0, 5.0, 1.0]);
        s.update(1, 0.0);
        // floored at 1e-6 · mean
        assert!(s.weights()[1] > 0.0 && s.weights()[1] < 1e-5);
        let mut fresh = s.clone();
        fresh.rebuild();
        assert!((fresh.tree.total() - s.tree.total()).abs() < 1e-12);
    }

    #[test]
    fn iswr_dominant_weight() {
        let mut w = vec![1.0; 100];
        w[17] = 1e6;
        let s = IswrState::with_weights(w);
        let mut rng = run_rng(11);
        let batches = 10_000;
        let hits: usize = (0..batches)
            .map(|_| s.draw(8, &mut rng).iter().filter(|&&i| i == 17).count())
            .sum();
        let mean = hits as f64 / batches as f64;
        assert!((7.9..=8.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn sb_median_is_one_half() {
        let mut s = SbState::new(1.0, 16);
        for l in [1.0, 2.0, 3.0, 4.0, 5.0] {
            s.push(l);
        }
        assert_eq!(s.probability(3.0), 0.5);
        let mut even = SbState::new(1.0, 16);
        for l in [1.0, 2.0, 3.0, 4.0] {
            even.push(l);
        }
        assert_eq!(even.probability(2.5), 0.5);
    }

    #[test]
    fn sb_beta_zero_keeps_everything() {
        let mut s = SbState::new(0.0, 8);
        let mut rng = run_rng(2);
        for l in [0.1, 0.2, 0.3] {
            s.push(l);
        }
        let sel = sb_select(&[0.0, 0.05, 10.0], &mut s, &mut rng);
        assert_eq!(sel, vec![0, 1, 2]);
    }

    #[test]
    fn sb_first_batch_selects_all_and_window_is_bounded() {
        let mut s = SbState::new(1.0, 4);
        let sel = sb_select(&[0.3, 0.1, 0.2], &mut s, &mut run_rng(0));
        assert_eq!(sel, vec![0, 1, 2]);
        sb_select(&[0.3, 0.1, 0.2], &mut s, &mut run_rng(0));
        assert_eq!(s.history_len(), 4);
    }

    #[test]
    fn forgetting_events() {
        let run = |seq: &[bool]| {
            let mut f = ForgetState::new(1, 1);
            for &c in seq {
                f.update(0, c).unwrap();
            }
            (f.events()[0], f.ever_correct()[0], f.ranking_events(0))
        };
        assert_eq!(run(&[true, true, true, true]), (0, true, 0));
        assert_eq!(run(&[true, false, true, false]), (2, true, 2));
        assert_eq!(run(&[false, false, false, false]), (0, false, u32::MAX));
    }

    #[test]
    fn prune_least_forgotten() {
        let mut f = ForgetState::new(10, 1);
        // samples 0 and 1 always correct; 2..10 forgotten 1..=8 times
        for i in 0..10 {
            f.update(i, true).unwrap();
            for _ in 0..i.saturating_sub(1) {
                f.update(i, false).unwrap();
                f.update(i, true).unwrap();
            }
        }
        f.end_epoch().unwrap();
        assert_eq!(&f.events()[..4], &[0, 0, 1, 2]);
        assert_eq!(f.prune(0.2).unwrap(), vec![0, 1]);
        assert_eq!(f.update(0, true), Err(ComparatorError::PrunedAlready));
        assert_eq!(f.prune(0.2), Err(ComparatorError::PrunedAlready));
    }

    #[test]
    fn prune_preconditions_and_never_correct() {
        let mut f = ForgetState::new(5, 2);
        f.end_epoch().unwrap();
        assert_eq!(f.prune(0.4), Err(ComparatorError::CountingIncomplete { needed: 2, done: 1 }));
        f.end_epoch().unwrap();
        assert!(f.prune(0.8).unwrap().is_empty());

        let mut f = ForgetState::new(4, 0);
        f.update(3, true).unwrap();
        assert_eq!(f.prune(0.0).unwrap(), Vec::<usize>::new());
        let mut f = ForgetState::new(4, 0);
        f.update(3, true).unwrap();
        assert_eq!(f.prune(0.75).unwrap(), vec![3]);
    }
}
