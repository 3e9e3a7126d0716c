//! Loss-ranked sample hiding.
//!
//! Before every epoch the samples are ranked by lagging loss. The lowest
//! `⌊F_e·N⌋` become hiding candidates, and a candidate is actually hidden only
//! if its last forward pass predicted it correctly with confidence `pc ≥ τ`;
//! the rest are moved back into the training list. After the epoch's last
//! update, hidden samples get a forward-only refresh so that every sample's
//! state is at most one epoch old.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, SampleState, SampleStore};
use crate::model::{Model, Scratch};
use crate::optim::{adjusted_lr, OptimError};
use crate::rng::shuffle;

#[derive(Debug, Error)]
pub enum HidingError {
    #[error("invalid hiding config: {0}")]
    InvalidConfig(String),
    #[error("sample store not populated: {missing} samples have never been forwarded")]
    StoreNotPopulated { missing: usize },
    #[error(transparent)]
    Fraction(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("cannot write plan dump {path}: {source}")]
    Dump {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct HidingConfig {
    /// Maximum hidden fraction `F`, in `[0, 1)`.
    pub max_fraction: f64,
    /// Prediction-confidence threshold: hide only if `pc ≥ tau`.
    pub tau: f64,
    /// Step factors applied to `F` from the matching milestone on.
    pub decay_factors: Vec<f64>,
    pub decay_milestones: Vec<usize>,
    /// Fraction of highest-loss samples dropped each epoch (0 disables).
    pub drop_top_rate: f64,
}

impl Default for HidingConfig {
    fn default() -> Self {
        Self {
            max_fraction: 0.3,
            tau: 0.7,
            decay_factors: vec![1.0],
            decay_milestones: vec![0],
            drop_top_rate: 0.0,
        }
    }
}

impl HidingConfig {
    pub fn validate(&self) -> Result<(), HidingError> {
        let bad = |m: String| Err(HidingError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.max_fraction) {
            return bad(format!("hiding.max-fraction must be in [0, 1) (got {})", self.max_fraction));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("hiding.tau must be in [0, 1] (got {})", self.tau));
        }
        if self.decay_factors.is_empty() || self.decay_factors.len() != self.decay_milestones.len() {
            return bad(format!(
                "hiding.decay-factors ({}) and hiding.decay-milestones ({}) must be non-empty and of equal length",
                self.decay_factors.len(),
                self.decay_milestones.len()
            ));
        }
        if self.decay_milestones[0] != 0 {
            return bad("hiding.decay-milestones must start at epoch 0".into());
        }
        if self.decay_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("hiding.decay-milestones must be strictly increasing".into());
        }
        if self.decay_factors.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return bad("hiding.decay-factors must lie in (0, 1]".into());
        }
        if self.decay_factors[0] != 1.0 {
            return bad("hiding.decay-factors must start with 1 (schedule begins at the full fraction)".into());
        }
        if !(0.0..=0.1).contains(&self.drop_top_rate) {
            return bad(format!("hiding.drop-top-rate must be in [0, 0.1] (got {})", self.drop_top_rate));
        }
        Ok(())
    }
}

/// Scheduled maximum hidden fraction `F_e` for `epoch`.
pub fn fraction_at(cfg: &HidingConfig, epoch: usize) -> f64 {
    if epoch == 0 {
        return cfg.max_fraction;
    }
    let j = cfg
        .decay_milestones
        .iter()
        .rposition(|&m| m <= epoch)
        .unwrap_or(0);
    cfg.max_fraction * cfg.decay_factors[j]
}

/// `⌊fraction · n⌋`, tolerant of products like `0.29 · 100 = 28.999…`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// A sample may stay hidden only if it was predicted correctly with enough
/// confidence; `pc == tau` counts as confident.
#[inline]
pub fn is_confident(state: &SampleState, tau: f64) -> bool {
    state.pa && state.pc >= tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: usize,
    /// Shuffled; the order in which samples are trained this epoch.
    pub training_list: Vec<usize>,
    /// Ascending.
    pub hidden_list: Vec<usize>,
    /// Ascending; non-empty only with a DropTop rate.
    pub dropped_top_list: Vec<usize>,
    /// Scheduled maximum fraction `F_e`.
    pub fraction: f64,
    /// Realized fraction `F* = |hidden| / N`.
    pub realized_fraction: f64,
    /// Low-loss candidates returned to training for failing the PA/PC test.
    pub moved_back: usize,
    pub base_lr: f64,
    /// Learning rate for this epoch, `base_lr / (1 − F_e)`.
    pub eta: f64,
}

impl EpochPlan {
    pub fn n(&self) -> usize {
        self.training_list.len() + self.hidden_list.len() + self.dropped_top_list.len()
    }

    /// Plan that trains every sample, with the given learning rates.
    pub fn full<R: Rng + ?Sized>(epoch: usize, n: usize, fraction: f64, base_lr: f64, eta: f64, rng: &mut R) -> Self {
        let mut training_list: Vec<usize> = (0..n).collect();
        shuffle(&mut training_list, rng);
        Self {
            epoch,
            training_list,
            hidden_list: Vec::new(),
            dropped_top_list: Vec::new(),
            fraction,
            realized_fraction: 0.0,
            moved_back: 0,
            base_lr,
            eta,
        }
    }

    /// Checks that training, hidden and dropped lists partition `0..n`.
    pub fn check_partition(&self, n: usize) -> Result<(), String> {
        let mut seen = vec![false; n];
        for &i in self
            .training_list
            .iter()
            .chain(&self.hidden_list)
            .chain(&self.dropped_top_list)
        {
            if i >= n {
                return Err(format!("index {i} out of range"));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(format!("index {i} appears twice"));
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(format!("index {i} missing")),
            None => Ok(()),
        }
    }

    /// Forward-only samples after training: hidden and dropped, ascending.
    pub fn refresh_list(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .hidden_list
            .iter()
            .chain(&self.dropped_top_list)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Sample indices ordered by lagging loss ascending, ties by index.
pub fn rank_by_loss(states: &[SampleState]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..states.len()).collect();
    order.sort_by(|&a, &b| {
        states[a]
            .lagging_loss
            .total_cmp(&states[b].lagging_loss)
            .then(a.cmp(&b))
    });
    order
}

/// Builds the plan for `epoch` from the sample store.
///
/// Draws from `rng` only to shuffle the training list, so with `F = 0` the
/// stream is consumed exactly as in a plain full-dataset epoch.
pub fn select_hidden<R: Rng + ?Sized>(
    store: &SampleStore,
    cfg: &HidingConfig,
    epoch: usize,
    base_lr: f64,
    rng: &mut R,
) -> Result<EpochPlan, HidingError> {
    let n = store.len();
    let fraction = fraction_at(cfg, epoch);
    let eta = adjusted_lr(base_lr, fraction)?;
    if store.is_bootstrap() {
        return Ok(EpochPlan::full(epoch, n, fraction, base_lr, eta, rng));
    }
    if !store.is_populated() {
        let missing = store.states().iter().filter(|s| s.refreshed_at.is_none()).count();
        return Err(HidingError::StoreNotPopulated { missing });
    }

    let states = store.states();
    let order = rank_by_loss(states);
    let candidates = fraction_count(fraction, n);
    let mut hidden_list: Vec<usize> = order[..candidates]
        .iter()
        .copied()
        .filter(|&i| is_confident(&states[i], cfg.tau))
        .collect();
    let moved_back = candidates - hidden_list.len();
    hidden_list.sort_unstable();

    let mut excluded = vec![false; n];
    for &i in &hidden_list {
        excluded[i] = true;
    }
    let mut dropped_top_list: Vec<usize> = order
        .iter()
        .rev()
        .copied()
        .filter(|&i| !excluded[i])
        .take(fraction_count(cfg.drop_top_rate, n))
        .collect();
    dropped_top_list.sort_unstable();
    for &i in &dropped_top_list {
        excluded[i] = true;
    }

    let mut training_list: Vec<usize> = (0..n).filter(|&i| !excluded[i]).collect();
    shuffle(&mut training_list, rng);

    Ok(EpochPlan {
        epoch,
        realized_fraction: hidden_list.len() as f64 / n as f64,
        training_list,
        hidden_list,
        dropped_top_list,
        fraction,
        moved_back,
        base_lr,
        eta,
    })
}

/// Forward-only pass over the plan's hidden and dropped samples with the
/// current weights, in index order. Returns the number of forward passes.
pub fn refresh_hidden(
    model: &Model,
    dataset: &Dataset,
    plan: &EpochPlan,
    store: &mut SampleStore,
) -> Result<usize, HidingError> {
    let mut scratch = Scratch::default();
    let list = plan.refresh_list();
    for &i in &list {
        let o = model.sample_pass(dataset.row(i), dataset.labels[i], &mut scratch, None);
        store.record_forward(i, o.loss, o.pa, o.pc, plan.epoch)?;
    }
    Ok(list.len())
}

/// SGD steps in an epoch over `n - hidden` samples with batch size `b`; a
/// final partial batch counts as a step.
pub fn steps_per_epoch(n: usize, hidden: usize, b: usize) -> usize {
    assert!(b >= 1 && hidden <= n, "steps_per_epoch needs b >= 1 and hidden <= n");
    (n - hidden).div_ceil(b)
}

/// Share of the total per-sample gradient norm carried by `hidden`:
/// `Σ_hidden ‖∇ℓ_i‖ / Σ_all ‖∇ℓ_i‖`. A diagnostic outside the training
/// pipeline; it costs one backward pass per sample.
pub fn hidden_gradient_share(model: &Model, dataset: &Dataset, hidden: &[usize]) -> f64 {
    let mut scratch = Scratch::default();
    let mut grad = vec![0.0; model.num_params()];
    let norms: Vec<f64> = (0..dataset.n)
        .map(|i| {
            grad.fill(0.0);
            model.sample_pass(dataset.row(i), dataset.labels[i], &mut scratch, Some(&mut grad));
            grad.iter().map(|g| g * g).sum::<f64>().sqrt()
        })
        .collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    hidden.iter().map(|&i| norms[i]).sum::<f64>() / total
}

pub const PLAN_MAGIC: &[u8; 4] = b"KKPL";
pub const PLAN_VERSION: u32 = 1;

/// Binary plan dump, all integers little-endian `u32`:
/// magic `KKPL`, version, epoch, N, then three sections (training list
/// sorted ascending, hidden list, dropped-top list), each a count followed
/// by that many indices.
pub fn encode_plan(plan: &EpochPlan) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * plan.n() + 12);
    out.extend_from_slice(PLAN_MAGIC);
    let mut training = plan.training_list.clone();
    training.sort_unstable();
    for word in [PLAN_VERSION, plan.epoch as u32, plan.n() as u32] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for list in [&training, &plan.hidden_list, &plan.dropped_top_list] {
        out.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for &i in list.iter() {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_plan`]: `(epoch, n, [training, hidden, dropped])`.
pub fn decode_plan(bytes: &[u8]) -> Option<(u32, u32, [Vec<u32>; 3])> {
    let mut words = bytes.get(4..)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()));
    if bytes.get(..4)? != PLAN_MAGIC || words.next()? != PLAN_VERSION {
        return None;
    }
    let epoch = words.next()?;
    let n = words.next()?;
    let mut lists: [Vec<u32>; 3] = Default::default();
    for list in &mut lists {
        let count = words.next()? as usize;
        for _ in 0..count {
            list.push(words.next()?);
        }
    }
    if words.next().is_some() {
        return None;
    }
    Some((epoch, n, lists))
}

pub fn dump_plan(plan: &EpochPlan, dir: &Path) -> Result<PathBuf, HidingError> {
    let path = dir.join(format!("plan-{:05}.bin", plan.epoch));
    let io = |source| HidingError::Dump {
        path: path.clone(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut f = std::fs::File::create(&path).map_err(io)?;
    f.write_all(&encode_plan(plan)).map_err(io)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::rng::run_rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// N=10 store with loss 0.1·(i+1), all pa=true, pc=0.9.
    fn ladder_store() -> SampleStore {
        let mut store = SampleStore::new(10);
        for i in 0..10 {
            store.record_forward(i, 0.1 * (i + 1) as f64, true, 0.9, 0).unwrap();
        }
        store
    }

    fn cfg(f: f64) -> HidingConfig {
        HidingConfig {
            max_fraction: f,
            ..Default::default()
        }
    }

    fn plan(store: &SampleStore, c: &HidingConfig) -> EpochPlan {
        select_hidden(store, c, 1, 0.1, &mut run_rng(0)).unwrap()
    }

    #[test]
    fn gradient_share_bounds() {
        let ds = crate::data::gen_synthetic(crate::data::SyntheticKind::Blobs, 40, 3, 2, 1).unwrap();
        let mut rng = run_rng(2);
        let m = Model::init(Arch::Mlp1, 3, 4, 2, &mut rng).unwrap();
        assert_eq!(hidden_gradient_share(&m, &ds, &[]), 0.0);
        let all: Vec<usize> = (0..40).collect();
        assert!((hidden_gradient_share(&m, &ds, &all) - 1.0).abs() < 1e-12);
        let half = hidden_gradient_share(&m, &ds, &all[..20]);
        assert!(half > 0.0 && half < 1.0);
    }

    #[test]
    fn fraction_schedule() {
        let c = HidingConfig {
            max_fraction: 0.3,
            decay_factors: vec![1.0, 0.8, 0.6, 0.4],
            decay_milestones: vec![0, 30, 60, 80],
            ..Default::default()
        };
        assert_eq!(fraction_at(&c, 10), 0.3);
        assert!((fraction_at(&c, 45) - 0.24).abs() < 1e-15);
        assert!((fraction_at(&c, 90) - 0.12).abs() < 1e-15);
        assert_eq!(fraction_at(&c, 30), 0.3 * 0.8);
        assert_eq!(fraction_at(&cfg(0.3), 1000), 0.3);
        assert_eq!(fraction_at(&cfg(0.0), 7), 0.0);
    }

    #[test]
    fn lowest_losses_are_hidden() {
        let p = plan(&ladder_store(), &cfg(0.3));
        assert_eq!(p.hidden_list, vec![0, 1, 2]);
        assert_eq!(p.realized_fraction, 0.3);
        assert_eq!(p.moved_back, 0);
        assert!((p.eta - 0.1 / 0.7).abs() < 1e-16);
        p.check_partition(10).unwrap();
    }

    #[test]
    fn low_confidence_moves_back() {
        let mut store = ladder_store();
        store.record_forward(0, 0.1, true, 0.65, 0).unwrap();
        let p = plan(&store, &cfg(0.3));
        assert_eq!(p.hidden_list, vec![1, 2]);
        assert!((p.realized_fraction - 0.2).abs() < 1e-15);
        assert_eq!(p.moved_back, 1);
    }

    #[test]
    fn misprediction_moves_back() {
        let mut store = ladder_store();
        store.record_forward(1, 0.2, false, 0.99, 0).unwrap();
        let p = plan(&store, &cfg(0.3));
        assert_eq!(p.hidden_list, vec![0, 2]);
    }

    #[test]
    fn confidence_equal_to_tau_stays_hidden() {
        let mut store = ladder_store();
        store.record_forward(0, 0.1, true, 0.7, 0).unwrap();
        assert_eq!(plan(&store, &cfg(0.3)).hidden_list, vec![0, 1, 2]);
    }

    #[test]
    fn drop_top() {
        let c = HidingConfig {
            drop_top_rate: 0.1,
            ..cfg(0.3)
        };
        let p = plan(&ladder_store(), &c);
        assert_eq!(p.dropped_top_list, vec![9]);
        // rate generalized beyond the validated range for the example
        let c = HidingConfig {
            drop_top_rate: 0.2,
            ..cfg(0.3)
        };
        let p = plan(&ladder_store(), &c);
        assert_eq!(p.dropped_top_list, vec![8, 9]);
        assert_eq!(p.training_list.len(), 5);
        p.check_partition(10).unwrap();
    }

    #[test]
    fn ties_rank_by_index() {
        let mut store = SampleStore::new(5);
        for i in 0..5 {
            store.record_forward(i, 1.0, true, 1.0, 0).unwrap();
        }
        let p = select_hidden(&store, &cfg(0.4), 1, 0.1, &mut run_rng(0)).unwrap();
        assert_eq!(p.hidden_list, vec![0, 1]);
    }

    #[test]
    fn bootstrap_store_trains_everything() {
        let store = SampleStore::new(10);
        let p = select_hidden(&store, &cfg(0.3), 0, 0.1, &mut run_rng(0)).unwrap();
        assert!(p.hidden_list.is_empty());
        assert_eq!(p.training_list.len(), 10);
        assert_eq!(p.fraction, 0.3);
    }

    #[test]
    fn partial_store_is_rejected() {
        let mut store = SampleStore::new(3);
        store.record_forward(0, 0.1, true, 0.9, 0).unwrap();
        assert!(matches!(
            select_hidden(&store, &cfg(0.3), 1, 0.1, &mut run_rng(0)),
            Err(HidingError::StoreNotPopulated { missing: 2 })
        ));
    }

    #[test]
    fn zero_fraction_consumes_same_draws_as_full_plan() {
        let store = ladder_store();
        let mut a = run_rng(5);
        let mut b = run_rng(5);
        let p = select_hidden(&store, &cfg(0.0), 3, 0.1, &mut a).unwrap();
        let full = EpochPlan::full(3, 10, 0.0, 0.1, 0.1, &mut b);
        assert_eq!(p.training_list, full.training_list);
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn steps() {
        assert_eq!(steps_per_epoch(1000, 300, 100), 7);
        assert_eq!(steps_per_epoch(1000, 0, 100), 10);
        assert_eq!(steps_per_epoch(1000, 250, 100), 8);
        assert_eq!(steps_per_epoch(5, 5, 3), 0);
    }

    #[test]
    fn refresh_counts_and_purity() {
        let ds = crate::data::gen_synthetic(crate::data::SyntheticKind::Blobs, 10, 2, 2, 1).unwrap();
        let model = Model::init(Arch::Mlp1, 2, 3, 2, &mut run_rng(1)).unwrap();
        let before = model.params.clone();
        let mut store = ladder_store();
        let p = plan(&store, &cfg(0.3));
        let writes = store.writes();
        let mut p1 = p.clone();
        p1.epoch = 1;
        assert_eq!(refresh_hidden(&model, &ds, &p1, &mut store).unwrap(), 3);
        assert_eq!(store.writes() - writes, 3);
        for &i in &p1.hidden_list {
            assert_eq!(store.get(i).unwrap().refreshed_at, Some(1));
        }
        assert_eq!(model.params, before);
        let empty = select_hidden(&store, &cfg(0.0), 2, 0.1, &mut run_rng(0)).unwrap();
        assert_eq!(refresh_hidden(&model, &ds, &empty, &mut store).unwrap(), 0);
    }

    #[test]
    fn plan_dump_decodes() {
        let c = HidingConfig {
            drop_top_rate: 0.1,
            ..cfg(0.3)
        };
        let p = plan(&ladder_store(), &c);
        let (epoch, n, [t, h, d]) = decode_plan(&encode_plan(&p)).unwrap();
        assert_eq!((epoch, n), (1, 10));
        assert_eq!(h, vec![0, 1, 2]);
        assert_eq!(d, vec![9]);
        assert_eq!(t, vec![3, 4, 5, 6, 7, 8]);
        assert!(decode_plan(b"KKPL").is_none());
    }

    #[test]
    fn config_validation() {
        assert!(HidingConfig::default().validate().is_ok());
        assert!(cfg(1.0).validate().is_err());
        let c = HidingConfig {
            decay_factors: vec![0.9],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = HidingConfig {
            decay_factors: vec![1.0, 0.5],
            decay_milestones: vec![0, 0],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    fn arb_store() -> impl Strategy<Value = SampleStore> {
        prop::collection::vec((0.0f64..5.0, any::<bool>(), 0.0f64..=1.0), 1..80).prop_map(|rows| {
            let mut store = SampleStore::new(rows.len());
            for (i, (loss, pa, pc)) in rows.into_iter().enumerate() {
                store.record_forward(i, loss, pa, pc, 0).unwrap();
            }
            store
        })
    }

    proptest! {
        #[test]
        fn plan_invariants(store in arb_store(), f in 0.0f64..0.99, tau in 0.0f64..=1.0, drop in 0.0f64..=0.1, seed in any::<u64>()) {
            let c = HidingConfig { max_fraction: f, tau, drop_top_rate: drop, ..Default::default() };
            let n = store.len();
            let p = select_hidden(&store, &c, 1, 0.1, &mut run_rng(seed)).unwrap();
            prop_assert!(p.check_partition(n).is_ok());
            prop_assert!(p.realized_fraction <= p.fraction + 1e-12);
            prop_assert_eq!(p.hidden_list.len() + p.moved_back, fraction_count(f, n));
            let order = rank_by_loss(store.states());
            let lowest: std::collections::HashSet<usize> = order[..fraction_count(f, n)].iter().copied().collect();
            for &i in &p.hidden_list {
                let s = store.get(i).unwrap();
                prop_assert!(s.pa && s.pc >= tau);
                prop_assert!(lowest.contains(&i));
            }
        }

        #[test]
        fn higher_tau_never_hides_more(store in arb_store(), f in 0.0f64..0.99, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = select_hidden(&store, &HidingConfig { max_fraction: f, tau: lo, ..Default::default() }, 1, 0.1, &mut run_rng(0)).unwrap();
            let b = select_hidden(&store, &HidingConfig { max_fraction: f, tau: hi, ..Default::default() }, 1, 0.1, &mut run_rng(0)).unwrap();
            let a: std::collections::HashSet<_> = a.hidden_list.into_iter().collect();
            prop_assert!(b.hidden_list.iter().all(|i| a.contains(i)));
        }

        #[test]
        fn zero_tau_all_correct_hides_exact_floor(n in 1usize..200, f in 0.0f64..0.99) {
            let mut store = SampleStore::new(n);
            for i in 0..n {
                store.record_forward(i, (i * 7 % 13) as f64, true, 0.5, 0).unwrap();
            }
            let c = HidingConfig { max_fraction: f, tau: 0.0, ..Default::default() };
            let p = select_hidden(&store, &c, 1, 0.1, &mut run_rng(0)).unwrap();
            prop_assert_eq!(p.realized_fraction, fraction_count(f, n) as f64 / n as f64);
        }
    }
}
