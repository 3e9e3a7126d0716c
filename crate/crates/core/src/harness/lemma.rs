//! Monte-Carlo check of the SGD contraction bound on a quadratic testbed.
//!
//! Component losses are `f_i(w) = (L_i/2)·‖w − b_i‖²`; each SGD step picks
//! one component uniformly at random. The bound under test is
//! `E‖w_T − w*‖² ≤ (1 − 2ηĈ)^T·‖w_0 − w*‖² + η·σ²/Ĉ` with
//! `Ĉ = λ·(1 − η·max L_i)`.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{derive_seed, run_rng};

#[derive(Debug, Error, PartialEq)]
pub enum LemmaError {
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("invalid testbed: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaConfig {
    pub curvatures: Vec<f64>,
    /// One target per component, all of the same dimension as `w0`.
    pub targets: Vec<Vec<f64>>,
    pub w0: Vec<f64>,
    pub eta: f64,
    pub iterations: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub m: usize,
    pub max_curvature: f64,
    pub eta: f64,
    pub iterations: usize,
    pub trials: usize,
    pub w_star: Vec<f64>,
    pub lambda: f64,
    pub c_hat: f64,
    pub sigma2: f64,
    pub initial_distance2: f64,
    pub bound: f64,
    pub empirical_mean: f64,
    pub stderr: f64,
    /// `E‖Δ_T‖²` from the exact first/second moment recursion.
    pub exact_mean: f64,
    pub pass: bool,
}

impl LemmaReport {
    pub fn noiseless(&self) -> bool {
        self.sigma2 == 0.0
    }
}

/// Targets spread evenly on a circle of `radius` in the plane.
pub fn circle_targets(m: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / m as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// λ in `Ĉ`: the strong-convexity constant of the average loss, which for
/// this testbed is the mean curvature.
pub fn lambda(curvatures: &[f64]) -> f64 {
    curvatures.iter().sum::<f64>() / curvatures.len() as f64
}

impl LemmaConfig {
    pub fn max_curvature(&self) -> f64 {
        self.curvatures.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn validate(&self) -> Result<(), LemmaError> {
        let bad = |m: String| Err(LemmaError::Invalid(m));
        if self.curvatures.is_empty() {
            return bad("at least one component is required".into());
        }
        if let Some(l) = self.curvatures.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return bad(format!("curvatures must be positive and finite (got {l})"));
        }
        if self.targets.len() != self.curvatures.len() {
            return bad(format!(
                "{} targets for {} curvatures",
                self.targets.len(),
                self.curvatures.len()
            ));
        }
        if self.w0.is_empty() || self.targets.iter().any(|b| b.len() != self.w0.len()) {
            return bad("targets and start point must share one non-zero dimension".into());
        }
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive (got {})", self.eta));
        }
        let max_l = self.max_curvature();
        if self.eta > 1.0 / max_l {
            return Err(LemmaError::PreconditionViolated(format!(
                "eta = {} exceeds 1/max L = {}",
                self.eta,
                1.0 / max_l
            )));
        }
        Ok(())
    }

    /// Minimizer of the average loss. With all targets equal it is that
    /// target exactly, so the noise term vanishes without rounding residue.
    pub fn w_star(&self) -> Vec<f64> {
        if self.targets.windows(2).all(|w| w[0] == w[1]) {
            return self.targets[0].clone();
        }
        let total: f64 = self.curvatures.iter().sum();
        let mut w = vec![0.0; self.w0.len()];
        for (l, b) in self.curvatures.iter().zip(&self.targets) {
            for (wj, bj) in w.iter_mut().zip(b) {
                *wj += l * bj;
            }
        }
        w.iter_mut().for_each(|x| *x /= total);
        w
    }

    /// Mean squared component-gradient norm at the optimum.
    pub fn sigma2(&self, w_star: &[f64]) -> f64 {
        let sum: f64 = self
            .curvatures
            .iter()
            .zip(&self.targets)
            .map(|(l, b)| l * l * dist2(w_star, b))
            .sum();
        sum / self.curvatures.len() as f64
    }

    /// Right-hand side of the bound.
    pub fn bound(&self, w_star: &[f64]) -> f64 {
        let c_hat = lambda(&self.curvatures) * (1.0 - self.eta * self.max_curvature());
        let sigma2 = self.sigma2(w_star);
        let noise = if sigma2 == 0.0 {
            0.0
        } else if c_hat == 0.0 {
            f64::INFINITY
        } else {
            self.eta * sigma2 / c_hat
        };
        (1.0 - 2.0 * self.eta * c_hat).powi(self.iterations as i32) * dist2(&self.w0, w_star) + noise
    }

    /// `E‖Δ_T‖²` propagated exactly through the linear recursion
    /// `Δ' = a_i·Δ + c_i`, `a_i = 1 − ηL_i`, `c_i = ηL_i·(b_i − w*)`.
    pub fn exact_mean(&self, w_star: &[f64]) -> f64 {
        let m = self.curvatures.len() as f64;
        let dim = self.w0.len();
        let (mut ea, mut ea2, mut ec2) = (0.0, 0.0, 0.0);
        let mut ec = vec![0.0; dim];
        let mut eac = vec![0.0; dim];
        for (l, b) in self.curvatures.iter().zip(&self.targets) {
            let a = 1.0 - self.eta * l;
            ea += a / m;
            ea2 += a * a / m;
            for j in 0..dim {
                let c = self.eta * l * (b[j] - w_star[j]);
                ec[j] += c / m;
                eac[j] += a * c / m;
                ec2 += c * c / m;
            }
        }
        let mut mu: Vec<f64> = self.w0.iter().zip(w_star).map(|(w, s)| w - s).collect();
        let mut s: f64 = mu.iter().map(|x| x * x).sum();
        for _ in 0..self.iterations {
            let cross: f64 = eac.iter().zip(&mu).map(|(x, y)| x * y).sum();
            s = ea2 * s + 2.0 * cross + ec2;
            for j in 0..dim {
                mu[j] = ea * mu[j] + ec[j];
            }
        }
        s
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Final `‖w_T − w*‖²` of one single-sample SGD chain. The chain is stepped
/// in offset coordinates `Δ = w − w*` so that distances far below the
/// spacing of doubles near `w*` stay resolvable.
fn run_chain(cfg: &LemmaConfig, w_star: &[f64], trial: u64) -> f64 {
    let mut rng = run_rng(derive_seed(cfg.seed, trial));
    let m = cfg.curvatures.len();
    let offsets: Vec<Vec<f64>> = cfg
        .targets
        .iter()
        .map(|b| b.iter().zip(w_star).map(|(bj, sj)| bj - sj).collect())
        .collect();
    let mut delta: Vec<f64> = cfg.w0.iter().zip(w_star).map(|(w, s)| w - s).collect();
    for _ in 0..cfg.iterations {
        let i = rng.random_range(0..m);
        let step = cfg.eta * cfg.curvatures[i];
        for (dj, oj) in delta.iter_mut().zip(&offsets[i]) {
            *dj -= step * (*dj - oj);
        }
    }
    delta.iter().map(|x| x * x).sum()
}

pub fn verify_lemma(cfg: &LemmaConfig) -> Result<LemmaReport, LemmaError> {
    cfg.validate()?;
    let w_star = cfg.w_star();
    let lambda = lambda(&cfg.curvatures);
    let max_l = cfg.max_curvature();
    let c_hat = lambda * (1.0 - cfg.eta * max_l);
    let sigma2 = cfg.sigma2(&w_star);
    let finals: Vec<f64> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| run_chain(cfg, &w_star, t))
        .collect();
    let n = finals.len() as f64;
    let constant = finals.windows(2).all(|w| w[0] == w[1]);
    let mean = if constant { finals[0] } else { finals.iter().sum::<f64>() / n };
    let stderr = if finals.len() > 1 && !constant {
        (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    let bound = cfg.bound(&w_star);
    Ok(LemmaReport {
        m: cfg.curvatures.len(),
        max_curvature: max_l,
        eta: cfg.eta,
        iterations: cfg.iterations,
        trials: cfg.trials,
        initial_distance2: dist2(&cfg.w0, &w_star),
        lambda,
        c_hat,
        sigma2,
        bound,
        empirical_mean: mean,
        stderr,
        exact_mean: cfg.exact_mean(&w_star),
        pass: mean <= bound + 3.0 * stderr,
        w_star,
    })
}

/// The default verification grid: 18 noisy cells (three curvature spreads,
/// three step sizes, two horizons) plus 6 noiseless cells.
pub fn default_grid(trials: usize, seed: u64) -> Vec<LemmaConfig> {
    let mut grid = Vec::new();
    let spreads: [&[f64]; 3] = [&[1.0, 1.0], &[0.5, 1.0, 2.0], &[1.0, 2.0, 3.0, 4.0]];
    for (si, spread) in spreads.iter().enumerate() {
        let max_l = spread.iter().copied().fold(0.0, f64::max);
        for factor in [0.2, 0.5, 0.9] {
            for iterations in [20, 200] {
                grid.push(LemmaConfig {
                    curvatures: spread.to_vec(),
                    targets: circle_targets(spread.len(), 2.0),
                    w0: vec![3.0, -2.0],
                    eta: factor / max_l,
                    iterations,
                    trials,
                    seed: derive_seed(seed, (grid.len() + 100 * si) as u64),
                });
            }
        }
    }
    let flat: [&[f64]; 2] = [&[1.0, 1.0], &[2.0, 2.0, 2.0]];
    for spread in flat {
        for (factor, iterations) in [(0.3, 10), (0.5, 30), (0.9, 60)] {
            grid.push(LemmaConfig {
                curvatures: spread.to_vec(),
                targets: vec![vec![1.0, 1.0]; spread.len()],
                w0: vec![3.0, -2.0],
                eta: factor / spread[0],
                iterations,
                trials,
                seed: derive_seed(seed, grid.len() as u64),
            });
        }
    }
    grid
}
