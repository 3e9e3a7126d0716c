//! Side-by-side runs of several strategies over repeated seeds.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::{run_with_data, HarnessError, RunConfig, RunOutcome, Strategy};
use crate::data::Dataset;

#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub cfg: RunConfig,
}

impl Variant {
    /// One variant per strategy, all sharing `base` apart from the strategy.
    pub fn per_strategy(base: &RunConfig, strategies: &[Strategy]) -> Vec<Variant> {
        strategies
            .iter()
            .map(|&s| Variant {
                label: s.to_string(),
                cfg: RunConfig {
                    strategy: s,
                    ..base.clone()
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub label: String,
    pub strategy: Strategy,
    /// Best test top-1 of each repeat, in percent.
    pub best_acc: Vec<f64>,
    pub backward: Vec<u64>,
    pub wall_clock_ms: Vec<f64>,
    pub outcomes: Vec<RunOutcome>,
}

impl CompareRow {
    pub fn acc_mean(&self) -> f64 {
        mean(&self.best_acc)
    }

    pub fn acc_std(&self) -> f64 {
        std_dev(&self.best_acc)
    }

    pub fn backward_mean(&self) -> f64 {
        self.backward.iter().map(|&b| b as f64).sum::<f64>() / self.backward.len() as f64
    }

    pub fn wall_clock_mean_ms(&self) -> f64 {
        mean(&self.wall_clock_ms)
    }
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub repeats: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for a single value.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Runs every variant `repeats` times with seeds `seed, seed+1, ...` on a pool
/// of `jobs` threads. Results do not depend on `jobs`.
pub fn compare(
    variants: &[Variant],
    repeats: usize,
    jobs: usize,
    train: &Dataset,
    test: &Dataset,
) -> Result<CompareReport, HarnessError> {
    if variants.is_empty() {
        return Err(HarnessError::Config("no strategies to compare".into()));
    }
    if repeats == 0 {
        return Err(HarnessError::Config("repeats must be >= 1".into()));
    }
    for v in variants {
        v.cfg.validate()?;
        v.cfg.validate_for(train)?;
    }
    let tasks: Vec<(usize, RunConfig)> = variants
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| {
            (0..repeats).map(move |r| {
                let mut cfg = v.cfg.clone();
                cfg.seed = v.cfg.seed.wrapping_add(r as u64);
                (vi, cfg)
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let results: Vec<Result<RunOutcome, HarnessError>> =
        pool.install(|| tasks.par_iter().map(|(_, cfg)| run_with_data(cfg, train, test, |_| {})).collect());

    let mut rows: Vec<CompareRow> = variants
        .iter()
        .map(|v| CompareRow {
            label: v.label.clone(),
            strategy: v.cfg.strategy,
            best_acc: Vec::new(),
            backward: Vec::new(),
            wall_clock_ms: Vec::new(),
            outcomes: Vec::new(),
        })
        .collect();
    for ((vi, _), result) in tasks.iter().zip(results) {
        let outcome = result?;
        let row = &mut rows[*vi];
        row.best_acc.push(100.0 * outcome.summary.best_test_top1);
        row.backward.push(outcome.summary.total_backward);
        row.wall_clock_ms.push(outcome.summary.total_wall_clock_ms);
        row.outcomes.push(outcome);
    }
    Ok(CompareReport { rows, repeats })
}

impl CompareReport {
    fn baseline(&self) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.strategy == Strategy::Baseline)
    }

    /// Accuracy difference to the baseline in percentage points.
    pub fn diff_pp(&self, row: &CompareRow) -> Option<f64> {
        self.baseline().map(|b| row.acc_mean() - b.acc_mean())
    }

    /// Relative reduction of backward passes against the baseline.
    pub fn backward_saving(&self, row: &CompareRow) -> Option<f64> {
        self.baseline().map(|b| 1.0 - row.backward_mean() / b.backward_mean())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,repeats,acc_mean,acc_std,diff_pp,backward_mean,wall_clock_ms_mean\n");
        for row in &self.rows {
            let diff = self.diff_pp(row).map_or(String::new(), |d| format!("{d:.4}"));
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{},{:.1},{:.1}",
                row.label,
                self.repeats,
                row.acc_mean(),
                row.acc_std(),
                diff,
                row.backward_mean(),
                row.wall_clock_mean_ms()
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let header = ["strategy", "top-1 (%)", "diff (pp)", "backward", "wall-clock (s)"];
        let mut cells: Vec<[String; 5]> = vec![header.map(String::from)];
        for row in &self.rows {
            cells.push([
                row.label.clone(),
                format!("{:.2} ± {:.2}", row.acc_mean(), row.acc_std()),
                self.diff_pp(row).map_or("-".into(), |d| format!("{d:+.2}")),
                format!("{:.0}", row.backward_mean()),
                format!("{:.2}", row.wall_clock_mean_ms() / 1e3),
            ]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &cells {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    let pad = w - s.chars().count();
                    if c == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// Writes `compare.csv`, `compare.txt` and each run's outputs under
    /// `<dir>/<label>/seed-<seed>/`.
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| HarnessError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let csv = dir.join("compare.csv");
        std::fs::write(&csv, self.to_csv()).map_err(io(&csv))?;
        let txt = dir.join("compare.txt");
        std::fs::write(&txt, self.to_table()).map_err(io(&txt))?;
        for row in &self.rows {
            for outcome in &row.outcomes {
                outcome.write_to(&dir.join(&row.label).join(format!("seed-{}", outcome.summary.seed)))?;
            }
        }
        Ok(())
    }
}
