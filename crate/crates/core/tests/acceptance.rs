//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints its PASS/FAIL line even when the others pass.

mod common;

use std::time::{Duration, Instant};

use common::{blobs, mnist_available, mnist_dir};
use kakurenbo::cli::{gradcheck, noiseless_rate_matches, GRADCHECK_TOL_MLP, GRADCHECK_TOL_SOFTMAX};
use kakurenbo::comparators::{sb_select, IswrState, SbState};
use kakurenbo::data::Dataset;
use kakurenbo::harness::compare::{compare, Variant};
use kakurenbo::harness::lemma::{default_grid, verify_lemma};
use kakurenbo::harness::metrics::without_wall_clock;
use kakurenbo::harness::{
    run_experiment, run_with_data, DatasetSpec, ModelSpec, Phase, RunConfig, Strategy, Trainer,
};
use kakurenbo::hiding::{select_hidden, steps_per_epoch, HidingConfig};
use kakurenbo::model::Arch;
use kakurenbo::optim::{base_lr_at, ulps_between, SchedulerKind};
use kakurenbo::rng::run_rng;
use rand_distr::{Distribution, Exp};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn scheduled_hiding() -> HidingConfig {
    HidingConfig {
        max_fraction: 0.3,
        tau: 0.7,
        decay_factors: vec![1.0, 0.8, 0.6],
        decay_milestones: vec![0, 20, 40],
        ..Default::default()
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let soft = gradcheck(Arch::SoftmaxReg, 0, 1e-6, 10, 0).map_err(|e| e.to_string())?;
    let mlp = gradcheck(Arch::Mlp1, 16, 1e-6, 10, 0).map_err(|e| e.to_string())?;
    ensure(soft.max_error < GRADCHECK_TOL_SOFTMAX, || format!("softmax-reg error {:.3e}", soft.max_error))?;
    ensure(mlp.max_error < GRADCHECK_TOL_MLP, || format!("mlp1 error {:.3e}", mlp.max_error))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!(
        "softmax-reg {:.2e}, mlp1 {:.2e} over 10 batches each",
        soft.max_error, mlp.max_error
    ))
}

fn baseline_degeneracy() -> Outcome {
    let start = Instant::now();
    let mut kaku = blobs(Strategy::Kakurenbo, 2000, 10);
    kaku.hiding.max_fraction = 0.0;
    let base = RunConfig {
        strategy: Strategy::Baseline,
        ..kaku.clone()
    };
    let a = run_experiment(&kaku, None).map_err(|e| e.to_string())?;
    let b = run_experiment(&base, None).map_err(|e| e.to_string())?;
    let bits = |p: &[f64]| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a.model.params) == bits(&b.model.params), || "final parameters differ".into())?;
    let losses = |o: &kakurenbo::harness::RunOutcome| o.records.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    ensure(losses(&a) == losses(&b), || "per-epoch train losses differ".into())?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("{} parameters and 10 epoch losses bit-identical", a.model.params.len()))
}

fn step_accounting() -> Outcome {
    ensure(steps_per_epoch(1000, 300, 100) == 7, || "steps_per_epoch(1000, 300, 100) != 7".into())?;
    let mut checked = 0;
    for (strategy, drop_top) in [
        (Strategy::Kakurenbo, 0.0),
        (Strategy::Kakurenbo, 0.02),
        (Strategy::Baseline, 0.0),
        (Strategy::Iswr, 0.0),
    ] {
        let mut cfg = blobs(strategy, 1000, 15);
        cfg.hiding.drop_top_rate = drop_top;
        let out = run_experiment(&cfg, None).map_err(|e| e.to_string())?;
        for r in &out.records {
            ensure(r.forward_count == 1000, || format!("{strategy} epoch {}: forward {}", r.epoch, r.forward_count))?;
            ensure(r.backward_count == 1000 - r.hidden - r.dropped, || {
                format!("{strategy} epoch {}: backward {} hidden {} dropped {}", r.epoch, r.backward_count, r.hidden, r.dropped)
            })?;
            ensure(r.steps == steps_per_epoch(1000, r.hidden + r.dropped, cfg.batch_size), || {
                format!("{strategy} epoch {}: {} steps", r.epoch, r.steps)
            })?;
            checked += 1;
        }
        ensure(out.summary.total_backward == out.summary.gradient_evaluations, || {
            "backward total disagrees with the gradient counter".into()
        })?;
    }
    Ok(format!("{checked} epochs checked; steps_per_epoch(1000, 300, 100) = 7"))
}

fn lr_identity() -> Outcome {
    let mut checked = 0;
    let mut worst = 0;
    for scheduler in [SchedulerKind::Constant, SchedulerKind::Step, SchedulerKind::Cosine] {
        let mut cfg = blobs(Strategy::Kakurenbo, 600, 45);
        cfg.hiding = scheduled_hiding();
        cfg.optim.scheduler = scheduler;
        cfg.optim.milestones = vec![10, 30];
        cfg.optim.total_epochs = 45;
        cfg.optim.warmup_epochs = 3;
        let out = run_experiment(&cfg, None).map_err(|e| e.to_string())?;
        for r in &out.records {
            let ulps = ulps_between(r.eta_e * (1.0 - r.f_e), base_lr_at(&cfg.optim, r.epoch));
            worst = worst.max(ulps);
            ensure(ulps <= 1, || format!("{scheduler:?} epoch {}: {ulps} ulps", r.epoch))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} epochs, max deviation {worst} ulp"))
}

fn selection_invariants() -> Outcome {
    let mut cfg = blobs(Strategy::Kakurenbo, 2000, 60);
    cfg.dataset.dim = 2;
    cfg.dataset.classes = 8;
    cfg.hiding = scheduled_hiding();
    let (train, test) = cfg.dataset.load().map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(&cfg, &train, &test).map_err(|e| e.to_string())?;
    let mut strict = 0;
    for epoch in 0..cfg.epochs {
        let r = trainer.run_epoch(epoch, Phase::Train).map_err(|e| e.to_string())?;
        let plan = trainer.last_plan().expect("plan recorded");
        plan.check_partition(train.n).map_err(|e| format!("epoch {epoch}: {e}"))?;
        ensure(r.f_star <= r.f_e, || format!("epoch {epoch}: F* {} > F_e {}", r.f_star, r.f_e))?;
        let mut sizes = Vec::new();
        for tau in [0.5, 0.7, 0.9] {
            let hiding = HidingConfig { tau, ..cfg.hiding.clone() };
            let plan = select_hidden(&trainer.store, &hiding, epoch + 1, 0.1, &mut run_rng(0)).map_err(|e| e.to_string())?;
            sizes.push(plan.hidden_list.len());
        }
        ensure(sizes[0] >= sizes[1] && sizes[1] >= sizes[2], || format!("epoch {epoch}: hidden sizes {sizes:?}"))?;
        strict += (sizes[0] > sizes[2]) as usize;
    }
    Ok(format!("60 epochs; tau ordering strict in {strict} of them"))
}

fn mnist_spec() -> Result<DatasetSpec, String> {
    if !mnist_available() {
        return Err(format!(
            "MNIST IDX files not found in {} (set KAKU_MNIST_DIR)",
            mnist_dir().display()
        ));
    }
    Ok(DatasetSpec::mnist(mnist_dir()))
}

fn mnist_efficiency() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig {
        strategy: Strategy::Baseline,
        seed: 42,
        epochs: 30,
        batch_size: 128,
        dataset: mnist_spec()?,
        model: ModelSpec {
            arch: Arch::Mlp1,
            hidden: 64,
        },
        hiding: scheduled_hiding(),
        ..Default::default()
    };
    let (train, test): (Dataset, Dataset) = cfg.dataset.load().map_err(|e| e.to_string())?;
    let variants = Variant::per_strategy(&cfg, &[Strategy::Baseline, Strategy::Kakurenbo]);
    let report = compare(&variants, 3, jobs(), &train, &test).map_err(|e| e.to_string())?;
    print!("{}", report.to_table());
    let kaku = &report.rows[1];
    let diff = report.diff_pp(kaku).unwrap();
    let saving = report.backward_saving(kaku).unwrap();
    let summary = format!(
        "baseline {:.2}%, kakurenbo {:.2}% (diff {diff:+.2} pp), {:.1}% fewer backward passes, {:.0} s",
        report.rows[0].acc_mean(),
        kaku.acc_mean(),
        100.0 * saving,
        start.elapsed().as_secs_f64()
    );
    ensure(diff.abs() <= 1.0, || format!("accuracy gap too large: {summary}"))?;
    ensure(saving >= 0.15, || format!("backward saving too small: {summary}"))?;
    within(start.elapsed(), 1200.0)?;
    Ok(summary)
}

fn lemma_grid() -> Outcome {
    let start = Instant::now();
    let grid = default_grid(10_000, 7);
    ensure(grid.len() >= 20, || format!("only {} cells", grid.len()))?;
    let mut noiseless = 0;
    for (i, cfg) in grid.iter().enumerate() {
        let r = verify_lemma(cfg).map_err(|e| format!("cell {i}: {e}"))?;
        ensure(r.pass, || {
            format!("cell {i}: empirical {:.6e} > bound {:.6e} + 3·{:.3e}", r.empirical_mean, r.bound, r.stderr)
        })?;
        if r.noiseless() {
            let ok = noiseless_rate_matches(cfg, &r).ok_or_else(|| format!("cell {i}: noiseless cell is not deterministic"))?;
            ensure(ok, || format!("cell {i}: empirical {:e} vs contraction {:e}", r.empirical_mean, r.exact_mean))?;
            noiseless += 1;
        }
    }
    within(start.elapsed(), 120.0)?;
    Ok(format!("{} cells pass ({noiseless} noiseless within 1e-10)", grid.len()))
}

fn iswr_distribution() -> Outcome {
    let start = Instant::now();
    let draws = 100_000;
    let state = IswrState::with_weights(vec![1.0, 1.0, 2.0]);
    let mut counts = [0usize; 3];
    for i in state.draw(draws, &mut run_rng(2024)) {
        counts[i] += 1;
    }
    let expected = [0.25, 0.25, 0.5];
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let tv = 0.5 * freq.iter().zip(&expected).map(|(f, e)| (f - e).abs()).sum::<f64>();
    let stat: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&c, e)| (c as f64 - e * draws as f64).powi(2) / (e * draws as f64))
        .sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
    ensure(tv < 0.02, || format!("total variation {tv}"))?;
    ensure(p > 0.001, || format!("chi-square p {p}"))?;
    within(start.elapsed(), 5.0)?;
    Ok(format!("frequencies {freq:.4?}, TV {tv:.4}, chi-square p {p:.3}"))
}

fn sb_kept_fraction() -> Outcome {
    let exp = Exp::new(1.0).unwrap();
    let mut loss_rng = run_rng(91);
    let mut rng = run_rng(92);
    let mut state = SbState::new(1.0, 1024);
    let (mut decisions, mut kept) = (0usize, 0usize);
    while decisions < 10_000 {
        let batch: Vec<f64> = (0..64).map(|_| exp.sample(&mut loss_rng)).collect();
        let take = batch.len().min(10_000 - decisions);
        kept += sb_select(&batch[..take], &mut state, &mut rng).len();
        decisions += take;
    }
    let fraction = kept as f64 / decisions as f64;
    ensure((0.48..=0.52).contains(&fraction), || format!("kept fraction {fraction}"))?;
    Ok(format!("kept {kept} of {decisions} ({fraction:.4})"))
}

fn forget_protocol() -> Outcome {
    let mut cfg = blobs(Strategy::Forget, 1000, 10);
    cfg.dataset.dim = 2;
    cfg.dataset.classes = 4;
    let out = run_experiment(&cfg, None).map_err(|e| e.to_string())?;
    let counting = out.records.iter().filter(|r| r.phase == Phase::Count).count();
    ensure(counting == 20 && out.summary.counting_epochs == 20, || {
        format!("{counting} counting records, summary says {}", out.summary.counting_epochs)
    })?;
    let state = out.forget.as_ref().ok_or("no counting state")?;
    let never: Vec<usize> = (0..1000).filter(|&i| !state.ever_correct()[i]).collect();
    ensure(out.pruned.iter().all(|i| state.ever_correct()[*i]), || "a never-correct sample was pruned".into())?;
    let total: f64 = out.records.iter().map(|r| r.wall_clock_ms).sum();
    let train: f64 = out.records.iter().filter(|r| r.phase == Phase::Train).map(|r| r.wall_clock_ms).sum();
    ensure((out.summary.total_wall_clock_ms - total).abs() < 1e-9 && total > train, || {
        format!("wall clock {} vs records {total}, training only {train}", out.summary.total_wall_clock_ms)
    })?;
    Ok(format!(
        "20 counting epochs; pruned {} samples, none of the {} never-correct; wall clock {:.0} ms of which {:.0} ms counting",
        out.pruned.len(),
        never.len(),
        total,
        total - train
    ))
}

fn determinism() -> Outcome {
    let mut checked = 0;
    for strategy in Strategy::ALL {
        let mut cfg = blobs(strategy, 600, 6);
        cfg.forget.count_epochs = 3;
        let (train, test) = cfg.dataset.load().map_err(|e| e.to_string())?;
        let a = run_with_data(&cfg, &train, &test, |_| {}).map_err(|e| e.to_string())?;
        let b = run_with_data(&cfg, &train, &test, |_| {}).map_err(|e| e.to_string())?;
        ensure(without_wall_clock(&a.records) == without_wall_clock(&b.records), || format!("{strategy}: metrics differ"))?;
        ensure(a.model.to_checkpoint_bytes() == b.model.to_checkpoint_bytes(), || format!("{strategy}: checkpoints differ"))?;
        checked += 1;
    }
    let cfg = blobs(Strategy::Baseline, 600, 4);
    let (train, test) = cfg.dataset.load().map_err(|e| e.to_string())?;
    let variants = Variant::per_strategy(&cfg, &Strategy::ALL);
    let serial = compare(&variants, 2, 1, &train, &test).map_err(|e| e.to_string())?;
    let parallel = compare(&variants, 2, 4, &train, &test).map_err(|e| e.to_string())?;
    for (x, y) in serial.rows.iter().zip(&parallel.rows) {
        for (a, b) in x.outcomes.iter().zip(&y.outcomes) {
            ensure(without_wall_clock(&a.records) == without_wall_clock(&b.records), || format!("{}: jobs changed metrics", x.label))?;
            ensure(a.model.to_checkpoint_bytes() == b.model.to_checkpoint_bytes(), || format!("{}: jobs changed checkpoint", x.label))?;
        }
    }
    Ok(format!("{checked} strategies repeat exactly; jobs=1 and jobs=4 agree on 10 runs"))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 11] = [
        ("1 gradient oracle", gradient_oracle),
        ("2 baseline degeneracy", baseline_degeneracy),
        ("3 step accounting", step_accounting),
        ("4 learning-rate identity", lr_identity),
        ("5 selection invariants", selection_invariants),
        ("6 MNIST accuracy and backward savings", mnist_efficiency),
        ("7 contraction bound grid", lemma_grid),
        ("8 ISWR distribution", iswr_distribution),
        ("9 SB kept fraction", sb_kept_fraction),
        ("10 FORGET protocol", forget_protocol),
        ("11 determinism", determinism),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({secs:.1} s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({secs:.1} s) {detail}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
