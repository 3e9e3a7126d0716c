//! Command-line front end.
//!
//! Subcommands: `train`, `compare`, `verify-lemma`, `gradcheck`, `inspect`.
//! Any run-config key can be overridden with `--dotted.key value`; the key
//! path mirrors the TOML file layout. Exit codes: 0 success, 1 runtime
//! failure, 2 configuration error.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use toml::{Table, Value};

use crate::harness::compare::{compare, Variant};
use crate::harness::lemma::{self, circle_targets, LemmaConfig, LemmaError, LemmaReport};
use crate::harness::{run_with_data, HarnessError, RunConfig, Strategy};
use crate::hiding::{self, decode_plan};
use crate::model::{grad_check, Arch, Model, Scratch};
use crate::rng::{derive_seed, run_rng};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

const DEFAULT_OUT: &str = "kaku-out";

/// A failure that maps onto an exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Train,
    Compare,
    VerifyLemma,
    Gradcheck,
    Inspect,
}

impl Subcommand {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => Self::Train,
            "compare" => Self::Compare,
            "verify-lemma" => Self::VerifyLemma,
            "gradcheck" => Self::Gradcheck,
            "inspect" => Self::Inspect,
            _ => return None,
        })
    }

    /// Options specific to the subcommand (besides the common ones).
    fn own_options(self) -> &'static [&'static str] {
        match self {
            Self::Train => &[],
            Self::Compare => &["strategies", "repeats"],
            Self::VerifyLemma => &["eta", "curvatures", "iterations", "trials"],
            Self::Gradcheck => &["arch", "hidden", "eps", "batches"],
            Self::Inspect => &["checkpoint", "plan"],
        }
    }

    /// Whether arbitrary dotted run-config overrides are accepted.
    fn takes_run_config(self) -> bool {
        matches!(self, Self::Train | Self::Compare | Self::Inspect)
    }
}

/// Parsed command line.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub subcommand: Subcommand,
    pub config_path: Option<PathBuf>,
    /// `(dotted key, raw value)` in command-line order.
    pub overrides: Vec<(String, String)>,
    /// Subcommand options, e.g. `repeats`.
    pub options: Vec<(String, String)>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub verbose: bool,
    pub seed: Option<u64>,
}

impl CliConfig {
    fn option(&self, name: &str) -> Option<&str> {
        self.options.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn parsed_option<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.option(name) {
            None => Ok(None),
            Some(raw) => raw
                .trim()
                .parse()
                .map(Some)
                .map_err(|e| CliError::Config(format!("--{name} `{raw}`: {e}"))),
        }
    }

    /// Output directory: `--out`, then `KAKU_OUT`, then `./kaku-out`.
    pub fn out_dir(&self, env_out: Option<&str>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| env_out.filter(|s| !s.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

pub const USAGE: &str = "\
usage: kakurenbo <command> [options]

commands:
  train          run one experiment
  compare        run several strategies over repeated seeds
  verify-lemma   Monte-Carlo check of the SGD contraction bound
  gradcheck      compare analytic gradients with finite differences
  inspect        print dataset, checkpoint or plan-dump statistics

common options:
  --config FILE      TOML run config
  --out DIR          output directory (default: $KAKU_OUT or ./kaku-out)
  --seed N           run seed
  --jobs N           worker threads for compare and verify-lemma
  --verbose, -v      per-epoch progress on stderr
  --<key> VALUE      override any config key, e.g. --hiding.max-fraction 0.3

compare:       --strategies baseline,kakurenbo  --repeats N
verify-lemma:  --eta X  --curvatures 1,2,3  --iterations T  --trials N
gradcheck:     --arch softmax-reg|mlp1  --hidden H  --eps E  --batches N
inspect:       --checkpoint FILE  --plan FILE
";

/// Parses argv (without the program name). Never panics.
pub fn parse_args(args: &[String]) -> Result<CliConfig, CliError> {
    let Some(first) = args.first() else {
        return config_err("missing command");
    };
    let Some(subcommand) = Subcommand::parse(first) else {
        return config_err(format!("unknown command `{first}`"));
    };
    let mut cfg = CliConfig {
        subcommand,
        config_path: None,
        overrides: Vec::new(),
        options: Vec::new(),
        out: None,
        jobs: 1,
        verbose: false,
        seed: None,
    };
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        i += 1;
        if arg == "-v" || arg == "--verbose" {
            cfg.verbose = true;
            continue;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            return config_err(format!("unexpected argument `{arg}`"));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let Some(v) = args.get(i) else {
                    return config_err(format!("--{flag} needs a value"));
                };
                i += 1;
                (flag.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return config_err(format!("malformed option `{arg}`"));
        }
        match key.as_str() {
            "config" => cfg.config_path = Some(PathBuf::from(value)),
            "out" => cfg.out = Some(PathBuf::from(value)),
            "jobs" => {
                cfg.jobs = match value.trim().parse::<usize>() {
                    Ok(j) if j >= 1 => j,
                    _ => return config_err(format!("--jobs must be a positive integer (got `{value}`)")),
                }
            }
            "seed" => {
                let seed = value
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("--seed must be a non-negative integer (got `{value}`)")))?;
                cfg.seed = Some(seed);
            }
            k if subcommand.own_options().contains(&k) => cfg.options.push((key, value)),
            _ if subcommand.takes_run_config() => cfg.overrides.push((key, value)),
            _ => return config_err(format!("unknown option `--{key}` for {first}")),
        }
    }
    Ok(cfg)
}

/// Parses a command-line value as TOML, falling back to a comma-separated
/// list and finally to a bare string.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if let Ok(mut t) = format!("v = {raw}").parse::<Table>() {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    if raw.contains(',') {
        return Value::Array(
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(parse_value)
                .collect(),
        );
    }
    Value::String(raw.to_string())
}

/// Reshapes `new` to the kind of value already stored at the key, so that
/// `1` can fill a float field and a path can be given unquoted.
fn coerce(template: &Value, new: Value) -> Value {
    match (template, new) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::String(_), Value::Integer(i)) => Value::String(i.to_string()),
        (Value::String(_), Value::Float(f)) => Value::String(f.to_string()),
        (Value::String(_), Value::Boolean(b)) => Value::String(b.to_string()),
        (Value::Array(t), Value::Array(items)) => match t.first() {
            Some(first) => Value::Array(items.into_iter().map(|v| coerce(first, v)).collect()),
            None => Value::Array(items),
        },
        (Value::Array(t), scalar) if !matches!(scalar, Value::Table(_)) => {
            let item = match t.first() {
                Some(first) => coerce(first, scalar),
                None => scalar,
            };
            Value::Array(vec![item])
        }
        (_, v) => v,
    }
}

/// Sets `path` in `root`, which must already contain the key.
fn set_key(root: &mut Table, path: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return config_err(format!("malformed config key `{path}`"));
    }
    let mut table = root;
    for (depth, part) in parts.iter().enumerate() {
        let Some(slot) = table.get_mut(*part) else {
            return config_err(format!("unknown config key `{path}`"));
        };
        if depth + 1 == parts.len() {
            if let (Value::Table(_), Value::Table(new)) = (&*slot, &value) {
                let Value::Table(inner) = slot else { unreachable!() };
                for (k, v) in new.clone() {
                    set_key(inner, &k, v).map_err(|_| CliError::Config(format!("unknown config key `{path}.{k}`")))?;
                }
            } else if matches!(slot, Value::Table(_)) {
                return config_err(format!("config key `{path}` is a section, not a value"));
            } else {
                *slot = coerce(slot, value);
            }
            return Ok(());
        }
        match slot {
            Value::Table(t) => table = t,
            _ => return config_err(format!("unknown config key `{path}`")),
        }
    }
    Ok(())
}

/// Merges a parsed TOML document into `root`, key by key.
fn merge_table(root: &mut Table, doc: Table, prefix: &str) -> Result<(), CliError> {
    for (k, v) in doc {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => {
                match root.get_mut(&k) {
                    Some(Value::Table(inner)) => merge_table(inner, t, &path)?,
                    Some(_) => return config_err(format!("config key `{path}` is a value, not a section")),
                    None => return config_err(format!("unknown config key `{path}`")),
                }
            }
            v => set_key(root, &k, v).map_err(|_| CliError::Config(format!("unknown config key `{path}`")))?,
        }
    }
    Ok(())
}

/// Builds the effective run config: defaults, then the file, then flags.
pub fn build_run_config(cli: &CliConfig) -> Result<RunConfig, CliError> {
    let mut root = Table::try_from(RunConfig::default())
        .map_err(|e| CliError::Runtime(format!("cannot serialize default config: {e}")))?;
    if let Some(path) = &cli.config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let doc: Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge_table(&mut root, doc, "")?;
    }
    for (key, raw) in &cli.overrides {
        set_key(&mut root, key, parse_value(raw))?;
    }
    if let Some(seed) = cli.seed {
        set_key(&mut root, "seed", Value::Integer(seed as i64))?;
    }
    let cfg: RunConfig = Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_train(cli: &CliConfig, out: &Path) -> Result<(), CliError> {
    let cfg = build_run_config(cli)?;
    write_file(&out.join("config.toml"), &config_to_toml(&cfg))?;
    let (train, test) = cfg.dataset.load()?;
    let verbose = cli.verbose;
    let outcome = run_with_data(&cfg, &train, &test, |r| {
        if verbose {
            eprintln!(
                "epoch {:>3} {:?}: loss {:.4}  top-1 {:.4}  hidden {:>6}  backward {:>7}  lr {:.5}",
                r.epoch, r.phase, r.train_loss, r.test_top1, r.hidden, r.backward_count, r.eta_e
            );
        }
    })?;
    outcome.write_to(out)?;
    let s = &outcome.summary;
    println!(
        "{} seed {}: best top-1 {:.4}, final {:.4}, backward {}, forward {}, {:.2} s -> {}",
        s.strategy,
        s.seed,
        s.best_test_top1,
        s.final_test_top1,
        s.total_backward,
        s.total_forward,
        s.total_wall_clock_ms / 1e3,
        out.display()
    );
    Ok(())
}

/// Parses `--strategies`, rejecting empty and duplicate lists.
pub fn parse_strategies(raw: &str) -> Result<Vec<Strategy>, CliError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for name in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let s: Strategy = name.parse().map_err(CliError::Config)?;
        if !seen.insert(s) {
            return config_err(format!("duplicate strategy `{name}` in --strategies; list each strategy once"));
        }
        out.push(s);
    }
    if out.is_empty() {
        return config_err("--strategies is empty");
    }
    Ok(out)
}

fn cmd_compare(cli: &CliConfig, out: &Path) -> Result<(), CliError> {
    let strategies = parse_strategies(cli.option("strategies").unwrap_or("baseline,kakurenbo"))?;
    let repeats: usize = cli.parsed_option("repeats")?.unwrap_or(1);
    if repeats == 0 {
        return config_err("--repeats must be >= 1");
    }
    let cfg = build_run_config(cli)?;
    write_file(&out.join("config.toml"), &config_to_toml(&cfg))?;
    let (train, test) = cfg.dataset.load()?;
    let variants = Variant::per_strategy(&cfg, &strategies);
    let report = compare(&variants, repeats, cli.jobs, &train, &test)?;
    report.write_to(out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn parse_list(name: &str, raw: &str) -> Result<Vec<f64>, CliError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::Config(format!("--{name}: `{s}` is not a number")))
        })
        .collect()
}

fn lemma_configs(cli: &CliConfig) -> Result<Vec<LemmaConfig>, CliError> {
    let trials: usize = cli.parsed_option("trials")?.unwrap_or(10_000);
    if trials == 0 {
        return config_err("--trials must be >= 1");
    }
    let seed = cli.seed.unwrap_or(7);
    let custom = ["eta", "curvatures", "iterations"]
        .iter()
        .any(|k| cli.option(k).is_some());
    if !custom {
        return Ok(lemma::default_grid(trials, seed));
    }
    let curvatures = match cli.option("curvatures") {
        Some(raw) => parse_list("curvatures", raw)?,
        None => vec![1.0, 1.0],
    };
    if curvatures.is_empty() {
        return config_err("--curvatures is empty");
    }
    let max_l = curvatures.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let eta: f64 = cli.parsed_option("eta")?.unwrap_or(0.5 / max_l);
    let targets = if curvatures.len() == 1 {
        vec![vec![2.0, 0.0]]
    } else {
        circle_targets(curvatures.len(), 2.0)
    };
    Ok(vec![LemmaConfig {
        curvatures,
        targets,
        w0: vec![3.0, -2.0],
        eta,
        iterations: cli.parsed_option("iterations")?.unwrap_or(200),
        trials,
        seed,
    }])
}

/// Relative tolerance for the deterministic (noiseless, equal-curvature)
/// cells.
pub const NOISELESS_RTOL: f64 = 1e-10;

/// For deterministic cells, whether the simulated distance matches the exact
/// contraction. `None` for stochastic cells.
pub fn noiseless_rate_matches(cfg: &LemmaConfig, report: &LemmaReport) -> Option<bool> {
    let deterministic = report.noiseless() && cfg.curvatures.windows(2).all(|w| w[0] == w[1]);
    deterministic.then(|| (report.empirical_mean - report.exact_mean).abs() <= NOISELESS_RTOL * report.exact_mean.abs().max(f64::MIN_POSITIVE))
}

fn cmd_verify_lemma(cli: &CliConfig, out: &Path) -> Result<bool, CliError> {
    let configs = lemma_configs(cli)?;
    for cfg in &configs {
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let reports: Vec<Result<LemmaReport, LemmaError>> =
        pool.install(|| configs.iter().map(lemma::verify_lemma).collect());
    let mut table = String::from(
        "cell     m  maxL     eta      T  sigma2      bound         empirical     stderr      exact         result\n",
    );
    let mut csv = String::from("cell,m,max_l,eta,iterations,trials,lambda,c_hat,sigma2,bound,empirical,stderr,exact,pass\n");
    let mut all_pass = true;
    for (i, (cfg, report)) in configs.iter().zip(reports).enumerate() {
        let r = report.map_err(|e| CliError::Config(e.to_string()))?;
        let rate = noiseless_rate_matches(cfg, &r);
        let pass = r.pass && rate.unwrap_or(true);
        all_pass &= pass;
        let verdict = match (pass, rate) {
            (true, Some(_)) => "PASS (rate)",
            (true, None) => "PASS",
            (false, _) => "FAIL",
        };
        table.push_str(&format!(
            "{i:<6} {:>3}  {:<6.3} {:<8.4} {:>4}  {:<10.4e}  {:<12.6e}  {:<12.6e}  {:<10.3e}  {:<12.6e}  {verdict}\n",
            r.m, r.max_curvature, r.eta, r.iterations, r.sigma2, r.bound, r.empirical_mean, r.stderr, r.exact_mean
        ));
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.m,
            r.max_curvature,
            r.eta,
            r.iterations,
            r.trials,
            r.lambda,
            r.c_hat,
            r.sigma2,
            r.bound,
            r.empirical_mean,
            r.stderr,
            r.exact_mean,
            pass
        ));
    }
    print!("{table}");
    println!("{} cells, {}", configs.len(), if all_pass { "all PASS" } else { "some FAIL" });
    write_file(&out.join("lemma.csv"), &csv)?;
    Ok(all_pass)
}

/// Result of the gradient check for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub arch: Arch,
    pub max_error: f64,
    pub threshold: f64,
}

pub const GRADCHECK_TOL_MLP: f64 = 1e-4;
pub const GRADCHECK_TOL_SOFTMAX: f64 = 1e-6;

/// Finite-difference check over `batches` seeded random batches.
pub fn gradcheck(arch: Arch, hidden: usize, eps: f64, batches: usize, seed: u64) -> Result<GradcheckResult, CliError> {
    let (d, k, b) = (6, 4, 8);
    let mut worst = 0.0f64;
    for batch in 0..batches {
        let mut rng = run_rng(derive_seed(seed, batch as u64));
        let mut model = Model::init(arch, d, hidden, k, &mut rng).map_err(|e| CliError::Config(e.to_string()))?;
        for p in &mut model.params {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p += 0.3 * z;
        }
        let x: Vec<f32> = (0..b * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        let y: Vec<u32> = (0..b).map(|i| (i % k) as u32).collect();
        let err = grad_check(&model, &x, &y, eps).map_err(|e| CliError::Runtime(e.to_string()))?;
        worst = worst.max(err);
    }
    Ok(GradcheckResult {
        arch,
        max_error: worst,
        threshold: match arch {
            Arch::SoftmaxReg => GRADCHECK_TOL_SOFTMAX,
            Arch::Mlp1 => GRADCHECK_TOL_MLP,
        },
    })
}

fn cmd_gradcheck(cli: &CliConfig) -> Result<bool, CliError> {
    let archs = match cli.option("arch") {
        None => vec![Arch::SoftmaxReg, Arch::Mlp1],
        Some("softmax-reg") => vec![Arch::SoftmaxReg],
        Some("mlp1") => vec![Arch::Mlp1],
        Some(other) => return config_err(format!("--arch: unknown architecture `{other}`")),
    };
    let hidden: usize = cli.parsed_option("hidden")?.unwrap_or(16);
    if hidden == 0 && archs.contains(&Arch::Mlp1) {
        return config_err("--hidden must be >= 1 for mlp1");
    }
    let eps: f64 = cli.parsed_option("eps")?.unwrap_or(1e-6);
    if !(eps > 0.0 && eps <= 1e-2) {
        return config_err(format!("--eps must be in (0, 1e-2] (got {eps})"));
    }
    if eps < 1e-10 {
        eprintln!("warning: --eps {eps:e} is small enough for floating-point cancellation to dominate the finite differences");
    }
    let batches: usize = cli.parsed_option("batches")?.unwrap_or(10);
    if batches == 0 {
        return config_err("--batches must be >= 1");
    }
    let seed = cli.seed.unwrap_or(0);
    let mut ok = true;
    for arch in archs {
        let r = gradcheck(arch, hidden, eps, batches, seed)?;
        let pass = r.max_error < r.threshold;
        ok &= pass;
        println!(
            "{:<12} max relative error {:.3e} (threshold {:.0e}) {}",
            arch.to_string(),
            r.max_error,
            r.threshold,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

fn cmd_inspect(cli: &CliConfig) -> Result<(), CliError> {
    if let Some(path) = cli.option("plan") {
        let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{path}: {e}")))?;
        let (epoch, n, [training, hidden, dropped]) =
            decode_plan(&bytes).ok_or_else(|| CliError::Runtime(format!("{path}: not a plan dump")))?;
        println!("plan epoch {epoch}: N {n}, training {}, hidden {}, dropped {}", training.len(), hidden.len(), dropped.len());
        return Ok(());
    }
    let cfg = build_run_config(cli)?;
    let (train, test) = cfg.dataset.load()?;
    for (name, ds) in [("train", &train), ("test", &test)] {
        let (lo, hi) = ds
            .features
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        println!(
            "{name}: n {}, d {}, k {}, features in [{lo}, {hi}], class counts {:?}",
            ds.n,
            ds.d,
            ds.k,
            ds.class_counts()
        );
    }
    if let Some(path) = cli.option("checkpoint") {
        let model = Model::load(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        if model.d != train.d {
            return Err(CliError::Runtime(format!(
                "checkpoint expects {} features, dataset has {}",
                model.d, train.d
            )));
        }
        let mut scratch = Scratch::default();
        let mut losses = Vec::with_capacity(train.n);
        let (mut correct, mut confident) = (0usize, 0usize);
        for i in 0..train.n {
            let o = model.sample_pass(train.row(i), train.labels[i], &mut scratch, None);
            losses.push(o.loss);
            correct += o.pa as usize;
            confident += (o.pa && o.pc >= cfg.hiding.tau) as usize;
        }
        losses.sort_by(f64::total_cmp);
        println!(
            "store: {} {}: loss median {:.4e}, p90 {:.4e}, max {:.4e}; correct {:.4}; confident at tau {} {:.4}; hide budget {}",
            model.arch,
            path,
            quantile(&losses, 0.5),
            quantile(&losses, 0.9),
            quantile(&losses, 1.0),
            correct as f64 / train.n as f64,
            cfg.hiding.tau,
            confident as f64 / train.n as f64,
            hiding::fraction_count(cfg.hiding.max_fraction, train.n)
        );
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run(args: &[String], env_out: Option<&str>) -> i32 {
    if args.is_empty() || matches!(args[0].as_str(), "-h" | "--help" | "help") {
        print!("{USAGE}");
        return if args.is_empty() { EXIT_CONFIG } else { EXIT_OK };
    }
    if args.iter().any(|a| a == "--help" || a == "-h") {
        print!("{USAGE}");
        return EXIT_OK;
    }
    let result = parse_args(args).and_then(|cli| {
        let out = cli.out_dir(env_out);
        match cli.subcommand {
            Subcommand::Train => cmd_train(&cli, &out).map(|_| true),
            Subcommand::Compare => cmd_compare(&cli, &out).map(|_| true),
            Subcommand::VerifyLemma => cmd_verify_lemma(&cli, &out),
            Subcommand::Gradcheck => cmd_gradcheck(&cli),
            Subcommand::Inspect => cmd_inspect(&cli).map(|_| true),
        }
    });
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
