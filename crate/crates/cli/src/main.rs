//! `tamoo` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tamoo::checkpoint::{load_models, save_models};
use tamoo::data::{read_dataset, write_dataset, BlobSpec, DataSpec, GlyphSpec};
use tamoo::engine::{adversarial_train, AdvTrainMethod, AttackConfig, Strategy};
use tamoo::harness::{
    configure_workers, presets, run_experiment_with, solve_demo, train_victims, ExperimentSpec, Scenario, WORKERS_ENV,
};
use tamoo::models::{ArchSpec, LossKind, TrainConfig};
use tamoo::report::{read_report, write_report, write_trace_csv, ResultTable};
use tamoo::solvers::SolverConfig;
use tamoo::transforms::TransformKind;
use tamoo::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_INTEGRITY: u8 = 2;
const EXIT_SELF_TEST: u8 = 3;

#[derive(Parser)]
#[command(name = "tamoo", version, about = "Multi-task adversarial attack benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset file.
    GenData(GenData),
    /// Train the victim models of a scenario and write a checkpoint.
    Train(Train),
    /// Adversarially train an ensemble and write a checkpoint.
    TrainAdv(TrainAdv),
    /// Run a scenario and write its result table.
    Attack(Box<Attack>),
    /// Replay the softmax weight-solver demo and check its step-19 weights.
    SolveDemo,
    /// Render a result table, or dump per-iteration traces for one sample.
    Report(Report),
    /// Print transform constants and every default.
    ShowConfig,
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "blobs")]
    kind: String,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Feature dimension (blobs only).
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Distance between class centers in units of the spread (blobs only).
    #[arg(long, default_value_t = 4.0)]
    margin: f64,
    /// Pixel noise standard deviation (glyphs only).
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpecArgs {
    /// Preset name: ens, ens-homogeneous, uni, eot, adv-train, solve-demo.
    #[arg(long, default_value = "ens")]
    scenario: String,
    /// JSON experiment spec; overrides --scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SpecArgs {
    fn load(&self) -> Result<ExperimentSpec, Error> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text)?
            }
            None => presets::by_name(&self.scenario)?,
        };
        if let Some(seed) = self.seed {
            reseed(&mut spec, seed);
        }
        Ok(spec)
    }
}

/// Moves every seed of the spec onto a stream derived from `seed`.
fn reseed(spec: &mut ExperimentSpec, seed: u64) {
    spec.seed = seed;
    spec.train_data = spec.train_data.with_seed(seed);
    spec.eval_data = spec.eval_data.with_seed(seed.wrapping_add(1));
    for (k, v) in spec.victims.iter_mut().enumerate() {
        v.train.seed = seed.wrapping_add(k as u64);
    }
    for a in &mut spec.attacks {
        a.seed = seed;
    }
    if let Some(at) = &mut spec.adv_train {
        at.train.seed = seed;
        at.attack.seed = seed;
        at.eval_attack.seed = seed.wrapping_add(1);
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainAdv {
    #[command(flatten)]
    spec: SpecArgs,
    /// pgd, standard, or <strategy>-at (uniform-at, minmax-at, moo-at, tamoo-at).
    #[arg(long, default_value = "tamoo-at")]
    method: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackFlags {
    /// Comma-separated strategies: uniform, minmax, moo, tamoo.
    #[arg(long)]
    strategy: Option<String>,
    /// ce, kl, or cw.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    lr_w: Option<f64>,
    #[arg(long)]
    minmax_gamma: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
}

impl AttackFlags {
    fn apply(&self, spec: &mut ExperimentSpec) -> Result<(), Error> {
        if let Some(list) = &self.strategy {
            let strategies = list
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<Vec<Strategy>, _>>()?;
            *spec = spec.with_strategies(&strategies);
        }
        let loss = self.loss.as_deref().map(str::parse::<LossKind>).transpose()?;
        for a in &mut spec.attacks {
            self.apply_attack(a, loss);
        }
        if let Some(at) = &mut spec.adv_train {
            self.apply_attack(&mut at.attack, loss);
        }
        if let Some(k) = self.group_size {
            spec.group_size = k;
        }
        Ok(())
    }

    fn apply_attack(&self, a: &mut AttackConfig, loss: Option<LossKind>) {
        if let Some(v) = loss {
            a.loss = v;
        }
        if let Some(v) = self.eps {
            a.epsilon = v;
        }
        if let Some(v) = self.steps {
            a.steps = v;
        }
        if let Some(v) = self.lr_delta {
            a.lr_delta = v;
        }
        if let Some(v) = self.lambda {
            a.solver.lambda = v;
        }
        if let Some(v) = self.inner_steps {
            a.solver.inner_steps = v;
        }
        if let Some(v) = self.lr_w {
            a.solver.lr_w = v;
        }
        if let Some(v) = self.minmax_gamma {
            a.minmax_gamma = v;
        }
    }
}

#[derive(Args)]
struct Attack {
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    flags: AttackFlags,
    /// Victim checkpoint; the scenario's victims are trained when absent.
    #[arg(long)]
    models: Option<PathBuf>,
    /// Evaluation dataset file replacing the generated one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for per-iteration trace CSVs.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Result table path; a JSON sidecar is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    /// Result table to render.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Trace one evaluation sample of this scenario instead.
    #[arg(long)]
    trace_scenario: Option<String>,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Output directory for trace CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Integrity(String),
    SelfTest(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_integrity() {
            Failure::Integrity(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Integrity(msg)) => {
            eprintln!("integrity error: {msg}");
            ExitCode::from(EXIT_INTEGRITY)
        }
        Err(Failure::SelfTest(msg)) => {
            eprintln!("self-test failed: {msg}");
            ExitCode::from(EXIT_SELF_TEST)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => {
            let spec = args.spec.load()?;
            let models = train_victims(&spec)?;
            save_models(&models, &args.out)?;
            for (k, m) in models.iter().enumerate() {
                println!("member {k}: train accuracy {:.4}", m.train_accuracy.unwrap_or(f64::NAN));
            }
            Ok(())
        }
        Command::TrainAdv(args) => {
            let spec = args.spec.load()?;
            let method: AdvTrainMethod = args.method.parse()?;
            let at = spec
                .adv_train
                .as_ref()
                .ok_or_else(|| Failure::Usage("scenario has no adversarial-training settings".into()))?;
            let data = spec.train_data.generate()?;
            let archs: Vec<ArchSpec> = spec
                .victims
                .iter()
                .map(|v| ArchSpec::mlp(data.dim, &v.hidden, data.classes))
                .collect();
            let models = adversarial_train(&data, &archs, method, &at.attack, &at.train, spec.domain.to_box())?;
            save_models(&models, &args.out)?;
            println!(
                "{} ensemble of {} written to {}",
                method.name(),
                models.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::Attack(args) => attack(*args),
        Command::SolveDemo => demo(),
        Command::Report(args) => report(args),
        Command::ShowConfig => show_config(),
    }
}

fn gen_data(args: GenData) -> Result<(), Failure> {
    let spec = match args.kind.as_str() {
        "blobs" => DataSpec::Blobs(BlobSpec {
            classes: args.classes,
            samples: args.samples,
            dim: args.dim,
            margin: args.margin,
            seed: args.seed,
        }),
        "glyphs" => DataSpec::Glyphs(GlyphSpec {
            classes: args.classes,
            samples: args.samples,
            noise: args.noise,
            seed: args.seed,
        }),
        other => return Err(Failure::Usage(format!("unknown dataset kind `{other}`"))),
    };
    let data = spec.generate()?;
    write_dataset(&data, &args.out)?;
    println!(
        "{} samples x {} features -> {}",
        data.len(),
        data.dim,
        args.out.display()
    );
    Ok(())
}

fn attack(args: Attack) -> Result<(), Failure> {
    let mut spec = args.spec.load()?;
    args.flags.apply(&mut spec)?;
    spec.validate()?;
    if let Some(dir) = &args.trace {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for a in &mut spec.attacks {
            a.trace = true;
        }
    }
    // Integrity checks run before any attack.
    let eval = args.data.as_deref().map(read_dataset).transpose()?;
    let victims = match &args.models {
        Some(path) => load_models(path)?,
        None if matches!(spec.scenario, Scenario::AdvTrain | Scenario::SolveDemo) => Vec::new(),
        None => train_victims(&spec)?,
    };
    let out = run_experiment_with(&spec, &victims, eval.as_ref(), args.trace.as_deref())?;
    print_table(&out.table);
    if let Some(path) = &args.out {
        write_report(&out.table, path)?;
    }
    Ok(())
}

fn demo() -> Result<(), Failure> {
    let report = solve_demo();
    for run in &report.runs {
        println!("# {} g={:?}", run.name, run.strengths);
        for (step, w) in run.trajectory.iter().enumerate() {
            println!("step={step}, w={w:?}");
        }
        println!("# max deviation at step 19: {:.3e}", run.max_deviation);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::SelfTest(
            "step-19 weights deviate from the reference values".into(),
        ))
    }
}

fn fmt_list(v: &[f64], digits: usize) -> String {
    v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join(" ")
}

fn print_table(table: &ResultTable) {
    println!(
        "spec {}  seed {}  version {}",
        table.spec_hash, table.seed, table.tool_version
    );
    println!(
        "{:<12} {:<22} {:>6} {:>7} {:>7} {:>8} {:>8}  per-task / weights",
        "strategy", "scenario", "n", "A-All", "A-Avg", "nat", "rob"
    );
    for r in &table.rows {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        println!(
            "{:<12} {:<22} {:>6} {:>7.2} {:>7.2} {:>8} {:>8}  [{}] / [{}]",
            r.strategy,
            r.scenario,
            r.samples,
            r.a_all,
            r.a_avg,
            opt(r.natural_accuracy),
            opt(r.robust_accuracy),
            fmt_list(&r.per_task, 1),
            fmt_list(&r.weights, 3)
        );
    }
}

fn report(args: Report) -> Result<(), Failure> {
    if let Some(path) = &args.input {
        print_table(&read_report(path)?);
        return Ok(());
    }
    let Some(name) = &args.trace_scenario else {
        return Err(Failure::Usage("give --in <table> or --trace-scenario <name>".into()));
    };
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    trace_one(name, args.sample, &out_dir)
}

fn trace_one(name: &str, sample: usize, out_dir: &Path) -> Result<(), Failure> {
    let mut spec = presets::by_name(name)?;
    if !matches!(spec.scenario, Scenario::Ens | Scenario::Eot) {
        return Err(Failure::Usage("traces are available for ens and eot scenarios".into()));
    }
    let eval = spec.eval_data.generate()?;
    if sample >= eval.len() {
        return Err(Failure::Usage(format!(
            "sample {sample} out of range ({} samples)",
            eval.len()
        )));
    }
    let one = tamoo::models::Dataset::new(
        eval.dim,
        eval.classes,
        vec![eval.inputs[sample].clone()],
        vec![eval.labels[sample]],
    )?;
    for a in &mut spec.attacks {
        a.trace = true;
    }
    let victims = train_victims(&spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.into(),
        source: e,
    })?;
    let out = run_experiment_with(&spec, &victims, Some(&one), None)?;
    for run in &out.runs {
        let trace = run.reports[0].trace.as_deref().unwrap_or_default();
        let path = out_dir.join(format!("{}_{}_sample{sample}.csv", name, run.attack.strategy.name()));
        write_trace_csv(&[(sample, trace)], &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn show_config() -> Result<(), Failure> {
    println!("transforms (deterministic parameter, stochastic range):");
    for k in TransformKind::ALL {
        println!(
            "  {:<12} {:>6}  {:?}",
            k.name(),
            k.deterministic_param(),
            k.stochastic_range()
        );
    }
    let json = |v: serde_json::Value| serde_json::to_string_pretty(&v).expect("serializable");
    println!(
        "attack defaults:\n{}",
        json(serde_json::to_value(AttackConfig::default()).map_err(Error::from)?)
    );
    println!(
        "solver defaults:\n{}",
        json(serde_json::to_value(SolverConfig::default()).map_err(Error::from)?)
    );
    println!(
        "training defaults:\n{}",
        json(serde_json::to_value(TrainConfig::default()).map_err(Error::from)?)
    );
    println!("worker count: ${WORKERS_ENV} (default: all cores)");
    println!(
        "presets: ens, ens-homogeneous, uni, eot, adv-train, solve-demo (seed {})",
        presets::DEFAULT_SEED
    );
    Ok(())
}
