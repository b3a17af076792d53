//! Experiment orchestration: specs, shipped presets, the listing self-test
//! and the runner that turns a spec into a [`ResultTable`].

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{glyph_shape, BlobSpec, DataSpec, GlyphSpec};
use crate::engine::{
    adversarial_train, evaluate_metrics, evaluate_robustness, run_attack, AdvTrainMethod, AttackConfig, AttackReport,
    Metrics, Strategy,
};
use crate::error::{Error, Result};
use crate::models::{epoch_order, train_classifier, ArchSpec, Classifier, Dataset, LossKind, TrainConfig};
use crate::report::{hex, write_trace_csv, ResultRow, ResultTable};
use crate::solvers::{softmax_descent_trace, GramMatrix};
use crate::tasks::{ensemble_bundle, eot_bundle, universal_bundle, AchievementRule, DomainBox, EotOptions};
use crate::transforms::{TransformKind, TransformSpec};

pub const WORKERS_ENV: &str = "TAMOO_WORKERS";

/// Sizes the global worker pool from [`WORKERS_ENV`]. Results do not
/// depend on the worker count.
pub fn configure_workers() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::invalid(
            "workers",
            format!("{WORKERS_ENV} must be a positive integer, got `{raw}`"),
        )
    })?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Ens,
    Uni,
    Eot,
    AdvTrain,
    SolveDemo,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Ens => "ens",
            Scenario::Uni => "uni",
            Scenario::Eot => "eot",
            Scenario::AdvTrain => "adv-train",
            Scenario::SolveDemo => "solve-demo",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ens" => Ok(Scenario::Ens),
            "uni" => Ok(Scenario::Uni),
            "eot" => Ok(Scenario::Eot),
            "adv-train" => Ok(Scenario::AdvTrain),
            "solve-demo" => Ok(Scenario::SolveDemo),
            _ => Err(Error::invalid("scenario", format!("unknown scenario `{s}`"))),
        }
    }
}

/// Input domain; the unbounded variant leaves inputs unclipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainSpec {
    Unbounded,
    Box { lo: f64, hi: f64 },
}

impl DomainSpec {
    pub fn to_box(self) -> DomainBox {
        match self {
            DomainSpec::Unbounded => DomainBox::UNBOUNDED,
            DomainSpec::Box { lo, hi } => DomainBox { lo, hi },
        }
    }
}

/// One ensemble member: hidden widths (empty for linear), a logit
/// multiplier applied after training, and its training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimSpec {
    pub hidden: Vec<usize>,
    pub logit_scale: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EotSpec {
    pub transforms: Vec<TransformSpec>,
    pub options: EotOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainSpec {
    pub methods: Vec<AdvTrainMethod>,
    /// Attack used to craft training batches; its strategy is overridden
    /// per method.
    pub attack: AttackConfig,
    pub train: TrainConfig,
    /// Single-objective attack on the averaged ensemble used to score
    /// robustness.
    pub eval_attack: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub train_data: DataSpec,
    pub eval_data: DataSpec,
    pub domain: DomainSpec,
    pub victims: Vec<VictimSpec>,
    /// One attack per strategy row.
    pub attacks: Vec<AttackConfig>,
    /// Universal-perturbation group size.
    pub group_size: usize,
    pub eot: Option<EotSpec>,
    pub adv_train: Option<AdvTrainSpec>,
}

impl ExperimentSpec {
    /// Truncated SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.attacks {
            a.validate()?;
        }
        if let Some(at) = &self.adv_train {
            at.attack.validate()?;
            at.eval_attack.validate()?;
        }
        match self.scenario {
            Scenario::Ens | Scenario::Uni | Scenario::Eot if self.attacks.is_empty() => {
                Err(Error::Empty("attack list"))
            }
            Scenario::Ens | Scenario::AdvTrain if self.victims.is_empty() => Err(Error::Empty("victim list")),
            Scenario::Uni if self.group_size == 0 => Err(Error::invalid("group_size", "must be positive")),
            Scenario::Eot if self.eot.is_none() => Err(Error::invalid("eot", "scenario needs transforms")),
            Scenario::AdvTrain if self.adv_train.is_none() => {
                Err(Error::invalid("adv_train", "scenario needs a training spec"))
            }
            _ => Ok(()),
        }
    }

    /// Copy with every attack's strategy replaced by `strategies`, keeping
    /// the first attack's other settings.
    pub fn with_strategies(&self, strategies: &[Strategy]) -> Self {
        let base = self.attacks.first().cloned().unwrap_or_default();
        Self {
            attacks: strategies
                .iter()
                .map(|&strategy| AttackConfig {
                    strategy,
                    ..base.clone()
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Trains the victims of `spec` on its training split.
pub fn train_victims(spec: &ExperimentSpec) -> Result<Vec<Classifier>> {
    let data = spec.train_data.generate()?;
    spec.victims
        .par_iter()
        .map(|v| {
            let arch = ArchSpec::mlp(data.dim, &v.hidden, data.classes);
            let mut model = train_classifier(&data, &arch, &v.train)?;
            if v.logit_scale != 1.0 {
                model.scale_logits(v.logit_scale);
            }
            Ok(model)
        })
        .collect()
}

fn sample_seed(base: u64, sample: usize) -> u64 {
    base ^ (sample as u64).wrapping_mul(0xd6e8_feb8_6659_fd93)
}

/// Seeded random partition of `0..n` into groups of `k`; the remainder
/// is dropped.
pub fn universal_groups(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = epoch_order(n, &mut rng);
    order.chunks_exact(k.max(1)).map(<[usize]>::to_vec).collect()
}

fn percent(v: f64) -> f64 {
    100.0 * v
}

fn row_from_metrics(strategy: &str, scenario: &str, m: &Metrics, seconds: f64) -> ResultRow {
    ResultRow {
        strategy: strategy.into(),
        scenario: scenario.into(),
        samples: m.samples,
        a_all: percent(m.a_all),
        a_avg: percent(m.a_avg),
        per_task: m.per_task.iter().copied().map(percent).collect(),
        weights: m.mean_weights.clone(),
        natural_accuracy: None,
        robust_accuracy: None,
        seconds,
    }
}

/// Per-strategy outcome before it is flattened into a table row.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub attack: AttackConfig,
    pub reports: Vec<AttackReport>,
    pub metrics: Metrics,
    pub seconds: f64,
}

/// Everything [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: ResultTable,
    pub runs: Vec<StrategyRun>,
}

fn attack_all<F>(n: usize, attack: &AttackConfig, one: F) -> Result<Vec<AttackReport>>
where
    F: Fn(usize, &AttackConfig) -> Result<AttackReport> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let cfg = AttackConfig {
                seed: sample_seed(attack.seed, i),
                ..attack.clone()
            };
            one(i, &cfg)
        })
        .collect()
}

fn strategy_reports(
    spec: &ExperimentSpec,
    victims: &[Classifier],
    eval: &Dataset,
    attack: &AttackConfig,
) -> Result<Vec<AttackReport>> {
    let domain = spec.domain.to_box();
    match spec.scenario {
        Scenario::Ens => attack_all(eval.len(), attack, |i, cfg| {
            let mut b = ensemble_bundle(victims, &eval.inputs[i], eval.labels[i], cfg.loss, domain)?;
            Ok(run_attack(&mut b, cfg)?.report)
        }),
        Scenario::Uni => {
            let model = victims.first().ok_or(Error::Empty("victim list"))?;
            let groups = universal_groups(eval.len(), spec.group_size, spec.seed);
            attack_all(groups.len(), attack, |g, cfg| {
                let inputs: Vec<Vec<f64>> = groups[g].iter().map(|&i| eval.inputs[i].clone()).collect();
                let labels: Vec<usize> = groups[g].iter().map(|&i| eval.labels[i]).collect();
                let mut b = universal_bundle(model, &inputs, &labels, cfg.loss, domain)?;
                Ok(run_attack(&mut b, cfg)?.report)
            })
        }
        Scenario::Eot => {
            let model = victims.first().ok_or(Error::Empty("victim list"))?;
            let eot = spec.eot.as_ref().ok_or(Error::invalid("eot", "missing"))?;
            attack_all(eval.len(), attack, |i, cfg| {
                let options = EotOptions {
                    seed: cfg.seed,
                    ..eot.options.clone()
                };
                let mut b = eot_bundle(
                    model,
                    &eval.inputs[i],
                    eval.labels[i],
                    glyph_shape(),
                    &eot.transforms,
                    cfg.loss,
                    options,
                )?;
                Ok(run_attack(&mut b, cfg)?.report)
            })
        }
        Scenario::AdvTrain | Scenario::SolveDemo => Err(Error::invalid("scenario", "not an attack scenario")),
    }
}

/// Runs `spec` against already-trained `victims` (ignored by the
/// adversarial-training and listing scenarios). Traces, when enabled on
/// an attack, are written under `trace_dir`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    victims: &[Classifier],
    trace_dir: Option<&Path>,
) -> Result<ExperimentOutput> {
    run_experiment_with(spec, victims, None, trace_dir)
}

/// [`run_experiment`] with an optional evaluation set replacing the one
/// the spec would generate.
pub fn run_experiment_with(
    spec: &ExperimentSpec,
    victims: &[Classifier],
    eval: Option<&Dataset>,
    trace_dir: Option<&Path>,
) -> Result<ExperimentOutput> {
    spec.validate()?;
    let generated;
    let eval = match eval {
        Some(d) => d,
        None => {
            generated = spec.eval_data.generate()?;
            &generated
        }
    };
    if matches!(spec.scenario, Scenario::Ens | Scenario::Uni | Scenario::Eot) {
        if let Some(bad) = victims
            .iter()
            .find(|v| v.input_dim() != eval.dim || v.classes() != eval.classes)
        {
            return Err(Error::DimensionMismatch {
                what: "model vs evaluation data",
                expected: eval.dim,
                actual: bad.input_dim(),
            });
        }
    }
    let mut table = ResultTable::new(spec.hash(), spec.seed);
    let mut runs = Vec::new();
    match spec.scenario {
        Scenario::SolveDemo => {
            let demo = solve_demo();
            for run in &demo.runs {
                table.rows.push(ResultRow {
                    strategy: Strategy::Moo.name().into(),
                    scenario: format!("solve-demo:{}", run.name),
                    samples: 1,
                    a_all: 0.0,
                    a_avg: 0.0,
                    per_task: Vec::new(),
                    weights: run.step19().iter().map(|&w| w as f64).collect(),
                    natural_accuracy: None,
                    robust_accuracy: None,
                    seconds: 0.0,
                });
            }
        }
        Scenario::AdvTrain => {
            let at = spec.adv_train.as_ref().expect("validated");
            let train = spec.train_data.generate()?;
            let domain = spec.domain.to_box();
            let archs: Vec<ArchSpec> = spec
                .victims
                .iter()
                .map(|v| ArchSpec::mlp(train.dim, &v.hidden, train.classes))
                .collect();
            for &method in &at.methods {
                let start = Instant::now();
                let members = adversarial_train(&train, &archs, method, &at.attack, &at.train, domain)?;
                let rob = evaluate_robustness(&members, eval, &at.eval_attack, domain)?;
                let mut row = row_from_metrics(&method.name(), "adv-train", &rob.member_metrics, 0.0);
                row.weights.clear();
                row.natural_accuracy = Some(percent(rob.natural));
                row.robust_accuracy = Some(percent(rob.adversarial));
                row.seconds = start.elapsed().as_secs_f64();
                table.rows.push(row);
            }
        }
        Scenario::Ens | Scenario::Uni | Scenario::Eot => {
            for attack in &spec.attacks {
                let start = Instant::now();
                let reports = strategy_reports(spec, victims, eval, attack)?;
                let metrics = evaluate_metrics(&reports)?;
                let seconds = start.elapsed().as_secs_f64();
                let scenario = match spec.scenario {
                    Scenario::Uni => format!("uni-k{}", spec.group_size),
                    s => s.name().to_string(),
                };
                table
                    .rows
                    .push(row_from_metrics(attack.strategy.name(), &scenario, &metrics, seconds));
                if let (Some(dir), true) = (trace_dir, attack.trace) {
                    let traces: Vec<(usize, &[_])> = reports
                        .iter()
                        .enumerate()
                        .filter_map(|(i, r)| r.trace.as_deref().map(|t| (i, t)))
                        .collect();
                    let file = format!("{}_{}_trace.csv", scenario, attack.strategy.name());
                    write_trace_csv(&traces, &dir.join(file))?;
                }
                runs.push(StrategyRun {
                    attack: attack.clone(),
                    reports,
                    metrics,
                    seconds,
                });
            }
        }
    }
    table.check()?;
    Ok(ExperimentOutput { table, runs })
}

/// Gradient strengths of the three listing inputs.
pub const LISTING_INPUTS: [(&str, [f32; 5]); 3] = [
    ("input_1", [0.1, 0.1, 0.1, 0.1, 0.2]),
    ("input_2", [0.01, 0.1, 0.1, 0.1, 2e3]),
    ("input_3", [0.001, 0.002, 0.002, 0.002, 2e3]),
];

/// Expected step-19 weights for each listing input.
pub const LISTING_STEP19: [[f32; 5]; 3] = [
    [0.20344244, 0.20344244, 0.20344244, 0.20344244, 0.18623024],
    [9.999982e-01, 5.582609e-07, 5.582609e-07, 5.582609e-07, 0.0],
    [0.28042343, 0.23985887, 0.23985887, 0.23985887, 0.0],
];

pub const LISTING_TOL: f32 = 1e-4;
const LISTING_STEPS: usize = 20;

#[derive(Debug, Clone)]
pub struct DemoRun {
    pub name: &'static str,
    pub strengths: [f32; 5],
    /// Weights before each of the 20 updates.
    pub trajectory: Vec<Vec<f32>>,
    pub expected: [f32; 5],
    pub max_deviation: f32,
}

impl DemoRun {
    pub fn step19(&self) -> &[f32] {
        &self.trajectory[LISTING_STEPS - 1]
    }
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub runs: Vec<DemoRun>,
}

impl DemoReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|r| r.max_deviation <= LISTING_TOL)
    }
}

/// Softmax-parameterized descent on `(sum_i w_i g_i)^2` from uniform
/// logits 0.2 with step 1.0, in single precision.
pub fn solve_demo() -> DemoReport {
    let runs = LISTING_INPUTS
        .iter()
        .zip(LISTING_STEP19)
        .map(|(&(name, strengths), expected)| {
            let g: Vec<f64> = strengths.iter().map(|&v| v as f64).collect();
            let q = GramMatrix::rank_one(&g).expect("finite strengths");
            let trajectory = softmax_descent_trace::<f32>(&q, &[0.2; 5], LISTING_STEPS, 1.0);
            let max_deviation = trajectory[LISTING_STEPS - 1]
                .iter()
                .zip(expected)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            DemoRun {
                name,
                strengths,
                trajectory,
                expected,
                max_deviation,
            }
        })
        .collect();
    DemoReport { runs }
}

/// Shipped experiment presets.
pub mod presets {
    use super::*;

    pub const DEFAULT_SEED: u64 = 2023;

    fn member(hidden: &[usize], seed: u64) -> VictimSpec {
        VictimSpec {
            hidden: hidden.to_vec(),
            logit_scale: 1.0,
            train: TrainConfig {
                epochs: 20,
                lr: 0.05,
                batch_size: 32,
                seed,
            },
        }
    }

    fn blobs(samples: usize, seed: u64) -> DataSpec {
        DataSpec::Blobs(BlobSpec {
            classes: 4,
            samples,
            dim: 32,
            margin: 4.0,
            seed,
        })
    }

    fn attack(strategy: Strategy, epsilon: f64, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon,
            steps: 50,
            lr_delta: epsilon / 8.0,
            strategy,
            seed,
            ..AttackConfig::default()
        }
    }

    /// Four members on Gaussian blobs; with `dominated`, the last member's
    /// logits are multiplied by 1000 after training.
    pub fn ens(dominated: bool) -> ExperimentSpec {
        let seed = DEFAULT_SEED;
        let mut victims = vec![
            member(&[], seed),
            member(&[32], seed + 1),
            member(&[64], seed + 2),
            member(&[32], seed + 3),
        ];
        if dominated {
            victims[3].logit_scale = 1000.0;
        }
        ExperimentSpec {
            name: if dominated { "ens-diverse" } else { "ens-homogeneous" }.into(),
            scenario: Scenario::Ens,
            seed,
            train_data: blobs(2000, seed),
            eval_data: blobs(200, seed + 100),
            domain: DomainSpec::Unbounded,
            victims,
            attacks: Strategy::ALL.iter().map(|&s| attack(s, 1.0, seed)).collect(),
            group_size: 1,
            eot: None,
            adv_train: None,
        }
    }

    /// One model; the eval set is split into groups of `k` sharing a
    /// perturbation.
    pub fn uni(k: usize) -> ExperimentSpec {
        let seed = DEFAULT_SEED;
        ExperimentSpec {
            name: format!("uni-k{k}"),
            scenario: Scenario::Uni,
            seed,
            train_data: blobs(2000, seed),
            eval_data: blobs(800, seed + 200),
            domain: DomainSpec::Unbounded,
            victims: vec![member(&[32], seed)],
            attacks: vec![attack(Strategy::Uniform, 0.5, seed)],
            group_size: k,
            eot: None,
            adv_train: None,
        }
    }

    /// Glyph images attacked through the deterministic transformation set.
    pub fn eot() -> ExperimentSpec {
        let seed = DEFAULT_SEED;
        let glyphs = |samples, seed| {
            DataSpec::Glyphs(GlyphSpec {
                classes: 4,
                samples,
                noise: 0.15,
                seed,
            })
        };
        ExperimentSpec {
            name: "eot".into(),
            scenario: Scenario::Eot,
            seed,
            train_data: glyphs(1000, seed),
            eval_data: glyphs(200, seed + 300),
            domain: DomainSpec::Box { lo: 0.0, hi: 1.0 },
            victims: vec![member(&[64], seed)],
            attacks: Strategy::ALL.iter().map(|&s| attack(s, 0.3, seed)).collect(),
            group_size: 1,
            eot: Some(EotSpec {
                transforms: TransformKind::ALL
                    .iter()
                    .map(|&k| TransformSpec::deterministic(k))
                    .collect(),
                options: EotOptions {
                    achievement: AchievementRule::Center,
                    ..EotOptions::default()
                },
            }),
            adv_train: None,
        }
    }

    /// Three-member ensemble trained with each adversary, scored by the
    /// averaged-ensemble attack.
    pub fn adv_train() -> ExperimentSpec {
        let seed = DEFAULT_SEED;
        let train = TrainConfig {
            epochs: 10,
            lr: 0.05,
            batch_size: 32,
            seed,
        };
        let at_attack = AttackConfig {
            steps: 10,
            lr_delta: 0.25,
            ..attack(Strategy::TaMoo, 1.0, seed)
        };
        ExperimentSpec {
            name: "adv-train".into(),
            scenario: Scenario::AdvTrain,
            seed,
            train_data: blobs(1000, seed),
            eval_data: blobs(1000, seed + 400),
            domain: DomainSpec::Unbounded,
            victims: vec![member(&[], seed), member(&[32], seed + 1), member(&[64], seed + 2)],
            attacks: Vec::new(),
            group_size: 1,
            eot: None,
            adv_train: Some(AdvTrainSpec {
                methods: vec![AdvTrainMethod::Pgd, AdvTrainMethod::Multi(Strategy::TaMoo)],
                attack: AttackConfig {
                    loss: LossKind::Ce,
                    ..at_attack
                },
                train,
                eval_attack: AttackConfig {
                    steps: 20,
                    ..attack(Strategy::Uniform, 1.0, seed + 1)
                },
            }),
        }
    }

    pub fn by_name(name: &str) -> Result<ExperimentSpec> {
        match name {
            "ens" | "ens-diverse" => Ok(ens(true)),
            "ens-homogeneous" => Ok(ens(false)),
            "uni" => Ok(uni(4)),
            "eot" => Ok(eot()),
            "adv-train" => Ok(adv_train()),
            "solve-demo" => Ok(ExperimentSpec {
                name: "solve-demo".into(),
                scenario: Scenario::SolveDemo,
                attacks: Vec::new(),
                ..ens(false)
            }),
            _ => Err(Error::invalid("scenario", format!("unknown preset `{name}`"))),
        }
    }
}
