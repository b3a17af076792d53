//! Outer attack loop, gradient cache and attack-success metrics.
//!
//! Each outer iteration collects every task's input gradient, turns them
//! into task weights with the configured [`Strategy`], ascends along the
//! weighted gradient and projects back into the perturbation budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    accuracy, ensemble_predict, epoch_order, sgd_step, ArchSpec, Classifier, Dataset, LossKind, TrainConfig,
};
use crate::simplex::{TaskStatus, WeightVector};
use crate::solvers::{gram, solve_minmax, solve_moo, solve_tamoo, solve_uniform, SolverConfig, SolverState};
use crate::tasks::{averaged_ensemble_bundle, ensemble_bundle, DomainBox, TaskBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Uniform,
    MinMax,
    Moo,
    TaMoo,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Uniform, Strategy::MinMax, Strategy::Moo, Strategy::TaMoo];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "Uniform",
            Strategy::MinMax => "MinMax",
            Strategy::Moo => "MOO",
            Strategy::TaMoo => "TA-MOO",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "uniform" => Ok(Strategy::Uniform),
            "minmax" => Ok(Strategy::MinMax),
            "moo" => Ok(Strategy::Moo),
            "tamoo" => Ok(Strategy::TaMoo),
            _ => Err(Error::invalid("strategy", format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Zero,
    /// Uniform over `[-epsilon, epsilon]` per coordinate.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    /// `delta += lr * sign(g)`, then clip to the L-infinity ball.
    LinfSign,
    /// `delta += lr * g`, then rescale into the L2 ball.
    L2Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub lr_delta: f64,
    pub strategy: Strategy,
    pub solver: SolverConfig,
    pub minmax_gamma: f64,
    pub loss: LossKind,
    pub init: InitKind,
    pub seed: u64,
    pub cache_gradients: bool,
    pub update: UpdateRule,
    /// Record per-iteration losses, weights and gradient norms.
    pub trace: bool,
    /// Return the iterate with the most achieved tasks instead of the last.
    pub keep_best: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            steps: 100,
            lr_delta: 2.0 / 255.0,
            strategy: Strategy::TaMoo,
            solver: SolverConfig::default(),
            minmax_gamma: 3.0,
            loss: LossKind::Ce,
            init: InitKind::UniformRandom,
            seed: 0,
            cache_gradients: true,
            update: UpdateRule::LinfSign,
            trace: false,
            keep_best: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", "must be nonnegative and finite"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        if !(self.lr_delta > 0.0 && self.lr_delta.is_finite()) {
            return Err(Error::invalid("lr_delta", "must be positive and finite"));
        }
        if !(self.minmax_gamma > 0.0 && self.minmax_gamma.is_finite()) {
            return Err(Error::invalid("minmax_gamma", "must be positive and finite"));
        }
        self.solver.validate()
    }
}

/// One outer iteration, recorded before the update is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub losses: Vec<f64>,
    /// Empty when the step was skipped.
    pub weights: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub achieved: Vec<bool>,
    /// L-infinity norm of the perturbation after this step's update.
    pub delta_linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub successes: Vec<bool>,
    pub all_success: bool,
    pub final_losses: Vec<f64>,
    /// Weights of the last completed update.
    pub final_weights: Vec<f64>,
    /// Per-task gradient norm averaged over iterations.
    pub mean_grad_norms: Vec<f64>,
    /// Iterations whose update was skipped for non-finite gradients.
    pub skipped_steps: usize,
    /// Gradients replaced from the cache.
    pub cache_hits: usize,
    /// `(iteration, task)` pairs zero-filled because the cache was empty.
    pub empty_cache_events: Vec<(usize, usize)>,
    pub trace: Option<Vec<IterationRecord>>,
}

impl AttackReport {
    pub fn task_count(&self) -> usize {
        self.successes.len()
    }

    pub fn success_count(&self) -> usize {
        self.successes.iter().filter(|&&s| s).count()
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub delta: Vec<f64>,
    pub report: AttackReport,
}

/// Per-task memory of the last finite gradient.
#[derive(Debug, Clone, Default)]
pub struct GradientCache {
    slots: Vec<Option<Vec<f64>>>,
}

/// What [`GradientCache::apply`] did for one batch of gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CacheUse {
    pub replaced: Vec<usize>,
    /// Tasks with a non-finite gradient and nothing cached: zero-filled.
    pub zero_filled: Vec<usize>,
}

fn is_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl GradientCache {
    pub fn new(m: usize) -> Self {
        Self { slots: vec![None; m] }
    }

    pub fn slot(&self, task: usize) -> Option<&[f64]> {
        self.slots[task].as_deref()
    }

    /// Substitutes non-finite task gradients with the cached ones and
    /// refreshes the slots of finite ones.
    pub fn apply(&mut self, raw: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, CacheUse) {
        let mut usage = CacheUse::default();
        let out = raw
            .into_iter()
            .enumerate()
            .map(|(task, g)| {
                if is_finite(&g) {
                    self.slots[task] = Some(g.clone());
                    g
                } else if let Some(prev) = &self.slots[task] {
                    usage.replaced.push(task);
                    prev.clone()
                } else {
                    usage.zero_filled.push(task);
                    vec![0.0; g.len()]
                }
            })
            .collect();
        (out, usage)
    }
}

/// [`GradientCache::apply`] as a free function.
pub fn cached_gradients(raw: Vec<Vec<f64>>, cache: &mut GradientCache) -> (Vec<Vec<f64>>, CacheUse) {
    cache.apply(raw)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn initial_delta(cfg: &AttackConfig, dim: usize) -> Vec<f64> {
    match cfg.init {
        InitKind::UniformRandom if cfg.epsilon > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..dim).map(|_| rng.random_range(-cfg.epsilon..=cfg.epsilon)).collect()
        }
        _ => vec![0.0; dim],
    }
}

fn project_budget(cfg: &AttackConfig, delta: &mut [f64]) {
    match cfg.update {
        UpdateRule::LinfSign => delta.iter_mut().for_each(|d| *d = d.clamp(-cfg.epsilon, cfg.epsilon)),
        UpdateRule::L2Gradient => {
            let norm = l2(delta);
            if norm > cfg.epsilon {
                let scale = cfg.epsilon / norm;
                delta.iter_mut().for_each(|d| *d *= scale);
            }
        }
    }
}

/// Strategy state carried across outer iterations.
struct WeightPicker<'a> {
    cfg: &'a AttackConfig,
    state: SolverState,
}

impl WeightPicker<'_> {
    fn pick(
        &mut self,
        bundle: &dyn TaskBundle,
        delta: &[f64],
        losses: &[f64],
        grads: &[Vec<f64>],
    ) -> Result<WeightVector> {
        let m = grads.len();
        if m == 1 {
            return solve_uniform(1);
        }
        match self.cfg.strategy {
            Strategy::Uniform => solve_uniform(m),
            Strategy::MinMax => solve_minmax(losses, self.cfg.minmax_gamma),
            Strategy::Moo => solve_moo(&gram(grads)?, &mut self.state, &self.cfg.solver),
            Strategy::TaMoo => {
                let status = TaskStatus::new(bundle.achieved_mask(delta)?);
                solve_tamoo(&gram(grads)?, &status, &mut self.state, &self.cfg.solver)
            }
        }
    }
}

/// Runs the multi-objective attack on `bundle`.
pub fn run_attack(bundle: &mut dyn TaskBundle, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let m = bundle.task_count();
    let dim = bundle.dim();
    if m == 0 {
        return Err(Error::Empty("task bundle"));
    }
    let bounds = bundle.delta_bounds();
    let mut delta = initial_delta(cfg, dim);
    project_budget(cfg, &mut delta);
    bounds.clamp(&mut delta);

    let mut picker = WeightPicker {
        cfg,
        state: SolverState::uniform(m),
    };
    let mut cache = GradientCache::new(m);
    let mut trace = cfg.trace.then(Vec::new);
    let mut norm_sums = vec![0.0; m];
    let mut final_weights = Vec::new();
    let mut skipped_steps = 0;
    let mut cache_hits = 0;
    let mut empty_cache_events = Vec::new();
    let mut best: Option<(usize, Vec<f64>)> = None;

    for t in 0..cfg.steps {
        if t > 0 {
            bundle.resample();
        }
        let mut losses = Vec::with_capacity(m);
        let mut raw = Vec::with_capacity(m);
        for i in 0..m {
            let (l, g) = bundle.loss_and_grad(i, &delta)?;
            losses.push(l);
            raw.push(g);
        }
        let grads = if cfg.cache_gradients {
            let (g, usage) = cache.apply(raw);
            cache_hits += usage.replaced.len();
            empty_cache_events.extend(usage.zero_filled.into_iter().map(|task| (t, task)));
            g
        } else {
            raw
        };
        let grad_norms: Vec<f64> = grads.iter().map(|g| l2(g)).collect();
        for (acc, n) in norm_sums.iter_mut().zip(&grad_norms) {
            *acc += n;
        }

        let usable = grads.iter().all(|g| is_finite(g)) && losses.iter().all(|l| l.is_finite());
        let weights = if usable {
            Some(picker.pick(&*bundle, &delta, &losses, &grads)?)
        } else {
            None
        };
        let combined = weights.as_ref().map(|w| {
            let mut g = vec![0.0; dim];
            for (wi, gi) in w.as_slice().iter().zip(&grads) {
                for (acc, v) in g.iter_mut().zip(gi) {
                    *acc += wi * v;
                }
            }
            g
        });

        let achieved = if trace.is_some() {
            bundle.achieved_mask(&delta)?
        } else {
            Vec::new()
        };
        let mut step_weights = Vec::new();
        match combined.filter(|g| is_finite(g)) {
            Some(g) => {
                match cfg.update {
                    UpdateRule::LinfSign => {
                        for (d, gi) in delta.iter_mut().zip(&g) {
                            *d += cfg.lr_delta * sign(*gi);
                        }
                    }
                    UpdateRule::L2Gradient => {
                        for (d, gi) in delta.iter_mut().zip(&g) {
                            *d += cfg.lr_delta * gi;
                        }
                    }
                }
                project_budget(cfg, &mut delta);
                bounds.clamp(&mut delta);
                step_weights = weights.map(WeightVector::into_inner).unwrap_or_default();
                final_weights.clone_from(&step_weights);
            }
            None => skipped_steps += 1,
        }
        if let Some(trace) = trace.as_mut() {
            trace.push(IterationRecord {
                iteration: t,
                losses: losses.clone(),
                weights: step_weights,
                grad_norms,
                achieved,
                delta_linf: linf(&delta),
            });
        }
        if cfg.keep_best {
            let count = bundle.achieved_mask(&delta)?.iter().filter(|&&a| a).count();
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, delta.clone()));
            }
        }
    }

    if let Some((_, d)) = best {
        delta = d;
    }
    let successes = bundle.achieved_mask(&delta)?;
    let final_losses = (0..m).map(|i| bundle.loss(i, &delta)).collect::<Result<Vec<_>>>()?;
    let steps = cfg.steps as f64;
    Ok(AttackOutcome {
        report: AttackReport {
            all_success: successes.iter().all(|&s| s),
            successes,
            final_losses,
            final_weights,
            mean_grad_norms: norm_sums.into_iter().map(|s| s / steps).collect(),
            skipped_steps,
            cache_hits,
            empty_cache_events,
            trace,
        },
        delta,
    })
}

/// Aggregate attack-success rates, all fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    /// Fraction of samples on which every task succeeded.
    pub a_all: f64,
    /// Mean per-sample fraction of succeeded tasks.
    pub a_avg: f64,
    /// Success fraction of each task.
    pub per_task: Vec<f64>,
    pub mean_weights: Vec<f64>,
    pub mean_grad_norms: Vec<f64>,
}

pub fn evaluate_metrics(reports: &[AttackReport]) -> Result<Metrics> {
    let first = reports.first().ok_or(Error::Empty("report list"))?;
    let m = first.task_count();
    if let Some(bad) = reports.iter().find(|r| r.task_count() != m) {
        return Err(Error::DimensionMismatch {
            what: "report task count",
            expected: m,
            actual: bad.task_count(),
        });
    }
    let n = reports.len() as f64;
    let mut per_task = vec![0.0; m];
    let mut mean_weights = vec![0.0; m];
    let mut mean_grad_norms = vec![0.0; m];
    let mut all = 0usize;
    let mut avg = 0.0;
    for r in reports {
        if r.all_success {
            all += 1;
        }
        avg += r.success_count() as f64 / m as f64;
        for (i, &s) in r.successes.iter().enumerate() {
            if s {
                per_task[i] += 1.0;
            }
        }
        for (acc, w) in mean_weights.iter_mut().zip(&r.final_weights) {
            *acc += w;
        }
        for (acc, g) in mean_grad_norms.iter_mut().zip(&r.mean_grad_norms) {
            *acc += g;
        }
    }
    for v in per_task.iter_mut().chain(&mut mean_weights).chain(&mut mean_grad_norms) {
        *v /= n;
    }
    Ok(Metrics {
        samples: reports.len(),
        a_all: all as f64 / n,
        a_avg: avg / n,
        per_task,
        mean_weights,
        mean_grad_norms,
    })
}

/// Adversary used to build training batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvTrainMethod {
    /// Clean batches.
    Standard,
    /// Single-objective attack on the mean-probability ensemble.
    Pgd,
    /// Multi-objective attack over the members with the given strategy.
    Multi(Strategy),
}

impl AdvTrainMethod {
    pub fn name(self) -> String {
        match self {
            AdvTrainMethod::Standard => "Standard".into(),
            AdvTrainMethod::Pgd => "PGD-AT".into(),
            AdvTrainMethod::Multi(s) => format!("{}-AT", s.name()),
        }
    }
}

impl std::str::FromStr for AdvTrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let stem = lower.trim_end_matches("-at").trim_end_matches("_at");
        match stem {
            "standard" | "none" => Ok(AdvTrainMethod::Standard),
            "pgd" => Ok(AdvTrainMethod::Pgd),
            other => Ok(AdvTrainMethod::Multi(other.parse()?)),
        }
    }
}

fn attack_seed(base: u64, epoch: usize, sample: usize) -> u64 {
    base.wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(sample as u64)
}

/// Perturbs one sample against `members` with the given method.
fn adversarial_example(
    members: &[Classifier],
    x: &[f64],
    y: usize,
    method: AdvTrainMethod,
    cfg: &AttackConfig,
    domain: DomainBox,
) -> Result<Vec<f64>> {
    let delta = match method {
        AdvTrainMethod::Standard => return Ok(x.to_vec()),
        AdvTrainMethod::Pgd => {
            let mut b = averaged_ensemble_bundle(members, x, y, domain)?;
            run_attack(&mut b, cfg)?.delta
        }
        AdvTrainMethod::Multi(strategy) => {
            let mut b = ensemble_bundle(members, x, y, cfg.loss, domain)?;
            let cfg = AttackConfig {
                strategy,
                ..cfg.clone()
            };
            run_attack(&mut b, &cfg)?.delta
        }
    };
    Ok(x.iter().zip(&delta).map(|(a, b)| a + b).collect())
}

/// Trains an ensemble (one member per architecture) on adversarial
/// batches. Member `k` is initialized from `train.seed + k`; batches are
/// shared and ordered by the stream of `train.seed`. With a zero budget
/// every method reduces to [`AdvTrainMethod::Standard`].
pub fn adversarial_train(
    data: &Dataset,
    archs: &[ArchSpec],
    method: AdvTrainMethod,
    attack: &AttackConfig,
    train: &TrainConfig,
    domain: DomainBox,
) -> Result<Vec<Classifier>> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if archs.is_empty() {
        return Err(Error::Empty("architecture list"));
    }
    attack.validate()?;
    let mut members = archs
        .iter()
        .enumerate()
        .map(|(k, a)| {
            if a.input_dim != data.dim || a.classes != data.classes {
                return Err(Error::DimensionMismatch {
                    what: "architecture vs data",
                    expected: data.dim,
                    actual: a.input_dim,
                });
            }
            Classifier::init(a, train.seed + k as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    let method = if attack.epsilon == 0.0 {
        AdvTrainMethod::Standard
    } else {
        method
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ crate::models::SHUFFLE_STREAM);
    for epoch in 0..train.epochs {
        let order = epoch_order(data.len(), &mut rng);
        for chunk in order.chunks(train.batch_size.max(1)) {
            let snapshot = &members;
            let inputs = chunk
                .par_iter()
                .map(|&i| {
                    let cfg = AttackConfig {
                        seed: attack_seed(attack.seed, epoch, i),
                        ..attack.clone()
                    };
                    adversarial_example(snapshot, &data.inputs[i], data.labels[i], method, &cfg, domain)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<(&[f64], usize)> = inputs
                .iter()
                .zip(chunk)
                .map(|(x, &i)| (x.as_slice(), data.labels[i]))
                .collect();
            for member in members.iter_mut() {
                sgd_step(member, &batch, train.lr);
            }
        }
    }
    for member in members.iter_mut() {
        member.train_accuracy = Some(accuracy(member, data)?);
    }
    Ok(members)
}

/// Natural and adversarial accuracy of a mean-probability ensemble, plus
/// how often the adversarial examples fool each member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub natural: f64,
    pub adversarial: f64,
    /// Member-level success of the evaluation attack (fractions).
    pub member_metrics: Metrics,
}

/// Evaluates an ensemble against the single-objective attack on its
/// averaged output. Member success uses the ground-truth label.
pub fn evaluate_robustness(
    members: &[Classifier],
    data: &Dataset,
    attack: &AttackConfig,
    domain: DomainBox,
) -> Result<Robustness> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = &data.inputs[i];
            let y = data.labels[i];
            let natural = ensemble_predict(members, x)? == y;
            let mut b = averaged_ensemble_bundle(members, x, y, domain)?;
            let cfg = AttackConfig {
                seed: attack_seed(attack.seed, usize::MAX >> 1, i),
                ..attack.clone()
            };
            let delta = run_attack(&mut b, &cfg)?.delta;
            let adv: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let robust = ensemble_predict(members, &adv)? == y;
            let successes = members
                .iter()
                .map(|m| Ok(m.predict(&adv)? != y))
                .collect::<Result<Vec<bool>>>()?;
            Ok((natural, robust, successes))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let natural = rows.iter().filter(|r| r.0).count() as f64 / n;
    let adversarial = rows.iter().filter(|r| r.1).count() as f64 / n;
    let reports: Vec<AttackReport> = rows
        .into_iter()
        .map(|(_, _, successes)| AttackReport {
            all_success: successes.iter().all(|&s| s),
            successes,
            final_losses: Vec::new(),
            final_weights: Vec::new(),
            mean_grad_norms: Vec::new(),
            skipped_steps: 0,
            cache_hits: 0,
            empty_cache_events: Vec::new(),
            trace: None,
        })
        .collect();
    Ok(Robustness {
        natural,
        adversarial,
        member_metrics: evaluate_metrics(&reports)?,
    })
}
