//! Multi-task attack problems over a single shared perturbation.
//!
//! Every scenario implements [`TaskBundle`]: per-task loss, input gradient
//! and success predicate as functions of the perturbation `delta`.
//!
//! | bundle       | task `i`                         | success reference     |
//! |--------------|----------------------------------|-----------------------|
//! | ensemble     | model `i` at `x + delta`         | ground-truth label    |
//! | universal    | the model at `x_i + delta`       | benign prediction     |
//! | eot          | the model at `t_i(x + delta)`    | benign prediction     |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    argmax, ensemble_ce_loss_and_grad, ensemble_predict, loss_and_grad, Classifier, LossKind, LossTarget,
};
use crate::transforms::{apply_transform, ImageShape, Transform, TransformSpec};

/// Valid range for every coordinate of an input `x + delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: f64,
    pub hi: f64,
}

impl DomainBox {
    pub const UNBOUNDED: DomainBox = DomainBox {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub const UNIT: DomainBox = DomainBox { lo: 0.0, hi: 1.0 };
}

/// Per-coordinate interval the perturbation itself must stay in so that
/// every input it is added to lies inside the domain box.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DeltaBounds {
    fn for_inputs<'a>(domain: DomainBox, inputs: impl IntoIterator<Item = &'a Vec<f64>>, dim: usize) -> Self {
        let mut lo = vec![f64::NEG_INFINITY; dim];
        let mut hi = vec![f64::INFINITY; dim];
        for x in inputs {
            for j in 0..dim {
                lo[j] = lo[j].max(domain.lo - x[j]);
                hi[j] = hi[j].min(domain.hi - x[j]);
            }
        }
        Self { lo, hi }
    }

    pub fn clamp(&self, delta: &mut [f64]) {
        for ((d, &lo), &hi) in delta.iter_mut().zip(&self.lo).zip(&self.hi) {
            *d = d.clamp(lo, hi.max(lo));
        }
    }

    pub fn contains(&self, delta: &[f64], tol: f64) -> bool {
        delta
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&d, (&lo, &hi))| d >= lo - tol && d <= hi + tol)
    }
}

/// A multi-objective attack problem over one perturbation of length `dim`.
pub trait TaskBundle: Send {
    fn task_count(&self) -> usize;

    fn dim(&self) -> usize;

    /// Loss of task `task` at `delta` and its gradient with respect to
    /// `delta`. The gradient may contain non-finite entries.
    fn loss_and_grad(&self, task: usize, delta: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn is_achieved(&self, task: usize, delta: &[f64]) -> Result<bool>;

    fn delta_bounds(&self) -> DeltaBounds;

    /// Refreshes stochastic state; called once per outer attack iteration.
    fn resample(&mut self) {}

    fn loss(&self, task: usize, delta: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(task, delta)?.0)
    }

    fn grad(&self, task: usize, delta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(task, delta)?.1)
    }

    fn achieved_mask(&self, delta: &[f64]) -> Result<Vec<bool>> {
        (0..self.task_count()).map(|i| self.is_achieved(i, delta)).collect()
    }
}

fn shifted(x: &[f64], delta: &[f64]) -> Vec<f64> {
    x.iter().zip(delta).map(|(a, b)| a + b).collect()
}

fn check_delta(dim: usize, delta: &[f64]) -> Result<()> {
    if delta.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "perturbation",
            expected: dim,
            actual: delta.len(),
        });
    }
    Ok(())
}

fn check_task(m: usize, task: usize) -> Result<()> {
    if task >= m {
        return Err(Error::invalid(
            "task",
            format!("index {task} out of range for {m} tasks"),
        ));
    }
    Ok(())
}

/// Attack every model of an ensemble at once; task `i` is fooling model `i`.
pub struct EnsembleBundle<'a> {
    models: &'a [Classifier],
    x: Vec<f64>,
    label: usize,
    kind: LossKind,
    targets: Vec<LossTarget>,
    domain: DomainBox,
}

pub fn ensemble_bundle<'a>(
    models: &'a [Classifier],
    x: &[f64],
    label: usize,
    kind: LossKind,
    domain: DomainBox,
) -> Result<EnsembleBundle<'a>> {
    let first = models.first().ok_or(Error::Empty("ensemble"))?;
    for m in models {
        if m.input_dim() != first.input_dim() || m.classes() != first.classes() {
            return Err(Error::DimensionMismatch {
                what: "ensemble member",
                expected: first.input_dim(),
                actual: m.input_dim(),
            });
        }
    }
    if x.len() != first.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "input",
            expected: first.input_dim(),
            actual: x.len(),
        });
    }
    if label >= first.classes() {
        return Err(Error::invalid("label", "out of range"));
    }
    let targets = models
        .iter()
        .map(|m| Ok(LossTarget::with_reference(label, m.forward(x)?.probs)))
        .collect::<Result<_>>()?;
    Ok(EnsembleBundle {
        models,
        x: x.to_vec(),
        label,
        kind,
        targets,
        domain,
    })
}

impl TaskBundle for EnsembleBundle<'_> {
    fn task_count(&self) -> usize {
        self.models.len()
    }

    fn dim(&self) -> usize {
        self.x.len()
    }

    fn loss_and_grad(&self, task: usize, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_task(self.models.len(), task)?;
        check_delta(self.dim(), delta)?;
        loss_and_grad(
            &self.models[task],
            &shifted(&self.x, delta),
            &self.targets[task],
            self.kind,
        )
    }

    fn is_achieved(&self, task: usize, delta: &[f64]) -> Result<bool> {
        check_task(self.models.len(), task)?;
        check_delta(self.dim(), delta)?;
        Ok(self.models[task].predict(&shifted(&self.x, delta))? != self.label)
    }

    fn delta_bounds(&self) -> DeltaBounds {
        DeltaBounds::for_inputs(self.domain, [&self.x], self.dim())
    }
}

/// One perturbation shared by a group of samples; task `i` is sample `i`.
pub struct UniversalBundle<'a> {
    model: &'a Classifier,
    inputs: Vec<Vec<f64>>,
    targets: Vec<LossTarget>,
    benign: Vec<usize>,
    kind: LossKind,
    domain: DomainBox,
}

pub fn universal_bundle<'a>(
    model: &'a Classifier,
    inputs: &[Vec<f64>],
    labels: &[usize],
    kind: LossKind,
    domain: DomainBox,
) -> Result<UniversalBundle<'a>> {
    if inputs.is_empty() {
        return Err(Error::Empty("universal batch"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: inputs.len(),
            actual: labels.len(),
        });
    }
    let mut targets = Vec::with_capacity(inputs.len());
    let mut benign = Vec::with_capacity(inputs.len());
    for (x, &y) in inputs.iter().zip(labels) {
        let pred = model.forward(x)?;
        if y >= model.classes() {
            return Err(Error::invalid("label", "out of range"));
        }
        benign.push(pred.class());
        targets.push(LossTarget::with_reference(y, pred.probs));
    }
    Ok(UniversalBundle {
        model,
        inputs: inputs.to_vec(),
        targets,
        benign,
        kind,
        domain,
    })
}

impl UniversalBundle<'_> {
    /// Benign predicted class of every sample.
    pub fn benign_predictions(&self) -> &[usize] {
        &self.benign
    }
}

impl TaskBundle for UniversalBundle<'_> {
    fn task_count(&self) -> usize {
        self.inputs.len()
    }

    fn dim(&self) -> usize {
        self.model.input_dim()
    }

    fn loss_and_grad(&self, task: usize, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_task(self.inputs.len(), task)?;
        check_delta(self.dim(), delta)?;
        loss_and_grad(
            self.model,
            &shifted(&self.inputs[task], delta),
            &self.targets[task],
            self.kind,
        )
    }

    fn is_achieved(&self, task: usize, delta: &[f64]) -> Result<bool> {
        check_task(self.inputs.len(), task)?;
        check_delta(self.dim(), delta)?;
        Ok(self.model.predict(&shifted(&self.inputs[task], delta))? != self.benign[task])
    }

    fn delta_bounds(&self) -> DeltaBounds {
        DeltaBounds::for_inputs(self.domain, &self.inputs, self.dim())
    }
}

/// How success is judged for a stochastic transformation family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AchievementRule {
    /// Use the family's fixed deterministic member.
    Center,
    /// Succeed when at least `k` of `n` draws, frozen at construction,
    /// are misclassified.
    KOfN { k: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EotOptions {
    /// Draws averaged per loss evaluation.
    pub mc_samples: usize,
    pub seed: u64,
    pub achievement: AchievementRule,
    /// Pixel floor of the gamma transform; zero exposes the unbounded
    /// derivative at black pixels.
    pub gamma_floor: f64,
}

impl Default for EotOptions {
    fn default() -> Self {
        Self {
            mc_samples: 1,
            seed: 0,
            achievement: AchievementRule::Center,
            gamma_floor: crate::transforms::GAMMA_FLOOR,
        }
    }
}

/// Attack that must survive each of several transformation families;
/// task `i` is family `i`.
pub struct EotBundle<'a> {
    model: &'a Classifier,
    x: Vec<f64>,
    shape: ImageShape,
    specs: Vec<TransformSpec>,
    target: LossTarget,
    benign: usize,
    kind: LossKind,
    options: EotOptions,
    streams: Vec<ChaCha8Rng>,
    /// Draws used by the current loss evaluations, per task.
    current: Vec<Vec<Transform>>,
    /// Transforms judged by the success predicate, per task.
    judges: Vec<Vec<Transform>>,
}

fn with_floor(t: Transform, floor: f64) -> Transform {
    match t {
        Transform::Gamma { gamma, .. } => Transform::Gamma { gamma, floor },
        other => other,
    }
}

pub fn eot_bundle<'a>(
    model: &'a Classifier,
    x: &[f64],
    label: usize,
    shape: ImageShape,
    transforms: &[TransformSpec],
    kind: LossKind,
    options: EotOptions,
) -> Result<EotBundle<'a>> {
    if transforms.is_empty() {
        return Err(Error::Empty("transform list"));
    }
    if x.len() != shape.len() || model.input_dim() != shape.len() {
        return Err(Error::DimensionMismatch {
            what: "image",
            expected: shape.len(),
            actual: x.len(),
        });
    }
    if options.mc_samples == 0 {
        return Err(Error::invalid("mc_samples", "must be positive"));
    }
    if let AchievementRule::KOfN { k, n } = options.achievement {
        if k == 0 || k > n {
            return Err(Error::invalid("achievement", "need 0 < k <= n"));
        }
    }
    for spec in transforms {
        spec.validate()?;
    }
    let pred = model.forward(x)?;
    let streams: Vec<ChaCha8Rng> = (0..transforms.len())
        .map(|i| ChaCha8Rng::seed_from_u64(options.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64)))
        .collect();
    let judges = transforms
        .iter()
        .enumerate()
        .map(|(i, spec)| match options.achievement {
            AchievementRule::Center => vec![with_floor(spec.center(), options.gamma_floor)],
            AchievementRule::KOfN { n, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ (0xa11c_e000 + i as u64));
                (0..n)
                    .map(|_| with_floor(spec.draw(&mut rng), options.gamma_floor))
                    .collect()
            }
        })
        .collect();
    let mut bundle = EotBundle {
        model,
        x: x.to_vec(),
        shape,
        specs: transforms.to_vec(),
        target: LossTarget::with_reference(label, pred.probs.clone()),
        benign: pred.class(),
        kind,
        options,
        streams,
        current: Vec::new(),
        judges,
    };
    bundle.resample();
    Ok(bundle)
}

impl EotBundle<'_> {
    /// Transforms currently used by task `task`'s loss.
    pub fn current_draws(&self, task: usize) -> &[Transform] {
        &self.current[task]
    }

    /// Replaces task draws; used to freeze a stochastic bundle in tests.
    pub fn set_draws(&mut self, task: usize, draws: Vec<Transform>) {
        self.current[task] = draws;
    }

    pub fn benign_prediction(&self) -> usize {
        self.benign
    }
}

impl TaskBundle for EotBundle<'_> {
    fn task_count(&self) -> usize {
        self.specs.len()
    }

    fn dim(&self) -> usize {
        self.x.len()
    }

    fn loss_and_grad(&self, task: usize, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_task(self.specs.len(), task)?;
        check_delta(self.dim(), delta)?;
        let input = shifted(&self.x, delta);
        let draws = &self.current[task];
        let n = draws.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; input.len()];
        for t in draws {
            let applied = apply_transform(t, &input, self.shape)?;
            let (v, g) = loss_and_grad(self.model, &applied.output, &self.target, self.kind)?;
            value += v / n;
            for (acc, gi) in grad.iter_mut().zip(applied.vjp(&g)) {
                *acc += gi / n;
            }
        }
        Ok((value, grad))
    }

    fn is_achieved(&self, task: usize, delta: &[f64]) -> Result<bool> {
        check_task(self.specs.len(), task)?;
        check_delta(self.dim(), delta)?;
        let input = shifted(&self.x, delta);
        let mut fooled = 0usize;
        for t in &self.judges[task] {
            let out = apply_transform(t, &input, self.shape)?.output;
            if self.model.predict(&out)? != self.benign {
                fooled += 1;
            }
        }
        let needed = match self.options.achievement {
            AchievementRule::Center => 1,
            AchievementRule::KOfN { k, .. } => k,
        };
        Ok(fooled >= needed)
    }

    fn delta_bounds(&self) -> DeltaBounds {
        DeltaBounds::for_inputs(DomainBox::UNIT, [&self.x], self.dim())
    }

    fn resample(&mut self) {
        let floor = self.options.gamma_floor;
        let mc = self.options.mc_samples;
        self.current = self
            .specs
            .iter()
            .zip(self.streams.iter_mut())
            .map(|(spec, rng)| (0..mc).map(|_| with_floor(spec.draw(rng), floor)).collect())
            .collect();
    }
}

/// Single task: cross-entropy of the mean-probability ensemble. Success
/// means the ensemble's prediction differs from the label.
pub struct AveragedEnsembleBundle<'a> {
    models: &'a [Classifier],
    x: Vec<f64>,
    label: usize,
    domain: DomainBox,
}

pub fn averaged_ensemble_bundle<'a>(
    models: &'a [Classifier],
    x: &[f64],
    label: usize,
    domain: DomainBox,
) -> Result<AveragedEnsembleBundle<'a>> {
    let first = models.first().ok_or(Error::Empty("ensemble"))?;
    check_delta(first.input_dim(), x)?;
    Ok(AveragedEnsembleBundle {
        models,
        x: x.to_vec(),
        label,
        domain,
    })
}

impl TaskBundle for AveragedEnsembleBundle<'_> {
    fn task_count(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        self.x.len()
    }

    fn loss_and_grad(&self, task: usize, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_task(1, task)?;
        check_delta(self.dim(), delta)?;
        ensemble_ce_loss_and_grad(self.models, &shifted(&self.x, delta), self.label)
    }

    fn is_achieved(&self, task: usize, delta: &[f64]) -> Result<bool> {
        check_task(1, task)?;
        check_delta(self.dim(), delta)?;
        Ok(ensemble_predict(self.models, &shifted(&self.x, delta))? != self.label)
    }

    fn delta_bounds(&self) -> DeltaBounds {
        DeltaBounds::for_inputs(self.domain, [&self.x], self.dim())
    }
}

/// Predicted class of the benign input for each ensemble member.
pub fn member_predictions(models: &[Classifier], x: &[f64]) -> Result<Vec<usize>> {
    models.iter().map(|m| Ok(argmax(&m.forward(x)?.logits))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchSpec;
    use crate::transforms::TransformKind;

    fn model(d: usize, seed: u64) -> Classifier {
        Classifier::init(&ArchSpec::mlp(d, &[8], 3), seed).unwrap()
    }

    #[test]
    fn ensemble_success_uses_ground_truth() {
        let models = vec![model(4, 1), model(4, 2)];
        let x = vec![0.2, -0.4, 0.9, 0.1];
        let preds = member_predictions(&models, &x).unwrap();
        let label = (0..3).find(|c| *c != preds[0]).unwrap();
        let b = ensemble_bundle(&models, &x, label, LossKind::Ce, DomainBox::UNBOUNDED).unwrap();
        assert!(b.is_achieved(0, &[0.0; 4]).unwrap());
    }

    #[test]
    fn universal_success_uses_benign_prediction() {
        let m = model(4, 3);
        let inputs = vec![vec![0.2, -0.4, 0.9, 0.1], vec![-1.0, 0.3, 0.2, 0.5]];
        let benign: Vec<usize> = inputs.iter().map(|x| m.predict(x).unwrap()).collect();
        // Labels deliberately disagree with the model's benign predictions.
        let labels: Vec<usize> = benign.iter().map(|p| (p + 1) % 3).collect();
        let b = universal_bundle(&m, &inputs, &labels, LossKind::Ce, DomainBox::UNBOUNDED).unwrap();
        assert_eq!(b.achieved_mask(&[0.0; 4]).unwrap(), vec![false, false]);
        assert!(universal_bundle(&m, &[], &[], LossKind::Ce, DomainBox::UNBOUNDED).is_err());
    }

    #[test]
    fn universal_bounds_intersect_over_the_group() {
        let m = model(2, 3);
        let inputs = vec![vec![0.2, 0.9], vec![0.6, 0.1]];
        let b = universal_bundle(&m, &inputs, &[0, 1], LossKind::Ce, DomainBox::UNIT).unwrap();
        let bounds = b.delta_bounds();
        assert_eq!(bounds.lo, vec![-0.2, -0.1]);
        assert!((bounds.hi[0] - 0.4).abs() < 1e-15 && (bounds.hi[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn eot_identity_matches_plain_model() {
        let shape = ImageShape::square(4);
        let m = model(16, 5);
        let x: Vec<f64> = (0..16).map(|i| (i as f64) / 16.0).collect();
        let specs = [TransformSpec::deterministic(TransformKind::Identity)];
        let b = eot_bundle(&m, &x, 1, shape, &specs, LossKind::Ce, EotOptions::default()).unwrap();
        let delta = vec![0.01; 16];
        let (l, g) = b.loss_and_grad(0, &delta).unwrap();
        let (l2, g2) = loss_and_grad(&m, &shifted(&x, &delta), &LossTarget::label(1), LossKind::Ce).unwrap();
        assert_eq!(l, l2);
        assert_eq!(g, g2);
    }

    #[test]
    fn eot_rejects_bad_transform_ranges() {
        let shape = ImageShape::square(4);
        let m = model(16, 5);
        let x = vec![0.5; 16];
        let bad = TransformSpec {
            kind: TransformKind::CenterCrop,
            sampling: crate::transforms::Sampling::Fixed(0.3),
        };
        assert!(eot_bundle(&m, &x, 0, shape, &[bad], LossKind::Ce, EotOptions::default()).is_err());
    }
}
