//! Task-weight solvers.
//!
//! * [`solve_moo`]: min-norm point `argmin_w w^T Q w` over the simplex,
//!   solved by plain gradient descent on softmax logits.
//! * [`solve_tamoo`]: the same descent on `w^T Q w + lambda * Omega(w)`,
//!   where `Omega` pulls weight off goal-achieved tasks.
//! * [`solve_minmax`]: exact minimizer of the regularized worst-case inner
//!   problem `sum_i w_i f_i + gamma/2 |w - 1/m|^2`.
//! * [`solve_uniform`]: constant `1/m`.
//! * [`solve_minnorm_exact`]: Frank-Wolfe with exact line search, used as
//!   an oracle for the descent solvers.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{project_simplex, TaskStatus, WeightVector};

/// Symmetric matrix of pairwise inner products of task gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    /// Builds a matrix from row-major entries. Symmetry is checked to a
    /// relative tolerance of 1e-9.
    pub fn from_entries(m: usize, entries: Vec<f64>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Empty("gram matrix"));
        }
        if entries.len() != m * m {
            return Err(Error::DimensionMismatch {
                what: "gram entries",
                expected: m * m,
                actual: entries.len(),
            });
        }
        if let Some(index) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        for i in 0..m {
            for j in 0..i {
                let (a, b) = (entries[i * m + j], entries[j * m + i]);
                let scale = a.abs().max(b.abs()).max(1.0);
                if (a - b).abs() > 1e-9 * scale {
                    return Err(Error::invalid("gram", format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { m, entries })
    }

    /// `Q = g g^T` for scalar task strengths `g`.
    pub fn rank_one(strengths: &[f64]) -> Result<Self> {
        let m = strengths.len();
        let mut entries = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                entries[i * m + j] = strengths[i] * strengths[j];
            }
        }
        Self::from_entries(m, entries)
    }

    pub fn identity(m: usize) -> Self {
        let mut entries = vec![0.0; m * m];
        for i in 0..m {
            entries[i * m + i] = 1.0;
        }
        Self { m, entries }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn mul_vec(&self, w: &[f64]) -> Vec<f64> {
        self.entries
            .chunks(self.m)
            .map(|row| row.iter().zip(w).map(|(q, x)| q * x).sum())
            .collect()
    }

    pub fn quad_form(&self, w: &[f64]) -> f64 {
        w.iter().zip(self.mul_vec(w)).map(|(a, b)| a * b).sum()
    }

    fn cast<T: Float>(&self) -> Vec<T> {
        self.entries
            .iter()
            .map(|&v| T::from(v).expect("finite entry"))
            .collect()
    }
}

/// Gram matrix of task gradients. Only the upper triangle is computed; the
/// lower one is mirrored.
pub fn gram(gradients: &[Vec<f64>]) -> Result<GramMatrix> {
    let m = gradients.len();
    if m == 0 {
        return Err(Error::Empty("gradient list"));
    }
    let d = gradients[0].len();
    if d == 0 {
        return Err(Error::Empty("gradient vector"));
    }
    for (task, g) in gradients.iter().enumerate() {
        if g.len() != d {
            return Err(Error::DimensionMismatch {
                what: "task gradient",
                expected: d,
                actual: g.len(),
            });
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTask { task, index });
        }
    }
    let mut entries = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let dot: f64 = gradients[i].iter().zip(&gradients[j]).map(|(a, b)| a * b).sum();
            entries[i * m + j] = dot;
            entries[j * m + i] = dot;
        }
    }
    Ok(GramMatrix { m, entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Gradient steps on the logits per call.
    pub inner_steps: usize,
    pub lr_w: f64,
    /// Weight of the extended-simplex distance.
    pub lambda: f64,
    /// Weight of the entropy of unachieved weights (off by default).
    pub entropy_coeff: f64,
    /// Keep the logits across calls instead of resetting to uniform.
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            inner_steps: 10,
            lr_w: 0.005,
            lambda: 100.0,
            entropy_coeff: 0.0,
            warm_start: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps", "must be positive"));
        }
        if !(self.lr_w > 0.0 && self.lr_w.is_finite()) {
            return Err(Error::invalid("lr_w", "must be positive and finite"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be nonnegative and finite"));
        }
        if !(self.entropy_coeff >= 0.0 && self.entropy_coeff.is_finite()) {
            return Err(Error::invalid("entropy_coeff", "must be nonnegative and finite"));
        }
        Ok(())
    }
}

/// Pre-softmax logits; `softmax(alpha)` is the current weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub alpha: Vec<f64>,
}

impl SolverState {
    /// Every logit set to `1/m`.
    pub fn uniform(m: usize) -> Self {
        Self {
            alpha: vec![1.0 / m as f64; m],
        }
    }

    pub fn reset(&mut self) {
        let m = self.alpha.len();
        self.alpha.iter_mut().for_each(|a| *a = 1.0 / m as f64);
    }

    pub fn weights(&self) -> WeightVector {
        WeightVector::from_feasible(softmax(&self.alpha))
    }
}

pub(crate) fn softmax<T: Float>(alpha: &[T]) -> Vec<T> {
    let max = alpha.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = alpha.iter().map(|&a| (a - max).exp()).collect();
    let total = exps.iter().copied().fold(T::zero(), |acc, e| acc + e);
    exps.into_iter().map(|e| e / total).collect()
}

/// Regularization applied on top of `w^T Q w`.
struct Regularizer<'a, T> {
    achieved: &'a [bool],
    lambda: T,
    entropy: T,
}

struct Objective<'a, T> {
    q: &'a [T],
    m: usize,
    reg: Option<Regularizer<'a, T>>,
}

impl<T: Float> Objective<'_, T> {
    fn value(&self, w: &[T]) -> T {
        let qw = self.q_times(w);
        let mut total = dot(w, &qw);
        if let Some(reg) = &self.reg {
            if reg.lambda != T::zero() {
                total = total + reg.lambda * omega_generic(w, reg.achieved);
            }
            if reg.entropy != T::zero() {
                let h = w
                    .iter()
                    .zip(reg.achieved)
                    .filter(|(&x, &a)| !a && x > T::zero())
                    .fold(T::zero(), |acc, (&x, _)| acc - x * x.ln());
                total = total + reg.entropy * h;
            }
        }
        total
    }

    /// Gradient of the objective with respect to `w`.
    fn grad_w(&self, w: &[T]) -> Vec<T> {
        let two = T::one() + T::one();
        let mut g: Vec<T> = self.q_times(w).into_iter().map(|v| two * v).collect();
        if let Some(reg) = &self.reg {
            if reg.lambda != T::zero() {
                let free = reg.achieved.iter().filter(|&&a| !a).count();
                let sum_free = w
                    .iter()
                    .zip(reg.achieved)
                    .filter(|(_, &a)| !a)
                    .fold(T::zero(), |acc, (&x, _)| acc + x);
                let pull = -two * (T::one() - sum_free) / T::from(free).unwrap();
                for ((gi, &x), &a) in g.iter_mut().zip(w).zip(reg.achieved) {
                    let d = if a { two * x } else { pull };
                    *gi = *gi + reg.lambda * d;
                }
            }
            if reg.entropy != T::zero() {
                for ((gi, &x), &a) in g.iter_mut().zip(w).zip(reg.achieved) {
                    if !a && x > T::zero() {
                        *gi = *gi - reg.entropy * (x.ln() + T::one());
                    }
                }
            }
        }
        g
    }

    fn q_times(&self, w: &[T]) -> Vec<T> {
        self.q.chunks(self.m).map(|row| dot(row, w)).collect()
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn omega_generic<T: Float>(w: &[T], achieved: &[bool]) -> T {
    let mut achieved_sq = T::zero();
    let mut free_sum = T::zero();
    let mut free = 0usize;
    for (&x, &a) in w.iter().zip(achieved) {
        if a {
            achieved_sq = achieved_sq + x * x;
        } else {
            free_sum = free_sum + x;
            free += 1;
        }
    }
    let gap = T::one() - free_sum;
    achieved_sq + gap * gap / T::from(free).unwrap()
}

/// One plain gradient step on the logits.
fn logit_step<T: Float>(obj: &Objective<'_, T>, alpha: &mut [T], lr: T) {
    let w = softmax(alpha);
    let g = obj.grad_w(&w);
    let mean = dot(&w, &g);
    for ((a, &wi), &gi) in alpha.iter_mut().zip(&w).zip(&g) {
        *a = *a - lr * (wi * (gi - mean));
    }
}

fn descend<T: Float>(obj: &Objective<'_, T>, alpha: &mut [T], steps: usize, lr: T) {
    for _ in 0..steps {
        logit_step(obj, alpha, lr);
    }
}

fn check_state(q: &GramMatrix, state: &SolverState) -> Result<()> {
    if state.alpha.len() != q.m() {
        return Err(Error::DimensionMismatch {
            what: "solver state",
            expected: q.m(),
            actual: state.alpha.len(),
        });
    }
    Ok(())
}

fn finish(state: &SolverState) -> WeightVector {
    state.weights()
}

/// Min-norm weights by `inner_steps` gradient steps on the logits.
pub fn solve_moo(q: &GramMatrix, state: &mut SolverState, cfg: &SolverConfig) -> Result<WeightVector> {
    check_state(q, state)?;
    if !cfg.warm_start {
        state.reset();
    }
    let entries = q.cast::<f64>();
    let obj = Objective {
        q: &entries,
        m: q.m(),
        reg: None,
    };
    descend(&obj, &mut state.alpha, cfg.inner_steps, cfg.lr_w);
    Ok(finish(state))
}

/// Task-oriented weights: descent on `w^T Q w + lambda * Omega(w)`, plus
/// the optional entropy term over unachieved weights. When every task is
/// achieved both regularizers vanish and this is [`solve_moo`].
pub fn solve_tamoo(
    q: &GramMatrix,
    status: &TaskStatus,
    state: &mut SolverState,
    cfg: &SolverConfig,
) -> Result<WeightVector> {
    check_state(q, state)?;
    if status.m() != q.m() {
        return Err(Error::DimensionMismatch {
            what: "task status",
            expected: q.m(),
            actual: status.m(),
        });
    }
    let inactive = status.all_achieved() || (cfg.lambda == 0.0 && cfg.entropy_coeff == 0.0);
    if inactive {
        return solve_moo(q, state, cfg);
    }
    if !cfg.warm_start {
        state.reset();
    }
    let entries = q.cast::<f64>();
    let obj = Objective {
        q: &entries,
        m: q.m(),
        reg: Some(Regularizer {
            achieved: status.mask(),
            lambda: cfg.lambda,
            entropy: cfg.entropy_coeff,
        }),
    };
    descend(&obj, &mut state.alpha, cfg.inner_steps, cfg.lr_w);
    Ok(finish(state))
}

/// Value of the inner objective the descent solvers minimize, at logits
/// `alpha`. `status = None` gives the plain min-norm objective.
pub fn inner_objective(q: &GramMatrix, status: Option<&TaskStatus>, cfg: &SolverConfig, alpha: &[f64]) -> f64 {
    let entries = q.cast::<f64>();
    let reg = status.filter(|s| !s.all_achieved()).map(|s| Regularizer {
        achieved: s.mask(),
        lambda: cfg.lambda,
        entropy: cfg.entropy_coeff,
    });
    let obj = Objective {
        q: &entries,
        m: q.m(),
        reg,
    };
    obj.value(&softmax(alpha))
}

/// Softmax-parameterized gradient descent on `w^T Q w` in precision `T`,
/// recording the weights seen at the start of every step (before the
/// update is applied).
pub fn softmax_descent_trace<T: Float>(q: &GramMatrix, init_alpha: &[T], steps: usize, lr: T) -> Vec<Vec<T>> {
    let entries = q.cast::<T>();
    let obj = Objective {
        q: &entries,
        m: q.m(),
        reg: None,
    };
    let mut alpha = init_alpha.to_vec();
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        trace.push(softmax(&alpha));
        logit_step(&obj, &mut alpha, lr);
    }
    trace
}

/// Exact minimizer of `sum_i w_i l_i + gamma/2 |w - 1/m|^2` over the
/// simplex. Completing the square turns it into the projection of
/// `1/m - l/gamma`.
pub fn solve_minmax(losses: &[f64], gamma: f64) -> Result<WeightVector> {
    if losses.is_empty() {
        return Err(Error::Empty("loss vector"));
    }
    if let Some(index) = losses.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma", "must be positive and finite"));
    }
    let m = losses.len() as f64;
    let target: Vec<f64> = losses.iter().map(|l| 1.0 / m - l / gamma).collect();
    project_simplex(&target)
}

pub fn solve_uniform(m: usize) -> Result<WeightVector> {
    if m == 0 {
        return Err(Error::invalid("m", "must be positive"));
    }
    Ok(WeightVector::uniform(m))
}

/// Output of [`solve_minnorm_exact`].
#[derive(Debug, Clone)]
pub struct MinNormSolution {
    pub weights: WeightVector,
    pub objective: f64,
    /// `max_i (w^T Q w - (Q w)_i)`; zero at the optimum.
    pub duality_gap: f64,
    /// Objective value after each iteration (first entry: the start point).
    pub history: Vec<f64>,
}

/// Frank-Wolfe for `min_{w in simplex} w^T Q w` with exact line search,
/// starting from uniform weights.
pub fn solve_minnorm_exact(q: &GramMatrix, iters: usize) -> MinNormSolution {
    let m = q.m();
    let mut w = WeightVector::uniform(m).into_inner();
    let mut history = vec![q.quad_form(&w)];
    for _ in 0..iters {
        let qw = q.mul_vec(&w);
        // Vertex minimizing the linearization; lowest index on ties.
        let k = (0..m).fold(0, |best, i| if qw[i] < qw[best] { i } else { best });
        let mut d: Vec<f64> = w.iter().map(|&x| -x).collect();
        d[k] += 1.0;
        let qd = q.mul_vec(&d);
        let curvature: f64 = d.iter().zip(&qd).map(|(a, b)| a * b).sum();
        let slope: f64 = w.iter().zip(&qd).map(|(a, b)| a * b).sum();
        if curvature <= 0.0 || slope >= 0.0 {
            history.push(*history.last().unwrap());
            continue;
        }
        let step = (-slope / curvature).min(1.0);
        for (x, di) in w.iter_mut().zip(&d) {
            *x = (*x + step * di).max(0.0);
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        history.push(q.quad_form(&w));
    }
    let objective = q.quad_form(&w);
    let qw = q.mul_vec(&w);
    let duality_gap = qw.iter().map(|&v| objective - v).fold(f64::NEG_INFINITY, f64::max);
    MinNormSolution {
        weights: WeightVector::from_feasible(w),
        objective,
        duality_gap,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_examples() {
        let g = vec![1.0, -2.0, 0.5];
        let q = gram(&[g.clone(), g.clone()]).unwrap();
        let n = 1.0 + 4.0 + 0.25;
        assert_eq!(q.entries(), &[n, n, n, n]);

        let q = gram(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(q, GramMatrix::identity(2));

        let q = gram(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(q.entries(), &[5.0, 1.0, 1.0, 10.0]);
    }

    #[test]
    fn gram_errors_name_the_task() {
        match gram(&[vec![1.0, 2.0], vec![1.0]]) {
            Err(Error::DimensionMismatch { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match gram(&[vec![1.0, 2.0], vec![1.0, f64::INFINITY]]) {
            Err(Error::NonFiniteTask { task, index }) => assert_eq!((task, index), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_orthonormal_tasks_balance() {
        let q = GramMatrix::identity(2);
        let cfg = SolverConfig {
            inner_steps: 500,
            lr_w: 0.5,
            ..Default::default()
        };
        let mut state = SolverState { alpha: vec![0.9, -0.4] };
        let w = solve_moo(&q, &mut state, &cfg).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn tamoo_with_zero_lambda_is_moo() {
        let q = GramMatrix::from_entries(3, vec![2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]).unwrap();
        let cfg = SolverConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let status = TaskStatus::new(vec![true, false, true]);
        let mut a = SolverState::uniform(3);
        let mut b = SolverState::uniform(3);
        for _ in 0..5 {
            let wa = solve_moo(&q, &mut a, &cfg).unwrap();
            let wb = solve_tamoo(&q, &status, &mut b, &cfg).unwrap();
            assert_eq!(wa, wb);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn tamoo_pushes_mass_to_unachieved_task() {
        let q = GramMatrix::identity(2);
        let cfg = SolverConfig {
            inner_steps: 5000,
            ..Default::default()
        };
        let status = TaskStatus::new(vec![true, false]);
        let mut state = SolverState::uniform(2);
        let w = solve_tamoo(&q, &status, &mut state, &cfg).unwrap();
        // Minimizer of w^2 + (1-w)^2 + 200 w^2 is w = 1/202.
        assert!(w[0] < 1e-2, "{w:?}");
    }

    #[test]
    fn cold_start_resets_logits() {
        let q = GramMatrix::identity(2);
        let cfg = SolverConfig {
            warm_start: false,
            ..Default::default()
        };
        let mut a = SolverState { alpha: vec![5.0, -5.0] };
        let mut b = SolverState::uniform(2);
        assert_eq!(
            solve_moo(&q, &mut a, &cfg).unwrap(),
            solve_moo(&q, &mut b, &cfg).unwrap()
        );
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(solve_minmax(&[1.0; 4], 3.0).unwrap().as_slice(), &[0.25; 4]);
        assert_eq!(solve_minmax(&[0.0, 10.0], 3.0).unwrap().as_slice(), &[1.0, 0.0]);
        let w = solve_minmax(&[0.0, 10.0], 1e9).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-8 && (w[1] - 0.5).abs() < 1e-8);
        assert!(solve_minmax(&[0.0, f64::NAN], 1.0).is_err());
        assert!(solve_minmax(&[0.0], 0.0).is_err());
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(solve_uniform(1).unwrap().as_slice(), &[1.0]);
        assert_eq!(solve_uniform(4).unwrap().as_slice(), &[0.25; 4]);
        let w = solve_uniform(3).unwrap();
        assert_eq!(w.as_slice().iter().sum::<f64>(), 1.0);
        assert!(w.as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(solve_uniform(0).is_err());
    }

    #[test]
    fn frank_wolfe_examples() {
        let sol = solve_minnorm_exact(&GramMatrix::identity(2), 50);
        assert!((sol.weights[0] - 0.5).abs() < 1e-12);

        let q = GramMatrix::from_entries(2, vec![1.0, 0.0, 0.0, 4.0]).unwrap();
        let sol = solve_minnorm_exact(&q, 200);
        assert!((sol.weights[0] - 0.8).abs() < 1e-6, "{:?}", sol.weights);
        assert!(sol.duality_gap.abs() < 1e-6);
        assert!(sol.history.windows(2).all(|p| p[1] <= p[0] + 1e-15));
    }

    #[test]
    fn frank_wolfe_beats_softmax_descent_on_rank_one() {
        let q = GramMatrix::rank_one(&[0.1, 0.1, 0.1, 0.1, 0.2]).unwrap();
        let sol = solve_minnorm_exact(&q, 100);
        assert!((sol.objective - 0.01).abs() < 1e-12);
        let trace = softmax_descent_trace(&q, &[0.2f64; 5], 20, 1.0);
        let last = trace.last().unwrap();
        assert!(q.quad_form(last) > sol.objective + 1e-4);
    }
}
