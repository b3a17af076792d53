//! Geometry of the probability simplex and of the extended simplex
//! `{0}^s x simplex(m - s)` that puts zero mass on goal-achieved tasks.
//!
//! The distance from a weight vector to the extended simplex is the
//! task-oriented regularizer. It is available both through an explicit
//! projection and through its closed form; the two must agree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a vector sums to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Vectors already inside the target set within this slack are returned
/// unchanged by the projections, which makes them exactly idempotent.
const MEMBERSHIP_SLACK: f64 = 1e-12;

/// A point on the probability simplex: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("weight vector"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(index) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(
                "weights",
                format!("entry {index} is negative ({})", values[index]),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid("weights", format!("entries sum to {total}")));
        }
        Ok(Self(values))
    }

    /// Wraps values the caller has already made feasible (softmax or
    /// projection output).
    pub(crate) fn from_feasible(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|&v| v >= 0.0));
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        Self(values)
    }

    pub fn uniform(m: usize) -> Self {
        assert!(m > 0, "uniform weights need at least one task");
        let mut values = vec![1.0 / m as f64; m];
        // Push the rounding residue onto the last entry so the sum is 1.
        let head: f64 = values[..m - 1].iter().sum();
        values[m - 1] = 1.0 - head;
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Which tasks have currently achieved their goal. Task order is the
/// caller's; nothing is ever permuted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStatus {
    achieved: Vec<bool>,
}

impl TaskStatus {
    pub fn new(achieved: Vec<bool>) -> Self {
        Self { achieved }
    }

    /// Status with no achieved task.
    pub fn none(m: usize) -> Self {
        Self::new(vec![false; m])
    }

    pub fn m(&self) -> usize {
        self.achieved.len()
    }

    /// Number of achieved tasks.
    pub fn s(&self) -> usize {
        self.achieved.iter().filter(|&&a| a).count()
    }

    pub fn is_achieved(&self, task: usize) -> bool {
        self.achieved[task]
    }

    pub fn all_achieved(&self) -> bool {
        self.achieved.iter().all(|&a| a)
    }

    pub fn mask(&self) -> &[bool] {
        &self.achieved
    }

    fn check(&self, m: usize) -> Result<()> {
        if self.m() != m {
            return Err(Error::DimensionMismatch {
                what: "task status",
                expected: m,
                actual: self.m(),
            });
        }
        if self.all_achieved() {
            return Err(Error::AllAchieved);
        }
        Ok(())
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Sort-and-threshold rule: returns the shift `gamma` such that
/// `max(v_i + gamma, 0)` sums to one over the given values.
fn threshold(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    // Stable descending sort; ties keep their original order.
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut gamma = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        prefix += u;
        let candidate = (1.0 - prefix) / (j + 1) as f64;
        if u + candidate > 0.0 {
            gamma = candidate;
        }
    }
    gamma
}

fn in_simplex(values: &[f64]) -> bool {
    values.iter().all(|&v| v >= 0.0) && (values.iter().sum::<f64>() - 1.0).abs() <= MEMBERSHIP_SLACK
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Result<WeightVector> {
    if v.is_empty() {
        return Err(Error::Empty("projection input"));
    }
    check_finite(v)?;
    if in_simplex(v) {
        return Ok(WeightVector(v.to_vec()));
    }
    let gamma = threshold(v);
    let out = v.iter().map(|&x| (x + gamma).max(0.0)).collect();
    Ok(WeightVector(out))
}

/// Euclidean projection onto the extended simplex: achieved coordinates are
/// zeroed, unachieved ones are projected onto their own simplex.
pub fn project_extended_simplex(w: &WeightVector, status: &TaskStatus) -> Result<Vec<f64>> {
    status.check(w.len())?;
    let mask = status.mask();
    let unachieved: Vec<f64> = w
        .as_slice()
        .iter()
        .zip(mask)
        .filter(|(_, &a)| !a)
        .map(|(&x, _)| x)
        .collect();

    let already_inside = w.as_slice().iter().zip(mask).all(|(&x, &a)| !a || x == 0.0) && in_simplex(&unachieved);
    if already_inside {
        return Ok(w.as_slice().to_vec());
    }

    let gamma = threshold(&unachieved);
    Ok(w.as_slice()
        .iter()
        .zip(mask)
        .map(|(&x, &a)| if a { 0.0 } else { (x + gamma).max(0.0) })
        .collect())
}

/// Squared distance to the extended simplex, computed from the projection.
pub fn omega_via_projection(w: &WeightVector, status: &TaskStatus) -> Result<f64> {
    let p = project_extended_simplex(w, status)?;
    Ok(w.as_slice().iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Closed-form squared distance to the extended simplex:
/// `sum_achieved w_i^2 + (1 - sum_unachieved w_i)^2 / (m - s)`.
pub fn omega_closed_form(w: &WeightVector, status: &TaskStatus) -> Result<f64> {
    status.check(w.len())?;
    Ok(omega_raw(w.as_slice(), status.mask()))
}

/// Closed form on raw values; the caller guarantees `s < m`.
pub(crate) fn omega_raw(w: &[f64], achieved: &[bool]) -> f64 {
    let mut achieved_sq = 0.0;
    let mut unachieved_sum = 0.0;
    let mut free = 0usize;
    for (&x, &a) in w.iter().zip(achieved) {
        if a {
            achieved_sq += x * x;
        } else {
            unachieved_sum += x;
            free += 1;
        }
    }
    let gap = 1.0 - unachieved_sum;
    achieved_sq + gap * gap / free as f64
}

/// Shannon entropy restricted to the unachieved coordinates, `0 log 0 = 0`.
/// Zero when every task is achieved.
pub fn entropy_unachieved(w: &WeightVector, status: &TaskStatus) -> Result<f64> {
    if status.m() != w.len() {
        return Err(Error::DimensionMismatch {
            what: "task status",
            expected: w.len(),
            actual: status.m(),
        });
    }
    Ok(w.as_slice()
        .iter()
        .zip(status.mask())
        .filter(|(&x, &a)| !a && x > 0.0)
        .map(|(&x, _)| -x * x.ln())
        .sum())
}
