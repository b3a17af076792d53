//! Acceptance suite. Every criterion prints exactly one `[PASS]` or
//! `[FAIL]` line before asserting, so `cargo test --test acceptance --
//! --nocapture` doubles as a report.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use tamoo::data::glyph_shape;
use tamoo::engine::{run_attack, AdvTrainMethod, AttackConfig, InitKind, Strategy};
use tamoo::harness::{presets, run_experiment, solve_demo, train_victims, LISTING_STEP19};
use tamoo::models::{loss_and_grad, ArchSpec, Classifier, LossKind, LossTarget};
use tamoo::simplex::{omega_closed_form, omega_via_projection, project_extended_simplex, project_simplex};
use tamoo::solvers::{gram, solve_minmax, solve_moo, solve_tamoo, SolverConfig, SolverState};
use tamoo::tasks::{ensemble_bundle, eot_bundle, universal_bundle, DeltaBounds, DomainBox, EotOptions, TaskBundle};
use tamoo::transforms::{TransformKind, TransformSpec};
use tamoo::{Result, TaskStatus, WeightVector};

use std::io::Write as _;

fn verdict(id: u32, name: &str, ok: bool, detail: impl std::fmt::Display) {
    let tag = if ok { "PASS" } else { "FAIL" };
    // Written to the raw handle so the line survives libtest output capture.
    let line = format!("[{tag}] criterion {id:>2} {name}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw from the simplex via normalized exponentials.
fn random_simplex(r: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..m).map(|_| Exp1.sample(r)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Simplex projection by bisection on the threshold `tau` solving
/// `sum max(v_i - tau, 0) = 1`.
fn bisection_projection(v: &[f64]) -> Vec<f64> {
    let mass = |tau: f64| v.iter().map(|x| (x - tau).max(0.0)).sum::<f64>();
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn random_status(r: &mut ChaCha8Rng, m: usize, s: usize) -> TaskStatus {
    let mut mask = vec![false; m];
    let mut idx: Vec<usize> = (0..m).collect();
    for k in 0..s {
        let j = r.random_range(k..m);
        idx.swap(k, j);
        mask[idx[k]] = true;
    }
    TaskStatus::new(mask)
}

#[test]
fn criterion_01_listing_reproduction() {
    let start = Instant::now();
    let demo = solve_demo();
    let elapsed = start.elapsed();
    let worst = demo.runs.iter().map(|r| r.max_deviation).fold(0.0f32, f32::max);
    let input2_ok = demo.runs[1].step19()[0] >= 0.999998;
    let matches = demo
        .runs
        .iter()
        .zip(LISTING_STEP19)
        .all(|(run, want)| run.step19().iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-4));
    let ok = matches && input2_ok && demo.passed() && elapsed < Duration::from_secs(1);
    verdict(
        1,
        "listing reproduction",
        ok,
        format!("max deviation {worst:.2e} (tol 1e-4), {elapsed:?} (< 1s)"),
    );
    assert!(ok);
}

#[test]
fn criterion_02_closed_form_omega() {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..10_000 {
        let m = r.random_range(1..=16);
        let s = r.random_range(0..m);
        let w = WeightVector::new(random_simplex(&mut r, m)).unwrap();
        let status = random_status(&mut r, m, s);
        let closed = omega_closed_form(&w, &status).unwrap();
        let via = omega_via_projection(&w, &status).unwrap();
        worst = worst.max((closed - via).abs());

        // Independent projection: zero the achieved coordinates, bisect on
        // the rest.
        let free: Vec<f64> = (0..m).filter(|&i| !status.is_achieved(i)).map(|i| w[i]).collect();
        let projected = bisection_projection(&free);
        let mut full = vec![0.0; m];
        for (slot, v) in (0..m).filter(|&i| !status.is_achieved(i)).zip(projected) {
            full[slot] = v;
        }
        worst_oracle = worst_oracle.max((closed - sq_dist(w.as_slice(), &full)).abs());
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-10 && worst_oracle <= 1e-10 && elapsed < Duration::from_secs(5);
    verdict(
        2,
        "closed-form distance identity",
        ok,
        format!(
            "max |closed - projected| {worst:.2e}, vs bisection oracle {worst_oracle:.2e} (tol 1e-10), {elapsed:?}"
        ),
    );
    assert!(ok);
}

/// Grid points of `{0 on achieved} x simplex(free)` at resolution `1/n`.
fn grid_points(free: usize, n: usize, visit: &mut impl FnMut(&[usize])) {
    fn rec(prefix: &mut Vec<usize>, left: usize, slots: usize, visit: &mut impl FnMut(&[usize])) {
        if slots == 1 {
            prefix.push(left);
            visit(prefix);
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(prefix, left - k, slots - 1, visit);
            prefix.pop();
        }
    }
    rec(&mut Vec::new(), n, free, visit);
}

#[test]
fn criterion_03_projection_optimality() {
    let start = Instant::now();
    let mut r = rng(3);
    let n = 1000;
    let mut grid_violations = 0usize;
    let mut grid_cases = 0usize;
    for m in 1..=3usize {
        for s in 0..m {
            for _ in 0..4 {
                let w = WeightVector::new(random_simplex(&mut r, m)).unwrap();
                let status = random_status(&mut r, m, s);
                let p = project_extended_simplex(&w, &status).unwrap();
                let best = sq_dist(w.as_slice(), &p);
                let free: Vec<usize> = (0..m).filter(|&i| !status.is_achieved(i)).collect();
                grid_points(free.len(), n, &mut |ks| {
                    let mut point = vec![0.0; m];
                    for (&slot, &k) in free.iter().zip(ks) {
                        point[slot] = k as f64 / n as f64;
                    }
                    if sq_dist(w.as_slice(), &point) < best - 1e-12 {
                        grid_violations += 1;
                    }
                });
                grid_cases += 1;
            }
        }
    }

    // KKT for projections of arbitrary vectors: every positive coordinate
    // shares the same shift, zeros sit at or below it.
    let mut kkt_failures = 0usize;
    for _ in 0..1000 {
        let m = r.random_range(1..=8);
        let s = r.random_range(0..m);
        let v: Vec<f64> = (0..m).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
        let status = random_status(&mut r, m, s);
        let free: Vec<usize> = (0..m).filter(|&i| !status.is_achieved(i)).collect();
        let sub: Vec<f64> = free.iter().map(|&i| v[i]).collect();
        let p = project_simplex(&sub).unwrap();
        let p = p.as_slice();
        let shifts: Vec<f64> = sub
            .iter()
            .zip(p)
            .filter(|(_, &pi)| pi > 0.0)
            .map(|(vi, pi)| vi - pi)
            .collect();
        let tau = shifts[0];
        let feasible = p.iter().all(|&x| x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        let active_equal = shifts.iter().all(|t| (t - tau).abs() <= 1e-9);
        let inactive_below = sub
            .iter()
            .zip(p)
            .filter(|(_, &pi)| pi == 0.0)
            .all(|(vi, _)| *vi <= tau + 1e-9);
        // Extended projection of a simplex point agrees with the same rule.
        let w = WeightVector::new(random_simplex(&mut r, m)).unwrap();
        let ext = project_extended_simplex(&w, &status).unwrap();
        let ext_zero = (0..m).filter(|&i| status.is_achieved(i)).all(|i| ext[i] == 0.0);
        let ext_free: Vec<f64> = free.iter().map(|&i| w[i]).collect();
        let ext_ok = free
            .iter()
            .zip(bisection_projection(&ext_free))
            .all(|(&i, b)| (ext[i] - b).abs() <= 1e-9);
        if !(feasible && active_equal && inactive_below && ext_zero && ext_ok) {
            kkt_failures += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = grid_violations == 0 && kkt_failures == 0 && elapsed < Duration::from_secs(30);
    verdict(
        3,
        "projection optimality",
        ok,
        format!(
            "{grid_violations} grid points beat the projection over {grid_cases} cases (res 1e-3); {kkt_failures}/1000 KKT failures; {elapsed:?}"
        ),
    );
    assert!(ok);
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = sq_dist(a, b).sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn random_model(r: &mut ChaCha8Rng, dim: usize, classes: usize) -> Classifier {
    let depth = r.random_range(0..3);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(2..12)).collect();
    Classifier::init(&ArchSpec::mlp(dim, &hidden, classes), r.random()).unwrap()
}

fn bundle_grad_error(b: &dyn TaskBundle, delta: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for task in 0..b.task_count() {
        let g = b.grad(task, delta)?;
        let fd = central_difference(|d| b.loss(task, d).unwrap(), delta, 1e-6);
        worst = worst.max(rel_err(&g, &fd));
    }
    Ok(worst)
}

#[test]
fn criterion_04_gradient_correctness() {
    let start = Instant::now();
    let mut r = rng(4);
    let kinds = [LossKind::Ce, LossKind::Kl, LossKind::cw()];
    let mut model_worst = 0.0f64;
    for case in 0..100 {
        let dim = r.random_range(2..10);
        let classes = r.random_range(2..6);
        let model = random_model(&mut r, dim, classes);
        let x: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let label = r.random_range(0..classes);
        let kind = kinds[case % 3];
        let target = match kind {
            LossKind::Kl => LossTarget::with_reference(label, random_simplex(&mut r, classes)),
            _ => LossTarget::label(label),
        };
        let (_, g) = loss_and_grad(&model, &x, &target, kind).unwrap();
        let fd = central_difference(|z| loss_and_grad(&model, z, &target, kind).unwrap().0, &x, 1e-6);
        model_worst = model_worst.max(rel_err(&g, &fd));
    }

    let mut bundle_worst = 0.0f64;
    for case in 0..12 {
        let kind = kinds[case % 3];
        let dim = 6;
        let members: Vec<Classifier> = (0..3).map(|_| random_model(&mut r, dim, 4)).collect();
        let x: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let delta: Vec<f64> = (0..dim).map(|_| 0.1 * r.sample::<f64, _>(StandardNormal)).collect();
        let ens = ensemble_bundle(&members, &x, 1, kind, DomainBox::UNBOUNDED).unwrap();
        bundle_worst = bundle_worst.max(bundle_grad_error(&ens, &delta).unwrap());

        let inputs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..dim).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        let uni = universal_bundle(&members[0], &inputs, &[0, 1, 2, 3], kind, DomainBox::UNBOUNDED).unwrap();
        bundle_worst = bundle_worst.max(bundle_grad_error(&uni, &delta).unwrap());

        let side = glyph_shape();
        let model = random_model(&mut r, side.len(), 4);
        let image: Vec<f64> = (0..side.len()).map(|_| r.random_range(0.2..0.8)).collect();
        let small: Vec<f64> = (0..side.len()).map(|_| r.random_range(-0.01..0.01)).collect();
        let transforms: Vec<TransformSpec> = TransformKind::ALL
            .iter()
            .map(|&k| TransformSpec::deterministic(k))
            .collect();
        let eot = eot_bundle(&model, &image, 0, side, &transforms, kind, EotOptions::default()).unwrap();
        bundle_worst = bundle_worst.max(bundle_grad_error(&eot, &small).unwrap());
    }
    let elapsed = start.elapsed();
    let ok = model_worst <= 1e-5 && bundle_worst <= 1e-4 && elapsed < Duration::from_secs(60);
    verdict(
        4,
        "gradient correctness",
        ok,
        format!(
            "models max rel err {model_worst:.2e} (tol 1e-5, 100 cases); bundles {bundle_worst:.2e} (tol 1e-4); {elapsed:?}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_two_task_min_norm() {
    let mut r = rng(5);
    let cfg = SolverConfig {
        inner_steps: 500,
        lr_w: 0.5,
        ..SolverConfig::default()
    };
    let mut worst = 0.0f64;
    let mut worst_interior = 0.0f64;
    let mut within = 0;
    let mut near_vertex = 0;
    for _ in 0..100 {
        let d = r.random_range(2..16);
        let scale = 1.0 / (d as f64).sqrt();
        let g1: Vec<f64> = (0..d).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
        let g2: Vec<f64> = (0..d).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
        let diff: Vec<f64> = g2.iter().zip(&g1).map(|(a, b)| a - b).collect();
        let num: f64 = diff.iter().zip(&g2).map(|(a, b)| a * b).sum();
        let den: f64 = diff.iter().map(|a| a * a).sum();
        let raw = num / den;
        let analytic = raw.clamp(0.0, 1.0);
        let q = gram(&[g1, g2]).unwrap();
        let mut state = SolverState::uniform(2);
        let w = solve_moo(&q, &mut state, &cfg).unwrap();
        let err = (w[0] - analytic).abs();
        worst = worst.max(err);
        if err <= 1e-3 {
            within += 1;
        }
        if (0.05..=0.95).contains(&raw) {
            worst_interior = worst_interior.max(err);
        } else {
            near_vertex += 1;
        }
    }
    let ok = worst <= 1e-3;
    verdict(
        5,
        "two-task min-norm",
        ok,
        format!(
            "{within}/100 pairs within 1e-3; max error {worst:.2e} overall, {worst_interior:.2e} on optima inside [0.05, 0.95]; \
             {near_vertex} pairs have an optimum within 0.05 of a vertex"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_06_minmax_inner_equivalence() {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &gamma in &[0.1, 3.0, 100.0] {
        for _ in 0..50 {
            let m = r.random_range(2..9);
            let losses: Vec<f64> = (0..m).map(|_| r.random_range(0.0..5.0)).collect();
            let closed = solve_minmax(&losses, gamma).unwrap();
            // Projected gradient descent on sum w l + gamma/2 |w - 1/m|^2.
            let step = 0.5 / gamma;
            let mut w = vec![1.0 / m as f64; m];
            for _ in 0..1000 {
                let moved: Vec<f64> = w
                    .iter()
                    .zip(&losses)
                    .map(|(wi, li)| wi - step * (li + gamma * (wi - 1.0 / m as f64)))
                    .collect();
                w = bisection_projection(&moved);
            }
            worst = worst.max(sq_dist(closed.as_slice(), &w).sqrt());
            cases += 1;
        }
    }
    let ok = worst <= 1e-6;
    verdict(
        6,
        "min-max inner equivalence",
        ok,
        format!("max |closed - PGD| {worst:.2e} over {cases} cases (tol 1e-6)"),
    );
    assert!(ok);
}

fn blob_models(seed: u64, count: usize, dim: usize) -> Vec<Classifier> {
    (0..count)
        .map(|k| Classifier::init(&ArchSpec::mlp(dim, &[8], 3), seed + k as u64).unwrap())
        .collect()
}

#[test]
fn criterion_07_degeneracies() {
    let mut r = rng(7);
    let dim = 8;

    // lambda = 0: the task-oriented attack is the plain min-norm attack.
    let members = blob_models(70, 3, dim);
    let mut lambda_zero_ok = true;
    for i in 0..10 {
        let x: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let base = AttackConfig {
            epsilon: 0.5,
            lr_delta: 0.05,
            steps: 30,
            seed: i,
            ..AttackConfig::default()
        };
        let ta = AttackConfig {
            strategy: Strategy::TaMoo,
            solver: SolverConfig {
                lambda: 0.0,
                ..SolverConfig::default()
            },
            ..base.clone()
        };
        let moo = AttackConfig {
            strategy: Strategy::Moo,
            ..base
        };
        let mut b1 = ensemble_bundle(&members, &x, 0, LossKind::Ce, DomainBox::UNBOUNDED).unwrap();
        let mut b2 = ensemble_bundle(&members, &x, 0, LossKind::Ce, DomainBox::UNBOUNDED).unwrap();
        let o1 = run_attack(&mut b1, &ta).unwrap();
        let o2 = run_attack(&mut b2, &moo).unwrap();
        lambda_zero_ok &= o1.delta == o2.delta && o1.report.final_weights == o2.report.final_weights;
    }

    // s = 0: the regularizer vanishes on the simplex.
    let mut s_zero_worst = 0.0f64;
    for _ in 0..100 {
        let m = r.random_range(2..9);
        let grads: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..5).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        let q = gram(&grads).unwrap();
        let cfg = SolverConfig::default();
        let mut a = SolverState::uniform(m);
        let mut b = SolverState::uniform(m);
        for _ in 0..5 {
            let wa = solve_moo(&q, &mut a, &cfg).unwrap();
            let wb = solve_tamoo(&q, &TaskStatus::none(m), &mut b, &cfg).unwrap();
            for i in 0..m {
                s_zero_worst = s_zero_worst.max((wa[i] - wb[i]).abs());
            }
        }
    }

    // m = 1: every strategy is the single-objective sign attack.
    let single = blob_models(71, 1, dim);
    let mut m_one_ok = true;
    for i in 0..10 {
        let x: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let label = i % 3;
        let (eps, lr, steps) = (0.4, 0.03, 25);
        let mut reference = vec![0.0; dim];
        for _ in 0..steps {
            let probe: Vec<f64> = x.iter().zip(&reference).map(|(a, b)| a + b).collect();
            let (_, g) = loss_and_grad(&single[0], &probe, &LossTarget::label(label), LossKind::Ce).unwrap();
            for (d, gi) in reference.iter_mut().zip(&g) {
                let s = if *gi > 0.0 {
                    1.0
                } else if *gi < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *d = (*d + lr * s).clamp(-eps, eps);
            }
        }
        for strategy in Strategy::ALL {
            let cfg = AttackConfig {
                epsilon: eps,
                lr_delta: lr,
                steps,
                strategy,
                init: InitKind::Zero,
                ..AttackConfig::default()
            };
            let mut b = ensemble_bundle(&single, &x, label, LossKind::Ce, DomainBox::UNBOUNDED).unwrap();
            let out = run_attack(&mut b, &cfg).unwrap();
            m_one_ok &= out.delta == reference;
        }
    }

    // epsilon = 0 pins the perturbation at zero.
    let mut eps_zero_ok = true;
    for strategy in Strategy::ALL {
        for init in [InitKind::Zero, InitKind::UniformRandom] {
            let x: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            let cfg = AttackConfig {
                epsilon: 0.0,
                steps: 10,
                strategy,
                init,
                ..AttackConfig::default()
            };
            let mut b = ensemble_bundle(&members, &x, 1, LossKind::Ce, DomainBox::UNBOUNDED).unwrap();
            let out = run_attack(&mut b, &cfg).unwrap();
            eps_zero_ok &= out.delta.iter().all(|&d| d == 0.0);
        }
    }

    let ok = lambda_zero_ok && s_zero_worst <= 1e-9 && m_one_ok && eps_zero_ok;
    verdict(
        7,
        "degeneracies",
        ok,
        format!(
            "lambda=0 bitwise {lambda_zero_ok}; s=0 max diff {s_zero_worst:.1e} (tol 1e-9); m=1 bitwise {m_one_ok}; eps=0 {eps_zero_ok}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_phenomenon_ordering() {
    let start = Instant::now();
    let diverse = presets::ens(true);
    let victims = train_victims(&diverse).unwrap();
    let out = run_experiment(&diverse, &victims, None).unwrap();
    let row = |name: &str| out.table.row(name, "ens").unwrap().clone();
    let (uni, moo, ta) = (row("Uniform"), row("MOO"), row("TA-MOO"));
    let dominated = diverse.victims.iter().position(|v| v.logit_scale == 1000.0).unwrap();
    let moo_weight = moo.weights[dominated];

    let homogeneous = presets::ens(false).with_strategies(&[Strategy::Uniform, Strategy::Moo]);
    let victims_h = train_victims(&homogeneous).unwrap();
    let out_h = run_experiment(&homogeneous, &victims_h, None).unwrap();
    let uni_h = out_h.table.row("Uniform", "ens").unwrap().a_all;
    let moo_h = out_h.table.row("MOO", "ens").unwrap().a_all;
    let elapsed = start.elapsed();

    let margin = 2.0;
    let a = moo_weight > 0.4;
    let b = ta.a_all >= moo.a_all + margin && ta.a_all >= uni.a_all + margin;
    let c = moo_h >= uni_h + margin;
    let ok = a && b && c && ta.samples >= 200 && elapsed < Duration::from_secs(300);
    verdict(
        8,
        "phenomenon ordering",
        ok,
        format!(
            "MOO weight on dominated {moo_weight:.3} (> 0.4); A-All TA-MOO {:.1} vs MOO {:.1} vs Uniform {:.1}; homogeneous MOO {moo_h:.1} vs Uniform {uni_h:.1} (margin 2pp); n={}; {elapsed:?}",
            ta.a_all, moo.a_all, uni.a_all, ta.samples
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_uni_hardness_trend() {
    let ks = [1, 4, 8, 16];
    let victims = train_victims(&presets::uni(1)).unwrap();
    let avgs: Vec<f64> = ks
        .iter()
        .map(|&k| {
            let spec = presets::uni(k);
            run_experiment(&spec, &victims, None).unwrap().table.rows[0].a_avg
        })
        .collect();
    let ok = avgs.windows(2).all(|p| p[1] <= p[0]);
    let shown: Vec<String> = ks.iter().zip(&avgs).map(|(k, a)| format!("K={k}: {a:.2}")).collect();
    verdict(
        9,
        "universal hardness trend",
        ok,
        format!("Uniform A-Avg {}", shown.join(", ")),
    );
    assert!(ok);
}

#[test]
fn criterion_10_adversarial_training_ordering() {
    let start = Instant::now();
    let spec = presets::adv_train();
    let out = run_experiment(&spec, &[], None).unwrap();
    let robust = |m: AdvTrainMethod| out.table.row(&m.name(), "adv-train").unwrap().robust_accuracy.unwrap();
    let pgd = robust(AdvTrainMethod::Pgd);
    let ta = robust(AdvTrainMethod::Multi(Strategy::TaMoo));
    let elapsed = start.elapsed();
    let ok = ta >= pgd + 1.0 && elapsed < Duration::from_secs(600);
    verdict(
        10,
        "adversarial training ordering",
        ok,
        format!("robust accuracy TA-MOO-AT {ta:.1} vs PGD-AT {pgd:.1} (margin 1pp); {elapsed:?}"),
    );
    assert!(ok);
}

/// Forwards to an inner bundle and checks every perturbation it is asked
/// about against the budget and the domain box.
struct Watch<B> {
    inner: B,
    epsilon: f64,
    bounds: DeltaBounds,
    violations: std::sync::atomic::AtomicUsize,
    queries: std::sync::atomic::AtomicUsize,
}

impl<B: TaskBundle> Watch<B> {
    fn new(inner: B, epsilon: f64) -> Self {
        let bounds = inner.delta_bounds();
        Self {
            inner,
            epsilon,
            bounds,
            violations: Default::default(),
            queries: Default::default(),
        }
    }

    fn inspect(&self, delta: &[f64]) {
        use std::sync::atomic::Ordering::Relaxed;
        self.queries.fetch_add(1, Relaxed);
        let in_ball = delta.iter().all(|d| d.abs() <= self.epsilon);
        if !in_ball || !self.bounds.contains(delta, 0.0) {
            self.violations.fetch_add(1, Relaxed);
        }
    }
}

impl<B: TaskBundle> TaskBundle for Watch<B> {
    fn task_count(&self) -> usize {
        self.inner.task_count()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn loss_and_grad(&self, task: usize, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.inspect(delta);
        self.inner.loss_and_grad(task, delta)
    }
    fn is_achieved(&self, task: usize, delta: &[f64]) -> Result<bool> {
        self.inspect(delta);
        self.inner.is_achieved(task, delta)
    }
    fn delta_bounds(&self) -> DeltaBounds {
        self.inner.delta_bounds()
    }
    fn resample(&mut self) {
        self.inner.resample()
    }
}

#[test]
fn criterion_11_feasibility_and_determinism() {
    use std::sync::atomic::Ordering::Relaxed;
    let mut r = rng(11);
    let mut violations = 0usize;
    let mut queries = 0usize;
    let mut trace_ok = true;

    let members = blob_models(110, 3, 8);
    let side = glyph_shape();
    let glyph_model = Classifier::init(&ArchSpec::mlp(side.len(), &[16], 4), 111).unwrap();
    let transforms: Vec<TransformSpec> = TransformKind::ALL
        .iter()
        .map(|&k| TransformSpec::stochastic(k))
        .collect();
    for strategy in Strategy::ALL {
        for i in 0..5u64 {
            let cfg = AttackConfig {
                epsilon: 0.3,
                lr_delta: 0.1,
                steps: 20,
                strategy,
                seed: i,
                trace: true,
                ..AttackConfig::default()
            };
            let x: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            let ens = ensemble_bundle(&members, &x, 0, LossKind::Ce, DomainBox { lo: -1.0, hi: 1.0 }).unwrap();
            let mut w = Watch::new(ens, cfg.epsilon);
            let out = run_attack(&mut w, &cfg).unwrap();
            violations += w.violations.load(Relaxed);
            queries += w.queries.load(Relaxed);
            trace_ok &= out.report.trace.unwrap().iter().all(|t| t.delta_linf <= cfg.epsilon);

            let image: Vec<f64> = (0..side.len()).map(|_| r.random_range(0.0..1.0)).collect();
            let options = EotOptions {
                seed: i,
                ..EotOptions::default()
            };
            let eot = eot_bundle(&glyph_model, &image, 1, side, &transforms, LossKind::Ce, options).unwrap();
            let mut w = Watch::new(eot, cfg.epsilon);
            let out = run_attack(&mut w, &cfg).unwrap();
            violations += w.violations.load(Relaxed);
            queries += w.queries.load(Relaxed);
            trace_ok &= out.report.trace.unwrap().iter().all(|t| t.delta_linf <= cfg.epsilon);
        }
    }

    // Same spec twice, once on a single worker: identical tables.
    let mut spec = presets::ens(true);
    spec.eval_data = spec.eval_data.with_samples(60);
    let victims = train_victims(&spec).unwrap();
    let first = run_experiment(&spec, &victims, None).unwrap().table;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let second = pool.install(|| {
        let victims = train_victims(&spec).unwrap();
        run_experiment(&spec, &victims, None).unwrap().table
    });
    let identical = first.canonical_text() == second.canonical_text();

    let ok = violations == 0 && queries > 0 && trace_ok && identical;
    verdict(
        11,
        "feasibility and determinism",
        ok,
        format!("{violations} infeasible iterates in {queries} queries; traces within budget {trace_ok}; tables byte-identical {identical}"),
    );
    assert!(ok);
}
