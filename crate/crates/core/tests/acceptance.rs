//! Acceptance criteria. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line under `cargo test`; exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cbp_opt::gen_fn::{self, eval_b};
use cbp_opt::general::{self, Truncation};
use cbp_opt::linsys::{check_lemma_structure, solve_unit, UnitSystem};
use cbp_opt::model::{ActionId, BranchingMechanism, CbpModel, RawAction, RawCbp};
use cbp_opt::sim::{self, SimCaps};
use cbp_opt::solver::{CbpSolver, SolveReport, DEFAULT_BRUTE_CAP};
use cbp_opt::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))?;
    Ok(took)
}

/// Smallest root of `B` on [0, 1]: first sign change on a fine grid, then
/// bisection.
fn bisect_min_root(m: &BranchingMechanism) -> f64 {
    if eval_b(m, 0.0) == 0.0 {
        return 0.0;
    }
    let grid = 50_000;
    for s in 1..=grid {
        let hi = s as f64 / grid as f64;
        if eval_b(m, hi) <= 0.0 {
            let (mut a, mut b) = ((s - 1) as f64 / grid as f64, hi);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if eval_b(m, mid) > 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            return 0.5 * (a + b);
        }
    }
    1.0
}

fn build(
    m: usize,
    actions: &[(String, Vec<(usize, f64)>)],
    adm: &[Vec<String>],
    tail: &[String],
) -> CbpModel {
    CbpModel::validate(&RawCbp {
        m,
        actions: actions
            .iter()
            .map(|(id, b)| RawAction {
                id: ActionId::new(id.clone()),
                b: b.iter().copied().collect(),
            })
            .collect(),
        admissible: adm
            .iter()
            .enumerate()
            .map(|(i, ids)| {
                (
                    i + 1,
                    ids.iter().map(|s| ActionId::new(s.clone())).collect(),
                )
            })
            .collect(),
        tail: tail.iter().map(|s| ActionId::new(s.clone())).collect(),
    })
    .expect("generated model is valid")
}

/// Random model with m <= 4, |A(i)| <= 3 and offspring support in {0, 2, 3}.
/// With probability `death_free` an action gets `b_0 = 0`.
fn random_model(rng: &mut ChaCha8Rng, death_free: f64) -> CbpModel {
    let m = rng.gen_range(1..=4);
    let pool = rng.gen_range(2..=5);
    let ids: Vec<String> = (0..pool).map(|k| format!("a{k}")).collect();
    let actions: Vec<(String, Vec<(usize, f64)>)> = ids
        .iter()
        .map(|id| {
            let b0 = if rng.gen_bool(death_free) {
                0.0
            } else {
                rng.gen_range(0.05..4.0)
            };
            let b2 = rng.gen_range(0.05..4.0);
            let b3 = if rng.gen_bool(0.5) {
                rng.gen_range(0.0..3.0)
            } else {
                0.0
            };
            (id.clone(), vec![(0, b0), (2, b2), (3, b3)])
        })
        .collect();
    let pick = |rng: &mut ChaCha8Rng| {
        let size = rng.gen_range(1..=3.min(pool));
        let mut chosen: Vec<String> = ids.choose_multiple(rng, size).cloned().collect();
        chosen.shuffle(rng);
        chosen
    };
    let adm: Vec<Vec<String>> = (0..m).map(|_| pick(rng)).collect();
    let tail = pick(rng);
    build(m, &actions, &adm, &tail)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = rng.gen_range(0.0..10.0);
        let b = rng.gen_range(0.01..10.0);
        let mech = BranchingMechanism::from_entries([(0, d), (2, b)]).map_err(|e| e.to_string())?;
        let r = gen_fn::rho(&mech, gen_fn::DEFAULT_TOL, gen_fn::DEFAULT_MAX_ITER)
            .map_err(|e| e.to_string())?;
        let err = (r.rho - (d / b).min(1.0)).abs();
        worst = worst.max(err);
        ensure(err <= 1e-10, || {
            format!("d={d} b={b}: rho={} error {err:e}", r.rho)
        })?;
    }
    let took = within_time(start, Duration::from_secs(1))?;
    Ok(format!("200 quadratics, max error {worst:.2e}, {took:?}"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 50 {
        let entries = vec![
            (0, rng.gen_range(0.05..3.0)),
            (2, rng.gen_range(0.0..3.0)),
            (3, rng.gen_range(0.0..3.0)),
            (4, rng.gen_range(0.0..3.0)),
        ];
        let Ok(mech) = BranchingMechanism::from_entries(entries.iter().copied()) else {
            continue;
        };
        if mech.drift() <= 1e-3 * mech.exit_rate() {
            continue;
        }
        let m = rng.gen_range(1..=4);
        let id = "a".to_string();
        let model = build(
            m,
            &[(id.clone(), entries)],
            &vec![vec![id.clone()]; m],
            &[id],
        );
        let solver = CbpSolver::new(&model, gen_fn::DEFAULT_TOL).map_err(|e| e.to_string())?;
        let profile = solver
            .evaluate_policy(&solver.default_policy())
            .map_err(|e| e.to_string())?;
        let root = bisect_min_root(&mech);
        for i in 1..=10 {
            let err = (profile.ep(i) - root.powi(i as i32)).abs();
            worst = worst.max(err);
            ensure(err <= 1e-8, || {
                format!(
                    "m={m} i={i}: ep={} rho^i={}",
                    profile.ep(i),
                    root.powi(i as i32)
                )
            })?;
        }
        done += 1;
    }
    Ok(format!("50 single-action models, max error {worst:.2e}"))
}

/// Shared by criteria 3 and 4.
struct OracleRun {
    model: CbpModel,
    report: SolveReport,
}

fn oracle_runs() -> Result<(Vec<OracleRun>, Duration, f64, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    let mut runs = Vec::new();
    let mut worst = 0.0f64;
    let mut worst_oe = 0.0f64;
    for n in 0..300 {
        let model = random_model(&mut rng, 0.15);
        let solver =
            CbpSolver::new(&model, gen_fn::DEFAULT_TOL).map_err(|e| format!("model {n}: {e}"))?;
        let report = solver.solve().map_err(|e| format!("model {n}: {e}"))?;
        let brute = solver
            .brute_force(DEFAULT_BRUTE_CAP)
            .map_err(|e| format!("model {n}: {e}"))?;
        for i in 1..=model.m() + 5 {
            let err = (report.optimal_profile.ep(i) - brute.profile.ep(i)).abs();
            worst = worst.max(err);
            ensure(err <= 1e-10, || {
                format!(
                    "model {n} state {i}: solve {} brute {}",
                    report.optimal_profile.ep(i),
                    brute.profile.ep(i)
                )
            })?;
        }
        worst_oe = worst_oe.max(report.oe_residual);
        ensure(report.oe_residual <= 1e-9, || {
            format!("model {n}: optimality residual {:e}", report.oe_residual)
        })?;
        runs.push(OracleRun { model, report });
    }
    let took = start.elapsed();
    Ok((runs, took, worst, worst_oe))
}

fn criterion_3(runs: &Result<(Vec<OracleRun>, Duration, f64, f64), String>) -> Outcome {
    let (runs, took, worst, worst_oe) = runs.as_ref().map_err(Clone::clone)?;
    ensure(*took < Duration::from_secs(30), || format!("took {took:?}"))?;
    let death_free = runs
        .iter()
        .filter(|r| r.report.m_star <= r.model.m())
        .count();
    Ok(format!(
        "{} models ({death_free} with m_* <= m), max |solve - brute| {worst:.2e}, max optimality residual {worst_oe:.2e}, {took:?}",
        runs.len()
    ))
}

fn criterion_4(runs: &Result<(Vec<OracleRun>, Duration, f64, f64), String>) -> Outcome {
    let (runs, _, _, _) = runs.as_ref().map_err(Clone::clone)?;
    let mut changes = 0;
    let mut max_iters = 0;
    for (n, run) in runs.iter().enumerate() {
        let its = &run.report.iterations;
        let bound = run.model.head_policy_count() as usize;
        ensure(its.len() <= bound, || {
            format!("model {n}: {} evaluations > {bound}", its.len())
        })?;
        max_iters = max_iters.max(its.len());
        ensure(
            its.last().map(|l| &l.policy) == Some(&run.report.optimal_policy),
            || format!("model {n}: trace does not end at the optimal policy"),
        )?;
        for w in its.windows(2) {
            let (prev, next) = (&w[0], &w[1]);
            changes += 1;
            ensure(prev.policy != next.policy, || {
                format!("model {n}: repeated policy")
            })?;
            let mut strict = false;
            for i in 1..=run.model.m() + 3 {
                let (a, b) = (prev.profile.ep(i), next.profile.ep(i));
                ensure(b <= a + 1e-12, || {
                    format!("model {n} state {i}: ep rose from {a} to {b}")
                })?;
                if i <= run.model.m() && b < a {
                    strict = true;
                }
            }
            ensure(strict, || {
                format!("model {n}: policy changed without strict decrease")
            })?;
        }
    }
    Ok(format!(
        "{changes} policy changes checked, at most {max_iters} evaluations per run"
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut worst_oe = 0.0f64;
    let mut attempts = 0;
    while checked < 100 {
        attempts += 1;
        ensure(attempts < 100_000, || {
            "could not generate death-free models".into()
        })?;
        let model = random_model(&mut rng, 0.4);
        let solver = CbpSolver::new(&model, gen_fn::DEFAULT_TOL).map_err(|e| e.to_string())?;
        let m_star = solver.m_star();
        if m_star > model.m() {
            continue;
        }
        let report = solver.solve().map_err(|e| e.to_string())?;
        for i in m_star..=model.m() + 50 {
            ensure(report.optimal_profile.ep(i) == 0.0, || {
                format!(
                    "ep_{i} = {} with m_* = {m_star}",
                    report.optimal_profile.ep(i)
                )
            })?;
        }
        ensure(report.oe_residual <= 1e-9, || {
            format!("optimality residual {:e}", report.oe_residual)
        })?;
        worst_oe = worst_oe.max(report.oe_residual);
        checked += 1;
    }
    Ok(format!(
        "{checked} models with a death-free head action, max optimality residual {worst_oe:.2e}"
    ))
}

/// Random matrix meeting the structural conditions: zero diagonal, nothing
/// below the subdiagonal, positive subdiagonal, first row sum < 1, other
/// row sums <= 1.
fn structured_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut u = vec![vec![0.0; n]; n];
    for (i, row) in u.iter_mut().enumerate() {
        let cols: Vec<usize> = (0..n).filter(|&j| j != i && j + 1 >= i).collect();
        if cols.is_empty() {
            continue;
        }
        let weights: Vec<f64> = cols.iter().map(|_| rng.gen_range(0.001..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mass = if i == 0 {
            rng.gen_range(0.0..0.999)
        } else if rng.gen_bool(0.5) {
            1.0
        } else {
            rng.gen_range(0.05..1.0)
        };
        for (&j, w) in cols.iter().zip(&weights) {
            row[j] = w / total * mass;
        }
    }
    u
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut tested = 0;
    while tested < 500 {
        let n = rng.gen_range(1..=8);
        let u = structured_matrix(&mut rng, n);
        if !check_lemma_structure(&u) {
            continue;
        }
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cmax = c.iter().fold(0.0f64, |a, b| a.max(*b));
        let sys = UnitSystem::new(u, c).map_err(|e| e.to_string())?;
        let x = solve_unit(&sys).map_err(|e| format!("n={n}: {e}"))?;
        let r = sys.residual(&x);
        worst = worst.max(r);
        ensure(r <= 1e-10 * (1.0 + cmax), || {
            format!("n={n}: residual {r:e}")
        })?;
        tested += 1;
    }

    // Zero subdiagonal at row k with rows k.. summing to one.
    let mut singular = 0;
    let mut solved = 0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=8);
        let mut u = structured_matrix(&mut rng, n);
        let k = rng.gen_range(1..n);
        u[k][k - 1] = 0.0;
        for row in u.iter_mut().skip(1) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        ensure(!check_lemma_structure(&u), || {
            "violating matrix passed the check".into()
        })?;
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cmax = c.iter().fold(0.0f64, |a, b| a.max(*b));
        let sys = UnitSystem::new(u, c).map_err(|e| e.to_string())?;
        match solve_unit(&sys) {
            Err(Error::SingularSystem { .. }) => singular += 1,
            Err(e) => return Err(e.to_string()),
            Ok(x) => {
                let r = sys.residual(&x);
                ensure(r <= 1e-10 * (1.0 + cmax), || {
                    format!("invertible violator with residual {r:e}")
                })?;
                solved += 1;
            }
        }
    }
    Ok(format!(
        "{tested} structured systems, max residual {worst:.2e}; violators: {singular} singular, {solved} solved"
    ))
}

fn two_action_model() -> CbpModel {
    build(
        1,
        &[
            ("a1".into(), vec![(0, 1.0), (2, 2.0)]),
            ("a2".into(), vec![(0, 3.0), (2, 1.0)]),
        ],
        &[vec!["a1".into(), "a2".into()]],
        &["a1".into()],
    )
}

fn criterion_7() -> Outcome {
    let model = two_action_model();
    let start = Instant::now();
    // From population 200 the extinction probability is 0.5^200, so the
    // population cap adds no visible bias.
    let caps = SimCaps {
        max_jumps: 1_000_000,
        max_pop: 200,
        track_time: false,
    };
    let mut lines = Vec::new();
    for (head, exact, seed) in [("a1", 0.5, 70u64), ("a2", 6.0 / 7.0, 71)] {
        let f = cbp_opt::Policy::new(vec![head.into()], "a1".into());
        let est =
            sim::estimate_ep(&model, &f, 1, 100_000, caps, seed).map_err(|e| e.to_string())?;
        let se = est.std_error();
        let z = (est.p_hat - exact) / se;
        ensure(z.abs() <= 4.0, || {
            format!("f(1)={head}: p_hat={} exact={exact} z={z:.2}", est.p_hat)
        })?;
        lines.push(format!("f(1)={head}: {:.5} (z={z:+.2})", est.p_hat));
    }
    let took = within_time(start, Duration::from_secs(10))?;
    Ok(format!("{}, {took:?}", lines.join("; ")))
}

fn criterion_8() -> Outcome {
    let id = "a".to_string();
    let model = build(
        1,
        &[(id.clone(), vec![(0, 1.0), (2, 2.0)])],
        &[vec![id.clone()]],
        &[id],
    );
    let exact = CbpSolver::new(&model, gen_fn::DEFAULT_TOL)
        .and_then(|s| s.solve())
        .map_err(|e| e.to_string())?;
    let mut previous: Option<Vec<f64>> = None;
    let mut worst = 0.0f64;
    for n in [50usize, 100, 200, 500] {
        let g = general::cbp_truncate(&model, Truncation::Full, n).map_err(|e| e.to_string())?;
        let sol = general::value_iterate(&g, general::DEFAULT_TOL, general::DEFAULT_MAX_ITER)
            .map_err(|e| e.to_string())?;
        let h: Vec<f64> = (1..=10).map(|i| sol.h[i]).collect();
        for (idx, v) in h.iter().enumerate() {
            let i = idx + 1;
            let exact_i = exact.optimal_profile.ep(i);
            ensure(*v <= exact_i + 1e-12, || {
                format!("N={n} i={i}: truncated {v} above exact {exact_i}")
            })?;
            if n == 500 {
                let err = (v - 0.5f64.powi(i as i32)).abs();
                worst = worst.max(err);
                ensure(err <= 1e-3, || {
                    format!("N=500 i={i}: {v} vs {}", 0.5f64.powi(i as i32))
                })?;
            }
        }
        if let Some(prev) = &previous {
            for (i, (a, b)) in prev.iter().zip(&h).enumerate() {
                ensure(*b >= *a - 1e-15, || {
                    format!("N={n} i={}: value fell from {a} to {b}", i + 1)
                })?;
            }
        }
        previous = Some(h);
    }
    Ok(format!(
        "N in {{50,100,200,500}} nondecreasing, max error at N=500 {worst:.2e}"
    ))
}

fn main() -> ExitCode {
    let oracle = oracle_runs();
    let criteria: Vec<(&str, Outcome)> = vec![
        ("1 root closed form", criterion_1()),
        ("2 branching identity", criterion_2()),
        ("3 oracle equivalence", criterion_3(&oracle)),
        (
            "4 monotone improvement and termination",
            criterion_4(&oracle),
        ),
        ("5 zero tail", criterion_5()),
        ("6 structured invertibility", criterion_6()),
        ("7 Monte Carlo agreement", criterion_7()),
        ("8 truncated value iteration", criterion_8()),
    ];
    let mut failed = 0;
    for (name, outcome) in &criteria {
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
