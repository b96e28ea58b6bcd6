//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so every criterion prints exactly one PASS/FAIL line, and the expensive
//! orbital runs are shared between the criteria that use them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use avicert::avi::run_coupled;
use avicert::certify::{estimate_epsilon, lyapunov_check};
use avicert::{
    bound_check, build_grid, issue_certificate, open_loop_oracle, run_avi, simulate, train_actor,
    AviConfig, AviRun, Certificate, CertifyOptions, DMatrix, DomainBox, EvaluationGrid,
    InnerConfig, LinearActor, OracleConfig, PolynomialBasis, SimConfig, SystemModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const X0: [f64; 4] = [0.05, 0.15, 0.3, -0.3];

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

struct Trained {
    model: SystemModel,
    run: AviRun,
    actor: LinearActor,
    grid: EvaluationGrid,
    cert: Certificate,
    elapsed: Duration,
}

fn train_orbital(half_width: f64, samples: usize, critic: &[u32], actor: &[u32]) -> Trained {
    let start = Instant::now();
    let model = SystemModel::orbital(0.01).unwrap();
    let domain = DomainBox::symmetric(4, half_width).unwrap();
    let basis = PolynomialBasis::new(4, critic).unwrap();
    let run = run_avi(&model, &basis, AviConfig::new(domain.clone(), samples, 1)).unwrap();
    let actor = train_actor(
        &model,
        &run.final_critic(),
        &PolynomialBasis::new(4, actor).unwrap(),
        &run.samples,
        &InnerConfig::default(),
    )
    .unwrap();
    let grid = build_grid(&domain, 12).unwrap();
    let cert = issue_certificate(&model, &run, &actor, &grid, &CertifyOptions::default()).unwrap();
    Trained {
        model,
        run,
        actor,
        grid,
        cert,
        elapsed: start.elapsed(),
    }
}

/// Scalar Riccati map `p ↦ q + a²p − (abp)²/(r + b²p)`.
fn riccati(p: f64) -> f64 {
    let (a, b, q, r) = (0.9, 0.1, 1.0, 1.0);
    q + a * a * p - (a * b * p).powi(2) / (r + b * b * p)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let model = SystemModel::scalar_linear(0.9, 0.1, 1.0, 1.0).unwrap();
    let basis = PolynomialBasis::new(1, &[2]).unwrap();
    let mut cfg = AviConfig::new(DomainBox::symmetric(1, 1.0).unwrap(), 20, 5);
    cfg.outer_tolerance = 1e-13;
    cfg.max_outer_iterations = 400;
    let run = run_avi(&model, &basis, cfg).unwrap();
    let mut p = 0.0;
    let mut worst_step: f64 = 0.0;
    for (i, w) in run.weight_history.iter().enumerate() {
        let err = (w[0] - p).abs();
        ensure!(err <= 1e-8, "iteration {i}: weight {} vs Riccati {p}", w[0]);
        worst_step = worst_step.max(err);
        p = riccati(p);
    }
    // positive root of b²p² + (r − qb² − a²r)p − qr = 0
    let (a, b, q, r) = (0.9_f64, 0.1_f64, 1.0, 1.0);
    let lin = r - q * b * b - a * a * r;
    let fixed = (-lin + (lin * lin + 4.0 * b * b * q * r).sqrt()) / (2.0 * b * b);
    let last = run.weight_history.last().unwrap()[0];
    ensure!(
        (last - fixed).abs() <= 1e-6,
        "converged weight {last} vs fixed point {fixed}"
    );
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(1), "took {t:?}");
    Ok(format!(
        "{} steps, max step error {worst_step:.1e}, |p - p*| = {:.1e}, {t:.2?}",
        run.iterations(),
        (last - fixed).abs()
    ))
}

/// Double-integrator-like plant used by the bounding checks.
fn planar_plant(seed: u64) -> SystemModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |s: f64| rng.gen_range(-s..s);
    let a = DMatrix::from_row_slice(
        2,
        2,
        &[
            1.0 + jitter(0.05),
            0.1 + jitter(0.05),
            jitter(0.05),
            0.95 + jitter(0.05),
        ],
    );
    let b = DMatrix::from_row_slice(2, 1, &[jitter(0.02), 0.1 + jitter(0.02)]);
    SystemModel::linear(a, b, DMatrix::identity(2, 2), DMatrix::identity(1, 1)).unwrap()
}

fn planar_config(max_iterations: usize, tolerance: f64) -> AviConfig {
    let mut cfg = AviConfig::new(DomainBox::symmetric(2, 1.0).unwrap(), 40, 11);
    cfg.max_outer_iterations = max_iterations;
    cfg.outer_tolerance = tolerance;
    cfg
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let c = 0.3;
    let model = planar_plant(1);
    let basis = PolynomialBasis::new(2, &[2]).unwrap();
    // per-iteration quadratic error with |e(x)| ≤ c·xᵀx
    let coeffs: Vec<(f64, f64)> = {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        (0..200)
            .map(|_| (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)))
            .collect()
    };
    let inject = |i: usize, x: &[f64]| {
        let (s, t) = coeffs[i % coeffs.len()];
        c * (s * x[0] * x[0] + t * x[1] * x[1])
    };
    let runs = run_coupled(
        &model,
        &basis,
        planar_config(150, 1e-12),
        c,
        Some(&inject),
        true,
    )
    .map_err(|e| e.to_string())?;
    let grid = build_grid(&DomainBox::symmetric(2, 1.0).unwrap(), 21).unwrap();
    // the realized fit error must respect the bound being tested
    let eps = estimate_epsilon(&model, &runs.plain, grid.states(), &InnerConfig::default());
    for (p, y) in grid.states().iter().enumerate() {
        let u0 = model.state_cost(y);
        let worst = eps
            .state(p)
            .ok_or("inner loop failed")?
            .iter()
            .fold(0.0, |a: f64, e| a.max(e.abs()));
        ensure!(
            worst <= c * u0 + 1e-9,
            "fit error {worst} exceeds c·U = {} at {y:?}",
            c * u0
        );
    }
    let slack = 1e-6;
    let mut tightest = f64::INFINITY;
    for i in 0..=runs.plain.iterations() {
        let (lo, mid, hi) = (
            runs.lower.critic(i),
            runs.plain.critic(i),
            runs.upper.critic(i),
        );
        for y in grid.states() {
            let (l, m, h) = (lo.value(y), mid.value(y), hi.value(y));
            ensure!(
                l <= m + slack && m <= h + slack,
                "iteration {i} at {y:?}: {l} ≤ {m} ≤ {h} fails"
            );
            if i > 0 && y.iter().any(|v| *v != 0.0) {
                tightest = tightest.min((m - l).min(h - m));
            }
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!(
        "{} iterations x {} states, smallest off-origin margin {tightest:.2e}, {t:.2?}",
        runs.plain.iterations() + 1,
        grid.len()
    ))
}

fn criterion_3() -> Outcome {
    let basis = PolynomialBasis::new(2, &[2]).unwrap();
    let grid = build_grid(&DomainBox::symmetric(2, 1.0).unwrap(), 21).unwrap();
    let mut lines = Vec::new();
    for seed in 1..=5 {
        let model = planar_plant(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let signs: Vec<(f64, f64)> = (0..1000)
            .map(|_| (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)))
            .collect();
        let mut gaps = Vec::new();
        for c in [0.2, 0.1, 0.05] {
            // plain run perturbed by errors of magnitude up to c·U(x,0)
            let inject = |i: usize, x: &[f64]| {
                let (s, t) = signs[i % signs.len()];
                c * (s * x[0] * x[0] + t * x[1] * x[1])
            };
            let runs = run_coupled(
                &model,
                &basis,
                planar_config(800, 1e-10),
                c,
                Some(&inject),
                true,
            )
            .map_err(|e| e.to_string())?;
            ensure!(
                runs.upper.converged() && runs.lower.converged(),
                "plant {seed}, c = {c}: bounding runs did not converge"
            );
            let (hi, mid, lo) = (
                runs.upper.final_critic(),
                runs.plain.final_critic(),
                runs.lower.final_critic(),
            );
            let mut gap = f64::NEG_INFINITY;
            for y in grid.states() {
                let (h, m, l) = (hi.value(y), mid.value(y), lo.value(y));
                ensure!(
                    l <= m + 1e-6 && m <= h + 1e-6,
                    "plant {seed}, c = {c}: plain run escapes bounds at {y:?}"
                );
                gap = gap.max(h - l);
            }
            gaps.push(gap);
        }
        ensure!(
            gaps[0] > gaps[1] && gaps[1] > gaps[2],
            "plant {seed}: gaps {gaps:?} not decreasing"
        );
        lines.push(format!("{:.3}/{:.3}/{:.3}", gaps[0], gaps[1], gaps[2]));
    }
    Ok(format!(
        "max gap at c = 0.2/0.1/0.05 over 5 plants: {}",
        lines.join(", ")
    ))
}

fn criterion_4(t: &Trained) -> Outcome {
    let it = t.run.iterations();
    let c = &t.cert;
    ensure!(t.run.converged(), "did not converge");
    ensure!((200..=500).contains(&it), "{it} iterations");
    ensure!((0.05..=0.45).contains(&c.c), "c = {}", c.c);
    for (name, l) in [("L_U", c.lipschitz_u), ("L_V", c.lipschitz_v)] {
        ensure!((0.05..=0.6).contains(&l), "{name} = {l}");
    }
    ensure!(c.stable, "verdict {}", c.verdict());
    ensure!(
        c.actor_error_margin < 1.0,
        "margin {}",
        c.actor_error_margin
    );
    let r = c.r_bar.ok_or("no r_bar")?;
    ensure!((0.5..=2.0).contains(&r), "r_bar = {r}");
    ensure!(t.elapsed < Duration::from_secs(300), "took {:?}", t.elapsed);
    Ok(format!(
        "{it} iterations, c = {:.3}, L_U = {:.3}, L_V = {:.3}, margin {:.3}, r_bar = {r:.3}, STABLE, {:.1?}",
        c.c, c.lipschitz_u, c.lipschitz_v, c.actor_error_margin, t.elapsed
    ))
}

fn criterion_5(t: &Trained) -> Outcome {
    let traj = simulate(
        &t.model,
        &t.actor,
        &X0,
        &SimConfig {
            domain: Some(t.run.config.domain.clone()),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        traj.reached_stop_radius && !traj.diverged,
        "closed loop did not settle"
    );
    let oracle = open_loop_oracle(
        &t.model,
        &X0,
        &OracleConfig::default(),
        Some(&traj.controls),
    )
    .map_err(|e| e.to_string())?;
    let (closed, open) = (traj.total_cost, oracle.cost);
    ensure!(
        (closed - open).abs() <= 0.02 * open.min(closed),
        "closed {closed} vs open {open}"
    );
    // descent may stop a hair above the true minimum
    ensure!(
        closed >= open - 1e-6 * open,
        "closed {closed} below open {open}"
    );
    let base = t.run.config.clone();
    let shifted = |s: f64| AviConfig {
        utility_shift: s,
        ..base.clone()
    };
    let c = t.cert.c;
    let upper = run_avi(&t.model, &t.run.basis, shifted(c)).map_err(|e| e.to_string())?;
    let lower = run_avi(&t.model, &t.run.basis, shifted(-c)).map_err(|e| e.to_string())?;
    let rep = bound_check(
        &t.run.final_critic(),
        &upper.final_critic(),
        &lower.final_critic(),
        &X0,
    );
    ensure!(rep.ordered, "bounds not ordered: {rep:?}");
    Ok(format!(
        "closed {closed:.4}, open {open:.4} (gap {:.3}%), bounds {:.4} <= {:.4} <= {:.4}",
        100.0 * (closed - open) / open,
        rep.lower,
        rep.plain,
        rep.upper
    ))
}

fn criterion_6(small: &Trained, rich: &Trained) -> Outcome {
    let (s, r) = (&small.cert, &rich.cert);
    ensure!(!s.stable, "small basis certified STABLE (c = {})", s.c);
    ensure!(r.stable, "rich basis verdict {}", r.verdict());
    ensure!(r.c < 0.5, "rich basis c = {}", r.c);
    let summary = format!(
        "small: c = {:.3}, margin {:.3}, {}; rich: c = {:.3}, margin {:.3}, {}, r_bar = {:.3}",
        s.c,
        s.actor_error_margin,
        s.verdict(),
        r.c,
        r.actor_error_margin,
        r.verdict(),
        r.r_bar.unwrap_or(f64::NAN)
    );
    if !r.roa_member(&X0) {
        // Show that no accurate critic could do better: the optimal cost
        // from the lowest boundary point is below the optimal cost at x0.
        let critic = rich.run.final_critic();
        let z: Vec<f64> = rich
            .grid
            .boundary_states()
            .min_by(|a, b| critic.value(a).total_cmp(&critic.value(b)))
            .unwrap()
            .to_vec();
        let cfg = OracleConfig::default();
        let at_z = open_loop_oracle(&rich.model, &z, &cfg, None).map(|o| o.cost);
        let at_x0 = open_loop_oracle(&rich.model, &X0, &cfg, None).map(|o| o.cost);
        return Err(format!(
            "{summary}; verdict flip holds but x0 is not in B_r_bar: V(x0) = {:.3}; \
             optimal cost at boundary point {z:.3?} is {:.4} < optimal cost at x0 {:.4}",
            critic.value(&X0),
            at_z.unwrap_or(f64::NAN),
            at_x0.unwrap_or(f64::NAN)
        ));
    }
    Ok(summary)
}

fn roa_suite(name: &str, t: &Trained, seed: u64) -> Result<String, String> {
    let r_bar = t.cert.r_bar.ok_or("no r_bar")?;
    let critic = t.run.final_critic();
    let rep = lyapunov_check(&t.model, &critic, &t.actor, t.grid.states(), r_bar)
        .map_err(|e| e.to_string())?;
    ensure!(
        rep.decrease_violations == 0 && rep.invariance_violations == 0,
        "{name}: {rep:?}"
    );
    let domain = &t.run.config.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::new();
    while starts.len() < 100 {
        let x: Vec<f64> = (0..4)
            .map(|i| rng.gen_range(domain.lower()[i]..=domain.upper()[i]))
            .collect();
        if critic.value(&x) <= r_bar {
            starts.push(x);
        }
    }
    let cfg = SimConfig {
        max_steps: 20_000,
        stop_radius: 1e-3,
        domain: Some(domain.clone()),
    };
    let mut longest = 0;
    for x in &starts {
        let traj = simulate(&t.model, &t.actor, x, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            traj.reached_stop_radius,
            "{name}: from {x:?} did not reach 1e-3"
        );
        if let Some(k) = traj.states.iter().position(|s| critic.value(s) > r_bar) {
            return Err(format!("{name}: from {x:?} left B_r_bar at step {k}"));
        }
        longest = longest.max(traj.controls.len());
    }
    Ok(format!(
        "{name}: {} grid states, max dV = {:.2e}, 100 runs settle within {longest} steps",
        rep.checked, rep.max_increment
    ))
}

fn criterion_7(certs: &[(&str, &Trained)]) -> Outcome {
    let mut parts = Vec::new();
    for (i, (name, t)) in certs.iter().enumerate() {
        if t.cert.stable {
            parts.push(roa_suite(name, t, 100 + i as u64)?);
        }
    }
    ensure!(!parts.is_empty(), "no STABLE certificate to check");
    Ok(parts.join("; "))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let configs: [(usize, &[u32]); 7] = [
        (4, &[2, 3]),
        (4, &[1, 2]),
        (4, &[2, 3, 4, 5]),
        (4, &[1, 2, 3, 4]),
        (1, &[2]),
        (1, &[1]),
        (2, &[2]),
    ];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (dim, degrees) in configs {
        let basis = PolynomialBasis::new(dim, degrees).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let g = basis.gradient(&x);
            for j in 0..dim {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[j] += h;
                xm[j] -= h;
                let (fp, fm) = (basis.eval(&xp), basis.eval(&xm));
                for k in 0..basis.len() {
                    let fd = (fp[k] - fm[k]) / (2.0 * h);
                    let err = (g[(k, j)] - fd).abs();
                    worst = worst.max(err);
                    ensure!(
                        err <= 1e-6,
                        "basis {degrees:?}, term {:?}, axis {j}: {} vs {fd}",
                        basis.terms()[k],
                        g[(k, j)]
                    );
                }
            }
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(1), "took {t:?}");
    Ok(format!(
        "7 bases x 100 points, worst error {worst:.1e}, {t:.2?}"
    ))
}

fn run(results: &mut Vec<bool>, id: u32, f: impl FnOnce() -> Outcome) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match &outcome {
        Ok(detail) => println!("criterion {id}: PASS  {detail}"),
        Err(detail) => println!("criterion {id}: FAIL  {detail}"),
    }
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, 1, criterion_1);
    run(&mut results, 2, criterion_2);
    run(&mut results, 3, criterion_3);
    let narrow = train_orbital(0.3, 500, &[2, 3], &[1, 2]);
    run(&mut results, 4, || criterion_4(&narrow));
    run(&mut results, 5, || criterion_5(&narrow));
    let small = train_orbital(0.5, 2000, &[2, 3], &[1, 2]);
    let rich = train_orbital(0.5, 2000, &[2, 3, 4, 5], &[1, 2, 3, 4]);
    run(&mut results, 6, || criterion_6(&small, &rich));
    run(&mut results, 7, || {
        criterion_7(&[
            ("narrow", &narrow),
            ("wide/small", &small),
            ("wide/rich", &rich),
        ])
    });
    run(&mut results, 8, criterion_8);
    let failed = results.iter().filter(|ok| !**ok).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
