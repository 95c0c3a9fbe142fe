//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use impm_core::constitutive::NeoHookean;
use impm_core::fill::{fill_points, voxelize};
use impm_core::implicit::{ImplicitStep, LinearOscillator};
use impm_core::metrics::{self, GateResult, STANDARD_MULTIPLIERS};
use impm_core::model::seed_particles_box;
use impm_core::solver::{gmres_right_precond, jvp, NonlinearSystem};
use impm_core::stepper::particles_from_source;
use impm_core::trace::{ClampMask, SubstepRecord, TraceMeta};
use impm_core::transfers::{compute_stencils, p2g};
use impm_core::{
    run_simulation, Aabb, ForcingMode, Mat3, MaterialParams, Method, NewmarkParams, NodeClass,
    SimConfig, Simulation, SolverParams, Trace, Vec3,
};

// Tolerances.
const FREE_FALL_REL: f64 = 1e-10;
const OSC_STEP_REL: f64 = 1e-8;
const OSC_GROWTH: f64 = 1.0 + 1e-6;
const JVP_REL: f64 = 1e-5;
const GMRES_REL: f64 = 1e-8;
const GMRES_COND: f64 = 1e4;
const METRIC_ABS: f64 = 1e-12;
const TRANSFER_REL: f64 = 1e-12;
const IMPULSE_REL: f64 = 1e-12;
const FILL_AGREEMENT: f64 = 0.99;
const COMD_AT_K10: f64 = 0.05;
const CFL_MARGIN_MAX: f64 = 20.0;
/// Drift may dip below its running maximum over smaller multipliers by at
/// most this factor.
const MONOTONE_SLACK: f64 = 0.8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn soft_block() -> SimConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenes/soft_block.json");
    SimConfig::load(&path).expect("soft block scene")
}

fn with_k(config: &SimConfig, k: u32) -> SimConfig {
    let mut c = config.clone();
    c.time.dt_multiplier = k;
    c
}

fn json_config(text: &str) -> SimConfig {
    SimConfig::from_json(text).expect("inline scene")
}

/// Sweep results shared by the stability and drift criteria.
struct Sweeps {
    implicit: Vec<(u32, Trace)>,
    explicit: Vec<(u32, Trace)>,
    cfl_margin: f64,
}

fn run_sweeps() -> Sweeps {
    let base = soft_block();
    let h = base.grid_lim / base.grid_resolution as f64;
    let cfl_margin = h / base.material.wave_speed() / base.time.substep_dt;
    let implicit: Vec<(u32, Trace)> = (1..=20u32)
        .into_par_iter()
        .map(|k| {
            (
                k,
                run_simulation(&with_k(&base, k), Method::Implicit).unwrap(),
            )
        })
        .collect();
    let explicit: Vec<(u32, Trace)> = STANDARD_MULTIPLIERS
        .par_iter()
        .map(|&k| {
            (
                k,
                run_simulation(&with_k(&base, k), Method::Explicit).unwrap(),
            )
        })
        .collect();
    Sweeps {
        implicit,
        explicit,
        cfl_margin,
    }
}

fn frontier(traces: &[(u32, Trace)]) -> metrics::StabilityReport {
    let gated: Vec<(u32, GateResult)> = traces
        .iter()
        .map(|(k, t)| (*k, metrics::gate(t).unwrap()))
        .collect();
    metrics::stability_frontier(&gated).unwrap()
}

fn c1_stability(s: &Sweeps) -> Outcome {
    let imp = frontier(&s.implicit);
    let exp = frontier(&s.explicit);
    let pass = imp.k_max == 20
        && imp.fail_percent == 0.0
        && imp.multipliers.len() == 20
        && exp.passed.iter().any(|p| !p)
        && s.cfl_margin <= CFL_MARGIN_MAX;
    outcome(
        pass,
        format!(
            "implicit k_max={} fail={:.1}% over k=1..20; explicit k_max={} fail={:.1}%; 1x CFL margin {:.2}",
            imp.k_max, imp.fail_percent, exp.k_max, exp.fail_percent, s.cfl_margin
        ),
    )
}

fn c2_drift(s: &Sweeps) -> Outcome {
    let reference = &s.implicit[0].1;
    let drift: Vec<(u32, f64, f64)> = s
        .implicit
        .iter()
        .map(|(k, t)| {
            let d = metrics::drift_report(t, reference, "implicit k=1").unwrap();
            (*k, d.comd.mean, d.mwrmsd.mean)
        })
        .collect();
    let bounded = drift
        .iter()
        .all(|&(_, c, m)| c <= COMD_AT_K10 && m <= COMD_AT_K10);
    let mut monotone = true;
    let (mut max_c, mut max_m) = (0.0f64, 0.0f64);
    for &(_, c, m) in &drift {
        monotone &= c >= MONOTONE_SLACK * max_c && m >= MONOTONE_SLACK * max_m;
        max_c = max_c.max(c);
        max_m = max_m.max(m);
    }
    let growth = drift[19].1 > drift[1].1 && drift[19].2 > drift[1].2;
    let comd10 = drift[9].1;

    let exp_frontier = frontier(&s.explicit);
    let first_fail = exp_frontier
        .multipliers
        .iter()
        .zip(&exp_frontier.passed)
        .find(|(_, p)| !**p)
        .map(|(k, _)| *k);
    let (exceeds, fail_detail) = match first_fail {
        Some(k) => {
            let exp_ref = &s.explicit[0].1;
            let exp_t = &s.explicit.iter().find(|(kk, _)| *kk == k).unwrap().1;
            let e = metrics::drift_report(exp_t, exp_ref, "explicit k=1").unwrap();
            let i = drift[(k - 1) as usize];
            (
                e.comd.mean > i.1 && e.mwrmsd.mean > i.2,
                format!(
                    "explicit first failing k={k}: COMD {:.4} / mwRMSD {:.4} vs implicit {:.4} / {:.4}",
                    e.comd.mean, e.mwrmsd.mean, i.1, i.2
                ),
            )
        }
        None => (false, "explicit never fails".into()),
    };
    outcome(
        bounded && monotone && growth && comd10 < COMD_AT_K10 && exceeds,
        format!(
            "implicit COMD k=10 {comd10:.4}, k=20 {:.4}, mwRMSD k=20 {:.4}; bounded={bounded} monotone={monotone}; {fail_detail}",
            drift[19].1, drift[19].2
        ),
    )
}

fn c3_free_fall() -> Outcome {
    let config = json_config(
        r#"{
  "scene": "free_fall",
  "grid_lim": 10.0,
  "grid_resolution": 10,
  "time": { "substep_dt": 0.004166666666666667, "frame_dt": 0.016666666666666666, "frame_num": 50 },
  "material": { "density": 1000.0, "E": 1e5, "nu": 0.3 },
  "particles": { "type": "box", "region": { "min": [4.9, 4.9, 8.4], "max": [5.1, 5.1, 8.6] }, "spacing": 0.2 }
}"#,
    );
    let start = Instant::now();
    let trace = run_simulation(&config, Method::Implicit).unwrap();
    let z0 = 8.5;
    let dt = trace.meta.frame_interval();
    let mut worst = 0.0f64;
    for t in 0..trace.frame_count() {
        let time = (t + 1) as f64 * dt;
        let exact = 0.5 * 9.8 * time * time;
        let fallen = z0 - trace.position(t, 0).z;
        worst = worst.max((fallen - exact).abs() / exact);
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        worst < FREE_FALL_REL && trace.frame_count() == 50 && trace.particle_count() == 1,
        format!(
            "max relative error {worst:.2e} over {} frames in {elapsed:.2}s",
            trace.frame_count()
        ),
    )
}

fn c4_oscillator() -> Outcome {
    let osc = LinearOscillator {
        mass: 2.0,
        stiffness: 50.0,
    };
    let w = osc.omega();
    let newmark = NewmarkParams::default();
    let solver = SolverParams {
        newton_rel_tol: 1e-14,
        newton_tol: 1e-14,
        ..SolverParams::default()
    };
    let start = Instant::now();
    let mut worst_step = 0.0f64;
    let mut worst_growth = 0.0f64;
    for dt in [0.1 / w, 20.0 * osc.explicit_critical_dt()] {
        // Average acceleration is the trapezoidal rule on (u, v).
        let h = 0.5 * dt;
        let a = nalgebra::Matrix2::new(0.0, 1.0, -w * w, 0.0);
        let id = nalgebra::Matrix2::identity();
        let amp = (id - a * h).try_inverse().unwrap() * (id + a * h);
        let mut s = osc.state(Vec3::new(0.01, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.0));
        let energy = |u: f64, v: f64| (osc.stiffness * u * u + osc.mass * v * v).sqrt();
        for _ in 0..50 {
            let (next, report) = osc.implicit_step(&s, dt, &newmark, &solver);
            assert!(report.converged);
            let expect = amp * nalgebra::Vector2::new(s.u.x, s.v.x);
            let scale = (s.u.x.powi(2) + (s.v.x / w).powi(2)).sqrt();
            let err =
                ((next.u.x - expect[0]).powi(2) + ((next.v.x - expect[1]) / w).powi(2)).sqrt();
            worst_step = worst_step.max(err / scale);
            worst_growth = worst_growth.max(energy(next.u.x, next.v.x) / energy(s.u.x, s.v.x));
            s = next;
        }
    }
    // Symplectic Euler at the same large step diverges.
    let dt = 20.0 * osc.explicit_critical_dt();
    let mut e = osc.state(Vec3::new(0.01, 0.0, 0.0), Vec3::zeros());
    for _ in 0..10 {
        e = osc.explicit_step(&e, dt);
    }
    let explicit_blows_up = e.u.x.abs() > 1.0;
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        worst_step < OSC_STEP_REL && worst_growth <= OSC_GROWTH && explicit_blows_up,
        format!(
            "max step error {worst_step:.2e}, max amplitude growth {worst_growth:.12} at 20x explicit limit, explicit diverges={explicit_blows_up}, {elapsed:.2}s"
        ),
    )
}

fn c5_jvp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = json_config(
        r#"{
  "grid_lim": 1.0,
  "grid_resolution": 8,
  "time": { "substep_dt": 1e-3, "frame_dt": 1e-2, "frame_num": 1 },
  "material": { "density": 1000.0, "E": 1e5, "nu": 0.3 },
  "particles": { "type": "box", "region": { "min": [0.45, 0.45, 0.45], "max": [0.55, 0.55, 0.55] }, "spacing": 0.1 }
}"#,
    );
    let material = config.material;
    let mut particles = seed_particles_box(
        &Aabb::new(Vec3::new(0.48, 0.5, 0.5), Vec3::new(0.58, 0.6, 0.6)),
        0.05,
        &material,
    )
    .unwrap();
    particles.position.truncate(2);
    particles.velocity.truncate(2);
    particles.mass.truncate(2);
    particles.ref_volume.truncate(2);
    particles.deformation_gradient.truncate(2);
    for p in 0..2 {
        particles.velocity[p] = Vec3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
        particles.deformation_gradient[p] =
            Mat3::identity() + Mat3::from_fn(|_, _| rng.gen_range(-0.05..0.05));
    }
    let model = NeoHookean {
        lambda: material.lame_lambda,
        mu: material.lame_mu,
    };
    let mut grid = impm_core::model::build_grid(&config).unwrap();
    let stencils = compute_stencils(&particles, &grid).unwrap();
    let external = p2g(
        &particles,
        &stencils,
        &mut grid,
        &model,
        &config.gravity(),
        &[],
    )
    .unwrap();
    // Keep the ten heaviest nodes free; pin the rest to their current velocity.
    let mut active: Vec<usize> = grid.free_nodes();
    active.sort_by(|a, b| grid.node_mass[*b].total_cmp(&grid.node_mass[*a]));
    for &n in &active[10..] {
        grid.node_class[n] = NodeClass::Dirichlet;
        grid.dirichlet_velocity[n] = grid.node_velocity[n];
    }
    let dt = config.time.substep_dt;
    let mut system = ImplicitStep::new(
        &particles,
        &stencils,
        &grid,
        &external,
        &model,
        dt,
        NewmarkParams::default(),
        material.p_wave_modulus(),
        false,
    );
    let n = system.dim();
    let mut x = system.constant_velocity_guess();
    for xi in x.iter_mut() {
        *xi += rng.gen_range(-1e-4..1e-4);
    }
    let mut r = vec![0.0; n];
    system.residual(&x, &mut r).unwrap();

    let mut dense = DMatrix::<f64>::zeros(n, n);
    let (mut rp, mut rm) = (vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        let h = 1e-7;
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        system.residual(&xp, &mut rp).unwrap();
        system.residual(&xm, &mut rm).unwrap();
        for i in 0..n {
            dense[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    let op_norm = dense.clone().svd(false, false).singular_values.max();
    let target = SolverParams::default().jvp_target_perturbation;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mf = jvp(&mut system, &x, &r, &p, target).unwrap();
        let pv = DVector::from_vec(p.clone());
        let exact = &dense * &pv;
        let err = (DVector::from_vec(mf) - exact).norm() / (op_norm * pv.norm());
        worst = worst.max(err);
    }
    outcome(
        worst < JVP_REL && n <= 30,
        format!("{n} dofs, max |Jp - J_dense p| / (|J| |p|) = {worst:.2e} over 20 directions"),
    )
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
        .qr()
        .q()
}

fn c6_gmres() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 30;
    let mut worst = 0.0f64;
    let mut monotone = true;
    let mut worst_cond = 0.0f64;
    for _ in 0..20 {
        let u = random_orthogonal(n, &mut rng);
        let v = random_orthogonal(n, &mut rng);
        let sigma = DVector::from_fn(n, |i, _| GMRES_COND.powf(i as f64 / (n - 1) as f64));
        let a = &u * DMatrix::from_diagonal(&sigma) * v.transpose();
        let sv = a.clone().svd(false, false).singular_values;
        worst_cond = worst_cond.max(sv.max() / sv.min());
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let out = gmres_right_precond(
            |x| Ok((&a * DVector::from_column_slice(x)).as_slice().to_vec()),
            &b,
            &w,
            1e-14,
            n,
        )
        .unwrap();
        let direct = a
            .clone()
            .lu()
            .solve(&DVector::from_column_slice(&b))
            .unwrap();
        let err = (DVector::from_vec(out.solution) - &direct).norm() / direct.norm();
        worst = worst.max(err);
        monotone &= out.residual_history.windows(2).all(|h| h[1] <= h[0]);
    }
    outcome(
        worst < GMRES_REL && monotone && worst_cond <= GMRES_COND * (1.0 + 1e-6),
        format!(
            "20 systems 30x30, cond <= {worst_cond:.3e}: max relative error {worst:.2e}, residual non-increasing={monotone}"
        ),
    )
}

fn stiff_scene() -> SimConfig {
    let mut c = with_k(&soft_block(), 10);
    c.material = MaterialParams::new(1000.0, 1e7, 0.3).unwrap();
    c.time.frame_num = 8;
    c
}

/// Steps a scene and checks the per-substep Newton contract.
fn newton_contract(config: &SimConfig) -> (usize, usize, usize, usize) {
    let mut sim = Simulation::new(config.clone(), Method::Implicit).unwrap();
    let c = config.solver.armijo_c;
    let (mut converged, mut tol_ok, mut steps, mut armijo_ok) = (0, 0, 0, 0);
    for _ in 0..sim.schedule().total_substeps() {
        let out = sim.substep().unwrap();
        let r = out.report.unwrap();
        if r.converged {
            converged += 1;
            tol_ok += (r.final_residual_norm <= r.tolerance) as usize;
        }
        for s in &r.steps {
            steps += 1;
            armijo_ok += (s.phi <= s.phi0 + c * s.alpha * s.dphi0) as usize;
        }
    }
    (converged, tol_ok, steps, armijo_ok)
}

fn c7_newton() -> Outcome {
    let base = stiff_scene();
    let mut no_ls = base.clone();
    no_ls.solver.line_search_enabled = false;
    let mut fixed = base.clone();
    fixed.solver.forcing_mode = ForcingMode::Fixed;
    fixed.solver.fixed_eta = 1e-10;

    let (converged, tol_ok, steps, armijo_ok) = newton_contract(&base);
    let traces: Vec<Trace> = [&base, &no_ls, &fixed]
        .par_iter()
        .map(|c| run_simulation(c, Method::Implicit).unwrap())
        .collect();
    let report = |t: &Trace| metrics::ablation_report(&t.telemetry, &traces[0].telemetry).unwrap();
    let (rb, rn, rf) = (report(&traces[0]), report(&traces[1]), report(&traces[2]));
    let no_ls_tol = traces[1]
        .telemetry
        .iter()
        .filter(|r| r.converged)
        .all(|r| r.r_end <= r.tolerance);
    let gm_b = rb.gmres_mean.unwrap_or(0.0);
    let gm_f = rf.gmres_mean.unwrap_or(0.0);
    let pass = converged > 0
        && tol_ok == converged
        && armijo_ok == steps
        && no_ls_tol
        && rn.success_rate <= rb.success_rate
        && gm_f >= gm_b;
    outcome(
        pass,
        format!(
            "tol met {tol_ok}/{converged} converged substeps, Armijo {armijo_ok}/{steps} steps; success base {:.1}% noLS {:.1}%; GMRES mean EW {gm_b:.1} fixed 1e-10 {gm_f:.1}",
            rb.success_rate, rn.success_rate
        ),
    )
}

fn fixture(masses: &[f64], frames: &[Vec<Vec3>], clamped: &[Vec<usize>]) -> Trace {
    let meta = TraceMeta {
        grid_lim: 1.0,
        frame_dt: 1.0,
        substep_dt: 1.0,
        steps_per_frame: 1,
        multiplier: 1,
        particle_count: masses.len(),
        expected_frames: frames.len(),
        ..TraceMeta::default()
    };
    let mut t = Trace::new(meta, masses.to_vec(), vec![1.0; masses.len()]);
    for (f, c) in frames.iter().zip(clamped) {
        let mut mask = ClampMask::new(masses.len());
        c.iter().for_each(|&i| mask.set(i));
        t.push_frame(f, mask);
    }
    t
}

fn c8_metrics() -> Outcome {
    let mut failures: Vec<&str> = Vec::new();
    let mut check = |ok: bool, name: &'static str| {
        if !ok {
            failures.push(name);
        }
    };
    let close = |a: f64, b: f64| (a - b).abs() <= METRIC_ABS;

    let x2 = vec![Vec3::repeat(0.5); 2];
    let t = fixture(&[1.0, 3.0], std::slice::from_ref(&x2), &[vec![1]]);
    check(close(metrics::bmf_series(&t).unwrap()[0], 0.75), "bmf");

    let mut bmf = vec![0.6; 6];
    bmf.extend([0.0; 4]);
    let g = metrics::gate_series(&bmf, 10).unwrap();
    check(close(g.r, 0.6) && g.failed, "gate");
    let g = metrics::gate_series(&[0.5; 10], 10).unwrap();
    check(g.r == 0.0 && !g.failed, "gate boundary");

    let gated = |f: &dyn Fn(u32) -> bool| -> Vec<(u32, GateResult)> {
        STANDARD_MULTIPLIERS
            .iter()
            .map(|&k| {
                (
                    k,
                    GateResult {
                        r: f(k) as u8 as f64,
                        failed: f(k),
                        frames: 1,
                    },
                )
            })
            .collect()
    };
    let all = metrics::stability_frontier(&gated(&|_| false)).unwrap();
    let one = metrics::stability_frontier(&gated(&|k| k != 1)).unwrap();
    let none = metrics::stability_frontier(&gated(&|_| true)).unwrap();
    check(all.k_max == 20 && all.fail_percent == 0.0, "frontier all");
    check(
        one.k_max == 1 && close(one.fail_percent, 1000.0 / 11.0),
        "frontier one",
    );
    check(
        none.k_max == 0 && none.fail_percent == 100.0,
        "frontier none",
    );

    let a = vec![Vec3::new(0.2, 0.3, 0.4), Vec3::new(0.6, 0.5, 0.4)];
    let b = vec![a[0], a[1] + Vec3::new(0.3, 0.0, 0.0)];
    let reference = fixture(&[1.0, 2.0], &[a.clone(), a.clone()], &[vec![], vec![]]);
    let moved = fixture(&[1.0, 2.0], &[a.clone(), b], &[vec![], vec![]]);
    let c = metrics::comd(&moved, &reference).unwrap();
    check(close(c.series[1], 0.2) && close(c.mean, 0.1), "comd");
    let m = metrics::mwrmsd(&moved, &reference).unwrap();
    check(close(m.series[1], (2.0 * 0.09 / 3.0f64).sqrt()), "mwrmsd");
    let single = fixture(&[1.0], &[vec![Vec3::repeat(0.5)]], &[vec![]]);
    let clamped = fixture(&[1.0], &[vec![Vec3::repeat(0.5)]], &[vec![0]]);
    check(
        metrics::mwrmsd(&clamped, &single).unwrap().series == vec![1.0],
        "mwrmsd penalty",
    );

    let ramp: Vec<f64> = STANDARD_MULTIPLIERS
        .iter()
        .map(|&k| (k as f64 - 1.0) / 19.0)
        .collect();
    check(
        close(
            metrics::drift_auc(&STANDARD_MULTIPLIERS, &ramp, &[true; 11]),
            0.5,
        ),
        "auc",
    );

    check(
        close(metrics::mass_drift_series(&[2.0, 2.2])[1], 0.1),
        "mass drift",
    );
    check(
        metrics::mass_drift(&reference).iter().all(|d| *d == 0.0),
        "mass drift zero",
    );

    let quad: Vec<Vec3> = (1..=6)
        .map(|t| Vec3::new((t * t) as f64, 0.0, 0.0))
        .collect();
    let ms = metrics::MomentumSeries {
        linear: quad.clone(),
        angular: quad.clone(),
        center: quad,
    };
    let (imp, tor) = metrics::irregularity(&ms, 1.0, 1.0, 1.0).unwrap();
    check(
        imp.iter().chain(&tor).all(|x| (x - 2.0).abs() <= 1e-10),
        "irregularity",
    );

    let s = metrics::sat_ratio(&[vec![0.98, 0.5, 1.0, 0.0]]).unwrap();
    check(close(s.per_frame[0], 0.5), "sat ratio boundary");
    let s = metrics::sat_ratio(&[vec![1.0; 4], vec![1.0; 4]]).unwrap();
    check(
        s.mean == 1.0 && s.std == 0.0 && s.range == 0.0,
        "sat ratio white",
    );

    let rec = |frame, converged, wall| SubstepRecord {
        frame,
        converged,
        r0: 1.0,
        r_end: 1e-3,
        wall_time: wall,
        gmres_iters: vec![4],
        ..SubstepRecord::default()
    };
    let mut v: Vec<_> = (0..6).map(|s| rec(s / 3, true, 8.0 / 6.0)).collect();
    v[4].converged = false;
    let base: Vec<_> = (0..6).map(|s| rec(s / 3, true, 10.0 / 6.0)).collect();
    let r = metrics::ablation_report(&v, &base).unwrap();
    check(
        close(r.success_rate, 50.0) && close(r.speedup, 1.25),
        "ablation",
    );

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "all metric oracles reproduced".to_string()
        } else {
            format!("mismatched: {failures:?}")
        },
    )
}

fn c9_conservation() -> Outcome {
    let mut config = soft_block();
    config.boundary_conditions.clear();
    let mut particles = particles_from_source(&config).unwrap();
    for (i, v) in particles.velocity.iter_mut().enumerate() {
        *v = Vec3::new(0.3, -0.2, 0.1) + Vec3::new(0.0, 0.0, 1e-3 * (i % 7) as f64);
    }
    let mut sim = Simulation::with_particles(config.clone(), Method::Implicit, particles).unwrap();
    let (mut worst_m, mut worst_p) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let t = sim.substep().unwrap().transfer;
        worst_m = worst_m.max((t.grid_mass - t.particle_mass).abs() / t.particle_mass);
        worst_p = worst_p
            .max((t.grid_momentum - t.particle_momentum).norm() / t.particle_momentum.norm());
    }
    let mut short = soft_block();
    short.time.frame_num = 4;
    let trace = run_simulation(&short, Method::Implicit).unwrap();
    let drift_zero = metrics::mass_drift(&trace).iter().all(|d| *d == 0.0);
    outcome(
        worst_m <= TRANSFER_REL && worst_p <= TRANSFER_REL && drift_zero,
        format!(
            "100 substeps: max mass error {worst_m:.2e}, max momentum error {worst_p:.2e}; trace MassDrift identically 0={drift_zero}"
        ),
    )
}

fn c10_impulse() -> Outcome {
    let config = json_config(
        r#"{
  "scene": "impulse",
  "grid_lim": 1.0,
  "grid_resolution": 16,
  "time": { "substep_dt": 5e-4, "frame_dt": 0.016666666666666666, "frame_num": 3 },
  "material": { "density": 1000.0, "E": 1e5, "nu": 0.3 },
  "gravity": [0.0, 0.0, 0.0],
  "boundary_conditions": [
    { "type": "particle_impulse", "region": { "min": [0.1, 0.1, 0.1], "max": [0.9, 0.9, 0.9] },
      "force": [0.5, -0.25, 0.2], "num_dt": 5, "start_time": 0.002 }
  ],
  "particles": { "type": "box", "region": { "min": [0.375, 0.375, 0.375], "max": [0.625, 0.625, 0.625] }, "spacing": 0.03125 }
}"#,
    );
    let runs: Vec<(u32, Vec3)> = [1u32, 4, 10]
        .par_iter()
        .map(|&k| {
            let t = run_simulation(&with_k(&config, k), Method::Implicit).unwrap();
            (k, Vec3::from(t.meta.imparted_momentum))
        })
        .collect();
    let n = particles_from_source(&config).unwrap().len() as f64;
    let expected = Vec3::new(0.5, -0.25, 0.2) * (n * 5.0 * 5e-4);
    let worst = runs
        .iter()
        .map(|(_, p)| (p - expected).norm() / expected.norm())
        .fold(0.0, f64::max);
    let spread = runs
        .iter()
        .map(|(_, p)| (p - runs[0].1).norm() / runs[0].1.norm())
        .fold(0.0, f64::max);
    outcome(
        spread <= IMPULSE_REL && worst <= IMPULSE_REL,
        format!("k in {{1,4,10}}: max relative spread {spread:.2e}, max error vs N f dt num_dt {worst:.2e}"),
    )
}

fn cube_shell(lo: f64, hi: f64, step: f64) -> Vec<Vec3> {
    let n = ((hi - lo) / step).ceil() as usize;
    let mut pts = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            let u = lo + (hi - lo) * i as f64 / n as f64;
            let v = lo + (hi - lo) * j as f64 / n as f64;
            for w in [lo, hi] {
                pts.push(Vec3::new(u, v, w));
                pts.push(Vec3::new(u, w, v));
                pts.push(Vec3::new(w, u, v));
            }
        }
    }
    pts
}

fn sphere_shell(center: Vec3, radius: f64, count: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5.0f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let th = golden * i as f64;
            center + Vec3::new(r * th.cos(), r * th.sin(), z) * radius
        })
        .collect()
}

/// Agreement between the fill and an analytic inside test over unoccupied
/// voxels of the shape's bounding box, and whether refilling adds nothing.
fn fill_agreement(shell: &[Vec3], inside: impl Fn(&Vec3) -> bool, lo: f64, hi: f64) -> (f64, bool) {
    let res = 32;
    let occ = voxelize(shell, 1.0, res).unwrap();
    let interior = fill_points(shell, 1.0, res).unwrap();
    let filled = voxelize(&interior, 1.0, res).unwrap();
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..res {
        for j in 0..res {
            for k in 0..res {
                let c = occ.center(i, j, k);
                if occ.get(i, j, k) || c.iter().any(|&x| x < lo || x > hi) {
                    continue;
                }
                total += 1;
                agree += (filled.get(i, j, k) == inside(&c)) as usize;
            }
        }
    }
    let mut merged = shell.to_vec();
    merged.extend(&interior);
    let idempotent = fill_points(&merged, 1.0, res).unwrap().is_empty()
        && fill_points(shell, 1.0, res).unwrap() == interior;
    (agree as f64 / total as f64, idempotent)
}

fn c11_fill() -> Outcome {
    let (lo, hi) = (0.2, 0.8);
    let (cube, cube_idem) = fill_agreement(
        &cube_shell(lo, hi, 0.01),
        |c| c.iter().all(|&x| x > lo && x < hi),
        lo,
        hi,
    );
    let center = Vec3::repeat(0.5);
    let (sphere, sphere_idem) = fill_agreement(
        &sphere_shell(center, 0.3, 40_000),
        |c| (c - center).norm() < 0.3,
        0.2,
        0.8,
    );
    outcome(
        cube >= FILL_AGREEMENT && sphere >= FILL_AGREEMENT && cube_idem && sphere_idem,
        format!(
            "resolution 32: cube agreement {:.2}%, sphere {:.2}%; idempotent cube={cube_idem} sphere={sphere_idem}",
            100.0 * cube,
            100.0 * sphere
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (3, "free-fall exactness", c3_free_fall()),
        (4, "linear oscillator", c4_oscillator()),
        (5, "JVP fidelity", c5_jvp()),
        (6, "GMRES correctness", c6_gmres()),
        (8, "metric oracles", c8_metrics()),
        (9, "conservation", c9_conservation()),
        (10, "impulse consistency", c10_impulse()),
        (11, "particle filling", c11_fill()),
        (7, "Newton contract", c7_newton()),
    ];
    let sweep_start = Instant::now();
    let sweeps = run_sweeps();
    let sweep_time = sweep_start.elapsed().as_secs_f64();
    let mut c1 = c1_stability(&sweeps);
    c1.detail += &format!("; sweeps {sweep_time:.1}s");
    results.push((1, "large-step stability", c1));
    results.push((2, "time-step robustness", c2_drift(&sweeps)));
    results.sort_by_key(|(id, _, _)| *id);

    let mut failed = 0;
    for (id, name, o) in &results {
        println!(
            "{} criterion {id:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += (!o.pass) as usize;
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
