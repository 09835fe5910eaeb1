//! Independent oracles and helpers shared by the integration tests.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uavtrack::control::ControlInput;
use uavtrack::estimator::{
    initialize_from_detection, ukf_step, CameraMotion, EstimatorContext, EstimatorState, UkfConfig,
};
use uavtrack::geometry::{FeatureState, HeadingTracker, Vec3};
use uavtrack::nmpc::{objective_gradient, NmpcConfig};
use uavtrack::qp::QpProblem;
use uavtrack::scenario::logs::{read_rows, FeatureRow, PLOTS, PLOT_FEATURES};
use uavtrack::scenario::{run, RunOptions, RunReport, ScenarioConfig};
use uavtrack::vision::{detect, CameraIntrinsics, Detection, Dropout, NoiseSpec, NoiseStream};
use uavtrack::world::{AgentState, TargetState, WorldState};

pub fn scenario_path(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(file)
}

pub fn load(file: &str, overrides: &[(&str, &str)]) -> ScenarioConfig {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    ScenarioConfig::load(&scenario_path(file), &o).unwrap_or_else(|e| panic!("{file}: {e}"))
}

/// Runs `cfg` into a fresh temporary directory. Keep the returned guard alive
/// while reading the logs.
pub fn run_in_tempdir(cfg: &ScenarioConfig) -> (RunReport, PathBuf, tempfile::TempDir) {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (report, dir) = run(
        cfg,
        &RunOptions {
            out_dir: tmp.path().to_path_buf(),
        },
    )
    .unwrap_or_else(|e| panic!("{}: {e}", cfg.name));
    (report, dir, tmp)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec3 {
    Vec3::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Exhaustive active-set oracle for `min ½xᵀHx + gᵀx` s.t. `Ax ≤ b` (bounds
/// are turned into rows). Every subset of at most `n` rows is tried as the
/// active set; a candidate is kept when it is primal feasible and its
/// multipliers are non-negative. Returns the best such point.
pub fn brute_force_qp(p: &QpProblem) -> Option<DVector<f64>> {
    let n = p.n();
    let (a, b) = stacked_rows(p);
    let m = a.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1u32 << m) {
        let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if set.len() > n {
            continue;
        }
        let k = set.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&p.g));
        for (c, &i) in set.iter().enumerate() {
            for j in 0..n {
                kkt[(n + c, j)] = a[(i, j)];
                kkt[(j, n + c)] = a[(i, j)];
            }
            rhs[n + c] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let lambda = sol.rows(n, k);
        let feasible = (0..m).all(|i| a.row(i).dot(&x.transpose()) <= b[i] + 1e-9);
        if feasible && lambda.iter().all(|l| *l >= -1e-9) {
            let f = p.objective(&x);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        }
    }
    best.map(|(_, x)| x)
}

fn stacked_rows(p: &QpProblem) -> (DMatrix<f64>, DVector<f64>) {
    let n = p.n();
    let mut rows: Vec<(Vec<f64>, f64)> = (0..p.m())
        .map(|i| (p.a.row(i).iter().copied().collect(), p.b[i]))
        .collect();
    if let Some(u) = &p.upper {
        for j in 0..n {
            let mut r = vec![0.0; n];
            r[j] = 1.0;
            rows.push((r, u[j]));
        }
    }
    if let Some(l) = &p.lower {
        for j in 0..n {
            let mut r = vec![0.0; n];
            r[j] = -1.0;
            rows.push((r, -l[j]));
        }
    }
    let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    (a, b)
}

/// Random strictly convex QP with `n` variables and `m` rows that is feasible
/// by construction (rows are placed around a random interior point).
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * rng.gen_range(0.1..2.0);
    let g = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let b = &a * &x0 + DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0));
    QpProblem {
        h,
        g,
        a,
        b,
        lower: None,
        upper: None,
    }
}

/// Target moving at constant velocity with a camera flying alongside it. The
/// detections are dropped for ticks in `dropout`. Returns the target-position
/// error of the estimator after every tick.
pub fn dropout_trial(noise: NoiseSpec, ticks: usize, dropout: std::ops::Range<usize>, seed: u64) -> Vec<f64> {
    let dt = 1.0 / 80.0;
    let v = Vec3::new(0.5, 0.0, 0.0);
    let agent = AgentState::new(Vec3::new(-6.0, 0.5, 0.85), 0.0);
    let target = TargetState {
        position: Vec3::zeros(),
        velocity: v,
        heading: 0.0,
    };
    let mut world = WorldState::new(dt, vec![agent], target, Vec::new());
    let heading = HeadingTracker::new(0.0);
    let k = CameraIntrinsics::default();
    let mut stream = NoiseStream::new(seed, 0);
    let ctx = EstimatorContext {
        cfg: UkfConfig::default(),
        intrinsics: k,
        noise,
        dt,
    };
    let r_cg = world.agents[0].r_cg;
    let mut state: Option<EstimatorState> = None;
    let mut errors = Vec::with_capacity(ticks);
    for tick in 0..ticks {
        let mut d: Detection = detect(&world, 0, &k, &noise, &heading, &mut stream);
        if dropout.contains(&tick) {
            d = Detection::invalid(Dropout::Occluded, d.r_c);
        }
        state = Some(match state {
            None => initialize_from_detection(&d, &r_cg, Vec3::zeros(), &ctx).expect("first detection valid"),
            Some(s) => {
                let motion = CameraMotion {
                    velocity: r_cg.transpose() * v,
                    omega: Vec3::zeros(),
                    r_cg,
                };
                ukf_step(&s, &motion, &r_cg, &d, &ctx).expect("ukf step").state
            }
        });
        errors.push((state.as_ref().unwrap().mean.r_q - world.target.position).norm());
        let u = uavtrack::control::ControlInputGlobal::new(v, Vec3::zeros());
        let script = uavtrack::world::TargetScript {
            position: Vec3::zeros(),
            heading: 0.0,
            segments: vec![uavtrack::world::Segment::Straight {
                duration: 1e6,
                speed: 0.5,
            }],
        };
        world.step(&[u], &script);
    }
    errors
}

/// Multiple of 1/64 in `[-span, span]`. Sums and products of a few such
/// numbers are exact in `f64`, so barrier algebra on them has no rounding.
pub fn dyadic(rng: &mut ChaCha8Rng, span: i64) -> f64 {
    rng.gen_range(-span * 64..=span * 64) as f64 / 64.0
}

pub fn dyadic_vec3(rng: &mut ChaCha8Rng, span: i64) -> Vec3 {
    Vec3::new(dyadic(rng, span), dyadic(rng, span), dyadic(rng, span))
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SplitTally {
    pub configurations: usize,
    /// Configurations where both agents' rows held (collision, connectivity).
    pub collision_checked: usize,
    pub connectivity_checked: usize,
    pub violations: usize,
}

/// Draws random pairs of positions and velocities. Whenever agent i's and
/// agent j's split rows both hold, the pairwise barrier condition
/// `ḣ ≥ −γ h` must hold too, with no tolerance.
pub fn split_soundness(configurations: usize, seed: u64) -> SplitTally {
    use uavtrack::cbf::{collision_constraint, connectivity_constraint, CbfParams};
    let prm = CbfParams::default();
    let mut r = rng(seed);
    let mut t = SplitTally {
        configurations,
        ..Default::default()
    };
    for _ in 0..configurations {
        let pi = dyadic_vec3(&mut r, 16);
        let pj = dyadic_vec3(&mut r, 16);
        if pi == pj {
            continue;
        }
        let vi = dyadic_vec3(&mut r, 8);
        let vj = dyadic_vec3(&mut r, 8);
        let ui = [vi.x, vi.y, vi.z, 0.0, 0.0, 0.0];
        let uj = [vj.x, vj.y, vj.z, 0.0, 0.0, 0.0];
        let d = pi - pj;
        let rate = 2.0 * d.dot(&(vi - vj));

        let (ri, rj) = (
            collision_constraint(&pi, &pj, 1, &prm),
            collision_constraint(&pj, &pi, 0, &prm),
        );
        if ri.slack(&ui) >= 0.0 && rj.slack(&uj) >= 0.0 {
            t.collision_checked += 1;
            let h = d.norm_squared() - prm.r_s * prm.r_s;
            if !(rate >= -prm.gamma_s * h) {
                t.violations += 1;
            }
        }
        let (ci, cj) = (
            connectivity_constraint(&pi, &pj, 1, &prm),
            connectivity_constraint(&pj, &pi, 0, &prm),
        );
        if ci.slack(&ui) >= 0.0 && cj.slack(&uj) >= 0.0 {
            t.connectivity_checked += 1;
            let h = prm.r_c * prm.r_c - d.norm_squared();
            if !(-rate >= -prm.gamma_c * h) {
                t.violations += 1;
            }
        }
    }
    t
}

/// Largest relative error between the occlusion row's velocity block and
/// `−∇h` by central differences (step 1e-6) over `count` random geometries
/// with the angle away from 0 and π.
pub fn occlusion_gradient_worst(count: usize, seed: u64) -> f64 {
    use uavtrack::cbf::{occlusion_angle, occlusion_constraint, CbfParams};
    let prm = CbfParams::default();
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < count {
        let p = random_vec3(&mut r, -20.0, 20.0);
        let po = p + random_unit(&mut r) * r.gen_range(0.5..30.0);
        let n = random_unit(&mut r) * r.gen_range(1.0..40.0);
        let Ok(theta) = occlusion_angle(&p, &po, &n) else {
            continue;
        };
        if !(0.05..std::f64::consts::PI - 0.05).contains(&theta) {
            continue;
        }
        let row = occlusion_constraint(&p, &po, &n, 0, &prm).expect("non-degenerate");
        let h = |x: &[f64]| occlusion_angle(&Vec3::new(x[0], x[1], x[2]), &po, &n).unwrap() - prm.theta_star;
        let g = fd_gradient(h, &[p.x, p.y, p.z], 1e-6);
        let g = Vec3::new(g[0], g[1], g[2]);
        let err = (row.velocity_block() + g).norm() / g.norm().max(1e-12);
        worst = worst.max(err);
        assert!(row.a[3..].iter().all(|v| *v == 0.0));
        done += 1;
    }
    worst
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = random_vec3(rng, -1.0, 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Runs the generic unscented filter and a textbook Kalman filter side by
/// side on a random linear-Gaussian system and returns the largest absolute
/// difference in mean or covariance over `steps` predict/update cycles.
pub fn kalman_equivalence(seed: u64, steps: usize) -> f64 {
    use uavtrack::ukf::{SigmaParams, Ukf};
    let mut r = rng(seed);
    let (n, m) = (4, 2);
    let f = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + r.gen_range(-0.1..0.1));
    let hm = DMatrix::from_fn(m, n, |_, _| r.gen_range(-1.0..1.0));
    let q = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| r.gen_range(0.01..0.1)));
    let rm = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| r.gen_range(0.05..0.5)));
    let mut x = DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0));
    let mut p = DMatrix::identity(n, n) * 0.5;
    let mut ukf = Ukf::new(x.clone(), p.clone(), SigmaParams::default(), Vec::new());
    let mut worst = 0.0f64;
    for _ in 0..steps {
        ukf.predict(|s| &f * s, &q).expect("predict");
        x = &f * &x;
        p = &f * &p * f.transpose() + &q;

        let z = DVector::from_fn(m, |_, _| r.gen_range(-2.0..2.0));
        ukf.update(&z, |s| &hm * s, &rm, &[]).expect("update");
        let s = &hm * &p * hm.transpose() + &rm;
        let k = &p * hm.transpose() * s.try_inverse().expect("invertible");
        x = &x + &k * (&z - &hm * &x);
        p = (DMatrix::identity(n, n) - &k * &hm) * &p;

        worst = worst.max((&ukf.x - &x).amax()).max((&ukf.p - &p).amax());
    }
    worst
}

/// Monte-Carlo dropout recovery with the default noise: a 1 s dropout starting
/// at 5 s. Returns (mean error 3 ticks after re-detection, mean of the largest
/// error in the second before the dropout, seeds where the single-run
/// comparison also holds).
pub fn dropout_recovery(seeds: u64) -> (f64, f64, usize) {
    let (start, end) = (400, 480);
    let (mut after, mut before, mut wins) = (0.0, 0.0, 0);
    for seed in 0..seeds {
        let e = dropout_trial(NoiseSpec::default(), end + 80, start..end, seed);
        let level = e[start - 80..start].iter().cloned().fold(0.0, f64::max);
        wins += usize::from(e[end + 3] <= level);
        after += e[end + 3];
        before += level;
    }
    (after / seeds as f64, before / seeds as f64, wins)
}

/// One tick of a regulation run: time, `‖s − s*‖` and the larger of the two
/// pixel errors of the true image position.
#[derive(Debug, Clone, Copy)]
pub struct RegulationSample {
    pub t: f64,
    pub error: f64,
    pub pixels: f64,
}

/// Noiseless single-agent regulation toward the reference with the target
/// driving straight at `speed`.
pub fn regulation_trace(speed: f64, duration: f64) -> Vec<RegulationSample> {
    let segments = format!("[{{kind=\"straight\",duration={duration:.1},speed={speed:.3}}}]");
    let dur = format!("{duration:.1}");
    let cfg = load("regulation.toml", &[("target.segments", &segments), ("duration", &dur)]);
    let k = cfg.camera;
    let (_, dir, _guard) = run_in_tempdir(&cfg);
    let rows: Vec<FeatureRow> = read_rows(&dir.join(PLOTS).join(PLOT_FEATURES)).expect("features log");
    rows.iter()
        .filter(|r| r.agent == 0)
        .map(|r| {
            let s = FeatureState::new(r.x1, r.x2, r.x3, r.psi);
            let e = s.error_to(&FeatureState::new(r.x1_ref, r.x2_ref, r.x3_ref, r.psi_ref));
            RegulationSample {
                t: r.t,
                error: e.to_vector().norm(),
                pixels: (k.fx * e.x1).abs().max((k.fy * e.x2).abs()),
            }
        })
        .collect()
}

pub fn random_features(r: &mut ChaCha8Rng) -> FeatureState {
    FeatureState::new(
        r.gen_range(-0.5..0.5),
        r.gen_range(-0.4..0.4),
        r.gen_range(0.08..0.5),
        r.gen_range(-3.0..3.0),
    )
}

pub fn random_control(r: &mut ChaCha8Rng) -> ControlInput {
    ControlInput::new(
        r.gen_range(-2.0..2.0),
        r.gen_range(-2.0..2.0),
        r.gen_range(-2.0..2.0),
        r.gen_range(-0.5..0.5),
    )
}

/// Largest error of the adjoint objective gradient against central
/// differences, relative to the largest gradient entry of each case.
pub fn nmpc_gradient_worst(cases: usize, seed: u64) -> f64 {
    let cfg = NmpcConfig {
        horizon: 12,
        ..Default::default()
    };
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (s_k, s_d) = (random_features(&mut r), random_features(&mut r));
        let u_d = random_control(&mut r);
        let gamma = Vec3::new(0.0, 0.0, r.gen_range(-0.1..0.1));
        let controls: Vec<ControlInput> = (0..cfg.horizon).map(|_| random_control(&mut r)).collect();
        let (_, grad) = objective_gradient(&s_k, &s_d, &u_d, &gamma, &controls, &cfg).unwrap();
        let flat: Vec<f64> = controls
            .iter()
            .flat_map(|c| c.to_vector().iter().copied().collect::<Vec<_>>())
            .collect();
        let cost = |x: &[f64]| {
            let u: Vec<ControlInput> = x.chunks(4).map(|c| ControlInput::new(c[0], c[1], c[2], c[3])).collect();
            objective_gradient(&s_k, &s_d, &u_d, &gamma, &u, &cfg).unwrap().0
        };
        let fd = fd_gradient(cost, &flat, 1e-6);
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (k, g) in grad.iter().enumerate() {
            for c in 0..4 {
                worst = worst.max((g[c] - fd[4 * k + c]).abs() / scale);
            }
        }
    }
    worst
}
