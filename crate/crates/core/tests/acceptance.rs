//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails; criteria that need external data print SKIP.

use std::time::Instant;

use trailopt_core::model::{
    integrate, nondimensionalize, ControlInput, DistanceMode, Dynamics, ModelOptions, RunnerProfile, State,
};
use trailopt_core::nutrition::{fit_cumulative, NutritionParams, PUBLISHED_CUMULATIVE};
use trailopt_core::ocp::{solve, OcpMode, OcpProblem, OcpSolution, SolverOptions};
use trailopt_core::physiology::{altitude_fraction, duration_fraction, MAX_DURATION_S};
use trailopt_core::pmp::{verify, ArcKind, PmpOptions, PmpReport};
use trailopt_core::race::{course_slope, format_hms, predict_race, RaceOptions, RaceReport};
use trailopt_core::terrain::{build_profile, parse_gpx, write_gpx, CourseProfile, TrackPoint, EARTH_RADIUS_M};

const M_BENCH: f64 = 0.0232;
const SIGMA_BENCH: f64 = 27.0;
const T_BENCH: f64 = 5820.0;

enum Outcome {
    Pass,
    Fail,
    Skip,
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn report(&mut self, id: u32, name: &str, outcome: Outcome, detail: String) {
        let tag = match outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => {
                self.failures += 1;
                "FAIL"
            }
            Outcome::Skip => "SKIP",
        };
        println!("{tag} [{id:>2}] {name}: {detail}");
    }

    fn check(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        self.report(id, name, if ok { Outcome::Pass } else { Outcome::Fail }, detail);
    }
}

fn benchmark_dynamics() -> Dynamics {
    let params = nondimensionalize(&RunnerProfile::reference(), SIGMA_BENCH, M_BENCH, T_BENCH).unwrap();
    Dynamics::flat(params, Some(NutritionParams::canonical()))
}

fn flat_benchmark() -> OcpSolution {
    let opts = SolverOptions {
        grid_size: Some(400),
        ..Default::default()
    };
    solve(&OcpProblem::max_distance(benchmark_dynamics(), opts).unwrap(), None).unwrap()
}

fn criterion_1(s: &mut Suite) {
    let sp = nondimensionalize(&RunnerProfile::reference(), SIGMA_BENCH, M_BENCH, T_BENCH).unwrap();
    let table = [
        ("iota", sp.iota, 8686.57),
        ("beta", sp.beta, 12718.69),
        ("gamma", sp.gamma, 97.97),
        ("chi", sp.chi, 70.02),
        ("phi", sp.phi, 13.91),
        ("omega", sp.omega, 24.45),
    ];
    let worst = table
        .iter()
        .map(|(_, got, want)| (got / want - 1.0).abs())
        .fold(0.0, f64::max);
    let listing: Vec<String> = table.iter().map(|(n, got, _)| format!("{n}={got:.2}")).collect();
    s.check(
        1,
        "nondimensional constants",
        worst <= 1e-3,
        format!("{}; worst rel. error {worst:.2e} (tol 1e-3)", listing.join(" ")),
    );
}

fn criterion_2(s: &mut Suite, bench: &OcpSolution, report: &PmpReport, elapsed: f64) {
    let seq = report.sequence();
    let expected = [
        ArcKind::MaxForce,
        ArcKind::Interior,
        ArcKind::BoundaryUpper,
        ArcKind::Interior,
        ArcKind::BoundaryLower,
    ];
    let e = &report.extremes;
    let signs_ok = e.min_lambda_e >= -1e-6 && e.max_lambda_q <= 1e-6 && e.min_eta >= -1e-6 && e.min_glc >= -1e-6;
    s.check(
        2,
        "flat-route arc structure",
        bench.converged && seq == expected && report.certified && elapsed < 60.0,
        format!(
            "sequence {seq:?} (want {expected:?}); certified={} with {} violations; min λE={:.3e}, max λQ={:.3e}, \
             min η={:.3e}, min GLC={:.3e} over all nodes (signs hold everywhere: {signs_ok}); solve {elapsed:.1} s",
            report.certified,
            report.violations.len(),
            e.min_lambda_e,
            e.max_lambda_q,
            e.min_eta,
            e.min_glc
        ),
    );
}

fn criterion_4(s: &mut Suite, bench: &OcpSolution) {
    let t: Vec<f64> = bench.trajectory.times.clone();
    let q: Vec<f64> = bench.trajectory.states.iter().map(|st| st.q).collect();
    let n = t.len() as f64;
    let (mt, mq) = (t.iter().sum::<f64>() / n, q.iter().sum::<f64>() / n);
    let sxy: f64 = t.iter().zip(&q).map(|(a, b)| (a - mt) * (b - mq)).sum();
    let sxx: f64 = t.iter().map(|a| (a - mt).powi(2)).sum();
    let slope = sxy / sxx;
    let rms = (t
        .iter()
        .zip(&q)
        .map(|(a, b)| (b - mq - slope * (a - mt)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let q1 = *q.last().unwrap();
    s.check(
        4,
        "fatigue linearity",
        rms < 0.02 * q1,
        format!("RMS residual {rms:.3e} = {:.3}% of Q(1) (tol 2%)", 100.0 * rms / q1),
    );
}

fn criterion_5(s: &mut Suite, report: &PmpReport) {
    let singular: Vec<f64> = report
        .arcs
        .iter()
        .filter(|a| a.kind.is_singular())
        .filter_map(|a| a.max_control_deviation)
        .collect();
    let dev = singular.iter().cloned().fold(0.0, f64::max);
    s.check(
        5,
        "singular-control cross-validation",
        report.certified && !singular.is_empty() && dev <= 0.02,
        format!(
            "{} singular arcs, max |f - f_analytic| = {dev:.3e} (tol 0.02); certified={}",
            singular.len(),
            report.certified
        ),
    );
}

fn criterion_3(s: &mut Suite) -> (CourseProfile, RaceReport) {
    let course = CourseProfile::flat(20_000.0).unwrap().with_record(T_BENCH);
    let runner = RunnerProfile::reference();
    let nutrition = NutritionParams::canonical();
    let fixed_sigma = RaceOptions {
        sigma_override: Some(SIGMA_BENCH),
        ..Default::default()
    };
    let fixed = predict_race(&course, &runner, &nutrition, &fixed_sigma).unwrap();
    let physio = predict_race(&course, &runner, &nutrition, &RaceOptions::default()).unwrap();
    let err = (fixed.finish_time_s / T_BENCH - 1.0).abs();
    s.check(
        3,
        "flat 20 km finish time",
        fixed.converged && err <= 0.05,
        format!(
            "T = {:.0} s ({}) at σ = {SIGMA_BENCH}, rel. error {:.2}% (tol 5%); with physiological σ = {:.3}: T = {:.0} s ({:+.2}%)",
            fixed.finish_time_s,
            fixed.finish_hms,
            100.0 * err,
            physio.sigma.sigma,
            physio.finish_time_s,
            100.0 * physio.relative_error.unwrap()
        ),
    );

    (course, fixed)
}

fn criterion_6(s: &mut Suite, course: &CourseProfile, fixed: RaceReport) {
    let runner = RunnerProfile::reference();
    let nutrition = NutritionParams::canonical();
    let fixed_sigma = RaceOptions {
        sigma_override: Some(SIGMA_BENCH),
        ..Default::default()
    };
    let hilly = CourseProfile::from_segments(&[(3000.0, 0.0), (2000.0, 0.06), (2500.0, -0.04), (2500.0, 0.02)], 0.0)
        .unwrap()
        .with_record(2700.0);
    let mut details = Vec::new();
    let mut ok = true;
    for (name, c, report) in [
        ("flat 20 km", course, fixed),
        (
            "hilly 10 km",
            &hilly,
            predict_race(&hilly, &runner, &nutrition, &fixed_sigma).unwrap(),
        ),
    ] {
        let md = solve(
            &OcpProblem::max_distance(report.solution.dynamics.clone(), SolverOptions::default()).unwrap(),
            None,
        )
        .unwrap();
        let ratio = md.distance_m / c.total_distance;
        ok &= report.converged && md.converged && ratio >= 0.999;
        details.push(format!(
            "{name}: T* = {:.1} s covers {:.2} m = {ratio:.6} D",
            report.finish_time_s, md.distance_m
        ));
    }
    s.check(6, "mode duality", ok, format!("{} (tol 0.999 D)", details.join("; ")));
}

/// Exhaustive search over three constant control pieces for the same
/// minimum-time transcription the solver sees.
fn criterion_7(s: &mut Suite) {
    let started = Instant::now();
    let course = CourseProfile::from_segments(&[(800.0, 0.0), (700.0, 0.04)], 0.0).unwrap();
    let params = nondimensionalize(&RunnerProfile::reference(), 20.0, M_BENCH, 300.0).unwrap();
    let dynamics = Dynamics {
        slope: course_slope(&course, params.d_scale, 10.0).unwrap(),
        params,
        options: ModelOptions {
            drag_on: false,
            distance: DistanceMode::AlongPath,
        },
        nutrition: None,
    };
    let opts = SolverOptions {
        grid_size: Some(61),
        ..Default::default()
    };
    let problem = OcpProblem::min_time(dynamics.clone(), course.total_distance, None, opts)
        .unwrap()
        .with_control_block(20)
        .unwrap();
    let OcpMode::MinTime {
        tau_lower, tau_upper, ..
    } = problem.mode
    else {
        unreachable!()
    };
    let sol = solve(&problem, None).unwrap();

    let n = problem.grid_size;
    let h = 1.0 / (n - 1) as f64;
    let m = problem.substeps();
    let target = course.total_distance / dynamics.params.d_scale;
    let run = |f: [f64; 3], tau: f64| -> Vec<[f64; 4]> {
        let mut z = State::initial_scaled().to_array();
        let mut out = vec![z];
        for k in 0..n - 1 {
            z = dynamics.step(k as f64 * h, h, tau, z, f[k / 20], m);
            out.push(z);
        }
        out
    };
    // minimum horizon ratio for a control triple, if one is feasible
    let cost = |f: [f64; 3]| -> Option<f64> {
        let reach = |tau: f64| run(f, tau).last().unwrap()[1] - target;
        if reach(tau_upper) < 0.0 {
            return None;
        }
        let (mut lo, mut hi) = (tau_lower, tau_upper);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if reach(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let feasible = run(f, hi).iter().skip(1).all(|z| z[2] >= -1e-9 && z[2] <= 1.0 + 1e-9);
        feasible.then_some(hi)
    };
    let levels: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let mut best: Option<([usize; 3], f64)> = None;
    for a in 0..21 {
        for b in 0..21 {
            for c in 0..21 {
                if let Some(tau) = cost([levels[a], levels[b], levels[c]]) {
                    if best.is_none_or(|(_, t)| tau < t) {
                        best = Some(([a, b, c], tau));
                    }
                }
            }
        }
    }
    let Some((idx, enum_tau)) = best else {
        s.check(
            7,
            "brute-force oracle",
            false,
            "enumeration found no feasible control".into(),
        );
        return;
    };
    // one quantum: the largest objective change to a feasible grid neighbour
    let mut quantum = 0.0f64;
    for i in 0..3 {
        for d in [-1i32, 1] {
            let j = idx[i] as i32 + d;
            if !(0..=20).contains(&j) {
                continue;
            }
            let mut nb = idx;
            nb[i] = j as usize;
            if let Some(t) = cost([levels[nb[0]], levels[nb[1]], levels[nb[2]]]) {
                quantum = quantum.max((t - enum_tau).abs());
            }
        }
    }
    let nlp_tau = sol.objective;
    let gap = enum_tau - nlp_tau;
    s.check(
        7,
        "brute-force oracle",
        sol.converged && gap >= -1e-9 && gap <= quantum,
        format!(
            "solver T = {:.3} s, enumeration T = {:.3} s at f = ({:.2}, {:.2}, {:.2}); gap {:.3e} vs one quantum {:.3e} (ratio units); {:.1} s",
            nlp_tau * dynamics.params.t_scale_s,
            enum_tau * dynamics.params.t_scale_s,
            levels[idx[0]],
            levels[idx[1]],
            levels[idx[2]],
            gap,
            quantum,
            started.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_8(s: &mut Suite) {
    let p = NutritionParams::canonical();
    // composite Simpson on a fine grid
    let quad = |t: f64| {
        let n = 20_000;
        let h = t / n as f64;
        let mut acc = p.rate(0.0) + p.rate(t);
        for i in 1..n {
            acc += p.rate(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    let quad_err = [600.0, 3600.0, 5820.0, 14_400.0, 36_000.0]
        .iter()
        .map(|&t| (p.cumulative(t) / quad(t) - 1.0).abs())
        .fold(0.0, f64::max);
    let table_err = PUBLISHED_CUMULATIVE
        .iter()
        .map(|&(h, g)| (p.cumulative(h * 3600.0) / g - 1.0).abs())
        .fold(0.0, f64::max);
    let samples: Vec<(f64, f64)> = (1..=12)
        .map(|i| (i as f64 * 1200.0, p.cumulative(i as f64 * 1200.0)))
        .collect();
    let fit = fit_cumulative(&samples).unwrap().params;
    let round_trip = [(fit.k, p.k), (fit.n0, p.n0), (fit.m_max, p.m_max)]
        .iter()
        .map(|(a, b)| (a / b - 1.0).abs())
        .fold(0.0, f64::max);
    s.check(
        8,
        "nutrition",
        quad_err <= 1e-8 && table_err <= 0.02 && round_trip <= 1e-6,
        format!(
            "quadrature rel. error {quad_err:.2e} (tol 1e-8); published cumulative table worst rel. error {:.3}% (tol 2%); fit round trip {round_trip:.2e} (tol 1e-6)",
            100.0 * table_err
        ),
    );
}

fn criterion_9(s: &mut Suite) {
    let fd = duration_fraction(5820.0).unwrap();
    let fa0 = altitude_fraction(0.0).unwrap();
    let fa2 = altitude_fraction(2000.0).unwrap();
    let rejected = duration_fraction(MAX_DURATION_S).is_err();
    s.check(
        9,
        "physiology formulas",
        (fd - 0.843).abs() < 1e-12 && fa0 == 1.0 && (fa2 - 0.94518).abs() <= 1e-5 && rejected,
        format!("f_d(5820 s) = {fd}, f_a(0) = {fa0}, f_a(2000) = {fa2:.6}, 940 min rejected: {rejected}"),
    );
}

/// Track along the equator sampled every `dx` metres.
fn equator_track(n: usize, dx: f64, ele: impl Fn(f64) -> f64) -> Vec<TrackPoint> {
    let deg_per_m = 180.0 / (std::f64::consts::PI * EARTH_RADIUS_M);
    (0..n)
        .map(|i| {
            let x = i as f64 * dx;
            TrackPoint {
                lat: 0.0,
                lon: x * deg_per_m,
                ele: ele(x),
                time: None,
            }
        })
        .collect()
}

fn criterion_10(s: &mut Suite) {
    let through_gpx = |pts: &[TrackPoint]| parse_gpx(write_gpx("synthetic", pts).as_bytes()).unwrap();
    let ramp = build_profile(&through_gpx(&equator_track(501, 10.0, |x| 0.1 * x)), 150.0).unwrap();
    let ramp_err = ramp
        .slopes
        .iter()
        .map(|a| (a - 0.1f64.atan()).abs())
        .fold(0.0, f64::max);
    let d = 20_500.0;
    let tau = 2.0 * std::f64::consts::PI;
    let climb = |x: f64| 2300.0 * (x / d - 0.8 * (tau * x / d).sin() / tau);
    let uphill = build_profile(&through_gpx(&equator_track(2051, 10.0, climb)), 150.0).unwrap();
    let (gain, loss) = uphill.gain_loss();
    s.check(
        10,
        "terrain",
        ramp_err <= 1e-6 && (gain - 2300.0).abs() <= 1.0,
        format!(
            "ramp slope error {ramp_err:.2e} over {} segments (tol 1e-6); 20.5 km climb: D = {:.1} m, gain {gain:.2} m, loss {loss:.2} m (tol ±1 m)",
            ramp.segment_count(),
            uphill.total_distance
        ),
    );
}

fn criterion_11(s: &mut Suite) {
    let (Ok(path), Ok(record)) = (std::env::var("TRAILOPT_GPX"), std::env::var("TRAILOPT_RECORD_S")) else {
        s.report(
            11,
            "real-course plausibility",
            Outcome::Skip,
            "set TRAILOPT_GPX and TRAILOPT_RECORD_S to a recorded race track and its route record [s]".into(),
        );
        return;
    };
    let record: f64 = record.parse().expect("TRAILOPT_RECORD_S must be a number of seconds");
    let doc = std::fs::read(&path).expect("readable GPX file");
    let course = build_profile(&parse_gpx(&doc).unwrap(), 150.0)
        .unwrap()
        .with_record(record);
    let mut runner = RunnerProfile::reference();
    runner.e0 = 2000.0;
    let r = predict_race(&course, &runner, &NutritionParams::canonical(), &RaceOptions::default()).unwrap();
    let err = r.relative_error.unwrap();
    s.check(
        11,
        "real-course plausibility",
        r.converged && err.abs() <= 0.15,
        format!(
            "{path}: T = {} vs record {}, rel. error {:+.2}% (tol ±15%)",
            r.finish_hms,
            format_hms(record),
            100.0 * err
        ),
    );
}

fn criterion_12(s: &mut Suite) {
    let d = benchmark_dynamics();
    // A control with 300 periods over the horizon keeps the truncation error
    // above roundoff at step sizes where the stiff velocity mode is resolved.
    let control = |t: f64| 0.9 + 0.05 * (2.0 * std::f64::consts::PI * 300.0 * t).sin();
    let end = |steps: usize| {
        let grid = [0.0, 1.0];
        let t = integrate(
            &d,
            State::initial_scaled(),
            ControlInput::Function(&control),
            &grid,
            steps,
        )
        .unwrap();
        t.final_state().to_array()
    };
    let (a, b, c) = (end(20_000), end(40_000), end(80_000));
    let ratios: Vec<f64> = (0..4).map(|i| (a[i] - b[i]) / (b[i] - c[i])).collect();
    let ok = ratios.iter().all(|r| (12.0..=20.0).contains(r));
    let shown: Vec<String> = ["v", "x", "E", "I"]
        .iter()
        .zip(&ratios)
        .map(|(n, r)| format!("{n} {r:.2}"))
        .collect();
    s.check(
        12,
        "RK4 convergence order",
        ok,
        format!(
            "Richardson ratios {} (want [12, 20]; 16 for fourth order)",
            shown.join(", ")
        ),
    );
}

fn main() {
    let mut suite = Suite { failures: 0 };
    criterion_1(&mut suite);
    let started = Instant::now();
    let bench = flat_benchmark();
    let elapsed = started.elapsed().as_secs_f64();
    let report = verify(&bench.trajectory, &bench.dynamics, &PmpOptions::default()).unwrap();
    criterion_2(&mut suite, &bench, &report, elapsed);
    let (course, flat_race) = criterion_3(&mut suite);
    criterion_4(&mut suite, &bench);
    criterion_5(&mut suite, &report);
    criterion_6(&mut suite, &course, flat_race);
    criterion_7(&mut suite);
    criterion_8(&mut suite);
    criterion_9(&mut suite);
    criterion_10(&mut suite);
    criterion_11(&mut suite);
    criterion_12(&mut suite);
    println!("{} criteria failed", suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
