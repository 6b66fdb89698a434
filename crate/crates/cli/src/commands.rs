//! Subcommand implementations. Every JSON or CSV artifact embeds the
//! resolved configuration and the parameter provenance, and contains no
//! timestamps, so identical inputs give byte-identical files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use trailopt_core::model::{
    nondimensionalize, Dynamics, Flavor, ModelOptions, RunnerProfile, ScaledParams, Trajectory,
};
use trailopt_core::nutrition::{fit_cumulative, fit_logistic, read_cumulative_csv, read_samples_csv, NutritionParams};
use trailopt_core::ocp::{solve, OcpProblem, OcpSolution, SolverOptions};
use trailopt_core::physiology::SigmaBreakdown;
use trailopt_core::pmp::{verify, PmpOptions, PmpReport};
use trailopt_core::race::{course_slope, format_hms, predict_race, RaceReport};
use trailopt_core::terrain::{build_profile, parse_gpx, CourseProfile};

use crate::config::{has_extension, load_course, RunConfig};
use crate::error::CliError;

const TOOL: &str = concat!("trailopt ", env!("CARGO_PKG_VERSION"));

/// Flat-benchmark constants: σ [m²/s³], M [g/s] and the horizon [s].
pub const BENCH_SIGMA: f64 = 27.0;
pub const BENCH_M: f64 = 0.0232;
pub const BENCH_HORIZON_S: f64 = 5820.0;

/// Violations printed to the terminal; the JSON report lists all of them.
const SHOWN_VIOLATIONS: usize = 20;

/// Where the model constants came from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    /// `physiology`, `override` or `fixed`.
    pub sigma_source: String,
    pub sigma: SigmaBreakdown,
    /// Constants and scales at the solved horizon.
    pub scaled: ScaledParams,
}

/// Everything `verify` needs to rebuild the dynamics of a solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub params: ScaledParams,
    pub nutrition: Option<NutritionParams>,
    pub options: ModelOptions,
    /// Width of the slope blend around segment boundaries [m].
    pub blend_width_m: f64,
    /// Segment length used when the course is given as GPX [m].
    pub segment_m: f64,
}

/// Contents of `params.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub provenance: Option<Provenance>,
    pub model: ModelSpec,
    #[serde(default)]
    pub pmp: PmpOptions,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("outputs serialise");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_trajectory(path: &Path, t: &Trajectory, config: &Value, provenance: &Provenance) -> Result<(), CliError> {
    let notes = [
        ("config", serde_json::to_string(config).expect("config serialises")),
        (
            "provenance",
            serde_json::to_string(provenance).expect("provenance serialises"),
        ),
    ];
    let mut buf = Vec::new();
    t.write_csv_annotated(&mut buf, &notes)?;
    write_file(path, &buf)
}

fn pmp_summary(report: &Result<PmpReport, String>) -> Value {
    match report {
        Ok(r) => json!({
            "certified": r.certified,
            "sequence": r.sequence(),
            "violations": r.violations.len(),
            "extremes": r.extremes,
            "terminal_lambda_e": r.terminal_lambda_e,
            "warnings": r.warnings,
        }),
        Err(e) => json!({ "certified": false, "error": e }),
    }
}

fn print_pmp(report: &Result<PmpReport, String>) {
    match report {
        Ok(r) => {
            let seq: Vec<String> = r.sequence().iter().map(|k| format!("{k:?}")).collect();
            println!(
                "PMP: {} (arcs {}, {} violations)",
                if r.certified { "certified" } else { "not certified" },
                seq.join(" -> "),
                r.violations.len()
            );
            for v in r.violations.iter().take(SHOWN_VIOLATIONS) {
                println!(
                    "  {} at node {} (t = {:.4}): value {:.3e}, tolerance {:.1e}",
                    v.check, v.node, v.t, v.value, v.tolerance
                );
            }
            if r.violations.len() > SHOWN_VIOLATIONS {
                println!("  ... {} more in the report", r.violations.len() - SHOWN_VIOLATIONS);
            }
        }
        Err(e) => println!("PMP: verification could not run: {e}"),
    }
}

/// Writes the four solution artifacts shared by `predict` and
/// `flat-benchmark` and returns the verifier outcome.
fn write_solution(
    dir: &Path,
    config: &Value,
    provenance: &Provenance,
    model: ModelSpec,
    pmp_options: &PmpOptions,
    solution: &OcpSolution,
) -> Result<Result<PmpReport, String>, CliError> {
    let pmp = verify(&solution.trajectory, &solution.dynamics, pmp_options).map_err(|e| e.to_string());
    let dimensional = solution.trajectory.to_dimensional(&solution.dynamics.params)?;
    write_trajectory(&dir.join("trajectory.csv"), &dimensional, config, provenance)?;
    write_trajectory(
        &dir.join("trajectory_scaled.csv"),
        &solution.trajectory,
        config,
        provenance,
    )?;
    let params = ParamsFile {
        config: config.clone(),
        provenance: Some(provenance.clone()),
        model,
        pmp: pmp_options.clone(),
    };
    write_file(&dir.join("params.json"), to_json(&params).as_bytes())?;
    let pmp_doc = match &pmp {
        Ok(r) => json!({ "config": config, "provenance": provenance, "report": r }),
        Err(e) => json!({ "config": config, "provenance": provenance, "error": e }),
    };
    write_file(&dir.join("pmp.json"), to_json(&pmp_doc).as_bytes())?;
    Ok(pmp)
}

fn check_outcome(
    converged: bool,
    status: &str,
    pmp: &Result<PmpReport, String>,
    require_certified: bool,
) -> Result<(), CliError> {
    if !converged {
        return Err(CliError::Solver(format!("optimiser did not converge ({status})")));
    }
    let certified = pmp.as_ref().is_ok_and(|r| r.certified);
    if require_certified && !certified {
        return Err(CliError::Verification("the solution is not PMP-certified".into()));
    }
    Ok(())
}

/// `ingest`: GPX track to course profile JSON.
pub fn ingest(
    gpx: &Path,
    segment_m: f64,
    record_s: Option<f64>,
    name: Option<&str>,
    out: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let bytes = std::fs::read(gpx).map_err(|e| CliError::io(gpx, e))?;
    let points = parse_gpx(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", gpx.display())))?;
    let mut course = build_profile(&points, segment_m)?;
    if let Some(t) = record_s {
        if !(t.is_finite() && t > 0.0) {
            return Err(CliError::Input(format!("record must be positive, got {t}")));
        }
        course = course.with_record(t);
    }
    let stem = gpx.file_stem().and_then(|s| s.to_str()).unwrap_or("course");
    course = course.with_name(name.unwrap_or(stem));
    let (gain, loss) = course.gain_loss();
    let out = out.unwrap_or_else(|| gpx.with_file_name(format!("{stem}.profile.json")));
    let mut doc = serde_json::to_value(&course).expect("profile serialises");
    doc["ingest"] = json!({
        "tool": TOOL,
        "source": gpx.display().to_string(),
        "segment_m": segment_m,
        "track_points": points.len(),
        "gain_m": gain,
        "loss_m": loss,
    });
    write_file(&out, to_json(&doc).as_bytes())?;
    println!(
        "{}: D = {:.1} m in {} segments, gain {:.1} m, loss {:.1} m, mean altitude {:.1} m",
        course.name.as_deref().unwrap_or(stem),
        course.total_distance,
        course.segment_count(),
        gain,
        loss,
        course.mean_altitude
    );
    println!("wrote {}", out.display());
    Ok(out)
}

fn course_summary(c: &CourseProfile) -> Value {
    let (gain, loss) = c.gain_loss();
    json!({
        "name": c.name,
        "distance_m": c.total_distance,
        "segments": c.segment_count(),
        "gain_m": gain,
        "loss_m": loss,
        "mean_altitude_m": c.mean_altitude,
        "record_time_s": c.record_time_s,
    })
}

fn print_prediction(r: &RaceReport) {
    println!(
        "{}: {:.1} m, finish time {} ({:.1} s)",
        r.course_name.as_deref().unwrap_or("course"),
        r.distance_m,
        r.finish_hms,
        r.finish_time_s
    );
    if let (Some(rec), Some(err)) = (r.record_time_s, r.relative_error) {
        println!(
            "record {} ({rec:.0} s), relative error {:+.2}%",
            format_hms(rec),
            100.0 * err
        );
    }
    println!(
        "sigma = {:.3} m²/s³ ({}; f_d = {:.3}, f_a = {:.4})",
        r.sigma.sigma, r.sigma_source, r.sigma.f_d, r.sigma.f_a
    );
    println!(
        "{:>4} {:>9} {:>9} {:>8} {:>10} {:>8}",
        "seg", "start_m", "end_m", "grade%", "split", "m/s"
    );
    for s in &r.splits {
        println!(
            "{:>4} {:>9.1} {:>9.1} {:>8.2} {:>10} {:>8.3}",
            s.index,
            s.start_m,
            s.end_m,
            100.0 * s.slope_rad.tan(),
            format_hms(s.start_time_s + s.duration_s),
            s.mean_speed_m_s
        );
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }
}

/// `predict`: finish time on a configured course.
pub fn predict(config_path: &Path, output_dir: Option<PathBuf>, require_certified: bool) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    let runner = cfg.runner_profile()?;
    let nutrition = cfg.nutrition_params();
    let course = cfg.course_profile()?;
    let report = predict_race(&course, &runner, &nutrition, &cfg.race)?;
    let config = json!({
        "command": "predict",
        "config_file": config_path.display().to_string(),
        "settings": cfg,
        "runner": runner,
        "nutrition": nutrition,
        "course": course_summary(&course),
    });
    let provenance = Provenance {
        tool: TOOL.into(),
        sigma_source: report.sigma_source.clone(),
        sigma: report.sigma,
        scaled: report.params.clone(),
    };
    let model = ModelSpec {
        params: report.params.clone(),
        nutrition: Some(nutrition),
        options: report.solution.dynamics.options,
        blend_width_m: cfg.race.blend_width_m,
        segment_m: cfg.segment_m,
    };
    let dir = &cfg.output_dir;
    let pmp = write_solution(dir, &config, &provenance, model, &cfg.pmp, &report.solution)?;
    let summary = json!({
        "config": config,
        "provenance": provenance,
        "prediction": {
            "course_name": report.course_name,
            "distance_m": report.distance_m,
            "finish_time_s": report.finish_time_s,
            "finish_hms": report.finish_hms,
            "record_time_s": report.record_time_s,
            "relative_error": report.relative_error,
            "converged": report.converged,
            "fixed_point_iterations": report.fixed_point_iterations,
            "diagnostics": report.diagnostics,
            "warnings": report.warnings,
            "splits": report.splits,
        },
        "pmp": pmp_summary(&pmp),
    });
    write_file(&dir.join("report.json"), to_json(&summary).as_bytes())?;
    print_prediction(&report);
    print_pmp(&pmp);
    println!(
        "wrote report.json, trajectory.csv, trajectory_scaled.csv, params.json, pmp.json to {}",
        dir.display()
    );
    check_outcome(report.converged, &report.diagnostics.status, &pmp, require_certified)
}

/// `fit-nutrition`: logistic fit to rate or cumulative samples.
pub fn fit_nutrition(csv: &Path, cumulative: bool, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let file = std::fs::File::open(csv).map_err(|e| CliError::io(csv, e))?;
    let samples = if cumulative {
        read_cumulative_csv(file)?
    } else {
        read_samples_csv(file)?
    };
    let fit = if cumulative {
        fit_cumulative(&samples)?
    } else {
        fit_logistic(&samples)?
    };
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("samples");
    let out = out.unwrap_or_else(|| csv.with_file_name(format!("{stem}.fit.json")));
    let doc = json!({
        "config": {
            "command": "fit-nutrition",
            "source": csv.display().to_string(),
            "target": if cumulative { "cumulative" } else { "rate" },
            "samples": samples.len(),
        },
        "provenance": { "tool": TOOL },
        "fit": fit,
    });
    write_file(&out, to_json(&doc).as_bytes())?;
    let p = &fit.params;
    println!(
        "k = {:.6} 1/h, N0 = {:.6e} g/s, M = {:.6e} g/s, R² = {:.6} ({} samples, {} iterations)",
        p.k_per_second() * 3600.0,
        p.n0,
        p.m_max,
        fit.r_squared,
        samples.len(),
        fit.iterations
    );
    println!("wrote {}", out.display());
    Ok(out)
}

fn read_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    if has_extension(path, "json") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        return Ok(Trajectory::from_json(&text)?);
    }
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(Trajectory::read_csv(std::io::BufReader::new(file))?)
}

/// `verify`: PMP check of a stored trajectory. Succeeds iff certified.
pub fn verify_trajectory(
    trajectory: &Path,
    course: Option<&Path>,
    params: &Path,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(params).map_err(|e| CliError::io(params, e))?;
    let pf: ParamsFile =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", params.display())))?;
    let spec = &pf.model;
    let traj = read_trajectory(trajectory)?;
    let top = match traj.flavor {
        Flavor::Dimensional => spec.params.f_scale,
        Flavor::Nondimensional => 1.0,
    };
    traj.validate(top)?;
    let scaled = match traj.flavor {
        Flavor::Dimensional => traj.to_scaled(&spec.params)?,
        Flavor::Nondimensional => traj,
    };
    let slope = match course {
        Some(c) => course_slope(
            &load_course(c, spec.segment_m)?,
            spec.params.d_scale,
            spec.blend_width_m,
        )?,
        None => trailopt_core::model::SlopeProfile::flat(),
    };
    let dynamics = Dynamics {
        params: spec.params.clone(),
        slope,
        options: spec.options,
        nutrition: spec.nutrition,
    };
    let report = verify(&scaled, &dynamics, &pf.pmp)?;
    if let Some(out) = out {
        let doc = json!({
            "config": {
                "command": "verify",
                "trajectory": trajectory.display().to_string(),
                "course": course.map(|c| c.display().to_string()),
                "params": params.display().to_string(),
                "pmp": pf.pmp,
                "model": spec,
            },
            "provenance": pf.provenance,
            "report": report,
        });
        write_file(&out, to_json(&doc).as_bytes())?;
        println!("wrote {}", out.display());
    }
    let wrapped = Ok(report);
    print_pmp(&wrapped);
    check_outcome(true, "", &wrapped, true)
}

/// `flat-benchmark`: maximum distance on the flat with the benchmark
/// constants, followed by verification. Succeeds iff certified.
pub fn flat_benchmark(grid: usize, output_dir: &Path) -> Result<(), CliError> {
    let runner = RunnerProfile::reference();
    let nutrition = NutritionParams::canonical();
    let params = nondimensionalize(&runner, BENCH_SIGMA, BENCH_M, BENCH_HORIZON_S)?;
    let dynamics = Dynamics::flat(params, Some(nutrition));
    let solver = SolverOptions {
        grid_size: Some(grid),
        ..Default::default()
    };
    let pmp_options = PmpOptions::default();
    let solution = solve(&OcpProblem::max_distance(dynamics, solver.clone())?, None)?;
    let config = json!({
        "command": "flat-benchmark",
        "runner": runner,
        "nutrition": nutrition,
        "sigma": BENCH_SIGMA,
        "m_max": BENCH_M,
        "horizon_s": BENCH_HORIZON_S,
        "solver": solver,
        "pmp": pmp_options,
    });
    let provenance = Provenance {
        tool: TOOL.into(),
        sigma_source: "fixed".into(),
        sigma: SigmaBreakdown {
            sigma_hat: BENCH_SIGMA,
            f_d: 1.0,
            f_a: 1.0,
            sigma: BENCH_SIGMA,
            duration_s: BENCH_HORIZON_S,
            altitude_m: 0.0,
        },
        scaled: solution.dynamics.params.clone(),
    };
    let model = ModelSpec {
        params: solution.dynamics.params.clone(),
        nutrition: Some(nutrition),
        options: solution.dynamics.options,
        blend_width_m: 0.0,
        segment_m: crate::config::DEFAULT_SEGMENT_M,
    };
    let pmp = write_solution(output_dir, &config, &provenance, model, &pmp_options, &solution)?;
    let summary = json!({
        "config": config,
        "provenance": provenance,
        "solution": {
            "x1": solution.objective,
            "distance_m": solution.distance_m,
            "converged": solution.converged,
            "substeps": solution.substeps,
            "diagnostics": solution.kkt,
            "warnings": solution.warnings,
        },
        "pmp": pmp_summary(&pmp),
    });
    write_file(&output_dir.join("report.json"), to_json(&summary).as_bytes())?;
    println!(
        "flat benchmark, grid {grid}: x(1) = {:.6} ({:.1} m in {BENCH_HORIZON_S} s), {}",
        solution.objective,
        solution.distance_m,
        if solution.converged {
            "converged"
        } else {
            "not converged"
        }
    );
    print_pmp(&pmp);
    println!(
        "wrote report.json, trajectory.csv, trajectory_scaled.csv, params.json, pmp.json to {}",
        output_dir.display()
    );
    check_outcome(solution.converged, &solution.kkt.status, &pmp, true)
}
