//! Finish-time prediction on a course: σ from physiology, the slope profile
//! from terrain, and a minimum-time solve with horizontal distance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    nondimensionalize, DistanceMode, Dynamics, ModelError, ModelOptions, RunnerProfile, ScaledParams, SlopeProfile,
    Trajectory,
};
use crate::nutrition::NutritionParams;
use crate::ocp::{solve, KktSummary, OcpError, OcpProblem, OcpSolution, SolverOptions};
use crate::physiology::{sigma_available, PhysiologyError, SigmaBreakdown, SigmaInputs};
use crate::terrain::{CourseProfile, TerrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RaceError {
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Physiology(#[from] PhysiologyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] OcpError),
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

/// Pace assumed when neither a record nor an estimate is available [m/s].
const FALLBACK_SPEED: f64 = 4.0;
const FIXED_POINT_TOL_S: f64 = 10.0;
const FIXED_POINT_MAX: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaceOptions {
    /// Duration used for the duration fraction; defaults to the record.
    pub duration_estimate_s: Option<f64>,
    /// Use this σ [m²/s³] instead of the physiological estimate.
    pub sigma_override: Option<f64>,
    /// Re-evaluate σ at the predicted time until it moves by less than 10 s.
    pub fixed_point: bool,
    /// Width of the slope blend around segment boundaries [m].
    pub blend_width_m: f64,
    pub drag_on: bool,
    pub solver: SolverOptions,
}

impl Default for RaceOptions {
    fn default() -> Self {
        Self {
            duration_estimate_s: None,
            sigma_override: None,
            fixed_point: false,
            blend_width_m: 10.0,
            drag_on: false,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub index: usize,
    pub start_m: f64,
    pub end_m: f64,
    pub slope_rad: f64,
    /// Time at which the segment is entered [s].
    pub start_time_s: f64,
    pub duration_s: f64,
    pub mean_speed_m_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceReport {
    pub course_name: Option<String>,
    pub distance_m: f64,
    pub finish_time_s: f64,
    pub finish_hms: String,
    pub record_time_s: Option<f64>,
    /// `(T - record) / record`.
    pub relative_error: Option<f64>,
    pub sigma: SigmaBreakdown,
    /// `physiology` or `override`.
    pub sigma_source: String,
    /// Constants at the predicted horizon.
    pub params: ScaledParams,
    pub runner: RunnerProfile,
    pub nutrition: NutritionParams,
    pub options: RaceOptions,
    pub fixed_point_iterations: usize,
    pub converged: bool,
    pub diagnostics: KktSummary,
    pub warnings: Vec<String>,
    pub splits: Vec<Split>,
    /// Dimensional trajectory.
    pub trajectory: Trajectory,
    pub solution: OcpSolution,
}

/// Formats seconds as `h:mm:ss`, rounding to the nearest second.
pub fn format_hms(seconds: f64) -> String {
    let s = seconds.max(0.0).round() as u64;
    format!("{}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
}

/// Slope as a function of scaled horizontal distance.
pub fn course_slope(course: &CourseProfile, d_scale: f64, blend_width_m: f64) -> Result<SlopeProfile, RaceError> {
    let mut breaks = Vec::new();
    let mut angles = vec![course.slopes[0]];
    for i in 1..course.slopes.len() {
        if course.slopes[i] != course.slopes[i - 1] {
            breaks.push(course.boundaries[i] / d_scale);
            angles.push(course.slopes[i]);
        }
    }
    let shortest = course
        .boundaries
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let width = blend_width_m.min(0.5 * shortest) / d_scale;
    Ok(SlopeProfile::piecewise(breaks, angles, width)?)
}

fn time_at_distance(t: &Trajectory, x: f64) -> f64 {
    let xs: Vec<f64> = t.states.iter().map(|s| s.x).collect();
    let j = xs.partition_point(|&v| v < x).clamp(1, xs.len() - 1);
    let (x0, x1) = (xs[j - 1], xs[j]);
    if x1 <= x0 {
        return t.times[j];
    }
    let w = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
    t.times[j - 1] + w * (t.times[j] - t.times[j - 1])
}

/// Splits per course segment from a dimensional trajectory.
pub fn segment_splits(course: &CourseProfile, t: &Trajectory) -> Vec<Split> {
    let times: Vec<f64> = course.boundaries.iter().map(|&b| time_at_distance(t, b)).collect();
    (0..course.segment_count())
        .map(|i| {
            let (a, b) = (course.boundaries[i], course.boundaries[i + 1]);
            let duration_s = times[i + 1] - times[i];
            Split {
                index: i,
                start_m: a,
                end_m: b,
                slope_rad: course.slopes[i],
                start_time_s: times[i],
                duration_s,
                mean_speed_m_s: if duration_s > 0.0 {
                    (b - a) / duration_s
                } else {
                    f64::INFINITY
                },
            }
        })
        .collect()
}

/// Predicts the finish time on `course`.
pub fn predict_race(
    course: &CourseProfile,
    runner: &RunnerProfile,
    nutrition: &NutritionParams,
    options: &RaceOptions,
) -> Result<RaceReport, RaceError> {
    course.validate()?;
    let mut warnings = runner.validate()?;
    nutrition
        .validate()
        .map_err(|e| RaceError::InvalidOption(format!("nutrition: {e}")))?;
    if !(options.blend_width_m >= 0.0) {
        return Err(RaceError::InvalidOption("blend width must be nonnegative".into()));
    }
    let d = course.total_distance;
    let mut estimate = match options.duration_estimate_s.or(course.record_time_s) {
        Some(t) if t > 0.0 => t,
        Some(t) => {
            return Err(RaceError::InvalidOption(format!(
                "duration estimate must be positive, got {t}"
            )))
        }
        None => {
            warnings.push(format!(
                "no record or estimate given; assuming {FALLBACK_SPEED} m/s for σ"
            ));
            d / FALLBACK_SPEED
        }
    };
    let altitude_m = course.mean_altitude.max(0.0);
    let mut iterations = 0;
    loop {
        iterations += 1;
        let (sigma, sigma_source) = match options.sigma_override {
            Some(s) => (
                SigmaBreakdown {
                    sigma_hat: s,
                    f_d: 1.0,
                    f_a: 1.0,
                    sigma: s,
                    duration_s: estimate,
                    altitude_m,
                },
                "override",
            ),
            None => (
                sigma_available(&SigmaInputs {
                    vo2max: runner.vo2max,
                    duration_s: estimate,
                    altitude_m,
                })?,
                "physiology",
            ),
        };
        let params = nondimensionalize(runner, sigma.sigma, nutrition.m_max, estimate)?;
        let dynamics = Dynamics {
            slope: course_slope(course, params.d_scale, options.blend_width_m)?,
            params,
            options: ModelOptions {
                drag_on: options.drag_on,
                distance: DistanceMode::Horizontal,
            },
            nutrition: Some(*nutrition),
        };
        let problem = OcpProblem::min_time(dynamics, d, course.record_time_s, options.solver.clone())?;
        let solution = solve(&problem, None)?;
        let finish = solution.horizon_s;
        let again = options.fixed_point && (finish - estimate).abs() >= FIXED_POINT_TOL_S;
        if again && iterations < FIXED_POINT_MAX {
            estimate = finish;
            continue;
        }
        if again {
            warnings.push(format!(
                "σ fixed point did not settle within {FIXED_POINT_MAX} iterations"
            ));
        }
        warnings.extend(solution.warnings.iter().cloned());
        let trajectory = solution.trajectory.to_dimensional(&solution.dynamics.params)?;
        let splits = segment_splits(course, &trajectory);
        return Ok(RaceReport {
            course_name: course.name.clone(),
            distance_m: d,
            finish_time_s: finish,
            finish_hms: format_hms(finish),
            record_time_s: course.record_time_s,
            relative_error: course.record_time_s.map(|r| (finish - r) / r),
            sigma,
            sigma_source: sigma_source.into(),
            params: solution.dynamics.params.clone(),
            runner: runner.clone(),
            nutrition: *nutrition,
            options: options.clone(),
            fixed_point_iterations: iterations,
            converged: solution.converged,
            diagnostics: solution.kkt.clone(),
            warnings,
            splits,
            trajectory,
            solution,
        });
    }
}
