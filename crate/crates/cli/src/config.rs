//! Run configuration (TOML or JSON) and input loading.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use trailopt_core::model::RunnerProfile;
use trailopt_core::nutrition::NutritionParams;
use trailopt_core::pmp::PmpOptions;
use trailopt_core::race::RaceOptions;
use trailopt_core::terrain::{build_profile, parse_gpx, CourseProfile};

use crate::error::CliError;

pub const DEFAULT_SEGMENT_M: f64 = 150.0;

fn default_segment_m() -> f64 {
    DEFAULT_SEGMENT_M
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Configuration of a `predict` run. Relative paths are taken relative to
/// the directory of the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Runner profile file (TOML or JSON); the reference runner when absent.
    #[serde(default)]
    pub runner: Option<PathBuf>,
    /// GPX track or course profile JSON.
    pub course: PathBuf,
    /// Segment length used when the course is a GPX track [m].
    #[serde(default = "default_segment_m")]
    pub segment_m: f64,
    /// Route record [s]; overrides a record stored in the profile.
    #[serde(default)]
    pub record_time_s: Option<f64>,
    /// Oxidation parameters; the canonical refit when absent.
    #[serde(default)]
    pub nutrition: Option<NutritionParams>,
    #[serde(default)]
    pub race: RaceOptions,
    #[serde(default)]
    pub pmp: PmpOptions,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Deserialises `path` as JSON when it ends in `.json`, TOML otherwise.
pub fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = if has_extension(path, "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Input(format!(
            "{what} file {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if !(v.is_finite() && v > 0.0) {
        return Err(CliError::Input(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

impl RunConfig {
    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = read_structured(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.course = base.join(&cfg.course);
        cfg.runner = cfg.runner.map(|r| base.join(r));
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that referenced files exist and options lie in their
    /// documented ranges.
    pub fn validate(&self) -> Result<(), CliError> {
        require_file(&self.course, "course")?;
        if let Some(r) = &self.runner {
            require_file(r, "runner")?;
        }
        if !(100.0..=250.0).contains(&self.segment_m) {
            return Err(CliError::Input(format!(
                "segment_m must lie in [100, 250] m, got {}",
                self.segment_m
            )));
        }
        if let Some(t) = self.record_time_s {
            positive("record_time_s", t)?;
        }
        if let Some(n) = &self.nutrition {
            n.validate()?;
        }
        let r = &self.race;
        if let Some(t) = r.duration_estimate_s {
            positive("race.duration_estimate_s", t)?;
        }
        if let Some(s) = r.sigma_override {
            positive("race.sigma_override", s)?;
        }
        if !(r.blend_width_m >= 0.0 && r.blend_width_m.is_finite()) {
            return Err(CliError::Input(format!(
                "race.blend_width_m must be nonnegative, got {}",
                r.blend_width_m
            )));
        }
        let s = &r.solver;
        for (name, v) in [
            ("race.solver.tol", s.tol),
            ("race.solver.constr_tol", s.constr_tol),
            ("race.solver.compl_tol", s.compl_tol),
            ("race.solver.stiffness_per_step", s.stiffness_per_step),
        ] {
            positive(name, v)?;
        }
        if !(s.regularization >= 0.0 && s.regularization.is_finite()) {
            return Err(CliError::Input(format!(
                "race.solver.regularization must be nonnegative, got {}",
                s.regularization
            )));
        }
        if s.max_iter == 0 {
            return Err(CliError::Input("race.solver.max_iter must be positive".into()));
        }
        if s.grid_size.is_some_and(|g| g < 50) {
            return Err(CliError::Input("race.solver.grid_size must be at least 50".into()));
        }
        let p = &self.pmp;
        for (name, v) in [
            ("pmp.tol_f", p.tol_f),
            ("pmp.tol_e", p.tol_e),
            ("pmp.tol_psi_rel", p.tol_psi_rel),
            ("pmp.sign_tol", p.sign_tol),
            ("pmp.slackness_tol", p.slackness_tol),
            ("pmp.control_tol", p.control_tol),
            ("pmp.v_min", p.v_min),
            ("pmp.hamiltonian_tol", p.hamiltonian_tol),
        ] {
            positive(name, v)?;
        }
        Ok(())
    }

    pub fn runner_profile(&self) -> Result<RunnerProfile, CliError> {
        match &self.runner {
            Some(path) => read_structured(path),
            None => Ok(RunnerProfile::reference()),
        }
    }

    pub fn nutrition_params(&self) -> NutritionParams {
        self.nutrition.unwrap_or_else(NutritionParams::canonical)
    }

    /// The course with the configured record applied.
    pub fn course_profile(&self) -> Result<CourseProfile, CliError> {
        let course = load_course(&self.course, self.segment_m)?;
        Ok(match self.record_time_s {
            Some(t) => course.with_record(t),
            None => course,
        })
    }
}

/// Loads a GPX track (cut into `segment_m` segments) or a profile JSON.
/// Unnamed courses take the file stem as their name.
pub fn load_course(path: &Path, segment_m: f64) -> Result<CourseProfile, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let course = if has_extension(path, "gpx") {
        build_profile(&parse_gpx(&bytes)?, segment_m)?
    } else {
        let text = String::from_utf8(bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        CourseProfile::from_json(&text)?
    };
    Ok(match (&course.name, path.file_stem().and_then(|s| s.to_str())) {
        (None, Some(stem)) => course.with_name(stem),
        _ => course,
    })
}
