//! Generalised Keller dynamics for trail running.
//!
//! State is `(v, x, E, Q)`: velocity, distance, energy per unit mass and
//! fatigue. The control `f` is the propulsive force per unit mass. The model
//! is available in physical units and in the nondimensional form used by the
//! solver and the verifier, together with a fixed-step RK4 integrator and the
//! [`Trajectory`] container shared by every other module.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use trailopt_nlp::ad::Scalar;

use crate::nutrition::NutritionParams;

/// Gravitational acceleration [m/s²].
pub const G: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("integration produced a non-finite value at node {node}")]
    NonFinite { node: usize },
    #[error("flavor mismatch: expected {expected:?}, found {found:?}")]
    FlavorMismatch { expected: Flavor, found: Flavor },
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("trajectory I/O: {0}")]
    Io(String),
}

/// Dimensional runner physiology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunnerProfile {
    /// Body mass [kg].
    pub mass_kg: f64,
    /// Maximal oxygen uptake [ml/kg/min].
    pub vo2max: f64,
    /// Maximal propulsive force per unit mass F [m/s²].
    pub f_max: f64,
    /// Internal resistance time τ [s].
    pub tau_s: f64,
    /// Initial energy per unit mass E₀ [m²/s²].
    pub e0: f64,
    /// Fatigue proportionality K [1/s].
    pub k_fatigue: f64,
    /// Air-drag coefficient c [1/m].
    pub c_drag: f64,
    /// Energy per gram of oxidised carbohydrate ζ [J/g].
    pub zeta: f64,
}

impl RunnerProfile {
    /// Elite male reference runner.
    pub fn reference() -> Self {
        Self {
            mass_kg: 65.0,
            vo2max: 81.0,
            f_max: 6.7,
            tau_s: 0.67,
            e0: 2500.0,
            k_fatigue: 6e-5,
            c_drag: 3.75e-3,
            zeta: 1.6736e4,
        }
    }

    /// Checks positivity; returns non-fatal warnings (E₀ outside the usual
    /// range of 1400 to 2500 m²/s²).
    pub fn validate(&self) -> Result<Vec<String>, ModelError> {
        let fields = [
            ("mass_kg", self.mass_kg),
            ("vo2max", self.vo2max),
            ("f_max", self.f_max),
            ("tau_s", self.tau_s),
            ("e0", self.e0),
            ("k_fatigue", self.k_fatigue),
            ("c_drag", self.c_drag),
            ("zeta", self.zeta),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        let mut warnings = Vec::new();
        if !(1.4e3..=2.5e3).contains(&self.e0) {
            warnings.push(format!(
                "e0 = {} m²/s² is outside the typical range [1400, 2500]",
                self.e0
            ));
        }
        Ok(warnings)
    }

    /// Limit velocity on the flat without drag, F·τ [m/s].
    pub fn limit_velocity(&self) -> f64 {
        self.f_max * self.tau_s
    }
}

/// Nondimensional constants and the scales that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledParams {
    pub iota: f64,
    pub beta: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub chi: f64,
    pub phi: f64,
    pub omega: f64,
    /// Horizon T [s].
    pub t_scale_s: f64,
    /// F·τ [m/s].
    pub v_scale: f64,
    /// F·τ·T [m].
    pub d_scale: f64,
    /// K·F²·τ·T [m²/s³].
    pub q_scale: f64,
    /// E₀ [m²/s²].
    pub e_scale: f64,
    /// Maximal oxidation rate M [g/s].
    pub n_scale: f64,
    /// Force scale F [m/s²].
    pub f_scale: f64,
}

/// Computes the nondimensional constants for horizon `horizon_s`.
pub fn nondimensionalize(
    p: &RunnerProfile,
    sigma: f64,
    m_oxid_max: f64,
    horizon_s: f64,
) -> Result<ScaledParams, ModelError> {
    if !(horizon_s.is_finite() && horizon_s > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "horizon must be positive, got {horizon_s}"
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) || !(m_oxid_max.is_finite() && m_oxid_max > 0.0) {
        return Err(ModelError::InvalidParameter("sigma and M must be positive".into()));
    }
    p.validate()?;
    let (f, tau, t, e0) = (p.f_max, p.tau_s, horizon_s, p.e0);
    Ok(ScaledParams {
        iota: t / tau,
        beta: G * t / (f * tau),
        gamma: p.c_drag * t * f * tau,
        kappa: sigma * t / e0,
        chi: f * f * tau * t / e0,
        phi: p.zeta * m_oxid_max * t / (p.mass_kg * e0),
        omega: p.k_fatigue * f * f * tau * t * t / e0,
        t_scale_s: t,
        v_scale: f * tau,
        d_scale: f * tau * t,
        q_scale: p.k_fatigue * f * f * tau * t,
        e_scale: e0,
        n_scale: m_oxid_max,
        f_scale: f,
    })
}

impl ScaledParams {
    /// Energy supply σ implied by κ [m²/s³].
    pub fn sigma(&self) -> f64 {
        self.kappa * self.e_scale / self.t_scale_s
    }

    /// The same runner and supply over a different horizon.
    pub fn rescaled(&self, horizon_s: f64) -> ScaledParams {
        let r = horizon_s / self.t_scale_s;
        ScaledParams {
            iota: self.iota * r,
            beta: self.beta * r,
            gamma: self.gamma * r,
            kappa: self.kappa * r,
            chi: self.chi * r,
            phi: self.phi * r,
            omega: self.omega * r * r,
            t_scale_s: horizon_s,
            v_scale: self.v_scale,
            d_scale: self.d_scale * r,
            q_scale: self.q_scale * r,
            e_scale: self.e_scale,
            n_scale: self.n_scale,
            f_scale: self.f_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub v: f64,
    pub x: f64,
    pub e: f64,
    pub q: f64,
}

impl State {
    pub const fn new(v: f64, x: f64, e: f64, q: f64) -> Self {
        Self { v, x, e, q }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.v, self.x, self.e, self.q]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Scaled initial state: at rest, full energy, no fatigue.
    pub const fn initial_scaled() -> Self {
        Self::new(0.0, 0.0, 1.0, 0.0)
    }
}

/// How distance accumulates on a slope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// `x' = v`: distance along the running surface.
    #[default]
    AlongPath,
    /// `x' = v cos α`: horizontal distance, matching map-derived courses.
    Horizontal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub drag_on: bool,
    pub distance: DistanceMode,
}

fn check_domain(v: f64, alpha: f64) -> Result<(), ModelError> {
    if !(v >= 0.0) {
        return Err(ModelError::Domain(format!("velocity must be nonnegative, got {v}")));
    }
    if !(alpha.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(ModelError::Domain(format!("slope angle {alpha} outside (-pi/2, pi/2)")));
    }
    Ok(())
}

/// Physical right-hand side. `n_rate` is the oxidation rate [g/s].
#[allow(clippy::too_many_arguments)]
pub fn rhs_dimensional(
    s: &State,
    f: f64,
    alpha: f64,
    n_rate: f64,
    p: &RunnerProfile,
    sigma: f64,
    drag_on: bool,
) -> Result<State, ModelError> {
    check_domain(s.v, alpha)?;
    if !(0.0..=p.f_max).contains(&f) {
        return Err(ModelError::Domain(format!("force {f} outside [0, {}]", p.f_max)));
    }
    let drag = if drag_on { p.c_drag * s.v * s.v } else { 0.0 };
    Ok(State {
        v: f - G * alpha.sin() - s.v / p.tau_s - drag,
        x: s.v,
        e: sigma - f * s.v + p.zeta / p.mass_kg * n_rate - s.q,
        q: p.k_fatigue * f * s.v,
    })
}

/// Nondimensional right-hand side. `n_scaled` is N/M.
pub fn rhs_scaled(
    s: &State,
    f: f64,
    alpha: f64,
    n_scaled: f64,
    sp: &ScaledParams,
    drag_on: bool,
) -> Result<State, ModelError> {
    check_domain(s.v, alpha)?;
    if !(0.0..=1.0).contains(&f) {
        return Err(ModelError::Domain(format!("force {f} outside [0, 1]")));
    }
    let opts = ModelOptions {
        drag_on,
        distance: DistanceMode::AlongPath,
    };
    let d = rhs_generic(s.to_array(), f, alpha.sin(), alpha.cos(), n_scaled, sp, opts);
    Ok(State::from_array(d))
}

/// Scaled right-hand side over any [`Scalar`]; no domain checks.
#[inline]
pub fn rhs_generic<T: Scalar>(
    z: [T; 4],
    f: T,
    sin_a: T,
    cos_a: T,
    n_scaled: T,
    sp: &ScaledParams,
    opts: ModelOptions,
) -> [T; 4] {
    let [v, _, _, q] = z;
    let mut dv = (f - v) * sp.iota - sin_a * sp.beta;
    if opts.drag_on {
        dv = dv - v * v * sp.gamma;
    }
    let dx = match opts.distance {
        DistanceMode::AlongPath => v,
        DistanceMode::Horizontal => v * cos_a,
    };
    let fv = f * v;
    let de = n_scaled * sp.phi - fv * sp.chi - q * sp.omega + sp.kappa;
    [dv, dx, de, fv]
}

/// Slope angle as a function of scaled distance: piecewise constant, with an
/// optional quintic blend of half-width `width / 2` around each breakpoint so
/// the dynamics stay twice differentiable in `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeProfile {
    breaks: Vec<f64>,
    angles: Vec<f64>,
    width: f64,
}

impl SlopeProfile {
    pub fn flat() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(alpha: f64) -> Self {
        Self {
            breaks: Vec::new(),
            angles: vec![alpha],
            width: 0.0,
        }
    }

    /// `angles[i]` applies on `[breaks[i-1], breaks[i])`; `angles.len()` must
    /// be `breaks.len() + 1`.
    pub fn piecewise(breaks: Vec<f64>, angles: Vec<f64>, width: f64) -> Result<Self, ModelError> {
        if angles.len() != breaks.len() + 1 {
            return Err(ModelError::InvalidParameter(
                "need one more angle than breakpoints".into(),
            ));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ModelError::InvalidParameter("breakpoints must increase".into()));
        }
        if angles.iter().any(|a| !(a.abs() < std::f64::consts::FRAC_PI_2)) {
            return Err(ModelError::InvalidParameter(
                "slope angles must lie in (-pi/2, pi/2)".into(),
            ));
        }
        let min_gap = breaks.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if !(width >= 0.0) || width >= min_gap {
            return Err(ModelError::InvalidParameter(
                "blend width must be below the shortest segment".into(),
            ));
        }
        Ok(Self { breaks, angles, width })
    }

    pub fn is_flat(&self) -> bool {
        self.angles.iter().all(|&a| a == 0.0)
    }

    pub fn max_abs_angle(&self) -> f64 {
        self.angles.iter().fold(0.0f64, |m, a| m.max(a.abs()))
    }

    pub fn min_cos(&self) -> f64 {
        self.max_abs_angle().cos()
    }

    /// The same profile with distances multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> SlopeProfile {
        SlopeProfile {
            breaks: self.breaks.iter().map(|b| b * factor).collect(),
            angles: self.angles.clone(),
            width: self.width * factor,
        }
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Angle at `x`, differentiable through the blend zones.
    pub fn angle<T: Scalar>(&self, x: T) -> T {
        let xv = x.value();
        // first breakpoint strictly greater than x: x lies in segment i
        let i = self.breaks.partition_point(|&b| b <= xv);
        if self.width > 0.0 {
            let h = 0.5 * self.width;
            let near = [i.checked_sub(1), (i < self.breaks.len()).then_some(i)];
            for j in near.into_iter().flatten() {
                let b = self.breaks[j];
                if (xv - b).abs() < h {
                    let s = (x - b) / self.width + 0.5;
                    let s2 = s * s;
                    let w = s2 * s * (s * (s * 6.0 - 15.0) + 10.0);
                    let (a0, a1) = (self.angles[j], self.angles[j + 1]);
                    return w * (a1 - a0) + a0;
                }
            }
        }
        T::cst(self.angles[i])
    }
}

/// Complete scaled system: constants, slope, nutrition and options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub params: ScaledParams,
    pub options: ModelOptions,
    /// Slope as a function of scaled distance.
    pub slope: SlopeProfile,
    pub nutrition: Option<NutritionParams>,
}

impl Dynamics {
    pub fn flat(params: ScaledParams, nutrition: Option<NutritionParams>) -> Self {
        Self {
            params,
            options: ModelOptions::default(),
            slope: SlopeProfile::flat(),
            nutrition,
        }
    }

    /// The same system expressed in the scales of another horizon.
    pub fn rescaled(&self, horizon_s: f64) -> Dynamics {
        let params = self.params.rescaled(horizon_s);
        let factor = self.params.d_scale / params.d_scale;
        Dynamics {
            params,
            options: self.options,
            slope: self.slope.scaled(factor),
            nutrition: self.nutrition,
        }
    }

    /// Scaled oxidation rate N/M at physical time `t_phys` [s].
    pub fn n_scaled<T: Scalar>(&self, t_phys: T) -> T {
        match &self.nutrition {
            Some(n) => n.rate_generic(t_phys) / self.params.n_scale,
            None => T::cst(0.0),
        }
    }

    #[inline]
    pub fn rhs<T: Scalar>(&self, t_phys: T, z: [T; 4], f: T) -> [T; 4] {
        let a = self.slope.angle(z[1]);
        let n = self.n_scaled(t_phys);
        rhs_generic(z, f, a.sin(), a.cos(), n, &self.params, self.options)
    }

    /// Advances `z` over normalised time `[s0, s0 + h]` with constant control
    /// `f`. `dilation` is the ratio of the actual horizon to the horizon the
    /// constants were computed for, so physical time is
    /// `s · dilation · T`.
    pub fn step<T: Scalar>(&self, s0: f64, h: f64, dilation: T, z: [T; 4], f: T, substeps: usize) -> [T; 4] {
        self.step_with(s0, h, dilation, z, substeps, |_| f)
    }

    /// As [`Dynamics::step`], with the control given as a function of
    /// normalised time.
    pub fn step_with<T: Scalar, C: Fn(f64) -> T>(
        &self,
        s0: f64,
        h: f64,
        dilation: T,
        mut z: [T; 4],
        substeps: usize,
        control: C,
    ) -> [T; 4] {
        let m = substeps.max(1);
        let dt = h / m as f64;
        let ts = self.params.t_scale_s;
        let eval = |s: f64, z: [T; 4]| {
            let d = self.rhs(dilation * (s * ts), z, control(s));
            [d[0] * dilation, d[1] * dilation, d[2] * dilation, d[3] * dilation]
        };
        let axpy =
            |z: &[T; 4], k: &[T; 4], a: f64| [z[0] + k[0] * a, z[1] + k[1] * a, z[2] + k[2] * a, z[3] + k[3] * a];
        for j in 0..m {
            let s = s0 + j as f64 * dt;
            let k1 = eval(s, z);
            let k2 = eval(s + 0.5 * dt, axpy(&z, &k1, 0.5 * dt));
            let k3 = eval(s + 0.5 * dt, axpy(&z, &k2, 0.5 * dt));
            let k4 = eval(s + dt, axpy(&z, &k3, dt));
            for i in 0..4 {
                z[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0);
            }
        }
        z
    }
}

/// Control supplied to [`integrate`].
pub enum ControlInput<'a> {
    /// One value per grid interval, held constant across it.
    PiecewiseConstant(&'a [f64]),
    /// A function of normalised time, sampled at every RK4 stage.
    Function(&'a dyn Fn(f64) -> f64),
}

/// Classical RK4 over `grid` (normalised time), `substeps` steps per
/// interval. States are reported raw; the energy bounds are not enforced.
pub fn integrate(
    dynamics: &Dynamics,
    initial: State,
    control: ControlInput<'_>,
    grid: &[f64],
    substeps: usize,
) -> Result<Trajectory, ModelError> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ModelError::Malformed(
            "grid must be strictly increasing with at least two nodes".into(),
        ));
    }
    let n = grid.len();
    if let ControlInput::PiecewiseConstant(u) = &control {
        if u.len() != n - 1 {
            return Err(ModelError::Malformed(format!(
                "expected {} control values, got {}",
                n - 1,
                u.len()
            )));
        }
    }
    let mut z = initial.to_array();
    let mut states = vec![initial];
    let mut controls = Vec::with_capacity(n);
    for k in 0..n - 1 {
        let h = grid[k + 1] - grid[k];
        z = match &control {
            ControlInput::PiecewiseConstant(u) => {
                controls.push(u[k]);
                dynamics.step(grid[k], h, 1.0, z, u[k], substeps)
            }
            ControlInput::Function(c) => {
                controls.push(c(grid[k]));
                dynamics.step_with(grid[k], h, 1.0, z, substeps, c)
            }
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { node: k + 1 });
        }
        states.push(State::from_array(z));
    }
    controls.push(match &control {
        ControlInput::PiecewiseConstant(u) => u[n - 2],
        ControlInput::Function(c) => c(grid[n - 1]),
    });
    Ok(Trajectory::from_scaled_run(
        dynamics,
        grid.to_vec(),
        states,
        controls,
        1.0,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Dimensional,
    Nondimensional,
}

impl Flavor {
    fn as_str(self) -> &'static str {
        match self {
            Flavor::Dimensional => "dimensional",
            Flavor::Nondimensional => "nondimensional",
        }
    }
}

/// Sampled solution: states, control, oxidation rate and slope per node.
///
/// Dimensional trajectories use seconds, m/s, m, m²/s², m²/s³, m/s² and g/s;
/// nondimensional ones use the scales of the accompanying [`ScaledParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub flavor: Flavor,
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub controls: Vec<f64>,
    pub oxidation: Vec<f64>,
    pub slope: Vec<f64>,
}

const CSV_COLUMNS: [&str; 8] = ["t", "v", "x", "E", "Q", "f", "N", "alpha"];

impl Trajectory {
    /// Builds a scaled trajectory, filling in N/M and α from the dynamics.
    pub fn from_scaled_run(
        dynamics: &Dynamics,
        times: Vec<f64>,
        states: Vec<State>,
        controls: Vec<f64>,
        dilation: f64,
    ) -> Self {
        let ts = dynamics.params.t_scale_s * dilation;
        let oxidation = times.iter().map(|&t| dynamics.n_scaled(t * ts)).collect();
        let slope = states.iter().map(|s| dynamics.slope.angle(s.x)).collect();
        Self {
            flavor: Flavor::Nondimensional,
            times,
            states,
            controls,
            oxidation,
            slope,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> State {
        *self.states.last().expect("trajectory is never empty")
    }

    pub fn expect_flavor(&self, flavor: Flavor) -> Result<(), ModelError> {
        if self.flavor != flavor {
            return Err(ModelError::FlavorMismatch {
                expected: flavor,
                found: self.flavor,
            });
        }
        Ok(())
    }

    /// Checks lengths, grid monotonicity and the control range.
    pub fn validate(&self, f_max: f64) -> Result<(), ModelError> {
        let n = self.times.len();
        if n < 2 {
            return Err(ModelError::Malformed("need at least two nodes".into()));
        }
        if [
            self.states.len(),
            self.controls.len(),
            self.oxidation.len(),
            self.slope.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(ModelError::Malformed("column lengths differ".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ModelError::Malformed("time grid must be strictly increasing".into()));
        }
        let top = match self.flavor {
            Flavor::Dimensional => f_max,
            Flavor::Nondimensional => 1.0,
        };
        if let Some((k, f)) = self
            .controls
            .iter()
            .enumerate()
            .find(|(_, &f)| !(-1e-9..=top + 1e-9).contains(&f))
        {
            return Err(ModelError::Malformed(format!(
                "control {f} at node {k} outside [0, {top}]"
            )));
        }
        Ok(())
    }

    pub fn to_dimensional(&self, sp: &ScaledParams) -> Result<Trajectory, ModelError> {
        self.expect_flavor(Flavor::Nondimensional)?;
        Ok(Trajectory {
            flavor: Flavor::Dimensional,
            times: self.times.iter().map(|t| t * sp.t_scale_s).collect(),
            states: self
                .states
                .iter()
                .map(|s| State::new(s.v * sp.v_scale, s.x * sp.d_scale, s.e * sp.e_scale, s.q * sp.q_scale))
                .collect(),
            controls: self.controls.iter().map(|f| f * sp.f_scale).collect(),
            oxidation: self.oxidation.iter().map(|n| n * sp.n_scale).collect(),
            slope: self.slope.clone(),
        })
    }

    pub fn to_scaled(&self, sp: &ScaledParams) -> Result<Trajectory, ModelError> {
        self.expect_flavor(Flavor::Dimensional)?;
        Ok(Trajectory {
            flavor: Flavor::Nondimensional,
            times: self.times.iter().map(|t| t / sp.t_scale_s).collect(),
            states: self
                .states
                .iter()
                .map(|s| State::new(s.v / sp.v_scale, s.x / sp.d_scale, s.e / sp.e_scale, s.q / sp.q_scale))
                .collect(),
            controls: self.controls.iter().map(|f| f / sp.f_scale).collect(),
            oxidation: self.oxidation.iter().map(|n| n / sp.n_scale).collect(),
            slope: self.slope.clone(),
        })
    }

    /// CSV with a `# flavor: ...` header line and columns
    /// `t,v,x,E,Q,f,N,alpha`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), ModelError> {
        self.write_csv_annotated(out, &[])
    }

    /// As [`Trajectory::write_csv`], with one `# key: value` line per note
    /// after the flavor line. Values must not contain newlines.
    pub fn write_csv_annotated<W: std::io::Write>(
        &self,
        mut out: W,
        notes: &[(&str, String)],
    ) -> Result<(), ModelError> {
        let io = |e: std::io::Error| ModelError::Io(e.to_string());
        writeln!(out, "# flavor: {}", self.flavor.as_str()).map_err(io)?;
        for (key, value) in notes {
            if value.contains('\n') {
                return Err(ModelError::Io(format!("note '{key}' spans several lines")));
            }
            writeln!(out, "# {key}: {value}").map_err(io)?;
        }
        // `{}` prints the shortest representation that parses back exactly
        writeln!(out, "t,v,x,E,Q,f,N,alpha").map_err(io)?;
        for k in 0..self.len() {
            let s = self.states[k];
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.times[k], s.v, s.x, s.e, s.q, self.controls[k], self.oxidation[k], self.slope[k]
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_csv<R: std::io::BufRead>(mut input: R) -> Result<Trajectory, ModelError> {
        let mut first = String::new();
        input.read_line(&mut first).map_err(|e| ModelError::Io(e.to_string()))?;
        let flavor = match first.trim().strip_prefix("# flavor:").map(str::trim) {
            Some("dimensional") => Flavor::Dimensional,
            Some("nondimensional") => Flavor::Nondimensional,
            _ => return Err(ModelError::Malformed("missing '# flavor:' header".into())),
        };
        let mut traj = Trajectory {
            flavor,
            times: Vec::new(),
            states: Vec::new(),
            controls: Vec::new(),
            oxidation: Vec::new(),
            slope: Vec::new(),
        };
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let header = reader.headers().map_err(|e| ModelError::Malformed(e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != CSV_COLUMNS {
            return Err(ModelError::Malformed(format!(
                "expected columns {}",
                CSV_COLUMNS.join(",")
            )));
        }
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| ModelError::Malformed(e.to_string()))?;
            let mut vals = [0.0; 8];
            for (i, field) in rec.iter().enumerate().take(8) {
                vals[i] = field
                    .trim()
                    .parse()
                    .map_err(|_| ModelError::Malformed(format!("row {}: bad number '{field}'", line + 1)))?;
            }
            if rec.len() != 8 {
                return Err(ModelError::Malformed(format!("row {}: expected 8 fields", line + 1)));
            }
            let [t, v, x, e, q, f, n, a] = vals;
            traj.times.push(t);
            traj.states.push(State::new(v, x, e, q));
            traj.controls.push(f);
            traj.oxidation.push(n);
            traj.slope.push(a);
        }
        Ok(traj)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serialises")
    }

    pub fn from_json(s: &str) -> Result<Trajectory, ModelError> {
        serde_json::from_str(s).map_err(|e| ModelError::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn benchmark() -> ScaledParams {
        let p = RunnerProfile::reference();
        nondimensionalize(&p, 27.0, 0.0232, 5820.0).unwrap()
    }

    #[test]
    fn reference_constants_match_published_values() {
        let sp = benchmark();
        let want = [
            (sp.iota, 8686.57),
            (sp.beta, 12718.69),
            (sp.gamma, 97.97),
            (sp.kappa, 62.86),
            (sp.chi, 70.02),
            (sp.phi, 13.91),
            (sp.omega, 24.45),
        ];
        for (got, w) in want {
            assert!((got / w - 1.0).abs() < 1e-3, "{got} vs {w}");
        }
    }

    #[test]
    fn unit_scales_give_unit_constants() {
        let p = RunnerProfile {
            mass_kg: 1.0,
            vo2max: 1.0,
            f_max: 1.0,
            tau_s: 1.0,
            e0: 1.0,
            k_fatigue: 1.0,
            c_drag: 1.0,
            zeta: 1.0,
        };
        let sp = nondimensionalize(&p, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(sp.iota, 1.0);
        assert_eq!(sp.beta, G);
    }

    #[test]
    fn rejects_nonpositive_horizon() {
        let p = RunnerProfile::reference();
        assert!(nondimensionalize(&p, 27.0, 0.0232, 0.0).is_err());
    }

    #[test]
    fn e0_range_warning_is_not_an_error() {
        let mut p = RunnerProfile::reference();
        assert!(p.validate().unwrap().is_empty());
        p.e0 = 3000.0;
        assert_eq!(p.validate().unwrap().len(), 1);
    }

    #[test]
    fn stored_constants_match_definitions() {
        let p = RunnerProfile::reference();
        let (sigma, m, t) = (22.3, 0.0231, 4321.0);
        let sp = nondimensionalize(&p, sigma, m, t).unwrap();
        let (f, tau, e0) = (p.f_max, p.tau_s, p.e0);
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(sp.iota, t / tau) < 1e-12);
        assert!(rel(sp.beta, G * t / (f * tau)) < 1e-12);
        assert!(rel(sp.gamma, p.c_drag * t * f * tau) < 1e-12);
        assert!(rel(sp.kappa, sigma * t / e0) < 1e-12);
        assert!(rel(sp.chi, f * f * tau * t / e0) < 1e-12);
        assert!(rel(sp.phi, p.zeta * m * t / (p.mass_kg * e0)) < 1e-12);
        assert!(rel(sp.omega, p.k_fatigue * f * f * tau * t * t / e0) < 1e-12);
        let r = sp.rescaled(1234.0);
        let direct = nondimensionalize(&p, sigma, m, 1234.0).unwrap();
        assert!(rel(r.omega, direct.omega) < 1e-12 && rel(r.d_scale, direct.d_scale) < 1e-12);
    }

    #[test]
    fn rest_state_derivative() {
        let p = RunnerProfile::reference();
        let s = State::new(0.0, 0.0, p.e0, 0.0);
        let d = rhs_dimensional(&s, 0.0, 0.0, 0.0, &p, 25.0, false).unwrap();
        assert_eq!(d, State::new(0.0, 0.0, 25.0, 0.0));
        let sp = benchmark();
        let d = rhs_scaled(&State::new(0.0, 0.0, 0.5, 0.0), 0.0, 0.0, 0.0, &sp, false).unwrap();
        assert_eq!(d, State::new(0.0, 0.0, sp.kappa, 0.0));
    }

    #[test]
    fn limit_velocity_is_equilibrium() {
        let p = RunnerProfile::reference();
        let s = State::new(p.limit_velocity(), 0.0, p.e0, 0.0);
        let d = rhs_dimensional(&s, p.f_max, 0.0, 0.0, &p, 25.0, false).unwrap();
        assert!(d.v.abs() < 1e-14);
    }

    #[test]
    fn hand_evaluated_dimensional_rhs() {
        let p = RunnerProfile::reference();
        let s = State::new(3.0, 100.0, 2000.0, 5.0);
        let d = rhs_dimensional(&s, 4.0, 0.1, 0.01, &p, 22.0, false).unwrap();
        // 4 - 9.81 sin 0.1 - 3/0.67
        assert!((d.v - (4.0 - 0.979_366_3 - 4.477_611_94)).abs() < 1e-6);
        assert_eq!(d.x, 3.0);
        // 22 - 12 + 16736/65 * 0.01 - 5
        assert!((d.e - (22.0 - 12.0 + 2.574_769_23 - 5.0)).abs() < 1e-6);
        assert!((d.q - 6e-5 * 12.0).abs() < 1e-15);
    }

    #[test]
    fn scaled_energy_derivative_example() {
        let sp = benchmark();
        let d = rhs_scaled(&State::new(0.5, 0.1, 1.0, 0.01), 0.5, 0.0, 1.0, &sp, false).unwrap();
        let want = sp.kappa - sp.chi * 0.25 + sp.phi - sp.omega * 0.01;
        assert!((d.e - want).abs() < 1e-12 * want.abs());
    }

    #[test]
    fn domain_errors() {
        let p = RunnerProfile::reference();
        let s = State::new(-0.1, 0.0, p.e0, 0.0);
        assert!(matches!(
            rhs_dimensional(&s, 1.0, 0.0, 0.0, &p, 20.0, false),
            Err(ModelError::Domain(_))
        ));
        let s = State::new(1.0, 0.0, p.e0, 0.0);
        assert!(rhs_dimensional(&s, 1.0, 1.6, 0.0, &p, 20.0, false).is_err());
    }

    proptest! {
        #[test]
        fn scaled_and_dimensional_agree(
            v in 0.0f64..1.2, x in 0.0f64..1.0, e in 0.0f64..1.0, q in 0.0f64..2.0,
            f in 0.0f64..1.0, alpha in -0.6f64..0.6, n in 0.0f64..1.0, drag in any::<bool>(),
        ) {
            let p = RunnerProfile::reference();
            let sp = nondimensionalize(&p, 23.0, 0.0232, 5820.0).unwrap();
            let ds = rhs_scaled(&State::new(v, x, e, q), f, alpha, n, &sp, drag).unwrap();
            let phys = State::new(v * sp.v_scale, x * sp.d_scale, e * sp.e_scale, q * sp.q_scale);
            let dd = rhs_dimensional(&phys, f * p.f_max, alpha, n * sp.n_scale, &p, 23.0, drag).unwrap();
            // d(z/scale)/d(t/T) = T/scale · dz/dt
            let t = sp.t_scale_s;
            let back = [
                dd.v * t / sp.v_scale,
                dd.x * t / sp.d_scale,
                dd.e * t / sp.e_scale,
                dd.q * t / sp.q_scale,
            ];
            let mag = ds.to_array().iter().chain(back.iter()).fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in ds.to_array().iter().zip(back) {
                prop_assert!((a - b).abs() <= 1e-10 * mag);
            }
        }

        #[test]
        fn fatigue_never_decreases(u in proptest::collection::vec(0.0f64..1.0, 20)) {
            let dynm = Dynamics::flat(benchmark(), None);
            let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 2000.0).collect();
            let tr = integrate(&dynm, State::initial_scaled(), ControlInput::PiecewiseConstant(&u), &grid, 8).unwrap();
            for w in tr.states.windows(2) {
                prop_assert!(w[1].q >= w[0].q - 1e-15);
            }
        }
    }

    #[test]
    fn zero_control_leaves_runner_at_rest() {
        let sp = benchmark();
        let dynm = Dynamics::flat(sp.clone(), None);
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 * 1e-3).collect();
        let u = vec![0.0; 10];
        let tr = integrate(
            &dynm,
            State::initial_scaled(),
            ControlInput::PiecewiseConstant(&u),
            &grid,
            4,
        )
        .unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            assert_eq!((s.v, s.x, s.q), (0.0, 0.0, 0.0));
            assert!((s.e - (1.0 + sp.kappa * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_force_matches_closed_form_velocity() {
        let sp = benchmark();
        let dynm = Dynamics::flat(sp.clone(), None);
        let n = 400;
        let grid: Vec<f64> = (0..=n).map(|k| k as f64 * 2e-3 / n as f64).collect();
        let f = 0.8;
        let u = vec![f; n];
        let tr = integrate(
            &dynm,
            State::initial_scaled(),
            ControlInput::PiecewiseConstant(&u),
            &grid,
            4,
        )
        .unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            let want = f * (1.0 - (-sp.iota * t).exp());
            assert!((s.v - want).abs() < 1e-8, "t={t}: {} vs {want}", s.v);
        }
        assert!(tr.states.windows(2).all(|w| w[1].v >= w[0].v));
    }

    #[test]
    fn smoothed_slope_is_continuous_and_exact_away_from_breaks() {
        let sp = SlopeProfile::piecewise(vec![1.0, 2.0], vec![0.0, 0.2, -0.1], 0.1).unwrap();
        assert_eq!(sp.angle(0.5), 0.0);
        assert_eq!(sp.angle(1.5), 0.2);
        assert_eq!(sp.angle(2.5), -0.1);
        assert!((sp.angle(1.0) - 0.1).abs() < 1e-12);
        let mut prev = sp.angle(0.9);
        let mut x = 0.9;
        while x < 2.1 {
            x += 1e-4;
            let a = sp.angle(x);
            assert!((a - prev).abs() < 1e-2);
            prev = a;
        }
    }

    #[test]
    fn csv_and_json_round_trip_and_flavor_tag() {
        let sp = benchmark();
        let dynm = Dynamics::flat(sp.clone(), Some(NutritionParams::canonical()));
        let grid: Vec<f64> = (0..=5).map(|k| k as f64 * 1e-5).collect();
        let u = vec![0.5; 5];
        let tr = integrate(
            &dynm,
            State::initial_scaled(),
            ControlInput::PiecewiseConstant(&u),
            &grid,
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# flavor: nondimensional\nt,v,x,E,Q,f,N,alpha\n"));
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
        assert_eq!(Trajectory::from_json(&tr.to_json()).unwrap(), tr);

        let mut noted = Vec::new();
        tr.write_csv_annotated(&mut noted, &[("sigma", "27".into()), ("config", "{\"a\":1}".into())])
            .unwrap();
        assert!(String::from_utf8_lossy(&noted).contains("\n# sigma: 27\n# config: {\"a\":1}\nt,"));
        assert_eq!(Trajectory::read_csv(noted.as_slice()).unwrap(), tr);
        assert!(tr.write_csv_annotated(Vec::new(), &[("bad", "a\nb".into())]).is_err());

        let dim = tr.to_dimensional(&sp).unwrap();
        assert!(dim.to_dimensional(&sp).is_err());
        let again = dim.to_scaled(&sp).unwrap();
        for (a, b) in again.states.iter().zip(&tr.states) {
            assert!((a.v - b.v).abs() < 1e-12 && (a.e - b.e).abs() < 1e-12);
        }
    }

    #[test]
    fn integration_reports_non_finite_node() {
        let mut sp = benchmark();
        sp.iota = f64::INFINITY;
        let dynm = Dynamics::flat(sp, None);
        let u = [1.0, 1.0];
        let r = integrate(
            &dynm,
            State::initial_scaled(),
            ControlInput::PiecewiseConstant(&u),
            &[0.0, 0.1, 0.2],
            1,
        );
        assert_eq!(r.unwrap_err(), ModelError::NonFinite { node: 1 });
    }
}
