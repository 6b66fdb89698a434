//! Direct transcription of the pacing problems.
//!
//! The control is piecewise constant on a uniform grid of normalised time
//! and the dynamics are integrated exactly (up to RK4 error) across every
//! interval by multiple shooting. The resulting banded NLP is solved with
//! the interior-point method of [`trailopt_nlp`]. Two problems are covered:
//! maximise the distance covered in a fixed horizon, and minimise the time
//! needed to cover a fixed distance. For the latter the horizon ratio
//! `τ = T / T_ref` is an additional decision variable and the dynamics are
//! time-dilated by it.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use trailopt_nlp::ad::Hyper;
use trailopt_nlp::{InteriorPoint, IpmOptions, IpmResult, KktEntry, NlpError, NlpProblem};

use crate::model::{Dynamics, ModelError, State, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("NLP failure: {0}")]
    Nlp(#[from] NlpError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OcpMode {
    /// Maximise `x(1)` over the reference horizon.
    MaxDistance,
    /// Minimise the horizon needed to reach `distance_m`. The horizon ratio
    /// `T / T_ref` is confined to `[tau_lower, tau_upper]`.
    MinTime {
        distance_m: f64,
        tau_lower: f64,
        tau_upper: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Number of grid nodes; `None` picks a default from the problem size.
    pub grid_size: Option<usize>,
    /// Scaled KKT tolerance.
    pub tol: f64,
    /// Maximum constraint violation (dynamics defects) at termination.
    pub constr_tol: f64,
    /// Maximum complementarity product at termination.
    pub compl_tol: f64,
    pub max_iter: usize,
    /// Weight `ε` of the control-effort term `ε ∫ f² dt`.
    pub regularization: f64,
    /// On failure, retry with `ε` driven from 1e-6 down to 1e-10.
    pub continuation: bool,
    /// Largest `ι · Δs` per RK4 substep.
    pub stiffness_per_step: f64,
    pub print_level: u8,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grid_size: None,
            tol: 1e-8,
            constr_tol: 1e-9,
            compl_tol: 1e-13,
            max_iter: 1000,
            regularization: 0.0,
            continuation: true,
            stiffness_per_step: 1.0,
            print_level: 0,
        }
    }
}

const CONTINUATION: [f64; 3] = [1e-6, 1e-8, 1e-10];
/// Upper bound on `T / T_ref` relative to the duration hint.
const HORIZON_SLACK: f64 = 3.0;
/// Largest `λ·dt` kept on the real axis by RK4 (the exact limit is 2.785).
const RK4_STABLE_STEP: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpProblem {
    pub mode: OcpMode,
    /// Scaled system at the reference horizon `T_ref = params.t_scale_s`.
    pub dynamics: Dynamics,
    pub grid_size: usize,
    /// Number of consecutive intervals forced to share one control value.
    pub control_block: usize,
    pub options: SolverOptions,
}

impl OcpProblem {
    pub fn max_distance(dynamics: Dynamics, options: SolverOptions) -> Result<Self, OcpError> {
        let p = Self {
            mode: OcpMode::MaxDistance,
            dynamics,
            grid_size: options.grid_size.unwrap_or(400),
            control_block: 1,
            options,
        };
        p.validate()?;
        Ok(p)
    }

    /// Minimum-time problem over `distance_m`. The horizon ratio is bounded
    /// below by running the whole course at the terminal velocity of the
    /// steepest descent and above by three times `upper_hint_s` (or the
    /// reference horizon).
    pub fn min_time(
        dynamics: Dynamics,
        distance_m: f64,
        upper_hint_s: Option<f64>,
        options: SolverOptions,
    ) -> Result<Self, OcpError> {
        if !(distance_m.is_finite() && distance_m > 0.0) {
            return Err(OcpError::InvalidProblem(format!(
                "distance must be positive, got {distance_m}"
            )));
        }
        let sp = &dynamics.params;
        let steepest_descent = dynamics.slope.angles().iter().fold(0.0f64, |m, &a| m.max(-a.sin()));
        let g_over_f = sp.beta / sp.iota;
        let top_speed = sp.v_scale * (1.0 + g_over_f * steepest_descent);
        let t_ref = sp.t_scale_s;
        let tau_lower = distance_m / top_speed / t_ref;
        let tau_upper = HORIZON_SLACK * upper_hint_s.unwrap_or(t_ref).max(t_ref) / t_ref;
        let default_grid = (distance_m / 50.0).round().clamp(400.0, 2000.0) as usize;
        let p = Self {
            mode: OcpMode::MinTime {
                distance_m,
                tau_lower,
                tau_upper,
            },
            dynamics,
            grid_size: options.grid_size.unwrap_or(default_grid),
            control_block: 1,
            options,
        };
        p.validate()?;
        Ok(p)
    }

    /// Forces the control to be constant over blocks of `block` intervals.
    pub fn with_control_block(mut self, block: usize) -> Result<Self, OcpError> {
        self.control_block = block;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        if self.grid_size < 50 {
            return Err(OcpError::InvalidProblem(format!(
                "grid needs at least 50 nodes, got {}",
                self.grid_size
            )));
        }
        if self.control_block == 0 || !(self.grid_size - 1).is_multiple_of(self.control_block) {
            return Err(OcpError::InvalidProblem(format!(
                "control block {} does not divide {} intervals",
                self.control_block,
                self.grid_size - 1
            )));
        }
        let o = &self.options;
        if !(o.tol > 0.0 && o.constr_tol > 0.0 && o.compl_tol > 0.0 && o.max_iter > 0) {
            return Err(OcpError::InvalidProblem(
                "tolerances and max_iter must be positive".into(),
            ));
        }
        if !(o.regularization >= 0.0 && o.stiffness_per_step > 0.0) {
            return Err(OcpError::InvalidProblem("regularization must be nonnegative".into()));
        }
        if let OcpMode::MinTime {
            distance_m,
            tau_lower,
            tau_upper,
        } = self.mode
        {
            if !(distance_m > 0.0 && tau_lower > 0.0 && tau_upper > tau_lower) {
                return Err(OcpError::InvalidProblem(
                    "need 0 < tau_lower < tau_upper and a positive distance".into(),
                ));
            }
        }
        Ok(())
    }

    /// RK4 substeps per interval: `stiffness_per_step` sets the accuracy at
    /// the reference horizon, and the count is raised if needed so the
    /// integration stays stable up to the largest admissible horizon.
    pub fn substeps(&self) -> usize {
        let h = 1.0 / (self.grid_size - 1) as f64;
        let stiff = self.dynamics.params.iota * h;
        let tau_max = match self.mode {
            OcpMode::MaxDistance => 1.0,
            OcpMode::MinTime { tau_upper, .. } => tau_upper,
        };
        let accuracy = stiff / self.options.stiffness_per_step;
        let stability = stiff * tau_max / RK4_STABLE_STEP;
        accuracy.max(stability).ceil().max(1.0) as usize
    }

    fn target_scaled(&self) -> Option<f64> {
        match self.mode {
            OcpMode::MaxDistance => None,
            OcpMode::MinTime { distance_m, .. } => Some(distance_m / self.dynamics.params.d_scale),
        }
    }
}

/// Energy surplus `E(t) - 1` under full force from rest on the starting
/// slope, ignoring fatigue and drag (both only lower `E`).
fn full_force_surplus(d: &Dynamics, t: f64) -> f64 {
    let sp = &d.params;
    let n0 = d.n_scaled(0.0);
    let s = (sp.beta / sp.iota * d.slope.angle(0.0).sin()).clamp(-1.0, 0.999);
    let decay = (1.0 - (-sp.iota * t).exp()) / sp.iota;
    (sp.kappa + sp.phi * n0) * t - sp.chi * (1.0 - s) * (t - decay)
}

struct Transcription<'a> {
    problem: &'a OcpProblem,
    n: usize,
    h: f64,
    substeps: usize,
    has_tau: bool,
    /// Variables per stage: control, optional τ, next state.
    sv: usize,
    z0: [f64; 4],
    e_upper: Vec<f64>,
    tau_bounds: (f64, f64),
    link: Vec<Option<usize>>,
    hold: Vec<Option<usize>>,
    defect: Vec<usize>,
    terminal: Option<(usize, f64)>,
    m: usize,
    reg: f64,
}

impl<'a> Transcription<'a> {
    fn new(problem: &'a OcpProblem, reg: f64) -> Self {
        let n = problem.grid_size;
        let h = 1.0 / (n - 1) as f64;
        let (has_tau, tau_bounds) = match problem.mode {
            OcpMode::MaxDistance => (false, (1.0, 1.0)),
            OcpMode::MinTime {
                tau_lower, tau_upper, ..
            } => (true, (tau_lower, tau_upper)),
        };
        let sv = 5 + has_tau as usize;
        // the shortest admissible horizon puts every node earliest, where the
        // start-up surplus is largest
        let e_upper = (0..n)
            .map(|j| {
                let t = j as f64 * h * tau_bounds.0;
                if full_force_surplus(&problem.dynamics, t) > 0.0 {
                    f64::INFINITY
                } else {
                    1.0
                }
            })
            .collect();
        let mut m = 0;
        let mut link = Vec::with_capacity(n - 1);
        let mut hold = Vec::with_capacity(n - 1);
        let mut defect = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let mut next = |cond: bool| {
                cond.then(|| {
                    m += 1;
                    m - 1
                })
            };
            link.push(next(has_tau && k > 0));
            hold.push(next(k % problem.control_block != 0));
            defect.push(m);
            m += 4;
        }
        let terminal = problem.target_scaled().map(|x| {
            m += 1;
            (m - 1, x)
        });
        Self {
            problem,
            n,
            h,
            substeps: problem.substeps(),
            has_tau,
            sv,
            z0: State::initial_scaled().to_array(),
            e_upper,
            tau_bounds,
            link,
            hold,
            defect,
            terminal,
            m,
            reg,
        }
    }

    fn u_idx(&self, k: usize) -> usize {
        k * self.sv
    }

    fn tau_idx(&self, k: usize) -> usize {
        k * self.sv + 1
    }

    /// Index of state component `i` at node `j >= 1`.
    fn z_idx(&self, j: usize, i: usize) -> usize {
        (j - 1) * self.sv + 1 + self.has_tau as usize + i
    }

    fn node(&self, x: &[f64], j: usize) -> [f64; 4] {
        if j == 0 {
            self.z0
        } else {
            std::array::from_fn(|i| x[self.z_idx(j, i)])
        }
    }

    fn tau(&self, x: &[f64], k: usize) -> f64 {
        if self.has_tau {
            x[self.tau_idx(k)]
        } else {
            1.0
        }
    }

    /// Global indices of the stage inputs `(v, x, E, Q, u, τ)` that are
    /// variables, with their seed positions, in increasing global order.
    fn stage_inputs(&self, k: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(6);
        if k > 0 {
            v.extend((0..4).map(|i| (self.z_idx(k, i), i)));
        }
        v.push((self.u_idx(k), 4));
        if self.has_tau {
            v.push((self.tau_idx(k), 5));
        }
        v
    }

    fn propagate(&self, x: &[f64], k: usize) -> [f64; 4] {
        let d = &self.problem.dynamics;
        d.step(
            k as f64 * self.h,
            self.h,
            self.tau(x, k),
            self.node(x, k),
            x[self.u_idx(k)],
            self.substeps,
        )
    }

    fn warm_vector(&self, guess: &Guess) -> Vec<f64> {
        let mut x = vec![0.0; self.num_vars()];
        for k in 0..self.n - 1 {
            x[self.u_idx(k)] = guess.controls[k];
            if self.has_tau {
                x[self.tau_idx(k)] = guess.tau.clamp(self.tau_bounds.0, self.tau_bounds.1);
            }
            for i in 0..4 {
                x[self.z_idx(k + 1, i)] = guess.states[k + 1][i];
            }
        }
        x
    }
}

impl NlpProblem for Transcription<'_> {
    fn num_vars(&self) -> usize {
        (self.n - 1) * self.sv
    }

    fn num_constraints(&self) -> usize {
        self.m
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let nv = self.num_vars();
        let mut lo = vec![f64::NEG_INFINITY; nv];
        let mut hi = vec![f64::INFINITY; nv];
        for k in 0..self.n - 1 {
            lo[self.u_idx(k)] = 0.0;
            hi[self.u_idx(k)] = 1.0;
            if self.has_tau {
                lo[self.tau_idx(k)] = self.tau_bounds.0;
                hi[self.tau_idx(k)] = self.tau_bounds.1;
            }
            lo[self.z_idx(k + 1, 0)] = 0.0;
            lo[self.z_idx(k + 1, 2)] = 0.0;
            hi[self.z_idx(k + 1, 2)] = self.e_upper[k + 1];
        }
        (lo, hi)
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let effort: f64 = (0..self.n - 1).map(|k| x[self.u_idx(k)].powi(2)).sum::<f64>() * self.h * self.reg;
        match self.problem.mode {
            OcpMode::MaxDistance => -x[self.z_idx(self.n - 1, 1)] + effort,
            OcpMode::MinTime { .. } => x[self.tau_idx(0)] + effort,
        }
    }

    fn constraints(&self, x: &[f64], c: &mut [f64]) {
        for k in 0..self.n - 1 {
            if let Some(r) = self.link[k] {
                c[r] = x[self.tau_idx(k)] - x[self.tau_idx(k - 1)];
            }
            if let Some(r) = self.hold[k] {
                c[r] = x[self.u_idx(k)] - x[self.u_idx(k - 1)];
            }
            let next = self.propagate(x, k);
            for i in 0..4 {
                c[self.defect[k] + i] = x[self.z_idx(k + 1, i)] - next[i];
            }
        }
        if let Some((r, target)) = self.terminal {
            c[r] = x[self.z_idx(self.n - 1, 1)] - target;
        }
    }

    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        let mut s = Vec::new();
        for k in 0..self.n - 1 {
            if let Some(r) = self.link[k] {
                s.push((r, self.tau_idx(k)));
                s.push((r, self.tau_idx(k - 1)));
            }
            if let Some(r) = self.hold[k] {
                s.push((r, self.u_idx(k)));
                s.push((r, self.u_idx(k - 1)));
            }
            let inputs = self.stage_inputs(k);
            for i in 0..4 {
                let r = self.defect[k] + i;
                s.push((r, self.z_idx(k + 1, i)));
                s.extend(inputs.iter().map(|&(g, _)| (r, g)));
            }
        }
        if let Some((r, _)) = self.terminal {
            s.push((r, self.z_idx(self.n - 1, 1)));
        }
        s
    }

    fn hessian_structure(&self) -> Vec<(usize, usize)> {
        let mut s = Vec::new();
        for k in 0..self.n - 1 {
            let inputs = self.stage_inputs(k);
            for a in 0..inputs.len() {
                for b in 0..=a {
                    s.push((inputs[a].0, inputs[b].0));
                }
            }
        }
        s
    }

    fn derivatives(&self, x: &[f64], lambda: &[f64], grad: &mut [f64], jac: &mut [f64], hess: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self.problem.mode {
            OcpMode::MaxDistance => grad[self.z_idx(self.n - 1, 1)] = -1.0,
            OcpMode::MinTime { .. } => grad[self.tau_idx(0)] = 1.0,
        }
        let d = &self.problem.dynamics;
        let (mut jc, mut hc) = (0, 0);
        for k in 0..self.n - 1 {
            let u = x[self.u_idx(k)];
            grad[self.u_idx(k)] += 2.0 * self.reg * self.h * u;
            for _ in self.link[k].iter().chain(self.hold[k].iter()) {
                jac[jc] = 1.0;
                jac[jc + 1] = -1.0;
                jc += 2;
            }
            let z = self.node(x, k);
            let zh: [Hyper<6>; 4] = std::array::from_fn(|i| Hyper::seed(z[i], i));
            let uh = Hyper::seed(u, 4);
            let th = Hyper::seed(self.tau(x, k), 5);
            let out = d.step(k as f64 * self.h, self.h, th, zh, uh, self.substeps);
            let inputs = self.stage_inputs(k);
            for o in &out {
                jac[jc] = 1.0;
                jc += 1;
                for &(_, sd) in &inputs {
                    jac[jc] = -o.g[sd];
                    jc += 1;
                }
            }
            let y: [f64; 4] = std::array::from_fn(|i| lambda[self.defect[k] + i]);
            for a in 0..inputs.len() {
                for b in 0..=a {
                    let (sa, sb) = (inputs[a].1, inputs[b].1);
                    let mut v = -(0..4).map(|i| y[i] * out[i].h[sa][sb]).sum::<f64>();
                    if sa == 4 && sb == 4 {
                        v += 2.0 * self.reg * self.h;
                    }
                    hess[hc] = v;
                    hc += 1;
                }
            }
        }
        if self.terminal.is_some() {
            jac[jc] = 1.0;
        }
    }

    fn kkt_ordering(&self) -> Vec<KktEntry> {
        let mut o = Vec::with_capacity(self.num_vars() + self.m);
        for k in 0..self.n - 1 {
            o.push(KktEntry::Var(self.u_idx(k)));
            if self.has_tau {
                o.push(KktEntry::Var(self.tau_idx(k)));
            }
            o.extend(self.link[k].map(KktEntry::Con));
            o.extend(self.hold[k].map(KktEntry::Con));
            o.extend((0..4).map(|i| KktEntry::Con(self.defect[k] + i)));
            o.extend((0..4).map(|i| KktEntry::Var(self.z_idx(k + 1, i))));
        }
        if let Some((r, _)) = self.terminal {
            o.push(KktEntry::Con(r));
        }
        o
    }
}

/// Starting point on the solver grid, in reference scales.
struct Guess {
    controls: Vec<f64>,
    states: Vec<[f64; 4]>,
    tau: f64,
}

impl Guess {
    /// Resamples a reference-scaled trajectory whose times run from 0 to
    /// the horizon ratio onto `n` uniform nodes.
    fn from_trajectory(t: &Trajectory, n: usize) -> Result<Self, OcpError> {
        t.validate(1.0)?;
        let tau = *t.times.last().expect("validated");
        let s: Vec<f64> = t.times.iter().map(|x| x / tau).collect();
        let sample = |q: f64, col: &dyn Fn(usize) -> f64| {
            let j = s.partition_point(|&v| v <= q).clamp(1, s.len() - 1);
            let w = ((q - s[j - 1]) / (s[j] - s[j - 1])).clamp(0.0, 1.0);
            col(j - 1) * (1.0 - w) + col(j) * w
        };
        let h = 1.0 / (n - 1) as f64;
        let states = (0..n)
            .map(|k| {
                let q = k as f64 * h;
                std::array::from_fn(|i| sample(q, &|j| t.states[j].to_array()[i]))
            })
            .collect();
        let controls = (0..n - 1)
            .map(|k| sample((k as f64 + 0.5) * h, &|j| t.controls[j]).clamp(0.0, 1.0))
            .collect();
        Ok(Self { controls, states, tau })
    }
}

/// Force balancing the aerobic supply on slope `α`: the steady state of
/// `f (f - s) = κ / χ` with `s = (β / ι) sin α`, capped at full force.
fn steady_force(d: &Dynamics, alpha: f64) -> f64 {
    let sp = &d.params;
    let s = sp.beta / sp.iota * alpha.sin();
    let p = sp.kappa / sp.chi;
    let f = 0.5 * (s + (s * s + 4.0 * p).sqrt());
    f.max(s + 0.05).clamp(0.0, 1.0)
}

/// States, controls and the time reached by a constant-pace simulation.
type PaceRun = (Vec<[f64; 4]>, Vec<f64>, f64);

/// Feasible-ish starting trajectory: hold the supply-balancing force at
/// every node. For the minimum-time problem the horizon ratio is the time at
/// which this pace reaches the target distance. Times are in units of the
/// reference horizon.
pub fn warm_start_from_constant_pace(problem: &OcpProblem) -> Result<Trajectory, OcpError> {
    problem.validate()?;
    let d = &problem.dynamics;
    let n = problem.grid_size;
    let h = 1.0 / (n - 1) as f64;
    let m = problem.substeps();
    let simulate = |tau: f64, until: Option<f64>| -> Result<PaceRun, OcpError> {
        let mut z = State::initial_scaled().to_array();
        let mut states = vec![z];
        let mut controls = Vec::with_capacity(n);
        for k in 0..n - 1 {
            let f = steady_force(d, d.slope.angle(z[1]));
            let next = d.step(k as f64 * h, h, tau, z, f, m);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { node: k + 1 }.into());
            }
            controls.push(f);
            if let Some(target) = until {
                if next[1] >= target {
                    let w = (target - z[1]) / (next[1] - z[1]);
                    return Ok((states, controls, (k as f64 + w) * h * tau));
                }
            }
            z = next;
            states.push(z);
        }
        controls.push(*controls.last().expect("n >= 2"));
        Ok((states, controls, tau))
    };
    let (states, controls, tau) = match problem.mode {
        OcpMode::MaxDistance => simulate(1.0, None)?,
        OcpMode::MinTime {
            tau_lower, tau_upper, ..
        } => {
            let target = problem.target_scaled().expect("min-time has a target");
            let (_, _, hit) = simulate(tau_upper, Some(target))?;
            let tau = hit.clamp(tau_lower, tau_upper);
            simulate(tau, None)?
        }
    };
    let times = (0..n).map(|k| k as f64 * h * tau).collect();
    let states = states.into_iter().map(State::from_array).collect();
    Ok(Trajectory::from_scaled_run(d, times, states, controls, 1.0))
}

/// Solver diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktSummary {
    pub status: String,
    pub iterations: usize,
    pub stationarity: f64,
    pub constraint_violation: f64,
    pub complementarity: f64,
    /// Largest dynamics defect.
    pub dynamics_residual: f64,
    /// Largest violation of `0 <= f <= 1` or `0 <= E <= 1` (scaled).
    pub bound_violation: f64,
    /// Distance shortfall at the end of a minimum-time solve [m].
    pub endpoint_error_m: f64,
    /// Largest equality multiplier; huge values flag an infeasible endpoint.
    pub max_multiplier: f64,
    pub regularization: f64,
    /// Number of NLP solves, including continuation steps.
    pub attempts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub mode: OcpMode,
    /// Scaled at the optimal horizon, normalised time in `[0, 1]`.
    pub trajectory: Trajectory,
    /// The system at the optimal horizon; with `controls` and `substeps` it
    /// reproduces `trajectory` exactly.
    pub dynamics: Dynamics,
    /// One control value per grid interval.
    pub controls: Vec<f64>,
    pub substeps: usize,
    pub horizon_s: f64,
    pub distance_m: f64,
    /// `x(1)` in reference scales for maximum distance, the horizon ratio
    /// `T / T_ref` for minimum time.
    pub objective: f64,
    pub kkt: KktSummary,
    pub converged: bool,
    pub warnings: Vec<String>,
}

const MULTIPLIER_BLOWUP: f64 = 1e8;

fn run_ipm(t: &Transcription<'_>, x0: Vec<f64>) -> Result<IpmResult, OcpError> {
    let o = &t.problem.options;
    let opts = IpmOptions {
        tol: o.tol,
        constr_tol: o.constr_tol,
        compl_tol: o.compl_tol,
        max_iter: o.max_iter,
        print_level: o.print_level,
        ..IpmOptions::default()
    };
    Ok(InteriorPoint::new(t, opts)?.solve_from(x0)?)
}

/// Solves the problem from `initial_guess` (a reference-scaled trajectory
/// whose times run from 0 to the guessed horizon ratio) or from
/// [`warm_start_from_constant_pace`].
pub fn solve(problem: &OcpProblem, initial_guess: Option<&Trajectory>) -> Result<OcpSolution, OcpError> {
    problem.validate()?;
    let guess = match initial_guess {
        Some(t) => Guess::from_trajectory(t, problem.grid_size)?,
        None => Guess::from_trajectory(&warm_start_from_constant_pace(problem)?, problem.grid_size)?,
    };
    let base = Transcription::new(problem, problem.options.regularization);
    let x0 = base.warm_vector(&guess);
    let mut result = run_ipm(&base, x0.clone())?;
    let mut reg = problem.options.regularization;
    let mut attempts = 1;
    let mut warnings = Vec::new();
    if !result.converged() && problem.options.continuation && reg < CONTINUATION[0] {
        warnings.push(format!(
            "plain solve ended with {:?}; continuing on the regularisation",
            result.status
        ));
        let mut x = x0;
        for &eps in &CONTINUATION {
            let t = Transcription::new(problem, eps);
            result = run_ipm(&t, x)?;
            x = result.x.clone();
            reg = eps;
            attempts += 1;
        }
    }
    let t = Transcription::new(problem, reg);
    Ok(assemble(&t, &result, reg, attempts, warnings))
}

fn assemble(t: &Transcription<'_>, r: &IpmResult, reg: f64, attempts: usize, mut warnings: Vec<String>) -> OcpSolution {
    let p = t.problem;
    let x = &r.x;
    let n = t.n;
    let tau = t.tau(x, 0);
    let ref_params = &p.dynamics.params;
    let horizon_s = tau * ref_params.t_scale_s;
    let dynamics = p.dynamics.rescaled(horizon_s);

    let mut c = vec![0.0; t.m];
    t.constraints(x, &mut c);
    let dynamics_residual = t
        .defect
        .iter()
        .flat_map(|&r| c[r..r + 4].iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let controls: Vec<f64> = (0..n - 1).map(|k| x[t.u_idx(k)]).collect();
    let states: Vec<State> = (0..n)
        .map(|j| {
            let z = t.node(x, j);
            State::new(z[0], z[1] / tau, z[2], z[3] / tau)
        })
        .collect();
    let mut bound_violation = controls.iter().fold(0.0f64, |m, &u| m.max(-u).max(u - 1.0));
    for (j, s) in states.iter().enumerate() {
        let cap = t.e_upper[j];
        bound_violation = bound_violation
            .max(-s.e)
            .max(if cap.is_finite() { s.e - cap } else { 0.0 });
    }
    let x_end_ref = t.node(x, n - 1)[1];
    let endpoint_error_m = t
        .terminal
        .map_or(0.0, |(_, target)| (target - x_end_ref) * ref_params.d_scale);
    let max_multiplier = r.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_multiplier > MULTIPLIER_BLOWUP {
        warnings.push(format!(
            "multipliers reach {max_multiplier:.3e}: the target is likely unreachable within the horizon bounds"
        ));
    }
    if let OcpMode::MinTime { tau_upper, .. } = p.mode {
        if tau > tau_upper * (1.0 - 1e-6) {
            warnings.push("horizon ratio sits at its upper bound".into());
        }
    }
    let mut ctrl_nodes = controls.clone();
    ctrl_nodes.push(*controls.last().expect("n >= 2"));
    let times = (0..n).map(|k| k as f64 * t.h).collect();
    let trajectory = Trajectory::from_scaled_run(&dynamics, times, states, ctrl_nodes, 1.0);
    let converged = r.converged()
        && dynamics_residual <= 1e-6
        && bound_violation <= 1e-6
        && endpoint_error_m.abs() <= 1e-6 * ref_params.d_scale;
    let kkt = KktSummary {
        status: format!("{:?}", r.status),
        iterations: r.iterations,
        stationarity: r.kkt.stationarity,
        constraint_violation: r.kkt.constraint_violation,
        complementarity: r.kkt.complementarity,
        dynamics_residual,
        bound_violation,
        endpoint_error_m,
        max_multiplier,
        regularization: reg,
        attempts,
    };
    OcpSolution {
        mode: p.mode,
        distance_m: x_end_ref * ref_params.d_scale,
        objective: match p.mode {
            OcpMode::MaxDistance => x_end_ref,
            OcpMode::MinTime { .. } => tau,
        },
        trajectory,
        dynamics,
        controls,
        substeps: t.substeps,
        horizon_s,
        kkt,
        converged,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{nondimensionalize, RunnerProfile};

    fn reference_dynamics(e0: f64) -> Dynamics {
        let mut r = RunnerProfile::reference();
        r.e0 = e0;
        Dynamics::flat(nondimensionalize(&r, 27.0, 2.319_64e-2, 5820.0).unwrap(), None)
    }

    #[test]
    fn transcription_derivatives_match_differences() {
        let mut d = reference_dynamics(2500.0);
        d.slope = crate::model::SlopeProfile::piecewise(vec![0.3, 0.6], vec![0.05, -0.08, 0.02], 0.01).unwrap();
        let opts = SolverOptions {
            grid_size: Some(51),
            regularization: 1e-3,
            ..SolverOptions::default()
        };
        let p = OcpProblem::min_time(d, 30_000.0, Some(7000.0), opts).unwrap();
        let t = Transcription::new(&p, 1e-3);
        let guess = Guess::from_trajectory(&warm_start_from_constant_pace(&p).unwrap(), 51).unwrap();
        let mut x = t.warm_vector(&guess);
        for (i, v) in x.iter_mut().enumerate() {
            *v += 1e-3 * ((i * 7919) % 13) as f64 / 13.0;
        }
        let (nv, m) = (t.num_vars(), t.num_constraints());
        let lambda: Vec<f64> = (0..m).map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.5).collect();
        let js = t.jacobian_structure();
        let hs = t.hessian_structure();
        let (mut g, mut jac, mut hess) = (vec![0.0; nv], vec![0.0; js.len()], vec![0.0; hs.len()]);
        t.derivatives(&x, &lambda, &mut g, &mut jac, &mut hess);
        let lag_grad = |x: &[f64]| {
            let mut c = vec![0.0; m];
            t.constraints(x, &mut c);
            let (mut g, mut jac, mut hh) = (vec![0.0; nv], vec![0.0; js.len()], vec![0.0; hs.len()]);
            t.derivatives(x, &lambda, &mut g, &mut jac, &mut hh);
            for (e, &(r, col)) in js.iter().enumerate() {
                g[col] += lambda[r] * jac[e];
            }
            g
        };
        let eps = 1e-6;
        for col in [0, 1, 2, 3, 5, 6, 8, 40, 41, 43, nv - 1] {
            let mut xp = x.clone();
            xp[col] += eps;
            let mut xm = x.clone();
            xm[col] -= eps;
            let (mut cp, mut cm) = (vec![0.0; m], vec![0.0; m]);
            t.constraints(&xp, &mut cp);
            t.constraints(&xm, &mut cm);
            for (e, &(r, c)) in js.iter().enumerate() {
                if c == col {
                    let fd = (cp[r] - cm[r]) / (2.0 * eps);
                    assert!(
                        (fd - jac[e]).abs() < 1e-5 * (1.0 + fd.abs()),
                        "jac ({r},{c}): {fd} vs {}",
                        jac[e]
                    );
                }
            }
            let fd_obj = (t.objective(&xp) - t.objective(&xm)) / (2.0 * eps);
            assert!((fd_obj - g[col]).abs() < 1e-6);
            let (gp, gm) = (lag_grad(&xp), lag_grad(&xm));
            for (e, &(i, j)) in hs.iter().enumerate() {
                if j == col || i == col {
                    let other = if j == col { i } else { j };
                    let fd = (gp[other] - gm[other]) / (2.0 * eps);
                    assert!(
                        (fd - hess[e]).abs() < 1e-4 * (1.0 + fd.abs()),
                        "hess ({i},{j}): {fd} vs {}",
                        hess[e]
                    );
                }
            }
        }
    }

    #[test]
    fn kkt_ordering_is_a_permutation() {
        let opts = SolverOptions {
            grid_size: Some(61),
            ..SolverOptions::default()
        };
        let p = OcpProblem::min_time(reference_dynamics(2500.0), 20_000.0, None, opts)
            .unwrap()
            .with_control_block(20)
            .unwrap();
        let t = Transcription::new(&p, 0.0);
        let order = t.kkt_ordering();
        let mut seen_v = vec![false; t.num_vars()];
        let mut seen_c = vec![false; t.num_constraints()];
        for e in order {
            match e {
                KktEntry::Var(i) => seen_v[i] = true,
                KktEntry::Con(i) => seen_c[i] = true,
            }
        }
        assert!(seen_v.into_iter().all(|b| b) && seen_c.into_iter().all(|b| b));
    }

    #[test]
    fn warm_start_reaches_the_target_distance() {
        let p = OcpProblem::min_time(reference_dynamics(2500.0), 21_000.0, None, SolverOptions::default()).unwrap();
        let w = warm_start_from_constant_pace(&p).unwrap();
        let x_end = w.final_state().x * p.dynamics.params.d_scale;
        assert!((x_end / 21_000.0 - 1.0).abs() < 1e-2, "{x_end}");
    }

    #[test]
    fn rejects_bad_problems() {
        let opts = SolverOptions {
            grid_size: Some(20),
            ..SolverOptions::default()
        };
        assert!(OcpProblem::max_distance(reference_dynamics(2500.0), opts).is_err());
        assert!(OcpProblem::min_time(reference_dynamics(2500.0), -1.0, None, SolverOptions::default()).is_err());
        let p = OcpProblem::max_distance(reference_dynamics(2500.0), SolverOptions::default()).unwrap();
        assert!(p.with_control_block(5).is_err());
    }
}
