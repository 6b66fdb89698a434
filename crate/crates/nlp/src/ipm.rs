//! Primal-dual interior-point method for
//!
//! ```text
//!   min f(x)  s.t.  c(x) = 0,  l <= x <= u
//! ```
//!
//! The Newton system is assembled in an ordering supplied by the problem so
//! that it stays banded, and is solved with [`crate::band`]. Nonconvexity is
//! handled by the inertia-free curvature test: the primal Hessian block is
//! shifted until the computed step has positive curvature. Globalisation is
//! a filter line search on (constraint violation, barrier objective) with one
//! second-order correction; when the filter admits no step, an l1
//! exact-penalty merit line search is tried instead.

use crate::band::{BandLu, BandMatrix};
use crate::{KktEntry, NlpError, NlpProblem};

#[derive(Clone, Debug)]
pub struct IpmOptions {
    /// Scaled optimality error at which the solve stops.
    pub tol: f64,
    /// Maximum absolute constraint violation accepted at termination.
    pub constr_tol: f64,
    /// Maximum complementarity product accepted at termination.
    pub compl_tol: f64,
    pub max_iter: usize,
    pub mu_init: f64,
    pub bound_push: f64,
    pub print_level: u8,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            constr_tol: 1e-8,
            compl_tol: 1e-8,
            max_iter: 500,
            mu_init: 0.1,
            bound_push: 1e-2,
            print_level: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IpmStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    RegularizationFailed,
}

#[derive(Clone, Debug, Default)]
pub struct KktReport {
    pub stationarity: f64,
    pub constraint_violation: f64,
    pub complementarity: f64,
    pub mu: f64,
}

#[derive(Clone, Debug)]
pub struct IterationLog {
    pub iter: usize,
    pub objective: f64,
    pub constraint_violation: f64,
    pub stationarity: f64,
    pub mu: f64,
    pub step: f64,
    pub regularization: f64,
}

#[derive(Clone, Debug)]
pub struct IpmResult {
    pub status: IpmStatus,
    pub x: Vec<f64>,
    /// Equality multipliers, sign convention `L = f + y^T c`.
    pub y: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt: KktReport,
    pub history: Vec<IterationLog>,
}

impl IpmResult {
    pub fn converged(&self) -> bool {
        self.status == IpmStatus::Converged
    }
}

const KAPPA_EPS: f64 = 10.0;
const KAPPA_MU: f64 = 0.2;
const THETA_MU: f64 = 1.5;
const TAU_MIN: f64 = 0.99;
const KAPPA_SIGMA: f64 = 1e10;
const S_MAX: f64 = 100.0;
const ARMIJO: f64 = 1e-4;
const CURVATURE_KAPPA: f64 = 1e-10;
const DELTA_W_MAX: f64 = 1e40;
// filter line search
const GAMMA_THETA: f64 = 1e-5;
const GAMMA_PHI: f64 = 1e-8;
const GAMMA_ALPHA: f64 = 0.05;
const SWITCH_DELTA: f64 = 1.0;
const S_THETA: f64 = 1.1;
const S_PHI: f64 = 2.3;

struct Layout {
    /// KKT position of each variable.
    var_pos: Vec<usize>,
    /// KKT position of each constraint.
    con_pos: Vec<usize>,
    kl: usize,
    ku: usize,
}

impl Layout {
    fn new(
        n: usize,
        m: usize,
        order: &[KktEntry],
        jac: &[(usize, usize)],
        hess: &[(usize, usize)],
    ) -> Result<Self, NlpError> {
        if order.len() != n + m {
            return Err(NlpError::BadStructure(
                "KKT ordering must list every variable and constraint once".into(),
            ));
        }
        let mut var_pos = vec![usize::MAX; n];
        let mut con_pos = vec![usize::MAX; m];
        for (p, e) in order.iter().enumerate() {
            let slot = match *e {
                KktEntry::Var(i) => var_pos.get_mut(i),
                KktEntry::Con(j) => con_pos.get_mut(j),
            };
            match slot {
                Some(s) if *s == usize::MAX => *s = p,
                _ => {
                    return Err(NlpError::BadStructure(format!(
                        "KKT ordering entry {e:?} invalid or repeated"
                    )))
                }
            }
        }
        let mut bw = 0usize;
        for &(r, c) in jac {
            bw = bw.max(con_pos[r].abs_diff(var_pos[c]));
        }
        for &(i, j) in hess {
            bw = bw.max(var_pos[i].abs_diff(var_pos[j]));
        }
        Ok(Self {
            var_pos,
            con_pos,
            kl: bw,
            ku: bw,
        })
    }
}

struct Eval {
    f: f64,
    c: Vec<f64>,
    grad: Vec<f64>,
    jac: Vec<f64>,
    hess: Vec<f64>,
}

pub struct InteriorPoint<'a, P: NlpProblem> {
    problem: &'a P,
    opts: IpmOptions,
    n: usize,
    m: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    jac_sp: Vec<(usize, usize)>,
    hess_sp: Vec<(usize, usize)>,
    layout: Layout,
}

impl<'a, P: NlpProblem> InteriorPoint<'a, P> {
    pub fn new(problem: &'a P, opts: IpmOptions) -> Result<Self, NlpError> {
        let n = problem.num_vars();
        let m = problem.num_constraints();
        let (lower, upper) = problem.bounds();
        if lower.len() != n || upper.len() != n {
            return Err(NlpError::BadStructure("bound vectors have wrong length".into()));
        }
        for i in 0..n {
            if !(lower[i] < upper[i]) {
                return Err(NlpError::BadStructure(format!(
                    "variable {i} has empty or degenerate bounds"
                )));
            }
        }
        let jac_sp = problem.jacobian_structure();
        let hess_sp = problem.hessian_structure();
        if jac_sp.iter().any(|&(r, c)| r >= m || c >= n) || hess_sp.iter().any(|&(i, j)| i >= n || j > i) {
            return Err(NlpError::BadStructure("sparsity entry out of range".into()));
        }
        let order = problem.kkt_ordering();
        let layout = Layout::new(n, m, &order, &jac_sp, &hess_sp)?;
        Ok(Self {
            problem,
            opts,
            n,
            m,
            lower,
            upper,
            jac_sp,
            hess_sp,
            layout,
        })
    }

    fn has_l(&self, i: usize) -> bool {
        self.lower[i].is_finite()
    }

    fn has_u(&self, i: usize) -> bool {
        self.upper[i].is_finite()
    }

    fn evaluate(&self, x: &[f64], y: &[f64]) -> Eval {
        let mut c = vec![0.0; self.m];
        self.problem.constraints(x, &mut c);
        let mut grad = vec![0.0; self.n];
        let mut jac = vec![0.0; self.jac_sp.len()];
        let mut hess = vec![0.0; self.hess_sp.len()];
        self.problem.derivatives(x, y, &mut grad, &mut jac, &mut hess);
        Eval {
            f: self.problem.objective(x),
            c,
            grad,
            jac,
            hess,
        }
    }

    fn barrier(&self, x: &[f64], mu: f64) -> f64 {
        let mut b = 0.0;
        for i in 0..self.n {
            if self.has_l(i) {
                b -= mu * (x[i] - self.lower[i]).ln();
            }
            if self.has_u(i) {
                b -= mu * (self.upper[i] - x[i]).ln();
            }
        }
        b
    }

    fn jt_times(&self, jac: &[f64], y: &[f64], out: &mut [f64]) {
        for (k, &(r, c)) in self.jac_sp.iter().enumerate() {
            out[c] += jac[k] * y[r];
        }
    }

    fn hess_quad(&self, hess: &[f64], d: &[f64]) -> f64 {
        let mut q = 0.0;
        for (k, &(i, j)) in self.hess_sp.iter().enumerate() {
            let v = hess[k] * d[i] * d[j];
            q += if i == j { v } else { 2.0 * v };
        }
        q
    }

    fn assemble(&self, ev: &Eval, sigma: &[f64], dw: f64, dc: f64, hess_scale: f64) -> BandMatrix {
        let dim = self.n + self.m;
        let mut k = BandMatrix::zeros(dim, self.layout.kl, self.layout.ku);
        let vp = &self.layout.var_pos;
        let cp = &self.layout.con_pos;
        for (idx, &(i, j)) in self.hess_sp.iter().enumerate() {
            let v = hess_scale * ev.hess[idx];
            k.add(vp[i], vp[j], v);
            if i != j {
                k.add(vp[j], vp[i], v);
            }
        }
        for i in 0..self.n {
            k.add(vp[i], vp[i], sigma[i] + dw);
        }
        for (idx, &(r, c)) in self.jac_sp.iter().enumerate() {
            k.add(cp[r], vp[c], ev.jac[idx]);
            k.add(vp[c], cp[r], ev.jac[idx]);
        }
        for j in 0..self.m {
            k.add(cp[j], cp[j], -dc);
        }
        k
    }

    /// Solves with the factored matrix, refining against `mat`, and returns
    /// `(dx, dy)` in problem ordering.
    fn solve(&self, lu: &BandLu, mat: &BandMatrix, rx: &[f64], rc: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dim = self.n + self.m;
        let mut rhs = vec![0.0; dim];
        for i in 0..self.n {
            rhs[self.layout.var_pos[i]] = -rx[i];
        }
        for j in 0..self.m {
            rhs[self.layout.con_pos[j]] = -rc[j];
        }
        let mut sol = rhs.clone();
        lu.solve_in_place(&mut sol);
        let mut ax = vec![0.0; dim];
        for _ in 0..2 {
            mat.matvec(&sol, &mut ax);
            let mut res: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let rn = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if rn < 1e-14 {
                break;
            }
            lu.solve_in_place(&mut res);
            for (s, r) in sol.iter_mut().zip(&res) {
                *s += r;
            }
        }
        let dx = (0..self.n).map(|i| sol[self.layout.var_pos[i]]).collect();
        let dy = (0..self.m).map(|j| sol[self.layout.con_pos[j]]).collect();
        (dx, dy)
    }

    fn push_into_bounds(&self, x: &mut [f64]) {
        let k = self.opts.bound_push;
        for i in 0..self.n {
            let (l, u) = (self.lower[i], self.upper[i]);
            let width = u - l;
            if l.is_finite() {
                let mut p = k * l.abs().max(1.0);
                if u.is_finite() {
                    p = p.min(k * width);
                }
                x[i] = x[i].max(l + p);
            }
            if u.is_finite() {
                let mut p = k * u.abs().max(1.0);
                if l.is_finite() {
                    p = p.min(k * width);
                }
                x[i] = x[i].min(u - p);
            }
        }
    }

    /// Corrected trial point for a step of length `alpha` whose constraint
    /// values were `ct`.
    #[allow(clippy::too_many_arguments)]
    fn second_order_correction(
        &self,
        ev: &Eval,
        sigma: &[f64],
        dw: f64,
        dc: f64,
        rx: &[f64],
        x: &[f64],
        ct: &[f64],
        alpha: f64,
        tau: f64,
    ) -> Option<Vec<f64>> {
        if !ct.iter().all(|v| v.is_finite()) {
            return None;
        }
        let csoc: Vec<f64> = ev.c.iter().zip(ct).map(|(a, b)| alpha * a + b).collect();
        let mat = self.assemble(ev, sigma, dw, dc, 1.0);
        let lu = mat.clone().factor().ok()?;
        let (dsoc, _) = self.solve(&lu, &mat, rx, &csoc);
        let asoc = self.frac_to_boundary(x, &dsoc, tau);
        Some(x.iter().zip(&dsoc).map(|(a, b)| a + asoc * b).collect())
    }

    fn frac_to_boundary(&self, x: &[f64], dx: &[f64], tau: f64) -> f64 {
        let mut a = 1.0f64;
        for i in 0..self.n {
            if dx[i] < 0.0 && self.has_l(i) {
                a = a.min(-tau * (x[i] - self.lower[i]) / dx[i]);
            }
            if dx[i] > 0.0 && self.has_u(i) {
                a = a.min(tau * (self.upper[i] - x[i]) / dx[i]);
            }
        }
        a
    }

    pub fn solve_from(&self, x0: Vec<f64>) -> Result<IpmResult, NlpError> {
        let (n, m) = (self.n, self.m);
        if x0.len() != n {
            return Err(NlpError::BadStructure("initial point has wrong length".into()));
        }
        let mut x = x0;
        self.push_into_bounds(&mut x);
        let mut zl: Vec<f64> = (0..n).map(|i| if self.has_l(i) { 1.0 } else { 0.0 }).collect();
        let mut zu: Vec<f64> = (0..n).map(|i| if self.has_u(i) { 1.0 } else { 0.0 }).collect();
        let mut mu = self.opts.mu_init;
        let mu_min = self.opts.tol.min(self.opts.compl_tol) / 10.0;
        let mut y = vec![0.0; m];

        // least-squares multiplier estimate
        {
            let ev = self.evaluate(&x, &y);
            let sigma = vec![1.0; n];
            let mat = self.assemble(&ev, &sigma, 0.0, 0.0, 0.0);
            if let Ok(lu) = mat.clone().factor() {
                let rx: Vec<f64> = (0..n).map(|i| ev.grad[i] - zl[i] + zu[i]).collect();
                let zero = vec![0.0; m];
                let (_, ly) = self.solve(&lu, &mat, &rx, &zero);
                if ly.iter().all(|v| v.abs() <= 1e3) {
                    y = ly;
                }
            }
        }

        let mut nu = 1.0f64;
        let mut filter: Vec<(f64, f64)> = Vec::new();
        let theta0: f64 = {
            let mut c = vec![0.0; m];
            self.problem.constraints(&x, &mut c);
            c.iter().map(|v| v.abs()).sum()
        };
        let theta_max = 1e4 * theta0.max(1.0);
        let theta_min = 1e-4 * theta0.max(1.0);
        let mut dw_last = 0.0f64;
        let mut history = Vec::new();
        let status;
        let mut kkt;
        let mut iter = 0usize;
        let mut ev = self.evaluate(&x, &y);

        loop {
            // optimality measures
            let mut rd = ev.grad.clone();
            self.jt_times(&ev.jac, &y, &mut rd);
            for i in 0..n {
                rd[i] += zu[i] - zl[i];
            }
            let cviol = ev.c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let nb = (0..n).filter(|&i| self.has_l(i)).count() + (0..n).filter(|&i| self.has_u(i)).count();
            let zsum: f64 = zl.iter().sum::<f64>() + zu.iter().sum::<f64>();
            let ysum: f64 = y.iter().map(|v| v.abs()).sum();
            let sd = (S_MAX.max((ysum + zsum) / ((m + nb).max(1) as f64))) / S_MAX;
            let sc = (S_MAX.max(zsum / (nb.max(1) as f64))) / S_MAX;
            let dual = rd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let compl = |mu: f64| {
                let mut e = 0.0f64;
                for i in 0..n {
                    if self.has_l(i) {
                        e = e.max(((x[i] - self.lower[i]) * zl[i] - mu).abs());
                    }
                    if self.has_u(i) {
                        e = e.max(((self.upper[i] - x[i]) * zu[i] - mu).abs());
                    }
                }
                e
            };
            let err0 = (dual / sd).max(cviol).max(compl(0.0) / sc);
            kkt = KktReport {
                stationarity: dual,
                constraint_violation: cviol,
                complementarity: compl(0.0),
                mu,
            };
            if err0 <= self.opts.tol && cviol <= self.opts.constr_tol && compl(0.0) <= self.opts.compl_tol {
                status = IpmStatus::Converged;
                break;
            }
            if iter >= self.opts.max_iter {
                status = IpmStatus::MaxIterations;
                break;
            }
            loop {
                // primal-dual error only has to reach `tol`, so μ can keep
                // falling when a complementarity target far below `tol` is set
                let pd = (dual / sd).max(cviol);
                if pd > (KAPPA_EPS * mu).max(self.opts.tol) || compl(mu) / sc > KAPPA_EPS * mu || mu <= mu_min {
                    break;
                }
                mu = mu_min.max((KAPPA_MU * mu).min(mu.powf(THETA_MU)));
                nu = nu.min(1e6);
                filter.clear();
            }
            let tau = TAU_MIN.max(1.0 - mu);

            // Newton system
            let mut sigma = vec![0.0; n];
            let mut rx = ev.grad.clone();
            self.jt_times(&ev.jac, &y, &mut rx);
            for i in 0..n {
                if self.has_l(i) {
                    let s = x[i] - self.lower[i];
                    sigma[i] += zl[i] / s;
                    rx[i] -= mu / s;
                }
                if self.has_u(i) {
                    let s = self.upper[i] - x[i];
                    sigma[i] += zu[i] / s;
                    rx[i] += mu / s;
                }
            }
            let mut dw = 0.0f64;
            let mut dc = 0.0f64;
            let (dx, dy, curv) = loop {
                let mat = self.assemble(&ev, &sigma, dw, dc, 1.0);
                match mat.clone().factor() {
                    Err(NlpError::SingularMatrix { .. }) => {
                        if dc == 0.0 {
                            dc = 1e-8 * mu.powf(0.25);
                        } else {
                            dw = next_dw(dw, dw_last);
                        }
                    }
                    Err(e) => return Err(e),
                    Ok(lu) => {
                        let (dx, dy) = self.solve(&lu, &mat, &rx, &ev.c);
                        let dxn: f64 = dx.iter().map(|v| v * v).sum();
                        let mut curv = self.hess_quad(&ev.hess, &dx);
                        for i in 0..n {
                            curv += (sigma[i] + dw) * dx[i] * dx[i];
                        }
                        if curv >= CURVATURE_KAPPA * dxn || dxn < 1e-30 {
                            break (dx, dy, curv);
                        }
                        dw = next_dw(dw, dw_last);
                    }
                }
                if dw > DELTA_W_MAX {
                    return Ok(self.finish(IpmStatus::RegularizationFailed, x, y, zl, zu, iter, kkt, history));
                }
            };
            if dw > 0.0 {
                dw_last = dw;
            }

            // bound multiplier steps
            let mut dzl = vec![0.0; n];
            let mut dzu = vec![0.0; n];
            for i in 0..n {
                if self.has_l(i) {
                    let s = x[i] - self.lower[i];
                    dzl[i] = mu / s - zl[i] - zl[i] / s * dx[i];
                }
                if self.has_u(i) {
                    let s = self.upper[i] - x[i];
                    dzu[i] = mu / s - zu[i] + zu[i] / s * dx[i];
                }
            }
            let alpha_max = self.frac_to_boundary(&x, &dx, tau);
            if self.opts.print_level > 1 {
                let (mut worst, mut amin) = (0, 1.0f64);
                for i in 0..n {
                    let a = if dx[i] < 0.0 && self.has_l(i) {
                        -tau * (x[i] - self.lower[i]) / dx[i]
                    } else if dx[i] > 0.0 && self.has_u(i) {
                        tau * (self.upper[i] - x[i]) / dx[i]
                    } else {
                        1.0
                    };
                    if a < amin {
                        (worst, amin) = (i, a);
                    }
                }
                eprintln!(
                    "     alpha_max={alpha_max:.2e} at x[{worst}]={:.6e} dx={:.3e}",
                    x[worst], dx[worst]
                );
            }
            let mut alpha_z = 1.0f64;
            for i in 0..n {
                if dzl[i] < 0.0 {
                    alpha_z = alpha_z.min(-tau * zl[i] / dzl[i]);
                }
                if dzu[i] < 0.0 {
                    alpha_z = alpha_z.min(-tau * zu[i] / dzu[i]);
                }
            }

            let c1: f64 = ev.c.iter().map(|v| v.abs()).sum();
            let mut gphi = 0.0;
            for i in 0..n {
                let mut g = ev.grad[i];
                if self.has_l(i) {
                    g -= mu / (x[i] - self.lower[i]);
                }
                if self.has_u(i) {
                    g += mu / (self.upper[i] - x[i]);
                }
                gphi += g * dx[i];
            }
            let barrier_obj = |xt: &[f64]| self.problem.objective(xt) + self.barrier(xt, mu);
            let mut ct = vec![0.0; m];
            let mut accepted: Option<Vec<f64>> = None;
            let mut alpha = alpha_max;

            // filter line search
            {
                let theta = c1;
                let phi = ev.f + self.barrier(&x, mu);
                let alpha_min = if gphi < 0.0 {
                    GAMMA_ALPHA
                        * GAMMA_THETA
                            .min(GAMMA_PHI * theta / -gphi)
                            .min(SWITCH_DELTA * theta.powf(S_THETA) / (-gphi).powf(S_PHI))
                } else {
                    GAMMA_ALPHA * GAMMA_THETA
                };
                // Some(true): accepted and the filter must grow
                let judge = |theta_t: f64, phi_t: f64, alpha: f64, filter: &[(f64, f64)]| -> Option<bool> {
                    if !phi_t.is_finite() || theta_t > theta_max {
                        return None;
                    }
                    if filter.iter().any(|&(ft, fp)| theta_t >= ft && phi_t >= fp) {
                        return None;
                    }
                    let switching = gphi < 0.0 && alpha * (-gphi).powf(S_PHI) > SWITCH_DELTA * theta.powf(S_THETA);
                    if switching && theta <= theta_min {
                        (phi_t <= phi + ARMIJO * alpha * gphi).then_some(false)
                    } else if theta_t <= (1.0 - GAMMA_THETA) * theta || phi_t <= phi - GAMMA_PHI * theta {
                        Some(true)
                    } else {
                        None
                    }
                };
                let mut first = true;
                while alpha >= alpha_min && alpha > 1e-14 {
                    let xt: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
                    self.problem.constraints(&xt, &mut ct);
                    let theta_t: f64 = ct.iter().map(|v| v.abs()).sum();
                    if let Some(grow) = judge(theta_t, barrier_obj(&xt), alpha, &filter) {
                        if grow {
                            filter.push(((1.0 - GAMMA_THETA) * theta, phi - GAMMA_PHI * theta));
                        }
                        accepted = Some(xt);
                        break;
                    }
                    if first && theta_t >= theta {
                        if let Some(xs) = self.second_order_correction(&ev, &sigma, dw, dc, &rx, &x, &ct, alpha, tau) {
                            let mut cs = vec![0.0; m];
                            self.problem.constraints(&xs, &mut cs);
                            let theta_s: f64 = cs.iter().map(|v| v.abs()).sum();
                            if let Some(grow) = judge(theta_s, barrier_obj(&xs), alpha, &filter) {
                                if grow {
                                    filter.push(((1.0 - GAMMA_THETA) * theta, phi - GAMMA_PHI * theta));
                                }
                                accepted = Some(xs);
                                break;
                            }
                        }
                    }
                    first = false;
                    alpha *= 0.5;
                }
            }

            // l1 merit line search as a fallback
            if accepted.is_none() {
                if c1 > 0.0 {
                    let need = (gphi + 0.5 * curv.max(0.0)) / (0.9 * c1);
                    if nu < need {
                        nu = 2.0 * need;
                    }
                }
                let dphi = gphi - nu * c1;
                let merit =
                    |xt: &[f64], ct: &[f64]| -> f64 { barrier_obj(xt) + nu * ct.iter().map(|v| v.abs()).sum::<f64>() };
                let phi0 = ev.f + self.barrier(&x, mu) + nu * c1;
                alpha = alpha_max;
                let mut first = true;
                while alpha > 1e-14 {
                    let xt: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
                    self.problem.constraints(&xt, &mut ct);
                    let phit = merit(&xt, &ct);
                    if phit.is_finite() && phit <= phi0 + ARMIJO * alpha * dphi.min(0.0) {
                        accepted = Some(xt);
                        break;
                    }
                    if first {
                        first = false;
                        let ct1: f64 = ct.iter().map(|v| v.abs()).sum();
                        if phit.is_finite() && ct1 >= c1 {
                            if let Some(xs) =
                                self.second_order_correction(&ev, &sigma, dw, dc, &rx, &x, &ct, alpha, tau)
                            {
                                let mut cs = vec![0.0; m];
                                self.problem.constraints(&xs, &mut cs);
                                let phis = merit(&xs, &cs);
                                if phis.is_finite() && phis <= phi0 + ARMIJO * alpha * dphi.min(0.0) {
                                    accepted = Some(xs);
                                    break;
                                }
                            }
                        }
                    }
                    alpha *= 0.5;
                }
            }
            let Some(xn) = accepted else {
                status = IpmStatus::LineSearchFailed;
                break;
            };
            let step = alpha;
            x = xn;
            for j in 0..m {
                y[j] += step * dy[j];
            }
            for i in 0..n {
                if self.has_l(i) {
                    let s = x[i] - self.lower[i];
                    let z = zl[i] + alpha_z * dzl[i];
                    zl[i] = z.clamp(mu / (KAPPA_SIGMA * s), KAPPA_SIGMA * mu / s);
                }
                if self.has_u(i) {
                    let s = self.upper[i] - x[i];
                    let z = zu[i] + alpha_z * dzu[i];
                    zu[i] = z.clamp(mu / (KAPPA_SIGMA * s), KAPPA_SIGMA * mu / s);
                }
            }
            iter += 1;
            ev = self.evaluate(&x, &y);
            let log = IterationLog {
                iter,
                objective: ev.f,
                constraint_violation: ev.c.iter().fold(0.0f64, |a, v| a.max(v.abs())),
                stationarity: dual,
                mu,
                step,
                regularization: dw,
            };
            if self.opts.print_level > 0 {
                eprintln!(
                    "{:4} f={:+.10e} |c|={:.2e} |rd|={:.2e} mu={:.1e} a={:.2e} dw={:.1e}",
                    log.iter,
                    log.objective,
                    log.constraint_violation,
                    log.stationarity,
                    log.mu,
                    log.step,
                    log.regularization
                );
            }
            history.push(log);
        }
        Ok(self.finish(status, x, y, zl, zu, iter, kkt, history))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        status: IpmStatus,
        x: Vec<f64>,
        y: Vec<f64>,
        z_lower: Vec<f64>,
        z_upper: Vec<f64>,
        iterations: usize,
        kkt: KktReport,
        history: Vec<IterationLog>,
    ) -> IpmResult {
        IpmResult {
            status,
            objective: self.problem.objective(&x),
            x,
            y,
            z_lower,
            z_upper,
            iterations,
            kkt,
            history,
        }
    }
}

fn next_dw(dw: f64, dw_last: f64) -> f64 {
    if dw == 0.0 {
        if dw_last == 0.0 {
            1e-4
        } else {
            (dw_last / 3.0).max(1e-20)
        }
    } else if dw_last == 0.0 {
        dw * 100.0
    } else {
        dw * 8.0
    }
}
