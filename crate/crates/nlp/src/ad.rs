//! Forward-mode automatic differentiation carrying exact first and second
//! derivatives with respect to a small, fixed number of seed variables.
//!
//! Model code is written once against [`Scalar`] and evaluated either with
//! plain `f64` (line searches, simulation) or with [`Hyper`] when the solver
//! needs Jacobian rows and Hessian blocks.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Arithmetic needed by the model right-hand sides.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Value, gradient and (symmetric, fully stored) Hessian with respect to `N`
/// seed variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> Hyper<N> {
    pub fn constant(v: f64) -> Self {
        Self {
            v,
            g: [0.0; N],
            h: [[0.0; N]; N],
        }
    }

    /// Independent variable number `idx` with value `v`.
    pub fn seed(v: f64, idx: usize) -> Self {
        let mut out = Self::constant(v);
        out.g[idx] = 1.0;
        out
    }

    /// Applies a scalar function given its value and first two derivatives
    /// at `self.v`.
    #[inline]
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Self::constant(f0);
        for i in 0..N {
            out.g[i] = f1 * self.g[i];
        }
        for i in 0..N {
            for j in 0..N {
                out.h[i][j] = f1 * self.h[i][j] + f2 * self.g[i] * self.g[j];
            }
        }
        out
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }
}

impl<const N: usize> Scalar for Hyper<N> {
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn ln(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        self.chain(r, 0.5 / r, -0.25 / (r * self.v))
    }
}

impl<const N: usize> Add for Hyper<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl<const N: usize> AddAssign for Hyper<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        self.v += rhs.v;
        for i in 0..N {
            self.g[i] += rhs.g[i];
            for j in 0..N {
                self.h[i][j] += rhs.h[i][j];
            }
        }
    }
}

impl<const N: usize> Sub for Hyper<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self -= rhs;
        self
    }
}

impl<const N: usize> SubAssign for Hyper<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        self.v -= rhs.v;
        for i in 0..N {
            self.g[i] -= rhs.g[i];
            for j in 0..N {
                self.h[i][j] -= rhs.h[i][j];
            }
        }
    }
}

impl<const N: usize> Mul for Hyper<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::constant(self.v * rhs.v);
        for i in 0..N {
            out.g[i] = self.v * rhs.g[i] + rhs.v * self.g[i];
        }
        for i in 0..N {
            for j in 0..N {
                out.h[i][j] = self.v * rhs.h[i][j] + rhs.v * self.h[i][j] + self.g[i] * rhs.g[j] + rhs.g[i] * self.g[j];
            }
        }
        out
    }
}

impl<const N: usize> MulAssign for Hyper<N> {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Div for Hyper<N> {
    type Output = Self;
    #[inline]
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl<const N: usize> Neg for Hyper<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.v = -self.v;
        for i in 0..N {
            self.g[i] = -self.g[i];
            for j in 0..N {
                self.h[i][j] = -self.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Add<f64> for Hyper<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.v += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Hyper<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.v -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Hyper<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.v *= rhs;
        for i in 0..N {
            self.g[i] *= rhs;
            for j in 0..N {
                self.h[i][j] *= rhs;
            }
        }
        self
    }
}

impl<const N: usize> Div<f64> for Hyper<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check<F>(f: F, x: [f64; 2])
    where
        F: Fn([Hyper<2>; 2]) -> Hyper<2>,
    {
        let eval = |p: [f64; 2]| f([Hyper::constant(p[0]), Hyper::constant(p[1])]).v;
        let out = f([Hyper::seed(x[0], 0), Hyper::seed(x[1], 1)]);
        let eps = 1e-5;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (eval(xp) - eval(xm)) / (2.0 * eps);
            assert!((fd - out.g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "grad {i}");
            for j in 0..2 {
                let mut a = x;
                let mut b = x;
                let mut c = x;
                let mut d = x;
                a[i] += eps;
                a[j] += eps;
                b[i] += eps;
                b[j] -= eps;
                c[i] -= eps;
                c[j] += eps;
                d[i] -= eps;
                d[j] -= eps;
                let fd2 = (eval(a) - eval(b) - eval(c) + eval(d)) / (4.0 * eps * eps);
                assert!(
                    (fd2 - out.h[i][j]).abs() < 1e-4 * (1.0 + fd2.abs()),
                    "hess {i}{j}: {fd2} vs {}",
                    out.h[i][j]
                );
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        fd_check(|[a, b]| a * b * b + a.exp() / (b + 2.0), [0.3, 0.7]);
        fd_check(|[a, b]| (a * 3.0).sin() * b.cos() - (a * b).sqrt(), [0.4, 1.1]);
        fd_check(|[a, b]| (a + b * b).ln() * (-a) + b / a, [0.9, 0.5]);
    }

    #[test]
    fn hessian_is_symmetric() {
        let a = Hyper::<3>::seed(0.5, 0);
        let b = Hyper::<3>::seed(1.5, 1);
        let c = Hyper::<3>::seed(-0.2, 2);
        let y = (a * b).exp() / (c * c + 1.0) + a.sin() * c;
        for i in 0..3 {
            for j in 0..3 {
                assert!((y.h[i][j] - y.h[j][i]).abs() < 1e-14);
            }
        }
    }
}
