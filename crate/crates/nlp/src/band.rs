//! Banded LU factorisation with partial pivoting.
//!
//! Row interchanges are confined to the lower bandwidth, so the factor's
//! upper bandwidth grows to `kl + ku`; storage reserves that fill up front.

use crate::NlpError;

#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        // column offset j - i lives in [-kl, kl + ku]
        i * self.width + (j + self.kl - i)
    }

    /// Adds `v` to entry `(i, j)`; the entry must lie inside the declared band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j + self.kl >= i && j <= i + self.ku, "({i},{j}) outside band");
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku + self.kl {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += self.data[self.idx(i, j)] * x[j];
            }
            y[i] = acc;
        }
    }

    /// Factorises in place. Fails when a pivot column is numerically zero.
    pub fn factor(mut self) -> Result<BandLu, NlpError> {
        let n = self.n;
        let kl = self.kl;
        let kmax = kl + self.ku;
        let mut piv = vec![0usize; n];
        // pivots are judged against their own column so that a few huge
        // diagonal entries do not make unrelated columns look singular
        let col_scale: Vec<f64> = (0..n)
            .map(|j| {
                let lo = j.saturating_sub(self.ku);
                let hi = (j + kl).min(n - 1);
                (lo..=hi)
                    .fold(0.0f64, |m, i| m.max(self.data[self.idx(i, j)].abs()))
                    .max(1e-300)
            })
            .collect();
        for j in 0..n {
            let scale = col_scale[j];
            let last = (j + kl).min(n - 1);
            let mut p = j;
            let mut best = self.data[self.idx(j, j)].abs();
            for i in j + 1..=last {
                let a = self.data[self.idx(i, j)].abs();
                if a > best {
                    best = a;
                    p = i;
                }
            }
            piv[j] = p;
            if best <= 1e-15 * scale {
                return Err(NlpError::SingularMatrix { column: j });
            }
            let cend = (j + kmax).min(n - 1);
            if p != j {
                for c in j..=cend {
                    let a = self.idx(j, c);
                    let b = self.idx(p, c);
                    self.data.swap(a, b);
                }
            }
            let d = self.data[self.idx(j, j)];
            for i in j + 1..=last {
                let lij = self.data[self.idx(i, j)] / d;
                let k = self.idx(i, j);
                self.data[k] = lij;
                if lij == 0.0 {
                    continue;
                }
                for c in j + 1..=cend {
                    let ujc = self.data[self.idx(j, c)];
                    if ujc != 0.0 {
                        let k = self.idx(i, c);
                        self.data[k] -= lij * ujc;
                    }
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }
}

#[derive(Clone, Debug)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.m.n;
        let kl = self.m.kl;
        let kmax = kl + self.m.ku;
        for j in 0..n {
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj != 0.0 {
                for i in j + 1..=(j + kl).min(n - 1) {
                    b[i] -= self.m.data[self.m.idx(i, j)] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            let mut acc = b[j];
            for c in j + 1..=(j + kmax).min(n - 1) {
                acc -= self.m.data[self.m.idx(j, c)] * b[c];
            }
            b[j] = acc / self.m.data[self.m.idx(j, j)];
        }
    }
}
