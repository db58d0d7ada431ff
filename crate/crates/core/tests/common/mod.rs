//! Shared test oracles.
#![allow(dead_code)]

use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Truncated Taylor jet `(f, f', f'')` in one scalar variable; arithmetic
/// propagates exact first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet {
            v,
            d1: 0.0,
            d2: 0.0,
        }
    }

    pub fn variable(v: f64) -> Self {
        Jet {
            v,
            d1: 1.0,
            d2: 0.0,
        }
    }

    /// Compose with a scalar function given its value and two derivatives at `self.v`.
    fn chain(self, f: f64, fp: f64, fpp: f64) -> Self {
        Jet {
            v: f,
            d1: fp * self.d1,
            d2: fpp * self.d1 * self.d1 + fp * self.d2,
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn tanh(self) -> Self {
        let t = self.v.tanh();
        let s2 = 1.0 - t * t;
        self.chain(t, s2, -2.0 * t * s2)
    }

    pub fn scale(self, c: f64) -> Self {
        Jet {
            v: c * self.v,
            d1: c * self.d1,
            d2: c * self.d2,
        }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            d1: self.d1 + o.d1,
            d2: self.d2 + o.d2,
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            d1: self.d1 * o.v + self.v * o.d1,
            d2: self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2,
        }
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(self, c: f64) -> Jet {
        Jet {
            v: self.v + c,
            ..self
        }
    }
}

/// Jets of `f` along each coordinate axis at `x`: entry `i` carries
/// `∂_i f(x)` and `∂_i² f(x)`.
pub fn axis_jets(f: &dyn Fn(&[Jet]) -> Jet, x: &[f64]) -> Vec<Jet> {
    (0..x.len())
        .map(|i| {
            let args: Vec<Jet> = x
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    if i == j {
                        Jet::variable(v)
                    } else {
                        Jet::constant(v)
                    }
                })
                .collect();
            f(&args)
        })
        .collect()
}

pub fn laplacian(f: &dyn Fn(&[Jet]) -> Jet, x: &[f64]) -> f64 {
    axis_jets(f, x).iter().map(|j| j.d2).sum()
}

pub fn gradient(f: &dyn Fn(&[Jet]) -> Jet, x: &[f64]) -> Vec<f64> {
    axis_jets(f, x).iter().map(|j| j.d1).collect()
}

/// Central finite-difference gradient with per-coordinate step `h·max(1,|x_i|)`.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            y[i] = x[i] + step;
            let fp = f(&y);
            y[i] = x[i] - step;
            let fm = f(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// ∫_{-1}^{1} x^k dx
pub fn monomial_integral(k: usize) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        2.0 / (k as f64 + 1.0)
    }
}

/// Dense polynomial in monomial coefficients: coeffs[i + (n+1) j] ↔ x^i y^j.
#[derive(Clone)]
pub struct Poly2 {
    pub n: usize,
    pub c: Vec<f64>,
}

impl Poly2 {
    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            n,
            c: (0..(n + 1) * (n + 1))
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        }
    }

    pub fn falling(a: usize, k: usize) -> f64 {
        if k > a {
            0.0
        } else {
            (0..k).map(|i| (a - i) as f64).product()
        }
    }

    /// Monomial coefficients of ∂^β Q (same layout, degree n).
    pub fn derivative(&self, beta: &[usize]) -> Poly2 {
        let n = self.n;
        let mut out = vec![0.0; self.c.len()];
        for j in 0..=n {
            for i in 0..=n {
                let v = self.c[i + (n + 1) * j];
                if i >= beta[0] && j >= beta[1] {
                    out[(i - beta[0]) + (n + 1) * (j - beta[1])] +=
                        v * Self::falling(i, beta[0]) * Self::falling(j, beta[1]);
                }
            }
        }
        Poly2 { n, c: out }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for j in 0..=n {
            for i in 0..=n {
                s += self.c[i + (n + 1) * j] * x.powi(i as i32) * y.powi(j as i32);
            }
        }
        s
    }

    /// Analytic ∫_{[-1,1]²} P·Q.
    pub fn l2_exact(&self, other: &Poly2) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for j1 in 0..=n {
            for i1 in 0..=n {
                let a = self.c[i1 + (n + 1) * j1];
                for j2 in 0..=n {
                    for i2 in 0..=n {
                        let b = other.c[i2 + (n + 1) * j2];
                        s += a * b * monomial_integral(i1 + i2) * monomial_integral(j1 + j2);
                    }
                }
            }
        }
        s
    }
}
