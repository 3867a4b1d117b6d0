use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed by the ODE right-hand sides, so one integrator serves
/// both plain values and forward-mode sensitivities.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + std::fmt::Debug
{
    fn cst(v: f64) -> Self;
    fn val(&self) -> f64;
    fn scale(self, c: f64) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(&self) -> f64 {
        *self
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// Value with `N` tangent directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    /// Seed variable `k` with unit tangent.
    pub fn variable(v: f64, k: usize) -> Self {
        let mut d = [0.0; N];
        d[k] = 1.0;
        Self { v, d }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= e);
        Self { v: e, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Self { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Self { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for k in 0..N {
            d[k] = self.d[k] * o.v + self.v * o.d[k];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let mut d = [0.0; N];
        for k in 0..N {
            d[k] = (self.d[k] - self.v * inv * o.d[k]) * inv;
        }
        Self { v: self.v * inv, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x = -*x);
        Self { v: -self.v, d }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    fn val(&self) -> f64 {
        self.v
    }
    fn scale(self, c: f64) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= c);
        Self { v: self.v * c, d }
    }
}
