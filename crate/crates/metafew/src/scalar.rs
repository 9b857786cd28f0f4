//! Scalar abstraction for the network kernels.
//!
//! All forward/backward kernels are generic over [`Real`] so the same code
//! runs in three modes:
//!
//! - `f32`: fast training arithmetic,
//! - `f64`: reference arithmetic for gradient-oracle checks,
//! - [`Dual`]: forward-mode dual numbers layered over either float width.
//!
//! Running the hand-derived backward pass with `Dual` parameters seeded as
//! (theta, v) yields the exact Hessian-vector product H·v in the tangent
//! slot — no finite differencing anywhere.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    /// Primal value. Branch decisions (relu, pooling, clamps) must use this
    /// so dual numbers follow the same branch as their primal run.
    fn primal(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f32 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn primal(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
}

impl Real for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn primal(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Forward-mode dual number: value plus directional derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<F> {
    pub v: F,
    pub d: F,
}

impl<F: Real> Dual<F> {
    pub fn new(v: F, d: F) -> Self {
        Self { v, d }
    }

    pub fn seeded(value: f64, tangent: f64) -> Self {
        Self {
            v: F::from_f64(value),
            d: F::from_f64(tangent),
        }
    }

    pub fn constant(value: f64) -> Self {
        Self {
            v: F::from_f64(value),
            d: F::zero(),
        }
    }
}

impl<F: Real> Add for Dual<F> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.v + rhs.v, self.d + rhs.d)
    }
}

impl<F: Real> Sub for Dual<F> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.v - rhs.v, self.d - rhs.d)
    }
}

impl<F: Real> Mul for Dual<F> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self::new(self.v * rhs.v, self.v * rhs.d + self.d * rhs.v)
    }
}

impl<F: Real> Div for Dual<F> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let v = self.v / rhs.v;
        Self::new(v, (self.d - v * rhs.d) / rhs.v)
    }
}

impl<F: Real> Neg for Dual<F> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.v, -self.d)
    }
}

impl<F: Real> AddAssign for Dual<F> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<F: Real> Real for Dual<F> {
    fn zero() -> Self {
        Self::new(F::zero(), F::zero())
    }
    fn one() -> Self {
        Self::new(F::one(), F::zero())
    }
    fn from_f64(x: f64) -> Self {
        Self::constant(x)
    }
    fn primal(self) -> f64 {
        self.v.primal()
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Self::new(e, self.d * e)
    }
    fn ln(self) -> Self {
        Self::new(self.v.ln(), self.d / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Self::new(s, self.d / (s + s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn dual_chain_rule_matches_hand_derivative() {
        // f(x) = ln(sqrt(x) + exp(x)) at x = 0.7
        let x = 0.7f64;
        let d = Dual::<f64>::seeded(x, 1.0);
        let f = (d.sqrt() + d.exp()).ln();
        let inner = x.sqrt() + x.exp();
        let expect = (0.5 / x.sqrt() + x.exp()) / inner;
        assert!(close(f.v, inner.ln(), 1e-14));
        assert!(close(f.d, expect, 1e-12));
    }

    #[test]
    fn dual_division_quotient_rule() {
        let a = Dual::<f64>::seeded(3.0, 0.5);
        let b = Dual::<f64>::seeded(2.0, -1.0);
        let q = a / b;
        assert!(close(q.v, 1.5, 1e-15));
        // (a'b - ab') / b^2 = (0.5*2 - 3*(-1)) / 4 = 1.0
        assert!(close(q.d, 1.0, 1e-15));
    }

    #[test]
    fn constants_carry_zero_tangent() {
        let c = Dual::<f32>::from_f64(4.25);
        assert_eq!(c.v, 4.25);
        assert_eq!(c.d, 0.0);
    }
}
