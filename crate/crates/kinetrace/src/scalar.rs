//! Scalar abstraction used by the kinematics and dynamics kernels.
//!
//! The recursive algorithms (forward kinematics, velocity/acceleration
//! propagation, inverse dynamics) are written once over [`Real`] and run
//! either on plain `f64` or on forward-mode dual numbers, which is how the
//! solver obtains exact Jacobians of those recursions.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Minimal scalar interface for the generic kernels.
pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    /// Value part (drops any derivative information).
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan2(self, other: Self) -> Self;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn atan2(self, other: Self) -> Self {
        f64::atan2(self, other)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Forward-mode dual number carrying one derivative channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Dual { re, eps }
    }

    /// Constant (zero derivative).
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: 0.0 }
    }

    /// Value with unit derivative, used to seed a differentiation direction.
    pub fn seeded(re: f64) -> Self {
        Dual { re, eps: 1.0 }
    }
}

impl PartialOrd for Dual {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.eps + rhs.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.re - rhs.re, self.eps - rhs.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.re * rhs.eps + self.eps * rhs.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.re;
        Dual::new(
            self.re * inv,
            (self.eps - self.re * rhs.eps * inv) * inv,
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl Real for Dual {
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps * 0.5 / s)
    }
    fn sin(self) -> Self {
        Dual::new(self.re.sin(), self.eps * self.re.cos())
    }
    fn cos(self) -> Self {
        Dual::new(self.re.cos(), -self.eps * self.re.sin())
    }
    fn atan2(self, other: Self) -> Self {
        let (y, x) = (self, other);
        let d = x.re * x.re + y.re * y.re;
        Dual::new(y.re.atan2(x.re), (x.re * y.eps - y.re * x.eps) / d)
    }
    fn abs(self) -> Self {
        if self.re < 0.0 {
            -self
        } else {
            self
        }
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-7;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn dual_matches_finite_differences_on_composite_expression() {
        let g = |x: f64| (x.sin() * x.sqrt() + 3.0 / x).cos() * x + (x.exp() * 0.01 + x).ln();
        let gd = |x: Dual| {
            (x.sin() * x.sqrt() + Dual::constant(3.0) / x).cos() * x
                + (x.exp() * Dual::constant(0.01) + x).ln()
        };
        for &x in &[0.3, 1.0, 2.7, 11.0] {
            let d = gd(Dual::seeded(x));
            assert!((d.re - g(x)).abs() < 1e-12);
            assert!((d.eps - fd(g, x)).abs() < 2e-5, "x={x}: {} vs {}", d.eps, fd(g, x));
        }
    }

    #[test]
    fn dual_atan2_derivative() {
        let f = |y: f64| y.atan2(2.0);
        let d = Dual::seeded(0.7).atan2(Dual::constant(2.0));
        assert!((d.eps - fd(f, 0.7)).abs() < 1e-8);

        let g = |x: f64| 0.7f64.atan2(x);
        let d = Dual::constant(0.7).atan2(Dual::seeded(2.0));
        assert!((d.eps - fd(g, 2.0)).abs() < 1e-8);
    }
}
