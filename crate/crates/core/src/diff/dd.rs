//! Double-double scalar: an unevaluated sum `hi + lo` of two `f64` values
//! carrying roughly 106 bits of significand.
//!
//! Only the operations the graph uses in a forward pass are computed to
//! full precision: arithmetic, comparisons, `sqrt`, `exp`, `ln`, `tanh`,
//! `powi`, `abs`, `max` and `min`. Everything else rounds through `f64`.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float as _, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use super::Float;

#[derive(Clone, Copy, Debug, Default)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub fn new(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }

    /// Exact sum of two doubles.
    pub fn sum_of(a: f64, b: f64) -> Self {
        let (hi, lo) = two_sum(a, b);
        DoubleDouble { hi, lo }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        DoubleDouble { hi, lo }
    }

    /// Multiplication by a power of two; exact barring overflow.
    fn scale2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        DoubleDouble { hi: self.hi * f, lo: self.lo * f }
    }

    fn dd_exp(self) -> Self {
        if self.hi > 709.78 {
            return Self::new(f64::INFINITY);
        }
        if self.hi < -745.2 {
            return Self::new(0.0);
        }
        if self.hi == 0.0 {
            return Self::new(1.0);
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Self::new(k)).scale2(-10);
        // Taylor series of exp(r) − 1; |r| < 4e-4 so 12 terms are plenty
        let mut term = r;
        let mut sum = r;
        for n in 2..=12 {
            term = term * r / Self::new(n as f64);
            sum += term;
        }
        // (1 + s)² − 1 = 2s + s² keeps the small part exact through squaring
        for _ in 0..10 {
            sum = sum * Self::new(2.0) + sum * sum;
        }
        (sum + Self::new(1.0)).scale2(k as i32)
    }

    fn dd_ln(self) -> Self {
        if self.hi <= 0.0 || self.hi.is_nan() {
            return Self::new(if self.hi == 0.0 { f64::NEG_INFINITY } else { f64::NAN });
        }
        if self.hi.is_infinite() {
            return self;
        }
        let mut y = Self::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).dd_exp() - Self::new(1.0);
        }
        y
    }

    fn dd_sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::new(self.hi.sqrt());
        }
        let x = Self::new(self.hi.sqrt());
        x + (self - x * x) / (x * Self::new(2.0))
    }

    fn dd_tanh(self) -> Self {
        let a = self.abs();
        if a.hi > 40.0 {
            return Self::new(self.hi.signum());
        }
        if a.hi < 1e-3 {
            // odd series; the first dropped term is below 1e-33
            let x2 = self * self;
            let mut term = self;
            let mut sum = self;
            for (num, den) in [(-1.0, 3.0), (2.0, 15.0), (-17.0, 315.0), (62.0, 2835.0), (-1382.0, 155_925.0)] {
                term *= x2;
                sum += term * Self::new(num) / Self::new(den);
            }
            return sum;
        }
        let e = (a * Self::new(-2.0)).dd_exp();
        let t = (Self::new(1.0) - e) / (Self::new(1.0) + e);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }
}

impl PartialEq for DoubleDouble {
    fn eq(&self, other: &Self) -> bool {
        self.hi == other.hi && self.lo == other.lo
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        if !s.is_finite() {
            return Self::new(s);
        }
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::norm(s, e + f)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + -b
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        if !p.is_finite() {
            return Self::new(p);
        }
        Self::norm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() {
            return Self::new(q1);
        }
        let r = self - b * Self::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Self::new(q2);
        let q3 = r.hi / b.hi;
        Self::norm(q1, q2) + Self::new(q3)
    }
}

impl Rem for DoubleDouble {
    type Output = Self;
    fn rem(self, b: Self) -> Self {
        self - b * (self / b).trunc()
    }
}

impl AddAssign for DoubleDouble {
    fn add_assign(&mut self, b: Self) {
        *self = *self + b;
    }
}

impl SubAssign for DoubleDouble {
    fn sub_assign(&mut self, b: Self) {
        *self = *self - b;
    }
}

impl MulAssign for DoubleDouble {
    fn mul_assign(&mut self, b: Self) {
        *self = *self * b;
    }
}

impl DivAssign for DoubleDouble {
    fn div_assign(&mut self, b: Self) {
        *self = *self / b;
    }
}

impl std::iter::Sum for DoubleDouble {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::new(0.0), |a, b| a + b)
    }
}

impl fmt::Display for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.hi)
    }
}

impl Zero for DoubleDouble {
    fn zero() -> Self {
        Self::new(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for DoubleDouble {
    fn one() -> Self {
        Self::new(1.0)
    }
}

impl Num for DoubleDouble {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::new)
    }
}

impl ToPrimitive for DoubleDouble {
    fn to_i64(&self) -> Option<i64> {
        self.hi.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.hi.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for DoubleDouble {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::norm(hi, (n - hi as i64) as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::norm(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_f64(x: f64) -> Option<Self> {
        Some(Self::new(x))
    }
}

impl NumCast for DoubleDouble {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Self::new)
    }
}

macro_rules! via_f64 {
    ($($name:ident),*) => {
        $(fn $name(self) -> Self { Self::new(self.hi.$name()) })*
    };
}

impl num_traits::Float for DoubleDouble {
    fn nan() -> Self {
        Self::new(f64::NAN)
    }
    fn infinity() -> Self {
        Self::new(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::new(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::new(-0.0)
    }
    fn min_value() -> Self {
        Self::new(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::new(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Self::new(f64::MAX)
    }
    fn epsilon() -> Self {
        Self::new(f64::EPSILON * f64::EPSILON)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let f = self.hi.floor();
        if f == self.hi {
            Self::norm(f, self.lo.floor())
        } else {
            Self::new(f)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        (self + Self::new(0.5)).floor()
    }
    fn trunc(self) -> Self {
        if self.hi < 0.0 {
            self.ceil()
        } else {
            self.floor()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::new(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Self::new(1.0) / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Self::new(1.0);
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (n * self.dd_ln()).dd_exp()
    }
    fn sqrt(self) -> Self {
        self.dd_sqrt()
    }
    fn exp(self) -> Self {
        self.dd_exp()
    }
    fn ln(self) -> Self {
        self.dd_ln()
    }
    fn log(self, base: Self) -> Self {
        self.dd_ln() / base.dd_ln()
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    #[allow(deprecated)]
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::new(0.0)
        }
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).dd_sqrt()
    }
    fn tanh(self) -> Self {
        self.dd_tanh()
    }
    fn atan2(self, other: Self) -> Self {
        Self::new(self.hi.atan2(other.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (Self::new(self.hi.sin()), Self::new(self.hi.cos()))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        num_traits::Float::integer_decode(self.hi)
    }
    via_f64!(exp2, log2, log10, cbrt, sin, cos, tan, asin, acos, atan, exp_m1, ln_1p, sinh, cosh, asinh, acosh, atanh);
}

impl Float for DoubleDouble {
    const DTYPE: &'static str = "f64x2";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m as isize {
            for j in 0..n as isize {
                let mut acc = Self::new(0.0);
                for p in 0..k as isize {
                    acc += *a.offset(i * rsa + p * csa) * *b.offset(p * rsb + j * csb);
                }
                let out = c.offset(i * rsc + j * csc);
                *out = if beta.is_zero() { alpha * acc } else { alpha * acc + beta * *out };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;


    fn dd(x: f64) -> DoubleDouble {
        DoubleDouble::new(x)
    }

    /// `|a − b|` as a double, with `b` given as a high and low part.
    fn gap(a: DoubleDouble, hi: f64, lo: f64) -> f64 {
        (a - DoubleDouble::sum_of(hi, lo)).abs().to_f64().unwrap()
    }

    #[test]
    fn arithmetic_keeps_the_low_word() {
        let third = dd(1.0) / dd(3.0);
        let back = third * dd(3.0) - dd(1.0);
        assert!(back.abs().hi() < 1e-31, "{:e}", back.hi());
        let tiny = (dd(1.0) + dd(1e-20)) - dd(1.0);
        assert!((tiny.hi() - 1e-20).abs() < 1e-36);
    }

    #[test]
    fn transcendental_functions_match_known_expansions() {
        // e = 2.718281828459045 + 1.4456468917292502e-16
        assert!(gap(dd(1.0).exp(), std::f64::consts::E, 1.445_646_891_729_250_2e-16) < 1e-30);
        assert!(gap(dd(2.0).ln(), LN2.hi, LN2.lo) < 1e-31);
        // sqrt 2 = 1.4142135623730951 − 9.667293313452913e-17
        assert!(gap(dd(2.0).sqrt(), std::f64::consts::SQRT_2, -9.667_293_313_452_913e-17) < 1e-31);
        for x in [-30.0, -3.7, -0.4, -1e-4, 2e-7, 0.01, 0.9, 5.5, 25.0] {
            let v = dd(x);
            let round = v.exp().ln() - v;
            assert!(round.abs().hi() < 1e-29 * x.abs().max(1.0), "exp/ln at {x}: {:e}", round.hi());
            let t = v.tanh();
            assert!((t.hi() - x.tanh()).abs() <= 2e-16 * x.tanh().abs().max(1e-300));
            // tanh via the exponential identity, away from cancellation
            if x.abs() > 0.1 {
                let e = (v * dd(2.0)).exp();
                let alt = (e - dd(1.0)) / (e + dd(1.0));
                assert!((t - alt).abs().hi() < 1e-30, "tanh at {x}");
            }
        }
        let small = dd(3e-4);
        let alt = {
            let e = small.exp();
            let inv = e.recip();
            (e - inv) / (e + inv)
        };
        assert!((small.tanh() - alt).abs().hi() < 1e-30);
    }

    #[test]
    fn ordering_and_powers() {
        let a = DoubleDouble::sum_of(1.0, 1e-20);
        assert!(a > dd(1.0) && dd(1.0) < a);
        assert_eq!(a.max(dd(1.0)), a);
        assert!((dd(1.1).powi(7) - dd(1.1) * dd(1.1) * dd(1.1) * dd(1.1) * dd(1.1) * dd(1.1) * dd(1.1)).abs().hi() < 1e-30);
        assert!((dd(2.0).powi(-3) - dd(0.125)).abs().hi() == 0.0);
    }
}
