//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64`s,
//! good for about 32 significant digits.
//!
//! Used only as a reference precision for finite-difference checks. Full
//! precision is carried by the arithmetic operators, `sqrt`, `exp`, `exp_m1`,
//! `ln` and `tanh`, which are all the tape ops need. The remaining `Float`
//! methods round through `f64`.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use super::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    fn from_f64_exact(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    /// Multiply by `2^k`, exactly.
    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Self { hi: self.hi * s, lo: self.lo * s }
    }

    /// `e^r − 1` for `|r| ≤ ln 2 / 2`: Taylor series on `r / 1024`, then ten
    /// doublings of the form `p ← p·(p + 2)`.
    fn expm1_reduced(r: Self) -> Self {
        let s = r.ldexp(-10);
        let mut term = s;
        let mut p = s;
        for n in 2..30 {
            term = term * s / Self::from_f64_exact(n as f64);
            p = p + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..10 {
            p = p * (p + Self::from_f64_exact(2.0));
        }
        p
    }

    fn split_ln2(self) -> (i32, Self) {
        let k = (self.hi / std::f64::consts::LN_2).round();
        (k as i32, self - LN2 * Self::from_f64_exact(k))
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Self::from_f64_exact(v)
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&(self.hi + self.lo), f)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for Dd {
    type Output = Self;
    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        if !s.is_finite() {
            return Self::from_f64_exact(s);
        }
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::norm(s, e + f)
    }
}

impl Sub for Dd {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        if !p.is_finite() {
            return Self::from_f64_exact(p);
        }
        Self::norm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        if !q1.is_finite() || o.hi == 0.0 {
            return Self::from_f64_exact(q1);
        }
        let r = self - o * Self::from_f64_exact(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Self::from_f64_exact(q2);
        let q3 = r.hi / o.hi;
        Self::norm(q1, q2) + Self::from_f64_exact(q3)
    }
}

impl Rem for Dd {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        self - (self / o).trunc() * o
    }
}

impl Sum for Dd {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Self::from_f64_exact(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Self::from_f64_exact(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::from_f64_exact)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.to_f64()?.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.to_f64()?.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        // the part of n that did not fit in 53 bits
        let lo = (n as i128 - hi as i128) as f64;
        Some(Self::norm(hi, lo))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        let lo = (n as i128 - hi as i128) as f64;
        Some(Self::norm(hi, lo))
    }
    fn from_f64(v: f64) -> Option<Self> {
        Some(Self::from_f64_exact(v))
    }
}

impl NumCast for Dd {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Self::from_f64_exact)
    }
}

macro_rules! via_f64 {
    ($($name:ident),*) => {
        $(fn $name(self) -> Self { Self::from_f64_exact(self.hi.$name()) })*
    };
}

impl Float for Dd {
    fn nan() -> Self {
        Self::from_f64_exact(f64::NAN)
    }
    fn infinity() -> Self {
        Self::from_f64_exact(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::from_f64_exact(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::from_f64_exact(-0.0)
    }
    fn min_value() -> Self {
        Self::from_f64_exact(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::from_f64_exact(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Self::from_f64_exact(f64::EPSILON * f64::EPSILON)
    }
    fn max_value() -> Self {
        Self::from_f64_exact(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            Self::norm(hi, self.lo.floor())
        } else {
            Self::from_f64_exact(hi)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        if self.hi >= 0.0 {
            (self + Self::from_f64_exact(0.5)).floor()
        } else {
            -((-self) + Self::from_f64_exact(0.5)).floor()
        }
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::from_f64_exact(self.hi.signum())
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
        Self::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::from_f64_exact(self.hi.sqrt());
        }
        let y = Self::from_f64_exact(self.hi.sqrt());
        // one Newton step doubles the 53 correct bits
        y + (self - y * y) / (y + y)
    }
    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Self::infinity();
        }
        if self.hi < -745.0 {
            return Self::zero();
        }
        let (k, r) = self.split_ln2();
        (Self::expm1_reduced(r) + Self::one()).ldexp(k)
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::from_f64_exact(self.hi.ln());
        }
        // Newton on exp(y) = x, quadratic from a 53-bit start
        let mut y = Self::from_f64_exact(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Self::one();
        }
        y
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / Self::from_f64_exact(10.0).ln()
    }
    fn max(self, o: Self) -> Self {
        if self.is_nan() || o > self {
            o
        } else {
            self
        }
    }
    fn min(self, o: Self) -> Self {
        if self.is_nan() || o < self {
            o
        } else {
            self
        }
    }
    fn abs_sub(self, o: Self) -> Self {
        if self > o {
            self - o
        } else {
            Self::zero()
        }
    }
    fn hypot(self, o: Self) -> Self {
        (self * self + o * o).sqrt()
    }
    fn atan2(self, o: Self) -> Self {
        Self::from_f64_exact(self.hi.atan2(o.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        if self.hi.abs() < 0.5 * std::f64::consts::LN_2 {
            Self::expm1_reduced(self)
        } else {
            self.exp() - Self::one()
        }
    }
    fn ln_1p(self) -> Self {
        (self + Self::one()).ln()
    }
    fn sinh(self) -> Self {
        let e = self.exp_m1();
        // (e^x − e^−x)/2 written through expm1 to keep small arguments exact
        (e + e / (e + Self::one())) / Self::from_f64_exact(2.0)
    }
    fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()) / Self::from_f64_exact(2.0)
    }
    fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return Self::from_f64_exact(self.hi.signum());
        }
        let e = (self + self).exp_m1();
        e / (e + Self::from_f64_exact(2.0))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
    via_f64!(cbrt, sin, cos, tan, asin, acos, atan, asinh, acosh, atanh);
}

impl Real for Dd {
    // serialized at f64 precision
    const DTYPE: u8 = 1;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Dd],
        rsa: isize,
        csa: isize,
        b: &[Dd],
        rsb: isize,
        csb: isize,
        beta: Dd,
        c: &mut [Dd],
        rsc: isize,
        csc: isize,
    ) {
        let at = |s: &[Dd], i: usize, j: usize, rs: isize, cs: isize| s[(i as isize * rs + j as isize * cs) as usize];
        for i in 0..m {
            for j in 0..n {
                let mut acc = Dd::zero();
                for p in 0..k {
                    acc = acc + at(a, i, p, rsa, csa) * at(b, p, j, rsb, csb);
                }
                let idx = (i as isize * rsc + j as isize * csc) as usize;
                // like the f64 kernel, beta = 0 never reads c
                c[idx] = if beta.is_zero() { acc } else { acc + beta * c[idx] };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: f64) -> Dd {
        Dd::new(v, 0.0)
    }

    fn close(a: Dd, want_hi: f64, want_lo: f64, tol: f64) {
        let d = (a - Dd::new(want_hi, want_lo)).abs();
        assert!(d.hi <= tol * want_hi.abs().max(1e-300), "{a:?} vs {want_hi:e}+{want_lo:e}");
    }

    #[test]
    fn arithmetic_beyond_f64() {
        let third = Dd::one() / d(3.0);
        let back = third * d(3.0);
        assert!((back - Dd::one()).abs().hi < 1e-31);
        let tiny = d(1.0) + d(1e-20);
        assert_eq!((tiny - Dd::one()).hi, 1e-20);
    }

    #[test]
    fn transcendental_identities() {
        for &x in &[-3.7, -0.3, 1e-9, 0.25, 1.0, 5.5] {
            let x = d(x);
            assert!((x.exp().ln() - x).abs().hi < 1e-30 * x.hi.abs().max(1.0));
            let s = x.exp_m1();
            let e = x.exp() - Dd::one();
            assert!((s - e).abs().hi < 1e-30 * s.hi.abs().max(1.0));
            let r = x.abs().sqrt();
            assert!((r * r - x.abs()).abs().hi < 1e-30 * x.hi.abs());
            let t = x.tanh();
            let (ep, em) = (x.exp(), (-x).exp());
            assert!((t - (ep - em) / (ep + em)).abs().hi < 1e-29);
        }
    }

    #[test]
    fn known_constants() {
        // e = 2.718281828459045 + 1.4456468917292502e-16
        close(Dd::one().exp(), std::f64::consts::E, 1.445_646_891_729_250_2e-16, 1e-31);
        close(d(2.0).sqrt(), std::f64::consts::SQRT_2, -9.667_293_313_452_913e-17, 1e-31);
        close(d(2.0).ln(), LN2.hi, LN2.lo, 1e-31);
    }

    #[test]
    fn gemm_matches_f64_on_exact_inputs() {
        let a: Vec<Dd> = (0..6).map(|v| d(v as f64)).collect();
        let b: Vec<Dd> = (0..6).map(|v| d(1.0 + v as f64)).collect();
        let mut c = vec![d(f64::NAN); 4];
        Dd::gemm(2, 3, 2, &a, 3, 1, &b, 2, 1, Dd::zero(), &mut c, 2, 1);
        let got: Vec<f64> = c.iter().map(|v| v.hi).collect();
        assert_eq!(got, vec![13.0, 16.0, 40.0, 52.0]);
    }
}
