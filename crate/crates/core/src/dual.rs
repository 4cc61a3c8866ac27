//! Forward-mode tangent arithmetic.
//!
//! Model functions are written once, generic over [`Scalar`], and evaluated
//! either on plain `f64` (primal passes) or on [`Dual`] numbers carrying up to
//! [`LANES`] directional derivatives at once. [`tangent_eval`] batches an
//! arbitrary number of seed directions into passes of `LANES` tangents.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Number of tangent slots carried by one [`Dual`] evaluation.
pub const LANES: usize = 8;

/// Scalar type accepted by model functions.
pub trait Scalar:
    Copy
    + Debug
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
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    fn re(&self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn recip(self) -> Self {
        Self::cst(1.0) / self
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
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
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// A value with `N` directional derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

/// The dual type used by all Jacobian evaluations in this crate.
pub type Tan = Dual<LANES>;

impl<const N: usize> Dual<N> {
    pub fn new(re: f64, eps: [f64; N]) -> Self {
        Self { re, eps }
    }

    /// Chain rule for a unary function with value `v` and derivative `d`.
    #[inline]
    fn chain(self, v: f64, d: f64) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= d;
        }
        Self { re: v, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + self.re * rhs.eps[i];
        }
        Self { re: self.re * rhs.re, eps }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - re * rhs.eps[i]) * inv;
        }
        Self { re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for e in self.eps.iter_mut() {
            *e = -*e;
        }
        self
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.re *= rhs;
        for e in self.eps.iter_mut() {
            *e *= rhs;
        }
        self
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const N: usize> MulAssign for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Scalar for Dual<N> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self { re: v, eps: [0.0; N] }
    }
    #[inline]
    fn re(&self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), 1.0 / self.re)
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, 1.0 - t * t)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::cst(1.0);
        }
        let d = n as f64 * self.re.powi(n - 1);
        self.chain(self.re.powi(n), d)
    }
}

/// Evaluation point of a model map `(t, x, z, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub t: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
}

impl Point {
    pub fn new(t: f64, x: &[f64], z: &[f64], p: &[f64]) -> Self {
        Self { t, x: x.to_vec(), z: z.to_vec(), p: p.to_vec() }
    }

    fn flat_len(&self) -> usize {
        1 + self.x.len() + self.z.len() + self.p.len()
    }
}

/// A seed direction `(dt, dx, dz, dp)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Seed {
    pub dt: f64,
    pub dx: Vec<f64>,
    pub dz: Vec<f64>,
    pub dp: Vec<f64>,
}

impl Seed {
    pub fn zeros(point: &Point) -> Self {
        Self {
            dt: 0.0,
            dx: vec![0.0; point.x.len()],
            dz: vec![0.0; point.z.len()],
            dp: vec![0.0; point.p.len()],
        }
    }

    fn write_flat(&self, out: &mut [f64]) {
        out[0] = self.dt;
        let mut o = 1;
        for v in [&self.dx, &self.dz, &self.dp] {
            out[o..o + v.len()].copy_from_slice(v);
            o += v.len();
        }
    }
}

/// Value of a vector map plus one tangent column per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentBundle {
    pub value: DVector<f64>,
    pub tangents: DMatrix<f64>,
}

/// Directional derivatives of `f: R^n -> R^m` at `input` along the columns of
/// `directions` (n x k), evaluated in passes of [`LANES`] tangents.
pub fn jvp_flat<F>(input: &[f64], directions: &DMatrix<f64>, n_out: usize, f: F) -> Result<TangentBundle>
where
    F: Fn(&[Tan], &mut [Tan]),
{
    let n = input.len();
    if directions.nrows() != n {
        return Err(Error::InvalidArgument(format!(
            "seed length {} does not match input length {}",
            directions.nrows(),
            n
        )));
    }
    let k = directions.ncols();
    let mut value = DVector::zeros(n_out);
    let mut tangents = DMatrix::zeros(n_out, k);
    let mut args = vec![Tan::cst(0.0); n];
    let mut out = vec![Tan::cst(0.0); n_out];
    let passes = k.div_ceil(LANES).max(1);
    for pass in 0..passes {
        let c0 = pass * LANES;
        let width = LANES.min(k.saturating_sub(c0));
        for (i, a) in args.iter_mut().enumerate() {
            a.re = input[i];
            a.eps = [0.0; LANES];
            for l in 0..width {
                a.eps[l] = directions[(i, c0 + l)];
            }
        }
        for o in out.iter_mut() {
            *o = Tan::cst(0.0);
        }
        f(&args, &mut out);
        for (r, o) in out.iter().enumerate() {
            if pass == 0 {
                value[r] = o.re;
            }
            for l in 0..width {
                tangents[(r, c0 + l)] = o.eps[l];
            }
        }
    }
    if value.iter().chain(tangents.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { context: "tangent_eval".into() });
    }
    Ok(TangentBundle { value, tangents })
}

/// Exact directional derivatives of a model map `fn(t, x, z, p, out)` at
/// `point` along each seed.
pub fn tangent_eval<F>(point: &Point, seeds: &[Seed], n_out: usize, f: F) -> Result<TangentBundle>
where
    F: Fn(Tan, &[Tan], &[Tan], &[Tan], &mut [Tan]),
{
    let n = point.flat_len();
    let (nx, nz) = (point.x.len(), point.z.len());
    let mut input = Vec::with_capacity(n);
    input.push(point.t);
    input.extend_from_slice(&point.x);
    input.extend_from_slice(&point.z);
    input.extend_from_slice(&point.p);
    let mut dirs = DMatrix::zeros(n, seeds.len());
    let mut col = vec![0.0; n];
    for (j, s) in seeds.iter().enumerate() {
        if s.dx.len() != nx || s.dz.len() != nz || s.dp.len() != point.p.len() {
            return Err(Error::InvalidArgument("seed dimensions do not match point".into()));
        }
        s.write_flat(&mut col);
        dirs.set_column(j, &DVector::from_column_slice(&col));
    }
    jvp_flat(&input, &dirs, n_out, |a, out| {
        f(a[0], &a[1..1 + nx], &a[1 + nx..1 + nx + nz], &a[1 + nx + nz..], out)
    })
}
