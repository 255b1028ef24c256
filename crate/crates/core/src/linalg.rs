//! Fixed-size linear algebra and plane geometry for the 2-D state space.
//!
//! Every quantity in this crate lives in the plane: states, drifts,
//! gradients, and the 2x2 matrices (Jacobians, diffusion tensors, Hessians)
//! acting on them. Two tiny copy types keep that arithmetic allocation-free;
//! nothing here is meant to generalize beyond n = 2. The module also hosts
//! the segment predicates used by separatrix crossing tests and the 3x3
//! Gaussian solve backing the Lyapunov equations in [`crate::landscape`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Point or vector in the 2-D state space, components `(x1, x2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateVec {
    pub x1: f64,
    pub x2: f64,
}

impl StateVec {
    pub const ZERO: Self = Self { x1: 0.0, x2: 0.0 };

    pub fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x1 * other.x1 + self.x2 * other.x2
    }

    /// z-component of the 3-D cross product; sign gives the turn direction.
    pub fn cross(self, other: Self) -> f64 {
        self.x1 * other.x2 - self.x2 * other.x1
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(self, other: Self) -> f64 {
        (self - other).norm()
    }

    /// Unit vector in the same direction; `None` for vectors shorter than `1e-300`.
    pub fn unit(self) -> Option<Self> {
        let n = self.norm();
        (n > 1e-300).then(|| self / n)
    }

    pub fn is_finite(self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }
}

impl Add for StateVec {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x1 + o.x1, self.x2 + o.x2)
    }
}

impl Sub for StateVec {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x1 - o.x1, self.x2 - o.x2)
    }
}

impl Neg for StateVec {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x1, -self.x2)
    }
}

impl Mul<f64> for StateVec {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x1 * s, self.x2 * s)
    }
}

impl Mul<StateVec> for f64 {
    type Output = StateVec;
    fn mul(self, v: StateVec) -> StateVec {
        v * self
    }
}

impl Div<f64> for StateVec {
    type Output = Self;
    fn div(self, s: f64) -> Self {
        Self::new(self.x1 / s, self.x2 / s)
    }
}

impl AddAssign for StateVec {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for StateVec {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

/// Dense 2x2 matrix, row-major fields `m{row}{col}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub m11: f64,
    pub m12: f64,
    pub m21: f64,
    pub m22: f64,
}

impl Mat2 {
    pub const IDENTITY: Self = Self {
        m11: 1.0,
        m12: 0.0,
        m21: 0.0,
        m22: 1.0,
    };

    pub fn new(m11: f64, m12: f64, m21: f64, m22: f64) -> Self {
        Self { m11, m12, m21, m22 }
    }

    pub fn diag(d1: f64, d2: f64) -> Self {
        Self::new(d1, 0.0, 0.0, d2)
    }

    pub fn det(self) -> f64 {
        self.m11 * self.m22 - self.m12 * self.m21
    }

    pub fn trace(self) -> f64 {
        self.m11 + self.m22
    }

    pub fn transpose(self) -> Self {
        Self::new(self.m11, self.m21, self.m12, self.m22)
    }

    pub fn mul_vec(self, v: StateVec) -> StateVec {
        StateVec::new(
            self.m11 * v.x1 + self.m12 * v.x2,
            self.m21 * v.x1 + self.m22 * v.x2,
        )
    }

    pub fn mul_mat(self, o: Self) -> Self {
        Self::new(
            self.m11 * o.m11 + self.m12 * o.m21,
            self.m11 * o.m12 + self.m12 * o.m22,
            self.m21 * o.m11 + self.m22 * o.m21,
            self.m21 * o.m12 + self.m22 * o.m22,
        )
    }

    /// Quadratic form `v^T M v`.
    pub fn quad_form(self, v: StateVec) -> f64 {
        v.dot(self.mul_vec(v))
    }

    /// Inverse; `None` when `|det|` underflows to an unusable scale.
    pub fn inverse(self) -> Option<Self> {
        let d = self.det();
        if d.abs() < 1e-300 {
            return None;
        }
        Some(Self::new(
            self.m22 / d,
            -self.m12 / d,
            -self.m21 / d,
            self.m11 / d,
        ))
    }

    /// Solves `M u = rhs` by Cramer's rule.
    pub fn solve(self, rhs: StateVec) -> Option<StateVec> {
        let d = self.det();
        if d.abs() < 1e-300 {
            return None;
        }
        Some(StateVec::new(
            (rhs.x1 * self.m22 - self.m12 * rhs.x2) / d,
            (self.m11 * rhs.x2 - rhs.x1 * self.m21) / d,
        ))
    }

    /// Eigenvalues ordered by descending real part, then descending
    /// imaginary part (complex pairs come out conjugate).
    pub fn eigenvalues(self) -> [Complex64; 2] {
        let half_tr = 0.5 * self.trace();
        let disc = half_tr * half_tr - self.det();
        if disc >= 0.0 {
            let s = disc.sqrt();
            [
                Complex64::new(half_tr + s, 0.0),
                Complex64::new(half_tr - s, 0.0),
            ]
        } else {
            let s = (-disc).sqrt();
            [Complex64::new(half_tr, s), Complex64::new(half_tr, -s)]
        }
    }

    /// Real unit eigenvector for a real eigenvalue `lambda` of this matrix.
    ///
    /// Picks the numerically larger row of `M - lambda I`; falls back to a
    /// coordinate axis when the matrix is already (near-)diagonal.
    pub fn real_eigenvector(self, lambda: f64) -> StateVec {
        let r1 = StateVec::new(self.m11 - lambda, self.m12);
        let r2 = StateVec::new(self.m21, self.m22 - lambda);
        // The eigenvector is orthogonal to every row of M - lambda I.
        let (row, other) = if r1.norm_sq() >= r2.norm_sq() {
            (r1, r2)
        } else {
            (r2, r1)
        };
        let v = StateVec::new(-row.x2, row.x1);
        match v.unit() {
            Some(u) => u,
            // Both rows vanished: lambda I, any direction works.
            None => {
                let _ = other;
                StateVec::new(1.0, 0.0)
            }
        }
    }

    pub fn is_finite(self) -> bool {
        self.m11.is_finite() && self.m12.is_finite() && self.m21.is_finite() && self.m22.is_finite()
    }
}

impl Add for Mat2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(
            self.m11 + o.m11,
            self.m12 + o.m12,
            self.m21 + o.m21,
            self.m22 + o.m22,
        )
    }
}

impl Sub for Mat2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(
            self.m11 - o.m11,
            self.m12 - o.m12,
            self.m21 - o.m21,
            self.m22 - o.m22,
        )
    }
}

impl Mul<f64> for Mat2 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.m11 * s, self.m12 * s, self.m21 * s, self.m22 * s)
    }
}

/// Axis-aligned rectangle in state space, used for training domains and as
/// the working window of manifold and path integrations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
}

impl BoxRegion {
    pub fn new(x1_min: f64, x1_max: f64, x2_min: f64, x2_max: f64) -> Self {
        Self {
            x1_min,
            x1_max,
            x2_min,
            x2_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1_min < self.x1_max && self.x2_min < self.x2_max
    }

    pub fn contains(&self, x: StateVec) -> bool {
        x.x1 >= self.x1_min && x.x1 <= self.x1_max && x.x2 >= self.x2_min && x.x2 <= self.x2_max
    }

    /// The same region grown by `margin` on every side.
    pub fn padded(&self, margin: f64) -> Self {
        Self {
            x1_min: self.x1_min - margin,
            x1_max: self.x1_max + margin,
            x2_min: self.x2_min - margin,
            x2_max: self.x2_max + margin,
        }
    }

    /// Uniform sample; draws `x1` then `x2` from the given generator.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> StateVec {
        StateVec::new(
            rng.random_range(self.x1_min..self.x1_max),
            rng.random_range(self.x2_min..self.x2_max),
        )
    }
}

/// Solves a 3x3 linear system by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot degenerates (singular to machine precision).
pub fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let pivot_row = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot_row][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot_row);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut s = m[row][3];
        for k in row + 1..3 {
            s -= m[row][k] * x[k];
        }
        x[row] = s / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Shortest distance from point `p` to the segment `a`--`b`.
pub fn point_segment_distance(p: StateVec, a: StateVec, b: StateVec) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq <= 1e-300 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Whether segments `p1`--`p2` and `q1`--`q2` intersect (touching counts).
///
/// Robust orientation-sign test; collinear overlaps are treated as
/// intersections, which is the conservative choice for crossing detectors.
pub fn segments_intersect(p1: StateVec, p2: StateVec, q1: StateVec, q2: StateVec) -> bool {
    fn orient(a: StateVec, b: StateVec, c: StateVec) -> f64 {
        (b - a).cross(c - a)
    }
    fn on_segment(a: StateVec, b: StateVec, c: StateVec) -> bool {
        c.x1 >= a.x1.min(b.x1)
            && c.x1 <= a.x1.max(b.x1)
            && c.x2 >= a.x2.min(b.x2)
            && c.x2 <= a.x2.max(b.x2)
    }
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Classic fourth-order Runge--Kutta step for a fallible right-hand side.
pub fn rk4_step<const N: usize, E>(
    f: &mut impl FnMut(&[f64; N]) -> Result<[f64; N], E>,
    y: &[f64; N],
    h: f64,
) -> Result<[f64; N], E> {
    let k1 = f(y)?;
    let mut y2 = *y;
    for i in 0..N {
        y2[i] = y[i] + 0.5 * h * k1[i];
    }
    let k2 = f(&y2)?;
    for i in 0..N {
        y2[i] = y[i] + 0.5 * h * k2[i];
    }
    let k3 = f(&y2)?;
    for i in 0..N {
        y2[i] = y[i] + h * k3[i];
    }
    let k4 = f(&y2)?;
    let mut out = *y;
    for i in 0..N {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}
