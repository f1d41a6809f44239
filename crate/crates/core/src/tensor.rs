//! Dense rank-4 feature maps and channel-mixing matrices.
//!
//! A [`FeatureMap4D`] stores `C x T x H x W` scalars in row-major order with
//! the channel index outermost and the width index innermost. The spatial
//! part `T x H x W` is described by a [`Grid`] and addressed either by a
//! [`Position`] or by its flat index `(t * H + h) * W + w`.

use std::fmt;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Real scalar type the kernels are generic over (`f32` or `f64`).
pub trait Scalar:
    Float + AddAssign + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Width in bytes; doubles as the precision flag of the tensor file format.
    const BYTES: u8;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 converts to every float type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("floats convert to f64")
    }
}

impl Scalar for f32 {
    const BYTES: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A spatiotemporal location `(t, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Position {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Position { t, h, w }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.t, self.h, self.w)
    }
}

/// Extents of the spatiotemporal part of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidDims(format!(
                "grid extents must be positive, got ({t}, {h}, {w})"
            )));
        }
        Ok(Grid { t, h, w })
    }

    /// Number of positions `T * H * W`.
    #[inline]
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Criss-cross path length `T + H + W - 2`.
    #[inline]
    pub fn path_len(&self) -> usize {
        self.t + self.h + self.w - 2
    }

    #[inline]
    pub fn contains(&self, p: Position) -> bool {
        p.t < self.t && p.h < self.h && p.w < self.w
    }

    #[inline]
    pub fn index(&self, p: Position) -> usize {
        (p.t * self.h + p.h) * self.w + p.w
    }

    #[inline]
    pub fn position(&self, idx: usize) -> Position {
        let w = idx % self.w;
        let rest = idx / self.w;
        Position::new(rest / self.h, rest % self.h, w)
    }

    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        (0..self.len()).map(move |i| self.position(i))
    }

    pub fn check(&self, p: Position) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                pos: p.to_string(),
                grid: self.to_string(),
            })
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(T={}, H={}, W={})", self.t, self.h, self.w)
    }
}

/// Dense `(C, T, H, W)` array. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap4D<S> {
    channels: usize,
    grid: Grid,
    data: Vec<S>,
}

impl<S: Scalar> FeatureMap4D<S> {
    pub fn zeros(channels: usize, grid: Grid) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidDims("channel count must be positive".into()));
        }
        Ok(Self::from_parts(channels, grid, vec![S::zero(); channels * grid.len()]))
    }

    /// Builds a map from a row-major buffer, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(channels: usize, grid: Grid, data: Vec<S>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidDims("channel count must be positive".into()));
        }
        if data.len() != channels * grid.len() {
            return Err(Error::InvalidDims(format!(
                "buffer of length {} does not fit C={} x {}",
                data.len(),
                channels,
                grid
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("FeatureMap4D::from_vec"));
        }
        Ok(Self::from_parts(channels, grid, data))
    }

    pub fn from_fn(
        channels: usize,
        grid: Grid,
        mut f: impl FnMut(usize, Position) -> S,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * grid.len());
        for c in 0..channels {
            for p in grid.positions() {
                data.push(f(c, p));
            }
        }
        Self::from_vec(channels, grid, data)
    }

    pub(crate) fn from_parts(channels: usize, grid: Grid, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), channels * grid.len());
        FeatureMap4D {
            channels,
            grid,
            data,
        }
    }

    /// Same as `from_parts` but verifies finiteness of a freshly computed buffer.
    pub(crate) fn checked(op: &'static str, channels: usize, grid: Grid, data: Vec<S>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Self::from_parts(channels, grid, data))
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// `[C, T, H, W]`.
    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.grid.t, self.grid.h, self.grid.w]
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, p: Position) -> S {
        self.data[c * self.grid.len() + self.grid.index(p)]
    }

    #[inline]
    pub fn at(&self, c: usize, idx: usize) -> S {
        self.data[c * self.grid.len() + idx]
    }

    /// Channel vector at flat position `idx`.
    pub fn column(&self, idx: usize) -> Vec<S> {
        let n = self.grid.len();
        (0..self.channels).map(|c| self.data[c * n + idx]).collect()
    }

    /// Copy of this map with one element replaced.
    pub fn with_value(&self, c: usize, p: Position, value: S) -> Self {
        let mut out = self.clone();
        let n = self.grid.len();
        out.data[c * n + self.grid.index(p)] = value;
        out
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::checked("FeatureMap4D::map", self.channels, self.grid, data)
    }

    /// Converts to another precision.
    pub fn cast<T: Scalar>(&self) -> FeatureMap4D<T> {
        FeatureMap4D::from_parts(
            self.channels,
            self.grid,
            self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        )
    }

    /// Sum of all elements in a fixed order.
    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<S> {
        self.same_shape("dot", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// Row-major `(N, C)` copy: each position's channel vector is contiguous.
    pub(crate) fn to_position_major(&self) -> Vec<S> {
        let n = self.grid.len();
        let c = self.channels;
        let mut out = vec![S::zero(); n * c];
        for ch in 0..c {
            let row = &self.data[ch * n..(ch + 1) * n];
            for (u, &v) in row.iter().enumerate() {
                out[u * c + ch] = v;
            }
        }
        out
    }

    pub(crate) fn from_position_major(channels: usize, grid: Grid, buf: &[S]) -> Self {
        let n = grid.len();
        let mut data = vec![S::zero(); n * channels];
        for u in 0..n {
            for ch in 0..channels {
                data[ch * n + u] = buf[u * channels + ch];
            }
        }
        Self::from_parts(channels, grid, data)
    }

    pub(crate) fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(op, self.shape_str(), other.shape_str()));
        }
        Ok(())
    }

    pub(crate) fn shape_str(&self) -> String {
        let [c, t, h, w] = self.dims();
        format!("({c}, {t}, {h}, {w})")
    }
}

/// Dense row-major matrix; carries the 1x1x1 convolution weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, vec![S::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, n, |r, c| if r == c { S::one() } else { S::zero() })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDims(format!(
                "matrix extents must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidDims(format!(
                "buffer of length {} does not fit a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidDims("ragged matrix rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub(crate) fn get_mut(&mut self, r: usize, c: usize) -> &mut S {
        &mut self.data[r * self.cols + c]
    }

    pub fn with_value(&self, r: usize, c: usize, value: S) -> Self {
        let mut out = self.clone();
        *out.get_mut(r, c) = value;
        out
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn scale(&self, s: S) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape("Matrix::add", self.shape_str(), other.shape_str()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape("Matrix::max_abs_diff", self.shape_str(), other.shape_str()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(v.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// 1x1x1 convolution without bias: `out[:, u] = W * x[:, u]` at every position.
pub fn channel_project<S: Scalar>(x: &FeatureMap4D<S>, w: &Matrix<S>) -> Result<FeatureMap4D<S>> {
    if w.cols() != x.channels() {
        return Err(Error::shape(
            "channel_project",
            format!("weight {}", w.shape_str()),
            format!("input {}", x.shape_str()),
        ));
    }
    let n = x.grid().len();
    let mut out = vec![S::zero(); w.rows() * n];
    out.par_chunks_mut(n).enumerate().for_each(|(o, row)| {
        for c in 0..w.cols() {
            let coef = w.get(o, c);
            let src = &x.data()[c * n..(c + 1) * n];
            for (dst, &v) in row.iter_mut().zip(src) {
                *dst += coef * v;
            }
        }
    });
    FeatureMap4D::checked("channel_project", w.rows(), x.grid(), out)
}

/// `alpha * a + b`, elementwise.
pub fn axpy<S: Scalar>(alpha: S, a: &FeatureMap4D<S>, b: &FeatureMap4D<S>) -> Result<FeatureMap4D<S>> {
    a.same_shape("axpy", b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| alpha * x + y)
        .collect();
    FeatureMap4D::checked("axpy", a.channels(), a.grid(), data)
}

pub fn max_abs_diff<S: Scalar>(a: &FeatureMap4D<S>, b: &FeatureMap4D<S>) -> Result<S> {
    a.same_shape("max_abs_diff", b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .fold(S::zero(), S::max))
}
