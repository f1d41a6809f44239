//! Single criss-cross attention module over a `(C, T, H, W)` map.
//!
//! Every position `u = (t, h, w)` attends to its criss-cross path: the
//! temporal line through `u`, then the rest of its vertical line, then the
//! rest of its horizontal line. That is `T + H + W - 2` positions, with `u`
//! itself counted once in the temporal segment.
//!
//! The forward pass is
//!
//! ```text
//! Q = Wq X,  K = Wk X,  V = Wv X
//! D[i, u] = <Q[:, u], K[:, path(u)[i]]>
//! A[:, u] = softmax(D[:, u])
//! H[:, u] = sum_i A[i, u] V[:, path(u)[i]]
//! ```
//!
//! Logits are not temperature-scaled.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{channel_project, FeatureMap4D, Grid, Matrix, Position, Scalar};

/// Ordered criss-cross neighbourhood of an anchor position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrissCrossPath {
    pub anchor: Position,
    pub entries: Vec<Position>,
}

impl CrissCrossPath {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Calls `f(i, v)` for each path entry of `u` in order, with `v` the flat index.
#[inline]
pub(crate) fn for_each_path_index(grid: Grid, u: Position, mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for t in 0..grid.t {
        f(i, grid.index(Position::new(t, u.h, u.w)));
        i += 1;
    }
    for h in (0..grid.h).filter(|&h| h != u.h) {
        f(i, grid.index(Position::new(u.t, h, u.w)));
        i += 1;
    }
    for w in (0..grid.w).filter(|&w| w != u.w) {
        f(i, grid.index(Position::new(u.t, u.h, w)));
        i += 1;
    }
}

/// Slot of `v` in `path(u)`, if it is on the path.
pub fn path_slot(grid: Grid, u: Position, v: Position) -> Option<usize> {
    if v.h == u.h && v.w == u.w {
        Some(v.t)
    } else if v.t == u.t && v.w == u.w {
        Some(grid.t + v.h - usize::from(v.h > u.h))
    } else if v.t == u.t && v.h == u.h {
        Some(grid.t + grid.h - 1 + v.w - usize::from(v.w > u.w))
    } else {
        None
    }
}

pub fn path_indices(u: Position, grid: Grid) -> Result<CrissCrossPath> {
    grid.check(u)?;
    let mut entries = Vec::with_capacity(grid.path_len());
    for_each_path_index(grid, u, |_, v| entries.push(grid.position(v)));
    Ok(CrissCrossPath { anchor: u, entries })
}

/// Per-position scores or weights over the criss-cross path, laid out `(L, T, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<S> {
    grid: Grid,
    data: Vec<S>,
}

impl<S: Scalar> AttentionMap<S> {
    pub fn from_vec(grid: Grid, data: Vec<S>) -> Result<Self> {
        if data.len() != grid.path_len() * grid.len() {
            return Err(Error::InvalidDims(format!(
                "attention buffer of length {} does not fit L={} x {}",
                data.len(),
                grid.path_len(),
                grid
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("AttentionMap::from_vec"));
        }
        Ok(AttentionMap { grid, data })
    }

    /// Builds from a position-major `(N, L)` buffer.
    pub(crate) fn from_fibers(grid: Grid, fibers: &[S]) -> Self {
        let (n, l) = (grid.len(), grid.path_len());
        let mut data = vec![S::zero(); n * l];
        for (u, fiber) in fibers.chunks_exact(l).enumerate() {
            for (i, &v) in fiber.iter().enumerate() {
                data[i * n + u] = v;
            }
        }
        AttentionMap { grid, data }
    }

    pub(crate) fn to_fibers(&self) -> Vec<S> {
        let (n, l) = (self.grid.len(), self.path_len());
        let mut out = vec![S::zero(); n * l];
        for i in 0..l {
            for u in 0..n {
                out[u * l + i] = self.data[i * n + u];
            }
        }
        out
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn path_len(&self) -> usize {
        self.grid.path_len()
    }

    /// `[L, T, H, W]`.
    pub fn dims(&self) -> [usize; 4] {
        [self.path_len(), self.grid.t, self.grid.h, self.grid.w]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, u: usize) -> S {
        self.data[i * self.grid.len() + u]
    }

    /// The `L` values at flat position `u`.
    pub fn fiber(&self, u: usize) -> Vec<S> {
        let n = self.grid.len();
        (0..self.path_len()).map(|i| self.data[i * n + u]).collect()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        AttentionMap {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Learnable state of one module: query/key projections `C' x C`, value projection `C x C`, scale `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaWeights<S> {
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub gamma: S,
}

impl<S: Scalar> CcaWeights<S> {
    pub fn new(wq: Matrix<S>, wk: Matrix<S>, wv: Matrix<S>, gamma: S) -> Result<Self> {
        if (wq.rows(), wq.cols()) != (wk.rows(), wk.cols()) {
            return Err(Error::shape("CcaWeights", wq.shape_str(), wk.shape_str()));
        }
        if wv.rows() != wv.cols() || wv.cols() != wq.cols() {
            return Err(Error::shape(
                "CcaWeights",
                format!("wv {}", wv.shape_str()),
                format!("wq {}", wq.shape_str()),
            ));
        }
        if !gamma.is_finite() {
            return Err(Error::NonFinite("CcaWeights gamma"));
        }
        Ok(CcaWeights { wq, wk, wv, gamma })
    }

    /// Input channel count `C`.
    pub fn channels(&self) -> usize {
        self.wq.cols()
    }

    /// Inner channel count `C'`.
    pub fn inner_channels(&self) -> usize {
        self.wq.rows()
    }

    pub fn with_gamma(&self, gamma: S) -> Self {
        CcaWeights { gamma, ..self.clone() }
    }
}

/// Intermediates retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct CcaCache<S> {
    pub x: FeatureMap4D<S>,
    pub q: FeatureMap4D<S>,
    pub k: FeatureMap4D<S>,
    pub v: FeatureMap4D<S>,
    pub attention: AttentionMap<S>,
    /// Aggregated map before the restore projection (reduced-value modules only).
    pub hidden: Option<FeatureMap4D<S>>,
    pub output: FeatureMap4D<S>,
}

/// Pre-softmax scores `D[i, u] = <Q[:, u], K[:, path(u)[i]]>`.
pub fn affinity<S: Scalar>(q: &FeatureMap4D<S>, k: &FeatureMap4D<S>) -> Result<AttentionMap<S>> {
    q.same_shape("affinity", k)?;
    let grid = q.grid();
    let (c, l) = (q.channels(), grid.path_len());
    let qp = q.to_position_major();
    let kp = k.to_position_major();
    let mut fibers = vec![S::zero(); grid.len() * l];
    fibers.par_chunks_mut(l).enumerate().for_each(|(u, fiber)| {
        let qu = &qp[u * c..(u + 1) * c];
        for_each_path_index(grid, grid.position(u), |i, v| {
            let kv = &kp[v * c..(v + 1) * c];
            fiber[i] = qu.iter().zip(kv).map(|(&a, &b)| a * b).sum();
        });
    });
    let out = AttentionMap::from_fibers(grid, &fibers);
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("affinity"));
    }
    Ok(out)
}

/// In-place max-subtracted softmax of one fiber.
pub fn softmax_fiber<S: Scalar>(fiber: &mut [S]) {
    let max = fiber.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in fiber.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in fiber.iter_mut() {
        *v = *v / total;
    }
}

/// Softmax over the path dimension at every position.
pub fn softmax_over_path<S: Scalar>(d: &AttentionMap<S>) -> AttentionMap<S> {
    let mut fibers = d.to_fibers();
    fibers
        .par_chunks_mut(d.path_len())
        .for_each(|fiber| softmax_fiber(fiber));
    AttentionMap::from_fibers(d.grid, &fibers)
}

/// `H[:, u] = sum_i A[i, u] V[:, path(u)[i]]`.
pub fn aggregate<S: Scalar>(a: &AttentionMap<S>, v: &FeatureMap4D<S>) -> Result<FeatureMap4D<S>> {
    if a.grid() != v.grid() {
        return Err(Error::shape(
            "aggregate",
            format!("attention {:?}", a.dims()),
            format!("values {}", v.shape_str()),
        ));
    }
    let grid = v.grid();
    let (c, l) = (v.channels(), grid.path_len());
    let vp = v.to_position_major();
    let af = a.to_fibers();
    let mut out = vec![S::zero(); grid.len() * c];
    out.par_chunks_mut(c).enumerate().for_each(|(u, hu)| {
        let weights = &af[u * l..(u + 1) * l];
        for_each_path_index(grid, grid.position(u), |i, p| {
            let coef = weights[i];
            for (dst, &val) in hu.iter_mut().zip(&vp[p * c..(p + 1) * c]) {
                *dst += coef * val;
            }
        });
    });
    let h = FeatureMap4D::from_position_major(c, grid, &out);
    if h.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("aggregate"));
    }
    Ok(h)
}

/// Shared forward body; `restore` maps the aggregated values back to `C` channels.
pub(crate) fn cca_core<S: Scalar>(
    x: &FeatureMap4D<S>,
    wq: &Matrix<S>,
    wk: &Matrix<S>,
    wv: &Matrix<S>,
    restore: Option<&Matrix<S>>,
) -> Result<(FeatureMap4D<S>, CcaCache<S>)> {
    let q = channel_project(x, wq)?;
    let k = channel_project(x, wk)?;
    let v = channel_project(x, wv)?;
    let attention = softmax_over_path(&affinity(&q, &k)?);
    let aggregated = aggregate(&attention, &v)?;
    let (output, hidden) = match restore {
        Some(wr) => (channel_project(&aggregated, wr)?, Some(aggregated)),
        None => (aggregated, None),
    };
    let cache = CcaCache {
        x: x.clone(),
        q,
        k,
        v,
        attention,
        hidden,
        output: output.clone(),
    };
    Ok((output, cache))
}

/// One criss-cross attention module. `gamma` is not applied here.
pub fn cca3d_forward<S: Scalar>(
    x: &FeatureMap4D<S>,
    w: &CcaWeights<S>,
) -> Result<(FeatureMap4D<S>, CcaCache<S>)> {
    if w.channels() != x.channels() {
        return Err(Error::shape(
            "cca3d_forward",
            format!("weights for C={}", w.channels()),
            format!("input {}", x.shape_str()),
        ));
    }
    cca_core(x, &w.wq, &w.wk, &w.wv, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::SeededInit;

    fn grid(t: usize, h: usize, w: usize) -> Grid {
        Grid::new(t, h, w).unwrap()
    }

    #[test]
    fn single_cell_path() {
        let p = path_indices(Position::new(0, 0, 0), grid(1, 1, 1)).unwrap();
        assert_eq!(p.entries, vec![Position::new(0, 0, 0)]);
    }

    #[test]
    fn cube_path_order() {
        let p = path_indices(Position::new(0, 0, 0), grid(2, 2, 2)).unwrap();
        assert_eq!(
            p.entries,
            vec![
                Position::new(0, 0, 0),
                Position::new(1, 0, 0),
                Position::new(0, 1, 0),
                Position::new(0, 0, 1),
            ]
        );
    }

    #[test]
    fn path_length_formula() {
        let g = grid(3, 4, 5);
        for u in g.positions() {
            assert_eq!(path_indices(u, g).unwrap().len(), 10);
        }
    }

    #[test]
    fn path_rejects_out_of_range() {
        assert!(matches!(
            path_indices(Position::new(0, 4, 0), grid(3, 4, 5)),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn path_slot_agrees_with_enumeration() {
        let g = grid(3, 4, 2);
        for u in g.positions() {
            let path = path_indices(u, g).unwrap();
            for v in g.positions() {
                let expected = path.entries.iter().position(|&e| e == v);
                assert_eq!(path_slot(g, u, v), expected, "u={u} v={v}");
            }
        }
    }

    #[test]
    fn affinity_single_position() {
        let g = grid(1, 1, 1);
        let q = FeatureMap4D::from_vec(1, g, vec![2.0f64]).unwrap();
        let k = FeatureMap4D::from_vec(1, g, vec![3.0f64]).unwrap();
        assert_eq!(affinity(&q, &k).unwrap().data(), &[6.0]);
    }

    #[test]
    fn affinity_hand_dot_products() {
        // Path of (0,0,0) in a 2x2x2 grid: (0,0,0), (1,0,0), (0,1,0), (0,0,1).
        let g = grid(2, 2, 2);
        let mut kv = vec![0.0f64; 8];
        for (pos, val) in [
            (Position::new(0, 0, 0), 1.0),
            (Position::new(1, 0, 0), -1.0),
            (Position::new(0, 1, 0), 0.0),
            (Position::new(0, 0, 1), 3.0),
        ] {
            kv[g.index(pos)] = val;
        }
        let k = FeatureMap4D::from_vec(1, g, kv).unwrap();
        let q = FeatureMap4D::from_fn(1, g, |_, _| 2.0f64).unwrap();
        let d = affinity(&q, &k).unwrap();
        assert_eq!(d.fiber(0), vec![2.0, -2.0, 0.0, 6.0]);
    }

    #[test]
    fn softmax_cases() {
        let single = AttentionMap::from_vec(grid(1, 1, 1), vec![123.0f64]).unwrap();
        assert_eq!(softmax_over_path(&single).data(), &[1.0]);

        let g = grid(2, 2, 2);
        let zeros = AttentionMap::from_vec(g, vec![0.0f64; 32]).unwrap();
        assert!(softmax_over_path(&zeros).data().iter().all(|&v| v == 0.25));

        let mut fiber = [2.0f64, -2.0, 0.0, 6.0];
        softmax_fiber(&mut fiber);
        // exp(x_i) / sum_j exp(x_j), evaluated directly.
        let z: f64 = [2.0f64, -2.0, 0.0, 6.0].iter().map(|v| v.exp()).sum();
        let expected = [2f64.exp() / z, (-2f64).exp() / z, 1.0 / z, 6f64.exp() / z];
        for (a, b) in fiber.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in fiber.iter().zip([0.017937, 0.000329, 0.002427, 0.979307]) {
            assert!((a - b).abs() < 5e-6, "{a} vs {b}");
        }
        assert!((fiber.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut fiber = [1e4f32, -1e4, 3e4, 2.9e4];
        softmax_fiber(&mut fiber);
        assert!(fiber.iter().all(|v| v.is_finite()));
        assert!((fiber.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn aggregate_degenerate_and_one_hot() {
        let g1 = grid(1, 1, 1);
        let v = FeatureMap4D::from_vec(3, g1, vec![1.0f64, -2.0, 5.0]).unwrap();
        let a = AttentionMap::from_vec(g1, vec![1.0]).unwrap();
        assert_eq!(aggregate(&a, &v).unwrap(), v);

        let g = grid(2, 3, 2);
        let v = SeededInit::new(2).feature_map::<f64>(2, g);
        let l = g.path_len();
        let j = 3;
        let mut fibers = vec![0.0; g.len() * l];
        for u in 0..g.len() {
            fibers[u * l + j] = 1.0;
        }
        let a = AttentionMap::from_fibers(g, &fibers);
        let h = aggregate(&a, &v).unwrap();
        for u in g.positions() {
            let picked = path_indices(u, g).unwrap().entries[j];
            for c in 0..2 {
                assert_eq!(h.get(c, u), v.get(c, picked));
            }
        }
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        let a = AttentionMap::from_vec(grid(1, 1, 1), vec![1.0f64]).unwrap();
        let v = FeatureMap4D::<f64>::zeros(1, grid(1, 1, 2)).unwrap();
        assert!(aggregate(&a, &v).is_err());
    }

    #[test]
    fn forward_degenerate_is_value_projection() {
        let mut init = SeededInit::new(4);
        let g = grid(1, 1, 1);
        let x = init.feature_map::<f64>(4, g);
        let w = init.cca_weights::<f64>(4, 2);
        let (h, _) = cca3d_forward(&x, &w).unwrap();
        let expected = w.wv.matvec(&x.column(0));
        assert_eq!(h.column(0), expected);
    }

    #[test]
    fn forward_zero_values_gives_zero() {
        let mut init = SeededInit::new(4);
        let g = grid(2, 3, 3);
        let x = init.feature_map::<f64>(4, g);
        let mut w = init.cca_weights::<f64>(4, 2);
        w.wv = Matrix::zeros(4, 4).unwrap();
        let (h, _) = cca3d_forward(&x, &w).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_validation() {
        let wq = Matrix::<f64>::zeros(2, 4).unwrap();
        let wk = Matrix::<f64>::zeros(3, 4).unwrap();
        let wv = Matrix::<f64>::zeros(4, 4).unwrap();
        assert!(CcaWeights::new(wq.clone(), wk, wv.clone(), 1.0).is_err());
        assert!(CcaWeights::new(wq.clone(), wq.clone(), Matrix::zeros(4, 3).unwrap(), 1.0).is_err());
        assert!(CcaWeights::new(wq.clone(), wq.clone(), wv.clone(), f64::NAN).is_err());
        assert!(CcaWeights::new(wq.clone(), wq, wv, 1.0).is_ok());
    }
}
