//! Dense attention references.
//!
//! [`masked_dense_cca_oracle`] scores every pair of positions and masks the
//! pairs outside a predicate; with [`criss_cross_mask`] it must agree with
//! the sparse module. [`nonlocal_forward`] is the embedded dot-product
//! non-local block used as the cost and wall-clock baseline.

use rayon::prelude::*;

use crate::criss_cross::{softmax_fiber, CcaWeights};
use crate::error::{Error, Result};
use crate::tensor::{channel_project, FeatureMap4D, Grid, Matrix, Position, Scalar};

/// Logit assigned to masked-out pairs.
pub const MASKED_LOGIT: f64 = -1e30;

/// `u` and `v` agree in at least two of their three coordinates.
pub fn criss_cross_mask(u: Position, v: Position) -> bool {
    let same = usize::from(u.t == v.t) + usize::from(u.h == v.h) + usize::from(u.w == v.w);
    same >= 2
}

pub fn all_pairs_mask(_: Position, _: Position) -> bool {
    true
}

pub fn self_only_mask(u: Position, v: Position) -> bool {
    u == v
}

fn naive_project<S: Scalar>(x: &FeatureMap4D<S>, w: &Matrix<S>) -> Vec<Vec<S>> {
    // out[u][o], independent of the parallel projection kernel.
    let n = x.grid().len();
    (0..n)
        .map(|u| {
            (0..w.rows())
                .map(|o| {
                    let mut acc = S::zero();
                    for c in 0..w.cols() {
                        acc += w.get(o, c) * x.at(c, u);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Full `N x N` attention restricted to the pairs accepted by `mask`.
pub fn masked_dense_cca_oracle<S: Scalar>(
    x: &FeatureMap4D<S>,
    w: &CcaWeights<S>,
    mask: impl Fn(Position, Position) -> bool,
) -> Result<FeatureMap4D<S>> {
    if w.channels() != x.channels() {
        return Err(Error::shape(
            "masked_dense_cca_oracle",
            format!("weights for C={}", w.channels()),
            format!("input {}", x.shape_str()),
        ));
    }
    let grid = x.grid();
    let n = grid.len();
    let q = naive_project(x, &w.wq);
    let k = naive_project(x, &w.wk);
    let v = naive_project(x, &w.wv);
    let c = x.channels();
    let masked = S::of(MASKED_LOGIT);
    let mut out = vec![S::zero(); c * n];
    let mut scores = vec![S::zero(); n];
    for u in 0..n {
        let pu = grid.position(u);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = if mask(pu, grid.position(j)) {
                q[u].iter().zip(&k[j]).map(|(&a, &b)| a * b).sum()
            } else {
                masked
            };
        }
        softmax_fiber(&mut scores);
        for ch in 0..c {
            let mut acc = S::zero();
            for (j, &a) in scores.iter().enumerate() {
                acc += a * v[j][ch];
            }
            out[ch * n + u] = acc;
        }
    }
    FeatureMap4D::checked("masked_dense_cca_oracle", c, grid, out)
}

/// Non-local block weights: `theta`, `phi`, `g` are `C/2 x C`, `z` is `C x C/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalWeights<S> {
    pub theta: Matrix<S>,
    pub phi: Matrix<S>,
    pub g: Matrix<S>,
    pub z: Matrix<S>,
}

impl<S: Scalar> NonLocalWeights<S> {
    pub fn new(theta: Matrix<S>, phi: Matrix<S>, g: Matrix<S>, z: Matrix<S>) -> Result<Self> {
        let c = theta.cols();
        let b = theta.rows();
        let ok = [&phi, &g].iter().all(|m| (m.rows(), m.cols()) == (b, c)) && (z.rows(), z.cols()) == (c, b);
        if !ok {
            return Err(Error::shape(
                "NonLocalWeights",
                format!("theta {}", theta.shape_str()),
                format!("phi {} g {} z {}", phi.shape_str(), g.shape_str(), z.shape_str()),
            ));
        }
        if c < 2 || b != c / 2 {
            return Err(Error::Config(format!("bottleneck must be floor(C/2) with C >= 2, got C={c}, width {b}")));
        }
        Ok(NonLocalWeights { theta, phi, g, z })
    }

    pub fn channels(&self) -> usize {
        self.theta.cols()
    }

    pub fn bottleneck(&self) -> usize {
        self.theta.rows()
    }
}

/// `Z = Wz y + X` with `y_u = sum_v softmax_v(theta_u . phi_v) g_v`.
pub fn nonlocal_forward<S: Scalar>(x: &FeatureMap4D<S>, w: &NonLocalWeights<S>) -> Result<FeatureMap4D<S>> {
    if w.channels() != x.channels() {
        return Err(Error::shape(
            "nonlocal_forward",
            format!("weights for C={}", w.channels()),
            format!("input {}", x.shape_str()),
        ));
    }
    let grid = x.grid();
    let n = grid.len();
    let b = w.bottleneck();
    let theta = channel_project(x, &w.theta)?.to_position_major();
    let phi = channel_project(x, &w.phi)?.to_position_major();
    let g = channel_project(x, &w.g)?.to_position_major();
    let mut y = vec![S::zero(); n * b];
    y.par_chunks_mut(b).enumerate().for_each_init(
        || vec![S::zero(); n],
        |scores, (u, yu)| {
            let tu = &theta[u * b..(u + 1) * b];
            for (s, pv) in scores.iter_mut().zip(phi.chunks_exact(b)) {
                *s = tu.iter().zip(pv).map(|(&a, &c)| a * c).sum();
            }
            softmax_fiber(scores);
            for (&a, gv) in scores.iter().zip(g.chunks_exact(b)) {
                for (dst, &val) in yu.iter_mut().zip(gv) {
                    *dst += a * val;
                }
            }
        },
    );
    let y = FeatureMap4D::from_position_major(b, grid, &y);
    let z = channel_project(&y, &w.z)?;
    crate::tensor::axpy(S::one(), &z, x)
}

/// Number of ordered position pairs accepted by `mask`.
pub fn pair_count(grid: Grid, mask: impl Fn(Position, Position) -> bool) -> usize {
    grid.positions()
        .map(|u| grid.positions().filter(|&v| mask(u, v)).count())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criss_cross::cca3d_forward;
    use crate::init::SeededInit;
    use crate::tensor::max_abs_diff;

    fn grid(t: usize, h: usize, w: usize) -> Grid {
        Grid::new(t, h, w).unwrap()
    }

    /// Literal triple loop over (u, v, channel).
    fn nonlocal_loops(x: &FeatureMap4D<f64>, w: &NonLocalWeights<f64>) -> FeatureMap4D<f64> {
        let grid = x.grid();
        let n = grid.len();
        let (c, b) = (w.channels(), w.bottleneck());
        let proj = |m: &Matrix<f64>, u: usize, o: usize| (0..c).map(|i| m.get(o, i) * x.at(i, u)).sum::<f64>();
        let mut out = x.data().to_vec();
        for u in 0..n {
            let mut scores = vec![0.0; n];
            for (v, s) in scores.iter_mut().enumerate() {
                *s = (0..b).map(|o| proj(&w.theta, u, o) * proj(&w.phi, v, o)).sum();
            }
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let y: Vec<f64> = (0..b)
                .map(|o| (0..n).map(|v| (scores[v] - m).exp() / z * proj(&w.g, v, o)).sum())
                .collect();
            for ch in 0..c {
                out[ch * n + u] += (0..b).map(|o| w.z.get(ch, o) * y[o]).sum::<f64>();
            }
        }
        FeatureMap4D::from_vec(c, grid, out).unwrap()
    }

    #[test]
    fn mask_counts() {
        let g = grid(3, 4, 5);
        assert_eq!(pair_count(g, criss_cross_mask), g.len() * g.path_len());
        assert_eq!(pair_count(g, self_only_mask), g.len());
    }

    #[test]
    fn all_pairs_single_position_equals_module() {
        let mut init = SeededInit::new(1);
        let x = init.feature_map::<f64>(5, grid(1, 1, 1));
        let w = init.cca_weights::<f64>(5, 2);
        let dense = masked_dense_cca_oracle(&x, &w, all_pairs_mask).unwrap();
        assert_eq!(max_abs_diff(&dense, &cca3d_forward(&x, &w).unwrap().0).unwrap(), 0.0);
    }

    #[test]
    fn criss_cross_mask_equals_module() {
        let mut init = SeededInit::new(2);
        let x = init.feature_map::<f64>(6, grid(2, 3, 3));
        let w = init.cca_weights::<f64>(6, 2);
        let dense = masked_dense_cca_oracle(&x, &w, criss_cross_mask).unwrap();
        assert!(max_abs_diff(&dense, &cca3d_forward(&x, &w).unwrap().0).unwrap() <= 1e-10);
    }

    #[test]
    fn self_only_mask_is_value_projection() {
        let mut init = SeededInit::new(3);
        let x = init.feature_map::<f64>(4, grid(2, 2, 2));
        let w = init.cca_weights::<f64>(4, 1);
        let dense = masked_dense_cca_oracle(&x, &w, self_only_mask).unwrap();
        let v = channel_project(&x, &w.wv).unwrap();
        assert!(max_abs_diff(&dense, &v).unwrap() <= 1e-15);
    }

    #[test]
    fn nonlocal_zero_output_projection_is_identity() {
        let mut init = SeededInit::new(4);
        let x = init.feature_map::<f64>(4, grid(2, 2, 2));
        let mut w = init.nonlocal_weights::<f64>(4);
        w.z = Matrix::zeros(4, 2).unwrap();
        assert_eq!(nonlocal_forward(&x, &w).unwrap(), x);
    }

    #[test]
    fn nonlocal_single_position() {
        let mut init = SeededInit::new(5);
        let x = init.feature_map::<f64>(4, grid(1, 1, 1));
        let w = init.nonlocal_weights::<f64>(4);
        let z = nonlocal_forward(&x, &w).unwrap();
        let g = w.g.matvec(&x.column(0));
        let expected: Vec<f64> = w.z.matvec(&g).iter().zip(x.column(0)).map(|(a, b)| a + b).collect();
        for (a, b) in z.column(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nonlocal_matches_loop_oracle() {
        let mut init = SeededInit::new(6);
        let x = init.feature_map::<f64>(4, grid(2, 2, 2));
        let w = init.nonlocal_weights::<f64>(4);
        let fast = nonlocal_forward(&x, &w).unwrap();
        assert!(max_abs_diff(&fast, &nonlocal_loops(&x, &w)).unwrap() <= 1e-10);
    }

    #[test]
    fn nonlocal_weight_validation() {
        let m = |r, c| Matrix::<f64>::zeros(r, c).unwrap();
        assert!(NonLocalWeights::new(m(2, 4), m(2, 4), m(2, 4), m(4, 2)).is_ok());
        assert!(NonLocalWeights::new(m(3, 4), m(3, 4), m(3, 4), m(4, 3)).is_err());
        assert!(NonLocalWeights::new(m(2, 4), m(2, 4), m(2, 4), m(4, 3)).is_err());
    }
}
