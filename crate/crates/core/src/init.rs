//! Seeded random inputs and weights.
//!
//! Projection entries are uniform in `[-1/sqrt(C), 1/sqrt(C)]` with `C` the
//! input width of the projection, and gamma starts at 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::criss_cross::CcaWeights;
use crate::nonlocal::NonLocalWeights;
use crate::rcca::{CcaWeightsC, ModuleWeights, Variant};
use crate::tensor::{FeatureMap4D, Grid, Matrix, Scalar};

pub struct SeededInit {
    rng: ChaCha8Rng,
}

impl SeededInit {
    pub fn new(seed: u64) -> Self {
        SeededInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, bound: f64) -> f64 {
        self.rng.gen_range(-bound..=bound)
    }

    /// Feature map with entries uniform in `[-1, 1]`.
    pub fn feature_map<S: Scalar>(&mut self, channels: usize, grid: Grid) -> FeatureMap4D<S> {
        FeatureMap4D::from_fn(channels, grid, |_, _| S::of(self.uniform(1.0))).expect("finite values")
    }

    pub fn uniform_matrix<S: Scalar>(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix<S> {
        Matrix::from_fn(rows, cols, |_, _| S::of(self.uniform(bound))).expect("finite values")
    }

    fn projection<S: Scalar>(&mut self, rows: usize, cols: usize) -> Matrix<S> {
        self.uniform_matrix(rows, cols, 1.0 / (cols as f64).sqrt())
    }

    pub fn cca_weights<S: Scalar>(&mut self, channels: usize, inner: usize) -> CcaWeights<S> {
        let wq = self.projection(inner, channels);
        let wk = self.projection(inner, channels);
        let wv = self.projection(channels, channels);
        CcaWeights::new(wq, wk, wv, S::one()).expect("consistent shapes")
    }

    pub fn cca_weights_reduced<S: Scalar>(&mut self, channels: usize, inner: usize) -> CcaWeightsC<S> {
        let wq = self.projection(inner, channels);
        let wk = self.projection(inner, channels);
        let wv = self.projection(inner, channels);
        let wr = self.projection(channels, inner);
        CcaWeightsC::new(wq, wk, wv, wr, S::one()).expect("consistent shapes")
    }

    /// Weights of the kind a structure needs.
    pub fn module_weights<S: Scalar>(&mut self, variant: Variant, channels: usize, inner: usize) -> ModuleWeights<S> {
        match variant {
            Variant::C => ModuleWeights::Reduced(self.cca_weights_reduced(channels, inner)),
            _ => ModuleWeights::Full(self.cca_weights(channels, inner)),
        }
    }

    /// Non-local weights with bottleneck `C/2`. Panics for `C < 2`.
    pub fn nonlocal_weights<S: Scalar>(&mut self, channels: usize) -> NonLocalWeights<S> {
        assert!(channels >= 2, "non-local block needs at least two channels");
        let b = channels / 2;
        let theta = self.projection(b, channels);
        let phi = self.projection(b, channels);
        let g = self.projection(b, channels);
        let z = self.projection(channels, b);
        NonLocalWeights::new(theta, phi, g, z).expect("consistent shapes")
    }
}
