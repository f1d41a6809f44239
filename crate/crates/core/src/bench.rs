//! Wall-clock comparison of the criss-cross modules against the dense non-local block.

use std::time::{Duration, Instant};

use crate::criss_cross::cca3d_forward;
use crate::error::{Error, Result};
use crate::init::SeededInit;
use crate::nonlocal::nonlocal_forward;
use crate::rcca::{rcca_forward, ModuleWeights, RccaConfig, RccaWeights};
use crate::tensor::{FeatureMap4D, Grid};

/// Median wall-clock time of `k` runs of `f`.
pub fn median_time<T>(k: usize, mut f: impl FnMut() -> T) -> (Duration, T) {
    assert!(k > 0);
    let mut times = Vec::with_capacity(k);
    let mut last = None;
    for _ in 0..k {
        let start = Instant::now();
        let out = f();
        times.push(start.elapsed());
        last = Some(out);
    }
    times.sort();
    (times[k / 2], last.unwrap())
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub dims: [usize; 4],
    pub cca: Duration,
    pub rcca: Duration,
    pub nonlocal: Duration,
    /// Sums of the three outputs in a fixed order; identical across runs with the same seed.
    pub checksums: [f64; 3],
}

impl BenchReport {
    /// Non-local time over RCCA time.
    pub fn speedup(&self) -> f64 {
        self.nonlocal.as_secs_f64() / self.rcca.as_secs_f64()
    }
}

/// Times single-module, recurrent and non-local forwards on one seeded `f32` input.
pub fn run_bench(channels: usize, grid: Grid, cfg: &RccaConfig, k: usize, seed: u64) -> Result<BenchReport> {
    if channels < 2 {
        return Err(Error::Config("benchmark needs at least two channels for the non-local block".into()));
    }
    let mut init = SeededInit::new(seed);
    let x: FeatureMap4D<f32> = init.feature_map(channels, grid);
    let inner = cfg.channel_fraction.inner_channels(channels);
    let module: ModuleWeights<f32> = init.module_weights(cfg.variant, channels, inner);
    let full = init.cca_weights::<f32>(channels, inner);
    let nl = init.nonlocal_weights::<f32>(channels);
    let weights = RccaWeights::shared(module);

    let (cca, h) = median_time(k, || cca3d_forward(&x, &full));
    let (rcca, y) = median_time(k, || rcca_forward(&x, cfg, &weights));
    let (nonlocal, z) = median_time(k, || nonlocal_forward(&x, &nl));
    let sum = |m: &FeatureMap4D<f32>| m.data().iter().map(|&v| v as f64).sum::<f64>();
    Ok(BenchReport {
        dims: x.dims(),
        cca,
        rcca,
        nonlocal,
        checksums: [sum(&h?.0), sum(&y?.0), sum(&z?)],
    })
}
