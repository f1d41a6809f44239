//! Empirical influence of one input position on the RCCA output, measured by
//! finite differences, and its rendering as 8-bit graymaps.

use crate::error::Result;
use crate::rcca::{rcca_forward, RccaConfig, RccaWeights};
use crate::tensor::{FeatureMap4D, Grid, Position};

/// Largest absolute output change at each position after adding `delta` to every channel of `x` at `v`.
pub fn perturbation_response(
    x: &FeatureMap4D<f64>,
    cfg: &RccaConfig,
    w: &RccaWeights<f64>,
    v: Position,
    delta: f64,
) -> Result<Vec<f64>> {
    let grid = x.grid();
    grid.check(v)?;
    let (base, _) = rcca_forward(x, cfg, w)?;
    let bumped = FeatureMap4D::from_fn(x.channels(), grid, |c, p| {
        if p == v {
            x.get(c, p) + delta
        } else {
            x.get(c, p)
        }
    })?;
    let (moved, _) = rcca_forward(&bumped, cfg, w)?;
    Ok((0..grid.len())
        .map(|u| {
            (0..x.channels())
                .map(|c| (moved.at(c, u) - base.at(c, u)).abs())
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Frobenius norm of the Jacobian block `dY[:, u] / dX[:, v]` at every `u`, by central differences.
pub fn influence_magnitudes(
    x: &FeatureMap4D<f64>,
    cfg: &RccaConfig,
    w: &RccaWeights<f64>,
    v: Position,
    eps: f64,
) -> Result<Vec<f64>> {
    let grid = x.grid();
    grid.check(v)?;
    let mut sq = vec![0.0; grid.len()];
    for c in 0..x.channels() {
        let (plus, _) = rcca_forward(&x.with_value(c, v, x.get(c, v) + eps), cfg, w)?;
        let (minus, _) = rcca_forward(&x.with_value(c, v, x.get(c, v) - eps), cfg, w)?;
        for (u, acc) in sq.iter_mut().enumerate() {
            for o in 0..x.channels() {
                let d = (plus.at(o, u) - minus.at(o, u)) / (2.0 * eps);
                *acc += d * d;
            }
        }
    }
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

/// One `H x W` 8-bit map per frame, each scaled to its own maximum.
///
/// Any nonzero magnitude maps to at least 1 so exact zeros stay distinguishable.
pub fn frame_maps(grid: Grid, magnitudes: &[f64]) -> Vec<Vec<u8>> {
    let frame = grid.h * grid.w;
    magnitudes
        .chunks_exact(frame)
        .map(|m| {
            let max = m.iter().copied().fold(0.0, f64::max);
            m.iter()
                .map(|&v| {
                    if v == 0.0 {
                        0
                    } else {
                        ((v / max * 255.0).round() as u8).max(1)
                    }
                })
                .collect()
        })
        .collect()
}

/// Binary portable graymap (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::SeededInit;
    use crate::rcca::{influence_set, ChannelFraction, Variant};

    #[test]
    fn one_step_maps_show_the_star() {
        let mut init = SeededInit::new(7);
        let grid = Grid::new(3, 8, 8).unwrap();
        let x = init.feature_map::<f64>(4, grid);
        let cfg = RccaConfig::new(Variant::A, 1, ChannelFraction::default()).unwrap();
        let w: RccaWeights<f64> = init.cca_weights(4, 1).into();
        let v = Position::new(1, 4, 4);
        let mags = influence_magnitudes(&x, &cfg, &w, v, 1e-4).unwrap();
        let maps = frame_maps(grid, &mags);
        for (t, map) in maps.iter().enumerate() {
            for h in 0..8 {
                for ww in 0..8 {
                    let expected = (t == 1 && (h == 4 || ww == 4)) || (h == 4 && ww == 4);
                    assert_eq!(map[h * 8 + ww] != 0, expected, "t={t} h={h} w={ww}");
                }
            }
        }
        let set = influence_set(&cfg, grid, v).unwrap();
        assert_eq!(set.len(), mags.iter().filter(|&&m| m != 0.0).count());
    }

    #[test]
    fn pgm_header() {
        let bytes = encode_pgm(2, 1, &[0, 255]);
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
    }
}
