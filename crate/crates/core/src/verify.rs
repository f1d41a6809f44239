//! Self-check suite run by `rcca3d verify`.
//!
//! Each check returns a [`CheckOutcome`]; failures are reported, never thrown.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backward::check_gradients;
use crate::cost::reproduce_tables;
use crate::criss_cross::{affinity, cca3d_forward, path_indices, softmax_fiber};
use crate::error::{Error, Result};
use crate::influence::perturbation_response;
use crate::init::SeededInit;
use crate::nonlocal::{criss_cross_mask, masked_dense_cca_oracle};
use crate::rcca::{influence_set, rcca_forward, ChannelFraction, RccaConfig, RccaWeights, Variant};
use crate::tensor::{channel_project, max_abs_diff, Grid, Position};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Paths,
    Softmax,
    Oracle,
    Sparsity,
    Identity,
    Reachability,
    Gradients,
    Cost,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Paths,
        Category::Softmax,
        Category::Oracle,
        Category::Sparsity,
        Category::Identity,
        Category::Reachability,
        Category::Gradients,
        Category::Cost,
    ];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Paths => "paths",
            Category::Softmax => "softmax",
            Category::Oracle => "oracle",
            Category::Sparsity => "sparsity",
            Category::Identity => "identity",
            Category::Reachability => "reachability",
            Category::Gradients => "gradients",
            Category::Cost => "cost",
        };
        f.write_str(s)
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown check category {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub category: Category,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(category: Category, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            category,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(category: Category, name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => CheckOutcome::new(category, name, passed, detail),
            Err(e) => CheckOutcome::new(category, name, false, format!("error: {e}")),
        }
    }
}

fn random_grid(rng: &mut ChaCha8Rng, max: usize) -> Grid {
    Grid::new(rng.gen_range(1..=max), rng.gen_range(1..=max), rng.gen_range(1..=max)).unwrap()
}

/// Path length, distinctness, anchor membership, coordinate sharing and segment order.
pub fn check_paths(seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..40 {
        let grid = random_grid(&mut rng, 8);
        for u in grid.positions() {
            let path = path_indices(u, grid).expect("in range");
            let fail = |why: &str| CheckOutcome::new(Category::Paths, "criss-cross path invariants", false, format!("{why} at u={u} in {grid}"));
            if path.len() != grid.t + grid.h + grid.w - 2 {
                return fail("wrong length");
            }
            let distinct: HashSet<_> = path.entries.iter().collect();
            if distinct.len() != path.len() {
                return fail("repeated entry");
            }
            if path.entries.iter().filter(|&&p| p == u).count() != 1 {
                return fail("anchor not present exactly once");
            }
            if !path.entries.iter().all(|&p| criss_cross_mask(u, p)) {
                return fail("entry shares fewer than two coordinates");
            }
            let temporal_ok = path.entries[..grid.t]
                .iter()
                .enumerate()
                .all(|(t, p)| *p == Position::new(t, u.h, u.w));
            if !temporal_ok {
                return fail("temporal segment out of order");
            }
        }
    }
    CheckOutcome::new(Category::Paths, "criss-cross path invariants", true, "40 random grids up to 8^3")
}

/// Runs `softmax` over affinity fibers of inputs scaled by `scale` and checks normalization.
pub fn check_softmax_normalization(softmax: impl Fn(&mut [f32]), scale: f32, seed: u64) -> CheckOutcome {
    let name = format!("softmax fibers sum to 1 (inputs x{scale})");
    let mut init = SeededInit::new(seed);
    let grid = Grid::new(3, 4, 5).unwrap();
    let mut run = || -> Result<(bool, String)> {
        let x = init.feature_map::<f32>(8, grid).map(|v| v * scale)?;
        let w = init.cca_weights::<f32>(8, 2);
        let d = affinity(&channel_project(&x, &w.wq)?, &channel_project(&x, &w.wk)?)?;
        let mut worst = 0.0f32;
        for u in 0..grid.len() {
            let mut fiber = d.fiber(u);
            softmax(&mut fiber);
            if fiber.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Ok((false, format!("non-finite or negative weight at u={u}")));
            }
            let s: f32 = fiber.iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
        Ok((worst <= 1e-6, format!("max |sum - 1| = {worst:e}")))
    };
    let r = run();
    CheckOutcome::from_result(Category::Softmax, &name, r)
}

fn check_oracle(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = SeededInit::new(seed);
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f32;
    let run = |rng: &mut ChaCha8Rng, init: &mut SeededInit, worst64: &mut f64, worst32: &mut f32| -> Result<()> {
        for _ in 0..10 {
            let grid = Grid::new(rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5))?;
            let c = rng.gen_range(2..=8);
            let cp = rng.gen_range(1..=c);
            let x = init.feature_map::<f64>(c, grid);
            let w = init.cca_weights::<f64>(c, cp);
            let dense = masked_dense_cca_oracle(&x, &w, criss_cross_mask)?;
            *worst64 = worst64.max(max_abs_diff(&cca3d_forward(&x, &w)?.0, &dense)?);

            let (x32, w32) = (x.cast::<f32>(), crate::criss_cross::CcaWeights::new(w.wq.cast(), w.wk.cast(), w.wv.cast(), 1.0f32)?);
            let dense32 = masked_dense_cca_oracle(&x32, &w32, criss_cross_mask)?;
            *worst32 = worst32.max(max_abs_diff(&cca3d_forward(&x32, &w32)?.0, &dense32)?);
        }
        Ok(())
    };
    match run(&mut rng, &mut init, &mut worst64, &mut worst32) {
        Ok(()) => vec![
            CheckOutcome::new(Category::Oracle, "sparse == masked dense (f64, 1e-10)", worst64 <= 1e-10, format!("max diff {worst64:e}")),
            CheckOutcome::new(Category::Oracle, "sparse == masked dense (f32, 1e-5)", worst32 <= 1e-5, format!("max diff {worst32:e}")),
        ],
        Err(e) => vec![CheckOutcome::new(Category::Oracle, "sparse == masked dense", false, format!("error: {e}"))],
    }
}

fn check_sparsity(seed: u64) -> CheckOutcome {
    let mut init = SeededInit::new(seed);
    let mut run = || -> Result<(bool, String)> {
        let grid = Grid::new(3, 4, 4)?;
        let x = init.feature_map::<f64>(4, grid);
        let w = init.cca_weights::<f64>(4, 2);
        let (h, _) = cca3d_forward(&x, &w)?;
        let v = Position::new(1, 2, 1);
        let bumped = x.with_value(0, v, x.get(0, v) + 1e-3);
        let (h2, _) = cca3d_forward(&bumped, &w)?;
        for u in grid.positions() {
            let changed = (0..4).any(|c| h.get(c, u) != h2.get(c, u));
            if changed && !criss_cross_mask(u, v) {
                return Ok((false, format!("output at {u} changed but {v} is not on its path")));
            }
        }
        Ok((true, format!("source {v} in {grid}")))
    };
    let r = run();
    CheckOutcome::from_result(Category::Sparsity, "perturbation stays on the criss-cross star", r)
}

fn check_identity(seed: u64) -> CheckOutcome {
    let mut init = SeededInit::new(seed);
    let mut run = || -> Result<(bool, String)> {
        let x = init.feature_map::<f64>(8, Grid::new(2, 3, 3)?);
        for variant in Variant::ALL {
            let cfg = RccaConfig::new(variant, 3, ChannelFraction::default())?;
            let w = RccaWeights::shared(init.module_weights::<f64>(variant, 8, 2).with_gamma(0.0));
            if rcca_forward(&x, &cfg, &w)?.0 != x {
                return Ok((false, format!("structure {variant} with gamma = 0 is not the identity")));
            }
        }
        let x1 = init.feature_map::<f64>(5, Grid::new(1, 1, 1)?);
        let w = init.cca_weights::<f64>(5, 2);
        if cca3d_forward(&x1, &w)?.0.column(0) != w.wv.matvec(&x1.column(0)) {
            return Ok((false, "single-position output differs from Wv x".into()));
        }
        Ok((true, "all structures".into()))
    };
    let r = run();
    CheckOutcome::from_result(Category::Identity, "gamma = 0 identity and single-position case", r)
}

/// Structural and empirical reachability after one and three recurrences on every grid with extents in `2..=max`.
pub fn check_reachability(max: usize, seed: u64) -> CheckOutcome {
    let mut init = SeededInit::new(seed);
    let name = format!("reachability R=1 star, R=3 full (grids 2..={max})");
    let mut run = || -> Result<(bool, String)> {
        let one = RccaConfig::new(Variant::A, 1, ChannelFraction::default())?;
        let three = RccaConfig::new(Variant::A, 3, ChannelFraction::default())?;
        let mut grids = 0;
        for t in 2..=max {
            for h in 2..=max {
                for wd in 2..=max {
                    let grid = Grid::new(t, h, wd)?;
                    let x = init.feature_map::<f64>(4, grid);
                    let w: RccaWeights<f64> = init.cca_weights::<f64>(4, 1).into();
                    for v in grid.positions() {
                        let star = influence_set(&one, grid, v)?;
                        for u in grid.positions() {
                            if star.contains(u) != criss_cross_mask(u, v) {
                                return Ok((false, format!("R=1 structural set wrong at u={u}, v={v}, {grid}")));
                            }
                        }
                        if !influence_set(&three, grid, v)?.is_full() {
                            return Ok((false, format!("R=3 structural set not full for v={v}, {grid}")));
                        }
                    }
                    let v = grid.position(grids % grid.len());
                    let star = influence_set(&one, grid, v)?;
                    let resp = perturbation_response(&x, &one, &w, v, 1e-3)?;
                    for u in grid.positions() {
                        let moved = resp[grid.index(u)] > 0.0;
                        if moved != star.contains(u) {
                            return Ok((false, format!("R=1 empirical response disagrees at u={u}, v={v}, {grid}")));
                        }
                    }
                    let resp = perturbation_response(&x, &three, &w, v, 1e-3)?;
                    let reached = resp.iter().filter(|&&d| d > 1e-12).count();
                    if (reached as f64) < 0.99 * grid.len() as f64 {
                        return Ok((false, format!("R=3 empirical response reaches {reached}/{} in {grid}", grid.len())));
                    }
                    grids += 1;
                }
            }
        }
        Ok((true, format!("{grids} grids")))
    };
    let r = run();
    CheckOutcome::from_result(Category::Reachability, &name, r)
}

fn check_grads(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut init = SeededInit::new(seed);
    for variant in Variant::ALL {
        for r in 1..=3 {
            let name = format!("gradients structure {variant}, R={r}");
            let mut run = || -> Result<(bool, String)> {
                let grid = Grid::new(2, 3, 3)?;
                let x = init.feature_map::<f64>(4, grid);
                let cfg = RccaConfig::new(variant, r, ChannelFraction::new(1, 2)?)?;
                let w = RccaWeights::shared(init.module_weights::<f64>(variant, 4, 2));
                let report = check_gradients(&x, &cfg, &w, 1e-5)?;
                let detail = format!("max rel err {:e} over {} params", report.max_rel_error, report.checked);
                Ok((report.max_rel_error <= 1e-6, detail))
            };
            let r = run();
            out.push(CheckOutcome::from_result(Category::Gradients, &name, r));
        }
    }
    out
}

fn check_cost() -> Vec<CheckOutcome> {
    reproduce_tables()
        .into_iter()
        .map(|c| {
            let passed = !c.gated || c.passed();
            let mut detail = format!("expected {} computed {:.4} (tol {})", c.expected, c.computed, c.tolerance);
            if !c.gated {
                detail.push_str(if c.passed() { " [not gated]" } else { " [mismatch, not gated]" });
            }
            CheckOutcome::new(Category::Cost, format!("{}: {} {}", c.table, c.row, c.quantity), passed, detail)
        })
        .collect()
}

/// Runs every check, or only those of `only`.
pub fn run_verify(seed: u64, only: Option<Category>) -> Vec<CheckOutcome> {
    let wanted = |c: Category| only.is_none_or(|o| o == c);
    let mut out = Vec::new();
    if wanted(Category::Paths) {
        out.push(check_paths(seed));
    }
    if wanted(Category::Softmax) {
        out.push(check_softmax_normalization(softmax_fiber, 1.0, seed));
        out.push(check_softmax_normalization(softmax_fiber, 1e4, seed));
    }
    if wanted(Category::Oracle) {
        out.extend(check_oracle(seed));
    }
    if wanted(Category::Sparsity) {
        out.push(check_sparsity(seed));
    }
    if wanted(Category::Identity) {
        out.push(check_identity(seed));
    }
    if wanted(Category::Reachability) {
        out.push(check_reachability(4, seed));
    }
    if wanted(Category::Gradients) {
        out.extend(check_grads(seed));
    }
    if wanted(Category::Cost) {
        out.extend(check_cost());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Softmax without max subtraction.
    fn naive_softmax(fiber: &mut [f32]) {
        let total: f32 = fiber.iter().map(|v| v.exp()).sum();
        for v in fiber.iter_mut() {
            *v = v.exp() / total;
        }
    }

    #[test]
    fn naive_softmax_is_caught_on_large_inputs() {
        assert!(check_softmax_normalization(naive_softmax, 1.0, 7).passed);
        assert!(!check_softmax_normalization(naive_softmax, 1e4, 7).passed);
        assert!(check_softmax_normalization(softmax_fiber, 1e4, 7).passed);
    }

    #[test]
    fn cheap_categories_pass() {
        for cat in [Category::Paths, Category::Softmax, Category::Oracle, Category::Sparsity, Category::Identity, Category::Cost] {
            for o in run_verify(7, Some(cat)) {
                assert!(o.passed, "{o:?}");
            }
        }
    }

    #[test]
    fn category_names_roundtrip() {
        for c in Category::ALL {
            assert_eq!(c.to_string().parse::<Category>().unwrap(), c);
        }
        assert!("bogus".parse::<Category>().is_err());
    }
}
