//! Recurrent composition of criss-cross modules.
//!
//! All recurrences apply the same weights. With `F` the module and `R`
//! recurrences, the four structures are:
//!
//! | structure | step `k`                                   |
//! |-----------|--------------------------------------------|
//! | `a`       | `Y_k = gamma F(Y_{k-1}) + X`               |
//! | `b`       | `Y_k = gamma F(Y_{k-1}) + Y_{k-1}`         |
//! | `c`       | as `a`, `F` uses reduced values and a restore projection |
//! | `d`       | `Y_k = gamma F(Y_{k-1})`, plus `X` after the last step only |
//!
//! with `Y_0 = X`.

use std::fmt;
use std::str::FromStr;

use crate::criss_cross::{cca_core, for_each_path_index, CcaCache, CcaWeights};
use crate::error::{Error, Result};
use crate::tensor::{axpy, FeatureMap4D, Grid, Matrix, Position, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            "d" => Ok(Variant::D),
            other => Err(Error::Config(format!("unknown structure {other:?}, expected a|b|c|d"))),
        }
    }
}

/// Inner channel fraction `C' / C` as an exact rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelFraction {
    num: u64,
    den: u64,
}

impl ChannelFraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::Config(format!("channel fraction {num}/{den} must lie in (0, 1]")));
        }
        Ok(ChannelFraction { num, den })
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(C * C_d)`, at least 1.
    pub fn inner_channels(&self, channels: usize) -> usize {
        ((channels as u64 * self.num / self.den) as usize).max(1)
    }

    /// `C * C_d` when it is a whole number.
    pub fn exact_inner_channels(&self, channels: usize) -> Option<usize> {
        let scaled = channels as u64 * self.num;
        scaled.is_multiple_of(self.den).then(|| (scaled / self.den) as usize)
    }
}

impl Default for ChannelFraction {
    fn default() -> Self {
        ChannelFraction { num: 1, den: 4 }
    }
}

impl fmt::Display for ChannelFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for ChannelFraction {
    type Err = Error;

    /// Accepts `"1/4"` or `"1"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse channel fraction {s:?}"));
        let (num, den) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => (s.trim().parse().map_err(|_| bad())?, 1),
        };
        ChannelFraction::new(num, den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RccaConfig {
    pub variant: Variant,
    pub recurrences: usize,
    pub channel_fraction: ChannelFraction,
}

impl RccaConfig {
    pub fn new(variant: Variant, recurrences: usize, channel_fraction: ChannelFraction) -> Result<Self> {
        if recurrences == 0 {
            return Err(Error::Config("recurrence count must be at least 1".into()));
        }
        Ok(RccaConfig {
            variant,
            recurrences,
            channel_fraction,
        })
    }
}

impl Default for RccaConfig {
    fn default() -> Self {
        RccaConfig {
            variant: Variant::A,
            recurrences: 3,
            channel_fraction: ChannelFraction::default(),
        }
    }
}

/// Weights of a structure-`c` module: values are reduced to `C'` channels and restored by `wr`.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaWeightsC<S> {
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv_reduced: Matrix<S>,
    pub wr: Matrix<S>,
    pub gamma: S,
}

impl<S: Scalar> CcaWeightsC<S> {
    pub fn new(wq: Matrix<S>, wk: Matrix<S>, wv_reduced: Matrix<S>, wr: Matrix<S>, gamma: S) -> Result<Self> {
        let qk = (wq.rows(), wq.cols());
        if qk != (wk.rows(), wk.cols()) || qk != (wv_reduced.rows(), wv_reduced.cols()) {
            return Err(Error::shape(
                "CcaWeightsC",
                format!("wq {} / wk {}", wq.shape_str(), wk.shape_str()),
                format!("wv_reduced {}", wv_reduced.shape_str()),
            ));
        }
        if (wr.rows(), wr.cols()) != (wq.cols(), wq.rows()) {
            return Err(Error::shape("CcaWeightsC", format!("wr {}", wr.shape_str()), format!("wq {}", wq.shape_str())));
        }
        if !gamma.is_finite() {
            return Err(Error::NonFinite("CcaWeightsC gamma"));
        }
        Ok(CcaWeightsC {
            wq,
            wk,
            wv_reduced,
            wr,
            gamma,
        })
    }
}

/// Either kind of module weights.
#[derive(Debug, Clone, PartialEq)]
pub enum ModuleWeights<S> {
    Full(CcaWeights<S>),
    Reduced(CcaWeightsC<S>),
}

impl<S: Scalar> ModuleWeights<S> {
    pub fn gamma(&self) -> S {
        match self {
            ModuleWeights::Full(w) => w.gamma,
            ModuleWeights::Reduced(w) => w.gamma,
        }
    }

    pub fn with_gamma(&self, gamma: S) -> Self {
        match self {
            ModuleWeights::Full(w) => ModuleWeights::Full(CcaWeights { gamma, ..w.clone() }),
            ModuleWeights::Reduced(w) => ModuleWeights::Reduced(CcaWeightsC { gamma, ..w.clone() }),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            ModuleWeights::Full(w) => w.wq.cols(),
            ModuleWeights::Reduced(w) => w.wq.cols(),
        }
    }

    pub fn inner_channels(&self) -> usize {
        match self {
            ModuleWeights::Full(w) => w.wq.rows(),
            ModuleWeights::Reduced(w) => w.wq.rows(),
        }
    }

    /// One module application `F(x)` without the gamma scale.
    pub fn apply(&self, x: &FeatureMap4D<S>) -> Result<(FeatureMap4D<S>, CcaCache<S>)> {
        if x.channels() != self.channels() {
            return Err(Error::shape(
                "module forward",
                format!("weights for C={}", self.channels()),
                format!("input {}", x.shape_str()),
            ));
        }
        match self {
            ModuleWeights::Full(w) => cca_core(x, &w.wq, &w.wk, &w.wv, None),
            ModuleWeights::Reduced(w) => cca_core(x, &w.wq, &w.wk, &w.wv_reduced, Some(&w.wr)),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ModuleWeights<T> {
        match self {
            ModuleWeights::Full(w) => ModuleWeights::Full(CcaWeights {
                wq: w.wq.cast(),
                wk: w.wk.cast(),
                wv: w.wv.cast(),
                gamma: T::of(w.gamma.as_f64()),
            }),
            ModuleWeights::Reduced(w) => ModuleWeights::Reduced(CcaWeightsC {
                wq: w.wq.cast(),
                wk: w.wk.cast(),
                wv_reduced: w.wv_reduced.cast(),
                wr: w.wr.cast(),
                gamma: T::of(w.gamma.as_f64()),
            }),
        }
    }
}

/// Shared module weights plus an optional per-recurrence gamma.
///
/// When `step_gammas` is `None` every recurrence uses the module's own gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct RccaWeights<S> {
    pub module: ModuleWeights<S>,
    pub step_gammas: Option<Vec<S>>,
}

impl<S: Scalar> RccaWeights<S> {
    pub fn shared(module: ModuleWeights<S>) -> Self {
        RccaWeights {
            module,
            step_gammas: None,
        }
    }

    pub fn gammas(&self, recurrences: usize) -> Result<Vec<S>> {
        match &self.step_gammas {
            None => Ok(vec![self.module.gamma(); recurrences]),
            Some(g) if g.len() == recurrences => Ok(g.clone()),
            Some(g) => Err(Error::Config(format!(
                "{} per-step gammas given for {recurrences} recurrences",
                g.len()
            ))),
        }
    }
}

impl<S: Scalar> From<CcaWeights<S>> for RccaWeights<S> {
    fn from(w: CcaWeights<S>) -> Self {
        RccaWeights::shared(ModuleWeights::Full(w))
    }
}

impl<S: Scalar> From<CcaWeightsC<S>> for RccaWeights<S> {
    fn from(w: CcaWeightsC<S>) -> Self {
        RccaWeights::shared(ModuleWeights::Reduced(w))
    }
}

impl<S: Scalar> From<ModuleWeights<S>> for RccaWeights<S> {
    fn from(w: ModuleWeights<S>) -> Self {
        RccaWeights::shared(w)
    }
}

#[derive(Debug, Clone)]
pub struct RccaCache<S> {
    pub config: RccaConfig,
    pub gammas: Vec<S>,
    /// One cache per recurrence, first to last.
    pub steps: Vec<CcaCache<S>>,
}

pub(crate) fn check_config<S: Scalar>(x: &FeatureMap4D<S>, cfg: &RccaConfig, w: &RccaWeights<S>) -> Result<()> {
    if cfg.recurrences == 0 {
        return Err(Error::Config("recurrence count must be at least 1".into()));
    }
    match (&w.module, cfg.variant) {
        (ModuleWeights::Reduced(_), Variant::C) => {}
        (ModuleWeights::Full(_), Variant::A | Variant::B | Variant::D) => {}
        (_, v) => {
            return Err(Error::Config(format!("weights kind does not match structure {v}")));
        }
    }
    if w.module.channels() != x.channels() {
        return Err(Error::shape(
            "rcca_forward",
            format!("weights for C={}", w.module.channels()),
            format!("input {}", x.shape_str()),
        ));
    }
    let expected = cfg.channel_fraction.inner_channels(x.channels());
    if w.module.inner_channels() != expected {
        return Err(Error::Config(format!(
            "weights have C'={} but C={} with C_d={} gives C'={expected}",
            w.module.inner_channels(),
            x.channels(),
            cfg.channel_fraction
        )));
    }
    Ok(())
}

pub fn rcca_forward<S: Scalar>(
    x: &FeatureMap4D<S>,
    cfg: &RccaConfig,
    w: &RccaWeights<S>,
) -> Result<(FeatureMap4D<S>, RccaCache<S>)> {
    check_config(x, cfg, w)?;
    let gammas = w.gammas(cfg.recurrences)?;
    let mut steps = Vec::with_capacity(cfg.recurrences);
    let mut y = x.clone();
    for (k, &gamma) in gammas.iter().enumerate() {
        let (h, cache) = w.module.apply(&y)?;
        let last = k + 1 == cfg.recurrences;
        y = match cfg.variant {
            Variant::A | Variant::C => axpy(gamma, &h, x)?,
            Variant::B => axpy(gamma, &h, &y)?,
            Variant::D if last => axpy(gamma, &h, x)?,
            Variant::D => h.map(|v| gamma * v)?,
        };
        steps.push(cache);
    }
    Ok((
        y,
        RccaCache {
            config: *cfg,
            gammas,
            steps,
        },
    ))
}

/// Positions whose output can depend on the input at one source position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfluenceSet {
    grid: Grid,
    members: Vec<bool>,
}

impl InfluenceSet {
    pub fn contains(&self, p: Position) -> bool {
        self.members[self.grid.index(p)]
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.members.iter().all(|&m| m)
    }

    pub fn positions(&self) -> Vec<Position> {
        self.grid.positions().filter(|&p| self.contains(p)).collect()
    }
}

/// Structural reachability after `cfg.recurrences` module applications.
///
/// One application lets `u` read every position on its criss-cross path, so
/// the set grows by one hop of the path relation per recurrence. The
/// residual terms only add the source itself, which every path already
/// contains, so the result is the same for all structures.
pub fn influence_set(cfg: &RccaConfig, grid: Grid, v: Position) -> Result<InfluenceSet> {
    grid.check(v)?;
    let mut members = vec![false; grid.len()];
    members[grid.index(v)] = true;
    for _ in 0..cfg.recurrences {
        let prev = members.clone();
        for (idx, m) in members.iter_mut().enumerate() {
            if *m {
                continue;
            }
            for_each_path_index(grid, grid.position(idx), |_, p| *m |= prev[p]);
        }
    }
    Ok(InfluenceSet { grid, members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criss_cross::{cca3d_forward, path_indices};
    use crate::init::SeededInit;
    use crate::tensor::max_abs_diff;

    fn grid(t: usize, h: usize, w: usize) -> Grid {
        Grid::new(t, h, w).unwrap()
    }

    fn weights_for(init: &mut SeededInit, variant: Variant, c: usize, cp: usize) -> RccaWeights<f64> {
        match variant {
            Variant::C => init.cca_weights_reduced(c, cp).into(),
            _ => init.cca_weights(c, cp).into(),
        }
    }

    #[test]
    fn gamma_zero_is_identity() {
        let mut init = SeededInit::new(1);
        let x = init.feature_map::<f64>(8, grid(2, 3, 3));
        for variant in Variant::ALL {
            for r in 1..=3 {
                let cfg = RccaConfig::new(variant, r, ChannelFraction::default()).unwrap();
                let w = weights_for(&mut init, variant, 8, 2);
                let w = RccaWeights::shared(w.module.with_gamma(0.0));
                let (y, _) = rcca_forward(&x, &cfg, &w).unwrap();
                assert_eq!(y, x, "variant {variant}, R={r}");
            }
        }
    }

    #[test]
    fn one_recurrence_a_equals_b() {
        let mut init = SeededInit::new(2);
        let x = init.feature_map::<f64>(8, grid(2, 3, 3));
        let w = weights_for(&mut init, Variant::A, 8, 2);
        let fa = RccaConfig::new(Variant::A, 1, ChannelFraction::default()).unwrap();
        let fb = RccaConfig::new(Variant::B, 1, ChannelFraction::default()).unwrap();
        assert_eq!(rcca_forward(&x, &fa, &w).unwrap().0, rcca_forward(&x, &fb, &w).unwrap().0);
    }

    #[test]
    fn variant_a_matches_step_by_step_composition() {
        let mut init = SeededInit::new(3);
        let x = init.feature_map::<f64>(6, grid(2, 3, 3));
        let cw = init.cca_weights::<f64>(6, 1);
        let cfg = RccaConfig::new(Variant::A, 3, ChannelFraction::new(1, 4).unwrap()).unwrap();
        let (y, _) = rcca_forward(&x, &cfg, &cw.clone().into()).unwrap();

        let mut expected = x.clone();
        for _ in 0..3 {
            let (h, _) = cca3d_forward(&expected, &cw).unwrap();
            expected = axpy(cw.gamma, &h, &x).unwrap();
        }
        assert_eq!(max_abs_diff(&y, &expected).unwrap(), 0.0);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut init = SeededInit::new(4);
        let x = FeatureMap4D::<f64>::zeros(4, grid(2, 2, 3)).unwrap();
        for variant in Variant::ALL {
            let cfg = RccaConfig::new(variant, 3, ChannelFraction::new(1, 2).unwrap()).unwrap();
            let w = weights_for(&mut init, variant, 4, 2);
            let (y, _) = rcca_forward(&x, &cfg, &w).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut init = SeededInit::new(5);
        let x = init.feature_map::<f64>(4, grid(1, 2, 2));
        assert!(RccaConfig::new(Variant::A, 0, ChannelFraction::default()).is_err());
        let cfg = RccaConfig::new(Variant::C, 2, ChannelFraction::default()).unwrap();
        let full: RccaWeights<f64> = init.cca_weights(4, 1).into();
        assert!(matches!(rcca_forward(&x, &cfg, &full), Err(Error::Config(_))));
        let cfg = RccaConfig::new(Variant::A, 2, ChannelFraction::new(1, 2).unwrap()).unwrap();
        assert!(matches!(rcca_forward(&x, &cfg, &full), Err(Error::Config(_))));
        let mut untied = full.clone();
        untied.step_gammas = Some(vec![1.0]);
        assert!(rcca_forward(&x, &cfg, &untied).is_err());
    }

    #[test]
    fn per_step_gammas_override_shared() {
        let mut init = SeededInit::new(6);
        let x = init.feature_map::<f64>(4, grid(2, 2, 2));
        let cfg = RccaConfig::default();
        let shared: RccaWeights<f64> = init.cca_weights(4, 1).into();
        let mut untied = shared.clone();
        untied.step_gammas = Some(vec![shared.module.gamma(); 3]);
        assert_eq!(rcca_forward(&x, &cfg, &shared).unwrap().0, rcca_forward(&x, &cfg, &untied).unwrap().0);
        untied.step_gammas = Some(vec![0.0, 0.0, 0.0]);
        assert_eq!(rcca_forward(&x, &cfg, &untied).unwrap().0, x);
    }

    #[test]
    fn channel_fraction_parsing() {
        assert_eq!("1/4".parse::<ChannelFraction>().unwrap(), ChannelFraction::new(1, 4).unwrap());
        assert_eq!("1".parse::<ChannelFraction>().unwrap().value(), 1.0);
        assert!("3/2".parse::<ChannelFraction>().is_err());
        assert!("x".parse::<ChannelFraction>().is_err());
        let cd = ChannelFraction::new(1, 16).unwrap();
        assert_eq!(cd.inner_channels(8), 1);
        assert_eq!(cd.exact_inner_channels(8), None);
        assert_eq!(cd.exact_inner_channels(512), Some(32));
    }

    #[test]
    fn influence_one_step_is_star() {
        let g = grid(3, 4, 5);
        let cfg = RccaConfig::new(Variant::A, 1, ChannelFraction::default()).unwrap();
        let v = Position::new(1, 2, 3);
        let set = influence_set(&cfg, g, v).unwrap();
        let mut expected = path_indices(v, g).unwrap().entries;
        expected.sort();
        assert_eq!(set.positions(), expected);
    }

    #[test]
    fn influence_two_steps_is_three_planes() {
        let g = grid(3, 4, 5);
        let cfg = RccaConfig::new(Variant::A, 2, ChannelFraction::default()).unwrap();
        let v = Position::new(1, 2, 3);
        let set = influence_set(&cfg, g, v).unwrap();
        for u in g.positions() {
            let on_plane = u.t == v.t || u.h == v.h || u.w == v.w;
            assert_eq!(set.contains(u), on_plane, "u={u}");
        }
    }

    #[test]
    fn influence_three_steps_is_everything() {
        let g = grid(4, 5, 6);
        let cfg = RccaConfig::default();
        for v in g.positions() {
            assert!(influence_set(&cfg, g, v).unwrap().is_full());
        }
        assert!(influence_set(&cfg, g, Position::new(4, 0, 0)).is_err());
    }
}
