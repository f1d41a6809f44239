//! Reverse-mode gradients of the criss-cross module and its recurrence,
//! and the central-difference oracle used to check them.

use crate::criss_cross::{for_each_path_index, CcaCache, CcaWeights};
use crate::error::{Error, Result};
use crate::rcca::{check_config, rcca_forward, ModuleWeights, RccaCache, RccaConfig, RccaWeights, Variant};
use crate::tensor::{FeatureMap4D, Matrix, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct CcaGradients<S> {
    pub d_x: FeatureMap4D<S>,
    pub d_wq: Matrix<S>,
    pub d_wk: Matrix<S>,
    /// Gradient of the value projection (`wv_reduced` for structure `c`).
    pub d_wv: Matrix<S>,
    pub d_wr: Option<Matrix<S>>,
    /// Total over recurrences; zero for a bare module.
    pub d_gamma: S,
    /// Per-recurrence contributions to `d_gamma`.
    pub d_gamma_steps: Vec<S>,
}

/// Weight gradients of one module application.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients<S> {
    pub d_wq: Matrix<S>,
    pub d_wk: Matrix<S>,
    pub d_wv: Matrix<S>,
    pub d_wr: Option<Matrix<S>>,
}

/// Sum over positions of `a[u] b[u]^T` for position-major buffers.
fn outer_sum<S: Scalar>(a: &[S], a_ch: usize, b: &[S], b_ch: usize) -> Matrix<S> {
    let n = a.len() / a_ch;
    let mut out = vec![S::zero(); a_ch * b_ch];
    for u in 0..n {
        let au = &a[u * a_ch..(u + 1) * a_ch];
        let bu = &b[u * b_ch..(u + 1) * b_ch];
        for (r, &av) in au.iter().enumerate() {
            for (c, &bv) in bu.iter().enumerate() {
                out[r * b_ch + c] += av * bv;
            }
        }
    }
    Matrix::from_vec(a_ch, b_ch, out).expect("finite gradients")
}

/// `acc[u] += W^T g[u]` for position-major buffers.
fn add_transposed_product<S: Scalar>(acc: &mut [S], w: &Matrix<S>, g: &[S]) {
    let (rows, cols) = (w.rows(), w.cols());
    for (au, gu) in acc.chunks_exact_mut(cols).zip(g.chunks_exact(rows)) {
        for (r, &gv) in gu.iter().enumerate() {
            for (c, a) in au.iter_mut().enumerate() {
                *a += w.get(r, c) * gv;
            }
        }
    }
}

struct Projections<'a, S> {
    wq: &'a Matrix<S>,
    wk: &'a Matrix<S>,
    wv: &'a Matrix<S>,
    wr: Option<&'a Matrix<S>>,
}

impl<'a, S: Scalar> Projections<'a, S> {
    fn of(w: &'a ModuleWeights<S>) -> Self {
        match w {
            ModuleWeights::Full(w) => Projections {
                wq: &w.wq,
                wk: &w.wk,
                wv: &w.wv,
                wr: None,
            },
            ModuleWeights::Reduced(w) => Projections {
                wq: &w.wq,
                wk: &w.wk,
                wv: &w.wv_reduced,
                wr: Some(&w.wr),
            },
        }
    }
}

fn module_backward<S: Scalar>(
    p: &Projections<'_, S>,
    cache: &CcaCache<S>,
    g_out: &FeatureMap4D<S>,
) -> Result<(FeatureMap4D<S>, StepGradients<S>)> {
    cache.output.same_shape("module backward", g_out)?;
    if p.wq.rows() != cache.q.channels() || p.wv.rows() != cache.v.channels() || p.wr.is_some() != cache.hidden.is_some() {
        return Err(Error::shape(
            "module backward",
            format!("weights wq {} wv {}", p.wq.shape_str(), p.wv.shape_str()),
            format!("cache q {} v {}", cache.q.shape_str(), cache.v.shape_str()),
        ));
    }
    let grid = cache.x.grid();
    let (n, l) = (grid.len(), grid.path_len());
    let (cx, cq, cv) = (cache.x.channels(), cache.q.channels(), cache.v.channels());

    let gp = g_out.to_position_major();
    let (g_agg, d_wr) = match (p.wr, &cache.hidden) {
        (Some(wr), Some(hidden)) => {
            let d_wr = outer_sum(&gp, wr.rows(), &hidden.to_position_major(), wr.cols());
            let mut g = vec![S::zero(); n * cv];
            add_transposed_product(&mut g, wr, &gp);
            (g, Some(d_wr))
        }
        _ => (gp, None),
    };

    let xp = cache.x.to_position_major();
    let qp = cache.q.to_position_major();
    let kp = cache.k.to_position_major();
    let vp = cache.v.to_position_major();
    let af = cache.attention.to_fibers();

    let mut dq = vec![S::zero(); n * cq];
    let mut dk = vec![S::zero(); n * cq];
    let mut dv = vec![S::zero(); n * cv];
    let mut da = vec![S::zero(); l];
    let mut path = vec![0usize; l];
    for u in 0..n {
        for_each_path_index(grid, grid.position(u), |i, v| path[i] = v);
        let a = &af[u * l..(u + 1) * l];
        let gu = &g_agg[u * cv..(u + 1) * cv];
        for (i, &v) in path.iter().enumerate() {
            let vv = &vp[v * cv..(v + 1) * cv];
            da[i] = gu.iter().zip(vv).map(|(&x, &y)| x * y).sum();
            for (d, &g) in dv[v * cv..(v + 1) * cv].iter_mut().zip(gu) {
                *d += a[i] * g;
            }
        }
        let inner: S = a.iter().zip(&da).map(|(&x, &y)| x * y).sum();
        let qu = &qp[u * cq..(u + 1) * cq];
        for (i, &v) in path.iter().enumerate() {
            let dd = a[i] * (da[i] - inner);
            for (d, &k) in dq[u * cq..(u + 1) * cq].iter_mut().zip(&kp[v * cq..(v + 1) * cq]) {
                *d += dd * k;
            }
            for (d, &q) in dk[v * cq..(v + 1) * cq].iter_mut().zip(qu) {
                *d += dd * q;
            }
        }
    }

    let step = StepGradients {
        d_wq: outer_sum(&dq, cq, &xp, cx),
        d_wk: outer_sum(&dk, cq, &xp, cx),
        d_wv: outer_sum(&dv, cv, &xp, cx),
        d_wr,
    };
    let mut dx = vec![S::zero(); n * cx];
    add_transposed_product(&mut dx, p.wq, &dq);
    add_transposed_product(&mut dx, p.wk, &dk);
    add_transposed_product(&mut dx, p.wv, &dv);
    let dx = FeatureMap4D::from_position_major(cx, grid, &dx);
    if dx.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("module backward"));
    }
    Ok((dx, step))
}

/// Gradient of a single module output `H` (gamma is not involved).
pub fn cca3d_backward<S: Scalar>(
    w: &CcaWeights<S>,
    cache: &CcaCache<S>,
    g_h: &FeatureMap4D<S>,
) -> Result<CcaGradients<S>> {
    let p = Projections {
        wq: &w.wq,
        wk: &w.wk,
        wv: &w.wv,
        wr: None,
    };
    let (d_x, step) = module_backward(&p, cache, g_h)?;
    Ok(CcaGradients {
        d_x,
        d_wq: step.d_wq,
        d_wk: step.d_wk,
        d_wv: step.d_wv,
        d_wr: None,
        d_gamma: S::zero(),
        d_gamma_steps: Vec::new(),
    })
}

/// Gradients of an RCCA forward pass together with the per-recurrence weight gradients.
#[derive(Debug, Clone)]
pub struct RccaGradients<S> {
    pub total: CcaGradients<S>,
    /// Weight gradients of each recurrence, first to last; `total` is their sum.
    pub steps: Vec<StepGradients<S>>,
}

pub fn rcca_backward<S: Scalar>(
    cfg: &RccaConfig,
    w: &RccaWeights<S>,
    cache: &RccaCache<S>,
    g_y: &FeatureMap4D<S>,
) -> Result<RccaGradients<S>> {
    if cache.config != *cfg || cache.steps.len() != cfg.recurrences || cache.gammas.len() != cfg.recurrences {
        return Err(Error::Config("cache was produced by a different configuration".into()));
    }
    let x = &cache.steps[0].x;
    check_config(x, cfg, w)?;
    x.same_shape("rcca_backward", g_y)?;
    let proj = Projections::of(&w.module);
    let r = cfg.recurrences;

    let mut d_x = vec![S::zero(); x.data().len()];
    let mut d_gamma_steps = vec![S::zero(); r];
    let mut steps = Vec::with_capacity(r);
    // Gradient with respect to the output of recurrence k.
    let mut g = g_y.clone();
    for k in (0..r).rev() {
        let step_cache = &cache.steps[k];
        let gamma = cache.gammas[k];
        d_gamma_steps[k] = g.dot(&step_cache.output)?;
        let residual_to_x = match cfg.variant {
            Variant::A | Variant::C => true,
            Variant::D => k + 1 == r,
            Variant::B => false,
        };
        if residual_to_x {
            for (d, &v) in d_x.iter_mut().zip(g.data()) {
                *d += v;
            }
        }
        let g_h = g.map(|v| gamma * v)?;
        let (mut g_in, step) = module_backward(&proj, step_cache, &g_h)?;
        steps.push(step);
        if cfg.variant == Variant::B {
            g_in = crate::tensor::axpy(S::one(), &g, &g_in)?;
        }
        if k == 0 {
            for (d, &v) in d_x.iter_mut().zip(g_in.data()) {
                *d += v;
            }
        }
        g = g_in;
    }
    steps.reverse();

    let sum = |pick: fn(&StepGradients<S>) -> &Matrix<S>| -> Result<Matrix<S>> {
        steps.iter().skip(1).try_fold(pick(&steps[0]).clone(), |acc, s| acc.add(pick(s)))
    };
    let d_wr = match steps[0].d_wr {
        Some(_) => Some(
            steps
                .iter()
                .skip(1)
                .try_fold(steps[0].d_wr.clone().unwrap(), |acc, s| acc.add(s.d_wr.as_ref().unwrap()))?,
        ),
        None => None,
    };
    let total = CcaGradients {
        d_x: FeatureMap4D::checked("rcca_backward", x.channels(), x.grid(), d_x)?,
        d_wq: sum(|s| &s.d_wq)?,
        d_wk: sum(|s| &s.d_wk)?,
        d_wv: sum(|s| &s.d_wv)?,
        d_wr,
        d_gamma: d_gamma_steps.iter().copied().sum(),
        d_gamma_steps,
    };
    Ok(RccaGradients { total, steps })
}

/// A single scalar parameter of an RCCA forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    /// Input element `(channel, flat position)`.
    X(usize, usize),
    Wq(usize, usize),
    Wk(usize, usize),
    Wv(usize, usize),
    Wr(usize, usize),
    Gamma,
    /// Per-recurrence gamma; requires `step_gammas` to be set.
    StepGamma(usize),
}

impl<S: Scalar> CcaGradients<S> {
    pub fn get(&self, p: Param) -> Option<S> {
        Some(match p {
            Param::X(c, u) => self.d_x.at(c, u),
            Param::Wq(r, c) => self.d_wq.get(r, c),
            Param::Wk(r, c) => self.d_wk.get(r, c),
            Param::Wv(r, c) => self.d_wv.get(r, c),
            Param::Wr(r, c) => self.d_wr.as_ref()?.get(r, c),
            Param::Gamma => self.d_gamma,
            Param::StepGamma(k) => *self.d_gamma_steps.get(k)?,
        })
    }
}

/// Every scalar parameter of the given input and weights.
pub fn all_params<S: Scalar>(x: &FeatureMap4D<S>, w: &RccaWeights<S>) -> Vec<Param> {
    let mut out = Vec::new();
    for c in 0..x.channels() {
        for u in 0..x.grid().len() {
            out.push(Param::X(c, u));
        }
    }
    let p = Projections::of(&w.module);
    let mut push = |m: &Matrix<S>, f: fn(usize, usize) -> Param| {
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                out.push(f(r, c));
            }
        }
    };
    push(p.wq, Param::Wq);
    push(p.wk, Param::Wk);
    push(p.wv, Param::Wv);
    if let Some(wr) = p.wr {
        push(wr, Param::Wr);
    }
    match &w.step_gammas {
        None => out.push(Param::Gamma),
        Some(g) => out.extend((0..g.len()).map(Param::StepGamma)),
    }
    out
}

/// Returns copies of `x` and `w` with parameter `p` shifted by `delta`.
pub fn perturb<S: Scalar>(
    x: &FeatureMap4D<S>,
    w: &RccaWeights<S>,
    p: Param,
    delta: S,
) -> (FeatureMap4D<S>, RccaWeights<S>) {
    let mut x = x.clone();
    let mut w = w.clone();
    let bump = |m: &mut Matrix<S>, r: usize, c: usize| *m.get_mut(r, c) = m.get(r, c) + delta;
    match (p, &mut w.module) {
        (Param::X(c, u), _) => {
            let pos = x.grid().position(u);
            x = x.with_value(c, pos, x.get(c, pos) + delta);
        }
        (Param::Wq(r, c), ModuleWeights::Full(m)) => bump(&mut m.wq, r, c),
        (Param::Wq(r, c), ModuleWeights::Reduced(m)) => bump(&mut m.wq, r, c),
        (Param::Wk(r, c), ModuleWeights::Full(m)) => bump(&mut m.wk, r, c),
        (Param::Wk(r, c), ModuleWeights::Reduced(m)) => bump(&mut m.wk, r, c),
        (Param::Wv(r, c), ModuleWeights::Full(m)) => bump(&mut m.wv, r, c),
        (Param::Wv(r, c), ModuleWeights::Reduced(m)) => bump(&mut m.wv_reduced, r, c),
        (Param::Wr(r, c), ModuleWeights::Reduced(m)) => bump(&mut m.wr, r, c),
        (Param::Wr(..), ModuleWeights::Full(_)) => panic!("full weights have no restore projection"),
        (Param::Gamma, ModuleWeights::Full(m)) => m.gamma += delta,
        (Param::Gamma, ModuleWeights::Reduced(m)) => m.gamma += delta,
        (Param::StepGamma(k), _) => {
            let g = w.step_gammas.as_mut().expect("per-step gammas");
            g[k] += delta;
        }
    }
    (x, w)
}

/// `(f(at + eps) - f(at - eps)) / (2 eps)`.
pub fn central_difference(f: impl Fn(f64) -> f64, at: f64, eps: f64) -> f64 {
    (f(at + eps) - f(at - eps)) / (2.0 * eps)
}

/// Central-difference estimate of `d loss / d p`.
pub fn finite_diff_grad(
    loss: impl Fn(&FeatureMap4D<f64>, &RccaWeights<f64>) -> f64,
    x: &FeatureMap4D<f64>,
    w: &RccaWeights<f64>,
    p: Param,
    eps: f64,
) -> f64 {
    let (xp, wp) = perturb(x, w, p, eps);
    let (xm, wm) = perturb(x, w, p, -eps);
    (loss(&xp, &wp) - loss(&xm, &wm)) / (2.0 * eps)
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Sum of all outputs of an RCCA forward pass.
pub fn sum_loss(cfg: &RccaConfig) -> impl Fn(&FeatureMap4D<f64>, &RccaWeights<f64>) -> f64 + '_ {
    move |x, w| rcca_forward(x, cfg, w).expect("valid forward").0.sum()
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(Param, f64, f64)>,
}

/// Compares analytic gradients of the sum loss against central differences for every parameter.
pub fn check_gradients(
    x: &FeatureMap4D<f64>,
    cfg: &RccaConfig,
    w: &RccaWeights<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    let (y, cache) = rcca_forward(x, cfg, w)?;
    let ones = y.map(|_| 1.0)?;
    let grads = rcca_backward(cfg, w, &cache, &ones)?.total;
    let loss = sum_loss(cfg);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for p in all_params(x, w) {
        let analytic = grads.get(p).expect("parameter has a gradient");
        let numeric = finite_diff_grad(&loss, x, w, p, eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((p, analytic, numeric));
        }
    }
    Ok(report)
}
