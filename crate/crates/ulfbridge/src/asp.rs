//! Structure preservation regularizer: soft foreground masks, trimap
//! consistency through weighted binary cross-entropy, and a boundary
//! precision penalty driven by an exact Euclidean distance transform.
//!
//! The trimap and the distance field are functions of the input slice only;
//! gradients flow solely through the translated output's soft mask.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayD, IxDyn};

/// Thresholds and tolerances for the regularizer.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AspConfig {
    /// Mask threshold in (0,1) on normalized intensity.
    pub tau_m: f64,
    /// Mask softness > 0.
    pub s_m: f64,
    /// Confident-foreground threshold on the soft mask.
    pub tau_fg: f64,
    /// Confident-background threshold, below tau_fg.
    pub tau_bg: f64,
    /// Boundary tolerance in pixels.
    pub t_tol: f64,
    /// Softness of the boundary distance gate.
    pub gamma_soft: f64,
    /// Clamp for log arguments in the cross-entropy terms.
    pub log_clamp: f64,
}

impl Default for AspConfig {
    fn default() -> Self {
        AspConfig {
            tau_m: 0.15,
            s_m: 0.04,
            tau_fg: 0.7,
            tau_bg: 0.3,
            t_tol: 2.0,
            gamma_soft: 0.5,
            log_clamp: 1e-6,
        }
    }
}

impl AspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau_m && self.tau_m < 1.0) {
            return Err(Error::InvalidConfig("tau_m must lie in (0,1)".into()));
        }
        if self.s_m <= 0.0 || self.gamma_soft <= 0.0 || self.log_clamp <= 0.0 {
            return Err(Error::InvalidConfig(
                "softness and clamp parameters must be positive".into(),
            ));
        }
        if !(0.0 < self.tau_bg && self.tau_bg < self.tau_fg && self.tau_fg < 1.0) {
            return Err(Error::InvalidConfig(
                "need 0 < tau_bg < tau_fg < 1".into(),
            ));
        }
        if self.t_tol < 0.0 {
            return Err(Error::InvalidConfig("t_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Confident foreground/background partition; the unknown region is the
/// complement of both.
#[derive(Debug, Clone)]
pub struct Trimap {
    pub m_core: Array2<f64>,
    pub m_bg: Array2<f64>,
}

/// Distance value used where no boundary pixel exists.
pub const EDT_EMPTY_SENTINEL: f64 = 1e6;

// ── array-level operations ─────────────────────────────────────────────

/// Clip to [-1,1] and affinely map to [0,1].
pub fn normalize01<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    let one = S::one();
    let half = S::from_f64c(0.5);
    x.mapv(|v| (v.max(-one).min(one) + one) * half)
}

/// Pixelwise sigmoid((x01 - tau_m) / s_m).
pub fn soft_mask(x01: &Array2<f64>, tau_m: f64, s_m: f64) -> Result<Array2<f64>> {
    if s_m <= 0.0 {
        return Err(Error::InvalidConfig("s_m must be positive".into()));
    }
    Ok(x01.mapv(|v| sigmoid((v - tau_m) / s_m)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Channel mean of a (C,H,W) slice in [0,1] space: the per-pixel intensity
/// the masks are computed on.
pub fn channel_mean_01<S: Scalar>(x: &ArrayD<S>) -> Array2<f64> {
    let x01 = normalize01(x);
    let sh = x01.shape().to_vec();
    assert_eq!(sh.len(), 3, "expected a (C,H,W) slice");
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let flat = x01.view().into_shape_with_order((c, h * w)).unwrap();
    let mut out = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        for j in 0..h * w {
            out[[j / w, j % w]] += flat[[ch, j]].to_f64c();
        }
    }
    out.mapv(|v| v / c as f64)
}

/// Threshold a soft mask into confident regions.
pub fn make_trimap(m_in: &Array2<f64>, tau_fg: f64, tau_bg: f64) -> Result<Trimap> {
    if tau_bg >= tau_fg {
        return Err(Error::InvalidConfig("tau_bg must be below tau_fg".into()));
    }
    let m_core = m_in.mapv(|v| if v > tau_fg { 1.0 } else { 0.0 });
    let m_bg = m_in.mapv(|v| if v < tau_bg { 1.0 } else { 0.0 });
    Ok(Trimap { m_core, m_bg })
}

/// Weighted binary cross-entropy against a constant 0/1 target, normalized
/// by the weight mass; an all-zero weight gives 0.
pub fn masked_bce(
    pred: &Array2<f64>,
    target: f64,
    weight: &Array2<f64>,
    log_clamp: f64,
) -> Result<f64> {
    if pred.dim() != weight.dim() {
        return Err(Error::Shape("pred/weight shapes differ".into()));
    }
    let wsum: f64 = weight.sum();
    if wsum == 0.0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (p, w) in pred.iter().zip(weight.iter()) {
        if *w == 0.0 {
            continue;
        }
        let p = p.clamp(log_clamp, 1.0 - log_clamp);
        acc += w * (target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    }
    Ok(-acc / wsum.max(1.0))
}

/// Soft boundary magnitude: mask minus its 3x3 min-pool (windows clipped at
/// the borders). Zero on constant regions.
pub fn boundary_map(mask: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = mask.dim();
    if h < 3 && w < 3 {
        return Err(Error::TooSmall(format!(
            "boundary map needs at least 3 pixels in one dimension, got {h}x{w}"
        )));
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    best = best.min(mask[[yy, xx]]);
                }
            }
            out[[y, x]] = (mask[[y, x]] - best).abs();
        }
    }
    Ok(out)
}

/// Exact Euclidean distance to the nearest boundary pixel. Boundary pixels
/// get 0; an empty boundary set yields the large sentinel everywhere.
///
/// Squared distances are propagated with exact integer arithmetic (the
/// two-pass lower-envelope construction), so results match brute force
/// exactly.
pub fn distance_transform(boundary: &Array2<f64>) -> Array2<f64> {
    let (h, w) = boundary.dim();
    let inf = i64::MAX / 4;
    // pass 1: per column, squared distance to nearest boundary row
    let mut f = Array2::<i64>::from_elem((h, w), inf);
    for x in 0..w {
        let mut rows: Vec<i64> = Vec::new();
        for y in 0..h {
            if boundary[[y, x]] != 0.0 {
                rows.push(y as i64);
            }
        }
        if rows.is_empty() {
            continue;
        }
        for y in 0..h {
            let mut best = inf;
            for &r in &rows {
                let d = (y as i64 - r) * (y as i64 - r);
                if d < best {
                    best = d;
                }
            }
            f[[y, x]] = best;
        }
    }
    // pass 2: per row, 1-d squared EDT over x. Hull intersections are exact
    // integer rationals; sentinel bounds are sized so cross-multiplied
    // comparisons cannot overflow.
    const NEG: i64 = -(1 << 40);
    const POS: i64 = 1 << 40;
    let mut out = Array2::<f64>::zeros((h, w));
    let mut v = vec![0usize; w];
    let mut z_num = vec![0i64; w + 1];
    let mut z_den = vec![1i64; w + 1];
    for y in 0..h {
        let mut k = 0usize;
        let mut started = false;
        for q in 0..w {
            let fq = f[[y, q]];
            if fq >= inf {
                continue;
            }
            if !started {
                v[0] = q;
                z_num[0] = NEG;
                z_den[0] = 1;
                z_num[1] = POS;
                z_den[1] = 1;
                started = true;
                k = 0;
                continue;
            }
            loop {
                let p = v[k];
                // intersection of parabolas rooted at q and p:
                // s = (fq + q^2 - fp - p^2) / (2q - 2p), den > 0
                let num = fq + (q * q) as i64 - f[[y, p]] - (p * p) as i64;
                let den = 2 * (q as i64 - p as i64);
                // pop while s <= z[k]; never true against the NEG sentinel
                if num * z_den[k] <= z_num[k] * den {
                    debug_assert!(k > 0);
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z_num[k] = num;
                    z_den[k] = den;
                    z_num[k + 1] = POS;
                    z_den[k + 1] = 1;
                    break;
                }
            }
        }
        if !started {
            for x in 0..w {
                out[[y, x]] = EDT_EMPTY_SENTINEL;
            }
            continue;
        }
        let mut k = 0usize;
        for x in 0..w {
            while z_num[k + 1] < (x as i64) * z_den[k + 1] {
                k += 1;
            }
            let p = v[k];
            let d2 = (x as i64 - p as i64) * (x as i64 - p as i64) + f[[y, p]];
            out[[y, x]] = (d2 as f64).sqrt();
        }
    }
    // columns with no boundary anywhere in the image
    if out.iter().all(|&d| d >= EDT_EMPTY_SENTINEL) {
        return Array2::from_elem((h, w), EDT_EMPTY_SENTINEL);
    }
    out
}

/// Brute-force squared-distance oracle used by tests.
pub fn distance_transform_brute(boundary: &Array2<f64>) -> Array2<f64> {
    let (h, w) = boundary.dim();
    let pts: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| boundary[[y, x]] != 0.0)
        .map(|(y, x)| (y as i64, x as i64))
        .collect();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if pts.is_empty() {
                out[[y, x]] = EDT_EMPTY_SENTINEL;
                continue;
            }
            let mut best = i64::MAX;
            for &(py, px) in &pts {
                let d = (y as i64 - py).pow(2) + (x as i64 - px).pow(2);
                if d < best {
                    best = d;
                }
            }
            out[[y, x]] = (best as f64).sqrt();
        }
    }
    out
}

/// Boundary precision penalty: one minus the gate-weighted inlier ratio of
/// the output boundary mass. Empty output boundary gives 0.
pub fn nsd_penalty(
    b_out: &Array2<f64>,
    d: &Array2<f64>,
    t_tol: f64,
    gamma_soft: f64,
) -> Result<f64> {
    if b_out.dim() != d.dim() {
        return Err(Error::Shape("boundary/distance shapes differ".into()));
    }
    if gamma_soft <= 0.0 {
        return Err(Error::InvalidConfig("gamma_soft must be positive".into()));
    }
    let total: f64 = b_out.sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inlier: f64 = b_out
        .iter()
        .zip(d.iter())
        .map(|(b, dd)| b * sigmoid((t_tol - dd) / gamma_soft))
        .sum();
    Ok(1.0 - inlier / total)
}

/// Per-term values of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AspBreakdown {
    pub core_bce: f64,
    pub bg_bce: f64,
    pub boundary: f64,
}

impl AspBreakdown {
    pub fn total(&self) -> f64 {
        self.core_bce + self.bg_bce + self.boundary
    }
}

/// Input-side constants of the loss: trimap and distance field derived from
/// the source slice only. Reused across refinement steps.
#[derive(Debug, Clone)]
pub struct AspReference {
    pub trimap: Trimap,
    pub distance: Array2<f64>,
}

/// Build the trimap and boundary distance field from the source slice.
pub fn asp_reference<S: Scalar>(x: &ArrayD<S>, config: &AspConfig) -> Result<AspReference> {
    config.validate()?;
    let x01 = channel_mean_01(x);
    let m_in = soft_mask(&x01, config.tau_m, config.s_m)?;
    let trimap = make_trimap(&m_in, config.tau_fg, config.tau_bg)?;
    let hard = m_in.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let hard_boundary = boundary_map(&hard)?.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let distance = distance_transform(&hard_boundary);
    Ok(AspReference { trimap, distance })
}

/// Composite loss value on arrays (single slice, (C,H,W)).
pub fn asp_loss<S: Scalar>(
    x: &ArrayD<S>,
    y_hat: &ArrayD<S>,
    config: &AspConfig,
) -> Result<(f64, AspBreakdown)> {
    if x.shape() != y_hat.shape() {
        return Err(Error::Shape("input/output shapes differ".into()));
    }
    let reference = asp_reference(x, config)?;
    let y01 = channel_mean_01(y_hat);
    let m_out = soft_mask(&y01, config.tau_m, config.s_m)?;
    let core_bce = masked_bce(&m_out, 1.0, &reference.trimap.m_core, config.log_clamp)?;
    let bg_bce = masked_bce(&m_out, 0.0, &reference.trimap.m_bg, config.log_clamp)?;
    let b_out = boundary_map(&m_out)?;
    let boundary = nsd_penalty(&b_out, &reference.distance, config.t_tol, config.gamma_soft)?;
    let br = AspBreakdown {
        core_bce,
        bg_bce,
        boundary,
    };
    Ok((br.total(), br))
}

// ── graph-level loss ───────────────────────────────────────────────────

/// Differentiable composite loss on a batch (N,C,H,W) inside a graph. The
/// trimap and distance field come from `x` (constants); gradients flow
/// through `y_hat` only. Returns the scalar node plus the batch-mean
/// breakdown.
pub fn asp_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    x: &ArrayD<S>,
    y_hat: Var,
    config: &AspConfig,
) -> Result<(Var, AspBreakdown)> {
    config.validate()?;
    let ysh = g.value(y_hat).shape().to_vec();
    if ysh.len() != 4 {
        return Err(Error::Shape("expected (N,C,H,W) output".into()));
    }
    if x.shape() != ysh.as_slice() {
        return Err(Error::Shape("input/output shapes differ".into()));
    }
    let (n, _c, h, w) = (ysh[0], ysh[1], ysh[2], ysh[3]);
    if h < 3 && w < 3 {
        return Err(Error::TooSmall("image below 3 pixels per side".into()));
    }

    // m_out = sigmoid((mean_c(normalize01(y)) - tau_m) / s_m), shape (N,1,H,W)
    let one = S::one();
    let y_cl = g.clamp(y_hat, -one, one);
    let y01 = g.add_scalar(y_cl, one);
    let y01 = g.mul_scalar(y01, S::from_f64c(0.5));
    let ymean = g.mean_channels(y01);
    let shifted = g.add_scalar(ymean, S::from_f64c(-config.tau_m));
    let scaled = g.mul_scalar(shifted, S::from_f64c(1.0 / config.s_m));
    let m_out = g.sigmoid(scaled);

    // per-sample input-side references
    let mut core_w = ArrayD::<S>::zeros(IxDyn(&[n, 1, h, w]));
    let mut bg_w = ArrayD::<S>::zeros(IxDyn(&[n, 1, h, w]));
    let mut gate = ArrayD::<S>::zeros(IxDyn(&[n, 1, h, w]));
    let mut core_mass = 0.0f64;
    let mut bg_mass = 0.0f64;
    for i in 0..n {
        let xi = x
            .index_axis(ndarray::Axis(0), i)
            .to_owned()
            .into_dyn();
        let reference = asp_reference(&xi, config)?;
        core_mass += reference.trimap.m_core.sum();
        bg_mass += reference.trimap.m_bg.sum();
        for y in 0..h {
            for xx in 0..w {
                core_w[[i, 0, y, xx]] = S::from_f64c(reference.trimap.m_core[[y, xx]]);
                bg_w[[i, 0, y, xx]] = S::from_f64c(reference.trimap.m_bg[[y, xx]]);
                gate[[i, 0, y, xx]] = S::from_f64c(sigmoid(
                    (config.t_tol - reference.distance[[y, xx]]) / config.gamma_soft,
                ));
            }
        }
    }

    // trimap BCE terms, each normalized by its region mass
    let lc = S::from_f64c(config.log_clamp);
    let p = g.clamp(m_out, lc, one - lc);
    let core_node = if core_mass > 0.0 {
        let logp = g.log(p);
        let wv = g.constant(core_w);
        let weighted = g.mul(logp, wv);
        let ssum = g.sum(weighted);
        let scaled = g.mul_scalar(ssum, S::from_f64c(-1.0 / core_mass.max(1.0)));
        Some(scaled)
    } else {
        None
    };
    let bg_node = if bg_mass > 0.0 {
        let onem = g.mul_scalar(p, -one);
        let onem = g.add_scalar(onem, one);
        let log1m = g.log(onem);
        let wv = g.constant(bg_w);
        let weighted = g.mul(log1m, wv);
        let ssum = g.sum(weighted);
        let scaled = g.mul_scalar(ssum, S::from_f64c(-1.0 / bg_mass.max(1.0)));
        Some(scaled)
    } else {
        None
    };

    // boundary term: b = m_out - minpool3(m_out); penalty = 1 - sum(b*gate)/sum(b)
    let mp = g.min_pool3(m_out);
    let b_out = g.sub(m_out, mp);
    let b_total = g.value(b_out).sum().to_f64c();
    let boundary_node = if b_total > 0.0 {
        let gv = g.constant(gate);
        let inl = g.mul(b_out, gv);
        let num = g.sum(inl);
        let den = g.sum(b_out);
        let ratio = g.div_scalars(num, den);
        let neg = g.mul_scalar(ratio, -one);
        Some(g.add_scalar(neg, one))
    } else {
        None
    };

    let zero = g.constant(ArrayD::from_elem(IxDyn(&[]), S::zero()));
    let core_node = core_node.unwrap_or(zero);
    let bg_node = bg_node.unwrap_or(zero);
    let boundary_node = boundary_node.unwrap_or(zero);
    let partial = g.add(core_node, bg_node);
    let total = g.add(partial, boundary_node);
    let br = AspBreakdown {
        core_bce: g.scalar_value(core_node).to_f64c(),
        bg_bce: g.scalar_value(bg_node).to_f64c(),
        boundary: g.scalar_value(boundary_node).to_f64c(),
    };
    Ok((total, br))
}
