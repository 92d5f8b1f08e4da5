//! Forward finite-difference operators `delta_h^alpha` on grid functions and
//! on kernels, Sobolev difference-quotient tests, and the bump-battery
//! variational test.
//!
//! Only forward differences are implemented: the operator is the product
//! `prod_i (Delta_{h_i e_i} / h_i)^(alpha_i)` of scaled forward first
//! differences, so the discrete adjoint identity holds in the exact form the
//! trace arguments rely on.

use crate::error::{Error, Result};
use crate::grid::{
    enumerate_multi_indices, lp_norm_interior, BoxDomain, Grid, GridFunction, MultiIndex,
};
use crate::kernels::Kernel;
use serde::{Deserialize, Serialize};

/// Divergence / boundedness verdict for a refinement series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Classification {
    Convergent,
    Divergent,
    Inconclusive,
}

/// A refinement series is diverging when the last value exceeds the first by
/// this factor across the ladder (a `1/h` blow-up doubles per halving, giving
/// a factor 4 over two halvings).
pub const DIVERGENCE_FACTOR: f64 = 4.0;

/// ... and bounded when the last value stays within this factor of the first.
pub const BOUNDED_FACTOR: f64 = 1.5;

/// Classifies a positive refinement series by the growth of its last entry
/// relative to its first. Anything between the bounded and divergence
/// factors is inconclusive.
pub fn classify_ratio_series(values: &[f64]) -> Classification {
    if values.len() < 2 {
        return Classification::Inconclusive;
    }
    let first = values[0];
    let last = values[values.len() - 1];
    if first.abs() < 1e-300 {
        return if last.abs() < 1e-12 {
            Classification::Convergent
        } else {
            Classification::Divergent
        };
    }
    let growth = last / first;
    if growth >= DIVERGENCE_FACTOR * (1.0 - 1e-9) {
        Classification::Divergent
    } else if growth <= BOUNDED_FACTOR {
        Classification::Convergent
    } else {
        Classification::Inconclusive
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut v = 1.0;
    for j in 0..k {
        v = v * (n - j) as f64 / (j + 1) as f64;
    }
    v
}

/// Expanded stencil of `prod_i (Delta_{h_i e_i} / h_i)^(alpha_i)`.
///
/// Offsets are in units of `h`; `coeffs` carry the alternating binomial
/// signs and `norm` the `prod h_i^(alpha_i)` scaling.
#[derive(Clone, Debug)]
pub struct DifferenceStencil {
    pub alpha: MultiIndex,
    pub steps: Vec<f64>,
    /// Per-term offset counts `r` with `0 <= r_i <= alpha_i`.
    pub offsets: Vec<Vec<usize>>,
    /// `prod_i (-1)^(alpha_i - r_i) C(alpha_i, r_i)` per offset.
    pub coeffs: Vec<f64>,
    /// `prod_i h_i^(alpha_i)`.
    pub norm: f64,
}

impl DifferenceStencil {
    pub fn new(alpha: &MultiIndex, steps: &[f64]) -> Result<Self> {
        let d = alpha.dim();
        if steps.len() != d {
            return Err(Error::Config(format!(
                "step vector length {} does not match multi-index dimension {d}",
                steps.len()
            )));
        }
        if steps.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::Config(format!("steps must be positive, got {steps:?}")));
        }
        let mut offsets = vec![vec![0usize; d]];
        for (i, &a) in alpha.entries().iter().enumerate() {
            let mut next = Vec::with_capacity(offsets.len() * (a + 1));
            for base in &offsets {
                for r in 0..=a {
                    let mut o = base.clone();
                    o[i] = r;
                    next.push(o);
                }
            }
            offsets = next;
        }
        let coeffs = offsets
            .iter()
            .map(|o| {
                let mut c = 1.0;
                for (i, &r) in o.iter().enumerate() {
                    let a = alpha.entries()[i];
                    c *= binomial(a, r) * if (a - r) % 2 == 0 { 1.0 } else { -1.0 };
                }
                c
            })
            .collect();
        let norm = alpha
            .entries()
            .iter()
            .zip(steps.iter())
            .map(|(&a, &h)| h.powi(a as i32))
            .product();
        Ok(DifferenceStencil {
            alpha: alpha.clone(),
            steps: steps.to_vec(),
            offsets,
            coeffs,
            norm,
        })
    }

    /// Applies the stencil to a point function: `sum_r c_r f(x + r . h) / norm`.
    pub fn apply_to(&self, x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
        let mut acc = 0.0;
        let mut shifted = x.to_vec();
        for (o, &c) in self.offsets.iter().zip(self.coeffs.iter()) {
            for (i, &r) in o.iter().enumerate() {
                shifted[i] = x[i] + r as f64 * self.steps[i];
            }
            acc += c * f(&shifted)?;
        }
        Ok(acc / self.norm)
    }
}

/// Converts steps to whole numbers of grid cells on a uniform grid.
fn steps_in_cells(grid: &Grid, steps: &[f64]) -> Result<Vec<usize>> {
    let spacing = grid.spacing().ok_or_else(|| {
        Error::Config(
            "finite differences of grid functions require a uniform (midpoint) grid".into(),
        )
    })?;
    if steps.len() != grid.dim() {
        return Err(Error::Config(format!(
            "step vector length {} does not match grid dimension {}",
            steps.len(),
            grid.dim()
        )));
    }
    let mut cells = Vec::with_capacity(steps.len());
    for (&h, &sp) in steps.iter().zip(spacing.iter()) {
        let k = (h / sp).round();
        if k < 1.0 || (h - k * sp).abs() > 1e-9 * sp {
            return Err(Error::Config(format!(
                "step {h} is not a positive whole multiple of the grid spacing {sp}"
            )));
        }
        cells.push(k as usize);
    }
    Ok(cells)
}

/// Raw stencil application on a grid function: values are computed at every
/// node whose full stencil footprint stays on the grid and set to zero
/// elsewhere. No margin logic; composing raw applications reproduces the
/// composite stencil wherever the combined footprint fits.
pub fn apply_stencil(u: &GridFunction, alpha: &MultiIndex, steps: &[f64]) -> Result<GridFunction> {
    let grid = u.grid().clone();
    let stencil = DifferenceStencil::new(alpha, steps)?;
    let cells = steps_in_cells(&grid, steps)?;
    let n = grid.nodes_per_dim();
    let d = grid.dim();
    let mut out = GridFunction::zeros(grid.clone());
    let reach: Vec<usize> = alpha
        .entries()
        .iter()
        .zip(cells.iter())
        .map(|(&a, &k)| a * k)
        .collect();
    let values = u.values();
    for i in 0..grid.node_count() {
        let idx = grid.unravel(i);
        if (0..d).any(|k| idx[k] + reach[k] > n - 1) {
            continue;
        }
        let mut acc = 0.0;
        let mut oidx = vec![0usize; d];
        for (o, &c) in stencil.offsets.iter().zip(stencil.coeffs.iter()) {
            for k in 0..d {
                oidx[k] = idx[k] + o[k] * cells[k];
            }
            acc += c * values[grid.ravel(&oidx)];
        }
        out.values_mut()[i] = acc / stencil.norm;
    }
    Ok(out)
}

/// The finite-difference derivative `delta_h^alpha u` on the interior of the
/// grid. Values on the margin band are zero, so plain `L^p` norms of the
/// result are interior norms.
///
/// Fails with `MarginTooSmall` when the stencil footprint
/// (`sum_i alpha_i h_i`) does not fit inside the margin.
pub fn apply_delta_alpha(
    u: &GridFunction,
    alpha: &MultiIndex,
    steps: &[f64],
) -> Result<GridFunction> {
    let grid = u.grid().clone();
    let cells = steps_in_cells(&grid, steps)?;
    let spacing = grid.spacing().expect("checked uniform");
    let needed: f64 = alpha
        .entries()
        .iter()
        .zip(cells.iter().zip(spacing.iter()))
        .map(|(&a, (&k, &sp))| a as f64 * k as f64 * sp)
        .sum();
    if alpha.order() > 0 && needed > grid.margin() * (1.0 + 1e-9) {
        return Err(Error::MarginTooSmall {
            alpha: alpha.clone(),
            needed,
            margin: grid.margin(),
        });
    }
    let mut out = apply_stencil(u, alpha, steps)?;
    for i in 0..grid.node_count() {
        if !grid.is_interior(i) {
            out.values_mut()[i] = 0.0;
        }
    }
    Ok(out)
}

/// Adjoint of `delta_h^alpha` with respect to the weighted inner product on a
/// uniform grid: the same stencil with negated offsets.
pub fn apply_delta_alpha_adjoint(
    u: &GridFunction,
    alpha: &MultiIndex,
    steps: &[f64],
) -> Result<GridFunction> {
    let grid = u.grid().clone();
    let stencil = DifferenceStencil::new(alpha, steps)?;
    let cells = steps_in_cells(&grid, steps)?;
    let n = grid.nodes_per_dim();
    let d = grid.dim();
    let mut out = GridFunction::zeros(grid.clone());
    let reach: Vec<usize> = alpha
        .entries()
        .iter()
        .zip(cells.iter())
        .map(|(&a, &k)| a * k)
        .collect();
    let values = u.values();
    for i in 0..grid.node_count() {
        let idx = grid.unravel(i);
        if (0..d).any(|k| idx[k] < reach[k] || idx[k] > n - 1) {
            continue;
        }
        let mut acc = 0.0;
        let mut oidx = vec![0usize; d];
        for (o, &c) in stencil.offsets.iter().zip(stencil.coeffs.iter()) {
            for k in 0..d {
                oidx[k] = idx[k] - o[k] * cells[k];
            }
            acc += c * values[grid.ravel(&oidx)];
        }
        out.values_mut()[i] = acc / stencil.norm;
    }
    Ok(out)
}

/// `(delta_h^alpha (x) delta_h^beta) k (x, y)`: the finite-difference cross
/// derivative of a kernel, the fallback oracle where analytic derivatives are
/// unavailable.
pub fn fd_cross_derivative_general(
    k: &Kernel,
    alpha: &MultiIndex,
    beta: &MultiIndex,
    steps: &[f64],
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    let sa = DifferenceStencil::new(alpha, steps)?;
    let sb = DifferenceStencil::new(beta, steps)?;
    let mut acc = 0.0;
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    for (oa, &ca) in sa.offsets.iter().zip(sa.coeffs.iter()) {
        for (i, &r) in oa.iter().enumerate() {
            xs[i] = x[i] + r as f64 * steps[i];
        }
        for (ob, &cb) in sb.offsets.iter().zip(sb.coeffs.iter()) {
            for (i, &r) in ob.iter().enumerate() {
                ys[i] = y[i] + r as f64 * steps[i];
            }
            acc += ca * cb * k.eval(&xs, &ys)?;
        }
    }
    Ok(acc / (sa.norm * sb.norm))
}

/// Symmetric finite-difference cross derivative `(delta_h^alpha (x)
/// delta_h^alpha) k (x, y)`.
pub fn fd_cross_derivative(
    k: &Kernel,
    alpha: &MultiIndex,
    steps: &[f64],
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    fd_cross_derivative_general(k, alpha, alpha, steps, x, y)
}

/// One entry of the difference-quotient study: the interior `L^p` norm of
/// `delta_h^alpha u`, which equals `||Delta_h u|| / (|h_1| ... |h_l|)` for
/// the order-`l` composite difference.
#[derive(Clone, Debug, Serialize)]
pub struct SobolevRatio {
    pub h: f64,
    pub alpha: MultiIndex,
    pub ratio: f64,
}

/// Difference-quotient ratios for every `alpha` with `1 <= |alpha| <= m` and
/// every step in `h_sequence` (isotropic steps, whole multiples of the grid
/// spacing). Bounded ratio sequences are consistent with `W^{m,p}`
/// membership; diverging ones are evidence against.
pub fn finite_difference_sobolev_ratio(
    u: &GridFunction,
    m: usize,
    p: f64,
    h_sequence: &[f64],
) -> Result<Vec<SobolevRatio>> {
    let d = u.grid().dim();
    let mut out = Vec::new();
    for alpha in enumerate_multi_indices(d, m) {
        if alpha.order() == 0 {
            continue;
        }
        for &h in h_sequence {
            let steps = vec![h; d];
            let du = apply_delta_alpha(u, &alpha, &steps)?;
            out.push(SobolevRatio {
                h,
                alpha: alpha.clone(),
                ratio: lp_norm_interior(&du, p)?,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// bump battery

/// `exp(-1 / (1 - t^2))` on `(-1, 1)` and its derivatives up to order 3.
fn bump_1d(order: usize, t: f64) -> f64 {
    if t.abs() >= 1.0 - 1e-6 {
        return 0.0;
    }
    let s = 1.0 - t * t;
    let e = (-1.0 / s).exp();
    match order {
        0 => e,
        1 => {
            let g1 = -2.0 * t / (s * s);
            g1 * e
        }
        2 => {
            let g1 = -2.0 * t / (s * s);
            let g2 = (-2.0 - 6.0 * t * t) / (s * s * s);
            (g2 + g1 * g1) * e
        }
        3 => {
            let g1 = -2.0 * t / (s * s);
            let g2 = (-2.0 - 6.0 * t * t) / (s * s * s);
            let g3 = -24.0 * t * (1.0 + t * t) / (s * s * s * s);
            (g3 + 3.0 * g1 * g2 + g1 * g1 * g1) * e
        }
        _ => unreachable!("bump derivatives implemented up to order 3"),
    }
}

/// A compactly supported product bump `prod_i psi((x_i - c_i) / s)`.
#[derive(Clone, Debug)]
pub struct Bump {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl Bump {
    pub fn eval_derivative(&self, alpha: &MultiIndex, x: &[f64]) -> f64 {
        let mut v = 1.0;
        for (i, &a) in alpha.entries().iter().enumerate() {
            let t = (x[i] - self.center[i]) / self.scale;
            v *= bump_1d(a, t) / self.scale.powi(a as i32);
        }
        v
    }
}

/// Battery of scaled/translated bumps: three dyadic scales, per scale a
/// lattice of centers covering the box with supports inside it, truncated at
/// `cap` (hard limit 200) members.
pub fn bump_battery(domain: &BoxDomain, cap: usize) -> Vec<Bump> {
    let cap = cap.min(200);
    let d = domain.dim();
    let s0 = domain.min_edge() / 4.0;
    let mut out = Vec::new();
    'outer: for level in 0..3 {
        let s = s0 / (1 << level) as f64;
        // lattice with step s; support [c - s, c + s] must stay inside
        let counts: Vec<usize> = (0..d)
            .map(|i| ((domain.edge(i) / s).floor() as usize).saturating_sub(1))
            .collect();
        if counts.iter().any(|&c| c == 0) {
            continue;
        }
        let total: usize = counts.iter().product();
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let center: Vec<f64> = (0..d)
                .map(|i| domain.lower[i] + s * (idx[i] as f64 + 1.0))
                .collect();
            out.push(Bump { center, scale: s });
            if out.len() == cap {
                break 'outer;
            }
            for k in (0..d).rev() {
                idx[k] += 1;
                if idx[k] < counts[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
    out
}

/// Result of the bump-battery variational test.
///
/// The battery is a finite stand-in for the full space of smooth test
/// functions, so a bounded maximum is supporting evidence only (it
/// lower-bounds the variational supremum); it is never a proof of membership.
#[derive(Clone, Debug, Serialize)]
pub struct VariationalTest {
    pub alpha: MultiIndex,
    pub p: f64,
    pub n_bumps: usize,
    /// `max_j |int u d^alpha phi_j| / ||phi_j||_q` over the battery.
    pub max_ratio: f64,
    /// Per-scale maxima (coarse to fine), for divergence inspection.
    pub per_scale_max: Vec<f64>,
}

/// Quadrature estimate of `max_j |int u d^alpha phi_j| / ||phi_j||_q` over
/// the bump battery, with `q` conjugate to `p`.
pub fn variational_derivative_test(
    u: &GridFunction,
    alpha: &MultiIndex,
    battery_size: usize,
    p: f64,
) -> Result<VariationalTest> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Config(format!(
            "variational test requires finite p > 1, got {p}"
        )));
    }
    let q = p / (p - 1.0);
    let grid = u.grid();
    let battery = bump_battery(grid.domain(), battery_size);
    if battery.is_empty() {
        return Err(Error::Config("bump battery is empty for this box".into()));
    }
    let mut max_ratio = 0.0f64;
    let mut per_scale: Vec<(f64, f64)> = Vec::new(); // (scale, max)
    for bump in &battery {
        let mut num = 0.0;
        let mut den_q = 0.0;
        for i in 0..grid.node_count() {
            let x = grid.node(i);
            let w = grid.weight(i);
            num += w * u.values()[i] * bump.eval_derivative(alpha, x);
            den_q += w * bump.eval_derivative(&MultiIndex::zero(grid.dim()), x).abs().powf(q);
        }
        let den = den_q.powf(1.0 / q);
        if den < 1e-300 {
            continue;
        }
        let ratio = num.abs() / den;
        max_ratio = max_ratio.max(ratio);
        match per_scale.iter_mut().find(|(s, _)| *s == bump.scale) {
            Some((_, m)) => *m = m.max(ratio),
            None => per_scale.push((bump.scale, ratio)),
        }
    }
    Ok(VariationalTest {
        alpha: alpha.clone(),
        p,
        n_bumps: battery.len(),
        max_ratio,
        per_scale_max: per_scale.into_iter().map(|(_, m)| m).collect(),
    })
}
