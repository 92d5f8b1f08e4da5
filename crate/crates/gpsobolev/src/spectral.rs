//! Nystrom discretization and eigendecomposition of the integral operators
//! attached to a kernel's symmetric cross derivatives, trace computations by
//! the diagonal formula and the spectral sum, differentiated Mercer traces,
//! the Sobolev-imbedding trace, and the `L^p` nuclear-bound checks.

use crate::error::{Error, Result};
use crate::finitediff::{apply_delta_alpha, fd_cross_derivative, Classification};
use crate::grid::{
    enumerate_multi_indices, lp_power_sum_interior, Grid, GridFunction, MultiIndex,
};
use crate::kernels::{Kernel, TOL_PSD};
use crate::sampler::c_p;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Where the cross derivative `d^{a,a} k` comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeSource {
    Analytic,
    /// Forward differences with the given per-dimension steps.
    FiniteDifference { steps: Vec<f64> },
}

impl DerivativeSource {
    /// Finite differences with steps equal to the grid spacing.
    pub fn fd_from_grid(grid: &Grid) -> Result<Self> {
        let steps = grid.spacing().ok_or_else(|| {
            Error::Config("finite-difference source requires a uniform (midpoint) grid".into())
        })?;
        Ok(DerivativeSource::FiniteDifference { steps })
    }

    pub fn label(&self) -> &'static str {
        match self {
            DerivativeSource::Analytic => "analytic",
            DerivativeSource::FiniteDifference { .. } => "finite_difference",
        }
    }
}

/// Integration region for diagonal traces and operator discretizations.
///
/// Finite-difference sources always work on the interior so their stencils
/// never leave the box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceRegion {
    FullBox,
    Interior,
}

fn kernel_entry(
    k: &Kernel,
    alpha: &MultiIndex,
    source: &DerivativeSource,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    match source {
        DerivativeSource::Analytic => k.eval_cross_derivative(alpha, alpha, x, y),
        DerivativeSource::FiniteDifference { steps } => {
            fd_cross_derivative(k, alpha, steps, x, y)
        }
    }
}

fn active_nodes(grid: &Grid, region: TraceRegion) -> Result<Vec<usize>> {
    let nodes: Vec<usize> = match region {
        TraceRegion::FullBox => (0..grid.node_count()).collect(),
        TraceRegion::Interior => (0..grid.node_count())
            .filter(|&i| grid.is_interior(i))
            .collect(),
    };
    if nodes.is_empty() {
        return Err(Error::Config(
            "no interior nodes: margin too wide for this grid".into(),
        ));
    }
    Ok(nodes)
}

fn validate_region(source: &DerivativeSource, region: TraceRegion) -> Result<()> {
    if matches!(source, DerivativeSource::FiniteDifference { .. })
        && region == TraceRegion::FullBox
    {
        return Err(Error::Config(
            "finite-difference sources must integrate over the interior region".into(),
        ));
    }
    Ok(())
}

/// Positivity gate for finite-difference-assembled operators. Their entries
/// carry roundoff amplified by `1/h^(2|alpha|)`, so the analytic 1e-8 gate is
/// unattainable; these matrices are exact covariances in real arithmetic and
/// anything this small is assembly noise.
pub const TOL_PSD_FD: f64 = 1e-4;

fn psd_gate(source: &DerivativeSource) -> f64 {
    match source {
        DerivativeSource::Analytic => TOL_PSD,
        DerivativeSource::FiniteDifference { .. } => TOL_PSD_FD,
    }
}

/// Truncation policy for retained Mercer modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    /// Retain modes until this fraction of the matrix trace is covered.
    pub mass_fraction: f64,
    pub max_modes: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy {
            mass_fraction: 0.9999,
            max_modes: 500,
        }
    }
}

impl TruncationPolicy {
    /// Retain every computed mode.
    pub fn all() -> Self {
        TruncationPolicy {
            mass_fraction: 1.0,
            max_modes: usize::MAX,
        }
    }
}

/// Descending eigenvalues and weight-orthonormal discrete eigenfunctions of a
/// Nystrom-discretized integral operator.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub alpha: MultiIndex,
    pub grid: Arc<Grid>,
    pub region: TraceRegion,
    /// Retained eigenvalues, descending, clipped at zero.
    pub eigenvalues: Vec<f64>,
    /// Matching eigenfunctions, `phi_n(x_i) = v_n[i] / sqrt(w_i)`; zero
    /// outside the active node set.
    pub eigenfunctions: Vec<GridFunction>,
    /// Number of retained modes.
    pub truncation: usize,
    /// Sum of dropped eigenvalues.
    pub discarded_mass: f64,
    /// Sum of all (clipped) eigenvalues = matrix trace up to roundoff.
    pub full_trace: f64,
}

impl SpectralDecomposition {
    pub fn retained_sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

/// Eigendecomposition of the symmetrically weighted Nystrom matrix
/// `M_ij = sqrt(w_i) d^{a,a}k(x_i, x_j) sqrt(w_j)` over the region's nodes.
///
/// Deterministic: sequential eigensolve, descending eigenvalue order, and the
/// sign convention that each eigenvector's first nonzero component is
/// positive.
pub fn nystrom_decompose(
    k: &Kernel,
    alpha: &MultiIndex,
    grid: &Arc<Grid>,
    source: &DerivativeSource,
    region: TraceRegion,
    trunc: TruncationPolicy,
) -> Result<SpectralDecomposition> {
    validate_region(source, region)?;
    let nodes = active_nodes(grid, region)?;
    let n = nodes.len();
    let sqw: Vec<f64> = nodes.iter().map(|&i| grid.weight(i).sqrt()).collect();

    // assemble the lower triangle; entries are symmetric in exact arithmetic
    let mut m = faer::Mat::<f64>::zeros(n, n);
    for a in 0..n {
        let xa = grid.node(nodes[a]);
        for b in 0..=a {
            let xb = grid.node(nodes[b]);
            let v = kernel_entry(k, alpha, source, xa, xb)? * sqw[a] * sqw[b];
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }

    // the eigensolve is a single-threaded contract: bit-identical results
    // whatever the worker pool looks like
    faer::set_global_parallelism(faer::Par::Seq);
    let evd = m
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numeric(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S();
    let u = evd.U();

    // ascending from faer; flip to descending
    let order: Vec<usize> = (0..n).rev().collect();
    let lambda_max = s[order[0]].max(0.0);
    let lambda_min = s[order[n - 1]];
    if lambda_min < -psd_gate(source) * lambda_max.max(1e-300) {
        return Err(Error::NotPositiveDefinite(format!(
            "discrete operator for alpha {alpha:?} has eigenvalue {lambda_min} \
             (largest {lambda_max})"
        )));
    }

    let eigenvalues: Vec<f64> = order.iter().map(|&j| s[j].max(0.0)).collect();
    let full_trace: f64 = eigenvalues.iter().sum();

    // retain modes until the requested trace mass is covered
    let target = trunc.mass_fraction * full_trace;
    let mut retained = 0usize;
    let mut acc = 0.0;
    for &lam in &eigenvalues {
        if (acc >= target && retained > 0) || retained >= trunc.max_modes {
            break;
        }
        if lam <= 0.0 {
            break;
        }
        acc += lam;
        retained += 1;
    }

    let mut funcs = Vec::with_capacity(retained);
    for &j in order.iter().take(retained) {
        let mut col: Vec<f64> = (0..n).map(|i| u[(i, j)]).collect();
        if let Some(first) = col.iter().find(|v| **v != 0.0) {
            if *first < 0.0 {
                for v in col.iter_mut() {
                    *v = -*v;
                }
            }
        }
        let mut values = vec![0.0; grid.node_count()];
        for (iv, &node) in nodes.iter().enumerate() {
            values[node] = col[iv] / sqw[iv];
        }
        funcs.push(GridFunction::new(grid.clone(), values)?);
    }

    let retained_sum: f64 = eigenvalues.iter().take(retained).sum();
    Ok(SpectralDecomposition {
        alpha: alpha.clone(),
        grid: grid.clone(),
        region,
        eigenvalues: eigenvalues[..retained].to_vec(),
        eigenfunctions: funcs,
        truncation: retained,
        discarded_mass: full_trace - retained_sum,
        full_trace,
    })
}

/// Diagonal trace quadrature `sum_i w_i d^{a,a}k(x_i, x_i)` over the region.
pub fn trace_diagonal(
    k: &Kernel,
    alpha: &MultiIndex,
    grid: &Grid,
    source: &DerivativeSource,
    region: TraceRegion,
) -> Result<f64> {
    validate_region(source, region)?;
    let nodes = active_nodes(grid, region)?;
    let mut acc = 0.0;
    for &i in &nodes {
        let x = grid.node(i);
        acc += grid.weight(i) * kernel_entry(k, alpha, source, x, x)?;
    }
    Ok(acc)
}

/// Quadrature of `int sigma_alpha(x)^p dx` over the region, with the diagonal
/// clipped at zero before the root (PSD noise tolerance).
pub fn sigma_power_integral(
    k: &Kernel,
    alpha: &MultiIndex,
    grid: &Grid,
    source: &DerivativeSource,
    region: TraceRegion,
    p: f64,
) -> Result<f64> {
    validate_region(source, region)?;
    let nodes = active_nodes(grid, region)?;
    // two passes: the clip tolerance scales with the diagonal's magnitude
    // over the whole region (finite-difference stencils amplify roundoff by
    // 1/h^(2|alpha|), so a pointwise-relative tolerance is meaningless at
    // nodes where the exact value is zero)
    let mut vals = Vec::with_capacity(nodes.len());
    let mut vmax = 0.0f64;
    for &i in &nodes {
        let x = grid.node(i);
        let v = kernel_entry(k, alpha, source, x, x)?;
        vmax = vmax.max(v.abs());
        vals.push((grid.weight(i), v));
    }
    let tol = psd_gate(source) * vmax.max(1.0);
    let mut acc = 0.0;
    for (idx, (w, v)) in vals.into_iter().enumerate() {
        if v < -tol {
            return Err(Error::NotPositiveDefinite(format!(
                "diagonal value {v} at {:?}, alpha {alpha:?}",
                grid.node(nodes[idx])
            )));
        }
        acc += w * v.max(0.0).powf(0.5 * p);
    }
    Ok(acc)
}

/// Trace/refinement evidence for one multi-index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub alpha: MultiIndex,
    /// Diagonal quadrature at the finest ladder grid.
    pub diagonal_value: f64,
    /// Sum of Nystrom eigenvalues on the same grid (p = 2 route only).
    pub spectral_value: Option<f64>,
    /// Diagonal values at successive ladder grids.
    pub refinement_series: Vec<f64>,
    pub classification: Classification,
}

/// Differentiated Mercer trace: `sum_n lambda_n || delta_h^alpha phi_n ||^2`
/// over the first `p_trunc` modes of an alpha = 0 decomposition, with steps
/// equal to the grid spacing.
///
/// For `alpha = 0` this is the plain eigenvalue sum (orthonormality); for
/// higher orders the eigenfunction differences are taken on the interior.
pub fn differentiated_mercer_trace(
    dec: &SpectralDecomposition,
    alpha: &MultiIndex,
    p_trunc: usize,
) -> Result<f64> {
    if dec.alpha.order() != 0 {
        return Err(Error::Config(
            "differentiated Mercer trace needs an alpha = 0 decomposition".into(),
        ));
    }
    let n = p_trunc.min(dec.truncation);
    if alpha.order() == 0 {
        let mut acc = 0.0;
        for i in 0..n {
            let phi = &dec.eigenfunctions[i];
            let norm_sq: f64 = (0..phi.grid().node_count())
                .map(|j| phi.grid().weight(j) * phi.values()[j] * phi.values()[j])
                .sum();
            acc += dec.eigenvalues[i] * norm_sq;
        }
        return Ok(acc);
    }
    let steps = dec.grid.spacing().ok_or_else(|| {
        Error::Config("differentiated Mercer trace requires a uniform (midpoint) grid".into())
    })?;
    let mut acc = 0.0;
    for i in 0..n {
        let dphi = apply_delta_alpha(&dec.eigenfunctions[i], alpha, &steps)?;
        acc += dec.eigenvalues[i] * lp_power_sum_interior(&dphi, 2.0)?;
    }
    Ok(acc)
}

/// Imbedding trace `sum_{|alpha| <= m} Tr(E_k^alpha)` by diagonal quadrature.
///
/// Per-index failures are annotated with the offending multi-index.
pub fn rkhs_imbedding_trace(
    k: &Kernel,
    m: usize,
    grid: &Grid,
    source: &DerivativeSource,
    region: TraceRegion,
) -> Result<f64> {
    let mut acc = 0.0;
    for alpha in enumerate_multi_indices(k.dim(), m) {
        acc += trace_diagonal(k, &alpha, grid, source, region).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("alpha {alpha:?}: {msg}")),
            other => other,
        })?;
    }
    Ok(acc)
}

/// One inequality check in the nuclear-bound report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuclearCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Computable pieces of the nuclear sandwich around `||sigma||_p^2`.
///
/// The true nuclear norm has no finite algorithm for `p != 2`; the report
/// carries the one-representation upper bound `sum_n lambda_n ||phi_n||_p^2`
/// and an operator-norm lower estimate, and asserts only inequalities implied
/// by them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuclearBoundReport {
    pub p: f64,
    /// `||sigma||_p^2` by diagonal quadrature.
    pub sigma_p_sq: f64,
    /// `sum_n lambda_n ||phi_n||_p^2` over every computed mode (p >= 2), or
    /// `||A||^2 Tr(E_k0)` through the explicit `L^2` factorization (p < 2).
    pub nu_upper: f64,
    /// `max_n lambda_n ||phi_n||_p / ||phi_n||_q <= ||E_k||_{q -> p}`.
    pub opnorm_lower: f64,
    /// `C_p^(-2/p)`.
    pub c_p_factor: f64,
    /// Eigenvalue sum of the alpha = 0 operator (`= Tr` on this grid).
    pub eigenvalue_sum: f64,
    pub checks: Vec<NuclearCheck>,
}

/// Nuclear-bound checks for `GP(0, k)` sample paths in `L^p`, asserted at the
/// level that is literally computable on the grid.
pub fn nuclear_bound_report(k: &Kernel, p: f64, grid: &Arc<Grid>) -> Result<NuclearBoundReport> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Config(format!(
            "nuclear bounds require finite p > 1, got {p}"
        )));
    }
    let q = p / (p - 1.0);
    let alpha0 = MultiIndex::zero(k.dim());
    let dec = nystrom_decompose(
        k,
        &alpha0,
        grid,
        &DerivativeSource::Analytic,
        TraceRegion::FullBox,
        TruncationPolicy::all(),
    )?;

    // ||sigma||_p^2 by diagonal quadrature
    let sigma_p_pow = sigma_power_integral(
        k,
        &alpha0,
        grid,
        &DerivativeSource::Analytic,
        TraceRegion::FullBox,
        p,
    )?;
    let sigma_p_sq = sigma_p_pow.powf(2.0 / p);

    let eigenvalue_sum = dec.retained_sum();
    let cp_factor = c_p(p)?.powf(-2.0 / p);

    // per-mode L^p / L^q norms
    let mut nu_upper_rep = 0.0;
    let mut opnorm_lower = 0.0f64;
    for (lam, phi) in dec.eigenvalues.iter().zip(dec.eigenfunctions.iter()) {
        let mut np = 0.0;
        let mut nq = 0.0;
        for i in 0..grid.node_count() {
            let w = grid.weight(i);
            let v = phi.values()[i].abs();
            np += w * v.powf(p);
            nq += w * v.powf(q);
        }
        let np = np.powf(1.0 / p);
        let nq = nq.powf(1.0 / q);
        nu_upper_rep += lam * np * np;
        if nq > 1e-300 {
            opnorm_lower = opnorm_lower.max(lam * np / nq);
        }
    }

    let slack = 1.0 + 1e-9;
    let mut checks = Vec::new();
    let nu_upper;
    if p >= 2.0 {
        nu_upper = nu_upper_rep;
        checks.push(NuclearCheck {
            name: "sigma_p_sq <= nuclear_upper_bound".into(),
            lhs: sigma_p_sq,
            rhs: nu_upper,
            pass: sigma_p_sq <= nu_upper * slack,
        });
        checks.push(NuclearCheck {
            name: "c_p_factor * opnorm_lower <= sigma_p_sq".into(),
            lhs: cp_factor * opnorm_lower,
            rhs: sigma_p_sq,
            pass: cp_factor * opnorm_lower <= sigma_p_sq * slack,
        });
    } else {
        // explicit factorization through L^2: A f = sigma^(1 - p/2) f,
        // k0 = k * sigma^(p/2 - 1) (x) sigma^(p/2 - 1), Tr(E_k0) = ||sigma||_p^p
        let a_norm_sq = sigma_p_pow.powf((2.0 - p) / p); // ||A||^2 <= ||sigma||_p^(2 - p)
        let trace_k0 = sigma_p_pow; // int sigma^p
        nu_upper = a_norm_sq * trace_k0;
        checks.push(NuclearCheck {
            name: "sigma_p_sq <= c_p_factor * a_norm_sq * trace_k0".into(),
            lhs: sigma_p_sq,
            rhs: cp_factor * nu_upper,
            pass: sigma_p_sq <= cp_factor * nu_upper * slack,
        });
        // operator norm <= nuclear norm <= ||sigma||_p^2 on this side
        checks.push(NuclearCheck {
            name: "opnorm_lower <= sigma_p_sq".into(),
            lhs: opnorm_lower,
            rhs: sigma_p_sq,
            pass: opnorm_lower <= sigma_p_sq * slack,
        });
    }
    if (p - 2.0).abs() < 1e-12 {
        let rel = (sigma_p_sq - eigenvalue_sum).abs() / eigenvalue_sum.abs().max(1e-300);
        checks.push(NuclearCheck {
            name: "sigma_2_sq equals trace (rel 1e-3)".into(),
            lhs: sigma_p_sq,
            rhs: eigenvalue_sum,
            pass: rel <= 1e-3,
        });
    }

    Ok(NuclearBoundReport {
        p,
        sigma_p_sq,
        nu_upper,
        opnorm_lower,
        c_p_factor: cp_factor,
        eigenvalue_sum,
        checks,
    })
}
