//! Box domains, tensor-product quadrature grids, grid functions and
//! multi-index arithmetic.
//!
//! Everything here is immutable after construction; the other modules treat a
//! [`Grid`] as a shared read-only substrate.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Hard cap on total node count (`n^d`); keeps tensor grids desk-sized.
pub const MAX_NODES: usize = 1 << 22;

/// Maximum supported dimension.
pub const MAX_DIM: usize = 3;

/// A derivative multi-index `alpha = (alpha_1, ..., alpha_d)`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn new(entries: Vec<usize>) -> Self {
        MultiIndex(entries)
    }

    /// Zero multi-index in dimension `d`.
    pub fn zero(d: usize) -> Self {
        MultiIndex(vec![0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Total order `|alpha|`.
    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    /// Entrywise sum of two multi-indices of equal dimension.
    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        assert_eq!(self.dim(), other.dim());
        MultiIndex(
            self.0
                .iter()
                .zip(other.0.iter())
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}

impl std::fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// All multi-indices with `|alpha| <= m` in dimension `d`, in lexicographic
/// order. The output is deterministic; the count is `C(d + m, m)`.
pub fn enumerate_multi_indices(d: usize, m: usize) -> Vec<MultiIndex> {
    assert!(d >= 1, "dimension must be at least 1");
    let mut out = Vec::new();
    let mut current = vec![0usize; d];
    loop {
        if current.iter().sum::<usize>() <= m {
            out.push(MultiIndex(current.clone()));
        }
        // lexicographic odometer over [0, m]^d
        let mut k = d;
        loop {
            if k == 0 {
                out.sort();
                return out;
            }
            k -= 1;
            if current[k] < m {
                current[k] += 1;
                for v in current.iter_mut().skip(k + 1) {
                    *v = 0;
                }
                break;
            }
        }
    }
}

/// An axis-aligned box domain in dimension `d <= 3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Config(format!(
                "box bounds must be non-empty and of equal length, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.len() > MAX_DIM {
            return Err(Error::Config(format!(
                "dimension {} exceeds the supported maximum {}",
                lower.len(),
                MAX_DIM
            )));
        }
        for (i, (lo, up)) in lower.iter().zip(upper.iter()).enumerate() {
            if !lo.is_finite() || !up.is_finite() || lo >= up {
                return Err(Error::Config(format!(
                    "box edge {i} invalid: lower {lo} must be < upper {up}"
                )));
            }
        }
        Ok(BoxDomain { lower, upper })
    }

    /// 1D convenience constructor.
    pub fn interval(lo: f64, up: f64) -> Result<Self> {
        BoxDomain::new(vec![lo], vec![up])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn min_edge(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.edge(i))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.edge(i)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(xi, (lo, up))| xi > lo && xi < up)
    }
}

/// Per-dimension quadrature rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    /// Composite midpoint rule; uniform spacing, the default for kernels with
    /// limited diagonal smoothness.
    Midpoint,
    /// Gauss-Legendre rule; exact for per-dimension polynomials up to degree
    /// `2n - 1`. Nodes are non-uniform, so finite differences of grid
    /// functions are not available on these grids.
    GaussLegendre,
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration on the
/// Legendre recurrence.
fn gauss_legendre_reference(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess for the i-th root (descending order).
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence: p0 = 1, p1 = x.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[m - 1] = 0.0;
    }
    // ascending order
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// Per-dimension node/weight set.
#[derive(Clone, Debug)]
struct Axis {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Uniform spacing; `None` for non-uniform rules.
    spacing: Option<f64>,
}

fn build_axis(lo: f64, up: f64, n: usize, rule: QuadratureRule) -> Axis {
    let edge = up - lo;
    match rule {
        QuadratureRule::Midpoint => {
            let h = edge / n as f64;
            let nodes = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
            let weights = vec![h; n];
            Axis {
                nodes,
                weights,
                spacing: Some(h),
            }
        }
        QuadratureRule::GaussLegendre => {
            let (xs, ws) = gauss_legendre_reference(n);
            let nodes = xs.iter().map(|x| lo + 0.5 * edge * (x + 1.0)).collect();
            let weights = ws.iter().map(|w| 0.5 * edge * w).collect();
            Axis {
                nodes,
                weights,
                spacing: None,
            }
        }
    }
}

/// Tensor-product quadrature grid on a box, with an interior margin reserved
/// for finite-difference stencils.
#[derive(Clone, Debug)]
pub struct Grid {
    domain: BoxDomain,
    nodes_per_dim: usize,
    rule: QuadratureRule,
    margin: f64,
    axes: Vec<Axis>,
    /// Flattened node coordinates, row-major (`d` entries per node).
    coords: Vec<f64>,
    /// Tensor-product weight per node.
    weights: Vec<f64>,
    /// True for nodes at distance >= margin from every box face.
    interior: Vec<bool>,
}

/// Builds a tensor-product grid with `n` nodes per dimension.
///
/// `margin` is the width of the boundary band excluded from finite-difference
/// evaluations; it must be shorter than half the smallest box edge.
pub fn build_grid(domain: BoxDomain, n: usize, rule: QuadratureRule, margin: f64) -> Result<Grid> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 nodes per dim, got {n}")));
    }
    if !(margin >= 0.0) || margin >= 0.5 * domain.min_edge() {
        return Err(Error::Config(format!(
            "margin {margin} must lie in [0, half the smallest box edge = {})",
            0.5 * domain.min_edge()
        )));
    }
    let d = domain.dim();
    let total = n.checked_pow(d as u32).filter(|&t| t <= MAX_NODES);
    let total = total.ok_or_else(|| {
        Err::<usize, _>(Error::Config(format!(
            "grid with {n}^{d} nodes exceeds the cap of {MAX_NODES}"
        )))
        .unwrap_err()
    })?;

    let axes: Vec<Axis> = (0..d)
        .map(|i| build_axis(domain.lower[i], domain.upper[i], n, rule))
        .collect();

    let mut coords = Vec::with_capacity(total * d);
    let mut weights = Vec::with_capacity(total);
    let mut interior = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    let eps = 1e-12 * domain.min_edge();
    for _ in 0..total {
        let mut w = 1.0;
        let mut inside = true;
        for (k, &i) in idx.iter().enumerate() {
            let x = axes[k].nodes[i];
            coords.push(x);
            w *= axes[k].weights[i];
            if x - domain.lower[k] < margin - eps || domain.upper[k] - x < margin - eps {
                inside = false;
            }
        }
        weights.push(w);
        interior.push(inside);
        // row-major odometer: last dimension fastest
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
        }
    }

    Ok(Grid {
        domain,
        nodes_per_dim: n,
        rule,
        margin,
        axes,
        coords,
        weights,
        interior,
    })
}

impl Grid {
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes_per_dim
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn node_count(&self) -> usize {
        self.weights.len()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// True iff node `i` lies at distance >= margin from every box face.
    pub fn is_interior(&self, i: usize) -> bool {
        self.interior[i]
    }

    pub fn interior_mask(&self) -> &[bool] {
        &self.interior
    }

    /// Quadrature measure of the interior (margin-excluded) region.
    pub fn interior_volume(&self) -> f64 {
        self.weights
            .iter()
            .zip(self.interior.iter())
            .filter(|(_, &m)| m)
            .map(|(w, _)| w)
            .sum()
    }

    /// Uniform spacing per dimension; `None` for non-uniform rules.
    pub fn spacing(&self) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        for ax in &self.axes {
            out.push(ax.spacing?);
        }
        Some(out)
    }

    /// Largest per-dimension spacing (midpoint grids).
    pub fn max_spacing(&self) -> Option<f64> {
        self.spacing()
            .map(|s| s.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Converts a flat node index to per-dimension indices.
    pub fn unravel(&self, mut i: usize) -> Vec<usize> {
        let d = self.dim();
        let n = self.nodes_per_dim;
        let mut out = vec![0usize; d];
        for k in (0..d).rev() {
            out[k] = i % n;
            i /= n;
        }
        out
    }

    /// Converts per-dimension indices to a flat node index.
    pub fn ravel(&self, idx: &[usize]) -> usize {
        let n = self.nodes_per_dim;
        idx.iter().fold(0usize, |acc, &i| acc * n + i)
    }
}

/// Real values attached to the nodes of a grid.
#[derive(Clone, Debug)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::Config(format!(
                "value count {} does not match grid node count {}",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(GridFunction { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.node_count();
        GridFunction {
            grid,
            values: vec![0.0; n],
        }
    }

    /// Samples a function at the grid nodes.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.node_count()).map(|i| f(grid.node(i))).collect();
        GridFunction { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Discrete `L^p` norm `(sum_i w_i |u_i|^p)^(1/p)` over the whole grid.
pub fn lp_norm(u: &GridFunction, p: f64) -> Result<f64> {
    lp_norm_filtered(u, p, |_| true)
}

/// Discrete `L^p` norm restricted to the interior (margin-excluded) nodes.
pub fn lp_norm_interior(u: &GridFunction, p: f64) -> Result<f64> {
    let grid = u.grid().clone();
    lp_norm_filtered(u, p, |i| grid.is_interior(i))
}

fn lp_norm_filtered(u: &GridFunction, p: f64, keep: impl Fn(usize) -> bool) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::Config(format!("lp_norm requires finite p >= 1, got {p}")));
    }
    let g = u.grid();
    let mut acc = 0.0;
    for (i, v) in u.values().iter().enumerate() {
        if keep(i) {
            acc += g.weight(i) * v.abs().powf(p);
        }
    }
    Ok(acc.powf(1.0 / p))
}

/// `sum_i w_i |u_i|^p` over interior nodes (the norm before the `1/p` root).
pub fn lp_power_sum_interior(u: &GridFunction, p: f64) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::Config(format!("requires finite p >= 1, got {p}")));
    }
    let g = u.grid();
    let mut acc = 0.0;
    for (i, v) in u.values().iter().enumerate() {
        if g.is_interior(i) {
            acc += g.weight(i) * v.abs().powf(p);
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_interval_grid(n: usize, rule: QuadratureRule) -> Arc<Grid> {
        Arc::new(build_grid(BoxDomain::interval(0.0, 1.0).unwrap(), n, rule, 0.0).unwrap())
    }

    #[test]
    fn midpoint_unit_interval_n4() {
        let g = unit_interval_grid(4, QuadratureRule::Midpoint);
        let nodes: Vec<f64> = (0..4).map(|i| g.node(i)[0]).collect();
        assert_eq!(nodes, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(g.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn weights_sum_to_volume() {
        for rule in [QuadratureRule::Midpoint, QuadratureRule::GaussLegendre] {
            let g = unit_interval_grid(17, rule);
            assert_abs_diff_eq!(g.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-13);
        }
        let b = BoxDomain::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap();
        let g = build_grid(b, 10, QuadratureRule::Midpoint, 0.0).unwrap();
        assert_abs_diff_eq!(g.weights().iter().sum::<f64>(), 6.0, epsilon = 1e-12);
        assert_eq!(g.node_count(), 100);
    }

    #[test]
    fn gauss_legendre_polynomial_exactness() {
        // degree 2n-1 exact: n = 4 integrates x^7 on [0,1] exactly (= 1/8)
        let g = unit_interval_grid(4, QuadratureRule::GaussLegendre);
        let approx: f64 = (0..g.node_count())
            .map(|i| g.weight(i) * g.node(i)[0].powi(7))
            .sum();
        assert_abs_diff_eq!(approx, 0.125, epsilon = 1e-14);
    }

    #[test]
    fn gauss_legendre_known_nodes_n3() {
        let (x, w) = gauss_legendre_reference(3);
        assert_abs_diff_eq!(x[0], -0.7745966692414834, epsilon = 1e-13);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(w[0], 0.5555555555555556, epsilon = 1e-13);
        assert_abs_diff_eq!(w[1], 0.8888888888888888, epsilon = 1e-13);
    }

    #[test]
    fn nodes_strictly_inside_box() {
        for rule in [QuadratureRule::Midpoint, QuadratureRule::GaussLegendre] {
            let g = unit_interval_grid(64, rule);
            for i in 0..g.node_count() {
                let x = g.node(i)[0];
                assert!(x > 0.0 && x < 1.0);
            }
        }
    }

    #[test]
    fn lp_norm_examples() {
        // u == 1 -> 1 for any p
        let g = unit_interval_grid(50, QuadratureRule::Midpoint);
        let u = GridFunction::from_fn(g.clone(), |_| 1.0);
        for p in [1.0, 1.5, 2.0, 4.0] {
            assert_abs_diff_eq!(lp_norm(&u, p).unwrap(), 1.0, epsilon = 1e-13);
        }
        // u(x) = x, p = 2, Gauss-Legendre n=200 -> sqrt(1/3)
        let g = unit_interval_grid(200, QuadratureRule::GaussLegendre);
        let u = GridFunction::from_fn(g, |x| x[0]);
        assert_abs_diff_eq!(
            lp_norm(&u, 2.0).unwrap(),
            (1.0f64 / 3.0).sqrt(),
            epsilon = 1e-12
        );
        // zero function
        let g = unit_interval_grid(8, QuadratureRule::Midpoint);
        let z = GridFunction::zeros(g);
        assert_eq!(lp_norm(&z, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn lp_norm_rejects_bad_p() {
        let g = unit_interval_grid(8, QuadratureRule::Midpoint);
        let u = GridFunction::zeros(g);
        assert!(lp_norm(&u, 0.5).is_err());
        assert!(lp_norm(&u, f64::INFINITY).is_err());
    }

    #[test]
    fn midpoint_quadrature_error_decays() {
        // |e_n| ~ n^-2 on a smooth integrand; errors must decay monotonically
        let exact = 1.0 - 1.0f64.cos(); // int_0^1 sin
        let mut errs = Vec::new();
        for n in [8, 16, 32, 64] {
            let g = unit_interval_grid(n, QuadratureRule::Midpoint);
            let approx: f64 = (0..g.node_count())
                .map(|i| g.weight(i) * g.node(i)[0].sin())
                .sum();
            errs.push((approx - exact).abs());
        }
        for w in errs.windows(2) {
            assert!(w[1] < w[0] * 0.3, "expected ~4x decay, got {:?}", errs);
        }
    }

    #[test]
    fn multi_index_enumeration() {
        let e = enumerate_multi_indices(1, 2);
        assert_eq!(e, vec![MultiIndex(vec![0]), MultiIndex(vec![1]), MultiIndex(vec![2])]);
        let e = enumerate_multi_indices(2, 1);
        assert_eq!(
            e,
            vec![
                MultiIndex(vec![0, 0]),
                MultiIndex(vec![0, 1]),
                MultiIndex(vec![1, 0])
            ]
        );
        assert_eq!(enumerate_multi_indices(2, 2).len(), 6); // C(4, 2)
        assert_eq!(enumerate_multi_indices(3, 2).len(), 10); // C(5, 2)

        // stability across calls
        assert_eq!(enumerate_multi_indices(3, 3), enumerate_multi_indices(3, 3));
    }

    #[test]
    fn interior_mask_and_volume() {
        let b = BoxDomain::interval(0.0, 1.0).unwrap();
        let g = build_grid(b, 200, QuadratureRule::Midpoint, 0.05).unwrap();
        assert_abs_diff_eq!(g.interior_volume(), 0.9, epsilon = 1e-12);
        assert!(!g.is_interior(0));
        assert!(g.is_interior(100));
    }

    #[test]
    fn grid_config_errors() {
        let b = BoxDomain::interval(0.0, 1.0).unwrap();
        assert!(build_grid(b.clone(), 1, QuadratureRule::Midpoint, 0.0).is_err());
        assert!(build_grid(b.clone(), 8, QuadratureRule::Midpoint, 0.6).is_err());
        assert!(BoxDomain::interval(1.0, 1.0).is_err());
        assert!(BoxDomain::new(vec![0.0; 4], vec![1.0; 4]).is_err());
    }

    #[test]
    fn ravel_unravel_roundtrip() {
        let b = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g = build_grid(b, 7, QuadratureRule::Midpoint, 0.0).unwrap();
        for i in [0, 1, 6, 7, 13, 48] {
            assert_eq!(g.ravel(&g.unravel(i)), i);
        }
        // row-major: last dimension fastest
        assert_eq!(g.unravel(1), vec![0, 1]);
        assert_eq!(g.unravel(7), vec![1, 0]);
    }
}
