//! Covariance kernels: evaluation of `k(x, y)`, analytic symmetric cross
//! derivatives, and diagonal standard deviations `sigma_alpha`.
//!
//! Radial kernels (squared exponential, Matern) share one derivative engine
//! built on `k(x, y) = F(s)` with `s = |x - y|^2`: partial derivatives of the
//! composite are tensor contractions of `F', F'', ...` against the offset
//! vector, which stays stable on and near the diagonal where the naive
//! `r = |x - y|` chain rule degenerates.

use crate::error::{Error, Result};
use crate::grid::MultiIndex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Relative tolerance below which a slightly negative diagonal value is
/// treated as eigensolver/rounding noise and clipped to zero.
pub const TOL_PSD: f64 = 1e-8;

/// Analytic-order marker for kernels whose closed-form derivatives exist at
/// every order we will ever ask for.
const ORDER_UNBOUNDED: usize = 8;

// ---------------------------------------------------------------------------
// one-dimensional factor functions for finite-rank kernels

/// A 1D function with closed-form derivatives, used as a finite-rank factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Func1d {
    /// `sum_k coeffs[k] x^k`
    Poly { coeffs: Vec<f64> },
    /// `amplitude * sin(omega x + phase)`
    Sin {
        #[serde(default = "one")]
        amplitude: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `max(0, 1 - |x - center|)`; weak derivative only (order 1).
    Hat { center: f64 },
}

fn one() -> f64 {
    1.0
}

impl Func1d {
    /// Highest derivative order available in closed form.
    pub fn max_order(&self) -> usize {
        match self {
            Func1d::Poly { .. } | Func1d::Sin { .. } => ORDER_UNBOUNDED,
            Func1d::Hat { .. } => 1,
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.deriv(0, x)
    }

    /// `order`-th derivative at `x`. For the hat function the first
    /// derivative is the a.e.-defined weak derivative (+-1 on the support,
    /// zero at the kinks and outside).
    pub fn deriv(&self, order: usize, x: f64) -> f64 {
        match self {
            Func1d::Poly { coeffs } => {
                let mut acc = 0.0;
                for (k, &c) in coeffs.iter().enumerate().skip(order) {
                    let mut fall = 1.0;
                    for j in 0..order {
                        fall *= (k - j) as f64;
                    }
                    acc += c * fall * x.powi((k - order) as i32);
                }
                acc
            }
            Func1d::Sin {
                amplitude,
                omega,
                phase,
            } => {
                amplitude
                    * omega.powi(order as i32)
                    * (omega * x + phase + order as f64 * std::f64::consts::FRAC_PI_2).sin()
            }
            Func1d::Hat { center } => {
                let t = x - center;
                match order {
                    0 => (1.0 - t.abs()).max(0.0),
                    1 => {
                        if t.abs() > 0.0 && t.abs() < 1.0 {
                            -t.signum()
                        } else {
                            0.0
                        }
                    }
                    _ => 0.0, // unreachable behind the analytic-order gate
                }
            }
        }
    }
}

/// A finite-rank factor together with its amplitude (`f = scale * func`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledFunc {
    pub scale: f64,
    pub func: Func1d,
}

// ---------------------------------------------------------------------------
// radial profiles

/// Isotropic profile `k(x, y) = f(|x - y|)`, with derivative data expressed
/// through `F(s) = f(sqrt(s))`, `s = r^2`.
#[derive(Clone, Debug, PartialEq)]
pub enum RadialProfile {
    /// `exp(-r^2 / (2 l^2))`
    Gaussian { lengthscale: f64 },
    /// `exp(-r / l)` (Matern nu = 1/2); no classical diagonal derivatives.
    Exponential { lengthscale: f64 },
    /// `(1 + a r) exp(-a r)`, `a = sqrt(3) / l` (Matern nu = 3/2).
    Matern32 { lengthscale: f64 },
    /// `(1 + a r + a^2 r^2 / 3) exp(-a r)`, `a = sqrt(5) / l` (Matern nu = 5/2).
    Matern52 { lengthscale: f64 },
}

/// Threshold below which offsets are treated as exactly diagonal.
const DIAG_EPS: f64 = 1e-9;

impl RadialProfile {
    fn value(&self, r: f64) -> f64 {
        match self {
            RadialProfile::Gaussian { lengthscale } => {
                (-0.5 * (r / lengthscale).powi(2)).exp()
            }
            RadialProfile::Exponential { lengthscale } => (-r / lengthscale).exp(),
            RadialProfile::Matern32 { lengthscale } => {
                let t = 3.0f64.sqrt() * r / lengthscale;
                (1.0 + t) * (-t).exp()
            }
            RadialProfile::Matern52 { lengthscale } => {
                let t = 5.0f64.sqrt() * r / lengthscale;
                (1.0 + t + t * t / 3.0) * (-t).exp()
            }
        }
    }

    /// `F^(m)(s)` at `s = r^2` for `m = 1..=4`, simplified so that no
    /// cancellation occurs near `r = 0`. Orders beyond the profile's
    /// smoothness are never requested (gated by the kernel's analytic order).
    fn fs(&self, m: usize, r: f64) -> f64 {
        match self {
            RadialProfile::Gaussian { lengthscale } => {
                let c = 0.5 / (lengthscale * lengthscale);
                (-c).powi(m as i32) * (-c * r * r).exp()
            }
            RadialProfile::Matern32 { lengthscale } => {
                let a = 3.0f64.sqrt() / lengthscale;
                let e = (-a * r).exp();
                match m {
                    1 => -0.5 * a * a * e,
                    2 => 0.25 * a.powi(3) / r * e,
                    _ => unreachable!("matern-3/2 supports cross derivatives up to order 2"),
                }
            }
            RadialProfile::Matern52 { lengthscale } => {
                let a = 5.0f64.sqrt() / lengthscale;
                let e = (-a * r).exp();
                match m {
                    1 => -(a * a / 6.0) * (1.0 + a * r) * e,
                    2 => a.powi(4) / 12.0 * e,
                    3 => -a.powi(5) / (24.0 * r) * e,
                    4 => a.powi(5) * (1.0 + a * r) / (48.0 * r.powi(3)) * e,
                    _ => unreachable!("matern-5/2 supports cross derivatives up to order 4"),
                }
            }
            RadialProfile::Exponential { .. } => {
                unreachable!("exponential kernel declares no analytic derivatives")
            }
        }
    }

    /// `F'(0)` and `F''(0)` (diagonal Taylor data).
    fn fs_at_zero(&self, m: usize) -> f64 {
        match self {
            RadialProfile::Gaussian { lengthscale } => {
                let c = 0.5 / (lengthscale * lengthscale);
                (-c).powi(m as i32)
            }
            RadialProfile::Matern32 { lengthscale } => {
                let a = 3.0f64.sqrt() / lengthscale;
                match m {
                    1 => -0.5 * a * a,
                    _ => unreachable!(),
                }
            }
            RadialProfile::Matern52 { lengthscale } => {
                let a = 5.0f64.sqrt() / lengthscale;
                match m {
                    1 => -a * a / 6.0,
                    2 => a.powi(4) / 12.0,
                    _ => unreachable!(),
                }
            }
            RadialProfile::Exponential { .. } => unreachable!(),
        }
    }

    /// Partial derivative `d^gamma [f(|z|)]` at offset `z`, `|gamma| <= 4`.
    fn partial(&self, gamma: &MultiIndex, z: &[f64]) -> f64 {
        // expand gamma into its index multiset, e.g. (2,1) -> [0,0,1]
        let mut idx = Vec::with_capacity(gamma.order());
        for (i, &g) in gamma.entries().iter().enumerate() {
            for _ in 0..g {
                idx.push(i);
            }
        }
        let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = match self {
            RadialProfile::Gaussian { lengthscale }
            | RadialProfile::Exponential { lengthscale }
            | RadialProfile::Matern32 { lengthscale }
            | RadialProfile::Matern52 { lengthscale } => *lengthscale,
        };
        let on_diag = r < DIAG_EPS * scale.max(1.0);
        let d = |i: usize, j: usize| -> f64 {
            if i == j {
                1.0
            } else {
                0.0
            }
        };
        match idx.len() {
            0 => {
                if on_diag {
                    1.0
                } else {
                    self.value(r)
                }
            }
            1 => {
                if on_diag {
                    0.0
                } else {
                    2.0 * self.fs(1, r) * z[idx[0]]
                }
            }
            2 => {
                let (i, j) = (idx[0], idx[1]);
                if on_diag {
                    2.0 * self.fs_at_zero(1) * d(i, j)
                } else {
                    4.0 * self.fs(2, r) * z[i] * z[j] + 2.0 * self.fs(1, r) * d(i, j)
                }
            }
            3 => {
                let (i, j, k) = (idx[0], idx[1], idx[2]);
                if on_diag {
                    0.0
                } else {
                    8.0 * self.fs(3, r) * z[i] * z[j] * z[k]
                        + 4.0
                            * self.fs(2, r)
                            * (d(i, j) * z[k] + d(i, k) * z[j] + d(j, k) * z[i])
                }
            }
            4 => {
                let (i, j, k, l) = (idx[0], idx[1], idx[2], idx[3]);
                let dd = d(i, j) * d(k, l) + d(i, k) * d(j, l) + d(i, l) * d(j, k);
                if on_diag {
                    4.0 * self.fs_at_zero(2) * dd
                } else {
                    16.0 * self.fs(4, r) * z[i] * z[j] * z[k] * z[l]
                        + 8.0
                            * self.fs(3, r)
                            * (d(i, j) * z[k] * z[l]
                                + d(i, k) * z[j] * z[l]
                                + d(i, l) * z[j] * z[k]
                                + d(j, k) * z[i] * z[l]
                                + d(j, l) * z[i] * z[k]
                                + d(k, l) * z[i] * z[j])
                        + 4.0 * self.fs(2, r) * dd
                }
            }
            n => unreachable!("radial cross derivatives capped at total order 4, got {n}"),
        }
    }
}

// ---------------------------------------------------------------------------
// the kernel type

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Radial(RadialProfile),
    /// `min(x, y)` on `[0, 1]`.
    Brownian,
    /// `sum_i f_i(x) f_i(y)` over scaled 1D factors.
    SumOfProducts(Vec<ScaledFunc>),
    Zero,
}

/// A covariance function descriptor with evaluators for `k` and its symmetric
/// cross derivatives up to the declared analytic order.
#[derive(Clone, Debug)]
pub struct Kernel {
    name: String,
    dim: usize,
    params: BTreeMap<String, f64>,
    analytic_order: usize,
    kind: Kind,
    /// Upper bound on the weight mass omitted from a truncated hat series;
    /// zero for every other kernel.
    tail_weight_sum: f64,
}

impl Kernel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    /// Maximum `|alpha|` for which closed-form cross derivatives exist.
    pub fn analytic_order(&self) -> usize {
        self.analytic_order
    }

    pub fn tail_weight_sum(&self) -> f64 {
        self.tail_weight_sum
    }

    /// Finite-rank factors, if this kernel is a sum of products.
    pub fn factors(&self) -> Option<&[ScaledFunc]> {
        match &self.kind {
            Kind::SumOfProducts(fs) => Some(fs),
            _ => None,
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Config(format!(
                "point dimension {} does not match kernel dimension {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite point {x:?}")));
        }
        if matches!(self.kind, Kind::Brownian) {
            let t = x[0];
            if !(-1e-12..=1.0 + 1e-12).contains(&t) {
                return Err(Error::Domain(format!(
                    "brownian kernel is defined on [0, 1], got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Kernel evaluation `k(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(match &self.kind {
            Kind::Radial(p) => {
                let r = x
                    .iter()
                    .zip(y.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                p.value(r)
            }
            Kind::Brownian => x[0].min(y[0]),
            // grouping keeps k(x, y) bit-identical to k(y, x)
            Kind::SumOfProducts(fs) => fs
                .iter()
                .map(|f| (f.scale * f.func.value(x[0])) * (f.scale * f.func.value(y[0])))
                .sum(),
            Kind::Zero => 0.0,
        })
    }

    /// Cross derivative `d^alpha_x d^beta_y k(x, y)` in closed form.
    pub fn eval_cross_derivative(
        &self,
        alpha: &MultiIndex,
        beta: &MultiIndex,
        x: &[f64],
        y: &[f64],
    ) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        if alpha.dim() != self.dim || beta.dim() != self.dim {
            return Err(Error::Config(format!(
                "multi-index dimension mismatch: kernel is {}-dimensional, got {:?} / {:?}",
                self.dim, alpha, beta
            )));
        }
        let requested = alpha.order().max(beta.order());
        if requested > self.analytic_order {
            return Err(Error::UnsupportedDerivative {
                kernel: self.name.clone(),
                requested,
                available: self.analytic_order,
            });
        }
        if alpha.order() == 0 && beta.order() == 0 {
            return self.eval(x, y);
        }
        Ok(match &self.kind {
            Kind::Zero => 0.0,
            Kind::Radial(p) => {
                // d^a_x d^b_y f(|x - y|) = (-1)^|b| d^(a+b) [f(|z|)] at z = x - y
                let gamma = alpha.add(beta);
                let z: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
                let sign = if beta.order() % 2 == 0 { 1.0 } else { -1.0 };
                sign * p.partial(&gamma, &z)
            }
            Kind::SumOfProducts(fs) => {
                let a = alpha.entries()[0];
                let b = beta.entries()[0];
                fs.iter()
                    .map(|f| (f.scale * f.func.deriv(a, x[0])) * (f.scale * f.func.deriv(b, y[0])))
                    .sum()
            }
            Kind::Brownian => unreachable!("brownian analytic order is 0"),
        })
    }

    /// Diagonal standard deviation `sigma_alpha(x) = (d^{a,a} k(x, x))^(1/2)`.
    pub fn sigma_alpha(&self, alpha: &MultiIndex, x: &[f64]) -> Result<f64> {
        let v = self.eval_cross_derivative(alpha, alpha, x, x)?;
        let tol = TOL_PSD * (1.0 + v.abs());
        if v < -tol {
            return Err(Error::NotPositiveDefinite(format!(
                "diagonal value {v} of kernel '{}' at {x:?}, alpha {alpha:?}",
                self.name
            )));
        }
        Ok(v.max(0.0).sqrt())
    }
}

// ---------------------------------------------------------------------------
// constructors

fn require_positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn check_dim(d: usize) -> Result<usize> {
    if (1..=crate::grid::MAX_DIM).contains(&d) {
        Ok(d)
    } else {
        Err(Error::Config(format!(
            "kernel dimension must lie in 1..={}, got {d}",
            crate::grid::MAX_DIM
        )))
    }
}

/// `exp(-|x - y|^2 / (2 l^2))` in dimension `d`.
pub fn squared_exponential(d: usize, lengthscale: f64) -> Result<Kernel> {
    let d = check_dim(d)?;
    let l = require_positive("lengthscale", lengthscale)?;
    Ok(Kernel {
        name: "squared_exponential".into(),
        dim: d,
        params: BTreeMap::from([("lengthscale".into(), l)]),
        analytic_order: 2,
        kind: Kind::Radial(RadialProfile::Gaussian { lengthscale: l }),
        tail_weight_sum: 0.0,
    })
}

/// Matern kernel with half-integer smoothness `nu in {1/2, 3/2, 5/2}`.
///
/// Analytic cross-derivative availability is `floor(nu)`: 0, 1 and 2
/// respectively. The `nu = 1/2` (exponential) kernel has no classical
/// diagonal derivative and is probed through finite differences only.
pub fn matern(nu: f64, lengthscale: f64, d: usize) -> Result<Kernel> {
    let d = check_dim(d)?;
    let l = require_positive("lengthscale", lengthscale)?;
    let (profile, order) = if (nu - 0.5).abs() < 1e-12 {
        (RadialProfile::Exponential { lengthscale: l }, 0)
    } else if (nu - 1.5).abs() < 1e-12 {
        (RadialProfile::Matern32 { lengthscale: l }, 1)
    } else if (nu - 2.5).abs() < 1e-12 {
        (RadialProfile::Matern52 { lengthscale: l }, 2)
    } else {
        return Err(Error::Config(format!(
            "matern nu must be one of 0.5, 1.5, 2.5, got {nu}"
        )));
    };
    Ok(Kernel {
        name: "matern".into(),
        dim: d,
        params: BTreeMap::from([("nu".into(), nu), ("lengthscale".into(), l)]),
        analytic_order: order,
        kind: Kind::Radial(profile),
        tail_weight_sum: 0.0,
    })
}

/// Brownian-motion kernel `min(x, y)` on `(0, 1)`.
pub fn brownian() -> Kernel {
    Kernel {
        name: "brownian".into(),
        dim: 1,
        params: BTreeMap::new(),
        analytic_order: 0,
        kind: Kind::Brownian,
        tail_weight_sum: 0.0,
    }
}

/// `k(x, y) = sum_i f_i(x) f_i(y)` over 1D factors with closed-form
/// derivatives.
pub fn finite_rank(functions: Vec<Func1d>) -> Result<Kernel> {
    if functions.is_empty() {
        return Err(Error::Config("finite_rank needs at least one function".into()));
    }
    let order = functions.iter().map(Func1d::max_order).min().unwrap();
    let n = functions.len();
    let factors = functions
        .into_iter()
        .map(|func| ScaledFunc { scale: 1.0, func })
        .collect();
    Ok(Kernel {
        name: "finite_rank".into(),
        dim: 1,
        params: BTreeMap::from([("rank".into(), n as f64)]),
        analytic_order: order,
        kind: Kind::SumOfProducts(factors),
        tail_weight_sum: 0.0,
    })
}

/// Truncated hat series `k(x, y) = sum_n w_n h_{c_n}(x) h_{c_n}(y)` with
/// `h_a(x) = max(0, 1 - |x - a|)`.
///
/// `tail_weight_sum` is an upper bound on the weight mass left out by the
/// truncation; the identity reports propagate it as a trace tail bound.
pub fn hat_series(centers: &[f64], weights: &[f64], tail_weight_sum: f64) -> Result<Kernel> {
    if centers.is_empty() || centers.len() != weights.len() {
        return Err(Error::Config(format!(
            "hat_series needs matching non-empty centers/weights, got {} and {}",
            centers.len(),
            weights.len()
        )));
    }
    if !(tail_weight_sum >= 0.0) {
        return Err(Error::Config(format!(
            "tail_weight_sum must be non-negative, got {tail_weight_sum}"
        )));
    }
    let mut factors = Vec::with_capacity(centers.len());
    for (&c, &w) in centers.iter().zip(weights.iter()) {
        require_positive("hat weight", w)?;
        factors.push(ScaledFunc {
            scale: w.sqrt(),
            func: Func1d::Hat { center: c },
        });
    }
    let n = centers.len();
    Ok(Kernel {
        name: "hat_series".into(),
        dim: 1,
        params: BTreeMap::from([
            ("n_centers".into(), n as f64),
            ("tail_weight_sum".into(), tail_weight_sum),
        ]),
        analytic_order: 1,
        kind: Kind::SumOfProducts(factors),
        tail_weight_sum,
    })
}

/// The first `count` dyadic rationals in `[-3, 3]`, enumerated level by level
/// (integers, then odd halves, then odd quarters, ...), within a level by
/// increasing absolute value with the positive sign first.
pub fn dyadic_rationals(count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    let mut level = 0u32;
    while out.len() < count {
        let denom = (1u64 << level) as f64;
        let max_num = (3.0 * denom) as i64;
        let mut level_vals: Vec<f64> = Vec::new();
        for num in 0..=max_num {
            if level > 0 && num % 2 == 0 {
                continue; // already produced at a coarser level
            }
            level_vals.push(num as f64 / denom);
            if num > 0 {
                level_vals.push(-(num as f64) / denom);
            }
        }
        for v in level_vals {
            if out.len() == count {
                break;
            }
            out.push(v);
        }
        level += 1;
        assert!(level < 32, "dyadic enumeration ran away");
    }
    out
}

/// Canonical truncated hat series: `count` dyadic centers with weights
/// `2^-n` and the geometric tail bound `2^(1 - count)`.
pub fn hat_series_dyadic(count: usize) -> Result<Kernel> {
    if count == 0 {
        return Err(Error::Config("hat_series_dyadic needs count >= 1".into()));
    }
    let centers = dyadic_rationals(count);
    let weights: Vec<f64> = (0..count).map(|n| 0.5f64.powi(n as i32)).collect();
    let tail = 0.5f64.powi(count as i32 - 1);
    hat_series(&centers, &weights, tail)
}

/// The identically-zero kernel (useful as a degenerate fixture).
pub fn zero_kernel(d: usize) -> Result<Kernel> {
    let d = check_dim(d)?;
    Ok(Kernel {
        name: "zero".into(),
        dim: d,
        params: BTreeMap::new(),
        analytic_order: ORDER_UNBOUNDED,
        kind: Kind::Zero,
        tail_weight_sum: 0.0,
    })
}

// ---------------------------------------------------------------------------
// declarative kernel specification (CLI-facing)

/// Declarative kernel description parseable from the CLI config file.
///
/// Schema: `{"name": string, "params": {string: number}, "dimension": int,
/// "functions": [{"type": "hat"|"poly"|"sin", ...}]}`. Resolves to exactly
/// one [`Kernel`] or fails with a configuration error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub functions: Vec<FuncSpec>,
}

fn default_dimension() -> usize {
    1
}

/// One factor in a `finite_rank` or `hat_series` spec. `weight` scales the
/// kernel contribution (the factor itself is scaled by its square root).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuncSpec {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
    #[serde(default = "one")]
    pub weight: f64,
}

impl FuncSpec {
    fn reject_inapplicable(&self, allowed: &[&str]) -> Result<()> {
        let present: [(&str, bool); 5] = [
            ("coeffs", self.coeffs.is_some()),
            ("amplitude", self.amplitude.is_some()),
            ("omega", self.omega.is_some()),
            ("phase", self.phase.is_some()),
            ("center", self.center.is_some()),
        ];
        for (name, set) in present {
            if set && !allowed.contains(&name) {
                return Err(Error::Config(format!(
                    "field '{name}' does not apply to function type '{}'",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Converts the declarative entry into a concrete factor.
    pub fn to_func(&self) -> Result<Func1d> {
        match self.kind.as_str() {
            "poly" => {
                self.reject_inapplicable(&["coeffs"])?;
                let coeffs = self.coeffs.clone().ok_or_else(|| {
                    Error::Config("poly function requires 'coeffs'".into())
                })?;
                Ok(Func1d::Poly { coeffs })
            }
            "sin" => {
                self.reject_inapplicable(&["amplitude", "omega", "phase"])?;
                let omega = self
                    .omega
                    .ok_or_else(|| Error::Config("sin function requires 'omega'".into()))?;
                Ok(Func1d::Sin {
                    amplitude: self.amplitude.unwrap_or(1.0),
                    omega,
                    phase: self.phase.unwrap_or(0.0),
                })
            }
            "hat" => {
                self.reject_inapplicable(&["center"])?;
                let center = self
                    .center
                    .ok_or_else(|| Error::Config("hat function requires 'center'".into()))?;
                Ok(Func1d::Hat { center })
            }
            other => Err(Error::Config(format!(
                "unknown function type '{other}' (expected hat, poly or sin)"
            ))),
        }
    }
}

impl KernelSpec {
    fn expect_params(&self, allowed: &[&str]) -> Result<()> {
        for key in self.params.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown parameter '{key}' for kernel '{}' (allowed: {allowed:?})",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn required(&self, key: &str) -> Result<f64> {
        self.params.get(key).copied().ok_or_else(|| {
            Error::Config(format!("kernel '{}' requires parameter '{key}'", self.name))
        })
    }

    fn no_functions(&self) -> Result<()> {
        if self.functions.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "kernel '{}' does not accept a functions list",
                self.name
            )))
        }
    }

    /// Resolves the description into a concrete kernel.
    pub fn resolve(&self) -> Result<Kernel> {
        match self.name.as_str() {
            "squared_exponential" => {
                self.expect_params(&["lengthscale"])?;
                self.no_functions()?;
                squared_exponential(self.dimension, self.required("lengthscale")?)
            }
            "matern" => {
                self.expect_params(&["nu", "lengthscale"])?;
                self.no_functions()?;
                matern(self.required("nu")?, self.required("lengthscale")?, self.dimension)
            }
            "brownian" => {
                self.expect_params(&[])?;
                self.no_functions()?;
                if self.dimension != 1 {
                    return Err(Error::Config("brownian kernel is one-dimensional".into()));
                }
                Ok(brownian())
            }
            "finite_rank" => {
                self.expect_params(&[])?;
                if self.dimension != 1 {
                    return Err(Error::Config("finite_rank kernels are one-dimensional".into()));
                }
                if self.functions.is_empty() {
                    return Err(Error::Config(
                        "finite_rank requires a non-empty functions list".into(),
                    ));
                }
                let funcs = self
                    .functions
                    .iter()
                    .map(FuncSpec::to_func)
                    .collect::<Result<Vec<_>>>()?;
                let mut k = finite_rank(funcs)?;
                // fold per-function weights into the factor scales
                if let Kind::SumOfProducts(factors) = &mut k.kind {
                    for (factor, spec) in factors.iter_mut().zip(self.functions.iter()) {
                        require_positive("function weight", spec.weight)?;
                        factor.scale = spec.weight.sqrt();
                    }
                }
                Ok(k)
            }
            "hat_series" => {
                self.expect_params(&["dyadic_count", "tail_weight_sum"])?;
                if self.dimension != 1 {
                    return Err(Error::Config("hat_series kernels are one-dimensional".into()));
                }
                if let Some(&count) = self.params.get("dyadic_count") {
                    self.no_functions()?;
                    if count.fract() != 0.0 || count < 1.0 {
                        return Err(Error::Config(format!(
                            "dyadic_count must be a positive integer, got {count}"
                        )));
                    }
                    return hat_series_dyadic(count as usize);
                }
                if self.functions.is_empty() {
                    return Err(Error::Config(
                        "hat_series requires either dyadic_count or a functions list".into(),
                    ));
                }
                let mut centers = Vec::new();
                let mut weights = Vec::new();
                for f in &self.functions {
                    match f.to_func()? {
                        Func1d::Hat { center } => {
                            centers.push(center);
                            weights.push(f.weight);
                        }
                        other => {
                            return Err(Error::Config(format!(
                                "hat_series accepts hat functions only, got {other:?}"
                            )))
                        }
                    }
                }
                let tail = self.params.get("tail_weight_sum").copied().unwrap_or(0.0);
                hat_series(&centers, &weights, tail)
            }
            "zero" => {
                self.expect_params(&[])?;
                self.no_functions()?;
                zero_kernel(self.dimension)
            }
            other => Err(Error::Config(format!(
                "unknown kernel name '{other}' (expected one of squared_exponential, matern, \
                 brownian, finite_rank, hat_series, zero)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mi(entries: &[usize]) -> MultiIndex {
        MultiIndex::new(entries.to_vec())
    }

    #[test]
    fn eval_examples() {
        let b = brownian();
        assert_eq!(b.eval(&[0.3], &[0.7]).unwrap(), 0.3);
        let se = squared_exponential(1, 1.0).unwrap();
        assert_eq!(se.eval(&[0.4], &[0.4]).unwrap(), 1.0);
        let hat = finite_rank(vec![Func1d::Hat { center: 0.0 }]).unwrap();
        assert_eq!(hat.eval(&[0.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(hat.eval(&[0.5], &[-0.5]).unwrap(), 0.25);
    }

    #[test]
    fn eval_symmetry() {
        let kernels = vec![
            squared_exponential(2, 0.8).unwrap(),
            matern(1.5, 1.3, 2).unwrap(),
            matern(0.5, 1.0, 1).unwrap(),
            hat_series_dyadic(5).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in kernels {
            for _ in 0..20 {
                let x: Vec<f64> = (0..k.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..k.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                assert_eq!(k.eval(&x, &y).unwrap(), k.eval(&y, &x).unwrap());
            }
        }
    }

    #[test]
    fn brownian_domain_error() {
        let b = brownian();
        assert!(matches!(b.eval(&[1.2], &[0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_derivative_examples() {
        // squared exponential, alpha = beta = (1), x = y -> 1 / l^2
        for l in [0.5, 1.0, 2.0] {
            let se = squared_exponential(1, l).unwrap();
            let v = se
                .eval_cross_derivative(&mi(&[1]), &mi(&[1]), &[0.3], &[0.3])
                .unwrap();
            assert_abs_diff_eq!(v, 1.0 / (l * l), epsilon = 1e-14);
            // alpha = beta = (2) -> 3 / l^4
            let v = se
                .eval_cross_derivative(&mi(&[2]), &mi(&[2]), &[0.3], &[0.3])
                .unwrap();
            assert_abs_diff_eq!(v, 3.0 / l.powi(4), epsilon = 1e-12);
        }
        // zeroth derivative reduces to eval
        let k = matern(2.5, 0.9, 1).unwrap();
        let v = k
            .eval_cross_derivative(&mi(&[0]), &mi(&[0]), &[0.2], &[0.6])
            .unwrap();
        assert_eq!(v, k.eval(&[0.2], &[0.6]).unwrap());
    }

    #[test]
    fn cross_derivative_swap_symmetry() {
        // symmetric under swapping (alpha, x) <-> (beta, y)
        let kernels = vec![
            squared_exponential(2, 0.9).unwrap(),
            matern(2.5, 1.1, 2).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in kernels {
            for _ in 0..10 {
                let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let a = mi(&[1, 0]);
                let b = mi(&[0, 1]);
                let v1 = k.eval_cross_derivative(&a, &b, &x, &y).unwrap();
                let v2 = k.eval_cross_derivative(&b, &a, &y, &x).unwrap();
                assert_abs_diff_eq!(v1, v2, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sigma_alpha_examples() {
        let se = squared_exponential(1, 1.0).unwrap();
        assert_abs_diff_eq!(se.sigma_alpha(&mi(&[0]), &[0.7]).unwrap(), 1.0, epsilon = 1e-14);
        let se2 = squared_exponential(1, 2.0).unwrap();
        assert_abs_diff_eq!(se2.sigma_alpha(&mi(&[1]), &[0.4]).unwrap(), 0.5, epsilon = 1e-14);
        let b = brownian();
        assert_abs_diff_eq!(b.sigma_alpha(&mi(&[0]), &[0.25]).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn matern_diagonals() {
        for nu in [0.5, 1.5, 2.5] {
            let k = matern(nu, 1.7, 1).unwrap();
            assert_abs_diff_eq!(k.eval(&[0.3], &[0.3]).unwrap(), 1.0, epsilon = 1e-14);
        }
        // matern-3/2 derivative variance 3 / l^2, matern-5/2: 5 / (3 l^2)
        let l = 1.3;
        let k = matern(1.5, l, 1).unwrap();
        let v = k
            .eval_cross_derivative(&mi(&[1]), &mi(&[1]), &[0.2], &[0.2])
            .unwrap();
        assert_abs_diff_eq!(v, 3.0 / (l * l), epsilon = 1e-12);
        let k = matern(2.5, l, 1).unwrap();
        let v = k
            .eval_cross_derivative(&mi(&[1]), &mi(&[1]), &[0.2], &[0.2])
            .unwrap();
        assert_abs_diff_eq!(v, 5.0 / (3.0 * l * l), epsilon = 1e-12);
        let v = k
            .eval_cross_derivative(&mi(&[2]), &mi(&[2]), &[0.2], &[0.2])
            .unwrap();
        assert_abs_diff_eq!(v, 25.0 / l.powi(4), epsilon = 1e-10);
    }

    #[test]
    fn unsupported_derivative_errors() {
        let b = brownian();
        assert!(matches!(
            b.eval_cross_derivative(&mi(&[1]), &mi(&[1]), &[0.5], &[0.5]),
            Err(Error::UnsupportedDerivative { .. })
        ));
        let m = matern(1.5, 1.0, 1).unwrap();
        assert!(m
            .eval_cross_derivative(&mi(&[2]), &mi(&[2]), &[0.5], &[0.5])
            .is_err());
        let se = squared_exponential(1, 1.0).unwrap();
        assert!(se
            .eval_cross_derivative(&mi(&[3]), &mi(&[3]), &[0.5], &[0.5])
            .is_err());
    }

    #[test]
    fn finite_rank_rank_one_product() {
        let k = finite_rank(vec![Func1d::Poly { coeffs: vec![0.0, 1.0] }]).unwrap();
        assert_abs_diff_eq!(k.eval(&[0.3], &[0.5]).unwrap(), 0.15, epsilon = 1e-15);
    }

    #[test]
    fn finite_rank_derivative_identity_exact() {
        // d^{a,a} k(x, y) = sum_i f_i^(a)(x) f_i^(a)(y), bit-exact
        let funcs = vec![
            Func1d::Poly { coeffs: vec![0.0, 1.0, 2.0] },
            Func1d::Sin { amplitude: 0.7, omega: 2.0, phase: 0.3 },
        ];
        let k = finite_rank(funcs.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = rng.gen_range(-1.0..1.0);
            let y = rng.gen_range(-1.0..1.0);
            for a in 0..=2usize {
                let direct: f64 = funcs.iter().map(|f| f.deriv(a, x) * f.deriv(a, y)).sum();
                let via = k
                    .eval_cross_derivative(&mi(&[a]), &mi(&[a]), &[x], &[y])
                    .unwrap();
                assert_eq!(direct, via);
            }
        }
    }

    #[test]
    fn hat_function_values() {
        let h = Func1d::Hat { center: 0.0 };
        assert_eq!(h.value(0.0), 1.0);
        assert_eq!(h.value(0.5), 0.5);
        assert_eq!(h.value(1.5), 0.0);
        assert_eq!(h.deriv(1, -0.5), 1.0);
        assert_eq!(h.deriv(1, 0.5), -1.0);
        assert_eq!(h.deriv(1, 2.0), 0.0);
    }

    #[test]
    fn dyadic_enumeration_is_canonical() {
        let c = dyadic_rationals(20);
        assert_eq!(c.len(), 20);
        assert_eq!(&c[..7], &[0.0, 1.0, -1.0, 2.0, -2.0, 3.0, -3.0]);
        assert_eq!(&c[7..13], &[0.5, -0.5, 1.5, -1.5, 2.5, -2.5]);
        assert_eq!(&c[13..], &[0.25, -0.25, 0.75, -0.75, 1.25, -1.25, 1.75]);
        // all supports [c-1, c+1] stay inside (-4, 4)
        assert!(c.iter().all(|v| v.abs() <= 3.0));
        // no duplicates
        let mut sorted = c.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
    }

    #[test]
    fn kernel_spec_resolution() {
        let spec: KernelSpec = serde_json::from_str(
            r#"{"name": "squared_exponential", "params": {"lengthscale": 2.0}, "dimension": 2}"#,
        )
        .unwrap();
        let k = spec.resolve().unwrap();
        assert_eq!(k.name(), "squared_exponential");
        assert_eq!(k.dim(), 2);
        assert_eq!(k.analytic_order(), 2);

        let spec: KernelSpec = serde_json::from_str(
            r#"{"name": "finite_rank", "functions": [
                {"type": "poly", "coeffs": [0.0, 1.0]},
                {"type": "sin", "omega": 3.141592653589793}
            ]}"#,
        )
        .unwrap();
        let k = spec.resolve().unwrap();
        assert_eq!(k.factors().unwrap().len(), 2);

        let spec: KernelSpec = serde_json::from_str(
            r#"{"name": "hat_series", "params": {"dyadic_count": 20}}"#,
        )
        .unwrap();
        let k = spec.resolve().unwrap();
        assert_eq!(k.params()["n_centers"], 20.0);
        assert_abs_diff_eq!(k.tail_weight_sum(), 0.5f64.powi(19), epsilon = 0.0);
    }

    #[test]
    fn kernel_spec_rejects_bad_input() {
        // unknown kernel
        let spec: KernelSpec = serde_json::from_str(r#"{"name": "laplacian"}"#).unwrap();
        assert!(spec.resolve().is_err());
        // unknown parameter key
        let spec: KernelSpec = serde_json::from_str(
            r#"{"name": "squared_exponential", "params": {"lengthscale": 1.0, "scale": 2.0}}"#,
        )
        .unwrap();
        assert!(spec.resolve().is_err());
        // unknown top-level key rejected at parse time
        assert!(serde_json::from_str::<KernelSpec>(r#"{"name": "zero", "colour": 3}"#).is_err());
        // invalid matern nu
        let spec: KernelSpec = serde_json::from_str(
            r#"{"name": "matern", "params": {"nu": 2.0, "lengthscale": 1.0}}"#,
        )
        .unwrap();
        assert!(spec.resolve().is_err());
    }

    #[test]
    fn psd_property_battery() {
        // Gram matrices on random node sets stay PSD up to eigensolver noise
        let kernels: Vec<Kernel> = vec![
            squared_exponential(1, 1.0).unwrap(),
            squared_exponential(2, 0.6).unwrap(),
            matern(0.5, 1.0, 1).unwrap(),
            matern(1.5, 0.8, 1).unwrap(),
            matern(2.5, 1.2, 1).unwrap(),
            brownian(),
            finite_rank(vec![
                Func1d::Poly { coeffs: vec![0.0, 1.0] },
                Func1d::Sin { amplitude: 1.0, omega: std::f64::consts::PI, phase: 0.0 },
            ])
            .unwrap(),
            hat_series_dyadic(6).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for k in &kernels {
            for trial in 0..50 {
                let n = 2 + (trial % 19);
                let pts: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        (0..k.dim())
                            .map(|_| {
                                if k.name() == "brownian" {
                                    rng.gen_range(0.0..1.0)
                                } else {
                                    rng.gen_range(-1.5..1.5)
                                }
                            })
                            .collect()
                    })
                    .collect();
                let gram = faer::Mat::from_fn(n, n, |i, j| k.eval(&pts[i], &pts[j]).unwrap());
                let evd = gram
                    .self_adjoint_eigen(faer::Side::Lower)
                    .expect("eigensolve");
                let s = evd.S();
                let max = (0..n).map(|i| s[i]).fold(f64::NEG_INFINITY, f64::max);
                let min = (0..n).map(|i| s[i]).fold(f64::INFINITY, f64::min);
                assert!(
                    min >= -TOL_PSD * max.max(1e-300),
                    "{}: min eig {min} vs max {max}",
                    k.name()
                );
            }
        }
    }
}
