//! Karhunen-Loeve path synthesis from a truncated Mercer decomposition, the
//! Gaussian absolute-moment constant `C_p`, and Monte Carlo estimation of
//! Sobolev-norm moments.
//!
//! Noise is counter-based: the standard normal for (seed, path, mode) is a
//! pure function of that triple, so batches are bit-reproducible under any
//! parallel execution split.

use crate::error::{Error, Result};
use crate::finitediff::apply_delta_alpha;
use crate::grid::{enumerate_multi_indices, lp_power_sum_interior, GridFunction};
use crate::spectral::SpectralDecomposition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// `C_p = E|X|^p = 2^(p/2) Gamma((p+1)/2) / sqrt(pi)` for `X ~ N(0, 1)`.
///
/// Even integer `p` reduces to the double factorial `(p-1)!!`, which this
/// evaluates exactly (`C_2 = 1`, `C_4 = 3`); every other `p` goes through
/// log-gamma.
pub fn c_p(p: f64) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Config(format!("c_p requires finite p > 0, got {p}")));
    }
    if p.fract() == 0.0 && (p as u64) % 2 == 0 {
        let mut v = 1.0;
        let mut i = 1.0;
        while i < p {
            v *= i;
            i += 2.0;
        }
        return Ok(v);
    }
    Ok((0.5 * p * std::f64::consts::LN_2
        + statrs::function::gamma::ln_gamma(0.5 * (p + 1.0))
        - 0.5 * std::f64::consts::PI.ln())
    .exp())
}

/// `C_p^(-2/p) / (e / (p - 1))`; tends to 1 as `p` grows.
pub fn c_p_asymptotic_ratio(p: f64) -> Result<f64> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Config(format!(
            "asymptotic ratio requires finite p > 1, got {p}"
        )));
    }
    let ln_cp = 0.5 * p * std::f64::consts::LN_2
        + statrs::function::gamma::ln_gamma(0.5 * (p + 1.0))
        - 0.5 * std::f64::consts::PI.ln();
    let cp_pow = (-2.0 / p * ln_cp).exp();
    Ok(cp_pow / (std::f64::consts::E / (p - 1.0)))
}

/// Domain-separation tag for the noise stream.
const STREAM_TAG: u64 = 0x6770_736f_626f_6c76; // "gpsobolv"

/// The standard normal attached to (seed, path, mode).
pub fn normal_variate(seed: u64, path: u64, mode: u64) -> f64 {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&STREAM_TAG.to_le_bytes());
    key[8..16].copy_from_slice(&seed.to_le_bytes());
    key[16..24].copy_from_slice(&path.to_le_bytes());
    key[24..32].copy_from_slice(&mode.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.sample(StandardNormal)
}

/// A batch of Karhunen-Loeve sample paths `sum_n sqrt(lambda_n) xi_n phi_n`.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub decomposition: Arc<SpectralDecomposition>,
    pub paths: Vec<GridFunction>,
    pub seed: u64,
    pub truncation: usize,
}

/// Synthesizes `n_paths` sample paths from the leading `truncation` modes of
/// an alpha = 0 decomposition. Bit-reproducible given (seed, truncation,
/// grid), independent of the parallel split.
pub fn sample_paths(
    dec: &Arc<SpectralDecomposition>,
    n_paths: usize,
    seed: u64,
    truncation: usize,
) -> Result<PathBatch> {
    if dec.alpha.order() != 0 {
        return Err(Error::Config(
            "path sampling needs an alpha = 0 decomposition".into(),
        ));
    }
    if truncation > dec.truncation {
        return Err(Error::Config(format!(
            "requested truncation {truncation} exceeds the {} retained modes",
            dec.truncation
        )));
    }
    if n_paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    let sqrt_l: Vec<f64> = dec.eigenvalues[..truncation]
        .iter()
        .map(|l| l.sqrt())
        .collect();
    let node_count = dec.grid.node_count();
    let paths: Vec<GridFunction> = (0..n_paths)
        .into_par_iter()
        .map(|j| {
            let mut values = vec![0.0; node_count];
            for (n, sl) in sqrt_l.iter().enumerate() {
                let xi = normal_variate(seed, j as u64, n as u64);
                let c = sl * xi;
                let phi = dec.eigenfunctions[n].values();
                for (v, p) in values.iter_mut().zip(phi.iter()) {
                    *v += c * p;
                }
            }
            GridFunction::new(dec.grid.clone(), values).expect("grid sizes match")
        })
        .collect();
    Ok(PathBatch {
        decomposition: dec.clone(),
        paths,
        seed,
        truncation,
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub p: f64,
    pub m: usize,
}

/// Mean over the batch of `sum_{|alpha| <= m} ||delta_h^alpha U||^p` on the
/// interior region, with steps equal to the grid spacing.
pub fn empirical_sobolev_moment(batch: &PathBatch, m: usize, p: f64) -> Result<MomentEstimate> {
    if batch.paths.len() < 2 {
        return Err(Error::Config(
            "moment estimation needs at least two paths".into(),
        ));
    }
    let grid = &batch.decomposition.grid;
    let d = grid.dim();
    let alphas = enumerate_multi_indices(d, m);
    let steps = if m > 0 {
        Some(grid.spacing().ok_or_else(|| {
            Error::Config("Sobolev moments with m >= 1 require a uniform (midpoint) grid".into())
        })?)
    } else {
        None
    };
    let per_path: Vec<f64> = batch
        .paths
        .par_iter()
        .map(|u| -> Result<f64> {
            let mut acc = 0.0;
            for alpha in &alphas {
                if alpha.order() == 0 {
                    acc += lp_power_sum_interior(u, p)?;
                } else {
                    let du = apply_delta_alpha(u, alpha, steps.as_ref().unwrap())?;
                    acc += lp_power_sum_interior(&du, p)?;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    // fixed accumulation order for bit reproducibility
    let n = per_path.len() as f64;
    let mean = per_path.iter().sum::<f64>() / n;
    let var = per_path.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(MomentEstimate {
        mean,
        std_error: (var / n).sqrt(),
        n_paths: per_path.len(),
        p,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, BoxDomain, Grid, MultiIndex, QuadratureRule};
    use crate::kernels;
    use crate::spectral::{
        nystrom_decompose, DerivativeSource, TraceRegion, TruncationPolicy,
    };
    use approx::assert_abs_diff_eq;

    fn unit_grid(n: usize, margin: f64) -> Arc<Grid> {
        Arc::new(
            build_grid(
                BoxDomain::interval(0.0, 1.0).unwrap(),
                n,
                QuadratureRule::Midpoint,
                margin,
            )
            .unwrap(),
        )
    }

    fn decompose(k: &kernels::Kernel, grid: &Arc<Grid>) -> Arc<SpectralDecomposition> {
        Arc::new(
            nystrom_decompose(
                k,
                &MultiIndex::zero(1),
                grid,
                &DerivativeSource::Analytic,
                TraceRegion::FullBox,
                TruncationPolicy::default(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn c_p_reference_values() {
        assert_eq!(c_p(2.0).unwrap(), 1.0);
        assert_eq!(c_p(4.0).unwrap(), 3.0);
        assert_eq!(c_p(6.0).unwrap(), 15.0);
        assert_abs_diff_eq!(
            c_p(1.0).unwrap(),
            (2.0 / std::f64::consts::PI).sqrt(),
            epsilon = 1e-12
        );
        assert!(c_p(0.0).is_err());
        assert!(c_p(-1.0).is_err());
    }

    #[test]
    fn c_p_matches_quadrature_oracle() {
        // oracle: E|X|^p = 2 int_0^inf x^p phi(x) dx, substituted x = t^2 so
        // the integrand is smooth at the origin for half-integer p, then
        // Gauss-Legendre quadrature
        let g = build_grid(
            BoxDomain::interval(0.0, 12.0f64.sqrt()).unwrap(),
            200,
            QuadratureRule::GaussLegendre,
            0.0,
        )
        .unwrap();
        let norm = 2.0 / (2.0 * std::f64::consts::PI).sqrt();
        for p in [1.0, 1.5, 2.0, 3.0, 4.0] {
            let oracle: f64 = (0..g.node_count())
                .map(|i| {
                    let t = g.node(i)[0];
                    let x = t * t;
                    g.weight(i) * 2.0 * t * x.powf(p) * (-0.5 * x * x).exp()
                })
                .sum::<f64>()
                * norm;
            assert_abs_diff_eq!(c_p(p).unwrap(), oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn c_p_asymptotics() {
        // p = 2: C_2^(-1) / e = 1/e, asymptotics not yet active
        assert_abs_diff_eq!(
            c_p_asymptotic_ratio(2.0).unwrap(),
            1.0 / std::f64::consts::E,
            epsilon = 1e-12
        );
        let r200 = c_p_asymptotic_ratio(200.0).unwrap();
        assert!((r200 - 1.0).abs() < 0.05, "p=200 ratio {r200}");
        let r1000 = c_p_asymptotic_ratio(1000.0).unwrap();
        assert!((r1000 - 1.0).abs() < 0.01, "p=1000 ratio {r1000}");
        assert!(c_p_asymptotic_ratio(1.0).is_err());
    }

    #[test]
    fn zero_modes_give_zero_paths() {
        let g = unit_grid(50, 0.0);
        let k = kernels::zero_kernel(1).unwrap();
        let dec = decompose(&k, &g);
        let batch = sample_paths(&dec, 5, 7, dec.truncation).unwrap();
        for path in &batch.paths {
            assert!(path.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rank_one_paths_and_variance() {
        // k(x, y) = x y: every path is xi * x
        let g = unit_grid(100, 0.0);
        let k = kernels::finite_rank(vec![kernels::Func1d::Poly {
            coeffs: vec![0.0, 1.0],
        }])
        .unwrap();
        let dec = decompose(&k, &g);
        let n_paths = 10_000;
        let batch = sample_paths(&dec, n_paths, 42, dec.truncation).unwrap();
        let last = g.node_count() - 1;
        let x_last = g.node(last)[0];
        // paths are multiples of x: ratio to the node coordinate is constant
        let path = &batch.paths[0];
        let ratio = path.values()[last] / x_last;
        for i in (0..g.node_count()).step_by(17) {
            assert_abs_diff_eq!(path.values()[i], ratio * g.node(i)[0], epsilon = 1e-9);
        }
        // empirical variance at the last node ~ k(x, x) = x^2
        let var: f64 = batch
            .paths
            .iter()
            .map(|u| u.values()[last] * u.values()[last])
            .sum::<f64>()
            / n_paths as f64;
        let target = x_last * x_last;
        let se = target * (2.0 / n_paths as f64).sqrt();
        assert!(
            (var - target).abs() <= 3.0 * se,
            "var {var} vs k(x,x) {target} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn seed_determinism_across_parallelism() {
        let g = unit_grid(80, 0.0);
        let k = kernels::squared_exponential(1, 0.5).unwrap();
        let dec = decompose(&k, &g);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| sample_paths(&dec, 40, 1234, dec.truncation).unwrap())
        };
        let a = run(1);
        let b = run(4);
        for (pa, pb) in a.paths.iter().zip(b.paths.iter()) {
            assert_eq!(pa.values(), pb.values());
        }
        // and across repeated calls
        let c = sample_paths(&dec, 40, 1234, dec.truncation).unwrap();
        for (pa, pc) in a.paths.iter().zip(c.paths.iter()) {
            assert_eq!(pa.values(), pc.values());
        }
    }

    #[test]
    fn moment_identity_m0_squared_exponential() {
        // E ||U||_p^p = C_p * interior length for sigma == 1
        let g = unit_grid(200, 0.05);
        let k = kernels::squared_exponential(1, 1.0).unwrap();
        let dec = decompose(&k, &g);
        let batch = sample_paths(&dec, 4000, 2024, dec.truncation).unwrap();
        for p in [2.0, 4.0] {
            let est = empirical_sobolev_moment(&batch, 0, p).unwrap();
            let target = c_p(p).unwrap() * 0.9;
            let z = (est.mean - target) / est.std_error;
            assert!(
                z.abs() <= 3.0,
                "p={p}: mean {} vs target {target}, z = {z}",
                est.mean
            );
        }
    }

    #[test]
    fn truncation_monotonicity_m0_p2() {
        let g = unit_grid(128, 0.0);
        let dec = decompose(&kernels::brownian(), &g);
        let mut last = 0.0;
        for n in [1usize, 2, 4, 8] {
            let n = n.min(dec.truncation);
            let batch = sample_paths(&dec, 2000, 99, n).unwrap();
            let est = empirical_sobolev_moment(&batch, 0, 2.0).unwrap();
            assert!(
                est.mean >= last - 1e-12,
                "moment decreased at truncation {n}: {} < {last}",
                est.mean
            );
            last = est.mean;
        }
    }

    #[test]
    fn sample_paths_validates_input() {
        let g = unit_grid(50, 0.0);
        let dec = decompose(&kernels::brownian(), &g);
        assert!(sample_paths(&dec, 0, 1, dec.truncation).is_err());
        assert!(sample_paths(&dec, 3, 1, dec.truncation + 1).is_err());
    }
}
