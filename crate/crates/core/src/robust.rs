//! Orthogonalized Gnanadesikan–Kettenring (OGK) robust location and scatter,
//! and robust-distance outlier flagging.
//!
//! Construction, per orthogonalization round:
//!
//! 1. robust scale `s_j` of every column (MAD by default), `Y = X·diag(s)⁻¹`;
//! 2. pairwise Gnanadesikan–Kettenring covariances
//!    `u_jk = ¼[s(Y_j + Y_k)² − s(Y_j − Y_k)²]` with unit diagonal;
//! 3. eigenvectors `E` of that matrix; the data moves to `Z = Y·E` and the
//!    round contributes `A = diag(s)·E` to the back-transformation.
//!
//! After the last round the coordinates of `Z` get a robust location `ν`
//! (median) and variances `Γ = diag(s(Z_j)²)`; with `A = A₁⋯A_r` the raw
//! estimate is `μ = Aν`, `Σ = AΓAᵀ`. An optional hard-rejection step then
//! rescales distances by `median(d²)/χ²_p(0.5)`, keeps rows with
//! standardized `d² ≤ χ²_p(0.975)` and recomputes the classical mean and
//! covariance on them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::corpus::SongMeta;
use crate::error::{Error, Result};
use crate::linalg::{median, top_eigenvectors};

pub const MAD_CONSISTENCY: f64 = 1.4826;
pub const REWEIGHT_QUANTILE: f64 = 0.975;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleEstimator {
    #[default]
    Mad,
    Qn,
}

impl ScaleEstimator {
    pub fn scale(self, values: &[f64]) -> f64 {
        match self {
            ScaleEstimator::Mad => mad(values),
            ScaleEstimator::Qn => qn(values),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OgkConfig {
    pub scale_estimator: ScaleEstimator,
    pub orthogonalization_rounds: usize,
    pub reweight: bool,
    pub cutoff_quantile: f64,
}

impl Default for OgkConfig {
    fn default() -> Self {
        Self {
            scale_estimator: ScaleEstimator::Mad,
            orthogonalization_rounds: 2,
            reweight: true,
            cutoff_quantile: 0.975,
        }
    }
}

/// Gaussian-consistent median absolute deviation.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    MAD_CONSISTENCY * median(&dev)
}

/// Rousseeuw–Croux Qn: the `C(h, 2)`-th smallest pairwise distance with
/// `h = ⌊n/2⌋ + 1`, scaled by 2.2219 and the small-sample factor `d_n`.
pub fn qn(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut diffs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            diffs.push((values[i] - values[j]).abs());
        }
    }
    let h = n / 2 + 1;
    let rank = h * (h - 1) / 2;
    diffs.sort_by(f64::total_cmp);
    let dn = match n {
        2 => 0.399,
        3 => 0.994,
        4 => 0.512,
        5 => 0.844,
        6 => 0.611,
        7 => 0.857,
        8 => 0.669,
        9 => 0.872,
        _ if n % 2 == 1 => n as f64 / (n as f64 + 1.4),
        _ => n as f64 / (n as f64 + 3.8),
    };
    2.2219 * dn * diffs[rank - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustCovariance {
    pub location: Vec<f64>,
    pub scatter: DMatrix<f64>,
    /// Mahalanobis distance of every row under (`location`, `scatter`).
    pub distances: Vec<f64>,
    pub raw_location: Vec<f64>,
    pub raw_scatter: DMatrix<f64>,
    /// Rows retained by the reweighting step, when it ran.
    pub inliers: Option<Vec<bool>>,
}

impl RobustCovariance {
    pub fn dim(&self) -> usize {
        self.location.len()
    }
}

fn column(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

pub fn chi2_quantile(dof: usize, q: f64) -> Result<f64> {
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(dist.inverse_cdf(q))
}

/// OGK estimate of location and scatter for the rows of `scores`.
pub fn ogk_estimate(scores: &DMatrix<f64>, config: &OgkConfig) -> Result<RobustCovariance> {
    let (n, p) = (scores.nrows(), scores.ncols());
    if p == 0 {
        return Err(Error::InvalidArgument("no columns".into()));
    }
    if n <= p {
        return Err(Error::TooFewRows { n, k: p });
    }
    if config.orthogonalization_rounds == 0 {
        return Err(Error::InvalidArgument("orthogonalization_rounds must be at least 1".into()));
    }
    if !(config.cutoff_quantile > 0.0 && config.cutoff_quantile < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cutoff quantile {} outside (0, 1)",
            config.cutoff_quantile
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let est = config.scale_estimator;
    let mut x = scores.clone();
    let mut back = DMatrix::<f64>::identity(p, p);
    for _ in 0..config.orthogonalization_rounds {
        let scales: Vec<f64> = (0..p).map(|j| est.scale(&column(&x, j))).collect();
        // After the first round `column` indexes rotated coordinates.
        if let Some(column) = scales.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::ConstantColumn { column });
        }
        let y = DMatrix::from_fn(n, p, |i, j| x[(i, j)] / scales[j]);
        let mut u = DMatrix::<f64>::identity(p, p);
        for j in 0..p {
            for k in j + 1..p {
                let sum: Vec<f64> = (0..n).map(|i| y[(i, j)] + y[(i, k)]).collect();
                let diff: Vec<f64> = (0..n).map(|i| y[(i, j)] - y[(i, k)]).collect();
                let c = 0.25 * (est.scale(&sum).powi(2) - est.scale(&diff).powi(2));
                u[(j, k)] = c;
                u[(k, j)] = c;
            }
        }
        let (e, _) = top_eigenvectors(&u, p);
        back = back * DMatrix::from_diagonal(&DVector::from_vec(scales)) * &e;
        x = y * e;
    }
    let nu: Vec<f64> = (0..p).map(|j| median(&column(&x, j))).collect();
    let gamma: Vec<f64> = (0..p).map(|j| est.scale(&column(&x, j)).powi(2)).collect();
    let raw_location: Vec<f64> = (&back * DVector::from_vec(nu)).iter().copied().collect();
    let raw_scatter = symmetrize(&back * DMatrix::from_diagonal(&DVector::from_vec(gamma)) * back.transpose());
    let raw_d2 = squared_mahalanobis(scores, &raw_location, &raw_scatter)?;

    if !config.reweight {
        return Ok(RobustCovariance {
            location: raw_location.clone(),
            scatter: raw_scatter.clone(),
            distances: raw_d2.iter().map(|d| d.sqrt()).collect(),
            raw_location,
            raw_scatter,
            inliers: None,
        });
    }

    let correction = median(&raw_d2) / chi2_quantile(p, 0.5)?;
    let limit = chi2_quantile(p, REWEIGHT_QUANTILE)?;
    let inliers: Vec<bool> = raw_d2.iter().map(|d| d / correction <= limit).collect();
    let kept: Vec<usize> = (0..n).filter(|&i| inliers[i]).collect();
    if kept.len() <= p {
        // Too few rows survive to estimate a covariance; keep the raw fit.
        return Ok(RobustCovariance {
            location: raw_location.clone(),
            scatter: raw_scatter.clone(),
            distances: raw_d2.iter().map(|d| d.sqrt()).collect(),
            raw_location,
            raw_scatter,
            inliers: None,
        });
    }
    let (location, scatter) = classical_estimate(&scores.select_rows(&kept));
    let d2 = squared_mahalanobis(scores, &location, &scatter)?;
    Ok(RobustCovariance {
        location,
        scatter,
        distances: d2.iter().map(|d| d.sqrt()).collect(),
        raw_location,
        raw_scatter,
        inliers: Some(inliers),
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Sample mean and unbiased sample covariance.
pub fn classical_estimate(rows: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, p) = (rows.nrows(), rows.ncols());
    let mean: Vec<f64> = (0..p).map(|j| rows.column(j).sum() / n as f64).collect();
    let centred = DMatrix::from_fn(n, p, |i, j| rows[(i, j)] - mean[j]);
    let cov = symmetrize(centred.tr_mul(&centred) / (n as f64 - 1.0));
    (mean, cov)
}

/// Squared Mahalanobis distances of every row.
pub fn squared_mahalanobis(rows: &DMatrix<f64>, location: &[f64], scatter: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = scatter
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Linalg("scatter matrix is not positive definite".into()))?;
    Ok((0..rows.nrows())
        .map(|i| {
            let diff = DVector::from_fn(rows.ncols(), |j, _| rows[(i, j)] - location[j]);
            let z = chol.l().solve_lower_triangular(&diff).expect("cholesky factor is invertible");
            z.norm_squared()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedRow {
    pub row: usize,
    pub title: String,
    pub author: String,
    pub album: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub cutoff_quantile: f64,
    /// Flag when squared distance exceeds this χ²_k quantile.
    pub chi2_cutoff: f64,
    pub flagged: Vec<FlaggedRow>,
}

impl OutlierReport {
    pub fn rows(&self) -> Vec<usize> {
        self.flagged.iter().map(|f| f.row).collect()
    }
}

/// Rows whose squared robust distance exceeds `χ²_k(cutoff_quantile)`.
/// `meta`, when given, labels the flagged rows.
pub fn flag_outliers(rc: &RobustCovariance, config: &OgkConfig, meta: Option<&[SongMeta]>) -> Result<OutlierReport> {
    let chi2_cutoff = chi2_quantile(rc.dim(), config.cutoff_quantile)?;
    let flagged = rc
        .distances
        .iter()
        .enumerate()
        .filter(|(_, d)| d.powi(2) > chi2_cutoff)
        .map(|(row, &distance)| {
            let m = meta.and_then(|m| m.get(row));
            FlaggedRow {
                row,
                title: m.map(|m| m.title.clone()).unwrap_or_default(),
                author: m.map(|m| m.author.to_string()).unwrap_or_default(),
                album: m.map(|m| m.album.clone()).unwrap_or_default(),
                distance,
            }
        })
        .collect();
    Ok(OutlierReport {
        cutoff_quantile: config.cutoff_quantile,
        chi2_cutoff,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::exec::rng(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn max_abs_dev_from_identity(m: &DMatrix<f64>) -> f64 {
        (m - DMatrix::identity(m.nrows(), m.ncols())).amax()
    }

    #[test]
    fn one_dimensional_case_is_median_and_mad() {
        let v = [1.0, 2.0, 4.0, 7.0, 11.0, 50.0];
        let scores = DMatrix::from_column_slice(6, 1, &v);
        let config = OgkConfig {
            reweight: false,
            ..OgkConfig::default()
        };
        let rc = ogk_estimate(&scores, &config).unwrap();
        // median 5.5; |dev| = 4.5 3.5 1.5 1.5 5.5 44.5 → median 4.0.
        assert!((rc.location[0] - 5.5).abs() < 1e-12);
        assert!((rc.scatter[(0, 0)] - (1.4826f64 * 4.0).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn clean_gaussian_is_close_to_truth() {
        let x = gaussian(500, 2, 31);
        let rc = ogk_estimate(&x, &OgkConfig::default()).unwrap();
        assert!(rc.location.iter().all(|v| v.abs() < 0.15));
        assert!(max_abs_dev_from_identity(&rc.scatter) < 0.25);
        let (mean, cov) = classical_estimate(&x);
        assert!(mean.iter().all(|v| v.abs() < 0.15));
        assert!(max_abs_dev_from_identity(&cov) < 0.25);
    }

    #[test]
    fn contamination_hurts_classical_more() {
        let mut x = gaussian(500, 2, 32);
        for i in 0..50 {
            x[(i, 0)] = 20.0 * (0.3f64).cos();
            x[(i, 1)] = 20.0 * (0.3f64).sin();
        }
        let rc = ogk_estimate(&x, &OgkConfig::default()).unwrap();
        let (_, cov) = classical_estimate(&x);
        assert!(max_abs_dev_from_identity(&rc.scatter) < max_abs_dev_from_identity(&cov));
        let report = flag_outliers(&rc, &OgkConfig::default(), None).unwrap();
        for i in 0..50 {
            assert!(report.rows().contains(&i));
        }
    }

    #[test]
    fn single_distant_row_is_the_only_flag() {
        // Near-identical rows on a tiny lattice (exactly identical rows have
        // zero MAD).
        let mut x = DMatrix::from_fn(54, 3, |i, j| 1e-3 * ((i % 27 / 3usize.pow(j as u32)) % 3) as f64 - 1e-3);
        x[(17, 0)] = 5.0;
        x[(17, 2)] = -4.0;
        let rc = ogk_estimate(&x, &OgkConfig::default()).unwrap();
        let report = flag_outliers(&rc, &OgkConfig::default(), None).unwrap();
        assert_eq!(report.rows(), vec![17]);
    }

    #[test]
    fn clean_data_flags_few() {
        let x = gaussian(200, 5, 77);
        let rc = ogk_estimate(&x, &OgkConfig::default()).unwrap();
        let report = flag_outliers(&rc, &OgkConfig::default(), None).unwrap();
        assert!(report.flagged.len() as f64 / 200.0 <= 0.08);
        assert!(report.flagged.iter().all(|f| f.distance.powi(2) > report.chi2_cutoff));
    }

    #[test]
    fn errors() {
        let x = gaussian(3, 3, 1);
        assert!(matches!(ogk_estimate(&x, &OgkConfig::default()), Err(Error::TooFewRows { .. })));
        let mut x = gaussian(20, 3, 1);
        for i in 0..20 {
            x[(i, 1)] = 2.0;
        }
        assert!(matches!(
            ogk_estimate(&x, &OgkConfig::default()),
            Err(Error::ConstantColumn { column: 1 })
        ));
    }

    #[test]
    fn deterministic_psd_and_symmetric() {
        let x = gaussian(60, 4, 5);
        for est in [ScaleEstimator::Mad, ScaleEstimator::Qn] {
            let config = OgkConfig {
                scale_estimator: est,
                ..OgkConfig::default()
            };
            let a = ogk_estimate(&x, &config).unwrap();
            let b = ogk_estimate(&x, &config).unwrap();
            assert_eq!(a, b);
            assert!((&a.scatter - a.scatter.transpose()).amax() <= 1e-10);
            let min_eig = a.scatter.clone().symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-10);
        }
    }

    #[test]
    fn row_permutation_permutes_distances() {
        let x = gaussian(50, 3, 8);
        let perm: Vec<usize> = (0..50).rev().collect();
        let a = ogk_estimate(&x, &OgkConfig::default()).unwrap();
        let b = ogk_estimate(&x.select_rows(&perm), &OgkConfig::default()).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert!((b.distances[i] - a.distances[src]).abs() < 1e-10);
        }
    }

    #[test]
    fn adding_a_far_point_keeps_existing_flags() {
        let config = OgkConfig {
            reweight: false,
            ..OgkConfig::default()
        };
        for seed in 0..5 {
            let mut x = gaussian(80, 3, 100 + seed);
            for i in 0..4 {
                x[(i, 0)] += 9.0;
            }
            let before = flag_outliers(&ogk_estimate(&x, &config).unwrap(), &config, None).unwrap();
            // Rows just over the line can move back under it when the
            // medians shift; clear outliers must stay flagged.
            let clear: Vec<usize> = before
                .flagged
                .iter()
                .filter(|f| f.distance.powi(2) > 2.0 * before.chi2_cutoff)
                .map(|f| f.row)
                .collect();
            assert!(clear.len() >= 4);
            let mut grown = x.clone().insert_row(80, 0.0);
            grown[(80, 0)] = -30.0;
            grown[(80, 1)] = 30.0;
            let rc = ogk_estimate(&grown, &config).unwrap();
            let after = flag_outliers(&rc, &config, None).unwrap();
            assert!(after.rows().contains(&80));
            for r in clear {
                assert!(after.rows().contains(&r), "seed {seed}: row {r} unflagged");
            }
        }
    }

    #[test]
    fn lower_quantile_flags_more() {
        let x = gaussian(100, 3, 9);
        let rc = ogk_estimate(&x, &OgkConfig::default()).unwrap();
        let strict = flag_outliers(&rc, &OgkConfig::default(), None).unwrap();
        let loose = flag_outliers(&rc, &OgkConfig { cutoff_quantile: 0.5, ..OgkConfig::default() }, None).unwrap();
        assert!(loose.flagged.len() >= strict.flagged.len());
    }

    #[test]
    fn scale_estimators_on_known_samples() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        assert!((mad(&v) - 1.4826 * 2.0).abs() < 1e-12);
        // n=9: h=5, 10th smallest of the 36 gaps = 2; d_9 = 0.872.
        assert!((qn(&v) - 2.2219 * 0.872 * 2.0).abs() < 1e-12);
    }
}
