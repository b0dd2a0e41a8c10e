//! Maximum-likelihood estimation of RAM-formulated models from sample
//! covariance matrices.
//!
//! The fitted discrepancy is the Wishart ML function
//!
//! ```text
//! F(theta) = log|Sigma| - log|S| + tr(S Sigma^-1) - p
//! ```
//!
//! minimized by BFGS with the analytic gradient
//! `g_j = tr[(Sigma^-1 - Sigma^-1 S Sigma^-1) dSigma_j]`. The test statistic is
//! `T = n * F_min` with `df = p(p+1)/2 - q`; standard errors come from the
//! inverse expected information divided by n.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::optim::{bfgs, OptimOptions};
use crate::prob::chi2_sf;
use crate::ram::RamSystem;

/// Divisor-n sample covariance with cached log-determinant, aligned to a
/// declared variable order.
#[derive(Debug, Clone)]
pub struct SampleMoments {
    pub names: Vec<String>,
    pub cov: DMatrix<f64>,
    pub n: usize,
    pub logdet: f64,
}

impl SampleMoments {
    /// Covariance of raw data rows (cases x variables), divisor n.
    pub fn from_data(names: Vec<String>, data: &DMatrix<f64>) -> Result<Self> {
        let n = data.nrows();
        let p = data.ncols();
        assert_eq!(p, names.len(), "column/name count mismatch");
        if n <= p {
            return Err(Error::TooFewRows { rows: n, min: p + 1 });
        }
        let mut means = DVector::zeros(p);
        for j in 0..p {
            means[j] = data.column(j).mean();
        }
        let mut cov = DMatrix::zeros(p, p);
        for i in 0..n {
            for j in 0..p {
                let dj = data[(i, j)] - means[j];
                for k in j..p {
                    cov[(j, k)] += dj * (data[(i, k)] - means[k]);
                }
            }
        }
        cov /= n as f64;
        for j in 0..p {
            for k in 0..j {
                cov[(j, k)] = cov[(k, j)];
            }
        }
        Self::from_cov(names, cov, n)
    }

    pub fn from_cov(names: Vec<String>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        let chol = cov.clone().cholesky().ok_or(Error::NonPdSampleCovariance)?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { names, cov, n, logdet })
    }

    /// Reorder variables to match the model's observed order.
    pub fn aligned_to(&self, ram: &RamSystem) -> Result<Self> {
        let target = &ram.spec.catalog.observed;
        if target == &self.names {
            return Ok(self.clone());
        }
        let mut perm = Vec::with_capacity(target.len());
        for name in target {
            let j = self
                .names
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?;
            perm.push(j);
        }
        let p = perm.len();
        let mut cov = DMatrix::zeros(p, p);
        for (r, &i) in perm.iter().enumerate() {
            for (c, &j) in perm.iter().enumerate() {
                cov[(r, c)] = self.cov[(i, j)];
            }
        }
        Self::from_cov(target.clone(), cov, self.n)
    }
}

/// F(theta) for an explicit implied covariance; `None` when Sigma is not PD.
pub fn ml_discrepancy(sigma: &DMatrix<f64>, s: &SampleMoments) -> Option<f64> {
    let p = s.cov.nrows();
    let chol = sigma.clone().cholesky()?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let siginv = chol.inverse();
    Some(logdet - s.logdet + (&siginv * &s.cov).trace() - p as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum FitWarning {
    NegativeVariance(Vec<String>),
    /// S(theta) has a materially negative eigenvalue: some residual covariance
    /// exceeds what its variances admit (generalized Heywood case).
    IndefiniteResiduals,
    NonPdImplied,
    MaxIterReached,
    IllConditionedInformation,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamEstimate {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub f_min: f64,
    pub t_ml: f64,
    pub df: usize,
    pub p_value: f64,
    pub gradient: Vec<f64>,
    /// Expected information at theta-hat (per observation).
    pub information: DMatrix<f64>,
    pub std_errors: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<FitWarning>,
    pub n: usize,
}

impl FitResult {
    pub fn parameter_table(&self, ram: &RamSystem) -> Vec<ParamEstimate> {
        ram.free
            .iter()
            .zip(self.theta.iter().zip(&self.std_errors))
            .map(|(fp, (&est, &se))| {
                let z = if se > 0.0 { est / se } else { f64::NAN };
                let p_value = if z.is_finite() { chi2_sf(z * z, 1.0) } else { f64::NAN };
                ParamEstimate { name: fp.key(), estimate: est, std_error: se, z, p_value }
            })
            .collect()
    }

    pub fn heywood(&self, ram: &RamSystem) -> Vec<String> {
        ram.negative_variances(&self.theta)
    }
}

fn objective_at(ram: &RamSystem, s: &SampleMoments, theta: &[f64]) -> Option<(f64, DVector<f64>)> {
    let eval = ram.eval(theta).ok()?;
    let p = ram.n_observed as f64;
    let chol = eval.sigma.clone().cholesky()?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let siginv = chol.inverse();
    let f = logdet - s.logdet + (&siginv * &s.cov).trace() - p;
    if !f.is_finite() {
        return None;
    }
    // W = Sigma^-1 - Sigma^-1 S Sigma^-1; g_j = tr(W dSigma_j) = <W, dSigma_j>
    let w = &siginv - &siginv * &s.cov * &siginv;
    let mut grad = DVector::zeros(ram.n_free());
    for (j, fp) in ram.free.iter().enumerate() {
        let d = ram.dsigma_for_cells(&eval, &fp.cells);
        grad[j] = w.component_mul(&d).sum();
    }
    Some((f, grad))
}

/// Gradient of F at theta (for score tests at a constrained solution).
pub fn discrepancy_gradient(ram: &RamSystem, s: &SampleMoments, theta: &[f64]) -> Result<DVector<f64>> {
    objective_at(ram, s, theta)
        .map(|(_, g)| g)
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma(theta)".into()))
}

fn finish_fit(
    ram: &RamSystem,
    s: &SampleMoments,
    theta: Vec<f64>,
    f_min: f64,
    grad: DVector<f64>,
    converged: bool,
    iterations: usize,
    max_iter_reached: bool,
) -> Result<FitResult> {
    let n = s.n;
    let p = ram.n_observed;
    let q = ram.n_free();
    let df = p * (p + 1) / 2 - q;
    let t_ml = (n as f64) * f_min.max(0.0);
    let p_value = if df == 0 { 1.0 } else { chi2_sf(t_ml, df as f64) };

    let mut warnings = Vec::new();
    if max_iter_reached {
        warnings.push(FitWarning::MaxIterReached);
    }
    let heywood = ram.negative_variances(&theta);
    if !heywood.is_empty() {
        warnings.push(FitWarning::NegativeVariance(heywood));
    }
    if ram.residual_min_eigenvalue(&theta)? < -1e-8 {
        warnings.push(FitWarning::IndefiniteResiduals);
    }

    let info = ram.fisher_information(&theta)?;
    let mut std_errors = vec![f64::NAN; q];
    let mut ill = q > 0;
    if q > 0 {
        if let Some(chol) = info.clone().cholesky() {
            let inv = chol.inverse();
            ill = false;
            for j in 0..q {
                let v = inv[(j, j)] / n as f64;
                if v >= 0.0 {
                    std_errors[j] = v.sqrt();
                } else {
                    ill = true;
                }
            }
        }
    }
    if ill {
        warnings.push(FitWarning::IllConditionedInformation);
    }
    if !ram.implied_sigma(&theta)?.is_pd {
        warnings.push(FitWarning::NonPdImplied);
    }

    Ok(FitResult {
        theta,
        f_min,
        t_ml,
        df,
        p_value,
        gradient: grad.iter().copied().collect(),
        information: info,
        std_errors,
        converged,
        iterations,
        warnings,
        n,
    })
}

/// Fit from an explicit start vector (used for warm starts during stepwise
/// search). No jitter retries.
pub fn fit_with_start(ram: &RamSystem, moments: &SampleMoments, start: &[f64]) -> Result<FitResult> {
    let s = moments.aligned_to(ram)?;
    let opts = OptimOptions::default();
    let out = bfgs(|x| objective_at(ram, &s, x.as_slice()), DVector::from_column_slice(start), &opts)
        .ok_or(Error::StartValueFailure(1))?;
    finish_fit(
        ram,
        &s,
        out.x.iter().copied().collect(),
        out.f,
        out.grad,
        out.converged,
        out.iterations,
        out.max_iter_reached,
    )
}

/// Fit with deterministic start values; on line-search failure retry up to 10
/// times with reproducible ±10% jitter around the start vector.
pub fn fit(ram: &RamSystem, moments: &SampleMoments) -> Result<FitResult> {
    let s = moments.aligned_to(ram)?;
    let base = ram.start_values(&s.cov.diagonal());
    let opts = OptimOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5045_4C57); // fixed: retries must be reproducible
    for attempt in 0..=10 {
        let start: Vec<f64> = if attempt == 0 {
            base.clone()
        } else {
            base.iter()
                .map(|&v| {
                    let jitter = 0.1 * (2.0 * rng.gen::<f64>() - 1.0);
                    if v == 0.0 {
                        jitter
                    } else {
                        v * (1.0 + jitter)
                    }
                })
                .collect()
        };
        let attempt_out = bfgs(
            |x| objective_at(ram, &s, x.as_slice()),
            DVector::from_column_slice(&start),
            &opts,
        );
        if let Some(out) = attempt_out {
            if out.converged || out.max_iter_reached {
                return finish_fit(
                    ram,
                    &s,
                    out.x.iter().copied().collect(),
                    out.f,
                    out.grad,
                    out.converged,
                    out.iterations,
                    out.max_iter_reached,
                );
            }
        }
    }
    Err(Error::StartValueFailure(11))
}

/// Independence baseline: diagonal Sigma with free variances has the analytic
/// solution sigma_jj = s_jj, giving T_b = n (sum log s_jj - log|S|).
pub fn independence_baseline(s: &SampleMoments) -> (f64, usize) {
    let p = s.cov.nrows();
    let t_b = (s.n as f64)
        * (s.cov.diagonal().iter().map(|v| v.ln()).sum::<f64>() - s.logdet);
    (t_b.max(0.0), p * (p - 1) / 2)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitIndices {
    pub nfi: f64,
    pub cfi: f64,
    pub tli: f64,
    pub rmsea: f64,
}

pub fn fit_indices(t_m: f64, df_m: usize, t_b: f64, df_b: usize, n: usize) -> FitIndices {
    if df_m == 0 {
        return FitIndices { nfi: 1.0, cfi: 1.0, tli: 1.0, rmsea: 0.0 };
    }
    let dfm = df_m as f64;
    let dfb = df_b as f64;
    let nfi = if t_b > 0.0 { ((t_b - t_m) / t_b).clamp(0.0, 1.0) } else { 1.0 };
    let num = (t_m - dfm).max(0.0);
    let den = num.max((t_b - dfb).max(0.0));
    let cfi = if den > 0.0 { (1.0 - num / den).clamp(0.0, 1.0) } else { 1.0 };
    let tli = if df_b > 0 && t_b / dfb > 1.0 {
        ((t_b / dfb - t_m / dfm) / (t_b / dfb - 1.0)).min(1.0)
    } else {
        1.0
    };
    let rmsea = (num / (dfm * n as f64)).sqrt();
    FitIndices { nfi, cfi, tli, rmsea }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse_model, ModelSource};
    use approx::assert_abs_diff_eq;

    fn ram(text: &str) -> RamSystem {
        let spec = parse_model(&ModelSource::new("t", text)).unwrap();
        RamSystem::build(&spec).unwrap()
    }

    #[test]
    fn discrepancy_scalar_oracle() {
        // Sigma = 1, S = 2: F = -log 2 + 2 - 1 = 1 - log 2
        let s = SampleMoments::from_cov(
            vec!["x".into()],
            DMatrix::from_element(1, 1, 2.0),
            100,
        )
        .unwrap();
        let f = ml_discrepancy(&DMatrix::identity(1, 1), &s).unwrap();
        assert_abs_diff_eq!(f, 0.3068528194400547, epsilon = 1e-15);
    }

    #[test]
    fn discrepancy_two_by_two_oracle() {
        // Sigma = [[1,.5],[.5,1]], S = I: F = log 0.75 + 8/3 - 2
        let s = SampleMoments::from_cov(
            vec!["x".into(), "y".into()],
            DMatrix::identity(2, 2),
            100,
        )
        .unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let f = ml_discrepancy(&sigma, &s).unwrap();
        assert_abs_diff_eq!(f, 0.37898459421488573, epsilon = 1e-15);
    }

    #[test]
    fn discrepancy_zero_at_truth() {
        let s = SampleMoments::from_cov(
            vec!["x".into(), "y".into()],
            DMatrix::from_row_slice(2, 2, &[1.3, 0.4, 0.4, 0.9]),
            50,
        )
        .unwrap();
        assert_abs_diff_eq!(ml_discrepancy(&s.cov, &s).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn non_pd_sample_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            SampleMoments::from_cov(vec!["a".into(), "b".into()], bad, 10),
            Err(Error::NonPdSampleCovariance)
        ));
    }

    #[test]
    fn from_data_divisor_n() {
        // two points (0, 2): mean 1, divisor-n variance = 1
        let data = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        let s = SampleMoments::from_data(vec!["x".into()], &data).unwrap();
        assert_abs_diff_eq!(s.cov[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn saturated_model_fits_exactly() {
        let r = ram("x ~~ x\ny ~~ y\nx ~~ y");
        let s = SampleMoments::from_cov(
            vec!["x".into(), "y".into()],
            DMatrix::from_row_slice(2, 2, &[1.5, 0.6, 0.6, 2.0]),
            200,
        )
        .unwrap();
        let fit = fit(&r, &s).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.df, 0);
        assert!(fit.f_min.abs() < 1e-10, "f_min {}", fit.f_min);
        assert_abs_diff_eq!(fit.p_value, 1.0, epsilon = 1e-12);
        // theta recovers the sample moments
        let ix = r.free_index("x~~x").unwrap();
        let iy = r.free_index("y~~y").unwrap();
        let ixy = r.free_index("x~~y").unwrap();
        assert_abs_diff_eq!(fit.theta[ix], 1.5, epsilon = 1e-5);
        assert_abs_diff_eq!(fit.theta[iy], 2.0, epsilon = 1e-5);
        assert_abs_diff_eq!(fit.theta[ixy], 0.6, epsilon = 1e-5);
    }

    #[test]
    fn two_wave_ar_recovery_and_se() {
        // population: x2 = 0.5 x1 + v, var(x1) = 1, var(v) = 0.75
        let pop = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let s = SampleMoments::from_cov(vec!["x1".into(), "x2".into()], pop, 1000).unwrap();
        let r = ram("x2 ~ x1\nx1 ~~ x1\nx2 ~~ x2");
        let fit = fit(&r, &s).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.df, 0);
        let ib = r.free_index("x2~x1").unwrap();
        assert_abs_diff_eq!(fit.theta[ib], 0.5, epsilon = 1e-7);
        // SE of the regression slope: sqrt(var(v)/(n var(x1))) = sqrt(.75/1000)
        assert_abs_diff_eq!(fit.std_errors[ib], (0.75f64 / 1000.0).sqrt(), epsilon = 1e-6);
        let table = fit.parameter_table(&r);
        let row = table.iter().find(|p| p.name == "x2~x1").unwrap();
        assert_abs_diff_eq!(row.z, 0.5 / (0.75f64 / 1000.0).sqrt(), epsilon = 1e-4);
    }

    #[test]
    fn misfit_statistic_positive() {
        // fit an independence model to correlated data: T > 0, df = 1
        let pop = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
        let s = SampleMoments::from_cov(vec!["x".into(), "y".into()], pop, 500).unwrap();
        let r = ram("x ~~ x\ny ~~ y");
        let fit = fit(&r, &s).unwrap();
        assert_eq!(fit.df, 1);
        // analytic: F_min = -log|R| = -log(1 - .36)
        let expected = -(1.0f64 - 0.36).ln() * 500.0;
        assert_abs_diff_eq!(fit.t_ml, expected, epsilon = 1e-5);
        assert!(fit.p_value < 1e-6);
    }

    #[test]
    fn baseline_matches_direct_independence_fit() {
        let pop = DMatrix::from_row_slice(2, 2, &[1.2, 0.5, 0.5, 0.9]);
        let s = SampleMoments::from_cov(vec!["x".into(), "y".into()], pop, 300).unwrap();
        let (t_b, df_b) = independence_baseline(&s);
        let r = ram("x ~~ x\ny ~~ y");
        let fit = fit(&r, &s).unwrap();
        assert_eq!(df_b, fit.df);
        assert_abs_diff_eq!(t_b, fit.t_ml, epsilon = 1e-5);
    }

    #[test]
    fn indices_perfect_fit() {
        let ix = fit_indices(0.0, 9, 500.0, 10, 1000);
        assert_abs_diff_eq!(ix.cfi, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ix.rmsea, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ix.nfi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn indices_degenerate_saturated() {
        let ix = fit_indices(0.0, 0, 500.0, 10, 1000);
        assert_abs_diff_eq!(ix.cfi, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ix.tli, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ix.rmsea, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn alignment_reorders_columns() {
        let s = SampleMoments::from_cov(
            vec!["x2".into(), "x1".into()],
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            100,
        )
        .unwrap();
        let r = ram("x1 ~~ x1\nx2 ~~ x2\nx2 ~ x1");
        let a = s.aligned_to(&r).unwrap();
        assert_eq!(a.names, vec!["x1".to_string(), "x2".to_string()]);
        assert_abs_diff_eq!(a.cov[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(a.cov[(1, 1)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn missing_column_reported() {
        let s = SampleMoments::from_cov(vec!["z".into()], DMatrix::identity(1, 1), 100).unwrap();
        let r = ram("x ~~ x");
        assert!(matches!(s.aligned_to(&r), Err(Error::MissingColumn(_))));
    }
}
