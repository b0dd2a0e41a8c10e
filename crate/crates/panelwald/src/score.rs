//! Univariate score (Lagrange multiplier) tests, expected parameter changes,
//! and forward stepwise Wald search over fixed-at-zero candidate parameters.
//!
//! For a candidate c evaluated at the constrained optimum theta-hat, with
//! discrepancy gradient `d_c = dF/dc` and expected-information Schur complement
//! `R = H_cc - H_cf H_ff^-1 H_fc`,
//!
//! ```text
//! LM  = n d_c^2 / (4 R)     ~ chi2(1) under the null
//! EPC = -d_c / (2 R)          (expected parameter change if freed)
//! ```
//!
//! The factor structure follows from T = n F and the information identity
//! E[d2F/dtheta2] = 2 H.

use nalgebra::{DMatrix, DVector};

use crate::dsl::{ModelSpec, ParameterSpec};
use crate::error::{Error, Result};
use crate::estimator::{fit, fit_with_start, FitResult, FitWarning, SampleMoments};
use crate::prob::chi2_sf;
use crate::ram::{information_matrix, RamSystem};

#[derive(Debug, Clone)]
pub struct LmCandidate {
    pub param: ParameterSpec,
    pub lm: f64,
    pub p_value: f64,
    pub epc: f64,
}

#[derive(Debug, Clone)]
pub struct LmScan {
    /// Candidates ranked by LM (descending), ties broken by |EPC| then key.
    pub candidates: Vec<LmCandidate>,
    /// Candidates excluded from ranking, with the reason.
    pub dropped: Vec<(ParameterSpec, String)>,
}

/// Score-test every candidate against the fitted constrained model.
pub fn lm_scan(
    ram: &RamSystem,
    moments: &SampleMoments,
    fit: &FitResult,
    candidates: &[ParameterSpec],
) -> Result<LmScan> {
    let s = moments.aligned_to(ram)?;
    let n = s.n as f64;
    let eval = ram.eval(&fit.theta)?;
    let chol = eval
        .sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma(theta-hat)".into()))?;
    let siginv = chol.inverse();
    let w = &siginv - &siginv * &s.cov * &siginv;

    let free_derivs: Vec<DMatrix<f64>> =
        ram.free.iter().map(|fp| ram.dsigma_for_cells(&eval, &fp.cells)).collect();
    let weighted_free: Vec<DMatrix<f64>> = free_derivs.iter().map(|d| &siginv * d).collect();
    let h_ff = information_matrix(&siginv, &free_derivs);
    let q = h_ff.nrows();
    let h_ff_inv = if q == 0 {
        DMatrix::zeros(0, 0)
    } else {
        h_ff.clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| h_ff.clone().lu().try_inverse())
            .ok_or_else(|| Error::NotPositiveDefinite("expected information".into()))?
    };

    let mut out = Vec::new();
    let mut dropped = Vec::new();
    for cand in candidates {
        let cells = match ram.cells_for_param(cand) {
            Ok(c) => c,
            Err(e) => {
                dropped.push((cand.clone(), e.to_string()));
                continue;
            }
        };
        let d_mat = ram.dsigma_for_cells(&eval, &cells);
        let d_c = w.component_mul(&d_mat).sum();
        let wc = &siginv * &d_mat;
        let h_cc = 0.5 * (&wc * &wc).trace();
        let mut h_fc = DVector::zeros(q);
        for j in 0..q {
            h_fc[j] = 0.5 * (&weighted_free[j] * &wc).trace();
        }
        let r = h_cc - (h_fc.transpose() * &h_ff_inv * &h_fc)[(0, 0)];
        if !r.is_finite() || r <= 1e-12 {
            dropped.push((cand.clone(), "singular augmented information".to_string()));
            continue;
        }
        let lm = n * d_c * d_c / (4.0 * r);
        let epc = -d_c / (2.0 * r);
        if !lm.is_finite() || !epc.is_finite() {
            dropped.push((cand.clone(), "non-finite score statistic".to_string()));
            continue;
        }
        out.push(LmCandidate { param: cand.clone(), lm, p_value: chi2_sf(lm, 1.0), epc });
    }
    out.sort_by(|a, b| {
        b.lm
            .partial_cmp(&a.lm)
            .unwrap()
            .then(b.epc.abs().partial_cmp(&a.epc.abs()).unwrap())
            .then(a.param.key().cmp(&b.param.key()))
    });
    Ok(LmScan { candidates: out, dropped })
}

/// Squared z statistic for one fitted parameter.
pub fn wald_statistic(estimate: f64, std_error: f64) -> f64 {
    let z = estimate / std_error;
    z * z
}

#[derive(Debug, Clone)]
pub struct WaldStep {
    pub param: ParameterSpec,
    pub wald: f64,
    pub p_value: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub retained: bool,
    /// Reason the step was rejected independent of its p-value.
    pub veto: Option<String>,
}

#[derive(Debug)]
pub struct StepwiseOutcome {
    pub steps: Vec<WaldStep>,
    pub spec: ModelSpec,
    pub fit: FitResult,
    pub ram: RamSystem,
}

/// Add ranked candidates one at a time; each addition is kept only when its
/// Wald test rejects at `alpha` and the refit is clean (converged, positive
/// variances, PD implied covariance). Retained parameters stay in the model
/// for all later steps.
///
/// Retention is family-wise: the candidates were selected *because* they had
/// the largest score statistics, so under a correctly specified model the
/// top-ranked Wald test is the maximum of many correlated chi-squares and an
/// unadjusted per-test threshold would retain a spurious parameter in most
/// samples. Each step therefore rejects at the Bonferroni level
/// `alpha / n_scanned`, where `n_scanned` is the size of the family the
/// entrants were selected from — every candidate score-tested in stage one.
/// Reported p-values stay unadjusted.
pub fn forward_stepwise_wald(
    base_spec: &ModelSpec,
    moments: &SampleMoments,
    ranked: &[LmCandidate],
    n_scanned: usize,
    alpha: f64,
) -> Result<StepwiseOutcome> {
    let mut spec = base_spec.clone();
    let mut ram = RamSystem::build(&spec)?;
    let mut current = fit(&ram, moments)?;
    let mut steps = Vec::new();
    let family = n_scanned.max(ranked.len()).max(1) as f64;

    for cand in ranked {
        let trial_spec = spec.with_free(&cand.param);
        let trial_ram = RamSystem::build(&trial_spec)?;
        // warm start: carry over current estimates, open the candidate at EPC
        let mut start = vec![0.0; trial_ram.n_free()];
        for (j, fp) in trial_ram.free.iter().enumerate() {
            start[j] = match ram.free_index(&fp.key()) {
                Some(old) => current.theta[old],
                None => cand.epc,
            };
        }
        let trial_fit = match fit_with_start(&trial_ram, moments, &start)
            .or_else(|_| fit(&trial_ram, moments))
        {
            Ok(f) => f,
            Err(e) => {
                steps.push(WaldStep {
                    param: cand.param.clone(),
                    wald: f64::NAN,
                    p_value: f64::NAN,
                    estimate: f64::NAN,
                    std_error: f64::NAN,
                    retained: false,
                    veto: Some(format!("refit failed: {e}")),
                });
                continue;
            }
        };

        let veto = if !trial_fit.converged {
            Some("refit did not converge".to_string())
        } else if let Some(FitWarning::NegativeVariance(vars)) = trial_fit
            .warnings
            .iter()
            .find(|w| matches!(w, FitWarning::NegativeVariance(_)))
        {
            Some(format!("negative variance: {}", vars.join(", ")))
        } else if trial_fit.warnings.contains(&FitWarning::IndefiniteResiduals) {
            Some("inadmissible residual covariance".to_string())
        } else if trial_fit.warnings.contains(&FitWarning::NonPdImplied) {
            Some("implied covariance not positive definite".to_string())
        } else {
            None
        };

        let idx = trial_ram
            .free_index(&cand.param.clone().canonicalized().key())
            .expect("candidate present in trial model");
        let estimate = trial_fit.theta[idx];
        let std_error = trial_fit.std_errors[idx];
        let (wald, p_value) = if std_error.is_finite() && std_error > 0.0 {
            let w = wald_statistic(estimate, std_error);
            (w, chi2_sf(w, 1.0))
        } else {
            (f64::NAN, f64::NAN)
        };
        let retained = veto.is_none() && p_value.is_finite() && p_value < alpha / family;
        steps.push(WaldStep {
            param: cand.param.clone(),
            wald,
            p_value,
            estimate,
            std_error,
            retained,
            veto,
        });
        if retained {
            spec = trial_spec;
            ram = trial_ram;
            current = trial_fit;
        }
    }

    Ok(StepwiseOutcome { steps, spec, fit: current, ram })
}
