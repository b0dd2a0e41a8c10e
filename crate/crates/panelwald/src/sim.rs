//! Monte Carlo harness: multivariate-normal data generation from a population
//! covariance and replication studies for calibration (fit-statistic behavior
//! under correct specification) and detection (recovery of omitted parameters
//! by the two-stage diagnostic).
//!
//! Reproducibility contract: replication r draws from a ChaCha8 generator
//! seeded with the study seed on stream r+1, so results are independent of
//! execution order and thread count. Summaries reduce over replications in
//! index order.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{fit, fit_indices, independence_baseline, SampleMoments};
use crate::ram::{ImpliedCovariance, RamSystem};
use crate::scenarios::PopulationScenario;
use crate::twoslw::{run_2slw, TwoSlwConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SqrtMethod {
    Cholesky,
    Symmetric,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub alpha: f64,
    pub sqrt_method: SqrtMethod,
    pub top_k: usize,
    pub epc_min: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            reps: 200,
            seed: 1,
            alpha: 0.05,
            sqrt_method: SqrtMethod::Cholesky,
            top_k: 25,
            epc_min: 0.1,
        }
    }
}

impl SimulationConfig {
    fn twoslw(&self) -> TwoSlwConfig {
        TwoSlwConfig {
            top_k: self.top_k,
            epc_min: self.epc_min,
            alpha: self.alpha,
            enforce_temporal: true,
        }
    }
}

/// Matrix square root of a PD covariance per the configured method.
pub fn covariance_root(sigma: &ImpliedCovariance, method: SqrtMethod) -> Result<DMatrix<f64>> {
    if !sigma.is_pd {
        return Err(Error::NotPositiveDefinite("population covariance".into()));
    }
    match method {
        SqrtMethod::Cholesky => Ok(sigma
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("population covariance".into()))?
            .l()),
        SqrtMethod::Symmetric => {
            let eig = sigma.sigma.clone().symmetric_eigen();
            let mut vals = eig.eigenvalues.clone();
            for v in vals.iter_mut() {
                if *v < 0.0 {
                    return Err(Error::NotPositiveDefinite("population covariance".into()));
                }
                *v = v.sqrt();
            }
            Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
        }
    }
}

/// n i.i.d. rows z = L eps with eps ~ N(0, I).
pub fn generate_data(root: &DMatrix<f64>, n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let p = root.nrows();
    let mut data = DMatrix::zeros(n, p);
    let mut eps = nalgebra::DVector::<f64>::zeros(p);
    for i in 0..n {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let z = root * &eps;
        for j in 0..p {
            data[(i, j)] = z[j];
        }
    }
    data
}

fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub scenario: String,
    pub n: usize,
    pub reps: usize,
    pub failed_reps: usize,
    pub mean_chi2: f64,
    pub sd_chi2: f64,
    pub mean_p: f64,
    pub rejection_rate: f64,
    pub mean_nfi: f64,
    pub mean_cfi: f64,
    pub mean_rmsea: f64,
    /// Fraction of replications in which each truth parameter was retained.
    pub detection_rate: Option<BTreeMap<String, f64>>,
    /// Mean number of retained non-truth parameters per replication.
    pub false_positive_rate: Option<f64>,
    /// Fraction of replications with an empty retained set.
    pub empty_retained_rate: Option<f64>,
    /// Fraction of replications in which each parameter (truth or not) was
    /// retained; only parameters retained at least once appear.
    pub retention_rate: Option<BTreeMap<String, f64>>,
}

struct RepRecord {
    t_ml: f64,
    p_value: f64,
    nfi: f64,
    cfi: f64,
    rmsea: f64,
    retained: Option<Vec<String>>,
}

fn summarize(
    scenario: &str,
    cfg: &SimulationConfig,
    records: Vec<Option<RepRecord>>,
    truth_keys: &[String],
    detection: bool,
) -> Result<SimulationSummary> {
    let reps = records.len();
    let ok: Vec<&RepRecord> = records.iter().flatten().collect();
    let failed = reps - ok.len();
    if failed * 10 > reps {
        return Err(Error::StartValueFailure(failed));
    }
    let m = ok.len() as f64;
    let mean = |f: &dyn Fn(&RepRecord) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / m;
    let mean_chi2 = mean(&|r| r.t_ml);
    let var_chi2 = if ok.len() > 1 {
        ok.iter().map(|r| (r.t_ml - mean_chi2).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let (detection_rate, false_positive_rate, empty_retained_rate, retention_rate) = if detection {
        let mut det: BTreeMap<String, f64> = truth_keys.iter().map(|k| (k.clone(), 0.0)).collect();
        let mut all: BTreeMap<String, f64> = BTreeMap::new();
        let mut fp = 0.0;
        let mut empty = 0.0;
        for r in &ok {
            let retained = r.retained.as_deref().unwrap_or(&[]);
            if retained.is_empty() {
                empty += 1.0;
            }
            for key in retained {
                *all.entry(key.clone()).or_insert(0.0) += 1.0;
                match det.get_mut(key) {
                    Some(v) => *v += 1.0,
                    None => fp += 1.0,
                }
            }
        }
        for v in det.values_mut() {
            *v /= m;
        }
        for v in all.values_mut() {
            *v /= m;
        }
        (Some(det), Some(fp / m), Some(empty / m), Some(all))
    } else {
        (None, None, None, None)
    };
    Ok(SimulationSummary {
        scenario: scenario.to_string(),
        n: cfg.n,
        reps,
        failed_reps: failed,
        mean_chi2,
        sd_chi2: var_chi2.sqrt(),
        mean_p: mean(&|r| r.p_value),
        rejection_rate: mean(&|r| if r.p_value < cfg.alpha { 1.0 } else { 0.0 }),
        mean_nfi: mean(&|r| r.nfi),
        mean_cfi: mean(&|r| r.cfi),
        mean_rmsea: mean(&|r| r.rmsea),
        detection_rate,
        false_positive_rate,
        empty_retained_rate,
        retention_rate,
    })
}

fn rep_moments(
    scenario: &PopulationScenario,
    root: &DMatrix<f64>,
    names: &[String],
    cfg: &SimulationConfig,
    rep: usize,
) -> Result<SampleMoments> {
    let _ = scenario;
    let mut rng = rep_rng(cfg.seed, rep);
    let data = generate_data(root, cfg.n, &mut rng);
    SampleMoments::from_data(names.to_vec(), &data)
}

/// Fit the analysis model to data from its own population (the model is
/// correctly specified) and summarize the fit-statistic distribution.
pub fn run_calibration(
    scenario: &PopulationScenario,
    cfg: &SimulationConfig,
) -> Result<SimulationSummary> {
    let sigma = scenario.population_sigma()?;
    let root = covariance_root(&sigma, cfg.sqrt_method)?;
    let pop_ram = RamSystem::build(&scenario.population)?;
    let names = pop_ram.spec.catalog.observed.clone();
    let ram = RamSystem::build(&scenario.analysis)?;

    let records: Vec<Option<RepRecord>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let moments = rep_moments(scenario, &root, &names, cfg, rep).ok()?;
            let aligned = moments.aligned_to(&ram).ok()?;
            let f = fit(&ram, &aligned).ok()?;
            if !f.converged {
                return None;
            }
            let (t_b, df_b) = independence_baseline(&aligned);
            let ix = fit_indices(f.t_ml, f.df, t_b, df_b, aligned.n);
            Some(RepRecord {
                t_ml: f.t_ml,
                p_value: f.p_value,
                nfi: ix.nfi,
                cfi: ix.cfi,
                rmsea: ix.rmsea,
                retained: None,
            })
        })
        .collect();
    summarize(&scenario.name, cfg, records, &[], false)
}

/// Generate from the population model, run the full two-stage diagnostic with
/// the misspecified analysis model, and score retention of the truth set.
pub fn run_detection(
    scenario: &PopulationScenario,
    cfg: &SimulationConfig,
) -> Result<SimulationSummary> {
    let sigma = scenario.population_sigma()?;
    let root = covariance_root(&sigma, cfg.sqrt_method)?;
    let pop_ram = RamSystem::build(&scenario.population)?;
    let names = pop_ram.spec.catalog.observed.clone();
    let truth_keys: Vec<String> =
        scenario.truth.iter().map(|t| t.clone().canonicalized().key()).collect();
    let twoslw_cfg = cfg.twoslw();

    let records: Vec<Option<RepRecord>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let moments = rep_moments(scenario, &root, &names, cfg, rep).ok()?;
            let report = run_2slw(&scenario.analysis, &moments, &twoslw_cfg).ok()?;
            if !report.baseline_fit.converged {
                return None;
            }
            Some(RepRecord {
                t_ml: report.baseline_fit.t_ml,
                p_value: report.baseline_fit.p_value,
                nfi: report.baseline_fit.indices.nfi,
                cfi: report.baseline_fit.indices.cfi,
                rmsea: report.baseline_fit.indices.rmsea,
                retained: Some(report.retained),
            })
        })
        .collect();
    summarize(&scenario.name, cfg, records, &truth_keys, true)
}

impl SimulationSummary {
    /// CSV rows in the calibration-table column order; detection studies get
    /// extra rows per truth parameter.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,n,reps,failed_reps,mean_chi2,sd_chi2,mean_p,rejection_rate,mean_nfi,mean_cfi,mean_rmsea,false_positive_rate,empty_retained_rate\n",
        );
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            self.scenario,
            self.n,
            self.reps,
            self.failed_reps,
            self.mean_chi2,
            self.sd_chi2,
            self.mean_p,
            self.rejection_rate,
            self.mean_nfi,
            self.mean_cfi,
            self.mean_rmsea,
            self.false_positive_rate.map_or(String::new(), |v| format!("{v:.6}")),
            self.empty_retained_rate.map_or(String::new(), |v| format!("{v:.6}")),
        ));
        if let Some(det) = &self.detection_rate {
            out.push_str("truth_param,detection_rate\n");
            for (k, v) in det {
                out.push_str(&format!("{k},{v:.6}\n"));
            }
        }
        out
    }
}
