//! Built-in population scenarios for the Monte Carlo studies.
//!
//! Each scenario pairs a fully fixed population model (used to generate data)
//! with a deliberately misspecified analysis model and the list of omitted
//! "truth" parameters the diagnostic is supposed to recover. RI-CLPM scenarios
//! use AR = 0.25 and CL = 0.15; CLPM scenarios use AR = 0.5, CL = 0.2 with
//! within-wave residual correlation 0.3. Values the literature leaves open
//! (residual variances, intercept variances, confounder sizes) default to unit
//! variances, covariance 0.3, and confounder effects of 0.4-0.6.

use std::fmt::Write as _;

use crate::dsl::{parse_model, ModelSource, ModelSpec, Op, ParameterSpec};
use crate::error::{Error, Result};
use crate::ram::{ImpliedCovariance, RamSystem};

const AR_RI: f64 = 0.25;
const CL_RI: f64 = 0.15;
const AR_CLPM: f64 = 0.5;
const CL_CLPM: f64 = 0.2;
const COV: f64 = 0.3;
const CONF_COV: f64 = 0.4;
const DIRECT: f64 = 0.5;
const MED_ON_X1: f64 = 0.6;
const MED_PATH: f64 = 0.5;
const LOADING_B: f64 = 0.8;
const IND_RESID: f64 = 0.5;

pub const SCENARIO_NAMES: [&str; 12] = [
    "Baseline4w",
    "M1_Correlation",
    "M2_DirectEffect",
    "M3_Mediation",
    "Baseline5w2i",
    "FiveWave_Corr",
    "FiveWave_Direct",
    "FiveWave_Med",
    "CLPM_Baseline",
    "CLPM_Corr",
    "CLPM_Direct",
    "CLPM_Med",
];

#[derive(Debug, Clone)]
pub struct PopulationScenario {
    pub name: String,
    pub population: ModelSpec,
    pub analysis: ModelSpec,
    /// Parameters present in the population but omitted from the analysis
    /// model; the detection studies score retention of exactly these.
    pub truth: Vec<ParameterSpec>,
    pub description: String,
}

impl PopulationScenario {
    pub fn population_sigma(&self) -> Result<ImpliedCovariance> {
        let ram = RamSystem::build(&self.population)?;
        debug_assert_eq!(ram.n_free(), 0, "population model must be fully fixed");
        ram.implied_sigma(&[])
    }
}

/// Single-indicator RI-CLPM statements shared by population and analysis text.
fn riclpm_single(waves: usize, fixed: bool, out: &mut String) {
    out.push_str("@between: BX BY\n");
    for w in 1..=waves {
        let _ = writeln!(out, "WFX{w} =~ 1*x{w}");
        let _ = writeln!(out, "WFY{w} =~ 1*y{w}");
    }
    let bx: Vec<String> = (1..=waves).map(|w| format!("1*x{w}")).collect();
    let by: Vec<String> = (1..=waves).map(|w| format!("1*y{w}")).collect();
    let _ = writeln!(out, "BX =~ {}", bx.join(" + "));
    let _ = writeln!(out, "BY =~ {}", by.join(" + "));
    for w in 2..=waves {
        let p = w - 1;
        if fixed {
            let _ = writeln!(out, "WFX{w} ~ {AR_RI}*WFX{p} + {CL_RI}*WFY{p}");
            let _ = writeln!(out, "WFY{w} ~ {CL_RI}*WFX{p} + {AR_RI}*WFY{p}");
        } else {
            let _ = writeln!(out, "WFX{w} ~ WFX{p} + WFY{p}");
            let _ = writeln!(out, "WFY{w} ~ WFX{p} + WFY{p}");
        }
    }
    for w in 1..=waves {
        if fixed {
            let _ = writeln!(out, "WFX{w} ~~ 1*WFX{w}");
            let _ = writeln!(out, "WFY{w} ~~ 1*WFY{w}");
            let _ = writeln!(out, "WFX{w} ~~ {COV}*WFY{w}");
        } else {
            let _ = writeln!(out, "WFX{w} ~~ WFX{w}");
            let _ = writeln!(out, "WFY{w} ~~ WFY{w}");
            let _ = writeln!(out, "WFX{w} ~~ WFY{w}");
        }
    }
    if fixed {
        let _ = writeln!(out, "BX ~~ 1*BX\nBY ~~ 1*BY\nBX ~~ {COV}*BY");
    } else {
        out.push_str("BX ~~ BX\nBY ~~ BY\nBX ~~ BY\n");
    }
    for w in 1..=waves {
        let _ = writeln!(out, "x{w} ~~ 0*x{w}");
        let _ = writeln!(out, "y{w} ~~ 0*y{w}");
    }
}

/// Two-indicator RI-CLPM: indicators xa/xb and ya/yb per wave. The second
/// loading and all indicator residual variances are shared across waves
/// (labels lx, ly, rxa, rxb, rya, ryb) so the analysis model has 40 free
/// parameters (df = 170 at 5 waves).
fn riclpm_two_indicator(waves: usize, fixed: bool, out: &mut String) {
    out.push_str("@between: BX BY\n");
    for w in 1..=waves {
        if fixed {
            let _ = writeln!(out, "WFX{w} =~ 1*xa{w} + {LOADING_B}*xb{w}");
            let _ = writeln!(out, "WFY{w} =~ 1*ya{w} + {LOADING_B}*yb{w}");
        } else {
            let _ = writeln!(out, "WFX{w} =~ 1*xa{w} + lx*xb{w}");
            let _ = writeln!(out, "WFY{w} =~ 1*ya{w} + ly*yb{w}");
        }
    }
    let bx: Vec<String> =
        (1..=waves).flat_map(|w| [format!("1*xa{w}"), format!("1*xb{w}")]).collect();
    let by: Vec<String> =
        (1..=waves).flat_map(|w| [format!("1*ya{w}"), format!("1*yb{w}")]).collect();
    let _ = writeln!(out, "BX =~ {}", bx.join(" + "));
    let _ = writeln!(out, "BY =~ {}", by.join(" + "));
    for w in 2..=waves {
        let p = w - 1;
        if fixed {
            let _ = writeln!(out, "WFX{w} ~ {AR_RI}*WFX{p} + {CL_RI}*WFY{p}");
            let _ = writeln!(out, "WFY{w} ~ {CL_RI}*WFX{p} + {AR_RI}*WFY{p}");
        } else {
            let _ = writeln!(out, "WFX{w} ~ WFX{p} + WFY{p}");
            let _ = writeln!(out, "WFY{w} ~ WFX{p} + WFY{p}");
        }
    }
    for w in 1..=waves {
        if fixed {
            let _ = writeln!(out, "WFX{w} ~~ 1*WFX{w}");
            let _ = writeln!(out, "WFY{w} ~~ 1*WFY{w}");
            let _ = writeln!(out, "WFX{w} ~~ {COV}*WFY{w}");
        } else {
            let _ = writeln!(out, "WFX{w} ~~ WFX{w}");
            let _ = writeln!(out, "WFY{w} ~~ WFY{w}");
            let _ = writeln!(out, "WFX{w} ~~ WFY{w}");
        }
    }
    if fixed {
        let _ = writeln!(out, "BX ~~ 1*BX\nBY ~~ 1*BY\nBX ~~ {COV}*BY");
    } else {
        out.push_str("BX ~~ BX\nBY ~~ BY\nBX ~~ BY\n");
    }
    for w in 1..=waves {
        if fixed {
            let _ = writeln!(out, "xa{w} ~~ {IND_RESID}*xa{w}");
            let _ = writeln!(out, "xb{w} ~~ {IND_RESID}*xb{w}");
            let _ = writeln!(out, "ya{w} ~~ {IND_RESID}*ya{w}");
            let _ = writeln!(out, "yb{w} ~~ {IND_RESID}*yb{w}");
        } else {
            let _ = writeln!(out, "xa{w} ~~ rxa*xa{w}");
            let _ = writeln!(out, "xb{w} ~~ rxb*xb{w}");
            let _ = writeln!(out, "ya{w} ~~ rya*ya{w}");
            let _ = writeln!(out, "yb{w} ~~ ryb*yb{w}");
        }
    }
}

/// CLPM over observed variables X1..X4, Y1..Y4 (no random intercepts).
fn clpm(waves: usize, fixed: bool, out: &mut String) {
    for w in 2..=waves {
        let p = w - 1;
        if fixed {
            let _ = writeln!(out, "X{w} ~ {AR_CLPM}*X{p} + {CL_CLPM}*Y{p}");
            let _ = writeln!(out, "Y{w} ~ {CL_CLPM}*X{p} + {AR_CLPM}*Y{p}");
        } else {
            let _ = writeln!(out, "X{w} ~ X{p} + Y{p}");
            let _ = writeln!(out, "Y{w} ~ X{p} + Y{p}");
        }
    }
    for w in 1..=waves {
        if fixed {
            let _ = writeln!(out, "X{w} ~~ 1*X{w}");
            let _ = writeln!(out, "Y{w} ~~ 1*Y{w}");
            let _ = writeln!(out, "X{w} ~~ {COV}*Y{w}");
        } else {
            let _ = writeln!(out, "X{w} ~~ X{w}");
            let _ = writeln!(out, "Y{w} ~~ Y{w}");
            let _ = writeln!(out, "X{w} ~~ Y{w}");
        }
    }
}

fn build(name: &str, pop_text: &str, ana_text: &str, truth: Vec<ParameterSpec>, description: &str) -> Result<PopulationScenario> {
    let population = parse_model(&ModelSource::new(format!("{name}-population"), pop_text))?;
    let analysis = parse_model(&ModelSource::new(format!("{name}-analysis"), ana_text))?;
    for t in &truth {
        let key = t.clone().canonicalized().key();
        if !population.has_key(&key) {
            return Err(Error::UnknownScenario(format!(
                "{name}: truth parameter {key} missing from population model"
            )));
        }
        if analysis.has_key(&key) {
            return Err(Error::UnknownScenario(format!(
                "{name}: truth parameter {key} already free in analysis model"
            )));
        }
    }
    Ok(PopulationScenario {
        name: name.to_string(),
        population,
        analysis,
        truth,
        description: description.to_string(),
    })
}

pub fn scenario(name: &str) -> Result<PopulationScenario> {
    let mut pop = String::new();
    let mut ana = String::new();
    match name {
        "Baseline4w" => {
            riclpm_single(4, true, &mut pop);
            riclpm_single(4, false, &mut ana);
            build(name, &pop, &ana, vec![],
                "Correctly specified four-wave RI-CLPM (calibration null)")
        }
        "M1_Correlation" => {
            riclpm_single(4, true, &mut pop);
            let _ = writeln!(pop, "WFX4 ~~ {CONF_COV}*WFY2");
            let _ = writeln!(pop, "WFX2 ~~ {CONF_COV}*WFY4");
            riclpm_single(4, false, &mut ana);
            build(name, &pop, &ana, vec![
                ParameterSpec::fixed("WFX4", Op::Covariance, "WFY2", CONF_COV),
                ParameterSpec::fixed("WFX2", Op::Covariance, "WFY4", CONF_COV),
            ], "Latent confounding inducing cross-wave residual correlations")
        }
        "M2_DirectEffect" => {
            riclpm_single(4, true, &mut pop);
            let _ = writeln!(pop, "WFX4 ~ {DIRECT}*WFX2");
            riclpm_single(4, false, &mut ana);
            build(name, &pop, &ana, vec![
                ParameterSpec::fixed("WFX4", Op::Regression, "WFX2", DIRECT),
            ], "Omitted lag-2 direct effect from WFX2 to WFX4")
        }
        "M3_Mediation" => {
            riclpm_single(4, true, &mut pop);
            let _ = writeln!(pop, "M =~ 1*m\nm ~~ 0*m");
            let _ = writeln!(pop, "M ~ {MED_ON_X1}*x1");
            let _ = writeln!(pop, "M ~~ 1*M");
            let _ = writeln!(pop, "M ~~ {CONF_COV}*WFY2");
            let _ = writeln!(pop, "WFY4 ~ {MED_PATH}*M");
            riclpm_single(4, false, &mut ana);
            let _ = writeln!(ana, "M =~ 1*m\nm ~~ 0*m\nM ~ x1\nM ~~ M");
            build(name, &pop, &ana, vec![
                ParameterSpec::fixed("WFY4", Op::Regression, "M", MED_PATH),
                ParameterSpec::fixed("M", Op::Covariance, "WFY2", CONF_COV),
            ], "Confounding mediated through the residual of an observed mediator M")
        }
        "Baseline5w2i" => {
            riclpm_two_indicator(5, true, &mut pop);
            riclpm_two_indicator(5, false, &mut ana);
            build(name, &pop, &ana, vec![],
                "Correctly specified five-wave two-indicator RI-CLPM (calibration null)")
        }
        "FiveWave_Corr" => {
            riclpm_two_indicator(5, true, &mut pop);
            let _ = writeln!(pop, "WFX4 ~~ {CONF_COV}*WFY2");
            riclpm_two_indicator(5, false, &mut ana);
            build(name, &pop, &ana, vec![
                ParameterSpec::fixed("WFX4", Op::Covariance, "WFY2", CONF_COV),
            ], "Five-wave variant with an omitted cross-wave residual correlation")
        }
        "FiveWave_Direct" => {
            riclpm_two_indicator(5, true, &mut pop);
            let _ = writeln!(pop, "WFX4 ~ {DIRECT}*WFX2");
            riclpm_two_indicator(5, false, &mut ana);
            build(name, &pop, &ana, vec![
                ParameterSpec::fixed("WFX4", Op::Regression, "WFX2", DIRECT),
            ], "Five-wave variant with an omitted lag-2 direct effect")
        }
        "FiveWave_Med" => {
            riclpm_two_indicator(5, true, &mut pop);
            let _ = writeln!(pop, "M =~ 1*m\nm ~~ 0*m");
            let _ = writeln!(pop, "M ~ {MED_ON_X1}*xa1");
            let _ = writeln!(pop, "M ~~ 1*M");
            let _ = writeln!(pop, "M ~~ {CONF_COV}*WFY2");
            let _ = writeln!(pop, "WFY4 ~ {MED_PATH}*M");
            riclpm_two_indicator(5, false, &mut ana);
            let _ = writeln!(ana, "M =~ 1*m\nm ~~ 0*m\nM ~ xa1\nM ~~ M");
            build(name, &pop, &ana, vec![
                ParameterSpec::fixed("WFY4", Op::Regression, "M", MED_PATH),
                ParameterSpec::fixed("M", Op::Covariance, "WFY2", CONF_COV),
            ], "Five-wave variant with confounding through a mediator residual")
        }
        "CLPM_Baseline" => {
            clpm(4, true, &mut pop);
            clpm(4, false, &mut ana);
            build(name, &pop, &ana, vec![],
                "Correctly specified four-wave CLPM (calibration null)")
        }
        "CLPM_Corr" => {
            clpm(4, true, &mut pop);
            let _ = writeln!(pop, "X4 ~~ {CONF_COV}*Y2");
            clpm(4, false, &mut ana);
            build(name, &pop, &ana, vec![
                ParameterSpec::fixed("X4", Op::Covariance, "Y2", CONF_COV),
            ], "CLPM with an omitted cross-wave residual correlation")
        }
        "CLPM_Direct" => {
            clpm(4, true, &mut pop);
            let _ = writeln!(pop, "X4 ~ {DIRECT}*X2");
            let _ = writeln!(pop, "Y3 ~ {DIRECT}*Y1");
            clpm(4, false, &mut ana);
            build(name, &pop, &ana, vec![
                ParameterSpec::fixed("X4", Op::Regression, "X2", DIRECT),
                ParameterSpec::fixed("Y3", Op::Regression, "Y1", DIRECT),
            ], "CLPM with two omitted lag-2 direct effects")
        }
        "CLPM_Med" => {
            clpm(4, true, &mut pop);
            let _ = writeln!(pop, "M =~ 1*m\nm ~~ 0*m");
            let _ = writeln!(pop, "M ~ {MED_ON_X1}*X1 + {CONF_COV}*Y2");
            let _ = writeln!(pop, "M ~~ 1*M");
            let _ = writeln!(pop, "Y4 ~ {MED_PATH}*M + {CONF_COV}*Y2");
            clpm(4, false, &mut ana);
            let _ = writeln!(ana, "M =~ 1*m\nm ~~ 0*m\nM ~ X1\nM ~~ M");
            build(name, &pop, &ana, vec![
                ParameterSpec::fixed("Y4", Op::Regression, "M", MED_PATH),
                ParameterSpec::fixed("Y4", Op::Regression, "Y2", CONF_COV),
                ParameterSpec::fixed("M", Op::Regression, "Y2", CONF_COV),
            ], "CLPM with an omitted mediated pathway from Y2 to Y4")
        }
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

pub fn scenario_library() -> Vec<PopulationScenario> {
    SCENARIO_NAMES.iter().map(|n| scenario(n).expect("built-in scenario")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit, SampleMoments};

    #[test]
    fn library_contains_all_scenarios() {
        let lib = scenario_library();
        assert_eq!(lib.len(), 12);
        let names: Vec<&str> = lib.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, SCENARIO_NAMES.to_vec());
    }

    #[test]
    fn unknown_scenario_rejected() {
        assert!(matches!(scenario("Nope"), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn population_models_are_fixed_and_pd() {
        for s in scenario_library() {
            let ram = RamSystem::build(&s.population).unwrap();
            assert_eq!(ram.n_free(), 0, "{}: population must be fully fixed", s.name);
            let sig = s.population_sigma().unwrap();
            assert!(sig.is_pd, "{}: population covariance not PD", s.name);
        }
    }

    #[test]
    fn truth_invariants_hold() {
        for s in scenario_library() {
            for t in &s.truth {
                let key = t.clone().canonicalized().key();
                assert!(s.population.has_key(&key), "{}: {key} not in population", s.name);
                assert!(!s.analysis.has_key(&key), "{}: {key} free in analysis", s.name);
            }
        }
    }

    #[test]
    fn analysis_degrees_of_freedom() {
        let df = |name: &str| {
            let s = scenario(name).unwrap();
            let ram = RamSystem::build(&s.analysis).unwrap();
            let p = ram.n_observed;
            p * (p + 1) / 2 - ram.n_free()
        };
        assert_eq!(df("Baseline4w"), 9);
        assert_eq!(df("Baseline5w2i"), 170);
        assert_eq!(df("CLPM_Baseline"), 12);
        assert_eq!(df("M3_Mediation"), 16);
    }

    #[test]
    fn baselines_fit_their_population_exactly() {
        for name in ["Baseline4w", "CLPM_Baseline"] {
            let s = scenario(name).unwrap();
            let sig = s.population_sigma().unwrap();
            let pop_ram = RamSystem::build(&s.population).unwrap();
            let moments = SampleMoments::from_cov(
                pop_ram.spec.catalog.observed.clone(),
                sig.sigma,
                10_000,
            )
            .unwrap();
            let ram = RamSystem::build(&s.analysis).unwrap();
            let f = fit(&ram, &moments).unwrap();
            assert!(f.converged, "{name} did not converge");
            assert!(f.f_min.abs() < 1e-9, "{name}: F_min {}", f.f_min);
        }
    }

    #[test]
    fn analysis_models_identified_at_population_solution() {
        for name in ["Baseline4w", "CLPM_Baseline", "M3_Mediation"] {
            let s = scenario(name).unwrap();
            let sig = s.population_sigma().unwrap();
            let pop_ram = RamSystem::build(&s.population).unwrap();
            let moments = SampleMoments::from_cov(
                pop_ram.spec.catalog.observed.clone(),
                sig.sigma,
                10_000,
            )
            .unwrap();
            let ram = RamSystem::build(&s.analysis).unwrap();
            let f = fit(&ram, &moments).unwrap();
            let rep = ram.identification_check(&f.theta).unwrap();
            assert_eq!(rep.rank, ram.n_free(), "{name}: rank deficient: {:?}", rep.deficient);
        }
    }

    #[test]
    fn parameter_recovery_at_population_moments() {
        let s = scenario("Baseline4w").unwrap();
        let sig = s.population_sigma().unwrap();
        let pop_ram = RamSystem::build(&s.population).unwrap();
        let moments = SampleMoments::from_cov(
            pop_ram.spec.catalog.observed.clone(),
            sig.sigma,
            10_000,
        )
        .unwrap();
        let ram = RamSystem::build(&s.analysis).unwrap();
        let f = fit(&ram, &moments).unwrap();
        for (fp, &est) in ram.free.iter().zip(&f.theta) {
            if fp.spec.op != Op::Regression {
                continue;
            }
            // AR paths connect same-letter factors, CL paths cross letters
            let same = fp.spec.lhs.as_bytes()[2] == fp.spec.rhs.as_bytes()[2];
            let target = if same { AR_RI } else { CL_RI };
            assert!((est - target).abs() < 1e-4, "{}: {est} vs {target}", fp.key());
        }
    }
}
