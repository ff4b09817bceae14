//! Phase estimators on a tabulated model and the Bayesian error figures they achieve.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::protocol::ConditionalModel;

/// Outcomes with marginal probability below this are skipped by the Bayes estimator.
pub const MIN_MARGINAL: f64 = 1e-300;
/// Probability floor in the Fisher information integrand.
pub const FISHER_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Linear,
    OptimalBayes,
}

/// Estimated phase for every outcome of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorTable {
    pub kind: EstimatorKind,
    pub outcomes: Vec<f64>,
    pub estimates: Vec<f64>,
    /// Slope `a` of the linear estimator `phi_est = a x`.
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub bmse: f64,
    pub prior_var: f64,
    /// Effective measurement uncertainty squared; infinite when nothing is learned.
    pub efm: f64,
    pub n_nodes: usize,
    pub truncation: f64,
}

impl ErrorReport {
    fn new(bmse: f64, prior: &crate::prior::PriorModel) -> Result<Self> {
        let bmse = bmse.max(0.0);
        let prior_var = prior.variance();
        Ok(ErrorReport {
            bmse,
            prior_var,
            efm: efm_transform(bmse, prior_var)?,
            n_nodes: prior.n_nodes,
            truncation: prior.truncation,
        })
    }

    /// `Delta phi_M = sqrt(efm)`.
    pub fn delta_phi_m(&self) -> f64 {
        self.efm.sqrt()
    }
}

/// `(1/bmse - 1/prior_var)^(-1)`, `+inf` when the BMSE equals the prior variance.
pub fn efm_transform(bmse: f64, prior_var: f64) -> Result<f64> {
    if !(bmse > 0.0) || !(prior_var > 0.0) {
        return invalid(format!(
            "efm needs positive BMSE and prior variance (got {bmse}, {prior_var})"
        ));
    }
    let gain = 1.0 / bmse - 1.0 / prior_var;
    if gain <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / gain)
}

/// Linear estimator `phi_est = a x` with the BMSE-optimal slope.
pub fn linear_estimate(model: &ConditionalModel) -> Result<(EstimatorTable, ErrorReport)> {
    let prior = &model.prior;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, &xv) in model.outcomes.iter().enumerate() {
        let row = model.row(x);
        let mut m0 = 0.0;
        let mut m1 = 0.0;
        for q in 0..row.len() {
            let wp = prior.weights[q] * row[q];
            m0 += wp;
            m1 += wp * prior.nodes[q];
        }
        num += xv * m1;
        den += xv * xv * m0;
    }
    if !(den > 0.0) {
        return Err(Error::NumericalConsistency(
            "linear estimator is undefined: <x^2> vanishes".into(),
        ));
    }
    let a = num / den;
    let pv = prior.variance();
    let report = ErrorReport::new(pv - num * num / den, prior)?;
    let table = EstimatorTable {
        kind: EstimatorKind::Linear,
        outcomes: model.outcomes.clone(),
        estimates: model.outcomes.iter().map(|x| a * x).collect(),
        slope: Some(a),
    };
    Ok((table, report))
}

/// Posterior-mean estimator.
pub fn optimal_bayes_estimate(model: &ConditionalModel) -> Result<(EstimatorTable, ErrorReport)> {
    let prior = &model.prior;
    let mut gain = 0.0;
    let mut estimates = Vec::with_capacity(model.n_outcomes());
    for x in 0..model.n_outcomes() {
        let row = model.row(x);
        let mut m0 = 0.0;
        let mut m1 = 0.0;
        for q in 0..row.len() {
            let wp = prior.weights[q] * row[q];
            m0 += wp;
            m1 += wp * prior.nodes[q];
        }
        if m0 < MIN_MARGINAL {
            estimates.push(0.0);
            continue;
        }
        estimates.push(m1 / m0);
        gain += m1 * m1 / m0;
    }
    let pv = prior.variance();
    let report = ErrorReport::new(pv - gain, prior)?;
    let table = EstimatorTable {
        kind: EstimatorKind::OptimalBayes,
        outcomes: model.outcomes.clone(),
        estimates,
        slope: None,
    };
    Ok((table, report))
}

pub fn estimate(model: &ConditionalModel, kind: EstimatorKind) -> Result<(EstimatorTable, ErrorReport)> {
    match kind {
        EstimatorKind::Linear => linear_estimate(model),
        EstimatorKind::OptimalBayes => optimal_bayes_estimate(model),
    }
}

/// BMSE of an arbitrary estimator table on a model.
pub fn bmse_of(model: &ConditionalModel, table: &EstimatorTable) -> Result<f64> {
    if table.estimates.len() != model.n_outcomes() {
        return Err(Error::DimensionMismatch {
            expected: model.n_outcomes(),
            got: table.estimates.len(),
        });
    }
    let prior = &model.prior;
    let mut total = 0.0;
    for (x, &est) in table.estimates.iter().enumerate() {
        let row = model.row(x);
        for q in 0..row.len() {
            total += prior.weights[q] * row[q] * (est - prior.nodes[q]).powi(2);
        }
    }
    Ok(total)
}

/// How `dP/dphi` is obtained for the Fisher information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeRoute {
    Analytic,
    /// Fourth-order central differences with step `FD_STEP`.
    FiniteDifference,
}

pub const FD_STEP: f64 = 1e-3;

/// Classical Fisher information `F(phi) = sum_x (dP)^2 / P`.
pub fn fisher_information(model: &ConditionalModel, phi: f64, route: DerivativeRoute) -> f64 {
    let pm = &model.phase_model;
    let nx = pm.n_outcomes();
    let mut p = vec![0.0; nx];
    let mut dp = vec![0.0; nx];
    match route {
        DerivativeRoute::Analytic => pm.probabilities_and_derivatives(phi, &mut p, &mut dp),
        DerivativeRoute::FiniteDifference => {
            let h = FD_STEP;
            let mut buf = vec![vec![0.0; nx]; 4];
            for (k, off) in [-2.0, -1.0, 1.0, 2.0].iter().enumerate() {
                pm.probabilities(phi + off * h, &mut buf[k]);
            }
            pm.probabilities(phi, &mut p);
            for x in 0..nx {
                dp[x] = (buf[0][x] - 8.0 * buf[1][x] + 8.0 * buf[2][x] - buf[3][x]) / (12.0 * h);
            }
        }
    }
    p.iter()
        .zip(&dp)
        .map(|(&p, &d)| d * d / p.max(FISHER_FLOOR))
        .sum()
}

/// Prior-averaged Fisher information on the model grid.
pub fn mean_fisher(model: &ConditionalModel, route: DerivativeRoute) -> f64 {
    let prior = &model.prior;
    prior
        .nodes
        .iter()
        .zip(&prior.weights)
        .map(|(&phi, &w)| w * fisher_information(model, phi, route))
        .sum()
}

/// Van Trees bound `1/(F_bar + I)` with `I = 1/delta_phi^2`.
pub fn bcrb(model: &ConditionalModel) -> f64 {
    bcrb_with(model, DerivativeRoute::Analytic)
}

pub fn bcrb_with(model: &ConditionalModel, route: DerivativeRoute) -> f64 {
    1.0 / (mean_fisher(model, route) + model.prior.information())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::PriorModel;
    use crate::protocol::{statistical_model, ProtocolSpec};

    #[test]
    fn single_atom_linear_equals_bayes() {
        for d in [0.2, 0.7, 1.5] {
            let prior = PriorModel::gaussian(d).unwrap();
            let m = statistical_model(&ProtocolSpec::css(1), &prior).unwrap();
            let (_, lin) = linear_estimate(&m).unwrap();
            let (_, opt) = optimal_bayes_estimate(&m).unwrap();
            assert!((lin.bmse - opt.bmse).abs() < 1e-12);
        }
    }

    #[test]
    fn single_atom_bcrb() {
        let prior = PriorModel::gaussian(1.0).unwrap();
        let m = statistical_model(&ProtocolSpec::css(1), &prior).unwrap();
        assert!((bcrb(&m) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn uninformative_model_has_infinite_efm() {
        assert_eq!(efm_transform(0.04, 0.04).unwrap(), f64::INFINITY);
        assert!(efm_transform(0.0, 0.04).is_err());
    }

    #[test]
    fn css_closed_form_through_quadrature() {
        let prior = PriorModel::gaussian(0.3).unwrap();
        let m = statistical_model(&ProtocolSpec::css(10), &prior).unwrap();
        let (t, r) = linear_estimate(&m).unwrap();
        assert!((t.slope.unwrap() - 0.098823).abs() < 5e-7);
        assert!((r.bmse - 0.047486300949).abs() < 1e-11);
        assert!((r.efm - 0.100527).abs() < 5e-7);
    }
}
