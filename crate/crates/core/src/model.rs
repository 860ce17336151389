//! Size-biased detection model with data augmentation.
//!
//! A bug `i` with eventual size `S_i` is detected by a single test input with
//! probability `p_i = 1 - (1 - r)^S_i`. Within phase `j` the bug is exposed to
//! `T_j` inputs and yields `y_ij ~ Binomial(T_j, p_i z_i)` detections; once a
//! bug is detected it is removed at the end of that phase. The `n` observed
//! histories are padded with `M - n` all-zero rows whose inclusion indicators
//! `z_i ~ Bernoulli(psi)` give the population size `N = sum z_i`.
//!
//! Sizes follow a Poisson-Gamma mixture, `S_i ~ Poisson(lambda_i)` with
//! `lambda_i ~ Gamma(a_s, b_s)`; `r` and `psi` are Uniform(0, 1).
//!
//! All densities are evaluated in log space. `(1 - p)^T` is computed as
//! `exp(T * S * ln(1 - r))`, so nothing underflows for `r` around `1e-5`.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::{ln_binomial, ln_factorial};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Test inputs per phase. The first `observed` entries are the phases that
/// produced data; any further entries are future phases used for prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    inputs: Vec<u64>,
    observed: usize,
}

impl PhasePlan {
    /// Plan whose horizon equals the observed phases.
    pub fn observed(inputs: Vec<u64>) -> Result<Self> {
        let q = inputs.len();
        Self::new(inputs, q)
    }

    pub fn new(inputs: Vec<u64>, observed: usize) -> Result<Self> {
        if observed == 0 {
            return Err(Error::Domain("at least one observed phase is required".into()));
        }
        if inputs.len() < observed {
            return Err(Error::Domain(format!(
                "horizon {} is shorter than the {observed} observed phases",
                inputs.len()
            )));
        }
        Ok(Self { inputs, observed })
    }

    /// Same observed phases, extended with future phases.
    pub fn with_future(&self, future: &[u64]) -> Self {
        let mut inputs = self.inputs[..self.observed].to_vec();
        inputs.extend_from_slice(future);
        Self {
            inputs,
            observed: self.observed,
        }
    }

    /// Number of observed phases, `Q`.
    pub fn observed_phases(&self) -> usize {
        self.observed
    }

    /// Total number of phases, `J`.
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Inputs of the 1-based phase `j`.
    pub fn inputs(&self, phase: usize) -> u64 {
        self.inputs[phase - 1]
    }

    pub fn all_inputs(&self) -> &[u64] {
        &self.inputs
    }

    pub fn observed_inputs(&self) -> &[u64] {
        &self.inputs[..self.observed]
    }

    /// Inputs in observed phases strictly before the 1-based `phase`.
    pub fn inputs_before(&self, phase: usize) -> u64 {
        self.inputs[..phase - 1].iter().sum()
    }

    pub fn total_observed_inputs(&self) -> u64 {
        self.observed_inputs().iter().sum()
    }
}

/// One detected bug: the phase of its (only) detecting phase and the number
/// of detections in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub bug_id: String,
    pub phase: usize,
    pub count: u64,
}

/// Detection data for the observed bugs, ordered by `bug_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionHistory {
    plan: PhasePlan,
    records: Vec<DetectionRecord>,
}

impl DetectionHistory {
    pub fn new(plan: PhasePlan, mut records: Vec<DetectionRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.bug_id.cmp(&b.bug_id));
        for pair in records.windows(2) {
            if pair[0].bug_id == pair[1].bug_id {
                return Err(Error::validation(
                    None,
                    format!("bug `{}` is recorded more than once", pair[0].bug_id),
                ));
            }
        }
        for rec in &records {
            if rec.phase == 0 || rec.phase > plan.observed_phases() {
                return Err(Error::validation(
                    None,
                    format!(
                        "bug `{}` detected in phase {} outside 1..={}",
                        rec.bug_id,
                        rec.phase,
                        plan.observed_phases()
                    ),
                ));
            }
            let trials = plan.inputs(rec.phase);
            if rec.count == 0 || rec.count > trials {
                return Err(Error::validation(
                    None,
                    format!(
                        "bug `{}` has {} detections in phase {} with {trials} inputs",
                        rec.bug_id, rec.count, rec.phase
                    ),
                ));
            }
        }
        Ok(Self { plan, records })
    }

    pub fn plan(&self) -> &PhasePlan {
        &self.plan
    }

    pub fn records(&self) -> &[DetectionRecord] {
        &self.records
    }

    /// Number of detected bugs, `n`.
    pub fn n_detected(&self) -> usize {
        self.records.len()
    }

    pub fn total_detections(&self) -> u64 {
        self.records.iter().map(|r| r.count).sum()
    }
}

/// The phase and count of an observed detection, with the binomial
/// coefficient precomputed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowDetection {
    pub phase: usize,
    pub count: u64,
    pub trials: u64,
    log_choose: f64,
}

/// Per-row sufficient statistics of the augmented data set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    /// Inputs the bug survived without detection while present.
    pub exposure: u64,
    pub detection: Option<RowDetection>,
}

impl Row {
    pub fn is_detected(&self) -> bool {
        self.detection.is_some()
    }

    /// Log-likelihood of this row's history given inclusion, with
    /// `log_miss = ln(1 - r)`.
    pub fn log_likelihood(&self, log_miss: f64, size: u64) -> f64 {
        let s = size as f64;
        let log_not_p = s * log_miss;
        let survival = if self.exposure == 0 {
            0.0
        } else {
            self.exposure as f64 * log_not_p
        };
        match self.detection {
            None => survival,
            Some(det) => {
                if size == 0 {
                    return f64::NEG_INFINITY;
                }
                let log_p = (-log_not_p.exp_m1()).ln();
                let misses = (det.trials - det.count) as f64;
                let miss_term = if misses == 0.0 { 0.0 } else { misses * log_not_p };
                survival + det.log_choose + det.count as f64 * log_p + miss_term
            }
        }
    }
}

/// Observed histories padded with all-zero rows up to `M`.
///
/// Rows `0..n` are the detected bugs in `bug_id` order; rows `n..M` are the
/// augmented pseudo-bugs.
#[derive(Debug, Clone)]
pub struct AugmentedModel {
    history: DetectionHistory,
    rows: Vec<Row>,
}

impl AugmentedModel {
    pub fn new(history: DetectionHistory, m: usize) -> Result<Self> {
        let n = history.n_detected();
        if m <= n {
            return Err(Error::Config(format!(
                "augmentation bound M = {m} must exceed the {n} detected bugs"
            )));
        }
        let plan = history.plan();
        let mut rows = Vec::with_capacity(m);
        for rec in history.records() {
            let trials = plan.inputs(rec.phase);
            rows.push(Row {
                exposure: plan.inputs_before(rec.phase),
                detection: Some(RowDetection {
                    phase: rec.phase,
                    count: rec.count,
                    trials,
                    log_choose: ln_binomial(trials, rec.count),
                }),
            });
        }
        let undetected = Row {
            exposure: plan.total_observed_inputs(),
            detection: None,
        };
        rows.resize(m, undetected);
        Ok(Self { history, rows })
    }

    pub fn history(&self) -> &DetectionHistory {
        &self.history
    }

    pub fn plan(&self) -> &PhasePlan {
        self.history.plan()
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    /// Augmentation bound `M`.
    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn n_detected(&self) -> usize {
        self.history.n_detected()
    }

    pub fn is_detected(&self, i: usize) -> bool {
        self.rows[i].is_detected()
    }

    /// Observed detection phase of each row (`None` for augmented rows).
    pub fn detection_phases(&self) -> Vec<Option<usize>> {
        self.rows
            .iter()
            .map(|r| r.detection.map(|d| d.phase))
            .collect()
    }
}

/// Hyperparameters of the Poisson-Gamma size prior. `r` and `psi` carry
/// Uniform(0, 1) priors and need no parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    /// Gamma shape for `lambda_i`.
    pub a_s: f64,
    /// Gamma rate for `lambda_i`.
    pub b_s: f64,
}

impl Priors {
    pub fn new(a_s: f64, b_s: f64) -> Result<Self> {
        let p = Self { a_s, b_s };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_s > 0.0 && self.a_s.is_finite() && self.b_s > 0.0 && self.b_s.is_finite()) {
            return Err(Error::Config(format!(
                "size prior needs a_s > 0 and b_s > 0, got a_s = {}, b_s = {}",
                self.a_s, self.b_s
            )));
        }
        Ok(())
    }

    /// Prior mean of `lambda_i`, which is also the prior mean size.
    pub fn mean_size(&self) -> f64 {
        self.a_s / self.b_s
    }
}

/// One state of the sampler: `theta = (r, psi, z, S, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDraw {
    pub r: f64,
    pub psi: f64,
    pub z: Vec<bool>,
    pub sizes: Vec<u64>,
    pub lambda: Vec<f64>,
}

impl ParameterDraw {
    /// Population size `N = sum z_i`.
    pub fn n_included(&self) -> usize {
        self.z.iter().filter(|&&z| z).count()
    }

    /// Total eventual size of included bugs, `sum S_i z_i`.
    pub fn total_size(&self) -> u64 {
        self.z
            .iter()
            .zip(&self.sizes)
            .filter(|(&z, _)| z)
            .map(|(_, &s)| s)
            .sum()
    }

    /// Eventual size of included bugs not detected in the observed phases.
    pub fn remaining_size(&self, model: &AugmentedModel) -> u64 {
        model
            .rows()
            .iter()
            .zip(self.z.iter().zip(&self.sizes))
            .filter(|(row, (&z, _))| z && !row.is_detected())
            .map(|(_, (_, &s))| s)
            .sum()
    }

    /// `S_i z_i` for every row.
    pub fn effective_sizes(&self) -> Vec<u64> {
        self.z
            .iter()
            .zip(&self.sizes)
            .map(|(&z, &s)| if z { s } else { 0 })
            .collect()
    }
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in (0, 1), got {x}")))
    }
}

/// Per-input detection probability `1 - (1 - r)^S` of a bug of size `S`.
pub fn detection_probability(r: f64, size: u64) -> Result<f64> {
    check_unit("r", r)?;
    Ok(-(size as f64 * (-r).ln_1p()).exp_m1())
}

/// Joint log-likelihood of the augmented detection data.
///
/// Detected rows must be included and have positive size; otherwise the
/// configuration is impossible and `-inf` is returned.
pub fn log_likelihood(draw: &ParameterDraw, model: &AugmentedModel) -> f64 {
    if !(draw.r > 0.0 && draw.r < 1.0) {
        return f64::NEG_INFINITY;
    }
    let log_miss = (-draw.r).ln_1p();
    let mut total = 0.0;
    for (i, row) in model.rows().iter().enumerate() {
        if !draw.z[i] {
            if row.is_detected() {
                return f64::NEG_INFINITY;
            }
            continue;
        }
        total += row.log_likelihood(log_miss, draw.sizes[i]);
        if total == f64::NEG_INFINITY {
            return total;
        }
    }
    total
}

pub(crate) fn ln_poisson_pmf(k: u64, lambda: f64) -> f64 {
    if k == 0 {
        -lambda
    } else {
        k as f64 * lambda.ln() - lambda - ln_factorial(k)
    }
}

pub(crate) fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log prior density of a draw: Bernoulli inclusion, Poisson sizes, Gamma
/// rates, and flat `r` and `psi` on (0, 1).
pub fn log_prior(draw: &ParameterDraw, priors: &Priors) -> f64 {
    let unit = |x: f64| x > 0.0 && x < 1.0;
    if !unit(draw.r) || !unit(draw.psi) {
        return f64::NEG_INFINITY;
    }
    let (ln_psi, ln_not_psi) = (draw.psi.ln(), (-draw.psi).ln_1p());
    let mut total = 0.0;
    for ((&z, &s), &lambda) in draw.z.iter().zip(&draw.sizes).zip(&draw.lambda) {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return f64::NEG_INFINITY;
        }
        total += if z { ln_psi } else { ln_not_psi };
        total += ln_poisson_pmf(s, lambda);
        total += ln_gamma_pdf(lambda, priors.a_s, priors.b_s);
    }
    total
}

/// Unnormalised log posterior.
pub fn log_posterior(draw: &ParameterDraw, model: &AugmentedModel, priors: &Priors) -> f64 {
    let lp = log_prior(draw, priors);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + log_likelihood(draw, model)
}
