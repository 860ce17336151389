//! Synthetic detection data and the replication harness (relative bias,
//! coefficient of variation and credible-interval coverage).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::engine::{self, mean_and_sd, ChainSet, PosteriorSummary, Quantity, RunConfig, SummaryRow};
use crate::error::{Error, Result};
use crate::model::{AugmentedModel, DetectionHistory, DetectionRecord, PhasePlan};
use crate::predictive::{self, PredictionConfig, PredictionResult};

/// Inputs per phase: one value for every phase or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhaseInputs {
    Constant(u64),
    PerPhase(Vec<u64>),
}

impl PhaseInputs {
    pub fn expand(&self, q: usize) -> Result<Vec<u64>> {
        match self {
            PhaseInputs::Constant(t) => Ok(vec![*t; q]),
            PhaseInputs::PerPhase(v) if v.len() == q => Ok(v.clone()),
            PhaseInputs::PerPhase(v) => Err(Error::Config(format!(
                "T lists {} phases but Q = {q}",
                v.len()
            ))),
        }
    }
}

/// Simulation scenario. Field names match the scenario file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario_id: String,
    #[serde(rename = "N")]
    pub n_bugs: i64,
    pub r: f64,
    #[serde(rename = "T")]
    pub inputs: PhaseInputs,
    #[serde(rename = "Q")]
    pub phases: usize,
    pub replicates: usize,
    pub a_s: f64,
    pub b_s: f64,
    pub seed: u64,
}

/// Size hyperparameters calibrated to the detected-bug counts of the four
/// reference scenarios (shape 0.5, mean size 48).
pub const CALIBRATED_A_S: f64 = 0.5;
pub const CALIBRATED_B_S: f64 = 0.5 / 48.0;

impl ScenarioSpec {
    /// One of the four reference scenarios (`set` in 1..=4): 200 bugs, five
    /// phases, `T` in {1000, 2000} and `r` in {0.75e-5, 1.5e-5}.
    pub fn reference(set: usize) -> Self {
        let (t, r) = match set {
            1 => (1000, 0.75e-5),
            2 => (2000, 0.75e-5),
            3 => (1000, 1.5e-5),
            4 => (2000, 1.5e-5),
            _ => panic!("reference scenarios are numbered 1 to 4"),
        };
        Self {
            scenario_id: format!("set{set}"),
            n_bugs: 200,
            r,
            inputs: PhaseInputs::Constant(t),
            phases: 5,
            replicates: 50,
            a_s: CALIBRATED_A_S,
            b_s: CALIBRATED_B_S,
            seed: 1000 + set as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bugs < 1 {
            return Err(Error::Config(format!("N must be at least 1, got {}", self.n_bugs)));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Config(format!("r must lie in (0, 1), got {}", self.r)));
        }
        if self.phases == 0 {
            return Err(Error::Config("Q must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        crate::model::Priors::new(self.a_s, self.b_s)?;
        self.plan().map(|_| ())
    }

    pub fn plan(&self) -> Result<PhasePlan> {
        PhasePlan::observed(self.inputs.expand(self.phases)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Hidden state of a simulated data set, indexed by true bug.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub bug_ids: Vec<String>,
    pub sizes: Vec<u64>,
    pub detection_phase: Vec<Option<usize>>,
    pub detection_count: Vec<u64>,
}

impl Truth {
    pub fn n_bugs(&self) -> usize {
        self.sizes.len()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub history: DetectionHistory,
    pub truth: Truth,
    pub r: f64,
}

/// Simulate one data set. Each bug draws `lambda_i ~ Gamma(a_s, b_s)` and
/// `S_i ~ Poisson(lambda_i)`, then is tested phase by phase with
/// `Binomial(T_j, p_i)` detections until first detected.
pub fn generate(spec: &ScenarioSpec, replicate: usize) -> Result<SimulatedData> {
    let plan = spec.plan()?;
    if !(spec.r >= 0.0 && spec.r < 1.0) {
        return Err(Error::Config(format!("r must lie in [0, 1), got {}", spec.r)));
    }
    let n = usize::try_from(spec.n_bugs)
        .map_err(|_| Error::Config(format!("N must be non-negative, got {}", spec.n_bugs)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(replicate as u64);
    let gamma = Gamma::new(spec.a_s, 1.0 / spec.b_s)
        .map_err(|e| Error::Config(format!("size prior: {e}")))?;
    let log_miss = (-spec.r).ln_1p();

    let width = n.to_string().len().max(4);
    let mut truth = Truth {
        bug_ids: Vec::with_capacity(n),
        sizes: Vec::with_capacity(n),
        detection_phase: Vec::with_capacity(n),
        detection_count: Vec::with_capacity(n),
    };
    let mut records = Vec::new();
    for i in 0..n {
        let lambda: f64 = gamma.sample(&mut rng);
        let size = match Poisson::new(lambda) {
            Ok(p) => p.sample(&mut rng) as u64,
            Err(_) => 0,
        };
        let p = -(size as f64 * log_miss).exp_m1();
        let mut detected = None;
        if p > 0.0 {
            for (j, &t) in plan.observed_inputs().iter().enumerate() {
                let y = Binomial::new(t, p)
                    .map_err(|e| Error::Domain(format!("binomial: {e}")))?
                    .sample(&mut rng);
                if y > 0 {
                    detected = Some((j + 1, y));
                    break;
                }
            }
        }
        let id = format!("bug{:0width$}", i + 1);
        if let Some((phase, count)) = detected {
            records.push(DetectionRecord {
                bug_id: id.clone(),
                phase,
                count,
            });
        }
        truth.bug_ids.push(id);
        truth.sizes.push(size);
        truth.detection_phase.push(detected.map(|d| d.0));
        truth.detection_count.push(detected.map_or(0, |d| d.1));
    }
    Ok(SimulatedData {
        history: DetectionHistory::new(plan, records)?,
        truth,
        r: spec.r,
    })
}

/// `(estimate - truth) / truth`.
pub fn relative_bias(estimate: f64, truth: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::DivisionByZero("relative bias against a zero true value".into()));
    }
    Ok((estimate - truth) / truth)
}

/// Posterior SD (divisor `R`) over posterior mean.
pub fn coefficient_of_variation(draws: &[f64]) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::InsufficientDraws(
            "coefficient of variation needs at least 2 draws".into(),
        ));
    }
    let (mean, sd) = mean_and_sd(draws);
    if mean == 0.0 {
        return Err(Error::DivisionByZero("coefficient of variation with zero mean".into()));
    }
    Ok(sd / mean)
}

/// Fraction of `(lower, upper)` intervals containing `truth`.
pub fn coverage(intervals: &[(f64, f64)], truth: f64) -> f64 {
    if intervals.is_empty() {
        return 0.0;
    }
    let hits = intervals
        .iter()
        .filter(|(lo, hi)| *lo <= truth && truth <= *hi)
        .count();
    hits as f64 / intervals.len() as f64
}

/// Fitting options for the replication harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub run: RunConfig,
    /// Augmentation bound; defaults to twice the true N.
    pub m: Option<usize>,
    /// Posterior prediction per replicate; `None` skips it.
    pub prediction: Option<StudyPrediction>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            run: RunConfig {
                // The harness keeps only the monitored scalars unless
                // prediction is requested.
                store_draws: false,
                ..RunConfig::default()
            },
            m: None,
            prediction: None,
        }
    }
}

/// Prediction inside the study: `J = Q + extra_phases`, future phases reuse
/// the scenario's last input count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPrediction {
    pub extra_phases: usize,
    pub epsilon: f64,
    pub target: f64,
}

impl Default for StudyPrediction {
    fn default() -> Self {
        Self {
            extra_phases: 25,
            epsilon: 100.0,
            target: 0.95,
        }
    }
}

/// Per-parameter accuracy of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterAccuracy {
    pub truth: f64,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
    pub relative_bias: f64,
    pub cv: f64,
    pub covered: bool,
    pub rhat: Option<f64>,
}

impl ParameterAccuracy {
    fn new(row: &SummaryRow, pooled: &[f64], truth: f64) -> Result<Self> {
        Ok(Self {
            truth,
            mean: row.mean,
            q025: row.q025,
            q975: row.q975,
            relative_bias: relative_bias(row.mean, truth)?,
            cv: coefficient_of_variation(pooled)?,
            covered: row.ci_contains(truth),
            rhat: row.rhat,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    pub n_detected: usize,
    pub total_detections: u64,
    pub n: ParameterAccuracy,
    pub r: ParameterAccuracy,
    pub max_rhat: Option<f64>,
    pub crossing_phase: Option<usize>,
}

/// Everything produced for one replicate; `prediction` is set when the
/// study asked for it.
pub struct ReplicateOutcome {
    pub data: SimulatedData,
    pub model: AugmentedModel,
    pub chains: ChainSet,
    pub summary: PosteriorSummary,
    pub prediction: Option<PredictionResult>,
    pub report: ReplicateReport,
}

/// Derived seed of replicate `k`'s fit.
pub fn replicate_seed(base: u64, replicate: usize) -> u64 {
    // SplitMix64 finaliser.
    let mut x = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(replicate as u64 + 1));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn run_replicate(spec: &ScenarioSpec, cfg: &StudyConfig, replicate: usize) -> Result<ReplicateOutcome> {
    let data = generate(spec, replicate)?;
    let m = cfg.m.unwrap_or(2 * spec.n_bugs as usize);
    let model = AugmentedModel::new(data.history.clone(), m)?;
    let mut run = cfg.run.clone();
    run.priors = crate::model::Priors::new(spec.a_s, spec.b_s)?;
    run.sampler.rng_seed = replicate_seed(spec.seed, replicate);
    if cfg.prediction.is_some() {
        run.store_draws = true;
    }
    let chains = engine::run(&model, &run)?;
    let summary = engine::summarize(&chains)?;

    let n_true = data.truth.n_bugs() as f64;
    let n_row = summary.get(Quantity::N.name()).expect("N is always monitored");
    let r_row = summary.get(Quantity::R.name()).expect("r is always monitored");
    let n_acc = ParameterAccuracy::new(n_row, &chains.pooled(Quantity::N), n_true)?;
    let r_acc = ParameterAccuracy::new(r_row, &chains.pooled(Quantity::R), spec.r)?;
    let max_rhat = [n_row.rhat, r_row.rhat]
        .into_iter()
        .flatten()
        .reduce(f64::max);

    let prediction = match &cfg.prediction {
        Some(p) => {
            let plan = model.plan();
            let last = *plan.observed_inputs().last().expect("Q >= 1");
            let pcfg = PredictionConfig::new(plan, vec![last; p.extra_phases], p.epsilon, p.target)?;
            let draws = predictive::draws_from_chains(&chains);
            Some(predictive::predict(&draws, &predictive::rows_of(&model), &pcfg, run.sampler.rng_seed)?)
        }
        None => None,
    };

    let report = ReplicateReport {
        replicate,
        n_detected: data.history.n_detected(),
        total_detections: data.history.total_detections(),
        n: n_acc,
        r: r_acc,
        max_rhat,
        crossing_phase: prediction.as_ref().and_then(|p| p.crossing_phase),
    };
    Ok(ReplicateOutcome {
        data,
        model,
        chains,
        summary,
        prediction,
        report,
    })
}

/// Mean, median and 2.5% / 97.5% quantiles across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: engine::quantile_sorted(&sorted, 0.5),
            q025: engine::quantile_sorted(&sorted, 0.025),
            q975: engine::quantile_sorted(&sorted, 0.975),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterAggregate {
    pub relative_bias: Spread,
    pub cv: Spread,
    pub coverage: f64,
}

impl ParameterAggregate {
    fn of(items: &[ParameterAccuracy]) -> Self {
        let rb: Vec<f64> = items.iter().map(|a| a.relative_bias).collect();
        let cv: Vec<f64> = items.iter().map(|a| a.cv).collect();
        let intervals: Vec<(f64, f64)> = items.iter().map(|a| (a.q025, a.q975)).collect();
        let truth = items.first().map_or(0.0, |a| a.truth);
        Self {
            relative_bias: Spread::of(&rb),
            cv: Spread::of(&cv),
            coverage: coverage(&intervals, truth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: ScenarioSpec,
    pub replicates: Vec<ReplicateReport>,
    /// Detected bugs per data set.
    pub detected: Spread,
    /// Total detections per data set.
    pub detections: Spread,
    pub n: ParameterAggregate,
    pub r: ParameterAggregate,
}

impl StudyReport {
    pub fn from_replicates(scenario: ScenarioSpec, replicates: Vec<ReplicateReport>) -> Self {
        let detected: Vec<f64> = replicates.iter().map(|r| r.n_detected as f64).collect();
        let detections: Vec<f64> = replicates.iter().map(|r| r.total_detections as f64).collect();
        let n: Vec<ParameterAccuracy> = replicates.iter().map(|r| r.n).collect();
        let r: Vec<ParameterAccuracy> = replicates.iter().map(|r| r.r).collect();
        Self {
            scenario,
            detected: Spread::of(&detected),
            detections: Spread::of(&detections),
            n: ParameterAggregate::of(&n),
            r: ParameterAggregate::of(&r),
            replicates,
        }
    }
}

/// Run `spec.replicates` replicates, handing each outcome to `inspect`
/// before it is dropped.
pub fn run_study<F>(spec: &ScenarioSpec, cfg: &StudyConfig, mut inspect: F) -> Result<StudyReport>
where
    F: FnMut(&ReplicateOutcome),
{
    spec.validate()?;
    let mut reports = Vec::with_capacity(spec.replicates);
    for k in 0..spec.replicates {
        let outcome = run_replicate(spec, cfg, k)?;
        inspect(&outcome);
        reports.push(outcome.report);
    }
    Ok(StudyReport::from_replicates(spec.clone(), reports))
}
