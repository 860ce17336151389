//! Posterior-predictive simulation of future testing phases.
//!
//! For every retained draw the bugs still undetected after the observed
//! phases are tested phase by phase until first detection. This yields the
//! detected and remaining eventual sizes `A_j` and `B_j` for `j = 1..J`, the
//! per-draw stopping phase (first `B_k < epsilon`) and the reliability curve
//! `gamma_j(epsilon)`, the fraction of draws with `B_j <= epsilon`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::ChainSet;
use crate::error::{Error, Result};
use crate::model::{AugmentedModel, PhasePlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    /// Observed phases followed by the future phases.
    pub plan: PhasePlan,
    /// Remaining-size threshold; `f64::INFINITY` is allowed.
    pub epsilon: f64,
    /// Reliability level whose first crossing is the headline stopping phase.
    pub target: f64,
}

impl PredictionConfig {
    pub fn new(observed: &PhasePlan, future: Vec<u64>, epsilon: f64, target: f64) -> Result<Self> {
        if future.is_empty() {
            return Err(Error::Config("the horizon must extend past the observed phases".into()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(target > 0.0 && target <= 1.0) {
            return Err(Error::Config(format!("reliability target must lie in (0, 1], got {target}")));
        }
        let plan = observed.with_future(&future);
        if plan.horizon() > u16::MAX as usize {
            return Err(Error::Config("horizon is limited to 65535 phases".into()));
        }
        Ok(Self { plan, epsilon, target })
    }

    /// Horizon `J` with every future phase using `inputs` test cases.
    pub fn uniform(observed: &PhasePlan, horizon: usize, inputs: u64, epsilon: f64, target: f64) -> Result<Self> {
        let q = observed.observed_phases();
        if horizon <= q {
            return Err(Error::Config(format!(
                "horizon {horizon} must exceed the {q} observed phases"
            )));
        }
        Self::new(observed, vec![inputs; horizon - q], epsilon, target)
    }

    pub fn future_inputs(&self) -> &[u64] {
        &self.plan.all_inputs()[self.plan.observed_phases()..]
    }
}

/// What prediction needs from one posterior draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDraw {
    pub chain: usize,
    pub iteration: usize,
    pub r: f64,
    /// `S_i z_i` per row.
    pub sizes: Vec<u64>,
    /// Bugs represented by each row (group sizes); `None` means one each.
    pub multiplicity: Option<Vec<u64>>,
}

impl PredictiveDraw {
    fn weight(&self, i: usize) -> u64 {
        self.multiplicity.as_ref().map_or(1, |m| m[i])
    }

    /// Total eventual size `sum S_i z_i d_i`.
    pub fn total_size(&self) -> u64 {
        (0..self.sizes.len()).map(|i| self.sizes[i] * self.weight(i)).sum()
    }
}

/// Observed detection phase of every row of the model.
pub fn rows_of(model: &AugmentedModel) -> Vec<Option<usize>> {
    model.detection_phases()
}

/// Predictive draws from the stored states of a run.
pub fn draws_from_chains(chains: &ChainSet) -> Vec<PredictiveDraw> {
    chains
        .chains
        .iter()
        .flat_map(|c| {
            c.iterations.iter().zip(&c.draws).map(move |(&it, d)| PredictiveDraw {
                chain: c.index,
                iteration: it,
                r: d.r,
                sizes: d.effective_sizes(),
                multiplicity: None,
            })
        })
        .collect()
}

/// Per-draw RNG, keyed by the draw's chain and iteration so results do not
/// depend on draw order.
pub fn draw_rng(seed: u64, chain: usize, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((chain as u64) << 40) | iteration as u64);
    rng
}

/// Detection phase of every row: observed rows keep their phase; included
/// undetected rows are tested in phases `Q+1..=J` with removal on first
/// detection. `None` means not detected within the horizon.
pub fn replicate_detections<R: Rng + ?Sized>(
    draw: &PredictiveDraw,
    observed: &[Option<usize>],
    plan: &PhasePlan,
    rng: &mut R,
) -> Vec<Option<usize>> {
    let q = plan.observed_phases();
    let log_miss = (-draw.r).ln_1p();
    observed
        .iter()
        .zip(&draw.sizes)
        .map(|(&obs, &size)| {
            if obs.is_some() {
                return obs;
            }
            if size == 0 {
                return None;
            }
            let per_input = size as f64 * log_miss;
            for j in q + 1..=plan.horizon() {
                let t = plan.inputs(j);
                if t == 0 {
                    continue;
                }
                let p_detect = -(t as f64 * per_input).exp_m1();
                if rng.random::<f64>() < p_detect {
                    return Some(j);
                }
            }
            None
        })
        .collect()
}

/// `A_j` and `B_j` for `j = 1..=horizon`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectories {
    pub detected: Vec<u64>,
    pub remaining: Vec<u64>,
}

pub fn size_trajectories(draw: &PredictiveDraw, phases: &[Option<usize>], horizon: usize) -> Trajectories {
    // Size first detected in each phase.
    let mut newly = vec![0u64; horizon + 1];
    let mut never = 0u64;
    for (i, phase) in phases.iter().enumerate() {
        let s = draw.sizes[i] * draw.weight(i);
        match phase {
            Some(j) if *j <= horizon => newly[*j] += s,
            _ => never += s,
        }
    }
    let total: u64 = newly.iter().sum::<u64>() + never;
    let mut detected = Vec::with_capacity(horizon);
    let mut acc = 0;
    for add in &newly[1..] {
        acc += add;
        detected.push(acc);
    }
    let remaining = detected.iter().map(|a| total - a).collect();
    Trajectories { detected, remaining }
}

/// First phase `k` (1-based) with `B_k < epsilon`; `None` if censored.
pub fn stopping_phase(remaining: &[u64], epsilon: f64) -> Option<usize> {
    remaining
        .iter()
        .position(|&b| (b as f64) < epsilon)
        .map(|k| k + 1)
}

/// `gamma_j(epsilon)`: fraction of draws with `B_j <= epsilon`.
pub fn reliability_curve<T: AsRef<[u64]>>(remaining: &[T], epsilon: f64) -> Vec<f64> {
    let Some(first) = remaining.first() else {
        return Vec::new();
    };
    let horizon = first.as_ref().len();
    let mut hits = vec![0usize; horizon];
    for b in remaining {
        for (j, &v) in b.as_ref().iter().enumerate() {
            if v as f64 <= epsilon {
                hits[j] += 1;
            }
        }
    }
    hits.iter().map(|&h| h as f64 / remaining.len() as f64).collect()
}

/// First phase whose reliability reaches `target`.
pub fn crossing_phase(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&g| g >= target).map(|j| j + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawPrediction {
    pub chain: usize,
    pub iteration: usize,
    /// Detection phase per row, 0 for not detected within the horizon.
    pub detection_phase: Vec<u16>,
    pub trajectories: Trajectories,
    pub stopping_phase: Option<usize>,
}

impl DrawPrediction {
    /// `u_ij`: whether row `i` is detected on or before phase `j`.
    pub fn detected_by(&self, row: usize, phase: usize) -> bool {
        let p = self.detection_phase[row];
        p != 0 && p as usize <= phase
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub epsilon: f64,
    pub target: f64,
    pub plan: PhasePlan,
    pub draws: Vec<DrawPrediction>,
    /// `gamma_j(epsilon)` for `j = 1..=J`.
    pub reliability: Vec<f64>,
    /// Headline stopping phase: first `j` with `gamma_j >= target`.
    pub crossing_phase: Option<usize>,
}

impl PredictionResult {
    pub fn remaining(&self) -> Vec<&[u64]> {
        self.draws.iter().map(|d| d.trajectories.remaining.as_slice()).collect()
    }

    /// Reliability curve at another threshold, from the same replicates.
    pub fn reliability_at(&self, epsilon: f64) -> Vec<f64> {
        reliability_curve(&self.remaining(), epsilon)
    }

    /// Counts of per-draw stopping phases `1..=J` followed by the censored
    /// count (`J+`).
    pub fn stopping_distribution(&self) -> (Vec<usize>, usize) {
        let mut counts = vec![0; self.plan.horizon()];
        let mut censored = 0;
        for d in &self.draws {
            match d.stopping_phase {
                Some(k) => counts[k - 1] += 1,
                None => censored += 1,
            }
        }
        (counts, censored)
    }

    pub fn censored_fraction(&self) -> f64 {
        let (_, censored) = self.stopping_distribution();
        censored as f64 / self.draws.len().max(1) as f64
    }
}

/// Replicate future detections for every draw and reduce to curves.
pub fn predict(
    draws: &[PredictiveDraw],
    observed: &[Option<usize>],
    cfg: &PredictionConfig,
    seed: u64,
) -> Result<PredictionResult> {
    if draws.is_empty() {
        return Err(Error::InsufficientDraws("prediction needs at least one draw".into()));
    }
    if let Some(bad) = draws.iter().find(|d| d.sizes.len() != observed.len()) {
        return Err(Error::Config(format!(
            "draw (chain {}, iteration {}) has {} rows, model has {}",
            bad.chain,
            bad.iteration,
            bad.sizes.len(),
            observed.len()
        )));
    }
    let horizon = cfg.plan.horizon();
    let per_draw: Vec<DrawPrediction> = draws
        .par_iter()
        .map(|d| {
            let mut rng = draw_rng(seed, d.chain, d.iteration);
            let phases = replicate_detections(d, observed, &cfg.plan, &mut rng);
            let trajectories = size_trajectories(d, &phases, horizon);
            DrawPrediction {
                chain: d.chain,
                iteration: d.iteration,
                detection_phase: phases.iter().map(|p| p.map_or(0, |j| j as u16)).collect(),
                stopping_phase: stopping_phase(&trajectories.remaining, cfg.epsilon),
                trajectories,
            }
        })
        .collect();
    let remaining: Vec<&[u64]> = per_draw.iter().map(|d| d.trajectories.remaining.as_slice()).collect();
    let reliability = reliability_curve(&remaining, cfg.epsilon);
    let crossing = crossing_phase(&reliability, cfg.target);
    Ok(PredictionResult {
        epsilon: cfg.epsilon,
        target: cfg.target,
        plan: cfg.plan.clone(),
        draws: per_draw,
        reliability,
        crossing_phase: crossing,
    })
}
