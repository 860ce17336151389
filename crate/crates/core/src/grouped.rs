//! Grouped-bugs variant: collocated bugs share one eventual size.
//!
//! Each observed group `g` has a detection phase `j(g)`, a detected count
//! `y*_g` and a size `d_g` (bugs in the group). Groups are augmented to
//! `M_G` rows exactly like individual bugs, so inference over
//! `(r*, psi, z_g, S*_g, lambda_g)` reuses the ungrouped samplers. The
//! number of undetected bugs `a_g` in an included augmented group is drawn
//! afterwards from a zero-truncated Poisson, giving
//! `N* = n + sum a_g z_g` bugs and the grouped remaining size
//! `B_Q = sum S*_g z_g d_g (1 - u_gQ)` with `d_g = a_g` for augmented groups.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::engine::{self, ChainSet, PosteriorSummary, Quantity, RunConfig, SummaryRow};
use crate::error::{Error, Result};
use crate::model::{
    log_likelihood, AugmentedModel, DetectionHistory, DetectionRecord, ParameterDraw, PhasePlan,
};
use crate::predictive::{draw_rng, PredictiveDraw};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedGroup {
    pub group_id: String,
    pub phase: usize,
    /// `y*_g`.
    pub detected: u64,
    /// `d_g`.
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedData {
    plan: PhasePlan,
    groups: Vec<ObservedGroup>,
    m_groups: usize,
    /// Bugs found outside the modelled phases, added to `n` as a constant.
    detected_offset: u64,
}

impl GroupedData {
    pub fn new(
        plan: PhasePlan,
        mut groups: Vec<ObservedGroup>,
        m_groups: usize,
        detected_offset: u64,
    ) -> Result<Self> {
        groups.sort_by(|a, b| a.group_id.cmp(&b.group_id));
        if let Some(g) = groups.iter().find(|g| g.size == 0) {
            return Err(Error::validation(
                None,
                format!("group `{}` has size 0; every group holds at least one bug", g.group_id),
            ));
        }
        if m_groups <= groups.len() {
            return Err(Error::Config(format!(
                "group augmentation bound M_G = {m_groups} must exceed the {} observed groups",
                groups.len()
            )));
        }
        // Delegate the phase and count checks.
        let data = Self {
            plan,
            groups,
            m_groups,
            detected_offset,
        };
        data.history()?;
        Ok(data)
    }

    pub fn plan(&self) -> &PhasePlan {
        &self.plan
    }

    pub fn groups(&self) -> &[ObservedGroup] {
        &self.groups
    }

    pub fn m_groups(&self) -> usize {
        self.m_groups
    }

    pub fn n_groups_observed(&self) -> usize {
        self.groups.len()
    }

    pub fn detected_offset(&self) -> u64 {
        self.detected_offset
    }

    /// `n`: bugs in observed groups plus the constant offset.
    pub fn n_detected_bugs(&self) -> u64 {
        self.groups.iter().map(|g| g.size).sum::<u64>() + self.detected_offset
    }

    pub fn mean_group_size(&self) -> f64 {
        if self.groups.is_empty() {
            return 1.0;
        }
        self.groups.iter().map(|g| g.size).sum::<u64>() as f64 / self.groups.len() as f64
    }

    fn history(&self) -> Result<DetectionHistory> {
        let records = self
            .groups
            .iter()
            .map(|g| DetectionRecord {
                bug_id: g.group_id.clone(),
                phase: g.phase,
                count: g.detected,
            })
            .collect();
        DetectionHistory::new(self.plan.clone(), records)
    }

    /// Group-level augmented model (rows are groups, in `group_id` order).
    pub fn augmented_model(&self) -> Result<AugmentedModel> {
        AugmentedModel::new(self.history()?, self.m_groups)
    }

    /// `d_g` for observed rows, `None` for augmented rows.
    pub fn observed_sizes(&self) -> impl Iterator<Item = u64> + '_ {
        self.groups.iter().map(|g| g.size)
    }
}

/// One grouped posterior state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedDraw {
    pub r_star: f64,
    pub psi: f64,
    pub z: Vec<bool>,
    pub sizes: Vec<u64>,
    pub lambda: Vec<f64>,
    /// `a_g` for augmented rows (0 where excluded); entries for observed
    /// groups are unused.
    pub undetected_counts: Vec<u64>,
}

impl GroupedDraw {
    pub fn from_parameters(draw: &ParameterDraw) -> Self {
        Self {
            r_star: draw.r,
            psi: draw.psi,
            z: draw.z.clone(),
            sizes: draw.sizes.clone(),
            lambda: draw.lambda.clone(),
            undetected_counts: vec![0; draw.z.len()],
        }
    }

    pub fn parameters(&self) -> ParameterDraw {
        ParameterDraw {
            r: self.r_star,
            psi: self.psi,
            z: self.z.clone(),
            sizes: self.sizes.clone(),
            lambda: self.lambda.clone(),
        }
    }

    /// `N_G = sum z_g`.
    pub fn n_groups(&self) -> usize {
        self.z.iter().filter(|&&z| z).count()
    }
}

pub fn grouped_log_likelihood(draw: &GroupedDraw, data: &GroupedData) -> Result<f64> {
    Ok(log_likelihood(&draw.parameters(), &data.augmented_model()?))
}

/// `N* = n + sum over augmented groups of a_g z_g`.
pub fn total_bugs(draw: &GroupedDraw, data: &GroupedData) -> u64 {
    let n_obs = data.n_groups_observed();
    let undetected: u64 = (n_obs..draw.z.len())
        .filter(|&g| draw.z[g])
        .map(|g| draw.undetected_counts[g])
        .sum();
    data.n_detected_bugs() + undetected
}

/// Grouped remaining size after the observed phases. Observed groups are
/// detected by phase `Q`, so only included augmented groups contribute,
/// each with `S*_g a_g`.
pub fn grouped_remaining_size(draw: &GroupedDraw, data: &GroupedData) -> u64 {
    let n_obs = data.n_groups_observed();
    (n_obs..draw.z.len())
        .filter(|&g| draw.z[g])
        .map(|g| draw.sizes[g] * draw.undetected_counts[g])
        .sum()
}

/// Zero-truncated Poisson law of the number of bugs in an undetected group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupCountPrior {
    /// Rate of the untruncated Poisson; 0 means every group is a singleton.
    pub rate: f64,
}

impl GroupCountPrior {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::Config(format!("group count rate must be >= 0, got {rate}")));
        }
        Ok(Self { rate })
    }

    /// Rate whose zero-truncated mean `rate / (1 - e^-rate)` equals `mean`.
    pub fn with_mean(mean: f64) -> Result<Self> {
        if !(mean >= 1.0 && mean.is_finite()) {
            return Err(Error::Config(format!("mean group size must be >= 1, got {mean}")));
        }
        if mean - 1.0 < 1e-12 {
            return Ok(Self { rate: 0.0 });
        }
        let ztp_mean = |l: f64| l / -(-l).exp_m1();
        let (mut lo, mut hi) = (0.0, mean);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ztp_mean(mid) < mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self { rate: 0.5 * (lo + hi) })
    }

    pub fn mean(&self) -> f64 {
        if self.rate == 0.0 {
            1.0
        } else {
            self.rate / -(-self.rate).exp_m1()
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let l = self.rate;
        if l == 0.0 {
            return 1;
        }
        if l > 1.0 {
            let pois = Poisson::new(l).expect("positive finite rate");
            loop {
                let k = pois.sample(rng) as u64;
                if k > 0 {
                    return k;
                }
            }
        }
        // Inverse CDF for small rates, where rejection would be slow.
        let u: f64 = rng.random();
        let norm = -(-l).exp_m1();
        let mut k = 1u64;
        let mut pmf = (-l).exp() * l / norm;
        let mut cdf = pmf;
        while u > cdf && k < 10_000 {
            k += 1;
            pmf *= l / k as f64;
            cdf += pmf;
        }
        k
    }
}

/// Draw `a_g` for every included augmented group; excluded groups get 0.
pub fn sample_a_g<R: Rng + ?Sized>(
    draw: &mut GroupedDraw,
    data: &GroupedData,
    prior: &GroupCountPrior,
    rng: &mut R,
) {
    let n_obs = data.n_groups_observed();
    for g in 0..draw.z.len() {
        draw.undetected_counts[g] = if g >= n_obs && draw.z[g] { prior.sample(rng) } else { 0 };
    }
}

/// Stream offset separating group-count draws from prediction draws.
const GROUP_COUNT_STREAM: u64 = 0x6772_6f75_7073;

/// Per-iteration grouped quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupedScalars {
    pub n_groups: usize,
    pub n_bugs: u64,
    pub psi: f64,
    pub r: f64,
    pub total_size: u64,
    pub remaining_size: u64,
}

pub struct GroupedFit {
    pub data: GroupedData,
    pub model: AugmentedModel,
    pub prior: GroupCountPrior,
    pub chains: ChainSet,
    /// Per chain, per retained iteration.
    pub scalars: Vec<Vec<GroupedScalars>>,
    /// Per chain, per retained iteration: `d_g` for observed rows and `a_g`
    /// (or 0) for augmented rows.
    pub multiplicity: Vec<Vec<Vec<u64>>>,
}

pub const GROUPED_QUANTITIES: [&str; 6] = ["N_G", "N", "psi", "r", "total_size", "remaining_size"];

impl GroupedFit {
    pub fn series(&self, name: &str) -> Vec<Vec<f64>> {
        self.scalars
            .iter()
            .map(|c| {
                c.iter()
                    .map(|s| match name {
                        "N_G" => s.n_groups as f64,
                        "N" => s.n_bugs as f64,
                        "psi" => s.psi,
                        "r" => s.r,
                        "total_size" => s.total_size as f64,
                        "remaining_size" => s.remaining_size as f64,
                        _ => panic!("unknown grouped quantity `{name}`"),
                    })
                    .collect()
            })
            .collect()
    }

    pub fn summarize(&self) -> Result<PosteriorSummary> {
        let rows = GROUPED_QUANTITIES
            .iter()
            .map(|q| SummaryRow::from_chains(q, &self.series(q)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PosteriorSummary { rows })
    }

    pub fn predictive_draws(&self) -> Vec<PredictiveDraw> {
        let mut out = Vec::with_capacity(self.chains.total_draws());
        for (c, chain) in self.chains.chains.iter().enumerate() {
            for (k, (&it, d)) in chain.iterations.iter().zip(&chain.draws).enumerate() {
                out.push(PredictiveDraw {
                    chain: chain.index,
                    iteration: it,
                    r: d.r,
                    sizes: d.effective_sizes(),
                    multiplicity: Some(self.multiplicity[c][k].clone()),
                });
            }
        }
        out
    }
}

/// Fit the grouped model and draw `a_g` for every retained state.
pub fn fit_grouped(data: &GroupedData, cfg: &RunConfig, prior: GroupCountPrior) -> Result<GroupedFit> {
    let model = data.augmented_model()?;
    let mut run = cfg.clone();
    run.store_draws = true;
    let chains = engine::run(&model, &run)?;
    let n_obs = data.n_groups_observed();
    let observed: Vec<u64> = data.observed_sizes().collect();
    let mut scalars = Vec::with_capacity(chains.chains.len());
    let mut multiplicity = Vec::with_capacity(chains.chains.len());
    for chain in &chains.chains {
        let mut cs = Vec::with_capacity(chain.draws.len());
        let mut cm = Vec::with_capacity(chain.draws.len());
        for (&it, d) in chain.iterations.iter().zip(&chain.draws) {
            let mut rng = draw_rng(run.sampler.rng_seed ^ GROUP_COUNT_STREAM, chain.index, it);
            let mut g = GroupedDraw::from_parameters(d);
            sample_a_g(&mut g, data, &prior, &mut rng);
            let mut mult = g.undetected_counts.clone();
            mult[..n_obs].copy_from_slice(&observed);
            let total_size = g
                .z
                .iter()
                .zip(&g.sizes)
                .zip(&mult)
                .filter(|((&z, _), _)| z)
                .map(|((_, &s), &w)| s * w)
                .sum();
            cs.push(GroupedScalars {
                n_groups: g.n_groups(),
                n_bugs: total_bugs(&g, data),
                psi: g.psi,
                r: g.r_star,
                total_size,
                remaining_size: grouped_remaining_size(&g, data),
            });
            cm.push(mult);
        }
        scalars.push(cs);
        multiplicity.push(cm);
    }
    debug_assert!(chains.chains.iter().all(|c| c.series(Quantity::N).len() == c.draws.len()));
    Ok(GroupedFit {
        data: data.clone(),
        model,
        prior,
        chains,
        scalars,
        multiplicity,
    })
}
