//! Multi-chain orchestration, burn-in and thinning, convergence diagnostics
//! and posterior summaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_posterior, AugmentedModel, ParameterDraw, Priors};
use crate::samplers::{ChainSampler, KernelStats, SamplerConfig};

/// R-hat above this flags non-convergence.
pub const RHAT_THRESHOLD: f64 = 1.1;

const MAX_INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub n_chains: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Keep the full retained states (needed for posterior prediction).
    pub store_draws: bool,
    pub sampler: SamplerConfig,
    pub priors: Priors,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            n_iterations: 10_000,
            burn_in: 5_000,
            thin: 1,
            store_draws: true,
            sampler: SamplerConfig::default(),
            priors: Priors { a_s: 0.5, b_s: 0.5 / 48.0 },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be at least 1".into()));
        }
        if self.burn_in >= self.n_iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iterations ({})",
                self.burn_in, self.n_iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        self.priors.validate()?;
        self.sampler.validate()
    }

    /// Retained draws per chain.
    pub fn retained_per_chain(&self) -> usize {
        (self.n_iterations - self.burn_in) / self.thin
    }
}

/// Scalars monitored at every retained iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quantity {
    #[serde(rename = "N")]
    N,
    #[serde(rename = "r")]
    R,
    #[serde(rename = "psi")]
    Psi,
    /// `sum S_i z_i`.
    #[serde(rename = "total_size")]
    TotalSize,
    /// `B_Q`: size of included bugs not detected in the observed phases.
    #[serde(rename = "remaining_size")]
    RemainingSize,
}

impl Quantity {
    pub const ALL: [Quantity; 5] = [
        Quantity::N,
        Quantity::R,
        Quantity::Psi,
        Quantity::TotalSize,
        Quantity::RemainingSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::N => "N",
            Quantity::R => "r",
            Quantity::Psi => "psi",
            Quantity::TotalSize => "total_size",
            Quantity::RemainingSize => "remaining_size",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalars {
    pub n: usize,
    pub r: f64,
    pub psi: f64,
    pub total_size: u64,
    pub remaining_size: u64,
}

impl Scalars {
    pub fn of(draw: &ParameterDraw, model: &AugmentedModel) -> Self {
        Self {
            n: draw.n_included(),
            r: draw.r,
            psi: draw.psi,
            total_size: draw.total_size(),
            remaining_size: draw.remaining_size(model),
        }
    }

    pub fn get(&self, q: Quantity) -> f64 {
        match q {
            Quantity::N => self.n as f64,
            Quantity::R => self.r,
            Quantity::Psi => self.psi,
            Quantity::TotalSize => self.total_size as f64,
            Quantity::RemainingSize => self.remaining_size as f64,
        }
    }
}

/// One chain's retained output.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub index: usize,
    /// 1-based iteration numbers of the retained draws.
    pub iterations: Vec<usize>,
    pub scalars: Vec<Scalars>,
    /// Retained states, empty unless `store_draws` was set.
    pub draws: Vec<ParameterDraw>,
    pub stats: KernelStats,
    /// Random-walk steps for `(r, psi)` after adaptation.
    pub final_steps: (f64, f64),
    pub init_attempts: usize,
}

impl Chain {
    pub fn series(&self, q: Quantity) -> Vec<f64> {
        self.scalars.iter().map(|s| s.get(q)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ChainSet {
    pub chains: Vec<Chain>,
    pub config: RunConfig,
}

impl ChainSet {
    pub fn series(&self, q: Quantity) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.series(q)).collect()
    }

    pub fn pooled(&self, q: Quantity) -> Vec<f64> {
        self.chains.iter().flat_map(|c| c.series(q)).collect()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.scalars.len())
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.scalars.len()).sum()
    }
}

/// RNG for chain `chain` of a run seeded with `seed`: one ChaCha stream per chain.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Initial state: `r, psi ~ U(0.01, 0.99)`, `lambda_i` from its prior,
/// detected rows get `S_i = max(1, round(lambda_i))` and `z_i = 1`, augmented
/// rows draw `S_i ~ Poisson(lambda_i)` and `z_i ~ Bernoulli(psi)`.
pub fn initial_draw<R: Rng + ?Sized>(
    model: &AugmentedModel,
    priors: &Priors,
    rng: &mut R,
) -> Result<ParameterDraw> {
    let m = model.m();
    let r = rng.random_range(0.01..0.99);
    let psi = rng.random_range(0.01..0.99);
    let gamma = Gamma::new(priors.a_s, 1.0 / priors.b_s)
        .map_err(|e| Error::Config(format!("size prior: {e}")))?;
    let mut z = Vec::with_capacity(m);
    let mut sizes = Vec::with_capacity(m);
    let mut lambda = Vec::with_capacity(m);
    for row in model.rows() {
        let l: f64 = gamma.sample(rng).max(f64::MIN_POSITIVE);
        lambda.push(l);
        if row.is_detected() {
            z.push(true);
            sizes.push((l.round() as u64).max(1));
        } else {
            let s = Poisson::new(l).map_or(0.0, |p| p.sample(rng)) as u64;
            sizes.push(s);
            z.push(rng.random::<f64>() < psi);
        }
    }
    Ok(ParameterDraw {
        r,
        psi,
        z,
        sizes,
        lambda,
    })
}

/// Run one chain from its own RNG stream.
pub fn run_chain(model: &AugmentedModel, cfg: &RunConfig, index: usize) -> Result<Chain> {
    let mut rng = chain_rng(cfg.sampler.rng_seed, index);
    let mut attempts = 0;
    let mut draw = loop {
        attempts += 1;
        let d = initial_draw(model, &cfg.priors, &mut rng)?;
        if log_posterior(&d, model, &cfg.priors).is_finite() {
            break d;
        }
        if attempts >= MAX_INIT_ATTEMPTS {
            return Err(Error::NonFiniteInit {
                chain: index,
                attempts,
            });
        }
    };

    let mut sampler = ChainSampler::new(cfg.sampler.clone(), rng);
    let keep = cfg.retained_per_chain();
    let mut iterations = Vec::with_capacity(keep);
    let mut scalars = Vec::with_capacity(keep);
    let mut draws = Vec::with_capacity(if cfg.store_draws { keep } else { 0 });
    for t in 1..=cfg.n_iterations {
        sampler.sweep(&mut draw, model, &cfg.priors)?;
        if t == cfg.burn_in {
            sampler.end_adaptation();
        }
        if t > cfg.burn_in && (t - cfg.burn_in) % cfg.thin == 0 {
            iterations.push(t);
            scalars.push(Scalars::of(&draw, model));
            if cfg.store_draws {
                draws.push(draw.clone());
            }
        }
    }
    Ok(Chain {
        index,
        iterations,
        scalars,
        draws,
        final_steps: sampler.step_sizes(),
        stats: sampler.stats().clone(),
        init_attempts: attempts,
    })
}

/// Run all chains (in parallel when threads are available).
pub fn run(model: &AugmentedModel, cfg: &RunConfig) -> Result<ChainSet> {
    cfg.validate()?;
    let chains = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(model, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainSet {
        chains,
        config: cfg.clone(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Potential scale reduction factor from between- and within-chain
/// variances of equal-length chains.
pub fn potential_scale_reduction(chains: &[Vec<f64>], name: &str) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InsufficientDraws(format!(
            "R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::InsufficientDraws(
            "R-hat needs equal-length chains with at least 10 draws".into(),
        ));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = mean(&chains.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    if within <= 0.0 {
        return Err(Error::UndefinedVariance(name.to_string()));
    }
    let nf = n as f64;
    let between = nf * sample_variance(&means);
    let pooled = (nf - 1.0) / nf * within + between / nf;
    Ok((pooled / within).sqrt())
}

pub fn gelman_rubin(chains: &ChainSet, quantity: Quantity) -> Result<f64> {
    potential_scale_reduction(&chains.series(quantity), quantity.name())
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
///
/// Returns the total draw count for a constant series.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let total = (m * n) as f64;
    if m == 0 || n < 4 {
        return total;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let autocov = |c: &[f64], mu: f64, lag: usize| -> f64 {
        c[..n - lag]
            .iter()
            .zip(&c[lag..n])
            .map(|(a, b)| (a - mu) * (b - mu))
            .sum::<f64>()
            / n as f64
    };
    let w: f64 = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| autocov(c, mu, 0) * n as f64 / (n as f64 - 1.0))
        .sum::<f64>()
        / m as f64;
    let between = if m > 1 { n as f64 * sample_variance(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + between / n as f64;
    if var_plus <= 0.0 {
        return total;
    }
    let rho = |lag: usize| -> f64 {
        let acov: f64 = chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - acov) / var_plus
    };
    let mut sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum += pair;
        prev_pair = pair;
        lag += 2;
    }
    // sum covers rho_0 = 1 once; tau = -1 + 2 * sum.
    let tau = (2.0 * sum - 1.0).max(1.0 / total.ln().max(1.0));
    total / tau
}

/// Type-7 quantile (linear interpolation of order statistics) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and population standard deviation (divisor `R`).
pub fn mean_and_sd(xs: &[f64]) -> (f64, f64) {
    let mu = mean(xs);
    let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64;
    (mu, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub quantity: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub rhat: Option<f64>,
    pub ess: f64,
}

impl SummaryRow {
    /// Summary of one named quantity from per-chain series.
    pub fn from_chains(name: &str, chains: &[Vec<f64>]) -> Result<Self> {
        let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        if pooled.is_empty() {
            return Err(Error::InsufficientDraws(format!("no draws for `{name}`")));
        }
        let (mean, sd) = mean_and_sd(&pooled);
        pooled.sort_by(f64::total_cmp);
        Ok(Self {
            quantity: name.to_string(),
            mean,
            sd,
            q025: quantile_sorted(&pooled, 0.025),
            q975: quantile_sorted(&pooled, 0.975),
            rhat: potential_scale_reduction(chains, name).ok(),
            ess: effective_sample_size(chains),
        })
    }

    pub fn median(chains: &[Vec<f64>]) -> f64 {
        let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        pooled.sort_by(f64::total_cmp);
        quantile_sorted(&pooled, 0.5)
    }

    pub fn ci_contains(&self, value: f64) -> bool {
        self.q025 <= value && value <= self.q975
    }

    pub fn converged(&self) -> bool {
        self.rhat.is_none_or(|r| r <= RHAT_THRESHOLD)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub rows: Vec<SummaryRow>,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.quantity == name)
    }

    /// Quantities whose R-hat exceeds the convergence threshold.
    pub fn unconverged(&self) -> Vec<(&str, f64)> {
        self.rows
            .iter()
            .filter_map(|r| match r.rhat {
                Some(v) if v > RHAT_THRESHOLD => Some((r.quantity.as_str(), v)),
                _ => None,
            })
            .collect()
    }
}

/// Pooled post-burn-in summaries of every monitored quantity.
pub fn summarize(chains: &ChainSet) -> Result<PosteriorSummary> {
    let rows = Quantity::ALL
        .iter()
        .map(|&q| SummaryRow::from_chains(q.name(), &chains.series(q)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSummary { rows })
}
