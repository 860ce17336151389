//! Single-site MCMC kernels and the systematic-scan sweep.
//!
//! * `z_i` (augmented rows only): exact Bernoulli full conditional.
//! * `lambda_i`: conjugate Gamma update.
//! * `S_i`: slice sampling on the non-negative integers (stepping out and
//!   shrinkage over integer brackets).
//! * `r`, `psi`: Gaussian random walk on the logit scale, with Robbins-Monro
//!   step adaptation during burn-in only. `psi` may instead use its exact
//!   Beta full conditional.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ln_poisson_pmf, AugmentedModel, ParameterDraw, Priors};

/// Which `psi` kernel the sweep uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiKernel {
    #[default]
    RandomWalk,
    ConjugateBeta,
}

/// Per-kernel on/off switches. A disabled kernel holds its block fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSwitches {
    pub sizes: bool,
    pub lambda: bool,
    pub inclusion: bool,
    pub r: bool,
    pub psi: bool,
}

impl Default for KernelSwitches {
    fn default() -> Self {
        Self {
            sizes: true,
            lambda: true,
            inclusion: true,
            r: true,
            psi: true,
        }
    }
}

impl KernelSwitches {
    pub fn none() -> Self {
        Self {
            sizes: false,
            lambda: false,
            inclusion: false,
            r: false,
            psi: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Initial random-walk step on `logit(r)`.
    pub rw_step_r: f64,
    /// Initial random-walk step on `logit(psi)`.
    pub rw_step_psi: f64,
    pub adapt_target: f64,
    /// Iterations between step-size adjustments.
    pub adapt_interval: usize,
    /// Initial integer bracket width for the size slice sampler.
    pub slice_width: u64,
    /// Cap on stepping-out expansions per slice update.
    pub slice_max_steps: usize,
    pub rng_seed: u64,
    pub psi_kernel: PsiKernel,
    pub kernels: KernelSwitches,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            rw_step_r: 0.5,
            rw_step_psi: 0.5,
            adapt_target: 0.44,
            adapt_interval: 50,
            slice_width: 10,
            slice_max_steps: 64,
            rng_seed: 20_240_501,
            psi_kernel: PsiKernel::RandomWalk,
            kernels: KernelSwitches::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.rw_step_r) || !positive(self.rw_step_psi) {
            return Err(Error::Config("random-walk step sizes must be positive".into()));
        }
        if !(self.adapt_target > 0.0 && self.adapt_target < 1.0) {
            return Err(Error::Config("adapt_target must lie in (0, 1)".into()));
        }
        if self.adapt_interval == 0 || self.slice_width == 0 || self.slice_max_steps == 0 {
            return Err(Error::Config(
                "adapt_interval, slice_width and slice_max_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `P(z_i = 1 | rest)` for an augmented row, given `ln q_i`, the log
/// probability of an all-zero history for an included bug.
pub fn inclusion_probability(psi: f64, log_q: f64) -> f64 {
    if log_q == f64::NEG_INFINITY {
        return 0.0;
    }
    sigmoid(psi.ln() + log_q - (-psi).ln_1p())
}

/// Gibbs update of the inclusion indicator of augmented row `i`.
pub fn gibbs_update_z<R: Rng + ?Sized>(
    i: usize,
    draw: &mut ParameterDraw,
    model: &AugmentedModel,
    rng: &mut R,
) -> Result<()> {
    let row = &model.rows()[i];
    if row.is_detected() {
        return Err(Error::DetectedRow(i));
    }
    let log_q = row.log_likelihood((-draw.r).ln_1p(), draw.sizes[i]);
    let prob = inclusion_probability(draw.psi, log_q);
    draw.z[i] = rng.random::<f64>() < prob;
    Ok(())
}

/// Conjugate update `lambda_i ~ Gamma(a_s + S_i, b_s + 1)`.
pub fn gibbs_update_lambda<R: Rng + ?Sized>(
    i: usize,
    draw: &mut ParameterDraw,
    priors: &Priors,
    rng: &mut R,
) -> Result<()> {
    let shape = priors.a_s + draw.sizes[i] as f64;
    let gamma = Gamma::new(shape, 1.0 / (priors.b_s + 1.0))
        .map_err(|e| Error::Domain(format!("gamma full conditional: {e}")))?;
    // Gamma draws with small shape can underflow to zero.
    draw.lambda[i] = gamma.sample(rng).max(f64::MIN_POSITIVE);
    Ok(())
}

/// Result of one integer slice-sampling update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceOutcome {
    pub value: u64,
    pub evaluations: usize,
}

/// Slice sampling on the non-negative integers.
///
/// Draws a log height under `log_density(current)`, places an integer bracket
/// of `width` points uniformly around `current`, steps out by `width` at most
/// `max_steps` times (split uniformly between the two sides) while the
/// extreme points stay inside the slice, then shrinks by sampling bracket
/// points uniformly. Leaves the normalised `exp(log_density)` invariant.
pub fn slice_sample_integer<F, R>(
    current: u64,
    mut log_density: F,
    width: u64,
    max_steps: usize,
    rng: &mut R,
) -> std::result::Result<SliceOutcome, String>
where
    F: FnMut(u64) -> f64,
    R: Rng + ?Sized,
{
    let mut evaluations = 1;
    let f0 = log_density(current);
    if !f0.is_finite() {
        return Err(format!(
            "current value {current} has log density {f0}; no positive-density point in the bracket"
        ));
    }
    let exp1: f64 = Exp1.sample(rng);
    let height = f0 - exp1;

    let x0 = current as i128;
    let w = width as i128;
    let mut density = |x: i128| {
        if x < 0 || x > u64::MAX as i128 {
            f64::NEG_INFINITY
        } else {
            evaluations += 1;
            log_density(x as u64)
        }
    };

    // Bracket [left, right) on the integers.
    let offset = rng.random_range(0..width) as i128;
    let mut left = x0 - offset;
    let mut right = left + w;
    let mut steps_left = rng.random_range(0..max_steps);
    let mut steps_right = max_steps - 1 - steps_left;
    while steps_left > 0 && density(left) > height {
        left -= w;
        steps_left -= 1;
    }
    while steps_right > 0 && density(right - 1) > height {
        right += w;
        steps_right -= 1;
    }
    left = left.max(0);

    loop {
        let candidate = rng.random_range(left..right);
        if candidate == x0 {
            return Ok(SliceOutcome {
                value: current,
                evaluations,
            });
        }
        if density(candidate) > height {
            return Ok(SliceOutcome {
                value: candidate as u64,
                evaluations,
            });
        }
        if candidate < x0 {
            left = candidate + 1;
        } else {
            right = candidate;
        }
    }
}

/// Slice update of `S_i` under its full conditional
/// `Poisson(S_i; lambda_i) * (likelihood of row i if included)`.
pub fn slice_update_size<R: Rng + ?Sized>(
    i: usize,
    draw: &mut ParameterDraw,
    model: &AugmentedModel,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<usize> {
    let row = model.rows()[i];
    let lambda = draw.lambda[i];
    let ln_lambda = lambda.ln();
    let included = draw.z[i];
    let log_miss = (-draw.r).ln_1p();
    let prior = |s: u64| {
        if s == 0 {
            0.0
        } else {
            s as f64 * ln_lambda - statrs::function::factorial::ln_factorial(s)
        }
    };
    let outcome = if included {
        slice_sample_integer(
            draw.sizes[i],
            |s| prior(s) + row.log_likelihood(log_miss, s),
            cfg.slice_width,
            cfg.slice_max_steps,
            rng,
        )
    } else {
        slice_sample_integer(
            draw.sizes[i],
            prior,
            cfg.slice_width,
            cfg.slice_max_steps,
            rng,
        )
    }
    .map_err(|reason| Error::SliceFailure { row: i, reason })?;
    draw.sizes[i] = outcome.value;
    Ok(outcome.evaluations)
}

/// Transformed random-walk parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalar {
    R,
    Psi,
}

/// Log-likelihood of `r` given the current sizes and inclusions, up to a
/// constant. Linear in `ln(1 - r)` apart from the detection terms.
struct RLikelihood {
    miss_weight: f64,
    detections: Vec<(f64, f64)>,
}

impl RLikelihood {
    fn new(draw: &ParameterDraw, model: &AugmentedModel) -> Self {
        let mut miss_weight = 0.0;
        let mut detections = Vec::with_capacity(model.n_detected());
        for (i, row) in model.rows().iter().enumerate() {
            if !draw.z[i] {
                continue;
            }
            let s = draw.sizes[i] as f64;
            let mut misses = row.exposure;
            if let Some(det) = row.detection {
                misses += det.trials - det.count;
                detections.push((det.count as f64, s));
            }
            miss_weight += misses as f64 * s;
        }
        Self {
            miss_weight,
            detections,
        }
    }

    fn eval(&self, r: f64) -> f64 {
        let log_miss = (-r).ln_1p();
        let mut total = self.miss_weight * log_miss;
        for &(count, s) in &self.detections {
            total += count * (-(s * log_miss).exp_m1()).ln();
        }
        total
    }
}

fn scalar_log_target(param: Scalar, draw: &ParameterDraw, model: &AugmentedModel) -> impl Fn(f64) -> f64 {
    enum Target {
        R(RLikelihood),
        Psi { included: f64, excluded: f64 },
    }
    let target = match param {
        Scalar::R => Target::R(RLikelihood::new(draw, model)),
        Scalar::Psi => {
            let k = draw.n_included() as f64;
            Target::Psi {
                included: k,
                excluded: draw.z.len() as f64 - k,
            }
        }
    };
    move |x: f64| match &target {
        Target::R(lik) => lik.eval(x),
        Target::Psi { included, excluded } => included * x.ln() + excluded * (-x).ln_1p(),
    }
}

/// Metropolis-Hastings step on `logit(x)` for a (0, 1) parameter with a
/// Uniform(0, 1) prior. `increment` is the standard-normal innovation;
/// `log_u` is the log of the uniform acceptance variate. Returns the new
/// value and whether the proposal was accepted.
pub fn logit_random_walk_step<F: Fn(f64) -> f64>(
    current: f64,
    log_target: F,
    step: f64,
    increment: f64,
    log_u: f64,
) -> (f64, bool) {
    let proposal = sigmoid(logit(current) + step * increment);
    if !(proposal > 0.0 && proposal < 1.0) {
        return (current, false);
    }
    if proposal == current {
        return (current, true);
    }
    let log_jacobian = |x: f64| x.ln() + (-x).ln_1p();
    let log_ratio = log_target(proposal) - log_target(current) + log_jacobian(proposal)
        - log_jacobian(current);
    if log_u < log_ratio {
        (proposal, true)
    } else {
        (current, false)
    }
}

/// Random-walk MH update of `r` or `psi`; returns the acceptance flag.
pub fn mh_update_transformed<R: Rng + ?Sized>(
    param: Scalar,
    draw: &mut ParameterDraw,
    model: &AugmentedModel,
    step: f64,
    rng: &mut R,
) -> bool {
    let target = scalar_log_target(param, draw, model);
    let increment: f64 = StandardNormal.sample(rng);
    let log_u = rng.random::<f64>().ln();
    let current = match param {
        Scalar::R => draw.r,
        Scalar::Psi => draw.psi,
    };
    let (value, accepted) = logit_random_walk_step(current, target, step, increment, log_u);
    match param {
        Scalar::R => draw.r = value,
        Scalar::Psi => draw.psi = value,
    }
    accepted
}

/// Exact `psi ~ Beta(1 + N, 1 + M - N)` update.
pub fn conjugate_update_psi<R: Rng + ?Sized>(draw: &mut ParameterDraw, rng: &mut R) -> Result<()> {
    let k = draw.n_included() as f64;
    let beta = Beta::new(1.0 + k, 1.0 + draw.z.len() as f64 - k)
        .map_err(|e| Error::Domain(format!("beta full conditional: {e}")))?;
    let psi: f64 = beta.sample(rng);
    // Keep psi strictly inside (0, 1).
    draw.psi = psi.clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    Ok(())
}

/// Robbins-Monro step-size adaptation toward a target acceptance rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAdapter {
    log_step: f64,
    window_accepted: usize,
    window_proposed: usize,
    batches: usize,
}

impl StepAdapter {
    pub fn new(step: f64) -> Self {
        Self {
            log_step: step.ln(),
            window_accepted: 0,
            window_proposed: 0,
            batches: 0,
        }
    }

    pub fn step(&self) -> f64 {
        self.log_step.exp()
    }

    fn record(&mut self, accepted: bool, interval: usize, target: f64) {
        self.window_proposed += 1;
        self.window_accepted += accepted as usize;
        if self.window_proposed >= interval {
            self.batches += 1;
            let rate = self.window_accepted as f64 / self.window_proposed as f64;
            let gain = (self.batches as f64).powf(-0.5);
            self.log_step = (self.log_step + gain * (rate - target)).clamp(-12.0, 4.0);
            self.window_accepted = 0;
            self.window_proposed = 0;
        }
    }
}

/// Acceptance bookkeeping for one kernel, split at the end of burn-in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceCounter {
    pub burn_in_accepted: u64,
    pub burn_in_proposed: u64,
    pub accepted: u64,
    pub proposed: u64,
}

impl AcceptanceCounter {
    fn record(&mut self, accepted: bool, adapting: bool) {
        if adapting {
            self.burn_in_proposed += 1;
            self.burn_in_accepted += accepted as u64;
        } else {
            self.proposed += 1;
            self.accepted += accepted as u64;
        }
    }

    /// Post burn-in acceptance rate (`None` before any retained proposal).
    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub r: AcceptanceCounter,
    pub psi: AcceptanceCounter,
    pub slice_updates: u64,
    pub slice_evaluations: u64,
}

/// Chain-private sampler state: RNG stream, adaptation and statistics.
#[derive(Debug, Clone)]
pub struct ChainSampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
    r_step: StepAdapter,
    psi_step: StepAdapter,
    adapting: bool,
    stats: KernelStats,
}

impl ChainSampler {
    pub fn new(cfg: SamplerConfig, rng: ChaCha8Rng) -> Self {
        Self {
            r_step: StepAdapter::new(cfg.rw_step_r),
            psi_step: StepAdapter::new(cfg.rw_step_psi),
            cfg,
            rng,
            adapting: true,
            stats: KernelStats::default(),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &KernelStats {
        &self.stats
    }

    pub fn is_adapting(&self) -> bool {
        self.adapting
    }

    /// Freeze step sizes; subsequent sweeps are time-homogeneous.
    pub fn end_adaptation(&mut self) {
        self.adapting = false;
    }

    pub fn step_sizes(&self) -> (f64, f64) {
        (self.r_step.step(), self.psi_step.step())
    }

    /// One systematic scan: all `S_i`, all `lambda_i`, augmented `z_i`,
    /// then `r`, then `psi`.
    pub fn sweep(
        &mut self,
        draw: &mut ParameterDraw,
        model: &AugmentedModel,
        priors: &Priors,
    ) -> Result<()> {
        let kernels = self.cfg.kernels;
        let m = model.m();
        if kernels.sizes {
            for i in 0..m {
                let evals = slice_update_size(i, draw, model, &self.cfg, &mut self.rng)?;
                self.stats.slice_updates += 1;
                self.stats.slice_evaluations += evals as u64;
            }
        }
        if kernels.lambda {
            for i in 0..m {
                gibbs_update_lambda(i, draw, priors, &mut self.rng)?;
            }
        }
        if kernels.inclusion {
            for i in model.n_detected()..m {
                gibbs_update_z(i, draw, model, &mut self.rng)?;
            }
        }
        if kernels.r {
            let accepted =
                mh_update_transformed(Scalar::R, draw, model, self.r_step.step(), &mut self.rng);
            self.stats.r.record(accepted, self.adapting);
            if self.adapting {
                self.r_step
                    .record(accepted, self.cfg.adapt_interval, self.cfg.adapt_target);
            }
        }
        if kernels.psi {
            match self.cfg.psi_kernel {
                PsiKernel::RandomWalk => {
                    let accepted = mh_update_transformed(
                        Scalar::Psi,
                        draw,
                        model,
                        self.psi_step.step(),
                        &mut self.rng,
                    );
                    self.stats.psi.record(accepted, self.adapting);
                    if self.adapting {
                        self.psi_step
                            .record(accepted, self.cfg.adapt_interval, self.cfg.adapt_target);
                    }
                }
                PsiKernel::ConjugateBeta => {
                    conjugate_update_psi(draw, &mut self.rng)?;
                    self.stats.psi.record(true, self.adapting);
                }
            }
        }
        Ok(())
    }
}

/// Log full conditional of `S_i` up to a constant (used by tests and
/// diagnostics).
pub fn size_log_conditional(i: usize, size: u64, draw: &ParameterDraw, model: &AugmentedModel) -> f64 {
    let prior = ln_poisson_pmf(size, draw.lambda[i]);
    if draw.z[i] {
        prior + model.rows()[i].log_likelihood((-draw.r).ln_1p(), size)
    } else {
        prior
    }
}
