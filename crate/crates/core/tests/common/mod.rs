//! Shared oracles for the integration tests: exact enumeration of tiny
//! posteriors and goodness-of-fit statistics.
#![allow(dead_code)]

use bugsize::model::{AugmentedModel, DetectionHistory, DetectionRecord, PhasePlan, Priors};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

pub fn history(inputs: Vec<u64>, detected: &[(usize, u64)]) -> DetectionHistory {
    let plan = PhasePlan::observed(inputs).unwrap();
    let records = detected
        .iter()
        .enumerate()
        .map(|(k, &(phase, count))| DetectionRecord {
            bug_id: format!("b{k:04}"),
            phase,
            count,
        })
        .collect();
    DetectionHistory::new(plan, records).unwrap()
}

pub fn model(inputs: Vec<u64>, detected: &[(usize, u64)], m: usize) -> AugmentedModel {
    AugmentedModel::new(history(inputs, detected), m).unwrap()
}

/// Negative-binomial marginal of `S` with `lambda` integrated out:
/// `Gamma(a + k) / (Gamma(a) k!) * (b / (b + 1))^a * (1 / (b + 1))^k`.
pub fn ln_size_marginal(k: u64, priors: &Priors) -> f64 {
    let (a, b) = (priors.a_s, priors.b_s);
    let k = k as f64;
    ln_gamma(a + k) - ln_gamma(a) - ln_gamma(k + 1.0) + a * (b / (b + 1.0)).ln()
        - k * (b + 1.0).ln()
}

/// Binomial pmf written out from factorials.
pub fn binomial_pmf(y: u64, t: u64, p: f64) -> f64 {
    if p == 0.0 || p == 1.0 {
        let certain = if p == 0.0 { 0 } else { t };
        return if y == certain { 1.0 } else { 0.0 };
    }
    let ln_choose = ln_gamma(t as f64 + 1.0) - ln_gamma(y as f64 + 1.0) - ln_gamma((t - y) as f64 + 1.0);
    (ln_choose + y as f64 * p.ln() + (t - y) as f64 * (1.0 - p).ln()).exp()
}

/// Exact posterior of `(z, S)` for a tiny model with `r`, `psi` fixed,
/// enumerating every row's size in `0..=max_size` under the
/// negative-binomial marginal. Rows are independent given `r` and `psi`, so
/// the joint factorises into per-row marginals; returns, per row,
/// `(P(z = 1), P(S = k) for k in 0..=max_size)`.
///
/// Each row's history is given directly: `Some((prior_inputs, phase_inputs, y))`
/// for a detection, `None` for an all-zero row over `total_inputs`.
pub fn enumerate_rows(
    rows: &[Option<(u64, u64, u64)>],
    total_inputs: u64,
    r: f64,
    psi: f64,
    priors: &Priors,
    max_size: u64,
) -> Vec<(f64, Vec<f64>)> {
    rows.iter()
        .map(|row| {
            let mut w_in = vec![0.0; max_size as usize + 1];
            let mut w_out = vec![0.0; max_size as usize + 1];
            for s in 0..=max_size {
                let prior = ln_size_marginal(s, priors).exp();
                let p = 1.0 - (1.0 - r).powi(s as i32);
                match *row {
                    Some((before, t, y)) => {
                        w_in[s as usize] = prior * (1.0 - p).powf(before as f64) * binomial_pmf(y, t, p);
                    }
                    None => {
                        w_in[s as usize] = psi * prior * (1.0 - p).powf(total_inputs as f64);
                        w_out[s as usize] = (1.0 - psi) * prior;
                    }
                }
            }
            let detected = row.is_some();
            let total: f64 = w_in.iter().sum::<f64>() + if detected { 0.0 } else { w_out.iter().sum() };
            let p_in = w_in.iter().sum::<f64>() / total;
            let sizes = w_in
                .iter()
                .zip(&w_out)
                .map(|(a, b)| (a + if detected { 0.0 } else { *b }) / total)
                .collect();
            (p_in, sizes)
        })
        .collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    (0..n)
        .map(|i| (p.get(i).copied().unwrap_or(0.0) - q.get(i).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
        / 2.0
}

/// Asymptotic Kolmogorov distribution: `P(sqrt(n) D > x)`.
fn kolmogorov_survival(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        s += (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp();
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov p-value against a continuous CDF.
pub fn ks_pvalue<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    // Stephens' small-sample correction.
    let sqrt_n = n.sqrt();
    kolmogorov_survival((sqrt_n + 0.12 + 0.11 / sqrt_n) * d)
}

/// Pearson chi-square p-value of observed counts against expected
/// probabilities; cells with expected count below 5 are pooled into the
/// last cell.
pub fn chi_square_pvalue(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let n = n as f64;
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (c, p) in counts.iter().zip(probs) {
        o_acc += *c as f64;
        e_acc += p * n;
        if e_acc >= 5.0 {
            obs.push(o_acc);
            exp.push(e_acc);
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    // Leftover mass (including any probability not listed) joins the last cell.
    let listed: f64 = probs.iter().sum();
    e_acc += (1.0 - listed).max(0.0) * n;
    if let (Some(o), Some(e)) = (obs.last_mut(), exp.last_mut()) {
        *o += o_acc;
        *e += e_acc;
    }
    let stat: f64 = obs.iter().zip(&exp).map(|(o, e)| (o - e).powi(2) / e).sum();
    let df = (obs.len() as f64 - 1.0).max(1.0);
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}
