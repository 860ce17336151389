//! File formats: detection logs, phase plans, grouped logs, analysis
//! configuration, fit artifacts and prediction reports.
//!
//! All tables are UTF-8 CSV with a mandatory header row. Floats are written
//! in shortest round-trip form so re-read values are bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{ChainSet, PosteriorSummary, Quantity, RunConfig, RHAT_THRESHOLD};
use crate::error::{Error, Result};
use crate::grouped::{GroupedData, GroupedFit, ObservedGroup, GROUPED_QUANTITIES};
use crate::model::{AugmentedModel, DetectionHistory, DetectionRecord, PhasePlan, Priors};
use crate::predictive::{PredictionResult, PredictiveDraw};
use crate::samplers::{PsiKernel, SamplerConfig};
use crate::sim::{PhaseInputs, StudyReport, Truth, CALIBRATED_A_S, CALIBRATED_B_S};

pub const FORMAT_VERSION: u32 = 1;

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

/// Map a record-level CSV error to a validation error naming its line.
fn record_error(e: csv::Error, line: usize) -> Error {
    if e.is_io_error() {
        return Error::Csv(e);
    }
    let line = e.position().map_or(line, |p| p.line() as usize);
    Error::validation(Some(line), e.to_string())
}

fn write_rows<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(open(path)?))?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------- phases

#[derive(Debug, Deserialize)]
struct PhaseRow {
    phase: i64,
    inputs: i64,
}

/// Read a `phase,inputs` table covering phases `1..=Q` once each.
pub fn read_phases<R: Read>(reader: R) -> Result<PhasePlan> {
    let mut rdr = csv_reader(reader);
    let mut by_phase = BTreeMap::new();
    for (k, rec) in rdr.deserialize::<PhaseRow>().enumerate() {
        let line = k + 2;
        let row = rec.map_err(|e| record_error(e, line))?;
        if row.phase < 1 {
            return Err(Error::validation(Some(line), format!("phase must be >= 1, got {}", row.phase)));
        }
        if row.inputs < 0 {
            return Err(Error::validation(Some(line), format!("inputs must be >= 0, got {}", row.inputs)));
        }
        if by_phase.insert(row.phase as usize, row.inputs as u64).is_some() {
            return Err(Error::validation(Some(line), format!("phase {} listed twice", row.phase)));
        }
    }
    if by_phase.is_empty() {
        return Err(Error::validation(None, "phases table has no rows"));
    }
    let q = by_phase.len();
    if let Some((&p, _)) = by_phase.iter().enumerate().find(|(i, (&p, _))| p != i + 1).map(|(_, kv)| kv) {
        return Err(Error::validation(None, format!("phases must be numbered 1..={q}; found phase {p}")));
    }
    PhasePlan::observed(by_phase.into_values().collect())
}

pub fn read_phases_file(path: &Path) -> Result<PhasePlan> {
    read_phases(open(path)?)
}

pub fn write_phases(path: &Path, inputs: &[u64]) -> Result<()> {
    write_rows(
        path,
        &header(&["phase", "inputs"]),
        inputs.iter().enumerate().map(|(j, t)| vec![(j + 1).to_string(), t.to_string()]),
    )
}

// ------------------------------------------------------------ detections

#[derive(Debug, Deserialize)]
struct DetectionRow {
    bug_id: String,
    phase: i64,
    detections: i64,
    #[serde(default)]
    severity: Option<String>,
}

/// What ingestion saw besides the detection history itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub bugs: usize,
    /// Bugs detected more than once in their detection phase.
    pub multi_detection_bugs: usize,
    /// Bug ids listed only with zero detections (dropped).
    pub dropped: Vec<String>,
    /// Severity label per bug, carried through but unused by the model.
    pub severity: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub history: DetectionHistory,
    pub report: IngestReport,
}

/// Read a long-form `bug_id,phase,detections[,severity]` log. Each bug has
/// at most one row with positive detections; zero rows are allowed only
/// before that phase. Row order does not matter.
pub fn read_detections<R: Read>(reader: R, plan: &PhasePlan) -> Result<Ingested> {
    struct Seen {
        detected: Option<(usize, usize, u64)>, // (line, phase, count)
        zero_phases: Vec<(usize, usize)>,      // (line, phase)
        severity: Option<String>,
    }

    let q = plan.observed_phases();
    let mut rdr = csv_reader(reader);
    let mut bugs: BTreeMap<String, Seen> = BTreeMap::new();
    let mut seen_pairs: HashMap<(String, usize), usize> = HashMap::new();
    let mut rows = 0;
    for (k, rec) in rdr.deserialize::<DetectionRow>().enumerate() {
        let line = k + 2;
        let row = rec.map_err(|e| record_error(e, line))?;
        rows += 1;
        if row.bug_id.is_empty() {
            return Err(Error::validation(Some(line), "empty bug_id"));
        }
        if row.phase < 1 || row.phase as usize > q {
            return Err(Error::validation(
                Some(line),
                format!("bug `{}`: phase {} outside 1..={q}", row.bug_id, row.phase),
            ));
        }
        let phase = row.phase as usize;
        if row.detections < 0 {
            return Err(Error::validation(
                Some(line),
                format!("bug `{}`: detections must be >= 0, got {}", row.bug_id, row.detections),
            ));
        }
        let count = row.detections as u64;
        if count > plan.inputs(phase) {
            return Err(Error::validation(
                Some(line),
                format!(
                    "bug `{}`: {count} detections exceed the {} inputs of phase {phase}",
                    row.bug_id,
                    plan.inputs(phase)
                ),
            ));
        }
        if let Some(first) = seen_pairs.insert((row.bug_id.clone(), phase), line) {
            return Err(Error::validation(
                Some(line),
                format!("bug `{}` has a second row for phase {phase} (first at row {first})", row.bug_id),
            ));
        }
        let entry = bugs.entry(row.bug_id.clone()).or_insert(Seen {
            detected: None,
            zero_phases: Vec::new(),
            severity: None,
        });
        if let Some(s) = row.severity.filter(|s| !s.is_empty()) {
            match &entry.severity {
                Some(prev) if *prev != s => {
                    return Err(Error::validation(
                        Some(line),
                        format!("bug `{}` has conflicting severities `{prev}` and `{s}`", row.bug_id),
                    ))
                }
                _ => entry.severity = Some(s),
            }
        }
        if count > 0 {
            if let Some((l, p, _)) = entry.detected {
                return Err(Error::validation(
                    Some(line),
                    format!(
                        "bug `{}` has detections in phase {phase} and phase {p} (row {l}); a bug is removed at first detection",
                        row.bug_id
                    ),
                ));
            }
            entry.detected = Some((line, phase, count));
        } else {
            entry.zero_phases.push((line, phase));
        }
    }

    let mut report = IngestReport {
        rows,
        ..IngestReport::default()
    };
    let mut records = Vec::new();
    for (id, seen) in bugs {
        let Some((_, phase, count)) = seen.detected else {
            report.dropped.push(id);
            continue;
        };
        if let Some(&(l, p)) = seen.zero_phases.iter().find(|(_, p)| *p > phase) {
            return Err(Error::validation(
                Some(l),
                format!("bug `{id}` has a row for phase {p} after its detection in phase {phase}"),
            ));
        }
        if count > 1 {
            report.multi_detection_bugs += 1;
        }
        if let Some(s) = seen.severity {
            report.severity.insert(id.clone(), s);
        }
        records.push(DetectionRecord {
            bug_id: id,
            phase,
            count,
        });
    }
    report.bugs = records.len();
    if !report.dropped.is_empty() {
        report.warnings.push(format!(
            "{} bug id(s) have only zero-detection rows and were dropped: {}",
            report.dropped.len(),
            report.dropped.join(", ")
        ));
    }
    if report.multi_detection_bugs > 0 {
        report.warnings.push(format!(
            "{} of {} bugs were detected more than once in their detection phase",
            report.multi_detection_bugs, report.bugs
        ));
    }
    let history = DetectionHistory::new(plan.clone(), records)?;
    Ok(Ingested { history, report })
}

pub fn read_detections_file(path: &Path, plan: &PhasePlan) -> Result<Ingested> {
    read_detections(open(path)?, plan)
}

pub fn write_detections(path: &Path, history: &DetectionHistory) -> Result<()> {
    write_rows(
        path,
        &header(&["bug_id", "phase", "detections"]),
        history
            .records()
            .iter()
            .map(|r| vec![r.bug_id.clone(), r.phase.to_string(), r.count.to_string()]),
    )
}

/// Hidden truth of a simulated data set, undetected bugs included.
pub fn write_truth(path: &Path, truth: &Truth) -> Result<()> {
    write_rows(
        path,
        &header(&["bug_id", "size", "detection_phase", "detections"]),
        (0..truth.n_bugs()).map(|i| {
            vec![
                truth.bug_ids[i].clone(),
                truth.sizes[i].to_string(),
                truth.detection_phase[i].map_or(String::new(), |p| p.to_string()),
                truth.detection_count[i].to_string(),
            ]
        }),
    )
}

// --------------------------------------------------------------- grouped

#[derive(Debug, Deserialize)]
struct GroupedRow {
    group_id: String,
    phase: i64,
    inputs: i64,
    detected_count: i64,
    group_size: i64,
}

/// Read a `group_id,phase,inputs,detected_count,group_size` log. The inputs
/// of a phase must agree across rows and with `plan` when given; without a
/// plan every phase `1..=max phase` must appear in some row.
pub fn read_grouped<R: Read>(
    reader: R,
    plan: Option<&PhasePlan>,
    m_groups: usize,
    detected_offset: u64,
) -> Result<GroupedData> {
    let mut rdr = csv_reader(reader);
    let mut groups = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut inputs: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
    for (k, rec) in rdr.deserialize::<GroupedRow>().enumerate() {
        let line = k + 2;
        let row = rec.map_err(|e| record_error(e, line))?;
        let bad = |msg: String| Error::validation(Some(line), format!("group `{}`: {msg}", row.group_id));
        if row.group_id.is_empty() {
            return Err(Error::validation(Some(line), "empty group_id"));
        }
        if let Some(first) = ids.insert(row.group_id.clone(), line) {
            return Err(bad(format!("listed twice (first at row {first})")));
        }
        if row.phase < 1 {
            return Err(bad(format!("phase must be >= 1, got {}", row.phase)));
        }
        if row.inputs < 0 || row.detected_count < 1 || row.group_size < 1 {
            return Err(bad(
                "inputs must be >= 0, detected_count and group_size >= 1".to_string(),
            ));
        }
        let phase = row.phase as usize;
        let t = row.inputs as u64;
        match inputs.get(&phase) {
            Some(&(t0, l0)) if t0 != t => {
                return Err(bad(format!(
                    "phase {phase} has {t} inputs here but {t0} at row {l0}"
                )))
            }
            _ => {
                inputs.entry(phase).or_insert((t, line));
            }
        }
        if let Some(p) = plan {
            if phase > p.observed_phases() {
                return Err(bad(format!("phase {phase} outside 1..={}", p.observed_phases())));
            }
            if p.inputs(phase) != t {
                return Err(bad(format!(
                    "phase {phase} has {t} inputs here but {} in the phases table",
                    p.inputs(phase)
                )));
            }
        }
        groups.push(ObservedGroup {
            group_id: row.group_id,
            phase,
            detected: row.detected_count as u64,
            size: row.group_size as u64,
        });
    }
    let plan = match plan {
        Some(p) => p.clone(),
        None => {
            let q = inputs.keys().next_back().copied().ok_or_else(|| {
                Error::validation(None, "grouped log has no rows; pass a phases table")
            })?;
            let mut all = Vec::with_capacity(q);
            for j in 1..=q {
                let (t, _) = inputs.get(&j).ok_or_else(|| {
                    Error::validation(None, format!("no group was detected in phase {j}; pass a phases table"))
                })?;
                all.push(*t);
            }
            PhasePlan::observed(all)?
        }
    };
    GroupedData::new(plan, groups, m_groups, detected_offset)
}

pub fn read_grouped_file(
    path: &Path,
    plan: Option<&PhasePlan>,
    m_groups: usize,
    detected_offset: u64,
) -> Result<GroupedData> {
    read_grouped(open(path)?, plan, m_groups, detected_offset)
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    Ungrouped,
    Grouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub n_chains: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        let d = RunConfig::default();
        Self {
            n_chains: d.n_chains,
            n_iterations: d.n_iterations,
            burn_in: d.burn_in,
            thin: d.thin,
            seed: d.sampler.rng_seed,
        }
    }
}

/// Sampler tuning; the seed lives in `[run]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub rw_step_r: f64,
    pub rw_step_psi: f64,
    pub adapt_target: f64,
    pub adapt_interval: usize,
    pub slice_width: u64,
    pub slice_max_steps: usize,
    pub psi_kernel: PsiKernel,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            rw_step_r: d.rw_step_r,
            rw_step_psi: d.rw_step_psi,
            adapt_target: d.adapt_target,
            adapt_interval: d.adapt_interval,
            slice_width: d.slice_width,
            slice_max_steps: d.slice_max_steps,
            psi_kernel: d.psi_kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionSection {
    /// Last phase `J` of the prediction horizon.
    pub horizon: Option<usize>,
    pub future_inputs: Option<PhaseInputs>,
    pub epsilon: Option<f64>,
    pub target: f64,
}

impl Default for PredictionSection {
    fn default() -> Self {
        Self {
            horizon: None,
            future_inputs: None,
            epsilon: None,
            target: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub model: ModelVariant,
    /// `M` (ungrouped) or `M_G` (grouped); derived from the data when unset.
    pub augmentation: Option<usize>,
    /// Grouped only: bugs detected outside the modelled phases.
    pub detected_offset: u64,
    /// Grouped only: zero-truncated Poisson mean of the number of bugs in an
    /// undetected group; defaults to the mean observed group size.
    pub group_count_mean: Option<f64>,
    pub priors: Priors,
    pub run: RunSection,
    pub sampler: SamplerSection,
    pub prediction: PredictionSection,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            model: ModelVariant::Ungrouped,
            augmentation: None,
            detected_offset: 0,
            group_count_mean: None,
            priors: Priors {
                a_s: CALIBRATED_A_S,
                b_s: CALIBRATED_B_S,
            },
            run: RunSection::default(),
            sampler: SamplerSection::default(),
            prediction: PredictionSection::default(),
        }
    }
}

/// Default augmentation bound for `n` detected rows.
pub fn default_augmentation(n: usize) -> usize {
    (2 * n).max(n + 50)
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        if let Some(mean) = self.group_count_mean {
            crate::grouped::GroupCountPrior::with_mean(mean)?;
        }
        let p = &self.prediction;
        if let Some(e) = p.epsilon {
            if !(e > 0.0) {
                return Err(Error::Config(format!("prediction epsilon must be positive, got {e}")));
            }
        }
        if !(p.target > 0.0 && p.target <= 1.0) {
            return Err(Error::Config(format!("prediction target must lie in (0, 1], got {}", p.target)));
        }
        Ok(())
    }

    pub fn augmentation_for(&self, n: usize) -> usize {
        self.augmentation.unwrap_or_else(|| default_augmentation(n))
    }

    pub fn run_config(&self) -> RunConfig {
        let s = &self.sampler;
        RunConfig {
            n_chains: self.run.n_chains,
            n_iterations: self.run.n_iterations,
            burn_in: self.run.burn_in,
            thin: self.run.thin,
            store_draws: true,
            sampler: SamplerConfig {
                rw_step_r: s.rw_step_r,
                rw_step_psi: s.rw_step_psi,
                adapt_target: s.adapt_target,
                adapt_interval: s.adapt_interval,
                slice_width: s.slice_width,
                slice_max_steps: s.slice_max_steps,
                rng_seed: self.run.seed,
                psi_kernel: s.psi_kernel,
                ..SamplerConfig::default()
            },
            priors: self.priors,
        }
    }
}

// --------------------------------------------------------- fit artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub base: u64,
    /// ChaCha stream of each chain.
    pub chain_streams: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelAcceptance {
    pub burn_in_rate: Option<f64>,
    pub rate: Option<f64>,
    pub final_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainAcceptance {
    pub chain: usize,
    pub r: KernelAcceptance,
    pub psi: KernelAcceptance,
    /// Mean log-density evaluations per size slice update.
    pub slice_evaluations_per_update: f64,
    pub init_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub bugsize: String,
    pub format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            bugsize: env!("CARGO_PKG_VERSION").to_string(),
            format: FORMAT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub variant: ModelVariant,
    /// Detected rows (bugs, or groups for the grouped model).
    pub detected_rows: usize,
    /// Detected bugs, including any offset.
    pub detected_bugs: u64,
    pub augmentation: usize,
    pub observed_inputs: Vec<u64>,
    pub total_detections: u64,
    pub multi_detection_rows: usize,
    /// Zero-truncated Poisson rate used for undetected groups.
    pub group_count_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: AnalysisConfig,
    pub seeds: Seeds,
    pub rhat: BTreeMap<String, Option<f64>>,
    pub acceptance: Vec<ChainAcceptance>,
    pub versions: Versions,
    pub ess: BTreeMap<String, Option<f64>>,
    pub data: DataSummary,
    pub draws_per_chain: usize,
    pub warnings: Vec<String>,
}

fn acceptance(chains: &ChainSet) -> Vec<ChainAcceptance> {
    chains
        .chains
        .iter()
        .map(|c| {
            let burn = |a: &crate::samplers::AcceptanceCounter| {
                (a.burn_in_proposed > 0).then(|| a.burn_in_accepted as f64 / a.burn_in_proposed as f64)
            };
            ChainAcceptance {
                chain: c.index,
                r: KernelAcceptance {
                    burn_in_rate: burn(&c.stats.r),
                    rate: c.stats.r.rate(),
                    final_step: c.final_steps.0,
                },
                psi: KernelAcceptance {
                    burn_in_rate: burn(&c.stats.psi),
                    rate: c.stats.psi.rate(),
                    final_step: c.final_steps.1,
                },
                slice_evaluations_per_update: c.stats.slice_evaluations as f64
                    / c.stats.slice_updates.max(1) as f64,
                init_attempts: c.init_attempts,
            }
        })
        .collect()
}

/// Warnings derived from a posterior summary.
pub fn fit_warnings(summary: &PosteriorSummary, n_detected: usize, augmentation: usize, n_name: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (q, v) in summary.unconverged() {
        out.push(format!("convergence: R-hat of {q} is {v:.3} (> {RHAT_THRESHOLD})"));
    }
    if n_detected == 0 {
        out.push("no detections: the posterior of N is dominated by the prior".to_string());
    }
    if let Some(n) = summary.get(n_name) {
        if n.q975 >= 0.95 * augmentation as f64 {
            out.push(format!(
                "the upper credible limit of {n_name} ({}) is near the augmentation bound {augmentation}; increase it",
                n.q975
            ));
        }
    }
    out
}

fn manifest_base(
    cfg: &AnalysisConfig,
    chains: &ChainSet,
    summary: &PosteriorSummary,
    data: DataSummary,
    warnings: Vec<String>,
) -> RunManifest {
    RunManifest {
        config: cfg.clone(),
        seeds: Seeds {
            base: chains.config.sampler.rng_seed,
            chain_streams: chains.chains.iter().map(|c| c.index as u64).collect(),
        },
        rhat: summary.rows.iter().map(|r| (r.quantity.clone(), r.rhat)).collect(),
        acceptance: acceptance(chains),
        versions: Versions::default(),
        ess: summary
            .rows
            .iter()
            .map(|r| (r.quantity.clone(), r.ess.is_finite().then_some(r.ess)))
            .collect(),
        data,
        draws_per_chain: chains.draws_per_chain(),
        warnings,
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), num)
}

/// Label of `B_Q` in reports.
fn remaining_label(q: usize) -> String {
    format!("B_{q}")
}

/// Posterior summary table: quantity, mean, sd, 2.5%, 97.5%, R-hat, ESS.
pub fn write_summary(path: &Path, summary: &PosteriorSummary, order: &[(&str, String)]) -> Result<()> {
    let rows = order.iter().filter_map(|(name, label)| {
        summary.get(name).map(|r| {
            vec![
                label.clone(),
                num(r.mean),
                num(r.sd),
                num(r.q025),
                num(r.q975),
                opt(r.rhat),
                num(r.ess),
            ]
        })
    });
    write_rows(path, &header(&["quantity", "mean", "sd", "q025", "q975", "rhat", "ess"]), rows)
}

fn write_rows_table(path: &Path, model: &AugmentedModel) -> Result<()> {
    let records = model.history().records();
    write_rows(
        path,
        &header(&["row", "id", "phase", "count"]),
        (0..model.m()).map(|i| match records.get(i) {
            Some(r) => vec![(i + 1).to_string(), r.bug_id.clone(), r.phase.to_string(), r.count.to_string()],
            None => vec![(i + 1).to_string(), String::new(), String::new(), String::new()],
        }),
    )
}

fn draws_header(m: usize, grouped: bool) -> Vec<String> {
    let mut h = header(&["iteration", "r", "psi"]);
    h.extend((1..=m).map(|i| format!("s_{i}")));
    if grouped {
        h.extend((1..=m).map(|i| format!("d_{i}")));
    }
    h
}

fn write_draws(path: &Path, chain: &crate::engine::Chain, multiplicity: Option<&[Vec<u64>]>, m: usize) -> Result<()> {
    let rows = chain.iterations.iter().zip(&chain.draws).enumerate().map(|(k, (it, d))| {
        let mut row = Vec::with_capacity(3 + 2 * m);
        row.push(it.to_string());
        row.push(num(d.r));
        row.push(num(d.psi));
        row.extend(d.effective_sizes().iter().map(|s| s.to_string()));
        if let Some(mult) = multiplicity {
            row.extend(mult[k].iter().map(|w| w.to_string()));
        }
        row
    });
    write_rows(path, &draws_header(m, multiplicity.is_some()), rows)
}

pub fn chain_file(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("chain_{chain}.csv"))
}

pub fn draws_file(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("draws_{chain}.csv"))
}

/// Write an ungrouped fit: per-chain scalar and state tables, row and phase
/// tables, summary and manifest.
pub fn write_fit(
    dir: &Path,
    cfg: &AnalysisConfig,
    model: &AugmentedModel,
    chains: &ChainSet,
    summary: &PosteriorSummary,
    mut warnings: Vec<String>,
    multi_detection_rows: usize,
) -> Result<RunManifest> {
    create_dir(dir)?;
    let names: Vec<&str> = Quantity::ALL.iter().map(|q| q.name()).collect();
    let mut h = header(&["iteration"]);
    h.extend(names.iter().map(|s| s.to_string()));
    for chain in &chains.chains {
        let rows = chain.iterations.iter().zip(&chain.scalars).map(|(it, s)| {
            vec![
                it.to_string(),
                s.n.to_string(),
                num(s.r),
                num(s.psi),
                s.total_size.to_string(),
                s.remaining_size.to_string(),
            ]
        });
        write_rows(&chain_file(dir, chain.index), &h, rows)?;
        write_draws(&draws_file(dir, chain.index), chain, None, model.m())?;
    }
    write_rows_table(&dir.join("rows.csv"), model)?;
    write_phases(&dir.join("phases.csv"), model.plan().observed_inputs())?;
    let q = model.plan().observed_phases();
    let order = [
        ("N", "N".to_string()),
        ("psi", "psi".to_string()),
        ("r", "r".to_string()),
        ("remaining_size", remaining_label(q)),
        ("total_size", "total_size".to_string()),
    ];
    write_summary(&dir.join("summary.csv"), summary, &order)?;
    warnings.extend(fit_warnings(summary, model.n_detected(), model.m(), "N"));
    let data = DataSummary {
        variant: ModelVariant::Ungrouped,
        detected_rows: model.n_detected(),
        detected_bugs: model.n_detected() as u64,
        augmentation: model.m(),
        observed_inputs: model.plan().observed_inputs().to_vec(),
        total_detections: model.history().total_detections(),
        multi_detection_rows,
        group_count_rate: None,
    };
    let manifest = manifest_base(cfg, chains, summary, data, warnings);
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Write a grouped fit. Chain tables carry `N_G` and the bug count `N`;
/// state tables add the multiplicity of every row.
pub fn write_grouped_fit(
    dir: &Path,
    cfg: &AnalysisConfig,
    fit: &GroupedFit,
    summary: &PosteriorSummary,
    mut warnings: Vec<String>,
) -> Result<RunManifest> {
    create_dir(dir)?;
    let mut h = header(&["iteration"]);
    h.extend(GROUPED_QUANTITIES.iter().map(|s| s.to_string()));
    let m = fit.model.m();
    for (c, chain) in fit.chains.chains.iter().enumerate() {
        let rows = chain.iterations.iter().zip(&fit.scalars[c]).map(|(it, s)| {
            vec![
                it.to_string(),
                s.n_groups.to_string(),
                s.n_bugs.to_string(),
                num(s.psi),
                num(s.r),
                s.total_size.to_string(),
                s.remaining_size.to_string(),
            ]
        });
        write_rows(&chain_file(dir, chain.index), &h, rows)?;
        write_draws(&draws_file(dir, chain.index), chain, Some(&fit.multiplicity[c]), m)?;
    }
    write_rows_table(&dir.join("rows.csv"), &fit.model)?;
    write_phases(&dir.join("phases.csv"), fit.data.plan().observed_inputs())?;
    let q = fit.data.plan().observed_phases();
    let order = [
        ("N_G", "N_G".to_string()),
        ("psi", "psi".to_string()),
        ("N", "N".to_string()),
        ("r", "r".to_string()),
        ("remaining_size", remaining_label(q)),
        ("total_size", "total_size".to_string()),
    ];
    write_summary(&dir.join("summary.csv"), summary, &order)?;
    warnings.extend(fit_warnings(summary, fit.data.n_groups_observed(), m, "N_G"));
    warnings.push(format!(
        "undetected groups hold a zero-truncated Poisson number of bugs with mean {:.4} (rate {:.4})",
        fit.prior.mean(),
        fit.prior.rate
    ));
    let data = DataSummary {
        variant: ModelVariant::Grouped,
        detected_rows: fit.data.n_groups_observed(),
        detected_bugs: fit.data.n_detected_bugs(),
        augmentation: m,
        observed_inputs: fit.data.plan().observed_inputs().to_vec(),
        total_detections: fit.model.history().total_detections(),
        multi_detection_rows: fit.data.groups().iter().filter(|g| g.detected > 1).count(),
        group_count_rate: Some(fit.prior.rate),
    };
    let manifest = manifest_base(cfg, &fit.chains, summary, data, warnings);
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A fit directory read back for prediction.
#[derive(Debug, Clone)]
pub struct LoadedFit {
    pub manifest: RunManifest,
    pub plan: PhasePlan,
    /// Observed detection phase per row.
    pub observed: Vec<Option<usize>>,
    pub draws: Vec<PredictiveDraw>,
}

#[derive(Debug, Deserialize)]
struct RowsRow {
    #[allow(dead_code)]
    row: usize,
    #[allow(dead_code)]
    id: String,
    phase: Option<usize>,
}

pub fn load_fit(dir: &Path) -> Result<LoadedFit> {
    let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
    let plan = read_phases_file(&dir.join("phases.csv"))?;
    let mut observed = Vec::new();
    let rows_path = dir.join("rows.csv");
    for (k, rec) in csv_reader(open(&rows_path)?).deserialize::<RowsRow>().enumerate() {
        observed.push(rec.map_err(|e| record_error(e, k + 2))?.phase);
    }
    let m = observed.len();
    let grouped = manifest.data.variant == ModelVariant::Grouped;
    let width = 3 + m * if grouped { 2 } else { 1 };
    let mut draws = Vec::new();
    for &stream in &manifest.seeds.chain_streams {
        let chain = stream as usize;
        let path = draws_file(dir, chain);
        let mut rdr = csv_reader(open(&path)?);
        if rdr.headers()?.len() != width {
            return Err(Error::validation(
                Some(1),
                format!("{}: expected {width} columns for {m} rows", path.display()),
            ));
        }
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| record_error(e, line))?;
            let field = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| Error::validation(Some(line), "short record"))
            };
            let parse_u = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::validation(Some(line), format!("bad integer `{s}`")))
            };
            let iteration = parse_u(field(0)?)? as usize;
            let r: f64 = field(1)?
                .parse()
                .map_err(|_| Error::validation(Some(line), "bad r"))?;
            let sizes = (0..m).map(|i| parse_u(field(3 + i)?)).collect::<Result<Vec<_>>>()?;
            let multiplicity = if grouped {
                Some((0..m).map(|i| parse_u(field(3 + m + i)?)).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            draws.push(PredictiveDraw {
                chain,
                iteration,
                r,
                sizes,
                multiplicity,
            });
        }
    }
    Ok(LoadedFit {
        manifest,
        plan,
        observed,
        draws,
    })
}

// ------------------------------------------------------------ prediction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    /// Threshold as text so that `inf` survives JSON.
    pub epsilon: String,
    pub target: f64,
    pub horizon: usize,
    pub observed_phases: usize,
    pub future_inputs: Vec<u64>,
    pub seed: u64,
    pub draws: usize,
    /// First phase with reliability at or above the target.
    pub crossing_phase: Option<usize>,
    pub reliability_at_horizon: f64,
    pub censored_fraction: f64,
}

/// Reliability curve, stopping-phase distribution and headline report.
pub fn write_prediction(dir: &Path, result: &PredictionResult, seed: u64) -> Result<PredictionReport> {
    create_dir(dir)?;
    let plan = &result.plan;
    let q = plan.observed_phases();
    let eps = result.epsilon.to_string();
    write_rows(
        &dir.join("reliability.csv"),
        &header(&["phase", "gamma", "threshold", "future_inputs"]),
        result.reliability.iter().enumerate().map(|(j, g)| {
            let phase = j + 1;
            let inputs = if phase > q { plan.inputs(phase).to_string() } else { String::new() };
            vec![phase.to_string(), num(*g), eps.clone(), inputs]
        }),
    )?;
    let (counts, censored) = result.stopping_distribution();
    let total = result.draws.len().max(1) as f64;
    let mut rows: Vec<Vec<String>> = counts
        .iter()
        .enumerate()
        .map(|(j, &c)| vec![(j + 1).to_string(), c.to_string(), num(c as f64 / total)])
        .collect();
    rows.push(vec![format!("{}+", plan.horizon()), censored.to_string(), num(censored as f64 / total)]);
    write_rows(&dir.join("stopping.csv"), &header(&["phase", "count", "fraction"]), rows)?;
    let report = PredictionReport {
        epsilon: eps,
        target: result.target,
        horizon: plan.horizon(),
        observed_phases: q,
        future_inputs: plan.all_inputs()[q..].to_vec(),
        seed,
        draws: result.draws.len(),
        crossing_phase: result.crossing_phase,
        reliability_at_horizon: *result.reliability.last().unwrap_or(&0.0),
        censored_fraction: result.censored_fraction(),
    };
    write_json(&dir.join("prediction.json"), &report)?;
    Ok(report)
}

// ----------------------------------------------------------------- study

/// Per-replicate table plus the aggregated report as JSON.
pub fn write_study(dir: &Path, report: &StudyReport) -> Result<()> {
    create_dir(dir)?;
    let id = &report.scenario.scenario_id;
    write_rows(
        &dir.join(format!("{id}_replicates.csv")),
        &header(&[
            "replicate",
            "detected_bugs",
            "total_detections",
            "n_mean",
            "n_q025",
            "n_q975",
            "n_rb",
            "n_cv",
            "n_covered",
            "r_mean",
            "r_rb",
            "r_cv",
            "r_covered",
            "max_rhat",
            "crossing_phase",
        ]),
        report.replicates.iter().map(|r| {
            vec![
                r.replicate.to_string(),
                r.n_detected.to_string(),
                r.total_detections.to_string(),
                num(r.n.mean),
                num(r.n.q025),
                num(r.n.q975),
                num(r.n.relative_bias),
                num(r.n.cv),
                r.n.covered.to_string(),
                num(r.r.mean),
                num(r.r.relative_bias),
                num(r.r.cv),
                r.r.covered.to_string(),
                opt(r.max_rhat),
                r.crossing_phase.map_or(String::new(), |c| c.to_string()),
            ]
        }),
    )?;
    write_rows(
        &dir.join(format!("{id}_accuracy.csv")),
        &header(&["parameter", "rb", "cv", "cp"]),
        [("N", &report.n), ("r", &report.r)].into_iter().map(|(name, a)| {
            vec![name.to_string(), num(a.relative_bias.mean), num(a.cv.mean), num(a.coverage)]
        }),
    )?;
    write_json(&dir.join(format!("{id}_report.json")), report)
}
