use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bugsize::engine::{self, RunConfig};
use bugsize::grouped::{fit_grouped, GroupCountPrior};
use bugsize::io::{self, AnalysisConfig, ModelVariant};
use bugsize::model::AugmentedModel;
use bugsize::predictive::{self, PredictionConfig};
use bugsize::sim::{self, PhaseInputs, ScenarioSpec, StudyConfig, StudyPrediction};
use bugsize::{Error, Result};

/// Bayesian size-biased estimation of bug counts, remaining bug size and
/// optimal stopping phase from discrete software testing data.
#[derive(Debug, Parser)]
#[command(name = "bugsize", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic detection logs from a scenario file.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's replicate count.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Fit the ungrouped model to a detection log.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        phases: PathBuf,
        #[command(flatten)]
        common: FitArgs,
    },
    /// Fit the grouped model to a grouped detection log.
    FitGrouped {
        #[arg(long)]
        data: PathBuf,
        /// Phase table; optional when every phase has a detected group.
        #[arg(long)]
        phases: Option<PathBuf>,
        /// Bugs detected outside the modelled phases (added to N).
        #[arg(long)]
        offset: Option<u64>,
        #[command(flatten)]
        common: FitArgs,
    },
    /// Posterior-predictive reliability and stopping phase from a fit.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        /// Remaining-size threshold; `inf` is accepted.
        #[arg(long)]
        epsilon: f64,
        /// Test cases per future phase: one value or a comma-separated list.
        #[arg(long)]
        future_inputs: Option<String>,
        /// Last phase of the prediction horizon.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        target: Option<f64>,
        /// Prediction seed; defaults to the fit's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the fit directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the replication study for one scenario.
    Study {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        /// Augmentation bound (default 2N).
        #[arg(long)]
        augmentation: Option<usize>,
        /// Also predict the stopping phase of every replicate.
        #[arg(long)]
        predict: bool,
    },
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Analysis configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the augmentation bound from the configuration.
    #[arg(long)]
    augmentation: Option<usize>,
    /// Override the run seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl FitArgs {
    fn config(&self) -> Result<AnalysisConfig> {
        let mut cfg = match &self.config {
            Some(p) => AnalysisConfig::from_file(p)?,
            None => AnalysisConfig::default(),
        };
        if self.augmentation.is_some() {
            cfg.augmentation = self.augmentation;
        }
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            scenario,
            out,
            replicates,
        } => simulate(&scenario, &out, replicates),
        Command::Fit { data, phases, common } => fit(&data, &phases, &common),
        Command::FitGrouped {
            data,
            phases,
            offset,
            common,
        } => fit_grouped_cmd(&data, phases.as_deref(), offset, &common),
        Command::Predict {
            fit,
            epsilon,
            future_inputs,
            horizon,
            target,
            seed,
            out,
        } => predict(&fit, epsilon, future_inputs.as_deref(), horizon, target, seed, out.as_deref()),
        Command::Study {
            scenario,
            out,
            replicates,
            chains,
            iterations,
            burn_in,
            augmentation,
            predict,
        } => {
            let mut spec = read_scenario(&scenario)?;
            if let Some(k) = replicates {
                spec.replicates = k;
            }
            let mut cfg = StudyConfig::default();
            if let Some(c) = chains {
                cfg.run.n_chains = c;
            }
            if let Some(n) = iterations {
                cfg.run.n_iterations = n;
                if burn_in.is_none() {
                    cfg.run.burn_in = n / 2;
                }
            }
            if let Some(b) = burn_in {
                cfg.run.burn_in = b;
            }
            cfg.m = augmentation;
            cfg.prediction = predict.then(StudyPrediction::default);
            study(&spec, &cfg, out.as_deref())
        }
    }
}

fn read_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    ScenarioSpec::from_toml(&text)
}

fn simulate(scenario: &Path, out: &Path, replicates: Option<usize>) -> Result<()> {
    let mut spec = read_scenario(scenario)?;
    if let Some(k) = replicates {
        spec.replicates = k;
    }
    // Validate and generate everything before touching the output directory.
    spec.validate()?;
    let data = (0..spec.replicates)
        .map(|k| sim::generate(&spec, k))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    io::write_phases(&out.join("phases.csv"), spec.plan()?.observed_inputs())?;
    for (k, d) in data.iter().enumerate() {
        let stem = format!("{}_rep{:03}", spec.scenario_id, k + 1);
        io::write_detections(&out.join(format!("{stem}_detections.csv")), &d.history)?;
        io::write_truth(&out.join(format!("{stem}_truth.csv")), &d.truth)?;
    }
    println!(
        "wrote {} replicate(s) of `{}` to {}",
        spec.replicates,
        spec.scenario_id,
        out.display()
    );
    Ok(())
}

fn print_summary(summary: &engine::PosteriorSummary, warnings: &[String]) {
    println!("{:<16} {:>12} {:>12} {:>12} {:>12} {:>8}", "quantity", "mean", "sd", "2.5%", "97.5%", "R-hat");
    for r in &summary.rows {
        println!(
            "{:<16} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>8}",
            r.quantity,
            r.mean,
            r.sd,
            r.q025,
            r.q975,
            r.rhat.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
    }
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn fit(data: &Path, phases: &Path, args: &FitArgs) -> Result<()> {
    let cfg = args.config()?;
    if cfg.model != ModelVariant::Ungrouped {
        return Err(Error::Config("the configuration selects the grouped model; use `fit-grouped`".into()));
    }
    let plan = io::read_phases_file(phases)?;
    let ingested = io::read_detections_file(data, &plan)?;
    let n = ingested.history.n_detected();
    let model = AugmentedModel::new(ingested.history, cfg.augmentation_for(n))?;
    let run: RunConfig = cfg.run_config();
    let chains = engine::run(&model, &run)?;
    let summary = engine::summarize(&chains)?;
    let manifest = io::write_fit(
        &args.out,
        &cfg,
        &model,
        &chains,
        &summary,
        ingested.report.warnings.clone(),
        ingested.report.multi_detection_bugs,
    )?;
    print_summary(&summary, &manifest.warnings);
    Ok(())
}

fn fit_grouped_cmd(data: &Path, phases: Option<&Path>, offset: Option<u64>, args: &FitArgs) -> Result<()> {
    let mut cfg = args.config()?;
    cfg.model = ModelVariant::Grouped;
    if let Some(o) = offset {
        cfg.detected_offset = o;
    }
    let plan = phases.map(io::read_phases_file).transpose()?;
    // Read once to learn the group count, then again with the final bound.
    let probe = io::read_grouped_file(data, plan.as_ref(), usize::MAX, cfg.detected_offset)?;
    let m_g = cfg.augmentation_for(probe.n_groups_observed());
    let grouped = io::read_grouped_file(data, plan.as_ref(), m_g, cfg.detected_offset)?;
    let prior = GroupCountPrior::with_mean(cfg.group_count_mean.unwrap_or_else(|| grouped.mean_group_size()))?;
    let fit = fit_grouped(&grouped, &cfg.run_config(), prior)?;
    let summary = fit.summarize()?;
    let manifest = io::write_grouped_fit(&args.out, &cfg, &fit, &summary, Vec::new())?;
    print_summary(&summary, &manifest.warnings);
    Ok(())
}

fn parse_inputs(text: &str) -> Result<PhaseInputs> {
    let values = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("future inputs must be non-negative integers, got `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(match values.as_slice() {
        [t] => PhaseInputs::Constant(*t),
        _ => PhaseInputs::PerPhase(values),
    })
}

/// Future inputs for phases `Q+1..=J`.
fn resolve_future(inputs: Option<PhaseInputs>, horizon: Option<usize>, q: usize) -> Result<Vec<u64>> {
    match (inputs, horizon) {
        (Some(PhaseInputs::PerPhase(v)), None) => Ok(v),
        (Some(inputs), Some(j)) => {
            if j <= q {
                return Err(Error::Config(format!("horizon {j} must exceed the {q} observed phases")));
            }
            inputs.expand(j - q)
        }
        (Some(PhaseInputs::Constant(_)), None) => {
            Err(Error::Config("a single future-inputs value needs --horizon".into()))
        }
        (None, _) => Err(Error::Config(
            "no future inputs: pass --future-inputs or set [prediction] future_inputs".into(),
        )),
    }
}

fn predict(
    dir: &Path,
    epsilon: f64,
    future_inputs: Option<&str>,
    horizon: Option<usize>,
    target: Option<f64>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let fit = io::load_fit(dir)?;
    let section = &fit.manifest.config.prediction;
    let inputs = match future_inputs {
        Some(t) => Some(parse_inputs(t)?),
        None => section.future_inputs.clone(),
    };
    let horizon = horizon.or(section.horizon);
    let future = resolve_future(inputs, horizon, fit.plan.observed_phases())?;
    let target = target.unwrap_or(section.target);
    let cfg = PredictionConfig::new(&fit.plan, future, epsilon, target)?;
    let seed = seed.unwrap_or(fit.manifest.seeds.base);
    let result = predictive::predict(&fit.draws, &fit.observed, &cfg, seed)?;
    let report = io::write_prediction(out.unwrap_or(dir), &result, seed)?;
    match report.crossing_phase {
        Some(j) => println!(
            "reliability reaches {} at phase {j} (epsilon = {}, horizon {})",
            report.target, report.epsilon, report.horizon
        ),
        None => println!(
            "reliability stays below {} through phase {} (epsilon = {}; reached {:.4})",
            report.target, report.horizon, report.epsilon, report.reliability_at_horizon
        ),
    }
    Ok(())
}

fn study(spec: &ScenarioSpec, cfg: &StudyConfig, out: Option<&Path>) -> Result<()> {
    let report = sim::run_study(spec, cfg, |o| {
        let r = &o.report;
        eprintln!(
            "replicate {:>3}: detected {:>4}, N mean {:.1} [{:.1}, {:.1}], r mean {:.3e}",
            r.replicate + 1,
            r.n_detected,
            r.n.mean,
            r.n.q025,
            r.n.q975,
            r.r.mean
        );
    })?;
    println!("scenario {}: {} replicates", spec.scenario_id, report.replicates.len());
    println!(
        "mean detected bugs {:.1}, mean total detections {:.1}",
        report.detected.mean, report.detections.mean
    );
    println!("{:<4} {:>10} {:>10} {:>6}", "", "RB", "CV", "CP");
    for (name, a) in [("N", &report.n), ("r", &report.r)] {
        println!(
            "{:<4} {:>10.4} {:>10.4} {:>6.2}",
            name, a.relative_bias.mean, a.cv.mean, a.coverage
        );
    }
    if let Some(dir) = out {
        io::write_study(dir, &report)?;
    }
    Ok(())
}
