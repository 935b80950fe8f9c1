use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use battx::identification::{
    apply_fit, default_bounds, fit_core_temperature, fit_electrolyte_arrhenius, fit_ocv, fit_ro, fit_solid,
    fit_thermal, initial_params, nls::configure_threads_from_env, pulse_samples, run_pipeline, Experiments, FitResult,
    KappaGrid, NlsOptions, ParamBounds, PipelineOptions, GROUP_ELECTROLYTE, GROUP_OCV, GROUP_RO, GROUP_SOLID,
    GROUP_THERMAL,
};
use battx::io::{
    load_bounds, load_dataset, load_fit, load_params, load_profile, write_dataset, write_fit, write_params,
    write_profile, write_trace,
};
use battx::profiles::ProfileSpec;
use battx::simulator::{simulate, InitialCondition, SimOptions};
use battx::synthetic::{experiments, noisy, record, Design};
use battx::validation::{run_suite, Suite, ValidationOptions};
use battx::{Dataset, Error, ModelParams};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(
    name = "battx",
    version,
    about = "Lithium-ion cell model: simulation, identification and validation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a current profile and write the trace as CSV.
    Simulate {
        /// Parameter JSON; the bundled reference cell when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Profile CSV to apply.
        #[arg(long, conflicts_with = "gen", required_unless_present = "gen")]
        profile: Option<PathBuf>,
        /// Generated profile, e.g. `constant:1C`, `evtol`, `udds:-8:5:10`.
        #[arg(long)]
        gen: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        soc0: f64,
        /// Integration step, seconds.
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        /// Trace row spacing, seconds.
        #[arg(long, default_value_t = 1.0)]
        interval: f64,
        /// Capacity for C-rate conversion of generated profiles, Ah.
        #[arg(long, default_value_t = 2.5)]
        capacity: f64,
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
    },
    /// Identify one parameter group, or all five in order.
    Identify {
        #[arg(long, value_enum)]
        step: Step,
        /// Dataset CSV for a single step; for `all`, a directory holding
        /// ocv.csv, pulse.csv, solid.csv, thermal.csv and electrolyte.csv.
        #[arg(long)]
        data: PathBuf,
        /// Fixed structure (ladder ratios, reference temperature, cutoffs).
        /// The bundled reference cell when omitted.
        #[arg(long)]
        params_in: Option<PathBuf>,
        /// Bounds JSON; built-in search ranges when omitted.
        #[arg(long)]
        bounds: Option<PathBuf>,
        /// Output directory; also where earlier steps' fits are read from.
        #[arg(long, default_value = "identified")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Refinement rounds after the first pass of `all`.
        #[arg(long)]
        refine_rounds: Option<usize>,
    },
    /// Write a generated current profile as CSV.
    Generate {
        /// Profile spec, e.g. `evtol`, `pulse`, `constant:0.5C:3600`.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 2.5)]
        capacity: f64,
        #[arg(long, default_value = "profile.csv")]
        out: PathBuf,
    },
    /// Simulate a synthetic measurement dataset, optionally with noise.
    Synth {
        #[arg(long)]
        params: Option<PathBuf>,
        /// `ocv`, `pulse`, `solid`, `thermal`, `electrolyte`, `all` (a
        /// directory of all five) or a profile spec.
        #[arg(long)]
        profile_kind: String,
        #[arg(long, default_value_t = 0.0)]
        noise_mv: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_k: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial SoC for profile specs.
        #[arg(long, default_value_t = 1.0)]
        soc0: f64,
        /// Sample spacing for profile specs, seconds.
        #[arg(long, default_value_t = 1.0)]
        interval: f64,
        #[arg(long, default_value = "synth.csv")]
        out: PathBuf,
    },
    /// Run the acceptance suite against a parameter set.
    Validate {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SuiteArg::Fast)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Step {
    Ocv,
    Ro,
    Solid,
    Thermal,
    Electrolyte,
    All,
}

impl Step {
    fn group(self) -> &'static str {
        match self {
            Step::Ocv => GROUP_OCV,
            Step::Ro => GROUP_RO,
            Step::Solid => GROUP_SOLID,
            Step::Thermal => GROUP_THERMAL,
            Step::Electrolyte => GROUP_ELECTROLYTE,
            Step::All => "all",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Fast,
    Full,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("parameter file not found: {0}")]
    ParamsNotFound(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::ParamsNotFound(_) | CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
            CliError::Core(e) => match e {
                Error::Domain { .. }
                | Error::DegenerateSpectrum(..)
                | Error::IllConditioned(_)
                | Error::NonFinite { .. }
                | Error::Identifiability(_)
                | Error::Optimization(_) => 1,
                _ => 2,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    inputs: Vec<String>,
    params_sha256: Option<String>,
    seed: Option<u64>,
    version: &'static str,
    duration_s: f64,
}

impl RunManifest {
    fn new(
        command: &str,
        inputs: &[&Path],
        params: &ModelParams,
        seed: Option<u64>,
        started: Instant,
    ) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            params_sha256: Some(params_hash(params)?),
            seed,
            version: env!("CARGO_PKG_VERSION"),
            duration_s: started.elapsed().as_secs_f64(),
        })
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::from)?;
        write_text(path, &(text + "\n"))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

/// SHA-256 of the canonical JSON serialization of `params`.
fn params_hash(params: &ModelParams) -> CliResult<String> {
    let bytes = serde_json::to_vec(params).map_err(Error::from)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Manifest next to a file artifact.
fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn params_from(path: Option<&Path>) -> CliResult<ModelParams> {
    match path {
        None => Ok(ModelParams::default()),
        Some(p) if !p.exists() => Err(CliError::ParamsNotFound(p.display().to_string())),
        Some(p) => Ok(load_params(p)?),
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn parse_spec(text: &str) -> CliResult<ProfileSpec> {
    ProfileSpec::parse(text).map_err(|e| CliError::Usage(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    params: Option<&Path>,
    profile: Option<&Path>,
    gen: Option<&str>,
    soc0: f64,
    step: f64,
    interval: f64,
    capacity: f64,
    out: &Path,
) -> CliResult<()> {
    let started = Instant::now();
    let params_path = params;
    let params = params_from(params_path)?;
    let profile_path = profile;
    let profile = match (profile, gen) {
        (Some(p), _) => load_profile(p)?,
        (None, Some(g)) => parse_spec(g)?.build(capacity)?,
        (None, None) => return Err(CliError::Usage("either --profile or --gen is required".into())),
    };
    let options = SimOptions {
        step,
        output_interval: interval.max(step),
        initial: InitialCondition::Soc(soc0),
        ..SimOptions::default()
    };
    options.validate()?;
    let trace = simulate(&profile, &params, &options)?;
    ensure_parent(out)?;
    write_trace(&trace, out)?;
    let inputs: Vec<&Path> = params_path.into_iter().chain(profile_path).collect();
    let min_v = trace.voltages().iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let max_t = trace
        .surface_temperatures()
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    println!("termination: {:?}", trace.termination);
    println!("duration: {:.1} s", trace.duration());
    println!("final SoC: {:.2}%", trace.last().soc * 100.0);
    println!("min voltage: {min_v:.4} V");
    println!("max surface temperature: {max_t:.2} K");
    println!("trace: {}", out.display());
    RunManifest::new("simulate", &inputs, &params, None, started)?.write(&manifest_path(out))
}

const STEP_FILES: [(&str, &str); 5] = [
    (GROUP_OCV, "ocv.csv"),
    (GROUP_RO, "pulse.csv"),
    (GROUP_SOLID, "solid.csv"),
    (GROUP_THERMAL, "thermal.csv"),
    (GROUP_ELECTROLYTE, "electrolyte.csv"),
];

fn fit_path(out: &Path, group: &str) -> PathBuf {
    out.join(format!("fit_{group}.json"))
}

/// Fits of the steps before `step`, read from `out`.
fn earlier_fits(out: &Path, step: Step) -> CliResult<Vec<FitResult>> {
    let order = [Step::Ocv, Step::Ro, Step::Solid, Step::Thermal, Step::Electrolyte];
    let position = order.iter().position(|s| *s == step).unwrap_or(0);
    let mut fits = Vec::new();
    for s in &order[..position] {
        let path = fit_path(out, s.group());
        if !path.exists() {
            return Err(Error::Ordering(format!(
                "step `{}` needs the `{}` step's result at {}; run the steps in order ocv, ro, solid, thermal, electrolyte",
                step.group(),
                s.group(),
                path.display()
            ))
            .into());
        }
        fits.push(load_fit(&path)?);
    }
    Ok(fits)
}

fn load_experiments(dir: &Path) -> CliResult<Experiments> {
    let load = |name: &str| load_dataset(&dir.join(name));
    Ok(Experiments {
        ocv: load(STEP_FILES[0].1)?,
        pulse: load(STEP_FILES[1].1)?,
        solid: load(STEP_FILES[2].1)?,
        thermal: load(STEP_FILES[3].1)?,
        electrolyte: load(STEP_FILES[4].1)?,
    })
}

fn print_fit(fit: &FitResult) {
    println!(
        "{}: residual RMS {:.4e}, {} iterations, converged {}",
        fit.group, fit.residual_rms, fit.iterations, fit.converged
    );
    if fit.group != GROUP_OCV {
        for (name, v) in &fit.estimates {
            println!("    {name} = {v:.6}");
        }
    }
    for w in &fit.warnings {
        println!("    warning: {w}");
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_identify(
    step: Step,
    data: &Path,
    params_in: Option<&Path>,
    bounds_path: Option<&Path>,
    out: &Path,
    seed: u64,
    refine_rounds: Option<usize>,
) -> CliResult<()> {
    let started = Instant::now();
    let structure = params_from(params_in)?;
    let bounds: ParamBounds = match bounds_path {
        Some(p) => load_bounds(p)?,
        None => default_bounds(),
    };
    let nls = NlsOptions::default().with_seed(seed);
    let mut options = PipelineOptions {
        nls: nls.clone(),
        ..PipelineOptions::default()
    };
    if let Some(r) = refine_rounds {
        options.refine_rounds = r;
    }
    let base = initial_params(&structure, &bounds)?;
    ensure_dir(out)?;

    let (params, fits) = if step == Step::All {
        let experiments = load_experiments(data)?;
        let result = run_pipeline(&experiments, &base, &bounds, &options)?;
        let text = serde_json::to_string_pretty(&result.rounds).map_err(Error::from)? + "\n";
        write_text(&out.join("rounds.json"), &text)?;
        (
            result.params,
            result.fits.all().into_iter().cloned().collect::<Vec<_>>(),
        )
    } else {
        let earlier = earlier_fits(out, step)?;
        let refs: Vec<&FitResult> = earlier.iter().collect();
        let dataset = load_dataset(data)?;
        let fits = match step {
            Step::Ocv => vec![fit_ocv(&dataset, &bounds, &nls)?],
            Step::Ro => {
                let (_, samples) = pulse_samples(&dataset, options.edge_threshold_c, options.stop_edges_only)?;
                let mut fit = fit_ro(&samples.samples, &bounds, &nls)?;
                fit.warnings.extend(samples.warnings);
                vec![fit]
            }
            Step::Solid => vec![fit_solid(&dataset, &base, refs[0], refs[1], &bounds, &nls)?],
            Step::Thermal => vec![fit_thermal(&dataset, &base, &refs, &bounds, &nls, options.replay_step)?],
            Step::Electrolyte => {
                let electrolyte = fit_electrolyte_arrhenius(
                    &dataset,
                    &base,
                    &refs,
                    &bounds,
                    &KappaGrid::default_for(&bounds)?,
                    &nls,
                    options.replay_step,
                )?;
                // The high-rate record also settles the core temperature,
                // so the thermal fit is rewritten alongside.
                let mut all = refs.clone();
                all.push(&electrolyte);
                let (thermal, electrolyte) =
                    fit_core_temperature(&dataset, &base, &all, &bounds, &nls, options.replay_step)?;
                vec![thermal, electrolyte]
            }
            Step::All => unreachable!("handled above"),
        };
        let mut params = base.clone();
        for f in earlier.iter().chain(&fits) {
            apply_fit(&mut params, f)?;
        }
        (params, fits)
    };

    for fit in &fits {
        write_fit(fit, &fit_path(out, &fit.group))?;
        print_fit(fit);
    }
    let params_out = out.join("params.json");
    write_params(&params, &params_out)?;
    println!("parameters: {}", params_out.display());
    let mut inputs: Vec<&Path> = vec![data];
    inputs.extend(params_in);
    inputs.extend(bounds_path);
    RunManifest::new(
        &format!("identify --step {}", step.group()),
        &inputs,
        &structure,
        Some(seed),
        started,
    )?
    .write(&out.join("manifest.json"))
}

fn cmd_generate(kind: &str, capacity: f64, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    let profile = parse_spec(kind)?.build(capacity)?;
    ensure_parent(out)?;
    write_profile(&profile, out)?;
    println!(
        "{} samples over {:.1} s written to {}",
        profile.samples().len(),
        profile.duration(),
        out.display()
    );
    let manifest = RunManifest {
        command: format!("generate --kind {kind}"),
        inputs: Vec::new(),
        params_sha256: None,
        seed: None,
        version: env!("CARGO_PKG_VERSION"),
        duration_s: started.elapsed().as_secs_f64(),
    };
    manifest.write(&manifest_path(out))
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    params_path: Option<&Path>,
    kind: &str,
    noise_mv: f64,
    noise_k: f64,
    seed: u64,
    soc0: f64,
    interval: f64,
    out: &Path,
) -> CliResult<()> {
    let started = Instant::now();
    let params = params_from(params_path)?;
    let design = Design::default();
    let (v_sigma, t_sigma) = (noise_mv * 1e-3, noise_k);
    let inputs: Vec<&Path> = params_path.into_iter().collect();
    let manifest = |started: Instant| {
        RunManifest::new(
            &format!("synth --profile-kind {kind}"),
            &inputs,
            &params,
            Some(seed),
            started,
        )
    };

    let step_kinds = ["ocv", "pulse", "solid", "thermal", "electrolyte"];
    if kind == "all" || step_kinds.contains(&kind) {
        let clean = experiments(&params, &design)?;
        let data = noisy(&clean, v_sigma, t_sigma, seed)?;
        let records = [
            ("ocv", &data.ocv),
            ("pulse", &data.pulse),
            ("solid", &data.solid),
            ("thermal", &data.thermal),
            ("electrolyte", &data.electrolyte),
        ];
        if kind == "all" {
            ensure_dir(out)?;
            for (name, d) in records {
                write_dataset(d, &out.join(format!("{name}.csv")))?;
                println!("{name}: {} samples", d.len());
            }
            return manifest(started)?.write(&out.join("manifest.json"));
        }
        let (_, d) = records
            .into_iter()
            .find(|(n, _)| *n == kind)
            .expect("kind checked above");
        return write_synth(d, out, manifest(started)?);
    }

    let profile = parse_spec(kind)?.build(design.nominal_capacity_ah)?;
    if !(interval.is_finite() && interval > 0.0) {
        return Err(CliError::Usage(format!("--interval {interval} must be positive")));
    }
    let end = profile.duration();
    let n = (end / interval).floor() as usize;
    let mut times: Vec<f64> = (0..=n).map(|k| k as f64 * interval).collect();
    if end - times[n] > 1e-9 {
        times.push(end);
    }
    let clean = record(&profile, &params, soc0, &times, &design)?;
    let data = battx::dataset::perturb(&clean, v_sigma, t_sigma, seed)?;
    write_synth(&data, out, manifest(started)?)
}

fn write_synth(data: &Dataset, out: &Path, manifest: RunManifest) -> CliResult<()> {
    ensure_parent(out)?;
    write_dataset(data, out)?;
    println!("{} samples written to {}", data.len(), out.display());
    manifest.write(&manifest_path(out))
}

fn cmd_validate(params_path: Option<&Path>, suite: SuiteArg, seed: u64) -> CliResult<()> {
    let params = match params_path {
        Some(p) if !p.exists() => return Err(CliError::ParamsNotFound(p.display().to_string())),
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            // Invariant failures are reported by the suite rather than at load.
            serde_json::from_str::<ModelParams>(&text).map_err(Error::from)?
        }
        None => ModelParams::default(),
    };
    let suite = match suite {
        SuiteArg::Fast => Suite::Fast,
        SuiteArg::Full => Suite::Full,
    };
    let options = ValidationOptions {
        seed,
        ..ValidationOptions::default()
    };
    let reports = run_suite(&params, suite, &options);
    for r in &reports {
        print!("{r}");
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.id.to_string())
        .collect();
    if failed.is_empty() {
        println!("all {} criteria passed", reports.len());
        Ok(())
    } else {
        Err(CliError::Failed(format!("criteria failed: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate {
            params,
            profile,
            gen,
            soc0,
            step,
            interval,
            capacity,
            out,
        } => cmd_simulate(
            params.as_deref(),
            profile.as_deref(),
            gen.as_deref(),
            soc0,
            step,
            interval,
            capacity,
            &out,
        ),
        Command::Identify {
            step,
            data,
            params_in,
            bounds,
            out,
            seed,
            refine_rounds,
        } => cmd_identify(
            step,
            &data,
            params_in.as_deref(),
            bounds.as_deref(),
            &out,
            seed,
            refine_rounds,
        ),
        Command::Generate { kind, capacity, out } => cmd_generate(&kind, capacity, &out),
        Command::Synth {
            params,
            profile_kind,
            noise_mv,
            noise_k,
            seed,
            soc0,
            interval,
            out,
        } => cmd_synth(
            params.as_deref(),
            &profile_kind,
            noise_mv,
            noise_k,
            seed,
            soc0,
            interval,
            &out,
        ),
        Command::Validate { params, suite, seed } => cmd_validate(params.as_deref(), suite, seed),
    }
}

fn main() -> ExitCode {
    configure_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
