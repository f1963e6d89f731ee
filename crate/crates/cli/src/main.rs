use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use edvcm_core::hmc::{run_hmc, SamplerConfig};
use edvcm_core::ingest::matching::{match_events, MatchConfig, MatchStatus};
use edvcm_core::io::{self, OutputHeader};
use edvcm_core::priors::PriorSpec;
use edvcm_core::simulation::study::{run_study, Method, Protocol};
use edvcm_core::summaries::{cumulative_table, summarize};

#[derive(Parser)]
#[command(name = "edvcm", version, about = "Exposure-duration varying coefficient model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match exposure events to control years and write the analytic dataset.
    Match {
        #[arg(long)]
        exposures: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        /// JSON match configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset CSV; the match report is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model by HMC and write draws, summaries and diagnostics.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// `simulation`, `application`, `independent-normal` or a JSON prior file.
        #[arg(long, default_value = "simulation")]
        priors: String,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 1000)]
        warmup: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation study and write the long-format report.
    Simulate {
        /// JSON protocol file or a preset name (full-main, desk-main, desk-missing, desk-lag).
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        nsim: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of edvcm, indep-normal, freq-glm.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit code: 2 for bad input, 3 for runtime failures.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn input(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: error.into() }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(input)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(input)?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid configuration in {}", path.display()))
        .map_err(input)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(runtime)
}

fn set_jobs(jobs: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(input(anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(runtime)?;
    }
    Ok(())
}

fn file_digest(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(input)?;
    Ok(io::config_hash(&bytes))
}

#[derive(Serialize)]
struct MatchRun<'a> {
    exposures_sha256: String,
    outcomes_sha256: String,
    config: &'a MatchConfig,
}

fn cmd_match(exposures: &Path, outcomes: &Path, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg: MatchConfig = match config {
        Some(p) => read_json(p)?,
        None => MatchConfig::default(),
    };
    cfg.validate().map_err(input)?;
    let events = io::read_exposures(&exposures.display().to_string(), open(exposures)?).map_err(input)?;
    let panel = io::read_outcomes(&outcomes.display().to_string(), open(outcomes)?).map_err(input)?;
    let result = match_events(&events, &panel, &cfg).map_err(input)?;
    let run = MatchRun {
        exposures_sha256: file_digest(exposures)?,
        outcomes_sha256: file_digest(outcomes)?,
        config: &cfg,
    };
    let header = OutputHeader::new("match", &run).map_err(runtime)?;
    io::write_dataset(create(out)?, &header, &result.dataset, &result.covariate_names).map_err(runtime)?;
    let report_path = out.with_file_name(format!(
        "{}_match_report.csv",
        out.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset")
    ));
    io::write_match_report(create(&report_path)?, &header, &result.report).map_err(runtime)?;
    let excluded = result.report.iter().filter(|r| r.status != MatchStatus::Matched).count();
    log::info!(
        "matched {} of {} events ({} units); {excluded} excluded, see {}",
        result.dataset.strata.len(),
        events.len(),
        result.dataset.n_units(),
        report_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitRun<'a> {
    data_sha256: String,
    prior: &'a PriorSpec,
    sampler: &'a SamplerConfig,
    level: f64,
}

fn load_prior(name: &str) -> Result<PriorSpec, Failure> {
    let prior = match PriorSpec::preset(name) {
        Some(p) => p,
        None => read_json(Path::new(name))?,
    };
    prior.validate().map_err(input)?;
    Ok(prior)
}

fn cmd_fit(
    data: &Path,
    priors: &str,
    sampler: SamplerConfig,
    level: f64,
    jobs: Option<usize>,
    out: &Path,
) -> Result<(), Failure> {
    set_jobs(jobs)?;
    sampler.validate().map_err(input)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(input(anyhow!("--level must lie in (0, 1)")));
    }
    let prior = load_prior(priors)?;
    let file = io::read_dataset(&data.display().to_string(), open(data)?).map_err(input)?;
    let run = FitRun {
        data_sha256: file_digest(data)?,
        prior: &prior,
        sampler: &sampler,
        level,
    };
    let header = OutputHeader::new("fit", &run).map_err(runtime)?;
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(runtime)?;

    let draws = run_hmc(&file.dataset, &prior, &sampler).map_err(runtime)?;
    let summary = summarize(&draws, level).map_err(runtime)?;
    let cumulative = cumulative_table(&draws, Some(&file.dataset), level).map_err(runtime)?;
    let diagnostics = draws.diagnostics().map_err(runtime)?;

    io::write_draws(create(&out.join("draws.csv"))?, &header, &draws).map_err(runtime)?;
    io::write_summary(create(&out.join("summary.csv"))?, &header, &summary).map_err(runtime)?;
    io::write_cumulative(create(&out.join("cumulative.csv"))?, &header, &cumulative).map_err(runtime)?;
    io::write_diagnostics(create(&out.join("diagnostics.csv"))?, &header, &diagnostics, &draws).map_err(runtime)?;
    let outputs = ["draws.csv", "summary.csv", "cumulative.csv", "diagnostics.csv"]
        .map(String::from)
        .to_vec();
    io::write_provenance(create(&out.join("provenance.json"))?, &header, &run, outputs).map_err(runtime)?;

    let flagged = io::rhat_flagged(&diagnostics);
    if !flagged.is_empty() {
        log::warn!(
            "R-hat above {} for {} parameter(s), e.g. {}; see diagnostics.csv",
            io::RHAT_FLAG,
            flagged.len(),
            flagged[0]
        );
    }
    if draws.divergences() > 0 {
        log::warn!("{} divergent transitions", draws.divergences());
    }
    Ok(())
}

fn load_protocol(spec: &str) -> Result<Protocol, Failure> {
    let path = Path::new(spec);
    if path.exists() {
        return read_json(path);
    }
    Protocol::preset(spec).ok_or_else(|| {
        input(anyhow!(
            "protocol {spec} is neither a readable file nor a preset (full-main, desk-main, desk-missing, desk-lag)"
        ))
    })
}

fn cmd_simulate(
    protocol: &str,
    nsim: Option<usize>,
    jobs: Option<usize>,
    seed: Option<u64>,
    methods: Option<Vec<String>>,
    out: &Path,
) -> Result<(), Failure> {
    set_jobs(jobs)?;
    let mut proto = load_protocol(protocol)?;
    if let Some(n) = nsim {
        proto.n_sim = n;
    }
    if let Some(s) = seed {
        proto.seed = s;
    }
    if let Some(ms) = methods {
        proto.methods = ms
            .iter()
            .map(|m| Method::parse(m).ok_or_else(|| input(anyhow!("unknown method {m:?}"))))
            .collect::<Result<_, _>>()?;
    }
    proto.validate().map_err(input)?;
    let header = OutputHeader::new("simulate", &proto).map_err(runtime)?;
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(runtime)?;
    let report = run_study(&proto).map_err(runtime)?;
    io::write_report(create(&out.join("report.csv"))?, &header, &report.long_rows()).map_err(runtime)?;
    io::write_provenance(
        create(&out.join("provenance.json"))?,
        &header,
        &proto,
        vec!["report.csv".into()],
    )
    .map_err(runtime)?;
    for sc in &report.scenarios {
        for m in &sc.methods {
            if m.failed_replicates > 0 {
                log::warn!(
                    "{} {}: {} failed replicate(s)",
                    sc.scenario,
                    m.method.as_str(),
                    m.failed_replicates
                );
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Match {
            exposures,
            outcomes,
            config,
            out,
        } => cmd_match(&exposures, &outcomes, config.as_deref(), &out),
        Command::Fit {
            data,
            priors,
            chains,
            warmup,
            samples,
            seed,
            level,
            jobs,
            out,
        } => {
            let sampler = SamplerConfig {
                n_chains: chains,
                n_warmup: warmup,
                n_samples: samples,
                seed,
                ..SamplerConfig::default()
            };
            cmd_fit(&data, &priors, sampler, level, jobs, &out)
        }
        Command::Simulate {
            protocol,
            nsim,
            jobs,
            seed,
            methods,
            out,
        } => cmd_simulate(&protocol, nsim, jobs, seed, methods, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
