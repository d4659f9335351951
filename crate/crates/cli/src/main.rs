use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use vinestress::Treatment;
use vinestress_cli::ingest::{ingest, Kind};
use vinestress_cli::pipeline::{self, RunMode, SelectionRequest};
use vinestress_cli::{fixture, service, PipelineError, Project};

#[derive(Parser)]
#[command(name = "vinestress", version, about = "Vine water-deficit software sensor")]
struct Cli {
    /// Project directory (holds vinestress.toml)
    #[arg(long, global = true, default_value = ".")]
    project: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Auto,
    Pending,
}

impl From<Mode> for RunMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Auto => RunMode::Auto,
            Mode::Pending => RunMode::Pending,
        }
    }
}

/// Restricts a per-plot verb; all configured plot-treatments otherwise.
#[derive(clap::Args)]
struct Target {
    #[arg(long)]
    plot: Option<String>,
    #[arg(long)]
    treatment: Option<Treatment>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and store raw CSV files
    Ingest {
        /// meteo, sapflow, phenology, lwp or fruit
        kind: Kind,
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Site of a meteo file
        #[arg(long)]
        site: Option<String>,
    },
    /// Daily weather and thermal time
    Meteo {
        #[arg(long)]
        site: Option<String>,
    },
    /// Sap-flow QC and daily transpiration
    Sapflow(Target),
    /// Phenology calendar, T/ETref ratio and breakpoint candidates
    Candidates(Target),
    /// Commit a breakpoint selection
    Select {
        #[arg(long)]
        plot: String,
        #[arg(long)]
        treatment: Treatment,
        /// 1-based candidate index
        #[arg(long, conflicts_with_all = ["date", "k_star"])]
        index: Option<usize>,
        #[arg(long, requires = "k_star")]
        date: Option<NaiveDate>,
        #[arg(long, requires = "date")]
        k_star: Option<f64>,
        #[arg(long)]
        author: String,
        /// Replace an existing selection
        #[arg(long)]
        force: bool,
    },
    /// Basal crop coefficient and stress coefficient series
    Ks {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum, default_value = "auto")]
        mode: Mode,
    },
    /// Window integrals of Ks
    Aggregate,
    /// Regression trees on the integrals
    Tree,
    /// Functional linear regression on the Ks curves
    Flrti,
    /// Markdown report of the current artifacts
    Report,
    /// Candidate-review HTTP service
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Static client directory (defaults to <project>/ui when present)
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Whole pipeline, every plot-treatment
    Run {
        #[arg(long, value_enum, default_value = "auto")]
        mode: Mode,
    },
    /// Write the synthetic fixture project into --project and ingest it
    Fixture {
        #[arg(long, default_value_t = fixture::DEFAULT_SEED)]
        seed: u64,
    },
}

fn targets(project: &Project, t: &Target) -> Result<Vec<(String, Treatment)>, PipelineError> {
    let all = pipeline::plot_treatments(project)?;
    let picked: Vec<_> = all
        .into_iter()
        .filter(|(p, tr)| t.plot.as_ref().is_none_or(|x| x == p) && t.treatment.is_none_or(|x| x == *tr))
        .collect();
    if picked.is_empty() {
        return Err(PipelineError::NotFound("no matching plot-treatment with sap-flow data".into()));
    }
    Ok(picked)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), PipelineError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| PipelineError::Internal(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    if let Command::Fixture { seed } = cli.command {
        let (_, fx) = fixture::create_project(&cli.project, seed)?;
        println!("fixture project with {} plot-treatments written to {}", fx.truths.len(), cli.project.display());
        return Ok(());
    }
    let project = Project::open(&cli.project)?;
    match cli.command {
        Command::Fixture { .. } => unreachable!("handled above"),
        Command::Ingest { kind, files, site } => {
            let report = ingest(&project, kind, &files, site.as_deref())?;
            for issue in &report.rejected {
                eprintln!("rejected {issue}");
            }
            println!("{} rows accepted, {} rejected", report.accepted_rows, report.rejected.len());
            for a in &report.artifacts {
                println!("wrote {a}");
            }
        }
        Command::Meteo { site } => {
            let sites: Vec<String> = match site {
                Some(s) => vec![s],
                None => project.config.sites.iter().map(|s| s.name.clone()).collect(),
            };
            for s in sites {
                let days = pipeline::stage_meteo(&project, &s)?;
                println!("{s}: {} days", days.len());
            }
        }
        Command::Sapflow(t) => {
            for (plot, tr) in targets(&project, &t)? {
                let ts = pipeline::stage_sapflow(&project, &plot, tr)?;
                println!("{plot}/{tr}: {} days", ts.daily.len());
            }
        }
        Command::Candidates(t) => {
            for (plot, tr) in targets(&project, &t)? {
                if !project.exists(&pipeline::transpiration_file(&plot, tr)) {
                    pipeline::stage_sapflow(&project, &plot, tr)?;
                }
                pipeline::stage_calendar(&project, &plot, tr)?;
                let det = pipeline::stage_candidates(&project, &plot, tr)?;
                match det.eliminated_by {
                    Some(rule) if det.candidates.is_empty() => println!("{plot}/{tr}: no candidates, eliminated by {rule:?}"),
                    _ => println!("{plot}/{tr}: {} candidates", det.candidates.len()),
                }
                for (i, c) in det.candidates.iter().enumerate() {
                    println!("  {:>2}  {}  gdd {:.1}  K {:.3}", i + 1, c.date, c.gdd_cum, c.k_value);
                }
            }
        }
        Command::Select {
            plot,
            treatment,
            index,
            date,
            k_star,
            author,
            force,
        } => {
            let request = match (index, date, k_star) {
                (Some(index), _, _) => SelectionRequest::Index { index },
                (None, Some(t_kstar), Some(k_star)) => SelectionRequest::Explicit { t_kstar, k_star },
                _ => return Err(PipelineError::Validation("give --index or both --date and --k-star".into())),
            };
            let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
            let rec = pipeline::commit_selection(&project, &plot, treatment, request, &author, force, &now)?;
            print_json(&rec)?;
        }
        Command::Ks { target, mode } => {
            let mut pending = Vec::new();
            for (plot, tr) in targets(&project, &target)? {
                match pipeline::stage_ks(&project, &plot, tr, mode.into())? {
                    Some(ks) => println!("{plot}/{tr}: {} days", ks.points.len()),
                    None => pending.push((plot, tr)),
                }
            }
            project.save_manifest()?;
            if !pending.is_empty() {
                return Err(PipelineError::AwaitingSelection(pending));
            }
        }
        Command::Aggregate => {
            let rows = pipeline::stage_aggregate(&project)?;
            println!("{} rows written to {}", rows.len(), pipeline::AGGREGATES_FILE);
        }
        Command::Tree => {
            for (s, _) in pipeline::stage_tree(&project)? {
                print_json(&s)?;
            }
        }
        Command::Flrti => {
            for (s, _, _) in pipeline::stage_flrti(&project)? {
                print_json(&s)?;
            }
        }
        Command::Report => {
            print!("{}", pipeline::stage_report(&project)?);
        }
        Command::Serve { port, host, ui } => {
            let ui = ui.or_else(|| Some(project.path("ui")).filter(|p| p.is_dir()));
            let rt = tokio::runtime::Runtime::new().map_err(PipelineError::io("start runtime"))?;
            rt.block_on(service::serve(project, SocketAddr::new(host, port), ui))?;
            return Ok(());
        }
        Command::Run { mode } => {
            let summary = pipeline::run_all(&project, mode.into())?;
            for (k, n) in &summary.candidates {
                println!("{k}: {n} candidates");
            }
            println!("report written to {}", pipeline::REPORT_FILE);
        }
    }
    project.save_manifest()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
