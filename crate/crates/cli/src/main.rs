//! `setupx` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use setupx_core::adjudication::{Adjudication, Decision};
use setupx_core::distiller::Distiller;
use setupx_core::gateway::{Gateway, Llm};
use setupx_core::kb_tools::{generate_noise, ingest_noise, kb_stats, NoiseConfig, NoiseTemplates};
use setupx_core::orchestrator::{distill_batch, load_tasks, Backends, ConfiguredBackends, Harness, RunConfig, RunRecord};
use setupx_core::retriever::RetrievalMode;
use setupx_core::store::XpuStore;
use setupx_core::trajectory::{RepoTask, Trajectory};
use setupx_core::xpu::Xpu;

#[derive(Parser)]
#[command(name = "setupx", version, about = "Experience-driven repository environment setup")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides `kb`.
    #[arg(long, global = true)]
    kb: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Set up one repository, then adjudicate it.
    Run(RunArgs),
    /// Run a list of tasks and print the category table.
    Batch(BatchArgs),
    /// Prosecute and judge a stored trajectory against an image.
    Adjudicate(AdjudicateArgs),
    /// Distil finished runs into the knowledge base.
    Distill(DistillArgs),
    /// Knowledge-base utilities.
    #[command(subcommand)]
    Kb(KbCommand),
}

#[derive(Args)]
struct AgentFlags {
    /// Disable experience retrieval.
    #[arg(long)]
    no_xpu: bool,
    /// `selector` or `direct`.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Task JSON file; otherwise use --repo and --revision.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    repo: Option<String>,
    #[arg(long)]
    revision: Option<String>,
    #[arg(long)]
    name: Option<String>,
    /// Test target; repeatable.
    #[arg(long = "target")]
    targets: Vec<String>,
    #[command(flatten)]
    agent: AgentFlags,
}

#[derive(Args)]
struct BatchArgs {
    /// JSON array or JSON Lines of tasks.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[command(flatten)]
    agent: AgentFlags,
}

#[derive(Args)]
struct AdjudicateArgs {
    #[arg(long)]
    trajectory: PathBuf,
    /// Committed image to investigate.
    #[arg(long)]
    image: String,
    /// Where to write the adjudication; defaults beside the trajectory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long, conflicts_with = "runs")]
    trajectory: Option<PathBuf>,
    #[arg(long, requires = "trajectory")]
    adjudication: Option<PathBuf>,
    /// Directory of run directories holding `record.json`.
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Distillation report output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Task name used for chat scripts and provenance when distilling a single trajectory.
    #[arg(long)]
    task_name: Option<String>,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Add entries from a JSON array of XPUs.
    Ingest {
        #[arg(long)]
        xpus: PathBuf,
    },
    /// Entry count, tier histogram and mean success rate.
    Stats,
    /// Write a copy of the store with synthetic noise added.
    Noise {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Counts per class: context perturbation, cross grafting, blur.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        counts: Option<Vec<usize>>,
        /// Replacement template file.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Remove entries distilled from the listed repositories.
    Prune {
        #[arg(long, value_delimiter = ',', required = true)]
        repos: Vec<String>,
        /// Output store; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(k) = &common.kb {
        cfg.kb = Some(k.clone());
    }
    cfg.backends.apply_env();
    Ok(cfg)
}

fn apply_agent_flags(cfg: &mut RunConfig, flags: &AgentFlags) -> Result<()> {
    if flags.no_xpu {
        cfg.xpu_enabled = false;
    }
    if let Some(m) = &flags.mode {
        cfg.retrieval.mode = match m.as_str() {
            "selector" => RetrievalMode::Selector,
            "direct" => RetrievalMode::Direct,
            other => bail!("unknown retrieval mode `{other}`"),
        };
    }
    Ok(())
}

fn open_store(path: &Path, dim: usize) -> Result<XpuStore> {
    if path.exists() {
        XpuStore::load(path, Some(dim)).with_context(|| format!("loading {}", path.display()))
    } else {
        Ok(XpuStore::new(dim))
    }
}

fn kb_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.kb.clone().context("no knowledge base given (use --kb or `kb` in the config)")
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

struct Setup {
    harness: Harness,
    kb: Option<PathBuf>,
}

fn harness(cfg: RunConfig) -> Result<Setup> {
    let prompts = cfg.prompts().context("reading prompt directory")?;
    let backends = ConfiguredBackends::new(cfg.backends.clone()).map_err(anyhow::Error::msg)?;
    let store = match &cfg.kb {
        Some(p) if cfg.xpu_enabled => Some(Arc::new(open_store(p, cfg.backends.embedding.dim)?)),
        _ => None,
    };
    let kb = cfg.kb.clone().filter(|_| store.is_some());
    Ok(Setup {
        harness: Harness::new(cfg, Arc::new(backends), prompts, store),
        kb,
    })
}

fn save_store(setup: &Setup) -> Result<()> {
    if let (Some(path), Some(store)) = (&setup.kb, &setup.harness.store) {
        store.save(path).with_context(|| format!("saving {}", path.display()))?;
    }
    Ok(())
}

fn cmd_run(common: &Common, args: &RunArgs) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    apply_agent_flags(&mut cfg, &args.agent)?;
    let task = match (&args.task, &args.repo) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RepoTask>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, Some(repo)) => {
            let revision = args.revision.as_deref().context("--revision is required with --repo")?;
            let name = args.name.clone().unwrap_or_else(|| {
                repo.trim_end_matches('/').rsplit('/').next().unwrap_or(repo).trim_end_matches(".git").to_string()
            });
            let mut t = RepoTask::new(&name, repo, revision);
            t.execution_targets = args.targets.clone();
            t
        }
        (None, None) => bail!("give --task or --repo"),
    };
    let setup = harness(cfg)?;
    let record = setup.harness.run_one(&task);
    save_store(&setup)?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(exit_for(&[record]))
}

fn exit_for(records: &[RunRecord]) -> ExitCode {
    if records
        .iter()
        .any(|r| r.failure.as_deref().is_some_and(|f| f.starts_with("harness_error")))
    {
        ExitCode::from(2)
    } else if records.iter().all(|r| r.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_batch(common: &Common, args: &BatchArgs) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    apply_agent_flags(&mut cfg, &args.agent)?;
    let tasks = load_tasks(&args.tasks).map_err(anyhow::Error::msg)?;
    if tasks.is_empty() {
        bail!("{} lists no tasks", args.tasks.display());
    }
    let setup = harness(cfg)?;
    let (summary, records) = setup.harness.run_batch(&tasks, args.parallelism);
    save_store(&setup)?;
    write_json(&setup.harness.cfg.output_dir.join("summary.json"), &summary)?;
    print!("{}", summary.category_table());
    Ok(exit_for(&records))
}

fn cmd_adjudicate(common: &Common, args: &AdjudicateArgs) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let trajectory = Trajectory::load(&args.trajectory).with_context(|| format!("loading {}", args.trajectory.display()))?;
    let setup = harness(cfg)?;
    let adjudication = setup
        .harness
        .adjudicate_stored(&trajectory, &args.image)
        .map_err(anyhow::Error::msg)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.trajectory.with_file_name("adjudication.json"));
    adjudication.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", serde_json::to_string_pretty(&adjudication)?);
    Ok(if adjudication.decision == Decision::NotGuilty {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_distill(common: &Common, args: &DistillArgs) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let kb = kb_path(&cfg)?;
    let store = open_store(&kb, cfg.backends.embedding.dim)?;
    let prompts = cfg.prompts()?;
    let backends = ConfiguredBackends::new(cfg.backends.clone()).map_err(anyhow::Error::msg)?;

    let report = if let Some(tpath) = &args.trajectory {
        let trajectory = Trajectory::load(tpath).with_context(|| format!("loading {}", tpath.display()))?;
        let adjudication = args
            .adjudication
            .as_ref()
            .map(|p| Adjudication::load(p).with_context(|| format!("loading {}", p.display())))
            .transpose()?;
        let mut task = trajectory.task.clone();
        if let Some(n) = &args.task_name {
            task.name = n.clone();
        }
        let chat = backends.chat(&task).map_err(anyhow::Error::msg)?;
        let llm = Llm::new(Arc::new(Gateway::new(chat, backends.embedder())), "distill");
        let mut d = Distiller::new(&llm, &prompts, cfg.distiller.clone());
        serde_json::to_value(d.run(&trajectory, adjudication.as_ref(), &store))?
    } else if let Some(dir) = &args.runs {
        let mut records = Vec::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path().join("record.json")))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            records.push(RunRecord::load(&p).map_err(anyhow::Error::msg)?);
        }
        let task = RepoTask::new(args.task_name.as_deref().unwrap_or("distill"), "batch", "batch");
        let chat = backends.chat(&task).map_err(anyhow::Error::msg)?;
        let llm = Llm::new(Arc::new(Gateway::new(chat, backends.embedder())), "distill");
        serde_json::to_value(distill_batch(&records, &store, &llm, &prompts, &cfg.distiller))?
    } else {
        bail!("give --trajectory or --runs");
    };
    store.save(&kb).with_context(|| format!("saving {}", kb.display()))?;
    match &args.report {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_kb(common: &Common, cmd: &KbCommand) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let kb = kb_path(&cfg)?;
    let dim = cfg.backends.embedding.dim;
    match cmd {
        KbCommand::Ingest { xpus } => {
            let store = open_store(&kb, dim)?;
            let text = std::fs::read_to_string(xpus).with_context(|| format!("reading {}", xpus.display()))?;
            let list: Vec<Xpu> = serde_json::from_str(&text).with_context(|| format!("parsing {}", xpus.display()))?;
            let backends = ConfiguredBackends::new(cfg.backends.clone()).map_err(anyhow::Error::msg)?;
            let embedder = backends.embedder();
            let mut ids = Vec::new();
            for x in list {
                let v = embedder.embed(&setupx_core::distiller::embedding_text(&x))?;
                ids.push(store.ingest(x, v)?);
            }
            store.save(&kb)?;
            println!("{}", serde_json::to_string_pretty(&ids)?);
        }
        KbCommand::Stats => {
            let store = XpuStore::load(&kb, None).with_context(|| format!("loading {}", kb.display()))?;
            println!("{}", serde_json::to_string_pretty(&kb_stats(&store, &cfg.retrieval.thresholds))?);
        }
        KbCommand::Noise {
            out,
            seed,
            counts,
            templates,
        } => {
            let store = XpuStore::load(&kb, None).with_context(|| format!("loading {}", kb.display()))?;
            let mut ncfg = NoiseConfig {
                seed: *seed,
                ..NoiseConfig::default()
            };
            if let Some(c) = counts {
                ncfg.context_perturbation = c[0];
                ncfg.cross_grafting = c[1];
                ncfg.generalization_blur = c[2];
            }
            let templates = match templates {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => NoiseTemplates::default(),
            };
            let noise = generate_noise(&store, &ncfg, &templates)?;
            ingest_noise(&store, &noise)?;
            store.save(out).with_context(|| format!("saving {}", out.display()))?;
            println!("{}", serde_json::to_string_pretty(&kb_stats(&store, &cfg.retrieval.thresholds))?);
        }
        KbCommand::Prune { repos, out } => {
            let store = XpuStore::load(&kb, None).with_context(|| format!("loading {}", kb.display()))?;
            let removed = store.prune_provenance(repos);
            let target = out.clone().unwrap_or(kb);
            store.save(&target).with_context(|| format!("saving {}", target.display()))?;
            println!("{}", serde_json::to_string_pretty(&removed)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(&cli.common, a),
        Command::Batch(a) => cmd_batch(&cli.common, a),
        Command::Adjudicate(a) => cmd_adjudicate(&cli.common, a),
        Command::Distill(a) => cmd_distill(&cli.common, a),
        Command::Kb(c) => cmd_kb(&cli.common, c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
