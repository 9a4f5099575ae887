mod backend;
mod render;

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use irec_core::config::Config;
use irec_core::graph::{CardId, TagId};
use irec_core::llm::FilterLevel;
use irec_core::rerank::LearningMode;
use irec_core::tagmap::{Outcome, ParentRef, UserAction};
use irec_core::workflow::{load_state, Clock, Engine, EventKind, FinalPayload, ManualClock, SystemClock};

use backend::{print_json, Backend, Failure};

#[derive(Debug, Parser)]
#[command(name = "irec", version, about = "Capture problem-solving insights and recall them for new problems")]
struct Cli {
    /// TOML configuration file (defaults to $IREC_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store snapshot path; overrides the configured one.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Talk to a running `irec serve` instead of opening the store.
    #[arg(long, global = true, env = "IREC_SERVER")]
    server: Option<String>,
    /// Pin the clock to this Unix time in seconds.
    #[arg(long, global = true)]
    epoch: Option<i64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Capture a free-form insight note from FILE or stdin.
    Capture {
        file: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Recall past insights for a new problem.
    Query {
        text: String,
        #[arg(long, default_value = "balanced")]
        mode: LearningMode,
        #[arg(long, default_value = "strict")]
        filter: FilterLevel,
        #[arg(long)]
        json: bool,
        /// Open the result at this rank, counting an access.
        #[arg(long)]
        open: Option<usize>,
    },
    /// Bulk-import problem cards from a JSONL file.
    Import {
        path: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Review tag-mapping decisions.
    #[command(subcommand)]
    Decisions(DecisionCommand),
    /// Store counts.
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// List the tag hierarchy.
    Tags {
        #[arg(long)]
        json: bool,
    },
    /// Append an extra insight to a card.
    Append { card: String, text: String },
    /// Talk through a recalled insight; reads one message per stdin line.
    Tutor {
        #[arg(long)]
        card: String,
        #[arg(long)]
        problem: String,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum DecisionCommand {
    List {
        /// Include confirmed decisions.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        json: bool,
    },
    Accept {
        id: String,
    },
    Veto {
        id: String,
    },
    Modify(ModifyArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["map_to", "create", "reject"])))]
struct ModifyArgs {
    id: String,
    /// Map to this existing tag id.
    #[arg(long)]
    map_to: Option<String>,
    /// Create a tag with this name.
    #[arg(long, requires = "under")]
    create: Option<String>,
    /// Parent tag id for --create.
    #[arg(long, group = "under")]
    parent: Option<String>,
    /// New root tag name for --create.
    #[arg(long, group = "under")]
    new_root: Option<String>,
    #[arg(long)]
    reject: bool,
}

impl ModifyArgs {
    fn outcome(&self) -> Outcome {
        if let Some(tag) = &self.map_to {
            return Outcome::MapTo { tag_id: TagId::from(tag.as_str()) };
        }
        if let Some(name) = &self.create {
            let parent = match (&self.parent, &self.new_root) {
                (Some(p), _) => ParentRef::Existing(TagId::from(p.as_str())),
                (None, Some(r)) => ParentRef::NewRoot(r.clone()),
                (None, None) => unreachable!("clap requires a parent"),
            };
            return Outcome::CreateUnder { parent, name: name.clone() };
        }
        Outcome::Rejected
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("IREC_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.downcast_ref::<Failure>().map_or(1, |f| f.code);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(store) = &cli.store {
        config.store_path = store.clone();
    }
    let serving = matches!(cli.command, Command::Serve { .. });
    if serving && cli.server.is_some() {
        anyhow::bail!("serve runs against a local store; drop --server");
    }
    // Providers are built before the runtime starts; the external embedder
    // uses a blocking client.
    let backend = match &cli.server {
        Some(url) => Backend::client(url),
        None => Backend::Embedded { engine: open_engine(&config, cli.epoch)?, store_path: config.store_path.clone() },
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        match cli.command {
            Command::Serve { addr } => serve(backend, addr.unwrap_or(config.api_address)).await,
            cmd => {
                let out = dispatch(&backend, cmd).await;
                // Whatever ran before a failure is still worth keeping.
                backend.finish().await?;
                out
            }
        }
    })
}

fn open_engine(config: &Config, epoch: Option<i64>) -> Result<Engine> {
    let (store, queue) =
        load_state(&config.store_path).with_context(|| format!("loading {}", config.store_path.display()))?;
    let clock: Arc<dyn Clock> = match epoch {
        Some(t) => Arc::new(ManualClock::new(t)),
        None => Arc::new(SystemClock),
    };
    let engine = Engine::from_config(config, Arc::new(store), clock)?;
    engine.restore_decisions(queue);
    Ok(engine)
}

fn read_input(file: Option<&Path>) -> Result<String> {
    let mut text = String::new();
    match file {
        None => {
            std::io::stdin().read_to_string(&mut text).context("reading stdin")?;
        }
        Some(p) if p == Path::new("-") => {
            std::io::stdin().read_to_string(&mut text).context("reading stdin")?;
        }
        Some(p) => {
            text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        }
    }
    Ok(text)
}

async fn dispatch(backend: &Backend, cmd: Command) -> Result<()> {
    match cmd {
        Command::Capture { file, json } => {
            let note = read_input(file.as_deref())?;
            if note.trim().is_empty() {
                return Err(Failure::new(2, "the note is empty").into());
            }
            let result = backend.capture(&note).await?;
            if json {
                print_json(&result)
            } else {
                render::capture(&result);
                Ok(())
            }
        }
        Command::Query { text, mode, filter, json, open } => {
            let (session_id, events) = backend
                .query(&text, mode, filter, |ev| {
                    if !json {
                        render::progress(ev);
                    }
                })
                .await?;
            let last = events.last().context("session produced no events")?;
            if last.kind == EventKind::Error {
                let msg = last.payload.get("message").and_then(|m| m.as_str()).unwrap_or("unknown failure");
                let stage = last.payload.get("stage").and_then(|m| m.as_str()).unwrap_or("?");
                return Err(Failure::new(3, format!("query failed at {stage}: {msg}")).into());
            }
            let payload: FinalPayload = serde_json::from_value(last.payload.clone()).context("decoding final results")?;
            if json {
                print_json(&payload)?;
            } else {
                render::final_results(&payload);
            }
            if let Some(rank) = open {
                let hit = payload
                    .results
                    .iter()
                    .find(|r| r.rank == rank)
                    .ok_or_else(|| Failure::new(1, format!("no result at rank {rank}")))?;
                let ack = backend.open(&session_id, &hit.view.ranked.card_id).await?;
                if !json {
                    render::opened(&ack, &hit.view);
                }
            }
            Ok(())
        }
        Command::Import { path, parallelism, json } => {
            let file = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let reader: Box<dyn BufRead + Send> = Box::new(BufReader::new(file));
            let parallelism =
                parallelism.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
            let report = backend
                .import(reader, parallelism, |p| {
                    if p.processed % 1000 == 0 {
                        eprintln!("processed {} ({} imported, {} failed)", p.processed, p.imported, p.failed);
                    }
                })
                .await?;
            if json {
                print_json(&report)
            } else {
                render::import(&report);
                Ok(())
            }
        }
        Command::Decisions(DecisionCommand::List { all, json }) => {
            let list = backend.decisions(!all).await?;
            if json {
                print_json(&list)
            } else {
                render::decisions(&list);
                Ok(())
            }
        }
        Command::Decisions(cmd) => {
            let (id, action) = match cmd {
                DecisionCommand::Accept { id } => (id, UserAction::Accept),
                DecisionCommand::Veto { id } => (id, UserAction::Veto),
                DecisionCommand::Modify(args) => {
                    let outcome = args.outcome();
                    (args.id, UserAction::Modify { outcome })
                }
                DecisionCommand::List { .. } => unreachable!(),
            };
            let decision = backend.confirm(&id, action).await?;
            render::decision(&decision);
            Ok(())
        }
        Command::Stats { json } => {
            let stats = backend.stats().await?;
            if json {
                print_json(&stats)
            } else {
                println!("cards: {}", stats.cards);
                println!("embedded cards: {}", stats.embedded_cards);
                println!("tags: {}", stats.tags);
                println!("edges: {}", stats.edges);
                Ok(())
            }
        }
        Command::Tags { json } => {
            let tags = backend.tags().await?;
            if json {
                print_json(&tags)
            } else {
                render::tags(&tags);
                Ok(())
            }
        }
        Command::Append { card, text } => {
            let card = backend.append(&CardId::from(card), &text).await?;
            println!("{}", card.id);
            println!("{}", card.insight_text);
            Ok(())
        }
        Command::Tutor { card, problem } => {
            let start = backend.start_inquiry(&problem, &CardId::from(card)).await?;
            println!("tutor: {}", start.turn.text);
            let stdin = std::io::stdin();
            for line in stdin.lock().lines() {
                let line = line.context("reading stdin")?;
                if line.trim().is_empty() {
                    continue;
                }
                let turn = backend.inquiry_turn(&start.inquiry_id, &line).await?;
                println!("tutor: {}", turn.text);
                std::io::stdout().flush()?;
            }
            Ok(())
        }
        Command::Serve { .. } => unreachable!("handled by run"),
    }
}

async fn serve(backend: Backend, addr: String) -> Result<()> {
    let Backend::Embedded { engine, store_path } = backend else {
        unreachable!("serve always opens the store");
    };
    engine.embed_missing();
    let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
    println!("listening on http://{}", listener.local_addr()?);
    std::io::stdout().flush()?;
    irec_server::serve(engine.clone(), listener, shutdown_signal()).await?;
    engine.wait_background().await;
    engine.persist(&store_path).with_context(|| format!("writing {}", store_path.display()))?;
    eprintln!("store saved to {}", store_path.display());
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("installing SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}
