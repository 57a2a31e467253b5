//! `lcm` command line. Each subcommand is one client call plus formatting;
//! without `--server` an in-process server is started on a loopback port.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lcm_client::{Client, ClientError};
use lcm_model::wire::{
    CreateSessionRequest, ExpandRequest, GrepRequest, MapRunRequest, ReplayRequest, TurnInput,
};
use lcm_model::{AgentKind, Expanded, MapMode, SessionId, SummaryId, TurnTranscript};
use lcm_server::{AppState, EngineArgs};

#[derive(Debug, Parser)]
#[command(name = "lcm", version, about = "Inspect, replay and drive context-managed agent sessions")]
pub struct Cli {
    /// Base URL of a running lcm-server. Without it an embedded server is used.
    #[arg(long, env = "LCM_SERVER", global = true)]
    pub server: Option<String>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Session lifecycle and replay.
    #[command(subcommand)]
    Session(SessionCmd),
    /// Summary DAG inspection.
    #[command(subcommand)]
    Dag(DagCmd),
    /// Regex search over stored messages.
    Grep {
        pattern: String,
        #[arg(long)]
        session: Option<String>,
        #[arg(long)]
        summary: Option<String>,
        #[arg(long, default_value_t = 1)]
        page: u32,
    },
    /// Show what a summary or file id stands for.
    Describe { id: String },
    /// Recover the children of a summary.
    Expand {
        summary_id: String,
        /// Run from a synthetic depth-1 session.
        #[arg(long)]
        as_subagent: bool,
    },
    /// Map operators over JSONL files.
    #[command(subcommand)]
    Map(MapCmd),
    /// Check DAG integrity and losslessness of a session.
    Verify { session_id: String },
}

#[derive(Debug, Subcommand)]
pub enum SessionCmd {
    List,
    Create {
        #[arg(long)]
        parent: Option<String>,
        #[arg(long)]
        kind: Option<AgentKind>,
    },
    /// Run one turn.
    Turn {
        session_id: String,
        #[arg(long, conflicts_with = "tool_result_file")]
        user: Option<String>,
        #[arg(long)]
        tool_result_file: Option<PathBuf>,
    },
    /// Run every turn of a JSONL turns file.
    Replay {
        /// Provider rule script for this replay.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        turns: PathBuf,
        /// Continue this session instead of starting a new one.
        #[arg(long)]
        session: Option<String>,
    },
    Stats { session_id: String },
    /// Print the active context as the model sees it.
    Context { session_id: String },
}

#[derive(Debug, Subcommand)]
pub enum DagCmd {
    Show {
        session_id: String,
        /// Emit Graphviz instead of an outline.
        #[arg(long)]
        dot: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum MapCmd {
    Run(MapRunArgs),
}

#[derive(Debug, Args)]
pub struct MapRunArgs {
    #[arg(long)]
    pub mode: MapMode,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub prompt_file: PathBuf,
    /// JSON Schema file every output must satisfy.
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub concurrency: u32,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    #[arg(long)]
    pub read_only: bool,
    /// Run as a tool call of this session; the handle lands in its context.
    #[arg(long)]
    pub session: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("cannot start embedded server: {0}")]
    Embedded(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    /// The command ran but its answer is a failure (e.g. verify found problems).
    #[error("{0}")]
    Failed(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Connects to `--server`, or starts an in-process one.
pub async fn connect(cli: &Cli) -> Result<Client> {
    if let Some(url) = &cli.server {
        return Ok(Client::new(url.clone()));
    }
    let state = AppState::from_args(&cli.engine).map_err(|e| CliError::Embedded(e.to_string()))?;
    let addr = lcm_server::spawn(SocketAddr::from(([127, 0, 0, 1], 0)), state)
        .await
        .map_err(|e| CliError::Embedded(e.to_string()))?;
    Ok(Client::new(format!("http://{addr}")))
}

/// Runs one command and returns what to print on stdout.
pub async fn dispatch(cli: &Cli, client: &Client) -> Result<String> {
    match &cli.command {
        Command::Session(cmd) => session(cli.json, client, cmd).await,
        Command::Dag(DagCmd::Show { session_id, dot }) => {
            let view = client.dag(&SessionId(session_id.clone())).await?;
            if *dot {
                return Ok(view.to_dot());
            }
            if cli.json {
                return to_json(&view);
            }
            let mut out = format!("{} summaries, {} in context\n", view.nodes.len(), view.roots.len());
            for n in &view.nodes {
                let mark = if view.roots.contains(&n.id) { "*" } else { " " };
                let cover = match &n.children {
                    lcm_model::SummaryChildren::Span { lo, hi } => format!("messages {lo}..{hi}"),
                    lcm_model::SummaryChildren::Nodes { ids } => {
                        ids.iter().map(|i| i.as_str()).collect::<Vec<_>>().join(",")
                    }
                };
                let _ = writeln!(
                    out,
                    "{mark} {} {:<9} {:>6} tok {:<10} {cover}",
                    n.id, n.kind, n.token_count, n.level_used
                );
            }
            Ok(out)
        }
        Command::Grep {
            pattern,
            session,
            summary,
            page,
        } => {
            let page = client
                .grep(&GrepRequest {
                    pattern: pattern.clone(),
                    session_id: session.clone().map(SessionId),
                    summary_id: summary.clone().map(SummaryId),
                    page: Some(*page),
                    page_size: None,
                })
                .await?;
            if cli.json {
                return to_json(&page);
            }
            let mut out = format!(
                "{} matches (page {}, {} per page)\n",
                page.total_matches, page.page, page.page_size
            );
            for m in &page.matches {
                let cover = m
                    .covering_summary_id
                    .as_ref()
                    .map_or("live".to_string(), |s| s.to_string());
                let _ = writeln!(out, "{} seq={} [{}] {cover}: {}", m.session_id, m.seq, m.role, m.excerpt);
            }
            Ok(out)
        }
        Command::Describe { id } => {
            let d = client.describe(id).await?;
            if cli.json {
                return to_json(&d);
            }
            Ok(format!("{}\n", d.text))
        }
        Command::Expand {
            summary_id,
            as_subagent,
        } => {
            let r = client
                .expand(&ExpandRequest {
                    summary_id: SummaryId(summary_id.clone()),
                    as_subagent: *as_subagent,
                })
                .await?;
            if cli.json {
                return to_json(&r);
            }
            let mut out = format!("expanded from {}\n", r.caller_session);
            for item in &r.items {
                match item {
                    Expanded::Message(m) => {
                        let _ = writeln!(out, "\n[{} seq={}]\n{}", m.role, m.seq, m.content);
                    }
                    Expanded::Summary(s) => {
                        let _ = writeln!(out, "\n[summary {} {}]\n{}", s.id, s.kind, s.text);
                    }
                }
            }
            Ok(out)
        }
        Command::Map(MapCmd::Run(args)) => {
            let prompt = read(&args.prompt_file)?;
            let schema_text = read(&args.schema)?;
            let output_schema = serde_json::from_str(&schema_text).map_err(|source| CliError::Json {
                path: args.schema.display().to_string(),
                source,
            })?;
            let handle = client
                .run_map(&MapRunRequest {
                    mode: args.mode,
                    input_path: absolute(&args.input),
                    prompt,
                    output_schema,
                    output_path: absolute(&args.output),
                    concurrency: Some(args.concurrency),
                    retry_limit: Some(args.retries),
                    read_only: args.read_only,
                    parent_session: args.session.clone().map(SessionId),
                })
                .await?;
            if cli.json {
                return to_json(&handle);
            }
            Ok(format!(
                "job {}: {} ok, {} error\noutput {} registered as {}\n",
                handle.job_id,
                handle.counts.ok,
                handle.counts.error,
                handle.output_path,
                handle.registered_file_id
            ))
        }
        Command::Verify { session_id } => {
            let report = client.verify(&SessionId(session_id.clone())).await?;
            let text = if cli.json {
                to_json(&report)?
            } else if report.ok {
                "OK\n".to_string()
            } else {
                let mut out = format!("FAILED: {} problems\n", report.problems.len());
                for p in &report.problems {
                    let _ = writeln!(out, "- {p}");
                }
                out
            };
            if report.ok {
                Ok(text)
            } else {
                Err(CliError::Failed(text.trim_end().to_string()))
            }
        }
    }
}

async fn session(json: bool, client: &Client, cmd: &SessionCmd) -> Result<String> {
    match cmd {
        SessionCmd::List => {
            let sessions = client.sessions().await?;
            if json {
                return to_json(&sessions);
            }
            let mut out = String::new();
            for s in &sessions {
                let parent = s.parent_id.as_ref().map_or("-".to_string(), |p| p.to_string());
                let _ = writeln!(out, "{} depth={} kind={} parent={parent}", s.id, s.depth, s.agent_kind);
            }
            Ok(out)
        }
        SessionCmd::Create { parent, kind } => {
            let s = client
                .create_session(&CreateSessionRequest {
                    parent_id: parent.clone().map(SessionId),
                    agent_kind: *kind,
                })
                .await?;
            if json {
                return to_json(&s);
            }
            Ok(format!("{}\n", s.id))
        }
        SessionCmd::Turn {
            session_id,
            user,
            tool_result_file,
        } => {
            let input = match (user, tool_result_file) {
                (Some(u), _) => Some(TurnInput::User { user: u.clone() }),
                (None, Some(p)) => Some(TurnInput::ToolResultFile {
                    tool_result_file: absolute(p),
                }),
                (None, None) => None,
            };
            let t = client.run_turn(&SessionId(session_id.clone()), input).await?;
            if json {
                return to_json(&t);
            }
            Ok(format!(
                "{}{}\n",
                turn_table(std::slice::from_ref(&t)),
                t.final_answer.as_deref().unwrap_or("(no final answer)")
            ))
        }
        SessionCmd::Replay {
            script,
            turns,
            session,
        } => {
            let r = client
                .replay(&ReplayRequest {
                    turns_path: absolute(turns),
                    provider_script: script.as_deref().map(absolute),
                    session_id: session.clone().map(SessionId),
                })
                .await?;
            if json {
                return to_json(&r);
            }
            Ok(format!("session {}\n{}", r.session_id, turn_table(&r.transcripts)))
        }
        SessionCmd::Stats { session_id } => {
            let s = client.stats(&SessionId(session_id.clone())).await?;
            if json {
                return to_json(&s);
            }
            Ok(format!(
                "session        {}\nregime         {}\ncontext        {} tokens in {} entries (soft {}, hard {})\nmessages       {} ({} tokens)\nsummaries      {} leaf, {} condensed\ndag            depth {}, max fanout {}\n",
                s.session_id,
                s.regime,
                s.context_tokens,
                s.context_entries,
                s.tau_soft,
                s.tau_hard,
                s.message_count,
                s.message_tokens,
                s.leaf_count,
                s.condensed_count,
                s.dag_depth,
                s.max_fanout
            ))
        }
        SessionCmd::Context { session_id } => {
            let r = client.context(&SessionId(session_id.clone())).await?;
            if json {
                return to_json(&r);
            }
            Ok(format!("{}\n", r.text))
        }
    }
}

/// One row per turn.
pub fn turn_table(turns: &[TurnTranscript]) -> String {
    let mut out = format!("{:>5}  {:<8}  {:>8}  {:>5}  {:>5}  {}\n", "turn", "regime", "tokens", "calls", "tools", "answer");
    for t in turns {
        let answer = match (&t.final_answer, t.cap_reached) {
            (_, true) => "(tool-call cap)".to_string(),
            (Some(a), _) => one_line(a, 40),
            (None, _) => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:>5}  {:<8}  {:>8}  {:>5}  {:>5}  {answer}",
            t.turn_index,
            t.regime_at_start.to_string(),
            t.rendered_tokens,
            t.provider_calls,
            t.tool_calls.len()
        );
    }
    out
}

fn one_line(text: &str, max: usize) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= max {
        flat
    } else {
        format!("{}...", flat.chars().take(max).collect::<String>())
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: "<output>".into(),
        source,
    })?;
    s.push('\n');
    Ok(s)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })
}

/// Paths go to the server as absolute strings so that a remote or embedded
/// server resolves them the same way.
fn absolute(path: &Path) -> String {
    std::path::absolute(path)
        .unwrap_or_else(|_| path.to_path_buf())
        .display()
        .to_string()
}
