use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use artcontext::embedding::FORMAT_VERSION;
use artcontext::extract::RuleSegmenter;
use artcontext::lora::ADAPTER_VERSION;
use artcontext::pipeline::{
    self, eval_score_files, retrieve_topk, run_all, run_stage, PipelineConfig, PipelineError, RetrieveMode, Stage,
    StageManifest, ADAPTED_SCORES, BASELINE_SCORES, CONTEXTS, CONTEXT_VECTORS, PAIRS, WORKS,
};
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "artcontext",
    about = "Build weak image-text supervision from scholarly articles and evaluate adapted retrieval"
)]
struct Cli {
    /// TOML config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root for stage directories that have no explicit --out.
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run even when upstream artifacts are missing or changed; the manifest records it.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Query the works API for each roster artist and keep art-relevant open-access works.
    Harvest(HarvestArgs),
    /// Split converted documents into sentence-window context units.
    Extract(ExtractArgs),
    /// Embed context windows with a text provider.
    Embed(EmbedArgs),
    /// Pair each painting with its most similar context from the same artist.
    Align(AlignArgs),
    /// Generate stand-in encoder features for fixture runs.
    Features(FeaturesArgs),
    /// Train LoRA adapters on the frozen projection heads.
    Train(TrainArgs),
    /// Score candidates and emit macro-averaged PR curves.
    Eval(EvalArgs),
    /// Print the top-k context sentences for one painting.
    Retrieve(RetrieveArgs),
    /// Run every stage in order.
    Run,
}

#[derive(Debug, Args)]
struct HarvestArgs {
    #[arg(long)]
    roster: Option<PathBuf>,
    #[arg(long)]
    topics: Option<PathBuf>,
    /// Relevance threshold; works must score strictly above it.
    #[arg(long)]
    rho: Option<f64>,
    /// Directory of canned API pages used instead of the live API.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    api_base: Option<String>,
    #[arg(long)]
    per_page: Option<u32>,
    #[arg(long)]
    max_pages: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// works.jsonl, or the harvest directory holding it.
    #[arg(long)]
    works: Option<PathBuf>,
    #[arg(long)]
    roster: Option<PathBuf>,
    /// Directory of converted documents named <work_id>.md.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    max_bytes: Option<u64>,
    /// Drop repeated windows within a document.
    #[arg(long)]
    dedup: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// contexts.jsonl, or the extract directory holding it.
    #[arg(long)]
    contexts: Option<PathBuf>,
    /// `test`, `test:<dim>` or `file:<path>`.
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    paintings: Option<PathBuf>,
    #[arg(long)]
    contexts: Option<PathBuf>,
    /// contexts.emb, or the embed directory holding it.
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long)]
    provider: Option<String>,
    /// Drop pairs whose similarity is below this value.
    #[arg(long)]
    min_sim: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    paintings: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    contexts: Option<PathBuf>,
    #[arg(long)]
    d_img: Option<usize>,
    #[arg(long)]
    d_txt: Option<usize>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// aligned_pairs.jsonl, or the align directory holding it.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    img_feats: Option<PathBuf>,
    #[arg(long)]
    txt_feats: Option<PathBuf>,
    #[arg(long)]
    img_proj: Option<PathBuf>,
    #[arg(long)]
    txt_proj: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Use momentum SGD with this coefficient.
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    dropout: Option<f32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Precomputed baseline scores (one row per query); with
    /// --adapted-scores, skips scoring and writes only the CSV to --out.
    #[arg(long, requires = "adapted_scores")]
    baseline_scores: Option<PathBuf>,
    #[arg(long, requires = "baseline_scores")]
    adapted_scores: Option<PathBuf>,
    #[arg(long)]
    img_feats: Option<PathBuf>,
    #[arg(long)]
    ctx_feats: Option<PathBuf>,
    #[arg(long)]
    img_proj: Option<PathBuf>,
    #[arg(long)]
    txt_proj: Option<PathBuf>,
    /// Directory holding visual.lora and text.lora.
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Stage directory, or the CSV path when scoring files are given.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    /// Rendered query text against context vectors.
    Text,
    /// Image features against context features through the projection heads.
    Clip,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    /// Painting id.
    #[arg(long)]
    qid: String,
    #[arg(short, long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Mode::Text)]
    mode: Mode,
    /// Score with the trained adapters (clip mode).
    #[arg(long)]
    adapted: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long)]
    paintings: Option<PathBuf>,
    #[arg(long)]
    contexts: Option<PathBuf>,
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    img_feats: Option<PathBuf>,
    #[arg(long)]
    ctx_feats: Option<PathBuf>,
    #[arg(long)]
    img_proj: Option<PathBuf>,
    #[arg(long)]
    txt_proj: Option<PathBuf>,
    #[arg(long)]
    adapters: Option<PathBuf>,
}

/// A directory given where a file is expected means the stage directory
/// holding the default artifact.
fn artifact(p: Option<PathBuf>, name: &str) -> Option<PathBuf> {
    p.map(|p| if p.is_dir() { p.join(name) } else { p })
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn version_string() -> String {
    format!(
        "{} (emb format {FORMAT_VERSION}, lora format {ADAPTER_VERSION}, abbreviations {})",
        pipeline::TOOL_VERSION,
        RuleSegmenter::shipped().abbreviation_list_version()
    )
}

fn print_manifest(m: &StageManifest, dir: &Path) {
    let c = m.counts;
    let forced = if m.forced { " [forced]" } else { "" };
    println!(
        "{}: {} in, {} out, {} errored ({:.2}s) -> {}{forced}",
        m.stage,
        c.records_in,
        c.records_out,
        c.records_errored,
        m.wall_clock_secs,
        dir.display()
    );
}

fn stage(cfg: &PipelineConfig, s: Stage, force: bool) -> Result<(), PipelineError> {
    let m = run_stage(s, cfg, force)?;
    print_manifest(&m, &cfg.stage_dir(s));
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.run.out_root, cli.out_root);
    set(&mut cfg.run.seed, cli.seed);
    let force = cli.force;

    match cli.command {
        Command::Harvest(a) => {
            let h = &mut cfg.harvest;
            set_opt(&mut h.roster, a.roster);
            set_opt(&mut h.topics, a.topics);
            set(&mut h.rho, a.rho);
            set_opt(&mut h.fixture, a.fixture);
            set_opt(&mut h.api_base, a.api_base);
            set(&mut h.per_page, a.per_page);
            set(&mut h.max_pages, a.max_pages);
            set_opt(&mut h.out, a.out);
            stage(&cfg, Stage::Harvest, force)
        }
        Command::Extract(a) => {
            let e = &mut cfg.extract;
            set_opt(&mut e.works, artifact(a.works, WORKS));
            set_opt(&mut e.roster, a.roster);
            set_opt(&mut e.corpus, a.corpus);
            set(&mut e.max_bytes, a.max_bytes);
            e.dedup |= a.dedup;
            set_opt(&mut e.out, a.out);
            stage(&cfg, Stage::Extract, force)
        }
        Command::Embed(a) => {
            let e = &mut cfg.embed;
            set_opt(&mut e.contexts, artifact(a.contexts, CONTEXTS));
            set(&mut e.provider, a.provider);
            set(&mut e.batch_size, a.batch_size);
            set_opt(&mut e.out, a.out);
            stage(&cfg, Stage::Embed, force)
        }
        Command::Align(a) => {
            let al = &mut cfg.align;
            set_opt(&mut al.paintings, a.paintings);
            set_opt(&mut al.contexts, artifact(a.contexts, CONTEXTS));
            set_opt(&mut al.vectors, artifact(a.vectors, CONTEXT_VECTORS));
            set_opt(&mut al.provider, a.provider);
            set_opt(&mut al.min_sim, a.min_sim);
            set_opt(&mut al.out, a.out);
            stage(&cfg, Stage::Align, force)
        }
        Command::Features(a) => {
            let f = &mut cfg.features;
            f.synthetic = true;
            set_opt(&mut f.paintings, a.paintings);
            set_opt(&mut f.pairs, artifact(a.pairs, PAIRS));
            set_opt(&mut f.contexts, artifact(a.contexts, CONTEXTS));
            set(&mut f.d_img, a.d_img);
            set(&mut f.d_txt, a.d_txt);
            set(&mut f.d_embed, a.d_embed);
            set_opt(&mut f.out, a.out);
            stage(&cfg, Stage::Features, force)
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            set_opt(&mut t.pairs, artifact(a.pairs, PAIRS));
            set_opt(&mut t.img_feats, a.img_feats);
            set_opt(&mut t.txt_feats, a.txt_feats);
            set_opt(&mut t.img_proj, a.img_proj);
            set_opt(&mut t.txt_proj, a.txt_proj);
            set(&mut t.epochs, a.epochs);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.learning_rate, a.lr);
            set_opt(&mut t.momentum, a.momentum);
            set(&mut t.rank, a.rank);
            set(&mut t.alpha, a.alpha);
            set(&mut t.dropout, a.dropout);
            set_opt(&mut t.seed, cli.seed);
            set_opt(&mut t.out, a.out);
            stage(&cfg, Stage::Train, force)
        }
        Command::Eval(a) => {
            let scores = (artifact(a.baseline_scores, BASELINE_SCORES), artifact(a.adapted_scores, ADAPTED_SCORES));
            if let (Some(b), Some(ad)) = &scores {
                let queries = a
                    .queries
                    .or(cfg.eval.queries.clone())
                    .ok_or_else(|| PipelineError::Validation("--queries is required with --baseline-scores".into()))?;
                let out = a
                    .out
                    .ok_or_else(|| PipelineError::Validation("--out is required with --baseline-scores".into()))?;
                let report = eval_score_files(&queries, b, ad, &out)?;
                println!(
                    "eval: {} queries, MAP baseline {:.6}, adapted {:.6} -> {}",
                    report.queries.len(),
                    report.map_baseline,
                    report.map_adapted,
                    out.display()
                );
                return Ok(());
            }
            let e = &mut cfg.eval;
            set_opt(&mut e.queries, a.queries);
            set_opt(&mut e.img_feats, a.img_feats);
            set_opt(&mut e.ctx_feats, a.ctx_feats);
            set_opt(&mut e.img_proj, a.img_proj);
            set_opt(&mut e.txt_proj, a.txt_proj);
            set_opt(&mut e.adapters, a.adapters);
            set_opt(&mut e.out, a.out);
            stage(&cfg, Stage::Eval, force)
        }
        Command::Retrieve(a) => {
            let al = &mut cfg.align;
            set_opt(&mut al.paintings, a.paintings);
            set_opt(&mut al.contexts, artifact(a.contexts, CONTEXTS));
            set_opt(&mut al.vectors, artifact(a.vectors, CONTEXT_VECTORS));
            set_opt(&mut al.provider, a.provider);
            let e = &mut cfg.eval;
            set_opt(&mut e.img_feats, a.img_feats);
            set_opt(&mut e.ctx_feats, a.ctx_feats);
            set_opt(&mut e.img_proj, a.img_proj);
            set_opt(&mut e.txt_proj, a.txt_proj);
            set_opt(&mut e.adapters, a.adapters);
            let mode = match a.mode {
                Mode::Text if a.adapted => {
                    return Err(PipelineError::Validation("--adapted applies to --mode clip only".into()))
                }
                Mode::Text => RetrieveMode::Text,
                Mode::Clip => RetrieveMode::Clip { adapted: a.adapted },
            };
            let hits = retrieve_topk(&cfg, &a.qid, a.k, mode)?;
            let mut out = String::new();
            match a.format {
                Format::Json => out = serde_json::to_string_pretty(&hits).expect("hits serialize") + "\n",
                Format::Text if hits.is_empty() => out = format!("no contexts for {}\n", a.qid),
                Format::Text => {
                    for h in &hits {
                        out += &format!("{:>2}. {:.4}  {}  {}\n", h.rank, h.score, h.context_id, h.sentence);
                    }
                }
            }
            // a closed pipe (`| head`) is not an error
            let _ = io::stdout().write_all(out.as_bytes());
            Ok(())
        }
        Command::Run => {
            for m in run_all(&cfg, force)? {
                print_manifest(&m, &cfg.stage_dir(m.stage));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(version_string().into_boxed_str());
    let matches = match Cli::command().version(version).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("RUST_LOG").init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
