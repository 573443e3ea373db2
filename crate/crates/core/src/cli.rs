//! Command-line entry points: `train`, `eval`, `rank`, and `attn-export`.
//!
//! Exit codes: 0 on success, 1 for usage, parse, and configuration
//! problems, 2 for numeric failures (divergence, non-finite gradients).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::AdError;
use crate::corpus::{
    self, encode_context_field, encode_response_field, parse_triple_line, KnowledgeBase,
    LoadOptions, Vocabulary,
};
use crate::metrics::UnigramModel;
use crate::model::{
    build_variant, variant_name, Checkpoint, KnowledgeMode, ModelConfig, ModelError, ModelParams,
    Scorer,
};
use crate::train::{self, TrainConfig, TrainError};

#[derive(Debug, Parser)]
#[command(
    name = "akde",
    about = "Dual-encoder next-utterance ranking with attention and keyword descriptions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a variant and write the best checkpoint plus a history log.
    Train(TrainArgs),
    /// Score a grouped evaluation file and print the metric report.
    Eval(EvalArgs),
    /// Rank candidate responses per context by model probability.
    Rank(RankArgs),
    /// Export attention weights, gate means, and scores as JSON lines.
    AttnExport(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training triple file.
    #[arg(long)]
    pub train: PathBuf,
    /// Grouped validation file.
    #[arg(long)]
    pub val: PathBuf,
    /// Keyword description file (required for AK variants).
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Pre-trained embedding file.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Where to write the best checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// History log path (default: `<checkpoint>.history.jsonl`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "AK-DE-biGRU")]
    pub variant: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 300)]
    pub hidden: usize,
    #[arg(long = "embed-dim", default_value_t = 200)]
    pub embed_dim: usize,
    #[arg(long = "max-ctx", default_value_t = 320)]
    pub max_ctx: usize,
    #[arg(long = "max-resp", default_value_t = 160)]
    pub max_resp: usize,
    /// Apply the gate's convex combination to non-keywords too.
    #[arg(long = "literal-eq9")]
    pub literal_eq9: bool,
    /// Candidates per validation group.
    #[arg(long = "eval-n", default_value_t = 10)]
    pub eval_n: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grouped evaluation file.
    #[arg(long)]
    pub test: PathBuf,
    /// Keyword description file (required for AK checkpoints).
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Optional machine-readable report destination (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Candidates per evaluation group.
    #[arg(long = "eval-n", default_value_t = 10)]
    pub eval_n: usize,
    /// Training triple file; enables the information-content columns.
    #[arg(long)]
    pub train: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Candidate file: triple-format lines, consecutive lines with the
    /// same context form one block (labels are ignored).
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Output path (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pair file: one triple-format line per record (labels are ignored).
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Output path (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failures carry the exit code they should terminate with.
#[derive(Debug)]
pub enum CliError {
    /// Usage, parsing, or configuration problem (exit 1).
    Usage(String),
    /// Numeric failure: divergence or non-finite values (exit 2).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(msg) | CliError::Numeric(msg) => msg,
        }
    }
}

impl From<corpus::CorpusError> for CliError {
    fn from(e: corpus::CorpusError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Ad(AdError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteGradient { .. }
            | TrainError::Model(ModelError::Ad(AdError::NonFinite { .. })) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<crate::metrics::MetricError> for CliError {
    fn from(e: crate::metrics::MetricError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Rank(args) => cmd_rank(&args),
        Command::AttnExport(args) => cmd_attn_export(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn require_kb(config: &ModelConfig, kb: &Option<PathBuf>) -> Result<(), CliError> {
    if config.knowledge != KnowledgeMode::None && kb.is_none() {
        return Err(CliError::Usage(format!(
            "variant {} needs a keyword description file; pass --kb",
            variant_name(config).unwrap_or("<custom>")
        )));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Vocabulary, ModelParams), CliError> {
    Checkpoint::load(path)?.into_parts().map_err(Into::into)
}

fn load_kb_frozen(
    kb_path: &Option<PathBuf>,
    vocab: &Vocabulary,
) -> Result<KnowledgeBase, CliError> {
    match kb_path {
        Some(path) => {
            let mut scratch = vocab.clone();
            Ok(corpus::load_knowledge(path, &mut scratch, false)?)
        }
        None => Ok(KnowledgeBase::empty()),
    }
}

fn write_or_stdout(path: &Option<PathBuf>, body: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|e| io_err(p, e)),
        None => {
            print!("{body}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut config = build_variant(&args.variant)?;
    config.embed_dim = args.embed_dim;
    config.hidden = args.hidden;
    config.max_context_tokens = args.max_ctx;
    config.max_response_tokens = args.max_resp;
    config.literal_eq9 = args.literal_eq9;
    config.validate()?;
    require_kb(&config, &args.kb)?;

    let opts = LoadOptions {
        max_context_tokens: args.max_ctx,
        max_response_tokens: args.max_resp,
        eval_group_size: args.eval_n,
    };
    let mut vocab = Vocabulary::new();
    let triples = corpus::load_triples(&args.train, &mut vocab, &opts)?;
    let kb = match &args.kb {
        Some(path) => corpus::load_knowledge(path, &mut vocab, true)?,
        None => KnowledgeBase::empty(),
    };
    let val = corpus::load_eval_groups(&args.val, &vocab, &opts)?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let pretrained = match &args.embeddings {
        Some(path) => Some(corpus::load_embeddings(
            path,
            &vocab,
            args.embed_dim,
            &mut rng,
        )?),
        None => None,
    };
    let params = ModelParams::init(&config, vocab.len(), &mut rng, pretrained)?;

    let train_cfg = TrainConfig {
        lr: args.lr,
        batch_size: args.batch,
        max_epochs: args.epochs,
        patience: args.patience,
        seed: args.seed,
        ..Default::default()
    };
    let outcome = train::train(params, &config, &kb, &triples, &val, &train_cfg)?;

    Checkpoint::build(&config, &vocab, &outcome.params).save(&args.checkpoint)?;
    let history_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.history.jsonl", args.checkpoint.display())));
    let mut log = String::new();
    for record in &outcome.history {
        log.push_str(&serde_json::to_string(record).expect("history serializes"));
        log.push('\n');
    }
    std::fs::write(&history_path, log).map_err(|e| io_err(&history_path, e))?;

    println!(
        "trained {} for {} epochs; best epoch {} (Rn@1 {:.6})",
        args.variant,
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_metric
    );
    println!("checkpoint {}", args.checkpoint.display());
    println!("history {}", history_path.display());

    if let Some(reason) = outcome.diverged {
        return Err(CliError::Numeric(format!(
            "training diverged ({reason}); last good checkpoint written"
        )));
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (config, vocab, params) = load_checkpoint(&args.checkpoint)?;
    require_kb(&config, &args.kb)?;
    let kb = load_kb_frozen(&args.kb, &vocab)?;
    let opts = LoadOptions {
        max_context_tokens: config.max_context_tokens,
        max_response_tokens: config.max_response_tokens,
        eval_group_size: args.eval_n,
    };
    let groups = corpus::load_eval_groups(&args.test, &vocab, &opts)?;

    let unigram = match &args.train {
        Some(path) => {
            let mut scratch = vocab.clone();
            let triples = corpus::load_triples(path, &mut scratch, &opts)?;
            Some(UnigramModel::from_triples(&triples, scratch.len()))
        }
        None => None,
    };

    let (report, _) = train::evaluate(&params, &config, &kb, &groups, unigram.as_ref())?;
    print!("{}", report.to_kv_block());
    if let Some(out) = &args.out {
        let body = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(out, body).map_err(|e| io_err(out, e))?;
    }
    Ok(())
}

/// Blocks of consecutive lines sharing a context field.
fn read_rank_blocks(path: &Path) -> Result<Vec<(String, Vec<String>)>, CliError> {
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut blocks: Vec<(String, Vec<String>)> = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let (_, ctx, resp) = parse_triple_line(path, i + 1, line)?;
        match blocks.last_mut() {
            Some((current, candidates)) if *current == ctx => candidates.push(resp),
            _ => blocks.push((ctx, vec![resp])),
        }
    }
    if blocks.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no candidates to rank",
            path.display()
        )));
    }
    Ok(blocks)
}

pub fn cmd_rank(args: &RankArgs) -> Result<(), CliError> {
    let (config, vocab, params) = load_checkpoint(&args.checkpoint)?;
    require_kb(&config, &args.kb)?;
    let kb = load_kb_frozen(&args.kb, &vocab)?;
    let opts = LoadOptions {
        max_context_tokens: config.max_context_tokens,
        max_response_tokens: config.max_response_tokens,
        ..Default::default()
    };
    let blocks = read_rank_blocks(&args.test)?;

    let mut out = String::new();
    let mut scratch = vocab.clone();
    for (bi, (ctx_text, candidates)) in blocks.iter().enumerate() {
        let context =
            encode_context_field(&args.test, bi + 1, ctx_text, &mut scratch, false, &opts)?;
        let ids: Vec<Vec<u32>> = candidates
            .iter()
            .map(|c| encode_response_field(&args.test, bi + 1, c, &mut scratch, false, &opts))
            .collect::<Result<_, _>>()?;
        let mut scorer = Scorer::new(&params, &config, &kb, false)?;
        let scored = scorer.score_group(&context, &ids)?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        // Stable: equal probabilities keep their input order.
        order.sort_by(|&a, &b| {
            scored[b]
                .probability
                .partial_cmp(&scored[a].probability)
                .expect("probabilities are finite")
        });
        if bi > 0 {
            out.push('\n');
        }
        for i in order {
            out.push_str(&format!(
                "{:.6}\t{}\n",
                scored[i].probability, candidates[i]
            ));
        }
    }
    write_or_stdout(&args.out, &out)
}

#[derive(Serialize)]
struct ExportRecord {
    context_tokens: Vec<String>,
    response_tokens: Vec<String>,
    alpha_context: Vec<f64>,
    alpha_response: Vec<f64>,
    /// Mean gate value per response token; `null` entries mark tokens
    /// the gate does not apply to. Absent for non-gated variants.
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_mean: Option<Vec<Option<f64>>>,
    score: f64,
}

pub fn cmd_attn_export(args: &ExportArgs) -> Result<(), CliError> {
    let (config, vocab, params) = load_checkpoint(&args.checkpoint)?;
    if !config.use_attention {
        return Err(CliError::Usage(format!(
            "variant {} has no attention weights to export; train an attention variant",
            variant_name(&config).unwrap_or("<custom>")
        )));
    }
    require_kb(&config, &args.kb)?;
    let kb = load_kb_frozen(&args.kb, &vocab)?;
    let opts = LoadOptions {
        max_context_tokens: config.max_context_tokens,
        max_response_tokens: config.max_response_tokens,
        ..Default::default()
    };

    let content = std::fs::read_to_string(&args.test).map_err(|e| io_err(&args.test, e))?;
    let mut out = String::new();
    let mut scratch = vocab.clone();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let (_, ctx_text, resp_text) = parse_triple_line(&args.test, line_no, line)?;
        let context =
            encode_context_field(&args.test, line_no, &ctx_text, &mut scratch, false, &opts)?;
        let response =
            encode_response_field(&args.test, line_no, &resp_text, &mut scratch, false, &opts)?;
        let mut scorer = Scorer::new(&params, &config, &kb, false)?;
        let scored = scorer.score_pair(&context, &response)?;

        let flat_ctx = corpus::flatten_utterances(&context);
        let record = ExportRecord {
            context_tokens: flat_ctx
                .iter()
                .map(|&id| vocab.token(id).to_string())
                .collect(),
            response_tokens: response
                .iter()
                .map(|&id| vocab.token(id).to_string())
                .collect(),
            alpha_context: scored.diagnostics.alpha_context,
            alpha_response: scored.diagnostics.alpha_response,
            beta_mean: (config.knowledge == KnowledgeMode::Gated).then(|| {
                scored
                    .diagnostics
                    .beta
                    .iter()
                    .map(|b| {
                        b.as_ref()
                            .map(|beta| beta.iter().sum::<f64>() / beta.len() as f64)
                    })
                    .collect()
            }),
            score: scored.probability,
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    write_or_stdout(&args.out, &out)
}
