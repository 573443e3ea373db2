//! Tokenization, vocabulary, and the on-disk formats: triple files,
//! grouped evaluation files, keyword-description files, and pre-trained
//! embedding files.
//!
//! Triple file: one example per line, `label<TAB>context<TAB>response`,
//! with utterances inside the context separated by the literal token
//! `__eot__`. Evaluation files are blocks of `n` lines per context, the
//! positive line first. Knowledge file: `keyword<TAB>description` per
//! line. Embedding file: `token v1 .. vD` per line, space-separated.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::matrix::Matrix;

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("vocabulary is missing reserved tokens or contains duplicates")]
    BadVocabulary,
}

/// Whitespace tokenizer; the corpus arrives preprocessed, so no further
/// normalization is applied. Empty tokens are dropped.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{}", t.as_ref());
    }
    out
}

pub const PAD_TOKEN: &str = "__pad__";
pub const UNK_TOKEN: &str = "__unk__";
pub const EOT_TOKEN: &str = "__eot__";

/// Tokens present in every vocabulary regardless of corpus. PAD must be
/// id 0; the remaining placeholders come from the corpus preprocessing.
pub const RESERVED_TOKENS: [&str; 6] = [
    PAD_TOKEN,
    UNK_TOKEN,
    EOT_TOKEN,
    "__url__",
    "__path__",
    "__number__",
];

/// Token <-> id bijection with reserved placeholder tokens.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const EOT_ID: u32 = 2;

    pub fn new() -> Self {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for t in RESERVED_TOKENS {
            v.add(t);
        }
        v
    }

    /// Rebuild from an id-ordered token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(CorpusError::BadVocabulary);
        }
        for (i, t) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *t {
                return Err(CorpusError::BadVocabulary);
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(CorpusError::BadVocabulary);
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token: tokens,
        })
    }

    /// Insert a token if new; returns its id either way.
    pub fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.to_string(), id);
        self.id_to_token.push(token.to_string());
        id
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Id of `token`, falling back to UNK for out-of-vocabulary tokens.
    pub fn lookup(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode_frozen(&self, tokens: &[&str]) -> Vec<u32> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn encode_extend(&mut self, tokens: &[&str]) -> Vec<u32> {
        tokens.iter().map(|t| self.add(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&id| self.token(id)).collect();
        detokenize(&toks)
    }

    /// FNV-1a over the id-ordered token list; used to pair checkpoints
    /// with the vocabulary they were trained on.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.id_to_token {
            for b in t.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    /// Utterances in order, each a token-id sequence (truncated).
    pub context: Vec<Vec<u32>>,
    pub response: Vec<u32>,
    pub label: bool,
}

impl Triple {
    /// Context as one token sequence with EOT ids marking utterance
    /// boundaries; this is what the encoder consumes.
    pub fn flat_context(&self) -> Vec<u32> {
        flatten_utterances(&self.context)
    }
}

/// A context with `n` candidate responses, exactly one of them correct.
#[derive(Debug, Clone)]
pub struct EvaluationGroup {
    pub context: Vec<Vec<u32>>,
    pub candidates: Vec<Vec<u32>>,
    pub correct_index: usize,
}

impl EvaluationGroup {
    pub fn flat_context(&self) -> Vec<u32> {
        flatten_utterances(&self.context)
    }
}

pub fn flatten_utterances(utterances: &[Vec<u32>]) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            out.push(Vocabulary::EOT_ID);
        }
        out.extend_from_slice(u);
    }
    out
}

fn split_at_eot(flat: &[u32]) -> Vec<Vec<u32>> {
    let mut utterances = Vec::new();
    let mut current = Vec::new();
    for &id in flat {
        if id == Vocabulary::EOT_ID {
            if !current.is_empty() {
                utterances.push(std::mem::take(&mut current));
            }
        } else {
            current.push(id);
        }
    }
    if !current.is_empty() {
        utterances.push(current);
    }
    utterances
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Keep the last `max_context_tokens` of the flattened context.
    pub max_context_tokens: usize,
    /// Keep the first `max_response_tokens` of the response.
    pub max_response_tokens: usize,
    /// Lines per evaluation block.
    pub eval_group_size: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_context_tokens: 320,
            max_response_tokens: 160,
            eval_group_size: 10,
        }
    }
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// `label<TAB>context<TAB>response` split into its raw fields.
pub fn parse_triple_line(
    path: &Path,
    line_no: usize,
    line: &str,
) -> Result<(bool, String, String)> {
    let mut fields = line.split('\t');
    let (label, context, response) = match (fields.next(), fields.next(), fields.next()) {
        (Some(l), Some(c), Some(r)) => (l, c, r),
        _ => {
            return Err(parse_err(
                path,
                line_no,
                "expected label<TAB>context<TAB>response",
            ))
        }
    };
    if fields.next().is_some() {
        return Err(parse_err(
            path,
            line_no,
            "more than three tab-separated fields",
        ));
    }
    let label = match label.trim() {
        "0" => false,
        "1" => true,
        other => {
            return Err(parse_err(
                path,
                line_no,
                format!("label must be 0 or 1, got {other:?}"),
            ))
        }
    };
    Ok((label, context.to_string(), response.to_string()))
}

/// Tokenize, map, and truncate one raw context field.
pub fn encode_context_field(
    path: &Path,
    line_no: usize,
    text: &str,
    vocab: &mut Vocabulary,
    extend: bool,
    opts: &LoadOptions,
) -> Result<Vec<Vec<u32>>> {
    let tokens = tokenize(text);
    let flat: Vec<u32> = tokens
        .iter()
        .map(|t| {
            if extend {
                vocab.add(t)
            } else {
                vocab.lookup(t)
            }
        })
        .collect();
    // The EOT separators written in the file become EOT ids here, so
    // truncation operates on the same sequence the encoder will see.
    let start = flat.len().saturating_sub(opts.max_context_tokens);
    let utterances = split_at_eot(&flat[start..]);
    if utterances.is_empty() {
        return Err(parse_err(path, line_no, "empty context"));
    }
    Ok(utterances)
}

/// Tokenize, map, and truncate one raw response field.
pub fn encode_response_field(
    path: &Path,
    line_no: usize,
    text: &str,
    vocab: &mut Vocabulary,
    extend: bool,
    opts: &LoadOptions,
) -> Result<Vec<u32>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(parse_err(path, line_no, "empty response"));
    }
    let mut ids: Vec<u32> = tokens
        .iter()
        .map(|t| {
            if extend {
                vocab.add(t)
            } else {
                vocab.lookup(t)
            }
        })
        .collect();
    ids.truncate(opts.max_response_tokens);
    Ok(ids)
}

/// Load a training triple file, growing `vocab` with every new token.
pub fn load_triples(
    path: &Path,
    vocab: &mut Vocabulary,
    opts: &LoadOptions,
) -> Result<Vec<Triple>> {
    let content = read_file(path)?;
    let mut triples = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let (label, ctx, resp) = parse_triple_line(path, line_no, line)?;
        triples.push(Triple {
            context: encode_context_field(path, line_no, &ctx, vocab, true, opts)?,
            response: encode_response_field(path, line_no, &resp, vocab, true, opts)?,
            label,
        });
    }
    Ok(triples)
}

/// Load a grouped evaluation file against a frozen vocabulary.
///
/// Every block of `opts.eval_group_size` consecutive lines must share one
/// context and carry the positive example first.
pub fn load_eval_groups(
    path: &Path,
    vocab: &Vocabulary,
    opts: &LoadOptions,
) -> Result<Vec<EvaluationGroup>> {
    let n = opts.eval_group_size;
    assert!(n >= 2, "evaluation groups need at least two candidates");
    let content = read_file(path)?;
    let lines: Vec<&str> = content.lines().collect();
    if lines.is_empty() {
        return Err(CorpusError::Format {
            path: path.display().to_string(),
            msg: "empty evaluation file".into(),
        });
    }
    if !lines.len().is_multiple_of(n) {
        return Err(CorpusError::Format {
            path: path.display().to_string(),
            msg: format!(
                "{} lines is not a multiple of the group size {}",
                lines.len(),
                n
            ),
        });
    }
    // The loader never grows the vocabulary; the shared encode path takes
    // a mutable reference, so hand it a scratch clone.
    let mut frozen = vocab.clone();
    let mut groups = Vec::with_capacity(lines.len() / n);
    for block in 0..lines.len() / n {
        let base = block * n;
        let (label, ctx_text, resp_text) = parse_triple_line(path, base + 1, lines[base])?;
        if !label {
            return Err(parse_err(
                path,
                base + 1,
                "first line of an evaluation block must be the positive example",
            ));
        }
        let context = encode_context_field(path, base + 1, &ctx_text, &mut frozen, false, opts)?;
        let mut candidates = vec![encode_response_field(
            path,
            base + 1,
            &resp_text,
            &mut frozen,
            false,
            opts,
        )?];
        for j in 1..n {
            let line_no = base + j + 1;
            let (label, c, r) = parse_triple_line(path, line_no, lines[base + j])?;
            if label {
                return Err(parse_err(
                    path,
                    line_no,
                    "evaluation block has more than one positive example",
                ));
            }
            if c != ctx_text {
                return Err(parse_err(
                    path,
                    line_no,
                    "context differs from the first line of its evaluation block",
                ));
            }
            candidates.push(encode_response_field(
                path,
                line_no,
                &r,
                &mut frozen,
                false,
                opts,
            )?);
        }
        groups.push(EvaluationGroup {
            context,
            candidates,
            correct_index: 0,
        });
    }
    Ok(groups)
}

/// Longest keyword description kept, in tokens.
pub const DESCRIPTION_MAX_TOKENS: usize = 60;

/// Map from domain keyword to its description token sequence.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    descriptions: HashMap<u32, Vec<u32>>,
}

impl KnowledgeBase {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_keyword(&self, id: u32) -> bool {
        self.descriptions.contains_key(&id)
    }

    pub fn description(&self, id: u32) -> Option<&[u32]> {
        self.descriptions.get(&id).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, keyword: u32, description: Vec<u32>) {
        assert!(!description.is_empty(), "descriptions are non-empty");
        self.descriptions.insert(keyword, description);
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }
}

/// Load a `keyword<TAB>description` file. With `extend` the vocabulary
/// grows to cover keywords and description tokens; otherwise unknown
/// description tokens become UNK and unknown keywords are skipped.
/// Malformed entries are skipped with a warning; a duplicate keyword is
/// overwritten by its last occurrence.
pub fn load_knowledge(path: &Path, vocab: &mut Vocabulary, extend: bool) -> Result<KnowledgeBase> {
    let content = read_file(path)?;
    let mut kb = KnowledgeBase::empty();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((keyword_text, description_text)) = line.split_once('\t') else {
            return Err(parse_err(path, line_no, "expected keyword<TAB>description"));
        };
        let keyword_tokens = tokenize(keyword_text);
        if keyword_tokens.len() != 1 {
            eprintln!(
                "warning: {}:{}: keyword must be a single token, skipping {:?}",
                path.display(),
                line_no,
                keyword_text
            );
            continue;
        }
        let mut desc_tokens = tokenize(description_text);
        if desc_tokens.is_empty() {
            eprintln!(
                "warning: {}:{}: empty description for {:?}, entry rejected",
                path.display(),
                line_no,
                keyword_tokens[0]
            );
            continue;
        }
        desc_tokens.truncate(DESCRIPTION_MAX_TOKENS);
        let keyword_id = if extend {
            vocab.add(keyword_tokens[0])
        } else {
            match vocab.get(keyword_tokens[0]) {
                Some(id) => id,
                None => {
                    eprintln!(
                        "warning: {}:{}: keyword {:?} not in vocabulary, skipping",
                        path.display(),
                        line_no,
                        keyword_tokens[0]
                    );
                    continue;
                }
            }
        };
        let description: Vec<u32> = desc_tokens
            .iter()
            .map(|t| {
                if extend {
                    vocab.add(t)
                } else {
                    vocab.lookup(t)
                }
            })
            .collect();
        if kb.descriptions.contains_key(&keyword_id) {
            eprintln!(
                "warning: {}:{}: duplicate keyword {:?}, last entry wins",
                path.display(),
                line_no,
                keyword_tokens[0]
            );
        }
        kb.descriptions.insert(keyword_id, description);
    }
    Ok(kb)
}

/// Load pre-trained embeddings into a `|V| x dim` matrix. Vocabulary
/// tokens absent from the file get vectors drawn uniformly from
/// `[-0.1, 0.1)`; the PAD row is all zeros.
pub fn load_embeddings<R: Rng>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<Matrix> {
    let content = read_file(path)?;
    let mut table = Matrix::uniform(rng, vocab.len(), dim, -0.1, 0.1);
    let mut seen = vec![false; vocab.len()];
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| parse_err(path, line_no, format!("bad number {p:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {dim} values, got {}", values.len()),
            ));
        }
        if let Some(id) = vocab.get(token) {
            if seen[id as usize] {
                eprintln!(
                    "warning: {}:{}: duplicate embedding for {:?}, last entry wins",
                    path.display(),
                    line_no,
                    token
                );
            }
            seen[id as usize] = true;
            table.row_mut(id as usize).copy_from_slice(&values);
        }
    }
    table
        .row_mut(Vocabulary::PAD_ID as usize)
        .iter_mut()
        .for_each(|v| *v = 0.0);
    Ok(table)
}
