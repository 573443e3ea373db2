//! Python bindings: train, load, and query ranking models in-process.
//!
//! ```python
//! import akde_py
//! m = akde_py.Model.train("train.tsv", "val.tsv", variant="AK-DE-biGRU",
//!                         kb="kb.tsv", hidden=8, embed_dim=8, eval_n=2)
//! m.score("hi __eot__ hello", "how are you")
//! m.rank("hi there", ["fine thanks", "reboot now"])
//! m.save("model.json")
//! ```

// The pymethods macro expands to conversions clippy cannot see through.
#![allow(clippy::useless_conversion)]

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use akde::corpus::{
    self, encode_context_field, encode_response_field, KnowledgeBase, LoadOptions, Vocabulary,
};
use akde::metrics::EarlyStopMetric;
use akde::model::{
    build_variant, variant_name, Checkpoint, KnowledgeMode, ModelConfig, ModelParams, Scorer,
};
use akde::train::{self, TrainConfig};

fn usage<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn numeric<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn load_opts(config: &ModelConfig, eval_n: usize) -> LoadOptions {
    LoadOptions {
        max_context_tokens: config.max_context_tokens,
        max_response_tokens: config.max_response_tokens,
        eval_group_size: eval_n,
    }
}

/// A trained ranking model plus everything needed to score text:
/// vocabulary, configuration, and the keyword description base.
#[pyclass]
struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ModelParams,
    kb: KnowledgeBase,
}

impl Model {
    fn encode_pair(&self, context: &str, response: &str) -> PyResult<(Vec<Vec<u32>>, Vec<u32>)> {
        let opts = load_opts(&self.config, 10);
        let mut scratch = self.vocab.clone();
        let path = Path::new("<python>");
        let ctx =
            encode_context_field(path, 0, context, &mut scratch, false, &opts).map_err(usage)?;
        let resp =
            encode_response_field(path, 0, response, &mut scratch, false, &opts).map_err(usage)?;
        Ok((ctx, resp))
    }

    fn load_kb(
        config: &ModelConfig,
        vocab: &Vocabulary,
        kb: Option<PathBuf>,
    ) -> PyResult<KnowledgeBase> {
        match kb {
            Some(path) => {
                let mut scratch = vocab.clone();
                corpus::load_knowledge(&path, &mut scratch, false).map_err(usage)
            }
            None => {
                if config.knowledge != KnowledgeMode::None {
                    return Err(usage(format!(
                        "variant {} needs a keyword description file; pass kb=...",
                        variant_name(config).unwrap_or("<custom>")
                    )));
                }
                Ok(KnowledgeBase::empty())
            }
        }
    }
}

#[pymethods]
impl Model {
    /// Train a variant on a triple file, early-stopping on a grouped
    /// validation file, and return the best model.
    #[staticmethod]
    #[pyo3(signature = (train, val, variant="AK-DE-biGRU", kb=None, embeddings=None,
                        hidden=300, embed_dim=200, lr=1e-4, batch=32, epochs=20,
                        patience=3, seed=42, eval_n=10, max_ctx=320, max_resp=160,
                        literal_eq9=false))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        train: PathBuf,
        val: PathBuf,
        variant: &str,
        kb: Option<PathBuf>,
        embeddings: Option<PathBuf>,
        hidden: usize,
        embed_dim: usize,
        lr: f64,
        batch: usize,
        epochs: usize,
        patience: usize,
        seed: u64,
        eval_n: usize,
        max_ctx: usize,
        max_resp: usize,
        literal_eq9: bool,
    ) -> PyResult<Self> {
        let mut config = build_variant(variant).map_err(usage)?;
        config.hidden = hidden;
        config.embed_dim = embed_dim;
        config.max_context_tokens = max_ctx;
        config.max_response_tokens = max_resp;
        config.literal_eq9 = literal_eq9;
        config.validate().map_err(usage)?;
        if config.knowledge != KnowledgeMode::None && kb.is_none() {
            return Err(usage(format!(
                "variant {variant} needs a keyword description file; pass kb=..."
            )));
        }

        let opts = load_opts(&config, eval_n);
        let mut vocab = Vocabulary::new();
        let triples = corpus::load_triples(&train, &mut vocab, &opts).map_err(usage)?;
        let knowledge = match &kb {
            Some(path) => corpus::load_knowledge(path, &mut vocab, true).map_err(usage)?,
            None => KnowledgeBase::empty(),
        };
        let groups = corpus::load_eval_groups(&val, &vocab, &opts).map_err(usage)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pretrained = match &embeddings {
            Some(path) => {
                Some(corpus::load_embeddings(path, &vocab, embed_dim, &mut rng).map_err(usage)?)
            }
            None => None,
        };
        let params =
            ModelParams::init(&config, vocab.len(), &mut rng, pretrained).map_err(usage)?;
        let cfg = TrainConfig {
            lr,
            batch_size: batch,
            max_epochs: epochs,
            patience,
            seed,
            metric: EarlyStopMetric::RnAt1,
            ..Default::default()
        };
        let outcome =
            train::train(params, &config, &knowledge, &triples, &groups, &cfg).map_err(usage)?;
        if let Some(reason) = outcome.diverged {
            return Err(numeric(format!("training diverged: {reason}")));
        }
        Ok(Model {
            config,
            vocab,
            params: outcome.params,
            kb: knowledge,
        })
    }

    /// Load a checkpoint written by `save` or by the command-line tool.
    #[staticmethod]
    #[pyo3(signature = (path, kb=None))]
    fn load(path: PathBuf, kb: Option<PathBuf>) -> PyResult<Self> {
        let (config, vocab, params) = Checkpoint::load(&path)
            .and_then(|ck| ck.into_parts())
            .map_err(usage)?;
        let kb = Self::load_kb(&config, &vocab, kb)?;
        Ok(Model {
            config,
            vocab,
            params,
            kb,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::build(&self.config, &self.vocab, &self.params)
            .save(&path)
            .map_err(usage)
    }

    /// Probability that `response` answers `context`. Utterances inside
    /// the context are separated by the literal token `__eot__`.
    fn score(&self, context: &str, response: &str) -> PyResult<f64> {
        let (ctx, resp) = self.encode_pair(context, response)?;
        let mut scorer = Scorer::new(&self.params, &self.config, &self.kb, false).map_err(usage)?;
        Ok(scorer.score_pair(&ctx, &resp).map_err(numeric)?.probability)
    }

    /// Score plus attention weights and per-token gate means.
    fn score_detailed<'py>(
        &self,
        py: Python<'py>,
        context: &str,
        response: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (ctx, resp) = self.encode_pair(context, response)?;
        let mut scorer = Scorer::new(&self.params, &self.config, &self.kb, false).map_err(usage)?;
        let scored = scorer.score_pair(&ctx, &resp).map_err(numeric)?;
        let out = PyDict::new_bound(py);
        out.set_item("score", scored.probability)?;
        let flat = corpus::flatten_utterances(&ctx);
        let context_tokens: Vec<&str> = flat.iter().map(|&id| self.vocab.token(id)).collect();
        let response_tokens: Vec<&str> = resp.iter().map(|&id| self.vocab.token(id)).collect();
        out.set_item("context_tokens", context_tokens)?;
        out.set_item("response_tokens", response_tokens)?;
        out.set_item("alpha_context", scored.diagnostics.alpha_context)?;
        out.set_item("alpha_response", scored.diagnostics.alpha_response)?;
        let beta_mean: Vec<Option<f64>> = scored
            .diagnostics
            .beta
            .iter()
            .map(|b| {
                b.as_ref()
                    .map(|beta| beta.iter().sum::<f64>() / beta.len() as f64)
            })
            .collect();
        out.set_item("beta_mean", beta_mean)?;
        Ok(out)
    }

    /// Candidate indices with scores, most probable first; ties keep
    /// input order.
    fn rank(&self, context: &str, candidates: Vec<String>) -> PyResult<Vec<(usize, f64)>> {
        if candidates.is_empty() {
            return Err(usage("no candidates to rank"));
        }
        let opts = load_opts(&self.config, 10);
        let mut scratch = self.vocab.clone();
        let path = Path::new("<python>");
        let ctx =
            encode_context_field(path, 0, context, &mut scratch, false, &opts).map_err(usage)?;
        let ids: Vec<Vec<u32>> = candidates
            .iter()
            .map(|c| encode_response_field(path, 0, c, &mut scratch, false, &opts))
            .collect::<Result<_, _>>()
            .map_err(usage)?;
        let mut scorer = Scorer::new(&self.params, &self.config, &self.kb, false).map_err(usage)?;
        let scored = scorer.score_group(&ctx, &ids).map_err(numeric)?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            scored[b]
                .probability
                .partial_cmp(&scored[a].probability)
                .expect("finite scores")
        });
        Ok(order
            .into_iter()
            .map(|i| (i, scored[i].probability))
            .collect())
    }

    /// Evaluate a grouped file; returns the metric report as a dict.
    #[pyo3(signature = (path, n=10))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        path: PathBuf,
        n: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let opts = load_opts(&self.config, n);
        let groups = corpus::load_eval_groups(&path, &self.vocab, &opts).map_err(usage)?;
        let (report, _) =
            train::evaluate(&self.params, &self.config, &self.kb, &groups, None).map_err(usage)?;
        let out = PyDict::new_bound(py);
        out.set_item("n", report.n)?;
        out.set_item("n_groups", report.n_groups)?;
        out.set_item("r2_at_1", report.r2_at_1)?;
        out.set_item("rn_at_1", report.rn_at_1)?;
        out.set_item("rn_at_3", report.rn_at_3)?;
        out.set_item("rn_at_5", report.rn_at_5)?;
        Ok(out)
    }

    /// Name of the configuration's ablation variant.
    #[getter]
    fn variant(&self) -> &'static str {
        variant_name(&self.config).unwrap_or("<custom>")
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={}, vocab={}, hidden={}, embed_dim={})",
            self.variant(),
            self.vocab.len(),
            self.config.hidden,
            self.config.embed_dim
        )
    }
}

/// Whitespace tokenization, as used by the loaders.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
        .into_iter()
        .map(String::from)
        .collect()
}

/// The six ablation variant names.
#[pyfunction]
fn variant_names() -> Vec<&'static str> {
    akde::model::VARIANT_NAMES.to_vec()
}

/// Fraction of groups whose correct candidate ranks in the top `k`
/// (ties go to the lower index).
#[pyfunction]
fn recall_at_k(scores: Vec<Vec<f64>>, correct: Vec<usize>, k: usize) -> PyResult<f64> {
    if scores.len() != correct.len() {
        return Err(usage("one correct index per score list"));
    }
    let groups: Vec<corpus::EvaluationGroup> = scores
        .iter()
        .zip(&correct)
        .map(|(s, &c)| corpus::EvaluationGroup {
            context: vec![vec![0]],
            candidates: (0..s.len()).map(|i| vec![i as u32]).collect(),
            correct_index: c,
        })
        .collect();
    akde::metrics::recall_at_k(&groups, &scores, k).map_err(usage)
}

#[pymodule]
fn akde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(variant_names, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    Ok(())
}
