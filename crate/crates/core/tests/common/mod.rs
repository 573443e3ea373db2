//! Shared fixtures for the integration suites: a synthetic
//! keyword-retrieval task and a small memorization set.
//!
//! The keyword task pairs a context-side command token with a
//! response-side synonym token. A context mentions several commands, but
//! only the one directly after the marker token `use` is the request;
//! candidate responses carry synonyms of mentioned and unmentioned
//! commands, so ranking requires locating the marked command rather than
//! summarizing which commands occurred. Each synonym's dictionary
//! description names its command, which ties the two together even for
//! pairs held out of training; a model without the description channel
//! must learn every synonym's embedding from co-occurrence and gets no
//! signal at all on held-out pairs.

// Each test binary pulls in a different subset of these helpers.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use akde::corpus::{EvaluationGroup, KnowledgeBase, Triple, Vocabulary};

pub struct KeywordTask {
    pub vocab: Vocabulary,
    pub kb: KnowledgeBase,
    pub train: Vec<Triple>,
    pub val: Vec<EvaluationGroup>,
    pub eval: Vec<EvaluationGroup>,
}

pub struct KeywordTaskSpec {
    /// Total (command, synonym) pairs.
    pub pairs: usize,
    /// How many of them appear in training; the rest are held out.
    pub train_pairs: usize,
    pub train_triples: usize,
    pub val_groups: usize,
    pub eval_groups: usize,
    /// Candidates per evaluation group.
    pub n: usize,
    /// Unmarked distractor commands mentioned per context.
    pub mentioned_distractors: usize,
    /// Noise tokens per context, drawn from this range.
    pub noise_lo: usize,
    pub noise_hi: usize,
    pub seed: u64,
}

impl Default for KeywordTaskSpec {
    fn default() -> Self {
        KeywordTaskSpec {
            pairs: 45,
            train_pairs: 25,
            train_triples: 2000,
            val_groups: 50,
            eval_groups: 200,
            n: 10,
            mentioned_distractors: 2,
            noise_lo: 6,
            noise_hi: 10,
            seed: 0,
        }
    }
}

const NOISE_TYPES: usize = 30;

struct TaskTokens {
    noise: Vec<u32>,
    marker: u32,
    filler: u32,
    keywords: Vec<u32>,
    synonyms: Vec<u32>,
}

fn build_tokens(vocab: &mut Vocabulary, pairs: usize) -> TaskTokens {
    let noise = (0..NOISE_TYPES)
        .map(|i| vocab.add(&format!("n{i:02}")))
        .collect();
    let marker = vocab.add("use");
    let filler = vocab.add("try");
    for w in ["means", "on", "the", "system"] {
        vocab.add(w);
    }
    let keywords = (0..pairs)
        .map(|i| vocab.add(&format!("cmd{i:02}")))
        .collect();
    let synonyms = (0..pairs)
        .map(|i| vocab.add(&format!("syn{i:02}")))
        .collect();
    TaskTokens {
        noise,
        marker,
        filler,
        keywords,
        synonyms,
    }
}

/// A noisy context that marks `target` with the marker token and also
/// mentions `distractors` without marking them. Two utterances, split
/// somewhere outside the marked pair.
fn make_context(
    rng: &mut ChaCha8Rng,
    tokens: &TaskTokens,
    spec: &KeywordTaskSpec,
    target: usize,
    distractors: &[usize],
) -> Vec<Vec<u32>> {
    let total = rng.gen_range(spec.noise_lo..=spec.noise_hi);
    let mut flat: Vec<u32> = (0..total)
        .map(|_| *tokens.noise.choose(rng).unwrap())
        .collect();
    for &d in distractors {
        let at = rng.gen_range(0..=flat.len());
        flat.insert(at, tokens.keywords[d]);
    }
    let at = rng.gen_range(0..=flat.len());
    flat.insert(at, tokens.keywords[target]);
    flat.insert(at, tokens.marker);

    // Cut into two utterances without separating the marked pair.
    let mut cut = rng.gen_range(1..flat.len());
    if cut == at + 1 {
        cut += 1;
    }
    if cut >= flat.len() {
        return vec![flat];
    }
    vec![flat[..cut].to_vec(), flat[cut..].to_vec()]
}

fn make_response(tokens: &TaskTokens, pair: usize) -> Vec<u32> {
    vec![tokens.filler, tokens.synonyms[pair]]
}

/// `count` distinct pairs from `pool`, none equal to `avoid`.
fn sample_distinct(rng: &mut ChaCha8Rng, pool: &[usize], avoid: usize, count: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = pool.iter().copied().filter(|&j| j != avoid).collect();
    picked.shuffle(rng);
    picked.truncate(count);
    picked
}

/// Evaluation group on pair `i`: the correct synonym first, then the
/// mentioned-but-unmarked distractors, then unmentioned ones, all from
/// `pool`.
fn make_group(
    rng: &mut ChaCha8Rng,
    tokens: &TaskTokens,
    spec: &KeywordTaskSpec,
    i: usize,
    pool: &[usize],
) -> EvaluationGroup {
    let mentioned = sample_distinct(rng, pool, i, spec.mentioned_distractors);
    let mut rest: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|j| *j != i && !mentioned.contains(j))
        .collect();
    rest.shuffle(rng);
    let mut candidates = vec![make_response(tokens, i)];
    for &j in &mentioned {
        candidates.push(make_response(tokens, j));
    }
    for &j in rest.iter().take(spec.n - 1 - mentioned.len()) {
        candidates.push(make_response(tokens, j));
    }
    assert_eq!(candidates.len(), spec.n, "candidate pool too small");
    EvaluationGroup {
        context: make_context(rng, tokens, spec, i, &mentioned),
        candidates,
        correct_index: 0,
    }
}

pub fn keyword_task(spec: &KeywordTaskSpec) -> KeywordTask {
    assert!(spec.train_pairs < spec.pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let mut vocab = Vocabulary::new();
    let tokens = build_tokens(&mut vocab, spec.pairs);

    // Every synonym is a domain keyword whose description names the
    // command it stands for.
    let mut kb = KnowledgeBase::empty();
    let means = vocab.add("means");
    let on = vocab.add("on");
    let the = vocab.add("the");
    let system = vocab.add("system");
    for i in 0..spec.pairs {
        kb.insert(
            tokens.synonyms[i],
            vec![
                tokens.keywords[i],
                means,
                tokens.keywords[i],
                on,
                the,
                system,
            ],
        );
    }

    let seen: Vec<usize> = (0..spec.train_pairs).collect();
    let held_out: Vec<usize> = (spec.train_pairs..spec.pairs).collect();
    let everyone: Vec<usize> = (0..spec.pairs).collect();

    let mut train = Vec::with_capacity(spec.train_triples);
    for t in 0..spec.train_triples {
        let i = *seen.choose(&mut rng).unwrap();
        let mentioned = sample_distinct(&mut rng, &everyone, i, spec.mentioned_distractors);
        let positive = t % 2 == 0;
        let response_pair = if positive {
            i
        } else if rng.gen_bool(0.5) && mentioned.iter().any(|j| seen.contains(j)) {
            // Mentioned but unmarked: being in the context is not enough.
            // (Only seen synonyms may appear in training responses.)
            let options: Vec<usize> = mentioned
                .iter()
                .copied()
                .filter(|j| seen.contains(j))
                .collect();
            *options.choose(&mut rng).unwrap()
        } else {
            loop {
                let j = *seen.choose(&mut rng).unwrap();
                if j != i {
                    break j;
                }
            }
        };
        train.push(Triple {
            context: make_context(&mut rng, &tokens, spec, i, &mentioned),
            response: make_response(&tokens, response_pair),
            label: positive,
        });
    }

    // Half the groups use training pairs, half the held-out ones;
    // candidates always come from the same pool as the correct answer.
    let grouped = |count: usize, rng: &mut ChaCha8Rng| -> Vec<EvaluationGroup> {
        (0..count)
            .map(|gi| {
                if gi % 2 == 0 {
                    let i = *seen.choose(rng).unwrap();
                    make_group(rng, &tokens, spec, i, &seen)
                } else {
                    let i = *held_out.choose(rng).unwrap();
                    make_group(rng, &tokens, spec, i, &held_out)
                }
            })
            .collect()
    };
    let val = grouped(spec.val_groups, &mut rng);
    let eval = grouped(spec.eval_groups, &mut rng);

    KeywordTask {
        vocab,
        kb,
        train,
        val,
        eval,
    }
}

/// Small memorization set: every context has one fixed correct response;
/// negatives reuse other contexts' responses. Returned as raw file text
/// (training triples and n=2 evaluation groups).
pub struct OverfitFixture {
    pub train_text: String,
    pub eval_text: String,
}

pub fn overfit_fixture(pairs: usize, seed: u64) -> OverfitFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects: Vec<String> = (0..pairs).map(|i| format!("topic{i:02}")).collect();
    let mut train_text = String::new();
    let mut eval_text = String::new();
    for i in 0..pairs {
        let ctx = format!(
            "please help with {} __eot__ checking {} now",
            subjects[i], subjects[i]
        );
        let resp = format!("use the {} fix", subjects[i]);
        let other = (i + 1 + rng.gen_range(0..pairs - 1)) % pairs;
        let wrong = format!("use the {} fix", subjects[other]);
        train_text.push_str(&format!("1\t{ctx}\t{resp}\n"));
        train_text.push_str(&format!("0\t{ctx}\t{wrong}\n"));
        eval_text.push_str(&format!("1\t{ctx}\t{resp}\n"));
        eval_text.push_str(&format!("0\t{ctx}\t{wrong}\n"));
    }
    OverfitFixture {
        train_text,
        eval_text,
    }
}
