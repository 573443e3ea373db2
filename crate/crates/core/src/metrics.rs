//! Ranking metrics over grouped evaluation data, the metric report,
//! information-content analysis, and a one-sample t-test utility.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EvaluationGroup;

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("group {group} has {scores} scores for {candidates} candidates")]
    LengthMismatch {
        group: usize,
        scores: usize,
        candidates: usize,
    },
    #[error("recall@{k} undefined for groups of {n} candidates")]
    KTooLarge { k: usize, n: usize },
    #[error("{0} lists of scores for {1} groups")]
    GroupCountMismatch(usize, usize),
    #[error("information content of an empty utterance is undefined")]
    EmptyUtterance,
    #[error("t-test needs at least two samples")]
    TooFewSamples,
}

/// Rank of the correct candidate under descending score, ties broken in
/// favor of the lower candidate index.
fn rank_of_correct(scores: &[f64], correct: usize) -> usize {
    let correct_score = scores[correct];
    let beaten_by = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > correct_score || (s == correct_score && i < correct))
        .count();
    beaten_by + 1
}

/// Fraction of groups whose correct candidate ranks within the top `k`.
pub fn recall_at_k(groups: &[EvaluationGroup], scores: &[Vec<f64>], k: usize) -> Result<f64> {
    if groups.len() != scores.len() {
        return Err(MetricError::GroupCountMismatch(scores.len(), groups.len()));
    }
    let mut hits = 0usize;
    for (gi, (group, group_scores)) in groups.iter().zip(scores).enumerate() {
        if group.candidates.len() != group_scores.len() {
            return Err(MetricError::LengthMismatch {
                group: gi,
                scores: group_scores.len(),
                candidates: group.candidates.len(),
            });
        }
        if k > group_scores.len() {
            return Err(MetricError::KTooLarge {
                k,
                n: group_scores.len(),
            });
        }
        if rank_of_correct(group_scores, group.correct_index) <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / groups.len() as f64)
}

/// Recall@1 restricted to the correct candidate and the first distractor,
/// the two-candidate reading of a wider group.
fn recall_2_at_1(groups: &[EvaluationGroup], scores: &[Vec<f64>]) -> f64 {
    let mut hits = 0usize;
    for (group, group_scores) in groups.iter().zip(scores) {
        let correct = group.correct_index;
        let other = (0..group_scores.len())
            .find(|&i| i != correct)
            .expect("groups have at least two candidates");
        let cs = group_scores[correct];
        let os = group_scores[other];
        if cs > os || (cs == os && correct < other) {
            hits += 1;
        }
    }
    hits as f64 / groups.len() as f64
}

/// Add-one-smoothed unigram distribution over token ids.
#[derive(Debug, Clone)]
pub struct UnigramModel {
    counts: Vec<u64>,
    total: u64,
}

impl UnigramModel {
    pub fn new(vocab_size: usize) -> Self {
        UnigramModel {
            counts: vec![0; vocab_size],
            total: 0,
        }
    }

    pub fn observe(&mut self, ids: &[u32]) {
        for &id in ids {
            self.counts[id as usize] += 1;
            self.total += 1;
        }
    }

    /// Counts over the flattened contexts and responses of a training set.
    pub fn from_triples(triples: &[crate::corpus::Triple], vocab_size: usize) -> Self {
        let mut model = Self::new(vocab_size);
        for t in triples {
            model.observe(&t.flat_context());
            model.observe(&t.response);
        }
        model
    }

    pub fn probability(&self, id: u32) -> f64 {
        (self.counts[id as usize] as f64 + 1.0) / (self.total as f64 + self.counts.len() as f64)
    }
}

/// Mean per-token surprisal in bits under the unigram model.
pub fn information_content(utterance: &[u32], unigram: &UnigramModel) -> Result<f64> {
    if utterance.is_empty() {
        return Err(MetricError::EmptyUtterance);
    }
    let bits: f64 = utterance
        .iter()
        .map(|&id| -unigram.probability(id).log2())
        .sum();
    Ok(bits / utterance.len() as f64)
}

/// Evaluation summary. `rn_at_k` fields refer to the group size `n` of
/// the evaluated file (the classic four-metric report corresponds to
/// n = 10); entries are absent where `k` exceeds `n`. Recall is
/// nondecreasing in `k`, which [`MetricReport::from_scores`] asserts on
/// every report it builds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Candidates per group.
    pub n: usize,
    pub n_groups: usize,
    pub r2_at_1: Option<f64>,
    pub rn_at_1: Option<f64>,
    pub rn_at_3: Option<f64>,
    pub rn_at_5: Option<f64>,
    /// Mean information content of the correct responses, in bits.
    pub info_correct_bits: Option<f64>,
    /// Mean information content of the top-scored responses, in bits.
    pub info_top1_bits: Option<f64>,
}

impl MetricReport {
    pub fn from_scores(
        groups: &[EvaluationGroup],
        scores: &[Vec<f64>],
        unigram: Option<&UnigramModel>,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(MetricError::GroupCountMismatch(scores.len(), 0));
        }
        if groups.len() != scores.len() {
            return Err(MetricError::GroupCountMismatch(scores.len(), groups.len()));
        }
        let n = groups[0].candidates.len();
        let at = |k: usize| -> Result<Option<f64>> {
            if k > n {
                return Ok(None);
            }
            recall_at_k(groups, scores, k).map(Some)
        };
        let rn_at_1 = at(1)?;
        let rn_at_3 = at(3)?;
        let rn_at_5 = at(5)?;
        let (info_correct_bits, info_top1_bits) = match unigram {
            Some(model) => {
                let mut correct_sum = 0.0;
                let mut top_sum = 0.0;
                for (group, group_scores) in groups.iter().zip(scores) {
                    correct_sum +=
                        information_content(&group.candidates[group.correct_index], model)?;
                    let top = (0..group_scores.len())
                        .max_by(|&a, &b| {
                            group_scores[a]
                                .partial_cmp(&group_scores[b])
                                .expect("finite scores")
                                .then(b.cmp(&a)) // ties to the lower index
                        })
                        .expect("groups are nonempty");
                    top_sum += information_content(&group.candidates[top], model)?;
                }
                (
                    Some(correct_sum / groups.len() as f64),
                    Some(top_sum / groups.len() as f64),
                )
            }
            None => (None, None),
        };
        let report = MetricReport {
            n,
            n_groups: groups.len(),
            r2_at_1: Some(recall_2_at_1(groups, scores)),
            rn_at_1,
            rn_at_3,
            rn_at_5,
            info_correct_bits,
            info_top1_bits,
        };
        report.assert_monotone();
        Ok(report)
    }

    /// Recall is nondecreasing in k by construction; fail loudly if a
    /// report ever violates that.
    pub fn assert_monotone(&self) {
        let series: Vec<f64> = [self.rn_at_1, self.rn_at_3, self.rn_at_5]
            .into_iter()
            .flatten()
            .collect();
        for pair in series.windows(2) {
            assert!(
                pair[0] <= pair[1] + 1e-15,
                "recall must be nondecreasing in k: {series:?}"
            );
        }
    }

    pub fn metric(&self, which: EarlyStopMetric) -> Option<f64> {
        match which {
            EarlyStopMetric::R2At1 => self.r2_at_1,
            EarlyStopMetric::RnAt1 => self.rn_at_1,
            EarlyStopMetric::RnAt3 => self.rn_at_3,
            EarlyStopMetric::RnAt5 => self.rn_at_5,
        }
    }

    /// Flat key-value block, one metric per line. The standard labels
    /// R10@k are reported as absent unless the file really has ten
    /// candidates per group; an unusual group size gets its own Rn@k
    /// lines so nothing is lost.
    pub fn to_kv_block(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "absent".to_string(),
        };
        let standard = |v: Option<f64>| if self.n == 10 { fmt(v) } else { fmt(None) };
        let mut out = String::new();
        out.push_str(&format!("groups {}\n", self.n_groups));
        out.push_str(&format!("candidates_per_group {}\n", self.n));
        out.push_str(&format!("R2@1 {}\n", fmt(self.r2_at_1)));
        out.push_str(&format!("R10@1 {}\n", standard(self.rn_at_1)));
        out.push_str(&format!("R10@3 {}\n", standard(self.rn_at_3)));
        out.push_str(&format!("R10@5 {}\n", standard(self.rn_at_5)));
        if self.n != 10 && self.n != 2 {
            out.push_str(&format!("R{}@1 {}\n", self.n, fmt(self.rn_at_1)));
            out.push_str(&format!("R{}@3 {}\n", self.n, fmt(self.rn_at_3)));
            out.push_str(&format!("R{}@5 {}\n", self.n, fmt(self.rn_at_5)));
        }
        if self.info_correct_bits.is_some() || self.info_top1_bits.is_some() {
            out.push_str(&format!(
                "info_correct_bits {}\n",
                fmt(self.info_correct_bits)
            ));
            out.push_str(&format!("info_top1_bits {}\n", fmt(self.info_top1_bits)));
        }
        out
    }
}

/// Which validation metric drives early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EarlyStopMetric {
    R2At1,
    RnAt1,
    RnAt3,
    RnAt5,
}

// ── One-sample t-test ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    /// One-tailed p-value for the alternative `mean > mu0`.
    pub p_one_tailed: f64,
}

/// One-sample, one-tailed t-test of `mean(samples) > mu0`.
pub fn one_sample_t_test(samples: &[f64], mu0: f64) -> Result<TTestResult> {
    let n = samples.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let p = match mean.partial_cmp(&mu0) {
            Some(std::cmp::Ordering::Greater) => 0.0,
            Some(std::cmp::Ordering::Less) => 1.0,
            _ => 0.5,
        };
        return Ok(TTestResult {
            t: if mean == mu0 {
                0.0
            } else if mean > mu0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
            df,
            p_one_tailed: p,
        });
    }
    let t = (mean - mu0) / (var / n as f64).sqrt();
    let p = 1.0 - student_t_cdf(t, df as f64);
    Ok(TTestResult {
        t,
        df,
        p_one_tailed: p,
    })
}

/// Student-t CDF via the regularized incomplete beta function.
fn student_t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * incomplete_beta_regularized(0.5 * df, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
fn incomplete_beta_regularized(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos log-gamma.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEFFS {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}
