//! Word-level scoring and the decode-time benchmark.
//!
//! Transcripts are compared as whitespace-separated words under a
//! minimal-edit alignment. Errors are attributed against the biasing
//! list by the reference word for substitutions and deletions and by the
//! inserted hypothesis word for insertions, so listed and unlisted error
//! counts always partition the total. Rates render as one-decimal
//! percents, paired "overall (listed)".

use crate::decode::{beam_search, DecodeConfig, DecodeResult, ModelScorer};
use crate::error::{Error, Result};
use crate::model::{BiasTables, EncodedUtterance, Model};
use crate::tensor::{Real, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One aligned word pair or gap between reference and hypothesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match { r: String, h: String },
    Substitute { r: String, h: String },
    Delete { r: String },
    Insert { h: String },
}

/// Levenshtein-optimal word alignment of one utterance.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
}

impl Alignment {
    /// Edit cost: every op that is not a match.
    pub fn cost(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| !matches!(op, EditOp::Match { .. }))
            .count()
    }

    /// The reference sequence the ops were built from.
    pub fn ref_words(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                EditOp::Match { r, .. } | EditOp::Substitute { r, .. } | EditOp::Delete { r } => {
                    Some(r.as_str())
                }
                EditOp::Insert { .. } => None,
            })
            .collect()
    }

    /// The hypothesis sequence the ops spell out when replayed.
    pub fn hyp_words(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                EditOp::Match { h, .. } | EditOp::Substitute { h, .. } | EditOp::Insert { h } => {
                    Some(h.as_str())
                }
                EditOp::Delete { .. } => None,
            })
            .collect()
    }
}

/// Minimal-edit word alignment; equal-cost ties resolve to match, then
/// substitute, then delete, then insert.
pub fn align<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Alignment {
    let nr = refs.len();
    let nh = hyps.len();
    // d[i][j]: minimal edits turning the first i reference words into the
    // first j hypothesis words.
    let mut d = vec![vec![0usize; nh + 1]; nr + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=nr {
        for j in 1..=nh {
            let eq = refs[i - 1].as_ref() == hyps[j - 1].as_ref();
            let diag = d[i - 1][j - 1] + usize::from(!eq);
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(nr.max(nh));
    let (mut i, mut j) = (nr, nh);
    while i > 0 || j > 0 {
        let here = d[i][j];
        let eq = i > 0 && j > 0 && refs[i - 1].as_ref() == hyps[j - 1].as_ref();
        if eq && d[i - 1][j - 1] == here {
            ops.push(EditOp::Match {
                r: refs[i - 1].as_ref().to_string(),
                h: hyps[j - 1].as_ref().to_string(),
            });
            i -= 1;
            j -= 1;
        } else if !eq && i > 0 && j > 0 && d[i - 1][j - 1] + 1 == here {
            ops.push(EditOp::Substitute {
                r: refs[i - 1].as_ref().to_string(),
                h: hyps[j - 1].as_ref().to_string(),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i - 1][j] + 1 == here {
            ops.push(EditOp::Delete {
                r: refs[i - 1].as_ref().to_string(),
            });
            i -= 1;
        } else {
            debug_assert!(j > 0 && d[i][j - 1] + 1 == here);
            ops.push(EditOp::Insert {
                h: hyps[j - 1].as_ref().to_string(),
            });
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { ops }
}

/// Error attribution against a biasing list. Listed and unlisted errors
/// partition `errors`; reference words split into listed and unlisted for
/// the two rates' denominators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSplit {
    pub ref_words: usize,
    pub ref_listed: usize,
    pub errors: usize,
    pub listed_errors: usize,
    pub unlisted_errors: usize,
}

impl ErrorSplit {
    /// Overall word error rate; undefined without reference words.
    pub fn wer(&self) -> Option<f64> {
        (self.ref_words > 0).then(|| self.errors as f64 / self.ref_words as f64)
    }

    /// Error rate on listed reference words; undefined when none are listed.
    pub fn b_wer(&self) -> Option<f64> {
        (self.ref_listed > 0).then(|| self.listed_errors as f64 / self.ref_listed as f64)
    }

    /// Error rate on unlisted reference words; undefined when all are listed.
    pub fn u_wer(&self) -> Option<f64> {
        let unlisted = self.ref_words - self.ref_listed;
        (unlisted > 0).then(|| self.unlisted_errors as f64 / unlisted as f64)
    }
}

impl std::ops::AddAssign for ErrorSplit {
    fn add_assign(&mut self, o: Self) {
        self.ref_words += o.ref_words;
        self.ref_listed += o.ref_listed;
        self.errors += o.errors;
        self.listed_errors += o.listed_errors;
        self.unlisted_errors += o.unlisted_errors;
    }
}

/// Splits an alignment's errors by list membership: substitutions and
/// deletions follow the reference word, insertions the inserted word.
pub fn attribute<F: Fn(&str) -> bool>(alignment: &Alignment, listed: F) -> ErrorSplit {
    let mut s = ErrorSplit::default();
    for op in &alignment.ops {
        match op {
            EditOp::Match { r, .. } => {
                s.ref_words += 1;
                s.ref_listed += usize::from(listed(r));
            }
            EditOp::Substitute { r, .. } | EditOp::Delete { r } => {
                s.ref_words += 1;
                s.errors += 1;
                if listed(r) {
                    s.ref_listed += 1;
                    s.listed_errors += 1;
                } else {
                    s.unlisted_errors += 1;
                }
            }
            EditOp::Insert { h } => {
                s.errors += 1;
                if listed(h) {
                    s.listed_errors += 1;
                } else {
                    s.unlisted_errors += 1;
                }
            }
        }
    }
    s
}

/// Overall word error rate over a set of alignments.
pub fn wer(alignments: &[Alignment]) -> Result<f64> {
    let mut s = ErrorSplit::default();
    for a in alignments {
        s += attribute(a, |_| false);
    }
    s.wer()
        .ok_or_else(|| Error::Metrics("no reference words to score".into()))
}

/// Listed and unlisted error rates over alignments sharing one biasing
/// list; the listed rate is `None` when no reference word is listed.
pub fn bwer_uwer<F: Fn(&str) -> bool>(
    alignments: &[Alignment],
    listed: F,
) -> (Option<f64>, Option<f64>) {
    let mut s = ErrorSplit::default();
    for a in alignments {
        s += attribute(a, &listed);
    }
    (s.b_wer(), s.u_wer())
}

/// Percent with one decimal, or the undefined marker.
pub fn fmt_rate(rate: Option<f64>) -> String {
    match rate {
        Some(r) => format!("{:.1}", 100.0 * r),
        None => "n/a".into(),
    }
}

/// The paired "overall (listed)" cell, e.g. "3.9 (15.5)".
pub fn fmt_paired(wer: Option<f64>, b_wer: Option<f64>) -> String {
    format!("{} ({})", fmt_rate(wer), fmt_rate(b_wer))
}

/// Labels identifying one decode condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    /// Which checkpoint decoded, e.g. "backbone" or "biased".
    pub system: String,
    pub split: String,
    pub list_size: usize,
    pub mu: f64,
    pub beam: usize,
}

/// Search-effort totals accumulated over decode results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTotals {
    /// Emitted tokens along returned hypotheses (end markers included).
    pub steps: u64,
    /// Decoder forwards the searches consumed across all expansions.
    pub forwards: u64,
    pub dyn_tokens: u64,
    pub truncated: usize,
}

impl StepTotals {
    pub fn absorb(&mut self, r: &DecodeResult) {
        self.steps += r.steps as u64;
        self.forwards += r.forwards as u64;
        self.dyn_tokens += r.dyn_tokens as u64;
        self.truncated += usize::from(r.truncated);
    }
}

/// One condition's scores. Every field is deterministic for a fixed
/// experiment and seed except `rtf`, which only the benchmark fills in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub condition: Condition,
    pub utterances: usize,
    pub ref_words: usize,
    pub ref_listed: usize,
    pub errors: usize,
    pub listed_errors: usize,
    pub unlisted_errors: usize,
    pub wer: Option<f64>,
    pub b_wer: Option<f64>,
    pub u_wer: Option<f64>,
    /// "overall (listed)" percents, e.g. "3.9 (15.5)".
    pub paired: String,
    pub steps_total: u64,
    pub forwards_total: u64,
    pub dyn_tokens: u64,
    pub truncated: usize,
    /// The matched unbiased condition's `steps_total` on the same split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_baseline: Option<u64>,
    /// Decode wall time over audio time; absent outside the benchmark.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtf: Option<f64>,
}

impl EvalReport {
    pub fn new(
        condition: Condition,
        utterances: usize,
        counts: ErrorSplit,
        steps: StepTotals,
    ) -> Self {
        let wer = counts.wer();
        let b_wer = counts.b_wer();
        EvalReport {
            condition,
            utterances,
            ref_words: counts.ref_words,
            ref_listed: counts.ref_listed,
            errors: counts.errors,
            listed_errors: counts.listed_errors,
            unlisted_errors: counts.unlisted_errors,
            wer,
            b_wer,
            u_wer: counts.u_wer(),
            paired: fmt_paired(wer, b_wer),
            steps_total: steps.steps,
            forwards_total: steps.forwards,
            dyn_tokens: steps.dyn_tokens,
            truncated: steps.truncated,
            steps_baseline: None,
            rtf: None,
        }
    }
}

/// Aggregate decoding-iteration comparison on qualifying utterances
/// (those where the biased search spent dynamic tokens on multi-piece
/// listed words, so whole words collapsed into single emissions).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationReport {
    pub utterances: usize,
    pub baseline_steps: u64,
    pub biased_steps: u64,
    /// Utterances decoded in strictly fewer steps than the baseline.
    pub strictly_fewer: usize,
    /// Aggregate saving in percent, positive when biased is cheaper.
    pub reduction_pct: f64,
}

impl IterationReport {
    /// Builds the comparison from qualifying (baseline, biased) step pairs.
    pub fn from_pairs(pairs: &[(u64, u64)]) -> Self {
        let baseline_steps: u64 = pairs.iter().map(|p| p.0).sum();
        let biased_steps: u64 = pairs.iter().map(|p| p.1).sum();
        let strictly_fewer = pairs.iter().filter(|p| p.1 < p.0).count();
        let reduction_pct = if baseline_steps > 0 {
            100.0 * (baseline_steps as f64 - biased_steps as f64) / baseline_steps as f64
        } else {
            0.0
        };
        IterationReport {
            utterances: pairs.len(),
            baseline_steps,
            biased_steps,
            strictly_fewer,
            reduction_pct,
        }
    }
}

/// Nominal frame rate of the synthetic features: 100 frames per second
/// (a 10 ms hop, the usual ASR convention), turning frame counts into an
/// audio-duration analogue for the real-time factor.
pub const FRAMES_PER_SECOND: f64 = 100.0;

/// One utterance prepared for timing. Encoder output and list embeddings
/// are computed up front so the clock sees only the search itself.
pub struct BenchJob<T: Real> {
    pub enc: EncodedUtterance<T>,
    pub tables: Option<BiasTables<T>>,
}

impl<T: Real> BenchJob<T> {
    /// Precomputes everything the timed loop must exclude.
    pub fn prepare(model: &Model<T>, feats: &Tensor<T>, spellings: &[Vec<u32>]) -> Result<Self> {
        let enc = model.encode_utterance(feats)?;
        let tables = if spellings.is_empty() {
            None
        } else {
            Some(model.bias_tables(spellings)?)
        };
        Ok(BenchJob { enc, tables })
    }
}

/// Benchmark result for one condition. Step and token totals are
/// deterministic; only the wall-clock fields vary between machines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub utterances: usize,
    pub audio_s: f64,
    /// Median wall time of the timed runs.
    pub wall_s: f64,
    pub runs: usize,
    pub rtf: f64,
    pub steps_total: u64,
    pub forwards_total: u64,
    pub dyn_tokens: u64,
}

/// Times repeated decodes of prepared jobs and reports the median run.
/// The clock covers decoder forwards and beam bookkeeping only; list
/// embeddings, encoder outputs, and file handling stay outside it.
pub fn rtf_bench<T: Real>(
    model: &Model<T>,
    jobs: &[BenchJob<T>],
    cfg: &DecodeConfig,
    runs: usize,
) -> Result<BenchReport> {
    if jobs.is_empty() || runs == 0 {
        return Err(Error::Metrics(
            "benchmark needs at least one job and one run".into(),
        ));
    }
    cfg.validate()?;
    let audio_s = jobs.iter().map(|j| j.enc.frames as f64).sum::<f64>() / FRAMES_PER_SECOND;
    if audio_s <= 0.0 {
        return Err(Error::Metrics("benchmark jobs carry no audio".into()));
    }

    let mut walls = Vec::with_capacity(runs);
    let mut totals: Option<(u64, u64, u64)> = None;
    for _ in 0..runs {
        let t0 = Instant::now();
        let results = jobs
            .par_iter()
            .map(|job| {
                let scorer = ModelScorer {
                    model,
                    enc: &job.enc,
                    tables: job.tables.as_ref(),
                };
                beam_search(&scorer, cfg)
            })
            .collect::<Result<Vec<_>>>();
        let wall = t0.elapsed().as_secs_f64();
        let results = results?;

        let mut steps = StepTotals::default();
        for r in &results {
            steps.absorb(r);
        }
        let now = (steps.steps, steps.forwards, steps.dyn_tokens);
        match totals {
            None => totals = Some(now),
            Some(prev) if prev != now => {
                return Err(Error::Metrics(
                    "step counts changed between timing runs".into(),
                ));
            }
            Some(_) => {}
        }
        walls.push(wall);
    }
    walls.sort_by(|a, b| a.partial_cmp(b).expect("wall times are finite"));
    let wall_s = walls[walls.len() / 2];
    let (steps_total, forwards_total, dyn_tokens) = totals.expect("at least one run happened");
    Ok(BenchReport {
        utterances: jobs.len(),
        audio_s,
        wall_s,
        runs,
        rtf: wall_s / audio_s,
        steps_total,
        forwards_total,
        dyn_tokens,
    })
}

/// Fixed-width plain-text table: first column left-aligned, the rest
/// right-aligned under their headers.
pub fn text_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (c, cell) in row.iter().enumerate().take(cols) {
            widths[c] = widths[c].max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |cells: &[String], out: &mut String| {
        for (c, cell) in cells.iter().enumerate().take(cols) {
            if c > 0 {
                out.push_str("  ");
            }
            if c == 0 {
                out.push_str(&format!("{:<width$}", cell, width = widths[c]));
            } else {
                out.push_str(&format!("{:>width$}", cell, width = widths[c]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit(headers, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    emit(&rule, &mut out);
    for row in rows {
        emit(row, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, Stage};
    use crate::rng::Streams;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_transcripts_align_with_zero_cost() {
        let a = align(&words("a b c"), &words("a b c"));
        assert_eq!(a.cost(), 0);
        assert_eq!(a.ops.len(), 3);
        assert!(a.ops.iter().all(|op| matches!(op, EditOp::Match { .. })));
        let empty: Vec<&str> = vec![];
        assert_eq!(align(&empty, &empty).ops.len(), 0);
    }

    #[test]
    fn single_substitution_is_found_and_scored() {
        let a = align(&words("a b c"), &words("a x c"));
        assert_eq!(a.cost(), 1);
        assert_eq!(
            a.ops[1],
            EditOp::Substitute {
                r: "b".into(),
                h: "x".into()
            }
        );
        let rate = wer(&[a]).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-12);
    }

    /// Plain top-down recursion with a memo, written independently of the
    /// tabulated alignment, as a cost oracle.
    fn oracle_cost(r: &[u8], h: &[u8]) -> usize {
        fn go(r: &[u8], h: &[u8], i: usize, j: usize, memo: &mut [Option<usize>], w: usize) -> usize {
            if i == 0 {
                return j;
            }
            if j == 0 {
                return i;
            }
            if let Some(v) = memo[i * w + j] {
                return v;
            }
            let mut best = go(r, h, i - 1, j - 1, memo, w)
                + usize::from(r[i - 1] != h[j - 1]);
            best = best.min(go(r, h, i - 1, j, memo, w) + 1);
            best = best.min(go(r, h, i, j - 1, memo, w) + 1);
            memo[i * w + j] = Some(best);
            best
        }
        let w = h.len() + 1;
        let mut memo = vec![None; (r.len() + 1) * w];
        go(r, h, r.len(), h.len(), &mut memo, w)
    }

    #[test]
    fn alignment_cost_matches_a_recursive_oracle_exhaustively() {
        // Every pair of sequences up to length 6 over a 3-word alphabet.
        let alphabet = ["wa", "wb", "wc"];
        let mut seqs: Vec<Vec<u8>> = vec![vec![]];
        let mut layer: Vec<Vec<u8>> = vec![vec![]];
        for _ in 0..6 {
            let mut next = Vec::with_capacity(layer.len() * alphabet.len());
            for s in &layer {
                for sym in 0..alphabet.len() as u8 {
                    let mut t = s.clone();
                    t.push(sym);
                    next.push(t);
                }
            }
            seqs.extend(next.iter().cloned());
            layer = next;
        }
        assert_eq!(seqs.len(), 1093);

        let as_words: Vec<Vec<&str>> = seqs
            .iter()
            .map(|s| s.iter().map(|&c| alphabet[c as usize]).collect())
            .collect();
        for (ri, r) in seqs.iter().enumerate() {
            for (hi, h) in seqs.iter().enumerate() {
                let a = align(&as_words[ri], &as_words[hi]);
                assert_eq!(a.cost(), oracle_cost(r, h), "ref {r:?} hyp {h:?}");
                // Replaying the ops reproduces both sequences.
                assert_eq!(a.ref_words(), as_words[ri], "ref {r:?} hyp {h:?}");
                assert_eq!(a.hyp_words(), as_words[hi], "ref {r:?} hyp {h:?}");
            }
        }
    }

    #[test]
    fn substitutions_follow_the_reference_word_and_insertions_the_hypothesis() {
        let a = align(
            &words("the alligator sleeps"),
            &words("the allicator sleeps"),
        );
        let s = attribute(&a, |word| word == "alligator");
        assert_eq!((s.ref_listed, s.listed_errors), (1, 1));
        assert_eq!(s.b_wer(), Some(1.0));
        assert_eq!(s.u_wer(), Some(0.0));

        // A list touching neither side leaves the listed rate undefined
        // and the unlisted rate equal to the overall rate.
        let s = attribute(&a, |word| word == "crocodile");
        assert_eq!(s.b_wer(), None);
        assert_eq!(s.u_wer(), s.wer());
        let (b, u) = bwer_uwer(&[a], |word| word == "crocodile");
        assert_eq!(b, None);
        assert_eq!(u, s.wer());

        // An inserted listed word counts toward listed errors even though
        // no reference word is listed, so the listed rate stays undefined
        // while the partition still holds.
        let a = align(&words("a b"), &words("a zebra b"));
        let s = attribute(&a, |word| word == "zebra");
        assert_eq!((s.errors, s.listed_errors, s.unlisted_errors), (1, 1, 0));
        assert_eq!(s.ref_listed, 0);
        assert_eq!(s.b_wer(), None);
        assert_eq!(s.u_wer(), Some(0.0));
    }

    #[test]
    fn listed_and_unlisted_errors_partition_the_total() {
        let alphabet = ["red", "green", "blue", "cyan", "plum", "gold"];
        let streams = Streams::new(4242);
        let mut rng = streams.stream("metrics/partition");
        for _ in 0..1000 {
            let pick = |rng: &mut crate::rng::StreamRng, n: usize| -> Vec<&str> {
                (0..n).map(|_| alphabet[rng.below(alphabet.len())]).collect()
            };
            let refs = {
                let n = rng.below(8);
                pick(&mut rng, n)
            };
            let hyps = {
                let n = rng.below(8);
                pick(&mut rng, n)
            };
            let listed_mask: Vec<bool> = (0..alphabet.len()).map(|_| rng.below(2) == 1).collect();
            let a = align(&refs, &hyps);
            let s = attribute(&a, |w| {
                alphabet.iter().position(|&x| x == w).map(|i| listed_mask[i]).unwrap_or(false)
            });
            assert_eq!(s.listed_errors + s.unlisted_errors, s.errors);
            assert_eq!(s.errors, a.cost());
            assert_eq!(s.ref_words, refs.len());
            assert!(s.ref_listed <= s.ref_words);
        }
    }

    #[test]
    fn rates_render_as_one_decimal_percent_pairs() {
        assert_eq!(fmt_paired(Some(0.039), Some(0.155)), "3.9 (15.5)");
        assert_eq!(fmt_paired(Some(0.039), None), "3.9 (n/a)");
        assert_eq!(fmt_rate(Some(0.0)), "0.0");
        assert_eq!(fmt_rate(Some(1.0)), "100.0");

        let mut counts = ErrorSplit::default();
        counts.ref_words = 100;
        counts.ref_listed = 20;
        counts.errors = 10;
        counts.listed_errors = 7;
        counts.unlisted_errors = 3;
        let rep = EvalReport::new(
            Condition {
                system: "biased".into(),
                split: "test_unseen".into(),
                list_size: 20,
                mu: 0.3,
                beam: 3,
            },
            50,
            counts,
            StepTotals::default(),
        );
        assert_eq!(rep.paired, "10.0 (35.0)");
        assert_eq!(rep.u_wer, Some(3.0 / 80.0));
        let js = serde_json::to_string(&rep).unwrap();
        assert!(!js.contains("rtf"), "timing must stay out of eval rows: {js}");
        let back: EvalReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back.paired, rep.paired);
        assert_eq!(back.condition, rep.condition);
    }

    #[test]
    fn text_table_lines_up_columns() {
        let t = text_table(
            &["cond".to_string(), "wer".to_string()],
            &[
                vec!["baseline".to_string(), "3.9 (15.5)".to_string()],
                vec!["biased".to_string(), "3.0 (3.9)".to_string()],
            ],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("cond"));
        assert!(lines[1].starts_with("----"));
        assert!(lines[2].ends_with("3.9 (15.5)"));
        assert!(lines[3].ends_with("3.0 (3.9)"));
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 4,
            d_model: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_mult: 2,
            vocab: 56,
            max_len: 40,
            d_bias: 8,
            bias_layers: 1,
            bias_heads: 2,
            bias_ff_mult: 2,
            bias_positional: true,
            freeze_static_io: false,
        }
    }

    #[test]
    fn benchmark_reports_consistent_steps_and_positive_rtf() {
        let m: Model<f32> = Model::new(tiny_cfg(), Stage::Pretrain, 57)
            .unwrap()
            .attach_biasing(58)
            .unwrap();
        let streams = Streams::new(59);
        let feats: Vec<Tensor<f32>> = (0..4)
            .map(|i| {
                let mut r = streams.substream("feats", i);
                Tensor::randn(vec![6 + i as usize, 4], 1.0, &mut r)
            })
            .collect();
        let spell: Vec<Vec<u32>> = vec![vec![4, 5, 6], vec![7, 8]];
        let jobs: Vec<BenchJob<f32>> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let lists = if i % 2 == 0 { &spell[..] } else { &[] };
                BenchJob::prepare(&m, f, lists).unwrap()
            })
            .collect();
        let cfg = DecodeConfig {
            beam: 2,
            max_steps: 10,
            mu: 0.3,
        };
        let a = rtf_bench(&m, &jobs, &cfg, 3).unwrap();
        let b = rtf_bench(&m, &jobs, &cfg, 3).unwrap();
        assert!(a.rtf > 0.0 && a.wall_s > 0.0);
        assert!((a.audio_s - (6 + 7 + 8 + 9) as f64 / 100.0).abs() < 1e-12);
        assert_eq!(a.steps_total, b.steps_total);
        assert_eq!(a.forwards_total, b.forwards_total);
        assert_eq!(a.dyn_tokens, b.dyn_tokens);
        assert_eq!(a.runs, 3);
    }
}
