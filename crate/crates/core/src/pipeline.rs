//! Experiment orchestration: corpus, two training stages, the decode
//! grid, scoring, the benchmark, and report files.
//!
//! One [`ExperimentSpec`] drives everything. Its hash (output directory
//! excluded) is stamped into every artifact the run produces; loading
//! anything stamped differently is refused, so artifacts from different
//! experiments cannot silently mix. Each stage checks for its artifact
//! before doing work, which makes interrupted runs resumable and repeat
//! runs cheap.
//!
//! Determinism contract: for a fixed spec and seed, checkpoints,
//! `eval_report.json`, and `RESULTS.md` are byte-identical across runs
//! and across resumptions. Wall-clock measurements live only in
//! `bench.json`; everything surfaced elsewhere (step counts, forwards,
//! dynamic-token counts) is scheduling-independent.

use crate::datagen::{self, DataConfig, FreqClass, Lexicon, UtteranceRecord};
use crate::decode::{beam_search, DecodeConfig, DecodeResult, ModelScorer};
use crate::error::{Error, Result};
use crate::metrics::{
    attribute, rtf_bench, text_table, BenchJob, BenchReport, Condition, ErrorSplit, EvalReport,
    IterationReport, StepTotals,
};
use crate::model::{
    load_checkpoint, save_checkpoint, EncodedUtterance, Model, ModelConfig, Stage,
};
use crate::rng::Streams;
use crate::tensor::Tensor;
use crate::train::{pretrain, train_bias, TrainConfig, TrainEvent, TrainItem};
use crate::vocab::{DynamicVocab, StaticVocab};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything one experiment needs, serializable as a single JSON config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub bias_train: TrainConfig,
    /// Beam, step budget, and the default bonus for grid rows.
    pub decode: DecodeConfig,
    /// Biasing-list sizes for the grid; 0 is the unbiased baseline row.
    pub grid_n: Vec<usize>,
    /// Bonus sweep, run at list size `mu_sweep_n` on the unseen split.
    pub mu_sweep: Vec<f64>,
    pub mu_sweep_n: usize,
    /// Timed repetitions per benchmark condition (median reported).
    pub bench_runs: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            seed: 7,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            // The adapters start from scratch against a frozen backbone, so
            // they get a gentler peak, a shorter warmup, and a looser clip:
            // adapter-only gradients run hot early while the list scorer
            // calibrates itself.
            bias_train: TrainConfig {
                peak_lr: 1e-3,
                warmup: 100,
                clip_norm: 5.0,
                ..TrainConfig::default()
            },
            decode: DecodeConfig::default(),
            grid_n: vec![0, 10, 20, 50, 100],
            mu_sweep: vec![0.0, 0.1, 0.3, 0.5, 1.0],
            mu_sweep_n: 20,
            bench_runs: 3,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.bias_train.validate()?;
        self.decode.validate()?;
        let inventory = StaticVocab::chars().size();
        if self.model.vocab != inventory {
            return Err(Error::Pipeline(format!(
                "model vocab {} does not match the {inventory}-piece inventory",
                self.model.vocab
            )));
        }
        if self.model.feat_dim != self.data.feat_dim {
            return Err(Error::Pipeline(format!(
                "model feat_dim {} does not match data feat_dim {}",
                self.model.feat_dim, self.data.feat_dim
            )));
        }
        if self.grid_n.is_empty() {
            return Err(Error::Pipeline("empty list-size grid".into()));
        }
        let targets = self.data.rare_words + self.data.unseen_targets;
        for &n in &self.grid_n {
            if n != 0 && n < targets {
                return Err(Error::Pipeline(format!(
                    "grid size {n} cannot hold all {targets} target words"
                )));
            }
        }
        if !self.mu_sweep.is_empty() && self.mu_sweep_n < targets {
            return Err(Error::Pipeline(format!(
                "sweep size {} cannot hold all {targets} target words",
                self.mu_sweep_n
            )));
        }
        for &mu in &self.mu_sweep {
            if !mu.is_finite() || mu < 0.0 {
                return Err(Error::Pipeline(format!("sweep bonus {mu} is invalid")));
            }
        }
        if self.bench_runs == 0 {
            return Err(Error::Pipeline("bench_runs must be positive".into()));
        }
        Ok(())
    }

    /// Hex digest identifying the experiment. The output directory is
    /// blanked first so a moved experiment still owns its artifacts.
    pub fn spec_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }
    pub fn backbone_path(&self) -> PathBuf {
        self.out_dir.join("backbone.ckpt")
    }
    pub fn biased_path(&self) -> PathBuf {
        self.out_dir.join("biased.ckpt")
    }
    pub fn eval_path(&self) -> PathBuf {
        self.out_dir.join("eval_report.json")
    }
    pub fn bench_path(&self) -> PathBuf {
        self.out_dir.join("bench.json")
    }
    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join("RESULTS.md")
    }
    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.jsonl")
    }
    pub fn spec_path(&self) -> PathBuf {
        self.out_dir.join("spec.json")
    }
}

/// Progress callbacks surfaced to the caller (the CLI prints them).
pub enum PipelineEvent<'a> {
    /// A stage-level status line.
    Stage(String),
    /// A training step or validation record.
    Train(&'a TrainEvent),
}

pub type Progress<'p> = dyn FnMut(PipelineEvent) + 'p;

// Stage seeds are derived from the experiment seed with fixed offsets so
// every stage draws from its own stream family.
const SEED_DATA: u64 = 0;
const SEED_INIT: u64 = 1;
const SEED_PRETRAIN: u64 = 2;
const SEED_ATTACH: u64 = 3;
const SEED_BIAS: u64 = 4;
const SEED_EVAL_LIST: u64 = 5;

fn stage_seed(spec: &ExperimentSpec, offset: u64) -> u64 {
    spec.seed.wrapping_mul(0x0000_0100_0000_01b3).wrapping_add(offset)
}

/// The scored half of the experiment: one row per decode condition plus
/// the iteration comparison. Everything here is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalBundle {
    pub spec_hash: String,
    pub conditions: Vec<EvalReport>,
    /// Baseline-vs-biased step comparison on qualifying unseen-split
    /// utterances; absent when the grid lacks the two conditions.
    pub iteration: Option<IterationReport>,
}

/// Timed half, kept apart from the deterministic reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchBundle {
    pub spec_hash: String,
    pub entries: Vec<BenchEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchEntry {
    pub label: String,
    pub condition: Condition,
    pub report: BenchReport,
}

/// Creates the output directory and pins `spec.json`. An existing file
/// must hash to the same experiment; otherwise the directory belongs to a
/// different run and nothing is touched.
fn prepare_out_dir(spec: &ExperimentSpec) -> Result<String> {
    spec.validate()?;
    let hash = spec.spec_hash();
    std::fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    let path = spec.spec_path();
    if path.exists() {
        let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let stored: ExperimentSpec = serde_json::from_str(&body)?;
        let found = stored.spec_hash();
        if found != hash {
            return Err(Error::SpecMismatch {
                path: path.display().to_string(),
                found,
                expected: hash,
            });
        }
    } else {
        std::fs::write(&path, serde_json::to_string_pretty(spec)?)
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(hash)
}

/// Appends training events to the run log, header line first. Events are
/// buffered by the caller and flushed here in one write.
fn append_log(spec: &ExperimentSpec, hash: &str, lines: &str) -> Result<()> {
    let path = spec.log_path();
    let mut body = String::new();
    if !path.exists() {
        let _ = writeln!(
            body,
            "{}",
            serde_json::json!({ "event": "experiment", "spec_hash": hash })
        );
    }
    body.push_str(lines);
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Generates and materializes the corpus unless a matching one exists.
pub fn stage_data(spec: &ExperimentSpec, progress: &mut Progress) -> Result<()> {
    let hash = prepare_out_dir(spec)?;
    let dir = spec.data_dir();
    if dir.join("manifest.json").exists() {
        let m = datagen::load_manifest(&dir)?;
        if m.spec_hash != hash {
            return Err(Error::SpecMismatch {
                path: dir.join("manifest.json").display().to_string(),
                found: m.spec_hash,
                expected: hash,
            });
        }
        progress(PipelineEvent::Stage("corpus: already present".into()));
        return Ok(());
    }
    progress(PipelineEvent::Stage("corpus: generating".into()));
    let seed = stage_seed(spec, SEED_DATA);
    let corpus = datagen::generate_corpus(&spec.data, &Streams::new(seed))?;
    let manifest = datagen::write_corpus(&corpus, &spec.data, &dir, seed, &hash)?;
    let utts: usize = manifest.splits.iter().map(|s| s.utterances).sum();
    let frames: usize = manifest.splits.iter().map(|s| s.frames_total).sum();
    progress(PipelineEvent::Stage(format!(
        "corpus: {utts} utterances, {frames} frames across {} splits",
        manifest.splits.len()
    )));
    Ok(())
}

fn load_items(dir: &Path, split: &str, vocab: &StaticVocab) -> Result<Vec<TrainItem<f32>>> {
    datagen::load_split_features(dir, split)?
        .into_iter()
        .map(|(rec, feats)| TrainItem::from_text(vocab, rec.id, &rec.text, feats))
        .collect()
}

/// Pretrains the backbone unless a matching checkpoint exists.
pub fn stage_pretrain(spec: &ExperimentSpec, progress: &mut Progress) -> Result<Model<f32>> {
    let hash = prepare_out_dir(spec)?;
    let path = spec.backbone_path();
    if path.exists() {
        let (model, _) = load_checkpoint::<f32>(&path, Some(&hash))?;
        if model.stage != Stage::Pretrain {
            return Err(Error::Pipeline(
                "backbone checkpoint is not a pretrain-stage model".into(),
            ));
        }
        progress(PipelineEvent::Stage("backbone: already trained".into()));
        return Ok(model);
    }
    stage_data(spec, progress)?;
    let vocab = StaticVocab::chars();
    let dir = spec.data_dir();
    let train = load_items(&dir, "pretrain", &vocab)?;
    let val = load_items(&dir, "val", &vocab)?;
    progress(PipelineEvent::Stage(format!(
        "backbone: training on {} utterances ({} epochs)",
        train.len(),
        spec.pretrain.epochs
    )));
    let mut model = Model::new(spec.model.clone(), Stage::Pretrain, stage_seed(spec, SEED_INIT))?;
    let mut log_lines = String::new();
    pretrain(
        &mut model,
        &train,
        &val,
        &spec.pretrain,
        stage_seed(spec, SEED_PRETRAIN),
        &mut |ev| {
            if let Ok(js) = serde_json::to_string(ev) {
                let _ = writeln!(log_lines, "{js}");
            }
            progress(PipelineEvent::Train(ev));
        },
    )?;
    append_log(spec, &hash, &log_lines)?;
    save_checkpoint(&path, &model, &hash)?;
    progress(PipelineEvent::Stage(format!(
        "backbone: saved {}",
        path.display()
    )));
    Ok(model)
}

/// Attaches and trains the biasing adapters unless a matching checkpoint
/// exists. The backbone stays frozen throughout.
pub fn stage_bias(spec: &ExperimentSpec, progress: &mut Progress) -> Result<Model<f32>> {
    let hash = prepare_out_dir(spec)?;
    let path = spec.biased_path();
    if path.exists() {
        let (model, _) = load_checkpoint::<f32>(&path, Some(&hash))?;
        if model.stage != Stage::Bias {
            return Err(Error::Pipeline(
                "biased checkpoint is not an adapter-stage model".into(),
            ));
        }
        progress(PipelineEvent::Stage("adapters: already trained".into()));
        return Ok(model);
    }
    let backbone = stage_pretrain(spec, progress)?;
    let mut model = backbone.attach_biasing(stage_seed(spec, SEED_ATTACH))?;
    let vocab = StaticVocab::chars();
    let dir = spec.data_dir();
    let train = load_items(&dir, "bias_train", &vocab)?;
    let val = load_items(&dir, "val", &vocab)?;
    let lex = Lexicon::load(&dir.join("lexicon.json"))?;
    // Distractors for training lists come from words the backbone has
    // seen; unseen words stay genuinely unseen until evaluation.
    let pool: Vec<String> = lex
        .words
        .iter()
        .filter(|w| w.class != FreqClass::Unseen)
        .map(|w| w.text.clone())
        .collect();
    progress(PipelineEvent::Stage(format!(
        "adapters: training on {} utterances ({} epochs)",
        train.len(),
        spec.bias_train.epochs
    )));
    let mut log_lines = String::new();
    train_bias(
        &mut model,
        &vocab,
        &train,
        &val,
        &pool,
        &spec.bias_train,
        stage_seed(spec, SEED_BIAS),
        &mut |ev| {
            if let Ok(js) = serde_json::to_string(ev) {
                let _ = writeln!(log_lines, "{js}");
            }
            progress(PipelineEvent::Train(ev));
        },
    )?;
    append_log(spec, &hash, &log_lines)?;
    save_checkpoint(&path, &model, &hash)?;
    progress(PipelineEvent::Stage(format!(
        "adapters: saved {}",
        path.display()
    )));
    Ok(model)
}

/// The two scored splits.
const EVAL_SPLITS: [&str; 2] = ["test_seen", "test_unseen"];

struct EvalData {
    lex: Lexicon,
    unseen_targets: Vec<String>,
    rare_targets: Vec<String>,
    /// Target words; scoring attributes errors against this fixed set so
    /// listed-rate denominators do not move with the distractor count.
    target_set: HashSet<String>,
    splits: Vec<SplitData>,
}

struct SplitData {
    name: &'static str,
    recs: Vec<UtteranceRecord>,
    encs: Vec<EncodedUtterance<f32>>,
    feats: Vec<Tensor<f32>>,
}

fn load_eval_data(spec: &ExperimentSpec, model: &Model<f32>) -> Result<EvalData> {
    let dir = spec.data_dir();
    let lex = Lexicon::load(&dir.join("lexicon.json"))?;
    let (unseen_targets, rare_targets) = datagen::load_targets(&dir)?;
    let target_set: HashSet<String> = unseen_targets
        .iter()
        .chain(rare_targets.iter())
        .cloned()
        .collect();
    let mut splits = Vec::new();
    for name in EVAL_SPLITS {
        let loaded = datagen::load_split_features(&dir, name)?;
        let (recs, feats): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
        let encs = feats
            .par_iter()
            .map(|f| model.encode_utterance(f))
            .collect::<Result<Vec<_>>>()?;
        splits.push(SplitData {
            name,
            recs,
            encs,
            feats,
        });
    }
    Ok(EvalData {
        lex,
        unseen_targets,
        rare_targets,
        target_set,
        splits,
    })
}

/// One decode condition's list machinery: the list words in order and the
/// rewriter that maps dynamic ids back to spelled-out pieces.
fn condition_list(
    spec: &ExperimentSpec,
    data: &EvalData,
    n: usize,
) -> Result<(DynamicVocab, Vec<Vec<u32>>)> {
    let vocab = StaticVocab::chars();
    let list = datagen::build_eval_biasing_list(
        &data.lex,
        &data.unseen_targets,
        &data.rare_targets,
        n,
        stage_seed(spec, SEED_EVAL_LIST),
    )?;
    let dv = DynamicVocab::new(&vocab, &list)?;
    let spellings: Vec<Vec<u32>> = dv.words().iter().map(|w| w.ids.clone()).collect();
    Ok((dv, spellings))
}

fn decode_condition(
    model: &Model<f32>,
    split: &SplitData,
    spellings: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<DecodeResult>> {
    let tables = if spellings.is_empty() {
        None
    } else {
        Some(model.bias_tables(spellings)?)
    };
    split
        .encs
        .par_iter()
        .map(|enc| {
            let scorer = ModelScorer {
                model,
                enc,
                tables: tables.as_ref(),
            };
            beam_search(&scorer, cfg)
        })
        .collect()
}

fn hyp_words(vocab: &StaticVocab, dv: &DynamicVocab, r: &DecodeResult) -> Result<Vec<String>> {
    let expanded = dv.expand(&r.tokens)?;
    let text = vocab.detokenize(&expanded)?;
    Ok(text.split_whitespace().map(str::to_string).collect())
}

/// Whether a reference transcript contains a listed word that spells to
/// more than one piece, i.e. a word a dynamic token can actually shorten.
fn has_multipiece_target(vocab: &StaticVocab, targets: &HashSet<String>, text: &str) -> bool {
    text.split_whitespace().any(|w| {
        targets.contains(w)
            && vocab.tokenize(w).map(|ids| ids.len() > 1).unwrap_or(false)
    })
}

/// Decodes and scores the whole grid unless a matching report exists.
pub fn stage_eval(spec: &ExperimentSpec, progress: &mut Progress) -> Result<EvalBundle> {
    let hash = prepare_out_dir(spec)?;
    let path = spec.eval_path();
    if path.exists() {
        let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bundle: EvalBundle = serde_json::from_str(&body)?;
        if bundle.spec_hash != hash {
            return Err(Error::SpecMismatch {
                path: path.display().to_string(),
                found: bundle.spec_hash,
                expected: hash,
            });
        }
        progress(PipelineEvent::Stage("eval: already scored".into()));
        return Ok(bundle);
    }
    let model = stage_bias(spec, progress)?;
    let data = load_eval_data(spec, &model)?;
    let vocab = StaticVocab::chars();

    // Grid rows at the default bonus, then the sweep on the unseen split.
    let mut cells: Vec<(&'static str, usize, f64)> = Vec::new();
    for &n in &spec.grid_n {
        let mu = if n == 0 { 0.0 } else { spec.decode.mu };
        for split in EVAL_SPLITS {
            cells.push((split, n, mu));
        }
    }
    if !spec.mu_sweep.is_empty() {
        for &mu in &spec.mu_sweep {
            let cell = ("test_unseen", spec.mu_sweep_n, mu);
            if !cells.contains(&cell) {
                cells.push(cell);
            }
        }
    }

    let mut conditions: Vec<EvalReport> = Vec::new();
    // Per-utterance results kept for the iteration comparison.
    let mut unseen_baseline: Option<Vec<DecodeResult>> = None;
    let mut unseen_biased: Option<Vec<DecodeResult>> = None;
    for (split_name, n, mu) in cells {
        let split = data
            .splits
            .iter()
            .find(|s| s.name == split_name)
            .expect("eval splits are fixed");
        let (dv, spellings) = condition_list(spec, &data, n)?;
        let cfg = DecodeConfig {
            beam: spec.decode.beam,
            max_steps: spec.decode.max_steps,
            mu,
        };
        let results = decode_condition(&model, split, &spellings, &cfg)?;

        let mut counts = ErrorSplit::default();
        let mut steps = StepTotals::default();
        for (rec, r) in split.recs.iter().zip(&results) {
            let hyp = hyp_words(&vocab, &dv, r)?;
            let refs: Vec<&str> = rec.text.split_whitespace().collect();
            let a = crate::metrics::align(&refs, &hyp);
            counts += attribute(&a, |w| data.target_set.contains(w));
            steps.absorb(r);
        }
        let cond = Condition {
            system: if n == 0 { "backbone" } else { "biased" }.into(),
            split: split_name.into(),
            list_size: n,
            mu,
            beam: cfg.beam,
        };
        let report = EvalReport::new(cond, split.recs.len(), counts, steps);
        progress(PipelineEvent::Stage(format!(
            "eval {split_name} N={n} mu={mu}: WER (listed) {}",
            report.paired
        )));
        if split_name == "test_unseen" {
            if n == 0 {
                unseen_baseline = Some(results);
            } else if n == spec.mu_sweep_n && mu == spec.decode.mu {
                unseen_biased = Some(results);
            }
        }
        conditions.push(report);
    }

    // Biased rows carry the matching unbiased row's step total.
    let baselines: Vec<(String, u64)> = conditions
        .iter()
        .filter(|r| r.condition.list_size == 0)
        .map(|r| (r.condition.split.clone(), r.steps_total))
        .collect();
    for report in &mut conditions {
        if report.condition.list_size > 0 {
            report.steps_baseline = baselines
                .iter()
                .find(|(s, _)| *s == report.condition.split)
                .map(|(_, t)| *t);
        }
    }

    // Step comparison on utterances where biasing had a word to shorten
    // and actually spent a dynamic token.
    let iteration = match (&unseen_baseline, &unseen_biased) {
        (Some(base), Some(biased)) => {
            let split = data
                .splits
                .iter()
                .find(|s| s.name == "test_unseen")
                .expect("unseen split is fixed");
            let pairs: Vec<(u64, u64)> = split
                .recs
                .iter()
                .zip(base.iter().zip(biased))
                .filter(|(rec, (_, bi))| {
                    bi.dyn_tokens > 0
                        && has_multipiece_target(&vocab, &data.target_set, &rec.text)
                })
                .map(|(_, (ba, bi))| (ba.steps as u64, bi.steps as u64))
                .collect();
            Some(IterationReport::from_pairs(&pairs))
        }
        _ => None,
    };

    let bundle = EvalBundle {
        spec_hash: hash,
        conditions,
        iteration,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&bundle)?)
        .map_err(|e| Error::io(&path, e))?;
    progress(PipelineEvent::Stage(format!("eval: saved {}", path.display())));
    Ok(bundle)
}

/// Times the decoder unless a matching benchmark exists. Wall-clock
/// numbers land here and nowhere else.
pub fn stage_bench(spec: &ExperimentSpec, progress: &mut Progress) -> Result<BenchBundle> {
    let hash = prepare_out_dir(spec)?;
    let path = spec.bench_path();
    if path.exists() {
        let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bundle: BenchBundle = serde_json::from_str(&body)?;
        if bundle.spec_hash != hash {
            return Err(Error::SpecMismatch {
                path: path.display().to_string(),
                found: bundle.spec_hash,
                expected: hash,
            });
        }
        progress(PipelineEvent::Stage("bench: already timed".into()));
        return Ok(bundle);
    }
    let model = stage_bias(spec, progress)?;
    let data = load_eval_data(spec, &model)?;
    let split = data
        .splits
        .iter()
        .find(|s| s.name == "test_unseen")
        .expect("unseen split is fixed");

    let n = spec.mu_sweep_n;
    let mu = spec.decode.mu;
    let beam = spec.decode.beam;
    let plan: Vec<(String, usize, f64, usize)> = vec![
        ("baseline".into(), 0, 0.0, beam),
        (format!("biased_n{n}"), n, mu, beam),
        (format!("biased_n{n}_beam2"), n, mu, 2),
        (format!("biased_n{n}_beam4"), n, mu, 4),
    ];
    let mut entries = Vec::new();
    for (label, n, mu, beam) in plan {
        let (_, spellings) = condition_list(spec, &data, n)?;
        let jobs = split
            .feats
            .iter()
            .map(|f| BenchJob::prepare(&model, f, &spellings))
            .collect::<Result<Vec<_>>>()?;
        let cfg = DecodeConfig {
            beam,
            max_steps: spec.decode.max_steps,
            mu,
        };
        let report = rtf_bench(&model, &jobs, &cfg, spec.bench_runs)?;
        progress(PipelineEvent::Stage(format!(
            "bench {label}: rtf {:.4}, {} steps, {} forwards",
            report.rtf, report.steps_total, report.forwards_total
        )));
        entries.push(BenchEntry {
            label,
            condition: Condition {
                system: if n == 0 { "backbone" } else { "biased" }.into(),
                split: split.name.into(),
                list_size: n,
                mu,
                beam,
            },
            report,
        });
    }
    let bundle = BenchBundle {
        spec_hash: hash,
        entries,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&bundle)?)
        .map_err(|e| Error::io(&path, e))?;
    progress(PipelineEvent::Stage(format!("bench: saved {}", path.display())));
    Ok(bundle)
}

/// Renders the deterministic report. Benchmark rows contribute only their
/// scheduling-independent counts; wall-clock stays in `bench.json`.
pub fn render_results(
    spec: &ExperimentSpec,
    bundle: &EvalBundle,
    bench: Option<&BenchBundle>,
) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Results\n");
    let _ = writeln!(md, "- experiment: `{}`", bundle.spec_hash);
    let _ = writeln!(md, "- seed: {}", spec.seed);
    let _ = writeln!(
        md,
        "- beam {}, step budget {}, default bonus {}\n",
        spec.decode.beam, spec.decode.max_steps, spec.decode.mu
    );
    let _ = writeln!(
        md,
        "Rates are percent, paired as \"WER (B-WER)\": overall word error \
         rate, then the rate restricted to the target words the biasing \
         list is meant to recover. \"n/a\" marks an empty denominator.\n"
    );

    for split in EVAL_SPLITS {
        let rows: Vec<&EvalReport> = bundle
            .conditions
            .iter()
            .filter(|r| r.condition.split == split && (r.condition.list_size == 0 || r.condition.mu == spec.decode.mu))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(md, "## List-size grid, {split}\n");
        let headers: Vec<String> = ["system", "N", "mu", "WER (B-WER)", "U-WER", "dyn tokens", "steps"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.condition.system.clone(),
                    r.condition.list_size.to_string(),
                    format!("{}", r.condition.mu),
                    r.paired.clone(),
                    crate::metrics::fmt_rate(r.u_wer),
                    r.dyn_tokens.to_string(),
                    r.steps_total.to_string(),
                ]
            })
            .collect();
        let _ = writeln!(md, "```\n{}```\n", text_table(&headers, &table));
    }

    let sweep: Vec<&EvalReport> = bundle
        .conditions
        .iter()
        .filter(|r| {
            r.condition.split == "test_unseen" && r.condition.list_size == spec.mu_sweep_n
        })
        .collect();
    if !sweep.is_empty() {
        let _ = writeln!(
            md,
            "## Bonus sweep, test_unseen at N={}\n",
            spec.mu_sweep_n
        );
        let headers: Vec<String> = ["mu", "WER (B-WER)", "dyn tokens", "steps"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = sweep.clone();
        rows.sort_by(|a, b| {
            a.condition
                .mu
                .partial_cmp(&b.condition.mu)
                .expect("bonuses are finite")
        });
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    format!("{}", r.condition.mu),
                    r.paired.clone(),
                    r.dyn_tokens.to_string(),
                    r.steps_total.to_string(),
                ]
            })
            .collect();
        let _ = writeln!(md, "```\n{}```\n", text_table(&headers, &table));
    }

    if let Some(it) = &bundle.iteration {
        let _ = writeln!(md, "## Decoding iterations\n");
        let _ = writeln!(
            md,
            "On the {} unseen-split utterances where the biased search spent \
             a dynamic token on a multi-piece target: baseline {} steps vs \
             biased {} steps, a {:.1}% reduction; {} of them finished in \
             strictly fewer steps.\n",
            it.utterances, it.baseline_steps, it.biased_steps, it.reduction_pct, it.strictly_fewer
        );
    }

    if let Some(bench) = bench {
        let _ = writeln!(md, "## Decode effort\n");
        let _ = writeln!(
            md,
            "Deterministic work counts from the benchmark conditions; \
             wall-clock times and real-time factors are machine-dependent \
             and live in `bench.json`.\n"
        );
        let headers: Vec<String> = ["condition", "N", "mu", "beam", "steps", "forwards"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let table: Vec<Vec<String>> = bench
            .entries
            .iter()
            .map(|e| {
                vec![
                    e.label.clone(),
                    e.condition.list_size.to_string(),
                    format!("{}", e.condition.mu),
                    e.condition.beam.to_string(),
                    e.report.steps_total.to_string(),
                    e.report.forwards_total.to_string(),
                ]
            })
            .collect();
        let _ = writeln!(md, "```\n{}```\n", text_table(&headers, &table));
        if let (Some(base), Some(biased)) = (
            bench.entries.iter().find(|e| e.condition.list_size == 0),
            bench
                .entries
                .iter()
                .find(|e| e.condition.list_size > 0 && e.condition.beam == spec.decode.beam),
        ) {
            if base.report.forwards_total > 0 {
                let cut = 100.0
                    * (base.report.forwards_total as f64 - biased.report.forwards_total as f64)
                    / base.report.forwards_total as f64;
                let _ = writeln!(
                    md,
                    "Biasing changes total decoder forwards by {cut:.1}% relative \
                     to the unbiased baseline on the same utterances.\n"
                );
            }
        }
    }
    md
}

/// Renders and writes `RESULTS.md`, folding in the benchmark when one is
/// present and stamped for this experiment.
pub fn write_results(spec: &ExperimentSpec, bundle: &EvalBundle) -> Result<PathBuf> {
    let bench = if spec.bench_path().exists() {
        let body = std::fs::read_to_string(spec.bench_path())
            .map_err(|e| Error::io(spec.bench_path(), e))?;
        let b: BenchBundle = serde_json::from_str(&body)?;
        (b.spec_hash == bundle.spec_hash).then_some(b)
    } else {
        None
    };
    let md = render_results(spec, bundle, bench.as_ref());
    let path = spec.results_path();
    std::fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// The whole experiment: corpus, both training stages, grid evaluation,
/// benchmark, and the rendered report. Every stage resumes from its
/// artifact when one matching this spec already exists.
pub fn run_experiment(spec: &ExperimentSpec, progress: &mut Progress) -> Result<EvalBundle> {
    let bundle = stage_eval(spec, progress)?;
    stage_bench(spec, progress)?;
    let path = write_results(spec, &bundle)?;
    progress(PipelineEvent::Stage(format!("report: {}", path.display())));
    Ok(bundle)
}

/// Decodes one split under one condition and writes hypotheses as JSONL
/// next to the other artifacts. Requires the trained checkpoints; this is
/// an inspection tool, not a training entry point.
pub fn decode_split(
    spec: &ExperimentSpec,
    split_name: &str,
    n: usize,
    mu: f64,
    progress: &mut Progress,
) -> Result<PathBuf> {
    let hash = prepare_out_dir(spec)?;
    let path = spec.biased_path();
    if !path.exists() {
        return Err(Error::Pipeline(format!(
            "{} missing; train first (the run command does everything)",
            path.display()
        )));
    }
    let (model, _) = load_checkpoint::<f32>(&path, Some(&hash))?;
    let dir = spec.data_dir();
    let loaded = datagen::load_split_features(&dir, split_name)?;
    let (recs, feats): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    let encs = feats
        .par_iter()
        .map(|f| model.encode_utterance(f))
        .collect::<Result<Vec<_>>>()?;
    let split = SplitData {
        name: "adhoc",
        recs,
        encs,
        feats,
    };
    let lex = Lexicon::load(&dir.join("lexicon.json"))?;
    let (unseen_targets, rare_targets) = datagen::load_targets(&dir)?;
    let data = EvalData {
        target_set: unseen_targets.iter().chain(&rare_targets).cloned().collect(),
        lex,
        unseen_targets,
        rare_targets,
        splits: Vec::new(),
    };
    let (dv, spellings) = condition_list(spec, &data, n)?;
    let cfg = DecodeConfig {
        beam: spec.decode.beam,
        max_steps: spec.decode.max_steps,
        mu,
    };
    let results = decode_condition(&model, &split, &spellings, &cfg)?;
    let vocab = StaticVocab::chars();

    let mut body = String::new();
    let _ = writeln!(
        body,
        "{}",
        serde_json::json!({ "spec_hash": hash, "split": split_name, "n": n, "mu": mu })
    );
    for (rec, r) in split.recs.iter().zip(&results) {
        let hyp = hyp_words(&vocab, &dv, r)?.join(" ");
        let _ = writeln!(
            body,
            "{}",
            serde_json::json!({
                "id": rec.id,
                "ref": rec.text,
                "hyp": hyp,
                "steps": r.steps,
                "dyn_tokens": r.dyn_tokens,
                "logp": r.logp,
                "truncated": r.truncated,
            })
        );
    }
    let dir = spec.out_dir.join("decodes");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let out = dir.join(format!("{split_name}_n{n}_mu{mu}.jsonl"));
    std::fs::write(&out, body).map_err(|e| Error::io(&out, e))?;
    progress(PipelineEvent::Stage(format!(
        "decoded {} utterances to {}",
        split.recs.len(),
        out.display()
    )));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(dir: &Path) -> ExperimentSpec {
        ExperimentSpec {
            seed: 11,
            data: DataConfig {
                common_words: 30,
                rare_words: 2,
                unseen_pool: 8,
                unseen_targets: 2,
                units: 12,
                feat_dim: 8,
                max_frames: 256,
                pretrain_utts: 24,
                val_utts: 6,
                bias_utts: 16,
                test_utts: 6,
                rare_bias_occ: (2, 3),
                ..DataConfig::default()
            },
            model: ModelConfig {
                feat_dim: 8,
                d_model: 16,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                ff_mult: 2,
                vocab: 56,
                max_len: 256,
                d_bias: 8,
                bias_layers: 1,
                bias_heads: 2,
                bias_ff_mult: 2,
                bias_positional: true,
                freeze_static_io: false,
            },
            pretrain: TrainConfig {
                epochs: 1,
                batch_size: 8,
                warmup: 5,
                log_every: 100,
                val_decode_cap: 4,
                ..TrainConfig::default()
            },
            bias_train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                warmup: 5,
                log_every: 100,
                bias_positives: 2,
                bias_distractors: 6,
                bias_n_min: 4,
                bias_n_max: 8,
                val_decode_cap: 4,
                ..TrainConfig::default()
            },
            decode: DecodeConfig {
                beam: 2,
                max_steps: 48,
                mu: 0.3,
            },
            grid_n: vec![0, 4],
            mu_sweep: vec![0.0, 0.3],
            mu_sweep_n: 4,
            bench_runs: 1,
            out_dir: dir.to_path_buf(),
        }
    }

    fn quiet() -> impl FnMut(PipelineEvent) {
        |_| {}
    }

    #[test]
    fn spec_hash_ignores_the_output_directory() {
        let a = tiny_spec(Path::new("/tmp/a"));
        let b = tiny_spec(Path::new("/tmp/b"));
        assert_eq!(a.spec_hash(), b.spec_hash());
        let mut c = tiny_spec(Path::new("/tmp/a"));
        c.seed = 12;
        assert_ne!(a.spec_hash(), c.spec_hash());
    }

    #[test]
    fn grid_sizes_must_hold_every_target() {
        let tmp = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(tmp.path());
        spec.grid_n = vec![0, 3];
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("target words"), "{err}");
    }

    #[test]
    fn a_full_tiny_run_produces_stamped_artifacts_and_resumes() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = tiny_spec(tmp.path());
        let mut events: Vec<String> = Vec::new();
        let bundle = run_experiment(&spec, &mut |ev| {
            if let PipelineEvent::Stage(s) = ev {
                events.push(s);
            }
        })
        .unwrap();
        assert_eq!(bundle.spec_hash, spec.spec_hash());
        // 2 sizes x 2 splits + one extra sweep point (mu=0 at N=4).
        assert_eq!(bundle.conditions.len(), 5);
        assert!(bundle.iteration.is_some());
        for f in [
            spec.spec_path(),
            spec.backbone_path(),
            spec.biased_path(),
            spec.eval_path(),
            spec.bench_path(),
            spec.results_path(),
            spec.log_path(),
        ] {
            assert!(f.exists(), "missing {}", f.display());
        }
        let md = std::fs::read_to_string(spec.results_path()).unwrap();
        assert!(md.contains(&bundle.spec_hash));
        assert!(md.contains("List-size grid"));

        // Second invocation only reloads.
        let eval_bytes = std::fs::read(spec.eval_path()).unwrap();
        let md_bytes = std::fs::read(spec.results_path()).unwrap();
        let again = run_experiment(&spec, &mut quiet()).unwrap();
        assert_eq!(again.conditions.len(), bundle.conditions.len());
        assert_eq!(std::fs::read(spec.eval_path()).unwrap(), eval_bytes);
        assert_eq!(std::fs::read(spec.results_path()).unwrap(), md_bytes);
    }

    #[test]
    fn artifacts_from_a_different_experiment_are_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = tiny_spec(tmp.path());
        stage_data(&spec, &mut quiet()).unwrap();
        let mut other = tiny_spec(tmp.path());
        other.seed = 99;
        match stage_data(&other, &mut quiet()) {
            Err(Error::SpecMismatch { .. }) => {}
            Err(e) => panic!("expected a stamp mismatch, got {e}"),
            Ok(_) => panic!("a foreign spec.json must be refused"),
        }
    }
}
