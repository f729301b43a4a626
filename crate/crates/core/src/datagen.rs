//! Synthetic speech-like data: lexicon, corpora, and feature synthesis.
//!
//! Every word owns a private random sequence of acoustic units, drawn
//! injectively but with no relation to its spelling. Two words sharing a
//! prefix share nothing acoustically, so nothing about an unheard word's
//! sound can be inferred from its letters. That makes the data a clean probe
//! for contextual biasing: recovering a word requires having actually heard
//! it (or being handed it on a biasing list), not grapheme luck.
//!
//! An utterance renders as unit mean vectors repeated for a random duration,
//! plus isotropic Gaussian noise and short silences at word boundaries.
//! Corpora are written as a directory of JSONL split manifests plus one
//! binary feature file per utterance; a top-level manifest pins content
//! hashes so downstream stages can verify what they read.

use crate::error::{Error, Result};
use crate::rng::{StreamRng, Streams};
use crate::tensor::Tensor;
use crate::vocab::StaticVocab;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Read as _;
use std::path::Path;

/// Pseudo-unit id for inter-word silence (zero mean).
pub const SILENCE: usize = usize::MAX;

/// Feature file magic: bytes "FEAT" read as little-endian u32.
pub const FEAT_MAGIC: u32 = 0x5441_4546;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqClass {
    /// Backbone staple: frequent in pretraining text.
    Common,
    /// A handful of pretraining occurrences; the biasing stage's real prey.
    Rare,
    /// Absent from all training text; only ever seen at test time.
    Unseen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub common_words: usize,
    pub rare_words: usize,
    /// Words generated for the unseen pool (targets plus eval distractors).
    pub unseen_pool: usize,
    /// How many pool words actually appear in the unseen test split.
    pub unseen_targets: usize,
    pub units: usize,
    pub feat_dim: usize,
    pub word_len: (usize, usize),
    /// Frames each unit occupies, drawn uniformly per occurrence.
    pub unit_dur: (usize, usize),
    pub silence_dur: (usize, usize),
    pub noise_std: f64,
    pub max_frames: usize,
    pub pretrain_utts: usize,
    pub val_utts: usize,
    pub bias_utts: usize,
    pub test_utts: usize,
    /// Words per utterance before target injection.
    pub utt_words: (usize, usize),
    /// Zipf exponent over the common lexicon.
    pub zipf_s: f64,
    /// Total occurrences of each rare word in the pretraining split.
    pub rare_pretrain_occ: (usize, usize),
    /// Total occurrences of each rare word in the biasing-train split.
    pub rare_bias_occ: (usize, usize),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            common_words: 160,
            rare_words: 5,
            unseen_pool: 40,
            unseen_targets: 5,
            units: 24,
            feat_dim: 32,
            word_len: (3, 6),
            unit_dur: (2, 4),
            silence_dur: (1, 2),
            noise_std: 0.25,
            max_frames: 512,
            pretrain_utts: 2000,
            val_utts: 100,
            bias_utts: 1500,
            test_utts: 200,
            utt_words: (3, 6),
            zipf_s: 0.9,
            rare_pretrain_occ: (1, 2),
            rare_bias_occ: (20, 30),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.common_words < 10 {
            problems.push("common_words < 10".to_string());
        }
        if self.unseen_targets > self.unseen_pool {
            problems.push(format!(
                "unseen_targets {} exceeds unseen_pool {}",
                self.unseen_targets, self.unseen_pool
            ));
        }
        if self.rare_words == 0 || self.unseen_targets == 0 {
            problems.push("need at least one rare and one unseen target".to_string());
        }
        if self.units < 2 {
            problems.push("units < 2".to_string());
        }
        if self.word_len.0 < 1 || self.word_len.0 > self.word_len.1 {
            problems.push(format!("bad word_len {:?}", self.word_len));
        }
        if self.unit_dur.0 < 1 || self.unit_dur.0 > self.unit_dur.1 {
            problems.push(format!("bad unit_dur {:?}", self.unit_dur));
        }
        if self.utt_words.0 < 1 || self.utt_words.0 > self.utt_words.1 {
            problems.push(format!("bad utt_words {:?}", self.utt_words));
        }
        if self.rare_pretrain_occ.0 > self.rare_pretrain_occ.1
            || self.rare_bias_occ.0 > self.rare_bias_occ.1
        {
            problems.push("rare occurrence ranges are inverted".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Datagen(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexWord {
    pub text: String,
    pub units: Vec<usize>,
    pub class: FreqClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<LexWord>,
    /// Unit mean vectors, `units` rows of `feat_dim` values.
    pub unit_means: Vec<Vec<f32>>,
    #[serde(skip)]
    by_text: HashMap<String, usize>,
}

impl Lexicon {
    /// Draws word spellings and their acoustic unit sequences. Spellings are
    /// unique; unit sequences are unique as whole sequences and independent
    /// of the spelling that owns them.
    pub fn generate(cfg: &DataConfig, streams: &Streams) -> Result<Self> {
        cfg.validate()?;
        let mut word_rng = streams.stream("lexicon/words");
        let mut unit_rng = streams.stream("lexicon/units");
        let mut mean_rng = streams.stream("lexicon/means");

        let total = cfg.common_words + cfg.rare_words + cfg.unseen_pool;
        let mut texts: Vec<String> = Vec::with_capacity(total);
        let mut seen_text: HashSet<String> = HashSet::new();
        let mut guard = 0usize;
        while texts.len() < total {
            guard += 1;
            if guard > total * 1000 {
                return Err(Error::Datagen(
                    "could not draw enough distinct spellings; widen word_len".into(),
                ));
            }
            let len = word_rng.range_inclusive(cfg.word_len.0, cfg.word_len.1);
            let w: String = (0..len)
                .map(|_| (b'a' + word_rng.below(26) as u8) as char)
                .collect();
            if seen_text.insert(w.clone()) {
                texts.push(w);
            }
        }

        let mut seqs: Vec<Vec<usize>> = Vec::with_capacity(total);
        let mut seen_seq: HashSet<Vec<usize>> = HashSet::new();
        for text in &texts {
            let len = text.chars().count();
            let mut guard = 0usize;
            loop {
                guard += 1;
                if guard > 10_000 {
                    return Err(Error::Datagen(
                        "could not draw distinct unit sequences; raise units".into(),
                    ));
                }
                let s: Vec<usize> = (0..len).map(|_| unit_rng.below(cfg.units)).collect();
                if seen_seq.insert(s.clone()) {
                    seqs.push(s);
                    break;
                }
            }
        }

        let words: Vec<LexWord> = texts
            .into_iter()
            .zip(seqs)
            .enumerate()
            .map(|(i, (text, units))| {
                let class = if i < cfg.common_words {
                    FreqClass::Common
                } else if i < cfg.common_words + cfg.rare_words {
                    FreqClass::Rare
                } else {
                    FreqClass::Unseen
                };
                LexWord { text, units, class }
            })
            .collect();

        let unit_means: Vec<Vec<f32>> = (0..cfg.units)
            .map(|_| {
                (0..cfg.feat_dim)
                    .map(|_| mean_rng.normal() as f32)
                    .collect()
            })
            .collect();

        let mut lex = Lexicon {
            words,
            unit_means,
            by_text: HashMap::new(),
        };
        lex.rebuild_index();
        Ok(lex)
    }

    fn rebuild_index(&mut self) {
        self.by_text = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.text.clone(), i))
            .collect();
    }

    pub fn feat_dim(&self) -> usize {
        self.unit_means.first().map(|m| m.len()).unwrap_or(0)
    }

    pub fn word(&self, text: &str) -> Option<&LexWord> {
        self.by_text.get(text).map(|&i| &self.words[i])
    }

    pub fn words_in_class(&self, class: FreqClass) -> impl Iterator<Item = &LexWord> {
        self.words.iter().filter(move |w| w.class == class)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lex: Lexicon = serde_json::from_str(&body)?;
        lex.rebuild_index();
        Ok(lex)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub name: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub lexicon: Lexicon,
    pub splits: Vec<CorpusSplit>,
    pub unseen_targets: Vec<String>,
    pub rare_targets: Vec<String>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&CorpusSplit> {
        self.splits.iter().find(|s| s.name == name)
    }
}

pub const SPLIT_NAMES: [&str; 5] = ["pretrain", "val", "bias_train", "test_seen", "test_unseen"];

/// Builds the five text splits over a fresh lexicon.
///
/// - `pretrain` and `val`: Zipf text over common words; each rare word is
///   planted in `pretrain` a small number of times, never in `val`.
/// - `bias_train`: same distribution, rare words planted often enough for an
///   adapter to learn them.
/// - `test_seen`: common words only; measures collateral damage of biasing.
/// - `test_unseen`: every utterance carries one unseen-pool target and one
///   rare target among common filler.
///
/// Unseen-pool words never occur in any other split.
pub fn generate_corpus(cfg: &DataConfig, streams: &Streams) -> Result<Corpus> {
    let lexicon = Lexicon::generate(cfg, streams)?;
    let common: Vec<String> = lexicon
        .words_in_class(FreqClass::Common)
        .map(|w| w.text.clone())
        .collect();
    let rare: Vec<String> = lexicon
        .words_in_class(FreqClass::Rare)
        .map(|w| w.text.clone())
        .collect();
    let pool: Vec<String> = lexicon
        .words_in_class(FreqClass::Unseen)
        .map(|w| w.text.clone())
        .collect();
    let unseen_targets: Vec<String> = pool[..cfg.unseen_targets].to_vec();

    let zipf: Vec<f64> = (0..common.len())
        .map(|i| 1.0 / ((i + 1) as f64).powf(cfg.zipf_s))
        .collect();

    let mut splits = Vec::new();

    let zipf_split = |name: &str, count: usize| -> Vec<Utterance> {
        let mut rng = streams.stream(&format!("text/{name}"));
        (0..count)
            .map(|i| {
                let n = rng.range_inclusive(cfg.utt_words.0, cfg.utt_words.1);
                let words: Vec<&str> = (0..n)
                    .map(|_| common[rng.weighted(&zipf)].as_str())
                    .collect();
                Utterance {
                    id: format!("{name}_{i:05}"),
                    text: words.join(" "),
                }
            })
            .collect()
    };

    let plant = |utts: &mut Vec<Utterance>,
                 words: &[String],
                 occ: (usize, usize),
                 rng: &mut StreamRng|
     -> Result<()> {
        for w in words {
            let times = rng.range_inclusive(occ.0, occ.1);
            if times > utts.len() {
                return Err(Error::Datagen(format!(
                    "cannot plant {w:?} {times} times into {} utterances",
                    utts.len()
                )));
            }
            let slots = rng.sample_distinct(utts.len(), times);
            for slot in slots {
                let mut parts: Vec<String> =
                    utts[slot].text.split(' ').map(|s| s.to_string()).collect();
                let at = rng.below(parts.len() + 1);
                parts.insert(at, w.clone());
                utts[slot].text = parts.join(" ");
            }
        }
        Ok(())
    };

    let mut pretrain = zipf_split("pretrain", cfg.pretrain_utts);
    let mut plant_rng = streams.stream("plant/pretrain");
    plant(&mut pretrain, &rare, cfg.rare_pretrain_occ, &mut plant_rng)?;
    splits.push(CorpusSplit {
        name: "pretrain".into(),
        utterances: pretrain,
    });

    splits.push(CorpusSplit {
        name: "val".into(),
        utterances: zipf_split("val", cfg.val_utts),
    });

    let mut bias_train = zipf_split("bias_train", cfg.bias_utts);
    let mut plant_rng = streams.stream("plant/bias_train");
    plant(&mut bias_train, &rare, cfg.rare_bias_occ, &mut plant_rng)?;
    splits.push(CorpusSplit {
        name: "bias_train".into(),
        utterances: bias_train,
    });

    splits.push(CorpusSplit {
        name: "test_seen".into(),
        utterances: zipf_split("test_seen", cfg.test_utts),
    });

    let mut unseen_split = zipf_split("test_unseen", cfg.test_utts);
    let mut tgt_rng = streams.stream("plant/test_unseen");
    for (i, utt) in unseen_split.iter_mut().enumerate() {
        let u = &unseen_targets[i % unseen_targets.len()];
        let r = &rare[tgt_rng.below(rare.len())];
        let mut parts: Vec<String> = utt.text.split(' ').map(|s| s.to_string()).collect();
        let at = tgt_rng.below(parts.len() + 1);
        parts.insert(at, u.clone());
        let at = tgt_rng.below(parts.len() + 1);
        parts.insert(at, r.clone());
        utt.text = parts.join(" ");
    }
    splits.push(CorpusSplit {
        name: "test_unseen".into(),
        utterances: unseen_split,
    });

    Ok(Corpus {
        lexicon,
        splits,
        unseen_targets,
        rare_targets: rare,
    })
}

// ── feature synthesis ───────────────────────────────────────────────────

/// Expands an utterance into (unit, duration) spans: silence, then each
/// word's units, with silence between words and at the end.
pub fn utterance_spans(
    lex: &Lexicon,
    cfg: &DataConfig,
    text: &str,
    rng: &mut StreamRng,
) -> Result<Vec<(usize, usize)>> {
    let mut spans = Vec::new();
    let sil = |rng: &mut StreamRng| {
        (
            SILENCE,
            rng.range_inclusive(cfg.silence_dur.0, cfg.silence_dur.1),
        )
    };
    spans.push(sil(rng));
    for word in text.split(' ') {
        let w = lex
            .word(word)
            .ok_or_else(|| Error::Datagen(format!("word {word:?} missing from lexicon")))?;
        for &u in &w.units {
            spans.push((u, rng.range_inclusive(cfg.unit_dur.0, cfg.unit_dur.1)));
        }
        spans.push(sil(rng));
    }
    Ok(spans)
}

/// Renders explicit (unit, duration) spans to a frame matrix: each frame is
/// the unit's mean vector plus isotropic Gaussian noise.
pub fn synth_with_durations(
    lex: &Lexicon,
    spans: &[(usize, usize)],
    noise_std: f64,
    max_frames: usize,
    rng: &mut StreamRng,
) -> Result<Tensor<f32>> {
    let dim = lex.feat_dim();
    let frames: usize = spans.iter().map(|&(_, d)| d).sum();
    if frames == 0 {
        return Err(Error::Datagen("utterance renders to zero frames".into()));
    }
    if frames > max_frames {
        return Err(Error::Datagen(format!(
            "utterance renders to {frames} frames, cap is {max_frames}"
        )));
    }
    let std = noise_std as f32;
    let mut data = Vec::with_capacity(frames * dim);
    for &(unit, dur) in spans {
        if unit != SILENCE && unit >= lex.unit_means.len() {
            return Err(Error::Datagen(format!(
                "unit {unit} outside inventory of {}",
                lex.unit_means.len()
            )));
        }
        for _ in 0..dur {
            for j in 0..dim {
                let mean = if unit == SILENCE {
                    0.0
                } else {
                    lex.unit_means[unit][j]
                };
                data.push(mean + std * rng.normal() as f32);
            }
        }
    }
    Ok(Tensor::new(vec![frames, dim], data))
}

/// Full path from text to features, drawing durations and noise from `rng`.
pub fn synth_features(
    lex: &Lexicon,
    cfg: &DataConfig,
    text: &str,
    rng: &mut StreamRng,
) -> Result<Tensor<f32>> {
    let spans = utterance_spans(lex, cfg, text, rng)?;
    synth_with_durations(lex, &spans, cfg.noise_std, cfg.max_frames, rng)
}

// ── on-disk corpus ──────────────────────────────────────────────────────

/// One line of a split's JSONL manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub text: String,
    pub frames: usize,
    /// Feature file path relative to the corpus root.
    pub feat: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub utterances: usize,
    pub frames_total: usize,
    pub jsonl_sha256: String,
    /// Hash over (id, file hash) pairs in id order; pins every feature byte.
    pub features_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec_hash: String,
    pub seed: u64,
    pub config: DataConfig,
    pub splits: Vec<SplitManifest>,
}

pub fn write_features(path: &Path, feats: &Tensor<f32>) -> Result<()> {
    let shape = feats.shape();
    if shape.len() != 2 {
        return Err(Error::Datagen(format!(
            "feature tensors are (frames, dim), got {shape:?}"
        )));
    }
    let (t, f) = (shape[0], shape[1]);
    let mut buf = Vec::with_capacity(12 + t * f * 4);
    buf.extend_from_slice(&FEAT_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    for &v in feats.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 {
        return Err(Error::Datagen(format!(
            "{}: too short for a feature header",
            path.display()
        )));
    }
    let magic = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    if magic != FEAT_MAGIC {
        return Err(Error::Datagen(format!(
            "{}: bad magic {magic:#x}",
            path.display()
        )));
    }
    let t = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let want = 12 + t * f * 4;
    if buf.len() != want {
        return Err(Error::Datagen(format!(
            "{}: {} bytes for {t}x{f} features, expected {want}",
            path.display(),
            buf.len()
        )));
    }
    let data: Vec<f32> = buf[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(vec![t, f], data))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Materializes a corpus: inventory, lexicon, split JSONLs, feature files,
/// target lists, and a manifest pinning all content hashes. Feature noise is
/// keyed per utterance id, so the bytes do not depend on write order.
pub fn write_corpus(
    corpus: &Corpus,
    cfg: &DataConfig,
    dir: &Path,
    seed: u64,
    spec_hash: &str,
) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let streams = Streams::new(seed);

    StaticVocab::chars().save(&dir.join("inventory.txt"))?;
    corpus.lexicon.save(&dir.join("lexicon.json"))?;

    let targets = serde_json::json!({
        "unseen": corpus.unseen_targets,
        "rare": corpus.rare_targets,
    });
    let tpath = dir.join("targets.json");
    std::fs::write(&tpath, serde_json::to_string_pretty(&targets)?)
        .map_err(|e| Error::io(&tpath, e))?;

    let splits_dir = dir.join("splits");
    std::fs::create_dir_all(&splits_dir).map_err(|e| Error::io(&splits_dir, e))?;

    let mut split_manifests = Vec::new();
    for split in &corpus.splits {
        let feat_dir = dir.join("features").join(&split.name);
        std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

        let mut jsonl = String::new();
        let mut frames_total = 0usize;
        let mut feat_hashes = String::new();
        for (i, utt) in split.utterances.iter().enumerate() {
            let mut rng = streams.substream(&format!("features/{}", split.name), i as u64);
            let feats = synth_features(&corpus.lexicon, cfg, &utt.text, &mut rng)?;
            let rel = format!("features/{}/{}.feat", split.name, utt.id);
            write_features(&dir.join(&rel), &feats)?;
            let frames = feats.shape()[0];
            frames_total += frames;
            let mut header = Vec::with_capacity(12 + feats.numel() * 4);
            header.extend_from_slice(&FEAT_MAGIC.to_le_bytes());
            header.extend_from_slice(&(frames as u32).to_le_bytes());
            header.extend_from_slice(&(feats.shape()[1] as u32).to_le_bytes());
            for &v in feats.data() {
                header.extend_from_slice(&v.to_le_bytes());
            }
            let _ = writeln!(feat_hashes, "{} {}", utt.id, sha256_hex(&header));
            let rec = UtteranceRecord {
                id: utt.id.clone(),
                text: utt.text.clone(),
                frames,
                feat: rel,
            };
            let _ = writeln!(jsonl, "{}", serde_json::to_string(&rec)?);
        }
        let jpath = splits_dir.join(format!("{}.jsonl", split.name));
        std::fs::write(&jpath, &jsonl).map_err(|e| Error::io(&jpath, e))?;
        split_manifests.push(SplitManifest {
            name: split.name.clone(),
            utterances: split.utterances.len(),
            frames_total,
            jsonl_sha256: sha256_hex(jsonl.as_bytes()),
            features_sha256: sha256_hex(feat_hashes.as_bytes()),
        });
    }

    let manifest = CorpusManifest {
        spec_hash: spec_hash.to_string(),
        seed,
        config: cfg.clone(),
        splits: split_manifests,
    };
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&body)?)
}

pub fn load_split(dir: &Path, name: &str) -> Result<Vec<UtteranceRecord>> {
    let path = dir.join("splits").join(format!("{name}.jsonl"));
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(line).map_err(|e| {
            Error::Datagen(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Datagen(format!("{}: no utterances", path.display())));
    }
    Ok(out)
}

/// Loads a split's records together with their feature matrices.
pub fn load_split_features(
    dir: &Path,
    name: &str,
) -> Result<Vec<(UtteranceRecord, Tensor<f32>)>> {
    let recs = load_split(dir, name)?;
    recs.into_iter()
        .map(|r| {
            let feats = read_features(&dir.join(&r.feat))?;
            if feats.shape()[0] != r.frames {
                return Err(Error::Datagen(format!(
                    "{}: manifest says {} frames, file has {}",
                    r.id,
                    r.frames,
                    feats.shape()[0]
                )));
            }
            Ok((r, feats))
        })
        .collect()
}

pub fn load_targets(dir: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let path = dir.join("targets.json");
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&body)?;
    let pull = |key: &str| -> Result<Vec<String>> {
        v.get(key)
            .and_then(|x| x.as_array())
            .map(|a| {
                a.iter()
                    .filter_map(|s| s.as_str().map(|s| s.to_string()))
                    .collect()
            })
            .ok_or_else(|| Error::Datagen(format!("targets.json missing {key:?} list")))
    };
    Ok((pull("unseen")?, pull("rare")?))
}

/// Assembles the evaluation biasing list for a split: every target word
/// first (unseen then rare, stable order), then seeded distractors drawn
/// from the rest of the lexicon until the list reaches `n`. A zero-size
/// list disables biasing outright.
pub fn build_eval_biasing_list(
    lex: &Lexicon,
    unseen_targets: &[String],
    rare_targets: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut list: Vec<String> = Vec::new();
    list.extend(unseen_targets.iter().cloned());
    list.extend(rare_targets.iter().cloned());
    if list.len() > n {
        return Err(Error::Datagen(format!(
            "list size {n} cannot hold all {} targets",
            list.len()
        )));
    }
    let in_list: HashSet<&str> = list.iter().map(|s| s.as_str()).collect();
    let pool: Vec<&str> = lex
        .words
        .iter()
        .map(|w| w.text.as_str())
        .filter(|t| !in_list.contains(t))
        .collect();
    let need = n - list.len();
    if need > pool.len() {
        return Err(Error::Datagen(format!(
            "need {need} distractors, lexicon offers {}",
            pool.len()
        )));
    }
    let mut rng = Streams::new(seed).stream("eval-biasing-list");
    let picks = rng.sample_distinct(pool.len(), need);
    list.extend(picks.into_iter().map(|i| pool[i].to_string()));
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataConfig {
        DataConfig {
            common_words: 30,
            rare_words: 3,
            unseen_pool: 10,
            unseen_targets: 3,
            units: 12,
            feat_dim: 8,
            pretrain_utts: 60,
            val_utts: 10,
            bias_utts: 50,
            test_utts: 20,
            ..DataConfig::default()
        }
    }

    #[test]
    fn lexicon_spellings_and_unit_sequences_are_unique() {
        let cfg = small_cfg();
        let lex = Lexicon::generate(&cfg, &Streams::new(5)).unwrap();
        let texts: HashSet<&str> = lex.words.iter().map(|w| w.text.as_str()).collect();
        assert_eq!(texts.len(), lex.words.len());
        let seqs: HashSet<&[usize]> = lex.words.iter().map(|w| w.units.as_slice()).collect();
        assert_eq!(seqs.len(), lex.words.len());
        for w in &lex.words {
            assert_eq!(w.units.len(), w.text.chars().count());
            assert!(w.units.iter().all(|&u| u < cfg.units));
        }
    }

    #[test]
    fn unit_sequences_do_not_track_spelling() {
        // Words sharing a first letter should share a first unit no more
        // often than chance. With structure, this would be near 100%.
        let cfg = DataConfig {
            common_words: 300,
            ..small_cfg()
        };
        let lex = Lexicon::generate(&cfg, &Streams::new(9)).unwrap();
        let mut pairs = 0usize;
        let mut agree = 0usize;
        for i in 0..lex.words.len() {
            for j in (i + 1)..lex.words.len() {
                let (a, b) = (&lex.words[i], &lex.words[j]);
                if a.text.as_bytes()[0] == b.text.as_bytes()[0] {
                    pairs += 1;
                    if a.units[0] == b.units[0] {
                        agree += 1;
                    }
                }
            }
        }
        assert!(pairs > 100, "want many shared-letter pairs, got {pairs}");
        let rate = agree as f64 / pairs as f64;
        let chance = 1.0 / cfg.units as f64;
        assert!(
            rate < 3.0 * chance,
            "first-unit agreement {rate:.3} vs chance {chance:.3}"
        );
    }

    #[test]
    fn corpus_respects_exposure_invariants() {
        let cfg = small_cfg();
        let corpus = generate_corpus(&cfg, &Streams::new(17)).unwrap();
        let count_in = |split: &str, word: &str| -> usize {
            corpus
                .split(split)
                .unwrap()
                .utterances
                .iter()
                .flat_map(|u| u.text.split(' '))
                .filter(|w| *w == word)
                .count()
        };
        // Unseen targets appear only in test_unseen.
        for u in &corpus.unseen_targets {
            for split in ["pretrain", "val", "bias_train", "test_seen"] {
                assert_eq!(count_in(split, u), 0, "{u} leaked into {split}");
            }
            assert!(count_in("test_unseen", u) > 0);
        }
        // The rest of the unseen pool appears nowhere at all.
        for w in corpus.lexicon.words_in_class(FreqClass::Unseen) {
            if corpus.unseen_targets.contains(&w.text) {
                continue;
            }
            for split in SPLIT_NAMES {
                assert_eq!(count_in(split, &w.text), 0);
            }
        }
        // Rare words: light touch in pretrain, heavier in bias_train.
        for r in &corpus.rare_targets {
            let p = count_in("pretrain", r);
            assert!(
                (cfg.rare_pretrain_occ.0..=cfg.rare_pretrain_occ.1).contains(&p),
                "{r}: {p} pretrain occurrences"
            );
            let b = count_in("bias_train", r);
            assert!(
                (cfg.rare_bias_occ.0..=cfg.rare_bias_occ.1).contains(&b),
                "{r}: {b} bias_train occurrences"
            );
            assert_eq!(count_in("val", r), 0);
            assert_eq!(count_in("test_seen", r), 0);
        }
        // Every unseen-test utterance carries exactly one unseen target and
        // at least one rare word.
        for utt in &corpus.split("test_unseen").unwrap().utterances {
            let words: Vec<&str> = utt.text.split(' ').collect();
            let unseen = words
                .iter()
                .filter(|w| corpus.unseen_targets.contains(&w.to_string()))
                .count();
            let rare = words
                .iter()
                .filter(|w| corpus.rare_targets.contains(&w.to_string()))
                .count();
            assert_eq!(unseen, 1, "{}", utt.text);
            assert!(rare >= 1, "{}", utt.text);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_corpus(&cfg, &Streams::new(23)).unwrap();
        let b = generate_corpus(&cfg, &Streams::new(23)).unwrap();
        for (sa, sb) in a.splits.iter().zip(&b.splits) {
            assert_eq!(sa.utterances.len(), sb.utterances.len());
            for (ua, ub) in sa.utterances.iter().zip(&sb.utterances) {
                assert_eq!(ua.text, ub.text);
            }
        }
        let c = generate_corpus(&cfg, &Streams::new(24)).unwrap();
        let differs = a
            .splits
            .iter()
            .zip(&c.splits)
            .any(|(sa, sc)| {
                sa.utterances
                    .iter()
                    .zip(&sc.utterances)
                    .any(|(ua, uc)| ua.text != uc.text)
            });
        assert!(differs, "different seeds should differ somewhere");
    }

    #[test]
    fn noisy_frames_recover_unit_means() {
        // Monte Carlo: averaging many frames of one unit approaches its mean.
        let cfg = small_cfg();
        let lex = Lexicon::generate(&cfg, &Streams::new(31)).unwrap();
        let mut rng = Streams::new(31).stream("mc");
        let reps = 4000usize;
        let feats =
            synth_with_durations(&lex, &[(3, reps)], cfg.noise_std, reps, &mut rng).unwrap();
        let dim = lex.feat_dim();
        for j in 0..dim {
            let mut mean = 0.0f64;
            for t in 0..reps {
                mean += feats.data()[t * dim + j] as f64;
            }
            mean /= reps as f64;
            let want = lex.unit_means[3][j] as f64;
            // Standard error ~ 0.4 / sqrt(4000) ~ 0.0063; allow 5 sigma.
            assert!(
                (mean - want).abs() < 0.032,
                "dim {j}: {mean} vs {want}"
            );
        }
    }

    #[test]
    fn feature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let mut rng = Streams::new(3).stream("ft");
        let t = Tensor::<f32>::randn(vec![7, 5], 1.0, &mut rng);
        write_features(&path, &t).unwrap();
        let u = read_features(&path).unwrap();
        assert_eq!(u.shape(), t.shape());
        let same = t
            .data()
            .iter()
            .zip(u.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
        // Corrupt the magic and watch it refuse.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_features(&path).is_err());
    }

    #[test]
    fn corpus_writes_deterministically_and_loads_back() {
        let cfg = small_cfg();
        let corpus = generate_corpus(&cfg, &Streams::new(41)).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = write_corpus(&corpus, &cfg, d1.path(), 41, "deadbeef").unwrap();
        let m2 = write_corpus(&corpus, &cfg, d2.path(), 41, "deadbeef").unwrap();
        for (a, b) in m1.splits.iter().zip(&m2.splits) {
            assert_eq!(a.jsonl_sha256, b.jsonl_sha256);
            assert_eq!(a.features_sha256, b.features_sha256);
        }
        let loaded = load_manifest(d1.path()).unwrap();
        assert_eq!(loaded.spec_hash, "deadbeef");
        assert_eq!(loaded.splits.len(), SPLIT_NAMES.len());
        let recs = load_split_features(d1.path(), "val").unwrap();
        assert_eq!(recs.len(), cfg.val_utts);
        for (rec, feats) in &recs {
            assert_eq!(feats.shape()[1], cfg.feat_dim);
            assert!(rec.frames > 0);
        }
        let (unseen, rare) = load_targets(d1.path()).unwrap();
        assert_eq!(unseen, corpus.unseen_targets);
        assert_eq!(rare, corpus.rare_targets);
        let lex = Lexicon::load(&d1.path().join("lexicon.json")).unwrap();
        assert_eq!(lex.words.len(), corpus.lexicon.words.len());
        assert!(lex.word(&corpus.lexicon.words[0].text).is_some());
    }

    #[test]
    fn eval_list_holds_targets_then_distractors() {
        let cfg = small_cfg();
        let corpus = generate_corpus(&cfg, &Streams::new(47)).unwrap();
        let targets_n = corpus.unseen_targets.len() + corpus.rare_targets.len();
        let list = build_eval_biasing_list(
            &corpus.lexicon,
            &corpus.unseen_targets,
            &corpus.rare_targets,
            targets_n + 5,
            7,
        )
        .unwrap();
        assert_eq!(list.len(), targets_n + 5);
        assert_eq!(&list[..corpus.unseen_targets.len()], &corpus.unseen_targets[..]);
        let uniq: HashSet<&str> = list.iter().map(|s| s.as_str()).collect();
        assert_eq!(uniq.len(), list.len(), "no duplicates");
        // Same seed, same list; zero size means no biasing at all.
        let again = build_eval_biasing_list(
            &corpus.lexicon,
            &corpus.unseen_targets,
            &corpus.rare_targets,
            targets_n + 5,
            7,
        )
        .unwrap();
        assert_eq!(list, again);
        let off = build_eval_biasing_list(
            &corpus.lexicon,
            &corpus.unseen_targets,
            &corpus.rare_targets,
            0,
            7,
        )
        .unwrap();
        assert!(off.is_empty());
        // Too small to hold the targets: refused.
        assert!(build_eval_biasing_list(
            &corpus.lexicon,
            &corpus.unseen_targets,
            &corpus.rare_targets,
            targets_n - 1,
            7,
        )
        .is_err());
    }
}
