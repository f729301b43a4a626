//! Static subword inventory and per-list dynamic vocabularies.
//!
//! The static inventory is character-level with an explicit word-boundary
//! marker: besides the four specials it holds `a`..`z` and the marked forms
//! `_a`..`_z`, where `_x` means "x at the start of a word". Text is
//! tokenized by gluing `_` onto each word-initial character and then greedy
//! longest-matching, so "an alligator" becomes `_a n _a l l i g a t o r`.
//!
//! A [`DynamicVocab`] extends the inventory at run time: word n of the list
//! is addressed by id `K + n`, where K is the static size. Label rewriting
//! replaces whole-word static subsequences with their dynamic id, and
//! expansion inverts that exactly.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub const SOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_PIECES: [&str; NUM_SPECIALS] = ["<sos>", "<eos>", "<pad>", "<unk>"];

#[derive(Debug, Clone)]
pub struct StaticVocab {
    pieces: Vec<String>,
    lookup: HashMap<String, u32>,
    /// Longest piece length in chars, for greedy matching.
    max_piece: usize,
}

impl StaticVocab {
    /// The canonical inventory: 4 specials + 26 characters + 26 word-initial
    /// characters = 56 pieces.
    pub fn chars() -> Self {
        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        for c in 'a'..='z' {
            pieces.push(c.to_string());
        }
        for c in 'a'..='z' {
            pieces.push(format!("_{c}"));
        }
        Self::from_pieces(pieces).expect("canonical inventory is valid")
    }

    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < NUM_SPECIALS {
            return Err(Error::Vocab(format!(
                "inventory has {} pieces, needs at least the {NUM_SPECIALS} specials",
                pieces.len()
            )));
        }
        for (i, want) in SPECIAL_PIECES.iter().enumerate() {
            if pieces[i] != *want {
                return Err(Error::Vocab(format!(
                    "piece {i} is {:?}, expected special {want:?}",
                    pieces[i]
                )));
            }
        }
        let mut lookup = HashMap::new();
        let mut max_piece = 1;
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Vocab(format!("piece {i} is empty")));
            }
            if lookup.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate piece {p:?}")));
            }
            if i >= NUM_SPECIALS {
                max_piece = max_piece.max(p.chars().count());
            }
        }
        Ok(StaticVocab {
            pieces,
            lookup,
            max_piece,
        })
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.lookup.get(piece).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// True if this id begins a word (a `_`-marked piece).
    pub fn is_word_start(&self, id: u32) -> bool {
        self.piece(id).is_some_and(|p| p.starts_with('_'))
    }

    /// Tokenizes lowercase text (single spaces between words) into static
    /// ids, without any specials attached. Unknown characters are rejected
    /// up front rather than silently mapped.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let words = split_words(text)?;
        let mut out = Vec::new();
        for word in words {
            let marked: String = format!("_{word}");
            let chars: Vec<char> = marked.chars().collect();
            let mut i = 0;
            while i < chars.len() {
                let mut matched = None;
                let top = self.max_piece.min(chars.len() - i);
                for len in (1..=top).rev() {
                    let cand: String = chars[i..i + len].iter().collect();
                    if let Some(id) = self.lookup.get(&cand) {
                        matched = Some((*id, len));
                        break;
                    }
                }
                match matched {
                    Some((id, len)) => {
                        out.push(id);
                        i += len;
                    }
                    None => {
                        out.push(UNK);
                        i += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`tokenize`](Self::tokenize): sos/eos/pad are skipped,
    /// unk renders as a literal `<unk>` inside the current word. Ids beyond
    /// the static inventory are an error; expand dynamic ids first.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            if id == SOS || id == EOS || id == PAD {
                continue;
            }
            if id == UNK {
                text.push_str("<unk>");
                continue;
            }
            let piece = self.piece(id).ok_or_else(|| {
                Error::Vocab(format!("id {id} outside static inventory of {}", self.size()))
            })?;
            if let Some(rest) = piece.strip_prefix('_') {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(rest);
            } else {
                text.push_str(piece);
            }
        }
        Ok(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for p in &self.pieces {
            let _ = writeln!(body, "{p}");
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pieces: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        Self::from_pieces(pieces)
    }
}

fn split_words(text: &str) -> Result<Vec<&str>> {
    if text.is_empty() {
        return Err(Error::Vocab("empty text".into()));
    }
    let mut words = Vec::new();
    for word in text.split(' ') {
        if word.is_empty() {
            return Err(Error::Vocab(format!(
                "text {text:?} has leading, trailing, or doubled spaces"
            )));
        }
        if !word.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(Error::Vocab(format!(
                "word {word:?} has characters outside a-z"
            )));
        }
        words.push(word);
    }
    Ok(words)
}

/// One biasing-list entry: a single lowercase word and its static spelling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasingWord {
    pub text: String,
    pub ids: Vec<u32>,
}

impl BiasingWord {
    pub fn new(vocab: &StaticVocab, text: &str) -> Result<Self> {
        let words = split_words(text)?;
        if words.len() != 1 {
            return Err(Error::Vocab(format!(
                "biasing entries are single words, got {text:?}"
            )));
        }
        let ids = vocab.tokenize(text)?;
        if ids.iter().any(|&id| vocab.is_special(id)) {
            return Err(Error::Vocab(format!(
                "word {text:?} does not spell cleanly in the static inventory"
            )));
        }
        Ok(BiasingWord {
            text: text.to_string(),
            ids,
        })
    }
}

/// An ordered biasing list. Word n is addressed by id `K + n`.
#[derive(Debug, Clone)]
pub struct DynamicVocab {
    words: Vec<BiasingWord>,
    /// Static inventory size; dynamic ids start here.
    k: usize,
    /// Word-start flag per static id, for boundary checks without a vocab.
    word_start: Vec<bool>,
    /// Indices of `words` ordered longest spelling first (ties keep list
    /// order), so rewriting is leftmost-longest.
    by_len: Vec<usize>,
}

impl DynamicVocab {
    pub fn new(vocab: &StaticVocab, words: &[String]) -> Result<Self> {
        let mut seen = HashMap::new();
        let mut list = Vec::new();
        for w in words {
            if seen.contains_key(w.as_str()) {
                continue;
            }
            seen.insert(w.as_str(), ());
            list.push(BiasingWord::new(vocab, w)?);
        }
        let mut by_len: Vec<usize> = (0..list.len()).collect();
        by_len.sort_by_key(|&i| std::cmp::Reverse(list[i].ids.len()));
        let word_start = (0..vocab.size() as u32)
            .map(|id| vocab.is_word_start(id))
            .collect();
        Ok(DynamicVocab {
            words: list,
            k: vocab.size(),
            word_start,
            by_len,
        })
    }

    pub fn empty(vocab: &StaticVocab) -> Self {
        Self::new(vocab, &[]).expect("empty list is valid")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn static_size(&self) -> usize {
        self.k
    }

    pub fn word(&self, n: usize) -> &BiasingWord {
        &self.words[n]
    }

    pub fn words(&self) -> &[BiasingWord] {
        &self.words
    }

    pub fn dynamic_id(&self, n: usize) -> u32 {
        (self.k + n) as u32
    }

    pub fn is_dynamic(&self, id: u32) -> bool {
        (id as usize) >= self.k && (id as usize) < self.k + self.words.len()
    }

    pub fn count_dynamic(&self, ids: &[u32]) -> usize {
        ids.iter().filter(|&&id| self.is_dynamic(id)).count()
    }

    fn starts_word(&self, id: u32) -> bool {
        (id as usize) < self.word_start.len() && self.word_start[id as usize]
    }

    /// True when position `at` in `ids` sits on a word boundary: sequence
    /// end, a special, a word-start piece, or a dynamic id (whole word).
    fn boundary(&self, ids: &[u32], at: usize) -> bool {
        if at >= ids.len() {
            return true;
        }
        let id = ids[at];
        (id as usize) < NUM_SPECIALS || self.starts_word(id) || (id as usize) >= self.k
    }

    /// Replaces whole-word occurrences of each list word's static spelling
    /// with its dynamic id, scanning left to right and preferring the longest
    /// spelling at each word start. Non-matching content passes through
    /// untouched, so an empty list is the identity.
    pub fn rewrite(&self, ids: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(ids.len());
        let mut i = 0;
        while i < ids.len() {
            let mut replaced = false;
            if self.starts_word(ids[i]) {
                for &wi in &self.by_len {
                    let w = &self.words[wi].ids;
                    if ids.len() - i >= w.len()
                        && &ids[i..i + w.len()] == w.as_slice()
                        && self.boundary(ids, i + w.len())
                    {
                        out.push(self.dynamic_id(wi));
                        i += w.len();
                        replaced = true;
                        break;
                    }
                }
            }
            if !replaced {
                out.push(ids[i]);
                i += 1;
            }
        }
        out
    }

    /// Inverse of [`rewrite`](Self::rewrite): dynamic ids become their static
    /// spellings; everything else passes through.
    pub fn expand(&self, ids: &[u32]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if (id as usize) < self.k {
                out.push(id);
            } else {
                let n = id as usize - self.k;
                let w = self.words.get(n).ok_or_else(|| {
                    Error::Vocab(format!(
                        "dynamic id {id} outside list of {} words",
                        self.words.len()
                    ))
                })?;
                out.extend_from_slice(&w.ids);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for w in &self.words {
            let _ = writeln!(body, "{}", w.text);
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(vocab: &StaticVocab, path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        Self::new(vocab, &words)
    }
}
