//! Documents, JSONL corpus I/O, classification-instance construction and the
//! synthetic context-dependent corpus generator.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

/// Shared, immutable token list.
pub type Tokens = Arc<[String]>;

/// Lowercases, splits on whitespace and emits every punctuation character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(ch.to_lowercase().collect());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawSentence", into = "RawSentence")]
pub struct Sentence {
    pub text: String,
    pub tokens: Tokens,
    pub label: Option<String>,
    pub speaker: Option<String>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawSentence {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    speaker: Option<String>,
}

impl From<RawSentence> for Sentence {
    fn from(r: RawSentence) -> Self {
        Sentence::new(r.text, r.label, r.speaker)
    }
}

impl From<Sentence> for RawSentence {
    fn from(s: Sentence) -> Self {
        RawSentence {
            text: s.text,
            label: s.label,
            speaker: s.speaker,
        }
    }
}

impl Sentence {
    pub fn new(text: impl Into<String>, label: Option<String>, speaker: Option<String>) -> Self {
        let text = text.into();
        let tokens: Tokens = tokenize(&text).into();
        Sentence {
            text,
            tokens,
            label,
            speaker,
        }
    }

    pub fn unlabeled(text: impl Into<String>) -> Self {
        Self::new(text, None, None)
    }

    pub fn labeled(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self::new(text, Some(label.into()), None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Sentence>,
}

/// Class names in index order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub labels: Vec<String>,
}

impl LabelMap {
    pub fn new(labels: Vec<String>) -> Self {
        LabelMap { labels }
    }

    /// Labels in order of first appearance across the documents.
    pub fn from_documents(docs: &[Document]) -> Self {
        let mut seen = HashSet::new();
        let mut labels = Vec::new();
        for s in docs.iter().flat_map(|d| &d.sentences) {
            if let Some(l) = &s.label {
                if seen.insert(l.clone()) {
                    labels.push(l.clone());
                }
            }
        }
        LabelMap { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("label map serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

fn validate_documents(docs: &[Document]) -> std::result::Result<(), (usize, String)> {
    let mut ids = HashSet::new();
    for (i, d) in docs.iter().enumerate() {
        if d.sentences.is_empty() {
            return Err((i, format!("document {:?} has no sentences", d.doc_id)));
        }
        if !ids.insert(d.doc_id.as_str()) {
            return Err((i, format!("duplicate doc_id {:?}", d.doc_id)));
        }
    }
    Ok(())
}

/// Reads a JSONL corpus: one `{"doc_id", "sentences": [{"text", "label"?, "speaker"?}]}`
/// object per line. Blank lines are ignored.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Vec<Document>, LabelMap)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut lines = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
        lines.push(idx + 1);
    }
    validate_documents(&docs).map_err(|(i, message)| Error::Parse {
        path: path.to_path_buf(),
        line: lines[i],
        message,
    })?;
    let labels = LabelMap::from_documents(&docs);
    Ok((docs, labels))
}

pub fn save_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        let line = serde_json::to_string(d).expect("documents serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One classification example. `left` is ordered with the focus-adjacent
/// sentence last, `right` with the focus-adjacent sentence first.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub doc_id: String,
    pub sentence_index: usize,
    pub focus: Tokens,
    pub left: Vec<Tokens>,
    pub right: Vec<Tokens>,
    pub label: usize,
}

fn focus_label(doc: &Document, idx: usize, labels: &LabelMap) -> Result<Option<usize>> {
    let s = &doc.sentences[idx];
    let Some(name) = &s.label else {
        return Ok(None);
    };
    let label = labels.index_of(name).ok_or_else(|| {
        Error::invalid(format!("unknown label {name:?} in document {:?}", doc.doc_id))
    })?;
    if s.tokens.is_empty() {
        return Err(Error::invalid(format!(
            "labeled sentence {idx} of document {:?} has no tokens",
            doc.doc_id
        )));
    }
    Ok(Some(label))
}

/// One instance per labeled sentence, with every earlier sentence as left
/// context and every later sentence as right context.
pub fn build_adjacent_instances(doc: &Document, labels: &LabelMap) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for idx in 0..doc.sentences.len() {
        let Some(label) = focus_label(doc, idx, labels)? else {
            continue;
        };
        out.push(Instance {
            doc_id: doc.doc_id.clone(),
            sentence_index: idx,
            focus: doc.sentences[idx].tokens.clone(),
            left: doc.sentences[..idx].iter().map(|s| s.tokens.clone()).collect(),
            right: doc.sentences[idx + 1..]
                .iter()
                .map(|s| s.tokens.clone())
                .collect(),
            label,
        });
    }
    Ok(out)
}

/// Dialog instances: the left slot holds the focus speaker's other turns, the
/// right slot holds every turn of the other speaker. Each slot is ordered by
/// distance to the focus so that the nearest turn sits in the adjacent
/// position; equal distances keep dialog order.
pub fn build_speaker_instances(doc: &Document, labels: &LabelMap) -> Result<Vec<Instance>> {
    let mut speakers = BTreeSet::new();
    for (i, s) in doc.sentences.iter().enumerate() {
        let sp = s.speaker.as_deref().ok_or_else(|| {
            Error::invalid(format!(
                "sentence {i} of document {:?} has no speaker",
                doc.doc_id
            ))
        })?;
        speakers.insert(sp);
    }
    if speakers.len() != 2 {
        return Err(Error::invalid(format!(
            "document {:?} has {} speakers; exactly 2 are required",
            doc.doc_id,
            speakers.len()
        )));
    }
    let mut out = Vec::new();
    for idx in 0..doc.sentences.len() {
        let Some(label) = focus_label(doc, idx, labels)? else {
            continue;
        };
        let focus_speaker = doc.sentences[idx].speaker.as_deref();
        let mut same: Vec<usize> = Vec::new();
        let mut other: Vec<usize> = Vec::new();
        for (j, s) in doc.sentences.iter().enumerate() {
            if j == idx {
                continue;
            }
            if s.speaker.as_deref() == focus_speaker {
                same.push(j);
            } else {
                other.push(j);
            }
        }
        let dist = |j: &usize| j.abs_diff(idx);
        // Nearest first, ties in dialog order.
        same.sort_by_key(|j| (dist(j), *j));
        other.sort_by_key(|j| (dist(j), *j));
        same.reverse();
        let tokens = |js: &[usize]| -> Vec<Tokens> {
            js.iter().map(|&j| doc.sentences[j].tokens.clone()).collect()
        };
        out.push(Instance {
            doc_id: doc.doc_id.clone(),
            sentence_index: idx,
            focus: doc.sentences[idx].tokens.clone(),
            left: tokens(&same),
            right: tokens(&other),
            label,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Earlier sentences left, later sentences right.
    Adjacent,
    /// Same-speaker turns left, other-speaker turns right.
    Speaker,
}

pub fn build_instances(docs: &[Document], labels: &LabelMap, mode: ContextMode) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(match mode {
            ContextMode::Adjacent => build_adjacent_instances(d, labels)?,
            ContextMode::Speaker => build_speaker_instances(d, labels)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Parameters of the synthetic corpus. Each document has one labeled focus
/// sentence made of class-neutral filler; the sentence `signal_position`
/// steps away (negative = earlier) holds the indicator token of the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_documents: usize,
    pub sentences_per_document: usize,
    pub sentence_length: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub signal_position: i64,
    pub noise_rate: f64,
    /// Sentences farther out on the signal's side that carry the indicator of a random class.
    pub distractors: usize,
    /// Also place the label's indicator in the focus sentence.
    pub focus_signal: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_documents: 1000,
            sentences_per_document: 8,
            sentence_length: 8,
            vocab_size: 200,
            num_classes: 2,
            signal_position: -1,
            noise_rate: 0.1,
            distractors: 0,
            focus_signal: false,
            seed: 1,
        }
    }
}

pub fn neutral_token(i: usize) -> String {
    format!("w{i}")
}

pub fn indicator_token(class: usize) -> String {
    format!("cue{class}")
}

pub fn class_name(class: usize) -> String {
    format!("class{class}")
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let reach = self.signal_position.unsigned_abs() as usize;
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.num_documents == 0 || self.sentence_length == 0 || self.vocab_size == 0 {
            return Err(Error::invalid(
                "num_documents, sentence_length and vocab_size must be positive",
            ));
        }
        if self.signal_position == 0 {
            return Err(Error::invalid("signal_position must point at a context sentence"));
        }
        if reach + self.distractors >= self.sentences_per_document {
            return Err(Error::invalid(format!(
                "{} sentences per document cannot hold a signal at offset {} plus {} distractors",
                self.sentences_per_document, self.signal_position, self.distractors
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::invalid("noise_rate must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Best achievable accuracy for a model that reads the signal sentence.
    pub fn bayes_accuracy(&self) -> f64 {
        1.0 - self.noise_rate + self.noise_rate / self.num_classes as f64
    }

    /// Every token the generator can emit, neutral filler first.
    pub fn vocabulary(&self) -> Vec<String> {
        (0..self.vocab_size)
            .map(neutral_token)
            .chain((0..self.num_classes).map(indicator_token))
            .collect()
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap::new((0..self.num_classes).map(class_name).collect())
    }
}

/// Generates the synthetic corpus. With probability `noise_rate` the label is
/// redrawn uniformly over all classes after the signal has been written.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Document>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.sentences_per_document;
    let reach = cfg.signal_position.unsigned_abs() as usize;
    let mut docs = Vec::with_capacity(cfg.num_documents);
    for d in 0..cfg.num_documents {
        let mut sentences: Vec<Vec<String>> = (0..n)
            .map(|_| {
                (0..cfg.sentence_length)
                    .map(|_| neutral_token(rng.gen_range(0..cfg.vocab_size)))
                    .collect()
            })
            .collect();
        let (focus, signal, far): (usize, usize, Vec<usize>) = if cfg.signal_position < 0 {
            let focus = rng.gen_range(reach + cfg.distractors..n);
            (focus, focus - reach, (0..focus - reach).collect())
        } else {
            let focus = rng.gen_range(0..n - reach - cfg.distractors);
            (focus, focus + reach, (focus + reach + 1..n).collect())
        };
        let cue = rng.gen_range(0..cfg.num_classes);
        let pos = rng.gen_range(0..cfg.sentence_length);
        sentences[signal][pos] = indicator_token(cue);
        for &j in far.choose_multiple(&mut rng, cfg.distractors) {
            let pos = rng.gen_range(0..cfg.sentence_length);
            sentences[j][pos] = indicator_token(rng.gen_range(0..cfg.num_classes));
        }
        let label = if rng.gen::<f64>() < cfg.noise_rate {
            rng.gen_range(0..cfg.num_classes)
        } else {
            cue
        };
        if cfg.focus_signal {
            let pos = rng.gen_range(0..cfg.sentence_length);
            sentences[focus][pos] = indicator_token(label);
        }
        docs.push(Document {
            doc_id: format!("doc{d:05}"),
            sentences: sentences
                .into_iter()
                .enumerate()
                .map(|(j, words)| {
                    let label = (j == focus).then(|| class_name(label));
                    Sentence::new(words.join(" "), label, None)
                })
                .collect(),
        });
    }
    Ok(docs)
}

/// Fraction of labels that disagree with the signal sentence's indicator,
/// rescaled by `K / (K - 1)` to estimate the redraw probability.
pub fn estimated_noise_rate(docs: &[Document], cfg: &SynthConfig) -> f64 {
    let cues: HashMap<String, usize> = (0..cfg.num_classes)
        .map(|k| (indicator_token(k), k))
        .collect();
    let mut mismatched = 0usize;
    let mut total = 0usize;
    for d in docs {
        let Some(focus) = d.sentences.iter().position(|s| s.label.is_some()) else {
            continue;
        };
        let signal = (focus as i64 + cfg.signal_position) as usize;
        let cue = d.sentences[signal].tokens.iter().find_map(|t| cues.get(t));
        let label = d.sentences[focus].label.as_deref();
        if let (Some(&cue), Some(label)) = (cue, label) {
            total += 1;
            if label != class_name(cue) {
                mismatched += 1;
            }
        }
    }
    let k = cfg.num_classes as f64;
    mismatched as f64 / total.max(1) as f64 * k / (k - 1.0)
}

/// Frozen embeddings for the synthetic vocabulary: indicator `k` is the unit
/// vector on axis `k`; filler tokens are random on the remaining axes and zero
/// on the indicator axes.
pub fn synthetic_embeddings(cfg: &SynthConfig, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim <= cfg.num_classes {
        return Err(Error::invalid(format!(
            "embedding dimension {dim} must exceed the number of classes {}",
            cfg.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(cfg.vocab_size + cfg.num_classes);
    for i in 0..cfg.vocab_size {
        let mut v = vec![0.0; dim];
        for x in &mut v[cfg.num_classes..] {
            *x = rng.gen_range(-0.5..=0.5);
        }
        entries.push((neutral_token(i), v));
    }
    for k in 0..cfg.num_classes {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        entries.push((indicator_token(k), v));
    }
    EmbeddingTable::from_entries(dim, entries, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Tokens {
        tokenize(s).into()
    }

    #[test]
    fn tokenizer_cases() {
        assert_eq!(tokenize("I got it."), vec!["i", "got", "it", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("U.S.C.,  Yes!"), vec!["u", ".", "s", ".", "c", ".", ",", "yes", "!"]);
        for text in ["Oh, for real?", "Yes! I just found out today.", "a--b (c) 'd'"] {
            let t = tokenize(text);
            assert_eq!(tokenize(&t.join(" ")), t);
        }
    }

    fn doc(id: &str, sents: &[(&str, Option<&str>)]) -> Document {
        Document {
            doc_id: id.into(),
            sentences: sents
                .iter()
                .map(|(t, l)| Sentence::new(*t, l.map(String::from), None))
                .collect(),
        }
    }

    #[test]
    fn corpus_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let docs = vec![
            doc("a", &[("First one.", None), ("Second!", Some("pos"))]),
            Document {
                doc_id: "b".into(),
                sentences: vec![Sentence::new("hi there", Some("neg".into()), Some("M".into()))],
            },
        ];
        save_corpus(&path, &docs).unwrap();
        let (back, labels) = load_corpus(&path).unwrap();
        assert_eq!(back, docs);
        assert_eq!(labels.labels, vec!["pos", "neg"]);

        fs::write(&path, "{\"doc_id\":\"x\",\"sentences\":[]}\n").unwrap();
        assert!(load_corpus(&path).unwrap_err().to_string().contains("no sentences"));
        fs::write(&path, "{\"doc_id\":\"x\",\"sentences\":[{\"text\":\"a\"}]}\n{\"doc_id\":3}\n").unwrap();
        assert!(load_corpus(&path).unwrap_err().to_string().contains(":2:"));
        fs::write(&path, "{\"sentences\":[{\"text\":\"a\"}]}\n").unwrap();
        assert!(load_corpus(&path).unwrap_err().to_string().contains("doc_id"));
        fs::write(
            &path,
            "{\"doc_id\":\"x\",\"sentences\":[{\"text\":\"a\"}]}\n{\"doc_id\":\"x\",\"sentences\":[{\"text\":\"b\"}]}\n",
        )
        .unwrap();
        assert!(load_corpus(&path).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn adjacent_instances() {
        let d = doc("d", &[("one", None), ("two", Some("x")), ("three", None)]);
        let labels = LabelMap::from_documents(std::slice::from_ref(&d));
        let inst = build_adjacent_instances(&d, &labels).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].left, vec![toks("one")]);
        assert_eq!(inst[0].right, vec![toks("three")]);

        let d = doc("d", &[("one", Some("x")), ("two", None)]);
        let inst = build_adjacent_instances(&d, &labels).unwrap();
        assert!(inst[0].left.is_empty());

        let sents: Vec<(String, Option<&str>)> = (0..10).map(|i| (format!("s{i}"), Some("x"))).collect();
        let d = Document {
            doc_id: "ten".into(),
            sentences: sents.iter().map(|(t, l)| Sentence::new(t.as_str(), l.map(String::from), None)).collect(),
        };
        let inst = build_adjacent_instances(&d, &labels).unwrap();
        assert_eq!(inst.len(), 10);
        let total: usize = inst.iter().map(|i| i.left.len() + i.right.len()).sum();
        assert_eq!(total, 10 * 9);
        for (k, i) in inst.iter().enumerate() {
            if k > 0 {
                assert_eq!(i.left.last().unwrap(), &toks(&format!("s{}", k - 1)));
            }
            if k < 9 {
                assert_eq!(i.right.first().unwrap(), &toks(&format!("s{}", k + 1)));
            }
        }

        let bad = doc("d", &[("", Some("x"))]);
        assert!(build_adjacent_instances(&bad, &labels).is_err());
        let unknown = doc("d", &[("a", Some("zzz"))]);
        assert!(build_adjacent_instances(&unknown, &labels).is_err());
    }

    fn dialog(turns: &[(&str, &str, Option<&str>)]) -> Document {
        Document {
            doc_id: "dlg".into(),
            sentences: turns
                .iter()
                .map(|(sp, t, l)| Sentence::new(*t, l.map(String::from), Some(sp.to_string())))
                .collect(),
        }
    }

    #[test]
    fn speaker_instances() {
        let d = dialog(&[
            ("A", "t1", None),
            ("B", "t2", None),
            ("A", "t3", Some("x")),
            ("B", "t4", None),
        ]);
        let labels = LabelMap::from_documents(std::slice::from_ref(&d));
        let inst = build_speaker_instances(&d, &labels).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].left, vec![toks("t1")]);
        assert_eq!(inst[0].right, vec![toks("t2"), toks("t4")]);
        assert!(!inst[0].left.contains(&toks("t3")) && !inst[0].right.contains(&toks("t3")));

        let three = dialog(&[("A", "a", Some("x")), ("B", "b", None), ("C", "c", None)]);
        assert!(build_speaker_instances(&three, &labels).is_err());
        let mut missing = d.clone();
        missing.sentences[1].speaker = None;
        assert!(build_speaker_instances(&missing, &labels).is_err());
    }

    #[test]
    fn speaker_partition_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let turns: Vec<(String, String, Option<&str>)> = (0..20)
            .map(|i| {
                let sp = if rng.gen_bool(0.5) { "A" } else { "B" };
                (sp.to_string(), format!("turn{i}"), rng.gen_bool(0.6).then_some("x"))
            })
            .collect();
        let mut d = dialog(&turns.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), *c)).collect::<Vec<_>>());
        d.sentences[0].speaker = Some("A".into());
        d.sentences[1].speaker = Some("B".into());
        let labels = LabelMap::new(vec!["x".into()]);
        let inst = build_speaker_instances(&d, &labels).unwrap();
        let labeled: Vec<usize> = (0..20).filter(|&i| d.sentences[i].label.is_some()).collect();
        assert_eq!(inst.len(), labeled.len());
        for (i, &f) in inst.iter().zip(&labeled) {
            let sp = &d.sentences[f].speaker;
            let mut same: Vec<Tokens> = Vec::new();
            let mut other: Vec<Tokens> = Vec::new();
            for j in 0..20 {
                if j == f {
                    continue;
                }
                if &d.sentences[j].speaker == sp {
                    same.push(d.sentences[j].tokens.clone());
                } else {
                    other.push(d.sentences[j].tokens.clone());
                }
            }
            let as_set = |v: &[Tokens]| v.iter().cloned().collect::<BTreeSet<_>>();
            assert_eq!(as_set(&i.left), as_set(&same));
            assert_eq!(as_set(&i.right), as_set(&other));
            assert_eq!(i.left.len() + i.right.len(), 19);
            // Adjacent slots hold the nearest turn of each group.
            if let Some(last) = i.left.last() {
                let nearest = (0..20)
                    .filter(|&j| j != f && &d.sentences[j].speaker == sp)
                    .min_by_key(|&j| (j.abs_diff(f), j))
                    .unwrap();
                assert_eq!(last, &d.sentences[nearest].tokens);
            }
        }
    }

    #[test]
    fn synthetic_generator_contract() {
        let cfg = SynthConfig {
            num_documents: 300,
            noise_rate: 0.0,
            num_classes: 3,
            ..SynthConfig::default()
        };
        let docs = generate_synthetic(&cfg).unwrap();
        assert_eq!(docs, generate_synthetic(&cfg).unwrap());
        let labels = cfg.label_map();
        let instances = build_instances(&docs, &labels, ContextMode::Adjacent).unwrap();
        assert_eq!(instances.len(), 300);
        for inst in &instances {
            // Focus is pure filler; the adjacent left sentence holds exactly one cue, matching the label.
            assert!(inst.focus.iter().all(|t| t.starts_with('w')));
            let cues: Vec<&String> = inst.left.last().unwrap().iter().filter(|t| t.starts_with("cue")).collect();
            assert_eq!(cues.len(), 1);
            assert_eq!(cues[0], &indicator_token(inst.label));
        }
        assert_eq!(estimated_noise_rate(&docs, &cfg), 0.0);
        assert!((SynthConfig { noise_rate: 0.2, num_classes: 2, ..cfg.clone() }.bayes_accuracy() - 0.9).abs() < 1e-15);

        let noisy = SynthConfig {
            num_documents: 5000,
            noise_rate: 0.2,
            ..SynthConfig::default()
        };
        let est = estimated_noise_rate(&generate_synthetic(&noisy).unwrap(), &noisy);
        assert!((est - 0.2).abs() < 0.02, "{est}");
    }

    #[test]
    fn synthetic_distractors_and_focus_signal() {
        let cfg = SynthConfig {
            num_documents: 50,
            sentences_per_document: 6,
            distractors: 2,
            focus_signal: true,
            noise_rate: 0.0,
            ..SynthConfig::default()
        };
        let docs = generate_synthetic(&cfg).unwrap();
        let inst = build_instances(&docs, &cfg.label_map(), ContextMode::Adjacent).unwrap();
        for i in &inst {
            assert!(i.focus.contains(&indicator_token(i.label)));
            let far_cues = i.left[..i.left.len() - 1]
                .iter()
                .filter(|s| s.iter().any(|t| t.starts_with("cue")))
                .count();
            assert_eq!(far_cues, 2);
            assert!(i.right.iter().all(|s| s.iter().all(|t| t.starts_with('w'))));
        }
        assert!(generate_synthetic(&SynthConfig { distractors: 7, ..cfg.clone() }).is_err());
        assert!(generate_synthetic(&SynthConfig { signal_position: 0, ..cfg.clone() }).is_err());
        assert!(generate_synthetic(&SynthConfig { num_classes: 1, ..cfg.clone() }).is_err());

        let right = SynthConfig { signal_position: 2, ..cfg };
        for i in build_instances(&generate_synthetic(&right).unwrap(), &right.label_map(), ContextMode::Adjacent).unwrap() {
            assert!(i.right[1].contains(&indicator_token(i.label)));
        }
    }

    #[test]
    fn synthetic_embeddings_are_orthogonal_on_cue_axes() {
        let cfg = SynthConfig::default();
        let t = synthetic_embeddings(&cfg, 8, 3).unwrap();
        assert_eq!(t.len(), cfg.vocab_size + cfg.num_classes);
        assert_eq!(&t.lookup(&indicator_token(1))[..], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(t.lookup(&neutral_token(5))[..2].iter().all(|&v| v == 0.0));
        assert!(synthetic_embeddings(&cfg, 2, 3).is_err());
    }
}
