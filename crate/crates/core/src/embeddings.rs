//! Frozen word vectors: word2vec text I/O, deterministic OOV vectors, and a
//! small skip-gram negative-sampling trainer.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, sigmoid, Matrix, Vector};

pub const DEFAULT_OOV_SEED: u64 = 0x5eed_00f0;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    vocab: HashMap<String, usize>,
    vectors: Matrix,
    oov_seed: u64,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` pairs. Later duplicates overwrite earlier ones.
    pub fn from_entries<I, S>(dim: usize, entries: I, oov_seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let mut tokens = Vec::new();
        let mut vocab = HashMap::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (tok, vec) in entries {
            let tok = tok.into();
            if vec.len() != dim {
                return Err(Error::invalid(format!(
                    "vector for {tok:?} has {} components, expected {dim}",
                    vec.len()
                )));
            }
            match vocab.get(&tok) {
                Some(&idx) => {
                    log::warn!("duplicate embedding for token {tok:?}; keeping the last one");
                    rows[idx] = vec;
                }
                None => {
                    vocab.insert(tok.clone(), tokens.len());
                    tokens.push(tok);
                    rows.push(vec);
                }
            }
        }
        let vectors = if rows.is_empty() {
            Matrix::zeros(0, dim)
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(EmbeddingTable {
            dim,
            tokens,
            vocab,
            vectors,
            oov_seed,
        })
    }

    /// Uniform random vectors in `[-scale, scale]` for each token, in the given order.
    pub fn random<S: AsRef<str>>(tokens: &[S], dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<(String, Vec<f64>)> = tokens
            .iter()
            .map(|t| {
                let v = (0..dim).map(|_| rng.gen_range(-scale..=scale)).collect();
                (t.as_ref().to_string(), v)
            })
            .collect();
        Self::from_entries(dim, entries, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn oov_seed(&self) -> u64 {
        self.oov_seed
    }

    pub fn with_oov_seed(mut self, seed: u64) -> Self {
        self.oov_seed = seed;
        self
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.contains_key(token)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.vocab.get(token).copied()
    }

    pub fn lookup(&self, token: &str) -> Vector {
        match self.vocab.get(token) {
            Some(&i) => Vector::from(self.vectors.row(i)),
            None => self.oov_vector(token),
        }
    }

    /// Writes the vector for `token` into `out` (length `dim`).
    pub fn lookup_into(&self, token: &str, out: &mut [f64]) {
        match self.vocab.get(token) {
            Some(&i) => out.copy_from_slice(self.vectors.row(i)),
            None => out.copy_from_slice(&self.oov_vector(token)),
        }
    }

    /// Stacks the vectors of `tokens` into a `len × dim` matrix.
    pub fn embed<S: AsRef<str>>(&self, tokens: &[S]) -> Matrix {
        let mut m = Matrix::zeros(tokens.len(), self.dim);
        for (i, t) in tokens.iter().enumerate() {
            self.lookup_into(t.as_ref(), m.row_mut(i));
        }
        m
    }

    fn oov_vector(&self, token: &str) -> Vector {
        let mut h = Sha256::new();
        h.update(self.oov_seed.to_le_bytes());
        h.update(token.as_bytes());
        let seed = digest_u64(h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.5 / self.dim as f64;
        (0..self.dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect::<Vec<_>>()
            .into()
    }

    /// Order-sensitive fingerprint of every stored bit; used to assert the table stays frozen.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for (tok, row) in self.tokens.iter().zip(self.vectors.data().chunks(self.dim)) {
            h.update((tok.len() as u64).to_le_bytes());
            h.update(tok.as_bytes());
            for v in row {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        digest_u64(h)
    }

    pub fn load_word2vec_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_word2vec_text(&text, path)
    }

    pub fn parse_word2vec_text(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header line".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (count, dim) = match fields.as_slice() {
            [n, d] => (
                n.parse::<usize>()
                    .map_err(|e| parse_err(1, format!("bad vocab size {n:?}: {e}")))?,
                d.parse::<usize>()
                    .map_err(|e| parse_err(1, format!("bad dimension {d:?}: {e}")))?,
            ),
            _ => {
                return Err(parse_err(
                    1,
                    format!("header must be \"vocab_size dim\", got {header:?}"),
                ))
            }
        };
        if dim == 0 {
            return Err(parse_err(1, "dimension must be positive".into()));
        }
        let mut entries = Vec::with_capacity(count);
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            if entries.len() == count {
                return Err(parse_err(
                    lineno,
                    format!("more entries than the {count} declared in the header"),
                ));
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap_or_default().to_string();
            let values = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| parse_err(lineno, format!("bad number {p:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(parse_err(
                    lineno,
                    format!("expected {} fields, found {}", dim + 1, values.len() + 1),
                ));
            }
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(parse_err(lineno, format!("non-finite value {bad}")));
            }
            entries.push((token, values));
        }
        if entries.len() < count {
            return Err(parse_err(
                text.lines().count(),
                format!(
                    "header declares {count} entries but the file has only {} (short by {})",
                    entries.len(),
                    count - entries.len()
                ),
            ));
        }
        Self::from_entries(dim, entries, DEFAULT_OOV_SEED)
    }

    /// Writes the table in word2vec text format. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn save_word2vec_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.len(), self.dim).map_err(io)?;
        for (i, tok) in self.tokens.iter().enumerate() {
            write!(w, "{tok}").map_err(io)?;
            for v in self.vectors.row(i) {
                write!(w, " {v:?}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// First eight bytes of a SHA-256 digest.
pub(crate) fn digest_u64(h: Sha256) -> u64 {
    let out = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&out[..8]);
    u64::from_le_bytes(first)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 50,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 1,
        }
    }
}

/// Trains skip-gram vectors with negative sampling drawn from the unigram^0.75
/// distribution. The learning rate decays linearly to zero over all updates.
pub fn train_skipgram<S: AsRef<str>>(
    corpus: &[Vec<S>],
    cfg: &SkipGramConfig,
) -> Result<EmbeddingTable> {
    if cfg.dim == 0 || cfg.window == 0 || cfg.negatives == 0 || cfg.epochs == 0 {
        return Err(Error::invalid(
            "skip-gram dim, window, negatives and epochs must all be at least 1",
        ));
    }
    let mut vocab: HashMap<&str, usize> = HashMap::new();
    let mut words: Vec<&str> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut ids: Vec<Vec<usize>> = Vec::with_capacity(corpus.len());
    for sent in corpus {
        let mut s_ids = Vec::with_capacity(sent.len());
        for tok in sent {
            let tok = tok.as_ref();
            let id = *vocab.entry(tok).or_insert_with(|| {
                words.push(tok);
                counts.push(0);
                words.len() - 1
            });
            counts[id] += 1;
            s_ids.push(id);
        }
        ids.push(s_ids);
    }
    if words.is_empty() {
        return Err(Error::invalid("skip-gram corpus is empty"));
    }
    if words.len() < cfg.negatives + 1 {
        return Err(Error::invalid(format!(
            "vocabulary of {} tokens is smaller than negatives + 1 = {}",
            words.len(),
            cfg.negatives + 1
        )));
    }

    let noise = WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75)))
        .map_err(|e| Error::invalid(format!("negative-sampling table: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 0.5 / cfg.dim as f64;
    let mut input = Matrix::from_vec(
        words.len(),
        cfg.dim,
        (0..words.len() * cfg.dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect(),
    )?;
    let mut output = Matrix::zeros(words.len(), cfg.dim);

    let total_tokens: usize = ids.iter().map(Vec::len).sum();
    let total_steps = (total_tokens * cfg.epochs).max(1) as f64;
    let mut step = 0usize;
    let mut hidden_grad = vec![0.0; cfg.dim];
    for _ in 0..cfg.epochs {
        for sent in &ids {
            for (pos, &center) in sent.iter().enumerate() {
                let lr = (cfg.lr * (1.0 - step as f64 / total_steps)).max(cfg.lr * 1e-4);
                step += 1;
                let reach = rng.gen_range(1..=cfg.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(sent.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = sent[ctx_pos];
                    hidden_grad.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let score = sigmoid(dot(input.row(center), output.row(target)));
                        let g = lr * (label - score);
                        axpy(g, output.row(target), &mut hidden_grad);
                        let center_row = input.row(center).to_vec();
                        axpy(g, &center_row, output.row_mut(target));
                    }
                    axpy(1.0, &hidden_grad, input.row_mut(center));
                }
            }
        }
    }

    let entries = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.to_string(), input.row(i).to_vec()));
    EmbeddingTable::from_entries(cfg.dim, entries, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn parse(text: &str) -> Result<EmbeddingTable> {
        EmbeddingTable::parse_word2vec_text(text, Path::new("mem.txt"))
    }

    #[test]
    fn parses_literal_file() {
        let t = parse("2 3\na 1 2 3\nb 4 5 6\n").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(&t.lookup("a")[..], &[1.0, 2.0, 3.0]);
        assert_eq!(&t.lookup("b")[..], &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn short_file_names_shortfall() {
        let msg = parse("3 2\na 1 2\nb 3 4\n").unwrap_err().to_string();
        assert!(msg.contains("only 2") && msg.contains("short by 1"), "{msg}");
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let msg = parse("2 2\na 1 2\nb 3\n").unwrap_err().to_string();
        assert!(msg.contains(":3:"), "{msg}");
        let msg = parse("1 2\na 1 x\n").unwrap_err().to_string();
        assert!(msg.contains(":2:") && msg.contains("bad number"), "{msg}");
        assert!(parse("1 2\na 1 2\nb 3 4\n").is_err());
        assert!(parse("").is_err());
        assert!(parse("x y\n").is_err());
    }

    #[test]
    fn duplicate_tokens_last_wins() {
        let t = parse("2 1\na 1\na 2\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(&t.lookup("a")[..], &[2.0]);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let toks: Vec<String> = (0..20).map(|i| format!("tok{i}")).collect();
        let t = EmbeddingTable::random(&toks, 7, 1.3, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        t.save_word2vec_text(&path).unwrap();
        let back = EmbeddingTable::load_word2vec_text(&path).unwrap();
        assert_eq!(back.tokens(), t.tokens());
        assert_eq!(back.vectors(), t.vectors());
    }

    #[test]
    fn oov_vectors_are_deterministic_small_and_distinct() {
        let t = parse("1 4\nknown 1 1 1 1\n").unwrap();
        assert_eq!(&t.lookup("known")[..], &[1.0; 4]);
        let a = t.lookup("unseen");
        assert_eq!(a, t.lookup("unseen"));
        assert!(a.iter().all(|v| v.abs() <= 0.5 / 4.0));
        let mut seen = HashSet::new();
        for i in 0..1000 {
            let v = t.lookup(&format!("oov-{i}"));
            let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(key), "collision at oov-{i}");
        }
        let other = t.clone().with_oov_seed(1);
        assert_ne!(other.lookup("unseen"), a);
    }

    #[test]
    fn skipgram_orders_similarity_by_cooccurrence() {
        // "a b c" always co-occur; "x y z" only ever appear together in a separate sentence.
        let mut corpus: Vec<Vec<&str>> = Vec::new();
        for _ in 0..200 {
            corpus.push(vec!["a", "b", "c", "d"]);
            corpus.push(vec!["x", "y", "z", "w"]);
        }
        let cfg = SkipGramConfig {
            dim: 10,
            window: 2,
            negatives: 3,
            epochs: 5,
            lr: 0.05,
            seed: 11,
        };
        let t = train_skipgram(&corpus, &cfg).unwrap();
        let cos = |p: &str, q: &str| {
            let (u, v) = (t.lookup(p), t.lookup(q));
            dot(&u, &v) / (dot(&u, &u).sqrt() * dot(&v, &v).sqrt())
        };
        assert!(cos("a", "b") > cos("a", "y"), "{} vs {}", cos("a", "b"), cos("a", "y"));
        assert!(cos("x", "z") > cos("x", "c"));
    }

    #[test]
    fn skipgram_preconditions_and_determinism() {
        let corpus = vec![vec!["p", "q", "r", "s", "t", "u"]];
        let mut cfg = SkipGramConfig {
            dim: 4,
            window: 2,
            negatives: 2,
            epochs: 0,
            lr: 0.05,
            seed: 3,
        };
        assert!(train_skipgram(&corpus, &cfg).is_err());
        cfg.epochs = 2;
        let a = train_skipgram(&corpus, &cfg).unwrap();
        let b = train_skipgram(&corpus, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        cfg.negatives = 6;
        assert!(train_skipgram(&corpus, &cfg).is_err());
        let empty: Vec<Vec<&str>> = vec![];
        assert!(train_skipgram(&empty, &SkipGramConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn oov_independent_of_call_order(tokens in proptest::collection::vec("[a-z]{1,8}", 1..10)) {
            let t = EmbeddingTable::from_entries(3, Vec::<(String, Vec<f64>)>::new(), 5).unwrap();
            let forward: Vec<Vector> = tokens.iter().map(|s| t.lookup(s)).collect();
            let backward: Vec<Vector> = tokens.iter().rev().map(|s| t.lookup(s)).collect();
            for (f, b) in forward.iter().zip(backward.iter().rev()) {
                prop_assert_eq!(f, b);
            }
        }
    }
}
