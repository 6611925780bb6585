//! Corpus files, vocabularies, pre-trained embeddings, and padded batches.
//!
//! File formats:
//! - corpus: UTF-8, one example per line, `label<TAB>space-separated tokens`;
//! - labels sidecar: one label name per line, order defines class indices;
//! - embeddings: word2vec text format, an optional `count dim` header line
//!   followed by `word v1 .. v_d` lines.
//!
//! Tokenization is whitespace splitting only; corpora are assumed to be
//! pre-tokenized upstream. Vocabulary id 0 is padding (all-zero frozen
//! embedding row), id 1 is the out-of-vocabulary row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub label: usize,
}

/// A labeled, pre-tokenized dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub examples: Vec<Example>,
    pub label_names: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Reads a labels sidecar file; line order defines class indices.
pub fn load_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        let name = line.trim_end_matches('\r');
        if name.is_empty() {
            return Err(Error::ParseError {
                path: path_str(path),
                line: ix + 1,
            });
        }
        if labels.iter().any(|l| l == name) {
            return Err(Error::ParseError {
                path: path_str(path),
                line: ix + 1,
            });
        }
        labels.push(name.to_string());
    }
    if labels.is_empty() {
        return Err(Error::ParseError {
            path: path_str(path),
            line: 1,
        });
    }
    Ok(labels)
}

/// Parses a corpus file against a known label order. Lines are kept in
/// file order; duplicates stay distinct examples.
pub fn load_corpus(path: &Path, labels: &[String], split: Split) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (label_name, sentence) = line.split_once('\t').ok_or_else(|| Error::ParseError {
            path: path_str(path),
            line: ix + 1,
        })?;
        let label = labels
            .iter()
            .position(|l| l == label_name)
            .ok_or_else(|| Error::UnknownLabel {
                path: path_str(path),
                line: ix + 1,
                label: label_name.to_string(),
            })?;
        let tokens: Vec<String> = sentence
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        if tokens.is_empty() {
            return Err(Error::EmptySentence {
                path: path_str(path),
                line: ix + 1,
            });
        }
        examples.push(Example { tokens, label });
    }
    Ok(Corpus {
        split,
        examples,
        label_names: labels.to_vec(),
    })
}

/// Writes a corpus back in the same line format `load_corpus` reads.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut text = String::new();
    for ex in &corpus.examples {
        let _ = writeln!(
            text,
            "{}\t{}",
            corpus.label_names[ex.label],
            ex.tokens.join(" ")
        );
    }
    fs::write(path, text)?;
    Ok(())
}

/// Token-to-id map with reserved padding (0) and OOV (1) slots. Real
/// tokens get ids from 2 upward in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Collects every distinct token of the given corpora, in order.
    pub fn build(corpora: &[&Corpus]) -> Vocabulary {
        let mut vocab = Vocabulary {
            token_to_id: BTreeMap::new(),
            id_to_token: vec!["<pad>".to_string(), "<oov>".to_string()],
        };
        for corpus in corpora {
            for ex in &corpus.examples {
                for tok in &ex.tokens {
                    if !vocab.token_to_id.contains_key(tok) {
                        let id = vocab.id_to_token.len();
                        vocab.token_to_id.insert(tok.clone(), id);
                        vocab.id_to_token.push(tok.clone());
                    }
                }
            }
        }
        vocab
    }

    /// From an explicit token list (checkpoint restore).
    pub fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let mut vocab = Vocabulary {
            token_to_id: BTreeMap::new(),
            id_to_token: vec!["<pad>".to_string(), "<oov>".to_string()],
        };
        for tok in tokens {
            if !vocab.token_to_id.contains_key(&tok) {
                let id = vocab.id_to_token.len();
                vocab.token_to_id.insert(tok.clone(), id);
                vocab.id_to_token.push(tok);
            }
        }
        vocab
    }

    /// Tokens with real ids (2..), in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[2..]
    }

    /// Id for a token, falling back to [`OOV_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Total rows including the two reserved ids.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }
}

/// Embedding rows aligned with a [`Vocabulary`], `[size, dim]`.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub matrix: Tensor,
    pub dim: usize,
    /// Fraction of real vocabulary tokens found in the pre-trained file.
    pub coverage: f64,
    pub trainable: bool,
}

impl EmbeddingMatrix {
    /// Loads word2vec-text vectors for `vocab`. Uncovered rows (and the
    /// OOV row) are drawn i.i.d. uniform on `[-0.25, 0.25)`; the padding
    /// row is zero and never trains.
    pub fn load<R: Rng + ?Sized>(
        path: &Path,
        vocab: &Vocabulary,
        expected_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<EmbeddingMatrix> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate().peekable();

        // optional "count dim" header
        let mut dim = expected_dim;
        if let Some((_, first)) = lines.peek() {
            let fields: Vec<&str> = first.split_whitespace().collect();
            if fields.len() == 2 {
                if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    match dim {
                        Some(expected) if expected != d => {
                            return Err(Error::DimMismatch {
                                expected,
                                found: d,
                            });
                        }
                        _ => dim = Some(d),
                    }
                    lines.next();
                }
            }
        }

        let mut file_vectors: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (ix, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().ok_or_else(|| Error::MalformedLine {
                path: path_str(path),
                line: ix + 1,
            })?;
            let values: Vec<f64> = fields
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::MalformedLine {
                    path: path_str(path),
                    line: ix + 1,
                })?;
            if values.is_empty() {
                return Err(Error::MalformedLine {
                    path: path_str(path),
                    line: ix + 1,
                });
            }
            match dim {
                None => dim = Some(values.len()),
                Some(expected) if expected != values.len() => {
                    return Err(Error::DimMismatch {
                        expected,
                        found: values.len(),
                    });
                }
                _ => {}
            }
            if let Some(id) = vocab.lookup(word) {
                file_vectors.entry(id).or_insert(values);
            }
        }
        let dim = dim.ok_or_else(|| Error::DimMismatch {
            expected: expected_dim.unwrap_or(0),
            found: 0,
        })?;

        let mut emb = Self::random(vocab, dim, rng);
        {
            let mut data = emb.matrix.data_mut();
            for (&id, values) in &file_vectors {
                data[id * dim..(id + 1) * dim].copy_from_slice(values);
            }
        }
        let real = vocab.size().saturating_sub(2);
        emb.coverage = if real == 0 {
            0.0
        } else {
            file_vectors.len() as f64 / real as f64
        };
        Ok(emb)
    }

    /// All rows random uniform on `[-0.25, 0.25)` except the zero padding
    /// row; coverage 0. Used for toy corpora without pre-trained vectors.
    pub fn random<R: Rng + ?Sized>(vocab: &Vocabulary, dim: usize, rng: &mut R) -> EmbeddingMatrix {
        let rows = vocab.size();
        let matrix = Tensor::rand_uniform(vec![rows, dim], -0.25, 0.25, rng);
        {
            let mut data = matrix.data_mut();
            for v in data[PAD_ID * dim..(PAD_ID + 1) * dim].iter_mut() {
                *v = 0.0;
            }
        }
        matrix.set_requires_grad(true);
        EmbeddingMatrix {
            matrix,
            dim,
            coverage: 0.0,
            trainable: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Toggles fine-tuning of the whole matrix during training.
    pub fn set_trainable(&mut self, flag: bool) {
        self.trainable = flag;
        self.matrix.set_requires_grad(flag);
    }
}

/// A padded batch of token ids with its validity mask and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Row-major `[size, n_max]`, padded with [`PAD_ID`].
    pub token_ids: Vec<usize>,
    pub n_max: usize,
    pub mask: Mask,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    fn from_examples(examples: &[&Example], vocab: &Vocabulary) -> Result<Batch> {
        let lengths: Vec<usize> = examples.iter().map(|ex| ex.tokens.len()).collect();
        let n_max = lengths.iter().copied().max().unwrap_or(0);
        let mask = Mask::from_lengths(&lengths)?;
        let mut token_ids = vec![PAD_ID; examples.len() * n_max];
        for (row, ex) in examples.iter().enumerate() {
            for (col, tok) in ex.tokens.iter().enumerate() {
                token_ids[row * n_max + col] = vocab.id(tok);
            }
        }
        Ok(Batch {
            token_ids,
            n_max,
            mask,
            labels: examples.iter().map(|ex| ex.label).collect(),
        })
    }
}

/// Draws `size` examples uniformly WITH replacement and pads them to the
/// longest drawn sentence.
pub fn make_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    vocab: &Vocabulary,
    size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let picked: Vec<&Example> = (0..size)
        .map(|_| &corpus.examples[rng.gen_range(0..corpus.len())])
        .collect();
    Batch::from_examples(&picked, vocab)
}

/// Sequential non-shuffled slices of the corpus, last partial batch kept.
/// Used by the timing benchmarks so epoch contents are reproducible.
pub fn epoch_batches(corpus: &Corpus, vocab: &Vocabulary, size: usize) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    corpus
        .examples
        .chunks(size)
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().collect();
            Batch::from_examples(&refs, vocab)
        })
        .collect()
}

/// Generates the 2-class marker task: filler sentences of length 3 to 12
/// where the positive class contains the token `marker` somewhere.
pub fn generate_marker_corpus<R: Rng + ?Sized>(
    n_examples: usize,
    split: Split,
    rng: &mut R,
) -> Corpus {
    let fillers: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let len = rng.gen_range(3..=12);
        let mut tokens: Vec<String> = (0..len)
            .map(|_| fillers[rng.gen_range(0..fillers.len())].clone())
            .collect();
        let positive = rng.gen_bool(0.5);
        if positive {
            let pos = rng.gen_range(0..tokens.len());
            tokens[pos] = "marker".to_string();
        }
        examples.push(Example {
            tokens,
            label: positive as usize,
        });
    }
    Corpus {
        split,
        examples,
        label_names: vec!["absent".to_string(), "present".to_string()],
    }
}
