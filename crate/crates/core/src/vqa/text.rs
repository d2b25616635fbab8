use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_QUESTION_LEN: usize = 12;
pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(question: &str) -> Vec<String> {
    question
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Word list with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct QuestionVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for QuestionVocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }
}

impl From<QuestionVocab> for Vec<String> {
    fn from(v: QuestionVocab) -> Self {
        v.words
    }
}

impl QuestionVocab {
    /// Words of the given questions in first-occurrence order.
    pub fn build<'a>(questions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut seen: HashMap<String, usize> = HashMap::new();
        for q in questions {
            for w in tokenize(q) {
                if !seen.contains_key(&w) {
                    seen.insert(w.clone(), words.len());
                    words.push(w);
                }
            }
        }
        Self::from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Exactly [`MAX_QUESTION_LEN`] ids: the first words of the question,
    /// then padding.
    pub fn tokenize_and_pad(&self, question: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(question)
            .iter()
            .take(MAX_QUESTION_LEN)
            .map(|w| self.id(w))
            .collect();
        ids.resize(MAX_QUESTION_LEN, PAD);
        ids
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Fixed word vectors, `vocab × dim`, row-major. Row [`PAD`] is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddings {
    pub dim: usize,
    pub table: Vec<f64>,
}

impl WordEmbeddings {
    /// Deterministic pseudo-random vectors keyed by the word text, so a word
    /// gets the same vector in every vocabulary.
    pub fn synthetic(vocab: &QuestionVocab, dim: usize) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut table = Vec::with_capacity(vocab.len() * dim);
        for (i, w) in vocab.words().iter().enumerate() {
            if i == PAD {
                table.extend(std::iter::repeat_n(0.0, dim));
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(w.as_bytes()));
            table.extend((0..dim).map(|_| normal.sample(&mut rng)));
        }
        Self { dim, table }
    }

    /// Reads a GloVe-style text file (`word v1 … v_dim` per line). Words
    /// missing from the file get zero vectors; the count of found words is
    /// returned alongside.
    pub fn load_glove(path: &Path, vocab: &QuestionVocab, dim: usize) -> Result<(Self, usize)> {
        let mut table = vec![0.0; vocab.len() * dim];
        let mut found = 0;
        let reader = BufReader::new(File::open(path)?);
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let Some(&row) = vocab.index.get(word) else {
                continue;
            };
            if row == PAD || row == UNK {
                continue;
            }
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Record {
                    path: path.to_owned(),
                    line: n + 1,
                    message: format!("{e}"),
                })?;
            if values.len() != dim {
                return Err(Error::Record {
                    path: path.to_owned(),
                    line: n + 1,
                    message: format!("expected {dim} values, got {}", values.len()),
                });
            }
            table[row * dim..(row + 1) * dim].copy_from_slice(&values);
            found += 1;
        }
        Ok((Self { dim, table }, found))
    }
}
