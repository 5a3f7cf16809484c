//! Corpora, train pairs, embedding matrices and mined datasets on disk.
//!
//! Text inputs are JSONL. Loading is strict by default: the first bad line
//! aborts with its line number. The `scan_*` variants keep going and return
//! every problem they found so that a validator can report them all; either
//! way `parsed + errors == lines`.

mod dataset;
mod matrix;

pub use dataset::{load_dataset, save_dataset, write_dataset, MinedExample, MinedNegative, ScoredPassage};
pub use matrix::{
    load_matrix, normalize_rows, read_header, save_matrix, EmbeddingMatrix, MatrixHeader, MatrixWriter, MATRIX_MAGIC,
    MATRIX_VERSION,
};

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

/// Passages in file order with an id index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    passages: Vec<Passage>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, rejecting empty or duplicate ids and blank texts.
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (i, p) in passages.into_iter().enumerate() {
            if let Some(message) = passage_problem(&p) {
                return Err(Error::Config(format!("passage #{i}: {message}")));
            }
            if corpus.index.contains_key(&p.id) {
                return Err(Error::Config(format!("duplicate passage id {:?}", p.id)));
            }
            corpus.push(p);
        }
        Ok(corpus)
    }

    fn push(&mut self, p: Passage) {
        self.index.insert(p.id.clone(), self.passages.len());
        self.passages.push(p);
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.index.get(id).map(|&i| &self.passages[i])
    }

    pub fn text(&self, id: &str) -> Option<&str> {
        self.get(id).map(|p| p.text.as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.passages.iter().map(|p| p.id.as_str())
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }
}

/// A query with its labeled positive passages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub query_id: String,
    #[serde(rename = "query")]
    pub query_text: String,
    pub positive_ids: Vec<String>,
}

/// Result of a lenient scan: what parsed, plus one error per rejected line.
#[derive(Debug)]
pub struct ScanReport<T> {
    pub items: T,
    pub errors: Vec<Error>,
    pub lines: usize,
}

impl<T> ScanReport<T> {
    fn into_strict(mut self) -> Result<T> {
        if self.errors.is_empty() {
            Ok(self.items)
        } else {
            Err(self.errors.swap_remove(0))
        }
    }
}

fn passage_problem(p: &Passage) -> Option<&'static str> {
    if p.id.is_empty() {
        Some("empty id")
    } else if p.text.trim().is_empty() {
        Some("empty text")
    } else {
        None
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses every line of a corpus file, collecting per-line errors.
pub fn scan_corpus(path: impl AsRef<Path>) -> Result<ScanReport<Corpus>> {
    let path = path.as_ref();
    let mut corpus = Corpus::default();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut errors = Vec::new();
    let mut lines = 0;
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        lines += 1;
        let passage: Passage = match serde_json::from_str(&line) {
            Ok(p) => p,
            Err(e) => {
                errors.push(parse_error(path, lineno, e.to_string()));
                continue;
            }
        };
        if let Some(message) = passage_problem(&passage) {
            errors.push(parse_error(path, lineno, message));
            continue;
        }
        if let Some(&first_line) = first_seen.get(&passage.id) {
            errors.push(Error::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                first_line,
                id: passage.id,
            });
            continue;
        }
        first_seen.insert(passage.id.clone(), lineno);
        corpus.push(passage);
    }
    if lines == 0 {
        log::warn!("{}: corpus file is empty", path.display());
    }
    Ok(ScanReport {
        items: corpus,
        errors,
        lines,
    })
}

/// Loads a `{"id", "text"}` JSONL corpus, failing on the first bad line.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    scan_corpus(path)?.into_strict()
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), corpus.iter())
}

/// Parses every line of a pairs file against `corpus`, collecting per-line errors.
pub fn scan_pairs(path: impl AsRef<Path>, corpus: &Corpus) -> Result<ScanReport<Vec<TrainPair>>> {
    let path = path.as_ref();
    let mut pairs = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut errors = Vec::new();
    let mut lines = 0;
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        lines += 1;
        let pair: TrainPair = match serde_json::from_str(&line) {
            Ok(p) => p,
            Err(e) => {
                errors.push(parse_error(path, lineno, e.to_string()));
                continue;
            }
        };
        if let Err(e) = check_pair(path, lineno, &pair, corpus) {
            errors.push(e);
            continue;
        }
        if let Some(&first_line) = first_seen.get(&pair.query_id) {
            errors.push(Error::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                first_line,
                id: pair.query_id,
            });
            continue;
        }
        first_seen.insert(pair.query_id.clone(), lineno);
        pairs.push(pair);
    }
    if lines == 0 {
        log::warn!("{}: pairs file is empty", path.display());
    }
    Ok(ScanReport {
        items: pairs,
        errors,
        lines,
    })
}

fn check_pair(path: &Path, line: usize, pair: &TrainPair, corpus: &Corpus) -> Result<()> {
    if pair.query_id.is_empty() {
        return Err(parse_error(path, line, "empty query_id"));
    }
    if pair.positive_ids.is_empty() {
        return Err(parse_error(path, line, "positive_ids is empty"));
    }
    let mut seen = HashSet::new();
    for id in &pair.positive_ids {
        if !seen.insert(id.as_str()) {
            return Err(parse_error(path, line, format!("positive id {id:?} listed twice")));
        }
        if !corpus.contains(id) {
            return Err(Error::UnknownPassage {
                path: path.to_path_buf(),
                line,
                id: id.clone(),
            });
        }
    }
    Ok(())
}

/// Loads `{"query_id", "query", "positive_ids"}` JSONL pairs in file order.
pub fn load_pairs(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<TrainPair>> {
    scan_pairs(path, corpus)?.into_strict()
}

pub fn save_pairs(pairs: &[TrainPair], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), pairs.iter())
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
