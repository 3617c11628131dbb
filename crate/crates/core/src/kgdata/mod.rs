//! Knowledge graph and modality feature loading.
//!
//! Triple files are UTF-8, one `head<TAB>relation<TAB>tail` per line.
//! Vocabulary indices are assigned by first appearance over train, then
//! valid, then test, so loading the same files always yields the same ids.

mod filter;
mod modality;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use filter::FilterIndex;
pub use modality::{load_modality, ModalityFeatureTable};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: malformed feature line: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate triple {triple}")]
    DuplicateTriple {
        path: PathBuf,
        line: usize,
        triple: String,
    },
    #[error("{path}:{line}: {kind} '{name}' does not appear in the training split")]
    Unseen {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        name: String,
    },
    #[error("{path}: unknown entity ids: {}", ids.join(", "))]
    UnknownEntities { path: PathBuf, ids: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self { head, relation, tail }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train, valid or test)")),
        }
    }
}

/// Bidirectional index ↔ identifier map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let mut v = Self::new();
        for n in names {
            v.intern(&n.into());
        }
        v
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Paths of the three triple files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    pub entities: Vocab,
    pub relations: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

/// One parsed, not yet indexed, line of a triple file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTriple {
    pub line: usize,
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Parses `head<TAB>relation<TAB>tail` lines. Blank lines are skipped.
pub fn parse_triples(text: &str, path: &Path) -> Result<Vec<RawTriple>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push(RawTriple {
            line: line_no,
            head: fields[0].to_string(),
            relation: fields[1].to_string(),
            tail: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn read_file(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_graph(paths: &SplitPaths, allow_unseen: bool) -> Result<KnowledgeGraph, DataError> {
    let mut splits = Vec::with_capacity(3);
    for p in [&paths.train, &paths.valid, &paths.test] {
        splits.push((p.clone(), parse_triples(&read_file(p)?, p)?));
    }
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    KnowledgeGraph::from_raw(train, valid, test, allow_unseen)
}

impl KnowledgeGraph {
    /// Indexes parsed splits. Valid/test entities and relations must occur in
    /// train unless `allow_unseen` is set, in which case they are appended.
    pub fn from_raw(
        train: (PathBuf, Vec<RawTriple>),
        valid: (PathBuf, Vec<RawTriple>),
        test: (PathBuf, Vec<RawTriple>),
        allow_unseen: bool,
    ) -> Result<Self, DataError> {
        let mut entities = Vocab::new();
        let mut relations = Vocab::new();
        let mut index_split = |(path, raw): (PathBuf, Vec<RawTriple>), is_train: bool| {
            let mut seen = HashSet::with_capacity(raw.len());
            let mut out = Vec::with_capacity(raw.len());
            for t in raw {
                let lookup = |vocab: &mut Vocab, name: &str, kind: &'static str| {
                    if is_train || allow_unseen {
                        Ok(vocab.intern(name))
                    } else {
                        vocab.get(name).ok_or_else(|| DataError::Unseen {
                            path: path.clone(),
                            line: t.line,
                            kind,
                            name: name.to_string(),
                        })
                    }
                };
                let h = lookup(&mut entities, &t.head, "entity")?;
                let r = lookup(&mut relations, &t.relation, "relation")?;
                let tl = lookup(&mut entities, &t.tail, "entity")?;
                let triple = Triple::new(h, r, tl);
                if !seen.insert(triple) {
                    return Err(DataError::DuplicateTriple {
                        path: path.clone(),
                        line: t.line,
                        triple: format!("{}\t{}\t{}", t.head, t.relation, t.tail),
                    });
                }
                out.push(triple);
            }
            Ok(out)
        };
        let train = index_split(train, true)?;
        let valid = index_split(valid, false)?;
        let test = index_split(test, false)?;
        Ok(Self {
            entities,
            relations,
            train,
            valid,
            test,
        })
    }

    /// Builds a graph over `e0..e{n-1}` / `r0..r{m-1}` from already indexed splits.
    pub fn from_indexed(
        num_entities: usize,
        num_relations: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Self {
        let all = train.iter().chain(&valid).chain(&test);
        for t in all {
            assert!(
                t.head < num_entities && t.tail < num_entities && t.relation < num_relations,
                "triple {t} out of vocabulary bounds"
            );
        }
        Self {
            entities: Vocab::from_names((0..num_entities).map(|i| format!("e{i}"))),
            relations: Vocab::from_names((0..num_relations).map(|i| format!("r{i}"))),
            train,
            valid,
            test,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn write_split<W: Write>(&self, split: Split, mut w: W) -> std::io::Result<()> {
        for t in self.split(split) {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entities.name(t.head),
                self.relations.name(t.relation),
                self.entities.name(t.tail)
            )?;
        }
        Ok(())
    }

    /// Writes the three split files into `dir` as `train.txt`, `valid.txt`, `test.txt`.
    pub fn save_splits(&self, dir: &Path) -> std::io::Result<SplitPaths> {
        std::fs::create_dir_all(dir)?;
        let paths = SplitPaths {
            train: dir.join("train.txt"),
            valid: dir.join("valid.txt"),
            test: dir.join("test.txt"),
        };
        for (split, p) in [
            (Split::Train, &paths.train),
            (Split::Valid, &paths.valid),
            (Split::Test, &paths.test),
        ] {
            self.write_split(split, std::io::BufWriter::new(std::fs::File::create(p)?))?;
        }
        Ok(paths)
    }

    /// Writes `entities.tsv` and `relations.tsv` (`index<TAB>id`) into `dir`.
    pub fn dump_vocab(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (file, vocab) in [("entities.tsv", &self.entities), ("relations.tsv", &self.relations)] {
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(file))?);
            for (i, n) in vocab.names().iter().enumerate() {
                writeln!(w, "{i}\t{n}")?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
