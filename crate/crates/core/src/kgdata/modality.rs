use std::path::Path;

use super::{read_file, DataError, KnowledgeGraph};

/// Pre-extracted feature vectors of one modality, indexed by entity.
/// Entities without a vector are `None`; nothing is imputed here.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatureTable {
    pub name: String,
    pub dim: usize,
    features: Vec<Option<Vec<f32>>>,
}

impl ModalityFeatureTable {
    pub fn new(name: impl Into<String>, dim: usize, num_entities: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            features: vec![None; num_entities],
        }
    }

    /// Panics if the vector length differs from `dim`.
    pub fn set(&mut self, entity: usize, v: Vec<f32>) {
        assert_eq!(v.len(), self.dim, "feature length for modality {}", self.name);
        self.features[entity] = Some(v);
    }

    pub fn get(&self, entity: usize) -> Option<&[f32]> {
        self.features.get(entity).and_then(|f| f.as_deref())
    }

    pub fn has(&self, entity: usize) -> bool {
        self.get(entity).is_some()
    }

    pub fn num_entities(&self) -> usize {
        self.features.len()
    }

    pub fn present_count(&self) -> usize {
        self.features.iter().filter(|f| f.is_some()).count()
    }

    /// Fraction of entities that have a feature vector.
    pub fn coverage(&self) -> f64 {
        if self.features.is_empty() {
            return 0.0;
        }
        self.present_count() as f64 / self.features.len() as f64
    }

    /// Parses `entity_id<TAB>f1,f2,...,fd` lines against the graph vocabulary.
    pub fn parse(text: &str, path: &Path, name: &str, kg: &KnowledgeGraph) -> Result<Self, DataError> {
        let format_err = |line: usize, message: String| DataError::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut dim: Option<usize> = None;
        let mut table = Self::new(name, 0, kg.num_entities());
        let mut unknown = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (id, values) = line
                .split_once('\t')
                .ok_or_else(|| format_err(line_no, "expected 'entity_id<TAB>f1,...,fd'".into()))?;
            let vec: Vec<f32> = values
                .split(',')
                .map(|v| v.trim().parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|e| format_err(line_no, format!("bad float: {e}")))?;
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(format_err(line_no, "non-finite feature value".into()));
            }
            match dim {
                None => dim = Some(vec.len()),
                Some(d) if d != vec.len() => {
                    return Err(format_err(
                        line_no,
                        format!("vector length {} differs from earlier length {d}", vec.len()),
                    ))
                }
                _ => {}
            }
            match kg.entities.get(id) {
                Some(e) => {
                    if table.features[e].is_some() {
                        return Err(format_err(line_no, format!("entity '{id}' listed twice")));
                    }
                    table.features[e] = Some(vec);
                }
                None => unknown.push(id.to_string()),
            }
        }
        if !unknown.is_empty() {
            return Err(DataError::UnknownEntities {
                path: path.to_path_buf(),
                ids: unknown,
            });
        }
        table.dim = dim.ok_or_else(|| format_err(0, "no feature vectors".into()))?;
        Ok(table)
    }

    pub fn write<W: std::io::Write>(&self, kg: &KnowledgeGraph, mut w: W) -> std::io::Result<()> {
        for (e, f) in self.features.iter().enumerate() {
            if let Some(v) = f {
                let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                writeln!(w, "{}\t{}", kg.entities.name(e), vals.join(","))?;
            }
        }
        Ok(())
    }
}

pub fn load_modality(path: &Path, name: &str, kg: &KnowledgeGraph) -> Result<ModalityFeatureTable, DataError> {
    ModalityFeatureTable::parse(&read_file(path)?, path, name, kg)
}
