//! Plain-text dataset directories.
//!
//! Layout: `train.txt`, `valid.txt`, `test.txt`, one fact per line as
//! `relation<TAB>node<TAB>node...`. Lines starting with `#` and blank lines are
//! skipped. Optional `entities.dict` and `relations.dict` (`id<TAB>name`) pin
//! the id assignment; otherwise ids follow first appearance over
//! train, inference, valid, test.
//!
//! Inductive datasets add `inference.txt`: the graph that validation and test
//! queries are answered on, usually over entities unseen in training.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hypergraph::{GraphError, HyperEdge, Relation, RelationalHypergraph};

pub const SPLITS: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];
pub const INFERENCE_SPLIT: &str = "inference.txt";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("relation `{relation}` used with arity {first} and {second}")]
    InconsistentArity {
        relation: String,
        first: usize,
        second: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A parsed dataset: the graph is built from the training facts only.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: RelationalHypergraph,
    pub train: Vec<HyperEdge>,
    pub valid: Vec<HyperEdge>,
    pub test: Vec<HyperEdge>,
    /// Facts of the inference graph; empty for transductive datasets.
    pub inference: Vec<HyperEdge>,
    pub entity_names: Vec<String>,
}

impl Dataset {
    pub fn relation_names(&self) -> Vec<String> {
        self.graph.relations().iter().map(|r| r.name.clone()).collect()
    }

    pub fn is_inductive(&self) -> bool {
        !self.inference.is_empty()
    }

    /// Graph used to answer validation and test queries.
    pub fn eval_graph(&self) -> Result<RelationalHypergraph, GraphError> {
        if self.is_inductive() {
            self.graph.with_edges(self.inference.clone())
        } else {
            Ok(self.graph.clone())
        }
    }

    /// Every known fact, the filter set of the ranking protocol.
    pub fn all_facts(&self) -> Vec<HyperEdge> {
        let mut all = self.train.clone();
        all.extend(self.inference.iter().cloned());
        all.extend(self.valid.iter().cloned());
        all.extend(self.test.iter().cloned());
        all
    }
}

#[derive(Default)]
struct Vocab {
    ids: HashMap<String, usize>,
    names: Vec<String>,
    pinned: bool,
}

impl Vocab {
    fn pinned(names: Vec<String>) -> Self {
        let ids = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            ids,
            names,
            pinned: true,
        }
    }

    fn lookup_or_insert(&mut self, name: &str) -> Option<usize> {
        if let Some(&id) = self.ids.get(name) {
            return Some(id);
        }
        if self.pinned {
            return None;
        }
        let id = self.names.len();
        self.ids.insert(name.to_string(), id);
        self.names.push(name.to_string());
        Some(id)
    }
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_dict(path: &Path) -> Result<Option<Vec<String>>, DatasetError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = read(path)?;
    let mut entries: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| DatasetError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `id<TAB>name`".into()))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("invalid id `{id}`")))?;
        entries.push((id, name.to_string()));
    }
    entries.sort();
    for (expected, (id, _)) in entries.iter().enumerate() {
        if *id != expected {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("dictionary ids must be 0..n, missing {expected}"),
            });
        }
    }
    Ok(Some(entries.into_iter().map(|(_, n)| n).collect()))
}

/// Loads a dataset directory. `valid.txt` and `test.txt` may be absent, in
/// which case the split is empty.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    load_dataset_with_relations(dir, None)
}

/// Like [`load_dataset`], but pins relation ids to `relations` when given
/// (used to line a dataset up with a checkpoint's vocabulary).
pub fn load_dataset_with_relations(
    dir: impl AsRef<Path>,
    relations: Option<&[String]>,
) -> Result<Dataset, DatasetError> {
    let dir = dir.as_ref();
    let train_path = dir.join(SPLITS[0]);
    if !train_path.exists() {
        return Err(DatasetError::Io {
            path: train_path,
            source: io::Error::new(io::ErrorKind::NotFound, "missing training split"),
        });
    }
    let mut entities = match read_dict(&dir.join("entities.dict"))? {
        Some(names) => Vocab::pinned(names),
        None => Vocab::default(),
    };
    let mut rels = match relations {
        Some(names) => Vocab::pinned(names.to_vec()),
        None => match read_dict(&dir.join("relations.dict"))? {
            Some(names) => Vocab::pinned(names),
            None => Vocab::default(),
        },
    };
    let mut arity: HashMap<usize, usize> = HashMap::new();
    let mut splits: Vec<Vec<HyperEdge>> = Vec::new();

    let order = [SPLITS[0], INFERENCE_SPLIT, SPLITS[1], SPLITS[2]];
    for split in order {
        let path = dir.join(split);
        let mut facts = Vec::new();
        if !path.exists() {
            splits.push(facts);
            continue;
        }
        let text = read(&path)?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| DatasetError::Parse {
                path: path.clone(),
                line: lineno + 1,
                message,
            };
            let mut fields = line.split('\t');
            let rel_name = fields.next().unwrap_or_default();
            if rel_name.is_empty() {
                return Err(parse_err("empty relation name".into()));
            }
            let nodes: Vec<&str> = fields.collect();
            if nodes.is_empty() || nodes.iter().any(|n| n.is_empty()) {
                return Err(parse_err("expected at least one non-empty node".into()));
            }
            let rel = rels
                .lookup_or_insert(rel_name)
                .ok_or_else(|| parse_err(format!("relation `{rel_name}` not in dictionary")))?;
            match arity.get(&rel) {
                Some(&a) if a != nodes.len() => {
                    return Err(DatasetError::InconsistentArity {
                        relation: rel_name.to_string(),
                        first: a,
                        second: nodes.len(),
                    })
                }
                Some(_) => {}
                None => {
                    arity.insert(rel, nodes.len());
                }
            }
            let mut ids = Vec::with_capacity(nodes.len());
            for n in nodes {
                ids.push(
                    entities
                        .lookup_or_insert(n)
                        .ok_or_else(|| parse_err(format!("entity `{n}` not in dictionary")))?,
                );
            }
            facts.push(HyperEdge::new(rel, ids));
        }
        splits.push(facts);
    }

    // Relations pinned by a dictionary but never used get arity from nowhere;
    // they are kept as unary placeholders so ids stay stable.
    let relations = rels
        .names
        .iter()
        .enumerate()
        .map(|(id, name)| Relation::new(id, name.clone(), arity.get(&id).copied().unwrap_or(1)))
        .collect();
    let test = splits.pop().unwrap_or_default();
    let valid = splits.pop().unwrap_or_default();
    let inference = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let graph = RelationalHypergraph::new(relations, train.clone(), entities.names.len(), None)?;
    Ok(Dataset {
        graph,
        train,
        valid,
        test,
        inference,
        entity_names: entities.names,
    })
}

/// Writes a dataset (including both dictionaries) so that
/// [`load_dataset`] reproduces it exactly.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rel_names = dataset.relation_names();
    let splits = [&dataset.train, &dataset.valid, &dataset.test];
    for (name, facts) in SPLITS.iter().zip(splits) {
        let path = dir.join(name);
        let text = format_facts(facts, &rel_names, &dataset.entity_names);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    if dataset.is_inductive() {
        let path = dir.join(INFERENCE_SPLIT);
        let text = format_facts(&dataset.inference, &rel_names, &dataset.entity_names);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    let dict = |names: &[String]| {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i}\t{n}\n"))
            .collect::<String>()
    };
    let path = dir.join("entities.dict");
    fs::write(&path, dict(&dataset.entity_names)).map_err(io_err(&path))?;
    let path = dir.join("relations.dict");
    fs::write(&path, dict(&rel_names)).map_err(io_err(&path))?;
    Ok(())
}

pub fn format_facts(facts: &[HyperEdge], relations: &[String], entities: &[String]) -> String {
    let mut out = String::new();
    for f in facts {
        out.push_str(&relations[f.relation]);
        for &n in &f.nodes {
            out.push('\t');
            out.push_str(&entities[n]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    #[test]
    fn parses_mixed_arity_train_file() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "train.txt",
            "# comment\nStudyDegree\tHawking\tOxford\tPhysics\tBA\nknows\ta\tb\nknows\tb\tc\n",
        );
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.graph.relations().len(), 2);
        assert_eq!(ds.graph.relation(0).arity, 4);
        assert_eq!(ds.train.len(), 3);
        assert!(ds.valid.is_empty());
        assert_eq!(ds.entity_names[0], "Hawking");
    }

    #[test]
    fn inconsistent_arity_across_splits() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "r\ta\tb\tc\n");
        write(dir.path(), "test.txt", "r\ta\tb\tc\td\n");
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::InconsistentArity { first: 3, second: 4, .. })
        ));
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "r\ta\tb\n\nr\n");
        match load_dataset(dir.path()) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_directory_is_io_error() {
        assert!(matches!(
            load_dataset("/nonexistent/hcnet-data"),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn dictionaries_pin_ids() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "r\ta\tb\n");
        write(dir.path(), "entities.dict", "0\tb\n1\ta\n2\tc\n");
        write(dir.path(), "relations.dict", "0\ts\n1\tr\n");
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.train[0], HyperEdge::new(1, vec![1, 0]));
        assert_eq!(ds.graph.node_count(), 3);
    }

    #[test]
    fn write_then_load_is_a_fixpoint() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "r\ta\tb\ns\tb\tc\td\nr\ta\tb\n");
        write(dir.path(), "valid.txt", "s\ta\tc\te\n");
        write(dir.path(), "test.txt", "r\te\tf\n");
        let first = load_dataset(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_dataset(out.path(), &first).unwrap();
        let second = load_dataset(out.path()).unwrap();
        assert_eq!(first.train, second.train);
        assert_eq!(first.valid, second.valid);
        assert_eq!(first.test, second.test);
        assert_eq!(first.entity_names, second.entity_names);
        assert_eq!(first.graph, second.graph);
    }

    #[test]
    fn inductive_split_builds_eval_graph() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "r\ta\tb\n");
        write(dir.path(), "inference.txt", "r\tc\td\nr\td\te\n");
        write(dir.path(), "test.txt", "r\tc\te\n");
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.is_inductive());
        assert_eq!(ds.graph.edges().len(), 1);
        assert_eq!(ds.eval_graph().unwrap().edges().len(), 2);
        assert_eq!(ds.all_facts().len(), 4);
        let out = tempfile::tempdir().unwrap();
        write_dataset(out.path(), &ds).unwrap();
        let back = load_dataset(out.path()).unwrap();
        assert_eq!(back.inference, ds.inference);
    }
}
