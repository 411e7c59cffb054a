use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KonError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Named {
    pub id: String,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = KonError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(KonError::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Entities, relations and the three triple splits.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    pub entities: Vec<Named>,
    pub relations: Vec<Named>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

/// Input files in the tab-separated split format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFiles {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub entity_labels: PathBuf,
    #[serde(default)]
    pub relation_labels: Option<PathBuf>,
}

impl KnowledgeGraph {
    pub fn new(
        entities: Vec<Named>,
        relations: Vec<Named>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let g = KnowledgeGraph {
            entities,
            relations,
            train,
            valid,
            test,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.entities.iter().find(|e| e.label.trim().is_empty()) {
            return Err(KonError::Graph(format!("entity {:?} has an empty label", e.id)));
        }
        if let Some(r) = self.relations.iter().find(|r| r.label.trim().is_empty()) {
            return Err(KonError::Graph(format!("relation {:?} has an empty label", r.id)));
        }
        let (ne, nr) = (self.entities.len(), self.relations.len());
        let mut seen: HashMap<Triple, Split> = HashMap::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            for t in self.split(split) {
                if t.head >= ne || t.tail >= ne || t.relation >= nr {
                    return Err(KonError::Graph(format!(
                        "{split} triple {t:?} references a missing entity or relation"
                    )));
                }
                if let Some(prev) = seen.insert(*t, split) {
                    if prev != split {
                        return Err(KonError::Graph(format!(
                            "triple {t:?} appears in both {prev} and {split}"
                        )));
                    }
                }
            }
        }
        Ok(())
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

    /// Every entity and relation label; the tokenizer's training corpus.
    pub fn label_corpus(&self) -> Vec<&str> {
        self.entities
            .iter()
            .chain(&self.relations)
            .map(|n| n.label.as_str())
            .collect()
    }

    /// Reads the three split files and the label file(s).
    ///
    /// Entity ids follow first appearance across train, valid, test; entities
    /// that only occur in the label file are appended in file order.
    pub fn load(files: &DatasetFiles) -> Result<Self> {
        let entity_labels = read_labels(&files.entity_labels)?;
        let relation_labels = match &files.relation_labels {
            Some(p) => Some(read_labels(p)?),
            None => None,
        };

        let mut entity_ids: HashMap<String, usize> = HashMap::new();
        let mut entities = Vec::new();
        let mut relation_ids: HashMap<String, usize> = HashMap::new();
        let mut relations = Vec::new();
        let mut splits: [Vec<Triple>; 3] = Default::default();

        for (slot, path) in [&files.train, &files.valid, &files.test].into_iter().enumerate() {
            let text = fs::read_to_string(path).map_err(|e| KonError::io(path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim_end_matches('\r');
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                let ingest = |msg: String| KonError::Ingestion {
                    path: path.clone(),
                    line: lineno + 1,
                    msg,
                };
                if fields.len() != 3 {
                    return Err(ingest(format!(
                        "expected 3 tab-separated fields, found {}",
                        fields.len()
                    )));
                }
                let mut entity = |id: &str| -> Result<usize> {
                    if let Some(&i) = entity_ids.get(id) {
                        return Ok(i);
                    }
                    let label = entity_labels
                        .map
                        .get(id)
                        .ok_or_else(|| ingest(format!("entity {id:?} has no label")))?;
                    entity_ids.insert(id.to_string(), entities.len());
                    entities.push(Named {
                        id: id.to_string(),
                        label: label.clone(),
                    });
                    Ok(entities.len() - 1)
                };
                let head = entity(fields[0])?;
                let tail = entity(fields[2])?;
                let rid = fields[1];
                let relation = match relation_ids.get(rid) {
                    Some(&i) => i,
                    None => {
                        let label = match &relation_labels {
                            Some(l) => l
                                .map
                                .get(rid)
                                .cloned()
                                .ok_or_else(|| ingest(format!("relation {rid:?} has no label")))?,
                            None => relation_label_from_id(rid),
                        };
                        relation_ids.insert(rid.to_string(), relations.len());
                        relations.push(Named {
                            id: rid.to_string(),
                            label,
                        });
                        relations.len() - 1
                    }
                };
                splits[slot].push(Triple::new(head, relation, tail));
            }
        }

        for id in &entity_labels.order {
            if !entity_ids.contains_key(id) {
                entity_ids.insert(id.clone(), entities.len());
                entities.push(Named {
                    id: id.clone(),
                    label: entity_labels.map[id].clone(),
                });
            }
        }

        let [train, valid, test] = splits;
        KnowledgeGraph::new(entities, relations, train, valid, test)
    }

    /// Writes the graph in the ingestion format under `dir`.
    pub fn write_tsv(&self, dir: &Path) -> Result<DatasetFiles> {
        fs::create_dir_all(dir).map_err(|e| KonError::io(dir, e))?;
        let write = |name: &str, body: String| -> Result<PathBuf> {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| KonError::io(&path, e))?;
            f.write_all(body.as_bytes())
                .map_err(|e| KonError::io(&path, e))?;
            Ok(path)
        };
        let triples = |ts: &[Triple]| -> String {
            ts.iter()
                .map(|t| {
                    format!(
                        "{}\t{}\t{}\n",
                        self.entities[t.head].id, self.relations[t.relation].id, self.entities[t.tail].id
                    )
                })
                .collect()
        };
        let labels = |ns: &[Named]| -> String {
            ns.iter().map(|n| format!("{}\t{}\n", n.id, n.label)).collect()
        };
        Ok(DatasetFiles {
            train: write("train.tsv", triples(&self.train))?,
            valid: write("valid.tsv", triples(&self.valid))?,
            test: write("test.tsv", triples(&self.test))?,
            entity_labels: write("entity_labels.tsv", labels(&self.entities))?,
            relation_labels: Some(write("relation_labels.tsv", labels(&self.relations))?),
        })
    }
}

struct LabelFile {
    map: HashMap<String, String>,
    order: Vec<String>,
}

fn read_labels(path: &Path) -> Result<LabelFile> {
    let text = fs::read_to_string(path).map_err(|e| KonError::io(path, e))?;
    let mut map = HashMap::new();
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let ingest = |msg: String| KonError::Ingestion {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| ingest("expected identifier<TAB>label".into()))?;
        if !seen.insert(id.to_string()) {
            return Err(ingest(format!("duplicate label for {id:?}")));
        }
        map.insert(id.to_string(), label.to_string());
        order.push(id.to_string());
    }
    Ok(LabelFile { map, order })
}

/// Readable label for a relation identifier such as
/// `http://dbpedia.org/ontology/birthPlace` or `/film/film/starring`.
fn relation_label_from_id(id: &str) -> String {
    let tail = id
        .trim_end_matches(['/', '>'])
        .rsplit(['/', '#'])
        .next()
        .unwrap_or(id);
    let mut out = String::new();
    for (i, c) in tail.chars().enumerate() {
        if c == '_' {
            out.push(' ');
        } else if c.is_uppercase() && i > 0 {
            out.push(' ');
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    if out.trim().is_empty() {
        id.to_string()
    } else {
        out
    }
}
