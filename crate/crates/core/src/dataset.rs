//! TUDataset text-format reader and stratified k-fold splits.
//!
//! A dataset `NAME` is a set of sibling files:
//!
//! * `NAME_A.txt` — one `i, j` pair per line, 1-indexed global node ids
//! * `NAME_graph_indicator.txt` — line `k` holds the graph id of node `k`
//! * `NAME_graph_labels.txt` — line `g` holds the class of graph `g`
//! * `NAME_node_labels.txt` — optional, line `k` holds the label of node `k`

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{assign_degree_features, Graph};
use crate::linalg::DenseMatrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub num_graphs: usize,
    pub num_classes: usize,
    pub avg_nodes: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

struct Lines {
    file: String,
    rows: Vec<(usize, Vec<i64>)>,
}

fn read_table(path: &Path) -> Result<Lines> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let tokens: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let values = tokens
            .iter()
            .map(|t| {
                t.parse::<i64>().map_err(|_| Error::Parse {
                    file: file.clone(),
                    line: line_no,
                    message: format!("non-integer token '{t}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((line_no, values));
    }
    Ok(Lines { file, rows })
}

impl Lines {
    fn parse_err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.clone(),
            line,
            message: message.into(),
        }
    }

    /// First integer of every row.
    fn scalars(&self) -> Vec<(usize, i64)> {
        self.rows.iter().map(|(l, v)| (*l, v[0])).collect()
    }
}

fn dataset_dir(directory: &Path, name: &str) -> PathBuf {
    let nested = directory.join(name);
    if nested.join(format!("{name}_A.txt")).exists() {
        nested
    } else {
        directory.to_path_buf()
    }
}

/// Dense remapping of sorted distinct values to `0..k`.
fn remap<T: Ord + Copy>(values: impl IntoIterator<Item = T>) -> BTreeMap<T, usize> {
    let distinct: BTreeSet<T> = values.into_iter().collect();
    distinct.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
}

/// Reads `NAME` from `directory` (or `directory/NAME`).
pub fn parse_tudataset(directory: &Path, name: &str) -> Result<(Vec<Graph>, DatasetMeta)> {
    let dir = dataset_dir(directory, name);
    let file = |suffix: &str| dir.join(format!("{name}_{suffix}.txt"));

    let indicator = read_table(&file("graph_indicator"))?;
    let edges = read_table(&file("A"))?;
    let graph_labels = read_table(&file("graph_labels"))?;
    let node_labels_path = file("node_labels");
    let node_labels = if node_labels_path.exists() {
        Some(read_table(&node_labels_path)?)
    } else {
        None
    };

    let num_graphs = graph_labels.rows.len();
    if num_graphs == 0 {
        return Err(graph_labels.parse_err(0, "no graph labels"));
    }

    // node k (0-based) -> (graph index, local index)
    let mut node_graph = Vec::with_capacity(indicator.rows.len());
    let mut local_index = Vec::with_capacity(indicator.rows.len());
    let mut counts = vec![0usize; num_graphs];
    for (line, gid) in indicator.scalars() {
        if gid < 1 || gid as usize > num_graphs {
            return Err(indicator.parse_err(line, format!("graph id {gid} outside 1..={num_graphs}")));
        }
        let g = gid as usize - 1;
        node_graph.push(g);
        local_index.push(counts[g]);
        counts[g] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(indicator.parse_err(0, format!("graph {} has no nodes", empty + 1)));
    }
    let total_nodes = node_graph.len();

    let mut per_graph: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); num_graphs];
    let mut directed_seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (line, values) in &edges.rows {
        if values.len() != 2 {
            return Err(edges.parse_err(*line, format!("expected 2 node ids, found {}", values.len())));
        }
        let mut ids = [0usize; 2];
        for (slot, &v) in ids.iter_mut().zip(values) {
            if v < 1 || v as usize > total_nodes {
                return Err(edges.parse_err(*line, format!("node id {v} outside 1..={total_nodes}")));
            }
            *slot = v as usize - 1;
        }
        let [i, j] = ids;
        if node_graph[i] != node_graph[j] {
            return Err(edges.parse_err(
                *line,
                format!(
                    "edge ({}, {}) joins graph {} and graph {}",
                    i + 1,
                    j + 1,
                    node_graph[i] + 1,
                    node_graph[j] + 1
                ),
            ));
        }
        if i == j {
            log::warn!("{}:{}: dropping self-loop on node {}", edges.file, line, i + 1);
            continue;
        }
        if !directed_seen.insert((i, j)) {
            log::warn!("{}:{}: duplicate edge ({}, {})", edges.file, line, i + 1, j + 1);
        }
        let (a, b) = (local_index[i], local_index[j]);
        per_graph[node_graph[i]].insert((a.min(b), a.max(b)));
    }

    let class_map = remap(graph_labels.scalars().into_iter().map(|(_, v)| v));
    let labels: Vec<usize> = graph_labels
        .scalars()
        .into_iter()
        .map(|(_, v)| class_map[&v])
        .collect();

    let structural: Vec<Graph> = per_graph
        .into_iter()
        .enumerate()
        .map(|(g, edges)| {
            Graph::new(counts[g], edges.into_iter().collect(), DenseMatrix::zeros(1, counts[g]), labels[g])
        })
        .collect::<Result<_>>()?;

    let graphs = match node_labels {
        Some(table) => {
            if table.rows.len() != total_nodes {
                return Err(table.parse_err(
                    table.rows.last().map_or(0, |r| r.0),
                    format!("{} node labels for {} nodes", table.rows.len(), total_nodes),
                ));
            }
            let raw: Vec<i64> = table.scalars().into_iter().map(|(_, v)| v).collect();
            let label_map = remap(raw.iter().copied());
            let dim = label_map.len();
            let mut features: Vec<DenseMatrix> = counts.iter().map(|&n| DenseMatrix::zeros(dim, n)).collect();
            for (k, value) in raw.iter().enumerate() {
                features[node_graph[k]][(label_map[value], local_index[k])] = 1.0;
            }
            structural
                .into_iter()
                .zip(features)
                .map(|(g, x)| g.with_features(x))
                .collect::<Result<Vec<_>>>()?
        }
        None => assign_degree_features(structural)?,
    };

    let meta = DatasetMeta {
        name: name.to_string(),
        num_graphs,
        num_classes: class_map.len(),
        avg_nodes: total_nodes as f64 / num_graphs as f64,
    };
    Ok((graphs, meta))
}

/// Seeded stratified k-fold split: each class is shuffled, then its members
/// are dealt round-robin to the folds, continuing the deal across classes.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Folds(format!("need at least 2 folds, got {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Folds("labels contain a single class".into()));
    }
    if labels.len() < k {
        return Err(Error::Folds(format!(
            "{} samples cannot fill {k} non-empty test folds",
            labels.len()
        )));
    }
    if let Some((class, members)) = by_class.iter().find(|(_, m)| m.len() < k) {
        log::warn!(
            "class {class} has {} samples, fewer than {k} folds; some test folds will miss it",
            members.len()
        );
    }
    let mut r = rng::seeded(seed);
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut r);
        for &idx in members.iter() {
            tests[next].push(idx);
            next = (next + 1) % k;
        }
    }
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(fold_index, mut test_ids)| {
            test_ids.sort_unstable();
            let test_set: BTreeSet<usize> = test_ids.iter().copied().collect();
            let train_ids = (0..labels.len()).filter(|i| !test_set.contains(i)).collect();
            FoldSplit {
                fold_index,
                train_ids,
                test_ids,
            }
        })
        .collect())
}
