//! Heterogeneous graph model, file loaders and dataset splitting.
//!
//! Every node receives one reserved `__self__` in-edge so each in-neighborhood
//! is non-empty. Edges keep the direction they were written with; attention
//! aggregates over in-neighbors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SELF_EDGE_TYPE: &str = "__self__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub etype: usize,
}

/// One in-neighbor `y` of a node `x` and the edge types of every `y → x` edge,
/// repeated according to multiplicity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InNeighbor {
    pub node: usize,
    pub etypes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HetGraph {
    node_count: usize,
    edge_types: Vec<String>,
    self_type: usize,
    /// File edges in input order; self edges are implicit.
    file_edges: Vec<Edge>,
    in_adj: Vec<Vec<InNeighbor>>,
}

impl HetGraph {
    /// Builds a graph from typed edges over `edge_types` (which must not
    /// contain the reserved self type); the self type is appended.
    pub fn new(node_count: usize, edge_types: Vec<String>, file_edges: Vec<Edge>) -> Result<Self> {
        if edge_types.iter().any(|t| t == SELF_EDGE_TYPE) {
            return Err(Error::InvalidArgument(format!(
                "edge type {SELF_EDGE_TYPE} is reserved"
            )));
        }
        let mut edge_types = edge_types;
        let self_type = edge_types.len();
        edge_types.push(SELF_EDGE_TYPE.to_string());
        for e in &file_edges {
            if e.src >= node_count || e.dst >= node_count {
                return Err(Error::InvalidArgument(format!(
                    "edge {} -> {} outside node range 0..{node_count}",
                    e.src, e.dst
                )));
            }
            if e.etype >= self_type {
                return Err(Error::InvalidArgument(format!(
                    "edge type id {} outside vocabulary",
                    e.etype
                )));
            }
        }

        let mut grouped: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); node_count];
        for e in &file_edges {
            grouped[e.dst].entry(e.src).or_default().push(e.etype);
        }
        let in_adj = grouped
            .into_iter()
            .enumerate()
            .map(|(x, mut m)| {
                m.entry(x).or_default().push(self_type);
                m.into_iter()
                    .map(|(node, etypes)| InNeighbor { node, etypes })
                    .collect()
            })
            .collect();

        Ok(HetGraph {
            node_count,
            edge_types,
            self_type,
            file_edges,
            in_adj,
        })
    }

    /// Convenience constructor from `(src, dst, type_name)` triples; the type
    /// vocabulary follows first appearance.
    pub fn from_named_edges(node_count: usize, edges: &[(usize, usize, &str)]) -> Result<Self> {
        let mut vocab: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut out = Vec::with_capacity(edges.len());
        for &(src, dst, name) in edges {
            let etype = *index.entry(name.to_string()).or_insert_with(|| {
                vocab.push(name.to_string());
                vocab.len() - 1
            });
            out.push(Edge { src, dst, etype });
        }
        HetGraph::new(node_count, vocab, out)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_types(&self) -> &[String] {
        &self.edge_types
    }

    pub fn edge_type_count(&self) -> usize {
        self.edge_types.len()
    }

    pub fn self_type(&self) -> usize {
        self.self_type
    }

    pub fn file_edges(&self) -> &[Edge] {
        &self.file_edges
    }

    /// Total edges including one self edge per node.
    pub fn edge_count(&self) -> usize {
        self.file_edges.len() + self.node_count
    }

    /// All edges, file edges first, then self edges in node order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.file_edges
            .iter()
            .copied()
            .chain((0..self.node_count).map(|x| Edge {
                src: x,
                dst: x,
                etype: self.self_type,
            }))
    }

    /// 𝒩(x) with ℰ(y, x) per neighbor, sorted by neighbor id.
    pub fn in_neighbors(&self, x: usize) -> &[InNeighbor] {
        &self.in_adj[x]
    }

    /// Multiplicity of edge type `etype` among edges `y → x`.
    pub fn edge_multiplicity(&self, y: usize, x: usize, etype: usize) -> usize {
        self.in_adj[x]
            .iter()
            .find(|n| n.node == y)
            .map_or(0, |n| n.etypes.iter().filter(|&&t| t == etype).count())
    }

    /// Distinct in-neighbors reached by at least one file edge.
    pub fn file_in_neighbors(&self, x: usize) -> impl Iterator<Item = usize> + '_ {
        let st = self.self_type;
        self.in_adj[x]
            .iter()
            .filter(move |n| n.etypes.iter().any(|&t| t != st))
            .map(|n| n.node)
    }

    pub fn file_in_degree(&self, x: usize) -> usize {
        let st = self.self_type;
        self.in_adj[x]
            .iter()
            .map(|n| n.etypes.iter().filter(|&&t| t != st).count())
            .sum()
    }

    pub fn file_out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for e in &self.file_edges {
            deg[e.src] += 1;
        }
        deg
    }

    /// TSV serialization of the file edges (self edges are not written).
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("#src\tdst\tedge_type\n");
        for e in &self.file_edges {
            let _ = writeln!(s, "{}\t{}\t{}", e.src, e.dst, self.edge_types[e.etype]);
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses the edge TSV format. `min_node_count` declares nodes beyond the
/// largest id seen (isolated nodes).
pub fn parse_edges(
    text: &str,
    source: &Path,
    allow_self_loops_in_file: bool,
    min_node_count: usize,
) -> Result<HetGraph> {
    let mut named: Vec<(usize, usize, String)> = Vec::new();
    let mut max_id = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_path_buf(),
            line: line_no,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let id = |s: &str| -> Result<usize> {
            s.trim()
                .parse::<usize>()
                .map_err(|_| err(format!("invalid node id {s:?}")))
        };
        let (src, dst) = (id(cols[0])?, id(cols[1])?);
        let name = cols[2].trim();
        if name.is_empty() {
            return Err(err("empty edge type".into()));
        }
        if name == SELF_EDGE_TYPE {
            return Err(err(format!("edge type {SELF_EDGE_TYPE} is reserved")));
        }
        if src == dst && !allow_self_loops_in_file {
            return Err(err(format!("self-loop on node {src} not allowed")));
        }
        max_id = Some(max_id.map_or(src.max(dst), |m: usize| m.max(src).max(dst)));
        named.push((src, dst, name.to_string()));
    }
    let node_count = max_id.map_or(0, |m| m + 1).max(min_node_count);
    let borrowed: Vec<(usize, usize, &str)> =
        named.iter().map(|(a, b, c)| (*a, *b, c.as_str())).collect();
    HetGraph::from_named_edges(node_count, &borrowed)
}

pub fn load_graph(
    edges_path: &Path,
    allow_self_loops_in_file: bool,
    min_node_count: usize,
) -> Result<HetGraph> {
    let text = std::fs::read_to_string(edges_path).map_err(|e| Error::io(edges_path, e))?;
    parse_edges(&text, edges_path, allow_self_loops_in_file, min_node_count)
}

/// Structural (`G`) and textual (`T`) node features, one row per node id.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatureSet {
    pub structural: Tensor,
    pub textual: Tensor,
}

impl NodeFeatureSet {
    pub fn new(structural: Tensor, textual: Tensor) -> Result<Self> {
        if structural.shape() != textual.shape() || structural.rank() != 2 {
            return Err(Error::shape(
                "NodeFeatureSet",
                format!("{:?} vs {:?}", structural.shape(), textual.shape()),
            ));
        }
        structural.check_finite("structural features")?;
        textual.check_finite("textual features")?;
        Ok(NodeFeatureSet {
            structural,
            textual,
        })
    }

    pub fn dim(&self) -> usize {
        self.structural.cols()
    }

    pub fn node_count(&self) -> usize {
        self.structural.rows()
    }
}

fn parse_feature_csv(text: &str, path: &Path, node_count: usize) -> Result<Tensor> {
    let data_err = |msg: String| Error::Data {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| data_err("empty feature file".into()))?;
    let hcols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if hcols.first().map(|s| s.trim()) != Some("node_id") || hcols.len() < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "header must be node_id,f0,...".into(),
        });
    }
    let d = hcols.len() - 1;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; node_count];
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != d + 1 {
            return Err(perr(format!("expected {} columns, found {}", d + 1, cols.len())));
        }
        let id: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| perr(format!("invalid node id {:?}", cols[0])))?;
        let mut vals = Vec::with_capacity(d);
        for (j, c) in cols[1..].iter().enumerate() {
            let v: f64 = c
                .trim()
                .parse()
                .map_err(|_| perr(format!("column f{j}: invalid number {c:?}")))?;
            if !v.is_finite() {
                return Err(perr(format!("column f{j}: non-finite value {c}")));
            }
            vals.push(v);
        }
        if id >= node_count {
            continue;
        }
        if rows[id].is_some() {
            return Err(perr(format!("duplicate node id {id}")));
        }
        rows[id] = Some(vals);
    }
    let mut data = Vec::with_capacity(node_count * d);
    for (id, r) in rows.into_iter().enumerate() {
        match r {
            Some(v) => data.extend(v),
            None => return Err(data_err(format!("missing feature row for node {id}"))),
        }
    }
    Ok(Tensor::matrix(node_count, d, data))
}

/// Loads the two feature CSVs; rows are placed by `node_id`, ids at or beyond
/// `node_count` are ignored.
pub fn load_features(struct_path: &Path, text_path: &Path, node_count: usize) -> Result<NodeFeatureSet> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let g = parse_feature_csv(&read(struct_path)?, struct_path, node_count)?;
    let t = parse_feature_csv(&read(text_path)?, text_path, node_count)?;
    if g.cols() != t.cols() {
        return Err(Error::Data {
            path: text_path.to_path_buf(),
            msg: format!(
                "feature width {} differs from structural width {}",
                t.cols(),
                g.cols()
            ),
        });
    }
    NodeFeatureSet::new(g, t)
}

pub fn features_to_csv(m: &Tensor) -> String {
    let mut s = String::from("node_id");
    for j in 0..m.cols() {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for r in 0..m.rows() {
        let _ = write!(s, "{r}");
        for v in m.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_labels(text: &str, path: &Path, log1p: bool) -> Result<Vec<(usize, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r').replace(' ', "") == "node_id,value" => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "header must be node_id,value".into(),
            })
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 {
            return Err(perr(format!("expected 2 columns, found {}", cols.len())));
        }
        let id: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| perr(format!("invalid node id {:?}", cols[0])))?;
        let raw_v: f64 = cols[1]
            .trim()
            .parse()
            .map_err(|_| perr(format!("invalid value {:?}", cols[1])))?;
        let v = if log1p { raw_v.ln_1p() } else { raw_v };
        if !v.is_finite() {
            return Err(perr(format!("non-finite label for node {id}")));
        }
        if !seen.insert(id) {
            return Err(perr(format!("duplicate node id {id}")));
        }
        out.push((id, v));
    }
    Ok(out)
}

pub fn load_labels(path: &Path, log1p: bool) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path, log1p)
}

pub fn labels_to_csv(labels: &[(usize, f64)]) -> String {
    let mut s = String::from("node_id,value\n");
    for (id, v) in labels {
        let _ = writeln!(s, "{id},{v}");
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceDataset {
    pub labeled: Vec<(usize, f64)>,
    pub unlabeled_pool: Vec<usize>,
    pub val: Vec<(usize, f64)>,
    pub test: Vec<(usize, f64)>,
}

impl ImportanceDataset {
    pub fn split(&self, which: Split) -> &[(usize, f64)] {
        match which {
            Split::Train => &self.labeled,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 1.0 / 3.0,
            val: 1.0 / 3.0,
            test: 1.0 / 3.0,
        }
    }
}

/// Shuffles `labels` into train/val/test. The same seed gives the same
/// partition as [`split_dataset`].
pub fn split_labels(labels: &[(usize, f64)], ratios: SplitRatios, seed: u64) -> Result<LabelSplit> {
    Ok(shuffle_labels(labels, ratios, &mut ChaCha8Rng::seed_from_u64(seed))?.0)
}

/// Train, validation and test labels.
pub type LabelSplit = (Vec<(usize, f64)>, Vec<(usize, f64)>, Vec<(usize, f64)>);

fn shuffle_labels(
    labels: &[(usize, f64)],
    ratios: SplitRatios,
    rng: &mut ChaCha8Rng,
) -> Result<(LabelSplit, HashSet<usize>)> {
    let parts = [ratios.train, ratios.val, ratios.test];
    if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {parts:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = labels.len();
    let n_train = (n as f64 * ratios.train).round() as usize;
    let n_val = (n as f64 * ratios.val).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "{n} labeled nodes cannot fill train/val/test splits with ratios {parts:?}"
        )));
    }
    let labeled_ids: HashSet<usize> = labels.iter().map(|(id, _)| *id).collect();
    if labeled_ids.len() != n {
        return Err(Error::InvalidArgument("duplicate labeled node ids".into()));
    }
    let mut shuffled = labels.to_vec();
    shuffled.sort_by_key(|(id, _)| *id);
    shuffled.shuffle(rng);
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(((shuffled, val, test), labeled_ids))
}

/// Shuffles `labels` into train/val/test and draws an unlabeled pool of the
/// same size as the training set.
pub fn split_dataset(
    labels: &[(usize, f64)],
    unlabeled_candidates: &[usize],
    ratios: SplitRatios,
    seed: u64,
) -> Result<ImportanceDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ((labeled, val, test), labeled_ids) = shuffle_labels(labels, ratios, &mut rng)?;
    let n_train = labeled.len();
    let mut candidates: Vec<usize> = unlabeled_candidates
        .iter()
        .copied()
        .filter(|id| !labeled_ids.contains(id))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    candidates.sort_unstable();
    if candidates.len() < n_train {
        return Err(Error::InvalidArgument(format!(
            "{} unlabeled candidates cannot satisfy an unlabeled pool of size |D| = {n_train}",
            candidates.len()
        )));
    }
    let mut pool: Vec<usize> = candidates.choose_multiple(&mut rng, n_train).copied().collect();
    pool.sort_unstable();
    Ok(ImportanceDataset {
        labeled,
        unlabeled_pool: pool,
        val,
        test,
    })
}
