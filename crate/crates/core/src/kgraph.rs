//! Knowledge-graph data model: concept nodes with typed directed edges,
//! construction from co-occurrence counts with pruning, taxonomy fusion, and
//! a versioned text serialization.
//!
//! Node ids are dense and canonical: nodes sort by kind (objects, then
//! attributes, then taxonomy) and lexicographically by name within a kind,
//! so two builds from the same records always agree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

pub type NodeId = u32;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("node id {0} out of range")]
    InvalidNode(NodeId),
    #[error("unsupported graph file header: {0:?}")]
    Version(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConceptKind {
    Object,
    Attribute,
    Taxonomy,
}

impl ConceptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConceptKind::Object => "object",
            ConceptKind::Attribute => "attribute",
            ConceptKind::Taxonomy => "taxonomy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "object" => Some(ConceptKind::Object),
            "attribute" => Some(ConceptKind::Attribute),
            "taxonomy" => Some(ConceptKind::Taxonomy),
            _ => None,
        }
    }
}

impl fmt::Display for ConceptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptNode {
    pub id: NodeId,
    pub name: String,
    pub kind: ConceptKind,
    pub is_output_label: bool,
    pub is_detectable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TypedEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub edge_type: u16,
}

/// Declares a concept ahead of graph construction: its kind, and whether a
/// detector exists for it. Declared concepts become output labels.
#[derive(Debug, Clone)]
pub struct ConceptDecl {
    pub name: String,
    pub kind: ConceptKind,
    pub is_detectable: bool,
}

/// One co-occurrence count: `concept_a --relation--> concept_b` seen `count`
/// times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceRecord {
    pub concept_a: String,
    pub relation: String,
    pub concept_b: String,
    pub count: u64,
}

impl CooccurrenceRecord {
    /// Parse a tab-separated record line.
    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(GraphError::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() || fields[2].is_empty() {
            return Err(GraphError::Parse {
                line: line_no,
                message: "empty concept or relation name".into(),
            });
        }
        let count = fields[3].parse().map_err(|_| GraphError::Parse {
            line: line_no,
            message: format!("count is not a non-negative integer: {:?}", fields[3]),
        })?;
        Ok(CooccurrenceRecord {
            concept_a: fields[0].to_string(),
            relation: fields[1].to_string(),
            concept_b: fields[2].to_string(),
            count,
        })
    }
}

/// A taxonomy edge referencing concepts by name.
#[derive(Debug, Clone)]
pub struct NamedEdge {
    pub src: String,
    pub edge_type: String,
    pub dst: String,
}

/// Counters from taxonomy fusion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FusionReport {
    pub nodes_added: usize,
    pub edges_added: usize,
    pub edges_dropped: usize,
}

/// Counters from graph construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub records_kept: usize,
    pub records_pruned: usize,
    pub self_loops_dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    nodes: Vec<ConceptNode>,
    edges: Vec<TypedEdge>,
    edge_types: Vec<String>,
    out_adj: Vec<Vec<(NodeId, u16)>>,
    in_adj: Vec<Vec<(NodeId, u16)>>,
    label_nodes: Vec<NodeId>,
    detectable_nodes: Vec<NodeId>,
}

impl KnowledgeGraph {
    /// Assemble a graph from parts, validating every structural invariant.
    ///
    /// `nodes` must already be in canonical order with ids `0..n`;
    /// `edge_types` must be sorted and deduplicated.
    pub fn from_parts(
        nodes: Vec<ConceptNode>,
        mut edges: Vec<TypedEdge>,
        edge_types: Vec<String>,
    ) -> Result<Self> {
        for (i, node) in nodes.iter().enumerate() {
            if node.id as usize != i {
                return Err(GraphError::Invalid(format!(
                    "node ids must be dense and ordered: {} at position {}",
                    node.id, i
                )));
            }
            if node.is_detectable && !node.is_output_label {
                return Err(GraphError::Invalid(format!(
                    "detectable node {:?} must be an output label",
                    node.name
                )));
            }
        }
        let mut names = BTreeSet::new();
        for node in &nodes {
            if !names.insert(&node.name) {
                return Err(GraphError::Invalid(format!(
                    "duplicate node name {:?}",
                    node.name
                )));
            }
        }
        if edge_types.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GraphError::Invalid(
                "edge type vocabulary must be sorted and unique".into(),
            ));
        }
        edges.sort_unstable();
        let n = nodes.len();
        for pair in edges.windows(2) {
            if pair[0] == pair[1] {
                return Err(GraphError::Invalid(format!(
                    "duplicate edge ({}, {}, {})",
                    pair[0].src, pair[0].dst, pair[0].edge_type
                )));
            }
        }
        for e in &edges {
            if e.src as usize >= n || e.dst as usize >= n {
                return Err(GraphError::Invalid(format!(
                    "edge endpoint out of range: ({}, {})",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(GraphError::Invalid(format!("self-loop at node {}", e.src)));
            }
            if e.edge_type as usize >= edge_types.len() {
                return Err(GraphError::Invalid(format!(
                    "edge type index {} out of range",
                    e.edge_type
                )));
            }
        }
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for e in &edges {
            out_adj[e.src as usize].push((e.dst, e.edge_type));
            in_adj[e.dst as usize].push((e.src, e.edge_type));
        }
        let label_nodes = nodes
            .iter()
            .filter(|n| n.is_output_label)
            .map(|n| n.id)
            .collect();
        let detectable_nodes = nodes
            .iter()
            .filter(|n| n.is_detectable)
            .map(|n| n.id)
            .collect();
        Ok(KnowledgeGraph {
            nodes,
            edges,
            edge_types,
            out_adj,
            in_adj,
            label_nodes,
            detectable_nodes,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[TypedEdge] {
        &self.edges
    }

    pub fn edge_types(&self) -> &[String] {
        &self.edge_types
    }

    pub fn node(&self, id: NodeId) -> Result<&ConceptNode> {
        self.nodes
            .get(id as usize)
            .ok_or(GraphError::InvalidNode(id))
    }

    pub fn node_by_name(&self, name: &str) -> Option<&ConceptNode> {
        // Names are unique but not globally sorted (kind sorts first), so scan.
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn outgoing(&self, id: NodeId) -> &[(NodeId, u16)] {
        &self.out_adj[id as usize]
    }

    pub fn incoming(&self, id: NodeId) -> &[(NodeId, u16)] {
        &self.in_adj[id as usize]
    }

    /// Output-label node ids in canonical output order.
    pub fn label_nodes(&self) -> &[NodeId] {
        &self.label_nodes
    }

    /// Detectable node ids in canonical detector order.
    pub fn detectable_nodes(&self) -> &[NodeId] {
        &self.detectable_nodes
    }

    /// All nodes adjacent to `id` through incoming or outgoing edges,
    /// excluding `id` itself.
    pub fn neighbors(&self, id: NodeId) -> Result<BTreeSet<NodeId>> {
        if id as usize >= self.nodes.len() {
            return Err(GraphError::InvalidNode(id));
        }
        let mut out = BTreeSet::new();
        for &(v, _) in &self.out_adj[id as usize] {
            out.insert(v);
        }
        for &(v, _) in &self.in_adj[id as usize] {
            out.insert(v);
        }
        out.remove(&id);
        Ok(out)
    }
}

fn canonical_nodes(
    mut specs: Vec<(String, ConceptKind, bool, bool)>,
) -> Vec<ConceptNode> {
    specs.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (name, kind, is_output_label, is_detectable))| ConceptNode {
            id: i as NodeId,
            name,
            kind,
            is_output_label,
            is_detectable,
        })
        .collect()
}

/// Build a graph from co-occurrence records with no up-front declarations:
/// every endpoint becomes an object-kind output label.
pub fn build_graph<I>(records: I, prune_threshold: u64) -> Result<(KnowledgeGraph, BuildReport)>
where
    I: IntoIterator<Item = CooccurrenceRecord>,
{
    build_graph_with_labels(records, prune_threshold, &[])
}

/// Build a graph from co-occurrence records plus declared output labels.
///
/// Duplicate `(a, relation, b)` records are summed before thresholding, so
/// ingestion order never matters. Declared concepts are always present (even
/// when isolated) and carry their declared kind and detectability; endpoints
/// without a declaration become object-kind output labels.
pub fn build_graph_with_labels<I>(
    records: I,
    prune_threshold: u64,
    declarations: &[ConceptDecl],
) -> Result<(KnowledgeGraph, BuildReport)>
where
    I: IntoIterator<Item = CooccurrenceRecord>,
{
    let mut report = BuildReport::default();
    let mut counts: BTreeMap<(String, String, String), u64> = BTreeMap::new();
    for rec in records {
        if rec.concept_a == rec.concept_b {
            report.self_loops_dropped += 1;
            continue;
        }
        *counts
            .entry((rec.concept_a, rec.relation, rec.concept_b))
            .or_insert(0) += rec.count;
    }

    let mut decl_map: BTreeMap<&str, &ConceptDecl> = BTreeMap::new();
    for d in declarations {
        decl_map.insert(d.name.as_str(), d);
    }

    let mut kept: Vec<(String, String, String)> = Vec::new();
    for ((a, rel, b), count) in counts {
        if count >= prune_threshold {
            kept.push((a, rel, b));
            report.records_kept += 1;
        } else {
            report.records_pruned += 1;
        }
    }

    let mut node_names: BTreeSet<String> = decl_map.keys().map(|s| s.to_string()).collect();
    for (a, _, b) in &kept {
        node_names.insert(a.clone());
        node_names.insert(b.clone());
    }
    let specs = node_names
        .into_iter()
        .map(|name| match decl_map.get(name.as_str()) {
            Some(d) => (name, d.kind, true, d.is_detectable),
            None => (name, ConceptKind::Object, true, false),
        })
        .collect();
    let nodes = canonical_nodes(specs);
    let id_of: BTreeMap<&str, NodeId> = nodes.iter().map(|n| (n.name.as_str(), n.id)).collect();

    let mut type_names: BTreeSet<&str> = BTreeSet::new();
    for (_, rel, _) in &kept {
        type_names.insert(rel);
    }
    let edge_types: Vec<String> = type_names.iter().map(|s| s.to_string()).collect();
    let type_index: BTreeMap<&str, u16> = edge_types
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u16))
        .collect();

    let edges = kept
        .iter()
        .map(|(a, rel, b)| TypedEdge {
            src: id_of[a.as_str()],
            dst: id_of[b.as_str()],
            edge_type: type_index[rel.as_str()],
        })
        .collect();

    let graph = KnowledgeGraph::from_parts(nodes, edges, edge_types)?;
    Ok((graph, report))
}

/// Fuse taxonomy edges (named endpoints) into an existing graph.
///
/// A new taxonomy node qualifies only if at least one taxonomy edge connects
/// it directly to a pre-fusion node. All taxonomy edges whose endpoints both
/// land in the resulting node set are added; the rest are dropped and
/// counted. Node ids are reassigned canonically, which leaves the
/// output-label ordering unchanged because taxonomy nodes sort last.
pub fn fuse_taxonomy<I>(base: &KnowledgeGraph, taxonomy: I) -> Result<(KnowledgeGraph, FusionReport)>
where
    I: IntoIterator<Item = NamedEdge>,
{
    let base_names: BTreeSet<&str> = base.nodes.iter().map(|n| n.name.as_str()).collect();
    let taxonomy_edges: Vec<NamedEdge> = taxonomy.into_iter().collect();

    let mut qualified: BTreeSet<String> = BTreeSet::new();
    for e in &taxonomy_edges {
        let src_known = base_names.contains(e.src.as_str());
        let dst_known = base_names.contains(e.dst.as_str());
        if src_known && !dst_known {
            qualified.insert(e.dst.clone());
        } else if dst_known && !src_known {
            qualified.insert(e.src.clone());
        }
    }

    let mut specs: Vec<(String, ConceptKind, bool, bool)> = base
        .nodes
        .iter()
        .map(|n| (n.name.clone(), n.kind, n.is_output_label, n.is_detectable))
        .collect();
    for name in &qualified {
        specs.push((name.clone(), ConceptKind::Taxonomy, false, false));
    }
    let nodes = canonical_nodes(specs);
    let id_of: BTreeMap<&str, NodeId> = nodes.iter().map(|n| (n.name.as_str(), n.id)).collect();

    // Re-key base edges, then add the qualifying taxonomy edges.
    let mut type_names: BTreeSet<String> = base.edge_types.iter().cloned().collect();
    let mut report = FusionReport {
        nodes_added: qualified.len(),
        ..FusionReport::default()
    };
    let mut named_edges: BTreeSet<(String, String, String)> = BTreeSet::new();
    for e in &base.edges {
        named_edges.insert((
            base.nodes[e.src as usize].name.clone(),
            base.edge_types[e.edge_type as usize].clone(),
            base.nodes[e.dst as usize].name.clone(),
        ));
    }
    for e in &taxonomy_edges {
        if id_of.contains_key(e.src.as_str()) && id_of.contains_key(e.dst.as_str()) && e.src != e.dst
        {
            let key = (e.src.clone(), e.edge_type.clone(), e.dst.clone());
            if named_edges.insert(key) {
                report.edges_added += 1;
                type_names.insert(e.edge_type.clone());
            }
        } else {
            report.edges_dropped += 1;
        }
    }

    let edge_types: Vec<String> = type_names.into_iter().collect();
    let type_index: BTreeMap<&str, u16> = edge_types
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u16))
        .collect();
    let edges = named_edges
        .iter()
        .map(|(a, rel, b)| TypedEdge {
            src: id_of[a.as_str()],
            dst: id_of[b.as_str()],
            edge_type: type_index[rel.as_str()],
        })
        .collect();

    let graph = KnowledgeGraph::from_parts(nodes, edges, edge_types)?;
    Ok((graph, report))
}

/// Read co-occurrence records from tab-separated text, one per line.
/// Blank lines and lines starting with `#` are skipped.
pub fn read_cooccurrence<R: BufRead>(reader: R) -> Result<Vec<CooccurrenceRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        records.push(CooccurrenceRecord::parse(trimmed, i + 1)?);
    }
    Ok(records)
}

/// Read taxonomy edges from tab-separated text: `src<TAB>edge_type<TAB>dst`.
pub fn read_taxonomy<R: BufRead>(reader: R) -> Result<Vec<NamedEdge>> {
    let mut edges = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(GraphError::Parse {
                line: i + 1,
                message: "expected src<TAB>edge_type<TAB>dst".into(),
            });
        }
        edges.push(NamedEdge {
            src: fields[0].to_string(),
            edge_type: fields[1].to_string(),
            dst: fields[2].to_string(),
        });
    }
    Ok(edges)
}

/// Read concept declarations from tab-separated text:
/// `name<TAB>kind<TAB>detectable(0|1)`.
pub fn read_declarations<R: BufRead>(reader: R) -> Result<Vec<ConceptDecl>> {
    let mut decls = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(GraphError::Parse {
                line: i + 1,
                message: "expected name<TAB>kind<TAB>detectable".into(),
            });
        }
        let kind = ConceptKind::parse(fields[1]).ok_or_else(|| GraphError::Parse {
            line: i + 1,
            message: format!("unknown concept kind {:?}", fields[1]),
        })?;
        let is_detectable = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(GraphError::Parse {
                    line: i + 1,
                    message: format!("detectable flag must be 0 or 1, got {other:?}"),
                })
            }
        };
        decls.push(ConceptDecl {
            name: fields[0].to_string(),
            kind,
            is_detectable,
        });
    }
    Ok(decls)
}

const GRAPH_HEADER: &str = "GSNN-GRAPH v1";

/// Write the graph in the versioned text format: header, node lines in id
/// order, edge lines in lexicographic order.
pub fn save_graph(graph: &KnowledgeGraph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{GRAPH_HEADER}")?;
    for n in &graph.nodes {
        writeln!(
            w,
            "N\t{}\t{}\t{}\t{}\t{}",
            n.id,
            n.name,
            n.kind,
            u8::from(n.is_output_label),
            u8::from(n.is_detectable)
        )?;
    }
    for e in &graph.edges {
        writeln!(
            w,
            "E\t{}\t{}\t{}",
            e.src, e.dst, graph.edge_types[e.edge_type as usize]
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<KnowledgeGraph> {
    let reader = BufReader::new(File::open(path)?);
    load_graph_from(reader)
}

pub fn load_graph_from<R: BufRead>(reader: R) -> Result<KnowledgeGraph> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(GraphError::Version("<empty file>".into())),
    };
    if header != GRAPH_HEADER {
        return Err(GraphError::Version(header));
    }

    let mut nodes = Vec::new();
    let mut named_edges: Vec<(usize, NodeId, NodeId, String)> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "N" => {
                if fields.len() != 6 {
                    return Err(GraphError::Parse {
                        line: line_no,
                        message: "node line needs 6 fields".into(),
                    });
                }
                let id: NodeId = fields[1].parse().map_err(|_| GraphError::Parse {
                    line: line_no,
                    message: format!("bad node id {:?}", fields[1]),
                })?;
                let kind = ConceptKind::parse(fields[3]).ok_or_else(|| GraphError::Parse {
                    line: line_no,
                    message: format!("unknown concept kind {:?}", fields[3]),
                })?;
                let flag = |s: &str| match s {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(GraphError::Parse {
                        line: line_no,
                        message: format!("flag must be 0 or 1, got {other:?}"),
                    }),
                };
                nodes.push(ConceptNode {
                    id,
                    name: fields[2].to_string(),
                    kind,
                    is_output_label: flag(fields[4])?,
                    is_detectable: flag(fields[5])?,
                });
            }
            "E" => {
                if fields.len() != 4 {
                    return Err(GraphError::Parse {
                        line: line_no,
                        message: "edge line needs 4 fields".into(),
                    });
                }
                let src: NodeId = fields[1].parse().map_err(|_| GraphError::Parse {
                    line: line_no,
                    message: format!("bad source id {:?}", fields[1]),
                })?;
                let dst: NodeId = fields[2].parse().map_err(|_| GraphError::Parse {
                    line: line_no,
                    message: format!("bad destination id {:?}", fields[2]),
                })?;
                if fields[3].is_empty() {
                    return Err(GraphError::Parse {
                        line: line_no,
                        message: "unknown edge type: empty name".into(),
                    });
                }
                named_edges.push((line_no, src, dst, fields[3].to_string()));
            }
            other => {
                return Err(GraphError::Parse {
                    line: line_no,
                    message: format!("unknown record tag {other:?}"),
                });
            }
        }
    }

    let type_set: BTreeSet<&str> = named_edges.iter().map(|(_, _, _, t)| t.as_str()).collect();
    let edge_types: Vec<String> = type_set.iter().map(|s| s.to_string()).collect();
    let type_index: BTreeMap<&str, u16> = edge_types
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u16))
        .collect();
    let n = nodes.len() as u32;
    let mut edges = Vec::with_capacity(named_edges.len());
    for (line_no, src, dst, t) in named_edges {
        if src >= n || dst >= n {
            return Err(GraphError::Parse {
                line: line_no,
                message: format!("edge endpoint out of range: ({src}, {dst})"),
            });
        }
        edges.push(TypedEdge {
            src,
            dst,
            edge_type: type_index[t.as_str()],
        });
    }
    KnowledgeGraph::from_parts(nodes, edges, edge_types)
}
