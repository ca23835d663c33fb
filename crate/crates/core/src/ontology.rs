//! Knowledge DAG loading, validation and ancestor queries.
//!
//! Node ids are dense: leaf codes occupy `[0, num_leaves)` and the internal
//! (ancestor) concepts follow them. Every node other than the single root has
//! at least one parent.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub u32);

impl ConceptId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_index(index: usize) -> Self {
        ConceptId(u32::try_from(index).expect("concept index exceeds u32"))
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OntologyDag {
    names: Vec<String>,
    num_leaves: usize,
    /// Sorted, distinct parent ids per node. Empty only for the root.
    parents: Vec<Vec<ConceptId>>,
    root: ConceptId,
    by_name: HashMap<String, ConceptId>,
}

impl OntologyDag {
    /// Builds a DAG from an already dense layout.
    ///
    /// `names[..num_leaves]` are the leaves. Fails unless the graph is acyclic
    /// with exactly one parentless node, which must not be a leaf.
    pub fn from_parts(
        names: Vec<String>,
        num_leaves: usize,
        mut parents: Vec<Vec<ConceptId>>,
    ) -> Result<Self> {
        let n = names.len();
        if parents.len() != n {
            return Err(Error::invalid("parent list length differs from node count"));
        }
        if num_leaves == 0 || num_leaves >= n {
            return Err(Error::invalid(format!(
                "need at least one leaf and one internal node (leaves {num_leaves}, nodes {n})"
            )));
        }
        let mut by_name = HashMap::with_capacity(n);
        for (i, name) in names.iter().enumerate() {
            if by_name.insert(name.clone(), ConceptId::from_index(i)).is_some() {
                return Err(Error::invalid(format!("duplicate node name `{name}`")));
            }
        }
        for (i, ps) in parents.iter_mut().enumerate() {
            for p in ps.iter() {
                if p.index() >= n {
                    return Err(Error::OutOfRange {
                        index: p.index(),
                        limit: n,
                    });
                }
                if p.index() == i {
                    return Err(Error::invalid(format!("`{}` is its own parent", names[i])));
                }
            }
            ps.sort_unstable();
            let before = ps.len();
            ps.dedup();
            if ps.len() != before {
                return Err(Error::invalid(format!("`{}` lists a parent twice", names[i])));
            }
        }

        let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_empty()).collect();
        match roots.as_slice() {
            [r] if *r >= num_leaves => {}
            [r] => {
                return Err(Error::invalid(format!("leaf `{}` cannot be the root", names[*r])));
            }
            [] => return Err(Error::invalid("graph has no root (it contains a cycle)")),
            _ => {
                return Err(Error::invalid(format!(
                    "graph has {} parentless nodes; exactly one root is required",
                    roots.len()
                )))
            }
        }
        if topological_order(&parents).is_none() {
            return Err(Error::invalid("graph contains a cycle"));
        }

        Ok(OntologyDag {
            names,
            num_leaves,
            parents,
            root: ConceptId::from_index(roots[0]),
            by_name,
        })
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    pub fn num_internal(&self) -> usize {
        self.names.len() - self.num_leaves
    }

    pub fn num_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn root(&self) -> ConceptId {
        self.root
    }

    pub fn is_leaf(&self, id: ConceptId) -> bool {
        id.index() < self.num_leaves
    }

    pub fn name(&self, id: ConceptId) -> &str {
        &self.names[id.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ConceptId> {
        self.by_name.get(name).copied()
    }

    pub fn parents(&self, id: ConceptId) -> &[ConceptId] {
        &self.parents[id.index()]
    }

    /// Parent with the smallest id; `None` for the root.
    pub fn direct_parent(&self, id: ConceptId) -> Option<ConceptId> {
        self.parents[id.index()].first().copied()
    }

    pub fn leaves(&self) -> impl Iterator<Item = ConceptId> {
        (0..self.num_leaves).map(ConceptId::from_index)
    }

    /// Nodes in an order where every child precedes its parents.
    pub fn topological_order(&self) -> Vec<ConceptId> {
        topological_order(&self.parents).expect("validated at construction")
    }

    /// Serializes to the tab-separated edge-list format read by [`parse_ontology`].
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (i, ps) in self.parents.iter().enumerate() {
            for p in ps {
                out.push_str(&self.names[i]);
                out.push('\t');
                out.push_str(&self.names[p.index()]);
                out.push('\n');
            }
        }
        out
    }
}

/// Kahn's algorithm over child→parent edges. `None` when a cycle exists.
fn topological_order(parents: &[Vec<ConceptId>]) -> Option<Vec<ConceptId>> {
    let n = parents.len();
    let mut pending_children = vec![0usize; n];
    for ps in parents {
        for p in ps {
            pending_children[p.index()] += 1;
        }
    }
    let mut stack: Vec<usize> = (0..n).rev().filter(|&i| pending_children[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = stack.pop() {
        order.push(ConceptId::from_index(i));
        for p in parents[i].iter().rev() {
            let c = &mut pending_children[p.index()];
            *c -= 1;
            if *c == 0 {
                stack.push(p.index());
            }
        }
    }
    (order.len() == n).then_some(order)
}

pub fn parse_ontology(path: impl AsRef<Path>) -> Result<OntologyDag> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ontology_str(&text)
}

struct RawEdge {
    child: usize,
    parent: usize,
    line: usize,
}

/// Parses `child<TAB>parent` lines. Lines starting with `#` and blank lines
/// are skipped. Leaves are the nodes that never appear as a parent.
pub fn parse_ontology_str(text: &str) -> Result<OntologyDag> {
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut first_line: Vec<usize> = Vec::new();
    let mut edges: Vec<RawEdge> = Vec::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();

    let mut intern = |name: &str, line: usize, names: &mut Vec<String>, first: &mut Vec<usize>| {
        *index.entry(name.to_string()).or_insert_with(|| {
            names.push(name.to_string());
            first.push(line);
            names.len() - 1
        })
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.trim_end_matches('\r');
        if content.trim().is_empty() || content.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = content.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected `child<TAB>parent`, found {} field(s)", fields.len()),
            });
        }
        let (child_name, parent_name) = (fields[0].trim(), fields[1].trim());
        if child_name.is_empty() || parent_name.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty node name".into(),
            });
        }
        if child_name == parent_name {
            return Err(Error::Cycle {
                line,
                child: child_name.into(),
                parent: parent_name.into(),
            });
        }
        let child = intern(child_name, line, &mut names, &mut first_line);
        let parent = intern(parent_name, line, &mut names, &mut first_line);
        if !seen.insert((child, parent)) {
            return Err(Error::DuplicateEdge {
                line,
                child: child_name.into(),
                parent: parent_name.into(),
            });
        }
        edges.push(RawEdge {
            child,
            parent,
            line,
        });
    }
    if edges.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "ontology file contains no edges".into(),
        });
    }

    let n = names.len();
    let mut out_edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &edges {
        out_edges[e.child].push((e.parent, e.line));
        children[e.parent].push(e.child);
    }

    if let Some(line) = find_cycle_edge(&out_edges) {
        let e = edges.iter().find(|e| e.line == line).expect("edge exists");
        return Err(Error::Cycle {
            line,
            child: names[e.child].clone(),
            parent: names[e.parent].clone(),
        });
    }

    let root = (0..n)
        .find(|&i| out_edges[i].is_empty())
        .expect("acyclic graph has a sink");
    let mut reaches_root = vec![false; n];
    let mut stack = vec![root];
    reaches_root[root] = true;
    while let Some(i) = stack.pop() {
        for &c in &children[i] {
            if !reaches_root[c] {
                reaches_root[c] = true;
                stack.push(c);
            }
        }
    }
    if let Some(bad) = (0..n).find(|&i| !reaches_root[i]) {
        return Err(Error::NoRootPath {
            line: first_line[bad],
            node: names[bad].clone(),
            root: names[root].clone(),
        });
    }

    // Dense layout: leaves first, then internal nodes, each in order of first appearance.
    let is_internal: Vec<bool> = children.iter().map(|c| !c.is_empty()).collect();
    let order: Vec<usize> = (0..n)
        .filter(|&i| !is_internal[i])
        .chain((0..n).filter(|&i| is_internal[i]))
        .collect();
    let num_leaves = order.iter().take_while(|&&i| !is_internal[i]).count();
    let mut new_id = vec![0usize; n];
    for (pos, &old) in order.iter().enumerate() {
        new_id[old] = pos;
    }
    let dense_names = order.iter().map(|&i| names[i].clone()).collect();
    let parents = order
        .iter()
        .map(|&i| {
            out_edges[i]
                .iter()
                .map(|&(p, _)| ConceptId::from_index(new_id[p]))
                .collect()
        })
        .collect();
    OntologyDag::from_parts(dense_names, num_leaves, parents)
}

/// Returns the line of an edge that closes a cycle, if any.
fn find_cycle_edge(out_edges: &[Vec<(usize, usize)>]) -> Option<usize> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = out_edges.len();
    let mut mark = vec![Mark::New; n];
    for start in 0..n {
        if mark[start] != Mark::New {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        mark[start] = Mark::Active;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&(parent, line)) = out_edges[node].get(*next) {
                *next += 1;
                match mark[parent] {
                    Mark::Active => return Some(line),
                    Mark::New => {
                        mark[parent] = Mark::Active;
                        stack.push((parent, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}

/// `A(i)` for one leaf: the leaf itself followed by its distinct ancestors in
/// ascending id order.
pub fn ancestors(dag: &OntologyDag, leaf: ConceptId) -> Result<Vec<ConceptId>> {
    if leaf.index() >= dag.num_leaves() {
        return Err(Error::OutOfRange {
            index: leaf.index(),
            limit: dag.num_leaves(),
        });
    }
    let mut seen = vec![false; dag.num_nodes()];
    let mut stack: Vec<ConceptId> = dag.parents(leaf).to_vec();
    let mut found = Vec::new();
    while let Some(node) = stack.pop() {
        if std::mem::replace(&mut seen[node.index()], true) {
            continue;
        }
        found.push(node);
        stack.extend_from_slice(dag.parents(node));
    }
    found.sort_unstable();
    let mut out = Vec::with_capacity(found.len() + 1);
    out.push(leaf);
    out.extend(found);
    Ok(out)
}

/// Attention support for every input row of a model.
///
/// Entry `i` starts with `i` itself; the remaining ids index embedding rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncestorMap {
    num_nodes: usize,
    lists: Vec<Vec<ConceptId>>,
}

impl AncestorMap {
    pub fn build(dag: &OntologyDag) -> Self {
        let lists = dag
            .leaves()
            .map(|leaf| ancestors(dag, leaf).expect("leaf in range"))
            .collect();
        AncestorMap {
            num_nodes: dag.num_nodes(),
            lists,
        }
    }

    /// Every entry attends only to itself (plain embedding lookup).
    pub fn identity(n: usize) -> Self {
        AncestorMap {
            num_nodes: n,
            lists: (0..n).map(|i| vec![ConceptId::from_index(i)]).collect(),
        }
    }

    pub fn from_lists(num_nodes: usize, lists: Vec<Vec<ConceptId>>) -> Result<Self> {
        for (i, list) in lists.iter().enumerate() {
            if list.first().map(|c| c.index()) != Some(i) {
                return Err(Error::invalid(format!("support list {i} must start with itself")));
            }
            if let Some(bad) = list.iter().find(|c| c.index() >= num_nodes) {
                return Err(Error::OutOfRange {
                    index: bad.index(),
                    limit: num_nodes,
                });
            }
        }
        Ok(AncestorMap { num_nodes, lists })
    }

    /// Number of rows the support refers to (`|D|` for a knowledge DAG).
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of entries (`|C|` for a knowledge DAG).
    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn get(&self, i: usize) -> &[ConceptId] {
        &self.lists[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[ConceptId]> {
        self.lists.iter().map(Vec::as_slice)
    }

    pub fn is_trivial(&self) -> bool {
        self.lists.iter().all(|l| l.len() == 1)
    }
}

/// Moves the named internal nodes into the leaf set so they receive their own
/// final representation. Existing leaves keep their ids; promoted nodes are
/// appended after them in ascending original id order.
pub fn promote_observed_ancestors<'a>(
    dag: &OntologyDag,
    observed: impl IntoIterator<Item = &'a str>,
) -> Result<OntologyDag> {
    let mut promoted = Vec::new();
    for name in observed {
        let id = dag.id(name).ok_or_else(|| Error::UnknownCode(name.to_string()))?;
        if id == dag.root() {
            return Err(Error::invalid(format!("the root `{name}` cannot be promoted to a leaf")));
        }
        if !dag.is_leaf(id) {
            promoted.push(id);
        }
    }
    promoted.sort_unstable();
    promoted.dedup();
    if promoted.is_empty() {
        return Ok(dag.clone());
    }

    let is_promoted: HashSet<ConceptId> = promoted.iter().copied().collect();
    let order: Vec<ConceptId> = dag
        .leaves()
        .chain(promoted.iter().copied())
        .chain(
            (dag.num_leaves()..dag.num_nodes())
                .map(ConceptId::from_index)
                .filter(|c| !is_promoted.contains(c)),
        )
        .collect();
    let mut new_id = vec![ConceptId(0); dag.num_nodes()];
    for (pos, old) in order.iter().enumerate() {
        new_id[old.index()] = ConceptId::from_index(pos);
    }
    let names = order.iter().map(|&c| dag.name(c).to_string()).collect();
    let parents = order
        .iter()
        .map(|&c| dag.parents(c).iter().map(|p| new_id[p.index()]).collect())
        .collect();
    OntologyDag::from_parts(names, dag.num_leaves() + promoted.len(), parents)
}

/// Reads the optional `name<TAB>category` sidecar used by the exporters.
pub fn load_category_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let content = raw.trim_end_matches('\r');
        if content.trim().is_empty() || content.starts_with('#') {
            continue;
        }
        let (name, category) = content.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            message: "expected `name<TAB>category`".into(),
        })?;
        out.insert(name.trim().to_string(), category.trim().to_string());
    }
    Ok(out)
}
