//! Rooted class taxonomy: depth, lowest common ancestor, Wu-Palmer similarity,
//! depth-cut clustering and cluster coherence.
//!
//! Depth convention: the root has depth 1, so Wu-Palmer denominators are
//! always positive.

use std::collections::{BTreeMap, HashMap, VecDeque};

use thiserror::Error;

pub type NodeId = usize;

/// Parent token that marks the root line of an edge list.
pub const ROOT_TOKEN: &str = "-";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("line {line}: expected `child<TAB>parent`")]
    Malformed { line: usize },
    #[error("taxonomy is empty")]
    EmptyTaxonomy,
    #[error("cycle detected through node {0:?}")]
    CycleDetected(String),
    #[error("multiple roots: {0:?} is a second root")]
    MultipleRoots(String),
    #[error("node {0:?} names a parent that is never declared")]
    OrphanNode(String),
    #[error("node {0:?} is declared more than once")]
    DuplicateChild(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("requested {k} clusters but the taxonomy has {leaves} leaves")]
    KExceedsLeaves { k: usize, leaves: usize },
    #[error("cluster count must be at least 1")]
    InvalidK,
    #[error("every cluster is a singleton; no intra-cluster pairs")]
    NoIntraPairs,
    #[error("coherence needs at least two clusters")]
    SingleCluster,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusteringError {
    #[error("clustering csv: {0}")]
    Csv(String),
    #[error("clustering csv header must be `class_id,cluster_id`")]
    BadHeader,
    #[error("class {0:?} assigned more than once")]
    DuplicateClass(String),
    #[error("cluster {0} is empty; cluster ids must be dense 0..K")]
    EmptyCluster(usize),
    #[error("clustering has no classes")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    parent: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<u32>,
    root: NodeId,
}

impl Taxonomy {
    /// Parses a `child<TAB>parent` edge list. The root line uses `-` (or its
    /// own name) as parent. Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(child), Some(parent), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(TaxonomyError::Malformed { line: i + 1 });
            };
            if child.is_empty() || parent.is_empty() || child == ROOT_TOKEN {
                return Err(TaxonomyError::Malformed { line: i + 1 });
            }
            let parent = (parent != ROOT_TOKEN && parent != child).then_some(parent);
            edges.push((child, parent));
        }
        Self::from_edges(edges)
    }

    /// Builds a taxonomy from `(child, parent)` pairs; `None` marks the root.
    pub fn from_edges<'a, I>(edges: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = (&'a str, Option<&'a str>)>,
    {
        let mut names = Vec::new();
        let mut index = HashMap::new();
        let mut raw_parent = Vec::new();
        for (child, parent) in edges {
            if index.contains_key(child) {
                return Err(TaxonomyError::DuplicateChild(child.to_owned()));
            }
            index.insert(child.to_owned(), names.len());
            names.push(child.to_owned());
            raw_parent.push(parent);
        }
        if names.is_empty() {
            return Err(TaxonomyError::EmptyTaxonomy);
        }

        let mut root = None;
        let mut parent = Vec::with_capacity(names.len());
        for (id, p) in raw_parent.iter().enumerate() {
            match p {
                None => {
                    if root.is_some() {
                        return Err(TaxonomyError::MultipleRoots(names[id].clone()));
                    }
                    root = Some(id);
                    parent.push(None);
                }
                Some(p) => match index.get(*p) {
                    Some(&pid) => parent.push(Some(pid)),
                    None => return Err(TaxonomyError::OrphanNode(names[id].clone())),
                },
            }
        }

        let mut children = vec![Vec::new(); names.len()];
        for (id, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(id);
            }
        }

        let Some(root) = root else {
            // Every node has a parent, so walking from node 0 must revisit something.
            return Err(TaxonomyError::CycleDetected(
                names[cycle_member(&parent, 0)].clone(),
            ));
        };

        let mut depth = vec![0u32; names.len()];
        depth[root] = 1;
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            for &c in &children[n] {
                depth[c] = depth[n] + 1;
                queue.push_back(c);
            }
        }
        if let Some(unreached) = depth.iter().position(|&d| d == 0) {
            return Err(TaxonomyError::CycleDetected(
                names[cycle_member(&parent, unreached)].clone(),
            ));
        }

        Ok(Self {
            names,
            index,
            parent,
            children,
            depth,
            root,
        })
    }

    /// Writes the taxonomy back out as an edge list in declaration order.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (id, name) in self.names.iter().enumerate() {
            let parent = self.parent[id].map_or(ROOT_TOKEN, |p| self.names[p].as_str());
            out.push_str(name);
            out.push('\t');
            out.push_str(parent);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> &str {
        &self.names[self.root]
    }

    pub fn contains(&self, class: &str) -> bool {
        self.index.contains_key(class)
    }

    pub fn id(&self, class: &str) -> Result<NodeId, TaxonomyError> {
        self.index
            .get(class)
            .copied()
            .ok_or_else(|| TaxonomyError::UnknownClass(class.to_owned()))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn parent_of(&self, id: NodeId) -> Option<NodeId> {
        self.parent[id]
    }

    pub fn depth_of(&self, id: NodeId) -> u32 {
        self.depth[id]
    }

    pub fn depth(&self, class: &str) -> Result<u32, TaxonomyError> {
        Ok(self.depth[self.id(class)?])
    }

    pub fn max_depth(&self) -> u32 {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    /// Leaf classes in ascending name order.
    pub fn leaves(&self) -> Vec<&str> {
        let mut leaves: Vec<&str> = (0..self.len())
            .filter(|&id| self.children[id].is_empty())
            .map(|id| self.name(id))
            .collect();
        leaves.sort_unstable();
        leaves
    }

    /// Ancestor-or-self of `id` at depth `min(d, depth(id))`.
    pub fn ancestor_at_depth(&self, mut id: NodeId, d: u32) -> NodeId {
        while self.depth[id] > d {
            id = self.parent[id].expect("non-root node has a parent");
        }
        id
    }

    pub fn lca_id(&self, mut a: NodeId, mut b: NodeId) -> NodeId {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("non-root node has a parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("non-root node has a parent");
        }
        while a != b {
            a = self.parent[a].expect("distinct nodes at equal depth are below the root");
            b = self.parent[b].expect("distinct nodes at equal depth are below the root");
        }
        a
    }

    pub fn lca(&self, c1: &str, c2: &str) -> Result<&str, TaxonomyError> {
        let (a, b) = (self.id(c1)?, self.id(c2)?);
        Ok(self.name(self.lca_id(a, b)))
    }

    pub fn wup_id(&self, a: NodeId, b: NodeId) -> f64 {
        let l = self.lca_id(a, b);
        2.0 * f64::from(self.depth[l]) / f64::from(self.depth[a] + self.depth[b])
    }

    /// Wu-Palmer similarity `2 depth(lca) / (depth(a) + depth(b))`.
    pub fn wup(&self, c1: &str, c2: &str) -> Result<f64, TaxonomyError> {
        Ok(self.wup_id(self.id(c1)?, self.id(c2)?))
    }

    /// Clusters the leaves by cutting the tree at the depth whose cluster count
    /// is nearest `k_target` (ties go to the shallower depth).
    pub fn depth_cut(&self, k_target: usize) -> Result<DepthCut, TaxonomyError> {
        if k_target == 0 {
            return Err(TaxonomyError::InvalidK);
        }
        let leaves = self.leaves();
        if leaves.len() < k_target {
            return Err(TaxonomyError::KExceedsLeaves {
                k: k_target,
                leaves: leaves.len(),
            });
        }
        let leaf_ids: Vec<NodeId> = leaves.iter().map(|l| self.index[*l]).collect();

        let mut best: Option<(usize, u32, Vec<usize>)> = None;
        for d in 1..=self.max_depth() {
            let mut relabel: HashMap<NodeId, usize> = HashMap::new();
            let labels: Vec<usize> = leaf_ids
                .iter()
                .map(|&leaf| {
                    let key = self.ancestor_at_depth(leaf, d);
                    let next = relabel.len();
                    *relabel.entry(key).or_insert(next)
                })
                .collect();
            let dist = relabel.len().abs_diff(k_target);
            if best.as_ref().map_or(true, |(bd, _, _)| dist < *bd) {
                best = Some((dist, d, labels));
            }
        }
        let (_, depth, labels) = best.expect("max_depth >= 1");
        let assignment = leaves
            .iter()
            .zip(labels)
            .map(|(l, c)| ((*l).to_owned(), c))
            .collect();
        Ok(DepthCut {
            depth,
            clustering: Clustering::new(assignment).expect("depth-cut labels are dense"),
        })
    }

    /// Mean Wu-Palmer similarity over unordered same-cluster and cross-cluster
    /// pairs, accumulated in ascending `(class, class)` order.
    pub fn coherence(&self, c: &Clustering) -> Result<Coherence, TaxonomyError> {
        if c.k() < 2 {
            return Err(TaxonomyError::SingleCluster);
        }
        let members: Vec<(NodeId, usize)> = c
            .iter()
            .map(|(class, k)| Ok((self.id(class)?, k)))
            .collect::<Result<_, TaxonomyError>>()?;
        let (mut intra_sum, mut intra_n) = (0.0f64, 0u64);
        let (mut inter_sum, mut inter_n) = (0.0f64, 0u64);
        for (i, &(a, ka)) in members.iter().enumerate() {
            for &(b, kb) in &members[i + 1..] {
                let s = self.wup_id(a, b);
                if ka == kb {
                    intra_sum += s;
                    intra_n += 1;
                } else {
                    inter_sum += s;
                    inter_n += 1;
                }
            }
        }
        if intra_n == 0 {
            return Err(TaxonomyError::NoIntraPairs);
        }
        let wup_intra = intra_sum / intra_n as f64;
        let wup_inter = inter_sum / inter_n as f64;
        Ok(Coherence {
            wup_intra,
            wup_inter,
            gap: wup_intra - wup_inter,
        })
    }
}

fn cycle_member(parent: &[Option<NodeId>], start: NodeId) -> NodeId {
    let mut seen = vec![false; parent.len()];
    let mut n = start;
    while !seen[n] {
        seen[n] = true;
        match parent[n] {
            Some(p) => n = p,
            None => return start,
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coherence {
    pub wup_intra: f64,
    pub wup_inter: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthCut {
    pub depth: u32,
    pub clustering: Clustering,
}

/// Assignment of classes to dense cluster ids `0..k`, none empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    assignment: BTreeMap<String, usize>,
    k: usize,
}

impl Clustering {
    pub fn new(assignment: BTreeMap<String, usize>) -> Result<Self, ClusteringError> {
        if assignment.is_empty() {
            return Err(ClusteringError::Empty);
        }
        let k = assignment.values().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; k];
        for &c in assignment.values() {
            sizes[c] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(ClusteringError::EmptyCluster(empty));
        }
        Ok(Self { assignment, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn cluster_of(&self, class: &str) -> Option<usize> {
        self.assignment.get(class).copied()
    }

    /// `(class, cluster)` pairs in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.assignment.iter().map(|(c, &k)| (c.as_str(), k))
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &c in self.assignment.values() {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class_id", "cluster_id"])
            .expect("in-memory write");
        for (class, k) in self.iter() {
            w.write_record([class, k.to_string().as_str()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn parse_csv(text: &str) -> Result<Self, ClusteringError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = r
            .headers()
            .map_err(|e| ClusteringError::Csv(e.to_string()))?;
        if headers.len() != 2 || &headers[0] != "class_id" || &headers[1] != "cluster_id" {
            return Err(ClusteringError::BadHeader);
        }
        let mut assignment = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| ClusteringError::Csv(e.to_string()))?;
            let class = rec[0].to_owned();
            let k: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| ClusteringError::Csv(format!("bad cluster id {:?}", &rec[1])))?;
            if k > assignment.len() + (1 << 20) {
                return Err(ClusteringError::Csv(format!("cluster id {k} out of range")));
            }
            if assignment.insert(class.clone(), k).is_some() {
                return Err(ClusteringError::DuplicateClass(class));
            }
        }
        Self::new(assignment)
    }
}
