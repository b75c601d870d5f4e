//! Semantic label hierarchy shared by all datasets.
//!
//! The hierarchy is a rooted tree of concepts. Every node with at least two
//! children owns a classifier whose classes are those children, in document
//! order. Datasets attach their label ids to nodes through bindings; a label
//! bound to an inner node supervises only the classifiers above that node.

mod parse;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

pub use parse::parse_hierarchy;
pub use validate::{DatasetAnnotations, Issue, Rule, Supervision, ValidationReport};

use crate::error::HierarchyError;

/// Dataset-local label identifier.
pub type LabelId = u32;

/// Index of a node in document (pre-)order; the root is `NodeId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Index of a classifier in depth-first order; the root classifier is `ClassifierId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassifierId(pub usize);

impl fmt::Display for ClassifierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptNode {
    pub name: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Depth from the root; children of the root are level 1.
    pub level: usize,
}

impl ConceptNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A softmax classifier over the children of one inner node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classifier {
    pub id: ClassifierId,
    pub node: NodeId,
    /// Class `i` of this classifier is `classes[i]`.
    pub classes: Vec<NodeId>,
    /// Parent classifier and the class index in it that routes pixels here.
    pub anchor: Option<(ClassifierId, usize)>,
    /// Hierarchy level of this classifier's classes (root classifier = 1).
    pub level: usize,
}

/// One step of a root-to-node path: classifier `j` decides class `y`.
pub type PathStep = (ClassifierId, usize);

/// Sequence of classifier decisions leading from the root to a node.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelPath(pub Vec<PathStep>);

impl LabelPath {
    pub fn steps(&self) -> &[PathStep] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Class chosen by classifier `j` along this path, if `j` is on it.
    pub fn class_at(&self, j: ClassifierId) -> Option<usize> {
        self.0.iter().find(|(c, _)| *c == j).map(|&(_, y)| y)
    }
}

/// Flat label space of the single-softmax baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatSpace {
    pub classes: Vec<NodeId>,
    /// Index of the extra "unlabeled" class, when present (always last).
    pub unlabeled: Option<usize>,
}

impl FlatSpace {
    pub fn len(&self) -> usize {
        self.classes.len() + usize::from(self.unlabeled.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, node: NodeId) -> Option<usize> {
        self.classes.iter().position(|&n| n == node)
    }
}

#[derive(Debug, Clone)]
pub struct LabelHierarchy {
    nodes: Vec<ConceptNode>,
    /// 1-based source line per node; zero when built programmatically.
    lines: Vec<usize>,
    classifiers: Vec<Classifier>,
    node_classifier: Vec<Option<ClassifierId>>,
    by_name: BTreeMap<String, NodeId>,
    bindings: BTreeMap<String, BTreeMap<LabelId, NodeId>>,
}

impl LabelHierarchy {
    /// Build from nodes in pre-order with parent links already set.
    pub(crate) fn from_nodes(nodes: Vec<ConceptNode>, lines: Vec<usize>) -> Result<Self, HierarchyError> {
        debug_assert_eq!(nodes.len(), lines.len());
        let mut by_name = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if let Some(prev) = by_name.insert(n.name.clone(), NodeId(i)) {
                return Err(HierarchyError::Parse {
                    line: lines[i],
                    message: format!(
                        "duplicate node name `{}` (first defined on line {})",
                        n.name, lines[prev.0]
                    ),
                });
            }
        }
        let mut classifiers = Vec::new();
        let mut node_classifier = vec![None; nodes.len()];
        // Pre-order over nodes visits parents before children, so the anchor
        // classifier of every inner node already exists when it is reached.
        for (i, n) in nodes.iter().enumerate() {
            if n.children.len() < 2 {
                continue;
            }
            let id = ClassifierId(classifiers.len());
            node_classifier[i] = Some(id);
            let anchor = Self::anchor_of(&nodes, &node_classifier, NodeId(i));
            classifiers.push(Classifier {
                id,
                node: NodeId(i),
                classes: n.children.clone(),
                anchor,
                level: n.level + 1,
            });
        }
        Ok(Self {
            nodes,
            lines,
            classifiers,
            node_classifier,
            by_name,
            bindings: BTreeMap::new(),
        })
    }

    /// Nearest classifier above `node` and the class index leading towards it.
    fn anchor_of(
        nodes: &[ConceptNode],
        node_classifier: &[Option<ClassifierId>],
        node: NodeId,
    ) -> Option<(ClassifierId, usize)> {
        let mut child = node;
        while let Some(parent) = nodes[child.0].parent {
            if let Some(c) = node_classifier[parent.0] {
                let idx = nodes[parent.0].children.iter().position(|&x| x == child)?;
                return Some((c, idx));
            }
            child = parent;
        }
        None
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &ConceptNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Source line of `id` in the parsed document (0 if unknown).
    pub fn line(&self, id: NodeId) -> usize {
        self.lines[id.0]
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    /// Look up a node, suggesting close names when it does not exist.
    pub fn resolve(&self, name: &str) -> Result<NodeId, HierarchyError> {
        self.find(name).ok_or_else(|| HierarchyError::UnknownNode {
            name: name.to_string(),
            suggestions: self.suggest(name),
        })
    }

    fn suggest(&self, name: &str) -> Vec<String> {
        let limit = (name.len() / 3).max(2);
        let mut scored: Vec<(usize, &String)> = self
            .by_name
            .keys()
            .map(|k| (strsim::levenshtein(name, k), k))
            .filter(|(d, _)| *d <= limit)
            .collect();
        scored.sort();
        scored.into_iter().take(3).map(|(_, k)| k.clone()).collect()
    }

    pub fn classifiers(&self) -> &[Classifier] {
        &self.classifiers
    }

    pub fn classifier(&self, id: ClassifierId) -> &Classifier {
        &self.classifiers[id.0]
    }

    /// Classifier owned by `node`, if it has one.
    pub fn classifier_of(&self, node: NodeId) -> Option<ClassifierId> {
        self.node_classifier[node.0]
    }

    pub fn root_classifier(&self) -> Option<ClassifierId> {
        self.classifiers.first().map(|c| c.id)
    }

    /// Number of levels below the root.
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    /// Number of concept classes, i.e. every node except the root.
    pub fn class_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf())
            .map(|(i, _)| NodeId(i))
    }

    /// Nodes from the root (exclusive) down to `node` (inclusive).
    pub fn ancestry(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = node;
        while let Some(p) = self.nodes[cur.0].parent {
            out.push(cur);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Ancestor-or-self of `node` at `level`, if `node` is that deep.
    pub fn ancestor_at_level(&self, node: NodeId, level: usize) -> Option<NodeId> {
        if level == 0 {
            return Some(self.root());
        }
        self.ancestry(node).get(level - 1).copied()
    }

    /// True if `ancestor` is `node` or lies above it.
    pub fn is_ancestor_or_self(&self, ancestor: NodeId, node: NodeId) -> bool {
        let mut cur = Some(node);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.nodes[c.0].parent;
        }
        false
    }

    /// Decisions that lead from the root to `node`. Inner nodes with a single
    /// child contribute no step since nothing is decided there.
    pub fn path_encode(&self, node: NodeId) -> LabelPath {
        let mut steps = Vec::new();
        let mut child = node;
        while let Some(parent) = self.nodes[child.0].parent {
            if let Some(c) = self.node_classifier[parent.0] {
                let idx = self.nodes[parent.0]
                    .children
                    .iter()
                    .position(|&x| x == child)
                    .expect("child listed under its parent");
                steps.push((c, idx));
            }
            child = parent;
        }
        steps.reverse();
        LabelPath(steps)
    }

    /// Follow `path` from the root; `None` if a step does not fit the tree.
    /// Trailing single-child chains are followed to their end.
    pub fn path_decode(&self, path: &LabelPath) -> Option<NodeId> {
        let mut cur = self.root();
        for &(c, y) in path.steps() {
            while self.node_classifier[cur.0].is_none() {
                match self.nodes[cur.0].children[..] {
                    [only] => cur = only,
                    _ => return None,
                }
            }
            if self.node_classifier[cur.0] != Some(c) {
                return None;
            }
            cur = *self.nodes[cur.0].children.get(y)?;
        }
        // Nothing is decided below a single-child chain, so it ends the path.
        while let [only] = self.nodes[cur.0].children[..] {
            cur = only;
        }
        Some(cur)
    }

    /// Classifiers whose decisions lie on the path to `node`.
    pub fn supervised_classifiers(&self, node: NodeId) -> Vec<ClassifierId> {
        self.path_encode(node).steps().iter().map(|&(c, _)| c).collect()
    }

    /// Attach a dataset's label ids to nodes.
    ///
    /// Rebinding a label id to the node it already has is a no-op; binding it
    /// to a different node is an error.
    pub fn bind_dataset<'a>(
        &mut self,
        dataset: &str,
        labels: impl IntoIterator<Item = (LabelId, &'a str)>,
    ) -> Result<(), HierarchyError> {
        let mut staged: BTreeMap<LabelId, NodeId> =
            self.bindings.get(dataset).cloned().unwrap_or_default();
        for (label, node_name) in labels {
            let node = self.resolve(node_name)?;
            match staged.get(&label) {
                Some(&existing) if existing != node => {
                    return Err(HierarchyError::ConflictingBinding {
                        dataset: dataset.to_string(),
                        label,
                        first: self.name(existing).to_string(),
                        second: node_name.to_string(),
                    });
                }
                _ => {
                    staged.insert(label, node);
                }
            }
        }
        self.bindings.insert(dataset.to_string(), staged);
        Ok(())
    }

    pub fn bindings(&self) -> &BTreeMap<String, BTreeMap<LabelId, NodeId>> {
        &self.bindings
    }

    pub fn dataset_binding(&self, dataset: &str) -> Option<&BTreeMap<LabelId, NodeId>> {
        self.bindings.get(dataset)
    }

    pub fn bound_node(&self, dataset: &str, label: LabelId) -> Option<NodeId> {
        self.bindings.get(dataset)?.get(&label).copied()
    }

    /// Union of all bound nodes in document order, optionally followed by an
    /// extra "unlabeled" class.
    pub fn flatten_union(&self, with_unlabeled: bool) -> FlatSpace {
        let mut nodes: Vec<NodeId> = self
            .bindings
            .values()
            .flat_map(|m| m.values().copied())
            .collect();
        nodes.sort();
        nodes.dedup();
        let unlabeled = with_unlabeled.then_some(nodes.len());
        FlatSpace {
            classes: nodes,
            unlabeled,
        }
    }

    /// Serialize to the `.hier` text format accepted by [`parse_hierarchy`].
    pub fn to_config_string(&self) -> String {
        parse::serialize(self)
    }

    /// Indented tree with levels and classifier ids, then the binding table.
    pub fn describe(&self) -> String {
        use fmt::Write as _;
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let mut tags = vec![format!("L{}", n.level)];
            if let Some(c) = self.classifier_of(id) {
                tags.push(format!("classifier {c}, {} classes", self.classifier(c).classes.len()));
            }
            let _ = writeln!(out, "{:indent$}{} [{}]", "", n.name, tags.join("; "), indent = 2 * n.level);
        }
        let _ = writeln!(
            out,
            "{} nodes below the root, {} classifiers, depth {}",
            self.nodes.len() - 1,
            self.classifiers.len(),
            self.depth()
        );
        for (ds, map) in &self.bindings {
            let _ = writeln!(out, "bindings of `{ds}`:");
            for (label, node) in map {
                let _ = writeln!(out, "  {label:>4} -> {}", self.name(*node));
            }
        }
        out
    }
}

impl PartialEq for LabelHierarchy {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.bindings == other.bindings
    }
}

impl Eq for LabelHierarchy {}
