//! Structural and supervision checks that gate training.

use std::collections::BTreeMap;
use std::fmt;

use super::{ClassifierId, LabelHierarchy, LabelId, NodeId};
use crate::error::HierarchyError;

/// How a dataset annotates one of its labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Supervision {
    /// Per-pixel label maps.
    Dense,
    /// Bounding boxes, turned into pseudo masks during training.
    Boxes,
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::Dense => "dense",
            Supervision::Boxes => "bbox",
        })
    }
}

/// Annotation type of every label a dataset uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetAnnotations {
    pub name: String,
    pub labels: BTreeMap<LabelId, Supervision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rule {
    /// An inner node with a single child.
    DegenerateClassifier,
    /// A root-classifier class without any per-pixel annotated binding.
    RootCoverage,
    /// A dataset label with no node bound to it.
    MissingBinding,
    /// A binding section for a dataset that was not declared.
    UnknownDataset,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::DegenerateClassifier => "degenerate classifier",
            Rule::RootCoverage => "root coverage",
            Rule::MissingBinding => "missing binding",
            Rule::UnknownDataset => "unknown dataset",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub rule: Rule,
    /// Offending node, when the issue is tied to one.
    pub node: Option<String>,
    pub detail: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.rule)?;
        if let Some(n) = &self.node {
            write!(f, " at `{n}`")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
    /// Per classifier, the datasets that supervise it and how.
    pub supervision: BTreeMap<ClassifierId, BTreeMap<String, Vec<Supervision>>>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.issues.iter().any(|i| i.rule == rule)
    }

    /// Turn a failing report into an error so callers can `?` it.
    pub fn into_result(self) -> Result<Self, HierarchyError> {
        if self.is_valid() {
            Ok(self)
        } else {
            let text = self.issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n");
            Err(HierarchyError::Invalid(text))
        }
    }
}

impl LabelHierarchy {
    /// Check the tree and its bindings against the datasets that will train it.
    pub fn validate(&self, datasets: &[DatasetAnnotations]) -> ValidationReport {
        let mut report = ValidationReport::default();

        for n in self.nodes() {
            if n.children.len() == 1 {
                report.issues.push(Issue {
                    rule: Rule::DegenerateClassifier,
                    node: Some(n.name.clone()),
                    detail: "an inner node needs at least two children".into(),
                });
            }
        }

        for dataset in self.bindings().keys() {
            if !datasets.iter().any(|d| &d.name == dataset) {
                report.issues.push(Issue {
                    rule: Rule::UnknownDataset,
                    node: None,
                    detail: format!("bindings given for undeclared dataset `{dataset}`"),
                });
            }
        }

        // (node, supervision) pairs across all datasets
        let mut bound: Vec<(NodeId, Supervision)> = Vec::new();
        for d in datasets {
            for (&label, &kind) in &d.labels {
                match self.bound_node(&d.name, label) {
                    Some(node) => {
                        bound.push((node, kind));
                        for c in self.supervised_classifiers(node) {
                            let kinds = report
                                .supervision
                                .entry(c)
                                .or_default()
                                .entry(d.name.clone())
                                .or_default();
                            if !kinds.contains(&kind) {
                                kinds.push(kind);
                                kinds.sort();
                            }
                        }
                    }
                    None => report.issues.push(Issue {
                        rule: Rule::MissingBinding,
                        node: None,
                        detail: format!("dataset `{}` label {label} is not bound to any node", d.name),
                    }),
                }
            }
        }

        if let Some(root) = self.root_classifier() {
            for &class in &self.classifier(root).classes {
                let covered = bound
                    .iter()
                    .any(|&(n, k)| k == Supervision::Dense && self.is_ancestor_or_self(class, n));
                if !covered {
                    report.issues.push(Issue {
                        rule: Rule::RootCoverage,
                        node: Some(self.name(class).to_string()),
                        detail: "root classes need per-pixel annotated examples".into(),
                    });
                }
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::parse_hierarchy;

    fn ds(name: &str, labels: &[(LabelId, Supervision)]) -> DatasetAnnotations {
        DatasetAnnotations {
            name: name.into(),
            labels: labels.iter().copied().collect(),
        }
    }

    const TEXT: &str = "root\n  ground\n  sign\n    stop\n    yield\n\n\
                        [bind dense]\n0 = ground\n1 = sign\n\n[bind boxes]\n0 = stop\n1 = yield\n";

    #[test]
    fn dense_roots_plus_box_leaves_is_valid() {
        let h = parse_hierarchy(TEXT).unwrap();
        let r = h.validate(&[
            ds("dense", &[(0, Supervision::Dense), (1, Supervision::Dense)]),
            ds("boxes", &[(0, Supervision::Boxes), (1, Supervision::Boxes)]),
        ]);
        assert!(r.is_valid(), "{:?}", r.issues);
        let sub = &r.supervision[&ClassifierId(1)];
        assert_eq!(sub.len(), 1);
        assert_eq!(sub["boxes"], vec![Supervision::Boxes]);
        assert_eq!(r.supervision[&ClassifierId(0)].len(), 2);
    }

    #[test]
    fn box_only_root_class_fails_coverage() {
        let h = parse_hierarchy(TEXT).unwrap();
        let r = h.validate(&[
            ds("dense", &[(0, Supervision::Dense)]),
            ds("boxes", &[(0, Supervision::Boxes), (1, Supervision::Boxes)]),
        ]);
        assert!(r.has(Rule::RootCoverage));
        assert!(r.issues.iter().any(|i| i.node.as_deref() == Some("sign")));
        assert!(r.into_result().unwrap_err().to_string().contains("root coverage"));
    }

    #[test]
    fn single_child_is_degenerate() {
        let h = parse_hierarchy("root\n  a\n    only\n  b\n[bind d]\n0 = only\n1 = b\n").unwrap();
        let r = h.validate(&[ds("d", &[(0, Supervision::Dense), (1, Supervision::Dense)])]);
        assert!(r.has(Rule::DegenerateClassifier));
    }

    #[test]
    fn unbound_labels_and_unknown_datasets() {
        let h = parse_hierarchy(TEXT).unwrap();
        let r = h.validate(&[ds("dense", &[(0, Supervision::Dense), (1, Supervision::Dense), (9, Supervision::Dense)])]);
        assert!(r.has(Rule::MissingBinding));
        assert!(r.has(Rule::UnknownDataset));
    }
}
