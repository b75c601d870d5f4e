//! The `.hier` text format.
//!
//! ```text
//! # comments start with '#'
//! root
//!   driveable:          # trailing ':' requires at least one child
//!     road
//!     lane_marking
//!   traffic_sign
//!
//! [bind cityscapes]
//! 7 = road
//! 20 = traffic_sign
//! ```
//!
//! Two spaces of indentation per level. Exactly one node at indentation 0.

use std::fmt::Write as _;

use super::{ConceptNode, LabelHierarchy, LabelId, NodeId};
use crate::error::HierarchyError;

const INDENT: usize = 2;

fn parse_err(line: usize, message: impl Into<String>) -> HierarchyError {
    HierarchyError::Parse {
        line,
        message: message.into(),
    }
}

fn strip_comment(raw: &str) -> &str {
    match raw.find('#') {
        Some(i) => &raw[..i],
        None => raw,
    }
    .trim_end()
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

struct PendingNode {
    name: String,
    depth: usize,
    line: usize,
    needs_children: bool,
}

/// Parse a hierarchy document, including its `[bind ...]` sections.
pub fn parse_hierarchy(text: &str) -> Result<LabelHierarchy, HierarchyError> {
    let mut pending: Vec<PendingNode> = Vec::new();
    let mut binds: Vec<(String, usize, LabelId, String)> = Vec::new();
    let mut section: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw);
        if line.trim().is_empty() {
            continue;
        }
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix('[') {
            let inner = rest
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line_no, "unterminated section header"))?;
            let mut words = inner.split_whitespace();
            match (words.next(), words.next(), words.next()) {
                (Some("bind"), Some(ds), None) if valid_name(ds) => section = Some(ds.to_string()),
                _ => return Err(parse_err(line_no, format!("expected `[bind <dataset>]`, got `{trimmed}`"))),
            }
            continue;
        }
        if let Some(dataset) = &section {
            let (id, name) = trimmed
                .split_once('=')
                .ok_or_else(|| parse_err(line_no, "binding must read `<label id> = <node>`"))?;
            let id: LabelId = id
                .trim()
                .parse()
                .map_err(|_| parse_err(line_no, format!("invalid label id `{}`", id.trim())))?;
            binds.push((dataset.clone(), line_no, id, name.trim().to_string()));
            continue;
        }

        if line.contains('\t') {
            return Err(parse_err(line_no, "tabs are not allowed; indent with two spaces"));
        }
        let indent = line.len() - line.trim_start().len();
        if !indent.is_multiple_of(INDENT) {
            return Err(parse_err(line_no, format!("indentation of {indent} is not a multiple of {INDENT}")));
        }
        let depth = indent / INDENT;
        let (name, needs_children) = match trimmed.strip_suffix(':') {
            Some(n) => (n.trim_end(), true),
            None => (trimmed, false),
        };
        if !valid_name(name) {
            return Err(parse_err(line_no, format!("invalid node name `{name}`")));
        }
        match pending.last() {
            None if depth != 0 => return Err(parse_err(line_no, "the root must not be indented")),
            Some(_) if depth == 0 => return Err(parse_err(line_no, "only one root node is allowed")),
            Some(prev) if depth > prev.depth + 1 => {
                return Err(parse_err(line_no, "indentation jumps more than one level"))
            }
            _ => {}
        }
        pending.push(PendingNode {
            name: name.to_string(),
            depth,
            line: line_no,
            needs_children,
        });
    }

    if pending.is_empty() {
        return Err(parse_err(1, "document defines no nodes"));
    }

    let mut nodes: Vec<ConceptNode> = Vec::with_capacity(pending.len());
    let mut lines = Vec::with_capacity(pending.len());
    let mut stack: Vec<NodeId> = Vec::new();
    for p in &pending {
        stack.truncate(p.depth);
        let id = NodeId(nodes.len());
        let parent = stack.last().copied();
        if let Some(par) = parent {
            nodes[par.0].children.push(id);
        }
        nodes.push(ConceptNode {
            name: p.name.clone(),
            parent,
            children: Vec::new(),
            level: p.depth,
        });
        lines.push(p.line);
        stack.push(id);
    }
    for (p, n) in pending.iter().zip(&nodes) {
        if p.needs_children && n.children.is_empty() {
            return Err(parse_err(p.line, format!("empty children block under `{}`", p.name)));
        }
    }

    let mut h = LabelHierarchy::from_nodes(nodes, lines)?;
    for (dataset, line, id, name) in binds {
        h.bind_dataset(&dataset, [(id, name.as_str())])
            .map_err(|e| parse_err(line, e.to_string()))?;
    }
    Ok(h)
}

pub(super) fn serialize(h: &LabelHierarchy) -> String {
    let mut out = String::new();
    for n in h.nodes() {
        let _ = writeln!(out, "{}{}", " ".repeat(INDENT * n.level), n.name);
    }
    for (dataset, labels) in h.bindings() {
        let _ = writeln!(out, "\n[bind {dataset}]");
        for (id, node) in labels {
            let _ = writeln!(out, "{id} = {}", h.name(*node));
        }
    }
    out
}
