//! AND/OR label taxonomy.
//!
//! An AND node lists the distinct parts a structure has: every part routed to
//! it receives one child label. An OR node lists mutually exclusive types:
//! the whole group of parts routed to it receives one child label. Leaves are
//! final part labels.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("duplicate label id `{0}`")]
    DuplicateId(String),
    #[error("root node `{0}` must be an AND node")]
    RootNotAnd(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("label `{0}`: leaf has no children")]
    LeafHasNoChildren(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    And,
    Or,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::And => f.write_str("and"),
            NodeKind::Or => f.write_str("or"),
        }
    }
}

/// File representation of a taxonomy node (`label_tree.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelNode {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub color: [u8; 3],
    #[serde(default)]
    pub children: Vec<LabelNode>,
}

impl LabelNode {
    pub fn leaf(id: &str, color: [u8; 3]) -> Self {
        LabelNode {
            id: id.to_string(),
            name: id.replace('_', " "),
            kind: NodeKind::And,
            color,
            children: Vec::new(),
        }
    }

    pub fn internal(id: &str, kind: NodeKind, children: Vec<LabelNode>) -> Self {
        LabelNode {
            id: id.to_string(),
            name: id.replace('_', " "),
            kind,
            color: [128, 128, 128],
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    id: String,
    name: String,
    kind: NodeKind,
    color: [u8; 3],
    parent: Option<usize>,
    children: Vec<usize>,
    depth: usize,
}

/// Indexed, validated taxonomy. Entry 0 is the root; entries are stored in
/// depth-first preorder so iteration order matches declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabelNode", into = "LabelNode")]
pub struct LabelTree {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl TryFrom<LabelNode> for LabelTree {
    type Error = TreeError;

    fn try_from(root: LabelNode) -> Result<Self, Self::Error> {
        LabelTree::from_root(root)
    }
}

impl From<LabelTree> for LabelNode {
    fn from(tree: LabelTree) -> Self {
        tree.to_node()
    }
}

impl LabelTree {
    pub fn from_root(root: LabelNode) -> Result<Self, TreeError> {
        if root.kind != NodeKind::And {
            return Err(TreeError::RootNotAnd(root.id));
        }
        let mut tree = LabelTree {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        tree.insert(&root, None, 0)?;
        Ok(tree)
    }

    fn insert(&mut self, node: &LabelNode, parent: Option<usize>, depth: usize) -> Result<usize, TreeError> {
        if self.index.contains_key(&node.id) {
            return Err(TreeError::DuplicateId(node.id.clone()));
        }
        let idx = self.entries.len();
        self.entries.push(Entry {
            id: node.id.clone(),
            name: if node.name.is_empty() { node.id.clone() } else { node.name.clone() },
            kind: node.kind,
            color: node.color,
            parent,
            children: Vec::new(),
            depth,
        });
        self.index.insert(node.id.clone(), idx);
        for child in &node.children {
            let c = self.insert(child, Some(idx), depth + 1)?;
            self.entries[idx].children.push(c);
        }
        Ok(idx)
    }

    pub fn load(path: &Path) -> Result<Self, TreeError> {
        let text = std::fs::read_to_string(path).map_err(|source| TreeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let root: LabelNode = serde_json::from_str(&text).map_err(|source| TreeError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_root(root)
    }

    pub fn to_node(&self) -> LabelNode {
        self.node_at(0)
    }

    fn node_at(&self, idx: usize) -> LabelNode {
        let e = &self.entries[idx];
        LabelNode {
            id: e.id.clone(),
            name: e.name.clone(),
            kind: e.kind,
            color: e.color,
            children: e.children.iter().map(|&c| self.node_at(c)).collect(),
        }
    }

    fn lookup(&self, id: &str) -> Result<&Entry, TreeError> {
        self.index
            .get(id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| TreeError::UnknownLabel(id.to_string()))
    }

    pub fn root_id(&self) -> &str {
        &self.entries[0].id
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn kind(&self, id: &str) -> Result<NodeKind, TreeError> {
        Ok(self.lookup(id)?.kind)
    }

    pub fn name(&self, id: &str) -> Result<&str, TreeError> {
        Ok(&self.lookup(id)?.name)
    }

    pub fn color(&self, id: &str) -> Result<[u8; 3], TreeError> {
        Ok(self.lookup(id)?.color)
    }

    pub fn depth(&self, id: &str) -> Result<usize, TreeError> {
        Ok(self.lookup(id)?.depth)
    }

    pub fn is_leaf(&self, id: &str) -> Result<bool, TreeError> {
        Ok(self.lookup(id)?.children.is_empty())
    }

    pub fn parent(&self, id: &str) -> Result<Option<&str>, TreeError> {
        Ok(self.lookup(id)?.parent.map(|p| self.entries[p].id.as_str()))
    }

    /// Child ids of an internal node, in declaration order.
    pub fn children_labels(&self, id: &str) -> Result<Vec<&str>, TreeError> {
        let e = self.lookup(id)?;
        if e.children.is_empty() {
            return Err(TreeError::LeafHasNoChildren(id.to_string()));
        }
        Ok(e.children.iter().map(|&c| self.entries[c].id.as_str()).collect())
    }

    /// True iff `ancestor` lies on the root path of `label` (reflexive).
    pub fn is_descendant(&self, label: &str, ancestor: &str) -> Result<bool, TreeError> {
        let target = *self
            .index
            .get(ancestor)
            .ok_or_else(|| TreeError::UnknownLabel(ancestor.to_string()))?;
        let mut cur = Some(
            *self
                .index
                .get(label)
                .ok_or_else(|| TreeError::UnknownLabel(label.to_string()))?,
        );
        while let Some(i) = cur {
            if i == target {
                return Ok(true);
            }
            cur = self.entries[i].parent;
        }
        Ok(false)
    }

    /// The child of `node` whose subtree contains `label`, if any. A label
    /// equal to `node` itself or outside its subtree yields `None`.
    pub fn child_toward(&self, node: &str, label: &str) -> Result<Option<&str>, TreeError> {
        let node_idx = *self
            .index
            .get(node)
            .ok_or_else(|| TreeError::UnknownLabel(node.to_string()))?;
        let mut cur = *self
            .index
            .get(label)
            .ok_or_else(|| TreeError::UnknownLabel(label.to_string()))?;
        while let Some(p) = self.entries[cur].parent {
            if p == node_idx {
                return Ok(Some(&self.entries[cur].id));
            }
            cur = p;
        }
        Ok(None)
    }

    /// Leaf ids in depth-first declaration order.
    pub fn leaves(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.children.is_empty())
            .map(|e| e.id.as_str())
            .collect()
    }

    /// Internal node ids in depth-first preorder (root first).
    pub fn internal_nodes(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.children.is_empty())
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// Removes internal AND nodes with fewer than three children, promoting
    /// their children to the parent after the parent's retained children.
    /// OR nodes, leaves and the root are always kept.
    pub fn prune(&self) -> LabelTree {
        let root = self.to_node();
        let pruned = LabelNode {
            children: prune_children(&root.children),
            ..root
        };
        LabelTree::from_root(pruned).expect("pruning preserves tree validity")
    }

    /// Single AND node over every leaf: the non-hierarchical configuration.
    pub fn flatten(&self) -> LabelTree {
        let root = &self.entries[0];
        let children = self
            .entries
            .iter()
            .filter(|e| e.children.is_empty() && e.parent.is_some())
            .map(|e| LabelNode {
                id: e.id.clone(),
                name: e.name.clone(),
                kind: e.kind,
                color: e.color,
                children: Vec::new(),
            })
            .collect();
        LabelTree::from_root(LabelNode {
            id: root.id.clone(),
            name: root.name.clone(),
            kind: NodeKind::And,
            color: root.color,
            children,
        })
        .expect("flattening preserves tree validity")
    }
}

fn prune_children(children: &[LabelNode]) -> Vec<LabelNode> {
    let mut kept = Vec::with_capacity(children.len());
    let mut promoted = Vec::new();
    for child in children {
        let pruned = LabelNode {
            children: prune_children(&child.children),
            ..child.clone()
        };
        let removable = pruned.kind == NodeKind::And && !pruned.children.is_empty() && pruned.children.len() < 3;
        if removable {
            promoted.extend(pruned.children);
        } else {
            kept.push(pruned);
        }
    }
    kept.extend(promoted);
    kept
}
