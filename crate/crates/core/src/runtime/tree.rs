use std::collections::BTreeMap;
use std::fmt;

use crate::policy::Specialization;

/// Run-unique agent identifier with its depth below the root.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId {
    pub id: String,
    pub depth: u32,
}

impl AgentId {
    pub fn root(id: impl Into<String>) -> Self {
        Self { id: id.into(), depth: 0 }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.id, self.depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Running,
    Done,
    Failed,
    TimedOut,
}

impl NodeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeStatus::Running => "running",
            NodeStatus::Done => "done",
            NodeStatus::Failed => "failed",
            NodeStatus::TimedOut => "timed_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub agent: AgentId,
    pub parent: Option<String>,
    pub specialization: Option<Specialization>,
    pub status: NodeStatus,
    pub started_at: f64,
    pub ended_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeViolation {
    UnknownParent(String),
    DuplicateNode(String),
    DepthMismatch { id: String, depth: u32 },
    TooDeep { id: String, depth: u32 },
    TooManyRunning { parent: String, running: usize },
    NotRunning(String),
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeViolation::UnknownParent(p) => write!(f, "unknown parent `{p}`"),
            TreeViolation::DuplicateNode(id) => write!(f, "node `{id}` already registered"),
            TreeViolation::DepthMismatch { id, depth } => write!(f, "node `{id}` has inconsistent depth {depth}"),
            TreeViolation::TooDeep { id, depth } => write!(f, "node `{id}` at depth {depth} exceeds the limit"),
            TreeViolation::TooManyRunning { parent, running } => {
                write!(f, "`{parent}` has {running} running children")
            }
            TreeViolation::NotRunning(id) => write!(f, "node `{id}` is not running"),
        }
    }
}

/// Dynamic spawn tree with per-node lifetimes. Mutations that would break
/// the depth or concurrency limits are refused.
#[derive(Debug, Clone, PartialEq)]
pub struct SpawnTree {
    root: String,
    nodes: BTreeMap<String, TreeNode>,
    order: Vec<String>,
    max_depth: u32,
    concurrent_limit: usize,
}

impl SpawnTree {
    pub fn new(root: AgentId, max_depth: u32, concurrent_limit: usize, now: f64) -> Self {
        let id = root.id.clone();
        let node = TreeNode {
            agent: root,
            parent: None,
            specialization: None,
            status: NodeStatus::Running,
            started_at: now,
            ended_at: None,
        };
        Self {
            root: id.clone(),
            nodes: BTreeMap::from([(id.clone(), node)]),
            order: vec![id],
            max_depth,
            concurrent_limit,
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[&self.root]
    }

    pub fn get(&self, id: &str) -> Option<&TreeNode> {
        self.nodes.get(id)
    }

    /// Nodes in registration order.
    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.order.iter().map(|id| &self.nodes[id])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn children<'a>(&'a self, parent: &'a str) -> impl Iterator<Item = &'a TreeNode> + 'a {
        self.nodes().filter(move |n| n.parent.as_deref() == Some(parent))
    }

    pub fn running_children(&self, parent: &str) -> usize {
        self.children(parent)
            .filter(|n| n.status == NodeStatus::Running)
            .count()
    }

    pub fn max_depth_reached(&self) -> u32 {
        self.nodes.values().map(|n| n.agent.depth).max().unwrap_or(0)
    }

    /// Number of nodes at each depth, root first.
    pub fn shape(&self) -> Vec<usize> {
        let mut shape = vec![0; self.max_depth_reached() as usize + 1];
        for n in self.nodes.values() {
            shape[n.agent.depth as usize] += 1;
        }
        shape
    }

    pub fn add_child(
        &mut self,
        parent: &str,
        child: AgentId,
        specialization: Option<Specialization>,
        now: f64,
    ) -> Result<(), TreeViolation> {
        let parent_depth = self
            .nodes
            .get(parent)
            .ok_or_else(|| TreeViolation::UnknownParent(parent.to_string()))?
            .agent
            .depth;
        if self.nodes.contains_key(&child.id) {
            return Err(TreeViolation::DuplicateNode(child.id));
        }
        if child.depth != parent_depth + 1 {
            return Err(TreeViolation::DepthMismatch {
                id: child.id,
                depth: child.depth,
            });
        }
        if child.depth > self.max_depth {
            return Err(TreeViolation::TooDeep {
                id: child.id,
                depth: child.depth,
            });
        }
        let running = self.running_children(parent);
        if running >= self.concurrent_limit {
            return Err(TreeViolation::TooManyRunning {
                parent: parent.to_string(),
                running: running + 1,
            });
        }
        let id = child.id.clone();
        self.nodes.insert(
            id.clone(),
            TreeNode {
                agent: child,
                parent: Some(parent.to_string()),
                specialization,
                status: NodeStatus::Running,
                started_at: now,
                ended_at: None,
            },
        );
        self.order.push(id);
        Ok(())
    }

    pub fn finish(&mut self, id: &str, status: NodeStatus, now: f64) -> Result<(), TreeViolation> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| TreeViolation::UnknownParent(id.to_string()))?;
        if node.status != NodeStatus::Running {
            return Err(TreeViolation::NotRunning(id.to_string()));
        }
        node.status = status;
        node.ended_at = Some(now);
        Ok(())
    }

    /// Independent audit over recorded lifetimes: every depth within the
    /// limit, and at no instant more running children under one node than
    /// allowed. A child ending at `t` frees its slot before one starting at
    /// `t` takes it.
    pub fn verify(&self) -> Vec<TreeViolation> {
        let mut out = Vec::new();
        for n in self.nodes.values() {
            if n.agent.depth > self.max_depth {
                out.push(TreeViolation::TooDeep {
                    id: n.agent.id.clone(),
                    depth: n.agent.depth,
                });
            }
            if let Some(p) = &n.parent {
                match self.nodes.get(p) {
                    None => out.push(TreeViolation::UnknownParent(p.clone())),
                    Some(pn) if pn.agent.depth + 1 != n.agent.depth => out.push(TreeViolation::DepthMismatch {
                        id: n.agent.id.clone(),
                        depth: n.agent.depth,
                    }),
                    Some(_) => {}
                }
            }
        }
        for parent in &self.order {
            let mut edges: Vec<(f64, i32)> = Vec::new();
            for c in self.children(parent) {
                edges.push((c.started_at, 1));
                edges.push((c.ended_at.unwrap_or(f64::INFINITY), -1));
            }
            edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut running = 0i32;
            let mut peak = 0i32;
            for (_, d) in edges {
                running += d;
                peak = peak.max(running);
            }
            if peak as usize > self.concurrent_limit {
                out.push(TreeViolation::TooManyRunning {
                    parent: parent.clone(),
                    running: peak as usize,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn child(id: &str, depth: u32) -> AgentId {
        AgentId { id: id.into(), depth }
    }

    #[test]
    fn refuses_limit_breaking_mutations() {
        let mut t = SpawnTree::new(AgentId::root("root"), 1, 1, 0.0);
        t.add_child("root", child("a", 1), None, 0.0).unwrap();
        assert!(matches!(
            t.add_child("root", child("b", 1), None, 0.0),
            Err(TreeViolation::TooManyRunning { .. })
        ));
        assert!(matches!(t.add_child("a", child("c", 2), None, 0.0), Err(TreeViolation::TooDeep { .. })));
        t.finish("a", NodeStatus::Done, 5.0).unwrap();
        t.add_child("root", child("b", 1), None, 5.0).unwrap();
        assert!(t.verify().is_empty());
        assert_eq!(t.shape(), vec![1, 2]);
        assert_eq!(t.finish("a", NodeStatus::Done, 6.0), Err(TreeViolation::NotRunning("a".into())));
    }
}
