//! Reply-graph algorithms: shared utterances, the top shared node, its
//! sub-conversations, speaker-to-addressee pointers and same-speaker
//! predecessors. All indices are 0-based turn indices.

use std::fmt::Write;

use serde::Serialize;

use crate::corpus::Conversation;
use crate::error::{MpcError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReplyGraph {
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PointerTuple {
    pub i: usize,
    pub i_prime: usize,
    pub from_speaker: usize,
    pub to_speaker: usize,
}

impl PointerTuple {
    pub fn direction(&self) -> (usize, usize) {
        (self.from_speaker, self.to_speaker)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubConversation {
    pub root: usize,
    pub members: Vec<usize>,
}

impl SubConversation {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl ReplyGraph {
    pub fn from_parents(parent: Vec<Option<usize>>) -> Self {
        let mut children = vec![Vec::new(); parent.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                children[p].push(i);
            }
        }
        ReplyGraph { parent, children }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn roots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.parent[i].is_none())
    }

    /// Edges from each node to its root.
    pub fn depth(&self, mut i: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent[i] {
            i = p;
            d += 1;
        }
        d
    }

    /// `node` and all its descendants, ascending.
    pub fn subtree(&self, node: usize) -> Vec<usize> {
        let mut out = vec![node];
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            for &c in &self.children[n] {
                out.push(c);
                stack.push(c);
            }
        }
        out.sort_unstable();
        out
    }
}

pub fn build_reply_graph(conv: &Conversation) -> ReplyGraph {
    ReplyGraph::from_parents(conv.replies())
}

/// Utterances with at least two replies.
pub fn shared_utterances(graph: &ReplyGraph) -> Vec<usize> {
    (0..graph.len()).filter(|&i| graph.children[i].len() >= 2).collect()
}

/// Shallowest shared utterance; ties go to the smaller index.
pub fn top_shared_node(graph: &ReplyGraph) -> Option<usize> {
    shared_utterances(graph).into_iter().min_by_key(|&i| (graph.depth(i), i))
}

/// One sub-conversation per child of `node`, largest first, ties by
/// smaller root.
pub fn sub_conversations(graph: &ReplyGraph, node: usize) -> Result<Vec<SubConversation>> {
    if node >= graph.len() || graph.children[node].len() < 2 {
        return Err(MpcError::invalid(format!("utterance {node} is not a shared node")));
    }
    let mut subs: Vec<SubConversation> = graph.children[node]
        .iter()
        .map(|&c| SubConversation {
            root: c,
            members: graph.subtree(c),
        })
        .collect();
    subs.sort_by(|a, b| b.len().cmp(&a.len()).then(a.root.cmp(&b.root)));
    Ok(subs)
}

pub fn pointer_tuples(conv: &Conversation, graph: &ReplyGraph) -> Vec<PointerTuple> {
    graph
        .parent
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            p.map(|ip| PointerTuple {
                i,
                i_prime: ip,
                from_speaker: conv.speaker(i),
                to_speaker: conv.speaker(ip),
            })
        })
        .collect()
}

pub fn same_speaker_predecessors(conv: &Conversation, i: usize) -> Vec<usize> {
    let s = conv.speaker(i);
    (0..i).filter(|&j| conv.speaker(j) == s).collect()
}

/// ASCII reply tree with speakers and the shared / top-shared markers.
pub fn render_tree(conv: &Conversation, graph: &ReplyGraph, label: impl Fn(usize) -> String) -> String {
    let shared = shared_utterances(graph);
    let top = top_shared_node(graph);
    let mut out = String::new();
    #[allow(clippy::too_many_arguments)]
    fn walk(
        out: &mut String,
        g: &ReplyGraph,
        conv: &Conversation,
        node: usize,
        prefix: &str,
        last: bool,
        is_root: bool,
        shared: &[usize],
        top: Option<usize>,
        label: &dyn Fn(usize) -> String,
    ) {
        let branch = if is_root {
            ""
        } else if last {
            "`-- "
        } else {
            "|-- "
        };
        let mark = if Some(node) == top {
            " [top shared]"
        } else if shared.contains(&node) {
            " [shared]"
        } else {
            ""
        };
        let _ = writeln!(
            out,
            "{prefix}{branch}U{} (I.{}){mark}: {}",
            node + 1,
            conv.speaker(node) + 1,
            label(node)
        );
        let child_prefix = if is_root {
            String::new()
        } else {
            format!("{prefix}{}", if last { "    " } else { "|   " })
        };
        let kids = &g.children[node];
        for (k, &c) in kids.iter().enumerate() {
            walk(out, g, conv, c, &child_prefix, k + 1 == kids.len(), false, shared, top, label);
        }
    }
    for r in graph.roots() {
        walk(&mut out, graph, conv, r, "", true, true, &shared, top, &label);
    }
    let names: Vec<String> = shared.iter().map(|i| format!("U{}", i + 1)).collect();
    let _ = writeln!(out, "shared: [{}]", names.join(", "));
    let _ = writeln!(out, "top shared: {}", top.map(|t| format!("U{}", t + 1)).unwrap_or_else(|| "none".into()));
    out
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::corpus::fixtures::from_parents;
    use crate::corpus::Conversation;

    /// U2 is shared by U3 and U4; its sub-conversations are
    /// {U3, U5, U7, U8} and {U4, U6, U9} (1-based).
    pub fn figure2b() -> Conversation {
        let parents = [None, Some(0), Some(1), Some(1), Some(2), Some(3), Some(4), Some(4), Some(5)];
        let speakers = [0, 1, 2, 3, 0, 1, 2, 3, 0];
        from_parents(&parents, &speakers)
    }
}
