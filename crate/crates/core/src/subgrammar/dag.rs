use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::grammar::{components, Grammar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub id: usize,
    /// Names of the nonterminals merged into this node, in declaration order.
    pub label: Vec<String>,
    #[serde(skip)]
    pub nonterminals: Vec<usize>,
    pub self_loop: bool,
}

/// The hierarchy of inner subgrammars. Each node is a set of nonterminals
/// that generate the same inner subgrammar (mutually reachable ones); there
/// is an edge `p → c` whenever a rule of a nonterminal in `p` mentions one
/// in `c`. Node ids follow breadth-first order from the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgrammarDag {
    pub nodes: Vec<DagNode>,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
    #[serde(skip)]
    node_of: Vec<usize>,
}

pub fn decompose_dag(g: &Grammar) -> SubgrammarDag {
    let n = g.nonterminals().len();
    let comps = components(g);
    let mut comp_of = vec![0; n];
    for (c, members) in comps.iter().enumerate() {
        for &a in members {
            comp_of[a] = c;
        }
    }
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); comps.len()];
    let mut self_loop = vec![false; comps.len()];
    for rule in g.rules() {
        for b in rule.nonterminals() {
            let (p, c) = (comp_of[rule.lhs], comp_of[b]);
            if p == c {
                self_loop[p] = true;
            } else {
                succ[p].insert(c);
            }
        }
    }
    // Breadth-first numbering from the start component; children in order
    // of their first nonterminal, unreachable components last.
    let first = |c: usize| comps[c][0];
    let mut order = Vec::with_capacity(comps.len());
    let mut seen = vec![false; comps.len()];
    let mut queue = VecDeque::from([comp_of[g.start()]]);
    seen[comp_of[g.start()]] = true;
    let mut pending: Vec<usize> = (0..comps.len()).collect();
    pending.sort_by_key(|&c| first(c));
    loop {
        while let Some(c) = queue.pop_front() {
            order.push(c);
            let mut kids: Vec<usize> = succ[c].iter().copied().filter(|&k| !seen[k]).collect();
            kids.sort_by_key(|&k| first(k));
            for k in kids {
                seen[k] = true;
                queue.push_back(k);
            }
        }
        match pending.iter().find(|&&c| !seen[c]) {
            Some(&c) => {
                seen[c] = true;
                queue.push_back(c);
            }
            None => break,
        }
    }
    let mut id_of = vec![0; comps.len()];
    for (id, &c) in order.iter().enumerate() {
        id_of[c] = id;
    }
    let nodes = order
        .iter()
        .enumerate()
        .map(|(id, &c)| DagNode {
            id,
            label: comps[c].iter().map(|&a| g.nonterminals()[a].clone()).collect(),
            nonterminals: comps[c].clone(),
            self_loop: self_loop[c],
        })
        .collect();
    let mut edges: Vec<(usize, usize)> = succ
        .iter()
        .enumerate()
        .flat_map(|(p, cs)| cs.iter().map(move |&c| (p, c)))
        .map(|(p, c)| (id_of[p], id_of[c]))
        .collect();
    edges.sort_unstable();
    SubgrammarDag {
        nodes,
        edges,
        root: 0,
        node_of: (0..n).map(|a| id_of[comp_of[a]]).collect(),
    }
}

impl SubgrammarDag {
    /// Node containing nonterminal `nt` (by index in the source grammar).
    pub fn node_of(&self, nt: usize) -> usize {
        self.node_of[nt]
    }

    pub fn node_named(&self, name: &str) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.label.iter().any(|l| l == name))
    }

    pub fn children(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.0 == id).map(|e| e.1)
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.children(id).next().is_none()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.is_leaf(i)).collect()
    }

    /// Length of the longest edge path from the root.
    pub fn depth(&self) -> usize {
        // Node ids are not a topological order in general, so relax until
        // stable; the graph is acyclic so at most |nodes| rounds are needed.
        let mut d = vec![None::<usize>; self.nodes.len()];
        d[self.root] = Some(0);
        for _ in 0..self.nodes.len() {
            let mut changed = false;
            for &(p, c) in &self.edges {
                if let Some(dp) = d[p] {
                    if d[c].is_none_or(|dc| dc < dp + 1) {
                        d[c] = Some(dp + 1);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        d.into_iter().flatten().max().unwrap_or(0)
    }

    /// True when the edge relation (self-loops excluded) has a topological
    /// order.
    pub fn is_acyclic(&self) -> bool {
        let n = self.nodes.len();
        let mut indeg = vec![0; n];
        for &(_, c) in &self.edges {
            indeg[c] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut done = 0;
        while let Some(p) = ready.pop() {
            done += 1;
            for c in self.children(p).collect::<Vec<_>>() {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.push(c);
                }
            }
        }
        done == n
    }

    /// Id-free form for comparing decompositions: node labels with their
    /// self-loop flags, and edges between labels.
    pub fn canonical(&self) -> (BTreeSet<(Vec<String>, bool)>, BTreeSet<(Vec<String>, Vec<String>)>) {
        let label = |i: usize| {
            let mut l = self.nodes[i].label.clone();
            l.sort();
            l
        };
        (
            (0..self.nodes.len()).map(|i| (label(i), self.nodes[i].self_loop)).collect(),
            self.edges.iter().map(|&(p, c)| (label(p), label(c))).collect(),
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("dag serializes")
    }

    /// Indented tree from the root; shared children are printed under each
    /// parent, and `*` marks a self-loop.
    pub fn to_text(&self) -> String {
        fn walk(dag: &SubgrammarDag, id: usize, indent: usize, out: &mut String) {
            let node = &dag.nodes[id];
            out.push_str(&"  ".repeat(indent));
            out.push('{');
            out.push_str(&node.label.join(", "));
            out.push('}');
            if node.self_loop {
                out.push_str(" *");
            }
            out.push('\n');
            for c in dag.children(id) {
                walk(dag, c, indent + 1, out);
            }
        }
        let mut out = String::new();
        walk(self, self.root, 0, &mut out);
        for i in 0..self.nodes.len() {
            if i != self.root && !self.edges.iter().any(|e| e.1 == i) {
                walk(self, i, 0, &mut out);
            }
        }
        out
    }
}
