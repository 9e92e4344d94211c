//! Operator graph IR and its JSON form.
//!
//! Every node produces one tensor. A node's operands are the edges that
//! point at it, in the order they appear in the document's `edges` list.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Input,
    Output,
    Reshape,
    Mean,
    Variance,
    Normalize,
    Split,
    Erf,
    Mul,
    Add,
    Matmul,
    Softmax,
    GroupNormFused,
    GeluFused,
    AttentionPartiallyFused,
    AttentionTiled,
    Conv3x3,
    Conv3x3Winograd,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Output => "output",
            OpKind::Reshape => "reshape",
            OpKind::Mean => "mean",
            OpKind::Variance => "variance",
            OpKind::Normalize => "normalize",
            OpKind::Split => "split",
            OpKind::Erf => "erf",
            OpKind::Mul => "mul",
            OpKind::Add => "add",
            OpKind::Matmul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::GroupNormFused => "group_norm_fused",
            OpKind::GeluFused => "gelu_fused",
            OpKind::AttentionPartiallyFused => "attention_partially_fused",
            OpKind::AttentionTiled => "attention_tiled",
            OpKind::Conv3x3 => "conv3x3",
            OpKind::Conv3x3Winograd => "conv3x3_winograd",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub type Attrs = Map<String, Value>;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: OpKind,
    pub attrs: Attrs,
    pub operands: Vec<String>,
}

impl Node {
    pub fn attr_usize(&self, key: &str) -> Result<usize> {
        self.attrs
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| self.bad_attr(key, "a non-negative integer"))
    }

    pub fn attr_usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.attrs.get(key) {
            None => Ok(default),
            Some(_) => self.attr_usize(key),
        }
    }

    pub fn attr_f64(&self, key: &str) -> Result<f64> {
        self.attrs
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| self.bad_attr(key, "a number"))
    }

    pub fn attr_f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.attrs.get(key) {
            None => Ok(default),
            Some(_) => self.attr_f64(key),
        }
    }

    pub fn attr_bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.attrs.get(key) {
            None => Ok(default),
            Some(v) => v.as_bool().ok_or_else(|| self.bad_attr(key, "a boolean")),
        }
    }

    pub fn attr_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.attrs
            .get(key)
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(|v| v.as_u64().map(|u| u as usize)).collect())
            .ok_or_else(|| self.bad_attr(key, "a list of non-negative integers"))
    }

    fn bad_attr(&self, key: &str, what: &str) -> Error {
        Error::InvalidGraph(format!(
            "node `{}` ({}): attribute `{key}` must be {what}",
            self.id, self.kind
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeDoc {
    id: String,
    kind: OpKind,
    #[serde(default)]
    attrs: Attrs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EdgeDoc {
    from: String,
    to: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

/// Validated acyclic operator graph with inferred tensor shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct OpGraph {
    nodes: Vec<Node>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    shapes: HashMap<String, Vec<usize>>,
    order: Vec<usize>,
}

impl OpGraph {
    /// Validates structure and infers every node's output shape. Input
    /// nodes must carry a `shape` attribute.
    pub fn new(nodes: Vec<Node>, inputs: Vec<String>, outputs: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", n.id)));
            }
        }
        for n in &nodes {
            for op in &n.operands {
                if !seen.contains(op.as_str()) {
                    return Err(Error::InvalidGraph(format!(
                        "node `{}` references unknown node `{op}`",
                        n.id
                    )));
                }
            }
        }
        let by_id: HashMap<&str, &Node> = nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        check_boundary(&nodes, &by_id, &inputs, OpKind::Input, "input")?;
        check_boundary(&nodes, &by_id, &outputs, OpKind::Output, "output")?;

        let order = topo_order(&nodes)?;
        let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
        for &i in &order {
            let node = &nodes[i];
            let operand_shapes: Vec<&[usize]> = node.operands.iter().map(|o| shapes[o].as_slice()).collect();
            let shape = super::shapes::infer(node, &operand_shapes)?;
            shapes.insert(node.id.clone(), shape);
        }
        Ok(OpGraph {
            nodes,
            inputs,
            outputs,
            shapes,
            order,
        })
    }

    /// Rebuilds after a local rewrite that keeps every surviving node's
    /// shape. `replaced` maps the rewritten root to its new node.
    pub(crate) fn with_rewrite(&self, replacement: Node, removed: &[String]) -> OpGraph {
        let nodes: Vec<Node> = self
            .nodes
            .iter()
            .filter(|n| !removed.contains(&n.id))
            .map(|n| {
                if n.id == replacement.id {
                    replacement.clone()
                } else {
                    n.clone()
                }
            })
            .collect();
        let mut shapes = self.shapes.clone();
        for r in removed {
            shapes.remove(r);
        }
        let order = topo_order(&nodes).expect("removing nodes keeps the graph acyclic");
        OpGraph {
            nodes,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            shapes,
            order,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn shape(&self, id: &str) -> Option<&[usize]> {
        self.shapes.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in a deterministic topological order.
    pub fn topological(&self) -> impl Iterator<Item = &Node> {
        self.order.iter().map(|&i| &self.nodes[i])
    }

    /// Consumers of every node, with multiplicity.
    pub fn consumers(&self) -> HashMap<&str, Vec<&str>> {
        let mut map: HashMap<&str, Vec<&str>> = self.nodes.iter().map(|n| (n.id.as_str(), Vec::new())).collect();
        for n in &self.nodes {
            for op in &n.operands {
                map.get_mut(op.as_str()).expect("validated").push(&n.id);
            }
        }
        map
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Order-insensitive structural equality: same nodes (by id, kind,
    /// attributes and operand lists), inputs and outputs.
    pub fn structurally_equal(&self, other: &OpGraph) -> bool {
        let key = |g: &OpGraph| {
            let mut v: Vec<(String, OpKind, String, Vec<String>)> = g
                .nodes
                .iter()
                .map(|n| {
                    (
                        n.id.clone(),
                        n.kind,
                        Value::Object(n.attrs.clone()).to_string(),
                        n.operands.clone(),
                    )
                })
                .collect();
            v.sort();
            v
        };
        self.inputs == other.inputs && self.outputs == other.outputs && key(self) == key(other)
    }

    pub fn from_json(text: &str) -> Result<OpGraph> {
        let doc: GraphDoc = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut operands: HashMap<&str, Vec<String>> = HashMap::new();
        let mut out_shapes: HashMap<&str, &[usize]> = HashMap::new();
        for e in &doc.edges {
            operands.entry(e.to.as_str()).or_default().push(e.from.clone());
            out_shapes.entry(e.from.as_str()).or_insert(&e.shape);
        }
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for nd in &doc.nodes {
            let mut attrs = nd.attrs.clone();
            if nd.kind == OpKind::Input && !attrs.contains_key("shape") {
                if let Some(s) = out_shapes.get(nd.id.as_str()) {
                    attrs.insert("shape".into(), Value::from(s.to_vec()));
                }
            }
            nodes.push(Node {
                id: nd.id.clone(),
                kind: nd.kind,
                attrs,
                operands: operands.remove(nd.id.as_str()).unwrap_or_default(),
            });
        }
        if let Some(dangling) = operands.keys().next() {
            return Err(Error::InvalidGraph(format!("edge points at unknown node `{dangling}`")));
        }
        let graph = OpGraph::new(nodes, doc.inputs, doc.outputs)?;
        for e in &doc.edges {
            let inferred = graph
                .shape(&e.from)
                .ok_or_else(|| Error::InvalidGraph(format!("edge from unknown node `{}`", e.from)))?;
            if inferred != e.shape.as_slice() {
                return Err(Error::InvalidGraph(format!(
                    "edge {} -> {} declares shape {:?}, but `{}` produces {:?}",
                    e.from, e.to, e.shape, e.from, inferred
                )));
            }
        }
        Ok(graph)
    }

    fn to_doc(&self) -> GraphDoc {
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeDoc {
                id: n.id.clone(),
                kind: n.kind,
                attrs: n.attrs.clone(),
            })
            .collect();
        let edges = self
            .nodes
            .iter()
            .flat_map(|n| {
                n.operands.iter().map(move |op| EdgeDoc {
                    from: op.clone(),
                    to: n.id.clone(),
                    shape: self.shapes[op].clone(),
                })
            })
            .collect();
        GraphDoc {
            nodes,
            edges,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        }
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(self.to_doc()).expect("graph documents serialize")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("graph documents serialize")
    }

    /// Histogram of node kinds.
    pub fn kind_counts(&self) -> BTreeMap<OpKind, usize> {
        let mut map = BTreeMap::new();
        for n in &self.nodes {
            *map.entry(n.kind).or_insert(0) += 1;
        }
        map
    }
}

fn check_boundary(
    nodes: &[Node],
    by_id: &HashMap<&str, &Node>,
    listed: &[String],
    kind: OpKind,
    what: &str,
) -> Result<()> {
    let mut seen = HashSet::new();
    for id in listed {
        match by_id.get(id.as_str()) {
            Some(n) if n.kind == kind => {}
            Some(n) => return Err(Error::InvalidGraph(format!("graph {what} `{id}` is a {} node", n.kind))),
            None => return Err(Error::InvalidGraph(format!("graph {what} `{id}` does not exist"))),
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidGraph(format!("graph {what} `{id}` listed twice")));
        }
    }
    if let Some(n) = nodes.iter().find(|n| n.kind == kind && !seen.contains(n.id.as_str())) {
        return Err(Error::InvalidGraph(format!(
            "{what} node `{}` is not declared in the graph's {what}s",
            n.id
        )));
    }
    Ok(())
}

/// Kahn's algorithm, always taking the earliest ready node in list order.
fn topo_order(nodes: &[Node]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut pending: Vec<usize> = nodes.iter().map(|n| n.operands.len()).collect();
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for op in &n.operands {
            users[index[op.as_str()]].push(i);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..nodes.len()).filter(|&i| pending[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            pending[u] -= 1;
            if pending[u] == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck: Vec<&str> = (0..nodes.len())
            .filter(|&i| pending[i] > 0)
            .map(|i| nodes[i].id.as_str())
            .collect();
        return Err(Error::InvalidGraph(format!("cycle through nodes {stuck:?}")));
    }
    Ok(order)
}

/// Incremental graph construction for fixtures and tests.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

#[macro_export]
#[doc(hidden)]
macro_rules! attrs {
    () => { $crate::fusion_planner::Attrs::new() };
    ($($k:literal : $v:expr),+ $(,)?) => {{
        let mut m = $crate::fusion_planner::Attrs::new();
        $( m.insert($k.to_string(), $crate::__json::json!($v)); )+
        m
    }};
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph input; `role` is `"activation"` or `"weight"`.
    pub fn input(&mut self, id: &str, shape: &[usize], role: &str) -> String {
        let mut attrs = Attrs::new();
        attrs.insert("shape".into(), Value::from(shape.to_vec()));
        attrs.insert("role".into(), Value::from(role));
        self.inputs.push(id.to_string());
        self.push(id, OpKind::Input, attrs, &[])
    }

    /// Activation input whose test values are drawn from `[lo, hi)`.
    pub fn input_in_range(&mut self, id: &str, shape: &[usize], lo: f32, hi: f32) -> String {
        let id = self.input(id, shape, "activation");
        let node = self.nodes.last_mut().expect("just pushed");
        node.attrs.insert("range".into(), Value::from(vec![lo, hi]));
        id
    }

    pub fn op(&mut self, id: &str, kind: OpKind, attrs: Attrs, operands: &[&str]) -> String {
        self.push(id, kind, attrs, operands)
    }

    pub fn output(&mut self, id: &str, operand: &str) -> String {
        self.outputs.push(id.to_string());
        self.push(id, OpKind::Output, Attrs::new(), &[operand])
    }

    fn push(&mut self, id: &str, kind: OpKind, attrs: Attrs, operands: &[&str]) -> String {
        self.nodes.push(Node {
            id: id.to_string(),
            kind,
            attrs,
            operands: operands.iter().map(|s| s.to_string()).collect(),
        });
        id.to_string()
    }

    pub fn build(self) -> Result<OpGraph> {
        OpGraph::new(self.nodes, self.inputs, self.outputs)
    }
}
