//! Structural rewrite passes.
//!
//! Each pass repeatedly finds one exact match, replaces it, and stops when
//! nothing matches, so applying a pass twice is the same as applying it
//! once. A match is rejected if any value it would delete is read from
//! outside the pattern. The fused node takes over the id of the pattern's
//! final node, so downstream operands need no renaming.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;
use serde_json::Value;

use super::graph::{Attrs, Node, OpGraph, OpKind};
use crate::cost_model;
use crate::error::{Error, Result};
use crate::reference_ops::DEFAULT_EPSILON;
use crate::winograd::{self, ConvSpec};

/// Head dimensions that receive tiled attention unless overridden.
pub const DEFAULT_FLASH_DIMS: [usize; 1] = [40];

struct Rewrite {
    node: Node,
    removed: Vec<String>,
}

type Consumers<'a> = HashMap<&'a str, Vec<&'a str>>;

fn fixpoint(g: &OpGraph, find: impl Fn(&OpGraph, &Consumers) -> Option<Rewrite>) -> OpGraph {
    let mut g = g.clone();
    loop {
        let rewrite = {
            let consumers = g.consumers();
            find(&g, &consumers)
        };
        match rewrite {
            Some(r) => g = g.with_rewrite(r.node, &r.removed),
            None => return g,
        }
    }
}

/// True when `id`'s consumers are exactly `expected` as a multiset.
fn only_used_by(c: &Consumers, id: &str, expected: &[&str]) -> bool {
    let mut got = c[id].clone();
    let mut want = expected.to_vec();
    got.sort_unstable();
    want.sort_unstable();
    got == want
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * b.abs().max(1.0)
}

fn scalar_op<'g>(g: &'g OpGraph, id: &str, kind: OpKind, value: f64) -> Option<&'g Node> {
    let n = g.node(id)?;
    let ok = n.kind == kind
        && n.operands.len() == 1
        && n.attrs
            .get("scalar")
            .and_then(Value::as_f64)
            .is_some_and(|s| close(s, value));
    ok.then_some(n)
}

fn fused(id: &str, kind: OpKind, attrs: Attrs, operands: &[&str]) -> Node {
    Node {
        id: id.to_string(),
        kind,
        attrs,
        operands: operands.iter().map(|s| s.to_string()).collect(),
    }
}

fn axes_are(n: &Node, axes: &[usize]) -> bool {
    n.attr_usize_list("axes").is_ok_and(|a| a == axes)
}

fn match_group_norm(g: &OpGraph, c: &Consumers, norm: &Node) -> Option<Rewrite> {
    if norm.kind != OpKind::Normalize {
        return None;
    }
    let [r, mu, var] = norm.operands.as_slice() else {
        return None;
    };
    let (reshape, mean, variance) = (g.node(r)?, g.node(mu)?, g.node(var)?);
    if reshape.kind != OpKind::Reshape || mean.kind != OpKind::Mean || variance.kind != OpKind::Variance {
        return None;
    }
    if mean.operands != [r.clone()] || variance.operands != [r.clone(), mu.clone()] {
        return None;
    }
    if !axes_are(mean, &[1, 3]) || !axes_are(variance, &[1, 3]) {
        return None;
    }
    let x = reshape.operands.first()?;
    let xs = g.shape(x)?;
    let rs = g.shape(r)?;
    let &[n, h, w, ch] = xs else { return None };
    let &[rn, rhw, groups, cpg] = rs else { return None };
    if rn != n || rhw != h * w || groups * cpg != ch || g.shape(&norm.id)? != xs {
        return None;
    }
    let internal_ok = only_used_by(c, r, &[mu, var, &norm.id])
        && only_used_by(c, mu, &[var, &norm.id])
        && only_used_by(c, var, &[&norm.id]);
    if !internal_ok {
        return None;
    }
    let eps = norm.attr_f64_or("epsilon", DEFAULT_EPSILON).ok()?;
    let mut attrs = Attrs::new();
    attrs.insert("num_groups".into(), groups.into());
    attrs.insert("epsilon".into(), eps.into());
    Some(Rewrite {
        node: fused(&norm.id, OpKind::GroupNormFused, attrs, &[x]),
        removed: vec![r.clone(), mu.clone(), var.clone()],
    })
}

/// `reshape → mean → variance → normalize` chains with group norm
/// structure become `group_norm_fused`.
pub fn fuse_group_norm(g: &OpGraph) -> OpGraph {
    fixpoint(g, |g, c| g.nodes().iter().find_map(|n| match_group_norm(g, c, n)))
}

/// `0.5 · x · (1 + erf(x / √2))` with the product in either order.
fn match_plain_gelu(g: &OpGraph, c: &Consumers, root: &Node) -> Option<Rewrite> {
    let half = scalar_op(g, &root.id, OpKind::Mul, 0.5)?;
    let prod = g.node(&half.operands[0])?;
    if prod.kind != OpKind::Mul || prod.operands.len() != 2 {
        return None;
    }
    for (x, a1) in [(0, 1), (1, 0)] {
        let (x, a1) = (&prod.operands[x], &prod.operands[a1]);
        let Some(plus) = scalar_op(g, a1, OpKind::Add, 1.0) else {
            continue;
        };
        let Some(erf) = g.node(&plus.operands[0]).filter(|n| n.kind == OpKind::Erf) else {
            continue;
        };
        let Some(scaled) = scalar_op(g, &erf.operands[0], OpKind::Mul, std::f64::consts::FRAC_1_SQRT_2) else {
            continue;
        };
        if &scaled.operands[0] != x {
            continue;
        }
        let internal_ok = only_used_by(c, &scaled.id, &[&erf.id])
            && only_used_by(c, &erf.id, &[&plus.id])
            && only_used_by(c, &plus.id, &[&prod.id])
            && only_used_by(c, &prod.id, &[&root.id]);
        if !internal_ok {
            continue;
        }
        let mut attrs = Attrs::new();
        attrs.insert("gated".into(), false.into());
        return Some(Rewrite {
            node: fused(&root.id, OpKind::GeluFused, attrs, &[x]),
            removed: vec![scaled.id.clone(), erf.id.clone(), plus.id.clone(), prod.id.clone()],
        });
    }
    None
}

fn split_of<'g>(g: &'g OpGraph, id: &str, index: usize) -> Option<&'g Node> {
    let n = g.node(id)?;
    let ok =
        n.kind == OpKind::Split && n.attr_usize("parts").ok() == Some(2) && n.attr_usize("index").ok() == Some(index);
    ok.then_some(n)
}

/// `split(h)[0] · gelu(split(h)[1])`, after the plain GELU is fused.
fn match_gated_gelu(g: &OpGraph, c: &Consumers, root: &Node) -> Option<Rewrite> {
    if root.kind != OpKind::Mul || root.operands.len() != 2 {
        return None;
    }
    for (a, f) in [(0, 1), (1, 0)] {
        let (a, f) = (&root.operands[a], &root.operands[f]);
        let Some(gelu) = g.node(f) else { continue };
        if gelu.kind != OpKind::GeluFused || gelu.attr_bool_or("gated", false).ok() != Some(false) {
            continue;
        }
        let (Some(value), Some(gate)) = (split_of(g, a, 0), split_of(g, &gelu.operands[0], 1)) else {
            continue;
        };
        if value.operands != gate.operands {
            continue;
        }
        let internal_ok =
            only_used_by(c, a, &[&root.id]) && only_used_by(c, &gate.id, &[f]) && only_used_by(c, f, &[&root.id]);
        if !internal_ok {
            continue;
        }
        let mut attrs = Attrs::new();
        attrs.insert("gated".into(), true.into());
        return Some(Rewrite {
            node: fused(&root.id, OpKind::GeluFused, attrs, &[&value.operands[0]]),
            removed: vec![a.clone(), gate.id.clone(), f.clone()],
        });
    }
    None
}

/// Erf-based GELU subgraphs become `gelu_fused`, and a following
/// split-and-multiply gate folds into a gated `gelu_fused`.
pub fn fuse_gelu(g: &OpGraph) -> OpGraph {
    let g = fixpoint(g, |g, c| g.nodes().iter().find_map(|n| match_plain_gelu(g, c, n)));
    fixpoint(&g, |g, c| g.nodes().iter().find_map(|n| match_gated_gelu(g, c, n)))
}

fn match_attention(g: &OpGraph, c: &Consumers, root: &Node, flash_dims: &BTreeSet<usize>) -> Option<Rewrite> {
    if root.kind != OpKind::Matmul || root.attr_bool_or("transpose_b", false).ok()? {
        return None;
    }
    if !close(root.attr_f64_or("scale", 1.0).ok()?, 1.0) {
        return None;
    }
    let [p, v] = root.operands.as_slice() else { return None };
    let softmax = g.node(p).filter(|n| n.kind == OpKind::Softmax)?;
    let logits = g.node(&softmax.operands[0]).filter(|n| n.kind == OpKind::Matmul)?;
    if !logits.attr_bool_or("transpose_b", false).ok()? {
        return None;
    }
    let [q, k] = logits.operands.as_slice() else {
        return None;
    };
    let (qs, ks, vs) = (g.shape(q)?, g.shape(k)?, g.shape(v)?);
    if qs.len() != 2 || ks.len() != 2 || vs != ks || qs[1] != ks[1] {
        return None;
    }
    let d = qs[1];
    if !close(logits.attr_f64_or("scale", 1.0).ok()?, 1.0 / (d as f64).sqrt()) {
        return None;
    }
    if !(only_used_by(c, &logits.id, &[p]) && only_used_by(c, p, &[&root.id])) {
        return None;
    }
    let kind = if flash_dims.contains(&d) {
        OpKind::AttentionTiled
    } else {
        OpKind::AttentionPartiallyFused
    };
    let mut attrs = Attrs::new();
    attrs.insert("d".into(), d.into());
    Some(Rewrite {
        node: fused(&root.id, kind, attrs, &[q, k, v]),
        removed: vec![logits.id.clone(), p.clone()],
    })
}

/// `matmul(q, kᵀ, 1/√d) → softmax → matmul(·, v)` becomes tiled attention
/// when `d` is in `flash_dims`, otherwise partially fused attention.
pub fn rewrite_attention(g: &OpGraph, flash_dims: &BTreeSet<usize>) -> OpGraph {
    fixpoint(g, |g, c| {
        g.nodes().iter().find_map(|n| match_attention(g, c, n, flash_dims))
    })
}

/// Upgrades partially fused attention nodes whose `d` is in `flash_dims`.
pub fn select_flash_attention(g: &OpGraph, flash_dims: &BTreeSet<usize>) -> OpGraph {
    fixpoint(g, |g, _| {
        g.nodes().iter().find_map(|n| {
            let d = n.attr_usize("d").ok()?;
            (n.kind == OpKind::AttentionPartiallyFused && flash_dims.contains(&d)).then(|| Rewrite {
                node: Node {
                    kind: OpKind::AttentionTiled,
                    ..n.clone()
                },
                removed: Vec::new(),
            })
        })
    })
}

/// Profitable `conv3x3` nodes become `conv3x3_winograd` with 4×4 tiles.
pub fn rewrite_winograd(g: &OpGraph) -> OpGraph {
    let plan = winograd::make_plan(4).expect("m = 4 is supported");
    fixpoint(g, |g, _| {
        g.nodes().iter().find_map(|n| {
            if n.kind != OpKind::Conv3x3 {
                return None;
            }
            let (xs, ws) = (g.shape(&n.operands[0])?, g.shape(&n.operands[1])?);
            let pad = n.attr_usize_or("padding", 1).ok()?;
            let spec = ConvSpec::new(xs[3], ws[3], xs[1], xs[2], pad).ok()?;
            if !winograd::is_profitable(&spec, &plan) {
                return None;
            }
            let mut attrs = n.attrs.clone();
            attrs.insert("padding".into(), pad.into());
            attrs.insert("tile".into(), 4.into());
            Some(Rewrite {
                node: Node {
                    kind: OpKind::Conv3x3Winograd,
                    attrs,
                    ..n.clone()
                },
                removed: Vec::new(),
            })
        })
    })
}

/// Pipeline stages in their cumulative enable order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pass {
    /// Attention patterns become partially fused attention.
    Softmax,
    /// Group norm and GELU fusion.
    GroupNormGelu,
    /// Tiled attention for the configured head dimensions.
    Flash,
    Winograd,
}

impl Pass {
    pub const ALL: [Pass; 4] = [Pass::Softmax, Pass::GroupNormGelu, Pass::Flash, Pass::Winograd];

    pub fn name(self) -> &'static str {
        match self {
            Pass::Softmax => "softmax",
            Pass::GroupNormGelu => "gn_gelu",
            Pass::Flash => "flash",
            Pass::Winograd => "winograd",
        }
    }

    pub fn parse(name: &str) -> Result<Pass> {
        Pass::ALL.into_iter().find(|p| p.name() == name).ok_or_else(|| {
            let known: Vec<_> = Pass::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown pass `{name}` (known: {})", known.join(", ")))
        })
    }

    pub fn apply(self, g: &OpGraph, flash_dims: &BTreeSet<usize>) -> OpGraph {
        match self {
            Pass::Softmax => rewrite_attention(g, &BTreeSet::new()),
            Pass::GroupNormGelu => fuse_gelu(&fuse_group_norm(g)),
            Pass::Flash => select_flash_attention(&rewrite_attention(g, flash_dims), flash_dims),
            Pass::Winograd => rewrite_winograd(g),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PassReport {
    pub pass_name: String,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub intermediate_bytes_before: u64,
    pub intermediate_bytes_after: u64,
    pub weight_bytes_before: u64,
    pub weight_bytes_after: u64,
}

/// Applies the named passes cumulatively. Names may be given in any order
/// and are run in [`Pass::ALL`] order, each at most once.
pub fn run_pipeline<S: AsRef<str>>(
    g: &OpGraph,
    passes: &[S],
    flash_dims: &BTreeSet<usize>,
) -> Result<(OpGraph, Vec<PassReport>)> {
    let selected: BTreeSet<Pass> = passes.iter().map(|p| Pass::parse(p.as_ref())).collect::<Result<_>>()?;
    let mut graph = g.clone();
    let mut before = cost_model::plan_buffer_reuse(&graph)?;
    let mut reports = Vec::with_capacity(selected.len());
    for pass in selected {
        let next = pass.apply(&graph, flash_dims);
        let after = cost_model::plan_buffer_reuse(&next)?;
        reports.push(PassReport {
            pass_name: pass.name().to_string(),
            nodes_before: graph.len(),
            nodes_after: next.len(),
            intermediate_bytes_before: before.intermediate_bytes,
            intermediate_bytes_after: after.intermediate_bytes,
            weight_bytes_before: before.weight_bytes,
            weight_bytes_after: after.weight_bytes,
        });
        graph = next;
        before = after;
    }
    Ok((graph, reports))
}

pub fn default_flash_dims() -> BTreeSet<usize> {
    DEFAULT_FLASH_DIMS.into_iter().collect()
}
