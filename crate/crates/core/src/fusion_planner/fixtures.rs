//! Hand-auditable sample graphs, built from the same unfused primitives a
//! model exporter would emit.
//!
//! The JSON copies under `fixtures/` are generated from these builders; a
//! test keeps the two in sync.

use std::collections::BTreeMap;

use super::graph::{GraphBuilder, OpGraph, OpKind};
use crate::attrs;
use crate::error::Result;
use crate::tensor::{Rng, Tensor};

/// Appends the unfused group norm chain on NHWC `x` and returns its id.
pub fn push_group_norm(b: &mut GraphBuilder, prefix: &str, x: &str, shape: [usize; 4], groups: usize) -> String {
    let [n, h, w, c] = shape;
    let r = b.op(
        &format!("{prefix}_reshape"),
        OpKind::Reshape,
        attrs! {"shape": [n, h * w, groups, c / groups]},
        &[x],
    );
    let mean = b.op(&format!("{prefix}_mean"), OpKind::Mean, attrs! {"axes": [1, 3]}, &[&r]);
    let var = b.op(
        &format!("{prefix}_variance"),
        OpKind::Variance,
        attrs! {"axes": [1, 3]},
        &[&r, &mean],
    );
    b.op(
        &format!("{prefix}_normalize"),
        OpKind::Normalize,
        attrs! {"epsilon": 1e-5, "shape": shape},
        &[&r, &mean, &var],
    )
}

/// Appends `0.5 · x · (1 + erf(x/√2))` and returns its id.
pub fn push_gelu(b: &mut GraphBuilder, prefix: &str, x: &str) -> String {
    let s = b.op(
        &format!("{prefix}_scale"),
        OpKind::Mul,
        attrs! {"scalar": std::f64::consts::FRAC_1_SQRT_2},
        &[x],
    );
    let e = b.op(&format!("{prefix}_erf"), OpKind::Erf, attrs! {}, &[&s]);
    let a = b.op(
        &format!("{prefix}_plus_one"),
        OpKind::Add,
        attrs! {"scalar": 1.0},
        &[&e],
    );
    let p = b.op(&format!("{prefix}_product"), OpKind::Mul, attrs! {}, &[x, &a]);
    b.op(&format!("{prefix}_half"), OpKind::Mul, attrs! {"scalar": 0.5}, &[&p])
}

/// Appends `softmax(q kᵀ / √d) v` and returns its id.
pub fn push_attention(b: &mut GraphBuilder, prefix: &str, q: &str, k: &str, v: &str, d: usize) -> String {
    let l = b.op(
        &format!("{prefix}_logits"),
        OpKind::Matmul,
        attrs! {"transpose_b": true, "scale": 1.0 / (d as f64).sqrt()},
        &[q, k],
    );
    let p = b.op(&format!("{prefix}_softmax"), OpKind::Softmax, attrs! {}, &[&l]);
    b.op(&format!("{prefix}_context"), OpKind::Matmul, attrs! {}, &[&p, v])
}

pub const UNET_CHANNELS: usize = 40;
pub const UNET_GROUPS: usize = 8;
pub const UNET_SIDE: usize = 8;

/// Residual block (group norm, GELU, 3×3 conv, twice, plus skip)
/// followed by a pre-normalized single-head self-attention layer with head
/// dimension 40 and a pre-normalized GELU-gated feed-forward layer, each
/// with its own skip connection.
///
/// The input is drawn from [2, 4): every branch starts with a group norm,
/// so the offset survives to the output and keeps it away from zero, where
/// a relative error metric is well conditioned.
pub fn unet_block() -> OpGraph {
    let (c, s) = (UNET_CHANNELS, UNET_SIDE);
    let shape = [1, s, s, c];
    let tokens = [s * s, c];
    let mut b = GraphBuilder::new();
    let x = b.input_in_range("x", &shape, 2.0, 4.0);
    let w1 = b.input("conv1_w", &[3, 3, c, c], "weight");
    let w2 = b.input("conv2_w", &[3, 3, c, c], "weight");
    let wq = b.input("attn_wq", &[c, c], "weight");
    let wk = b.input("attn_wk", &[c, c], "weight");
    let wv = b.input("attn_wv", &[c, c], "weight");
    let w_in = b.input("ff_w_in", &[c, 4 * c], "weight");
    let w_out = b.input("ff_w_out", &[2 * c, c], "weight");

    let n1 = push_group_norm(&mut b, "gn1", &x, shape, UNET_GROUPS);
    let a1 = push_gelu(&mut b, "gelu1", &n1);
    let c1 = b.op("conv1", OpKind::Conv3x3, attrs! {"padding": 1}, &[&a1, &w1]);
    let n2 = push_group_norm(&mut b, "gn2", &c1, shape, UNET_GROUPS);
    let a2 = push_gelu(&mut b, "gelu2", &n2);
    let c2 = b.op("conv2", OpKind::Conv3x3, attrs! {"padding": 1}, &[&a2, &w2]);
    let res = b.op("residual", OpKind::Add, attrs! {}, &[&x, &c2]);

    let n3 = push_group_norm(&mut b, "attn_norm", &res, shape, UNET_GROUPS);
    let t = b.op("attn_tokens", OpKind::Reshape, attrs! {"shape": tokens}, &[&n3]);
    let q = b.op("attn_q", OpKind::Matmul, attrs! {}, &[&t, &wq]);
    let k = b.op("attn_k", OpKind::Matmul, attrs! {}, &[&t, &wk]);
    let v = b.op("attn_v", OpKind::Matmul, attrs! {}, &[&t, &wv]);
    let ctx = push_attention(&mut b, "attn", &q, &k, &v, c);
    let ctx = b.op("attn_unflatten", OpKind::Reshape, attrs! {"shape": shape}, &[&ctx]);
    let r2 = b.op("attn_residual", OpKind::Add, attrs! {}, &[&res, &ctx]);

    let n4 = push_group_norm(&mut b, "ff_norm", &r2, shape, UNET_GROUPS);
    let t = b.op("ff_tokens", OpKind::Reshape, attrs! {"shape": tokens}, &[&n4]);
    let h = b.op("ff_in", OpKind::Matmul, attrs! {}, &[&t, &w_in]);
    let value = b.op("ff_value", OpKind::Split, attrs! {"parts": 2, "index": 0}, &[&h]);
    let gate = b.op("ff_gate", OpKind::Split, attrs! {"parts": 2, "index": 1}, &[&h]);
    let g = push_gelu(&mut b, "ff_gelu", &gate);
    let gated = b.op("ff_gated", OpKind::Mul, attrs! {}, &[&value, &g]);
    let proj = b.op("ff_out", OpKind::Matmul, attrs! {}, &[&gated, &w_out]);
    let proj = b.op("ff_unflatten", OpKind::Reshape, attrs! {"shape": shape}, &[&proj]);
    let y = b.op("ff_residual", OpKind::Add, attrs! {}, &[&r2, &proj]);
    b.output("y", &y);
    b.build().expect("fixture is well formed")
}

/// Two independent attention patterns, with head dimensions 40 and 80.
/// Values are drawn from [0, 1) so outputs, being convex combinations of
/// value rows, stay away from zero.
pub fn attention_block() -> OpGraph {
    let mut b = GraphBuilder::new();
    let q1 = b.input("q1", &[64, 40], "activation");
    let k1 = b.input("k1", &[48, 40], "activation");
    let v1 = b.input_in_range("v1", &[48, 40], 0.0, 1.0);
    let q2 = b.input("q2", &[32, 80], "activation");
    let k2 = b.input("k2", &[40, 80], "activation");
    let v2 = b.input_in_range("v2", &[40, 80], 0.0, 1.0);
    let o1 = push_attention(&mut b, "head40", &q1, &k1, &v1, 40);
    let o2 = push_attention(&mut b, "head80", &q2, &k2, &v2, 80);
    b.output("out40", &o1);
    b.output("out80", &o2);
    b.build().expect("fixture is well formed")
}

/// Seeded inputs for every graph input. An input's `range` attribute
/// wins; otherwise activations are uniform in [-1, 1) and weights uniform
/// in ±1/√fan_in, where fan_in is the product of all but the last axis.
pub fn random_inputs(g: &OpGraph, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    let mut rng = Rng::new(seed);
    let mut out = BTreeMap::new();
    for id in g.inputs() {
        let node = g.node(id).expect("validated");
        let shape = g.shape(id).expect("validated");
        let range = node
            .attrs
            .get("range")
            .and_then(|r| r.as_array())
            .and_then(|r| match r.as_slice() {
                [lo, hi] => Some((lo.as_f64()? as f32, hi.as_f64()? as f32)),
                _ => None,
            });
        let (lo, hi) = match range {
            Some(r) => r,
            None if node.attrs.get("role").and_then(|r| r.as_str()) == Some("weight") => {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                (-bound, bound)
            }
            None => (-1.0, 1.0),
        };
        out.insert(id.clone(), Tensor::random_uniform(shape, &mut rng, lo, hi)?);
    }
    Ok(out)
}
