//! Per-kind output shape inference and operand checks.

use super::graph::{Node, OpKind};
use crate::error::{Error, Result};

fn fail(node: &Node, reason: impl std::fmt::Display) -> Error {
    Error::InvalidGraph(format!("node `{}` ({}): {reason}", node.id, node.kind))
}

fn arity(node: &Node, ops: &[&[usize]], n: usize) -> Result<()> {
    if ops.len() != n {
        return Err(fail(node, format!("expected {n} operands, got {}", ops.len())));
    }
    Ok(())
}

fn check_axes(node: &Node, rank: usize) -> Result<Vec<usize>> {
    let axes = node.attr_usize_list("axes")?;
    if axes.is_empty() || axes.iter().any(|&a| a >= rank) {
        return Err(fail(node, format!("axes {axes:?} invalid for rank {rank}")));
    }
    Ok(axes)
}

fn keepdims(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

fn positive_shape(node: &Node, key: &str) -> Result<Vec<usize>> {
    let shape = node.attr_usize_list(key)?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(fail(
            node,
            format!("`{key}` {shape:?} must be non-empty with positive dims"),
        ));
    }
    Ok(shape)
}

fn attention(node: &Node, ops: &[&[usize]]) -> Result<Vec<usize>> {
    arity(node, ops, 3)?;
    let (q, k, v) = (ops[0], ops[1], ops[2]);
    if q.len() != 2 || k.len() != 2 || v.len() != 2 || k[1] != q[1] || v != k {
        return Err(fail(
            node,
            format!("need q [N,d], k [M,d], v [M,d]; got {q:?}, {k:?}, {v:?}"),
        ));
    }
    if let Some(d) = node.attrs.get("d") {
        if d.as_u64() != Some(q[1] as u64) {
            return Err(fail(node, format!("attribute d={d} but head dimension is {}", q[1])));
        }
    }
    Ok(vec![q[0], q[1]])
}

fn conv(node: &Node, ops: &[&[usize]]) -> Result<Vec<usize>> {
    arity(node, ops, 2)?;
    let (x, w) = (ops[0], ops[1]);
    if x.len() != 4 || w.len() != 4 || w[0] != 3 || w[1] != 3 || w[2] != x[3] {
        return Err(fail(
            node,
            format!("need x [N,H,W,Cin], w [3,3,Cin,Cout]; got {x:?}, {w:?}"),
        ));
    }
    let pad = node.attr_usize_or("padding", 1)?;
    let (oh, ow) = crate::reference_ops::conv3x3_output_dims(x[1], x[2], pad).map_err(|e| fail(node, e))?;
    Ok(vec![x[0], oh, ow, w[3]])
}

/// Output shape of `node` given its operand shapes.
pub(crate) fn infer(node: &Node, ops: &[&[usize]]) -> Result<Vec<usize>> {
    match node.kind {
        OpKind::Input => {
            arity(node, ops, 0)?;
            positive_shape(node, "shape")
        }
        OpKind::Output | OpKind::Erf | OpKind::Softmax => {
            arity(node, ops, 1)?;
            Ok(ops[0].to_vec())
        }
        OpKind::Reshape => {
            arity(node, ops, 1)?;
            let shape = positive_shape(node, "shape")?;
            if shape.iter().product::<usize>() != ops[0].iter().product::<usize>() {
                return Err(fail(node, format!("cannot reshape {:?} to {shape:?}", ops[0])));
            }
            Ok(shape)
        }
        OpKind::Mean => {
            arity(node, ops, 1)?;
            let axes = check_axes(node, ops[0].len())?;
            Ok(keepdims(ops[0], &axes))
        }
        OpKind::Variance => {
            arity(node, ops, 2)?;
            let axes = check_axes(node, ops[0].len())?;
            let stat = keepdims(ops[0], &axes);
            if ops[1] != stat.as_slice() {
                return Err(fail(node, format!("mean operand {:?}, expected {stat:?}", ops[1])));
            }
            Ok(stat)
        }
        OpKind::Normalize => {
            arity(node, ops, 3)?;
            let (x, m, v) = (ops[0], ops[1], ops[2]);
            let broadcastable = m == v && m.len() == x.len() && m.iter().zip(x).all(|(&s, &d)| s == 1 || s == d);
            if !broadcastable {
                return Err(fail(node, format!("statistics {m:?}, {v:?} do not broadcast to {x:?}")));
            }
            node.attr_f64_or("epsilon", crate::reference_ops::DEFAULT_EPSILON)?;
            match node.attrs.get("shape") {
                None => Ok(x.to_vec()),
                Some(_) => {
                    let shape = positive_shape(node, "shape")?;
                    if shape.iter().product::<usize>() != x.iter().product::<usize>() {
                        return Err(fail(node, format!("cannot reshape {x:?} to {shape:?}")));
                    }
                    Ok(shape)
                }
            }
        }
        OpKind::Split => {
            arity(node, ops, 1)?;
            let parts = node.attr_usize("parts")?;
            let index = node.attr_usize("index")?;
            let last = *ops[0].last().expect("shapes are non-empty");
            if parts == 0 || index >= parts || !last.is_multiple_of(parts) {
                return Err(fail(
                    node,
                    format!("cannot take chunk {index} of {parts} from {:?}", ops[0]),
                ));
            }
            let mut shape = ops[0].to_vec();
            *shape.last_mut().unwrap() = last / parts;
            Ok(shape)
        }
        OpKind::Mul | OpKind::Add => match ops.len() {
            1 => {
                node.attr_f64("scalar")?;
                Ok(ops[0].to_vec())
            }
            2 if ops[0] == ops[1] => {
                if node.attrs.contains_key("scalar") {
                    return Err(fail(node, "binary form takes no `scalar`"));
                }
                Ok(ops[0].to_vec())
            }
            2 => Err(fail(
                node,
                format!("operand shapes differ: {:?} vs {:?}", ops[0], ops[1]),
            )),
            n => Err(fail(node, format!("expected 1 or 2 operands, got {n}"))),
        },
        OpKind::Matmul => {
            arity(node, ops, 2)?;
            let (a, b) = (ops[0], ops[1]);
            let tb = node.attr_bool_or("transpose_b", false)?;
            node.attr_f64_or("scale", 1.0)?;
            if a.len() != 2 || b.len() != 2 {
                return Err(fail(node, format!("matmul needs rank-2 operands, got {a:?}, {b:?}")));
            }
            let (inner, cols) = if tb { (b[1], b[0]) } else { (b[0], b[1]) };
            if a[1] != inner {
                return Err(fail(node, format!("inner dimensions differ: {a:?} x {b:?}")));
            }
            Ok(vec![a[0], cols])
        }
        OpKind::GroupNormFused => {
            arity(node, ops, 1)?;
            let x = ops[0];
            let g = node.attr_usize("num_groups")?;
            node.attr_f64_or("epsilon", crate::reference_ops::DEFAULT_EPSILON)?;
            if x.len() != 4 || g == 0 || !x[3].is_multiple_of(g) {
                return Err(fail(node, format!("{g} groups do not divide channels of {x:?}")));
            }
            Ok(x.to_vec())
        }
        OpKind::GeluFused => {
            arity(node, ops, 1)?;
            let mut shape = ops[0].to_vec();
            if node.attr_bool_or("gated", false)? {
                let last = shape.last_mut().expect("shapes are non-empty");
                if !(*last).is_multiple_of(2) {
                    return Err(fail(node, format!("gated input {:?} has odd last axis", ops[0])));
                }
                *last /= 2;
            }
            Ok(shape)
        }
        OpKind::AttentionPartiallyFused | OpKind::AttentionTiled => attention(node, ops),
        OpKind::Conv3x3 => conv(node, ops),
        OpKind::Conv3x3Winograd => {
            let tile = node.attr_usize_or("tile", 4)?;
            crate::winograd::make_plan(tile).map_err(|e| fail(node, e))?;
            conv(node, ops)
        }
    }
}
