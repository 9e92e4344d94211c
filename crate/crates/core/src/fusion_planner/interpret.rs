//! Reference interpreter used as the semantic oracle for every pass.

use std::collections::{BTreeMap, HashMap};

use super::graph::{Node, OpGraph, OpKind};
use crate::error::{Error, Result};
use crate::fused_ops::{self, TilingConfig};
use crate::reference_ops::{self as ops, GroupNormParams, DEFAULT_EPSILON};
use crate::tensor::Tensor;
use crate::winograd::{self, ConvSpec};

/// Tiling for an attention node: `row_block`, `col_block` and
/// `reduction_block` attributes override the defaults.
pub fn tiling_config(node: &Node) -> Result<TilingConfig> {
    let d = TilingConfig::default();
    TilingConfig::new(
        node.attr_usize_or("row_block", d.row_block)?,
        node.attr_usize_or("col_block", d.col_block)?,
        node.attr_usize_or("reduction_block", d.reduction_block)?,
    )
}

/// Runs `g` on `inputs` (keyed by input node id) and returns the value of
/// every graph output, keyed by output node id.
pub fn interpret(g: &OpGraph, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    for name in inputs.keys() {
        if !g.inputs().contains(name) {
            return Err(Error::Execution {
                node: name.clone(),
                reason: "not a graph input".into(),
            });
        }
    }
    let mut values: HashMap<&str, Tensor> = HashMap::new();
    for node in g.topological() {
        let args: Vec<&Tensor> = node.operands.iter().map(|o| &values[o.as_str()]).collect();
        let out = if node.kind == OpKind::Input {
            let t = inputs.get(&node.id).ok_or_else(|| Error::Execution {
                node: node.id.clone(),
                reason: "no value supplied for graph input".into(),
            })?;
            let expected = g.shape(&node.id).expect("inferred");
            if t.shape() != expected {
                return Err(Error::Execution {
                    node: node.id.clone(),
                    reason: format!("input has shape {:?}, graph expects {expected:?}", t.shape()),
                });
            }
            t.clone()
        } else {
            eval(node, &args).map_err(|e| Error::Execution {
                node: node.id.clone(),
                reason: e.to_string(),
            })?
        };
        values.insert(&node.id, out);
    }
    Ok(g.outputs()
        .iter()
        .map(|id| (id.clone(), values.remove(id.as_str()).expect("outputs are evaluated")))
        .collect())
}

fn eval(node: &Node, a: &[&Tensor]) -> Result<Tensor> {
    let one = || a[0].clone();
    match node.kind {
        OpKind::Input => unreachable!("handled by the caller"),
        OpKind::Output => Ok(one()),
        OpKind::Reshape => a[0].reshape(&node.attr_usize_list("shape")?),
        OpKind::Mean => ops::reduce_mean(a[0], &node.attr_usize_list("axes")?),
        OpKind::Variance => ops::reduce_variance(a[0], a[1], &node.attr_usize_list("axes")?),
        OpKind::Normalize => {
            let eps = node.attr_f64_or("epsilon", DEFAULT_EPSILON)?;
            let y = ops::normalize(a[0], a[1], a[2], eps)?;
            match node.attrs.get("shape") {
                Some(_) => y.reshape(&node.attr_usize_list("shape")?),
                None => Ok(y),
            }
        }
        OpKind::Split => ops::split_last(a[0], node.attr_usize("parts")?, node.attr_usize("index")?),
        OpKind::Erf => ops::erf_tensor(a[0]),
        OpKind::Mul | OpKind::Add => {
            let add = node.kind == OpKind::Add;
            match a {
                [x] => {
                    let s = node.attr_f64("scalar")?;
                    Ok(if add {
                        ops::add_scalar(x, s)
                    } else {
                        ops::mul_scalar(x, s)
                    })
                }
                [x, y] if add => ops::add(x, y),
                [x, y] => ops::mul(x, y),
                _ => Err(Error::Precondition(format!("{} takes 1 or 2 operands", node.kind))),
            }
        }
        OpKind::Matmul => ops::naive_matmul(
            a[0],
            a[1],
            node.attr_bool_or("transpose_b", false)?,
            node.attr_f64_or("scale", 1.0)?,
        ),
        OpKind::Softmax => ops::naive_softmax(a[0]),
        OpKind::GroupNormFused => {
            let c = *a[0].shape().last().expect("rank checked");
            let p = GroupNormParams::new(
                c,
                node.attr_usize("num_groups")?,
                node.attr_f64_or("epsilon", DEFAULT_EPSILON)?,
            )?;
            fused_ops::fused_group_norm(a[0], &p)
        }
        OpKind::GeluFused => {
            if node.attr_bool_or("gated", false)? {
                fused_ops::fused_gated_gelu(a[0])
            } else {
                fused_ops::fused_gelu(a[0])
            }
        }
        OpKind::AttentionPartiallyFused => {
            fused_ops::partially_fused_attention(a[0], a[1], a[2], &tiling_config(node)?)
        }
        OpKind::AttentionTiled => fused_ops::tiled_attention(a[0], a[1], a[2], &tiling_config(node)?),
        OpKind::Conv3x3 => ops::naive_conv3x3(a[0], a[1], node.attr_usize_or("padding", 1)?),
        OpKind::Conv3x3Winograd => {
            let spec = ConvSpec::for_tensors(a[0], a[1], node.attr_usize_or("padding", 1)?)?;
            let plan = winograd::make_plan(node.attr_usize_or("tile", 4)?)?;
            winograd::winograd_conv(a[0], a[1], &spec, &plan)
        }
    }
}
