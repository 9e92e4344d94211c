//! Closed-form cost figures: Winograd multiply savings and memory
//! multipliers, attention intermediate footprints, and a lifetime-based
//! buffer-reuse planner over operator graphs.
//!
//! Byte counts model an `f32` device kernel regardless of the precision
//! the host implementation uses internally.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fused_ops::TilingConfig;
use crate::fusion_planner::{tiling_config, Node, OpGraph, OpKind};
use crate::winograd::KERNEL;

const F32: u64 = 4;

pub const COST_TABLE_TILES: [usize; 4] = [2, 4, 6, 8];
pub const COST_TABLE_HEADER: [&str; 4] = ["tile", "flops_saving", "tensor_mult", "weight_mult"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinogradCostRow {
    /// Output tile side `m` of F(m×m, 3×3).
    pub tile: usize,
    /// Direct-conv multiplies over transformed-domain multiplies.
    pub flops_saving: f64,
    /// Transformed activation size over the original.
    pub tensor_mult: f64,
    /// Transformed filter size over the original.
    pub weight_mult: f64,
}

pub fn winograd_costs(m: usize) -> Result<WinogradCostRow> {
    if !COST_TABLE_TILES.contains(&m) {
        return Err(Error::UnsupportedTile(m));
    }
    let alpha2 = ((m + KERNEL - 1) * (m + KERNEL - 1)) as f64;
    let m2 = (m * m) as f64;
    let r2 = (KERNEL * KERNEL) as f64;
    Ok(WinogradCostRow {
        tile: m,
        flops_saving: r2 * m2 / alpha2,
        tensor_mult: alpha2 / m2,
        weight_mult: alpha2 / r2,
    })
}

pub fn winograd_cost_table() -> Vec<WinogradCostRow> {
    COST_TABLE_TILES
        .iter()
        .map(|&m| winograd_costs(m).expect("table tiles are supported"))
        .collect()
}

/// CSV with two-decimal cells, e.g. `4x4,4.00,2.25,4.00`.
pub fn cost_table_csv(rows: &[WinogradCostRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COST_TABLE_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            format!("{0}x{0}", r.tile),
            format!("{:.2}", r.flops_saving),
            format!("{:.2}", r.tensor_mult),
            format!("{:.2}", r.weight_mult),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

/// Inverse of [`cost_table_csv`]; values come back at the printed precision.
pub fn parse_cost_table_csv(text: &str) -> Result<Vec<WinogradCostRow>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(COST_TABLE_HEADER) {
        return Err(Error::Parse(format!("unexpected cost table header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let tile = rec[0]
                .split_once('x')
                .filter(|(a, b)| a == b)
                .and_then(|(a, _)| a.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad tile label `{}`", &rec[0])))?;
            Ok(WinogradCostRow {
                tile,
                flops_saving: num(&rec[1])?,
                tensor_mult: num(&rec[2])?,
                weight_mult: num(&rec[3])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Naive,
    PartiallyFused,
    Tiled,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [
        AttentionVariant::Naive,
        AttentionVariant::PartiallyFused,
        AttentionVariant::Tiled,
    ];
}

/// Intermediate bytes of one attention call with `n` queries and `m` keys.
/// The output accumulator of the tiled kernel is the result, not an
/// intermediate, and is excluded.
pub fn attention_intermediate_bytes(n: usize, m: usize, variant: AttentionVariant, cfg: &TilingConfig) -> u64 {
    let (n, m) = (n as u64, m as u64);
    match variant {
        AttentionVariant::Naive => 2 * n * m * F32,
        AttentionVariant::PartiallyFused => n * m * F32 + 2 * n * F32,
        AttentionVariant::Tiled => (cfg.row_block * cfg.col_block) as u64 * F32 + 2 * n * F32,
    }
}

/// Scratch a fused node needs while it runs, beyond its output.
pub fn node_workspace_bytes(g: &OpGraph, node: &Node) -> Result<u64> {
    let shape = |i: usize| g.shape(&node.operands[i]).expect("validated graph");
    Ok(match node.kind {
        OpKind::AttentionPartiallyFused | OpKind::AttentionTiled => {
            let variant = if node.kind == OpKind::AttentionTiled {
                AttentionVariant::Tiled
            } else {
                AttentionVariant::PartiallyFused
            };
            attention_intermediate_bytes(shape(0)[0], shape(1)[0], variant, &tiling_config(node)?)
        }
        OpKind::GroupNormFused => 2 * (shape(0)[0] * node.attr_usize("num_groups")?) as u64 * F32,
        OpKind::Conv3x3Winograd => {
            let m = node.attr_usize_or("tile", 4)?;
            let out = g.shape(&node.id).expect("validated graph");
            let tiles = (out[0] * out[1].div_ceil(m) * out[2].div_ceil(m)) as u64;
            let alpha2 = ((m + KERNEL - 1) * (m + KERNEL - 1)) as u64;
            alpha2 * tiles * (shape(0)[3] + shape(1)[3]) as u64 * F32
        }
        _ => 0,
    })
}

fn tensor_bytes(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64 * F32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BufferAssignment {
    /// Producing node id, or `<id>#workspace` for kernel scratch.
    pub tensor: String,
    /// Byte offset in the shared arena.
    pub offset: u64,
    pub bytes: u64,
    /// First and last execution steps (inclusive) the tensor is live.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    /// Size of the shared arena after reuse.
    pub intermediate_bytes: u64,
    /// Parameter bytes, counting Winograd-transformed filters at their
    /// transformed size.
    pub weight_bytes: u64,
    /// Sum of all intermediate tensor sizes with no reuse.
    pub total_intermediate_bytes: u64,
    /// Largest sum of simultaneously live intermediates; a lower bound
    /// for any pool.
    pub live_peak_bytes: u64,
    /// Intermediate bytes each compute node produces (output plus scratch).
    pub per_op_breakdown: Vec<(String, u64)>,
    pub assignments: Vec<BufferAssignment>,
}

/// Plans buffer sharing over the graph's deterministic topological order.
///
/// Every non-input, non-output node's result is an intermediate tensor
/// live from its producer's step to its last consumer's step; fused nodes
/// add a scratch tensor live during their own step. Tensors are placed in
/// descending size order at the lowest arena offset whose byte range is
/// free of every already placed tensor with an overlapping live interval.
pub fn plan_buffer_reuse(g: &OpGraph) -> Result<MemoryReport> {
    let order: Vec<&Node> = g.topological().collect();
    let step: HashMap<&str, usize> = order.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let consumers = g.consumers();

    let mut tensors: Vec<BufferAssignment> = Vec::new();
    let mut per_op = Vec::new();
    let mut weight_bytes = 0;
    for (t, node) in order.iter().enumerate() {
        let shape = g.shape(&node.id).expect("validated graph");
        match node.kind {
            OpKind::Input => {
                if node.attrs.get("role").and_then(|r| r.as_str()) == Some("weight") {
                    weight_bytes += weight_footprint(g, node, &consumers[node.id.as_str()])?;
                }
                continue;
            }
            OpKind::Output => continue,
            _ => {}
        }
        let own = tensor_bytes(shape);
        let end = consumers[node.id.as_str()].iter().map(|c| step[c]).max().unwrap_or(t);
        tensors.push(BufferAssignment {
            tensor: node.id.clone(),
            offset: 0,
            bytes: own,
            start: t,
            end,
        });
        let ws = node_workspace_bytes(g, node)?;
        if ws > 0 {
            tensors.push(BufferAssignment {
                tensor: format!("{}#workspace", node.id),
                offset: 0,
                bytes: ws,
                start: t,
                end: t,
            });
        }
        per_op.push((node.id.clone(), own + ws));
    }

    let total: u64 = tensors.iter().map(|a| a.bytes).sum();
    let live_peak = (0..order.len())
        .map(|t| {
            tensors
                .iter()
                .filter(|a| a.start <= t && t <= a.end)
                .map(|a| a.bytes)
                .sum()
        })
        .max()
        .unwrap_or(0);

    let mut placing: Vec<usize> = (0..tensors.len()).collect();
    placing.sort_by(|&a, &b| {
        let (x, y) = (&tensors[a], &tensors[b]);
        y.bytes
            .cmp(&x.bytes)
            .then(x.start.cmp(&y.start))
            .then(x.tensor.cmp(&y.tensor))
    });
    let mut placed: Vec<usize> = Vec::with_capacity(tensors.len());
    for i in placing {
        let (s, e, size) = (tensors[i].start, tensors[i].end, tensors[i].bytes);
        let mut busy: Vec<(u64, u64)> = placed
            .iter()
            .map(|&j| &tensors[j])
            .filter(|t| t.start <= e && s <= t.end)
            .map(|t| (t.offset, t.offset + t.bytes))
            .collect();
        busy.sort_unstable();
        let mut offset = 0;
        for (lo, hi) in busy {
            if lo >= offset + size {
                break;
            }
            offset = offset.max(hi);
        }
        tensors[i].offset = offset;
        placed.push(i);
    }
    let arena = tensors.iter().map(|t| t.offset + t.bytes).max().unwrap_or(0);

    Ok(MemoryReport {
        intermediate_bytes: arena,
        weight_bytes,
        total_intermediate_bytes: total,
        live_peak_bytes: live_peak,
        per_op_breakdown: per_op,
        assignments: tensors,
    })
}

fn weight_footprint(g: &OpGraph, weight: &Node, users: &[&str]) -> Result<u64> {
    let shape = g.shape(&weight.id).expect("validated graph");
    let mut bytes = tensor_bytes(shape);
    for u in users {
        let node = g.node(u).expect("validated graph");
        if node.kind == OpKind::Conv3x3Winograd && node.operands.get(1) == Some(&weight.id) {
            let m = node.attr_usize_or("tile", 4)?;
            let alpha2 = ((m + KERNEL - 1) * (m + KERNEL - 1)) as u64;
            bytes = bytes.max(alpha2 * (shape[2] * shape[3]) as u64 * F32);
        }
    }
    Ok(bytes)
}
