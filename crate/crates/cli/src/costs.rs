//! `costs`: the Winograd cost table and attention footprint comparison.

use fusekit::cost_model::{
    attention_intermediate_bytes, cost_table_csv, winograd_cost_table, AttentionVariant, COST_TABLE_HEADER,
};
use fusekit::fused_ops::TilingConfig;
use serde::Serialize;
use serde_json::json;

use crate::report::{Report, Table};

/// (N, M) pairs in the footprint comparison.
pub const ATTENTION_SIZES: [(usize, usize); 5] = [(64, 64), (256, 256), (1024, 1024), (4096, 4096), (4096, 77)];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FootprintRow {
    pub n: usize,
    pub m: usize,
    pub naive: u64,
    pub partially_fused: u64,
    pub tiled: u64,
}

pub fn footprints(cfg: &TilingConfig) -> Vec<FootprintRow> {
    ATTENTION_SIZES
        .iter()
        .map(|&(n, m)| FootprintRow {
            n,
            m,
            naive: attention_intermediate_bytes(n, m, AttentionVariant::Naive, cfg),
            partially_fused: attention_intermediate_bytes(n, m, AttentionVariant::PartiallyFused, cfg),
            tiled: attention_intermediate_bytes(n, m, AttentionVariant::Tiled, cfg),
        })
        .collect()
}

pub fn cmd_costs() -> Report {
    let rows = winograd_cost_table();
    let tiling = TilingConfig::default();
    let attention = footprints(&tiling);
    let mut report = Report::new(
        "costs",
        json!({ "winograd": rows, "attention_tiling": tiling, "attention_bytes": attention }),
    );

    // The CSV rendering is the golden table, byte for byte.
    let mut table = Table::new(&COST_TABLE_HEADER);
    let csv = cost_table_csv(&rows);
    for line in csv.lines().skip(1) {
        table.push(line.split(',').map(String::from).collect());
    }
    report.tables.push(("Winograd F(m x m, 3x3) costs".into(), table));

    let mut t = Table::new(&["N", "M", "naive_bytes", "partially_fused_bytes", "tiled_bytes"]);
    for r in &attention {
        t.push(vec![
            r.n.to_string(),
            r.m.to_string(),
            r.naive.to_string(),
            r.partially_fused.to_string(),
            r.tiled.to_string(),
        ]);
    }
    report.tables.push((
        format!(
            "attention intermediates ({}x{} tiles)",
            tiling.row_block, tiling.col_block
        ),
        t,
    ));
    report
}
