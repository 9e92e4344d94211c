//! `plan`: run fusion passes over a graph file and report per-pass memory.

use std::fs;
use std::path::Path;

use fusekit::cost_model::plan_buffer_reuse;
use fusekit::fusion_planner::{run_pipeline, OpGraph};
use serde_json::json;

use crate::config::RunConfig;
use crate::report::{Report, Table};
use crate::CliError;

/// Reads `graph_file`, applies `passes` cumulatively and, when `out` is
/// given, writes the rewritten graph there. The graph is always embedded
/// in the report as well, so an empty pass list echoes the input.
pub fn cmd_plan(graph_file: &Path, passes: &[String], out: Option<&Path>, cfg: &RunConfig) -> Result<Report, CliError> {
    let text = fs::read_to_string(graph_file).map_err(|e| CliError::Io(graph_file.display().to_string(), e))?;
    let graph = OpGraph::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", graph_file.display())))?;
    let (rewritten, reports) = run_pipeline(&graph, passes, &cfg.flash_dims)?;
    let memory = plan_buffer_reuse(&rewritten)?;

    if let Some(path) = out {
        fs::write(path, rewritten.to_json_pretty()).map_err(|e| CliError::Io(path.display().to_string(), e))?;
    }

    let mut report = Report::new(
        "plan",
        json!({
            "passes": reports,
            "final": {
                "nodes": rewritten.len(),
                "kinds": rewritten.kind_counts(),
                "intermediate_bytes": memory.intermediate_bytes,
                "weight_bytes": memory.weight_bytes,
                "total_intermediate_bytes": memory.total_intermediate_bytes,
                "live_peak_bytes": memory.live_peak_bytes,
            },
            "graph": rewritten.to_json_value(),
        }),
    );
    if let Some(path) = out {
        report.informational = json!({ "written_to": path.display().to_string() });
    }

    let mut t = Table::new(&[
        "pass",
        "nodes_before",
        "nodes_after",
        "intermediate_bytes_before",
        "intermediate_bytes_after",
        "weight_bytes_before",
        "weight_bytes_after",
    ]);
    for r in &reports {
        t.push(vec![
            r.pass_name.clone(),
            r.nodes_before.to_string(),
            r.nodes_after.to_string(),
            r.intermediate_bytes_before.to_string(),
            r.intermediate_bytes_after.to_string(),
            r.weight_bytes_before.to_string(),
            r.weight_bytes_after.to_string(),
        ]);
    }
    report.tables.push(("passes".into(), t));
    report.notes.push(format!(
        "final: {} nodes, arena {} B (no reuse {} B), weights {} B",
        rewritten.len(),
        memory.intermediate_bytes,
        memory.total_intermediate_bytes,
        memory.weight_bytes
    ));
    Ok(report)
}
