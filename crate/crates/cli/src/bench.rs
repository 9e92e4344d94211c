//! `bench`: naive vs fused kernel timings (reported, never asserted) and
//! the instrumented pass, byte and multiply counts (asserted).

use std::time::Instant;

use fusekit::cost_model::{attention_intermediate_bytes, AttentionVariant};
use fusekit::fused_ops::{self as fused, TilingConfig};
use fusekit::instrument::{self, Counters};
use fusekit::reference_ops::{self as naive, GroupNormParams};
use fusekit::winograd::{make_plan, winograd_conv, ConvSpec};
use fusekit::{Rng, Tensor};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{RunConfig, SizePreset};
use crate::report::{Report, Table};
use crate::CliError;

/// Head dimension of the attention benchmark.
pub const HEAD_DIM: usize = 40;
/// Sequence length of the always-run footprint check.
pub const FOOTPRINT_TOKENS: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KernelCounts {
    pub size: String,
    pub kernel: String,
    pub variant: String,
    pub shape: String,
    pub input_passes: u64,
    pub intermediate_bytes: u64,
    pub multiplies: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub check: String,
    pub passed: bool,
}

fn median_ms(repeats: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

struct Bench<'a> {
    cfg: &'a RunConfig,
    counts: Vec<KernelCounts>,
    timings: Map<String, Value>,
}

impl Bench<'_> {
    /// Records counters from one instrumented run, then times the kernel.
    fn kernel<T>(
        &mut self,
        size: SizePreset,
        kernel: &str,
        variant: &str,
        shape: String,
        f: impl Fn() -> fusekit::Result<T>,
    ) -> Result<Counters, CliError> {
        let (out, c) = instrument::measure(&f);
        out.map_err(|e| CliError::Failure(format!("{kernel}/{variant}: {e}")))?;
        self.counts.push(KernelCounts {
            size: size.name().into(),
            kernel: kernel.into(),
            variant: variant.into(),
            shape,
            input_passes: c.input_passes,
            intermediate_bytes: c.intermediate_bytes(),
            multiplies: c.multiplies,
        });
        let ms = median_ms(self.cfg.repeats, || {
            let _ = f();
        });
        self.timings
            .insert(format!("{}/{kernel}/{variant}", size.name()), json!(ms));
        Ok(c)
    }
}

fn rand(shape: &[usize], rng: &mut Rng) -> Result<Tensor, CliError> {
    Tensor::random_uniform(shape, rng, -1.0, 1.0).map_err(CliError::from)
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Report, CliError> {
    let mut b = Bench {
        cfg,
        counts: Vec::new(),
        timings: Map::new(),
    };
    let mut checks = Vec::new();
    let mut rng = Rng::new(cfg.seed);
    let tiling = TilingConfig::default();

    for &size in &cfg.sizes {
        let shape = size.group_norm_shape();
        let x = rand(&shape, &mut rng)?;
        let p = GroupNormParams::with_defaults(shape[3])?;
        let label = format!("{shape:?} G={}", p.num_groups);
        let nc = b.kernel(size, "group_norm", "naive", label.clone(), || {
            naive::naive_group_norm(&x, &p)
        })?;
        let fc = b.kernel(size, "group_norm", "fused", label, || fused::fused_group_norm(&x, &p))?;
        checks.push(Check {
            check: format!(
                "{}: fused group norm makes <= 2 input passes ({})",
                size.name(),
                fc.input_passes
            ),
            passed: fc.input_passes <= 2,
        });
        checks.push(Check {
            check: format!(
                "{}: naive group norm makes >= 4 input passes ({})",
                size.name(),
                nc.input_passes
            ),
            passed: nc.input_passes >= 4,
        });

        let flat = x.reshape(&[x.len()])?;
        let label = format!("[{}]", flat.len());
        b.kernel(size, "gelu", "naive", label.clone(), || naive::naive_gelu(&flat))?;
        b.kernel(size, "gelu", "fused", label, || fused::fused_gelu(&flat))?;

        let n = size.attention_tokens();
        let (q, k, v) = (
            rand(&[n, HEAD_DIM], &mut rng)?,
            rand(&[n, HEAD_DIM], &mut rng)?,
            rand(&[n, HEAD_DIM], &mut rng)?,
        );
        let label = format!("N=M={n} d={HEAD_DIM}");
        let na = b.kernel(size, "attention", "naive", label.clone(), || {
            naive::naive_attention(&q, &k, &v)
        })?;
        b.kernel(size, "attention", "partially_fused", label.clone(), || {
            fused::partially_fused_attention(&q, &k, &v, &tiling)
        })?;
        let ta = b.kernel(size, "attention", "tiled", label, || {
            fused::tiled_attention(&q, &k, &v, &tiling)
        })?;
        checks.push(Check {
            check: format!(
                "{}: tiled attention intermediates {} B < naive {} B",
                size.name(),
                ta.intermediate_bytes(),
                na.intermediate_bytes()
            ),
            passed: ta.intermediate_bytes() < na.intermediate_bytes(),
        });

        let (side, ch) = size.conv();
        let xc = rand(&[1, side, side, ch], &mut rng)?;
        let w = rand(&[3, 3, ch, ch], &mut rng)?;
        let spec = ConvSpec::for_tensors(&xc, &w, 1)?;
        let label = format!("[1, {side}, {side}, {ch}] -> {ch}");
        b.kernel(size, "conv3x3", "direct", label.clone(), || {
            naive::naive_conv3x3(&xc, &w, 1)
        })?;
        for m in [2, 4] {
            let plan = make_plan(m)?;
            b.kernel(size, "conv3x3", &format!("winograd_m{m}"), label.clone(), || {
                winograd_conv(&xc, &w, &spec, &plan)
            })?;
        }
    }

    // The footprint claim at N = M = 512 is checked whatever the presets.
    let n = FOOTPRINT_TOKENS;
    let (q, k, v) = (
        rand(&[n, HEAD_DIM], &mut rng)?,
        rand(&[n, HEAD_DIM], &mut rng)?,
        rand(&[n, HEAD_DIM], &mut rng)?,
    );
    let (_, nc) = instrument::measure(|| naive::naive_attention(&q, &k, &v));
    let (_, tc) = instrument::measure(|| fused::tiled_attention(&q, &k, &v, &tiling));
    let modeled = attention_intermediate_bytes(n, n, AttentionVariant::Tiled, &tiling);
    checks.push(Check {
        check: format!(
            "N=M={n}: tiled attention intermediates {} B (modeled {modeled} B) < naive {} B",
            tc.intermediate_bytes(),
            nc.intermediate_bytes()
        ),
        passed: tc.intermediate_bytes() < nc.intermediate_bytes() && tc.intermediate_bytes() == modeled,
    });

    let passed = checks.iter().all(|c| c.passed);
    let mut report = Report::new(
        "bench",
        json!({ "seed": cfg.seed, "kernels": b.counts, "checks": checks }),
    );
    report.passed = passed;
    report.informational = json!({ "median_ms": b.timings, "repeats": cfg.repeats, "threads": cfg.threads });

    let mut t = Table::new(&[
        "size",
        "kernel",
        "variant",
        "shape",
        "input_passes",
        "intermediate_bytes",
        "multiplies",
        "median_ms",
    ]);
    for c in &b.counts {
        let ms = &b.timings[&format!("{}/{}/{}", c.size, c.kernel, c.variant)];
        t.push(vec![
            c.size.clone(),
            c.kernel.clone(),
            c.variant.clone(),
            c.shape.clone(),
            c.input_passes.to_string(),
            c.intermediate_bytes.to_string(),
            c.multiplies.to_string(),
            format!("{:.3}", ms.as_f64().unwrap_or(0.0)),
        ]);
    }
    report.tables.push(("kernels (median_ms is informational)".into(), t));
    for c in &checks {
        report
            .notes
            .push(format!("{} {}", if c.passed { "ok  " } else { "FAIL" }, c.check));
    }
    Ok(report)
}
