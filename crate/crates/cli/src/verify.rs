//! `verify`: every fused kernel against its naive oracle over seeded
//! random shapes, with the edge cases each op is most likely to get wrong
//! checked first.

use fusekit::fused_ops::{self as fused, TilingConfig};
use fusekit::reference_ops::{self as naive, GroupNormParams, DEFAULT_EPSILON};
use fusekit::tensor::max_relative_error;
use fusekit::winograd::{make_plan, winograd_conv, ConvSpec};
use fusekit::{Rng, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, DEFAULT_TOLERANCES};
use crate::report::{sci, Report, Table};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpResult {
    pub op: String,
    pub tolerance: f64,
    pub cases: usize,
    /// Labels of the fixed edge cases, which run before the random ones.
    pub edge_cases: Vec<String>,
    pub max_error: f64,
    /// Cases whose L values differed bit-wise across reduction blocks
    /// (only for `softmax_reduce`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_mismatches: Option<usize>,
    pub worst_case: String,
    pub passed: bool,
}

struct Outcome {
    error: f64,
    mismatch: bool,
}

impl From<f64> for Outcome {
    fn from(error: f64) -> Self {
        Outcome { error, mismatch: false }
    }
}

type CaseFn<'a> = Box<dyn Fn(&mut Rng) -> fusekit::Result<Outcome> + 'a>;

struct Case<'a> {
    label: String,
    run: CaseFn<'a>,
}

fn case<'a>(label: String, run: impl Fn(&mut Rng) -> fusekit::Result<Outcome> + 'a) -> Case<'a> {
    Case {
        label,
        run: Box::new(run),
    }
}

fn rand(shape: &[usize], rng: &mut Rng, lo: f32, hi: f32) -> fusekit::Result<Tensor> {
    Tensor::random_uniform(shape, rng, lo, hi)
}

fn group_norm_case<'a>(shape: [usize; 4], groups: usize, lo: f32, hi: f32) -> Case<'a> {
    case(format!("x{shape:?} G={groups}"), move |rng| {
        let x = rand(&shape, rng, lo, hi)?;
        let p = GroupNormParams::new(shape[3], groups, DEFAULT_EPSILON)?;
        Ok(max_relative_error(&fused::fused_group_norm(&x, &p)?, &naive::naive_group_norm(&x, &p)?)?.into())
    })
}

fn group_norm_cases<'a>(rng: &mut Rng, count: usize) -> (Vec<Case<'a>>, usize) {
    let mut cases = vec![
        group_norm_case([1, 1, 1, 1], 1, -1.0, 1.0),
        group_norm_case([1, 4, 4, 8], 1, -1.0, 1.0),
        group_norm_case([1, 3, 5, 1], 1, -2.0, 2.0),
        group_norm_case([2, 1, 1, 6], 6, -1.0, 1.0),
        group_norm_case([1, 8, 8, 64], 32, 99.0, 101.0),
    ];
    let edge = cases.len();
    while cases.len() < count {
        let groups = *rng.choose(&[1, 2, 4, 8, 32]);
        let cpg = rng.range(1, if groups == 32 { 2 } else { 8 });
        let shape = [rng.range(1, 2), rng.range(1, 12), rng.range(1, 12), groups * cpg];
        let scale = *rng.choose(&[0.01f32, 1.0, 30.0]);
        let offset = rng.uniform_f32(-5.0, 5.0);
        cases.push(group_norm_case(shape, groups, offset - scale, offset + scale));
    }
    (cases, edge)
}

fn gelu_case<'a>(len: usize, bound: f32, perturb: f64) -> Case<'a> {
    case(format!("x[{len}] in ±{bound}"), move |rng| {
        let x = rand(&[len], rng, -bound, bound)?;
        let y = fused::fused_gelu(&x)?;
        let y = if perturb != 0.0 {
            naive::mul_scalar(&y, 1.0 + perturb)
        } else {
            y
        };
        Ok(max_relative_error(&y, &naive::naive_gelu(&x)?)?.into())
    })
}

fn gelu_cases<'a>(rng: &mut Rng, count: usize, perturb: f64) -> (Vec<Case<'a>>, usize) {
    let mut cases = vec![
        gelu_case(1, 1.0, perturb),
        gelu_case(7, 1e-4, perturb),
        gelu_case(1000, 10.0, perturb),
        gelu_case(4096, 6.0, perturb),
    ];
    let edge = cases.len();
    while cases.len() < count {
        cases.push(gelu_case(rng.range(1, 4096), rng.uniform_f32(0.1, 10.0), perturb));
    }
    (cases, edge)
}

fn gated_gelu_case<'a>(rows: usize, half: usize) -> Case<'a> {
    case(format!("h[{rows}, {}]", 2 * half), move |rng| {
        let h = rand(&[rows, 2 * half], rng, -4.0, 4.0)?;
        let want = naive::mul(
            &naive::split_last(&h, 2, 0)?,
            &naive::naive_gelu(&naive::split_last(&h, 2, 1)?)?,
        )?;
        Ok(max_relative_error(&fused::fused_gated_gelu(&h)?, &want)?.into())
    })
}

fn gated_gelu_cases<'a>(rng: &mut Rng, count: usize) -> (Vec<Case<'a>>, usize) {
    let mut cases = vec![gated_gelu_case(1, 1), gated_gelu_case(64, 160)];
    let edge = cases.len();
    while cases.len() < count {
        cases.push(gated_gelu_case(rng.range(1, 64), rng.range(1, 96)));
    }
    (cases, edge)
}

fn reduce_case<'a>(n: usize, m: usize, bound: f32) -> Case<'a> {
    case(format!("a[{n}, {m}] in ±{bound}"), move |rng| {
        let a = rand(&[n, m], rng, -bound, bound)?;
        let base = fused::softmax_reduce(&a, &TilingConfig::new(32, 32, m)?)?;
        let mut out = Outcome {
            error: 0.0,
            mismatch: false,
        };
        for block in [1, 2, 7, 64] {
            let r = fused::softmax_reduce(&a, &TilingConfig::new(32, 32, block)?)?;
            out.mismatch |= r.l != base.l;
            for (s, t) in r.s.iter().zip(&base.s) {
                out.error = out.error.max(((*s as f64 - *t as f64) / *t as f64).abs());
            }
        }
        Ok(out)
    })
}

fn reduce_cases<'a>(rng: &mut Rng, count: usize) -> (Vec<Case<'a>>, usize) {
    let mut cases = vec![
        reduce_case(1, 1, 1.0),
        reduce_case(1, 512, 80.0),
        reduce_case(256, 1, 5.0),
        reduce_case(256, 512, 30.0),
    ];
    let edge = cases.len();
    while cases.len() < count {
        cases.push(reduce_case(
            rng.range(1, 256),
            rng.range(1, 512),
            rng.uniform_f32(0.1, 80.0),
        ));
    }
    (cases, edge)
}

#[derive(Clone, Copy)]
enum Attention {
    Partial,
    Tiled,
}

fn attention_case<'a>(kind: Attention, n: usize, m: usize, d: usize, cfg: TilingConfig) -> Case<'a> {
    let label = format!(
        "N={n} M={m} d={d} tiles {}x{} block {}",
        cfg.row_block, cfg.col_block, cfg.reduction_block
    );
    case(label, move |rng| {
        let q = rand(&[n, d], rng, -2.0, 2.0)?;
        let k = rand(&[m, d], rng, -2.0, 2.0)?;
        let v = rand(&[m, d], rng, -1.0, 1.0)?;
        let y = match kind {
            Attention::Partial => fused::partially_fused_attention(&q, &k, &v, &cfg)?,
            Attention::Tiled => fused::tiled_attention(&q, &k, &v, &cfg)?,
        };
        Ok(max_relative_error(&y, &naive::naive_attention(&q, &k, &v)?)?.into())
    })
}

fn attention_cases<'a>(kind: Attention, rng: &mut Rng, count: usize) -> (Vec<Case<'a>>, usize) {
    let def = TilingConfig::default();
    let mut cases = vec![
        attention_case(kind, 1, 1, 1, def),
        attention_case(kind, 1, 64, 40, def),
        attention_case(kind, 64, 1, 40, def),
        attention_case(kind, 1, 1, 80, def),
        attention_case(
            kind,
            33,
            65,
            40,
            TilingConfig {
                row_block: 1,
                col_block: 1,
                reduction_block: 1,
            },
        ),
    ];
    let edge = cases.len();
    while cases.len() < count {
        let d = *rng.choose(&[1, 8, 40, 64, 80]);
        let cfg = TilingConfig::new(rng.range(1, 64), rng.range(1, 64), rng.range(1, 300)).expect("positive blocks");
        cases.push(attention_case(kind, rng.range(1, 160), rng.range(1, 160), d, cfg));
    }
    (cases, edge)
}

fn winograd_case<'a>(m: usize, x: [usize; 4], cout: usize, pad: usize) -> Case<'a> {
    case(format!("x{x:?} Cout={cout} pad={pad}"), move |rng| {
        let xt = rand(&x, rng, -1.0, 1.0)?;
        let w = rand(&[3, 3, x[3], cout], rng, -1.0, 1.0)?;
        let spec = ConvSpec::for_tensors(&xt, &w, pad)?;
        let y = winograd_conv(&xt, &w, &spec, &make_plan(m)?)?;
        Ok(max_relative_error(&y, &naive::naive_conv3x3(&xt, &w, pad)?)?.into())
    })
}

fn winograd_cases<'a>(m: usize, rng: &mut Rng, count: usize) -> (Vec<Case<'a>>, usize) {
    let mut cases = vec![
        winograd_case(m, [1, 8, 8, 1], 4, 1),
        winograd_case(m, [1, 8, 8, 4], 1, 1),
        winograd_case(m, [1, 3, 3, 2], 2, 0),
        winograd_case(m, [1, 1, 1, 3], 2, 1),
        winograd_case(m, [2, 13, 7, 5], 3, 1),
    ];
    let edge = cases.len();
    while cases.len() < count {
        let pad = rng.range(0, 1);
        let lo = if pad == 0 { 3 } else { 1 };
        let x = [rng.range(1, 2), rng.range(lo, 20), rng.range(lo, 20), rng.range(1, 16)];
        cases.push(winograd_case(m, x, rng.range(1, 16), pad));
    }
    (cases, edge)
}

fn run_cases(op: &str, tolerance: f64, cases: Vec<Case>, edge: usize, rng: &mut Rng) -> Result<OpResult, CliError> {
    let mut worst = (0.0f64, String::new());
    let mut mismatches = 0;
    for c in &cases {
        let out = (c.run)(rng).map_err(|e| CliError::Failure(format!("{op} on {}: {e}", c.label)))?;
        if out.mismatch {
            mismatches += 1;
        }
        if out.error > worst.0 || worst.1.is_empty() {
            worst = (out.error, c.label.clone());
        }
    }
    let is_reduce = op == "softmax_reduce";
    Ok(OpResult {
        op: op.to_string(),
        tolerance,
        cases: cases.len(),
        edge_cases: cases[..edge].iter().map(|c| c.label.clone()).collect(),
        max_error: worst.0,
        exact_mismatches: is_reduce.then_some(mismatches),
        worst_case: worst.1,
        passed: worst.0 <= tolerance && mismatches == 0,
    })
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<Report, CliError> {
    let mut results = Vec::new();
    let perturb = cfg.perturb.unwrap_or(0.0);
    for (i, &(op, _)) in DEFAULT_TOLERANCES.iter().enumerate() {
        // Separate streams per op keep each suite's cases stable when
        // another suite changes.
        let mut gen = Rng::new(cfg.seed.wrapping_mul(0x100_0193).wrapping_add(i as u64));
        let mut data = Rng::new(cfg.seed.wrapping_mul(0x100_0193).wrapping_add(1000 + i as u64));
        let n = cfg.cases;
        let (cases, edge) = match op {
            "fused_group_norm" => group_norm_cases(&mut gen, n),
            "fused_gelu" => gelu_cases(&mut gen, n, perturb),
            "fused_gated_gelu" => gated_gelu_cases(&mut gen, n),
            "softmax_reduce" => reduce_cases(&mut gen, n),
            "partially_fused_attention" => attention_cases(Attention::Partial, &mut gen, n),
            "tiled_attention" => attention_cases(Attention::Tiled, &mut gen, n),
            "winograd_m2" => winograd_cases(2, &mut gen, n),
            "winograd_m4" => winograd_cases(4, &mut gen, n),
            _ => unreachable!("DEFAULT_TOLERANCES lists only these ops"),
        };
        results.push(run_cases(op, cfg.tolerance(op), cases, edge, &mut data)?);
    }

    let passed = results.iter().all(|r| r.passed);
    let mut report = Report::new(
        "verify",
        json!({ "seed": cfg.seed, "perturb": cfg.perturb, "ops": results }),
    );
    report.passed = passed;
    let mut t = Table::new(&["op", "tolerance", "cases", "max_error", "worst_case", "passed"]);
    for r in &results {
        t.push(vec![
            r.op.clone(),
            sci(r.tolerance),
            r.cases.to_string(),
            sci(r.max_error),
            r.worst_case.clone(),
            r.passed.to_string(),
        ]);
        if !r.passed {
            report.notes.push(format!(
                "FAIL {}: max error {} exceeds {} ({})",
                r.op,
                sci(r.max_error),
                sci(r.tolerance),
                r.worst_case
            ));
        }
    }
    report.tables.push(("oracle equivalence".into(), t));
    Ok(report)
}

/// Names of the ops that failed, for the exit message.
pub fn failed_ops(report: &Report) -> Vec<String> {
    report.golden["ops"]
        .as_array()
        .into_iter()
        .flatten()
        .filter(|r| r["passed"] == false)
        .filter_map(|r| r["op"].as_str().map(String::from))
        .collect()
}
