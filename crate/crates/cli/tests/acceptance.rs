//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if
//! any fails. Runs without the libtest harness so the lines always print.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fusekit::cost_model::{attention_intermediate_bytes, parse_cost_table_csv, AttentionVariant};
use fusekit::fused_ops::{partially_fused_attention, softmax_reduce, tiled_attention, TilingConfig};
use fusekit::fusion_planner::fixtures::{self, push_group_norm};
use fusekit::fusion_planner::{
    default_flash_dims, fuse_gelu, fuse_group_norm, interpret, run_pipeline, GraphBuilder, OpGraph, OpKind, Pass,
};
use fusekit::instrument;
use fusekit::reference_ops::{naive_attention, naive_conv3x3};
use fusekit::tensor::max_relative_error;
use fusekit::winograd::{make_plan, winograd_conv, ConvSpec};
use fusekit::{Rng, Tensor};
use fusekit_cli::run;
use serde_json::Value;

type Rewrite<'a> = Box<dyn Fn(&OpGraph) -> OpGraph + 'a>;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand(shape: &[usize], rng: &mut Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::random_uniform(shape, rng, lo, hi).unwrap()
}

/// The published cost table, in column order flops saving, tensor, weight.
const PRINTED: [(&str, [&str; 3]); 4] = [
    ("2x2", ["2.25", "4", "1.77"]),
    ("4x4", ["4", "2.25", "4"]),
    ("6x6", ["5.06", "1.8", "7.12"]),
    ("8x8", ["5.76", "1.56", "11.12"]),
];

/// The printed weight cells for 6x6 and 8x8 round (m+2)^2/9 up; the exact
/// values 7.11 and 11.11 are accepted in their place.
const EXACT_ALTERNATIVES: [(&str, &str); 2] = [("7.12", "7.11"), ("11.12", "11.11")];

fn cell_matches(ours: &str, printed: &str) -> bool {
    let value: f64 = ours.parse().unwrap();
    let decimals = printed.split_once('.').map_or(0, |(_, f)| f.len());
    let at_printed: f64 = format!("{value:.decimals$}").parse().unwrap();
    let close = |target: &str| (at_printed - target.parse::<f64>().unwrap()).abs() <= 0.01 + 1e-9;
    close(printed) || EXACT_ALTERNATIVES.iter().any(|&(p, alt)| p == printed && ours == alt)
}

fn cost_table_reproduction() -> Verdict {
    let o = run(["fusekit", "costs", "--format", "csv"]);
    ensure(o.code == 0, || format!("exit {}: {}", o.code, o.stderr))?;
    ensure(o.stdout == include_str!("../golden/v1/costs.csv"), || {
        "golden CSV differs".into()
    })?;
    let mut lines = o.stdout.lines().skip(1);
    let mut matched = 0;
    for (tile, cells) in PRINTED {
        let line = lines.next().ok_or("missing row")?;
        let ours: Vec<&str> = line.split(',').collect();
        ensure(ours[0] == tile, || format!("row {line} is not {tile}"))?;
        for (o, p) in ours[1..].iter().zip(cells) {
            ensure(cell_matches(o, p), || format!("{tile}: {o} vs printed {p}"))?;
            matched += 1;
        }
    }
    let parsed = parse_cost_table_csv(&o.stdout).map_err(|e| e.to_string())?;
    ensure(parsed.len() == 4, || "CSV does not parse back".into())?;
    Ok(format!("{matched}/12 cells match, golden CSV byte-identical"))
}

fn winograd_multiply_counts() -> Verdict {
    let mut rng = Rng::new(11);
    let mut shown = Vec::new();
    // Unpadded and tile aligned for both m: outputs 16x16 and 8x24.
    for (x, cout) in [([1, 18, 18, 8], 16), ([2, 10, 26, 3], 5)] {
        let xt = rand(&x, &mut rng, -1.0, 1.0);
        let w = rand(&[3, 3, x[3], cout], &mut rng, -1.0, 1.0);
        let (_, direct) = instrument::measure(|| naive_conv3x3(&xt, &w, 0).unwrap());
        let spec = ConvSpec::for_tensors(&xt, &w, 0).map_err(|e| e.to_string())?;
        for (m, num, den) in [(4u64, 4u64, 1u64), (2, 9, 4)] {
            let plan = make_plan(m as usize).unwrap();
            let (_, wino) = instrument::measure(|| winograd_conv(&xt, &w, &spec, &plan).unwrap());
            // direct / wino == num / den, in integers.
            ensure(
                direct.multiplies * den == wino.multiplies * num && wino.multiplies > 0,
                || {
                    format!(
                        "m={m} on {x:?}: direct {} vs winograd {}",
                        direct.multiplies, wino.multiplies
                    )
                },
            )?;
            shown.push(format!("m={m} {}/{}", direct.multiplies, wino.multiplies));
        }
    }
    Ok(format!("ratios exactly 4 and 2.25 ({})", shown.join(", ")))
}

/// The required suites with the tolerance they must meet.
const REQUIRED: [(&str, f64); 6] = [
    ("fused_group_norm", 1e-5),
    ("fused_gelu", 1e-6),
    ("partially_fused_attention", 1e-4),
    ("tiled_attention", 1e-4),
    ("winograd_m2", 1e-4),
    ("winograd_m4", 1e-3),
];

fn oracle_equivalence() -> Verdict {
    let o = run(["fusekit", "verify", "--seed", "0"]);
    ensure(o.code == 0, || format!("exit {}: {}", o.code, o.stderr))?;
    let v: Value = serde_json::from_str(&o.stdout).map_err(|e| e.to_string())?;
    let ops = v["golden"]["ops"].as_array().ok_or("no ops")?;
    let mut worst = Vec::new();
    for (name, tol) in REQUIRED {
        let r = ops
            .iter()
            .find(|r| r["op"] == name)
            .ok_or_else(|| format!("{name} missing"))?;
        let err = r["max_error"].as_f64().unwrap();
        let cases = r["cases"].as_u64().unwrap();
        let edges: Vec<&str> = r["edge_cases"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e.as_str().unwrap())
            .collect();
        ensure(err <= tol, || format!("{name}: {err:e} > {tol:e}"))?;
        ensure(cases >= 50, || format!("{name}: only {cases} cases"))?;
        let has = |pat: &str| edges.iter().any(|e| e.contains(pat));
        let covered = match name {
            "fused_group_norm" => has("G=1") && has("[1, 1, 1, 1]"),
            "partially_fused_attention" | "tiled_attention" => has("N=1 ") && has("M=1 "),
            "winograd_m2" | "winograd_m4" => has(", 1] Cout="),
            _ => !edges.is_empty(),
        };
        ensure(covered, || format!("{name}: edge cases {edges:?}"))?;
        worst.push(format!("{name} {err:.1e}"));
    }
    Ok(worst.join(", "))
}

fn reduction_staging() -> Verdict {
    let mut rng = Rng::new(404);
    let mut shapes = vec![(256, 512), (1, 512), (256, 1)];
    while shapes.len() < 24 {
        shapes.push((rng.range(1, 256), rng.range(1, 512)));
    }
    let mut worst = 0.0f64;
    for &(n, m) in &shapes {
        let bound = rng.uniform_f32(0.5, 60.0);
        let a = rand(&[n, m], &mut rng, -bound, bound);
        let full = softmax_reduce(&a, &TilingConfig::new(32, 32, m).unwrap()).unwrap();
        for block in [1, 2, 7, 64, m] {
            let r = softmax_reduce(&a, &TilingConfig::new(32, 32, block).unwrap()).unwrap();
            ensure(r.l == full.l, || format!("L differs at {n}x{m}, block {block}"))?;
            for (s, t) in r.s.iter().zip(&full.s) {
                worst = worst.max(((*s as f64 - *t as f64) / (*t as f64).abs().max(1e-6)).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("S rel error {worst:e}"))?;
    Ok(format!("{} matrices, L exact, S within {worst:.1e}", shapes.len()))
}

fn memory_footprint() -> Verdict {
    let cfg = TilingConfig::default();
    let sizes = [
        (33, 33),
        (64, 64),
        (1, 1025),
        (1025, 3),
        (2, 600),
        (128, 77),
        (256, 256),
        (512, 512),
        (1024, 1024),
        (4096, 77),
        (4096, 4096),
    ];
    // With M <= 2 keys the N x 2 statistics are no smaller than the
    // probabilities they replace, so ordering is checked from M = 3.
    let boundary = attention_intermediate_bytes(1025, 2, AttentionVariant::PartiallyFused, &cfg);
    ensure(
        boundary == attention_intermediate_bytes(1025, 2, AttentionVariant::Naive, &cfg),
        || "M = 2 boundary moved".into(),
    )?;
    let mut rng = Rng::new(5);
    for (n, m) in sizes {
        let naive = attention_intermediate_bytes(n, m, AttentionVariant::Naive, &cfg);
        let pf = attention_intermediate_bytes(n, m, AttentionVariant::PartiallyFused, &cfg);
        let tiled = attention_intermediate_bytes(n, m, AttentionVariant::Tiled, &cfg);
        ensure(naive > pf && pf > tiled, || {
            format!("{n}x{m}: {naive} / {pf} / {tiled}")
        })?;
        ensure(pf - (n * m * 4) as u64 == (n * 2 * 4) as u64, || {
            format!("{n}x{m}: pf aux is not N x 2 floats")
        })?;
        if n * m > 1 << 20 {
            continue;
        }
        let d = 8;
        let (q, k, v) = (
            rand(&[n, d], &mut rng, -1.0, 1.0),
            rand(&[m, d], &mut rng, -1.0, 1.0),
            rand(&[m, d], &mut rng, -1.0, 1.0),
        );
        let (_, cn) = instrument::measure(|| naive_attention(&q, &k, &v).unwrap());
        let (_, cp) = instrument::measure(|| partially_fused_attention(&q, &k, &v, &cfg).unwrap());
        let (_, ct) = instrument::measure(|| tiled_attention(&q, &k, &v, &cfg).unwrap());
        ensure(cp.bytes_labeled("reduction") == (n * 2 * 4) as u64, || {
            format!("{n}x{m}: instrumented reduction {} B", cp.bytes_labeled("reduction"))
        })?;
        ensure(
            cp.intermediate_bytes() == pf && ct.intermediate_bytes() == tiled,
            || {
                format!(
                    "{n}x{m}: instrumented {} / {} vs modeled {pf} / {tiled}",
                    cp.intermediate_bytes(),
                    ct.intermediate_bytes()
                )
            },
        )?;
        ensure(cn.intermediate_bytes() > cp.intermediate_bytes(), || {
            format!("{n}x{m}: naive not largest")
        })?;
    }
    Ok(format!(
        "{} (N, M) pairs with M >= 3 ordered; N x 2 reduction confirmed by instrumentation",
        sizes.len()
    ))
}

fn max_err(g: &OpGraph, h: &OpGraph, seed: u64) -> f64 {
    let inputs = fixtures::random_inputs(g, seed).unwrap();
    let a = interpret(g, &inputs).unwrap();
    let b = interpret(h, &inputs).unwrap();
    a.iter()
        .map(|(k, v)| max_relative_error(&b[k], v).unwrap())
        .fold(0.0, f64::max)
}

fn pipeline_memory_trend() -> Verdict {
    let g = fixtures::unet_block();
    let names: Vec<&str> = Pass::ALL.iter().map(|p| p.name()).collect();
    let (out, reports) = run_pipeline(&g, &names, &default_flash_dims()).map_err(|e| e.to_string())?;
    ensure(reports.len() == 4, || format!("{} reports", reports.len()))?;
    for r in &reports[..3] {
        ensure(r.intermediate_bytes_after <= r.intermediate_bytes_before, || {
            format!("{r:?}")
        })?;
    }
    let mut trend = vec![reports[0].intermediate_bytes_before.to_string()];
    trend.extend(reports.iter().map(|r| r.intermediate_bytes_after.to_string()));
    let worst = (0..4).map(|s| max_err(&g, &out, s)).fold(0.0, f64::max);
    ensure(worst <= 1e-3, || format!("rewritten fixture error {worst:e}"))?;
    Ok(format!(
        "bytes {}, rewritten graph within {worst:.1e}",
        trend.join(" -> ")
    ))
}

fn pass_semantics() -> Verdict {
    let flash = &default_flash_dims();
    let tolerance = |p: Pass| match p {
        Pass::Softmax | Pass::Flash => 1e-4,
        Pass::GroupNormGelu => 1e-5,
        Pass::Winograd => 1e-3,
    };
    let mut checked = 0;
    for (name, g) in [
        ("unet_block", fixtures::unet_block()),
        ("attention_block", fixtures::attention_block()),
    ] {
        let passes: Vec<(&str, Rewrite, f64)> = Pass::ALL
            .iter()
            .map(|&p| {
                (
                    p.name(),
                    Box::new(move |g: &OpGraph| p.apply(g, flash)) as Rewrite,
                    tolerance(p),
                )
            })
            .chain([
                ("fuse_group_norm", Box::new(fuse_group_norm) as Rewrite, 1e-5),
                ("fuse_gelu", Box::new(fuse_gelu), 1e-6),
            ])
            .collect();
        for (pass, f, tol) in &passes {
            let once = f(&g);
            ensure(once.structurally_equal(&f(&once)), || {
                format!("{pass} not idempotent on {name}")
            })?;
            for seed in 0..3 {
                let e = max_err(&g, &once, seed);
                ensure(e <= *tol, || format!("{pass} on {name}, seed {seed}: {e:e} > {tol:e}"))?;
            }
            checked += 1;
        }
    }

    let mut b = GraphBuilder::new();
    b.input("x", &[1, 4, 4, 16], "activation");
    let y = push_group_norm(&mut b, "gn", "x", [1, 4, 4, 16], 4);
    b.output("y", &y);
    let g = b.build().map_err(|e| e.to_string())?;
    let compute = |g: &OpGraph| {
        g.nodes()
            .iter()
            .filter(|n| !matches!(n.kind, OpKind::Input | OpKind::Output))
            .count()
    };
    let fused = fuse_group_norm(&g);
    ensure(compute(&g) == 4 && compute(&fused) == 1, || {
        format!("GN chain {} -> {} compute nodes", compute(&g), compute(&fused))
    })?;
    ensure(fused.count_kind(OpKind::GroupNormFused) == 1, || {
        "no fused GN node".into()
    })?;
    Ok(format!(
        "{checked} pass/fixture pairs idempotent and equivalent; GN chain 4 -> 1"
    ))
}

fn determinism() -> Verdict {
    let a = run(["fusekit", "verify", "--seed", "7"]);
    let b = run(["fusekit", "verify", "--seed", "7"]);
    ensure(a.code == 0 && b.code == 0, || a.stderr.clone())?;
    let golden = |o: &fusekit_cli::Outcome| {
        let v: Value = serde_json::from_str(&o.stdout).unwrap();
        serde_json::to_string(&v["golden"]).unwrap()
    };
    ensure(golden(&a) == golden(&b), || "golden fields differ".into())?;
    ensure(a.stdout == b.stdout, || "reports differ".into())?;
    Ok(format!("two runs byte-identical ({} bytes)", a.stdout.len()))
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    check: fn() -> Verdict,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "Winograd cost table",
            limit: Some(Duration::from_secs(1)),
            check: cost_table_reproduction,
        },
        Criterion {
            name: "Winograd multiply counts",
            limit: Some(Duration::from_secs(10)),
            check: winograd_multiply_counts,
        },
        Criterion {
            name: "oracle equivalence",
            limit: Some(Duration::from_secs(120)),
            check: oracle_equivalence,
        },
        Criterion {
            name: "reduction staging",
            limit: None,
            check: reduction_staging,
        },
        Criterion {
            name: "memory footprints",
            limit: None,
            check: memory_footprint,
        },
        Criterion {
            name: "pipeline memory trend",
            limit: None,
            check: pipeline_memory_trend,
        },
        Criterion {
            name: "pass semantics",
            limit: None,
            check: pass_semantics,
        },
        Criterion {
            name: "determinism",
            limit: None,
            check: determinism,
        },
    ];
    // Panics become FAIL lines; keep the default hook quiet while checking.
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let verdict = match (verdict, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.2?}, limit {limit:?}")),
            (v, _) => v,
        };
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {}. {}: {detail} ({elapsed:.2?})", i + 1, c.name);
    }
    panic::set_hook(hook);
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
