//! Optimized kernels that avoid materializing the intermediates of their
//! reference counterparts.
//!
//! Reductions and inner products accumulate in `f64`; outputs, logits and
//! the small statistics tensors are stored as `f32`. Every kernel records
//! its intermediate allocations and input passes through
//! [`crate::instrument`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::{self, AllocKind};
use crate::reference_ops::{attention_dims, attention_logits, scaled_dot, GroupNormParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingConfig {
    /// Queries per tile.
    pub row_block: usize,
    /// Keys per tile.
    pub col_block: usize,
    /// Elements per block in the first stage of the softmax reduction.
    pub reduction_block: usize,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            row_block: 32,
            col_block: 32,
            reduction_block: 256,
        }
    }
}

impl TilingConfig {
    pub fn new(row_block: usize, col_block: usize, reduction_block: usize) -> Result<Self> {
        let cfg = TilingConfig {
            row_block,
            col_block,
            reduction_block,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_block == 0 || self.col_block == 0 || self.reduction_block == 0 {
            return Err(Error::Config(format!("tile sizes must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Per-row maximum `l` and shifted exponential sum `s` of a logits
/// matrix. Together they form the `N×2` tensor that replaces the
/// normalized probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionResult {
    pub l: Vec<f32>,
    pub s: Vec<f32>,
}

impl ReductionResult {
    pub fn rows(&self) -> usize {
        self.l.len()
    }

    /// The `[N, 2]` tensor view `(l_i, s_i)`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.l.iter().zip(&self.s).flat_map(|(&l, &s)| [l, s]).collect();
        Tensor::new(vec![self.rows(), 2], data).expect("rows >= 1")
    }
}

/// Partial softmax statistics over one block of a row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialReduction {
    pub max: f32,
    pub sum: f64,
}

impl PartialReduction {
    pub fn of_block(block: &[f32]) -> Self {
        let max = block.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let m = max as f64;
        let sum = block.iter().map(|&a| (a as f64 - m).exp()).sum();
        PartialReduction { max, sum }
    }

    /// Max-anchored merge: `L = max(La, Lb)`,
    /// `S = Sa·exp(La−L) + Sb·exp(Lb−L)`.
    pub fn merge(self, other: Self) -> Self {
        let max = self.max.max(other.max);
        let m = max as f64;
        let sum = self.sum * (self.max as f64 - m).exp() + other.sum * (other.max as f64 - m).exp();
        PartialReduction { max, sum }
    }
}

fn matrix_dims(a: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *a.shape() {
        [n, m] => Ok((n, m)),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} must be a matrix, got {:?}",
            a.shape()
        ))),
    }
}

/// Group normalization in two passes over the input: one for the group
/// statistics, one to normalize. Only `2·N·G` statistics are allocated
/// besides the output.
pub fn fused_group_norm(x: &Tensor, p: &GroupNormParams) -> Result<Tensor> {
    let (n, h, w, c) = p.check_input(x)?;
    x.ensure_finite("fused_group_norm")?;
    let g = p.num_groups;
    let cpg = c / g;
    let pixels = h * w;
    let count = (pixels * cpg) as f64;
    let xd = x.data();

    // (mean, variance) for each (batch, group).
    let mut stats = vec![0.0f32; 2 * n * g];
    instrument::record_intermediate::<f32>("group_stats", stats.len());
    for b in 0..n {
        let image = &xd[b * pixels * c..(b + 1) * pixels * c];
        for gi in 0..g {
            // Shifting by the first element keeps the one-pass variance
            // free of cancellation when the mean is large.
            let shift = image[gi * cpg] as f64;
            let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
            for px in image.chunks_exact(c) {
                for &v in &px[gi * cpg..(gi + 1) * cpg] {
                    let d = v as f64 - shift;
                    sum += d;
                    sumsq += d * d;
                }
            }
            let mean = shift + sum / count;
            let var = ((sumsq - sum * sum / count) / count).max(0.0);
            stats[2 * (b * g + gi)] = mean as f32;
            stats[2 * (b * g + gi) + 1] = var as f32;
        }
    }
    instrument::record_pass();

    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        let range = b * pixels * c..(b + 1) * pixels * c;
        let batch_stats = &stats[2 * b * g..2 * (b + 1) * g];
        let scale: Vec<(f64, f64)> = batch_stats
            .chunks_exact(2)
            .map(|s| (s[0] as f64, 1.0 / (s[1] as f64 + p.epsilon).sqrt()))
            .collect();
        for (src, dst) in xd[range.clone()].chunks_exact(c).zip(out[range].chunks_exact_mut(c)) {
            for (ch, (&v, o)) in src.iter().zip(dst.iter_mut()).enumerate() {
                let (mean, inv_std) = scale[ch / cpg];
                *o = ((v as f64 - mean) * inv_std) as f32;
            }
        }
    }
    instrument::record_pass();
    Tensor::new(x.shape().to_vec(), out)
}

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    // x/2·(1 + erf(x/√2)) written with erfc so the negative tail keeps
    // full relative precision.
    0.5 * x * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Element-wise GELU in a single pass with no temporaries.
pub fn fused_gelu(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("fused_gelu")?;
    instrument::record_pass();
    Ok(x.map(|v| gelu_scalar(v as f64) as f32))
}

/// `h[..., :F] * GELU(h[..., F:])` for a last axis of size `2F`, in one
/// pass. This is the split-and-multiply gated form.
pub fn fused_gated_gelu(h: &Tensor) -> Result<Tensor> {
    h.ensure_finite("fused_gated_gelu")?;
    let last = *h.shape().last().expect("rank >= 1");
    if !last.is_multiple_of(2) {
        return Err(Error::ShapeMismatch(format!(
            "gated GELU needs an even last axis, got {:?}",
            h.shape()
        )));
    }
    let half = last / 2;
    let data = h
        .data()
        .chunks_exact(last)
        .flat_map(|row| {
            let (a, gate) = row.split_at(half);
            a.iter()
                .zip(gate)
                .map(|(&a, &g)| (a as f64 * gelu_scalar(g as f64)) as f32)
        })
        .collect();
    instrument::record_pass();
    let mut shape = h.shape().to_vec();
    *shape.last_mut().unwrap() = half;
    Tensor::new(shape, data)
}

/// Per-row `(max, Σ exp(a − max))` computed in two stages: block partials
/// of `reduction_block` elements, folded left to right with
/// [`PartialReduction::merge`].
pub fn softmax_reduce(a: &Tensor, cfg: &TilingConfig) -> Result<ReductionResult> {
    cfg.validate()?;
    let (n, m) = matrix_dims(a, "softmax_reduce input")?;
    a.ensure_finite("softmax_reduce")?;
    instrument::record_intermediate::<f32>("reduction", 2 * n);
    let block = cfg.reduction_block;
    let partials: Vec<PartialReduction> = a
        .data()
        .par_chunks_exact(m)
        .map(|row| {
            row.chunks(block)
                .map(PartialReduction::of_block)
                .reduce(PartialReduction::merge)
                .expect("m >= 1")
        })
        .collect();
    instrument::record_pass();
    Ok(ReductionResult {
        l: partials.iter().map(|p| p.max).collect(),
        s: partials.iter().map(|p| p.sum as f32).collect(),
    })
}

/// `out_i = Σ_j exp(a_ij − l_i)/s_i · v_j`, streaming over `j` so the
/// normalized probabilities are never stored.
pub fn fused_softmax_matmul(a: &Tensor, r: &ReductionResult, v: &Tensor) -> Result<Tensor> {
    let (n, m) = matrix_dims(a, "logits")?;
    let (mv, d) = matrix_dims(v, "v")?;
    if mv != m || r.l.len() != n || r.s.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "fused_softmax_matmul: logits {:?}, v {:?}, reduction rows {}",
            a.shape(),
            v.shape(),
            r.l.len()
        )));
    }
    instrument::record_alloc("row_accumulator", AllocKind::Accumulator, (n * d * 8) as u64);
    let mut out = vec![0.0f32; n * d];
    out.par_chunks_exact_mut(d)
        .zip(a.data().par_chunks_exact(m))
        .enumerate()
        .for_each(|(i, (dst, row))| {
            let l = r.l[i] as f64;
            let mut acc = vec![0.0f64; d];
            for (&logit, v_row) in row.iter().zip(v.data().chunks_exact(d)) {
                let w = (logit as f64 - l).exp();
                for (s, &x) in acc.iter_mut().zip(v_row) {
                    *s += w * x as f64;
                }
            }
            let inv = 1.0 / r.s[i] as f64;
            for (o, s) in dst.iter_mut().zip(&acc) {
                *o = (s * inv) as f32;
            }
        });
    instrument::record_pass();
    Tensor::new(vec![n, d], out)
}

/// Attention with a materialized logits matrix but no materialized
/// probabilities: logits, then [`softmax_reduce`], then
/// [`fused_softmax_matmul`].
pub fn partially_fused_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &TilingConfig) -> Result<Tensor> {
    let (n, m, _) = attention_dims(q, k, v)?;
    for t in [q, k, v] {
        t.ensure_finite("partially_fused_attention")?;
    }
    let logits = attention_logits(q, k)?;
    instrument::record_intermediate::<f32>("logits", n * m);
    let r = softmax_reduce(&logits, cfg)?;
    fused_softmax_matmul(&logits, &r, v)
}

/// Exact attention over `row_block × col_block` score tiles with a
/// running max, running sum and rescaled accumulator per query row. No
/// `N×M` buffer is ever allocated.
pub fn tiled_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &TilingConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, m, d) = attention_dims(q, k, v)?;
    for t in [q, k, v] {
        t.ensure_finite("tiled_attention")?;
    }
    let (rb, cb) = (cfg.row_block, cfg.col_block);
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    // running max in [0, n), running sum in [n, 2n)
    let mut stats = vec![0.0f32; 2 * n];
    stats[..n].fill(f32::NEG_INFINITY);
    instrument::record_intermediate::<f32>("running_stats", stats.len());
    let mut tile = vec![0.0f32; rb * cb];
    instrument::record_intermediate::<f32>("score_tile", tile.len());
    let mut acc = vec![0.0f64; n * d];
    instrument::record_alloc("output_accumulator", AllocKind::Accumulator, (n * d * 8) as u64);

    for r0 in (0..n).step_by(rb) {
        let rows = rb.min(n - r0);
        for c0 in (0..m).step_by(cb) {
            let cols = cb.min(m - c0);
            for i in 0..rows {
                let q_row = &qd[(r0 + i) * d..][..d];
                for j in 0..cols {
                    tile[i * cb + j] = scaled_dot(q_row, &kd[(c0 + j) * d..][..d], scale);
                }
            }
            for i in 0..rows {
                let row = r0 + i;
                let scores = &tile[i * cb..i * cb + cols];
                let tile_max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let old_max = stats[row];
                let new_max = old_max.max(tile_max);
                let m_new = new_max as f64;
                let correction = if old_max == f32::NEG_INFINITY {
                    0.0
                } else {
                    (old_max as f64 - m_new).exp()
                };
                let acc_row = &mut acc[row * d..(row + 1) * d];
                if correction != 1.0 {
                    acc_row.iter_mut().for_each(|a| *a *= correction);
                }
                let mut tile_sum = 0.0f64;
                for (j, &s) in scores.iter().enumerate() {
                    let w = (s as f64 - m_new).exp();
                    tile_sum += w;
                    for (a, &x) in acc_row.iter_mut().zip(&vd[(c0 + j) * d..][..d]) {
                        *a += w * x as f64;
                    }
                }
                stats[row] = new_max;
                stats[n + row] = (stats[n + row] as f64 * correction + tile_sum) as f32;
            }
        }
    }
    instrument::record_pass();

    let out = acc
        .chunks_exact(d)
        .zip(&stats[n..])
        .flat_map(|(row, &l)| {
            let inv = 1.0 / l as f64;
            row.iter().map(move |&a| (a * inv) as f32)
        })
        .collect();
    Tensor::new(vec![n, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference_ops::{naive_attention, naive_gelu, naive_group_norm, naive_matmul, naive_softmax};
    use crate::tensor::{max_relative_error, Rng};

    fn rand(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
        Tensor::random_uniform(shape, &mut Rng::new(seed), lo, hi).unwrap()
    }

    /// Sequential left-to-right (max, sum) in f64, the staging oracle.
    fn sequential_reduce(row: &[f32]) -> (f32, f64) {
        let mut max = f32::NEG_INFINITY;
        for &a in row {
            max = max.max(a);
        }
        let mut sum = 0.0;
        for &a in row {
            sum += (a as f64 - max as f64).exp();
        }
        (max, sum)
    }

    #[test]
    fn group_norm_matches_oracle() {
        for (seed, shape, g) in [
            (1, [1, 8, 8, 32], 32),
            (2, [2, 5, 3, 12], 3),
            (3, [1, 1, 1, 4], 1),
            (4, [3, 7, 7, 1], 1),
        ] {
            let x = rand(&shape, seed, -4.0, 9.0);
            let p = GroupNormParams::new(shape[3], g, 1e-5).unwrap();
            let f = fused_group_norm(&x, &p).unwrap();
            let r = naive_group_norm(&x, &p).unwrap();
            assert!(max_relative_error(&f, &r).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn group_norm_examples_and_passes() {
        let x = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = GroupNormParams::new(4, 1, 1e-5).unwrap();
        let (y, c) = instrument::measure(|| fused_group_norm(&x, &p).unwrap());
        let want = [-1.34164, -0.44721, 0.44721, 1.34164];
        for (&g, w) in y.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-5);
        }
        assert!(c.input_passes <= 2);
        assert_eq!(c.intermediate_bytes(), 2 * 4);

        let k = Tensor::full(&[2, 3, 3, 8], 5.0).unwrap();
        let p = GroupNormParams::new(8, 4, 1e-5).unwrap();
        assert!(fused_group_norm(&k, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_matches_oracle() {
        let x = rand(&[4096], 5, -8.0, 8.0);
        let f = fused_gelu(&x).unwrap();
        assert!(max_relative_error(&f, &naive_gelu(&x).unwrap()).unwrap() <= 1e-6);
        let edge = Tensor::new(vec![2], vec![0.0, 10.0]).unwrap();
        let y = fused_gelu(&edge).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() <= 1e-7);
        assert!(fused_gelu(&Tensor::new(vec![1], vec![f32::NAN]).unwrap()).is_err());
    }

    #[test]
    fn gated_gelu_matches_composition() {
        let h = rand(&[3, 8], 6, -3.0, 3.0);
        let y = fused_gated_gelu(&h).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        for i in 0..3 {
            for j in 0..4 {
                let a = h.data()[i * 8 + j] as f64;
                let g = h.data()[i * 8 + 4 + j] as f64;
                let want = a * 0.5 * g * (1.0 + libm::erf(g / 2f64.sqrt()));
                assert!((y.data()[i * 4 + j] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reduce_examples() {
        let a = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = softmax_reduce(&a, &TilingConfig::default()).unwrap();
        assert_eq!(r.l, vec![0.0, 3.0]);
        assert!((r.s[0] - 3.0).abs() < 1e-7);
        let want = 1.0 + (-1f64).exp() + (-2f64).exp();
        assert!((r.s[1] as f64 - want).abs() < 1e-6);
        assert!((r.s[1] - 1.50321).abs() < 1e-5);
        assert_eq!(r.to_tensor().shape(), &[2, 2]);
    }

    #[test]
    fn reduce_is_block_independent() {
        let a = rand(&[9, 300], 7, -30.0, 30.0);
        for block in [1, 2, 7, 64, 256, 300] {
            let cfg = TilingConfig::new(32, 32, block).unwrap();
            let r = softmax_reduce(&a, &cfg).unwrap();
            for (i, row) in a.data().chunks_exact(300).enumerate() {
                let (l, s) = sequential_reduce(row);
                assert_eq!(r.l[i], l);
                assert!(((r.s[i] as f64 - s) / s).abs() <= 1e-6);
                assert!(r.s[i] >= 1.0);
            }
        }
    }

    #[test]
    fn reduce_shift_invariance() {
        // Dyadic inputs keep the shift exact in f32.
        let a = rand(&[4, 40], 8, -5.0, 5.0).map(|x| (x * 256.0).round() / 256.0);
        let shifted = a.map(|x| x + 2.0);
        let cfg = TilingConfig::default();
        let r = softmax_reduce(&a, &cfg).unwrap();
        let rs = softmax_reduce(&shifted, &cfg).unwrap();
        for i in 0..4 {
            assert!((rs.l[i] - (r.l[i] + 2.0)).abs() <= 1e-6);
            assert!(((rs.s[i] - r.s[i]) / r.s[i]).abs() <= 1e-6);
        }
        let v = rand(&[40, 3], 9, -1.0, 1.0);
        let o = fused_softmax_matmul(&a, &r, &v).unwrap();
        let os = fused_softmax_matmul(&shifted, &rs, &v).unwrap();
        assert!(max_relative_error(&os, &o).unwrap() <= 1e-6);
    }

    #[test]
    fn softmax_matmul_matches_composition() {
        let a = rand(&[5, 11], 10, -3.0, 3.0);
        let v = rand(&[11, 4], 11, -1.0, 1.0);
        let r = softmax_reduce(&a, &TilingConfig::default()).unwrap();
        let got = fused_softmax_matmul(&a, &r, &v).unwrap();
        let p = naive_softmax(&a).unwrap();
        let want = naive_matmul(&p, &v, false, 1.0).unwrap();
        assert!(max_relative_error(&got, &want).unwrap() <= 1e-5);
    }

    #[test]
    fn softmax_matmul_edge_cases() {
        let a = Tensor::new(vec![2, 1], vec![0.5, -7.0]).unwrap();
        let v = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = softmax_reduce(&a, &TilingConfig::default()).unwrap();
        let y = fused_softmax_matmul(&a, &r, &v).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        // One dominant logit per row.
        let a = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 60.0 } else { 0.0 }).unwrap();
        let v = rand(&[3, 2], 12, -1.0, 1.0);
        let r = softmax_reduce(&a, &TilingConfig::default()).unwrap();
        let y = fused_softmax_matmul(&a, &r, &v).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                assert!((y.data()[i * 2 + c] - v.data()[i * 2 + c]).abs() < 1e-6);
            }
        }
        let bad = ReductionResult {
            l: vec![0.0],
            s: vec![1.0],
        };
        assert!(fused_softmax_matmul(&a, &bad, &v).is_err());
    }

    #[test]
    fn attention_variants_match_oracle() {
        for (seed, n, m, d) in [
            (1, 64, 64, 40),
            (2, 7, 13, 5),
            (3, 1, 1, 8),
            (4, 33, 97, 80),
            (5, 128, 128, 40),
        ] {
            let q = rand(&[n, d], seed, -1.0, 1.0);
            let k = rand(&[m, d], seed + 100, -1.0, 1.0);
            let v = rand(&[m, d], seed + 200, -1.0, 1.0);
            let want = naive_attention(&q, &k, &v).unwrap();
            let cfg = TilingConfig::default();
            let pf = partially_fused_attention(&q, &k, &v, &cfg).unwrap();
            let tl = tiled_attention(&q, &k, &v, &cfg).unwrap();
            assert!(max_relative_error(&pf, &want).unwrap() <= 1e-4);
            assert!(max_relative_error(&tl, &want).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn attention_single_key_and_uniform_keys() {
        let q = rand(&[1, 4], 1, -1.0, 1.0);
        let k = rand(&[1, 4], 2, -1.0, 1.0);
        let v = rand(&[1, 4], 3, -1.0, 1.0);
        let cfg = TilingConfig::default();
        assert_eq!(partially_fused_attention(&q, &k, &v, &cfg).unwrap().data(), v.data());
        assert_eq!(tiled_attention(&q, &k, &v, &cfg).unwrap().data(), v.data());

        let q = rand(&[5, 4], 4, -1.0, 1.0);
        let krow = rand(&[1, 4], 5, -1.0, 1.0);
        let k = Tensor::from_fn(&[9, 4], |i| krow.data()[i % 4]).unwrap();
        let v = rand(&[9, 4], 6, -1.0, 1.0);
        let out = partially_fused_attention(&q, &k, &v, &cfg).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..9).map(|j| v.data()[j * 4 + c] as f64).sum::<f64>() / 9.0;
            for i in 0..5 {
                assert!((out.data()[i * 4 + c] as f64 - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_tile_agrees_with_partially_fused() {
        let q = rand(&[20, 8], 7, -1.0, 1.0);
        let k = rand(&[30, 8], 8, -1.0, 1.0);
        let v = rand(&[30, 8], 9, -1.0, 1.0);
        let cfg = TilingConfig::default();
        let tl = tiled_attention(&q, &k, &v, &cfg).unwrap();
        let pf = partially_fused_attention(&q, &k, &v, &cfg).unwrap();
        let want = naive_attention(&q, &k, &v).unwrap();
        assert!(max_relative_error(&tl, &pf).unwrap() <= 1e-6);
        assert!(max_relative_error(&tl, &want).unwrap() <= 1e-5);
    }

    #[test]
    fn tiled_survives_large_logit_shift() {
        // Last column: q = 10, k = 300, so every logit gains 10·300/√9 = 1000.
        // The stabilized problem zeroes that column in q.
        let (n, m, d) = (16, 64, 9);
        let base_q = rand(&[n, d], 10, -1.0, 1.0);
        let k = Tensor::from_fn(&[m, d], {
            let kr = rand(&[m, d], 11, -1.0, 1.0);
            move |i| if i % d == d - 1 { 300.0 } else { kr.data()[i] }
        })
        .unwrap();
        let q_shift = Tensor::from_fn(&[n, d], |i| if i % d == d - 1 { 10.0 } else { base_q.data()[i] }).unwrap();
        let q_plain = Tensor::from_fn(&[n, d], |i| if i % d == d - 1 { 0.0 } else { base_q.data()[i] }).unwrap();
        let v = rand(&[m, d], 12, 1.0, 2.0);
        let cfg = TilingConfig::new(8, 16, 256).unwrap();
        let got = tiled_attention(&q_shift, &k, &v, &cfg).unwrap();
        assert!(got.data().iter().all(|x| x.is_finite()));
        let want = naive_attention(&q_plain, &k, &v).unwrap();
        assert!(max_relative_error(&got, &want).unwrap() <= 1e-4);
    }

    #[test]
    fn allocation_footprints() {
        let (n, m, d) = (48, 80, 8);
        let q = rand(&[n, d], 1, -1.0, 1.0);
        let k = rand(&[m, d], 2, -1.0, 1.0);
        let v = rand(&[m, d], 3, -1.0, 1.0);
        let cfg = TilingConfig::default();
        let (_, pf) = instrument::measure(|| partially_fused_attention(&q, &k, &v, &cfg).unwrap());
        assert_eq!(pf.bytes_labeled("reduction"), (n * 2 * 4) as u64);
        assert_eq!(pf.bytes_labeled("logits"), (n * m * 4) as u64);
        assert!(!pf.has_label("probabilities"));
        let (_, tl) = instrument::measure(|| tiled_attention(&q, &k, &v, &cfg).unwrap());
        assert_eq!(tl.intermediate_bytes(), (32 * 32 * 4 + 2 * n * 4) as u64);
        assert!(!tl.has_label("logits"));
    }

    #[test]
    fn rejects_bad_config_and_inputs() {
        assert!(TilingConfig::new(0, 1, 1).is_err());
        let a = Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(
            softmax_reduce(&a, &TilingConfig::default()),
            Err(Error::NumericInput { .. })
        ));
    }
}
