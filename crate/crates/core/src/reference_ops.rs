//! Naive implementations of every operation the fused kernels replace.
//!
//! These are the oracles. Each one materializes its intermediates the way
//! an unfused graph would, and prefers clarity over speed. Inner products
//! and reductions accumulate in `f64`; every stored tensor is `f32`.

use crate::error::{Error, Result};
use crate::instrument;
use crate::tensor::{strides_of, Tensor};

pub const DEFAULT_NUM_GROUPS: usize = 32;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupNormParams {
    pub num_groups: usize,
    pub epsilon: f64,
    pub channels: usize,
}

impl GroupNormParams {
    pub fn new(channels: usize, num_groups: usize, epsilon: f64) -> Result<Self> {
        if channels == 0 || num_groups == 0 {
            return Err(Error::Config("channels and num_groups must be positive".into()));
        }
        if !channels.is_multiple_of(num_groups) {
            return Err(Error::Config(format!(
                "{channels} channels are not divisible into {num_groups} groups"
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(GroupNormParams {
            num_groups,
            epsilon,
            channels,
        })
    }

    /// 32 groups (the usual UNet setting) and `epsilon = 1e-5`.
    pub fn with_defaults(channels: usize) -> Result<Self> {
        Self::new(channels, DEFAULT_NUM_GROUPS, DEFAULT_EPSILON)
    }

    pub fn channels_per_group(&self) -> usize {
        self.channels / self.num_groups
    }

    /// Checks `x` is NHWC with matching channels and returns `(n, h, w, c)`.
    pub(crate) fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let &[n, h, w, c] = x.shape() else {
            return Err(Error::shape_mismatch(format!(
                "group norm expects NHWC input, got {:?}",
                x.shape()
            )));
        };
        if c != self.channels {
            return Err(Error::Config(format!(
                "input has {c} channels, params expect {}",
                self.channels
            )));
        }
        Ok((n, h, w, c))
    }
}

/// Maps every flat offset of `shape` to the offset of its keepdims
/// statistic when `axes` are reduced. Returns the statistic shape too.
fn reduction_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
        return Err(Error::shape_mismatch(format!(
            "reduction axis {bad} out of range for {shape:?}"
        )));
    }
    let stat_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let stat_strides = strides_of(&stat_shape);
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        let off: usize = idx
            .iter()
            .zip(&stat_strides)
            .enumerate()
            .filter(|(axis, _)| !axes.contains(axis))
            .map(|(_, (i, s))| i * s)
            .sum();
        map.push(off);
        for axis in (0..shape.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Ok((stat_shape, map))
}

/// Mean over `axes`, keeping reduced axes as size 1.
pub fn reduce_mean(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (stat_shape, map) = reduction_map(x.shape(), axes)?;
    let stats: usize = stat_shape.iter().product();
    let count = (x.len() / stats) as f64;
    let mut sums = vec![0.0f64; stats];
    for (&v, &s) in x.data().iter().zip(&map) {
        sums[s] += v as f64;
    }
    instrument::record_pass();
    Tensor::new(stat_shape, sums.iter().map(|s| (s / count) as f32).collect())
}

/// Population variance over `axes` about a precomputed keepdims `mean`.
pub fn reduce_variance(x: &Tensor, mean: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (stat_shape, map) = reduction_map(x.shape(), axes)?;
    if mean.shape() != stat_shape.as_slice() {
        return Err(Error::shape_mismatch(format!(
            "variance: mean has shape {:?}, expected {:?}",
            mean.shape(),
            stat_shape
        )));
    }
    let stats = mean.len();
    let count = (x.len() / stats) as f64;
    let mut acc = vec![0.0f64; stats];
    for (&v, &s) in x.data().iter().zip(&map) {
        let d = v as f64 - mean.data()[s] as f64;
        acc[s] += d * d;
    }
    instrument::record_pass();
    Tensor::new(stat_shape, acc.iter().map(|s| (s / count) as f32).collect())
}

/// `(x - mean) / sqrt(var + epsilon)` with keepdims statistics broadcast
/// along their size-1 axes.
pub fn normalize(x: &Tensor, mean: &Tensor, var: &Tensor, epsilon: f64) -> Result<Tensor> {
    if mean.shape() != var.shape() || mean.rank() != x.rank() {
        return Err(Error::shape_mismatch(format!(
            "normalize: x {:?}, mean {:?}, var {:?}",
            x.shape(),
            mean.shape(),
            var.shape()
        )));
    }
    let mut axes = Vec::new();
    for (i, (&d, &s)) in x.shape().iter().zip(mean.shape()).enumerate() {
        if s == 1 && d != 1 {
            axes.push(i);
        } else if s != d {
            return Err(Error::shape_mismatch(format!(
                "normalize: statistic axis {i} has size {s}, input has {d}"
            )));
        }
    }
    let (_, map) = reduction_map(x.shape(), &axes)?;
    let inv_std: Vec<f64> = var.data().iter().map(|&v| 1.0 / (v as f64 + epsilon).sqrt()).collect();
    let data = x
        .data()
        .iter()
        .zip(&map)
        .map(|(&v, &s)| ((v as f64 - mean.data()[s] as f64) * inv_std[s]) as f32)
        .collect();
    instrument::record_pass();
    Tensor::new(x.shape().to_vec(), data)
}

/// Group normalization as the unfused sequence reshape, mean, variance,
/// normalize, with each step producing its own tensor.
pub fn naive_group_norm(x: &Tensor, p: &GroupNormParams) -> Result<Tensor> {
    let (n, h, w, c) = p.check_input(x)?;
    x.ensure_finite("naive_group_norm")?;
    let g = p.num_groups;
    let grouped_shape = [n, h * w, g, c / g];

    let grouped = x.reshape(&grouped_shape)?;
    instrument::record_pass();
    instrument::record_intermediate::<f32>("grouped", grouped.len());

    let mean = reduce_mean(&grouped, &[1, 3])?;
    instrument::record_intermediate::<f32>("group_mean", mean.len());
    let var = reduce_variance(&grouped, &mean, &[1, 3])?;
    instrument::record_intermediate::<f32>("group_variance", var.len());
    let normalized = normalize(&grouped, &mean, &var, p.epsilon)?;
    normalized.reshape(x.shape())
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erf_tensor(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("erf")?;
    Ok(x.map(|v| erf(v as f64) as f32))
}

/// `x/2 * (1 + erf(x/√2))`, evaluated stage by stage.
pub fn naive_gelu(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("naive_gelu")?;
    let scaled: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| v as f64 * std::f64::consts::FRAC_1_SQRT_2)
        .collect();
    let erfs: Vec<f64> = scaled.iter().map(|&u| erf(u)).collect();
    let shifted: Vec<f64> = erfs.iter().map(|&e| 1.0 + e).collect();
    for _ in 0..3 {
        instrument::record_intermediate::<f64>("gelu_stage", x.len());
    }
    let out = x
        .data()
        .iter()
        .zip(&shifted)
        .map(|(&v, &t)| (v as f64 * 0.5 * t) as f32)
        .collect();
    for _ in 0..4 {
        instrument::record_pass();
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Shift-stabilized softmax of one row, in `f64`.
pub(crate) fn softmax_row(row: &[f32], out: &mut [f64]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0;
    for (o, &a) in out.iter_mut().zip(row) {
        *o = (a as f64 - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax along the last axis.
pub fn naive_softmax(a: &Tensor) -> Result<Tensor> {
    a.ensure_finite("naive_softmax")?;
    let m = *a.shape().last().expect("tensors have rank >= 1");
    let mut probs = vec![0.0f64; m];
    let mut out = Vec::with_capacity(a.len());
    for row in a.data().chunks_exact(m) {
        softmax_row(row, &mut probs);
        out.extend(probs.iter().map(|&p| p as f32));
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// `scale * <a, b>` accumulated in `f64` in index order, stored as `f32`.
#[inline]
pub(crate) fn scaled_dot(a: &[f32], b: &[f32], scale: f64) -> f32 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    (acc * scale) as f32
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape_mismatch(format!(
            "{what} must be a matrix, got {:?}",
            t.shape()
        ))),
    }
}

/// `scale * a·b`, or `scale * a·bᵀ` when `transpose_b` is set.
pub fn naive_matmul(a: &Tensor, b: &Tensor, transpose_b: bool, scale: f64) -> Result<Tensor> {
    let (n, k) = dims2(a, "matmul lhs")?;
    let (br, bc) = dims2(b, "matmul rhs")?;
    let (inner, m) = if transpose_b { (bc, br) } else { (br, bc) };
    if inner != k {
        return Err(Error::shape_mismatch(format!(
            "matmul {:?} x {:?}{}",
            a.shape(),
            b.shape(),
            if transpose_b { "ᵀ" } else { "" }
        )));
    }
    let mut out = vec![0.0f32; n * m];
    if transpose_b {
        for (i, row) in a.data().chunks_exact(k).enumerate() {
            for (j, col) in b.data().chunks_exact(k).enumerate() {
                out[i * m + j] = scaled_dot(row, col, scale);
            }
        }
    } else {
        let mut acc = vec![0.0f64; m];
        for (i, row) in a.data().chunks_exact(k).enumerate() {
            acc.fill(0.0);
            for (&x, b_row) in row.iter().zip(b.data().chunks_exact(m)) {
                for (s, &y) in acc.iter_mut().zip(b_row) {
                    *s += x as f64 * y as f64;
                }
            }
            for (o, s) in out[i * m..(i + 1) * m].iter_mut().zip(&acc) {
                *o = (s * scale) as f32;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Checks `q [N,d]`, `k [M,d]`, `v [M,d]` and returns `(n, m, d)`.
pub fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, d) = dims2(q, "q")?;
    let (m, dk) = dims2(k, "k")?;
    let (mv, dv) = dims2(v, "v")?;
    if dk != d || dv != d || mv != m {
        return Err(Error::shape_mismatch(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok((n, m, d))
}

/// The logits matrix `QKᵀ/√d`.
pub fn attention_logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.shape().last().copied().unwrap_or(1);
    naive_matmul(q, k, true, 1.0 / (d as f64).sqrt())
}

/// `softmax(QKᵀ/√d)·V` with both the logits and the probabilities fully
/// materialized.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, m, d) = attention_dims(q, k, v)?;
    for t in [q, k, v] {
        t.ensure_finite("naive_attention")?;
    }
    let logits = attention_logits(q, k)?;
    instrument::record_intermediate::<f32>("logits", n * m);
    let mut probs = vec![0.0f64; n * m];
    for (row, p) in logits.data().chunks_exact(m).zip(probs.chunks_exact_mut(m)) {
        softmax_row(row, p);
    }
    instrument::record_intermediate::<f64>("probabilities", n * m);

    let mut out = vec![0.0f32; n * d];
    let mut acc = vec![0.0f64; d];
    for (i, p_row) in probs.chunks_exact(m).enumerate() {
        acc.fill(0.0);
        for (&p, v_row) in p_row.iter().zip(v.data().chunks_exact(d)) {
            for (s, &x) in acc.iter_mut().zip(v_row) {
                *s += p * x as f64;
            }
        }
        for (o, s) in out[i * d..(i + 1) * d].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Output spatial size of a stride-1 3×3 convolution.
pub fn conv3x3_output_dims(h: usize, w: usize, pad: usize) -> Result<(usize, usize)> {
    if pad > 1 {
        return Err(Error::Precondition(format!("padding must be 0 or 1, got {pad}")));
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    if hp < 3 || wp < 3 {
        return Err(Error::shape_mismatch(format!(
            "input {h}x{w} with padding {pad} is smaller than the 3x3 kernel"
        )));
    }
    Ok((hp - 2, wp - 2))
}

/// Checks NHWC input against a `[3,3,Cin,Cout]` kernel, returning
/// `(n, h, w, cin, cout)`.
pub(crate) fn conv3x3_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let &[n, h, wd, cin] = x.shape() else {
        return Err(Error::shape_mismatch(format!(
            "conv input must be NHWC, got {:?}",
            x.shape()
        )));
    };
    let &[kh, kw, wc, cout] = w.shape() else {
        return Err(Error::shape_mismatch(format!(
            "conv weights must be [3,3,Cin,Cout], got {:?}",
            w.shape()
        )));
    };
    if kh != 3 || kw != 3 {
        return Err(Error::Precondition(format!("kernel must be 3x3, got {kh}x{kw}")));
    }
    if wc != cin {
        return Err(Error::shape_mismatch(format!(
            "weights expect {wc} input channels, input has {cin}"
        )));
    }
    Ok((n, h, wd, cin, cout))
}

/// Direct stride-1 3×3 cross-correlation with optional zero padding.
pub fn naive_conv3x3(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, h, wd, cin, cout) = conv3x3_dims(x, w)?;
    let (oh, ow) = conv3x3_output_dims(h, wd, pad)?;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0f32; n * oh * ow * cout];
    let mut acc = vec![0.0f64; cout];
    let mut multiplies = 0u64;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                acc.fill(0.0);
                for ky in 0..3 {
                    let Some(iy) = (oy + ky).checked_sub(pad).filter(|&iy| iy < h) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(ix) = (ox + kx).checked_sub(pad).filter(|&ix| ix < wd) else {
                            continue;
                        };
                        let px = &xd[((b * h + iy) * wd + ix) * cin..][..cin];
                        let taps = &wdat[(ky * 3 + kx) * cin * cout..][..cin * cout];
                        for (&xv, w_row) in px.iter().zip(taps.chunks_exact(cout)) {
                            for (a, &wv) in acc.iter_mut().zip(w_row) {
                                *a += xv as f64 * wv as f64;
                            }
                        }
                        multiplies += (cin * cout) as u64;
                    }
                }
                let o = ((b * oh + oy) * ow + ox) * cout;
                for (dst, &a) in out[o..o + cout].iter_mut().zip(&acc) {
                    *dst = a as f32;
                }
            }
        }
    }
    instrument::record_multiplies(multiplies);
    Tensor::new(vec![n, oh, ow, cout], out)
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| (x as f64 + s) as f32)
}

pub fn mul_scalar(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| (x as f64 * s) as f32)
}

/// Chunk `index` of `parts` equal chunks along the last axis.
pub fn split_last(x: &Tensor, parts: usize, index: usize) -> Result<Tensor> {
    let last = *x.shape().last().expect("tensors have rank >= 1");
    if parts == 0 || !last.is_multiple_of(parts) || index >= parts {
        return Err(Error::shape_mismatch(format!(
            "cannot take chunk {index} of {parts} from last axis of {:?}",
            x.shape()
        )));
    }
    let chunk = last / parts;
    let data = x
        .data()
        .chunks_exact(last)
        .flat_map(|row| row[index * chunk..(index + 1) * chunk].iter().copied())
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = chunk;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_relative_error, Rng};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::random_uniform(shape, &mut Rng::new(seed), -1.0, 1.0).unwrap()
    }

    /// Series expansion of erf, independent of libm.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn params_validation() {
        assert!(matches!(GroupNormParams::new(10, 3, 1e-5), Err(Error::Config(_))));
        assert!(GroupNormParams::new(8, 2, 0.0).is_err());
        let p = GroupNormParams::with_defaults(64).unwrap();
        assert_eq!(p.num_groups, 32);
        assert_eq!(p.channels_per_group(), 2);
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let x = Tensor::full(&[1, 2, 2, 8], 5.0).unwrap();
        for g in [1, 2, 8] {
            let p = GroupNormParams::new(8, g, 1e-5).unwrap();
            let y = naive_group_norm(&x, &p).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn group_norm_hand_example() {
        let x = t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let p = GroupNormParams::new(4, 1, 1e-5).unwrap();
        let y = naive_group_norm(&x, &p).unwrap();
        // mean 2.5, variance 1.25
        let s = (1.25f64 + 1e-5).sqrt();
        let want = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        for (&got, want) in y.data().iter().zip(want) {
            assert!((got as f64 - want).abs() < 1e-6);
        }
        assert!((y.data()[0] - -1.34164).abs() < 1e-5);
        assert!((y.data()[2] - 0.44721).abs() < 1e-5);
    }

    #[test]
    fn group_norm_grouping_matters() {
        // Channel c gets scale (c+1), so groups have different spread.
        let base = rand(&[1, 8, 8, 32], 3);
        let x = Tensor::from_fn(&[1, 8, 8, 32], |i| base.data()[i] * ((i % 32) + 1) as f32).unwrap();
        let a = naive_group_norm(&x, &GroupNormParams::new(32, 32, 1e-5).unwrap()).unwrap();
        let b = naive_group_norm(&x, &GroupNormParams::new(32, 1, 1e-5).unwrap()).unwrap();
        assert!(max_relative_error(&a, &b).unwrap() > 1e-2);
    }

    #[test]
    fn group_norm_statistics_property() {
        let x = Tensor::random_uniform(&[2, 4, 4, 16], &mut Rng::new(9), -3.0, 7.0).unwrap();
        let p = GroupNormParams::new(16, 4, 1e-5).unwrap();
        let y = naive_group_norm(&x, &p).unwrap();
        for b in 0..2 {
            for g in 0..4 {
                let vals: Vec<f64> = (0..16)
                    .flat_map(|hw| (0..4).map(move |c| (b * 16 + hw) * 16 + g * 4 + c))
                    .map(|o| y.data()[o] as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() <= 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() <= 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn group_norm_errors() {
        let p = GroupNormParams::new(4, 2, 1e-5).unwrap();
        let mut x = vec![1.0; 4];
        x[2] = f32::NAN;
        assert!(matches!(
            naive_group_norm(&t(&[1, 1, 1, 4], &x), &p),
            Err(Error::NumericInput { index: 2, .. })
        ));
        assert!(matches!(
            naive_group_norm(&t(&[1, 1, 1, 6], &[0.0; 6]), &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn group_norm_counts_four_passes() {
        let x = rand(&[1, 4, 4, 8], 1);
        let p = GroupNormParams::new(8, 2, 1e-5).unwrap();
        let (_, c) = instrument::measure(|| naive_group_norm(&x, &p).unwrap());
        assert!(c.input_passes >= 4);
        assert_eq!(c.bytes_labeled("grouped"), 4 * 128);
    }

    #[test]
    fn erf_matches_series() {
        for i in -30..=30 {
            let x = i as f64 * 0.1;
            assert!((erf(x) - erf_series(x)).abs() < 1e-7, "x={x}");
        }
        assert!((erf_series(std::f64::consts::FRAC_1_SQRT_2) - 0.6826895).abs() < 1e-7);
    }

    #[test]
    fn gelu_values() {
        let y = naive_gelu(&t(&[4], &[0.0, 1.0, -10.0, 10.0])).unwrap();
        assert_eq!(y.data()[0], 0.0);
        let want_one = 0.5 * (1.0 + erf_series(std::f64::consts::FRAC_1_SQRT_2));
        assert!((y.data()[1] as f64 - want_one).abs() < 1e-7);
        assert!((y.data()[1] - 0.8413447).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-8);
        assert!((y.data()[3] - 10.0).abs() < 1e-6);
        assert!(naive_gelu(&t(&[1], &[f32::INFINITY])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = naive_softmax(&t(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0])).unwrap();
        for &v in &y.data()[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let z = 1.0 + 1f64.exp() + 2f64.exp();
        let want = [1.0 / z, 1f64.exp() / z, 2f64.exp() / z];
        for (&g, w) in y.data()[3..].iter().zip(want) {
            assert!((g as f64 - w).abs() < 1e-7);
        }
        assert!((y.data()[3] - 0.09003).abs() < 1e-5);
        assert!((y.data()[5] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariance() {
        let a = Tensor::random_uniform(&[6, 17], &mut Rng::new(4), -20.0, 20.0)
            .unwrap()
            .map(|x| (x * 16.0).round() / 16.0);
        let y = naive_softmax(&a).unwrap();
        for row in y.data().chunks_exact(17) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted = add_scalar(&a, 3.25);
        let ys = naive_softmax(&shifted).unwrap();
        assert!(max_relative_error(&ys, &y).unwrap() <= 1e-6);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let q = t(&[1, 3], &[0.3, -1.0, 2.0]);
        let k = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let v = t(&[1, 3], &[4.0, 5.0, -6.0]);
        assert_eq!(naive_attention(&q, &k, &v).unwrap().data(), v.data());
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = rand(&[4, 5], 2);
        let krow = rand(&[1, 5], 3);
        let k = Tensor::from_fn(&[6, 5], |i| krow.data()[i % 5]).unwrap();
        let v = rand(&[6, 5], 4);
        let y = naive_attention(&q, &k, &v).unwrap();
        for i in 0..4 {
            for c in 0..5 {
                let mean: f64 = (0..6).map(|j| v.data()[j * 5 + c] as f64).sum::<f64>() / 6.0;
                assert!((y.data()[i * 5 + c] as f64 - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_shape_errors() {
        let q = rand(&[2, 4], 1);
        let k = rand(&[3, 5], 2);
        assert!(matches!(naive_attention(&q, &k, &k), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_identity_and_counting() {
        let x = rand(&[1, 5, 6, 1], 8);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let y = naive_conv3x3(&x, &t(&[3, 3, 1, 1], &w), 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 1]);
        for oy in 0..3 {
            for ox in 0..4 {
                assert_eq!(y.get(&[0, oy, ox, 0]), x.get(&[0, oy + 1, ox + 1, 0]));
            }
        }
        let ones = Tensor::full(&[1, 5, 5, 1], 1.0).unwrap();
        let y = naive_conv3x3(&ones, &Tensor::full(&[3, 3, 1, 1], 1.0).unwrap(), 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 9.0));
        let y = naive_conv3x3(&ones, &Tensor::full(&[3, 3, 1, 1], 1.0).unwrap(), 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5, 1]);
        assert_eq!(y.get(&[0, 0, 0, 0]), Some(4.0));
        assert_eq!(y.get(&[0, 2, 2, 0]), Some(9.0));
    }

    #[test]
    fn conv_is_linear() {
        let x = rand(&[1, 8, 8, 4], 10);
        let w = rand(&[3, 3, 4, 6], 11);
        let base = naive_conv3x3(&x, &w, 1).unwrap();
        let scaled = naive_conv3x3(&mul_scalar(&x, -4.0), &w, 1).unwrap();
        assert_eq!(scaled, mul_scalar(&base, -4.0));
    }

    #[test]
    fn conv_errors() {
        let x = rand(&[1, 2, 2, 1], 1);
        let w = rand(&[3, 3, 1, 1], 2);
        assert!(naive_conv3x3(&x, &w, 0).is_err());
        assert!(naive_conv3x3(&x, &w, 2).is_err());
        assert!(naive_conv3x3(&rand(&[1, 4, 4, 2], 3), &w, 0).is_err());
    }

    #[test]
    fn matmul_both_layouts() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(
            naive_matmul(&a, &b, false, 1.0).unwrap().data(),
            &[4.0, 5.0, 10.0, 11.0]
        );
        let bt = t(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(
            naive_matmul(&a, &bt, true, 2.0).unwrap().data(),
            &[8.0, 10.0, 20.0, 22.0]
        );
    }

    #[test]
    fn split_chunks() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(split_last(&x, 2, 1).unwrap().data(), &[3.0, 4.0, 7.0, 8.0]);
        assert!(split_last(&x, 3, 0).is_err());
    }
}
