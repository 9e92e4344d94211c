//! Winograd convolution F(m×m, 3×3) for m ∈ {2, 4}.
//!
//! A `(m+2)×(m+2)` input tile `d` and the 3×3 filter `g` are transformed
//! into the same domain, multiplied element-wise, and transformed back:
//!
//! ```text
//! Y = Aᵀ [ (G g Gᵀ) ⊙ (Bᵀ d B) ] A
//! ```
//!
//! Summed over input channels, the element-wise products at each of the
//! `(m+2)²` positions form one `(tiles × Cin)·(Cin × Cout)` matrix
//! multiplication, so a layer becomes `(m+2)²` independent GEMMs.

use std::ops::{Add, AddAssign, Mul};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::instrument::{self, AllocKind};
use crate::reference_ops::{conv3x3_dims, conv3x3_output_dims};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

/// Small dense row-major matrix of transform coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        Matrix {
            rows: rows.len(),
            cols: C,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.at(r, c));
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinogradPlan {
    /// Output tile size.
    pub m: usize,
    /// Input tile size, `m + 3 − 1`.
    pub alpha: usize,
    /// Filter transform, `alpha × 3`.
    pub g: Matrix,
    /// Input transform, `alpha × alpha` (applied as `Bᵀ d B`).
    pub b: Matrix,
    /// Output transform, `alpha × m` (applied as `Aᵀ M A`).
    pub a: Matrix,
}

/// Standard transforms: F(2,3) on points {0, 1, −1} and F(4,3) on
/// {0, 1, −1, 2, −2}, each with the point at infinity.
pub fn make_plan(m: usize) -> Result<WinogradPlan> {
    let (bt, g, at) = match m {
        2 => (
            Matrix::from_rows(&[
                [1.0, 0.0, -1.0, 0.0],
                [0.0, 1.0, 1.0, 0.0],
                [0.0, -1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0, -1.0],
            ]),
            Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0.0, 0.0, 1.0]]),
            Matrix::from_rows(&[[1.0, 1.0, 1.0, 0.0], [0.0, 1.0, -1.0, -1.0]]),
        ),
        4 => (
            Matrix::from_rows(&[
                [4.0, 0.0, -5.0, 0.0, 1.0, 0.0],
                [0.0, -4.0, -4.0, 1.0, 1.0, 0.0],
                [0.0, 4.0, -4.0, -1.0, 1.0, 0.0],
                [0.0, -2.0, -1.0, 2.0, 1.0, 0.0],
                [0.0, 2.0, -1.0, -2.0, 1.0, 0.0],
                [0.0, 4.0, 0.0, -5.0, 0.0, 1.0],
            ]),
            Matrix::from_rows(&[
                [1.0 / 4.0, 0.0, 0.0],
                [-1.0 / 6.0, -1.0 / 6.0, -1.0 / 6.0],
                [-1.0 / 6.0, 1.0 / 6.0, -1.0 / 6.0],
                [1.0 / 24.0, 1.0 / 12.0, 1.0 / 6.0],
                [1.0 / 24.0, -1.0 / 12.0, 1.0 / 6.0],
                [0.0, 0.0, 1.0],
            ]),
            Matrix::from_rows(&[
                [1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
                [0.0, 1.0, -1.0, 2.0, -2.0, 0.0],
                [0.0, 1.0, 1.0, 4.0, 4.0, 0.0],
                [0.0, 1.0, -1.0, 8.0, -8.0, 1.0],
            ]),
        ),
        other => return Err(Error::UnsupportedTile(other)),
    };
    Ok(WinogradPlan {
        m,
        alpha: m + KERNEL - 1,
        g,
        b: bt.transpose(),
        a: at.transpose(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub padding: usize,
    pub stride: usize,
    pub kernel: [usize; 2],
}

impl ConvSpec {
    /// Stride-1 3×3 convolution.
    pub fn new(in_channels: usize, out_channels: usize, height: usize, width: usize, padding: usize) -> Result<Self> {
        if padding > 1 {
            return Err(Error::Precondition(format!("padding must be 0 or 1, got {padding}")));
        }
        if in_channels == 0 || out_channels == 0 || height == 0 || width == 0 {
            return Err(Error::Precondition("conv dimensions must be positive".into()));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            height,
            width,
            padding,
            stride: 1,
            kernel: [KERNEL, KERNEL],
        })
    }

    /// Spec matching an NHWC input and `[3,3,Cin,Cout]` weights.
    pub fn for_tensors(x: &Tensor, w: &Tensor, padding: usize) -> Result<Self> {
        let (_, h, wd, cin, cout) = conv3x3_dims(x, w)?;
        ConvSpec::new(cin, cout, h, wd, padding)
    }
}

/// Thresholds for [`is_profitable_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfitabilityRule {
    /// Minimum spatial extent in output tiles along each axis.
    pub min_tiles_per_axis: usize,
    pub min_in_channels: usize,
    pub min_out_channels: usize,
}

impl Default for ProfitabilityRule {
    fn default() -> Self {
        ProfitabilityRule {
            min_tiles_per_axis: 2,
            min_in_channels: 8,
            min_out_channels: 8,
        }
    }
}

/// Default rule: stride 1, 3×3 kernel, `min(H, W) ≥ 2m`, and at least 8
/// input and 8 output channels.
pub fn is_profitable(spec: &ConvSpec, plan: &WinogradPlan) -> bool {
    is_profitable_with(spec, plan, &ProfitabilityRule::default())
}

pub fn is_profitable_with(spec: &ConvSpec, plan: &WinogradPlan, rule: &ProfitabilityRule) -> bool {
    spec.stride == 1
        && spec.kernel == [KERNEL, KERNEL]
        && spec.height.min(spec.width) >= rule.min_tiles_per_axis * plan.m
        && spec.in_channels >= rule.min_in_channels
        && spec.out_channels >= rule.min_out_channels
}

/// Arithmetic type the transforms and GEMMs run in.
pub trait Accum: Copy + Send + Sync + Default + Add<Output = Self> + Mul<Output = Self> + AddAssign {
    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Accum for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Accum for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

struct Coeffs<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Accum> Coeffs<T> {
    fn of(m: &Matrix) -> Self {
        Coeffs {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }
}

/// `L · X · R` for a row-major `X` of shape `l.cols × r.rows`.
fn sandwich<T: Accum>(l: &Coeffs<T>, x: &[T], r: &Coeffs<T>, out: &mut [T]) {
    let mut tmp = vec![T::default(); l.rows * r.rows];
    for i in 0..l.rows {
        for k in 0..l.cols {
            let c = l.data[i * l.cols + k];
            for j in 0..r.rows {
                tmp[i * r.rows + j] += c * x[k * r.rows + j];
            }
        }
    }
    out.fill(T::default());
    for i in 0..l.rows {
        for k in 0..r.rows {
            let t = tmp[i * r.rows + k];
            for j in 0..r.cols {
                out[i * r.cols + j] += t * r.data[k * r.cols + j];
            }
        }
    }
}

/// Winograd convolution with `f64` transforms and accumulation.
pub fn winograd_conv(x: &Tensor, w: &Tensor, spec: &ConvSpec, plan: &WinogradPlan) -> Result<Tensor> {
    winograd_conv_with::<f64>(x, w, spec, plan)
}

/// Winograd convolution with all arithmetic in `T`. `f32` shows the
/// numerical behaviour of a single-precision device kernel.
pub fn winograd_conv_with<T: Accum>(x: &Tensor, w: &Tensor, spec: &ConvSpec, plan: &WinogradPlan) -> Result<Tensor> {
    if spec.stride != 1 {
        return Err(Error::Precondition(format!(
            "Winograd requires stride 1, got {}",
            spec.stride
        )));
    }
    if spec.kernel != [KERNEL, KERNEL] {
        return Err(Error::Precondition(format!(
            "Winograd requires a 3x3 kernel, got {:?}",
            spec.kernel
        )));
    }
    let (n, h, wd, cin, cout) = conv3x3_dims(x, w)?;
    if (h, wd, cin, cout) != (spec.height, spec.width, spec.in_channels, spec.out_channels) {
        return Err(Error::ShapeMismatch(format!(
            "tensors {:?} / {:?} do not match {spec:?}",
            x.shape(),
            w.shape()
        )));
    }
    x.ensure_finite("winograd_conv")?;
    w.ensure_finite("winograd_conv")?;
    let pad = spec.padding;
    let (oh, ow) = conv3x3_output_dims(h, wd, pad)?;
    let (m, alpha) = (plan.m, plan.alpha);
    let positions = alpha * alpha;
    let (th, tw) = (oh.div_ceil(m), ow.div_ceil(m));
    let tiles = n * th * tw;
    let elem = std::mem::size_of::<T>();

    let g = Coeffs::<T>::of(&plan.g);
    let gt = Coeffs::<T>::of(&plan.g.transpose());
    let b = Coeffs::<T>::of(&plan.b);
    let bt = Coeffs::<T>::of(&plan.b.transpose());
    let a = Coeffs::<T>::of(&plan.a);
    let at = Coeffs::<T>::of(&plan.a.transpose());

    // Filter transform: u[pos][ci][co].
    let mut u = vec![T::default(); positions * cin * cout];
    instrument::record_alloc("transformed_weights", AllocKind::Weight, (u.len() * elem) as u64);
    let wdat = w.data();
    let mut filt = [T::default(); 9];
    let mut ut = vec![T::default(); positions];
    for ci in 0..cin {
        for co in 0..cout {
            for (t, f) in filt.iter_mut().enumerate() {
                *f = T::from_f32(wdat[(t * cin + ci) * cout + co]);
            }
            sandwich(&g, &filt, &gt, &mut ut);
            for (pos, &val) in ut.iter().enumerate() {
                u[(pos * cin + ci) * cout + co] = val;
            }
        }
    }

    // Input transform: v[pos][tile][ci]. Reads outside the (padded) input
    // are zero, which pads the input to a whole number of tiles.
    let mut v = vec![T::default(); positions * tiles * cin];
    instrument::record_alloc("transformed_input", AllocKind::Intermediate, (v.len() * elem) as u64);
    let xd = x.data();
    let mut patch = vec![T::default(); positions];
    let mut vt = vec![T::default(); positions];
    for bi in 0..n {
        for ty in 0..th {
            for tx in 0..tw {
                let tile = (bi * th + ty) * tw + tx;
                for ci in 0..cin {
                    for r in 0..alpha {
                        for c in 0..alpha {
                            let iy = (ty * m + r).checked_sub(pad).filter(|&iy| iy < h);
                            let ix = (tx * m + c).checked_sub(pad).filter(|&ix| ix < wd);
                            patch[r * alpha + c] = match (iy, ix) {
                                (Some(iy), Some(ix)) => T::from_f32(xd[((bi * h + iy) * wd + ix) * cin + ci]),
                                _ => T::default(),
                            };
                        }
                    }
                    sandwich(&bt, &patch, &b, &mut vt);
                    for (pos, &val) in vt.iter().enumerate() {
                        v[(pos * tiles + tile) * cin + ci] = val;
                    }
                }
            }
        }
    }
    instrument::record_pass();

    // One (tiles × cin)·(cin × cout) GEMM per transformed position.
    let mut prod = vec![T::default(); positions * tiles * cout];
    instrument::record_alloc(
        "transformed_output",
        AllocKind::Intermediate,
        (prod.len() * elem) as u64,
    );
    let multiplies: u64 = prod
        .par_chunks_exact_mut(tiles * cout)
        .enumerate()
        .map(|(pos, out)| {
            let lhs = &v[pos * tiles * cin..(pos + 1) * tiles * cin];
            let rhs = &u[pos * cin * cout..(pos + 1) * cin * cout];
            let mut count = 0u64;
            for (row, dst) in lhs.chunks_exact(cin).zip(out.chunks_exact_mut(cout)) {
                for (&val, r_row) in row.iter().zip(rhs.chunks_exact(cout)) {
                    for (d, &wv) in dst.iter_mut().zip(r_row) {
                        *d += val * wv;
                    }
                }
                count += (cin * cout) as u64;
            }
            count
        })
        .sum();
    instrument::record_multiplies(multiplies);

    // Output transform with cropping of the partial edge tiles.
    let mut out = vec![0.0f32; n * oh * ow * cout];
    let mut mt = vec![T::default(); positions];
    let mut yt = vec![T::default(); m * m];
    for bi in 0..n {
        for ty in 0..th {
            for tx in 0..tw {
                let tile = (bi * th + ty) * tw + tx;
                for co in 0..cout {
                    for (pos, slot) in mt.iter_mut().enumerate() {
                        *slot = prod[(pos * tiles + tile) * cout + co];
                    }
                    sandwich(&at, &mt, &a, &mut yt);
                    for r in 0..m {
                        let oy = ty * m + r;
                        if oy >= oh {
                            break;
                        }
                        for c in 0..m {
                            let ox = tx * m + c;
                            if ox >= ow {
                                break;
                            }
                            out[((bi * oh + oy) * ow + ox) * cout + co] = yt[r * m + c].to_f32();
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, cout], out)
}
