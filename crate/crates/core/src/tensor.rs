//! Dense row-major tensors and the convolution kernels built on them.
//!
//! Convolution is cross-correlation: no kernel flip. For an input of shape
//! `[n, c, h, w]`, weights `[m, c, k, k]`, stride `s` and zero padding `p`,
//!
//! ```text
//! out[b, o, y, x] = bias[o] + sum_{ci, i, j} w[o, ci, i, j] * in[b, ci, y*s + i - p, x*s + j - p]
//! ```
//!
//! with out-of-range input positions reading as zero, and output size
//! `floor((h + 2p - k) / s) + 1`.

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(None, format!("invalid tensor shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(None, format!("shape {shape:?} implies {expected} elements, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid tensor shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The shape as `[n, c, h, w]`, or an error naming `layer`.
    pub fn dims4(&self, layer: Option<usize>) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(Error::shape(layer, format!("expected a rank-4 tensor, got {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(None, format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(None, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// Resolved sizes of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weights: &[usize], stride: usize, pad: usize, layer: Option<usize>) -> Result<Self> {
        let [n, c, h, w] = match input {
            &[n, c, h, w] => [n, c, h, w],
            s => return Err(Error::shape(layer, format!("input must be [n, c, h, w], got {s:?}"))),
        };
        let [m, wc, kh, kw] = match weights {
            &[m, wc, kh, kw] => [m, wc, kh, kw],
            s => return Err(Error::shape(layer, format!("weights must be [out, in, k, k], got {s:?}"))),
        };
        if wc != c {
            return Err(Error::shape(layer, format!("input channels: input has {c}, weights expect {wc}")));
        }
        if kh != kw {
            return Err(Error::shape(layer, format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape(layer, "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                layer,
                format!("kernel {kh} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            out_channels: m,
            kernel: kh,
            stride,
            pad,
            in_h: h,
            in_w: w,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_sample_len(&self) -> usize {
        self.out_channels * self.out_positions()
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Input offset read by patch row `q` at output position `p`, if in range.
    #[inline]
    fn source(&self, q: usize, p: usize) -> Option<usize> {
        let kk = self.kernel * self.kernel;
        let (ci, r) = (q / kk, q % kk);
        let (ki, kj) = (r / self.kernel, r % self.kernel);
        let (oy, ox) = (p / self.out_w, p % self.out_w);
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        if y >= self.in_h || x >= self.in_w {
            return None;
        }
        Some((ci * self.in_h + y) * self.in_w + x)
    }

    /// Unfolds one sample into a `[c*k*k, out_h*out_w]` column matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let np = self.out_positions();
        for q in 0..self.patch_len() {
            let row = &mut cols[q * np..(q + 1) * np];
            for (p, v) in row.iter_mut().enumerate() {
                *v = self.source(q, p).map_or(0.0, |s| sample[s]);
            }
        }
    }

    /// Folds a column matrix back onto one sample, summing overlaps.
    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let np = self.out_positions();
        for q in 0..self.patch_len() {
            let row = &cols[q * np..(q + 1) * np];
            for (p, &v) in row.iter().enumerate() {
                if let Some(s) = self.source(q, p) {
                    sample[s] += v;
                }
            }
        }
    }
}

/// 2D cross-correlation, see the module docs for the exact indexing.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), weights.shape(), stride, pad, None)?;
    if let Some(b) = bias {
        if b.len() != geo.out_channels {
            return Err(Error::shape(None, format!("bias length {} != out channels {}", b.len(), geo.out_channels)));
        }
    }
    Ok(conv_forward(&geo, input.data(), weights.data(), bias.map(Tensor::data)))
}

pub(crate) fn conv_forward(geo: &ConvGeometry, input: &[f64], weights: &[f64], bias: Option<&[f64]>) -> Tensor {
    let (np, pl) = (geo.out_positions(), geo.patch_len());
    let (in_len, out_len) = (geo.in_sample_len(), geo.out_sample_len());
    let mut out = Tensor::zeros(&geo.output_shape());
    par::for_each_chunk_mut(out.data_mut(), out_len, |b, out_s| {
        let mut cols = vec![0.0; pl * np];
        geo.im2col(&input[b * in_len..(b + 1) * in_len], &mut cols);
        for o in 0..geo.out_channels {
            let acc = &mut out_s[o * np..(o + 1) * np];
            let b0 = bias.map_or(0.0, |b| b[o]);
            acc.iter_mut().for_each(|v| *v = b0);
            let wrow = &weights[o * pl..(o + 1) * pl];
            for (q, &wq) in wrow.iter().enumerate() {
                let col = &cols[q * np..(q + 1) * np];
                for (a, &c) in acc.iter_mut().zip(col) {
                    *a += wq * c;
                }
            }
        }
    });
    out
}

/// Propagates `upstream` (shape of the output) back to the input through the
/// linear map defined by `weights`: the transposed convolution.
pub(crate) fn conv_input_adjoint(geo: &ConvGeometry, upstream: &[f64], weights: &[f64]) -> Tensor {
    let (np, pl) = (geo.out_positions(), geo.patch_len());
    let (in_len, out_len) = (geo.in_sample_len(), geo.out_sample_len());
    let mut dx = Tensor::zeros(&[geo.batch, geo.in_channels, geo.in_h, geo.in_w]);
    par::for_each_chunk_mut(dx.data_mut(), in_len, |b, dx_s| {
        let g = &upstream[b * out_len..(b + 1) * out_len];
        let mut cols = vec![0.0; pl * np];
        for o in 0..geo.out_channels {
            let grow = &g[o * np..(o + 1) * np];
            let wrow = &weights[o * pl..(o + 1) * pl];
            for (q, &wq) in wrow.iter().enumerate() {
                if wq == 0.0 {
                    continue;
                }
                let col = &mut cols[q * np..(q + 1) * np];
                for (c, &gv) in col.iter_mut().zip(grow) {
                    *c += wq * gv;
                }
            }
        }
        geo.col2im(&cols, dx_s);
    });
    dx
}

/// Correlates `upstream` with the (unfolded) `input` to obtain per-weight and
/// per-bias sums over the batch. Per-sample partials are summed in sample
/// order.
pub(crate) fn conv_weight_adjoint(geo: &ConvGeometry, upstream: &[f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (np, pl) = (geo.out_positions(), geo.patch_len());
    let (in_len, out_len) = (geo.in_sample_len(), geo.out_sample_len());
    let partials = par::map_range(geo.batch, |b| {
        let g = &upstream[b * out_len..(b + 1) * out_len];
        let mut cols = vec![0.0; pl * np];
        geo.im2col(&input[b * in_len..(b + 1) * in_len], &mut cols);
        let mut dw = vec![0.0; geo.out_channels * pl];
        let mut db = vec![0.0; geo.out_channels];
        for o in 0..geo.out_channels {
            let grow = &g[o * np..(o + 1) * np];
            db[o] = grow.iter().sum();
            for q in 0..pl {
                let col = &cols[q * np..(q + 1) * np];
                dw[o * pl + q] = grow.iter().zip(col).map(|(a, b)| a * b).sum();
            }
        }
        (dw, db)
    });
    let mut dw = vec![0.0; geo.out_channels * pl];
    let mut db = vec![0.0; geo.out_channels];
    for (pw, pb) in partials {
        dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    (dw, db)
}
