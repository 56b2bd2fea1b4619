//! Dense f32 tensor kernel.
//!
//! Every numeric primitive the detector and recognizer compose is defined
//! here. All arithmetic is 32-bit with a fixed row-major accumulation
//! order, so identical inputs always produce bit-identical outputs.

use crate::error::{Error, Result};

/// Dense N-dimensional array of f32 in row-major order.
///
/// `data.len()` always equals the product of `shape`; construction and
/// every operation in this module preserve that invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "Tensor::new",
                detail: format!("data length {} does not fill shape", data.len()),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    /// Uniform(-scale, scale) entries from the caller's RNG.
    pub fn uniform(shape: Vec<usize>, scale: f32, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rank-2 element access.
    pub fn at2(&self, r: usize, c: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Rank-3 element access, index order matches the stored shape.
    pub fn at3(&self, a: usize, b: usize, c: usize) -> f32 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(a * self.shape[1] + b) * self.shape[2] + c]
    }

    /// Borrow row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f32] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::BadShape {
                op,
                detail: format!("expected rank {rank}"),
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// `[m x k] * [k x n] -> [m x n]`, accumulating along k in index order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Row-wise softmax with max subtraction; each output row sums to 1.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.expect_rank("softmax_rows", 2)?;
    let (rows, cols) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= sum;
        }
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

/// Same-padded cross-correlation: `[C_in x H x W]` with kernel
/// `[C_out x C_in x k x k]` (k odd) and per-channel bias -> `[C_out x H x W]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank("conv2d", 3)?;
    kernel.expect_rank("conv2d", 4)?;
    bias.expect_rank("conv2d", 1)?;
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kc_in, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if kc_in != c_in || bias.shape[0] != c_out {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::BadShape {
            op: "conv2d",
            detail: "kernel must be square with odd side".into(),
            shape: kernel.shape.clone(),
        });
    }
    let half = (kh / 2) as isize;
    let mut out = vec![0.0f32; c_out * h * w];
    for co in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias.data[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let sy = y as isize + ky as isize - half;
                            let sx = x as isize + kx as isize - half;
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                continue; // zero padding
                            }
                            let iv = input.data[(ci * h + sy as usize) * w + sx as usize];
                            let kv =
                                kernel.data[((co * c_in + ci) * kh + ky) * kw + kx];
                            acc += iv * kv;
                        }
                    }
                }
                out[(co * h + y) * w + x] = acc;
            }
        }
    }
    Ok(Tensor { shape: vec![c_out, h, w], data: out })
}

/// Nearest-neighbor 2x upsample of the last two dimensions; each source
/// element becomes a 2x2 block. Leading dimensions are preserved.
pub fn upsample_nearest_2x(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::BadShape {
            op: "upsample_nearest_2x",
            detail: "need at least 2 dimensions".into(),
            shape: x.shape.clone(),
        });
    }
    let h = x.shape[x.rank() - 2];
    let w = x.shape[x.rank() - 1];
    let lead: usize = x.shape[..x.rank() - 2].iter().product();
    let mut shape = x.shape.clone();
    let r = shape.len();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    let mut out = vec![0.0f32; lead * 4 * h * w];
    for l in 0..lead {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(l * 2 * h + y) * 2 * w + xx] = x.data[(l * h + y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor { shape, data: out })
}

/// Bilinear interpolation of a rank-2 map at continuous `(x, y)`.
///
/// The value is the weighted sum of the four surrounding grid cells with
/// weights `(1 - |dx|) * (1 - |dy|)`; exact at integer coordinates.
/// Coordinates outside `[0, W-1] x [0, H-1]` are an error; clamping is the
/// caller's job.
pub fn bilinear_sample(map: &Tensor, x: f32, y: f32) -> Result<f32> {
    map.expect_rank("bilinear_sample", 2)?;
    let (h, w) = (map.shape[0], map.shape[1]);
    let (max_x, max_y) = ((w - 1) as f32, (h - 1) as f32);
    if !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y) {
        return Err(Error::OutOfRange { x, y, max_x, max_y });
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let dx = x - x0 as f32;
    let dy = y - y0 as f32;
    // Neighbor reads are clamped; the clamped cell only ever carries weight 0.
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let v00 = map.data[y0 * w + x0];
    let v01 = map.data[y0 * w + x1];
    let v10 = map.data[y1 * w + x0];
    let v11 = map.data[y1 * w + x1];
    Ok(v00 * (1.0 - dx) * (1.0 - dy)
        + v01 * dx * (1.0 - dy)
        + v10 * (1.0 - dx) * dy
        + v11 * dx * dy)
}

/// Elementwise logistic sigmoid; outputs lie in the open interval (0, 1).
pub fn sigmoid_map(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| sigmoid(v)).collect();
    Tensor { shape: x.shape.clone(), data }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise ReLU.
pub fn relu_map(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor { shape: x.shape.clone(), data }
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// Multiply every element by a scalar.
pub fn scale(x: &Tensor, s: f32) -> Tensor {
    let data = x.data.iter().map(|&v| v * s).collect();
    Tensor { shape: x.shape.clone(), data }
}

/// Identity matrix.
pub fn eye(n: usize) -> Tensor {
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor { shape: vec![n, n], data }
}

/// Columns `[start, end)` of a rank-2 tensor.
pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    x.expect_rank("slice_cols", 2)?;
    let (rows, cols) = (x.shape[0], x.shape[1]);
    if start >= end || end > cols {
        return Err(Error::BadShape {
            op: "slice_cols",
            detail: format!("column range {start}..{end} out of bounds"),
            shape: x.shape.clone(),
        });
    }
    let w = end - start;
    let mut data = Vec::with_capacity(rows * w);
    for r in 0..rows {
        data.extend_from_slice(&x.data[r * cols + start..r * cols + end]);
    }
    Ok(Tensor { shape: vec![rows, w], data })
}

/// Join rank-2 tensors side by side; all parts must share a row count.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::BadShape {
        op: "concat_cols",
        detail: "no parts".into(),
        shape: vec![],
    })?;
    first.expect_rank("concat_cols", 2)?;
    let rows = first.shape[0];
    let mut cols = 0;
    for p in parts {
        p.expect_rank("concat_cols", 2)?;
        if p.shape[0] != rows {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        cols += p.shape[1];
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            let w = p.shape[1];
            data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
        }
    }
    Ok(Tensor { shape: vec![rows, cols], data })
}

/// Add a bias vector to every row of a rank-2 tensor.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.expect_rank("add_row_bias", 2)?;
    if bias.rank() != 1 || bias.shape[0] != x.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "add_row_bias",
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let cols = x.shape[1];
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bias.data[i % cols])
        .collect();
    Ok(Tensor { shape: x.shape.clone(), data })
}

/// Transpose of a rank-2 tensor.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    x.expect_rank("transpose", 2)?;
    let (m, n) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data[i * n + j];
        }
    }
    Ok(Tensor { shape: vec![n, m], data: out })
}

/// 2x2 stride-2 max-pool over the last two dimensions (both must be even).
pub fn max_pool_2x(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::BadShape {
            op: "max_pool_2x",
            detail: "need at least 2 dimensions".into(),
            shape: x.shape.clone(),
        });
    }
    let h = x.shape[x.rank() - 2];
    let w = x.shape[x.rank() - 1];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::BadShape {
            op: "max_pool_2x",
            detail: "spatial dimensions must be even".into(),
            shape: x.shape.clone(),
        });
    }
    let lead: usize = x.shape[..x.rank() - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let mut shape = x.shape.clone();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let mut out = vec![0.0f32; lead * oh * ow];
    for l in 0..lead {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data[(l * h + 2 * y + dy) * w + 2 * xx + dx]);
                    }
                }
                out[(l * oh + y) * ow + xx] = m;
            }
        }
    }
    Ok(Tensor { shape, data: out })
}
