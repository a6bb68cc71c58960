//! Symmetric per-row INT8 weight quantization.

use crate::error::{bail, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Row-major `i8` values with one positive scale per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i8>,
    pub scales: Vec<f64>,
}

impl QuantizedMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dequantize(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            let s = self.scales[r];
            data.extend(self.values[r * self.cols..(r + 1) * self.cols].iter().map(|&v| v as f64 * s));
        }
        Tensor::matrix(self.rows, self.cols, data).expect("shape preserved")
    }

    /// Bytes of weight storage (values plus f64 scales).
    pub fn storage_bytes(&self) -> usize {
        self.values.len() + 8 * self.scales.len()
    }
}

/// `scale = max|w|/127` per row, `q = round(w/scale)` with halves away from
/// zero; an all-zero row gets scale 1.
pub fn quantize_int8(w: &Tensor) -> Result<QuantizedMatrix> {
    if !w.is_finite() {
        bail!(Numeric, "cannot quantize non-finite weights");
    }
    let (rows, cols) = w.dims2();
    let mut values = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.row(r);
        let absmax = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = if absmax == 0.0 { 1.0 } else { absmax / 127.0 };
        // f64::round rounds half away from zero
        values.extend(row.iter().map(|&x| (x / scale).round().clamp(-127.0, 127.0) as i8));
        scales.push(scale);
    }
    Ok(QuantizedMatrix { rows, cols, values, scales })
}

/// `W·x` for quantized `W` (`m×k`) and full-precision `x` (`k×n`).
///
/// Each output row accumulates `q_ij · x_j` and is rescaled once by the row scale.
pub fn quantized_matmul(q: &QuantizedMatrix, x: &Tensor) -> Result<Tensor> {
    let (k, n) = x.dims2();
    if q.cols != k {
        bail!(Dimension, "quantized {}x{} times {k}x{n}", q.rows, q.cols);
    }
    let xd = x.data();
    let mut out = vec![0.0; q.rows * n];
    for i in 0..q.rows {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &qv) in q.values[i * k..(i + 1) * k].iter().enumerate() {
            if qv == 0 {
                continue;
            }
            let qf = qv as f64;
            for (o, &xv) in orow.iter_mut().zip(&xd[p * n..(p + 1) * n]) {
                *o += qf * xv;
            }
        }
        let s = q.scales[i];
        orow.iter_mut().for_each(|o| *o *= s);
    }
    Tensor::matrix(q.rows, n, out)
}

/// `x·Wᵀ` for row-major activations `x` (`t×k`) against quantized `W` (`m×k`).
/// This is the layout used by the model's inference path, where each output
/// feature owns one quantized row.
pub fn quantized_matmul_rows(x: &Tensor, q: &QuantizedMatrix) -> Result<Tensor> {
    let (t, k) = x.dims2();
    if q.cols != k {
        bail!(Dimension, "{t}x{k} activations against quantized {}x{}", q.rows, q.cols);
    }
    let mut out = vec![0.0; t * q.rows];
    for r in 0..t {
        let xr = x.row(r);
        for j in 0..q.rows {
            let acc: f64 = q.values[j * k..(j + 1) * k].iter().zip(xr).map(|(&a, &b)| a as f64 * b).sum();
            out[r * q.rows + j] = acc * q.scales[j];
        }
    }
    Tensor::matrix(t, q.rows, out)
}
