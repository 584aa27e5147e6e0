//! Forward primitives. Every op checks shapes up front and records a
//! backward closure capturing the parent handles it needs.

use super::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, format!("expected 2-D tensor, got {other:?}"))),
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data: Vec<f64> = self
            .to_vec()
            .iter()
            .zip(other.to_vec().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                if pa.requires_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(g);
                }
            },
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data: Vec<f64> = self
            .to_vec()
            .iter()
            .zip(other.to_vec().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                if pa.requires_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    pb.accumulate_grad(&neg);
                }
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data: Vec<f64> = self
            .to_vec()
            .iter()
            .zip(other.to_vec().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                if pa.requires_grad() {
                    let bv = pb.to_vec();
                    let da: Vec<f64> = g.iter().zip(&bv).map(|(gi, b)| gi * b).collect();
                    pa.accumulate_grad(&da);
                }
                if pb.requires_grad() {
                    let av = pa.to_vec();
                    let db: Vec<f64> = g.iter().zip(&av).map(|(gi, a)| gi * a).collect();
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let data: Vec<f64> = self
            .to_vec()
            .iter()
            .zip(other.to_vec().iter())
            .map(|(a, b)| a / b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let bv = pb.to_vec();
                if pa.requires_grad() {
                    let da: Vec<f64> = g.iter().zip(&bv).map(|(gi, b)| gi / b).collect();
                    pa.accumulate_grad(&da);
                }
                if pb.requires_grad() {
                    let av = pa.to_vec();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(gi, (a, b))| -gi * a / (b * b))
                        .collect();
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data: Vec<f64> = self.to_vec().iter().map(|v| v * factor).collect();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let d: Vec<f64> = g.iter().map(|v| v * factor).collect();
            p.accumulate_grad(&d);
        })
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let data: Vec<f64> = self.to_vec().iter().map(|v| v + value).collect();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            p.accumulate_grad(g);
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul", self)?;
        let (k2, n) = dims2("matmul", other)?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!(
                    "inner dims differ: {:?} x {:?}",
                    self.shape(),
                    other.shape()
                ),
            ));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * b[p * n + j];
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                if pa.requires_grad() {
                    // dA = G . B^T
                    let bv = pb.to_vec();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    pa.accumulate_grad(&da);
                }
                if pb.requires_grad() {
                    // dB = A^T . G
                    let av = pa.to_vec();
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2("transpose", self)?;
        let a = self.to_vec();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            move |g| {
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                p.accumulate_grad(&da);
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if want != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            move |g| {
                p.accumulate_grad(g);
            },
        ))
    }

    /// Concatenates 2-D tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(axis: usize, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no tensors given".into()));
        }
        if axis > 1 {
            return Err(shape_err("concat", format!("axis {axis} unsupported")));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for t in parts {
            dims.push(dims2("concat", t)?);
        }
        if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(shape_err("concat", "column counts differ".into()));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for t in parts {
                out.extend_from_slice(&t.to_vec());
            }
            let owned: Vec<Tensor> = parts.to_vec();
            let row_counts: Vec<usize> = dims.iter().map(|d| d.0).collect();
            Ok(Tensor::from_op(
                vec![rows, cols],
                out,
                parts.to_vec(),
                move |g| {
                    let mut offset = 0;
                    for (t, &r) in owned.iter().zip(&row_counts) {
                        let len = r * cols;
                        if t.requires_grad() {
                            t.accumulate_grad(&g[offset..offset + len]);
                        }
                        offset += len;
                    }
                },
            ))
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(shape_err("concat", "row counts differ".into()));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let datas: Vec<Vec<f64>> = parts.iter().map(|t| t.to_vec()).collect();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (d, &(_, c)) in datas.iter().zip(&dims) {
                    out.extend_from_slice(&d[r * c..(r + 1) * c]);
                }
            }
            let owned: Vec<Tensor> = parts.to_vec();
            let col_counts: Vec<usize> = dims.iter().map(|d| d.1).collect();
            Ok(Tensor::from_op(
                vec![rows, cols],
                out,
                parts.to_vec(),
                move |g| {
                    let mut col_off = 0;
                    for (t, &c) in owned.iter().zip(&col_counts) {
                        if t.requires_grad() {
                            let mut dt = vec![0.0; rows * c];
                            for r in 0..rows {
                                dt[r * c..(r + 1) * c].copy_from_slice(
                                    &g[r * cols + col_off..r * cols + col_off + c],
                                );
                            }
                            t.accumulate_grad(&dt);
                        }
                        col_off += c;
                    }
                },
            ))
        }
    }

    /// Tiles a 2-D tensor `times` times along axis 0.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor> {
        let (rows, cols) = dims2("repeat_rows", self)?;
        let a = self.to_vec();
        let mut out = Vec::with_capacity(times * rows * cols);
        for _ in 0..times {
            out.extend_from_slice(&a);
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![times * rows, cols],
            out,
            vec![self.clone()],
            move |g| {
                let mut da = vec![0.0; rows * cols];
                for rep in 0..times {
                    let base = rep * rows * cols;
                    for i in 0..rows * cols {
                        da[i] += g[base + i];
                    }
                }
                p.accumulate_grad(&da);
            },
        ))
    }

    /// Selects rows by index (repeats allowed). Backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = dims2("gather_rows", self)?;
        for &i in indices {
            if i >= rows {
                return Err(shape_err(
                    "gather_rows",
                    format!("index {i} out of range for {rows} rows"),
                ));
            }
        }
        let a = self.to_vec();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&a[i * cols..(i + 1) * cols]);
        }
        let p = self.clone();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len(), cols],
            out,
            vec![self.clone()],
            move |g| {
                let mut da = vec![0.0; rows * cols];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        da[i * cols + c] += g[k * cols + c];
                    }
                }
                p.accumulate_grad(&da);
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = dims2("slice_cols", self)?;
        if start + len > cols {
            return Err(shape_err(
                "slice_cols",
                format!("range {start}..{} out of {cols} columns", start + len),
            ));
        }
        let a = self.to_vec();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&a[r * cols + start..r * cols + start + len]);
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![rows, len],
            out,
            vec![self.clone()],
            move |g| {
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                p.accumulate_grad(&da);
            },
        ))
    }

    /// Adds a `1 x C` row vector to every row of an `R x C` tensor.
    pub fn add_rowvec(&self, row: &Tensor) -> Result<Tensor> {
        let (rows, cols) = dims2("add_rowvec", self)?;
        let (rr, rc) = dims2("add_rowvec", row)?;
        if rr != 1 || rc != cols {
            return Err(shape_err(
                "add_rowvec",
                format!(
                    "row vector {:?} does not match {:?}",
                    row.shape(),
                    self.shape()
                ),
            ));
        }
        let a = self.to_vec();
        let b = row.to_vec();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(a[r * cols + c] + b[c]);
            }
        }
        let (pa, pb) = (self.clone(), row.clone());
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone(), row.clone()],
            move |g| {
                if pa.requires_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.requires_grad() {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, dfdx: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let a = self.to_vec();
        let out: Vec<f64> = a.iter().map(|&v| f(v)).collect();
        let out_copy = out.clone();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let av = p.to_vec();
            let da: Vec<f64> = g
                .iter()
                .zip(av.iter().zip(&out_copy))
                .map(|(gi, (&x, &y))| gi * dfdx(x, y))
                .collect();
            p.accumulate_grad(&da);
        })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&self) -> Result<Tensor> {
        if self.to_vec().iter().any(|&v| v <= 0.0) {
            return Err(Error::Runtime("ln of non-positive value".into()));
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    /// Numerically stable softplus log(1 + e^x).
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn clamp_min(&self, min: f64) -> Tensor {
        self.unary(
            move |x| x.max(min),
            move |x, _| if x >= min { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise Huber penalty: quadratic within `delta`, linear outside.
    pub fn huber(&self, delta: f64) -> Tensor {
        self.unary(
            move |x| {
                if x.abs() <= delta {
                    0.5 * x * x
                } else {
                    delta * (x.abs() - 0.5 * delta)
                }
            },
            move |x, _| {
                if x.abs() <= delta {
                    x
                } else {
                    delta * x.signum()
                }
            },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.to_vec().iter().sum();
        let n = self.numel();
        let p = self.clone();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g| {
            let da = vec![g[0]; n];
            p.accumulate_grad(&da);
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        Ok(self.sum_all().scale(1.0 / n as f64))
    }

    pub fn sum_axis0(&self) -> Result<Tensor> {
        let (rows, cols) = dims2("sum_axis0", self)?;
        let a = self.to_vec();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += a[r * cols + c];
            }
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![1, cols],
            out,
            vec![self.clone()],
            move |g| {
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols..(r + 1) * cols].copy_from_slice(g);
                }
                p.accumulate_grad(&da);
            },
        ))
    }

    pub fn mean_axis0(&self) -> Result<Tensor> {
        let (rows, _) = dims2("mean_axis0", self)?;
        if rows == 0 {
            return Err(shape_err("mean_axis0", "zero rows".into()));
        }
        Ok(self.sum_axis0()?.scale(1.0 / rows as f64))
    }

    /// Per-column running sum down axis 0.
    pub fn cumsum_axis0(&self) -> Result<Tensor> {
        let (rows, cols) = dims2("cumsum_axis0", self)?;
        let a = self.to_vec();
        let mut out = vec![0.0; rows * cols];
        for c in 0..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += a[r * cols + c];
                out[r * cols + c] = acc;
            }
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone()],
            move |g| {
                let mut da = vec![0.0; rows * cols];
                for c in 0..cols {
                    let mut acc = 0.0;
                    for r in (0..rows).rev() {
                        acc += g[r * cols + c];
                        da[r * cols + c] = acc;
                    }
                }
                p.accumulate_grad(&da);
            },
        ))
    }

    /// Softmax over `axis` of a 2-D tensor (1 = per row, 0 = per column).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (rows, cols) = dims2("softmax", self)?;
        if axis > 1 {
            return Err(shape_err("softmax", format!("axis {axis} unsupported")));
        }
        let a = self.to_vec();
        let mut out = vec![0.0; rows * cols];
        let (slices, len, stride, base_step) = if axis == 1 {
            (rows, cols, 1usize, cols)
        } else {
            (cols, rows, cols, 1usize)
        };
        for s in 0..slices {
            let base = s * base_step;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(a[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (a[base + i * stride] - max).exp();
                out[base + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                out[base + i * stride] /= sum;
            }
        }
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone()],
            move |g| {
                let mut da = vec![0.0; rows * cols];
                for s in 0..slices {
                    let base = s * base_step;
                    let mut dot = 0.0;
                    for i in 0..len {
                        dot += g[base + i * stride] * y[base + i * stride];
                    }
                    for i in 0..len {
                        let yi = y[base + i * stride];
                        da[base + i * stride] = yi * (g[base + i * stride] - dot);
                    }
                }
                p.accumulate_grad(&da);
            },
        ))
    }

    /// Row softmax restricted to allowed entries; disallowed outputs are
    /// exactly zero. Errors if any row has no allowed entry.
    pub fn masked_softmax_rows(&self, allow: &[bool]) -> Result<Tensor> {
        let (rows, cols) = dims2("masked_softmax_rows", self)?;
        if allow.len() != rows * cols {
            return Err(shape_err(
                "masked_softmax_rows",
                format!("mask length {} != {}", allow.len(), rows * cols),
            ));
        }
        let a = self.to_vec();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for c in 0..cols {
                if allow[r * cols + c] {
                    any = true;
                    max = max.max(a[r * cols + c]);
                }
            }
            if !any {
                return Err(Error::State(format!(
                    "masked_softmax_rows: row {r} has no allowed entry"
                )));
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if allow[r * cols + c] {
                    let e = (a[r * cols + c] - max).exp();
                    out[r * cols + c] = e;
                    sum += e;
                }
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone()],
            move |g| {
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += g[r * cols + c] * y[r * cols + c];
                    }
                    for c in 0..cols {
                        let yi = y[r * cols + c];
                        da[r * cols + c] = yi * (g[r * cols + c] - dot);
                    }
                }
                p.accumulate_grad(&da);
            },
        ))
    }

    /// Row-wise layer normalization with learned gain/bias (`1 x C` each).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let (rows, cols) = dims2("layer_norm", self)?;
        let (gr, gc) = dims2("layer_norm", gamma)?;
        let (br, bc) = dims2("layer_norm", beta)?;
        if gr != 1 || br != 1 || gc != cols || bc != cols {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} do not match {:?}",
                    gamma.shape(),
                    beta.shape(),
                    self.shape()
                ),
            ));
        }
        if cols == 0 {
            return Err(shape_err("layer_norm", "zero columns".into()));
        }
        let a = self.to_vec();
        let gv = gamma.to_vec();
        let bv = beta.to_vec();
        let mut out = vec![0.0; rows * cols];
        let mut normed = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &a[r * cols..(r + 1) * cols];
            let mean: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let nv = (row[c] - mean) * istd;
                normed[r * cols + c] = nv;
                out[r * cols + c] = nv * gv[c] + bv[c];
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let gv = pg.to_vec();
                if px.requires_grad() {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let istd = inv_std[r];
                        let mut mean_gh = 0.0;
                        let mut mean_gh_n = 0.0;
                        for c in 0..cols {
                            let gh = g[r * cols + c] * gv[c];
                            mean_gh += gh;
                            mean_gh_n += gh * normed[r * cols + c];
                        }
                        mean_gh /= cols as f64;
                        mean_gh_n /= cols as f64;
                        for c in 0..cols {
                            let gh = g[r * cols + c] * gv[c];
                            dx[r * cols + c] =
                                (gh - mean_gh - normed[r * cols + c] * mean_gh_n) * istd;
                        }
                    }
                    px.accumulate_grad(&dx);
                }
                if pg.requires_grad() {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * normed[r * cols + c];
                        }
                    }
                    pg.accumulate_grad(&dg);
                }
                if pb.requires_grad() {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    pb.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Affine map `x . w + b` with `b` broadcast across rows.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.matmul(w)?.add_rowvec(b)
    }

    /// Inverted dropout with a seeded mask; identity when `train` is false.
    pub fn dropout(&self, rate: f64, train: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self
            .to_vec()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let p = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g| {
                let da: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
                p.accumulate_grad(&da);
            },
        ))
    }
}
