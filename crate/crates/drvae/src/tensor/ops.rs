//! Differentiable operations. Each op validates shapes, computes its values,
//! and registers a closure that routes the output gradient to its parents.
//! Backward closures read parent values through the node they receive and
//! never capture tensors, so the graph stays acyclic.

use super::{expect_matrix, numel_of, same_shape, Node, Tensor};
use crate::error::{Error, Result};

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let av = a.node.values.borrow();
    let bv = b.node.values.borrow();
    av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.node.values.borrow().iter().map(|&x| f(x)).collect()
}

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += aip * brow[j];
            }
        }
    }
    out
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = arow[p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        Tensor::op(
            "add",
            self.shape().to_vec(),
            zip_map(self, other, |a, b| a + b),
            vec![self.clone(), other.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                node.parents[0].accumulate(g);
                node.parents[1].accumulate(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        Tensor::op(
            "sub",
            self.shape().to_vec(),
            zip_map(self, other, |a, b| a - b),
            vec![self.clone(), other.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                node.parents[0].accumulate(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                node.parents[1].accumulate(&neg);
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        Tensor::op(
            "mul",
            self.shape().to_vec(),
            zip_map(self, other, |a, b| a * b),
            vec![self.clone(), other.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                let a = node.parents[0].node.values.borrow();
                let b = node.parents[1].node.values.borrow();
                let ga: Vec<f64> = g.iter().zip(b.iter()).map(|(gi, bi)| gi * bi).collect();
                let gb: Vec<f64> = g.iter().zip(a.iter()).map(|(gi, ai)| gi * ai).collect();
                drop(a);
                drop(b);
                node.parents[0].accumulate(&ga);
                node.parents[1].accumulate(&gb);
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        Tensor::op(
            "div",
            self.shape().to_vec(),
            zip_map(self, other, |a, b| a / b),
            vec![self.clone(), other.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                let a = node.parents[0].node.values.borrow();
                let b = node.parents[1].node.values.borrow();
                let ga: Vec<f64> = g.iter().zip(b.iter()).map(|(gi, bi)| gi / bi).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                    .collect();
                drop(a);
                drop(b);
                node.parents[0].accumulate(&ga);
                node.parents[1].accumulate(&gb);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        Tensor::op(
            "add_scalar",
            self.shape().to_vec(),
            map(self, |x| x + c),
            vec![self.clone()],
            Box::new(|node: &Node, g: &[f64]| node.parents[0].accumulate(g)),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        Tensor::op(
            "mul_scalar",
            self.shape().to_vec(),
            map(self, |x| x * c),
            vec![self.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
                node.parents[0].accumulate(&scaled);
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        Tensor::op(
            "exp",
            self.shape().to_vec(),
            map(self, f64::exp),
            vec![self.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                let out = node.values.borrow();
                let gx: Vec<f64> = g.iter().zip(out.iter()).map(|(gi, yi)| gi * yi).collect();
                drop(out);
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.node.values.borrow().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "input must be strictly positive".into(),
            });
        }
        Tensor::op(
            "log",
            self.shape().to_vec(),
            map(self, f64::ln),
            vec![self.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                let x = node.parents[0].node.values.borrow();
                let gx: Vec<f64> = g.iter().zip(x.iter()).map(|(gi, xi)| gi / xi).collect();
                drop(x);
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        Tensor::op(
            "sigmoid",
            self.shape().to_vec(),
            map(self, stable_sigmoid),
            vec![self.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                let out = node.values.borrow();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect();
                drop(out);
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    /// log σ(x), computed without underflow for very negative inputs.
    pub fn log_sigmoid(&self) -> Result<Tensor> {
        let values = map(self, |x| {
            if x >= 0.0 {
                -(-x).exp().ln_1p()
            } else {
                x - x.exp().ln_1p()
            }
        });
        Tensor::op(
            "log_sigmoid",
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                let x = node.parents[0].node.values.borrow();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gi, xi)| gi * stable_sigmoid(-xi))
                    .collect();
                drop(x);
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    /// Exponential linear unit: x for x > 0, exp(x) − 1 otherwise.
    pub fn elu(&self) -> Result<Tensor> {
        Tensor::op(
            "elu",
            self.shape().to_vec(),
            map(self, |x| if x > 0.0 { x } else { x.exp() - 1.0 }),
            vec![self.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                let x = node.parents[0].node.values.borrow();
                let out = node.values.borrow();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter().zip(out.iter()))
                    .map(|(gi, (xi, yi))| if *xi > 0.0 { *gi } else { gi * (yi + 1.0) })
                    .collect();
                drop(x);
                drop(out);
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    /// Clamp into [lo, hi]; the gradient passes through wherever the input
    /// already lies inside the interval and is zero where it was clipped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::Domain {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        Tensor::op(
            "clamp",
            self.shape().to_vec(),
            map(self, |x| x.clamp(lo, hi)),
            vec![self.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let x = node.parents[0].node.values.borrow();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gi, xi)| if *xi >= lo && *xi <= hi { *gi } else { 0.0 })
                    .collect();
                drop(x);
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    /// Elementwise max(x, c); the gradient passes only where x > c.
    pub fn max_scalar(&self, c: f64) -> Result<Tensor> {
        Tensor::op(
            "max_scalar",
            self.shape().to_vec(),
            map(self, |x| x.max(c)),
            vec![self.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let x = node.parents[0].node.values.borrow();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gi, xi)| if *xi > c { *gi } else { 0.0 })
                    .collect();
                drop(x);
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn square(&self) -> Result<Tensor> {
        Tensor::op(
            "square",
            self.shape().to_vec(),
            map(self, |x| x * x),
            vec![self.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                let x = node.parents[0].node.values.borrow();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gi, xi)| 2.0 * gi * xi)
                    .collect();
                drop(x);
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    /// Matrix product of a [m,k] and a [k,n] tensor.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = expect_matrix("matmul", self)?;
        let (k2, n) = expect_matrix("matmul", other)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m},{k}] · [{k2},{n}]"),
            });
        }
        let values = mm(&self.node.values.borrow(), &other.node.values.borrow(), m, k, n);
        Tensor::op(
            "matmul",
            vec![m, n],
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let a = node.parents[0].node.values.borrow();
                let b = node.parents[1].node.values.borrow();
                let ga = mm_nt(g, &b, m, n, k);
                let gb = mm_tn(&a, g, m, k, n);
                drop(a);
                drop(b);
                node.parents[0].accumulate(&ga);
                node.parents[1].accumulate(&gb);
            }),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = expect_matrix("transpose", self)?;
        let v = self.node.values.borrow();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = v[i * c + j];
            }
        }
        drop(v);
        Tensor::op(
            "transpose",
            vec![c, r],
            values,
            vec![self.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let mut gx = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        Tensor::op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|node: &Node, g: &[f64]| node.parents[0].accumulate(g)),
        )
    }

    /// Concatenate two matrices with equal row counts along the column axis.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c1) = expect_matrix("concat_cols", self)?;
        let (r2, c2) = expect_matrix("concat_cols", other)?;
        if r != r2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: format!("{r} rows vs {r2} rows"),
            });
        }
        let a = self.node.values.borrow();
        let b = other.node.values.borrow();
        let mut values = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            values.extend_from_slice(&a[i * c1..(i + 1) * c1]);
            values.extend_from_slice(&b[i * c2..(i + 1) * c2]);
        }
        drop(a);
        drop(b);
        Tensor::op(
            "concat_cols",
            vec![r, c1 + c2],
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let c = c1 + c2;
                let mut ga = vec![0.0; r * c1];
                let mut gb = vec![0.0; r * c2];
                for i in 0..r {
                    ga[i * c1..(i + 1) * c1].copy_from_slice(&g[i * c..i * c + c1]);
                    gb[i * c2..(i + 1) * c2].copy_from_slice(&g[i * c + c1..(i + 1) * c]);
                }
                node.parents[0].accumulate(&ga);
                node.parents[1].accumulate(&gb);
            }),
        )
    }

    /// Sum each row of a matrix: [r,c] -> [r].
    pub fn row_sum(&self) -> Result<Tensor> {
        let (r, c) = expect_matrix("row_sum", self)?;
        let v = self.node.values.borrow();
        let values: Vec<f64> = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        drop(v);
        Tensor::op(
            "row_sum",
            vec![r],
            values,
            vec![self.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[i];
                    }
                }
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.node.values.borrow().iter().sum();
        Tensor::op(
            "sum",
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(|node: &Node, g: &[f64]| {
                let n = node.parents[0].numel();
                node.parents[0].accumulate(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let total: f64 = self.node.values.borrow().iter().sum();
        Tensor::op(
            "mean",
            vec![],
            vec![total / n as f64],
            vec![self.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                node.parents[0].accumulate(&vec![g[0] / n as f64; n]);
            }),
        )
    }

    /// Row-wise softmax of a matrix, computed with max-shifting.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = expect_matrix("softmax_rows", self)?;
        if c == 0 {
            return Err(Error::Contract("softmax over zero columns".into()));
        }
        let v = self.node.values.borrow();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                values[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                values[i * c + j] /= s;
            }
        }
        drop(v);
        Tensor::op(
            "softmax_rows",
            vec![r, c],
            values,
            vec![self.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let y = node.values.borrow();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yi = &y[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = yi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yi[j] * (gi[j] - dot);
                    }
                }
                drop(y);
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    /// Extract column j of a matrix: [r,c] -> [r].
    pub fn select_col(&self, j: usize) -> Result<Tensor> {
        let (r, c) = expect_matrix("select_col", self)?;
        if j >= c {
            return Err(Error::ShapeMismatch {
                op: "select_col",
                detail: format!("column {j} of {c}"),
            });
        }
        let v = self.node.values.borrow();
        let values: Vec<f64> = (0..r).map(|i| v[i * c + j]).collect();
        drop(v);
        Tensor::op(
            "select_col",
            vec![r],
            values,
            vec![self.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + j] = g[i];
                }
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    /// Per-row gather: out[i] = x[i, cols[i]].
    pub fn gather_cols(&self, cols: &[usize]) -> Result<Tensor> {
        let (r, c) = expect_matrix("gather_cols", self)?;
        if cols.len() != r {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                detail: format!("{} indices for {r} rows", cols.len()),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                detail: format!("column {bad} of {c}"),
            });
        }
        let idx = cols.to_vec();
        let v = self.node.values.borrow();
        let values: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        drop(v);
        Tensor::op(
            "gather_cols",
            vec![r],
            values,
            vec![self.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                let mut gx = vec![0.0; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * c + j] = g[i];
                }
                node.parents[0].accumulate(&gx);
            }),
        )
    }

    /// Broadcast-add a length-c vector to every row of a [r,c] matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = expect_matrix("add_row", self)?;
        if row.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("row {:?} for matrix [{r},{c}]", row.shape()),
            });
        }
        let x = self.node.values.borrow();
        let b = row.node.values.borrow();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] = x[i * c + j] + b[j];
            }
        }
        drop(x);
        drop(b);
        Tensor::op(
            "add_row",
            vec![r, c],
            values,
            vec![self.clone(), row.clone()],
            Box::new(move |node: &Node, g: &[f64]| {
                node.parents[0].accumulate(g);
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
                node.parents[1].accumulate(&gb);
            }),
        )
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
