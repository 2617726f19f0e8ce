use std::rc::Rc;

use super::tensor::{dims2, Op, Tensor};
use super::{dim_err, EngineError, Result};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// True when `from` can be broadcast to `to` without changing `to`.
fn broadcasts_to(from: &[usize], to: &[usize]) -> bool {
    from.len() <= to.len() && broadcast_shape(from, to).as_deref() == Some(to)
}

fn elementwise(op: Op, name: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let Some(shape) = broadcast_shape(&a.shape, &b.shape) else {
        return dim_err(name, format!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    };
    let a = a.broadcast_to(&shape)?;
    let b = b.broadcast_to(&shape)?;
    let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_op(op, &[&a, &b], shape, data)
}

fn unary(t: &Tensor, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let data = t.data.iter().map(|&v| f(v)).collect();
    Tensor::from_op(op, &[t], t.shape.clone(), data)
}

fn reduced_shape(shape: &[usize], axis: usize, op: &'static str) -> Result<Vec<usize>> {
    if axis >= shape.len() {
        return dim_err(op, format!("axis {axis} out of range for shape {shape:?}"));
    }
    let mut s = shape.to_vec();
    s[axis] = 1;
    Ok(s)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(Op::Add, "add", self, other, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(Op::Sub, "sub", self, other, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(Op::Mul, "mul", self, other, |x, y| x * y)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data.contains(&0.0) {
            return Err(EngineError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        elementwise(Op::Div, "div", self, other, |x, y| x / y)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        unary(self, Op::Scale(s), |v| v * s)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary(self, Op::Relu, |v| v.max(0.0))
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary(self, Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(EngineError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        unary(self, Op::Log, f64::ln)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[n, k], &[k2, m]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return dim_err(
                "matmul",
                format!("needs two matrices, got {:?} and {:?}", self.shape, other.shape),
            );
        };
        if k != k2 {
            return dim_err(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape, other.shape),
            );
        }
        let (a, b) = (&self.data, &other.data);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                    *o += av * bv;
                }
            }
        }
        Tensor::from_op(Op::MatMul, &[self, other], vec![n, m], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let &[r, c] = self.shape.as_slice() else {
            return dim_err("transpose", format!("needs a matrix, got {:?}", self.shape));
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_op(Op::Transpose, &[self], vec![c, r], out)
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> Result<Tensor> {
        let v = self.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::from_op(Op::Norm, &[self], Vec::new(), vec![v])
    }

    pub fn squared_l2_norm(&self) -> Result<Tensor> {
        self.mul(self)?.sum()
    }

    pub fn sum(&self) -> Result<Tensor> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums over the broadcast dimensions so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if !broadcasts_to(shape, &self.shape) {
            return dim_err("sum_to", format!("{shape:?} does not broadcast to {:?}", self.shape));
        }
        let (r, c) = self.dims2();
        let (tr, tc) = dims2(shape);
        let mut out = vec![0.0; tr * tc];
        for i in 0..r {
            let oi = if tr == 1 { 0 } else { i };
            for j in 0..c {
                let oj = if tc == 1 { 0 } else { j };
                out[oi * tc + oj] += self.data[i * c + j];
            }
        }
        Tensor::from_op(Op::SumTo, &[self], shape.to_vec(), out)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if !broadcasts_to(&self.shape, shape) {
            return dim_err(
                "broadcast_to",
                format!("{:?} does not broadcast to {shape:?}", self.shape),
            );
        }
        let (r, c) = self.dims2();
        let (tr, tc) = dims2(shape);
        let mut out = Vec::with_capacity(tr * tc);
        for i in 0..tr {
            let si = if r == 1 { 0 } else { i };
            for j in 0..tc {
                let sj = if c == 1 { 0 } else { j };
                out.push(self.data[si * c + sj]);
            }
        }
        Tensor::from_op(Op::BroadcastTo, &[self], shape.to_vec(), out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if shape.len() > 2 || shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return dim_err("reshape", format!("{:?} cannot become {shape:?}", self.shape));
        }
        Tensor::from_op(Op::Reshape, &[self], shape.to_vec(), self.data.to_vec())
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let &[r, c] = self.shape.as_slice() else {
            return dim_err("select_rows", format!("needs a matrix, got {:?}", self.shape));
        };
        if indices.is_empty() {
            return dim_err("select_rows", "empty index list");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return dim_err("select_rows", format!("row {bad} out of range for {r} rows"));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::from_op(Op::SelectRows(Rc::from(indices)), &[self], vec![indices.len(), c], out)
    }

    /// Adjoint of [`Tensor::select_rows`]: row `k` of `self` is added into
    /// row `indices[k]` of a `rows`-row zero matrix.
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        let &[m, c] = self.shape.as_slice() else {
            return dim_err("scatter_rows", format!("needs a matrix, got {:?}", self.shape));
        };
        if m != indices.len() || indices.iter().any(|&i| i >= rows) {
            return dim_err("scatter_rows", "indices do not match source rows or target size");
        }
        let mut out = vec![0.0; rows * c];
        for (k, &i) in indices.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += self.data[k * c + j];
            }
        }
        Tensor::from_op(Op::ScatterRows(Rc::from(indices)), &[self], vec![rows, c], out)
    }

    /// Stacks the rank-2 views of `parts` vertically; a vector of length `k`
    /// counts as one row of `k` columns and a scalar as a 1x1 block.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("concat_rows", "nothing to concatenate");
        };
        let cols = first.cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return dim_err("concat_rows", format!("column counts differ: {cols} vs {}", p.cols()));
            }
            rows += p.rows();
            out.extend_from_slice(&p.data);
        }
        Tensor::from_op(Op::ConcatRows, parts, vec![rows, cols], out)
    }

    fn max_along(&self, axis: usize) -> Result<Tensor> {
        let shape = reduced_shape(&self.shape, axis, "max")?;
        let (r, c) = self.dims2();
        let along_rows = self.shape.len() == 2 && axis == 1 || self.shape.len() == 1;
        let out = if along_rows {
            (0..r)
                .map(|i| {
                    self.data[i * c..(i + 1) * c]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        } else {
            (0..c)
                .map(|j| (0..r).map(|i| self.data[i * c + j]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        };
        Ok(Tensor::raw(shape, out))
    }

    fn shifted(&self, axis: usize) -> Result<Tensor> {
        // the shift is a constant; softmax is invariant to it so no gradient is lost
        self.sub(&self.max_along(axis)?)
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = reduced_shape(&self.shape, axis, "softmax")?;
        let e = self.shifted(axis)?.exp()?;
        let z = e.sum_to(&shape)?;
        e.div(&z)
    }

    /// `log(softmax(x))` in log-sum-exp form.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = reduced_shape(&self.shape, axis, "log_softmax")?;
        let s = self.shifted(axis)?;
        let lse = s.exp()?.sum_to(&shape)?.log()?;
        s.sub(&lse)
    }

    /// Index of the largest entry of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let (r, c) = self.dims2();
        (0..r)
            .map(|i| {
                let row = &self.data[i * c..(i + 1) * c];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn relu_and_norm() {
        assert_eq!(t(&[3], &[-1.0, 0.0, 2.0]).relu().unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(t(&[2], &[3.0, 4.0]).squared_l2_norm().unwrap().item(), 25.0);
        assert_eq!(t(&[2], &[3.0, 4.0]).norm().unwrap().item(), 5.0);
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[2], &[0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[1f64.ln(), 3f64.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_axis_zero_sums_columns() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 7.0]);
        let s = x.softmax(0).unwrap();
        for j in 0..3 {
            let col: f64 = (0..2).map(|i| s.data()[i * 3 + j]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = t(&[2, 3], &[0.3, -2.0, 5.0, 10.0, 10.0, -10.0]);
        let a = x.log_softmax(1).unwrap();
        let b = x.softmax(1).unwrap().log().unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcasting_rows_cols_scalars() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let row = t(&[2], &[10.0, 20.0]);
        let col = t(&[2, 1], &[100.0, 200.0]);
        assert_eq!(m.add(&row).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(m.add(&col).unwrap().data(), &[101.0, 102.0, 203.0, 204.0]);
        assert_eq!(m.mul(&Tensor::scalar(2.0)).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(m.sum_to(&[2, 1]).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(m.sum_to(&[2]).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_errors() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(a.add(&b), Err(EngineError::Dimension { .. })));
        assert!(matches!(a.matmul(&a), Err(EngineError::Dimension { .. })));
        assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn log_domain_error() {
        assert!(matches!(t(&[2], &[1.0, 0.0]).log(), Err(EngineError::Domain { .. })));
        assert!(matches!(t(&[1], &[-3.0]).log(), Err(EngineError::Domain { .. })));
    }

    #[test]
    fn select_scatter_concat() {
        let m = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = m.select_rows(&[2, 0, 2]).unwrap();
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let back = s.scatter_rows(&[2, 0, 2], 3).unwrap();
        assert_eq!(back.data(), &[1.0, 2.0, 0.0, 0.0, 10.0, 12.0]);
        let v = t(&[2], &[7.0, 8.0]);
        let c = Tensor::concat_rows(&[&m, &v]).unwrap();
        assert_eq!(c.shape(), &[4, 2]);
        assert_eq!(&c.data()[6..], &[7.0, 8.0]);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let m = t(&[2, 3], &[1.0, 3.0, 3.0, 0.5, 0.5, 0.5]);
        assert_eq!(m.argmax_rows(), vec![1, 0]);
    }
}
