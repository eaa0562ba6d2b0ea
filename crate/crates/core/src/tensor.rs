//! Dense row-major `f64` tensors and the small amount of linear algebra the
//! thin-plate-spline code needs.
//!
//! Feature maps are rank-3 `H x W x C` tensors (batch size is always one);
//! matrices are rank-2 `rows x cols`. Indexing follows `(row = y = n,
//! col = x = m)` everywhere.

use crate::error::{DtnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(DtnError::dim(
                "Tensor::new",
                format!("rank must be 1..=4, got shape {shape:?}"),
            ));
        }
        if shape.contains(&0) {
            return Err(DtnError::dim(
                "Tensor::new",
                format!("extents must be >= 1, got {shape:?}"),
            ));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(DtnError::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on a zero extent; meant for shapes the caller controls.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len]).expect("valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self::new(shape, (0..len).map(&mut f).collect()).expect("valid shape")
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(DtnError::dim("Tensor::matrix", "ragged rows"));
        }
        Self::new(
            &[r, c],
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(DtnError::dim(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(DtnError::dim(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }

    /// `(H, W, C)` of a rank-3 feature map.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(DtnError::dim(
                op,
                format!("expected an H x W x C map, got shape {:?}", self.shape),
            )),
        }
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at3(&self, n: usize, m: usize, c: usize) -> f64 {
        self.data[(n * self.shape[1] + m) * self.shape[2] + c]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Self::from_fn(&[c, r], |i| {
            let (j, k) = (i / r, i % r);
            self.data[k * c + j]
        }))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(DtnError::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(DtnError::dim(
                "add_assign",
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        Ok(self.mul(other)?.sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }
}

/// Matrix product with a fixed `i, k, j` summation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("matmul")?;
    let (k2, m) = b.dims2("matmul")?;
    if k != k2 {
        return Err(DtnError::dim(
            "matmul",
            format!("inner dimensions disagree: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[n, m], out)
}

pub const PIVOT_EPS: f64 = 1e-12;

/// LU factorization with partial pivoting, `P A = L U`.
///
/// Kept around so one factorization of the (fixed) TPS system matrix serves
/// every forward solve and every transposed solve during backprop.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    // packed: strict lower part holds L (unit diagonal), upper part holds U
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Self> {
        let (n, c) = a.dims2("lu")?;
        if n != c {
            return Err(DtnError::dim(
                "lu",
                format!("matrix must be square, got {:?}", a.shape),
            ));
        }
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let (piv_row, piv_val) =
                (col..n)
                    .map(|r| (r, lu[r * n + col].abs()))
                    .fold(
                        (col, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if piv_val < PIVOT_EPS {
                return Err(DtnError::Singular {
                    pivot: col,
                    magnitude: piv_val,
                });
            }
            if piv_row != col {
                for j in 0..n {
                    lu.swap(col * n + j, piv_row * n + j);
                }
                perm.swap(col, piv_row);
            }
            let pivot = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / pivot;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for j in col + 1..n {
                        lu[r * n + j] -= f * lu[col * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    fn check_rhs(&self, b: &Tensor, op: &'static str) -> Result<usize> {
        let (r, c) = b.dims2(op)?;
        if r != self.n {
            return Err(DtnError::dim(
                op,
                format!("system is {0}x{0} but right-hand side is {r}x{c}", self.n),
            ));
        }
        Ok(c)
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let cols = self.check_rhs(b, "solve")?;
        let n = self.n;
        let mut x = vec![0.0; n * cols];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * cols..(i + 1) * cols].copy_from_slice(&b.data[p * cols..(p + 1) * cols]);
        }
        for j in 0..cols {
            for i in 0..n {
                let mut s = x[i * cols + j];
                for k in 0..i {
                    s -= self.lu[i * n + k] * x[k * cols + j];
                }
                x[i * cols + j] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[i * cols + j];
                for k in i + 1..n {
                    s -= self.lu[i * n + k] * x[k * cols + j];
                }
                x[i * cols + j] = s / self.lu[i * n + i];
            }
        }
        Tensor::new(&[n, cols], x)
    }

    /// Solves `A^T X = B` with the same factorization.
    pub fn solve_transposed(&self, b: &Tensor) -> Result<Tensor> {
        let cols = self.check_rhs(b, "solve_transposed")?;
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T z = b, L^T w = z, x = P^T w.
        let mut w = b.data.clone();
        for j in 0..cols {
            for i in 0..n {
                let mut s = w[i * cols + j];
                for k in 0..i {
                    s -= self.lu[k * n + i] * w[k * cols + j];
                }
                w[i * cols + j] = s / self.lu[i * n + i];
            }
            for i in (0..n).rev() {
                let mut s = w[i * cols + j];
                for k in i + 1..n {
                    s -= self.lu[k * n + i] * w[k * cols + j];
                }
                w[i * cols + j] = s;
            }
        }
        let mut x = vec![0.0; n * cols];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * cols..(p + 1) * cols].copy_from_slice(&w[i * cols..(i + 1) * cols]);
        }
        Tensor::new(&[n, cols], x)
    }
}

/// Solves `a X = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let lu = Lu::factor(a)?;
    lu.solve(b)
}

/// Per-pixel integer class map, `H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    ids: Vec<usize>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, ids: Vec<usize>) -> Result<Self> {
        if h * w != ids.len() || h == 0 || w == 0 {
            return Err(DtnError::dim(
                "LabelMap::new",
                format!("{h}x{w} map needs {} ids, got {}", h * w, ids.len()),
            ));
        }
        Ok(Self { h, w, ids })
    }

    pub fn filled(h: usize, w: usize, id: usize) -> Self {
        Self {
            h,
            w,
            ids: vec![id; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [usize] {
        &mut self.ids
    }

    pub fn get(&self, n: usize, m: usize) -> usize {
        self.ids[n * self.w + m]
    }
}
