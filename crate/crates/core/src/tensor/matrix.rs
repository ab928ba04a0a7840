use std::fmt::Debug;

use num_traits::Float;

use crate::columnar::{Column, Table};
use crate::comm::ReduceElem;
use crate::error::{Error, Result};

/// Floating-point element type of matrices and networks.
pub trait Scalar: Float + ReduceElem + Debug + Default + Sync {}

impl Scalar for f64 {}
impl Scalar for f32 {}

pub(crate) fn cast<T: Scalar>(x: f64) -> T {
    T::from(x).expect("finite cast between float types")
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Rows `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        DenseMatrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from(x).expect("float cast")).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    fn check_inner(&self, what: &str, a: usize, b: usize) -> Result<()> {
        if a != b {
            return Err(Error::ShapeMismatch(format!("{what}: inner dimensions {a} and {b}")));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.check_inner("matmul", self.cols, other.rows)?;
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(DenseMatrix { rows: n, cols: m, data: out })
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        self.check_inner("t_matmul", self.rows, other.rows)?;
        let (n, k, m) = (self.cols, self.rows, other.cols);
        let mut out = vec![T::zero(); n * m];
        for p in 0..k {
            let arow = self.row(p);
            let brow = other.row(p);
            for (i, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(DenseMatrix { rows: n, cols: m, data: out })
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        self.check_inner("matmul_t", self.cols, other.cols)?;
        let (n, m) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                let b = other.row(j);
                out.push(a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y));
            }
        }
        Ok(DenseMatrix { rows: n, cols: m, data: out })
    }

    /// Adds `bias` to every row.
    pub fn add_row(&mut self, bias: &[T]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (x, &b) in row.iter_mut().zip(bias) {
                *x = *x + b;
            }
        }
    }

    pub fn column_sums(&self) -> Vec<T> {
        let mut s = vec![T::zero(); self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (a, &x) in s.iter_mut().zip(row) {
                *a = *a + x;
            }
        }
        s
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

/// Copies numeric, null-free columns of `t` into an `nrows × cols.len()`
/// matrix, preserving row order.
pub fn table_to_matrix<S: AsRef<str>>(t: &Table, cols: &[S]) -> Result<DenseMatrix<f64>> {
    let idx = t.schema().indices_of(cols)?;
    for &ci in &idx {
        let c = t.column(ci);
        let name = &t.schema().field(ci).name;
        if !c.dtype().is_numeric() {
            return Err(Error::WrongType { column: name.clone(), actual: c.dtype(), expected: "numeric" });
        }
        if let Some(row) = (0..c.len()).find(|&r| !c.is_valid(r)) {
            return Err(Error::NullInNumericBridge { column: name.clone(), row });
        }
    }
    Ok(DenseMatrix::from_fn(t.nrows(), idx.len(), |r, j| {
        t.column(idx[j]).numeric_at(r).expect("validated non-null")
    }))
}

/// Float64 table with one column per matrix column.
pub fn matrix_to_table<S: AsRef<str>>(m: &DenseMatrix<f64>, names: &[S]) -> Result<Table> {
    if names.len() != m.cols() {
        return Err(Error::ShapeMismatch(format!("{} names for {} columns", names.len(), m.cols())));
    }
    Table::from_columns(
        names
            .iter()
            .enumerate()
            .map(|(j, n)| (n.as_ref(), Column::float64((0..m.rows()).map(|i| m.get(i, j)).collect())))
            .collect(),
    )
}

/// Training/test matrices from a prefix split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub x_train: DenseMatrix<T>,
    pub y_train: DenseMatrix<T>,
    pub x_test: DenseMatrix<T>,
    pub y_test: DenseMatrix<T>,
}

/// First `n_train` rows train, the rest test.
pub fn split<T: Scalar>(x: &DenseMatrix<T>, y: &DenseMatrix<T>, n_train: usize) -> Result<Split<T>> {
    if x.rows() != y.rows() {
        return Err(Error::ShapeMismatch(format!("{} feature rows vs {} labels", x.rows(), y.rows())));
    }
    if n_train > x.rows() {
        return Err(Error::ShapeMismatch(format!("n_train {n_train} exceeds {} rows", x.rows())));
    }
    let rest = x.rows() - n_train;
    Ok(Split {
        x_train: x.slice_rows(0, n_train),
        y_train: y.slice_rows(0, n_train),
        x_test: x.slice_rows(n_train, rest),
        y_test: y.slice_rows(n_train, rest),
    })
}
