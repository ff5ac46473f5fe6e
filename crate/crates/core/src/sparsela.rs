//! Plaintext matrix types and the reference product used to check every
//! secure protocol.
//!
//! `SparseMatrix` is the `(l_y, v_y)` form: a strictly row-major sorted list of
//! locations and a parallel list of values. Both parties derive identical bin
//! alignments from `l_y` alone, so no ordering has to be negotiated.

use std::collections::BTreeMap;
use std::ops::{Add, Mul};

use num_bigint::BigInt;
use num_traits::ToPrimitive;

use crate::error::{Error, Result};
use crate::ring::RingElement;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(DenseMatrix { rows: rows.len(), cols, data: rows.concat() })
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

    pub fn transpose(&self) -> Self {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map<U: Copy + Default>(&self, f: impl FnMut(T) -> U) -> DenseMatrix<U> {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().copied().map(f).collect() }
    }

    /// Elementwise combination of two equally shaped matrices.
    pub fn zip_with(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!("shape {:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }
}

impl DenseMatrix<f64> {
    pub fn identity(n: usize) -> Self {
        DenseMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff on mismatched shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sparse matrix in sorted `(l_y, v_y)` form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T = f64> {
    rows: usize,
    cols: usize,
    loc: Vec<(usize, usize)>,
    val: Vec<T>,
}

impl<T: Copy + Default + Add<Output = T>> SparseMatrix<T> {
    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseMatrix { rows, cols, loc: Vec::new(), val: Vec::new() }
    }

    /// Validating constructor: locations must be strictly increasing in
    /// row-major order and inside the shape.
    pub fn new(rows: usize, cols: usize, loc: Vec<(usize, usize)>, val: Vec<T>) -> Result<Self> {
        if loc.len() != val.len() {
            return Err(Error::shape(format!("{} locations but {} values", loc.len(), val.len())));
        }
        check_loc(rows, cols, &loc)?;
        Ok(SparseMatrix { rows, cols, loc, val })
    }

    /// Builds from unordered entries; duplicate locations are summed.
    pub fn from_triplets(rows: usize, cols: usize, entries: impl IntoIterator<Item = (usize, usize, T)>) -> Result<Self> {
        let mut acc: BTreeMap<(usize, usize), T> = BTreeMap::new();
        for (r, c, v) in entries {
            if r >= rows || c >= cols {
                return Err(Error::shape(format!("location ({r},{c}) outside {rows}x{cols}")));
            }
            let slot = acc.entry((r, c)).or_default();
            *slot = *slot + v;
        }
        let (loc, val) = acc.into_iter().unzip();
        Ok(SparseMatrix { rows, cols, loc, val })
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for (&(r, c), &v) in self.loc.iter().zip(&self.val) {
            d.set(r, c, v);
        }
        d
    }

    pub fn transpose(&self) -> Self {
        let entries = self.loc.iter().zip(&self.val).map(|(&(r, c), &v)| (c, r, v));
        SparseMatrix::from_triplets(self.cols, self.rows, entries).expect("transpose stays in shape")
    }

    pub fn map<U: Copy + Default + Add<Output = U>>(&self, f: impl FnMut(T) -> U) -> SparseMatrix<U> {
        SparseMatrix { rows: self.rows, cols: self.cols, loc: self.loc.clone(), val: self.val.iter().copied().map(f).collect() }
    }
}

impl<T: Copy> SparseMatrix<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn loc(&self) -> &[(usize, usize)] {
        &self.loc
    }

    pub fn val(&self) -> &[T] {
        &self.val
    }

    /// Number of stored entries, `t = |l_y|`.
    pub fn nnz(&self) -> usize {
        self.loc.len()
    }

    pub fn density(&self) -> f64 {
        if self.rows * self.cols == 0 {
            0.0
        } else {
            self.nnz() as f64 / (self.rows * self.cols) as f64
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        self.loc.iter().zip(&self.val).map(|(&(r, c), &v)| (r, c, v))
    }

    pub fn column_support(&self) -> Vec<Vec<usize>> {
        column_support(self.cols, &self.loc)
    }

    /// Sorted distinct row indices carrying at least one entry.
    pub fn distinct_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.loc.iter().map(|&(r, _)| r).collect();
        rows.dedup();
        rows
    }

    pub fn pattern(&self) -> SparsityPattern {
        SparsityPattern { rows: self.rows, cols: self.cols, loc: self.loc.clone() }
    }
}

/// For each column `j`, the positions into `loc` of its entries in ascending
/// row order.
fn column_support(cols: usize, loc: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); cols];
    // loc is row-major sorted, so pushes land in ascending row order.
    for (p, &(_, c)) in loc.iter().enumerate() {
        out[c].push(p);
    }
    out
}

/// The location vector `l_y` with its shape, without values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityPattern {
    rows: usize,
    cols: usize,
    loc: Vec<(usize, usize)>,
}

impl SparsityPattern {
    pub fn new(rows: usize, cols: usize, loc: Vec<(usize, usize)>) -> Result<Self> {
        check_loc(rows, cols, &loc)?;
        Ok(SparsityPattern { rows, cols, loc })
    }

    /// Every diagonal position of an `m x m` matrix.
    pub fn full_diagonal(m: usize) -> Self {
        SparsityPattern { rows: m, cols: m, loc: (0..m).map(|i| (i, i)).collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn loc(&self) -> &[(usize, usize)] {
        &self.loc
    }

    pub fn nnz(&self) -> usize {
        self.loc.len()
    }

    pub fn column_support(&self) -> Vec<Vec<usize>> {
        column_support(self.cols, &self.loc)
    }

    /// Canonical byte encoding: rows, cols, then each location, all u64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 * (self.loc.len() + 1));
        for v in [self.rows, self.cols].into_iter().chain(self.loc.iter().flat_map(|&(r, c)| [r, c])) {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out
    }
}

fn check_loc(rows: usize, cols: usize, loc: &[(usize, usize)]) -> Result<()> {
    if let Some(&(r, c)) = loc.iter().find(|&&(r, c)| r >= rows || c >= cols) {
        return Err(Error::shape(format!("location ({r},{c}) outside {rows}x{cols}")));
    }
    if loc.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::shape("locations must be strictly sorted row-major"));
    }
    Ok(())
}

impl SparseMatrix<f64> {
    /// Drops exact zeros (`to_loc_val`).
    pub fn from_dense(d: &DenseMatrix<f64>) -> Self {
        let mut loc = Vec::new();
        let mut val = Vec::new();
        for i in 0..d.rows() {
            for j in 0..d.cols() {
                let v = d.get(i, j);
                if v != 0.0 {
                    loc.push((i, j));
                    val.push(v);
                }
            }
        }
        SparseMatrix { rows: d.rows(), cols: d.cols(), loc, val }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape("sparse add on mismatched shapes"));
        }
        SparseMatrix::from_triplets(self.rows, self.cols, self.iter().chain(other.iter()))
    }
}

/// `S + Sᵀ`.
pub fn symmetrize(s: &SparseMatrix<f64>) -> Result<SparseMatrix<f64>> {
    s.add(&s.transpose())
}

/// Diagonal matrix; semantically a sparse matrix supported on every `(i, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalMatrix {
    diag: Vec<f64>,
}

impl DiagonalMatrix {
    pub fn new(diag: Vec<f64>) -> Self {
        DiagonalMatrix { diag }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::shape("diagonal add on mismatched dims"));
        }
        Ok(DiagonalMatrix { diag: self.diag.iter().zip(&other.diag).map(|(a, b)| a + b).collect() })
    }

    /// Full diagonal support, zeros included, so the location vector depends
    /// on the dimension only.
    pub fn to_sparse(&self) -> SparseMatrix<f64> {
        let m = self.dim();
        SparseMatrix { rows: m, cols: m, loc: (0..m).map(|i| (i, i)).collect(), val: self.diag.clone() }
    }

    pub fn to_dense(&self) -> DenseMatrix<f64> {
        DenseMatrix::from_fn(self.dim(), self.dim(), |i, j| if i == j { self.diag[i] } else { 0.0 })
    }
}

/// Row sums (`D`) and column sums (`E`) of a square social matrix.
pub fn build_d_e(s: &SparseMatrix<f64>) -> Result<(DiagonalMatrix, DiagonalMatrix)> {
    if s.rows() != s.cols() {
        return Err(Error::shape(format!("social matrix must be square, got {}x{}", s.rows(), s.cols())));
    }
    let mut d = vec![0.0; s.rows()];
    let mut e = vec![0.0; s.cols()];
    for (r, c, v) in s.iter() {
        d[r] += v;
        e[c] += v;
    }
    Ok((DiagonalMatrix::new(d), DiagonalMatrix::new(e)))
}

/// Aligned bins for one output row: `x_bins[j]` and `y_bins[j]` hold
/// `(a, x_{i,a})` and `(a, y_{a,j})` for every nonzero `y_{a,j}`, ascending in `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinTable<T = f64> {
    pub x_bins: Vec<Vec<(usize, T)>>,
    pub y_bins: Vec<Vec<(usize, T)>>,
}

impl<T> BinTable<T> {
    pub fn pairs(&self) -> usize {
        self.x_bins.iter().map(Vec::len).sum()
    }
}

/// One `BinTable` per row of `x`. Total pairs across the result is `k * t`.
pub fn build_bins<T: Copy + Default>(x: &DenseMatrix<T>, y: &SparseMatrix<T>) -> Result<Vec<BinTable<T>>> {
    if x.cols() != y.rows() {
        return Err(Error::shape(format!("X has {} cols, Y has {} rows", x.cols(), y.rows())));
    }
    let support = y.column_support();
    Ok((0..x.rows())
        .map(|i| {
            let mut x_bins = Vec::with_capacity(y.cols());
            let mut y_bins = Vec::with_capacity(y.cols());
            for col in &support {
                x_bins.push(col.iter().map(|&p| (y.loc[p].0, x.get(i, y.loc[p].0))).collect());
                y_bins.push(col.iter().map(|&p| (y.loc[p].0, y.val[p])).collect());
            }
            BinTable { x_bins, y_bins }
        })
        .collect())
}

fn check_conform(xc: usize, yr: usize) -> Result<()> {
    if xc != yr {
        return Err(Error::shape(format!("inner dimensions differ: {xc} vs {yr}")));
    }
    Ok(())
}

/// Reference product over reals.
pub fn matmul_oracle(x: &DenseMatrix<f64>, y: &DenseMatrix<f64>) -> Result<DenseMatrix<f64>> {
    check_conform(x.cols(), y.rows())?;
    Ok(DenseMatrix::from_fn(x.rows(), y.cols(), |i, j| {
        (0..x.cols()).map(|a| x.get(i, a) * y.get(a, j)).sum()
    }))
}

/// Reference product over Z_2^64. Accumulates exact signed big integers and
/// reduces once at the end, independently of the ring's wrapping operators.
pub fn matmul_oracle_ring(x: &DenseMatrix<RingElement>, y: &DenseMatrix<RingElement>) -> Result<DenseMatrix<RingElement>> {
    check_conform(x.cols(), y.rows())?;
    let modulus: BigInt = BigInt::from(1u8) << 64;
    Ok(DenseMatrix::from_fn(x.rows(), y.cols(), |i, j| {
        let mut acc = BigInt::from(0);
        for a in 0..x.cols() {
            acc += BigInt::from(x.get(i, a).signed()) * BigInt::from(y.get(a, j).signed());
        }
        let reduced: BigInt = ((acc % &modulus) + &modulus) % &modulus;
        RingElement(reduced.to_u64().expect("reduced below 2^64"))
    }))
}

/// Product of a dense matrix with a sparse one, summing over the aligned bins.
pub fn matmul_sparse<T>(x: &DenseMatrix<T>, y: &SparseMatrix<T>) -> Result<DenseMatrix<T>>
where
    T: Copy + Default + Add<Output = T> + Mul<Output = T>,
{
    let bins = build_bins(x, y)?;
    Ok(DenseMatrix::from_fn(x.rows(), y.cols(), |i, j| {
        bins[i].x_bins[j]
            .iter()
            .zip(&bins[i].y_bins[j])
            .fold(T::default(), |acc, (&(_, xv), &(_, yv))| acc + xv * yv)
    }))
}
