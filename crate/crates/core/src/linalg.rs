//! Small dense linear algebra: fixed 3×3 helpers, a row-major matrix, and a
//! one-sided Jacobi SVD used for rank-2 projection and null-space solves.

use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

pub fn mat3_identity<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat3_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_vec<T: Scalar>(a: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = *a;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[j][i];
        }
    }
    out
}

pub fn mat3_scale<T: Scalar>(a: &Mat3<T>, s: T) -> Mat3<T> {
    a.map(|row| row.map(|v| v * s))
}

pub fn mat3_sub<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][j] - b[i][j];
        }
    }
    out
}

pub fn frobenius<T: Scalar>(a: &Mat3<T>) -> T {
    a.iter().flatten().map(|&v| v * v).sum::<T>().sqrt()
}

pub fn mat3_det<T: Scalar>(a: &Mat3<T>) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Inverse via the adjugate. Returns `None` for a singular matrix.
pub fn mat3_inverse<T: Scalar>(a: &Mat3<T>) -> Option<Mat3<T>> {
    let det = mat3_det(a);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let inv = T::one() / det;
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
    Some([
        [c(1, 2, 1, 2) * inv, -c(0, 2, 1, 2) * inv, c(0, 1, 1, 2) * inv],
        [-c(1, 2, 0, 2) * inv, c(0, 2, 0, 2) * inv, -c(0, 1, 0, 2) * inv],
        [c(1, 2, 0, 1) * inv, -c(0, 2, 0, 1) * inv, c(0, 1, 0, 1) * inv],
    ])
}

/// Cross-product matrix: `skew(t) * v == cross(t, v)`.
pub fn skew<T: Scalar>(t: &Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[z, -t[2], t[1]], [t[2], z, -t[0]], [-t[1], t[0], z]]
}

pub fn cross<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm<T: Scalar>(a: &Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn sub<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Scalar>(a: &Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Singular values (descending) and the matching right singular vectors.
#[derive(Debug, Clone)]
pub struct RightSvd<T> {
    pub singular_values: Vec<T>,
    /// `vectors[k]` is the right singular vector paired with `singular_values[k]`.
    pub vectors: Vec<Vec<T>>,
}

/// One-sided (Hestenes) Jacobi SVD of a row-major `rows × cols` matrix.
///
/// Works for any shape; when `rows < cols` the trailing singular values are zero.
pub fn right_svd<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> RightSvd<T> {
    assert_eq!(a.len(), rows * cols, "matrix buffer does not match its shape");
    // Column-major working copy so column pairs are contiguous.
    let mut u: Vec<Vec<T>> = (0..cols).map(|c| (0..rows).map(|r| a[r * cols + c]).collect()).collect();
    let mut v: Vec<Vec<T>> = (0..cols)
        .map(|c| (0..cols).map(|r| if r == c { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for r in 0..rows {
                    let (x, y) = (u[p][r], u[q][r]);
                    alpha = alpha + x * x;
                    beta = beta + y * y;
                    gamma = gamma + x * y;
                }
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (up, uq) = two_mut(&mut u, p, q);
                for r in 0..rows {
                    let (x, y) = (up[r], uq[r]);
                    up[r] = c * x - s * y;
                    uq[r] = s * x + c * y;
                }
                let (vp, vq) = two_mut(&mut v, p, q);
                for r in 0..cols {
                    let (x, y) = (vp[r], vq[r]);
                    vp[r] = c * x - s * y;
                    vq[r] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(T, usize)> = u
        .iter()
        .enumerate()
        .map(|(k, col)| (col.iter().map(|&x| x * x).sum::<T>().sqrt(), k))
        .collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    RightSvd {
        singular_values: order.iter().map(|&(s, _)| s).collect(),
        vectors: order.iter().map(|&(_, k)| v[k].clone()).collect(),
    }
}

fn two_mut<X>(v: &mut [X], p: usize, q: usize) -> (&mut X, &mut X) {
    debug_assert!(p < q);
    let (lo, hi) = v.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

/// Singular values of a 3×3 matrix, descending.
pub fn singular_values3<T: Scalar>(a: &Mat3<T>) -> [T; 3] {
    let flat: Vec<T> = a.iter().flatten().copied().collect();
    let svd = right_svd(3, 3, &flat);
    [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]]
}

/// Closest rank-2 matrix in Frobenius norm: removes the component along the
/// right singular vector of the smallest singular value, `A (I - v vᵀ)`.
pub fn project_rank2<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let flat: Vec<T> = a.iter().flatten().copied().collect();
    let svd = right_svd(3, 3, &flat);
    let v = &svd.vectors[2];
    let av = mat3_vec(a, &[v[0], v[1], v[2]]);
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][j] - av[i] * v[j];
        }
    }
    out
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    /// Panics when `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer does not match its shape");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Copy of the sub-block `[r0, r0+nr) × [c0, c0+nc)`.
    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Self {
        Self::from_fn(nr, nc, |r, c| self.get(r0 + r, c0 + c))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64()).unwrap_or(U::nan())).collect(),
        }
    }
}

/// `out (+)= a · b` for row-major slices: `a` is n×k, `b` is k×m, `out` is n×m.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    if !accumulate {
        out.iter_mut().for_each(|v| *v = T::zero());
    }
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums (lets the compiler vectorize).
#[inline]
pub fn slice_dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] = acc[l] + a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail = tail + a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out (+)= a · bᵀ`: `a` is n×k, `b` is m×k, `out` is n×m.
pub fn gemm_bt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let acc = slice_dot(arow, &b[j * k..(j + 1) * k]);
            let o = &mut out[i * m + j];
            *o = if accumulate { *o + acc } else { acc };
        }
    }
}

/// `out (+)= aᵀ · b`: `a` is k×n, `b` is k×m, `out` is n×m.
pub fn gemm_at<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    if !accumulate {
        out.iter_mut().for_each(|v| *v = T::zero());
    }
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}
