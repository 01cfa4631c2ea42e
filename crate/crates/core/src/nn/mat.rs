use num_traits::Float;
use std::fmt::Debug;

/// Floating point element type for the compute engine.
///
/// Training and decoding run in `f32`; gradient checks run the same code in `f64`.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(max_offset(m, k, rsa, csa) < a.len().max(1));
                debug_assert!(max_offset(k, n, rsb, csb) < b.len().max(1));
                debug_assert!(max_offset(m, n, rsc, csc) < c.len());
                // SAFETY: the debug assertions above bound every strided access
                // by the slice lengths; callers build strides from matrix shapes.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

fn max_offset(r: usize, c: usize, rs: isize, cs: isize) -> usize {
    if r == 0 || c == 0 {
        return 0;
    }
    ((r as isize - 1) * rs + (c as isize - 1) * cs) as usize
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }
}

/// `a * b` (or `a * b^T` when `trans_b`).
pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>, trans_b: bool) -> Mat<T> {
    let (n, kb) = if trans_b { (b.rows, b.cols) } else { (b.cols, b.rows) };
    assert_eq!(a.cols, kb, "matmul inner dimension mismatch");
    let mut c = Mat::zeros(a.rows, n);
    if a.rows <= SMALL_ROWS {
        // packing the right operand costs more than the product itself here
        small_matmul(a, b, trans_b, &mut c);
        return c;
    }
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    T::gemm(
        a.rows,
        a.cols,
        n,
        T::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        rsb,
        csb,
        T::zero(),
        &mut c.data,
        n as isize,
        1,
    );
    c
}

const SMALL_ROWS: usize = 16;

fn small_matmul<T: Real>(a: &Mat<T>, b: &Mat<T>, trans_b: bool, c: &mut Mat<T>) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            unsafe { small_matmul_avx(a, b, trans_b, c) };
            return;
        }
    }
    small_matmul_generic(a, b, trans_b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn small_matmul_avx<T: Real>(a: &Mat<T>, b: &Mat<T>, trans_b: bool, c: &mut Mat<T>) {
    small_matmul_generic(a, b, trans_b, c)
}

#[inline(always)]
fn small_matmul_generic<T: Real>(a: &Mat<T>, b: &Mat<T>, trans_b: bool, c: &mut Mat<T>) {
    let n = c.cols;
    for i in 0..a.rows {
        let ar = &a.data[i * a.cols..(i + 1) * a.cols];
        let cr = &mut c.data[i * n..(i + 1) * n];
        if trans_b {
            for (j, y) in cr.iter_mut().enumerate() {
                let br = &b.data[j * b.cols..(j + 1) * b.cols];
                let mut acc = [T::zero(); 4];
                let chunks = ar.len() / 4;
                for q in 0..chunks {
                    for l in 0..4 {
                        acc[l] = ar[q * 4 + l].mul_add(br[q * 4 + l], acc[l]);
                    }
                }
                let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
                for k in chunks * 4..ar.len() {
                    sum = sum + ar[k] * br[k];
                }
                *y = sum;
            }
        }
    }
    if !trans_b {
        // 4x8 register tile; `b` rows are streamed once per tile and `c` is written once
        const R: usize = 4;
        const W: usize = 8;
        let k_len = a.cols;
        for i0 in (0..a.rows).step_by(R) {
            let rows = (a.rows - i0).min(R);
            for j0 in (0..n).step_by(W) {
                let width = (n - j0).min(W);
                let mut acc = [[T::zero(); W]; R];
                if width == W {
                    for k in 0..k_len {
                        let br: &[T; W] = b.data[k * n + j0..k * n + j0 + W].try_into().unwrap();
                        for r in 0..rows {
                            let x = a.data[(i0 + r) * k_len + k];
                            for l in 0..W {
                                acc[r][l] = x.mul_add(br[l], acc[r][l]);
                            }
                        }
                    }
                } else {
                    for k in 0..k_len {
                        let br = &b.data[k * n + j0..k * n + j0 + width];
                        for r in 0..rows {
                            let x = a.data[(i0 + r) * k_len + k];
                            for l in 0..width {
                                acc[r][l] = x.mul_add(br[l], acc[r][l]);
                            }
                        }
                    }
                }
                for r in 0..rows {
                    c.data[(i0 + r) * n + j0..(i0 + r) * n + j0 + width].copy_from_slice(&acc[r][..width]);
                }
            }
        }
    }
}

/// Row vector times matrix, accumulated into `out` (which must be pre-initialised).
pub fn vec_mat_acc<T: Real>(x: &[T], w: &Mat<T>, out: &mut [T]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    T::gemm(
        1,
        w.rows,
        w.cols,
        T::one(),
        x,
        x.len() as isize,
        1,
        &w.data,
        w.cols as isize,
        1,
        T::one(),
        out,
        out.len() as isize,
        1,
    );
}

pub fn log_softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.f64()));
    let lse = max + row.iter().map(|&x| (x.f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x.f64() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_and_packed_products_agree() {
        let a = Mat::from_vec(3, 5, (0..15).map(|x| x as f64 * 0.3 - 2.0).collect());
        let b = Mat::from_vec(5, 7, (0..35).map(|x| (x as f64).sin()).collect());
        let small = matmul(&a, &b, false);
        let mut big_a = Mat::zeros(40, 5);
        big_a.data[..15].copy_from_slice(&a.data);
        let big = matmul(&big_a, &b, false);
        for (x, y) in small.data.iter().zip(&big.data) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = Mat::from_vec(7, 5, (0..35).map(|i| b.at(i % 5, i / 5)).collect());
        let st = matmul(&a, &bt, true);
        for (x, y) in small.data.iter().zip(&st.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
