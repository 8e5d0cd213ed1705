//! Inner-loop kernels.
//!
//! With the `parallel` feature (default) large products are split by output
//! rows across the rayon pool. Each output row is produced by the same
//! sequential dgemm call regardless of how rows are chunked, so results are
//! bit-identical between the parallel and sequential paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Products below this many multiply-adds stay on the calling thread.
pub const PAR_THRESHOLD: usize = 1 << 16;

/// Strided view of a row-major-or-transposed matrix operand.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` matrix.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    #[cfg(feature = "parallel")]
    fn offset_rows(self, row: usize) -> &'a [f64] {
        debug_assert!(self.row_stride > 0);
        &self.data[row * self.row_stride as usize..]
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, output row-major.
pub fn gemm_seq(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a.data`, `b.data` and
    // `c` for the given m, k, n (checked by debug assertions at call sites and
    // guaranteed by the tensor shapes on every path through `Graph`).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-partitioned parallel gemm. Falls back to [`gemm_seq`] for small sizes
/// or when `a` is a transposed view (rows are not contiguous).
#[cfg(feature = "parallel")]
pub fn gemm_par(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    let threads = rayon::current_num_threads();
    if threads <= 1 || m * k * n < PAR_THRESHOLD || a.row_stride <= 0 || m < 2 {
        return gemm_seq(m, k, n, a, b, beta, c);
    }
    let rows_per = m.div_ceil(threads).max(1);
    c.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(chunk, c_rows)| {
            let row0 = chunk * rows_per;
            let rows = c_rows.len() / n;
            let a_view = MatRef {
                data: a.offset_rows(row0),
                ..a
            };
            gemm_seq(rows, k, n, a_view, b, beta, c_rows);
        });
}

/// gemm dispatched on the `parallel` feature.
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    #[cfg(feature = "parallel")]
    {
        gemm_par(m, k, n, a, b, beta, c)
    }
    #[cfg(not(feature = "parallel"))]
    {
        gemm_seq(m, k, n, a, b, beta, c)
    }
}

/// Fill `out` with `f(i)` for each index, in parallel when enabled.
pub fn fill_indexed(out: &mut [f64], f: impl Fn(usize) -> f64 + Sync + Send) {
    #[cfg(feature = "parallel")]
    {
        if out.len() >= PAR_THRESHOLD {
            out.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
            return;
        }
    }
    out.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
}

/// Map `f` over chunks of `out` of length `chunk`, passing the chunk index.
pub fn for_each_chunk(out: &mut [f64], chunk: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    #[cfg(feature = "parallel")]
    {
        if out.len() >= PAR_THRESHOLD {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map an index range in parallel (when enabled) preserving order.
pub fn map_range<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
