//! Thin safe wrapper over `matrixmultiply::dgemm` for row-major slices.

/// Storage order of a row-major operand as seen by the product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    N,
    T,
}

const SMALL_LHS: usize = 256;

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is m×k and `op(b)` is k×n.
///
/// `a` is stored row-major as m×k when `ta == N`, or as k×m when `ta == T`; likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: Op,
    b: &[f64],
    tb: Op,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if tb == Op::N && m * k <= SMALL_LHS {
        // Packing dominates for thin products; row axpys vectorize well instead.
        for i in 0..m {
            let ci = &mut c[i * n..(i + 1) * n];
            if beta == 0.0 {
                ci.fill(0.0);
            } else if beta != 1.0 {
                ci.iter_mut().for_each(|v| *v *= beta);
            }
            for p in 0..k {
                let aip = alpha * match ta {
                    Op::N => a[i * k + p],
                    Op::T => a[p * m + i],
                };
                if aip != 0.0 {
                    ci.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(cv, bv)| *cv += aip * bv);
                }
            }
        }
        return;
    }
    let (rsa, csa) = match ta {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: bounds asserted above; strides describe the row-major layouts documented here.
    unsafe {
        matrixmultiply::dgemm(
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
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: Op, b: &[f64], tb: Op) -> Vec<f64> {
        let at = |i: usize, p: usize| match ta {
            Op::N => a[i * k + p],
            Op::T => a[p * m + i],
        };
        let bt = |p: usize, j: usize| match tb {
            Op::N => b[p * n + j],
            Op::T => b[j * k + p],
        };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn matches_naive_for_all_transpose_combinations() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        for ta in [Op::N, Op::T] {
            for tb in [Op::N, Op::T] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
                let want = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
