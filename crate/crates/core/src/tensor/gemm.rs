// Thin wrappers over `matrixmultiply`. Large products are split across the
// worker pool along the longer output dimension; each output element is still
// reduced over k in the same order, so results do not depend on thread count.

use crate::parallel;

const PAR_MIN_FLOPS: usize = 1 << 22;

macro_rules! gemm_impl {
    ($name:ident, $t:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            m: usize,
            k: usize,
            n: usize,
            a: &[$t],
            a_trans: bool,
            b: &[$t],
            b_trans: bool,
            beta: $t,
            c: &mut [$t],
        ) {
            assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
            if m == 0 || n == 0 {
                return;
            }
            if k == 0 {
                c[..m * n].iter_mut().for_each(|v| *v *= beta);
                return;
            }
            // Row-major strides for op(a) (m x k) and op(b) (k x n).
            let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
            let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
            let workers = parallel::threads();
            let ap = a.as_ptr() as usize;
            let bp = b.as_ptr() as usize;
            let cp = c.as_mut_ptr() as usize;
            let run = |r0: usize, r1: usize, c0: usize, c1: usize| unsafe {
                let a0 = (ap as *const $t).offset(r0 as isize * rsa);
                let b0 = (bp as *const $t).offset(c0 as isize * csb);
                let cc = (cp as *mut $t).add(r0 * n + c0);
                $kernel(r1 - r0, k, c1 - c0, 1.0, a0, rsa, csa, b0, rsb, csb, beta, cc, n as isize, 1);
            };
            if workers <= 1 || m * n * k < PAR_MIN_FLOPS {
                run(0, m, 0, n);
                return;
            }
            let split_rows = m >= n;
            let extent = if split_rows { m } else { n };
            let chunk = extent.div_ceil(workers).max(16);
            let chunks: Vec<(usize, usize)> =
                (0..extent).step_by(chunk).map(|s| (s, (s + chunk).min(extent))).collect();
            parallel::for_each(&chunks, |&(s, e)| if split_rows { run(s, e, 0, n) } else { run(0, m, s, e) });
        }
    };
}

gemm_impl!(gemm_f32, f32, matrixmultiply::sgemm);
gemm_impl!(gemm_f64, f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if at { a[p * m + i] } else { a[i * k + p] };
                    let bv = if bt { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn transposes_match_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        for &(at, bt) in &[(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            gemm_f64(m, k, n, &a, at, &b, bt, 0.0, &mut c);
            let want = naive(m, k, n, &a, at, &b, bt);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beta_one_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm_f32(1, 2, 1, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c[0], 21.0);
    }
}
