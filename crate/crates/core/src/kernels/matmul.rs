//! Matrix-multiply kernels in the three layouts backward rules need.

use crate::tensor::Element;

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_ip * b_row[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] @ b[k,n]^T  (rows of b dotted against rows of a)
pub fn matmul_bt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = E::zero();
            for j in 0..n {
                s = s + a_row[j] * b_row[j];
            }
            out_row[p] = out_row[p] + s;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn matmul_at<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == E::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_ip * b_row[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_case() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3x4

        let mut c = vec![0.0; 8];
        matmul(&a, &b, 2, 3, 4, &mut c); // 2x4

        // a = c @ b^T should satisfy matmul_bt(c, b) == a @ (b b^T) ... instead
        // check aT @ c against matmul_at directly.
        let mut at_c = vec![0.0; 12]; // 3x4
        matmul_at(&a, &c, 2, 3, 4, &mut at_c);
        let mut a_t = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                a_t[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut expect = vec![0.0; 12];
        matmul(&a_t, &c, 3, 2, 4, &mut expect);
        assert_eq!(at_c, expect);

        let mut c_bt = vec![0.0; 6]; // (2x4) @ (3x4)^T = 2x3
        matmul_bt(&c, &b, 2, 4, 3, &mut c_bt);
        let mut b_t = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                b_t[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut expect2 = vec![0.0; 6];
        matmul(&c, &b_t, 2, 4, 3, &mut expect2);
        assert_eq!(c_bt, expect2);
    }
}
