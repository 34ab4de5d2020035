//! Small dense determinants.
//!
//! Orders 1 to 3 use closed forms, which cancel exactly when two columns are
//! bitwise equal. Larger orders go through LU with partial pivoting.

/// Determinant of the row-major `n x n` matrix `a`. `a` is used as scratch.
pub(crate) fn det_in_place(a: &mut [f64], n: usize) -> f64 {
    debug_assert_eq!(a.len(), n * n);
    match n {
        0 => 1.0,
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        3 => {
            a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6])
        }
        _ => lu_det(a, n),
    }
}

pub(crate) fn det(a: &[f64], n: usize) -> f64 {
    let mut scratch = [0.0; 64];
    if n * n <= scratch.len() {
        scratch[..n * n].copy_from_slice(a);
        det_in_place(&mut scratch[..n * n], n)
    } else {
        det_in_place(&mut a.to_vec(), n)
    }
}

fn lu_det(a: &mut [f64], n: usize) -> f64 {
    let mut sign = 1.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            sign = -sign;
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f != 0.0 {
                for c in col + 1..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
            }
        }
    }
    (0..n).fold(sign, |acc, i| acc * a[i * n + i])
}

/// Hadamard's bound: product of the Euclidean row norms, an upper bound on `|det|`.
pub(crate) fn hadamard_bound(a: &[f64], n: usize) -> f64 {
    (0..n).map(|r| a[r * n..(r + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt()).product()
}

/// Parity (+1 or -1) of a permutation given as an index vector.
pub(crate) fn permutation_sign(perm: &[usize]) -> f64 {
    let mut inversions = 0;
    for i in 0..perm.len() {
        for j in i + 1..perm.len() {
            if perm[i] > perm[j] {
                inversions += 1;
            }
        }
    }
    if inversions % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// All permutations of `0..n` in lexicographic order.
pub(crate) fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leibniz(a: &[f64], n: usize) -> f64 {
        permutations(n)
            .iter()
            .map(|p| permutation_sign(p) * (0..n).map(|r| a[r * n + p[r]]).product::<f64>())
            .sum()
    }

    #[test]
    fn matches_leibniz_expansion() {
        let mut seed = 12345u64;
        let mut next = || {
            seed = crate::rng::splitmix64(seed);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for n in 1..=6 {
            for _ in 0..20 {
                let a: Vec<f64> = (0..n * n).map(|_| next()).collect();
                let want = leibniz(&a, n);
                assert!((det(&a, n) - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn repeated_columns_cancel_exactly() {
        let a = [1.3, 1.3, 0.2, 2.9, 2.9, -1.0, 0.7, 0.7, 5.0];
        assert_eq!(det(&a, 3), 0.0);
        let b = [1.3, 0.2, 1.3, 2.9, -1.0, 2.9, 0.7, 5.0, 0.7];
        assert_eq!(det(&b, 3), 0.0);
    }

    #[test]
    fn permutation_parity() {
        assert_eq!(permutation_sign(&[0, 1, 2]), 1.0);
        assert_eq!(permutation_sign(&[1, 0, 2]), -1.0);
        assert_eq!(permutation_sign(&[1, 2, 0]), 1.0);
        assert_eq!(permutations(4).len(), 24);
    }
}
