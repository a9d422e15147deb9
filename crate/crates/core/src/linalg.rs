//! Small dense helpers generic over [`Scalar`].

use crate::scalar::Scalar;

/// Eigenvalues of a symmetric 3×3 matrix, descending, by cyclic Jacobi rotations.
pub fn sym3_eigenvalues<T: Scalar>(m: [[T; 3]; 3]) -> [T; 3] {
    let mut a = m;
    let two = T::one() + T::one();
    for _sweep in 0..32 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == T::zero() {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (two * a[p][q]);
            let sign = if theta >= T::zero() { T::one() } else { -T::one() };
            let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
            let c = T::one() / (t * t + T::one()).sqrt();
            let s = t * c;
            for r in 0..3 {
                let (arp, arq) = (a[r][p], a[r][q]);
                a[r][p] = c * arp - s * arq;
                a[r][q] = s * arp + c * arq;
            }
            for r in 0..3 {
                let (apr, aqr) = (a[p][r], a[q][r]);
                a[p][r] = c * apr - s * aqr;
                a[q][r] = s * apr + c * aqr;
            }
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Population covariance of 3-vectors.
pub fn covariance3<T: Scalar>(points: impl Iterator<Item = [T; 3]> + Clone) -> [[T; 3]; 3] {
    let mut n = T::zero();
    let mut mean = [T::zero(); 3];
    for p in points.clone() {
        n += T::one();
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    let mut c = [[T::zero(); 3]; 3];
    if n == T::zero() {
        return c;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in i..3 {
                c[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..3 {
        for j in i..3 {
            c[i][j] /= n;
            c[j][i] = c[i][j];
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_free_diagonal() {
        let ev = sym3_eigenvalues([[1.0f64, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 3.0]]);
        assert_eq!(ev, [5.0, 3.0, 1.0]);
    }

    #[test]
    fn matches_oracle_on_random_symmetric() {
        let mut s = 0.123f64;
        let mut next = || {
            s = (s * 9301.0 + 49297.0) % 233280.0;
            s / 233280.0 - 0.5
        };
        for _ in 0..200 {
            let (a, b, c, d, e, f) = (next(), next(), next(), next(), next(), next());
            let m = [[a, b, c], [b, d, e], [c, e, f]];
            let got = sym3_eigenvalues(m);
            let want = crate::oracle::sym3_eigenvalues(m);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn f32_works() {
        let ev = sym3_eigenvalues([[2.0f32, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 0.0]]);
        assert!((ev[0] - 3.0).abs() < 1e-5 && (ev[1] - 1.0).abs() < 1e-5 && ev[2].abs() < 1e-6);
    }
}
