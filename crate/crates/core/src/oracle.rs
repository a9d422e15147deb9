//! Slow, independent reference computations.
//!
//! Everything here works on plain slices and shares no code with the
//! production paths it checks: each routine is a direct transcription of the
//! mathematical definition, with compensated accumulation where rounding could
//! matter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub check: String,
    pub cases: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Compares `actual` against `expected`. An entry passes when its relative
    /// error is below `rel_tol` or its absolute error is below `abs_floor`.
    pub fn compare(check: &str, actual: &[f64], expected: &[f64], rel_tol: f64, abs_floor: f64) -> Self {
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        let mut pass = actual.len() == expected.len();
        for (&a, &e) in actual.iter().zip(expected) {
            let abs = (a - e).abs();
            let rel = abs / a.abs().max(e.abs()).max(f64::MIN_POSITIVE);
            let rel = if abs == 0.0 { 0.0 } else { rel };
            max_abs = max_abs.max(abs);
            if abs > abs_floor {
                max_rel = max_rel.max(rel);
            }
            if !(rel < rel_tol || abs <= abs_floor) {
                pass = false;
            }
        }
        OracleReport {
            check: check.to_string(),
            cases: expected.len(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            tolerance: rel_tol,
            pass,
        }
    }

    /// Exact agreement of discrete results.
    pub fn exact<T: PartialEq>(check: &str, actual: &[T], expected: &[T]) -> Self {
        let mismatches = actual.len().abs_diff(expected.len())
            + actual.iter().zip(expected).filter(|(a, e)| a != e).count();
        OracleReport {
            check: check.to_string(),
            cases: expected.len(),
            max_abs_err: mismatches as f64,
            max_rel_err: 0.0,
            tolerance: 0.0,
            pass: mismatches == 0,
        }
    }
}

/// Neumaier-compensated sum.
pub fn ksum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    ksum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
}

/// Exhaustive nearest neighbour over `rows` (row-major, width `dim`).
/// With `filter = Some((query_class, row_class))` only rows whose class equals
/// the query's class are eligible. Ties go to the lowest row index.
pub fn brute_nn(
    rows: &[f64],
    dim: usize,
    queries: &[f64],
    filter: Option<(&[usize], &[usize])>,
) -> (Vec<usize>, Vec<f64>) {
    let nrows = rows.len() / dim;
    let mut idx = Vec::new();
    let mut dist = Vec::new();
    for (qi, q) in queries.chunks(dim).enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for r in 0..nrows {
            if let Some((qc, rc)) = filter {
                if qc[qi] != rc[r] {
                    continue;
                }
            }
            let d = sq_dist(q, &rows[r * dim..(r + 1) * dim]);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, r));
            }
        }
        let (d, r) = best.expect("nonempty candidate set");
        idx.push(r);
        dist.push(d.sqrt());
    }
    (idx, dist)
}

/// Central finite differences of `loss` at `params`.
pub fn fd_gradient(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut p = params.to_vec();
    let mut g = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NanGradient(format!("parameter index {i}")));
        }
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

/// Sequential EMA variance replay.
///
/// `batches` holds, per step, the global code index of each row and the row
/// embeddings (width `dim`). Codes receiving fewer than two rows keep their
/// variance; the batch variance is the population variance.
pub fn replay_stats(
    batches: &[(Vec<usize>, Vec<f64>)],
    num_codes: usize,
    dim: usize,
    gamma: f64,
    floor: f64,
    init: f64,
) -> Vec<f64> {
    let mut var = vec![init; num_codes * dim];
    for (assign, rows) in batches {
        for code in 0..num_codes {
            let members: Vec<&[f64]> = assign
                .iter()
                .zip(rows.chunks(dim))
                .filter(|(a, _)| **a == code)
                .map(|(_, r)| r)
                .collect();
            if members.len() < 2 {
                continue;
            }
            let n = members.len() as f64;
            for d in 0..dim {
                let mean = ksum(members.iter().map(|r| r[d])) / n;
                let v = ksum(members.iter().map(|r| (r[d] - mean) * (r[d] - mean))) / n;
                let slot = &mut var[code * dim + d];
                *slot = (gamma * *slot + (1.0 - gamma) * v).max(floor);
            }
        }
    }
    var
}

/// All-pairs k nearest neighbours, self excluded, ties to the lower index.
pub fn brute_knn(points: &[[f64; 3]], k: usize) -> Vec<Vec<(usize, f64)>> {
    (0..points.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&points[i], &points[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(d, j)| (j, d.sqrt())).collect()
        })
        .collect()
}

/// Groups point indices by floor(position / size); groups ordered by first member.
pub fn brute_voxel_groups(points: &[[f64; 3]], size: f64) -> Vec<Vec<usize>> {
    let keys: Vec<[i64; 3]> = points
        .iter()
        .map(|p| [0, 1, 2].map(|a| (p[a] / size).floor() as i64))
        .collect();
    let mut groups: Vec<([i64; 3], Vec<usize>)> = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        match groups.iter_mut().find(|(gk, _)| gk == k) {
            Some((_, g)) => g.push(i),
            None => groups.push((*k, vec![i])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

pub fn brute_dilate(points: &[[f64; 3]], mask: &[bool], radius: f64) -> Vec<bool> {
    if radius == 0.0 {
        return mask.to_vec();
    }
    (0..points.len())
        .map(|i| {
            (0..points.len()).any(|j| mask[j] && sq_dist(&points[i], &points[j]).sqrt() <= radius)
        })
        .collect()
}

pub fn angle_sector(x: f64, y: f64, sectors: usize) -> usize {
    let turn = (y.atan2(x) + std::f64::consts::PI) / std::f64::consts::TAU;
    let s = (turn * sectors as f64).floor().max(0.0) as usize;
    if s >= sectors {
        s - sectors
    } else {
        s
    }
}

/// Eigenvalues (descending) of a symmetric 3×3 matrix by the trigonometric
/// closed form, each refined by Newton steps on the characteristic polynomial.
pub fn sym3_eigenvalues(m: [[f64; 3]; 3]) -> [f64; 3] {
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let mut ev = if p1 == 0.0 {
        [m[0][0], m[1][1], m[2][2]]
    } else {
        let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i][j] = (m[i][j] - if i == j { q } else { 0.0 }) / p;
            }
        }
        let r = (b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]))
            / 2.0;
        let phi = if r <= -1.0 {
            std::f64::consts::PI / 3.0
        } else if r >= 1.0 {
            0.0
        } else {
            r.acos() / 3.0
        };
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    };
    // characteristic polynomial det(m - λI) = -λ³ + c2 λ² - c1 λ + c0
    let c2 = m[0][0] + m[1][1] + m[2][2];
    let c1 = m[0][0] * m[1][1] + m[0][0] * m[2][2] + m[1][1] * m[2][2]
        - m[0][1] * m[0][1]
        - m[0][2] * m[0][2]
        - m[1][2] * m[1][2];
    let c0 = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[1][2]) - m[0][1] * (m[0][1] * m[2][2] - m[1][2] * m[0][2])
        + m[0][2] * (m[0][1] * m[1][2] - m[1][1] * m[0][2]);
    for l in ev.iter_mut() {
        for _ in 0..3 {
            let f = -l.powi(3) + c2 * l.powi(2) - c1 * *l + c0;
            let df = -3.0 * l.powi(2) + 2.0 * c2 * *l - c1;
            if df.abs() < 1e-300 {
                break;
            }
            let next = *l - f / df;
            if !next.is_finite() || (next - *l).abs() > 1e-6 * (1.0 + l.abs()) {
                break;
            }
            *l = next;
        }
    }
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

/// Population covariance of a point set, compensated.
pub fn covariance(points: &[[f64; 3]]) -> [[f64; 3]; 3] {
    let n = points.len() as f64;
    let mean = [0, 1, 2].map(|a| ksum(points.iter().map(|p| p[a])) / n);
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = ksum(points.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j]))) / n;
        }
    }
    c
}

/// λ3 / Σλ of the neighbourhood covariance, eigenvalues clamped at zero.
pub fn curvature(points: &[[f64; 3]]) -> f64 {
    let ev = sym3_eigenvalues(covariance(points)).map(|l| l.max(0.0));
    let s = ev[0] + ev[1] + ev[2];
    if s <= 0.0 {
        0.0
    } else {
        ev[2] / s
    }
}

/// Mean cross entropy `-log softmax(logits)[label]` over rows with
/// `label != ignore` (and `mask` true when given); 0 when no row qualifies.
pub fn cross_entropy(logits: &[f64], width: usize, labels: &[u16], mask: Option<&[bool]>, ignore: u16) -> f64 {
    let mut terms = Vec::new();
    for (r, row) in logits.chunks(width).enumerate() {
        if labels[r] == ignore || mask.is_some_and(|m| !m[r]) {
            continue;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + ksum(row.iter().map(|&x| (x - m).exp())).ln();
        terms.push(lse - row[labels[r] as usize]);
    }
    if terms.is_empty() {
        0.0
    } else {
        ksum(terms.iter().copied()) / terms.len() as f64
    }
}

/// Per-class (TP, FP, FN) by direct counting; label `ignore` skipped.
pub fn count_tp_fp_fn(preds: &[u16], labels: &[u16], classes: usize, ignore: u16) -> Vec<(u64, u64, u64)> {
    (0..classes as u16)
        .map(|c| {
            let mut t = (0, 0, 0);
            for (&p, &l) in preds.iter().zip(labels) {
                if l == ignore {
                    continue;
                }
                match (p == c, l == c) {
                    (true, true) => t.0 += 1,
                    (true, false) => t.1 += 1,
                    (false, true) => t.2 += 1,
                    _ => {}
                }
            }
            t
        })
        .collect()
}

/// Row-normalized confusion by counting; rows with no true point are zero.
pub fn confusion_by_counting(preds: &[u16], labels: &[u16], classes: usize, ignore: u16) -> Vec<Vec<f64>> {
    (0..classes as u16)
        .map(|a| {
            let total = labels.iter().filter(|&&l| l == a && l != ignore).count();
            (0..classes as u16)
                .map(|b| {
                    let hits = preds.iter().zip(labels).filter(|(&p, &l)| l == a && p == b).count();
                    if total == 0 {
                        0.0
                    } else {
                        hits as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Survivor indices of an exact-count drop: descending Fisher–Yates over
/// `0..n` drawing `j ∈ [0, i]` from `draw(i)`, keep the first `keep` slots.
pub fn drop_survivors(n: usize, keep: usize, mut draw: impl FnMut(usize) -> usize) -> Vec<usize> {
    let mut slots: Vec<usize> = (0..n).collect();
    let mut i = n;
    while i > 1 {
        i -= 1;
        let j = draw(i);
        let tmp = slots[j];
        slots[j] = slots[i];
        slots[i] = tmp;
    }
    let mut kept: Vec<usize> = slots.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

/// Start offset of each class block after a stable counting sort.
pub fn class_block_starts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let mut starts = Vec::with_capacity(classes);
    let mut acc = 0;
    for c in counts {
        starts.push(acc);
        acc += c;
    }
    starts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_quadratic() {
        let g = fd_gradient(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), &[2.0, -1.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn fd_linear_is_constant() {
        let f = |x: &[f64]| 3.0 * x[0] - 2.0 * x[1];
        let a = fd_gradient(f, &[0.0, 0.0], 1e-5).unwrap();
        let b = fd_gradient(f, &[10.0, -7.0], 1e-5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_rejects_non_finite() {
        assert!(fd_gradient(|x| x[0].ln(), &[0.0], 1e-5).is_err());
    }

    #[test]
    fn brute_nn_single_code_and_exact_hit() {
        let codes = [0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
        let (i, _) = brute_nn(&codes[..2], 2, &[5.0, 5.0], None);
        assert_eq!(i, vec![0]);
        let (i, d) = brute_nn(&codes, 2, &[1.0, 1.0], None);
        assert_eq!((i[0], d[0]), (1, 0.0));
    }

    #[test]
    fn replay_empty_and_one_step() {
        assert_eq!(replay_stats(&[], 2, 1, 0.9, 1e-6, 1.0), vec![1.0, 1.0]);
        // rows 0 and 2 → population variance 1.0... use ±√2 for variance 2.0
        let s = 2f64.sqrt();
        let v = replay_stats(&[(vec![0, 0], vec![-s, s])], 1, 1, 0.9, 1e-6, 1.0);
        assert!((v[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn eigen_of_diagonal_and_rotated() {
        let ev = sym3_eigenvalues([[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(ev, [3.0, 2.0, 1.0]);
        let ev = sym3_eigenvalues([[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 0.5]]);
        assert!((ev[0] - 3.0).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14 && (ev[2] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn ce_uniform() {
        let ce = cross_entropy(&[0.0; 8], 8, &[3], None, 255);
        assert!((ce - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn report_floor_semantics() {
        let r = OracleReport::compare("x", &[1e-12, 1.0], &[2e-12, 1.00001], 1e-4, 1e-8);
        assert!(r.pass);
        let r = OracleReport::compare("x", &[1.0], &[1.1], 1e-4, 1e-8);
        assert!(!r.pass);
    }
}
