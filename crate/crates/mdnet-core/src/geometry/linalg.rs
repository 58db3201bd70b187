//! Self-contained small-matrix routines: 3x3 matrix arithmetic, symmetric
//! Jacobi eigendecomposition, and a 3x3 SVD built on it. Deterministic,
//! no external linear algebra dependency.

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [f64; 9]);

impl Mat3 {
    pub fn zeros() -> Self {
        Mat3([0.0; 9])
    }

    pub fn identity() -> Self {
        Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.0[r * 3 + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.0[r * 3 + c] = v;
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn mul(&self, other: &Mat3) -> Mat3 {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += self.at(r, k) * other.at(k, c);
                }
                out[r * 3 + c] = s;
            }
        }
        Mat3(out)
    }

    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.at(0, 0) * v[0] + self.at(0, 1) * v[1] + self.at(0, 2) * v[2],
            self.at(1, 0) * v[0] + self.at(1, 1) * v[1] + self.at(1, 2) * v[2],
            self.at(2, 0) * v[0] + self.at(2, 1) * v[1] + self.at(2, 2) * v[2],
        ]
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = self.0;
        for v in &mut out {
            *v *= s;
        }
        Mat3(out)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric n x n matrix by cyclic Jacobi sweeps.
/// Returns eigenvalues in descending order with the matching eigenvectors
/// as rows of the returned matrix (row i is the eigenvector of value i).
pub fn jacobi_eigen_sym(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    // v starts as identity; accumulates rotations, columns are eigenvectors
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1.0);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(m[p * n + q].abs());
            }
        }
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= JACOBI_TOL * scale * 1e-2 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (row, &col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[row * n + k] = v[k * n + col];
        }
    }
    (values, vectors)
}

/// SVD of a 3x3 matrix: a = u * diag(s) * v^T with singular values in
/// descending order. Built from the eigendecomposition of a^T a; missing
/// left singular vectors (rank-deficient a) are completed orthonormally.
pub fn svd3(a: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    let ata = a.transpose().mul(a);
    let (vals, vecs) = jacobi_eigen_sym(&ata.0, 3);
    let mut v = Mat3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            v.set(k, i, vecs[i * 3 + k]); // columns of v are eigenvectors
        }
    }
    let mut s = [0.0; 3];
    for i in 0..3 {
        s[i] = vals[i].max(0.0).sqrt();
    }
    // sqrt amplifies the Jacobi off-diagonal tolerance to ~1e-7 relative;
    // singular values below that are rounding noise, not rank
    let cutoff = s[0] * 1e-7;
    for v in &mut s {
        if *v <= cutoff {
            *v = 0.0;
        }
    }

    let mut u_cols: Vec<Option<[f64; 3]>> = vec![None; 3];
    for i in 0..3 {
        if s[i] > 0.0 {
            let vi = [v.at(0, i), v.at(1, i), v.at(2, i)];
            let av = a.mul_vec(vi);
            u_cols[i] = Some([av[0] / s[i], av[1] / s[i], av[2] / s[i]]);
        }
    }
    complete_basis(&mut u_cols);
    let mut u = Mat3::zeros();
    for (i, col) in u_cols.iter().enumerate() {
        let col = col.expect("completed");
        for k in 0..3 {
            u.set(k, i, col[k]);
        }
    }
    (u, s, v)
}

fn complete_basis(cols: &mut [Option<[f64; 3]>]) {
    // orthonormalize the known columns' complement deterministically
    for i in 0..3 {
        if cols[i].is_some() {
            continue;
        }
        let mut candidate = None;
        // try axes in a fixed order, pick the first with a healthy residual
        for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            let mut r = axis;
            for c in cols.iter().flatten() {
                let d = dot3(r, *c);
                for k in 0..3 {
                    r[k] -= d * c[k];
                }
            }
            let n = norm3(r);
            if n > 1e-6 {
                candidate = Some([r[0] / n, r[1] / n, r[2] / n]);
                break;
            }
        }
        cols[i] = Some(candidate.expect("some axis is independent"));
    }
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(u: &Mat3, s: &[f64; 3], v: &Mat3) -> Mat3 {
        let mut us = *u;
        for r in 0..3 {
            for c in 0..3 {
                us.set(r, c, u.at(r, c) * s[c]);
            }
        }
        us.mul(&v.transpose())
    }

    #[test]
    fn jacobi_diagonalizes_symmetric_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [3usize, 9] {
            for _ in 0..20 {
                let mut a = vec![0.0; n * n];
                for i in 0..n {
                    for j in i..n {
                        let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
                        a[i * n + j] = v;
                        a[j * n + i] = v;
                    }
                }
                let (vals, vecs) = jacobi_eigen_sym(&a, n);
                // descending order
                for w in vals.windows(2) {
                    assert!(w[0] >= w[1] - 1e-12);
                }
                // A x = lambda x and orthonormality
                for i in 0..n {
                    let x = &vecs[i * n..(i + 1) * n];
                    let mut ax = vec![0.0; n];
                    for r in 0..n {
                        for c in 0..n {
                            ax[r] += a[r * n + c] * x[c];
                        }
                    }
                    for r in 0..n {
                        assert!((ax[r] - vals[i] * x[r]).abs() < 1e-10, "n={n}");
                    }
                    for j in 0..n {
                        let y = &vecs[j * n..(j + 1) * n];
                        let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert!((d - expect).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn svd3_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut m = [0.0; 9];
            for v in &mut m {
                *v = rng.random::<f64>() * 4.0 - 2.0;
            }
            let a = Mat3(m);
            let (u, s, v) = svd3(&a);
            let r = reconstruct(&u, &s, &v);
            for i in 0..9 {
                assert!((r.0[i] - a.0[i]).abs() < 1e-10, "{:?} vs {:?}", r.0, a.0);
            }
            assert!(s[0] >= s[1] && s[1] >= s[2] && s[2] >= -1e-12);
            // u orthonormal
            let utu = u.transpose().mul(&u);
            for r in 0..3 {
                for c in 0..3 {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!((utu.at(r, c) - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn svd3_handles_rank_deficiency() {
        // rank-1 outer product
        let a = Mat3([2.0, 4.0, 6.0, 1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
        let (u, s, v) = svd3(&a);
        // sqrt of an eigenvalue that is zero up to rounding: ~1e-7 noise
        assert!(s[1] < 1e-6 && s[2] < 1e-6, "{s:?}");
        let r = reconstruct(&u, &s, &v);
        for i in 0..9 {
            assert!((r.0[i] - a.0[i]).abs() < 1e-9);
        }
        let utu = u.transpose().mul(&u);
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((utu.at(r, c) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn determinant_and_cross() {
        assert!((Mat3::identity().det() - 1.0).abs() < 1e-15);
        let c = cross3([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert_eq!(c, [0.0, 0.0, 1.0]);
    }
}
