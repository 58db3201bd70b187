//! Trajectory evaluation: closed-form similarity alignment between point
//! sets, RMSE after alignment, timestamp association, and final drift.

use std::path::Path;

use super::linalg::{svd3, Mat3};
use super::GeometryError;

/// Default timestamp association window, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.05;

/// Similarity transform q = scale * R * p + t.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation.mul_vec(p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
            self.scale * r[2] + self.translation[2],
        ]
    }
}

/// Least-squares similarity transform minimizing
/// sum over i of ||s * R * p_i + t - q_i||^2, via the SVD of the
/// cross-covariance with reflection correction (det(R) is always +1).
pub fn umeyama_align(
    source: &[[f64; 3]],
    target: &[[f64; 3]],
    with_scale: bool,
) -> Result<SimilarityTransform, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch {
            a: source.len(),
            b: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(GeometryError::NotEnoughPoints {
            needed: 3,
            got: source.len(),
        });
    }
    let n = source.len() as f64;
    let mut mu_p = [0.0; 3];
    let mut mu_q = [0.0; 3];
    for (p, q) in source.iter().zip(target) {
        for k in 0..3 {
            mu_p[k] += p[k] / n;
            mu_q[k] += q[k] / n;
        }
    }
    let mut var_p = 0.0;
    let mut cov = Mat3::zeros();
    for (p, q) in source.iter().zip(target) {
        let pc = [p[0] - mu_p[0], p[1] - mu_p[1], p[2] - mu_p[2]];
        let qc = [q[0] - mu_q[0], q[1] - mu_q[1], q[2] - mu_q[2]];
        var_p += (pc[0] * pc[0] + pc[1] * pc[1] + pc[2] * pc[2]) / n;
        for r in 0..3 {
            for c in 0..3 {
                cov.set(r, c, cov.at(r, c) + qc[r] * pc[c] / n);
            }
        }
    }
    if var_p < 1e-18 {
        return Err(GeometryError::DegenerateGeometry(
            "source points are all identical, rotation undefined".into(),
        ));
    }

    let (u, d, v) = svd3(&cov);
    let flip = u.det() * v.det() < 0.0;
    let s3 = if flip { -1.0 } else { 1.0 };
    // R = U * diag(1, 1, s3) * V^T
    let mut us = u;
    for r in 0..3 {
        us.set(r, 2, u.at(r, 2) * s3);
    }
    let rotation = us.mul(&v.transpose());
    let scale = if with_scale {
        (d[0] + d[1] + s3 * d[2]) / var_p
    } else {
        1.0
    };
    let rp = rotation.mul_vec(mu_p);
    let translation = [
        mu_q[0] - scale * rp[0],
        mu_q[1] - scale * rp[1],
        mu_q[2] - scale * rp[2],
    ];
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Root-mean-squared error of transformed source points against targets.
pub fn rmse(
    source: &[[f64; 3]],
    target: &[[f64; 3]],
    transform: &SimilarityTransform,
) -> Result<f64, GeometryError> {
    if source.is_empty() {
        return Err(GeometryError::EmptyInput("point list"));
    }
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch {
            a: source.len(),
            b: target.len(),
        });
    }
    let mut sum = 0.0;
    for (p, q) in source.iter().zip(target) {
        let m = transform.apply(*p);
        sum += (m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2) + (m[2] - q[2]).powi(2);
    }
    Ok((sum / source.len() as f64).sqrt())
}

/// Time-ordered pose sequence; timestamps strictly increase.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<(f64, [f64; 3])>,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, [f64; 3])>) -> Result<Self, GeometryError> {
        for w in poses.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(GeometryError::BadTrajectory(format!(
                    "timestamps must strictly increase ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Trajectory { poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.poses.iter().map(|(_, p)| *p).collect()
    }

    pub fn poses(&self) -> &[(f64, [f64; 3])] {
        &self.poses
    }

    /// Parse `timestamp x y z` lines.
    pub fn from_text(text: &str) -> Result<Self, GeometryError> {
        let mut poses = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(GeometryError::BadLine {
                    line: i + 1,
                    reason: format!("expected `timestamp x y z`, got {} fields", fields.len()),
                });
            }
            let mut v = [0.0f64; 4];
            for (k, s) in fields.iter().enumerate() {
                v[k] = s.parse().map_err(|_| GeometryError::BadLine {
                    line: i + 1,
                    reason: format!("bad number {s:?}"),
                })?;
            }
            poses.push((v[0], [v[1], v[2], v[3]]));
        }
        Trajectory::new(poses)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, p) in &self.poses {
            out.push_str(&format!("{t} {} {} {}\n", p[0], p[1], p[2]));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssociationReport {
    pub pairs: usize,
    pub dropped_a: usize,
    pub dropped_b: usize,
}

/// Associate poses by nearest timestamp within the window. Both inputs are
/// time-ordered; each pose is used at most once and matching is greedy in
/// time order, so the result is deterministic.
pub fn associate(
    a: &Trajectory,
    b: &Trajectory,
    window: f64,
) -> (Vec<(usize, usize)>, AssociationReport) {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, (ta, _)) in a.poses.iter().enumerate() {
        while j + 1 < b.poses.len() && (b.poses[j + 1].0 - ta).abs() <= (b.poses[j].0 - ta).abs() {
            j += 1;
        }
        if j < b.poses.len() && (b.poses[j].0 - ta).abs() <= window {
            pairs.push((i, j));
            j += 1;
        }
        if j >= b.poses.len() {
            break;
        }
    }
    let report = AssociationReport {
        pairs: pairs.len(),
        dropped_a: a.len() - pairs.len(),
        dropped_b: b.len() - pairs.len(),
    };
    (pairs, report)
}

/// Associate by timestamp, then align the source trajectory to the target.
pub fn align_trajectories(
    source: &Trajectory,
    target: &Trajectory,
    with_scale: bool,
) -> Result<(SimilarityTransform, f64, AssociationReport), GeometryError> {
    let (pairs, report) = associate(source, target, ASSOCIATION_WINDOW);
    let src: Vec<[f64; 3]> = pairs.iter().map(|&(i, _)| source.poses[i].1).collect();
    let dst: Vec<[f64; 3]> = pairs.iter().map(|&(_, j)| target.poses[j].1).collect();
    let transform = umeyama_align(&src, &dst, with_scale)?;
    let err = rmse(&src, &dst, &transform)?;
    Ok((transform, err, report))
}

/// Planar displacement between the last and first poses: (dx, dy, norm).
pub fn final_drift(traj: &Trajectory) -> Result<(f64, f64, f64), GeometryError> {
    if traj.len() < 2 {
        return Err(GeometryError::NotEnoughPoints {
            needed: 2,
            got: traj.len(),
        });
    }
    let first = traj.poses.first().expect("len >= 2").1;
    let last = traj.poses.last().expect("len >= 2").1;
    let dx = last[0] - first[0];
    let dy = last[1] - first[1];
    Ok((dx, dy, (dx * dx + dy * dy).sqrt()))
}
