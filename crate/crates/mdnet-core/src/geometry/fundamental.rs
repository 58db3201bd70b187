//! Two-view epipolar estimation: normalized 8-point solver inside RANSAC
//! with Sampson-distance inlier classification.

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::linalg::{jacobi_eigen_sym, svd3, Mat3};
use super::GeometryError;

/// A point match between two images, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Rank-2 fundamental matrix with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(pub Mat3);

#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    /// Sampson distance below which a correspondence is an inlier, pixels.
    pub threshold_px: f64,
    pub max_iters: usize,
    /// Target probability of having drawn one all-inlier sample.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            threshold_px: 1.0,
            max_iters: 2000,
            confidence: 0.999,
            seed: 0,
        }
    }
}

/// First-order geometric (Sampson) distance of a correspondence to the
/// epipolar model, in pixels.
pub fn sampson_distance(f: &Mat3, c: &Correspondence) -> f64 {
    let x1 = [c.x1, c.y1, 1.0];
    let x2 = [c.x2, c.y2, 1.0];
    let fx1 = f.mul_vec(x1);
    let ftx2 = f.transpose().mul_vec(x2);
    let e = x2[0] * fx1[0] + x2[1] * fx1[1] + x2[2] * fx1[2];
    let denom = fx1[0] * fx1[0] + fx1[1] * fx1[1] + ftx2[0] * ftx2[0] + ftx2[1] * ftx2[1];
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    e.abs() / denom.sqrt()
}

/// Hartley isotropic normalization: translate the centroid to the origin
/// and scale so the mean distance from it is sqrt(2).
fn normalization_transform(points: &[(f64, f64)]) -> Result<Mat3, GeometryError> {
    let n = points.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (x, y) in points {
        cx += x;
        cy += y;
    }
    cx /= n;
    cy /= n;
    let mut mean_dist = 0.0;
    for (x, y) in points {
        mean_dist += ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    }
    mean_dist /= n;
    if mean_dist < 1e-12 {
        return Err(GeometryError::DegenerateGeometry(
            "all points coincide, cannot normalize".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Mat3([s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0]))
}

/// Normalized 8-point solve over any n >= 8 correspondences: nullspace of
/// the epipolar design matrix via the eigenvector of A^T A with smallest
/// eigenvalue, rank-2 enforcement, denormalization, and a sign/scale
/// convention (unit Frobenius norm, largest-magnitude entry positive).
pub fn eight_point(corrs: &[Correspondence]) -> Result<FundamentalMatrix, GeometryError> {
    if corrs.len() < 8 {
        return Err(GeometryError::NotEnoughPoints {
            needed: 8,
            got: corrs.len(),
        });
    }
    let p1: Vec<(f64, f64)> = corrs.iter().map(|c| (c.x1, c.y1)).collect();
    let p2: Vec<(f64, f64)> = corrs.iter().map(|c| (c.x2, c.y2)).collect();
    let t1 = normalization_transform(&p1)?;
    let t2 = normalization_transform(&p2)?;

    // accumulate A^T A directly (9x9), A has one row per correspondence
    let mut ata = [0.0f64; 81];
    for c in corrs {
        let q1 = t1.mul_vec([c.x1, c.y1, 1.0]);
        let q2 = t2.mul_vec([c.x2, c.y2, 1.0]);
        let row = [
            q2[0] * q1[0],
            q2[0] * q1[1],
            q2[0],
            q2[1] * q1[0],
            q2[1] * q1[1],
            q2[1],
            q1[0],
            q1[1],
            1.0,
        ];
        for i in 0..9 {
            for j in 0..9 {
                ata[i * 9 + j] += row[i] * row[j];
            }
        }
    }
    let (vals, vecs) = jacobi_eigen_sym(&ata, 9);
    // nullspace must be one-dimensional: a second near-zero eigenvalue
    // means the sample is degenerate
    let scale = vals[0].max(1e-12);
    if vals[7] <= 1e-10 * scale {
        return Err(GeometryError::DegenerateGeometry(
            "epipolar system has a multi-dimensional nullspace".into(),
        ));
    }
    let f_vec = &vecs[8 * 9..];
    let f_hat = Mat3([
        f_vec[0], f_vec[1], f_vec[2], f_vec[3], f_vec[4], f_vec[5], f_vec[6], f_vec[7], f_vec[8],
    ]);

    // rank-2 enforcement
    let (u, mut s, v) = svd3(&f_hat);
    s[2] = 0.0;
    let mut us = u;
    for r in 0..3 {
        for c in 0..3 {
            us.set(r, c, u.at(r, c) * s[c]);
        }
    }
    let f_rank2 = us.mul(&v.transpose());

    // denormalize: F = T2^T * F' * T1
    let f = t2.transpose().mul(&f_rank2).mul(&t1);
    Ok(FundamentalMatrix(canonical(f)?))
}

fn canonical(f: Mat3) -> Result<Mat3, GeometryError> {
    let norm = f.frobenius();
    if norm < 1e-15 {
        return Err(GeometryError::DegenerateGeometry("zero fundamental matrix".into()));
    }
    let mut out = f.scale(1.0 / norm);
    let lead = out
        .0
        .iter()
        .cloned()
        .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
        .unwrap();
    if lead < 0.0 {
        out = out.scale(-1.0);
    }
    Ok(out)
}

/// Robust estimation. Deterministic for a fixed seed: samples are drawn
/// from a seeded generator, the best model is the one with the most
/// inliers (earliest trial on ties), iterations adapt to the inlier
/// fraction up to `max_iters`, and the final model is refit on the winning
/// inlier set.
pub fn estimate_fundamental_ransac(
    corrs: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<(FundamentalMatrix, Vec<bool>), GeometryError> {
    if corrs.len() < 8 {
        return Err(GeometryError::NotEnoughPoints {
            needed: 8,
            got: corrs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut needed = cfg.max_iters.max(1);
    let mut iter = 0usize;
    while iter < needed {
        iter += 1;
        let idx = index_sample(&mut rng, corrs.len(), 8);
        let sample: Vec<Correspondence> = idx.iter().map(|i| corrs[i]).collect();
        let Ok(model) = eight_point(&sample) else { continue };
        let mask: Vec<bool> = corrs
            .iter()
            .map(|c| sampson_distance(&model.0, c) < cfg.threshold_px)
            .collect();
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().map_or(true, |(bc, _)| count > *bc) {
            best = Some((count, mask));
            // adaptive stopping from the current inlier fraction
            let w = count as f64 / corrs.len() as f64;
            let p_all = w.powi(8);
            if p_all > 1.0 - 1e-12 {
                break;
            }
            if p_all > 0.0 {
                let est = ((1.0 - cfg.confidence).ln() / (1.0 - p_all).ln()).ceil();
                if est.is_finite() {
                    needed = (est.max(1.0) as usize).min(cfg.max_iters);
                }
            }
        }
    }
    let (count, mask) = best.ok_or_else(|| {
        GeometryError::DegenerateGeometry("no RANSAC sample produced a model".into())
    })?;
    if count < 8 {
        // too few inliers to refit; keep the sample model's mask but
        // re-estimate from the best mask is impossible
        return Err(GeometryError::DegenerateGeometry(format!(
            "only {count} inliers supported the best model"
        )));
    }
    let inliers: Vec<Correspondence> = corrs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect();
    let model = eight_point(&inliers)?;
    let mask: Vec<bool> = corrs
        .iter()
        .map(|c| sampson_distance(&model.0, c) < cfg.threshold_px)
        .collect();
    Ok((model, mask))
}

/// Inlier fraction of a RANSAC mask.
pub fn inlier_ratio(mask: &[bool]) -> Result<f64, GeometryError> {
    if mask.is_empty() {
        return Err(GeometryError::EmptyInput("inlier mask"));
    }
    Ok(mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::synthetic::{synthetic_two_view, SceneConfig};

    #[test]
    fn too_few_points_rejected() {
        let corrs = vec![
            Correspondence { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 };
            7
        ];
        assert!(matches!(
            estimate_fundamental_ransac(&corrs, &RansacConfig::default()),
            Err(GeometryError::NotEnoughPoints { needed: 8, got: 7 })
        ));
        assert!(eight_point(&corrs).is_err());
    }

    #[test]
    fn noiseless_scene_gives_ratio_one_and_tiny_residuals() {
        let scene = synthetic_two_view(&SceneConfig {
            n_static: 100,
            n_moving: 0,
            n_outliers: 0,
            seed: 7,
            ..SceneConfig::default()
        });
        let (model, mask) =
            estimate_fundamental_ransac(&scene.correspondences, &RansacConfig::default()).unwrap();
        assert_eq!(inlier_ratio(&mask).unwrap(), 1.0);
        for c in &scene.correspondences {
            assert!(sampson_distance(&model.0, c) < 1e-6);
        }
        assert!(model.0.det().abs() < 1e-9);
        assert!((model.0.frobenius() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn epipolar_identity_on_planted_geometry() {
        let scene = synthetic_two_view(&SceneConfig {
            n_static: 60,
            n_moving: 0,
            n_outliers: 0,
            seed: 21,
            ..SceneConfig::default()
        });
        let (model, _) =
            estimate_fundamental_ransac(&scene.correspondences, &RansacConfig::default()).unwrap();
        for c in &scene.correspondences {
            let x1 = [c.x1, c.y1, 1.0];
            let x2 = [c.x2, c.y2, 1.0];
            let fx1 = model.0.mul_vec(x1);
            let e: f64 = x2[0] * fx1[0] + x2[1] * fx1[1] + x2[2] * fx1[2];
            assert!(e.abs() < 1e-9, "epipolar residual {e}");
        }
    }

    #[test]
    fn planted_outliers_are_rejected() {
        for seed in 0..20 {
            let scene = synthetic_two_view(&SceneConfig {
                n_static: 70,
                n_moving: 0,
                n_outliers: 30,
                seed,
                ..SceneConfig::default()
            });
            let (_, mask) =
                estimate_fundamental_ransac(&scene.correspondences, &RansacConfig::default())
                    .unwrap();
            assert_eq!(mask, scene.inlier_mask, "seed {seed}");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let scene = synthetic_two_view(&SceneConfig {
            n_static: 50,
            n_moving: 0,
            n_outliers: 20,
            seed: 5,
            ..SceneConfig::default()
        });
        let cfg = RansacConfig::default();
        let (m1, k1) = estimate_fundamental_ransac(&scene.correspondences, &cfg).unwrap();
        let (m2, k2) = estimate_fundamental_ransac(&scene.correspondences, &cfg).unwrap();
        assert_eq!(m1.0 .0, m2.0 .0);
        assert_eq!(k1, k2);
    }

    #[test]
    fn inlier_ratio_counts() {
        let mut mask = vec![true; 46];
        mask.extend(vec![false; 4]);
        assert!((inlier_ratio(&mask).unwrap() - 0.92).abs() < 1e-15);
        assert!(inlier_ratio(&[]).is_err());
        assert_eq!(inlier_ratio(&[true, true]).unwrap(), 1.0);
    }
}
