//! Seeded synthetic two-view scenes for testing the epipolar machinery:
//! exact correspondences from a random rig, points on an independently
//! translating object, and wrong matches. Moving points and outliers are
//! re-drawn until they violate the static epipolar model by a margin, so
//! the planted labels are unambiguous.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fundamental::{sampson_distance, Correspondence};
use super::linalg::Mat3;
use crate::dataset::MotionAttribute;

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub n_static: usize,
    pub n_moving: usize,
    pub n_outliers: usize,
    pub seed: u64,
    /// Planted non-inliers must exceed this Sampson distance (pixels)
    /// against the true static model.
    pub margin_px: f64,
    pub image_w: f64,
    pub image_h: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_static: 100,
            n_moving: 0,
            n_outliers: 0,
            seed: 0,
            // wide enough that a consensus model at a ~1 px threshold can
            // never absorb a planted non-inlier by bending
            margin_px: 20.0,
            image_w: 640.0,
            image_h: 480.0,
        }
    }
}

pub struct TwoViewScene {
    pub correspondences: Vec<Correspondence>,
    /// True exactly for the static (model-consistent) correspondences.
    pub inlier_mask: Vec<bool>,
    pub attributes: Vec<MotionAttribute>,
    pub f_true: Mat3,
}

struct Rig {
    rotation: Mat3,
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl Rig {
    fn project1(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        self.pinhole(p)
    }

    fn project2(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let r = self.rotation.mul_vec(p);
        self.pinhole([
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ])
    }

    fn pinhole(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] < 0.5 {
            return None;
        }
        Some((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }
}

fn rodrigues(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    Mat3([
        t * x * x + c,
        t * x * y - s * z,
        t * x * z + s * y,
        t * x * y + s * z,
        t * y * y + c,
        t * y * z - s * x,
        t * x * z - s * y,
        t * y * z + s * x,
        t * z * z + c,
    ])
}

fn true_fundamental(rig: &Rig) -> Mat3 {
    let t = rig.translation;
    let tx = Mat3([0.0, -t[2], t[1], t[2], 0.0, -t[0], -t[1], t[0], 0.0]);
    let e = tx.mul(&rig.rotation);
    let k_inv = Mat3([
        1.0 / rig.fx,
        0.0,
        -rig.cx / rig.fx,
        0.0,
        1.0 / rig.fy,
        -rig.cy / rig.fy,
        0.0,
        0.0,
        1.0,
    ]);
    let f = k_inv.transpose().mul(&e).mul(&k_inv);
    f.scale(1.0 / f.frobenius())
}

pub fn synthetic_two_view(cfg: &SceneConfig) -> TwoViewScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let axis = [
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
    ];
    let angle = 0.05 + rng.random::<f64>() * 0.15;
    let translation = [
        0.6 + rng.random::<f64>() * 0.8,
        (rng.random::<f64>() - 0.5) * 0.4,
        (rng.random::<f64>() - 0.5) * 0.4,
    ];
    let rig = Rig {
        rotation: rodrigues(axis, angle),
        translation,
        fx: 500.0,
        fy: 500.0,
        cx: cfg.image_w / 2.0,
        cy: cfg.image_h / 2.0,
    };
    let f_true = true_fundamental(&rig);

    let in_image = |p: (f64, f64)| {
        p.0 >= 0.0 && p.0 < cfg.image_w && p.1 >= 0.0 && p.1 < cfg.image_h
    };
    let random_point = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            (rng.random::<f64>() - 0.5) * 6.0,
            (rng.random::<f64>() - 0.5) * 4.0,
            4.0 + rng.random::<f64>() * 6.0,
        ]
    };

    let mut correspondences = Vec::new();
    let mut inlier_mask = Vec::new();
    let mut attributes = Vec::new();

    // exact static correspondences
    let mut produced = 0usize;
    while produced < cfg.n_static {
        let p = random_point(&mut rng);
        let (Some(a), Some(b)) = (rig.project1(p), rig.project2(p)) else { continue };
        if !in_image(a) || !in_image(b) {
            continue;
        }
        correspondences.push(Correspondence {
            x1: a.0,
            y1: a.1,
            x2: b.0,
            y2: b.1,
        });
        inlier_mask.push(true);
        attributes.push(MotionAttribute::Static);
        produced += 1;
    }

    // points on one rigid object translating by a shared world offset;
    // the offset magnitude is bounded away from zero so the induced image
    // motion can actually clear the margin, and it is re-drawn if the
    // geometry still produces too few margin-violating points
    let draw_shift = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let mut dir = [0.0f64; 3];
        let mut norm = 0.0;
        while norm < 1e-3 {
            for v in &mut dir {
                *v = rng.random::<f64>() - 0.5;
            }
            norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let mag = 0.5 + rng.random::<f64>() * 0.7;
        [dir[0] / norm * mag, dir[1] / norm * mag, dir[2] / norm * mag]
    };
    let mut object_shift = draw_shift(&mut rng);
    let mut produced = 0usize;
    let mut attempts = 0usize;
    while produced < cfg.n_moving {
        attempts += 1;
        if attempts > 20_000 {
            object_shift = draw_shift(&mut rng);
            attempts = 0;
        }
        let p = random_point(&mut rng);
        let shifted = [
            p[0] + object_shift[0],
            p[1] + object_shift[1],
            p[2] + object_shift[2],
        ];
        let (Some(a), Some(b)) = (rig.project1(p), rig.project2(shifted)) else { continue };
        if !in_image(a) || !in_image(b) {
            continue;
        }
        let c = Correspondence {
            x1: a.0,
            y1: a.1,
            x2: b.0,
            y2: b.1,
        };
        if sampson_distance(&f_true, &c) <= cfg.margin_px {
            continue;
        }
        correspondences.push(c);
        inlier_mask.push(false);
        attributes.push(MotionAttribute::Moving);
        produced += 1;
    }

    // wrong matches: real point in image 1, unrelated location in image 2
    let mut produced = 0usize;
    while produced < cfg.n_outliers {
        let p = random_point(&mut rng);
        let Some(a) = rig.project1(p) else { continue };
        if !in_image(a) {
            continue;
        }
        let b = (
            rng.random::<f64>() * cfg.image_w,
            rng.random::<f64>() * cfg.image_h,
        );
        let c = Correspondence {
            x1: a.0,
            y1: a.1,
            x2: b.0,
            y2: b.1,
        };
        if sampson_distance(&f_true, &c) <= cfg.margin_px {
            continue;
        }
        correspondences.push(c);
        inlier_mask.push(false);
        attributes.push(MotionAttribute::Static);
        produced += 1;
    }

    TwoViewScene {
        correspondences,
        inlier_mask,
        attributes,
        f_true,
    }
}
