//! Keypoint pipeline: segment-test corner detection, bilinear sampling of
//! motion attributes and descriptors at keypoints, static-point filtering,
//! mutual-nearest-neighbor matching, and the feature file format.

use thiserror::Error;

use crate::autodiff::{sample_plane, Tensor};
use crate::dataset::MotionAttribute;
use crate::geometry::Correspondence;
use crate::model::{MdNetParams, ModelError, COARSE_STRIDE, DESC_DIM};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("keypoint ({x}, {y}) outside {w}x{h} image")]
    OutOfBounds { x: f64, y: f64, w: usize, h: usize },
    #[error("descriptor is numerically zero at ({x}, {y})")]
    DegenerateDescriptor { x: f64, y: f64 },
    #[error("bad tensor for {op}: {reason}")]
    BadMap { op: &'static str, reason: String },
    #[error("feature file line {line}: {reason}")]
    BadFile { line: usize, reason: String },
}

/// Detected corner with sub-pixel coordinates and detector response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// A keypoint with its motion attribute, the attribute confidence, and a
/// unit-norm descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub keypoint: Keypoint,
    pub attribute: MotionAttribute,
    pub confidence: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<Feature>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Contrast threshold on [0, 1] intensities.
    pub threshold: f64,
    /// Points closer than this to a stronger detection are suppressed.
    pub nms_radius: f64,
    pub max_points: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            threshold: 0.08,
            nms_radius: 4.0,
            max_points: 1000,
        }
    }
}

/// 16-pixel Bresenham circle of radius 3, clockwise from 12 o'clock.
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const MIN_ARC: usize = 9;

/// Segment-test corner detector: a pixel is a corner when a contiguous arc
/// of at least 9 circle pixels is uniformly brighter or darker than the
/// center by the threshold. The score is the sum of absolute differences
/// over the longest qualifying arc; non-maximum suppression keeps the
/// strongest point within `nms_radius`, then the top `max_points` survive.
pub fn detect_corners(image: &Tensor, cfg: &DetectorConfig) -> Result<Vec<Keypoint>, FeatureError> {
    let (c, h, w) = image.dims3("detect_corners").map_err(|e| FeatureError::BadMap {
        op: "detect_corners",
        reason: e.to_string(),
    })?;
    if c != 1 {
        return Err(FeatureError::BadMap {
            op: "detect_corners",
            reason: format!("expected a grayscale image, got {c} channels"),
        });
    }
    let v = image.values();
    let mut candidates: Vec<Keypoint> = Vec::new();
    if h < 7 || w < 7 {
        return Ok(candidates);
    }
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let center = v[y * w + x];
            let mut brighter = [false; 16];
            let mut darker = [false; 16];
            let mut diffs = [0.0f64; 16];
            for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
                let p = v[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
                diffs[i] = (p - center).abs();
                brighter[i] = p >= center + cfg.threshold;
                darker[i] = p <= center - cfg.threshold;
            }
            let score_b = best_arc_score(&brighter, &diffs);
            let score_d = best_arc_score(&darker, &diffs);
            let score = score_b.max(score_d);
            if score > 0.0 {
                candidates.push(Keypoint {
                    x: x as f64,
                    y: y as f64,
                    score,
                });
            }
        }
    }

    // strongest first; ties in raster order for determinism
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
            .then(a.x.partial_cmp(&b.x).unwrap())
    });
    let r2 = cfg.nms_radius * cfg.nms_radius;
    let mut kept: Vec<Keypoint> = Vec::new();
    for kp in candidates {
        if kept.len() >= cfg.max_points {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| (k.x - kp.x).powi(2) + (k.y - kp.y).powi(2) <= r2);
        if !suppressed {
            kept.push(kp);
        }
    }
    Ok(kept)
}

/// Sum of |difference| over the longest contiguous circular run of set
/// flags, provided the run reaches the minimum arc length.
fn best_arc_score(flags: &[bool; 16], diffs: &[f64; 16]) -> f64 {
    if flags.iter().all(|&f| f) {
        return diffs.iter().sum();
    }
    let mut best_len = 0usize;
    let mut best_sum = 0.0f64;
    let mut len = 0usize;
    let mut sum = 0.0f64;
    // doubled scan handles wraparound; runs longer than 16 cannot occur
    // because at least one flag is unset
    for i in 0..32 {
        let idx = i % 16;
        if flags[idx] {
            len += 1;
            sum += diffs[idx];
            if len > best_len || (len == best_len && sum > best_sum) {
                best_len = len;
                best_sum = sum;
            }
        } else {
            len = 0;
            sum = 0.0;
        }
    }
    if best_len >= MIN_ARC {
        best_sum
    } else {
        0.0
    }
}

/// Image pixel -> coarse grid coordinate under the stride-8 output lattice.
#[inline]
fn coarse_coord(pixel: f64) -> f64 {
    (pixel + 0.5) / COARSE_STRIDE as f64 - 0.5
}

/// Keypoints live in image pixel coordinates; the grid covers
/// grid_dims * 8 pixels.
fn check_bounds(kp: &Keypoint, grid_h: usize, grid_w: usize) -> Result<(), FeatureError> {
    let (ih, iw) = (grid_h * COARSE_STRIDE, grid_w * COARSE_STRIDE);
    if kp.x < 0.0 || kp.y < 0.0 || kp.x >= iw as f64 || kp.y >= ih as f64 {
        return Err(FeatureError::OutOfBounds {
            x: kp.x,
            y: kp.y,
            w: iw,
            h: ih,
        });
    }
    Ok(())
}

/// Bilinearly interpolated, renormalized motion probabilities at a keypoint,
/// over a [3, h, w] stride-8 probability map.
pub fn attribute_probs_at(probs: &Tensor, kp: &Keypoint) -> Result<[f64; 3], FeatureError> {
    let (c, h, w) = probs.dims3("attribute_at").map_err(|e| FeatureError::BadMap {
        op: "attribute_at",
        reason: e.to_string(),
    })?;
    if c != 3 {
        return Err(FeatureError::BadMap {
            op: "attribute_at",
            reason: format!("expected 3 channels, got {c}"),
        });
    }
    check_bounds(kp, h, w)?;
    let (sy, sx) = (coarse_coord(kp.y), coarse_coord(kp.x));
    let v = probs.values();
    let mut p = [0.0f64; 3];
    for (ch, slot) in p.iter_mut().enumerate() {
        *slot = sample_plane(&v[ch * h * w..][..h * w], h, w, sy, sx);
    }
    // interpolation of per-cell simplexes stays on the simplex up to
    // rounding; renormalize anyway
    let sum: f64 = p.iter().sum();
    if sum > 0.0 {
        for slot in &mut p {
            *slot /= sum;
        }
    }
    Ok(p)
}

/// Motion attribute and its confidence at a keypoint; ties resolve in
/// attribute order (Unstable < Moving < Static).
pub fn attribute_at(probs: &Tensor, kp: &Keypoint) -> Result<(MotionAttribute, f64), FeatureError> {
    let p = attribute_probs_at(probs, kp)?;
    let mut best = 0usize;
    for ch in 1..3 {
        if p[ch] > p[best] {
            best = ch;
        }
    }
    Ok((MotionAttribute::from_index(best).expect("ch < 3"), p[best]))
}

/// Bilinearly interpolated descriptor at a keypoint, L2-normalized to unit
/// length. The map is the raw [128, h, w] descriptor head output.
pub fn sample_descriptor(desc_map: &Tensor, kp: &Keypoint) -> Result<Vec<f64>, FeatureError> {
    let (c, h, w) = desc_map.dims3("sample_descriptor").map_err(|e| FeatureError::BadMap {
        op: "sample_descriptor",
        reason: e.to_string(),
    })?;
    check_bounds(kp, h, w)?;
    let (sy, sx) = (coarse_coord(kp.y), coarse_coord(kp.x));
    let v = desc_map.values();
    let mut d = Vec::with_capacity(c);
    for ch in 0..c {
        d.push(sample_plane(&v[ch * h * w..][..h * w], h, w, sy, sx));
    }
    let norm: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(FeatureError::DegenerateDescriptor { x: kp.x, y: kp.y });
    }
    for x in &mut d {
        *x /= norm;
    }
    Ok(d)
}

/// Keep only Static-attribute features, preserving order.
pub fn filter_static(features: FeatureSet) -> FeatureSet {
    FeatureSet {
        features: features
            .features
            .into_iter()
            .filter(|f| f.attribute == MotionAttribute::Static)
            .collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractConfig {
    pub detector: DetectorConfig,
    /// Keep only points whose argmax attribute is Static.
    pub filter_static: bool,
    /// Optional stricter filter on the interpolated Static probability.
    pub min_static_prob: Option<f64>,
}

/// Full extraction pipeline on a padded [1, H, W] image: detect corners,
/// attach attributes and descriptors from the network outputs, optionally
/// keep static points only.
pub fn extract_features(
    params: &MdNetParams,
    image: &Tensor,
    cfg: &ExtractConfig,
) -> Result<FeatureSet, FeatureError> {
    let (_, h, w) = image.dims3("extract_features").map_err(|e| FeatureError::BadMap {
        op: "extract_features",
        reason: e.to_string(),
    })?;
    let batched = Tensor::new(vec![1, 1, h, w], image.values().to_vec()).expect("same numel");
    let (probs, desc) = params.infer(&batched)?;
    let probs = probs.batch_slice(0).expect("batch of one");
    let desc = desc.batch_slice(0).expect("batch of one");

    let keypoints = detect_corners(image, &cfg.detector)?;
    let mut features = Vec::with_capacity(keypoints.len());
    for kp in keypoints {
        let p = attribute_probs_at(&probs, &kp)?;
        let (attribute, confidence) = attribute_at(&probs, &kp)?;
        if let Some(min) = cfg.min_static_prob {
            if p[2] < min {
                continue;
            }
        }
        let descriptor = sample_descriptor(&desc, &kp)?;
        features.push(Feature {
            keypoint: kp,
            attribute,
            confidence,
            descriptor,
        });
    }
    let set = FeatureSet { features };
    Ok(if cfg.filter_static { filter_static(set) } else { set })
}

/// One match: indices into the two feature sets and the descriptor distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMatch {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

/// Mutual nearest neighbors under Euclidean descriptor distance, kept only
/// when the nearest/second-nearest ratio passes in both directions.
/// Output is ordered by index into `a`.
pub fn match_features(a: &FeatureSet, b: &FeatureSet, ratio: f64) -> Vec<FeatureMatch> {
    assert!(ratio > 0.0 && ratio <= 1.0, "ratio must be in (0, 1]");
    if a.features.is_empty() || b.features.is_empty() {
        return Vec::new();
    }
    let nearest_two = |from: &FeatureSet, to: &FeatureSet, i: usize| -> (usize, f64, f64) {
        let mut best = usize::MAX;
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        for (j, g) in to.features.iter().enumerate() {
            let d = dist(&from.features[i].descriptor, &g.descriptor);
            if d < d1 {
                d2 = d1;
                d1 = d;
                best = j;
            } else if d < d2 {
                d2 = d;
            }
        }
        (best, d1, d2)
    };
    let mut out = Vec::new();
    for i in 0..a.features.len() {
        let (j, d1, d2) = nearest_two(a, b, i);
        if !(d1 < ratio * d2) {
            continue;
        }
        let (back, bd1, bd2) = nearest_two(b, a, j);
        if back != i || !(bd1 < ratio * bd2) {
            continue;
        }
        out.push(FeatureMatch {
            index_a: i,
            index_b: j,
            distance: d1,
        });
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Point correspondences from matched feature sets.
pub fn correspondences(a: &FeatureSet, b: &FeatureSet, matches: &[FeatureMatch]) -> Vec<Correspondence> {
    matches
        .iter()
        .map(|m| {
            let ka = &a.features[m.index_a].keypoint;
            let kb = &b.features[m.index_b].keypoint;
            Correspondence {
                x1: ka.x,
                y1: ka.y,
                x2: kb.x,
                y2: kb.y,
            }
        })
        .collect()
}

impl FeatureSet {
    /// Text form: header `MDF1 count dim`, then per point
    /// `x y score attr conf d_1 ... d_128` with attr in {U, M, S}.
    pub fn to_text(&self) -> String {
        let mut out = format!("MDF1 {} {}\n", self.features.len(), DESC_DIM);
        for f in &self.features {
            out.push_str(&format!(
                "{} {} {} {} {}",
                f.keypoint.x,
                f.keypoint.y,
                f.keypoint.score,
                f.attribute.letter(),
                f.confidence
            ));
            for d in &f.descriptor {
                out.push(' ');
                out.push_str(&format!("{d}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FeatureError> {
        let bad = |line: usize, reason: String| FeatureError::BadFile { line, reason };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| bad(1, "empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "MDF1" {
            return Err(bad(1, "header must be `MDF1 count dim`".into()));
        }
        let count: usize = fields[1]
            .parse()
            .map_err(|_| bad(1, format!("bad count {:?}", fields[1])))?;
        let dim: usize = fields[2]
            .parse()
            .map_err(|_| bad(1, format!("bad dim {:?}", fields[2])))?;
        if dim != DESC_DIM {
            return Err(bad(1, format!("expected dim {DESC_DIM}, got {dim}")));
        }
        let mut features = Vec::with_capacity(count);
        for _ in 0..count {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| bad(count + 1, "missing feature line".into()))?;
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 + dim {
                return Err(bad(lineno, format!("expected {} fields, got {}", 5 + dim, fields.len())));
            }
            let fnum = |s: &str| -> Result<f64, FeatureError> {
                s.parse().map_err(|_| bad(lineno, format!("bad number {s:?}")))
            };
            let attribute = fields[3]
                .chars()
                .next()
                .and_then(MotionAttribute::from_letter)
                .filter(|a| *a != MotionAttribute::Ignore && fields[3].len() == 1)
                .ok_or_else(|| bad(lineno, format!("bad attribute {:?}", fields[3])))?;
            let mut descriptor = Vec::with_capacity(dim);
            for s in &fields[5..] {
                descriptor.push(fnum(s)?);
            }
            features.push(Feature {
                keypoint: Keypoint {
                    x: fnum(fields[0])?,
                    y: fnum(fields[1])?,
                    score: fnum(fields[2])?,
                },
                attribute,
                confidence: fnum(fields[4])?,
                descriptor,
            });
        }
        Ok(FeatureSet { features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image_with_squares() -> Tensor {
        // one bright 12x12 square on a dark 64x64 background: its four
        // corners are the only segment-test corners
        let mut v = vec![0.05f64; 64 * 64];
        for y in 20..32 {
            for x in 24..36 {
                v[y * 64 + x] = 0.9;
            }
        }
        Tensor::new(vec![1, 64, 64], v).unwrap()
    }

    #[test]
    fn constant_image_has_no_corners() {
        let img = Tensor::full(vec![1, 32, 32], 0.5);
        let kps = detect_corners(&img, &DetectorConfig::default()).unwrap();
        assert!(kps.is_empty());
    }

    #[test]
    fn square_corners_are_found() {
        let img = image_with_squares();
        let kps = detect_corners(&img, &DetectorConfig::default()).unwrap();
        assert_eq!(kps.len(), 4, "{kps:?}");
        let truth = [(24.0, 20.0), (35.0, 20.0), (24.0, 31.0), (35.0, 31.0)];
        for (tx, ty) in truth {
            assert!(
                kps.iter()
                    .any(|k| (k.x - tx).abs() <= 1.0 && (k.y - ty).abs() <= 1.0),
                "missing corner near ({tx}, {ty}): {kps:?}"
            );
        }
    }

    #[test]
    fn threshold_monotonicity_without_nms() {
        // raw candidate counts (radius 0 disables suppression) never grow
        // with the threshold
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..48 * 48).map(|_| rng.random::<f64>()).collect();
        let img = Tensor::new(vec![1, 48, 48], v).unwrap();
        let mut prev = usize::MAX;
        for t in [0.02, 0.05, 0.1, 0.2, 0.4] {
            let cfg = DetectorConfig {
                threshold: t,
                nms_radius: 0.0,
                max_points: usize::MAX,
            };
            let n = detect_corners(&img, &cfg).unwrap().len();
            assert!(n <= prev, "threshold {t} gave {n} > {prev}");
            prev = n;
        }
    }

    #[test]
    fn attribute_at_exact_cell_center() {
        // keypoint at the center of cell (0, 0): pixel (3.5, 3.5)
        let mut v = vec![0.0; 3 * 4];
        // cell 0 probs (0.1, 0.2, 0.7), other cells uniform
        for i in 0..4 {
            v[i] = if i == 0 { 0.1 } else { 1.0 / 3.0 };
            v[4 + i] = if i == 0 { 0.2 } else { 1.0 / 3.0 };
            v[8 + i] = if i == 0 { 0.7 } else { 1.0 / 3.0 };
        }
        let probs = Tensor::new(vec![3, 2, 2], v).unwrap();
        let kp = Keypoint { x: 3.5, y: 3.5, score: 1.0 };
        let (attr, conf) = attribute_at(&probs, &kp).unwrap();
        assert_eq!(attr, MotionAttribute::Static);
        assert!((conf - 0.7).abs() < 1e-12);
    }

    #[test]
    fn uniform_field_confidence_third() {
        let probs = Tensor::full(vec![3, 4, 4], 1.0 / 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let kp = Keypoint {
                x: rng.random::<f64>() * 31.0,
                y: rng.random::<f64>() * 31.0,
                score: 0.0,
            };
            let (_, conf) = attribute_at(&probs, &kp).unwrap();
            assert!((conf - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolated_simplex_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v = vec![0.0; 3 * 16];
        for i in 0..16 {
            let a: f64 = rng.random();
            let b: f64 = rng.random::<f64>() * (1.0 - a);
            v[i] = a;
            v[16 + i] = b;
            v[32 + i] = 1.0 - a - b;
        }
        let probs = Tensor::new(vec![3, 4, 4], v).unwrap();
        for _ in 0..50 {
            let kp = Keypoint {
                x: rng.random::<f64>() * 31.0,
                y: rng.random::<f64>() * 31.0,
                score: 0.0,
            };
            let p = attribute_probs_at(&probs, &kp).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptor_sampling_midpoint_and_norm() {
        let c = 4; // smaller descriptor for the closed-form check
        let mut v = vec![0.0; c * 2 * 2];
        let d1 = [1.0, 0.0, 0.0, 0.0];
        let d2 = [0.0, 1.0, 0.0, 0.0];
        for ch in 0..c {
            // columns 0 and 1 hold d1 and d2 in both rows
            v[ch * 4] = d1[ch];
            v[ch * 4 + 1] = d2[ch];
            v[ch * 4 + 2] = d1[ch];
            v[ch * 4 + 3] = d2[ch];
        }
        let map = Tensor::new(vec![c, 2, 2], v).unwrap();
        // midpoint between cells (0,0) and (0,1): coarse x = 0.5 -> pixel 7.5
        let kp = Keypoint { x: 7.5, y: 3.5, score: 0.0 };
        let d = sample_descriptor(&map, &kp).unwrap();
        let expect = 1.0 / 2.0f64.sqrt();
        assert!((d[0] - expect).abs() < 1e-12);
        assert!((d[1] - expect).abs() < 1e-12);
        let norm: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_descriptor_is_rejected() {
        let map = Tensor::zeros(vec![8, 2, 2]);
        let kp = Keypoint { x: 3.5, y: 3.5, score: 0.0 };
        assert!(matches!(
            sample_descriptor(&map, &kp),
            Err(FeatureError::DegenerateDescriptor { .. })
        ));
    }

    fn feature(attr: MotionAttribute, desc: Vec<f64>) -> Feature {
        Feature {
            keypoint: Keypoint { x: 1.0, y: 2.0, score: 3.0 },
            attribute: attr,
            confidence: 0.9,
            descriptor: desc,
        }
    }

    #[test]
    fn filter_static_keeps_order_and_is_idempotent() {
        use MotionAttribute::*;
        let set = FeatureSet {
            features: vec![
                feature(Static, vec![1.0]),
                feature(Moving, vec![2.0]),
                feature(Unstable, vec![3.0]),
                feature(Static, vec![4.0]),
            ],
        };
        let once = filter_static(set);
        assert_eq!(once.features.len(), 2);
        assert_eq!(once.features[0].descriptor, vec![1.0]);
        assert_eq!(once.features[1].descriptor, vec![4.0]);
        let twice = filter_static(once.clone());
        assert_eq!(once, twice);
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = FeatureSet {
            features: (0..10)
                .map(|_| {
                    let d: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
                    feature(MotionAttribute::Static, unit(d))
                })
                .collect(),
        };
        let matches = match_features(&set, &set, 1.0);
        assert_eq!(matches.len(), 10);
        for m in matches {
            assert_eq!(m.index_a, m.index_b);
            assert_eq!(m.distance, 0.0);
        }
    }

    #[test]
    fn equidistant_descriptors_fail_ratio_test() {
        // orthogonal unit vectors: all cross distances are sqrt(2)
        let a = FeatureSet {
            features: (0..4)
                .map(|i| {
                    let mut d = vec![0.0; 8];
                    d[i] = 1.0;
                    feature(MotionAttribute::Static, d)
                })
                .collect(),
        };
        let b = FeatureSet {
            features: (0..4)
                .map(|i| {
                    let mut d = vec![0.0; 8];
                    d[i + 4] = 1.0;
                    feature(MotionAttribute::Static, d)
                })
                .collect(),
        };
        assert!(match_features(&a, &b, 0.8).is_empty());
    }

    #[test]
    fn planted_permutation_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base: Vec<Vec<f64>> = (0..12)
            .map(|_| unit((0..32).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect();
        let a = FeatureSet {
            features: base
                .iter()
                .map(|d| feature(MotionAttribute::Static, d.clone()))
                .collect(),
        };
        // permute and add small noise
        let perm: Vec<usize> = (0..12).map(|i| (i + 5) % 12).collect();
        let b = FeatureSet {
            features: perm
                .iter()
                .map(|&i| {
                    let noisy: Vec<f64> = base[i]
                        .iter()
                        .map(|x| x + (rng.random::<f64>() - 0.5) * 0.02)
                        .collect();
                    feature(MotionAttribute::Static, unit(noisy))
                })
                .collect(),
        };
        let matches = match_features(&a, &b, 0.8);
        assert_eq!(matches.len(), 12);
        for m in &matches {
            assert_eq!(perm[m.index_b], m.index_a);
        }
    }

    #[test]
    fn matching_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut mk = |n: usize| FeatureSet {
            features: (0..n)
                .map(|_| {
                    let d: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
                    feature(MotionAttribute::Static, unit(d))
                })
                .collect(),
        };
        let a = mk(15);
        let b = mk(13);
        let ab = match_features(&a, &b, 0.85);
        let ba = match_features(&b, &a, 0.85);
        let mut flipped: Vec<(usize, usize)> = ba.iter().map(|m| (m.index_b, m.index_a)).collect();
        flipped.sort_unstable();
        let mut fwd: Vec<(usize, usize)> = ab.iter().map(|m| (m.index_a, m.index_b)).collect();
        fwd.sort_unstable();
        assert_eq!(fwd, flipped);
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let set = FeatureSet {
            features: vec![
                Feature {
                    keypoint: Keypoint { x: 1.25, y: 2.5, score: 0.75 },
                    attribute: MotionAttribute::Static,
                    confidence: 0.625,
                    descriptor: unit((1..=128).map(|i| i as f64).collect()),
                },
            ],
        };
        let text = set.to_text();
        assert!(text.starts_with("MDF1 1 128\n"));
        let loaded = FeatureSet::from_text(&text).unwrap();
        assert_eq!(loaded, set);

        assert!(FeatureSet::from_text("").is_err());
        assert!(FeatureSet::from_text("MDF0 1 128\n").is_err());
        assert!(FeatureSet::from_text("MDF1 1 128\n1 2 3 X 0.5\n").is_err());
        let err = FeatureSet::from_text("MDF1 1 128\n1 2 3 S 0.5 1 2\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
