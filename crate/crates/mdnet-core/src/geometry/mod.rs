//! Two-view robust estimation and trajectory metrics: normalized 8-point
//! fundamental matrix inside RANSAC, Sampson-distance inlier counting,
//! closed-form similarity alignment, RMSE and final drift.

mod align;
mod fundamental;
mod linalg;
pub mod synthetic;

pub use align::{
    align_trajectories, associate, final_drift, rmse, umeyama_align, AssociationReport,
    SimilarityTransform, Trajectory, ASSOCIATION_WINDOW,
};
pub use fundamental::{
    eight_point, estimate_fundamental_ransac, inlier_ratio, sampson_distance, Correspondence,
    FundamentalMatrix, RansacConfig,
};
pub use linalg::{cross3, jacobi_eigen_sym, svd3, Mat3};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("need at least {needed} points, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
    #[error("point lists differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("bad trajectory: {0}")]
    BadTrajectory(String),
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parse `x1 y1 x2 y2` correspondence lines.
pub fn correspondences_from_text(text: &str) -> Result<Vec<Correspondence>, GeometryError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(GeometryError::BadLine {
                line: i + 1,
                reason: format!("expected `x1 y1 x2 y2`, got {} fields", fields.len()),
            });
        }
        let mut v = [0.0f64; 4];
        for (k, s) in fields.iter().enumerate() {
            v[k] = s.parse().map_err(|_| GeometryError::BadLine {
                line: i + 1,
                reason: format!("bad number {s:?}"),
            })?;
        }
        out.push(Correspondence {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        });
    }
    Ok(out)
}

pub fn correspondences_to_text(corrs: &[Correspondence]) -> String {
    let mut out = String::new();
    for c in corrs {
        out.push_str(&format!("{} {} {} {}\n", c.x1, c.y1, c.x2, c.y2));
    }
    out
}

pub fn load_correspondences(path: &Path) -> Result<Vec<Correspondence>, GeometryError> {
    let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    correspondences_from_text(&text)
}
