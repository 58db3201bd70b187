//! Dataset ingestion: image + semantic-label pairs, the semantic-class to
//! motion-attribute mapping, and coarse-grid training targets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::COARSE_STRIDE;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("label image {path} must be 8-bit single channel")]
    BadLabelFormat { path: String },
    #[error("{image} is {iw}x{ih} but label {label} is {lw}x{lh}")]
    DimMismatch {
        image: String,
        label: String,
        iw: u32,
        ih: u32,
        lw: u32,
        lh: u32,
    },
    #[error("manifest {0} contains no entries")]
    EmptyManifest(String),
    #[error("manifest {path} line {line}: expected `image<TAB>label`")]
    BadManifestLine { path: String, line: usize },
    #[error("label grid dims must be divisible by {stride}, got {h}x{w}")]
    NotDivisible { h: usize, w: usize, stride: usize },
    #[error("label mapping line {line}: {reason}")]
    BadMappingLine { line: usize, reason: String },
    #[error("label grid text line {line}: {reason}")]
    BadGridText { line: usize, reason: String },
    #[error("dataset has no labeled cells")]
    NoLabels,
}

/// Motion attribute of a point: three learnable classes plus an ignore
/// sentinel for cells without a valid label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MotionAttribute {
    Unstable,
    Moving,
    Static,
    Ignore,
}

impl MotionAttribute {
    /// Class index for learnable attributes, None for Ignore.
    pub fn index(self) -> Option<usize> {
        match self {
            MotionAttribute::Unstable => Some(0),
            MotionAttribute::Moving => Some(1),
            MotionAttribute::Static => Some(2),
            MotionAttribute::Ignore => None,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(MotionAttribute::Unstable),
            1 => Some(MotionAttribute::Moving),
            2 => Some(MotionAttribute::Static),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            MotionAttribute::Unstable => 'U',
            MotionAttribute::Moving => 'M',
            MotionAttribute::Static => 'S',
            MotionAttribute::Ignore => 'I',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'U' => Some(MotionAttribute::Unstable),
            'M' => Some(MotionAttribute::Moving),
            'S' => Some(MotionAttribute::Static),
            'I' => Some(MotionAttribute::Ignore),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionAttribute::Unstable => "unstable",
            MotionAttribute::Moving => "moving",
            MotionAttribute::Static => "static",
            MotionAttribute::Ignore => "ignore",
        }
    }

    pub fn parse_name(s: &str) -> Option<Self> {
        match s {
            "unstable" => Some(MotionAttribute::Unstable),
            "moving" => Some(MotionAttribute::Moving),
            "static" => Some(MotionAttribute::Static),
            "ignore" => Some(MotionAttribute::Ignore),
            _ => None,
        }
    }
}

impl fmt::Display for MotionAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Semantic vocabulary: pixel id -> class name. Ids outside the vocabulary
/// resolve to no name and end up Ignore.
#[derive(Debug, Clone)]
pub struct SemanticVocab {
    names: Vec<String>,
}

impl SemanticVocab {
    /// Urban street-scene vocabulary, ids 0..=18 in a fixed order.
    pub fn urban_default() -> Self {
        let names = [
            "sky",
            "vegetation",
            "terrain",
            "human",
            "vehicle",
            "static",
            "dynamic",
            "traffic light",
            "ground",
            "flat",
            "building",
            "wall",
            "fence",
            "guard rail",
            "bridge",
            "tunnel",
            "pole",
            "pole group",
            "traffic sign",
        ];
        SemanticVocab {
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Semantic class name -> motion attribute. Total: names not present map
/// to Ignore, never silently to Static.
#[derive(Debug, Clone)]
pub struct LabelMapping {
    map: BTreeMap<String, MotionAttribute>,
}

impl LabelMapping {
    /// Default mapping over the urban vocabulary. Note the semantic classes
    /// named "static" and "dynamic" (parked / movable objects) map to the
    /// Moving attribute despite the name collision with the Static
    /// attribute; the map is keyed by class name to keep that explicit.
    pub fn urban_default() -> Self {
        use MotionAttribute::*;
        let mut map = BTreeMap::new();
        for name in ["sky", "vegetation", "terrain"] {
            map.insert(name.to_string(), Unstable);
        }
        for name in ["human", "vehicle", "static", "dynamic", "traffic light"] {
            map.insert(name.to_string(), Moving);
        }
        for name in [
            "ground",
            "flat",
            "building",
            "wall",
            "fence",
            "guard rail",
            "bridge",
            "tunnel",
            "pole",
            "pole group",
            "traffic sign",
        ] {
            map.insert(name.to_string(), Static);
        }
        LabelMapping { map }
    }

    pub fn attribute(&self, name: &str) -> MotionAttribute {
        self.map.get(name).copied().unwrap_or(MotionAttribute::Ignore)
    }

    /// Apply override lines of the form `semantic_name=unstable|moving|static|ignore`.
    pub fn apply_overrides(&mut self, text: &str) -> Result<(), DatasetError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, attr) = line.split_once('=').ok_or_else(|| DatasetError::BadMappingLine {
                line: i + 1,
                reason: "expected `name=attribute`".into(),
            })?;
            let attr = MotionAttribute::parse_name(attr.trim()).ok_or_else(|| {
                DatasetError::BadMappingLine {
                    line: i + 1,
                    reason: format!("unknown attribute {:?}", attr.trim()),
                }
            })?;
            self.map.insert(name.trim().to_string(), attr);
        }
        Ok(())
    }
}

/// Per-cell motion labels on the coarse (stride-8) grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionLabelGrid {
    pub h: usize,
    pub w: usize,
    cells: Vec<MotionAttribute>,
}

impl MotionLabelGrid {
    pub fn new(h: usize, w: usize, cells: Vec<MotionAttribute>) -> Self {
        assert_eq!(cells.len(), h * w);
        MotionLabelGrid { h, w, cells }
    }

    pub fn get(&self, y: usize, x: usize) -> MotionAttribute {
        self.cells[y * self.w + x]
    }

    pub fn cells(&self) -> &[MotionAttribute] {
        &self.cells
    }

    /// Text form: `h w` header, then one row of U/M/S/I letters per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                out.push(self.get(y, x).letter());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DatasetError::BadGridText {
            line: 1,
            reason: "empty file".into(),
        })?;
        let mut it = header.split_whitespace();
        let parse = |s: Option<&str>, line| {
            s.and_then(|v| v.parse::<usize>().ok())
                .ok_or(DatasetError::BadGridText {
                    line,
                    reason: "header must be `h w`".into(),
                })
        };
        let h = parse(it.next(), 1)?;
        let w = parse(it.next(), 1)?;
        let mut cells = Vec::with_capacity(h * w);
        for row in 0..h {
            let (idx, line) = lines.next().ok_or(DatasetError::BadGridText {
                line: row + 2,
                reason: "missing row".into(),
            })?;
            if line.chars().count() != w {
                return Err(DatasetError::BadGridText {
                    line: idx + 1,
                    reason: format!("expected {w} cells, got {}", line.chars().count()),
                });
            }
            for c in line.chars() {
                cells.push(MotionAttribute::from_letter(c).ok_or(DatasetError::BadGridText {
                    line: idx + 1,
                    reason: format!("unknown attribute letter {c:?}"),
                })?);
            }
        }
        Ok(MotionLabelGrid::new(h, w, cells))
    }
}

/// One training sample: normalized grayscale image (padded to a multiple of
/// 8), the full-resolution attribute map, and the derived coarse label grid.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    /// [1, H, W] with values in [0, 1]; H, W already padded.
    pub image: Tensor,
    pub attributes: Vec<MotionAttribute>,
    pub labels: MotionLabelGrid,
    pub height: usize,
    pub width: usize,
    /// Pixels whose semantic id had no vocabulary entry.
    pub unknown_pixels: usize,
}

/// Transform a semantic id map into motion attributes. Returns the
/// attribute map and the count of unresolved ids.
pub fn semantic_to_motion(
    ids: &[u8],
    vocab: &SemanticVocab,
    mapping: &LabelMapping,
) -> (Vec<MotionAttribute>, usize) {
    let mut unknown = 0usize;
    let attrs = ids
        .iter()
        .map(|&id| match vocab.name(id) {
            Some(name) => mapping.attribute(name),
            None => {
                unknown += 1;
                MotionAttribute::Ignore
            }
        })
        .collect();
    (attrs, unknown)
}

/// Majority vote over each 8x8 cell among non-Ignore pixels; ties broken by
/// the order Unstable < Moving < Static; all-Ignore cells stay Ignore.
pub fn downsample_labels(
    attrs: &[MotionAttribute],
    h: usize,
    w: usize,
) -> Result<MotionLabelGrid, DatasetError> {
    let s = COARSE_STRIDE;
    if h % s != 0 || w % s != 0 {
        return Err(DatasetError::NotDivisible { h, w, stride: s });
    }
    let (gh, gw) = (h / s, w / s);
    let mut cells = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut counts = [0usize; 3];
            for dy in 0..s {
                for dx in 0..s {
                    if let Some(i) = attrs[(gy * s + dy) * w + gx * s + dx].index() {
                        counts[i] += 1;
                    }
                }
            }
            let best = counts.iter().max().copied().unwrap_or(0);
            if best == 0 {
                cells.push(MotionAttribute::Ignore);
            } else {
                let idx = counts.iter().position(|&c| c == best).expect("max exists");
                cells.push(MotionAttribute::from_index(idx).expect("idx < 3"));
            }
        }
    }
    Ok(MotionLabelGrid::new(gh, gw, cells))
}

/// Counts of coarse cells per attribute over the whole dataset.
pub fn class_histogram(samples: &[Sample]) -> Result<[u64; 3], DatasetError> {
    let mut counts = [0u64; 3];
    for s in samples {
        for cell in s.labels.cells() {
            if let Some(i) = cell.index() {
                counts[i] += 1;
            }
        }
    }
    if counts.iter().sum::<u64>() == 0 {
        return Err(DatasetError::NoLabels);
    }
    Ok(counts)
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub vocab: SemanticVocab,
    pub mapping: LabelMapping,
    /// Hard error on a bad sample when true; skip it (with a counter)
    /// when false.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            vocab: SemanticVocab::urban_default(),
            mapping: LabelMapping::urban_default(),
            strict: true,
        }
    }
}

/// Load a manifest of `image_path<TAB>label_path` lines. Relative paths are
/// resolved against the manifest's directory.
pub fn load_dataset(manifest: &Path, opts: &LoadOptions) -> Result<Vec<Sample>, DatasetError> {
    let text = std::fs::read_to_string(manifest).map_err(|source| DatasetError::Io {
        path: manifest.display().to_string(),
        source,
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    let mut any_entry = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let (img, lab) = line.split_once('\t').ok_or(DatasetError::BadManifestLine {
            path: manifest.display().to_string(),
            line: i + 1,
        })?;
        any_entry = true;
        match load_sample(&resolve(base, img), &resolve(base, lab), opts) {
            Ok(s) => samples.push(s),
            Err(e) if opts.strict => return Err(e),
            Err(e) => {
                skipped += 1;
                eprintln!("skipping sample at line {}: {e}", i + 1);
            }
        }
    }
    if !any_entry {
        return Err(DatasetError::EmptyManifest(manifest.display().to_string()));
    }
    if samples.is_empty() {
        return Err(DatasetError::NoLabels);
    }
    if skipped > 0 {
        eprintln!("skipped {skipped} of {} manifest entries", skipped + samples.len());
    }
    Ok(samples)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Load one image/label pair into a padded sample.
pub fn load_sample(image_path: &Path, label_path: &Path, opts: &LoadOptions) -> Result<Sample, DatasetError> {
    let (pixels, iw, ih) = read_gray(image_path)?;
    let (ids, lw, lh) = read_labels(label_path)?;
    if (iw, ih) != (lw, lh) {
        return Err(DatasetError::DimMismatch {
            image: image_path.display().to_string(),
            label: label_path.display().to_string(),
            iw,
            ih,
            lw,
            lh,
        });
    }
    let (attrs, unknown) = semantic_to_motion(&ids, &opts.vocab, &opts.mapping);
    Ok(build_sample(
        image_path.display().to_string(),
        &pixels,
        &attrs,
        ih as usize,
        iw as usize,
        unknown,
    ))
}

/// Assemble a sample from in-memory data: normalize to [0, 1], reflect-pad
/// to the next multiple of 8 (padded pixels labeled Ignore), derive the
/// coarse grid.
pub fn build_sample(
    name: String,
    pixels: &[u8],
    attrs: &[MotionAttribute],
    h: usize,
    w: usize,
    unknown_pixels: usize,
) -> Sample {
    let (values, ph, pw) = pad_image(pixels, h, w);
    let mut padded_attrs = vec![MotionAttribute::Ignore; ph * pw];
    for y in 0..h {
        for x in 0..w {
            padded_attrs[y * pw + x] = attrs[y * w + x];
        }
    }
    let labels = downsample_labels(&padded_attrs, ph, pw).expect("padded dims are divisible");
    Sample {
        name,
        image: Tensor::new(vec![1, ph, pw], values).expect("consistent shape"),
        attributes: padded_attrs,
        labels,
        height: ph,
        width: pw,
        unknown_pixels,
    }
}

/// Normalize to [0, 1] and reflect-pad to the next multiple of 8.
fn pad_image(pixels: &[u8], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let s = COARSE_STRIDE;
    let ph = h.div_ceil(s) * s;
    let pw = w.div_ceil(s) * s;
    let mut values = vec![0.0f64; ph * pw];
    for y in 0..ph {
        let sy = reflect_index(y, h);
        for x in 0..pw {
            let sx = reflect_index(x, w);
            values[y * pw + x] = pixels[sy * w + sx] as f64 / 255.0;
        }
    }
    (values, ph, pw)
}

/// Load a grayscale image as a padded [1, H', W'] tensor. Returns the
/// tensor and the original (unpadded) dimensions.
pub fn load_image_padded(path: &Path) -> Result<(Tensor, usize, usize), DatasetError> {
    let (pixels, w, h) = read_gray(path)?;
    let (values, ph, pw) = pad_image(&pixels, h as usize, w as usize);
    Ok((
        Tensor::new(vec![1, ph, pw], values).expect("consistent shape"),
        h as usize,
        w as usize,
    ))
}

/// Mirror out-of-range coordinates back into [0, len) without repeating the
/// edge pixel; falls back to clamping for tiny images.
fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        return i;
    }
    if len == 1 {
        return 0;
    }
    let over = i - (len - 1);
    if over <= len - 1 {
        len - 1 - over
    } else {
        0
    }
}

fn read_gray(path: &Path) -> Result<(Vec<u8>, u32, u32), DatasetError> {
    let img = open_image(path)?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width(), gray.height());
    Ok((gray.into_raw(), w, h))
}

fn read_labels(path: &Path) -> Result<(Vec<u8>, u32, u32), DatasetError> {
    let img = open_image(path)?;
    match img {
        DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width(), gray.height());
            Ok((gray.into_raw(), w, h))
        }
        _ => Err(DatasetError::BadLabelFormat {
            path: path.display().to_string(),
        }),
    }
}

fn open_image(path: &Path) -> Result<DynamicImage, DatasetError> {
    let reader = ImageReader::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    reader.decode().map_err(|source| DatasetError::Decode {
        path: path.display().to_string(),
        source,
    })
}
