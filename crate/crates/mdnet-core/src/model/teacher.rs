//! Fixed teacher network supervising the descriptor head: a patch descriptor
//! architecture converted to run on whole images. The final 8x8 convolution
//! gets padding 4, which over-produces one row/column; the trailing row and
//! column are cropped so the output sits on the stride-4 grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_image, Conv2dParams, ModelError};
use crate::autodiff::{conv2d_raw, Tensor, TensorError};

/// Spatial reduction of the teacher: two stride-2 convolutions.
pub const TEACHER_STRIDE: usize = 4;

const CHANNELS: [usize; 7] = [32, 32, 64, 64, 128, 128, 128];
const KERNELS: [usize; 7] = [3, 3, 3, 3, 3, 3, 8];
const STRIDES: [usize; 7] = [1, 1, 2, 1, 2, 1, 1];
const PADDINGS: [usize; 7] = [1, 1, 1, 1, 1, 1, 4];

/// The seven convolution layers of the teacher. Weights are loaded from a
/// checkpoint or seeded; the teacher is never trained here.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherParams {
    pub layers: Vec<Conv2dParams>,
}

impl TeacherParams {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(7);
        let mut cin = 1;
        for i in 0..7 {
            // small positive bias keeps activations alive on flat images
            layers.push(Conv2dParams::he_init(
                cin,
                CHANNELS[i],
                KERNELS[i],
                STRIDES[i],
                PADDINGS[i],
                0.01,
                &mut rng,
            ));
            cin = CHANNELS[i];
        }
        TeacherParams { layers }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("teacher.{i}.weight"), &l.weight));
            out.push((format!("teacher.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("teacher.{i}.weight"), &mut l.weight));
            out.push((format!("teacher.{i}.bias"), &mut l.bias));
        }
        out
    }
}

/// Dense teacher descriptor map: [N, 128, H/4, W/4], each location's
/// descriptor L2-normalized to unit length.
pub fn teacher_forward(params: &TeacherParams, image: &Tensor) -> Result<Tensor, ModelError> {
    check_image(image, TEACHER_STRIDE)?;
    let mut x = image.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        x = conv2d_raw(&x, &layer.weight, &layer.bias, layer.stride, layer.padding)?;
        if i + 1 < params.layers.len() {
            let mut vals = x;
            for v in vals.values_mut() {
                *v = v.max(0.0);
            }
            x = vals;
        }
    }
    let (n, c, h, w) = x.dims4("teacher output")?;
    let (_, _, ih, iw) = image.dims4("teacher input")?;
    let (th, tw) = (ih / TEACHER_STRIDE, iw / TEACHER_STRIDE);
    debug_assert_eq!((h, w), (th + 1, tw + 1));
    let mut out = vec![0.0; n * c * th * tw];
    let src = x.values();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..th {
                for xq in 0..tw {
                    out[((b * c + ch) * th + y) * tw + xq] = src[((b * c + ch) * h + y) * w + xq];
                }
            }
        }
    }
    // unit-normalize each location's descriptor
    let plane = th * tw;
    for b in 0..n {
        for i in 0..plane {
            let mut norm = 0.0;
            for ch in 0..c {
                let v = out[(b * c + ch) * plane + i];
                norm += v * v;
            }
            let norm = norm.sqrt().max(1e-12);
            for ch in 0..c {
                out[(b * c + ch) * plane + i] /= norm;
            }
        }
    }
    Ok(Tensor::new(vec![n, c, th, tw], out)?)
}

/// Distillation targets on the student's stride-8 grid, taken from the
/// stride-4 teacher map by keeping even-indexed cells. A student cell
/// center lies 0.375 teacher cells past the even teacher cell, so the even
/// cell is the nearest one.
pub fn teacher_targets(teacher_map: &Tensor) -> Result<Tensor, ModelError> {
    let (n, c, h, w) = teacher_map.dims4("teacher_targets")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(ModelError::Tensor(TensorError::Invalid(format!(
            "teacher_targets requires even teacher grid dims, got {h}x{w}"
        ))));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = teacher_map.values();
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                out[(nc * oh + y) * ow + x] = src[(nc * h + 2 * y) * w + 2 * x];
            }
        }
    }
    Ok(Tensor::new(vec![n, c, oh, ow], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_is_quarter_resolution() {
        let teacher = TeacherParams::seeded(7);
        let image = Tensor::full(vec![1, 1, 64, 64], 0.3);
        let map = teacher_forward(&teacher, &image).unwrap();
        assert_eq!(map.shape(), &[1, 128, 16, 16]);
    }

    #[test]
    fn descriptors_are_unit_norm() {
        let teacher = TeacherParams::seeded(8);
        let vals: Vec<f64> = (0..32 * 32).map(|i| ((i * 13 % 29) as f64) / 29.0).collect();
        let image = Tensor::new(vec![1, 1, 32, 32], vals).unwrap();
        let map = teacher_forward(&teacher, &image).unwrap();
        let (_, c, h, w) = map.dims4("t").unwrap();
        let v = map.values();
        for i in 0..h * w {
            let norm: f64 = (0..c).map(|ch| v[ch * h * w + i].powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        }
    }

    #[test]
    fn constant_image_gives_constant_interior() {
        let teacher = TeacherParams::seeded(9);
        let image = Tensor::full(vec![1, 1, 128, 128], 0.5);
        let map = teacher_forward(&teacher, &image).unwrap();
        let (_, c, h, w) = map.dims4("t").unwrap();
        let v = map.values();
        // away from padding effects the map is translation invariant; the
        // stacked paddings reach about 8 cells into the stride-4 grid
        let margin = 8;
        for ch in 0..c {
            let reference = v[(ch * h + margin) * w + margin];
            for y in margin..h - margin {
                for x in margin..w - margin {
                    assert!(
                        (v[(ch * h + y) * w + x] - reference).abs() < 1e-9,
                        "channel {ch} at ({y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn targets_subsample_even_cells() {
        let teacher = TeacherParams::seeded(10);
        let vals: Vec<f64> = (0..64 * 64).map(|i| ((i * 7 % 23) as f64) / 23.0).collect();
        let image = Tensor::new(vec![1, 1, 64, 64], vals).unwrap();
        let map = teacher_forward(&teacher, &image).unwrap();
        let targets = teacher_targets(&map).unwrap();
        assert_eq!(targets.shape(), &[1, 128, 8, 8]);
        let (_, c, h, w) = map.dims4("t").unwrap();
        let m = map.values();
        let t = targets.values();
        for ch in 0..c {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(t[(ch * 8 + y) * 8 + x], m[(ch * h + 2 * y) * w + 2 * x]);
                }
            }
        }
    }

    #[test]
    fn constant_map_gives_constant_targets() {
        let map = Tensor::full(vec![1, 4, 6, 6], 0.25);
        let t = teacher_targets(&map).unwrap();
        assert_eq!(t.shape(), &[1, 4, 3, 3]);
        assert!(t.values().iter().all(|&v| v == 0.25));
    }
}
