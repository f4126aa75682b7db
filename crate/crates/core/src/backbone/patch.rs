use super::config::{ObsShape, TitConfig};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Result, TitError};

/// One observation cut into patches, one patch per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T> {
    pub patches: Tensor<T>,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }
}

/// Cuts `obs` into the patch layout of `cfg` (unscaled values).
///
/// Images become non-overlapping `P×P×C` tiles in raster order, each tile
/// flattened row-major with channels innermost. Arrays become one patch per
/// entry.
pub fn patchify<T: Scalar>(obs: &[f32], cfg: &TitConfig) -> Result<PatchSequence<T>> {
    if cfg.variant == super::Variant::WoOuter && cfg.context_len > 1 {
        return Err(TitError::config(
            "variant",
            "wo_outer patchifies stacked histories; use a model forward instead",
        ));
    }
    let shape = cfg.obs;
    check_divisible(shape, cfg.patch_size)?;
    if obs.len() != shape.len() {
        return Err(TitError::Shape {
            op: "patchify",
            lhs: vec![obs.len()],
            rhs: shape.dims(),
        });
    }
    let mut out = Vec::with_capacity(shape.len());
    patchify_into(obs, shape, cfg.patch_size, 1.0, &mut out)?;
    let rows = cfg.num_patches();
    Ok(PatchSequence {
        patches: Tensor::new(vec![rows, out.len() / rows], out)?,
    })
}

pub(crate) fn check_divisible(shape: ObsShape, p: usize) -> Result<()> {
    if let ObsShape::Image { height, width, .. } = shape {
        if p == 0 || height % p != 0 || width % p != 0 {
            return Err(TitError::config(
                "patch_size",
                format!("{height}x{width} image is not divisible into {p}x{p} patches"),
            ));
        }
    }
    Ok(())
}

/// Appends the patch rows of one observation to `out`, multiplying each
/// value by `scale`. Array observations of length `m·dim` yield `dim`
/// patches of `m` contiguous values.
pub(crate) fn patchify_into<T: Scalar>(
    obs: &[f32],
    shape: ObsShape,
    p: usize,
    scale: f32,
    out: &mut Vec<T>,
) -> Result<()> {
    let fits = match shape {
        ObsShape::Image { .. } => obs.len() == shape.len(),
        ObsShape::Array { dim } => !obs.is_empty() && obs.len().is_multiple_of(dim),
    };
    if !fits {
        return Err(TitError::Shape {
            op: "patchify",
            lhs: vec![obs.len()],
            rhs: shape.dims(),
        });
    }
    match shape {
        ObsShape::Image {
            height,
            width,
            channels,
        } => {
            for pr in 0..height / p {
                for pc in 0..width / p {
                    for dr in 0..p {
                        let start = ((pr * p + dr) * width + pc * p) * channels;
                        out.extend(
                            obs[start..start + p * channels]
                                .iter()
                                .map(|&v| T::from_f64_lossy((v * scale) as f64)),
                        );
                    }
                }
            }
        }
        ObsShape::Array { .. } => {
            out.extend(obs.iter().map(|&v| T::from_f64_lossy((v * scale) as f64)))
        }
    }
    Ok(())
}

/// Interleaves `k` frames of `shape` into one observation: images gain
/// `k·C` channels (frame-major within each pixel), arrays become
/// entry-major `[dim × k]`.
pub(crate) fn stack_frames(frames: &[f32], shape: ObsShape, k: usize) -> Vec<f32> {
    let len = shape.len();
    debug_assert_eq!(frames.len(), len * k);
    let (cells, c) = match shape {
        ObsShape::Image {
            height,
            width,
            channels,
        } => (height * width, channels),
        ObsShape::Array { dim } => (dim, 1),
    };
    let mut out = Vec::with_capacity(len * k);
    for cell in 0..cells {
        for f in 0..k {
            out.extend_from_slice(&frames[f * len + cell * c..f * len + (cell + 1) * c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Variant;

    fn image_cfg(h: usize, w: usize, c: usize, p: usize) -> TitConfig {
        TitConfig {
            obs: ObsShape::Image {
                height: h,
                width: w,
                channels: c,
            },
            patch_size: p,
            ..TitConfig::default()
        }
    }

    #[test]
    fn atari_frame_patch_shapes() {
        let obs = vec![0.0; 84 * 84];
        let ps = patchify::<f32>(&obs, &image_cfg(84, 84, 1, 12)).unwrap();
        assert_eq!((ps.num_patches(), ps.patch_dim()), (49, 144));
        let ps = patchify::<f32>(&obs, &image_cfg(84, 84, 1, 84)).unwrap();
        assert_eq!((ps.num_patches(), ps.patch_dim()), (1, 7056));
    }

    #[test]
    fn array_entries_are_patches() {
        let ps = patchify::<f64>(&[0.1, -0.2, 0.3, 0.4], &TitConfig::default()).unwrap();
        assert_eq!(ps.patches.shape(), &[4, 1]);
        assert_eq!(ps.patches.at(1, 0), -0.2f32 as f64);
    }

    #[test]
    fn raster_order_and_row_major_tiles() {
        // 4x4x2 image with value = 100·row + 10·col + channel, P = 2.
        let mut obs = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                for ch in 0..2 {
                    obs.push((100 * r + 10 * c + ch) as f32);
                }
            }
        }
        let ps = patchify::<f64>(&obs, &image_cfg(4, 4, 2, 2)).unwrap();
        assert_eq!(ps.patches.shape(), &[4, 8]);
        assert_eq!(
            ps.patches.row(0),
            &[0.0, 1.0, 10.0, 11.0, 100.0, 101.0, 110.0, 111.0]
        );
        // Patch 1 is the top-right tile, patch 2 the bottom-left.
        assert_eq!(ps.patches.at(1, 0), 20.0);
        assert_eq!(ps.patches.at(2, 0), 200.0);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let err = patchify::<f32>(&[0.0; 100], &image_cfg(10, 10, 1, 3)).unwrap_err();
        assert!(matches!(err, TitError::Config { .. }));
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(patchify::<f32>(&[0.0; 3], &TitConfig::default()).is_err());
    }

    #[test]
    fn stacked_frames_interleave_per_pixel() {
        let shape = ObsShape::Image {
            height: 1,
            width: 2,
            channels: 1,
        };
        assert_eq!(
            stack_frames(&[1.0, 2.0, 3.0, 4.0], shape, 2),
            vec![1.0, 3.0, 2.0, 4.0]
        );
        let arr = ObsShape::Array { dim: 2 };
        assert_eq!(
            stack_frames(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], arr, 3),
            vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]
        );
    }

    #[test]
    fn stacked_image_tiles_carry_all_frames() {
        let cfg = TitConfig {
            context_len: 4,
            variant: Variant::WoOuter,
            ..image_cfg(24, 24, 1, 6)
        };
        let frames = vec![0.5; 24 * 24 * 4];
        let stacked = stack_frames(&frames, cfg.obs, 4);
        let mut out = Vec::<f32>::new();
        patchify_into(&stacked, cfg.inner_obs(), 6, 1.0, &mut out).unwrap();
        assert_eq!(out.len(), 16 * cfg.patch_dim());
        assert_eq!(cfg.patch_dim(), 6 * 6 * 4);
    }
}
