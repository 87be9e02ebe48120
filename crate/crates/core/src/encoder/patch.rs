use crate::error::{config_err, Result};
use crate::tensor::Mask;

/// Boolean grid over non-overlapping square patches; `true` = kept (active).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    grid_h: usize,
    grid_w: usize,
    patch: usize,
    kept: Vec<bool>,
}

impl PatchMask {
    pub fn new(grid_h: usize, grid_w: usize, patch: usize, kept: Vec<bool>) -> Result<Self> {
        if patch == 0 || grid_h == 0 || grid_w == 0 {
            return Err(config_err!(
                "patch mask needs a positive patch size and grid"
            ));
        }
        if kept.len() != grid_h * grid_w {
            return Err(config_err!(
                "patch grid {grid_h}x{grid_w} needs {} flags, got {}",
                grid_h * grid_w,
                kept.len()
            ));
        }
        Ok(Self {
            grid_h,
            grid_w,
            patch,
            kept,
        })
    }

    /// Every patch kept.
    pub fn all_kept(image_h: usize, image_w: usize, patch: usize) -> Result<Self> {
        check_divides(image_h, image_w, patch)?;
        Self::new(
            image_h / patch,
            image_w / patch,
            patch,
            vec![true; (image_h / patch) * (image_w / patch)],
        )
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid_h * self.patch, self.grid_w * self.patch)
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn is_kept(&self, gy: usize, gx: usize) -> bool {
        self.kept[gy * self.grid_w + gx]
    }

    pub fn num_patches(&self) -> usize {
        self.kept.len()
    }

    pub fn num_masked(&self) -> usize {
        self.kept.iter().filter(|&&k| !k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        1.0 - self.num_masked() as f64 / self.num_patches() as f64
    }

    /// The mask sampled on an `h × w` grid. Each cell `(i, j)` takes the flag
    /// of patch `(i·gh/h, j·gw/w)`: nearest-neighbour replication when the cell
    /// grid is finer than the patch grid, centre subsampling when coarser.
    pub fn at_resolution(&self, h: usize, w: usize) -> Result<Vec<bool>> {
        for (cells, grid) in [(h, self.grid_h), (w, self.grid_w)] {
            if cells == 0 || (cells % grid != 0 && grid % cells != 0) {
                return Err(config_err!(
                    "patch grid {}x{} and feature grid {h}x{w} do not divide each other",
                    self.grid_h,
                    self.grid_w
                ));
            }
        }
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                out.push(self.is_kept(i * self.grid_h / h, j * self.grid_w / w));
            }
        }
        Ok(out)
    }

    /// Pixel-level keep flags at image resolution.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let (h, w) = self.image_size();
        self.at_resolution(h, w)
            .expect("image grid is a multiple of the patch grid")
    }
}

pub(crate) fn check_divides(h: usize, w: usize, patch: usize) -> Result<()> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(config_err!(
            "patch size {patch} does not divide image {h}x{w}"
        ));
    }
    Ok(())
}

/// Stacks per-image patch masks into a `[N, h, w]` activity grid.
pub fn batch_mask(masks: &[PatchMask], h: usize, w: usize) -> Result<Mask> {
    let mut bits = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        bits.extend(m.at_resolution(h, w)?);
    }
    Mask::new(masks.len(), h, w, bits)
}

/// The mask at encoder stage `stage` (1–4) of the standard geometry, whose
/// feature strides are 4, 8, 16 and 32.
pub fn downsample_mask(mask: &PatchMask, stage: usize) -> Result<Vec<bool>> {
    if !(1..=4).contains(&stage) {
        return Err(config_err!("stage must be 1..=4, got {stage}"));
    }
    let stride = 4usize << (stage - 1);
    let (h, w) = mask.image_size();
    if h % stride != 0 || w % stride != 0 {
        return Err(config_err!(
            "image {h}x{w} is not divisible by stage stride {stride}"
        ));
    }
    mask.at_resolution(h / stride, w / stride)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyper4_geometry_replicates_patches() {
        // 512x512 input with 32-pixel patches: 16x16 grid.
        let kept: Vec<bool> = (0..256).map(|i| (i * 7) % 3 != 0).collect();
        let m = PatchMask::new(16, 16, 32, kept).unwrap();
        for (stage, cell) in [(1, 8), (2, 4), (3, 2), (4, 1)] {
            let grid = downsample_mask(&m, stage).unwrap();
            let side = 16 * cell;
            assert_eq!(grid.len(), side * side);
            for i in 0..side {
                for j in 0..side {
                    assert_eq!(grid[i * side + j], m.is_kept(i / cell, j / cell));
                }
            }
        }
    }

    #[test]
    fn fraction_is_preserved_at_every_stage() {
        // 40% kept at patch level: 10 of 25 patches on a 5x5 grid.
        let kept: Vec<bool> = (0..25).map(|i| i % 5 < 2).collect();
        let m = PatchMask::new(5, 5, 32, kept).unwrap();
        for stage in 1..=4 {
            let g = downsample_mask(&m, stage).unwrap();
            let frac = g.iter().filter(|&&b| b).count() as f64 / g.len() as f64;
            assert!((frac - 0.4).abs() < 1e-12, "stage {stage}: {frac}");
        }
    }

    #[test]
    fn all_true_stays_all_true() {
        let m = PatchMask::all_kept(64, 64, 8).unwrap();
        for s in 1..=4 {
            assert!(downsample_mask(&m, s).unwrap().iter().all(|&b| b));
        }
    }

    #[test]
    fn non_dividing_geometry_is_rejected() {
        let m = PatchMask::all_kept(96, 96, 32).unwrap();
        assert!(m.at_resolution(2, 2).is_err());
        assert!(PatchMask::all_kept(100, 96, 32).is_err());
    }
}
