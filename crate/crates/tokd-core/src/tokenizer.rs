//! Patchification of images and Plücker maps, and token-batch metadata.
//!
//! Images are H x W x c row-major; a patch grid flattens each non-overlapping
//! p x p patch into one row (row-major over (py, px, channel)), patches in
//! row-major grid order. `unpatchify(patchify(x))` is exact.

use crate::error::{Error, Result};
use crate::geometry::PluckerMap;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<E: Scalar> {
    /// (grid_h * grid_w) x (p * p * channels)
    pub patches: Tensor<E>,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl<E: Scalar> PatchGrid<E> {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

pub fn patchify<E: Scalar>(x: &Tensor<E>, p: usize) -> Result<PatchGrid<E>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("patchify expects H x W x c, got {:?}", shape)));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let src = x.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let row = gy * p + py;
                let start = (row * w + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(vec![gh * gw, p * p * c], out)?,
        patch: p,
        grid_h: gh,
        grid_w: gw,
        channels: c,
    })
}

pub fn unpatchify<E: Scalar>(g: &PatchGrid<E>) -> Tensor<E> {
    unpatchify_rows(g.patches.data(), g.patch, g.grid_h, g.grid_w, g.channels)
}

/// Rebuild an image from flat patch rows; used both for decoded output patches
/// and for feature visualization.
pub fn unpatchify_rows<E: Scalar>(
    rows: &[E],
    p: usize,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
) -> Tensor<E> {
    let (h, w) = (grid_h * p, grid_w * p);
    let mut out = vec![E::zero(); h * w * channels];
    let patch_len = p * p * channels;
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let patch = &rows[(gy * grid_w + gx) * patch_len..(gy * grid_w + gx + 1) * patch_len];
            for py in 0..p {
                let row = gy * p + py;
                let dst = (row * w + gx * p) * channels;
                out[dst..dst + p * channels]
                    .copy_from_slice(&patch[py * p * channels..(py + 1) * p * channels]);
            }
        }
    }
    Tensor::new(vec![h, w, channels], out).expect("consistent unpatchify shape")
}

/// Per-patch rows of [image, plucker] concatenated: n x (9 p^2).
pub fn source_patch_rows(img: &Tensor<f64>, plk: &PluckerMap, p: usize) -> Result<Tensor<f64>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Dimension(format!("source image must be H x W x 3, got {:?}", shape)));
    }
    if shape[0] != plk.height || shape[1] != plk.width {
        return Err(Error::Dimension(format!(
            "image {}x{} vs ray map {}x{}",
            shape[0], shape[1], plk.height, plk.width
        )));
    }
    let ig = patchify(img, p)?;
    let pg = patchify(&Tensor::new(vec![plk.height, plk.width, 6], plk.data.clone())?, p)?;
    let n = ig.n_patches();
    let (il, pl) = (p * p * 3, p * p * 6);
    let mut out = Vec::with_capacity(n * (il + pl));
    for i in 0..n {
        out.extend_from_slice(&ig.patches.data()[i * il..(i + 1) * il]);
        out.extend_from_slice(&pg.patches.data()[i * pl..(i + 1) * pl]);
    }
    Tensor::new(vec![n, il + pl], out)
}

/// Per-patch rows of the target ray map: n x (6 p^2).
pub fn target_patch_rows(plk: &PluckerMap, p: usize) -> Result<Tensor<f64>> {
    let pg = patchify(&Tensor::new(vec![plk.height, plk.width, 6], plk.data.clone())?, p)?;
    Ok(pg.patches)
}

/// Sentinel view index carried by target tokens.
pub const TARGET_VIEW: i64 = -1;

/// Per-token metadata for a concatenated source+target batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoles {
    /// 0 = source, 1 = target.
    pub delta: Vec<u8>,
    /// Source image index, or [`TARGET_VIEW`] for target tokens.
    pub view_index: Vec<i64>,
}

impl TokenRoles {
    pub fn new(n_src_views: usize, tokens_per_view: usize, n_tgt: usize) -> Self {
        let mut delta = Vec::with_capacity(n_src_views * tokens_per_view + n_tgt);
        let mut view_index = Vec::with_capacity(delta.capacity());
        for v in 0..n_src_views {
            delta.extend(std::iter::repeat(0).take(tokens_per_view));
            view_index.extend(std::iter::repeat(v as i64).take(tokens_per_view));
        }
        delta.extend(std::iter::repeat(1).take(n_tgt));
        view_index.extend(std::iter::repeat(TARGET_VIEW).take(n_tgt));
        TokenRoles { delta, view_index }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn n_source(&self) -> usize {
        self.delta.iter().filter(|&&d| d == 0).count()
    }

    pub fn n_target(&self) -> usize {
        self.len() - self.n_source()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{plucker_map, Intrinsics, Pose};
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn published_scale_patch_count() {
        let img = Tensor::<f64>::zeros(vec![256, 256, 3]);
        let g = patchify(&img, 8).unwrap();
        assert_eq!(g.patches.shape(), &[1024, 192]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let img = Tensor::<f64>::zeros(vec![10, 16, 3]);
        assert!(patchify(&img, 8).is_err());
    }

    #[test]
    fn single_white_pixel_lands_in_patch_zero() {
        let mut img = Tensor::<f64>::zeros(vec![16, 16, 3]);
        for c in 0..3 {
            img.data_mut()[c] = 1.0;
        }
        let g = patchify(&img, 8).unwrap();
        for (i, row) in g.patches.data().chunks(192).enumerate() {
            let sum: f64 = row.iter().sum();
            if i == 0 {
                assert_eq!(sum, 3.0);
            } else {
                assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn token_count_formula() {
        // (k+1) * H*W / p^2 for (2, 64, 64, 8) -> 192
        let per_view = 64 * 64 / 64;
        let roles = TokenRoles::new(2, per_view, per_view);
        assert_eq!(roles.len(), 192);
        assert_eq!(roles.n_source(), 128);
        assert_eq!(roles.n_target(), 64);
        assert_eq!(roles.view_index[0], 0);
        assert_eq!(roles.view_index[per_view], 1);
        assert_eq!(*roles.view_index.last().unwrap(), TARGET_VIEW);
    }

    #[test]
    fn source_rows_concatenate_image_then_rays() {
        let intr = Intrinsics::centered(8.0, 8, 8);
        let plk = plucker_map(&intr, &Pose::identity());
        let mut rng = Rng::new(0, 0);
        let img = Tensor::randn(vec![8, 8, 3], 1.0, &mut rng);
        let rows = source_patch_rows(&img, &plk, 8).unwrap();
        assert_eq!(rows.shape(), &[1, 576]);
        // first p*p*3 entries are the image patch
        let ig = patchify(&img, 8).unwrap();
        assert_eq!(&rows.data()[..192], ig.patches.data());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(seed in 0u64..1000, gh in 1usize..4, gw in 1usize..4) {
            let p = 4;
            let mut rng = Rng::new(seed, 0);
            let img = Tensor::<f64>::randn(vec![gh * p, gw * p, 3], 1.0, &mut rng);
            let g = patchify(&img, p).unwrap();
            let back = unpatchify(&g);
            prop_assert_eq!(back.data(), img.data());
        }
    }
}
