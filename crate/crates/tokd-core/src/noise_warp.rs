//! 3D-consistent starting-noise construction: reproject one view's noise into
//! another through a fronto-parallel proxy plane, and blend fresh noise where
//! no correspondence exists.
//!
//! Nearest-neighbor sampling transports noise values unchanged; interpolation
//! would break their marginal distribution.

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, Intrinsics, Pose};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct NoiseWarpConfig {
    /// Blend weight toward the reference noise in non-overlap regions.
    pub alpha: f64,
    /// Depth of the proxy plane in the reference camera frame.
    pub plane_depth: f64,
    /// Restore unit variance of blended pixels.
    pub renormalize: bool,
}

impl NoiseWarpConfig {
    pub fn new(alpha: f64, plane_depth: f64, renormalize: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
        }
        if plane_depth <= 0.0 {
            return Err(Error::Argument("plane depth must be positive".into()));
        }
        Ok(NoiseWarpConfig {
            alpha,
            plane_depth,
            renormalize,
        })
    }
}

/// Reproject `reference` noise (H x W x C, view 1) into view 2.
///
/// Returns the warped noise and the overlap mask (true where the plane-induced
/// correspondence lands inside view 1).
pub fn warp_noise(
    reference: &Tensor<f64>,
    pose1: &Pose,
    pose2: &Pose,
    intr: &Intrinsics,
    cfg: &NoiseWarpConfig,
    rng: &Rng,
) -> Result<(Tensor<f64>, Vec<bool>)> {
    let shape = reference.shape();
    if shape.len() != 3 || shape[0] != intr.height || shape[1] != intr.width {
        return Err(Error::Dimension(format!(
            "noise shape {:?} does not match {}x{} intrinsics",
            shape, intr.height, intr.width
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let rel = relative_pose(pose2, pose1); // camera-2 coords -> camera-1 coords
    let origin = rel.translation; // camera-2 center in camera-1 frame

    // Degenerate configuration: proxy plane behind the central ray of view 2.
    {
        let center_dir = [0.0, 0.0, 1.0];
        let d1 = crate::geometry::mat_vec(&rel.rotation, center_dir);
        if d1[2].abs() < 1e-12 || (cfg.plane_depth - origin[2]) / d1[2] <= 0.0 {
            return Err(Error::Geometry(
                "proxy plane lies behind the camera for the central ray".into(),
            ));
        }
    }

    let blend_norm = (cfg.alpha * cfg.alpha + (1.0 - cfg.alpha) * (1.0 - cfg.alpha)).sqrt();
    let src = reference.data();
    let mut out = vec![0.0f64; h * w * c];
    let mut mask = vec![false; h * w];

    for v in 0..h {
        for u in 0..w {
            let dir2 = [
                (u as f64 + 0.5 - intr.cx) / intr.fx,
                (v as f64 + 0.5 - intr.cy) / intr.fy,
                1.0,
            ];
            let d1 = crate::geometry::mat_vec(&rel.rotation, dir2);
            let mut hit = None;
            if d1[2].abs() > 1e-12 {
                let s = (cfg.plane_depth - origin[2]) / d1[2];
                if s > 0.0 {
                    let px = origin[0] + s * d1[0];
                    let py = origin[1] + s * d1[1];
                    let pz = cfg.plane_depth;
                    let u1 = intr.fx * px / pz + intr.cx;
                    let v1 = intr.fy * py / pz + intr.cy;
                    hit = Some((u1.floor(), v1.floor()));
                }
            }
            let pix = v * w + u;
            match hit {
                Some((fu, fv))
                    if fu >= 0.0 && fv >= 0.0 && (fu as usize) < w && (fv as usize) < h =>
                {
                    let (su, sv) = (fu as usize, fv as usize);
                    let s0 = (sv * w + su) * c;
                    out[pix * c..pix * c + c].copy_from_slice(&src[s0..s0 + c]);
                    mask[pix] = true;
                }
                other => {
                    // nearest valid reference sample
                    let (su, sv) = match other {
                        Some((fu, fv)) => (
                            fu.clamp(0.0, (w - 1) as f64) as usize,
                            fv.clamp(0.0, (h - 1) as f64) as usize,
                        ),
                        None => (u, v),
                    };
                    let s0 = (sv * w + su) * c;
                    let mut pr = rng.derive(pix as u64);
                    for ch in 0..c {
                        let fresh = pr.normal();
                        let mut val = cfg.alpha * src[s0 + ch] + (1.0 - cfg.alpha) * fresh;
                        if cfg.renormalize {
                            val /= blend_norm;
                        }
                        out[pix * c + ch] = val;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![h, w, c], out)?, mask))
}
