//! Image quality metrics over H x W x C tensors with values in [0, 1].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR cap reported for bit-identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_pair(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "metric inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::Dimension("metric inputs are empty".into()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn grayscale(img: &Tensor<f64>) -> (Vec<f64>, usize, usize) {
    let shape = img.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let src = img.data();
    let g = (0..h * w)
        .map(|i| src[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
        .collect();
    (g, h, w)
}

/// Mean SSIM over all 8x8 sliding windows of the channel-mean grayscale
/// images, with the standard constants for unit dynamic range.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_pair(a, b)?;
    if a.shape().len() != 3 {
        return Err(Error::Dimension(format!(
            "ssim expects H x W x C, got {:?}",
            a.shape()
        )));
    }
    let (ga, h, w) = grayscale(a);
    let (gb, _, _) = grayscale(b);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                let row = (y0 + dy) * w + x0;
                for dx in 0..SSIM_WINDOW {
                    let (x, y) = (ga[row + dx], gb[row + dx]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let score = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += score;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Per-scene metric row.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneScore {
    pub scene_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Evaluation summary: per-scene scores plus their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub scenes: Vec<SceneScore>,
    pub psnr: f64,
    pub ssim: f64,
    pub examples_per_scene: usize,
    /// Hash of the model configuration the scores were produced with.
    pub config_hash: u64,
}

impl MetricReport {
    /// Build from per-scene rows; aggregates are plain means.
    pub fn from_scenes(
        scenes: Vec<SceneScore>,
        examples_per_scene: usize,
        config_hash: u64,
    ) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Data("metric report needs at least one scene".into()));
        }
        let n = scenes.len() as f64;
        let psnr = scenes.iter().map(|s| s.psnr).sum::<f64>() / n;
        let ssim = scenes.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(MetricReport {
            scenes,
            psnr,
            ssim,
            examples_per_scene,
            config_hash,
        })
    }

    /// One row per scene plus an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "scene,psnr,ssim,examples,config_hash\n"
        );
        for s in &self.scenes {
            out.push_str(&format!(
                "{},{},{},{},{:016x}\n",
                s.scene_id, s.psnr, s.ssim, self.examples_per_scene, self.config_hash
            ));
        }
        out.push_str(&format!(
            "aggregate,{},{},{},{:016x}\n",
            self.psnr, self.ssim, self.examples_per_scene, self.config_hash
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn psnr_of_known_offset() {
        // constant 0.5 vs constant 1.0: mse 0.25 -> 10 log10(4) dB
        let a = Tensor::full(vec![4, 4, 3], 0.5);
        let b = Tensor::full(vec![4, 4, 3], 1.0);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 6.020599913279624).abs() < 1e-9, "{p}");
    }

    #[test]
    fn psnr_identical_capped() {
        let a = Tensor::full(vec![4, 4, 3], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![4, 4, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 5, 3]);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = Rng::new(0, 0);
        let a = Tensor::new(
            vec![16, 16, 3],
            (0..16 * 16 * 3).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn ssim_orders_degradations() {
        let mut rng = Rng::new(1, 0);
        let a = Tensor::new(
            vec![16, 16, 3],
            (0..16 * 16 * 3).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let noisy = |amp: f64, rng: &mut Rng| {
            let data = a
                .data()
                .iter()
                .map(|&v| (v + amp * rng.normal()).clamp(0.0, 1.0))
                .collect();
            Tensor::new(vec![16, 16, 3], data).unwrap()
        };
        let light = ssim(&a, &noisy(0.02, &mut rng)).unwrap();
        let heavy = ssim(&a, &noisy(0.3, &mut rng)).unwrap();
        assert!(light > heavy, "light {light} vs heavy {heavy}");
        assert!(light > 0.8 && heavy < 0.8);
    }

    #[test]
    fn psnr_is_symmetric() {
        let mut rng = Rng::new(2, 0);
        let a = Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.uniform()).collect()).unwrap();
        let b = Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.uniform()).collect()).unwrap();
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_low_for_inverted_images() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed, 1);
            let a = Tensor::new(
                vec![16, 16, 3],
                (0..16 * 16 * 3).map(|_| rng.uniform()).collect(),
            )
            .unwrap();
            let b = a.map(|v| 1.0 - v);
            let s = ssim(&a, &b).unwrap();
            assert!(s < 0.2, "seed {seed}: inverted ssim {s}");
        }
    }

    #[test]
    fn ssim_window_too_small() {
        let a = Tensor::<f64>::zeros(vec![4, 4, 3]);
        assert!(ssim(&a, &a).is_err());
    }
}
