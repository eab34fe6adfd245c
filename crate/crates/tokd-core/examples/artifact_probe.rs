//! Prints the PSNR cost of artifact injection at several severities; handy
//! when tuning the full-strength stage constants.

use tokd_core::datapipe::GenConfig;
use tokd_core::metrics::psnr;
use tokd_core::scenegen::{inject_artifacts, ArtifactProfile};

fn main() {
    let cfg = GenConfig {
        n_scenes: 4,
        views_per_scene: 5,
        image_size: (32, 32),
        focal: 40.0,
        synthetic_fraction: 0.0,
        severity: 0.0,
        seed: 1234,
    };
    for sev in [0.25, 0.5, 0.75, 1.0] {
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..cfg.n_scenes {
            let scene = tokd_core::datapipe::generate_scene(&cfg, i).unwrap();
            for (k, v) in scene.views.iter().enumerate() {
                let prof = ArtifactProfile::all(sev, (i * 10 + k) as u64);
                let deg = inject_artifacts(&v.image, &prof).unwrap();
                acc += psnr(&deg, &v.image).unwrap();
                n += 1;
            }
        }
        println!("severity {sev}: degraded-vs-clean psnr {:.2} dB over {n} views", acc / n as f64);
    }
}
