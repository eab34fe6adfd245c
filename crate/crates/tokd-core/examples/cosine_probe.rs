//! Compares source/target feature-similarity statistics between two
//! checkpoints over several held-out examples. Usage:
//! cosine_probe <ck_a> <ck_b> <dataset>

use tokd_core::datapipe::{load_dataset, sample_example, RolePolicy};
use tokd_core::model::{forward, Checkpoint, ForwardOptions};
use tokd_core::tensor::Scalar;
use tokd_core::Rng;

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn stats(rows: &[f64], d: usize, n_src: usize) -> (f64, f64, f64) {
    let n = rows.len() / d;
    let mut gm = vec![0.0; d];
    for r in rows.chunks(d) {
        for (a, &x) in gm.iter_mut().zip(r) {
            *a += x / n as f64;
        }
    }
    // mean unit vectors, raw and centered
    let mut acc = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    for (t, r) in rows.chunks(d).enumerate() {
        let raw = unit(r.to_vec());
        let cen = unit(r.iter().zip(&gm).map(|(x, m)| x - m).collect());
        let base = if t < n_src { 0 } else { 1 };
        for i in 0..d {
            acc[base][i] += raw[i];
            acc[base + 2][i] += cen[i];
        }
    }
    let (ns, nt) = (n_src as f64, (n - n_src) as f64);
    for i in 0..d {
        acc[0][i] /= ns;
        acc[1][i] /= nt;
        acc[2][i] /= ns;
        acc[3][i] /= nt;
    }
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let raw_pair = dotp(&acc[0], &acc[1]);
    let cen_pair = dotp(&acc[2], &acc[3]);
    let cen_centroid = dotp(&unit(acc[2].clone()), &unit(acc[3].clone()));
    (raw_pair, cen_pair, cen_centroid)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenes = load_dataset(args[3].as_ref()).unwrap();
    for path in &args[1..3] {
        let ck: Checkpoint<f32> = Checkpoint::load(path.as_ref()).unwrap();
        let cfg = &ck.config;
        let d = cfg.d_model;
        let per_view = cfg.tokens_per_view();
        let n_layers = cfg.n_layers;
        let mut sums = vec![(0.0, 0.0, 0.0); n_layers];
        let n_ex = 8;
        for e in 0..n_ex {
            let mut rng = Rng::new(606, e as u64);
            let ex = sample_example(&scenes[e % scenes.len()], 2, RolePolicy::CleanTarget, &mut rng)
                .unwrap();
            let fp = forward(cfg, &ck.ema, &ex.sources, &ex.target_rays, ForwardOptions {
                train: false,
                capture_features: true,
            })
            .unwrap();
            for (l, &feat) in fp.features.iter().enumerate() {
                let rows: Vec<f64> = fp.tape.value(feat).iter().map(|&v| Scalar::to_f64(v)).collect();
                let (a, b, c) = stats(&rows, d, 2 * per_view);
                sums[l].0 += a / n_ex as f64;
                sums[l].1 += b / n_ex as f64;
                sums[l].2 += c / n_ex as f64;
            }
        }
        println!("{path}");
        for (l, s) in sums.iter().enumerate() {
            println!("  layer {l}: raw_pair {:+.4}  cen_pair {:+.4}  cen_centroid {:+.4}", s.0, s.1, s.2);
        }
    }
}
