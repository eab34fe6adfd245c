//! Model introspection: parameter and FLOP accounting, and PCA visualization
//! of per-layer token features.

use std::path::Path;

use crate::datapipe::save_image_png;
use crate::error::{Error, Result};
use crate::geometry::PluckerMap;
use crate::model::{forward, ForwardOptions, ModelConfig, ParamSet, FFN_MULT};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::unpatchify_rows;

/// Closed-form cost model of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub params: u64,
    /// Multiply-adds counted as two operations; dense linear algebra only
    /// (projections, attention, feed-forward, embeddings, modulation heads).
    pub flops_forward: u64,
}

/// Parameter and FLOP counts for `n_source_views` conditioning views.
pub fn count_cost(cfg: &ModelConfig, n_source_views: usize) -> Result<CostReport> {
    cfg.validate()?;
    if n_source_views == 0 {
        return Err(Error::Argument("need at least one source view".into()));
    }
    let d = cfg.d_model as u64;
    let p2 = (cfg.patch * cfg.patch) as u64;
    let heads = cfg.n_heads as u64;
    let layers = cfg.n_layers as u64;
    let dh = FFN_MULT as u64 * d;

    let mut params = 0u64;
    params += 9 * p2 * d + d; // source embedding
    params += 6 * p2 * d + d; // target embedding
    params += d * 3 * p2 + 3 * p2; // detokenizer
    let mut per_block = 4 * (d * d + d) + heads; // q,k,v,o + temperatures
    per_block += 2 * d; // layer norm
    per_block += d * dh + dh + dh * d + d; // ffn
    if cfg.variant.has_pre_modulation() {
        per_block += 2 * (d * 2 * d + 2 * d); // pre-attn and pre-ffn heads
    }
    if cfg.variant.has_post_modulation() {
        per_block += 2 * (d * d + d); // post-attn and post-ffn heads
    }
    params += layers * per_block;
    if cfg.variant.has_pre_modulation() {
        params += 2 * d + d * d + d; // style table + shared map
    }

    let per_view = cfg.tokens_per_view() as u64;
    let n_src = n_source_views as u64 * per_view;
    let n = n_src + per_view;
    let mut flops = 0u64;
    flops += 2 * n_src * 9 * p2 * d; // source embedding
    flops += 2 * per_view * 6 * p2 * d; // target embedding
    let mut block_flops = 4 * 2 * n * d * d; // q,k,v,o projections
    block_flops += 4 * n * n * d; // logits and attention-weighted values
    block_flops += 2 * 2 * n * d * dh; // ffn
    if cfg.variant.has_pre_modulation() {
        block_flops += 2 * 2 * 2 * d * 2 * d; // two heads, two roles
        block_flops += 2 * 3 * n * d; // apply scale+shift at two sites
    }
    if cfg.variant.has_post_modulation() {
        block_flops += 2 * 2 * 2 * d * d;
        block_flops += 2 * 2 * n * d;
    }
    flops += layers * block_flops;
    if cfg.variant.has_pre_modulation() {
        flops += 2 * 2 * d * d; // style map for both roles
    }
    flops += 2 * per_view * d * 3 * p2; // detokenizer
    Ok(CostReport {
        params,
        flops_forward: flops,
    })
}

/// Top-`k` principal directions of `rows` (n x d, row-major) by power
/// iteration with deflation. Returns (components k x d, mean d).
pub fn principal_components(
    rows: &[f64],
    n: usize,
    d: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || d == 0 || rows.len() != n * d {
        return Err(Error::Dimension(format!(
            "pca input {} values for {n} x {d}",
            rows.len()
        )));
    }
    if k == 0 || k > d {
        return Err(Error::Argument(format!("cannot extract {k} components from dim {d}")));
    }
    if n < k {
        return Err(Error::Argument(format!(
            "need at least {k} tokens to fit {k} components, got {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for row in rows.chunks(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in rows.chunks(d) {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += ci * (row[j] - mean[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= n as f64;
    }

    let mut comps = vec![0.0; k * d];
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..200 {
            // deflate previously found directions
            for prev in 0..c {
                let dot: f64 = (0..d).map(|i| v[i] * comps[prev * d + i]).sum();
                for i in 0..d {
                    v[i] -= dot * comps[prev * d + i];
                }
            }
            let mut w = vec![0.0; d];
            for i in 0..d {
                let vi = v[i];
                if vi != 0.0 {
                    for j in 0..d {
                        w[j] += vi * cov[i * d + j];
                    }
                }
            }
            let nrm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm < 1e-300 {
                // degenerate residual variance: keep an arbitrary unit vector
                w = vec![0.0; d];
                w[c % d] = 1.0;
            } else {
                for x in &mut w {
                    *x /= nrm;
                }
            }
            v = w;
        }
        comps[c * d..(c + 1) * d].copy_from_slice(&v);
    }
    Ok((comps, mean))
}

/// PCA view of one layer's tokens.
#[derive(Debug, Clone)]
pub struct PcaLayer {
    /// First source view's tokens, projected and rendered per patch.
    pub source_image: Tensor<f64>,
    pub target_image: Tensor<f64>,
    /// Mean pairwise cosine between centered source and target tokens; its
    /// magnitude measures how aligned the two roles' features are.
    pub src_tgt_cosine: f64,
}

fn unit_rows(rows: &[f64], d: usize) -> Vec<f64> {
    let mut out = rows.to_vec();
    for row in out.chunks_mut(d) {
        let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        for x in row {
            *x /= n;
        }
    }
    out
}

fn center_rows(rows: &[f64], d: usize) -> Vec<f64> {
    let n = rows.len() / d;
    let mut mean = vec![0.0; d];
    for row in rows.chunks(d) {
        for (a, &x) in mean.iter_mut().zip(row) {
            *a += x / n as f64;
        }
    }
    rows.chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m))
        .collect()
}

/// Mean cosine over all (source token, target token) pairs after removing the
/// layer's global mean token; equals the dot product of the two roles' mean
/// unit vectors. Without centering, a direction shared by every token
/// dominates and masks how the roles relate.
fn mean_pairwise_cosine(src: &[f64], tgt: &[f64], d: usize) -> f64 {
    let mut all = src.to_vec();
    all.extend_from_slice(tgt);
    let centered = center_rows(&all, d);
    let (csrc, ctgt) = centered.split_at(src.len());
    let (su, tu) = (unit_rows(csrc, d), unit_rows(ctgt, d));
    let (ns, nt) = (su.len() / d, tu.len() / d);
    let mut acc = 0.0;
    for i in 0..d {
        let ms: f64 = su.chunks(d).map(|r| r[i]).sum::<f64>() / ns as f64;
        let mt: f64 = tu.chunks(d).map(|r| r[i]).sum::<f64>() / nt as f64;
        acc += ms * mt;
    }
    acc
}

/// Project token rows onto 3 components, min-max normalize each channel, and
/// paint every token's color over its patch.
fn tokens_to_image(
    rows: &[f64],
    d: usize,
    comps: &[f64],
    mean: &[f64],
    patch: usize,
    grid_h: usize,
    grid_w: usize,
) -> Tensor<f64> {
    let n = rows.len() / d;
    let mut proj = vec![0.0; n * 3];
    for (t, row) in rows.chunks(d).enumerate() {
        for c in 0..3 {
            proj[t * 3 + c] = (0..d).map(|i| (row[i] - mean[i]) * comps[c * d + i]).sum();
        }
    }
    for c in 0..3 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..n {
            lo = lo.min(proj[t * 3 + c]);
            hi = hi.max(proj[t * 3 + c]);
        }
        let span = (hi - lo).max(1e-12);
        for t in 0..n {
            proj[t * 3 + c] = (proj[t * 3 + c] - lo) / span;
        }
    }
    // one flat-colored patch per token
    let plen = patch * patch * 3;
    let mut patch_rows = vec![0.0; n * plen];
    for t in 0..n {
        for px in 0..patch * patch {
            patch_rows[t * plen + px * 3..t * plen + px * 3 + 3]
                .copy_from_slice(&proj[t * 3..t * 3 + 3]);
        }
    }
    unpatchify_rows(&patch_rows, patch, grid_h, grid_w, 3)
}

/// Per-layer PCA images and role statistics for one forward pass.
pub fn pca_layers<E: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    sources: &[(Tensor<f64>, PluckerMap)],
    target_rays: &PluckerMap,
    seed: u64,
) -> Result<Vec<PcaLayer>> {
    let fp = forward(
        cfg,
        params,
        sources,
        target_rays,
        ForwardOptions {
            train: false,
            capture_features: true,
        },
    )?;
    let d = cfg.d_model;
    let per_view = cfg.tokens_per_view();
    let n_src = sources.len() * per_view;
    let (h, w) = cfg.image_size;
    let (gh, gw) = (h / cfg.patch, w / cfg.patch);
    let mut rng = Rng::new(seed, 0x706361);
    let mut out = Vec::with_capacity(fp.features.len());
    for &feat in &fp.features {
        let rows: Vec<f64> = fp
            .tape
            .value(feat)
            .iter()
            .map(|&v| Scalar::to_f64(v))
            .collect();
        let (comps, mean) = principal_components(&rows, rows.len() / d, d, 3, &mut rng)?;
        let src_rows = &rows[..per_view * d]; // first source view
        let tgt_rows = &rows[n_src * d..];
        let cos = mean_pairwise_cosine(&rows[..n_src * d], tgt_rows, d);
        out.push(PcaLayer {
            source_image: tokens_to_image(src_rows, d, &comps, &mean, cfg.patch, gh, gw),
            target_image: tokens_to_image(tgt_rows, d, &comps, &mean, cfg.patch, gh, gw),
            src_tgt_cosine: cos,
        });
    }
    Ok(out)
}

/// Write `layer_<l>_src.png` / `layer_<l>_tgt.png` plus a `cosines.csv`
/// summary under `dir`.
pub fn save_pca_dump(dir: &Path, layers: &[PcaLayer]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut csv = String::from("layer,src_tgt_cosine\n");
    for (l, layer) in layers.iter().enumerate() {
        save_image_png(&dir.join(format!("layer_{l:02}_src.png")), &layer.source_image)?;
        save_image_png(&dir.join(format!("layer_{l:02}_tgt.png")), &layer.target_image)?;
        csv.push_str(&format!("{l},{}\n", layer.src_tgt_cosine));
    }
    let path = dir.join("cosines.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockVariant;
    use crate::geometry::{plucker_map, Intrinsics, Pose};
    use crate::model::{init_params, PerceptualMode};

    #[test]
    fn param_count_matches_initialization() {
        for variant in [BlockVariant::Plain, BlockVariant::TokD, BlockVariant::TokDPlus] {
            let cfg = ModelConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                patch: 4,
                variant,
                lambda_perceptual: 0.5,
                perceptual: PerceptualMode::Off,
                image_size: (16, 16),
            };
            let params: ParamSet<f64> = init_params(&cfg, &mut Rng::new(0, 0)).unwrap();
            let counted = count_cost(&cfg, 2).unwrap().params;
            assert_eq!(counted, params.total_elements() as u64, "{variant:?}");
        }
    }

    #[test]
    fn published_scale_overhead_is_negligible() {
        let plain = count_cost(&ModelConfig::published_scale(BlockVariant::Plain), 2).unwrap();
        let tokd = count_cost(&ModelConfig::published_scale(BlockVariant::TokD), 2).unwrap();
        let plus = count_cost(&ModelConfig::published_scale(BlockVariant::TokDPlus), 2).unwrap();
        assert!(plain.params < tokd.params && tokd.params < plus.params);
        assert!(plain.flops_forward < tokd.flops_forward);
        assert!(tokd.flops_forward < plus.flops_forward);
        let ratio = plus.flops_forward as f64 / plain.flops_forward as f64;
        assert!(
            ratio > 1.0 && ratio < 1.005,
            "full modulation overhead ratio {ratio}"
        );
    }

    #[test]
    fn pca_recovers_a_planted_direction() {
        let d = 16;
        let n = 400;
        let mut rng = Rng::new(3, 0);
        let dir: Vec<f64> = {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / nrm).collect()
        };
        let mut rows = vec![0.0; n * d];
        for t in 0..n {
            let a = rng.normal() * 5.0;
            for i in 0..d {
                rows[t * d + i] = a * dir[i] + 0.05 * rng.normal();
            }
        }
        let (comps, _) = principal_components(&rows, n, d, 3, &mut rng).unwrap();
        let cos: f64 = (0..d).map(|i| comps[i] * dir[i]).sum();
        assert!(cos.abs() > 0.99, "first component misaligned: {cos}");
        // components are orthonormal
        let dot01: f64 = (0..d).map(|i| comps[i] * comps[d + i]).sum();
        assert!(dot01.abs() < 1e-6, "components not orthogonal: {dot01}");
    }

    #[test]
    fn rank_three_data_reconstructs_exactly() {
        let d = 10;
        let n = 200;
        let mut rng = Rng::new(9, 0);
        // three random (almost surely independent) directions
        let basis: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect();
        let mut rows = vec![0.0; n * d];
        for t in 0..n {
            let c: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            for i in 0..d {
                rows[t * d + i] = (0..3).map(|b| c[b] * basis[b][i]).sum();
            }
        }
        let (comps, mean) = principal_components(&rows, n, d, 3, &mut rng).unwrap();
        // projecting onto the 3 components reconstructs every row
        let mut worst = 0.0f64;
        for row in rows.chunks(d) {
            let mut rec = mean.clone();
            for c in 0..3 {
                let a: f64 = (0..d).map(|i| (row[i] - mean[i]) * comps[c * d + i]).sum();
                for i in 0..d {
                    rec[i] += a * comps[c * d + i];
                }
            }
            for i in 0..d {
                worst = worst.max((rec[i] - row[i]).abs());
            }
        }
        assert!(worst < 1e-6, "rank-3 reconstruction error {worst}");

        // explained variance is ordered
        let var_of = |c: usize| -> f64 {
            rows.chunks(d)
                .map(|row| {
                    let a: f64 = (0..d).map(|i| (row[i] - mean[i]) * comps[c * d + i]).sum();
                    a * a
                })
                .sum::<f64>()
        };
        let (v0, v1, v2) = (var_of(0), var_of(1), var_of(2));
        assert!(v0 >= v1 && v1 >= v2, "variance not ordered: {v0} {v1} {v2}");
    }

    #[test]
    fn pca_rejects_bad_shapes() {
        let mut rng = Rng::new(4, 0);
        assert!(principal_components(&[1.0, 2.0], 1, 3, 1, &mut rng).is_err());
        assert!(principal_components(&[1.0, 2.0, 3.0], 1, 3, 4, &mut rng).is_err());
    }

    #[test]
    fn pca_dump_writes_all_layers() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            patch: 2,
            variant: BlockVariant::TokDPlus,
            lambda_perceptual: 0.5,
            perceptual: PerceptualMode::Off,
            image_size: (4, 4),
        };
        let params: ParamSet<f64> = init_params(&cfg, &mut Rng::new(5, 0)).unwrap();
        let intr = Intrinsics::centered(4.0, 4, 4);
        let src_pose = Pose::look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0]);
        let tgt_pose = Pose::look_at([0.5, 0.0, -3.0], [0.0, 0.0, 0.0]);
        let mut rng = Rng::new(6, 0);
        let img = Tensor::new(vec![4, 4, 3], (0..48).map(|_| rng.uniform()).collect()).unwrap();
        let sources = vec![(img, plucker_map(&intr, &src_pose))];
        let layers = pca_layers(&cfg, &params, &sources, &plucker_map(&intr, &tgt_pose), 7).unwrap();
        assert_eq!(layers.len(), 2);
        for l in &layers {
            assert_eq!(l.source_image.shape(), &[4, 4, 3]);
            assert!(l.source_image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(l.src_tgt_cosine.abs() <= 1.0 + 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        save_pca_dump(dir.path(), &layers).unwrap();
        for l in 0..2 {
            assert!(dir.path().join(format!("layer_{l:02}_src.png")).exists());
            assert!(dir.path().join(format!("layer_{l:02}_tgt.png")).exists());
        }
        assert!(dir.path().join("cosines.csv").exists());
    }
}
