//! Dataset generation, on-disk scene format, and training-example sampling.
//!
//! A dataset is a directory of scenes:
//!
//! ```text
//! scenes/<id>/view_00.png ... view_NN.png
//! scenes/<id>/cameras.txt   # per view: rotation, translation, intrinsics
//! scenes/<id>/meta.txt      # per view: synthetic flag and artifact severity
//! ```
//!
//! Images are quantized to 8 bits at save time, so a loaded scene reproduces
//! the saved pixel values exactly.
//!
//! The "clean-target" sampling policy may condition on synthetic (degraded)
//! views but only ever supervises on clean renders; the "naive" policy treats
//! all views as interchangeable.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{plucker_map, Intrinsics, PluckerMap, Pose};
use crate::rng::Rng;
use crate::scenegen::{inject_artifacts, random_scene, render, scene_trajectory, ArtifactProfile};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    /// H x W x 3 in [0, 1], quantized to 8-bit levels.
    pub image: Tensor<f64>,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// Degraded stand-in for a generated view, as opposed to a clean render.
    pub synthetic: bool,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub views: Vec<ViewRecord>,
}

impl SceneRecord {
    pub fn clean_view_indices(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| !self.views[i].synthetic)
            .collect()
    }
}

/// Snap unit-range values to the 256 representable 8-bit levels.
pub fn quantize_unit(img: &Tensor<f64>) -> Tensor<f64> {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub n_scenes: usize,
    pub views_per_scene: usize,
    /// (height, width)
    pub image_size: (usize, usize),
    /// Focal length in pixels.
    pub focal: f64,
    /// Fraction of views degraded into synthetic stand-ins.
    pub synthetic_fraction: f64,
    pub severity: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.views_per_scene < 2 {
            return Err(Error::Config(
                "need at least one scene and two views per scene".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.synthetic_fraction) {
            return Err(Error::Config(format!(
                "synthetic fraction {} outside [0, 1]",
                self.synthetic_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Config(format!(
                "severity {} outside [0, 1]",
                self.severity
            )));
        }
        if self.focal <= 0.0 {
            return Err(Error::Config("focal length must be positive".into()));
        }
        Ok(())
    }
}

/// Generate one scene deterministically from (cfg.seed, index).
pub fn generate_scene(cfg: &GenConfig, index: usize) -> Result<SceneRecord> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let intr = Intrinsics::centered(cfg.focal, w, h);
    let mut rng = Rng::new(cfg.seed, index as u64);
    let spec = random_scene(&mut rng);
    let poses = scene_trajectory(cfg.views_per_scene, &mut rng)?;

    let n = poses.len();
    // at least one view stays clean so every scene can supervise training
    let n_syn = ((cfg.synthetic_fraction * n as f64).round() as usize).min(n - 1);
    let syn_set = rng.sample_indices(n, n_syn);

    let mut views = Vec::with_capacity(n);
    for (k, pose) in poses.into_iter().enumerate() {
        let clean = render(&spec, &intr, &pose)?;
        let synthetic = syn_set.contains(&k);
        let image = if synthetic {
            let profile = ArtifactProfile::all(cfg.severity, rng.next_u64());
            inject_artifacts(&clean, &profile)?
        } else {
            clean
        };
        views.push(ViewRecord {
            image: quantize_unit(&image),
            pose,
            intrinsics: intr,
            synthetic,
            severity: if synthetic { cfg.severity } else { 0.0 },
        });
    }
    Ok(SceneRecord {
        id: format!("scene_{index:04}"),
        views,
    })
}

/// Write the whole dataset under `root/scenes/`.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut ids = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let scene = generate_scene(cfg, i)?;
        let dir = root.join("scenes").join(&scene.id);
        save_scene(&dir, &scene)?;
        ids.push(scene.id);
    }
    Ok(ids)
}

fn png_path(dir: &Path, k: usize) -> std::path::PathBuf {
    dir.join(format!("view_{k:02}.png"))
}

/// Write a unit-range H x W x 3 tensor as an 8-bit PNG.
pub fn save_image_png(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Data(format!(
            "png output expects H x W x 3, got {shape:?}"
        )));
    }
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(
        path,
        &bytes,
        shape[1] as u32,
        shape[0] as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

pub fn save_scene(dir: &Path, scene: &SceneRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut cameras = String::new();
    let mut meta = String::new();
    for (k, view) in scene.views.iter().enumerate() {
        let shape = view.image.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Data(format!(
                "view {k} has shape {shape:?}, expected H x W x 3"
            )));
        }
        save_image_png(&png_path(dir, k), &view.image)?;

        let r = &view.pose.rotation;
        let t = &view.pose.translation;
        let i = &view.intrinsics;
        cameras.push_str(&format!(
            "view_{k:02} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            t[0], t[1], t[2], i.fx, i.fy, i.cx, i.cy
        ));
        meta.push_str(&format!(
            "view_{k:02} synthetic={} severity={}\n",
            u8::from(view.synthetic),
            view.severity
        ));
    }
    for (name, body) in [("cameras.txt", cameras), ("meta.txt", meta)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn parse_f64(tok: &str, what: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::Format(format!("bad {what}: '{tok}'")))
}

pub fn load_scene(dir: &Path) -> Result<SceneRecord> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))
    };
    let cameras = read("cameras.txt")?;
    let meta = read("meta.txt")?;
    let cam_lines: Vec<&str> = cameras.lines().filter(|l| !l.trim().is_empty()).collect();
    let meta_lines: Vec<&str> = meta.lines().filter(|l| !l.trim().is_empty()).collect();
    if cam_lines.len() != meta_lines.len() {
        return Err(Error::Format(format!(
            "{} camera lines but {} meta lines",
            cam_lines.len(),
            meta_lines.len()
        )));
    }

    let mut views = Vec::with_capacity(cam_lines.len());
    for (k, (cam, m)) in cam_lines.iter().zip(&meta_lines).enumerate() {
        let toks: Vec<&str> = cam.split_whitespace().collect();
        if toks.len() != 17 || toks[0] != format!("view_{k:02}") {
            return Err(Error::Format(format!("bad camera line for view {k}: '{cam}'")));
        }
        let nums: Vec<f64> = toks[1..]
            .iter()
            .map(|t| parse_f64(t, "camera value"))
            .collect::<Result<_>>()?;
        let rotation = [
            [nums[0], nums[1], nums[2]],
            [nums[3], nums[4], nums[5]],
            [nums[6], nums[7], nums[8]],
        ];
        let pose = Pose::new(rotation, [nums[9], nums[10], nums[11]])?;

        let path = png_path(dir, k);
        let decoded = image::open(&path)
            .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let intrinsics = Intrinsics::new(nums[12], nums[13], nums[14], nums[15], w, h)?;
        let image = Tensor::new(
            vec![h, w, 3],
            decoded.into_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        )?;

        let mtoks: Vec<&str> = m.split_whitespace().collect();
        if mtoks.len() != 3 || mtoks[0] != format!("view_{k:02}") {
            return Err(Error::Format(format!("bad meta line for view {k}: '{m}'")));
        }
        let synthetic = match mtoks[1].strip_prefix("synthetic=") {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(Error::Format(format!("bad synthetic flag in '{m}'"))),
        };
        let severity = mtoks[2]
            .strip_prefix("severity=")
            .ok_or_else(|| Error::Format(format!("bad severity in '{m}'")))
            .and_then(|s| parse_f64(s, "severity"))?;

        views.push(ViewRecord {
            image,
            pose,
            intrinsics,
            synthetic,
            severity,
        });
    }
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("scene")
        .to_string();
    Ok(SceneRecord { id, views })
}

/// Load every scene under `root/scenes/`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneRecord>> {
    let scenes_dir = root.join("scenes");
    let mut dirs: Vec<std::path::PathBuf> = std::fs::read_dir(&scenes_dir)
        .map_err(|e| Error::io(scenes_dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no scenes in {}", scenes_dir.display())));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}

/// How target views are chosen when sampling training examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolePolicy {
    /// Synthetic views may condition, never supervise.
    CleanTarget,
    /// All views are interchangeable.
    Naive,
}

impl RolePolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            RolePolicy::CleanTarget => "clean-target",
            RolePolicy::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean-target" => Ok(RolePolicy::CleanTarget),
            "naive" => Ok(RolePolicy::Naive),
            other => Err(Error::Config(format!("unknown role policy '{other}'"))),
        }
    }
}

/// One supervised example: conditioning views plus a held-out target.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub sources: Vec<(Tensor<f64>, PluckerMap)>,
    pub target_rays: PluckerMap,
    pub target_image: Tensor<f64>,
    pub scene_id: String,
    pub target_view: usize,
}

/// Draw an example from `scene` under the given policy.
pub fn sample_example(
    scene: &SceneRecord,
    n_sources: usize,
    policy: RolePolicy,
    rng: &mut Rng,
) -> Result<TrainExample> {
    if n_sources == 0 {
        return Err(Error::Argument("need at least one source view".into()));
    }
    if scene.views.len() < n_sources + 1 {
        return Err(Error::Data(format!(
            "scene '{}' has {} views, need {} sources plus a target",
            scene.id,
            scene.views.len(),
            n_sources
        )));
    }
    let target = match policy {
        RolePolicy::Naive => rng.below(scene.views.len() as u64) as usize,
        RolePolicy::CleanTarget => {
            let clean = scene.clean_view_indices();
            if clean.is_empty() {
                return Err(Error::Data(format!(
                    "scene '{}' has no clean views to supervise on",
                    scene.id
                )));
            }
            clean[rng.below(clean.len() as u64) as usize]
        }
    };
    let others: Vec<usize> = (0..scene.views.len()).filter(|&i| i != target).collect();
    let picks = rng.sample_indices(others.len(), n_sources);
    let sources = picks
        .iter()
        .map(|&i| {
            let v = &scene.views[others[i]];
            (v.image.clone(), plucker_map(&v.intrinsics, &v.pose))
        })
        .collect();
    let tv = &scene.views[target];
    Ok(TrainExample {
        sources,
        target_rays: plucker_map(&tv.intrinsics, &tv.pose),
        target_image: tv.image.clone(),
        scene_id: scene.id.clone(),
        target_view: target,
    })
}
