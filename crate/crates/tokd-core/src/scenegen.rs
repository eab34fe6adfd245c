//! Procedural scene generation: simple Lambertian raycast scenes with spheres
//! over a checkered ground plane, plus a controllable artifact injector that
//! mimics the failure modes of generative view synthesis.

use crate::error::{Error, Result};
use crate::geometry::{
    add, dot, mat_t_vec, normalize, sample_spline_trajectory, scale, sub, Intrinsics, Pose, Vec3,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const AMBIENT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    /// World-space y of the plane (y is down in camera convention; the plane
    /// sits below the spheres in world space).
    pub y: f64,
    pub albedo_a: [f64; 3],
    pub albedo_b: [f64; 3],
    /// Checker tile edge length.
    pub tile: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Sky color at the horizon; zenith is a fixed darker shade of it.
    pub background: [f64; 3],
    pub ground: Option<GroundPlane>,
    pub spheres: Vec<Sphere>,
    /// Direction *toward* the light, normalized at render time.
    pub light_dir: Vec3,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.spheres.is_empty() && self.ground.is_none() {
            return Err(Error::Argument("scene has no geometry".into()));
        }
        for s in &self.spheres {
            if s.radius <= 0.0 {
                return Err(Error::Argument(format!("sphere radius {} not positive", s.radius)));
            }
        }
        if let Some(g) = &self.ground {
            if g.tile <= 0.0 {
                return Err(Error::Argument("checker tile must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Random scene: 2-5 matte spheres in a ball around the origin over a
/// checkered floor, random light from above.
pub fn random_scene(rng: &mut Rng) -> SceneSpec {
    let n = 2 + rng.below(4) as usize;
    let mut spheres = Vec::with_capacity(n);
    for _ in 0..n {
        let center = [
            rng.uniform_in(-0.9, 0.9),
            rng.uniform_in(-0.5, 0.4),
            rng.uniform_in(-0.9, 0.9),
        ];
        spheres.push(Sphere {
            center,
            radius: rng.uniform_in(0.15, 0.45),
            albedo: [
                rng.uniform_in(0.2, 0.95),
                rng.uniform_in(0.2, 0.95),
                rng.uniform_in(0.2, 0.95),
            ],
        });
    }
    // light mostly from above (negative y is up in camera terms; use a world
    // light with a strong vertical component and random azimuth)
    let az = rng.uniform_in(0.0, std::f64::consts::TAU);
    let light_dir = normalize([0.6 * az.cos(), -1.0, 0.6 * az.sin()]);
    SceneSpec {
        background: [
            rng.uniform_in(0.4, 0.8),
            rng.uniform_in(0.4, 0.8),
            rng.uniform_in(0.5, 0.9),
        ],
        ground: Some(GroundPlane {
            y: 0.8,
            albedo_a: [0.85, 0.85, 0.85],
            albedo_b: [
                rng.uniform_in(0.1, 0.4),
                rng.uniform_in(0.1, 0.4),
                rng.uniform_in(0.1, 0.4),
            ],
            tile: 0.7,
        }),
        spheres,
        light_dir,
    }
}

struct Hit {
    t: f64,
    normal: Vec3,
    albedo: [f64; 3],
}

fn hit_sphere(origin: Vec3, dir: Vec3, s: &Sphere) -> Option<(f64, Vec3)> {
    let oc = sub(origin, s.center);
    let b = dot(oc, dir);
    let c = dot(oc, oc) - s.radius * s.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = if -b - sq > 1e-6 {
        -b - sq
    } else if -b + sq > 1e-6 {
        -b + sq
    } else {
        return None;
    };
    let p = add(origin, scale(dir, t));
    Some((t, normalize(sub(p, s.center))))
}

fn trace(scene: &SceneSpec, origin: Vec3, dir: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for s in &scene.spheres {
        if let Some((t, normal)) = hit_sphere(origin, dir, s) {
            if best.as_ref().map_or(true, |h| t < h.t) {
                best = Some(Hit {
                    t,
                    normal,
                    albedo: s.albedo,
                });
            }
        }
    }
    if let Some(g) = &scene.ground {
        if dir[1].abs() > 1e-9 {
            let t = (g.y - origin[1]) / dir[1];
            if t > 1e-6 && best.as_ref().map_or(true, |h| t < h.t) {
                let p = add(origin, scale(dir, t));
                let checker = ((p[0] / g.tile).floor() as i64 + (p[2] / g.tile).floor() as i64)
                    .rem_euclid(2)
                    == 0;
                best = Some(Hit {
                    t,
                    normal: [0.0, -1.0, 0.0],
                    albedo: if checker { g.albedo_a } else { g.albedo_b },
                });
            }
        }
    }
    best
}

/// Render the scene from a world-to-camera pose. Output is H x W x 3 in [0, 1].
pub fn render(scene: &SceneSpec, intr: &Intrinsics, pose: &Pose) -> Result<Tensor<f64>> {
    scene.validate()?;
    let origin = pose.camera_center();
    let to_light = normalize(scale(scene.light_dir, -1.0));
    let (h, w) = (intr.height, intr.width);
    let mut out = Vec::with_capacity(h * w * 3);
    for v in 0..h {
        for u in 0..w {
            let dir_cam = [
                (u as f64 + 0.5 - intr.cx) / intr.fx,
                (v as f64 + 0.5 - intr.cy) / intr.fy,
                1.0,
            ];
            let dir = normalize(mat_t_vec(&pose.rotation, dir_cam));
            match trace(scene, origin, dir) {
                Some(hit) => {
                    let lambert = dot(hit.normal, to_light).max(0.0);
                    // hard shadow: occluded points get ambient only
                    let p = add(origin, scale(dir, hit.t));
                    let shadow_origin = add(p, scale(hit.normal, 1e-4));
                    let lit = scene
                        .spheres
                        .iter()
                        .all(|s| hit_sphere(shadow_origin, to_light, s).is_none());
                    let shade = AMBIENT + if lit { lambert } else { 0.0 };
                    for c in 0..3 {
                        out.push((hit.albedo[c] * shade).clamp(0.0, 1.0));
                    }
                }
                None => {
                    // vertical sky gradient keeps the background pose-dependent
                    let t = 0.5 * (1.0 - dir[1]).clamp(0.0, 2.0) / 2.0 + 0.5;
                    for c in 0..3 {
                        out.push((scene.background[c] * t).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Camera poses on a smooth spline orbiting the scene, all looking at the
/// origin.
pub fn scene_trajectory(n_views: usize, seed_rng: &mut Rng) -> Result<Vec<Pose>> {
    let eye = [
        seed_rng.uniform_in(-0.6, 0.6),
        seed_rng.uniform_in(-0.8, -0.2),
        seed_rng.uniform_in(-3.2, -2.4),
    ];
    let anchor = Pose::look_at(eye, [0.0, 0.0, 0.0]);
    sample_spline_trajectory(&anchor, [0.0, 0.0, 0.0], n_views, 0.8, seed_rng)
}

/// Which degradations to apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtifactProfile {
    /// 0 = untouched input, 1 = fully degraded. Intermediate severities
    /// interpolate, so PSNR against the clean image is monotone.
    pub severity: f64,
    pub blockiness: bool,
    pub blur: bool,
    pub chroma_shift: bool,
    pub noise: bool,
    pub seed: u64,
}

impl ArtifactProfile {
    pub fn all(severity: f64, seed: u64) -> Self {
        ArtifactProfile {
            severity,
            blockiness: true,
            blur: true,
            chroma_shift: true,
            noise: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Argument(format!(
                "severity {} outside [0, 1]",
                self.severity
            )));
        }
        Ok(())
    }
}

const BLOCK: usize = 8;
const BLUR_RADIUS: i64 = 2;
const CHROMA_PX: i64 = 4;
const NOISE_STD: f64 = 0.25;

fn block_mean(img: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let src = img.data();
    let mut out = src.to_vec();
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            let (bh, bw) = ((h - by).min(BLOCK), (w - bx).min(BLOCK));
            for c in 0..3 {
                let mut sum = 0.0;
                for y in by..by + bh {
                    for x in bx..bx + bw {
                        sum += src[(y * w + x) * 3 + c];
                    }
                }
                let mean = sum / (bh * bw) as f64;
                for y in by..by + bh {
                    for x in bx..bx + bw {
                        out[(y * w + x) * 3 + c] = mean;
                    }
                }
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

fn box_blur(img: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (img.shape()[0] as i64, img.shape()[1] as i64);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3usize {
                let mut sum = 0.0;
                let mut n = 0.0;
                for dy in -BLUR_RADIUS..=BLUR_RADIUS {
                    for dx in -BLUR_RADIUS..=BLUR_RADIUS {
                        let (sy, sx) = ((y + dy).clamp(0, h - 1), (x + dx).clamp(0, w - 1));
                        sum += src[((sy * w + sx) * 3) as usize + c];
                        n += 1.0;
                    }
                }
                out[((y * w + x) * 3) as usize + c] = sum / n;
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

fn chroma_shift(img: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (img.shape()[0] as i64, img.shape()[1] as i64);
    let src = img.data();
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            let xr = (x - CHROMA_PX).clamp(0, w - 1);
            let xb = (x + CHROMA_PX).clamp(0, w - 1);
            out[((y * w + x) * 3) as usize] = src[((y * w + xr) * 3) as usize];
            out[((y * w + x) * 3) as usize + 2] = src[((y * w + xb) * 3) as usize + 2];
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

fn add_noise(img: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, 0x6e6f6973);
    let out = img
        .data()
        .iter()
        .map(|&v| (v + NOISE_STD * rng.normal()).clamp(0.0, 1.0))
        .collect();
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Degrade a rendered view. Severity 0 returns the input bit for bit; each
/// enabled component blends the running image toward its fully degraded
/// version by `severity`.
pub fn inject_artifacts(img: &Tensor<f64>, profile: &ArtifactProfile) -> Result<Tensor<f64>> {
    profile.validate()?;
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Dimension(format!(
            "artifact injection expects H x W x 3, got {shape:?}"
        )));
    }
    if profile.severity == 0.0 {
        return Ok(img.clone());
    }
    let s = profile.severity;
    let mut cur = img.clone();
    let stages: [(bool, fn(&Tensor<f64>) -> Tensor<f64>); 3] = [
        (profile.blur, box_blur),
        (profile.blockiness, block_mean),
        (profile.chroma_shift, chroma_shift),
    ];
    for (enabled, f) in stages {
        if enabled {
            let degraded = f(&cur);
            for (a, b) in cur.data_mut().iter_mut().zip(degraded.data()) {
                *a += s * (b - *a);
            }
        }
    }
    if profile.noise {
        let degraded = add_noise(&cur, profile.seed);
        for (a, b) in cur.data_mut().iter_mut().zip(degraded.data()) {
            *a += s * (b - *a);
        }
    }
    Ok(cur)
}
