//! Ray-cast synthetic scenes with analytic depth and pose.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Intrinsics, Pose6D, SE3Transform};
use super::image::{DepthMap, Image};
use super::sequence::FrameSequence;
use crate::error::{MesaError, Result};

pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 10.0;

/// Lambertian albedo: smooth value noise blended with a sinusoidal stripe pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    /// Stripe direction (world frame) and spatial frequency in rad/m.
    pub stripe_dir: [f64; 3],
    pub stripe_freq: f64,
    /// Noise lattice frequency in cells/m.
    pub noise_freq: f64,
    pub seed: u64,
}

impl Texture {
    pub fn flat(rgb: [f64; 3]) -> Self {
        Self { base: rgb, accent: rgb, stripe_dir: [1.0, 0.0, 0.0], stripe_freq: 0.0, noise_freq: 0.0, seed: 0 }
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut color = || [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let base = color();
        let accent = color();
        let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let d = if d.norm() < 1e-3 { Vector3::x() } else { d.normalize() };
        Self {
            base,
            accent,
            stripe_dir: d.into(),
            stripe_freq: rng.random_range(3.0..7.0),
            noise_freq: rng.random_range(1.5..3.5),
            seed: rng.random(),
        }
    }

    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let stripe = if self.stripe_freq > 0.0 {
            0.5 + 0.5 * (self.stripe_freq * p.dot(&Vector3::from(self.stripe_dir))).sin()
        } else {
            0.5
        };
        let noise = if self.noise_freq > 0.0 {
            0.65 * value_noise(p * self.noise_freq, self.seed) + 0.35 * value_noise(p * (2.0 * self.noise_freq), self.seed ^ 0x9e37)
        } else {
            0.5
        };
        let m = (0.55 * noise + 0.45 * stripe).clamp(0.0, 1.0);
        [0, 1, 2].map(|c| self.base[c] * (1.0 - m) + self.accent[c] * m)
    }
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Trilinear lattice noise with quintic fade, in `[0, 1]`.
fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (u, v, w) = (fade(p.x - fx), fade(p.y - fy), fade(p.z - fz));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c = |dx, dy, dz| hash3(ix + dx, iy + dy, iz + dz, seed);
    let x00 = lerp(c(0, 0, 0), c(1, 0, 0), u);
    let x10 = lerp(c(0, 1, 0), c(1, 1, 0), u);
    let x01 = lerp(c(0, 0, 1), c(1, 0, 1), u);
    let x11 = lerp(c(0, 1, 1), c(1, 1, 1), u);
    lerp(lerp(x00, x10, v), lerp(x01, x11, v), w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Points `x` with `normal · x = offset` (world frame).
    Plane { normal: [f64; 3], offset: f64, texture: Texture },
    Sphere { center: [f64; 3], radius: f64, texture: Texture },
}

impl Primitive {
    /// Ray parameter of the nearest hit with `t > t_min` and the surface normal there.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        const T_MIN: f64 = 1e-6;
        match self {
            Primitive::Plane { normal, offset, .. } => {
                let n = Vector3::from(*normal);
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - n.dot(origin)) / denom;
                (t > T_MIN).then_some((t, n))
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = origin - Vector3::from(*center);
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > T_MIN)?;
                let n = (origin + dir * t - Vector3::from(*center)) / *radius;
                Some((t, n))
            }
        }
    }

    fn texture(&self) -> &Texture {
        match self {
            Primitive::Plane { texture, .. } | Primitive::Sphere { texture, .. } => texture,
        }
    }
}

/// Camera path: a start pose and a constant per-frame motion, both camera-to-world,
/// with optional seeded jitter on the motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub frames: usize,
    pub start: Pose6D,
    /// Motion of the camera between consecutive frames, expressed in the current camera frame.
    pub step: Pose6D,
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub trajectory: TrajectorySpec,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub seed: u64,
    /// Light direction for Lambertian shading (world frame, towards the light).
    #[serde(default = "default_light")]
    pub light: [f64; 3],
}

fn default_light() -> [f64; 3] {
    [-0.3, -1.0, -0.4]
}

impl SceneSpec {
    /// Indoor box room with a few spheres, camera moving mostly forward.
    pub fn random_room(seed: u64, width: usize, height: usize, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half_width = rng.random_range(1.8..2.6);
        let cam_height = rng.random_range(1.0..1.5);
        let room_height = rng.random_range(2.6..3.0);
        let back = rng.random_range(4.5..7.0);
        let x_shift = rng.random_range(-0.4..0.4);
        let mut primitives = vec![
            Primitive::Plane { normal: [0.0, 1.0, 0.0], offset: cam_height, texture: Texture::random(&mut rng) },
            Primitive::Plane { normal: [0.0, 1.0, 0.0], offset: cam_height - room_height, texture: Texture::random(&mut rng) },
            Primitive::Plane { normal: [1.0, 0.0, 0.0], offset: x_shift - half_width, texture: Texture::random(&mut rng) },
            Primitive::Plane { normal: [1.0, 0.0, 0.0], offset: x_shift + half_width, texture: Texture::random(&mut rng) },
            Primitive::Plane { normal: [0.0, 0.0, 1.0], offset: back, texture: Texture::random(&mut rng) },
            Primitive::Plane { normal: [0.0, 0.0, 1.0], offset: -3.0, texture: Texture::random(&mut rng) },
        ];
        let spheres = rng.random_range(1..=3);
        for _ in 0..spheres {
            let radius: f64 = rng.random_range(0.25..0.6);
            let z = rng.random_range(2.5..(back - radius - 0.2));
            let x = rng.random_range((x_shift - half_width + radius + 0.1)..(x_shift + half_width - radius - 0.1));
            let y = if rng.random_bool(0.6) { cam_height - radius } else { rng.random_range(-0.6..0.4) };
            primitives.push(Primitive::Sphere { center: [x, y, z], radius, texture: Texture::random(&mut rng) });
        }
        let start = Pose6D {
            rotation: [rng.random_range(-0.08..0.08), rng.random_range(-0.25..0.25), 0.0],
            translation: [rng.random_range(-0.3..0.3), 0.0, rng.random_range(-0.5..0.3)],
        };
        let step = Pose6D {
            rotation: [0.0, rng.random_range(-0.012..0.012), 0.0],
            translation: [rng.random_range(-0.04..0.04), rng.random_range(-0.01..0.01), rng.random_range(0.06..0.12)],
        };
        Self {
            primitives,
            trajectory: TrajectorySpec { frames, start, step, jitter: 0.1 },
            width,
            height,
            intrinsics: Intrinsics::from_fov(width, height, 60f64.to_radians()),
            seed,
            light: default_light(),
        }
    }

    /// Single fronto-parallel textured plane at `z` meters.
    pub fn fronto_parallel_plane(z: f64, width: usize, height: usize, intrinsics: Intrinsics, step: [f64; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            primitives: vec![Primitive::Plane { normal: [0.0, 0.0, 1.0], offset: z, texture: Texture::random(&mut rng) }],
            trajectory: TrajectorySpec {
                frames: 2,
                start: Pose6D::zero(),
                step: Pose6D { rotation: [0.0; 3], translation: step },
                jitter: 0.0,
            },
            width,
            height,
            intrinsics,
            seed,
            light: default_light(),
        }
    }

    /// Camera-to-world pose of every frame.
    pub fn camera_poses(&self) -> Result<Vec<SE3Transform>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7472_616a);
        let mut pose = SE3Transform::from_pose6d(&self.trajectory.start)?;
        let mut out = vec![pose];
        for _ in 1..self.trajectory.frames {
            let j = self.trajectory.jitter;
            let mut step = self.trajectory.step.to_array();
            if j > 0.0 {
                for v in &mut step {
                    *v *= 1.0 + rng.random_range(-j..j);
                }
            }
            pose = pose.compose(&SE3Transform::from_pose6d(&Pose6D::from_slice(&step)?)?);
            out.push(pose);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(MesaError::InvalidInput("scene image size must be positive".into()));
        }
        self.intrinsics.validate(self.width, self.height)?;
        if self.trajectory.frames < 2 {
            return Err(MesaError::InvalidInput("a sequence needs at least 2 frames".into()));
        }
        let t = self.trajectory.step.translation;
        if (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt() < 1e-9 {
            return Err(MesaError::DegenerateTrajectory);
        }
        for cam in self.camera_poses()? {
            let world_to_cam = cam.inverse();
            for p in &self.primitives {
                if let Primitive::Sphere { center, radius, .. } = p {
                    let c = world_to_cam.apply(&Vector3::from(*center));
                    if c.z - radius < MIN_DEPTH {
                        return Err(MesaError::InvalidInput(format!("sphere at {center:?} is not in front of every camera")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Nearest hit along the ray through pixel `(u, v)`: ray parameter, normal, primitive index.
    fn cast(&self, camera_to_world: &SE3Transform, u: usize, v: usize) -> Option<(f64, Vector3<f64>, usize)> {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
        let dir = camera_to_world.rotation * dir_cam;
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(&camera_to_world.translation, &dir).map(|(t, n)| (t, n, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Renders one view from a camera-to-world pose.
    pub fn render_view(&self, camera_to_world: &SE3Transform) -> Result<(Image, DepthMap)> {
        let (w, h) = (self.width, self.height);
        let k = &self.intrinsics;
        let light = Vector3::from(self.light).normalize();
        let mut rgb = vec![0.0; 3 * w * h];
        let mut depth = vec![MIN_DEPTH; w * h];
        let mut valid = vec![false; w * h];
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                if let Some((t, n, prim)) = self.cast(camera_to_world, u, v) {
                    let dir_cam = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                    let point = camera_to_world.translation + camera_to_world.rotation * dir_cam * t;
                    let albedo = self.primitives[prim].texture().albedo(&point);
                    let shade = 0.65 + 0.35 * n.dot(&light).abs();
                    for c in 0..3 {
                        rgb[c * w * h + i] = (albedo[c] * shade).clamp(0.0, 1.0);
                    }
                    // dir_cam has unit z, so t is the z-depth
                    depth[i] = t.clamp(MIN_DEPTH, MAX_DEPTH);
                    valid[i] = (MIN_DEPTH..=MAX_DEPTH).contains(&t);
                }
            }
        }
        Ok((Image::new(h, w, rgb)?, DepthMap::new(h, w, depth, valid)?))
    }

    /// Index of the primitive seen at each pixel, row-major.
    pub fn render_labels(&self, camera_to_world: &SE3Transform) -> Vec<Option<usize>> {
        let (w, h) = (self.width, self.height);
        (0..h * w).map(|i| self.cast(camera_to_world, i % w, i / w).map(|(_, _, p)| p)).collect()
    }
}

/// Renders every frame of `spec` with ground-truth depth and frame `i → i+1` poses.
pub fn generate_synthetic_sequence(spec: &SceneSpec) -> Result<FrameSequence> {
    spec.validate()?;
    let cams = spec.camera_poses()?;
    let mut frames = Vec::with_capacity(cams.len());
    let mut depths = Vec::with_capacity(cams.len());
    for cam in &cams {
        let (img, d) = spec.render_view(cam)?;
        frames.push(img);
        depths.push(d);
    }
    let poses = cams.windows(2).map(|w| w[1].inverse().compose(&w[0])).collect();
    FrameSequence::new(frames, spec.intrinsics, Some(depths), Some(poses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_spec(step: [f64; 3]) -> SceneSpec {
        let k = Intrinsics { fx: 100.0, fy: 100.0, cx: 31.5, cy: 31.5 };
        SceneSpec::fronto_parallel_plane(2.0, 64, 64, k, step, 3)
    }

    #[test]
    fn static_camera_renders_identical_frames() {
        let spec = plane_spec([0.0; 3]);
        let cam = SE3Transform::identity();
        let (a, da) = spec.render_view(&cam).unwrap();
        let (b, _) = spec.render_view(&cam).unwrap();
        assert_eq!(a, b);
        assert!(da.depth().iter().all(|&d| (d - 2.0).abs() < 1e-12));
        assert!(matches!(generate_synthetic_sequence(&spec), Err(MesaError::DegenerateTrajectory)));
    }

    #[test]
    fn lateral_motion_shifts_content_by_parallax() {
        // fx * tx / Z = 100 * 0.1 / 2 = 5 px; camera moves +x so content moves -x
        let seq = generate_synthetic_sequence(&plane_spec([0.1, 0.0, 0.0])).unwrap();
        let (a, b) = (&seq.frames()[0], &seq.frames()[1]);
        for y in [10, 30, 50] {
            for x in 5..59 {
                for c in 0..3 {
                    assert!((a.at(c, y, x) - b.at(c, y, x - 5)).abs() < 1e-9);
                }
            }
        }
        let pose = &seq.gt_poses().unwrap()[0];
        assert!((pose.translation.x + 0.1).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::random_room(11, 32, 32, 4);
        let a = generate_synthetic_sequence(&spec).unwrap();
        let b = generate_synthetic_sequence(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_rooms_are_fully_covered_and_in_range() {
        for seed in 0..20 {
            let spec = SceneSpec::random_room(seed, 32, 32, 6);
            let seq = generate_synthetic_sequence(&spec).unwrap();
            for d in seq.gt_depths().unwrap() {
                assert_eq!(d.valid_count(), 32 * 32, "seed {seed}");
                assert!(d.depth().iter().all(|&z| (MIN_DEPTH..=MAX_DEPTH).contains(&z)));
            }
        }
    }

    #[test]
    fn noise_is_bounded() {
        for i in 0..1000 {
            let p = Vector3::new(i as f64 * 0.37, -(i as f64) * 0.11, 0.5 * i as f64);
            let v = value_noise(p, 42);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
