//! Deterministic synthetic scenes: a spinning LiDAR sweep with beam indices,
//! a ring of pinhole cameras, and non-overlapping ground-truth boxes.
//!
//! Every scene draws from its own ChaCha stream keyed by `(seed, index)`,
//! so scene `k` is identical whether it is generated alone or in a batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou_bev, Box3D, BoxSize, CameraCalib, Point3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    pub beam: u16,
}

impl LidarPoint {
    /// Point at `p` with zero intensity on beam 0.
    pub fn at(p: Point3) -> Self {
        Self {
            x: p.x as f32,
            y: p.y as f32,
            z: p.z as f32,
            intensity: 0.0,
            beam: 0,
        }
    }

    pub fn position(&self) -> Point3 {
        Point3::new(self.x as f64, self.y as f64, self.z as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
    /// Number of beams of the sensor that produced the sweep.
    pub beams: usize,
}

impl PointCloud {
    pub fn from_points(points: Vec<LidarPoint>, beams: usize) -> Self {
        Self { points, beams }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points for which `keep` holds, preserving order.
    pub fn filtered(&self, mut keep: impl FnMut(&LidarPoint) -> bool) -> PointCloud {
        PointCloud {
            points: self.points.iter().copied().filter(|p| keep(p)).collect(),
            beams: self.beams,
        }
    }
}

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mirrored(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.at(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub cloud: PointCloud,
    pub images: Vec<Image>,
    pub calibs: Vec<CameraCalib>,
    pub gt_boxes: Vec<Box3D>,
    pub seed: u64,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub width: (f64, f64),
    pub length: (f64, f64),
    pub height: (f64, f64),
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub cameras: usize,
    /// Horizontal field of view of each camera, degrees.
    pub hfov_deg: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Height of the optical centers above the LiDAR origin, meters.
    pub mount_height: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            cameras: 4,
            hfov_deg: 100.0,
            image_width: 128,
            image_height: 64,
            mount_height: 0.0,
        }
    }
}

impl RigConfig {
    /// Cameras evenly spaced in heading, the first looking forward.
    pub fn calibs(&self) -> Vec<CameraCalib> {
        (0..self.cameras)
            .map(|p| {
                let yaw = std::f64::consts::TAU * p as f64 / self.cameras as f64;
                CameraCalib::looking_at_yaw(
                    yaw,
                    Point3::new(0.0, 0.0, self.mount_height),
                    self.hfov_deg.to_radians(),
                    self.image_width,
                    self.image_height,
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub classes: Vec<ClassSpec>,
    pub beams: usize,
    pub rays_per_beam: usize,
    /// Inclination band of the beams, degrees.
    pub inclination_min_deg: f64,
    pub inclination_max_deg: f64,
    pub max_range: f64,
    /// Height of the ground plane relative to the sensor, meters.
    pub ground_z: f64,
    pub ground_noise: f64,
    pub range_noise: f64,
    /// Object centers are drawn from `[-placement_half, placement_half]²`.
    pub placement_half: f64,
    /// Minimum BEV distance of object centers from the sensor.
    pub keep_out: f64,
    /// Extra BEV clearance kept between objects.
    pub clearance: f64,
    pub max_attempts: usize,
    pub image_noise: f64,
    pub rig: RigConfig,
    pub seed: u64,
}

pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "car".into(),
            width: (1.7, 2.0),
            length: (3.9, 4.7),
            height: (1.4, 1.7),
            color: [0.85, 0.2, 0.15],
        },
        ClassSpec {
            name: "truck".into(),
            width: (2.3, 2.7),
            length: (6.0, 8.0),
            height: (2.6, 3.4),
            color: [0.15, 0.3, 0.9],
        },
        ClassSpec {
            name: "pedestrian".into(),
            width: (0.5, 0.8),
            length: (0.5, 0.8),
            height: (1.6, 1.9),
            color: [0.2, 0.85, 0.25],
        },
    ]
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 600,
            objects_min: 3,
            objects_max: 10,
            classes: default_classes(),
            beams: 32,
            rays_per_beam: 720,
            inclination_min_deg: -30.0,
            inclination_max_deg: 10.0,
            max_range: 30.0,
            ground_z: -1.8,
            ground_noise: 0.01,
            range_noise: 0.01,
            placement_half: 18.0,
            keep_out: 3.5,
            clearance: 0.3,
            max_attempts: 500,
            image_noise: 0.03,
            rig: RigConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.objects_min > self.objects_max {
            return bad("objects_min exceeds objects_max");
        }
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        for c in &self.classes {
            for (lo, hi) in [c.width, c.length, c.height] {
                if !(lo > 0.0 && lo <= hi) {
                    return bad(&format!("size range of class {} is empty or non-positive", c.name));
                }
            }
        }
        if self.beams < 4 {
            return bad("beam count must be at least 4");
        }
        if self.rays_per_beam == 0 {
            return bad("rays_per_beam must be positive");
        }
        if self.inclination_min_deg >= self.inclination_max_deg {
            return bad("inclination band is empty");
        }
        if self.rig.cameras == 0 || self.rig.image_width == 0 || self.rig.image_height == 0 {
            return bad("camera rig needs at least one camera and a non-empty image");
        }
        if !(self.max_range > 0.0 && self.range_noise >= 0.0 && self.ground_noise >= 0.0 && self.image_noise >= 0.0) {
            return bad("ranges and noise levels must be non-negative");
        }
        if self.placement_half <= self.keep_out {
            return bad("placement area lies inside the keep-out radius");
        }
        Ok(())
    }

    /// Inclination of beam `b`, radians.
    pub fn beam_inclination(&self, b: usize) -> f64 {
        let lo = self.inclination_min_deg;
        let hi = self.inclination_max_deg;
        (lo + (hi - lo) * b as f64 / (self.beams - 1) as f64).to_radians()
    }
}

/// The per-scene random stream.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SceneSample>> {
    generate_range(cfg, 0, cfg.n_scenes)
}

/// Scenes `start .. start + count` of the dataset defined by `cfg`.
pub fn generate_range(cfg: &SynthConfig, start: usize, count: usize) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    (start..start + count).map(|i| generate_scene(cfg, i as u64)).collect()
}

pub fn generate_scene(cfg: &SynthConfig, index: u64) -> Result<SceneSample> {
    let mut rng = scene_rng(cfg.seed, index);
    let gt_boxes = place_objects(cfg, index, &mut rng)?;
    let cloud = simulate_lidar(&gt_boxes, cfg, &mut rng);
    let calibs = cfg.rig.calibs();
    let images = render_views(&gt_boxes, &calibs, cfg, &mut rng);
    Ok(SceneSample {
        cloud,
        images,
        calibs,
        gt_boxes,
        seed: cfg.seed,
        index,
    })
}

fn place_objects(cfg: &SynthConfig, index: u64, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let wanted = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
    while boxes.len() < wanted {
        attempts += 1;
        if attempts > cfg.max_attempts * wanted.max(1) {
            return Err(Error::Placement {
                scene: index as usize,
                wanted,
                attempts: attempts - 1,
            });
        }
        let class_id = rng.random_range(0..cfg.classes.len());
        let spec = &cfg.classes[class_id];
        let size = BoxSize {
            w: draw(rng, spec.width),
            l: draw(rng, spec.length),
            h: draw(rng, spec.height),
        };
        let half = cfg.placement_half;
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-half..half);
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        if x.hypot(y) < cfg.keep_out + size.l.max(size.w) / 2.0 {
            continue;
        }
        let candidate = Box3D::new(Point3::new(x, y, cfg.ground_z + size.h / 2.0), size, yaw, class_id);
        let mut padded = candidate;
        padded.size.w += 2.0 * cfg.clearance;
        padded.size.l += 2.0 * cfg.clearance;
        let clash = boxes.iter().any(|b| {
            let mut other = *b;
            other.size.w += 2.0 * cfg.clearance;
            other.size.l += 2.0 * cfg.clearance;
            rotated_iou_bev(&padded, &other).map(|v| v > 0.0).unwrap_or(true)
        });
        if !clash {
            boxes.push(candidate);
        }
    }
    Ok(boxes)
}

/// Which face of a box a ray entered through: axis 0 (length), 1 (width)
/// or 2 (height), and the outward sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    pub axis: usize,
    pub positive: bool,
}

/// Entry distance of the ray `origin + t·dir` into `b`, if any, for `t > 0`.
pub fn ray_box_entry(origin: Point3, dir: Point3, b: &Box3D) -> Option<(f64, Face)> {
    let o = b.to_local(origin);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
    let o = [o.x, o.y, o.z];
    let half = [b.size.l / 2.0, b.size.w / 2.0, b.size.h / 2.0];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut face = Face {
        axis: 0,
        positive: false,
    };
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let t1 = (-half[k] - o[k]) / d[k];
        let t2 = (half[k] - o[k]) / d[k];
        let (near, far, positive) = if t1 < t2 { (t1, t2, false) } else { (t2, t1, true) };
        if near > t_enter {
            t_enter = near;
            face = Face { axis: k, positive };
        }
        t_exit = t_exit.min(far);
    }
    (t_enter <= t_exit && t_enter > 0.0).then_some((t_enter, face))
}

fn nearest_box_hit(origin: Point3, dir: Point3, boxes: &[Box3D]) -> Option<(f64, usize, Face)> {
    boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| ray_box_entry(origin, dir, b).map(|(t, f)| (t, i, f)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Casts `beams × rays_per_beam` rays from the origin; each ray returns its
/// first hit on a box or the ground plane, with range noise truncated at
/// three standard deviations.
pub fn simulate_lidar(boxes: &[Box3D], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> PointCloud {
    let origin = Point3::default();
    let object_intensity: Vec<f32> = boxes.iter().map(|_| rng.random_range(0.4..1.0)).collect();
    let range_noise = Normal::new(0.0, cfg.range_noise.max(0.0)).expect("finite sigma");
    let ground_noise = Normal::new(0.0, cfg.ground_noise.max(0.0)).expect("finite sigma");
    let clip = |v: f64, sigma: f64| v.clamp(-3.0 * sigma, 3.0 * sigma);
    let mut points = Vec::new();
    for b in 0..cfg.beams {
        let incl = cfg.beam_inclination(b);
        let (si, ci) = incl.sin_cos();
        for r in 0..cfg.rays_per_beam {
            let az = -std::f64::consts::PI + std::f64::consts::TAU * (r as f64 + 0.5) / cfg.rays_per_beam as f64;
            let (sa, ca) = az.sin_cos();
            let dir = Point3::new(ci * ca, ci * sa, si);
            let hit_box = nearest_box_hit(origin, dir, boxes);
            let t_ground = (si < 0.0).then(|| cfg.ground_z / si);
            let (t, intensity, on_ground) = match (hit_box, t_ground) {
                (Some((tb, i, _)), tg) if tg.is_none_or(|tg| tb <= tg) => (tb, object_intensity[i], false),
                (_, Some(tg)) => (tg, rng.random_range(0.05..0.25), true),
                _ => continue,
            };
            let noisy = t + clip(range_noise.sample(rng), cfg.range_noise);
            if noisy > cfg.max_range || noisy <= 0.0 {
                continue;
            }
            let mut p = Point3::new(dir.x * noisy, dir.y * noisy, dir.z * noisy);
            if on_ground {
                p.z += clip(ground_noise.sample(rng), cfg.ground_noise);
            }
            points.push(LidarPoint {
                x: p.x as f32,
                y: p.y as f32,
                z: p.z as f32,
                intensity,
                beam: b as u16,
            });
        }
    }
    PointCloud::from_points(points, cfg.beams)
}

/// Ray-cast rendering: every pixel shows the nearest box surface along its
/// ray (class color with face shading) or the textured background.
pub fn render_views(boxes: &[Box3D], calibs: &[CameraCalib], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Image> {
    let noise = Normal::new(0.0, cfg.image_noise.max(0.0)).expect("finite sigma");
    calibs
        .iter()
        .map(|calib| {
            let (w, h) = (calib.image_w as usize, calib.image_h as usize);
            let mut img = Image::new(h, w);
            let center = calib.camera_center();
            for y in 0..h {
                for x in 0..w {
                    let far = calib.unproject(x as f64 + 0.5, y as f64 + 0.5, 1.0);
                    let dir = far - center;
                    let base = match nearest_box_hit(center, dir, boxes) {
                        Some((_, i, face)) => {
                            let shade = match face.axis {
                                2 => 1.0,
                                0 => 0.8,
                                _ => 0.65,
                            };
                            cfg.classes[boxes[i].class_id].color.map(|c| c * shade)
                        }
                        None => background(center, dir, cfg.ground_z),
                    };
                    for (c, v) in base.iter().enumerate() {
                        img.set(c, y, x, (v + noise.sample(rng)).clamp(0.0, 1.0) as f32);
                    }
                }
            }
            img
        })
        .collect()
}

fn background(origin: Point3, dir: Point3, ground_z: f64) -> [f64; 3] {
    if dir.z < 0.0 {
        let t = (ground_z - origin.z) / dir.z;
        let gx = origin.x + t * dir.x;
        let gy = origin.y + t * dir.y;
        let tile = ((gx / 2.0).floor() as i64 + (gy / 2.0).floor() as i64).rem_euclid(2) as f64;
        let g = 0.38 + 0.06 * tile;
        [g, g, g * 0.95]
    } else {
        let elev = dir.z / dir.norm();
        [0.55 + 0.2 * elev, 0.6 + 0.2 * elev, 0.7 + 0.2 * elev]
    }
}
