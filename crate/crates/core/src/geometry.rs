//! Camera projection, spherical coordinates, grid sampling and oriented-box
//! geometry shared by the rest of the crate.
//!
//! Conventions:
//! - ego frame: x forward, y left, z up (meters);
//! - camera frame: x right, y down, z along the optical axis;
//! - normalized sampling coordinates use the align-corners rule, so `0` is
//!   the first cell center and `1` the last; anything outside `[0, 1]²`
//!   samples zeros;
//! - box length `l` runs along the heading, width `w` across it.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_synth::PointCloud;

/// Depths at or below this are treated as behind the camera.
pub const DEPTH_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dist_bev(&self, other: &Point3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rigid {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Rigid {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rigid {
    pub const fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation about the z axis by `angle`.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let t = &self.translation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + t[0],
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + t[1],
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + t[2],
        )
    }

    pub fn inverse(&self) -> Rigid {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[j][i];
            }
        }
        let t = self.translation;
        let mut ti = [0.0; 3];
        for (i, v) in ti.iter_mut().enumerate() {
            *v = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Rigid {
            rotation: rt,
            translation: ti,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        let t = self.apply(Point3::new(
            other.translation[0],
            other.translation[1],
            other.translation[2],
        ));
        Rigid {
            rotation: r,
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn is_proper_rotation(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - 1.0).abs() <= tol
    }
}

/// Pinhole intrinsics plus the ego→camera extrinsic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
    pub extrinsic: Rigid,
    pub image_w: f64,
    pub image_h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraCalib {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCalib(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !self.extrinsic.is_proper_rotation(1e-9) {
            return Err(Error::InvalidCalib(
                "extrinsic rotation is not orthonormal with determinant +1".into(),
            ));
        }
        if !(self.u0 > 0.0 && self.u0 < self.image_w && self.v0 > 0.0 && self.v0 < self.image_h) {
            return Err(Error::InvalidCalib(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.u0, self.v0, self.image_w, self.image_h
            )));
        }
        Ok(())
    }

    /// Camera looking along ego heading `yaw`, mounted at `position`.
    pub fn looking_at_yaw(yaw: f64, position: Point3, hfov: f64, image_w: usize, image_h: usize) -> CameraCalib {
        let (s, c) = yaw.sin_cos();
        // rows: camera x (right), y (down), z (forward) in ego coordinates
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let mut ext = Rigid {
            rotation,
            translation: [0.0; 3],
        };
        let t = ext.apply(position);
        ext.translation = [-t.x, -t.y, -t.z];
        let fx = image_w as f64 / 2.0 / (hfov / 2.0).tan();
        CameraCalib {
            fx,
            fy: fx,
            u0: image_w as f64 / 2.0,
            v0: image_h as f64 / 2.0,
            extrinsic: ext,
            image_w: image_w as f64,
            image_h: image_h as f64,
        }
    }

    pub fn camera_center(&self) -> Point3 {
        self.extrinsic.inverse().apply(Point3::default())
    }

    /// Inverse of the projection: pixel plus depth back to the ego frame.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3 {
        let pc = Point3::new((u - self.u0) * depth / self.fx, (v - self.v0) * depth / self.fy, depth);
        self.extrinsic.inverse().apply(pc)
    }
}

/// Pinhole projection with zero image margin.
pub fn project_to_camera(p: Point3, calib: &CameraCalib) -> Option<Projection> {
    project_to_camera_with_margin(p, calib, 0.0)
}

/// Projects `p`, rejecting points behind the camera or outside the image
/// expanded by `margin` pixels on every side.
pub fn project_to_camera_with_margin(p: Point3, calib: &CameraCalib, margin: f64) -> Option<Projection> {
    let pc = calib.extrinsic.apply(p);
    let depth = pc.z;
    if !(depth > DEPTH_EPS) {
        return None;
    }
    let u = calib.fx * pc.x / depth + calib.u0;
    let v = calib.fy * pc.y / depth + calib.v0;
    let inside = u >= -margin && u <= calib.image_w + margin && v >= -margin && v <= calib.image_h + margin;
    inside.then_some(Projection { u, v, depth })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spherical {
    pub range: f64,
    pub azimuth: f64,
    pub inclination: f64,
}

pub fn to_spherical(p: Point3) -> Result<Spherical> {
    let range = p.norm();
    if range == 0.0 {
        return Err(Error::DegeneratePoint);
    }
    let mut azimuth = p.y.atan2(p.x);
    if azimuth <= -PI {
        azimuth = PI;
    }
    let inclination = p.z.atan2(p.x.hypot(p.y));
    Ok(Spherical {
        range,
        azimuth,
        inclination,
    })
}

pub fn from_spherical(s: Spherical) -> Point3 {
    let horiz = s.range * s.inclination.cos();
    Point3::new(
        horiz * s.azimuth.cos(),
        horiz * s.azimuth.sin(),
        s.range * s.inclination.sin(),
    )
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Dense channel-major feature array `channels × height × width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// Location of a normalized sample inside a `height × width` grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct BilinearCell {
    pub x0: isize,
    pub y0: isize,
    pub fx: f64,
    pub fy: f64,
}

/// One interpolation tap: flat cell index, weight, and the weight's
/// derivatives with respect to the pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub index: usize,
    pub weight: f64,
    pub d_px: f64,
    pub d_py: f64,
}

impl BilinearCell {
    pub fn locate(x: f64, y: f64, height: usize, width: usize) -> Option<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) || height == 0 || width == 0 {
            return None;
        }
        let px = x * (width - 1) as f64;
        let py = y * (height - 1) as f64;
        let x0 = px.floor();
        let y0 = py.floor();
        Some(Self {
            x0: x0 as isize,
            y0: y0 as isize,
            fx: px - x0,
            fy: py - y0,
        })
    }

    pub fn taps(&self, height: usize, width: usize) -> impl Iterator<Item = Tap> {
        let (fx, fy) = (self.fx, self.fy);
        let corners = [
            (0, 0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            (1, 0, fx * (1.0 - fy), 1.0 - fy, -fx),
            (0, 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (1, 1, fx * fy, fy, fx),
        ];
        let (x0, y0) = (self.x0, self.y0);
        corners.into_iter().filter_map(move |(dx, dy, weight, d_px, d_py)| {
            let cx = x0 + dx;
            let cy = y0 + dy;
            (cx >= 0 && cy >= 0 && (cx as usize) < width && (cy as usize) < height).then(|| Tap {
                index: cy as usize * width + cx as usize,
                weight,
                d_px,
                d_py,
            })
        })
    }
}

/// Bilinear interpolation of every channel at the normalized location
/// `(x, y)`; zeros outside `[0, 1]²`.
pub fn bilinear_sample(grid: &FeatureGrid, loc: (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; grid.channels];
    let Some(cell) = BilinearCell::locate(loc.0, loc.1, grid.height, grid.width) else {
        return out;
    };
    let plane = grid.height * grid.width;
    for tap in cell.taps(grid.height, grid.width) {
        for (c, o) in out.iter_mut().enumerate() {
            *o += tap.weight * grid.data[c * plane + tap.index];
        }
    }
    out
}

/// Metric rectangle covered by a BEV grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevExtent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BevExtent {
    pub fn square(half: f64) -> Self {
        Self {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Georeferenced BEV feature map; rows run along y, columns along x.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub grid: FeatureGrid,
    pub extent: BevExtent,
    pub resolution: f64,
}

impl BevGrid {
    pub fn new(grid: FeatureGrid, extent: BevExtent, resolution: f64) -> Result<Self> {
        let w = ((extent.x_max - extent.x_min) / resolution).round() as usize;
        let h = ((extent.y_max - extent.y_min) / resolution).round() as usize;
        if w != grid.width || h != grid.height {
            return Err(Error::Shape(format!(
                "BEV grid is {}x{} but extent/resolution imply {h}x{w}",
                grid.height, grid.width
            )));
        }
        Ok(Self {
            grid,
            extent,
            resolution,
        })
    }

    /// Metric center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        cell_center(&self.extent, self.resolution, row, col)
    }

    /// Align-corners normalized coordinates of a metric BEV position.
    pub fn normalize(&self, x: f64, y: f64) -> (f64, f64) {
        normalize_bev(&self.extent, self.resolution, self.grid.height, self.grid.width, x, y)
    }
}

pub fn cell_center(extent: &BevExtent, resolution: f64, row: usize, col: usize) -> (f64, f64) {
    (
        extent.x_min + (col as f64 + 0.5) * resolution,
        extent.y_min + (row as f64 + 0.5) * resolution,
    )
}

pub fn normalize_bev(extent: &BevExtent, resolution: f64, height: usize, width: usize, x: f64, y: f64) -> (f64, f64) {
    let span_x = resolution * (width.max(2) - 1) as f64;
    let span_y = resolution * (height.max(2) - 1) as f64;
    (
        (x - extent.x_min - 0.5 * resolution) / span_x,
        (y - extent.y_min - 0.5 * resolution) / span_y,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSize {
    pub w: f64,
    pub l: f64,
    pub h: f64,
}

/// Oriented 3-D box; yaw is the heading of the length axis about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Point3,
    pub size: BoxSize,
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    pub fn new(center: Point3, size: BoxSize, yaw: f64, class_id: usize) -> Self {
        Self {
            center,
            size,
            yaw: wrap_angle(yaw),
            class_id,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.size;
        if !(s.w > 0.0 && s.l > 0.0 && s.h > 0.0) {
            return Err(Error::DegenerateBox { w: s.w, l: s.l, h: s.h });
        }
        Ok(())
    }

    pub fn bev_params(&self) -> [f64; 5] {
        [self.center.x, self.center.y, self.size.w, self.size.l, self.yaw]
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        bev_corners(self.bev_params())
    }

    /// Expresses `p` in the box frame (x along the heading).
    pub fn to_local(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Point3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn contains(&self, p: Point3) -> bool {
        let q = self.to_local(p);
        q.x.abs() <= self.size.l / 2.0 && q.y.abs() <= self.size.w / 2.0 && q.z.abs() <= self.size.h / 2.0
    }
}

/// Arithmetic needed by the polygon clipper, so the same code yields
/// values (`f64`) and forward-mode derivatives ([`Dual5`]).
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Dual number carrying derivatives with respect to five box parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual5 {
    pub v: f64,
    pub d: [f64; 5],
}

impl Dual5 {
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; 5];
        d[slot] = 1.0;
        Self { v, d }
    }

    fn map_d(self, f: impl Fn(f64) -> f64) -> [f64; 5] {
        self.d.map(f)
    }
}

impl Add for Dual5 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Self { v: self.v + o.v, d }
    }
}

impl Sub for Dual5 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a -= b);
        Self { v: self.v - o.v, d }
    }
}

impl Mul for Dual5 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; 5];
        for (i, v) in d.iter_mut().enumerate() {
            *v = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl Div for Dual5 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let mut d = [0.0; 5];
        for (i, v) in d.iter_mut().enumerate() {
            *v = (self.d[i] * o.v - self.v * o.d[i]) * inv * inv;
        }
        Self { v: self.v * inv, d }
    }
}

impl Neg for Dual5 {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.map_d(|x| -x),
        }
    }
}

impl Scalar for Dual5 {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; 5] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        let c = self.v.cos();
        Self {
            v: self.v.sin(),
            d: self.map_d(|x| x * c),
        }
    }
    fn cos(self) -> Self {
        let s = self.v.sin();
        Self {
            v: self.v.cos(),
            d: self.map_d(|x| -x * s),
        }
    }
}

/// Corners of the BEV rectangle `[cx, cy, w, l, yaw]`, counter-clockwise.
pub fn bev_corners<S: Scalar>(p: [S; 5]) -> [(S, S); 4] {
    let [cx, cy, w, l, yaw] = p;
    let half = S::cst(0.5);
    let (hl, hw) = (l * half, w * half);
    let (s, c) = (yaw.sin(), yaw.cos());
    let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
    local.map(|(x, y)| (cx + c * x - s * y, cy + s * x + c * y))
}

#[inline]
fn mix(sig: &mut u64, bits: u64) {
    *sig = (*sig ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
}

fn clip_polygon<S: Scalar>(subject: &[(S, S)], clip: &[(S, S); 4], sig: &mut u64) -> Vec<(S, S)> {
    let mut out: Vec<(S, S)> = subject.to_vec();
    for i in 0..4 {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % 4];
        let side = |p: (S, S)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        let n = input.len();
        for j in 0..n {
            let p = input[j];
            let q = input[(j + 1) % n];
            let sp = side(p);
            let sq = side(q);
            let p_in = sp.val() >= 0.0;
            let q_in = sq.val() >= 0.0;
            mix(sig, (p_in as u64) << 1 | q_in as u64);
            if p_in {
                out.push(p);
            }
            if p_in != q_in {
                let t = sp / (sp - sq);
                out.push((p.0 + (q.0 - p.0) * t, p.1 + (q.1 - p.1) * t));
            }
        }
    }
    out
}

fn polygon_area<S: Scalar>(poly: &[(S, S)]) -> S {
    let n = poly.len();
    if n < 3 {
        return S::cst(0.0);
    }
    let mut acc = S::cst(0.0);
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc = acc + x0 * y1 - x1 * y0;
    }
    acc * S::cst(0.5)
}

/// BEV IoU of two `[cx, cy, w, l, yaw]` rectangles. Every inside/outside
/// decision of the clipper is folded into `sig`, which identifies the
/// smooth piece of the IoU surface the inputs lie on.
pub fn bev_iou_generic<S: Scalar>(a: [S; 5], b: [S; 5], sig: &mut u64) -> S {
    let ca = bev_corners(a);
    let cb = bev_corners(b);
    let inter = polygon_area(&clip_polygon(&ca, &cb, sig));
    let area_a = a[2] * a[3];
    let area_b = b[2] * b[3];
    let union = area_a + area_b - inter;
    if inter.val() <= 0.0 {
        return S::cst(0.0);
    }
    inter / union
}

/// Exact IoU of the yaw-rotated BEV footprints of two boxes.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let mut sig = 0;
    Ok(bev_iou_generic(a.bev_params(), b.bev_params(), &mut sig).clamp(0.0, 1.0))
}

/// Width of the regression encoding of a box.
pub const BOX_CODE: usize = 8;

/// `[x, y, z, ln w, ln l, ln h, sin yaw, cos yaw]`.
pub fn encode_box(b: &Box3D) -> [f64; BOX_CODE] {
    let (s, c) = b.yaw.sin_cos();
    [
        b.center.x,
        b.center.y,
        b.center.z,
        b.size.w.ln(),
        b.size.l.ln(),
        b.size.h.ln(),
        s,
        c,
    ]
}

/// Inverse of [`encode_box`]; the heading is `atan2(sin, cos)`, which
/// ignores the scale of the (sin, cos) pair.
pub fn decode_box(code: &[f64], class_id: usize, score: f64) -> Box3D {
    Box3D::new(
        Point3::new(code[0], code[1], code[2]),
        BoxSize {
            w: code[3].exp(),
            l: code[4].exp(),
            h: code[5].exp(),
        },
        code[6].atan2(code[7]),
        class_id,
    )
    .with_score(score)
}

/// Indices of the points inside `b` (closed intervals in the box frame).
pub fn points_in_box(cloud: &PointCloud, b: &Box3D) -> Vec<usize> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p.position()))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::LidarPoint;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn calib_100() -> CameraCalib {
        CameraCalib {
            fx: 100.0,
            fy: 100.0,
            u0: 50.0,
            v0: 50.0,
            extrinsic: Rigid::identity(),
            image_w: 200.0,
            image_h: 200.0,
        }
    }

    fn unit_box(x: f64, y: f64, yaw: f64) -> Box3D {
        Box3D::new(Point3::new(x, y, 0.0), BoxSize { w: 1.0, l: 1.0, h: 1.0 }, yaw, 0)
    }

    #[test]
    fn projection_examples() {
        let c = calib_100();
        let p = project_to_camera(Point3::new(0.0, 0.0, 10.0), &c).unwrap();
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 10.0));
        let p = project_to_camera(Point3::new(1.0, 2.0, 10.0), &c).unwrap();
        assert_abs_diff_eq!(p.u, 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.v, 70.0, epsilon = 1e-12);
        assert!(project_to_camera(Point3::new(0.0, 0.0, -5.0), &c).is_none());
    }

    #[test]
    fn projection_margin_widens_acceptance() {
        let c = calib_100();
        // u = 100*20/10 + 50 = 250 > 200
        let p = Point3::new(20.0, 0.0, 10.0);
        assert!(project_to_camera(p, &c).is_none());
        assert!(project_to_camera_with_margin(p, &c, 60.0).is_some());
    }

    #[test]
    fn calib_validation() {
        assert!(calib_100().validate().is_ok());
        let mut bad = calib_100();
        bad.fx = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = calib_100();
        bad.extrinsic.rotation[0][0] = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = calib_100();
        bad.u0 = 250.0;
        assert!(bad.validate().is_err());
        let rig = CameraCalib::looking_at_yaw(0.7, Point3::new(0.3, 0.1, 0.2), 1.6, 128, 64);
        assert!(rig.validate().is_ok());
    }

    #[test]
    fn yaw_camera_sees_its_heading() {
        let c = CameraCalib::looking_at_yaw(std::f64::consts::FRAC_PI_2, Point3::default(), 1.6, 128, 64);
        let p = project_to_camera(Point3::new(0.0, 10.0, 0.0), &c).unwrap();
        assert_abs_diff_eq!(p.u, 64.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.v, 32.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.depth, 10.0, epsilon = 1e-9);
        // a point to the camera's left projects left of center
        let q = project_to_camera(Point3::new(-2.0, 10.0, 0.0), &c).unwrap();
        assert!(q.u < 64.0);
    }

    #[test]
    fn spherical_examples() {
        let s = to_spherical(Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!((s.range, s.azimuth, s.inclination), (1.0, 0.0, 0.0));
        let s = to_spherical(Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(s.inclination, PI / 2.0);
        assert_eq!(s.range, 1.0);
        let s = to_spherical(Point3::new(1.0, 1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(s.range, 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.azimuth, PI / 4.0, epsilon = 1e-15);
        assert!(matches!(to_spherical(Point3::default()), Err(Error::DegeneratePoint)));
        let s = to_spherical(Point3::new(-1.0, -0.0, 0.0)).unwrap();
        assert_eq!(s.azimuth, PI);
    }

    #[test]
    fn bilinear_examples() {
        let g = FeatureGrid {
            channels: 1,
            height: 2,
            width: 2,
            data: vec![0.0, 1.0, 2.0, 3.0],
        };
        assert_eq!(bilinear_sample(&g, (0.0, 0.0)), vec![0.0]);
        assert_eq!(bilinear_sample(&g, (1.0, 0.0)), vec![1.0]);
        assert_eq!(bilinear_sample(&g, (1.0, 1.0)), vec![3.0]);
        assert_eq!(bilinear_sample(&g, (0.5, 0.5)), vec![1.5]);
        assert_eq!(bilinear_sample(&g, (-0.5, 0.5)), vec![0.0]);
        assert_eq!(bilinear_sample(&g, (0.5, 1.0 + 1e-12)), vec![0.0]);
    }

    #[test]
    fn iou_examples() {
        let a = unit_box(0.0, 0.0, 0.0);
        assert_abs_diff_eq!(rotated_iou_bev(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let far = unit_box(100.0, 0.0, 0.0);
        assert_eq!(rotated_iou_bev(&a, &far).unwrap(), 0.0);
        let shifted = unit_box(0.5, 0.0, 0.0);
        assert_abs_diff_eq!(rotated_iou_bev(&a, &shifted).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        let mut bad = a;
        bad.size.w = 0.0;
        assert!(rotated_iou_bev(&a, &bad).is_err());
    }

    #[test]
    fn iou_square_vs_rotated_square_matches_monte_carlo() {
        // area oracle: uniform samples over the bounding square of both shapes
        let a = unit_box(0.0, 0.0, 0.0);
        let b = unit_box(0.0, 0.0, PI / 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let half = 0.75;
        let (mut inter, mut uni) = (0u64, 0u64);
        for _ in 0..1_000_000 {
            let p = Point3::new(rng.random_range(-half..half), rng.random_range(-half..half), 0.0);
            let (ia, ib) = (a.contains(p), b.contains(p));
            inter += (ia && ib) as u64;
            uni += (ia || ib) as u64;
        }
        let mc = inter as f64 / uni as f64;
        let exact = rotated_iou_bev(&a, &b).unwrap();
        // closed form: octagon area 2(√2−1), union 2 − that
        let octagon = 2.0 * (2f64.sqrt() - 1.0);
        assert_abs_diff_eq!(exact, octagon / (2.0 - octagon), epsilon = 1e-12);
        assert_abs_diff_eq!(exact, mc, epsilon = 2e-3);
    }

    #[test]
    fn dual_iou_gradient_matches_finite_differences() {
        let a = [0.3, -0.2, 1.7, 4.1, 0.4];
        let b = [0.0, 0.0, 1.9, 4.5, 0.1];
        let mut sig = 0;
        let dual: [Dual5; 5] = std::array::from_fn(|i| Dual5::var(a[i], i));
        let iou = bev_iou_generic(dual, b.map(Dual5::cst), &mut sig);
        for i in 0..5 {
            let h = 1e-6;
            let mut ap = a;
            ap[i] += h;
            let mut am = a;
            am[i] -= h;
            let fd = (bev_iou_generic(ap, b, &mut 0) - bev_iou_generic(am, b, &mut 0)) / (2.0 * h);
            assert_abs_diff_eq!(iou.d[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn points_in_box_examples() {
        let b = Box3D::new(Point3::new(1.0, 2.0, 0.5), BoxSize { w: 2.0, l: 4.0, h: 1.5 }, 0.6, 0);
        let (s, c) = b.yaw.sin_cos();
        let eps = 1e-6;
        let inside = LidarPoint::at(b.center);
        let ex = b.size.l / 2.0 + eps;
        let outside = LidarPoint::at(Point3::new(b.center.x + c * ex, b.center.y + s * ex, b.center.z));
        let on_edge = LidarPoint::at(Point3::new(
            b.center.x + c * (b.size.l / 2.0 - 1e-12),
            b.center.y + s * (b.size.l / 2.0 - 1e-12),
            b.center.z,
        ));
        let cloud = PointCloud::from_points(vec![inside, outside, on_edge], 1);
        assert_eq!(points_in_box(&cloud, &b), vec![0, 2]);
    }

    #[test]
    fn points_in_box_matches_brute_force() {
        let b = Box3D::new(
            Point3::new(-3.0, 4.0, -1.0),
            BoxSize { w: 1.8, l: 4.4, h: 1.6 },
            -2.3,
            1,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<LidarPoint> = (0..1000)
            .map(|_| {
                LidarPoint::at(Point3::new(
                    rng.random_range(-6.5..0.5),
                    rng.random_range(0.5..7.5),
                    rng.random_range(-2.5..0.5),
                ))
            })
            .collect();
        let cloud = PointCloud::from_points(pts, 1);
        let (s, c) = b.yaw.sin_cos();
        let brute: Vec<usize> = cloud
            .points
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let p = p.position();
                let dx = p.x - b.center.x;
                let dy = p.y - b.center.y;
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                along.abs() <= 2.2 && across.abs() <= 0.9 && (p.z - b.center.z).abs() <= 0.8
            })
            .map(|(i, _)| i)
            .collect();
        assert!(!brute.is_empty());
        assert_eq!(points_in_box(&cloud, &b), brute);
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-5.0..5.0f64, -5.0..5.0f64, 0.3..4.0f64, 0.3..6.0f64, -PI..PI)
            .prop_map(|(x, y, w, l, yaw)| Box3D::new(Point3::new(x, y, 0.0), BoxSize { w, l, h: 1.0 }, yaw, 0))
    }

    proptest! {
        #[test]
        fn projection_round_trips(x in -20.0..20.0f64, y in -20.0..20.0f64, z in 0.5..40.0f64, yaw in -PI..PI) {
            let calib = CameraCalib::looking_at_yaw(yaw, Point3::new(0.5, -0.2, 0.3), 1.7, 128, 64);
            let cam = calib.extrinsic.inverse();
            let p = cam.apply(Point3::new(x * 0.1, y * 0.05, z));
            if let Some(pr) = project_to_camera_with_margin(p, &calib, 1e6) {
                let back = calib.unproject(pr.u, pr.v, pr.depth);
                prop_assert!((back - p).norm() < 1e-9);
            }
        }

        #[test]
        fn spherical_round_trips(x in -50.0..50.0f64, y in -50.0..50.0f64, z in -10.0..10.0f64) {
            prop_assume!(Point3::new(x, y, z).norm() > 1e-6);
            let p = Point3::new(x, y, z);
            let back = from_spherical(to_spherical(p).unwrap());
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn iou_symmetric_translation_invariant(a in arb_box(), b in arb_box(), dx in -30.0..30.0f64, dy in -30.0..30.0f64) {
            let ab = rotated_iou_bev(&a, &b).unwrap();
            let ba = rotated_iou_bev(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let shift = |mut x: Box3D| { x.center.x += dx; x.center.y += dy; x };
            let moved = rotated_iou_bev(&shift(a), &shift(b)).unwrap();
            prop_assert!((moved - ab).abs() < 1e-12);
        }

        #[test]
        fn bilinear_is_linear(vals in proptest::collection::vec(-5.0..5.0f64, 24), alpha in -3.0..3.0f64, beta in -3.0..3.0f64, x in -0.2..1.2f64, y in -0.2..1.2f64) {
            let g1 = FeatureGrid { channels: 2, height: 3, width: 2, data: vals[..12].to_vec() };
            let g2 = FeatureGrid { channels: 2, height: 3, width: 2, data: vals[12..].to_vec() };
            let mix = FeatureGrid {
                data: g1.data.iter().zip(&g2.data).map(|(a, b)| alpha * a + beta * b).collect(),
                ..g1.clone()
            };
            let s1 = bilinear_sample(&g1, (x, y));
            let s2 = bilinear_sample(&g2, (x, y));
            let sm = bilinear_sample(&mix, (x, y));
            for c in 0..2 {
                prop_assert!((sm[c] - (alpha * s1[c] + beta * s2[c])).abs() < 1e-9);
            }
        }
    }
}
