//! Small feature extractors: a pillar grid plus a strided conv stack for the
//! LiDAR sweep, and a strided conv pyramid for camera images.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{cell_center, normalize_bev, BevExtent, FeatureGrid};
use crate::nn::{Conv, ParamStore};
use crate::scene_synth::{Image, PointCloud};
use crate::tensor::Tensor;

/// count, mean dx, mean dy, mean z, mean intensity, max z
pub const PILLAR_FEATURES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelGridConfig {
    /// Voxel edge lengths (x, y, z), meters.
    pub voxel: [f64; 3],
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl Default for VoxelGridConfig {
    fn default() -> Self {
        Self {
            voxel: [0.3125, 0.3125, 6.0],
            x_range: (-20.0, 20.0),
            y_range: (-20.0, 20.0),
            z_range: (-3.0, 3.0),
        }
    }
}

impl VoxelGridConfig {
    /// `(rows, cols)` of the BEV grid.
    pub fn bev_shape(&self) -> (usize, usize) {
        (
            ((self.y_range.1 - self.y_range.0) / self.voxel[1]).round() as usize,
            ((self.x_range.1 - self.x_range.0) / self.voxel[0]).round() as usize,
        )
    }

    pub fn extent(&self) -> BevExtent {
        BevExtent {
            x_min: self.x_range.0,
            x_max: self.x_range.1,
            y_min: self.y_range.0,
            y_max: self.y_range.1,
        }
    }

    /// Layout of a feature map `stride` times coarser than the pillar grid.
    pub fn layout(&self, stride: usize) -> BevLayout {
        let (h, w) = self.bev_shape();
        BevLayout {
            extent: self.extent(),
            resolution: self.voxel[0] * stride as f64,
            height: h.div_ceil(stride),
            width: w.div_ceil(stride),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.voxel[0] - self.voxel[1]).abs() > 1e-12 {
            return Err(Error::Config("BEV voxels must be square".into()));
        }
        for (k, (lo, hi)) in [self.x_range, self.y_range, self.z_range].into_iter().enumerate() {
            let v = self.voxel[k];
            if !(v > 0.0 && hi > lo) {
                return Err(Error::Config("voxel sizes and ranges must be positive".into()));
            }
            let cells = (hi - lo) / v;
            if (cells - cells.round()).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "range [{lo}, {hi}] is not a multiple of the voxel size {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Aggregates the points of every BEV cell into [`PILLAR_FEATURES`]
/// channels; empty cells and out-of-range points contribute nothing.
pub fn pillarize(cloud: &PointCloud, cfg: &VoxelGridConfig) -> FeatureGrid {
    let (h, w) = cfg.bev_shape();
    let mut grid = FeatureGrid::zeros(PILLAR_FEATURES, h, w);
    let mut max_z = vec![f64::NEG_INFINITY; h * w];
    let (vx, vy) = (cfg.voxel[0], cfg.voxel[1]);
    for p in &cloud.points {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        if x < cfg.x_range.0 || x >= cfg.x_range.1 || y < cfg.y_range.0 || y >= cfg.y_range.1 {
            continue;
        }
        if z < cfg.z_range.0 || z > cfg.z_range.1 {
            continue;
        }
        let col = ((x - cfg.x_range.0) / vx) as usize;
        let row = ((y - cfg.y_range.0) / vy) as usize;
        if row >= h || col >= w {
            continue;
        }
        let cx = cfg.x_range.0 + (col as f64 + 0.5) * vx;
        let cy = cfg.y_range.0 + (row as f64 + 0.5) * vy;
        *grid.at_mut(0, row, col) += 1.0;
        *grid.at_mut(1, row, col) += x - cx;
        *grid.at_mut(2, row, col) += y - cy;
        *grid.at_mut(3, row, col) += z;
        *grid.at_mut(4, row, col) += p.intensity as f64;
        let m = &mut max_z[row * w + col];
        *m = m.max(z);
    }
    for row in 0..h {
        for col in 0..w {
            let n = grid.at(0, row, col);
            if n > 0.0 {
                for c in 1..5 {
                    *grid.at_mut(c, row, col) /= n;
                }
                *grid.at_mut(5, row, col) = max_z[row * w + col];
            }
        }
    }
    grid
}

/// Network input for a pillar grid: the count channel is compressed with
/// `ln(1 + n)`, the rest pass through.
pub fn encoder_input(grid: &FeatureGrid) -> Tensor {
    let plane = grid.height * grid.width;
    let mut t = Tensor::from_vec(grid.channels, plane, grid.data.clone());
    t.row_mut(0).iter_mut().for_each(|v| *v = v.ln_1p());
    t
}

/// Metric layout of a BEV feature map: rows along y, columns along x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevLayout {
    pub extent: BevExtent,
    pub resolution: f64,
    pub height: usize,
    pub width: usize,
}

impl BevLayout {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Metric center of flat cell index `idx`.
    pub fn cell_center(&self, idx: usize) -> (f64, f64) {
        cell_center(&self.extent, self.resolution, idx / self.width, idx % self.width)
    }

    /// Align-corners normalized sampling coordinates of a metric position.
    pub fn normalize(&self, x: f64, y: f64) -> (f64, f64) {
        normalize_bev(&self.extent, self.resolution, self.height, self.width, x, y)
    }

    /// Flat index of the cell containing `(x, y)`, if inside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let c = ((x - self.extent.x_min) / self.resolution).floor();
        let r = ((y - self.extent.y_min) / self.resolution).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height)
            .then(|| r as usize * self.width + c as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevEncoderConfig {
    /// Channel widths of the two downsampling stages.
    pub widths: [usize; 2],
}

impl Default for BevEncoderConfig {
    fn default() -> Self {
        Self { widths: [16, 32] }
    }
}

/// Two stride-2 stages, two stride-1 context layers, and an upsampled skip
/// fusion back to half the pillar resolution.
#[derive(Clone, Debug)]
pub struct BevEncoder {
    c1: Conv,
    c2: Conv,
    c3: Conv,
    c4: Conv,
    fuse: Conv,
    pub in_shape: (usize, usize),
    pub out_shape: (usize, usize),
    pub channels: usize,
}

impl BevEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &BevEncoderConfig,
        in_shape: (usize, usize),
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let [w1, w2] = cfg.widths;
        let c1 = Conv::new(store, &format!("{name}.c1"), PILLAR_FEATURES, w1, 3, 2, rng);
        let c2 = Conv::new(store, &format!("{name}.c2"), w1, w2, 3, 2, rng);
        let c3 = Conv::new(store, &format!("{name}.c3"), w2, w2, 3, 1, rng);
        let c4 = Conv::new(store, &format!("{name}.c4"), w2, w2, 3, 1, rng);
        let fuse = Conv::new(store, &format!("{name}.fuse"), w1 + w2, d, 1, 1, rng);
        let out_shape = c1.out_hw(in_shape.0, in_shape.1);
        Self {
            c1,
            c2,
            c3,
            c4,
            fuse,
            in_shape,
            out_shape,
            channels: d,
        }
    }

    /// `[PILLAR_FEATURES × H·W]` input to `[d × (H/2)·(W/2)]` features.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (h, w) = self.in_shape;
        if g.value(x).shape() != (PILLAR_FEATURES, h * w) {
            return Err(Error::Shape(format!(
                "BEV encoder expects {PILLAR_FEATURES}x{} input, got {:?}",
                h * w,
                g.value(x).shape()
            )));
        }
        let (a, h1, w1) = self.c1.forward(g, x, h, w);
        let a = g.relu(a);
        let (b, h2, w2) = self.c2.forward(g, a, h1, w1);
        let b = g.relu(b);
        let (b, _, _) = self.c3.forward(g, b, h2, w2);
        let b = g.relu(b);
        let (b, _, _) = self.c4.forward(g, b, h2, w2);
        let b = g.relu(b);
        let up = g.upsample2x(b, h2, w2);
        let up = if 2 * h2 != h1 || 2 * w2 != w1 {
            crop_map(g, up, (2 * h2, 2 * w2), (h1, w1))
        } else {
            up
        };
        let cat = g.concat_rows(&[a, up]);
        let (f, _, _) = self.fuse.forward(g, cat, h1, w1);
        Ok(g.relu(f))
    }
}

/// Keeps the top-left `to` window of a `[C × from.0·from.1]` map.
fn crop_map(g: &mut Graph, x: Var, from: (usize, usize), to: (usize, usize)) -> Var {
    let c = g.value(x).rows;
    let mut idx = Vec::with_capacity(c * to.0 * to.1);
    for ch in 0..c {
        for y in 0..to.0 {
            for xx in 0..to.1 {
                idx.push(ch * from.0 * from.1 + y * from.1 + xx);
            }
        }
    }
    let flat = g.gather_elems(x, &idx);
    g.reshape(flat, c, to.0 * to.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageBackboneConfig {
    /// Widths of the five stride-2 stages; the last three feed the pyramid.
    pub widths: [usize; 5],
}

impl Default for ImageBackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 24, 32, 32, 32],
        }
    }
}

/// One pyramid level: `[d × h·w]` features.
#[derive(Clone, Copy, Debug)]
pub struct Level {
    pub features: Var,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Levels at strides 8, 16 and 32 for one camera.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Level>,
}

#[derive(Clone, Debug)]
pub struct ImageBackbone {
    stages: Vec<Conv>,
    proj: Vec<Conv>,
}

impl ImageBackbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ImageBackboneConfig, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut prev = 3;
        let stages = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(store, &format!("{name}.s{i}"), prev, w, 3, 2, rng);
                prev = w;
                c
            })
            .collect();
        let proj = (2..5)
            .map(|i| Conv::new(store, &format!("{name}.p{i}"), cfg.widths[i], d, 1, 1, rng))
            .collect();
        Self { stages, proj }
    }

    /// Pyramid of one image given as `[3 × H·W]`.
    pub fn forward(&self, g: &mut Graph, image: Var, height: usize, width: usize) -> FeaturePyramid {
        let (mut x, mut h, mut w) = (image, height, width);
        let mut levels = Vec::new();
        for (i, conv) in self.stages.iter().enumerate() {
            let (y, ho, wo) = conv.forward(g, x, h, w);
            x = g.relu(y);
            h = ho;
            w = wo;
            if i >= 2 {
                let (p, _, _) = self.proj[i - 2].forward(g, x, h, w);
                levels.push(Level {
                    features: p,
                    height: h,
                    width: w,
                    stride: 1 << (i + 1),
                });
            }
        }
        FeaturePyramid { levels }
    }
}

/// Image as a centered `[3 × H·W]` tensor.
pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_vec(
        3,
        img.height * img.width,
        img.data.iter().map(|&v| v as f64 - 0.5).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::scene_synth::LidarPoint;
    use rand::SeedableRng;

    #[test]
    fn pillarize_examples() {
        let cfg = VoxelGridConfig::default();
        let empty = pillarize(&PointCloud::default(), &cfg);
        assert!(empty.data.iter().all(|&v| v == 0.0));
        assert_eq!((empty.height, empty.width), (128, 128));

        let one = pillarize(
            &PointCloud::from_points(vec![LidarPoint::at(Point3::new(1.0, 2.0, 0.5))], 32),
            &cfg,
        );
        let nonzero: Vec<usize> = (0..128 * 128)
            .filter(|&i| (0..6).any(|c| one.data[c * 128 * 128 + i] != 0.0))
            .collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(one.data[nonzero[0]], 1.0);

        let two = pillarize(
            &PointCloud::from_points(
                vec![
                    LidarPoint::at(Point3::new(1.0, 1.0, 0.0)),
                    LidarPoint::at(Point3::new(1.0, 1.0, 2.0)),
                ],
                32,
            ),
            &cfg,
        );
        let row = ((1.0 + 20.0) / 0.3125) as usize;
        assert_eq!(two.at(0, row, row), 2.0);
        assert_eq!(two.at(5, row, row), 2.0);
        assert_eq!(two.at(3, row, row), 1.0);
    }

    #[test]
    fn pillarize_is_order_invariant() {
        let pts: Vec<LidarPoint> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.37;
                LidarPoint {
                    intensity: (i % 7) as f32 / 7.0,
                    ..LidarPoint::at(Point3::new(5.0 * t.sin(), 3.0 * t.cos(), (t * 0.1).sin()))
                }
            })
            .collect();
        let mut rev = pts.clone();
        rev.reverse();
        let cfg = VoxelGridConfig::default();
        let a = pillarize(&PointCloud::from_points(pts, 32), &cfg);
        let b = pillarize(&PointCloud::from_points(rev, 32), &cfg);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bev_encoder_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = BevEncoder::new(&mut store, "bev", &BevEncoderConfig::default(), (16, 16), 8, &mut rng);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(PILLAR_FEATURES, 256));
        let y = enc.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), (8, 64));
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(PILLAR_FEATURES, 255));
        assert!(enc.forward(&mut g, bad).is_err());
    }

    #[test]
    fn image_pyramid_follows_stride_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = ImageBackbone::new(&mut store, "img", &ImageBackboneConfig::default(), 8, &mut rng);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(3, 96 * 160));
        let p = bb.forward(&mut g, x, 96, 160);
        let dims: Vec<(usize, usize, usize)> = p.levels.iter().map(|l| (l.height, l.width, l.stride)).collect();
        assert_eq!(dims, vec![(12, 20, 8), (6, 10, 16), (3, 5, 32)]);
        for l in &p.levels {
            assert_eq!(g.value(l.features).shape(), (8, l.height * l.width));
            assert!(g.value(l.features).data.iter().all(|&v| v == 0.0));
        }
    }
}
