//! Cross-modal decoding: a deformable self-attention encoder over the
//! camera pyramids, image and LiDAR deformable cross-attention decoders,
//! center refinement, and the interleaved block schedule.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SampleSpec, Var};
use crate::backbone::{BevLayout, FeaturePyramid};
use crate::error::{Error, Result};
use crate::geometry::{decode_box, project_to_camera, Box3D, CameraCalib, Point3, BOX_CODE};
use crate::nn::{glorot, Activation, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::proposal::{clamp_xyz, CenterEmbedding};
use crate::tensor::Tensor;

/// Which modality a decoder layer attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    Image,
    Lidar,
}

impl DecoderKind {
    pub fn letter(self) -> char {
        match self {
            DecoderKind::Image => 'C',
            DecoderKind::Lidar => 'L',
        }
    }
}

/// Parses a decoder schedule such as `(CL)3`, `(LC)3`, `3C3L` or `CL`.
/// A parenthesized group forms one block and is repeated by its count; a
/// bare letter forms a single-layer block. Groups take a prefix or suffix
/// count, letters only a prefix. The empty string is the schedule with no blocks.
pub fn parse_order(spec: &str) -> Result<Vec<Vec<DecoderKind>>> {
    let chars: Vec<char> = spec.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = |why: &str| Error::Config(format!("decoder order {spec:?}: {why}"));
    let mut blocks = Vec::new();
    let mut i = 0;
    let read_count = |i: &mut usize| -> Option<usize> {
        let start = *i;
        while *i < chars.len() && chars[*i].is_ascii_digit() {
            *i += 1;
        }
        (start < *i).then(|| {
            chars[start..*i]
                .iter()
                .collect::<String>()
                .parse()
                .unwrap_or(usize::MAX)
        })
    };
    let letter = |c: char| match c.to_ascii_uppercase() {
        'C' => Some(DecoderKind::Image),
        'L' => Some(DecoderKind::Lidar),
        _ => None,
    };
    while i < chars.len() {
        let prefix = read_count(&mut i);
        let block = match chars.get(i) {
            Some('(') => {
                let close = chars[i..]
                    .iter()
                    .position(|&c| c == ')')
                    .ok_or_else(|| bad("unclosed group"))?
                    + i;
                let group: Option<Vec<DecoderKind>> = chars[i + 1..close].iter().map(|&c| letter(c)).collect();
                let group = group.ok_or_else(|| bad("groups may only contain C and L"))?;
                if group.is_empty() {
                    return Err(bad("empty group"));
                }
                i = close + 1;
                group
            }
            Some(&c) => {
                i += 1;
                vec![letter(c).ok_or_else(|| bad("expected C, L or a group"))?]
            }
            None => return Err(bad("dangling count")),
        };
        let grouped = block.len() > 1 || chars.get(i.wrapping_sub(1)) == Some(&')');
        let suffix = if grouped { read_count(&mut i) } else { None };
        let count = match (prefix, suffix) {
            (Some(_), Some(_)) => return Err(bad("an item takes one count")),
            (a, b) => a.or(b).unwrap_or(1),
        };
        if count == 0 || count > 64 {
            return Err(bad("counts must lie in 1..=64"));
        }
        blocks.extend(std::iter::repeat_n(block, count));
    }
    Ok(blocks)
}

/// Formats a schedule back into the parenthesized notation.
pub fn format_order(blocks: &[Vec<DecoderKind>]) -> String {
    blocks
        .iter()
        .map(|b| {
            let s: String = b.iter().map(|k| k.letter()).collect();
            if b.len() == 1 {
                s
            } else {
                format!("({s})")
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub order: String,
    pub heads: usize,
    pub image_points: usize,
    pub lidar_points: usize,
    pub encoder_layers: usize,
    pub encoder_points: usize,
    pub ffn_ratio: usize,
    /// Bound on each per-layer center offset, meters.
    pub max_center_step: f64,
    /// Layer-normalize the accumulated query at the end of every block.
    pub block_norm: bool,
    /// Supervise every decoder layer, not only the last one.
    pub deep_supervision: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            order: "(CL)3".into(),
            heads: 4,
            image_points: 6,
            lidar_points: 1,
            encoder_layers: 2,
            encoder_points: 4,
            ffn_ratio: 2,
            max_center_step: 2.0,
            block_norm: true,
            deep_supervision: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        parse_order(&self.order)?;
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide d = {d}", self.heads)));
        }
        if !d.is_multiple_of(4) {
            return Err(Error::Config("d must be a multiple of 4 for the sine embedding".into()));
        }
        if self.image_points == 0 || self.lidar_points == 0 || self.encoder_points == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("point counts and ffn_ratio must be positive".into()));
        }
        if !(self.max_center_step > 0.0) {
            return Err(Error::Config("max_center_step must be positive".into()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<Vec<DecoderKind>> {
        parse_order(&self.order).unwrap_or_default()
    }
}

/// DETR-style sine embedding of a normalized `(x, y)`: `d/2` channels
/// for y followed by `d/2` for x.
pub fn sine_embedding(x: f64, y: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for v in [y, x] {
        for i in 0..half {
            let freq = 10000f64.powf(2.0 * (i / 2) as f64 / half as f64);
            let a = 2.0 * PI * v / freq;
            out.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    out
}

/// `x · W` for a bias-free projection.
fn project(g: &mut Graph, x: Var, w: ParamId) -> Var {
    let wv = g.param(w);
    g.matmul(x, wv)
}

fn norm_step(extent: usize) -> f64 {
    1.0 / extent.saturating_sub(1).max(1) as f64
}

/// A feature map inside a stacked token matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapSlot {
    pub base_row: usize,
    pub height: usize,
    pub width: usize,
}

/// One deformable read: query row, slot `(head, level, point)` flattened
/// within the query's offset vector, the map it reads, and its
/// normalized reference location.
#[derive(Clone, Copy, Debug)]
struct Read {
    query: usize,
    slot: usize,
    head: usize,
    map: MapSlot,
    reference: (f64, f64),
}

/// Sampling-offset and attention-weight heads for `heads × levels ×
/// points` reads per query.
#[derive(Clone, Debug)]
struct Sampler {
    offsets: Linear,
    weights: Linear,
    heads: usize,
    levels: usize,
    points: usize,
}

impl Sampler {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, levels: usize, points: usize) -> Self {
        let slots = heads * levels * points;
        let offsets = Linear::zeroed(store, &format!("{name}.offsets"), d, slots * 2);
        let bias = store.value_mut(offsets.b);
        // each head starts looking in its own direction, farther per point
        for h in 0..heads {
            let a = 2.0 * PI * h as f64 / heads as f64;
            let (s, c) = a.sin_cos();
            let m = s.abs().max(c.abs());
            for l in 0..levels {
                for k in 0..points {
                    let j = (h * levels + l) * points + k;
                    let r = 0.5 * (k + 1) as f64;
                    bias.data[2 * j] = r * c / m;
                    bias.data[2 * j + 1] = r * s / m;
                }
            }
        }
        let weights = Linear::zeroed(store, &format!("{name}.weights"), d, slots);
        Self {
            offsets,
            weights,
            heads,
            levels,
            points,
        }
    }

    fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }

    fn slot_parts(&self, slot: usize) -> (usize, usize) {
        (slot / (self.levels * self.points), slot / self.points % self.levels)
    }

    /// Offsets `[N·slots × 2]` in map cells, and attention weights
    /// `[N × slots]` normalized per head over levels and points.
    fn heads_for(&self, g: &mut Graph, query: Var) -> (Var, Var) {
        let n = g.value(query).rows;
        let off = self.offsets.forward(g, query);
        let off = g.reshape(off, n * self.slots(), 2);
        let logits = self.weights.forward(g, query);
        let attn = g.softmax_groups(logits, self.levels * self.points, None);
        (off, attn)
    }
}

/// Bilinear reads at `reference + offset`, scaled per sample by
/// `weights` `[S × 1]` and summed into `[n × d]` head blocks.
fn deform_read(
    g: &mut Graph,
    values: Var,
    offsets: Var,
    reads: &[Read],
    weights: Var,
    sampler: &Sampler,
    n: usize,
) -> Var {
    let d = g.value(values).cols;
    let width = d / sampler.heads;
    let slots = sampler.slots();
    let rows: Vec<usize> = reads.iter().map(|r| r.query * slots + r.slot).collect();
    let off = g.gather_rows(offsets, &rows);
    let mut scale = Tensor::zeros(reads.len(), 2);
    let mut base = Tensor::zeros(reads.len(), 2);
    for (s, r) in reads.iter().enumerate() {
        scale.set(s, 0, norm_step(r.map.width));
        scale.set(s, 1, norm_step(r.map.height));
        base.set(s, 0, r.reference.0);
        base.set(s, 1, r.reference.1);
    }
    let off = g.mul_const(off, scale);
    let locs = g.add_const(off, &base);
    let mut specs = Vec::with_capacity(reads.len());
    let mut targets = Vec::with_capacity(reads.len());
    for r in reads {
        let channel = r.head * width;
        specs.push(SampleSpec {
            base_row: r.map.base_row,
            height: r.map.height,
            width: r.map.width,
            channel,
        });
        targets.push((r.query, channel));
    }
    let samples = g.bilinear_gather(values, locs, &specs, width);
    g.weighted_scatter(samples, weights, &targets, n, d)
}

/// Two-layer feedforward.
fn ffn(store: &mut ParamStore, name: &str, d: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Mlp {
    Mlp::new(store, name, &[d, ratio * d, d], Activation::Relu, false, rng)
}

/// Shape of one pyramid level inside a camera's token block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// First token row of the level within its camera block.
    pub offset: usize,
}

/// Encoded camera tokens, `[cameras · per_camera × d]`, camera-major.
#[derive(Clone, Debug)]
pub struct ImageMemory {
    pub tokens: Var,
    pub levels: Vec<LevelShape>,
    pub per_camera: usize,
    pub cameras: usize,
}

impl ImageMemory {
    pub fn slot(&self, camera: usize, level: usize) -> MapSlot {
        let l = &self.levels[level];
        MapSlot {
            base_row: camera * self.per_camera + l.offset,
            height: l.height,
            width: l.width,
        }
    }

    /// Level `level` of camera `camera` back in `[d × h·w]` layout.
    pub fn level_map(&self, g: &mut Graph, camera: usize, level: usize) -> Var {
        let s = self.slot(camera, level);
        let rows = g.slice_rows(self.tokens, s.base_row, s.height * s.width);
        g.transpose(rows)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    sampler: Sampler,
    value: Linear,
    out: ParamId,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

/// Post-norm deformable self-attention over each camera's flattened
/// pyramid, with sine position and learned level embeddings added once.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    level_embed: ParamId,
    layers: Vec<EncoderLayer>,
    levels: usize,
    d: usize,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        levels: usize,
        cfg: &FusionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut embed = glorot(rng, levels, d, levels, d);
        embed.scale_assign(0.1);
        let level_embed = store.add(format!("{name}.level_embed"), embed);
        let layers = (0..cfg.encoder_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                EncoderLayer {
                    sampler: Sampler::new(store, &format!("{p}.attn"), d, cfg.heads, levels, cfg.encoder_points),
                    value: Linear::new(store, &format!("{p}.attn.value"), d, d, rng),
                    out: store.add(format!("{p}.attn.out.w"), glorot(rng, d, d, d, d)),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    ffn: ffn(store, &format!("{p}.ffn"), d, cfg.ffn_ratio, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        Self {
            level_embed,
            layers,
            levels,
            d,
        }
    }

    /// Flattens the pyramids (one per camera), adds embeddings, and runs
    /// the encoder layers. With no layers the raw tokens pass through.
    pub fn encode(&self, g: &mut Graph, pyramids: &[FeaturePyramid]) -> Result<ImageMemory> {
        let first = pyramids
            .first()
            .ok_or_else(|| Error::Shape("no camera pyramids".into()))?;
        if first.levels.len() != self.levels {
            return Err(Error::Shape(format!(
                "encoder built for {} levels, pyramid has {}",
                self.levels,
                first.levels.len()
            )));
        }
        let mut levels = Vec::with_capacity(self.levels);
        let mut offset = 0;
        for l in &first.levels {
            levels.push(LevelShape {
                height: l.height,
                width: l.width,
                stride: l.stride,
                offset,
            });
            offset += l.height * l.width;
        }
        let per_camera = offset;
        let mut parts = Vec::new();
        for p in pyramids {
            if p.levels.len() != self.levels
                || p.levels
                    .iter()
                    .zip(&levels)
                    .any(|(a, b)| a.height != b.height || a.width != b.width)
            {
                return Err(Error::Shape("camera pyramids differ in shape".into()));
            }
            for l in &p.levels {
                if g.value(l.features).shape() != (self.d, l.height * l.width) {
                    return Err(Error::Shape("pyramid level has the wrong channel count".into()));
                }
                parts.push(g.transpose(l.features));
            }
        }
        let cameras = pyramids.len();
        let tokens = g.concat_rows(&parts);

        let mut pos = Tensor::zeros(cameras * per_camera, self.d);
        let mut level_of = Vec::with_capacity(cameras * per_camera);
        let mut refs = Vec::with_capacity(cameras * per_camera);
        for cam in 0..cameras {
            for (li, l) in levels.iter().enumerate() {
                for r in 0..l.height {
                    for c in 0..l.width {
                        let x = c as f64 * norm_step(l.width);
                        let y = r as f64 * norm_step(l.height);
                        let row = cam * per_camera + l.offset + r * l.width + c;
                        pos.row_mut(row).copy_from_slice(&sine_embedding(x, y, self.d));
                        level_of.push(li);
                        refs.push((cam, (x, y)));
                    }
                }
            }
        }
        let mut x = tokens;
        if !self.layers.is_empty() {
            let lvl = g.param(self.level_embed);
            let lvl = g.gather_rows(lvl, &level_of);
            let t = g.add_const(tokens, &pos);
            x = g.add(t, lvl);
        }

        let memory = ImageMemory {
            tokens: x,
            levels,
            per_camera,
            cameras,
        };
        for layer in &self.layers {
            let slots = layer.sampler.slots();
            let reads: Vec<Read> = refs
                .iter()
                .enumerate()
                .flat_map(|(t, &(cam, reference))| {
                    let memory = &memory;
                    let sampler = &layer.sampler;
                    (0..slots).map(move |slot| {
                        let (head, level) = sampler.slot_parts(slot);
                        Read {
                            query: t,
                            slot,
                            head,
                            map: memory.slot(cam, level),
                            reference,
                        }
                    })
                })
                .collect();
            let n = refs.len();
            let (off, attn) = layer.sampler.heads_for(g, x);
            let weights = g.reshape(attn, n * slots, 1);
            let values = layer.value.forward(g, x);
            let agg = deform_read(g, values, off, &reads, weights, &layer.sampler, n);
            let attn_out = project(g, agg, layer.out);
            let y = g.add(x, attn_out);
            let y = layer.norm1.forward(g, y);
            let f = layer.ffn.forward(g, y);
            let y2 = g.add(y, f);
            x = layer.norm2.forward(g, y2);
        }
        Ok(ImageMemory { tokens: x, ..memory })
    }
}

/// Standard multi-head attention among the queries.
#[derive(Clone, Debug)]
struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, pos: Var) -> Var {
        let (n, d) = g.value(x).shape();
        let dh = d / self.heads;
        let xp = g.add(x, pos);
        let q = self.q.forward(g, xp);
        let k = self.k.forward(g, xp);
        let v = self.v.forward(g, x);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_groups(s, n, None);
            outs.push(g.matmul(a, vh));
        }
        let cat = g.concat_cols(&outs);
        self.out.forward(g, cat)
    }
}

/// Normalized read location of `center` on one pyramid level of a
/// camera, or `None` if it does not project into the image.
pub fn image_reference(center: Point3, calib: &CameraCalib, level: &LevelShape) -> Option<(f64, f64)> {
    let p = project_to_camera(center, calib)?;
    let s = level.stride as f64;
    Some((
        (p.u / s - 0.5) * norm_step(level.width),
        (p.v / s - 0.5) * norm_step(level.height),
    ))
}

/// Normalized BEV read location of a center.
pub fn lidar_reference(layout: &BevLayout, center: Point3) -> (f64, f64) {
    layout.normalize(center.x, center.y)
}

fn center_points(t: &Tensor) -> Vec<Point3> {
    (0..t.rows)
        .map(|r| Point3::new(t.get(r, 0), t.get(r, 1), t.get(r, 2)))
        .collect()
}

/// Image cross-attention: each query reads `points` locations per level
/// around its projected center in every camera that sees it, weighted by
/// per-slot, per-level and per-camera normalized weights.
#[derive(Clone, Debug)]
pub struct ImageCrossAttention {
    sampler: Sampler,
    level_weights: Linear,
    camera_weights: Linear,
    value: Linear,
    out: ParamId,
    cameras: usize,
}

impl ImageCrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        levels: usize,
        points: usize,
        cameras: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            sampler: Sampler::new(store, name, d, heads, levels, points),
            level_weights: Linear::zeroed(store, &format!("{name}.level_weights"), d, levels),
            camera_weights: Linear::zeroed(store, &format!("{name}.camera_weights"), d, cameras),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: store.add(format!("{name}.out.w"), glorot(rng, d, d, d, d)),
            cameras,
        }
    }

    /// `residual + Q_u`, where `Q_u` is computed from `query` (which
    /// already includes any positional term) at the given centers.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        residual: Var,
        centers: &Tensor,
        memory: &ImageMemory,
        calibs: &[CameraCalib],
    ) -> Result<Var> {
        let n = g.value(query).rows;
        if calibs.len() != memory.cameras || calibs.len() != self.cameras {
            return Err(Error::Shape(format!(
                "{} calibrations for {} encoded cameras ({} expected)",
                calibs.len(),
                memory.cameras,
                self.cameras
            )));
        }
        if centers.shape() != (n, 3) || memory.levels.len() != self.sampler.levels {
            return Err(Error::Shape("image cross-attention input shapes disagree".into()));
        }
        let levels = self.sampler.levels;
        let slots = self.sampler.slots();
        let mut visible = vec![false; n * self.cameras];
        let mut reads = Vec::new();
        let mut level_idx = Vec::new();
        let mut cam_idx = Vec::new();
        for (q, c) in center_points(centers).into_iter().enumerate() {
            for (p, calib) in calibs.iter().enumerate() {
                let refs: Option<Vec<(f64, f64)>> =
                    memory.levels.iter().map(|l| image_reference(c, calib, l)).collect();
                let Some(refs) = refs else { continue };
                visible[q * self.cameras + p] = true;
                for slot in 0..slots {
                    let (head, level) = self.sampler.slot_parts(slot);
                    reads.push(Read {
                        query: q,
                        slot,
                        head,
                        map: memory.slot(p, level),
                        reference: refs[level],
                    });
                    level_idx.push(q * levels + level);
                    cam_idx.push(q * self.cameras + p);
                }
            }
        }
        if reads.is_empty() {
            return Ok(residual);
        }
        let (off, attn) = self.sampler.heads_for(g, query);
        let lw = self.level_weights.forward(g, query);
        let lw = g.softmax_groups(lw, levels, None);
        let cw = self.camera_weights.forward(g, query);
        let cw = g.softmax_groups(cw, self.cameras, Some(&visible));
        let slot_idx: Vec<usize> = reads.iter().map(|r| r.query * slots + r.slot).collect();
        let a = g.gather_elems(attn, &slot_idx);
        let b = g.gather_elems(lw, &level_idx);
        let c = g.gather_elems(cw, &cam_idx);
        let ab = g.mul(a, b);
        let weights = g.mul(ab, c);
        let values = self.value.forward(g, memory.tokens);
        let agg = deform_read(g, values, off, &reads, weights, &self.sampler, n);
        let update = project(g, agg, self.out);
        Ok(g.add(residual, update))
    }
}

/// LiDAR cross-attention: `points` reads per head around each center on
/// the BEV token map.
#[derive(Clone, Debug)]
pub struct LidarCrossAttention {
    sampler: Sampler,
    value: Linear,
    out: ParamId,
}

impl LidarCrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        points: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            sampler: Sampler::new(store, name, d, heads, 1, points),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: store.add(format!("{name}.out.w"), glorot(rng, d, d, d, d)),
        }
    }

    /// `residual + Q_u` reading from BEV tokens `[H·W × d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        residual: Var,
        centers: &Tensor,
        bev_tokens: Var,
        layout: &BevLayout,
    ) -> Result<Var> {
        let n = g.value(query).rows;
        if centers.shape() != (n, 3) || g.value(bev_tokens).rows != layout.cells() {
            return Err(Error::Shape("LiDAR cross-attention input shapes disagree".into()));
        }
        let slots = self.sampler.slots();
        let map = MapSlot {
            base_row: 0,
            height: layout.height,
            width: layout.width,
        };
        let mut reads = Vec::with_capacity(n * slots);
        for (q, c) in center_points(centers).into_iter().enumerate() {
            let reference = lidar_reference(layout, c);
            for slot in 0..slots {
                reads.push(Read {
                    query: q,
                    slot,
                    head: self.sampler.slot_parts(slot).0,
                    map,
                    reference,
                });
            }
        }
        let (off, attn) = self.sampler.heads_for(g, query);
        let weights = g.reshape(attn, n * slots, 1);
        let values = self.value.forward(g, bev_tokens);
        let agg = deform_read(g, values, off, &reads, weights, &self.sampler, n);
        let update = project(g, agg, self.out);
        Ok(g.add(residual, update))
    }
}

#[derive(Clone, Debug)]
enum CrossAttention {
    Image(ImageCrossAttention),
    Lidar(LidarCrossAttention),
}

/// Pre-norm decoder layer: self-attention, cross-attention, feedforward,
/// followed by the center refinement and prediction residual heads.
#[derive(Clone, Debug)]
struct DecoderLayer {
    kind: DecoderKind,
    self_attn: SelfAttention,
    norm1: LayerNorm,
    cross: CrossAttention,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
    refine: Mlp,
    cls: Linear,
    shape: Linear,
}

/// Per-layer predictions kept for supervision.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub kind: DecoderKind,
    pub block: usize,
    pub logits: Var,
    pub codes: Var,
    pub centers: Var,
    pub queries: Var,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub steps: Vec<StepOutput>,
    pub logits: Var,
    pub codes: Var,
    pub centers: Var,
    pub queries: Var,
    /// Decoder kinds in execution order.
    pub trace: Vec<DecoderKind>,
}

/// What the decoders read from.
#[derive(Clone, Copy, Debug)]
pub struct FusionInputs<'a> {
    pub memory: Option<&'a ImageMemory>,
    pub calibs: &'a [CameraCalib],
    /// `[H·W × d]` BEV tokens.
    pub bev_tokens: Var,
    pub layout: BevLayout,
    pub z_range: (f64, f64),
}

/// Stage-1 state the decoders start from.
#[derive(Clone, Copy, Debug)]
pub struct FusionSeed {
    pub queries: Var,
    pub centers: Var,
    pub codes: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct FusionDecoder {
    blocks: Vec<Vec<DecoderLayer>>,
    block_norms: Vec<LayerNorm>,
    pub cfg: FusionConfig,
}

impl FusionDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &FusionConfig,
        d: usize,
        num_classes: usize,
        image_levels: usize,
        cameras: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(d)?;
        let mut blocks = Vec::new();
        let mut block_norms = Vec::new();
        for (m, kinds) in parse_order(&cfg.order)?.into_iter().enumerate() {
            let mut layers = Vec::new();
            for (i, kind) in kinds.into_iter().enumerate() {
                let p = format!("fusion.block{m}.{}{i}", kind.letter().to_ascii_lowercase());
                let cross = match kind {
                    DecoderKind::Image => CrossAttention::Image(ImageCrossAttention::new(
                        store,
                        &format!("{p}.cross"),
                        d,
                        cfg.heads,
                        image_levels,
                        cfg.image_points,
                        cameras,
                        rng,
                    )),
                    DecoderKind::Lidar => CrossAttention::Lidar(LidarCrossAttention::new(
                        store,
                        &format!("{p}.cross"),
                        d,
                        cfg.heads,
                        cfg.lidar_points,
                        rng,
                    )),
                };
                layers.push(DecoderLayer {
                    kind,
                    self_attn: SelfAttention::new(store, &format!("{p}.self"), d, cfg.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    cross,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                    ffn: ffn(store, &format!("{p}.ffn"), d, cfg.ffn_ratio, rng),
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), d),
                    refine: Mlp::new(store, &format!("{p}.refine"), &[d, d, 3], Activation::Relu, true, rng),
                    cls: Linear::zeroed(store, &format!("{p}.cls"), d, num_classes),
                    shape: Linear::zeroed(store, &format!("{p}.shape"), d, BOX_CODE - 3),
                });
            }
            blocks.push(layers);
            block_norms.push(LayerNorm::new(store, &format!("fusion.block{m}.norm"), d));
        }
        Ok(Self {
            blocks,
            block_norms,
            cfg: cfg.clone(),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn uses_images(&self) -> bool {
        self.blocks.iter().flatten().any(|l| l.kind == DecoderKind::Image)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        seed: FusionSeed,
        inputs: &FusionInputs,
        embed: &CenterEmbedding,
    ) -> Result<FusionOutput> {
        let mut q_in = seed.queries;
        let mut c_in = seed.centers;
        let mut steps = Vec::new();
        let mut trace = Vec::new();
        let base_shape = g.slice_cols(seed.codes, 3, BOX_CODE - 3);
        for (m, layers) in self.blocks.iter().enumerate() {
            let (mut q, mut c) = (q_in, c_in);
            for layer in layers {
                trace.push(layer.kind);
                q = self.decode(g, layer, q, c, inputs, embed)?;
                let delta = layer.refine.forward(g, q);
                let delta = g.tanh(delta);
                let delta = g.scale(delta, self.cfg.max_center_step);
                let moved = g.add(c, delta);
                c = clamp_xyz(g, moved, &inputs.layout.extent, inputs.z_range);

                let dl = layer.cls.forward(g, q);
                let logits = g.add(seed.logits, dl);
                let ds = layer.shape.forward(g, q);
                let shape = g.add(base_shape, ds);
                let codes = g.concat_cols(&[c, shape]);
                steps.push(StepOutput {
                    kind: layer.kind,
                    block: m,
                    logits,
                    codes,
                    centers: c,
                    queries: q,
                });
            }
            let acc = g.add(q, q_in);
            q_in = if self.cfg.block_norm {
                self.block_norms[m].forward(g, acc)
            } else {
                acc
            };
            c_in = c;
        }
        let (logits, codes) = match steps.last() {
            Some(s) => (s.logits, s.codes),
            None => (seed.logits, seed.codes),
        };
        Ok(FusionOutput {
            steps,
            logits,
            codes,
            centers: c_in,
            queries: q_in,
            trace,
        })
    }

    fn decode(
        &self,
        g: &mut Graph,
        layer: &DecoderLayer,
        q: Var,
        centers: Var,
        inputs: &FusionInputs,
        embed: &CenterEmbedding,
    ) -> Result<Var> {
        let pos = embed.forward(g, centers);
        let x = layer.norm1.forward(g, q);
        let sa = layer.self_attn.forward(g, x, pos);
        let q = g.add(q, sa);
        let x = layer.norm2.forward(g, q);
        let query = g.add(x, pos);
        let at = g.value(centers).clone();
        let q = match &layer.cross {
            CrossAttention::Image(attn) => {
                let memory = inputs
                    .memory
                    .ok_or_else(|| Error::Shape("image decoder without image memory".into()))?;
                attn.forward(g, query, q, &at, memory, inputs.calibs)?
            }
            CrossAttention::Lidar(attn) => attn.forward(g, query, q, &at, inputs.bev_tokens, &inputs.layout)?,
        };
        let x = layer.norm3.forward(g, q);
        let f = layer.ffn.forward(g, x);
        Ok(g.add(q, f))
    }
}

/// One box per query: class by the highest sigmoid score, size from the
/// log-size codes, heading from the (sin, cos) pair.
pub fn predict_boxes(logits: &Tensor, codes: &Tensor) -> Vec<Box3D> {
    (0..logits.rows)
        .map(|r| {
            let (class, best) =
                logits.row(r).iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
                );
            let score = 1.0 / (1.0 + (-best).exp());
            decode_box(codes.row(r), class, score)
        })
        .collect()
}
