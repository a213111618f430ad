//! Stage-1 proposals: a class heatmap over the BEV map, top-N peak
//! selection, per-query box regression, and the query initialization terms
//! (projected features, center embedding, point-select enhancement).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::BevLayout;
use crate::error::{Error, Result};
use crate::geometry::{BevExtent, Box3D, Point3, BOX_CODE};
use crate::nn::{Activation, Conv, Linear, Mlp, ParamStore};
use crate::scene_synth::PointCloud;
use crate::tensor::Tensor;

/// Initial heatmap logit, `-ln((1 - 0.1) / 0.1)`.
pub const HEAT_PRIOR_BIAS: f64 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointSelectiveConfig {
    /// Points drawn per box.
    pub points: usize,
    pub enabled_in_training: bool,
}

impl Default for PointSelectiveConfig {
    fn default() -> Self {
        Self {
            points: 25,
            enabled_in_training: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub num_queries: usize,
    /// Gaussian target radius: minimum IoU kept under a corner shift.
    pub min_overlap: f64,
    pub min_radius: usize,
    pub point_select: PointSelectiveConfig,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            num_queries: 50,
            min_overlap: 0.1,
            min_radius: 1,
            point_select: PointSelectiveConfig::default(),
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be at least 1".into()));
        }
        if self.point_select.points == 0 {
            return Err(Error::Config("point_select.points must be at least 1".into()));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap < 1.0) {
            return Err(Error::Config("min_overlap must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Proposal output. `codes` rows are box codes whose first three columns
/// equal `centers`.
#[derive(Clone, Debug)]
pub struct QueryState {
    pub cells: Vec<usize>,
    /// Projected BEV features, `N × d`.
    pub features: Var,
    pub centers: Var,
    pub codes: Var,
    pub logits: Var,
    /// Per-class heatmap logits, `C × H·W`.
    pub heatmap: Var,
}

/// Heatmap head, box regression from the selected cells, and the query
/// projection.
#[derive(Clone, Debug)]
pub struct ProposalHead {
    heat_hidden: Conv,
    heat_out: Conv,
    reg: Mlp,
    proj: Linear,
    pub layout: BevLayout,
    pub num_classes: usize,
    pub z_range: (f64, f64),
}

impl ProposalHead {
    /// Heatmap and regression live under `proposal.`; the projection into
    /// query space is `query.proj`.
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        num_classes: usize,
        layout: BevLayout,
        z_range: (f64, f64),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let heat_hidden = Conv::new(store, "proposal.heat.0", d, d, 3, 1, rng);
        let heat_out = Conv::new(store, "proposal.heat.1", d, num_classes, 1, 1, rng);
        store.value_mut(heat_out.w).scale_assign(0.1);
        store.value_mut(heat_out.b).data.fill(HEAT_PRIOR_BIAS);
        let reg = Mlp::new(store, "proposal.reg", &[d, d, BOX_CODE], Activation::Relu, false, rng);
        store.value_mut(reg.last().w).scale_assign(0.1);
        let prior = [0.0, 0.0, -1.0, 1.6f64.ln(), 3.5f64.ln(), 1.6f64.ln(), 0.0, 1.0];
        store.value_mut(reg.last().b).data.copy_from_slice(&prior);
        let proj = Linear::new(store, "query.proj", d, d, rng);
        Self {
            heat_hidden,
            heat_out,
            reg,
            proj,
            layout,
            num_classes,
            z_range,
        }
    }

    pub fn heatmap(&self, g: &mut Graph, bev: Var) -> Var {
        let (h, w) = (self.layout.height, self.layout.width);
        let (x, _, _) = self.heat_hidden.forward(g, bev, h, w);
        let x = g.relu(x);
        self.heat_out.forward(g, x, h, w).0
    }

    /// Runs the heatmap, picks `n` cells, and regresses their boxes.
    pub fn propose(&self, g: &mut Graph, bev: Var, n: usize) -> Result<QueryState> {
        let cells_total = self.layout.cells();
        if n > cells_total {
            return Err(Error::Shape(format!(
                "{n} queries requested from {cells_total} BEV cells"
            )));
        }
        if g.value(bev).shape().1 != cells_total {
            return Err(Error::Shape("BEV map does not match the proposal layout".into()));
        }
        let heatmap = self.heatmap(g, bev);
        let scores = class_max(g.value(heatmap));
        let cells = select_peaks(&scores, self.layout.height, self.layout.width, n)?;
        for &c in &cells {
            g.note_branch(c as u64);
        }

        let c = self.num_classes;
        let idx: Vec<usize> = cells
            .iter()
            .flat_map(|&cell| (0..c).map(move |k| k * cells_total + cell))
            .collect();
        let logits = g.gather_elems(heatmap, &idx);
        let logits = g.reshape(logits, n, c);

        let tokens = g.transpose(bev);
        let feats = g.gather_rows(tokens, &cells);
        let raw = self.reg.forward(g, feats);
        let mut offset = Tensor::zeros(n, BOX_CODE);
        for (i, &cell) in cells.iter().enumerate() {
            let (x, y) = self.layout.cell_center(cell);
            offset.set(i, 0, x);
            offset.set(i, 1, y);
        }
        let codes = g.add_const(raw, &offset);
        let codes = clamp_xyz(g, codes, &self.layout.extent, self.z_range);
        let centers = g.slice_cols(codes, 0, 3);
        let features = self.proj.forward(g, feats);
        Ok(QueryState {
            cells,
            features,
            centers,
            codes,
            logits,
            heatmap,
        })
    }
}

/// Clamps the first three columns (x, y, z) of `v` to the detection
/// volume; remaining columns pass through.
pub fn clamp_xyz(g: &mut Graph, v: Var, extent: &BevExtent, z_range: (f64, f64)) -> Var {
    let cols = g.value(v).cols;
    let x = g.slice_cols(v, 0, 1);
    let x = g.clamp(x, extent.x_min, extent.x_max);
    let y = g.slice_cols(v, 1, 1);
    let y = g.clamp(y, extent.y_min, extent.y_max);
    let z = g.slice_cols(v, 2, 1);
    let z = g.clamp(z, z_range.0, z_range.1);
    let mut parts = vec![x, y, z];
    if cols > 3 {
        parts.push(g.slice_cols(v, 3, cols - 3));
    }
    g.concat_cols(&parts)
}

/// Best class logit per cell of a `C × H·W` heatmap.
pub fn class_max(heat: &Tensor) -> Vec<f64> {
    (0..heat.cols)
        .map(|j| (0..heat.rows).map(|c| heat.get(c, j)).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// `n` cell indices of an `h × w` score map: cells that are maxima of
/// their 3×3 neighborhood first, then the rest, each group ordered by
/// score (descending) and index (ascending).
pub fn select_peaks(scores: &[f64], h: usize, w: usize, n: usize) -> Result<Vec<usize>> {
    if scores.len() != h * w {
        return Err(Error::Shape("score map size mismatch".into()));
    }
    if n > scores.len() {
        return Err(Error::Shape(format!("{n} peaks requested from {} cells", scores.len())));
    }
    let is_peak = |i: usize| {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        (-1..=1).all(|dr| {
            (-1..=1).all(|dc| {
                let (rr, cc) = (r + dr, c + dc);
                rr < 0
                    || cc < 0
                    || rr >= h as isize
                    || cc >= w as isize
                    || scores[rr as usize * w + cc as usize] <= scores[i]
            })
        })
    };
    let mut order: Vec<(bool, usize)> = (0..scores.len()).map(|i| (!is_peak(i), i)).collect();
    order.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(scores[b.1].total_cmp(&scores[a.1]))
            .then(a.1.cmp(&b.1))
    });
    Ok(order.into_iter().take(n).map(|(_, i)| i).collect())
}

/// Radius (in cells) that keeps IoU ≥ `min_overlap` under any corner
/// shift of a `height × width` box.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let b1 = height + width;
    let c1 = width * height * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - o) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (height + width);
    let c3 = (o - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Per-class Gaussian heatmap targets (`C × H·W`), peaking at exactly 1 in
/// the cell holding each box center.
pub fn heatmap_targets(
    boxes: &[Box3D],
    num_classes: usize,
    layout: &BevLayout,
    min_overlap: f64,
    min_radius: usize,
) -> Tensor {
    let (h, w) = (layout.height, layout.width);
    let mut heat = Tensor::zeros(num_classes, h * w);
    for b in boxes {
        let Some(cell) = layout.cell_of(b.center.x, b.center.y) else {
            continue;
        };
        if b.class_id >= num_classes {
            continue;
        }
        let radius = gaussian_radius(b.size.l / layout.resolution, b.size.w / layout.resolution, min_overlap);
        let r = (radius.floor() as usize).max(min_radius) as isize;
        let sigma = (2 * r + 1) as f64 / 6.0;
        let (cr, cc) = ((cell / w) as isize, (cell % w) as isize);
        let row = heat.row_mut(b.class_id);
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc2) = (cr + dr, cc + dc);
                if rr < 0 || cc2 < 0 || rr >= h as isize || cc2 >= w as isize {
                    continue;
                }
                let v = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                let slot = &mut row[rr as usize * w + cc2 as usize];
                *slot = slot.max(v);
            }
        }
    }
    heat
}

/// Pointwise MLP over box-relative points, max-pooled per box.
#[derive(Clone, Debug)]
pub struct PointSelect {
    mlp: Mlp,
}

impl PointSelect {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, &[3, d, d], Activation::Relu, false, rng),
        }
    }

    /// `points` is `(N·Z) × 3`, grouped per box; returns `N × d`.
    pub fn forward(&self, g: &mut Graph, points: &Tensor, z: usize) -> Var {
        let x = g.constant(points.clone());
        let per_point = self.mlp.forward(g, x);
        g.max_row_groups(per_point, z)
    }

    /// Samples points for `boxes` from `cloud` with `seed` and pools them.
    /// Offsets are taken from `centers` (`N × 3`, rows matching `boxes`)
    /// inside the graph.
    pub fn augment(
        &self,
        g: &mut Graph,
        boxes: &[Box3D],
        centers: Var,
        cloud: &PointCloud,
        z: usize,
        seed: u64,
    ) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = pick_box_points(boxes, cloud, z, &mut rng);
        let mut abs = Tensor::zeros(boxes.len() * z, 3);
        let mut mask = Tensor::zeros(boxes.len() * z, 3);
        let mut rows = Vec::with_capacity(boxes.len() * z);
        for (i, pts) in picked.iter().enumerate() {
            for k in 0..z {
                rows.push(i);
                if let Some(p) = pts.as_ref().map(|v| v[k]) {
                    abs.row_mut(i * z + k).copy_from_slice(&[p.x, p.y, p.z]);
                    mask.row_mut(i * z + k).fill(1.0);
                    g.note_branch(((i as u64) << 40) ^ (p.x.to_bits() ^ p.y.to_bits().rotate_left(21)));
                } else {
                    g.note_branch(!(i as u64));
                }
            }
        }
        let at = g.gather_rows(centers, &rows);
        let at = g.mul_const(at, mask);
        let x = g.constant(abs);
        let x = g.sub(x, at);
        let per_point = self.mlp.forward(g, x);
        g.max_row_groups(per_point, z)
    }
}

/// `z` interior points per box in ego coordinates, or `None` for a box
/// with no interior points.
fn pick_box_points(boxes: &[Box3D], cloud: &PointCloud, z: usize, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<Point3>>> {
    boxes
        .iter()
        .map(|b| {
            let reach = 0.5 * b.size.w.hypot(b.size.l);
            let inside: Vec<Point3> = cloud
                .points
                .iter()
                .map(|p| p.position())
                .filter(|p| {
                    let (dx, dy) = (p.x - b.center.x, p.y - b.center.y);
                    dx * dx + dy * dy <= reach * reach && b.contains(*p)
                })
                .collect();
            if inside.is_empty() {
                return None;
            }
            let picks: Vec<usize> = if inside.len() >= z {
                sample(rng, inside.len(), z).into_vec()
            } else {
                (0..z).map(|_| rng.random_range(0..inside.len())).collect()
            };
            Some(picks.into_iter().map(|j| inside[j]).collect())
        })
        .collect()
}

/// `z` interior points per box, relative to the box center; without
/// replacement when enough exist, with replacement otherwise, and the
/// center itself (all zeros) for an empty box.
pub fn sample_box_points(boxes: &[Box3D], cloud: &PointCloud, z: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = Tensor::zeros(boxes.len() * z, 3);
    for (i, (b, picked)) in boxes.iter().zip(pick_box_points(boxes, cloud, z, rng)).enumerate() {
        for (k, p) in picked.iter().flatten().enumerate() {
            out.row_mut(i * z + k)
                .copy_from_slice(&[p.x - b.center.x, p.y - b.center.y, p.z - b.center.z]);
        }
    }
    out
}

/// MLP over centers scaled to roughly unit range.
#[derive(Clone, Debug)]
pub struct CenterEmbedding {
    mlp: Mlp,
    scale: [f64; 3],
}

impl CenterEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, scale: [f64; 3], rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, &[3, d, d], Activation::Relu, false, rng),
            scale,
        }
    }

    pub fn forward(&self, g: &mut Graph, centers: Var) -> Var {
        let n = g.value(centers).rows;
        let mut k = Tensor::zeros(n, 3);
        for r in 0..n {
            k.row_mut(r).copy_from_slice(&self.scale);
        }
        let x = g.mul_const(centers, k);
        self.mlp.forward(g, x)
    }
}

/// Sum of the projected features, the optional point-select term, and the
/// center embedding.
pub fn init_queries(g: &mut Graph, projected: Var, point_select: Option<Var>, center: Var) -> Result<Var> {
    let shape = g.value(projected).shape();
    let mut terms = vec![projected, center];
    terms.extend(point_select);
    for &t in &terms[1..] {
        if g.value(t).shape() != shape {
            return Err(Error::Shape(format!(
                "query terms disagree: {:?} vs {:?}",
                shape,
                g.value(t).shape()
            )));
        }
    }
    Ok(g.add_n(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::VoxelGridConfig;
    use crate::geometry::BoxSize;
    use crate::scene_synth::LidarPoint;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn layout() -> BevLayout {
        VoxelGridConfig::default().layout(2)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn unit_box(x: f64, y: f64) -> Box3D {
        Box3D::new(Point3::new(x, y, 0.0), BoxSize { w: 2.0, l: 4.0, h: 1.5 }, 0.0, 0)
    }

    #[test]
    fn top_n_matches_exhaustive_sort() {
        #[rustfmt::skip]
        let s = [
            0.1, 0.9, 0.2, 0.3, 0.0,
            0.4, 0.5, 0.1, 0.8, 0.2,
            0.0, 0.2, 0.7, 0.1, 0.3,
            0.6, 0.1, 0.2, 0.0, 0.95,
            0.3, 0.2, 0.1, 0.4, 0.5,
        ];
        let peaks_oracle = {
            let mut v: Vec<usize> = (0..25)
                .filter(|&i| {
                    let (r, c): (usize, usize) = (i / 5, i % 5);
                    let mut ok = true;
                    for rr in r.saturating_sub(1)..=(r + 1).min(4) {
                        for cc in c.saturating_sub(1)..=(c + 1).min(4) {
                            ok &= s[rr * 5 + cc] <= s[i];
                        }
                    }
                    ok
                })
                .collect();
            v.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
            v
        };
        assert_eq!(peaks_oracle, vec![19, 1, 8, 15]);
        for n in 1..=4 {
            assert_eq!(select_peaks(&s, 5, 5, n).unwrap(), peaks_oracle[..n].to_vec());
        }
        let all = select_peaks(&s, 5, 5, 25).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..25).collect::<Vec<_>>());
        assert_eq!(all[4..7], [12, 6, 24]);
        assert!(select_peaks(&s, 5, 5, 26).is_err());
    }

    proptest! {
        #[test]
        fn peaks_precede_and_are_sorted(vals in proptest::collection::vec(0.0f64..1.0, 36), n in 1usize..36) {
            let sel = select_peaks(&vals, 6, 6, n).unwrap();
            prop_assert_eq!(sel.len(), n);
            let mut seen = sel.clone();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
            // the global maximum is always a peak and comes first
            let best = (0..36).max_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(b.cmp(&a))).unwrap();
            prop_assert_eq!(sel[0], best);
        }
    }

    #[test]
    fn dominant_object_cell_is_selected() {
        let lay = layout();
        let mut store = ParamStore::new();
        let head = ProposalHead::new(&mut store, 8, 3, lay, (-3.0, 3.0), &mut rng());
        let mut g = Graph::with_params(&store);
        let mut bev = Tensor::zeros(8, lay.cells());
        let target = lay.cell_of(5.0, -3.0).unwrap();
        // a strong feature at one cell; force the heatmap to respond to it
        for c in 0..8 {
            bev.set(c, target, 50.0);
        }
        let x = g.input(bev);
        let q = head.propose(&mut g, x, 10).unwrap();
        let heat = g.value(q.heatmap).clone();
        let best = class_max(&heat)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(q.cells[0], best);
        assert_eq!(g.value(q.features).shape(), (10, 8));
        assert_eq!(g.value(q.centers).shape(), (10, 3));
        assert_eq!(g.value(q.codes).shape(), (10, BOX_CODE));
        assert_eq!(g.value(q.logits).shape(), (10, 3));
        for k in 0..3 {
            assert_eq!(g.value(q.logits).get(0, k), heat.get(k, q.cells[0]));
        }
    }

    #[test]
    fn too_many_queries_is_an_error() {
        let lay = BevLayout {
            height: 2,
            width: 2,
            ..layout()
        };
        let mut store = ParamStore::new();
        let head = ProposalHead::new(&mut store, 4, 2, lay, (-3.0, 3.0), &mut rng());
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::zeros(4, 4));
        assert!(head.propose(&mut g, x, 5).is_err());
        assert!(head.propose(&mut g, x, 4).is_ok());
    }

    #[test]
    fn initial_centers_sit_on_cells() {
        let lay = layout();
        let mut store = ParamStore::new();
        let head = ProposalHead::new(&mut store, 8, 3, lay, (-3.0, 3.0), &mut rng());
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::zeros(8, lay.cells()));
        let q = head.propose(&mut g, x, 4).unwrap();
        for (i, &cell) in q.cells.iter().enumerate() {
            let (cx, cy) = lay.cell_center(cell);
            assert_abs_diff_eq!(g.value(q.centers).get(i, 0), cx, epsilon = 1e-12);
            assert_abs_diff_eq!(g.value(q.centers).get(i, 1), cy, epsilon = 1e-12);
            assert_abs_diff_eq!(g.value(q.centers).get(i, 2), -1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn radius_matches_hand_computation() {
        // 4×2 box, overlap 0.7: r1 = (6 + sqrt(36 - 4·8·0.3/1.7))/2
        let r1 = (6.0 + (36.0f64 - 4.0 * 8.0 * 0.3 / 1.7).sqrt()) / 2.0;
        let r2 = (12.0 + (144.0f64 - 16.0 * 0.3 * 8.0).sqrt()) / 2.0;
        let r3 = (-8.4 + (8.4f64 * 8.4 + 4.0 * 2.8 * 0.3 * 8.0).sqrt()) / 2.0;
        assert_abs_diff_eq!(gaussian_radius(4.0, 2.0, 0.7), r1.min(r2).min(r3), epsilon = 1e-12);
        assert_abs_diff_eq!(gaussian_radius(4.0, 2.0, 0.7), 0.7355850717, epsilon = 1e-9);
    }

    #[test]
    fn heatmap_target_peaks_at_center_cell() {
        let lay = layout();
        let b = Box3D::new(Point3::new(3.1, -7.4, 0.0), BoxSize { w: 1.9, l: 4.5, h: 1.6 }, 0.3, 1);
        let heat = heatmap_targets(&[b], 3, &lay, 0.1, 1);
        let cell = lay.cell_of(3.1, -7.4).unwrap();
        assert_eq!(heat.get(1, cell), 1.0);
        assert_eq!(heat.row(0).iter().sum::<f64>(), 0.0);
        assert!(heat.get(1, cell + 1) > 0.0 && heat.get(1, cell + 1) < 1.0);
        assert_eq!(heat.row(1).iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn point_select_pools_with_max() {
        let mut store = ParamStore::new();
        let pse = PointSelect::new(&mut store, "pse", 4, &mut rng());
        let mut g = Graph::with_params(&store);
        let p = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.1]; 5]);
        let pooled = pse.forward(&mut g, &p, 5);
        let one = g.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.1]]));
        let single = pse.mlp.forward(&mut g, one);
        assert_eq!(g.value(pooled), g.value(single));

        let rows = g.input(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 5.0]]));
        let m = g.max_row_groups(rows, 2);
        assert_eq!(g.value(m).data, vec![1.0, 5.0]);
    }

    #[test]
    fn empty_box_falls_back_to_center() {
        let mut store = ParamStore::new();
        let pse = PointSelect::new(&mut store, "pse", 4, &mut rng());
        let cloud = PointCloud::from_points(vec![LidarPoint::at(Point3::new(30.0, 30.0, 0.0))], 1);
        let mut g = Graph::with_params(&store);
        let b = unit_box(0.0, 0.0);
        let c = g.constant(Tensor::from_rows(&[vec![b.center.x, b.center.y, b.center.z]]));
        let pooled = pse.augment(&mut g, &[b], c, &cloud, 7, 1);
        let zero = g.constant(Tensor::zeros(1, 3));
        let f0 = pse.mlp.forward(&mut g, zero);
        assert_eq!(g.value(pooled), g.value(f0));
    }

    #[test]
    fn in_graph_offsets_match_sampled_offsets() {
        let mut store = ParamStore::new();
        let pse = PointSelect::new(&mut store, "pse", 4, &mut rng());
        let b = unit_box(2.0, -1.0);
        let pts: Vec<_> = (0..12)
            .map(|i| LidarPoint::at(Point3::new(1.6 + 0.07 * i as f64, -0.8, 0.1)))
            .collect();
        let cloud = PointCloud::from_points(pts, 1);
        let mut g = Graph::with_params(&store);
        let c = g.input(Tensor::from_rows(&[vec![b.center.x, b.center.y, b.center.z]]));
        let pooled = pse.augment(&mut g, &[b], c, &cloud, 5, 4);
        let rel = sample_box_points(&[b], &cloud, 5, &mut ChaCha8Rng::seed_from_u64(4));
        let direct = pse.forward(&mut g, &rel, 5);
        let (a, d) = (g.value(pooled).clone(), g.value(direct).clone());
        for (x, y) in a.data.iter().zip(&d.data) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let s = g.sum_all(pooled);
        g.backward(s);
        assert!(g.grad(c).is_some_and(|t| t.data.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn sampling_draws_interior_points() {
        let pts: Vec<_> = (0..40)
            .map(|i| LidarPoint::at(Point3::new(-1.5 + 0.07 * i as f64, 0.2, 0.1)))
            .chain((0..10).map(|i| LidarPoint::at(Point3::new(10.0 + i as f64, 0.0, 0.0))))
            .collect();
        let cloud = PointCloud::from_points(pts, 1);
        let b = unit_box(0.0, 0.0);
        let few = PointCloud::from_points(cloud.points[..3].to_vec(), 1);
        for (c, z) in [(&cloud, 25), (&few, 25), (&cloud, 3)] {
            let t = sample_box_points(&[b], c, z, &mut rng());
            assert_eq!(t.shape(), (z, 3));
            for r in 0..z {
                let p = Point3::new(t.get(r, 0), t.get(r, 1), t.get(r, 2));
                assert!(b.contains(Point3::new(p.x, p.y, p.z)));
                assert_abs_diff_eq!(p.y, 0.2, epsilon = 1e-6);
            }
        }
        // without replacement when enough candidates exist
        let t = sample_box_points(&[b], &cloud, 25, &mut rng());
        let mut xs: Vec<i64> = (0..25).map(|r| (t.get(r, 0) * 1e4).round() as i64).collect();
        xs.sort();
        xs.dedup();
        assert_eq!(xs.len(), 25);
    }

    #[test]
    fn pooling_ignores_order_and_grows_with_dominant_points() {
        let mut store = ParamStore::new();
        let pse = PointSelect::new(&mut store, "pse", 6, &mut rng());
        let mut g = Graph::with_params(&store);
        let rows = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 0.0], vec![0.7, -0.4, 0.2]];
        let mut rev = rows.clone();
        rev.reverse();
        let a = pse.forward(&mut g, &Tensor::from_rows(&rows), 3);
        let b = pse.forward(&mut g, &Tensor::from_rows(&rev), 3);
        assert_eq!(g.value(a), g.value(b));
        let mut more = rows.clone();
        more.push(vec![2.0, 2.0, 1.0]);
        let c = pse.forward(&mut g, &Tensor::from_rows(&more), 4);
        for (x, y) in g.value(a).data.iter().zip(&g.value(c).data) {
            assert!(y >= x);
        }
    }

    #[test]
    fn center_embedding_basics() {
        let mut store = ParamStore::new();
        let emb = CenterEmbedding::new(&mut store, "center", 5, [0.05, 0.05, 0.3], &mut rng());
        let mut g = Graph::with_params(&store);
        let c = g.input(Tensor::from_rows(&[vec![1.0, 2.0, -0.5], vec![1.0, 2.0, -0.5]]));
        let e = emb.forward(&mut g, c);
        assert_eq!(g.value(e).row(0), g.value(e).row(1));

        let mut zeroed = store.clone();
        for id in zeroed.ids().collect::<Vec<_>>() {
            zeroed.value_mut(id).data.fill(0.0);
        }
        let mut g = Graph::with_params(&zeroed);
        let c = g.input(Tensor::from_rows(&[vec![3.0, -2.0, 1.0]]));
        let e = emb.forward(&mut g, c);
        assert!(g.value(e).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_embedding_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let emb = CenterEmbedding::new(&mut store, "center", 6, [0.05, 0.05, 0.3], &mut rng());
        let centers = Tensor::from_rows(&[vec![3.3, -1.7, 0.4], vec![-8.1, 5.2, -1.1]]);
        let weights = Tensor::from_vec(2, 6, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let eval = |c: &Tensor| {
            let mut g = Graph::with_params(&store);
            let x = g.input(c.clone());
            let e = emb.forward(&mut g, x);
            let e = g.mul_const(e, weights.clone());
            let s = g.sum_all(e);
            g.backward(s);
            (g.scalar(s), g.grad(x).unwrap().clone())
        };
        let (_, grad) = eval(&centers);
        let h = 1e-6;
        for i in 0..centers.len() {
            let mut p = centers.clone();
            p.data[i] += h;
            let mut m = centers.clone();
            m.data[i] -= h;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
            let rel = (fd - grad.data[i]).abs() / fd.abs().max(grad.data[i].abs()).max(1e-8);
            assert!(
                rel <= 1e-4 || (fd - grad.data[i]).abs() < 1e-9,
                "elem {i}: {fd} vs {}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn init_queries_sums_terms() {
        let mut g = Graph::new();
        let qp = g.input(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]));
        let pe = g.input(Tensor::from_rows(&[vec![0.5; 4], vec![-1.0; 4]]));
        let ce = g.input(Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 1.0], vec![2.0; 4]]));
        let q = init_queries(&mut g, qp, Some(pe), ce).unwrap();
        assert_eq!(g.value(q).data, vec![1.5, 3.5, 3.5, 5.5, 6.0, 7.0, 8.0, 9.0]);
        let q = init_queries(&mut g, qp, None, ce).unwrap();
        assert_eq!(g.value(q).data, vec![1.0, 3.0, 3.0, 5.0, 7.0, 8.0, 9.0, 10.0]);
        let zero = g.input(Tensor::zeros(2, 4));
        let q = init_queries(&mut g, qp, Some(zero), zero).unwrap();
        assert_eq!(g.value(q), g.value(qp));
        let bad = g.input(Tensor::zeros(3, 4));
        assert!(init_queries(&mut g, qp, Some(bad), ce).is_err());
    }
}
