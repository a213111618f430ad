//! Detection metrics, the LiDAR-corruption robustness suite and the
//! ablation runner.
//!
//! Matching is greedy by BEV center distance, separately per class: detections
//! are visited by descending score and each takes the nearest unmatched
//! ground truth within the threshold.
//!
//! AP uses 101 recall points `r = k/100`. With `p(r)` the best precision
//! reached at any recall `>= r` (zero when `r` is never reached),
//! `AP = mean over k = 11..=100 of max(p(k/100) - 0.1, 0) / 0.9`.
//! Classes without ground truth are left out of the mean.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corruption::{BeamMode, BeamSelection, Corruption, CorruptionSpec};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D};
use crate::model::{Model, ModelConfig};
use crate::scene_synth::SceneSample;
use crate::trainer::{derive_seed, train_stage1, train_stage2, StepRecord, TrainConfig};

/// BEV center-distance thresholds, meters.
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold whose matches feed the true-positive error metrics.
pub const TP_THRESHOLD: f64 = 2.0;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;

/// For each detection (in the given order), the index of the ground truth
/// it matched. `dets` must be sorted by descending score.
pub fn match_dets_to_gt(dets: &[Box3D], gts: &[Box3D], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class_id != d.class_id {
                    continue;
                }
                let dist = d.center.dist_bev(&g.center);
                if dist <= threshold && best.is_none_or(|(_, b)| dist < b) {
                    best = Some((j, dist));
                }
            }
            let (j, _) = best?;
            taken[j] = true;
            Some(j)
        })
        .collect()
}

/// AP of one class at one threshold from score-ranked TP flags.
pub fn average_precision(scores: &[f64], tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || scores.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    // (true positives so far, precision) after each detection
    let mut curve = Vec::with_capacity(order.len());
    let mut hits = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if tp[i] {
            hits += 1;
        }
        curve.push((hits, hits as f64 / (rank + 1) as f64));
    }
    // envelope from the right
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let mut sum = 0.0;
    let mut cursor = 0;
    for k in first..=100 {
        // first point whose recall reaches k/100, compared in integers
        while cursor < curve.len() && 100 * curve[cursor].0 < k * num_gt {
            cursor += 1;
        }
        if cursor == curve.len() {
            break;
        }
        sum += (curve[cursor].1 - MIN_PRECISION).max(0.0) / (1.0 - MIN_PRECISION);
    }
    sum / (100 - first + 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    /// Mean BEV center distance, meters.
    pub ate: f64,
    /// Mean `1 - IoU` of the boxes aligned at a common center and heading.
    pub ase: f64,
    /// Mean absolute heading difference in `[0, π]`.
    pub aoe: f64,
    pub pairs: usize,
}

fn aligned_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (sa, sb) = (a.size, b.size);
    let inter = sa.w.min(sb.w) * sa.l.min(sb.l) * sa.h.min(sb.h);
    inter / (sa.w * sa.l * sa.h + sb.w * sb.l * sb.h - inter)
}

/// Error metrics over `(detection, ground truth)` pairs; `None` when empty.
pub fn tp_errors(pairs: &[(Box3D, Box3D)]) -> Option<TpErrors> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mut e = TpErrors {
        ate: 0.0,
        ase: 0.0,
        aoe: 0.0,
        pairs: pairs.len(),
    };
    for (d, g) in pairs {
        e.ate += d.center.dist_bev(&g.center) / n;
        e.ase += (1.0 - aligned_iou(d, g)) / n;
        e.aoe += wrap_angle(d.yaw - g.yaw).abs().min(PI) / n;
    }
    Some(e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    pub num_gt: usize,
    /// One entry per threshold; `None` when the class has no ground truth.
    pub ap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fingerprint: String,
    pub scenes: usize,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassAp>,
    pub map: f64,
    pub map_by_threshold: Vec<f64>,
    pub tp: Option<TpErrors>,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.map_by_threshold[i])
    }
}

/// Scores per-scene detections against per-scene ground truth.
pub fn evaluate(
    dets: &[Vec<Box3D>],
    gts: &[Vec<Box3D>],
    class_names: &[String],
    label: &str,
    fingerprint: &str,
) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection sets for {} scenes",
            dets.len(),
            gts.len()
        )));
    }
    let nc = class_names.len();
    let mut classes = Vec::with_capacity(nc);
    let mut pairs = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let num_gt = gts.iter().map(|g| g.iter().filter(|b| b.class_id == c).count()).sum();
        let mut ap = Vec::with_capacity(DISTANCE_THRESHOLDS.len());
        for &t in &DISTANCE_THRESHOLDS {
            let mut scores = Vec::new();
            let mut tp = Vec::new();
            for (d, g) in dets.iter().zip(gts) {
                let mut dc: Vec<Box3D> = d.iter().filter(|b| b.class_id == c).copied().collect();
                dc.sort_by(|a, b| b.score.total_cmp(&a.score));
                let gc: Vec<Box3D> = g.iter().filter(|b| b.class_id == c).copied().collect();
                let m = match_dets_to_gt(&dc, &gc, t);
                for (det, hit) in dc.iter().zip(&m) {
                    scores.push(det.score);
                    tp.push(hit.is_some());
                    if t == TP_THRESHOLD {
                        if let Some(j) = hit {
                            pairs.push((*det, gc[*j]));
                        }
                    }
                }
            }
            ap.push((num_gt > 0).then(|| average_precision(&scores, &tp, num_gt)));
        }
        classes.push(ClassAp {
            name: name.clone(),
            num_gt,
            ap,
        });
    }
    let map_by_threshold: Vec<f64> = (0..DISTANCE_THRESHOLDS.len())
        .map(|i| {
            let v: Vec<f64> = classes.iter().filter_map(|c| c.ap[i]).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    let map = map_by_threshold.iter().sum::<f64>() / map_by_threshold.len() as f64;
    Ok(EvalReport {
        label: label.to_string(),
        fingerprint: fingerprint.to_string(),
        scenes: dets.len(),
        thresholds: DISTANCE_THRESHOLDS.to_vec(),
        classes,
        map,
        map_by_threshold,
        tp: tp_errors(&pairs),
    })
}

/// Which head of a trained model produces the detections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Fusion,
    Proposal,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Fusion => "fusion",
            Head::Proposal => "stage1",
        }
    }
}

/// Corrupts each scene's cloud with a per-scene stream derived from the
/// spec's seed.
pub fn corrupt_scene(sample: &SceneSample, spec: &CorruptionSpec) -> Result<SceneSample> {
    let per_scene = CorruptionSpec {
        seed: derive_seed(spec.seed, &[sample.index]),
        ..*spec
    };
    let mut out = sample.clone();
    out.cloud = per_scene.apply(&sample.cloud)?;
    Ok(out)
}

/// Runs `model` over `data` (optionally corrupted) and scores it.
pub fn evaluate_model(
    model: &Model,
    data: &[SceneSample],
    head: Head,
    corruption: Option<&CorruptionSpec>,
    class_names: &[String],
    label: &str,
    fingerprint: &str,
) -> Result<EvalReport> {
    if class_names.len() != model.cfg.num_classes {
        return Err(Error::Config(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.cfg.num_classes
        )));
    }
    let mut dets = Vec::with_capacity(data.len());
    for s in data {
        let dets_s = match corruption {
            Some(spec) => model.detect(&corrupt_scene(s, spec)?, head == Head::Fusion)?,
            None => model.detect(s, head == Head::Fusion)?,
        };
        dets.push(dets_s);
    }
    let gts: Vec<Vec<Box3D>> = data.iter().map(|s| s.gt_boxes.clone()).collect();
    evaluate(&dets, &gts, class_names, label, fingerprint)
}

/// The evaluation protocols: clean, two beam modes, three point ratios and
/// four FOV half-angles.
pub fn robustness_protocols(seed: u64) -> Vec<(String, Option<CorruptionSpec>)> {
    let spec = |corruption| CorruptionSpec {
        corruption,
        seed,
        selection: BeamSelection::ByBeamIndex,
    };
    let mut out = vec![("clean".to_string(), None)];
    let mut kinds = vec![Corruption::Beams(BeamMode::Beam16), Corruption::Beams(BeamMode::Beam4)];
    kinds.extend([0.5, 0.25, 0.125].map(Corruption::Ratio));
    kinds.extend([5.0 * PI / 6.0, 2.0 * PI / 3.0, PI / 2.0, PI / 3.0].map(Corruption::Fov));
    for k in kinds {
        let s = spec(k);
        out.push((s.label(), Some(s)));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub head: Head,
    pub protocol: String,
    pub corruption: Option<Corruption>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub fingerprint: String,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn find(&self, head: Head, protocol: &str) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.head == head && r.protocol == protocol)
    }
}

/// Evaluates the fused model and its own proposal head under every
/// protocol, without retraining.
pub fn robustness_suite(
    model: &Model,
    data: &[SceneSample],
    class_names: &[String],
    seed: u64,
    fingerprint: &str,
) -> Result<RobustnessReport> {
    let mut rows = Vec::new();
    for head in [Head::Fusion, Head::Proposal] {
        for (protocol, spec) in robustness_protocols(seed) {
            let label = format!("{} {protocol}", head.name());
            let report = evaluate_model(model, data, head, spec.as_ref(), class_names, &label, fingerprint)?;
            rows.push(RobustnessRow {
                head,
                protocol,
                corruption: spec.map(|s| s.corruption),
                report,
            });
        }
    }
    Ok(RobustnessReport {
        fingerprint: fingerprint.to_string(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub model: ModelConfig,
}

/// Component toggles, decoding orders, encoder depths and block counts
/// around `base`.
pub fn standard_variants(base: &ModelConfig) -> Vec<AblationVariant> {
    let blocks = base.fusion.blocks().len().max(1);
    let with = |name: String, f: &dyn Fn(&mut ModelConfig)| {
        let mut model = base.clone();
        f(&mut model);
        AblationVariant { name, model }
    };
    let mut out = vec![
        with("a) proposal only".into(), &|m| m.fusion.order = String::new()),
        with("b) CDB".into(), &|m| {
            m.fusion.encoder_layers = 0;
            m.proposal.point_select.enabled_in_training = false;
        }),
        with("c) CDB+IFE".into(), &|m| {
            m.proposal.point_select.enabled_in_training = false
        }),
        with("d) CDB+PSE".into(), &|m| m.fusion.encoder_layers = 0),
        with("e) CDB+IFE+PSE".into(), &|_| {}),
    ];
    for order in [
        format!("(CL){blocks}"),
        format!("(LC){blocks}"),
        format!("{blocks}C{blocks}L"),
        format!("{blocks}L{blocks}C"),
    ] {
        out.push(with(format!("order {order}"), &|m| m.fusion.order = order.clone()));
    }
    for layers in 1..=3 {
        out.push(with(format!("encoder layers {layers}"), &|m| {
            m.fusion.encoder_layers = layers
        }));
    }
    for b in 2..=4 {
        out.push(with(format!("blocks {b}"), &|m| m.fusion.order = format!("(CL){b}")));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub order: String,
    pub encoder_layers: usize,
    pub point_select: bool,
    /// Mean loss over the last optimizer steps of the fusion stage.
    pub final_loss: Option<f64>,
    pub report: EvalReport,
}

/// Trains the proposal stage once, then the fusion stage of every variant
/// from that shared starting point, and evaluates each on `val`.
pub fn ablation_suite(
    base: &ModelConfig,
    train: &TrainConfig,
    train_data: &[SceneSample],
    val_data: &[SceneSample],
    variants: &[AblationVariant],
    class_names: &[String],
    fingerprint: &str,
    on_step: &mut dyn FnMut(&str, &StepRecord),
) -> Result<Vec<AblationRow>> {
    let mut stage1 = Model::new(base)?;
    train_stage1(&mut stage1, train_data, train, &mut |r| on_step("stage1", r))?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut model = Model::new(&v.model)?;
        model.load_stage1(&stage1)?;
        let mut final_loss = None;
        if model.decoder_blocks() > 0 {
            let recs = train_stage2(&mut model, train_data, train, &mut |r| on_step(&v.name, r))?;
            let tail = &recs[recs.len().saturating_sub(5)..];
            if !tail.is_empty() {
                final_loss = Some(tail.iter().map(|r| r.loss.total).sum::<f64>() / tail.len() as f64);
            }
        }
        let report = evaluate_model(&model, val_data, Head::Fusion, None, class_names, &v.name, fingerprint)?;
        rows.push(AblationRow {
            name: v.name.clone(),
            order: v.model.fusion.order.clone(),
            encoder_layers: v.model.fusion.encoder_layers,
            point_select: v.model.proposal.point_select.enabled_in_training,
            final_loss,
            report,
        });
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Plain-text rendering of one report.
pub fn render_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} ({} scenes, fingerprint {})", r.label, r.scenes, r.fingerprint);
    let _ = write!(s, "{:<12}{:>6}", "class", "gts");
    for t in &r.thresholds {
        let _ = write!(s, "{:>10}", format!("AP@{t}m"));
    }
    s.push('\n');
    for c in &r.classes {
        let _ = write!(s, "{:<12}{:>6}", c.name, c.num_gt);
        for a in &c.ap {
            let _ = write!(s, "{:>10}", fmt_opt(*a));
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<18}", "mAP");
    for m in &r.map_by_threshold {
        let _ = write!(s, "{m:>10.4}");
    }
    let _ = writeln!(s, "\nmAP (all thresholds) {:.4}", r.map);
    match &r.tp {
        Some(tp) => {
            let _ = writeln!(
                s,
                "mATE {:.4}  mASE {:.4}  mAOE {:.4}  ({} matches at {TP_THRESHOLD} m)",
                tp.ate, tp.ase, tp.aoe, tp.pairs
            );
        }
        None => s.push_str("mATE -  mASE -  mAOE -  (no matches)\n"),
    }
    s.push_str("NDS is not reported: velocity and attribute errors need labels the synthetic data lacks.\n");
    s
}

/// One line per row: label, mAP, mAP at 2 m and the error metrics.
pub fn render_rows<'a>(rows: impl IntoIterator<Item = &'a EvalReport>) -> String {
    let mut s = format!(
        "{:<28}{:>8}{:>10}{:>8}{:>8}{:>8}\n",
        "row", "mAP", "mAP@2m", "mATE", "mASE", "mAOE"
    );
    for r in rows {
        let tp = r.tp;
        let _ = writeln!(
            s,
            "{:<28}{:>8.4}{:>10}{:>8}{:>8}{:>8}",
            r.label,
            r.map,
            fmt_opt(r.map_at(TP_THRESHOLD)),
            fmt_opt(tp.map(|t| t.ate)),
            fmt_opt(tp.map(|t| t.ase)),
            fmt_opt(tp.map(|t| t.aoe)),
        );
    }
    s
}
