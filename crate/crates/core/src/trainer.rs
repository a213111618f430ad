//! Two-stage training: the LiDAR branch and proposal head first, then the
//! camera and fusion stack with the proposal side frozen.

use std::f64::consts::FRAC_PI_4;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{stage_loss, total_loss, CostWeights, StagePrediction};
use crate::autograd::{Graph, Var};
use crate::backbone::VoxelGridConfig;
use crate::corruption::{augmentation_mode, filter_beams, BeamMode, BeamSelection};
use crate::error::{Error, Result};
use crate::fusion::FusionOutput;
use crate::geometry::{Box3D, BoxSize, Point3, Rigid};
use crate::model::{Model, Pass};
use crate::nn::ParamId;
use crate::optim::{clip_grad_norm, lr_schedule, AdamW, OneCycle};
use crate::proposal::{heatmap_targets, QueryState};
use crate::scene_synth::{LidarPoint, SceneSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotations are drawn from `[-rotation, rotation]` radians.
    pub rotation: f64,
    pub scale: (f64, f64),
    pub flip: bool,
    /// Beam-reduction schedule during the fusion stage.
    pub randomized_beam: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation: FRAC_PI_4,
            scale: (0.9, 1.1),
            flip: true,
            randomized_beam: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub schedule: OneCycle,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub freeze_image_backbone: bool,
    pub heatmap_weight: f64,
    pub cost: CostWeights,
    pub augment: AugmentConfig,
    /// Caps optimizer steps per stage; 0 means no cap.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 10,
            stage2_epochs: 6,
            batch_size: 4,
            schedule: OneCycle::default(),
            weight_decay: 0.01,
            grad_clip: 10.0,
            seed: 0,
            freeze_image_backbone: true,
            heatmap_weight: 1.0,
            cost: CostWeights::default(),
            augment: AugmentConfig::default(),
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.schedule.max_lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.stage1_epochs == 0 {
            return Err(Error::Config("stage1_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.schedule.div > 0.0 && self.schedule.final_div > 0.0)
            || !(0.0..=1.0).contains(&self.schedule.warmup_frac)
        {
            return Err(Error::Config("one-cycle factors out of range".into()));
        }
        let (lo, hi) = self.schedule.momentum;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config("momentum range must satisfy 0 < low <= high < 1".into()));
        }
        let (a, b) = self.augment.scale;
        if !(a > 0.0 && a <= b) || !(self.augment.rotation >= 0.0) {
            return Err(Error::Config("augmentation ranges are invalid".into()));
        }
        self.cost.validate()
    }
}

/// One concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub rotation: f64,
    pub scale: f64,
    pub flip: bool,
    pub beams: BeamMode,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        rotation: 0.0,
        scale: 1.0,
        flip: false,
        beams: BeamMode::Full,
    };

    pub fn draw(cfg: &AugmentConfig, seed: u64) -> Augmentation {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotation = if cfg.rotation > 0.0 {
            rng.random_range(-cfg.rotation..=cfg.rotation)
        } else {
            0.0
        };
        let scale = if cfg.scale.1 > cfg.scale.0 {
            rng.random_range(cfg.scale.0..=cfg.scale.1)
        } else {
            cfg.scale.0
        };
        let flip = cfg.flip && rng.random::<bool>();
        Augmentation {
            rotation,
            scale,
            flip,
            beams: BeamMode::Full,
        }
    }
}

fn mirror_y() -> Rigid {
    Rigid {
        rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    }
}

fn mirror_x() -> Rigid {
    Rigid {
        rotation: [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    }
}

/// Applies `aug` to points, boxes, images and calibrations together:
/// beam reduction, then rotation about z, global scaling, and a mirror
/// across the x axis.
pub fn apply_augmentation(sample: &SceneSample, aug: &Augmentation) -> SceneSample {
    let mut out = sample.clone();
    out.cloud = filter_beams(&out.cloud, aug.beams, BeamSelection::ByBeamIndex);
    let rot = Rigid::rot_z(aug.rotation);
    let mirror = if aug.flip { mirror_y() } else { Rigid::identity() };
    let f = aug.scale;
    let map = |p: Point3| {
        let q = rot.apply(p);
        mirror.apply(Point3::new(q.x * f, q.y * f, q.z * f))
    };
    for p in &mut out.cloud.points {
        let q = map(p.position());
        *p = LidarPoint {
            x: q.x as f32,
            y: q.y as f32,
            z: q.z as f32,
            ..*p
        };
    }
    for b in &mut out.gt_boxes {
        let yaw = b.yaw + aug.rotation;
        *b = Box3D {
            center: map(b.center),
            size: BoxSize {
                w: b.size.w * f,
                l: b.size.l * f,
                h: b.size.h * f,
            },
            yaw: if aug.flip { -yaw } else { yaw },
            ..*b
        };
    }
    for (calib, img) in out.calibs.iter_mut().zip(&mut out.images) {
        let mut ext = calib.extrinsic.compose(&rot.inverse());
        ext.translation.iter_mut().for_each(|t| *t *= f);
        if aug.flip {
            ext = mirror_x().compose(&ext).compose(&mirror_y());
            calib.u0 = calib.image_w - calib.u0;
            *img = img.mirrored();
        }
        calib.extrinsic = ext;
    }
    out
}

/// Draws an augmentation from `seed` and applies it.
pub fn augment_sample(sample: &SceneSample, cfg: &AugmentConfig, seed: u64) -> SceneSample {
    apply_augmentation(sample, &Augmentation::draw(cfg, seed))
}

/// Drops ground truth whose center left the detection range.
pub fn filter_to_range(sample: &mut SceneSample, voxel: &VoxelGridConfig) {
    let e = voxel.extent();
    sample.gt_boxes.retain(|b| e.contains(b.center.x, b.center.y));
}

/// Which stage a loss or training run belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Proposal,
    Fusion,
}

impl Stage {
    fn id(self) -> u64 {
        match self {
            Stage::Proposal => 1,
            Stage::Fusion => 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub heatmap: f64,
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
}

/// Builds the training loss of one (already augmented) sample.
pub fn sample_loss(
    model: &Model,
    g: &mut Graph,
    sample: &SceneSample,
    stage: Stage,
    cfg: &TrainConfig,
    point_select_seed: u64,
) -> Result<(Var, LossParts)> {
    match stage {
        Stage::Proposal => {
            let out = model.forward(g, sample, Pass::Proposal)?;
            Ok(proposal_loss(model, g, &out.proposal, &sample.gt_boxes, cfg))
        }
        Stage::Fusion => {
            let out = model.forward(
                g,
                sample,
                Pass::Full {
                    point_select: Some(point_select_seed),
                },
            )?;
            let fusion = out
                .fusion
                .ok_or_else(|| Error::Config("the fusion stage needs at least one decoder block".into()))?;
            Ok(fusion_loss(model, g, &fusion, &sample.gt_boxes, cfg))
        }
    }
}

/// Normalized heatmap focal loss plus the matched set loss of the
/// proposals.
pub fn proposal_loss(
    model: &Model,
    g: &mut Graph,
    p: &QueryState,
    gts: &[Box3D],
    cfg: &TrainConfig,
) -> (Var, LossParts) {
    let mc = &model.cfg;
    let norm = 1.0 / gts.len().max(1) as f64;
    let target = heatmap_targets(
        gts,
        mc.num_classes,
        &model.layout,
        mc.proposal.min_overlap,
        mc.proposal.min_radius,
    );
    let heat = g.gaussian_focal(p.heatmap, &target, 2.0, 4.0);
    let heat = g.scale(heat, norm * cfg.heatmap_weight);
    let pred = StagePrediction {
        logits: p.logits,
        boxes: p.codes,
    };
    let (det, parts) = stage_loss(g, &pred, gts, &cfg.cost);
    let total = g.add(heat, det);
    let parts = LossParts {
        total: g.scalar(total),
        heatmap: g.scalar(heat),
        cls: parts.cls,
        reg: parts.reg,
        iou: parts.iou,
    };
    (total, parts)
}

/// Set loss over the decoder outputs: every layer under deep supervision,
/// else the last one.
pub fn fusion_loss(
    model: &Model,
    g: &mut Graph,
    fusion: &FusionOutput,
    gts: &[Box3D],
    cfg: &TrainConfig,
) -> (Var, LossParts) {
    let steps: Vec<StagePrediction> = if model.cfg.fusion.deep_supervision {
        fusion
            .steps
            .iter()
            .map(|s| StagePrediction {
                logits: s.logits,
                boxes: s.codes,
            })
            .collect()
    } else {
        vec![StagePrediction {
            logits: fusion.logits,
            boxes: fusion.codes,
        }]
    };
    let (total, parts) = total_loss(g, &steps, gts, &cfg.cost);
    let k = parts.len() as f64;
    let parts = LossParts {
        total: g.scalar(total),
        heatmap: 0.0,
        cls: parts.iter().map(|p| p.cls).sum::<f64>() / k,
        reg: parts.iter().map(|p| p.reg).sum::<f64>() / k,
        iou: parts.iter().map(|p| p.iou).sum::<f64>() / k,
    };
    (total, parts)
}

/// One optimizer step's log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub beams: BeamMode,
    pub loss: LossParts,
}

/// SplitMix64 finalizer over a sequence of words.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(x << 6)
            .wrapping_add(x >> 2);
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

fn stage_steps(n: usize, epochs: usize, cfg: &TrainConfig) -> usize {
    let total = epochs * n.div_ceil(cfg.batch_size);
    if cfg.max_steps > 0 {
        total.min(cfg.max_steps)
    } else {
        total
    }
}

/// Optimizes the parameters trainable in `stage` over `data`, calling
/// `on_step` after every update.
pub fn train_stage(
    model: &mut Model,
    data: &[SceneSample],
    cfg: &TrainConfig,
    stage: Stage,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let epochs = match stage {
        Stage::Proposal => cfg.stage1_epochs,
        Stage::Fusion => cfg.stage2_epochs,
    };
    model.set_stage(stage == Stage::Fusion, cfg.freeze_image_backbone);
    let total = stage_steps(data.len(), epochs, cfg);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut records = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[stage.id(), epoch as u64],
        )));
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let (lr, beta1) = lr_schedule(step, total, &cfg.schedule);
            let beams = if stage == Stage::Fusion && cfg.augment.enabled && cfg.augment.randomized_beam {
                augmentation_mode(step as u64, cfg.seed)
            } else {
                BeamMode::Full
            };
            let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
            let mut parts = LossParts::default();
            for &idx in batch {
                let s = derive_seed(cfg.seed, &[stage.id(), epoch as u64, idx as u64]);
                let mut aug = Augmentation::draw(&cfg.augment, s);
                aug.beams = beams;
                let mut sample = apply_augmentation(&data[idx], &aug);
                filter_to_range(&mut sample, &model.cfg.voxel);
                let mut g = Graph::with_params(&model.store);
                let (loss, p) = sample_loss(model, &mut g, &sample, stage, cfg, derive_seed(s, &[7]))?;
                if !p.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        detail: format!(
                            "stage {stage:?}, epoch {epoch}, scene {} (seed {}), augmentation {aug:?}, parts {p:?}",
                            data[idx].index, data[idx].seed
                        ),
                    });
                }
                g.backward(loss);
                for (id, grad) in g.param_grads() {
                    match &mut acc[id.0] {
                        Some(t) => t.add_assign(&grad),
                        slot => *slot = Some(grad),
                    }
                }
                parts.total += p.total;
                parts.heatmap += p.heatmap;
                parts.cls += p.cls;
                parts.reg += p.reg;
                parts.iou += p.iou;
            }
            let k = batch.len() as f64;
            let mut grads: Vec<(ParamId, Tensor)> = acc
                .into_iter()
                .enumerate()
                .filter_map(|(i, t)| {
                    t.map(|mut t| {
                        t.scale_assign(1.0 / k);
                        (ParamId(i), t)
                    })
                })
                .collect();
            let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("stage {stage:?}, epoch {epoch}: gradient norm {grad_norm}"),
                });
            }
            opt.step(&mut model.store, &grads, lr, beta1);
            let rec = StepRecord {
                stage,
                epoch,
                step,
                lr,
                grad_norm,
                beams,
                loss: LossParts {
                    total: parts.total / k,
                    heatmap: parts.heatmap / k,
                    cls: parts.cls / k,
                    reg: parts.reg / k,
                    iou: parts.iou / k,
                },
            };
            on_step(&rec);
            records.push(rec);
            step += 1;
        }
    }
    Ok(records)
}

pub fn train_stage1(
    model: &mut Model,
    data: &[SceneSample],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    train_stage(model, data, cfg, Stage::Proposal, on_step)
}

pub fn train_stage2(
    model: &mut Model,
    data: &[SceneSample],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if model.decoder_blocks() == 0 {
        return Err(Error::Config(
            "the fusion stage needs at least one decoder block".into(),
        ));
    }
    train_stage(model, data, cfg, Stage::Fusion, on_step)
}
