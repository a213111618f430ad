//! The full detector: LiDAR pillars and BEV encoder, proposal head, camera
//! backbone and encoder, and the cross-modal decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{
    encoder_input, image_tensor, pillarize, BevEncoder, BevEncoderConfig, BevLayout, ImageBackbone,
    ImageBackboneConfig, VoxelGridConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{
    predict_boxes, FusionConfig, FusionDecoder, FusionInputs, FusionOutput, FusionSeed, ImageEncoder, ImageMemory,
};
use crate::geometry::{decode_box, Box3D};
use crate::nn::ParamStore;
use crate::proposal::{init_queries, CenterEmbedding, PointSelect, ProposalConfig, ProposalHead, QueryState};
use crate::scene_synth::SceneSample;
use crate::tensor::Tensor;

/// Parameter-name prefixes trained in the proposal stage and frozen after.
pub const STAGE1_PREFIXES: [&str; 2] = ["lidar.", "proposal."];
pub const IMAGE_BACKBONE_PREFIX: &str = "image.backbone.";

/// Pyramid levels the image backbone emits.
const IMAGE_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width shared by every token.
    pub d: usize,
    pub num_classes: usize,
    pub cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
    pub voxel: VoxelGridConfig,
    pub bev_encoder: BevEncoderConfig,
    pub image_backbone: ImageBackboneConfig,
    pub proposal: ProposalConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            num_classes: 3,
            cameras: 4,
            image_height: 64,
            image_width: 128,
            init_seed: 0,
            voxel: VoxelGridConfig::default(),
            bev_encoder: BevEncoderConfig::default(),
            image_backbone: ImageBackboneConfig::default(),
            proposal: ProposalConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_classes == 0 || self.cameras == 0 {
            return Err(Error::Config("d, num_classes and cameras must be positive".into()));
        }
        if self.image_height < 32 || self.image_width < 32 {
            return Err(Error::Config("images must be at least 32 pixels on each side".into()));
        }
        self.voxel.validate()?;
        self.proposal.validate()?;
        self.fusion.validate(self.d)?;
        let (h, w) = self.voxel.bev_shape();
        let cells = h.div_ceil(2) * w.div_ceil(2);
        if self.proposal.num_queries > cells {
            return Err(Error::Config(format!(
                "{} queries exceed the {cells} BEV cells",
                self.proposal.num_queries
            )));
        }
        Ok(())
    }

    /// Layout of the BEV feature map the proposal head and decoders read.
    pub fn layout(&self) -> BevLayout {
        self.voxel.layout(2)
    }
}

/// How far a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// LiDAR branch and proposal head only.
    Proposal,
    /// Everything; `point_select` seeds the point-select enhancement
    /// (training only) and `None` disables it.
    Full { point_select: Option<u64> },
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub proposal: QueryState,
    pub fusion: Option<FusionOutput>,
}

impl ForwardOutput {
    /// Final `(logits, codes)`: the decoder's when it ran, else the
    /// proposal's.
    pub fn head(&self) -> (Var, Var) {
        match &self.fusion {
            Some(f) => (f.logits, f.codes),
            None => (self.proposal.logits, self.proposal.codes),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub layout: BevLayout,
    bev: BevEncoder,
    proposal: ProposalHead,
    image: ImageBackbone,
    encoder: ImageEncoder,
    center: CenterEmbedding,
    point_select: PointSelect,
    decoder: FusionDecoder,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let layout = cfg.layout();
        let bev = BevEncoder::new(
            &mut store,
            "lidar.bev",
            &cfg.bev_encoder,
            cfg.voxel.bev_shape(),
            d,
            &mut rng,
        );
        let proposal = ProposalHead::new(&mut store, d, cfg.num_classes, layout, cfg.voxel.z_range, &mut rng);
        let image = ImageBackbone::new(&mut store, "image.backbone", &cfg.image_backbone, d, &mut rng);
        let encoder = ImageEncoder::new(&mut store, "image.encoder", d, IMAGE_LEVELS, &cfg.fusion, &mut rng);
        let e = layout.extent;
        let scale = [
            2.0 / (e.x_max - e.x_min),
            2.0 / (e.y_max - e.y_min),
            2.0 / (cfg.voxel.z_range.1 - cfg.voxel.z_range.0),
        ];
        let center = CenterEmbedding::new(&mut store, "query.center", d, scale, &mut rng);
        let point_select = PointSelect::new(&mut store, "query.point_select", d, &mut rng);
        let decoder = FusionDecoder::new(
            &mut store,
            &cfg.fusion,
            d,
            cfg.num_classes,
            IMAGE_LEVELS,
            cfg.cameras,
            &mut rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            layout,
            bev,
            proposal,
            image,
            encoder,
            center,
            point_select,
            decoder,
        })
    }

    /// Rebuilds the architecture for `cfg` and takes every parameter from
    /// `store`, which must match names and shapes exactly.
    pub fn with_params(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        if store.len() != model.store.len() {
            return Err(Error::Shape(format!(
                "parameter count {} does not match the architecture ({})",
                store.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids() {
            let name = model.store.name(id);
            let other = store
                .find(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if store.value(other).shape() != model.store.value(id).shape() {
                return Err(Error::Shape(format!("parameter {name} has the wrong shape")));
            }
        }
        model.store.load_matching(&store);
        Ok(model)
    }

    /// Copies the LiDAR branch and proposal head from `other`.
    pub fn load_stage1(&mut self, other: &Model) -> Result<usize> {
        let mut n = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id).to_string();
            if !STAGE1_PREFIXES.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let src = other
                .store
                .find(&name)
                .ok_or_else(|| Error::Shape(format!("stage-1 source lacks parameter {name}")))?;
            let value = other.store.value(src);
            if value.shape() != self.store.value(id).shape() {
                return Err(Error::Shape(format!("stage-1 parameter {name} has the wrong shape")));
            }
            *self.store.value_mut(id) = value.clone();
            n += 1;
        }
        Ok(n)
    }

    pub fn decoder_blocks(&self) -> usize {
        self.decoder.num_blocks()
    }

    /// Trainable flags for the proposal stage (everything) or the fusion
    /// stage (proposal side frozen, image backbone optionally frozen).
    pub fn set_stage(&mut self, fusion: bool, freeze_image_backbone: bool) {
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id);
            let stage1 = STAGE1_PREFIXES.iter().any(|p| name.starts_with(p));
            let backbone = name.starts_with(IMAGE_BACKBONE_PREFIX);
            let on = if fusion {
                !stage1 && !(backbone && freeze_image_backbone)
            } else {
                stage1
            };
            self.store.set_trainable(id, on);
        }
    }

    fn check_sample(&self, sample: &SceneSample) -> Result<()> {
        if sample.images.len() != self.cfg.cameras || sample.calibs.len() != self.cfg.cameras {
            return Err(Error::Shape(format!(
                "model expects {} cameras, sample has {} images and {} calibrations",
                self.cfg.cameras,
                sample.images.len(),
                sample.calibs.len()
            )));
        }
        for img in &sample.images {
            if img.height != self.cfg.image_height || img.width != self.cfg.image_width {
                return Err(Error::Shape(format!(
                    "image {}x{} does not match the configured {}x{}",
                    img.height, img.width, self.cfg.image_height, self.cfg.image_width
                )));
            }
        }
        Ok(())
    }

    /// Dense network inputs of a sample: the pillar tensor and one tensor
    /// per camera image.
    pub fn input_tensors(&self, sample: &SceneSample) -> (Tensor, Vec<Tensor>) {
        let grid = pillarize(&sample.cloud, &self.cfg.voxel);
        (encoder_input(&grid), sample.images.iter().map(image_tensor).collect())
    }

    /// Builds the forward graph for one sample on `g`, which must read
    /// parameters from `self.store`.
    pub fn forward(&self, g: &mut Graph, sample: &SceneSample, pass: Pass) -> Result<ForwardOutput> {
        let grid = pillarize(&sample.cloud, &self.cfg.voxel);
        let lidar = g.constant(encoder_input(&grid));
        let images: Vec<Var> = if self.needs_images(pass) {
            sample.images.iter().map(|img| g.constant(image_tensor(img))).collect()
        } else {
            Vec::new()
        };
        self.forward_inputs(g, lidar, &images, sample, pass)
    }

    fn needs_images(&self, pass: Pass) -> bool {
        matches!(pass, Pass::Full { .. }) && self.decoder.num_blocks() > 0 && self.decoder.uses_images()
    }

    /// Like [`Model::forward`], with the dense inputs supplied as graph
    /// nodes; `sample` still provides the calibrations and the raw cloud.
    pub fn forward_inputs(
        &self,
        g: &mut Graph,
        lidar: Var,
        images: &[Var],
        sample: &SceneSample,
        pass: Pass,
    ) -> Result<ForwardOutput> {
        let (bev, proposal) = self.lidar_stage(g, lidar)?;
        let Pass::Full { point_select } = pass else {
            return Ok(ForwardOutput { proposal, fusion: None });
        };
        if self.decoder.num_blocks() == 0 {
            return Ok(ForwardOutput { proposal, fusion: None });
        }
        self.check_sample(sample)?;
        let memory = self.image_stage(g, images)?;
        let fusion = self.decode_stage(g, bev, &proposal, memory.as_ref(), sample, point_select)?;
        Ok(ForwardOutput {
            proposal,
            fusion: Some(fusion),
        })
    }

    /// BEV features and proposals from the pillar tensor.
    pub fn lidar_stage(&self, g: &mut Graph, lidar: Var) -> Result<(Var, QueryState)> {
        let bev = self.bev.forward(g, lidar)?;
        let proposal = self.proposal.propose(g, bev, self.cfg.proposal.num_queries)?;
        Ok((bev, proposal))
    }

    /// Encoded image memory, or `None` when the decoder has no image layers.
    pub fn image_stage(&self, g: &mut Graph, images: &[Var]) -> Result<Option<ImageMemory>> {
        if self.decoder.num_blocks() == 0 || !self.decoder.uses_images() {
            return Ok(None);
        }
        if images.len() != self.cfg.cameras {
            return Err(Error::Shape(format!(
                "{} image inputs for {} cameras",
                images.len(),
                self.cfg.cameras
            )));
        }
        let (h, w) = (self.cfg.image_height, self.cfg.image_width);
        let pyramids: Vec<_> = images.iter().map(|&t| self.image.forward(g, t, h, w)).collect();
        Ok(Some(self.encoder.encode(g, &pyramids)?))
    }

    /// Query initialization and the cross decoder.
    pub fn decode_stage(
        &self,
        g: &mut Graph,
        bev: Var,
        proposal: &QueryState,
        memory: Option<&ImageMemory>,
        sample: &SceneSample,
        point_select: Option<u64>,
    ) -> Result<FusionOutput> {
        let bev_tokens = g.transpose(bev);
        let center_term = self.center.forward(g, proposal.centers);
        let point_term = match point_select {
            Some(seed) if self.cfg.proposal.point_select.enabled_in_training => {
                let codes = g.value(proposal.codes);
                let boxes: Vec<Box3D> = (0..codes.rows).map(|r| decode_box(codes.row(r), 0, 0.0)).collect();
                let z = self.cfg.proposal.point_select.points;
                Some(
                    self.point_select
                        .augment(g, &boxes, proposal.centers, &sample.cloud, z, seed),
                )
            }
            _ => None,
        };
        let queries = init_queries(g, proposal.features, point_term, center_term)?;
        let inputs = FusionInputs {
            memory,
            calibs: &sample.calibs,
            bev_tokens,
            layout: self.layout,
            z_range: self.cfg.voxel.z_range,
        };
        let seed = FusionSeed {
            queries,
            centers: proposal.centers,
            codes: proposal.codes,
            logits: proposal.logits,
        };
        self.decoder.forward(g, seed, &inputs, &self.center)
    }

    /// Inference: one box per query, from the decoder when `fused`, else
    /// from the proposal head.
    pub fn detect(&self, sample: &SceneSample, fused: bool) -> Result<Vec<Box3D>> {
        let mut g = Graph::with_params(&self.store);
        let pass = if fused {
            Pass::Full { point_select: None }
        } else {
            Pass::Proposal
        };
        let out = self.forward(&mut g, sample, pass)?;
        let (logits, codes) = out.head();
        Ok(predict_boxes(g.value(logits), g.value(codes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::{generate_scene, SynthConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 16,
            proposal: ProposalConfig {
                num_queries: 12,
                ..ProposalConfig::default()
            },
            fusion: FusionConfig {
                order: "(CL)2".into(),
                encoder_layers: 1,
                ..FusionConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_shapes_and_detections() {
        let model = Model::new(&tiny()).unwrap();
        let sample = generate_scene(&SynthConfig::default(), 0).unwrap();
        let mut g = Graph::with_params(&model.store);
        let out = model
            .forward(&mut g, &sample, Pass::Full { point_select: Some(1) })
            .unwrap();
        let f = out.fusion.as_ref().unwrap();
        assert_eq!(f.steps.len(), 4);
        assert_eq!(g.value(f.codes).shape(), (12, 8));
        assert_eq!(g.value(f.logits).shape(), (12, 3));
        let dets = model.detect(&sample, true).unwrap();
        assert_eq!(dets.len(), 12);
        let props = model.detect(&sample, false).unwrap();
        assert_eq!(props.len(), 12);
    }

    #[test]
    fn untrained_decoder_reproduces_proposal_boxes() {
        let model = Model::new(&tiny()).unwrap();
        let sample = generate_scene(&SynthConfig::default(), 1).unwrap();
        let fused = model.detect(&sample, true).unwrap();
        let props = model.detect(&sample, false).unwrap();
        for (a, b) in fused.iter().zip(&props) {
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.score, b.score);
            assert_eq!(a.size, b.size);
            assert_eq!(a.center, b.center);
        }
    }

    #[test]
    fn stage_flags() {
        let mut model = Model::new(&tiny()).unwrap();
        model.set_stage(true, false);
        for id in model.store.ids() {
            let name = model.store.name(id);
            let frozen = name.starts_with("lidar.") || name.starts_with("proposal.");
            assert_eq!(model.store.is_trainable(id), !frozen, "{name}");
        }
        assert!(model.store.find("query.proj.w").is_some());
        model.set_stage(true, true);
        let id = model
            .store
            .ids()
            .find(|&i| model.store.name(i).starts_with("image.backbone."))
            .unwrap();
        assert!(!model.store.is_trainable(id));
        model.set_stage(false, false);
        assert!(!model.store.is_trainable(model.store.find("query.proj.w").unwrap()));
    }

    #[test]
    fn parameters_round_trip_through_rebuild() {
        let cfg = tiny();
        let model = Model::new(&cfg).unwrap();
        let copy = Model::with_params(&cfg, model.store.clone()).unwrap();
        assert_eq!(copy.store.len(), model.store.len());
        let other = ModelConfig {
            fusion: FusionConfig {
                order: "(CL)3".into(),
                ..cfg.fusion.clone()
            },
            ..cfg.clone()
        };
        assert!(Model::with_params(&other, model.store.clone()).is_err());
    }

    #[test]
    fn wrong_camera_count_is_rejected() {
        let model = Model::new(&tiny()).unwrap();
        let mut sample = generate_scene(&SynthConfig::default(), 2).unwrap();
        sample.images.pop();
        assert!(model.detect(&sample, true).is_err());
        assert!(model.detect(&sample, false).is_ok());
    }
}
