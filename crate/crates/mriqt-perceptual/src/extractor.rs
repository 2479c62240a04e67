//! VGG-style 3D feature extractor: stacked conv stages, each two 3³ convs
//! followed by a strided-conv downsample, so stage `l` emits features at
//! 1/2^l of the input resolution. A global-average-pool linear head is
//! attached only while training the classification pretext task and is
//! dropped from the exported extractor.

use crate::config::ExtractorConfig;
use crate::error::{PerceptualError, Result};
use mriqt_core::VolumeGrid;
use mriqt_nn::{kaiming, Graph, NodeId, PSlot, ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct StageP {
    c1: ConvP,
    c2: ConvP,
    down: ConvP,
}

/// Classification head used only during pretext training.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadP {
    pub w: ParamId,
    pub b: ParamId,
}

/// Checkpoint header payload: architecture plus provenance tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExtractorMeta {
    config: ExtractorConfig,
    trained_on: String,
}

pub struct FeatureExtractor {
    cfg: ExtractorConfig,
    trained_on: String,
    store: ParamStore,
    stages: Vec<StageP>,
}

fn build_stages(
    store: &mut ParamStore,
    cfg: &ExtractorConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<StageP> {
    let mut conv = |name: String, cout: usize, cin: usize| ConvP {
        w: store.add(format!("{name}.w"), kaiming(&[cout, cin, 3, 3, 3], cin * 27, rng)),
        b: store.add(format!("{name}.b"), Tensor::zeros([cout])),
    };
    let mut stages = Vec::with_capacity(cfg.channels.len());
    let mut cin = cfg.in_channels;
    for (l, &c) in cfg.channels.iter().enumerate() {
        let c1 = conv(format!("s{l}.c1"), c, cin);
        let c2 = conv(format!("s{l}.c2"), c, c);
        let down = conv(format!("s{l}.down"), c, c);
        stages.push(StageP { c1, c2, down });
        cin = c;
    }
    stages
}

impl FeatureExtractor {
    /// Randomly initialized extractor (useful for structural tests; real use
    /// trains one via [`crate::train_extractor`]).
    pub fn new(cfg: ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = build_stages(&mut store, &cfg, &mut rng);
        Ok(Self {
            cfg,
            trained_on: "random-init".into(),
            store,
            stages,
        })
    }

    pub(crate) fn from_parts(
        cfg: ExtractorConfig,
        trained_on: String,
        store: ParamStore,
        stages: Vec<StageP>,
    ) -> Self {
        Self {
            cfg,
            trained_on,
            store,
            stages,
        }
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn trained_on(&self) -> &str {
        &self.trained_on
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn n_params(&self) -> usize {
        self.store.n_scalars()
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Rejects volumes whose spatial dims the stage downsamples cannot halve.
    pub fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        let factor = 1usize << self.stages.len();
        if shape.iter().any(|&d| d % factor != 0 || d < factor) {
            return Err(PerceptualError::IndivisibleSpatialDims { shape, factor });
        }
        Ok(())
    }

    /// Appends the stage cascade to `g`, returning one feature node per
    /// stage. `trainable` selects whether stage weights join the backward
    /// pass (pretext training) or act as frozen constants (perceptual loss
    /// inside someone else's objective).
    pub(crate) fn stages_into_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        trainable: bool,
    ) -> Vec<NodeId> {
        let slot = |id: ParamId| -> PSlot {
            if trainable {
                PSlot::Train(id)
            } else {
                PSlot::Frozen(std::rc::Rc::new(self.store.value(id).clone()))
            }
        };
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for st in &self.stages {
            h = g.conv3d(&self.store, h, slot(st.c1.w), Some(slot(st.c1.b)), 3, 1);
            h = g.silu(h);
            h = g.conv3d(&self.store, h, slot(st.c2.w), Some(slot(st.c2.b)), 3, 1);
            h = g.silu(h);
            h = g.conv3d(&self.store, h, slot(st.down.w), Some(slot(st.down.b)), 3, 2);
            feats.push(h);
        }
        feats
    }

    /// Frozen-weight feature nodes for embedding the extractor inside a
    /// training objective: gradients flow to `x` but not to the extractor.
    pub fn features_into_graph(&self, g: &mut Graph, x: NodeId) -> Vec<NodeId> {
        self.stages_into_graph(g, x, false)
    }

    /// Per-stage feature maps of a single volume, eval mode. Stage `l`
    /// (0-based) has shape [1, channels[l], H/2^(l+1), ...].
    pub fn extract_features(&self, v: &VolumeGrid) -> Result<Vec<Tensor>> {
        self.check_shape(v.shape())?;
        let [h, w, d] = v.shape();
        let data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
        let mut g = Graph::new(false);
        let x = g.input(Tensor::new(vec![1, self.cfg.in_channels, h, w, d], data));
        let nodes = self.stages_into_graph(&mut g, x, true);
        Ok(nodes.into_iter().map(|n| g.value(n).clone()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ExtractorMeta {
            config: self.cfg.clone(),
            trained_on: self.trained_on.clone(),
        };
        let json = serde_json::to_string(&meta)
            .map_err(|e| PerceptualError::ConfigInvalid(e.to_string()))?;
        mriqt_nn::save_checkpoint(path, &self.store, &json, None)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = mriqt_nn::peek_config(path)?;
        let meta: ExtractorMeta = serde_json::from_str(&json)
            .map_err(|e| PerceptualError::ConfigInvalid(format!("checkpoint config: {e}")))?;
        let mut fe = Self::new(meta.config, 0)?;
        fe.trained_on = meta.trained_on;
        mriqt_nn::load_checkpoint(path, &mut fe.store, None)?;
        Ok(fe)
    }

    pub(crate) fn set_trained_on(&mut self, tag: impl Into<String>) {
        self.trained_on = tag.into();
    }
}

/// Classifier wrapper for pretext training: extractor stages plus a
/// global-average-pool linear head.
pub(crate) struct Classifier {
    pub fe: FeatureExtractor,
    pub head: HeadP,
}

impl Classifier {
    pub fn new(cfg: ExtractorConfig, n_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_classes < 2 {
            return Err(PerceptualError::ConfigInvalid(format!(
                "classifier needs >= 2 classes, got {n_classes}"
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = build_stages(&mut store, &cfg, &mut rng);
        let c_last = *cfg.channels.last().expect("validated nonempty");
        let head = HeadP {
            w: store.add("head.w", kaiming(&[n_classes, c_last], c_last, &mut rng)),
            b: store.add("head.b", Tensor::zeros([n_classes])),
        };
        Ok(Self {
            fe: FeatureExtractor::from_parts(cfg, "random-init".into(), store, stages),
            head,
        })
    }

    /// Builds logits for a batch tensor already shaped [B, 1, H, W, D].
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let feats = self.fe.stages_into_graph(g, x, true);
        let last = *feats.last().expect("at least one stage");
        let pooled = g.global_avg_pool(last);
        g.linear(
            self.fe.store(),
            pooled,
            PSlot::Train(self.head.w),
            Some(PSlot::Train(self.head.b)),
        )
    }

    /// Drops the head, leaving the trained extractor.
    pub fn into_extractor(self, tag: String) -> FeatureExtractor {
        let mut fe = self.fe;
        fe.set_trained_on(tag);
        fe
    }
}
