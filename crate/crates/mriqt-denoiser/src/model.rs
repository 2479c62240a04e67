//! The velocity-predicting 3D residual U-Net.
//!
//! Layout: stem conv → per-level residual blocks with strided-conv
//! downsampling → bottleneck (residual, optional single-head attention,
//! residual) → per-level nearest-upsample + conv with skip concatenation →
//! GroupNorm/SiLU/conv head. Timestep information enters every residual
//! block as a per-channel bias projected from a shared sinusoidal MLP
//! embedding. Second convs, the attention output projection, and the head
//! are zero-initialized so the network starts as the identity map with a
//! zero velocity output.

use crate::batch::ConditionBatch;
use crate::config::{norm_groups, DenoiserConfig};
use crate::error::{DenoiserError, Result};
use mriqt_core::VolumeGrid;
use mriqt_diffusion::{cfg_merge, GuidanceConfig};
use mriqt_nn::{kaiming, Graph, NodeId, PSlot, ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct GnP {
    g: ParamId,
    b: ParamId,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ResP {
    gn1: GnP,
    conv1: ConvP,
    temb: LinP,
    gn2: GnP,
    conv2: ConvP,
    shortcut: Option<ConvP>,
}

#[derive(Debug, Clone, Copy)]
struct AttnP {
    gn: GnP,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug)]
struct Layers {
    temb1: LinP,
    temb2: LinP,
    stem: ConvP,
    enc: Vec<ResP>,
    down: Vec<ConvP>,
    bott1: ResP,
    attn: Option<AttnP>,
    bott2: ResP,
    dec: Vec<ResP>,
    up: Vec<ConvP>,
    head_gn: GnP,
    head: ConvP,
}

/// Weights are immutable during inference, so a shared reference can be
/// used from several threads at once; training mutates through `&mut self`.
pub struct Denoiser {
    cfg: DenoiserConfig,
    store: ParamStore,
    layers: Layers,
    evals: AtomicU64,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool) -> ConvP {
        let shape = [cout, cin, k, k, k];
        let w = if zero {
            Tensor::zeros(shape.to_vec())
        } else {
            kaiming(&shape, cin * k * k * k, &mut self.rng)
        };
        ConvP {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), Tensor::zeros([cout])),
        }
    }

    fn gn(&mut self, name: &str, c: usize) -> GnP {
        GnP {
            g: self.store.add(format!("{name}.g"), Tensor::filled([c], 1.0)),
            b: self.store.add(format!("{name}.b"), Tensor::zeros([c])),
            groups: norm_groups(c),
        }
    }

    fn linear(&mut self, name: &str, o: usize, i: usize, zero: bool) -> LinP {
        let w = if zero {
            Tensor::zeros([o, i].to_vec())
        } else {
            kaiming(&[o, i], i, &mut self.rng)
        };
        LinP {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), Tensor::zeros([o])),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) -> ResP {
        ResP {
            gn1: self.gn(&format!("{name}.gn1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cout, cin, 3, false),
            temb: self.linear(&format!("{name}.temb"), cout, tdim, false),
            gn2: self.gn(&format!("{name}.gn2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, true),
            shortcut: (cin != cout).then(|| self.conv(&format!("{name}.short"), cout, cin, 1, false)),
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> AttnP {
        let mut proj = |suffix: &str, zero: bool| {
            let w = if zero {
                Tensor::zeros([c, c].to_vec())
            } else {
                kaiming(&[c, c], c, &mut self.rng)
            };
            self.store.add(format!("{name}.{suffix}"), w)
        };
        let wq = proj("wq", false);
        let wk = proj("wk", false);
        let wv = proj("wv", false);
        let wo = proj("wo", true);
        AttnP {
            gn: self.gn(&format!("{name}.gn"), c),
            wq,
            wk,
            wv,
            wo,
        }
    }
}

impl Denoiser {
    /// Fresh model with seed-determined initialization.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let ch = cfg.level_channels();
        let l = ch.len();
        let tdim = cfg.time_embed_dim;

        let temb1 = b.linear("temb.mlp1", tdim, tdim, false);
        let temb2 = b.linear("temb.mlp2", tdim, tdim, false);
        let stem = b.conv("stem", ch[0], cfg.in_channels, 3, false);
        let mut enc = Vec::with_capacity(l);
        let mut down = Vec::with_capacity(l.saturating_sub(1));
        for i in 0..l {
            if i > 0 {
                down.push(b.conv(&format!("down{}", i - 1), ch[i - 1], ch[i - 1], 3, false));
            }
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            enc.push(b.res(&format!("enc{i}"), cin, ch[i], tdim));
        }
        let cb = ch[l - 1];
        let bott1 = b.res("bott1", cb, cb, tdim);
        let attn = cfg.attn_at_bottleneck.then(|| b.attn("attn", cb));
        let bott2 = b.res("bott2", cb, cb, tdim);
        let mut dec: Vec<Option<ResP>> = vec![None; l];
        let mut up: Vec<Option<ConvP>> = vec![None; l.saturating_sub(1)];
        for i in (0..l).rev() {
            dec[i] = Some(b.res(&format!("dec{i}"), 2 * ch[i], ch[i], tdim));
            if i > 0 {
                up[i - 1] = Some(b.conv(&format!("up{}", i - 1), ch[i - 1], ch[i], 3, false));
            }
        }
        let head_gn = b.gn("head.gn", ch[0]);
        let head = b.conv("head", cfg.out_channels, ch[0], 3, true);

        let layers = Layers {
            temb1,
            temb2,
            stem,
            enc,
            down,
            bott1,
            attn,
            bott2,
            dec: dec.into_iter().map(Option::unwrap).collect(),
            up: up.into_iter().map(Option::unwrap).collect(),
            head_gn,
            head,
        };
        Ok(Self {
            cfg,
            store,
            layers,
            evals: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_params(&self) -> usize {
        self.store.n_scalars()
    }

    /// Network forward passes performed so far, counted per sample.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_eval_count(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    /// Adds Gaussian noise of the given scale to every parameter. Locality
    /// and gradient sanity checks use this so the zero-initialized output
    /// paths carry signal instead of collapsing the network to f(x) = 0.
    pub fn jitter_params(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Normal::new(0.0, scale).expect("valid scale");
        for id in self.store.iter_ids().collect::<Vec<_>>() {
            for v in self.store.value_mut(id).data_mut() {
                *v += rand_distr::Distribution::sample(&dist, &mut rng);
            }
        }
    }

    /// Sinusoidal embedding of integer steps, shape [B, time_embed_dim].
    pub fn time_embedding(&self, ts: &[usize]) -> Tensor {
        let dim = self.cfg.time_embed_dim;
        let half = dim / 2;
        let mut data = vec![0.0f64; ts.len() * dim];
        for (bi, &t) in ts.iter().enumerate() {
            for k in 0..half {
                let exponent = if half > 1 {
                    k as f64 / (half - 1) as f64
                } else {
                    0.0
                };
                let freq = (-(10_000.0f64).ln() * exponent).exp();
                let arg = t as f64 * freq;
                data[bi * dim + k] = arg.sin();
                data[bi * dim + half + k] = arg.cos();
            }
        }
        Tensor::new(vec![ts.len(), dim], data)
    }

    /// Packs x_t and condition volumes into a [B, 2, H, W, D] input tensor.
    fn assemble_input(&self, batch: &ConditionBatch) -> Tensor {
        let [h, w, d] = batch.shape();
        let s = h * w * d;
        let bsz = batch.len();
        let mut data = vec![0.0f64; bsz * 2 * s];
        for bi in 0..bsz {
            let xd = batch.x_t()[bi].data();
            let cd = batch.cond()[bi].data();
            for (i, &v) in xd.iter().enumerate() {
                data[(bi * 2) * s + i] = v as f64;
            }
            for (i, &v) in cd.iter().enumerate() {
                data[(bi * 2 + 1) * s + i] = v as f64;
            }
        }
        Tensor::new(vec![bsz, 2, h, w, d], data)
    }

    fn res_forward(&self, g: &mut Graph, x: NodeId, tact: NodeId, p: &ResP) -> NodeId {
        let st = &self.store;
        let h = g.group_norm(st, x, PSlot::Train(p.gn1.g), PSlot::Train(p.gn1.b), p.gn1.groups);
        let h = g.silu(h);
        let h = g.conv3d(st, h, PSlot::Train(p.conv1.w), Some(PSlot::Train(p.conv1.b)), 3, 1);
        let bias = g.linear(st, tact, PSlot::Train(p.temb.w), Some(PSlot::Train(p.temb.b)));
        let h = g.add_channel_bias(h, bias);
        let h = g.group_norm(st, h, PSlot::Train(p.gn2.g), PSlot::Train(p.gn2.b), p.gn2.groups);
        let h = g.silu(h);
        let h = g.conv3d(st, h, PSlot::Train(p.conv2.w), Some(PSlot::Train(p.conv2.b)), 3, 1);
        let sc = match &p.shortcut {
            Some(c) => g.conv3d(st, x, PSlot::Train(c.w), Some(PSlot::Train(c.b)), 1, 1),
            None => x,
        };
        g.add(sc, h)
    }

    /// Builds the full network into `g`; returns the [B, 1, H, W, D]
    /// velocity node. `xin` is the packed input, `temb_raw` the sinusoidal
    /// embedding before the MLP.
    pub fn forward(&self, g: &mut Graph, xin: NodeId, temb_raw: NodeId) -> NodeId {
        let st = &self.store;
        let ly = &self.layers;
        let t1 = g.linear(st, temb_raw, PSlot::Train(ly.temb1.w), Some(PSlot::Train(ly.temb1.b)));
        let t1 = g.silu(t1);
        let t2 = g.linear(st, t1, PSlot::Train(ly.temb2.w), Some(PSlot::Train(ly.temb2.b)));
        let tact = g.silu(t2);

        let mut h = g.conv3d(st, xin, PSlot::Train(ly.stem.w), Some(PSlot::Train(ly.stem.b)), 3, 1);
        let l = ly.enc.len();
        let mut skips = Vec::with_capacity(l);
        for i in 0..l {
            if i > 0 {
                let dwn = &ly.down[i - 1];
                h = g.conv3d(st, h, PSlot::Train(dwn.w), Some(PSlot::Train(dwn.b)), 3, 2);
            }
            h = self.res_forward(g, h, tact, &ly.enc[i]);
            skips.push(h);
        }

        h = self.res_forward(g, h, tact, &ly.bott1);
        if let Some(a) = &ly.attn {
            let n = g.group_norm(st, h, PSlot::Train(a.gn.g), PSlot::Train(a.gn.b), a.gn.groups);
            let att = g.attention(
                st,
                n,
                PSlot::Train(a.wq),
                PSlot::Train(a.wk),
                PSlot::Train(a.wv),
                PSlot::Train(a.wo),
            );
            h = g.add(h, att);
        }
        h = self.res_forward(g, h, tact, &ly.bott2);

        for i in (0..l).rev() {
            let cat = g.concat_channels(h, skips[i]);
            h = self.res_forward(g, cat, tact, &ly.dec[i]);
            if i > 0 {
                h = g.upsample2(h);
                let upc = &ly.up[i - 1];
                h = g.conv3d(st, h, PSlot::Train(upc.w), Some(PSlot::Train(upc.b)), 3, 1);
            }
        }

        let hgn = &ly.head_gn;
        let h = g.group_norm(st, h, PSlot::Train(hgn.g), PSlot::Train(hgn.b), hgn.groups);
        let h = g.silu(h);
        g.conv3d(st, h, PSlot::Train(ly.head.w), Some(PSlot::Train(ly.head.b)), 3, 1)
    }

    /// Validates a batch against the model and builds the forward graph,
    /// returning the output node. Shared by inference and training.
    pub fn forward_batch(&self, g: &mut Graph, batch: &ConditionBatch) -> Result<NodeId> {
        self.cfg.check_shape(batch.shape())?;
        let xin = g.input(self.assemble_input(batch));
        let te = g.input(self.time_embedding(batch.t()));
        self.evals.fetch_add(batch.len() as u64, Ordering::Relaxed);
        Ok(self.forward(g, xin, te))
    }

    /// Velocity predictions for a batch, eval mode (no gradients retained).
    pub fn predict_v(&self, batch: &ConditionBatch) -> Result<Vec<VolumeGrid>> {
        let mut g = Graph::new(false);
        let out = self.forward_batch(&mut g, batch)?;
        let t = g.value(out);
        let [h, w, d] = batch.shape();
        let s = h * w * d;
        let mut vols = Vec::with_capacity(batch.len());
        for bi in 0..batch.len() {
            let data: Vec<f32> = t.data()[bi * s..(bi + 1) * s]
                .iter()
                .map(|&v| v as f32)
                .collect();
            vols.push(batch.x_t()[bi].with_data(data)?);
        }
        Ok(vols)
    }

    /// Classifier-free-guided velocity: merges a conditional and a
    /// null-condition prediction with weight `w`. `w = 1` runs a single
    /// conditional pass and returns it bit-exactly.
    pub fn guided_predict(
        &self,
        x_t: &VolumeGrid,
        cond: &VolumeGrid,
        t: usize,
        guidance: &GuidanceConfig,
    ) -> Result<VolumeGrid> {
        guidance.validate()?;
        let w = guidance.weight;
        if w == 1.0 {
            let batch = ConditionBatch::conditional(
                vec![x_t.clone()],
                vec![cond.clone()],
                vec![t],
            )?;
            return Ok(self.predict_v(&batch)?.remove(0));
        }
        // One batched pass: sample 0 conditional, sample 1 null-condition.
        let batch = ConditionBatch::new(
            vec![x_t.clone(), x_t.clone()],
            vec![cond.clone(), cond.clone()],
            vec![t, t],
            vec![true, false],
        )?;
        let mut out = self.predict_v(&batch)?;
        let y_uc = out.pop().expect("two predictions");
        let y_c = out.pop().expect("two predictions");
        Ok(cfg_merge(&y_c, &y_uc, w)?)
    }

    /// Writes weights with the config embedded in the header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg_json = serde_json::to_string(&self.cfg)
            .map_err(|e| DenoiserError::ConfigInvalid(e.to_string()))?;
        mriqt_nn::save_checkpoint(path, &self.store, &cfg_json, None)?;
        Ok(())
    }

    /// Reconstructs a model from a checkpoint written by [`Denoiser::save`]
    /// (or by the trainer, whose checkpoints share the header layout).
    pub fn load(path: &Path) -> Result<Self> {
        let cfg_json = mriqt_nn::peek_config(path)?;
        let cfg: DenoiserConfig = serde_json::from_str(&cfg_json).map_err(|e| {
            DenoiserError::ConfigInvalid(format!("checkpoint config: {e}"))
        })?;
        let mut model = Self::new(cfg, 0)?;
        mriqt_nn::load_checkpoint(path, &mut model.store, None)?;
        Ok(model)
    }
}
