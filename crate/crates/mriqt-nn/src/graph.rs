//! Reverse-mode autodiff over a flat tape of volumetric ops.
//!
//! Each op computes its value eagerly at build time and saves whatever its
//! backward pass needs. `backward` walks the tape in reverse, accumulating
//! gradients into a [`ParamStore`] for trainable slots and skipping frozen
//! ones. Everything is f64 and single-threaded, so a fixed seed gives
//! bit-identical runs.

use crate::matmul::{axpy, matmul_nn, matmul_nt, matmul_tn};
use crate::params::{PSlot, ParamStore};
use crate::tensor::{bcs, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

const GN_EPS: f64 = 1e-5;

#[derive(Debug)]
struct AttnSaved {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    o: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Conv3d {
        x: NodeId,
        w: PSlot,
        b: Option<PSlot>,
        ksize: usize,
        stride: usize,
        col: Option<Vec<f64>>,
    },
    GroupNorm {
        x: NodeId,
        gamma: PSlot,
        beta: PSlot,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu {
        x: NodeId,
    },
    /// a + c*b, elementwise on identical shapes.
    Axpy {
        a: NodeId,
        b: NodeId,
        c: f64,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    ConcatC {
        a: NodeId,
        b: NodeId,
    },
    /// x[B,C,spatial] + bias[B,C] broadcast over spatial dims.
    AddChannelBias {
        x: NodeId,
        bias: NodeId,
    },
    Upsample2 {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: PSlot,
        b: Option<PSlot>,
    },
    Attention {
        x: NodeId,
        wq: PSlot,
        wk: PSlot,
        wv: PSlot,
        wo: PSlot,
        saved: Option<AttnSaved>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    /// out_i = ax[b]*x_i + ay[b]*y_i with per-sample constants.
    LincombPerSample {
        x: NodeId,
        y: NodeId,
        ax: Vec<f64>,
        ay: Vec<f64>,
    },
    MseLoss {
        p: NodeId,
        r: NodeId,
    },
    SmoothL1PerSample {
        p: NodeId,
        r: NodeId,
    },
    /// (1/B) * sum_b w_b * x_b -> scalar.
    ScaledDotMean {
        x: NodeId,
        w: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires: Vec<bool>,
    grad_enabled: bool,
}

fn conv_out_dim(i: usize, k: usize, s: usize, p: usize) -> usize {
    (i + 2 * p - k) / s + 1
}

/// Gathers all sliding k^3 windows of one sample into a [C*k^3, V] matrix.
fn im2col(
    x: &[f64],
    cin: usize,
    hd: [usize; 3],
    k: usize,
    s: usize,
    pad: i64,
    od: [usize; 3],
    col: &mut [f64],
) {
    let [h, w, d] = hd;
    let [oh, ow, odp] = od;
    let v = oh * ow * odp;
    let mut r = 0usize;
    for ci in 0..cin {
        let xc = &x[ci * h * w * d..(ci + 1) * h * w * d];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let row = &mut col[r * v..(r + 1) * v];
                    r += 1;
                    for ho in 0..oh {
                        let hi = (ho * s + kh) as i64 - pad;
                        let seg = &mut row[ho * ow * odp..(ho + 1) * ow * odp];
                        if hi < 0 || hi >= h as i64 {
                            seg.fill(0.0);
                            continue;
                        }
                        let hi = hi as usize;
                        for wo in 0..ow {
                            let wi = (wo * s + kw) as i64 - pad;
                            let sseg = &mut seg[wo * odp..(wo + 1) * odp];
                            if wi < 0 || wi >= w as i64 {
                                sseg.fill(0.0);
                                continue;
                            }
                            let wi = wi as usize;
                            let xrow = &xc[(hi * w + wi) * d..(hi * w + wi + 1) * d];
                            if s == 1 {
                                // Contiguous copy shifted by kd - pad.
                                let shift = kd as i64 - pad;
                                let lo = (-shift).max(0) as usize;
                                let hi_end = ((d as i64 - shift).min(d as i64)).max(0) as usize;
                                sseg[..lo].fill(0.0);
                                if hi_end > lo {
                                    let src_lo = (lo as i64 + shift) as usize;
                                    let src_hi = (hi_end as i64 + shift) as usize;
                                    sseg[lo..hi_end].copy_from_slice(&xrow[src_lo..src_hi]);
                                }
                                sseg[hi_end..].fill(0.0);
                            } else {
                                for (doo, out) in sseg.iter_mut().enumerate() {
                                    let di = (doo * s + kd) as i64 - pad;
                                    *out = if di < 0 || di >= d as i64 {
                                        0.0
                                    } else {
                                        xrow[di as usize]
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column-gradient matrix back onto
/// the input gradient of one sample.
fn col2im_add(
    col: &[f64],
    cin: usize,
    hd: [usize; 3],
    k: usize,
    s: usize,
    pad: i64,
    od: [usize; 3],
    dx: &mut [f64],
) {
    let [h, w, d] = hd;
    let [oh, ow, odp] = od;
    let v = oh * ow * odp;
    let mut r = 0usize;
    for ci in 0..cin {
        let xc = &mut dx[ci * h * w * d..(ci + 1) * h * w * d];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let row = &col[r * v..(r + 1) * v];
                    r += 1;
                    for ho in 0..oh {
                        let hi = (ho * s + kh) as i64 - pad;
                        if hi < 0 || hi >= h as i64 {
                            continue;
                        }
                        let hi = hi as usize;
                        let seg = &row[ho * ow * odp..(ho + 1) * ow * odp];
                        for wo in 0..ow {
                            let wi = (wo * s + kw) as i64 - pad;
                            if wi < 0 || wi >= w as i64 {
                                continue;
                            }
                            let wi = wi as usize;
                            let sseg = &seg[wo * odp..(wo + 1) * odp];
                            let xrow = &mut xc[(hi * w + wi) * d..(hi * w + wi + 1) * d];
                            if s == 1 {
                                let shift = kd as i64 - pad;
                                let lo = (-shift).max(0) as usize;
                                let hi_end = ((d as i64 - shift).min(d as i64)).max(0) as usize;
                                if hi_end > lo {
                                    let src_lo = (lo as i64 + shift) as usize;
                                    axpy(
                                        &mut xrow[src_lo..src_lo + (hi_end - lo)],
                                        &sseg[lo..hi_end],
                                        1.0,
                                    );
                                }
                            } else {
                                for (doo, &g) in sseg.iter().enumerate() {
                                    let di = (doo * s + kd) as i64 - pad;
                                    if di >= 0 && di < d as i64 {
                                        xrow[di as usize] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(s: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut s[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Graph {
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            requires: Vec::new(),
            grad_enabled,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn n_nodes(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        self.requires.push(requires && self.grad_enabled);
        id
    }

    fn req(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    fn slot_req(&self, s: &PSlot) -> bool {
        self.grad_enabled && matches!(s, PSlot::Train(_))
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t, false)
    }

    /// Input that participates in the backward pass (for gradient checks of
    /// non-parameter inputs).
    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t, true)
    }

    /// 3D convolution, kernel 1 or 3, stride 1 or 2; padding 1 for kernel 3
    /// so stride-1 output keeps the input's spatial dims.
    pub fn conv3d(
        &mut self,
        store: &ParamStore,
        x: NodeId,
        w: PSlot,
        b: Option<PSlot>,
        ksize: usize,
        stride: usize,
    ) -> NodeId {
        assert!(matches!(ksize, 1 | 3), "kernel size {ksize}");
        assert!(matches!(stride, 1 | 2), "stride {stride}");
        let pad: usize = if ksize == 3 { 1 } else { 0 };
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 5, "conv input must be [B,C,H,W,D], got {xs:?}");
        let (bsz, cin, h, wd, d) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let wt = w.get(store);
        let ws = wt.shape().to_vec();
        assert_eq!(
            ws,
            vec![ws[0], cin, ksize, ksize, ksize],
            "weight {ws:?} vs cin {cin} k {ksize}"
        );
        let cout = ws[0];
        let od = [
            conv_out_dim(h, ksize, stride, pad),
            conv_out_dim(wd, ksize, stride, pad),
            conv_out_dim(d, ksize, stride, pad),
        ];
        let v = od[0] * od[1] * od[2];
        let rows = cin * ksize * ksize * ksize;
        let wflat = wt.data();

        let mut out = vec![0.0f64; bsz * cout * v];
        let needs_col = self.grad_enabled
            && matches!(w, PSlot::Train(_))
            && !(ksize == 1 && stride == 1);
        let mut col_all = if needs_col {
            Some(vec![0.0f64; bsz * rows * v])
        } else {
            None
        };
        let mut scratch = if ksize == 1 && stride == 1 {
            Vec::new()
        } else {
            vec![0.0f64; rows * v]
        };
        for bi in 0..bsz {
            let xb = &self.values[x.0].data()[bi * cin * h * wd * d..(bi + 1) * cin * h * wd * d];
            let ob = &mut out[bi * cout * v..(bi + 1) * cout * v];
            if ksize == 1 && stride == 1 {
                matmul_nn(wflat, xb, cout, cin, v, ob);
            } else {
                im2col(xb, cin, [h, wd, d], ksize, stride, pad as i64, od, &mut scratch);
                matmul_nn(wflat, &scratch, cout, rows, v, ob);
                if let Some(ca) = col_all.as_mut() {
                    ca[bi * rows * v..(bi + 1) * rows * v].copy_from_slice(&scratch);
                }
            }
            if let Some(bs) = &b {
                let bt = bs.get(store);
                for (c, &bv) in bt.data().iter().enumerate() {
                    for o in &mut ob[c * v..(c + 1) * v] {
                        *o += bv;
                    }
                }
            }
        }
        let req = self.req(x)
            || self.slot_req(&w)
            || b.as_ref().map(|s| self.slot_req(s)).unwrap_or(false);
        let value = Tensor::new(vec![bsz, cout, od[0], od[1], od[2]], out);
        self.push(
            Op::Conv3d {
                x,
                w,
                b,
                ksize,
                stride,
                col: col_all,
            },
            value,
            req,
        )
    }

    pub fn group_norm(
        &mut self,
        store: &ParamStore,
        x: NodeId,
        gamma: PSlot,
        beta: PSlot,
        groups: usize,
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let (bsz, c, s) = bcs(&xs);
        assert!(c % groups == 0, "channels {c} not divisible by {groups} groups");
        let cpg = c / groups;
        let m = (cpg * s) as f64;
        let gt = gamma.get(store).data().to_vec();
        let bt = beta.get(store).data().to_vec();
        assert_eq!(gt.len(), c);
        assert_eq!(bt.len(), c);

        let xd = self.values[x.0].data();
        let mut xhat = vec![0.0f64; xd.len()];
        let mut rstd = vec![0.0f64; bsz * groups];
        let mut out = vec![0.0f64; xd.len()];
        for bi in 0..bsz {
            for g in 0..groups {
                let start = bi * c * s + g * cpg * s;
                let seg = &xd[start..start + cpg * s];
                let mean: f64 = seg.iter().sum::<f64>() / m;
                let var: f64 = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let rs = 1.0 / (var + GN_EPS).sqrt();
                rstd[bi * groups + g] = rs;
                for (i, &v) in seg.iter().enumerate() {
                    let xh = (v - mean) * rs;
                    xhat[start + i] = xh;
                    let ch = g * cpg + i / s;
                    out[start + i] = gt[ch] * xh + bt[ch];
                }
            }
        }
        let req = self.req(x) || self.slot_req(&gamma) || self.slot_req(&beta);
        let keep = self.grad_enabled && req;
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat: if keep { xhat } else { Vec::new() },
                rstd: if keep { rstd } else { Vec::new() },
            },
            Tensor::new(xs, out),
            req,
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].data();
        let out: Vec<f64> = v.iter().map(|&a| a * sigmoid(a)).collect();
        let shape = self.values[x.0].shape().to_vec();
        let req = self.req(x);
        self.push(Op::Silu { x }, Tensor::new(shape, out), req)
    }

    /// a + c*b on identical shapes.
    pub fn axpy_node(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let out: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| x + c * y).collect();
        let shape = self.values[a.0].shape().to_vec();
        let req = self.req(a) || self.req(b);
        self.push(Op::Axpy { a, b, c }, Tensor::new(shape, out), req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.axpy_node(a, b, 1.0)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.values[x.0].data().iter().map(|&v| c * v).collect();
        let shape = self.values[x.0].shape().to_vec();
        let req = self.req(x);
        self.push(Op::Scale { x, c }, Tensor::new(shape, out), req)
    }

    /// Concatenation along the channel axis of [B,C,...] tensors.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(&sa[2..], &sb[2..], "spatial dims differ: {sa:?} vs {sb:?}");
        let (bsz, ca, s) = bcs(&sa);
        let cb = sb[1];
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let mut out = vec![0.0f64; bsz * (ca + cb) * s];
        let ad = self.values[a.0].data();
        let bd = self.values[b.0].data();
        for bi in 0..bsz {
            out[bi * (ca + cb) * s..bi * (ca + cb) * s + ca * s]
                .copy_from_slice(&ad[bi * ca * s..(bi + 1) * ca * s]);
            out[bi * (ca + cb) * s + ca * s..(bi + 1) * (ca + cb) * s]
                .copy_from_slice(&bd[bi * cb * s..(bi + 1) * cb * s]);
        }
        let req = self.req(a) || self.req(b);
        self.push(Op::ConcatC { a, b }, Tensor::new(shape, out), req)
    }

    /// x[B,C,spatial] + bias[B,C] broadcast over the spatial axes.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let (bsz, c, s) = bcs(&xs);
        assert_eq!(self.value(bias).shape(), &[bsz, c]);
        let xd = self.values[x.0].data();
        let bd = self.values[bias.0].data();
        let mut out = xd.to_vec();
        for bi in 0..bsz {
            for ch in 0..c {
                let bv = bd[bi * c + ch];
                for o in &mut out[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                    *o += bv;
                }
            }
        }
        let req = self.req(x) || self.req(bias);
        self.push(Op::AddChannelBias { x, bias }, Tensor::new(xs, out), req)
    }

    /// Nearest-neighbor 2x upsampling of the three spatial axes.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 5);
        let (bsz, c, h, w, d) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (oh, ow, od) = (2 * h, 2 * w, 2 * d);
        let xd = self.values[x.0].data();
        let mut out = vec![0.0f64; bsz * c * oh * ow * od];
        for bc in 0..bsz * c {
            let src = &xd[bc * h * w * d..(bc + 1) * h * w * d];
            let dst = &mut out[bc * oh * ow * od..(bc + 1) * oh * ow * od];
            for hh in 0..oh {
                for ww in 0..ow {
                    let srow = &src[((hh / 2) * w + ww / 2) * d..((hh / 2) * w + ww / 2 + 1) * d];
                    let drow = &mut dst[(hh * ow + ww) * od..(hh * ow + ww + 1) * od];
                    for dd in 0..od {
                        drow[dd] = srow[dd / 2];
                    }
                }
            }
        }
        let req = self.req(x);
        self.push(
            Op::Upsample2 { x },
            Tensor::new(vec![bsz, c, oh, ow, od], out),
            req,
        )
    }

    /// y[B,O] = x[B,I] · w[O,I]^T + b
    pub fn linear(&mut self, store: &ParamStore, x: NodeId, w: PSlot, b: Option<PSlot>) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2);
        let (bsz, i) = (xs[0], xs[1]);
        let wt = w.get(store);
        let o = wt.shape()[0];
        assert_eq!(wt.shape()[1], i);
        let mut out = vec![0.0f64; bsz * o];
        matmul_nt(self.values[x.0].data(), wt.data(), bsz, i, o, &mut out);
        if let Some(bs) = &b {
            let bt = bs.get(store);
            for bi in 0..bsz {
                axpy(&mut out[bi * o..(bi + 1) * o], bt.data(), 1.0);
            }
        }
        let req = self.req(x)
            || self.slot_req(&w)
            || b.as_ref().map(|s| self.slot_req(s)).unwrap_or(false);
        self.push(Op::Linear { x, w, b }, Tensor::new(vec![bsz, o], out), req)
    }

    /// Single-head self-attention over all voxels of each sample, with
    /// scores softmax(Q^T K / sqrt(C)); returns W_o · (V P^T) without the
    /// residual (add it separately).
    pub fn attention(
        &mut self,
        store: &ParamStore,
        x: NodeId,
        wq: PSlot,
        wk: PSlot,
        wv: PSlot,
        wo: PSlot,
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let (bsz, c, n) = bcs(&xs);
        for s in [&wq, &wk, &wv, &wo] {
            assert_eq!(s.get(store).shape(), &[c, c]);
        }
        let inv = 1.0 / (c as f64).sqrt();
        let xd = self.values[x.0].data();
        let mut out = vec![0.0f64; xd.len()];
        let req = self.req(x)
            || [&wq, &wk, &wv, &wo].iter().any(|s| self.slot_req(s));
        let keep = self.grad_enabled && req;
        let mut saved = if keep {
            Some(AttnSaved {
                q: vec![0.0; bsz * c * n],
                k: vec![0.0; bsz * c * n],
                v: vec![0.0; bsz * c * n],
                p: vec![0.0; bsz * n * n],
                o: vec![0.0; bsz * c * n],
            })
        } else {
            None
        };
        let (wqd, wkd, wvd, wod) = (
            wq.get(store).data().to_vec(),
            wk.get(store).data().to_vec(),
            wv.get(store).data().to_vec(),
            wo.get(store).data().to_vec(),
        );
        for bi in 0..bsz {
            let xb = &xd[bi * c * n..(bi + 1) * c * n];
            let mut q = vec![0.0f64; c * n];
            let mut k = vec![0.0f64; c * n];
            let mut v = vec![0.0f64; c * n];
            matmul_nn(&wqd, xb, c, c, n, &mut q);
            matmul_nn(&wkd, xb, c, c, n, &mut k);
            matmul_nn(&wvd, xb, c, c, n, &mut v);
            let mut p = vec![0.0f64; n * n];
            matmul_tn(&q, &k, n, c, n, &mut p);
            for sv in &mut p {
                *sv *= inv;
            }
            softmax_rows(&mut p, n, n);
            let mut o = vec![0.0f64; c * n];
            matmul_nt(&v, &p, c, n, n, &mut o);
            let ob = &mut out[bi * c * n..(bi + 1) * c * n];
            matmul_nn(&wod, &o, c, c, n, ob);
            if let Some(sv) = saved.as_mut() {
                sv.q[bi * c * n..(bi + 1) * c * n].copy_from_slice(&q);
                sv.k[bi * c * n..(bi + 1) * c * n].copy_from_slice(&k);
                sv.v[bi * c * n..(bi + 1) * c * n].copy_from_slice(&v);
                sv.p[bi * n * n..(bi + 1) * n * n].copy_from_slice(&p);
                sv.o[bi * c * n..(bi + 1) * c * n].copy_from_slice(&o);
            }
        }
        self.push(
            Op::Attention {
                x,
                wq,
                wk,
                wv,
                wo,
                saved,
            },
            Tensor::new(xs, out),
            req,
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let (bsz, c, s) = bcs(&xs);
        let xd = self.values[x.0].data();
        let mut out = vec![0.0f64; bsz * c];
        for bc in 0..bsz * c {
            out[bc] = xd[bc * s..(bc + 1) * s].iter().sum::<f64>() / s as f64;
        }
        let req = self.req(x);
        self.push(Op::GlobalAvgPool { x }, Tensor::new(vec![bsz, c], out), req)
    }

    /// Per-sample affine combination ax[b]*x + ay[b]*y, e.g. recovering a
    /// clean-image estimate from a velocity prediction inside the graph.
    pub fn lincomb_per_sample(
        &mut self,
        x: NodeId,
        y: NodeId,
        ax: Vec<f64>,
        ay: Vec<f64>,
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(self.value(y).shape(), &xs[..]);
        let bsz = xs[0];
        assert_eq!(ax.len(), bsz);
        assert_eq!(ay.len(), bsz);
        let per = self.value(x).numel() / bsz;
        let xd = self.values[x.0].data();
        let yd = self.values[y.0].data();
        let mut out = vec![0.0f64; xd.len()];
        for bi in 0..bsz {
            for i in bi * per..(bi + 1) * per {
                out[i] = ax[bi] * xd[i] + ay[bi] * yd[i];
            }
        }
        let req = self.req(x) || self.req(y);
        self.push(
            Op::LincombPerSample { x, y, ax, ay },
            Tensor::new(xs, out),
            req,
        )
    }

    /// Mean squared error over every element -> scalar node.
    pub fn mse_loss(&mut self, p: NodeId, r: NodeId) -> NodeId {
        assert_eq!(self.value(p).shape(), self.value(r).shape());
        let pd = self.values[p.0].data();
        let rd = self.values[r.0].data();
        let n = pd.len() as f64;
        let sum: f64 = pd.iter().zip(rd).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let req = self.req(p) || self.req(r);
        self.push(Op::MseLoss { p, r }, Tensor::scalar(sum / n), req)
    }

    /// Smooth-L1 (Huber, delta=1) mean per sample -> [B].
    pub fn smooth_l1_per_sample(&mut self, p: NodeId, r: NodeId) -> NodeId {
        assert_eq!(self.value(p).shape(), self.value(r).shape());
        let bsz = self.value(p).shape()[0];
        let per = self.value(p).numel() / bsz;
        let pd = self.values[p.0].data();
        let rd = self.values[r.0].data();
        let mut out = vec![0.0f64; bsz];
        for bi in 0..bsz {
            let mut acc = 0.0;
            for i in bi * per..(bi + 1) * per {
                let d = pd[i] - rd[i];
                acc += if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                };
            }
            out[bi] = acc / per as f64;
        }
        let req = self.req(p) || self.req(r);
        self.push(
            Op::SmoothL1PerSample { p, r },
            Tensor::new(vec![bsz], out),
            req,
        )
    }

    /// (1/B) sum_b w_b * x_b -> scalar.
    pub fn scaled_dot_mean(&mut self, x: NodeId, w: Vec<f64>) -> NodeId {
        let xd = self.values[x.0].data();
        assert_eq!(xd.len(), w.len());
        let bsz = w.len() as f64;
        let sum: f64 = xd.iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let req = self.req(x);
        self.push(Op::ScaledDotMean { x, w }, Tensor::scalar(sum / bsz), req)
    }

    /// Mean cross-entropy of logits [B,K] against integer labels -> scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let ls = self.value(logits).shape().to_vec();
        assert_eq!(ls.len(), 2);
        let (bsz, k) = (ls[0], ls[1]);
        assert_eq!(labels.len(), bsz);
        let mut probs = self.values[logits.0].data().to_vec();
        softmax_rows(&mut probs, bsz, k);
        let mut loss = 0.0;
        for (bi, &y) in labels.iter().enumerate() {
            assert!(y < k, "label {y} out of range {k}");
            loss -= probs[bi * k + y].max(1e-300).ln();
        }
        let req = self.req(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
            Tensor::scalar(loss / bsz as f64),
            req,
        )
    }

    /// Reverse pass from a scalar loss node, accumulating parameter
    /// gradients into `store`. Returns the gradients of `wanted` nodes
    /// (inputs created with [`Graph::input_with_grad`]).
    pub fn backward(
        &self,
        loss: NodeId,
        store: &mut ParamStore,
        wanted: &[NodeId],
    ) -> Vec<Tensor> {
        assert!(self.grad_enabled, "backward on a no-grad graph");
        assert_eq!(self.value(loss).numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.ops.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let up = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(i, &up, &mut grads, store);
            // Keep the taken gradient available if someone downstream also
            // wants this node's gradient explicitly.
            if wanted.iter().any(|w| w.0 == i) {
                grads[i] = Some(up);
            }
        }
        wanted
            .iter()
            .map(|w| {
                grads[w.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*w).shape().to_vec()))
            })
            .collect()
    }

    fn accum(&self, grads: &mut [Option<Tensor>], node: NodeId, delta: &[f64]) {
        if !self.requires[node.0] {
            return;
        }
        let g = grads[node.0]
            .get_or_insert_with(|| Tensor::zeros(self.value(node).shape().to_vec()));
        axpy(g.data_mut(), delta, 1.0);
    }

    fn accum_param(&self, store: &mut ParamStore, slot: &PSlot, delta: &[f64]) {
        if let PSlot::Train(id) = slot {
            axpy(store.grad_mut(*id).data_mut(), delta, 1.0);
        }
    }

    fn backward_op(
        &self,
        i: usize,
        up: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) {
        match &self.ops[i] {
            Op::Input => {}
            Op::Conv3d {
                x,
                w,
                b,
                ksize,
                stride,
                col,
            } => {
                let (ksize, stride) = (*ksize, *stride);
                let pad: usize = if ksize == 3 { 1 } else { 0 };
                let xs = self.value(*x).shape();
                let (bsz, cin, h, wd, d) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
                let os = self.value(NodeId(i)).shape();
                let od = [os[2], os[3], os[4]];
                let v = od[0] * od[1] * od[2];
                let rows = cin * ksize * ksize * ksize;
                let cout = os[1];
                let wdata = w.get(store).data().to_vec();
                let upd = up.data();

                // Bias gradient: per-channel sums.
                if let Some(bs) = b {
                    if matches!(bs, PSlot::Train(_)) {
                        let mut db = vec![0.0f64; cout];
                        for bi in 0..bsz {
                            for c in 0..cout {
                                db[c] += upd[(bi * cout + c) * v..(bi * cout + c + 1) * v]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                        self.accum_param(store, bs, &db);
                    }
                }

                let w_train = matches!(w, PSlot::Train(_));
                let x_req = self.req(*x);
                let mut dw = if w_train {
                    Some(vec![0.0f64; cout * rows])
                } else {
                    None
                };
                let mut dx = if x_req {
                    Some(vec![0.0f64; bsz * cin * h * wd * d])
                } else {
                    None
                };
                let k1 = ksize == 1 && stride == 1;
                let mut dcol = if x_req && !k1 {
                    vec![0.0f64; rows * v]
                } else {
                    Vec::new()
                };
                for bi in 0..bsz {
                    let dy = &upd[bi * cout * v..(bi + 1) * cout * v];
                    if let Some(dwv) = dw.as_mut() {
                        if k1 {
                            let xb = &self.values[x.0].data()
                                [bi * cin * h * wd * d..(bi + 1) * cin * h * wd * d];
                            matmul_nt(dy, xb, cout, v, rows, dwv);
                        } else {
                            let ca = col.as_ref().expect("col saved for trainable conv");
                            matmul_nt(dy, &ca[bi * rows * v..(bi + 1) * rows * v], cout, v, rows, dwv);
                        }
                    }
                    if let Some(dxv) = dx.as_mut() {
                        let dxb = &mut dxv[bi * cin * h * wd * d..(bi + 1) * cin * h * wd * d];
                        if k1 {
                            matmul_tn(&wdata, dy, rows, cout, v, dxb);
                        } else {
                            dcol.fill(0.0);
                            matmul_tn(&wdata, dy, rows, cout, v, &mut dcol);
                            col2im_add(&dcol, cin, [h, wd, d], ksize, stride, pad as i64, od, dxb);
                        }
                    }
                }
                if let Some(dwv) = dw {
                    self.accum_param(store, w, &dwv);
                }
                if let Some(dxv) = dx {
                    self.accum(grads, *x, &dxv);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let xs = self.value(*x).shape();
                let (bsz, c, s) = bcs(xs);
                let cpg = c / groups;
                let m = (cpg * s) as f64;
                let gd = gamma.get(store).data().to_vec();
                let upd = up.data();

                if matches!(beta, PSlot::Train(_)) {
                    let mut db = vec![0.0f64; c];
                    for bi in 0..bsz {
                        for ch in 0..c {
                            db[ch] += upd[(bi * c + ch) * s..(bi * c + ch + 1) * s]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    self.accum_param(store, beta, &db);
                }
                if matches!(gamma, PSlot::Train(_)) {
                    let mut dg = vec![0.0f64; c];
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let off = (bi * c + ch) * s;
                            dg[ch] += upd[off..off + s]
                                .iter()
                                .zip(&xhat[off..off + s])
                                .map(|(&a, &b)| a * b)
                                .sum::<f64>();
                        }
                    }
                    self.accum_param(store, gamma, &dg);
                }
                if self.req(*x) {
                    let mut dx = vec![0.0f64; upd.len()];
                    for bi in 0..bsz {
                        for g in 0..*groups {
                            let start = bi * c * s + g * cpg * s;
                            // dxhat = dy * gamma_ch
                            let mut mean1 = 0.0;
                            let mut mean2 = 0.0;
                            for idx in 0..cpg * s {
                                let ch = g * cpg + idx / s;
                                let dxh = upd[start + idx] * gd[ch];
                                mean1 += dxh;
                                mean2 += dxh * xhat[start + idx];
                            }
                            mean1 /= m;
                            mean2 /= m;
                            let rs = rstd[bi * groups + g];
                            for idx in 0..cpg * s {
                                let ch = g * cpg + idx / s;
                                let dxh = upd[start + idx] * gd[ch];
                                dx[start + idx] = rs * (dxh - mean1 - xhat[start + idx] * mean2);
                            }
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Op::Silu { x } => {
                let xd = self.values[x.0].data();
                let dx: Vec<f64> = up
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(&u, &a)| {
                        let sg = sigmoid(a);
                        u * sg * (1.0 + a * (1.0 - sg))
                    })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Axpy { a, b, c } => {
                self.accum(grads, *a, up.data());
                if self.req(*b) {
                    let db: Vec<f64> = up.data().iter().map(|&u| c * u).collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = up.data().iter().map(|&u| c * u).collect();
                self.accum(grads, *x, &dx);
            }
            Op::ConcatC { a, b } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let (bsz, ca, s) = bcs(&sa);
                let cb = sb[1];
                let upd = up.data();
                if self.req(*a) {
                    let mut da = vec![0.0f64; bsz * ca * s];
                    for bi in 0..bsz {
                        da[bi * ca * s..(bi + 1) * ca * s].copy_from_slice(
                            &upd[bi * (ca + cb) * s..bi * (ca + cb) * s + ca * s],
                        );
                    }
                    self.accum(grads, *a, &da);
                }
                if self.req(*b) {
                    let mut db = vec![0.0f64; bsz * cb * s];
                    for bi in 0..bsz {
                        db[bi * cb * s..(bi + 1) * cb * s].copy_from_slice(
                            &upd[bi * (ca + cb) * s + ca * s..(bi + 1) * (ca + cb) * s],
                        );
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::AddChannelBias { x, bias } => {
                self.accum(grads, *x, up.data());
                if self.req(*bias) {
                    let xs = self.value(*x).shape();
                    let (bsz, c, s) = bcs(xs);
                    let mut db = vec![0.0f64; bsz * c];
                    for bc in 0..bsz * c {
                        db[bc] = up.data()[bc * s..(bc + 1) * s].iter().sum();
                    }
                    self.accum(grads, *bias, &db);
                }
            }
            Op::Upsample2 { x } => {
                let xs = self.value(*x).shape();
                let (bsz, c, h, w, d) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
                let (ow, od) = (2 * w, 2 * d);
                let upd = up.data();
                let mut dx = vec![0.0f64; bsz * c * h * w * d];
                for bc in 0..bsz * c {
                    let dst = &mut dx[bc * h * w * d..(bc + 1) * h * w * d];
                    let src = &upd[bc * 8 * h * w * d..(bc + 1) * 8 * h * w * d];
                    for hh in 0..2 * h {
                        for ww in 0..ow {
                            let drow = &mut dst[((hh / 2) * w + ww / 2) * d..((hh / 2) * w + ww / 2 + 1) * d];
                            let srow = &src[(hh * ow + ww) * od..(hh * ow + ww + 1) * od];
                            for dd in 0..od {
                                drow[dd / 2] += srow[dd];
                            }
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (bsz, icount) = (xs[0], xs[1]);
                let o = self.value(NodeId(i)).shape()[1];
                let upd = up.data();
                if let Some(bs) = b {
                    if matches!(bs, PSlot::Train(_)) {
                        let mut db = vec![0.0f64; o];
                        for bi in 0..bsz {
                            axpy(&mut db, &upd[bi * o..(bi + 1) * o], 1.0);
                        }
                        self.accum_param(store, bs, &db);
                    }
                }
                if matches!(w, PSlot::Train(_)) {
                    let mut dw = vec![0.0f64; o * icount];
                    matmul_tn(upd, self.values[x.0].data(), o, bsz, icount, &mut dw);
                    self.accum_param(store, w, &dw);
                }
                if self.req(*x) {
                    let wd = w.get(store).data().to_vec();
                    let mut dx = vec![0.0f64; bsz * icount];
                    matmul_nn(upd, &wd, bsz, o, icount, &mut dx);
                    self.accum(grads, *x, &dx);
                }
            }
            Op::Attention {
                x,
                wq,
                wk,
                wv,
                wo,
                saved,
            } => {
                let saved = saved.as_ref().expect("attention context saved in grad mode");
                let xs = self.value(*x).shape();
                let (bsz, c, n) = bcs(xs);
                let inv = 1.0 / (c as f64).sqrt();
                let upd = up.data();
                let xd = self.values[x.0].data();
                let (wqd, wkd, wvd, wod) = (
                    wq.get(store).data().to_vec(),
                    wk.get(store).data().to_vec(),
                    wv.get(store).data().to_vec(),
                    wo.get(store).data().to_vec(),
                );
                let mut dwq = vec![0.0f64; c * c];
                let mut dwk = vec![0.0f64; c * c];
                let mut dwv = vec![0.0f64; c * c];
                let mut dwo = vec![0.0f64; c * c];
                let mut dx_all = if self.req(*x) {
                    Some(vec![0.0f64; xd.len()])
                } else {
                    None
                };
                for bi in 0..bsz {
                    let dy = &upd[bi * c * n..(bi + 1) * c * n];
                    let xb = &xd[bi * c * n..(bi + 1) * c * n];
                    let q = &saved.q[bi * c * n..(bi + 1) * c * n];
                    let k = &saved.k[bi * c * n..(bi + 1) * c * n];
                    let v = &saved.v[bi * c * n..(bi + 1) * c * n];
                    let p = &saved.p[bi * n * n..(bi + 1) * n * n];
                    let o = &saved.o[bi * c * n..(bi + 1) * c * n];

                    matmul_nt(dy, o, c, n, c, &mut dwo);
                    let mut d_o = vec![0.0f64; c * n];
                    matmul_tn(&wod, dy, c, c, n, &mut d_o);

                    let mut dv = vec![0.0f64; c * n];
                    matmul_nn(&d_o, p, c, n, n, &mut dv);
                    let mut dp = vec![0.0f64; n * n];
                    matmul_tn(&d_o, v, n, c, n, &mut dp);

                    // Softmax backward per row, then the 1/sqrt(C) scale.
                    let mut ds = vec![0.0f64; n * n];
                    for r in 0..n {
                        let pr = &p[r * n..(r + 1) * n];
                        let dpr = &dp[r * n..(r + 1) * n];
                        let dot: f64 = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
                        for cidx in 0..n {
                            ds[r * n + cidx] = pr[cidx] * (dpr[cidx] - dot) * inv;
                        }
                    }

                    let mut dq = vec![0.0f64; c * n];
                    matmul_nt(k, &ds, c, n, n, &mut dq);
                    let mut dk = vec![0.0f64; c * n];
                    matmul_nn(q, &ds, c, n, n, &mut dk);

                    matmul_nt(&dq, xb, c, n, c, &mut dwq);
                    matmul_nt(&dk, xb, c, n, c, &mut dwk);
                    matmul_nt(&dv, xb, c, n, c, &mut dwv);
                    if let Some(dxa) = dx_all.as_mut() {
                        let dxb = &mut dxa[bi * c * n..(bi + 1) * c * n];
                        matmul_tn(&wqd, &dq, c, c, n, dxb);
                        matmul_tn(&wkd, &dk, c, c, n, dxb);
                        matmul_tn(&wvd, &dv, c, c, n, dxb);
                    }
                }
                self.accum_param(store, wq, &dwq);
                self.accum_param(store, wk, &dwk);
                self.accum_param(store, wv, &dwv);
                self.accum_param(store, wo, &dwo);
                if let Some(dxa) = dx_all {
                    self.accum(grads, *x, &dxa);
                }
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let (bsz, c, s) = bcs(xs);
                let mut dx = vec![0.0f64; bsz * c * s];
                for bc in 0..bsz * c {
                    let g = up.data()[bc] / s as f64;
                    for v in &mut dx[bc * s..(bc + 1) * s] {
                        *v = g;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::LincombPerSample { x, y, ax, ay } => {
                let bsz = ax.len();
                let per = up.numel() / bsz;
                let upd = up.data();
                if self.req(*x) {
                    let mut dx = vec![0.0f64; upd.len()];
                    for bi in 0..bsz {
                        for idx in bi * per..(bi + 1) * per {
                            dx[idx] = ax[bi] * upd[idx];
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
                if self.req(*y) {
                    let mut dy = vec![0.0f64; upd.len()];
                    for bi in 0..bsz {
                        for idx in bi * per..(bi + 1) * per {
                            dy[idx] = ay[bi] * upd[idx];
                        }
                    }
                    self.accum(grads, *y, &dy);
                }
            }
            Op::MseLoss { p, r } => {
                let pd = self.values[p.0].data();
                let rd = self.values[r.0].data();
                let n = pd.len() as f64;
                let u = up.item();
                if self.req(*p) {
                    let dp: Vec<f64> = pd
                        .iter()
                        .zip(rd)
                        .map(|(&a, &b)| u * 2.0 * (a - b) / n)
                        .collect();
                    self.accum(grads, *p, &dp);
                }
                if self.req(*r) {
                    let dr: Vec<f64> = pd
                        .iter()
                        .zip(rd)
                        .map(|(&a, &b)| -u * 2.0 * (a - b) / n)
                        .collect();
                    self.accum(grads, *r, &dr);
                }
            }
            Op::SmoothL1PerSample { p, r } => {
                let pd = self.values[p.0].data();
                let rd = self.values[r.0].data();
                let bsz = up.numel();
                let per = pd.len() / bsz;
                let upd = up.data();
                let grad_of = |a: f64, b: f64| {
                    let d = a - b;
                    if d.abs() < 1.0 {
                        d
                    } else {
                        d.signum()
                    }
                };
                if self.req(*p) {
                    let mut dp = vec![0.0f64; pd.len()];
                    for bi in 0..bsz {
                        let scale = upd[bi] / per as f64;
                        for idx in bi * per..(bi + 1) * per {
                            dp[idx] = scale * grad_of(pd[idx], rd[idx]);
                        }
                    }
                    self.accum(grads, *p, &dp);
                }
                if self.req(*r) {
                    let mut dr = vec![0.0f64; pd.len()];
                    for bi in 0..bsz {
                        let scale = upd[bi] / per as f64;
                        for idx in bi * per..(bi + 1) * per {
                            dr[idx] = -scale * grad_of(pd[idx], rd[idx]);
                        }
                    }
                    self.accum(grads, *r, &dr);
                }
            }
            Op::ScaledDotMean { x, w } => {
                let bsz = w.len() as f64;
                let u = up.item();
                let dx: Vec<f64> = w.iter().map(|&wv| u * wv / bsz).collect();
                self.accum(grads, *x, &dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let bsz = labels.len();
                let k = probs.len() / bsz;
                let u = up.item();
                let mut dl = probs.clone();
                for (bi, &y) in labels.iter().enumerate() {
                    dl[bi * k + y] -= 1.0;
                }
                for v in &mut dl {
                    *v *= u / bsz as f64;
                }
                self.accum(grads, *logits, &dl);
            }
        }
    }
}
