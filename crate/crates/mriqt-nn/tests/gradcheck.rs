//! Central-difference gradient checks for every graph op, plus a composite
//! network mixing them. All in f64, fixed seeds, tight tolerances.

use mriqt_nn::{Graph, NodeId, PSlot, ParamStore, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;
const ABS_TOL: f64 = 1e-9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

/// Deterministic non-uniform weights to reduce any tensor to a scalar so
/// every output element influences the loss differently.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (0.37 * i as f64 + 0.2).sin() + 1.5).collect()
}

/// Builds the graph and returns the scalar loss node. `inputs` become
/// grad-tracked input nodes in order.
type Build = dyn Fn(&ParamStore, &mut Graph, &[NodeId]) -> NodeId;

fn forward_value(store: &ParamStore, inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new(false);
    let nodes: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(store, &mut g, &nodes);
    g.value(loss).item()
}

fn compare(analytic: f64, numeric: f64, what: &str) {
    let denom = analytic.abs().max(numeric.abs()).max(1.0);
    let rel = (analytic - numeric).abs() / denom;
    assert!(
        rel <= REL_TOL || (analytic - numeric).abs() <= ABS_TOL,
        "{what}: analytic {analytic:.12e} vs numeric {numeric:.12e} (rel {rel:.3e})"
    );
}

/// Checks every trainable parameter scalar and every element of every
/// grad-tracked input against central differences.
fn gradcheck(mut store: ParamStore, inputs: Vec<Tensor>, build: &Build) {
    // Analytic pass.
    store.zero_grads();
    let mut g = Graph::new(true);
    let nodes: Vec<NodeId> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let loss = build(&store, &mut g, &nodes);
    let input_grads = g.backward(loss, &mut store, &nodes);

    // Parameter perturbations.
    for id in store.iter_ids().collect::<Vec<_>>() {
        let n = store.value(id).numel();
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + H;
            let up = forward_value(&store, &inputs, build);
            store.value_mut(id).data_mut()[j] = orig - H;
            let down = forward_value(&store, &inputs, build);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = store.grad(id).data()[j];
            compare(analytic, numeric, &format!("param {}[{}]", store.name(id), j));
        }
    }

    // Input perturbations.
    let mut inputs = inputs;
    for (ii, ig) in input_grads.iter().enumerate() {
        for j in 0..inputs[ii].numel() {
            let orig = inputs[ii].data()[j];
            inputs[ii].data_mut()[j] = orig + H;
            let up = forward_value(&store, &inputs, build);
            inputs[ii].data_mut()[j] = orig - H;
            let down = forward_value(&store, &inputs, build);
            inputs[ii].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            compare(ig.data()[j], numeric, &format!("input {ii}[{j}]"));
        }
    }
}

fn probe_loss(g: &mut Graph, node: NodeId) -> NodeId {
    let w = probe_weights(g.value(node).numel());
    g.scaled_dot_mean(node, w)
}

#[test]
fn conv3_stride1_with_bias() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[3, 2, 3, 3, 3], &mut r, 0.5));
    let b = store.add("b", rand_tensor(&[3], &mut r, 0.5));
    let x = rand_tensor(&[2, 2, 4, 4, 4], &mut r, 1.0);
    gradcheck(
        store,
        vec![x],
        &move |s, g, inp| {
            let y = g.conv3d(s, inp[0], PSlot::Train(w), Some(PSlot::Train(b)), 3, 1);
            probe_loss(g, y)
        },
    );
}

#[test]
fn conv3_stride2_odd_extent() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[2, 1, 3, 3, 3], &mut r, 0.5));
    let x = rand_tensor(&[1, 1, 5, 5, 5], &mut r, 1.0);
    gradcheck(
        store,
        vec![x],
        &move |s, g, inp| {
            let y = g.conv3d(s, inp[0], PSlot::Train(w), None, 3, 2);
            probe_loss(g, y)
        },
    );
}

#[test]
fn conv1_pointwise() {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[4, 3, 1, 1, 1], &mut r, 0.7));
    let b = store.add("b", rand_tensor(&[4], &mut r, 0.5));
    let x = rand_tensor(&[2, 3, 3, 3, 3], &mut r, 1.0);
    gradcheck(
        store,
        vec![x],
        &move |s, g, inp| {
            let y = g.conv3d(s, inp[0], PSlot::Train(w), Some(PSlot::Train(b)), 1, 1);
            probe_loss(g, y)
        },
    );
}

#[test]
fn frozen_conv_passes_input_gradient_only() {
    let mut r = rng(14);
    let wt = std::rc::Rc::new(rand_tensor(&[2, 2, 3, 3, 3], &mut r, 0.5));
    let x = rand_tensor(&[1, 2, 4, 4, 4], &mut r, 1.0);
    let store = ParamStore::new();
    gradcheck(
        store,
        vec![x],
        &move |s, g, inp| {
            let y = g.conv3d(s, inp[0], PSlot::Frozen(wt.clone()), None, 3, 1);
            probe_loss(g, y)
        },
    );
}

#[test]
fn group_norm_gamma_beta_and_input() {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let gamma = store.add("gamma", rand_tensor(&[4], &mut r, 1.0));
    let beta = store.add("beta", rand_tensor(&[4], &mut r, 1.0));
    let x = rand_tensor(&[2, 4, 3, 3, 3], &mut r, 1.0);
    gradcheck(
        store,
        vec![x],
        &move |s, g, inp| {
            let y = g.group_norm(s, inp[0], PSlot::Train(gamma), PSlot::Train(beta), 2);
            probe_loss(g, y)
        },
    );
}

#[test]
fn silu_axpy_scale_chain() {
    let mut r = rng(16);
    let x = rand_tensor(&[2, 3, 2, 2, 2], &mut r, 2.0);
    let y = rand_tensor(&[2, 3, 2, 2, 2], &mut r, 2.0);
    gradcheck(
        ParamStore::new(),
        vec![x, y],
        &|_, g, inp| {
            let a = g.silu(inp[0]);
            let b = g.scale(inp[1], -0.7);
            let c = g.axpy_node(a, b, 2.5);
            let d = g.silu(c);
            probe_loss(g, d)
        },
    );
}

#[test]
fn concat_channels_routes_both_sides() {
    let mut r = rng(17);
    let a = rand_tensor(&[2, 2, 2, 2, 2], &mut r, 1.0);
    let b = rand_tensor(&[2, 3, 2, 2, 2], &mut r, 1.0);
    gradcheck(
        ParamStore::new(),
        vec![a, b],
        &|_, g, inp| {
            let c = g.concat_channels(inp[0], inp[1]);
            probe_loss(g, c)
        },
    );
}

#[test]
fn channel_bias_from_linear_embedding() {
    let mut r = rng(18);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[3, 5], &mut r, 0.6));
    let b = store.add("b", rand_tensor(&[3], &mut r, 0.6));
    let emb = rand_tensor(&[2, 5], &mut r, 1.0);
    let x = rand_tensor(&[2, 3, 2, 2, 2], &mut r, 1.0);
    gradcheck(
        store,
        vec![emb, x],
        &move |s, g, inp| {
            let bias = g.linear(s, inp[0], PSlot::Train(w), Some(PSlot::Train(b)));
            let y = g.add_channel_bias(inp[1], bias);
            probe_loss(g, y)
        },
    );
}

#[test]
fn upsample_nearest() {
    let mut r = rng(19);
    let x = rand_tensor(&[2, 2, 2, 2, 2], &mut r, 1.0);
    gradcheck(
        ParamStore::new(),
        vec![x],
        &|_, g, inp| {
            let y = g.upsample2(inp[0]);
            probe_loss(g, y)
        },
    );
}

#[test]
fn linear_cross_entropy_classifier() {
    let mut r = rng(20);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[4, 6], &mut r, 0.8));
    let b = store.add("b", rand_tensor(&[4], &mut r, 0.5));
    let x = rand_tensor(&[3, 6], &mut r, 1.0);
    gradcheck(
        store,
        vec![x],
        &move |s, g, inp| {
            let logits = g.linear(s, inp[0], PSlot::Train(w), Some(PSlot::Train(b)));
            g.cross_entropy(logits, vec![2, 0, 3])
        },
    );
}

#[test]
fn attention_all_projections() {
    let mut r = rng(21);
    let mut store = ParamStore::new();
    let c = 3;
    let wq = store.add("wq", rand_tensor(&[c, c], &mut r, 0.6));
    let wk = store.add("wk", rand_tensor(&[c, c], &mut r, 0.6));
    let wv = store.add("wv", rand_tensor(&[c, c], &mut r, 0.6));
    let wo = store.add("wo", rand_tensor(&[c, c], &mut r, 0.6));
    let x = rand_tensor(&[2, c, 2, 2, 2], &mut r, 1.0);
    gradcheck(
        store,
        vec![x],
        &move |s, g, inp| {
            let a = g.attention(s, inp[0], PSlot::Train(wq), PSlot::Train(wk), PSlot::Train(wv), PSlot::Train(wo));
            let y = g.add(inp[0], a);
            probe_loss(g, y)
        },
    );
}

#[test]
fn global_avg_pool_distributes() {
    let mut r = rng(22);
    let x = rand_tensor(&[2, 3, 2, 2, 2], &mut r, 1.0);
    gradcheck(
        ParamStore::new(),
        vec![x],
        &|_, g, inp| {
            let y = g.global_avg_pool(inp[0]);
            probe_loss(g, y)
        },
    );
}

#[test]
fn lincomb_per_sample_coefficients() {
    let mut r = rng(23);
    let x = rand_tensor(&[3, 2, 2, 2, 2], &mut r, 1.0);
    let y = rand_tensor(&[3, 2, 2, 2, 2], &mut r, 1.0);
    gradcheck(
        ParamStore::new(),
        vec![x, y],
        &|_, g, inp| {
            let z = g.lincomb_per_sample(inp[0], inp[1], vec![0.9, -0.4, 1.7], vec![0.1, 2.0, -0.6]);
            probe_loss(g, z)
        },
    );
}

#[test]
fn mse_loss_both_sides() {
    let mut r = rng(24);
    let p = rand_tensor(&[2, 2, 2, 2, 2], &mut r, 1.0);
    let t = rand_tensor(&[2, 2, 2, 2, 2], &mut r, 1.0);
    gradcheck(
        ParamStore::new(),
        vec![p, t],
        &|_, g, inp| g.mse_loss(inp[0], inp[1]),
    );
}

#[test]
fn smooth_l1_quadratic_region() {
    let mut r = rng(25);
    // Differences stay well inside |d| < 1.
    let p = rand_tensor(&[2, 3, 2, 2], &mut r, 0.3);
    let t = rand_tensor(&[2, 3, 2, 2], &mut r, 0.3);
    gradcheck(
        ParamStore::new(),
        vec![p, t],
        &|_, g, inp| {
            let per = g.smooth_l1_per_sample(inp[0], inp[1]);
            probe_loss(g, per)
        },
    );
}

#[test]
fn smooth_l1_linear_region() {
    let mut r = rng(26);
    // Differences pushed well past |d| > 1 so the linear branch is hit.
    let p = rand_tensor(&[2, 3, 2, 2], &mut r, 1.0).map(|v| v + 4.0);
    let t = rand_tensor(&[2, 3, 2, 2], &mut r, 1.0).map(|v| v - 4.0);
    gradcheck(
        ParamStore::new(),
        vec![p, t],
        &|_, g, inp| {
            let per = g.smooth_l1_per_sample(inp[0], inp[1]);
            probe_loss(g, per)
        },
    );
}

#[test]
fn composite_encoder_decoder_with_attention() {
    // conv -> GN -> SiLU -> strided conv -> attention -> upsample -> concat
    // skip -> conv -> per-sample lincomb -> MSE: one pass through every op
    // family a denoiser uses.
    let mut r = rng(27);
    let mut store = ParamStore::new();
    let c0 = store.add("c0.w", rand_tensor(&[3, 2, 3, 3, 3], &mut r, 0.4));
    let c0b = store.add("c0.b", rand_tensor(&[3], &mut r, 0.3));
    let g1 = store.add("g1.g", rand_tensor(&[3], &mut r, 0.8));
    let b1 = store.add("g1.b", rand_tensor(&[3], &mut r, 0.8));
    let cd = store.add("down.w", rand_tensor(&[4, 3, 3, 3, 3], &mut r, 0.4));
    let wq = store.add("att.q", rand_tensor(&[4, 4], &mut r, 0.5));
    let wk = store.add("att.k", rand_tensor(&[4, 4], &mut r, 0.5));
    let wv = store.add("att.v", rand_tensor(&[4, 4], &mut r, 0.5));
    let wo = store.add("att.o", rand_tensor(&[4, 4], &mut r, 0.5));
    let cu = store.add("up.w", rand_tensor(&[2, 7, 3, 3, 3], &mut r, 0.4));
    let x = rand_tensor(&[2, 2, 4, 4, 4], &mut r, 1.0);
    let target = rand_tensor(&[2, 2, 4, 4, 4], &mut r, 1.0);
    gradcheck(
        store,
        vec![x, target],
        &move |s, g, inp| {
            let h0 = g.conv3d(s, inp[0], PSlot::Train(c0), Some(PSlot::Train(c0b)), 3, 1);
            let h1 = g.group_norm(s, h0, PSlot::Train(g1), PSlot::Train(b1), 3);
            let h2 = g.silu(h1);
            let h3 = g.conv3d(s, h2, PSlot::Train(cd), None, 3, 2); // [2,4,2,2,2]
            let h4 = g.attention(s, h3, PSlot::Train(wq), PSlot::Train(wk), PSlot::Train(wv), PSlot::Train(wo));
            let h5 = g.add(h3, h4);
            let h6 = g.upsample2(h5); // [2,4,4,4,4]
            let h7 = g.concat_channels(h6, h2); // [2,7,4,4,4]
            let h8 = g.conv3d(s, h7, PSlot::Train(cu), None, 3, 1); // [2,2,4,4,4]
            let h9 = g.lincomb_per_sample(h8, inp[0], vec![0.8, 1.1], vec![0.2, -0.1]);
            g.mse_loss(h9, inp[1])
        },
    );
}
