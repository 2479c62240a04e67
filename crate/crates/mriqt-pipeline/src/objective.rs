//! The differentiable training objective, built on the tape graph so one
//! backward pass covers both loss terms: the prediction MSE and the
//! SNR-weighted perceptual alignment of the in-graph clean-image estimate.

use crate::config::PredictionKind;
use crate::error::{PipelineError, Result};
use mriqt_core::VolumeGrid;
use mriqt_denoiser::{ConditionBatch, Denoiser};
use mriqt_diffusion::{snr_weight, v_from, NoiseSchedule};
use mriqt_nn::{Graph, NodeId, Tensor};
use mriqt_perceptual::{FeatureExtractor, PerceptualConfig};

/// Handles into the objective graph; `total` is the scalar to backprop.
/// `perceptual` (when present) already carries the λ_p·w_SNR(t) factor, so
/// `value(total) = value(v_mse) + value(perceptual)` holds exactly.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub v_mse: NodeId,
    pub perceptual: Option<NodeId>,
    pub total: NodeId,
}

/// Stacks per-sample volumes into a [B, 1, H, W, D] graph constant.
fn stack_volumes(vols: &[VolumeGrid]) -> Tensor {
    let [h, w, d] = vols[0].shape();
    let per = h * w * d;
    let mut data = Vec::with_capacity(vols.len() * per);
    for v in vols {
        data.extend(v.data().iter().map(|&x| x as f64));
    }
    Tensor::new(vec![vols.len(), 1, h, w, d], data)
}

/// Builds L = ‖ŷ − y‖²/N + λ_p·mean_b[w_SNR(t_b)·Σ_l w_l·SmoothL1(φ_l(x̂₀), φ_l(x₀))]
/// for one batch, where y is the velocity or the noise depending on the
/// parametrization and x̂₀ is recovered from ŷ inside the graph so the
/// perceptual term trains the network end to end.
///
/// `x0` and `eps` are the clean targets and the noise draws that produced
/// `batch`'s noised volumes, in batch order. The extractor participates
/// with frozen weights; only model parameters accumulate gradients.
pub fn objective_graph(
    g: &mut Graph,
    model: &Denoiser,
    extractor: Option<&FeatureExtractor>,
    batch: &ConditionBatch,
    x0: &[VolumeGrid],
    eps: &[VolumeGrid],
    sch: &NoiseSchedule,
    prediction: PredictionKind,
    pcfg: &PerceptualConfig,
) -> Result<ObjectiveNodes> {
    pcfg.validate()?;
    let bsz = batch.len();
    if x0.len() != bsz || eps.len() != bsz {
        return Err(PipelineError::ConfigInvalid(format!(
            "batch {} vs {} targets / {} noise draws",
            bsz,
            x0.len(),
            eps.len()
        )));
    }

    let out = model.forward_batch(g, batch)?;

    // Prediction target, per parametrization.
    let mut targets = Vec::with_capacity(bsz);
    for bi in 0..bsz {
        targets.push(match prediction {
            PredictionKind::V => v_from(&x0[bi], &eps[bi], batch.t()[bi], sch)?,
            PredictionKind::Eps => eps[bi].clone(),
        });
    }
    let target = g.input(stack_volumes(&targets));
    let v_mse = g.mse_loss(out, target);

    if pcfg.lambda_p == 0.0 {
        return Ok(ObjectiveNodes {
            v_mse,
            perceptual: None,
            total: v_mse,
        });
    }
    let fe = extractor.ok_or_else(|| {
        PipelineError::ConfigInvalid("lambda_p > 0 requires a feature extractor".into())
    })?;
    fe.check_shape(batch.shape())?;
    if pcfg.layer_weights.len() != fe.n_stages() {
        return Err(PipelineError::ConfigInvalid(format!(
            "{} layer weights for {} extractor stages",
            pcfg.layer_weights.len(),
            fe.n_stages()
        )));
    }

    // x̂₀ from the prediction, per sample: the v form is
    // √ᾱ·x_t − √(1−ᾱ)·v̂, the ε form (x_t − √(1−ᾱ)·ε̂)/√ᾱ.
    let mut ax = Vec::with_capacity(bsz);
    let mut ay = Vec::with_capacity(bsz);
    for &t in batch.t() {
        let ab = sch.alpha_bar(t);
        match prediction {
            PredictionKind::V => {
                ax.push(ab.sqrt());
                ay.push(-(1.0 - ab).sqrt());
            }
            PredictionKind::Eps => {
                ax.push(1.0 / ab.sqrt());
                ay.push(-(1.0 - ab).sqrt() / ab.sqrt());
            }
        }
    }
    let xt_node = g.input(stack_volumes(batch.x_t()));
    let x0_hat = g.lincomb_per_sample(xt_node, out, ax, ay);
    let x0_node = g.input(stack_volumes(x0));

    let feats_hat = fe.features_into_graph(g, x0_hat);
    let feats_ref = fe.features_into_graph(g, x0_node);

    // Per-sample weight λ_p·w_SNR(t_b), folded into each stage's reduction.
    let mut wb = Vec::with_capacity(bsz);
    for &t in batch.t() {
        let w = if pcfg.snr_weighting {
            snr_weight(t, sch, pcfg.snr_kind)?
        } else {
            1.0
        };
        wb.push(pcfg.lambda_p * w);
    }
    let mut perceptual: Option<NodeId> = None;
    for (l, (&fh, &fr)) in feats_hat.iter().zip(&feats_ref).enumerate() {
        if pcfg.layer_weights[l] == 0.0 {
            continue;
        }
        let sl1 = g.smooth_l1_per_sample(fh, fr);
        let weights: Vec<f64> = wb.iter().map(|&w| w * pcfg.layer_weights[l]).collect();
        let term = g.scaled_dot_mean(sl1, weights);
        perceptual = Some(match perceptual {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    // validate() guarantees a positive layer weight exists when λ_p > 0.
    let perc = perceptual.expect("at least one live stage");
    let total = g.add(v_mse, perc);
    Ok(ObjectiveNodes {
        v_mse,
        perceptual: Some(perc),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mriqt_core::Modality;
    use mriqt_denoiser::DenoiserConfig;
    use mriqt_diffusion::{make_schedule, noise_like, q_sample, ScheduleKind};
    use mriqt_perceptual::ExtractorConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> Denoiser {
        let mut m = Denoiser::new(
            DenoiserConfig {
                base_channels: 4,
                channel_mults: vec![1, 2],
                attn_at_bottleneck: false,
                time_embed_dim: 8,
                ..Default::default()
            },
            seed,
        )
        .unwrap();
        m.jitter_params(0.01, seed ^ 1);
        m
    }

    fn tiny_extractor() -> FeatureExtractor {
        FeatureExtractor::new(
            ExtractorConfig {
                channels: vec![2, 2, 2],
                in_channels: 1,
            },
            7,
        )
        .unwrap()
    }

    fn vol(seed: u64) -> VolumeGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VolumeGrid::new(
            (0..512).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
            [8, 8, 8],
            [1.0; 3],
            Modality::HF,
            "s",
        )
        .unwrap()
    }

    fn make_batch(
        sch: &NoiseSchedule,
        ts: &[usize],
    ) -> (ConditionBatch, Vec<VolumeGrid>, Vec<VolumeGrid>) {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut x0s = Vec::new();
        let mut epss = Vec::new();
        let mut xts = Vec::new();
        let mut conds = Vec::new();
        for (i, &t) in ts.iter().enumerate() {
            let x0 = vol(100 + i as u64);
            let eps = noise_like(&x0, &mut rng);
            xts.push(q_sample(&x0, t, &eps, sch).unwrap());
            conds.push(vol(200 + i as u64));
            x0s.push(x0);
            epss.push(eps);
        }
        let batch = ConditionBatch::conditional(xts, conds, ts.to_vec()).unwrap();
        (batch, x0s, epss)
    }

    #[test]
    fn zero_lambda_makes_total_the_mse_node() {
        let sch = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let model = tiny_model(1);
        let (batch, x0s, epss) = make_batch(&sch, &[3, 17]);
        let pcfg = PerceptualConfig {
            lambda_p: 0.0,
            layer_weights: vec![0.0; 3],
            ..Default::default()
        };
        let mut g = Graph::new(true);
        let nodes = objective_graph(
            &mut g,
            &model,
            None,
            &batch,
            &x0s,
            &epss,
            &sch,
            PredictionKind::V,
            &pcfg,
        )
        .unwrap();
        assert!(nodes.perceptual.is_none());
        assert_eq!(nodes.total, nodes.v_mse);
        assert!(g.value(nodes.total).data()[0] > 0.0);
    }

    #[test]
    fn components_sum_exactly_to_total() {
        let sch = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let model = tiny_model(2);
        let fe = tiny_extractor();
        let (batch, x0s, epss) = make_batch(&sch, &[2, 9, 14]);
        let mut g = Graph::new(true);
        let nodes = objective_graph(
            &mut g,
            &model,
            Some(&fe),
            &batch,
            &x0s,
            &epss,
            &sch,
            PredictionKind::V,
            &PerceptualConfig::default(),
        )
        .unwrap();
        let mse = g.value(nodes.v_mse).data()[0];
        let perc = g.value(nodes.perceptual.unwrap()).data()[0];
        let total = g.value(nodes.total).data()[0];
        assert!(perc > 0.0);
        assert_eq!(total, mse + perc);
    }

    #[test]
    fn single_sample_matches_the_closed_form_breakdown() {
        // The graph objective for B = 1 must agree with the eval-mode
        // total_loss on the same prediction, up to f32 round-trips.
        let sch = make_schedule(ScheduleKind::Cosine, 30).unwrap();
        let model = tiny_model(3);
        let fe = tiny_extractor();
        let t = 11;
        let (batch, x0s, epss) = make_batch(&sch, &[t]);
        let pcfg = PerceptualConfig::default();

        let mut g = Graph::new(true);
        let nodes = objective_graph(
            &mut g,
            &model,
            Some(&fe),
            &batch,
            &x0s,
            &epss,
            &sch,
            PredictionKind::V,
            &pcfg,
        )
        .unwrap();

        let v_hat = model.predict_v(&batch).unwrap().remove(0);
        let v_true = v_from(&x0s[0], &epss[0], t, &sch).unwrap();
        let x0_hat = mriqt_diffusion::x0_from_v(&batch.x_t()[0], &v_hat, t, &sch).unwrap();
        let want =
            mriqt_perceptual::total_loss(&fe, &v_hat, &v_true, &x0_hat, &x0s[0], t, &sch, &pcfg)
                .unwrap();

        let got_total = g.value(nodes.total).data()[0];
        let got_mse = g.value(nodes.v_mse).data()[0];
        assert!(
            (got_mse - want.v_mse).abs() <= 1e-5 * want.v_mse.max(1e-9),
            "mse {got_mse} vs {}",
            want.v_mse
        );
        assert!(
            (got_total - want.total).abs() <= 1e-5 * want.total.max(1e-9),
            "total {got_total} vs {}",
            want.total
        );
    }

    #[test]
    fn eps_parametrization_targets_the_noise() {
        let sch = make_schedule(ScheduleKind::Linear, 20).unwrap();
        let model = tiny_model(4);
        let (batch, x0s, epss) = make_batch(&sch, &[6]);
        let mut g = Graph::new(false);
        let nodes = objective_graph(
            &mut g,
            &model,
            None,
            &batch,
            &x0s,
            &epss,
            &sch,
            PredictionKind::Eps,
            &PerceptualConfig {
                lambda_p: 0.0,
                layer_weights: vec![0.0; 3],
                ..Default::default()
            },
        )
        .unwrap();
        // Independent recomputation: MSE between the raw prediction and ε.
        let y = model.predict_v(&batch).unwrap().remove(0);
        let want = y
            .data()
            .iter()
            .zip(epss[0].data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / y.num_voxels() as f64;
        let got = g.value(nodes.v_mse).data()[0];
        assert!((got - want).abs() <= 1e-6 * want.max(1e-9), "{got} vs {want}");
    }

    #[test]
    fn missing_extractor_with_live_lambda_is_rejected() {
        let sch = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let model = tiny_model(5);
        let (batch, x0s, epss) = make_batch(&sch, &[4]);
        let err = {
            let mut g = Graph::new(true);
            objective_graph(
                &mut g,
                &model,
                None,
                &batch,
                &x0s,
                &epss,
                &sch,
                PredictionKind::V,
                &PerceptualConfig::default(),
            )
            .unwrap_err()
        };
        assert!(matches!(err, PipelineError::ConfigInvalid(_)), "{err}");
    }

    #[test]
    fn gradients_reach_the_model_through_both_terms() {
        // Backprop through MSE + perceptual must touch the stem conv; a
        // finite-difference probe on one weight confirms the direction.
        let sch = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let mut model = tiny_model(6);
        let fe = tiny_extractor();
        let (batch, x0s, epss) = make_batch(&sch, &[7, 13]);
        let pcfg = PerceptualConfig::default();

        let loss_at = |m: &Denoiser| {
            let mut g = Graph::new(true);
            let nodes = objective_graph(
                &mut g,
                m,
                Some(&fe),
                &batch,
                &x0s,
                &epss,
                &sch,
                PredictionKind::V,
                &pcfg,
            )
            .unwrap();
            g.value(nodes.total).data()[0]
        };

        let mut g = Graph::new(true);
        let nodes = objective_graph(
            &mut g,
            &model,
            Some(&fe),
            &batch,
            &x0s,
            &epss,
            &sch,
            PredictionKind::V,
            &pcfg,
        )
        .unwrap();
        let ids: Vec<_> = model.store().iter_ids().collect();
        g.backward(nodes.total, model.store_mut(), &[]);
        let (id, k) = (ids[0], 0);
        let analytic = model.store().grad(id).data()[k];

        let h = 1e-4;
        let base = model.store().value(id).data()[k];
        model.store_mut().value_mut(id).data_mut()[k] = base + h;
        let up = loss_at(&model);
        model.store_mut().value_mut(id).data_mut()[k] = base - h;
        let down = loss_at(&model);
        model.store_mut().value_mut(id).data_mut()[k] = base;
        let numeric = (up - down) / (2.0 * h);
        assert!(
            (analytic - numeric).abs() <= 1e-3 * numeric.abs().max(1e-6),
            "analytic {analytic} vs numeric {numeric}"
        );
    }
}
