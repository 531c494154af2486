//! Closed-form layer-by-layer backpropagation for the joint loss
//! L_FM + L_dur. Gradients are accumulated unnormalized (sums of squared
//! residuals); callers divide by batch frame/phone totals.

use crate::model::forward::{
    encode_text_cached, predict_durations_cached, silu_deriv, vf_forward_cached, Condition,
    DurationCache, EncoderCache, EstimatorCache,
};
use crate::model::{ModelConfig, ParamSet};
use crate::numeric::Tensor;
use crate::Result;

pub struct VfBatchItem<'a> {
    pub x_t: &'a Tensor,
    pub cond: &'a Condition,
    pub t: f64,
    pub target: &'a Tensor,
}

/// Backprop through the estimator for one utterance. `dout` is dL/d(output),
/// T x d. Returns dL/dy (T x c); dL/dx_t is discarded.
fn estimator_backward(
    params: &ParamSet,
    cfg: &ModelConfig,
    cache: &EstimatorCache,
    dout: &Tensor,
    grads: &mut ParamSet,
) -> Result<Tensor> {
    let frames = dout.shape()[0];
    let d = cfg.frame_dim;
    let n_layers = params.est_layers.len();
    let mut dy = Tensor::zeros(vec![frames, cfg.cond_dim]);
    for j in 0..frames {
        let g_out = dout.row(j);
        let h_last = cache.act[n_layers - 1].row(j);
        grads.est_out_w.add_outer(g_out, h_last, 1.0);
        for (b, &g) in grads.est_out_b.data_mut().iter_mut().zip(g_out) {
            *b += g;
        }
        let mut dh = params.est_out_w.matvec_t(g_out)?;
        for li in (0..n_layers).rev() {
            let pre = cache.pre[li].row(j);
            let da: Vec<f64> = dh
                .iter()
                .zip(pre)
                .map(|(&g, &p)| g * silu_deriv(p))
                .collect();
            let prev = if li == 0 {
                cache.h0.row(j)
            } else {
                cache.act[li - 1].row(j)
            };
            let lg = &mut grads.est_layers[li];
            lg.w.add_outer(&da, prev, 1.0);
            for (b, &g) in lg.b.data_mut().iter_mut().zip(&da) {
                *b += g;
            }
            lg.time_proj.add_outer(&da, &cache.t_emb, 1.0);
            dh = params.est_layers[li].w.matvec_t(&da)?;
        }
        // dh now spans the concatenated (x_t, y) input
        dy.row_mut(j).copy_from_slice(&dh[d..]);
    }
    Ok(dy)
}

/// Backprop through the text encoder given dL/d(latents).
fn encoder_backward(
    params: &ParamSet,
    cfg: &ModelConfig,
    cache: &EncoderCache,
    d_latents: &Tensor,
    grads: &mut ParamSet,
) -> Result<()> {
    let l = cache.phone_ids.len();
    for i in 0..l {
        let dl = d_latents.row(i);
        let z = cache.z.row(i);
        grads.enc_w2.add_outer(dl, z, 1.0);
        for (b, &g) in grads.enc_b2.data_mut().iter_mut().zip(dl) {
            *b += g;
        }
        let dz = params.enc_w2.matvec_t(dl)?;
        let da: Vec<f64> = dz.iter().zip(z).map(|(&g, &zv)| g * (1.0 - zv * zv)).collect();
        grads.enc_w1.add_outer(&da, cache.input.row(i), 1.0);
        for (b, &g) in grads.enc_b1.data_mut().iter_mut().zip(&da) {
            *b += g;
        }
        let din = params.enc_w1.matvec_t(&da)?;
        let p = cache.phone_ids[i];
        let emb_row = grads.phone_emb.row_mut(p);
        for (e, &g) in emb_row.iter_mut().zip(&din[..cfg.embed_dim]) {
            *e += g;
        }
        if let Some(se) = &mut grads.speaker_emb {
            let srow = se.row_mut(cache.speaker_id);
            for (s, &g) in srow.iter_mut().zip(&din[cfg.embed_dim..]) {
                *s += g;
            }
        }
    }
    Ok(())
}

/// Backprop through the duration predictor given dL/d(log-duration) per
/// phone. Returns dL/d(latents).
fn duration_backward(
    params: &ParamSet,
    latents: &Tensor,
    cache: &DurationCache,
    d_log_dur: &[f64],
    grads: &mut ParamSet,
) -> Result<Tensor> {
    let l = latents.shape()[0];
    let mut d_latents = Tensor::zeros(vec![l, latents.cols()]);
    for i in 0..l {
        let g = d_log_dur[i];
        let h = cache.h.row(i);
        grads.dur_w2.add_outer(&[g], h, 1.0);
        grads.dur_b2.data_mut()[0] += g;
        let dh: Vec<f64> = params.dur_w2.row(0).iter().map(|&w| w * g).collect();
        let da: Vec<f64> = dh.iter().zip(h).map(|(&g, &hv)| g * (1.0 - hv * hv)).collect();
        grads.dur_w1.add_outer(&da, latents.row(i), 1.0);
        for (b, &g) in grads.dur_b1.data_mut().iter_mut().zip(&da) {
            *b += g;
        }
        d_latents
            .row_mut(i)
            .copy_from_slice(&params.dur_w1.matvec_t(&da)?);
    }
    Ok(d_latents)
}

/// Estimator regression loss over a batch: mean over frames and dims of the
/// squared residual, with analytic gradients for the estimator parameters.
pub fn vf_backward(
    params: &ParamSet,
    cfg: &ModelConfig,
    batch: &[VfBatchItem<'_>],
) -> Result<(f64, ParamSet)> {
    let mut grads = ParamSet::zeros_like(params);
    let total_frames: usize = batch.iter().map(|it| it.x_t.shape()[0]).sum();
    let norm = 1.0 / (total_frames * cfg.frame_dim) as f64;
    let mut loss = 0.0;
    for item in batch {
        let (out, cache) = vf_forward_cached(params, cfg, item.x_t, item.cond, item.t)?;
        let residual = out.sub(item.target)?;
        loss += residual.norm_sq() * norm;
        let dout = residual.scale(2.0 * norm);
        estimator_backward(params, cfg, &cache, &dout, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Losses and gradients for one utterance under the joint objective.
/// Gradients are split by loss term and unnormalized so a batch can be
/// accumulated and then divided by its total frame/phone counts.
pub struct JointGrads {
    /// Sum over frames and dims of squared flow-matching residuals.
    pub fm_sum_sq: f64,
    pub n_frames: usize,
    /// Sum over phones of squared log-duration errors.
    pub dur_sum_sq: f64,
    pub n_phones: usize,
    pub fm_grads: ParamSet,
    pub dur_grads: ParamSet,
}

#[allow(clippy::too_many_arguments)]
pub fn joint_loss_grads(
    params: &ParamSet,
    cfg: &ModelConfig,
    phone_ids: &[usize],
    speaker_id: usize,
    gt_durations: &[usize],
    x_t: &Tensor,
    t: f64,
    target: &Tensor,
) -> Result<JointGrads> {
    let enc = encode_text_cached(params, cfg, phone_ids, speaker_id)?;
    let dur = predict_durations_cached(params, cfg, &enc.latents)?;
    let cond = super::forward::regulate_length(&enc.latents, gt_durations)?;

    let mut fm_grads = ParamSet::zeros_like(params);
    let mut dur_grads = ParamSet::zeros_like(params);

    // flow-matching branch
    let (out, est_cache) = vf_forward_cached(params, cfg, x_t, &cond, t)?;
    let residual = out.sub(target)?;
    let fm_sum_sq = residual.norm_sq();
    let dout = residual.scale(2.0);
    let dy = estimator_backward(params, cfg, &est_cache, &dout, &mut fm_grads)?;
    // collapse frame-level dy back onto phones through the length regulator
    let l = phone_ids.len();
    let mut d_latents_fm = Tensor::zeros(vec![l, cfg.cond_dim]);
    let mut row = 0;
    for (i, &d) in gt_durations.iter().enumerate() {
        for _ in 0..d {
            let src = dy.row(row).to_vec();
            let dst = d_latents_fm.row_mut(i);
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
            row += 1;
        }
    }
    encoder_backward(params, cfg, &enc, &d_latents_fm, &mut fm_grads)?;

    // duration branch
    let mut dur_sum_sq = 0.0;
    let d_log_dur: Vec<f64> = dur
        .log_dur
        .iter()
        .zip(gt_durations)
        .map(|(&ld, &g)| {
            let diff = ld - (g as f64).ln();
            dur_sum_sq += diff * diff;
            2.0 * diff
        })
        .collect();
    let d_latents_dur = duration_backward(params, &enc.latents, &dur, &d_log_dur, &mut dur_grads)?;
    encoder_backward(params, cfg, &enc, &d_latents_dur, &mut dur_grads)?;

    Ok(JointGrads {
        fm_sum_sq,
        n_frames: x_t.shape()[0],
        dur_sum_sq,
        n_phones: l,
        fm_grads,
        dur_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::numeric::{finite_difference_gradient, RngState, Tensor};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            embed_dim: 4,
            frame_dim: 3,
            cond_dim: 4,
            hidden_dim: 8,
            n_hidden_layers: 2,
            time_embed_dim: 4,
            n_speakers: 2,
            speaker_embed_dim: 3,
            sigma: 0.0,
        }
    }

    /// Joint loss as a plain scalar function of the parameters, for the
    /// finite-difference oracle.
    fn joint_loss(
        params: &ParamSet,
        cfg: &ModelConfig,
        phones: &[usize],
        speaker: usize,
        durs: &[usize],
        x_t: &Tensor,
        t: f64,
        target: &Tensor,
    ) -> f64 {
        let lat = super::super::forward::encode_text(params, cfg, phones, speaker).unwrap();
        let pred = super::super::forward::predict_durations(params, cfg, &lat).unwrap();
        let l_dur = super::super::forward::duration_loss(&pred, durs).unwrap();
        let cond = super::super::forward::regulate_length(&lat, durs).unwrap();
        let out = super::super::forward::vf_forward(params, cfg, x_t, &cond, t).unwrap();
        let l_fm = out.sub(target).unwrap().norm_sq()
            / (x_t.shape()[0] * cfg.frame_dim) as f64;
        l_fm + l_dur
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let model = Model::init(cfg.clone(), &mut RngState::new(77)).unwrap();
        let mut rng = RngState::new(8);
        let phones = [0usize, 2, 4];
        let durs = [2usize, 1, 3];
        let frames: usize = durs.iter().sum();
        let x_t = rng.normal_tensor(&[frames, cfg.frame_dim]);
        let target = rng.normal_tensor(&[frames, cfg.frame_dim]);
        let t = 0.37;

        let jg = joint_loss_grads(&model.params, &cfg, &phones, 1, &durs, &x_t, t, &target)
            .unwrap();
        let fm_norm = 1.0 / (jg.n_frames * cfg.frame_dim) as f64;
        let dur_norm = 1.0 / jg.n_phones as f64;

        let names: Vec<String> = model
            .params
            .named_tensors()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        for (idx, name) in names.iter().enumerate() {
            let analytic = {
                let fm = jg.fm_grads.named_tensors()[idx].1.scale(fm_norm);
                let mut a = jg.dur_grads.named_tensors()[idx].1.scale(dur_norm);
                a.axpy(1.0, &fm);
                a
            };
            let base = model.params.named_tensors()[idx].1.clone();
            let fd = finite_difference_gradient(
                |probe| {
                    let mut p = model.params.clone();
                    *p.named_tensors_mut()[idx].1 = probe.clone();
                    joint_loss(&p, &cfg, &phones, 1, &durs, &x_t, t, &target)
                },
                &base,
                1e-6,
            );
            let mut max_rel = 0.0f64;
            for (a, f) in analytic.data().iter().zip(fd.data()) {
                let denom = f.abs().max(1e-4);
                max_rel = max_rel.max((a - f).abs() / denom);
            }
            assert!(max_rel < 1e-5, "tensor {name}: max rel err {max_rel}");
        }
    }

    #[test]
    fn vf_backward_zero_residual_zero_grads() {
        let cfg = small_cfg();
        let model = Model::init(cfg.clone(), &mut RngState::new(7)).unwrap();
        let mut rng = RngState::new(2);
        let x = rng.normal_tensor(&[3, 3]);
        let y = Condition {
            y: rng.normal_tensor(&[3, 4]),
        };
        let target = super::super::forward::vf_forward(&model.params, &cfg, &x, &y, 0.5).unwrap();
        let (loss, grads) = vf_backward(
            &model.params,
            &cfg,
            &[VfBatchItem {
                x_t: &x,
                cond: &y,
                t: 0.5,
                target: &target,
            }],
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        for (name, t) in grads.named_tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0), "nonzero grad in {name}");
        }
    }

    #[test]
    fn vf_loss_is_quadratic_in_residual() {
        let cfg = small_cfg();
        let model = Model::init(cfg.clone(), &mut RngState::new(7)).unwrap();
        let mut rng = RngState::new(2);
        let x = rng.normal_tensor(&[3, 3]);
        let y = Condition {
            y: rng.normal_tensor(&[3, 4]),
        };
        let out = super::super::forward::vf_forward(&model.params, &cfg, &x, &y, 0.5).unwrap();
        let shift = rng.normal_tensor(&[3, 3]);
        let t1 = out.sub(&shift).unwrap();
        let t2 = out.sub(&shift.scale(2.0)).unwrap();
        let mk = |target: &Tensor| {
            vf_backward(
                &model.params,
                &cfg,
                &[VfBatchItem {
                    x_t: &x,
                    cond: &y,
                    t: 0.5,
                    target,
                }],
            )
            .unwrap()
            .0
        };
        let (l1, l2) = (mk(&t1), mk(&t2));
        assert!((l2 / l1 - 4.0).abs() < 1e-10);
    }
}
