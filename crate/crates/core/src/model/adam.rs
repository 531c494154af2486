use crate::model::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(params: &ParamSet) -> Self {
        AdamState {
            m: ParamSet::zeros_like(params),
            v: ParamSet::zeros_like(params),
            step: 0,
        }
    }
}

/// Standard Adam update with bias correction.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, grads: &ParamSet, hyper: &AdamHyper) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let gs = grads.named_tensors();
    let ms = state.m.named_tensors_mut();
    let vs_names: Vec<_> = state.v.named_tensors_mut();
    for (((_, p), ((_, m), (_, v))), (_, g)) in params
        .named_tensors_mut()
        .into_iter()
        .zip(ms.into_iter().zip(vs_names))
        .zip(gs)
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gi;
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::numeric::RngState;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            vocab_size: 3,
            embed_dim: 2,
            frame_dim: 2,
            cond_dim: 2,
            hidden_dim: 4,
            n_hidden_layers: 1,
            time_embed_dim: 2,
            n_speakers: 1,
            speaker_embed_dim: 0,
            sigma: 0.0,
        };
        Model::init(cfg, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut m = tiny_model(1);
        let before = m.params.clone();
        let zeros = ParamSet::zeros_like(&m.params);
        adam_step(&mut m.params, &mut m.opt, &zeros, &AdamHyper::default());
        assert_eq!(m.params, before);
        assert_eq!(m.opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_for_unit_gradient() {
        let mut m = tiny_model(2);
        let before = m.params.phone_emb.data()[0];
        let mut grads = ParamSet::zeros_like(&m.params);
        grads.phone_emb.data_mut()[0] = 1.0;
        adam_step(
            &mut m.params,
            &mut m.opt,
            &grads,
            &AdamHyper::with_lr(0.1),
        );
        // bias-corrected m_hat/sqrt(v_hat) = 1 on the first step
        let moved = before - m.params.phone_emb.data()[0];
        assert!((moved - 0.1).abs() < 1e-7, "moved {moved}");
    }

    #[test]
    fn identical_streams_stay_bitwise_identical() {
        let mut a = tiny_model(3);
        let mut b = tiny_model(3);
        let mut rng = RngState::new(4);
        for _ in 0..10 {
            let mut grads = ParamSet::zeros_like(&a.params);
            for (_, t) in grads.named_tensors_mut() {
                for v in t.data_mut() {
                    *v = rng.normal();
                }
            }
            adam_step(&mut a.params, &mut a.opt, &grads, &AdamHyper::default());
            adam_step(&mut b.params, &mut b.opt, &grads, &AdamHyper::default());
        }
        assert_eq!(a.params, b.params);
        assert_eq!(a.opt, b.opt);
    }
}
