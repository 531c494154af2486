use crate::model::{ModelConfig, ParamSet};
use crate::numeric::Tensor;
use crate::{Error, Result};

/// Frame-level condition sequence: per-phone latents repeated by duration.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    /// T x c.
    pub y: Tensor,
}

impl Condition {
    pub fn frames(&self) -> usize {
        self.y.shape()[0]
    }
}

/// Sinusoidal embedding: emb[2i] = sin(t*w_i), emb[2i+1] = cos(t*w_i),
/// w_i = 10000^(-2i/E).
pub fn time_embedding(t: f64, e_dim: usize) -> Vec<f64> {
    debug_assert!(e_dim % 2 == 0);
    let mut emb = vec![0.0; e_dim];
    for i in 0..e_dim / 2 {
        let omega = 10000f64.powf(-2.0 * i as f64 / e_dim as f64);
        emb[2 * i] = (t * omega).sin();
        emb[2 * i + 1] = (t * omega).cos();
    }
    emb
}

pub(crate) struct EncoderCache {
    /// L x enc_in: embedding (plus speaker embedding) per phone.
    pub input: Tensor,
    /// L x H tanh activations.
    pub z: Tensor,
    /// L x c latents.
    pub latents: Tensor,
    pub phone_ids: Vec<usize>,
    pub speaker_id: usize,
}

pub(crate) fn encode_text_cached(
    params: &ParamSet,
    cfg: &ModelConfig,
    phone_ids: &[usize],
    speaker_id: usize,
) -> Result<EncoderCache> {
    if phone_ids.is_empty() {
        return Err(Error::validation("empty phone sequence"));
    }
    if let Some(&bad) = phone_ids.iter().find(|&&p| p >= cfg.vocab_size) {
        return Err(Error::validation(format!(
            "phone id {bad} out of range (vocab_size {})",
            cfg.vocab_size
        )));
    }
    if speaker_id >= cfg.n_speakers {
        return Err(Error::validation(format!(
            "speaker id {speaker_id} out of range (n_speakers {})",
            cfg.n_speakers
        )));
    }
    let l = phone_ids.len();
    let in_dim = cfg.enc_in_dim();
    let mut input = Tensor::zeros(vec![l, in_dim]);
    for (i, &p) in phone_ids.iter().enumerate() {
        let row = input.row_mut(i);
        row[..cfg.embed_dim].copy_from_slice(params.phone_emb.row(p));
        if let Some(se) = &params.speaker_emb {
            row[cfg.embed_dim..].copy_from_slice(se.row(speaker_id));
        }
    }
    let mut z = Tensor::zeros(vec![l, cfg.hidden_dim]);
    let mut latents = Tensor::zeros(vec![l, cfg.cond_dim]);
    for i in 0..l {
        let mut h = params.enc_w1.matvec(input.row(i))?;
        for (hv, &bv) in h.iter_mut().zip(params.enc_b1.data()) {
            *hv = (*hv + bv).tanh();
        }
        z.row_mut(i).copy_from_slice(&h);
        let mut lat = params.enc_w2.matvec(&h)?;
        for (lv, &bv) in lat.iter_mut().zip(params.enc_b2.data()) {
            *lv += bv;
        }
        latents.row_mut(i).copy_from_slice(&lat);
    }
    Ok(EncoderCache {
        input,
        z,
        latents,
        phone_ids: phone_ids.to_vec(),
        speaker_id,
    })
}

/// Per-phone latents, L x c. Speaker embedding (when enabled) is concatenated
/// onto every phone embedding before the hidden layer.
pub fn encode_text(
    params: &ParamSet,
    cfg: &ModelConfig,
    phone_ids: &[usize],
    speaker_id: usize,
) -> Result<Tensor> {
    Ok(encode_text_cached(params, cfg, phone_ids, speaker_id)?.latents)
}

pub(crate) struct DurationCache {
    /// L x H tanh activations.
    pub h: Tensor,
    /// Predicted log-durations per phone.
    pub log_dur: Vec<f64>,
}

pub(crate) fn predict_durations_cached(
    params: &ParamSet,
    cfg: &ModelConfig,
    latents: &Tensor,
) -> Result<DurationCache> {
    let l = latents.shape()[0];
    let mut h = Tensor::zeros(vec![l, cfg.hidden_dim]);
    let mut log_dur = vec![0.0; l];
    for i in 0..l {
        let mut hv = params.dur_w1.matvec(latents.row(i))?;
        for (v, &b) in hv.iter_mut().zip(params.dur_b1.data()) {
            *v = (*v + b).tanh();
        }
        log_dur[i] = params.dur_w2.row(0).iter().zip(&hv).map(|(w, x)| w * x).sum::<f64>()
            + params.dur_b2.data()[0];
        h.row_mut(i).copy_from_slice(&hv);
    }
    Ok(DurationCache { h, log_dur })
}

/// Strictly positive durations exp(log-duration), one per phone.
pub fn predict_durations(params: &ParamSet, cfg: &ModelConfig, latents: &Tensor) -> Result<Tensor> {
    let cache = predict_durations_cached(params, cfg, latents)?;
    Tensor::new(
        vec![cache.log_dur.len()],
        cache.log_dur.iter().map(|ld| ld.exp()).collect(),
    )
}

/// Mean over phones of (log predicted - log ground-truth)^2.
pub fn duration_loss(predicted: &Tensor, ground_truth: &[usize]) -> Result<f64> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::shape("duration_loss: length mismatch"));
    }
    let sum: f64 = predicted
        .data()
        .iter()
        .zip(ground_truth)
        .map(|(&p, &g)| {
            let d = p.ln() - (g as f64).ln();
            d * d
        })
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Repeat latent row i durations[i] times, order preserved.
pub fn regulate_length(phone_latents: &Tensor, durations: &[usize]) -> Result<Condition> {
    let l = phone_latents.shape()[0];
    if durations.len() != l {
        return Err(Error::validation(format!(
            "regulate_length: {l} phones but {} durations",
            durations.len()
        )));
    }
    if durations.iter().any(|&d| d == 0) {
        return Err(Error::validation("regulate_length: zero duration"));
    }
    let t_total: usize = durations.iter().sum();
    let c = phone_latents.cols();
    let mut y = Tensor::zeros(vec![t_total, c]);
    let mut row = 0;
    for (i, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            y.row_mut(row).copy_from_slice(phone_latents.row(i));
            row += 1;
        }
    }
    Ok(Condition { y })
}

pub(crate) struct EstimatorCache {
    /// T x (d+c) concatenated inputs.
    pub h0: Tensor,
    /// Per hidden layer: pre-activations and activations, T x H each.
    pub pre: Vec<Tensor>,
    pub act: Vec<Tensor>,
    pub t_emb: Vec<f64>,
}

pub(crate) fn vf_forward_cached(
    params: &ParamSet,
    cfg: &ModelConfig,
    x_t: &Tensor,
    cond: &Condition,
    t: f64,
) -> Result<(Tensor, EstimatorCache)> {
    let frames = x_t.shape()[0];
    if x_t.rank() != 2 || x_t.cols() != cfg.frame_dim {
        return Err(Error::shape(format!(
            "vf_forward: x_t shape {:?}, expected [T x {}]",
            x_t.shape(),
            cfg.frame_dim
        )));
    }
    if cond.frames() != frames || cond.y.cols() != cfg.cond_dim {
        return Err(Error::shape(format!(
            "vf_forward: condition shape {:?} does not match x_t {:?}",
            cond.y.shape(),
            x_t.shape()
        )));
    }
    let t_emb = time_embedding(t, cfg.time_embed_dim);
    let h = cfg.hidden_dim;
    let d = cfg.frame_dim;
    // per-layer time offsets are shared across frames
    let time_off: Vec<Vec<f64>> = params
        .est_layers
        .iter()
        .map(|l| l.time_proj.matvec(&t_emb))
        .collect::<Result<_>>()?;

    let mut h0 = Tensor::zeros(vec![frames, cfg.est_in_dim()]);
    for j in 0..frames {
        let row = h0.row_mut(j);
        row[..d].copy_from_slice(x_t.row(j));
        row[d..].copy_from_slice(cond.y.row(j));
    }
    let mut pre = Vec::with_capacity(params.est_layers.len());
    let mut act = Vec::with_capacity(params.est_layers.len());
    let mut out = Tensor::zeros(vec![frames, d]);
    let mut prev = h0.clone();
    for (li, layer) in params.est_layers.iter().enumerate() {
        let mut p = Tensor::zeros(vec![frames, h]);
        let mut a = Tensor::zeros(vec![frames, h]);
        for j in 0..frames {
            let mut v = layer.w.matvec(prev.row(j))?;
            for ((vv, &b), &to) in v.iter_mut().zip(layer.b.data()).zip(&time_off[li]) {
                *vv += b + to;
            }
            p.row_mut(j).copy_from_slice(&v);
            for vv in v.iter_mut() {
                *vv = super::forward::silu(*vv);
            }
            a.row_mut(j).copy_from_slice(&v);
        }
        pre.push(p);
        prev = a.clone();
        act.push(a);
    }
    for j in 0..frames {
        let mut v = params.est_out_w.matvec(prev.row(j))?;
        for (vv, &b) in v.iter_mut().zip(params.est_out_b.data()) {
            *vv += b;
        }
        out.row_mut(j).copy_from_slice(&v);
    }
    Ok((
        out,
        EstimatorCache {
            h0,
            pre,
            act,
            t_emb,
        },
    ))
}

/// The vector field u(x_t, y, t), applied per frame independently.
pub fn vf_forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    x_t: &Tensor,
    cond: &Condition,
    t: f64,
) -> Result<Tensor> {
    Ok(vf_forward_cached(params, cfg, x_t, cond, t)?.0)
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::numeric::RngState;
    use proptest::prelude::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
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

    fn small_model(seed: u64) -> Model {
        Model::init(small_cfg(), &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn encode_text_deterministic_and_positional() {
        let m = small_model(3);
        let a = encode_text(&m.params, &m.config, &[1, 2, 3], 0).unwrap();
        let b = encode_text(&m.params, &m.config, &[1, 2, 3], 0).unwrap();
        assert_eq!(a.data(), b.data());
        // swapping two phones swaps the corresponding rows
        let c = encode_text(&m.params, &m.config, &[3, 2, 1], 0).unwrap();
        assert_eq!(a.row(0), c.row(2));
        assert_eq!(a.row(2), c.row(0));
        assert_eq!(a.row(1), c.row(1));
    }

    #[test]
    fn encode_text_rejects_bad_ids() {
        let m = small_model(3);
        assert!(encode_text(&m.params, &m.config, &[99], 0).is_err());
        assert!(encode_text(&m.params, &m.config, &[0], 7).is_err());
    }

    #[test]
    fn single_speaker_ignores_speaker_id() {
        let cfg = ModelConfig {
            n_speakers: 1,
            speaker_embed_dim: 0,
            ..small_cfg()
        };
        let m = Model::init(cfg, &mut RngState::new(5)).unwrap();
        let a = encode_text(&m.params, &m.config, &[0, 1], 0).unwrap();
        assert!(m.params.speaker_emb.is_none());
        assert_eq!(a.shape(), &[2, 4]);
    }

    #[test]
    fn zero_weights_predict_unit_durations() {
        let mut m = small_model(1);
        for (_, t) in m.params.named_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let lat = encode_text(&m.params, &m.config, &[0, 1, 2], 0).unwrap();
        let d = predict_durations(&m.params, &m.config, &lat).unwrap();
        assert!(d.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn duration_loss_zero_on_exact_match() {
        let pred = Tensor::new(vec![3], vec![2.0, 1.0, 5.0]).unwrap();
        assert_eq!(duration_loss(&pred, &[2, 1, 5]).unwrap(), 0.0);
    }

    #[test]
    fn regulate_length_patterns() {
        let lat = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let c = regulate_length(&lat, &[2, 1, 3]).unwrap();
        let flat: Vec<f64> = c.y.data().to_vec();
        assert_eq!(flat, vec![1.0, 1.0, 2.0, 3.0, 3.0, 3.0]);
        let id = regulate_length(&lat, &[1, 1, 1]).unwrap();
        assert_eq!(id.y.data(), lat.data());
        assert!(regulate_length(&lat, &[1, 0, 1]).is_err());
    }

    #[test]
    fn vf_forward_shape_and_equivariance() {
        let m = small_model(11);
        let mut rng = RngState::new(2);
        let x = rng.normal_tensor(&[4, 3]);
        let lat = encode_text(&m.params, &m.config, &[0, 1, 2, 3], 1).unwrap();
        let cond = regulate_length(&lat, &[1, 1, 1, 1]).unwrap();
        let out = vf_forward(&m.params, &m.config, &x, &cond, 0.3).unwrap();
        assert_eq!(out.shape(), &[4, 3]);

        // permute frames of (x, y) together: output permutes identically
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let yp = Tensor::from_rows(
            &perm.iter().map(|&i| cond.y.row(i).to_vec()).collect::<Vec<_>>(),
        )
        .unwrap();
        let outp = vf_forward(&m.params, &m.config, &xp, &Condition { y: yp }, 0.3).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(outp.row(k), out.row(i));
        }
    }

    #[test]
    fn vf_forward_zero_weights_zero_field() {
        let mut m = small_model(1);
        for (_, t) in m.params.named_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let x = RngState::new(4).normal_tensor(&[3, 3]);
        let y = Tensor::zeros(vec![3, 4]);
        let out = vf_forward(&m.params, &m.config, &x, &Condition { y }, 0.7).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_embedding_definition_and_injectivity() {
        let e = time_embedding(0.25, 8);
        for i in 0..4 {
            let omega = 10000f64.powf(-2.0 * i as f64 / 8.0);
            assert_eq!(e[2 * i], (0.25 * omega).sin());
            assert_eq!(e[2 * i + 1], (0.25 * omega).cos());
        }
        // distinct on a 1e-3 grid over [0,1]
        let grid: Vec<Vec<f64>> = (0..=1000)
            .map(|k| time_embedding(k as f64 / 1000.0, 8))
            .collect();
        for w in grid.windows(2) {
            assert_ne!(w[0], w[1]);
        }
    }

    proptest! {
        #[test]
        fn regulate_length_frame_count(durs in proptest::collection::vec(1usize..7, 1..10)) {
            let l = durs.len();
            let lat = RngState::new(0).normal_tensor(&[l, 4]);
            let c = regulate_length(&lat, &durs).unwrap();
            prop_assert_eq!(c.frames(), durs.iter().sum::<usize>());
        }
    }
}
