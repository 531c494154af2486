//! Learnable components: text encoder, duration predictor, length regulator,
//! time embedding, per-frame vector-field estimator, Adam, checkpoints.

mod adam;
mod backward;
mod checkpoint;
mod forward;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use backward::{joint_loss_grads, vf_backward, JointGrads, VfBatchItem};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    duration_loss, encode_text, predict_durations, regulate_length, time_embedding, vf_forward,
    Condition,
};

use crate::numeric::{RngState, Tensor};
use crate::{Error, Result};

/// Static shape of the model; every weight tensor's shape is a pure
/// function of this.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Frame width d.
    pub frame_dim: usize,
    /// Frame-level condition width c.
    pub cond_dim: usize,
    /// Estimator hidden width H.
    pub hidden_dim: usize,
    pub n_hidden_layers: usize,
    /// Sinusoidal time embedding width E (even).
    pub time_embed_dim: usize,
    pub n_speakers: usize,
    /// 0 when n_speakers == 1.
    pub speaker_embed_dim: usize,
    /// Probability-path standard deviation.
    pub sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 16,
            embed_dim: 16,
            frame_dim: 8,
            cond_dim: 16,
            hidden_dim: 128,
            n_hidden_layers: 3,
            time_embed_dim: 32,
            n_speakers: 4,
            speaker_embed_dim: 8,
            sigma: 1e-4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.frame_dim == 0
            || self.cond_dim == 0
            || self.hidden_dim == 0
            || self.n_hidden_layers == 0
            || self.n_speakers == 0
        {
            return Err(Error::validation("model dims must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::validation("time_embed_dim must be positive and even"));
        }
        if self.n_speakers == 1 && self.speaker_embed_dim != 0 {
            return Err(Error::validation(
                "speaker_embed_dim must be 0 for a single-speaker config",
            ));
        }
        if self.n_speakers > 1 && self.speaker_embed_dim == 0 {
            return Err(Error::validation(
                "speaker_embed_dim must be positive for a multi-speaker config",
            ));
        }
        if self.sigma < 0.0 {
            return Err(Error::validation("sigma must be >= 0"));
        }
        Ok(())
    }

    /// Encoder input width: phone embedding plus optional speaker embedding.
    pub fn enc_in_dim(&self) -> usize {
        self.embed_dim + self.speaker_embed_dim
    }

    /// Estimator input width: frame concatenated with its condition row.
    pub fn est_in_dim(&self) -> usize {
        self.frame_dim + self.cond_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstLayer {
    pub w: Tensor,
    pub b: Tensor,
    /// Time projection applied to the sinusoidal embedding, added pre-activation.
    pub time_proj: Tensor,
}

/// All learnable weights. Tensor inventory and ordering are fixed by
/// `named_tensors`, which Adam, checkpointing and the gradient checks rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub phone_emb: Tensor,
    pub speaker_emb: Option<Tensor>,
    pub enc_w1: Tensor,
    pub enc_b1: Tensor,
    pub enc_w2: Tensor,
    pub enc_b2: Tensor,
    pub dur_w1: Tensor,
    pub dur_b1: Tensor,
    pub dur_w2: Tensor,
    pub dur_b2: Tensor,
    pub est_layers: Vec<EstLayer>,
    pub est_out_w: Tensor,
    pub est_out_b: Tensor,
}

impl ParamSet {
    /// Weights ~ N(0, 1/fan_in), embeddings ~ N(0, 1), biases 0.
    pub fn init(cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let gauss = |rng: &mut RngState, rows: usize, cols: usize| {
            let std = 1.0 / (cols as f64).sqrt();
            rng.normal_tensor(&[rows, cols]).scale(std)
        };
        let h = cfg.hidden_dim;
        let phone_emb = rng.normal_tensor(&[cfg.vocab_size, cfg.embed_dim]);
        let speaker_emb = if cfg.speaker_embed_dim > 0 {
            Some(rng.normal_tensor(&[cfg.n_speakers, cfg.speaker_embed_dim]))
        } else {
            None
        };
        let enc_w1 = gauss(rng, h, cfg.enc_in_dim());
        let enc_w2 = gauss(rng, cfg.cond_dim, h);
        let dur_w1 = gauss(rng, h, cfg.cond_dim);
        let dur_w2 = gauss(rng, 1, h);
        let mut est_layers = Vec::with_capacity(cfg.n_hidden_layers);
        for i in 0..cfg.n_hidden_layers {
            let in_dim = if i == 0 { cfg.est_in_dim() } else { h };
            est_layers.push(EstLayer {
                w: gauss(rng, h, in_dim),
                b: Tensor::zeros(vec![h]),
                time_proj: gauss(rng, h, cfg.time_embed_dim),
            });
        }
        let est_out_w = gauss(rng, cfg.frame_dim, h);
        ParamSet {
            phone_emb,
            speaker_emb,
            enc_w1,
            enc_b1: Tensor::zeros(vec![h]),
            enc_w2,
            enc_b2: Tensor::zeros(vec![cfg.cond_dim]),
            dur_w1,
            dur_b1: Tensor::zeros(vec![h]),
            dur_w2,
            dur_b2: Tensor::zeros(vec![1]),
            est_layers,
            est_out_w,
            est_out_b: Tensor::zeros(vec![cfg.frame_dim]),
        }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        let mut out = other.clone();
        for (_, t) in out.named_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![("phone_emb".into(), &self.phone_emb)];
        if let Some(se) = &self.speaker_emb {
            v.push(("speaker_emb".into(), se));
        }
        v.push(("enc.w1".into(), &self.enc_w1));
        v.push(("enc.b1".into(), &self.enc_b1));
        v.push(("enc.w2".into(), &self.enc_w2));
        v.push(("enc.b2".into(), &self.enc_b2));
        v.push(("dur.w1".into(), &self.dur_w1));
        v.push(("dur.b1".into(), &self.dur_b1));
        v.push(("dur.w2".into(), &self.dur_w2));
        v.push(("dur.b2".into(), &self.dur_b2));
        for (i, l) in self.est_layers.iter().enumerate() {
            v.push((format!("est.l{i}.w"), &l.w));
            v.push((format!("est.l{i}.b"), &l.b));
            v.push((format!("est.l{i}.tp"), &l.time_proj));
        }
        v.push(("est.out.w".into(), &self.est_out_w));
        v.push(("est.out.b".into(), &self.est_out_b));
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = vec![("phone_emb".into(), &mut self.phone_emb)];
        if let Some(se) = &mut self.speaker_emb {
            v.push(("speaker_emb".into(), se));
        }
        v.push(("enc.w1".into(), &mut self.enc_w1));
        v.push(("enc.b1".into(), &mut self.enc_b1));
        v.push(("enc.w2".into(), &mut self.enc_w2));
        v.push(("enc.b2".into(), &mut self.enc_b2));
        v.push(("dur.w1".into(), &mut self.dur_w1));
        v.push(("dur.b1".into(), &mut self.dur_b1));
        v.push(("dur.w2".into(), &mut self.dur_w2));
        v.push(("dur.b2".into(), &mut self.dur_b2));
        for (i, l) in self.est_layers.iter_mut().enumerate() {
            v.push((format!("est.l{i}.w"), &mut l.w));
            v.push((format!("est.l{i}.b"), &mut l.b));
            v.push((format!("est.l{i}.tp"), &mut l.time_proj));
        }
        v.push(("est.out.w".into(), &mut self.est_out_w));
        v.push(("est.out.b".into(), &mut self.est_out_b));
        v
    }

    /// self += scale * other, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &ParamSet) {
        let theirs = other.named_tensors();
        for ((_, t), (_, o)) in self.named_tensors_mut().into_iter().zip(theirs) {
            t.axpy(scale, o);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Model bundle: config, weights, optimizer state and rectification round.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub opt: AdamState,
    /// 0 = base flow-matching model, k >= 1 after k rectification rounds.
    pub round: u32,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::init(&config, rng);
        let opt = AdamState::zeros(&params);
        Ok(Model {
            config,
            params,
            opt,
            round: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig {
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
        };
        let mut rng = RngState::new(0);
        let m = Model::init(cfg, &mut rng).unwrap();
        assert_eq!(m.params.phone_emb.shape(), &[5, 4]);
        assert_eq!(m.params.enc_w1.shape(), &[8, 7]);
        assert_eq!(m.params.est_layers[0].w.shape(), &[8, 7]);
        assert_eq!(m.params.est_layers[1].w.shape(), &[8, 8]);
        assert_eq!(m.params.est_out_w.shape(), &[3, 8]);
        assert!(m.params.all_finite());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.time_embed_dim = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.n_speakers = 1;
        assert!(cfg.validate().is_err()); // speaker_embed_dim still 8
        cfg.speaker_embed_dim = 0;
        assert!(cfg.validate().is_ok());
    }
}
