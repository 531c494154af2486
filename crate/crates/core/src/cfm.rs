//! Conditional flow-matching training: probability-path sampling, the
//! regression loss on the constant per-pair field x1 - x0, the training
//! loop, and a brute-force oracle for the marginal-optimal vector field.

use std::io::Write;

use rayon::prelude::*;

use crate::data::{Corpus, Utterance};
use crate::model::{adam_step, joint_loss_grads, AdamHyper, JointGrads, Model, ParamSet};
use crate::numeric::{RngState, Tensor};
use crate::{Error, Result};

/// One draw from the conditional probability path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x_t: Tensor,
    pub t: f64,
    /// x1 - x0, the regression target.
    pub target: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub step: usize,
    pub loss_fm: f64,
    pub loss_dur: f64,
    pub loss_total: f64,
}

/// x_t ~ N(t*x1 + (1-t)*x0, sigma^2 I), target = x1 - x0.
pub fn sample_path_point(
    rng: &mut RngState,
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    sigma: f64,
) -> Result<PathSample> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(format!(
            "path endpoints disagree: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("t = {t} outside [0,1]")));
    }
    if sigma < 0.0 {
        return Err(Error::validation("sigma must be >= 0"));
    }
    let mut x_t = x1.scale(t);
    x_t.axpy(1.0 - t, x0);
    if sigma > 0.0 {
        for v in x_t.data_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(PathSample {
        x_t,
        t,
        target: x1.sub(x0)?,
    })
}

/// Endpoint override for rectified training: (x0', x1_hat) replace the fresh
/// noise draw and the ground-truth frames.
pub(crate) struct BatchItem<'a> {
    pub utt: &'a Utterance,
    pub endpoints: Option<(&'a Tensor, &'a Tensor)>,
}

/// One optimizer step over a batch. Per-utterance t and x0 are drawn in
/// batch order from the single rng; gradient accumulation order is fixed,
/// so results are independent of the rayon worker count.
pub(crate) fn batched_step(
    model: &mut Model,
    rng: &mut RngState,
    batch: &[BatchItem<'_>],
    adam: &AdamHyper,
    t_override: Option<f64>,
) -> Result<(f64, f64)> {
    let sigma = model.config.sigma;
    let d = model.config.frame_dim;
    let mut inputs = Vec::with_capacity(batch.len());
    for item in batch {
        let t = t_override.unwrap_or_else(|| rng.uniform());
        let sample = match item.endpoints {
            Some((x0, x1)) => sample_path_point(rng, x0, x1, t, sigma)?,
            None => {
                let x0 = rng.normal_tensor(item.utt.frames.shape());
                sample_path_point(rng, &x0, &item.utt.frames, t, sigma)?
            }
        };
        inputs.push((item.utt, sample));
    }
    let params = &model.params;
    let cfg = &model.config;
    let per_utt: Vec<JointGrads> = inputs
        .par_iter()
        .map(|(utt, sample)| {
            joint_loss_grads(
                params,
                cfg,
                &utt.phone_ids,
                utt.speaker_id,
                &utt.durations,
                &sample.x_t,
                sample.t,
                &sample.target,
            )
        })
        .collect::<Result<_>>()?;

    let mut fm_acc = ParamSet::zeros_like(&model.params);
    let mut dur_acc = ParamSet::zeros_like(&model.params);
    let mut fm_sum = 0.0;
    let mut dur_sum = 0.0;
    let mut frames = 0usize;
    let mut phones = 0usize;
    for jg in &per_utt {
        fm_acc.axpy(1.0, &jg.fm_grads);
        dur_acc.axpy(1.0, &jg.dur_grads);
        fm_sum += jg.fm_sum_sq;
        dur_sum += jg.dur_sum_sq;
        frames += jg.n_frames;
        phones += jg.n_phones;
    }
    let fm_norm = 1.0 / (frames * d) as f64;
    let dur_norm = 1.0 / phones as f64;
    fm_acc.axpy(dur_norm / fm_norm, &dur_acc);
    let grads = {
        let mut g = fm_acc;
        for (_, t) in g.named_tensors_mut() {
            for v in t.data_mut() {
                *v *= fm_norm;
            }
        }
        g
    };
    adam_step(&mut model.params, &mut model.opt, &grads, adam);
    Ok((fm_sum * fm_norm, dur_sum * dur_norm))
}

/// Single-utterance training step (Algorithm: sample t, sample x_t, one
/// gradient descent update on L_FM + L_dur).
pub fn train_step(
    model: &mut Model,
    rng: &mut RngState,
    utterance: &Utterance,
    adam: &AdamHyper,
) -> Result<TrainStats> {
    train_step_with_t(model, rng, utterance, adam, None)
}

/// Test hook: pin t instead of sampling it.
pub fn train_step_with_t(
    model: &mut Model,
    rng: &mut RngState,
    utterance: &Utterance,
    adam: &AdamHyper,
    t_override: Option<f64>,
) -> Result<TrainStats> {
    let (loss_fm, loss_dur) = batched_step(
        model,
        rng,
        &[BatchItem {
            utt: utterance,
            endpoints: None,
        }],
        adam,
        t_override,
    )?;
    Ok(TrainStats {
        step: model.opt.step as usize,
        loss_fm,
        loss_dur,
        loss_total: loss_fm + loss_dur,
    })
}

fn shuffle(indices: &mut [usize], rng: &mut RngState) {
    for i in (1..indices.len()).rev() {
        let j = rng.uniform_int(0, i as i64) as usize;
        indices.swap(i, j);
    }
}

/// Minibatch training loop: shuffles per epoch, one Adam step per batch,
/// emits `step,loss_fm,loss_dur,loss_total` per step to the optional sink.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &mut Model,
    corpus: &Corpus,
    n_steps: usize,
    batch_size: usize,
    adam: &AdamHyper,
    rng: &mut RngState,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<TrainStats>> {
    if corpus.utterances.is_empty() {
        return Err(Error::validation("training corpus is empty"));
    }
    if batch_size == 0 {
        return Err(Error::validation("batch size must be >= 1"));
    }
    if let Some(w) = log.as_mut() {
        writeln!(w, "step,loss_fm,loss_dur,loss_total")?;
    }
    let mut history = Vec::with_capacity(n_steps);
    let mut order: Vec<usize> = (0..corpus.utterances.len()).collect();
    let mut cursor = order.len(); // force a shuffle on first use
    for step in 1..=n_steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor >= order.len() {
                shuffle(&mut order, rng);
                cursor = 0;
            }
            batch.push(BatchItem {
                utt: &corpus.utterances[order[cursor]],
                endpoints: None,
            });
            cursor += 1;
        }
        let (loss_fm, loss_dur) = batched_step(model, rng, &batch, adam, None)?;
        let stats = TrainStats {
            step,
            loss_fm,
            loss_dur,
            loss_total: loss_fm + loss_dur,
        };
        if !stats.loss_total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        if let Some(w) = log.as_mut() {
            writeln!(w, "{},{},{},{}", stats.step, stats.loss_fm, stats.loss_dur, stats.loss_total)?;
        }
        history.push(stats);
    }
    Ok(history)
}

/// Brute-force marginal-optimal field over a finite pair set: the
/// posterior-weighted mean of the per-pair difference vectors, with
/// log-sum-exp stabilized weights.
pub fn oracle_vector_field(
    pairs: &[(Tensor, Tensor)],
    x: &Tensor,
    t: f64,
    sigma: f64,
) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::validation("oracle needs at least one pair"));
    }
    if sigma <= 0.0 {
        return Err(Error::validation(
            "oracle field undefined for sigma = 0 (degenerate posterior)",
        ));
    }
    let mut log_w = Vec::with_capacity(pairs.len());
    for (x0, x1) in pairs {
        let mut mu = x1.scale(t);
        mu.axpy(1.0 - t, x0);
        let dist_sq = x.sub(&mu)?.norm_sq();
        log_w.push(-dist_sq / (2.0 * sigma * sigma));
    }
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_w.iter().map(|lw| (lw - max_lw).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Tensor::zeros_like(x);
    for ((x0, x1), w) in pairs.iter().zip(&weights) {
        let diff = x1.sub(x0)?;
        out.axpy(w / total, &diff);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_corpus;
    use crate::model::{Model, ModelConfig};

    fn scalar_frames(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn path_point_on_chord_when_sigma_zero() {
        let mut rng = RngState::new(1);
        let s = sample_path_point(&mut rng, &scalar_frames(0.0), &scalar_frames(2.0), 0.5, 0.0)
            .unwrap();
        assert_eq!(s.x_t.data()[0], 1.0);
        assert_eq!(s.target.data()[0], 2.0);
        let s = sample_path_point(&mut rng, &scalar_frames(0.0), &scalar_frames(2.0), 1.0, 0.0)
            .unwrap();
        assert_eq!(s.x_t.data()[0], 2.0);
    }

    #[test]
    fn path_point_clt_mean_and_std() {
        let mut rng = RngState::new(2);
        let x0 = scalar_frames(-1.0);
        let x1 = scalar_frames(3.0);
        let (t, sigma) = (0.3, 0.1);
        let mean_expect = t * 3.0 + (1.0 - t) * -1.0;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let s = sample_path_point(&mut rng, &x0, &x1, t, sigma).unwrap();
            let dev = s.x_t.data()[0] - mean_expect;
            sum += s.x_t.data()[0];
            sumsq += dev * dev;
        }
        let mean = sum / n as f64;
        assert!((mean - mean_expect).abs() < 4.0 * sigma / (n as f64).sqrt());
        let std = (sumsq / n as f64).sqrt();
        assert!((std - sigma).abs() < 0.05 * sigma, "std {std}");
    }

    #[test]
    fn path_point_validation() {
        let mut rng = RngState::new(3);
        let a = scalar_frames(0.0);
        let b = Tensor::zeros(vec![2, 1]);
        assert!(sample_path_point(&mut rng, &a, &b, 0.5, 0.0).is_err());
        assert!(sample_path_point(&mut rng, &a, &a, 1.5, 0.0).is_err());
    }

    #[test]
    fn oracle_single_pair_ignores_x() {
        let mut rng = RngState::new(4);
        let x0 = rng.normal_tensor(&[2, 2]);
        let x1 = rng.normal_tensor(&[2, 2]);
        let probe = rng.normal_tensor(&[2, 2]);
        let v = oracle_vector_field(&[(x0.clone(), x1.clone())], &probe, 0.4, 0.05).unwrap();
        let expect = x1.sub(&x0).unwrap();
        for (a, b) in v.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_symmetric_pairs_average() {
        // x equidistant from both path means: weights equal
        let p1 = (scalar_frames(-1.0), scalar_frames(-2.0));
        let p2 = (scalar_frames(1.0), scalar_frames(2.0));
        let t = 0.5;
        // means at t=0.5 are -1.5 and 1.5; x=0 is equidistant
        let v = oracle_vector_field(&[p1, p2], &scalar_frames(0.0), t, 0.3).unwrap();
        // mean of (-1) and (+1)
        assert!((v.data()[0] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_naive_summation() {
        let mut rng = RngState::new(5);
        let pairs: Vec<(Tensor, Tensor)> = (0..4)
            .map(|_| (rng.normal_tensor(&[1, 3]), rng.normal_tensor(&[1, 3])))
            .collect();
        let x = rng.normal_tensor(&[1, 3]);
        let (t, sigma) = (0.6, 0.05);
        let v = oracle_vector_field(&pairs, &x, t, sigma).unwrap();
        // naive: direct normalized weights, no log-sum-exp
        let mut weights = Vec::new();
        for (x0, x1) in &pairs {
            let mut d2 = 0.0;
            for k in 0..3 {
                let mu = t * x1.data()[k] + (1.0 - t) * x0.data()[k];
                d2 += (x.data()[k] - mu) * (x.data()[k] - mu);
            }
            weights.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
        let total: f64 = weights.iter().sum();
        let mut naive = vec![0.0; 3];
        for ((x0, x1), w) in pairs.iter().zip(&weights) {
            for k in 0..3 {
                naive[k] += (w / total) * (x1.data()[k] - x0.data()[k]);
            }
        }
        for (a, b) in v.data().iter().zip(&naive) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn oracle_rejects_sigma_zero() {
        let p = (scalar_frames(0.0), scalar_frames(1.0));
        assert!(oracle_vector_field(&[p], &scalar_frames(0.0), 0.5, 0.0).is_err());
    }

    fn tiny_model(sigma: f64) -> Model {
        let cfg = ModelConfig {
            vocab_size: 6,
            embed_dim: 4,
            frame_dim: 3,
            cond_dim: 4,
            hidden_dim: 16,
            n_hidden_layers: 2,
            time_embed_dim: 4,
            n_speakers: 2,
            speaker_embed_dim: 3,
            sigma,
        };
        Model::init(cfg, &mut RngState::new(10)).unwrap()
    }

    #[test]
    fn zero_loss_means_zero_update() {
        // x1 == x0 makes the flow target zero; zero estimator weights output
        // the zero field; unit ground-truth durations make L_dur zero too
        let mut model = tiny_model(0.0);
        for (name, t) in model.params.named_tensors_mut() {
            if name.starts_with("est.") || name.starts_with("dur.") {
                t.data_mut().fill(0.0);
            }
        }
        let before = model.params.clone();
        let utt = Utterance {
            id: "u0".into(),
            speaker_id: 0,
            phone_ids: vec![1, 2],
            durations: vec![1, 1],
            frames: Tensor::zeros(vec![2, 3]),
        };
        let x0 = Tensor::zeros(vec![2, 3]);
        let mut rng = RngState::new(0);
        let (loss_fm, loss_dur) = batched_step(
            &mut model,
            &mut rng,
            &[BatchItem {
                utt: &utt,
                endpoints: Some((&x0, &utt.frames.clone())),
            }],
            &AdamHyper::default(),
            Some(0.5),
        )
        .unwrap();
        assert_eq!(loss_fm, 0.0);
        assert_eq!(loss_dur, 0.0);
        assert_eq!(model.params, before);
    }

    #[test]
    fn identical_seeds_identical_stats() {
        let (corpus, _) = make_corpus(21, 4, 6, 3, 2, 0.05, 0.3, "train").unwrap();
        let run = || {
            let mut model = tiny_model(1e-4);
            let mut rng = RngState::new(77);
            let mut stats = Vec::new();
            for utt in &corpus.utterances {
                stats.push(train_step(&mut model, &mut rng, utt, &AdamHyper::default()).unwrap());
            }
            (stats, model)
        };
        let (s1, m1) = run();
        let (s2, m2) = run();
        assert_eq!(s1, s2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn loss_decreases_on_single_utterance() {
        let (corpus, _) = make_corpus(22, 1, 6, 3, 2, 0.0, 0.3, "train").unwrap();
        let utt = &corpus.utterances[0];
        let mut model = tiny_model(0.0);
        let mut rng = RngState::new(5);
        let adam = AdamHyper::default();
        let mut loss_at_10 = f64::NAN;
        let mut last = f64::NAN;
        for step in 1..=2000 {
            let s = train_step_with_t(&mut model, &mut rng, utt, &adam, Some(0.5)).unwrap();
            if step == 10 {
                loss_at_10 = s.loss_total;
            }
            last = s.loss_total;
        }
        assert!(last < loss_at_10, "{last} vs {loss_at_10}");
    }

    #[test]
    fn train_loop_contracts() {
        let (corpus, _) = make_corpus(23, 6, 6, 3, 2, 0.05, 0.3, "train").unwrap();
        let mut model = tiny_model(1e-4);
        let before = model.params.clone();
        let mut rng = RngState::new(1);
        let hist = train_loop(&mut model, &corpus, 0, 4, &AdamHyper::default(), &mut rng, None)
            .unwrap();
        assert!(hist.is_empty());
        assert_eq!(model.params, before);
        let hist = train_loop(&mut model, &corpus, 40, 4, &AdamHyper::default(), &mut rng, None)
            .unwrap();
        assert_eq!(hist.len(), 40);
        assert_eq!(hist.last().unwrap().step, 40);
    }

    #[test]
    fn train_loop_reduces_running_mean() {
        let (corpus, _) = make_corpus(24, 8, 6, 3, 2, 0.05, 0.3, "train").unwrap();
        let mut model = tiny_model(1e-4);
        let mut rng = RngState::new(2);
        let hist = train_loop(&mut model, &corpus, 400, 4, &AdamHyper::default(), &mut rng, None)
            .unwrap();
        let chunk = hist.len() / 10;
        let first: f64 = hist[..chunk].iter().map(|s| s.loss_fm).sum::<f64>() / chunk as f64;
        let last: f64 = hist[hist.len() - chunk..].iter().map(|s| s.loss_fm).sum::<f64>()
            / chunk as f64;
        assert!(last < first, "{last} vs {first}");
    }
}
