//! Quantitative evaluation: trajectory straightness, two-sample energy
//! distance, conditional RMSE against the data oracle, and NFE sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{oracle_frame_mean, Corpus, TemplateSet};
use crate::model::{encode_text, regulate_length, vf_forward, Model};
use crate::numeric::{RngState, Tensor};
use crate::ode::{solve, Method, SolverConfig, Trajectory};
use crate::{Error, Result};

/// Normalized mean squared deviation of local velocity from the endpoint
/// chord: (1/N) sum_k ||N*(s[k+1]-s[k]) - (s[N]-s[0])||^2 / ||s[N]-s[0]||^2,
/// averaged over trajectories. Zero for a straight constant-speed path.
/// Degenerate trajectories (equal endpoints) are excluded; the count is
/// returned alongside.
pub fn straightness(trajectories: &[Trajectory]) -> Result<(f64, usize)> {
    if trajectories.is_empty() {
        return Err(Error::validation("no trajectories"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for traj in trajectories {
        let n = traj.states.len().saturating_sub(1);
        if n < 2 {
            return Err(Error::validation(
                "straightness needs at least 3 recorded states",
            ));
        }
        let chord = traj.states[n].sub(&traj.states[0])?;
        let chord_sq = chord.norm_sq();
        if chord_sq == 0.0 {
            excluded += 1;
            continue;
        }
        let mut acc = 0.0;
        for k in 0..n {
            let mut vel = traj.states[k + 1].sub(&traj.states[k])?;
            vel = vel.scale(n as f64);
            acc += vel.sub(&chord)?.norm_sq();
        }
        total += acc / n as f64 / chord_sq;
        used += 1;
    }
    if used == 0 {
        return Err(Error::validation("all trajectories degenerate"));
    }
    Ok((total / used as f64, excluded))
}

/// Energy distance V-statistic: 2*mean||a-b|| - mean||a-a'|| - mean||b-b'||
/// over all cross/within pairs. Rows of the inputs are the samples.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("energy_distance expects n x d and m x d"));
    }
    let (n, m) = (a.shape()[0], b.shape()[0]);
    if n < 2 || m < 2 {
        return Err(Error::validation("energy_distance needs >= 2 samples each"));
    }
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let cross: f64 = (0..n)
        .into_par_iter()
        .map(|i| (0..m).map(|j| dist(a.row(i), b.row(j))).sum::<f64>())
        .sum();
    let within_a: f64 = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| dist(a.row(i), a.row(j))).sum::<f64>())
        .sum();
    let within_b: f64 = (0..m)
        .into_par_iter()
        .map(|i| (0..m).map(|j| dist(b.row(i), b.row(j))).sum::<f64>())
        .sum();
    Ok(2.0 * cross / (n * m) as f64
        - within_a / (n * n) as f64
        - within_b / (m * m) as f64)
}

/// Root mean squared error over frames and dims.
pub fn cond_rmse(generated: &Tensor, oracle: &Tensor) -> Result<f64> {
    if generated.shape() != oracle.shape() {
        return Err(Error::shape(format!(
            "cond_rmse: {:?} vs {:?}",
            generated.shape(),
            oracle.shape()
        )));
    }
    Ok((generated.sub(oracle)?.norm_sq() / generated.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub solver: Method,
    pub nfe: usize,
    pub energy_distance: f64,
    pub cond_rmse: f64,
    pub straightness: f64,
    pub frames_per_second: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Per model tag: RMSE of predicted vs ground-truth log-durations,
    /// reported separately from the conditional metrics (which always use
    /// ground-truth durations for comparability).
    pub duration_log_rmse: Vec<(String, f64)>,
    /// Irreducible RMSE floor of the corpus, stated alongside cond_rmse.
    pub sigma_data: f64,
}

/// Sweep every (model, NFE) cell on the test split: one generated sample
/// per utterance (ground-truth durations), energy distance against the real
/// frames, conditional RMSE against the oracle mean, straightness of the
/// recorded trajectories, and wall-clock frames/s.
pub fn nfe_sweep(
    models: &[(String, &Model)],
    test: &Corpus,
    templates: &TemplateSet,
    nfe_list: &[usize],
    method: Method,
    rng: &RngState,
    no_timing: bool,
) -> Result<EvalReport> {
    if models.is_empty() || nfe_list.is_empty() {
        return Err(Error::validation("empty model or NFE list"));
    }
    if test.utterances.is_empty() {
        return Err(Error::validation("empty test corpus"));
    }
    let real_frames = pool_frames(test.utterances.iter().map(|u| &u.frames))?;
    let mut rows = Vec::with_capacity(models.len() * nfe_list.len());
    let mut duration_log_rmse = Vec::with_capacity(models.len());
    for (tag, model) in models {
        for &nfe in nfe_list {
            let solver = SolverConfig::new(method, nfe).recording();
            let started = Instant::now();
            let per_utt: Vec<(Tensor, Trajectory)> = test
                .utterances
                .par_iter()
                .enumerate()
                .map(|(i, utt)| {
                    // x0 depends only on the utterance index, so every
                    // (model, NFE) cell integrates from the same noise
                    let mut urng = rng.split(i as u64);
                    let x0 = urng.normal_tensor(utt.frames.shape());
                    let latents =
                        encode_text(&model.params, &model.config, &utt.phone_ids, utt.speaker_id)?;
                    let cond = regulate_length(&latents, &utt.durations)?;
                    let mut field =
                        |x: &Tensor, t: f64| vf_forward(&model.params, &model.config, x, &cond, t);
                    let (x1, traj) = solve(&mut field, &x0, &solver)?;
                    Ok((x1, traj.expect("recording requested")))
                })
                .collect::<Result<_>>()?;
            let elapsed = started.elapsed().as_secs_f64();
            let total_frames: usize = per_utt.iter().map(|(x, _)| x.shape()[0]).sum();
            let generated = pool_frames(per_utt.iter().map(|(x, _)| x))?;
            let ed = energy_distance(&generated, &real_frames)?;
            let rmse = {
                let mut acc = 0.0;
                for ((x1, _), utt) in per_utt.iter().zip(&test.utterances) {
                    let oracle =
                        oracle_frame_mean(templates, &utt.phone_ids, &utt.durations, utt.speaker_id)?;
                    acc += cond_rmse(x1, &oracle)?;
                }
                acc / test.utterances.len() as f64
            };
            let straight = if nfe >= 2 {
                let trajs: Vec<Trajectory> = per_utt.iter().map(|(_, t)| t.clone()).collect();
                straightness(&trajs)?.0
            } else {
                0.0
            };
            let fps = if no_timing || elapsed == 0.0 {
                0.0
            } else {
                total_frames as f64 / elapsed
            };
            rows.push(EvalRow {
                model: tag.clone(),
                solver: method,
                nfe,
                energy_distance: ed,
                cond_rmse: rmse,
                straightness: straight,
                frames_per_second: fps,
            });
        }
        duration_log_rmse.push((tag.clone(), duration_rmse(model, test)?));
    }
    Ok(EvalReport {
        rows,
        duration_log_rmse,
        sigma_data: test.config.sigma_data,
    })
}

fn duration_rmse(model: &Model, test: &Corpus) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for utt in &test.utterances {
        let latents = encode_text(&model.params, &model.config, &utt.phone_ids, utt.speaker_id)?;
        let pred = crate::model::predict_durations(&model.params, &model.config, &latents)?;
        for (&p, &g) in pred.data().iter().zip(&utt.durations) {
            let diff = p.ln() - (g as f64).ln();
            acc += diff * diff;
            count += 1;
        }
    }
    Ok((acc / count as f64).sqrt())
}

fn pool_frames<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut d = 0usize;
    let mut data = Vec::new();
    let mut rows = 0usize;
    for t in tensors {
        d = t.cols();
        rows += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![rows, d], data)
}

/// Report CSV: `model,solver,nfe,energy_distance,cond_rmse,straightness,frames_per_second`.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out =
        String::from("model,solver,nfe,energy_distance,cond_rmse,straightness,frames_per_second\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model,
            r.solver.name(),
            r.nfe,
            r.energy_distance,
            r.cond_rmse,
            r.straightness,
            r.frames_per_second
        );
    }
    out
}
