//! Flow rectification: pair every training utterance with a (noise,
//! generated sample) endpoint couple produced by the trained model's own
//! ODE trajectory, then retrain on those fixed pairs. Iterable over rounds.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::cfm::{batched_step, BatchItem, TrainStats};
use crate::data::{Corpus, Utterance};
use crate::model::{
    encode_text, regulate_length, vf_forward, AdamHyper, Model, ParamSet,
};
use crate::numeric::{RngState, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub utt_id: String,
    /// x0': the noise endpoint, T x d.
    pub noise: Tensor,
    /// x1-hat: the generated endpoint, T x d.
    pub sample: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    /// Rectification round that produced this set (>= 1).
    pub round: u32,
    pub method: crate::ode::Method,
    pub n_steps: usize,
    pub frame_dim: usize,
    pub entries: Vec<PairEntry>,
    /// Utterances dropped because their solve diverged.
    pub excluded: usize,
}

/// Generate one endpoint pair per training utterance with the trained
/// model. Ground-truth durations build the condition; the duration
/// predictor is never consulted here. Per-utterance RNG streams are split
/// by index, so parallel generation is identical to sequential.
pub fn generate_pairs(
    model: &Model,
    corpus: &Corpus,
    solver: &crate::ode::SolverConfig,
    rng: &RngState,
) -> Result<PairSet> {
    if corpus.utterances.is_empty() {
        return Err(Error::validation("corpus is empty"));
    }
    let results: Vec<Result<Option<PairEntry>>> = corpus
        .utterances
        .par_iter()
        .enumerate()
        .map(|(i, utt)| {
            let mut urng = rng.split(i as u64);
            let latents = encode_text(&model.params, &model.config, &utt.phone_ids, utt.speaker_id)?;
            let cond = regulate_length(&latents, &utt.durations)?;
            let noise = urng.normal_tensor(utt.frames.shape());
            let mut field = |x: &Tensor, t: f64| {
                vf_forward(&model.params, &model.config, x, &cond, t)
            };
            match crate::ode::solve(&mut field, &noise, solver) {
                Ok((sample, _)) => Ok(Some(PairEntry {
                    utt_id: utt.id.clone(),
                    noise,
                    sample,
                })),
                Err(Error::Divergence { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    let mut excluded = 0usize;
    for r in results {
        match r? {
            Some(e) => entries.push(e),
            None => excluded += 1,
        }
    }
    if excluded * 100 > corpus.utterances.len() {
        return Err(Error::Numeric(format!(
            "{excluded} of {} pair solves diverged (> 1%)",
            corpus.utterances.len()
        )));
    }
    Ok(PairSet {
        round: model.round + 1,
        method: solver.method,
        n_steps: solver.n_steps,
        frame_dim: model.config.frame_dim,
        entries,
        excluded,
    })
}

/// Identical to the base training step except the path endpoints are the
/// stored (x0', x1-hat) pair. L_dur still uses ground-truth durations.
pub fn rectified_train_step(
    model: &mut Model,
    rng: &mut RngState,
    utterance: &Utterance,
    entry: &PairEntry,
    adam: &AdamHyper,
) -> Result<TrainStats> {
    if entry.utt_id != utterance.id {
        return Err(Error::validation(format!(
            "pair entry {} does not belong to utterance {}",
            entry.utt_id, utterance.id
        )));
    }
    let (loss_fm, loss_dur) = batched_step(
        model,
        rng,
        &[BatchItem {
            utt: utterance,
            endpoints: Some((&entry.noise, &entry.sample)),
        }],
        adam,
        None,
    )?;
    Ok(TrainStats {
        step: model.opt.step as usize,
        loss_fm,
        loss_dur,
        loss_total: loss_fm + loss_dur,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RoundOpts {
    pub n_steps: usize,
    pub batch_size: usize,
    /// Re-initialize parameters before rectified training instead of warm
    /// starting from the trained weights.
    pub reinit: bool,
}

fn shuffle(indices: &mut [usize], rng: &mut RngState) {
    for i in (1..indices.len()).rev() {
        let j = rng.uniform_int(0, i as i64) as usize;
        indices.swap(i, j);
    }
}

/// One full rectification round: generate pairs, retrain on them, bump the
/// round counter.
#[allow(clippy::too_many_arguments)]
pub fn rectification_round(
    model: &mut Model,
    corpus: &Corpus,
    solver: &crate::ode::SolverConfig,
    opts: &RoundOpts,
    adam: &AdamHyper,
    rng: &mut RngState,
    mut log: Option<&mut dyn Write>,
) -> Result<PairSet> {
    let pair_rng = rng.split(0xA1);
    let pairs = generate_pairs(model, corpus, solver, &pair_rng)?;
    if opts.reinit {
        let mut init_rng = rng.split(0xA2);
        model.params = ParamSet::init(&model.config, &mut init_rng);
        model.opt = crate::model::AdamState::zeros(&model.params);
    }
    // train only on utterances that kept their pair
    let by_id: std::collections::BTreeMap<&str, &Utterance> = corpus
        .utterances
        .iter()
        .map(|u| (u.id.as_str(), u))
        .collect();
    let paired: Vec<(&Utterance, &PairEntry)> = pairs
        .entries
        .iter()
        .map(|e| (by_id[e.utt_id.as_str()], e))
        .collect();
    let mut train_rng = rng.split(0xA3);
    if let Some(w) = log.as_mut() {
        writeln!(w, "step,loss_fm,loss_dur,loss_total")?;
    }
    let mut order: Vec<usize> = (0..paired.len()).collect();
    let mut cursor = order.len();
    for step in 1..=opts.n_steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor >= order.len() {
                shuffle(&mut order, &mut train_rng);
                cursor = 0;
            }
            let (utt, entry) = paired[order[cursor]];
            batch.push(BatchItem {
                utt,
                endpoints: Some((&entry.noise, &entry.sample)),
            });
            cursor += 1;
        }
        let (loss_fm, loss_dur) = batched_step(model, &mut train_rng, &batch, adam, None)?;
        let total = loss_fm + loss_dur;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at rectified step {step}"
            )));
        }
        if let Some(w) = log.as_mut() {
            writeln!(w, "{step},{loss_fm},{loss_dur},{total}")?;
        }
    }
    model.round += 1;
    Ok(pairs)
}

fn fmt_block(out: &mut String, t: &Tensor) {
    for r in 0..t.shape()[0] {
        for (i, v) in t.row(r).iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
}

/// Pair-set file: corpus-style framing with a `noise` and a `sample` frame
/// block per utterance; the header records the round and solver config.
pub fn write_pairset(pairs: &PairSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = write!(
        out,
        "round={}\nmethod={}\nn_steps={}\nd={}\nexcluded={}\ncount={}\n",
        pairs.round,
        pairs.method.name(),
        pairs.n_steps,
        pairs.frame_dim,
        pairs.excluded,
        pairs.entries.len()
    );
    for e in &pairs.entries {
        let _ = write!(out, "utt {}\nframes {}\n", e.utt_id, e.noise.shape()[0]);
        out.push_str("noise\n");
        fmt_block(&mut out, &e.noise);
        out.push_str("sample\n");
        fmt_block(&mut out, &e.sample);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pairset(path: &Path) -> Result<PairSet> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, &str)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::format(format!("unexpected end of file before {what}")))
    };
    let mut header = |key: &str| -> Result<String> {
        let (ln, line) = next(key)?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {ln}: expected key=value")))?;
        if k != key {
            return Err(Error::format(format!("line {ln}: expected key {key}")));
        }
        Ok(v.to_string())
    };
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::format(format!("bad {what}: {s:?}")))
    };
    let round = parse(&header("round")?, "round")? as u32;
    let method = crate::ode::Method::parse(&header("method")?)
        .map_err(|e| Error::format(e.to_string()))?;
    let n_steps = parse(&header("n_steps")?, "n_steps")?;
    let frame_dim = parse(&header("d")?, "d")?;
    let excluded = parse(&header("excluded")?, "excluded")?;
    let count = parse(&header("count")?, "count")?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, line) = next("utt record")?;
        let utt_id = line
            .strip_prefix("utt ")
            .ok_or_else(|| Error::format(format!("line {ln}: expected utt record")))?
            .to_string();
        let (ln, line) = next("frames record")?;
        let frames: usize = parse(
            line.strip_prefix("frames ")
                .ok_or_else(|| Error::format(format!("line {ln}: expected frames record")))?,
            "frame count",
        )?;
        let mut read_block = |tag: &str| -> Result<Tensor> {
            let (ln, line) = next(tag)?;
            if line != tag {
                return Err(Error::format(format!("line {ln}: expected {tag} block")));
            }
            let mut data = Vec::with_capacity(frames * frame_dim);
            for _ in 0..frames {
                let (ln, line) = next("frame row")?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|s| {
                        s.parse()
                            .map_err(|_| Error::format(format!("line {ln}: bad float {s:?}")))
                    })
                    .collect::<Result<_>>()?;
                if row.len() != frame_dim {
                    return Err(Error::format(format!(
                        "line {ln}: {} values, expected {frame_dim}",
                        row.len()
                    )));
                }
                data.extend(row);
            }
            Tensor::new(vec![frames, frame_dim], data).map_err(|e| Error::format(e.to_string()))
        };
        let noise = read_block("noise")?;
        let sample = read_block("sample")?;
        let (ln, blank) = next("blank separator")?;
        if !blank.is_empty() {
            return Err(Error::format(format!("line {ln}: expected blank separator")));
        }
        entries.push(PairEntry {
            utt_id,
            noise,
            sample,
        });
    }
    Ok(PairSet {
        round,
        method,
        n_steps,
        frame_dim,
        entries,
        excluded,
    })
}
