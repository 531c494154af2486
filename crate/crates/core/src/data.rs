//! Synthetic corpus with an analytically known conditional distribution:
//! each phone has a mean frame template and a per-frame linear drift, each
//! speaker an additive offset, so the noise-free frame sequence for any
//! (phones, durations, speaker) triple is computable exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::numeric::{RngState, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneTemplate {
    pub phone_id: usize,
    pub base_duration: usize,
    /// Mean frame vector, entries in [-2, 2].
    pub template: Vec<f64>,
    /// Per-frame linear drift within the phone, entries in [-2, 2].
    pub ramp: Vec<f64>,
}

/// The generator's ground truth: phone templates and speaker offsets.
/// Everything needed to evaluate the exact conditional frame mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub vocab_size: usize,
    pub frame_dim: usize,
    pub n_speakers: usize,
    pub sigma_data: f64,
    pub offset_scale: f64,
    pub phones: Vec<PhoneTemplate>,
    /// One offset vector per speaker.
    pub speaker_offsets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: usize,
    pub phone_ids: Vec<usize>,
    pub durations: Vec<usize>,
    /// T x d target frames, T = sum of durations.
    pub frames: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub frame_dim: usize,
    pub n_speakers: usize,
    pub sigma_data: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub utterances: Vec<Utterance>,
}

/// Deterministic template generation from the corpus seed (stream 0).
fn make_templates(
    rng: &RngState,
    vocab_size: usize,
    frame_dim: usize,
    n_speakers: usize,
    sigma_data: f64,
    offset_scale: f64,
) -> TemplateSet {
    let mut trng = rng.split(0);
    let phones = (0..vocab_size)
        .map(|phone_id| {
            let base_duration = trng.uniform_int(2, 5) as usize;
            // templates roughly fill [-1.5, 1.5]; ramps stay small so the
            // condition (which carries no within-phone position) still
            // pins the frame mean tightly
            let template: Vec<f64> = (0..frame_dim)
                .map(|_| 3.0 * trng.uniform() - 1.5)
                .collect();
            let ramp: Vec<f64> = (0..frame_dim)
                .map(|_| 0.4 * trng.uniform() - 0.2)
                .collect();
            PhoneTemplate {
                phone_id,
                base_duration,
                template,
                ramp,
            }
        })
        .collect();
    let speaker_offsets = (0..n_speakers)
        .map(|_| (0..frame_dim).map(|_| offset_scale * trng.normal()).collect())
        .collect();
    TemplateSet {
        vocab_size,
        frame_dim,
        n_speakers,
        sigma_data,
        offset_scale,
        phones,
        speaker_offsets,
    }
}

/// Exact noise-free frame sequence: template + (j/dur) * ramp + speaker offset.
pub fn oracle_frame_mean(
    templates: &TemplateSet,
    phone_ids: &[usize],
    durations: &[usize],
    speaker_id: usize,
) -> Result<Tensor> {
    if phone_ids.len() != durations.len() {
        return Err(Error::validation("phones/durations length mismatch"));
    }
    if let Some(&bad) = phone_ids.iter().find(|&&p| p >= templates.vocab_size) {
        return Err(Error::validation(format!("unknown phone {bad}")));
    }
    if speaker_id >= templates.n_speakers {
        return Err(Error::validation(format!("unknown speaker {speaker_id}")));
    }
    if durations.iter().any(|&d| d == 0) {
        return Err(Error::validation("zero duration"));
    }
    let d = templates.frame_dim;
    let t_total: usize = durations.iter().sum();
    let offset = &templates.speaker_offsets[speaker_id];
    let mut frames = Tensor::zeros(vec![t_total, d]);
    let mut row = 0;
    for (&p, &dur) in phone_ids.iter().zip(durations) {
        let tpl = &templates.phones[p];
        for j in 0..dur {
            let frac = j as f64 / dur as f64;
            let out = frames.row_mut(row);
            for k in 0..d {
                out[k] = tpl.template[k] + frac * tpl.ramp[k] + offset[k];
            }
            row += 1;
        }
    }
    Ok(frames)
}

#[allow(clippy::too_many_arguments)]
pub fn make_corpus(
    seed: u64,
    n_utts: usize,
    vocab_size: usize,
    frame_dim: usize,
    n_speakers: usize,
    sigma_data: f64,
    offset_scale: f64,
    split_tag: &str,
) -> Result<(Corpus, TemplateSet)> {
    if n_utts == 0 {
        return Err(Error::validation("n_utts must be >= 1"));
    }
    if vocab_size == 0 || frame_dim == 0 || n_speakers == 0 {
        return Err(Error::validation("corpus sizes must be positive"));
    }
    if sigma_data < 0.0 {
        return Err(Error::validation("sigma_data must be >= 0"));
    }
    let root = RngState::new(seed);
    let templates = make_templates(
        &root,
        vocab_size,
        frame_dim,
        n_speakers,
        sigma_data,
        offset_scale,
    );
    // utterance u draws from its own split stream, so generation order (or
    // parallelism) cannot change the output
    let tag_salt: u64 = match split_tag {
        "train" => 1,
        "test" => 2,
        _ => 3,
    };
    let utterances: Vec<Utterance> = (0..n_utts)
        .map(|u| {
            let mut urng = root.split(1 + tag_salt * 1_000_000 + u as u64);
            let speaker_id = urng.uniform_int(0, n_speakers as i64 - 1) as usize;
            let n_phones = urng.uniform_int(3, 8) as usize;
            let phone_ids: Vec<usize> = (0..n_phones)
                .map(|_| urng.uniform_int(0, vocab_size as i64 - 1) as usize)
                .collect();
            let durations: Vec<usize> = phone_ids
                .iter()
                .map(|&p| {
                    let jitter = urng.uniform_int(-1, 1);
                    (templates.phones[p].base_duration as i64 + jitter).max(1) as usize
                })
                .collect();
            let mut frames =
                oracle_frame_mean(&templates, &phone_ids, &durations, speaker_id).unwrap();
            for v in frames.data_mut() {
                *v += sigma_data * urng.normal();
            }
            Utterance {
                id: format!("{split_tag}-{u:05}"),
                speaker_id,
                phone_ids,
                durations,
                frames,
            }
        })
        .collect();
    Ok((
        Corpus {
            config: CorpusConfig {
                vocab_size,
                frame_dim,
                n_speakers,
                sigma_data,
            },
            utterances,
        },
        templates,
    ))
}

fn fmt_floats(out: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        // shortest round-trippable decimal form
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    let c = &corpus.config;
    let _ = write!(
        out,
        "vocab_size={}\nd={}\nn_speakers={}\nsigma_data={}\ncount={}\n",
        c.vocab_size,
        c.frame_dim,
        c.n_speakers,
        c.sigma_data,
        corpus.utterances.len()
    );
    for utt in &corpus.utterances {
        let _ = write!(out, "utt {} {}\n", utt.id, utt.speaker_id);
        out.push_str("phones");
        for p in &utt.phone_ids {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
        out.push_str("durs");
        for d in &utt.durations {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for r in 0..utt.frames.shape()[0] {
            fmt_floats(&mut out, utt.frames.row(r));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::format("unexpected end of file"))
    }
}

fn parse_header(r: &mut LineReader<'_>, keys: &[&str]) -> Result<Vec<String>> {
    let mut vals = Vec::with_capacity(keys.len());
    for key in keys {
        let (ln, line) = r.next()?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {ln}: expected key=value")))?;
        if k != *key {
            return Err(Error::format(format!(
                "line {ln}: expected key {key}, got {k}"
            )));
        }
        vals.push(v.to_string());
    }
    Ok(vals)
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(format!("bad {what}: {s:?}")))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let mut r = LineReader {
        lines: text.lines().enumerate(),
    };
    let vals = parse_header(&mut r, &["vocab_size", "d", "n_speakers", "sigma_data", "count"])?;
    let config = CorpusConfig {
        vocab_size: parse_num(&vals[0], "vocab_size")?,
        frame_dim: parse_num(&vals[1], "d")?,
        n_speakers: parse_num(&vals[2], "n_speakers")?,
        sigma_data: parse_num(&vals[3], "sigma_data")?,
    };
    let count: usize = parse_num(&vals[4], "count")?;
    let mut utterances = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, line) = r.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("utt") {
            return Err(Error::format(format!("line {ln}: expected utt record")));
        }
        let id = parts
            .next()
            .ok_or_else(|| Error::format(format!("line {ln}: missing utterance id")))?
            .to_string();
        let speaker_id: usize =
            parse_num(parts.next().unwrap_or(""), &format!("line {ln} speaker id"))?;
        let (ln, line) = r.next()?;
        let phone_ids: Vec<usize> = line
            .strip_prefix("phones")
            .ok_or_else(|| Error::format(format!("line {ln}: expected phones record")))?
            .split_whitespace()
            .map(|s| parse_num(s, &format!("line {ln} phone id")))
            .collect::<Result<_>>()?;
        let (ln, line) = r.next()?;
        let durations: Vec<usize> = line
            .strip_prefix("durs")
            .ok_or_else(|| Error::format(format!("line {ln}: expected durs record")))?
            .split_whitespace()
            .map(|s| parse_num(s, &format!("line {ln} duration")))
            .collect::<Result<_>>()?;
        if phone_ids.len() != durations.len() {
            return Err(Error::format(format!(
                "utterance {id}: {} phones but {} durations",
                phone_ids.len(),
                durations.len()
            )));
        }
        let t_total: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(t_total * config.frame_dim);
        for _ in 0..t_total {
            let (ln, line) = r.next()?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|s| parse_num(s, &format!("line {ln} frame value")))
                .collect::<Result<_>>()?;
            if row.len() != config.frame_dim {
                return Err(Error::format(format!(
                    "line {ln}: frame has {} values, expected {} (frame block must match sum of durations)",
                    row.len(),
                    config.frame_dim
                )));
            }
            data.extend(row);
        }
        let (ln, blank) = r.next()?;
        if !blank.is_empty() {
            return Err(Error::format(format!(
                "line {ln}: expected blank separator after {t_total} frames (frame block length contradicts durations)"
            )));
        }
        let frames = Tensor::new(vec![t_total, config.frame_dim], data)
            .map_err(|e| Error::format(e.to_string()))?;
        utterances.push(Utterance {
            id,
            speaker_id,
            phone_ids,
            durations,
            frames,
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for u in &utterances {
        if !seen.insert(&u.id) {
            return Err(Error::format(format!("duplicate utterance id {}", u.id)));
        }
    }
    Ok(Corpus { config, utterances })
}

pub fn write_templates(templates: &TemplateSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = write!(
        out,
        "vocab_size={}\nd={}\nn_speakers={}\nsigma_data={}\noffset_scale={}\n",
        templates.vocab_size,
        templates.frame_dim,
        templates.n_speakers,
        templates.sigma_data,
        templates.offset_scale
    );
    for p in &templates.phones {
        let _ = write!(out, "phone {} {}\n", p.phone_id, p.base_duration);
        out.push_str("template ");
        fmt_floats(&mut out, &p.template);
        out.push_str("ramp ");
        fmt_floats(&mut out, &p.ramp);
    }
    for (i, off) in templates.speaker_offsets.iter().enumerate() {
        let _ = write!(out, "speaker {i}\n");
        out.push_str("offset ");
        fmt_floats(&mut out, off);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_templates(path: &Path) -> Result<TemplateSet> {
    let text = fs::read_to_string(path)?;
    let mut r = LineReader {
        lines: text.lines().enumerate(),
    };
    let vals = parse_header(
        &mut r,
        &["vocab_size", "d", "n_speakers", "sigma_data", "offset_scale"],
    )?;
    let vocab_size: usize = parse_num(&vals[0], "vocab_size")?;
    let frame_dim: usize = parse_num(&vals[1], "d")?;
    let n_speakers: usize = parse_num(&vals[2], "n_speakers")?;
    let sigma_data: f64 = parse_num(&vals[3], "sigma_data")?;
    let offset_scale: f64 = parse_num(&vals[4], "offset_scale")?;
    let parse_vec = |line: &str, ln: usize, prefix: &str| -> Result<Vec<f64>> {
        line.strip_prefix(prefix)
            .ok_or_else(|| Error::format(format!("line {ln}: expected {prefix} record")))?
            .split_whitespace()
            .map(|s| parse_num(s, &format!("line {ln} value")))
            .collect()
    };
    let mut phones = Vec::with_capacity(vocab_size);
    for expect in 0..vocab_size {
        let (ln, line) = r.next()?;
        let rest = line
            .strip_prefix("phone ")
            .ok_or_else(|| Error::format(format!("line {ln}: expected phone record")))?;
        let mut parts = rest.split_whitespace();
        let phone_id: usize = parse_num(parts.next().unwrap_or(""), "phone id")?;
        if phone_id != expect {
            return Err(Error::format(format!("line {ln}: phone ids out of order")));
        }
        let base_duration: usize = parse_num(parts.next().unwrap_or(""), "base duration")?;
        let (ln, line) = r.next()?;
        let template = parse_vec(line, ln, "template ")?;
        let (ln, line) = r.next()?;
        let ramp = parse_vec(line, ln, "ramp ")?;
        if template.len() != frame_dim || ramp.len() != frame_dim {
            return Err(Error::format(format!(
                "phone {phone_id}: template/ramp width does not match d={frame_dim}"
            )));
        }
        phones.push(PhoneTemplate {
            phone_id,
            base_duration,
            template,
            ramp,
        });
    }
    let mut speaker_offsets = Vec::with_capacity(n_speakers);
    for expect in 0..n_speakers {
        let (ln, line) = r.next()?;
        let rest = line
            .strip_prefix("speaker ")
            .ok_or_else(|| Error::format(format!("line {ln}: expected speaker record")))?;
        let sid: usize = parse_num(rest.trim(), "speaker id")?;
        if sid != expect {
            return Err(Error::format(format!("line {ln}: speaker ids out of order")));
        }
        let (ln, line) = r.next()?;
        let off = parse_vec(line, ln, "offset ")?;
        if off.len() != frame_dim {
            return Err(Error::format(format!(
                "speaker {sid}: offset width does not match d={frame_dim}"
            )));
        }
        speaker_offsets.push(off);
    }
    Ok(TemplateSet {
        vocab_size,
        frame_dim,
        n_speakers,
        sigma_data,
        offset_scale,
        phones,
        speaker_offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::regulate_length;

    fn toy() -> (Corpus, TemplateSet) {
        make_corpus(7, 20, 6, 4, 2, 0.05, 0.5, "train").unwrap()
    }

    #[test]
    fn deterministic_generation() {
        let (a, ta) = toy();
        let (b, tb) = toy();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn noise_free_matches_oracle() {
        let (c, t) = make_corpus(3, 10, 5, 3, 2, 0.0, 0.3, "train").unwrap();
        for u in &c.utterances {
            let oracle = oracle_frame_mean(&t, &u.phone_ids, &u.durations, u.speaker_id).unwrap();
            assert_eq!(u.frames.data(), oracle.data());
        }
    }

    #[test]
    fn per_phone_frame_mean_clt_bound() {
        // many draws of the first frame of phone 0 at duration 1, speaker 0
        let sigma = 0.1;
        let (_, t) = make_corpus(11, 1, 4, 3, 1, sigma, 0.0, "train").unwrap();
        let mut rng = RngState::new(5);
        let n = 10_000;
        let mut mean = vec![0.0; 3];
        for _ in 0..n {
            let oracle = oracle_frame_mean(&t, &[0], &[1], 0).unwrap();
            for (m, &v) in mean.iter_mut().zip(oracle.row(0)) {
                *m += (v + sigma * rng.normal()) / n as f64;
            }
        }
        let bound = 4.0 * sigma / (n as f64).sqrt();
        for (k, m) in mean.iter().enumerate() {
            let expect = t.phones[0].template[k] + t.speaker_offsets[0][k];
            assert!((m - expect).abs() < bound, "dim {k}: {m} vs {expect}");
        }
    }

    #[test]
    fn oracle_speaker_difference_is_offset_difference() {
        let (_, t) = make_corpus(13, 1, 4, 3, 3, 0.05, 0.5, "train").unwrap();
        let a = oracle_frame_mean(&t, &[1, 2], &[2, 2], 0).unwrap();
        let b = oracle_frame_mean(&t, &[1, 2], &[2, 2], 2).unwrap();
        for r in 0..4 {
            for k in 0..3 {
                let diff = b.get2(r, k) - a.get2(r, k);
                let expect = t.speaker_offsets[2][k] - t.speaker_offsets[0][k];
                assert!((diff - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_rejects_unknown_ids() {
        let (_, t) = toy();
        assert!(oracle_frame_mean(&t, &[99], &[1], 0).is_err());
        assert!(oracle_frame_mean(&t, &[0], &[1], 9).is_err());
    }

    #[test]
    fn corpus_roundtrip_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.corpus");
        let p2 = dir.path().join("b.corpus");
        let (c, _) = toy();
        write_corpus(&c, &p1).unwrap();
        let back = read_corpus(&p1).unwrap();
        assert_eq!(c, back);
        write_corpus(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn templates_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.templates");
        let (_, t) = toy();
        write_templates(&t, &p).unwrap();
        assert_eq!(read_templates(&p).unwrap(), t);
    }

    #[test]
    fn empty_corpus_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.corpus");
        let c = Corpus {
            config: CorpusConfig {
                vocab_size: 4,
                frame_dim: 2,
                n_speakers: 1,
                sigma_data: 0.0,
            },
            utterances: vec![],
        };
        write_corpus(&c, &p).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), c);
    }

    #[test]
    fn frame_block_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.corpus");
        let (c, _) = toy();
        write_corpus(&c, &p).unwrap();
        // remove one frame line from the first utterance block
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(8); // first frame row of utterance 0
        fs::write(&p, lines.join("\n")).unwrap();
        assert!(matches!(read_corpus(&p), Err(Error::Format(_))));
    }

    #[test]
    fn regulate_length_agrees_with_frame_counts() {
        let (c, _) = toy();
        let lat_dim = 3;
        for u in &c.utterances {
            let lat = RngState::new(0).normal_tensor(&[u.phone_ids.len(), lat_dim]);
            let cond = regulate_length(&lat, &u.durations).unwrap();
            assert_eq!(cond.frames(), u.frames.shape()[0]);
        }
    }
}
