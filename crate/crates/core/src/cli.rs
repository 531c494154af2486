//! Command-line entry point: gen-data, train, rectify, sample, eval.
//!
//! Exit codes: 0 success, 2 usage/input error, 3 numerical/runtime failure.
//! Every command takes a --seed and is end-to-end reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{make_corpus, read_corpus, read_templates, write_corpus, write_templates};
use crate::metrics::{nfe_sweep, report_csv};
use crate::model::{
    encode_text, load_checkpoint, predict_durations, regulate_length, save_checkpoint, vf_forward,
    AdamHyper, Model, ModelConfig,
};
use crate::numeric::{RngState, Tensor};
use crate::ode::{solve, trajectory_csv, Method, SolverConfig};
use crate::rectify::{rectification_round, write_pairset, RoundOpts};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "rectflow",
    version,
    about = "Rectified conditional flow matching for synthetic text-to-frames"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (train + test splits and phone templates).
    GenData(GenDataArgs),
    /// Train a flow-matching model on a corpus.
    Train(TrainArgs),
    /// Run rectification rounds on a trained checkpoint.
    Rectify(RectifyArgs),
    /// Generate frames for one utterance from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate checkpoints over an NFE sweep and write a report CSV.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training utterance count.
    #[arg(long, default_value_t = 500)]
    n_utts: usize,
    /// Test utterance count.
    #[arg(long, default_value_t = 100)]
    test_utts: usize,
    #[arg(long, default_value_t = 16)]
    vocab_size: usize,
    /// Frame dimensionality d.
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    n_speakers: usize,
    /// Per-frame observation noise. The default is large enough that the
    /// data distribution has real within-condition spread, which keeps the
    /// marginal-field trajectories curved before rectification.
    #[arg(long, default_value_t = 0.3)]
    sigma_data: f64,
    /// Speaker offset scale.
    #[arg(long, default_value_t = 0.3)]
    offset_scale: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional training-log CSV path.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Optional key=value config file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Probability-path standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    cond_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    n_hidden_layers: Option<usize>,
    #[arg(long)]
    time_embed_dim: Option<usize>,
    #[arg(long)]
    speaker_embed_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct RectifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for round-k pairsets, checkpoints and logs.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    /// Rectified training steps per round.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value = "euler")]
    solver: String,
    /// Pair-generation ODE steps.
    #[arg(long, default_value_t = 100)]
    nfe: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Re-initialize weights each round instead of warm-starting.
    #[arg(long)]
    reinit: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Space-separated phone ids, e.g. --phones "3 1 4".
    #[arg(long, conflicts_with = "utt")]
    phones: Option<String>,
    /// Utterance id from --corpus to take phones/speaker from.
    #[arg(long, requires = "corpus")]
    utt: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    speaker: usize,
    /// Use the corpus ground-truth durations instead of the predictor.
    #[arg(long, requires = "utt")]
    gt_durations: bool,
    #[arg(long, default_value = "euler")]
    solver: String,
    #[arg(long, default_value_t = 100)]
    nfe: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Frames output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional trajectory CSV path.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint as tag=path; repeat for several models.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<String>,
    /// Test corpus path.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    /// Comma-separated NFE list.
    #[arg(long, default_value = "1,2,5,10,100")]
    nfe: String,
    #[arg(long, default_value = "euler")]
    solver: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Report CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Write 0 for frames_per_second so the report is bitwise reproducible.
    #[arg(long)]
    no_timing: bool,
}

/// Flat key=value run configuration; every key a train flag can set.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub sigma: Option<f64>,
    pub lr: Option<f64>,
    pub embed_dim: Option<usize>,
    pub cond_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub n_hidden_layers: Option<usize>,
    pub time_embed_dim: Option<usize>,
    pub speaker_embed_dim: Option<usize>,
}

impl RunConfig {
    /// Parse the flat `key=value` format; `#` starts a comment; unknown keys
    /// and ill-typed values are rejected.
    pub fn parse(text: &str) -> Result<RunConfig> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::format(format!("config key {k}: bad value {v:?}")))
        }
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("config line {}: expected key=value", i + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => cfg.seed = Some(num(k, v)?),
                "steps" => cfg.steps = Some(num(k, v)?),
                "batch" => cfg.batch = Some(num(k, v)?),
                "sigma" => cfg.sigma = Some(num(k, v)?),
                "lr" => cfg.lr = Some(num(k, v)?),
                "embed_dim" => cfg.embed_dim = Some(num(k, v)?),
                "cond_dim" => cfg.cond_dim = Some(num(k, v)?),
                "hidden_dim" => cfg.hidden_dim = Some(num(k, v)?),
                "n_hidden_layers" => cfg.n_hidden_layers = Some(num(k, v)?),
                "time_embed_dim" => cfg.time_embed_dim = Some(num(k, v)?),
                "speaker_embed_dim" => cfg.speaker_embed_dim = Some(num(k, v)?),
                _ => return Err(Error::format(format!("config: unknown key {k:?}"))),
            }
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Format(_) | Error::Io(_) => 2,
        Error::Shape(_) | Error::Divergence { .. } | Error::Numeric(_) => 3,
    }
}

/// Parse argv, dispatch, and return the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print to stdout and exit 0; real usage errors exit 2
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Rectify(a) => cmd_rectify(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let (train, templates) = make_corpus(
        a.seed,
        a.n_utts,
        a.vocab_size,
        a.d,
        a.n_speakers,
        a.sigma_data,
        a.offset_scale,
        "train",
    )?;
    let (test, _) = make_corpus(
        a.seed,
        a.test_utts,
        a.vocab_size,
        a.d,
        a.n_speakers,
        a.sigma_data,
        a.offset_scale,
        "test",
    )?;
    fs::create_dir_all(&a.out)?;
    write_corpus(&train, &a.out.join("train.corpus"))?;
    write_corpus(&test, &a.out.join("test.corpus"))?;
    write_templates(&templates, &a.out.join("templates"))?;
    println!(
        "gen-data: seed={} train={} test={} vocab={} d={} speakers={} sigma_data={} offset_scale={} -> {}",
        a.seed,
        a.n_utts,
        a.test_utts,
        a.vocab_size,
        a.d,
        a.n_speakers,
        a.sigma_data,
        a.offset_scale,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    // flags beat file, file beats built-in default
    let seed = a.seed.or(file.seed).unwrap_or(7);
    let steps = a.steps.or(file.steps).unwrap_or(5000);
    let batch = a.batch.or(file.batch).unwrap_or(8);
    let lr = a.lr.or(file.lr).unwrap_or(1e-3);
    let corpus = read_corpus(&a.corpus)?;
    let base = ModelConfig::default();
    let n_speakers = corpus.config.n_speakers;
    let config = ModelConfig {
        vocab_size: corpus.config.vocab_size,
        frame_dim: corpus.config.frame_dim,
        n_speakers,
        embed_dim: a.embed_dim.or(file.embed_dim).unwrap_or(base.embed_dim),
        cond_dim: a.cond_dim.or(file.cond_dim).unwrap_or(base.cond_dim),
        hidden_dim: a.hidden_dim.or(file.hidden_dim).unwrap_or(base.hidden_dim),
        n_hidden_layers: a
            .n_hidden_layers
            .or(file.n_hidden_layers)
            .unwrap_or(base.n_hidden_layers),
        time_embed_dim: a
            .time_embed_dim
            .or(file.time_embed_dim)
            .unwrap_or(base.time_embed_dim),
        speaker_embed_dim: a
            .speaker_embed_dim
            .or(file.speaker_embed_dim)
            .unwrap_or(if n_speakers == 1 { 0 } else { base.speaker_embed_dim }),
        sigma: a.sigma.or(file.sigma).unwrap_or(base.sigma),
    };
    let root = RngState::new(seed);
    let mut model = Model::init(config, &mut root.split(1))?;
    let mut train_rng = root.split(2);
    let adam = AdamHyper::with_lr(lr);
    let mut log_buf = a.log.as_ref().map(|_| Vec::<u8>::new());
    let history = crate::cfm::train_loop(
        &mut model,
        &corpus,
        steps,
        batch,
        &adam,
        &mut train_rng,
        log_buf.as_mut().map(|b| b as &mut dyn std::io::Write),
    )?;
    if let (Some(path), Some(buf)) = (&a.log, &log_buf) {
        fs::write(path, buf)?;
    }
    save_checkpoint(&model, &a.out)?;
    let final_loss = history.last().map(|s| s.loss_total).unwrap_or(f64::NAN);
    println!(
        "train: seed={seed} steps={steps} batch={batch} lr={lr} final_loss={final_loss} -> {}",
        a.out.display()
    );
    Ok(())
}

fn cmd_rectify(a: RectifyArgs) -> Result<()> {
    if a.rounds == 0 {
        return Err(Error::validation("--rounds must be >= 1"));
    }
    let method = Method::parse(&a.solver)?;
    let mut model = load_checkpoint(&a.checkpoint)?;
    let corpus = read_corpus(&a.corpus)?;
    fs::create_dir_all(&a.out_dir)?;
    let solver = SolverConfig::new(method, a.nfe);
    let adam = AdamHyper::with_lr(a.lr);
    let opts = RoundOpts {
        n_steps: a.steps,
        batch_size: a.batch,
        reinit: a.reinit,
    };
    let root = RngState::new(a.seed);
    for r in 0..a.rounds {
        let mut round_rng = root.split(0x100 + r as u64);
        let mut log = Vec::<u8>::new();
        let pairs = rectification_round(
            &mut model,
            &corpus,
            &solver,
            &opts,
            &adam,
            &mut round_rng,
            Some(&mut log),
        )?;
        let k = model.round;
        write_pairset(&pairs, &a.out_dir.join(format!("round-{k}.pairset")))?;
        save_checkpoint(&model, &a.out_dir.join(format!("round-{k}.ckpt")))?;
        fs::write(a.out_dir.join(format!("round-{k}.log.csv")), &log)?;
        println!(
            "rectify: round={k} pairs={} excluded={} solver={} nfe={} steps={}",
            pairs.entries.len(),
            pairs.excluded,
            method.name(),
            a.nfe,
            a.steps
        );
    }
    Ok(())
}

fn parse_phone_list(s: &str) -> Result<Vec<usize>> {
    let ids: Vec<usize> = s
        .split_whitespace()
        .map(|tok| {
            tok.parse()
                .map_err(|_| Error::validation(format!("bad phone id {tok:?}")))
        })
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Err(Error::validation("empty phone list"));
    }
    Ok(ids)
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let method = Method::parse(&a.solver)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let cfg = &model.config;
    let (phone_ids, speaker_id, gt_durations) = match (&a.phones, &a.utt) {
        (Some(list), None) => (parse_phone_list(list)?, a.speaker, None),
        (None, Some(id)) => {
            let corpus = read_corpus(a.corpus.as_ref().expect("clap enforces --corpus"))?;
            let utt = corpus
                .utterances
                .iter()
                .find(|u| &u.id == id)
                .ok_or_else(|| Error::validation(format!("utterance {id:?} not in corpus")))?;
            (
                utt.phone_ids.clone(),
                utt.speaker_id,
                a.gt_durations.then(|| utt.durations.clone()),
            )
        }
        _ => return Err(Error::validation("give exactly one of --phones or --utt")),
    };
    if let Some(&bad) = phone_ids.iter().find(|&&p| p >= cfg.vocab_size) {
        return Err(Error::validation(format!("unknown phone id {bad}")));
    }
    if speaker_id >= cfg.n_speakers {
        return Err(Error::validation(format!("unknown speaker {speaker_id}")));
    }
    let latents = encode_text(&model.params, cfg, &phone_ids, speaker_id)?;
    let durations = match gt_durations {
        Some(d) => d,
        None => predict_durations(&model.params, cfg, &latents)?
            .data()
            .iter()
            .map(|&v| v.round().max(1.0) as usize)
            .collect(),
    };
    let cond = regulate_length(&latents, &durations)?;
    let t_total: usize = durations.iter().sum();
    let mut rng = RngState::new(a.seed);
    let x0 = rng.normal_tensor(&[t_total, cfg.frame_dim]);
    let solver = SolverConfig::new(method, a.nfe).recording();
    let mut field = |x: &Tensor, t: f64| vf_forward(&model.params, cfg, x, &cond, t);
    let (x1, traj) = solve(&mut field, &x0, &solver)?;
    let mut out = String::new();
    let _ = write!(out, "d={}\nspeaker={}\n", cfg.frame_dim, speaker_id);
    out.push_str("phones");
    for p in &phone_ids {
        let _ = write!(out, " {p}");
    }
    out.push_str("\ndurs");
    for d in &durations {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
    for r in 0..x1.shape()[0] {
        for (i, v) in x1.row(r).iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    fs::write(&a.out, out)?;
    if let Some(path) = &a.trajectory {
        fs::write(path, trajectory_csv(&traj.expect("recording requested")))?;
    }
    println!(
        "sample: frames={t_total} solver={} nfe={} seed={} -> {}",
        method.name(),
        a.nfe,
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn parse_nfe_list(s: &str) -> Result<Vec<usize>> {
    let list: Vec<usize> = s
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse()
                .map_err(|_| Error::validation(format!("bad NFE value {tok:?}")))
        })
        .collect::<Result<_>>()?;
    if list.is_empty() || list.contains(&0) {
        return Err(Error::validation("NFE list must be nonempty and positive"));
    }
    Ok(list)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut tagged: Vec<(String, Model)> = Vec::new();
    let mut seen = BTreeMap::new();
    for spec in &a.checkpoints {
        let (tag, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("--checkpoint wants tag=path, got {spec:?}")))?;
        if seen.insert(tag.to_string(), ()).is_some() {
            return Err(Error::validation(format!("duplicate checkpoint tag {tag:?}")));
        }
        tagged.push((tag.to_string(), load_checkpoint(Path::new(path))?));
    }
    let corpus = read_corpus(&a.corpus)?;
    let templates = read_templates(&a.templates)?;
    let nfe_list = parse_nfe_list(&a.nfe)?;
    let method = Method::parse(&a.solver)?;
    let models: Vec<(String, &Model)> = tagged.iter().map(|(t, m)| (t.clone(), m)).collect();
    let rng = RngState::new(a.seed);
    let report = nfe_sweep(
        &models,
        &corpus,
        &templates,
        &nfe_list,
        method,
        &rng,
        a.no_timing,
    )?;
    fs::write(&a.out, report_csv(&report))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "eval: sigma_data={}", report.sigma_data)?;
    for (tag, rmse) in &report.duration_log_rmse {
        writeln!(stdout, "eval: duration_log_rmse[{tag}]={rmse}")?;
    }
    writeln!(stdout, "eval: wrote {}", a.out.display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parses_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse("steps=100\nlr = 0.01  # comment\n\n# full comment\n").unwrap();
        assert_eq!(cfg.steps, Some(100));
        assert_eq!(cfg.lr, Some(0.01));
        assert!(cfg.batch.is_none());
        assert!(matches!(
            RunConfig::parse("stepz=100"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            RunConfig::parse("steps=ten"),
            Err(Error::Format(_))
        ));
        assert!(matches!(RunConfig::parse("steps"), Err(Error::Format(_))));
    }

    #[test]
    fn phone_and_nfe_lists() {
        assert_eq!(parse_phone_list("3 1 4").unwrap(), vec![3, 1, 4]);
        assert!(parse_phone_list("  ").is_err());
        assert!(parse_phone_list("1 x").is_err());
        assert_eq!(parse_nfe_list("1,2,5").unwrap(), vec![1, 2, 5]);
        assert!(parse_nfe_list("1,0").is_err());
        assert!(parse_nfe_list("one").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["rectflow", "no-such-command"]), 2);
        assert_eq!(run(["rectflow", "gen-data"]), 2); // missing --out
        assert_eq!(run(["rectflow", "--help"]), 0);
    }

    #[test]
    fn gen_data_zero_utts_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("toy");
        let code = run([
            "rectflow",
            "gen-data",
            "--out",
            out.to_str().unwrap(),
            "--n-utts",
            "0",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(exit_code(&Error::validation("x")), 2);
        assert_eq!(exit_code(&Error::format("x")), 2);
        assert_eq!(exit_code(&Error::shape("x")), 3);
        assert_eq!(exit_code(&Error::Divergence { step: 1 }), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
    }
}
