//! Checkpoint file: magic "VFLW", format version u32 LE, length-prefixed
//! UTF-8 key=value config block, then tensor records (name length u32, name
//! bytes, rank u32, dims u32 each, payload little-endian f64) until EOF.
//! Optimizer moments are stored as "adam.m.<name>" / "adam.v.<name>".

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::model::{AdamState, Model, ModelConfig, ParamSet};
use crate::numeric::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VFLW";
const VERSION: u32 = 1;

fn config_block(model: &Model) -> String {
    let c = &model.config;
    format!(
        "vocab_size={}\nembed_dim={}\nframe_dim={}\ncond_dim={}\nhidden_dim={}\n\
         n_hidden_layers={}\ntime_embed_dim={}\nn_speakers={}\nspeaker_embed_dim={}\n\
         sigma={}\nround={}\nadam_step={}\n",
        c.vocab_size,
        c.embed_dim,
        c.frame_dim,
        c.cond_dim,
        c.hidden_dim,
        c.n_hidden_layers,
        c.time_embed_dim,
        c.n_speakers,
        c.speaker_embed_dim,
        c.sigma,
        model.round,
        model.opt.step,
    )
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = config_block(model);
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    for (name, t) in model.params.named_tensors() {
        write_tensor(&mut w, &name, t)?;
    }
    for (name, t) in model.opt.m.named_tensors() {
        write_tensor(&mut w, &format!("adam.m.{name}"), t)?;
    }
    for (name, t) in model.opt.v.named_tensors() {
        write_tensor(&mut w, &format!("adam.v.{name}"), t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated file while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn parse_usize(map: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| Error::format(format!("missing config key {key}")))?
        .parse()
        .map_err(|_| Error::format(format!("bad value for config key {key}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format("bad magic bytes (expected VFLW)"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = read_u32(&mut r, "config block length")? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact_or(&mut r, &mut cfg_bytes, "config block")?;
    let cfg_str = String::from_utf8(cfg_bytes)
        .map_err(|_| Error::format("config block is not valid UTF-8"))?;
    let mut map = BTreeMap::new();
    for line in cfg_str.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("malformed config line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let config = ModelConfig {
        vocab_size: parse_usize(&map, "vocab_size")?,
        embed_dim: parse_usize(&map, "embed_dim")?,
        frame_dim: parse_usize(&map, "frame_dim")?,
        cond_dim: parse_usize(&map, "cond_dim")?,
        hidden_dim: parse_usize(&map, "hidden_dim")?,
        n_hidden_layers: parse_usize(&map, "n_hidden_layers")?,
        time_embed_dim: parse_usize(&map, "time_embed_dim")?,
        n_speakers: parse_usize(&map, "n_speakers")?,
        speaker_embed_dim: parse_usize(&map, "speaker_embed_dim")?,
        sigma: map
            .get("sigma")
            .ok_or_else(|| Error::format("missing config key sigma"))?
            .parse()
            .map_err(|_| Error::format("bad value for config key sigma"))?,
    };
    config.validate().map_err(|e| Error::format(e.to_string()))?;
    let round: u32 = parse_usize(&map, "round")? as u32;
    let adam_step: u64 = parse_usize(&map, "adam_step")? as u64;

    // read all tensor records
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    loop {
        let mut lenb = [0u8; 4];
        match r.read_exact(&mut lenb) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(lenb) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("tensor name is not valid UTF-8"))?;
        let rank = read_u32(&mut r, &format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(read_u32(&mut r, &format!("dim {i} of {name}"))? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            read_exact_or(&mut r, &mut b, &format!("payload of {name}"))?;
            *v = f64::from_le_bytes(b);
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
    }

    let mut fill = |set: &mut ParamSet, prefix: &str| -> Result<()> {
        for (name, t) in set.named_tensors_mut() {
            let key = format!("{prefix}{name}");
            let stored = tensors
                .remove(&key)
                .ok_or_else(|| Error::format(format!("missing tensor {key}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::format(format!(
                    "tensor {key}: shape {:?} in file, {:?} expected from config",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored;
        }
        Ok(())
    };

    let mut rng = crate::numeric::RngState::new(0);
    let mut params = ParamSet::init(&config, &mut rng);
    let mut m = ParamSet::zeros_like(&params);
    let mut v = ParamSet::zeros_like(&params);
    fill(&mut params, "")?;
    fill(&mut m, "adam.m.")?;
    fill(&mut v, "adam.v.")?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(format!("unexpected tensor {extra}")));
    }
    Ok(Model {
        config,
        params,
        opt: AdamState {
            m,
            v,
            step: adam_step,
        },
        round,
    })
}
