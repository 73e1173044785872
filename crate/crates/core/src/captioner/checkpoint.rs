//! `EVCT` checkpoint: config, vocabularies, trainable tensors and optimizer
//! state. Frozen weights are rebuilt from the config seed on load.

use std::path::Path;

use crate::binio::{write_atomic, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::fusion::NameVocab;
use crate::nn::Mat;

use super::config::TrainConfig;
use super::decoder::CaptionVocab;
use super::optim::{AdamW, GroupState};
use super::pipeline::{Captioner, TrainableSet};

pub const TRAIN_MAGIC: &[u8; 4] = b"EVCT";
pub const TRAIN_VERSION: u32 = 1;

fn write_words(enc: &mut Encoder, words: &[String]) {
    enc.u64(words.len() as u64);
    for w in words {
        enc.str(w);
    }
}

fn read_words(dec: &mut Decoder<'_>, limit: usize, what: &str) -> Result<Vec<String>> {
    let n = dec.u64(what)?;
    if n > limit as u64 {
        return Err(Error::Format(format!(
            "truncated file: {what} count {n} exceeds file size"
        )));
    }
    (0..n).map(|_| dec.str(what)).collect()
}

fn write_mat(enc: &mut Encoder, m: &Mat) {
    enc.f64s(m.as_slice().expect("standard layout"));
}

fn read_mat(dec: &mut Decoder<'_>, rows: usize, cols: usize, what: &str) -> Result<Mat> {
    let v = dec.f64s(rows * cols, what)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format(format!("{what} holds non-finite values")));
    }
    Ok(Mat::from_shape_vec((rows, cols), v).expect("length checked"))
}

pub fn to_bytes(model: &Captioner, t: &TrainableSet, opt: &AdamW) -> Vec<u8> {
    let mut enc = Encoder::new(TRAIN_MAGIC, TRAIN_VERSION);
    enc.str(&model.config().to_toml_string());
    write_words(&mut enc, model.fusion().vocab().words());
    write_words(&mut enc, model.vocab().words());
    write_mat(&mut enc, &t.t_img);
    write_mat(&mut enc, &t.t_obj.t);
    write_mat(&mut enc, &t.phi.weight);
    enc.f64s(t.phi.bias.as_slice().expect("standard layout"));
    enc.u64(opt.step);
    enc.u32(opt.groups.len() as u32);
    for g in &opt.groups {
        enc.str(&g.name);
        enc.u64(g.m.len() as u64);
        enc.f64s(&g.m);
        enc.f64s(&g.v);
    }
    enc.into_bytes()
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Captioner, TrainableSet, AdamW)> {
    let mut dec = Decoder::open(bytes, TRAIN_MAGIC, TRAIN_VERSION)?;
    let cfg =
        TrainConfig::from_toml_str(&dec.str("config")?).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    let names = read_words(&mut dec, bytes.len(), "name vocabulary")?;
    let words = read_words(&mut dec, bytes.len(), "caption vocabulary")?;
    let name_vocab = NameVocab::from_words(&names);
    let caption_vocab = CaptionVocab::from_words(&words);
    if name_vocab.words() != names.as_slice() || caption_vocab.words() != words.as_slice() {
        return Err(Error::Format("vocabulary is not in canonical order".into()));
    }
    let model = Captioner::new(cfg, name_vocab, caption_vocab)?;

    let mut t = TrainableSet::init(&cfg);
    t.t_img = read_mat(&mut dec, t.t_img.nrows(), t.t_img.ncols(), "T_img")?;
    t.t_obj.t = read_mat(&mut dec, cfg.p, cfg.d_model, "T_obj")?;
    t.phi.weight = read_mat(&mut dec, cfg.d_model, cfg.d_llm, "projection weight")?;
    t.phi.bias = read_mat(&mut dec, 1, cfg.d_llm, "projection bias")?.row(0).to_owned();

    let mut opt = t.new_optimizer(&cfg);
    opt.step = dec.u64("optimizer step")?;
    let n_groups = dec.u32("group count")? as usize;
    if n_groups != opt.groups.len() {
        return Err(Error::Format(format!(
            "expected {} optimizer groups, found {n_groups}",
            opt.groups.len()
        )));
    }
    for g in opt.groups.iter_mut() {
        let name = dec.str("group name")?;
        let len = dec.u64("group size")? as usize;
        if name != g.name || len != g.m.len() {
            return Err(Error::Format(format!(
                "optimizer group {name:?} ({len}) does not match {:?} ({})",
                g.name,
                g.m.len()
            )));
        }
        *g = GroupState {
            name,
            m: dec.f64s(len, "first moment")?,
            v: dec.f64s(len, "second moment")?,
        };
    }
    dec.finish()?;
    Ok((model, t, opt))
}

pub fn save(path: impl AsRef<Path>, model: &Captioner, t: &TrainableSet, opt: &AdamW) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(model, t, opt))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Captioner, TrainableSet, AdamW)> {
    from_bytes(&std::fs::read(path)?)
}
