//! Attentive fusion of retrieved object names with visual features.
//!
//! A frozen, seeded transformer stack processes the stream `[T_obj ; Q]`
//! (trainable name query tokens followed by the visual feature rows) with
//! self-attention in every block. Even-indexed blocks add a cross-attention
//! sublayer whose keys and values come from the embedded name sequence
//! `S`. The fused name features `V` are the states at the `P` query token
//! positions.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::binio::{write_atomic, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::memory::VisualNameMemory;
use crate::nn::{
    sinusoid, vstack, AttentionCache, Checksum, FeedForward, FeedForwardCache, Init, LayerNorm, LayerNormCache, Linear,
    Mat, MultiHeadAttention,
};
use crate::retrieval::RetrievalResult;
use crate::vecmath::FeatureBlock;

pub const UNK: &str = "[UNK]";
pub const SEP: &str = "[SEP]";

pub const FUSION_MAGIC: &[u8; 4] = b"EVCF";
pub const FUSION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_model: usize,
    /// Number of object-name query tokens.
    pub p: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Width of incoming visual features; a frozen adapter maps them to
    /// `d_model` when the two differ.
    pub enc_dim: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            p: 8,
            n_blocks: 2,
            n_heads: 12,
            ffn_dim: 3072,
            enc_dim: 768,
            seed: 0,
        }
    }
}

impl FusionConfig {
    /// Small configuration used by tests and the demo pipeline.
    pub fn desk() -> Self {
        Self {
            d_model: 16,
            p: 8,
            n_blocks: 2,
            n_heads: 2,
            ffn_dim: 32,
            enc_dim: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.p == 0 {
            return bad("p must be at least 1");
        }
        if self.enc_dim == 0 || self.ffn_dim == 0 {
            return bad("enc_dim and ffn_dim must be positive");
        }
        Ok(())
    }
}

/// Word-level vocabulary over object names. Ids 0 and 1 are `[UNK]` and
/// `[SEP]`; the remaining words are sorted so the mapping depends only on
/// the word set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl NameVocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_owned())
            .filter(|w| w != UNK && w != SEP)
            .collect();
        let words: Vec<String> = [UNK.to_owned(), SEP.to_owned()].into_iter().chain(set).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    /// All whitespace-separated words appearing in the memory's names.
    pub fn from_memory(mem: &VisualNameMemory) -> Self {
        Self::from_words(mem.distinct_names().into_iter().flat_map(str::split_whitespace))
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn sep_id(&self) -> u32 {
        1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Token ids for `v1 [SEP] v2 [SEP] ... vK`, with the id span of each name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NameSequence {
    pub ids: Vec<u32>,
    pub spans: Vec<Range<usize>>,
}

impl NameSequence {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

pub fn tokenize_names(result: &RetrievalResult, vocab: &NameVocab) -> NameSequence {
    let mut seq = NameSequence::default();
    for (i, ns) in result.names.iter().enumerate() {
        if i > 0 {
            seq.ids.push(vocab.sep_id());
        }
        let start = seq.ids.len();
        seq.ids.extend(ns.name.split_whitespace().map(|w| vocab.id(w)));
        // a name made only of whitespace cannot reach here through a memory,
        // but keep one token per name regardless
        if seq.ids.len() == start {
            seq.ids.push(vocab.unk_id());
        }
        seq.spans.push(start..seq.ids.len());
    }
    seq
}

/// Trainable object-name query tokens, `P x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNameQueries {
    pub t: Mat,
}

impl ObjectNameQueries {
    pub fn init(cfg: &FusionConfig) -> Self {
        let init = Init { seed: cfg.seed };
        Self {
            t: init.normal("t_obj", cfg.p, cfg.d_model, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CrossSublayer {
    attn: MultiHeadAttention,
    norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
struct FusionBlock {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    cross: Option<CrossSublayer>,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

/// All frozen fusion parameters, rebuilt bit-identically from the config
/// seed and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    cfg: FusionConfig,
    vocab: NameVocab,
    token_table: Mat,
    adapter: Option<Linear>,
    blocks: Vec<FusionBlock>,
    id: u64,
}

impl FusionWeights {
    pub fn new(cfg: FusionConfig, vocab: NameVocab) -> Result<Self> {
        cfg.validate()?;
        let init = Init { seed: cfg.seed };
        let d = cfg.d_model;
        let mut token_table = Mat::zeros((vocab.len(), d));
        for (i, w) in vocab.words().iter().enumerate() {
            // per-word streams keep a word's row fixed as the vocabulary grows
            token_table
                .row_mut(i)
                .assign(&init.normal(&format!("tok:{w}"), 1, d, 1.0).row(0));
        }
        let adapter = (cfg.enc_dim != d).then(|| Linear::init(&init, "adapter", cfg.enc_dim, d));
        let blocks = (0..cfg.n_blocks)
            .map(|b| {
                let tag = format!("fusion.{b}");
                FusionBlock {
                    self_attn: MultiHeadAttention::init(&init, &format!("{tag}.self"), d, cfg.n_heads),
                    self_norm: LayerNorm::init(&init, &format!("{tag}.self_ln"), d),
                    cross: (b % 2 == 0).then(|| CrossSublayer {
                        attn: MultiHeadAttention::init(&init, &format!("{tag}.cross"), d, cfg.n_heads),
                        norm: LayerNorm::init(&init, &format!("{tag}.cross_ln"), d),
                    }),
                    ffn: FeedForward::init(&init, &format!("{tag}.ffn"), d, cfg.ffn_dim),
                    ffn_norm: LayerNorm::init(&init, &format!("{tag}.ffn_ln"), d),
                }
            })
            .collect();
        let mut w = Self {
            cfg,
            vocab,
            token_table,
            adapter,
            blocks,
            id: 0,
        };
        w.id = w.checksum();
        Ok(w)
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &NameVocab {
        &self.vocab
    }

    /// Checksum over every frozen tensor.
    pub fn checksum(&self) -> u64 {
        let mut ck = Checksum::default();
        ck.add(self.token_table.iter().copied());
        if let Some(a) = &self.adapter {
            a.checksum(&mut ck);
        }
        for b in &self.blocks {
            b.self_attn.checksum(&mut ck);
            b.self_norm.checksum(&mut ck);
            if let Some(c) = &b.cross {
                c.attn.checksum(&mut ck);
                c.norm.checksum(&mut ck);
            }
            b.ffn.checksum(&mut ck);
            b.ffn_norm.checksum(&mut ck);
        }
        ck.finish()
    }

    /// Maps raw encoder features to `d_model` width (identity when the
    /// widths already agree).
    pub fn adapt(&self, base: &FeatureBlock) -> Result<Mat> {
        if base.dim() != self.cfg.enc_dim {
            return Err(Error::ShapeMismatch(format!(
                "features have width {}, encoder width is {}",
                base.dim(),
                self.cfg.enc_dim
            )));
        }
        let raw = Mat::from_shape_fn((base.n_rows(), base.dim()), |(r, c)| f64::from(base.row(r)[c]));
        Ok(match &self.adapter {
            Some(a) => a.forward(&raw.view()),
            None => raw,
        })
    }

    /// Embedded name sequence with sinusoidal positions.
    pub fn embed_names(&self, seq: &NameSequence) -> Mat {
        let d = self.cfg.d_model;
        let mut e = Mat::zeros((seq.len(), d));
        for (pos, &id) in seq.ids.iter().enumerate() {
            let row = self.token_table.row(id as usize).to_owned() + sinusoid(pos, d);
            e.row_mut(pos).assign(&row);
        }
        e
    }
}

/// Fused name features `V`, `P x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedNameFeatures {
    pub v: Mat,
}

struct BlockCache {
    self_attn: AttentionCache,
    self_norm: LayerNormCache,
    cross: Option<(AttentionCache, LayerNormCache)>,
    ffn: FeedForwardCache,
    ffn_norm: LayerNormCache,
}

/// Activations saved by [`fuse_with_cache`] for [`fuse_grad`].
pub struct FusionCache {
    weights_id: u64,
    p: usize,
    n_queries: usize,
    blocks: Vec<BlockCache>,
}

impl FusionCache {
    /// Attention distributions of every self-attention and cross-attention
    /// head, in block order.
    pub fn attention_maps(&self) -> Vec<&Mat> {
        self.blocks
            .iter()
            .flat_map(|b| {
                b.self_attn
                    .probs
                    .iter()
                    .chain(b.cross.iter().flat_map(|(c, _)| c.probs.iter()))
            })
            .collect()
    }
}

pub struct FusionGrads {
    pub t_obj: Mat,
    pub queries: Mat,
}

pub fn fuse(
    names: &NameSequence,
    queries: &Mat,
    t: &ObjectNameQueries,
    w: &FusionWeights,
) -> Result<FusedNameFeatures> {
    fuse_with_cache(names, queries, t, w).map(|(v, _)| v)
}

pub fn fuse_with_cache(
    names: &NameSequence,
    queries: &Mat,
    t: &ObjectNameQueries,
    w: &FusionWeights,
) -> Result<(FusedNameFeatures, FusionCache)> {
    let d = w.cfg.d_model;
    if queries.ncols() != d || queries.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "visual features are {}x{}, expected rows x {d}",
            queries.nrows(),
            queries.ncols()
        )));
    }
    if t.t.dim() != (w.cfg.p, d) {
        return Err(Error::ShapeMismatch(format!(
            "T_obj is {:?}, expected ({}, {d})",
            t.t.dim(),
            w.cfg.p
        )));
    }
    if let Some(&bad) = names.ids.iter().find(|&&id| id as usize >= w.vocab.len()) {
        return Err(Error::ShapeMismatch(format!("token id {bad} outside vocabulary")));
    }
    let names_emb = (!names.is_empty()).then(|| w.embed_names(names));

    let mut x = vstack(&t.t, queries);
    let mut caches = Vec::with_capacity(w.blocks.len());
    for block in &w.blocks {
        let (a, self_attn) = block.self_attn.forward(&x, &x, false);
        let (y, self_norm) = block.self_norm.forward(&(x + a));
        x = y;
        let cross = match (&block.cross, &names_emb) {
            (Some(c), Some(e)) => {
                let (a, ac) = c.attn.forward(&x, e, false);
                let (y, nc) = c.norm.forward(&(x + a));
                x = y;
                Some((ac, nc))
            }
            // no names: the sublayer reduces to its residual path
            _ => None,
        };
        let (f, ffn) = block.ffn.forward(&x);
        let (y, ffn_norm) = block.ffn_norm.forward(&(x + f));
        x = y;
        caches.push(BlockCache {
            self_attn,
            self_norm,
            cross,
            ffn,
            ffn_norm,
        });
    }
    let v = x.slice(s![..w.cfg.p, ..]).to_owned();
    let cache = FusionCache {
        weights_id: w.id,
        p: w.cfg.p,
        n_queries: queries.nrows(),
        blocks: caches,
    };
    Ok((FusedNameFeatures { v }, cache))
}

/// Reverse-mode gradient of a loss with respect to `T_obj` and the visual
/// feature rows, given `dv = dL/dV`. Frozen weights receive nothing.
pub fn fuse_grad(dv: &Mat, cache: &FusionCache, w: &FusionWeights) -> Result<FusionGrads> {
    if cache.weights_id != w.id || dv.dim() != (cache.p, w.cfg.d_model) {
        return Err(Error::StaleCache);
    }
    let mut dx = Mat::zeros((cache.p + cache.n_queries, w.cfg.d_model));
    dx.slice_mut(s![..cache.p, ..]).assign(dv);
    for (block, bc) in w.blocks.iter().zip(&cache.blocks).rev() {
        let d_res = block.ffn_norm.backward(&dx, &bc.ffn_norm);
        dx = block.ffn.backward(&d_res, &bc.ffn) + &d_res;
        if let (Some(c), Some((ac, nc))) = (&block.cross, &bc.cross) {
            let d_res = c.norm.backward(&dx, nc);
            let (dq, _) = c.attn.backward(&d_res, ac);
            dx = dq + &d_res;
        }
        let d_res = block.self_norm.backward(&dx, &bc.self_norm);
        let (dq, dkv) = block.self_attn.backward(&d_res, &bc.self_attn);
        dx = dq + dkv + &d_res;
    }
    Ok(FusionGrads {
        t_obj: dx.slice(s![..cache.p, ..]).to_owned(),
        queries: dx.slice(s![cache.p.., ..]).to_owned(),
    })
}

/// Writes `T_obj` together with everything needed to rebuild the frozen
/// weights: the config (including seed) and the name vocabulary.
pub fn save_checkpoint(path: impl AsRef<Path>, w: &FusionWeights, t: &ObjectNameQueries) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(w, t))
}

pub fn checkpoint_bytes(w: &FusionWeights, t: &ObjectNameQueries) -> Vec<u8> {
    let mut enc = Encoder::new(FUSION_MAGIC, FUSION_VERSION);
    write_config(&mut enc, &w.cfg);
    enc.u64(w.vocab.len() as u64);
    for word in w.vocab.words() {
        enc.str(word);
    }
    enc.f64s(t.t.as_slice().expect("standard layout"));
    enc.into_bytes()
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FusionWeights, ObjectNameQueries)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(FusionWeights, ObjectNameQueries)> {
    let mut dec = Decoder::open(bytes, FUSION_MAGIC, FUSION_VERSION)?;
    let cfg = read_config(&mut dec)?;
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    let n_words = dec.u64("vocabulary size")?;
    if n_words > bytes.len() as u64 {
        return Err(Error::Format("truncated file: vocabulary size exceeds file".into()));
    }
    let words = (0..n_words)
        .map(|_| dec.str("vocabulary word"))
        .collect::<Result<Vec<_>>>()?;
    let t = dec.f64s(cfg.p * cfg.d_model, "T_obj")?;
    dec.finish()?;
    let vocab = NameVocab::from_words(&words);
    if vocab.words() != words.as_slice() {
        return Err(Error::Format("vocabulary is not in canonical order".into()));
    }
    let w = FusionWeights::new(cfg, vocab)?;
    let t = Mat::from_shape_vec((cfg.p, cfg.d_model), t).expect("length checked");
    Ok((w, ObjectNameQueries { t }))
}

pub(crate) fn write_config(enc: &mut Encoder, cfg: &FusionConfig) {
    for v in [cfg.d_model, cfg.p, cfg.n_blocks, cfg.n_heads, cfg.ffn_dim, cfg.enc_dim] {
        enc.u32(v as u32);
    }
    enc.u64(cfg.seed);
}

pub(crate) fn read_config(dec: &mut Decoder<'_>) -> Result<FusionConfig> {
    Ok(FusionConfig {
        d_model: dec.u32("d_model")? as usize,
        p: dec.u32("p")? as usize,
        n_blocks: dec.u32("n_blocks")? as usize,
        n_heads: dec.u32("n_heads")? as usize,
        ffn_dim: dec.u32("ffn_dim")? as usize,
        enc_dim: dec.u32("enc_dim")? as usize,
        seed: dec.u64("seed")?,
    })
}
