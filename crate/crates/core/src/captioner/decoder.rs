//! Frozen causal transformer standing in for the language model.

use std::collections::{BTreeSet, HashMap};

use ndarray::{s, Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    log_softmax, sinusoid, vstack, AttentionCache, Checksum, FeedForward, FeedForwardCache, Init, LayerNorm,
    LayerNormCache, Mat, MultiHeadAttention,
};

pub const UNK: &str = "[UNK]";
pub const EOS: &str = "[EOS]";

const EMBED_STD: f64 = 0.3;
/// Sharpens attention beyond the usual `1/sqrt(d_head)` temperature.
const QUERY_GAIN: f64 = 4.0;
const LOGIT_GAIN: f64 = 2.0;

/// Decoder vocabulary: `[UNK]`, `[EOS]`, then the sorted word set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl CaptionVocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_owned())
            .filter(|w| w != UNK && w != EOS)
            .collect();
        let words: Vec<String> = [UNK.to_owned(), EOS.to_owned()].into_iter().chain(set).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn eos_id(&self) -> u32 {
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

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Caption targets: the words followed by `[EOS]`.
    pub fn encode_caption(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode(text);
        if ids.is_empty() {
            return Err(Error::EmptyCaption);
        }
        ids.push(self.eos_id());
        Ok(ids)
    }

    /// Text of `ids` up to the first `[EOS]`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != self.eos_id())
            .map(|&id| self.words[id as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderBlock {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

/// Pre-norm causal transformer. Every parameter is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStub {
    cfg: DecoderConfig,
    embed: Mat,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
    /// Output projection, `d_llm x vocab`.
    head: Mat,
}

struct BlockCache {
    attn_norm: LayerNormCache,
    attn: AttentionCache,
    ffn_norm: LayerNormCache,
    ffn: FeedForwardCache,
}

impl DecoderStub {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        if cfg.vocab_size == 0 || cfg.d_llm == 0 || cfg.n_heads == 0 || !cfg.d_llm.is_multiple_of(cfg.n_heads) {
            return Err(Error::Config(
                "decoder needs a nonempty vocabulary and d_llm divisible by n_heads".into(),
            ));
        }
        let init = Init {
            seed: cfg.seed ^ 0x0064_6563_6f64_6572,
        };
        let d = cfg.d_llm;
        let blocks = (0..cfg.n_blocks)
            .map(|b| {
                let tag = format!("dec.{b}");
                let mut attn = MultiHeadAttention::init(&init, &format!("{tag}.attn"), d, cfg.n_heads);
                attn.q.weight *= QUERY_GAIN;
                DecoderBlock {
                    attn_norm: LayerNorm::init(&init, &format!("{tag}.attn_ln"), d),
                    attn,
                    ffn_norm: LayerNorm::init(&init, &format!("{tag}.ffn_ln"), d),
                    ffn: FeedForward::init(&init, &format!("{tag}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            embed: init.normal("dec.embed", cfg.vocab_size, d, EMBED_STD),
            blocks,
            final_norm: LayerNorm::init(&init, "dec.final_ln", d),
            head: init.normal("dec.head", d, cfg.vocab_size, 1.0),
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Input embedding of token `id`.
    pub fn embed_token(&self, id: u32) -> Array1<f64> {
        self.embed.row(id as usize).to_owned()
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Mat {
        let mut m = Mat::zeros((ids.len(), self.cfg.d_llm));
        for (r, &id) in ids.iter().enumerate() {
            m.row_mut(r).assign(&self.embed.row(id as usize));
        }
        m
    }

    /// Checksum over every frozen tensor, token embeddings included.
    pub fn checksum(&self) -> u64 {
        let mut ck = Checksum::default();
        ck.add(self.embed.iter().copied());
        for b in &self.blocks {
            b.attn_norm.checksum(&mut ck);
            b.attn.checksum(&mut ck);
            b.ffn_norm.checksum(&mut ck);
            b.ffn.checksum(&mut ck);
        }
        self.final_norm.checksum(&mut ck);
        ck.add(self.head.iter().copied());
        ck.finish()
    }

    fn logit_scale(&self) -> f64 {
        LOGIT_GAIN / (self.cfg.d_llm as f64).sqrt()
    }

    fn add_positions(&self, x: &mut Mat, offset: usize) {
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            row += &sinusoid(offset + i, self.cfg.d_llm);
        }
    }

    /// Mean negative log-likelihood of `targets` given the embedded prompt,
    /// under teacher forcing, and its gradient with respect to the prompt
    /// rows. `targets[i]` is predicted from the prompt and `targets[..i]`.
    pub fn loss(&self, prompt: &Mat, targets: &[u32]) -> Result<(f64, Mat)> {
        if targets.is_empty() {
            return Err(Error::EmptyCaption);
        }
        let d = self.cfg.d_llm;
        if prompt.ncols() != d || prompt.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "prompt is {:?}, expected rows x {d}",
                prompt.dim()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::ShapeMismatch(format!("target id {bad} outside vocabulary")));
        }
        let n = prompt.nrows();
        let l = targets.len();
        let mut x = vstack(prompt, &self.embed_tokens(&targets[..l - 1]));
        self.add_positions(&mut x, 0);

        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (h, attn_norm) = b.attn_norm.forward(&x);
            let (a, attn) = b.attn.forward(&h, &h, true);
            x += &a;
            let (h, ffn_norm) = b.ffn_norm.forward(&x);
            let (f, ffn) = b.ffn.forward(&h);
            x += &f;
            caches.push(BlockCache {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            });
        }
        let (h, final_cache) = self.final_norm.forward(&x);

        // rows n-1 .. n+l-2 predict the targets
        let scale = self.logit_scale();
        let pred = h.slice(s![n - 1.., ..]);
        let logits = pred.dot(&self.head) * scale;
        let mut loss = 0.0;
        let mut dlogits = Mat::zeros(logits.raw_dim());
        for (i, &t) in targets.iter().enumerate() {
            let lp = log_softmax(logits.row(i).as_slice().expect("contiguous row"));
            loss -= lp[t as usize];
            for (v, g) in dlogits.row_mut(i).iter_mut().enumerate() {
                *g = lp[v].exp() / l as f64;
            }
            dlogits[[i, t as usize]] -= 1.0 / l as f64;
        }
        loss /= l as f64;

        let mut dh = Mat::zeros(h.raw_dim());
        dh.slice_mut(s![n - 1.., ..])
            .assign(&(dlogits.dot(&self.head.t()) * scale));
        let mut dx = self.final_norm.backward(&dh, &final_cache);
        for (b, c) in self.blocks.iter().zip(&caches).rev() {
            let dh = b.ffn.backward(&dx, &c.ffn);
            dx = dx + b.ffn_norm.backward(&dh, &c.ffn_norm);
            let (dq, dkv) = b.attn.backward(&dx, &c.attn);
            dx = &dx + &b.attn_norm.backward(&(dq + dkv), &c.attn_norm);
        }
        Ok((loss, dx.slice(s![..n, ..]).to_owned()))
    }

    /// Starts incremental decoding by feeding the prompt rows.
    pub fn start(&self, prompt: &Mat) -> Result<DecoderState> {
        if prompt.ncols() != self.cfg.d_llm || prompt.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "prompt is {:?}, expected rows x {}",
                prompt.dim(),
                self.cfg.d_llm
            )));
        }
        let mut state = DecoderState {
            keys: vec![Mat::zeros((0, self.cfg.d_llm)); self.blocks.len()],
            values: vec![Mat::zeros((0, self.cfg.d_llm)); self.blocks.len()],
            logits: Vec::new(),
        };
        for row in prompt.rows() {
            self.feed(&mut state, row.to_owned());
        }
        Ok(state)
    }

    /// Appends token `id` to a running decode.
    pub fn push_token(&self, state: &mut DecoderState, id: u32) {
        self.feed(state, self.embed_token(id));
    }

    fn feed(&self, state: &mut DecoderState, input: Array1<f64>) {
        let pos = state.len();
        let mut x = (input + sinusoid(pos, self.cfg.d_llm)).insert_axis(Axis(0));
        for (bi, b) in self.blocks.iter().enumerate() {
            let (h, _) = b.attn_norm.forward(&x);
            let q = b.attn.q.forward(&h.view());
            let k = b.attn.k.forward(&h.view());
            let v = b.attn.v.forward(&h.view());
            state.keys[bi] = vstack(&state.keys[bi], &k);
            state.values[bi] = vstack(&state.values[bi], &v);
            let (keys, values) = (&state.keys[bi], &state.values[bi]);
            let dh = self.cfg.d_llm / b.attn.n_heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut concat = Mat::zeros((1, self.cfg.d_llm));
            for head in 0..b.attn.n_heads {
                let cols = s![.., head * dh..(head + 1) * dh];
                let mut scores = q.slice(cols).dot(&keys.slice(cols).t()) * scale;
                crate::nn::softmax_rows(&mut scores);
                concat.slice_mut(cols).assign(&scores.dot(&values.slice(cols)));
            }
            x += &b.attn.o.forward(&concat.view());
            let (h, _) = b.ffn_norm.forward(&x);
            x += &b.ffn.forward(&h).0;
        }
        let (h, _) = self.final_norm.forward(&x);
        state.logits = (h.row(0).dot(&self.head) * self.logit_scale()).to_vec();
    }
}

/// Key/value cache of a partially decoded sequence plus the logits for the
/// next position.
#[derive(Debug, Clone)]
pub struct DecoderState {
    keys: Vec<Mat>,
    values: Vec<Mat>,
    logits: Vec<f64>,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Log-probabilities of the next token.
    pub fn next_log_probs(&self) -> Vec<f64> {
        log_softmax(&self.logits)
    }
}
