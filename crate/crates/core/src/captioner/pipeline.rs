//! The end-to-end captioner: visual features, name retrieval, fusion,
//! projection, frozen decoder. Only [`TrainableSet`] ever changes.

use ndarray::{s, Array1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{fuse_grad, fuse_with_cache, tokenize_names, FusionWeights, NameVocab, ObjectNameQueries};
use crate::memory::VisualNameMemory;
use crate::nn::{vstack, Init, Mat};
use crate::par;
use crate::retrieval::{retrieve_names, RetrievalResult};
use crate::vecmath::FeatureBlock;

use super::config::TrainConfig;
use super::decoder::{CaptionVocab, DecoderConfig, DecoderStub};
use super::generate::{beam_search, greedy, Hypothesis};
use super::optim::AdamW;
use super::projection::ProjectionLayer;
use super::prompt::{assemble_prompt, PromptTemplate};

/// Number of visual feature rows per image.
pub const VISUAL_ROWS: usize = 32;

/// Names of the optimizer's parameter groups, in order.
pub const PARAM_GROUPS: [&str; 3] = ["t_img", "t_obj", "phi"];

/// The only parameters that train: image query tokens, object-name query
/// tokens and the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableSet {
    /// `32 x d_model`, added to the visual features.
    pub t_img: Mat,
    pub t_obj: ObjectNameQueries,
    pub phi: ProjectionLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableGrads {
    pub t_img: Mat,
    pub t_obj: Mat,
    pub phi_weight: Mat,
    pub phi_bias: Array1<f64>,
}

impl TrainableSet {
    pub fn init(cfg: &TrainConfig) -> Self {
        let init = Init { seed: cfg.seed };
        Self {
            t_img: init.normal("t_img", VISUAL_ROWS, cfg.d_model, 0.02),
            t_obj: ObjectNameQueries::init(&cfg.fusion()),
            phi: ProjectionLayer::init(cfg.seed, cfg.d_model, cfg.d_llm),
        }
    }

    pub fn param_count(&self) -> usize {
        self.t_img.len() + self.t_obj.t.len() + self.phi.weight.len() + self.phi.bias.len()
    }

    /// Flattened sizes of the three groups, matching [`PARAM_GROUPS`].
    pub fn group_sizes(&self) -> [(&'static str, usize); 3] {
        [
            (PARAM_GROUPS[0], self.t_img.len()),
            (PARAM_GROUPS[1], self.t_obj.t.len()),
            (PARAM_GROUPS[2], self.phi.weight.len() + self.phi.bias.len()),
        ]
    }

    pub fn new_optimizer(&self, cfg: &TrainConfig) -> AdamW {
        AdamW::new(cfg.adamw(), &self.group_sizes())
    }

    fn slices_mut(&mut self) -> Vec<Vec<&mut [f64]>> {
        vec![
            vec![self.t_img.as_slice_mut().expect("standard layout")],
            vec![self.t_obj.t.as_slice_mut().expect("standard layout")],
            vec![
                self.phi.weight.as_slice_mut().expect("standard layout"),
                self.phi.bias.as_slice_mut().expect("standard layout"),
            ],
        ]
    }
}

impl TrainableGrads {
    fn zeros_like(t: &TrainableSet) -> Self {
        Self {
            t_img: Mat::zeros(t.t_img.raw_dim()),
            t_obj: Mat::zeros(t.t_obj.t.raw_dim()),
            phi_weight: Mat::zeros(t.phi.weight.raw_dim()),
            phi_bias: Array1::zeros(t.phi.bias.len()),
        }
    }

    fn add_scaled(&mut self, other: &Self, a: f64) {
        self.t_img.scaled_add(a, &other.t_img);
        self.t_obj.scaled_add(a, &other.t_obj);
        self.phi_weight.scaled_add(a, &other.phi_weight);
        self.phi_bias.scaled_add(a, &other.phi_bias);
    }

    fn slices(&self) -> Vec<Vec<&[f64]>> {
        vec![
            vec![self.t_img.as_slice().expect("standard layout")],
            vec![self.t_obj.as_slice().expect("standard layout")],
            vec![
                self.phi_weight.as_slice().expect("standard layout"),
                self.phi_bias.as_slice().expect("standard layout"),
            ],
        ]
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        let groups: [(&'static str, bool); 3] = [
            ("t_img", self.t_img.iter().all(|v| v.is_finite())),
            ("t_obj", self.t_obj.iter().all(|v| v.is_finite())),
            (
                "phi",
                self.phi_weight
                    .iter()
                    .chain(self.phi_bias.iter())
                    .all(|v| v.is_finite()),
            ),
        ];
        groups.into_iter().find(|(_, ok)| !ok).map(|(n, _)| n)
    }
}

/// One training pair: raw encoder features for an image and its caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: FeatureBlock,
    pub caption: String,
    /// Caption ids followed by EOS.
    pub targets: Vec<u32>,
}

/// Teacher-forcing input for the decoder: the embedded prompt and the
/// caption targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub prompt: Mat,
    pub targets: Vec<u32>,
    pub caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrozenChecksums {
    pub fusion: u64,
    pub decoder: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub text: String,
    pub hypothesis: Hypothesis,
    pub names: RetrievalResult,
}

/// Frozen components plus vocabularies. Shared immutably by training,
/// evaluation and decoding.
#[derive(Debug, Clone)]
pub struct Captioner {
    cfg: TrainConfig,
    fusion: FusionWeights,
    decoder: DecoderStub,
    vocab: CaptionVocab,
    template: PromptTemplate,
}

/// Activations needed to push a loss gradient back to the trainables.
struct Forward {
    visual: Mat,
    stacked: Mat,
    fusion: crate::fusion::FusionCache,
    batch: TrainingBatch,
    feature_rows: std::ops::Range<usize>,
}

impl Captioner {
    pub fn new(cfg: TrainConfig, names: NameVocab, vocab: CaptionVocab) -> Result<Self> {
        cfg.validate()?;
        let fusion = FusionWeights::new(cfg.fusion(), names)?;
        let decoder = DecoderStub::new(DecoderConfig {
            vocab_size: vocab.len(),
            d_llm: cfg.d_llm,
            n_blocks: cfg.dec_blocks,
            n_heads: cfg.dec_heads,
            ffn_dim: cfg.dec_ffn_dim,
            seed: cfg.seed,
        })?;
        Ok(Self {
            cfg,
            fusion,
            decoder,
            vocab,
            template: PromptTemplate::default(),
        })
    }

    /// Vocabulary covering the prompt template and every caption word.
    pub fn caption_vocab<'a>(captions: impl IntoIterator<Item = &'a str>) -> CaptionVocab {
        let template = PromptTemplate::default();
        let words: Vec<String> = template
            .words()
            .map(str::to_owned)
            .chain(
                captions
                    .into_iter()
                    .flat_map(|c| c.split_whitespace().map(str::to_owned)),
            )
            .collect();
        CaptionVocab::from_words(words)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn fusion(&self) -> &FusionWeights {
        &self.fusion
    }

    pub fn decoder(&self) -> &DecoderStub {
        &self.decoder
    }

    pub fn vocab(&self) -> &CaptionVocab {
        &self.vocab
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn frozen_checksums(&self) -> FrozenChecksums {
        FrozenChecksums {
            fusion: self.fusion.checksum(),
            decoder: self.decoder.checksum(),
        }
    }

    pub fn example(&self, id: impl Into<String>, features: FeatureBlock, caption: &str) -> Result<Example> {
        if features.n_rows() != VISUAL_ROWS || features.dim() != self.cfg.enc_dim {
            return Err(Error::ShapeMismatch(format!(
                "features are {}x{}, expected {VISUAL_ROWS}x{}",
                features.n_rows(),
                features.dim(),
                self.cfg.enc_dim
            )));
        }
        Ok(Example {
            id: id.into(),
            features,
            caption: caption.split_whitespace().collect::<Vec<_>>().join(" "),
            targets: self.vocab.encode_caption(caption)?,
        })
    }

    /// `Q`: adapted encoder features plus the image query tokens.
    pub fn visual_features(&self, base: &FeatureBlock, t: &TrainableSet) -> Result<Mat> {
        let q = self.fusion.adapt(base)?;
        if q.dim() != t.t_img.dim() {
            return Err(Error::ShapeMismatch(format!(
                "visual features {:?} vs T_img {:?}",
                q.dim(),
                t.t_img.dim()
            )));
        }
        Ok(q + &t.t_img)
    }

    /// Names retrieved for one image. Queries are the rows of `Q` when the
    /// memory has `d_model`-wide keys, otherwise the raw encoder rows.
    pub fn retrieve(
        &self,
        base: &FeatureBlock,
        visual: &Mat,
        mem: Option<&VisualNameMemory>,
    ) -> Result<RetrievalResult> {
        let empty = RetrievalResult {
            names: Vec::new(),
            k_requested: self.cfg.k,
        };
        let Some(mem) = mem.filter(|_| self.cfg.k > 0) else {
            return Ok(empty);
        };
        if mem.dim() == self.cfg.d_model {
            let rows = FeatureBlock::from_flat(visual.ncols(), visual.iter().map(|&v| v as f32).collect())?;
            retrieve_names(&rows, mem, &self.cfg.retrieval())
        } else if mem.dim() == base.dim() {
            retrieve_names(base, mem, &self.cfg.retrieval())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.cfg.d_model,
                found: mem.dim(),
            })
        }
    }

    fn forward(
        &self,
        base: &FeatureBlock,
        targets: Vec<u32>,
        caption: String,
        t: &TrainableSet,
        mem: Option<&VisualNameMemory>,
    ) -> Result<(Forward, RetrievalResult)> {
        let visual = self.visual_features(base, t)?;
        let names = self.retrieve(base, &visual, mem)?;
        let seq = tokenize_names(&names, self.fusion.vocab());
        let (fused, fusion) = fuse_with_cache(&seq, &visual, &t.t_obj, &self.fusion)?;
        let stacked = vstack(&visual, &fused.v);
        let projected = t.phi.apply(&stacked);
        let (prompt, layout) = assemble_prompt(&projected, &self.template, &self.vocab, &self.decoder);
        Ok((
            Forward {
                visual,
                stacked,
                fusion,
                batch: TrainingBatch {
                    prompt,
                    targets,
                    caption,
                },
                feature_rows: layout.features(),
            },
            names,
        ))
    }

    /// Embedded prompt for an image, as fed to the decoder.
    pub fn prompt(
        &self,
        base: &FeatureBlock,
        t: &TrainableSet,
        mem: Option<&VisualNameMemory>,
    ) -> Result<(Mat, RetrievalResult)> {
        let (f, names) = self.forward(base, Vec::new(), String::new(), t, mem)?;
        Ok((f.batch.prompt, names))
    }

    /// Mean caption cross-entropy for one example and its gradient with
    /// respect to every trainable tensor.
    pub fn ce_loss(
        &self,
        ex: &Example,
        t: &TrainableSet,
        mem: Option<&VisualNameMemory>,
    ) -> Result<(f64, TrainableGrads)> {
        let (f, _) = self.forward(&ex.features, ex.targets.clone(), ex.caption.clone(), t, mem)?;
        let (loss, dprompt) = self.decoder.loss(&f.batch.prompt, &f.batch.targets)?;
        let dprojected = dprompt.slice(s![f.feature_rows.clone(), ..]).to_owned();
        let pg = t.phi.backward(&f.stacked, &dprojected);
        let rows = f.visual.nrows();
        let dfused = pg.input.slice(s![rows.., ..]).to_owned();
        let fg = fuse_grad(&dfused, &f.fusion, &self.fusion)?;
        let t_img = pg.input.slice(s![..rows, ..]).to_owned() + fg.queries;
        Ok((
            loss,
            TrainableGrads {
                t_img,
                t_obj: fg.t_obj,
                phi_weight: pg.weight,
                phi_bias: pg.bias,
            },
        ))
    }

    /// Loss and gradients averaged over `batch`. Examples are evaluated in
    /// parallel and reduced in order, so the result does not depend on the
    /// thread count.
    pub fn batch_loss(
        &self,
        batch: &[Example],
        t: &TrainableSet,
        mem: Option<&VisualNameMemory>,
    ) -> Result<(f64, TrainableGrads)> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let per_example = par::map(batch, |ex| self.ce_loss(ex, t, mem));
        let scale = 1.0 / batch.len() as f64;
        let mut grads = TrainableGrads::zeros_like(t);
        let mut loss = 0.0;
        for r in per_example {
            let (l, g) = r?;
            loss += l * scale;
            grads.add_scaled(&g, scale);
        }
        Ok((loss, grads))
    }

    /// One optimizer step on `batch`. Non-finite gradients abort the step
    /// with nothing modified.
    pub fn train_step(
        &self,
        batch: &[Example],
        t: &mut TrainableSet,
        opt: &mut AdamW,
        mem: Option<&VisualNameMemory>,
    ) -> Result<StepReport> {
        let (loss, grads) = self.batch_loss(batch, t, mem)?;
        if let Some(group) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient(group));
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteGradient("loss"));
        }
        let step = opt.step;
        let lr = self.cfg.schedule().lr_at(step);
        opt.update(lr, &mut t.slices_mut(), &grads.slices());
        Ok(StepReport { step, lr, loss })
    }

    /// Runs `steps` optimizer steps, cycling through `data` in batches of
    /// `batch_size`, and reports every step.
    pub fn train(
        &self,
        data: &[Example],
        t: &mut TrainableSet,
        opt: &mut AdamW,
        mem: Option<&VisualNameMemory>,
        steps: u64,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        let bs = self.cfg.batch_size.min(data.len()).max(1);
        let n_batches = data.len().div_ceil(bs).max(1);
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let b = (opt.step as usize) % n_batches;
            let batch = &data[b * bs..((b + 1) * bs).min(data.len())];
            let r = self.train_step(batch, t, opt, mem)?;
            on_step(&r);
            reports.push(r);
        }
        Ok(reports)
    }

    /// Caption for an image with `beam_size` beams (1 = greedy).
    pub fn generate(
        &self,
        base: &FeatureBlock,
        t: &TrainableSet,
        mem: Option<&VisualNameMemory>,
        beam_size: usize,
    ) -> Result<Caption> {
        let (prompt, names) = self.prompt(base, t, mem)?;
        let eos = self.vocab.eos_id();
        let hyp = if beam_size == 1 {
            greedy(&self.decoder, &prompt, eos, self.cfg.max_len)?
        } else {
            beam_search(&self.decoder, &prompt, eos, beam_size, self.cfg.max_len)?
                .into_iter()
                .next()
                .expect("beam search returns at least one hypothesis")
        };
        Ok(Caption {
            text: self.vocab.decode(&hyp.tokens),
            hypothesis: hyp,
            names,
        })
    }
}
