use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use namecap_core::captioner::synthetic::SyntheticCorpus;
use namecap_core::captioner::{checkpoint, Captioner, TrainConfig, TrainableSet};
use namecap_core::fusion::NameVocab;
use namecap_core::memory::{read_jsonl, RecordJson};
use namecap_core::retrieval::retrieve_batch;
use namecap_core::{FeatureBlock, RetrievalConfig, VisualNameMemory};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::encoder::{PseudoEncoder, ROWS};
use crate::features::{read_features, write_features, FeatureRecord};
use crate::service::{router, ServiceState};
use crate::wire::{float, WireNames};

#[derive(Debug, Parser)]
#[command(
    name = "namecap",
    version,
    about = "Visual-name memory, retrieval service and toy captioner"
)]
pub struct Cli {
    /// Seed for the pseudo-encoder and all frozen weights (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training/model configuration as `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a memory file from JSON-lines records.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append JSON-lines records to a memory, writing a new file.
    Expand {
        #[arg(long)]
        mem: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print entry count, distinct names and width of a memory.
    Stats {
        mem: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Top-K names for every image in a feature file.
    Retrieve {
        #[arg(long)]
        mem: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Pseudo-encode image ids into a feature file.
    Encode {
        /// Image ids; read one per line from --ids-file as well.
        #[arg(long = "id")]
        ids: Vec<String>,
        #[arg(long)]
        ids_file: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the three trainable groups on a small caption file.
    DemoTrain {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        mem: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 25)]
        log_every: u64,
        /// Write the trained checkpoint here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption images with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mem: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Pseudo-encode these ids instead of reading features.
        #[arg(long = "id")]
        ids: Vec<String>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Serve /v1/retrieve, /v1/stats and /v1/expand over a memory.
    Serve {
        #[arg(long)]
        mem: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write the synthetic 20-caption corpus (records, captions and features).
    Toy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
}

/// One caption-file line. Without `features` the pseudo-encoder supplies
/// them from `id`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f32>>>,
}

#[derive(Serialize)]
struct GeneratedCaption<'a> {
    id: String,
    caption: String,
    /// Length-normalized log-probability.
    score: Box<RawValue>,
    names: Vec<&'a str>,
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn load_memory(path: &Path) -> anyhow::Result<VisualNameMemory> {
    VisualNameMemory::load(path).with_context(|| format!("loading memory {}", path.display()))
}

fn config(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_captions(path: &Path, enc: &PseudoEncoder) -> anyhow::Result<Vec<(String, FeatureBlock, String)>> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line).with_context(|| format!("caption line {}", n + 1))?;
        let features = match rec.features {
            Some(rows) => {
                if rows.len() != ROWS {
                    bail!("caption line {}: {} feature rows, expected {ROWS}", n + 1, rows.len());
                }
                FeatureBlock::new(rows)?
            }
            None => enc.encode(&rec.id)?,
        };
        out.push((rec.id, features, rec.caption));
    }
    Ok(out)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::Build { input, dim, out: path } => {
            let records = read_jsonl(open(&input)?)?;
            let mem = VisualNameMemory::build(&records, dim)?;
            mem.save(&path)?;
            writeln!(
                out,
                "wrote {} entries ({} names) to {}",
                mem.len(),
                mem.stats().distinct_names,
                path.display()
            )?;
        }
        Command::Expand { mem, input, out: path } => {
            let base = load_memory(&mem)?;
            let grown = base.expand(&read_jsonl(open(&input)?)?)?;
            grown.save(&path)?;
            writeln!(
                out,
                "wrote {} entries (+{}) to {}",
                grown.len(),
                grown.len() - base.len(),
                path.display()
            )?;
        }
        Command::Stats { mem, json } => {
            let s = load_memory(&mem)?.stats();
            if json {
                writeln!(out, "{}", serde_json::to_string(&s)?)?;
            } else {
                writeln!(out, "count {}\ndistinct {}\ndim {}", s.count, s.distinct_names, s.dim)?;
                writeln!(
                    out,
                    "real {}\nsynthetic {}\nunspecified {}",
                    s.real, s.synthetic, s.unspecified
                )?;
            }
        }
        Command::Retrieve { mem, features, k, json } => {
            let mem = load_memory(&mem)?;
            let feats = read_features(open(&features)?, mem.dim())?;
            let rc = RetrievalConfig { k: k.unwrap_or(cfg.k) };
            let blocks: Vec<_> = feats.iter().map(|(_, b)| b.clone()).collect();
            for ((id, _), r) in feats.iter().zip(retrieve_batch(&blocks, &mem, &rc)) {
                let r = r.with_context(|| format!("image {id}"))?;
                if json {
                    writeln!(out, "{}", WireNames::new(Some(id.clone()), &r).to_json())?;
                } else {
                    let list: Vec<_> = r.names.iter().map(|n| format!("{} ({:.6})", n.name, n.score)).collect();
                    writeln!(out, "{id}\t{}", list.join(", "))?;
                }
            }
        }
        Command::Encode {
            mut ids,
            ids_file,
            dim,
            out: path,
        } => {
            if let Some(f) = ids_file {
                for line in open(&f)?.lines() {
                    let line = line?;
                    if !line.trim().is_empty() {
                        ids.push(line.trim().to_owned());
                    }
                }
            }
            if ids.is_empty() {
                bail!("no image ids given (use --id or --ids-file)");
            }
            let enc = PseudoEncoder::new(cfg.seed, dim.unwrap_or(cfg.enc_dim));
            let recs = ids
                .iter()
                .map(|id| Ok(FeatureRecord::from_block(id.clone(), &enc.encode(id)?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            match path {
                Some(p) => write_features(std::io::BufWriter::new(File::create(&p)?), &recs)?,
                None => write_features(&mut *out, &recs)?,
            }
        }
        Command::DemoTrain {
            captions,
            mem,
            steps,
            log_every,
            out: path,
        } => {
            demo_train(&cfg, &captions, mem.as_deref(), steps, log_every, path.as_deref(), out)?;
        }
        Command::Generate {
            checkpoint: ckpt,
            mem,
            features,
            ids,
            beam,
        } => {
            let (model, t, _) = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let mcfg = *model.config();
            let mem = mem.as_deref().map(load_memory).transpose()?;
            let mut inputs = match features {
                Some(f) => read_features(open(&f)?, mcfg.enc_dim)?,
                None => Vec::new(),
            };
            let enc = PseudoEncoder::new(mcfg.seed, mcfg.enc_dim);
            for id in ids {
                let block = enc.encode(&id)?;
                inputs.push((id, block));
            }
            if inputs.is_empty() {
                bail!("nothing to caption (use --features or --id)");
            }
            for (id, block) in inputs {
                let c = model.generate(&block, &t, mem.as_ref(), beam.unwrap_or(mcfg.beam_size))?;
                let line = GeneratedCaption {
                    id,
                    caption: c.text.clone(),
                    score: float(c.hypothesis.score()),
                    names: c.names.name_list(),
                };
                writeln!(out, "{}", serde_json::to_string(&line)?)?;
            }
        }
        Command::Serve { mem, host, port, k } => {
            let mem = load_memory(&mem)?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad --host/--port")?;
            let state = ServiceState::new(mem, RetrievalConfig { k: k.unwrap_or(cfg.k) });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                writeln!(out, "listening on http://{}", listener.local_addr()?)?;
                out.flush()?;
                axum::serve(listener, router(state)).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
        Command::Toy { out_dir, n } => {
            std::fs::create_dir_all(&out_dir)?;
            let corpus = SyntheticCorpus::generate(n, cfg.d_model, cfg.seed)?;
            let mut rec = std::io::BufWriter::new(File::create(out_dir.join("records.jsonl"))?);
            for e in corpus.memory.entries() {
                let r = RecordJson {
                    name: e.name.to_owned(),
                    source: Some(e.source),
                    embeddings: None,
                    key: Some(e.key.to_vec()),
                };
                writeln!(rec, "{}", serde_json::to_string(&r)?)?;
            }
            rec.flush()?;
            let mut caps = std::io::BufWriter::new(File::create(out_dir.join("captions.jsonl"))?);
            for p in &corpus.pairs {
                let r = CaptionRecord {
                    id: p.id.clone(),
                    caption: p.caption.clone(),
                    features: Some(p.features.rows().map(<[f32]>::to_vec).collect()),
                };
                writeln!(caps, "{}", serde_json::to_string(&r)?)?;
            }
            caps.flush()?;
            let feats: Vec<FeatureRecord> = corpus
                .pairs
                .iter()
                .map(|p| FeatureRecord {
                    id: p.id.clone(),
                    features: p.features.rows().map(<[f32]>::to_vec).collect(),
                })
                .collect();
            write_features(
                std::io::BufWriter::new(File::create(out_dir.join("features.jsonl"))?),
                &feats,
            )?;
            writeln!(
                out,
                "wrote {} records and {} captions to {}",
                corpus.memory.len(),
                n,
                out_dir.display()
            )?;
        }
    }
    Ok(())
}

fn demo_train(
    cfg: &TrainConfig,
    captions: &Path,
    mem: Option<&Path>,
    steps: Option<u64>,
    log_every: u64,
    ckpt: Option<&Path>,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let mem = mem.map(load_memory).transpose()?;
    let pairs = read_captions(captions, &PseudoEncoder::new(cfg.seed, cfg.enc_dim))?;
    if pairs.is_empty() {
        bail!("caption file is empty");
    }
    let names = match &mem {
        Some(m) => NameVocab::from_memory(m),
        None => NameVocab::from_words(std::iter::empty::<&str>()),
    };
    let model = Captioner::new(
        *cfg,
        names,
        Captioner::caption_vocab(pairs.iter().map(|p| p.2.as_str())),
    )?;
    let data = pairs
        .iter()
        .map(|(id, f, c)| model.example(id.clone(), f.clone(), c))
        .collect::<namecap_core::Result<Vec<_>>>()?;
    let mut t = TrainableSet::init(cfg);
    let mut opt = t.new_optimizer(cfg);
    let steps = steps.unwrap_or(cfg.max_steps);
    let mut log_err = Ok(());
    let reports = model.train(&data, &mut t, &mut opt, mem.as_ref(), steps, |r| {
        if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == steps) && log_err.is_ok() {
            log_err = writeln!(out, "step {:>5}  lr {:.3e}  loss {:.6}", r.step, r.lr, r.loss);
        }
    })?;
    log_err?;
    let (final_loss, _) = model.batch_loss(&data, &t, mem.as_ref())?;
    let exact = data
        .iter()
        .map(|ex| {
            model
                .generate(&ex.features, &t, mem.as_ref(), 1)
                .map(|c| c.text == ex.caption)
        })
        .collect::<namecap_core::Result<Vec<_>>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count();
    let initial = reports.first().map_or(final_loss, |r| r.loss);
    writeln!(
        out,
        "initial {initial:.6}  final {final_loss:.6}  ratio {:.6}  exact {exact}/{}",
        final_loss / initial,
        data.len()
    )?;
    if let Some(p) = ckpt {
        checkpoint::save(p, &model, &t, &opt)?;
        writeln!(out, "wrote checkpoint {}", p.display())?;
    }
    Ok(())
}
