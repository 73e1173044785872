//! Greedy and beam-search decoding with length-normalized scores.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::nn::Mat;

use super::decoder::{DecoderState, DecoderStub};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending in EOS when `finished`.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Cumulative log-probability divided by the number of generated tokens.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy(decoder: &DecoderStub, prompt: &Mat, eos: u32, max_len: usize) -> Result<Hypothesis> {
    let mut state = decoder.start(prompt)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let lp = state.next_log_probs();
        let tok = argmax(&lp) as u32;
        hyp.tokens.push(tok);
        hyp.log_prob += lp[tok as usize];
        if tok == eos {
            hyp.finished = true;
            break;
        }
        decoder.push_token(&mut state, tok);
    }
    Ok(hyp)
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then(a.tokens.cmp(&b.tokens))
}

/// Beam search returning up to `beam_size` distinct hypotheses, best first.
///
/// Each step keeps the `beam_size` highest cumulative log-probability
/// extensions; a hypothesis that emits EOS leaves the beam. The search ends
/// once `beam_size` hypotheses have finished, the beam empties, or
/// `max_len` tokens have been generated. The greedy completion is always
/// among the ranked candidates, so the best score is never below greedy's.
pub fn beam_search(
    decoder: &DecoderStub,
    prompt: &Mat,
    eos: u32,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let start = decoder.start(prompt)?;
    let mut live: Vec<(DecoderState, Hypothesis)> = vec![(
        start,
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
    )];
    let mut done: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (b, (state, hyp)) in live.iter().enumerate() {
            for (tok, lp) in state.next_log_probs().into_iter().enumerate() {
                cands.push((hyp.log_prob + lp, b, tok as u32));
            }
        }
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        cands.truncate(beam_size);

        let mut next = Vec::with_capacity(beam_size);
        for (lp, b, tok) in cands {
            let (state, hyp) = &live[b];
            let mut tokens = hyp.tokens.clone();
            tokens.push(tok);
            if tok == eos {
                done.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                let mut state = state.clone();
                decoder.push_token(&mut state, tok);
                next.push((
                    state,
                    Hypothesis {
                        tokens,
                        log_prob: lp,
                        finished: false,
                    },
                ));
            }
        }
        live = next;
        if live.is_empty() || done.len() >= beam_size {
            break;
        }
    }
    done.extend(live.into_iter().map(|(_, h)| h));
    done.push(greedy(decoder, prompt, eos, max_len)?);

    done.sort_by(rank);
    done.dedup_by(|a, b| a.tokens == b.tokens);
    done.truncate(beam_size);
    Ok(done)
}
