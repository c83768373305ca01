//! A small decoder-only causal transformer over assembled sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assembler::{splice, spliced_len, AssembledSequence, EOS};
use crate::error::{Error, Result};
use crate::fusion::VisualSequence;
use crate::nn::{Block, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Session, Var};

fn default_context() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "crate::lm::default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_context")]
    pub context_limit: usize,
}

pub(crate) fn default_vocab() -> usize {
    crate::assembler::VOCAB_SIZE
}

impl LmConfig {
    pub fn problems(&self, path: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_lm == 0 || self.heads == 0 || self.d_lm % self.heads != 0 {
            out.push(format!(
                "{path}.heads: {} must be positive and divide d_lm {}",
                self.heads, self.d_lm
            ));
        }
        if self.context_limit == 0 {
            out.push(format!("{path}.context_limit: must be at least 1"));
        }
        if self.vocab < crate::assembler::VOCAB_SIZE {
            out.push(format!(
                "{path}.vocab: {} is smaller than the tokenizer's {}",
                self.vocab,
                crate::assembler::VOCAB_SIZE
            ));
        }
        out
    }
}

pub struct LmOutput {
    /// `[len, vocab]`
    pub logits: Var,
    /// Mean cross-entropy over supervised targets; `None` when nothing is
    /// supervised.
    pub loss: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ToyLm {
    pub cfg: LmConfig,
    pub tok_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl ToyLm {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        let problems = cfg.problems(prefix);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let d = cfg.d_lm;
        let tok_embed = store.add_normal(format!("{prefix}.tok_embed"), vec![cfg.vocab, d], 1.0, rng)?;
        let pos_embed =
            store.add_normal(format!("{prefix}.pos_embed"), vec![cfg.context_limit, d], 0.2, rng)?;
        let gain = 1.0 / ((2 * cfg.layers.max(1)) as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("{prefix}.block{i}"), d, cfg.heads, true, gain, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), d)?;
        let head = Linear::new(store, &format!("{prefix}.head"), d, cfg.vocab, true, 1.0, rng)?;
        Ok(Self {
            cfg,
            tok_embed,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Final hidden states `[len, d_lm]`.
    pub fn hidden(&self, s: &mut Session, seq: &AssembledSequence) -> Result<Var> {
        let len = seq.len();
        if len > self.cfg.context_limit {
            return Err(Error::Budget {
                required: len,
                available: self.cfg.context_limit,
            });
        }
        let pos = s.param(self.pos_embed);
        let pos = s.graph.embedding(pos, &seq.positions)?;
        let x = s.graph.add(seq.embeddings, pos)?;
        let mut x = s.graph.reshape(x, vec![1, len, self.cfg.d_lm])?;
        for block in &self.blocks {
            x = block.forward(s, x)?;
        }
        let x = s.graph.reshape(x, vec![len, self.cfg.d_lm])?;
        self.norm.forward(s, x)
    }

    /// Rows `t` whose next token is supervised, with that next token.
    fn targets(seq: &AssembledSequence) -> (Vec<usize>, Vec<usize>) {
        (0..seq.len().saturating_sub(1))
            .filter(|&t| seq.loss_mask[t + 1])
            .map(|t| (t, seq.token_ids[t + 1]))
            .unzip()
    }

    /// Logits for every position plus the masked loss.
    pub fn forward(&self, s: &mut Session, seq: &AssembledSequence) -> Result<LmOutput> {
        let h = self.hidden(s, seq)?;
        let logits = self.head.forward(s, h)?;
        let (rows, targets) = Self::targets(seq);
        let loss = if rows.is_empty() {
            None
        } else {
            let picked = s.graph.embedding(logits, &rows)?;
            Some(s.graph.cross_entropy(picked, &targets)?)
        };
        Ok(LmOutput { logits, loss })
    }

    /// Masked loss only; the output head runs on supervised rows alone.
    pub fn loss(&self, s: &mut Session, seq: &AssembledSequence) -> Result<Option<Var>> {
        let (rows, targets) = Self::targets(seq);
        if rows.is_empty() {
            return Ok(None);
        }
        let h = self.hidden(s, seq)?;
        let picked = s.graph.embedding(h, &rows)?;
        let logits = self.head.forward(s, picked)?;
        Ok(Some(s.graph.cross_entropy(logits, &targets)?))
    }

    /// Greedy continuation of `prompt` with its images, stopping after EOS
    /// or `max_new` tokens. Ties pick the lowest id.
    pub fn greedy_decode(
        &self,
        s: &mut Session,
        prompt: &[usize],
        visual: &[VisualSequence],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let lens: Vec<usize> = visual.iter().map(VisualSequence::len).collect();
        let base = spliced_len(prompt, &[], &lens);
        if base + max_new > self.cfg.context_limit {
            return Err(Error::Budget {
                required: base + max_new,
                available: self.cfg.context_limit,
            });
        }
        let table = s.param(self.tok_embed);
        let mut out = Vec::new();
        while out.len() < max_new {
            let seq = splice(&mut s.graph, prompt, &out, visual, table, self.cfg.context_limit)?;
            let h = self.hidden(s, &seq)?;
            let last = s.graph.slice(h, 0, seq.len() - 1, seq.len())?;
            let logits = self.head.forward(s, last)?;
            let next = argmax(s.graph.value(logits));
            out.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
