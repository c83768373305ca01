//! Byte-level tokenizer, image-placeholder prompts and the splice of visual
//! embeddings into the text stream.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::VisualSequence;
use crate::tensor::{Graph, Var};

pub const IMG_START: usize = 256;
pub const IMG_END: usize = 257;
pub const IMG_CONTEXT: usize = 258;
pub const PAD: usize = 259;
pub const BOS: usize = 260;
pub const EOS: usize = 261;
pub const VOCAB_SIZE: usize = 262;

const SPECIALS: [(usize, &str); 6] = [
    (IMG_CONTEXT, "<IMG-CONTEXT>"),
    (IMG_START, "<img>"),
    (IMG_END, "</img>"),
    (PAD, "<pad>"),
    (BOS, "<s>"),
    (EOS, "</s>"),
];

/// 256 byte tokens plus the special tokens above.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.tokenize_bytes(text.as_bytes())
    }

    /// Bytes become their own ids; special-token literals are matched first
    /// at every position.
    pub fn tokenize_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            if bytes[i] == b'<' {
                for (id, lit) in SPECIALS {
                    if bytes[i..].starts_with(lit.as_bytes()) {
                        ids.push(id);
                        i += lit.len();
                        continue 'outer;
                    }
                }
            }
            ids.push(usize::from(bytes[i]));
            i += 1;
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                out.push(id as u8);
            } else if let Some((_, lit)) = SPECIALS.iter().find(|(s, _)| *s == id) {
                out.extend_from_slice(lit.as_bytes());
            }
        }
        out
    }

    pub fn decode_string(&self, ids: &[usize]) -> String {
        String::from_utf8_lossy(&self.decode(ids)).into_owned()
    }

    pub fn special_literal(id: usize) -> Option<&'static str> {
        SPECIALS.iter().find(|(s, _)| *s == id).map(|(_, l)| *l)
    }
}

/// One image block per frame, in order, then the question.
pub fn build_prompt(n_images: usize, question: &str) -> String {
    let mut p = String::new();
    for _ in 0..n_images {
        p.push_str("<img><IMG-CONTEXT></img>\n");
    }
    p.push_str(question);
    p
}

/// Prompt ids as fed to the model: BOS, then the tokenized prompt.
pub fn prompt_ids(tok: &Tokenizer, n_images: usize, question: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(tok.tokenize(&build_prompt(n_images, question)));
    ids
}

/// Answer ids: the answer bytes followed by EOS.
pub fn answer_ids(tok: &Tokenizer, answer: &str) -> Vec<usize> {
    let mut ids = tok.tokenize(answer);
    ids.push(EOS);
    ids
}

/// Text and visual embeddings in one stream, ready for the language model.
#[derive(Clone, Debug)]
pub struct AssembledSequence {
    /// `[len, d_lm]`
    pub embeddings: Var,
    /// `IMG_CONTEXT` at every visual position.
    pub token_ids: Vec<usize>,
    /// True only on answer tokens.
    pub loss_mask: Vec<bool>,
    pub positions: Vec<usize>,
    /// Indices of the visual positions.
    pub visual_positions: Vec<usize>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Length of the spliced sequence without building it.
pub fn spliced_len(prompt: &[usize], answer: &[usize], visual_lens: &[usize]) -> usize {
    let markers = prompt.iter().filter(|&&t| t == IMG_CONTEXT).count();
    prompt.len() - markers + visual_lens.iter().sum::<usize>() + answer.len()
}

/// Expands the k-th `IMG_CONTEXT` marker of `prompt` into the k-th image's
/// visual tokens, appends `answer` and embeds the text through
/// `embed_table` (`[vocab, d_lm]`).
pub fn splice(
    g: &mut Graph,
    prompt: &[usize],
    answer: &[usize],
    visual: &[VisualSequence],
    embed_table: Var,
    context_limit: usize,
) -> Result<AssembledSequence> {
    let markers = prompt.iter().filter(|&&t| t == IMG_CONTEXT).count();
    if markers != visual.len() {
        return Err(Error::Contract(format!(
            "{markers} image markers in the prompt but {} visual sequences",
            visual.len()
        )));
    }
    if answer.contains(&IMG_CONTEXT) {
        return Err(Error::Contract("answer contains an image marker".into()));
    }
    let lens: Vec<usize> = visual.iter().map(VisualSequence::len).collect();
    let total = spliced_len(prompt, answer, &lens);
    if total > context_limit {
        return Err(Error::Budget {
            required: total,
            available: context_limit,
        });
    }
    if total == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }

    let mut segments = Vec::new();
    let mut token_ids = Vec::with_capacity(total);
    let mut loss_mask = Vec::with_capacity(total);
    let mut visual_positions = Vec::new();
    let mut text: Vec<usize> = Vec::new();
    let mut images = visual.iter();

    let flush = |g: &mut Graph, text: &mut Vec<usize>, segments: &mut Vec<Var>| -> Result<()> {
        if !text.is_empty() {
            segments.push(g.embedding(embed_table, text)?);
            text.clear();
        }
        Ok(())
    };

    for &id in prompt {
        if id == IMG_CONTEXT {
            flush(g, &mut text, &mut segments)?;
            let vis = images.next().expect("marker count checked");
            if let Some(e) = vis.embeddings {
                segments.push(e);
            }
            for _ in 0..vis.len() {
                visual_positions.push(token_ids.len());
                token_ids.push(IMG_CONTEXT);
                loss_mask.push(false);
            }
        } else {
            text.push(id);
            token_ids.push(id);
            loss_mask.push(false);
        }
    }
    for &id in answer {
        text.push(id);
        token_ids.push(id);
        loss_mask.push(true);
    }
    flush(g, &mut text, &mut segments)?;

    let embeddings = if segments.len() == 1 {
        segments[0]
    } else {
        g.concat(&segments, 0)?
    };
    debug_assert_eq!(g.shape(embeddings)[0], total);
    Ok(AssembledSequence {
        embeddings,
        positions: (0..total).collect(),
        token_ids,
        loss_mask,
        visual_positions,
    })
}

/// One question/answer record of a JSON-lines dataset index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub images: Vec<PathBuf>,
    pub question: String,
    pub answer: String,
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<QaRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[QaRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_and_empty() {
        let tok = Tokenizer;
        assert!(tok.tokenize("").is_empty());
        assert_eq!(tok.tokenize("<img></img>"), vec![IMG_START, IMG_END]);
        assert_eq!(tok.tokenize("a<IMG-CONTEXT>"), vec![97, IMG_CONTEXT]);
        assert_eq!(tok.tokenize("<im"), vec![60, 105, 109]);
    }

    #[test]
    fn prompt_layout() {
        assert_eq!(build_prompt(0, "Why?"), "Why?");
        let p = build_prompt(2, "Is it safe to enter the intersection at this time?");
        let ids = Tokenizer.tokenize(&p);
        assert_eq!(ids.iter().filter(|&&t| t == IMG_START).count(), 2);
        assert_eq!(ids.iter().filter(|&&t| t == IMG_CONTEXT).count(), 2);
        assert!(p.ends_with("at this time?"));
        let one = Tokenizer.tokenize(&build_prompt(1, "q"));
        assert_eq!(one.iter().filter(|&&t| t == IMG_START).count(), 1);
        assert_eq!(one.iter().filter(|&&t| t == IMG_END).count(), 1);
    }
}
