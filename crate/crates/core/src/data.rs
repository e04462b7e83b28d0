//! Synthetic parallel tasks, corpus files, vocabulary, batching.
//!
//! Sequences live as whitespace tokens in files and as id vectors in
//! memory. Ids 0..3 are reserved (<PAD>, <BOS>, <EOS>, <UNK>) in every
//! vocabulary; generated tasks use the numbers 4..vocab_size as their
//! surface tokens so a generated corpus is its own id space.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<PAD>", "<BOS>", "<EOS>", "<UNK>"];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    fn reserved_only() -> Self {
        Vocab {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Vocabulary over the numeric surface tokens 4..vocab_size used by
    /// generated tasks; token "k" gets id k.
    pub fn numeric(vocab_size: usize) -> Result<Self> {
        if vocab_size <= 4 {
            return Err(Error::invalid(
                "vocab",
                format!("vocab_size must exceed the 4 reserved ids, got {vocab_size}"),
            ));
        }
        let mut v = Vocab::reserved_only();
        for k in 4..vocab_size {
            v.tokens.push(k.to_string());
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::IndexOutOfRange {
                what: "vocab id",
                index: id,
                size: self.tokens.len(),
            })
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|id| self.token(*id).map(|s| s.to_string()))
            .collect()
    }
}

/// Frequency-built vocabulary: tokens sorted by (frequency desc, token
/// lexicographic asc) after the reserved ids; tokens below `min_freq` or
/// beyond `max_size` total entries are left out and encode as <UNK>.
pub fn build_vocab<'a>(
    sequences: impl Iterator<Item = &'a [String]>,
    min_freq: usize,
    max_size: usize,
) -> Result<Vocab> {
    if max_size < 5 {
        return Err(Error::invalid(
            "build_vocab",
            format!("max_size must allow at least one real token, got {max_size}"),
        ));
    }
    let mut freq: std::collections::BTreeMap<&str, usize> = Default::default();
    for seq in sequences {
        for tok in seq {
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut v = Vocab::reserved_only();
    for (tok, _) in ranked.into_iter().take(max_size - 4) {
        v.tokens.push(tok.to_string());
    }
    Ok(v)
}

pub type TokenPair = (Vec<String>, Vec<String>);

#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pairs: Vec<TokenPair>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Lexicon,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "lexicon" => Ok(TaskKind::Lexicon),
            other => Err(Error::invalid(
                "task",
                format!("unknown task `{other}` (copy|reverse|lexicon)"),
            )),
        }
    }
}

/// Generate a synthetic parallel corpus.
///
/// copy: target = source. reverse: target = reversed source. lexicon:
/// a seed-fixed random bijection over the content tokens is applied
/// tokenwise, then each non-overlapping adjacent pair is swapped with
/// probability 1/2, so the model must both translate and reorder.
pub fn gen_task(
    kind: TaskKind,
    n: usize,
    vocab_size: usize,
    len_min: usize,
    len_max: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size <= 4 {
        return Err(Error::invalid(
            "gen_task",
            format!("vocab_size must exceed 4, got {vocab_size}"),
        ));
    }
    if len_min < 1 || len_max < len_min {
        return Err(Error::invalid(
            "gen_task",
            format!("invalid length range {len_min}..{len_max}"),
        ));
    }
    let content: Vec<usize> = (4..vocab_size).collect();
    let mut rng = RngStream::new(seed, 0);

    // The lexicon bijection is fixed per corpus, drawn before any pair.
    let mapping: Vec<usize> = {
        let mut image = content.clone();
        let mut perm_rng = RngStream::new(seed, 1);
        perm_rng.shuffle(&mut image);
        image
    };
    let map_token = |t: usize| mapping[t - 4];

    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = len_min + rng.below(len_max - len_min + 1);
        let src: Vec<usize> = (0..len)
            .map(|_| content[rng.below(content.len())])
            .collect();
        let tgt: Vec<usize> = match kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Lexicon => {
                let mut mapped: Vec<usize> = src.iter().map(|t| map_token(*t)).collect();
                let mut i = 0;
                while i + 1 < mapped.len() {
                    if rng.uniform_open() < 0.5 {
                        mapped.swap(i, i + 1);
                    }
                    i += 2;
                }
                mapped
            }
        };
        pairs.push((
            src.iter().map(|t| t.to_string()).collect(),
            tgt.iter().map(|t| t.to_string()).collect(),
        ));
    }
    Ok(ParallelCorpus { pairs })
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(|s| s.to_string()).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Load a parallel corpus from two newline-delimited text files.
pub fn load_parallel(src_path: &Path, tgt_path: &Path) -> Result<ParallelCorpus> {
    let read = |path: &Path| -> Result<Vec<String>> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(text
            .split('\n')
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect())
    };
    let mut src_lines = read(src_path)?;
    let mut tgt_lines = read(tgt_path)?;
    // A trailing newline yields one empty phantom line; drop it on both.
    if src_lines.last().is_some_and(|l| l.is_empty()) {
        src_lines.pop();
    }
    if tgt_lines.last().is_some_and(|l| l.is_empty()) {
        tgt_lines.pop();
    }
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Data(format!(
            "line count mismatch: {} vs {}",
            src_lines.len(),
            tgt_lines.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let src = tokenize(s);
        let tgt = tokenize(t);
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Data(format!("empty sentence at line {}", i + 1)));
        }
        pairs.push((src, tgt));
    }
    Ok(ParallelCorpus { pairs })
}

/// Write a corpus back to two parallel text files.
pub fn write_parallel(corpus: &ParallelCorpus, src_path: &Path, tgt_path: &Path) -> Result<()> {
    let dump = |path: &Path, side: &dyn Fn(&TokenPair) -> String| -> Result<()> {
        let mut text = corpus.pairs.iter().map(side).collect::<Vec<_>>().join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    };
    dump(src_path, &|p| detokenize(&p.0))?;
    dump(tgt_path, &|p| detokenize(&p.1))
}

pub type IdPair = (Vec<usize>, Vec<usize>);

pub fn encode_corpus(corpus: &ParallelCorpus, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<IdPair> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
        .collect()
}

/// One padded minibatch. `tgt_in` rows start with <BOS>; `tgt_out` rows
/// end with exactly one <EOS>; masks are true exactly on real positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_in: Vec<Vec<usize>>,
    pub tgt_out: Vec<Vec<usize>>,
    pub tgt_lens: Vec<usize>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src.len()
    }

    /// Unpadded views for one example: (src ids, decoder inputs, labels).
    pub fn example(&self, i: usize) -> (&[usize], &[usize], &[usize]) {
        (
            &self.src[i][..self.src_lens[i]],
            &self.tgt_in[i][..self.tgt_lens[i]],
            &self.tgt_out[i][..self.tgt_lens[i]],
        )
    }
}

fn pad_to(mut row: Vec<usize>, width: usize) -> (Vec<usize>, Vec<bool>) {
    let mut mask = vec![true; row.len()];
    while row.len() < width {
        row.push(PAD);
        mask.push(false);
    }
    (row, mask)
}

/// Chunk a corpus into padded batches. With `bucket` the pairs are first
/// sorted by target length (stable) so batches pad less; chunk order is
/// then shuffled by `seed` either way.
pub fn batches(pairs: &[IdPair], batch_size: usize, seed: u64, bucket: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batches", "batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if bucket {
        order.sort_by_key(|i| pairs[*i].1.len());
    }
    let mut chunks: Vec<&[usize]> = order.chunks(batch_size).collect();
    let mut rng = RngStream::new(seed, 2);
    rng.shuffle(&mut chunks);

    let mut out = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let mut src = Vec::new();
        let mut src_lens = Vec::new();
        let mut src_mask = Vec::new();
        let mut tgt_in = Vec::new();
        let mut tgt_out = Vec::new();
        let mut tgt_lens = Vec::new();
        let mut tgt_mask = Vec::new();

        let src_width = chunk.iter().map(|i| pairs[*i].0.len()).max().unwrap_or(0);
        let tgt_width = chunk
            .iter()
            .map(|i| pairs[*i].1.len() + 1)
            .max()
            .unwrap_or(0);

        for &i in chunk {
            let (s, t) = &pairs[i];
            let (row, mask) = pad_to(s.clone(), src_width);
            src.push(row);
            src_lens.push(s.len());
            src_mask.push(mask);

            // Inputs and labels share length n = |t|+1: the input row is
            // <BOS> + t, the label row is t shifted left plus <EOS>.
            let mut tin = vec![BOS];
            tin.extend_from_slice(t);
            let mut tout = t.clone();
            tout.push(EOS);
            let n = tout.len();
            let (tin_p, _) = pad_to(tin, tgt_width);
            let (tout_p, tmask) = pad_to(tout, tgt_width);
            tgt_in.push(tin_p);
            tgt_out.push(tout_p);
            tgt_lens.push(n);
            tgt_mask.push(tmask);
        }
        out.push(Batch {
            src,
            src_lens,
            src_mask,
            tgt_in,
            tgt_out,
            tgt_lens,
            tgt_mask,
        });
    }
    Ok(out)
}
