//! Corpus ingestion: tokenization, the token file container, and seeded
//! shuffle-buffer streams.
//!
//! Streams are the reproducibility backbone: two streams built from the same
//! (source, seq_len, shuffle_buffer, seed) yield bit-identical block
//! sequences, which is what lets paired runs consume identical data.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coords::{base_for_vocab, CoordinateMap};
use crate::error::{Error, Result};
use crate::tensor::{fnv1a_init, fnv1a_u64};

const MAGIC: &[u8; 4] = b"LVTK";
const VERSION: u16 = 1;

/// Tokenization scheme for raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// One token per byte; the raw vocabulary is always 256.
    Byte,
    /// Whitespace-separated words, ids assigned in first-occurrence order.
    Word,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(Scheme::Byte),
            "word" => Ok(Scheme::Word),
            other => Err(Error::Config(format!("unknown scheme '{other}' (byte|word)"))),
        }
    }
}

/// Vocabulary with padding to a perfect k-th power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub v_raw: u32,
    pub v_padded: u32,
    pub k: u32,
    pub b: u64,
}

impl Vocab {
    /// Pad `v_raw` up to `b^k` with `b` the smallest integer k-th root.
    pub fn new(v_raw: u32, k: u32) -> Result<Self> {
        if v_raw == 0 {
            return Err(Error::Ingestion("empty vocabulary".into()));
        }
        let b = base_for_vocab(v_raw as u64, k)?;
        let v_padded = (0..k).try_fold(1u64, |acc, _| {
            let next = acc.checked_mul(b)?;
            (next <= u32::MAX as u64).then_some(next)
        });
        let v_padded = v_padded.ok_or_else(|| {
            Error::Config(format!("padded vocabulary {b}^{k} exceeds u32 range"))
        })? as u32;
        Ok(Vocab { v_raw, v_padded, k, b })
    }

    pub fn coordinate_map(&self) -> CoordinateMap {
        CoordinateMap { k: self.k, b: self.b }
    }
}

/// Tokenize raw text. Byte scheme emits the bytes themselves; word scheme
/// assigns ids to whitespace-separated words in first-occurrence order.
pub fn tokenize_corpus(text: &str, scheme: Scheme, k: u32) -> Result<(Vec<u32>, Vocab)> {
    if text.is_empty() {
        return Err(Error::Ingestion("empty corpus".into()));
    }
    match scheme {
        Scheme::Byte => {
            let ids = text.bytes().map(u32::from).collect();
            Ok((ids, Vocab::new(256, k)?))
        }
        Scheme::Word => {
            let mut vocab_order: Vec<&str> = Vec::new();
            let mut lookup = std::collections::HashMap::new();
            let mut ids = Vec::new();
            for word in text.split_whitespace() {
                let id = *lookup.entry(word).or_insert_with(|| {
                    vocab_order.push(word);
                    (vocab_order.len() - 1) as u32
                });
                ids.push(id);
            }
            if ids.is_empty() {
                return Err(Error::Ingestion("corpus contains no words".into()));
            }
            let vocab = Vocab::new(vocab_order.len() as u32, k)?;
            Ok((ids, vocab))
        }
    }
}

/// Write ids to the token file container:
/// magic "LVTK", u16 version, u32 v_raw, u32 v_padded, u8 k, u32-LE payload.
pub fn write_token_file(path: impl AsRef<Path>, ids: &[u32], vocab: &Vocab) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Format("refusing to write a zero-length token payload".into()));
    }
    let mut buf = Vec::with_capacity(15 + ids.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&vocab.v_raw.to_le_bytes());
    buf.extend_from_slice(&vocab.v_padded.to_le_bytes());
    buf.push(vocab.k as u8);
    for id in ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_token_file(path: impl AsRef<Path>) -> Result<(Vec<u32>, Vocab)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 15 {
        return Err(Error::Format("token file truncated before header end".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not a token file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported token file version {version}")));
    }
    let v_raw = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let v_padded = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    let k = bytes[14] as u32;
    let payload = &bytes[15..];
    if payload.is_empty() {
        return Err(Error::Format("zero-length token payload".into()));
    }
    if payload.len() % 4 != 0 {
        return Err(Error::Format("token payload is not a whole number of u32 ids".into()));
    }
    let ids: Vec<u32> = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let b = base_for_vocab(v_raw as u64, k)?;
    Ok((ids, Vocab { v_raw, v_padded, k, b }))
}

/// Stream configuration; equal configs over the same source yield identical
/// block sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub seq_len: usize,
    pub shuffle_buffer: usize,
    pub seed: u64,
}

/// One drawn batch: `rows` blocks of `seq_len + 1` token ids, so inputs and
/// targets are offset views of the same storage.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    /// Flattened inputs, `rows * (cols - 1)` ids.
    pub fn inputs(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.rows * (self.cols - 1));
        for row in self.ids.chunks_exact(self.cols) {
            out.extend_from_slice(&row[..self.cols - 1]);
        }
        out
    }

    /// Flattened next-token targets, offset by one.
    pub fn targets(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.rows * (self.cols - 1));
        for row in self.ids.chunks_exact(self.cols) {
            out.extend_from_slice(&row[1..]);
        }
        out
    }
}

/// Deterministic, seedable shuffle-buffer stream over fixed-length blocks.
///
/// The final 5% of blocks (in source order, before any shuffling) are held
/// out as the validation split and never enter the training buffer.
#[derive(Debug)]
pub struct TokenStream {
    tokens: Vec<u32>,
    vocab: Vocab,
    cfg: StreamConfig,
    block_len: usize,
    n_train: usize,
    n_val: usize,
    src_pos: usize,
    epoch: u64,
    buffer: Vec<usize>,
    rng: ChaCha8Rng,
    batches_consumed: u64,
    consumed_hash: u64,
}

impl TokenStream {
    pub fn new(tokens: Vec<u32>, vocab: Vocab, cfg: StreamConfig) -> Result<Self> {
        let block_len = cfg.seq_len + 1;
        let n_blocks = tokens.len() / block_len;
        if n_blocks == 0 {
            return Err(Error::Ingestion(format!(
                "seq_len + 1 = {block_len} exceeds corpus length {}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.v_raw) {
            return Err(Error::Ingestion(format!(
                "token id {bad} >= raw vocabulary size {}",
                vocab.v_raw
            )));
        }
        let n_val = n_blocks * 5 / 100;
        let n_train = n_blocks - n_val;
        let mut stream = TokenStream {
            tokens,
            vocab,
            cfg,
            block_len,
            n_train,
            n_val,
            src_pos: 0,
            epoch: 0,
            buffer: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            batches_consumed: 0,
            consumed_hash: fnv1a_init(),
        };
        let fill = cfg.shuffle_buffer.clamp(1, n_train);
        for _ in 0..fill {
            let b = stream.next_source_block();
            stream.buffer.push(b);
        }
        Ok(stream)
    }

    pub fn from_file(path: impl AsRef<Path>, cfg: StreamConfig) -> Result<Self> {
        let (ids, vocab) = read_token_file(path)?;
        TokenStream::new(ids, vocab, cfg)
    }

    fn next_source_block(&mut self) -> usize {
        if self.src_pos == self.n_train {
            self.src_pos = 0;
            self.epoch += 1;
        }
        let b = self.src_pos;
        self.src_pos += 1;
        b
    }

    fn next_block(&mut self) -> usize {
        let j = self.rng.gen_range(0..self.buffer.len());
        let out = self.buffer[j];
        self.buffer[j] = self.next_source_block();
        out
    }

    /// Draw `batch` blocks through the shuffle buffer.
    pub fn next_batch(&mut self, batch: usize) -> Result<TokenBatch> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut ids = Vec::with_capacity(batch * self.block_len);
        for _ in 0..batch {
            let b = self.next_block();
            let start = b * self.block_len;
            ids.extend_from_slice(&self.tokens[start..start + self.block_len]);
        }
        for &id in &ids {
            self.consumed_hash = fnv1a_u64(self.consumed_hash, id as u64);
        }
        self.batches_consumed += 1;
        Ok(TokenBatch { rows: batch, cols: self.block_len, ids })
    }

    /// Replay `batches` draws of `batch_size` blocks; used to resume a
    /// checkpointed run at the exact stream state it stopped at.
    pub fn fast_forward(&mut self, batches: u64, batch_size: usize) -> Result<()> {
        for _ in 0..batches {
            self.next_batch(batch_size)?;
        }
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.cfg.seq_len
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_consumed(&self) -> u64 {
        self.batches_consumed
    }

    /// Running FNV hash of every id handed out so far.
    pub fn consumed_hash(&self) -> u64 {
        self.consumed_hash
    }

    pub fn train_blocks(&self) -> usize {
        self.n_train
    }

    pub fn val_blocks(&self) -> usize {
        self.n_val
    }

    /// Tokens of the i-th held-out validation block.
    pub fn val_block(&self, i: usize) -> Result<&[u32]> {
        if i >= self.n_val {
            return Err(Error::Index(format!(
                "validation block {i} out of range ({} held out)",
                self.n_val
            )));
        }
        let start = (self.n_train + i) * self.block_len;
        Ok(&self.tokens[start..start + self.block_len])
    }
}

/// Deterministic synthetic text: a first-order Markov chain over lowercase
/// letters and space, with peaked transitions. Useful as a desk-scale corpus
/// whose unigram entropy sits well above its conditional entropy, so a
/// trained model has measurable structure to learn.
pub fn synthetic_text(seed: u64, len: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";
    let n = ALPHABET.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // favored successors per symbol, covering 90% of the mass
    let favored: Vec<[usize; 4]> = (0..n)
        .map(|_| {
            let mut picks = [0usize; 4];
            let mut used = [false; 27];
            for p in picks.iter_mut() {
                loop {
                    let c = rng.gen_range(0..n);
                    if !used[c] {
                        used[c] = true;
                        *p = c;
                        break;
                    }
                }
            }
            picks
        })
        .collect();
    const WEIGHTS: [f64; 4] = [0.40, 0.25, 0.15, 0.10];

    let mut out = Vec::with_capacity(len);
    let mut state = 0usize;
    for _ in 0..len {
        let r: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = None;
        for (w, &c) in WEIGHTS.iter().zip(&favored[state]) {
            acc += w;
            if r < acc {
                next = Some(c);
                break;
            }
        }
        let next = next.unwrap_or_else(|| {
            // residual 10%: uniform over the alphabet
            let u = (r - 0.90).max(0.0) / 0.10;
            ((u * n as f64) as usize).min(n - 1)
        });
        out.push(ALPHABET[next]);
        state = next;
    }
    String::from_utf8(out).expect("alphabet is ASCII")
}
