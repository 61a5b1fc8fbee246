//! Byte-level vocabulary and fixed-length chunk packing.
//!
//! Ids `0..=255` are raw bytes; four reserved ids follow. Documents are framed
//! as `BOS bytes.. SEP` before packing.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const SEP: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

const CHUNK_MAGIC: &[u8; 4] = b"TACK";

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`encode`]. Reserved ids are rejected; byte sequences that are
/// not valid UTF-8 decode lossily.
pub fn decode(ids: &[TokenId]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::data(format!("token id {id} is not a byte token")))
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

pub fn is_reserved(id: TokenId) -> bool {
    (PAD..=SEP).contains(&id)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FinalChunk {
    #[default]
    Drop,
    Pad,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub tokens: Vec<TokenId>,
    pub slice_id: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed {
    pub chunks: Vec<Chunk>,
    pub total_tokens: usize,
    pub dropped_tokens: usize,
}

/// `BOS + bytes + SEP` for one document.
pub fn frame(text: &str) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(text.bytes().map(TokenId::from));
    out.push(SEP);
    out
}

/// Shuffle documents with `shuffle_seed`, frame each, concatenate, and cut
/// into `chunk_len`-token chunks.
pub fn pack_chunks<S: AsRef<str>>(
    docs: &[S],
    chunk_len: usize,
    shuffle_seed: u64,
    final_chunk: FinalChunk,
    slice_id: u32,
) -> Result<Packed> {
    if chunk_len < 2 {
        return Err(Error::config(format!("chunk_len must be >= 2, got {chunk_len}")));
    }
    if docs.is_empty() {
        return Err(Error::data("cannot pack an empty document list"));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

    let mut stream = Vec::new();
    for i in order {
        stream.extend(frame(docs[i].as_ref()));
    }
    let total_tokens = stream.len();
    let mut chunks: Vec<Chunk> = stream
        .chunks_exact(chunk_len)
        .map(|c| Chunk {
            tokens: c.to_vec(),
            slice_id,
        })
        .collect();
    let rest = total_tokens % chunk_len;
    let dropped_tokens = match final_chunk {
        FinalChunk::Drop => rest,
        FinalChunk::Pad if rest > 0 => {
            let mut tokens = stream[total_tokens - rest..].to_vec();
            tokens.resize(chunk_len, PAD);
            chunks.push(Chunk { tokens, slice_id });
            0
        }
        FinalChunk::Pad => 0,
    };
    Ok(Packed {
        chunks,
        total_tokens,
        dropped_tokens,
    })
}

/// Debug dump: `TACK`, chunk_len as u32 LE, then every chunk's ids as u32 LE.
pub fn write_chunk_dump(path: &Path, chunks: &[Chunk], chunk_len: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + chunks.len() * chunk_len * 4);
    buf.extend_from_slice(CHUNK_MAGIC);
    buf.extend_from_slice(&(chunk_len as u32).to_le_bytes());
    for chunk in chunks {
        if chunk.tokens.len() != chunk_len {
            return Err(Error::shape(format!(
                "chunk of length {} in a dump with chunk_len {chunk_len}",
                chunk.tokens.len()
            )));
        }
        for id in &chunk.tokens {
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_chunk_dump(path: &Path, slice_id: u32) -> Result<Vec<Chunk>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if buf.len() < 8 || &buf[..4] != CHUNK_MAGIC {
        return Err(corrupt("bad chunk dump header"));
    }
    let chunk_len = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let body = &buf[8..];
    if chunk_len == 0 || body.len() % (chunk_len * 4) != 0 {
        return Err(corrupt("chunk dump body is not a whole number of chunks"));
    }
    Ok(body
        .chunks_exact(chunk_len * 4)
        .map(|c| Chunk {
            tokens: c
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            slice_id,
        })
        .collect())
}
