//! Code-area management: a fixed pool of words split into equal chunks.
//!
//! Each segment owns a list of chunks and an emission cursor. When the
//! current chunk cannot hold the next op plus a two-word continuation, a
//! fresh chunk is taken from the free list and a `JUMP` to it is written at
//! the old cursor. Releasing a segment returns all of its chunks at once.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::bytecode::SegmentId;

/// Handler word of the two-word continuation op `[JUMP, target]`.
pub const JUMP_HANDLER: i64 = 38;
pub const CONTINUATION_WORDS: usize = 2;
pub const MIN_CHUNK_WORDS: usize = 16;

/// 256 KiB of 8-byte words.
pub const DEFAULT_CHUNK_WORDS: usize = 32_768;
pub const DEFAULT_POOL_WORDS: usize = 64 * DEFAULT_CHUNK_WORDS;

/// Flat word offset into the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PoolOffset(pub usize);

impl fmt::Display for PoolOffset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("bad pool configuration: {0}")]
    BadConfig(String),
    #[error("chunk pool exhausted")]
    PoolExhausted,
    #[error("op of {len} words does not fit a chunk of {chunk_words} words")]
    OpTooLarge { len: usize, chunk_words: usize },
}

#[derive(Debug, Clone, Copy)]
struct Cursor {
    chunk: usize,
    next: usize,
}

#[derive(Debug, Clone)]
pub struct ChunkPool {
    words: Vec<i64>,
    chunk_words: usize,
    free_list: Vec<usize>,
    owner: Vec<Option<SegmentId>>,
    chunks_of: HashMap<SegmentId, Vec<usize>>,
    cursors: HashMap<SegmentId, Cursor>,
    acquisitions: u64,
}

impl ChunkPool {
    pub fn new(pool_words: usize, chunk_words: usize) -> Result<ChunkPool, PoolError> {
        if chunk_words < MIN_CHUNK_WORDS {
            return Err(PoolError::BadConfig(format!(
                "chunk size {chunk_words} is below the minimum of {MIN_CHUNK_WORDS} words"
            )));
        }
        if !pool_words.is_multiple_of(chunk_words) {
            return Err(PoolError::BadConfig(format!(
                "pool size {pool_words} is not a multiple of the chunk size {chunk_words}"
            )));
        }
        let nchunks = pool_words / chunk_words;
        Ok(ChunkPool {
            words: vec![0; pool_words],
            chunk_words,
            free_list: (0..nchunks).rev().collect(),
            owner: vec![None; nchunks],
            chunks_of: HashMap::new(),
            cursors: HashMap::new(),
            acquisitions: 0,
        })
    }

    pub fn with_defaults() -> ChunkPool {
        ChunkPool::new(DEFAULT_POOL_WORDS, DEFAULT_CHUNK_WORDS).expect("default pool is valid")
    }

    pub fn chunk_words(&self) -> usize {
        self.chunk_words
    }

    pub fn chunk_count(&self) -> usize {
        self.owner.len()
    }

    pub fn free_count(&self) -> usize {
        self.free_list.len()
    }

    pub fn owned_count(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }

    /// Total chunk acquisitions since creation.
    pub fn acquisitions(&self) -> u64 {
        self.acquisitions
    }

    pub fn chunks_of(&self, seg: SegmentId) -> &[usize] {
        self.chunks_of.get(&seg).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Owner of the chunk containing `ofs`.
    pub fn owner_of(&self, ofs: PoolOffset) -> Option<SegmentId> {
        self.owner.get(ofs.0 / self.chunk_words).copied().flatten()
    }

    pub fn chunk_base(&self, chunk: usize) -> PoolOffset {
        PoolOffset(chunk * self.chunk_words)
    }

    /// Next emission offset for `seg`, if it owns a chunk.
    pub fn cursor(&self, seg: SegmentId) -> Option<PoolOffset> {
        self.cursors.get(&seg).map(|c| PoolOffset(c.next))
    }

    #[inline]
    pub fn words(&self) -> &[i64] {
        &self.words
    }

    #[inline]
    pub fn word(&self, ofs: usize) -> i64 {
        self.words[ofs]
    }

    #[inline]
    pub fn set_word(&mut self, ofs: usize, w: i64) {
        self.words[ofs] = w;
    }

    fn acquire(&mut self, seg: SegmentId) -> Result<usize, PoolError> {
        let chunk = self.free_list.pop().ok_or(PoolError::PoolExhausted)?;
        self.owner[chunk] = Some(seg);
        self.chunks_of.entry(seg).or_default().push(chunk);
        self.acquisitions += 1;
        Ok(chunk)
    }

    /// Appends one op for `seg` and returns where it starts.
    pub fn emit(&mut self, seg: SegmentId, op_words: &[i64]) -> Result<PoolOffset, PoolError> {
        let len = op_words.len();
        if len + CONTINUATION_WORDS > self.chunk_words {
            return Err(PoolError::OpTooLarge {
                len,
                chunk_words: self.chunk_words,
            });
        }
        let mut cursor = match self.cursors.get(&seg) {
            Some(c) => *c,
            None => {
                let chunk = self.acquire(seg)?;
                Cursor {
                    chunk,
                    next: chunk * self.chunk_words,
                }
            }
        };
        let chunk_end = (cursor.chunk + 1) * self.chunk_words;
        if chunk_end - cursor.next < len + CONTINUATION_WORDS {
            let fresh = match self.acquire(seg) {
                Ok(c) => c,
                Err(e) => {
                    self.cursors.insert(seg, cursor);
                    return Err(e);
                }
            };
            let base = fresh * self.chunk_words;
            self.words[cursor.next] = JUMP_HANDLER;
            self.words[cursor.next + 1] = base as i64;
            cursor = Cursor {
                chunk: fresh,
                next: base,
            };
        }
        let start = cursor.next;
        self.words[start..start + len].copy_from_slice(op_words);
        cursor.next += len;
        self.cursors.insert(seg, cursor);
        Ok(PoolOffset(start))
    }

    /// Returns every chunk owned by `seg` to the free list. Idempotent.
    pub fn release_segment(&mut self, seg: SegmentId) -> usize {
        self.cursors.remove(&seg);
        let Some(chunks) = self.chunks_of.remove(&seg) else {
            return 0;
        };
        for &c in &chunks {
            self.owner[c] = None;
            self.free_list.push(c);
        }
        chunks.len()
    }
}
