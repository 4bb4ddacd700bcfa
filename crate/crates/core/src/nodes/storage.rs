//! Block storage at the cloud store.
//!
//! An upload of `n` records reserves `bfr = ceil(n / B)` whole blocks and
//! fills them one chunk (block) at a time. Slots are addressed globally as
//! `block * B + offset`.

use thiserror::Error;

use crate::cryptokit::{sha256, Hash32};
use crate::wire::FieldWriter;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StorageError {
    #[error("nothing to store")]
    Empty,
    #[error("storage full: need {needed} blocks, {free} free")]
    Full { needed: u64, free: u64 },
    #[error("block capacity must be positive")]
    ZeroCapacity,
    #[error("chunk {seq} does not belong to the extent")]
    BadChunk { seq: u64 },
    #[error("chunk {seq} holds {got} records, expected {expected}")]
    ChunkSize {
        seq: u64,
        got: usize,
        expected: usize,
    },
}

pub fn blocking_factor(records: u64, block_capacity: u64) -> u64 {
    records.div_ceil(block_capacity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Extent {
    pub first_block: u64,
    pub blocks: u64,
    pub records: u64,
}

impl Extent {
    /// Records expected in chunk `seq`.
    pub fn chunk_len(&self, seq: u64, block_capacity: u64) -> usize {
        let start = seq * block_capacity;
        self.records.saturating_sub(start).min(block_capacity) as usize
    }
}

/// Digest a CS compares against the received chunk.
pub fn chunk_digest(records: &[Vec<u8>]) -> Hash32 {
    let mut w = FieldWriter::new();
    for r in records {
        w.field(r);
    }
    sha256(&w.finish())
}

#[derive(Debug, Clone)]
pub struct StorageArena {
    block_capacity: u64,
    max_blocks: u64,
    blocks: Vec<Vec<Vec<u8>>>,
}

impl StorageArena {
    pub fn new(block_capacity: u64, max_blocks: u64) -> Result<Self, StorageError> {
        if block_capacity == 0 {
            return Err(StorageError::ZeroCapacity);
        }
        Ok(Self {
            block_capacity,
            max_blocks,
            blocks: Vec::new(),
        })
    }

    pub fn block_capacity(&self) -> u64 {
        self.block_capacity
    }

    pub fn used_blocks(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn free_blocks(&self) -> u64 {
        self.max_blocks - self.used_blocks()
    }

    /// First slot of the first unreserved block.
    pub fn next_pointer(&self) -> u64 {
        self.used_blocks() * self.block_capacity
    }

    pub fn reserve(&mut self, records: u64) -> Result<Extent, StorageError> {
        if records == 0 {
            return Err(StorageError::Empty);
        }
        let needed = blocking_factor(records, self.block_capacity);
        if needed > self.free_blocks() {
            return Err(StorageError::Full {
                needed,
                free: self.free_blocks(),
            });
        }
        let first_block = self.used_blocks();
        self.blocks
            .extend((0..needed).map(|_| Vec::with_capacity(self.block_capacity as usize)));
        Ok(Extent {
            first_block,
            blocks: needed,
            records,
        })
    }

    /// Commits chunk `seq` of `extent`; returns the slot where the next
    /// chunk goes.
    pub fn write_chunk(
        &mut self,
        extent: &Extent,
        seq: u64,
        records: Vec<Vec<u8>>,
    ) -> Result<u64, StorageError> {
        if seq >= extent.blocks {
            return Err(StorageError::BadChunk { seq });
        }
        let expected = extent.chunk_len(seq, self.block_capacity);
        if records.len() != expected {
            return Err(StorageError::ChunkSize {
                seq,
                got: records.len(),
                expected,
            });
        }
        let block = extent.first_block + seq;
        self.blocks[block as usize] = records;
        Ok((block + 1) * self.block_capacity)
    }

    pub fn read(&self, extent: &Extent) -> Vec<&[u8]> {
        let range = extent.first_block as usize..(extent.first_block + extent.blocks) as usize;
        self.blocks[range]
            .iter()
            .flat_map(|b| b.iter().map(Vec::as_slice))
            .collect()
    }
}
