//! Fixed-size block allocator for MM and KV caches.

use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CacheKind {
    Mm,
    Kv,
}

/// Owner of an allocation: a request, and for MM shards the shard index.
pub type BlockKey = (u64, u32);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BlockError {
    #[error("{kind:?} cache full: need {needed} blocks, {free} free")]
    Full { kind: CacheKind, needed: u64, free: u64 },
    #[error("{kind:?} cache already holds blocks for {key:?}")]
    AlreadyAllocated { kind: CacheKind, key: BlockKey },
    #[error("{kind:?} cache holds no blocks for {key:?}")]
    NotAllocated { kind: CacheKind, key: BlockKey },
}

#[derive(Debug, Clone)]
pub struct BlockManager {
    kind: CacheKind,
    block_size: u64,
    total_blocks: u64,
    free_list: Vec<u32>,
    allocated: BTreeMap<BlockKey, Vec<u32>>,
}

impl BlockManager {
    pub fn new(kind: CacheKind, block_size: u64, total_blocks: u64) -> Self {
        assert!(block_size > 0, "block size must be positive");
        let total_blocks = total_blocks.min(u64::from(u32::MAX));
        Self {
            kind,
            block_size,
            total_blocks,
            // Pop from the back hands out low block ids first.
            free_list: (0..total_blocks as u32).rev().collect(),
            allocated: BTreeMap::new(),
        }
    }

    /// Capacity given in tokens, rounded down to whole blocks.
    pub fn with_token_capacity(kind: CacheKind, block_size: u64, tokens: u64) -> Self {
        Self::new(kind, block_size, tokens / block_size)
    }

    pub fn kind(&self) -> CacheKind {
        self.kind
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size)
    }

    pub fn total_blocks(&self) -> u64 {
        self.total_blocks
    }

    pub fn free_blocks(&self) -> u64 {
        self.free_list.len() as u64
    }

    pub fn used_blocks(&self) -> u64 {
        self.total_blocks - self.free_blocks()
    }

    pub fn is_empty(&self) -> bool {
        self.allocated.is_empty()
    }

    pub fn can_allocate(&self, tokens: u64) -> bool {
        self.blocks_for(tokens) <= self.free_blocks()
    }

    /// Whether an allocation of `tokens` could ever succeed on an empty cache.
    pub fn could_ever_fit(&self, tokens: u64) -> bool {
        self.blocks_for(tokens) <= self.total_blocks
    }

    pub fn holds(&self, key: BlockKey) -> bool {
        self.allocated.contains_key(&key)
    }

    pub fn allocate(&mut self, key: BlockKey, tokens: u64) -> Result<(), BlockError> {
        if self.allocated.contains_key(&key) {
            return Err(BlockError::AlreadyAllocated { kind: self.kind, key });
        }
        let needed = self.blocks_for(tokens);
        if needed > self.free_blocks() {
            return Err(BlockError::Full {
                kind: self.kind,
                needed,
                free: self.free_blocks(),
            });
        }
        let at = self.free_list.len() - needed as usize;
        let blocks = self.free_list.split_off(at);
        self.allocated.insert(key, blocks);
        Ok(())
    }

    /// Releases every block of `key`; returns how many were freed.
    pub fn free(&mut self, key: BlockKey) -> Result<u64, BlockError> {
        let blocks = self
            .allocated
            .remove(&key)
            .ok_or(BlockError::NotAllocated { kind: self.kind, key })?;
        let n = blocks.len() as u64;
        self.free_list.extend(blocks.into_iter().rev());
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocate_and_free_conserve_blocks() {
        let mut m = BlockManager::new(CacheKind::Kv, 16, 10);
        m.allocate((1, 0), 17).unwrap();
        assert_eq!(m.used_blocks(), 2);
        m.allocate((2, 0), 16 * 8).unwrap();
        assert_eq!(m.free_blocks(), 0);
        assert!(matches!(m.allocate((3, 0), 1), Err(BlockError::Full { .. })));
        assert_eq!(m.free((1, 0)).unwrap(), 2);
        assert_eq!(m.free((2, 0)).unwrap(), 8);
        assert_eq!(m.free_blocks(), 10);
        assert!(m.is_empty());
    }

    #[test]
    fn double_free_and_double_alloc_rejected() {
        let mut m = BlockManager::new(CacheKind::Mm, 16, 4);
        m.allocate((1, 0), 1).unwrap();
        assert!(matches!(m.allocate((1, 0), 1), Err(BlockError::AlreadyAllocated { .. })));
        m.free((1, 0)).unwrap();
        assert!(matches!(m.free((1, 0)), Err(BlockError::NotAllocated { .. })));
    }

    #[test]
    fn zero_tokens_take_no_blocks() {
        let mut m = BlockManager::new(CacheKind::Mm, 16, 0);
        assert!(m.can_allocate(0));
        m.allocate((9, 0), 0).unwrap();
        assert_eq!(m.free((9, 0)).unwrap(), 0);
    }

    #[test]
    fn token_capacity_rounds_down() {
        let m = BlockManager::with_token_capacity(CacheKind::Mm, 16, 3000);
        assert_eq!(m.total_blocks(), 187);
        assert!(m.could_ever_fit(2992));
        assert!(!m.could_ever_fit(2993));
    }
}
