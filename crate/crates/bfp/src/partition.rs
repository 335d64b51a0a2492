//! Contiguous block partitioning of an observed series, and the
//! block-plus-context pairing the subset samplers consume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A division of `1..=n` into `k` contiguous, ordered, non-overlapping,
/// non-empty blocks. Block bounds are stored as half-open 0-based ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    n: usize,
    blocks: Vec<(usize, usize)>,
}

/// Splits `n` observations into `k` blocks.
///
/// The leading blocks take `ceil(n / k)` observations and the final block
/// the remainder, shrinking the leading blocks only when that is required
/// to keep every block non-empty. Exact division yields equal blocks.
pub fn partition(n: usize, k: usize) -> Result<Partition> {
    if k < 1 || k > n {
        return Err(Error::InvalidArgument(format!(
            "block count must satisfy 1 <= K <= n, got K={k}, n={n}"
        )));
    }
    let m = n.div_ceil(k);
    let mut blocks = Vec::with_capacity(k);
    for j in 0..k {
        let remaining_blocks = k - j;
        let start = (j * m).min(n - remaining_blocks);
        let end = if j + 1 == k {
            n
        } else {
            ((j + 1) * m).min(n - (remaining_blocks - 1))
        };
        blocks.push((start, end));
    }
    Ok(Partition { n, blocks })
}

impl Partition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn total(&self) -> usize {
        self.n
    }

    /// Half-open range of block `j` (0-based).
    pub fn block_range(&self, j: usize) -> Result<std::ops::Range<usize>> {
        let (start, end) = *self
            .blocks
            .get(j)
            .ok_or_else(|| Error::InvalidArgument(format!("block index {j} out of range")))?;
        Ok(start..end)
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.blocks.iter().map(|&(s, e)| s..e)
    }

    /// Returns the context (previous block, empty for the first block) and
    /// the block itself. Together these are all the data a subset sampler
    /// may touch.
    pub fn block_with_context<'a>(&self, j: usize, y: &'a [f64]) -> Result<(&'a [f64], &'a [f64])> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "series has length {}, partition covers {}",
                y.len(),
                self.n
            )));
        }
        let block = self.block_range(j)?;
        let context = if j == 0 {
            &y[0..0]
        } else {
            let prev = self.block_range(j - 1)?;
            &y[prev]
        };
        Ok((context, &y[block]))
    }
}
