//! Deterministic work partitioning.
//!
//! Output ranges are split into contiguous blocks of `len / workers` units;
//! the last worker also takes the remainder. Blocks never overlap, so the
//! result is independent of the worker count.

use std::ops::Range;

use crate::kernels::{ConvPartition, Strategy};

/// How a kernel call is executed: which matmul strategy, how many workers
/// and which axis convolutions split along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    pub strategy: Strategy,
    pub workers: usize,
    pub conv_partition: ConvPartition,
}

impl ExecConfig {
    pub fn new(strategy: Strategy, workers: usize) -> Self {
        ExecConfig {
            strategy,
            workers: workers.max(1),
            conv_partition: ConvPartition::Height,
        }
    }

    pub fn with_workers(self, workers: usize) -> Self {
        ExecConfig {
            workers: workers.max(1),
            ..self
        }
    }

    pub fn with_conv_partition(self, conv_partition: ConvPartition) -> Self {
        ExecConfig { conv_partition, ..self }
    }
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig::new(Strategy::PackedDot, 1)
    }
}

/// Splits `0..len` into at most `workers` contiguous blocks.
pub fn partition(len: usize, workers: usize) -> Vec<Range<usize>> {
    let workers = workers.clamp(1, len.max(1));
    let base = len / workers;
    (0..workers)
        .map(|w| {
            let start = w * base;
            let end = if w + 1 == workers { len } else { start + base };
            start..end
        })
        .filter(|r| !r.is_empty())
        .collect()
}

/// Runs `f` over disjoint blocks of `out`, where each of the `units` units
/// owns `unit_len` consecutive elements. `f` receives the unit range and
/// the matching output slice.
pub fn for_each_block<T, F>(out: &mut [T], unit_len: usize, workers: usize, f: F)
where
    T: Send,
    F: Fn(Range<usize>, &mut [T]) + Sync,
{
    let units = out.len().checked_div(unit_len).unwrap_or(0);
    debug_assert_eq!(units * unit_len, out.len());
    let blocks = partition(units, workers);
    if blocks.len() <= 1 {
        f(0..units, out);
        return;
    }
    std::thread::scope(|scope| {
        let mut rest = out;
        for block in blocks {
            let (head, tail) = rest.split_at_mut(block.len() * unit_len);
            rest = tail;
            let f = &f;
            scope.spawn(move || f(block, head));
        }
    });
}
