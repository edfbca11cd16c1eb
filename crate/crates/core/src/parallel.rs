use std::ops::Range;

use rayon::prelude::*;

/// Fixed number of work lanes for gradient reductions. The partition depends
/// only on the item count, never on the thread pool, so sums are
/// bit-reproducible however many threads run them.
pub(crate) const LANES: usize = 8;

/// Splits `0..n` into at most `lanes` contiguous ranges.
pub(crate) fn lane_ranges(n: usize, lanes: usize) -> Vec<Range<usize>> {
    let lanes = lanes.max(1).min(n.max(1));
    let base = n / lanes;
    let extra = n % lanes;
    let mut start = 0;
    (0..lanes)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Runs `f` on each lane range in parallel; results come back in lane order.
pub(crate) fn map_lanes<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    lane_ranges(n, LANES).into_par_iter().map(f).collect()
}

/// Sub-ranges of `range` no longer than `chunk`.
pub(crate) fn chunks(range: Range<usize>, chunk: usize) -> impl Iterator<Item = Range<usize>> {
    let chunk = chunk.max(1);
    range
        .clone()
        .step_by(chunk)
        .map(move |s| s..(s + chunk).min(range.end))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lanes_cover_range_in_order() {
        for n in [0usize, 1, 5, 8, 9, 1000] {
            let r = lane_ranges(n, LANES);
            assert_eq!(r.first().map(|r| r.start), Some(0));
            assert_eq!(r.last().map(|r| r.end), Some(n));
            for w in r.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
        }
    }

    #[test]
    fn chunks_split_exactly() {
        let c: Vec<_> = chunks(3..10, 3).collect();
        assert_eq!(c, vec![3..6, 6..9, 9..10]);
    }
}
