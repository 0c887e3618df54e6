//! Row-wise top-k selection: full sort, bounded heap, and quickselect
//! threshold.
//!
//! All three strategies agree on one canonical order: higher score first,
//! lower column index first among equal scores. In [`TieMode::Parity`] the
//! threshold strategy instead keeps only scores strictly above the `k_c`-th
//! smallest value, which can keep fewer than `k` weights when scores tie.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::BinaryHeap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scoring::ScoreMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sort,
    HeapTopk,
    KthThreshold,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Sort, Strategy::HeapTopk, Strategy::KthThreshold];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sort => "sort",
            Strategy::HeapTopk => "heap",
            Strategy::KthThreshold => "kth",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sort" => Ok(Strategy::Sort),
            "heap" | "heap_topk" | "topk" => Ok(Strategy::HeapTopk),
            "kth" | "kth_threshold" | "kthvalue" => Ok(Strategy::KthThreshold),
            other => Err(Error::Config(format!("unknown selection strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMode {
    /// Exactly `k` active per row; ties go to the lower column index.
    #[default]
    Canonical,
    /// Strict `score > threshold`, possibly fewer than `k` active.
    Parity,
}

impl fmt::Display for TieMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TieMode::Canonical => "canonical",
            TieMode::Parity => "parity",
        })
    }
}

impl FromStr for TieMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(TieMode::Canonical),
            "parity" => Ok(TieMode::Parity),
            other => Err(Error::Config(format!("unknown tie mode {other:?}"))),
        }
    }
}

/// Active-count parameters for rows of width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub rho: f64,
    /// Active weights per row.
    pub k: usize,
    /// Pruned weights per row, `d - k`.
    pub k_c: usize,
    pub strategy: Strategy,
    pub tie_mode: TieMode,
}

/// `floor(ρ·d)` clamped to at least one. The epsilon absorbs representation
/// error such as `0.7 * 10.0 == 6.999…`.
pub fn active_count(rho: f64, d: usize) -> usize {
    let k = (rho * d as f64 + 1e-9).floor() as usize;
    k.clamp(1, d.max(1))
}

impl SelectionParams {
    pub fn new(rho: f64, d: usize, strategy: Strategy, tie_mode: TieMode) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {rho}")));
        }
        if d == 0 {
            return Err(Error::Config("row width must be positive".into()));
        }
        let k = active_count(rho, d);
        Ok(Self {
            rho,
            k,
            k_c: d - k,
            strategy,
            tie_mode,
        })
    }

    pub fn d(&self) -> usize {
        self.k + self.k_c
    }
}

/// Per-row set of active columns.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparsityMask {
    rows: usize,
    cols: usize,
    k_active_per_row: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl SparsityMask {
    pub fn empty(rows: usize, cols: usize, k_active_per_row: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self {
            rows,
            cols,
            k_active_per_row,
            words_per_row,
            bits: vec![0; rows * words_per_row],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        let mut m = Self::empty(rows, cols, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j);
            }
        }
        m
    }

    fn from_rows(rows: usize, cols: usize, k: usize, row_words: Vec<Vec<u64>>) -> Self {
        let mut m = Self::empty(rows, cols, k);
        for (i, words) in row_words.into_iter().enumerate() {
            let start = i * m.words_per_row;
            m.bits[start..start + m.words_per_row].copy_from_slice(&words);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn k_active_per_row(&self) -> usize {
        self.k_active_per_row
    }

    pub fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words_per_row + j / 64] |= 1 << (j % 64);
    }

    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words_per_row + j / 64] >> (j % 64) & 1 == 1
    }

    /// Active columns of row `i` in ascending order.
    pub fn row_active(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.cols).filter(move |&j| self.is_active(i, j))
    }

    pub fn row_count(&self, i: usize) -> usize {
        let start = i * self.words_per_row;
        self.bits[start..start + self.words_per_row]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    pub fn total_active(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// True when every row holds exactly `k_active_per_row` bits.
    pub fn is_canonical(&self) -> bool {
        (0..self.rows).all(|i| self.row_count(i) == self.k_active_per_row)
    }

    /// Stable fingerprint of the active sets.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }

    /// Whether every active bit of `self` is also active in `other`.
    pub fn is_subset_of(&self, other: &SparsityMask) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }
}

fn bits_from_indices(cols: usize, active: impl IntoIterator<Item = usize>) -> Vec<u64> {
    let mut words = vec![0u64; cols.div_ceil(64)];
    for j in active {
        words[j / 64] |= 1 << (j % 64);
    }
    words
}

/// Canonical rank order: higher score first, then lower index.
#[inline]
fn rank_cmp(row: &[f32], a: usize, b: usize) -> Ordering {
    row[b].total_cmp(&row[a]).then(a.cmp(&b))
}

fn check_params(scores: &ScoreMatrix, p: &SelectionParams) {
    assert_eq!(
        p.d(),
        scores.cols(),
        "selection params built for width {} used on {} columns",
        p.d(),
        scores.cols()
    );
}

fn select_rows(
    scores: &ScoreMatrix,
    p: &SelectionParams,
    row_fn: impl Fn(&[f32]) -> Vec<u64> + Send + Sync,
) -> SparsityMask {
    check_params(scores, p);
    let rows = par::map_range(scores.rows(), |i| row_fn(scores.row(i)));
    SparsityMask::from_rows(scores.rows(), scores.cols(), p.k, rows)
}

fn sort_row(row: &[f32], k: usize) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_unstable_by(|&a, &b| rank_cmp(row, a, b));
    bits_from_indices(row.len(), idx[..k].iter().copied())
}

/// Heap entry ordered so that the *worse* ranked element is the greater one:
/// a max-heap of these keeps the worst of the retained set at its root.
struct Ranked<'a> {
    row: &'a [f32],
    idx: usize,
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.idx == other.idx
    }
}

impl Eq for Ranked<'_> {}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_cmp(self.row, self.idx, other.idx)
    }
}

/// Best `n` indices of `row` in canonical order using a bounded heap.
fn heap_best(row: &[f32], n: usize) -> Vec<usize> {
    let mut heap: BinaryHeap<Ranked<'_>> = BinaryHeap::with_capacity(n + 1);
    for idx in 0..row.len() {
        if heap.len() < n {
            heap.push(Ranked { row, idx });
        } else if let Some(worst) = heap.peek() {
            if rank_cmp(row, idx, worst.idx) == Ordering::Less {
                heap.pop();
                heap.push(Ranked { row, idx });
            }
        }
    }
    heap.into_iter().map(|r| r.idx).collect()
}

/// Worst `n` indices of `row` in canonical order using a bounded heap.
fn heap_worst(row: &[f32], n: usize) -> Vec<usize> {
    let mut heap: BinaryHeap<std::cmp::Reverse<Ranked<'_>>> = BinaryHeap::with_capacity(n + 1);
    for idx in 0..row.len() {
        if heap.len() < n {
            heap.push(std::cmp::Reverse(Ranked { row, idx }));
        } else if let Some(best) = heap.peek() {
            if rank_cmp(row, idx, best.0.idx) == Ordering::Greater {
                heap.pop();
                heap.push(std::cmp::Reverse(Ranked { row, idx }));
            }
        }
    }
    heap.into_iter().map(|r| r.0.idx).collect()
}

/// Heap over whichever side is smaller: the `k` survivors or the `k_c`
/// pruned entries.
fn heap_row(row: &[f32], k: usize) -> Vec<u64> {
    let d = row.len();
    if k <= d - k {
        bits_from_indices(d, heap_best(row, k))
    } else {
        let mut words = bits_from_indices(d, 0..d);
        for j in heap_worst(row, d - k) {
            words[j / 64] &= !(1 << (j % 64));
        }
        words
    }
}

/// Value of rank `n` (0-based, ascending) among `values`, which is
/// reordered in place. Median-of-three quickselect with a three-way
/// partition; falls back to a heap once recursion depth exceeds
/// `2·log2(len)`.
pub fn quickselect(values: &mut [f32], n: usize) -> f32 {
    assert!(n < values.len(), "rank {n} out of range for {} values", values.len());
    let mut lo = 0;
    let mut hi = values.len();
    let mut budget = 2 * (usize::BITS - values.len().leading_zeros()) as usize;
    loop {
        let len = hi - lo;
        if len <= 16 {
            let part = &mut values[lo..hi];
            part.sort_unstable_by(f32::total_cmp);
            return part[n - lo];
        }
        if budget == 0 {
            return heap_nth(&values[lo..hi], n - lo);
        }
        budget -= 1;

        let mid = lo + len / 2;
        let pivot = median3(values[lo], values[mid], values[hi - 1]);
        // Dutch national flag: [lo, lt) < pivot, [lt, gt) == pivot, [gt, hi) > pivot.
        let (mut lt, mut i, mut gt) = (lo, lo, hi);
        while i < gt {
            match values[i].total_cmp(&pivot) {
                Ordering::Less => {
                    values.swap(lt, i);
                    lt += 1;
                    i += 1;
                }
                Ordering::Greater => {
                    gt -= 1;
                    values.swap(i, gt);
                }
                Ordering::Equal => i += 1,
            }
        }
        if n < lt {
            hi = lt;
        } else if n < gt {
            return pivot;
        } else {
            lo = gt;
        }
    }
}

fn median3(a: f32, b: f32, c: f32) -> f32 {
    let (lo, hi) = if a.total_cmp(&b) == Ordering::Less { (a, b) } else { (b, a) };
    if c.total_cmp(&lo) == Ordering::Less {
        lo
    } else if c.total_cmp(&hi) == Ordering::Greater {
        hi
    } else {
        c
    }
}

fn heap_nth(values: &[f32], n: usize) -> f32 {
    use ordered::Total;
    let mut heap: BinaryHeap<Total> = BinaryHeap::with_capacity(n + 2);
    for &v in values {
        heap.push(Total(v));
        if heap.len() > n + 1 {
            heap.pop();
        }
    }
    heap.peek().map(|t| t.0).expect("non-empty")
}

mod ordered {
    use std::cmp::Ordering;

    pub struct Total(pub f32);

    impl PartialEq for Total {
        fn eq(&self, other: &Self) -> bool {
            self.0.total_cmp(&other.0) == Ordering::Equal
        }
    }
    impl Eq for Total {}
    impl PartialOrd for Total {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Total {
        fn cmp(&self, other: &Self) -> Ordering {
            self.0.total_cmp(&other.0)
        }
    }
}

fn kth_row(row: &[f32], k: usize, tie_mode: TieMode) -> Vec<u64> {
    let d = row.len();
    let k_c = d - k;
    if k_c == 0 {
        return bits_from_indices(d, 0..d);
    }
    let mut scratch = row.to_vec();
    let threshold = quickselect(&mut scratch, k_c - 1);
    let above = row.iter().enumerate().filter(|(_, s)| s.total_cmp(&threshold) == Ordering::Greater);
    match tie_mode {
        TieMode::Parity => bits_from_indices(d, above.map(|(j, _)| j)),
        TieMode::Canonical => {
            let mut words = bits_from_indices(d, above.map(|(j, _)| j));
            let mut need = k - words.iter().map(|w| w.count_ones() as usize).sum::<usize>();
            for (j, s) in row.iter().enumerate() {
                if need == 0 {
                    break;
                }
                if s.total_cmp(&threshold) == Ordering::Equal {
                    words[j / 64] |= 1 << (j % 64);
                    need -= 1;
                }
            }
            words
        }
    }
}

/// Full per-row sort, keeping the first `k` in canonical order.
pub fn select_sort(scores: &ScoreMatrix, p: &SelectionParams) -> SparsityMask {
    select_rows(scores, p, |row| sort_row(row, p.k))
}

/// Bounded-heap top-k per row.
pub fn select_heap_topk(scores: &ScoreMatrix, p: &SelectionParams) -> SparsityMask {
    select_rows(scores, p, |row| heap_row(row, p.k))
}

/// Threshold at the `k_c`-th smallest score of each row.
pub fn select_kth_threshold(scores: &ScoreMatrix, p: &SelectionParams) -> SparsityMask {
    select_rows(scores, p, |row| kth_row(row, p.k, p.tie_mode))
}

/// Dispatches on `p.strategy`. Sort and heap are always canonical; the tie
/// mode only changes the threshold strategy.
pub fn select(scores: &ScoreMatrix, p: &SelectionParams) -> SparsityMask {
    match p.strategy {
        Strategy::Sort => select_sort(scores, p),
        Strategy::HeapTopk => select_heap_topk(scores, p),
        Strategy::KthThreshold => select_kth_threshold(scores, p),
    }
}

/// Runs `strategy` on every row sequentially regardless of the `parallel`
/// feature; used to time the single-threaded variant.
pub fn select_sequential(scores: &ScoreMatrix, p: &SelectionParams) -> SparsityMask {
    check_params(scores, p);
    let rows = (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            match p.strategy {
                Strategy::Sort => sort_row(row, p.k),
                Strategy::HeapTopk => heap_row(row, p.k),
                Strategy::KthThreshold => kth_row(row, p.k, p.tie_mode),
            }
        })
        .collect();
    SparsityMask::from_rows(scores.rows(), scores.cols(), p.k, rows)
}
