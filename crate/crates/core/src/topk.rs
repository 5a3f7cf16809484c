//! Exact top-k similarity search with per-query exclusions.
//!
//! Every score is produced by the same fixed-order kernel as [`score`], so a
//! candidate's score does not depend on chunking, blocking, thread count or
//! the SIMD width picked at runtime. Ties are broken by ascending passage id.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

/// Candidates retrieved per query before filtering.
pub const DEFAULT_K_CANDIDATES: usize = 100;
pub const DEFAULT_CHUNK_ROWS: usize = 65_536;

const LANES: usize = 16;
/// Queries scored together against one corpus row.
const GROUP: usize = 4;
/// Queries per parallel task.
const QUERY_BLOCK: usize = 32;
/// Corpus rows kept hot while a query block sweeps over them.
const TILE_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Dot,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "dot" => Ok(Metric::Dot),
            other => Err(Error::Config(format!("unknown metric {other:?} (expected cosine or dot)"))),
        }
    }
}

#[inline(always)]
fn reduce(mut acc: [f32; LANES]) -> f32 {
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            acc[l] += acc[l + width];
        }
        width /= 2;
    }
    acc[0]
}

#[inline(always)]
fn dot_generic(a: &[f32], b: &[f32]) -> f32 {
    let body = a.len() / LANES * LANES;
    let mut acc = [0f32; LANES];
    for (ca, cb) in a[..body].chunks_exact(LANES).zip(b[..body].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = reduce(acc);
    for i in body..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Four dot products against one row; each result equals `dot_generic(q[i], p)` bit for bit.
#[inline(always)]
fn dot4_generic(q: [&[f32]; GROUP], p: &[f32]) -> [f32; GROUP] {
    let n = p.len();
    let body = n / LANES * LANES;
    let mut acc = [[0f32; LANES]; GROUP];
    let mut i = 0;
    while i < body {
        let pc = &p[i..i + LANES];
        for g in 0..GROUP {
            let qc = &q[g][i..i + LANES];
            for l in 0..LANES {
                acc[g][l] += qc[l] * pc[l];
            }
        }
        i += LANES;
    }
    let mut out = [0f32; GROUP];
    for g in 0..GROUP {
        let mut s = reduce(acc[g]);
        for j in body..n {
            s += q[g][j] * p[j];
        }
        out[g] = s;
    }
    out
}

// Explicit kernels with the same lane layout as `dot4_generic`: lane `l`
// accumulates elements `l, l + 16, l + 32, ...` with a separate multiply and
// add (no fused multiply-add), so results are bit-identical to the scalar path.
#[cfg(target_arch = "x86_64")]
mod simd {
    use super::{reduce, GROUP, LANES};
    use std::arch::x86_64::*;

    #[inline(always)]
    fn tail(acc: [[f32; LANES]; GROUP], q: [&[f32]; GROUP], p: &[f32], body: usize) -> [f32; GROUP] {
        let mut out = [0f32; GROUP];
        for g in 0..GROUP {
            let mut s = reduce(acc[g]);
            for j in body..p.len() {
                s += q[g][j] * p[j];
            }
            out[g] = s;
        }
        out
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn dot4_avx512(q: [&[f32]; GROUP], p: &[f32]) -> [f32; GROUP] {
        let n = p.len();
        assert!(q.iter().all(|v| v.len() == n));
        let body = n / LANES * LANES;
        let mut a = [_mm512_setzero_ps(); GROUP];
        let mut i = 0;
        while i < body {
            let pv = _mm512_loadu_ps(p.as_ptr().add(i));
            for g in 0..GROUP {
                let qv = _mm512_loadu_ps(q[g].as_ptr().add(i));
                a[g] = _mm512_add_ps(a[g], _mm512_mul_ps(qv, pv));
            }
            i += LANES;
        }
        let mut acc = [[0f32; LANES]; GROUP];
        for g in 0..GROUP {
            _mm512_storeu_ps(acc[g].as_mut_ptr(), a[g]);
        }
        tail(acc, q, p, body)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot4_avx2(q: [&[f32]; GROUP], p: &[f32]) -> [f32; GROUP] {
        let n = p.len();
        assert!(q.iter().all(|v| v.len() == n));
        let body = n / LANES * LANES;
        let mut lo = [_mm256_setzero_ps(); GROUP];
        let mut hi = [_mm256_setzero_ps(); GROUP];
        let mut i = 0;
        while i < body {
            let pl = _mm256_loadu_ps(p.as_ptr().add(i));
            let ph = _mm256_loadu_ps(p.as_ptr().add(i + 8));
            for g in 0..GROUP {
                let ql = _mm256_loadu_ps(q[g].as_ptr().add(i));
                let qh = _mm256_loadu_ps(q[g].as_ptr().add(i + 8));
                lo[g] = _mm256_add_ps(lo[g], _mm256_mul_ps(ql, pl));
                hi[g] = _mm256_add_ps(hi[g], _mm256_mul_ps(qh, ph));
            }
            i += LANES;
        }
        let mut acc = [[0f32; LANES]; GROUP];
        for g in 0..GROUP {
            _mm256_storeu_ps(acc[g].as_mut_ptr(), lo[g]);
            _mm256_storeu_ps(acc[g].as_mut_ptr().add(8), hi[g]);
        }
        tail(acc, q, p, body)
    }

    pub fn avx512_available() -> bool {
        std::arch::is_x86_feature_detected!("avx512f")
    }

    pub fn avx2_available() -> bool {
        std::arch::is_x86_feature_detected!("avx2")
    }
}

#[cfg(all(test, target_arch = "x86_64"))]
pub(crate) use simd::{avx2_available, avx512_available, dot4_avx2, dot4_avx512};

#[derive(Clone, Copy)]
enum Kernel {
    Generic,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

impl Kernel {
    fn detect() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if simd::avx512_available() {
                return Kernel::Avx512;
            }
            if simd::avx2_available() {
                return Kernel::Avx2;
            }
        }
        Kernel::Generic
    }

    #[inline(always)]
    fn dot4(self, q: [&[f32]; GROUP], p: &[f32]) -> [f32; GROUP] {
        match self {
            Kernel::Generic => dot4_generic(q, p),
            // SAFETY: the variant is only constructed after runtime feature detection.
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx2 => unsafe { simd::dot4_avx2(q, p) },
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx512 => unsafe { simd::dot4_avx512(q, p) },
        }
    }
}

fn norm(v: &[f32]) -> f32 {
    dot_generic(v, v).sqrt()
}

/// Similarity of two vectors.
///
/// Cosine is `dot / (|a| * |b|)` and errors on a zero-norm input.
pub fn score(a: &[f32], b: &[f32], metric: Metric) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let d = dot_generic(a, b);
    match metric {
        Metric::Dot => Ok(d),
        Metric::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::InvalidMatrix("cosine of a zero-norm vector".into()));
            }
            Ok(d / (na * nb))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub passage_id: String,
    pub score: f32,
}

/// Ranked candidates for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    pub entries: Vec<Candidate>,
    /// Fewer than k non-excluded passages existed.
    #[serde(default)]
    pub short: bool,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopkOptions {
    pub metric: Metric,
    /// Corpus rows scored per pass.
    pub chunk_rows: usize,
}

impl Default for TopkOptions {
    fn default() -> Self {
        TopkOptions {
            metric: Metric::Cosine,
            chunk_rows: DEFAULT_CHUNK_ROWS,
        }
    }
}

#[derive(Clone, Copy)]
struct Entry {
    score: f32,
    /// Position of the passage id in sorted id order.
    order: u32,
    row: u32,
}

// Greater means worse, so the max-heap keeps the weakest kept entry on top.
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.order.cmp(&other.order))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

struct Selector<'a> {
    k: usize,
    heap: BinaryHeap<Entry>,
    excluded: &'a [u32],
}

impl Selector<'_> {
    #[inline]
    fn offer(&mut self, score: f32, row: u32, order: u32) {
        let entry = Entry { score, order, row };
        if self.heap.len() == self.k && entry >= *self.heap.peek().unwrap() {
            return;
        }
        if self.excluded.binary_search(&row).is_ok() {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(entry);
        } else {
            *self.heap.peek_mut().unwrap() = entry;
        }
    }
}

/// Returns, for each query row, the `k` best non-excluded corpus passages.
///
/// Queries with fewer than `k` eligible passages get everything available and
/// `short = true`. Output order follows the query matrix.
pub fn topk(
    queries: &EmbeddingMatrix,
    corpus: &EmbeddingMatrix,
    k: usize,
    exclusions: &HashMap<String, HashSet<String>>,
    opts: TopkOptions,
) -> Result<Vec<CandidateList>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if opts.chunk_rows == 0 {
        return Err(Error::Config("chunk_rows must be at least 1".into()));
    }
    if queries.dim() != corpus.dim() {
        return Err(Error::DimMismatch {
            expected: corpus.dim(),
            actual: queries.dim(),
        });
    }
    if corpus.num_rows() > u32::MAX as usize {
        return Err(Error::InvalidMatrix("corpus exceeds 2^32 rows".into()));
    }

    let excluded_rows: Vec<Vec<u32>> = queries
        .ids()
        .iter()
        .map(|qid| {
            let mut rows: Vec<u32> = exclusions
                .get(qid)
                .into_iter()
                .flatten()
                .filter_map(|pid| corpus.row_index(pid).map(|r| r as u32))
                .collect();
            rows.sort_unstable();
            rows.dedup();
            rows
        })
        .collect();

    let mut by_id: Vec<u32> = (0..corpus.num_rows() as u32).collect();
    by_id.sort_unstable_by(|&a, &b| corpus.ids()[a as usize].cmp(&corpus.ids()[b as usize]));
    let mut order = vec![0u32; corpus.num_rows()];
    for (pos, &row) in by_id.iter().enumerate() {
        order[row as usize] = pos as u32;
    }

    let (query_norms, corpus_norms) = match opts.metric {
        Metric::Dot => (None, None),
        Metric::Cosine => (Some(row_norms(queries)?), Some(row_norms(corpus)?)),
    };

    let mut selectors: Vec<Selector> = excluded_rows
        .iter()
        .map(|ex| Selector {
            k,
            heap: BinaryHeap::with_capacity(k.min(corpus.num_rows()) + 1),
            excluded: ex,
        })
        .collect();

    let kernel = Kernel::detect();
    let scorer = BlockScorer {
        queries,
        corpus,
        order: &order,
        query_norms: query_norms.as_deref(),
        corpus_norms: corpus_norms.as_deref(),
        kernel,
    };
    let n = corpus.num_rows();
    let mut start = 0;
    while start < n {
        let end = (start + opts.chunk_rows).min(n);
        selectors
            .par_chunks_mut(QUERY_BLOCK)
            .enumerate()
            .for_each(|(b, block)| scorer.score_block(b * QUERY_BLOCK, block, start, end));
        start = end;
    }

    Ok(selectors
        .into_iter()
        .zip(queries.ids())
        .zip(&excluded_rows)
        .map(|((sel, qid), ex)| {
            let available = n - ex.len();
            let mut entries = sel.heap.into_vec();
            entries.sort_unstable();
            CandidateList {
                query_id: qid.clone(),
                entries: entries
                    .into_iter()
                    .map(|e| Candidate {
                        passage_id: corpus.ids()[e.row as usize].clone(),
                        score: e.score,
                    })
                    .collect(),
                short: available < k,
            }
        })
        .collect())
}

fn row_norms(m: &EmbeddingMatrix) -> Result<Vec<f32>> {
    m.rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::ZeroNorm { id: m.ids()[i].clone() })
            } else {
                Ok(n)
            }
        })
        .collect()
}

struct BlockScorer<'a> {
    queries: &'a EmbeddingMatrix,
    corpus: &'a EmbeddingMatrix,
    order: &'a [u32],
    query_norms: Option<&'a [f32]>,
    corpus_norms: Option<&'a [f32]>,
    kernel: Kernel,
}

impl BlockScorer<'_> {
    #[inline]
    fn finish(&self, dot: f32, q: usize, row: usize) -> f32 {
        match (self.query_norms, self.corpus_norms) {
            (Some(qn), Some(cn)) => dot / (qn[q] * cn[row]),
            _ => dot,
        }
    }

    fn score_block(&self, first_query: usize, block: &mut [Selector], start: usize, end: usize) {
        let grouped = block.len() / GROUP * GROUP;
        let mut tile = start;
        while tile < end {
            let tile_end = (tile + TILE_ROWS).min(end);
            for g in (0..grouped).step_by(GROUP) {
                let q0 = first_query + g;
                let qs = [
                    self.queries.row(q0),
                    self.queries.row(q0 + 1),
                    self.queries.row(q0 + 2),
                    self.queries.row(q0 + 3),
                ];
                for row in tile..tile_end {
                    let dots = self.kernel.dot4(qs, self.corpus.row(row));
                    for (j, &d) in dots.iter().enumerate() {
                        let s = self.finish(d, q0 + j, row);
                        block[g + j].offer(s, row as u32, self.order[row]);
                    }
                }
            }
            for (j, sel) in block.iter_mut().enumerate().skip(grouped) {
                let q = first_query + j;
                let qv = self.queries.row(q);
                for row in tile..tile_end {
                    let d = dot_generic(qv, self.corpus.row(row));
                    sel.offer(self.finish(d, q, row), row as u32, self.order[row]);
                }
            }
            tile = tile_end;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(ids: &[&str], rows: &[Vec<f32>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(ids.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    #[test]
    fn score_examples() {
        let u = [0.6f32, 0.8];
        assert!((score(&u, &u, Metric::Cosine).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 3.0], Metric::Cosine).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0], Metric::Dot).unwrap(), 11.0);
        assert!(matches!(
            score(&[1.0, 2.0], &[3.0], Metric::Dot),
            Err(Error::DimMismatch { .. })
        ));
        assert!(score(&[0.0, 0.0], &[3.0, 1.0], Metric::Cosine).is_err());
    }

    #[test]
    fn grouped_kernel_matches_scalar_bits() {
        let dims = [1usize, 15, 16, 17, 33, 100];
        for &d in &dims {
            let mk = |s: u32| -> Vec<f32> { (0..d).map(|i| (((i as u32).wrapping_mul(2654435761) ^ s) % 1000) as f32 / 999.0 - 0.5).collect() };
            let qs: Vec<Vec<f32>> = (0..4).map(|s| mk(s + 1)).collect();
            let p = mk(99);
            let got = dot4_generic([&qs[0], &qs[1], &qs[2], &qs[3]], &p);
            let group = [qs[0].as_slice(), &qs[1], &qs[2], &qs[3]];
            let mut variants = vec![Kernel::detect().dot4(group, &p)];
            #[cfg(target_arch = "x86_64")]
            {
                if avx2_available() {
                    variants.push(unsafe { dot4_avx2(group, &p) });
                }
                if avx512_available() {
                    variants.push(unsafe { dot4_avx512(group, &p) });
                }
            }
            for g in 0..4 {
                assert_eq!(got[g].to_bits(), dot_generic(&qs[g], &p).to_bits());
                for v in &variants {
                    assert_eq!(v[g].to_bits(), got[g].to_bits(), "dim {d}");
                }
            }
        }
    }

    fn four_passage_fixture() -> (EmbeddingMatrix, EmbeddingMatrix) {
        // one-hot query against scalar passages gives the scores directly
        let q = matrix(&["q"], &[vec![1.0]]);
        let c = matrix(&["a", "b", "c", "d"], &[vec![0.9], vec![0.5], vec![0.8], vec![0.1]]);
        (q, c)
    }

    fn ids(list: &CandidateList) -> Vec<&str> {
        list.entries.iter().map(|c| c.passage_id.as_str()).collect()
    }

    #[test]
    fn top_two_of_four() {
        let (q, c) = four_passage_fixture();
        let opts = TopkOptions {
            metric: Metric::Dot,
            ..Default::default()
        };
        let out = topk(&q, &c, 2, &HashMap::new(), opts).unwrap();
        assert_eq!(ids(&out[0]), ["a", "c"]);
        assert!(!out[0].short);

        let ex = HashMap::from([("q".to_string(), HashSet::from(["a".to_string()]))]);
        let out = topk(&q, &c, 2, &ex, opts).unwrap();
        assert_eq!(ids(&out[0]), ["c", "b"]);
    }

    #[test]
    fn k_beyond_available_is_flagged() {
        let (q, c) = four_passage_fixture();
        let ex = HashMap::from([("q".to_string(), HashSet::from(["a".to_string()]))]);
        let opts = TopkOptions {
            metric: Metric::Dot,
            chunk_rows: 3,
        };
        let out = topk(&q, &c, 10, &ex, opts).unwrap();
        assert!(out[0].short);
        assert_eq!(ids(&out[0]), ["c", "b", "d"]);
    }

    #[test]
    fn ties_broken_by_ascending_id() {
        let q = matrix(&["q"], &[vec![1.0]]);
        let c = matrix(&["z", "m", "a", "x"], &[vec![0.5], vec![0.5], vec![0.5], vec![0.9]]);
        let opts = TopkOptions {
            metric: Metric::Dot,
            chunk_rows: 1,
        };
        let out = topk(&q, &c, 3, &HashMap::new(), opts).unwrap();
        assert_eq!(ids(&out[0]), ["x", "a", "m"]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let (q, c) = four_passage_fixture();
        assert!(topk(&q, &c, 0, &HashMap::new(), TopkOptions::default()).is_err());
        let q2 = matrix(&["q"], &[vec![1.0, 0.0]]);
        assert!(matches!(
            topk(&q2, &c, 1, &HashMap::new(), TopkOptions::default()),
            Err(Error::DimMismatch { .. })
        ));
    }
}

