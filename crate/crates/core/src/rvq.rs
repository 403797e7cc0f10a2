//! Patch-based vector-quantization codec with residual stages.
//!
//! Images are cut into d x d x 3 patches, optionally PCA-projected to a small
//! embedding, then quantized either by a single codebook chosen from a
//! bpi-keyed family or by a greedy residual quantizer whose stages refine the
//! reconstruction as more token packets arrive. Indices go on the wire as
//! fixed-width uncoded integers.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imageio::ImageBuffer;

const TOKEN_MAGIC: u8 = 0x54; // 'T'
const CODEBOOK_MAGIC: &[u8; 4] = b"RVQ1";
pub const DEFAULT_PATCH: usize = 8;
pub const DEFAULT_EMBED_DIM: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum RvqError {
    #[error("k ({k}) exceeds the number of distinct vectors ({distinct})")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("codebook entry count {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("bpi {bpi} needs {needed} entries, large codebook has {available}")]
    BpiTooLarge {
        bpi: u8,
        needed: usize,
        available: usize,
    },
    #[error("budget {budget} bits too small for any codebook (cheapest needs {cheapest})")]
    BudgetTooSmall { budget: u64, cheapest: u64 },
    #[error("projector needs more vectors ({n}) than output dimensions ({out_dim})")]
    TooFewVectors { n: usize, out_dim: usize },
    #[error("zero-variance corpus, projector undefined")]
    DegenerateCorpus,
    #[error("token index {index} out of range for bpi {bpi}")]
    IndexOutOfRange { index: u32, bpi: u8 },
    #[error("stage {0} not present in the stack")]
    MissingStage(usize),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RvqError + '_ {
    move |source| RvqError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Patch grid
// ---------------------------------------------------------------------------

/// Per-cell vectors extracted from an image, row-major over cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub vectors: Vec<Vec<f64>>,
    pub grid_w: usize,
    pub grid_h: usize,
    pub patch: usize,
    pub width: usize,
    pub height: usize,
}

/// Cuts the image into d x d x 3 raw pixel patches, edge-replicating the
/// right/bottom borders when dimensions are not multiples of d. Vector layout
/// is plane-major, then row, then column.
pub fn extract_patches(image: &ImageBuffer, d: usize) -> PatchGrid {
    assert!(d >= 1, "patch size must be >= 1");
    let grid_w = image.width.div_ceil(d);
    let grid_h = image.height.div_ceil(d);
    let mut vectors = Vec::with_capacity(grid_w * grid_h);
    for cy in 0..grid_h {
        for cx in 0..grid_w {
            let mut v = Vec::with_capacity(3 * d * d);
            for p in 0..3 {
                for iy in 0..d {
                    for ix in 0..d {
                        let x = (cx * d + ix).min(image.width - 1);
                        let y = (cy * d + iy).min(image.height - 1);
                        v.push(image.planes[p][y * image.width + x] as f64);
                    }
                }
            }
            vectors.push(v);
        }
    }
    PatchGrid {
        vectors,
        grid_w,
        grid_h,
        patch: d,
        width: image.width,
        height: image.height,
    }
}

/// Reassembles unprojected patch vectors into float pixel planes (clamped to
/// [0, 255], cropped to the grid's original dimensions).
pub fn assemble_patches_f64(grid: &PatchGrid) -> Vec<Vec<f64>> {
    let d = grid.patch;
    let mut planes = vec![vec![0.0; grid.width * grid.height]; 3];
    for cy in 0..grid.grid_h {
        for cx in 0..grid.grid_w {
            let v = &grid.vectors[cy * grid.grid_w + cx];
            for p in 0..3 {
                for iy in 0..d {
                    let y = cy * d + iy;
                    if y >= grid.height {
                        break;
                    }
                    for ix in 0..d {
                        let x = cx * d + ix;
                        if x >= grid.width {
                            continue;
                        }
                        planes[p][y * grid.width + x] =
                            v[p * d * d + iy * d + ix].clamp(0.0, 255.0);
                    }
                }
            }
        }
    }
    planes
}

pub fn assemble_patches(grid: &PatchGrid) -> ImageBuffer {
    let planes = assemble_patches_f64(grid);
    let mut img = ImageBuffer::new(grid.width, grid.height);
    for p in 0..3 {
        for (dst, &src) in img.planes[p].iter_mut().zip(planes[p].iter()) {
            *dst = src.round() as u8;
        }
    }
    img
}

// ---------------------------------------------------------------------------
// PCA projector
// ---------------------------------------------------------------------------

/// Orthonormal linear projector (top principal directions) with the corpus
/// mean; the transpose serves as the decoder-side back-projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub mean: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    /// Explained variance per row, non-increasing.
    pub eigenvalues: Vec<f64>,
}

impl Projector {
    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| {
                row.iter()
                    .zip(v.iter().zip(self.mean.iter()))
                    .map(|(r, (x, m))| r * (x - m))
                    .sum()
            })
            .collect()
    }

    pub fn back_project(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (zi, row) in z.iter().zip(self.rows.iter()) {
            for (o, r) in out.iter_mut().zip(row.iter()) {
                *o += zi * r;
            }
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<(), RvqError> {
        let text = serde_json::to_string(self).expect("projector serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load_json(path: &Path) -> Result<Self, RvqError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RvqError::Malformed {
            what: "projector file",
            detail: e.to_string(),
        })
    }
}

/// Top-`out_dim` principal directions by power iteration with deflation.
pub fn fit_projector(vectors: &[Vec<f64>], out_dim: usize) -> Result<Projector, RvqError> {
    let n = vectors.len();
    if n <= out_dim {
        return Err(RvqError::TooFewVectors { n, out_dim });
    }
    let dim = vectors[0].len();
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    // Dense covariance; dim is small (3*d^2 at most).
    let mut cov = vec![vec![0.0; dim]; dim];
    for v in vectors {
        let centered: Vec<f64> = v.iter().zip(mean.iter()).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                cov[i][j] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i][i]).sum();
    if trace < 1e-12 {
        return Err(RvqError::DegenerateCorpus);
    }

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9E37_79B9);
    for _ in 0..out_dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        orthonormalize(&mut v, &rows);
        for _ in 0..500 {
            let mut next = mat_vec(&cov, &v);
            orthonormalize(&mut next, &rows);
            let delta: f64 = next
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            v = next;
            if delta < 1e-24 {
                break;
            }
        }
        let cv = mat_vec(&cov, &v);
        let lambda: f64 = v.iter().zip(cv.iter()).map(|(a, b)| a * b).sum();
        eigenvalues.push(lambda.max(0.0));
        // Deflate so the next iteration converges to the next direction.
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        rows.push(v);
    }
    Ok(Projector {
        mean,
        rows,
        eigenvalues,
    })
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

/// Gram-Schmidt against `basis`, then normalize. Falls back to a unit basis
/// vector if the projection collapses.
fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
        for (vi, bi) in v.iter_mut().zip(b.iter()) {
            *vi -= dot * bi;
        }
    }
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-300 {
        v[0] = 1.0;
        for x in v.iter_mut().skip(1) {
            *x = 0.0;
        }
    } else {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn sq_dist_f32(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, &y)| (x - y as f64) * (x - y as f64))
        .sum()
}

/// Raw Lloyd outcome, before any codebook packaging.
#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective (total squared distance) after each iteration's assignment
    /// phase; non-increasing.
    pub objective_history: Vec<f64>,
}

impl KmeansOutcome {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one iteration")
    }
}

fn distinct_count(vectors: &[Vec<f64>]) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(vectors.len());
    for v in vectors {
        seen.insert(v.iter().map(|x| x.to_bits()).collect());
    }
    seen.len()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Assignment ties go to the lowest centroid index; an empty cluster is
/// reseeded with the point farthest from its assigned centroid; iteration
/// stops when the largest centroid shift drops below 1e-6 or after
/// `max_iters` rounds.
pub fn kmeans(
    vectors: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KmeansOutcome, RvqError> {
    if k == 0 {
        return Err(RvqError::ZeroK);
    }
    let n = vectors.len();
    let distinct = distinct_count(vectors);
    if k > distinct {
        return Err(RvqError::TooFewDistinct { k, distinct });
    }
    let dim = vectors[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centroids.push(vectors[first].clone());
    let mut best_d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best_d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in best_d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All mass on chosen points; take the lowest unused index.
            (0..n)
                .find(|&i| centroids.iter().all(|c| c != &vectors[i]))
                .expect("distinct count guarantees an unused vector")
        };
        centroids.push(vectors[chosen].clone());
        for (d, v) in best_d2.iter_mut().zip(vectors.iter()) {
            let nd = sq_dist(v, centroids.last().unwrap());
            if nd < *d {
                *d = nd;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut objective_history = Vec::new();
    for _ in 0..max_iters.max(1) {
        // Assignment phase (parallel; per-vector results are independent).
        let pairs: Vec<(usize, f64)> = vectors
            .par_iter()
            .map(|v| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (c, cent) in centroids.iter().enumerate() {
                    let d = sq_dist(v, cent);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                (best, best_d)
            })
            .collect();
        let mut objective = 0.0;
        for (i, (a, d)) in pairs.iter().enumerate() {
            assignments[i] = *a;
            objective += d;
        }
        objective_history.push(objective);

        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        // Reseed empty clusters with the farthest point whose donor cluster
        // keeps at least one member; deterministic scan order.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far_i = usize::MAX;
            let mut far_d = -1.0;
            for (i, v) in vectors.iter().enumerate() {
                if counts[assignments[i]] < 2 {
                    continue;
                }
                let d = sq_dist(v, &centroids[assignments[i]]);
                if d > far_d {
                    far_d = d;
                    far_i = i;
                }
            }
            if far_i == usize::MAX {
                continue;
            }
            counts[assignments[far_i]] -= 1;
            assignments[far_i] = c;
            counts[c] = 1;
        }

        // Update phase: serial accumulation keeps reductions deterministic.
        let mut sums = vec![vec![0.0; dim]; k];
        for (v, &a) in vectors.iter().zip(assignments.iter()) {
            for (s, x) in sums[a].iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        let mut max_shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut shift = 0.0;
            for (j, s) in sums[c].iter().enumerate() {
                let nv = s / counts[c] as f64;
                let d = nv - centroids[c][j];
                shift += d * d;
                centroids[c][j] = nv;
            }
            max_shift = max_shift.max(shift.sqrt());
        }
        if max_shift < 1e-6 {
            break;
        }
    }

    // Final assignment against the updated centroids.
    let pairs: Vec<(usize, f64)> = vectors
        .par_iter()
        .map(|v| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(v, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            (best, best_d)
        })
        .collect();
    let mut objective = 0.0;
    for (i, (a, d)) in pairs.iter().enumerate() {
        assignments[i] = *a;
        objective += d;
    }
    objective_history.push(objective);

    Ok(KmeansOutcome {
        centroids,
        assignments,
        objective_history,
    })
}

// ---------------------------------------------------------------------------
// Codebooks
// ---------------------------------------------------------------------------

/// 2^bpi codewords of a fixed dimension, stored as f32 to match the on-disk
/// representation exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Vec<Vec<f32>>,
    pub bpi: u8,
    pub dim: usize,
}

impl Codebook {
    pub fn from_entries(entries: Vec<Vec<f32>>, dim: usize) -> Result<Self, RvqError> {
        if !entries.len().is_power_of_two() {
            return Err(RvqError::NotPowerOfTwo(entries.len()));
        }
        let bpi = entries.len().trailing_zeros() as u8;
        Ok(Codebook { entries, bpi, dim })
    }

    fn from_centroids(centroids: Vec<Vec<f64>>, dim: usize) -> Result<Self, RvqError> {
        let entries = centroids
            .into_iter()
            .map(|c| c.into_iter().map(|x| x as f32).collect())
            .collect();
        Codebook::from_entries(entries, dim)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nearest codeword by squared Euclidean distance, ties to the lowest
    /// index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            let d = sq_dist_f32(v, e);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, best_d)
    }

    /// Mean squared quantization error of a corpus under this codebook.
    pub fn corpus_mse(&self, vectors: &[Vec<f64>]) -> f64 {
        vectors.iter().map(|v| self.nearest(v).1).sum::<f64>() / vectors.len() as f64
    }
}

/// k-means training of a codebook with `k = 2^bpi`-style power-of-two sizes.
pub fn train_kmeans(
    vectors: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Codebook, RvqError> {
    if k == 0 {
        return Err(RvqError::ZeroK);
    }
    if !k.is_power_of_two() {
        return Err(RvqError::NotPowerOfTwo(k));
    }
    let outcome = kmeans(vectors, k, max_iters, seed)?;
    Codebook::from_centroids(outcome.centroids, vectors[0].len())
}

/// Clusters a large codebook's entries down to 2^bpi representatives.
pub fn cluster_codebook(large: &Codebook, bpi: u8, seed: u64) -> Result<Codebook, RvqError> {
    let k = 1usize << bpi;
    if k > large.len() {
        return Err(RvqError::BpiTooLarge {
            bpi,
            needed: k,
            available: large.len(),
        });
    }
    let vectors: Vec<Vec<f64>> = large
        .entries
        .iter()
        .map(|e| e.iter().map(|&x| x as f64).collect())
        .collect();
    let outcome = kmeans(&vectors, k, 100, seed)?;
    Codebook::from_centroids(outcome.centroids, large.dim)
}

/// Codebooks keyed by bits-per-index over a contiguous range.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookFamily {
    books: BTreeMap<u8, Codebook>,
}

impl CodebookFamily {
    pub fn new(books: Vec<Codebook>) -> Result<Self, RvqError> {
        let mut map = BTreeMap::new();
        for b in books {
            if map.insert(b.bpi, b).is_some() {
                return Err(RvqError::Malformed {
                    what: "codebook family",
                    detail: "duplicate bpi".into(),
                });
            }
        }
        if map.is_empty() {
            return Err(RvqError::Malformed {
                what: "codebook family",
                detail: "no codebooks".into(),
            });
        }
        Ok(CodebookFamily { books: map })
    }

    pub fn bpis(&self) -> impl Iterator<Item = u8> + '_ {
        self.books.keys().copied()
    }

    pub fn get(&self, bpi: u8) -> Option<&Codebook> {
        self.books.get(&bpi)
    }
}

/// Largest bpi whose fixed-width token grid fits the bit budget.
pub fn select_codebook(
    family: &CodebookFamily,
    n_bits_budget: u64,
    width: usize,
    height: usize,
    d: usize,
) -> Result<u8, RvqError> {
    let cells = (width.div_ceil(d) * height.div_ceil(d)) as u64;
    let mut best: Option<u8> = None;
    let mut cheapest = u64::MAX;
    for bpi in family.bpis() {
        let need = cells * bpi as u64;
        cheapest = cheapest.min(need);
        if need <= n_bits_budget {
            best = Some(bpi);
        }
    }
    best.ok_or(RvqError::BudgetTooSmall {
        budget: n_bits_budget,
        cheapest,
    })
}

/// Number of residual stages that fit the budget, capped at the stack size.
pub fn m_stages(n_bits_budget: u64, n_bits_per_stage: u64, m_max: usize) -> usize {
    assert!(n_bits_per_stage > 0, "per-stage bits must be positive");
    ((n_bits_budget / n_bits_per_stage) as usize).min(m_max)
}

// ---------------------------------------------------------------------------
// Residual stack
// ---------------------------------------------------------------------------

/// Stage-wise residual codebooks, all of the same bpi and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack {
    pub stages: Vec<Codebook>,
    /// Training-corpus mean squared residual after each stage.
    pub training_mse: Vec<f64>,
}

impl ResidualStack {
    pub fn m_max(&self) -> usize {
        self.stages.len()
    }

    pub fn bpi(&self) -> u8 {
        self.stages[0].bpi
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim
    }
}

/// Trains stage i by k-means on the residuals left by stages 1..i-1.
///
/// When residuals collapse below 2^bpi distinct values the stage is trained
/// at the reduced size and padded by repeating its first centroid, so later
/// stages stay well-formed.
pub fn train_residual_stack(
    vectors: &[Vec<f64>],
    m: usize,
    bpi: u8,
    seed: u64,
) -> Result<ResidualStack, RvqError> {
    assert!(m >= 1, "at least one stage");
    let k = 1usize << bpi;
    let dim = vectors[0].len();
    let mut residuals: Vec<Vec<f64>> = vectors.to_vec();
    let mut stages = Vec::with_capacity(m);
    let mut training_mse = Vec::with_capacity(m);
    for stage in 0..m {
        let distinct = distinct_count(&residuals);
        // Largest power of two not exceeding min(k, distinct), at least 1.
        let cap = k.min(distinct).max(1);
        let stage_k = 1usize << (usize::BITS - 1 - cap.leading_zeros());
        let outcome = kmeans(&residuals, stage_k, 100, seed.wrapping_add(stage as u64))?;
        let mut centroids = outcome.centroids;
        while centroids.len() < k {
            centroids.push(centroids[0].clone());
        }
        let book = Codebook::from_centroids(centroids, dim)?;
        for r in residuals.iter_mut() {
            let (idx, _) = book.nearest(r);
            for (x, &e) in r.iter_mut().zip(book.entries[idx].iter()) {
                *x -= e as f64;
            }
        }
        let mse =
            residuals.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
                / residuals.len() as f64;
        training_mse.push(mse);
        stages.push(book);
    }
    Ok(ResidualStack {
        stages,
        training_mse,
    })
}

/// Greedy residual encoding: stage m picks the codeword minimizing
/// || sum of chosen codewords + candidate - x ||^2, ties to the lowest index.
pub fn rq_encode(vector: &[f64], stack: &ResidualStack, m: usize) -> Vec<u32> {
    assert!(m >= 1 && m <= stack.m_max(), "stage count out of range");
    let mut residual = vector.to_vec();
    let mut indices = Vec::with_capacity(m);
    for stage in &stack.stages[..m] {
        let (idx, _) = stage.nearest(&residual);
        for (r, &e) in residual.iter_mut().zip(stage.entries[idx].iter()) {
            *r -= e as f64;
        }
        indices.push(idx as u32);
    }
    indices
}

/// Sum of the indexed codewords over the received stage prefix.
pub fn rq_decode(indices: &[u32], stack: &ResidualStack) -> Result<Vec<f64>, RvqError> {
    let mut out = vec![0.0; stack.dim()];
    for (stage, &idx) in indices.iter().enumerate() {
        let book = stack.stages.get(stage).ok_or(RvqError::MissingStage(stage))?;
        let entry = book
            .entries
            .get(idx as usize)
            .ok_or(RvqError::IndexOutOfRange {
                index: idx,
                bpi: book.bpi,
            })?;
        for (o, &e) in out.iter_mut().zip(entry.iter()) {
            *o += e as f64;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Token maps and stage packets
// ---------------------------------------------------------------------------

/// Per-cell index lists; `stages[m]` holds stage m's index for every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub grid_w: usize,
    pub grid_h: usize,
    pub bpi: u8,
    pub stages: Vec<Vec<u32>>,
}

impl TokenMap {
    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }
}

/// One stage's indices on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPacket {
    pub image_id: u32,
    pub stage: u8,
    pub bpi: u8,
    pub indices: Vec<u32>,
}

impl TokenPacket {
    pub fn header_bits() -> u64 {
        8 * (1 + 4 + 1 + 1 + 4)
    }

    pub fn payload_bits(cells: u64, bpi: u8) -> u64 {
        // Raw fixed-width indices, byte-padded on the wire.
        8 * (cells * bpi as u64).div_ceil(8)
    }

    pub fn wire_bits(&self) -> u64 {
        Self::header_bits() + Self::payload_bits(self.indices.len() as u64, self.bpi)
    }

    /// Layout: magic 0x54, image_id u32 LE, stage u8, bpi u8, cell_count
    /// u32 LE, big-endian packed bpi-bit indices.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(TOKEN_MAGIC);
        out.extend_from_slice(&self.image_id.to_le_bytes());
        out.push(self.stage);
        out.push(self.bpi);
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        let mut acc: u64 = 0;
        let mut nbits = 0u32;
        for &idx in &self.indices {
            acc = (acc << self.bpi) | idx as u64;
            nbits += self.bpi as u32;
            while nbits >= 8 {
                nbits -= 8;
                out.push((acc >> nbits) as u8);
            }
        }
        if nbits > 0 {
            out.push((acc << (8 - nbits)) as u8);
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, RvqError> {
        let malformed = |detail: String| RvqError::Malformed {
            what: "token packet",
            detail,
        };
        if data.len() < 11 {
            return Err(malformed("shorter than header".into()));
        }
        if data[0] != TOKEN_MAGIC {
            return Err(malformed(format!("bad magic 0x{:02X}", data[0])));
        }
        let image_id = u32::from_le_bytes([data[1], data[2], data[3], data[4]]);
        let stage = data[5];
        let bpi = data[6];
        if bpi == 0 || bpi > 32 {
            return Err(malformed(format!("bad bpi {bpi}")));
        }
        let cells = u32::from_le_bytes([data[7], data[8], data[9], data[10]]) as usize;
        let need = (cells * bpi as usize).div_ceil(8);
        let payload = data
            .get(11..11 + need)
            .ok_or_else(|| malformed("truncated payload".into()))?;
        let mut indices = Vec::with_capacity(cells);
        let mut acc: u64 = 0;
        let mut nbits = 0u32;
        let mut pos = 0usize;
        for _ in 0..cells {
            while nbits < bpi as u32 {
                acc = (acc << 8) | payload[pos] as u64;
                pos += 1;
                nbits += 8;
            }
            nbits -= bpi as u32;
            indices.push(((acc >> nbits) & ((1u64 << bpi) - 1)) as u32);
        }
        Ok(TokenPacket {
            image_id,
            stage,
            bpi,
            indices,
        })
    }
}

// ---------------------------------------------------------------------------
// Whole-image codec
// ---------------------------------------------------------------------------

/// Trained artifacts needed to push images through the RVQ path.
#[derive(Debug, Clone)]
pub struct RvqCodec {
    pub patch: usize,
    pub projector: Option<Projector>,
    pub stack: ResidualStack,
}

impl RvqCodec {
    /// Greedy-encodes every cell through all stages of the stack.
    pub fn encode_image(&self, image: &ImageBuffer) -> TokenMap {
        let grid = extract_patches(image, self.patch);
        let m = self.stack.m_max();
        let embedded: Vec<Vec<f64>> = grid
            .vectors
            .iter()
            .map(|v| match &self.projector {
                Some(p) => p.project(v),
                None => v.clone(),
            })
            .collect();
        let mut stages = vec![Vec::with_capacity(grid.vectors.len()); m];
        for v in &embedded {
            let indices = rq_encode(v, &self.stack, m);
            for (s, idx) in indices.into_iter().enumerate() {
                stages[s].push(idx);
            }
        }
        TokenMap {
            grid_w: grid.grid_w,
            grid_h: grid.grid_h,
            bpi: self.stack.bpi(),
            stages,
        }
    }

    /// Decodes the first `m` stages to float pixel planes.
    pub fn decode_prefix_f64(
        &self,
        tokens: &TokenMap,
        m: usize,
        width: usize,
        height: usize,
    ) -> Result<Vec<Vec<f64>>, RvqError> {
        let m = m.min(tokens.stages.len());
        let cells = tokens.cells();
        let mut vectors = Vec::with_capacity(cells);
        let mut cell_indices = Vec::with_capacity(m);
        for cell in 0..cells {
            cell_indices.clear();
            for stage in 0..m {
                cell_indices.push(tokens.stages[stage][cell]);
            }
            let z = rq_decode(&cell_indices, &self.stack)?;
            let v = match &self.projector {
                Some(p) => p.back_project(&z),
                None => z,
            };
            vectors.push(v);
        }
        let grid = PatchGrid {
            vectors,
            grid_w: tokens.grid_w,
            grid_h: tokens.grid_h,
            patch: self.patch,
            width,
            height,
        };
        Ok(assemble_patches_f64(&grid))
    }

    pub fn decode_prefix(
        &self,
        tokens: &TokenMap,
        m: usize,
        width: usize,
        height: usize,
    ) -> Result<ImageBuffer, RvqError> {
        let planes = self.decode_prefix_f64(tokens, m, width, height)?;
        let mut img = ImageBuffer::new(width, height);
        for p in 0..3 {
            for (dst, &src) in img.planes[p].iter_mut().zip(planes[p].iter()) {
                *dst = src.round() as u8;
            }
        }
        Ok(img)
    }

    /// Patch-corpus embeddings used for training, pooled over a corpus.
    pub fn embed_corpus(images: &[ImageBuffer], patch: usize, projector: Option<&Projector>) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for img in images {
            let grid = extract_patches(img, patch);
            for v in grid.vectors {
                out.push(match projector {
                    Some(p) => p.project(&v),
                    None => v,
                });
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Codebook files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookKind {
    Single,
    Stack,
}

/// Writes the bit-exact codebook container: magic "RVQ1", u8 kind, u8 bpi,
/// u16 dim LE, u16 stage_count LE, then f32 LE entries stage-major,
/// entry-major. The write is atomic (temp file + rename).
pub fn write_codebook_file(
    path: &Path,
    kind: CodebookKind,
    stages: &[Codebook],
) -> Result<(), RvqError> {
    assert!(!stages.is_empty());
    let bpi = stages[0].bpi;
    let dim = stages[0].dim;
    let mut out = Vec::new();
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.push(match kind {
        CodebookKind::Single => 0,
        CodebookKind::Stack => 1,
    });
    out.push(bpi);
    out.extend_from_slice(&(dim as u16).to_le_bytes());
    out.extend_from_slice(&(stages.len() as u16).to_le_bytes());
    for book in stages {
        debug_assert_eq!(book.bpi, bpi);
        debug_assert_eq!(book.dim, dim);
        for entry in &book.entries {
            for &x in entry {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&out).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_codebook_file(path: &Path) -> Result<(CodebookKind, Vec<Codebook>), RvqError> {
    let data = fs::read(path).map_err(io_err(path))?;
    let malformed = |detail: String| RvqError::Malformed {
        what: "codebook file",
        detail,
    };
    if data.len() < 10 {
        return Err(malformed("shorter than header".into()));
    }
    if &data[0..4] != CODEBOOK_MAGIC {
        return Err(malformed("bad magic".into()));
    }
    let kind = match data[4] {
        0 => CodebookKind::Single,
        1 => CodebookKind::Stack,
        other => return Err(malformed(format!("bad kind {other}"))),
    };
    let bpi = data[5];
    let dim = u16::from_le_bytes([data[6], data[7]]) as usize;
    let stage_count = u16::from_le_bytes([data[8], data[9]]) as usize;
    let entries_per_stage = 1usize << bpi;
    let expected = 10 + stage_count * entries_per_stage * dim * 4;
    if data.len() != expected {
        return Err(malformed(format!(
            "size {} does not match header (expected {expected})",
            data.len()
        )));
    }
    let mut pos = 10;
    let mut stages = Vec::with_capacity(stage_count);
    for _ in 0..stage_count {
        let mut entries = Vec::with_capacity(entries_per_stage);
        for _ in 0..entries_per_stage {
            let mut entry = Vec::with_capacity(dim);
            for _ in 0..dim {
                entry.push(f32::from_le_bytes([
                    data[pos],
                    data[pos + 1],
                    data[pos + 2],
                    data[pos + 3],
                ]));
                pos += 4;
            }
            entries.push(entry);
        }
        stages.push(Codebook::from_entries(entries, dim)?);
    }
    Ok((kind, stages))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_image;

    #[test]
    fn patch_grid_counts_and_round_trip() {
        let img = generate_image(70, 16, 16);
        let grid = extract_patches(&img, 8);
        assert_eq!((grid.grid_w, grid.grid_h), (2, 2));
        assert_eq!(grid.vectors.len(), 4);
        assert_eq!(grid.vectors[0].len(), 192);
        assert_eq!(assemble_patches(&grid), img);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = ImageBuffer::filled(24, 16, 77);
        let grid = extract_patches(&img, 8);
        for v in &grid.vectors[1..] {
            assert_eq!(v, &grid.vectors[0]);
        }
    }

    #[test]
    fn padded_extraction_round_trips() {
        let img = generate_image(71, 19, 13);
        let grid = extract_patches(&img, 8);
        assert_eq!((grid.grid_w, grid.grid_h), (3, 2));
        assert_eq!(assemble_patches(&grid), img);
    }

    #[test]
    fn projector_recovers_planar_corpus() {
        // Corpus on an exact 2-D plane embedded in 6 dimensions.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b1 = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let b2 = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let vectors: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                (0..6).map(|i| 5.0 + a * b1[i] + b * b2[i]).collect()
            })
            .collect();
        let proj = fit_projector(&vectors, 2).unwrap();
        for v in &vectors {
            let back = proj.back_project(&proj.project(v));
            for (x, y) in v.iter().zip(back.iter()) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn projector_rows_are_orthonormal_with_ordered_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vectors: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let proj = fit_projector(&vectors, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = proj.rows[i]
                    .iter()
                    .zip(proj.rows[j].iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-6);
            }
        }
        for pair in proj.eigenvalues.windows(2) {
            assert!(pair[0] >= pair[1] - 1e-9);
        }
    }

    /// Jacobi eigenvalue sweep; independent spectral oracle for small matrices.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    off += a[i][j] * a[i][j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-18 {
                        continue;
                    }
                    let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut eigs: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());
        eigs
    }

    #[test]
    fn projector_captures_embedded_variance() {
        // 4-dim signal embedded in 10 dims plus a trace of noise.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..10).map(|j| if j % 4 == i { 1.0 } else { 0.1 * (i as f64) }).collect())
            .collect();
        let vectors: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let coeffs: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
                (0..10)
                    .map(|j| {
                        coeffs
                            .iter()
                            .enumerate()
                            .map(|(i, c)| c * basis[i][j])
                            .sum::<f64>()
                            + 1e-6 * rng.gen_range(-1.0..1.0)
                    })
                    .collect()
            })
            .collect();
        let proj = fit_projector(&vectors, 4).unwrap();
        let captured: f64 = proj.eigenvalues.iter().sum();

        // Oracle: dense symmetric eigensolver on the covariance.
        let n = vectors.len();
        let dim = 10;
        let mut mean = vec![0.0; dim];
        for v in &vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n as f64;
            }
        }
        let mut cov = vec![vec![0.0; dim]; dim];
        for v in &vectors {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i][j] += (v[i] - mean[i]) * (v[j] - mean[j]) / n as f64;
                }
            }
        }
        let trace: f64 = (0..dim).map(|i| cov[i][i]).sum();
        let eigs = jacobi_eigenvalues(cov);
        let top4: f64 = eigs[..4].iter().sum();
        assert!(captured >= 0.999 * trace, "captured {captured} of {trace}");
        assert!((captured - top4).abs() / top4 < 1e-6);
    }

    #[test]
    fn projector_rejects_degenerate_corpora() {
        let vectors = vec![vec![1.0, 2.0]; 10];
        assert!(matches!(
            fit_projector(&vectors, 1),
            Err(RvqError::DegenerateCorpus)
        ));
        assert!(fit_projector(&vectors[..1], 2).is_err());
    }

    #[test]
    fn kmeans_exact_clusters() {
        let mut vectors = Vec::new();
        for i in 0..4 {
            for _ in 0..5 {
                vectors.push(vec![i as f64 * 10.0, i as f64 * -10.0]);
            }
        }
        let out = kmeans(&vectors, 4, 100, 1).unwrap();
        assert!(out.objective() < 1e-20);
        let mut centroids = out.centroids.clone();
        centroids.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        for (i, c) in centroids.iter().enumerate() {
            assert_eq!(c, &vec![i as f64 * 10.0, i as f64 * -10.0]);
        }
    }

    #[test]
    fn kmeans_k1_is_the_mean() {
        let vectors = vec![vec![1.0], vec![2.0], vec![6.0]];
        let out = kmeans(&vectors, 1, 100, 0).unwrap();
        assert!((out.centroids[0][0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_objective_beats_random_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vectors: Vec<Vec<f64>> = (0..20)
            .map(|_| vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let out = kmeans(&vectors, 3, 100, 17).unwrap();

        // Brute-force baseline: 1000 random assignments to 3 clusters.
        let mut best_random = f64::INFINITY;
        for _ in 0..1000 {
            let assign: Vec<usize> = (0..20).map(|_| rng.gen_range(0..3)).collect();
            let mut sums = vec![vec![0.0; 2]; 3];
            let mut counts = [0usize; 3];
            for (v, &a) in vectors.iter().zip(assign.iter()) {
                counts[a] += 1;
                for (s, x) in sums[a].iter_mut().zip(v) {
                    *s += x;
                }
            }
            let mut cost = 0.0;
            for (v, &a) in vectors.iter().zip(assign.iter()) {
                if counts[a] == 0 {
                    continue;
                }
                let c: Vec<f64> = sums[a].iter().map(|s| s / counts[a] as f64).collect();
                cost += sq_dist(v, &c);
            }
            best_random = best_random.min(cost);
        }
        assert!(
            out.objective() <= best_random + 1e-9,
            "kmeans {} vs random {}",
            out.objective(),
            best_random
        );
    }

    #[test]
    fn kmeans_objective_history_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vectors: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let out = kmeans(&vectors, 8, 50, 3).unwrap();
        for pair in out.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "objective rose: {pair:?}");
        }
    }

    #[test]
    fn kmeans_rejects_k_beyond_distinct() {
        let vectors = vec![vec![1.0], vec![1.0], vec![2.0]];
        assert!(matches!(
            kmeans(&vectors, 3, 10, 0),
            Err(RvqError::TooFewDistinct { k: 3, distinct: 2 })
        ));
        assert!(kmeans(&vectors, 0, 10, 0).is_err());
    }

    #[test]
    fn kmeans_is_deterministic_for_a_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vectors: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let a = kmeans(&vectors, 16, 100, 5).unwrap();
        let b = kmeans(&vectors, 16, 100, 5).unwrap();
        assert_eq!(a.centroids, b.centroids);
        let c = kmeans(&vectors, 16, 100, 6).unwrap();
        assert!(a.centroids != c.centroids || a.objective() == c.objective());
    }

    #[test]
    fn cluster_codebook_boundaries() {
        let entries: Vec<Vec<f32>> = (0..8).map(|i| vec![i as f32, -(i as f32)]).collect();
        let large = Codebook::from_entries(entries, 2).unwrap();

        // Same size: permutation of the large codebook.
        let same = cluster_codebook(&large, 3, 1).unwrap();
        let mut got: Vec<Vec<f32>> = same.entries.clone();
        got.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        let mut want = large.entries.clone();
        want.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(got, want);

        // bpi = 0: single centroid at the mean of the entries.
        let one = cluster_codebook(&large, 0, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one.entries[0][0] - 3.5).abs() < 1e-6);

        assert!(matches!(
            cluster_codebook(&large, 4, 1),
            Err(RvqError::BpiTooLarge { .. })
        ));
    }

    #[test]
    fn clustered_codebook_never_beats_the_large_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let corpus: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let large = train_kmeans(&corpus, 64, 50, 2).unwrap();
        let small = cluster_codebook(&large, 3, 2).unwrap();
        assert!(small.corpus_mse(&corpus) >= large.corpus_mse(&corpus) - 1e-12);
    }

    #[test]
    fn residual_stack_mse_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let corpus: Vec<Vec<f64>> = (0..600)
            .map(|_| (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect();
        let stack = train_residual_stack(&corpus, 10, 8, 3).unwrap();
        assert_eq!(stack.m_max(), 10);
        for pair in stack.training_mse.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "stage MSE rose: {pair:?}");
        }
    }

    #[test]
    fn exact_corpus_reaches_zero_residual_and_stage_two_pads() {
        let corpus: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let stack = train_residual_stack(&corpus, 2, 2, 1).unwrap();
        assert!(stack.training_mse[0] < 1e-12, "stage 1 should be exact");
        assert!(stack.training_mse[1] < 1e-10);
        // Stage 2 saw zero residuals; its entries are near zero.
        for e in &stack.stages[1].entries {
            for &x in e {
                assert!(x.abs() < 1e-6);
            }
        }
        assert_eq!(stack.stages[1].len(), 4);
    }

    #[test]
    fn rq_encode_base_case_is_nearest_neighbor() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let corpus: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let stack = train_residual_stack(&corpus, 3, 3, 4).unwrap();
        for v in corpus.iter().take(30) {
            let got = rq_encode(v, &stack, 1);
            let (nn, _) = stack.stages[0].nearest(v);
            assert_eq!(got, vec![nn as u32]);
        }
        // Encoding a stage-1 codeword gives that index with zero error.
        let word: Vec<f64> = stack.stages[0].entries[2].iter().map(|&x| x as f64).collect();
        let idx = rq_encode(&word, &stack, 1);
        assert_eq!(idx, vec![2]);
        let back = rq_decode(&idx, &stack).unwrap();
        assert_eq!(back, word);
    }

    #[test]
    fn greedy_matches_per_stage_brute_force_on_toy_stack() {
        // Two stages, three meaningful entries each (fourth duplicates the
        // third so entry counts stay a power of two).
        let s1 = Codebook::from_entries(
            vec![
                vec![0.0, 0.0],
                vec![4.0, 0.0],
                vec![0.0, 4.0],
                vec![0.0, 4.0],
            ],
            2,
        )
        .unwrap();
        let s2 = Codebook::from_entries(
            vec![
                vec![0.5, 0.5],
                vec![-0.5, 0.5],
                vec![0.0, -0.7],
                vec![0.0, -0.7],
            ],
            2,
        )
        .unwrap();
        let stack = ResidualStack {
            stages: vec![s1, s2],
            training_mse: vec![0.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let x = vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let got = rq_encode(&x, &stack, 2);
            // Brute force the per-stage argmin recurrence.
            let mut acc = [0.0f64; 2];
            let mut expected = Vec::new();
            for stage in &stack.stages {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (j, e) in stage.entries.iter().enumerate() {
                    let d: f64 = (0..2)
                        .map(|i| (acc[i] + e[i] as f64 - x[i]).powi(2))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                for i in 0..2 {
                    acc[i] += stage.entries[best][i] as f64;
                }
                expected.push(best as u32);
            }
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn rq_decode_prefix_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let corpus: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let stack = train_residual_stack(&corpus, 4, 4, 5).unwrap();
        assert_eq!(rq_decode(&[], &stack).unwrap(), vec![0.0, 0.0]);

        let x = vec![1.3, -0.4];
        let indices = rq_encode(&x, &stack, 4);
        // Prefix error norms match the encoder-side residual norms exactly.
        let mut residual = x.clone();
        for m in 1..=4 {
            let recon = rq_decode(&indices[..m], &stack).unwrap();
            let err: f64 = recon.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            let stage = &stack.stages[m - 1];
            for (r, &e) in residual
                .iter_mut()
                .zip(stage.entries[indices[m - 1] as usize].iter())
            {
                *r -= e as f64;
            }
            let res_norm: f64 = residual.iter().map(|v| v * v).sum();
            assert!((err - res_norm).abs() < 1e-12);
        }
        assert!(rq_decode(&[99], &stack).is_err());
    }

    #[test]
    fn select_codebook_examples() {
        let books: Vec<Codebook> = (8..=16)
            .map(|bpi| {
                let entries = vec![vec![0.0f32]; 1 << bpi];
                Codebook::from_entries(entries, 1).unwrap()
            })
            .collect();
        let family = CodebookFamily::new(books).unwrap();
        // 768x512 at d = 8: 6144 cells; 6144 * 10 = 61440.
        assert_eq!(select_codebook(&family, 61_440, 768, 512, 8).unwrap(), 10);
        assert!(matches!(
            select_codebook(&family, 49_151, 768, 512, 8),
            Err(RvqError::BudgetTooSmall { .. })
        ));
        assert_eq!(select_codebook(&family, 1_000_000_000, 768, 512, 8).unwrap(), 16);
    }

    #[test]
    fn m_stages_examples() {
        assert_eq!(m_stages(100_000, 49_152, 10), 2);
        assert_eq!(m_stages(40_000, 49_152, 10), 0);
        assert_eq!(m_stages(1_000_000_000, 49_152, 10), 10);
    }

    #[test]
    fn token_packet_round_trip_various_bpi() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for bpi in [1u8, 3, 8, 10, 13] {
            let cells = rng.gen_range(1..200usize);
            let indices: Vec<u32> = (0..cells).map(|_| rng.gen_range(0..(1u32 << bpi))).collect();
            let packet = TokenPacket {
                image_id: 77,
                stage: 2,
                bpi,
                indices: indices.clone(),
            };
            let wire = packet.to_bytes();
            assert_eq!(wire.len() as u64 * 8, packet.wire_bits());
            let back = TokenPacket::from_bytes(&wire).unwrap();
            assert_eq!(back, packet);
        }
        assert!(TokenPacket::from_bytes(&[0x55; 12]).is_err());
    }

    #[test]
    fn codec_stage_prefixes_refine_statistically() {
        let corpus: Vec<ImageBuffer> = (0..3).map(|i| generate_image(80 + i, 32, 32)).collect();
        let raw = RvqCodec::embed_corpus(&corpus, 8, None);
        let projector = fit_projector(&raw, 4).unwrap();
        let embedded = RvqCodec::embed_corpus(&corpus, 8, Some(&projector));
        let stack = train_residual_stack(&embedded, 6, 8, 9).unwrap();
        let codec = RvqCodec {
            patch: 8,
            projector: Some(projector),
            stack,
        };
        let img = &corpus[0];
        let tokens = codec.encode_image(img);
        assert_eq!(tokens.stages.len(), 6);
        let mut prev = f64::INFINITY;
        let mut non_increasing = 0;
        for m in 1..=6 {
            let planes = codec.decode_prefix_f64(&tokens, m, 32, 32).unwrap();
            let mse = crate::metrics::mse_f64(img, &planes).unwrap();
            if mse <= prev + 1e-9 {
                non_increasing += 1;
            }
            prev = mse;
        }
        assert!(non_increasing >= 5, "only {non_increasing}/6 stages refined");
    }

    #[test]
    fn held_out_patches_mostly_refine_per_stage() {
        // No forced zero codeword, so per-patch monotonicity is statistical:
        // at least 95% of stage transitions must not increase the error.
        let corpus: Vec<ImageBuffer> = (0..4).map(|i| generate_image(200 + i, 48, 48)).collect();
        let held_out = generate_image(300, 48, 48);
        let raw = RvqCodec::embed_corpus(&corpus, 8, None);
        let projector = fit_projector(&raw, 4).unwrap();
        let embedded = RvqCodec::embed_corpus(&corpus, 8, Some(&projector));
        let stack = train_residual_stack(&embedded, 6, 6, 31).unwrap();

        let grid = extract_patches(&held_out, 8);
        let mut transitions = 0usize;
        let mut monotone = 0usize;
        for v in &grid.vectors {
            let z = projector.project(v);
            let indices = rq_encode(&z, &stack, 6);
            let mut prev = z.iter().map(|x| x * x).sum::<f64>();
            for m in 1..=6 {
                let recon = rq_decode(&indices[..m], &stack).unwrap();
                let err: f64 = recon
                    .iter()
                    .zip(z.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                transitions += 1;
                if err <= prev + 1e-9 {
                    monotone += 1;
                }
                prev = err;
            }
        }
        assert!(
            monotone as f64 >= 0.95 * transitions as f64,
            "{monotone}/{transitions} patch transitions monotone"
        );
    }

    #[test]
    fn codebook_file_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let corpus: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let stack = train_residual_stack(&corpus, 3, 5, 21).unwrap();
        let path = dir.path().join("stack.rvq1");
        write_codebook_file(&path, CodebookKind::Stack, &stack.stages).unwrap();
        let (kind, stages) = read_codebook_file(&path).unwrap();
        assert_eq!(kind, CodebookKind::Stack);
        assert_eq!(stages, stack.stages);

        let path2 = dir.path().join("stack2.rvq1");
        write_codebook_file(&path2, CodebookKind::Stack, &stack.stages).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        assert!(read_codebook_file(&dir.path().join("missing.rvq1")).is_err());
    }
}
