//! Evaluation statistics: squared MMD with a Gaussian kernel and
//! median-heuristic bandwidth, the classical two-sample 1D KS statistic,
//! and mode-coverage counting for the eight-Gaussian mixture.
//!
//! Pairwise kernel sums run over full matrices in fixed index order with
//! compensated summation: per-point-row plain sums are combined row-by-row
//! (and block-by-block) with Kahan compensation, so results are independent
//! of the worker-thread count. All three MMD terms share one code path,
//! which makes `mmd2(a, a, ...)` exactly zero.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::targets::eight_gaussian_centers_scaled;
use crate::tensor::Tensor;

/// Compensated (Kahan) accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// `exp(x)` for `x <= 0`, via Cody-Waite range reduction and a degree-12
/// Taylor kernel (relative error a few ulp against libm). Fully branchless —
/// the rounded exponent comes out of the mantissa bits of a magic-constant
/// add and 2^n is assembled with integer ops — so the pairwise kernel loops
/// autovectorize. Returns 0 below the normal range instead of subnormals.
#[inline]
fn exp_neg(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let zm = x * LOG2E + MAGIC; // round-to-even lands in the mantissa
    let n = zm - MAGIC;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (1.0 / 2.0
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362880.0
                                            + r * (1.0 / 3628800.0
                                                + r * (1.0 / 39916800.0
                                                    + r * (1.0 / 479001600.0))))))))))));
    let scale = f64::from_bits((zm.to_bits().wrapping_add(1023) & 0x7ff) << 52);
    let y = p * scale;
    if x < -708.0 {
        0.0
    } else {
        y
    }
}

/// Reduction over a kernel row: eight fixed interleaved strands combined in
/// a fixed tree, then the remainder left-to-right. Machine- and
/// thread-independent because the strand assignment never changes.
#[inline]
fn striped_sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let mut tail = 0.0f64;
    for &v in rem {
        tail += v;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Column-major copy of (n, d) points, one contiguous slice per coordinate,
/// which keeps the pairwise inner loops on unit-stride loads.
fn to_columns(data: &[f64], n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::with_capacity(n); d];
    for row in data.chunks_exact(d) {
        for (c, &v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    cols
}

#[inline]
fn fill_kernel_row(scratch: &mut [f64], arow: &[f64], bcols: &[Vec<f64>], skip: usize, coef: f64) {
    match bcols {
        [bx] => {
            let ax = arow[0];
            for (s, x) in scratch.iter_mut().zip(&bx[skip..]) {
                let dx = ax - x;
                *s = exp_neg(coef * (dx * dx));
            }
        }
        [bx, by] => {
            let (ax, ay) = (arow[0], arow[1]);
            for ((s, x), y) in scratch.iter_mut().zip(&bx[skip..]).zip(&by[skip..]) {
                let dx = ax - x;
                let dy = ay - y;
                *s = exp_neg(coef * (dx * dx + dy * dy));
            }
        }
        _ => {
            for (j, s) in scratch.iter_mut().enumerate() {
                let mut d2 = 0.0;
                for (ak, col) in arow.iter().zip(bcols) {
                    let diff = ak - col[skip + j];
                    d2 += diff * diff;
                }
                *s = exp_neg(coef * d2);
            }
        }
    }
}

/// Run `block_sum` over fixed 256-row blocks, combining block partials in
/// block order with Kahan compensation. `threads` only distributes blocks
/// over workers; the partition and combination order never change.
fn blocked_rows_sum(n: usize, threads: usize, block_sum: &(dyn Fn(usize, usize) -> f64 + Sync)) -> f64 {
    const BLOCK_ROWS: usize = 256;
    let n_blocks = n.div_ceil(BLOCK_ROWS);
    let mut partials = vec![0.0f64; n_blocks];
    if threads <= 1 || n_blocks <= 1 {
        for (bi, slot) in partials.iter_mut().enumerate() {
            let start = bi * BLOCK_ROWS;
            *slot = block_sum(start, (start + BLOCK_ROWS).min(n));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<f64>> =
            (0..n_blocks).map(|_| std::sync::Mutex::new(0.0)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(n_blocks) {
                scope.spawn(|| loop {
                    let bi = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if bi >= n_blocks {
                        break;
                    }
                    let start = bi * BLOCK_ROWS;
                    let v = block_sum(start, (start + BLOCK_ROWS).min(n));
                    *slots[bi].lock().expect("partial slot") = v;
                });
            }
        });
        for (slot, p) in partials.iter_mut().zip(&slots) {
            *slot = *p.lock().expect("partial slot");
        }
    }
    let mut total = KahanSum::default();
    for &p in &partials {
        total.add(p);
    }
    total.value()
}

/// Sum over all (i, j) of `exp(-||a_i - b_j||^2 / (2 sigma^2))`.
///
/// Per row, kernel values fill a scratch buffer and reduce with
/// [`striped_sum`]; rows combine block-by-block with Kahan compensation.
/// Content-identical inputs take a shared symmetric path (diagonal is
/// exactly `n`, off-diagonal twice the upper triangle), so all three MMD
/// terms agree bitwise when the two sets coincide.
fn gaussian_kernel_sum(a: &Tensor, b: &Tensor, sigma: f64, threads: usize) -> f64 {
    let d = a.shape()[1];
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let coef = -1.0 / (2.0 * sigma * sigma);
    let adata = a.data();
    let bdata = b.data();

    // Rows reduce in fixed 8192-column chunks (the scratch stays cache
    // resident); chunk sums combine into the row, rows into their block, and
    // blocks into the total, all with Kahan compensation in fixed order.
    const CHUNK: usize = 8192;
    let row_sum = |scratch: &mut [f64], arow: &[f64], bcols: &[Vec<f64>], skip: usize| -> f64 {
        let len = m - skip;
        let mut row = KahanSum::default();
        let mut done = 0usize;
        while done < len {
            let take = CHUNK.min(len - done);
            let part = &mut scratch[..take];
            fill_kernel_row(part, arow, bcols, skip + done, coef);
            row.add(striped_sum(part));
            done += take;
        }
        row.value()
    };

    let bcols = to_columns(bdata, m, d);
    let symmetric = n == m && (std::ptr::eq(adata, bdata) || adata == bdata);
    if symmetric {
        let upper = blocked_rows_sum(n, threads, &|start, end| {
            let mut block = KahanSum::default();
            let mut scratch = vec![0.0f64; CHUNK];
            for i in start..end {
                let arow = &adata[i * d..(i + 1) * d];
                block.add(row_sum(&mut scratch, arow, &bcols, i + 1));
            }
            block.value()
        });
        return 2.0 * upper + n as f64;
    }

    blocked_rows_sum(n, threads, &|start, end| {
        let mut block = KahanSum::default();
        let mut scratch = vec![0.0f64; CHUNK];
        for i in start..end {
            let arow = &adata[i * d..(i + 1) * d];
            block.add(row_sum(&mut scratch, arow, &bcols, 0));
        }
        block.value()
    })
}

#[derive(Clone, Copy, Debug)]
pub struct MmdReport {
    pub mmd2: f64,
    pub bandwidth: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Biased (V-statistic) squared MMD with kernel
/// `k(x, y) = exp(-||x - y||^2 / (2 sigma^2))`.
pub fn mmd2(a: &Tensor, b: &Tensor, bandwidth: f64, threads: usize) -> Result<MmdReport> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "mmd2".to_string(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (n, m) = (a.shape()[0], b.shape()[0]);
    if n == 0 || m == 0 {
        return Err(Error::EmptyBatch("mmd2".to_string()));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mmd2 bandwidth must be positive and finite, got {bandwidth}"
        )));
    }
    let saa = gaussian_kernel_sum(a, a, bandwidth, threads);
    let sbb = gaussian_kernel_sum(b, b, bandwidth, threads);
    let sab = gaussian_kernel_sum(a, b, bandwidth, threads);
    let (nf, mf) = (n as f64, m as f64);
    let mmd2 = saa / (nf * nf) + sbb / (mf * mf) - 2.0 * sab / (nf * mf);
    Ok(MmdReport {
        mmd2,
        bandwidth,
        n_a: n,
        n_b: m,
    })
}

/// How many points the median heuristic uses at most; larger sets are
/// subsampled with a fixed seed.
pub const BANDWIDTH_SUBSAMPLE: usize = 16384;
const BANDWIDTH_SUBSAMPLE_SEED: u64 = 0x4b53_474e;

/// Exact lower-median of all pairwise Euclidean distances (on a seeded
/// 16384-point subsample when the set is larger).
pub fn median_heuristic_bandwidth(points: &Tensor) -> Result<f64> {
    if points.shape().len() != 2 {
        return Err(Error::InvalidShape(format!(
            "median heuristic expects (n, d) points, got {:?}",
            points.shape()
        )));
    }
    let (n, d) = (points.shape()[0], points.shape()[1]);
    if n < 2 {
        return Err(Error::InvalidArgument(
            "median heuristic requires at least 2 points".to_string(),
        ));
    }
    let data = points.data();
    let flat: Vec<f64> = if n > BANDWIDTH_SUBSAMPLE {
        let mut rng = RngState::seed_from_u64(BANDWIDTH_SUBSAMPLE_SEED);
        let mut idx: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first BANDWIDTH_SUBSAMPLE entries become
        // a uniform sample without replacement.
        for i in 0..BANDWIDTH_SUBSAMPLE {
            let j = i + rng.index(n - i);
            idx.swap(i, j);
        }
        idx[..BANDWIDTH_SUBSAMPLE]
            .iter()
            .flat_map(|&i| data[i * d..(i + 1) * d].iter().copied())
            .collect()
    } else {
        data.to_vec()
    };

    let k = flat.len() / d;
    let cols = to_columns(&flat, k, d);
    let pairs = k * (k - 1) / 2;
    // Lower median; sqrt commutes with the order statistic, so select on
    // squared distances and take the root at the end.
    let med_sq = select_pairwise_sq_rank(&cols, (pairs - 1) / 2);
    let bandwidth = med_sq.sqrt();
    if bandwidth == 0.0 {
        return Err(Error::InvalidArgument(
            "degenerate kernel: median pairwise distance is 0".to_string(),
        ));
    }
    Ok(bandwidth)
}

/// Visit every pairwise squared distance (upper triangle, row-major order).
#[inline]
fn for_each_pairwise_sq(cols: &[Vec<f64>], mut f: impl FnMut(f64)) {
    let k = cols[0].len();
    if let [xs, ys] = cols {
        for i in 0..k {
            let (ax, ay) = (xs[i], ys[i]);
            for (x, y) in xs[i + 1..].iter().zip(&ys[i + 1..]) {
                let dx = ax - x;
                let dy = ay - y;
                f(dx * dx + dy * dy);
            }
        }
    } else {
        for i in 0..k {
            for j in (i + 1)..k {
                let mut d2 = 0.0;
                for col in cols {
                    let diff = col[i] - col[j];
                    d2 += diff * diff;
                }
                f(d2);
            }
        }
    }
}

/// Exact order statistic of the n(n-1)/2 pairwise squared distances without
/// materializing them: counting passes over value-range buckets narrow the
/// containing interval until its population fits in memory, then an in-core
/// selection finishes. Bucket membership uses plain value comparisons on a
/// shared boundary array, so counts and collection always agree.
fn select_pairwise_sq_rank(cols: &[Vec<f64>], rank: usize) -> f64 {
    const CAP: usize = 1 << 22;
    const B: usize = 4096;

    let total: usize = {
        let k = cols[0].len();
        k * (k - 1) / 2
    };
    if total <= CAP {
        let mut vals = Vec::with_capacity(total);
        for_each_pairwise_sq(cols, |d2| vals.push(d2));
        let (_, v, _) = vals.select_nth_unstable_by(rank, |a, b| a.partial_cmp(b).expect("finite"));
        return *v;
    }

    let mut lo = 0.0f64;
    let mut hi = {
        // Bounding-box upper bound on any squared distance, made exclusive.
        let mut bb = 0.0f64;
        for col in cols {
            let mut mn = f64::INFINITY;
            let mut mx = f64::NEG_INFINITY;
            for &v in col {
                mn = mn.min(v);
                mx = mx.max(v);
            }
            bb += (mx - mn) * (mx - mn);
        }
        bb + 1.0
    };

    loop {
        let width = (hi - lo) / B as f64;
        if !(width > 0.0) {
            // The remaining candidates sit within a few ulp of `lo`.
            return lo;
        }
        let mut bounds = vec![0.0f64; B + 1];
        for (j, b) in bounds.iter_mut().enumerate() {
            *b = lo + j as f64 * width;
        }
        bounds[B] = hi;

        let mut below = 0usize;
        let mut counts = vec![0usize; B];
        let mut bmin = vec![f64::INFINITY; B];
        let mut bmax = vec![f64::NEG_INFINITY; B];
        for_each_pairwise_sq(cols, |d2| {
            if d2 < lo {
                below += 1;
            } else if d2 < hi {
                let mut idx = (((d2 - lo) / width) as usize).min(B - 1);
                while d2 < bounds[idx] {
                    idx -= 1;
                }
                while d2 >= bounds[idx + 1] {
                    idx += 1;
                }
                counts[idx] += 1;
                if d2 < bmin[idx] {
                    bmin[idx] = d2;
                }
                if d2 > bmax[idx] {
                    bmax[idx] = d2;
                }
            }
        });

        let mut cum = below;
        let mut bi = B - 1;
        for (j, &c) in counts.iter().enumerate() {
            if rank < cum + c {
                bi = j;
                break;
            }
            cum += c;
        }

        if bmin[bi] == bmax[bi] {
            return bmin[bi];
        }
        if counts[bi] <= CAP {
            let (blo, bhi) = (bounds[bi], bounds[bi + 1]);
            let mut below2 = 0usize;
            let mut vals = Vec::with_capacity(counts[bi]);
            for_each_pairwise_sq(cols, |d2| {
                if d2 < blo {
                    below2 += 1;
                } else if d2 < bhi {
                    vals.push(d2);
                }
            });
            let idx = rank - below2;
            let (_, v, _) =
                vals.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).expect("finite"));
            return *v;
        }
        // Tighten to the observed value range of the bucket; this guarantees
        // progress even when the mass concentrates on few distinct values.
        lo = bmin[bi];
        hi = next_up(bmax[bi]);
    }
}

fn next_up(x: f64) -> f64 {
    let bits = x.to_bits();
    f64::from_bits(bits + 1)
}

/// Exact two-sample Kolmogorov-Smirnov statistic of 1D samples:
/// sup over x of |ECDF_a(x) - ECDF_b(x)|.
pub fn ks_two_sample_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch("ks_two_sample_1d".to_string()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_unstable_by(|p, q| p.partial_cmp(q).expect("finite"));
    ys.sort_unstable_by(|p, q| p.partial_cmp(q).expect("finite"));
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup = 0.0f64;
    while i < xs.len() || j < ys.len() {
        let v = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < xs.len() && xs[i] == v {
            i += 1;
        }
        while j < ys.len() && ys[j] == v {
            j += 1;
        }
        let gap = (i as f64 / n - j as f64 / m).abs();
        if gap > sup {
            sup = gap;
        }
    }
    Ok(sup)
}

#[derive(Clone, Debug)]
pub struct ModeCoverage {
    pub count: usize,
    pub fractions: [f64; 8],
    pub mean_dists: [f64; 8],
}

/// Assign points to the nearest of the eight scaled mixture centers. A mode
/// counts as covered when its fraction reaches `frac_threshold` and its
/// points sit within 3 noise standard deviations of the center on average.
pub fn mode_coverage_8gaussians(points: &Tensor, frac_threshold: f64) -> Result<ModeCoverage> {
    if points.shape().len() != 2 || points.shape()[1] != 2 {
        return Err(Error::InvalidShape(format!(
            "mode coverage expects (n, 2) points, got {:?}",
            points.shape()
        )));
    }
    let n = points.shape()[0];
    if n == 0 {
        return Err(Error::EmptyBatch("mode_coverage_8gaussians".to_string()));
    }
    let centers = eight_gaussian_centers_scaled();
    let mut counts = [0usize; 8];
    let mut dist_sums = [0.0f64; 8];
    for p in points.rows() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, c) in centers.iter().enumerate() {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        counts[best] += 1;
        dist_sums[best] += best_d;
    }
    let mut fractions = [0.0f64; 8];
    let mut mean_dists = [0.0f64; 8];
    let radius = 3.0 * (0.5 / 1.414);
    let mut covered = 0usize;
    for k in 0..8 {
        fractions[k] = counts[k] as f64 / n as f64;
        mean_dists[k] = if counts[k] > 0 {
            dist_sums[k] / counts[k] as f64
        } else {
            f64::INFINITY
        };
        if fractions[k] >= frac_threshold && mean_dists[k] <= radius {
            covered += 1;
        }
    }
    Ok(ModeCoverage {
        count: covered,
        fractions,
        mean_dists,
    })
}
