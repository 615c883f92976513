//! How well a learned region assignment matches a reference partition.
//!
//! Region ids carry no meaning — a layer that swaps region 0 and region 1
//! computes the same function — so raw per-pixel equality is useless.
//! Instead, the two partitions are compared under the best one-to-one
//! relabeling: build the contingency table, find the matching that
//! maximizes the co-assigned count (Hungarian algorithm), and report the
//! matched fraction. A permutation null (spatially shuffling the learned
//! map) calibrates what score unrelated partitions of the same shape reach.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::GuidedMask;
use crate::error::{Error, Result};
use crate::generator::pool_window;

/// Maximum-weight perfect matching on a square matrix. Returns, for each
/// row, the column it is assigned to, plus the total weight. O(n^3).
pub fn hungarian_max(weights: &[Vec<u64>]) -> Result<(Vec<usize>, u64)> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::Shape("cannot match an empty matrix".into()));
    }
    for row in weights {
        if row.len() != n {
            return Err(Error::Shape(format!(
                "matching needs a square matrix, got a row of {} in an {n}x{n} problem",
                row.len()
            )));
        }
    }
    let top = weights.iter().flatten().copied().max().unwrap_or(0);
    if top > (i64::MAX / 4) as u64 {
        return Err(Error::Size(format!("matrix entries up to {top} would overflow the potentials")));
    }
    // Minimize complement cost with the classic potential/augmenting-path
    // scheme (1-based arrays, column 0 is the virtual start).
    let cost = |i: usize, j: usize| (top - weights[i][j]) as i64;
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| weights[i][assign[i]]).sum();
    Ok((assign, total))
}

/// Fraction of positions where two partitions of the same index set agree
/// under the best one-to-one relabeling of their region ids.
pub fn partition_agreement(learned: &[usize], truth: &[usize]) -> Result<f64> {
    if learned.is_empty() || learned.len() != truth.len() {
        return Err(Error::Shape(format!(
            "partitions must be non-empty and equally sized, got {} and {}",
            learned.len(),
            truth.len()
        )));
    }
    let m1 = learned.iter().max().unwrap() + 1;
    let m2 = truth.iter().max().unwrap() + 1;
    let side = m1.max(m2);
    let mut table = vec![vec![0u64; side]; side];
    for (&a, &b) in learned.iter().zip(truth) {
        table[a][b] += 1;
    }
    let (_, total) = hungarian_max(&table)?;
    Ok(total as f64 / learned.len() as f64)
}

/// Shrink a per-pixel id map to `oh x ow` by majority vote over the same
/// block windows adaptive pooling uses (ties go to the smallest id).
pub fn downsample_majority(ids: &[usize], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<usize>> {
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::Size("majority downsampling needs all dimensions >= 1".into()));
    }
    if ids.len() != h * w {
        return Err(Error::Shape(format!("id map holds {} entries, grid wants {}", ids.len(), h * w)));
    }
    let mut out = Vec::with_capacity(oh * ow);
    for bu in 0..oh {
        let (u0, u1) = pool_window(h, oh, bu);
        for bv in 0..ow {
            let (v0, v1) = pool_window(w, ow, bv);
            let mut counts: Vec<(usize, usize)> = Vec::new();
            for u in u0..u1 {
                for v in v0..v1 {
                    let id = ids[u * w + v];
                    match counts.iter_mut().find(|(i, _)| *i == id) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((id, 1)),
                    }
                }
            }
            let mut best = counts[0];
            for &(id, c) in &counts[1..] {
                if c > best.1 || (c == best.1 && id < best.0) {
                    best = (id, c);
                }
            }
            out.push(best.0);
        }
    }
    Ok(out)
}

/// Mean per-image agreement between a learned mask and a reference
/// partition. When the grids differ (strides, pooling), the reference is
/// first shrunk to the mask's grid by block majority.
pub fn mask_agreement(mask: &GuidedMask, truth: &GuidedMask) -> Result<f64> {
    if mask.n != truth.n {
        return Err(Error::Shape(format!(
            "mask covers {} images, reference covers {}",
            mask.n, truth.n
        )));
    }
    let (mh, mw) = (mask.h, mask.w);
    let mut sum = 0.0;
    for i in 0..mask.n {
        let learned = &mask.indices()[i * mh * mw..(i + 1) * mh * mw];
        let t = &truth.indices()[i * truth.h * truth.w..(i + 1) * truth.h * truth.w];
        let reduced;
        let t: &[usize] = if (truth.h, truth.w) == (mh, mw) {
            t
        } else {
            reduced = downsample_majority(t, truth.h, truth.w, mh, mw)?;
            &reduced
        };
        sum += partition_agreement(learned, t)?;
    }
    Ok(sum / mask.n as f64)
}

/// Agreement score next to its chance calibration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgreementReport {
    /// Mean per-image matched fraction of the real mask.
    pub mean: f64,
    /// 95th percentile of the same score after spatially shuffling the
    /// learned map within each image.
    pub null_p95: f64,
    /// How many shuffled replicates the null used.
    pub permutations: usize,
}

impl AgreementReport {
    /// True when the real score clears the chance band.
    pub fn beats_chance(&self) -> bool {
        self.mean > self.null_p95
    }
}

/// Score the real mask and calibrate it against `permutations` spatially
/// shuffled copies (reproducible in `seed`).
pub fn agreement_with_null(
    mask: &GuidedMask,
    truth: &GuidedMask,
    permutations: usize,
    seed: u64,
) -> Result<AgreementReport> {
    if permutations == 0 {
        return Err(Error::Config("the null needs at least one permutation".into()));
    }
    let mean = mask_agreement(mask, truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(permutations);
    let per_image = mask.h * mask.w;
    for _ in 0..permutations {
        let mut ids = mask.indices().to_vec();
        for i in 0..mask.n {
            ids[i * per_image..(i + 1) * per_image].shuffle(&mut rng);
        }
        let shuffled = GuidedMask::new(mask.n, mask.h, mask.w, ids)?;
        scores.push(mask_agreement(&shuffled, truth)?);
    }
    scores.sort_by(|a, b| a.partial_cmp(b).expect("agreement scores are finite"));
    let idx = ((permutations as f64 * 0.95).ceil() as usize).clamp(1, permutations) - 1;
    Ok(AgreementReport { mean, null_p95: scores[idx], permutations })
}
