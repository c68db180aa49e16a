//! Evaluation metrics: per-joint position errors, Procrustes-aligned error,
//! keypoint accuracy, structural-consistency measures, and rank-correlation
//! statistics for energy analysis.
//!
//! Positional metrics are millimeters; structural metrics are unitless
//! percentages. All per-dataset numbers are computed per sample and then
//! averaged over samples.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::pose::Pose3D;
use crate::skeleton::SkeletonSpec;

/// Mean per-joint euclidean distance between two root-relative poses.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check_shapes(pred, gt)?;
    let j = pred.joints() as f64;
    Ok(pred
        .0
        .iter()
        .zip(&gt.0)
        .map(|(a, b)| dist3(a, b))
        .sum::<f64>()
        / j)
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_shapes(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.joints() != gt.joints() {
        return Err(Error::Contract(format!(
            "pose joint counts differ: {} vs {}",
            pred.joints(),
            gt.joints()
        )));
    }
    if pred.joints() == 0 {
        return Err(Error::Contract("poses must have at least one joint".into()));
    }
    Ok(())
}

/// The optimal similarity transform (scale, orthogonal matrix, translation)
/// aligning `pred` to `gt` in the least-squares sense.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: [f64; 3],
}

/// MPJPE after the optimal similarity alignment of `pred` onto `gt`.
///
/// Reflections are allowed by default (full orthogonal alignment); pass
/// `proper_rotation = true` to restrict to rotations.
pub fn p_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    p_mpjpe_mode(pred, gt, false)
}

pub fn p_mpjpe_mode(pred: &Pose3D, gt: &Pose3D, proper_rotation: bool) -> Result<f64> {
    let a = procrustes_align(pred, gt, proper_rotation)?;
    let aligned = apply_alignment(&a, pred);
    mpjpe(&aligned, gt)
}

pub fn apply_alignment(a: &Alignment, pose: &Pose3D) -> Pose3D {
    Pose3D(
        pose.0
            .iter()
            .map(|p| {
                let v = a.rotation * nalgebra::Vector3::new(p[0], p[1], p[2]) * a.scale;
                [v[0] + a.translation[0], v[1] + a.translation[1], v[2] + a.translation[2]]
            })
            .collect(),
    )
}

/// Least-squares similarity alignment via SVD of the centered
/// cross-covariance.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D, proper_rotation: bool) -> Result<Alignment> {
    check_shapes(pred, gt)?;
    let n = pred.joints() as f64;
    let centroid = |p: &Pose3D| {
        let mut c = [0.0f64; 3];
        for q in &p.0 {
            for k in 0..3 {
                c[k] += q[k];
            }
        }
        [c[0] / n, c[1] / n, c[2] / n]
    };
    let mu_p = centroid(pred);
    let mu_g = centroid(gt);
    let mut h = Matrix3::<f64>::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.0.iter().zip(&gt.0) {
        let pc = [p[0] - mu_p[0], p[1] - mu_p[1], p[2] - mu_p[2]];
        let gc = [g[0] - mu_g[0], g[1] - mu_g[1], g[2] - mu_g[2]];
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += gc[r] * pc[c];
            }
        }
        var_p += pc[0] * pc[0] + pc[1] * pc[1] + pc[2] * pc[2];
    }
    if var_p <= 1e-18 {
        return Err(Error::Numeric("degenerate pose: all predicted joints coincide".into()));
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numeric("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Numeric("svd failed".into()))?;
    let mut sign = 1.0;
    if proper_rotation && (u * vt).determinant() < 0.0 {
        sign = -1.0;
    }
    let mut d = Matrix3::<f64>::identity();
    d[(2, 2)] = sign;
    let rotation = u * d * vt;
    let trace = svd.singular_values[0] + svd.singular_values[1] + sign * svd.singular_values[2];
    let scale = trace / var_p;
    let rp = rotation * nalgebra::Vector3::new(mu_p[0], mu_p[1], mu_p[2]) * scale;
    let translation = [mu_g[0] - rp[0], mu_g[1] - rp[1], mu_g[2] - rp[2]];
    Ok(Alignment { scale, rotation, translation })
}

/// Percentage of joints within `threshold_mm` of the ground truth
/// (inclusive boundary).
pub fn pck(pred: &Pose3D, gt: &Pose3D, threshold_mm: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    if threshold_mm < 0.0 {
        return Err(Error::Contract("pck threshold must be non-negative".into()));
    }
    let j = pred.joints() as f64;
    let ok = pred.0.iter().zip(&gt.0).filter(|(a, b)| dist3(a, b) <= threshold_mm).count();
    Ok(100.0 * ok as f64 / j)
}

/// Thresholds used for AUC: 0, 5, ..., 150 millimeters (31 values).
pub fn auc_thresholds() -> Vec<f64> {
    (0..=30).map(|k| 5.0 * k as f64).collect()
}

/// Mean PCK over the 0-150 mm threshold sweep.
pub fn auc(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let ts = auc_thresholds();
    let mut acc = 0.0;
    for &t in &ts {
        acc += pck(pred, gt, t)?;
    }
    Ok(acc / ts.len() as f64)
}

/// Limb symmetry error: mean over symmetry pairs of the normalized
/// left/right segment-length discrepancy, as a percentage. Requires no
/// ground truth; invariant to rotation, translation and uniform scale.
pub fn lse(pose: &Pose3D, spec: &SkeletonSpec) -> Result<f64> {
    if spec.symmetry_pairs.is_empty() {
        return Err(Error::Contract("skeleton has no symmetry pairs".into()));
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    for &(l, r) in &spec.symmetry_pairs {
        let ll = pose.segment_length(spec.edges[l]);
        let rl = pose.segment_length(spec.edges[r]);
        let denom = (ll + rl) / 2.0;
        if denom < 1e-9 {
            // both segments collapsed; skip the pair
            continue;
        }
        acc += 100.0 * ((ll - rl) / denom).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Numeric("all symmetry pairs degenerate".into()));
    }
    Ok(acc / used as f64)
}

/// Body segment length error over a segment subset: mean of
/// `100 * |1 - len_pred / len_gt|`.
pub fn bsle(pred: &Pose3D, gt: &Pose3D, spec: &SkeletonSpec, segments: &[usize]) -> Result<f64> {
    check_shapes(pred, gt)?;
    if segments.is_empty() {
        return Err(Error::Contract("segment subset must be nonempty".into()));
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    for &s in segments {
        if s >= spec.edges.len() {
            return Err(Error::Contract(format!("segment index {s} out of bounds")));
        }
        let lp = pred.segment_length(spec.edges[s]);
        let lg = gt.segment_length(spec.edges[s]);
        if lg < 1e-9 {
            // degenerate ground-truth segment; skip
            continue;
        }
        acc += 100.0 * (1.0 - lp / lg).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Numeric("all ground-truth segments degenerate".into()));
    }
    Ok(acc / used as f64)
}

/// BSLE over all segments.
pub fn bsle_all(pred: &Pose3D, gt: &Pose3D, spec: &SkeletonSpec) -> Result<f64> {
    let all: Vec<usize> = (0..spec.edges.len()).collect();
    bsle(pred, gt, spec, &all)
}

/// Limb length error: BSLE restricted to the skeleton's limb segments.
pub fn lle(pred: &Pose3D, gt: &Pose3D, spec: &SkeletonSpec) -> Result<f64> {
    bsle(pred, gt, spec, &spec.limb_segments)
}

// ── rank statistics ──────────────────────────────────────────────────

/// Pair classification counts between two equally long value lists.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    /// Pairs tied in `a` only.
    pub ties_a: u64,
    /// Pairs tied in `b` only.
    pub ties_b: u64,
    /// Pairs tied in both.
    pub ties_both: u64,
}

impl PairCounts {
    pub fn total(&self) -> u64 {
        self.concordant + self.discordant + self.ties_a + self.ties_b + self.ties_both
    }
}

/// Classify every pair by merge-sort inversion counting: O(n log n).
pub fn pair_counts(a: &[f64], b: &[f64]) -> Result<PairCounts> {
    if a.len() != b.len() {
        return Err(Error::Contract("rank lists must have equal length".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract("rank correlation needs at least two values".into()));
    }
    let n0 = (n as u64) * (n as u64 - 1) / 2;

    // sort indices by (a, b)
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        a[i].partial_cmp(&a[j]).unwrap().then(b[i].partial_cmp(&b[j]).unwrap())
    });

    let tie_pairs = |vals: &[f64]| -> u64 {
        let mut sorted: Vec<f64> = vals.to_vec();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut total = 0u64;
        let mut run = 1u64;
        for i in 1..sorted.len() {
            if sorted[i] == sorted[i - 1] {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let t_a = tie_pairs(a);
    let t_b = tie_pairs(b);

    // joint ties: pairs equal in both a and b
    let mut t_ab = 0u64;
    let mut run = 1u64;
    for w in 1..n {
        if a[idx[w]] == a[idx[w - 1]] && b[idx[w]] == b[idx[w - 1]] {
            run += 1;
        } else {
            t_ab += run * (run - 1) / 2;
            run = 1;
        }
    }
    t_ab += run * (run - 1) / 2;

    // discordant pairs = inversions of b in a-order, counting strict
    // b-decreases among strict a-increases; merge sort over b values in
    // a-sorted order counts pairs with b[i] > b[j] for i before j.
    let mut bs: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let inversions = count_inversions(&mut bs);
    // pairs tied in a were sorted by b, contributing no inversions, so
    // every counted inversion has a_i strictly < a_j and b_i > b_j.
    let discordant = inversions;
    let concordant = n0 - (t_a + t_b - t_ab) - discordant;

    Ok(PairCounts {
        concordant,
        discordant,
        ties_a: t_a - t_ab,
        ties_b: t_b - t_ab,
        ties_both: t_ab,
    })
}

fn count_inversions(vals: &mut [f64]) -> u64 {
    let n = vals.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = vals.split_at_mut(mid);
    let mut inv = count_inversions(left) + count_inversions(right);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    while i < left.len() && j < right.len() {
        if left[i] <= right[j] {
            merged.push(left[i]);
            i += 1;
        } else {
            inv += (left.len() - i) as u64;
            merged.push(right[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&left[i..]);
    merged.extend_from_slice(&right[j..]);
    vals.copy_from_slice(&merged);
    inv
}

/// Tie-adjusted Kendall rank correlation (tau-b).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    let c = pair_counts(a, b)?;
    let n = a.len() as u64;
    let n0 = n * (n - 1) / 2;
    let t_a = c.ties_a + c.ties_both;
    let t_b = c.ties_b + c.ties_both;
    let denom = (((n0 - t_a) as f64) * ((n0 - t_b) as f64)).sqrt();
    if denom == 0.0 {
        return Err(Error::Numeric("kendall tau undefined: a list is constant".into()));
    }
    Ok((c.concordant as f64 - c.discordant as f64) / denom)
}

/// Percentage of concordant pairs among non-tied pairs.
pub fn ordering_accuracy(a: &[f64], b: &[f64]) -> Result<f64> {
    let c = pair_counts(a, b)?;
    let comparable = c.concordant + c.discordant;
    if comparable == 0 {
        return Err(Error::Numeric("ordering accuracy undefined: all pairs tied".into()));
    }
    Ok(100.0 * c.concordant as f64 / comparable as f64)
}

// ── aggregate reports ────────────────────────────────────────────────

/// Full metric suite over a prediction set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
    pub lse: f64,
    pub bsle: f64,
    pub lle: f64,
    pub n_samples: usize,
}

pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// Per-sample metrics averaged over samples.
pub fn evaluate(preds: &[Pose3D], gts: &[Pose3D], spec: &SkeletonSpec) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Contract("prediction and ground-truth counts differ".into()));
    }
    if preds.is_empty() {
        return Err(Error::Contract("cannot evaluate zero samples".into()));
    }
    let n = preds.len() as f64;
    let mut acc = [0.0f64; 7];
    for (p, g) in preds.iter().zip(gts) {
        acc[0] += mpjpe(p, g)?;
        acc[1] += p_mpjpe(p, g)?;
        acc[2] += pck(p, g, PCK_THRESHOLD_MM)?;
        acc[3] += auc(p, g)?;
        acc[4] += lse(p, spec)?;
        acc[5] += bsle_all(p, g, spec)?;
        acc[6] += lle(p, g, spec)?;
    }
    Ok(MetricsReport {
        mpjpe: acc[0] / n,
        p_mpjpe: acc[1] / n,
        pck: acc[2] / n,
        auc: acc[3] / n,
        lse: acc[4] / n,
        bsle: acc[5] / n,
        lle: acc[6] / n,
        n_samples: preds.len(),
    })
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "mpjpe,p_mpjpe,pck,auc,lse,bsle,lle,n_samples"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            self.mpjpe, self.p_mpjpe, self.pck, self.auc, self.lse, self.bsle, self.lle,
            self.n_samples
        )
    }

    pub fn text_block(&self) -> String {
        format!(
            "samples      {}\nMPJPE   (mm) {:.4}\nP-MPJPE (mm) {:.4}\nPCK@150 (%)  {:.4}\nAUC     (%)  {:.4}\nLSE     (%)  {:.4}\nBSLE    (%)  {:.4}\nLLE     (%)  {:.4}\n",
            self.n_samples, self.mpjpe, self.p_mpjpe, self.pck, self.auc, self.lse, self.bsle,
            self.lle
        )
    }
}

/// Structural metrics binned by P-MPJPE for two labeled systems over the
/// same ground truth.
#[derive(Clone, Debug)]
pub struct BinnedStructureReport {
    pub edges: Vec<f64>,
    pub systems: [String; 2],
    pub bins: Vec<[BinStats; 2]>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BinStats {
    pub count: usize,
    pub lse: Option<f64>,
    pub bsle: Option<f64>,
    pub lle: Option<f64>,
}

/// Shared quantile bins over the pooled P-MPJPE values of both systems;
/// per-bin mean LSE/BSLE/LLE for each system.
pub fn binned_structure_report(
    preds_a: &[Pose3D],
    preds_b: &[Pose3D],
    gts: &[Pose3D],
    spec: &SkeletonSpec,
    n_bins: usize,
    labels: [&str; 2],
) -> Result<BinnedStructureReport> {
    if preds_a.len() != gts.len() || preds_b.len() != gts.len() {
        return Err(Error::Contract("system predictions must align with ground truth".into()));
    }
    if n_bins == 0 {
        return Err(Error::Contract("need at least one bin".into()));
    }
    let per_system = |preds: &[Pose3D]| -> Result<Vec<(f64, f64, f64, f64)>> {
        preds
            .iter()
            .zip(gts)
            .map(|(p, g)| {
                Ok((p_mpjpe(p, g)?, lse(p, spec)?, bsle_all(p, g, spec)?, lle(p, g, spec)?))
            })
            .collect()
    };
    let sys_a = per_system(preds_a)?;
    let sys_b = per_system(preds_b)?;

    let mut pooled: Vec<f64> = sys_a.iter().chain(&sys_b).map(|r| r.0).collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut edges = Vec::with_capacity(n_bins + 1);
    for k in 0..=n_bins {
        let q = k as f64 / n_bins as f64;
        let pos = q * (pooled.len() - 1) as f64;
        edges.push(pooled[pos.round() as usize]);
    }
    // force strictly covering edges at the extremes
    edges[0] = pooled[0];
    edges[n_bins] = pooled[pooled.len() - 1];

    let bin_of = |v: f64| -> usize {
        for k in 0..n_bins {
            if v < edges[k + 1] || (k == n_bins - 1 && v <= edges[n_bins]) {
                return k;
            }
        }
        n_bins - 1
    };

    let mut bins = vec![[BinStats::default(); 2]; n_bins];
    let mut sums = vec![[[0.0f64; 3]; 2]; n_bins];
    for (which, rows) in [(0usize, &sys_a), (1usize, &sys_b)] {
        for &(pm, l, bs, ll) in rows.iter() {
            let k = bin_of(pm);
            bins[k][which].count += 1;
            sums[k][which][0] += l;
            sums[k][which][1] += bs;
            sums[k][which][2] += ll;
        }
    }
    for k in 0..n_bins {
        for w in 0..2 {
            let c = bins[k][w].count;
            if c > 0 {
                bins[k][w].lse = Some(sums[k][w][0] / c as f64);
                bins[k][w].bsle = Some(sums[k][w][1] / c as f64);
                bins[k][w].lle = Some(sums[k][w][2] / c as f64);
            }
        }
    }
    Ok(BinnedStructureReport {
        edges,
        systems: [labels[0].to_string(), labels[1].to_string()],
        bins,
    })
}

impl BinnedStructureReport {
    pub fn csv_header() -> &'static str {
        "bin_low,bin_high,system,count,lse,bsle,lle"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let mut rows = Vec::new();
        for (k, pair) in self.bins.iter().enumerate() {
            for (w, stats) in pair.iter().enumerate() {
                rows.push(format!(
                    "{:.16e},{:.16e},{},{},{},{},{}",
                    self.edges[k],
                    self.edges[k + 1],
                    self.systems[w],
                    stats.count,
                    fmt(stats.lse),
                    fmt(stats.bsle),
                    fmt(stats.lle),
                ));
            }
        }
        rows
    }
}
