//! Training objectives: the lifter's combined loss (supervised error plus a
//! weighted energy term), the energy-shaping losses (margin and NCE), input
//! perturbation negatives, the negative-negative ordering regularizer, and
//! the frame-window pair loss.
//!
//! All pose quantities here are in whatever units the caller trains in; the
//! margin function is the mean per-joint distance in those units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lossnet::LossNet;
use crate::metrics;
use crate::pose::{Pose2D, Pose3D};
use crate::posenet::PoseNet;
use crate::seeds;
use crate::synthdata::{project, CameraModel};
use crate::tape::{NodeRange, Space, Tape, Var};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Margin,
    Nce,
}

/// Which 2D reference the perturbation-negative sort key measures distance
/// from.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum SortReference {
    /// Distance from the (possibly noisy) network input.
    #[default]
    Input,
    /// Distance from the clean ground-truth 2D keypoints.
    CleanInput,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ObjectiveConfig {
    /// Weight of the energy term in the lifter's loss.
    pub alpha: f64,
    pub lossnet_objective: LossKind,
    /// Margin slope of the pair-ordering regularizer.
    pub kappa: f64,
    /// Perturbation negatives per sample.
    pub negatives: usize,
    /// Radius of the L2 ball the 2D perturbations are drawn from
    /// (input units).
    pub r_max: f64,
    /// Frame window width; 1 disables the window term.
    pub window: usize,
    /// Extra random ordered pairs per anchor in the ordering regularizer.
    pub n_random_pairs: usize,
    /// Weight of the frame-window pair term.
    pub pair_weight: f64,
    pub sort_reference: SortReference,
}

impl Default for ObjectiveConfig {
    fn default() -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: 5e-3,
            lossnet_objective: LossKind::Margin,
            kappa: 1.0,
            negatives: 0,
            r_max: 0.02,
            window: 1,
            n_random_pairs: 2,
            pair_weight: 1e-3,
            sort_reference: SortReference::Input,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.kappa < 0.0 || self.r_max < 0.0 || self.pair_weight < 0.0 {
            return Err(Error::Contract("objective weights must be non-negative".into()));
        }
        if self.window < 1 {
            return Err(Error::Contract("window width must be at least 1".into()));
        }
        Ok(())
    }
}

// ── lifter loss ──────────────────────────────────────────────────────

/// Combined lifter loss: per-joint mean-squared error (mean over the three
/// coordinates, summed over joints) plus `alpha` times the energy.
pub fn task_loss(y: &Pose3D, y_pred: &Pose3D, energy: f64, alpha: f64) -> Result<f64> {
    if y.joints() != y_pred.joints() {
        return Err(Error::Contract("pose joint counts differ".into()));
    }
    let mut mse = 0.0;
    for (g, p) in y.0.iter().zip(&y_pred.0) {
        let mut per_joint = 0.0;
        for c in 0..3 {
            per_joint += (g[c] - p[c]) * (g[c] - p[c]);
        }
        mse += per_joint / 3.0;
    }
    Ok(mse + alpha * energy)
}

/// Tape form of [`task_loss`]; the energy term is omitted entirely when
/// `alpha == 0` so baseline runs never touch the energy network.
pub fn task_loss_on_tape(
    tape: &mut Tape,
    y: &Pose3D,
    y_pred: &[Var],
    energy: Option<(Var, f64)>,
) -> Result<Var> {
    if y_pred.len() != 3 * y.joints() {
        return Err(Error::Contract("prediction length does not match ground truth".into()));
    }
    let gt = y.flat();
    let diff_start = tape.next_index();
    for (k, v) in y_pred.iter().enumerate() {
        tape.offset(*v, -gt[k]);
    }
    let diffs = NodeRange { start: diff_start, len: y_pred.len() as u32 };
    let sq_start = tape.next_index();
    for v in diffs.iter() {
        tape.mul(v, v);
    }
    let sq = NodeRange { start: sq_start, len: diffs.len };
    let total = tape.sum_range(sq);
    let mse = tape.scale(total, 1.0 / 3.0);
    Ok(match energy {
        Some((e, alpha)) if alpha != 0.0 => {
            let weighted = tape.scale(e, alpha);
            tape.add(mse, weighted)
        }
        _ => mse,
    })
}

/// The margin function: mean per-joint distance between two poses.
pub fn mpjpe_margin(y: &Pose3D, y_tilde: &Pose3D) -> Result<f64> {
    metrics::mpjpe(y_tilde, y)
}

/// Hinge `[delta - e_neg + e_gt]_+`: pushes the ground-truth energy below
/// the negative's energy by at least the margin.
pub fn margin_loss(e_gt: f64, e_neg: f64, delta: f64) -> f64 {
    (delta - e_neg + e_gt).max(0.0)
}

pub fn margin_loss_on_tape(tape: &mut Tape, e_gt: Var, e_neg: Var, delta: f64) -> Var {
    let gap = tape.sub(e_gt, e_neg);
    let shifted = tape.offset(gap, delta);
    tape.relu(shifted)
}

/// Binary NCE ranking loss `-ln(exp(-e_gt) / (exp(-e_gt) + exp(-e_neg)))`,
/// evaluated in the stable softplus form.
pub fn nce_loss(e_gt: f64, e_neg: f64) -> f64 {
    let z = e_gt - e_neg;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn nce_loss_on_tape(tape: &mut Tape, e_gt: Var, e_neg: Var) -> Var {
    let z = tape.sub(e_gt, e_neg);
    tape.softplus(z)
}

// ── negative sampling ────────────────────────────────────────────────

/// One synthetic negative: the lifted pose of a perturbed input, the
/// perturbed input itself, the 2D-discrepancy sort key, and (once scored)
/// its energy.
#[derive(Clone, Debug)]
pub struct NegativeItem {
    pub pose: Pose3D,
    pub perturbed_input: Pose2D,
    pub sort_key: f64,
    pub energy: Option<f64>,
}

/// Negatives for one anchor sample, sorted ascending by sort key.
#[derive(Clone, Debug)]
pub struct NegativeSet {
    pub items: Vec<NegativeItem>,
}

/// Draw `k` perturbations uniformly from the L2 ball of radius `r_max` over
/// the flattened 2D coordinates, lift each perturbed input with the frozen
/// lifter, and sort by the mean per-joint 2D distance from `sort_ref`
/// (defaults to `x` itself).
pub fn sample_perturbation_negatives(
    posenet: &PoseNet,
    params: &[f64],
    x: &Pose2D,
    k: usize,
    r_max: f64,
    rng: &mut impl rand::Rng,
    sort_ref: Option<&Pose2D>,
) -> Result<NegativeSet> {
    let dim = 2 * x.joints();
    let reference = sort_ref.unwrap_or(x);
    let mut items = Vec::with_capacity(k);
    for _ in 0..k {
        // uniform in the ball: gaussian direction, radius r_max * u^(1/dim)
        let mut dir: Vec<f64> = (0..dim).map(|_| seeds::gaussian(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: f64 = rng.gen_range(0.0..=1.0);
        let radius = r_max * u.powf(1.0 / dim as f64);
        let scale = if norm > 0.0 { radius / norm } else { 0.0 };
        for v in dir.iter_mut() {
            *v *= scale;
        }
        let mut flat = x.flat();
        for (a, b) in flat.iter_mut().zip(&dir) {
            *a += b;
        }
        let perturbed = Pose2D::from_flat(&flat)?;
        let pose = posenet.forward_value(params, &perturbed)?;
        let sort_key = perturbed.mean_joint_distance(reference)?;
        items.push(NegativeItem { pose, perturbed_input: perturbed, sort_key, energy: None });
    }
    items.sort_by(|a, b| a.sort_key.partial_cmp(&b.sort_key).unwrap());
    Ok(NegativeSet { items })
}

/// Mean hinge over adjacent sorted pairs plus `n_random_pairs` random
/// ordered pairs: `[kappa * mpjpe(pose_far, pose_near) - e_far + e_near]_+`
/// where "far" is the larger sort key. Returns `(0, degenerate)` when fewer
/// than two negatives exist.
pub fn pair_ordering_loss(
    neg: &NegativeSet,
    kappa: f64,
    n_random_pairs: usize,
    rng: &mut impl rand::Rng,
) -> Result<(f64, bool)> {
    let n = neg.items.len();
    if n < 2 {
        return Ok((0.0, true));
    }
    let energy = |i: usize| -> Result<f64> {
        neg.items[i]
            .energy
            .ok_or_else(|| Error::Contract(format!("negative {i} has no energy assigned")))
    };
    let mut acc = 0.0;
    let mut terms = 0usize;
    for i in 0..n - 1 {
        let d = metrics::mpjpe(&neg.items[i + 1].pose, &neg.items[i].pose)?;
        acc += margin_loss(energy(i)?, energy(i + 1)?, kappa * d);
        terms += 1;
    }
    for _ in 0..n_random_pairs {
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (far, near) =
            if neg.items[a].sort_key >= neg.items[b].sort_key { (a, b) } else { (b, a) };
        let d = metrics::mpjpe(&neg.items[far].pose, &neg.items[near].pose)?;
        acc += margin_loss(energy(near)?, energy(far)?, kappa * d);
        terms += 1;
    }
    Ok((acc / terms as f64, false))
}

/// Index of the candidate whose reprojection best matches the observed 2D
/// keypoints (mean per-joint pixel distance; ties keep the lowest index).
/// Candidates that fail to project are skipped; an error is returned only
/// if every candidate fails.
pub fn select_hard_negative(
    candidates: &[Pose3D],
    u: &Pose2D,
    camera: &CameraModel,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Contract("need at least one candidate".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, cand) in candidates.iter().enumerate() {
        let proj = match project(camera, cand) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let d = proj.mean_joint_distance(u)?;
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| Error::Numeric("every candidate failed to project".into()))
}

/// Window pair loss over per-frame energies and poses:
/// `[kappa * mpjpe(mean_pose(t..t+w), mean_pose(s..s+w))
///   - |mean_e(t..t+w) - mean_e(s..s+w)|]_+`.
pub fn window_pair_loss(
    energies: &[f64],
    poses: &[Pose3D],
    t: usize,
    s: usize,
    w: usize,
    kappa: f64,
) -> Result<f64> {
    if energies.len() != poses.len() {
        return Err(Error::Contract("energies and poses must align".into()));
    }
    if w == 0 || t + w > energies.len() || s + w > energies.len() {
        return Err(Error::Contract("window out of range".into()));
    }
    let mean_e = |from: usize| energies[from..from + w].iter().sum::<f64>() / w as f64;
    let mean_pose = |from: usize| -> Pose3D {
        let j = poses[from].joints();
        let mut acc = vec![[0.0f64; 3]; j];
        for pose in &poses[from..from + w] {
            for (a, p) in acc.iter_mut().zip(&pose.0) {
                for c in 0..3 {
                    a[c] += p[c] / w as f64;
                }
            }
        }
        Pose3D(acc)
    };
    let d = metrics::mpjpe(&mean_pose(t), &mean_pose(s))?;
    let gap = (mean_e(t) - mean_e(s)).abs();
    Ok((kappa * d - gap).max(0.0))
}

// ── full energy-network objective ────────────────────────────────────

/// Everything the energy objective needs for one anchor sample, in training
/// units. Predictions are detached values (the lifter is frozen here).
pub struct SampleCtx {
    pub x: Pose2D,
    pub y: Pose3D,
    pub y_pred: Pose3D,
    /// Seed for this sample's negative draws.
    pub neg_seed: u64,
    /// Frames `[t, t+w)` and `[s, s+w)` as (input, prediction) pairs when
    /// the window term is enabled.
    pub window_a: Vec<(Pose2D, Pose3D)>,
    pub window_b: Vec<(Pose2D, Pose3D)>,
}

impl SampleCtx {
    pub fn plain(x: Pose2D, y: Pose3D, y_pred: Pose3D) -> SampleCtx {
        SampleCtx { x, y, y_pred, neg_seed: 0, window_a: Vec::new(), window_b: Vec::new() }
    }
}

fn pose2_leaves(tape: &mut Tape, p: &Pose2D) -> Vec<Var> {
    tape.leaves(&p.flat()).iter().collect()
}

fn pose3_leaves(tape: &mut Tape, p: &Pose3D) -> Vec<Var> {
    tape.leaves(&p.flat()).iter().collect()
}

/// The assembled objective plus values useful for logging.
pub struct ObjectiveOutput {
    pub loss: Var,
    /// Mean energy assigned to the lifter's predictions in this batch.
    pub mean_pred_energy: f64,
}

/// Build the batch-mean energy objective on the tape. `space` is where the
/// energy network's parameters live on this tape; the lifter enters only
/// through frozen values, so no gradient can reach it.
pub fn lossnet_objective_on_tape(
    tape: &mut Tape,
    space: Space,
    lossnet: &LossNet,
    posenet: &PoseNet,
    posenet_params: &[f64],
    batch: &[SampleCtx],
    config: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    if batch.is_empty() {
        return Err(Error::Contract("batch must be nonempty".into()));
    }
    config.validate()?;
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut pred_energy_sum = 0.0;
    for ctx in batch {
        let x_vars = pose2_leaves(tape, &ctx.x);
        let y_vars = pose3_leaves(tape, &ctx.y);
        let pred_vars = pose3_leaves(tape, &ctx.y_pred);
        let e_gt = lossnet.energy_on_tape(tape, space, &x_vars, &y_vars)?;
        let e_pred = lossnet.energy_on_tape(tape, space, &x_vars, &pred_vars)?;
        pred_energy_sum += tape.value(e_pred);
        let mut loss = match config.lossnet_objective {
            LossKind::Margin => {
                let delta = mpjpe_margin(&ctx.y, &ctx.y_pred)?;
                margin_loss_on_tape(tape, e_gt, e_pred, delta)
            }
            LossKind::Nce => nce_loss_on_tape(tape, e_gt, e_pred),
        };

        if config.negatives > 0 {
            let mut rng = seeds::rng_from(ctx.neg_seed);
            let mut negs = sample_perturbation_negatives(
                posenet,
                posenet_params,
                &ctx.x,
                config.negatives,
                config.r_max,
                &mut rng,
                None,
            )?;
            let mut energies = Vec::with_capacity(negs.items.len());
            for item in &negs.items {
                let xv = pose2_leaves(tape, &ctx.x);
                let pv = pose3_leaves(tape, &item.pose);
                energies.push(lossnet.energy_on_tape(tape, space, &xv, &pv)?);
            }
            for (item, e) in negs.items.iter_mut().zip(&energies) {
                item.energy = Some(tape.value(*e));
            }
            if let Some(pair) = pair_ordering_on_tape(tape, &negs, &energies, config, &mut rng)? {
                loss = tape.add(loss, pair);
            }
        }

        if config.window > 1 && !ctx.window_a.is_empty() && !ctx.window_b.is_empty() {
            let wterm = window_pair_on_tape(tape, space, lossnet, ctx, config)?;
            let weighted = tape.scale(wterm, config.pair_weight);
            loss = tape.add(loss, weighted);
        }
        per_sample.push(loss);
    }
    let start = tape.next_index();
    for v in &per_sample {
        tape.copy(*v);
    }
    let run = NodeRange { start, len: per_sample.len() as u32 };
    let loss = tape.mean_range(run);
    Ok(ObjectiveOutput { loss, mean_pred_energy: pred_energy_sum / batch.len() as f64 })
}

/// Tape twin of [`pair_ordering_loss`] over already-scored tape energies.
/// Consumes the rng in the same order so value and tape paths agree.
fn pair_ordering_on_tape(
    tape: &mut Tape,
    negs: &NegativeSet,
    energies: &[Var],
    config: &ObjectiveConfig,
    rng: &mut impl rand::Rng,
) -> Result<Option<Var>> {
    let n = negs.items.len();
    if n < 2 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for i in 0..n - 1 {
        let d = metrics::mpjpe(&negs.items[i + 1].pose, &negs.items[i].pose)?;
        terms.push(margin_loss_on_tape(tape, energies[i], energies[i + 1], config.kappa * d));
    }
    for _ in 0..config.n_random_pairs {
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (far, near) =
            if negs.items[a].sort_key >= negs.items[b].sort_key { (a, b) } else { (b, a) };
        let d = metrics::mpjpe(&negs.items[far].pose, &negs.items[near].pose)?;
        terms.push(margin_loss_on_tape(tape, energies[near], energies[far], config.kappa * d));
    }
    let start = tape.next_index();
    for v in &terms {
        tape.copy(*v);
    }
    let run = NodeRange { start, len: terms.len() as u32 };
    Ok(Some(tape.mean_range(run)))
}

fn window_pair_on_tape(
    tape: &mut Tape,
    space: Space,
    lossnet: &LossNet,
    ctx: &SampleCtx,
    config: &ObjectiveConfig,
) -> Result<Var> {
    let eval_window = |tape: &mut Tape, frames: &[(Pose2D, Pose3D)]| -> Result<Var> {
        let mut energies = Vec::with_capacity(frames.len());
        for (x, pred) in frames {
            let xv = pose2_leaves(tape, x);
            let pv = pose3_leaves(tape, pred);
            energies.push(lossnet.energy_on_tape(tape, space, &xv, &pv)?);
        }
        let start = tape.next_index();
        for v in &energies {
            tape.copy(*v);
        }
        let run = NodeRange { start, len: energies.len() as u32 };
        Ok(tape.mean_range(run))
    };
    let mean_pose = |frames: &[(Pose2D, Pose3D)]| -> Pose3D {
        let j = frames[0].1.joints();
        let w = frames.len() as f64;
        let mut acc = vec![[0.0f64; 3]; j];
        for (_, pose) in frames {
            for (a, p) in acc.iter_mut().zip(&pose.0) {
                for c in 0..3 {
                    a[c] += p[c] / w;
                }
            }
        }
        Pose3D(acc)
    };
    let ea = eval_window(tape, &ctx.window_a)?;
    let eb = eval_window(tape, &ctx.window_b)?;
    let d = metrics::mpjpe(&mean_pose(&ctx.window_a), &mean_pose(&ctx.window_b))?;
    let gap = tape.sub(ea, eb);
    let agap = tape.abs(gap);
    let neg_gap = tape.neg(agap);
    let shifted = tape.offset(neg_gap, config.kappa * d);
    Ok(tape.relu(shifted))
}
