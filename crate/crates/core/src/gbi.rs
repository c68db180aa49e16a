//! Gradient-based inference-time refinement: starting from a predicted
//! pose, repeatedly step the 3D hypothesis down the frozen energy network's
//! gradient, optionally with a backtracking line search, recording energy
//! and structural metrics along the way.
//!
//! Poses here are in training units; metric records are millimeters (the
//! limb-symmetry error needs no ground truth and no unit).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lossnet::LossNet;
use crate::metrics;
use crate::pose::{Pose2D, Pose3D};
use crate::skeleton::SkeletonSpec;
use crate::tape::{Space, Tape, TapeBuffers, Var};
use crate::trainer::Normalizer;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GbiConfig {
    pub steps: usize,
    /// Step size in training (normalized) pose units.
    pub step_size: f64,
    /// Halve the step until the energy does not increase (max 10 halvings);
    /// if no such step exists the pose stays put for that iteration.
    pub line_search: bool,
    /// Record structural metrics alongside the energy.
    pub record_metrics: bool,
}

impl Default for GbiConfig {
    fn default() -> GbiConfig {
        GbiConfig { steps: 20, step_size: 1e-2, line_search: true, record_metrics: true }
    }
}

impl GbiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size <= 0.0 {
            return Err(Error::Contract("step size must be positive".into()));
        }
        Ok(())
    }
}

pub const MAX_HALVINGS: u32 = 10;

/// Per-iteration record; ground-truth-dependent metrics are present only
/// when a ground truth was supplied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GbiRecord {
    pub energy: f64,
    pub lse: f64,
    pub p_mpjpe: Option<f64>,
    pub bsle: Option<f64>,
    pub lle: Option<f64>,
}

/// Refinement trace: `steps + 1` records (the initial state included) unless
/// truncated by a non-finite gradient.
#[derive(Clone, Debug)]
pub struct GbiTrajectory {
    pub records: Vec<GbiRecord>,
    pub final_pose: Pose3D,
    /// Diagnostic when the trajectory was cut short.
    pub truncated: Option<String>,
}

/// Refine one pose against a frozen energy network. `x` and `y0` are in
/// training units; `gt_mm` (when present) is in millimeters.
#[allow(clippy::too_many_arguments)]
pub fn gbi_refine(
    lossnet: &LossNet,
    params: &[f64],
    x: &Pose2D,
    y0: &Pose3D,
    gt_mm: Option<&Pose3D>,
    spec: &SkeletonSpec,
    config: &GbiConfig,
    norm: &Normalizer,
) -> Result<GbiTrajectory> {
    config.validate()?;
    let x_before = x.clone();
    let mut y = y0.clone();
    let mut bufs = TapeBuffers::default();
    let mut records = Vec::with_capacity(config.steps + 1);
    let mut truncated = None;

    let mut energy = energy_of(lossnet, params, x, &y, &mut bufs)?;
    records.push(record(&y, energy, gt_mm, spec, config, norm)?);

    for _ in 0..config.steps {
        // gradient of the energy with respect to the 3D hypothesis
        let mut tape = Tape::from_buffers(bufs, &[], params);
        let xr = tape.leaves(&x.flat());
        let yr = tape.leaves(&y.flat());
        let xs: Vec<Var> = xr.iter().collect();
        let ys: Vec<Var> = yr.iter().collect();
        let e = lossnet.energy_on_tape(&mut tape, Space::Frozen, &xs, &ys)?;
        let maybe_grad = match tape.backward_into(e, &mut []) {
            Ok(()) => Some(ys.iter().map(|v| tape.grad(*v)).collect::<Vec<f64>>()),
            Err(err) => {
                truncated = Some(err.to_string());
                None
            }
        };
        bufs = tape.into_buffers();
        let grad = match maybe_grad {
            Some(g) if g.iter().all(|v| v.is_finite()) => g,
            Some(_) => {
                truncated = Some("non-finite energy gradient".into());
                break;
            }
            None => break,
        };

        let make_candidate = |step: f64| -> Pose3D {
            let flat = y.flat();
            let mut out: Vec<f64> =
                flat.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
            // re-zero the root to preserve the root-relative convention
            for c in 0..3 {
                out[3 * spec.root + c] = 0.0;
            }
            Pose3D::from_flat(&out).expect("length preserved")
        };

        let mut step = config.step_size;
        let mut candidate = make_candidate(step);
        let mut cand_energy = energy_of(lossnet, params, x, &candidate, &mut bufs)?;
        if config.line_search {
            let mut halvings = 0;
            while cand_energy > energy && halvings < MAX_HALVINGS {
                step /= 2.0;
                candidate = make_candidate(step);
                cand_energy = energy_of(lossnet, params, x, &candidate, &mut bufs)?;
                halvings += 1;
            }
            if cand_energy > energy {
                // no acceptable step; stay put
                candidate = y.clone();
                cand_energy = energy;
            }
        }
        y = candidate;
        energy = cand_energy;
        records.push(record(&y, energy, gt_mm, spec, config, norm)?);
    }

    debug_assert_eq!(x_before, *x);
    Ok(GbiTrajectory { records, final_pose: y, truncated })
}

fn energy_of(
    lossnet: &LossNet,
    params: &[f64],
    x: &Pose2D,
    y: &Pose3D,
    bufs: &mut TapeBuffers,
) -> Result<f64> {
    let taken = std::mem::take(bufs);
    let mut tape = Tape::from_buffers(taken, &[], params);
    let xr = tape.leaves(&x.flat());
    let yr = tape.leaves(&y.flat());
    let xs: Vec<Var> = xr.iter().collect();
    let ys: Vec<Var> = yr.iter().collect();
    let e = lossnet.energy_on_tape(&mut tape, Space::Frozen, &xs, &ys)?;
    let v = tape.value(e);
    *bufs = tape.into_buffers();
    if !v.is_finite() {
        return Err(Error::Numeric("energy is non-finite".into()));
    }
    Ok(v)
}

fn record(
    y: &Pose3D,
    energy: f64,
    gt_mm: Option<&Pose3D>,
    spec: &SkeletonSpec,
    config: &GbiConfig,
    norm: &Normalizer,
) -> Result<GbiRecord> {
    let pose_mm = norm.denorm_3d(y);
    let lse = metrics::lse(&pose_mm, spec)?;
    let (p_mpjpe, bsle, lle) = match (gt_mm, config.record_metrics) {
        (Some(gt), true) => (
            Some(metrics::p_mpjpe(&pose_mm, gt)?),
            Some(metrics::bsle_all(&pose_mm, gt, spec)?),
            Some(metrics::lle(&pose_mm, gt, spec)?),
        ),
        _ => (None, None, None),
    };
    Ok(GbiRecord { energy, lse, p_mpjpe, bsle, lle })
}

/// Mean per-iteration curves over several trajectories (all must have equal
/// length).
pub fn mean_curves(trajectories: &[GbiTrajectory]) -> Result<Vec<GbiRecord>> {
    if trajectories.is_empty() {
        return Err(Error::Contract("need at least one trajectory".into()));
    }
    let len = trajectories[0].records.len();
    if trajectories.iter().any(|t| t.records.len() != len) {
        return Err(Error::Contract("trajectories have different lengths".into()));
    }
    let n = trajectories.len() as f64;
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let mut acc = GbiRecord { energy: 0.0, lse: 0.0, p_mpjpe: None, bsle: None, lle: None };
        let mut opt = [0.0f64; 3];
        let mut opt_n = 0usize;
        for t in trajectories {
            let r = &t.records[k];
            acc.energy += r.energy / n;
            acc.lse += r.lse / n;
            if let (Some(p), Some(b), Some(l)) = (r.p_mpjpe, r.bsle, r.lle) {
                opt[0] += p;
                opt[1] += b;
                opt[2] += l;
                opt_n += 1;
            }
        }
        if opt_n == trajectories.len() {
            acc.p_mpjpe = Some(opt[0] / n);
            acc.bsle = Some(opt[1] / n);
            acc.lle = Some(opt[2] / n);
        }
        out.push(acc);
    }
    Ok(out)
}

/// CSV rows for a trajectory or mean curve: iteration, energy, p_mpjpe,
/// lse, bsle, lle (absent metrics as empty fields).
pub fn curve_to_csv(records: &[GbiRecord], digest: &str) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    let mut out = format!("# config_digest={digest}\niteration,energy,p_mpjpe,lse,bsle,lle\n");
    for (k, r) in records.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.16e},{},{:.16e},{},{}\n",
            k,
            r.energy,
            fmt(r.p_mpjpe),
            r.lse,
            fmt(r.bsle),
            fmt(r.lle),
        ));
    }
    out
}
