//! The alternating training loop: each mini-batch first updates the energy
//! network on its shaping objective under the frozen lifter's predictions,
//! then updates the lifter on the combined loss under the just-updated
//! energy network. Also hosts the three-stage greedy hyperparameter sweep.
//!
//! Training runs in normalized units: 2D inputs are focal-normalized
//! (`(pixel - principal_point) / focal`) and 3D poses are scaled by
//! `POSE_SCALE` (millimeters to meters). Reported metrics are always
//! millimeters on denormalized predictions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::lossnet::{LossNet, LossNetConfig};
use crate::metrics;
use crate::objectives::{self, ObjectiveConfig, SampleCtx};
use crate::params::ParamStore;
use crate::pose::{Pose2D, Pose3D};
use crate::posenet::{PoseNet, PoseNetConfig};
use crate::seeds;
use crate::skeleton::SkeletonSpec;
use crate::synthdata::{CameraModel, Dataset};
use crate::tape::{Space, Tape, TapeBuffers};

/// Millimeters-to-training-units factor for 3D poses.
pub const POSE_SCALE: f64 = 1e-3;

/// Loss values above this abort the run with a diagnostic.
pub const ABORT_THRESHOLD: f64 = 1e8;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Lifter learning rate.
    pub lr_p: f64,
    /// Energy-network learning rate.
    pub lr_l: f64,
    pub objective: ObjectiveConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs (the final epoch always validates).
    pub eval_every: usize,
    /// Supervised-only training: the energy term is dropped and the energy
    /// network is never updated.
    pub baseline_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr_p: 1e-4,
            lr_l: 1e-4,
            objective: ObjectiveConfig::default(),
            epochs: 30,
            batch_size: 64,
            seed: 7,
            eval_every: 1,
            baseline_mode: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_p <= 0.0 || self.lr_l <= 0.0 {
            return Err(Error::Contract("learning rates must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Contract("eval_every must be at least 1".into()));
        }
        self.objective.validate()
    }
}

/// Pixel/millimeter to training-unit conversion derived from the camera.
#[derive(Clone, Copy, Debug)]
pub struct Normalizer {
    pub focal: f64,
    pub principal: [f64; 2],
    pub pose_scale: f64,
}

impl Normalizer {
    pub fn from_camera(camera: &CameraModel) -> Normalizer {
        Normalizer {
            focal: camera.focal,
            principal: camera.principal_point,
            pose_scale: POSE_SCALE,
        }
    }

    pub fn norm_2d(&self, p: &Pose2D) -> Pose2D {
        Pose2D(
            p.0.iter()
                .map(|q| {
                    [(q[0] - self.principal[0]) / self.focal, (q[1] - self.principal[1]) / self.focal]
                })
                .collect(),
        )
    }

    pub fn norm_3d(&self, p: &Pose3D) -> Pose3D {
        p.scaled(self.pose_scale)
    }

    pub fn denorm_3d(&self, p: &Pose3D) -> Pose3D {
        p.scaled(1.0 / self.pose_scale)
    }
}

/// One dataset sample in training units.
#[derive(Clone, Debug)]
pub struct NormSample {
    pub x: Pose2D,
    pub y: Pose3D,
    pub y_mm: Pose3D,
}

pub fn normalize_dataset(ds: &Dataset, norm: &Normalizer) -> Vec<NormSample> {
    ds.samples
        .iter()
        .map(|s| NormSample { x: norm.norm_2d(&s.x), y: norm.norm_3d(&s.y), y_mm: s.y.clone() })
        .collect()
}

/// Per-epoch log record. Validation fields are present on validated epochs;
/// energy fields are absent in baseline mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_f: f64,
    pub l_e: Option<f64>,
    pub mean_energy: Option<f64>,
    pub val: Option<ValMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValMetrics {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub lse: f64,
    pub bsle: f64,
    pub lle: f64,
}

/// Training log; every record belongs to the run identified by `digest`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub digest: String,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str =
        "epoch,l_f,l_e,mean_energy,val_mpjpe,val_pmpjpe,val_lse,val_bsle,val_lle";

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let mut out = format!("# config_digest={}\n{}\n", self.digest, Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.16e},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.l_f,
                fmt(r.l_e),
                fmt(r.mean_energy),
                fmt(r.val.map(|v| v.mpjpe)),
                fmt(r.val.map(|v| v.p_mpjpe)),
                fmt(r.val.map(|v| v.lse)),
                fmt(r.val.map(|v| v.bsle)),
                fmt(r.val.map(|v| v.lle)),
            ));
        }
        out
    }

    /// Validation metrics of the last validated epoch.
    pub fn final_val(&self) -> Option<ValMetrics> {
        self.records.iter().rev().find_map(|r| r.val)
    }
}

/// Mutable training state: both networks, their optimizers, and recycled
/// tape storage.
pub struct TrainState {
    pub posenet: PoseNet,
    pub posenet_params: ParamStore,
    pub adam_p: AdamState,
    pub lossnet: Option<LossNet>,
    pub lossnet_params: Option<ParamStore>,
    pub adam_l: Option<AdamState>,
    bufs: Option<TapeBuffers>,
    grad_acc: Vec<f64>,
}

impl TrainState {
    pub fn init(
        spec: &SkeletonSpec,
        pn_cfg: &PoseNetConfig,
        ln_cfg: &LossNetConfig,
        cfg: &TrainConfig,
    ) -> Result<TrainState> {
        let (posenet, posenet_params) = PoseNet::init(pn_cfg, spec.joint_count(), spec.root)?;
        let adam_p = AdamState::new(posenet_params.len());
        let (lossnet, lossnet_params, adam_l) = if cfg.baseline_mode {
            (None, None, None)
        } else {
            let (net, store) = LossNet::init(ln_cfg, spec)?;
            let n = store.len();
            (Some(net), Some(store), Some(AdamState::new(n)))
        };
        Ok(TrainState {
            posenet,
            posenet_params,
            adam_p,
            lossnet,
            lossnet_params,
            adam_l,
            bufs: Some(TapeBuffers::default()),
            grad_acc: Vec::new(),
        })
    }
}

/// Per-step log record.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub l_f: f64,
    pub l_e: Option<f64>,
    pub mean_energy: Option<f64>,
}

fn check_loss(value: f64, what: &str) -> Result<f64> {
    if !value.is_finite() || value.abs() > ABORT_THRESHOLD {
        return Err(Error::Numeric(format!("{what} diverged to {value}")));
    }
    Ok(value)
}

/// One alternating step over a batch of sample indices:
/// (1) lift the batch under the frozen lifter, (2) update the energy network
/// on its objective, (3) recompute the combined loss under the updated
/// energy network and update the lifter. In baseline mode step (2) is
/// skipped and the energy term is dropped.
pub fn train_step(
    state: &mut TrainState,
    data: &[NormSample],
    batch_idx: &[usize],
    cfg: &TrainConfig,
    step_counter: u64,
) -> Result<StepRecord> {
    if batch_idx.is_empty() {
        return Err(Error::Contract("batch must be nonempty".into()));
    }
    let b = batch_idx.len();
    let obj = &cfg.objective;

    // (1) predictions under the frozen lifter
    let preds: Vec<Pose3D> = batch_idx
        .iter()
        .map(|&i| state.posenet.forward_value(state.posenet_params.flat(), &data[i].x))
        .collect::<Result<_>>()?;

    // (2) energy-network update
    let mut l_e = None;
    let mut mean_energy = None;
    if !cfg.baseline_mode {
        let lossnet = state.lossnet.as_ref().unwrap();
        let l_params = state.lossnet_params.as_mut().unwrap();
        let adam_l = state.adam_l.as_mut().unwrap();
        state.grad_acc.clear();
        state.grad_acc.resize(l_params.len(), 0.0);
        let mut loss_sum = 0.0;
        let mut energy_sum = 0.0;
        let mut bufs = state.bufs.take().unwrap();
        for (pos, (&i, pred)) in batch_idx.iter().zip(&preds).enumerate() {
            let sample = &data[i];
            let ctx = SampleCtx {
                x: sample.x.clone(),
                y: sample.y.clone(),
                y_pred: pred.clone(),
                neg_seed: seeds::derive_seed(cfg.seed, "negatives", step_counter * 1_000_003 + pos as u64),
                window_a: window_frames(&state.posenet, state.posenet_params.flat(), data, i, obj.window, false, cfg, step_counter, pos)?,
                window_b: window_frames(&state.posenet, state.posenet_params.flat(), data, i, obj.window, true, cfg, step_counter, pos)?,
            };
            let mut tape = Tape::from_buffers(bufs, l_params.flat(), &[]);
            let out = objectives::lossnet_objective_on_tape(
                &mut tape,
                Space::Tracked,
                lossnet,
                &state.posenet,
                state.posenet_params.flat(),
                std::slice::from_ref(&ctx),
                obj,
            )?;
            loss_sum += check_loss(tape.value(out.loss), "energy objective")?;
            energy_sum += out.mean_pred_energy;
            tape.backward_into(out.loss, &mut state.grad_acc)?;
            bufs = tape.into_buffers();
        }
        state.bufs = Some(bufs);
        for g in state.grad_acc.iter_mut() {
            *g /= b as f64;
        }
        adam_step(l_params, &state.grad_acc, adam_l, cfg.lr_l)?;
        l_e = Some(loss_sum / b as f64);
        mean_energy = Some(energy_sum / b as f64);
    }

    // (3) lifter update under the post-update energy network
    let mut grad_p = vec![0.0; state.posenet_params.len()];
    let mut loss_sum = 0.0;
    let mut bufs = state.bufs.take().unwrap();
    let empty: [f64; 0] = [];
    for &i in batch_idx {
        let sample = &data[i];
        let frozen: &[f64] = match &state.lossnet_params {
            Some(p) if !cfg.baseline_mode => p.flat(),
            _ => &empty,
        };
        let mut tape = Tape::from_buffers(bufs, state.posenet_params.flat(), frozen);
        let x_range = tape.leaves(&sample.x.flat());
        let pred_vars = state.posenet.forward_on_tape(&mut tape, Space::Tracked, x_range)?;
        let energy = if !cfg.baseline_mode && obj.alpha != 0.0 {
            let lossnet = state.lossnet.as_ref().unwrap();
            let x_vars: Vec<_> = x_range.iter().collect();
            Some((lossnet.energy_on_tape(&mut tape, Space::Frozen, &x_vars, &pred_vars)?, obj.alpha))
        } else {
            None
        };
        let loss = objectives::task_loss_on_tape(&mut tape, &sample.y, &pred_vars, energy)?;
        loss_sum += check_loss(tape.value(loss), "task loss")?;
        tape.backward_into(loss, &mut grad_p)?;
        bufs = tape.into_buffers();
    }
    state.bufs = Some(bufs);
    for g in grad_p.iter_mut() {
        *g /= b as f64;
    }
    adam_step(&mut state.posenet_params, &grad_p, &mut state.adam_p, cfg.lr_p)?;

    Ok(StepRecord { l_f: loss_sum / b as f64, l_e, mean_energy })
}

/// Frames `[t, t+w)` (or `[s, s+w)` for the partner window) as (input,
/// frozen prediction) pairs. The partner start is drawn uniformly from
/// `{t-w, ..., t+w} \ {t}`, clipped to range.
#[allow(clippy::too_many_arguments)]
fn window_frames(
    posenet: &PoseNet,
    posenet_params: &[f64],
    data: &[NormSample],
    anchor: usize,
    w: usize,
    partner: bool,
    cfg: &TrainConfig,
    step_counter: u64,
    pos: usize,
) -> Result<Vec<(Pose2D, Pose3D)>> {
    if w <= 1 {
        return Ok(Vec::new());
    }
    let n = data.len();
    let clamp_start = |s: i64| -> usize { s.clamp(0, (n - w) as i64) as usize };
    let start = if partner {
        let mut rng =
            seeds::stream(cfg.seed, "window", step_counter * 1_000_003 + pos as u64);
        let lo = anchor as i64 - w as i64;
        let hi = anchor as i64 + w as i64;
        let mut s = anchor as i64;
        while s == anchor as i64 {
            s = rng.gen_range(lo..=hi);
        }
        clamp_start(s)
    } else {
        clamp_start(anchor as i64)
    };
    let mut frames = Vec::with_capacity(w);
    for f in start..start + w {
        let pred = posenet.forward_value(posenet_params, &data[f].x)?;
        frames.push((data[f].x.clone(), pred));
    }
    Ok(frames)
}

/// Checkpoints and history of one training run.
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub final_posenet: ParamStore,
    pub final_lossnet: Option<ParamStore>,
    pub best_posenet: ParamStore,
    pub best_lossnet: Option<ParamStore>,
    pub best_epoch: usize,
}

/// Validation metrics in millimeters over a normalized dataset.
pub fn validate(
    posenet: &PoseNet,
    params: &ParamStore,
    data: &[NormSample],
    spec: &SkeletonSpec,
    norm: &Normalizer,
) -> Result<ValMetrics> {
    let mut acc = [0.0f64; 5];
    for s in data {
        let pred_mm = norm.denorm_3d(&posenet.forward_value(params.flat(), &s.x)?);
        acc[0] += metrics::mpjpe(&pred_mm, &s.y_mm)?;
        acc[1] += metrics::p_mpjpe(&pred_mm, &s.y_mm)?;
        acc[2] += metrics::lse(&pred_mm, spec)?;
        acc[3] += metrics::bsle_all(&pred_mm, &s.y_mm, spec)?;
        acc[4] += metrics::lle(&pred_mm, &s.y_mm, spec)?;
    }
    let n = data.len() as f64;
    Ok(ValMetrics {
        mpjpe: acc[0] / n,
        p_mpjpe: acc[1] / n,
        lse: acc[2] / n,
        bsle: acc[3] / n,
        lle: acc[4] / n,
    })
}

/// Run the full training loop: seeded shuffles, alternating updates,
/// periodic validation, best-checkpoint tracking.
pub fn train_run(
    train: &Dataset,
    val: &Dataset,
    spec: &SkeletonSpec,
    pn_cfg: &PoseNetConfig,
    ln_cfg: &LossNetConfig,
    cfg: &TrainConfig,
    digest: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let j = spec.joint_count();
    if train.joints != j || val.joints != j {
        return Err(Error::Contract(format!(
            "dataset joint counts ({}, {}) do not match the skeleton ({j})",
            train.joints, val.joints
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("datasets must be nonempty".into()));
    }
    let norm = Normalizer::from_camera(&train.camera);
    let train_data = normalize_dataset(train, &norm);
    let val_data = normalize_dataset(val, &norm);

    let mut state = TrainState::init(spec, pn_cfg, ln_cfg, cfg)?;
    let mut history = TrainHistory { digest: digest.to_string(), records: Vec::new() };
    let mut best: Option<(usize, f64, ParamStore, Option<ParamStore>)> = None;
    let mut step_counter = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = seeds::stream(cfg.seed, "shuffle", epoch as u64);
            order.shuffle(&mut rng);
        }
        let mut sums = (0.0, 0.0, 0.0);
        let mut counts = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let rec = train_step(&mut state, &train_data, batch, cfg, step_counter)?;
            step_counter += 1;
            sums.0 += rec.l_f * batch.len() as f64;
            counts.0 += batch.len();
            if let (Some(le), Some(me)) = (rec.l_e, rec.mean_energy) {
                sums.1 += le * batch.len() as f64;
                sums.2 += me * batch.len() as f64;
                counts.1 += batch.len();
            }
        }
        let l_f = sums.0 / counts.0 as f64;
        let (l_e, mean_energy) = if counts.1 > 0 {
            (Some(sums.1 / counts.1 as f64), Some(sums.2 / counts.1 as f64))
        } else {
            (None, None)
        };

        let run_val = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let val_metrics = if run_val {
            let m = validate(&state.posenet, &state.posenet_params, &val_data, spec, &norm)?;
            if best.as_ref().map_or(true, |(_, bm, _, _)| m.mpjpe < *bm) {
                best = Some((
                    epoch,
                    m.mpjpe,
                    state.posenet_params.clone(),
                    state.lossnet_params.clone(),
                ));
            }
            Some(m)
        } else {
            None
        };
        history.records.push(EpochRecord { epoch, l_f, l_e, mean_energy, val: val_metrics });
    }

    let (best_epoch, _, best_posenet, best_lossnet) = best.unwrap_or((
        0,
        f64::INFINITY,
        state.posenet_params.clone(),
        state.lossnet_params.clone(),
    ));
    Ok(TrainOutcome {
        history,
        final_posenet: state.posenet_params,
        final_lossnet: state.lossnet_params,
        best_posenet,
        best_lossnet,
        best_epoch,
    })
}

// ── greedy hyperparameter sweep ──────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SweepGrids {
    pub lr_p: Vec<f64>,
    pub lr_l: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// One sweep row; baseline rows (stage 1) carry zero `lr_l` and `alpha`.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub lr_p: f64,
    pub lr_l: f64,
    pub alpha: f64,
    pub mpjpe: Option<f64>,
    pub error: Option<String>,
}

pub struct SweepResult {
    pub best: TrainConfig,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "lr_p,lr_l,alpha,mpjpe";

pub fn sweep_rows_to_csv(rows: &[SweepRow], digest: &str) -> String {
    let mut out = format!("# config_digest={digest}\n{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let cell = match (r.mpjpe, &r.error) {
            (Some(m), _) => format!("{m:.16e}"),
            (None, Some(_)) => "error".to_string(),
            _ => String::new(),
        };
        out.push_str(&format!("{:.16e},{:.16e},{:.16e},{}\n", r.lr_p, r.lr_l, r.alpha, cell));
    }
    out
}

/// Three-stage greedy tuning: (1) pick the lifter learning rate with the
/// supervised baseline, (2) explore (energy lr, energy weight) jointly and
/// fix the best energy lr, (3) sweep the energy weight. Aborted runs are
/// recorded with an error marker and excluded from selection.
pub fn greedy_sweep(
    grids: &SweepGrids,
    train: &Dataset,
    val: &Dataset,
    spec: &SkeletonSpec,
    pn_cfg: &PoseNetConfig,
    ln_cfg: &LossNetConfig,
    base: &TrainConfig,
    digest: &str,
) -> Result<SweepResult> {
    if grids.lr_p.is_empty() || grids.lr_l.is_empty() || grids.alpha.is_empty() {
        return Err(Error::Contract("all sweep grids must be nonempty".into()));
    }
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut run = |lr_p: f64, lr_l: f64, alpha: f64, baseline: bool| -> Option<f64> {
        let mut cfg = base.clone();
        cfg.lr_p = lr_p;
        cfg.baseline_mode = baseline;
        if !baseline {
            cfg.lr_l = lr_l;
            cfg.objective.alpha = alpha;
        }
        let outcome = train_run(train, val, spec, pn_cfg, ln_cfg, &cfg, digest);
        let (mpjpe, error) = match outcome {
            Ok(o) => (o.history.final_val().map(|v| v.mpjpe), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(SweepRow {
            lr_p,
            lr_l: if baseline { 0.0 } else { lr_l },
            alpha: if baseline { 0.0 } else { alpha },
            mpjpe,
            error,
        });
        mpjpe
    };

    // stage 1: lifter lr on the supervised baseline
    let mut stage1: Vec<(f64, f64)> = Vec::new();
    for &lr_p in &grids.lr_p {
        if let Some(m) = run(lr_p, 0.0, 0.0, true) {
            stage1.push((lr_p, m));
        }
    }
    let best_lr_p = argmin(&stage1)
        .ok_or_else(|| Error::Numeric("every stage-1 run failed".into()))?;

    // stage 2: joint (lr_l, alpha) exploration; fix the best lr_l
    let mut stage2: Vec<((f64, f64), f64)> = Vec::new();
    for &lr_l in &grids.lr_l {
        for &alpha in &grids.alpha {
            if let Some(m) = run(best_lr_p, lr_l, alpha, false) {
                stage2.push(((lr_l, alpha), m));
            }
        }
    }
    let (best_lr_l, _) = argmin(&stage2)
        .ok_or_else(|| Error::Numeric("every stage-2 run failed".into()))?;

    // stage 3: final alpha sweep
    let mut stage3: Vec<(f64, f64)> = Vec::new();
    for &alpha in &grids.alpha {
        if let Some(m) = run(best_lr_p, best_lr_l, alpha, false) {
            stage3.push((alpha, m));
        }
    }
    let best_alpha = argmin(&stage3)
        .ok_or_else(|| Error::Numeric("every stage-3 run failed".into()))?;

    let mut best = base.clone();
    best.lr_p = best_lr_p;
    best.lr_l = best_lr_l;
    best.objective.alpha = best_alpha;
    best.baseline_mode = false;
    Ok(SweepResult { best, rows })
}

fn argmin<K: Copy>(pairs: &[(K, f64)]) -> Option<K> {
    pairs
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(k, _)| *k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lossnet::{Mechanism, Variant};
    use crate::synthdata::{make_dataset, GeneratorConfig};

    fn tiny_setup(n_train: usize, n_val: usize) -> (Dataset, Dataset, SkeletonSpec) {
        let spec = crate::skeleton::canonical_17();
        let mut gen = GeneratorConfig::canonical(n_train, 11);
        gen.noise_2d_sigma = 2.0;
        let camera = CameraModel::default();
        let train = make_dataset(&gen, &camera).unwrap();
        let mut gen_val = GeneratorConfig::canonical(n_val, 12);
        gen_val.noise_2d_sigma = 2.0;
        let val = make_dataset(&gen_val, &camera).unwrap();
        (train, val, spec)
    }

    fn tiny_pn() -> PoseNetConfig {
        PoseNetConfig { hidden_width: 16, n_blocks: 1, init_scale: 1.0, seed: 21 }
    }

    fn tiny_ln() -> LossNetConfig {
        LossNetConfig {
            variant: Variant::Graph,
            mechanism: Mechanism::M3,
            d_embed: 8,
            d_model: 16,
            heads: 2,
            depth: 1,
            spd_max: 8,
            mlp_hidden: 16,
            mlp_blocks: 1,
            edge_bias: false,
            seed: 22,
        }
    }

    fn tiny_cfg(epochs: usize, baseline: bool) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            baseline_mode: baseline,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (train, val, spec) = tiny_setup(8, 4);
        let out =
            train_run(&train, &val, &spec, &tiny_pn(), &tiny_ln(), &tiny_cfg(0, false), "d").unwrap();
        assert!(out.history.records.is_empty());
        let (fresh, _) = PoseNet::init(&tiny_pn(), 17, 0).map(|(n, s)| (s, n)).unwrap();
        assert_eq!(out.final_posenet.flat(), fresh.flat());
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn baseline_matches_scripted_supervised_loop() {
        // an independent supervised loop over the same shuffles must produce
        // bit-identical lifter parameters
        let (train, val, spec) = tiny_setup(12, 4);
        let cfg = tiny_cfg(2, true);
        let out = train_run(&train, &val, &spec, &tiny_pn(), &tiny_ln(), &cfg, "d").unwrap();

        let norm = Normalizer::from_camera(&train.camera);
        let data = normalize_dataset(&train, &norm);
        let (posenet, mut params) = PoseNet::init(&tiny_pn(), 17, 0).unwrap();
        let mut adam = AdamState::new(params.len());
        for epoch in 1..=2u64 {
            let mut order: Vec<usize> = (0..data.len()).collect();
            use rand::seq::SliceRandom;
            let mut rng = seeds::stream(cfg.seed, "shuffle", epoch);
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = vec![0.0; params.len()];
                for &i in batch {
                    let mut tape = Tape::new(params.flat(), &[]);
                    let xr = tape.leaves(&data[i].x.flat());
                    let preds = posenet.forward_on_tape(&mut tape, Space::Tracked, xr).unwrap();
                    let loss =
                        objectives::task_loss_on_tape(&mut tape, &data[i].y, &preds, None).unwrap();
                    tape.backward_into(loss, &mut grads).unwrap();
                }
                for g in grads.iter_mut() {
                    *g /= batch.len() as f64;
                }
                adam_step(&mut params, &grads, &mut adam, cfg.lr_p).unwrap();
            }
        }
        assert_eq!(out.final_posenet.flat().len(), params.flat().len());
        for (a, b) in out.final_posenet.flat().iter().zip(params.flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn determinism_across_runs() {
        let (train, val, spec) = tiny_setup(10, 4);
        let cfg = tiny_cfg(2, false);
        let a = train_run(&train, &val, &spec, &tiny_pn(), &tiny_ln(), &cfg, "d").unwrap();
        let b = train_run(&train, &val, &spec, &tiny_pn(), &tiny_ln(), &cfg, "d").unwrap();
        assert_eq!(a.history, b.history);
        for (x, y) in a.final_posenet.flat().iter().zip(b.final_posenet.flat()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a
            .final_lossnet
            .as_ref()
            .unwrap()
            .flat()
            .iter()
            .zip(b.final_lossnet.as_ref().unwrap().flat())
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn alpha_zero_with_lossnet_matches_baseline_trajectory() {
        let (train, val, spec) = tiny_setup(10, 4);
        let mut cfg = tiny_cfg(2, false);
        cfg.objective.alpha = 0.0;
        let a = train_run(&train, &val, &spec, &tiny_pn(), &tiny_ln(), &cfg, "d").unwrap();
        let mut cfg_b = tiny_cfg(2, true);
        cfg_b.objective.alpha = 0.0;
        let b = train_run(&train, &val, &spec, &tiny_pn(), &tiny_ln(), &cfg_b, "d").unwrap();
        for (x, y) in a.final_posenet.flat().iter().zip(b.final_posenet.flat()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn energy_objective_descends_at_small_lr() {
        // after one energy update on a batch with the hinge active,
        // re-evaluating the objective on the same batch gives a smaller value
        let (train, _, spec) = tiny_setup(8, 4);
        let norm = Normalizer::from_camera(&train.camera);
        let data = normalize_dataset(&train, &norm);
        let mut cfg = tiny_cfg(1, false);
        cfg.lr_l = 1e-6;
        let mut state = TrainState::init(&spec, &tiny_pn(), &tiny_ln(), &cfg).unwrap();
        let batch: Vec<usize> = (0..8).collect();

        let eval_objective = |state: &TrainState| -> f64 {
            let lossnet = state.lossnet.as_ref().unwrap();
            let l_params = state.lossnet_params.as_ref().unwrap();
            let mut total = 0.0;
            for &i in &batch {
                let pred = state
                    .posenet
                    .forward_value(state.posenet_params.flat(), &data[i].x)
                    .unwrap();
                let ctx = SampleCtx::plain(data[i].x.clone(), data[i].y.clone(), pred);
                let mut tape = Tape::new(l_params.flat(), &[]);
                let out = objectives::lossnet_objective_on_tape(
                    &mut tape,
                    Space::Tracked,
                    lossnet,
                    &state.posenet,
                    state.posenet_params.flat(),
                    std::slice::from_ref(&ctx),
                    &cfg.objective,
                )
                .unwrap();
                total += tape.value(out.loss);
            }
            total / batch.len() as f64
        };

        let before = eval_objective(&state);
        assert!(before > 0.0, "hinge inactive; test setup is broken");
        // zero lifter lr keeps predictions fixed for the comparison
        let mut frozen_cfg = cfg.clone();
        frozen_cfg.lr_p = f64::MIN_POSITIVE;
        let _ = train_step(&mut state, &data, &batch, &frozen_cfg, 0).unwrap();
        let after = eval_objective(&state);
        assert!(
            after < before,
            "objective did not descend: before {before}, after {after}"
        );
    }

    #[test]
    fn lifter_update_uses_post_update_energy_params() {
        // with a huge energy lr the gradient through the energy term flips
        // sign between the pre- and post-update energy networks; the actual
        // lifter update must match the post-update gradient
        let (train, _, spec) = tiny_setup(4, 2);
        let norm = Normalizer::from_camera(&train.camera);
        let data = normalize_dataset(&train, &norm);
        let mut cfg = tiny_cfg(1, false);
        cfg.objective.alpha = 1.0;
        cfg.lr_l = 10.0;
        cfg.batch_size = 4;
        let mut state = TrainState::init(&spec, &tiny_pn(), &tiny_ln(), &cfg).unwrap();
        let batch: Vec<usize> = (0..4).collect();

        let lifter_grad = |state: &TrainState, l_params: &ParamStore| -> Vec<f64> {
            let mut grads = vec![0.0; state.posenet_params.len()];
            for &i in &batch {
                let mut tape = Tape::new(state.posenet_params.flat(), l_params.flat());
                let xr = tape.leaves(&data[i].x.flat());
                let preds =
                    state.posenet.forward_on_tape(&mut tape, Space::Tracked, xr).unwrap();
                let xs: Vec<_> = xr.iter().collect();
                let e = state
                    .lossnet
                    .as_ref()
                    .unwrap()
                    .energy_on_tape(&mut tape, Space::Frozen, &xs, &preds)
                    .unwrap();
                let loss = objectives::task_loss_on_tape(
                    &mut tape,
                    &data[i].y,
                    &preds,
                    Some((e, cfg.objective.alpha)),
                )
                .unwrap();
                tape.backward_into(loss, &mut grads).unwrap();
            }
            for g in grads.iter_mut() {
                *g /= batch.len() as f64;
            }
            grads
        };

        let theta_before = state.lossnet_params.as_ref().unwrap().clone();
        let params_before = state.posenet_params.clone();
        let grad_before = lifter_grad(&state, &theta_before);
        let _ = train_step(&mut state, &data, &batch, &cfg, 0).unwrap();
        let theta_after = state.lossnet_params.as_ref().unwrap().clone();
        let grad_after = lifter_grad_with(&state, &params_before, &theta_after, &data, &batch, &cfg);

        // the actual update must equal one Adam step on grad_after
        let mut expect_params = params_before.clone();
        let mut adam = AdamState::new(expect_params.len());
        adam_step(&mut expect_params, &grad_after, &mut adam, cfg.lr_p).unwrap();
        for (a, b) in state.posenet_params.flat().iter().zip(expect_params.flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // and the pre-update gradient must disagree in sign somewhere,
        // otherwise this test has no power
        let flip = grad_before
            .iter()
            .zip(&grad_after)
            .any(|(x, y)| x.signum() != y.signum() && x.abs() > 1e-12 && y.abs() > 1e-12);
        assert!(flip, "energy update did not flip any lifter gradient sign");
    }

    fn lifter_grad_with(
        state: &TrainState,
        posenet_params: &ParamStore,
        l_params: &ParamStore,
        data: &[NormSample],
        batch: &[usize],
        cfg: &TrainConfig,
    ) -> Vec<f64> {
        let mut grads = vec![0.0; posenet_params.len()];
        for &i in batch {
            let mut tape = Tape::new(posenet_params.flat(), l_params.flat());
            let xr = tape.leaves(&data[i].x.flat());
            let preds = state.posenet.forward_on_tape(&mut tape, Space::Tracked, xr).unwrap();
            let xs: Vec<_> = xr.iter().collect();
            let e = state
                .lossnet
                .as_ref()
                .unwrap()
                .energy_on_tape(&mut tape, Space::Frozen, &xs, &preds)
                .unwrap();
            let loss = objectives::task_loss_on_tape(
                &mut tape,
                &data[i].y,
                &preds,
                Some((e, cfg.objective.alpha)),
            )
            .unwrap();
            tape.backward_into(loss, &mut grads).unwrap();
        }
        for g in grads.iter_mut() {
            *g /= batch.len() as f64;
        }
        grads
    }

    #[test]
    fn training_reduces_validation_error() {
        let (train, val, spec) = tiny_setup(200, 40);
        let mut cfg = tiny_cfg(8, true);
        cfg.lr_p = 1e-3;
        cfg.batch_size = 20;
        let out = train_run(&train, &val, &spec, &tiny_pn(), &tiny_ln(), &cfg, "d").unwrap();
        let first = out.history.records.first().unwrap().val.unwrap().mpjpe;
        let last = out.history.final_val().unwrap().mpjpe;
        assert!(last < first, "no progress: first {first}, last {last}");
    }

    #[test]
    fn history_csv_has_documented_columns() {
        let (train, val, spec) = tiny_setup(8, 4);
        let out =
            train_run(&train, &val, &spec, &tiny_pn(), &tiny_ln(), &tiny_cfg(1, true), "abc")
                .unwrap();
        let csv = out.history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "# config_digest=abc");
        assert_eq!(lines.next().unwrap(), TrainHistory::CSV_HEADER);
        let row = lines.next().unwrap();
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 9);
        // baseline: l_e and mean_energy columns are empty
        assert_eq!(cells[2], "");
        assert_eq!(cells[3], "");
        assert!(!cells[4].is_empty());
    }

    #[test]
    fn singleton_sweep_returns_the_single_config() {
        let (train, val, spec) = tiny_setup(8, 4);
        let grids =
            SweepGrids { lr_p: vec![1e-3], lr_l: vec![2e-4], alpha: vec![7e-3] };
        let base = tiny_cfg(1, false);
        let res = greedy_sweep(&grids, &train, &val, &spec, &tiny_pn(), &tiny_ln(), &base, "d")
            .unwrap();
        assert_eq!(res.best.lr_p, 1e-3);
        assert_eq!(res.best.lr_l, 2e-4);
        assert_eq!(res.best.objective.alpha, 7e-3);
        // one row per stage
        assert_eq!(res.rows.len(), 3);
        assert!(res.rows.iter().all(|r| r.mpjpe.is_some()));
    }

    #[test]
    fn sweep_replay_oracle() {
        // the emitted table re-derives the same greedy selection
        let (train, val, spec) = tiny_setup(12, 6);
        let grids = SweepGrids {
            lr_p: vec![5e-4, 1e-3],
            lr_l: vec![1e-4, 5e-4],
            alpha: vec![1e-3, 5e-3],
        };
        let base = tiny_cfg(1, false);
        let res = greedy_sweep(&grids, &train, &val, &spec, &tiny_pn(), &tiny_ln(), &base, "d")
            .unwrap();
        // stage 1 rows are the baseline rows
        let stage1: Vec<&SweepRow> =
            res.rows.iter().filter(|r| r.lr_l == 0.0 && r.alpha == 0.0).collect();
        assert_eq!(stage1.len(), 2);
        let best_lr_p = stage1
            .iter()
            .min_by(|a, b| a.mpjpe.unwrap().partial_cmp(&b.mpjpe.unwrap()).unwrap())
            .unwrap()
            .lr_p;
        assert_eq!(best_lr_p, res.best.lr_p);
        // the winner's mpjpe is minimal among all full-config rows
        let full: Vec<&SweepRow> = res.rows.iter().filter(|r| r.alpha != 0.0).collect();
        assert_eq!(full.len(), 4 + 2);
        let min = full
            .iter()
            .map(|r| r.mpjpe.unwrap())
            .fold(f64::INFINITY, f64::min);
        let winner_row = full
            .iter()
            .find(|r| {
                r.lr_p == res.best.lr_p
                    && r.lr_l == res.best.lr_l
                    && r.alpha == res.best.objective.alpha
            })
            .expect("winner row present");
        assert!(winner_row.mpjpe.unwrap() <= min + 1e-15);
    }

    #[test]
    fn sweep_csv_schema() {
        let rows = vec![
            SweepRow { lr_p: 1e-4, lr_l: 0.0, alpha: 0.0, mpjpe: Some(42.0), error: None },
            SweepRow { lr_p: 1e-4, lr_l: 1e-4, alpha: 5e-3, mpjpe: None, error: Some("boom".into()) },
        ];
        let csv = sweep_rows_to_csv(&rows, "xyz");
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "# config_digest=xyz");
        assert_eq!(lines.next().unwrap(), "lr_p,lr_l,alpha,mpjpe");
        let ok_row = lines.next().unwrap();
        assert_eq!(ok_row.split(',').count(), 4);
        let err_row = lines.next().unwrap();
        assert!(err_row.ends_with(",error"));
    }
}
