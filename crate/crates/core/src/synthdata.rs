//! Forward-kinematics synthetic pose generator with a pinhole camera.
//!
//! Poses are produced by sampling per-segment direction deviations inside
//! configured angular ranges and chaining segments from the root, so every
//! generated pose has exactly the configured bone lengths. Mirrored segments
//! share one length, which pins the ground-truth limb-symmetry error to zero.
//! Consecutive frames interpolate the sampled angles between keyframes so
//! that nearby frames are correlated.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D};
use crate::seeds;
use crate::skeleton::SkeletonSpec;

const DATASET_MAGIC: &[u8; 8] = b"PLDSET01";
const DATASET_VERSION: u32 = 1;

/// Pinhole camera looking down +z; the skeleton root sits `subject_depth`
/// millimeters in front of it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraModel {
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point in pixels.
    pub principal_point: [f64; 2],
    /// Distance of the skeleton root from the camera, millimeters.
    pub subject_depth: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.focal <= 0.0 {
            return Err(Error::Contract("camera focal length must be positive".into()));
        }
        if self.subject_depth <= 0.0 {
            return Err(Error::Contract("camera subject depth must be positive".into()));
        }
        Ok(())
    }
}

impl Default for CameraModel {
    fn default() -> CameraModel {
        CameraModel { focal: 1150.0, principal_point: [500.0, 500.0], subject_depth: 4500.0 }
    }
}

/// Standard pinhole projection of a root-relative pose:
/// `pixel = principal_point + focal * (x, y) / (subject_depth + z)`.
pub fn project(camera: &CameraModel, pose: &Pose3D) -> Result<Pose2D> {
    let mut out = Vec::with_capacity(pose.joints());
    for (j, p) in pose.0.iter().enumerate() {
        let depth = camera.subject_depth + p[2];
        if depth <= 0.0 {
            return Err(Error::Numeric(format!(
                "joint {j} has non-positive projected depth {depth}"
            )));
        }
        out.push([
            camera.principal_point[0] + camera.focal * p[0] / depth,
            camera.principal_point[1] + camera.focal * p[1] / depth,
        ]);
    }
    Ok(Pose2D(out))
}

/// Configuration of the synthetic pose generator. Lengths are per segment in
/// millimeters; `joint_angle_ranges` caps the polar deviation (radians) of
/// each segment's direction from its rest direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub spec: SkeletonSpec,
    pub bone_lengths: Vec<f64>,
    pub rest_directions: Vec<[f64; 3]>,
    pub joint_angle_ranges: Vec<f64>,
    /// Standard deviation of Gaussian pixel noise added to the 2D inputs.
    pub noise_2d_sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Angles are re-sampled every this many frames and interpolated between.
    pub keyframe_interval: usize,
}

impl GeneratorConfig {
    /// Default generator over the built-in 17-joint skeleton.
    pub fn canonical(n_samples: usize, seed: u64) -> GeneratorConfig {
        let spec = crate::skeleton::canonical_17();
        let bone_lengths = vec![
            130.0, 450.0, 440.0, // right leg
            130.0, 450.0, 440.0, // left leg
            230.0, 250.0, 120.0, 115.0, // spine, thorax, neck, head
            150.0, 280.0, 250.0, // left arm
            150.0, 280.0, 250.0, // right arm
        ];
        let d = |x: f64, y: f64, z: f64| {
            let n = (x * x + y * y + z * z).sqrt();
            [x / n, y / n, z / n]
        };
        let rest_directions = vec![
            d(-1.0, 0.0, 0.0),
            d(0.0, -1.0, 0.0),
            d(0.0, -1.0, 0.0),
            d(1.0, 0.0, 0.0),
            d(0.0, -1.0, 0.0),
            d(0.0, -1.0, 0.0),
            d(0.0, 1.0, 0.0),
            d(0.0, 1.0, 0.0),
            d(0.0, 1.0, 0.0),
            d(0.0, 1.0, 0.0),
            d(1.0, 0.0, 0.0),
            d(1.0, -0.5, 0.0),
            d(1.0, -0.5, 0.0),
            d(-1.0, 0.0, 0.0),
            d(-1.0, -0.5, 0.0),
            d(-1.0, -0.5, 0.0),
        ];
        let joint_angle_ranges = vec![
            0.15, 0.6, 0.6, // right leg
            0.15, 0.6, 0.6, // left leg
            0.2, 0.2, 0.3, 0.3, // spine chain
            0.15, 0.7, 0.7, // left arm
            0.15, 0.7, 0.7, // right arm
        ];
        GeneratorConfig {
            spec,
            bone_lengths,
            rest_directions,
            joint_angle_ranges,
            noise_2d_sigma: 0.0,
            n_samples,
            seed,
            keyframe_interval: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate().map_err(|d| Error::Structural(d.to_string()))?;
        let s = self.spec.segment_count();
        if self.bone_lengths.len() != s
            || self.rest_directions.len() != s
            || self.joint_angle_ranges.len() != s
        {
            return Err(Error::Contract("per-segment config lengths must match segment count".into()));
        }
        if self.bone_lengths.iter().any(|&l| l <= 0.0) {
            return Err(Error::Contract("all bone lengths must be positive".into()));
        }
        for &(l, r) in &self.spec.symmetry_pairs {
            if self.bone_lengths[l] != self.bone_lengths[r] {
                return Err(Error::Contract(format!(
                    "mirrored segments {l} and {r} must share one length"
                )));
            }
        }
        if self.joint_angle_ranges.iter().any(|&a| a < 0.0) || self.noise_2d_sigma < 0.0 {
            return Err(Error::Contract("angle ranges and noise sigma must be non-negative".into()));
        }
        if self.keyframe_interval == 0 {
            return Err(Error::Contract("keyframe interval must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable content hash of the generator configuration.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |bytes: &[u8]| h.update(bytes);
        for n in &self.spec.joint_names {
            feed(n.as_bytes());
            feed(&[0]);
        }
        for &(a, b) in &self.spec.edges {
            feed(&(a as u64).to_le_bytes());
            feed(&(b as u64).to_le_bytes());
        }
        for &(a, b) in &self.spec.symmetry_pairs {
            feed(&(a as u64).to_le_bytes());
            feed(&(b as u64).to_le_bytes());
        }
        for &s in &self.spec.limb_segments {
            feed(&(s as u64).to_le_bytes());
        }
        feed(&(self.spec.root as u64).to_le_bytes());
        for &l in &self.bone_lengths {
            feed(&l.to_le_bytes());
        }
        for d in &self.rest_directions {
            for &c in d {
                feed(&c.to_le_bytes());
            }
        }
        for &a in &self.joint_angle_ranges {
            feed(&a.to_le_bytes());
        }
        feed(&self.noise_2d_sigma.to_le_bytes());
        feed(&(self.n_samples as u64).to_le_bytes());
        feed(&self.seed.to_le_bytes());
        feed(&(self.keyframe_interval as u64).to_le_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// One training sample: noisy 2D input, clean ground-truth 2D, and the
/// root-relative 3D ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Pose2D,
    pub u: Pose2D,
    pub y: Pose3D,
    pub frame_index: u64,
}

/// An in-memory dataset plus its provenance.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub camera: CameraModel,
    pub samples: Vec<Sample>,
    pub gen_digest: String,
    pub joints: usize,
}

// ── pose generation ─────────────────────────────────────────────────

/// Per-segment sampled deviation: azimuth and polar angle from the rest
/// direction.
#[derive(Clone, Debug)]
struct SegmentAngles {
    azimuth: Vec<f64>,
    polar: Vec<f64>,
}

fn sample_angles(config: &GeneratorConfig, rng: &mut impl Rng) -> SegmentAngles {
    let s = config.spec.segment_count();
    let mut azimuth = Vec::with_capacity(s);
    let mut polar = Vec::with_capacity(s);
    for i in 0..s {
        azimuth.push(rng.gen_range(0.0..std::f64::consts::TAU));
        let cap = config.joint_angle_ranges[i];
        polar.push(if cap > 0.0 { rng.gen_range(0.0..=cap) } else { 0.0 });
    }
    SegmentAngles { azimuth, polar }
}

fn lerp_angles(a: &SegmentAngles, b: &SegmentAngles, t: f64) -> SegmentAngles {
    let mix = |x: &[f64], y: &[f64]| {
        x.iter().zip(y).map(|(&p, &q)| p + (q - p) * t).collect::<Vec<f64>>()
    };
    SegmentAngles { azimuth: mix(&a.azimuth, &b.azimuth), polar: mix(&a.polar, &b.polar) }
}

fn deviated_direction(rest: [f64; 3], azimuth: f64, polar: f64) -> [f64; 3] {
    let n = (rest[0] * rest[0] + rest[1] * rest[1] + rest[2] * rest[2]).sqrt();
    let r = [rest[0] / n, rest[1] / n, rest[2] / n];
    let helper = if r[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let e1 = normalize(cross(helper, r));
    let e2 = cross(r, e1);
    let (cu, su) = (polar.cos(), polar.sin());
    let (ca, sa) = (azimuth.cos(), azimuth.sin());
    [
        cu * r[0] + su * (ca * e1[0] + sa * e2[0]),
        cu * r[1] + su * (ca * e1[1] + sa * e2[1]),
        cu * r[2] + su * (ca * e1[2] + sa * e2[2]),
    ]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn forward_kinematics(config: &GeneratorConfig, angles: &SegmentAngles) -> Pose3D {
    let spec = &config.spec;
    let j = spec.joint_count();
    let mut pos = vec![[0.0f64; 3]; j];
    // walk the tree from the root; each segment's direction points from
    // edges[s].0 to edges[s].1 and is negated when traversed backwards
    let mut seg_at = vec![Vec::new(); j];
    for (s, &(a, b)) in spec.edges.iter().enumerate() {
        seg_at[a].push((b, s, 1.0));
        seg_at[b].push((a, s, -1.0));
    }
    let mut seen = vec![false; j];
    seen[spec.root] = true;
    let mut queue = std::collections::VecDeque::from([spec.root]);
    while let Some(u) = queue.pop_front() {
        for &(v, s, sign) in &seg_at[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            let dir =
                deviated_direction(config.rest_directions[s], angles.azimuth[s], angles.polar[s]);
            let len = config.bone_lengths[s];
            pos[v] = [
                pos[u][0] + sign * len * dir[0],
                pos[u][1] + sign * len * dir[1],
                pos[u][2] + sign * len * dir[2],
            ];
            queue.push_back(v);
        }
    }
    Pose3D(pos)
}

/// Sample one pose from the generator: per-segment angles drawn inside the
/// configured ranges, then forward kinematics from the root.
pub fn generate_pose(config: &GeneratorConfig, rng: &mut impl Rng) -> Pose3D {
    forward_kinematics(config, &sample_angles(config, rng))
}

fn keyframe_angles(config: &GeneratorConfig, kf: u64) -> SegmentAngles {
    let mut rng = seeds::stream(config.seed, "keyframe", kf);
    sample_angles(config, &mut rng)
}

/// Pose at a frame index, interpolating keyframe angles.
pub fn pose_at_frame(config: &GeneratorConfig, frame: u64) -> Pose3D {
    let interval = config.keyframe_interval as u64;
    let kf = frame / interval;
    let t = (frame % interval) as f64 / interval as f64;
    let a = keyframe_angles(config, kf);
    let angles = if t == 0.0 {
        a
    } else {
        let b = keyframe_angles(config, kf + 1);
        lerp_angles(&a, &b, t)
    };
    forward_kinematics(config, &angles)
}

/// Generate the full dataset: `u = project(y)`, `x = u + noise`. Deterministic
/// given the config seed; samples carry sequential frame indices.
pub fn make_dataset(config: &GeneratorConfig, camera: &CameraModel) -> Result<Dataset> {
    config.validate()?;
    camera.validate()?;
    let mut samples = Vec::with_capacity(config.n_samples);
    for f in 0..config.n_samples as u64 {
        let y = pose_at_frame(config, f);
        let u = project(camera, &y)?;
        let x = if config.noise_2d_sigma > 0.0 {
            let mut rng = seeds::stream(config.seed, "noise2d", f);
            Pose2D(
                u.0.iter()
                    .map(|p| {
                        let dx = seeds::gaussian(&mut rng);
                        let dy = seeds::gaussian(&mut rng);
                        [p[0] + config.noise_2d_sigma * dx, p[1] + config.noise_2d_sigma * dy]
                    })
                    .collect(),
            )
        } else {
            u.clone()
        };
        samples.push(Sample { x, u, y, frame_index: f });
    }
    Ok(Dataset {
        camera: camera.clone(),
        samples,
        gen_digest: config.digest(),
        joints: config.spec.joint_count(),
    })
}

// ── dataset files ────────────────────────────────────────────────────

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.joints as u32).to_le_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        w.write_all(&self.camera.focal.to_le_bytes())?;
        w.write_all(&self.camera.principal_point[0].to_le_bytes())?;
        w.write_all(&self.camera.principal_point[1].to_le_bytes())?;
        w.write_all(&self.camera.subject_depth.to_le_bytes())?;
        w.write_all(&(self.gen_digest.len() as u32).to_le_bytes())?;
        w.write_all(self.gen_digest.as_bytes())?;
        for s in &self.samples {
            w.write_all(&s.frame_index.to_le_bytes())?;
            for p in s.u.0.iter() {
                w.write_all(&p[0].to_le_bytes())?;
                w.write_all(&p[1].to_le_bytes())?;
            }
            for p in s.x.0.iter() {
                w.write_all(&p[0].to_le_bytes())?;
                w.write_all(&p[1].to_le_bytes())?;
            }
            for p in s.y.0.iter() {
                w.write_all(&p[0].to_le_bytes())?;
                w.write_all(&p[1].to_le_bytes())?;
                w.write_all(&p[2].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Dataset> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let joints = read_u32(r)? as usize;
        let n = read_u64(r)? as usize;
        let focal = read_f64(r)?;
        let px = read_f64(r)?;
        let py = read_f64(r)?;
        let depth = read_f64(r)?;
        let dlen = read_u32(r)? as usize;
        let mut dbuf = vec![0u8; dlen];
        r.read_exact(&mut dbuf)?;
        let gen_digest =
            String::from_utf8(dbuf).map_err(|_| Error::Format("invalid digest utf8".into()))?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let frame_index = read_u64(r)?;
            let mut uv = Vec::with_capacity(joints);
            for _ in 0..joints {
                uv.push([read_f64(r)?, read_f64(r)?]);
            }
            let u = Pose2D(uv);
            let mut xv = Vec::with_capacity(joints);
            for _ in 0..joints {
                xv.push([read_f64(r)?, read_f64(r)?]);
            }
            let x = Pose2D(xv);
            let mut yv = Vec::with_capacity(joints);
            for _ in 0..joints {
                yv.push([read_f64(r)?, read_f64(r)?, read_f64(r)?]);
            }
            samples.push(Sample { x, u, y: Pose3D(yv), frame_index });
        }
        Ok(Dataset {
            camera: CameraModel { focal, principal_point: [px, py], subject_depth: depth },
            samples,
            gen_digest,
            joints,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Dataset::read_from(&mut f)
    }

    /// Plain-text export for cross-language checks: one sample per line,
    /// columns `frame u[x y]*J x[x y]*J y[x y z]*J`, space-separated,
    /// full double precision.
    pub fn export_text(&self, w: &mut impl Write) -> Result<()> {
        for s in &self.samples {
            let mut cols = vec![s.frame_index.to_string()];
            for p in s.u.0.iter() {
                cols.push(format!("{:.16e}", p[0]));
                cols.push(format!("{:.16e}", p[1]));
            }
            for p in s.x.0.iter() {
                cols.push(format!("{:.16e}", p[0]));
                cols.push(format!("{:.16e}", p[1]));
            }
            for p in s.y.0.iter() {
                cols.push(format!("{:.16e}", p[0]));
                cols.push(format!("{:.16e}", p[1]));
                cols.push(format!("{:.16e}", p[2]));
            }
            writeln!(w, "{}", cols.join(" "))?;
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
