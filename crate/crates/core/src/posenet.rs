//! The pose lifter: a residual MLP mapping flattened J x 2 keypoints to a
//! root-relative J x 3 pose. The root joint's output is zero by construction
//! (the output layer only produces the non-root joints).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LinearLayout};
use crate::params::ParamStore;
use crate::pose::{Pose2D, Pose3D};
use crate::seeds;
use crate::tape::{NodeRange, Space, Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoseNetConfig {
    pub hidden_width: usize,
    pub n_blocks: usize,
    /// Multiplier on the per-layer 1/sqrt(fan_in) uniform init bound.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for PoseNetConfig {
    fn default() -> PoseNetConfig {
        PoseNetConfig { hidden_width: 256, n_blocks: 2, init_scale: 1.0, seed: 1 }
    }
}

impl PoseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width < 1 {
            return Err(Error::Contract("hidden width must be at least 1".into()));
        }
        if self.init_scale <= 0.0 {
            return Err(Error::Contract("init scale must be positive".into()));
        }
        Ok(())
    }

    /// Total parameter count as a pure function of (J, width, blocks).
    pub fn param_count(&self, j: usize) -> usize {
        let h = self.hidden_width;
        LinearLayout::param_count(2 * j, h)
            + self.n_blocks * 2 * LinearLayout::param_count(h, h)
            + LinearLayout::param_count(h, 3 * (j - 1))
    }
}

/// Resolved network: input linear (+ rectifier), `n_blocks` residual blocks
/// (linear, rectifier, linear, skip), output linear producing the non-root
/// joints.
pub struct PoseNet {
    pub config: PoseNetConfig,
    pub joints: usize,
    pub root: usize,
    input: LinearLayout,
    blocks: Vec<(LinearLayout, LinearLayout)>,
    output: LinearLayout,
}

pub const PARAM_PREFIX: &str = "posenet";

impl PoseNet {
    /// Initialize fresh parameters into a new store.
    pub fn init(config: &PoseNetConfig, joints: usize, root: usize) -> Result<(PoseNet, ParamStore)> {
        config.validate()?;
        if joints < 2 || root >= joints {
            return Err(Error::Contract("need at least two joints and a valid root".into()));
        }
        let mut store = ParamStore::new(config.seed);
        let mut rng = seeds::rng_from(config.seed);
        let h = config.hidden_width;
        let input = LinearLayout::init(
            &mut store,
            &format!("{PARAM_PREFIX}.in"),
            2 * joints,
            h,
            config.init_scale,
            &mut rng,
        )?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let l1 = LinearLayout::init(
                &mut store,
                &format!("{PARAM_PREFIX}.block{b}.l1"),
                h,
                h,
                config.init_scale,
                &mut rng,
            )?;
            let l2 = LinearLayout::init(
                &mut store,
                &format!("{PARAM_PREFIX}.block{b}.l2"),
                h,
                h,
                config.init_scale,
                &mut rng,
            )?;
            blocks.push((l1, l2));
        }
        let output = LinearLayout::init(
            &mut store,
            &format!("{PARAM_PREFIX}.out"),
            h,
            3 * (joints - 1),
            config.init_scale,
            &mut rng,
        )?;
        let net = PoseNet { config: config.clone(), joints, root, input, blocks, output };
        Ok((net, store))
    }

    /// Resolve layouts against an existing (e.g. loaded) store.
    pub fn resolve(
        config: &PoseNetConfig,
        joints: usize,
        root: usize,
        store: &ParamStore,
    ) -> Result<PoseNet> {
        config.validate()?;
        let input = LinearLayout::resolve(store, &format!("{PARAM_PREFIX}.in"))?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            blocks.push((
                LinearLayout::resolve(store, &format!("{PARAM_PREFIX}.block{b}.l1"))?,
                LinearLayout::resolve(store, &format!("{PARAM_PREFIX}.block{b}.l2"))?,
            ));
        }
        let output = LinearLayout::resolve(store, &format!("{PARAM_PREFIX}.out"))?;
        if input.in_dim != 2 * joints {
            return Err(Error::Contract(format!(
                "checkpoint expects {} input joints, dataset has {joints}",
                input.in_dim / 2
            )));
        }
        Ok(PoseNet { config: config.clone(), joints, root, input, blocks, output })
    }

    /// Tape forward pass. `x` is a contiguous run of 2J input nodes; returns
    /// 3J output vars with the root entries pointing at a zero-valued leaf.
    pub fn forward_on_tape(&self, tape: &mut Tape, space: Space, x: NodeRange) -> Result<Vec<Var>> {
        if x.len() != 2 * self.joints {
            return Err(Error::Contract(format!(
                "input has {} coordinates, expected {}",
                x.len(),
                2 * self.joints
            )));
        }
        let h0 = nn::linear(tape, space, &self.input, x);
        let mut h = nn::relu_range(tape, h0);
        for (l1, l2) in &self.blocks {
            let a = nn::linear(tape, space, l1, h);
            let a = nn::relu_range(tape, a);
            let b = nn::linear(tape, space, l2, a);
            h = nn::add_ranges(tape, h, b);
        }
        let out = nn::linear(tape, space, &self.output, h);
        let zero = tape.leaf(0.0);
        let mut vars = Vec::with_capacity(3 * self.joints);
        let mut k = 0;
        for j in 0..self.joints {
            if j == self.root {
                vars.extend([zero, zero, zero]);
            } else {
                vars.extend([out.var(k), out.var(k + 1), out.var(k + 2)]);
                k += 3;
            }
        }
        Ok(vars)
    }

    /// Value-only forward pass; bit-identical to the tape path.
    pub fn forward_value(&self, params: &[f64], x: &Pose2D) -> Result<Pose3D> {
        if x.joints() != self.joints {
            return Err(Error::Contract(format!(
                "input has {} joints, expected {}",
                x.joints(),
                self.joints
            )));
        }
        let flat = x.flat();
        let mut h = Vec::new();
        let mut tmp = Vec::new();
        let mut tmp2 = Vec::new();
        nn::linear_value(params, &self.input, &flat, &mut tmp);
        nn::relu_value(&tmp, &mut h);
        for (l1, l2) in &self.blocks {
            nn::linear_value(params, l1, &h, &mut tmp);
            nn::relu_value(&tmp, &mut tmp2);
            nn::linear_value(params, l2, &tmp2, &mut tmp);
            let mut next = Vec::new();
            nn::add_value(&h, &tmp, &mut next);
            h = next;
        }
        nn::linear_value(params, &self.output, &h, &mut tmp);
        let mut joints = Vec::with_capacity(self.joints);
        let mut k = 0;
        for j in 0..self.joints {
            if j == self.root {
                joints.push([0.0, 0.0, 0.0]);
            } else {
                joints.push([tmp[k], tmp[k + 1], tmp[k + 2]]);
                k += 3;
            }
        }
        Ok(Pose3D(joints))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> PoseNetConfig {
        PoseNetConfig { hidden_width: 16, n_blocks: 2, init_scale: 1.0, seed: 4 }
    }

    fn random_input(j: usize, seed: u64) -> Pose2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Pose2D((0..j).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
    }

    #[test]
    fn param_count_formula_holds() {
        let cfg = tiny_config();
        let (_, store) = PoseNet::init(&cfg, 17, 0).unwrap();
        assert_eq!(store.len(), cfg.param_count(17));
        let big = PoseNetConfig::default();
        let (_, store2) = PoseNet::init(&big, 17, 0).unwrap();
        assert_eq!(store2.len(), big.param_count(17));
    }

    #[test]
    fn deterministic_and_matches_tape_path() {
        let cfg = tiny_config();
        let (net, store) = PoseNet::init(&cfg, 17, 0).unwrap();
        let x = random_input(17, 8);
        let a = net.forward_value(store.flat(), &x).unwrap();
        let b = net.forward_value(store.flat(), &x).unwrap();
        assert_eq!(a, b);

        let mut tape = Tape::new(store.flat(), &[]);
        let xr = tape.leaves(&x.flat());
        let vars = net.forward_on_tape(&mut tape, Space::Tracked, xr).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let (j, c) = (k / 3, k % 3);
            assert_eq!(tape.value(*v).to_bits(), a.0[j][c].to_bits());
        }
    }

    #[test]
    fn zero_params_give_zero_pose() {
        let cfg = tiny_config();
        let (net, mut store) = PoseNet::init(&cfg, 17, 0).unwrap();
        for v in store.flat_mut() {
            *v = 0.0;
        }
        let y = net.forward_value(store.flat(), &random_input(17, 1)).unwrap();
        assert!(y.0.iter().all(|p| *p == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn root_output_is_exactly_zero() {
        let cfg = tiny_config();
        let (net, store) = PoseNet::init(&cfg, 17, 0).unwrap();
        for s in 0..5 {
            let y = net.forward_value(store.flat(), &random_input(17, s)).unwrap();
            assert_eq!(y.0[0], [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let cfg = PoseNetConfig { hidden_width: 8, n_blocks: 1, init_scale: 1.0, seed: 2 };
        let (net, store) = PoseNet::init(&cfg, 5, 0).unwrap();
        let x = random_input(5, 3);
        let flat = x.flat();

        let h = 1e-5;
        for out_k in [3usize, 7, 11] {
            let mut tape = Tape::new(store.flat(), &[]);
            let xr = tape.leaves(&flat);
            let vars = net.forward_on_tape(&mut tape, Space::Tracked, xr).unwrap();
            tape.backward(vars[out_k]).unwrap();
            for i in 0..flat.len() {
                let ad = tape.grad(xr.var(i));
                let mut fp = flat.clone();
                fp[i] += h;
                let yp = net
                    .forward_value(store.flat(), &Pose2D::from_flat(&fp).unwrap())
                    .unwrap()
                    .flat()[out_k];
                fp[i] -= 2.0 * h;
                let ym = net
                    .forward_value(store.flat(), &Pose2D::from_flat(&fp).unwrap())
                    .unwrap()
                    .flat()[out_k];
                let fd = (yp - ym) / (2.0 * h);
                let rel = (ad - fd).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-4, "out {out_k} in {i}: ad {ad} fd {fd}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let cfg = tiny_config();
        let (net, store) = PoseNet::init(&cfg, 17, 0).unwrap();
        assert!(net.forward_value(store.flat(), &random_input(16, 0)).is_err());
    }
}
