// Manual probe of the relative structural claim; run with --ignored --nocapture.
use poselab_core::lossnet::{LossNetConfig, Mechanism, Variant};
use poselab_core::posenet::PoseNetConfig;
use poselab_core::seeds;
use poselab_core::skeleton::canonical_17;
use poselab_core::synthdata::{make_dataset, CameraModel, GeneratorConfig};
use poselab_core::trainer::{train_run, TrainConfig};

#[test]
#[ignore]
fn probe_relative_claim() {
    let spec = canonical_17();
    let camera = CameraModel::default();
    let n_train: usize = std::env::var("PROBE_TRAIN").map(|v| v.parse().unwrap()).unwrap_or(2000);
    let n_val: usize = std::env::var("PROBE_VAL").map(|v| v.parse().unwrap()).unwrap_or(500);
    let epochs: usize = std::env::var("PROBE_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(8);
    let batch: usize = std::env::var("PROBE_BATCH").map(|v| v.parse().unwrap()).unwrap_or(50);

    let mut gen = GeneratorConfig::canonical(n_train, 1001);
    gen.noise_2d_sigma = 2.0;
    let train = make_dataset(&gen, &camera).unwrap();
    let mut genv = GeneratorConfig::canonical(n_val, 2002);
    genv.noise_2d_sigma = 2.0;
    let val = make_dataset(&genv, &camera).unwrap();

    for seed in [0u64, 1, 2] {
        let pn = PoseNetConfig {
            hidden_width: 64,
            n_blocks: 2,
            init_scale: 1.0,
            seed: seeds::derive_seed(seed, "pn", 0),
        };
        let ln = LossNetConfig {
            variant: Variant::Graph,
            mechanism: Mechanism::M3,
            d_embed: 16,
            d_model: 32,
            heads: 4,
            depth: 2,
            spd_max: 8,
            mlp_hidden: 128,
            mlp_blocks: 2,
            edge_bias: false,
            seed: seeds::derive_seed(seed, "ln", 0),
        };
        let mut cfg = TrainConfig {
            epochs,
            batch_size: batch,
            seed: seeds::derive_seed(seed, "train", 0),
            eval_every: epochs.max(1),
            ..TrainConfig::default()
        };

        let t0 = std::time::Instant::now();
        cfg.baseline_mode = true;
        let base = train_run(&train, &val, &spec, &pn, &ln, &cfg, "probe").unwrap();
        cfg.baseline_mode = false;
        let seal = train_run(&train, &val, &spec, &pn, &ln, &cfg, "probe").unwrap();
        let bv = base.history.final_val().unwrap();
        let sv = seal.history.final_val().unwrap();
        println!(
            "seed {seed}: baseline mpjpe {:.3} lse {:.4} | seal mpjpe {:.3} lse {:.4} | mpjpe ratio {:.4} lse drop {:.1}% | {:.0} s",
            bv.mpjpe, bv.lse, sv.mpjpe, sv.lse,
            sv.mpjpe / bv.mpjpe,
            100.0 * (1.0 - sv.lse / bv.lse),
            t0.elapsed().as_secs_f64()
        );
    }
}
