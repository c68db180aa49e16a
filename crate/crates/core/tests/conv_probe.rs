// Manual baseline-convergence probe; --ignored --nocapture.
use poselab_core::lossnet::{LossNetConfig, Mechanism, Variant};
use poselab_core::posenet::PoseNetConfig;
use poselab_core::skeleton::canonical_17;
use poselab_core::synthdata::{make_dataset, CameraModel, GeneratorConfig};
use poselab_core::trainer::{train_run, TrainConfig};

#[test]
#[ignore]
fn probe_baseline_convergence() {
    let spec = canonical_17();
    let camera = CameraModel::default();
    let n: usize = std::env::var("PROBE_TRAIN").map(|v| v.parse().unwrap()).unwrap_or(5000);
    let epochs: usize = std::env::var("PROBE_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(60);
    let batch: usize = std::env::var("PROBE_BATCH").map(|v| v.parse().unwrap()).unwrap_or(4);
    let mut gen = GeneratorConfig::canonical(n, 1001);
    gen.noise_2d_sigma = 2.0;
    let train = make_dataset(&gen, &camera).unwrap();
    let mut genv = GeneratorConfig::canonical(1000, 2002);
    genv.noise_2d_sigma = 2.0;
    let val = make_dataset(&genv, &camera).unwrap();
    let pn = PoseNetConfig { hidden_width: 64, n_blocks: 2, init_scale: 1.0, seed: 11 };
    let ln = LossNetConfig {
        variant: Variant::Graph, mechanism: Mechanism::M3, d_embed: 16, d_model: 32,
        heads: 4, depth: 2, spd_max: 8, mlp_hidden: 128, mlp_blocks: 2, edge_bias: false, seed: 12,
    };
    let cfg = TrainConfig {
        epochs, batch_size: batch, seed: 13, eval_every: 4, baseline_mode: true,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let out = train_run(&train, &val, &spec, &pn, &ln, &cfg, "conv").unwrap();
    for r in &out.history.records {
        if let Some(v) = r.val {
            println!("epoch {:3} ({:6} steps): mpjpe {:.2} lse {:.3} bsle {:.3}", r.epoch, r.epoch * n / batch, v.mpjpe, v.lse, v.bsle);
        }
    }
    println!("total {:.0} s", t0.elapsed().as_secs_f64());
}
