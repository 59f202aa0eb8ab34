use sfdit_core::channel::{generate_dataset, ArrayGeometry, ChannelProfile};
use sfdit_core::diffusion::{compute_loss, sample_eps, ve_corrupt, LossKind};
use sfdit_core::dit::{DitConfig, DitModel};
use sfdit_core::rng::stream_rng;
use sfdit_core::trainer::*;
use sfdit_core::transforms::DftPair;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let dit_cfg = DitConfig { n_r: 16, n_t: 8, patch: 4, dim: 32, layers: 2, heads: 4, mlp_ratio: 2.0, cond_freq_max: 1e4 };
    let loss_kind = match args.get(3).map(|s| s.as_str()) { Some("x") => LossKind::XLoss, Some("eps") => LossKind::EpsLoss, _ => LossKind::VLoss };
    let train_cfg = TrainConfig { batch: 8, epochs: steps, lr, seed: 42, checkpoint_every: 100000, loss: loss_kind, ..TrainConfig::default() };
    let geom = ArrayGeometry::new(16, 8).unwrap();
    let channels = generate_dataset(geom, &ChannelProfile::synth_c(), 8, 42);
    let t0 = std::time::Instant::now();
    let state = train(&channels, &dit_cfg, &train_cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    for (s, l) in state.loss_history.iter().step_by((steps/20).max(1)) {
        println!("step {s:5}  loss {l:.4e}");
    }
    println!("last loss {:.4e}", state.loss_history.last().unwrap().1);
    // eval at fixed sigma
    let dft = DftPair::new(16, 8);
    let images = prepare_training_images(&channels, TrainDomain::Angular, &dft).unwrap();
    let model = DitModel::new(dit_cfg, state.params.clone());
    let mut rng = stream_rng(1000, 0);
    for sig in [0.1, 0.3, 1.0] {
        let mut eval = 0.0;
        for x0 in &images {
            let eps = sample_eps(&[2, 16, 8], &mut rng);
            let sample = ve_corrupt(x0, sig, &eps).unwrap();
            let x0_hat = model.forward(&sample.x_t, sig).unwrap();
            eval += compute_loss(LossKind::VLoss, &sample, &x0_hat).unwrap();
        }
        println!("eval v-loss @ sigma {sig}: {:.4e}  (x-mse {:.4e})", eval/8.0, eval/8.0*sig*sig);
    }
    println!("train time: {dt:.1}s ({:.1} steps/s)", steps as f64 / dt);
}
