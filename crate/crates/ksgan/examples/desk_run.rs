use ksgan::metrics::{median_heuristic_bandwidth, mmd2, mode_coverage_8gaussians};
use ksgan::nn::{Activation, MlpSpec};
use ksgan::rng::RngState;
use ksgan::targets::{sample_target, TargetName};
use ksgan::trainer::{train, Method, NoopObserver, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let method = match args.get(1).map(|s| s.as_str()) {
        Some("gan") => Method::Gan,
        Some("wgan_gp") => Method::WganGp,
        _ => Method::Ksgan,
    };
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let updates: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20000);

    let mut cfg = TrainConfig::new(method, TargetName::EightGaussians);
    cfg.batch_size = 256;
    cfg.generator_updates_total = updates;
    cfg.k_phi = Some(if method == Method::Ksgan { 1 } else { 5 });
    cfg.k_theta = 1;
    cfg.seed = seed;
    cfg.eval_every = 1000;
    cfg.generator_arch = Some(MlpSpec::new(8, vec![128, 128, 128], 2, Activation::Relu));
    let mut critic = MlpSpec::new(2, vec![128, 128, 128], 1, Activation::LeakyRelu(0.2));
    critic.spectral_norm = method == Method::Gan;
    cfg.critic_arch = Some(critic);

    let t0 = Instant::now();
    let out = train(&cfg, None, 1, &mut NoopObserver).unwrap();
    println!("train done in {:?}", t0.elapsed());
    for r in &out.metrics {
        println!(
            "step {:6} critic {:+.4} gen {:+.4} pen {:.4} gks {:.4} mmd2 {:?}",
            r.generator_step, r.critic_loss, r.generator_loss, r.score_penalty, r.gks_estimate, r.mmd2
        );
    }

    // Final eval per the desk-scale protocol: 8192 held-out points.
    let mut gen_store = out.generator.clone();
    let heldout = sample_target(TargetName::EightGaussians, 8192, &mut RngState::stream(999, 0)).unwrap();
    let z = ksgan::targets::sample_latent(8192, 8, &mut RngState::stream(999, 1)).unwrap();
    let model = ksgan::nn::eval_forward(&mut gen_store, cfg.generator_arch.as_ref().unwrap(), &z.points).unwrap();
    let mut union = heldout.points.data().to_vec();
    union.extend_from_slice(model.data());
    let union = ksgan::tensor::Tensor::new(vec![16384, 2], union).unwrap();
    let bw = median_heuristic_bandwidth(&union).unwrap();
    let r = mmd2(&heldout.points, &model, bw, 1).unwrap();
    let cov = mode_coverage_8gaussians(&model, 0.01).unwrap();
    println!(
        "FINAL method {:?} seed {}: mmd2 {:.6e} (bw {:.4}) modes {} fractions {:?}",
        method, seed, r.mmd2, bw, cov.count, cov.fractions
    );
}
