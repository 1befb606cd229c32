use ksgan::metrics::{median_heuristic_bandwidth, mmd2};
use ksgan::rng::RngState;
use ksgan::targets::{sample_target, TargetName};
use std::time::Instant;

fn main() {
    let mut rng_a = RngState::stream(1, 0);
    let mut rng_b = RngState::stream(1, 1);
    let a = sample_target(TargetName::EightGaussians, 65536, &mut rng_a).unwrap().points;
    let b = sample_target(TargetName::EightGaussians, 65536, &mut rng_b).unwrap().points;

    // raw fill+select cost probe
    let n = 16384usize;
    let xs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
    let ys: Vec<f64> = (0..n).map(|i| (i as f64 * 0.53).cos()).collect();
    let t = Instant::now();
    let mut sq = vec![0.0f64; n * (n - 1) / 2];
    let mut pos = 0usize;
    for i in 0..n {
        let (ax, ay) = (xs[i], ys[i]);
        let out = &mut sq[pos..pos + (n - i - 1)];
        pos += n - i - 1;
        for ((slot, x), y) in out.iter_mut().zip(&xs[i + 1..]).zip(&ys[i + 1..]) {
            let dx = ax - x;
            let dy = ay - y;
            *slot = dx * dx + dy * dy;
        }
    }
    println!("fill {:?} ({} pairs)", t.elapsed(), sq.len());
    let t = Instant::now();
    let mid = (sq.len() - 1) / 2;
    let (_, med, _) = sq.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    println!("select {:?} med {:.6}", t.elapsed(), med.sqrt());

    let t = Instant::now();
    let mut union_data = a.data().to_vec();
    union_data.extend_from_slice(b.data());
    let union = ksgan::tensor::Tensor::new(vec![131072, 2], union_data).unwrap();
    let bw = median_heuristic_bandwidth(&union).unwrap();
    println!("bandwidth {:.6} in {:?}", bw, t.elapsed());

    let t = Instant::now();
    let r = mmd2(&a, &b, bw, 1).unwrap();
    println!("mmd2 {:.3e} in {:?}", r.mmd2, t.elapsed());
}
