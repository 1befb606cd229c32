use std::time::Instant;
use std::hint::black_box;

fn main() {
    let n = 16384usize;
    let xs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
    let ys: Vec<f64> = (0..n).map(|i| (i as f64 * 0.53).cos()).collect();

    // accumulate-only (no buffer)
    let t = Instant::now();
    let mut acc = 0.0f64;
    for i in 0..n {
        let (ax, ay) = (xs[i], ys[i]);
        let mut local = 0.0;
        for (x, y) in xs[i + 1..].iter().zip(&ys[i + 1..]) {
            let dx = ax - x;
            let dy = ay - y;
            local += dx * dx + dy * dy;
        }
        acc += local;
    }
    let pairs = n * (n - 1) / 2;
    println!("accumulate: {:.2} ns/pair (acc={:.3})", t.elapsed().as_secs_f64() / pairs as f64 * 1e9, black_box(acc));

    // buffer-write variant, pre-touched buffer
    let mut sq = vec![0.0f64; pairs];
    black_box(&mut sq);
    let t = Instant::now();
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
    println!("write (warm): {:.2} ns/pair", t.elapsed().as_secs_f64() / pairs as f64 * 1e9);
    black_box(&sq);
}
