use std::time::Instant;

fn main() {
    for &(m, k, n) in &[(16usize, 144usize, 15360usize), (128, 1152, 240), (64, 576, 960), (144, 16, 15360), (16, 15360, 144)] {
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.1).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.3).cos()).collect();
        let mut c = vec![0.0f32; m * n];
        let reps = 20;
        let t = Instant::now();
        for _ in 0..reps {
            crfnet_nn::gemm::gemm(m, k, n, &a, &b, &mut c);
        }
        let s = t.elapsed().as_secs_f64();
        println!("{m}x{k}x{n}: {:.2} GFLOP/s", 2.0 * (m * k * n * reps) as f64 / s / 1e9);
    }
}
