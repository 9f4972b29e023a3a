use drhuman::autodiff::Tape;
use drhuman::params::ParamSet;
use drhuman::texture::{coarse_texture, init_generator_params, TextureStackConfig};
use std::time::Instant;

fn main() {
    let cfg = TextureStackConfig::default();
    let params: ParamSet = init_generator_params("gtn", 1, &cfg, 0);
    let xv: Vec<f64> = (0..128 * 128).map(|i| ((i * 7) % 3) as f64 * 0.5).collect();

    let run = || {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(vec![1, 128, 128], xv.clone()).unwrap();
        let out = coarse_texture(&mut tape, &bound, x).unwrap();
        let loss = tape.sum(out, None).unwrap();
        tape.backward(loss).unwrap();
        tape.data(loss)[0]
    };
    run();
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        run();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("G_TN fwd+bwd: {:.3} s/pass ({:.1} s/step at batch 8)", dt, dt * 8.0);
}
