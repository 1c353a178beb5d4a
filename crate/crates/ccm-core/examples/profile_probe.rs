use ccm_core::consistency::{cct_loss, default_huber_c, ConsistencyModel};
use ccm_core::data::synth_lowlight;
use ccm_core::network::{forward_eval, UNetConfig};
use ccm_core::schedule::NoiseSchedule;
use ccm_core::tensor::{ops, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // dec0 conv1 shape: 96 -> 32 at 16x16
    let x: Vec<f32> = (0..96 * 256).map(|i| (i % 97) as f32 * 0.01).collect();
    let w: Vec<f32> = (0..32 * 96 * 9).map(|i| (i % 89) as f32 * 0.001).collect();
    let b = vec![0.1f32; 32];
    let reps = 200;
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let y = ops::conv2d_fwd(&x, &w, Some(&b), 96, 16, 16, 32, 3, 3, 16, 16, 1, 1);
        sink += y[0];
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let macs = 32.0 * 96.0 * 9.0 * 256.0;
    println!("conv 96->32@16x16 fwd: {:.3} ms  ({:.2} GFLOP/s)  sink={sink}", dt * 1e3, 2.0 * macs / dt / 1e9);

    let dy = vec![0.5f32; 32 * 256];
    let t0 = Instant::now();
    for _ in 0..reps {
        let (dx, dw, db) = ops::conv2d_bwd(&x, &w, &dy, 96, 16, 16, 32, 3, 3, 16, 16, 1, 1, true, true, true);
        sink += dx.unwrap()[0] + dw.unwrap()[0] + db.unwrap()[0];
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("conv 96->32@16x16 bwd: {:.3} ms  ({:.2} GFLOP/s)", dt * 1e3, 4.0 * macs / dt / 1e9);

    // Full model forward (eval) at default config.
    let cfg = UNetConfig::default();
    let params = ccm_core::network::init::<f32>(&cfg, 3).unwrap();
    let r = Tensor::<f32>::randn(&[3, 16, 16], &mut rng);
    let v = Tensor::<f32>::randn(&[3, 16, 16], &mut rng);
    let t0 = Instant::now();
    for i in 0..50 {
        let y = forward_eval(&cfg, &params, &r, &v, 1.0 + i as f64 * 0.1).unwrap();
        sink += y.data()[0];
    }
    println!("unet fwd eval: {:.3} ms", t0.elapsed().as_secs_f64() / 50.0 * 1e3);

    // Full cct_loss with grads.
    let model = ConsistencyModel::<f32>::new(cfg, NoiseSchedule::default(), 7).unwrap();
    let data = synth_lowlight(1, 4, 16).unwrap();
    let levels = model.sched.discretize(11).unwrap();
    let huber = default_huber_c(768);
    let z = Tensor::<f32>::randn(&[3, 16, 16], &mut rng);
    let t0 = Instant::now();
    for i in 0..20 {
        let out = cct_loss(&model, &data[0].r, &data[0].v, 1 + i % 10, &levels, &z, huber, true).unwrap();
        sink += out.loss as f32;
    }
    println!("cct_loss w/ grads: {:.3} ms   sink={sink}", t0.elapsed().as_secs_f64() / 20.0 * 1e3);
}
