//! Phase-level timing of one training iteration at the image-field shape.

use refold_core::nn::adam::Adam;
use refold_core::nn::{encode, Activation, BackwardScratch, BatchState, FastPlan, Mlp, NetworkConfig};

fn main() {
    refold_core::init();
    let total = 4096usize;
    let chunk: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(512);
    let cfg = NetworkConfig::new(2, 3)
        .with_channels(192)
        .with_activation(Activation::Sigmoid);
    let mlp = Mlp::<f32>::init(cfg.clone(), 0).unwrap();
    let mut mlp = mlp;
    let points: Vec<f32> = (0..total * 2).map(|i| (i % 97) as f32 / 97.0).collect();
    let targets: Vec<f32> = (0..total * 3).map(|i| (i % 31) as f32 / 31.0).collect();
    let ew = cfg.encoded_dim();
    let mut enc = vec![0.0f32; total * ew];
    encode::encode_batch(&points, 2, cfg.encoding_bands, &mut enc);

    let mut state = BatchState::new();
    let mut scratch = BackwardScratch::new();
    let mut grads = vec![0.0f32; mlp.param_count()];
    let mut d_out = vec![0.0f32; chunk * 3];
    let mut opt = Adam::new(mlp.param_count());
    let mut plan = FastPlan::build(&mlp);
    println!("fast plan: {}", plan.is_some());

    let iters = 200;
    let (mut t_fwd, mut t_dout, mut t_bwd, mut t_zero, mut t_adam, mut t_copy) =
        (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
    let mut t_pack = 0f64;
    let clock = std::time::Instant::now;
    let t_all = clock();
    for _ in 0..iters {
        let t = clock();
        for g in grads.iter_mut() { *g = 0.0; }
        t_zero += t.elapsed().as_secs_f64();
        let mut row = 0;
        while row < total {
            let b = chunk.min(total - row);
            let t = clock();
            state.prepare_encoded(&cfg, b, &enc[row * ew..(row + b) * ew]);
            t_copy += t.elapsed().as_secs_f64();
            let t = clock();
            mlp.forward_encoded_with(&mut state, plan.as_ref());
            t_fwd += t.elapsed().as_secs_f64();
            let t = clock();
            let tg = &targets[row * 3..(row + b) * 3];
            for ((dz, &y), &tv) in d_out[..b * 3].iter_mut().zip(state.outputs()).zip(tg) {
                *dz = 2.0 * (y - tv) / (total * 3) as f32;
            }
            t_dout += t.elapsed().as_secs_f64();
            let t = clock();
            mlp.backward_batch_with(&[], &state, &d_out[..b * 3], &mut scratch, Some(&mut grads), None, plan.as_ref());
            t_bwd += t.elapsed().as_secs_f64();
            row += b;
        }
        let t = clock();
        opt.step(mlp.params_mut(), &grads, 0.001);
        t_adam += t.elapsed().as_secs_f64();
        let t = clock();
        if let Some(p) = plan.as_mut() { p.refresh(&mlp); }
        t_pack += t.elapsed().as_secs_f64();
    }
    let total_t = t_all.elapsed().as_secs_f64();
    let per = 1e3 / iters as f64;
    println!("zero  {:.3} ms", t_zero * per);
    println!("copy  {:.3} ms", t_copy * per);
    println!("fwd   {:.3} ms", t_fwd * per);
    println!("dout  {:.3} ms", t_dout * per);
    println!("bwd   {:.3} ms", t_bwd * per);
    println!("adam  {:.3} ms", t_adam * per);
    println!("pack  {:.3} ms", t_pack * per);
    println!("total {:.3} ms ({} iters)", total_t * per, iters);
}
