use diffsr_core::diffusion::*;
use diffsr_core::field::NormSpec;
use diffsr_core::nn::Tensor4;
use diffsr_core::synthdata::{gen_scenes, StormParams};
use diffsr_core::transform::*;
use std::time::Instant;

#[test]
#[ignore]
fn bench_pipeline() {
    let norm = NormSpec::default();
    let scenes = gen_scenes(&StormParams::default(), 8, 64, 64, 100).unwrap();

    // TM default config at 64x64.
    let cfg = TransformConfig::default();
    let t0 = Instant::now();
    let steps = 50;
    let _ = train_tm(&scenes, &cfg, &norm, steps, 4, 1).unwrap();
    let per_step = t0.elapsed() / steps as u32;
    println!("TM default b4: {per_step:?}/step -> 2000 steps = {:?}", per_step * 2000);

    // Denoiser variants.
    for (base, depth, batch) in [(16usize, 2usize, 2usize), (12, 2, 2), (16, 2, 1), (8, 2, 2)] {
        let dcfg = DenoiserConfig { base_channels: base, depth, time_dim: 64, condition_channels: 4 };
        let s = build_schedule(200, 1e-4, 0.02).unwrap();
        let t0 = Instant::now();
        let steps = 20;
        let out = train_diffusion(&scenes, None, ConditionMode::SatelliteOnly, &dcfg, &s, &norm, steps, batch, 1e-4, 2).unwrap();
        let per_step = t0.elapsed() / steps as u32;
        println!("diff base={base} depth={depth} b{batch}: {per_step:?}/step -> 2000 = {:?}", per_step * 2000);

        // Sampling speed.
        let items = prepare_items(&scenes[..1], None, ConditionMode::SatelliteOnly, &norm).unwrap();
        let cond = Tensor4::new(items[0].condition.clone()).unwrap();
        let t0 = Instant::now();
        let sched = s.strided(4);
        let _ = sample(&cond, &out.model, &sched, 9).unwrap();
        println!("  sample strided(4)=50 steps: {:?} -> 96 samples = {:?}", t0.elapsed(), t0.elapsed() * 96);
        let t0 = Instant::now();
        let full = SampleSchedule::full(&s);
        let _ = sample(&cond, &out.model, &full, 9).unwrap();
        println!("  sample full 200 steps: {:?} -> 96 samples = {:?}", t0.elapsed(), t0.elapsed() * 96);
    }
}
