//! Informal wall-clock probes, ignored by default. Run with
//! `cargo test -p portray --test timing -- --ignored --nocapture`.

use std::time::Instant;

use portray::config::Config;
use portray::synth::make_clip;
use portray::training::{init_stage, train_face_model, train_gen_model, Stage, StageOutput};

#[test]
#[ignore]
fn step_timing_desk_scale() {
    let mut cfg = Config::default();
    cfg.train.threads = 2;
    cfg.train.batch_size = 4;
    let t0 = Instant::now();
    let clips: Vec<_> = (1..=2).map(|s| make_clip(s, 4.0, &cfg).unwrap()).collect();
    println!("clip generation: {:.2?} for 2 clips of 4 s", t0.elapsed());

    // face model steps
    let mut face = match init_stage(&cfg, Stage::A2mFace) {
        StageOutput::Face(m) => m,
        _ => unreachable!(),
    };
    println!("face params: {}", face.store.total_params());
    let t0 = Instant::now();
    train_face_model(&cfg, &clips, &mut face, 5, None).unwrap();
    println!("face training: {:.2?} for 5 steps (batch 4)", t0.elapsed());

    // generator steps
    let (mut gen, mut disc) = match init_stage(&cfg, Stage::GenBody) {
        StageOutput::Gen(g, d) => (g, d),
        _ => unreachable!(),
    };
    println!("gen params: {}", gen.store.total_params());
    let t0 = Instant::now();
    train_gen_model(&cfg, &clips, &mut gen, &mut disc, 3, None).unwrap();
    println!("gen training: {:.2?} for 3 steps (batch 4)", t0.elapsed());

    // inference frame time
    let models = portray::pipeline::InferenceModels::random_init(&cfg);
    let t0 = Instant::now();
    let stats = portray::pipeline::benchmark_with_models(&cfg, &models, 1.0).unwrap();
    println!("benchmark 1 s: {:.2?}\n{}", t0.elapsed(), stats.to_text());
}
