//! Training loops, checkpointing and deterministic seeding for all four
//! stages.
//!
//! Every sample of every step derives its own rng from
//! (seed, stage, step, sample index), and per-sample gradients are reduced
//! in sample order, so runs are bit-reproducible regardless of the worker
//! thread count.

pub mod checkpoint;
mod gen;

pub use gen::{train_gen_model, train_refine_model};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use portray_grad::nn::ParamStore;
use portray_grad::tensor::Tensor;
use portray_grad::{Adam, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::a2m::{
    flatten_keypoint_condition, BodyDenoiser, BodyLayout, BodyModelDims, FaceDenoiser,
    FaceModelDims,
};
use crate::config::{Config, Mode};
use crate::diffusion::{build_schedule, forward_noise, noise_mse, ConditionBundle, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{LossReport, PatchDiscriminator};
use crate::synth::{SyntheticClip, World};
use crate::videogen::{FaceRefiner, GeneratorParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    A2mFace,
    A2mBody,
    GenBody,
    GenFaceRefine,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::A2mFace => "a2m_face",
            Stage::A2mBody => "a2m_body",
            Stage::GenBody => "gen_body",
            Stage::GenFaceRefine => "gen_face_refine",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2m_face" => Ok(Stage::A2mFace),
            "a2m_body" => Ok(Stage::A2mBody),
            "gen_body" => Ok(Stage::GenBody),
            "gen_face_refine" => Ok(Stage::GenFaceRefine),
            other => Err(Error::Config(format!("unknown training stage '{other}'"))),
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Stage::A2mFace => 0x0a2f,
            Stage::A2mBody => 0x0a2b,
            Stage::GenBody => 0x6e0b,
            Stage::GenFaceRefine => 0x6e0f,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub report: Option<LossReport>,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        match &self.report {
            Some(r) => format!("{} wall_ms={:.1}", r.log_line(self.step), self.wall_ms),
            None => format!("step={} total={} wall_ms={:.1}", self.step, self.total, self.wall_ms),
        }
    }
}

pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    h
}

pub fn sample_rng(seed: u64, stage: Stage, step: usize, idx: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(mix_seed(&[seed, stage.tag(), step as u64, idx as u64]))
}

/// Run `f` for indices 0..n on up to `threads` workers; results come back in
/// index order. Each index's work must be independent and self-seeded.
pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let f = &f;
        let mut rest: &mut [Option<T>] = &mut slots;
        let mut start = 0usize;
        while start < n {
            let len = chunk.min(n - start);
            let (head, tail) = rest.split_at_mut(len);
            rest = tail;
            let base = start;
            scope.spawn(move || {
                for (off, slot) in head.iter_mut().enumerate() {
                    *slot = Some(f(base + off));
                }
            });
            start += len;
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

fn sum_grads(mut acc: Vec<Tensor>, grads: &[Tensor]) -> Vec<Tensor> {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_assign(g);
    }
    acc
}

pub(crate) fn average_grad_batch(per_sample: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let n = per_sample.len();
    let mut iter = per_sample.into_iter();
    let first = iter.next().expect("empty batch");
    let mut acc = iter.fold(first, |acc, g| sum_grads(acc, &g));
    for t in acc.iter_mut() {
        *t = t.scale(1.0 / n as f64);
    }
    acc
}

pub fn face_dims(cfg: &Config) -> FaceModelDims {
    FaceModelDims {
        expr_dim: cfg.model.expr_dim,
        audio_bands: cfg.model.mel_bands,
        width: cfg.model.face_width,
        heads: cfg.model.face_heads,
        layers: cfg.model.face_layers,
    }
}

pub fn body_dims(cfg: &Config) -> BodyModelDims {
    BodyModelDims {
        data_dim: BodyLayout::from_config(cfg).dim(),
        keypoint_dim: 3 * cfg.model.head_points,
        audio_bands: cfg.model.mel_bands,
        width: cfg.model.body_width,
        heads: cfg.model.body_heads,
        layers: cfg.model.body_layers,
    }
}

pub fn schedule(cfg: &Config) -> NoiseSchedule {
    build_schedule(cfg.model.diffusion_steps, cfg.model.beta_min, cfg.model.beta_max)
        .expect("validated config")
}

/// A face-stage training sample: one chunk with its conditioning.
struct FaceSample {
    x0: Tensor,
    cond: ConditionBundle,
}

fn face_sample(cfg: &Config, clips: &[SyntheticClip], rng: &mut ChaCha20Rng) -> FaceSample {
    let l = cfg.model.chunk_frames;
    let h = cfg.model.history_frames;
    let clip = &clips[rng.gen_range(0..clips.len())];
    let t_total = clip.len();
    let start = rng.gen_range(0..t_total.saturating_sub(l).max(1));
    let flat = clip.face_flat();
    let d = flat.shape()[1];
    let slice_rows = |from: usize, rows: usize| -> Tensor {
        let mut out = Tensor::zeros(&[rows, d]);
        for r in 0..rows {
            if from + r < t_total {
                out.data_mut()[r * d..(r + 1) * d]
                    .copy_from_slice(&flat.data()[(from + r) * d..(from + r + 1) * d]);
            }
        }
        out
    };
    let x0 = slice_rows(start, l);
    // history: previous frames, zero-padded at the clip start
    let mut history = Tensor::zeros(&[h, d]);
    for r in 0..h {
        let idx = start as isize - h as isize + r as isize;
        if idx >= 0 {
            let idx = idx as usize;
            history.data_mut()[r * d..(r + 1) * d]
                .copy_from_slice(&flat.data()[idx * d..(idx + 1) * d]);
        }
    }
    let audio = clip.audio.slice_padded(start, l);
    let style = clip.style_stats();
    // reference: another window of the same clip, half the time
    let reference = if rng.gen_bool(0.5) {
        let len = rng
            .gen_range(h.max(4)..=cfg.model.max_reference_frames.min(t_total))
            .min(t_total);
        let rstart = rng.gen_range(0..=t_total - len);
        Some(slice_rows(rstart, len))
    } else {
        None
    };
    FaceSample {
        x0,
        cond: ConditionBundle {
            audio: Some(audio),
            history: Some(history),
            style: Some(style),
            reference,
            appearance: None,
            keypoints: None,
        },
    }
}

/// Train the face denoiser in place. Returns the per-step log.
pub fn train_face_model(
    cfg: &Config,
    clips: &[SyntheticClip],
    model: &mut FaceDenoiser,
    steps: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    let sched = schedule(cfg);
    let mut adam = Adam::new(&model.store, cfg.train.lr);
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let started = Instant::now();
        let batch = cfg.train.batch_size;
        let results = parallel_map(batch, cfg.train.threads, |idx| {
            let mut rng = sample_rng(cfg.train.seed, Stage::A2mFace, step, idx);
            let sample = face_sample(cfg, clips, &mut rng);
            let t = rng.gen_range(0..sched.len());
            let eps = Tensor::randn(sample.x0.shape(), &mut rng);
            let x_t = forward_noise(&sample.x0, t, &eps, &sched).expect("valid t");
            let g = Graph::new();
            let p = model.store.bind(&g);
            let pred = model.forward(&g, &p, g.input(x_t), t, &sample.cond);
            let loss = noise_mse(&g, &eps, pred);
            let value = g.value(loss).item();
            let mut grads = g.backward(loss);
            (value, model.store.gather_grads(&p, &mut grads))
        });
        let loss_mean =
            results.iter().map(|(v, _)| v).sum::<f64>() / results.len() as f64;
        if !loss_mean.is_finite() {
            return Err(Error::Train { step, message: format!("non-finite loss {loss_mean}") });
        }
        let grads = average_grad_batch(results.into_iter().map(|(_, g)| g).collect());
        adam.step(&mut model.store, &grads);
        let rec = StepRecord {
            step,
            total: loss_mean,
            report: None,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", rec.log_line())?;
        }
        records.push(rec);
    }
    Ok(records)
}

/// A body-stage training sample.
struct BodySample {
    x0: Tensor,
    cond: ConditionBundle,
}

fn body_sample(
    cfg: &Config,
    clips: &[SyntheticClip],
    kp_cache: &[Tensor],
    app_cache: &[Tensor],
    rng: &mut ChaCha20Rng,
) -> BodySample {
    let l = cfg.model.chunk_frames;
    let ci = rng.gen_range(0..clips.len());
    let clip = &clips[ci];
    let t_total = clip.len();
    let start = rng.gen_range(0..t_total.saturating_sub(l).max(1));
    let flat = clip.body_flat();
    let d = flat.shape()[1];
    let mut x0 = Tensor::zeros(&[l, d]);
    let kd = kp_cache[ci].shape()[1];
    let mut kps = Tensor::zeros(&[l, kd]);
    for r in 0..l {
        if start + r < t_total {
            x0.data_mut()[r * d..(r + 1) * d]
                .copy_from_slice(&flat.data()[(start + r) * d..(start + r + 1) * d]);
            kps.data_mut()[r * kd..(r + 1) * kd]
                .copy_from_slice(&kp_cache[ci].data()[(start + r) * kd..(start + r + 1) * kd]);
        }
    }
    let audio = clip.audio.slice_padded(start, l);
    BodySample {
        x0,
        cond: ConditionBundle {
            audio: Some(audio),
            history: None,
            style: None,
            reference: None,
            appearance: Some(app_cache[ci].clone()),
            keypoints: Some(kps),
        },
    }
}

/// World-space explicit head keypoints per frame, flattened per clip.
pub fn head_condition_cache(cfg: &Config, clips: &[SyntheticClip]) -> Result<Vec<Tensor>> {
    let world = World::from_config(cfg);
    clips
        .iter()
        .map(|clip| {
            let sets: Result<Vec<_>> =
                clip.face.iter().map(|f| world.head_keypoints(f)).collect();
            Ok(flatten_keypoint_condition(&sets?))
        })
        .collect()
}

/// Train the body denoiser in place.
pub fn train_body_model(
    cfg: &Config,
    clips: &[SyntheticClip],
    model: &mut BodyDenoiser,
    steps: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    let sched = schedule(cfg);
    let kp_cache = head_condition_cache(cfg, clips)?;
    let app_cache: Vec<Tensor> =
        clips.iter().map(|c| crate::a2m::appearance_vector(&c.frames[0])).collect();
    let mut adam = Adam::new(&model.store, cfg.train.lr);
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let started = Instant::now();
        let results = parallel_map(cfg.train.batch_size, cfg.train.threads, |idx| {
            let mut rng = sample_rng(cfg.train.seed, Stage::A2mBody, step, idx);
            let sample = body_sample(cfg, clips, &kp_cache, &app_cache, &mut rng);
            let t = rng.gen_range(0..sched.len());
            let eps = Tensor::randn(sample.x0.shape(), &mut rng);
            let x_t = forward_noise(&sample.x0, t, &eps, &sched).expect("valid t");
            let g = Graph::new();
            let p = model.store.bind(&g);
            let pred = model.forward(&g, &p, g.input(x_t), t, &sample.cond);
            let loss = noise_mse(&g, &eps, pred);
            let value = g.value(loss).item();
            let mut grads = g.backward(loss);
            (value, model.store.gather_grads(&p, &mut grads))
        });
        let loss_mean =
            results.iter().map(|(v, _)| v).sum::<f64>() / results.len() as f64;
        if !loss_mean.is_finite() {
            return Err(Error::Train { step, message: format!("non-finite loss {loss_mean}") });
        }
        let grads = average_grad_batch(results.into_iter().map(|(_, g)| g).collect());
        adam.step(&mut model.store, &grads);
        let rec = StepRecord {
            step,
            total: loss_mean,
            report: None,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", rec.log_line())?;
        }
        records.push(rec);
    }
    Ok(records)
}

/// Trained artifacts of one stage.
pub enum StageOutput {
    Face(FaceDenoiser),
    Body(BodyDenoiser),
    Gen(GeneratorParams, PatchDiscriminator),
    Refine(FaceRefiner, PatchDiscriminator),
}

impl StageOutput {
    pub fn stage(&self) -> Stage {
        match self {
            StageOutput::Face(_) => Stage::A2mFace,
            StageOutput::Body(_) => Stage::A2mBody,
            StageOutput::Gen(..) => Stage::GenBody,
            StageOutput::Refine(..) => Stage::GenFaceRefine,
        }
    }
}

pub fn init_rng(cfg: &Config, stage: Stage) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(mix_seed(&[cfg.train.seed, stage.tag(), 0xffee]))
}

/// Fresh (untrained) models for a stage at the configured dimensions.
pub fn init_stage(cfg: &Config, stage: Stage) -> StageOutput {
    let mut rng = init_rng(cfg, stage);
    match stage {
        Stage::A2mFace => StageOutput::Face(FaceDenoiser::new(face_dims(cfg), &mut rng)),
        Stage::A2mBody => StageOutput::Body(BodyDenoiser::new(body_dims(cfg), &mut rng)),
        Stage::GenBody => {
            let k_total = match cfg.gen.mode {
                Mode::UpperBody => cfg.model.head_points + cfg.model.body_points,
                Mode::HeadOnly => cfg.model.head_points,
            };
            let detector = match cfg.gen.mode {
                Mode::UpperBody => Some(cfg.model.body_points),
                Mode::HeadOnly => None,
            };
            let gen = GeneratorParams::new(&cfg.gen, k_total, detector, &mut rng);
            let disc = PatchDiscriminator::new(&mut rng);
            StageOutput::Gen(gen, disc)
        }
        Stage::GenFaceRefine => {
            let refiner =
                FaceRefiner::new(cfg.gen.refine_crop, cfg.model.head_points, &mut rng);
            let disc = PatchDiscriminator::new(&mut rng);
            StageOutput::Refine(refiner, disc)
        }
    }
}

/// Train one stage end to end, with optional periodic checkpoints and a
/// structured-text step log.
pub fn train_stage(
    cfg: &Config,
    stage: Stage,
    clips: &[SyntheticClip],
    out_dir: Option<&Path>,
    log: Option<&mut dyn Write>,
) -> Result<(StageOutput, Vec<StepRecord>)> {
    let steps = match stage {
        Stage::A2mFace => cfg.train.steps_a2m_face,
        Stage::A2mBody => cfg.train.steps_a2m_body,
        Stage::GenBody => cfg.train.steps_gen,
        Stage::GenFaceRefine => cfg.train.steps_refine,
    };
    let mut output = init_stage(cfg, stage);
    let records = match &mut output {
        StageOutput::Face(model) => train_face_model(cfg, clips, model, steps, log)?,
        StageOutput::Body(model) => train_body_model(cfg, clips, model, steps, log)?,
        StageOutput::Gen(gen, disc) => train_gen_model(cfg, clips, gen, disc, steps, log)?,
        StageOutput::Refine(refiner, disc) => {
            train_refine_model(cfg, clips, refiner, disc, steps, log)?
        }
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let path = stage_path(dir, stage);
        save_stage(&path, cfg, &output, steps as u64)?;
    }
    Ok((output, records))
}

pub fn stage_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.ckpt", stage.as_str()))
}

pub fn save_stage(path: &Path, cfg: &Config, output: &StageOutput, step: u64) -> Result<()> {
    let rng = init_rng(cfg, output.stage());
    let meta = checkpoint::CheckpointMeta {
        fingerprint: cfg.fingerprint(),
        stage: output.stage().as_str().to_string(),
        step,
        rng: checkpoint::RngState::capture(&rng),
    };
    let sections: Vec<(&str, &ParamStore)> = match output {
        StageOutput::Face(m) => vec![("model", &m.store)],
        StageOutput::Body(m) => vec![("model", &m.store)],
        StageOutput::Gen(gen, disc) => vec![("model", &gen.store), ("disc", &disc.store)],
        StageOutput::Refine(refiner, disc) => {
            vec![("model", &refiner.gen.store), ("disc", &disc.store)]
        }
    };
    checkpoint::save(path, &meta, &sections)
}

pub fn load_stage(path: &Path, cfg: &Config, stage: Stage) -> Result<StageOutput> {
    let ckpt = checkpoint::load(path, &cfg.fingerprint())?;
    if ckpt.meta.stage != stage.as_str() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds stage '{}', expected '{}'",
            ckpt.meta.stage,
            stage.as_str()
        )));
    }
    let mut output = init_stage(cfg, stage);
    let model_section = checkpoint::section(&ckpt, "model")?;
    match &mut output {
        StageOutput::Face(m) => checkpoint::copy_into(&mut m.store, model_section)?,
        StageOutput::Body(m) => checkpoint::copy_into(&mut m.store, model_section)?,
        StageOutput::Gen(gen, disc) => {
            checkpoint::copy_into(&mut gen.store, model_section)?;
            checkpoint::copy_into(&mut disc.store, checkpoint::section(&ckpt, "disc")?)?;
        }
        StageOutput::Refine(refiner, disc) => {
            checkpoint::copy_into(&mut refiner.gen.store, model_section)?;
            checkpoint::copy_into(&mut disc.store, checkpoint::section(&ckpt, "disc")?)?;
        }
    }
    Ok(output)
}
