//! Streaming inference orchestrator.
//!
//! Four stages connected by bounded blocking queues: audio chunker, face
//! motion generation (with a rolling history buffer), body motion generation
//! (bypassed in head-only mode), and frame generation plus face refinement.
//! The appearance volume is extracted once up front. Backpressure comes from
//! the bounded queues; nothing is ever dropped, and the orchestrated output
//! is bit-identical to the sequential reference implementation.

pub mod bench;
pub mod evaluate;

pub use bench::{benchmark, benchmark_with_models};
pub use evaluate::{evaluate, keypoint_diversity, EvalReport};

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::time::Instant;

use portray_grad::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::a2m::{
    appearance_vector, generate_face_motion, generate_upper_body, BodyDenoiser, BodyLayout,
    BodyMotionOutput, FaceDenoiser, MotionChunk, StyleControl,
};
use crate::audio::AudioFeatureSeq;
use crate::config::{Config, Mode};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::io::records::{find_record, read_records, Record};
use crate::motion::{
    apply_head_offset, compose_body_keypoints, fuse_control, render_hand_control,
    BodyMotionParams, FaceCoeffs, KeypointSet, OrthoCamera, Point3,
};
use crate::synth::World;
use crate::training::{self, mix_seed, Stage, StageOutput};
use crate::videogen::{
    face_box_from_keypoints, AppearanceVolume, FaceRefiner, Frame, GeneratorParams,
    RefineSession,
};

const FACE_SEED_TAG: u64 = 0xFACE;
const BODY_SEED_TAG: u64 = 0xB0D7;

#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub chunk_frames: usize,
    pub history_frames: usize,
    pub fps_target: usize,
    pub queue_capacity: usize,
    pub mode: Mode,
}

impl StreamConfig {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            chunk_frames: cfg.model.chunk_frames,
            history_frames: cfg.model.history_frames,
            fps_target: cfg.model.fps,
            queue_capacity: 2,
            mode: cfg.gen.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames == 0 || self.fps_target == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("stream config values must be positive".into()));
        }
        if self.history_frames > self.chunk_frames {
            return Err(Error::Config("history must not exceed chunk length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageStat {
    pub name: &'static str,
    pub items: usize,
    pub total_ms: f64,
    pub max_ms: f64,
}

impl StageStat {
    fn record(&mut self, ms: f64) {
        self.items += 1;
        self.total_ms += ms;
        self.max_ms = self.max_ms.max(ms);
    }

    pub fn mean_ms(&self) -> f64 {
        if self.items == 0 {
            0.0
        } else {
            self.total_ms / self.items as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StreamStats {
    pub frames_emitted: usize,
    pub achieved_fps: f64,
    pub drop_count: usize,
    pub wall_s: f64,
    pub stages: Vec<StageStat>,
}

impl StreamStats {
    pub fn to_text(&self) -> String {
        let mut out = vec![
            format!("frames={}", self.frames_emitted),
            format!("achieved_fps={:.3}", self.achieved_fps),
            format!("drops={}", self.drop_count),
            format!("wall_s={:.3}", self.wall_s),
        ];
        for s in &self.stages {
            out.push(format!(
                "stage={} items={} mean_ms={:.2} max_ms={:.2}",
                s.name,
                s.items,
                s.mean_ms(),
                s.max_ms
            ));
        }
        out.join("\n")
    }
}

/// All model state needed for inference in one mode.
pub struct InferenceModels {
    pub face: FaceDenoiser,
    pub body: Option<BodyDenoiser>,
    pub gen: GeneratorParams,
    pub refiner: Option<FaceRefiner>,
    pub sched: NoiseSchedule,
    pub sample_steps: usize,
}

impl InferenceModels {
    /// Load stage checkpoints from a directory, validating the fingerprint
    /// and mode consistency.
    pub fn load(cfg: &Config, dir: &Path) -> Result<Self> {
        let face = match training::load_stage(
            &training::stage_path(dir, Stage::A2mFace),
            cfg,
            Stage::A2mFace,
        )? {
            StageOutput::Face(m) => m,
            _ => unreachable!(),
        };
        let gen = match training::load_stage(
            &training::stage_path(dir, Stage::GenBody),
            cfg,
            Stage::GenBody,
        )? {
            StageOutput::Gen(g, _) => g,
            _ => unreachable!(),
        };
        let (body, refiner) = match cfg.gen.mode {
            Mode::UpperBody => {
                let body = match training::load_stage(
                    &training::stage_path(dir, Stage::A2mBody),
                    cfg,
                    Stage::A2mBody,
                )? {
                    StageOutput::Body(m) => m,
                    _ => unreachable!(),
                };
                let refine_path = training::stage_path(dir, Stage::GenFaceRefine);
                let refiner = if refine_path.exists() {
                    match training::load_stage(&refine_path, cfg, Stage::GenFaceRefine)? {
                        StageOutput::Refine(r, _) => Some(r),
                        _ => unreachable!(),
                    }
                } else {
                    None
                };
                (Some(body), refiner)
            }
            Mode::HeadOnly => (None, None),
        };
        Ok(Self {
            face,
            body,
            gen,
            refiner,
            sched: training::schedule(cfg),
            sample_steps: cfg.model.sample_steps,
        })
    }

    /// Randomly initialized models at the configured dimensions (throughput
    /// benchmarking is parameter-value independent).
    pub fn random_init(cfg: &Config) -> Self {
        let face = match training::init_stage(cfg, Stage::A2mFace) {
            StageOutput::Face(m) => m,
            _ => unreachable!(),
        };
        let gen = match training::init_stage(cfg, Stage::GenBody) {
            StageOutput::Gen(g, _) => g,
            _ => unreachable!(),
        };
        let (body, refiner) = match cfg.gen.mode {
            Mode::UpperBody => {
                let body = match training::init_stage(cfg, Stage::A2mBody) {
                    StageOutput::Body(m) => m,
                    _ => unreachable!(),
                };
                let refiner = match training::init_stage(cfg, Stage::GenFaceRefine) {
                    StageOutput::Refine(r, _) => Some(r),
                    _ => unreachable!(),
                };
                (Some(body), refiner)
            }
            Mode::HeadOnly => (None, None),
        };
        Self {
            face,
            body,
            gen,
            refiner,
            sched: training::schedule(cfg),
            sample_steps: cfg.model.sample_steps,
        }
    }
}

/// Precomputed source-side state (the appearance volume is extracted exactly
/// once per session).
pub struct SourceState {
    pub frame: Frame,
    pub face: FaceCoeffs,
    pub head_offsets: Vec<Point3>,
    pub volume: AppearanceVolume,
    pub fused_src: KeypointSet,
    pub head_src_final: KeypointSet,
    pub detected: Option<crate::videogen::DetectedMotion>,
    pub refine_session: Option<RefineSession>,
    pub appearance_vec: Tensor,
}

impl SourceState {
    pub fn prepare(
        models: &InferenceModels,
        cfg: &Config,
        frame: Frame,
        face: FaceCoeffs,
        head_offsets: Vec<Point3>,
    ) -> Result<Self> {
        let world = World::from_config(cfg);
        let volume = models.gen.extract_appearance(&frame)?;
        let explicit = world.head_keypoints(&face)?;
        let head_src_final = apply_head_offset(&explicit, &head_offsets)?;
        let (fused_src, detected) = match cfg.gen.mode {
            Mode::UpperBody => {
                let det = models.gen.detect_motion(&frame)?;
                let params = BodyMotionParams::new(
                    det.canonical.clone(),
                    det.deformation.clone(),
                    1.0,
                    det.translation,
                )?;
                let body_src = compose_body_keypoints(&params)?;
                (fuse_control(&head_src_final, &body_src)?, Some(det))
            }
            Mode::HeadOnly => (head_src_final.clone(), None),
        };
        let refine_session = match &models.refiner {
            Some(r) => Some(r.session(&frame, &head_src_final)?),
            None => None,
        };
        let appearance_vec = appearance_vector(&frame);
        Ok(Self {
            frame,
            face,
            head_offsets,
            volume,
            fused_src,
            head_src_final,
            detected,
            refine_session,
            appearance_vec,
        })
    }

    /// Read the side-car motion record written next to synthetic source
    /// images (the stand-in for 3-D reconstruction of the source).
    pub fn load_sidecar(path: &Path, expr_dim: usize, n_head: usize) -> Result<(FaceCoeffs, Vec<Point3>)> {
        let records = read_records(path)?;
        let coeffs_rec = find_record(&records, "face_coeffs")?;
        if coeffs_rec.shape != [1, expr_dim + 6] {
            return Err(Error::Format(format!(
                "side-car face_coeffs shape {:?}, expected [1, {}]",
                coeffs_rec.shape,
                expr_dim + 6
            )));
        }
        let face = FaceCoeffs::from_flat(&coeffs_rec.values, expr_dim);
        let off_rec = find_record(&records, "head_offsets")?;
        if off_rec.shape != [n_head, 3] {
            return Err(Error::Format(format!(
                "side-car head_offsets shape {:?}, expected [{n_head}, 3]",
                off_rec.shape
            )));
        }
        let offsets = off_rec.values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok((face, offsets))
    }

    pub fn sidecar_records(face: &FaceCoeffs, offsets: &[Point3]) -> Vec<Record> {
        vec![
            Record::new("face_coeffs", &[1, face.expr.len() + 6], face.to_flat()),
            Record::new(
                "head_offsets",
                &[offsets.len(), 3],
                offsets.iter().flatten().copied().collect(),
            ),
        ]
    }
}

pub trait FrameSink: Send {
    fn emit(&mut self, index: usize, frame: &Frame) -> Result<()>;
}

pub struct NullSink;

impl FrameSink for NullSink {
    fn emit(&mut self, _index: usize, _frame: &Frame) -> Result<()> {
        Ok(())
    }
}

pub struct CollectSink {
    pub frames: Vec<Frame>,
}

impl CollectSink {
    pub fn new() -> Self {
        Self { frames: Vec::new() }
    }
}

impl Default for CollectSink {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameSink for CollectSink {
    fn emit(&mut self, index: usize, frame: &Frame) -> Result<()> {
        assert_eq!(index, self.frames.len(), "frames must arrive in order");
        self.frames.push(frame.clone());
        Ok(())
    }
}

/// Writes zero-padded numbered pixmaps plus an index manifest.
pub struct DirSink {
    dir: PathBuf,
    files: Vec<String>,
    fps: usize,
}

impl DirSink {
    pub fn new(dir: &Path, fps: usize) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), fps })
    }

    pub fn finalize(&self) -> Result<()> {
        let mut manifest = format!("frames={}\nfps={}\n", self.files.len(), self.fps);
        for f in &self.files {
            manifest.push_str(f);
            manifest.push('\n');
        }
        std::fs::write(self.dir.join("manifest.txt"), manifest)?;
        Ok(())
    }
}

impl FrameSink for DirSink {
    fn emit(&mut self, index: usize, frame: &Frame) -> Result<()> {
        let name = format!("frame_{index:06}.ppm");
        frame.save_ppm(&self.dir.join(&name))?;
        self.files.push(name);
        Ok(())
    }
}

/// Generate one face chunk and roll the history buffer forward.
fn face_step(
    models: &InferenceModels,
    audio: &Tensor,
    history: &Tensor,
    style: &StyleControl,
    max_reference: usize,
    seed: u64,
    chunk_idx: usize,
) -> Result<(MotionChunk, Tensor)> {
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(&[seed, FACE_SEED_TAG, chunk_idx as u64]));
    let chunk_len = audio.shape()[0];
    let chunk = generate_face_motion(
        &models.face,
        audio,
        history,
        style,
        &models.sched,
        chunk_len,
        models.sample_steps,
        max_reference,
        &mut rng,
    )?;
    // next history = last H frames of (history ++ chunk)
    let h = history.shape()[0];
    let d = history.shape()[1];
    let flat = chunk.to_flat();
    let total = h + chunk_len;
    let mut next = Tensor::zeros(&[h, d]);
    for r in 0..h {
        let src = total - h + r;
        let row = if src < h {
            &history.data()[src * d..(src + 1) * d]
        } else {
            &flat.data()[(src - h) * d..(src - h + 1) * d]
        };
        next.data_mut()[r * d..(r + 1) * d].copy_from_slice(row);
    }
    Ok((chunk, next))
}

fn body_step(
    models: &InferenceModels,
    world: &World,
    layout: &BodyLayout,
    source: &SourceState,
    face_chunk: &MotionChunk,
    audio: &Tensor,
    seed: u64,
    chunk_idx: usize,
) -> Result<BodyMotionOutput> {
    let body = models.body.as_ref().expect("body stage requires the body model");
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(&[seed, BODY_SEED_TAG, chunk_idx as u64]));
    let kps: Result<Vec<KeypointSet>> =
        face_chunk.coeffs.iter().map(|c| world.head_keypoints(c)).collect();
    generate_upper_body(
        body,
        &kps?,
        audio,
        &source.appearance_vec,
        &models.sched,
        layout,
        models.sample_steps,
        &mut rng,
    )
}

/// Render the frames of one chunk.
fn frame_step(
    models: &InferenceModels,
    world: &World,
    cfg: &Config,
    source: &SourceState,
    face_chunk: &MotionChunk,
    body: Option<&BodyMotionOutput>,
    sink: &mut dyn FnMut(Frame) -> Result<()>,
) -> Result<()> {
    let (fh, fw) = (cfg.gen.frame_h, cfg.gen.frame_w);
    for (f, coeffs) in face_chunk.coeffs.iter().enumerate() {
        let explicit = world.head_keypoints(coeffs)?;
        let frame = match body {
            Some(out) => {
                let head_drv = apply_head_offset(&explicit, &out.head_offsets[f])?;
                let det = source
                    .detected
                    .as_ref()
                    .ok_or_else(|| Error::Pipeline("missing source detection".into()))?;
                let params = BodyMotionParams::new(
                    det.canonical.clone(),
                    out.body[f].deformation.clone(),
                    out.body[f].scale,
                    out.body[f].translation,
                )?;
                let body_drv = compose_body_keypoints(&params)?;
                let fused_drv = fuse_control(&head_drv, &body_drv)?;
                let warp = models.gen.estimate_warp(&source.fused_src, &fused_drv, &source.volume)?;
                let camera = OrthoCamera::fit(fw, fh);
                let hand =
                    render_hand_control(&[out.hands[f].clone()], &camera, fh, fw, world.hand_scale);
                let mut frame = models.gen.generate_frame(&source.volume, &warp, Some(&hand))?;
                if let (Some(refiner), Some(session)) = (&models.refiner, &source.refine_session) {
                    let bx = face_box_from_keypoints(&head_drv, fh, fw, refiner.crop())?;
                    frame = refiner.refine_face(&frame, session, &head_drv, &bx)?;
                }
                frame
            }
            None => {
                let warp =
                    models.gen.estimate_warp(&source.head_src_final, &explicit, &source.volume)?;
                models.gen.generate_frame(&source.volume, &warp, None)?
            }
        };
        sink(frame)?;
    }
    Ok(())
}

struct FaceMsg {
    idx: usize,
    audio: Tensor,
    chunk: MotionChunk,
}

struct GenMsg {
    idx: usize,
    chunk: MotionChunk,
    body: Option<BodyMotionOutput>,
}

/// Streaming orchestrator: bounded blocking queues between stages, frames
/// emitted in strict order, motion history carried chunk to chunk.
#[allow(clippy::too_many_arguments)]
pub fn run_stream(
    models: &InferenceModels,
    cfg: &Config,
    source: &SourceState,
    audio: &AudioFeatureSeq,
    style: &StyleControl,
    stream_cfg: &StreamConfig,
    seed: u64,
    sink: &mut (dyn FrameSink + Send),
) -> Result<StreamStats> {
    stream_cfg.validate()?;
    if stream_cfg.mode != cfg.gen.mode {
        return Err(Error::Pipeline(format!(
            "stream mode {} does not match checkpoint mode {}",
            stream_cfg.mode, cfg.gen.mode
        )));
    }
    let world = World::from_config(cfg);
    let l = stream_cfg.chunk_frames;
    let total = audio.len();
    let n_chunks = total.div_ceil(l);
    let capacity = stream_cfg.queue_capacity;

    let started = Instant::now();
    let mut stats = StreamStats { stages: Vec::new(), ..Default::default() };
    let mut stage_gen = StageStat { name: "frame_gen", ..Default::default() };

    let (tx_audio, rx_audio): (SyncSender<(usize, Tensor)>, Receiver<_>) = sync_channel(capacity);
    let (tx_face, rx_face): (SyncSender<FaceMsg>, Receiver<_>) = sync_channel(capacity);
    let (tx_gen, rx_gen): (SyncSender<GenMsg>, Receiver<_>) = sync_channel(capacity);

    let mut frames_emitted = 0usize;
    let mut last_emit: Option<Instant> = None;

    let result: Result<(StageStat, StageStat, StageStat)> = std::thread::scope(|scope| {
        // stage 1: audio chunker
        let chunker = scope.spawn({
            let mut stat = StageStat { name: "audio_chunker", ..Default::default() };
            move || -> Result<StageStat> {
                for idx in 0..n_chunks {
                    let t0 = Instant::now();
                    let start = idx * l;
                    let len = l.min(total - start);
                    let chunk = audio.slice_padded(start, len);
                    stat.record(t0.elapsed().as_secs_f64() * 1e3);
                    if tx_audio.send((idx, chunk)).is_err() {
                        break; // downstream failed; it carries the error
                    }
                }
                Ok(stat)
            }
        });

        // stage 2: face motion with rolling history
        let face_stage = scope.spawn({
            let models = &models;
            let mut stat = StageStat { name: "face_motion", ..Default::default() };
            let max_reference = cfg.model.max_reference_frames;
            let d = models.face.data_dim();
            let h = stream_cfg.history_frames;
            move || -> Result<StageStat> {
                let mut history = Tensor::zeros(&[h, d]);
                while let Ok((idx, chunk_audio)) = rx_audio.recv() {
                    let t0 = Instant::now();
                    let (chunk, next_history) = face_step(
                        models, &chunk_audio, &history, style, max_reference, seed, idx,
                    )?;
                    history = next_history;
                    stat.record(t0.elapsed().as_secs_f64() * 1e3);
                    if tx_face.send(FaceMsg { idx, audio: chunk_audio, chunk }).is_err() {
                        break;
                    }
                }
                Ok(stat)
            }
        });

        // stage 3: body motion (bypassed in head-only mode)
        let body_stage = scope.spawn({
            let models = &models;
            let world = World::from_config(cfg);
            let layout = BodyLayout::from_config(cfg);
            let mode = stream_cfg.mode;
            let mut stat = StageStat { name: "body_motion", ..Default::default() };
            move || -> Result<StageStat> {
                while let Ok(msg) = rx_face.recv() {
                    let t0 = Instant::now();
                    let body = match mode {
                        Mode::UpperBody => Some(body_step(
                            models, &world, &layout, source, &msg.chunk, &msg.audio, seed, msg.idx,
                        )?),
                        Mode::HeadOnly => None,
                    };
                    stat.record(t0.elapsed().as_secs_f64() * 1e3);
                    if tx_gen.send(GenMsg { idx: msg.idx, chunk: msg.chunk, body }).is_err() {
                        break;
                    }
                }
                Ok(stat)
            }
        });

        // stage 4: frame generation + refinement, in the calling thread's
        // scope so it can own the sink
        let gen_result: Result<()> = (|| {
            let mut expected = 0usize;
            while let Ok(msg) = rx_gen.recv() {
                assert_eq!(msg.idx, expected, "chunks must arrive in order");
                expected += 1;
                let t0 = Instant::now();
                frame_step(
                    models,
                    &world,
                    cfg,
                    source,
                    &msg.chunk,
                    msg.body.as_ref(),
                    &mut |frame| {
                        let now = Instant::now();
                        if let Some(prev) = last_emit {
                            debug_assert!(now > prev, "timestamps must strictly increase");
                        }
                        last_emit = Some(now);
                        sink.emit(frames_emitted, &frame)?;
                        frames_emitted += 1;
                        Ok(())
                    },
                )?;
                stage_gen.record(t0.elapsed().as_secs_f64() * 1e3);
            }
            Ok(())
        })();

        // join all stages; propagate the first error
        let chunker_stat = chunker.join().expect("chunker panicked")?;
        let face_stat = face_stage.join().expect("face stage panicked")?;
        let body_stat = body_stage.join().expect("body stage panicked")?;
        gen_result?;
        Ok((chunker_stat, face_stat, body_stat))
    });
    let (stage_audio, stage_face, stage_body) = result?;

    stats.frames_emitted = frames_emitted;
    stats.wall_s = started.elapsed().as_secs_f64();
    stats.achieved_fps =
        if stats.wall_s > 0.0 { frames_emitted as f64 / stats.wall_s } else { 0.0 };
    stats.drop_count = 0; // bounded blocking queues never drop
    stats.stages = vec![stage_audio, stage_face, stage_body, stage_gen];
    if frames_emitted != total {
        return Err(Error::Pipeline(format!(
            "emitted {frames_emitted} frames for {total} audio frames"
        )));
    }
    Ok(stats)
}

/// Single-threaded reference implementation: exactly the computations of
/// `run_stream`, in one loop. Streaming output must match it bit for bit.
pub fn run_sequential(
    models: &InferenceModels,
    cfg: &Config,
    source: &SourceState,
    audio: &AudioFeatureSeq,
    style: &StyleControl,
    stream_cfg: &StreamConfig,
    seed: u64,
) -> Result<Vec<Frame>> {
    stream_cfg.validate()?;
    let world = World::from_config(cfg);
    let layout = BodyLayout::from_config(cfg);
    let l = stream_cfg.chunk_frames;
    let total = audio.len();
    let n_chunks = total.div_ceil(l);
    let mut history =
        Tensor::zeros(&[stream_cfg.history_frames, models.face.data_dim()]);
    let mut frames = Vec::with_capacity(total);
    for idx in 0..n_chunks {
        let start = idx * l;
        let len = l.min(total - start);
        let chunk_audio = audio.slice_padded(start, len);
        let (chunk, next_history) = face_step(
            models,
            &chunk_audio,
            &history,
            style,
            cfg.model.max_reference_frames,
            seed,
            idx,
        )?;
        history = next_history;
        let body = match stream_cfg.mode {
            Mode::UpperBody => Some(body_step(
                models, &world, &layout, source, &chunk, &chunk_audio, seed, idx,
            )?),
            Mode::HeadOnly => None,
        };
        frame_step(models, &world, cfg, source, &chunk, body.as_ref(), &mut |frame| {
            frames.push(frame);
            Ok(())
        })?;
    }
    Ok(frames)
}
