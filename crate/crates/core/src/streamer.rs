//! Chunk-wise streaming: a sliding keyframe history, greedy keyframe
//! decoding, in-betweening to dense frames and per-stage timing.
//!
//! Timeline: keyframe `i` sits at frame `i * s`. A prefill occupies
//! keyframes `0..P` and the first generated keyframe is `P`. Chunk `c`
//! (starting at keyframe `k`) reads audio for frames `[(k - P)s, (k + N)s)`
//! and emits the dense frames `((k - 1)s, (k + N - 1)s]`, anchored on the
//! previous committed keyframe. Without a prefill the first chunk has no
//! left anchor and starts at frame 0. Frame `f` of this timeline reads the
//! audio of frame `origin + f`; audio outside the stream reads as padding.

use std::cell::Cell;
use std::time::{Duration, Instant};

use kfgen_tensor::Scalar;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, ChunkWindow, FwdCtx, Sampling};
use crate::error::{invalid, Error, Result};
use crate::interpnet::InterpNet;
use crate::keyframe::{mask_sequence, merge, schedule, FrameType, MaskedSequence, MASK_ID, PAD_ID};
use crate::tokenstream::{audio_index, audio_window, frames_for_audio, mix, AudioSource};

/// Audio wrapper recording the highest index read.
pub struct TrackedAudio<'a> {
    tokens: &'a [usize],
    high: Cell<Option<usize>>,
}

impl<'a> TrackedAudio<'a> {
    pub fn new(tokens: &'a [usize]) -> Self {
        Self {
            tokens,
            high: Cell::new(None),
        }
    }

    pub fn high_water(&self) -> Option<usize> {
        self.high.get()
    }
}

impl AudioSource for TrackedAudio<'_> {
    fn audio_len(&self) -> usize {
        self.tokens.len()
    }

    fn audio_token(&self, i: usize) -> usize {
        self.high.set(Some(self.high.get().map_or(i, |h| h.max(i))));
        self.tokens[i]
    }
}

/// One append-only commit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Commit {
    pub chunk_index: usize,
    pub keyframes: [Vec<usize>; 4],
    pub dense: [Vec<usize>; 4],
    /// First dense frame of this commit on the session timeline.
    pub first_frame: usize,
    pub hash: [u8; 32],
}

fn commit_hash(prev: &[u8; 32], chunk_index: usize, keyframes: &[Vec<usize>; 4], dense: &[Vec<usize>; 4]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    h.update((chunk_index as u64).to_le_bytes());
    for stream in keyframes.iter().chain(dense) {
        h.update((stream.len() as u64).to_le_bytes());
        for &t in stream {
            h.update((t as u32).to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Committed keyframes and dense frames of a session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamBuffer {
    pub p: usize,
    pub n: usize,
    pub stride: usize,
    /// Ground-truth history; not part of the output.
    pub prefill: Option<[Vec<usize>; 4]>,
    commits: Vec<Commit>,
}

impl StreamBuffer {
    pub fn new(p: usize, n: usize, stride: usize, prefill: Option<[Vec<usize>; 4]>) -> Result<Self> {
        if n == 0 || stride == 0 {
            return Err(invalid("N and stride must be positive"));
        }
        if let Some(pre) = &prefill {
            if let Some(part) = pre.iter().position(|v| v.len() != p) {
                return Err(invalid(format!(
                    "prefill part {part} has {} keyframes, expected P = {p}",
                    pre[part].len()
                )));
            }
            if pre.iter().flatten().any(|&t| t >= MASK_ID) {
                return Err(invalid("prefill holds ids outside the base codebook"));
            }
        }
        Ok(Self {
            p,
            n,
            stride,
            prefill,
            commits: Vec::new(),
        })
    }

    /// Next keyframe index on the timeline.
    pub fn cursor(&self) -> usize {
        self.prefill.as_ref().map_or(0, |_| self.p) + self.commits.len() * self.n
    }

    pub fn commits(&self) -> &[Commit] {
        &self.commits
    }

    /// Hash of the last commit, or zeros for an empty buffer.
    pub fn head(&self) -> [u8; 32] {
        self.commits.last().map_or([0; 32], |c| c.hash)
    }

    /// Keyframe stream of part `p`, prefill included.
    pub fn keyframes(&self, part: usize) -> Vec<usize> {
        let mut out = self.prefill.as_ref().map_or_else(Vec::new, |pre| pre[part].clone());
        for c in &self.commits {
            out.extend(&c.keyframes[part]);
        }
        out
    }

    /// Generated dense frames of part `p`.
    pub fn dense(&self, part: usize) -> Vec<usize> {
        self.commits.iter().flat_map(|c| c.dense[part].iter().copied()).collect()
    }

    pub fn dense_len(&self) -> usize {
        self.commits.iter().map(|c| c.dense[0].len()).sum()
    }

    /// Last `P` keyframes per part, left-padded.
    pub fn history(&self) -> [Vec<usize>; 4] {
        std::array::from_fn(|part| {
            let kf = self.keyframes(part);
            let take = kf.len().min(self.p);
            let mut h = vec![PAD_ID; self.p - take];
            h.extend(&kf[kf.len() - take..]);
            h
        })
    }

    fn append(&mut self, keyframes: [Vec<usize>; 4], dense: [Vec<usize>; 4], first_frame: usize) -> &Commit {
        let chunk_index = self.commits.len();
        let hash = commit_hash(&self.head(), chunk_index, &keyframes, &dense);
        self.commits.push(Commit {
            chunk_index,
            keyframes,
            dense,
            first_frame,
            hash,
        });
        self.commits.last().expect("just pushed")
    }

    /// Recomputes the chain; returns the first commit whose hash disagrees.
    pub fn verify(&self) -> std::result::Result<(), usize> {
        let mut prev = [0; 32];
        for (i, c) in self.commits.iter().enumerate() {
            if c.chunk_index != i || commit_hash(&prev, i, &c.keyframes, &c.dense) != c.hash {
                return Err(i);
            }
            prev = c.hash;
        }
        Ok(())
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Per-stage elapsed milliseconds of one chunk.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepProfile {
    pub chunk_index: usize,
    pub tokenize_audio: f64,
    pub tokenize_motion: f64,
    pub encode_attention: f64,
    pub encode_moe_ffn: f64,
    pub decode_attention: f64,
    pub decode_moe_ffn: f64,
    /// Decoder time outside attention and FFN blocks.
    pub decode_other: f64,
    pub interpolation: f64,
    pub total: f64,
    pub decoder_steps: usize,
}

impl StepProfile {
    pub const STAGES: [&'static str; 8] = [
        "tokenize_audio",
        "tokenize_motion",
        "encode_attention",
        "encode_moe_ffn",
        "decode_attention",
        "decode_moe_ffn",
        "decode_other",
        "interpolation",
    ];

    pub fn stage(&self, name: &str) -> Option<f64> {
        Some(match name {
            "tokenize_audio" => self.tokenize_audio,
            "tokenize_motion" => self.tokenize_motion,
            "encode_attention" => self.encode_attention,
            "encode_moe_ffn" => self.encode_moe_ffn,
            "decode_attention" => self.decode_attention,
            "decode_moe_ffn" => self.decode_moe_ffn,
            "decode_other" => self.decode_other,
            "interpolation" => self.interpolation,
            _ => return None,
        })
    }

    pub fn stage_sum(&self) -> f64 {
        Self::STAGES.iter().filter_map(|s| self.stage(s)).sum()
    }
}

/// Output of one [`Session::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkResult {
    pub keyframes: [Vec<usize>; 4],
    pub dense: [Vec<usize>; 4],
    pub first_frame: usize,
    pub profile: StepProfile,
    /// Highest audio index read while building this chunk.
    pub audio_read: Option<usize>,
    /// Exclusive audio bound of the chunk's frame span.
    pub audio_limit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionReport {
    pub ttff_ms: f64,
    pub fps: f64,
    pub frames: usize,
    pub chunks: usize,
    pub decoder_steps: usize,
    pub stride: usize,
    pub n: usize,
    pub profiles: Vec<StepProfile>,
}

impl SessionReport {
    /// Aligned text table, one row per stage, mean and total over chunks.
    pub fn table(&self) -> String {
        let n = self.profiles.len().max(1) as f64;
        let mut out = format!("{:<18} {:>12} {:>12}\n", "stage", "mean_ms", "total_ms");
        for stage in StepProfile::STAGES.iter().chain(&["total"]) {
            let total: f64 = self
                .profiles
                .iter()
                .map(|p| if *stage == "total" { p.total } else { p.stage(stage).unwrap_or(0.0) })
                .sum();
            out += &format!("{stage:<18} {:>12.3} {:>12.3}\n", total / n, total);
        }
        out += &format!(
            "s={} N={} chunks={} decoder_steps={} frames={} TTFF={:.3}ms FPS={:.1}\n",
            self.stride, self.n, self.chunks, self.decoder_steps, self.frames, self.ttff_ms, self.fps
        );
        out
    }
}

/// Session settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamConfig {
    pub p: usize,
    pub n: usize,
    pub stride: usize,
    /// Temperature sampling is seeded per chunk from this seed.
    pub sampling: Sampling,
    /// Audio frame of keyframe 0.
    pub origin: i64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            p: 10,
            n: 5,
            stride: 6,
            sampling: Sampling::Greedy,
            origin: 0,
        }
    }
}

/// Total decoder steps for `keyframes` at chunk size `n`.
pub fn expected_decoder_steps(keyframes: usize, n: usize) -> usize {
    keyframes.div_ceil(n) * n
}

/// Holds every masked frame at its nearest anchor (ties go left).
pub fn hold_nearest(masked: &MaskedSequence) -> [Vec<(usize, usize)>; 4] {
    let anchors = masked.positions(FrameType::Anchor);
    std::array::from_fn(|p| {
        masked
            .masked_positions()
            .into_iter()
            .map(|t| {
                let a = *anchors
                    .iter()
                    .min_by_key(|&&a| (a.abs_diff(t), a > t))
                    .expect("masked frames always have an anchor");
                (t, masked.tokens[p][a])
            })
            .collect()
    })
}

/// A running session over one audio stream.
pub struct Session<'a, T: Scalar> {
    model: &'a Backbone<T>,
    interp: Option<&'a InterpNet<T>>,
    pub cfg: StreamConfig,
    pub task_text: Vec<usize>,
    audio: TrackedAudio<'a>,
    pub buffer: StreamBuffer,
    /// Keyframes on the timeline covered by the audio.
    pub total_keyframes: usize,
    profiles: Vec<StepProfile>,
}

/// Opens a session; `prefill` must hold exactly `P` keyframes per part.
pub fn start_session<'a, T: Scalar>(
    model: &'a Backbone<T>,
    interp: Option<&'a InterpNet<T>>,
    audio: &'a [usize],
    prefill: Option<[Vec<usize>; 4]>,
    cfg: StreamConfig,
) -> Result<Session<'a, T>> {
    let buffer = StreamBuffer::new(cfg.p, cfg.n, cfg.stride, prefill)?;
    let span = (frames_for_audio(audio.len()) as i64 - cfg.origin).max(0) as usize;
    let total_keyframes = span.div_ceil(cfg.stride);
    if total_keyframes <= buffer.cursor() {
        return Err(invalid(format!(
            "audio of {} tokens covers {total_keyframes} keyframes, nothing left after the prefill",
            audio.len()
        )));
    }
    Ok(Session {
        model,
        interp,
        cfg,
        task_text: crate::trainer::TaskFamily::A2m.instruction(),
        audio: TrackedAudio::new(audio),
        buffer,
        total_keyframes,
        profiles: Vec::new(),
    })
}

impl<T: Scalar> Session<'_, T> {
    /// Keyframes still to be generated.
    pub fn remaining(&self) -> usize {
        self.total_keyframes.saturating_sub(self.buffer.cursor())
    }

    /// Decodes, interpolates and commits the next chunk; `None` once the
    /// audio is exhausted. The last chunk may extend past the audio, whose
    /// missing tokens read as padding.
    pub fn step(&mut self) -> Result<Option<ChunkResult>> {
        if self.remaining() == 0 {
            return Ok(None);
        }
        let t0 = Instant::now();
        let (p, n, s) = (self.cfg.p as i64, self.cfg.n, self.cfg.stride);
        let k = self.buffer.cursor();
        let chunk_index = self.buffer.commits().len();

        let ta = Instant::now();
        let end = self.cfg.origin + ((k + n) * s) as i64;
        let frames = self.cfg.origin + (k as i64 - p) * s as i64..end;
        let audio = audio_window(&self.audio, frames);
        let tokenize_audio = ta.elapsed();

        let tm = Instant::now();
        let history = self.buffer.history();
        let left_anchor: Option<[usize; 4]> = (k > 0).then(|| std::array::from_fn(|q| history[q][self.cfg.p - 1]));
        let tokenize_motion = tm.elapsed();

        let window = ChunkWindow {
            task_text: self.task_text.clone(),
            audio,
            history,
            target_len: n,
            chunk_index,
        };
        let sampling = match self.cfg.sampling {
            Sampling::Temperature { tau, seed } => Sampling::Temperature {
                tau,
                seed: mix(&[seed, chunk_index as u64]),
            },
            g => g,
        };
        let mut ctx = FwdCtx::default();
        let keyframes = self.model.chunk_predict(&window, sampling, &mut ctx)?;

        let ti = Instant::now();
        let dense = self.interpolate(left_anchor, &keyframes)?;
        let interpolation = ti.elapsed();

        let first_frame = match left_anchor {
            Some(_) => (k - 1) * s + 1,
            None => k * s,
        };
        let commit = self.buffer.append(keyframes, dense, first_frame).clone();
        let total = t0.elapsed();
        let t = &ctx.times;
        let profile = StepProfile {
            chunk_index,
            tokenize_audio: ms(tokenize_audio),
            tokenize_motion: ms(tokenize_motion),
            encode_attention: ms(t.encode_attention),
            encode_moe_ffn: ms(t.encode_ffn),
            decode_attention: ms(t.decode_attention),
            decode_moe_ffn: ms(t.decode_ffn),
            decode_other: ms(t.decode_total.saturating_sub(t.decode_attention + t.decode_ffn)),
            interpolation: ms(interpolation),
            total: ms(total),
            decoder_steps: ctx.decoder_steps,
        };
        self.profiles.push(profile.clone());
        Ok(Some(ChunkResult {
            keyframes: commit.keyframes,
            dense: commit.dense,
            first_frame,
            profile,
            audio_read: self.audio.high_water(),
            audio_limit: audio_index(end.max(0) as usize),
        }))
    }

    fn interpolate(&self, left: Option<[usize; 4]>, keyframes: &[Vec<usize>; 4]) -> Result<[Vec<usize>; 4]> {
        let s = self.cfg.stride;
        let offset = usize::from(left.is_some());
        let len = (keyframes[0].len() + offset - 1) * s + 1;
        let grid: [Vec<usize>; 4] = std::array::from_fn(|q| {
            let mut v = vec![0; len];
            if let Some(a) = left {
                v[0] = a[q];
            }
            for (i, &kf) in keyframes[q].iter().enumerate() {
                v[(i + offset) * s] = kf;
            }
            v
        });
        let masked = mask_sequence(&grid, &schedule(len, s)?)?;
        let preds = match self.interp {
            Some(net) if !masked.masked_positions().is_empty() => net.infill(&masked)?,
            _ => hold_nearest(&masked),
        };
        let mut dense = merge(&masked, &preds)?;
        for d in &mut dense {
            d.drain(..offset);
        }
        Ok(dense)
    }

    /// Steps until the audio is exhausted.
    pub fn run_to_end(mut self) -> Result<(StreamBuffer, SessionReport)> {
        while self.step()?.is_some() {}
        let report = self.report()?;
        Ok((self.buffer, report))
    }

    pub fn report(&self) -> Result<SessionReport> {
        let frames = self.buffer.dense_len();
        let elapsed: f64 = self.profiles.iter().map(|p| p.total).sum();
        if frames == 0 {
            return Err(Error::Invalid("session emitted no frames".into()));
        }
        Ok(SessionReport {
            // Measured per chunk so that setup outside step() is not counted.
            ttff_ms: self.profiles.first().map_or(0.0, |p| p.total),
            fps: frames as f64 / (elapsed / 1e3).max(f64::MIN_POSITIVE),
            frames,
            chunks: self.profiles.len(),
            decoder_steps: self.profiles.iter().map(|p| p.decoder_steps).sum(),
            stride: self.cfg.stride,
            n: self.cfg.n,
            profiles: self.profiles.clone(),
        })
    }
}

/// Keyframes at `0, s, .., (P-1)s` of a dense motion prefix.
pub fn prefill_from_dense(dense: &[Vec<usize>; 4], p: usize, s: usize) -> Result<[Vec<usize>; 4]> {
    let need = (p.max(1) - 1) * s + 1;
    if p > 0 && dense.iter().any(|d| d.len() < need) {
        return Err(invalid(format!("prefill needs {need} dense frames for P={p}, s={s}")));
    }
    Ok(std::array::from_fn(|q| (0..p).map(|i| dense[q][i * s]).collect()))
}

/// One configuration in a stride comparison.
pub struct StrideRun<'a, T: Scalar> {
    pub stride: usize,
    pub n: usize,
    pub model: &'a Backbone<T>,
    pub interp: Option<&'a InterpNet<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub stride: usize,
    pub n: usize,
    pub decoder_steps: usize,
    pub frames: usize,
    pub fps: f64,
    pub ttff_ms: f64,
    /// Analytic decoder steps relative to `s = 1` at the same N.
    pub step_ratio_vs_dense: f64,
}

/// Runs every configuration over the same audio. With a prefill, the
/// prefill keyframes are cut from `prefill_dense` at each stride and placed
/// before the audio, so every run generates the same frame span.
pub fn compare_strides<T: Scalar>(
    runs: &[StrideRun<'_, T>],
    audio: &[usize],
    prefill_dense: Option<&[Vec<usize>; 4]>,
    p: usize,
) -> Result<Vec<ScalingRow>> {
    let frames = frames_for_audio(audio.len());
    runs.iter()
        .map(|run| {
            let prefill = prefill_dense.map(|d| prefill_from_dense(d, p, run.stride)).transpose()?;
            let lead = if prefill.is_some() { p * run.stride } else { 0 };
            let cfg = StreamConfig {
                p,
                n: run.n,
                stride: run.stride,
                sampling: Sampling::Greedy,
                origin: -(lead as i64),
            };
            let session = start_session(run.model, run.interp, audio, prefill, cfg)?;
            let (_, report) = session.run_to_end()?;
            Ok(ScalingRow {
                stride: run.stride,
                n: run.n,
                decoder_steps: report.decoder_steps,
                frames: report.frames,
                fps: report.fps,
                ttff_ms: report.ttff_ms,
                step_ratio_vs_dense: expected_decoder_steps(frames.div_ceil(run.stride), run.n) as f64
                    / expected_decoder_steps(frames, run.n) as f64,
            })
        })
        .collect()
}
