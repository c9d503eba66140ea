//! Discrete token streams: codebooks, rate alignment, the synthetic paired
//! dataset and audio-variant augmentation.
//!
//! Audio runs at 50 tokens/s over a 500-entry codebook, each motion part at
//! 30 tokens/s over 256 entries. Every codebook reserves two ids just past
//! its base range: `mask_id = base` and `pad_id = base + 1`.
//!
//! The synthetic audio token is `class + 10 * u`. The residue class
//! (`token % 10`) carries content and drives motion; `u` is drawn from a
//! speaker-specific subset and plays the role of timbre.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, Error, Result};

pub const AUDIO_RATE: f64 = 50.0;
pub const MOTION_RATE: f64 = 30.0;
pub const AUDIO_CODEBOOK: usize = 500;
pub const PART_CODEBOOK: usize = 256;
pub const TEXT_VOCAB: usize = 128;
/// Number of audio residue classes.
pub const N_CLASSES: usize = 10;
/// Audio tokens per transcript token.
pub const AUDIO_PER_TEXT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Face,
    Hand,
    Upper,
    Lower,
    Text,
}

/// The four motion streams, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Face,
    Hand,
    Upper,
    Lower,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Face, Part::Hand, Part::Upper, Part::Lower];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Face => "face",
            Part::Hand => "hand",
            Part::Upper => "upper",
            Part::Lower => "lower",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Part::Face => Modality::Face,
            Part::Hand => Modality::Hand,
            Part::Upper => Modality::Upper,
            Part::Lower => Modality::Lower,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodebookSpec {
    pub modality: Modality,
    pub base_size: usize,
    pub rate_hz: f64,
}

impl CodebookSpec {
    pub fn of(modality: Modality) -> Self {
        let (base_size, rate_hz) = match modality {
            Modality::Audio => (AUDIO_CODEBOOK, AUDIO_RATE),
            Modality::Text => (TEXT_VOCAB, AUDIO_RATE / AUDIO_PER_TEXT as f64),
            _ => (PART_CODEBOOK, MOTION_RATE),
        };
        Self {
            modality,
            base_size,
            rate_hz,
        }
    }

    pub fn audio() -> Self {
        Self::of(Modality::Audio)
    }

    pub fn part(p: Part) -> Self {
        Self::of(p.modality())
    }

    pub fn mask_id(&self) -> usize {
        self.base_size
    }

    pub fn pad_id(&self) -> usize {
        self.base_size + 1
    }

    /// Size including the two reserved ids.
    pub fn full_size(&self) -> usize {
        self.base_size + 2
    }

    pub fn is_base(&self, id: usize) -> bool {
        id < self.base_size
    }

    pub fn accepts(&self, id: usize) -> bool {
        id < self.full_size()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub spec: CodebookSpec,
    pub tokens: Vec<usize>,
    pub start_time: f64,
}

impl TokenStream {
    pub fn new(spec: CodebookSpec, tokens: Vec<usize>, start_time: f64) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|&&t| !spec.accepts(t)) {
            return Err(invalid(format!(
                "{:?} token {bad} outside codebook of {} (+mask, pad)",
                spec.modality, spec.base_size
            )));
        }
        Ok(Self {
            spec,
            tokens,
            start_time,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.tokens.len() as f64 / self.spec.rate_hz
    }
}

/// Audio index of motion frame `frame` (floor of `frame * 5/3`).
pub fn audio_index(frame: usize) -> usize {
    frame * 5 / 3
}

/// Number of motion frames whose audio index fits in `audio_len` tokens.
pub fn frames_for_audio(audio_len: usize) -> usize {
    (3 * audio_len + 2) / 5
}

/// Audio tokens aligned with motion frames `range`.
pub fn align_audio_window(range: Range<usize>, audio: &TokenStream) -> Result<TokenStream> {
    if range.start > range.end {
        return Err(invalid(format!("reversed motion range {range:?}")));
    }
    let (a, b) = (audio_index(range.start), audio_index(range.end));
    if b > audio.len() {
        return Err(Error::OutOfRange(format!(
            "audio tokens [{}, {b}) requested for frames {range:?}; stream covers [0, {})",
            audio.len().max(a),
            audio.len()
        )));
    }
    Ok(TokenStream {
        spec: audio.spec,
        tokens: audio.tokens[a..b].to_vec(),
        start_time: audio.start_time + a as f64 / audio.spec.rate_hz,
    })
}

/// Read access to audio tokens by index.
pub trait AudioSource {
    fn audio_len(&self) -> usize;
    fn audio_token(&self, i: usize) -> usize;
}

impl AudioSource for [usize] {
    fn audio_len(&self) -> usize {
        self.len()
    }

    fn audio_token(&self, i: usize) -> usize {
        self[i]
    }
}

impl AudioSource for TokenStream {
    fn audio_len(&self) -> usize {
        self.tokens.len()
    }

    fn audio_token(&self, i: usize) -> usize {
        self.tokens[i]
    }
}

/// Audio tokens for motion frames `[start, end)`. Frames may fall before
/// the stream or past its end; those positions get the audio pad id.
pub fn audio_window<A: AudioSource + ?Sized>(audio: &A, frames: Range<i64>) -> Vec<usize> {
    let idx = |f: i64| (f * 5).div_euclid(3);
    let (a, b) = (idx(frames.start), idx(frames.end.max(frames.start)));
    let pad = AUDIO_CODEBOOK + 1;
    (a..b)
        .map(|i| {
            if i >= 0 && (i as usize) < audio.audio_len() {
                audio.audio_token(i as usize)
            } else {
                pad
            }
        })
        .collect()
}

/// Right-pads to `length` with `pad_id`; the mask is true on original tokens.
pub fn pad_to(stream: &TokenStream, length: usize) -> Result<(TokenStream, Vec<bool>)> {
    if length < stream.len() {
        return Err(invalid(format!("cannot pad stream of {} down to {length}", stream.len())));
    }
    let mut tokens = stream.tokens.clone();
    let mut mask = vec![true; tokens.len()];
    tokens.resize(length, stream.spec.pad_id());
    mask.resize(length, false);
    Ok((
        TokenStream {
            tokens,
            ..stream.clone()
        },
        mask,
    ))
}

pub fn strip_padding(stream: &TokenStream, mask: &[bool]) -> TokenStream {
    TokenStream {
        tokens: stream.tokens.iter().zip(mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect(),
        ..stream.clone()
    }
}

/// Residue class of each audio token; reserved ids map to `None`.
pub fn residue_classes(audio: &[usize]) -> Vec<Option<usize>> {
    audio
        .iter()
        .map(|&t| (t < AUDIO_CODEBOOK).then_some(t % N_CLASSES))
        .collect()
}

/// The fixed 128-symbol text table.
pub mod text {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    /// First content piece; class `c` is spelled `CONTENT_BASE + c`.
    pub const CONTENT_BASE: usize = 32;

    const WORDS: [&str; 12] = [
        "generate", "motion", "from", "audio", "text", "transcribe", "speak", "continue", "keyframes",
        "gesture", "speech", "body",
    ];

    pub fn word(w: &str) -> usize {
        WORDS.iter().position(|&x| x == w).map(|i| 4 + i).unwrap_or(UNK)
    }

    pub fn encode(sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(word).collect()
    }

    pub fn symbol(id: usize) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            UNK => "<unk>".into(),
            i if (4..4 + WORDS.len()).contains(&i) => WORDS[i - 4].into(),
            i if (CONTENT_BASE..super::TEXT_VOCAB).contains(&i) => format!("w{}", i - CONTENT_BASE),
            i => format!("<r{i}>"),
        }
    }

    pub fn class_token(class: usize) -> usize {
        CONTENT_BASE + class
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub audio: TokenStream,
    /// Indexed by [`Part::index`].
    pub motion: [TokenStream; 4],
    pub transcript: Vec<usize>,
    pub speaker: u32,
}

impl PairedSample {
    pub fn motion_len(&self) -> usize {
        self.motion[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.motion_len();
        if self.motion.iter().any(|m| m.len() != n) {
            return Err(invalid("motion streams differ in length"));
        }
        let expect = n as f64 * AUDIO_RATE / MOTION_RATE;
        if (self.audio.len() as f64 - expect).abs() > 1.0 {
            return Err(invalid(format!(
                "audio length {} does not match {n} motion frames",
                self.audio.len()
            )));
        }
        if self.transcript.iter().any(|&t| t >= TEXT_VOCAB) {
            return Err(invalid("transcript token outside text table"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub motion_len: usize,
    /// Fraction of samples that carry a transcript.
    pub task_mix: f64,
    pub n_speakers: usize,
    /// Keyframe grid of the generating process.
    pub stride: usize,
    /// Seed of the shared generative rules; sample seeds only pick samples.
    pub world_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            motion_len: 120,
            task_mix: 1.0,
            n_speakers: 8,
            stride: 6,
            world_seed: 0x6b66_0001,
        }
    }
}

const N_STATES: usize = 16;
const SUCC_FANOUT: usize = 4;
const SPEAKER_UNITS: usize = 8;
const U_RANGE: usize = AUDIO_CODEBOOK / N_CLASSES;
/// Probability that a keyframe follows the class-selected successor.
const FOLLOW: f64 = 0.8;
const CLASS_STAY: f64 = 0.5;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub(crate) fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |h, &p| splitmix(h ^ splitmix(p)))
}

/// Fixed generative rules shared by every sample of a dataset.
#[derive(Clone, Debug)]
pub struct World {
    seed: u64,
    anchor_ids: [[usize; N_STATES]; 4],
    succ: [[[usize; N_STATES]; N_CLASSES]; 4],
    speaker_units: Vec<[usize; SPEAKER_UNITS]>,
}

impl World {
    pub fn new(seed: u64, n_speakers: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut anchor_ids = [[0; N_STATES]; 4];
        let mut succ = [[[0; N_STATES]; N_CLASSES]; 4];
        for p in 0..4 {
            let mut ids: Vec<usize> = (0..PART_CODEBOOK).collect();
            ids.shuffle(&mut rng);
            anchor_ids[p].copy_from_slice(&ids[..N_STATES]);
            for c in 0..N_CLASSES {
                let mut states: Vec<usize> = (0..N_STATES).collect();
                states.shuffle(&mut rng);
                for s in 0..N_STATES {
                    succ[p][c][s] = states[rng.gen_range(0..SUCC_FANOUT)];
                }
            }
        }
        let speaker_units = (0..n_speakers.max(1))
            .map(|_| {
                let mut u: Vec<usize> = (0..U_RANGE).collect();
                u.shuffle(&mut rng);
                let mut out = [0; SPEAKER_UNITS];
                out.copy_from_slice(&u[..SPEAKER_UNITS]);
                out
            })
            .collect();
        Self {
            seed,
            anchor_ids,
            succ,
            speaker_units,
        }
    }

    pub fn anchor_id(&self, part: usize, state: usize) -> usize {
        self.anchor_ids[part][state]
    }

    /// Token at `dist` frames from an anchor in `state`, on the given side.
    fn between(&self, part: usize, from_left: bool, dist: usize, state: usize) -> usize {
        (mix(&[self.seed, part as u64, from_left as u64, dist as u64, state as u64]) % PART_CODEBOOK as u64)
            as usize
    }

    /// Token of frame `j` (0 < j < s) between anchors in `left` and `right`.
    /// Frames in the first half copy a function of the left anchor, the rest
    /// a function of the right anchor, so the value is not a blend of the two.
    pub fn in_between(&self, part: usize, s: usize, j: usize, left: usize, right: usize) -> usize {
        if j <= s / 2 {
            self.between(part, true, j, left)
        } else {
            self.between(part, false, s - j, right)
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> PairedSample {
        let t = cfg.motion_len;
        let s = cfg.stride.max(1);
        let speaker = rng.gen_range(0..self.speaker_units.len());
        let units = &self.speaker_units[speaker];

        let a_len = audio_index(t);
        let n_blocks = a_len.div_ceil(AUDIO_PER_TEXT).max(1);
        let mut classes = Vec::with_capacity(n_blocks);
        classes.push(rng.gen_range(0..N_CLASSES));
        for _ in 1..n_blocks {
            let prev = *classes.last().unwrap();
            classes.push(if rng.gen_bool(CLASS_STAY) {
                prev
            } else {
                rng.gen_range(0..N_CLASSES)
            });
        }
        let audio: Vec<usize> = (0..a_len)
            .map(|i| classes[i / AUDIO_PER_TEXT] + N_CLASSES * units[rng.gen_range(0..SPEAKER_UNITS)])
            .collect();
        let transcript = if rng.gen_bool(cfg.task_mix.clamp(0.0, 1.0)) {
            classes.iter().map(|&c| text::class_token(c)).collect()
        } else {
            Vec::new()
        };

        let n_grid = t.div_ceil(s) + 1;
        let class_at = |g: usize| {
            let idx = audio_index(g * s).min(a_len.saturating_sub(1));
            classes[(idx / AUDIO_PER_TEXT).min(n_blocks - 1)]
        };
        let motion = std::array::from_fn(|p| {
            let mut states = Vec::with_capacity(n_grid);
            states.push(rng.gen_range(0..N_STATES));
            for g in 1..n_grid {
                let prev = states[g - 1];
                states.push(if rng.gen_bool(FOLLOW) {
                    self.succ[p][class_at(g)][prev]
                } else {
                    rng.gen_range(0..N_STATES)
                });
            }
            let tokens = (0..t)
                .map(|f| {
                    let (g, j) = (f / s, f % s);
                    if j == 0 {
                        self.anchor_ids[p][states[g]]
                    } else {
                        self.in_between(p, s, j, states[g], states[g + 1])
                    }
                })
                .collect();
            TokenStream {
                spec: CodebookSpec::part(Part::ALL[p]),
                tokens,
                start_time: 0.0,
            }
        });
        PairedSample {
            audio: TokenStream {
                spec: CodebookSpec::audio(),
                tokens: audio,
                start_time: 0.0,
            },
            motion,
            transcript,
            speaker: speaker as u32,
        }
    }
}

/// Deterministic synthetic dataset; sample `i` uses its own derived seed.
pub fn synth_dataset(seed: u64, cfg: &SynthConfig) -> Result<Vec<PairedSample>> {
    if cfg.motion_len < 1 {
        return Err(invalid("motion_len must be at least 1"));
    }
    if cfg.stride < 1 {
        return Err(invalid("stride must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.task_mix) {
        return Err(invalid("task_mix must lie in [0, 1]"));
    }
    let world = World::new(cfg.world_seed, cfg.n_speakers);
    Ok((0..cfg.n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, i as u64]));
            world.sample(&mut rng, cfg)
        })
        .collect())
}

/// `n_variants` copies of `sample` whose audio is remapped per variant by a
/// seeded permutation of `u` within each residue class. Variant 0 is the
/// original; motion and transcript are shared by all.
pub fn augment_audio_variants(sample: &PairedSample, n_variants: usize, seed: u64) -> Result<Vec<PairedSample>> {
    if n_variants < 1 {
        return Err(invalid("n_variants must be at least 1"));
    }
    let mut out = vec![sample.clone()];
    for v in 1..n_variants {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, sample.speaker as u64, v as u64]));
        let perms: Vec<Vec<usize>> = (0..N_CLASSES)
            .map(|_| {
                let mut p: Vec<usize> = (0..U_RANGE).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let mut variant = sample.clone();
        for t in &mut variant.audio.tokens {
            if *t < AUDIO_CODEBOOK {
                let (c, u) = (*t % N_CLASSES, *t / N_CLASSES);
                *t = c + N_CLASSES * perms[c][u];
            }
        }
        variant.speaker = sample.speaker + 1000 * v as u32;
        out.push(variant);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Record {
    audio: Vec<usize>,
    face: Vec<usize>,
    hand: Vec<usize>,
    upper: Vec<usize>,
    lower: Vec<usize>,
    text: Vec<usize>,
    speaker: u32,
}

pub const DATASET_VERSION: u32 = 1;

fn header() -> serde_json::Value {
    json!({
        "version": DATASET_VERSION,
        "rates": {"audio": AUDIO_RATE, "motion": MOTION_RATE},
        "codebook_sizes": {
            "audio": AUDIO_CODEBOOK, "face": PART_CODEBOOK, "hand": PART_CODEBOOK,
            "upper": PART_CODEBOOK, "lower": PART_CODEBOOK, "text": TEXT_VOCAB
        }
    })
}

pub fn write_dataset(path: &Path, samples: &[PairedSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header())?;
    for s in samples {
        let [f, h, u, l] = &s.motion;
        let rec = Record {
            audio: s.audio.tokens.clone(),
            face: f.tokens.clone(),
            hand: h.tokens.clone(),
            upper: u.tokens.clone(),
            lower: l.tokens.clone(),
            text: s.transcript.clone(),
            speaker: s.speaker,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<PairedSample>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let head: serde_json::Value = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(invalid(format!("{}: empty dataset file", path.display()))),
    };
    if head.get("version").and_then(|v| v.as_u64()) != Some(DATASET_VERSION as u64) {
        return Err(invalid(format!("{}: missing or unsupported header", path.display())));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)?;
        let part = |p: Part, toks: Vec<usize>| TokenStream::new(CodebookSpec::part(p), toks, 0.0);
        let s = PairedSample {
            audio: TokenStream::new(CodebookSpec::audio(), r.audio, 0.0)?,
            motion: [
                part(Part::Face, r.face)?,
                part(Part::Hand, r.hand)?,
                part(Part::Upper, r.upper)?,
                part(Part::Lower, r.lower)?,
            ],
            transcript: r.text,
            speaker: r.speaker,
        };
        s.validate()
            .map_err(|e| invalid(format!("{} record {}: {e}", path.display(), n + 1)))?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn audio(n: usize) -> TokenStream {
        TokenStream::new(CodebookSpec::audio(), (0..n).map(|i| i % 500).collect(), 0.0).unwrap()
    }

    #[test]
    fn padded_audio_window() {
        let a = audio(100);
        let w = audio_window(&a, -60..30);
        assert_eq!(w.len(), 150);
        assert!(w[..100].iter().all(|&t| t == 501));
        assert_eq!(w[100..], a.tokens[..50]);
        let tail = audio_window(&a, 54..66);
        assert_eq!(tail.len(), 20);
        assert_eq!(tail[..10], a.tokens[90..]);
        assert_eq!(tail[10], 501);
    }

    #[test]
    fn codebooks() {
        let a = CodebookSpec::audio();
        assert_eq!((a.base_size, a.rate_hz, a.mask_id(), a.pad_id()), (500, 50.0, 500, 501));
        for p in Part::ALL {
            let c = CodebookSpec::part(p);
            assert_eq!((c.base_size, c.rate_hz, c.mask_id(), c.pad_id()), (256, 30.0, 256, 257));
        }
        assert!(TokenStream::new(a, vec![502], 0.0).is_err());
        assert_eq!(audio(100).duration(), 2.0);
    }

    #[test]
    fn alignment_examples() {
        let a = audio(200);
        let w = align_audio_window(0..30, &a).unwrap();
        assert_eq!(w.tokens, (0..50).collect::<Vec<_>>());
        let w = align_audio_window(30..60, &a).unwrap();
        assert_eq!(w.tokens, (50..100).collect::<Vec<_>>());
        assert!(align_audio_window(0..0, &a).unwrap().is_empty());
        let err = align_audio_window(100..130, &a).unwrap_err();
        assert!(err.to_string().contains("[200, 216)"), "{err}");
    }

    #[test]
    fn frames_for_audio_inverts_alignment() {
        for len in 0..400 {
            let f = frames_for_audio(len);
            assert!(audio_index(f) <= len);
            assert!(audio_index(f + 1) > len);
        }
        assert_eq!(frames_for_audio(200), 120);
    }

    #[test]
    fn padding() {
        let s = TokenStream::new(CodebookSpec::part(Part::Hand), vec![4, 5, 6], 0.0).unwrap();
        let (p, m) = pad_to(&s, 5).unwrap();
        assert_eq!(p.tokens, vec![4, 5, 6, 257, 257]);
        assert_eq!(m, vec![true, true, true, false, false]);
        assert_eq!(pad_to(&s, 3).unwrap().0, s);
        assert_eq!(strip_padding(&p, &m), s);
        assert!(pad_to(&s, 2).is_err());
    }

    #[test]
    fn text_table() {
        assert_eq!(text::encode("generate motion from audio"), vec![4, 5, 6, 7]);
        assert_eq!(text::word("nonsense"), text::UNK);
        assert_eq!(text::symbol(text::class_token(3)), "w3");
    }

    #[test]
    fn synth_examples() {
        let cfg = SynthConfig {
            n_samples: 3,
            motion_len: 120,
            ..SynthConfig::default()
        };
        let a = synth_dataset(7, &cfg).unwrap();
        assert_eq!(a, synth_dataset(7, &cfg).unwrap());
        assert_ne!(a, synth_dataset(8, &cfg).unwrap());
        for s in &a {
            s.validate().unwrap();
            assert_eq!(s.motion_len(), 120);
            assert_eq!(s.audio.len(), 200);
            assert_eq!(s.transcript.len(), 20);
        }
        let empty = SynthConfig {
            n_samples: 0,
            ..cfg.clone()
        };
        assert!(synth_dataset(7, &empty).unwrap().is_empty());
        let bad = SynthConfig { motion_len: 0, ..cfg };
        assert!(synth_dataset(7, &bad).is_err());
    }

    #[test]
    fn transcript_spells_residue_classes() {
        let s = &synth_dataset(3, &SynthConfig { n_samples: 1, ..SynthConfig::default() }).unwrap()[0];
        for (i, c) in residue_classes(&s.audio.tokens).into_iter().enumerate() {
            assert_eq!(s.transcript[i / AUDIO_PER_TEXT], text::class_token(c.unwrap()));
        }
    }

    #[test]
    fn augmentation_examples() {
        let s = synth_dataset(1, &SynthConfig { n_samples: 1, ..SynthConfig::default() })
            .unwrap()
            .remove(0);
        assert_eq!(augment_audio_variants(&s, 1, 9).unwrap(), vec![s.clone()]);
        let vs = augment_audio_variants(&s, 5, 9).unwrap();
        assert_eq!(vs.len(), 5);
        assert_eq!(vs, augment_audio_variants(&s, 5, 9).unwrap());
        assert!(vs.iter().skip(1).any(|v| v.audio != s.audio));
        assert!(augment_audio_variants(&s, 0, 9).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = synth_dataset(2, &SynthConfig { n_samples: 4, motion_len: 37, ..SynthConfig::default() }).unwrap();
        write_dataset(&path, &data).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);
        let first = std::fs::read_to_string(&path).unwrap();
        let head: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!(head["codebook_sizes"]["audio"], 500);
    }
}
