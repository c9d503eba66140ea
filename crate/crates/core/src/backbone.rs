//! Encoder-decoder prefix language model over the joint token vocabulary.
//!
//! The encoder attends bidirectionally over a packed multimodal prefix; pad
//! positions are dropped before encoding (their original indices are kept
//! for the relative bias, so the result is the same as masking them). The
//! decoder is causal and consumes one position per keyframe step: its input
//! is the sum of the four part embeddings of the previous step and its
//! output feeds four parallel part heads.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use kfgen_tensor::{Checkpoint, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::moe::{MoeConfig, MoeLayer, MoeTrace};
use crate::nn::{argmax, attend, init_tensor, AttnProj, Ffn, Linear, Norm, RelBias};
use crate::tokenstream::{Modality, AUDIO_CODEBOOK, PART_CODEBOOK, TEXT_VOCAB};

/// Offsets of every codebook inside the joint embedding table.
pub mod vocab {
    use crate::tokenstream::{Modality, AUDIO_CODEBOOK, PART_CODEBOOK, TEXT_VOCAB};

    pub const TEXT: usize = 0;
    pub const AUDIO: usize = TEXT + TEXT_VOCAB;
    pub const PARTS: usize = AUDIO + AUDIO_CODEBOOK + 2;
    pub const PART_WIDTH: usize = PART_CODEBOOK + 2;
    pub const SENTINELS: usize = PARTS + 4 * PART_WIDTH;
    pub const BOS: usize = SENTINELS + 6;
    pub const SIZE: usize = BOS + 1;

    pub fn text(id: usize) -> usize {
        TEXT + id
    }

    pub fn audio(id: usize) -> usize {
        AUDIO + id
    }

    pub fn part(p: usize, id: usize) -> usize {
        PARTS + p * PART_WIDTH + id
    }

    pub fn sentinel(m: Modality) -> usize {
        SENTINELS
            + match m {
                Modality::Text => 0,
                Modality::Audio => 1,
                Modality::Face => 2,
                Modality::Hand => 3,
                Modality::Upper => 4,
                Modality::Lower => 5,
            }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_rel: usize,
    /// Relative position bias; off only in tests that need permutation symmetry.
    pub rel_bias: bool,
    pub max_enc_positions: usize,
    pub max_dec_positions: usize,
    pub moe: Option<MoeConfig>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_ffn: 256,
            max_rel: 32,
            rel_bias: true,
            max_enc_positions: 512,
            max_dec_positions: 256,
            moe: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model == 0 || self.d_ffn == 0 {
            return Err(invalid("model widths must be positive"));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("enc_layers", self.n_enc_layers.to_string());
        put("dec_layers", self.n_dec_layers.to_string());
        put("d_model", self.d_model.to_string());
        put("n_heads", self.n_heads.to_string());
        put("d_ffn", self.d_ffn.to_string());
        put("max_rel", self.max_rel.to_string());
        put("rel_bias", self.rel_bias.to_string());
        put("max_enc", self.max_enc_positions.to_string());
        put("max_dec", self.max_dec_positions.to_string());
        let (e, k) = self.moe.as_ref().map_or((0, 0), |m| (m.experts, m.top_k));
        put("experts", e.to_string());
        put("top_k", k.to_string());
        m
    }

    pub fn from_meta(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<V> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks a valid {k}")))
        }
        let experts: usize = get(m, "experts")?;
        Ok(Self {
            n_enc_layers: get(m, "enc_layers")?,
            n_dec_layers: get(m, "dec_layers")?,
            d_model: get(m, "d_model")?,
            n_heads: get(m, "n_heads")?,
            d_ffn: get(m, "d_ffn")?,
            max_rel: get(m, "max_rel")?,
            rel_bias: get(m, "rel_bias")?,
            max_enc_positions: get(m, "max_enc")?,
            max_dec_positions: get(m, "max_dec")?,
            moe: (experts > 0).then(|| MoeConfig {
                experts,
                top_k: get(m, "top_k").unwrap_or(1),
                ..MoeConfig::default()
            }),
        })
    }
}

/// One autoregressive step's inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkWindow {
    pub task_text: Vec<usize>,
    /// Audio ids (pad-filled where the span leaves the stream).
    pub audio: Vec<usize>,
    /// `P` keyframe tokens per part, left-padded.
    pub history: [Vec<usize>; 4],
    pub target_len: usize,
    pub chunk_index: usize,
}

impl ChunkWindow {
    pub fn validate(&self) -> Result<()> {
        let p = self.history[0].len();
        if self.history.iter().any(|h| h.len() != p) {
            return Err(invalid("history spans differ in length between parts"));
        }
        if let Some(t) = self.task_text.iter().find(|&&t| t >= TEXT_VOCAB) {
            return Err(invalid(format!("text id {t} outside the text table")));
        }
        if let Some(t) = self.audio.iter().find(|&&t| t >= AUDIO_CODEBOOK + 2) {
            return Err(invalid(format!("audio id {t} outside the audio codebook")));
        }
        if let Some(t) = self.history.iter().flatten().find(|&&t| t >= PART_CODEBOOK + 2) {
            return Err(invalid(format!("motion id {t} outside the part codebook")));
        }
        Ok(())
    }
}

/// Encoder input ids with segment tags; `valid` is false on pads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed {
    pub ids: Vec<usize>,
    pub segments: Vec<Modality>,
    pub valid: Vec<bool>,
}

/// Ids and original positions fed to the encoder, plus an optional key mask
/// when pads are kept in place.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncInput {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub key_keep: Option<Vec<bool>>,
}

impl Packed {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Valid positions only.
    pub fn compact(&self) -> EncInput {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.valid[i]).collect();
        EncInput {
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
            positions: keep,
            key_keep: None,
        }
    }

    /// Every position, with pads masked out as attention keys.
    pub fn masked(&self) -> EncInput {
        EncInput {
            ids: self.ids.clone(),
            positions: (0..self.len()).collect(),
            key_keep: Some(self.valid.clone()),
        }
    }
}

/// Lays out `[text | audio | face | hand | upper | lower]`, each non-empty
/// span introduced by its sentinel.
pub fn pack_template(window: &ChunkWindow, max_positions: usize) -> Result<Packed> {
    window.validate()?;
    let mut out = Packed {
        ids: Vec::new(),
        segments: Vec::new(),
        valid: Vec::new(),
    };
    let spans: [(Modality, &[usize]); 6] = [
        (Modality::Text, &window.task_text),
        (Modality::Audio, &window.audio),
        (Modality::Face, &window.history[0]),
        (Modality::Hand, &window.history[1]),
        (Modality::Upper, &window.history[2]),
        (Modality::Lower, &window.history[3]),
    ];
    for (m, toks) in spans {
        if toks.is_empty() {
            continue;
        }
        let needed = out.len() + 1 + toks.len();
        if needed > max_positions {
            return Err(Error::OutOfRange(format!(
                "packed input needs {needed} positions, limit {max_positions}; overflow in the {m:?} span"
            )));
        }
        out.ids.push(vocab::sentinel(m));
        out.segments.push(m);
        out.valid.push(true);
        for &t in toks {
            let (id, pad) = match m {
                Modality::Text => (vocab::text(t), t == crate::tokenstream::text::PAD),
                Modality::Audio => (vocab::audio(t), t == AUDIO_CODEBOOK + 1),
                _ => {
                    let p = vocab::sentinel(m) - vocab::sentinel(Modality::Face);
                    (vocab::part(p, t), t == PART_CODEBOOK + 1)
                }
            };
            out.ids.push(id);
            out.segments.push(m);
            out.valid.push(!pad);
        }
    }
    Ok(out)
}

/// A decoder input token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecToken {
    Bos,
    Motion([usize; 4]),
    Text(usize),
    Audio(usize),
}

/// Which head a decoder sequence is read through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    Motion,
    Text,
    Audio,
}

#[derive(Clone, Debug)]
pub enum FfnBlock {
    Dense(Ffn),
    Moe(MoeLayer),
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: AttnProj,
    ln2: Norm,
    ffn: FfnBlock,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: AttnProj,
    ln2: Norm,
    cross: AttnProj,
    ln3: Norm,
    ffn: FfnBlock,
}

/// Accumulated wall time per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub encode_attention: Duration,
    pub encode_ffn: Duration,
    pub decode_attention: Duration,
    pub decode_ffn: Duration,
    pub decode_total: Duration,
}

/// Per-forward side channel: routing traces, optional attention weights
/// and stage timings.
#[derive(Default)]
pub struct FwdCtx {
    /// `(layer, trace)`; encoder layers first, then decoder layers.
    pub traces: Vec<(usize, MoeTrace)>,
    pub keep_weights: bool,
    /// Encoder self-attention weights per layer, per head.
    pub enc_weights: Vec<Vec<Var>>,
    pub times: StageTimes,
    pub decoder_steps: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub store: ParamStore<T>,
    pub embed: ParamId,
    enc: Vec<EncLayer>,
    enc_bias: Option<RelBias>,
    enc_ln: Norm,
    dec: Vec<DecLayer>,
    dec_bias: Option<RelBias>,
    dec_ln: Norm,
    pub part_heads: [Linear; 4],
    pub text_head: Linear,
    pub audio_head: Linear,
}

/// Cached decoder activations for incremental decoding.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    cross_k: Vec<Tensor<T>>,
    cross_v: Vec<Tensor<T>>,
    emitted: usize,
    d: usize,
}

impl<T: Scalar> DecoderState<T> {
    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn cache_len(&self, layer: usize) -> usize {
        self.self_k[layer].len() / self.d
    }

    pub fn n_layers(&self) -> usize {
        self.self_k.len()
    }
}

/// Greedy or temperature sampling over part logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

fn causal_keep(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

fn repeat_keys(keys: &[bool], n_queries: usize) -> Vec<bool> {
    keys.iter().copied().cycle().take(keys.len() * n_queries).collect()
}

fn ffn_block<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FfnBlock> {
    match &cfg.moe {
        None => Ok(FfnBlock::Dense(Ffn::new(store, name, cfg.d_model, cfg.d_ffn, rng))),
        Some(m) => {
            let mut scratch = ParamStore::new();
            let dense = Ffn::new(&mut scratch, name, cfg.d_model, cfg.d_ffn, rng);
            Ok(FfnBlock::Moe(MoeLayer::upcycle_into(&scratch, &dense, store, name, m, rng)?))
        }
    }
}

/// Dense parameter name an expert parameter was copied from.
fn dense_name_of(expert_param: &str) -> Option<String> {
    let parts: Vec<&str> = expert_param.split('.').collect();
    let i = parts
        .iter()
        .position(|p| p.len() > 1 && p.starts_with('e') && p[1..].chars().all(|c| c.is_ascii_digit()))?;
    let mut kept = parts.clone();
    kept.remove(i);
    Some(kept.join("."))
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embed = store.add("embed", init_tensor(&mut rng, &[vocab::SIZE, d], 0.5));
        let mut enc = Vec::new();
        for l in 0..cfg.n_enc_layers {
            let n = format!("enc.{l}");
            enc.push(EncLayer {
                ln1: Norm::new(&mut store, &format!("{n}.ln1"), d),
                attn: AttnProj::new(&mut store, &format!("{n}.attn"), d, cfg.n_heads, &mut rng),
                ln2: Norm::new(&mut store, &format!("{n}.ln2"), d),
                ffn: ffn_block(&mut store, &format!("{n}.ffn"), &cfg, &mut rng)?,
            });
        }
        let enc_bias = cfg.rel_bias.then(|| RelBias::new(&mut store, "enc.rel_bias", cfg.n_heads, cfg.max_rel));
        let enc_ln = Norm::new(&mut store, "enc.ln", d);
        let mut dec = Vec::new();
        for l in 0..cfg.n_dec_layers {
            let n = format!("dec.{l}");
            dec.push(DecLayer {
                ln1: Norm::new(&mut store, &format!("{n}.ln1"), d),
                self_attn: AttnProj::new(&mut store, &format!("{n}.self"), d, cfg.n_heads, &mut rng),
                ln2: Norm::new(&mut store, &format!("{n}.ln2"), d),
                cross: AttnProj::new(&mut store, &format!("{n}.cross"), d, cfg.n_heads, &mut rng),
                ln3: Norm::new(&mut store, &format!("{n}.ln3"), d),
                ffn: ffn_block(&mut store, &format!("{n}.ffn"), &cfg, &mut rng)?,
            });
        }
        let dec_bias = cfg.rel_bias.then(|| RelBias::new(&mut store, "dec.rel_bias", cfg.n_heads, cfg.max_rel));
        let dec_ln = Norm::new(&mut store, "dec.ln", d);
        let part_heads = std::array::from_fn(|p| {
            Linear::new(&mut store, &format!("head.part{p}"), d, PART_CODEBOOK, true, &mut rng)
        });
        let text_head = Linear::new(&mut store, "head.text", d, TEXT_VOCAB, true, &mut rng);
        let audio_head = Linear::new(&mut store, "head.audio", d, AUDIO_CODEBOOK, true, &mut rng);
        Ok(Self {
            cfg,
            store,
            embed,
            enc,
            enc_bias,
            enc_ln,
            dec,
            dec_bias,
            dec_ln,
            part_heads,
            text_head,
            audio_head,
        })
    }

    /// Replaces every dense FFN with an expert layer whose experts copy it.
    /// All other parameters carry over unchanged; routers are freshly seeded.
    pub fn upcycle(&self, moe: &MoeConfig, seed: u64) -> Result<Self> {
        if self.cfg.moe.is_some() {
            return Err(invalid("model is already sparse"));
        }
        let cfg = BackboneConfig {
            moe: Some(moe.clone()),
            ..self.cfg.clone()
        };
        let mut out = Self::new(cfg, seed)?;
        let ids: Vec<ParamId> = out.store.ids().collect();
        for id in ids {
            let name = out.store.name(id).to_string();
            if name.ends_with(".router") {
                continue;
            }
            let src = match self.store.id(&name) {
                Some(s) => s,
                None => dense_name_of(&name)
                    .and_then(|n| self.store.id(&n))
                    .ok_or_else(|| invalid(format!("no dense source for {name}")))?,
            };
            *out.store.value_mut(id) = self.store.value(src).clone();
        }
        Ok(out)
    }

    pub fn n_layers(&self) -> usize {
        self.enc.len() + self.dec.len()
    }

    pub fn is_sparse(&self) -> bool {
        self.cfg.moe.is_some()
    }

    /// Router parameter of every expert layer, encoder first.
    pub fn routers(&self) -> Vec<ParamId> {
        self.enc
            .iter()
            .map(|l| &l.ffn)
            .chain(self.dec.iter().map(|l| &l.ffn))
            .filter_map(|f| match f {
                FfnBlock::Moe(m) => Some(m.router),
                FfnBlock::Dense(_) => None,
            })
            .collect()
    }

    fn run_ffn(&self, tape: &mut Tape<'_, T>, block: &FfnBlock, x: Var, layer: usize, ctx: &mut FwdCtx) -> Result<Var> {
        match block {
            FfnBlock::Dense(f) => f.forward(tape, x),
            FfnBlock::Moe(m) => {
                let (y, trace) = m.forward(tape, x)?;
                ctx.traces.push((layer, trace));
                Ok(y)
            }
        }
    }

    /// Bidirectional encoder; returns `[L, d]`.
    pub fn encode_tape(&self, tape: &mut Tape<'_, T>, input: &EncInput, ctx: &mut FwdCtx) -> Result<Var> {
        if input.ids.is_empty() {
            return Err(invalid("empty encoder input"));
        }
        if input.positions.iter().any(|&p| p >= self.cfg.max_enc_positions) {
            return Err(Error::OutOfRange(format!(
                "encoder position beyond limit {}",
                self.cfg.max_enc_positions
            )));
        }
        let l = input.ids.len();
        let table = tape.param(self.embed);
        let mut x = tape.index_rows(table, &input.ids)?;
        let bias = match &self.enc_bias {
            Some(b) => Some(b.forward(tape, &input.positions, &input.positions)?),
            None => None,
        };
        let keep = input.key_keep.as_ref().map(|k| repeat_keys(k, l));
        for (i, layer) in self.enc.iter().enumerate() {
            let t0 = Instant::now();
            let h = layer.ln1.forward(tape, x)?;
            let q = layer.attn.q.forward(tape, h)?;
            let k = layer.attn.k.forward(tape, h)?;
            let v = layer.attn.v.forward(tape, h)?;
            let a = attend(tape, q, k, v, 1, self.cfg.n_heads, bias.as_deref(), keep.as_deref())?;
            if ctx.keep_weights {
                ctx.enc_weights.push(a.weights.clone());
            }
            let o = layer.attn.o.forward(tape, a.out)?;
            x = tape.add(x, o)?;
            let t1 = Instant::now();
            ctx.times.encode_attention += t1 - t0;
            let h = layer.ln2.forward(tape, x)?;
            let f = self.run_ffn(tape, &layer.ffn, h, i, ctx)?;
            x = tape.add(x, f)?;
            ctx.times.encode_ffn += t1.elapsed();
        }
        self.enc_ln.forward(tape, x)
    }

    fn embed_decoder(&self, tape: &mut Tape<'_, T>, inputs: &[DecToken]) -> Result<Var> {
        let table = tape.param(self.embed);
        let single = |t: &DecToken| match *t {
            DecToken::Bos => Some(vocab::BOS),
            DecToken::Text(i) => Some(vocab::text(i)),
            DecToken::Audio(i) => Some(vocab::audio(i)),
            DecToken::Motion(_) => None,
        };
        let motion: Vec<[usize; 4]> = inputs
            .iter()
            .filter_map(|t| match t {
                DecToken::Motion(m) => Some(*m),
                _ => None,
            })
            .collect();
        if motion.is_empty() {
            let ids: Vec<usize> = inputs.iter().filter_map(single).collect();
            return Ok(tape.index_rows(table, &ids)?);
        }
        let lead = inputs.len() - motion.len();
        if lead > 1 || (lead == 1 && inputs[0] != DecToken::Bos) {
            return Err(invalid("motion decoder inputs may only be preceded by BOS"));
        }
        let mut sum: Option<Var> = None;
        for p in 0..4 {
            let ids: Vec<usize> = motion.iter().map(|m| vocab::part(p, m[p])).collect();
            let rows = tape.index_rows(table, &ids)?;
            sum = Some(match sum {
                None => rows,
                Some(s) => tape.add(s, rows)?,
            });
        }
        let sum = sum.expect("four parts");
        if lead == 0 {
            return Ok(sum);
        }
        let bos = tape.index_rows(table, &[vocab::BOS])?;
        Ok(tape.concat_rows(&[bos, sum])?)
    }

    /// Causal decoder over `inputs` (teacher forcing); returns `[n, d]`.
    pub fn decode_tape(
        &self,
        tape: &mut Tape<'_, T>,
        memory: Var,
        memory_keep: Option<&[bool]>,
        inputs: &[DecToken],
        ctx: &mut FwdCtx,
    ) -> Result<Var> {
        let n = inputs.len();
        if n > self.cfg.max_dec_positions {
            return Err(Error::OutOfRange(format!(
                "decoder length {n} exceeds limit {}",
                self.cfg.max_dec_positions
            )));
        }
        let t_start = Instant::now();
        let mut x = self.embed_decoder(tape, inputs)?;
        let pos: Vec<usize> = (0..n).collect();
        let bias = match &self.dec_bias {
            Some(b) => Some(b.forward(tape, &pos, &pos)?),
            None => None,
        };
        let keep = causal_keep(n);
        let cross_keep = memory_keep.map(|k| repeat_keys(k, n));
        for (i, layer) in self.dec.iter().enumerate() {
            let t0 = Instant::now();
            let h = layer.ln1.forward(tape, x)?;
            let q = layer.self_attn.q.forward(tape, h)?;
            let k = layer.self_attn.k.forward(tape, h)?;
            let v = layer.self_attn.v.forward(tape, h)?;
            let a = attend(tape, q, k, v, 1, self.cfg.n_heads, bias.as_deref(), Some(&keep))?;
            let o = layer.self_attn.o.forward(tape, a.out)?;
            x = tape.add(x, o)?;
            let h = layer.ln2.forward(tape, x)?;
            let q = layer.cross.q.forward(tape, h)?;
            let k = layer.cross.k.forward(tape, memory)?;
            let v = layer.cross.v.forward(tape, memory)?;
            let a = attend(tape, q, k, v, 1, self.cfg.n_heads, None, cross_keep.as_deref())?;
            let o = layer.cross.o.forward(tape, a.out)?;
            x = tape.add(x, o)?;
            let t1 = Instant::now();
            ctx.times.decode_attention += t1 - t0;
            let h = layer.ln3.forward(tape, x)?;
            let f = self.run_ffn(tape, &layer.ffn, h, self.enc.len() + i, ctx)?;
            x = tape.add(x, f)?;
            ctx.times.decode_ffn += t1.elapsed();
        }
        let out = self.dec_ln.forward(tape, x)?;
        ctx.times.decode_total += t_start.elapsed();
        Ok(out)
    }

    /// Four `[n, 256]` part logits.
    pub fn motion_logits(&self, tape: &mut Tape<'_, T>, hidden: Var) -> Result<[Var; 4]> {
        let mut out = [hidden; 4];
        for (p, head) in self.part_heads.iter().enumerate() {
            out[p] = head.forward(tape, hidden)?;
        }
        Ok(out)
    }

    pub fn token_logits(&self, tape: &mut Tape<'_, T>, hidden: Var, kind: OutputKind) -> Result<Var> {
        match kind {
            OutputKind::Text => self.text_head.forward(tape, hidden),
            OutputKind::Audio => self.audio_head.forward(tape, hidden),
            OutputKind::Motion => Err(invalid("motion output has four heads; use motion_logits")),
        }
    }

    /// Encoder output as a plain tensor.
    pub fn encode(&self, input: &EncInput, ctx: &mut FwdCtx) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.store);
        let m = self.encode_tape(&mut tape, input, ctx)?;
        Ok(tape.value(m).clone())
    }

    /// Precomputes cross-attention keys and values for incremental decoding.
    pub fn start_decode(&self, memory: &Tensor<T>) -> Result<DecoderState<T>> {
        let mut tape = Tape::new(&self.store);
        let m = tape.constant(memory.clone());
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for layer in &self.dec {
            let k = layer.cross.k.forward(&mut tape, m)?;
            let v = layer.cross.v.forward(&mut tape, m)?;
            cross_k.push(tape.value(k).clone());
            cross_v.push(tape.value(v).clone());
        }
        Ok(DecoderState {
            self_k: vec![Vec::new(); self.dec.len()],
            self_v: vec![Vec::new(); self.dec.len()],
            cross_k,
            cross_v,
            emitted: 0,
            d: self.cfg.d_model,
        })
    }

    /// Consumes one decoder position and returns its final hidden row `[1, d]`.
    pub fn decode_step(&self, state: &mut DecoderState<T>, input: DecToken, ctx: &mut FwdCtx) -> Result<Tensor<T>> {
        let pos = state.emitted;
        if pos >= self.cfg.max_dec_positions {
            return Err(Error::OutOfRange(format!(
                "decoder position {pos} exceeds limit {}",
                self.cfg.max_dec_positions
            )));
        }
        let t_start = Instant::now();
        let d = self.cfg.d_model;
        let mut tape = Tape::new(&self.store);
        let mut x = self.embed_decoder(&mut tape, &[input])?;
        let k_pos: Vec<usize> = (0..=pos).collect();
        let bias = match &self.dec_bias {
            Some(b) => Some(b.forward(&mut tape, &[pos], &k_pos)?),
            None => None,
        };
        for (i, layer) in self.dec.iter().enumerate() {
            let t0 = Instant::now();
            let h = layer.ln1.forward(&mut tape, x)?;
            let q = layer.self_attn.q.forward(&mut tape, h)?;
            let k = layer.self_attn.k.forward(&mut tape, h)?;
            let v = layer.self_attn.v.forward(&mut tape, h)?;
            state.self_k[i].extend_from_slice(tape.value(k).data());
            state.self_v[i].extend_from_slice(tape.value(v).data());
            let kc = tape.constant(Tensor::new(&[pos + 1, d], state.self_k[i].clone())?);
            let vc = tape.constant(Tensor::new(&[pos + 1, d], state.self_v[i].clone())?);
            let a = attend(&mut tape, q, kc, vc, 1, self.cfg.n_heads, bias.as_deref(), None)?;
            let o = layer.self_attn.o.forward(&mut tape, a.out)?;
            x = tape.add(x, o)?;
            let h = layer.ln2.forward(&mut tape, x)?;
            let q = layer.cross.q.forward(&mut tape, h)?;
            let kc = tape.constant(state.cross_k[i].clone());
            let vc = tape.constant(state.cross_v[i].clone());
            let a = attend(&mut tape, q, kc, vc, 1, self.cfg.n_heads, None, None)?;
            let o = layer.cross.o.forward(&mut tape, a.out)?;
            x = tape.add(x, o)?;
            let t1 = Instant::now();
            ctx.times.decode_attention += t1 - t0;
            let h = layer.ln3.forward(&mut tape, x)?;
            let f = self.run_ffn(&mut tape, &layer.ffn, h, self.enc.len() + i, ctx)?;
            x = tape.add(x, f)?;
            ctx.times.decode_ffn += t1.elapsed();
        }
        let out = self.dec_ln.forward(&mut tape, x)?;
        state.emitted += 1;
        ctx.decoder_steps += 1;
        ctx.times.decode_total += t_start.elapsed();
        Ok(tape.value(out).clone())
    }

    /// Part logits for hidden rows, as plain tensors.
    pub fn motion_logits_of(&self, hidden: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        let mut tape = Tape::new(&self.store);
        let h = tape.constant(hidden.clone());
        let l = self.motion_logits(&mut tape, h)?;
        Ok(std::array::from_fn(|p| tape.value(l[p]).clone()))
    }

    /// Encodes `window` and decodes `target_len` keyframe steps.
    pub fn chunk_predict(&self, window: &ChunkWindow, sampling: Sampling, ctx: &mut FwdCtx) -> Result<[Vec<usize>; 4]> {
        let packed = pack_template(window, self.cfg.max_enc_positions)?;
        let memory = self.encode(&packed.compact(), ctx)?;
        // Cross-attention projections of the memory are decoder attention work.
        let t0 = Instant::now();
        let mut state = self.start_decode(&memory)?;
        let setup = t0.elapsed();
        ctx.times.decode_attention += setup;
        ctx.times.decode_total += setup;
        let mut rng = match sampling {
            Sampling::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Sampling::Greedy => None,
        };
        let tau = match sampling {
            Sampling::Temperature { tau, .. } if tau > 0.0 => Some(tau),
            _ => None,
        };
        let mut prev = DecToken::Bos;
        let mut out: [Vec<usize>; 4] = Default::default();
        for _ in 0..window.target_len {
            let h = self.decode_step(&mut state, prev, ctx)?;
            let logits = self.motion_logits_of(&h)?;
            let mut step = [0; 4];
            for p in 0..4 {
                let row = logits[p].data();
                step[p] = match (tau, rng.as_mut()) {
                    (Some(tau), Some(r)) => sample_row(row, tau, r),
                    _ => argmax(row),
                };
                out[p].push(step[p]);
            }
            prev = DecToken::Motion(step);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, stage: &str) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.meta = self.cfg.to_meta();
        ck.meta.insert("kind".into(), "backbone".into());
        ck.meta.insert("stage".into(), stage.into());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.meta.get("kind").map(|s| s.as_str()) != Some("backbone") {
            return Err(Error::Config("checkpoint does not hold a backbone".into()));
        }
        let cfg = BackboneConfig::from_meta(&ck.meta)?;
        let mut model = Self::new(cfg, 0)?;
        ck.load_into(&mut model.store, "__")?;
        Ok(model)
    }
}

fn sample_row<T: Scalar>(row: &[T], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let z: Vec<f64> = row.iter().map(|v| v.as_f64() / tau).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(text: Vec<usize>, p: usize) -> ChunkWindow {
        ChunkWindow {
            task_text: text,
            audio: vec![3, 13, 501, 7],
            history: std::array::from_fn(|i| vec![i + 1; p]),
            target_len: 5,
            chunk_index: 0,
        }
    }

    #[test]
    fn vocab_is_disjoint() {
        assert_eq!(vocab::audio(0), 128);
        assert_eq!(vocab::part(0, 0), 630);
        assert_eq!(vocab::part(3, 257), vocab::SENTINELS - 1);
        assert_eq!(vocab::SIZE, vocab::BOS + 1);
    }

    #[test]
    fn packing_layout() {
        let p = pack_template(&window(vec![], 2), 64).unwrap();
        assert_eq!(p.ids[0], vocab::sentinel(Modality::Audio));
        assert_eq!(p.len(), 5 + 4 * 3);
        assert!(!p.valid[3], "audio pad is invalid");
        assert_eq!(p, pack_template(&window(vec![], 2), 64).unwrap());
        let t = pack_template(&window(vec![4, 5], 2), 64).unwrap();
        assert_eq!(t.ids[..3], [vocab::sentinel(Modality::Text), 4, 5]);
        assert_eq!(t.segments[3], Modality::Audio);
        let err = pack_template(&window(vec![4, 5], 2), 10).unwrap_err().to_string();
        assert!(err.contains("Face"), "{err}");
        let c = t.compact();
        assert_eq!(c.ids.len(), t.len() - 1);
        assert!(!c.positions.contains(&6));
    }

    #[test]
    fn expert_names_map_to_dense() {
        assert_eq!(dense_name_of("enc.1.ffn.e3.up.w").as_deref(), Some("enc.1.ffn.up.w"));
        assert_eq!(dense_name_of("enc.1.attn.q.w"), None);
    }

    #[test]
    fn config_meta_round_trip() {
        let cfg = BackboneConfig {
            moe: Some(MoeConfig::default()),
            ..BackboneConfig::default()
        };
        assert_eq!(BackboneConfig::from_meta(&cfg.to_meta()).unwrap(), cfg);
        assert!(BackboneConfig { n_heads: 3, ..BackboneConfig::default() }.validate().is_err());
    }
}
