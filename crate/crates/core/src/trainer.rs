//! Staged training: task mixture, per-family templates, stage losses, the
//! backbone loop (pretrain, s1, s2) and the separate interpolation loop.

use std::collections::BTreeMap;
use std::str::FromStr;

use kfgen_tensor::{AdamW, AdamWConfig, CeReduction, Checkpoint, Scalar, Tape, Tensor, Var};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pack_template, Backbone, BackboneConfig, ChunkWindow, DecToken, FwdCtx, OutputKind};
use crate::config::KvConfig;
use crate::error::{invalid, Error, Result};
use crate::interpnet::{InterpBatch, InterpConfig, InterpNet};
use crate::keyframe::{keyframes_of, mask_sequence, schedule, PAD_ID};
use crate::moe::{balance_on_tape, CollapseFlag, CollapseMonitor, MoeConfig, MoeTrace, RoutingStats};
use crate::tokenstream::{audio_index, audio_window, mix, text, PairedSample, AUDIO_CODEBOOK, AUDIO_PER_TEXT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    KfMotion,
    A2t,
    T2a,
    A2m,
    T2m,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::KfMotion => "kf_motion",
            TaskFamily::A2t => "a2t",
            TaskFamily::T2a => "t2a",
            TaskFamily::A2m => "a2m",
            TaskFamily::T2m => "t2m",
        }
    }

    fn needs_text(self) -> bool {
        matches!(self, TaskFamily::A2t | TaskFamily::T2a | TaskFamily::T2m)
    }

    /// Instruction words placed at the head of the encoder input.
    pub fn instruction(self) -> Vec<usize> {
        text::encode(match self {
            TaskFamily::KfMotion => "continue motion keyframes",
            TaskFamily::A2t => "transcribe audio text",
            TaskFamily::T2a => "speak text audio",
            TaskFamily::A2m => "generate motion from audio",
            TaskFamily::T2m => "generate motion from text",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    S1,
    S2,
    Interp,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::Interp => "interp",
        }
    }

    pub fn families(self) -> &'static [TaskFamily] {
        match self {
            Stage::Pretrain => &[TaskFamily::KfMotion, TaskFamily::A2t, TaskFamily::T2a],
            Stage::S1 | Stage::S2 => &[TaskFamily::A2m, TaskFamily::T2m],
            Stage::Interp => &[],
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "s1" => Ok(Stage::S1),
            "s2" => Ok(Stage::S2),
            "interp" => Ok(Stage::Interp),
            other => Err(invalid(format!("unknown stage {other:?} (pretrain, s1, s2, interp)"))),
        }
    }
}

/// Dataset indices eligible for one task family.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    pub family: TaskFamily,
    pub items: Vec<usize>,
}

/// `p_i = n_i^τ / Σ_j n_j^τ`.
pub fn mixture_probs(counts: &[usize], tau: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(invalid("no task pools"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid(format!("temperature {tau} outside [0, 1]")));
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(invalid(format!("task pool {i} is empty")));
    }
    let w: Vec<f64> = counts.iter().map(|&n| (n as f64).powf(tau)).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Draws a family from the tempered mixture, then a uniform pool item.
pub fn sample_task<R: Rng>(pools: &[TaskPool], tau: f64, rng: &mut R) -> Result<(TaskFamily, usize)> {
    let counts: Vec<usize> = pools.iter().map(|p| p.items.len()).collect();
    let probs = mixture_probs(&counts, tau)?;
    let dist = WeightedIndex::new(&probs).map_err(|e| invalid(e.to_string()))?;
    let pool = &pools[dist.sample(rng)];
    Ok((pool.family, pool.items[rng.gen_range(0..pool.items.len())]))
}

/// Pools for a stage; text families only draw samples with a transcript.
/// Empty pools are left out.
pub fn task_pools(data: &[PairedSample], stage: Stage) -> Vec<TaskPool> {
    stage
        .families()
        .iter()
        .map(|&family| TaskPool {
            family,
            items: (0..data.len())
                .filter(|&i| !family.needs_text() || !data[i].transcript.is_empty())
                .collect(),
        })
        .filter(|p| !p.items.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Motion([Vec<usize>; 4]),
    Text(Vec<usize>),
    Audio(Vec<usize>),
}

/// One `(x, y)` training instance with its supervised decoder positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub family: TaskFamily,
    pub window: ChunkWindow,
    pub target: Target,
    pub supervised: Vec<bool>,
}

impl Template {
    pub fn len(&self) -> usize {
        self.supervised.len()
    }

    pub fn is_empty(&self) -> bool {
        self.supervised.is_empty()
    }

    /// BOS followed by the targets shifted right by one.
    pub fn decoder_inputs(&self) -> Vec<DecToken> {
        let n = self.len();
        let mut out = vec![DecToken::Bos];
        for j in 0..n.saturating_sub(1) {
            out.push(match &self.target {
                Target::Motion(m) => DecToken::Motion(std::array::from_fn(|p| m[p][j])),
                Target::Text(t) => DecToken::Text(t[j]),
                Target::Audio(a) => DecToken::Audio(a[j]),
            });
        }
        out
    }

    /// Supervised tokens, counting each part separately.
    pub fn supervised_tokens(&self) -> usize {
        let per = if matches!(self.target, Target::Motion(_)) { 4 } else { 1 };
        per * self.supervised.iter().filter(|&&s| s).count()
    }
}

/// Geometry of the templates.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateParams {
    pub stride: usize,
    /// Keyframes per pretrain/s1 window.
    pub window: usize,
    pub p: usize,
    pub n: usize,
    /// Probability of truncating s2 histories.
    pub short_context: f64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self {
            stride: 6,
            window: 20,
            p: 10,
            n: 5,
            short_context: 0.5,
        }
    }
}

/// Where a template is cut from its sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    /// First target keyframe.
    pub start: usize,
    /// History keyframes kept (s2 only); the rest is padding.
    pub keep_history: usize,
}

fn transcript_span(sample: &PairedSample, frames: std::ops::Range<i64>) -> Vec<usize> {
    let a0 = audio_index(frames.start.max(0) as usize);
    let a1 = audio_index(frames.end.max(0) as usize);
    let b0 = a0 / AUDIO_PER_TEXT;
    let b1 = a1.div_ceil(AUDIO_PER_TEXT).min(sample.transcript.len());
    sample.transcript.get(b0..b1.max(b0)).unwrap_or(&[]).to_vec()
}

fn keyframe_streams(sample: &PairedSample, s: usize) -> [Vec<usize>; 4] {
    std::array::from_fn(|p| keyframes_of(&sample.motion[p].tokens, s))
}

/// Deterministic template for a given placement.
pub fn build_template(
    sample: &PairedSample,
    family: TaskFamily,
    stage: Stage,
    params: &TemplateParams,
    at: Placement,
) -> Result<Template> {
    if !stage.families().contains(&family) {
        return Err(invalid(format!("family {} is not trained in stage {}", family.name(), stage.name())));
    }
    if family.needs_text() && sample.transcript.is_empty() {
        return Err(invalid(format!("family {} needs a transcript", family.name())));
    }
    let s = params.stride.max(1);
    let kf = keyframe_streams(sample, s);
    let k = kf[0].len();
    if at.start >= k {
        return Err(Error::OutOfRange(format!("start keyframe {} beyond {k}", at.start)));
    }
    let c = at.start;
    let (target_len, hist_len, frames) = if stage == Stage::S2 {
        let f0 = (c as i64 - params.p as i64) * s as i64;
        (params.n, params.p, f0..((c + params.n) * s) as i64)
    } else {
        let len = params.window.min(k - c);
        let hist = if family == TaskFamily::KfMotion { params.p } else { 0 };
        (len, hist, (c * s) as i64..((c + len) * s) as i64)
    };
    let keep = if stage == Stage::S2 { at.keep_history.min(hist_len) } else { hist_len };
    let history: [Vec<usize>; 4] = std::array::from_fn(|p| {
        let mut h = vec![PAD_ID; hist_len];
        for i in 0..keep.min(c) {
            h[hist_len - 1 - i] = kf[p][c - 1 - i];
        }
        h
    });
    let motion_target: [Vec<usize>; 4] =
        std::array::from_fn(|p| (c..c + target_len).map(|i| kf[p].get(i).copied().unwrap_or(PAD_ID)).collect());
    let motion_sup: Vec<bool> = (c..c + target_len).map(|i| i < k).collect();
    let audio = audio_window(&sample.audio, frames.clone());
    let words = transcript_span(sample, frames);
    let mut task_text = family.instruction();
    let no_hist: [Vec<usize>; 4] = Default::default();
    let (audio_in, history, target, supervised) = match family {
        TaskFamily::KfMotion => (vec![], history, Target::Motion(motion_target), motion_sup),
        TaskFamily::A2m => (audio, history, Target::Motion(motion_target), motion_sup),
        TaskFamily::T2m => {
            task_text.extend(&words);
            (vec![], history, Target::Motion(motion_target), motion_sup)
        }
        TaskFamily::A2t => {
            let sup = words.iter().map(|&w| w != text::PAD).collect();
            (audio, no_hist, Target::Text(words), sup)
        }
        TaskFamily::T2a => {
            task_text.extend(&words);
            let sup = audio.iter().map(|&a| a < AUDIO_CODEBOOK).collect();
            (vec![], no_hist, Target::Audio(audio), sup)
        }
    };
    let window = ChunkWindow {
        task_text,
        audio: audio_in,
        history,
        target_len: supervised.len(),
        chunk_index: if stage == Stage::S2 { c / params.n.max(1) } else { 0 },
    };
    Ok(Template {
        family,
        window,
        target,
        supervised,
    })
}

/// Random placement: s2 chunks start on multiples of `N` and may have
/// their history shortened; other stages pick any window start.
pub fn draw_placement<R: Rng>(sample: &PairedSample, stage: Stage, params: &TemplateParams, rng: &mut R) -> Placement {
    let k = sample.motion_len().div_ceil(params.stride.max(1));
    if stage == Stage::S2 {
        let n = params.n.max(1);
        let start = n * rng.gen_range(0..k.div_ceil(n));
        let keep_history = if rng.gen_bool(params.short_context.clamp(0.0, 1.0)) {
            rng.gen_range(0..params.p.max(1))
        } else {
            params.p
        };
        Placement { start, keep_history }
    } else {
        Placement {
            start: rng.gen_range(0..=k.saturating_sub(params.window)),
            keep_history: params.p,
        }
    }
}

/// Every s2 chunk of a sample with full history.
pub fn s2_chunk_templates(sample: &PairedSample, family: TaskFamily, params: &TemplateParams) -> Result<Vec<Template>> {
    let k = sample.motion_len().div_ceil(params.stride.max(1));
    (0..k)
        .step_by(params.n.max(1))
        .map(|start| {
            build_template(
                sample,
                family,
                Stage::S2,
                params,
                Placement {
                    start,
                    keep_history: params.p,
                },
            )
        })
        .collect()
}

/// Loss terms of one batch.
pub struct StageLoss {
    pub total: Var,
    pub ce: Var,
    pub ce_tokens: usize,
    /// Mean load balance over expert layers, when the model has any.
    pub balance: Option<Var>,
    pub traces: Vec<(usize, MoeTrace)>,
    /// Output logits per template: four parts for motion, one otherwise.
    pub logits: Vec<Vec<Var>>,
}

impl StageLoss {
    pub fn routing_stats<T: Scalar>(&self, tape: &Tape<'_, T>, n_layers: usize, experts: usize) -> RoutingStats {
        let mut stats = RoutingStats::new(n_layers, experts);
        for (layer, trace) in &self.traces {
            stats.layers[*layer].record(tape, trace);
        }
        stats
    }
}

/// Token cross-entropy over supervised positions (mean per token), plus
/// `λ_moe` times the mean load balance outside pretraining.
pub fn stage_loss<T: Scalar>(
    model: &Backbone<T>,
    tape: &mut Tape<'_, T>,
    templates: &[Template],
    stage: Stage,
    lambda_moe: f64,
) -> Result<StageLoss> {
    let mut ctx = FwdCtx::default();
    let mut ce_sum: Option<Var> = None;
    let mut ce_tokens = 0;
    let mut all_logits = Vec::with_capacity(templates.len());
    let mut push = |tape: &mut Tape<'_, T>, v: Var| -> Result<()> {
        ce_sum = Some(match ce_sum {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
        Ok(())
    };
    for tpl in templates {
        let packed = pack_template(&tpl.window, model.cfg.max_enc_positions)?;
        let mem = model.encode_tape(tape, &packed.compact(), &mut ctx)?;
        let h = model.decode_tape(tape, mem, None, &tpl.decoder_inputs(), &mut ctx)?;
        let zero_unsup = |ids: &[usize]| -> Vec<usize> {
            ids.iter().zip(&tpl.supervised).map(|(&t, &s)| if s { t } else { 0 }).collect()
        };
        match &tpl.target {
            Target::Motion(m) => {
                let logits = model.motion_logits(tape, h)?;
                for p in 0..4 {
                    let (l, st) = tape.cross_entropy(logits[p], &zero_unsup(&m[p]), &tpl.supervised, T::zero(), CeReduction::Sum)?;
                    ce_tokens += st.count;
                    push(tape, l)?;
                }
                all_logits.push(logits.to_vec());
            }
            Target::Text(t) => {
                let logits = model.token_logits(tape, h, OutputKind::Text)?;
                let (l, st) = tape.cross_entropy(logits, &zero_unsup(t), &tpl.supervised, T::zero(), CeReduction::Sum)?;
                ce_tokens += st.count;
                push(tape, l)?;
                all_logits.push(vec![logits]);
            }
            Target::Audio(a) => {
                let logits = model.token_logits(tape, h, OutputKind::Audio)?;
                let (l, st) = tape.cross_entropy(logits, &zero_unsup(a), &tpl.supervised, T::zero(), CeReduction::Sum)?;
                ce_tokens += st.count;
                push(tape, l)?;
                all_logits.push(vec![logits]);
            }
        }
    }
    let ce = match ce_sum {
        Some(v) if ce_tokens > 0 => tape.scale(v, T::of(1.0 / ce_tokens as f64))?,
        _ => tape.constant(Tensor::scalar(T::zero())),
    };
    let mut by_layer: BTreeMap<usize, Vec<&MoeTrace>> = BTreeMap::new();
    for (layer, trace) in &ctx.traces {
        by_layer.entry(*layer).or_default().push(trace);
    }
    let mut per_layer = Vec::new();
    for traces in by_layer.values() {
        if let Some(v) = balance_on_tape(tape, traces)? {
            per_layer.push(v);
        }
    }
    let balance = if per_layer.is_empty() {
        None
    } else {
        let n = per_layer.len();
        let mut s = per_layer[0];
        for &v in &per_layer[1..] {
            s = tape.add(s, v)?;
        }
        Some(tape.scale(s, T::of(1.0 / n as f64))?)
    };
    let lambda = if stage == Stage::Pretrain { 0.0 } else { lambda_moe };
    let total = match balance {
        Some(b) if lambda != 0.0 => {
            let w = tape.scale(b, T::of(lambda))?;
            tape.add(ce, w)?
        }
        _ => ce,
    };
    Ok(StageLoss {
        total,
        ce,
        ce_tokens,
        balance,
        traces: ctx.traces,
        logits: all_logits,
    })
}

/// Run configuration; see [`TrainConfig::KEYS`] for the text form.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub seed: u64,
    pub tau: f64,
    pub lambda_moe: f64,
    pub templates: TemplateParams,
    pub lr: f64,
    pub wd: f64,
    pub batch: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip: f64,
    pub model: BackboneConfig,
    pub moe: MoeConfig,
    pub interp: InterpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            steps: 200,
            seed: 0,
            tau: 0.5,
            lambda_moe: 0.01,
            templates: TemplateParams::default(),
            lr: 1e-4,
            wd: 0.05,
            batch: 8,
            clip: 1.0,
            model: BackboneConfig::default(),
            moe: MoeConfig::default(),
            interp: InterpConfig::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "stage",
        "steps",
        "seed",
        "tau",
        "lambda_moe",
        "P",
        "N",
        "stride",
        "window",
        "lr",
        "wd",
        "batch",
        "clip",
        "short_context",
        "d_model",
        "n_heads",
        "d_ffn",
        "enc_layers",
        "dec_layers",
        "experts",
        "top_k",
        "interp_d_model",
        "interp_layers",
        "interp_heads",
        "lambda_v",
        "lambda_a",
        "smoothing",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(Self::KEYS)?;
        let mut c = Self::default();
        if let Some(s) = kv.get_str("stage") {
            c.stage = s.parse()?;
        }
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        set!("steps", c.steps);
        set!("seed", c.seed);
        set!("tau", c.tau);
        set!("lambda_moe", c.lambda_moe);
        set!("P", c.templates.p);
        set!("N", c.templates.n);
        set!("stride", c.templates.stride);
        set!("window", c.templates.window);
        set!("lr", c.lr);
        set!("wd", c.wd);
        set!("batch", c.batch);
        set!("clip", c.clip);
        set!("short_context", c.templates.short_context);
        set!("d_model", c.model.d_model);
        set!("n_heads", c.model.n_heads);
        set!("d_ffn", c.model.d_ffn);
        set!("enc_layers", c.model.n_enc_layers);
        set!("dec_layers", c.model.n_dec_layers);
        set!("experts", c.moe.experts);
        set!("top_k", c.moe.top_k);
        set!("interp_d_model", c.interp.d_model);
        set!("interp_layers", c.interp.n_temporal_layers);
        set!("interp_heads", c.interp.heads);
        set!("lambda_v", c.interp.lambda_v);
        set!("lambda_a", c.interp.lambda_a);
        set!("smoothing", c.interp.smoothing);
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("stage", self.stage.name());
        kv.set("steps", self.steps);
        kv.set("seed", self.seed);
        kv.set("tau", self.tau);
        kv.set("lambda_moe", self.lambda_moe);
        kv.set("P", self.templates.p);
        kv.set("N", self.templates.n);
        kv.set("stride", self.templates.stride);
        kv.set("window", self.templates.window);
        kv.set("lr", self.lr);
        kv.set("wd", self.wd);
        kv.set("batch", self.batch);
        kv.set("clip", self.clip);
        kv.set("short_context", self.templates.short_context);
        kv.set("d_model", self.model.d_model);
        kv.set("n_heads", self.model.n_heads);
        kv.set("d_ffn", self.model.d_ffn);
        kv.set("enc_layers", self.model.n_enc_layers);
        kv.set("dec_layers", self.model.n_dec_layers);
        kv.set("experts", self.moe.experts);
        kv.set("top_k", self.moe.top_k);
        kv.set("interp_d_model", self.interp.d_model);
        kv.set("interp_layers", self.interp.n_temporal_layers);
        kv.set("interp_heads", self.interp.heads);
        kv.set("lambda_v", self.interp.lambda_v);
        kv.set("lambda_a", self.interp.lambda_a);
        kv.set("smoothing", self.interp.smoothing);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.batch == 0 || self.templates.n == 0 || self.templates.stride == 0 || self.templates.window == 0 {
            return Err(Error::Config("batch, N, stride and window must be positive".into()));
        }
        if self.lambda_moe < 0.0 || self.lr <= 0.0 || self.wd < 0.0 {
            return Err(Error::Config("lambda_moe and wd must be >= 0, lr > 0".into()));
        }
        if self.moe.experts == 0 || self.moe.top_k == 0 || self.moe.top_k > self.moe.experts {
            return Err(Error::Config("need 1 <= top_k <= experts".into()));
        }
        self.model.validate()?;
        self.interp.validate()
    }

    /// Load-balance weight actually applied; always 0 while pretraining.
    pub fn effective_lambda(&self) -> f64 {
        if self.stage == Stage::Pretrain {
            0.0
        } else {
            self.lambda_moe
        }
    }

    fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.wd,
            clip_norm: (self.clip > 0.0).then_some(self.clip),
            ..AdamWConfig::default()
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: Stage,
    pub ce: f64,
    pub l_moe: Option<f64>,
    pub l_vel: Option<f64>,
    pub l_acc: Option<f64>,
    pub grad_norm: f64,
    pub tokens: usize,
    /// Dispatch frequency per expert, per expert layer.
    pub f_e: Vec<Vec<f64>>,
    pub families: BTreeMap<TaskFamily, usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub collapse: Vec<CollapseFlag>,
}

/// Keys whose values differ between a checkpoint's model and the run config.
fn model_mismatch(ck: &BackboneConfig, want: &BackboneConfig) -> Vec<String> {
    let (a, b) = (ck.to_meta(), want.to_meta());
    a.iter()
        .filter(|(k, _)| !matches!(k.as_str(), "experts" | "top_k"))
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, config {}", b.get(k).map_or("-", |s| s.as_str())))
        .collect()
}

/// Backbone training loop for one stage.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: Backbone<T>,
    opt: AdamW<T>,
    pub step: u64,
    data: Vec<PairedSample>,
    pools: Vec<TaskPool>,
    monitor: CollapseMonitor,
}

impl<T: Scalar> Trainer<T> {
    /// `s1` needs a pretrain (or s1, to resume) checkpoint and upcycles it;
    /// `s2` needs an s1 (or s2) checkpoint. A checkpoint from the same stage
    /// resumes with its optimizer state.
    pub fn new(cfg: TrainConfig, data: Vec<PairedSample>, init: Option<&Checkpoint<T>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage == Stage::Interp {
            return Err(invalid("the interp stage has its own loop (run_interp_training)"));
        }
        let pools = task_pools(&data, cfg.stage);
        if pools.is_empty() {
            return Err(invalid(format!("no samples usable for stage {}", cfg.stage.name())));
        }
        let mut opt = AdamW::new(cfg.adam());
        let mut step = 0;
        let model = match (cfg.stage, init) {
            (Stage::Pretrain, None) => Backbone::new(BackboneConfig { moe: None, ..cfg.model.clone() }, cfg.seed)?,
            (stage, None) => {
                let need = if stage == Stage::S1 { "pretrain" } else { "s1" };
                return Err(Error::Config(format!("stage {} needs an init checkpoint from {need}", stage.name())));
            }
            (stage, Some(ck)) => {
                let from: Stage = ck
                    .meta
                    .get("stage")
                    .ok_or_else(|| Error::Config("init checkpoint has no stage".into()))?
                    .parse()?;
                let model = Backbone::from_checkpoint(ck)?;
                let diff = model_mismatch(&model.cfg, &cfg.model);
                if !diff.is_empty() {
                    return Err(Error::Config(format!("checkpoint/config mismatch: {}", diff.join("; "))));
                }
                let resume = from == stage;
                let ok = resume || matches!((from, stage), (Stage::Pretrain, Stage::S1) | (Stage::S1, Stage::S2));
                if !ok {
                    return Err(Error::Config(format!(
                        "stage {} cannot start from a {} checkpoint",
                        stage.name(),
                        from.name()
                    )));
                }
                let model = if from == Stage::Pretrain && stage == Stage::S1 {
                    model.upcycle(&cfg.moe, cfg.seed)?
                } else {
                    model
                };
                if resume {
                    opt.load_from(&model.store, ck)?;
                    step = opt.steps_taken();
                }
                model
            }
        };
        Ok(Self {
            cfg,
            model,
            opt,
            step,
            data,
            pools,
            monitor: CollapseMonitor::new(0.9, 50),
        })
    }

    pub fn pools(&self) -> &[TaskPool] {
        &self.pools
    }

    /// The batch used at `step`; a function of the seed and the step only.
    pub fn batch_for(&self, step: u64) -> Result<Vec<Template>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.cfg.seed, step]));
        (0..self.cfg.batch)
            .map(|_| {
                let (family, i) = sample_task(&self.pools, self.cfg.tau, &mut rng)?;
                let at = draw_placement(&self.data[i], self.cfg.stage, &self.cfg.templates, &mut rng);
                build_template(&self.data[i], family, self.cfg.stage, &self.cfg.templates, at)
            })
            .collect()
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.batch_for(self.step)?;
        self.train_on(&batch)
    }

    /// One optimizer step on the given templates.
    pub fn train_on(&mut self, batch: &[Template]) -> Result<StepMetrics> {
        let mut families = BTreeMap::new();
        for t in batch {
            *families.entry(t.family).or_insert(0) += 1;
        }
        let (grads, ce, l_moe, tokens, stats) = {
            let mut tape = Tape::new(&self.model.store);
            let loss = stage_loss(&self.model, &mut tape, batch, self.cfg.stage, self.cfg.effective_lambda())?;
            let stats = loss.routing_stats(&tape, self.model.n_layers(), self.model.cfg.moe.as_ref().map_or(0, |m| m.experts));
            let grads = tape.backward(loss.total)?.into_params();
            (
                grads,
                tape.value(loss.ce).item().as_f64(),
                loss.balance.map(|b| tape.value(b).item().as_f64()),
                loss.ce_tokens,
                stats,
            )
        };
        let grad_norm = self.opt.step(&mut self.model.store, &grads);
        self.step += 1;
        let f_e = stats.layers.iter().filter(|l| l.tokens > 0).map(|l| l.f()).collect();
        let collapse = if self.model.is_sparse() { self.monitor.push(stats) } else { Vec::new() };
        Ok(StepMetrics {
            step: self.step,
            stage: self.cfg.stage,
            ce,
            l_moe,
            l_vel: None,
            l_acc: None,
            grad_norm,
            tokens,
            f_e,
            families,
            collapse,
        })
    }

    /// Runs up to `steps` steps; `on_step` returns false to stop early.
    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(&StepMetrics) -> Result<bool>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.train_step()?;
            let go = on_step(&m)?;
            out.push(m);
            if !go {
                break;
            }
        }
        Ok(out)
    }

    /// Mean per-token CE of the current weights on `templates`.
    pub fn eval_ce(&self, templates: &[Template]) -> Result<f64> {
        let mut tape = Tape::new(&self.model.store);
        let loss = stage_loss(&self.model, &mut tape, templates, self.cfg.stage, 0.0)?;
        Ok(tape.value(loss.ce).item().as_f64())
    }

    /// Weights, optimizer state and run metadata.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = self.model.to_checkpoint(self.cfg.stage.name());
        self.opt.save_into(&self.model.store, &mut ck);
        ck.meta.insert("seed".into(), self.cfg.seed.to_string());
        ck
    }
}

/// Interpolation training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpTrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub stride: usize,
    /// Intervals per training window; windows hold `n * s + 1` frames.
    pub intervals: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub clip: f64,
}

impl Default for InterpTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            seed: 0,
            stride: 6,
            intervals: 5,
            batch: 8,
            lr: 1e-3,
            wd: 0.05,
            clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterpMetrics {
    pub step: u64,
    pub ce: f64,
    pub l_vel: f64,
    pub l_acc: f64,
    pub grad_norm: f64,
    pub masked: usize,
}

/// Grid-aligned masked windows drawn from dense motion.
pub fn interp_batch<R: Rng>(data: &[PairedSample], cfg: &InterpTrainConfig, rng: &mut R) -> Result<InterpBatch> {
    let s = cfg.stride.max(1);
    let want = cfg.intervals * s + 1;
    let items = (0..cfg.batch)
        .map(|_| {
            let sample = &data[rng.gen_range(0..data.len())];
            let t = sample.motion_len();
            let len = want.min(t);
            let slots = (t - len) / s;
            let start = s * rng.gen_range(0..=slots);
            let dense: [Vec<usize>; 4] = std::array::from_fn(|p| sample.motion[p].tokens[start..start + len].to_vec());
            let masked = mask_sequence(&dense, &schedule(len, s)?)?;
            Ok((masked, dense))
        })
        .collect::<Result<Vec<_>>>()?;
    InterpBatch::new(&items)
}

/// Outcome of [`run_interp_training`].
pub struct InterpRun<T: Scalar> {
    pub net: InterpNet<T>,
    pub metrics: Vec<InterpMetrics>,
    /// Set when a batch had no masked frame; training stops with loss 0.
    pub degenerate: bool,
}

/// Trains the interpolation network on its own, independent of any backbone.
pub fn run_interp_training<T: Scalar>(
    data: &[PairedSample],
    cfg: &InterpTrainConfig,
    net_cfg: &InterpConfig,
    mut on_step: impl FnMut(&InterpMetrics) -> bool,
) -> Result<InterpRun<T>> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if data.iter().any(|d| d.motion_len() < 2) {
        return Err(invalid("interpolation windows need at least two frames"));
    }
    let mut net = InterpNet::<T>::new(net_cfg.clone(), cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.wd,
        clip_norm: (cfg.clip > 0.0).then_some(cfg.clip),
        ..AdamWConfig::default()
    });
    let mut degenerate = false;
    let mut metrics = Vec::new();
    for step in 0..cfg.steps as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, step, 0x1e7]));
        let batch = interp_batch(data, cfg, &mut rng)?;
        let (grads, m) = {
            let mut tape = Tape::new(&net.store);
            let loss = net.loss_interp(&mut tape, &batch)?;
            let m = InterpMetrics {
                step: step + 1,
                ce: tape.value(loss.ce).item().as_f64(),
                l_vel: tape.value(loss.vel).item().as_f64(),
                l_acc: tape.value(loss.acc).item().as_f64(),
                grad_norm: 0.0,
                masked: loss.masked_count,
            };
            (tape.backward(loss.total)?.into_params(), m)
        };
        if m.masked == 0 {
            // Every frame is an anchor (stride 1): there is nothing to learn.
            degenerate = true;
            metrics.push(m);
            break;
        }
        let grad_norm = opt.step(&mut net.store, &grads);
        let m = InterpMetrics { grad_norm, ..m };
        let go = on_step(&m);
        metrics.push(m);
        if !go {
            break;
        }
    }
    Ok(InterpRun {
        net,
        metrics,
        degenerate,
    })
}

/// Masked-frame share of a window of `len` frames at stride `s`.
pub fn masked_fraction(len: usize, s: usize) -> Result<f64> {
    let sched = schedule(len, s)?;
    Ok((0..len).filter(|&i| !sched.is_fixed(i)).count() as f64 / len as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenstream::{synth_dataset, SynthConfig};

    #[test]
    fn mixture_examples() {
        let p = mixture_probs(&[100, 1], 0.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = mixture_probs(&[100, 1], 1.0).unwrap();
        assert!((p[0] - 100.0 / 101.0).abs() < 1e-15);
        let p = mixture_probs(&[100, 1], 0.5).unwrap();
        assert!((p[0] - 10.0 / 11.0).abs() < 1e-15);
        assert!(mixture_probs(&[3, 0], 0.5).is_err());
        assert!(mixture_probs(&[3], 1.5).is_err());
    }

    #[test]
    fn template_families() {
        let data = synth_dataset(1, &SynthConfig { n_samples: 2, ..SynthConfig::default() }).unwrap();
        let params = TemplateParams::default();
        let at = Placement { start: 0, keep_history: 10 };
        let a2t = build_template(&data[0], TaskFamily::A2t, Stage::Pretrain, &params, at).unwrap();
        match &a2t.target {
            Target::Text(t) => assert!(t.iter().all(|&x| x < 128)),
            other => panic!("{other:?}"),
        }
        assert!(a2t.window.history.iter().all(|h| h.is_empty()));
        let s2 = build_template(&data[0], TaskFamily::A2m, Stage::S2, &params, Placement { start: 10, keep_history: 10 }).unwrap();
        assert_eq!(s2.len(), 5);
        assert_eq!(s2.window.audio.len(), 150);
        assert!(s2.supervised.iter().all(|&s| s));
        assert_eq!(
            s2,
            build_template(&data[0], TaskFamily::A2m, Stage::S2, &params, Placement { start: 10, keep_history: 10 }).unwrap()
        );
        let short = build_template(&data[0], TaskFamily::A2m, Stage::S2, &params, Placement { start: 10, keep_history: 3 }).unwrap();
        assert_eq!(short.window.history[0][..7], [PAD_ID; 7]);
        assert_eq!(short.window.history[0][7..], s2.window.history[0][7..]);
        let tail = build_template(&data[0], TaskFamily::A2m, Stage::S2, &params, Placement { start: 18, keep_history: 10 }).unwrap();
        assert_eq!(tail.supervised, vec![true, true, false, false, false]);
        assert!(build_template(&data[0], TaskFamily::A2m, Stage::Pretrain, &params, at).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let c = TrainConfig {
            stage: Stage::S2,
            tau: 0.25,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        let mut kv = c.to_kv();
        kv.set("bogus", 1);
        assert!(TrainConfig::from_kv(&kv).is_err());
    }
}
