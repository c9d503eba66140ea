//! Token-space evaluation: masked-frame accuracy against the linear
//! baseline, per-family perplexity and an embedding-space diversity score.

use std::collections::BTreeMap;

use kfgen_tensor::{Scalar, Tensor};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::backbone::{vocab, Backbone, Sampling};
use crate::error::{invalid, Result};
use crate::interpnet::{linear_interp_baseline, InterpNet};
use crate::keyframe::{mask_sequence, schedule, MaskedSequence};
use crate::streamer::{start_session, StreamConfig};
use crate::tokenstream::{PairedSample, PART_CODEBOOK};
use crate::trainer::{build_template, s2_chunk_templates, stage_loss, Placement, Stage, TaskFamily, Template, TemplateParams};

/// Shown on every report.
pub const BANNER: &str = "token-space proxies only: masked-token accuracy, perplexity and embedding L1 \
diversity are not comparable to FGD, BC or diversity values computed on rendered motion";

/// Anything that fills masked frames.
pub trait MaskedPredictor<T: Scalar>: Sync {
    /// `(position, id)` for every masked frame, per part.
    fn predict(&self, masked: &MaskedSequence) -> Result<[Vec<(usize, usize)>; 4]>;
    /// Token tables the linear baseline interpolates in.
    fn tables(&self) -> [Tensor<T>; 4];
}

impl<T: Scalar> MaskedPredictor<T> for InterpNet<T> {
    fn predict(&self, masked: &MaskedSequence) -> Result<[Vec<(usize, usize)>; 4]> {
        self.infill(masked)
    }

    fn tables(&self) -> [Tensor<T>; 4] {
        self.table_values()
    }
}

/// Masked-frame accuracy of a predictor and of the linear baseline on the
/// same frames.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterpEval {
    pub stride: usize,
    /// Masked frames per part.
    pub masked_frames: usize,
    pub accuracy: [f64; 4],
    pub linear_accuracy: [f64; 4],
    /// Pooled over parts.
    pub overall: f64,
    pub linear_overall: f64,
    pub delta: f64,
    /// Positions only the model got right, and only the baseline got right.
    pub model_only: u64,
    pub linear_only: u64,
    /// One-sided sign test of `model_only` against `linear_only`.
    pub p_value: f64,
}

/// Grid windows of `intervals * s + 1` frames (the last one may be
/// shorter), adjacent windows sharing their boundary anchor.
pub fn eval_windows(sample: &PairedSample, s: usize, intervals: usize) -> Result<Vec<([Vec<usize>; 4], MaskedSequence)>> {
    let t = sample.motion_len();
    let span = intervals.max(1) * s;
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < t {
        let len = (span + 1).min(t - start);
        let dense: [Vec<usize>; 4] = std::array::from_fn(|p| sample.motion[p].tokens[start..start + len].to_vec());
        let masked = mask_sequence(&dense, &schedule(len, s)?)?;
        out.push((dense, masked));
        start += span;
    }
    Ok(out)
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips.
pub fn sign_test(wins: u64, losses: u64) -> f64 {
    let n = wins + losses;
    if n == 0 || wins == 0 {
        return 1.0;
    }
    Binomial::new(0.5, n).map_or(1.0, |b| b.sf(wins - 1))
}

/// Two-sided binomial interval for the success count of `n` draws at rate
/// `p`, as fractions of `n`.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> Result<(f64, f64)> {
    let b = Binomial::new(p, n).map_err(|e| invalid(e.to_string()))?;
    let tail = (1.0 - level) / 2.0;
    let lo = b.inverse_cdf(tail);
    let hi = b.inverse_cdf(1.0 - tail);
    Ok((lo as f64 / n as f64, hi as f64 / n as f64))
}

pub fn eval_interpolation<T: Scalar, M: MaskedPredictor<T>>(
    model: &M,
    data: &[PairedSample],
    s: usize,
    intervals: usize,
) -> Result<InterpEval> {
    let tables = model.tables();
    let windows: Vec<_> = data
        .iter()
        .map(|d| eval_windows(d, s, intervals))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    // Per window: [model hits, linear hits] per part, masked count, and
    // the discordant pair counts.
    let per: Vec<([[u64; 2]; 4], u64, u64, u64)> = windows
        .par_iter()
        .map(|(dense, masked)| {
            let pred = model.predict(masked)?;
            let lin = linear_interp_baseline(masked, &tables);
            let mut hits = [[0u64; 2]; 4];
            let (mut only_m, mut only_l) = (0, 0);
            for p in 0..4 {
                for (&(i, a), &(j, b)) in pred[p].iter().zip(&lin[p]) {
                    debug_assert_eq!(i, j);
                    let truth = dense[p][i];
                    let (hm, hl) = (a == truth, b == truth);
                    hits[p][0] += hm as u64;
                    hits[p][1] += hl as u64;
                    only_m += (hm && !hl) as u64;
                    only_l += (hl && !hm) as u64;
                }
            }
            Ok((hits, masked.masked_positions().len() as u64, only_m, only_l))
        })
        .collect::<Result<Vec<_>>>()?;
    let masked_frames: u64 = per.iter().map(|x| x.1).sum();
    if masked_frames == 0 {
        return Err(invalid(format!("stride {s} leaves no masked frames to score")));
    }
    let mut hits = [[0u64; 2]; 4];
    for (h, ..) in &per {
        for p in 0..4 {
            hits[p][0] += h[p][0];
            hits[p][1] += h[p][1];
        }
    }
    let n = masked_frames as f64;
    let accuracy = std::array::from_fn(|p| hits[p][0] as f64 / n);
    let linear_accuracy = std::array::from_fn(|p| hits[p][1] as f64 / n);
    let overall = hits.iter().map(|h| h[0]).sum::<u64>() as f64 / (4.0 * n);
    let linear_overall = hits.iter().map(|h| h[1]).sum::<u64>() as f64 / (4.0 * n);
    let model_only = per.iter().map(|x| x.2).sum();
    let linear_only = per.iter().map(|x| x.3).sum();
    Ok(InterpEval {
        stride: s,
        masked_frames: masked_frames as usize,
        accuracy,
        linear_accuracy,
        overall,
        linear_overall,
        delta: overall - linear_overall,
        model_only,
        linear_only,
        p_value: sign_test(model_only, linear_only),
    })
}

/// Evaluation templates for a family: every s2 chunk for the motion
/// families, one window from the start of each sample otherwise.
pub fn family_templates(data: &[PairedSample], family: TaskFamily, params: &TemplateParams) -> Result<Vec<Template>> {
    let mut out = Vec::new();
    for d in data {
        if matches!(family, TaskFamily::A2t | TaskFamily::T2a | TaskFamily::T2m) && d.transcript.is_empty() {
            continue;
        }
        match family {
            TaskFamily::A2m | TaskFamily::T2m => out.extend(s2_chunk_templates(d, family, params)?),
            _ => out.push(build_template(
                d,
                family,
                Stage::Pretrain,
                params,
                Placement {
                    start: 0,
                    keep_history: params.p,
                },
            )?),
        }
    }
    Ok(out)
}

/// `exp` of the per-token cross-entropy, per family; families without
/// usable samples are left out.
pub fn eval_perplexity<T: Scalar>(
    model: &Backbone<T>,
    data: &[PairedSample],
    families: &[TaskFamily],
    params: &TemplateParams,
) -> Result<BTreeMap<TaskFamily, f64>> {
    let mut out = BTreeMap::new();
    for &family in families {
        let templates = family_templates(data, family, params)?;
        let parts: Vec<(f64, usize)> = templates
            .par_iter()
            .map(|t| {
                let mut tape = kfgen_tensor::Tape::new(&model.store);
                let stage = if matches!(family, TaskFamily::A2m | TaskFamily::T2m) { Stage::S2 } else { Stage::Pretrain };
                let loss = stage_loss(model, &mut tape, std::slice::from_ref(t), stage, 0.0)?;
                Ok((tape.value(loss.ce).item().as_f64() * loss.ce_tokens as f64, loss.ce_tokens))
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens: usize = parts.iter().map(|x| x.1).sum();
        if tokens > 0 {
            let nll: f64 = parts.iter().map(|x| x.0).sum();
            out.insert(family, (nll / tokens as f64).exp());
        }
    }
    Ok(out)
}

/// Frames of a generation mapped through the backbone's input embedding,
/// parts concatenated: `[frames, 4 * d]`.
pub fn embed_trajectory<T: Scalar>(model: &Backbone<T>, dense: &[Vec<usize>; 4]) -> Result<Vec<Vec<f64>>> {
    let table = model.store.value(model.embed);
    let d = table.last_dim();
    let frames = dense[0].len();
    (0..frames)
        .map(|f| {
            let mut row = Vec::with_capacity(4 * d);
            for (p, part) in dense.iter().enumerate() {
                let id = *part.get(f).ok_or_else(|| invalid("ragged trajectory"))?;
                if id >= PART_CODEBOOK {
                    return Err(invalid(format!("frame {f} part {p} holds non-base id {id}")));
                }
                row.extend(table.row(vocab::part(p, id)).iter().map(|v| v.as_f64()));
            }
            Ok(row)
        })
        .collect()
}

/// Mean per-frame L1 distance between two trajectories of equal length.
pub fn l1_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()).sum::<f64>())
        .sum();
    total / a.len().max(1) as f64
}

/// Mean pairwise L1 distance.
pub fn pairwise_l1(trajectories: &[Vec<Vec<f64>>]) -> Result<f64> {
    let n = trajectories.len();
    if n < 2 {
        return Err(invalid(format!("diversity needs at least 2 generations, got {n}")));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += l1_distance(&trajectories[i], &trajectories[j]);
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// How generations differ across seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DiversityMode {
    Greedy,
    Temperature(f64),
}

/// Generates once per seed on the same audio and prefill and returns the
/// mean pairwise L1 distance of the embedded trajectories.
pub fn eval_diversity<T: Scalar>(
    model: &Backbone<T>,
    interp: Option<&InterpNet<T>>,
    audio: &[usize],
    prefill: Option<&[Vec<usize>; 4]>,
    cfg: StreamConfig,
    mode: DiversityMode,
    seeds: &[u64],
) -> Result<f64> {
    if seeds.len() < 2 {
        return Err(invalid(format!("diversity needs at least 2 seeds, got {}", seeds.len())));
    }
    let trajectories = seeds
        .par_iter()
        .map(|&seed| {
            let sampling = match mode {
                DiversityMode::Greedy => Sampling::Greedy,
                DiversityMode::Temperature(tau) => Sampling::Temperature { tau, seed },
            };
            let session = start_session(model, interp, audio, prefill.cloned(), StreamConfig { sampling, ..cfg })?;
            let (buffer, _) = session.run_to_end()?;
            embed_trajectory(model, &std::array::from_fn(|p| buffer.dense(p)))
        })
        .collect::<Result<Vec<_>>>()?;
    pairwise_l1(&trajectories)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepCounts {
    pub stride: usize,
    pub n: usize,
    pub frames: usize,
    pub decoder_steps: usize,
    /// Decoder steps a frame-by-frame decoder would take for the same frames.
    pub dense_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub banner: &'static str,
    pub masked_token_accuracy: Option<InterpEval>,
    pub perplexity: BTreeMap<TaskFamily, f64>,
    pub l1_diversity: Option<f64>,
    pub step_counts: Option<StepCounts>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self {
            banner: BANNER,
            masked_token_accuracy: None,
            perplexity: BTreeMap::new(),
            l1_diversity: None,
            step_counts: None,
        }
    }
}

impl Default for EvalReport {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        // P(X >= 9 | n = 10) = 11 / 1024.
        assert!((sign_test(9, 1) - 11.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test(0, 5), 1.0);
        assert!((sign_test(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pairwise_mean() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![1.0, 2.0]];
        let c = vec![vec![1.0, 0.0]];
        // pairs: 3, 1, 2.
        assert!((pairwise_l1(&[a.clone(), b.clone(), c.clone()]).unwrap() - 2.0).abs() < 1e-12);
        assert!((pairwise_l1(&[c, a.clone(), b]).unwrap() - 2.0).abs() < 1e-12);
        assert!(pairwise_l1(&[a]).is_err());
    }
}
