//! Keyframe schedules, masked sequences for in-betweening, anchor-preserving
//! merge and keyframe-space chunking. Indices are 0-based: anchors sit at
//! `{0, s, 2s, ..} ∩ [0, T)` and the last valid frame `T - 1` is always
//! treated as an anchor as well.

use std::ops::Range;

use crate::error::{invalid, Result};
use crate::tokenstream::PART_CODEBOOK;

pub const MASK_ID: usize = PART_CODEBOOK;
pub const PAD_ID: usize = PART_CODEBOOK + 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyframeSchedule {
    pub t: usize,
    pub s: usize,
    pub anchors: Vec<usize>,
    pub complement: Vec<usize>,
    pub t_last: usize,
}

impl KeyframeSchedule {
    pub fn new(t: usize, s: usize) -> Result<Self> {
        if t < 1 || s < 1 {
            return Err(invalid(format!("schedule needs T >= 1 and s >= 1, got T={t}, s={s}")));
        }
        let anchors: Vec<usize> = (0..t).step_by(s).collect();
        let complement = (0..t).filter(|i| i % s != 0).collect();
        Ok(Self {
            t,
            s,
            anchors,
            complement,
            t_last: t - 1,
        })
    }

    /// K, the number of grid anchors.
    pub fn k(&self) -> usize {
        self.anchors.len()
    }

    /// Whether frame `i` keeps its token (grid anchor or `t_last`).
    pub fn is_fixed(&self, i: usize) -> bool {
        i % self.s == 0 || i == self.t_last
    }
}

/// Shorthand for [`KeyframeSchedule::new`].
pub fn schedule(t: usize, s: usize) -> Result<KeyframeSchedule> {
    KeyframeSchedule::new(t, s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameType {
    Anchor = 0,
    Masked = 1,
    Pad = 2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    /// Per part, indexed like [`crate::tokenstream::Part`].
    pub tokens: [Vec<usize>; 4],
    pub frame_types: Vec<FrameType>,
}

impl MaskedSequence {
    pub fn len(&self) -> usize {
        self.frame_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_types.is_empty()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.positions(FrameType::Masked)
    }

    pub fn positions(&self, ty: FrameType) -> Vec<usize> {
        self.frame_types
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == ty)
            .map(|(i, _)| i)
            .collect()
    }

    /// Appends pad frames up to `len`.
    pub fn padded(mut self, len: usize) -> Result<Self> {
        if len < self.len() {
            return Err(invalid(format!("cannot pad masked sequence of {} to {len}", self.len())));
        }
        for t in &mut self.tokens {
            t.resize(len, PAD_ID);
        }
        self.frame_types.resize(len, FrameType::Pad);
        Ok(self)
    }
}

/// Replaces every non-fixed frame with the mask id.
pub fn mask_sequence(dense: &[Vec<usize>; 4], sched: &KeyframeSchedule) -> Result<MaskedSequence> {
    for (p, d) in dense.iter().enumerate() {
        if d.len() != sched.t {
            return Err(invalid(format!("part {p} has {} frames, schedule expects {}", d.len(), sched.t)));
        }
        if let Some(bad) = d.iter().find(|&&v| v >= PART_CODEBOOK) {
            return Err(invalid(format!("part {p} holds id {bad} outside the base codebook")));
        }
    }
    let frame_types: Vec<FrameType> = (0..sched.t)
        .map(|i| if sched.is_fixed(i) { FrameType::Anchor } else { FrameType::Masked })
        .collect();
    let tokens = std::array::from_fn(|p| {
        dense[p]
            .iter()
            .zip(&frame_types)
            .map(|(&v, &f)| if f == FrameType::Anchor { v } else { MASK_ID })
            .collect()
    });
    Ok(MaskedSequence { tokens, frame_types })
}

/// Fills masked frames from `predictions` (`(position, id)` per part). Every
/// masked frame must be predicted exactly once and nothing else may be.
/// Pad frames are dropped from the output.
pub fn merge(masked: &MaskedSequence, predictions: &[Vec<(usize, usize)>; 4]) -> Result<[Vec<usize>; 4]> {
    let want = masked.masked_positions();
    let mut out: [Vec<usize>; 4] = Default::default();
    for p in 0..4 {
        let mut got: Vec<(usize, usize)> = predictions[p].clone();
        got.sort_unstable();
        let positions: Vec<usize> = got.iter().map(|&(i, _)| i).collect();
        if positions != want {
            let missing: Vec<usize> = want.iter().filter(|i| !positions.contains(i)).copied().collect();
            let extra: Vec<usize> = positions.iter().filter(|i| !want.contains(i)).copied().collect();
            return Err(invalid(format!(
                "part {p}: predictions do not match masked frames (missing {missing:?}, extra {extra:?})"
            )));
        }
        if let Some(&(i, v)) = got.iter().find(|&&(_, v)| v >= PART_CODEBOOK) {
            return Err(invalid(format!("part {p}: prediction {v} at frame {i} outside the base codebook")));
        }
        let mut dense = masked.tokens[p].clone();
        for (i, v) in got {
            dense[i] = v;
        }
        dense.truncate(masked.frame_types.iter().take_while(|&&f| f != FrameType::Pad).count());
        out[p] = dense;
    }
    Ok(out)
}

/// Tokens on the stride grid.
pub fn keyframes_of(dense: &[usize], s: usize) -> Vec<usize> {
    dense.iter().step_by(s.max(1)).copied().collect()
}

/// One autoregressive window in keyframe index space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KfChunk {
    pub index: usize,
    /// Keyframes this chunk predicts, clipped to the stream.
    pub target: Range<usize>,
    /// Committed keyframes used as history.
    pub history: Range<usize>,
    /// Pad slots in front of the history so that it always has `P` entries.
    pub pad_left: usize,
}

/// Chunks covering keyframes `[start, k_total)` in steps of `n`, each with
/// up to `p` keyframes of history.
pub fn kf_chunks(k_total: usize, p: usize, n: usize, start: usize) -> Result<Vec<KfChunk>> {
    if n < 1 {
        return Err(invalid("chunk size N must be at least 1"));
    }
    let mut out = Vec::new();
    let mut c = start;
    while c < k_total {
        let h0 = c.saturating_sub(p);
        out.push(KfChunk {
            index: out.len(),
            target: c..(c + n).min(k_total),
            history: h0..c,
            pad_left: p - (c - h0),
        });
        c += n;
    }
    Ok(out)
}

/// The `P` history tokens of `chunk`, left-padded with `pad`.
pub fn history_tokens(stream: &[usize], chunk: &KfChunk, pad: usize) -> Vec<usize> {
    let mut h = vec![pad; chunk.pad_left];
    h.extend_from_slice(&stream[chunk.history.clone()]);
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = schedule(30, 6).unwrap();
        assert_eq!(s.anchors, vec![0, 6, 12, 18, 24]);
        assert_eq!(s.k(), 5);
        assert_eq!(schedule(120, 6).unwrap().k(), 20);
        let d = schedule(9, 1).unwrap();
        assert_eq!(d.anchors.len(), 9);
        assert!(d.complement.is_empty());
        assert!(schedule(0, 3).is_err());
        assert!(schedule(3, 0).is_err());
    }

    #[test]
    fn mask_examples() {
        let dense: [Vec<usize>; 4] = std::array::from_fn(|p| (0..7).map(|i| i * 10 + p).collect());
        let m = mask_sequence(&dense, &schedule(7, 3).unwrap()).unwrap();
        assert_eq!(m.masked_positions(), vec![1, 2, 4, 5]);
        assert_eq!(m.tokens[0][6], 60);
        let id = mask_sequence(&dense, &schedule(7, 1).unwrap()).unwrap();
        assert_eq!(id.tokens, dense);

        let preds = std::array::from_fn(|p| m.masked_positions().iter().map(|&i| (i, dense[p][i])).collect());
        assert_eq!(merge(&m, &preds).unwrap(), dense);

        let mut bad = dense.clone();
        bad[2][0] = 256;
        assert!(mask_sequence(&bad, &schedule(7, 3).unwrap()).is_err());
    }

    #[test]
    fn merge_rejects_wrong_coverage() {
        let dense: [Vec<usize>; 4] = std::array::from_fn(|_| vec![1, 2, 3, 4]);
        let m = mask_sequence(&dense, &schedule(4, 2).unwrap()).unwrap();
        assert_eq!(m.masked_positions(), vec![1]);
        let missing: [Vec<(usize, usize)>; 4] = Default::default();
        assert!(merge(&m, &missing).is_err());
        let extra: [Vec<(usize, usize)>; 4] = std::array::from_fn(|_| vec![(1, 9), (2, 9)]);
        assert!(merge(&m, &extra).is_err());
        let none = mask_sequence(&dense, &schedule(4, 1).unwrap()).unwrap();
        assert_eq!(merge(&none, &missing).unwrap(), dense);
    }

    #[test]
    fn chunk_examples() {
        let c = kf_chunks(20, 10, 5, 10).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].history, 0..10);
        assert_eq!(c[1].target, 15..20);
        let one = kf_chunks(7, 3, 7, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].pad_left, 3);
        let ragged = kf_chunks(12, 10, 5, 0).unwrap();
        assert_eq!(ragged.iter().map(|c| c.target.clone()).collect::<Vec<_>>(), vec![0..5, 5..10, 10..12]);
        assert_eq!(ragged[1].pad_left, 5);
        let h = history_tokens(&(0..12).collect::<Vec<_>>(), &ragged[1], PAD_ID);
        assert_eq!(h, vec![PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID, 0, 1, 2, 3, 4]);
    }
}
