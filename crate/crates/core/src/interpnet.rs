//! Masked in-betweening network.
//!
//! Per frame, the four part embeddings (plus a frame-type tag) are mixed by
//! per-part linear maps and summed; temporal self-attention runs over the
//! resulting frame sequence. A small part-aware block then attends across
//! the four part slots of each frame before the part heads. Audio is not an
//! input.

use std::collections::BTreeMap;

use kfgen_tensor::{CeReduction, Checkpoint, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::keyframe::{FrameType, MaskedSequence, MASK_ID, PAD_ID};
use crate::nn::{argmax, attend, init_tensor, AttnProj, Ffn, Linear, Norm};
use crate::tokenstream::PART_CODEBOOK;

#[derive(Clone, Debug, PartialEq)]
pub struct InterpConfig {
    pub d_model: usize,
    pub n_temporal_layers: usize,
    pub n_part_layers: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub lambda_v: f64,
    pub lambda_a: f64,
    pub smoothing: f64,
    /// One table, one mixing map and one head shared by all parts. Used to
    /// test part equivariance.
    pub tied: bool,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_temporal_layers: 2,
            n_part_layers: 1,
            heads: 4,
            d_ffn: 64,
            max_len: 64,
            lambda_v: 1e-3,
            lambda_a: 1e-4,
            smoothing: 0.1,
            tied: false,
        }
    }
}

impl InterpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(invalid("interp d_model must be divisible by heads"));
        }
        if self.lambda_v < 0.0 || self.lambda_a < 0.0 {
            return Err(invalid("smoothness weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(invalid("label smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        [
            ("d_model", self.d_model.to_string()),
            ("temporal_layers", self.n_temporal_layers.to_string()),
            ("part_layers", self.n_part_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("max_len", self.max_len.to_string()),
            ("lambda_v", self.lambda_v.to_string()),
            ("lambda_a", self.lambda_a.to_string()),
            ("smoothing", self.smoothing.to_string()),
            ("tied", self.tied.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<V> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks a valid {k}")))
        }
        Ok(Self {
            d_model: get(m, "d_model")?,
            n_temporal_layers: get(m, "temporal_layers")?,
            n_part_layers: get(m, "part_layers")?,
            heads: get(m, "heads")?,
            d_ffn: get(m, "d_ffn")?,
            max_len: get(m, "max_len")?,
            lambda_v: get(m, "lambda_v")?,
            lambda_a: get(m, "lambda_a")?,
            smoothing: get(m, "smoothing")?,
            tied: get(m, "tied")?,
        })
    }
}

/// `B` masked windows of equal length `T`, flattened frame-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterpBatch {
    pub batch: usize,
    pub len: usize,
    pub tokens: [Vec<usize>; 4],
    pub frame_types: Vec<FrameType>,
    /// Dense ground truth; [`PAD_ID`] at pads.
    pub targets: [Vec<usize>; 4],
}

impl InterpBatch {
    /// Pads every sequence to the longest one.
    pub fn new(items: &[(MaskedSequence, [Vec<usize>; 4])]) -> Result<Self> {
        let len = items.iter().map(|(m, _)| m.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(invalid("empty interpolation batch"));
        }
        let mut out = Self {
            batch: items.len(),
            len,
            tokens: Default::default(),
            frame_types: Vec::new(),
            targets: Default::default(),
        };
        for (m, target) in items {
            let n = m.len();
            let padded = m.clone().padded(len)?;
            for p in 0..4 {
                if target[p].len() != n {
                    return Err(invalid(format!("part {p} target length {} != {n}", target[p].len())));
                }
                out.tokens[p].extend_from_slice(&padded.tokens[p]);
                out.targets[p].extend_from_slice(&target[p]);
                out.targets[p].resize(out.targets[p].len() + len - n, PAD_ID);
            }
            out.frame_types.extend_from_slice(&padded.frame_types);
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn valid(&self) -> Vec<bool> {
        self.frame_types.iter().map(|&f| f != FrameType::Pad).collect()
    }

    pub fn masked(&self) -> Vec<bool> {
        self.frame_types.iter().map(|&f| f == FrameType::Masked).collect()
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    attn: AttnProj,
    ln2: Norm,
    ffn: Ffn,
}

impl Block {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &InterpConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), cfg.d_model),
            attn: AttnProj::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng),
            ln2: Norm::new(store, &format!("{name}.ln2"), cfg.d_model),
            ffn: Ffn::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ffn, rng),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, groups: usize, keep: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let q = self.attn.q.forward(tape, h)?;
        let k = self.attn.k.forward(tape, h)?;
        let v = self.attn.v.forward(tape, h)?;
        let a = attend(tape, q, k, v, groups, self.attn.heads, None, keep)?;
        let o = self.attn.o.forward(tape, a.out)?;
        let x = tape.add(x, o)?;
        let h = self.ln2.forward(tape, x)?;
        let f = self.ffn.forward(tape, h)?;
        Ok(tape.add(x, f)?)
    }
}

#[derive(Clone, Debug)]
pub struct InterpNet<T: Scalar> {
    pub cfg: InterpConfig,
    pub store: ParamStore<T>,
    /// Per-part `[258, d]` token tables (all equal ids when tied).
    pub tables: [ParamId; 4],
    frame_type: ParamId,
    part_id: ParamId,
    position: ParamId,
    mix: [ParamId; 4],
    temporal: Vec<Block>,
    part_blocks: Vec<Block>,
    out_ln: Norm,
    heads: [Linear; 4],
}

/// The three terms of the interpolation objective.
pub struct InterpLoss {
    pub total: Var,
    pub ce: Var,
    pub vel: Var,
    pub acc: Var,
    pub masked_count: usize,
}

impl<T: Scalar> InterpNet<T> {
    pub fn new(cfg: InterpConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let n_tables = if cfg.tied { 1 } else { 4 };
        let tbl: Vec<ParamId> = (0..n_tables)
            .map(|p| store.add(format!("table{p}"), init_tensor(&mut rng, &[PART_CODEBOOK + 2, d], 1.0)))
            .collect();
        let tables = std::array::from_fn(|p| tbl[p % n_tables]);
        let frame_type = store.add("frame_type", init_tensor(&mut rng, &[3, d], 1.0));
        let part_id = store.add("part_id", init_tensor(&mut rng, &[4, d], 1.0));
        let position = store.add("position", init_tensor(&mut rng, &[cfg.max_len, d], 0.5));
        let mixes: Vec<ParamId> = (0..n_tables)
            .map(|p| store.add(format!("mix{p}"), init_tensor(&mut rng, &[d, d], 0.5 / (d as f64).sqrt())))
            .collect();
        let mix = std::array::from_fn(|p| mixes[p % n_tables]);
        let temporal = (0..cfg.n_temporal_layers)
            .map(|l| Block::new(&mut store, &format!("temporal.{l}"), &cfg, &mut rng))
            .collect();
        let part_blocks = (0..cfg.n_part_layers)
            .map(|l| Block::new(&mut store, &format!("part.{l}"), &cfg, &mut rng))
            .collect();
        let out_ln = Norm::new(&mut store, "out.ln", d);
        let hs: Vec<Linear> = (0..n_tables)
            .map(|p| Linear::new(&mut store, &format!("head{p}"), d, PART_CODEBOOK, true, &mut rng))
            .collect();
        let heads = std::array::from_fn(|p| hs[p % n_tables].clone());
        Ok(Self {
            cfg,
            store,
            tables,
            frame_type,
            part_id,
            position,
            mix,
            temporal,
            part_blocks,
            out_ln,
            heads,
        })
    }

    /// Logits `[B*T, 256]` per part. `part_ids[p]` picks the identity tag
    /// of slot `p`; the identity is `[0, 1, 2, 3]`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, batch: &InterpBatch, part_ids: [usize; 4]) -> Result<[Var; 4]> {
        if batch.len > self.cfg.max_len {
            return Err(Error::OutOfRange(format!(
                "window of {} frames exceeds limit {}",
                batch.len, self.cfg.max_len
            )));
        }
        let n = batch.rows();
        let ft: Vec<usize> = batch.frame_types.iter().map(|&f| f as usize).collect();
        let ft_table = tape.param(self.frame_type);
        let ft_emb = tape.index_rows(ft_table, &ft)?;
        let mut u = Vec::with_capacity(4);
        let mut agg: Option<Var> = None;
        for p in 0..4 {
            let table = tape.param(self.tables[p]);
            let e = tape.index_rows(table, &batch.tokens[p])?;
            let e = tape.add(e, ft_emb)?;
            let w = tape.param(self.mix[p]);
            let m = tape.matmul(e, w)?;
            agg = Some(match agg {
                None => m,
                Some(a) => tape.add(a, m)?,
            });
            u.push(e);
        }
        let pos: Vec<usize> = (0..n).map(|i| i % batch.len).collect();
        let pos_table = tape.param(self.position);
        let pos_emb = tape.index_rows(pos_table, &pos)?;
        let mut h = tape.add(agg.expect("four parts"), pos_emb)?;

        let valid = batch.valid();
        let t = batch.len;
        let keep: Vec<bool> = (0..batch.batch * t * t)
            .map(|i| {
                let b = i / (t * t);
                valid[b * t + i % t]
            })
            .collect();
        for block in &self.temporal {
            h = block.forward(tape, h, batch.batch, Some(&keep))?;
        }

        let pid_table = tape.param(self.part_id);
        let mut slots = Vec::with_capacity(4);
        for p in 0..4 {
            let s = tape.add(h, u[p])?;
            let tag = tape.index_rows(pid_table, &vec![part_ids[p]; n])?;
            slots.push(tape.add(s, tag)?);
        }
        let d = self.cfg.d_model;
        let s = tape.concat_rows(&slots)?;
        let s = tape.reshape(s, &[4, n, d])?;
        let s = tape.permute01(s)?;
        let mut s = tape.reshape(s, &[n * 4, d])?;
        for block in &self.part_blocks {
            s = block.forward(tape, s, n, None)?;
        }
        let s = self.out_ln.forward(tape, s)?;
        let s = tape.reshape(s, &[n, 4, d])?;
        let s = tape.permute01(s)?;
        let s = tape.reshape(s, &[4 * n, d])?;
        let mut out = [s; 4];
        for p in 0..4 {
            let rows = tape.slice_rows(s, p * n..(p + 1) * n)?;
            out[p] = self.heads[p].forward(tape, rows)?;
        }
        Ok(out)
    }

    /// Smoothed cross-entropy summed over masked frames, divided by the
    /// number of windows.
    pub fn loss_ce(&self, tape: &mut Tape<'_, T>, logits: &[Var; 4], batch: &InterpBatch) -> Result<(Var, usize)> {
        let masked = batch.masked();
        let mut total: Option<Var> = None;
        let mut count = 0;
        for p in 0..4 {
            let targets: Vec<usize> = batch.targets[p]
                .iter()
                .zip(&masked)
                .map(|(&t, &m)| if m { t } else { 0 })
                .collect();
            let (l, stats) = tape.cross_entropy(
                logits[p],
                &targets,
                &masked,
                T::of(self.cfg.smoothing),
                CeReduction::Sum,
            )?;
            count += stats.count;
            total = Some(match total {
                None => l,
                Some(a) => tape.add(a, l)?,
            });
        }
        let ce = tape.scale(total.expect("four parts"), T::of(1.0 / batch.batch as f64))?;
        Ok((ce, count))
    }

    /// Velocity and acceleration penalties on the embeddings of the
    /// (detached) argmax tokens. Differences never cross a pad or a window
    /// boundary.
    pub fn loss_smooth(&self, tape: &mut Tape<'_, T>, logits: &[Var; 4], batch: &InterpBatch) -> Result<(Var, Var)> {
        let valid = batch.valid();
        let t = batch.len;
        let ok = |i: usize, back: usize| i % t >= back && (0..=back).all(|k| valid[i - k]);
        let pairs: Vec<usize> = (0..batch.rows()).filter(|&i| ok(i, 1)).collect();
        let triples: Vec<usize> = (0..batch.rows()).filter(|&i| ok(i, 2)).collect();
        let d = self.cfg.d_model as f64;
        let mut vel: Option<Var> = None;
        let mut acc: Option<Var> = None;
        let add = |tape: &mut Tape<'_, T>, acc: Option<Var>, v: Var| -> Result<Option<Var>> {
            Ok(Some(match acc {
                None => v,
                Some(a) => tape.add(a, v)?,
            }))
        };
        for p in 0..4 {
            let ids: Vec<usize> = tape.value(logits[p]).data().chunks(PART_CODEBOOK).map(argmax).collect();
            let table = tape.param(self.tables[p]);
            let e = tape.index_rows(table, &ids)?;
            let v = if pairs.is_empty() {
                tape.constant(Tensor::scalar(T::zero()))
            } else {
                let a = tape.index_rows(e, &pairs)?;
                let prev: Vec<usize> = pairs.iter().map(|i| i - 1).collect();
                let b = tape.index_rows(e, &prev)?;
                let diff = tape.sub(a, b)?;
                let sq = tape.mul(diff, diff)?;
                let s = tape.sum(sq)?;
                tape.scale(s, T::of(1.0 / (pairs.len() as f64 * d * 4.0)))?
            };
            vel = add(tape, vel, v)?;
            let a2 = if triples.is_empty() {
                tape.constant(Tensor::scalar(T::zero()))
            } else {
                let a = tape.index_rows(e, &triples)?;
                let i1: Vec<usize> = triples.iter().map(|i| i - 1).collect();
                let i2: Vec<usize> = triples.iter().map(|i| i - 2).collect();
                let b = tape.index_rows(e, &i1)?;
                let c = tape.index_rows(e, &i2)?;
                let ab = tape.sub(a, b)?;
                let bc = tape.sub(b, c)?;
                let diff = tape.sub(ab, bc)?;
                let sq = tape.mul(diff, diff)?;
                let s = tape.sum(sq)?;
                tape.scale(s, T::of(1.0 / (triples.len() as f64 * d * 4.0)))?
            };
            acc = add(tape, acc, a2)?;
        }
        Ok((vel.expect("four parts"), acc.expect("four parts")))
    }

    pub fn loss_interp(&self, tape: &mut Tape<'_, T>, batch: &InterpBatch) -> Result<InterpLoss> {
        let logits = self.forward(tape, batch, [0, 1, 2, 3])?;
        let (ce, masked_count) = self.loss_ce(tape, &logits, batch)?;
        let (vel, acc) = self.loss_smooth(tape, &logits, batch)?;
        let wv = tape.scale(vel, T::of(self.cfg.lambda_v))?;
        let wa = tape.scale(acc, T::of(self.cfg.lambda_a))?;
        let total = tape.add(ce, wv)?;
        let total = tape.add(total, wa)?;
        Ok(InterpLoss {
            total,
            ce,
            vel,
            acc,
            masked_count,
        })
    }

    /// Fills the masked frames of one sequence.
    pub fn infill(&self, masked: &MaskedSequence) -> Result<[Vec<(usize, usize)>; 4]> {
        let targets = std::array::from_fn(|p| masked.tokens[p].iter().map(|&t| if t == MASK_ID { 0 } else { t }).collect());
        let batch = InterpBatch::new(&[(masked.clone(), targets)])?;
        let mut tape = Tape::new(&self.store);
        let logits = self.forward(&mut tape, &batch, [0, 1, 2, 3])?;
        let rows: [Tensor<T>; 4] = std::array::from_fn(|p| tape.value(logits[p]).clone());
        Ok(predict_masked(&rows, masked))
    }

    pub fn table_values(&self) -> [Tensor<T>; 4] {
        std::array::from_fn(|p| self.store.value(self.tables[p]).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.meta = self.cfg.to_meta();
        ck.meta.insert("kind".into(), "interp".into());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.meta.get("kind").map(|s| s.as_str()) != Some("interp") {
            return Err(Error::Config("checkpoint does not hold an interpolation network".into()));
        }
        let mut net = Self::new(InterpConfig::from_meta(&ck.meta)?, 0)?;
        ck.load_into(&mut net.store, "__")?;
        Ok(net)
    }
}

/// Argmax over the base codebook at every masked frame; ties go low.
pub fn predict_masked<T: Scalar>(logits: &[Tensor<T>; 4], masked: &MaskedSequence) -> [Vec<(usize, usize)>; 4] {
    let pos = masked.masked_positions();
    std::array::from_fn(|p| {
        let w = logits[p].last_dim();
        pos.iter()
            .map(|&i| {
                let row = &logits[p].data()[i * w..(i + 1) * w];
                (i, argmax(&row[..PART_CODEBOOK.min(w)]))
            })
            .collect()
    })
}

fn nearest<T: Scalar>(table: &Tensor<T>, e: &[f64]) -> usize {
    let d = table.last_dim();
    let mut best = (0, f64::INFINITY);
    for id in 0..PART_CODEBOOK {
        let row = &table.data()[id * d..(id + 1) * d];
        let dist: f64 = row.iter().zip(e).map(|(r, x)| (r.as_f64() - x).powi(2)).sum();
        if dist < best.1 {
            best = (id, dist);
        }
    }
    best.0
}

/// Blends the flanking anchor embeddings linearly and snaps to the nearest
/// base id. With one flanking anchor the nearest anchor's id is used.
pub fn linear_interp_baseline<T: Scalar>(masked: &MaskedSequence, tables: &[Tensor<T>; 4]) -> [Vec<(usize, usize)>; 4] {
    let anchors = masked.positions(FrameType::Anchor);
    let pos = masked.masked_positions();
    std::array::from_fn(|p| {
        let d = tables[p].last_dim();
        let emb = |id: usize| -> Vec<f64> { tables[p].data()[id * d..(id + 1) * d].iter().map(|v| v.as_f64()).collect() };
        pos.iter()
            .map(|&t| {
                let left = anchors.iter().rev().find(|&&a| a < t).copied();
                let right = anchors.iter().find(|&&a| a > t).copied();
                let id = match (left, right) {
                    (Some(a), Some(b)) => {
                        let alpha = (t - a) as f64 / (b - a) as f64;
                        let (ea, eb) = (emb(masked.tokens[p][a]), emb(masked.tokens[p][b]));
                        let e: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
                        nearest(&tables[p], &e)
                    }
                    (Some(a), None) => masked.tokens[p][a],
                    (None, Some(b)) => masked.tokens[p][b],
                    (None, None) => 0,
                };
                (t, id)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyframe::{mask_sequence, schedule};

    #[test]
    fn predict_ignores_ids_beyond_the_base_codebook() {
        let mut row = vec![0.0f64; 258];
        row[MASK_ID] = 9.0;
        row[17] = 1.0;
        let dense: [Vec<usize>; 4] = std::array::from_fn(|_| vec![1, 2, 3]);
        let m = mask_sequence(&dense, &schedule(3, 2).unwrap()).unwrap();
        let logits: [Tensor<f64>; 4] = std::array::from_fn(|_| Tensor::new(&[3, 258], row.repeat(3)).unwrap());
        assert_eq!(predict_masked(&logits, &m)[0], vec![(1, 17)]);
        let flat: [Tensor<f64>; 4] = std::array::from_fn(|_| Tensor::zeros(&[3, 256]));
        assert_eq!(predict_masked(&flat, &m)[2], vec![(1, 0)]);
    }

    #[test]
    fn baseline_endpoints_and_shared_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tables: [Tensor<f64>; 4] = std::array::from_fn(|_| init_tensor(&mut rng, &[258, 8], 1.0));
        let dense: [Vec<usize>; 4] = [vec![5, 0, 5], vec![9, 0, 9], vec![1, 0, 2], vec![3, 0, 3]];
        let m = mask_sequence(&dense, &schedule(3, 2).unwrap()).unwrap();
        let got = linear_interp_baseline(&m, &tables);
        assert_eq!(got[0], vec![(1, 5)]);
        assert_eq!(got[1], vec![(1, 9)]);
        let single = MaskedSequence {
            tokens: std::array::from_fn(|_| vec![7, MASK_ID]),
            frame_types: vec![FrameType::Anchor, FrameType::Masked],
        };
        assert_eq!(linear_interp_baseline(&single, &tables)[3], vec![(1, 7)]);
    }

    #[test]
    fn config_meta_round_trip() {
        let c = InterpConfig {
            tied: true,
            ..InterpConfig::default()
        };
        assert_eq!(InterpConfig::from_meta(&c.to_meta()).unwrap(), c);
    }
}
