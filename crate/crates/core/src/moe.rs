//! Routed expert feed-forward layers: sparse upcycling, top-k dispatch,
//! the load-balance auxiliary and routing telemetry.

use std::collections::VecDeque;

use kfgen_tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::nn::{init_tensor, Ffn, Linear};

/// Guard on the in-set normalisation denominator.
pub const NORM_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
    pub router_std: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            experts: 4,
            top_k: 1,
            router_std: 0.02,
        }
    }
}

/// Top-k decision for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Picks the `k` most probable experts (ties toward the lower index) and
/// renormalises their probabilities. With `k == 1` the weight is exactly 1.
pub fn route_probs(probs: &[f64], k: usize) -> Routing {
    let k = k.clamp(1, probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let selected: Vec<usize> = order[..k].to_vec();
    let weights = if k == 1 {
        vec![1.0]
    } else {
        let denom = selected.iter().map(|&e| probs[e]).sum::<f64>().max(NORM_FLOOR);
        selected.iter().map(|&e| probs[e] / denom).collect()
    };
    Routing {
        selected,
        weights,
        probs: probs.to_vec(),
    }
}

fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    /// `[d, E]`, no bias.
    pub router: ParamId,
    pub experts: Vec<Ffn>,
    pub k: usize,
    pub d: usize,
}

/// What one forward pass through a [`MoeLayer`] did.
#[derive(Clone, Debug)]
pub struct MoeTrace {
    /// Router probabilities `[n, E]`.
    pub pi: Var,
    /// Dispatch weights `[n, E]`, rows summing to 1. Constant for `k == 1`.
    pub dispatch: Var,
    pub tokens: usize,
    pub top1: Vec<usize>,
    /// Tokens evaluated by each expert.
    pub evaluations: Vec<usize>,
}

fn ffn_tensors<T: Scalar>(store: &ParamStore<T>, dense: &Ffn) -> Vec<Tensor<T>> {
    dense.params().into_iter().map(|id| store.value(id).clone()).collect()
}

impl MoeLayer {
    /// Builds `E` experts as exact copies of `dense` (read from `src`) inside
    /// `dst`, plus a freshly initialised router.
    pub fn upcycle_into<T: Scalar>(
        src: &ParamStore<T>,
        dense: &Ffn,
        dst: &mut ParamStore<T>,
        name: &str,
        cfg: &MoeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.experts < 1 {
            return Err(invalid("an expert layer needs at least one expert"));
        }
        let weights = ffn_tensors(src, dense);
        let d = dense.up.d_in;
        let router = dst.add(format!("{name}.router"), init_tensor(rng, &[d, cfg.experts], cfg.router_std));
        let experts = (0..cfg.experts)
            .map(|e| {
                let mut it = weights.iter().cloned();
                let mut lin = |suffix: &str, l: &Linear| Linear {
                    w: dst.add(format!("{name}.e{e}.{suffix}.w"), it.next().expect("weight")),
                    b: l.b.map(|_| dst.add(format!("{name}.e{e}.{suffix}.b"), it.next().expect("bias"))),
                    d_in: l.d_in,
                    d_out: l.d_out,
                };
                let up = lin("up", &dense.up);
                let down = lin("down", &dense.down);
                Ffn { up, down }
            })
            .collect();
        Ok(Self {
            router,
            experts,
            k: cfg.top_k.clamp(1, cfg.experts),
            d,
        })
    }

    /// Same-store upcycling with a seeded router.
    pub fn upcycle<T: Scalar>(
        store: &mut ParamStore<T>,
        dense: &Ffn,
        name: &str,
        cfg: &MoeConfig,
        seed: u64,
    ) -> Result<Self> {
        let snapshot = store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::upcycle_into(&snapshot, dense, store, name, cfg, &mut rng)
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Routing decision for one hidden vector.
    pub fn route<T: Scalar>(&self, store: &ParamStore<T>, h: &[T]) -> Routing {
        let w = store.value(self.router);
        let e = self.n_experts();
        let z: Vec<f64> = (0..e)
            .map(|j| h.iter().enumerate().map(|(i, &x)| x.as_f64() * w.data()[i * e + j].as_f64()).sum())
            .collect();
        route_probs(&softmax_f64(&z), self.k)
    }

    /// `x` is `[n, d]`. Only the selected experts run on each token.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<(Var, MoeTrace)> {
        let n = tape.shape(x)[0];
        let e = self.n_experts();
        let router = tape.param(self.router);
        let logits = tape.matmul(x, router)?;
        let pi = tape.softmax(logits, None)?;
        let probs: Vec<f64> = tape.value(pi).data().iter().map(|v| v.as_f64()).collect();
        let routes: Vec<Routing> = probs.chunks(e).map(|row| route_probs(row, self.k)).collect();

        let dispatch = if self.k == 1 {
            let mut one_hot = vec![T::zero(); n * e];
            for (t, r) in routes.iter().enumerate() {
                one_hot[t * e + r.selected[0]] = T::one();
            }
            tape.constant(Tensor::new(&[n, e], one_hot)?)
        } else {
            let mut sel = vec![T::zero(); n * e];
            for (t, r) in routes.iter().enumerate() {
                for &j in &r.selected {
                    sel[t * e + j] = T::one();
                }
            }
            let sel = tape.constant(Tensor::new(&[n, e], sel)?);
            let masked = tape.mul(pi, sel)?;
            tape.row_normalize(masked, T::of(NORM_FLOOR))?
        };

        let mut out: Option<Var> = None;
        let mut evaluations = vec![0; e];
        for (j, expert) in self.experts.iter().enumerate() {
            let idx: Vec<usize> = (0..n).filter(|&t| routes[t].selected.contains(&j)).collect();
            if idx.is_empty() {
                continue;
            }
            evaluations[j] = idx.len();
            let xe = tape.index_rows(x, &idx)?;
            let mut ye = expert.forward(tape, xe)?;
            if self.k > 1 {
                let flat: Vec<usize> = idx.iter().map(|&t| t * e + j).collect();
                let w = tape.gather_elems(dispatch, &flat)?;
                ye = tape.row_scale(ye, w)?;
            }
            let full = tape.scatter_rows(ye, &idx, n)?;
            out = Some(match out {
                None => full,
                Some(acc) => tape.add(acc, full)?,
            });
        }
        let out = match out {
            Some(o) => o,
            None => tape.constant(Tensor::zeros(&[n, self.d])),
        };
        let trace = MoeTrace {
            pi,
            dispatch,
            tokens: n,
            top1: routes.iter().map(|r| r.selected[0]).collect(),
            evaluations,
        };
        Ok((out, trace))
    }
}

/// Per-layer routing telemetry kept as sums so that merging is commutative.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerStats {
    pub f_sum: Vec<f64>,
    pub pi_sum: Vec<f64>,
    pub top1_hits: Vec<u64>,
    pub tokens: u64,
    pub evaluations: u64,
}

impl LayerStats {
    pub fn new(experts: usize) -> Self {
        Self {
            f_sum: vec![0.0; experts],
            pi_sum: vec![0.0; experts],
            top1_hits: vec![0; experts],
            tokens: 0,
            evaluations: 0,
        }
    }

    pub fn record<T: Scalar>(&mut self, tape: &Tape<'_, T>, trace: &MoeTrace) {
        let e = self.f_sum.len();
        for (t, row) in tape.value(trace.dispatch).data().chunks(e).enumerate() {
            for j in 0..e {
                self.f_sum[j] += row[j].as_f64();
                self.pi_sum[j] += tape.value(trace.pi).data()[t * e + j].as_f64();
            }
        }
        for &j in &trace.top1 {
            self.top1_hits[j] += 1;
        }
        self.tokens += trace.tokens as u64;
        self.evaluations += trace.evaluations.iter().sum::<usize>() as u64;
    }

    pub fn merge(&mut self, other: &LayerStats) {
        for j in 0..self.f_sum.len() {
            self.f_sum[j] += other.f_sum[j];
            self.pi_sum[j] += other.pi_sum[j];
            self.top1_hits[j] += other.top1_hits[j];
        }
        self.tokens += other.tokens;
        self.evaluations += other.evaluations;
    }

    /// Dispatched-weight frequency `f_e`.
    pub fn f(&self) -> Vec<f64> {
        let n = self.tokens.max(1) as f64;
        self.f_sum.iter().map(|v| v / n).collect()
    }

    /// Mean router probability `π̄_e`.
    pub fn pi_bar(&self) -> Vec<f64> {
        let n = self.tokens.max(1) as f64;
        self.pi_sum.iter().map(|v| v / n).collect()
    }

    pub fn top1_share(&self) -> Vec<f64> {
        let n = self.tokens.max(1) as f64;
        self.top1_hits.iter().map(|&h| h as f64 / n).collect()
    }
}

/// `E * Σ_e f_e π̄_e`.
pub fn balance_value(f: &[f64], pi_bar: &[f64]) -> f64 {
    f.len() as f64 * f.iter().zip(pi_bar).map(|(a, b)| a * b).sum::<f64>()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RoutingStats {
    pub layers: Vec<LayerStats>,
}

/// Result of [`load_balance_loss`]; `empty` is set when no tokens were seen.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceLoss {
    pub value: f64,
    pub per_layer: Vec<f64>,
    pub empty: bool,
}

impl RoutingStats {
    pub fn new(n_layers: usize, experts: usize) -> Self {
        Self {
            layers: (0..n_layers).map(|_| LayerStats::new(experts)).collect(),
        }
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        if self.layers.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.merge(b);
        }
    }
}

/// Load-balance value per layer and its mean over layers.
pub fn load_balance_loss(stats: &RoutingStats) -> BalanceLoss {
    let live: Vec<&LayerStats> = stats.layers.iter().filter(|l| l.tokens > 0).collect();
    if live.is_empty() {
        return BalanceLoss {
            value: 0.0,
            per_layer: vec![0.0; stats.layers.len()],
            empty: true,
        };
    }
    let per_layer: Vec<f64> = stats
        .layers
        .iter()
        .map(|l| if l.tokens > 0 { balance_value(&l.f(), &l.pi_bar()) } else { 0.0 })
        .collect();
    let value = per_layer.iter().sum::<f64>() / live.len() as f64;
    BalanceLoss {
        value,
        per_layer,
        empty: false,
    }
}

/// Differentiable load balance for one layer over traces from a batch.
pub fn balance_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, traces: &[&MoeTrace]) -> Result<Option<Var>> {
    let traces: Vec<&&MoeTrace> = traces.iter().filter(|t| t.tokens > 0).collect();
    if traces.is_empty() {
        return Ok(None);
    }
    let e = tape.shape(traces[0].pi)[1];
    let pis: Vec<Var> = traces.iter().map(|t| t.pi).collect();
    let ds: Vec<Var> = traces.iter().map(|t| t.dispatch).collect();
    let pi = if pis.len() == 1 { pis[0] } else { tape.concat_rows(&pis)? };
    let d = if ds.len() == 1 { ds[0] } else { tape.concat_rows(&ds)? };
    let pi_bar = tape.mean_rows(pi)?;
    let f = tape.mean_rows(d)?;
    let prod = tape.mul(f, pi_bar)?;
    let s = tape.sum(prod)?;
    Ok(Some(tape.scale(s, T::of(e as f64))?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollapseFlag {
    pub layer: usize,
    pub expert: usize,
    pub share: f64,
}

/// Flags layers whose busiest expert took more than `threshold` of the
/// top-1 hits over the last `window` batches.
#[derive(Clone, Debug)]
pub struct CollapseMonitor {
    pub threshold: f64,
    pub window: usize,
    history: VecDeque<RoutingStats>,
}

impl CollapseMonitor {
    pub fn new(threshold: f64, window: usize) -> Self {
        Self {
            threshold,
            window: window.max(1),
            history: VecDeque::new(),
        }
    }

    pub fn push(&mut self, stats: RoutingStats) -> Vec<CollapseFlag> {
        self.history.push_back(stats);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        let mut total = RoutingStats::default();
        for s in &self.history {
            total.merge(s);
        }
        total
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.tokens > 0)
            .filter_map(|(i, l)| {
                let (expert, &hits) = l.top1_hits.iter().enumerate().max_by_key(|(j, &h)| (h, std::cmp::Reverse(*j)))?;
                let share = hits as f64 / l.tokens as f64;
                (share > self.threshold).then_some(CollapseFlag { layer: i, expert, share })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_examples() {
        let r = route_probs(&[0.1, 0.6, 0.2, 0.1], 1);
        assert_eq!((r.selected.clone(), r.weights.clone()), (vec![1], vec![1.0]));
        let r = route_probs(&[0.25; 4], 2);
        assert_eq!((r.selected.clone(), r.weights.clone()), (vec![0, 1], vec![0.5, 0.5]));
        let p = [0.1, 0.2, 0.3, 0.4];
        let r = route_probs(&p, 4);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for (&e, &w) in r.selected.iter().zip(&r.weights) {
            assert!((w - p[e]).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_stats_are_flagged() {
        let l = load_balance_loss(&RoutingStats::new(2, 4));
        assert!(l.empty);
        assert_eq!(l.value, 0.0);
    }

    fn stats_with_hits(hits: Vec<u64>) -> RoutingStats {
        let mut l = LayerStats::new(hits.len());
        l.tokens = hits.iter().sum();
        l.top1_hits = hits;
        RoutingStats { layers: vec![l] }
    }

    #[test]
    fn collapse_examples() {
        let mut m = CollapseMonitor::new(0.9, 3);
        assert!(m.push(stats_with_hits(vec![5, 5, 5, 5])).is_empty());
        let mut c = CollapseMonitor::new(0.9, 1);
        let flags = c.push(stats_with_hits(vec![0, 20, 0, 0]));
        assert_eq!(flags, vec![CollapseFlag { layer: 0, expert: 1, share: 1.0 }]);
        let mut never = CollapseMonitor::new(1.0, 1);
        assert!(never.push(stats_with_hits(vec![0, 20, 0, 0])).is_empty());
        // the window dilutes one collapsed batch
        let mut w = CollapseMonitor::new(0.9, 2);
        w.push(stats_with_hits(vec![5, 5, 5, 5]));
        assert!(w.push(stats_with_hits(vec![0, 20, 0, 0])).is_empty());
    }
}
