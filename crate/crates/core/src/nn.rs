//! Parameterised layers shared by the backbone and the interpolation network.
//! Layers hold only [`ParamId`]s; values live in the model's [`ParamStore`].

use kfgen_tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Zero-mean uniform values with standard deviation `std`.
pub fn init_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let a = std * 3f64.sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if a == 0.0 { T::zero() } else { T::of(rng.gen_range(-a..a)) })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt()));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)?
            }
            None => y,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            g: store.add(format!("{name}.g"), Tensor::ones(&[d])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.g), tape.param(self.b));
        Ok(tape.layer_norm(x, g, b, T::of(LN_EPS))?)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, d_ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, d_ffn, true, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ffn, d, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.up.params();
        p.extend(self.down.params());
        p
    }
}

/// Query/key/value/output projections for multi-head attention.
#[derive(Clone, Debug)]
pub struct AttnProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttnProj {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, false, rng),
            heads,
        }
    }
}

/// Output of [`attend`]; `weights[h]` is `[B, Sq, Sk]`.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Grouped multi-head attention. `q` is `[B*Sq, d]`, `k` and `v` are
/// `[B*Sk, d]`; attention stays inside each of the `B` groups. `bias[h]`
/// (shape `[1, Sq, Sk]`, only with `B == 1`) is added to the scaled scores.
/// `keep` (length `Sq*Sk`) drops key positions per query, shared by groups.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    heads: usize,
    bias: Option<&[Var]>,
    keep: Option<&[bool]>,
) -> Result<Attended> {
    let d = tape.shape(q)[1];
    let sq = tape.shape(q)[0] / groups;
    let sk = tape.shape(k)[0] / groups;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = tape.slice_cols(q, cols.clone())?;
        let qh = tape.reshape(qh, &[groups, sq, dh])?;
        let kh = tape.slice_cols(k, cols.clone())?;
        let kh = tape.reshape(kh, &[groups, sk, dh])?;
        let vh = tape.slice_cols(v, cols)?;
        let vh = tape.reshape(vh, &[groups, sk, dh])?;
        let s = tape.bmm(qh, kh, true)?;
        let mut s = tape.scale(s, scale)?;
        if let Some(b) = bias {
            s = tape.add(s, b[h])?;
        }
        let a = tape.softmax(s, keep)?;
        let o = tape.bmm(a, vh, false)?;
        outs.push(tape.reshape(o, &[groups * sq, dh])?);
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(Attended { out, weights })
}

/// Learned per-offset attention bias, clipped at `±max_rel`.
#[derive(Clone, Debug)]
pub struct RelBias {
    pub table: ParamId,
    pub heads: usize,
    pub max_rel: usize,
}

impl RelBias {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, heads: usize, max_rel: usize) -> Self {
        Self {
            table: store.add(name.to_string(), Tensor::zeros(&[heads, 2 * max_rel + 1])),
            heads,
            max_rel,
        }
    }

    fn bucket(&self, q: usize, k: usize) -> usize {
        let m = self.max_rel as i64;
        ((k as i64 - q as i64).clamp(-m, m) + m) as usize
    }

    /// Per-head `[1, Sq, Sk]` bias for the given absolute positions.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, q_pos: &[usize], k_pos: &[usize]) -> Result<Vec<Var>> {
        let table = tape.param(self.table);
        let width = 2 * self.max_rel + 1;
        (0..self.heads)
            .map(|h| {
                let flat: Vec<usize> = q_pos
                    .iter()
                    .flat_map(|&qp| k_pos.iter().map(move |&kp| (qp, kp)))
                    .map(|(qp, kp)| h * width + self.bucket(qp, kp))
                    .collect();
                let g = tape.gather_elems(table, &flat)?;
                Ok(tape.reshape(g, &[1, q_pos.len(), k_pos.len()])?)
            })
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
