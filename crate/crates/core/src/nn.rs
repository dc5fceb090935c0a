//! Layers built on the autodiff tape.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::math;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::{normal_vec, Rng};
use crate::tensor::Tensor;

/// Large negative finite value standing in for `-inf` in additive masks.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let std = 1.0 / math::sqrt(in_dim as f64);
        Self::with_std(store, rng, name, group, in_dim, out_dim, bias, std)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = Tensor::from_vec(&[in_dim, out_dim], normal_vec(rng, in_dim * out_dim, std));
        let weight = store.add(format!("{name}.weight"), group, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    /// A linear layer whose weight (and bias) start at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, group: ParamGroup, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Tensor::zeros(&[in_dim, out_dim]));
        let bias = Some(store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.weight);
        let y = t.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row layer normalization with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), group, Tensor::full(&[dim], 1.0));
        let shift = store.add(format!("{name}.shift"), group, Tensor::zeros(&[dim]));
        Self { gain, shift, eps: 1e-5 }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.layer_norm(x, self.eps);
        let g = t.param(self.gain);
        let s = t.param(self.shift);
        let y = t.mul_row(n, g);
        t.add_row(y, s)
    }
}

/// Two-layer residual bottleneck MLP: `x + up(gelu(down(x)))`, with `up`
/// zero-initialized so a fresh adapter is the identity.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, group: ParamGroup, dim: usize, ratio: usize) -> Self {
        let hidden = (dim / ratio.max(1)).max(1);
        let down = Linear::new(store, rng, &format!("{name}.down"), group, dim, hidden, true);
        let up = Linear::zeros(store, &format!("{name}.up"), group, hidden, dim);
        Self { down, up }
    }

    pub fn hidden(&self) -> usize {
        self.down.out_dim
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.down.forward(t, x);
        let h = t.gelu(h);
        let h = self.up.forward(t, h);
        t.add(x, h)
    }
}

/// Additive attention mask.
#[derive(Clone, Copy, Debug)]
pub enum AttnMask<'a> {
    None,
    /// One entry per key, shared by every query (key padding mask).
    Keys(&'a [f64]),
    /// Full `[queries, keys]` matrix.
    Full(&'a Tensor),
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per query: scaled pre-softmax logits averaged over heads and real keys.
    pub pooled_logits: Vec<f64>,
    /// Head-averaged attention weights over the real keys, `[queries, keys]`.
    pub weights: Tensor,
}

/// Multi-head scaled dot-product attention. Keys carry no bias, so adding a
/// constant to every key never changes the output.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
    /// Appends an all-zero key/value slot that every query can attend to.
    pub zero_attn: bool,
}

pub struct MhaSpec<'a> {
    pub name: &'a str,
    pub group: ParamGroup,
    pub query_dim: usize,
    pub kv_dim: usize,
    pub dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub zero_attn: bool,
    pub zero_out: bool,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, spec: &MhaSpec) -> Self {
        assert!(spec.heads > 0 && spec.dim.is_multiple_of(spec.heads), "attention width must split across heads");
        let name = spec.name;
        let q = Linear::new(store, rng, &format!("{name}.q"), spec.group, spec.query_dim, spec.dim, true);
        let k = Linear::new(store, rng, &format!("{name}.k"), spec.group, spec.kv_dim, spec.dim, false);
        let v = Linear::new(store, rng, &format!("{name}.v"), spec.group, spec.kv_dim, spec.dim, true);
        let o = if spec.zero_out {
            Linear::zeros(store, &format!("{name}.o"), spec.group, spec.dim, spec.out_dim)
        } else {
            Linear::new(store, rng, &format!("{name}.o"), spec.group, spec.dim, spec.out_dim, true)
        };
        Self { q, k, v, o, heads: spec.heads, dim: spec.dim, zero_attn: spec.zero_attn }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, t: &mut Tape, query: Var, kv: Var, mask: AttnMask) -> AttentionOutput {
        let qp = self.q.forward(t, query);
        let kp = self.k.forward(t, kv);
        let vp = self.v.forward(t, kv);
        self.attend(t, qp, kp, vp, mask)
    }

    /// Attention over already-projected queries, keys and values.
    pub fn attend(&self, t: &mut Tape, qp: Var, kp: Var, vp: Var, mask: AttnMask) -> AttentionOutput {
        let nq = t.value(qp).rows();
        let nk = t.value(kp).rows();
        let hd = self.head_dim();
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut pooled = vec![0.0; nq];
        let mut weights = Tensor::zeros(&[nq, nk]);
        let mut head_outs = Vec::with_capacity(self.heads);
        let slots = nk + usize::from(self.zero_attn);
        let mask_t: Option<Var> = match mask {
            AttnMask::None => None,
            AttnMask::Keys(m) => {
                assert_eq!(m.len(), nk, "key mask length must match key count");
                let mut row = m.to_vec();
                if self.zero_attn {
                    row.push(0.0);
                }
                Some(t.constant(Tensor::from_vec(&[slots], row)))
            }
            AttnMask::Full(m) => {
                assert_eq!(m.shape(), [nq, nk], "attention mask shape");
                let mut data = Vec::with_capacity(nq * slots);
                for r in 0..nq {
                    data.extend_from_slice(m.row(r));
                    if self.zero_attn {
                        data.push(0.0);
                    }
                }
                Some(t.constant(Tensor::from_vec(&[nq, slots], data)))
            }
        };
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (t.slice_cols(qp, h * hd, hd), t.slice_cols(kp, h * hd, hd), t.slice_cols(vp, h * hd, hd))
            };
            let raw = t.matmul_t(qh, kh, false, true);
            let mut logits = t.scale(raw, scale);
            {
                let lv = t.value(logits);
                for (r, p) in pooled.iter_mut().enumerate() {
                    if nk > 0 {
                        *p += lv.row(r).iter().sum::<f64>() / (nk as f64 * self.heads as f64);
                    }
                }
            }
            let mut values = vh;
            if self.zero_attn {
                let z = t.constant(Tensor::zeros(&[nq, 1]));
                logits = t.concat_cols(&[logits, z]);
                let zv = t.constant(Tensor::zeros(&[1, hd]));
                values = t.concat_rows(&[vh, zv]);
            }
            if let Some(m) = mask_t {
                logits = match mask {
                    AttnMask::Keys(_) => t.add_row(logits, m),
                    _ => t.add(logits, m),
                };
            }
            let a = t.softmax(logits);
            {
                let av = t.value(a);
                for r in 0..nq {
                    for c in 0..nk {
                        weights.data_mut()[r * nk + c] += av.row(r)[c] / self.heads as f64;
                    }
                }
            }
            head_outs.push(t.matmul(a, values));
        }
        let cat = if head_outs.len() == 1 { head_outs[0] } else { t.concat_cols(&head_outs) };
        let out = self.o.forward(t, cat);
        AttentionOutput { out, pooled_logits: pooled, weights }
    }
}

/// `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, group: ParamGroup, dims: (usize, usize, usize)) -> Self {
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), group, dims.0, dims.1, true);
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), group, dims.1, dims.2, true);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.fc1.forward(t, x);
        let h = t.gelu(h);
        self.fc2.forward(t, h)
    }
}

/// Dotted parameter name helper.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}
