//! Mask-query prompting: decoder queries read the sounding-object features
//! through masked cross-attention and a residual update.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{AttnMask, MhaSpec, MultiHeadAttention, MASK_NEG};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmqsConfig {
    pub n_q: usize,
    pub heads: usize,
    /// Attention width; 0 means the query width.
    pub dim: usize,
}

impl Default for PmqsConfig {
    fn default() -> Self {
        Self { n_q: 16, heads: 1, dim: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Pmqs {
    pub attn: MultiHeadAttention,
}

pub struct PromptOutput {
    /// `[N_Q, d_V]` prompted queries.
    pub queries: Var,
    /// `[N_Q, N_T]` attention weights; all zero when every slot is closed.
    pub weights: Tensor,
}

impl Pmqs {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, config: &PmqsConfig, d_v: usize, d_a: usize) -> Result<Self> {
        let dim = if config.dim == 0 { d_v } else { config.dim };
        if config.heads == 0 || dim % config.heads != 0 {
            return Err(Error::Config("prompting heads must divide the attention width".into()));
        }
        let attn = MultiHeadAttention::new(
            store,
            rng,
            &MhaSpec {
                name: "pmqs.attn",
                group: ParamGroup::Other,
                query_dim: d_v,
                kv_dim: d_a,
                dim,
                out_dim: d_v,
                heads: config.heads,
                zero_attn: false,
                zero_out: true,
            },
        );
        Ok(Self { attn })
    }

    /// `F_Q + Attn(F_Q, F_AT, F_AT; M)`, or `F_Q` itself when every slot is
    /// closed.
    pub fn prompt(&self, t: &mut Tape, queries: Var, features: Var, mask: &[f64]) -> Result<PromptOutput> {
        let nq = t.value(queries).rows();
        if t.value(features).rows() != mask.len() {
            return Err(Error::Shape("mask length differs from the number of feature rows".into()));
        }
        if !t.value(queries).all_finite() || !t.value(features).all_finite() || mask.iter().any(|m| m.is_nan()) {
            return Err(Error::NonFinite("non-finite input to query prompting".into()));
        }
        if mask.iter().all(|&m| m <= MASK_NEG) {
            return Ok(PromptOutput { queries, weights: Tensor::zeros(&[nq, mask.len()]) });
        }
        let out = self.attn.forward(t, queries, features, AttnMask::Keys(mask));
        let queries = t.add(queries, out.out);
        Ok(PromptOutput { queries, weights: out.weights })
    }

    /// The softmax matrix the prompt step would use.
    pub fn attention_weights(&self, store: &ParamStore, queries: &Tensor, features: &Tensor, mask: &[f64]) -> Result<Tensor> {
        let mut t = Tape::new(store);
        let q = t.constant(queries.clone());
        let f = t.constant(features.clone());
        Ok(self.prompt(&mut t, q, f, mask)?.weights)
    }
}

/// Learned query embeddings `[N_Q, d_V]`.
pub fn query_embeddings(store: &mut ParamStore, rng: &mut Rng, n_q: usize, d_v: usize) -> crate::params::ParamId {
    let data: Vec<f64> = crate::rng::normal_vec(rng, n_q * d_v, 1.0);
    store.add("decoder.queries", ParamGroup::Other, Tensor::from_vec(&[n_q, d_v], data))
}
