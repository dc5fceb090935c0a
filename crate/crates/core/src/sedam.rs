//! Semantics-driven audio modeling: text cues attend over latent audio
//! features, and the attention logits decide which cues stay active.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{AttnMask, LayerNorm, Linear, MhaSpec, MultiHeadAttention, MASK_NEG};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SedamConfig {
    /// Number of latent audio features.
    pub n_l: usize,
    /// Width of each latent audio feature.
    pub d_al: usize,
    pub heads: usize,
    /// Stacked attend-and-combine layers (unshared parameters).
    pub layers: usize,
    /// Cosine-similarity stabilizer in the contrastive loss.
    pub eps: f64,
    /// Adds an all-zero key/value slot to each attention so the pooled logit
    /// is measured against a fixed zero reference.
    pub zero_attn: bool,
}

impl Default for SedamConfig {
    fn default() -> Self {
        Self { n_l: 8, d_al: 64, heads: 8, layers: 4, eps: 1e-8, zero_attn: true }
    }
}

/// Mechanism switches used by ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SedamSwitches {
    /// Zeroes the text features and opens every slot.
    pub text: bool,
    pub dynamic_mask: bool,
    /// When off, the projected audio row is passed on directly.
    pub sedam: bool,
}

impl Default for SedamSwitches {
    fn default() -> Self {
        Self { text: true, dynamic_mask: true, sedam: true }
    }
}

#[derive(Clone, Debug)]
pub struct SedamLayer {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub fc: Linear,
}

/// Output of the cross-modal stack, bound to a tape.
pub struct SoundingObjectFeature {
    /// `[N_T, d_A]`.
    pub values: Var,
    /// 0 for open slots, [`MASK_NEG`] for closed ones.
    pub mask: Vec<f64>,
    /// Pooled attention logits of the final layer.
    pub scores: Vec<f64>,
    /// The latent bank `[N_L, d_AL]`.
    pub bank: Var,
}

impl SoundingObjectFeature {
    pub fn fully_masked(&self) -> bool {
        self.mask.iter().all(|&m| m <= MASK_NEG)
    }
}

#[derive(Clone, Debug)]
pub struct Sedam {
    pub config: SedamConfig,
    pub d_a: usize,
    pub latent: Linear,
    pub text_proj: Linear,
    pub layers: Vec<SedamLayer>,
    /// Audio-to-feature map used when the stack is bypassed.
    pub direct: Linear,
}

impl Sedam {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, config: &SedamConfig, d_a: usize, d_t: usize) -> Result<Self> {
        if config.n_l < 2 {
            return Err(Error::Config("the latent bank needs at least two entries".into()));
        }
        if config.heads == 0 || !d_a.is_multiple_of(config.heads) {
            return Err(Error::Config(format!("{} heads do not divide d_A = {d_a}", config.heads)));
        }
        let g = ParamGroup::Other;
        let latent = Linear::new(store, rng, "sedam.latent", g, d_a, config.n_l * config.d_al, false);
        let text_proj = Linear::new(store, rng, "sedam.text_proj", g, d_t, d_a, true);
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("sedam.layer{l}");
                let attn = MultiHeadAttention::new(
                    store,
                    rng,
                    &MhaSpec {
                        name: &format!("{name}.attn"),
                        group: g,
                        query_dim: d_a,
                        kv_dim: config.d_al,
                        dim: d_a,
                        out_dim: d_a,
                        heads: config.heads,
                        zero_attn: config.zero_attn,
                        zero_out: false,
                    },
                );
                SedamLayer {
                    attn,
                    norm: LayerNorm::new(store, &format!("{name}.norm"), g, d_a),
                    fc: Linear::new(store, rng, &format!("{name}.fc"), g, d_a, d_a, true),
                }
            })
            .collect();
        let direct = Linear::new(store, rng, "sedam.direct", g, d_a, d_a, true);
        Ok(Self { config: config.clone(), d_a, latent, text_proj, layers, direct })
    }

    /// `[d_A]` audio row to the `[N_L, d_AL]` latent bank.
    pub fn project_latents(&self, t: &mut Tape, audio_row: &[f64]) -> Result<Var> {
        if audio_row.len() != self.d_a {
            return Err(Error::Shape(format!("audio row has width {}, expected {}", audio_row.len(), self.d_a)));
        }
        let a = t.constant(Tensor::from_vec(&[1, self.d_a], audio_row.to_vec()));
        let flat = self.latent.forward(t, a);
        Ok(t.reshape(flat, &[self.config.n_l, self.config.d_al]))
    }

    /// One attend step: returns the attended features and the pooled logits.
    pub fn attend(&self, t: &mut Tape, layer: usize, query: Var, bank: Var) -> (Var, Vec<f64>) {
        let out = self.layers[layer].attn.forward(t, query, bank, AttnMask::None);
        (out.out, out.pooled_logits)
    }

    /// `FC(LN(query + attended))`.
    pub fn combine(&self, t: &mut Tape, layer: usize, query: Var, attended: Var) -> Var {
        let l = &self.layers[layer];
        let s = t.add(query, attended);
        let n = l.norm.forward(t, s);
        l.fc.forward(t, n)
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        text: &Tensor,
        valid: &[bool],
        audio_row: &[f64],
        switches: SedamSwitches,
    ) -> Result<SoundingObjectFeature> {
        if text.rows() != valid.len() {
            return Err(Error::Shape("text rows and validity flags differ in length".into()));
        }
        let bank = self.project_latents(t, audio_row)?;
        if !switches.sedam {
            let a = t.constant(Tensor::from_vec(&[1, self.d_a], audio_row.to_vec()));
            let values = self.direct.forward(t, a);
            return Ok(SoundingObjectFeature { values, mask: vec![0.0], scores: vec![0.0], bank });
        }
        let text_v = if switches.text { t.constant(text.clone()) } else { t.constant(Tensor::zeros(text.shape())) };
        let mut query = self.text_proj.forward(t, text_v);
        let mut scores = vec![0.0; valid.len()];
        for l in 0..self.layers.len() {
            let (att, pooled) = self.attend(t, l, query, bank);
            query = self.combine(t, l, query, att);
            scores = pooled;
        }
        let mask = if !switches.text {
            vec![0.0; valid.len()]
        } else if !switches.dynamic_mask {
            valid.iter().map(|&v| if v { 0.0 } else { MASK_NEG }).collect()
        } else {
            dynamic_mask(&scores, valid)?
        };
        Ok(SoundingObjectFeature { values: query, mask, scores, bank })
    }
}

/// Opens slot `i` exactly when `scores[i] > 0` and the slot holds a cue.
pub fn dynamic_mask(scores: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != valid.len() {
        return Err(Error::Shape("scores and validity flags differ in length".into()));
    }
    if scores.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("NaN attention score".into()));
    }
    Ok(scores.iter().zip(valid).map(|(&s, &v)| if v && s > 0.0 { 0.0 } else { MASK_NEG }).collect())
}

/// Contrastive distinctness loss over the bank rows with each row as its own
/// positive: `mean_i logsumexp_j cos(a_i, a_j) - 1`.
pub fn info_nce_loss(t: &mut Tape, bank: Var, eps: f64) -> Var {
    let n = t.row_normalize(bank, eps);
    let sim = t.matmul_t(n, n, false, true);
    let lse = t.log_sum_exp_rows(sim);
    let m = t.mean(lse);
    let one = t.constant(Tensor::scalar(1.0));
    t.sub(m, one)
}
