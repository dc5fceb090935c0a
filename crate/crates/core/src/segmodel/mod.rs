//! Audio-prompted mask-classification segmenter.
//!
//! Frozen backbone features pass through adapters and an FPN-style pixel
//! decoder. Prompted mask queries are refined by a masked-attention
//! transformer decoder, then turned into per-query mask logits and class
//! logits, which are contracted into per-class masks.

pub mod loss;
pub mod matching;

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{SparseMap, Tape, Var};
use crate::encoders::{EncoderConfig, TextFeature, ToyVisualBackbone, VisualAdapters};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Adapter, AttnMask, LayerNorm, Linear, MhaSpec, Mlp, MultiHeadAttention, MASK_NEG};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::pmqs::{query_embeddings, Pmqs, PmqsConfig};
use crate::rng::{seeded, Rng};
use crate::sedam::{Sedam, SedamConfig, SedamSwitches, SoundingObjectFeature};
use crate::tensor::Tensor;

pub use loss::{LossBreakdown, LossWeights, Target, NO_OBJECT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 3, heads: 4, ffn: 128 }
    }
}

/// Everything needed to build a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image_size: (usize, usize),
    /// Classes including no-object.
    pub n_c: usize,
    pub encoders: EncoderConfig,
    pub sedam: SedamConfig,
    pub pmqs: PmqsConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
}

/// Mechanism switches for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSwitches {
    pub sedam: SedamSwitches,
    pub pmqs: bool,
}

impl Default for ModelSwitches {
    fn default() -> Self {
        Self { sedam: SedamSwitches::default(), pmqs: true }
    }
}

#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub laterals: Vec<Linear>,
    pub out: Linear,
    pub adapter: Adapter,
    /// Nearest-neighbour upsampling index from level `l + 1` to level `l`.
    up: Vec<Rc<Vec<usize>>>,
}

impl PixelDecoder {
    fn new(store: &mut ParamStore, rng: &mut Rng, grids: &[(usize, usize)], dim: usize, ratio: usize) -> Self {
        let g = ParamGroup::Other;
        let laterals = (0..grids.len()).map(|l| Linear::new(store, rng, &format!("pixel_decoder.lateral{l}"), g, dim, dim, true)).collect();
        let out = Linear::new(store, rng, "pixel_decoder.out", g, dim, dim, true);
        let adapter = Adapter::new(store, rng, "adapters.pixel_decoder_out", ParamGroup::Adapter, dim, ratio);
        let up = (0..grids.len().saturating_sub(1))
            .map(|l| {
                let (h, w) = grids[l];
                let (_, cw) = grids[l + 1];
                Rc::new((0..h * w).map(|i| (i / w / 2) * cw + (i % w) / 2).collect())
            })
            .collect();
        Self { laterals, out, adapter, up }
    }

    /// Returns the per-pixel embeddings at the finest level and the fused
    /// levels ordered coarse to fine.
    pub fn forward(&self, t: &mut Tape, levels: &[Var]) -> (Var, Vec<Var>) {
        let n = levels.len();
        let mut fused: Vec<Var> = Vec::with_capacity(n);
        let mut prev = self.laterals[n - 1].forward(t, levels[n - 1]);
        fused.push(prev);
        for l in (0..n - 1).rev() {
            let lat = self.laterals[l].forward(t, levels[l]);
            let up = t.gather_rows(prev, self.up[l].clone());
            prev = t.add(lat, up);
            fused.push(prev);
        }
        let e = self.out.forward(t, prev);
        let e = self.adapter.forward(t, e);
        (e, fused)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross: MultiHeadAttention,
    pub adapter: Adapter,
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub norm: LayerNorm,
    pub mask_embed: Mlp,
    pub class: Linear,
}

impl Heads {
    /// Low-resolution mask logits `[N_Q, HW]` and class logits `[N_Q, N_C]`.
    pub fn forward(&self, t: &mut Tape, queries: Var, pixels: Var) -> (Var, Var) {
        let q = self.norm.forward(t, queries);
        let emb = self.mask_embed.forward(t, q);
        let masks = t.matmul_t(emb, pixels, false, true);
        let classes = self.class.forward(t, q);
        (masks, classes)
    }
}

/// Bilinear resampling (half-pixel centers, edge clamped) along the last
/// axis of a raster-ordered grid.
pub fn bilinear_map(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> SparseMap {
    let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (libm::floor(s) as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut taps = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, in_h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, in_w, out_w);
            let mut tap: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (idx, wgt) in [
                (y0 * in_w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * in_w + x1, (1.0 - fy) * fx),
                (y1 * in_w + x0, fy * (1.0 - fx)),
                (y1 * in_w + x1, fy * fx),
            ] {
                if wgt == 0.0 {
                    continue;
                }
                match tap.iter_mut().find(|(i, _)| *i == idx) {
                    Some(e) => e.1 += wgt,
                    None => tap.push((idx, wgt)),
                }
            }
            taps.push(tap);
        }
    }
    SparseMap { in_cols: in_h * in_w, taps }
}

/// Per-class masks from per-query class logits `[N_Q, N_C]` and mask logits
/// `[N_Q, P]`: `M[c, p] = sum_q softmax(C)[q, c] * sigmoid(M_Q)[q, p]` for
/// object classes; the no-object channel is left at zero.
pub fn assemble_class_masks(class_logits: &Tensor, mask_logits: &Tensor) -> Tensor {
    let (nq, nc) = (class_logits.rows(), class_logits.cols());
    let np = mask_logits.cols();
    let mut probs = class_logits.clone();
    for q in 0..nq {
        math::softmax_in_place(probs.row_mut(q));
        probs.row_mut(q)[NO_OBJECT] = 0.0;
    }
    let sig = Tensor::from_vec(mask_logits.shape(), mask_logits.data().iter().map(|&x| math::sigmoid(x)).collect());
    let mut out = Tensor::zeros(&[nc, np]);
    crate::tensor::gemm(nc, nq, np, 1.0, probs.data(), (1, nc as isize), sig.data(), (np as isize, 1), 0.0, out.data_mut(), (np as isize, 1));
    out
}

/// Foreground where any class mask exceeds 0.5.
pub fn binary_prediction(class_masks: &Tensor) -> Vec<bool> {
    let np = class_masks.cols();
    (0..np).map(|p| (0..class_masks.rows()).any(|c| class_masks.get2(c, p) > 0.5)).collect()
}

/// Per-pixel argmax over class masks, with background wherever no class
/// reaches 0.5.
pub fn semantic_prediction(class_masks: &Tensor) -> Vec<u8> {
    let np = class_masks.cols();
    (0..np)
        .map(|p| {
            let mut best = (0usize, 0.5);
            for c in 0..class_masks.rows() {
                let v = class_masks.get2(c, p);
                if c != NO_OBJECT && v > best.1 {
                    best = (c, v);
                }
            }
            best.0 as u8
        })
        .collect()
}

/// Model inputs for one frame. `levels` are cached token-major backbone
/// features.
pub struct FrameInputs<'a> {
    pub levels: &'a [Tensor],
    pub audio_row: &'a [f64],
    pub text: &'a TextFeature,
}

pub struct ForwardOutput {
    /// Full-resolution mask logits `[N_Q, H*W]`.
    pub mask_logits: Var,
    /// `[N_Q, N_C]`.
    pub class_logits: Var,
    pub sof: SoundingObjectFeature,
    /// Query-prompting attention weights `[N_Q, slots]`.
    pub prompt_weights: Tensor,
}

/// Plain-tensor prediction for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    /// `[N_Q, H, W]` mask logits.
    pub mask_logits: Tensor,
    /// `[N_Q, N_C]`.
    pub class_logits: Tensor,
    /// `[N_C, H, W]`.
    pub class_masks: Tensor,
    pub cue_mask: Vec<f64>,
    pub cue_scores: Vec<f64>,
}

impl SegmentationOutput {
    pub fn binary(&self) -> Vec<bool> {
        binary_prediction(&self.flat_class_masks())
    }

    pub fn semantic(&self) -> Vec<u8> {
        semantic_prediction(&self.flat_class_masks())
    }

    fn flat_class_masks(&self) -> Tensor {
        let s = self.class_masks.shape();
        self.class_masks.clone().reshaped(&[s[0], s[1] * s[2]])
    }
}

#[derive(Clone, Debug)]
pub struct TesoModel {
    pub spec: ModelSpec,
    pub backbone: ToyVisualBackbone,
    pub visual_adapters: VisualAdapters,
    pub sedam: Sedam,
    pub pmqs: Pmqs,
    pub queries: ParamId,
    pub pixel_decoder: PixelDecoder,
    pub layers: Vec<DecoderLayer>,
    pub heads: Heads,
    grids: Vec<(usize, usize)>,
    /// Low-resolution pixel grid to each memory level (mean of covered cells).
    down: Vec<Rc<SparseMap>>,
    upsample: Rc<SparseMap>,
}

impl TesoModel {
    pub fn new(store: &mut ParamStore, spec: &ModelSpec) -> Result<Self> {
        let e = &spec.encoders;
        if spec.n_c < 2 {
            return Err(Error::Config("need at least one object class".into()));
        }
        let backbone = crate::encoders::visual_backbone(store, e, spec.image_size)?;
        let mut rng = seeded(spec.seed);
        let d = e.d_v;
        let visual_adapters = VisualAdapters::new(store, &mut rng, backbone.levels(), d, e.adapter_ratio);
        let sedam = Sedam::new(store, &mut rng, &spec.sedam, e.d_a, e.d_t)?;
        let pmqs = Pmqs::new(store, &mut rng, &spec.pmqs, d, e.d_a)?;
        let queries = query_embeddings(store, &mut rng, spec.pmqs.n_q, d);
        let grids: Vec<(usize, usize)> = (0..backbone.levels()).map(|l| backbone.grid(l)).collect();
        let pixel_decoder = PixelDecoder::new(store, &mut rng, &grids, d, e.adapter_ratio);
        let dc = &spec.decoder;
        if dc.heads == 0 || !d.is_multiple_of(dc.heads) {
            return Err(Error::Config("decoder heads must divide d_V".into()));
        }
        let g = ParamGroup::Other;
        let layers = (0..dc.layers)
            .map(|l| {
                let name = format!("decoder.layer{l}");
                let mha = |store: &mut ParamStore, rng: &mut Rng, what: &str| {
                    MultiHeadAttention::new(
                        store,
                        rng,
                        &MhaSpec { name: &format!("{name}.{what}"), group: g, query_dim: d, kv_dim: d, dim: d, out_dim: d, heads: dc.heads, zero_attn: false, zero_out: false },
                    )
                };
                let cross = mha(store, &mut rng, "cross");
                let adapter = Adapter::new(store, &mut rng, &format!("adapters.masked_attention_out.{l}"), ParamGroup::Adapter, d, e.adapter_ratio);
                let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), g, d);
                let self_attn = mha(store, &mut rng, "self");
                let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), g, d);
                let ffn = Mlp::new(store, &mut rng, &format!("{name}.ffn"), g, (d, dc.ffn, d));
                let norm3 = LayerNorm::new(store, &format!("{name}.norm3"), g, d);
                DecoderLayer { cross, adapter, norm1, self_attn, norm2, ffn, norm3 }
            })
            .collect();
        let heads = Heads {
            norm: LayerNorm::new(store, "heads.norm", g, d),
            mask_embed: Mlp::new(store, &mut rng, "heads.mask_embed", g, (d, d, d)),
            class: Linear::new(store, &mut rng, "heads.class", g, d, spec.n_c, true),
        };
        let (h0, w0) = grids[0];
        let down = (0..grids.len())
            .rev()
            .map(|l| {
                let (h, w) = grids[l];
                let (fy, fx) = (h0 / h, w0 / w);
                let taps = (0..h * w)
                    .map(|i| {
                        let (y, x) = (i / w, i % w);
                        let wgt = 1.0 / (fy * fx) as f64;
                        let mut tap = Vec::with_capacity(fy * fx);
                        for dy in 0..fy {
                            for dx in 0..fx {
                                tap.push(((y * fy + dy) * w0 + x * fx + dx, wgt));
                            }
                        }
                        tap
                    })
                    .collect();
                Rc::new(SparseMap { in_cols: h0 * w0, taps })
            })
            .collect();
        let (ih, iw) = spec.image_size;
        let upsample = Rc::new(bilinear_map(h0, w0, ih, iw));
        Ok(Self { spec: spec.clone(), backbone, visual_adapters, sedam, pmqs, queries, pixel_decoder, layers, heads, grids, down, upsample })
    }

    pub fn pixels(&self) -> usize {
        self.spec.image_size.0 * self.spec.image_size.1
    }

    /// Token-major frozen features for caching.
    pub fn backbone_features(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<Tensor>> {
        self.backbone.features(store, image)
    }

    fn attention_mask(&self, t: &Tape, low_masks: Var, level: usize) -> Tensor {
        let m = t.value(low_masks);
        let map = &self.down[level];
        let nq = m.rows();
        let nk = map.out_cols();
        let mut out = Tensor::zeros(&[nq, nk]);
        let mut buf = vec![0.0; nk];
        for q in 0..nq {
            map.apply_row(m.row(q), &mut buf);
            let row = out.row_mut(q);
            let mut any_open = false;
            for (o, &v) in row.iter_mut().zip(&buf) {
                *o = if v < 0.0 { MASK_NEG } else { 0.0 };
                any_open |= v >= 0.0;
            }
            if !any_open {
                row.iter_mut().for_each(|o| *o = 0.0);
            }
        }
        out
    }

    pub fn forward(&self, t: &mut Tape, inputs: &FrameInputs, switches: ModelSwitches) -> Result<ForwardOutput> {
        if inputs.levels.len() != self.grids.len() {
            return Err(Error::Shape(format!("expected {} feature levels, got {}", self.grids.len(), inputs.levels.len())));
        }
        let raw: Vec<Var> = inputs.levels.iter().map(|l| t.constant(l.clone())).collect();
        let levels = self.visual_adapters.forward(t, &raw);
        let (pixels, memories) = self.pixel_decoder.forward(t, &levels);

        let sof = self.sedam.forward(t, &inputs.text.values, &inputs.text.valid, inputs.audio_row, switches.sedam)?;
        let f_q = t.param(self.queries);
        let (mut q, prompt_weights) = if switches.pmqs {
            let p = self.pmqs.prompt(t, f_q, sof.values, &sof.mask)?;
            (p.queries, p.weights)
        } else {
            let n = t.value(f_q).rows();
            (f_q, Tensor::zeros(&[n, sof.mask.len()]))
        };

        let (mut low, _) = self.heads.forward(t, q, pixels);
        for (i, layer) in self.layers.iter().enumerate() {
            let level = i % memories.len();
            let mask = self.attention_mask(t, low, level);
            let mem = memories[level];
            let cross = layer.cross.forward(t, q, mem, AttnMask::Full(&mask)).out;
            let cross = layer.adapter.forward(t, cross);
            let s = t.add(q, cross);
            q = layer.norm1.forward(t, s);
            let sa = layer.self_attn.forward(t, q, q, AttnMask::None).out;
            let s = t.add(q, sa);
            q = layer.norm2.forward(t, s);
            let f = layer.ffn.forward(t, q);
            let s = t.add(q, f);
            q = layer.norm3.forward(t, s);
            low = self.heads.forward(t, q, pixels).0;
        }
        let (low, class_logits) = self.heads.forward(t, q, pixels);
        let mask_logits = t.sparse_map(low, self.upsample.clone());
        Ok(ForwardOutput { mask_logits, class_logits, sof, prompt_weights })
    }

    /// Inference without gradients.
    pub fn predict(&self, store: &ParamStore, inputs: &FrameInputs, switches: ModelSwitches) -> Result<SegmentationOutput> {
        let mut t = Tape::new(store);
        let out = self.forward(&mut t, inputs, switches)?;
        let (h, w) = self.spec.image_size;
        let ml = t.value(out.mask_logits).clone();
        let cl = t.value(out.class_logits).clone();
        let cm = assemble_class_masks(&cl, &ml);
        let nq = ml.rows();
        let nc = cl.cols();
        Ok(SegmentationOutput {
            mask_logits: ml.reshaped(&[nq, h, w]),
            class_logits: cl,
            class_masks: cm.reshaped(&[nc, h, w]),
            cue_mask: out.sof.mask.clone(),
            cue_scores: out.sof.scores.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{encode_text_cues, ToyTextEncoder};
    use crate::rng::normal_vec;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::from_vec(shape, normal_vec(&mut seeded(seed), shape.iter().product(), 1.0))
    }

    #[test]
    fn contraction_matches_explicit_loops() {
        let c = rand(&[2, 3], 1);
        let m = rand(&[2, 16], 2);
        let got = assemble_class_masks(&c, &m);
        for cls in 0..3 {
            for p in 0..16 {
                let mut expect = 0.0;
                if cls != NO_OBJECT {
                    for q in 0..2 {
                        let row = c.row(q);
                        let z: f64 = row.iter().map(|&x| math::exp(x)).sum();
                        expect += math::exp(row[cls]) / z * (1.0 / (1.0 + math::exp(-m.get2(q, p))));
                    }
                }
                assert!((got.get2(cls, p) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_query_copies_its_mask() {
        let c = Tensor::from_vec(&[2, 3], vec![-50.0, 50.0, -50.0, 50.0, -50.0, -50.0]);
        let m = rand(&[2, 4], 3);
        let got = assemble_class_masks(&c, &m);
        for p in 0..4 {
            assert!((got.get2(1, p) - math::sigmoid(m.get2(0, p))).abs() < 1e-12);
            assert!(got.get2(2, p).abs() < 1e-12);
        }
        let neg = Tensor::full(&[2, 4], -1e3);
        assert!(binary_prediction(&assemble_class_masks(&c, &neg)).iter().all(|&b| !b));
    }

    #[test]
    fn semantic_inference_uses_background_threshold() {
        let cm = Tensor::from_vec(&[3, 3], vec![0.0, 0.0, 0.0, 0.9, 0.2, 0.6, 0.1, 0.3, 0.7]);
        assert_eq!(semantic_prediction(&cm), vec![1, 0, 2]);
        assert_eq!(binary_prediction(&cm), vec![true, false, true]);
    }

    #[test]
    fn bilinear_map_preserves_constants_and_rows_sum_to_one() {
        let m = bilinear_map(4, 4, 16, 16);
        for tap in &m.taps {
            assert!((tap.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            image_size: (16, 16),
            n_c: 4,
            encoders: EncoderConfig { d_a: 8, d_v: 8, d_t: 6, ..EncoderConfig::default() },
            sedam: SedamConfig { n_l: 2, d_al: 4, heads: 2, layers: 1, ..SedamConfig::default() },
            pmqs: PmqsConfig { n_q: 4, heads: 1, dim: 0 },
            decoder: DecoderConfig { layers: 2, heads: 2, ffn: 8 },
            seed: 3,
        }
    }

    #[test]
    fn forward_shapes_and_frozen_backbone() {
        let mut store = ParamStore::new();
        let spec = tiny_spec();
        let model = TesoModel::new(&mut store, &spec).unwrap();
        let img = Tensor::from_vec(&[3, 16, 16], normal_vec(&mut seeded(1), 768, 0.3));
        let levels = model.backbone_features(&store, &img).unwrap();
        let text = encode_text_cues(&ToyTextEncoder::new(&spec.encoders), &["dog".into()], 3);
        let audio = normal_vec(&mut seeded(2), 8, 1.0);
        let inputs = FrameInputs { levels: &levels, audio_row: &audio, text: &text };
        let out = model.predict(&store, &inputs, ModelSwitches::default()).unwrap();
        assert_eq!(out.mask_logits.shape(), &[4, 16, 16]);
        assert_eq!(out.class_logits.shape(), &[4, 4]);
        assert_eq!(out.class_masks.shape(), &[4, 16, 16]);
        assert!(out.class_masks.data()[..256].iter().all(|&x| x == 0.0));

        let mut t = Tape::new(&store);
        let fo = model.forward(&mut t, &inputs, ModelSwitches::default()).unwrap();
        let s = t.sum(fo.mask_logits);
        let c = t.sum(fo.class_logits);
        let l = t.add(s, c);
        let g = t.backward(l);
        let mut acc = store.zeros_like();
        t.accumulate_param_grads(&g, &mut acc);
        for (id, p) in store.iter() {
            if p.group == ParamGroup::Frozen {
                assert!(acc[id.index()].data().iter().all(|&x| x == 0.0), "{}", p.name);
            }
        }
        let adapter_grad: f64 = store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Adapter)
            .map(|(id, _)| acc[id.index()].data().iter().map(|x| x.abs()).sum::<f64>())
            .sum();
        assert!(adapter_grad > 0.0);
    }
}
