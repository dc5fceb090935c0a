//! Property, gradient, oracle and closed-form checks.

use std::rc::Rc;
use std::time::Instant;

use rand::RngExt;
use teso_core::autograd::{Tape, Var};
use teso_core::eval::{fscore, iou, miou};
use teso_core::nn::{AttnMask, MhaSpec, MultiHeadAttention, MASK_NEG};
use teso_core::params::{ParamGroup, ParamStore};
use teso_core::pmqs::{Pmqs, PmqsConfig};
use teso_core::rng::{normal_vec, seeded, Rng};
use teso_core::sedam::{info_nce_loss, Sedam, SedamConfig, SedamSwitches};
use teso_core::segmodel::loss::{bce_dice_loss, total_loss};
use teso_core::segmodel::matching::{assignment_cost, hungarian};
use teso_core::segmodel::{assemble_class_masks, LossWeights, Target, NO_OBJECT};
use teso_core::tensor::Tensor;

use crate::Verdict;

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_vec(shape, normal_vec(rng, shape.iter().product(), 1.0))
}

fn linear_ref(store: &ParamStore, l: &teso_core::nn::Linear, x: &Tensor) -> Tensor {
    let w = &store.get(l.weight).value;
    let mut y = Tensor::zeros(&[x.rows(), l.out_dim]);
    for r in 0..x.rows() {
        for o in 0..l.out_dim {
            let mut s = l.bias.map_or(0.0, |b| store.get(b).value.data()[o]);
            for i in 0..l.in_dim {
                s += x.get2(r, i) * w.get2(i, o);
            }
            y.row_mut(r)[o] = s;
        }
    }
    y
}

struct AttnRef {
    out: Tensor,
    pooled: Vec<f64>,
    weights: Tensor,
}

/// Loop-based multi-head attention with an optional zero slot.
fn attention_ref(store: &ParamStore, m: &MultiHeadAttention, query: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> AttnRef {
    let (q, k, v) = (linear_ref(store, &m.q, query), linear_ref(store, &m.k, kv), linear_ref(store, &m.v, kv));
    let (nq, nk, hd) = (query.rows(), kv.rows(), m.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let mut cat = Tensor::zeros(&[nq, m.dim]);
    let mut pooled = vec![0.0; nq];
    let mut weights = Tensor::zeros(&[nq, nk]);
    for h in 0..m.heads {
        for i in 0..nq {
            let mut logits = Vec::new();
            for j in 0..nk {
                let dot: f64 = (0..hd).map(|d| q.get2(i, h * hd + d) * k.get2(j, h * hd + d)).sum();
                pooled[i] += dot * scale / (nk * m.heads) as f64;
                logits.push(dot * scale + mask.map_or(0.0, |mm| mm.get2(i, j)));
            }
            if m.zero_attn {
                logits.push(0.0);
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nk {
                let a = e[j] / z;
                weights.row_mut(i)[j] += a / m.heads as f64;
                for d in 0..hd {
                    cat.row_mut(i)[h * hd + d] += a * v.get2(j, h * hd + d);
                }
            }
        }
    }
    AttnRef { out: linear_ref(store, &m.o, &cat), pooled, weights }
}

fn randomize_zero_params(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.value.data().iter().all(|&x| x == 0.0) {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&normal_vec(rng, n, 0.5));
        }
    }
}

/// Criterion 1.
pub fn mask_semantics() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(0xC1);
    let n = 1000;
    let (mut dichotomy, mut padding, mut nullity, mut guard) = (0, 0, 0, 0);
    let (mut boundary_seen, mut padding_exercised) = (0, 0);
    for inst in 0..n {
        // Dynamic-mask dichotomy and padding override on a one-layer stack,
        // with the pooled logits recomputed from the weights.
        let heads = rng.random_range(1..=2usize);
        let d_a = 4 * heads;
        let cfg = SedamConfig { n_l: rng.random_range(2..=4), d_al: rng.random_range(2..=4), heads, layers: 1, eps: 1e-8, zero_attn: true };
        let n_t = rng.random_range(1..=4usize);
        let mut store = ParamStore::new();
        let s = Sedam::new(&mut store, &mut rng, &cfg, d_a, 3).unwrap();
        let text = rand_t(&mut rng, &[n_t, 3]);
        let valid: Vec<bool> = (0..n_t).map(|_| rng.random_bool(0.7)).collect();
        let audio: Vec<f64> = if inst % 10 == 0 { vec![0.0; d_a] } else { normal_vec(&mut rng, d_a, 1.0) };
        let mut t = Tape::new(&store);
        let out = s.forward(&mut t, &text, &valid, &audio, SedamSwitches::default()).unwrap();
        let query = linear_ref(&store, &s.text_proj, &text);
        let bank = linear_ref(&store, &s.latent, &Tensor::from_vec(&[1, d_a], audio.clone())).reshaped(&[cfg.n_l, cfg.d_al]);
        let r = attention_ref(&store, &s.layers[0].attn, &query, &bank, None);
        let mut ok = true;
        for i in 0..n_t {
            ok &= (r.pooled[i] - out.scores[i]).abs() < 1e-9;
            let open = valid[i] && r.pooled[i] > 0.0;
            ok &= out.mask[i] == if open { 0.0 } else { MASK_NEG };
            if r.pooled[i] == 0.0 {
                boundary_seen += 1;
            }
            if !valid[i] && r.pooled[i] > 0.0 {
                padding_exercised += 1;
                padding += usize::from(out.mask[i] == MASK_NEG);
            }
        }
        dichotomy += usize::from(ok);

        // Masked-column nullity and the all-masked guard on a prompting
        // module whose output projection is made non-zero.
        let pheads = rng.random_range(1..=2usize);
        let mut pstore = ParamStore::new();
        let p = Pmqs::new(&mut pstore, &mut rng, &PmqsConfig { n_q: 3, heads: pheads, dim: 4 }, 4, d_a).unwrap();
        randomize_zero_params(&mut pstore, &mut rng);
        let nf = rng.random_range(2..=4usize);
        let closed = rng.random_range(1..nf);
        let mut mask = vec![0.0; nf];
        for m in mask.iter_mut().take(closed) {
            *m = MASK_NEG;
        }
        let q = rand_t(&mut rng, &[3, 4]);
        let f = rand_t(&mut rng, &[nf, d_a]);
        let mut f2 = f.clone();
        for r in 0..closed {
            f2.row_mut(r).copy_from_slice(&normal_vec(&mut rng, d_a, 3.0));
        }
        let prompt = |feat: &Tensor, m: &[f64]| {
            let mut t = Tape::new(&pstore);
            let qv = t.constant(q.clone());
            let fv = t.constant(feat.clone());
            let o = p.prompt(&mut t, qv, fv, m).unwrap();
            (t.value(o.queries).clone(), o.weights)
        };
        let (o1, w1) = prompt(&f, &mask);
        let (o2, _) = prompt(&f2, &mask);
        let zero_cols = (0..3).all(|r| (0..closed).all(|c| w1.get2(r, c) == 0.0));
        nullity += usize::from(zero_cols && o1 == o2 && o1 != q);
        let (o3, w3) = prompt(&f, &vec![MASK_NEG; nf]);
        guard += usize::from(o3 == q && w3.data().iter().all(|&w| w == 0.0));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = dichotomy == n && padding == padding_exercised && padding_exercised > 0 && nullity == n && guard == n && boundary_seen > 0 && secs < 10.0;
    Verdict::new(
        pass,
        format!(
            "dichotomy {dichotomy}/{n} (xi = 0 seen {boundary_seen}x), padding override {padding}/{padding_exercised}, masked-column nullity {nullity}/{n}, all-masked guard {guard}/{n}, {secs:.2}s"
        ),
    )
}

/// Central differences against the tape for every input and every
/// trainable parameter; returns the worst norm-wise relative error over
/// tensors.
fn gradcheck(store: &ParamStore, inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut t = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
    let loss = f(&mut t, &vars);
    let g = t.backward(loss);
    let mut acc = store.zeros_like();
    t.accumulate_param_grads(&g, &mut acc);
    let eval = |s: &ParamStore, xs: &[Tensor]| {
        let mut t = Tape::new(s);
        let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };
    let h = 1e-5;
    let rel = |a: &[f64], n: &[f64]| {
        let d: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / na.max(nn).max(1e-7)
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for k in 0..inputs.len() {
        let analytic = g.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut num = vec![0.0; inputs[k].len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let x0 = inputs[k].data()[i];
            xs[k].data_mut()[i] = x0 + h;
            let fp = eval(store, &xs);
            xs[k].data_mut()[i] = x0 - h;
            let fm = eval(store, &xs);
            xs[k].data_mut()[i] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(rel(analytic.data(), &num));
    }
    let mut s = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).group == ParamGroup::Frozen {
            continue;
        }
        let mut num = vec![0.0; store.get(id).value.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let x0 = store.get(id).value.data()[i];
            s.get_mut(id).value.data_mut()[i] = x0 + h;
            let fp = eval(&s, inputs);
            s.get_mut(id).value.data_mut()[i] = x0 - h;
            let fm = eval(&s, inputs);
            s.get_mut(id).value.data_mut()[i] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(rel(acc[id.index()].data(), &num));
    }
    worst
}

fn probe(t: &mut Tape, y: Var, rng_seed: u64) -> Var {
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(rand_t(&mut seeded(rng_seed), &shape));
    let p = t.mul(y, w);
    t.sum(p)
}

/// Criterion 2.
pub fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst = Vec::new();
    for seed in 0..3u64 {
        let mut rng = seeded(0xC2 + seed);
        // Audio modeling: the stacked attend/combine layers and the
        // contrastive term, with N_T = 4 and N_L = 4.
        let mut store = ParamStore::new();
        let cfg = SedamConfig { n_l: 4, d_al: 4, heads: 2, layers: 2, eps: 1e-8, zero_attn: true };
        let s = Sedam::new(&mut store, &mut rng, &cfg, 8, 6).unwrap();
        randomize_zero_params(&mut store, &mut rng);
        let text = rand_t(&mut rng, &[4, 6]);
        let audio = normal_vec(&mut rng, 8, 1.0);
        let e_sedam = gradcheck(&store, &[], &|t, _| {
            let out = s.forward(t, &text, &[true, true, true, false], &audio, SedamSwitches::default()).unwrap();
            let a = probe(t, out.values, seed);
            let b = info_nce_loss(t, out.bank, 1e-8);
            t.add(a, b)
        });

        // Query prompting with one closed slot, N_Q = 4.
        let mut pstore = ParamStore::new();
        let p = Pmqs::new(&mut pstore, &mut rng, &PmqsConfig { n_q: 4, heads: 2, dim: 8 }, 8, 8).unwrap();
        randomize_zero_params(&mut pstore, &mut rng);
        let q = rand_t(&mut rng, &[4, 8]);
        let f = rand_t(&mut rng, &[4, 8]);
        let e_pmqs = gradcheck(&pstore, &[q, f], &|t, v| {
            let out = p.prompt(t, v[0], v[1], &[0.0, MASK_NEG, 0.0, 0.0]).unwrap();
            probe(t, out.queries, seed + 10)
        });

        // Matched BCE + dice, weighted cross-entropy and the contrastive
        // term on 8x8 masks.
        let ml = rand_t(&mut rng, &[4, 64]);
        let cl = rand_t(&mut rng, &[4, 3]);
        let bank = rand_t(&mut rng, &[4, 5]);
        let targets: Vec<Target> = (0..2)
            .map(|k| Target { class: k + 1, mask: Rc::new((0..64).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect()) })
            .collect();
        let w = LossWeights::default();
        let e_loss = gradcheck(&ParamStore::new(), &[ml, cl, bank], &|t, v| {
            total_loss(t, v[0], v[1], &targets, Some(v[2]), &w, 1e-8).unwrap().total
        });
        worst.push((e_sedam, e_pmqs, e_loss));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = |f: fn(&(f64, f64, f64)) -> f64| worst.iter().map(f).fold(0.0f64, f64::max);
    let (a, b, c) = (max(|x| x.0), max(|x| x.1), max(|x| x.2));
    Verdict::new(
        a < 1e-4 && b < 1e-4 && c < 1e-4 && secs < 60.0,
        format!("max relative error: audio modeling {a:.2e}, prompting {b:.2e}, losses {c:.2e}; {secs:.2}s"),
    )
}

fn brute_force(cost: &Tensor) -> f64 {
    fn rec(cost: &Tensor, t: usize, used: &mut Vec<bool>) -> f64 {
        if t == cost.cols() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for q in 0..cost.rows() {
            if !used[q] {
                used[q] = true;
                best = best.min(cost.get2(q, t) + rec(cost, t + 1, used));
                used[q] = false;
            }
        }
        best
    }
    rec(cost, 0, &mut vec![false; cost.rows()])
}

/// Sum in target order, matching the brute-force recursion.
fn canonical_cost(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    let mut by_target: Vec<(usize, usize)> = pairs.iter().map(|&(q, t)| (t, q)).collect();
    by_target.sort();
    let mut s = 0.0;
    for &(t, q) in by_target.iter().rev() {
        s += cost.get2(q, t);
    }
    s
}

/// Criterion 3.
pub fn oracles() -> Verdict {
    let mut rng = seeded(0xC3);
    // Attention against loops.
    let mut attn_err: f64 = 0.0;
    for _ in 0..200 {
        let heads = rng.random_range(1..=3usize);
        let dim = heads * rng.random_range(1..=3usize);
        let (nq, nk) = (rng.random_range(1..=5usize), rng.random_range(1..=5usize));
        let mut store = ParamStore::new();
        let spec = MhaSpec {
            name: "a",
            group: ParamGroup::Other,
            query_dim: 3,
            kv_dim: 4,
            dim,
            out_dim: 2,
            heads,
            zero_attn: rng.random_bool(0.5),
            zero_out: false,
        };
        let m = MultiHeadAttention::new(&mut store, &mut rng, &spec);
        randomize_zero_params(&mut store, &mut rng);
        let (q, kv) = (rand_t(&mut rng, &[nq, 3]), rand_t(&mut rng, &[nk, 4]));
        let key_mask: Vec<f64> = (0..nk).map(|_| if rng.random_bool(0.3) { MASK_NEG } else { 0.0 }).collect();
        let full = Tensor::from_vec(&[nq, nk], (0..nq * nk).map(|_| if rng.random_bool(0.3) { MASK_NEG } else { 0.0 }).collect());
        let broadcast = Tensor::from_vec(&[nq, nk], (0..nq).flat_map(|_| key_mask.clone()).collect());
        for (mask, reference) in [(AttnMask::None, None), (AttnMask::Keys(&key_mask), Some(&broadcast)), (AttnMask::Full(&full), Some(&full))] {
            let mut t = Tape::new(&store);
            let (qv, kvv) = (t.constant(q.clone()), t.constant(kv.clone()));
            let got = m.forward(&mut t, qv, kvv, mask);
            let want = attention_ref(&store, &m, &q, &kv, reference);
            attn_err = attn_err.max(t.value(got.out).max_abs_diff(&want.out)).max(got.weights.max_abs_diff(&want.weights));
            for (a, b) in got.pooled_logits.iter().zip(&want.pooled) {
                attn_err = attn_err.max((a - b).abs());
            }
        }
    }

    // Hungarian against brute force: integer costs (ties, exact sums) and
    // continuous costs.
    let mut hungarian_ok = 0;
    for k in 0..500 {
        let nq = rng.random_range(1..=6usize);
        let nt = rng.random_range(0..=nq);
        let data: Vec<f64> = if k % 2 == 0 {
            (0..nq * nt).map(|_| f64::from(rng.random_range(0..20u32))).collect()
        } else {
            normal_vec(&mut rng, nq * nt, 1.0)
        };
        let cost = Tensor::from_vec(&[nq, nt], data);
        let pairs = hungarian(&cost);
        let mut qs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        qs.sort();
        qs.dedup();
        let valid = pairs.len() == nt && qs.len() == nt;
        let exact = canonical_cost(&cost, &pairs) == brute_force(&cost);
        let _ = assignment_cost(&cost, &pairs);
        hungarian_ok += usize::from(valid && exact);
    }

    // Class-mask contraction against loops.
    let mut contraction_err: f64 = 0.0;
    for _ in 0..200 {
        let (nq, nc, np) = (rng.random_range(1..=5usize), rng.random_range(2..=5usize), rng.random_range(1..=20usize));
        let cl = rand_t(&mut rng, &[nq, nc]);
        let ml = rand_t(&mut rng, &[nq, np]);
        let got = assemble_class_masks(&cl, &ml);
        for c in 0..nc {
            for p in 0..np {
                let mut s = 0.0;
                for q in 0..nq {
                    let z: f64 = (0..nc).map(|j| cl.get2(q, j).exp()).sum();
                    let prob = if c == NO_OBJECT { 0.0 } else { cl.get2(q, c).exp() / z };
                    s += prob / (1.0 + (-ml.get2(q, p)).exp());
                }
                contraction_err = contraction_err.max((got.get2(c, p) - s).abs());
            }
        }
    }

    // Metrics against pixel counts.
    let mut metric_ok = 0;
    let (mut preds, mut gts, mut ious) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..1000 {
        let n = rng.random_range(1..=40usize);
        let (pp, pg) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(pp)).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(pg)).collect();
        let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
        for (&p, &g) in pred.iter().zip(&gt) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let union = tp + fp + fneg;
        let want_iou = if union == 0 { 1.0 } else { f64::from(tp) / f64::from(union) };
        let b = 0.3;
        let want_f = if union == 0 {
            1.0
        } else {
            let prec = if tp + fp > 0 { f64::from(tp) / f64::from(tp + fp) } else { 0.0 };
            let rec = if tp + fneg > 0 { f64::from(tp) / f64::from(tp + fneg) } else { 0.0 };
            let d = b * prec + rec;
            if d == 0.0 { 0.0 } else { (1.0 + b) * prec * rec / d }
        };
        metric_ok += usize::from(iou(&pred, &gt).unwrap() == want_iou && fscore(&pred, &gt, b).unwrap() == want_f);
        ious.push(want_iou);
        preds.push(pred);
        gts.push(gt);
    }
    let want_miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let miou_exact = miou(&preds, &gts).unwrap() == want_miou;

    let pass = attn_err < 1e-6 && hungarian_ok == 500 && contraction_err < 1e-6 && metric_ok == 1000 && miou_exact;
    Verdict::new(
        pass,
        format!(
            "attention abs err {attn_err:.1e}, Hungarian exact {hungarian_ok}/500, contraction abs err {contraction_err:.1e}, metrics exact {metric_ok}/1000, mIoU exact {miou_exact}"
        ),
    )
}

/// Criterion 4.
pub fn closed_forms() -> Verdict {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let mut rng = seeded(0xC4);
    let v = normal_vec(&mut rng, 5, 1.0);
    let same = t.constant(Tensor::from_vec(&[2, 5], [v.clone(), v].concat()));
    let l_same = info_nce_loss(&mut t, same, 1e-8);
    let orth = t.constant(Tensor::from_vec(&[2, 3], vec![0.0, 2.5, 0.0, 0.0, 0.0, -0.7]));
    let l_orth = info_nce_loss(&mut t, orth, 1e-8);
    let x = t.constant(Tensor::zeros(&[1, 64]));
    let gt = Rc::new((0..64).map(|i| f64::from(u8::from(i % 3 == 0))).collect::<Vec<_>>());
    let (bce, _) = bce_dice_loss(&mut t, x, gt, 1.0).unwrap();
    let e1 = (t.value(l_same).item() - 2f64.ln()).abs();
    let e2 = (t.value(l_orth).item() - (-1f64).exp().ln_1p()).abs();
    let e3 = (t.value(bce).item() - 2f64.ln()).abs();
    Verdict::new(
        e1 < 1e-6 && e2 < 1e-6 && e3 < 1e-6,
        format!("identical pair {e1:.1e}, orthogonal pair {e2:.1e}, BCE at p = 0.5 {e3:.1e} (abs err)"),
    )
}
