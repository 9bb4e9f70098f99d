//! Batched forward pass (any [`Real`]) and hand-derived backward pass (`f64`).
//!
//! A batch stacks the elements of all problems row-wise, one matrix per set
//! pathway. Attention only mixes rows of the same problem: each problem owns a
//! contiguous segment of rows in both matrices. Nothing depends on row order
//! within a segment, so outputs are invariant to permutations within a set.

use super::tensor::{gemm_nt, gemm_tn_acc, Mat, Real};
use super::weights::{Attention, Block, FeedForward, Gradients, LayerNorm, Linear, TransformerWeights};
use super::{LossWeights, Prediction};
use crate::error::{Error, Result};
use crate::model::{transform_unchecked, Problem};
use crate::rng::Stream;
use crate::synth::{MAX_SET_SIZE, MIN_SET_SIZE};
use rand::Rng;

const LN_EPS: f64 = 1e-5;

/// Defines `$name` as a call to `$imp`, going through a copy compiled for
/// wider vector registers when the CPU has them. No fused multiply-adds are
/// formed and float reductions keep their order, so both copies agree bit for bit.
macro_rules! avx_dispatch {
    ($(#[$m:meta])* fn $name:ident<T: Real>($($a:ident: $t:ty),* $(,)?) => $imp:ident) => {
        $(#[$m])*
        #[allow(clippy::too_many_arguments)]
        fn $name<T: Real>($($a: $t),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f")]
                #[allow(clippy::too_many_arguments)]
                unsafe fn avx512<T: Real>($($a: $t),*) {
                    $imp($($a),*)
                }
                #[target_feature(enable = "avx")]
                #[allow(clippy::too_many_arguments)]
                unsafe fn avx<T: Real>($($a: $t),*) {
                    $imp($($a),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: the feature was detected at run time.
                    return unsafe { avx512($($a),*) };
                }
                if std::arch::is_x86_feature_detected!("avx") {
                    // SAFETY: as above.
                    return unsafe { avx($($a),*) };
                }
            }
            $imp($($a),*)
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Row segments of every problem in both pathways.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub seg: [Vec<Segment>; 2],
    pub rows: [usize; 2],
}

pub(crate) fn check_problem(p: &Problem) -> Result<()> {
    let (n1, n2) = p.group_sizes();
    for (name, n) in [("control", n1), ("treatment", n2)] {
        if !(MIN_SET_SIZE..=MAX_SET_SIZE).contains(&n) {
            return Err(Error::precondition(format!(
                "the transformer needs {MIN_SET_SIZE}..={MAX_SET_SIZE} elements per set, the {name} set has {n}"
            )));
        }
    }
    Ok(())
}

/// Transformed inputs for both pathways plus their layout.
fn build_inputs<T: Real>(problems: &[&Problem]) -> Result<([Vec<T>; 2], Layout)> {
    let mut cols: [Vec<T>; 2] = [Vec::new(), Vec::new()];
    let mut seg: [Vec<Segment>; 2] = [Vec::with_capacity(problems.len()), Vec::with_capacity(problems.len())];
    for p in problems {
        check_problem(p)?;
        for (s, set) in [false, true].into_iter().enumerate() {
            let start = cols[s].len();
            for (y, l, x) in p.observations() {
                if x == set {
                    cols[s].push(T::of(transform_unchecked(y, l)));
                }
            }
            seg[s].push(Segment { start, len: cols[s].len() - start });
        }
    }
    let rows = [cols[0].len(), cols[1].len()];
    Ok((cols, Layout { seg, rows }))
}

/// Dropout context for training-mode passes.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Stream,
}

fn apply_dropout<T: Real>(x: &mut Mat<T>, drop: &mut Option<Dropout<'_>>) -> Option<Vec<T>> {
    let d = drop.as_mut()?;
    if d.rate <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - d.rate));
    let mask: Vec<T> = (0..x.data.len())
        .map(|_| if d.rng.random::<f64>() < d.rate { T::zero() } else { keep })
        .collect();
    for (v, &m) in x.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn dropout_backward(dy: &Mat<f64>, mask: &Option<Vec<f64>>) -> Mat<f64> {
    match mask {
        None => dy.clone(),
        Some(m) => Mat::from_vec(dy.rows, dy.cols, dy.data.iter().zip(m).map(|(a, b)| a * b).collect()),
    }
}

// ---------------------------------------------------------------- primitives

fn linear<T: Real>(p: &Linear<T>, x: &Mat<T>) -> Mat<T> {
    let (inp, out) = (p.weight.shape[0], p.weight.shape[1]);
    debug_assert_eq!(x.cols, inp);
    Mat::from_vec(x.rows, out, T::affine(x.rows, inp, out, &x.data, &p.weight.data, &p.bias.data))
}

/// Accumulates weight gradients and returns the input gradient.
fn linear_backward(p: &Linear<f64>, g: &mut Linear<f64>, x: &Mat<f64>, dy: &Mat<f64>) -> Mat<f64> {
    let (inp, out) = (p.weight.shape[0], p.weight.shape[1]);
    gemm_tn_acc(x.rows, inp, out, &x.data, &dy.data, &mut g.weight.data);
    for r in 0..dy.rows {
        for (b, v) in g.bias.data.iter_mut().zip(dy.row(r)) {
            *b += v;
        }
    }
    let mut dx = Mat::zeros(dy.rows, inp);
    gemm_nt(dy.rows, out, inp, &dy.data, &p.weight.data, &mut dx.data);
    dx
}

pub(crate) struct LnCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

/// Sum with eight interleaved accumulators, so the loop vectorizes.
#[inline(always)]
fn lane_sum<T: Real>(v: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = v.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += f(c[k]);
        }
    }
    let mut total = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &x in rest {
        total += f(x);
    }
    total
}

fn layer_norm<T: Real>(p: &LayerNorm<T>, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
    let d = x.cols;
    let mut y = Vec::with_capacity(x.rows * d);
    let mut xhat = Vec::with_capacity(x.rows * d);
    let mut inv_std = Vec::with_capacity(x.rows);
    normalize_rows(&x.data, d, &p.gamma.data, &p.beta.data, &mut y, &mut xhat, &mut inv_std);
    (Mat::from_vec(x.rows, d, y), LnCache { xhat: Mat::from_vec(x.rows, d, xhat), inv_std })
}

avx_dispatch!(
    fn normalize_rows<T: Real>(x: &[T], d: usize, gamma: &[T], beta: &[T], y: &mut Vec<T>, xhat: &mut Vec<T>, inv_std: &mut Vec<T>)
        => normalize_rows_impl
);

#[inline(always)]
fn normalize_rows_impl<T: Real>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
    y: &mut Vec<T>,
    xhat: &mut Vec<T>,
    inv_std: &mut Vec<T>,
) {
    let n = T::of(d as f64);
    let eps = T::of(LN_EPS);
    for row in x.chunks_exact(d) {
        let mean = lane_sum(row, |v| v) / n;
        let var = lane_sum(row, |v| (v - mean) * (v - mean)) / n;
        let is = (var + eps).sqrt().recip();
        inv_std.push(is);
        let start = xhat.len();
        xhat.extend(row.iter().map(|&v| (v - mean) * is));
        y.extend(xhat[start..].iter().zip(gamma).zip(beta).map(|((&h, &g), &b)| h * g + b));
    }
}

fn layer_norm_backward(p: &LayerNorm<f64>, g: &mut LayerNorm<f64>, c: &LnCache<f64>, dy: &Mat<f64>) -> Mat<f64> {
    let d = dy.cols;
    let n = d as f64;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let (dyr, xh) = (dy.row(r), c.xhat.row(r));
        let (mut s1, mut s2) = (0.0, 0.0);
        for j in 0..d {
            g.gamma.data[j] += dyr[j] * xh[j];
            g.beta.data[j] += dyr[j];
            dxhat[j] = dyr[j] * p.gamma.data[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
        }
        let k = c.inv_std[r] / n;
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = k * (n * dxhat[j] - s1 - xh[j] * s2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh form.
#[inline(always)]
fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x)).tanh_fast())
}

/// Elementwise GELU.
fn gelu_mat<T: Real>(x: &Mat<T>) -> Mat<T> {
    let mut out = Vec::with_capacity(x.data.len());
    gelu_extend(&x.data, &mut out);
    Mat::from_vec(x.rows, x.cols, out)
}

avx_dispatch!(fn gelu_extend<T: Real>(src: &[T], out: &mut Vec<T>) => gelu_extend_impl);

#[inline(always)]
fn gelu_extend_impl<T: Real>(src: &[T], out: &mut Vec<T>) {
    let start = out.len();
    out.reserve(src.len());
    for (o, &x) in out.spare_capacity_mut().iter_mut().zip(src) {
        o.write(gelu(x));
    }
    // SAFETY: the loop initialized `src.len()` elements past `start`.
    unsafe { out.set_len(start + src.len()) };
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) struct FfCache<T> {
    x: Mat<T>,
    u: Mat<T>,
    a: Mat<T>,
}

fn feed_forward<T: Real>(p: &FeedForward<T>, x: Mat<T>) -> (Mat<T>, FfCache<T>) {
    let u = linear(&p.up, &x);
    let a = gelu_mat(&u);
    let y = linear(&p.down, &a);
    (y, FfCache { x, u, a })
}

fn feed_forward_backward(p: &FeedForward<f64>, g: &mut FeedForward<f64>, c: &FfCache<f64>, dy: &Mat<f64>) -> Mat<f64> {
    let mut du = linear_backward(&p.down, &mut g.down, &c.a, dy);
    for (d, &u) in du.data.iter_mut().zip(&c.u.data) {
        *d *= gelu_grad(u);
    }
    linear_backward(&p.up, &mut g.up, &c.x, &du)
}

pub(crate) struct AttnCache<T> {
    xq: Mat<T>,
    /// `None` when the keys and values come from `xq` itself.
    xkv: Option<Mat<T>>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Softmax weights ordered by query row, then head, then key row.
    probs: Vec<T>,
    o: Mat<T>,
}

avx_dispatch!(
    fn attend_scores<T: Real>(q: &[T], k: &[T], d: usize, heads: usize, scale: T, probs: &mut Vec<T>) => attend_scores_impl
);
avx_dispatch!(fn exp_in_place<T: Real>(x: &mut [T]) => exp_in_place_impl);
avx_dispatch!(
    fn attend_mix<T: Real>(v: &[T], d: usize, heads: usize, probs: &mut [T], o: &mut Vec<T>) => attend_mix_impl
);

/// Scaled dot products of one segment's query rows with another's key rows,
/// all heads, shifted by their per-(row, head) maximum. Appended to `probs` in
/// query row, head, key row order. Common head widths get an unrolled copy.
#[inline(always)]
fn attend_scores_impl<T: Real>(q: &[T], k: &[T], d: usize, heads: usize, scale: T, probs: &mut Vec<T>) {
    match d / heads {
        8 => scores_heads::<T, 8>(q, k, d, scale, probs),
        16 => scores_heads::<T, 16>(q, k, d, scale, probs),
        dh => scores_heads_dyn(q, k, d, dh, scale, probs),
    }
}

#[inline(always)]
fn scores_heads<T: Real, const DH: usize>(q: &[T], k: &[T], d: usize, scale: T, probs: &mut Vec<T>) {
    let n = k.len() / d;
    for qrow in q.chunks_exact(d) {
        for (h, qi) in qrow.chunks_exact(DH).enumerate() {
            let lo = h * DH;
            let qi: &[T; DH] = qi.try_into().expect("head slice");
            let start = probs.len();
            let mut max = T::neg_infinity();
            for krow in k.chunks_exact(d) {
                let kj: &[T; DH] = krow[lo..lo + DH].try_into().expect("head slice");
                let mut acc = T::zero();
                for t in 0..DH {
                    acc += qi[t] * kj[t];
                }
                let s = acc * scale;
                if s > max {
                    max = s;
                }
                probs.push(s);
            }
            for s in &mut probs[start..start + n] {
                *s -= max;
            }
        }
    }
}

fn scores_heads_dyn<T: Real>(q: &[T], k: &[T], d: usize, dh: usize, scale: T, probs: &mut Vec<T>) {
    let n = k.len() / d;
    for qrow in q.chunks_exact(d) {
        for (h, qi) in qrow.chunks_exact(dh).enumerate() {
            let lo = h * dh;
            let start = probs.len();
            let mut max = T::neg_infinity();
            for krow in k.chunks_exact(d) {
                let mut acc = T::zero();
                for (&a, &b) in qi.iter().zip(&krow[lo..lo + dh]) {
                    acc += a * b;
                }
                let s = acc * scale;
                max = max.max(s);
                probs.push(s);
            }
            for s in &mut probs[start..start + n] {
                *s -= max;
            }
        }
    }
}

#[inline(always)]
fn exp_in_place_impl<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        *v = v.exp_fast();
    }
}

/// Normalizes one segment pair's exponentiated scores in place and appends
/// the weighted value rows (heads concatenated) to `o`.
#[inline(always)]
fn attend_mix_impl<T: Real>(v: &[T], d: usize, heads: usize, probs: &mut [T], o: &mut Vec<T>) {
    match d / heads {
        8 => mix_heads::<T, 8>(v, d, probs, o),
        16 => mix_heads::<T, 16>(v, d, probs, o),
        dh => mix_heads_dyn(v, d, dh, probs, o),
    }
}

#[inline(always)]
fn mix_heads<T: Real, const DH: usize>(v: &[T], d: usize, probs: &mut [T], o: &mut Vec<T>) {
    let n = v.len() / d;
    for (i, ws) in probs.chunks_exact_mut(n).enumerate() {
        let lo = (i % (d / DH)) * DH;
        let inv = ws.iter().fold(T::zero(), |a, &b| a + b).recip();
        let mut out = [T::zero(); DH];
        for (w, vrow) in ws.iter_mut().zip(v.chunks_exact(d)) {
            *w *= inv;
            let vj: &[T; DH] = vrow[lo..lo + DH].try_into().expect("head slice");
            for t in 0..DH {
                out[t] += *w * vj[t];
            }
        }
        o.extend_from_slice(&out);
    }
}

fn mix_heads_dyn<T: Real>(v: &[T], d: usize, dh: usize, probs: &mut [T], o: &mut Vec<T>) {
    let n = v.len() / d;
    for (i, ws) in probs.chunks_exact_mut(n).enumerate() {
        let lo = (i % (d / dh)) * dh;
        let inv = ws.iter().fold(T::zero(), |a, &b| a + b).recip();
        let start = o.len();
        o.resize(start + dh, T::zero());
        let out = &mut o[start..];
        for (w, vrow) in ws.iter_mut().zip(v.chunks_exact(d)) {
            *w *= inv;
            for (ov, &vv) in out.iter_mut().zip(&vrow[lo..lo + dh]) {
                *ov += *w * vv;
            }
        }
    }
}

/// Multi-head attention of the rows in `xq` over the rows in `xkv` (or `xq`
/// itself when `xkv` is `None`), restricted to matching segments. Scores for
/// the whole batch are exponentiated in one pass.
fn attention<T: Real>(
    p: &Attention<T>,
    heads: usize,
    xq: Mat<T>,
    xkv: Option<Mat<T>>,
    qs: &[Segment],
    ks: &[Segment],
) -> (Mat<T>, AttnCache<T>) {
    let d = xq.cols;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let q = linear(&p.q, &xq);
    let src = xkv.as_ref().unwrap_or(&xq);
    let k = linear(&p.k, src);
    let v = linear(&p.v, src);
    let mut probs = Vec::with_capacity(qs.iter().zip(ks).map(|(a, b)| heads * a.len * b.len).sum());
    for (sq, sk) in qs.iter().zip(ks) {
        let qr = &q.data[sq.start * d..(sq.start + sq.len) * d];
        let kr = &k.data[sk.start * d..(sk.start + sk.len) * d];
        attend_scores(qr, kr, d, heads, scale, &mut probs);
    }
    exp_in_place(&mut probs);
    let mut o = Vec::with_capacity(xq.rows * d);
    let mut rest = &mut probs[..];
    for (sq, sk) in qs.iter().zip(ks) {
        let (ws, tail) = rest.split_at_mut(heads * sq.len * sk.len);
        rest = tail;
        attend_mix(&v.data[sk.start * d..(sk.start + sk.len) * d], d, heads, ws, &mut o);
    }
    let o = Mat::from_vec(xq.rows, d, o);
    let out = linear(&p.o, &o);
    (out, AttnCache { xq, xkv, q, k, v, probs, o })
}

/// Returns `(d xq, d xkv)`.
fn attention_backward(
    p: &Attention<f64>,
    g: &mut Attention<f64>,
    heads: usize,
    c: &AttnCache<f64>,
    qs: &[Segment],
    ks: &[Segment],
    dout: &Mat<f64>,
) -> (Mat<f64>, Mat<f64>) {
    let d = c.xq.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_o = linear_backward(&p.o, &mut g.o, &c.o, dout);
    let mut dq = Mat::zeros(c.q.rows, d);
    let mut dk = Mat::zeros(c.k.rows, d);
    let mut dv = Mat::zeros(c.v.rows, d);
    let mut dp = [0.0; MAX_SET_SIZE];
    let mut at = 0;
    for (sq, sk) in qs.iter().zip(ks) {
        for i in sq.start..sq.start + sq.len {
            for h in 0..heads {
                let lo = h * dh;
                let probs = &c.probs[at..at + sk.len];
                at += sk.len;
                let doi = &d_o.row(i)[lo..lo + dh];
                let mut weighted = 0.0;
                for (jj, j) in (sk.start..sk.start + sk.len).enumerate() {
                    let vj = &c.v.row(j)[lo..lo + dh];
                    dp[jj] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    weighted += probs[jj] * dp[jj];
                    for (dvv, &g) in dv.data[j * d + lo..j * d + lo + dh].iter_mut().zip(doi) {
                        *dvv += probs[jj] * g;
                    }
                }
                for (jj, j) in (sk.start..sk.start + sk.len).enumerate() {
                    let ds = probs[jj] * (dp[jj] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        dq.data[i * d + lo + t] += ds * c.k.data[j * d + lo + t];
                        dk.data[j * d + lo + t] += ds * c.q.data[i * d + lo + t];
                    }
                }
            }
        }
    }
    let dxq = linear_backward(&p.q, &mut g.q, &c.xq, &dq);
    let src = c.xkv.as_ref().unwrap_or(&c.xq);
    let mut dxkv = linear_backward(&p.k, &mut g.k, src, &dk);
    dxkv.add_assign(&linear_backward(&p.v, &mut g.v, src, &dv));
    (dxq, dxkv)
}

// ---------------------------------------------------------------- blocks

pub(crate) struct FfSublayer<T> {
    ln: LnCache<T>,
    ff: FfCache<T>,
    mask: Option<Vec<T>>,
}

/// `h += dropout(ff(ln_ff(h)))`.
fn ff_sublayer<T: Real>(b: &Block<T>, h: &mut Mat<T>, drop: &mut Option<Dropout<'_>>) -> FfSublayer<T> {
    let (n, ln) = layer_norm(&b.ln_ff, h);
    let (mut f, ff) = feed_forward(&b.ff, n);
    let mask = apply_dropout(&mut f, drop);
    h.add_assign(&f);
    FfSublayer { ln, ff, mask }
}

/// Given `d h_out`, returns `d h_in` of the sublayer.
fn ff_sublayer_backward(b: &Block<f64>, g: &mut Block<f64>, c: &FfSublayer<f64>, dh: &Mat<f64>) -> Mat<f64> {
    let df = dropout_backward(dh, &c.mask);
    let dn = feed_forward_backward(&b.ff, &mut g.ff, &c.ff, &df);
    let mut out = layer_norm_backward(&b.ln_ff, &mut g.ln_ff, &c.ln, &dn);
    out.add_assign(dh);
    out
}

pub(crate) struct SelfBlockCache<T> {
    ln: LnCache<T>,
    attn: AttnCache<T>,
    mask: Option<Vec<T>>,
    ff: FfSublayer<T>,
}

fn self_block<T: Real>(
    b: &Block<T>,
    heads: usize,
    h: &mut Mat<T>,
    segs: &[Segment],
    drop: &mut Option<Dropout<'_>>,
) -> SelfBlockCache<T> {
    let (n, ln) = layer_norm(&b.ln_attn, h);
    let (mut a, attn) = attention(&b.attn, heads, n, None, segs, segs);
    let mask = apply_dropout(&mut a, drop);
    h.add_assign(&a);
    let ff = ff_sublayer(b, h, drop);
    SelfBlockCache { ln, attn, mask, ff }
}

fn self_block_backward(
    b: &Block<f64>,
    g: &mut Block<f64>,
    heads: usize,
    c: &SelfBlockCache<f64>,
    segs: &[Segment],
    dh: &Mat<f64>,
) -> Mat<f64> {
    let mut dh = ff_sublayer_backward(b, g, &c.ff, dh);
    let da = dropout_backward(&dh, &c.mask);
    let (mut dn, dkv) = attention_backward(&b.attn, &mut g.attn, heads, &c.attn, segs, segs, &da);
    dn.add_assign(&dkv);
    dh.add_assign(&layer_norm_backward(&b.ln_attn, &mut g.ln_attn, &c.ln, &dn));
    dh
}

/// Caches of one bidirectional cross-attention layer, per pathway.
pub(crate) struct CrossCache<T> {
    ln: [LnCache<T>; 2],
    attn: [AttnCache<T>; 2],
    mask: [Option<Vec<T>>; 2],
    ff: [FfSublayer<T>; 2],
}

/// Each set's rows attend to the other set's rows of the same problem. Both
/// directions read the states from before the layer.
fn cross_layer<T: Real>(
    w: &TransformerWeights<T>,
    idx: usize,
    h: &mut [Mat<T>; 2],
    layout: &Layout,
    drop: &mut Option<Dropout<'_>>,
) -> CrossCache<T> {
    let heads = w.config.h;
    let b = [&w.pathway(0).cross_blocks[idx], &w.pathway(1).cross_blocks[idx]];
    let (n0, ln0) = layer_norm(&b[0].ln_attn, &h[0]);
    let (n1, ln1) = layer_norm(&b[1].ln_attn, &h[1]);
    let (mut a0, at0) = attention(&b[0].attn, heads, n0.clone(), Some(n1.clone()), &layout.seg[0], &layout.seg[1]);
    let (mut a1, at1) = attention(&b[1].attn, heads, n1, Some(n0), &layout.seg[1], &layout.seg[0]);
    let m0 = apply_dropout(&mut a0, drop);
    let m1 = apply_dropout(&mut a1, drop);
    h[0].add_assign(&a0);
    h[1].add_assign(&a1);
    let f0 = ff_sublayer(b[0], &mut h[0], drop);
    let f1 = ff_sublayer(b[1], &mut h[1], drop);
    CrossCache { ln: [ln0, ln1], attn: [at0, at1], mask: [m0, m1], ff: [f0, f1] }
}

fn cross_layer_backward(
    w: &TransformerWeights<f64>,
    g: &mut Gradients,
    idx: usize,
    c: &CrossCache<f64>,
    layout: &Layout,
    dh: [Mat<f64>; 2],
) -> [Mat<f64>; 2] {
    let heads = w.config.h;
    let mut dh_mid = Vec::with_capacity(2);
    for (s, dhs) in dh.iter().enumerate() {
        let b = &w.pathway(s).cross_blocks[idx];
        dh_mid.push(ff_sublayer_backward(b, &mut g.pathway_mut(s).cross_blocks[idx], &c.ff[s], dhs));
    }
    let mut dn: [Mat<f64>; 2] = [Mat::zeros(layout.rows[0], w.config.d), Mat::zeros(layout.rows[1], w.config.d)];
    for s in 0..2 {
        let o = 1 - s;
        let b = &w.pathway(s).cross_blocks[idx];
        let da = dropout_backward(&dh_mid[s], &c.mask[s]);
        let gb = &mut g.pathway_mut(s).cross_blocks[idx];
        let (dq, dkv) = attention_backward(&b.attn, &mut gb.attn, heads, &c.attn[s], &layout.seg[s], &layout.seg[o], &da);
        dn[s].add_assign(&dq);
        dn[o].add_assign(&dkv);
    }
    let mut out = Vec::with_capacity(2);
    for s in 0..2 {
        let b = &w.pathway(s).cross_blocks[idx];
        let mut d = dh_mid[s].clone();
        d.add_assign(&layer_norm_backward(&b.ln_attn, &mut g.pathway_mut(s).cross_blocks[idx].ln_attn, &c.ln[s], &dn[s]));
        out.push(d);
    }
    let d1 = out.pop().expect("two pathways");
    let d0 = out.pop().expect("two pathways");
    [d0, d1]
}

// ---------------------------------------------------------------- network

/// Everything backward needs from a forward pass.
pub(crate) struct Trace<T> {
    layout: Layout,
    raw: [Vec<T>; 2],
    scaled: [Mat<T>; 2],
    self_blocks: [Vec<SelfBlockCache<T>>; 2],
    cross: Vec<CrossCache<T>>,
    ln_final: [LnCache<T>; 2],
    pooled: [Mat<T>; 2],
    xi: Mat<T>,
    head_in: Vec<Mat<T>>,
    head_pre: Vec<Mat<T>>,
    head_masks: Vec<Option<Vec<T>>>,
    /// Head output before the target affine.
    raw_out: Mat<T>,
}

/// Runs the network on a batch. Returns `(outputs (B×3), ξ (B×4d), trace)`.
pub(crate) fn forward_batch_impl<T: Real>(
    w: &TransformerWeights<T>,
    problems: &[&Problem],
    mut drop: Option<Dropout<'_>>,
) -> Result<(Mat<T>, Trace<T>)> {
    let cfg = &w.config;
    let (d, heads) = (cfg.d, cfg.h);
    let (raw, layout) = build_inputs::<T>(problems)?;
    let (scale, shift) = (w.input_affine.data[0], w.input_affine.data[1]);

    let mut scaled: Vec<Mat<T>> = Vec::with_capacity(2);
    let mut h: Vec<Mat<T>> = Vec::with_capacity(2);
    for s in 0..2 {
        let u = Mat::from_vec(raw[s].len(), 1, raw[s].iter().map(|&v| v * scale + shift).collect());
        h.push(linear(&w.embed, &u));
        scaled.push(u);
    }
    let mut h: [Mat<T>; 2] = [h.remove(0), h.remove(0)];

    let mut self_caches: [Vec<SelfBlockCache<T>>; 2] = [Vec::new(), Vec::new()];
    for s in 0..2 {
        for b in &w.pathway(s).self_blocks {
            self_caches[s].push(self_block(b, heads, &mut h[s], &layout.seg[s], &mut drop));
        }
    }
    let mut cross = Vec::with_capacity(cfg.cross_blocks);
    for idx in 0..cfg.cross_blocks {
        cross.push(cross_layer(w, idx, &mut h, &layout, &mut drop));
    }

    let b = problems.len();
    let mut ln_final = Vec::with_capacity(2);
    let mut pooled = Vec::with_capacity(2);
    for s in 0..2 {
        let (z, c) = layer_norm(&w.pathway(s).ln_final, &h[s]);
        let mut phi = Mat::zeros(b, d);
        for (pi, sg) in layout.seg[s].iter().enumerate() {
            let inv = T::of(1.0 / sg.len as f64);
            let out = phi.row_mut(pi);
            for r in sg.start..sg.start + sg.len {
                for (o, &v) in out.iter_mut().zip(z.row(r)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        ln_final.push(c);
        pooled.push(phi);
    }
    let mut xi = Mat::zeros(b, 4 * d);
    for i in 0..b {
        let (p1, p2) = (pooled[0].row(i), pooled[1].row(i));
        let row = xi.row_mut(i);
        for j in 0..d {
            row[j] = p1[j];
            row[d + j] = p2[j];
            row[2 * d + j] = p1[j] - p2[j];
            row[3 * d + j] = p1[j] * p2[j];
        }
    }

    let last = w.head.len() - 1;
    let mut head_in = Vec::with_capacity(w.head.len());
    let mut head_pre = Vec::with_capacity(last);
    let mut head_masks = Vec::with_capacity(last);
    let mut x = xi.clone();
    for (i, l) in w.head.iter().enumerate() {
        let y = linear(l, &x);
        head_in.push(x);
        if i == last {
            x = y;
        } else {
            let mut a = gelu_mat(&y);
            head_masks.push(apply_dropout(&mut a, &mut drop));
            head_pre.push(y);
            x = a;
        }
    }
    let raw_out = x;
    let mut out = Mat::zeros(b, 3);
    for i in 0..b {
        for k in 0..3 {
            out.data[i * 3 + k] = raw_out.data[i * 3 + k] * w.target_scale.data[k] + w.target_shift.data[k];
        }
    }
    let ln_final: [LnCache<T>; 2] = {
        let second = ln_final.pop().expect("two pathways");
        [ln_final.pop().expect("two pathways"), second]
    };
    let pooled: [Mat<T>; 2] = {
        let second = pooled.pop().expect("two pathways");
        [pooled.pop().expect("two pathways"), second]
    };
    let scaled: [Mat<T>; 2] = {
        let second = scaled.pop().expect("two pathways");
        [scaled.pop().expect("two pathways"), second]
    };
    let trace = Trace {
        layout,
        raw,
        scaled,
        self_blocks: self_caches,
        cross,
        ln_final,
        pooled,
        xi,
        head_in,
        head_pre,
        head_masks,
        raw_out,
    };
    Ok((out, trace))
}

impl<T: Real> Trace<T> {
    /// The pooled comparison features `ξ`, one row per problem.
    pub fn xi_row(&self, i: usize) -> &[T] {
        self.xi.row(i)
    }
}

/// Back-propagates `d loss / d output` (B×3) through a recorded pass,
/// accumulating into `g`.
pub(crate) fn backward_impl(w: &TransformerWeights<f64>, t: &Trace<f64>, dout: &Mat<f64>, g: &mut Gradients) {
    let cfg = &w.config;
    let d = cfg.d;
    let heads = cfg.h;
    let b = dout.rows;

    // target affine
    let mut dx = Mat::zeros(b, 3);
    for i in 0..b {
        for k in 0..3 {
            let dy = dout.data[i * 3 + k];
            g.target_scale.data[k] += dy * t.raw_out.data[i * 3 + k];
            g.target_shift.data[k] += dy;
            dx.data[i * 3 + k] = dy * w.target_scale.data[k];
        }
    }

    // head
    let last = w.head.len() - 1;
    for i in (0..=last).rev() {
        let mut dy = dx;
        if i != last {
            dy = dropout_backward(&dy, &t.head_masks[i]);
            for (v, &pre) in dy.data.iter_mut().zip(&t.head_pre[i].data) {
                *v *= gelu_grad(pre);
            }
        }
        dx = linear_backward(&w.head[i], &mut g.head[i], &t.head_in[i], &dy);
    }

    // ξ → pooled
    let mut dphi = [Mat::zeros(b, d), Mat::zeros(b, d)];
    for i in 0..b {
        let dxi = dx.row(i);
        let (p1, p2) = (t.pooled[0].row(i), t.pooled[1].row(i));
        for j in 0..d {
            let (a, c, e, f) = (dxi[j], dxi[d + j], dxi[2 * d + j], dxi[3 * d + j]);
            dphi[0].data[i * d + j] = a + e + f * p2[j];
            dphi[1].data[i * d + j] = c - e + f * p1[j];
        }
    }

    // pooling and final norm
    let mut dh: Vec<Mat<f64>> = Vec::with_capacity(2);
    for s in 0..2 {
        let mut dz = Mat::zeros(t.layout.rows[s], d);
        for (pi, sg) in t.layout.seg[s].iter().enumerate() {
            let inv = 1.0 / sg.len as f64;
            let src = dphi[s].row(pi);
            for r in sg.start..sg.start + sg.len {
                for (o, &v) in dz.row_mut(r).iter_mut().zip(src) {
                    *o = v * inv;
                }
            }
        }
        dh.push(layer_norm_backward(&w.pathway(s).ln_final, &mut g.pathway_mut(s).ln_final, &t.ln_final[s], &dz));
    }
    let mut dh: [Mat<f64>; 2] = {
        let second = dh.pop().expect("two pathways");
        [dh.pop().expect("two pathways"), second]
    };

    for idx in (0..cfg.cross_blocks).rev() {
        dh = cross_layer_backward(w, g, idx, &t.cross[idx], &t.layout, dh);
    }
    for s in 0..2 {
        for (bi, c) in t.self_blocks[s].iter().enumerate().rev() {
            let blk = &w.pathway(s).self_blocks[bi];
            let gb = &mut g.pathway_mut(s).self_blocks[bi];
            dh[s] = self_block_backward(blk, gb, heads, c, &t.layout.seg[s], &dh[s]);
        }
    }

    // embedding and input affine
    for s in 0..2 {
        let du = linear_backward(&w.embed, &mut g.embed, &t.scaled[s], &dh[s]);
        for (r, &dv) in du.data.iter().enumerate() {
            g.input_affine.data[0] += dv * t.raw[s][r];
            g.input_affine.data[1] += dv;
        }
    }
}

/// Weighted squared error, and its gradient w.r.t. the outputs, averaged over the batch.
pub(crate) fn batch_loss(out: &Mat<f64>, targets: &[Prediction], lw: &LossWeights) -> (f64, Mat<f64>) {
    let b = out.rows;
    let wts = [lw.mu, lw.beta, lw.alpha];
    let mut total = 0.0;
    let mut grad = Mat::zeros(b, 3);
    for (i, t) in targets.iter().enumerate() {
        let tv = [t.mu, t.beta, t.alpha];
        for k in 0..3 {
            let r = out.data[i * 3 + k] - tv[k];
            total += wts[k] * r * r;
            grad.data[i * 3 + k] = 2.0 * wts[k] * r / b as f64;
        }
    }
    (total / b as f64, grad)
}
