//! Decoder-only transformer with hand-written reverse-mode gradients.
//!
//! Positions are processed one at a time through every block, so a full
//! forward pass and incremental decoding share the exact same arithmetic.
//!
//! Position masking: a position with `keep = false` is never used as an
//! attention key and never serves as the predictor of a later token. The
//! log-probability of token `t` is read from the logits of the last kept
//! position before `t`, so a masked token has no path to any other entry.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive};

use super::arch::{ArchConfig, Layout};

pub trait Real:
    Float + FromPrimitive + Sum + AddAssign + Send + Sync + Default + Debug + 'static
{
}

impl<T> Real for T where
    T: Float + FromPrimitive + Sum + AddAssign + Send + Sync + Default + Debug + 'static
{
}

#[inline]
pub(crate) fn cst<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let th = (cst::<T>(GELU_C) * (x + cst::<T>(0.044715) * x * x * x)).tanh();
    cst::<T>(0.5) * x * (T::one() + th)
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = cst::<T>(GELU_C);
    let a = cst::<T>(0.044715);
    let th = (c * (x + a * x * x * x)).tanh();
    let half = cst::<T>(0.5);
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + cst::<T>(3.0) * a * x * x)
}

/// y = x W (+ b), W stored row-major as [in, out].
#[inline]
fn matvec<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let out = y.len();
    match bias {
        Some(b) => y.copy_from_slice(b),
        None => y.iter_mut().for_each(|v| *v = T::zero()),
    }
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yo, &wo) in y.iter_mut().zip(row) {
            *yo += xi * wo;
        }
    }
}

/// Accumulates dW += x^T dy and returns dx = dy W^T into `dx` (added).
#[inline]
fn matvec_back<T: Real>(x: &[T], w: &[T], dy: &[T], dw: &mut [T], dx: &mut [T]) {
    let out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        let drow = &mut dw[i * out..(i + 1) * out];
        let mut acc = T::zero();
        for o in 0..out {
            drow[o] += xi * dy[o];
            acc += dy[o] * row[o];
        }
        dx[i] += acc;
    }
}

/// Layer norm of one row; writes output and normalized input, returns 1/std.
#[inline]
fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], xhat: &mut [T], y: &mut [T]) -> T {
    let n = cst::<T>(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + cst::<T>(LN_EPS)).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = xhat[i] * g[i] + b[i];
    }
    rstd
}

#[inline]
fn layer_norm_back<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: T,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let n = cst::<T>(dy.len() as f64);
    let mut mean_dxhat = T::zero();
    let mut mean_dxhat_xhat = T::zero();
    for i in 0..dy.len() {
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        let dxh = dy[i] * g[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat = mean_dxhat / n;
    mean_dxhat_xhat = mean_dxhat_xhat / n;
    for i in 0..dy.len() {
        let dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

/// Borrowed view of a parameter vector.
pub struct Model<'a, T> {
    pub p: &'a [T],
    pub arch: &'a ArchConfig,
    pub layout: &'a Layout,
}

#[derive(Default, Clone)]
struct LayerCache<T> {
    x_in: Vec<T>,
    ln1_hat: Vec<T>,
    ln1_rstd: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// probs[t] holds head_count * (t + 1) attention weights.
    probs: Vec<Vec<T>>,
    ctx: Vec<T>,
    x_mid: Vec<T>,
    ln2_hat: Vec<T>,
    ln2_rstd: Vec<T>,
    b: Vec<T>,
    hpre: Vec<T>,
    hact: Vec<T>,
}

/// Forward activations for one sequence, grown one position at a time.
#[derive(Clone)]
pub struct Trace<T> {
    pub tokens: Vec<u32>,
    pub keep: Vec<bool>,
    layers: Vec<LayerCache<T>>,
    x_out: Vec<T>,
    lnf_hat: Vec<T>,
    lnf_rstd: Vec<T>,
    f: Vec<T>,
    logits: Vec<T>,
}

impl<T: Real> Trace<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Raw logits emitted at position `t`.
    pub fn logits(&self, t: usize, vocab: usize) -> &[T] {
        &self.logits[t * vocab..(t + 1) * vocab]
    }

    /// Last kept position strictly before `t`.
    pub fn predictor(&self, t: usize) -> Option<usize> {
        (0..t).rev().find(|&s| self.keep[s])
    }
}

/// Log-softmax of `logits / temperature` with `excluded` forced to -inf.
pub fn log_softmax<T: Real>(logits: &[T], temperature: T, excluded: Option<u32>) -> Vec<T> {
    let mut out: Vec<T> = logits.iter().map(|&z| z / temperature).collect();
    if let Some(x) = excluded {
        out[x as usize] = T::neg_infinity();
    }
    let max = out.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = out.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    for z in &mut out {
        *z = *z - lse;
    }
    out
}

impl<'a, T: Real> Model<'a, T> {
    pub fn new(p: &'a [T], arch: &'a ArchConfig, layout: &'a Layout) -> Self {
        debug_assert_eq!(p.len(), layout.total);
        Self { p, arch, layout }
    }

    #[inline]
    fn slice(&self, at: usize, len: usize) -> &'a [T] {
        &self.p[at..at + len]
    }

    pub fn start(&self) -> Trace<T> {
        Trace {
            tokens: Vec::new(),
            keep: Vec::new(),
            layers: vec![LayerCache::default(); self.arch.depth],
            x_out: Vec::new(),
            lnf_hat: Vec::new(),
            lnf_rstd: Vec::new(),
            f: Vec::new(),
            logits: Vec::new(),
        }
    }

    /// Runs a whole sequence.
    pub fn forward(&self, tokens: &[u32], keep: &[bool]) -> Trace<T> {
        let mut tr = self.start();
        for (&tok, &k) in tokens.iter().zip(keep) {
            self.push(&mut tr, tok, k);
        }
        tr
    }

    /// Appends one position and computes its activations through every block.
    pub fn push(&self, tr: &mut Trace<T>, token: u32, keep: bool) {
        let (d, v, hw, nh, mh) = (
            self.arch.width,
            self.arch.vocab_size,
            self.arch.head_width(),
            self.arch.head_count,
            self.arch.mlp_width,
        );
        let t = tr.tokens.len();
        assert!(t < self.arch.context_length, "sequence exceeds context length");
        assert!((token as usize) < v, "token outside vocabulary");
        tr.tokens.push(token);
        tr.keep.push(keep);
        let lay = self.layout;
        let scale = T::one() / cst::<T>(hw as f64).sqrt();

        let mut x: Vec<T> = self
            .slice(lay.tok_emb + token as usize * d, d)
            .iter()
            .zip(self.slice(lay.pos_emb + t * d, d))
            .map(|(&a, &b)| a + b)
            .collect();
        let mut tmp = vec![T::zero(); d];
        let mut hat = vec![T::zero(); d];
        let keys = attended(&tr.keep, t);

        for (l, slots) in lay.layers.iter().enumerate() {
            let c = &mut tr.layers[l];
            c.x_in.extend_from_slice(&x);

            let mut a = vec![T::zero(); d];
            let r = layer_norm(&x, self.slice(slots.ln1_g, d), self.slice(slots.ln1_b, d), &mut hat, &mut a);
            c.ln1_hat.extend_from_slice(&hat);
            c.ln1_rstd.push(r);

            matvec(&a, self.slice(slots.wq, d * d), None, &mut tmp);
            c.q.extend_from_slice(&tmp);
            matvec(&a, self.slice(slots.wk, d * d), None, &mut tmp);
            c.k.extend_from_slice(&tmp);
            matvec(&a, self.slice(slots.wv, d * d), None, &mut tmp);
            c.v.extend_from_slice(&tmp);
            c.a.extend_from_slice(&a);

            let q = &c.q[t * d..(t + 1) * d];
            let mut probs = vec![T::zero(); nh * (t + 1)];
            let mut ctx = vec![T::zero(); d];
            for h in 0..nh {
                let qh = &q[h * hw..(h + 1) * hw];
                let row = &mut probs[h * (t + 1)..(h + 1) * (t + 1)];
                let mut max = T::neg_infinity();
                for &j in &keys {
                    let kh = &c.k[j * d + h * hw..j * d + (h + 1) * hw];
                    let s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut z = T::zero();
                for &j in &keys {
                    row[j] = (row[j] - max).exp();
                    z += row[j];
                }
                for &j in &keys {
                    row[j] = row[j] / z;
                    let p = row[j];
                    let vh = &c.v[j * d + h * hw..j * d + (h + 1) * hw];
                    for (o, &vv) in ctx[h * hw..(h + 1) * hw].iter_mut().zip(vh) {
                        *o += p * vv;
                    }
                }
            }
            c.probs.push(probs);
            c.ctx.extend_from_slice(&ctx);

            matvec(&ctx, self.slice(slots.wo, d * d), None, &mut tmp);
            for i in 0..d {
                x[i] += tmp[i];
            }
            c.x_mid.extend_from_slice(&x);

            let mut b = vec![T::zero(); d];
            let r = layer_norm(&x, self.slice(slots.ln2_g, d), self.slice(slots.ln2_b, d), &mut hat, &mut b);
            c.ln2_hat.extend_from_slice(&hat);
            c.ln2_rstd.push(r);
            c.b.extend_from_slice(&b);

            let mut hpre = vec![T::zero(); mh];
            matvec(&b, self.slice(slots.w1, d * mh), Some(self.slice(slots.b1, mh)), &mut hpre);
            let hact: Vec<T> = hpre.iter().map(|&z| gelu(z)).collect();
            matvec(&hact, self.slice(slots.w2, mh * d), Some(self.slice(slots.b2, d)), &mut tmp);
            for i in 0..d {
                x[i] += tmp[i];
            }
            c.hpre.extend_from_slice(&hpre);
            c.hact.extend_from_slice(&hact);
        }

        tr.x_out.extend_from_slice(&x);
        let mut f = vec![T::zero(); d];
        let r = layer_norm(&x, self.slice(lay.lnf_g, d), self.slice(lay.lnf_b, d), &mut hat, &mut f);
        tr.lnf_hat.extend_from_slice(&hat);
        tr.lnf_rstd.push(r);
        let mut logits = vec![T::zero(); v];
        matvec(&f, self.slice(lay.w_out, d * v), Some(self.slice(lay.b_out, v)), &mut logits);
        tr.f.extend_from_slice(&f);
        tr.logits.extend_from_slice(&logits);
    }

    /// Accumulates into `grad` the gradient of `sum_t <dlogits[t], logits[t]>`.
    ///
    /// `dlogits` is `len × vocab`; rows of masked positions must be zero.
    pub fn backward(&self, tr: &Trace<T>, dlogits: &[T], grad: &mut [T]) {
        let (d, v, hw, nh, mh) = (
            self.arch.width,
            self.arch.vocab_size,
            self.arch.head_width(),
            self.arch.head_count,
            self.arch.mlp_width,
        );
        let n = tr.len();
        let lay = self.layout;
        let scale = T::one() / cst::<T>(hw as f64).sqrt();
        let active: Vec<bool> = tr.keep.clone();

        // dL/dx for every position at the current depth.
        let mut dx = vec![T::zero(); n * d];
        {
            let (head, rest) = grad.split_at_mut(lay.b_out);
            let db_out = &mut rest[..v];
            for t in 0..n {
                let dl = &dlogits[t * v..(t + 1) * v];
                if dl.iter().all(|&z| z == T::zero()) {
                    continue;
                }
                debug_assert!(active[t], "gradient flowing into a masked position");
                for o in 0..v {
                    db_out[o] += dl[o];
                }
                let mut df = vec![T::zero(); d];
                matvec_back(
                    &tr.f[t * d..(t + 1) * d],
                    self.slice(lay.w_out, d * v),
                    dl,
                    &mut head[lay.w_out..lay.w_out + d * v],
                    &mut df,
                );
                let (g_lo, g_hi) = head.split_at_mut(lay.lnf_b);
                layer_norm_back(
                    &df,
                    &tr.lnf_hat[t * d..(t + 1) * d],
                    tr.lnf_rstd[t],
                    self.slice(lay.lnf_g, d),
                    &mut g_lo[lay.lnf_g..lay.lnf_g + d],
                    &mut g_hi[..d],
                    &mut dx[t * d..(t + 1) * d],
                );
            }
        }

        for (l, slots) in lay.layers.iter().enumerate().rev() {
            let c = &tr.layers[l];
            // Feed-forward sublayer.
            let mut dx_mid = dx.clone();
            for t in 0..n {
                if !active[t] {
                    continue;
                }
                let dy = &dx[t * d..(t + 1) * d];
                let mut dha = vec![T::zero(); mh];
                for i in 0..d {
                    grad[slots.b2 + i] += dy[i];
                }
                matvec_back(
                    &c.hact[t * mh..(t + 1) * mh],
                    self.slice(slots.w2, mh * d),
                    dy,
                    &mut grad[slots.w2..slots.w2 + mh * d],
                    &mut dha,
                );
                let dhp: Vec<T> = dha
                    .iter()
                    .zip(&c.hpre[t * mh..(t + 1) * mh])
                    .map(|(&g, &z)| g * gelu_grad(z))
                    .collect();
                for i in 0..mh {
                    grad[slots.b1 + i] += dhp[i];
                }
                let mut db = vec![T::zero(); d];
                matvec_back(
                    &c.b[t * d..(t + 1) * d],
                    self.slice(slots.w1, d * mh),
                    &dhp,
                    &mut grad[slots.w1..slots.w1 + d * mh],
                    &mut db,
                );
                let (g_lo, g_hi) = grad.split_at_mut(slots.ln2_b);
                layer_norm_back(
                    &db,
                    &c.ln2_hat[t * d..(t + 1) * d],
                    c.ln2_rstd[t],
                    self.slice(slots.ln2_g, d),
                    &mut g_lo[slots.ln2_g..slots.ln2_g + d],
                    &mut g_hi[..d],
                    &mut dx_mid[t * d..(t + 1) * d],
                );
            }

            // Attention sublayer.
            let mut dx_in = dx_mid.clone();
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            for t in 0..n {
                if !active[t] {
                    continue;
                }
                let dout = &dx_mid[t * d..(t + 1) * d];
                let mut dctx = vec![T::zero(); d];
                matvec_back(
                    &c.ctx[t * d..(t + 1) * d],
                    self.slice(slots.wo, d * d),
                    dout,
                    &mut grad[slots.wo..slots.wo + d * d],
                    &mut dctx,
                );
                let probs = &c.probs[t];
                let keys = attended(&tr.keep, t);
                for h in 0..nh {
                    let row = &probs[h * (t + 1)..(h + 1) * (t + 1)];
                    let dc = &dctx[h * hw..(h + 1) * hw];
                    let mut dp = vec![T::zero(); t + 1];
                    let mut dot = T::zero();
                    for &j in &keys {
                        let vh = &c.v[j * d + h * hw..j * d + (h + 1) * hw];
                        dp[j] = dc.iter().zip(vh).map(|(&a, &b)| a * b).sum::<T>();
                        dot += row[j] * dp[j];
                        for (o, &g) in dv[j * d + h * hw..j * d + (h + 1) * hw].iter_mut().zip(dc) {
                            *o += row[j] * g;
                        }
                    }
                    let qh = &c.q[t * d + h * hw..t * d + (h + 1) * hw];
                    for &j in &keys {
                        let ds = row[j] * (dp[j] - dot) * scale;
                        let kh = &c.k[j * d + h * hw..j * d + (h + 1) * hw];
                        for i in 0..hw {
                            dq[t * d + h * hw + i] += ds * kh[i];
                            dk[j * d + h * hw + i] += ds * qh[i];
                        }
                    }
                }
            }
            for t in 0..n {
                if !active[t] {
                    continue;
                }
                let a = &c.a[t * d..(t + 1) * d];
                let mut da = vec![T::zero(); d];
                matvec_back(a, self.slice(slots.wq, d * d), &dq[t * d..(t + 1) * d], &mut grad[slots.wq..slots.wq + d * d], &mut da);
                matvec_back(a, self.slice(slots.wk, d * d), &dk[t * d..(t + 1) * d], &mut grad[slots.wk..slots.wk + d * d], &mut da);
                matvec_back(a, self.slice(slots.wv, d * d), &dv[t * d..(t + 1) * d], &mut grad[slots.wv..slots.wv + d * d], &mut da);
                let (g_lo, g_hi) = grad.split_at_mut(slots.ln1_b);
                layer_norm_back(
                    &da,
                    &c.ln1_hat[t * d..(t + 1) * d],
                    c.ln1_rstd[t],
                    self.slice(slots.ln1_g, d),
                    &mut g_lo[slots.ln1_g..slots.ln1_g + d],
                    &mut g_hi[..d],
                    &mut dx_in[t * d..(t + 1) * d],
                );
            }
            dx = dx_in;
        }

        for t in 0..n {
            if !active[t] {
                continue;
            }
            let tok = tr.tokens[t] as usize;
            for i in 0..d {
                let g = dx[t * d + i];
                grad[lay.tok_emb + tok * d + i] += g;
                grad[lay.pos_emb + t * d + i] += g;
            }
        }
    }
}

/// Keys attended by query `t`: kept positions at or before `t`. A query with
/// no kept key falls back to itself.
fn attended(keep: &[bool], t: usize) -> Vec<usize> {
    let keys: Vec<usize> = (0..=t).filter(|&j| keep[j]).collect();
    if keys.is_empty() {
        vec![t]
    } else {
        keys
    }
}
