//! Forward and backward passes of the decoder-only policy.
//!
//! A sequence is processed as one or more *segments*. A segment covers a
//! contiguous run of positions and attends to everything already in the
//! key/value cache. Several segments may extend the same prefix (one prompt,
//! many sampled responses); their key/value gradients are summed into the
//! prefix before the prefix itself is back-propagated, so a shared prompt is
//! only ever processed once per pass.

use super::model::{BlockLayout, Layout, ModelShape, PolicyParams};
use crate::error::{Error, Result};
use crate::task_env::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Keys and values of every processed position, per layer, `[pos, d_model]`.
#[derive(Debug, Clone)]
pub struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

struct BlockActs {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a1: Vec<f64>,
    q: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    a2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct HeadActs {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
    /// Log-softmax of the temperature-scaled logits, `[n, vocab]`.
    logp: Vec<f64>,
    temperature: f64,
}

/// Saved activations of one segment, enough to run its backward pass.
pub struct SegmentActs {
    start: usize,
    tokens: Vec<TokenId>,
    blocks: Vec<BlockActs>,
    head: Option<HeadActs>,
    /// Start of each position's attention weights inside `BlockActs::probs`.
    prob_offsets: Vec<usize>,
}

impl SegmentActs {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Log-probabilities at every position of the segment (`[n, vocab]`),
    /// when the segment was run with an output head.
    pub fn logp(&self) -> Option<&[f64]> {
        self.head.as_ref().map(|h| h.logp.as_slice())
    }
}

/// Gradients flowing into cached keys and values, indexed like [`KvCache`].
pub struct KvGrad {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl KvGrad {
    pub fn zeros(n_layers: usize, positions: usize, d: usize) -> Self {
        KvGrad {
            k: vec![vec![0.0; positions * d]; n_layers],
            v: vec![vec![0.0; positions * d]; n_layers],
        }
    }

    /// Adds the first `positions` rows of `other` into `self`.
    pub fn accumulate_prefix(&mut self, other: &KvGrad, positions: usize, d: usize) {
        for (dst, src) in self.k.iter_mut().zip(&other.k) {
            add_into(&mut dst[..positions * d], &src[..positions * d]);
        }
        for (dst, src) in self.v.iter_mut().zip(&other.v) {
            add_into(&mut dst[..positions * d], &src[..positions * d]);
        }
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn add_into(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

/// `out[n, m] = x[n, k] · w[k, m] (+ bias)`.
fn matmul(x: &[f64], n: usize, k: usize, w: &[f64], m: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        if let Some(b) = bias {
            row.copy_from_slice(b);
        }
        for kk in 0..k {
            let xv = x[i * k + kk];
            if xv != 0.0 {
                axpy(xv, &w[kk * m..(kk + 1) * m], row);
            }
        }
    }
    out
}

/// Accumulates gradients of `y = x · w`: `dw += xᵀ dy` and, when requested,
/// `dx += dy · wᵀ`.
#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    x: &[f64],
    n: usize,
    k: usize,
    w: &[f64],
    m: usize,
    dy: &[f64],
    dw: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for i in 0..n {
        let dyi = &dy[i * m..(i + 1) * m];
        for kk in 0..k {
            let xv = x[i * k + kk];
            if xv != 0.0 {
                axpy(xv, dyi, &mut dw[kk * m..(kk + 1) * m]);
            }
        }
    }
    if let Some(dx) = dx {
        for i in 0..n {
            let dyi = &dy[i * m..(i + 1) * m];
            for kk in 0..k {
                dx[i * k + kk] += dot(dyi, &w[kk * m..(kk + 1) * m]);
            }
        }
    }
}

/// Row-wise layer norm. Returns `(y, xhat, rstd)`.
fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, xhat, rstd)
}

/// Back-propagates through a layer norm, accumulating into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    n: usize,
    d: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
            dxhat[j] = dyi[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let r = rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place log-softmax of `row / temperature`.
pub(crate) fn log_softmax_scaled(row: &mut [f64], temperature: f64) {
    for x in row.iter_mut() {
        *x /= temperature;
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

fn block_slice(p: &[f64], off: usize, len: usize) -> &[f64] {
    &p[off..off + len]
}

/// Runs `tokens` through the network at positions `cache.len()..`, appending
/// their keys and values to `cache`.
///
/// With `head_temperature = Some(t)` the output head is evaluated and the
/// result carries log-softmax of `logits / t` for every position. With
/// `save = false` intermediate activations are dropped after use; the
/// returned value then only carries the head output.
pub fn forward_segment(
    params: &PolicyParams,
    tokens: &[TokenId],
    cache: &mut KvCache,
    head_temperature: Option<f64>,
    save: bool,
) -> Result<SegmentActs> {
    let shape = *params.shape();
    let layout = params.layout();
    let p = params.as_slice();
    let (d, f, h_count, hd) = (shape.d_model, shape.d_ff, shape.n_heads, shape.head_dim());
    let n = tokens.len();
    let start = cache.len;
    let end = start + n;
    if end > shape.context {
        return Err(Error::ContextOverflow {
            len: end,
            window: shape.context,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= shape.vocab) {
        return Err(Error::Config(format!("token id {bad} outside vocabulary of {}", shape.vocab)));
    }

    let mut x = vec![0.0; n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(block_slice(p, layout.tok_emb + t as usize * d, d));
        add_into(row, block_slice(p, layout.pos_emb + (start + i) * d, d));
    }

    let mut prob_offsets = Vec::with_capacity(n + 1);
    let mut acc = 0usize;
    for i in 0..n {
        prob_offsets.push(acc);
        acc += h_count * (start + i + 1);
    }
    prob_offsets.push(acc);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut blocks = Vec::with_capacity(if save { shape.n_layers } else { 0 });
    for (l, bl) in layout.blocks.iter().enumerate() {
        let (a1, xhat1, rstd1) = layer_norm(
            &x,
            n,
            d,
            block_slice(p, bl.ln1_g, d),
            block_slice(p, bl.ln1_b, d),
        );
        let q = matmul(&a1, n, d, block_slice(p, bl.wq, d * d), d, None);
        let k = matmul(&a1, n, d, block_slice(p, bl.wk, d * d), d, None);
        let v = matmul(&a1, n, d, block_slice(p, bl.wv, d * d), d, None);
        cache.k[l].extend_from_slice(&k);
        cache.v[l].extend_from_slice(&v);
        let kc = &cache.k[l];
        let vc = &cache.v[l];

        let mut probs = vec![0.0; if save { acc } else { 0 }];
        let mut scratch = vec![0.0; end];
        let mut attn = vec![0.0; n * d];
        for i in 0..n {
            let pos = start + i;
            for h in 0..h_count {
                let qh = &q[i * d + h * hd..i * d + (h + 1) * hd];
                let w = &mut scratch[..=pos];
                let mut max = f64::NEG_INFINITY;
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = dot(qh, &kc[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
                    max = max.max(*wj);
                }
                let mut sum = 0.0;
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    sum += *wj;
                }
                let out = &mut attn[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj /= sum;
                    axpy(*wj, &vc[j * d + h * hd..j * d + (h + 1) * hd], out);
                }
                if save {
                    let off = prob_offsets[i] + h * (pos + 1);
                    probs[off..off + pos + 1].copy_from_slice(w);
                }
            }
        }
        let proj = matmul(&attn, n, d, block_slice(p, bl.wo, d * d), d, None);
        add_into(&mut x, &proj);

        let (a2, xhat2, rstd2) = layer_norm(
            &x,
            n,
            d,
            block_slice(p, bl.ln2_g, d),
            block_slice(p, bl.ln2_b, d),
        );
        let pre = matmul(&a2, n, d, block_slice(p, bl.w1, d * f), f, Some(block_slice(p, bl.b1, f)));
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let mlp = matmul(&act, n, f, block_slice(p, bl.w2, f * d), d, Some(block_slice(p, bl.b2, d)));
        add_into(&mut x, &mlp);

        if save {
            blocks.push(BlockActs {
                xhat1,
                rstd1,
                a1,
                q,
                probs,
                attn,
                xhat2,
                rstd2,
                a2,
                pre,
                act,
            });
        }
    }
    cache.len = end;

    let head = match head_temperature {
        None => None,
        Some(t) => {
            let (out, xhat, rstd) = layer_norm(
                &x,
                n,
                d,
                block_slice(p, layout.lnf_g, d),
                block_slice(p, layout.lnf_b, d),
            );
            let v = shape.vocab;
            let mut logp = matmul(
                &out,
                n,
                d,
                block_slice(p, layout.w_out, d * v),
                v,
                Some(block_slice(p, layout.b_out, v)),
            );
            for i in 0..n {
                let row = &mut logp[i * v..(i + 1) * v];
                if let Some(j) = row.iter().position(|z| !z.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite logit at position {}, token {j}",
                        start + i
                    )));
                }
                log_softmax_scaled(row, t);
            }
            Some(HeadActs {
                xhat,
                rstd,
                out,
                logp,
                temperature: t,
            })
        }
    };

    Ok(SegmentActs {
        start,
        tokens: tokens.to_vec(),
        blocks,
        head,
        prob_offsets,
    })
}

/// Back-propagates one segment.
///
/// `dlogp` holds the gradient of the objective with respect to every entry of
/// the segment's log-probability matrix (`[n, vocab]`), or `None` for a
/// segment whose outputs are not scored. `kv_grad` must cover positions
/// `0..end` of `cache`; rows for this segment's own positions must already
/// contain the contributions of any later segment, and rows for earlier
/// positions receive this segment's contributions.
pub fn backward_segment(
    params: &PolicyParams,
    acts: &SegmentActs,
    cache: &KvCache,
    dlogp: Option<&[f64]>,
    kv_grad: &mut KvGrad,
    grad: &mut [f64],
) -> Result<()> {
    let shape: ModelShape = *params.shape();
    let layout: &Layout = params.layout();
    let p = params.as_slice();
    let (d, f, h_count, hd) = (shape.d_model, shape.d_ff, shape.n_heads, shape.head_dim());
    let n = acts.len();
    let start = acts.start;
    let end = start + n;
    if acts.blocks.len() != shape.n_layers {
        return Err(Error::Config("segment was run without saved activations".into()));
    }
    if grad.len() != p.len() {
        return Err(Error::Dimension {
            what: "gradient buffer",
            expected: p.len(),
            got: grad.len(),
        });
    }
    if cache.len < end {
        return Err(Error::Config("cache does not cover the segment".into()));
    }

    let mut dx = vec![0.0; n * d];
    if let Some(dlogp) = dlogp {
        let head = acts
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("segment was run without an output head".into()))?;
        let v = shape.vocab;
        // d logits from d log-softmax: g - softmax * sum(g), then the 1/T of the scaling.
        let mut dlogits = vec![0.0; n * v];
        for i in 0..n {
            let g = &dlogp[i * v..(i + 1) * v];
            let lp = &head.logp[i * v..(i + 1) * v];
            let total: f64 = g.iter().sum();
            for j in 0..v {
                dlogits[i * v + j] = (g[j] - lp[j].exp() * total) / head.temperature;
            }
        }
        {
            let (before, rest) = grad.split_at_mut(layout.b_out);
            let db_out = &mut rest[..v];
            for i in 0..n {
                add_into(db_out, &dlogits[i * v..(i + 1) * v]);
            }
            let dw_out = &mut before[layout.w_out..layout.w_out + d * v];
            let mut dout = vec![0.0; n * d];
            matmul_backward(
                &head.out,
                n,
                d,
                block_slice(p, layout.w_out, d * v),
                v,
                &dlogits,
                dw_out,
                Some(&mut dout),
            );
            let (dg_part, db_part) = before[layout.lnf_g..layout.lnf_b + d].split_at_mut(d);
            layer_norm_backward(
                &dout,
                &head.xhat,
                &head.rstd,
                block_slice(p, layout.lnf_g, d),
                n,
                d,
                &mut dx,
                dg_part,
                db_part,
            );
        }
    }

    let scale = 1.0 / (hd as f64).sqrt();
    for (l, bl) in layout.blocks.iter().enumerate().rev() {
        let a = &acts.blocks[l];
        let bl: &BlockLayout = bl;

        // Feed-forward sublayer.
        {
            let db2 = &mut grad[bl.b2..bl.b2 + d];
            for i in 0..n {
                add_into(db2, &dx[i * d..(i + 1) * d]);
            }
        }
        let mut dact = vec![0.0; n * f];
        matmul_backward(
            &a.act,
            n,
            f,
            block_slice(p, bl.w2, f * d),
            d,
            &dx,
            &mut grad[bl.w2..bl.w2 + f * d],
            Some(&mut dact),
        );
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&a.pre)
            .map(|(g, &z)| g * gelu_grad(z))
            .collect();
        {
            let db1 = &mut grad[bl.b1..bl.b1 + f];
            for i in 0..n {
                add_into(db1, &dpre[i * f..(i + 1) * f]);
            }
        }
        let mut da2 = vec![0.0; n * d];
        matmul_backward(
            &a.a2,
            n,
            d,
            block_slice(p, bl.w1, d * f),
            f,
            &dpre,
            &mut grad[bl.w1..bl.w1 + d * f],
            Some(&mut da2),
        );
        {
            let (dg, db) = grad[bl.ln2_g..bl.ln2_b + d].split_at_mut(d);
            layer_norm_backward(
                &da2,
                &a.xhat2,
                &a.rstd2,
                block_slice(p, bl.ln2_g, d),
                n,
                d,
                &mut dx,
                dg,
                db,
            );
        }

        // Attention sublayer. `dx` now holds the gradient at the mid residual.
        let mut dattn = vec![0.0; n * d];
        matmul_backward(
            &a.attn,
            n,
            d,
            block_slice(p, bl.wo, d * d),
            d,
            &dx,
            &mut grad[bl.wo..bl.wo + d * d],
            Some(&mut dattn),
        );
        let kc = &cache.k[l];
        let vc = &cache.v[l];
        let mut dq = vec![0.0; n * d];
        let mut dprob = vec![0.0; end];
        {
            let dk_all = &mut kv_grad.k[l];
            let dv_all = &mut kv_grad.v[l];
            for i in 0..n {
                let pos = start + i;
                for h in 0..h_count {
                    let lo = h * hd;
                    let hi = lo + hd;
                    let dout = &dattn[i * d + lo..i * d + hi];
                    let off = acts.prob_offsets[i] + h * (pos + 1);
                    let probs = &a.probs[off..off + pos + 1];
                    let mut weighted = 0.0;
                    for j in 0..=pos {
                        let dp = dot(dout, &vc[j * d + lo..j * d + hi]);
                        dprob[j] = dp;
                        weighted += probs[j] * dp;
                        axpy(probs[j], dout, &mut dv_all[j * d + lo..j * d + hi]);
                    }
                    let qh = &a.q[i * d + lo..i * d + hi];
                    let dqh = &mut dq[i * d + lo..i * d + hi];
                    for j in 0..=pos {
                        let ds = probs[j] * (dprob[j] - weighted) * scale;
                        if ds != 0.0 {
                            axpy(ds, &kc[j * d + lo..j * d + hi], dqh);
                            axpy(ds, qh, &mut dk_all[j * d + lo..j * d + hi]);
                        }
                    }
                }
            }
        }
        let dk_own = &kv_grad.k[l][start * d..end * d];
        let dv_own = &kv_grad.v[l][start * d..end * d];
        let mut da1 = vec![0.0; n * d];
        matmul_backward(
            &a.a1,
            n,
            d,
            block_slice(p, bl.wq, d * d),
            d,
            &dq,
            &mut grad[bl.wq..bl.wq + d * d],
            Some(&mut da1),
        );
        matmul_backward(
            &a.a1,
            n,
            d,
            block_slice(p, bl.wk, d * d),
            d,
            dk_own,
            &mut grad[bl.wk..bl.wk + d * d],
            Some(&mut da1),
        );
        matmul_backward(
            &a.a1,
            n,
            d,
            block_slice(p, bl.wv, d * d),
            d,
            dv_own,
            &mut grad[bl.wv..bl.wv + d * d],
            Some(&mut da1),
        );
        {
            let (dg, db) = grad[bl.ln1_g..bl.ln1_b + d].split_at_mut(d);
            layer_norm_backward(
                &da1,
                &a.xhat1,
                &a.rstd1,
                block_slice(p, bl.ln1_g, d),
                n,
                d,
                &mut dx,
                dg,
                db,
            );
        }
    }

    for (i, &t) in acts.tokens.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        add_into(&mut grad[layout.tok_emb + t as usize * d..][..d], row);
        add_into(&mut grad[layout.pos_emb + (start + i) * d..][..d], row);
    }
    Ok(())
}
