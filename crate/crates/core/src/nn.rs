//! Forward pass with activation cache, and the matching reverse pass.
//!
//! The reverse pass always propagates activation gradients through the whole
//! network; weight gradients are accumulated only for the parameter sets the
//! caller asks for (adapter matrices, base weights, or both).

use crate::adapters::{LoraAdapter, LoraModule, Target};
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::tensor::{gemm, Matrix, Real, View, ViewMut};
use crate::tokenizer::TokenId;

const LN_EPS: f64 = 1e-5;

pub(crate) fn check_inputs<F: Real>(
    w: &ModelWeights<F>,
    adapter: Option<&LoraAdapter<F>>,
    tokens: &[TokenId],
) -> Result<()> {
    if tokens.len() > w.config.max_seq_len {
        return Err(Error::data(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            w.config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= w.config.vocab_size) {
        return Err(Error::data(format!("token id {bad} outside vocabulary of {}", w.config.vocab_size)));
    }
    if let Some(a) = adapter {
        a.check_compatible(&w.config)?;
    }
    Ok(())
}

struct LnCache<F> {
    xhat: Matrix<F>,
    rstd: Vec<F>,
}

fn layer_norm<F: Real>(x: &Matrix<F>, gain: &Matrix<F>, bias: &Matrix<F>) -> (Matrix<F>, LnCache<F>) {
    let d = x.cols;
    let n = F::of(d as f64);
    let eps = F::of(LN_EPS);
    let mut y = Matrix::zeros(x.rows, d);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xh[c] * gain.data[c] + bias.data[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates into `dx`, and into `dgain`/`dbias` when given.
fn layer_norm_backward<F: Real>(
    dy: &Matrix<F>,
    cache: &LnCache<F>,
    gain: &Matrix<F>,
    dx: &mut Matrix<F>,
    mut dparams: Option<(&mut Matrix<F>, &mut Matrix<F>)>,
) {
    let d = dy.cols;
    let n = F::of(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        if let Some((dg, db)) = dparams.as_mut() {
            for c in 0..d {
                dg.data[c] += dyr[c] * xh[c];
                db.data[c] += dyr[c];
            }
        }
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for c in 0..d {
            dxhat[c] = dyr[c] * gain.data[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d /= n;
        mean_dx /= n;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] += rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn gelu<F: Real>(u: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    half * u * (F::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * u * u)
}

/// `y = x Wᵀ (+ s (x Aᵀ) Bᵀ)`; also returns `x Aᵀ` for the reverse pass.
fn linear<F: Real>(x: &Matrix<F>, w: &Matrix<F>, lora: Option<(&LoraModule<F>, F)>) -> (Matrix<F>, Option<Matrix<F>>) {
    let mut y = Matrix::zeros(x.rows, w.rows);
    gemm(F::one(), x.view(), w.view().t(), F::zero(), y.view_mut());
    let xa = lora.map(|(m, s)| {
        let mut xa = Matrix::zeros(x.rows, m.a.rows);
        gemm(F::one(), x.view(), m.a.view().t(), F::zero(), xa.view_mut());
        gemm(s, xa.view(), m.b.view().t(), F::one(), y.view_mut());
        xa
    });
    (y, xa)
}

struct LinearGrads<'a, F> {
    dw: Option<&'a mut Matrix<F>>,
    lora: Option<(&'a mut Matrix<F>, &'a mut Matrix<F>)>,
}

#[allow(clippy::too_many_arguments)]
fn linear_backward<F: Real>(
    dy: &Matrix<F>,
    x: &Matrix<F>,
    w: &Matrix<F>,
    lora: Option<(&LoraModule<F>, F)>,
    xa: Option<&Matrix<F>>,
    dx: &mut Matrix<F>,
    grads: LinearGrads<'_, F>,
) {
    gemm(F::one(), dy.view(), w.view(), F::one(), dx.view_mut());
    if let Some(dw) = grads.dw {
        gemm(F::one(), dy.view().t(), x.view(), F::one(), dw.view_mut());
    }
    if let Some((m, s)) = lora {
        // dxa = s · dy B
        let mut dxa = Matrix::zeros(dy.rows, m.b.cols);
        gemm(s, dy.view(), m.b.view(), F::zero(), dxa.view_mut());
        gemm(F::one(), dxa.view(), m.a.view(), F::one(), dx.view_mut());
        if let Some((da, db)) = grads.lora {
            let xa = xa.expect("lora forward cached x Aᵀ");
            gemm(s, dy.view().t(), xa.view(), F::one(), db.view_mut());
            gemm(F::one(), dxa.view().t(), x.view(), F::one(), da.view_mut());
        }
    }
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    h1: Matrix<F>,
    q: Matrix<F>,
    k: Matrix<F>,
    v: Matrix<F>,
    /// `n_heads` row-major `T × T` attention matrices, concatenated.
    probs: Vec<F>,
    ctx: Matrix<F>,
    ln2: LnCache<F>,
    h2: Matrix<F>,
    up: Matrix<F>,
    act: Matrix<F>,
    /// `x Aᵀ` per target, indexed by `Target as usize`.
    lora_xa: [Option<Matrix<F>>; 6],
}

pub(crate) struct Cache<F> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    hf: Matrix<F>,
}

fn target_index(t: Target) -> usize {
    t as usize
}

fn lora_for<'a, F: Real>(
    adapter: Option<&'a LoraAdapter<F>>,
    layer: usize,
    target: Target,
) -> Option<(&'a LoraModule<F>, F)> {
    adapter.and_then(|a| a.module(layer, target).map(|m| (m, a.scale())))
}

/// Causal self-attention over all heads; returns `(ctx, probs)`.
fn attention<F: Real>(q: &Matrix<F>, k: &Matrix<F>, v: &Matrix<F>, n_heads: usize) -> (Matrix<F>, Vec<F>) {
    let (t, d) = (q.rows, q.cols);
    let hd = d / n_heads;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let mut probs = vec![F::zero(); n_heads * t * t];
    let mut ctx = Matrix::zeros(t, d);
    for h in 0..n_heads {
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        let scores = ViewMut {
            data: &mut *p,
            rows: t,
            cols: t,
            rs: t,
            cs: 1,
        };
        gemm(
            scale,
            View::cols_of(&q.data, t, d, h * hd, hd),
            View::cols_of(&k.data, t, d, h * hd, hd).t(),
            F::zero(),
            scores,
        );
        for i in 0..t {
            let row = &mut p[i * t..(i + 1) * t];
            let max = row[..=i].iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in row[..=i].iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row[..=i].iter_mut() {
                *x /= sum;
            }
            for x in row[i + 1..].iter_mut() {
                *x = F::zero();
            }
        }
        gemm(
            F::one(),
            View {
                data: &*p,
                rows: t,
                cols: t,
                rs: t,
                cs: 1,
            },
            View::cols_of(&v.data, t, d, h * hd, hd),
            F::zero(),
            ViewMut::cols_of(&mut ctx.data, t, d, h * hd, hd),
        );
    }
    (ctx, probs)
}

/// Returns logits `[T, vocab]`; the cache is populated only when `keep` is set.
pub(crate) fn forward<F: Real>(
    w: &ModelWeights<F>,
    adapter: Option<&LoraAdapter<F>>,
    tokens: &[TokenId],
    keep: bool,
) -> (Matrix<F>, Option<Cache<F>>) {
    let cfg = &w.config;
    let (t, d) = (tokens.len(), cfg.d_model);
    let mut x = Matrix::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        let te = w.tok_emb.row(tok as usize);
        let pe = w.pos_emb.row(i);
        for c in 0..d {
            row[c] = te[c] + pe[c];
        }
    }
    let mut layers = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });
    for (li, lw) in w.layers.iter().enumerate() {
        let (h1, ln1) = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias);
        let mut lora_xa: [Option<Matrix<F>>; 6] = Default::default();
        let mut proj = |target: Target, input: &Matrix<F>, weight: &Matrix<F>| {
            let (y, xa) = linear(input, weight, lora_for(adapter, li, target));
            lora_xa[target_index(target)] = xa;
            y
        };
        let q = proj(Target::Query, &h1, &lw.query);
        let k = proj(Target::Key, &h1, &lw.key);
        let v = proj(Target::Value, &h1, &lw.value);
        let (ctx, probs) = attention(&q, &k, &v, cfg.n_heads);
        let o = proj(Target::Output, &ctx, &lw.output);
        let mut x_mid = x.clone();
        x_mid.data.iter_mut().zip(&o.data).for_each(|(a, &b)| *a += b);
        let (h2, ln2) = layer_norm(&x_mid, &lw.ln2_gain, &lw.ln2_bias);
        let up = proj(Target::FfnUp, &h2, &lw.ffn_up);
        let mut act = up.clone();
        act.data.iter_mut().for_each(|u| *u = gelu(*u));
        let down = proj(Target::FfnDown, &act, &lw.ffn_down);
        let mut x_out = x_mid.clone();
        x_out.data.iter_mut().zip(&down.data).for_each(|(a, &b)| *a += b);
        x = x_out;
        if keep {
            layers.push(LayerCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                h2,
                up,
                act,
                lora_xa,
            });
        }
    }
    let (hf, lnf) = layer_norm(&x, &w.lnf_gain, &w.lnf_bias);
    let mut logits = Matrix::zeros(t, cfg.vocab_size);
    gemm(F::one(), hf.view(), w.head.view().t(), F::zero(), logits.view_mut());
    let cache = keep.then(|| Cache {
        tokens: tokens.to_vec(),
        layers,
        lnf,
        hf,
    });
    (logits, cache)
}

/// Which weight gradients to accumulate.
pub(crate) struct GradSink<'a, F> {
    pub base: Option<&'a mut ModelWeights<F>>,
    /// Shaped like the adapter; `a`/`b` receive dL/dA and dL/dB.
    pub adapter: Option<&'a mut LoraAdapter<F>>,
}

fn lora_grads<'a, F: Real>(
    sink: &'a mut Option<&mut LoraAdapter<F>>,
    layer: usize,
    target: Target,
) -> Option<(&'a mut Matrix<F>, &'a mut Matrix<F>)> {
    sink.as_mut().and_then(|g| {
        g.modules
            .iter_mut()
            .find(|m| m.layer == layer && m.target == target)
            .map(|m| (&mut m.a, &mut m.b))
    })
}

/// Reverse pass from `dlogits` (dL/dlogits, `[T, vocab]`).
pub(crate) fn backward<F: Real>(
    w: &ModelWeights<F>,
    adapter: Option<&LoraAdapter<F>>,
    cache: &Cache<F>,
    dlogits: &Matrix<F>,
    sink: GradSink<'_, F>,
) {
    let cfg = &w.config;
    let (t, d) = (cache.tokens.len(), cfg.d_model);
    let GradSink { mut base, adapter: mut adapter_grads } = sink;

    let mut dhf = Matrix::zeros(t, d);
    gemm(F::one(), dlogits.view(), w.head.view(), F::zero(), dhf.view_mut());
    if let Some(g) = base.as_mut() {
        gemm(F::one(), dlogits.view().t(), cache.hf.view(), F::one(), g.head.view_mut());
    }
    let mut dx = Matrix::zeros(t, d);
    layer_norm_backward(
        &dhf,
        &cache.lnf,
        &w.lnf_gain,
        &mut dx,
        base.as_mut().map(|g| (&mut g.lnf_gain, &mut g.lnf_bias)),
    );

    for li in (0..cfg.n_layers).rev() {
        let lw = &w.layers[li];
        let c = &cache.layers[li];
        let mut gl = base.as_mut().map(|g| &mut g.layers[li]);

        // Feed-forward block: x_out = x_mid + down(gelu(up(ln2(x_mid))))
        let mut dact = Matrix::zeros(t, cfg.d_ff);
        linear_backward(
            &dx,
            &c.act,
            &lw.ffn_down,
            lora_for(adapter, li, Target::FfnDown),
            c.lora_xa[target_index(Target::FfnDown)].as_ref(),
            &mut dact,
            LinearGrads {
                dw: gl.as_mut().map(|g| &mut g.ffn_down),
                lora: lora_grads(&mut adapter_grads, li, Target::FfnDown),
            },
        );
        dact.data.iter_mut().zip(&c.up.data).for_each(|(g, &u)| *g *= gelu_grad(u));
        let mut dh2 = Matrix::zeros(t, d);
        linear_backward(
            &dact,
            &c.h2,
            &lw.ffn_up,
            lora_for(adapter, li, Target::FfnUp),
            c.lora_xa[target_index(Target::FfnUp)].as_ref(),
            &mut dh2,
            LinearGrads {
                dw: gl.as_mut().map(|g| &mut g.ffn_up),
                lora: lora_grads(&mut adapter_grads, li, Target::FfnUp),
            },
        );
        // dx already holds the residual path; add the LN2 branch.
        layer_norm_backward(
            &dh2,
            &c.ln2,
            &lw.ln2_gain,
            &mut dx,
            gl.as_mut().map(|g| (&mut g.ln2_gain, &mut g.ln2_bias)),
        );

        // Attention block: x_mid = x_in + out(attn(q, k, v))
        let mut dctx = Matrix::zeros(t, d);
        linear_backward(
            &dx,
            &c.ctx,
            &lw.output,
            lora_for(adapter, li, Target::Output),
            c.lora_xa[target_index(Target::Output)].as_ref(),
            &mut dctx,
            LinearGrads {
                dw: gl.as_mut().map(|g| &mut g.output),
                lora: lora_grads(&mut adapter_grads, li, Target::Output),
            },
        );
        let (dq, dk, dv) = attention_backward(&dctx, c, cfg.n_heads);
        let mut dh1 = Matrix::zeros(t, d);
        for (target, dy, weight) in [
            (Target::Query, &dq, &lw.query),
            (Target::Key, &dk, &lw.key),
            (Target::Value, &dv, &lw.value),
        ] {
            let dw = gl.as_mut().map(|g| match target {
                Target::Query => &mut g.query,
                Target::Key => &mut g.key,
                _ => &mut g.value,
            });
            linear_backward(
                dy,
                &c.h1,
                weight,
                lora_for(adapter, li, target),
                c.lora_xa[target_index(target)].as_ref(),
                &mut dh1,
                LinearGrads {
                    dw,
                    lora: lora_grads(&mut adapter_grads, li, target),
                },
            );
        }
        layer_norm_backward(
            &dh1,
            &c.ln1,
            &lw.ln1_gain,
            &mut dx,
            gl.as_mut().map(|g| (&mut g.ln1_gain, &mut g.ln1_bias)),
        );
    }

    if let Some(g) = base.as_mut() {
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let dr = dx.row(i);
            let te = g.tok_emb.row_mut(tok as usize);
            for c in 0..d {
                te[c] += dr[c];
            }
            let pe = g.pos_emb.row_mut(i);
            for c in 0..d {
                pe[c] += dr[c];
            }
        }
    }
}

fn attention_backward<F: Real>(dctx: &Matrix<F>, c: &LayerCache<F>, n_heads: usize) -> (Matrix<F>, Matrix<F>, Matrix<F>) {
    let (t, d) = (dctx.rows, dctx.cols);
    let hd = d / n_heads;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    let mut dp = vec![F::zero(); t * t];
    for h in 0..n_heads {
        let p = &c.probs[h * t * t..(h + 1) * t * t];
        let pv = View {
            data: p,
            rows: t,
            cols: t,
            rs: t,
            cs: 1,
        };
        let dctx_h = View::cols_of(&dctx.data, t, d, h * hd, hd);
        // dP = dctx_h v_hᵀ
        gemm(
            F::one(),
            dctx_h,
            View::cols_of(&c.v.data, t, d, h * hd, hd).t(),
            F::zero(),
            ViewMut {
                data: &mut dp,
                rows: t,
                cols: t,
                rs: t,
                cs: 1,
            },
        );
        // dv_h = Pᵀ dctx_h
        gemm(F::one(), pv.t(), dctx_h, F::zero(), ViewMut::cols_of(&mut dv.data, t, d, h * hd, hd));
        // softmax backward, in place: dS = P ⊙ (dP − rowsum(P ⊙ dP))
        for i in 0..t {
            let prow = &p[i * t..(i + 1) * t];
            let drow = &mut dp[i * t..(i + 1) * t];
            let dot: F = prow[..=i].iter().zip(&drow[..=i]).map(|(&a, &b)| a * b).sum();
            for j in 0..=i {
                drow[j] = prow[j] * (drow[j] - dot);
            }
            for x in drow[i + 1..].iter_mut() {
                *x = F::zero();
            }
        }
        let ds = View {
            data: &dp,
            rows: t,
            cols: t,
            rs: t,
            cs: 1,
        };
        gemm(
            scale,
            ds,
            View::cols_of(&c.k.data, t, d, h * hd, hd),
            F::zero(),
            ViewMut::cols_of(&mut dq.data, t, d, h * hd, hd),
        );
        gemm(
            scale,
            ds.t(),
            View::cols_of(&c.q.data, t, d, h * hd, hd),
            F::zero(),
            ViewMut::cols_of(&mut dk.data, t, d, h * hd, hd),
        );
    }
    (dq, dk, dv)
}

/// Mean cross-entropy (nats) of `logits[i]` against `targets[i]`, skipping
/// `None` targets. Returns `(loss, dL/dlogits)`.
pub(crate) fn cross_entropy<F: Real>(logits: &Matrix<F>, targets: &[Option<TokenId>]) -> Result<(f64, Matrix<F>)> {
    assert_eq!(logits.rows, targets.len());
    let n = targets.iter().filter(|t| t.is_some()).count();
    if n == 0 {
        return Err(Error::data("every target position is masked"));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (i, target) in targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        let row = logits.row(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max).as_f64();
        let sum: f64 = row.iter().map(|&l| (l.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[target as usize].as_f64();
        let g = grad.row_mut(i);
        for (c, &l) in row.iter().enumerate() {
            g[c] = F::of((l.as_f64() - lse).exp() * inv_n);
        }
        g[target as usize] -= F::of(inv_n);
    }
    Ok((loss * inv_n, grad))
}
