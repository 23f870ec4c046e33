use super::forward::{dot, sigmoid, transpose, Cache, Norm};
use super::{lit, Model, OutputHead, Scalar, Tensor};
use crate::data::Example;
use crate::error::{invalid, Error, Result};

/// Loss at one position, and `d loss / d logits` added into `dlogits` with
/// weight `scale`. Softmax heads use cross-entropy against class `label`;
/// sigmoid heads use the summed binary cross-entropy over the bits of `label`.
fn position_loss<T: Scalar>(head: OutputHead, logits: &[T], label: usize, scale: T, dlogits: Option<&mut [T]>) -> T {
    match head {
        OutputHead::Softmax => {
            let max = logits.iter().fold(T::neg_infinity(), |m, &l| m.max(l));
            let sum = logits.iter().fold(T::zero(), |a, &l| a + (l - max).exp());
            let lse = max + sum.ln();
            if let Some(dl) = dlogits {
                for (o, (g, &l)) in dl.iter_mut().zip(logits).enumerate() {
                    let p = (l - lse).exp();
                    *g += scale * if o == label { p - T::one() } else { p };
                }
            }
            lse - logits[label]
        }
        OutputHead::Sigmoid => {
            let mut total = T::zero();
            let mut dl = dlogits;
            for (o, &z) in logits.iter().enumerate() {
                let y = if label >> o & 1 == 1 { T::one() } else { T::zero() };
                // max(z, 0) - z y + log(1 + exp(-|z|))
                total += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
                if let Some(dl) = dl.as_deref_mut() {
                    dl[o] += scale * (sigmoid(z) - y);
                }
            }
            total
        }
    }
}

fn check_label(head: OutputHead, n_outputs: usize, label: usize) -> Result<()> {
    let ok = match head {
        OutputHead::Softmax => label < n_outputs,
        OutputHead::Sigmoid => label >> n_outputs == 0,
    };
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("label {label} does not fit {n_outputs} outputs")))
    }
}

/// Mean per-position cross-entropy (softmax) or mean per-position-per-bit
/// binary cross-entropy (sigmoid) of one sequence's logits.
pub fn loss<T: Scalar>(head: OutputHead, logits: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(invalid("loss needs one label per logit row"));
    }
    let n_out = logits[0].len();
    let mut total = T::zero();
    for (l, &y) in logits.iter().zip(labels) {
        check_label(head, n_out, y)?;
        total += position_loss(head, l, y, T::zero(), None);
    }
    let per = match head {
        OutputHead::Softmax => 1,
        OutputHead::Sigmoid => n_out,
    };
    Ok(total / lit((labels.len() * per) as f64))
}

/// Mean loss over every position of a batch and its exact gradient with
/// respect to all parameters (same layout as [`Model::params`]).
pub fn batch_gradient<T: Scalar>(model: &Model<T>, batch: &[&Example]) -> Result<(T, Vec<T>)> {
    let c = model.config();
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let positions: usize = batch.iter().map(|e| e.tokens.len()).sum();
    let per = match c.head {
        OutputHead::Softmax => 1,
        OutputHead::Sigmoid => c.n_outputs,
    };
    let scale = T::one() / lit((positions * per) as f64);
    let mut grad = vec![T::zero(); model.params().len()];
    let mut total = T::zero();
    for ex in batch {
        if ex.tokens.len() != ex.labels.len() {
            return Err(invalid("tokens and labels differ in length"));
        }
        model.check_tokens(&ex.tokens)?;
        for &y in &ex.labels {
            check_label(c.head, c.n_outputs, y)?;
        }
        let cache = model.forward_cache(&ex.tokens, 0);
        let o = c.n_outputs;
        let mut dlogits = vec![T::zero(); cache.n * o];
        for (i, &y) in ex.labels.iter().enumerate() {
            total += position_loss(c.head, &cache.logits[i * o..(i + 1) * o], y, scale, Some(&mut dlogits[i * o..(i + 1) * o]));
        }
        backward(model, &cache, &dlogits, &mut grad);
    }
    let mean = total * scale;
    if !mean.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            loss: mean.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok((mean, grad))
}

/// `dW += Σ_i dout[i] ⊗ x[i]`
fn weight_grad<T: Scalar>(dw: &mut [T], dout: &[T], x: &[T], n: usize, rows: usize, cols: usize) {
    T::gemm(rows, n, cols, T::one(), (dout, 1, rows as isize), (x, cols as isize, 1), T::one(), dw, cols as isize);
}

fn bias_grad<T: Scalar>(db: &mut [T], dout: &[T], rows: usize) {
    for chunk in dout.chunks(rows) {
        for (b, &g) in db.iter_mut().zip(chunk) {
            *b += g;
        }
    }
}

/// `dx[i] = Wᵀ dout[i]`
fn input_grad<T: Scalar>(w: &[T], dout: &[T], n: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * cols];
    T::gemm(n, rows, cols, T::one(), (dout, rows as isize, 1), (w, cols as isize, 1), T::zero(), &mut dx, cols as isize);
    dx
}

/// Back through `y = xhat ⊙ gain + bias` and the normalisation; returns dx.
fn norm_backward<T: Scalar>(
    model: &Model<T>,
    grad: &mut [T],
    norm: &Norm<T>,
    dy: &[T],
    gain: Tensor,
    bias: Tensor,
    d: usize,
) -> Vec<T> {
    let layout = model.layout();
    let c = model.config();
    let g = model.tensor(gain);
    {
        let dg = &mut grad[layout.range(c, gain)];
        for (idx, (&dyv, &xh)) in dy.iter().zip(&norm.xhat).enumerate() {
            dg[idx % d] += dyv * xh;
        }
    }
    bias_grad(&mut grad[layout.range(c, bias)], dy, d);

    let inv_d = T::one() / lit::<T>(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (i, r) in norm.rstd.iter().enumerate() {
        let rows = i * d..(i + 1) * d;
        let xh = &norm.xhat[rows.clone()];
        let dxhat: Vec<T> = dy[rows.clone()].iter().zip(g).map(|(&a, &b)| a * b).collect();
        let mean = dxhat.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let mean_x = dxhat.iter().zip(xh).fold(T::zero(), |a, (&v, &x)| a + v * x) * inv_d;
        for k in 0..d {
            dx[i * d + k] = *r * (dxhat[k] - mean - xh[k] * mean_x);
        }
    }
    dx
}

fn backward<T: Scalar>(model: &Model<T>, cache: &Cache<T>, dlogits: &[T], grad: &mut [T]) {
    let c = model.config();
    let layout = model.layout();
    let (n, d, f, o) = (cache.n, c.d_model, c.d_mlp, c.n_outputs);
    let hd = c.head_dim();

    // unembedding and final layer norm
    weight_grad(&mut grad[layout.range(c, Tensor::Unembed)], dlogits, &cache.u, n, o, d);
    bias_grad(&mut grad[layout.range(c, Tensor::UnembedBias)], dlogits, o);
    let du = input_grad(model.tensor(Tensor::Unembed), dlogits, n, o, d);
    let mut dx = norm_backward(model, grad, &cache.lnf, &du, Tensor::LnfGain, Tensor::LnfBias, d);

    // MLP block; dx also flows straight through the residual
    weight_grad(&mut grad[layout.range(c, Tensor::MlpOut)], &dx, &cache.mlp_act, n, d, f);
    bias_grad(&mut grad[layout.range(c, Tensor::MlpOutBias)], &dx, d);
    let mut dpre = input_grad(model.tensor(Tensor::MlpOut), &dx, n, d, f);
    for (g, &pre) in dpre.iter_mut().zip(&cache.mlp_pre) {
        if pre <= T::zero() {
            *g = T::zero();
        }
    }
    weight_grad(&mut grad[layout.range(c, Tensor::MlpIn)], &dpre, &cache.h2, n, f, d);
    bias_grad(&mut grad[layout.range(c, Tensor::MlpInBias)], &dpre, f);
    let dh2 = input_grad(model.tensor(Tensor::MlpIn), &dpre, n, f, d);
    let dx_ln2 = norm_backward(model, grad, &cache.ln2, &dh2, Tensor::Ln2Gain, Tensor::Ln2Bias, d);
    for (a, b) in dx.iter_mut().zip(&dx_ln2) {
        *a += *b;
    }

    // attention block
    weight_grad(&mut grad[layout.range(c, Tensor::AttnOut)], &dx, &cache.z, n, d, d);
    let dz = input_grad(model.tensor(Tensor::AttnOut), &dx, n, d, d);
    let scale = T::one() / lit::<T>(hd as f64).sqrt();
    let mut dq = vec![T::zero(); n * d];
    let mut dkt = vec![T::zero(); d * n];
    let mut dvt = vec![T::zero(); d * n];
    let mut ds = vec![T::zero(); n];
    for h in 0..c.n_heads {
        let off = h * hd;
        for i in 0..n {
            let visible = if c.causal { i + 1 } else { n };
            let row = &cache.attn[(h * n + i) * n..(h * n + i) * n + visible];
            let ds = &mut ds[..visible];
            ds.fill(T::zero());
            for e in 0..hd {
                let g = dz[i * d + off + e];
                let span = (off + e) * n..(off + e) * n + visible;
                for (a, &vj) in ds.iter_mut().zip(&cache.vt[span.clone()]) {
                    *a += g * vj;
                }
                for (dv, &p) in dvt[span].iter_mut().zip(row) {
                    *dv += p * g;
                }
            }
            // softmax backward: dS = A ⊙ (dA - <dA, A>)
            let centre = dot(ds, row);
            for (a, &p) in ds.iter_mut().zip(row) {
                *a = p * (*a - centre) * scale;
            }
            for e in 0..hd {
                let span = (off + e) * n..(off + e) * n + visible;
                dq[i * d + off + e] += dot(ds, &cache.kt[span.clone()]);
                let qe = cache.q[i * d + off + e];
                for (dk, &s) in dkt[span].iter_mut().zip(ds.iter()) {
                    *dk += s * qe;
                }
            }
        }
    }
    let mut dk = transpose(&dkt, d, n);
    let dv = transpose(&dvt, d, n);
    if let Some(r) = &cache.rotary {
        r.apply(&mut dq, n, d, hd, true);
        r.apply(&mut dk, n, d, hd, true);
    }
    let mut dh1 = vec![T::zero(); n * d];
    for (t, dproj) in [(Tensor::Query, &dq), (Tensor::Key, &dk), (Tensor::Value, &dv)] {
        weight_grad(&mut grad[layout.range(c, t)], dproj, &cache.h1, n, d, d);
        for (a, b) in dh1.iter_mut().zip(input_grad(model.tensor(t), dproj, n, d, d)) {
            *a += b;
        }
    }
    let dx_ln1 = norm_backward(model, grad, &cache.ln1, &dh1, Tensor::Ln1Gain, Tensor::Ln1Bias, d);
    for (a, b) in dx.iter_mut().zip(&dx_ln1) {
        *a += *b;
    }

    let de = &mut grad[layout.range(c, Tensor::Embed)];
    for (i, &tok) in cache.tokens.iter().enumerate() {
        for k in 0..d {
            de[tok * d + k] += dx[i * d + k];
        }
    }
}
