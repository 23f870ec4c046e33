use super::{lit, Model, OutputHead, Scalar, Tensor, LAYER_NORM_EPS};
use crate::automata::Symbol;
use crate::error::{invalid, Result};

/// Activations recorded during one forward pass over `n` positions.
#[derive(Clone, Debug)]
pub struct ActivationTrace<T> {
    /// Final-layer-norm outputs before the gain and bias, `n × d`.
    pub t: Vec<Vec<T>>,
    /// Attention weights per head, `heads × n × n`, row = query position.
    pub attention: Vec<Vec<Vec<T>>>,
    pub logits: Vec<Vec<T>>,
    /// Softmax distributions or per-bit sigmoid probabilities.
    pub probs: Vec<Vec<T>>,
}

/// Layer norm without affine: `xhat = (x - mean) / sqrt(var + eps)`.
pub(crate) struct Norm<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], n: usize, d: usize) -> Norm<T> {
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::one() / lit::<T>(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let r = T::one() / (var + lit(LAYER_NORM_EPS)).sqrt();
        rstd[i] = r;
        for k in 0..d {
            xhat[i * d + k] = (row[k] - mean) * r;
        }
    }
    Norm { xhat, rstd }
}

fn scale_shift<T: Scalar>(xhat: &[T], gain: &[T], bias: &[T], d: usize) -> Vec<T> {
    xhat.iter()
        .enumerate()
        .map(|(idx, &v)| v * gain[idx % d] + bias[idx % d])
        .collect()
}

/// `out[i] = W x[i] + b` for each of `n` rows; `W` is `rows × cols`.
pub(crate) fn affine<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * rows];
    if let Some(b) = b {
        for row in out.chunks_mut(rows) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(n, cols, rows, T::one(), (x, cols as isize, 1), (w, 1, cols as isize), beta, &mut out, rows as isize);
    out
}

/// Transposes a row-major `rows × cols` block.
pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order so results are reproducible.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let split = a.len() - a.len() % 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a[split..].iter().zip(&b[split..]) {
        tail += x * y;
    }
    let s4 = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (s4[0] + s4[2]) + (s4[1] + s4[3]) + tail
}

/// Rotation tables: `cos/sin[p * half + j]` for position `p` and pair `j`.
pub(crate) struct Rotary<T> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
    pub half: usize,
}

impl<T: Scalar> Rotary<T> {
    pub fn new(n: usize, head_dim: usize, base: f64, offset: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for p in 0..n {
            for j in 0..half {
                let theta = base.powf(-2.0 * j as f64 / head_dim as f64);
                let angle = (p + offset) as f64 * theta;
                cos.push(lit(angle.cos()));
                sin.push(lit(angle.sin()));
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates adjacent pairs of every head in an `n × d` block; `inverse`
    /// applies the transpose.
    pub fn apply(&self, x: &mut [T], n: usize, d: usize, head_dim: usize, inverse: bool) {
        for p in 0..n {
            for h in 0..d / head_dim {
                for j in 0..self.half {
                    let c = self.cos[p * self.half + j];
                    let s = if inverse { -self.sin[p * self.half + j] } else { self.sin[p * self.half + j] };
                    let a = p * d + h * head_dim + 2 * j;
                    let (x0, x1) = (x[a], x[a + 1]);
                    x[a] = x0 * c - x1 * s;
                    x[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Everything the backward pass needs from one sequence.
pub(crate) struct Cache<T> {
    pub n: usize,
    pub tokens: Vec<usize>,
    pub ln1: Norm<T>,
    pub h1: Vec<T>,
    pub q: Vec<T>,
    /// Rotated keys and values transposed to `d × n`.
    pub kt: Vec<T>,
    pub vt: Vec<T>,
    pub attn: Vec<T>,
    pub z: Vec<T>,
    pub ln2: Norm<T>,
    pub h2: Vec<T>,
    pub mlp_pre: Vec<T>,
    pub mlp_act: Vec<T>,
    pub lnf: Norm<T>,
    pub u: Vec<T>,
    pub logits: Vec<T>,
    pub rotary: Option<Rotary<T>>,
}

impl<T: Scalar> Model<T> {
    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("cannot run the model on an empty token sequence"));
        }
        let v = self.config.vocab_size();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(invalid(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        Ok(())
    }

    pub(crate) fn forward_cache(&self, tokens: &[usize], offset: usize) -> Cache<T> {
        let c = &self.config;
        let (n, d, f, o) = (tokens.len(), c.d_model, c.d_mlp, c.n_outputs);
        let hd = c.head_dim();
        let embed = self.tensor(Tensor::Embed);

        let mut x = Vec::with_capacity(n * d);
        for &tok in tokens {
            x.extend_from_slice(&embed[tok * d..(tok + 1) * d]);
        }

        let ln1 = layer_norm(&x, n, d);
        let h1 = scale_shift(&ln1.xhat, self.tensor(Tensor::Ln1Gain), self.tensor(Tensor::Ln1Bias), d);
        let mut q = affine(&h1, self.tensor(Tensor::Query), None, n, d, d);
        let mut k = affine(&h1, self.tensor(Tensor::Key), None, n, d, d);
        let v = affine(&h1, self.tensor(Tensor::Value), None, n, d, d);
        let rotary = c.rotary.then(|| Rotary::new(n, hd, c.rotary_base, offset));
        if let Some(r) = &rotary {
            r.apply(&mut q, n, d, hd, false);
            r.apply(&mut k, n, d, hd, false);
        }

        let kt = transpose(&k, n, d);
        let vt = transpose(&v, n, d);
        let scale = T::one() / lit::<T>(hd as f64).sqrt();
        let mut attn = vec![T::zero(); c.n_heads * n * n];
        let mut z = vec![T::zero(); n * d];
        for h in 0..c.n_heads {
            let off = h * hd;
            for i in 0..n {
                let visible = if c.causal { i + 1 } else { n };
                let row = &mut attn[(h * n + i) * n..(h * n + i) * n + visible];
                for e in 0..hd {
                    let qe = q[i * d + off + e] * scale;
                    let kr = &kt[(off + e) * n..(off + e) * n + visible];
                    for (s, &kv) in row.iter_mut().zip(kr) {
                        *s += qe * kv;
                    }
                }
                let max = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
                let mut sum = T::zero();
                for a in row.iter_mut() {
                    *a = (*a - max).exp();
                    sum += *a;
                }
                let inv = T::one() / sum;
                for a in row.iter_mut() {
                    *a *= inv;
                }
                for e in 0..hd {
                    z[i * d + off + e] = dot(row, &vt[(off + e) * n..(off + e) * n + visible]);
                }
            }
        }
        let attn_out = affine(&z, self.tensor(Tensor::AttnOut), None, n, d, d);
        for (xi, ai) in x.iter_mut().zip(&attn_out) {
            *xi += *ai;
        }

        let ln2 = layer_norm(&x, n, d);
        let h2 = scale_shift(&ln2.xhat, self.tensor(Tensor::Ln2Gain), self.tensor(Tensor::Ln2Bias), d);
        let mlp_pre = affine(&h2, self.tensor(Tensor::MlpIn), Some(self.tensor(Tensor::MlpInBias)), n, f, d);
        let mlp_act: Vec<T> = mlp_pre.iter().map(|&a| a.max(T::zero())).collect();
        let mlp_out = affine(&mlp_act, self.tensor(Tensor::MlpOut), Some(self.tensor(Tensor::MlpOutBias)), n, d, f);
        for (xi, mi) in x.iter_mut().zip(&mlp_out) {
            *xi += *mi;
        }

        let lnf = layer_norm(&x, n, d);
        let u = scale_shift(&lnf.xhat, self.tensor(Tensor::LnfGain), self.tensor(Tensor::LnfBias), d);
        let logits = affine(&u, self.tensor(Tensor::Unembed), Some(self.tensor(Tensor::UnembedBias)), n, o, d);

        Cache {
            n,
            tokens: tokens.to_vec(),
            ln1,
            h1,
            q,
            kt,
            vt,
            attn,
            z,
            ln2,
            h2,
            mlp_pre,
            mlp_act,
            lnf,
            u,
            logits,
            rotary,
        }
    }

    /// Runs the model on token ids (the caller supplies the
    /// beginning-of-sequence token) and records the activations.
    pub fn forward(&self, tokens: &[usize]) -> Result<ActivationTrace<T>> {
        self.forward_at(tokens, 0)
    }

    /// Like [`Model::forward`] with every position shifted by `offset` for
    /// the rotary encoding.
    pub fn forward_at(&self, tokens: &[usize], offset: usize) -> Result<ActivationTrace<T>> {
        self.check_tokens(tokens)?;
        let cache = self.forward_cache(tokens, offset);
        let (n, d, o) = (cache.n, self.config.d_model, self.config.n_outputs);
        let rows = |v: &[T], w: usize| v.chunks(w).map(<[T]>::to_vec).collect::<Vec<_>>();
        let logits = rows(&cache.logits, o);
        let probs = logits.iter().map(|l| probabilities(self.config.head, l)).collect();
        let attention = (0..self.config.n_heads)
            .map(|h| rows(&cache.attn[h * n * n..(h + 1) * n * n], n))
            .collect();
        Ok(ActivationTrace {
            t: rows(&cache.lnf.xhat, d),
            attention,
            logits,
            probs,
        })
    }

    /// Output symbol at every position for a word (the beginning-of-sequence
    /// token is prepended), `|word| + 1` entries.
    pub fn predict(&self, word: &[Symbol]) -> Result<Vec<usize>> {
        let trace = self.forward(&self.with_bos(word))?;
        Ok(trace.probs.iter().map(|p| super::decode(self.config.head, p)).collect())
    }

    /// Normalised final-layer activation after reading `word`, as f64.
    pub fn state_vector(&self, word: &[Symbol]) -> Result<Vec<f64>> {
        let tokens = self.with_bos(word);
        self.check_tokens(&tokens)?;
        let cache = self.forward_cache(&tokens, 0);
        let d = self.config.d_model;
        Ok(cache.lnf.xhat[(cache.n - 1) * d..]
            .iter()
            .map(|x| x.to_f64().expect("finite"))
            .collect())
    }

    pub fn with_bos(&self, word: &[Symbol]) -> Vec<usize> {
        let mut tokens = Vec::with_capacity(word.len() + 1);
        tokens.push(self.config.bos());
        tokens.extend_from_slice(word);
        tokens
    }
}

pub(crate) fn probabilities<T: Scalar>(head: OutputHead, logits: &[T]) -> Vec<T> {
    match head {
        OutputHead::Softmax => {
            let max = logits.iter().fold(T::neg_infinity(), |m, &l| m.max(l));
            let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
            let sum = exps.iter().fold(T::zero(), |a, &e| a + e);
            exps.into_iter().map(|e| e / sum).collect()
        }
        OutputHead::Sigmoid => logits.iter().map(|&l| sigmoid(l)).collect(),
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
