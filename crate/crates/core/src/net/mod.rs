//! A one-layer pre-norm transformer with rotary attention, written out by
//! hand: forward pass with activation tracing, exact gradients, Adam and an
//! early-stopping training loop.

mod checkpoint;
mod forward;
mod grad;
mod train;

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::languages::{LanguageSpec, TaskKind};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelMeta};
pub use forward::ActivationTrace;
pub use grad::{batch_gradient, loss};
pub use train::{train, Adam, EpochRecord, Hyper, TrainResult};

/// Floating-point type the network can run in (f32 for training, f64 for
/// gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// `C = alpha A B + beta C` for an `m × k` by `k × n` product, with
    /// explicit row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: &mut [Self], rsc: isize);
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
        assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "matrix view out of bounds");
    }
}

macro_rules! scalar_impl {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: &mut [Self], rsc: isize) {
                check_extent(a.0.len(), m, k, a.1, a.2);
                check_extent(b.0.len(), k, n, b.1, b.2);
                check_extent(c.len(), m, n, rsc, 1);
                // SAFETY: every view was bounds-checked above and `c` does not
                // alias the inputs because it is borrowed mutably.
                unsafe {
                    $gemm(m, k, n, alpha, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), rsc, 1);
                }
            }
        }
    };
}

scalar_impl!(f32, matrixmultiply::sgemm);
scalar_impl!(f64, matrixmultiply::dgemm);

#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// How the final logits are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    /// One softmax over the output alphabet.
    Softmax,
    /// Independent sigmoids, one per bit of a validity bitmask.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    /// Input alphabet size; the beginning-of-sequence token gets id `n_symbols`.
    pub n_symbols: usize,
    /// Number of classes (softmax) or bits (sigmoid).
    pub n_outputs: usize,
    pub head: OutputHead,
    pub rotary: bool,
    pub rotary_base: f64,
    pub causal: bool,
}

impl ModelConfig {
    pub fn new(n_symbols: usize, n_outputs: usize, head: OutputHead) -> Self {
        Self {
            d_model: 16,
            n_heads: 4,
            d_mlp: 64,
            n_symbols,
            n_outputs,
            head,
            rotary: true,
            rotary_base: 10_000.0,
            causal: true,
        }
    }

    /// Default architecture sized for a language and task.
    pub fn for_task(language: LanguageSpec, task: TaskKind) -> Result<Self> {
        let machine = crate::languages::target_machine(language, task)?;
        let k = machine.alphabet().len();
        Ok(match task {
            TaskKind::NextChar => Self::new(k, k + 1, OutputHead::Sigmoid),
            _ => Self::new(k, machine.output_alphabet().len(), OutputHead::Softmax),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.n_symbols + 1
    }

    pub fn bos(&self) -> usize {
        self.n_symbols
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(invalid("head dimension must be even for rotary pairs"));
        }
        if self.n_symbols == 0 || self.n_outputs == 0 {
            return Err(invalid("alphabets must be nonempty"));
        }
        if self.head == OutputHead::Sigmoid && self.n_outputs >= usize::BITS as usize {
            return Err(invalid("too many output bits"));
        }
        if !(self.rotary_base > 0.0 && self.rotary_base.is_finite()) {
            return Err(invalid("rotary_base must be positive"));
        }
        Ok(())
    }
}

/// Named parameter tensors, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tensor {
    Embed,
    Ln1Gain,
    Ln1Bias,
    Query,
    Key,
    Value,
    AttnOut,
    Ln2Gain,
    Ln2Bias,
    MlpIn,
    MlpInBias,
    MlpOut,
    MlpOutBias,
    LnfGain,
    LnfBias,
    Unembed,
    UnembedBias,
}

impl Tensor {
    pub const ALL: [Tensor; 17] = [
        Tensor::Embed,
        Tensor::Ln1Gain,
        Tensor::Ln1Bias,
        Tensor::Query,
        Tensor::Key,
        Tensor::Value,
        Tensor::AttnOut,
        Tensor::Ln2Gain,
        Tensor::Ln2Bias,
        Tensor::MlpIn,
        Tensor::MlpInBias,
        Tensor::MlpOut,
        Tensor::MlpOutBias,
        Tensor::LnfGain,
        Tensor::LnfBias,
        Tensor::Unembed,
        Tensor::UnembedBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::Embed => "embed",
            Tensor::Ln1Gain => "ln1_gain",
            Tensor::Ln1Bias => "ln1_bias",
            Tensor::Query => "w_query",
            Tensor::Key => "w_key",
            Tensor::Value => "w_value",
            Tensor::AttnOut => "w_attn_out",
            Tensor::Ln2Gain => "ln2_gain",
            Tensor::Ln2Bias => "ln2_bias",
            Tensor::MlpIn => "mlp_in",
            Tensor::MlpInBias => "mlp_in_bias",
            Tensor::MlpOut => "mlp_out",
            Tensor::MlpOutBias => "mlp_out_bias",
            Tensor::LnfGain => "lnf_gain",
            Tensor::LnfBias => "lnf_bias",
            Tensor::Unembed => "unembed",
            Tensor::UnembedBias => "unembed_bias",
        }
    }

    /// Row-major shape `[rows, cols]` (vectors have one row).
    pub fn shape(self, c: &ModelConfig) -> [usize; 2] {
        let d = c.d_model;
        match self {
            Tensor::Embed => [c.vocab_size(), d],
            Tensor::Query | Tensor::Key | Tensor::Value | Tensor::AttnOut => [d, d],
            Tensor::MlpIn => [c.d_mlp, d],
            Tensor::MlpInBias => [1, c.d_mlp],
            Tensor::MlpOut => [d, c.d_mlp],
            Tensor::Unembed => [c.n_outputs, d],
            Tensor::UnembedBias => [1, c.n_outputs],
            _ => [1, d],
        }
    }

    pub fn len(self, c: &ModelConfig) -> usize {
        let [r, k] = self.shape(c);
        r * k
    }

    fn is_weight_matrix(self) -> bool {
        matches!(
            self,
            Tensor::Query | Tensor::Key | Tensor::Value | Tensor::AttnOut | Tensor::MlpIn | Tensor::MlpOut | Tensor::Unembed
        )
    }
}

/// Offsets of every tensor within the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Layout {
    offsets: [usize; 17],
    total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut offsets = [0; 17];
        let mut total = 0;
        for (i, t) in Tensor::ALL.iter().enumerate() {
            offsets[i] = total;
            total += t.len(c);
        }
        Self { offsets, total }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, c: &ModelConfig, t: Tensor) -> std::ops::Range<usize> {
        let start = self.offsets[t as usize];
        start..start + t.len(c)
    }
}

/// Configuration plus a flat parameter vector laid out by [`Layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    params: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialised model: embeddings ~ N(0, 1/√d), weight matrices
    /// and biases ~ U(±1/√fan_in), layer norms at identity.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f64;
        let embed = Normal::new(0.0, 1.0 / d.sqrt()).expect("valid std");
        for t in Tensor::ALL {
            let slot = &mut params[layout.range(&config, t)];
            match t {
                Tensor::Embed => slot.iter_mut().for_each(|p| *p = lit(embed.sample(&mut rng))),
                Tensor::Ln1Gain | Tensor::Ln2Gain | Tensor::LnfGain => slot.fill(T::one()),
                Tensor::Ln1Bias | Tensor::Ln2Bias | Tensor::LnfBias => {}
                _ => {
                    let fan_in = match t {
                        Tensor::MlpInBias => config.d_model,
                        Tensor::MlpOutBias => config.d_mlp,
                        Tensor::UnembedBias => config.d_model,
                        _ if t.is_weight_matrix() => t.shape(&config)[1],
                        _ => unreachable!(),
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    slot.iter_mut().for_each(|p| *p = lit(rng.gen_range(-bound..bound)));
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let expected = Layout::new(&config).total();
        if params.len() != expected {
            return Err(invalid(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn tensor(&self, t: Tensor) -> &[T] {
        &self.params[self.layout().range(&self.config, t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [T] {
        let r = self.layout().range(&self.config, t);
        &mut self.params[r]
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| U::from_f64(p.to_f64().expect("finite")).expect("representable"))
                .collect(),
        }
    }

    /// Unembedding with the final layer-norm gain and bias folded in, as f64:
    /// `logits = W t + b` for the normalised activation `t`.
    pub fn folded_unembedding(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let d = self.config.d_model;
        let f = |x: T| x.to_f64().expect("finite");
        let w = self.tensor(Tensor::Unembed);
        let bu = self.tensor(Tensor::UnembedBias);
        let g = self.tensor(Tensor::LnfGain);
        let beta = self.tensor(Tensor::LnfBias);
        let rows = (0..self.config.n_outputs)
            .map(|o| (0..d).map(|k| f(w[o * d + k]) * f(g[k])).collect())
            .collect();
        let bias = (0..self.config.n_outputs)
            .map(|o| f(bu[o]) + (0..d).map(|k| f(w[o * d + k]) * f(beta[k])).sum::<f64>())
            .collect();
        (rows, bias)
    }
}

/// Per-position output symbol from a probability vector: the argmax class
/// (lowest index on ties) for softmax heads, or the bitmask of bits with
/// probability at least 0.5 for sigmoid heads.
pub fn decode<T: Scalar>(head: OutputHead, probs: &[T]) -> usize {
    match head {
        OutputHead::Softmax => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        OutputHead::Sigmoid => probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= lit(0.5))
            .fold(0, |mask, (i, _)| mask | 1 << i),
    }
}
