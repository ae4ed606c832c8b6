//! The learnable prompt generator.
//!
//! Learnable query vectors attend to a class embedding through one
//! multi-head cross-attention block, then pass through a GEGLU
//! feed-forward block. Both blocks are pre-layer-norm with residuals:
//!
//! ```text
//! u   = queries + W_o · MHA(LN1(queries), kv)
//! ctx = u + ffn_out · geglu(ffn_in · LN2(u))
//! ```
//!
//! Vectors are rows, so a "linear map" here is `x · W`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{ParameterSet, Schema};
use crate::seed;
use crate::tensor::Tensor;

pub const QUERIES: &str = "queries";
pub const W_Q: &str = "w_q";
pub const W_K: &str = "w_k";
pub const W_V: &str = "w_v";
pub const W_O: &str = "w_o";
pub const LN1_GAIN: &str = "ln1_gain";
pub const LN1_BIAS: &str = "ln1_bias";
pub const LN2_GAIN: &str = "ln2_gain";
pub const LN2_BIAS: &str = "ln2_bias";
pub const FFN_IN: &str = "ffn_in";
pub const FFN_OUT: &str = "ffn_out";

/// Standard deviation of the initial query vectors.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslatorConfig {
    pub d_model: usize,
    pub n_ctx: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub kv_len: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            d_model: 32,
            n_ctx: 4,
            n_heads: 4,
            ffn_mult: 4,
            kv_len: 1,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_ctx == 0 || self.kv_len == 0 || self.ffn_mult == 0 {
            return Err(Error::contract("n_ctx, kv_len and ffn_mult must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Parameter names and shapes in storage order.
    pub fn schema(&self) -> Schema {
        let (d, m, f) = (self.d_model, self.n_ctx, self.ffn_hidden());
        let mut entries = vec![
            (FFN_IN, vec![d, 2 * f]),
            (FFN_OUT, vec![f, d]),
            (LN1_BIAS, vec![d]),
            (LN1_GAIN, vec![d]),
            (LN2_BIAS, vec![d]),
            (LN2_GAIN, vec![d]),
            (QUERIES, vec![m, d]),
            (W_K, vec![d, d]),
            (W_O, vec![d, d]),
            (W_Q, vec![d, d]),
            (W_V, vec![d, d]),
        ];
        entries.sort_by(|a, b| a.0.cmp(b.0));
        Schema(entries.into_iter().map(|(n, s)| (n.to_string(), s)).collect())
    }
}

/// Seeded initialization: queries ~ N(0, 0.02²), input matrices
/// ~ N(0, 1/d), `w_o` and `ffn_out` zero, layer-norm gains 1 and biases 0.
pub fn init_params(config: &TranslatorConfig, seed_value: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut set = ParameterSet::new();
    let d = config.d_model as f64;
    for (i, (name, shape)) in config.schema().0.into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = match name.as_str() {
            LN1_GAIN | LN2_GAIN => vec![1.0; n],
            LN1_BIAS | LN2_BIAS => vec![0.0; n],
            // Output projections start at zero so the initial context is
            // just the queries and training starts from the zero-shot analog.
            W_O | FFN_OUT => vec![0.0; n],
            _ => {
                let std = if name == QUERIES { QUERY_INIT_STD } else { 1.0 / d.sqrt() };
                let mut rng = seed::rng_from(&[seed_value, seed::stream::INIT, i as u64]);
                gaussian_vec(&mut rng, n, std)
            }
        };
        set.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(set)
}

pub(crate) fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite non-negative std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Checks that `params` has exactly the schema `config` implies.
pub fn check_schema(config: &TranslatorConfig, params: &ParameterSet) -> Result<()> {
    let expected = config.schema();
    let got = params.schema();
    if expected != got {
        return Err(Error::Schema(format!(
            "parameter schema {:?} does not match translator config {:?}",
            got.0, expected.0
        )));
    }
    Ok(())
}

/// Parameters bound onto one graph, shared by every class in a batch.
#[derive(Debug, Clone, Copy)]
pub struct BoundTranslator {
    config: TranslatorConfig,
    queries: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    ffn_in: Var,
    ffn_out: Var,
}

impl BoundTranslator {
    pub fn bind(g: &mut Graph, config: &TranslatorConfig, params: &ParameterSet) -> Result<Self> {
        config.validate()?;
        check_schema(config, params)?;
        Ok(BoundTranslator {
            config: *config,
            queries: g.param(params, QUERIES)?,
            w_q: g.param(params, W_Q)?,
            w_k: g.param(params, W_K)?,
            w_v: g.param(params, W_V)?,
            w_o: g.param(params, W_O)?,
            ln1_gain: g.param(params, LN1_GAIN)?,
            ln1_bias: g.param(params, LN1_BIAS)?,
            ln2_gain: g.param(params, LN2_GAIN)?,
            ln2_bias: g.param(params, LN2_BIAS)?,
            ffn_in: g.param(params, FFN_IN)?,
            ffn_out: g.param(params, FFN_OUT)?,
        })
    }

    /// Multi-head scaled dot-product attention of `queries_in` `[m×d]`
    /// over `kv` `[L×d]`, projected by `W_o`. No residual.
    pub fn cross_attention(&self, g: &mut Graph, queries_in: Var, kv: Var) -> Result<Var> {
        let d = self.config.d_model;
        let kv_shape = g.value(kv).shape().to_vec();
        if kv_shape.len() != 2 || kv_shape[1] != d {
            return Err(Error::dim(format!("key/value input must be [L x {d}], got {kv_shape:?}")));
        }
        if kv_shape[0] == 0 {
            return Err(Error::dim("key/value sequence is empty"));
        }
        let q = g.matmul(queries_in, self.w_q)?;
        let k = g.matmul(kv, self.w_k)?;
        let v = g.matmul(kv, self.w_v)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        g.matmul(joined, self.w_o)
    }

    /// Context vectors `[m×d]` for one class given its key/value rows `[L×d]`.
    pub fn context_for(&self, g: &mut Graph, class_kv: Var) -> Result<Var> {
        let kv_shape = g.value(class_kv).shape();
        if kv_shape != [self.config.kv_len, self.config.d_model] {
            return Err(Error::dim(format!(
                "class embedding shape {kv_shape:?} does not match [{}, {}]",
                self.config.kv_len, self.config.d_model
            )));
        }
        let normed = g.layer_norm(self.queries, self.ln1_gain, self.ln1_bias, LAYER_NORM_EPS)?;
        let attended = self.cross_attention(g, normed, class_kv)?;
        let u = g.add(self.queries, attended)?;
        let normed = g.layer_norm(u, self.ln2_gain, self.ln2_bias, LAYER_NORM_EPS)?;
        let hidden = g.matmul(normed, self.ffn_in)?;
        let gated = g.geglu(hidden)?;
        let out = g.matmul(gated, self.ffn_out)?;
        g.add(u, out)
    }
}

/// Generated context vectors, shape `[batch, n_ctx, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVectors {
    pub values: Tensor,
}

impl ContextVectors {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    /// The `[m×d]` block for batch item `b`.
    pub fn item(&self, b: usize) -> Tensor {
        let (m, d) = (self.values.shape()[1], self.values.shape()[2]);
        let block = self.values.data()[b * m * d..(b + 1) * m * d].to_vec();
        Tensor::new(vec![m, d], block).expect("block shape")
    }
}

/// Runs the translator on a batch of class embeddings `[B×L×d]`.
/// `[B×d]` is accepted as shorthand when `kv_len` is 1.
pub fn generate_context(
    config: &TranslatorConfig,
    params: &ParameterSet,
    class_emb: &Tensor,
) -> Result<ContextVectors> {
    class_emb.check_finite("class embeddings")?;
    let (b, l, d) = match *class_emb.shape() {
        [b, l, d] => (b, l, d),
        [b, d] if config.kv_len == 1 => (b, 1, d),
        ref s => return Err(Error::dim(format!("class embeddings must be [B x L x d], got {s:?}"))),
    };
    if l != config.kv_len || d != config.d_model {
        return Err(Error::dim(format!(
            "class embeddings [{b}, {l}, {d}] do not match kv_len {} / d_model {}",
            config.kv_len, config.d_model
        )));
    }
    let m = config.n_ctx;
    let mut g = Graph::new();
    let bound = BoundTranslator::bind(&mut g, config, params)?;
    let mut data = Vec::with_capacity(b * m * d);
    for i in 0..b {
        let rows = class_emb.data()[i * l * d..(i + 1) * l * d].to_vec();
        let kv = g.constant(Tensor::new(vec![l, d], rows)?)?;
        let ctx = bound.context_for(&mut g, kv)?;
        data.extend_from_slice(g.value(ctx).data());
    }
    Ok(ContextVectors {
        values: Tensor::new(vec![b, m, d], data)?,
    })
}
