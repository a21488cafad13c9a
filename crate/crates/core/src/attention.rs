//! Multi-head attention, memory compression and the compressed attention unit.
//!
//! The compressed unit follows the post-norm residual layout
//!
//! ```text
//! P  = MHA(Q, MC(K), MC(V))
//! P~ = Norm(Q + P)
//! Y  = Norm(FFN(P~) + P~)
//! ```
//!
//! where `MC` folds `M` memory rows into exactly `N` rows (one per query).

use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::tensor::{ModelParams, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::contract(format!("attention widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 8,
            d_model: 64,
            d_k: 8,
            d_v: 8,
        }
    }
}

/// Which stage produced an attention map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Ece,
    Ccs,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ece => "ece",
            Stage::Ccs => "ccs",
        }
    }
}

/// Per-head attention weights `heads × queries × keys`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor,
    /// 1-based block index.
    pub layer: usize,
    pub stage: Stage,
    pub modality: String,
}

impl AttentionMap {
    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn queries(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn keys(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Row `query` of head `head`.
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let k = self.keys();
        let start = (head * self.queries() + query) * k;
        &self.weights.data()[start..start + k]
    }
}

pub fn init_mha(params: &mut ModelParams, init: &mut Init, prefix: &str, cfg: &AttentionConfig) -> Result<()> {
    let hk = cfg.heads * cfg.d_k;
    let hv = cfg.heads * cfg.d_v;
    nn::init_matrix(params, init, &format!("{prefix}/wq"), cfg.d_model, hk)?;
    nn::init_matrix(params, init, &format!("{prefix}/wk"), cfg.d_model, hk)?;
    nn::init_matrix(params, init, &format!("{prefix}/wv"), cfg.d_model, hv)?;
    nn::init_matrix(params, init, &format!("{prefix}/wo"), hv, cfg.d_model)
}

/// `Concat(H_1..H_h) W*` with `H_i = softmax(Q W_i^Q (K W_i^K)ᵀ / √d_k) V W_i^V`.
///
/// Returns the output and the `h × Nq × M` weights.
pub fn mha(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Tensor)> {
    cfg.validate()?;
    let (nq, m) = (tape.value(q).rows(), tape.value(k).rows());
    if m == 0 || tape.value(v).rows() != m {
        return Err(Error::contract(format!(
            "attention memory must be non-empty with matching key/value rows (keys {m}, values {})",
            tape.value(v).rows()
        )));
    }
    for x in [q, k, v] {
        if tape.value(x).cols() != cfg.d_model {
            return Err(Error::Shape {
                op: "mha",
                left: tape.value(x).shape().to_vec(),
                right: vec![cfg.d_model],
            });
        }
    }
    let wq = tape.param(params, &format!("{prefix}/wq"))?;
    let wk = tape.param(params, &format!("{prefix}/wk"))?;
    let wv = tape.param(params, &format!("{prefix}/wv"))?;
    let wo = tape.param(params, &format!("{prefix}/wo"))?;
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = if v == k { tape.matmul(k, wv)? } else { tape.matmul(v, wv)? };

    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads * nq * m);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(qp, h * cfg.d_k, cfg.d_k)?;
        let kh = tape.slice_cols(kp, h * cfg.d_k, cfg.d_k)?;
        let vh = tape.slice_cols(vp, h * cfg.d_v, cfg.d_v)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        weights.extend_from_slice(tape.value(attn).data());
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, wo)?;
    Ok((out, Tensor::from_parts(vec![cfg.heads, nq, m], weights)))
}

/// Group width needed to fold `memory` rows into `target` rows.
pub fn group_size(memory: usize, target: usize) -> usize {
    memory.div_ceil(target).max(1)
}

pub fn init_memory_compress(params: &mut ModelParams, init: &mut Init, prefix: &str, d: usize, max_group: usize) -> Result<()> {
    nn::init_matrix(params, init, &format!("{prefix}/wh"), max_group * d, d)?;
    nn::init_layer_norm(params, &format!("{prefix}/ln"), d)
}

/// Fold `M×d` memory into `target×d`: contiguous groups of `ceil(M/target)` rows
/// are concatenated (zero-padded to the configured maximum group width),
/// projected by `W^h` and layer-normalized.
pub fn memory_compress(tape: &mut Tape, params: &ModelParams, prefix: &str, memory: Var, target: usize) -> Result<Var> {
    if target == 0 {
        return Err(Error::contract("memory compression target must be at least 1"));
    }
    let (m, d) = (tape.value(memory).rows(), tape.value(memory).cols());
    let wh = tape.param(params, &format!("{prefix}/wh"))?;
    let max_group = tape.value(wh).rows() / d;
    if max_group * d != tape.value(wh).rows() {
        return Err(Error::Shape {
            op: "memory_compress",
            left: tape.value(memory).shape().to_vec(),
            right: tape.value(wh).shape().to_vec(),
        });
    }
    let g = group_size(m, target);
    if g > max_group {
        return Err(Error::contract(format!(
            "{m} memory rows need groups of {g} but {prefix} was built for at most {max_group}; \
             the input exceeds the configured maximum element count"
        )));
    }
    let index: Vec<Option<usize>> = (0..target)
        .flat_map(|r| {
            (0..max_group).map(move |s| {
                let src = r * g + s;
                (s < g && src < m).then_some(src)
            })
        })
        .collect();
    let grouped = tape.gather_rows(memory, index)?;
    let grouped = tape.reshape(grouped, vec![target, max_group * d])?;
    let projected = tape.matmul(grouped, wh)?;
    nn::layer_norm(tape, params, &format!("{prefix}/ln"), projected)
}

pub fn init_cmha(
    params: &mut ModelParams,
    init: &mut Init,
    prefix: &str,
    cfg: &AttentionConfig,
    max_group: usize,
    ffn_hidden: usize,
) -> Result<()> {
    let d = cfg.d_model;
    init_memory_compress(params, init, &format!("{prefix}/mc"), d, max_group)?;
    init_mha(params, init, &format!("{prefix}/mha"), cfg)?;
    nn::init_layer_norm(params, &format!("{prefix}/ln1"), d)?;
    nn::init_linear(params, init, &format!("{prefix}/ffn1"), d, ffn_hidden)?;
    nn::init_linear(params, init, &format!("{prefix}/ffn2"), ffn_hidden, d)?;
    nn::init_layer_norm(params, &format!("{prefix}/ln2"), d)
}

/// Compressed attention unit. When `k` and `v` are the same node the
/// compression runs once.
pub fn cmha(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Tensor)> {
    let n = tape.value(q).rows();
    let mc = format!("{prefix}/mc");
    let kc = memory_compress(tape, params, &mc, k, n)?;
    let vc = if v == k { kc } else { memory_compress(tape, params, &mc, v, n)? };
    let (p, weights) = mha(tape, params, &format!("{prefix}/mha"), q, kc, vc, cfg)?;
    let res = tape.add(q, p)?;
    let p_tilde = nn::layer_norm(tape, params, &format!("{prefix}/ln1"), res)?;
    let hidden = nn::linear(tape, params, &format!("{prefix}/ffn1"), p_tilde)?;
    let hidden = tape.relu(hidden);
    let ffn = nn::linear(tape, params, &format!("{prefix}/ffn2"), hidden)?;
    let res = tape.add(ffn, p_tilde)?;
    let y = nn::layer_norm(tape, params, &format!("{prefix}/ln2"), res)?;
    Ok((y, weights))
}
