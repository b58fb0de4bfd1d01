//! Item-view and session-view graph encoders.
//!
//! All matrices act on row vectors: a layer computes `X·W`, so weights are
//! stored transposed relative to the column-vector convention.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::config::{InitScheme, TrainConfig};
use crate::corpus::Session;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::sparse::SparseMatrix;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub n_items: usize,
    pub d: usize,
    pub layers: usize,
    /// Longest prefix that gets its own position vector.
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub item_embedding: ParamId,
    pub item_conv: Vec<ParamId>,
    pub session_conv: Vec<ParamId>,
    pub position: ParamId,
    pub pos_weight: ParamId,
    pub pos_bias: ParamId,
    pub attn_query: ParamId,
    pub attn_key: ParamId,
    pub attn_bias: ParamId,
    pub attn_score: ParamId,
}

/// The parameter layout plus the architectural switches.
#[derive(Clone, Debug, PartialEq)]
pub struct CotrecModel {
    pub shape: ModelShape,
    pub params: ModelParams,
    pub no_position: bool,
    pub no_attention: bool,
}

/// Tape leaves for one forward pass.
#[derive(Clone, Debug)]
pub struct Leaves {
    pub item_embedding: NodeId,
    pub item_conv: Vec<NodeId>,
    pub session_conv: Vec<NodeId>,
    pub position: NodeId,
    pub pos_weight: NodeId,
    pub pos_bias: NodeId,
    pub attn_query: NodeId,
    pub attn_key: NodeId,
    pub attn_bias: NodeId,
    pub attn_score: NodeId,
}

fn init_tensor<R: Rng>(rows: usize, cols: usize, config: &TrainConfig, rng: &mut R) -> Tensor {
    let s = config.init_scale;
    let data: Vec<f64> = match config.init {
        InitScheme::Gaussian => {
            let dist = Normal::new(0.0, s).expect("init_scale is validated positive");
            (0..rows * cols).map(|_| dist.sample(rng)).collect()
        }
        InitScheme::Uniform => {
            let dist = Uniform::new_inclusive(-s, s).expect("init_scale is validated positive");
            (0..rows * cols).map(|_| dist.sample(rng)).collect()
        }
    };
    Tensor::from_vec(rows, cols, data).expect("sizes match")
}

impl CotrecModel {
    /// Registers and randomly initializes every parameter in `store`.
    pub fn new<R: Rng>(
        shape: ModelShape,
        config: &TrainConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let ModelShape {
            n_items,
            d,
            layers,
            max_len,
        } = shape;
        let mut add = |name: String, r: usize, c: usize| store.add(name, init_tensor(r, c, config, rng));
        let item_embedding = add("item_embedding".into(), n_items, d)?;
        let item_conv = (0..layers)
            .map(|l| add(format!("item_conv.{l}"), d, d))
            .collect::<Result<_>>()?;
        let session_conv = (0..layers)
            .map(|l| add(format!("session_conv.{l}"), d, d))
            .collect::<Result<_>>()?;
        let position = add("position".into(), max_len.max(1), d)?;
        let pos_weight = add("pos_proj.weight".into(), 2 * d, d)?;
        let pos_bias = add("pos_proj.bias".into(), 1, d)?;
        let attn_query = add("attn.query".into(), d, d)?;
        let attn_key = add("attn.key".into(), d, d)?;
        let attn_bias = add("attn.bias".into(), 1, d)?;
        let attn_score = add("attn.score".into(), d, 1)?;
        Ok(CotrecModel {
            shape,
            params: ModelParams {
                item_embedding,
                item_conv,
                session_conv,
                position,
                pos_weight,
                pos_bias,
                attn_query,
                attn_key,
                attn_bias,
                attn_score,
            },
            no_position: config.no_position,
            no_attention: config.no_attention,
        })
    }

    /// Parameters that receive gradients under the given view usage.
    pub fn active_params(&self, uses_session_view: bool) -> Vec<ParamId> {
        let p = &self.params;
        let mut ids = vec![p.item_embedding];
        ids.extend(&p.item_conv);
        if uses_session_view {
            ids.extend(&p.session_conv);
        }
        if !self.no_position {
            ids.push(p.position);
        }
        ids.push(p.pos_weight);
        ids.push(p.pos_bias);
        if !self.no_attention {
            ids.extend([p.attn_query, p.attn_key, p.attn_bias, p.attn_score]);
        }
        ids
    }

    pub fn leaves(&self, tape: &mut Tape, store: &ParamStore) -> Leaves {
        let p = &self.params;
        Leaves {
            item_embedding: tape.param(store, p.item_embedding),
            item_conv: p.item_conv.iter().map(|&id| tape.param(store, id)).collect(),
            session_conv: p.session_conv.iter().map(|&id| tape.param(store, id)).collect(),
            position: tape.param(store, p.position),
            pos_weight: tape.param(store, p.pos_weight),
            pos_bias: tape.param(store, p.pos_bias),
            attn_query: tape.param(store, p.attn_query),
            attn_key: tape.param(store, p.attn_key),
            attn_bias: tape.param(store, p.attn_bias),
            attn_score: tape.param(store, p.attn_score),
        }
    }

    /// Session representation `θ` (`1×d`) for one prefix, read from the item
    /// embeddings `items` (`N×d`). Prefixes longer than `max_len` keep their
    /// most recent items.
    pub fn encode_prefix(
        &self,
        tape: &mut Tape,
        leaves: &Leaves,
        items: NodeId,
        prefix: &[usize],
    ) -> Result<NodeId> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty prefix".into()));
        }
        let prefix = &prefix[prefix.len().saturating_sub(self.shape.max_len)..];
        let m = prefix.len();
        let rows = tape.gather_rows(items, prefix)?;
        let x_mean = tape.mean_rows(rows);
        let pos = if self.no_position {
            tape.constant(Tensor::zeros(m, self.shape.d))
        } else {
            reversed_positions(tape, leaves.position, m)?
        };
        let positioned = apply_position(tape, rows, pos, leaves.pos_weight, leaves.pos_bias)?;
        if self.no_attention {
            return Ok(tape.mean_rows(positioned));
        }
        session_attention(
            tape,
            positioned,
            x_mean,
            &Attention {
                query: leaves.attn_query,
                key: leaves.attn_key,
                bias: leaves.attn_bias,
                score: leaves.attn_score,
            },
        )
    }

    /// Stacks `θ` for every prefix into a `B×d` matrix.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        leaves: &Leaves,
        items: NodeId,
        prefixes: &[&[usize]],
    ) -> Result<NodeId> {
        let thetas = prefixes
            .iter()
            .map(|p| self.encode_prefix(tape, leaves, items, p))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&thetas)
    }
}

/// Simplified graph convolution without nonlinearity,
/// `X⁽ˡ⁺¹⁾ = Â X⁽ˡ⁾ W_l`, returning the mean of all `L + 1` layer outputs.
pub fn graph_conv(
    tape: &mut Tape,
    x0: NodeId,
    adj: &Arc<SparseMatrix>,
    weights: &[NodeId],
) -> Result<NodeId> {
    let (n, _) = tape.shape(x0);
    if adj.n_rows() != n || adj.n_cols() != n {
        return Err(Error::shape("graph_conv", adj.shape(), tape.shape(x0)));
    }
    let mut layer = x0;
    let mut total = x0;
    for &w in weights {
        let propagated = tape.spmm(adj, layer)?;
        layer = tape.matmul(propagated, w)?;
        total = tape.add(total, layer)?;
    }
    Ok(tape.scale(total, 1.0 / (weights.len() + 1) as f64))
}

/// Position rows `[p_m, …, p_1]` so the last item of a length-`m` session
/// gets `p_1`.
pub fn reversed_positions(tape: &mut Tape, position: NodeId, m: usize) -> Result<NodeId> {
    let available = tape.shape(position).0;
    if m > available {
        return Err(Error::InvalidArgument(format!(
            "session length {m} exceeds the {available} learned positions"
        )));
    }
    let idx: Vec<usize> = (0..m).rev().collect();
    tape.gather_rows(position, &idx)
}

/// `x*_t = tanh([x_t ‖ p_{m−t+1}]·W + b)` for every row.
pub fn apply_position(
    tape: &mut Tape,
    rows: NodeId,
    reversed_pos: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let cat = tape.concat_cols(rows, reversed_pos)?;
    let lin = tape.matmul(cat, weight)?;
    let biased = tape.add_row(lin, bias)?;
    Ok(tape.tanh(biased))
}

/// Soft-attention parameters: `query` (W₂), `key` (W₃), `bias` (c, `1×d`) and
/// `score` (f, `d×1`).
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub query: NodeId,
    pub key: NodeId,
    pub bias: NodeId,
    pub score: NodeId,
}

/// `α_t = fᵀ σ(W₂ x_s + W₃ x*_t + c)`, `θ = Σ_t α_t x*_t`.
pub fn session_attention(
    tape: &mut Tape,
    positioned: NodeId,
    x_mean: NodeId,
    attn: &Attention,
) -> Result<NodeId> {
    let q = tape.matmul(x_mean, attn.query)?;
    let q = tape.add(q, attn.bias)?;
    let k = tape.matmul(positioned, attn.key)?;
    let pre = tape.add_row(k, q)?;
    let gate = tape.sigmoid(pre);
    let alpha = tape.matmul(gate, attn.score)?;
    let alpha_t = tape.transpose(alpha);
    tape.matmul(alpha_t, positioned)
}

/// `M×N` matrix whose row `j` averages the item rows of session `j`
/// (repeated items count repeatedly).
pub fn session_average_matrix(sessions: &[Session], n_items: usize) -> Result<SparseMatrix> {
    let triplets = sessions.iter().enumerate().flat_map(|(j, s)| {
        let w = 1.0 / s.items.len() as f64;
        s.items.iter().map(move |&i| (j, i, w))
    });
    SparseMatrix::from_triplets(sessions.len(), n_items, triplets)
}

/// Initial session-view embeddings `Θ⁽⁰⁾`.
pub fn init_session_embeddings(
    tape: &mut Tape,
    x0: NodeId,
    averaging: &Arc<SparseMatrix>,
) -> Result<NodeId> {
    tape.spmm(averaging, x0)
}
