//! Reference implementation of the conditioning attention used by the
//! reshaping network: reference-concatenated self-attention, dual
//! text/image cross-attention, forward noising and a toy denoiser trained
//! on the noise-prediction objective.
//!
//! Everything here is single-head, without output projections, and sized
//! for brute-force checking (N ≤ 16 tokens, width d ≤ 32).

use nalgebra::DMatrix;

mod schedule;
pub mod selfcheck;
mod toy;

pub use schedule::{add_noise, NoiseSchedule};
pub use toy::{
    denoising_loss, finite_difference_check, loss_and_gradients, make_toy_dataset, timestep_embedding, train_toy,
    ConditioningBundle, GradCheck, Gradients, Mlp, ToyDenoiser, ToySample, TrainConfig, TrainOutcome,
};

/// N×d token features, one token per row.
pub type FeatureSeq = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0} contains a non-finite value")]
    NonFinite(&'static str),
    #[error("timestep {t} outside schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("empty training set")]
    EmptyDataset,
}

pub type Result<T, E = AttentionError> = std::result::Result<T, E>;

/// Projection matrices of one attention block, each d×d.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

impl AttentionWeights {
    pub fn identity(d: usize) -> Self {
        AttentionWeights { w_q: DMatrix::identity(d, d), w_k: DMatrix::identity(d, d), w_v: DMatrix::identity(d, d) }
    }

    pub fn width(&self) -> usize {
        self.w_q.nrows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.w_q.nrows();
        for (name, w) in [("W_q", &self.w_q), ("W_k", &self.w_k), ("W_v", &self.w_v)] {
            if w.nrows() != d || w.ncols() != d {
                return Err(AttentionError::Dimension(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            check_finite(name, w)?;
        }
        Ok(())
    }
}

pub(crate) fn check_finite(what: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AttentionError::NonFinite(what))
    }
}

fn check_width(what: &str, m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.ncols() != d {
        return Err(AttentionError::Dimension(format!("{what} has width {}, expected {d}", m.ncols())));
    }
    Ok(())
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|x| *x = (*x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// Attention probabilities `softmax(Q Kᵀ / √d)` where d is the query width.
pub fn attention_probs(q: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if q.ncols() == 0 {
        return Err(AttentionError::Dimension("query width is zero".into()));
    }
    check_width("K", k, q.ncols())?;
    if k.nrows() == 0 {
        return Err(AttentionError::Dimension("no keys to attend to".into()));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    Ok(softmax_rows(&((q * k.transpose()) * scale)))
}

/// `softmax(Q Kᵀ / √d) V`.
pub fn attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k.nrows() != v.nrows() {
        return Err(AttentionError::Dimension(format!("K has {} tokens but V has {}", k.nrows(), v.nrows())));
    }
    Ok(attention_probs(q, k)? * v)
}

/// Stacks `a` on top of `b`.
pub(crate) fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Self-attention over the token-wise concatenation `[z; y]` with shared
/// projections, keeping only the output rows that belong to `z`.
///
/// Only the queries of `z` are computed; the rows belonging to `y` would be
/// discarded anyway.
pub fn reference_self_attention(z: &FeatureSeq, y: &FeatureSeq, weights: &AttentionWeights) -> Result<FeatureSeq> {
    weights.validate()?;
    check_width("z", z, weights.width())?;
    check_width("y", y, weights.width())?;
    check_finite("z", z)?;
    check_finite("y", y)?;
    let x = vstack(z, y);
    attention(&(z * &weights.w_q), &(&x * &weights.w_k), &(&x * &weights.w_v))
}

/// `Attn(Q_t, K_t, V_t) + Attn(Q_i, K_i, V_i)`, with each query taken from `z`
/// through the stream's own `W_q`. Passing the same `W_q` in both weight sets
/// gives the shared-query form.
pub fn dual_cross_attention(
    z: &FeatureSeq,
    text_tokens: &FeatureSeq,
    image_tokens: &FeatureSeq,
    weights_t: &AttentionWeights,
    weights_i: &AttentionWeights,
) -> Result<FeatureSeq> {
    Ok(cross_attention(z, text_tokens, weights_t)? + cross_attention(z, image_tokens, weights_i)?)
}

/// Single cross-attention stream: queries from `z`, keys and values from
/// `context`.
pub fn cross_attention(z: &FeatureSeq, context: &FeatureSeq, weights: &AttentionWeights) -> Result<FeatureSeq> {
    weights.validate()?;
    check_width("z", z, weights.width())?;
    check_width("context", context, weights.width())?;
    check_finite("z", z)?;
    check_finite("context", context)?;
    attention(&(z * &weights.w_q), &(context * &weights.w_k), &(context * &weights.w_v))
}
