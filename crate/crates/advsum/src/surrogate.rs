//! A small differentiable code-summarization classifier.
//!
//! The model maps a relaxed token stream to label probabilities: each input
//! row (a distribution over the vocabulary) is embedded as `row · embed`, the
//! embeddings are mass-weighted mean-pooled over positions, passed through one
//! `tanh` hidden layer, and read out with an affine layer plus softmax. For
//! one-hot rows the pooling is the plain mean; rows scaled by a selection
//! weight contribute proportionally to both the numerator and the pooling
//! mass, so a fully deselected insertion contributes nothing at all.
//!
//! All gradients are analytic. [`grad_input`] differentiates the loss with
//! respect to every input row entry (the attack's workhorse), while training
//! uses the parameter gradients directly. There is no hidden state: every
//! operation is deterministic given its seed.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeSnippet, LabelSet, Vocabulary};

/// Errors from model construction, training, and checkpointing.
#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("snippet `{id}` has label `{label}` outside the label set")]
    UnknownLabel { id: String, label: String },
    #[error("checkpoint {what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("checkpoint version {0} unsupported")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    /// All-zeros matrix.
    #[must_use]
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    #[must_use]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    /// A row as a slice.
    #[inline]
    #[must_use]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Model parameters θ: embedding |Ω|×d, hidden layer d×h (+bias), output
/// layer h×|L| (+bias).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embed: Mat,
    pub hidden_w: Mat,
    pub hidden_b: Vec<f64>,
    pub out_w: Mat,
    pub out_b: Vec<f64>,
}

impl ModelParams {
    /// Vocabulary size |Ω| (input row width).
    #[must_use]
    pub fn vocab_size(&self) -> usize {
        self.embed.rows
    }

    /// Label count |L| (output width).
    #[must_use]
    pub fn label_count(&self) -> usize {
        self.out_b.len()
    }

    /// All-zeros parameters; predictions are exactly uniform.
    #[must_use]
    pub fn zeros(vocab_size: usize, label_count: usize, d: usize, h: usize) -> Self {
        ModelParams {
            embed: Mat::zeros(vocab_size, d),
            hidden_w: Mat::zeros(d, h),
            hidden_b: vec![0.0; h],
            out_w: Mat::zeros(h, label_count),
            out_b: vec![0.0; label_count],
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Embedding width.
    pub d: usize,
    /// Hidden width.
    pub h: usize,
    /// Full passes over the corpus.
    pub epochs: usize,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Constant SGD step.
    pub learning_rate: f64,
    /// Seed for initialization and epoch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 16,
            h: 32,
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.2,
            seed: 0,
        }
    }
}

/// Seeded initialization, deterministic per seed: wide uniform embeddings
/// (mean pooling shrinks the pooled signal by ~1/√n, so narrow rows would
/// leave inputs indistinguishable), Xavier-uniform hidden and output
/// weights, zero biases.
#[must_use]
pub fn init_params(vocab_size: usize, label_count: usize, config: &TrainConfig) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fill = |m: &mut [f64], limit: f64| {
        for v in m {
            *v = rng.gen_range(-limit..limit);
        }
    };
    let mut params = ModelParams::zeros(vocab_size, label_count, config.d, config.h);
    fill(&mut params.embed.data, 0.5);
    let hidden_limit = (6.0 / (config.d + config.h) as f64).sqrt();
    fill(&mut params.hidden_w.data, hidden_limit);
    let out_limit = (6.0 / (config.h + label_count) as f64).sqrt();
    fill(&mut params.out_w.data, out_limit);
    params
}

/// A relaxed program: one row per token position, each a length-|Ω| vector.
/// Rows are one-hot for fixed tokens and simplex-valued for optimizer slots.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedInput {
    pub rows: Vec<Vec<f64>>,
}

impl RelaxedInput {
    /// One-hot encoding of a discrete token-index sequence.
    #[must_use]
    pub fn from_token_indices(indices: &[usize], vocab_size: usize) -> Self {
        let rows = indices
            .iter()
            .map(|&i| {
                let mut row = vec![0.0; vocab_size];
                row[i] = 1.0;
                row
            })
            .collect();
        RelaxedInput { rows }
    }

    /// One-hot encoding of a token stream under a vocabulary; unknown tokens
    /// map to the sentinel index 0.
    #[must_use]
    pub fn from_tokens(tokens: &[String], vocab: &Vocabulary) -> Self {
        let indices: Vec<usize> = tokens
            .iter()
            .map(|t| vocab.index_or_sentinel(t))
            .collect();
        Self::from_token_indices(&indices, vocab.len())
    }

    /// Row width (must equal |Ω|).
    #[must_use]
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Forward state after pooling: hidden activations and label probabilities.
#[derive(Clone, Debug)]
pub struct PooledForward {
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Runs the network above the pooling layer: `tanh(pooled·W1 + b1)` then
/// softmax over the affine readout.
#[must_use]
pub fn forward_pooled(params: &ModelParams, pooled: &[f64]) -> PooledForward {
    let d = params.hidden_w.rows;
    let h = params.hidden_w.cols;
    debug_assert_eq!(pooled.len(), d);
    let mut hidden = params.hidden_b.clone();
    for e in 0..d {
        let p = pooled[e];
        if p != 0.0 {
            let w_row = params.hidden_w.row(e);
            for (i, hv) in hidden.iter_mut().enumerate() {
                *hv += p * w_row[i];
            }
        }
    }
    for hv in &mut hidden {
        *hv = hv.tanh();
    }
    let mut logits = params.out_b.clone();
    for i in 0..h {
        let a = hidden[i];
        if a != 0.0 {
            let w_row = params.out_w.row(i);
            for (l, lv) in logits.iter_mut().enumerate() {
                *lv += a * w_row[l];
            }
        }
    }
    let probs = softmax(&logits);
    PooledForward {
        pooled: pooled.to_vec(),
        hidden,
        probs,
    }
}

/// Gradient of the cross-entropy loss with respect to the pooled embedding.
#[must_use]
pub fn pooled_gradient(params: &ModelParams, fwd: &PooledForward, label_index: usize) -> Vec<f64> {
    let d = params.hidden_w.rows;
    let h = params.hidden_w.cols;
    let labels = params.label_count();
    let mut d_logits = fwd.probs.clone();
    d_logits[label_index] -= 1.0;
    let mut d_pre = vec![0.0; h];
    for i in 0..h {
        let mut acc = 0.0;
        let w_row = params.out_w.row(i);
        for l in 0..labels {
            acc += w_row[l] * d_logits[l];
        }
        d_pre[i] = acc * (1.0 - fwd.hidden[i] * fwd.hidden[i]);
    }
    let mut d_pooled = vec![0.0; d];
    for e in 0..d {
        let w_row = params.hidden_w.row(e);
        let mut acc = 0.0;
        for i in 0..h {
            acc += w_row[i] * d_pre[i];
        }
        d_pooled[e] = acc;
    }
    d_pooled
}

/// Mass-weighted mean pooling of a relaxed input: `Σ row·embed / Σ mass(row)`
/// where a row's mass is the sum of its entries. Returns the pooled vector
/// and the total mass.
pub fn pool_relaxed(
    params: &ModelParams,
    input: &RelaxedInput,
) -> Result<(Vec<f64>, f64), SurrogateError> {
    let width = params.vocab_size();
    let d = params.hidden_w.rows;
    let mut pooled = vec![0.0; d];
    let mut mass = 0.0;
    for row in &input.rows {
        if row.len() != width {
            return Err(SurrogateError::DimensionMismatch(format!(
                "input row width {} != |vocab| {width}",
                row.len()
            )));
        }
        for (j, &w) in row.iter().enumerate() {
            if w != 0.0 {
                mass += w;
                let e_row = params.embed.row(j);
                for (e, pv) in pooled.iter_mut().enumerate() {
                    *pv += w * e_row[e];
                }
            }
        }
    }
    if input.rows.is_empty() || mass == 0.0 {
        return Err(SurrogateError::DimensionMismatch(
            "input has no mass to pool".to_owned(),
        ));
    }
    for pv in &mut pooled {
        *pv /= mass;
    }
    Ok((pooled, mass))
}

fn pool_tokens(params: &ModelParams, indices: &[usize]) -> Vec<f64> {
    let d = params.hidden_w.rows;
    let mut pooled = vec![0.0; d];
    for &t in indices {
        let e_row = params.embed.row(t);
        for (e, pv) in pooled.iter_mut().enumerate() {
            *pv += e_row[e];
        }
    }
    let n = indices.len() as f64;
    for pv in &mut pooled {
        *pv /= n;
    }
    pooled
}

/// Label probabilities for a relaxed input. Entries lie in (0,1) and sum to
/// 1 within 1e-9.
pub fn predict(params: &ModelParams, input: &RelaxedInput) -> Result<Vec<f64>, SurrogateError> {
    let (pooled, _) = pool_relaxed(params, input)?;
    Ok(forward_pooled(params, &pooled).probs)
}

/// Label probabilities for a discrete token-index sequence (one-hot fast
/// path; identical to [`predict`] on the equivalent one-hot input).
#[must_use]
pub fn predict_tokens(params: &ModelParams, indices: &[usize]) -> Vec<f64> {
    assert!(!indices.is_empty(), "empty token sequence");
    let pooled = pool_tokens(params, indices);
    forward_pooled(params, &pooled).probs
}

/// Cross-entropy loss `−log p(label)`.
pub fn loss(
    params: &ModelParams,
    input: &RelaxedInput,
    label_index: usize,
) -> Result<f64, SurrogateError> {
    Ok(-predict(params, input)?[label_index].ln())
}

/// Cross-entropy loss for a discrete token-index sequence.
#[must_use]
pub fn loss_tokens(params: &ModelParams, indices: &[usize], label_index: usize) -> f64 {
    -predict_tokens(params, indices)[label_index].ln()
}

/// Exact analytic gradient of the loss with respect to every input row entry.
///
/// Because pooling is a mass-weighted mean, the gradient is identical for
/// every row: `∂L/∂row_p[j] = (E_j·g − pooled·g) / mass` with `g` the pooled
/// gradient. Rows belonging to fixed one-hot tokens receive gradients too;
/// the attack simply reads only the slot rows.
pub fn grad_input(
    params: &ModelParams,
    input: &RelaxedInput,
    label_index: usize,
) -> Result<Vec<Vec<f64>>, SurrogateError> {
    let base = grad_input_base(params, input, label_index)?;
    Ok(vec![base; input.rows.len()])
}

/// The shared per-row gradient underlying [`grad_input`] (one length-|Ω|
/// vector instead of n copies).
pub fn grad_input_base(
    params: &ModelParams,
    input: &RelaxedInput,
    label_index: usize,
) -> Result<Vec<f64>, SurrogateError> {
    let (pooled, mass) = pool_relaxed(params, input)?;
    let fwd = forward_pooled(params, &pooled);
    let g = pooled_gradient(params, &fwd, label_index);
    let dot_pooled: f64 = pooled.iter().zip(&g).map(|(a, b)| a * b).sum();
    let mut base = vec![0.0; params.vocab_size()];
    for (j, bv) in base.iter_mut().enumerate() {
        let e_row = params.embed.row(j);
        let dot: f64 = e_row.iter().zip(&g).map(|(a, b)| a * b).sum();
        *bv = (dot - dot_pooled) / mass;
    }
    Ok(base)
}

/// Training result: final parameters plus the recorded per-epoch mean loss.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD on cross-entropy over the corpus. Deterministic per seed;
/// `learning_rate = 0` leaves the initialized parameters untouched.
pub fn train(
    corpus: &[CodeSnippet],
    vocab: &Vocabulary,
    labels: &LabelSet,
    config: &TrainConfig,
) -> Result<TrainOutcome, SurrogateError> {
    if corpus.is_empty() {
        return Err(SurrogateError::EmptyCorpus);
    }
    let encoded: Vec<(Vec<usize>, usize)> = corpus
        .iter()
        .map(|s| {
            let idxs: Vec<usize> = s
                .tokens
                .iter()
                .map(|t| vocab.index_or_sentinel(t))
                .collect();
            let label = labels
                .lookup(&s.label)
                .ok_or_else(|| SurrogateError::UnknownLabel {
                    id: s.id.clone(),
                    label: s.label.clone(),
                })?;
            Ok((idxs, label))
        })
        .collect::<Result<_, SurrogateError>>()?;

    let mut params = init_params(vocab.len(), labels.len(), config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let batch = config.batch_size.max(1);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = ModelParams::zeros(
                params.vocab_size(),
                params.label_count(),
                params.hidden_w.rows,
                params.hidden_w.cols,
            );
            for &idx in chunk {
                let (ref tokens, label) = encoded[idx];
                epoch_loss += accumulate_grads(&params, tokens, label, &mut grads);
            }
            let scale = config.learning_rate / chunk.len() as f64;
            axpy(&mut params.embed.data, &grads.embed.data, -scale);
            axpy(&mut params.hidden_w.data, &grads.hidden_w.data, -scale);
            axpy(&mut params.hidden_b, &grads.hidden_b, -scale);
            axpy(&mut params.out_w.data, &grads.out_w.data, -scale);
            axpy(&mut params.out_b, &grads.out_b, -scale);
        }
        epoch_losses.push(epoch_loss / encoded.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Backward pass for one discrete sample; accumulates parameter gradients
/// into `grads` and returns the sample loss.
fn accumulate_grads(
    params: &ModelParams,
    tokens: &[usize],
    label: usize,
    grads: &mut ModelParams,
) -> f64 {
    let d = params.hidden_w.rows;
    let h = params.hidden_w.cols;
    let labels = params.label_count();
    let pooled = pool_tokens(params, tokens);
    let fwd = forward_pooled(params, &pooled);
    let sample_loss = -fwd.probs[label].ln();

    let mut d_logits = fwd.probs.clone();
    d_logits[label] -= 1.0;
    // Output layer.
    for i in 0..h {
        let a = fwd.hidden[i];
        let g_row = &mut grads.out_w.data[i * labels..(i + 1) * labels];
        for l in 0..labels {
            g_row[l] += a * d_logits[l];
        }
    }
    axpy(&mut grads.out_b, &d_logits, 1.0);
    // Hidden layer.
    let mut d_pre = vec![0.0; h];
    for i in 0..h {
        let mut acc = 0.0;
        let w_row = params.out_w.row(i);
        for l in 0..labels {
            acc += w_row[l] * d_logits[l];
        }
        d_pre[i] = acc * (1.0 - fwd.hidden[i] * fwd.hidden[i]);
    }
    for e in 0..d {
        let p = pooled[e];
        let g_row = &mut grads.hidden_w.data[e * h..(e + 1) * h];
        for i in 0..h {
            g_row[i] += p * d_pre[i];
        }
    }
    axpy(&mut grads.hidden_b, &d_pre, 1.0);
    // Embedding (through the mean pool).
    let mut d_pooled = vec![0.0; d];
    for e in 0..d {
        let w_row = params.hidden_w.row(e);
        let mut acc = 0.0;
        for i in 0..h {
            acc += w_row[i] * d_pre[i];
        }
        d_pooled[e] = acc;
    }
    let inv_n = 1.0 / tokens.len() as f64;
    for &t in tokens {
        let g_row = &mut grads.embed.data[t * d..(t + 1) * d];
        for e in 0..d {
            g_row[e] += d_pooled[e] * inv_n;
        }
    }
    sample_loss
}

/// Training accuracy of `params` over a corpus (argmax = label).
#[must_use]
pub fn training_accuracy(
    params: &ModelParams,
    corpus: &[CodeSnippet],
    vocab: &Vocabulary,
    labels: &LabelSet,
) -> f64 {
    let mut correct = 0usize;
    for s in corpus {
        let idxs: Vec<usize> = s
            .tokens
            .iter()
            .map(|t| vocab.index_or_sentinel(t))
            .collect();
        let probs = predict_tokens(params, &idxs);
        let arg = argmax(&probs);
        if labels.label(arg) == Some(s.label.as_str()) {
            correct += 1;
        }
    }
    correct as f64 / corpus.len() as f64
}

/// Index of the largest entry (ties to the lowest index).
#[must_use]
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    vocab_size: usize,
    d: usize,
    h: usize,
    label_count: usize,
    vocab_hash: String,
    label_hash: String,
    embed: Vec<f64>,
    hidden_w: Vec<f64>,
    hidden_b: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes a parameter checkpoint annotated with the vocabulary and label-set
/// hashes. Tensors are dumped as JSON numbers, which round-trip `f64` exactly.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    vocab: &Vocabulary,
    labels: &LabelSet,
) -> Result<(), SurrogateError> {
    let cp = Checkpoint {
        version: CHECKPOINT_VERSION,
        vocab_size: params.vocab_size(),
        d: params.hidden_w.rows,
        h: params.hidden_w.cols,
        label_count: params.label_count(),
        vocab_hash: vocab.hash_hex(),
        label_hash: labels.hash_hex(),
        embed: params.embed.data.clone(),
        hidden_w: params.hidden_w.data.clone(),
        hidden_b: params.hidden_b.clone(),
        out_w: params.out_w.data.clone(),
        out_b: params.out_b.clone(),
    };
    fs::write(path, serde_json::to_string(&cp)?)?;
    Ok(())
}

/// Loads a checkpoint, refusing on version or hash mismatch against the
/// supplied vocabulary and label set.
pub fn load_checkpoint(
    path: &Path,
    vocab: &Vocabulary,
    labels: &LabelSet,
) -> Result<ModelParams, SurrogateError> {
    let cp: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(SurrogateError::UnsupportedVersion(cp.version));
    }
    if cp.vocab_hash != vocab.hash_hex() {
        return Err(SurrogateError::HashMismatch {
            what: "vocabulary",
            expected: cp.vocab_hash,
            found: vocab.hash_hex(),
        });
    }
    if cp.label_hash != labels.hash_hex() {
        return Err(SurrogateError::HashMismatch {
            what: "label set",
            expected: cp.label_hash,
            found: labels.hash_hex(),
        });
    }
    let check = |name: &str, len: usize, expect: usize| {
        if len == expect {
            Ok(())
        } else {
            Err(SurrogateError::DimensionMismatch(format!(
                "{name}: {len} entries, expected {expect}"
            )))
        }
    };
    check("embed", cp.embed.len(), cp.vocab_size * cp.d)?;
    check("hidden_w", cp.hidden_w.len(), cp.d * cp.h)?;
    check("hidden_b", cp.hidden_b.len(), cp.h)?;
    check("out_w", cp.out_w.len(), cp.h * cp.label_count)?;
    check("out_b", cp.out_b.len(), cp.label_count)?;
    Ok(ModelParams {
        embed: Mat {
            rows: cp.vocab_size,
            cols: cp.d,
            data: cp.embed,
        },
        hidden_w: Mat {
            rows: cp.d,
            cols: cp.h,
            data: cp.hidden_w,
        },
        hidden_b: cp.hidden_b,
        out_w: Mat {
            rows: cp.h,
            cols: cp.label_count,
            data: cp.out_w,
        },
        out_b: cp.out_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, CodeSnippet};

    fn tiny_setup() -> (Vec<CodeSnippet>, Vocabulary, LabelSet) {
        let corpus = corpus::synthesize_corpus(10, 4, 11);
        let vocab = Vocabulary::build(&corpus, &[]);
        let labels = LabelSet::build(&corpus);
        (corpus, vocab, labels)
    }

    fn random_simplex_input(width: usize, rows: usize, seed: u64) -> RelaxedInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..rows)
            .map(|_| {
                let mut row: Vec<f64> = (0..width).map(|_| rng.gen_range(0.0..1.0)).collect();
                let sum: f64 = row.iter().sum();
                for v in &mut row {
                    *v /= sum;
                }
                row
            })
            .collect();
        RelaxedInput { rows }
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let config = TrainConfig::default();
        let a = init_params(40, 7, &config);
        let b = init_params(40, 7, &config);
        assert_eq!(a, b);
        assert_eq!(a.embed.rows, 40);
        assert_eq!(a.embed.cols, 16);
        assert_eq!(a.hidden_w.rows, 16);
        assert_eq!(a.hidden_w.cols, 32);
        assert_eq!(a.hidden_b.len(), 32);
        assert_eq!(a.out_w.rows, 32);
        assert_eq!(a.out_w.cols, 7);
        assert_eq!(a.out_b.len(), 7);
    }

    #[test]
    fn zero_params_predict_uniform() {
        let params = ModelParams::zeros(10, 5, 4, 6);
        let input = RelaxedInput::from_token_indices(&[1, 2, 3], 10);
        let probs = predict(&params, &input).unwrap();
        for p in probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_loss_is_ln_label_count() {
        let params = ModelParams::zeros(10, 5, 4, 6);
        let input = RelaxedInput::from_token_indices(&[0], 10);
        let l = loss(&params, &input, 3).unwrap();
        assert!((l - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_normalizes_within_1e9() {
        let config = TrainConfig {
            seed: 5,
            ..TrainConfig::default()
        };
        let params = init_params(30, 9, &config);
        for seed in 0..20 {
            let input = random_simplex_input(30, 12, seed);
            let probs = predict(&params, &input).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn mean_pool_is_permutation_invariant() {
        let config = TrainConfig::default();
        let params = init_params(20, 4, &config);
        let a = RelaxedInput::from_token_indices(&[3, 7, 7, 1], 20);
        let b = RelaxedInput::from_token_indices(&[7, 3, 7, 1], 20);
        assert_eq!(predict(&params, &a).unwrap(), predict(&params, &b).unwrap());
    }

    #[test]
    fn one_hot_input_matches_token_fast_path() {
        let config = TrainConfig {
            seed: 9,
            ..TrainConfig::default()
        };
        let params = init_params(25, 6, &config);
        let indices = [4usize, 0, 17, 24, 9];
        let dense = RelaxedInput::from_token_indices(&indices, 25);
        let via_dense = predict(&params, &dense).unwrap();
        let via_tokens = predict_tokens(&params, &indices);
        for (a, b) in via_dense.iter().zip(&via_tokens) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Independently coded forward pass (different loop structure) used as a
    /// second-implementation oracle for loss values.
    fn naive_loss(params: &ModelParams, input: &RelaxedInput, label: usize) -> f64 {
        let d = params.hidden_w.rows;
        let width = params.vocab_size();
        let mut mass = 0.0;
        let mut pooled = vec![0.0; d];
        for e in 0..d {
            let mut acc = 0.0;
            for row in &input.rows {
                for j in 0..width {
                    acc += row[j] * params.embed.at(j, e);
                }
            }
            pooled[e] = acc;
        }
        for row in &input.rows {
            mass += row.iter().sum::<f64>();
        }
        for v in &mut pooled {
            *v /= mass;
        }
        let h = params.hidden_w.cols;
        let hidden: Vec<f64> = (0..h)
            .map(|i| {
                let mut acc = params.hidden_b[i];
                for e in 0..d {
                    acc += pooled[e] * params.hidden_w.at(e, i);
                }
                acc.tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..params.label_count())
            .map(|l| {
                let mut acc = params.out_b[l];
                for i in 0..h {
                    acc += hidden[i] * params.out_w.at(i, l);
                }
                acc
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        -((logits[label] - max).exp() / z).ln()
    }

    #[test]
    fn loss_matches_independent_forward_pass() {
        let config = TrainConfig {
            seed: 21,
            ..TrainConfig::default()
        };
        let params = init_params(18, 5, &config);
        for seed in 0..5 {
            let input = random_simplex_input(18, 7, seed);
            let fast = loss(&params, &input, (seed % 5) as usize).unwrap();
            let slow = naive_loss(&params, &input, (seed % 5) as usize);
            assert!((fast - slow).abs() < 1e-12, "fast {fast} vs naive {slow}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let step = 1e-4;
        for model_seed in 0..10u64 {
            let config = TrainConfig {
                d: 6,
                h: 8,
                seed: model_seed,
                ..TrainConfig::default()
            };
            let params = init_params(12, 4, &config);
            let input = random_simplex_input(12, 5, model_seed ^ 0xf00d);
            let label = (model_seed % 4) as usize;
            let analytic = grad_input(&params, &input, label).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(model_seed ^ 0xbeef);
            for _ in 0..20 {
                let p = rng.gen_range(0..input.rows.len());
                let j = rng.gen_range(0..12);
                let mut plus = input.clone();
                plus.rows[p][j] += step;
                let mut minus = input.clone();
                minus.rows[p][j] -= step;
                let numeric = (loss(&params, &plus, label).unwrap()
                    - loss(&params, &minus, label).unwrap())
                    / (2.0 * step);
                let a = analytic[p][j];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom <= 1e-4,
                    "rel err too large: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_confident_optimum() {
        // Pin the prediction to the true label with a huge output bias: the
        // softmax saturates and the input gradient collapses to ~0.
        let mut params = ModelParams::zeros(8, 3, 4, 5);
        params.out_b[1] = 50.0;
        let input = RelaxedInput::from_token_indices(&[2, 5], 8);
        let g = grad_input_base(&params, &input, 1).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn fixed_rows_receive_gradients() {
        let config = TrainConfig {
            seed: 3,
            ..TrainConfig::default()
        };
        let params = init_params(10, 3, &config);
        let input = RelaxedInput::from_token_indices(&[1, 2], 10);
        let grads = grad_input(&params, &input, 0).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[0], grads[1]);
        assert!(grads[0].iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn overfits_tiny_corpus() {
        let (corpus, vocab, labels) = tiny_setup();
        let config = TrainConfig {
            epochs: 200,
            seed: 2,
            ..TrainConfig::default()
        };
        let outcome = train(&corpus, &vocab, &labels, &config).unwrap();
        assert_eq!(
            training_accuracy(&outcome.params, &corpus, &vocab, &labels),
            1.0
        );
        // Mean loss is non-increasing over the first three epochs.
        assert!(outcome.epoch_losses[0] >= outcome.epoch_losses[1]);
        assert!(outcome.epoch_losses[1] >= outcome.epoch_losses[2]);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let (corpus, vocab, labels) = tiny_setup();
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            seed: 8,
            ..TrainConfig::default()
        };
        let outcome = train(&corpus, &vocab, &labels, &config).unwrap();
        assert_eq!(outcome.params, init_params(vocab.len(), labels.len(), &config));
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (corpus, vocab, labels) = tiny_setup();
        let config = TrainConfig {
            epochs: 12,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&corpus, &vocab, &labels, &config).unwrap();
        let b = train(&corpus, &vocab, &labels, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn empty_corpus_rejected() {
        let vocab = Vocabulary::build(&[], &["x".to_owned()]);
        let labels = LabelSet::from_labels(vec!["f".to_owned()]).unwrap();
        assert!(matches!(
            train(&[], &vocab, &labels, &TrainConfig::default()),
            Err(SurrogateError::EmptyCorpus)
        ));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let (corpus, vocab, labels) = tiny_setup();
        let config = TrainConfig {
            epochs: 5,
            seed: 6,
            ..TrainConfig::default()
        };
        let outcome = train(&corpus, &vocab, &labels, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        save_checkpoint(&path, &outcome.params, &vocab, &labels).unwrap();
        let loaded = load_checkpoint(&path, &vocab, &labels).unwrap();
        assert_eq!(loaded, outcome.params);
    }

    #[test]
    fn checkpoint_hash_mismatch_rejected() {
        let (corpus, vocab, labels) = tiny_setup();
        let config = TrainConfig {
            epochs: 2,
            seed: 6,
            ..TrainConfig::default()
        };
        let outcome = train(&corpus, &vocab, &labels, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        save_checkpoint(&path, &outcome.params, &vocab, &labels).unwrap();
        let other_vocab = Vocabulary::build(&corpus, &["extra_token".to_owned()]);
        assert!(matches!(
            load_checkpoint(&path, &other_vocab, &labels),
            Err(SurrogateError::HashMismatch { what: "vocabulary", .. })
        ));
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            // predict always returns a probability vector.
            #[test]
            fn prop_predict_is_distribution(seed in 0u64..500, rows in 1usize..10) {
                let config = TrainConfig { d: 5, h: 7, seed, ..TrainConfig::default() };
                let params = init_params(15, 6, &config);
                let input = random_simplex_input(15, rows, seed ^ 0x55);
                let probs = predict(&params, &input).unwrap();
                let sum: f64 = probs.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                prop_assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }
}
