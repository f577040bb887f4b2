//! Symmetric image-text contrastive alignment.
//!
//! For a batch of N paired embeddings `v_i`, `t_i` and temperature `tau`, with
//! logits `L_ij = v_i . t_j / tau`, the loss is
//!
//! ```text
//! -(1 / 2N) * sum_i [ log softmax_j(L_ij)[i] + log softmax_j(L_ji)[i] ]
//! ```
//!
//! i.e. the mean of an image-to-text and a text-to-image cross entropy with the
//! matching pair as target. Both log-sum-exps are max-subtracted.
//!
//! The toy trainer fits an affine image encoder and a bag-of-tokens text encoder
//! at desk scale with Adam, learning `log tau` alongside.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{dot, UnitEmbedding, EMBED_DIM};
use crate::error::{Error, Result};

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_batch(visual: &[Vec<f64>], text: &[Vec<f64>], tau: f64) -> Result<usize> {
    if visual.len() != text.len() {
        return Err(Error::DimensionMismatch {
            expected: visual.len(),
            actual: text.len(),
        });
    }
    if visual.is_empty() {
        return Err(Error::EmptyInput("alignment batch"));
    }
    let d = visual[0].len();
    if let Some(v) = visual.iter().chain(text).find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: v.len(),
        });
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau}")));
    }
    Ok(visual.len())
}

fn logits(visual: &[Vec<f64>], text: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    visual
        .iter()
        .map(|v| text.iter().map(|t| dot(v, t) / tau).collect())
        .collect()
}

/// Contrastive loss over raw vectors (normalization is the caller's concern).
pub fn contrastive_loss(visual: &[Vec<f64>], text: &[Vec<f64>], tau: f64) -> Result<f64> {
    let n = check_batch(visual, text, tau)?;
    let l = logits(visual, text, tau);
    let mut total = 0.0;
    for i in 0..n {
        let row = log_sum_exp(l[i].iter().copied());
        let col = log_sum_exp((0..n).map(|k| l[k][i]));
        total += (row - l[i][i]) + (col - l[i][i]);
    }
    Ok(total / (2.0 * n as f64))
}

/// Symmetric contrastive loss on normalized embeddings.
pub fn dssa_loss(
    visual: &[UnitEmbedding],
    text: &[UnitEmbedding],
    tau: crate::embeddings::Temperature,
) -> Result<f64> {
    let v: Vec<Vec<f64>> = visual.iter().map(|e| e.as_slice().to_vec()).collect();
    let t: Vec<Vec<f64>> = text.iter().map(|e| e.as_slice().to_vec()).collect();
    contrastive_loss(&v, &t, tau.value())
}

/// Partial derivatives of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub visual: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub tau: f64,
}

/// Loss and its analytic gradient with respect to every vector component and tau.
pub fn contrastive_loss_gradient(
    visual: &[Vec<f64>],
    text: &[Vec<f64>],
    tau: f64,
) -> Result<LossGradient> {
    let n = check_batch(visual, text, tau)?;
    let d = visual[0].len();
    let l = logits(visual, text, tau);
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(l[i].iter().copied())).collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| log_sum_exp((0..n).map(|k| l[k][j])))
        .collect();

    let scale = 1.0 / (2.0 * n as f64);
    let mut loss = 0.0;
    // dLoss / dL_ab
    let mut g = vec![vec![0.0; n]; n];
    for a in 0..n {
        loss += (row_lse[a] - l[a][a]) + (col_lse[a] - l[a][a]);
        for b in 0..n {
            let p = (l[a][b] - row_lse[a]).exp();
            let q = (l[a][b] - col_lse[b]).exp();
            let target = if a == b { 2.0 } else { 0.0 };
            g[a][b] = scale * (p + q - target);
        }
    }
    loss *= scale;

    let mut d_visual = vec![vec![0.0; d]; n];
    let mut d_text = vec![vec![0.0; d]; n];
    let mut d_tau = 0.0;
    for a in 0..n {
        for b in 0..n {
            let w = g[a][b] / tau;
            for k in 0..d {
                d_visual[a][k] += w * text[b][k];
                d_text[b][k] += w * visual[a][k];
            }
            d_tau -= g[a][b] * l[a][b] / tau;
        }
    }
    Ok(LossGradient {
        loss,
        visual: d_visual,
        text: d_text,
        tau: d_tau,
    })
}

/// [`contrastive_loss_gradient`] on normalized embeddings.
pub fn dssa_loss_gradient(
    visual: &[UnitEmbedding],
    text: &[UnitEmbedding],
    tau: crate::embeddings::Temperature,
) -> Result<LossGradient> {
    let v: Vec<Vec<f64>> = visual.iter().map(|e| e.as_slice().to_vec()).collect();
    let t: Vec<Vec<f64>> = text.iter().map(|e| e.as_slice().to_vec()).collect();
    contrastive_loss_gradient(&v, &t, tau.value())
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature_init: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            learning_rate: 5e-7,
            batch_size: 20,
            temperature_init: 0.07,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be positive".into(),
            ));
        }
        // a zero learning rate is allowed: it evaluates the loss without moving anything
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if !(self.temperature_init.is_finite() && self.temperature_init > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature {}",
                self.temperature_init
            )));
        }
        Ok(())
    }
}

/// One positional image-caption pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentItem {
    pub features: Vec<f64>,
    pub caption: String,
}

/// N pairs; item i's caption is its positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBatch {
    pub items: Vec<AlignmentItem>,
}

impl AlignmentBatch {
    pub fn new(items: Vec<AlignmentItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("alignment batch"));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Split a caption into lowercase alphanumeric tokens.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Trainable toy encoders: `normalize(W x + b)` for images and the normalized
/// mean of per-token vectors for captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// `embed_dim x feature_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Sorted token list; row i of `token_table` belongs to `tokens[i]`.
    pub tokens: Vec<String>,
    /// `tokens.len() x embed_dim`, row-major.
    pub token_table: Vec<f64>,
    pub log_tau: f64,
}

impl ToyParams {
    /// Seeded initialization with a token table covering every caption in `batches`.
    pub fn init(
        feature_dim: usize,
        embed_dim: usize,
        batches: &[AlignmentBatch],
        tau_init: f64,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim == 0 || embed_dim == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if !(tau_init.is_finite() && tau_init > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {tau_init}")));
        }
        let tokens: Vec<String> = batches
            .iter()
            .flat_map(|b| &b.items)
            .flat_map(|i| tokenize(&i.caption))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if tokens.is_empty() {
            return Err(Error::EmptyInput("caption tokens"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_scale = 1.0 / (feature_dim as f64).sqrt();
        let mut uniform = |scale: f64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                .collect()
        };
        let weights = uniform(w_scale, embed_dim * feature_dim);
        let bias = uniform(0.1, embed_dim);
        let token_table = uniform(1.0, tokens.len() * embed_dim);
        Ok(Self {
            feature_dim,
            embed_dim,
            weights,
            bias,
            tokens,
            token_table,
            log_tau: tau_init.ln(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    fn affine(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: features.len(),
            });
        }
        Ok((0..self.embed_dim)
            .map(|r| {
                let row = &self.weights[r * self.feature_dim..(r + 1) * self.feature_dim];
                dot(row, features) + self.bias[r]
            })
            .collect())
    }

    fn token_ids(&self, caption: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = tokenize(caption)
            .iter()
            .filter_map(|t| self.tokens.binary_search(t).ok())
            .collect();
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "caption {caption:?} has no known token"
            )));
        }
        Ok(ids)
    }

    fn token_mean(&self, ids: &[usize]) -> Vec<f64> {
        let mut u = vec![0.0; self.embed_dim];
        for &id in ids {
            let row = &self.token_table[id * self.embed_dim..(id + 1) * self.embed_dim];
            u.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let n = ids.len() as f64;
        u.iter_mut().for_each(|a| *a /= n);
        u
    }

    pub fn encode_features(&self, features: &[f64]) -> Result<UnitEmbedding> {
        let z = self.affine(features)?;
        crate::embeddings::l2_normalize(&crate::embeddings::Embedding::new(z)?)
    }

    pub fn encode_caption(&self, caption: &str) -> Result<UnitEmbedding> {
        let u = self.token_mean(&self.token_ids(caption)?);
        crate::embeddings::l2_normalize(&crate::embeddings::Embedding::new(u)?)
    }
}

fn normalize_with_norm(z: Vec<f64>) -> Result<(Vec<f64>, f64)> {
    let n = crate::embeddings::norm(&z);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::DegenerateEmbedding(format!("norm {n}")));
    }
    Ok((z.into_iter().map(|c| c / n).collect(), n))
}

/// Back-propagate through `y = z / |z|`.
fn normalize_backward(y: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    let proj = dot(y, dy);
    y.iter().zip(dy).map(|(yi, dyi)| (dyi - yi * proj) / norm).collect()
}

struct ParamGrads {
    weights: Vec<f64>,
    bias: Vec<f64>,
    token_table: Vec<f64>,
    log_tau: f64,
}

/// Batch loss and gradients with respect to every trainable parameter.
fn batch_loss_and_grads(params: &ToyParams, batch: &AlignmentBatch) -> Result<(f64, ParamGrads)> {
    let mut vis = Vec::with_capacity(batch.len());
    let mut vis_norms = Vec::with_capacity(batch.len());
    let mut txt = Vec::with_capacity(batch.len());
    let mut txt_norms = Vec::with_capacity(batch.len());
    let mut ids = Vec::with_capacity(batch.len());
    for item in &batch.items {
        let (v, n) = normalize_with_norm(params.affine(&item.features)?)?;
        vis.push(v);
        vis_norms.push(n);
        let tok = params.token_ids(&item.caption)?;
        let (t, n) = normalize_with_norm(params.token_mean(&tok))?;
        txt.push(t);
        txt_norms.push(n);
        ids.push(tok);
    }
    let tau = params.tau();
    let lg = contrastive_loss_gradient(&vis, &txt, tau)?;

    let f = params.feature_dim;
    let e = params.embed_dim;
    let mut grads = ParamGrads {
        weights: vec![0.0; params.weights.len()],
        bias: vec![0.0; e],
        token_table: vec![0.0; params.token_table.len()],
        log_tau: lg.tau * tau,
    };
    for (i, item) in batch.items.iter().enumerate() {
        let dz = normalize_backward(&vis[i], vis_norms[i], &lg.visual[i]);
        for r in 0..e {
            grads.bias[r] += dz[r];
            let row = &mut grads.weights[r * f..(r + 1) * f];
            row.iter_mut()
                .zip(&item.features)
                .for_each(|(g, x)| *g += dz[r] * x);
        }
        let du = normalize_backward(&txt[i], txt_norms[i], &lg.text[i]);
        let share = 1.0 / ids[i].len() as f64;
        for &id in &ids[i] {
            let row = &mut grads.token_table[id * e..(id + 1) * e];
            row.iter_mut().zip(&du).for_each(|(g, d)| *g += d * share);
        }
    }
    Ok((lg.loss, grads))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    /// 0 is the evaluation at initialization.
    pub epoch: usize,
    pub mean_loss: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: ToyParams,
    pub trace: Vec<EpochStat>,
    pub seed: u64,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0].mean_loss
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map(|s| s.mean_loss).unwrap_or(f64::NAN)
    }
}

/// Mean loss over `batches` without updating anything.
pub fn evaluate_loss(params: &ToyParams, batches: &[AlignmentBatch]) -> Result<f64> {
    let mut sum = 0.0;
    for b in batches {
        sum += batch_loss_and_grads(params, b)?.0;
    }
    Ok(sum / batches.len().max(1) as f64)
}

/// Train the toy encoders with Adam, one step per batch, batches in the given order.
///
/// Trace row 0 holds the loss at initialization; row `e` holds the mean of the
/// pre-update batch losses during epoch `e`.
pub fn train_toy(
    config: &TrainConfig,
    params: ToyParams,
    batches: &[AlignmentBatch],
) -> Result<TrainOutcome> {
    config.validate()?;
    if batches.is_empty() {
        return Err(Error::EmptyInput("training batches"));
    }
    let mut params = params;
    let mut trace = vec![EpochStat {
        epoch: 0,
        mean_loss: evaluate_loss(&params, batches)?,
        tau: params.tau(),
    }];
    let mut w_state = AdamState::new(params.weights.len());
    let mut b_state = AdamState::new(params.bias.len());
    let mut t_state = AdamState::new(params.token_table.len());
    let mut tau_state = AdamState::new(1);
    let mut step = 0i32;

    for epoch in 1..=config.epochs {
        let mut sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let (loss, g) = batch_loss_and_grads(&params, batch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {bi}"
                )));
            }
            sum += loss;
            step += 1;
            let lr = config.learning_rate;
            w_state.step(&mut params.weights, &g.weights, lr, step);
            b_state.step(&mut params.bias, &g.bias, lr, step);
            t_state.step(&mut params.token_table, &g.token_table, lr, step);
            let mut lt = [params.log_tau];
            tau_state.step(&mut lt, &[g.log_tau], lr, step);
            params.log_tau = lt[0];
        }
        trace.push(EpochStat {
            epoch,
            mean_loss: sum / batches.len() as f64,
            tau: params.tau(),
        });
    }
    Ok(TrainOutcome {
        params,
        trace,
        seed: config.seed,
        steps: step as usize,
    })
}

/// Write the trace as `epoch,mean_loss,tau` CSV.
pub fn write_loss_trace<W: Write>(mut out: W, trace: &[EpochStat]) -> std::io::Result<()> {
    writeln!(out, "epoch,mean_loss,tau")?;
    for s in trace {
        writeln!(out, "{},{},{}", s.epoch, s.mean_loss, s.tau)?;
    }
    Ok(())
}

/// Two linearly separable feature clusters paired with two captions.
pub mod synthetic {
    use super::*;

    pub const CAPTIONS: [&str; 2] = ["alpha crop", "beta crop"];

    /// A labeled held-out point.
    #[derive(Debug, Clone, PartialEq)]
    pub struct LabeledPoint {
        pub features: Vec<f64>,
        pub class: usize,
    }

    /// Cluster centers at `+/- 2 * e_0`; per-dimension noise uniform in
    /// `[-0.5, 0.5]`, so the first coordinate alone separates the classes.
    pub fn sample(rng: &mut ChaCha8Rng, class: usize, feature_dim: usize) -> Vec<f64> {
        let sign = if class == 0 { 1.0 } else { -1.0 };
        (0..feature_dim)
            .map(|k| {
                let center = if k == 0 { 2.0 * sign } else { 0.0 };
                center + rng.random::<f64>() - 0.5
            })
            .collect()
    }

    /// `n_batches` two-item batches (one item per class) and `n_heldout` test points.
    pub fn two_cluster_task(
        seed: u64,
        n_batches: usize,
        n_heldout: usize,
        feature_dim: usize,
    ) -> (Vec<AlignmentBatch>, Vec<LabeledPoint>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let batches = (0..n_batches)
            .map(|_| AlignmentBatch {
                items: (0..2)
                    .map(|c| AlignmentItem {
                        features: sample(&mut rng, c, feature_dim),
                        caption: CAPTIONS[c].to_string(),
                    })
                    .collect(),
            })
            .collect();
        let heldout = (0..n_heldout)
            .map(|i| {
                let class = i % 2;
                LabeledPoint {
                    features: sample(&mut rng, class, feature_dim),
                    class,
                }
            })
            .collect();
        (batches, heldout)
    }

    /// Fraction of points whose embedding is nearest to their own caption's embedding.
    pub fn nearest_caption_accuracy(params: &ToyParams, points: &[LabeledPoint]) -> Result<f64> {
        let text = CAPTIONS
            .iter()
            .map(|c| params.encode_caption(c))
            .collect::<Result<Vec<_>>>()?;
        let mut correct = 0usize;
        for p in points {
            let v = params.encode_features(&p.features)?;
            let sims: Vec<f64> = text.iter().map(|t| v.dot(t)).collect();
            if crate::embeddings::argmax(&sims).0 == p.class {
                correct += 1;
            }
        }
        Ok(correct as f64 / points.len().max(1) as f64)
    }
}

/// Default embedding dimension for toy training.
pub const TOY_EMBED_DIM: usize = EMBED_DIM;

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;
    use crate::embeddings::{l2_normalize, Embedding, Temperature};

    fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                l2_normalize(&Embedding::new(v).unwrap()).unwrap().as_slice().to_vec()
            })
            .collect()
    }

    /// Literal transcription of the objective with plain exponentials.
    fn naive_loss(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
        let n = v.len();
        let mut total = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..n {
                let mut vt = 0.0;
                let mut tv = 0.0;
                for k in 0..v[i].len() {
                    vt += v[i][k] * t[j][k];
                    tv += t[i][k] * v[j][k];
                }
                row += (vt / tau).exp();
                col += (tv / tau).exp();
            }
            let mut pos = 0.0;
            for k in 0..v[i].len() {
                pos += v[i][k] * t[i][k];
            }
            total += ((pos / tau).exp() / row).ln() + ((pos / tau).exp() / col).ln();
        }
        -total / (2.0 * n as f64)
    }

    #[test]
    fn single_pair_is_zero() {
        let v = vec![vec![0.6, 0.8]];
        let t = vec![vec![1.0, 0.0]];
        assert_eq!(contrastive_loss(&v, &t, 0.07).unwrap(), 0.0);
        let g = contrastive_loss_gradient(&v, &t, 0.07).unwrap();
        assert!(g.visual[0].iter().chain(&g.text[0]).all(|&x| x == 0.0));
        assert_eq!(g.tau, 0.0);
    }

    #[test]
    fn uniform_similarity_gives_ln_n() {
        let v = vec![vec![1.0, 0.0]; 20];
        let loss = contrastive_loss(&v, &v, 0.07).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = random_unit(&mut rng, 6, 8);
        let t = random_unit(&mut rng, 6, 8);
        let a = contrastive_loss(&v, &t, 0.07).unwrap();
        assert!((a - naive_loss(&v, &t, 0.07)).abs() < 1e-10);
        let g = contrastive_loss_gradient(&v, &t, 0.07).unwrap();
        assert!((g.loss - a).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_fail() {
        let v = vec![vec![1.0, 0.0]; 2];
        let t = vec![vec![1.0, 0.0]; 3];
        assert!(contrastive_loss(&v, &t, 0.07).is_err());
        assert!(contrastive_loss(&v, &v, 0.0).is_err());
    }

    #[test]
    fn unit_embedding_wrappers() {
        let a = l2_normalize(&Embedding::new(vec![1.0, 2.0]).unwrap()).unwrap();
        let b = l2_normalize(&Embedding::new(vec![-2.0, 1.0]).unwrap()).unwrap();
        let l = dssa_loss(&[a.clone(), b.clone()], &[a.clone(), b.clone()], Temperature::default()).unwrap();
        assert!(l > 0.0 && l < 1e-5);
        let g = dssa_loss_gradient(&[a.clone(), b.clone()], &[a, b], Temperature::default()).unwrap();
        // V = T: the objective is symmetric in its two arguments
        assert_eq!(g.visual, g.text);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_unit(&mut rng, 5, 6);
        let t = random_unit(&mut rng, 5, 6);
        let perm = [3, 0, 4, 1, 2];
        let vp: Vec<_> = perm.iter().map(|&i| v[i].clone()).collect();
        let tp: Vec<_> = perm.iter().map(|&i| t[i].clone()).collect();
        let a = contrastive_loss(&v, &t, 0.1).unwrap();
        let b = contrastive_loss(&vp, &tp, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_unit(&mut rng, 4, 2);
        let t = random_unit(&mut rng, 4, 2);
        let (s, c) = 0.7f64.sin_cos();
        let rot = |x: &Vec<f64>| vec![c * x[0] - s * x[1], s * x[0] + c * x[1]];
        let vr: Vec<_> = v.iter().map(rot).collect();
        let tr: Vec<_> = t.iter().map(rot).collect();
        let a = contrastive_loss(&v, &t, 0.07).unwrap();
        let b = contrastive_loss(&vr, &tr, 0.07).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn loss_positive_with_tied_off_diagonal() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!(contrastive_loss(&v, &t, 0.07).unwrap() > 0.0);
    }

    #[test]
    fn toy_params_reject_unknown_caption() {
        let (batches, _) = two_cluster_task(0, 2, 0, 4);
        let p = ToyParams::init(4, 16, &batches, 0.07, 0).unwrap();
        assert!(p.encode_caption("gamma").is_err());
        assert!(p.encode_caption("Alpha, crop!").is_ok());
        assert!(p.encode_features(&[0.0; 3]).is_err());
    }

    #[test]
    fn toy_parameter_gradient_matches_finite_differences() {
        let (batches, _) = two_cluster_task(1, 1, 0, 3);
        let p = ToyParams::init(3, 6, &batches, 0.2, 9).unwrap();
        let (_, g) = batch_loss_and_grads(&p, &batches[0]).unwrap();
        let h = 1e-6;
        let f = |q: &ToyParams| batch_loss_and_grads(q, &batches[0]).unwrap().0;
        let check = |analytic: f64, perturb: &dyn Fn(&mut ToyParams, f64)| {
            let mut plus = p.clone();
            perturb(&mut plus, h);
            let mut minus = p.clone();
            perturb(&mut minus, -h);
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()), "{numeric} vs {analytic}");
        };
        check(g.weights[4], &|q, d| q.weights[4] += d);
        check(g.bias[2], &|q, d| q.bias[2] += d);
        check(g.token_table[7], &|q, d| q.token_table[7] += d);
        check(g.log_tau, &|q, d| q.log_tau += d);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (batches, _) = two_cluster_task(2, 4, 0, 4);
        let p = ToyParams::init(4, 32, &batches, 0.07, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train_toy(&cfg, p.clone(), &batches).unwrap();
        assert_eq!(out.params, p);
        assert!(out.trace.iter().all(|s| s.mean_loss == out.trace[0].mean_loss));
    }

    #[test]
    fn toy_training_separates_clusters() {
        let (batches, heldout) = two_cluster_task(7, 20, 200, 8);
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            seed: 7,
            ..TrainConfig::default()
        };
        let p = ToyParams::init(8, 64, &batches, cfg.temperature_init, cfg.seed).unwrap();
        let out = train_toy(&cfg, p, &batches).unwrap();
        assert_eq!(out.steps, 200);
        assert!(out.final_loss() < 0.5 * out.initial_loss());
        assert!(nearest_caption_accuracy(&out.params, &heldout).unwrap() >= 0.95);
    }

    #[test]
    fn trace_csv_layout() {
        let mut buf = Vec::new();
        write_loss_trace(&mut buf, &[EpochStat { epoch: 0, mean_loss: 0.5, tau: 0.07 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss,tau\n0,0.5,0.07\n");
    }
}
