//! Single-head, pre-norm, causal character transformer.
//!
//! ```text
//! x  = tok[id] + pos[s]
//! per block:
//!   x += Wo · Attn(RMS(x; ln1) · {Wq, Wk, Wv})
//!   x += Down · tanh(Up · RMS(x; ln2))
//! logits = Unembed · x
//! ```
//!
//! Weights are stored `out × in` and applied as `x · Wᵀ` on row-major
//! activations (one row per token).

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

use super::{LossAndGrads, Model};

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    /// Rows of the positional table; the longest sequence accepted.
    pub max_seq: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab: 96,
            d_model: 64,
            n_blocks: 2,
            max_seq: 128,
        }
    }
}

impl TransformerConfig {
    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// `batch` sequences of `seq` tokens each, stored row-major. `targets[i]` is
/// the token that should follow `inputs[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenBatch {
    /// Builds a batch from windows of `seq + 1` tokens.
    pub fn from_windows(windows: &[&[usize]]) -> Result<Self> {
        let seq = windows
            .first()
            .map(|w| w.len().saturating_sub(1))
            .ok_or_else(|| Error::config("empty batch"))?;
        if seq == 0 {
            return Err(Error::config("windows need at least two tokens"));
        }
        let mut inputs = Vec::with_capacity(windows.len() * seq);
        let mut targets = Vec::with_capacity(windows.len() * seq);
        for w in windows {
            if w.len() != seq + 1 {
                return Err(Error::config("ragged token windows"));
            }
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(Self {
            batch: windows.len(),
            seq,
            inputs,
            targets,
        })
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

#[derive(Clone, Debug)]
pub struct MiniTransformer {
    config: TransformerConfig,
    params: Vec<Matrix>,
}

const TOK: usize = 0;
const POS: usize = 1;
const PER_BLOCK: usize = 8;
const LN1: usize = 0;
const WQ: usize = 1;
const WK: usize = 2;
const WV: usize = 3;
const WO: usize = 4;
const LN2: usize = 5;
const UP: usize = 6;
const DOWN: usize = 7;

struct NormCache {
    xhat: Matrix,
    inv_rms: Vec<f64>,
}

struct BlockCache {
    norm1: NormCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// `tokens × seq`, see [`attention_forward`].
    probs: Matrix,
    att: Matrix,
    norm2: NormCache,
    c: Matrix,
    h: Matrix,
}

impl MiniTransformer {
    pub fn new(config: TransformerConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let f = config.mlp_dim();
        let lin = |rng: &mut Rng, out: usize, inp: usize, gain: f64| {
            rng.gaussian_matrix(out, inp)
                .scale(gain / (inp as f64).sqrt())
        };
        let resid = 1.0 / (2.0 * config.n_blocks as f64).sqrt();
        let mut params = vec![
            rng.gaussian_matrix(config.vocab, d).scale(0.5),
            rng.gaussian_matrix(config.max_seq, d).scale(0.1),
        ];
        for _ in 0..config.n_blocks {
            params.push(Matrix::from_fn(1, d, |_, _| 1.0));
            params.push(lin(rng, d, d, 1.0));
            params.push(lin(rng, d, d, 1.0));
            params.push(lin(rng, d, d, 1.0));
            params.push(lin(rng, d, d, resid));
            params.push(Matrix::from_fn(1, d, |_, _| 1.0));
            params.push(lin(rng, f, d, 1.0));
            params.push(lin(rng, d, f, resid));
        }
        params.push(lin(rng, config.vocab, d, 1.0));
        Self { config, params }
    }

    pub fn config(&self) -> TransformerConfig {
        self.config
    }

    fn block(&self, b: usize, which: usize) -> &Matrix {
        &self.params[2 + PER_BLOCK * b + which]
    }

    fn unembed_index(&self) -> usize {
        2 + PER_BLOCK * self.config.n_blocks
    }

    /// Zeroes the unembedding so every prediction is uniform.
    pub fn zero_unembedding(&mut self) {
        let i = self.unembed_index();
        self.params[i].scale_in_place(0.0);
    }

    fn check_tokens(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq == 0 || batch.batch == 0 {
            return Err(Error::config("empty token batch"));
        }
        if batch.seq > self.config.max_seq {
            return Err(Error::Range {
                what: "sequence length",
                detail: format!(
                    "{} exceeds positional table of {}",
                    batch.seq, self.config.max_seq
                ),
            });
        }
        if batch.inputs.len() != batch.tokens() || batch.targets.len() != batch.tokens() {
            return Err(Error::config(
                "token batch length does not match batch × seq",
            ));
        }
        let vocab = self.config.vocab;
        if let Some(&bad) = batch
            .inputs
            .iter()
            .chain(&batch.targets)
            .find(|&&t| t >= vocab)
        {
            return Err(Error::Range {
                what: "token id",
                detail: format!("{bad} >= vocab size {vocab}"),
            });
        }
        Ok(())
    }

    fn embed(&self, batch: &TokenBatch) -> Matrix {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(batch.tokens(), d);
        for (t, &id) in batch.inputs.iter().enumerate() {
            let s = t % batch.seq;
            let tok = self.params[TOK].row(id);
            let pos = self.params[POS].row(s);
            for ((o, a), b) in x.row_mut(t).iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }
        x
    }

    fn forward(&self, batch: &TokenBatch) -> Result<(Matrix, Vec<BlockCache>)> {
        let d = self.config.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = self.embed(batch);
        let mut caches = Vec::with_capacity(self.config.n_blocks);
        for b in 0..self.config.n_blocks {
            let (a, norm1) = rms_forward(&x, self.block(b, LN1).data());
            let q = a.matmul_nt(self.block(b, WQ))?;
            let k = a.matmul_nt(self.block(b, WK))?;
            let v = a.matmul_nt(self.block(b, WV))?;
            let (att, probs) = attention_forward(&q, &k, &v, batch.seq, scale);
            x.axpy(1.0, &att.matmul_nt(self.block(b, WO))?)?;

            let (c, norm2) = rms_forward(&x, self.block(b, LN2).data());
            let h = c.matmul_nt(self.block(b, UP))?.map(super::tanh);
            x.axpy(1.0, &h.matmul_nt(self.block(b, DOWN))?)?;
            caches.push(BlockCache {
                norm1,
                a,
                q,
                k,
                v,
                probs,
                att,
                norm2,
                c,
                h,
            });
        }
        Ok((x, caches))
    }

    /// Next-token logits, one row per input position.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Matrix> {
        self.check_tokens(batch)?;
        let (x, _) = self.forward(batch)?;
        x.matmul_nt(&self.params[self.unembed_index()])
    }

    /// Mean next-token cross-entropy.
    pub fn loss(&self, batch: &TokenBatch) -> Result<f64> {
        let logits = self.logits(batch)?;
        Ok(cross_entropy(&logits, &batch.targets).0)
    }

    pub fn forward_backward(&self, batch: &TokenBatch) -> Result<LossAndGrads> {
        self.check_tokens(batch)?;
        let d = self.config.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let (x_final, caches) = self.forward(batch)?;
        let unembed = &self.params[self.unembed_index()];
        let logits = x_final.matmul_nt(unembed)?;
        let (loss, d_logits) = cross_entropy(&logits, &batch.targets);

        let mut grads: Vec<Matrix> = self
            .params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let ui = self.unembed_index();
        grads[ui] = d_logits.matmul_tn(&x_final)?;
        let mut dx = d_logits.matmul(unembed)?;

        for b in (0..self.config.n_blocks).rev() {
            let cache = &caches[b];
            let base = 2 + PER_BLOCK * b;

            // MLP branch
            grads[base + DOWN] = dx.matmul_tn(&cache.h)?;
            let dh = dx.matmul(self.block(b, DOWN))?;
            let du = dh.zip_map(&cache.h, "tanh backward", |g, h| g * (1.0 - h * h))?;
            grads[base + UP] = du.matmul_tn(&cache.c)?;
            let dc = du.matmul(self.block(b, UP))?;
            let (dx_norm, dg2) = rms_backward(&dc, &cache.norm2, self.block(b, LN2).data());
            grads[base + LN2] = dg2;
            dx.axpy(1.0, &dx_norm)?;

            // attention branch
            grads[base + WO] = dx.matmul_tn(&cache.att)?;
            let datt = dx.matmul(self.block(b, WO))?;
            let (dq, dk, dv) = attention_backward(&datt, cache, batch.seq, scale);
            grads[base + WQ] = dq.matmul_tn(&cache.a)?;
            grads[base + WK] = dk.matmul_tn(&cache.a)?;
            grads[base + WV] = dv.matmul_tn(&cache.a)?;
            let mut da = dq.matmul(self.block(b, WQ))?;
            da.axpy(1.0, &dk.matmul(self.block(b, WK))?)?;
            da.axpy(1.0, &dv.matmul(self.block(b, WV))?)?;
            let (dx_norm, dg1) = rms_backward(&da, &cache.norm1, self.block(b, LN1).data());
            grads[base + LN1] = dg1;
            dx.axpy(1.0, &dx_norm)?;
        }

        for (t, &id) in batch.inputs.iter().enumerate() {
            let s = t % batch.seq;
            let row = dx.row(t);
            for (g, v) in grads[TOK].row_mut(id).iter_mut().zip(row) {
                *g += v;
            }
            for (g, v) in grads[POS].row_mut(s).iter_mut().zip(row) {
                *g += v;
            }
        }
        Ok(LossAndGrads { loss, grads })
    }
}

impl Model for MiniTransformer {
    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed.tok".to_string(), "embed.pos".to_string()];
        for b in 0..self.config.n_blocks {
            for leaf in [
                "ln1.gain", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "mlp.up",
                "mlp.down",
            ] {
                names.push(format!("blocks.{b}.{leaf}"));
            }
        }
        names.push("unembed".to_string());
        names
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes: Vec<Vec<usize>> = self
            .params
            .iter()
            .map(|p| vec![p.rows(), p.cols()])
            .collect();
        for b in 0..self.config.n_blocks {
            for which in [LN1, LN2] {
                shapes[2 + PER_BLOCK * b + which] = vec![self.config.d_model];
            }
        }
        shapes
    }

    fn params(&self) -> &[Matrix] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }
}

fn rms_forward(x: &Matrix, gain: &[f64]) -> (Matrix, NormCache) {
    let d = x.cols() as f64;
    let mut xhat = x.clone();
    let mut inv_rms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
        inv_rms.push(inv);
    }
    let mut y = xhat.clone();
    for i in 0..y.rows() {
        for (v, g) in y.row_mut(i).iter_mut().zip(gain) {
            *v *= g;
        }
    }
    (y, NormCache { xhat, inv_rms })
}

/// Returns `(dx, dgain)` with `dgain` shaped `1 × d`.
fn rms_backward(dy: &Matrix, cache: &NormCache, gain: &[f64]) -> (Matrix, Matrix) {
    let d = dy.cols();
    let mut dgain = Matrix::zeros(1, d);
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows() {
        let xh = cache.xhat.row(i);
        let g_row = dy.row(i);
        for j in 0..d {
            dgain.data_mut()[j] += g_row[j] * xh[j];
            dxhat[j] = g_row[j] * gain[j];
        }
        let mean_dot = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let inv = cache.inv_rms[i];
        for (o, (a, b)) in dx.row_mut(i).iter_mut().zip(dxhat.iter().zip(xh)) {
            *o = inv * (a - b * mean_dot);
        }
    }
    (dx, dgain)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Causal single-head attention over consecutive blocks of `seq` rows.
/// Returns the output and the probabilities, where row `t` holds the weights
/// of token `t` over the positions of its own sequence (zero above the diagonal).
fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    seq: usize,
    scale: f64,
) -> (Matrix, Matrix) {
    let (tokens, d) = q.shape();
    let mut att = Matrix::zeros(tokens, d);
    let mut probs = Matrix::zeros(tokens, seq);
    for t in 0..tokens {
        let base = t - t % seq;
        let i = t % seq;
        let p = &mut probs.row_mut(t)[..=i];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(q.row(t), k.row(base + j)) * scale;
        }
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        p.iter_mut().for_each(|pj| *pj /= sum);
        let out = att.row_mut(t);
        for (j, &pj) in probs.row(t)[..=i].iter().enumerate() {
            for (o, vv) in out.iter_mut().zip(v.row(base + j)) {
                *o += pj * vv;
            }
        }
    }
    (att, probs)
}

fn attention_backward(
    datt: &Matrix,
    cache: &BlockCache,
    seq: usize,
    scale: f64,
) -> (Matrix, Matrix, Matrix) {
    let (tokens, d) = datt.shape();
    let (q, k, v, probs) = (&cache.q, &cache.k, &cache.v, &cache.probs);
    let mut dq = Matrix::zeros(tokens, d);
    let mut dk = Matrix::zeros(tokens, d);
    let mut dv = Matrix::zeros(tokens, d);
    let mut ds = vec![0.0; seq];
    for t in 0..tokens {
        let base = t - t % seq;
        let i = t % seq;
        let p = &probs.row(t)[..=i];
        let g = datt.row(t);
        // dP_ij = dAtt_i · v_j, then the softmax Jacobian
        let ds = &mut ds[..=i];
        for (j, dsj) in ds.iter_mut().enumerate() {
            *dsj = dot(g, v.row(base + j));
        }
        let mean = dot(p, ds);
        for (dsj, pj) in ds.iter_mut().zip(p) {
            *dsj = pj * (*dsj - mean) * scale;
        }
        for j in 0..=i {
            let (pj, sj) = (p[j], ds[j]);
            for (o, gv) in dv.row_mut(base + j).iter_mut().zip(g) {
                *o += pj * gv;
            }
            for (o, kv) in dq.row_mut(t).iter_mut().zip(k.row(base + j)) {
                *o += sj * kv;
            }
            for (o, qv) in dk.row_mut(base + j).iter_mut().zip(q.row(t)) {
                *o += sj * qv;
            }
        }
    }
    (dq, dk, dv)
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Matrix, targets: &[usize]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut grad = logits.clone();
    let mut per_row = Vec::with_capacity(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        per_row.push(sum.ln() + max - logits.get(i, t));
        for v in row.iter_mut() {
            *v /= sum * n;
        }
        row[t] -= 1.0 / n;
    }
    (pairwise_sum(&per_row) / n, grad)
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
