//! Forward pass with per-layer caches for the reverse pass.
//!
//! Pre-layer-norm blocks, causal attention with exact softmax, tanh-GELU
//! feed-forward. Attention at position `t` only ever reads keys and values
//! at positions `<= t`, so causality holds bitwise, not just numerically.

use std::collections::BTreeMap;

use crate::linalg::Matrix;
use crate::model::{ModelConfig, ModelError, Role, TransformerModel, ALL_ROLES};
use crate::scalar::{count, real, Scalar};

pub(crate) struct LnCache<T: Scalar> {
    /// Normalized activations (x − μ)/σ per position.
    pub xhat: Matrix<T>,
    pub rstd: Vec<T>,
}

pub(crate) struct BlockCache<T: Scalar> {
    pub ln1: LnCache<T>,
    /// LN1 output; the activation entering the q/k/v projections.
    pub a: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Per-head attention probabilities; row t holds weights for j <= t.
    pub attn: Vec<Matrix<T>>,
    /// Concatenated head outputs; the activation entering the output proj.
    pub ctx: Matrix<T>,
    pub ln2: LnCache<T>,
    /// LN2 output; the activation entering ff_in.
    pub m: Matrix<T>,
    /// ff_in pre-activation.
    pub f1: Matrix<T>,
    /// GELU output; the activation entering ff_out.
    pub g: Matrix<T>,
}

pub(crate) struct ForwardCache<T: Scalar> {
    pub blocks: Vec<BlockCache<T>>,
    pub lnf: LnCache<T>,
    pub fin: Matrix<T>,
    pub logits: Matrix<T>,
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = real::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c = real::<T>(0.044715);
    let u = k * (x + c * x * x * x);
    real::<T>(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let k = real::<T>(0.797_884_560_802_865_4);
    let c = real::<T>(0.044715);
    let half = real::<T>(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + real::<T>(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Layer norm over the feature dimension, per position.
pub(crate) fn layer_norm<T: Scalar>(
    x: &Matrix<T>,
    gain: &[T],
    bias: &[T],
) -> (Matrix<T>, LnCache<T>) {
    let (rows, cols) = x.shape();
    let eps = real::<T>(1e-5);
    let inv_n = T::one() / count::<T>(cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut rstd = Vec::with_capacity(rows);
    for t in 0..rows {
        let row = x.row(t);
        let mean = row.iter().copied().fold(T::zero(), |a, b| a + b) * inv_n;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(T::zero(), |a, b| a + b)
            * inv_n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for c in 0..cols {
            let h = (row[c] - mean) * r;
            xhat[(t, c)] = h;
            out[(t, c)] = gain[c] * h + bias[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// `y_t = W·x_t + b (+ off_t)` for every row of `x`.
fn affine_rows<T: Scalar>(
    w: &Matrix<T>,
    b: &[T],
    x: &Matrix<T>,
    off: Option<&Matrix<T>>,
) -> Matrix<T> {
    let rows = x.rows();
    let d_out = w.rows();
    let mut out = Matrix::zeros(rows, d_out);
    for t in 0..rows {
        let y = w.matvec(x.row(t)).expect("affine shape");
        let orow = out.row_mut(t);
        for (c, val) in y.into_iter().enumerate() {
            let mut v = val + b[c];
            if let Some(o) = off {
                v += o[(t, c)];
            }
            orow[c] = v;
        }
    }
    out
}

fn validate_offsets<T: Scalar>(
    cfg: &ModelConfig,
    offsets: &BTreeMap<String, Matrix<T>>,
) -> Result<(), ModelError> {
    for (name, off) in offsets {
        let role = name
            .split_once('.')
            .and_then(|(block, role)| {
                if !block.starts_with("block") {
                    return None;
                }
                let idx: usize = block[5..].parse().ok()?;
                if idx >= cfg.n_layers {
                    return None;
                }
                ALL_ROLES.into_iter().find(|r| r.as_str() == role)
            })
            .ok_or_else(|| ModelError::UnknownMatrix(name.clone()))?;
        let (_, d_out) = role.dims(cfg);
        if off.shape() != (cfg.seq_len, d_out) {
            return Err(ModelError::BadOffsetShape {
                name: name.clone(),
                got: format!("{}x{}", off.rows(), off.cols()),
                want: format!("{}x{}", cfg.seq_len, d_out),
            });
        }
    }
    Ok(())
}

impl<T: Scalar> TransformerModel<T> {
    pub(crate) fn forward_cached(
        &self,
        tokens: &[usize],
        offsets: &BTreeMap<String, Matrix<T>>,
    ) -> Result<ForwardCache<T>, ModelError> {
        self.check_tokens(tokens)?;
        validate_offsets(&self.config, offsets)?;
        let cfg = self.config;
        let (s, d, n_heads) = (cfg.seq_len, cfg.d_model, cfg.n_heads);
        let dh = cfg.head_dim();
        let scale = T::one() / count::<T>(dh).sqrt();

        let tok_emb = self.param("tok_emb")?;
        let pos_emb = self.param("pos_emb")?;
        let mut h = Matrix::zeros(s, d);
        for (t, &id) in tokens.iter().enumerate() {
            let te = tok_emb.row(id);
            let pe = pos_emb.row(t);
            for c in 0..d {
                h[(t, c)] = te[c] + pe[c];
            }
        }

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let name = |suffix: &str| format!("block{i}.{suffix}");
            let proj = |role: Role| -> Result<(&Matrix<T>, &Matrix<T>, Option<&Matrix<T>>), ModelError> {
                let w = self.param(&name(&format!("{}.w", role.as_str())))?;
                let b = self.param(&name(&format!("{}.b", role.as_str())))?;
                let off = offsets.get(&name(role.as_str()));
                Ok((w, b, off))
            };

            let (a, ln1) = layer_norm(
                &h,
                self.param(&name("ln1.gain"))?.row(0),
                self.param(&name("ln1.bias"))?.row(0),
            );

            let (wq, bq, offq) = proj(Role::Query)?;
            let q = affine_rows(wq, bq.row(0), &a, offq);
            let (wk, bk, offk) = proj(Role::Key)?;
            let k = affine_rows(wk, bk.row(0), &a, offk);
            let (wv, bv, offv) = proj(Role::Value)?;
            let v = affine_rows(wv, bv.row(0), &a, offv);

            let mut attn = Vec::with_capacity(n_heads);
            let mut ctx = Matrix::zeros(s, d);
            for head in 0..n_heads {
                let lo = head * dh;
                let hi = lo + dh;
                let mut probs = Matrix::zeros(s, s);
                for t in 0..s {
                    // Scores over the causal window j <= t only.
                    let qh = &q.row(t)[lo..hi];
                    let mut scores = Vec::with_capacity(t + 1);
                    let mut max = T::neg_infinity();
                    for j in 0..=t {
                        let kh = &k.row(j)[lo..hi];
                        let mut dot = T::zero();
                        for (x, y) in qh.iter().zip(kh) {
                            dot += *x * *y;
                        }
                        let sc = dot * scale;
                        if sc > max {
                            max = sc;
                        }
                        scores.push(sc);
                    }
                    let mut denom = T::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        denom += *sc;
                    }
                    for (j, sc) in scores.iter().enumerate() {
                        let p = *sc / denom;
                        probs[(t, j)] = p;
                        let vh = &v.row(j)[lo..hi];
                        let crow = ctx.row_mut(t);
                        for (c, &vv) in crow[lo..hi].iter_mut().zip(vh) {
                            *c += p * vv;
                        }
                    }
                }
                attn.push(probs);
            }

            let (wo, bo, offo) = proj(Role::Output)?;
            let o = affine_rows(wo, bo.row(0), &ctx, offo);
            let mut h_mid = h.add(&o)?;

            let (m, ln2) = layer_norm(
                &h_mid,
                self.param(&name("ln2.gain"))?.row(0),
                self.param(&name("ln2.bias"))?.row(0),
            );
            let (w1, b1, off1) = proj(Role::FfIn)?;
            let f1 = affine_rows(w1, b1.row(0), &m, off1);
            let mut g = f1.clone();
            for x in g.as_mut_slice() {
                *x = gelu(*x);
            }
            let (w2, b2, off2) = proj(Role::FfOut)?;
            let f2 = affine_rows(w2, b2.row(0), &g, off2);
            h_mid.add_scaled(&f2, T::one())?;

            blocks.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                attn,
                ctx,
                ln2,
                m,
                f1,
                g,
            });
            h = h_mid;
        }

        let (fin, lnf) = layer_norm(
            &h,
            self.param("final_ln.gain")?.row(0),
            self.param("final_ln.bias")?.row(0),
        );
        let unembed = self.param("unembed.w")?;
        let mut logits = Matrix::zeros(s, cfg.vocab_size);
        for t in 0..s {
            let row = unembed.matvec(fin.row(t)).expect("unembed shape");
            logits.row_mut(t).copy_from_slice(&row);
        }

        Ok(ForwardCache {
            blocks,
            lnf,
            fin,
            logits,
        })
    }
}

/// Cross-entropy of the next-token distribution at `answer_pos`:
/// `−log softmax(logits[answer_pos])[target]`.
pub fn loss<T: Scalar>(logits: &Matrix<T>, target: usize, answer_pos: usize) -> Result<T, ModelError> {
    if answer_pos >= logits.rows() {
        return Err(ModelError::BadAnswerPos {
            pos: answer_pos,
            seq_len: logits.rows(),
        });
    }
    if target >= logits.cols() {
        return Err(ModelError::TokenOutOfRange {
            position: answer_pos,
            id: target,
            vocab_size: logits.cols(),
        });
    }
    let row = logits.row(answer_pos);
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum_exp = row
        .iter()
        .map(|&l| (l - max).exp())
        .fold(T::zero(), |a, b| a + b);
    Ok(max + sum_exp.ln() - row[target])
}

/// Softmax of the logits row at `answer_pos`.
pub(crate) fn softmax_row<T: Scalar>(logits: &Matrix<T>, answer_pos: usize) -> Vec<T> {
    let row = logits.row(answer_pos);
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&l| (l - max).exp()).collect();
    let denom = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / denom).collect()
}
