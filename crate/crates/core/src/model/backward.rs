//! Hand-written reverse pass.
//!
//! One backward walk serves both consumers: parameter gradients for the
//! trainer and per-matrix taps for attribution. A tap at matrix `A` records
//! the incoming activation `X` (seq_len x d_in) and `G = ∂loss/∂(A·x)`
//! (seq_len x d_out) before the bias is added.

use std::collections::{BTreeMap, BTreeSet};

use crate::linalg::{dot, Matrix};
use crate::model::forward::{gelu_derivative, softmax_row, LnCache};
use crate::model::{loss, ModelError, Role, TransformerModel};
use crate::scalar::{count, Scalar};

/// Activations and loss gradients captured at one selected matrix for one
/// example.
#[derive(Debug, Clone, PartialEq)]
pub struct TapRecord<T: Scalar = f64> {
    pub matrix: String,
    /// Input activations, seq_len x d_in.
    pub x: Matrix<T>,
    /// Gradient of the loss at the pre-bias output, seq_len x d_out.
    pub g: Matrix<T>,
}

/// Accumulates parameter gradients when the caller asked for them.
struct GradSink<'a, T: Scalar> {
    grads: Option<&'a mut BTreeMap<String, Matrix<T>>>,
}

impl<'a, T: Scalar> GradSink<'a, T> {
    fn tensor(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.grads
            .as_deref_mut()
            .map(|g| g.get_mut(name).expect("gradient tensor missing"))
    }

    /// `W += out ⊗ inp`.
    fn rank1(&mut self, name: &str, out: &[T], inp: &[T]) {
        if let Some(m) = self.tensor(name) {
            for (r, &ov) in out.iter().enumerate() {
                let row = m.row_mut(r);
                for (dst, &iv) in row.iter_mut().zip(inp) {
                    *dst += ov * iv;
                }
            }
        }
    }

    /// Gradients of an affine layer `y_t = W·x_t + b` given per-position
    /// output gradients: `dW += Σ_t g_t ⊗ x_t`, `db += Σ_t g_t`.
    fn affine(&mut self, base: &str, g_rows: &Matrix<T>, x_rows: &Matrix<T>) {
        if self.grads.is_none() {
            return;
        }
        let wname = format!("{base}.w");
        let bname = format!("{base}.b");
        for t in 0..g_rows.rows() {
            self.rank1(&wname, g_rows.row(t), x_rows.row(t));
        }
        if let Some(b) = self.tensor(&bname) {
            let row = b.row_mut(0);
            for t in 0..g_rows.rows() {
                for (dst, &gv) in row.iter_mut().zip(g_rows.row(t)) {
                    *dst += gv;
                }
            }
        }
    }

    fn add_row(&mut self, name: &str, vals: &[T]) {
        if let Some(m) = self.tensor(name) {
            for (dst, &v) in m.row_mut(0).iter_mut().zip(vals) {
                *dst += v;
            }
        }
    }

    fn add_to_row(&mut self, name: &str, row: usize, vals: &[T]) {
        if let Some(m) = self.tensor(name) {
            for (dst, &v) in m.row_mut(row).iter_mut().zip(vals) {
                *dst += v;
            }
        }
    }
}

/// `Wᵀ·g_t` for every row of `g`.
fn rows_matvec_t<T: Scalar>(w: &Matrix<T>, g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(g.rows(), w.cols());
    for t in 0..g.rows() {
        let v = w.matvec_t(g.row(t)).expect("transposed matvec shape");
        out.row_mut(t).copy_from_slice(&v);
    }
    out
}

/// Backward through layer norm; returns (dx, dgain, dbias).
fn ln_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    gain: &[T],
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let (rows, cols) = dy.shape();
    let inv_n = T::one() / count::<T>(cols);
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgain = vec![T::zero(); cols];
    let mut dbias = vec![T::zero(); cols];
    for t in 0..rows {
        let dyr = dy.row(t);
        let xhat = cache.xhat.row(t);
        let rstd = cache.rstd[t];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..cols {
            let dxhat = dyr[c] * gain[c];
            m1 += dxhat;
            m2 += dxhat * xhat[c];
            dgain[c] += dyr[c] * xhat[c];
            dbias[c] += dyr[c];
        }
        m1 *= inv_n;
        m2 *= inv_n;
        for c in 0..cols {
            let dxhat = dyr[c] * gain[c];
            dx[(t, c)] = rstd * (dxhat - m1 - xhat[c] * m2);
        }
    }
    (dx, dgain, dbias)
}

fn maybe_tap<T: Scalar>(
    taps: &mut BTreeMap<String, TapRecord<T>>,
    wanted: Option<&BTreeSet<String>>,
    name: String,
    x: &Matrix<T>,
    g: &Matrix<T>,
) {
    if wanted.is_some_and(|w| w.contains(&name)) {
        taps.insert(
            name.clone(),
            TapRecord {
                matrix: name,
                x: x.clone(),
                g: g.clone(),
            },
        );
    }
}

impl<T: Scalar> TransformerModel<T> {
    pub(crate) fn backprop(
        &self,
        tokens: &[usize],
        target: usize,
        answer_pos: usize,
        tap_names: Option<&BTreeSet<String>>,
        grads: Option<&mut BTreeMap<String, Matrix<T>>>,
    ) -> Result<(T, BTreeMap<String, TapRecord<T>>), ModelError> {
        let cache = self.forward_cached(tokens, &BTreeMap::new())?;
        let loss_val = loss(&cache.logits, target, answer_pos)?;
        let cfg = self.config;
        let (s, d) = (cfg.seq_len, cfg.d_model);
        let dh_head = cfg.head_dim();
        let scale = T::one() / count::<T>(dh_head).sqrt();
        let mut sink = GradSink { grads };
        let mut taps = BTreeMap::new();

        // Loss is attached to the answer position only.
        let mut dlogits_p = softmax_row(&cache.logits, answer_pos);
        dlogits_p[target] -= T::one();

        sink.rank1("unembed.w", &dlogits_p, cache.fin.row(answer_pos));
        let unembed = self.param("unembed.w")?;
        let mut dfin = Matrix::zeros(s, d);
        let dfin_p = unembed.matvec_t(&dlogits_p).expect("unembed shape");
        dfin.row_mut(answer_pos).copy_from_slice(&dfin_p);

        let (mut dh, dgain, dbias) =
            ln_backward(&dfin, &cache.lnf, self.param("final_ln.gain")?.row(0));
        sink.add_row("final_ln.gain", &dgain);
        sink.add_row("final_ln.bias", &dbias);

        for i in (0..cfg.n_layers).rev() {
            let bc = &cache.blocks[i];
            let name = |suffix: &str| format!("block{i}.{suffix}");

            // h_out = h_mid + f2
            let df2 = dh.clone();
            maybe_tap(&mut taps, tap_names, name(Role::FfOut.as_str()), &bc.g, &df2);
            sink.affine(&name(Role::FfOut.as_str()), &df2, &bc.g);
            let dg = rows_matvec_t(self.param(&name("ff_out.w"))?, &df2);

            let mut df1 = dg;
            for (dv, &x) in df1.as_mut_slice().iter_mut().zip(bc.f1.as_slice()) {
                *dv *= gelu_derivative(x);
            }
            maybe_tap(&mut taps, tap_names, name(Role::FfIn.as_str()), &bc.m, &df1);
            sink.affine(&name(Role::FfIn.as_str()), &df1, &bc.m);
            let dm = rows_matvec_t(self.param(&name("ff_in.w"))?, &df1);

            let (dx2, dg2, db2) = ln_backward(&dm, &bc.ln2, self.param(&name("ln2.gain"))?.row(0));
            sink.add_row(&name("ln2.gain"), &dg2);
            sink.add_row(&name("ln2.bias"), &db2);
            let dh_mid = dh.add(&dx2)?;

            // h_mid = h_in + o, o = Wo·ctx + bo
            let do_ = dh_mid.clone();
            maybe_tap(&mut taps, tap_names, name(Role::Output.as_str()), &bc.ctx, &do_);
            sink.affine(&name(Role::Output.as_str()), &do_, &bc.ctx);
            let dctx = rows_matvec_t(self.param(&name("output.w"))?, &do_);

            let mut dq = Matrix::zeros(s, d);
            let mut dk = Matrix::zeros(s, d);
            let mut dv = Matrix::zeros(s, d);
            for head in 0..cfg.n_heads {
                let lo = head * dh_head;
                let hi = lo + dh_head;
                let probs = &bc.attn[head];
                for t in 0..s {
                    let dctx_th: Vec<T> = dctx.row(t)[lo..hi].to_vec();
                    let mut dattn = vec![T::zero(); t + 1];
                    for (j, da) in dattn.iter_mut().enumerate() {
                        *da = dot(&dctx_th, &bc.v.row(j)[lo..hi]);
                    }
                    let mut p_dot = T::zero();
                    for (j, &da) in dattn.iter().enumerate() {
                        let p = probs[(t, j)];
                        p_dot += p * da;
                        for (dst, &src) in dv.row_mut(j)[lo..hi].iter_mut().zip(&dctx_th) {
                            *dst += p * src;
                        }
                    }
                    for (j, &da) in dattn.iter().enumerate() {
                        let ds = probs[(t, j)] * (da - p_dot) * scale;
                        let krow = bc.k.row(j);
                        for (dst, &kv) in dq.row_mut(t)[lo..hi].iter_mut().zip(&krow[lo..hi]) {
                            *dst += ds * kv;
                        }
                        let qrow = bc.q.row(t);
                        for (dst, &qv) in dk.row_mut(j)[lo..hi].iter_mut().zip(&qrow[lo..hi]) {
                            *dst += ds * qv;
                        }
                    }
                }
            }

            maybe_tap(&mut taps, tap_names, name(Role::Query.as_str()), &bc.a, &dq);
            maybe_tap(&mut taps, tap_names, name(Role::Key.as_str()), &bc.a, &dk);
            maybe_tap(&mut taps, tap_names, name(Role::Value.as_str()), &bc.a, &dv);
            sink.affine(&name(Role::Query.as_str()), &dq, &bc.a);
            sink.affine(&name(Role::Key.as_str()), &dk, &bc.a);
            sink.affine(&name(Role::Value.as_str()), &dv, &bc.a);

            let mut da = rows_matvec_t(self.param(&name("query.w"))?, &dq);
            da.add_scaled(&rows_matvec_t(self.param(&name("key.w"))?, &dk), T::one())?;
            da.add_scaled(&rows_matvec_t(self.param(&name("value.w"))?, &dv), T::one())?;

            let (dx1, dg1, db1) = ln_backward(&da, &bc.ln1, self.param(&name("ln1.gain"))?.row(0));
            sink.add_row(&name("ln1.gain"), &dg1);
            sink.add_row(&name("ln1.bias"), &db1);
            dh = dh_mid.add(&dx1)?;
        }

        for (t, &id) in tokens.iter().enumerate() {
            sink.add_to_row("tok_emb", id, dh.row(t));
            sink.add_to_row("pos_emb", t, dh.row(t));
        }

        Ok((loss_val, taps))
    }
}
