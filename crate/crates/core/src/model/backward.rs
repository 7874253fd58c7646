//! Manual backward pass over a recorded forward trace.

use crate::mat::{dot, Mat};
use crate::scalar::Scalar;

use super::forward::{gelu_grad, LnTrace, Trace};
use super::{LnParams, ModelParams};

/// `dw[r][c] += a[r] * b[c]`
fn acc_outer<F: Scalar>(dw: &mut Mat<F>, a: &[F], b: &[F]) {
    for (r, &ar) in a.iter().enumerate() {
        let row = dw.row_mut(r);
        for (c, &bc) in b.iter().enumerate() {
            row[c] += ar * bc;
        }
    }
}

/// `out[r] = dot(w.row(r), v)` — the gradient through `x -> x W`.
fn mat_times_vec<F: Scalar>(w: &Mat<F>, v: &[F], out: &mut [F]) {
    for r in 0..w.rows() {
        out[r] = dot(w.row(r), v);
    }
}

/// Layer-norm backward for one position. Returns dx and accumulates the
/// scale/shift gradients.
fn ln_backward<F: Scalar>(
    dy: &[F],
    trace: &LnTrace<F>,
    pos: usize,
    params: &LnParams<F>,
    dgamma: &mut [F],
    dbeta: &mut [F],
) -> Vec<F> {
    let d = dy.len();
    let xhat = trace.xhat.row(pos);
    let inv_std = trace.inv_std[pos];
    let inv_d = F::of(1.0 / d as f64);

    let mut dxhat = vec![F::zero(); d];
    let mut m1 = F::zero();
    let mut m2 = F::zero();
    for i in 0..d {
        dbeta[i] += dy[i];
        dgamma[i] += dy[i] * xhat[i];
        dxhat[i] = dy[i] * params.gamma[i];
        m1 += dxhat[i];
        m2 += dxhat[i] * xhat[i];
    }
    m1 *= inv_d;
    m2 *= inv_d;
    (0..d)
        .map(|i| (dxhat[i] - m1 - xhat[i] * m2) * inv_std)
        .collect()
}

/// Accumulates parameter gradients for one traced example given the
/// gradient of the loss with respect to every final hidden state.
pub(crate) fn backward<F: Scalar>(
    params: &ModelParams<F>,
    trace: &Trace<F>,
    dhidden: &Mat<F>,
    grads: &mut ModelParams<F>,
) {
    let d = params.cfg.dim;
    let heads = params.cfg.heads;
    let dh = d / heads;
    let ff = d * params.cfg.ff_mult;
    let t_len = trace.tokens.len();
    let scale = F::of(1.0 / (dh as f64).sqrt());

    // gradient wrt the block-stack output
    let mut dx = Mat::zeros(t_len, d);
    if params.cfg.blocks == 0 {
        for pos in 0..t_len {
            dx.row_mut(pos).copy_from_slice(dhidden.row(pos));
        }
    } else {
        for pos in 0..t_len {
            let row = ln_backward(
                dhidden.row(pos),
                &trace.ln_f,
                pos,
                &params.ln_f,
                &mut grads.ln_f.gamma,
                &mut grads.ln_f.beta,
            );
            dx.row_mut(pos).copy_from_slice(&row);
        }
    }

    for bi in (0..params.cfg.blocks).rev() {
        let blk = &params.blocks[bi];
        let tr = &trace.blocks[bi];
        let gb = &mut grads.blocks[bi];

        // feed-forward sublayer backward; produces d(x') per position
        let mut dxprime = Mat::zeros(t_len, d);
        for pos in 0..t_len {
            let dy = dx.row(pos).to_vec();
            // dW2, db2, dg
            let g_row = tr.g.row(pos);
            acc_outer(&mut gb.w2, g_row, &dy);
            for i in 0..d {
                gb.b2[i] += dy[i];
            }
            let mut dg = vec![F::zero(); ff];
            mat_times_vec(&blk.w2, &dy, &mut dg);
            // through the activation
            let f1_row = tr.f1.row(pos);
            let mut df1 = vec![F::zero(); ff];
            for i in 0..ff {
                df1[i] = dg[i] * gelu_grad(f1_row[i]);
            }
            // dW1, db1 need the ln2 output, recomputed from the trace
            let xhat2 = tr.ln2.xhat.row(pos);
            let b_row: Vec<F> = (0..d)
                .map(|i| blk.ln2.gamma[i] * xhat2[i] + blk.ln2.beta[i])
                .collect();
            acc_outer(&mut gb.w1, &b_row, &df1);
            for i in 0..ff {
                gb.b1[i] += df1[i];
            }
            let mut db = vec![F::zero(); d];
            mat_times_vec(&blk.w1, &df1, &mut db);
            let dx_ln = ln_backward(
                &db,
                &tr.ln2,
                pos,
                &blk.ln2,
                &mut gb.ln2.gamma,
                &mut gb.ln2.beta,
            );
            let out = dxprime.row_mut(pos);
            for i in 0..d {
                out[i] = dy[i] + dx_ln[i];
            }
        }

        // attention sublayer backward
        let mut dq = Mat::zeros(t_len, d);
        let mut dk = Mat::zeros(t_len, d);
        let mut dv = Mat::zeros(t_len, d);
        let mut dx_next = Mat::zeros(t_len, d);
        for pos in 0..t_len {
            let dxp = dxprime.row(pos);
            // residual branch
            for i in 0..d {
                *dx_next.at_mut(pos, i) += dxp[i];
            }
            // output projection
            acc_outer(&mut gb.wo, tr.o.row(pos), dxp);
            let mut do_vec = vec![F::zero(); d];
            mat_times_vec(&blk.wo, dxp, &mut do_vec);
            // per-head softmax attention backward
            let span = pos + 1;
            let probs = &tr.probs[pos];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let doh = &do_vec[cols.clone()];
                let p_row = &probs[h * span..(h + 1) * span];
                let mut dprobs = vec![F::zero(); span];
                let mut inner = F::zero();
                for j in 0..span {
                    dprobs[j] = dot(doh, &tr.v.row(j)[cols.clone()]);
                    inner += dprobs[j] * p_row[j];
                    // dv_j += p_j * do
                    let dvj = &mut dv.row_mut(j)[cols.clone()];
                    for (slot, &doi) in dvj.iter_mut().zip(doh) {
                        *slot += p_row[j] * doi;
                    }
                }
                for j in 0..span {
                    let ds = p_row[j] * (dprobs[j] - inner) * scale;
                    let kj = &tr.k.row(j)[cols.clone()];
                    let dqp = &mut dq.row_mut(pos)[cols.clone()];
                    for (slot, &kv) in dqp.iter_mut().zip(kj) {
                        *slot += ds * kv;
                    }
                    let qp = &tr.q.row(pos)[cols.clone()];
                    let dkj = &mut dk.row_mut(j)[cols.clone()];
                    for (slot, &qv) in dkj.iter_mut().zip(qp) {
                        *slot += ds * qv;
                    }
                }
            }
        }
        // projections and the first layer norm
        for pos in 0..t_len {
            let xhat1 = tr.ln1.xhat.row(pos);
            let a_row: Vec<F> = (0..d)
                .map(|i| blk.ln1.gamma[i] * xhat1[i] + blk.ln1.beta[i])
                .collect();
            acc_outer(&mut gb.wq, &a_row, dq.row(pos));
            acc_outer(&mut gb.wk, &a_row, dk.row(pos));
            acc_outer(&mut gb.wv, &a_row, dv.row(pos));
            let mut da = vec![F::zero(); d];
            let mut tmp = vec![F::zero(); d];
            mat_times_vec(&blk.wq, dq.row(pos), &mut tmp);
            for i in 0..d {
                da[i] += tmp[i];
            }
            mat_times_vec(&blk.wk, dk.row(pos), &mut tmp);
            for i in 0..d {
                da[i] += tmp[i];
            }
            mat_times_vec(&blk.wv, dv.row(pos), &mut tmp);
            for i in 0..d {
                da[i] += tmp[i];
            }
            let dx_ln = ln_backward(
                &da,
                &tr.ln1,
                pos,
                &blk.ln1,
                &mut gb.ln1.gamma,
                &mut gb.ln1.beta,
            );
            for i in 0..d {
                *dx_next.at_mut(pos, i) += dx_ln[i];
            }
        }
        dx = dx_next;
    }

    // embedding scatter
    for pos in 0..t_len {
        let tok = trace.tokens[pos];
        let src = dx.row(pos).to_vec();
        for (dst, v) in grads.tok_emb.row_mut(tok).iter_mut().zip(&src) {
            *dst += *v;
        }
        for (dst, v) in grads.pos_emb.row_mut(pos).iter_mut().zip(&src) {
            *dst += *v;
        }
    }
}
