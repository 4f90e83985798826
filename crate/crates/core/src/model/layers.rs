//! Forward and backward kernels for the dense building blocks.

use crate::numerics::{gemm, gemm_view, softmax_in_place, Matrix, View};

use super::params::{Attention, Mlp};

pub(crate) struct NormCache {
    pub input: Matrix,
    pub inv_rms: Vec<f64>,
}

pub(crate) fn rms_forward(x: &Matrix, gain: &Matrix, eps: f64) -> (Matrix, NormCache) {
    let d = x.cols();
    let g = gain.data();
    let mut y = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + eps).sqrt();
        inv.push(s);
        for ((o, &v), &gj) in y.row_mut(r).iter_mut().zip(row).zip(g) {
            *o = v * s * gj;
        }
    }
    (
        y,
        NormCache {
            input: x.clone(),
            inv_rms: inv,
        },
    )
}

/// Returns `dx`; accumulates into `dgain`.
pub(crate) fn rms_backward(cache: &NormCache, gain: &Matrix, dy: &Matrix, dgain: &mut Matrix) -> Matrix {
    let x = &cache.input;
    let d = x.cols();
    let g = gain.data();
    let mut dx = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let (xr, dyr, s) = (x.row(r), dy.row(r), cache.inv_rms[r]);
        let mut dot = 0.0;
        for j in 0..d {
            dot += g[j] * dyr[j] * xr[j];
        }
        let coef = s * s * s * dot / d as f64;
        let dg = dgain.data_mut();
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = s * g[j] * dyr[j] - xr[j] * coef;
            dg[j] += dyr[j] * xr[j] * s;
        }
    }
    dx
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

pub(crate) struct MlpCache {
    pub x: Matrix,
    pub a: Matrix,
    pub b: Option<Matrix>,
    pub u: Matrix,
}

pub(crate) fn mlp_forward(p: &Mlp, x: Matrix) -> (Matrix, MlpCache) {
    let n = x.rows();
    let h = p.w_in.cols();
    let mut a = Matrix::zeros(n, h);
    gemm(1.0, &x, false, &p.w_in, false, 0.0, &mut a);
    let b = p.w_gate.as_ref().map(|wg| {
        let mut b = Matrix::zeros(n, h);
        gemm(1.0, &x, false, wg, false, 0.0, &mut b);
        b
    });
    let mut u = Matrix::zeros(n, h);
    for (i, o) in u.data_mut().iter_mut().enumerate() {
        let av = a.data()[i];
        let s = av * sigmoid(av);
        *o = match &b {
            Some(b) => s * b.data()[i],
            None => s,
        };
    }
    let mut y = Matrix::zeros(n, p.w_out.cols());
    gemm(1.0, &u, false, &p.w_out, false, 0.0, &mut y);
    (y, MlpCache { x, a, b, u })
}

/// Returns `dx`; accumulates weight gradients into `g`.
pub(crate) fn mlp_backward(p: &Mlp, c: &MlpCache, dy: &Matrix, g: &mut Mlp) -> Matrix {
    let n = c.x.rows();
    let h = p.w_in.cols();
    gemm(1.0, &c.u, true, dy, false, 1.0, &mut g.w_out);
    let mut du = Matrix::zeros(n, h);
    gemm(1.0, dy, false, &p.w_out, true, 0.0, &mut du);
    let mut da = Matrix::zeros(n, h);
    let mut db = c.b.as_ref().map(|_| Matrix::zeros(n, h));
    for i in 0..n * h {
        let av = c.a.data()[i];
        let sg = sigmoid(av);
        let silu = av * sg;
        let dsilu = sg * (1.0 + av * (1.0 - sg));
        let dui = du.data()[i];
        match (&c.b, &mut db) {
            (Some(b), Some(db)) => {
                da.data_mut()[i] = dui * b.data()[i] * dsilu;
                db.data_mut()[i] = dui * silu;
            }
            _ => da.data_mut()[i] = dui * dsilu,
        }
    }
    gemm(1.0, &c.x, true, &da, false, 1.0, &mut g.w_in);
    let mut dx = Matrix::zeros(n, p.w_in.rows());
    gemm(1.0, &da, false, &p.w_in, true, 0.0, &mut dx);
    if let (Some(db), Some(wg), Some(gg)) = (&db, &p.w_gate, &mut g.w_gate) {
        gemm(1.0, &c.x, true, db, false, 1.0, gg);
        gemm(1.0, db, false, wg, true, 1.0, &mut dx);
    }
    dx
}

pub(crate) struct AttnCache {
    pub norm: NormCache,
    pub xn: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities, one `L × L` block per (sequence, head); only
    /// the causal part is written.
    pub probs: Vec<f64>,
    pub o: Matrix,
}

const QUERY_CHUNK: usize = 64;

/// Causal query chunks `(start, end)`; chunk rows attend to keys `0..end`.
fn query_chunks(seq_len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..seq_len).step_by(QUERY_CHUNK).map(move |a| (a, (a + QUERY_CHUNK).min(seq_len)))
}

/// Causal multi-head self-attention over consecutive sequences of `seq_len`
/// rows. Returns the residual update.
pub(crate) fn attention_forward(p: &Attention, x: &Matrix, heads: usize, seq_len: usize, eps: f64) -> (Matrix, AttnCache) {
    let (n, d) = (x.rows(), x.cols());
    let (xn, norm) = rms_forward(x, &p.norm, eps);
    let proj = |w: &Matrix| {
        let mut out = Matrix::zeros(n, d);
        gemm(1.0, &xn, false, w, false, 0.0, &mut out);
        out
    };
    let (q, k, v) = (proj(&p.wq), proj(&p.wk), proj(&p.wv));
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ll = seq_len * seq_len;
    let mut o = Matrix::zeros(n, d);
    let mut probs = vec![0.0; n / seq_len * heads * ll];
    for s in 0..n / seq_len {
        let r0 = s * seq_len;
        for h in 0..heads {
            let base = (s * heads + h) * ll;
            for (qa, qb) in query_chunks(seq_len) {
                let rows = qb - qa;
                let pv = View::new(base + qa * seq_len, rows, qb, seq_len);
                gemm_view(
                    scale,
                    q.data(),
                    View::new((r0 + qa) * d + h * dh, rows, dh, d),
                    false,
                    k.data(),
                    View::new(r0 * d + h * dh, qb, dh, d),
                    true,
                    0.0,
                    &mut probs,
                    pv,
                );
                for i in qa..qb {
                    softmax_in_place(&mut probs[base + i * seq_len..][..=i]);
                    probs[base + i * seq_len + i + 1..][..qb - i - 1].fill(0.0);
                }
                gemm_view(
                    1.0,
                    &probs,
                    pv,
                    false,
                    v.data(),
                    View::new(r0 * d + h * dh, qb, dh, d),
                    false,
                    0.0,
                    o.data_mut(),
                    View::new((r0 + qa) * d + h * dh, rows, dh, d),
                );
            }
        }
    }
    let mut out = Matrix::zeros(n, d);
    gemm(1.0, &o, false, &p.wo, false, 0.0, &mut out);
    (
        out,
        AttnCache {
            norm,
            xn,
            q,
            k,
            v,
            probs,
            o,
        },
    )
}

/// Gradient of the residual update with respect to the block input; the
/// residual path itself is left to the caller.
pub(crate) fn attention_backward(p: &Attention, c: &AttnCache, dout: &Matrix, heads: usize, seq_len: usize, g: &mut Attention) -> Matrix {
    let (n, d) = (dout.rows(), dout.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ll = seq_len * seq_len;
    gemm(1.0, &c.o, true, dout, false, 1.0, &mut g.wo);
    let mut do_ = Matrix::zeros(n, d);
    gemm(1.0, dout, false, &p.wo, true, 0.0, &mut do_);
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dp = vec![0.0; QUERY_CHUNK.min(seq_len) * seq_len];
    for s in 0..n / seq_len {
        let r0 = s * seq_len;
        for h in 0..heads {
            let base = (s * heads + h) * ll;
            let keys = |len: usize| View::new(r0 * d + h * dh, len, dh, d);
            for (qa, qb) in query_chunks(seq_len) {
                let rows = qb - qa;
                let pv = View::new(base + qa * seq_len, rows, qb, seq_len);
                let qv = View::new((r0 + qa) * d + h * dh, rows, dh, d);
                let dpv = View::new(0, rows, qb, qb);
                gemm_view(1.0, do_.data(), qv, false, c.v.data(), keys(qb), true, 0.0, &mut dp, dpv);
                gemm_view(1.0, &c.probs, pv, true, do_.data(), qv, false, 1.0, dv.data_mut(), keys(qb));
                for i in 0..rows {
                    let prow = &c.probs[base + (qa + i) * seq_len..][..qb];
                    let drow = &mut dp[i * qb..][..qb];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                gemm_view(1.0, &dp, dpv, false, c.k.data(), keys(qb), false, 0.0, dq.data_mut(), qv);
                gemm_view(1.0, &dp, dpv, true, c.q.data(), qv, false, 1.0, dk.data_mut(), keys(qb));
            }
        }
    }
    gemm(1.0, &c.xn, true, &dq, false, 1.0, &mut g.wq);
    gemm(1.0, &c.xn, true, &dk, false, 1.0, &mut g.wk);
    gemm(1.0, &c.xn, true, &dv, false, 1.0, &mut g.wv);
    let mut dxn = Matrix::zeros(n, d);
    gemm(1.0, &dq, false, &p.wq, true, 0.0, &mut dxn);
    gemm(1.0, &dk, false, &p.wk, true, 1.0, &mut dxn);
    gemm(1.0, &dv, false, &p.wv, true, 1.0, &mut dxn);
    rms_backward(&c.norm, &p.norm, &dxn, &mut g.norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rng_for, Stream};

    fn params(d: usize, seed: u64) -> Attention {
        let mut rng = rng_for(seed, Stream::ModelInit);
        Attention {
            norm: Matrix::filled(1, d, 1.0),
            wq: Matrix::randn(d, d, 0.3, &mut rng),
            wk: Matrix::randn(d, d, 0.3, &mut rng),
            wv: Matrix::randn(d, d, 0.3, &mut rng),
            wo: Matrix::randn(d, d, 0.3, &mut rng),
        }
    }

    // Direct O(L²) evaluation, one query at a time.
    fn naive(p: &Attention, x: &Matrix, heads: usize, seq_len: usize) -> Matrix {
        let (n, d) = (x.rows(), x.cols());
        let (xn, _) = rms_forward(x, &p.norm, 1e-6);
        let (q, k, v) = (xn.matmul(&p.wq), xn.matmul(&p.wk), xn.matmul(&p.wv));
        let dh = d / heads;
        let mut o = Matrix::zeros(n, d);
        for s in 0..n / seq_len {
            for h in 0..heads {
                for i in 0..seq_len {
                    let qi = &q.row(s * seq_len + i)[h * dh..(h + 1) * dh];
                    let mut w: Vec<f64> = (0..=i)
                        .map(|j| {
                            let kj = &k.row(s * seq_len + j)[h * dh..(h + 1) * dh];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    softmax_in_place(&mut w);
                    for (j, wj) in w.iter().enumerate() {
                        let vj = &v.row(s * seq_len + j)[h * dh..(h + 1) * dh];
                        for (c, vv) in vj.iter().enumerate() {
                            o.row_mut(s * seq_len + i)[h * dh + c] += wj * vv;
                        }
                    }
                }
            }
        }
        o.matmul(&p.wo)
    }

    #[test]
    fn chunked_forward_matches_naive() {
        let (d, heads, seq_len) = (8, 2, 150);
        let p = params(d, 1);
        let x = Matrix::randn(2 * seq_len, d, 1.0, &mut rng_for(2, Stream::Probes));
        let (out, _) = attention_forward(&p, &x, heads, seq_len, 1e-6);
        let want = naive(&p, &x, heads, seq_len);
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn chunked_backward_matches_finite_differences() {
        let (d, heads, seq_len) = (4, 2, 130);
        let p = params(d, 3);
        let mut rng = rng_for(4, Stream::Probes);
        let x = Matrix::randn(seq_len, d, 1.0, &mut rng);
        let dout = Matrix::randn(seq_len, d, 1.0, &mut rng);
        let objective = |x: &Matrix| {
            let (out, _) = attention_forward(&p, x, heads, seq_len, 1e-6);
            out.data().iter().zip(dout.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = attention_forward(&p, &x, heads, seq_len, 1e-6);
        let mut g = Attention {
            norm: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
        };
        let dx = attention_backward(&p, &cache, &dout, heads, seq_len, &mut g);
        for idx in [0, 5, 64 * d + 1, 100 * d + 3, seq_len * d - 1] {
            let eps = 1e-5;
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[idx] += eps;
            xm.data_mut()[idx] -= eps;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * eps);
            let an = dx.data()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "index {idx}: {fd} vs {an}");
        }
    }
}
