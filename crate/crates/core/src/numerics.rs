//! Dense numeric kernels shared by the model, the balancing methods and the metrics.
//!
//! Everything here runs in `f64`. Matrix products go through `matrixmultiply`,
//! which is single-threaded and therefore bit-reproducible on a given machine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "matrix data has {} entries, expected {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// New matrix made of the listed rows of `self`, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(1.0, self, false, rhs, false, 0.0, &mut out);
        out
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, ka) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ka, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if ka == 0 {
        c.data.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides above describe exactly the buffers owned by `a`, `b`
    // and `c`, whose shapes were checked against (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Strided view into a row-major buffer: `rows × cols` starting at `offset`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl View {
    pub fn new(offset: usize, rows: usize, cols: usize, stride: usize) -> Self {
        View { offset, rows, cols, stride }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.stride + self.cols
        }
    }
}

/// [`gemm`] on strided sub-blocks of plain buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(alpha: f64, a: &[f64], va: View, trans_a: bool, b: &[f64], vb: View, trans_b: bool, beta: f64, c: &mut [f64], vc: View) {
    let (m, ka) = if trans_a { (va.cols, va.rows) } else { (va.rows, va.cols) };
    let (kb, n) = if trans_b { (vb.cols, vb.rows) } else { (vb.rows, vb.cols) };
    assert_eq!(ka, kb, "inner dimensions differ");
    assert_eq!((vc.rows, vc.cols), (m, n), "output shape mismatch");
    assert!(va.end() <= a.len() && vb.end() <= b.len() && vc.end() <= c.len(), "view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if ka == 0 {
        for r in 0..m {
            c[vc.offset + r * vc.stride..][..n].iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, va.stride as isize) } else { (va.stride as isize, 1) };
    let (rsb, csb) = if trans_b { (1, vb.stride as isize) } else { (vb.stride as isize, 1) };
    // SAFETY: every view was checked to lie inside its buffer, and the
    // strides address only elements within those views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            alpha,
            a.as_ptr().add(va.offset),
            rsa,
            csa,
            b.as_ptr().add(vb.offset),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.stride as isize,
            1,
        );
    }
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::input("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("softmax input is not finite"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax; tolerates `-inf` entries as long as one entry is finite.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v)`, stable; returns `-inf` when every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Indices of the `k` largest entries in descending order; ties go to the lower index.
pub fn top_k_select(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::input(format!("k = {} out of range for length {}", k, v.len())));
    }
    let mut out = Vec::with_capacity(k);
    top_k_into(v, k, &mut out);
    Ok(out)
}

/// Unchecked top-k used on hot paths. NaN entries are never preferred.
pub(crate) fn top_k_into(v: &[f64], k: usize, out: &mut Vec<usize>) {
    out.clear();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &x) in v.iter().enumerate() {
            if out.contains(&i) {
                continue;
            }
            match best {
                None => best = Some(i),
                // strict comparison keeps the lowest index among equals
                Some(b) if x > v[b] || (v[b].is_nan() && !x.is_nan()) => best = Some(i),
                _ => {}
            }
        }
        out.push(best.expect("k <= len"));
    }
}

/// Mean token cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::input(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::input(format!("target {} out of range for vocabulary {}", bad, logits.cols())));
    }
    let n = targets.len().max(1) as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (t, &target) in targets.iter().enumerate() {
        let row = grad.row_mut(t);
        let lse = log_sum_exp(row);
        loss += lse - row[target];
        for x in row.iter_mut() {
            *x = (*x - lse).exp() / n;
        }
        row[target] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter_index: usize,
    pub probes: usize,
}

/// Denominator floor for the relative error, so that gradients which are zero
/// up to roundoff do not blow up the ratio.
const REL_ERROR_FLOOR: f64 = 1e-7;

/// Compare analytic gradients against central finite differences on `probes`.
///
/// `loss` receives the full parameter vector with one coordinate perturbed.
pub fn grad_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    probes: &[usize],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::input("epsilon must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(Error::input("parameter and gradient lengths differ"));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter_index: probes.first().copied().unwrap_or(0),
        probes: probes.len(),
    };
    for &i in probes {
        if i >= params.len() {
            return Err(Error::input(format!("probe {} out of range", i)));
        }
        let orig = work[i];
        work[i] = orig + epsilon;
        let plus = loss(&work)?;
        work[i] = orig - epsilon;
        let minus = loss(&work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::CheckFailure {
                index: i,
                reason: "non-finite loss at perturbed point".into(),
            });
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_parameter_index = i;
        }
    }
    Ok(report)
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Corpus = 1,
    Shuffle = 2,
    ModelInit = 3,
    Classifier = 4,
    Probes = 5,
    Split = 6,
}

/// ChaCha generator keyed by `seed` on a stream reserved for `stream`.
pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// `count` distinct indices below `n`, in increasing order.
pub fn sample_indices(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}
