//! Sparse attention with quantized candidate pre-selection.
//!
//! The operator runs in two passes. A low-bit pass quantizes `Q` and `K`,
//! forms approximate scores with LUT products, and keeps the top-k key
//! indices per query row; ranking by raw approximate scores is enough
//! because softmax's exponential is monotone. A full-precision pass then
//! re-scores only the selected candidates with a fused
//! dot-product/scale/mask/exp row kernel and normalizes against the
//! selected value rows.
//!
//! `dense_attention` is the exact reference operator: with `k >= n` and no
//! mask the sparse path degenerates to it up to floating-point
//! reassociation.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::numerics::{self, QuantizedMatrix};

/// A single-head attention instance: `Q`, `K`, `V` of shape `n x d` plus an
/// optional boolean mask (`true` = attendable).
#[derive(Debug, Clone)]
pub struct AttentionProblem {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    mask: Option<Array2<bool>>,
}

impl AttentionProblem {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        Self::build(q, k, v, None)
    }

    pub fn with_mask(
        q: Array2<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        mask: Array2<bool>,
    ) -> Result<Self> {
        Self::build(q, k, v, Some(mask))
    }

    fn build(
        q: Array2<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        mask: Option<Array2<bool>>,
    ) -> Result<Self> {
        let (n, d) = (q.nrows(), q.ncols());
        if n == 0 || d == 0 {
            return Err(Error::EmptyMatrix);
        }
        if k.dim() != (n, d) || v.dim() != (n, d) {
            return Err(Error::ShapeMismatch(format!(
                "Q is {:?}, K is {:?}, V is {:?}",
                q.dim(),
                k.dim(),
                v.dim()
            )));
        }
        if let Some(m) = &mask {
            if m.dim() != (n, n) {
                return Err(Error::ShapeMismatch(format!(
                    "mask is {:?}, expected ({n}, {n})",
                    m.dim()
                )));
            }
            for (i, row) in m.rows().into_iter().enumerate() {
                if !row.iter().any(|&a| a) {
                    return Err(Error::AllMaskedRow(i));
                }
            }
        }
        Ok(Self { q, k, v, mask })
    }

    pub fn seq_len(&self) -> usize {
        self.q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn q(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn k(&self) -> &Array2<f64> {
        &self.k
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn mask(&self) -> Option<&Array2<bool>> {
        self.mask.as_ref()
    }

    fn mask_row(&self, i: usize) -> Option<Vec<bool>> {
        self.mask.as_ref().map(|m| m.row(i).to_vec())
    }
}

/// Per-row candidate indices kept by the quantized pre-selection, ordered by
/// descending approximate score with ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKSelection {
    pub k: usize,
    pub rows: Vec<Vec<usize>>,
}

/// Work counters split by arithmetic class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// LUT-product accumulations in the quantized pre-selection.
    pub lowbit_macs: u64,
    /// Full-precision multiply-accumulates.
    pub exact_macs: u64,
    /// Exponential evaluations.
    pub exp_evals: u64,
}

/// Output of the sparse operator.
#[derive(Debug, Clone)]
pub struct SparseAttentionOutput {
    pub z: Array2<f64>,
    pub selection: TopKSelection,
    pub op_counts: OpCounts,
}

/// Which attention path `count_ops` (and the encoder forward) models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Dense,
    Sparse,
}

/// Exact attention: `Z = row_softmax(Q K^T / sqrt(d) + mask) V`.
pub fn dense_attention(p: &AttentionProblem) -> Result<Array2<f64>> {
    Ok(dense_attention_weights(p)?.1)
}

/// Exact attention returning `(softmax weights, Z)`. Each weight row is a
/// probability vector over key positions.
pub fn dense_attention_weights(p: &AttentionProblem) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = p.seq_len();
    let d = p.head_dim();
    let scale = (d as f64).sqrt();
    let mut weights = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let q_row = p.q.row(i);
        let mut scores = vec![f64::NEG_INFINITY; n];
        for (j, s) in scores.iter_mut().enumerate() {
            if p.mask.as_ref().is_none_or(|m| m[[i, j]]) {
                *s = q_row.dot(&p.k.row(j)) / scale;
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMaskedRow(i));
        }
        let exps: Vec<f64> = scores
            .iter()
            .map(|&s| {
                if s == f64::NEG_INFINITY {
                    0.0
                } else {
                    (s - max).exp()
                }
            })
            .collect();
        let mass: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            weights[[i, j]] = e / mass;
        }
    }
    let z = weights.dot(&p.v);
    Ok((weights, z))
}

/// Indices of the `min(k, #unmasked)` largest scores, descending by value
/// with ties broken by ascending index.
///
/// Selection is merge-based: candidate halves are reduced recursively and
/// merged keeping at most `k` survivors, the stable streaming scheme a
/// hardware merge-sort unit implements.
pub fn topk_select(scores: &[i64], k: usize, mask: Option<&[bool]>) -> Vec<usize> {
    let candidates: Vec<usize> = (0..scores.len())
        .filter(|&j| mask.is_none_or(|m| m[j]))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    merge_topk(&candidates, scores, k)
}

fn merge_topk(candidates: &[usize], scores: &[i64], k: usize) -> Vec<usize> {
    if candidates.len() <= 1 {
        return candidates.to_vec();
    }
    let (left, right) = candidates.split_at(candidates.len() / 2);
    let left = merge_topk(left, scores, k);
    let right = merge_topk(right, scores, k);
    // candidates arrive in ascending index order, so on equal scores the
    // left run wins and tie-break by ascending index falls out of stability
    let mut merged = Vec::with_capacity(k.min(left.len() + right.len()));
    let (mut i, mut j) = (0, 0);
    while merged.len() < k && (i < left.len() || j < right.len()) {
        let take_left = match (left.get(i), right.get(j)) {
            (Some(&a), Some(&b)) => scores[a] >= scores[b],
            (Some(_), None) => true,
            _ => false,
        };
        if take_left {
            merged.push(left[i]);
            i += 1;
        } else {
            merged.push(right[j]);
            j += 1;
        }
    }
    merged
}

/// Fused row kernel: exp-scores of one query row against its selected keys.
///
/// For candidate `j`: `e_j = exp(q . K_s[j] / sqrt(d))`, or `0` when the
/// candidate is masked. Scaling, masking and exponentiation happen at the
/// final accumulation step of each dot product; the result is bit-identical
/// to a separate dot/scale/mask/exp pipeline in the same precision.
///
/// Exponentials are taken without max-subtraction, mirroring the bounded
/// fixed-point regime of the fused hardware loop; scaled scores are assumed
/// to stay below the `f64::exp` overflow threshold.
pub fn fused_row_scores(
    q_row: ArrayView1<'_, f64>,
    selected_keys: &Array2<f64>,
    masked: &[bool],
) -> Result<Vec<f64>> {
    let d = q_row.len();
    if selected_keys.nrows() == 0 {
        return Err(Error::EmptyCandidateSet);
    }
    if selected_keys.ncols() != d || masked.len() != selected_keys.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "q row has {d} entries, K_s is {:?}, mask has {}",
            selected_keys.dim(),
            masked.len()
        )));
    }
    let scale = (d as f64).sqrt();
    let mut out = Vec::with_capacity(selected_keys.nrows());
    for (j, key) in selected_keys.rows().into_iter().enumerate() {
        let mut acc = 0.0f64;
        for t in 0..d {
            acc += q_row[t] * key[t];
            if t + 1 == d {
                // last loop iteration: scale, mask, exponentiate in place
                out.push(if masked[j] { 0.0 } else { (acc / scale).exp() });
            }
        }
    }
    Ok(out)
}

/// Normalized weighted sum of the selected value rows:
/// `z = sum_j e_j V_s[j] / sum_j e_j`.
pub fn weighted_value_sum(e: &[f64], selected_values: &Array2<f64>) -> Result<Array1<f64>> {
    if selected_values.nrows() == 0 {
        return Err(Error::EmptyCandidateSet);
    }
    if e.len() != selected_values.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} exp-scores against {} value rows",
            e.len(),
            selected_values.nrows()
        )));
    }
    let mass: f64 = e.iter().sum();
    if mass <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let mut z = Array1::<f64>::zeros(selected_values.ncols());
    for (j, row) in selected_values.rows().into_iter().enumerate() {
        let w = e[j];
        for (t, zt) in z.iter_mut().enumerate() {
            *zt += w * row[t];
        }
    }
    z.mapv_inplace(|x| x / mass);
    Ok(z)
}

/// The full sparse operator: quantized pre-selection followed by exact
/// re-scoring of the survivors.
///
/// `k` is clamped to the sequence length. Masked positions never enter the
/// candidate pool, so padding tokens cannot consume candidate slots.
/// `op_counts` is accumulated from the work actually performed.
pub fn sparse_attention(p: &AttentionProblem, k: usize, bits: u8) -> Result<SparseAttentionOutput> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let n = p.seq_len();
    let d = p.head_dim();
    let k = k.min(n);

    let q_quant: QuantizedMatrix = numerics::quantize(&p.q, bits)?;
    let k_quant: QuantizedMatrix = numerics::quantize(&p.k, bits)?;
    let lut = numerics::build_product_lut(bits)?;
    let approx = numerics::approx_scores(&q_quant, &k_quant, &lut)?;

    let mut counts = OpCounts {
        lowbit_macs: (n * n * d) as u64,
        ..OpCounts::default()
    };

    let mut z = Array2::<f64>::zeros((n, d));
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mask_row = p.mask_row(i);
        let picked = topk_select(&approx.row(i).to_vec(), k, mask_row.as_deref());
        let keys = gather_rows(&p.k, &picked);
        let values = gather_rows(&p.v, &picked);
        // masked positions were excluded before selection
        let flags = vec![false; picked.len()];
        let e = fused_row_scores(p.q.row(i), &keys, &flags)?;
        counts.exact_macs += (picked.len() * d) as u64;
        counts.exp_evals += picked.len() as u64;
        let z_row = weighted_value_sum(&e, &values)?;
        counts.exact_macs += (picked.len() * d) as u64;
        z.row_mut(i).assign(&z_row);
        rows.push(picked);
    }

    Ok(SparseAttentionOutput {
        z,
        selection: TopKSelection { k, rows },
        op_counts: counts,
    })
}

fn gather_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((idx.len(), m.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

/// Closed-form operation counts for an unmasked `n x d` instance.
///
/// Dense: `2 n^2 d` exact MACs and `n^2` exponentials. Sparse with `k`
/// clamped to `n`: `2 n k d` exact MACs, `n^2 d` low-bit LUT products and
/// `n k` exponentials. The bit width does not change the counts.
pub fn count_ops(n: usize, d: usize, k: usize, bits: u8, mode: AttentionMode) -> OpCounts {
    let _ = bits;
    let (n, d, k) = (n as u64, d as u64, (k.min(n)) as u64);
    match mode {
        AttentionMode::Dense => OpCounts {
            lowbit_macs: 0,
            exact_macs: 2 * n * n * d,
            exp_evals: n * n,
        },
        AttentionMode::Sparse => OpCounts {
            lowbit_macs: n * n * d,
            exact_macs: 2 * n * k * d,
            exp_evals: n * k,
        },
    }
}

/// Per-row bound on the approximate-score error, measured in exact-score
/// units.
///
/// Writing `alpha = L/M_q` and `beta = L/M_k` for the level-per-unit ratios
/// (`L = 2^(b-1)-1`), each quantized level is off by at most one half step,
/// so `|S'_ij/(alpha beta) - S_ij|` is at most
/// `|q_i|_1/(2 beta) + max_j |k_j|_1/(2 alpha) + d/(4 alpha beta)`.
/// If the gap between a row's k-th and (k+1)-th exact scores exceeds twice
/// this bound, quantized top-k selection returns exactly the true top-k set.
/// Defined for `bits >= 2`; sign quantization has no half-step bound.
pub fn approx_score_error_bound(p: &AttentionProblem, bits: u8) -> Result<Vec<f64>> {
    if bits < 2 {
        return Err(Error::UnsupportedBits(bits));
    }
    let m_q = numerics::compute_scale(&p.q)?;
    let m_k = numerics::compute_scale(&p.k)?;
    let level = f64::from(numerics::QuantScheme::new(bits, 1.0)?.level_max());
    if m_q == 0.0 || m_k == 0.0 {
        // a zero tensor quantizes exactly; approximate scores are all zero
        return Ok(vec![0.0; p.seq_len()]);
    }
    let alpha = level / m_q;
    let beta = level / m_k;
    let d = p.head_dim() as f64;
    let max_key_l1 =
        p.k.rows()
            .into_iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
    Ok(p.q
        .rows()
        .into_iter()
        .map(|q_row| {
            let q_l1: f64 = q_row.iter().map(|x| x.abs()).sum();
            q_l1 / (2.0 * beta) + max_key_l1 / (2.0 * alpha) + d / (4.0 * alpha * beta)
        })
        .collect())
}

/// Weights of a single encoder layer.
///
/// Projections are `hidden x hidden`, the feed-forward pair is
/// `hidden x ff_dim` and back, and the two layer norms carry per-feature
/// gain and bias. Projection biases are omitted.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub heads: usize,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ff1: Array2<f64>,
    pub ff2: Array2<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

impl EncoderWeights {
    /// Gaussian weights scaled by `1/sqrt(hidden)`, unit layer-norm gains.
    pub fn random<R: rand::Rng>(hidden: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        let sd = 1.0 / (hidden as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0f64, sd).expect("finite std dev");
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rand_distr::Distribution::sample(&normal, rng))
        };
        let wq = mat(hidden, hidden);
        let wk = mat(hidden, hidden);
        let wv = mat(hidden, hidden);
        let wo = mat(hidden, hidden);
        let ff1 = mat(hidden, ff_dim);
        let ff2 = mat(ff_dim, hidden);
        Self {
            heads,
            wq,
            wk,
            wv,
            wo,
            ff1,
            ff2,
            ln1_gamma: Array1::ones(hidden),
            ln1_beta: Array1::zeros(hidden),
            ln2_gamma: Array1::ones(hidden),
            ln2_beta: Array1::zeros(hidden),
        }
    }

    fn validate(&self, hidden: usize) -> Result<()> {
        if self.heads == 0 || !hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden {hidden} not divisible by {} heads",
                self.heads
            )));
        }
        let ff = self.ff1.ncols();
        let square = [&self.wq, &self.wk, &self.wv, &self.wo];
        if square.iter().any(|m| m.dim() != (hidden, hidden))
            || self.ff1.dim() != (hidden, ff)
            || self.ff2.dim() != (ff, hidden)
            || self.ln1_gamma.len() != hidden
            || self.ln1_beta.len() != hidden
            || self.ln2_gamma.len() != hidden
            || self.ln2_beta.len() != hidden
        {
            return Err(Error::ShapeMismatch(
                "encoder weight shapes are inconsistent".into(),
            ));
        }
        Ok(())
    }
}

/// Exact erf-based GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (t, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[t] + beta[t];
        }
    }
    out
}

/// One encoder layer forward pass with per-head dense or sparse attention.
///
/// Multi-head attention over `hidden/heads`-wide column blocks, residual
/// add + layer norm, feed-forward (linear, GELU, linear), residual add +
/// layer norm. Deterministic for fixed inputs.
pub fn encoder_forward(
    x: &Array2<f64>,
    weights: &EncoderWeights,
    k: usize,
    bits: u8,
    mode: AttentionMode,
) -> Result<Array2<f64>> {
    let (n, hidden) = x.dim();
    if n == 0 || hidden == 0 {
        return Err(Error::EmptyMatrix);
    }
    weights.validate(hidden)?;
    let dh = hidden / weights.heads;

    let q_full = x.dot(&weights.wq);
    let k_full = x.dot(&weights.wk);
    let v_full = x.dot(&weights.wv);

    let mut context = Array2::<f64>::zeros((n, hidden));
    for head in 0..weights.heads {
        let cols = head * dh..(head + 1) * dh;
        let problem = AttentionProblem::new(
            q_full.slice(ndarray::s![.., cols.clone()]).to_owned(),
            k_full.slice(ndarray::s![.., cols.clone()]).to_owned(),
            v_full.slice(ndarray::s![.., cols.clone()]).to_owned(),
        )?;
        let z = match mode {
            AttentionMode::Dense => dense_attention(&problem)?,
            AttentionMode::Sparse => sparse_attention(&problem, k, bits)?.z,
        };
        context.slice_mut(ndarray::s![.., cols]).assign(&z);
    }

    let attn_out = context.dot(&weights.wo);
    let res1 = x + &attn_out;
    let normed1 = layer_norm(&res1, &weights.ln1_gamma, &weights.ln1_beta);

    let ff = normed1.dot(&weights.ff1).mapv(gelu).dot(&weights.ff2);
    let res2 = &normed1 + &ff;
    Ok(layer_norm(&res2, &weights.ln2_gamma, &weights.ln2_beta))
}
