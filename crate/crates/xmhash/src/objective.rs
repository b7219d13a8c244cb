//! The joint training objective and its analytic output-space gradients.
//!
//! Let V and T (m x k) be the image/text encoder outputs on the sampled
//! query rows, B (n x k, entries +/-1) the database codes, W (k x c) the
//! code classifier, S the sampled similarity rows and L the label matrix.
//! The objective is a weighted sum of eight terms:
//!
//! * `vb_term` / `tb_term` — squared error between query-output/database-code
//!   inner products and k*S, imbalance-weighted per entry (coefficient 1);
//! * `vt_term` — the same between image and text outputs on the sampled
//!   rows, against the sampled-by-sampled similarity (coefficient mu);
//! * `cls_v` / `cls_t` — classification error of encoder outputs through W
//!   against query labels (coefficient alpha each);
//! * `cls_b` — classification error of codes through W against all labels
//!   (coefficient beta);
//! * `w_reg` — squared Frobenius norm of W (coefficient eta);
//! * `consistency` — squared distance between sampled codes and the
//!   averaged encoder outputs, `2 * ||B_sampled - 0.5 (V + T)||^2`
//!   (coefficient gamma). The factor 2 is part of the term's definition
//!   here: it makes the logged objective the exact antiderivative of the
//!   gradient convention used below, whose consistency part is
//!   `gamma * (v_i + t_i - 2 b_i)`.
//!
//! [`grad_v`] and [`grad_t`] are exact derivatives of [`eval_objective`];
//! the finite-difference suite in the acceptance tests holds them to 1e-6
//! relative error.

use serde::{Deserialize, Serialize};

use crate::dataset::SimilarityView;
use crate::matrix::{dot, Matrix};

/// Training hyper-parameters. The `Default` values are the tuned settings
/// the CLI ships with; see the README for the meaning of each knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Code length in bits.
    pub k: usize,
    /// Weight of the encoder-output classification terms.
    pub alpha: f64,
    /// Weight of the code classification term.
    pub beta: f64,
    /// Weight of the code/output consistency term.
    pub gamma: f64,
    /// Ridge regularization on W; must stay positive so the W solve is
    /// strictly positive definite.
    pub eta: f64,
    /// Weight of the image-output/text-output agreement term.
    pub mu: f64,
    /// Query rows sampled per outer iteration.
    pub m: usize,
    /// Outer alternating iterations.
    pub t_out: usize,
    /// Encoder SGD epochs per outer iteration (each modality).
    pub t_in: usize,
    /// Mini-batch size for encoder SGD.
    pub batch: usize,
    /// Learning rate of the image encoder.
    pub lr_img: f64,
    /// Learning rate of the text encoder.
    pub lr_txt: f64,
    /// Hidden width of the image encoder.
    pub hidden_img: usize,
    /// Hidden width of the text encoder.
    pub hidden_txt: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            k: 16,
            alpha: 50.0,
            beta: 1.0,
            gamma: 200.0,
            eta: 50.0,
            mu: 50.0,
            m: 2000,
            t_out: 30,
            t_in: 3,
            batch: 64,
            lr_img: 0.0001,
            lr_txt: 0.004,
            hidden_img: 256,
            hidden_txt: 512,
        }
    }
}

impl HyperParams {
    /// Check the invariants that the solvers rely on, against a dataset of
    /// `n` instances.
    pub fn validate(&self, n: usize) -> crate::Result<()> {
        let bad = |msg: String| Err(crate::Error::Config(msg));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu", self.mu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.m == 0 || self.m > n {
            return bad(format!("m = {} outside 1..={n}", self.m));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr_img > 0.0) || !(self.lr_txt > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.hidden_img == 0 || self.hidden_txt == 0 {
            return bad("hidden widths must be at least 1".into());
        }
        Ok(())
    }
}

/// The objective value split into its named addends. Each term is stored
/// unscaled; `total` applies the hyper-parameter coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub vb_term: f64,
    pub tb_term: f64,
    pub vt_term: f64,
    pub cls_v: f64,
    pub cls_t: f64,
    pub cls_b: f64,
    pub w_reg: f64,
    pub consistency: f64,
}

impl LossBreakdown {
    /// Recombine the stored terms with the coefficients; `total` must equal
    /// this within 1e-9 relative error.
    pub fn weighted_sum(&self, hp: &HyperParams) -> f64 {
        self.vb_term
            + self.tb_term
            + hp.mu * self.vt_term
            + hp.alpha * (self.cls_v + self.cls_t)
            + hp.beta * self.cls_b
            + hp.eta * self.w_reg
            + hp.gamma * self.consistency
    }
}

fn check_shapes(
    v: &Matrix,
    t: &Matrix,
    b: &Matrix,
    w: &Matrix,
    sim: &SimilarityView,
    labels: &Matrix,
    hp: &HyperParams,
) {
    let (m, n, k) = (sim.m(), sim.n(), hp.k);
    assert_eq!(v.shape(), (m, k), "V must be m x k");
    assert_eq!(t.shape(), (m, k), "T must be m x k");
    assert_eq!(b.shape(), (n, k), "B must be n x k");
    assert_eq!(w.rows(), k, "W must have k rows");
    assert_eq!(labels.shape(), (n, w.cols()), "labels must be n x c");
    debug_assert!(
        b.data().iter().all(|&x| x == 1.0 || x == -1.0),
        "B entries must be +/-1"
    );
}

/// Evaluate the full objective at (V, T, B, W). Rows of V/T correspond to
/// `sim.query_index()`.
pub fn eval_objective(
    v: &Matrix,
    t: &Matrix,
    b: &Matrix,
    w: &Matrix,
    sim: &SimilarityView,
    labels: &Matrix,
    hp: &HyperParams,
) -> LossBreakdown {
    check_shapes(v, t, b, w, sim, labels, hp);
    let (m, n) = (sim.m(), sim.n());
    let kf = hp.k as f64;

    // Output/code agreement terms, imbalance-weighted per entry.
    let vb_prod = v.matmul_nt(b); // m x n
    let tb_prod = t.matmul_nt(b);
    let mut vb_term = 0.0;
    let mut tb_term = 0.0;
    for i in 0..m {
        for j in 0..n {
            let wgt = sim.weight(i, j);
            let target = kf * sim.s(i, j);
            let rv = vb_prod[(i, j)] - target;
            let rt = tb_prod[(i, j)] - target;
            vb_term += wgt * rv * rv;
            tb_term += wgt * rt * rt;
        }
    }

    // Image-output/text-output agreement on the sampled square.
    let vt_prod = v.matmul_nt(t); // m x m
    let mut vt_term = 0.0;
    for i in 0..m {
        for j in 0..m {
            let r = vt_prod[(i, j)] - kf * sim.s_sampled(i, j);
            vt_term += sim.weight_sampled(i, j) * r * r;
        }
    }

    // Classification terms.
    let phi = sim.query_index();
    let vw = v.matmul(w); // m x c
    let tw = t.matmul(w);
    let mut cls_v = 0.0;
    let mut cls_t = 0.0;
    for i in 0..m {
        let li = labels.row(phi[i]);
        for (j, &lij) in li.iter().enumerate() {
            let rv = vw[(i, j)] - lij;
            let rt = tw[(i, j)] - lij;
            cls_v += rv * rv;
            cls_t += rt * rt;
        }
    }
    let cls_b = b.matmul(w).sub(labels).frobenius_sq();
    let w_reg = w.frobenius_sq();

    // Code/output consistency on the sampled rows (doubled by definition;
    // see the module docs).
    let mut consistency = 0.0;
    for i in 0..m {
        let (vi, ti, bi) = (v.row(i), t.row(i), b.row(phi[i]));
        for q in 0..hp.k {
            let d = bi[q] - 0.5 * (vi[q] + ti[q]);
            consistency += 2.0 * d * d;
        }
    }

    let mut out = LossBreakdown {
        total: 0.0,
        vb_term,
        tb_term,
        vt_term,
        cls_v,
        cls_t,
        cls_b,
        w_reg,
        consistency,
    };
    out.total = out.weighted_sum(hp);
    out
}

/// Derivative of the objective with respect to image output row `i`.
///
/// The four addends: the database-code agreement sum over all n columns,
/// the mu-weighted text-agreement sum over the m sampled columns, the
/// alpha-weighted classification pull `2 alpha W (W^T v_i - l_i)`, and the
/// consistency pull `gamma (v_i + t_i - 2 b_i)`.
pub fn grad_v(
    i: usize,
    v: &Matrix,
    t: &Matrix,
    b: &Matrix,
    w: &Matrix,
    sim: &SimilarityView,
    labels: &Matrix,
    hp: &HyperParams,
) -> Vec<f64> {
    check_shapes(v, t, b, w, sim, labels, hp);
    assert!(i < sim.m(), "query row {i} out of range (m = {})", sim.m());
    let (k, kf) = (hp.k, hp.k as f64);
    let vi = v.row(i);
    let mut g = vec![0.0; k];

    for j in 0..sim.n() {
        let bj = b.row(j);
        let coeff = 2.0 * sim.weight(i, j) * (dot(vi, bj) - kf * sim.s(i, j));
        for (gq, &bq) in g.iter_mut().zip(bj) {
            *gq += coeff * bq;
        }
    }
    for j in 0..sim.m() {
        let tj = t.row(j);
        let coeff =
            2.0 * hp.mu * sim.weight_sampled(i, j) * (dot(vi, tj) - kf * sim.s_sampled(i, j));
        for (gq, &tq) in g.iter_mut().zip(tj) {
            *gq += coeff * tq;
        }
    }
    add_classification_pull(&mut g, vi, w, labels.row(sim.query_index()[i]), hp.alpha);
    let (ti, bi) = (t.row(i), b.row(sim.query_index()[i]));
    for q in 0..k {
        g[q] += hp.gamma * (vi[q] + ti[q] - 2.0 * bi[q]);
    }
    g
}

/// Derivative of the objective with respect to text output row `i`; the
/// mirror of [`grad_v`] with V and T exchanged. The text row enters the
/// image/text agreement term as the second factor, so that addend sums the
/// transposed residuals (identical to the mirrored form whenever the
/// sampled similarity is symmetric, which holds for label-derived views).
pub fn grad_t(
    i: usize,
    v: &Matrix,
    t: &Matrix,
    b: &Matrix,
    w: &Matrix,
    sim: &SimilarityView,
    labels: &Matrix,
    hp: &HyperParams,
) -> Vec<f64> {
    check_shapes(v, t, b, w, sim, labels, hp);
    assert!(i < sim.m(), "query row {i} out of range (m = {})", sim.m());
    let (k, kf) = (hp.k, hp.k as f64);
    let ti = t.row(i);
    let mut g = vec![0.0; k];

    for j in 0..sim.n() {
        let bj = b.row(j);
        let coeff = 2.0 * sim.weight(i, j) * (dot(ti, bj) - kf * sim.s(i, j));
        for (gq, &bq) in g.iter_mut().zip(bj) {
            *gq += coeff * bq;
        }
    }
    for j in 0..sim.m() {
        let vj = v.row(j);
        let coeff =
            2.0 * hp.mu * sim.weight_sampled(j, i) * (dot(vj, ti) - kf * sim.s_sampled(j, i));
        for (gq, &vq) in g.iter_mut().zip(vj) {
            *gq += coeff * vq;
        }
    }
    add_classification_pull(&mut g, ti, w, labels.row(sim.query_index()[i]), hp.alpha);
    let (vi, bi) = (v.row(i), b.row(sim.query_index()[i]));
    for q in 0..k {
        g[q] += hp.gamma * (vi[q] + ti[q] - 2.0 * bi[q]);
    }
    g
}

/// `g += 2 * alpha * W (W^T x - l)`.
fn add_classification_pull(g: &mut [f64], x: &[f64], w: &Matrix, l: &[f64], alpha: f64) {
    let c = w.cols();
    let mut resid = vec![0.0; c];
    for (j, r) in resid.iter_mut().enumerate() {
        let mut s = -l[j];
        for (q, &xq) in x.iter().enumerate() {
            s += w[(q, j)] * xq;
        }
        *r = s;
    }
    for (q, gq) in g.iter_mut().enumerate() {
        *gq += 2.0 * alpha * dot(w.row(q), &resid);
    }
}
