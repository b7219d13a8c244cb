//! The two non-gradient block updates of the alternating training loop:
//! discrete cyclic coordinate descent on the code matrix B, and the
//! closed-form ridge solve for the classifier W.
//!
//! Both are *exact* block minimizers of the joint objective with the encoder
//! outputs held fixed, which is what makes the per-iteration monotonicity
//! checks in the test suite possible:
//!
//! * The B-step minimizes, one bit-column at a time, the B-dependent part of
//!   the objective ([`code_step_objective`]). Because code entries square to
//!   one, each column subproblem is *linear* in that column, so the sign of
//!   a precomputed coefficient vector solves it exactly.
//! * The W-step solves the regularized normal equations
//!   `(alpha V^T V + alpha T^T T + beta B^T B + eta I) W = (alpha V_masked +
//!   alpha T_masked + beta B)^T L`, a k x k symmetric positive-definite
//!   system.
//!
//! The class-imbalance weight is folded into every similarity-dependent
//! term, both in the precomputed linear coefficient matrix D and in the
//! quadratic products, so the minimized surrogate agrees with the weighted
//! objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dataset::SimilarityView;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::objective::HyperParams;

/// Sign with the tie resolved downward: +1 for strictly positive input,
/// -1 otherwise. This is the single binarization convention used everywhere
/// (code updates, query hashing).
#[inline]
pub fn sign_pm(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// The n x k database code matrix, kept in two synchronized forms: +/-1
/// reals for algebra and bit-packed 64-bit words for Hamming ranking and
/// export. Bit `j` of word `j / 64` is set iff entry `j` is +1.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    real: Matrix,
    packed: Vec<u64>, // n * words_per_row
    k: usize,
}

impl CodeMatrix {
    /// Pack a +/-1 real matrix. Panics if any entry is not exactly +/-1.
    pub fn from_real(real: Matrix) -> Self {
        assert!(
            real.data().iter().all(|&x| x == 1.0 || x == -1.0),
            "code entries must be exactly +/-1"
        );
        let k = real.cols();
        let wpr = words_per_row(k);
        let mut packed = vec![0u64; real.rows() * wpr];
        for i in 0..real.rows() {
            pack_row(real.row(i), &mut packed[i * wpr..(i + 1) * wpr]);
        }
        CodeMatrix { real, packed, k }
    }

    /// I.i.d. uniform +/-1 entries: random and zero-centered by
    /// construction. Deterministic per seed.
    pub fn random(n: usize, k: usize, rng_seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
        let real = Matrix::from_fn(n, k, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        CodeMatrix::from_real(real)
    }

    pub fn n(&self) -> usize {
        self.real.rows()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn real(&self) -> &Matrix {
        &self.real
    }

    pub fn words_per_row(&self) -> usize {
        words_per_row(self.k)
    }

    pub fn row_words(&self, i: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.packed[i * wpr..(i + 1) * wpr]
    }

    pub fn get(&self, i: usize, q: usize) -> f64 {
        self.real[(i, q)]
    }

    /// Replace one bit column, keeping both representations in sync.
    pub fn set_column(&mut self, q: usize, signs: &[f64]) {
        assert_eq!(signs.len(), self.n(), "column length mismatch");
        assert!(q < self.k, "bit column {q} out of range");
        assert!(
            signs.iter().all(|&x| x == 1.0 || x == -1.0),
            "code entries must be exactly +/-1"
        );
        let wpr = self.words_per_row();
        let (word, bit) = (q / 64, q % 64);
        for (i, &s) in signs.iter().enumerate() {
            self.real[(i, q)] = s;
            let w = &mut self.packed[i * wpr + word];
            if s > 0.0 {
                *w |= 1 << bit;
            } else {
                *w &= !(1 << bit);
            }
        }
    }

    /// Rebuild the real form from the packed words (round-trip check).
    pub fn unpack(&self) -> Matrix {
        let wpr = self.words_per_row();
        Matrix::from_fn(self.n(), self.k, |i, q| {
            if self.packed[i * wpr + q / 64] >> (q % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
    }

    /// Binary export: n and k as little-endian u64, then the packed words of
    /// each row in order.
    pub fn write_binary<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        w.write_all(&(self.k as u64).to_le_bytes())?;
        for word in &self.packed {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: std::io::Read>(r: &mut R) -> Result<Self> {
        use crate::error::Error;
        let mut u = [0u8; 8];
        r.read_exact(&mut u)
            .map_err(|e| Error::parse("code matrix header", e.to_string()))?;
        let n = u64::from_le_bytes(u) as usize;
        r.read_exact(&mut u)
            .map_err(|e| Error::parse("code matrix header", e.to_string()))?;
        let k = u64::from_le_bytes(u) as usize;
        if k == 0 {
            return Err(Error::parse("code matrix header", "k must be positive"));
        }
        let wpr = words_per_row(k);
        let mut packed = vec![0u64; n * wpr];
        for (i, word) in packed.iter_mut().enumerate() {
            r.read_exact(&mut u)
                .map_err(|e| Error::parse(format!("code matrix word {i}"), e.to_string()))?;
            *word = u64::from_le_bytes(u);
        }
        // Validate that bits beyond k are clear, then rebuild the reals.
        if k % 64 != 0 {
            let mask = !0u64 << (k % 64);
            for row in 0..n {
                if packed[row * wpr + wpr - 1] & mask != 0 {
                    return Err(Error::parse(
                        format!("code matrix row {row}"),
                        "stray bits beyond code length",
                    ));
                }
            }
        }
        let real = Matrix::from_fn(n, k, |i, q| {
            if packed[i * wpr + q / 64] >> (q % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        });
        Ok(CodeMatrix { real, packed, k })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        use crate::error::Error;
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_binary(&mut f)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        use crate::error::Error;
        let mut f =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_binary(&mut f)
    }
}

fn words_per_row(k: usize) -> usize {
    k.div_ceil(64)
}

fn pack_row(row: &[f64], words: &mut [u64]) {
    for w in words.iter_mut() {
        *w = 0;
    }
    for (q, &x) in row.iter().enumerate() {
        if x > 0.0 {
            words[q / 64] |= 1 << (q % 64);
        }
    }
}

/// Encoder outputs lifted to database shape: row `phi[i]` holds output row
/// `i`, every row outside the sample is exactly zero.
#[derive(Debug, Clone)]
pub struct MaskedOutputs {
    pub v_ring: Matrix,
    pub t_ring: Matrix,
}

impl MaskedOutputs {
    pub fn new(v: &Matrix, t: &Matrix, phi: &[usize], n: usize) -> Self {
        assert_eq!(v.shape(), t.shape(), "V/T shape mismatch");
        assert_eq!(v.rows(), phi.len(), "one output row per sampled index");
        let k = v.cols();
        let mut v_ring = Matrix::zeros(n, k);
        let mut t_ring = Matrix::zeros(n, k);
        for (i, &p) in phi.iter().enumerate() {
            assert!(p < n, "sampled index {p} out of range");
            v_ring.row_mut(p).copy_from_slice(v.row(i));
            t_ring.row_mut(p).copy_from_slice(t.row(i));
        }
        MaskedOutputs { v_ring, t_ring }
    }
}

/// Precompute the k x n linear-coefficient matrix D of the B-subproblem:
///
/// `D = 2k (V + T)^T (w (.) S) + 2 beta W L^T + 2 gamma (V_masked + T_masked)^T`
///
/// where `w (.) S` is the imbalance-weighted similarity. The B-dependent
/// part of the objective then reads `quadratic(B) - <B, D^T>`; see
/// [`code_step_objective`].
pub fn build_d_matrix(
    v: &Matrix,
    t: &Matrix,
    masked: &MaskedOutputs,
    w: &Matrix,
    labels: &Matrix,
    sim: &SimilarityView,
    hp: &HyperParams,
) -> Matrix {
    let (m, n, k) = (sim.m(), sim.n(), hp.k);
    assert_eq!(v.shape(), (m, k), "V must be m x k");
    assert_eq!(t.shape(), (m, k), "T must be m x k");
    assert_eq!(masked.v_ring.shape(), (n, k), "masked outputs must be n x k");
    assert_eq!(w.rows(), k, "W must have k rows");
    assert_eq!(labels.shape(), (n, w.cols()), "labels must be n x c");

    let weighted_s = Matrix::from_fn(m, n, |i, j| sim.weight(i, j) * sim.s(i, j));
    let mut vt_sum = v.clone();
    vt_sum.add_scaled(t, 1.0);
    let mut d = vt_sum.matmul_tn(&weighted_s); // k x n
    d.scale(2.0 * k as f64);
    d.add_scaled(&w.matmul_nt(labels), 2.0 * hp.beta);
    d.add_scaled(&masked.v_ring.transpose(), 2.0 * hp.gamma);
    d.add_scaled(&masked.t_ring.transpose(), 2.0 * hp.gamma);
    d
}

/// The B-dependent part of the objective (up to a B-independent constant):
///
/// `sum_ij w_ij [(v_i . b_j)^2 + (t_i . b_j)^2] + beta ||B W||^2 - <B, D^T>`
///
/// Every column update of the coordinate-descent sweep decreases this
/// quantity or leaves it unchanged; by construction its difference between
/// two code matrices equals the difference of the full objective.
pub fn code_step_objective(
    b: &CodeMatrix,
    v: &Matrix,
    t: &Matrix,
    w: &Matrix,
    d: &Matrix,
    sim: &SimilarityView,
    hp: &HyperParams,
) -> f64 {
    let (m, n) = (sim.m(), sim.n());
    assert_eq!(d.shape(), (hp.k, n), "D must be k x n");
    let vb = v.matmul_nt(b.real()); // m x n
    let tb = t.matmul_nt(b.real());
    let mut quad = 0.0;
    for i in 0..m {
        for j in 0..n {
            quad += sim.weight(i, j) * (vb[(i, j)].powi(2) + tb[(i, j)].powi(2));
        }
    }
    quad += hp.beta * b.real().matmul(w).frobenius_sq();
    let mut linear = 0.0;
    for j in 0..n {
        for q in 0..hp.k {
            linear += b.get(j, q) * d[(q, j)];
        }
    }
    quad - linear
}

/// Exactly minimize [`code_step_objective`] over bit column `col`, holding
/// every other column fixed. The coefficient of entry `(j, col)` is linear
/// (squared +/-1 terms are constant), so the optimal column is the negated
/// sign of that coefficient vector; zero coefficients resolve to +1
/// (`-sign_pm(0)`).
pub fn dcc_update_bit(
    b: &mut CodeMatrix,
    col: usize,
    v: &Matrix,
    t: &Matrix,
    w: &Matrix,
    d: &Matrix,
    sim: &SimilarityView,
    hp: &HyperParams,
) {
    let (m, n, k) = (sim.m(), sim.n(), hp.k);
    assert!(col < k, "bit column {col} out of range (k = {k})");
    assert_eq!(d.shape(), (k, n), "D must be k x n");

    // Products against the *current* codes; the hatted (column-removed)
    // products are recovered by subtracting the rank-one contribution of
    // column `col`.
    let vb = v.matmul_nt(b.real()); // m x n
    let tb = t.matmul_nt(b.real());
    let bw = b.real().matmul(w); // n x c

    let mut zeta = vec![0.0; n];
    for i in 0..m {
        let (vic, tic) = (v[(i, col)], t[(i, col)]);
        for (j, z) in zeta.iter_mut().enumerate() {
            let bjc = b.get(j, col);
            let wgt = sim.weight(i, j);
            *z += 2.0 * wgt * vic * (vb[(i, j)] - vic * bjc);
            *z += 2.0 * wgt * tic * (tb[(i, j)] - tic * bjc);
        }
    }
    let w_col = w.row(col); // row `col` of W, length c
    for (j, z) in zeta.iter_mut().enumerate() {
        let bjc = b.get(j, col);
        let mut acc = 0.0;
        for (cc, &wqc) in w_col.iter().enumerate() {
            acc += wqc * (bw[(j, cc)] - bjc * wqc);
        }
        *z += 2.0 * hp.beta * acc;
        *z -= d[(col, j)];
    }

    let new_col: Vec<f64> = zeta.iter().map(|&z| -sign_pm(z)).collect();
    b.set_column(col, &new_col);
}

/// One full coordinate-descent sweep: columns updated in ascending order,
/// each seeing the others' latest values.
pub fn update_b(
    b: &mut CodeMatrix,
    v: &Matrix,
    t: &Matrix,
    w: &Matrix,
    d: &Matrix,
    sim: &SimilarityView,
    hp: &HyperParams,
) {
    for col in 0..hp.k {
        dcc_update_bit(b, col, v, t, w, d, sim, hp);
    }
}

/// The W-dependent part of the objective:
/// `alpha (||V W - L_phi||^2 + ||T W - L_phi||^2) + beta ||B W - L||^2 +
/// eta ||W||^2`. Used to verify that [`solve_w`] returns the block minimum.
pub fn classifier_objective(
    v: &Matrix,
    t: &Matrix,
    b: &CodeMatrix,
    w: &Matrix,
    labels: &Matrix,
    phi: &[usize],
    hp: &HyperParams,
) -> f64 {
    let l_phi = Matrix::from_fn(phi.len(), labels.cols(), |i, j| labels[(phi[i], j)]);
    hp.alpha * (v.matmul(w).sub(&l_phi).frobenius_sq() + t.matmul(w).sub(&l_phi).frobenius_sq())
        + hp.beta * b.real().matmul(w).sub(labels).frobenius_sq()
        + hp.eta * w.frobenius_sq()
}

/// Closed-form W-step: solve the regularized normal equations
/// `(alpha V^T V + alpha T^T T + beta B^T B + eta I) W =
///  (alpha V_masked + alpha T_masked + beta B)^T L`.
/// With eta > 0 the system is symmetric positive definite, so the solution
/// is the unique minimizer of [`classifier_objective`].
pub fn solve_w(
    v: &Matrix,
    t: &Matrix,
    masked: &MaskedOutputs,
    b: &CodeMatrix,
    labels: &Matrix,
    hp: &HyperParams,
) -> Result<Matrix> {
    let k = hp.k;
    assert_eq!(v.cols(), k, "V must have k columns");
    assert_eq!(t.cols(), k, "T must have k columns");
    assert_eq!(b.k(), k, "B must have k columns");
    assert_eq!(b.n(), labels.rows(), "B rows must match label rows");

    let mut gram = v.matmul_tn(v);
    gram.add_scaled(&t.matmul_tn(t), 1.0);
    gram.scale(hp.alpha);
    gram.add_scaled(&b.real().matmul_tn(b.real()), hp.beta);
    for i in 0..k {
        gram[(i, i)] += hp.eta;
    }

    let mut lhs_t = masked.v_ring.clone();
    lhs_t.add_scaled(&masked.t_ring, 1.0);
    lhs_t.scale(hp.alpha);
    lhs_t.add_scaled(b.real(), hp.beta);
    let rhs = lhs_t.matmul_tn(labels); // k x c

    gram.solve_spd(&rhs)
}
