//! Challenge generation and evaluation.
//!
//! A challenge is a pair of pseudo-random 10x10 matrices (one float, one
//! integer). Each matrix is reduced to row echelon form, then collapsed to a
//! scalar: the sum of its column products (ignoring zeros) divided by the sum
//! of its row sums. The response is the float scalar divided by the integer
//! scalar. Every honest node computes the same bits for the same payload
//! because the operation order below is fixed.

use thiserror::Error;

use crate::wire::{ChallengePayload, NodeId, CHALLENGE_DIM};

/// Entries at or below this magnitude count as zero, both for pivot
/// selection and for the column products.
pub const ZERO_EPS: f64 = 1e-12;
/// Smallest accepted magnitude of a row-sum total (and of the integer
/// scalar, which is the final divisor).
pub const DENOMINATOR_EPS: f64 = 1e-9;
pub const MAX_RESAMPLES: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChallengeError {
    #[error("row-sum total is too close to zero")]
    DegenerateDenominator,
    #[error("gave up after {0} consecutive rejected matrices")]
    ResampleLimitExceeded(u32),
}

/// SplitMix64 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrngState {
    pub state: u64,
}

impl PrngState {
    pub fn new(seed: u64) -> Self {
        PrngState { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let (s, out) = prng_next(*self);
        *self = s;
        out
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by multiply-high.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Bernoulli draw.
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_unit() < p
    }
}

pub fn prng_next(s: PrngState) -> (PrngState, u64) {
    let state = s.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (PrngState { state }, z ^ (z >> 31))
}

/// Dense row-major square-or-not matrix.
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Panics if the rows are ragged.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged matrix");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a != b {
            for j in 0..self.cols {
                self.data.swap(a * self.cols + j, b * self.cols + j);
            }
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl From<&[[f64; CHALLENGE_DIM]; CHALLENGE_DIM]> for Matrix {
    fn from(m: &[[f64; CHALLENGE_DIM]; CHALLENGE_DIM]) -> Self {
        Matrix::from_rows(&m[..])
    }
}

impl From<&[[i64; CHALLENGE_DIM]; CHALLENGE_DIM]> for Matrix {
    fn from(m: &[[i64; CHALLENGE_DIM]; CHALLENGE_DIM]) -> Self {
        let rows: Vec<Vec<f64>> = m
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        Matrix::from_rows(&rows)
    }
}

/// Result of forward elimination.
#[derive(Clone, Debug)]
pub struct Echelon {
    pub matrix: Matrix,
    pub rank: usize,
    /// Number of row swaps performed.
    pub swaps: usize,
    /// Pivot values in elimination order.
    pub pivots: Vec<f64>,
}

impl Echelon {
    pub fn is_singular(&self) -> bool {
        self.rank < self.matrix.rows()
    }
}

/// Forward Gaussian elimination with partial pivoting. Rows are not
/// normalised and there is no back-substitution. Entries under a pivot are
/// set to exactly zero; a column without a usable pivot has its remaining
/// candidates zeroed, so rank-deficient inputs end with exact zero rows.
pub fn eliminate(m: &Matrix) -> Echelon {
    assert_eq!(m.rows(), m.cols(), "row_echelon needs a square matrix");
    let n = m.rows();
    let mut a = m.clone();
    let mut r = 0;
    let mut swaps = 0;
    let mut pivots = Vec::new();
    for col in 0..n {
        if r == n {
            break;
        }
        let mut best = r;
        for i in r + 1..n {
            if a[(i, col)].abs() > a[(best, col)].abs() {
                best = i;
            }
        }
        if a[(best, col)].abs() <= ZERO_EPS {
            for i in r..n {
                a[(i, col)] = 0.0;
            }
            continue;
        }
        if best != r {
            a.swap_rows(best, r);
            swaps += 1;
        }
        let pivot = a[(r, col)];
        pivots.push(pivot);
        for i in r + 1..n {
            let f = a[(i, col)] / pivot;
            for j in col + 1..n {
                let v = a[(r, j)];
                a[(i, j)] -= f * v;
            }
            a[(i, col)] = 0.0;
        }
        r += 1;
    }
    Echelon {
        matrix: a,
        rank: r,
        swaps,
        pivots,
    }
}

pub fn row_echelon(m: &Matrix) -> Matrix {
    eliminate(m).matrix
}

/// Sum of column products (nonzero entries only) over sum of row sums, both
/// taken on the echelon form.
pub fn matrix_scalar(m: &Matrix) -> Result<f64, ChallengeError> {
    scalar_of_echelon(&row_echelon(m))
}

fn scalar_of_echelon(e: &Matrix) -> Result<f64, ChallengeError> {
    let mut sum_of_sums = 0.0;
    for i in 0..e.rows() {
        let mut row_sum = 0.0;
        for &v in e.row(i) {
            row_sum += v;
        }
        sum_of_sums += row_sum;
    }
    if sum_of_sums.abs() < DENOMINATOR_EPS {
        return Err(ChallengeError::DegenerateDenominator);
    }
    let mut sum_of_products = 0.0;
    for j in 0..e.cols() {
        let mut product = 1.0;
        for i in 0..e.rows() {
            let v = e[(i, j)];
            if v.abs() > ZERO_EPS {
                product *= v;
            }
        }
        sum_of_products += product;
    }
    Ok(sum_of_products / sum_of_sums)
}

pub fn compute_response(c: &ChallengePayload) -> Result<f64, ChallengeError> {
    let f = matrix_scalar(&Matrix::from(&c.float_matrix))?;
    let i = matrix_scalar(&Matrix::from(&c.int_matrix))?;
    Ok(f / i)
}

/// Derives the stream seed by chaining SplitMix64 through the three inputs.
pub fn challenge_seed(run_seed: u64, token_id: u64, head: NodeId) -> u64 {
    let (_, a) = prng_next(PrngState::new(run_seed));
    let (_, b) = prng_next(PrngState::new(a ^ token_id));
    let (_, c) = prng_next(PrngState::new(b ^ head.0 as u64));
    c
}

fn acceptable(m: &Matrix, check_scalar: bool) -> bool {
    let e = eliminate(m);
    if e.is_singular() {
        return false;
    }
    match scalar_of_echelon(&e.matrix) {
        Ok(s) => !check_scalar || (s.is_finite() && s.abs() >= DENOMINATOR_EPS),
        Err(_) => false,
    }
}

/// Pure function of its inputs. Float entries are uniform in `[-1, 1)`,
/// integer entries uniform in `{-9, ..., 9}`. A singular or degenerate
/// matrix is redrawn from the continuing stream; the float matrix is drawn
/// (and accepted) before the integer matrix.
pub fn generate_challenge(
    run_seed: u64,
    token_id: u64,
    head: NodeId,
) -> Result<ChallengePayload, ChallengeError> {
    let mut rng = PrngState::new(challenge_seed(run_seed, token_id, head));
    let mut payload = ChallengePayload {
        float_matrix: [[0.0; CHALLENGE_DIM]; CHALLENGE_DIM],
        int_matrix: [[0; CHALLENGE_DIM]; CHALLENGE_DIM],
    };

    let mut attempts = 0;
    loop {
        for v in payload.float_matrix.iter_mut().flatten() {
            *v = rng.next_unit() * 2.0 - 1.0;
        }
        if acceptable(&Matrix::from(&payload.float_matrix), false) {
            break;
        }
        attempts += 1;
        if attempts >= MAX_RESAMPLES {
            return Err(ChallengeError::ResampleLimitExceeded(attempts));
        }
    }

    attempts = 0;
    loop {
        for v in payload.int_matrix.iter_mut().flatten() {
            *v = rng.next_below(19) as i64 - 9;
        }
        // The integer scalar is the final divisor, so it must be usable too.
        if acceptable(&Matrix::from(&payload.int_matrix), true) {
            break;
        }
        attempts += 1;
        if attempts >= MAX_RESAMPLES {
            return Err(ChallengeError::ResampleLimitExceeded(attempts));
        }
    }
    Ok(payload)
}
