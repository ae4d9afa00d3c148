//! The outsourcing protocol: parameter setup, key generation, template
//! transformation, token generation and the cloud-side evaluation.
//!
//! An enrolled template `x` and a query `y` are extended to `n + 5` slots so
//! that their inner product is `αβ(‖x − y‖² − θ²)`, permuted by the secret
//! `π`, placed on a diagonal, and sandwiched between the secret masks:
//!
//! ```text
//! C_p = M1 · S_p · diag(p) · M2        C_q = M1 · S_q · diag(q) · M2
//! C_y = M2⁻¹ · diag(y'') · S_y · M1⁻¹
//! ```
//!
//! where `p + q` is an additive split of the permuted enrollment vector and
//! the `S` matrices are unit-lower-triangular. The evaluator computes
//! `I = tr(C_p C_y) + tr(C_q C_y)`; the masks cancel under the trace and only
//! the sign of `I` is meaningful to it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    apply_permutation, rand_invertible, rand_unit_lower_triangular, trace_product_pair, Matrix,
    Permutation, DEFAULT_MIN_RCOND,
};

/// Number of slots the extension appends to an `n`-dimensional template.
pub const EXTENSION_SLOTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    n: usize,
    theta: f64,
}

impl SystemParams {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn ext_dim(&self) -> usize {
        self.n + EXTENSION_SLOTS
    }

    /// Power of two nearest `θ` (at least 1). The slots carrying `Σxᵢ²`,
    /// `Σyᵢ²` and `θ²` are rescaled by this factor on one side and its
    /// reciprocal on the other before masking, so both operands of every
    /// slot product have comparable magnitude. Powers of two scale exactly,
    /// leaving the inner product bit-for-bit unaffected in exact arithmetic
    /// and the masked round-off far smaller.
    pub fn slot_scale(&self) -> f64 {
        if self.theta <= 1.0 {
            return 1.0;
        }
        2f64.powi(self.theta.log2().round() as i32)
    }

    /// Per-slot factors applied to the enrollment vector, pre-permutation.
    pub fn enroll_balance(&self) -> Vec<f64> {
        let s = self.slot_scale();
        let mut b = vec![1.0; self.ext_dim()];
        b[self.n] = 1.0 / s;
        b[self.n + 1] = s;
        b[self.n + 2] = 1.0 / s;
        b
    }

    /// Reciprocal of [`SystemParams::enroll_balance`], applied to queries.
    pub fn query_balance(&self) -> Vec<f64> {
        self.enroll_balance().into_iter().map(|v| 1.0 / v).collect()
    }
}

/// Fixes the template dimension `n` and the match radius `θ`.
pub fn setup(n: usize, theta: f64) -> Result<SystemParams> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "template dimension must be at least 1".into(),
        ));
    }
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "radius must be finite and non-negative, got {theta}"
        )));
    }
    Ok(SystemParams { n, theta })
}

/// The data owner's masking material.
#[derive(Clone, Debug, PartialEq)]
pub struct SecretKey {
    m1: Matrix,
    m1_inv: Matrix,
    m2: Matrix,
    m2_inv: Matrix,
    pi: Permutation,
}

impl SecretKey {
    /// Assembles a key from its parts, checking shapes only. Use
    /// [`SecretKey::inverse_residual`] to check the stored inverses.
    pub fn from_parts(
        m1: Matrix,
        m1_inv: Matrix,
        m2: Matrix,
        m2_inv: Matrix,
        pi: Permutation,
    ) -> Result<Self> {
        let dim = pi.size();
        for m in [&m1, &m1_inv, &m2, &m2_inv] {
            if m.rows() != dim || m.cols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.rows().max(m.cols()),
                });
            }
            if !m.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        if dim <= EXTENSION_SLOTS {
            return Err(Error::InvalidParameter(format!(
                "key dimension {dim} leaves no room for a template"
            )));
        }
        Ok(SecretKey {
            m1,
            m1_inv,
            m2,
            m2_inv,
            pi,
        })
    }

    /// Identity masks and identity permutation. Only useful for tests and
    /// for demonstrating what the masks hide.
    pub fn insecure_identity(params: &SystemParams) -> Self {
        let d = params.ext_dim();
        SecretKey {
            m1: Matrix::identity(d),
            m1_inv: Matrix::identity(d),
            m2: Matrix::identity(d),
            m2_inv: Matrix::identity(d),
            pi: Permutation::identity(d),
        }
    }

    pub fn ext_dim(&self) -> usize {
        self.pi.size()
    }

    pub fn n(&self) -> usize {
        self.ext_dim() - EXTENSION_SLOTS
    }

    pub fn m1(&self) -> &Matrix {
        &self.m1
    }

    pub fn m1_inv(&self) -> &Matrix {
        &self.m1_inv
    }

    pub fn m2(&self) -> &Matrix {
        &self.m2
    }

    pub fn m2_inv(&self) -> &Matrix {
        &self.m2_inv
    }

    pub fn permutation(&self) -> &Permutation {
        &self.pi
    }

    /// Worst max-norm deviation from identity of `M1·M1⁻¹` and `M2·M2⁻¹`.
    pub fn inverse_residual(&self) -> Result<f64> {
        let r1 = self.m1.matmul(&self.m1_inv)?.identity_residual();
        let r2 = self.m2.matmul(&self.m2_inv)?.identity_residual();
        Ok(r1.max(r2))
    }

    fn check_params(&self, params: &SystemParams) -> Result<()> {
        if self.ext_dim() != params.ext_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.ext_dim(),
                found: self.ext_dim(),
            });
        }
        Ok(())
    }
}

pub fn keygen<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> Result<SecretKey> {
    keygen_with_rcond(params, rng, DEFAULT_MIN_RCOND)
}

pub fn keygen_with_rcond<R: Rng + ?Sized>(
    params: &SystemParams,
    rng: &mut R,
    min_rcond: f64,
) -> Result<SecretKey> {
    let d = params.ext_dim();
    let (m1, m1_inv) = rand_invertible(d, rng, min_rcond)?;
    let (m2, m2_inv) = rand_invertible(d, rng, min_rcond)?;
    let pi = Permutation::random(d, rng);
    Ok(SecretKey {
        m1,
        m1_inv,
        m2,
        m2_inv,
        pi,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainTemplate {
    pub id: u64,
    pub features: Vec<f64>,
}

impl PlainTemplate {
    pub fn new(id: u64, features: Vec<f64>) -> Self {
        PlainTemplate { id, features }
    }

    fn check(&self, params: &SystemParams) -> Result<()> {
        if self.features.len() != params.n() {
            return Err(Error::DimensionMismatch {
                expected: params.n(),
                found: self.features.len(),
            });
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }
}

/// Squared Euclidean distance between two plaintext vectors.
pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// An outsourced template: the two masked halves of the split.
#[derive(Clone, Debug, PartialEq)]
pub struct EncryptedTemplate {
    pub id: u64,
    c_p: Matrix,
    c_q: Matrix,
}

impl EncryptedTemplate {
    pub fn from_parts(id: u64, c_p: Matrix, c_q: Matrix) -> Result<Self> {
        if !c_p.is_square() || c_p.rows() != c_q.rows() || c_p.cols() != c_q.cols() {
            return Err(Error::DimensionMismatch {
                expected: c_p.rows(),
                found: c_q.rows(),
            });
        }
        if c_p.rows() <= EXTENSION_SLOTS {
            return Err(Error::InvalidParameter("masked matrix too small".into()));
        }
        if !c_p.is_finite() || !c_q.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(EncryptedTemplate { id, c_p, c_q })
    }

    pub fn c_p(&self) -> &Matrix {
        &self.c_p
    }

    pub fn c_q(&self) -> &Matrix {
        &self.c_q
    }

    pub fn ext_dim(&self) -> usize {
        self.c_p.rows()
    }

    pub fn n(&self) -> usize {
        self.ext_dim() - EXTENSION_SLOTS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryToken {
    c_y: Matrix,
}

impl QueryToken {
    pub fn from_matrix(c_y: Matrix) -> Result<Self> {
        if !c_y.is_square() || c_y.rows() <= EXTENSION_SLOTS {
            return Err(Error::InvalidParameter(format!(
                "token must be square with dimension > {EXTENSION_SLOTS}"
            )));
        }
        if !c_y.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(QueryToken { c_y })
    }

    pub fn c_y(&self) -> &Matrix {
        &self.c_y
    }

    pub fn ext_dim(&self) -> usize {
        self.c_y.rows()
    }

    pub fn n(&self) -> usize {
        self.ext_dim() - EXTENSION_SLOTS
    }
}

/// How the result-disguising scalars α and β are drawn from
/// `[scalar_low, scalar_high]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarDistribution {
    Uniform,
    LogUniform,
}

/// Switches for the three kinds of one-time randomness.
///
/// * Type I: the scalars α (query) and β (enrollment). Survive evaluation.
/// * Type II: the padding values `r_x`, `r_y` and the random `p/q` split.
/// * Type III: the unit-lower-triangular matrices `S_p`, `S_q`, `S_y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomnessConfig {
    pub type1_enabled: bool,
    pub type2_enabled: bool,
    pub type3_enabled: bool,
    pub scalar_low: f64,
    pub scalar_high: f64,
    pub scalar_dist: ScalarDistribution,
    pub pad_bound: f64,
}

impl Default for RandomnessConfig {
    fn default() -> Self {
        RandomnessConfig {
            type1_enabled: true,
            type2_enabled: true,
            type3_enabled: true,
            scalar_low: 1.0,
            scalar_high: 1024.0,
            scalar_dist: ScalarDistribution::Uniform,
            pad_bound: 256.0,
        }
    }
}

impl RandomnessConfig {
    /// Every randomness source switched off: α = β = 1, r = 0, no split,
    /// S = I.
    pub fn disabled() -> Self {
        RandomnessConfig {
            type1_enabled: false,
            type2_enabled: false,
            type3_enabled: false,
            ..RandomnessConfig::default()
        }
    }

    pub fn with_type1(mut self, on: bool) -> Self {
        self.type1_enabled = on;
        self
    }

    pub fn with_type2(mut self, on: bool) -> Self {
        self.type2_enabled = on;
        self
    }

    pub fn with_type3(mut self, on: bool) -> Self {
        self.type3_enabled = on;
        self
    }

    pub fn with_scalar_range(mut self, low: f64, high: f64, dist: ScalarDistribution) -> Self {
        self.scalar_low = low;
        self.scalar_high = high;
        self.scalar_dist = dist;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok_range = self.scalar_low.is_finite()
            && self.scalar_high.is_finite()
            && self.scalar_low > 0.0
            && self.scalar_low <= self.scalar_high;
        if !ok_range {
            return Err(Error::InvalidParameter(format!(
                "scalar range must satisfy 0 < low <= high, got [{}, {}]",
                self.scalar_low, self.scalar_high
            )));
        }
        if !(self.pad_bound.is_finite() && self.pad_bound > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pad bound must be positive, got {}",
                self.pad_bound
            )));
        }
        Ok(())
    }

    /// Draws α or β; exactly 1 when Type I is off.
    pub fn draw_scalar<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if !self.type1_enabled {
            return 1.0;
        }
        if self.scalar_low == self.scalar_high {
            return self.scalar_low;
        }
        match self.scalar_dist {
            ScalarDistribution::Uniform => rng.gen_range(self.scalar_low..=self.scalar_high),
            ScalarDistribution::LogUniform => {
                let (lo, hi) = (self.scalar_low.ln(), self.scalar_high.ln());
                rng.gen_range(lo..=hi).exp()
            }
        }
    }

    /// Draws a padding value; exactly 0 when Type II is off.
    pub fn draw_pad<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if !self.type2_enabled {
            return 0.0;
        }
        rng.gen_range(-self.pad_bound..=self.pad_bound)
    }
}

/// Test-mode record of the one-time values consumed by a transform or token
/// generation. Never written to any file format.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformTrace {
    /// β for an enrollment, α for a query.
    pub scalar: f64,
    /// `r_x` or `r_y`.
    pub pad: f64,
    /// Extended vector before permutation.
    pub extended: Vec<f64>,
    /// Extended vector after permutation.
    pub permuted: Vec<f64>,
    /// The `(p, q)` split; enrollment only.
    pub split: Option<(Vec<f64>, Vec<f64>)>,
}

/// `(−2βx₁, …, −2βxₙ, βΣxᵢ², β, −βθ², r_x, 0)`
pub fn extend_enroll(x: &[f64], theta: f64, beta: f64, r_x: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let sq: f64 = x.iter().map(|v| v * v).sum();
    let mut out = Vec::with_capacity(x.len() + EXTENSION_SLOTS);
    out.extend(x.iter().map(|v| -2.0 * beta * v));
    out.extend_from_slice(&[beta * sq, beta, -beta * theta * theta, r_x, 0.0]);
    Ok(out)
}

/// `(αy₁, …, αyₙ, α, αΣyᵢ², α, 0, r_y)`
pub fn extend_query(y: &[f64], alpha: f64, r_y: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let sq: f64 = y.iter().map(|v| v * v).sum();
    let mut out = Vec::with_capacity(y.len() + EXTENSION_SLOTS);
    out.extend(y.iter().map(|v| alpha * v));
    out.extend_from_slice(&[alpha, alpha * sq, alpha, 0.0, r_y]);
    Ok(out)
}

/// Splits `v` into `p + q` with `p` uniform on `[−bound, bound]`. The float
/// sum `p[i] + q[i]` reproduces `v[i]` exactly.
fn additive_split<R: Rng + ?Sized>(v: &[f64], bound: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::with_capacity(v.len());
    let mut q = Vec::with_capacity(v.len());
    for &x in v {
        let mut pi = rng.gen_range(-bound..=bound);
        let qi = x - pi;
        if pi + qi != x {
            pi = x - qi;
        }
        if pi + qi == x {
            p.push(pi);
            q.push(qi);
        } else {
            p.push(x);
            q.push(0.0);
        }
    }
    (p, q)
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn mask_factor<R: Rng + ?Sized>(dim: usize, cfg: &RandomnessConfig, rng: &mut R) -> Option<Matrix> {
    cfg.type3_enabled
        .then(|| rand_unit_lower_triangular(dim, rng))
}

/// `M1 · S · diag(d) · M2`, skipping the `S` product when masking is off.
fn mask_enrollment(sk: &SecretKey, s: Option<&Matrix>, d: &[f64]) -> Result<Matrix> {
    let left = match s {
        Some(s) => sk.m1.matmul(s)?,
        None => sk.m1.clone(),
    };
    left.scale_cols(d)?.matmul(&sk.m2)
}

/// Transforms an enrolled template into its outsourced form.
pub fn transform<R: Rng + ?Sized>(
    sk: &SecretKey,
    params: &SystemParams,
    x: &PlainTemplate,
    rng: &mut R,
    cfg: &RandomnessConfig,
) -> Result<EncryptedTemplate> {
    transform_traced(sk, params, x, rng, cfg).map(|(ct, _)| ct)
}

/// [`transform`] that also returns the one-time values it consumed.
pub fn transform_traced<R: Rng + ?Sized>(
    sk: &SecretKey,
    params: &SystemParams,
    x: &PlainTemplate,
    rng: &mut R,
    cfg: &RandomnessConfig,
) -> Result<(EncryptedTemplate, TransformTrace)> {
    cfg.validate()?;
    let beta = cfg.draw_scalar(rng);
    transform_with_scalar(sk, params, x, beta, rng, cfg)
}

/// Transform with a caller-chosen β; all other randomness follows `cfg`.
pub fn transform_with_scalar<R: Rng + ?Sized>(
    sk: &SecretKey,
    params: &SystemParams,
    x: &PlainTemplate,
    beta: f64,
    rng: &mut R,
    cfg: &RandomnessConfig,
) -> Result<(EncryptedTemplate, TransformTrace)> {
    cfg.validate()?;
    sk.check_params(params)?;
    x.check(params)?;
    let r_x = cfg.draw_pad(rng);
    let extended = extend_enroll(&x.features, params.theta(), beta, r_x)?;
    let permuted = apply_permutation(&sk.pi, &extended)?;
    let (p, q) = if cfg.type2_enabled {
        additive_split(&permuted, cfg.pad_bound, rng)
    } else {
        (permuted.clone(), vec![0.0; permuted.len()])
    };

    let d = params.ext_dim();
    let balance = apply_permutation(&sk.pi, &params.enroll_balance())?;
    let s_p = mask_factor(d, cfg, rng);
    let s_q = mask_factor(d, cfg, rng);
    let c_p = mask_enrollment(sk, s_p.as_ref(), &hadamard(&p, &balance))?;
    let c_q = if q.iter().all(|&v| v == 0.0) {
        Matrix::zeros(d, d)
    } else {
        mask_enrollment(sk, s_q.as_ref(), &hadamard(&q, &balance))?
    };
    let ct = EncryptedTemplate::from_parts(x.id, c_p, c_q)?;
    let trace = TransformTrace {
        scalar: beta,
        pad: r_x,
        extended,
        permuted,
        split: Some((p, q)),
    };
    Ok((ct, trace))
}

/// Produces the single-use query token for `y`.
pub fn token_gen<R: Rng + ?Sized>(
    sk: &SecretKey,
    params: &SystemParams,
    y: &PlainTemplate,
    rng: &mut R,
    cfg: &RandomnessConfig,
) -> Result<QueryToken> {
    token_gen_traced(sk, params, y, rng, cfg).map(|(tok, _)| tok)
}

pub fn token_gen_traced<R: Rng + ?Sized>(
    sk: &SecretKey,
    params: &SystemParams,
    y: &PlainTemplate,
    rng: &mut R,
    cfg: &RandomnessConfig,
) -> Result<(QueryToken, TransformTrace)> {
    cfg.validate()?;
    let alpha = cfg.draw_scalar(rng);
    token_gen_with_scalar(sk, params, y, alpha, rng, cfg)
}

/// Token generation with a caller-chosen α.
pub fn token_gen_with_scalar<R: Rng + ?Sized>(
    sk: &SecretKey,
    params: &SystemParams,
    y: &PlainTemplate,
    alpha: f64,
    rng: &mut R,
    cfg: &RandomnessConfig,
) -> Result<(QueryToken, TransformTrace)> {
    cfg.validate()?;
    sk.check_params(params)?;
    y.check(params)?;
    let r_y = cfg.draw_pad(rng);
    let extended = extend_query(&y.features, alpha, r_y)?;
    let permuted = apply_permutation(&sk.pi, &extended)?;

    let d = params.ext_dim();
    let balance = apply_permutation(&sk.pi, &params.query_balance())?;
    let diag = hadamard(&permuted, &balance);
    // diag(y'') · S_y
    let middle = match mask_factor(d, cfg, rng) {
        Some(s) => s.scale_rows(&diag)?,
        None => Matrix::from_diagonal(&diag),
    };
    let c_y = sk.m2_inv.matmul(&middle)?.matmul(&sk.m1_inv)?;
    let tok = QueryToken::from_matrix(c_y)?;
    let trace = TransformTrace {
        scalar: alpha,
        pad: r_y,
        extended,
        permuted,
        split: None,
    };
    Ok((tok, trace))
}

/// Per-record identification decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub id: u64,
    pub matched: bool,
    /// The evaluation value `I`; only populated by the debug evaluators.
    pub raw_value: Option<f64>,
}

impl MatchResult {
    /// Λ as 0/1.
    pub fn lambda(&self) -> u8 {
        u8::from(self.matched)
    }
}

fn check_pair(ct: &EncryptedTemplate, tok: &QueryToken) -> Result<()> {
    if ct.ext_dim() != tok.ext_dim() {
        return Err(Error::RecordDimension {
            id: ct.id,
            expected: tok.n(),
            found: ct.n(),
        });
    }
    Ok(())
}

/// The evaluation value `I = tr(C_p·C_y) + tr(C_q·C_y)`.
pub fn evaluation_value(ct: &EncryptedTemplate, tok: &QueryToken) -> Result<f64> {
    check_pair(ct, tok)?;
    let (tp, tq) = trace_product_pair(&ct.c_p, &ct.c_q, &tok.c_y)?;
    let i = tp + tq;
    if !i.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(i)
}

/// Λ = 1 iff `I ≤ 0`. The raw value is withheld.
pub fn evaluate(ct: &EncryptedTemplate, tok: &QueryToken) -> Result<MatchResult> {
    let i = evaluation_value(ct, tok)?;
    Ok(MatchResult {
        id: ct.id,
        matched: i <= 0.0,
        raw_value: None,
    })
}

/// [`evaluate`] exposing `I`. Leaks more than the decision; for attack
/// experiments and verification only.
pub fn evaluate_debug(ct: &EncryptedTemplate, tok: &QueryToken) -> Result<MatchResult> {
    let i = evaluation_value(ct, tok)?;
    Ok(MatchResult {
        id: ct.id,
        matched: i <= 0.0,
        raw_value: Some(i),
    })
}

/// Linear scan returning every matching record in storage order.
pub fn identify(db: &[EncryptedTemplate], tok: &QueryToken) -> Result<Vec<MatchResult>> {
    identify_stream(db.iter().map(Ok), tok, false)
}

/// Scan over a fallible record stream (e.g. [`crate::store::scan`]).
/// Only one record is held at a time.
pub fn identify_stream<I, T>(records: I, tok: &QueryToken, debug: bool) -> Result<Vec<MatchResult>>
where
    I: IntoIterator<Item = Result<T>>,
    T: std::borrow::Borrow<EncryptedTemplate>,
{
    let eval = if debug { evaluate_debug } else { evaluate };
    let mut hits = Vec::new();
    for rec in records {
        let rec = rec?;
        let res = eval(rec.borrow(), tok)?;
        if res.matched {
            hits.push(res);
        }
    }
    Ok(hits)
}

/// Scan on `jobs` worker threads; results keep storage order.
pub fn identify_parallel(
    db: &[EncryptedTemplate],
    tok: &QueryToken,
    jobs: usize,
    debug: bool,
) -> Result<Vec<MatchResult>> {
    let eval = if debug { evaluate_debug } else { evaluate };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let all: Vec<MatchResult> = pool.install(|| {
        db.par_iter()
            .map(|ct| eval(ct, tok))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(all.into_iter().filter(|r| r.matched).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn random_features(n: usize, g: &mut ChaCha20Rng) -> Vec<f64> {
        (0..n).map(|_| g.gen_range(0.0..=255.0)).collect()
    }

    #[test]
    fn setup_examples() {
        assert_eq!(setup(2, 5.0).unwrap().ext_dim(), 7);
        assert_eq!(setup(640, 100.0).unwrap().ext_dim(), 645);
        assert!(setup(0, 1.0).is_err());
        assert!(setup(3, -1.0).is_err());
        assert!(setup(3, f64::NAN).is_err());
    }

    #[test]
    fn keygen_shapes_and_inverses() {
        let params = setup(2, 1.0).unwrap();
        let sk = keygen(&params, &mut rng(1)).unwrap();
        for m in [sk.m1(), sk.m1_inv(), sk.m2(), sk.m2_inv()] {
            assert_eq!((m.rows(), m.cols()), (7, 7));
        }
        assert!(Permutation::from_vec(sk.permutation().as_slice().to_vec()).is_ok());
        assert!(sk.inverse_residual().unwrap() <= 1e-9 * 7.0);
        let other = keygen(&params, &mut rng(2)).unwrap();
        assert_ne!(sk.m1(), other.m1());
    }

    #[test]
    fn extension_examples() {
        assert_eq!(
            extend_enroll(&[1.0], 1.0, 1.0, 5.0).unwrap(),
            vec![-2.0, 1.0, 1.0, -1.0, 5.0, 0.0]
        );
        assert_eq!(
            extend_enroll(&[0.0, 0.0], 4.0, 3.0, 0.0).unwrap(),
            vec![0.0, 0.0, 0.0, 3.0, -48.0, 0.0, 0.0]
        );
        assert_eq!(
            extend_query(&[2.0], 1.0, 7.0).unwrap(),
            vec![2.0, 1.0, 4.0, 1.0, 0.0, 7.0]
        );
        assert_eq!(
            extend_query(&[0.0, 0.0, 0.0], 1.0, -2.5).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -2.5]
        );
        assert!(extend_enroll(&[1.0], 1.0, 0.0, 0.0).is_err());
        assert!(extend_query(&[1.0], -1.0, 0.0).is_err());
    }

    #[test]
    fn padding_slots_never_meet() {
        let x = extend_enroll(&[3.0, 4.0], 2.0, 1.0, 123.0).unwrap();
        let y = extend_query(&[1.0, 1.0], 1.0, -77.0).unwrap();
        let n = 2;
        assert_eq!(x[n + 3] * y[n + 3] + x[n + 4] * y[n + 4], 0.0);
    }

    #[test]
    fn extended_inner_product_is_scaled_distance() {
        let mut g = rng(3);
        for n in [1, 2, 5, 17] {
            let x = random_features(n, &mut g);
            let y = random_features(n, &mut g);
            let (alpha, beta, theta) = (g.gen_range(1.0..9.0), g.gen_range(1.0..9.0), 40.0);
            let ip = dot(
                &extend_enroll(&x, theta, beta, g.gen_range(-5.0..5.0)).unwrap(),
                &extend_query(&y, alpha, g.gen_range(-5.0..5.0)).unwrap(),
            );
            let d2 = squared_distance(&x, &y);
            let want = alpha * beta * (d2 - theta * theta);
            assert!((ip - want).abs() <= 1e-10 * alpha * beta * (d2 + theta * theta + 1.0));
        }
    }

    #[test]
    fn degenerate_masking_exposes_diagonals() {
        // θ = 1 keeps the slot balance at 1, so the diagonals are the raw
        // extended vectors.
        let params = setup(2, 1.0).unwrap();
        let sk = SecretKey::insecure_identity(&params);
        let cfg = RandomnessConfig::disabled();
        let x = PlainTemplate::new(9, vec![1.0, 2.0]);
        let (ct, tr) = transform_traced(&sk, &params, &x, &mut rng(4), &cfg).unwrap();
        assert_eq!(ct.c_p(), &Matrix::from_diagonal(&tr.permuted));
        assert_eq!(ct.c_q(), &Matrix::zeros(7, 7));
        assert_eq!(
            tr.permuted,
            extend_enroll(&[1.0, 2.0], 1.0, 1.0, 0.0).unwrap()
        );

        let y = PlainTemplate::new(0, vec![4.0, 6.0]);
        let tok = token_gen(&sk, &params, &y, &mut rng(5), &cfg).unwrap();
        assert_eq!(
            tok.c_y(),
            &Matrix::from_diagonal(&extend_query(&[4.0, 6.0], 1.0, 0.0).unwrap())
        );
    }

    #[test]
    fn slot_balance_is_exact_power_of_two() {
        let params = setup(2, 3.0).unwrap();
        assert_eq!(params.slot_scale(), 4.0);
        assert_eq!(setup(2, 0.0).unwrap().slot_scale(), 1.0);
        assert_eq!(setup(2, 1000.0).unwrap().slot_scale(), 1024.0);
        let e = params.enroll_balance();
        let q = params.query_balance();
        assert!(e.iter().zip(&q).all(|(a, b)| a * b == 1.0));

        let sk = SecretKey::insecure_identity(&params);
        let cfg = RandomnessConfig::disabled();
        let (ct, tr) = transform_traced(
            &sk,
            &params,
            &PlainTemplate::new(1, vec![1.0, 2.0]),
            &mut rng(4),
            &cfg,
        )
        .unwrap();
        let want: Vec<f64> = tr.permuted.iter().zip(&e).map(|(a, b)| a * b).collect();
        assert_eq!(ct.c_p().diagonal(), want);
        assert_eq!(
            tr.permuted,
            extend_enroll(&[1.0, 2.0], 3.0, 1.0, 0.0).unwrap()
        );
    }

    #[test]
    fn split_is_exact() {
        let params = setup(6, 50.0).unwrap();
        let mut g = rng(6);
        let sk = keygen(&params, &mut g).unwrap();
        for _ in 0..20 {
            let x = PlainTemplate::new(1, random_features(6, &mut g));
            let (_, tr) =
                transform_traced(&sk, &params, &x, &mut g, &RandomnessConfig::default()).unwrap();
            let (p, q) = tr.split.unwrap();
            for ((a, b), v) in p.iter().zip(&q).zip(&tr.permuted) {
                assert_eq!(a + b, *v);
            }
        }
    }

    #[test]
    fn evaluate_examples() {
        let params = setup(2, 5.0).unwrap();
        let mut g = rng(7);
        let sk = keygen(&params, &mut g).unwrap();
        let cfg = RandomnessConfig::default();

        let x = PlainTemplate::new(1, vec![10.0, 20.0]);
        let tok = token_gen(&sk, &params, &x, &mut g, &cfg).unwrap();
        let ct = transform(&sk, &params, &x, &mut g, &cfg).unwrap();
        let res = evaluate(&ct, &tok).unwrap();
        assert!(res.matched);
        assert_eq!(res.raw_value, None);

        // x=(0,0), y=(3,4), θ=4, α=2, β=3 → I = 6·(25−16) = 54.
        let params4 = setup(2, 4.0).unwrap();
        let sk4 = keygen(&params4, &mut g).unwrap();
        let (ct, _) = transform_with_scalar(
            &sk4,
            &params4,
            &PlainTemplate::new(2, vec![0.0, 0.0]),
            3.0,
            &mut g,
            &cfg,
        )
        .unwrap();
        let (tok, _) = token_gen_with_scalar(
            &sk4,
            &params4,
            &PlainTemplate::new(0, vec![3.0, 4.0]),
            2.0,
            &mut g,
            &cfg,
        )
        .unwrap();
        let res = evaluate_debug(&ct, &tok).unwrap();
        assert!(!res.matched);
        let i = res.raw_value.unwrap();
        assert!(
            (i - 54.0).abs() <= 1e-6 * 6.0 * (25.0 + 16.0 + 1.0),
            "I={i}"
        );
    }

    #[test]
    fn exact_boundary_matches_without_masks() {
        // With identity masks and no randomness the arithmetic is exact.
        let params = setup(2, 5.0).unwrap();
        let sk = SecretKey::insecure_identity(&params);
        let cfg = RandomnessConfig::disabled();
        let ct = transform(
            &sk,
            &params,
            &PlainTemplate::new(1, vec![0.0, 0.0]),
            &mut rng(8),
            &cfg,
        )
        .unwrap();
        let tok = token_gen(
            &sk,
            &params,
            &PlainTemplate::new(0, vec![3.0, 4.0]),
            &mut rng(8),
            &cfg,
        )
        .unwrap();
        let res = evaluate_debug(&ct, &tok).unwrap();
        assert_eq!(res.raw_value, Some(0.0));
        assert!(res.matched);
        assert_eq!(res.lambda(), 1);
    }

    #[test]
    fn dimension_mismatches_rejected() {
        let p2 = setup(2, 1.0).unwrap();
        let p3 = setup(3, 1.0).unwrap();
        let mut g = rng(9);
        let sk2 = keygen(&p2, &mut g).unwrap();
        let sk3 = keygen(&p3, &mut g).unwrap();
        let cfg = RandomnessConfig::default();
        assert!(transform(&sk2, &p2, &PlainTemplate::new(0, vec![1.0]), &mut g, &cfg).is_err());
        assert!(transform(
            &sk2,
            &p3,
            &PlainTemplate::new(0, vec![1.0; 3]),
            &mut g,
            &cfg
        )
        .is_err());
        let ct = transform(
            &sk2,
            &p2,
            &PlainTemplate::new(5, vec![1.0; 2]),
            &mut g,
            &cfg,
        )
        .unwrap();
        let tok = token_gen(
            &sk3,
            &p3,
            &PlainTemplate::new(0, vec![1.0; 3]),
            &mut g,
            &cfg,
        )
        .unwrap();
        assert!(matches!(
            evaluate(&ct, &tok),
            Err(Error::RecordDimension { id: 5, .. })
        ));
        assert!(matches!(
            identify(&[ct], &tok),
            Err(Error::RecordDimension { id: 5, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let base = RandomnessConfig::default();
        for bad in [
            RandomnessConfig {
                scalar_low: 0.0,
                ..base
            },
            RandomnessConfig {
                scalar_low: 10.0,
                scalar_high: 5.0,
                ..base
            },
            RandomnessConfig {
                pad_bound: 0.0,
                ..base
            },
        ] {
            assert!(bad.validate().is_err());
        }

        let params = setup(2, 1.0).unwrap();
        let sk = SecretKey::insecure_identity(&params);
        let bad = RandomnessConfig {
            pad_bound: 0.0,
            ..base
        };
        assert!(transform(
            &sk,
            &params,
            &PlainTemplate::new(0, vec![0.0; 2]),
            &mut rng(0),
            &bad
        )
        .is_err());
    }

    #[test]
    fn disabled_scalars_are_one() {
        let cfg = RandomnessConfig::default()
            .with_type1(false)
            .with_type2(false);
        let mut g = rng(10);
        assert_eq!(cfg.draw_scalar(&mut g), 1.0);
        assert_eq!(cfg.draw_pad(&mut g), 0.0);
        let log = RandomnessConfig::default().with_scalar_range(
            1.0,
            1000.0,
            ScalarDistribution::LogUniform,
        );
        for _ in 0..100 {
            let s = log.draw_scalar(&mut g);
            assert!((1.0..=1000.0 + 1e-9).contains(&s));
        }
    }

    #[test]
    fn identify_examples() {
        let theta = 20.0;
        let params = setup(3, theta).unwrap();
        let mut g = rng(11);
        let sk = keygen(&params, &mut g).unwrap();
        let cfg = RandomnessConfig::default();
        let y = vec![100.0, 50.0, 25.0];
        let tok = token_gen(
            &sk,
            &params,
            &PlainTemplate::new(0, y.clone()),
            &mut g,
            &cfg,
        )
        .unwrap();

        assert!(identify(&[], &tok).unwrap().is_empty());

        // distances 0, θ/2, 2θ along the first axis
        let db: Vec<EncryptedTemplate> = [0.0, theta / 2.0, 2.0 * theta]
            .iter()
            .enumerate()
            .map(|(i, off)| {
                let mut f = y.clone();
                f[0] += off;
                transform(
                    &sk,
                    &params,
                    &PlainTemplate::new(i as u64 + 1, f),
                    &mut g,
                    &cfg,
                )
                .unwrap()
            })
            .collect();
        let ids: Vec<u64> = identify(&db, &tok).unwrap().iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![1, 2]);
        let par: Vec<u64> = identify_parallel(&db, &tok, 3, false)
            .unwrap()
            .iter()
            .map(|r| r.id)
            .collect();
        assert_eq!(par, ids);

        let dup = PlainTemplate::new(7, y.clone());
        let twice = vec![
            transform(&sk, &params, &dup, &mut g, &cfg).unwrap(),
            transform(&sk, &params, &PlainTemplate::new(8, y), &mut g, &cfg).unwrap(),
        ];
        let ids: Vec<u64> = identify(&twice, &tok)
            .unwrap()
            .iter()
            .map(|r| r.id)
            .collect();
        assert_eq!(ids, vec![7, 8]);
    }
}
