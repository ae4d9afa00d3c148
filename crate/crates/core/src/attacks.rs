//! Adversary harnesses run in-process against the scheme.
//!
//! * [`enrollment_attack`]: a cloud that can enroll templates of its choice
//!   and read raw evaluation values solves for a hidden query coordinate by
//!   coordinate. Works exactly when Type I randomness is off.
//! * [`distinguish_game`]: two-candidate token indistinguishability with
//!   chosen-plaintext calibration tokens, scored empirically.
//! * [`leakage_rank_test`]: how well raw `|I|` values rank records by their
//!   true distance to the query.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scheme::{
    evaluate_debug, keygen, squared_distance, token_gen, transform, EncryptedTemplate,
    PlainTemplate, QueryToken, RandomnessConfig, SecretKey, SystemParams,
};

/// The key holder, acting on the adversary's behalf wherever the threat
/// model lets the adversary submit plaintexts.
pub struct DataOwner<R> {
    params: SystemParams,
    sk: SecretKey,
    cfg: RandomnessConfig,
    rng: R,
}

impl<R: Rng> DataOwner<R> {
    pub fn new(params: SystemParams, sk: SecretKey, cfg: RandomnessConfig, rng: R) -> Self {
        DataOwner {
            params,
            sk,
            cfg,
            rng,
        }
    }

    /// Generates a fresh key from `rng` and wraps it.
    pub fn generate(params: SystemParams, cfg: RandomnessConfig, mut rng: R) -> Result<Self> {
        let sk = keygen(&params, &mut rng)?;
        Ok(DataOwner::new(params, sk, cfg, rng))
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn config(&self) -> &RandomnessConfig {
        &self.cfg
    }

    pub fn enroll(&mut self, x: &PlainTemplate) -> Result<EncryptedTemplate> {
        transform(&self.sk, &self.params, x, &mut self.rng, &self.cfg)
    }

    pub fn tokenize(&mut self, y: &PlainTemplate) -> Result<QueryToken> {
        token_gen(&self.sk, &self.params, y, &mut self.rng, &self.cfg)
    }
}

/// The cloud's view during an enrollment attack: it may inject templates
/// and observe each one's raw evaluation value against a fixed hidden query.
pub trait EnrollmentOracle {
    fn params(&self) -> &SystemParams;

    /// Enrolls `x` and returns its evaluation value against the hidden
    /// query token.
    fn inject(&mut self, x: &PlainTemplate) -> Result<f64>;

    /// Ground truth, for scoring only. The attack never reads it.
    fn hidden_query(&self) -> Option<&PlainTemplate> {
        None
    }
}

/// A data owner plus one outstanding query token, exposing debug-mode
/// evaluation values.
pub struct SimulatedCloud<R> {
    owner: DataOwner<R>,
    query: PlainTemplate,
    token: QueryToken,
    injection_limit: Option<usize>,
    injected: usize,
}

impl<R: Rng> SimulatedCloud<R> {
    pub fn new(mut owner: DataOwner<R>, query: PlainTemplate) -> Result<Self> {
        let token = owner.tokenize(&query)?;
        Ok(SimulatedCloud {
            owner,
            query,
            token,
            injection_limit: None,
            injected: 0,
        })
    }

    /// Caps the number of injections the owner will accept.
    pub fn with_injection_limit(mut self, limit: usize) -> Self {
        self.injection_limit = Some(limit);
        self
    }
}

impl<R: Rng> EnrollmentOracle for SimulatedCloud<R> {
    fn params(&self) -> &SystemParams {
        self.owner.params()
    }

    fn inject(&mut self, x: &PlainTemplate) -> Result<f64> {
        if let Some(limit) = self.injection_limit {
            if self.injected >= limit {
                return Err(Error::OracleRefused(format!(
                    "injection limit of {limit} reached"
                )));
            }
        }
        self.injected += 1;
        let ct = self.owner.enroll(x)?;
        let res = evaluate_debug(&ct, &self.token)?;
        res.raw_value.ok_or(Error::NonFinite)
    }

    fn hidden_query(&self) -> Option<&PlainTemplate> {
        Some(&self.query)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackTranscript {
    pub injected: Vec<(PlainTemplate, f64)>,
    pub query_truth: Option<PlainTemplate>,
    pub recovered: Vec<f64>,
}

impl AttackTranscript {
    /// `maxᵢ |ŷᵢ − yᵢ| / (1 + |yᵢ|)`, when the truth is known.
    pub fn max_scaled_error(&self) -> Option<f64> {
        let truth = self.query_truth.as_ref()?;
        Some(
            self.recovered
                .iter()
                .zip(&truth.features)
                .map(|(e, t)| (e - t).abs() / (1.0 + t.abs()))
                .fold(0.0, f64::max),
        )
    }

    /// `‖ŷ − y‖ / ‖y‖` (or `‖ŷ‖` when `y = 0`).
    pub fn relative_error(&self) -> Option<f64> {
        let truth = self.query_truth.as_ref()?;
        let diff = squared_distance(&self.recovered, &truth.features).sqrt();
        let norm = truth.features.iter().map(|v| v * v).sum::<f64>().sqrt();
        Some(if norm > 0.0 { diff / norm } else { diff })
    }
}

/// Injects `0` and `δ·eᵢ` for each coordinate and solves
/// `ŷᵢ = (δ² − (Iᵢ − I₀)) / (2δ)`.
pub fn enrollment_attack<O: EnrollmentOracle + ?Sized>(
    oracle: &mut O,
    delta: f64,
) -> Result<AttackTranscript> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let n = oracle.params().n();
    let mut injected = Vec::with_capacity(n + 1);

    let origin = PlainTemplate::new(0, vec![0.0; n]);
    let base = oracle.inject(&origin)?;
    injected.push((origin, base));

    let mut recovered = Vec::with_capacity(n);
    for i in 0..n {
        let mut f = vec![0.0; n];
        f[i] = delta;
        let probe = PlainTemplate::new(i as u64 + 1, f);
        let value = oracle.inject(&probe)?;
        if !value.is_finite() {
            return Err(Error::NonFinite);
        }
        recovered.push((delta * delta - (value - base)) / (2.0 * delta));
        injected.push((probe, value));
    }
    Ok(AttackTranscript {
        injected,
        query_truth: oracle.hidden_query().cloned(),
        recovered,
    })
}

/// One enrollment-attack trial against a fresh key.
pub fn simulate_enrollment_attack<R: Rng>(
    params: SystemParams,
    query: PlainTemplate,
    delta: f64,
    cfg: RandomnessConfig,
    rng: R,
) -> Result<AttackTranscript> {
    let owner = DataOwner::generate(params, cfg, rng)?;
    let mut cloud = SimulatedCloud::new(owner, query)?;
    enrollment_attack(&mut cloud, delta)
}

/// CSV with one row per recovered coordinate: `trial,estimate,truth,error`.
pub fn enrollment_report_csv(transcripts: &[AttackTranscript]) -> String {
    let mut out = String::from("trial,estimate,truth,error\n");
    for (trial, t) in transcripts.iter().enumerate() {
        let truth = t.query_truth.as_ref().map(|q| q.features.as_slice());
        for (i, est) in t.recovered.iter().enumerate() {
            match truth.and_then(|q| q.get(i)) {
                Some(tv) => {
                    let _ = writeln!(out, "{trial},{est:e},{tv:e},{:e}", est - tv);
                }
                None => {
                    let _ = writeln!(out, "{trial},{est:e},,");
                }
            }
        }
    }
    out
}

/// Everything a distinguisher sees in one round of the game.
pub struct GameView<'a> {
    pub params: &'a SystemParams,
    pub candidates: [&'a PlainTemplate; 2],
    /// Chosen-plaintext tokens for each candidate, observed before the
    /// challenge.
    pub calibration: [&'a [QueryToken]; 2],
    pub challenge: &'a QueryToken,
}

pub trait Distinguisher: Sync {
    fn name(&self) -> &str;
    fn guess(&self, view: &GameView<'_>) -> u8;
}

/// Always answers the same bit.
pub struct ConstantGuess(pub u8);

impl Distinguisher for ConstantGuess {
    fn name(&self) -> &str {
        "constant"
    }

    fn guess(&self, _view: &GameView<'_>) -> u8 {
        self.0 & 1
    }
}

/// Nearest-mean classifier over a scalar token statistic. With no
/// calibration tokens it falls back to "larger statistic means the
/// larger-norm candidate" against a median split of the candidates' norms.
pub struct StatisticDistinguisher {
    name: &'static str,
    stat: fn(&Matrix) -> f64,
}

impl StatisticDistinguisher {
    pub fn new(name: &'static str, stat: fn(&Matrix) -> f64) -> Self {
        StatisticDistinguisher { name, stat }
    }

    /// `log ‖C_y‖_F`
    pub fn token_norm() -> Self {
        Self::new("token-norm", |m| m.frobenius_norm().ln())
    }

    /// `log maxᵢⱼ |C_y[i][j]|`
    pub fn max_entry() -> Self {
        Self::new("max-entry", |m| m.max_abs().ln())
    }

    /// `tr(C_y)`
    pub fn token_trace() -> Self {
        Self::new("trace", Matrix::trace)
    }
}

impl Distinguisher for StatisticDistinguisher {
    fn name(&self) -> &str {
        self.name
    }

    fn guess(&self, view: &GameView<'_>) -> u8 {
        let s = (self.stat)(view.challenge.c_y());
        let mean = |toks: &[QueryToken]| -> Option<f64> {
            if toks.is_empty() {
                return None;
            }
            Some(toks.iter().map(|t| (self.stat)(t.c_y())).sum::<f64>() / toks.len() as f64)
        };
        match (mean(view.calibration[0]), mean(view.calibration[1])) {
            (Some(m0), Some(m1)) => u8::from((s - m1).abs() < (s - m0).abs()),
            _ => {
                let norm = |p: &PlainTemplate| p.features.iter().map(|v| v * v).sum::<f64>();
                let bigger = u8::from(norm(view.candidates[1]) > norm(view.candidates[0]));
                if s > 0.0 {
                    bigger
                } else {
                    1 - bigger
                }
            }
        }
    }
}

/// The shipped heuristic battery.
pub fn default_battery() -> Vec<Box<dyn Distinguisher>> {
    vec![
        Box::new(ConstantGuess(0)),
        Box::new(StatisticDistinguisher::token_norm()),
        Box::new(StatisticDistinguisher::max_entry()),
        Box::new(StatisticDistinguisher::token_trace()),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GameResult {
    pub trials: u64,
    pub successes: u64,
    pub success_rate: f64,
    /// `1.96·√(0.25 / trials)`
    pub ci95_halfwidth: f64,
}

impl GameResult {
    pub fn from_counts(trials: u64, successes: u64) -> Result<Self> {
        if trials == 0 {
            return Err(Error::InvalidParameter("trials must be positive".into()));
        }
        if successes > trials {
            return Err(Error::InvalidParameter("more successes than trials".into()));
        }
        Ok(GameResult {
            trials,
            successes,
            success_rate: successes as f64 / trials as f64,
            ci95_halfwidth: 1.96 * (0.25 / trials as f64).sqrt(),
        })
    }
}

/// How the two candidate plaintexts are picked each round.
#[derive(Clone, Debug, PartialEq)]
pub enum Candidates {
    /// The same pair every round.
    Fixed([PlainTemplate; 2]),
    /// `y₀` uniform on `[low, high]ⁿ`, `y₁` a random reordering of `y₀`'s
    /// coordinates (equal norm).
    NormMatched { low: f64, high: f64 },
    /// `y₀` uniform on `[low, high]ⁿ`, `y₁ = factor · y₀`.
    Scaled { low: f64, high: f64, factor: f64 },
}

impl Candidates {
    pub fn draw<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> [PlainTemplate; 2] {
        let uniform = |low: f64, high: f64, rng: &mut G| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(low..=high)).collect()
        };
        match self {
            Candidates::Fixed(pair) => pair.clone(),
            Candidates::NormMatched { low, high } => {
                let y0 = uniform(*low, *high, rng);
                let mut y1 = y0.clone();
                y1.shuffle(rng);
                [PlainTemplate::new(0, y0), PlainTemplate::new(1, y1)]
            }
            Candidates::Scaled { low, high, factor } => {
                let y0 = uniform(*low, *high, rng);
                let y1 = y0.iter().map(|v| v * factor).collect();
                [PlainTemplate::new(0, y0), PlainTemplate::new(1, y1)]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameSetup {
    pub candidates: Candidates,
    /// Chosen-plaintext tokens of each candidate shown before the challenge.
    pub calibration_tokens: usize,
    /// Draw a fresh key every round instead of reusing one for the game.
    pub rekey_each_trial: bool,
}

/// Per-trial outcome, for reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialOutcome {
    pub bit: u8,
    pub guess: u8,
}

/// One round against an existing key holder: calibration tokens for both
/// candidates, then the challenge token of a hidden fair coin's candidate.
pub fn play_round<R: Rng, G: Rng + ?Sized>(
    owner: &mut DataOwner<R>,
    distinguisher: &dyn Distinguisher,
    candidates: &[PlainTemplate; 2],
    calibration_tokens: usize,
    rng: &mut G,
) -> Result<TrialOutcome> {
    let mut calib: [Vec<QueryToken>; 2] = [Vec::new(), Vec::new()];
    for (tokens, cand) in calib.iter_mut().zip(candidates) {
        for _ in 0..calibration_tokens {
            tokens.push(owner.tokenize(cand)?);
        }
    }
    let bit = u8::from(rng.gen_bool(0.5));
    let challenge = owner.tokenize(&candidates[bit as usize])?;
    let params = *owner.params();
    let view = GameView {
        params: &params,
        candidates: [&candidates[0], &candidates[1]],
        calibration: [&calib[0], &calib[1]],
        challenge: &challenge,
    };
    let guess = distinguisher.guess(&view) & 1;
    Ok(TrialOutcome { bit, guess })
}

/// Plays `trials` rounds of the game and scores the distinguisher.
pub fn distinguish_game<G: Rng + ?Sized>(
    params: &SystemParams,
    cfg: &RandomnessConfig,
    distinguisher: &dyn Distinguisher,
    setup: &GameSetup,
    trials: u64,
    rng: &mut G,
) -> Result<(GameResult, Vec<TrialOutcome>)> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let mut owner = DataOwner::generate(
        *params,
        *cfg,
        ChaCha20Rng::from_rng(&mut *rng).map_err(rng_err)?,
    )?;
    let mut outcomes = Vec::with_capacity(trials as usize);
    for t in 0..trials {
        if setup.rekey_each_trial && t > 0 {
            owner = DataOwner::generate(
                *params,
                *cfg,
                ChaCha20Rng::from_rng(&mut *rng).map_err(rng_err)?,
            )?;
        }
        let pair = setup.candidates.draw(params.n(), rng);
        outcomes.push(play_round(
            &mut owner,
            distinguisher,
            &pair,
            setup.calibration_tokens,
            rng,
        )?);
    }
    let wins = outcomes.iter().filter(|o| o.bit == o.guess).count() as u64;
    Ok((GameResult::from_counts(trials, wins)?, outcomes))
}

fn rng_err(e: rand::Error) -> Error {
    Error::InvalidParameter(format!("random source failed: {e}"))
}

/// CSV `trial,guess,truth,error` with `error` 0 on a correct guess.
pub fn game_report_csv(outcomes: &[TrialOutcome]) -> String {
    let mut out = String::from("trial,guess,truth,error\n");
    for (i, o) in outcomes.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{}",
            o.guess,
            o.bit,
            u8::from(o.guess != o.bit)
        );
    }
    out
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 samples".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageStats {
    pub records: usize,
    /// Spearman ρ between observed `|I|` and true distance.
    pub rho: f64,
    pub matches: usize,
    pub observed: Vec<f64>,
    pub distances: Vec<f64>,
}

/// Enrolls `db` under a fresh key with `cfg`, evaluates a token for `query`
/// against every record in debug mode, and rank-correlates `|I|` with the
/// true distances.
pub fn leakage_rank_test<R: Rng + ?Sized>(
    db: &[PlainTemplate],
    query: &PlainTemplate,
    params: &SystemParams,
    cfg: &RandomnessConfig,
    rng: &mut R,
) -> Result<LeakageStats> {
    if db.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 records, got {}",
            db.len()
        )));
    }
    let sk = keygen(params, rng)?;
    let tok = token_gen(&sk, params, query, rng, cfg)?;
    let mut observed = Vec::with_capacity(db.len());
    let mut distances = Vec::with_capacity(db.len());
    let mut matches = 0;
    for x in db {
        let ct = transform(&sk, params, x, rng, cfg)?;
        let res = evaluate_debug(&ct, &tok)?;
        matches += usize::from(res.matched);
        observed.push(res.raw_value.ok_or(Error::NonFinite)?.abs());
        distances.push(squared_distance(&x.features, &query.features).sqrt());
    }
    let rho = spearman(&observed, &distances)?;
    Ok(LeakageStats {
        records: db.len(),
        rho,
        matches,
        observed,
        distances,
    })
}
