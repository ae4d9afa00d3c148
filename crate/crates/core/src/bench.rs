//! Timing sweeps over the template dimension and log-log slope fits.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scheme::{
    evaluate, identify, keygen, setup, token_gen, transform, EncryptedTemplate, PlainTemplate,
    QueryToken, RandomnessConfig,
};

/// Records in the database scanned by the `identify` measurement.
pub const IDENTIFY_RECORDS: usize = 8;

/// Cheap ops are repeated until one timed batch lasts at least this long.
const MIN_BATCH: Duration = Duration::from_millis(1);

/// Default working-set size for the evaluate measurement: comfortably past
/// the last-level cache of desk machines, so every call streams its
/// operands from memory as a database scan would.
pub const DEFAULT_EVALUATE_POOL_BYTES: usize = 128 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub reps: usize,
    /// Bytes of distinct (record, token) copies that evaluate cycles
    /// through. 0 reuses a single pair, i.e. hot-cache timing.
    pub evaluate_pool_bytes: usize,
}

impl BenchConfig {
    pub fn new(reps: usize) -> Self {
        BenchConfig {
            reps,
            evaluate_pool_bytes: DEFAULT_EVALUATE_POOL_BYTES,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Evaluate,
    Identify,
    TokenGen,
    Transform,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Transform, Op::TokenGen, Op::Evaluate, Op::Identify];

    pub fn name(self) -> &'static str {
        match self {
            Op::Transform => "transform",
            Op::TokenGen => "token_gen",
            Op::Evaluate => "evaluate",
            Op::Identify => "identify",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Op {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Op::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown op {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub op: Op,
    pub reps: usize,
    pub median_s: f64,
    pub mean_s: f64,
    pub stddev_s: f64,
}

impl BenchRow {
    /// Summarises per-rep wall times (seconds).
    pub fn from_samples(n: usize, op: Op, samples: &[f64]) -> Result<Self> {
        if samples.len() < 3 {
            return Err(Error::InsufficientData(format!(
                "{} samples, need at least 3",
                samples.len()
            )));
        }
        if samples.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::InvalidParameter(
                "sample times must be positive".into(),
            ));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let median_s = if k % 2 == 1 {
            sorted[k / 2]
        } else {
            0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
        };
        let mean_s = samples.iter().sum::<f64>() / k as f64;
        let var = samples.iter().map(|t| (t - mean_s).powi(2)).sum::<f64>() / (k - 1) as f64;
        Ok(BenchRow {
            n,
            op,
            reps: k,
            median_s,
            mean_s,
            stddev_s: var.sqrt(),
        })
    }
}

/// Times `f` once, or as a batch of repeated calls when a single call is
/// shorter than [`MIN_BATCH`]. Returns seconds per call.
fn time_per_call<T>(mut f: impl FnMut() -> Result<T>, batch: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..batch {
        black_box(f()?);
    }
    Ok(start.elapsed().as_secs_f64() / batch as f64)
}

fn calibrate<T>(mut f: impl FnMut() -> Result<T>) -> Result<usize> {
    // doubles as the warm-up run
    let mut batch = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..batch {
            black_box(f()?);
        }
        if start.elapsed() >= MIN_BATCH || batch >= 1 << 20 {
            return Ok(batch);
        }
        batch *= 2;
    }
}

fn measure<T>(n: usize, op: Op, reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<BenchRow> {
    let batch = calibrate(&mut f)?;
    let samples = (0..reps)
        .map(|_| time_per_call(&mut f, batch))
        .collect::<Result<Vec<_>>>()?;
    BenchRow::from_samples(n, op, &samples)
}

fn random_template<R: Rng + ?Sized>(id: u64, n: usize, rng: &mut R) -> PlainTemplate {
    PlainTemplate::new(id, (0..n).map(|_| rng.gen_range(0.0..=255.0)).collect())
}

/// Measures the selected ops at each dimension with a fresh key per `n`.
/// Warm-up calls are not recorded.
pub fn sweep_ops<R: Rng + ?Sized>(
    ns: &[usize],
    ops: &[Op],
    cfg: &BenchConfig,
    rng: &mut R,
) -> Result<Vec<BenchRow>> {
    let reps = cfg.reps;
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::InvalidParameter(
            "dimensions must be non-empty and positive".into(),
        ));
    }
    if reps < 3 {
        return Err(Error::InvalidParameter("reps must be at least 3".into()));
    }
    let pool_bytes = cfg.evaluate_pool_bytes;
    let cfg = RandomnessConfig::default();
    let mut rows = Vec::new();
    for &n in ns {
        let x = random_template(0, n, rng);
        let y = random_template(1, n, rng);
        let theta = (n as f64).sqrt() * 100.0;
        let params = setup(n, theta)?;
        let sk = keygen(&params, rng)?;
        let ct = transform(&sk, &params, &x, rng, &cfg)?;
        let tok = token_gen(&sk, &params, &y, rng, &cfg)?;
        for &op in ops {
            let row = match op {
                Op::Transform => measure(n, op, reps, || transform(&sk, &params, &x, rng, &cfg))?,
                Op::TokenGen => measure(n, op, reps, || token_gen(&sk, &params, &y, rng, &cfg))?,
                Op::Evaluate => {
                    let pair_bytes = 3 * params.ext_dim().pow(2) * 8;
                    let copies = pool_bytes.div_ceil(pair_bytes).max(1);
                    let pool: Vec<(EncryptedTemplate, QueryToken)> =
                        (0..copies).map(|_| (ct.clone(), tok.clone())).collect();
                    let mut k = 0;
                    measure(n, op, reps, || {
                        let (c, t) = &pool[k % copies];
                        k += 1;
                        evaluate(c, t)
                    })?
                }
                Op::Identify => {
                    let db = (0..IDENTIFY_RECORDS as u64)
                        .map(|id| transform(&sk, &params, &random_template(id, n, rng), rng, &cfg))
                        .collect::<Result<Vec<EncryptedTemplate>>>()?;
                    measure(n, op, reps, || identify(&db, &tok))?
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

/// [`sweep_ops`] over every op.
pub fn sweep<R: Rng + ?Sized>(ns: &[usize], reps: usize, rng: &mut R) -> Result<Vec<BenchRow>> {
    sweep_ops(ns, &Op::ALL, &BenchConfig::new(reps), rng)
}

/// Least-squares slope of `ln(median)` against `ln(n)`.
pub fn fit_loglog_slope(rows: &[BenchRow]) -> Result<f64> {
    if rows.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} rows, need at least 4",
            rows.len()
        )));
    }
    let lo = rows.iter().map(|r| r.n).min().unwrap_or(0);
    let hi = rows.iter().map(|r| r.n).max().unwrap_or(0);
    if lo == 0 || hi < 8 * lo {
        return Err(Error::InsufficientData(format!(
            "n spans {lo}..{hi}, need at least a factor of 8"
        )));
    }
    if rows
        .iter()
        .any(|r| r.median_s.is_nan() || r.median_s <= 0.0 || r.median_s.is_infinite())
    {
        return Err(Error::InvalidParameter("medians must be positive".into()));
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), r.median_s.ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

pub fn rows_for(rows: &[BenchRow], op: Op) -> Vec<BenchRow> {
    rows.iter().filter(|r| r.op == op).cloned().collect()
}

pub const CSV_HEADER: &str = "n,op,reps,median_s,mean_s,stddev_s";

/// `# key: value` lines describing the host.
pub fn machine_comment() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "# os: {}\n# arch: {}\n# logical_cpus: {}\n# threads_used: 1\n",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cpus
    )
}

/// CSV sorted by (op, n); floats use shortest round-trip formatting.
pub fn emit_csv(rows: &[BenchRow]) -> String {
    let mut sorted: Vec<&BenchRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.op.name().cmp(b.op.name()).then(a.n.cmp(&b.n)));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{:?},{:?},{:?}\n",
            r.n, r.op, r.reps, r.median_s, r.mean_s, r.stddev_s
        ));
    }
    out
}

/// Parses [`emit_csv`] output; `#` lines are ignored.
pub fn parse_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Corrupt(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Corrupt(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Corrupt(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| {
            field(i)
                .parse::<f64>()
                .map_err(|_| Error::Corrupt(format!("bad number {:?}", field(i))))
        };
        let int = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|_| Error::Corrupt(format!("bad integer {:?}", field(i))))
        };
        rows.push(BenchRow {
            n: int(0)?,
            op: field(1)
                .parse()
                .map_err(|_| Error::Corrupt(format!("bad op {:?}", field(1))))?,
            reps: int(2)?,
            median_s: num(3)?,
            mean_s: num(4)?,
            stddev_s: num(5)?,
        });
    }
    Ok(rows)
}
