//! The `sbid` command line.
//!
//! Exit codes: 0 success, 1 usage or parameter error, 2 data or integrity
//! failure, 3 no match under `identify --strict`.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    default_battery, distinguish_game, enrollment_report_csv, simulate_enrollment_attack,
    Candidates, GameSetup,
};
use crate::bench::{self, BenchConfig, Op};
use crate::error::{Error, Result};
use crate::scheme::{
    identify_parallel, identify_stream, keygen, setup, token_gen, transform, MatchResult,
    PlainTemplate, RandomnessConfig, SecretKey, SystemParams,
};
use crate::store::{self, FileKind, Header};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NO_MATCH: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "sbid",
    version,
    about = "Outsourced fixed-radius biometric identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a secret key and its parameter file.
    Keygen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Mark the key (and databases/tokens made from it) as test data,
        /// which permits --unsafe-debug.
        #[arg(long)]
        test_mode: bool,
    },
    /// Transform plaintext templates (CSV `id,f1..fn`) into a database.
    Enroll {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Turn a single query template into a token file.
    Tokenize {
        #[arg(long)]
        key: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the ids of every record within the radius, one per line.
    Identify {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        token: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Exit 3 when nothing matches.
        #[arg(long)]
        strict: bool,
        /// Also print the raw evaluation value. Test-mode files only.
        #[arg(long)]
        unsafe_debug: bool,
        /// Accepted for uniformity; identify draws no randomness.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the enrollment attack against simulated key holders.
    AttackEnroll {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10.0)]
        theta: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        randomness: RandomnessArgs,
    },
    /// Play the token distinguishability game with the built-in battery.
    AttackDistinguish {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10.0)]
        theta: f64,
        #[arg(long, default_value_t = 2000)]
        trials: u64,
        #[arg(long, value_enum, default_value_t = CandidateKind::Matched)]
        candidates: CandidateKind,
        /// Scale factor between the candidates for `--candidates scaled`.
        #[arg(long, default_value_t = 1000.0)]
        factor: f64,
        /// Chosen-plaintext tokens shown per candidate before the challenge.
        #[arg(long, default_value_t = 8)]
        calibration: usize,
        /// Keep one key for the whole game instead of rekeying each round.
        #[arg(long)]
        fixed_key: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        randomness: RandomnessArgs,
    },
    /// Time the scheme over a range of dimensions and print CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 400, 800, 1600])]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        /// Time evaluate on one cache-resident pair instead of streaming.
        #[arg(long)]
        hot: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the header of a key, database or token file.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
struct RandomnessArgs {
    #[arg(long)]
    no_type1: bool,
    #[arg(long)]
    no_type2: bool,
    #[arg(long)]
    no_type3: bool,
    /// Bound on extension pads and split offsets.
    #[arg(long)]
    pad_bound: Option<f64>,
}

impl RandomnessArgs {
    fn config(&self) -> Result<RandomnessConfig> {
        let mut cfg = RandomnessConfig::default()
            .with_type1(!self.no_type1)
            .with_type2(!self.no_type2)
            .with_type3(!self.no_type3);
        if let Some(b) = self.pad_bound {
            cfg.pad_bound = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CandidateKind {
    /// Second candidate is a reordering of the first (same norm).
    Matched,
    /// Second candidate is the first scaled by --factor.
    Scaled,
}

/// Contents of the `<key>.params.json` file written next to every key.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub n: usize,
    pub theta: f64,
}

pub fn params_path(key: &Path) -> PathBuf {
    let mut s = key.as_os_str().to_owned();
    s.push(".params.json");
    PathBuf::from(s)
}

fn rng_for(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

/// Key, header and parameters of a key file plus its sidecar.
fn load_key(path: &Path) -> Result<(SecretKey, Header, SystemParams)> {
    let (sk, header) = store::read_key_with_header(path)?;
    let side = params_path(path);
    let text = fs::read_to_string(&side)?;
    let pf: ParamsFile = serde_json::from_str(&text)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", side.display())))?;
    if pf.n != sk.n() {
        return Err(Error::DimensionMismatch {
            expected: sk.n(),
            found: pf.n,
        });
    }
    let params = setup(pf.n, pf.theta)?;
    Ok((sk, header, params))
}

/// Reads CSV templates with header `id,f1..fn`.
pub fn read_templates(path: &Path, n: usize) -> Result<Vec<PlainTemplate>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let width = reader.headers().map_err(csv_err)?.len();
    if width != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: width.saturating_sub(1),
        });
    }
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::Corrupt(format!("row {}: bad {what}", line + 1));
        let id: u64 = rec[0].parse().map_err(|_| bad("id"))?;
        let features = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("feature"))?;
        out.push(PlainTemplate::new(id, features));
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Corrupt(format!("{other:?}")),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) | Error::OracleRefused(_) | Error::InsufficientData(_) => {
            EXIT_USAGE
        }
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first) and runs the command, writing to the
/// process's stdout and stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// [`dispatch`] with explicit output streams.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "sbid: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Keygen {
            n,
            theta,
            seed,
            out: path,
            test_mode,
        } => {
            let params = setup(n, theta)?;
            let sk = keygen(&params, &mut rng_for(seed))?;
            store::write_key(&path, &sk, test_mode)?;
            let side = serde_json::to_string_pretty(&ParamsFile { n, theta })
                .map_err(|e| Error::Corrupt(e.to_string()))?;
            fs::write(params_path(&path), side + "\n")?;
        }
        Command::Enroll {
            key,
            db,
            input,
            seed,
        } => {
            let (sk, header, params) = load_key(&key)?;
            let templates = read_templates(&input, params.n())?;
            if !db.exists() {
                store::create_database(&db, params.n(), header.test_mode)?;
            }
            let existing = store::read_database_header(&db)?;
            if existing.n as usize != params.n() {
                return Err(Error::DimensionMismatch {
                    expected: existing.n as usize,
                    found: params.n(),
                });
            }
            let mut rng = rng_for(seed);
            let cfg = RandomnessConfig::default();
            let cts = templates
                .iter()
                .map(|x| transform(&sk, &params, x, &mut rng, &cfg))
                .collect::<Result<Vec<_>>>()?;
            store::append_records(&db, &cts)?;
            writeln!(out, "enrolled {} templates", cts.len())?;
        }
        Command::Tokenize {
            key,
            input,
            out: path,
            seed,
        } => {
            let (sk, header, params) = load_key(&key)?;
            let mut templates = read_templates(&input, params.n())?;
            if templates.len() != 1 {
                return Err(Error::InvalidParameter(format!(
                    "expected exactly one query template, found {}",
                    templates.len()
                )));
            }
            let y = templates.remove(0);
            let tok = token_gen(
                &sk,
                &params,
                &y,
                &mut rng_for(seed),
                &RandomnessConfig::default(),
            )?;
            store::write_token(&path, &tok, header.test_mode)?;
        }
        Command::Identify {
            db,
            token,
            jobs,
            strict,
            unsafe_debug,
            seed: _,
        } => {
            let hits = run_identify(&db, &token, jobs, unsafe_debug)?;
            for hit in &hits {
                match hit.raw_value {
                    Some(v) => writeln!(out, "{},{v:e}", hit.id)?,
                    None => writeln!(out, "{}", hit.id)?,
                }
            }
            if strict && hits.is_empty() {
                return Ok(EXIT_NO_MATCH);
            }
        }
        Command::AttackEnroll {
            n,
            theta,
            trials,
            delta,
            seed,
            randomness,
        } => {
            let params = setup(n, theta)?;
            let cfg = randomness.config()?;
            let mut rng = rng_for(seed);
            let mut transcripts = Vec::with_capacity(trials);
            for t in 0..trials {
                let query = PlainTemplate::new(
                    t as u64,
                    (0..n)
                        .map(|_| rand::Rng::gen_range(&mut rng, 0.0..=255.0))
                        .collect(),
                );
                let owner_rng = ChaCha20Rng::from_rng(&mut rng)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                transcripts.push(simulate_enrollment_attack(
                    params, query, delta, cfg, owner_rng,
                )?);
            }
            let rel: Vec<f64> = transcripts
                .iter()
                .filter_map(|t| t.relative_error())
                .collect();
            let mean = rel.iter().sum::<f64>() / rel.len().max(1) as f64;
            let worst = rel.iter().copied().fold(0.0, f64::max);
            writeln!(out, "# trials: {trials}")?;
            writeln!(out, "# mean_relative_error: {mean:e}")?;
            writeln!(out, "# max_relative_error: {worst:e}")?;
            out.write_all(enrollment_report_csv(&transcripts).as_bytes())?;
        }
        Command::AttackDistinguish {
            n,
            theta,
            trials,
            candidates,
            factor,
            calibration,
            fixed_key,
            seed,
            randomness,
        } => {
            let params = setup(n, theta)?;
            let cfg = randomness.config()?;
            let game = GameSetup {
                candidates: match candidates {
                    CandidateKind::Matched => Candidates::NormMatched {
                        low: 0.0,
                        high: 255.0,
                    },
                    CandidateKind::Scaled => Candidates::Scaled {
                        low: 0.0,
                        high: 255.0,
                        factor,
                    },
                },
                calibration_tokens: calibration,
                rekey_each_trial: !fixed_key,
            };
            let mut rng = rng_for(seed);
            writeln!(
                out,
                "distinguisher,trials,successes,success_rate,ci95_halfwidth"
            )?;
            for d in default_battery() {
                let (res, _) =
                    distinguish_game(&params, &cfg, d.as_ref(), &game, trials, &mut rng)?;
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    d.name(),
                    res.trials,
                    res.successes,
                    res.success_rate,
                    res.ci95_halfwidth
                )?;
            }
        }
        Command::Bench {
            ns,
            reps,
            ops,
            hot,
            seed,
        } => {
            let ops = if ops.is_empty() {
                Op::ALL.to_vec()
            } else {
                ops.iter().map(|s| s.parse()).collect::<Result<Vec<Op>>>()?
            };
            let mut cfg = BenchConfig::new(reps);
            if hot {
                cfg.evaluate_pool_bytes = 0;
            }
            let rows = bench::sweep_ops(&ns, &ops, &cfg, &mut rng_for(seed))?;
            out.write_all(bench::machine_comment().as_bytes())?;
            for op in &ops {
                if let Ok(slope) = bench::fit_loglog_slope(&bench::rows_for(&rows, *op)) {
                    writeln!(out, "# slope {op}: {slope:.3}")?;
                }
            }
            out.write_all(bench::emit_csv(&rows).as_bytes())?;
        }
        Command::Inspect { path, seed: _ } => {
            let h = store::inspect(&path)?;
            let kind = match h.kind {
                FileKind::Key => "key",
                FileKind::Database => "database",
                FileKind::Token => "token",
            };
            writeln!(out, "kind: {kind}")?;
            writeln!(out, "version: {}", h.version)?;
            writeln!(out, "test_mode: {}", h.test_mode)?;
            writeln!(out, "n: {}", h.n)?;
            if let Some(m) = h.record_count {
                writeln!(out, "records: {m}")?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn run_identify(db: &Path, token: &Path, jobs: usize, debug: bool) -> Result<Vec<MatchResult>> {
    if jobs == 0 {
        return Err(Error::InvalidParameter("--jobs must be at least 1".into()));
    }
    let records = store::scan(db)?;
    let dbh = *records.header();
    let tok_header = store::inspect(token)?;
    if debug && !(dbh.test_mode && tok_header.test_mode) {
        return Err(Error::InvalidParameter(
            "--unsafe-debug needs database and token files carrying the test-mode marker".into(),
        ));
    }
    let tok = store::read_token(token, Some(dbh.n as usize))?;
    if jobs == 1 {
        identify_stream(records, &tok, debug)
    } else {
        let all = records.collect::<Result<Vec<_>>>()?;
        identify_parallel(&all, &tok, jobs, debug)
    }
}
