//! Acceptance checks. Prints one PASS/FAIL line per criterion (plus INFO
//! lines for context) and exits non-zero if any criterion fails.
//!
//! Runs without the libtest harness so that the timing checks never share
//! the CPU with other tests.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sbid::attacks::{
    default_battery, distinguish_game, leakage_rank_test, simulate_enrollment_attack, Candidates,
    GameSetup,
};
use sbid::bench::{self, BenchConfig, Op};
use sbid::scheme::{
    evaluate, evaluation_value, keygen, setup, squared_distance, token_gen_traced,
    token_gen_with_scalar, transform_traced, transform_with_scalar, PlainTemplate,
    RandomnessConfig, ScalarDistribution,
};
use sbid::store;
use sbid::Result;

const FEATURE_MAX: f64 = 255.0;

const CORRECTNESS_NS: [usize; 4] = [2, 8, 64, 640];
const MIN_INSTANCES: usize = 1000;
const BOUNDARY_BAND: f64 = 1e-6;
const MARGIN_TOL: f64 = 1e-6;

const ABLATION_REDRAWS: usize = 200;
const ABLATION_TOL: f64 = 1e-6;
const TYPE1_OFF_TOL: f64 = 1e-9;

const ATTACK_TRIALS: usize = 100;
const ATTACK_NS: [usize; 4] = [2, 8, 16, 64];
const ATTACK_DELTA: f64 = 256.0;
const ATTACK_RECOVERY_TOL: f64 = 1e-6;
const ATTACK_MASKED_MIN_ERROR: f64 = 0.5;

const GAME_N: usize = 8;
const GAME_TRIALS: u64 = 2000;
const GAME_CALIBRATION: usize = 8;
const GAME_BAND: (f64, f64) = (0.45, 0.55);
const GAME_ABLATION_MIN: f64 = 0.9;

const BENCH_NS: [usize; 5] = [100, 200, 400, 800, 1600];
const BENCH_REPS: usize = 5;
const TOKEN_SLOPE: (f64, f64) = (2.5, 3.3);
const EVAL_SLOPE: (f64, f64) = (1.7, 2.3);
const TOKEN_2000_LIMIT_S: f64 = 10.0;

const LEAKAGE_RECORDS: usize = 500;
const LEAKAGE_N: usize = 64;
const LEAKAGE_MAX_RHO: f64 = 0.2;

struct Report {
    failed: Vec<&'static str>,
}

impl Report {
    fn check(&mut self, name: &'static str, outcome: Result<(bool, String)>) {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name);
        }
    }
}

fn info(msg: impl AsRef<str>) {
    println!("INFO {}", msg.as_ref());
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn random_template<R: Rng>(id: u64, n: usize, rng: &mut R) -> PlainTemplate {
    PlainTemplate::new(
        id,
        (0..n).map(|_| rng.gen_range(0.0..=FEATURE_MAX)).collect(),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

struct Instance {
    d2: f64,
    theta2: f64,
    ab: f64,
    value: f64,
    matched: bool,
}

/// `keys` independent keys, each evaluated on a `side × side` grid of
/// enrolled templates and query tokens. θ² is the median grid distance so
/// both outcomes occur.
fn correctness_instances(n: usize, keys: usize, side: usize, seed: u64) -> Result<Vec<Instance>> {
    let mut g = rng(seed);
    let cfg = RandomnessConfig::default();
    let mut out = Vec::with_capacity(keys * side * side);
    for _ in 0..keys {
        let xs: Vec<_> = (0..side as u64)
            .map(|i| random_template(i, n, &mut g))
            .collect();
        let ys: Vec<_> = (0..side as u64)
            .map(|i| random_template(i, n, &mut g))
            .collect();
        let d2s: Vec<f64> = xs
            .iter()
            .flat_map(|x| {
                ys.iter()
                    .map(move |y| squared_distance(&x.features, &y.features))
            })
            .collect();
        let theta2 = median(d2s);
        let params = setup(n, theta2.sqrt())?;
        let theta2 = params.theta() * params.theta();
        let sk = keygen(&params, &mut g)?;
        let cts = xs
            .iter()
            .map(|x| transform_traced(&sk, &params, x, &mut g, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let toks = ys
            .iter()
            .map(|y| token_gen_traced(&sk, &params, y, &mut g, &cfg))
            .collect::<Result<Vec<_>>>()?;
        for (x, (ct, te)) in xs.iter().zip(&cts) {
            for (y, (tok, tq)) in ys.iter().zip(&toks) {
                out.push(Instance {
                    d2: squared_distance(&x.features, &y.features),
                    theta2,
                    ab: te.scalar * tq.scalar,
                    value: evaluation_value(ct, tok)?,
                    matched: evaluate(ct, tok)?.matched,
                });
            }
        }
    }
    Ok(out)
}

fn correctness_and_margin(report: &mut Report) {
    let mut all = Vec::new();
    let started = Instant::now();
    for (i, &n) in CORRECTNESS_NS.iter().enumerate() {
        let (keys, side) = if n <= 8 { (4, 16) } else { (1, 32) };
        match correctness_instances(n, keys, side, 100 + i as u64) {
            Ok(inst) => all.push((n, inst)),
            Err(e) => {
                report.check("correctness vs plaintext oracle", Err(e));
                return;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();

    let mut detail = Vec::new();
    let mut pass = true;
    for (n, inst) in &all {
        let kept: Vec<&Instance> = inst
            .iter()
            .filter(|t| (t.d2 - t.theta2).abs() > BOUNDARY_BAND * t.theta2)
            .collect();
        let agree = kept
            .iter()
            .filter(|t| t.matched == (t.d2 <= t.theta2))
            .count();
        let matches = kept.iter().filter(|t| t.d2 <= t.theta2).count();
        pass &= inst.len() >= MIN_INSTANCES
            && agree == kept.len()
            && matches > 0
            && matches < kept.len();
        detail.push(format!(
            "n={n} {agree}/{} agree ({} in band, {matches} matches)",
            kept.len(),
            inst.len() - kept.len()
        ));
    }
    pass &= elapsed <= 300.0;
    report.check(
        "correctness vs plaintext oracle",
        Ok((pass, format!("{}; {elapsed:.1} s", detail.join("; ")))),
    );

    let mut detail = Vec::new();
    let mut pass = true;
    for (n, inst) in &all {
        let worst = inst
            .iter()
            .map(|t| (t.value - t.ab * (t.d2 - t.theta2)).abs() / (t.ab * (t.d2 + t.theta2 + 1.0)))
            .fold(0.0, f64::max);
        pass &= worst <= MARGIN_TOL;
        detail.push(format!("n={n} worst {worst:.1e}"));
    }
    report.check(
        "evaluation value magnitude",
        Ok((
            pass,
            format!("{} (tol {MARGIN_TOL:.0e})", detail.join(", ")),
        )),
    );
}

fn randomness_ablation() -> Result<(bool, String)> {
    let mut g = rng(200);
    let mut worst_spread: f64 = 0.0;
    let mut worst_type1: f64 = 0.0;
    let mut instances = 0;
    for &(n, count) in &[(2usize, 4usize), (8, 4), (64, 2)] {
        for _ in 0..count {
            let x = random_template(0, n, &mut g);
            let y = random_template(1, n, &mut g);
            let d2 = squared_distance(&x.features, &y.features);
            let theta = (d2 * g.gen_range(0.5..1.5)).sqrt();
            let params = setup(n, theta)?;
            let theta2 = theta * theta;
            let sk = keygen(&params, &mut g)?;
            let cfg = RandomnessConfig::default();
            let (alpha, beta) = (g.gen_range(1.0..1024.0), g.gen_range(1.0..1024.0));
            let scale = alpha * beta * (d2 + theta2 + 1.0);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for _ in 0..ABLATION_REDRAWS {
                let (ct, _) = transform_with_scalar(&sk, &params, &x, beta, &mut g, &cfg)?;
                let (tok, _) = token_gen_with_scalar(&sk, &params, &y, alpha, &mut g, &cfg)?;
                let i = evaluation_value(&ct, &tok)?;
                lo = lo.min(i);
                hi = hi.max(i);
            }
            worst_spread = worst_spread.max((hi - lo) / scale);

            let off = cfg.with_type1(false);
            let (ct, _) = transform_traced(&sk, &params, &x, &mut g, &off)?;
            let (tok, _) = token_gen_traced(&sk, &params, &y, &mut g, &off)?;
            let i = evaluation_value(&ct, &tok)?;
            let err = (i.abs() - (d2 - theta2).abs()).abs() / (d2 + theta2 + 1.0);
            worst_type1 = worst_type1.max(err);
            instances += 1;
        }
    }
    Ok((
        worst_spread <= ABLATION_TOL && worst_type1 <= TYPE1_OFF_TOL,
        format!(
            "{instances} instances x {ABLATION_REDRAWS} redraws: spread {worst_spread:.1e} (tol {ABLATION_TOL:.0e}); \
             scalars off: ||I|-|d2-t2|| {worst_type1:.1e} (tol {TYPE1_OFF_TOL:.0e})"
        ),
    ))
}

fn enrollment_attack() -> Result<(bool, String)> {
    let mut g = rng(300);
    let mut run = |cfg: RandomnessConfig| -> Result<Vec<f64>> {
        let mut errs = Vec::with_capacity(ATTACK_TRIALS);
        for t in 0..ATTACK_TRIALS {
            let n = ATTACK_NS[t % ATTACK_NS.len()];
            let params = setup(n, 100.0)?;
            let query = random_template(t as u64, n, &mut g);
            let owner = ChaCha20Rng::seed_from_u64(g.gen());
            let tr = simulate_enrollment_attack(params, query, ATTACK_DELTA, cfg, owner)?;
            errs.push(tr.relative_error().unwrap_or(f64::INFINITY));
        }
        Ok(errs)
    };
    let open = run(RandomnessConfig::default().with_type1(false))?;
    let masked = run(RandomnessConfig::default())?;
    let recovered = open.iter().filter(|e| **e <= ATTACK_RECOVERY_TOL).count();
    let worst = open.iter().copied().fold(0.0, f64::max);
    let mean_masked = masked.iter().sum::<f64>() / masked.len() as f64;
    Ok((
        recovered == ATTACK_TRIALS && mean_masked > ATTACK_MASKED_MIN_ERROR,
        format!(
            "scalars off: {recovered}/{ATTACK_TRIALS} recovered (worst rel {worst:.1e}); \
             scalars on: mean rel error {mean_masked:.3}"
        ),
    ))
}

fn distinguishability() -> Result<(bool, String)> {
    let params = setup(GAME_N, 100.0)?;
    let matched = GameSetup {
        candidates: Candidates::NormMatched {
            low: 0.0,
            high: FEATURE_MAX,
        },
        calibration_tokens: GAME_CALIBRATION,
        rekey_each_trial: true,
    };
    let scaled = GameSetup {
        candidates: Candidates::Scaled {
            low: 0.0,
            high: FEATURE_MAX,
            factor: 1000.0,
        },
        ..matched.clone()
    };
    let full = RandomnessConfig::default();
    let crippled = full.with_type1(false).with_type3(false);

    let mut g = rng(400);
    let mut pass = true;
    let mut full_rates = Vec::new();
    let mut best_ablation: f64 = 0.0;
    let mut norm_leak = Vec::new();
    for d in default_battery() {
        let (r, _) = distinguish_game(&params, &full, d.as_ref(), &matched, GAME_TRIALS, &mut g)?;
        pass &= (GAME_BAND.0..=GAME_BAND.1).contains(&r.success_rate);
        full_rates.push(format!("{} {:.3}", d.name(), r.success_rate));

        let (r, _) =
            distinguish_game(&params, &crippled, d.as_ref(), &scaled, GAME_TRIALS, &mut g)?;
        best_ablation = best_ablation.max(r.success_rate);

        let (r, _) = distinguish_game(&params, &full, d.as_ref(), &scaled, GAME_TRIALS, &mut g)?;
        norm_leak.push(format!("{} {:.3}", d.name(), r.success_rate));
    }
    pass &= best_ablation > GAME_ABLATION_MIN;
    info(format!(
        "full scheme, candidates differing in norm by 1000x: {}",
        norm_leak.join(", ")
    ));
    Ok((
        pass,
        format!(
            "full scheme (equal-norm candidates): {}; scalars+masks off, best {best_ablation:.3}",
            full_rates.join(", ")
        ),
    ))
}

fn complexity() -> Result<(bool, String)> {
    let mut g = rng(500);
    let cfg = BenchConfig::new(BENCH_REPS);
    let rows = bench::sweep_ops(&BENCH_NS, &[Op::TokenGen, Op::Evaluate], &cfg, &mut g)?;
    let tok = bench::fit_loglog_slope(&bench::rows_for(&rows, Op::TokenGen))?;
    let eval = bench::fit_loglog_slope(&bench::rows_for(&rows, Op::Evaluate))?;

    let hot = BenchConfig {
        evaluate_pool_bytes: 0,
        ..cfg
    };
    let hot_rows = bench::sweep_ops(&BENCH_NS, &[Op::Evaluate], &hot, &mut g)?;
    info(format!(
        "evaluate slope with one cache-resident pair: {:.3}",
        bench::fit_loglog_slope(&hot_rows)?
    ));

    let params = setup(2000, 100.0)?;
    let sk = keygen(&params, &mut g)?;
    let y = random_template(0, 2000, &mut g);
    let start = Instant::now();
    token_gen_traced(&sk, &params, &y, &mut g, &RandomnessConfig::default())?;
    let t2000 = start.elapsed().as_secs_f64();

    Ok((
        (TOKEN_SLOPE.0..=TOKEN_SLOPE.1).contains(&tok)
            && (EVAL_SLOPE.0..=EVAL_SLOPE.1).contains(&eval)
            && t2000 <= TOKEN_2000_LIMIT_S,
        format!(
            "token_gen slope {tok:.3} (want {:?}), evaluate slope {eval:.3} (want {:?}), \
             token_gen n=2000 {t2000:.2} s",
            TOKEN_SLOPE, EVAL_SLOPE
        ),
    ))
}

fn leakage() -> Result<(bool, String)> {
    let mut g = rng(600);
    let logu =
        RandomnessConfig::default().with_scalar_range(1.0, 1e3, ScalarDistribution::LogUniform);
    let run = |n: usize, cfg: &RandomnessConfig, g: &mut ChaCha20Rng| -> Result<f64> {
        let db: Vec<_> = (0..LEAKAGE_RECORDS as u64)
            .map(|i| random_template(i, n, g))
            .collect();
        let query = random_template(u64::MAX, n, g);
        let params = setup(n, 0.0)?;
        Ok(leakage_rank_test(&db, &query, &params, cfg, g)?.rho)
    };
    let masked = run(LEAKAGE_N, &logu, &mut g)?;
    let open = run(LEAKAGE_N, &logu.with_type1(false), &mut g)?;
    let small = run(8, &logu, &mut g)?;
    info(format!("same rank test at n=8: rho {small:.3}"));
    Ok((
        masked.abs() < LEAKAGE_MAX_RHO && open == 1.0,
        format!(
            "n={LEAKAGE_N}, {LEAKAGE_RECORDS} records: log-uniform scalars rho {masked:.3} \
             (want |rho| < {LEAKAGE_MAX_RHO}); scalars off rho {open}"
        ),
    ))
}

fn serialization() -> Result<(bool, String)> {
    let dir = std::env::temp_dir().join(format!("sbid-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut g = rng(700);
    let cfg = RandomnessConfig::default();
    let mut pass = true;
    let mut sizes = Vec::new();
    for n in [1usize, 2, 8, 64] {
        let params = setup(n, 10.0)?;
        let sk = keygen(&params, &mut g)?;
        let cts = (0..3)
            .map(|i| {
                transform_traced(&sk, &params, &random_template(i, n, &mut g), &mut g, &cfg)
                    .map(|c| c.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let (tok, _) =
            token_gen_traced(&sk, &params, &random_template(9, n, &mut g), &mut g, &cfg)?;
        let p = |name: &str| dir.join(format!("{n}-{name}"));

        store::write_key(p("a.key"), &sk, true)?;
        store::write_key(p("b.key"), &store::read_key(p("a.key"))?, true)?;
        store::write_token(p("a.tok"), &tok, true)?;
        store::write_token(p("b.tok"), &store::read_token(p("a.tok"), Some(n))?, true)?;
        store::create_database(p("a.db"), n, true)?;
        store::append_records(p("a.db"), &cts)?;
        let back = store::scan(p("a.db"))?.collect::<Result<Vec<_>>>()?;
        store::create_database(p("b.db"), n, true)?;
        store::append_records(p("b.db"), &back)?;

        for ext in ["key", "tok", "db"] {
            let a = std::fs::read(p(&format!("a.{ext}")))?;
            let b = std::fs::read(p(&format!("b.{ext}")))?;
            pass &= a == b;
        }
        pass &= back == cts && store::read_token(p("a.tok"), Some(n))? == tok;

        let want = 8 + 2 * (n + 5) * (n + 5) * 8;
        let db_len = std::fs::metadata(p("a.db"))?.len() as usize;
        let got = (db_len - store::DB_HEADER_LEN) / cts.len();
        pass &= got == want && store::record_len(n) as usize == want;
        sizes.push(format!("n={n} {got} B"));
    }
    std::fs::remove_dir_all(&dir)?;
    Ok((
        pass,
        format!(
            "key/db/token bitwise stable; record sizes {}",
            sizes.join(", ")
        ),
    ))
}

fn main() -> ExitCode {
    let mut report = Report { failed: Vec::new() };
    let started = Instant::now();

    correctness_and_margin(&mut report);
    report.check("randomness ablation", randomness_ablation());
    report.check("enrollment attack", enrollment_attack());
    report.check("distinguishability game", distinguishability());
    report.check("complexity", complexity());
    report.check("leakage rank test", leakage());
    report.check("serialization", serialization());

    println!(
        "acceptance: {} failed, {:.1} s",
        report.failed.len(),
        started.elapsed().as_secs_f64()
    );
    if report.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
