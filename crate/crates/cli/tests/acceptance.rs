//! The thirteen acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 7 to 12 share one desk fixture trained with the default
//! configuration (about a quarter of an hour on one core). Set
//! `LCRF_ACCEPTANCE_DIR` to keep the fixture in a directory and reuse it on
//! later runs with the same configuration. A FAIL line does not fail the
//! target unless `LCRF_ACCEPTANCE_STRICT` is set; errors always do.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use latentcrf::checkpoint::Container;
use latentcrf::crf::CrfParams;
use latentcrf::metrics::FeatureExtractor;
use latentcrf::persist::Checkpoint;
use latentcrf::surrogate::{Dataset, DenoiserParams};
use latentcrf::train::DiscriminatorParams;
use latentcrf_cli::checks::{self, CheckOutcome};
use latentcrf_cli::commands::{CRF_FILE, CRF_STAGE1_FILE, DATASET_FILE, DENOISER_FILE, DISCRIMINATOR_FILE, FEATURES_FILE};
use latentcrf_cli::config::GradcheckConfig;
use latentcrf_cli::{workflow, CliError, CliResult, RunConfig};

struct Line {
    id: u8,
    title: &'static str,
    passed: bool,
    detail: String,
}

impl Line {
    fn print(&self) {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {:>2} {}: {}", self.id, self.title, self.detail);
    }
}

fn info(msg: impl AsRef<str>) {
    println!("     info: {}", msg.as_ref());
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn check_line(id: u8, title: &'static str, outcome: CheckOutcome, elapsed: f64, limit_s: Option<f64>) -> Line {
    let in_time = limit_s.is_none_or(|l| elapsed < l);
    let limit = limit_s.map_or(String::new(), |l| format!(" (limit {l} s)"));
    Line {
        id,
        title,
        passed: outcome.passed && in_time,
        detail: format!(
            "{} cases, worst {:.3e} < {:.0e}; {elapsed:.1} s{limit}",
            outcome.cases, outcome.worst, outcome.tolerance
        ),
    }
}

fn gradient_criteria(lines: &mut Vec<Line>) -> CliResult<()> {
    let g = GradcheckConfig::default();
    let t = Instant::now();
    let o = checks::energy_gradient_check(&g, 101)?;
    lines.push(check_line(1, "energy gradient vs finite differences", o, secs(t), Some(60.0)));
    let t = Instant::now();
    let o = checks::higher_order_adjoint_check(&g, 102)?;
    lines.push(check_line(2, "higher-order adjoint", o, secs(t), None));
    let t = Instant::now();
    let o = checks::phi_omega_check(&g, 103);
    lines.push(check_line(3, "log-phi derivative is ReLU", o, secs(t), None));
    let t = Instant::now();
    let o = checks::oracle_check(&g, 104)?;
    lines.push(check_line(4, "oracle monotonicity and agreement", o, secs(t), None));
    let t = Instant::now();
    let o = checks::backprop_check(&g, 105)?;
    lines.push(check_line(5, "unrolled backprop, T in {1,2}", o, secs(t), None));
    let t = Instant::now();
    let o = checks::sce_check(&g, 106);
    lines.push(check_line(6, "closed-form sigmoid cross-entropy", o, secs(t), None));
    for l in lines.iter() {
        l.print();
    }
    Ok(())
}

/// The trained desk artifacts.
struct Fixture {
    cfg: RunConfig,
    dir: PathBuf,
    heldout: Dataset,
    data: Dataset,
    denoiser: DenoiserParams,
    features: FeatureExtractor,
    crf_stage1: CrfParams,
    crf: CrfParams,
    stage1_seconds: f64,
}

fn timing_row(path: &Path, key: &str) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .filter_map(|l| l.split_once(','))
        .find(|(k, _)| *k == key)
        .and_then(|(_, v)| v.parse::<f64>().ok())
}

impl Fixture {
    fn build(dir: PathBuf) -> CliResult<Self> {
        let cfg = RunConfig::default();
        let stamp = dir.join("fixture.toml");
        let text = cfg.to_toml()?;
        let reusable = fs::read_to_string(&stamp).is_ok_and(|s| s == text);
        fs::create_dir_all(&dir)?;
        if !reusable {
            fs::write(&stamp, &text)?;
        }
        let stages = [
            ("gen-data", DATASET_FILE),
            ("train-surrogate", FEATURES_FILE),
            ("train-crf", CRF_STAGE1_FILE),
            ("distill", CRF_FILE),
        ];
        for (cmd, artifact) in stages {
            if reusable && dir.join(artifact).exists() {
                info(format!("reusing {cmd} output from {}", dir.display()));
                continue;
            }
            let t = Instant::now();
            let report = latentcrf_cli::run(cmd, &cfg, &dir)?;
            info(format!("{cmd} finished in {:.1} s", secs(t)));
            for (k, v) in &report.metrics {
                if k != "feature_extractor" {
                    info(format!("  {cmd}: {k} = {v}"));
                }
            }
        }
        let data = Dataset::load_checkpoint(&dir.join(DATASET_FILE))?;
        let (_, heldout) = workflow::split(&cfg, &data);
        let stage1_seconds = timing_row(&dir.join("train-crf.timings.csv"), "stage1_training").unwrap_or(f64::NAN) / 1e3;
        Ok(Self {
            heldout,
            denoiser: DenoiserParams::load_checkpoint(&dir.join(DENOISER_FILE))?,
            features: FeatureExtractor::load_checkpoint(&dir.join(FEATURES_FILE))?,
            crf_stage1: CrfParams::load_checkpoint(&dir.join(CRF_STAGE1_FILE))?,
            crf: CrfParams::load_checkpoint(&dir.join(CRF_FILE))?,
            data,
            cfg,
            dir,
            stage1_seconds,
        })
    }
}

fn convergence(f: &Fixture) -> CliResult<Line> {
    let t = Instant::now();
    let c = workflow::convergence(&f.cfg, &f.denoiser, &f.crf, &f.data.encoder, 5)?;
    let elapsed = secs(t);
    let change = c.change_at(5).unwrap_or(f64::NAN);
    let settled = c.fraction_settled(1e-6);
    let curve: Vec<String> = c.mean_changes.iter().map(|v| format!("{v:.2e}")).collect();
    info(format!("mean relative update per iteration: [{}]", curve.join(", ")));
    let mut gaps = c.snapshot_gaps.clone();
    gaps.sort_by(f64::total_cmp);
    info(format!(
        "iteration 5 vs 10 max element gap: median {:.2e}, 95th percentile {:.2e}",
        gaps[gaps.len() / 2],
        gaps[(gaps.len() * 95 / 100).min(gaps.len() - 1)]
    ));
    Ok(Line {
        id: 7,
        title: "convergence by 5 iterations",
        passed: change < 1e-3 && settled >= 0.95 && elapsed < 300.0,
        detail: format!(
            "mean update at 5 = {change:.3e} (< 1e-3), settled fraction {settled:.3} (>= 0.95) over {} inputs; {elapsed:.1} s",
            c.snapshot_gaps.len()
        ),
    })
}

fn denoising(f: &Fixture) -> CliResult<Line> {
    let d = workflow::denoise_eval(&f.cfg, &f.crf_stage1, &f.heldout)?;
    let fixed = workflow::denoise_eval_fixed(&f.cfg, &f.crf_stage1, &f.heldout)?;
    info(format!(
        "at exactly the insertion noise level the improved fraction is {:.3}",
        fixed.improved_fraction
    ));
    info(format!(
        "mean distance CRF {:.4} vs identity {:.4}",
        d.mean_crf, d.mean_identity
    ));
    Ok(Line {
        id: 8,
        title: "denoising efficacy",
        passed: d.improved_fraction >= 0.9 && f.stage1_seconds <= 1800.0,
        detail: format!(
            "improved on {:.3} of {} held-out samples (>= 0.9), noise ratio drawn from the training window; stage-1 training {:.0} s (<= 1800 s)",
            d.improved_fraction,
            f.heldout.len(),
            f.stage1_seconds
        ),
    })
}

fn ablation(f: &Fixture) -> CliResult<Line> {
    let t = Instant::now();
    let fd = workflow::frechet_ablation(&f.cfg, &f.denoiser, &f.crf, &f.features, &f.data.encoder)?;
    let elapsed = secs(t);
    info(format!("probe accuracy on teacher reference: {:.3}", fd.teacher_probe));
    for (s, r) in fd.per_seed.iter().enumerate() {
        info(format!(
            "seed {s}: hybrid {:.4}, truncated {:.4}, reduction {:.1}%; probe accuracy {:.3} / {:.3}",
            r.hybrid,
            r.truncated,
            100.0 * r.reduction(),
            r.hybrid_probe,
            r.truncated_probe
        ));
    }
    let worst = fd.per_seed.iter().map(|r| r.reduction()).fold(f64::INFINITY, f64::min);
    let agree = fd.per_seed.iter().all(|r| r.hybrid < r.truncated);
    Ok(Line {
        id: 9,
        title: "ablation direction",
        passed: worst >= 0.2 && agree && fd.per_seed.len() >= 3 && elapsed < 1200.0,
        detail: format!(
            "smallest reduction {:.1}% (>= 20%) over {} seeds x {} samples, directions agree: {agree}; {elapsed:.1} s",
            100.0 * worst,
            fd.per_seed.len(),
            f.cfg.eval.samples
        ),
    })
}

fn speed(f: &Fixture) -> CliResult<Line> {
    let t = Instant::now();
    let s = workflow::speed(&f.cfg, &f.denoiser, &f.crf, &f.data.encoder)?;
    let elapsed = secs(t);
    let (h, w, _) = f.cfg.shape();
    let one_call = f.denoiser.flops_per_call(h, w) as u64;
    info(format!(
        "per batch of {}: hybrid {:.1} ms, truncated {:.1} ms, teacher {:.1} ms, one guided step {:.1} ms, CRF {:.1} ms",
        f.cfg.eval.bench_batch,
        s.hybrid.mean_ms,
        s.truncated.mean_ms,
        s.teacher.mean_ms,
        s.denoiser_step.mean_ms,
        s.crf.mean_ms
    ));
    let ratio = s.hybrid.mean_ms / s.teacher.mean_ms;
    Ok(Line {
        id: 10,
        title: "speed direction",
        passed: s.hybrid.mean_ms < s.budget_ms()
            && ratio < 0.85
            && s.crf_flops < one_call
            && elapsed < 300.0,
        detail: format!(
            "hybrid {:.1} ms < budget {:.1} ms, hybrid/teacher {ratio:.3} (< 0.85), CRF {} FLOPs < denoiser call {one_call}; {elapsed:.1} s",
            s.hybrid.mean_ms,
            s.budget_ms(),
            s.crf_flops
        ),
    })
}

fn diversity(f: &Fixture) -> CliResult<Line> {
    let t = Instant::now();
    let d = workflow::diversity(&f.cfg, &f.denoiser, &f.crf, &f.features, &f.data.encoder)?;
    let elapsed = secs(t);
    let ratio = d.hybrid / d.teacher;
    Ok(Line {
        id: 11,
        title: "diversity retention",
        passed: ratio >= 0.9 && elapsed < 900.0,
        detail: format!(
            "Vendi hybrid {:.4} / teacher {:.4} = {ratio:.3} (>= 0.9) over {} prompts x {} seeds; {elapsed:.1} s",
            d.hybrid, d.teacher, f.cfg.eval.prompts, f.cfg.eval.seeds_per_prompt
        ),
    })
}

fn variance(f: &Fixture) -> CliResult<Line> {
    let v = workflow::variance(&f.cfg, &f.denoiser, &f.data.encoder)?;
    let tail = workflow::tail_non_increasing(&v, 0.2);
    let shown: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    info(format!("variance by state: [{}]", shown.join(", ")));
    Ok(Line {
        id: 12,
        title: "variance-curve shape",
        passed: (v[0] - 1.0).abs() <= 0.05 && tail,
        detail: format!(
            "initial {:.4} (1.0 +- 0.05), final 20% non-increasing: {tail}, {} generations",
            v[0], f.cfg.eval.variance_generations
        ),
    })
}

/// Non-timing outputs of a directory, by file name.
fn outputs(dir: &Path) -> CliResult<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if !name.ends_with(".timings.csv") {
            out.insert(name, fs::read(&path)?);
        }
    }
    Ok(out)
}

fn typed_roundtrip<T: Checkpoint>(path: &Path) -> CliResult<bool> {
    let bytes = fs::read(path)?;
    let raw = Container::from_bytes(&bytes).map_err(latentcrf::Error::from)?;
    let mut again = T::from_container(&raw)?.to_container()?;
    again.metadata = raw.metadata.clone();
    Ok(raw.to_bytes() == bytes && again.to_bytes() == bytes)
}

fn determinism(f: &Fixture) -> CliResult<Line> {
    let tiny_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml");
    let cfg = RunConfig::from_toml(&fs::read_to_string(tiny_path)?)?;
    let commands = [
        "gen-data",
        "train-surrogate",
        "train-crf",
        "distill",
        "sample",
        "eval",
        "ablate",
        "diagnose",
        "gradcheck",
        "bench",
    ];
    let a = tempdir()?;
    let b = tempdir()?;
    for dir in [&a, &b] {
        for cmd in commands {
            latentcrf_cli::run(cmd, &cfg, dir)?;
        }
    }
    let (oa, ob) = (outputs(&a)?, outputs(&b)?);
    let differing: Vec<&String> = oa.keys().filter(|k| oa.get(*k) != ob.get(*k)).collect();
    let csv_count = oa.keys().filter(|k| k.ends_with(".csv")).count();
    let same = oa.len() == ob.len() && differing.is_empty();
    if !differing.is_empty() {
        info(format!("differing outputs: {differing:?}"));
    }
    let checkpoints = [
        typed_roundtrip::<Dataset>(&f.dir.join(DATASET_FILE))?,
        typed_roundtrip::<DenoiserParams>(&f.dir.join(DENOISER_FILE))?,
        typed_roundtrip::<FeatureExtractor>(&f.dir.join(FEATURES_FILE))?,
        typed_roundtrip::<CrfParams>(&f.dir.join(CRF_STAGE1_FILE))?,
        typed_roundtrip::<DiscriminatorParams>(&f.dir.join(DISCRIMINATOR_FILE))?,
        typed_roundtrip::<CrfParams>(&f.dir.join(CRF_FILE))?,
    ];
    let roundtrip = checkpoints.iter().all(|&ok| ok);
    let _ = fs::remove_dir_all(&a);
    let _ = fs::remove_dir_all(&b);
    Ok(Line {
        id: 13,
        title: "determinism and persistence",
        passed: same && roundtrip,
        detail: format!(
            "{} outputs ({csv_count} CSV) identical across two runs: {same}; {} checkpoints round-trip bit-identically: {roundtrip}",
            oa.len(),
            checkpoints.len()
        ),
    })
}

fn tempdir() -> CliResult<PathBuf> {
    let base = std::env::temp_dir().join(format!("lcrf-acceptance-{}", std::process::id()));
    for i in 0.. {
        let p = base.with_extension(i.to_string());
        if !p.exists() {
            fs::create_dir_all(&p)?;
            return Ok(p);
        }
    }
    unreachable!("unbounded search always finds a free name")
}

fn run_all() -> CliResult<Vec<Line>> {
    let mut lines = Vec::new();
    gradient_criteria(&mut lines)?;

    let (dir, owned) = match std::env::var_os("LCRF_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), false),
        None => (tempdir()?, true),
    };
    let t = Instant::now();
    let fixture = Fixture::build(dir)?;
    info(format!("desk fixture ready after {:.1} s", secs(t)));
    type Criterion = fn(&Fixture) -> CliResult<Line>;
    let rest: [Criterion; 7] = [convergence, denoising, ablation, speed, diversity, variance, determinism];
    for criterion in rest {
        let line = criterion(&fixture)?;
        line.print();
        lines.push(line);
    }
    if owned {
        let _ = fs::remove_dir_all(&fixture.dir);
    }
    Ok(lines)
}

fn main() -> ExitCode {
    // The libtest protocol lists tests with `--list`; this target has none.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let strict = std::env::var_os("LCRF_ACCEPTANCE_STRICT").is_some();
    match run_all() {
        Ok(lines) => {
            let passed = lines.iter().filter(|l| l.passed).count();
            println!("acceptance: {passed}/{} criteria passed", lines.len());
            for l in lines.iter().filter(|l| !l.passed) {
                println!("acceptance: criterion {} ({}) did not meet its bound", l.id, l.title);
            }
            if strict && passed < lines.len() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("acceptance run aborted ({}): {e}", e.category());
            let _ = CliError::category;
            ExitCode::FAILURE
        }
    }
}
