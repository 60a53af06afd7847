mod args;

/// Print to stdout, tolerating a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;
use spotlighter::features::{generate_base_novel, read_features, write_features, FeatureSet};
use spotlighter::pipeline::{
    bench_throughput, evaluate_with, load_state, run_ablation, run_gradcheck, save_state, small_config,
    train_with, AblationRow, BenchOptions, PredictOptions, RunConfig, SplitMetrics,
};
use spotlighter::representative::TierMode;
use spotlighter::rng::PRNG_NAME;
use spotlighter::{Error, Result};

use args::{
    resolve_path, AblateArgs, BenchArgs, Cli, Command, EvalArgs, GenArgs, GradcheckArgs, TrainArgs,
    BASE_TEST_FILE, BASE_TRAIN_FILE, NOVEL_TEST_FILE,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidSpec(_)
        | Error::InvalidK(_)
        | Error::NonPositiveTemperature(_)
        | Error::KOutOfRange { .. } => EXIT_CONFIG,
        Error::NonFiniteLoss(_) | Error::ZeroVector | Error::NotADistribution(_) | Error::EmptySelection => {
            EXIT_NUMERIC
        }
        Error::DimMismatch(_)
        | Error::LabelOutOfRange { .. }
        | Error::MissingLabels
        | Error::EmptySplit
        | Error::WorkloadTooSmall(_)
        | Error::BadMagic
        | Error::TruncatedFile
        | Error::HeaderMismatch(_)
        | Error::VersionMismatch { .. }
        | Error::Io(_)
        | Error::Json(_) => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_json<T: Serialize>(value: &T, also: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    say!("{text}");
    if let Some(path) = also {
        fs::write(path, text + "\n")?;
    }
    Ok(())
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn cmd_gen(a: GenArgs) -> Result<u8> {
    let spec = a.synth.spec()?;
    let ep = generate_base_novel(&spec, a.synth.shots, a.synth.test_per_class)?;
    fs::create_dir_all(&a.out)?;
    for (name, fs_) in [
        (BASE_TRAIN_FILE, &ep.base_train),
        (BASE_TEST_FILE, &ep.base_test),
        (NOVEL_TEST_FILE, &ep.novel_test),
    ] {
        write_features(fs_, a.out.join(name))?;
    }
    say!(
        "wrote {} train, {} base test, {} novel test items ({} classes per split, {} tokens, d={}, seed {}, {}) to {}",
        ep.base_train.len(),
        ep.base_test.len(),
        ep.novel_test.len(),
        spec.n_classes,
        spec.n_tok,
        spec.d,
        spec.seed,
        PRNG_NAME,
        a.out.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    seed: u64,
    epochs: usize,
    trainable_param_count: usize,
    final_train_accuracy: Option<f64>,
    history: &'a [spotlighter::pipeline::EpochRecord],
    config: &'a RunConfig,
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let cfg = a.config.resolve()?;
    let path = resolve_path(&a.train, &a.data, BASE_TRAIN_FILE, "train")?;
    let data = read_features(&path)?;
    let quiet = a.quiet;
    let state = train_with(&cfg, &data, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.5}  cls {:.5}  train acc {:.3}",
                r.epoch, r.loss.total, r.loss.cls, r.train_accuracy
            );
        }
    })?;
    save_state(&state, &a.out)?;
    let report = TrainReport {
        seed: cfg.seed,
        epochs: cfg.epochs,
        trainable_param_count: state.trainable_param_count(),
        final_train_accuracy: state.history.last().map(|r| r.train_accuracy),
        history: &state.history,
        config: &state.config,
    };
    print_json(&report, a.report.as_deref())?;
    Ok(0)
}

#[derive(Serialize)]
struct SplitJson {
    accuracy: f64,
    correct: usize,
    total: usize,
    per_class: Vec<f64>,
}

impl From<&SplitMetrics> for SplitJson {
    fn from(m: &SplitMetrics) -> Self {
        Self {
            accuracy: round2(m.accuracy),
            correct: m.correct,
            total: m.total,
            per_class: m.per_class.iter().copied().map(round2).collect(),
        }
    }
}

#[derive(Serialize)]
struct EvalJson {
    k: usize,
    tier_mode: TierMode,
    base: SplitJson,
    novel: SplitJson,
    hm: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let state = load_state(&a.checkpoint)?;
    let base = read_features(resolve_path(&a.base, &a.data, BASE_TEST_FILE, "base")?)?;
    let novel = read_features(resolve_path(&a.novel, &a.data, NOVEL_TEST_FILE, "novel")?)?;
    let mut opts = PredictOptions::from_state(&state);
    if let Some(t) = &a.tier {
        opts.tier_mode = t.parse()?;
    }
    if let Some(k) = a.k {
        opts.k = k;
    }
    let m = evaluate_with(&state, &base, &novel, opts)?;
    let out = EvalJson {
        k: opts.k,
        tier_mode: opts.tier_mode,
        base: (&m.base).into(),
        novel: (&m.novel).into(),
        hm: round2(m.hm),
    };
    say!("tier {}  k {}", opts.tier_mode.as_str(), opts.k);
    say!("{:<6} {:>9} {:>8} {:>6}", "split", "accuracy", "correct", "total");
    say!("{:<6} {:>9.2} {:>8} {:>6}", "base", out.base.accuracy, out.base.correct, out.base.total);
    say!("{:<6} {:>9.2} {:>8} {:>6}", "novel", out.novel.accuracy, out.novel.correct, out.novel.total);
    say!("{:<6} {:>9.2}", "hm", out.hm);
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_string_pretty(&out)? + "\n")?;
    }
    Ok(0)
}

fn load_episode(dir: &Path) -> Result<spotlighter::features::Episode> {
    Ok(spotlighter::features::Episode {
        base_train: read_features(dir.join(BASE_TRAIN_FILE))?,
        base_test: read_features(dir.join(BASE_TEST_FILE))?,
        novel_test: read_features(dir.join(NOVEL_TEST_FILE))?,
    })
}

#[derive(Serialize)]
struct AblationCsvRow {
    semantic_on: bool,
    init_mode: &'static str,
    recalc_on: bool,
    selection_variant: &'static str,
    tier_mode: &'static str,
    base: Option<f64>,
    novel: Option<f64>,
    hm: Option<f64>,
    items_per_sec: Option<f64>,
    error: String,
}

impl From<&AblationRow> for AblationCsvRow {
    fn from(r: &AblationRow) -> Self {
        Self {
            semantic_on: r.cell.semantic_on,
            init_mode: r.cell.init_mode.as_str(),
            recalc_on: r.cell.recalc_on,
            selection_variant: r.cell.variant.as_str(),
            tier_mode: r.cell.tier_mode.as_str(),
            base: r.base,
            novel: r.novel,
            hm: r.hm,
            items_per_sec: r.items_per_sec,
            error: r.error.clone().unwrap_or_default(),
        }
    }
}

fn cmd_ablate(a: AblateArgs) -> Result<u8> {
    let cfg = a.config.resolve()?;
    let episode = load_episode(&a.data)?;
    let rows = run_ablation(&cfg, &episode);
    let mut w = csv::Writer::from_path(&a.out).map_err(csv_err)?;
    for r in &rows {
        w.serialize(AblationCsvRow::from(r)).map_err(csv_err)?;
    }
    w.flush()?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    say!("{} cells written to {} ({} failed)", rows.len(), a.out.display(), failed);
    Ok(0)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("csv: {other:?}")),
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let mut cfg = small_config();
    if let Some(seed) = args::env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg = RunConfig::parse_kv(&text, cfg)?;
    }
    cfg.width = a.width;
    cfg.heads = a.heads;
    cfg.k_act = cfg.k_act.min(8);
    let first = match a.first_seed {
        Some(s) => s,
        None => args::env_seed()?.unwrap_or(0),
    };
    let summary = run_gradcheck(&cfg, first, a.seeds, a.eps, a.corrupt_gradient)?;
    print_json(&summary, None)?;
    eprintln!(
        "max relative error {:.3e} at {} (seed {}): {}",
        summary.max_rel_error,
        summary.worst_param,
        summary.worst_seed,
        if summary.passed { "PASS" } else { "FAIL" }
    );
    Ok(if summary.passed { 0 } else { EXIT_NUMERIC })
}

#[derive(Serialize)]
struct BenchCsvRow {
    k: usize,
    reference: bool,
    items_per_sec: f64,
    items_per_sec_min: f64,
    items_per_sec_max: f64,
    wall_clock_secs: f64,
    accuracy: Option<f64>,
    flops_per_item: u64,
}

fn cmd_bench(a: BenchArgs) -> Result<u8> {
    let state = load_state(&a.checkpoint)?;
    let workload: FeatureSet = match &a.workload {
        Some(p) => read_features(p)?,
        None => {
            let spec = a.synth.spec()?;
            let per_class = a.items.div_ceil(spec.n_classes).max(1);
            generate_base_novel(&spec, 1, per_class)?.base_test
        }
    };
    let opts = BenchOptions { k_values: a.k.clone(), reps: a.reps, warmup: a.warmup };
    let report = bench_throughput(&state, &workload, &opts)?;
    print_json(&report, a.json.as_deref())?;
    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let rows = report.rows.iter().map(|r| (r, false)).chain([(&report.full_token, true)]);
        for (r, reference) in rows {
            w.serialize(BenchCsvRow {
                k: r.k,
                reference,
                items_per_sec: r.items_per_sec,
                items_per_sec_min: r.items_per_sec_min,
                items_per_sec_max: r.items_per_sec_max,
                wall_clock_secs: r.wall_clock_secs,
                accuracy: r.accuracy,
                flops_per_item: r.flops_per_item,
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(0)
}
