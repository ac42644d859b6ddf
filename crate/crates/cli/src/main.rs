//! `nrcomp`: fit, evaluate and render the differentiable compressor.
//!
//! Every subcommand prints `key=value` lines on stdout. Exit status is 0 on
//! success, 1 on runtime failure and 2 on usage errors.

mod alloc_meter;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nrcomp::compressor::{compress_params, unconstrain, DEFAULT_G_INIT};
use nrcomp::gradcheck::{gradient_check, random_theta};
use nrcomp::metrics::{delta_ldr, esr, esr_preemph, ldr, LdrOptions};
use nrcomp::optim::{fit, fit_chain, FitResult, NROptions};
use nrcomp::param_map::{interp_eval, load_map, render_with, save_map, Interp, MapEntry, ParameterMap};
use nrcomp::signal::{load_wav, pair_validate, plan_chunks, save_wav, DEFAULT_CHUNK_SEC, DEFAULT_OVERLAP_SEC};
use nrcomp::synth::{generate, stimulus, CorpusSpec, Manifest, Stimulus, MANIFEST_FILE};
use nrcomp::{compress, AudioBuffer, AudioPair, CompressorParams, HessianStrategy, Objective, ParamBounds, ThetaRaw};

#[global_allocator]
static GLOBAL: alloc_meter::Meter = alloc_meter::Meter;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] nrcomp::Error),
    #[error("csv output {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0}")]
    Failed(String),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser)]
#[command(name = "nrcomp", version, about = "Newton-Raphson sound matching for a differentiable compressor")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one input/target pair.
    Fit(FitArgs),
    /// Fit every pair in a corpus manifest, warm-starting each from the last.
    FitChain(FitChainArgs),
    /// Render audio through interpolated settings from a map.
    Render(RenderArgs),
    /// Compare a reference and an estimate.
    Metrics(MetricsArgs),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Time the Hessian strategies and cross-check them.
    HessianBench(HessianBenchArgs),
    /// Leave-out interpolation evaluation of a map against a corpus.
    InterpEval(InterpEvalArgs),
    /// Generate a synthetic paired corpus.
    GenCorpus(GenCorpusArgs),
    /// Write a map as CSV.
    ExportCsv(ExportCsvArgs),
}

#[derive(Args)]
struct ChunkArgs {
    /// Chunk length in seconds.
    #[arg(long, default_value_t = DEFAULT_CHUNK_SEC)]
    chunk_sec: f64,
    /// Overlap between chunks in seconds; the first overlap of every later
    /// chunk is excluded from the loss.
    #[arg(long, default_value_t = DEFAULT_OVERLAP_SEC)]
    overlap_sec: f64,
    /// Compare raw rather than pre-emphasised signals in the loss.
    #[arg(long)]
    no_preemph: bool,
}

impl ChunkArgs {
    fn validate(&self) -> CliResult<()> {
        if !(self.chunk_sec.is_finite() && self.overlap_sec >= 0.0 && self.chunk_sec > self.overlap_sec) {
            return Err(usage(format!(
                "--chunk-sec ({}) must be finite and exceed --overlap-sec ({}) >= 0",
                self.chunk_sec, self.overlap_sec
            )));
        }
        Ok(())
    }

    fn objective(&self, pair: &AudioPair, bounds: ParamBounds) -> CliResult<Objective> {
        let plan = plan_chunks(pair.len(), pair.sample_rate(), self.chunk_sec, self.overlap_sec)?;
        Ok(Objective::new(pair, &plan, bounds, !self.no_preemph)?)
    }
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    ratio_min: Option<f64>,
    #[arg(long)]
    ratio_max: Option<f64>,
    #[arg(long)]
    attack_min_ms: Option<f64>,
    #[arg(long)]
    attack_max_ms: Option<f64>,
    #[arg(long)]
    release_min_ms: Option<f64>,
    #[arg(long)]
    release_max_ms: Option<f64>,
}

impl BoundsArgs {
    fn apply(&self, mut b: ParamBounds) -> CliResult<ParamBounds> {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut b.ratio[0], self.ratio_min);
        set(&mut b.ratio[1], self.ratio_max);
        set(&mut b.attack_ms[0], self.attack_min_ms);
        set(&mut b.attack_ms[1], self.attack_max_ms);
        set(&mut b.release_ms[0], self.release_min_ms);
        set(&mut b.release_ms[1], self.release_max_ms);
        b.validate().map_err(|e| usage(e.to_string()))?;
        Ok(b)
    }
}

#[derive(Args)]
struct InitArgs {
    /// Initial threshold in dB (default -36).
    #[arg(long, allow_negative_numbers = true)]
    init_ct_db: Option<f64>,
    /// Initial ratio (default 4).
    #[arg(long)]
    init_ratio: Option<f64>,
    /// Initial attack in ms (default 1).
    #[arg(long)]
    init_attack_ms: Option<f64>,
    /// Initial release in ms (default 200).
    #[arg(long)]
    init_release_ms: Option<f64>,
    /// Initial make-up gain in dB (default 0).
    #[arg(long, allow_negative_numbers = true)]
    init_makeup_db: Option<f64>,
}

impl InitArgs {
    fn params(&self, sample_rate: u32) -> CompressorParams {
        let d = CompressorParams::default_init(sample_rate);
        CompressorParams::from_times(
            self.init_ct_db.unwrap_or(d.ct_db),
            self.init_ratio.unwrap_or(d.ratio),
            self.init_attack_ms.unwrap_or(d.attack_ms),
            self.init_release_ms.unwrap_or(d.release_ms),
            self.init_makeup_db.unwrap_or(d.makeup_db),
            sample_rate,
        )
    }

    /// Raw starting point; settings on or outside the bounds are usage errors.
    fn theta(&self, bounds: &ParamBounds, sample_rate: u32) -> CliResult<ThetaRaw> {
        let p = self.params(sample_rate);
        if ![p.ct_db, p.makeup_db].iter().all(|v| v.is_finite()) {
            return Err(usage("initial threshold and make-up gain must be finite"));
        }
        unconstrain(&p, bounds, sample_rate).map_err(|e| usage(format!("initial setting: {e}")))
    }
}

#[derive(Args)]
struct NrArgs {
    /// Hessian strategy: rev-rev, fwd-rev, rev-fwd or fwd-fwd.
    #[arg(long, default_value = "fwd-rev")]
    strategy: HessianStrategy,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Stop once the largest gradient component falls below this.
    #[arg(long)]
    grad_tol: Option<f64>,
    /// Sufficient-decrease constant of the line search.
    #[arg(long)]
    armijo_alpha: Option<f64>,
    /// Random-direction escapes allowed per iteration.
    #[arg(long)]
    max_curvature_retries: Option<usize>,
    /// Seed for the escape directions.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl NrArgs {
    fn options(&self) -> CliResult<NROptions> {
        let mut o = NROptions {
            strategy: self.strategy,
            rng_seed: self.seed,
            ..NROptions::default()
        };
        if let Some(v) = self.max_iters {
            o.max_iters = v;
        }
        if let Some(v) = self.grad_tol {
            o.grad_tol = v;
        }
        if let Some(v) = self.armijo_alpha {
            o.armijo_alpha = v;
        }
        if let Some(v) = self.max_curvature_retries {
            o.max_curvature_retries = v;
        }
        o.validate().map_err(|e| usage(e.to_string()))?;
        Ok(o)
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Write the fit as a one-entry parameter map.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Device label stored with the fit.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    label: f64,
    #[arg(long, default_value = "compressor")]
    mode: String,
    /// Also write the fit as a CSV row.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    chunk: ChunkArgs,
    #[command(flatten)]
    bounds: BoundsArgs,
    #[command(flatten)]
    init: InitArgs,
    #[command(flatten)]
    nr: NrArgs,
}

#[derive(Args)]
struct FitChainArgs {
    /// Corpus manifest, as written by `gen-corpus`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Fit from the lowest label up instead of the highest down.
    #[arg(long)]
    ascending: bool,
    #[command(flatten)]
    chunk: ChunkArgs,
    #[command(flatten)]
    init: InitArgs,
    #[command(flatten)]
    nr: NrArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    label: f64,
    #[arg(long, default_value = "compressor")]
    mode: String,
    /// Override the map's interpolation method.
    #[arg(long)]
    interp: Option<Interp>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    /// Append a row to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Short RMS window in seconds.
    #[arg(long, default_value_t = LdrOptions::default().short_window)]
    short_window: f64,
    /// Long RMS window in seconds.
    #[arg(long, default_value_t = LdrOptions::default().long_window)]
    long_window: f64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    draws: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Pass threshold on the relative error.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args)]
struct HessianBenchArgs {
    /// A strategy name or `all`.
    #[arg(long, default_value = "all")]
    strategy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Length of the synthetic signal.
    #[arg(long, default_value_t = 12.0)]
    seconds: f64,
    #[arg(long, default_value_t = 44100)]
    sample_rate: u32,
    /// Use this pair instead of a synthetic one.
    #[arg(long, requires = "target")]
    input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    target: Option<PathBuf>,
    /// Timed repetitions per strategy; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[command(flatten)]
    chunk: ChunkArgs,
}

#[derive(Args)]
struct InterpEvalArgs {
    #[arg(long)]
    map: PathBuf,
    /// Corpus manifest holding the audio for the held-out labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Labels to hold out (default: every other interior map label).
    #[arg(long, value_delimiter = ',')]
    hold_out: Option<Vec<f64>>,
    /// Mode to evaluate (default: the manifest's).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    /// Corpus spec as TOML; replaces the flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seconds per pair.
    #[arg(long, default_value_t = 6.0)]
    duration: f64,
    #[arg(long, default_value_t = 44100)]
    sample_rate: u32,
    /// Labels on the built-in peak-reduction curve (default 40,50,...,100).
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<f64>>,
    /// noise_bursts, am_tone, step_envelope or mixed.
    #[arg(long, default_value = "mixed")]
    stimulus: Stimulus,
}

#[derive(Args)]
struct ExportCsvArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only export this mode.
    #[arg(long)]
    mode: Option<String>,
}

/// Shortest round-trip form, switching to exponent notation for very small
/// or very large magnitudes.
fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn kv(key: &str, value: impl std::fmt::Display) {
    println!("{key}={value}");
}

fn kvf(key: &str, value: f64) {
    kv(key, num(value));
}

fn print_params(p: &CompressorParams) {
    kvf("ct_db", p.ct_db);
    kvf("ratio", p.ratio);
    kvf("attack_ms", p.attack_ms);
    kvf("release_ms", p.release_ms);
    kvf("makeup_db", p.makeup_db);
}

fn load_pair(input: &Path, target: &Path) -> CliResult<AudioPair> {
    Ok(pair_validate(load_wav(input)?, load_wav(target)?)?)
}

/// Pre-emphasised ESR of the fitted render against the target.
fn fit_esr(pair: &AudioPair, params: &CompressorParams) -> CliResult<f64> {
    let (y_hat, _) = compress_params(&pair.input.samples, params, DEFAULT_G_INIT);
    Ok(esr_preemph(&pair.target.samples, &y_hat)?)
}

fn map_entry(label: f64, mode: &str, r: &FitResult, esr: f64) -> MapEntry {
    MapEntry {
        label,
        mode: mode.to_string(),
        fit_loss: r.loss,
        fit_esr: esr,
        params: r.params,
    }
}

const MAP_CSV_HEADER: [&str; 9] = [
    "label",
    "mode",
    "ct_db",
    "ratio",
    "attack_ms",
    "release_ms",
    "makeup_db",
    "fit_loss",
    "fit_esr",
];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_map_csv(map: &ParameterMap, mode: Option<&str>, path: &Path) -> CliResult<usize> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(MAP_CSV_HEADER).map_err(&err)?;
    let mut rows = 0;
    for e in map.entries.iter().filter(|e| mode.is_none_or(|m| e.mode == m)) {
        let p = &e.params;
        w.write_record([
            num(e.label),
            e.mode.clone(),
            num(p.ct_db),
            num(p.ratio),
            num(p.attack_ms),
            num(p.release_ms),
            num(p.makeup_db),
            num(e.fit_loss),
            num(e.fit_esr),
        ])
        .map_err(&err)?;
        rows += 1;
    }
    w.flush().map_err(|e| err(e.into()))?;
    Ok(rows)
}

fn run_fit(a: &FitArgs) -> CliResult<()> {
    a.chunk.validate()?;
    let bounds = a.bounds.apply(ParamBounds::default())?;
    let opts = a.nr.options()?;
    // The bounds check on the init does not depend on the rate, so it can run
    // before any audio is read.
    a.init.theta(&bounds, 44100)?;

    let pair = load_pair(&a.input, &a.target)?;
    let sr = pair.sample_rate();
    let objective = a.chunk.objective(&pair, bounds)?;
    let theta = a.init.theta(&bounds, sr)?;
    let r = fit(&objective, &theta, &opts)?;
    let esr = fit_esr(&pair, &r.params)?;

    kv("status", r.status.name());
    kv("iters", r.iters);
    kvf("loss", r.loss);
    kvf("grad_norm", r.grad_norm);
    kv("curvature_retries", r.curvature_retries);
    kvf("esr", esr);
    kv("chunks", objective.n_chunks());
    print_params(&r.params);

    let mut map = ParameterMap::new(sr, bounds, Interp::default());
    map.insert(map_entry(a.label, &a.mode, &r, esr));
    if let Some(out) = &a.out {
        save_map(out, &map)?;
        kv("map", out.display());
    }
    if let Some(csv) = &a.csv {
        write_map_csv(&map, None, csv)?;
        kv("csv", csv.display());
    }
    Ok(())
}

fn run_fit_chain(a: &FitChainArgs) -> CliResult<()> {
    a.chunk.validate()?;
    let opts = a.nr.options()?;

    let manifest = Manifest::load(&a.manifest)?;
    let sr = manifest.sample_rate;
    let bounds = manifest.bounds;
    let theta = a.init.theta(&bounds, sr)?;
    let mut pairs = manifest.load_pairs(&a.manifest)?;
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    if !a.ascending {
        pairs.reverse();
    }
    let entries = pairs
        .iter()
        .map(|(label, pair)| Ok((*label, a.chunk.objective(pair, bounds)?)))
        .collect::<CliResult<Vec<_>>>()?;

    let chain = fit_chain(&entries, &theta, &opts);
    let mut map = ParameterMap::new(sr, bounds, Interp::default());
    let mut total_iters = 0;
    let mut failed = Vec::new();
    for (entry, (_, pair)) in chain.iter().zip(&pairs) {
        match &entry.result {
            Ok(r) => {
                let esr = fit_esr(pair, &r.params)?;
                total_iters += r.iters;
                println!(
                    "label={} status={} iters={} loss={} grad_norm={} esr={}",
                    num(entry.label),
                    r.status.name(),
                    r.iters,
                    num(r.loss),
                    num(r.grad_norm),
                    num(esr)
                );
                map.insert(map_entry(entry.label, &manifest.mode, r, esr));
            }
            Err(e) => {
                println!("label={} status=error", entry.label);
                eprintln!("error: label {}: {e}", entry.label);
                failed.push(entry.label);
            }
        }
    }
    kv("fitted", map.entries.len());
    kv("failed", failed.len());
    kv("total_iters", total_iters);
    save_map(&a.out, &map)?;
    kv("map", a.out.display());
    if let Some(csv) = &a.csv {
        write_map_csv(&map, None, csv)?;
        kv("csv", csv.display());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} fit(s) failed", failed.len())))
    }
}

fn run_render(a: &RenderArgs) -> CliResult<()> {
    let map = load_map(&a.map)?;
    let x = load_wav(&a.input)?;
    let method = a.interp.unwrap_or(map.interp);
    let y = render_with(&map, &a.mode, a.label, &x, method)?;
    save_wav(&a.out, &y)?;
    let p = nrcomp::param_map::interpolate_with(&map, &a.mode, a.label, method)?;
    kv("interp", method);
    print_params(&p);
    kv("samples", y.len());
    kv("out", a.out.display());
    Ok(())
}

fn run_metrics(a: &MetricsArgs) -> CliResult<()> {
    let opts = LdrOptions {
        short_window: a.short_window,
        long_window: a.long_window,
    };
    opts.validate().map_err(|e| usage(e.to_string()))?;
    let pair = pair_validate(load_wav(&a.reference)?, load_wav(&a.estimate)?)?;
    let (y, y_hat) = (&pair.input, &pair.target);
    let values = [
        ("esr", esr_preemph(&y.samples, &y_hat.samples)?),
        ("esr_raw", esr(&y.samples, &y_hat.samples)?),
        ("ldr_reference", ldr(y, &opts)?),
        ("ldr_estimate", ldr(y_hat, &opts)?),
        ("delta_ldr", delta_ldr(y, y_hat, &opts)?),
    ];
    for (k, v) in values {
        kvf(k, v);
    }
    if let Some(path) = &a.csv {
        let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| nrcomp::Error::Write {
                path: path.clone(),
                source,
            })?;
        let err = csv_err(path);
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            let mut header = vec!["reference", "estimate"];
            header.extend(values.iter().map(|(k, _)| *k));
            w.write_record(header).map_err(&err)?;
        }
        let mut row = vec![a.reference.display().to_string(), a.estimate.display().to_string()];
        row.extend(values.iter().map(|(_, v)| num(*v)));
        w.write_record(row).map_err(&err)?;
        w.flush().map_err(|e| err(e.into()))?;
        kv("csv", path.display());
    }
    Ok(())
}

fn run_grad_check(a: &GradCheckArgs) -> CliResult<()> {
    if a.samples == 0 || a.draws == 0 || !(a.step > 0.0) {
        return Err(usage("--samples, --draws and --step must be positive"));
    }
    let r = gradient_check(a.seed, a.samples, a.draws, a.step)?;
    let pass = r.max_rel_error < a.tol;
    kv("draws", r.draws);
    kv("samples", a.samples);
    kvf("max_rel_error", r.max_rel_error);
    kv("worst_draw", r.worst_draw);
    kv("worst_component", r.worst_component);
    kvf("tol", a.tol);
    kv("result", if pass { "PASS" } else { "FAIL" });
    if pass {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: {} >= {}",
            r.max_rel_error, a.tol
        )))
    }
}

/// Peak resident set size of the whole process, where the OS reports it.
fn process_peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn run_hessian_bench(a: &HessianBenchArgs) -> CliResult<()> {
    a.chunk.validate()?;
    let strategies: Vec<HessianStrategy> = if a.strategy == "all" {
        HessianStrategy::ALL.to_vec()
    } else {
        vec![a.strategy.parse().map_err(|e: nrcomp::Error| usage(e.to_string()))?]
    };
    if a.reps == 0 {
        return Err(usage("--reps must be positive"));
    }
    let bounds = ParamBounds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let pair = match (&a.input, &a.target) {
        (Some(x), Some(y)) => load_pair(x, y)?,
        _ => {
            if !(a.seconds > 0.0) || a.sample_rate == 0 {
                return Err(usage("--seconds and --sample-rate must be positive"));
            }
            let n = (a.seconds * a.sample_rate as f64).round() as usize;
            let x = AudioBuffer::new(stimulus(Stimulus::Mixed, n, a.sample_rate, &mut rng), a.sample_rate)?;
            let (y, _) = compress(&x, &random_theta(&mut rng), &bounds, DEFAULT_G_INIT);
            AudioPair { input: x, target: y }
        }
    };
    let sr = pair.sample_rate();
    let objective = a.chunk.objective(&pair, bounds)?;
    let theta = unconstrain(&CompressorParams::default_init(sr), &bounds, sr)?;
    kv("samples", pair.len());
    kv("chunks", objective.n_chunks());
    kv("threads", rayon::current_num_threads());

    let mut hessians = Vec::new();
    for &s in &strategies {
        let base = alloc_meter::reset_peak();
        let mut best = f64::INFINITY;
        let mut h = None;
        for _ in 0..a.reps {
            let t = Instant::now();
            let e = objective.evaluate_unsymmetrized(&theta, s);
            best = best.min(t.elapsed().as_secs_f64() * 1e3);
            h = Some(e.hessian);
        }
        let peak = alloc_meter::peak().saturating_sub(base);
        println!("strategy={s} wall_ms={best:.3} peak_heap_bytes={peak}");
        hessians.push(h.expect("reps > 0"));
    }
    let mut max_dev: f64 = 0.0;
    for i in 0..hessians.len() {
        for j in (i + 1)..hessians.len() {
            max_dev = max_dev.max(hessians[i].rel_diff(&hessians[j]));
        }
    }
    if hessians.len() > 1 {
        kvf("max_deviation", max_dev);
    }
    if let Some(kb) = process_peak_rss_kb() {
        kv("process_peak_rss_kb", kb);
    }
    Ok(())
}

fn run_interp_eval(a: &InterpEvalArgs) -> CliResult<()> {
    let map = load_map(&a.map)?;
    let manifest = Manifest::load(&a.manifest)?;
    let mode = a.mode.clone().unwrap_or_else(|| manifest.mode.clone());
    let held_out = match &a.hold_out {
        Some(v) => v.clone(),
        None => {
            let labels: Vec<f64> = map.entries_for(&mode).iter().map(|e| e.label).collect();
            if labels.len() < 3 {
                return Err(CliError::Failed(format!(
                    "mode {mode:?} needs at least 3 labels for a leave-out evaluation"
                )));
            }
            labels[1..labels.len() - 1].iter().copied().step_by(2).collect()
        }
    };
    let corpus = manifest.load_pairs(&a.manifest)?;
    let eval = interp_eval(&map, &mode, &held_out, &corpus)?;
    for r in &eval.rows {
        println!("label={} method={} esr={}", num(r.label), r.method, num(r.esr));
    }
    for method in Interp::ALL {
        if let Some(m) = eval.mean_esr(method) {
            kvf(&format!("mean_esr_{method}"), m);
        }
    }
    if let Some(path) = &a.csv {
        let err = csv_err(path);
        let mut w = csv::Writer::from_path(path).map_err(&err)?;
        w.write_record(["label", "method", "esr"]).map_err(&err)?;
        for r in &eval.rows {
            w.write_record([num(r.label), r.method.to_string(), num(r.esr)])
                .map_err(&err)?;
        }
        w.flush().map_err(|e| err(e.into()))?;
        kv("csv", path.display());
    }
    Ok(())
}

fn run_gen_corpus(a: &GenCorpusArgs) -> CliResult<()> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| nrcomp::Error::Read {
                path: path.clone(),
                source,
            })?;
            toml::from_str::<CorpusSpec>(&text).map_err(|e| nrcomp::Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?
        }
        None => {
            let mut s = CorpusSpec::example(a.seed, a.sample_rate);
            s.duration = a.duration;
            s.stimulus = a.stimulus;
            if let Some(labels) = &a.labels {
                s.labels = labels.clone();
            }
            s.validate().map_err(|e| usage(e.to_string()))?;
            s
        }
    };
    let manifest = generate(&spec, &a.out)?;
    kv("entries", manifest.entries.len());
    kv("samples_per_entry", spec.n_samples());
    kv("manifest", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn run_export_csv(a: &ExportCsvArgs) -> CliResult<()> {
    let map = load_map(&a.map)?;
    let rows = write_map_csv(&map, a.mode.as_deref(), &a.out)?;
    kv("rows", rows);
    kv("csv", a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::FitChain(a) => run_fit_chain(a),
        Command::Render(a) => run_render(a),
        Command::Metrics(a) => run_metrics(a),
        Command::GradCheck(a) => run_grad_check(a),
        Command::HessianBench(a) => run_hessian_bench(a),
        Command::InterpEval(a) => run_interp_eval(a),
        Command::GenCorpus(a) => run_gen_corpus(a),
        Command::ExportCsv(a) => run_export_csv(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
