use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mmdiv::data::{load_csv, standardize_instruments, Dataset, InstrumentTransform};
use mmdiv::estimator::{estimate, identification_diagnostics, Method};
use mmdiv::inference::{lc_interpretation, lc_test, spec_interpretation, spec_test, BootTestResult, WildWeights};
use mmdiv::kernels::{kernel_matrix, kernel_sd_mc, KernelSpec};
use mmdiv::mdd::gmdc;
use mmdiv::simulate::{linear_signal_sample, run_mc, DgpConfig, DgpId};
use mmdiv::{IcmError, Result};
use serde_json::{json, Map, Number, Value};

const BUILD_ID: &str = concat!("mmdiv ", env!("CARGO_PKG_VERSION"));

#[derive(Parser, Debug)]
#[command(name = "mmdiv", version, about = "Integrated conditional moment IV estimation and diagnostics")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the payload to stdout.
    #[arg(long, global = true)]
    stdout: bool,
    /// Payload file (default `mmdiv-<subcommand>.<ext>` unless --stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run manifest file (default `<out>.manifest.json`; stderr when only --stdout).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate a linear IV model with an ICM kernel.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kernel: KernelArgs,
    },
    /// Wild-bootstrap test of E[U | Z] = 0 after estimation.
    Spectest {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kernel: KernelArgs,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Linear-completeness test of ICM relevance for one endogenous covariate.
    Relevance {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kernel: KernelArgs,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Monte Carlo over a simulation design.
    Mc {
        #[arg(long)]
        dgp: String,
        #[arg(long, default_value_t = 250)]
        n: usize,
        /// Instrument dimension (fixed by designs 0A, 0B, 1A, 1B; default 8 for design 4).
        #[arg(long)]
        pz: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        /// Comma-separated: mmd, iiv, dl, esc6, wmd, tsls.
        #[arg(long, value_delimiter = ',', default_value = "mmd")]
        estimators: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo standard deviation of each kernel across instrument dimensions.
    KernelDiag {
        #[arg(long, value_delimiter = ',', default_value = "mmd,iiv,dl,esc6,wmd")]
        kernels: Vec<String>,
        /// Comma-separated instrument dimensions (default 1 through 40).
        #[arg(long, value_delimiter = ',')]
        pz: Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        bandwidth: f64,
    },
    /// Dependence coefficient of each kernel for a linear signal in Z.
    GmdcDiag {
        #[arg(long, value_delimiter = ',', default_value = "mmd,esc6,iiv,dl")]
        kernels: Vec<String>,
        /// Comma-separated instrument dimensions (default 1 through 40).
        #[arg(long, value_delimiter = ',')]
        pz: Vec<usize>,
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Outcome column.
    #[arg(long)]
    y: String,
    /// Comma-separated covariates; an intercept is always added.
    #[arg(long, value_delimiter = ',')]
    x: Vec<String>,
    /// Comma-separated instruments.
    #[arg(long, value_delimiter = ',', required = true)]
    z: Vec<String>,
    /// Comma-separated endogenous covariates (subset of --x).
    #[arg(long, value_delimiter = ',')]
    endog: Vec<String>,
    /// Map each instrument to atan of its standardized value.
    #[arg(long)]
    atan_z: bool,
}

#[derive(Args, Debug, Clone)]
struct KernelArgs {
    /// One of mmd, iiv, dl, esc6, wmd.
    #[arg(long, default_value = "mmd")]
    kernel: String,
    /// Bandwidth of the wmd kernel.
    #[arg(long, default_value_t = 1.0)]
    bandwidth: f64,
}

#[derive(Args, Debug, Clone)]
struct BootArgs {
    #[arg(long, default_value_t = 999)]
    boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// mammen or rademacher.
    #[arg(long, default_value = "mammen")]
    weights: String,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
}

enum Payload {
    Json(Value),
    Csv(String),
}

impl Payload {
    fn extension(&self) -> &'static str {
        match self {
            Payload::Json(_) => "json",
            Payload::Csv(_) => "csv",
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Payload::Json(v) => {
                let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
                s.push('\n');
                s.into_bytes()
            }
            Payload::Csv(s) => s.clone().into_bytes(),
        }
    }
}

struct RunOutput {
    payload: Payload,
    config: Value,
    seed: Option<u64>,
    /// Extra files keyed by suffix, written next to the payload.
    sidecars: Vec<(&'static str, Value)>,
}

/// Round-trip-exact rendering with 17 significant digits.
fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "nan".into()
    }
}

fn num(x: f64) -> Value {
    if x.is_finite() {
        Value::Number(Number::from_str(&fmt_num(x)).expect("valid JSON number"))
    } else {
        Value::Null
    }
}

fn nums<'a>(xs: impl IntoIterator<Item = &'a f64>) -> Value {
    Value::Array(xs.into_iter().map(|&x| num(x)).collect())
}

fn parse_kernel(args: &KernelArgs) -> Result<KernelSpec> {
    match KernelSpec::from_str(&args.kernel)? {
        KernelSpec::Wmd { .. } => {
            if !(args.bandwidth > 0.0 && args.bandwidth.is_finite()) {
                return Err(IcmError::Config(format!("bandwidth must be positive, got {}", args.bandwidth)));
            }
            Ok(KernelSpec::Wmd { bandwidth: args.bandwidth })
        }
        spec => Ok(spec),
    }
}

fn parse_kernels(names: &[String], bandwidth: f64) -> Result<Vec<KernelSpec>> {
    names
        .iter()
        .map(|s| {
            parse_kernel(&KernelArgs {
                kernel: s.trim().to_string(),
                bandwidth,
            })
        })
        .collect()
}

fn pz_grid(pz: &[usize]) -> Result<Vec<usize>> {
    if pz.is_empty() {
        return Ok((1..=40).collect());
    }
    if pz.contains(&0) {
        return Err(IcmError::Config("instrument dimensions must be positive".into()));
    }
    Ok(pz.to_vec())
}

fn load(args: &DataArgs) -> Result<Dataset> {
    let ds = load_csv(&args.data, &args.y, &args.x, &args.z, &args.endog)?;
    if args.atan_z {
        standardize_instruments(&ds, InstrumentTransform::Atan)
    } else {
        Ok(ds)
    }
}

fn data_config(args: &DataArgs) -> Value {
    json!({
        "data": args.data.display().to_string(),
        "y": args.y,
        "x": args.x,
        "z": args.z,
        "endog": args.endog,
        "atan_z": args.atan_z,
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(b), Value::Object(e)) = (&mut base, extra) {
        b.extend(e);
    }
    base
}

fn kernel_config(spec: KernelSpec) -> Value {
    match spec {
        KernelSpec::Wmd { bandwidth } => json!({ "kernel": spec.name(), "bandwidth": num(bandwidth) }),
        _ => json!({ "kernel": spec.name() }),
    }
}

fn run_estimate(data: &DataArgs, kernel: &KernelArgs) -> Result<RunOutput> {
    let spec = parse_kernel(kernel)?;
    let ds = load(data)?;
    let fit = estimate(&ds, spec)?;
    let diag = identification_diagnostics(&ds, spec)?;
    let vcov: Vec<Value> = fit
        .vcov
        .row_iter()
        .map(|r| nums(r.iter()))
        .collect();
    let payload = json!({
        "names": ds.x_names(),
        "theta": nums(fit.theta.iter()),
        "se": nums(fit.se.iter()),
        "vcov": vcov,
        "cond_A": num(fit.cond_a),
        "n": ds.n(),
        "p_x": ds.px(),
        "p_z": ds.pz(),
        "kernel": spec.name(),
        "diagnostics": {
            "min_eig": num(diag.min_eig),
            "gmdc_strength": diag.gmdc_strength.map_or(Value::Null, num),
            "rank_h": diag.rank_h,
            "rank_z": diag.rank_z,
        },
    });
    Ok(RunOutput {
        payload: Payload::Json(payload),
        config: merge(data_config(data), kernel_config(spec)),
        seed: None,
        sidecars: Vec::new(),
    })
}

fn boot_payload(r: &BootTestResult, interpretation: &str, level: f64, spec: KernelSpec) -> Value {
    json!({
        "stat": num(r.stat),
        "pvalue": num(r.pvalue),
        "B": r.b,
        "failed_draws": r.failed_draws,
        "seed": r.seed,
        "weights": r.weight_scheme.name(),
        "kernel": spec.name(),
        "level": num(level),
        "interpretation": interpretation,
    })
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(IcmError::Config(format!("level must lie in (0, 1), got {level}")))
    }
}

fn run_boot(data: &DataArgs, kernel: &KernelArgs, boot: &BootArgs, relevance: bool) -> Result<RunOutput> {
    let spec = parse_kernel(kernel)?;
    let weights = WildWeights::from_str(&boot.weights)?;
    check_level(boot.level)?;
    let ds = load(data)?;
    let (result, interpretation) = if relevance {
        if data.endog.len() != 1 {
            return Err(IcmError::Unsupported(format!(
                "relevance needs exactly one --endog covariate, got {}",
                data.endog.len()
            )));
        }
        let idx = ds
            .x_names()
            .iter()
            .position(|c| *c == data.endog[0])
            .ok_or_else(|| IcmError::MissingColumn(data.endog[0].clone()))?;
        let r = lc_test(&ds, idx, spec, boot.boot, boot.seed, weights)?;
        let s = lc_interpretation(r.pvalue, boot.level);
        (r, s)
    } else {
        let r = spec_test(&ds, spec, boot.boot, boot.seed, weights)?;
        let s = spec_interpretation(r.pvalue, boot.level);
        (r, s)
    };
    let config = merge(
        merge(data_config(data), kernel_config(spec)),
        json!({
            "boot": boot.boot,
            "seed": boot.seed,
            "weights": weights.name(),
            "level": num(boot.level),
        }),
    );
    Ok(RunOutput {
        payload: Payload::Json(boot_payload(&result, interpretation, boot.level, spec)),
        config,
        seed: Some(boot.seed),
        sidecars: Vec::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_mc_cmd(
    dgp: &str,
    n: usize,
    pz: Option<usize>,
    delta: f64,
    rho: f64,
    reps: usize,
    estimators: &[String],
    seed: u64,
) -> Result<RunOutput> {
    let id = DgpId::from_str(dgp)?;
    let mut cfg = DgpConfig::new(id, n, delta, seed).with_rho(rho);
    if let Some(p) = pz {
        cfg = cfg.with_pz(p);
    }
    let methods = estimators
        .iter()
        .map(|s| Method::from_str(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let summary = run_mc(&cfg, reps, &methods)?;

    let mut csv = String::from("dgp,n,p_z,delta,rho,reps,estimator,metric,value\n");
    for row in &summary.rows {
        for (metric, value) in [("MB", row.mb), ("MAD", row.mad), ("RMSE", row.rmse), ("Rej", row.rej)] {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                id,
                cfg.n,
                cfg.pz,
                fmt_num(cfg.delta),
                fmt_num(cfg.rho),
                reps,
                row.method.name(),
                metric,
                fmt_num(value)
            ));
        }
    }
    let config = json!({
        "dgp": id.name(),
        "n": cfg.n,
        "pz": cfg.pz,
        "delta": num(cfg.delta),
        "rho": num(cfg.rho),
        "reps": reps,
        "estimators": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "seed": seed,
    });
    let rows: Vec<Value> = summary
        .rows
        .iter()
        .map(|r| {
            json!({
                "estimator": r.method.name(),
                "failures": r.failures,
                "valid": r.valid,
            })
        })
        .collect();
    let sidecar = json!({ "config": config.clone(), "estimators": rows });
    Ok(RunOutput {
        payload: Payload::Csv(csv),
        config,
        seed: Some(seed),
        sidecars: vec![("summary.json", sidecar)],
    })
}

fn run_kernel_diag(kernels: &[String], pz: &[usize], draws: usize, seed: u64, bandwidth: f64) -> Result<RunOutput> {
    let specs = parse_kernels(kernels, bandwidth)?;
    let grid = pz_grid(pz)?;
    let mut csv = String::from("kernel,p_z,sd_estimate,mc_stderr,draws,seed\n");
    for spec in &specs {
        for &p in &grid {
            let r = kernel_sd_mc(*spec, p, draws, seed)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                spec.name(),
                p,
                fmt_num(r.sd),
                fmt_num(r.stderr),
                r.draws,
                r.seed
            ));
        }
    }
    let config = json!({
        "kernels": specs.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "pz": grid,
        "draws": draws,
        "seed": seed,
        "bandwidth": num(bandwidth),
    });
    Ok(RunOutput {
        payload: Payload::Csv(csv),
        config,
        seed: Some(seed),
        sidecars: Vec::new(),
    })
}

fn run_gmdc_diag(kernels: &[String], pz: &[usize], n: usize, seed: u64) -> Result<RunOutput> {
    let specs = parse_kernels(kernels, 1.0)?;
    if specs.iter().any(|s| matches!(s, KernelSpec::Wmd { .. })) {
        return Err(IcmError::Config("wmd depends on the outcome and has no gmdc diagnostic".into()));
    }
    if n < 3 {
        return Err(IcmError::Config(format!("n must be at least 3, got {n}")));
    }
    let grid = pz_grid(pz)?;
    let mut csv = String::from("kernel,p_z,n,gmdc,seed\n");
    for spec in &specs {
        for &p in &grid {
            // same sample for every kernel at a given dimension
            let (w, z) = linear_signal_sample(n, p, seed, p as u64);
            let k = kernel_matrix(&z, *spec, None)?;
            let g = gmdc(&w, &k)?;
            csv.push_str(&format!("{},{},{},{},{}\n", spec.name(), p, n, fmt_num(g), seed));
        }
    }
    let config = json!({
        "kernels": specs.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "pz": grid,
        "n": n,
        "seed": seed,
    });
    Ok(RunOutput {
        payload: Payload::Csv(csv),
        config,
        seed: Some(seed),
        sidecars: Vec::new(),
    })
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Estimate { .. } => "estimate",
        Command::Spectest { .. } => "spectest",
        Command::Relevance { .. } => "relevance",
        Command::Mc { .. } => "mc",
        Command::KernelDiag { .. } => "kernel-diag",
        Command::GmdcDiag { .. } => "gmdc-diag",
    }
}

fn dispatch(cmd: &Command) -> Result<RunOutput> {
    match cmd {
        Command::Estimate { data, kernel } => run_estimate(data, kernel),
        Command::Spectest { data, kernel, boot } => run_boot(data, kernel, boot, false),
        Command::Relevance { data, kernel, boot } => run_boot(data, kernel, boot, true),
        Command::Mc {
            dgp,
            n,
            pz,
            delta,
            rho,
            reps,
            estimators,
            seed,
        } => run_mc_cmd(dgp, *n, *pz, *delta, *rho, *reps, estimators, *seed),
        Command::KernelDiag {
            kernels,
            pz,
            draws,
            seed,
            bandwidth,
        } => run_kernel_diag(kernels, pz, *draws, *seed, *bandwidth),
        Command::GmdcDiag { kernels, pz, n, seed } => run_gmdc_diag(kernels, pz, *n, *seed),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| IcmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(IcmError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| IcmError::Config(format!("cannot configure thread pool: {e}")))?;
    }
    let name = subcommand_name(&cli.command);
    let start = Instant::now();
    let out = dispatch(&cli.command)?;
    let bytes = out.payload.bytes();

    let target = match (&cli.out, cli.stdout) {
        (Some(p), _) => Some(p.clone()),
        (None, true) => None,
        (None, false) => Some(PathBuf::from(format!("mmdiv-{name}.{}", out.payload.extension()))),
    };
    let mut outputs = Vec::new();
    if cli.stdout {
        use std::io::Write;
        let mut so = std::io::stdout().lock();
        so.write_all(&bytes)
            .and_then(|_| so.flush())
            .map_err(|source| IcmError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })?;
        outputs.push(Value::String("<stdout>".into()));
    }
    if let Some(path) = &target {
        write_file(path, &bytes)?;
        outputs.push(Value::String(path.display().to_string()));
        for (suffix, value) in &out.sidecars {
            let side = with_suffix(path, suffix);
            let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
            text.push('\n');
            write_file(&side, text.as_bytes())?;
            outputs.push(Value::String(side.display().to_string()));
        }
    }

    let mut manifest = Map::new();
    manifest.insert("subcommand".into(), json!(name));
    manifest.insert("argv".into(), json!(std::env::args().collect::<Vec<_>>()));
    manifest.insert("config".into(), out.config);
    manifest.insert("seed".into(), out.seed.map_or(Value::Null, |s| json!(s)));
    manifest.insert("version".into(), json!(BUILD_ID));
    manifest.insert("threads".into(), json!(rayon::current_num_threads()));
    manifest.insert("wall_time_secs".into(), num(start.elapsed().as_secs_f64()));
    manifest.insert("outputs".into(), Value::Array(outputs));
    let manifest = Value::Object(manifest);

    let manifest_path = cli
        .manifest
        .clone()
        .or_else(|| target.as_ref().map(|p| with_suffix(p, "manifest.json")));
    match manifest_path {
        Some(path) => {
            let mut text = serde_json::to_string_pretty(&manifest).expect("JSON values serialize");
            text.push('\n');
            write_file(&path, text.as_bytes())?;
        }
        None => eprintln!("manifest: {manifest}"),
    }
    Ok(())
}

fn exit_code(err: &IcmError) -> u8 {
    match err {
        IcmError::Identification { .. } => 3,
        IcmError::Bootstrap { .. }
        | IcmError::Degenerate(_)
        | IcmError::Diagnostic(_)
        | IcmError::Oracle(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
