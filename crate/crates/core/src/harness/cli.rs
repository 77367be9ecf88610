use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use super::eval::{
    encoder_flops, evaluate, multirate_eval, nmse_db, ordering_violations, reconstruct,
};
use super::model::{CsiModel, ModelConfig};
use super::plot::{line_chart, Series};
use super::train::{train, TrainConfig};
use crate::channelgen::{generate, load_dataset, save_dataset, Dataset, GenConfig, Split};
use crate::error::{contract_err, Error, Result};
use crate::l2o::{convergence_report, DEFAULT_HIDDEN};
use crate::quantize::{feedback_bits, fit_lloyd_max};
use crate::transforms::TransformConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "csifb", version, about = "Compressive CSI feedback with a learned iterative decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic channel dataset.
    GenData(GenArgs),
    /// Train encoder, transform and parameter network end to end.
    Train(TrainArgs),
    /// Report NMSE, complexity and the objective trace of a checkpoint.
    Eval(EvalArgs),
    /// Reconstruct channels and optionally report convergence diagnostics.
    Decode(DecodeArgs),
    /// Fit Lloyd-Max codebooks and evaluate with quantized codewords.
    QuantizeEval(QuantArgs),
    /// Evaluate one checkpoint at several codeword lengths.
    Multirate(MultirateArgs),
    /// Encoder FLOP and parameter counts.
    Flops(FlopsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    nc: usize,
    #[arg(long, default_value_t = 8)]
    nt: usize,
    #[arg(long, default_value_t = 8)]
    na: usize,
    #[arg(long, default_value_t = 4)]
    paths: usize,
    /// Draw continuous rather than on-grid delays.
    #[arg(long)]
    fractional_delays: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Codeword length.
    #[arg(long, default_value_t = 32)]
    m: usize,
    #[arg(long, default_value_t = 10)]
    t_unroll: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 50)]
    patience: usize,
    /// Transform-only epochs before end-to-end training.
    #[arg(long, default_value_t = 0)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    warmup_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    /// Threshold the iterate directly instead of in a learned domain.
    #[arg(long)]
    no_transform: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write per-iteration convergence diagnostics.
    #[arg(long)]
    report: bool,
    /// Displacement below which an iteration counts as converged.
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct QuantArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Split whose codewords fit the codebooks.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5,6")]
    bits: Vec<u8>,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Debug, Args)]
struct MultirateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Codeword lengths to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64")]
    ms: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = 32)]
    na: usize,
    #[arg(long, default_value_t = 32)]
    nt: usize,
    /// Compression denominator: `M = 2 na nt / cr`.
    #[arg(long, default_value_t = 8)]
    cr: usize,
    /// Also write `flops.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) => EXIT_USAGE,
        Error::Dimension(_) | Error::Format(_) | Error::Io(_) => EXIT_DATA,
        Error::Numerical(_) | Error::NonConvergence { .. } => EXIT_NUMERICAL,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::QuantizeEval(a) => quantize_cmd(a),
        Command::Multirate(a) => multirate_cmd(a),
        Command::Flops(a) => flops_cmd(a),
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), body)?;
    Ok(())
}

fn metric_csv(rows: &[(&str, String)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_model(path: &Path) -> Result<CsiModel> {
    CsiModel::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn gen_data(a: GenArgs) -> Result<()> {
    let cfg = GenConfig {
        nc: a.nc,
        nt: a.nt,
        na: a.na,
        n_paths: a.paths,
        seed: a.seed,
        fractional_delays: a.fractional_delays,
        ..GenConfig::desk()
    };
    let split = Split::from(a.split);
    let d = generate(&cfg, a.count, split)?;
    let name = split_name(split);
    fs::create_dir_all(&a.out)?;
    save_dataset(&d, a.out.join(format!("{name}.clds")))?;
    let energy = d.samples.iter().map(|s| s.h_vec.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / d.len() as f64;
    let csv = metric_csv(&[
        ("samples", d.len().to_string()),
        ("n", cfg.h_len().to_string()),
        ("mean_energy", energy.to_string()),
    ]);
    write(&a.out, &format!("{name}_summary.csv"), &csv)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let train_set = load_data(&a.train)?;
    let val_set = load_data(&a.val)?;
    let (na, nt) = (train_set.config.na, train_set.config.nt);
    let cfg = ModelConfig {
        na,
        nt,
        m: a.m,
        transform: (!a.no_transform).then(|| TransformConfig::desk(nt)),
        hidden: a.hidden,
    };
    if a.m == 0 || a.m > cfg.n() {
        return Err(contract_err!("codeword length {} must lie in 1..={}", a.m, cfg.n()));
    }
    let model = CsiModel::new(cfg, a.seed)?;
    let tc = TrainConfig {
        t_unroll: a.t_unroll,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        beta: a.beta,
        seed: a.seed,
        patience: a.patience,
        warmup_epochs: a.warmup_epochs,
        warmup_lr: a.warmup_lr,
    };
    let out = train(model, &tc, &train_set, &val_set)?;
    fs::create_dir_all(&a.out)?;
    out.best.save(a.out.join("model.ckpt"))?;
    let mut log = String::from("epoch,train_loss,val_nmse_db\n");
    for e in &out.history {
        let _ = writeln!(log, "{},{},{}", e.epoch, e.train_loss, e.val_nmse_db);
    }
    write(&a.out, "train_log.csv", &log)?;
    let best_val = out
        .history
        .iter()
        .find(|e| e.epoch == out.best_epoch)
        .map_or(f64::NAN, |e| e.val_nmse_db);
    write(
        &a.out,
        "train_summary.csv",
        &metric_csv(&[
            ("epochs_run", out.history.len().to_string()),
            ("best_epoch", out.best_epoch.to_string()),
            ("best_val_nmse_db", best_val.to_string()),
            ("params", out.best.param_count().to_string()),
        ]),
    )?;
    let curve: Vec<(f64, f64)> = out.history.iter().map(|e| (e.epoch as f64, e.val_nmse_db)).collect();
    write(
        &a.out,
        "val_nmse.svg",
        &line_chart(
            "Validation NMSE",
            "epoch",
            "NMSE (dB)",
            &[Series { label: "validation".into(), points: curve }],
        ),
    )
}

fn objective_outputs(dir: &Path, objective: &[f64]) -> Result<()> {
    let mut csv = String::from("iteration,objective\n");
    for (i, v) in objective.iter().enumerate() {
        let _ = writeln!(csv, "{},{v}", i + 1);
    }
    write(dir, "objective.csv", &csv)?;
    let pts = objective.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
    write(
        dir,
        "objective.svg",
        &line_chart(
            "Decoder objective",
            "iteration",
            "1/2 ||s - Wx||^2",
            &[Series { label: "mean over samples".into(), points: pts }],
        ),
    )
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let d = load_data(&a.data)?;
    let r = evaluate(&model, &d, a.iters, a.seed)?;
    let c = r.complexity;
    write(
        &a.out,
        "eval.csv",
        &metric_csv(&[
            ("nmse_db", r.nmse_db.to_string()),
            ("samples", d.len().to_string()),
            ("iterations", a.iters.to_string()),
            ("encoder_flops", c.encoder_flops.to_string()),
            ("decoder_flops", c.decoder_flops.to_string()),
            ("decoder_flops_per_iter", c.decoder_flops_per_iter.to_string()),
            ("encoder_params", c.encoder_params.to_string()),
            ("decoder_params", c.decoder_params.to_string()),
            ("params", r.params.to_string()),
        ]),
    )?;
    objective_outputs(&a.out, &r.trace.objective)
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let d = load_data(&a.data)?;
    super::eval::check_dataset(&model, &d)?;
    let (est, trace) = reconstruct(&model, &d, a.iters, a.seed, None)?;
    let n = model.n();
    let mut csv = String::from("sample,coordinate,value\n");
    for (i, row) in est.chunks(n).enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(csv, "{i},{j},{v}");
        }
    }
    write(&a.out, "reconstruction.csv", &csv)?;
    if a.report {
        let rep = convergence_report(&trace, a.threshold)?;
        let truth: Vec<f64> = d.samples.iter().flat_map(|s| s.h_vec.iter().copied()).collect();
        let first = rep.first_below.map_or_else(|| "none".to_string(), |i| i.to_string());
        write(
            &a.out,
            "decode_report.csv",
            &metric_csv(&[
                ("nmse_db", nmse_db(&truth, &est, n)?.to_string()),
                ("iterations", rep.iterations.to_string()),
                ("final_displacement", rep.final_displacement.to_string()),
                ("threshold", rep.threshold.to_string()),
                ("first_below_threshold", first),
            ]),
        )?;
        let mut per_iter = String::from("iteration,objective,displacement,b1_norm,b2_norm\n");
        for i in 0..trace.len() {
            let _ = writeln!(
                per_iter,
                "{},{},{},{},{}",
                i + 1,
                trace.objective[i],
                trace.displacement[i],
                trace.b1_norm[i],
                trace.b2_norm[i]
            );
        }
        write(&a.out, "decode_trace.csv", &per_iter)?;
        objective_outputs(&a.out, &trace.objective)?;
    }
    Ok(())
}

fn quantize_cmd(a: QuantArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let fit_set = load_data(&a.fit)?;
    let d = load_data(&a.data)?;
    super::eval::check_dataset(&model, &fit_set)?;
    super::eval::check_dataset(&model, &d)?;
    if a.bits.is_empty() {
        return Err(contract_err!("at least one bit depth is required"));
    }
    let stack = |d: &Dataset| -> Vec<f64> { d.samples.iter().flat_map(|s| s.h_vec.iter().copied()).collect() };
    let fit_codes = model.encode_batch(&stack(&fit_set))?;
    let truth = stack(&d);
    let ratio = model.m() as f64 / model.n() as f64;
    let mut results = String::from("ratio,bits,nmse_db\n");
    let mut metrics: Vec<(String, String)> = Vec::new();
    let base = evaluate(&model, &d, a.iters, a.seed)?.nmse_db;
    let _ = writeln!(results, "{ratio},none,{base}");
    for &b in &a.bits {
        let (cb, report) = fit_lloyd_max(&fit_codes, b, a.max_iter, a.tol)?;
        if !cb.converged {
            warn!("{b}-bit codebook stopped after {} iterations", report.iterations);
        }
        let quant = |s: &[f64]| cb.quantize(s).dequantized;
        let (est, _) = reconstruct(&model, &d, a.iters, a.seed, Some(&quant))?;
        let nmse = nmse_db(&truth, &est, model.n())?;
        let _ = writeln!(results, "{ratio},{b},{nmse}");
        metrics.push((format!("mse_b{b}"), cb.distortion(&fit_codes).to_string()));
        metrics.push((format!("converged_b{b}"), cb.converged.to_string()));
        metrics.push((format!("feedback_bits_b{b}"), feedback_bits(model.m(), b).to_string()));
        fs::create_dir_all(&a.out)?;
        cb.save(a.out.join(format!("codebook_b{b}.clcb")))?;
    }
    write(&a.out, "quantize.csv", &results)?;
    let rows: Vec<(&str, String)> = metrics.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write(&a.out, "quantizer.csv", &metric_csv(&rows))
}

fn multirate_cmd(a: MultirateArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let d = load_data(&a.data)?;
    let rows = multirate_eval(&model, &d, &a.ms, a.iters, a.seed)?;
    let mut csv = String::from("ratio,bits,nmse_db\n");
    for r in &rows {
        let _ = writeln!(csv, "{},none,{}", r.ratio, r.nmse_db);
    }
    write(&a.out, "multirate.csv", &csv)?;
    let violations = ordering_violations(&rows);
    for (lo, hi) in &violations {
        warn!("M = {hi} reconstructs worse than M = {lo}");
    }
    write(
        &a.out,
        "multirate_summary.csv",
        &metric_csv(&[
            ("trained_m", model.m().to_string()),
            ("rates", rows.len().to_string()),
            ("ordering_violations", violations.len().to_string()),
        ]),
    )?;
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.ratio, r.nmse_db)).collect();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    write(
        &a.out,
        "multirate.svg",
        &line_chart(
            "NMSE versus compression ratio",
            "M / n",
            "NMSE (dB)",
            &[Series { label: "single checkpoint".into(), points: pts }],
        ),
    )
}

fn flops_cmd(a: FlopsArgs) -> Result<()> {
    let flops = encoder_flops(a.na, a.nt, a.cr)?;
    let csv = metric_csv(&[
        ("encoder_flops", flops.to_string()),
        ("encoder_params", flops.to_string()),
    ]);
    print!("{csv}");
    if let Some(dir) = &a.out {
        write(dir, "flops.csv", &csv)?;
    }
    Ok(())
}
