//! Command-line front end: training/eval entry points, the placement
//! sweep, the stem-norm ablation suite, gradient-norm instrumentation and
//! scale-parameter image export.

mod spec;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::data::{read_cifar10_bin, read_idx, synthetic_dataset, value_range, Dataset};
use crate::pgm::write_pgm;
use crate::tensor::DType;
use crate::train::{evaluate, train, MetricsRecord, TrainConfig, TrainOutput};
use crate::vit::{
    init_params, micro_config, model_grad_check, placement_grid, BlockExtra, ModelConfig,
    Placement, StemNorm, StemNormKind,
};

pub use spec::{Precision, RunSpec};

#[derive(Parser)]
#[command(name = "vitlab", about = "Vision-transformer normalization laboratory", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model from a run spec; writes metrics.csv and model.ckpt.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Train the 9 LayerNorm-placement grid configs plus NormFormer,
    /// Sub-LN and the dual-norm stem (12 runs); writes sweep.csv.
    SweepPlacements(RunArgs),
    /// Train the 8 stem-norm ablation configs; writes ablate.csv.
    AblateStem(RunArgs),
    /// Twin instrumented runs (stem none vs dual-norm): per-depth and
    /// per-step gradient-norm CSVs.
    GradNorms(RunArgs),
    /// Export the pixel-space scale parameters of a checkpoint as
    /// per-channel PGM images plus a raw CSV.
    ExportScales(ExportArgs),
    /// Finite-difference verification of the full model gradient across
    /// every stem / placement / extra combination.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Args)]
struct RunArgs {
    /// Run spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Directory holding the dataset files (mnist/cifar10).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate; defaults to <out>/model.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint whose first-norm scale parameters to export.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Where to write gradcheck.csv; report prints either way.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

pub fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::SweepPlacements(a) => cmd_sweep(&a),
        Cmd::AblateStem(a) => cmd_ablate(&a),
        Cmd::GradNorms(a) => cmd_grad_norms(&a),
        Cmd::ExportScales(a) => cmd_export_scales(&a),
        Cmd::GradCheck(a) => cmd_grad_check(&a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

type CliResult = Result<(), String>;

fn err<T>(e: impl std::fmt::Display) -> Result<T, String> {
    Err(e.to_string())
}

// ── data plumbing ──────────────────────────────────────────────────────

fn load_splits(spec: &RunSpec, args: &RunArgs) -> Result<(Dataset, Dataset), String> {
    let kind = args.dataset.or(match spec.dataset.as_deref() {
        None => Some(DatasetKind::Synthetic),
        Some("mnist") => Some(DatasetKind::Mnist),
        Some("cifar10") => Some(DatasetKind::Cifar10),
        Some("synthetic") => Some(DatasetKind::Synthetic),
        Some(other) => return err(format!("unknown dataset {other:?} in spec")),
    });
    let dir = args
        .data_dir
        .clone()
        .or_else(|| spec.data_dir.as_ref().map(PathBuf::from));
    let (train, test) = match kind.unwrap() {
        DatasetKind::Mnist => {
            let dir = dir.ok_or("mnist requires --data-dir")?;
            let pair = |imgs: &str, lbls: &str| -> Result<Dataset, String> {
                let (i, l) = (dir.join(imgs), dir.join(lbls));
                for p in [&i, &l] {
                    if !p.exists() {
                        return err(format!("missing dataset file {}", p.display()));
                    }
                }
                read_idx(&i, &l).map_err(|e| e.to_string())
            };
            (
                pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
                pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
            )
        }
        DatasetKind::Cifar10 => {
            let dir = dir.ok_or("cifar10 requires --data-dir")?;
            let train_files: Vec<PathBuf> =
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            for p in train_files.iter().chain([&dir.join("test_batch.bin")]) {
                if !p.exists() {
                    return err(format!("missing dataset file {}", p.display()));
                }
            }
            (
                read_cifar10_bin(&train_files).map_err(|e| e.to_string())?,
                read_cifar10_bin(&[dir.join("test_batch.bin")]).map_err(|e| e.to_string())?,
            )
        }
        DatasetKind::Synthetic => {
            let (h, w) = spec.model.image_size;
            let c = spec.model.channels;
            let k = spec.model.num_classes;
            let n_train = spec.train_examples.unwrap_or(512);
            let n_eval = spec.eval_examples.unwrap_or(128);
            let seed = args.seed.unwrap_or(spec.train.seed);
            (
                synthetic_dataset(k, n_train, h, w, c, seed),
                synthetic_dataset(k, n_eval, h, w, c, seed ^ 0x00e7a1),
            )
        }
    };
    let (h, w, c) = train.image_dims();
    if (h, w) != spec.model.image_size || c != spec.model.channels {
        return err(format!(
            "dataset geometry {h}x{w}x{c} does not match model config {:?}x{}",
            spec.model.image_size, spec.model.channels
        ));
    }
    if train.class_count != spec.model.num_classes {
        return err(format!(
            "dataset has {} classes, model config expects {}",
            train.class_count, spec.model.num_classes
        ));
    }
    Ok((
        value_range(train).map_err(|e| e.to_string())?,
        value_range(test).map_err(|e| e.to_string())?,
    ))
}

fn effective_train_cfg(spec: &RunSpec, args: &RunArgs) -> TrainConfig {
    let mut t = spec.train.clone();
    if let Some(seed) = args.seed {
        t.seed = seed;
    }
    t
}

fn run_one(
    model: &ModelConfig,
    tcfg: &TrainConfig,
    precision: Precision,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<(TrainOutput, f64), String> {
    let dtype = match precision {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    };
    let params = init_params(model, tcfg.seed, dtype, tcfg.loss == crate::train::Loss::SigmoidXent);
    let out = train(model, tcfg, params, train_set, Some(eval_set)).map_err(|e| e.to_string())?;
    let acc = evaluate(&out.params, model, eval_set, tcfg.batch_size).map_err(|e| e.to_string())?;
    Ok((out, acc))
}

// ── CSV helpers ────────────────────────────────────────────────────────

/// Shortest round-trip float formatting keeps CSV output bitwise
/// reproducible.
fn fnum(v: f64) -> String {
    format!("{v}")
}

fn write_atomic(path: &Path, content: &str) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content).map_err(|e| e.to_string())?;
    std::fs::rename(&tmp, path).map_err(|e| e.to_string())
}

fn metrics_csv(metrics: &[MetricsRecord]) -> String {
    let groups: Vec<String> = metrics
        .first()
        .map(|m| m.grad_norms.keys().cloned().collect())
        .unwrap_or_default();
    let mut out = String::from("step,loss,learning_rate,eval_accuracy");
    for grp in &groups {
        out.push_str(&format!(",grad_norm_{grp}"));
    }
    out.push('\n');
    for m in metrics {
        out.push_str(&format!("{},{},{}", m.step, fnum(m.loss), fnum(m.learning_rate)));
        out.push(',');
        if let Some(acc) = m.eval_accuracy {
            out.push_str(&fnum(acc));
        }
        for grp in &groups {
            out.push(',');
            out.push_str(&fnum(m.grad_norms[grp]));
        }
        out.push('\n');
    }
    out
}

// ── commands ───────────────────────────────────────────────────────────

fn cmd_train(args: &RunArgs) -> CliResult {
    let spec = RunSpec::load(&args.spec)?;
    let (train_set, eval_set) = load_splits(&spec, args)?;
    let tcfg = effective_train_cfg(&spec, args);
    let (out, acc) = run_one(&spec.model, &tcfg, spec.precision, &train_set, &eval_set)?;
    write_atomic(&args.out.join("metrics.csv"), &metrics_csv(&out.metrics))?;
    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    checkpoint::save(&args.out.join("model.ckpt"), &spec.model, &out.params)
        .map_err(|e| e.to_string())?;
    println!("{}: final loss {}, eval accuracy {}", spec.name, fnum(out.metrics.last().unwrap().loss), fnum(acc));
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult {
    let spec = RunSpec::load(&args.run.spec)?;
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.run.out.join("model.ckpt"));
    let (model, params) = checkpoint::load(&ckpt_path).map_err(|e| e.to_string())?;
    let (_, eval_set) = load_splits(&spec, &args.run)?;
    let acc = evaluate(&params, &model, &eval_set, spec.train.batch_size).map_err(|e| e.to_string())?;
    write_atomic(
        &args.run.out.join("eval.csv"),
        &format!("examples,accuracy\n{},{}\n", eval_set.len(), fnum(acc)),
    )?;
    println!("eval accuracy {} over {} examples", fnum(acc), eval_set.len());
    Ok(())
}

struct SweepRun {
    name: String,
    model: ModelConfig,
}

fn placement_name(p: Placement) -> &'static str {
    match p {
        Placement::Pre => "pre",
        Placement::Post => "post",
        Placement::PrePost => "pre_post",
    }
}

fn stem_name(s: StemNorm) -> &'static str {
    match s {
        StemNorm::None => "none",
        StemNorm::Pre => "pre",
        StemNorm::Post => "post",
        StemNorm::PostPosemb => "post_posemb",
        StemNorm::Dpn => "dpn",
    }
}

fn kind_name(k: StemNormKind) -> &'static str {
    match k {
        StemNormKind::LayerNorm => "layer_norm",
        StemNormKind::AffineOnly => "affine_only",
        StemNormKind::RmsNorm => "rms_norm",
        StemNormKind::NormalizeOnly => "normalize_only",
    }
}

fn extra_name(e: BlockExtra) -> &'static str {
    match e {
        BlockExtra::None => "none",
        BlockExtra::Normformer => "normformer",
        BlockExtra::Subln => "subln",
    }
}

fn sweep_runs(base: &ModelConfig) -> Vec<SweepRun> {
    let mut runs = Vec::new();
    for (sa, mlp) in placement_grid() {
        let mut m = base.clone();
        m.stem_norm = StemNorm::None;
        m.block_sa_ln = sa;
        m.block_mlp_ln = mlp;
        m.block_extra = BlockExtra::None;
        runs.push(SweepRun {
            name: format!("sa_{}-mlp_{}", placement_name(sa), placement_name(mlp)),
            model: m,
        });
    }
    for (name, extra) in [("normformer", BlockExtra::Normformer), ("subln", BlockExtra::Subln)] {
        let mut m = base.clone();
        m.stem_norm = StemNorm::None;
        m.block_sa_ln = Placement::Pre;
        m.block_mlp_ln = Placement::Pre;
        m.block_extra = extra;
        runs.push(SweepRun { name: name.into(), model: m });
    }
    let mut m = base.clone();
    m.stem_norm = StemNorm::Dpn;
    m.block_sa_ln = Placement::Pre;
    m.block_mlp_ln = Placement::Pre;
    m.block_extra = BlockExtra::None;
    runs.push(SweepRun { name: "dpn_stem".into(), model: m });
    runs
}

fn run_suite(
    runs: Vec<SweepRun>,
    baseline: &str,
    args: &RunArgs,
    spec: &RunSpec,
    header_extra: &str,
    describe: impl Fn(&ModelConfig) -> String,
    csv_name: &str,
) -> CliResult {
    let (train_set, eval_set) = load_splits(spec, args)?;
    let tcfg = effective_train_cfg(spec, args);
    let mut rows: Vec<(String, String, Result<(f64, f64), String>)> = Vec::new();
    for run in &runs {
        let outcome = run_one(&run.model, &tcfg, spec.precision, &train_set, &eval_set);
        let outcome = outcome.map(|(out, acc)| {
            let _ = write_atomic(
                &args.out.join("runs").join(&run.name).join("metrics.csv"),
                &metrics_csv(&out.metrics),
            );
            (out.metrics.last().unwrap().loss, acc)
        });
        if let Err(e) = &outcome {
            eprintln!("{}: failed: {e}", run.name);
        }
        rows.push((run.name.clone(), describe(&run.model), outcome));
    }
    let base_acc = rows
        .iter()
        .find(|(n, _, _)| n == baseline)
        .and_then(|(_, _, r)| r.as_ref().ok().map(|&(_, a)| a));
    let mut csv = format!("name,{header_extra},final_loss,eval_accuracy,delta_vs_{baseline},status\n");
    for (name, desc, outcome) in &rows {
        match outcome {
            Ok((loss, acc)) => {
                let delta = base_acc.map(|b| fnum(acc - b)).unwrap_or_default();
                csv.push_str(&format!("{name},{desc},{},{},{delta},ok\n", fnum(*loss), fnum(*acc)));
            }
            Err(_) => csv.push_str(&format!("{name},{desc},,,,error\n")),
        }
    }
    write_atomic(&args.out.join(csv_name), &csv)?;
    println!("{} rows -> {}", rows.len(), args.out.join(csv_name).display());
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> CliResult {
    let spec = RunSpec::load(&args.spec)?;
    run_suite(
        sweep_runs(&spec.model),
        "sa_pre-mlp_pre",
        args,
        &spec,
        "stem_norm,sa_ln,mlp_ln,extra",
        |m| {
            format!(
                "{},{},{},{}",
                stem_name(m.stem_norm),
                placement_name(m.block_sa_ln),
                placement_name(m.block_mlp_ln),
                extra_name(m.block_extra)
            )
        },
        "sweep.csv",
    )
}

fn ablation_runs(base: &ModelConfig) -> Vec<SweepRun> {
    let stems: [(&str, StemNorm, StemNormKind); 8] = [
        ("none", StemNorm::None, StemNormKind::LayerNorm),
        ("pre", StemNorm::Pre, StemNormKind::LayerNorm),
        ("post", StemNorm::Post, StemNormKind::LayerNorm),
        ("post_posemb", StemNorm::PostPosemb, StemNormKind::LayerNorm),
        ("dpn", StemNorm::Dpn, StemNormKind::LayerNorm),
        ("only_learnable", StemNorm::Dpn, StemNormKind::AffineOnly),
        ("rmsnorm", StemNorm::Dpn, StemNormKind::RmsNorm),
        ("no_learnable", StemNorm::Dpn, StemNormKind::NormalizeOnly),
    ];
    stems
        .into_iter()
        .map(|(name, stem, kind)| {
            let mut m = base.clone();
            m.stem_norm = stem;
            m.stem_norm_kind = kind;
            m.block_sa_ln = Placement::Pre;
            m.block_mlp_ln = Placement::Pre;
            m.block_extra = BlockExtra::None;
            SweepRun { name: name.into(), model: m }
        })
        .collect()
}

fn cmd_ablate(args: &RunArgs) -> CliResult {
    let spec = RunSpec::load(&args.spec)?;
    run_suite(
        ablation_runs(&spec.model),
        "dpn",
        args,
        &spec,
        "stem_norm,stem_norm_kind",
        |m| format!("{},{}", stem_name(m.stem_norm), kind_name(m.stem_norm_kind)),
        "ablate.csv",
    )
}

fn cmd_grad_norms(args: &RunArgs) -> CliResult {
    let spec = RunSpec::load(&args.spec)?;
    let (train_set, eval_set) = load_splits(&spec, args)?;
    let tcfg = effective_train_cfg(&spec, args);
    let mut outputs: BTreeMap<&str, TrainOutput> = BTreeMap::new();
    for (name, stem) in [("none", StemNorm::None), ("dpn", StemNorm::Dpn)] {
        let mut m = spec.model.clone();
        m.stem_norm = stem;
        let (out, _) = run_one(&m, &tcfg, spec.precision, &train_set, &eval_set)?;
        outputs.insert(name, out);
    }

    // mean per-layer norms over the final 20% of steps; depth axis is at
    // block granularity plus stem and head
    let window = (tcfg.total_steps / 5).max(1);
    let mut depth_csv =
        String::from("run,layer,mean_grad_norm_final_20pct\n");
    let mut order: Vec<String> = vec!["stem".into()];
    order.extend((0..spec.model.depth).map(|b| format!("block{b}")));
    order.push("head".into());
    let mean_norm = |out: &TrainOutput, layer: &str| -> f64 {
        let tail = &out.metrics[out.metrics.len() - window..];
        tail.iter().map(|m| m.grad_norms[layer]).sum::<f64>() / window as f64
    };
    for (name, out) in &outputs {
        for layer in &order {
            depth_csv.push_str(&format!("{name},{layer},{}\n", fnum(mean_norm(out, layer))));
        }
    }
    write_atomic(&args.out.join("grad_norms_depth.csv"), &depth_csv)?;

    let mut series = String::from("step,stem_grad_norm_none,stem_grad_norm_dpn\n");
    let (a, b) = (&outputs["none"], &outputs["dpn"]);
    for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
        series.push_str(&format!(
            "{},{},{}\n",
            ma.step,
            fnum(ma.grad_norms["stem"]),
            fnum(mb.grad_norms["stem"])
        ));
    }
    write_atomic(&args.out.join("grad_norms_embedding.csv"), &series)?;

    let ratio = mean_norm(a, "stem") / mean_norm(b, "stem");
    println!("stem gradient-norm ratio none/dpn over final {window} steps: {}", fnum(ratio));
    Ok(())
}

fn cmd_export_scales(args: &ExportArgs) -> CliResult {
    let (model, params) = checkpoint::load(&args.checkpoint).map_err(|e| e.to_string())?;
    if !matches!(model.stem_norm, StemNorm::Pre | StemNorm::Dpn) {
        return err(format!(
            "checkpoint has stem_norm {:?}; exporting scales needs a norm over raw patches (pre or dpn)",
            model.stem_norm
        ));
    }
    let gamma = params
        .get("stem/ln0/gamma")
        .ok_or("checkpoint has no pixel-space scale parameters (stem/ln0/gamma)")?;
    let (p, c) = (model.patch_size, model.channels);
    assert_eq!(gamma.numel(), p * p * c);
    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;

    // patch flattening order is (row, col, channel)
    let at = |row: usize, col: usize, ch: usize| gamma.data()[(row * p + col) * c + ch];
    for ch in 0..c {
        let vals: Vec<f64> =
            (0..p * p).map(|i| at(i / p, i % p, ch)).collect();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
        // degenerate constant channel exports as all-zero
        let pixels: Vec<u8> = if hi > lo {
            vals.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
        } else {
            vec![0; p * p]
        };
        write_pgm(&args.out.join(format!("scales_ch{ch}.pgm")), p, p, &pixels)
            .map_err(|e| e.to_string())?;
    }

    let mut csv = String::from("row,col,channel,value\n");
    for row in 0..p {
        for col in 0..p {
            for ch in 0..c {
                csv.push_str(&format!("{row},{col},{ch},{}\n", fnum(at(row, col, ch))));
            }
        }
    }
    write_atomic(&args.out.join("scales.csv"), &csv)?;
    println!("{c} channel image(s) + scales.csv -> {}", args.out.display());
    Ok(())
}

fn cmd_grad_check(args: &GradCheckArgs) -> CliResult {
    let stems = [StemNorm::None, StemNorm::Pre, StemNorm::Post, StemNorm::PostPosemb, StemNorm::Dpn];
    let extras = [BlockExtra::None, BlockExtra::Normformer, BlockExtra::Subln];
    let mut csv = String::from("stem_norm,sa_ln,mlp_ln,extra,elements,max_rel_error,worst_param,status\n");
    let mut failures = 0;
    for stem in stems {
        for (sa, mlp) in placement_grid() {
            for extra in extras {
                let cfg = micro_config(stem, sa, mlp, extra);
                let report = model_grad_check(&cfg, 42, args.step).map_err(|e| e.to_string())?;
                let ok = report.passed(args.tolerance);
                if !ok {
                    failures += 1;
                    eprintln!(
                        "FAIL {stem:?}/{sa:?}/{mlp:?}/{extra:?}: max rel error {} at {} [{}]",
                        report.max_rel_error, report.worst.0, report.worst.1
                    );
                }
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    stem_name(stem),
                    placement_name(sa),
                    placement_name(mlp),
                    extra_name(extra),
                    report.elements,
                    fnum(report.max_rel_error),
                    report.worst.0,
                    if ok { "pass" } else { "fail" }
                ));
            }
        }
    }
    if let Some(out) = &args.out {
        write_atomic(&out.join("gradcheck.csv"), &csv)?;
    }
    let total = stems.len() * 9 * extras.len();
    println!("{}/{} configurations pass at tolerance {}", total - failures, total, args.tolerance);
    if failures > 0 {
        return err(format!("{failures} configurations failed the gradient check"));
    }
    Ok(())
}
