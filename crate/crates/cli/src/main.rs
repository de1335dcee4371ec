//! `vds`: every pipeline stage as a subcommand.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure (divergence, SVD non-convergence).

mod csv;
mod error;
mod svg;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use vds_core::knn::{knn_eval, sibling_rate, KnnConfig};
use vds_core::metrics;
use vds_core::neural_cluster::{
    read_module, train, transform_all, write_module, ClusterModuleParams, LossSupport, ModuleMeta,
    Optimizer, TrainConfig,
};
use vds_core::projection::pca_project;
use vds_core::repr_store::{gen_synthetic, read_bundle, write_bundle};
use vds_core::semantic_basis::{check_penrose, head_bases, pseudoinverse, DEFAULT_RCOND};
use vds_core::semantic_logits::{estimate_flops, exp_transform, to_probs, ClassScorer};
use vds_core::{LogitsMode, ReprBundle, SynthSpec};

use crate::csv::Report;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "vds",
    version,
    about = "Semantic bases, similarity logits and neural clustering over LM representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic representation bundle.
    Synth(SynthArgs),
    /// Compute semantic bases from a bundle's LM head and export them.
    Bases(BasesArgs),
    /// Baseline class prediction: accuracy, macro-F1, ARI.
    Eval(EvalArgs),
    /// Train the neural clustering module.
    Train(TrainArgs),
    /// k-nearest-neighbour accuracy and sibling rate.
    Knn(KnnArgs),
    /// Before/after report with PCA scatter plots.
    Report(ReportArgs),
    /// FLOPs of one logits computation.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    vocab: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Mix class bases through a random well-conditioned matrix.
    #[arg(long)]
    mix: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BasesArgs {
    /// VDSR bundle.
    #[arg(long = "in")]
    input: PathBuf,
    /// Raw little-endian f32 v x d matrix; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Singular values at or below rcond * sigma_max are treated as zero.
    #[arg(long, default_value_t = DEFAULT_RCOND)]
    rcond: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// VDSR bundle.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = LogitsMode::SimAll)]
    mode: LogitsMode,
    /// Softmax temperature for the reported true-class probability.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Apply a trained VDSM module to the representations first.
    #[arg(long)]
    use_module: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RCOND)]
    rcond: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// VDSR bundle.
    #[arg(long = "in")]
    input: PathBuf,
    /// Destination VDSM file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = LogitsMode::SimAll)]
    mode: LogitsMode,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = LossSupport::FullVocabulary)]
    loss_support: LossSupport,
    #[arg(long, default_value_t = Optimizer::Adam)]
    optimizer: Optimizer,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 10.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = DEFAULT_RCOND)]
    rcond: f64,
}

#[derive(Debug, Args)]
struct KnnArgs {
    /// VDSR bundle.
    #[arg(long = "in")]
    input: PathBuf,
    /// Neighbour count; repeat for several.
    #[arg(long = "k", default_values_t = [1, 16])]
    k: Vec<usize>,
    #[arg(long)]
    use_module: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// VDSR bundle.
    #[arg(long = "in")]
    input: PathBuf,
    /// Trained VDSM module for the "after" side.
    #[arg(long)]
    module: PathBuf,
    /// Receives report.csv, scatter_before.svg and scatter_after.svg.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long = "k", default_values_t = [1, 16])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Seed for the PCA start vectors.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_RCOND)]
    rcond: f64,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = LogitsMode::SimAll)]
    mode: LogitsMode,
    #[arg(long)]
    dim: u64,
    #[arg(long)]
    vocab: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Bases(a) => bases(&a),
        Command::Eval(a) => eval(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Knn(a) => knn(&a),
        Command::Report(a) => report(&a),
        Command::Flops(a) => {
            println!("{}", estimate_flops(a.mode, a.dim, a.vocab));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn emit(report: &Report) -> Result<(), CliError> {
    std::io::stdout()
        .write_all(report.to_csv().as_bytes())
        .map_err(CliError::io("<stdout>"))
}

fn load_bundle(path: &Path, report: &mut Report) -> Result<ReprBundle, CliError> {
    report.input(path)?;
    Ok(read_bundle(path)?)
}

fn load_module(
    path: &Path,
    bundle: &ReprBundle,
    report: &mut Report,
) -> Result<ClusterModuleParams, CliError> {
    report.input(path)?;
    let (params, meta) = read_module(path)?;
    if meta.d != bundle.d {
        return Err(CliError::Invalid(format!(
            "module has d = {}, bundle has d = {}",
            meta.d, bundle.d
        )));
    }
    Ok(params)
}

/// Train and test representations, passed through the module when given.
fn splits(
    bundle: &ReprBundle,
    module: Option<&ClusterModuleParams>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), CliError> {
    let (tr, te) = (
        bundle.train_reps.to_dmatrix(),
        bundle.test_reps.to_dmatrix(),
    );
    Ok(match module {
        Some(p) => (transform_all(p, &tr)?, transform_all(p, &te)?),
        None => (tr, te),
    })
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut report = Report::new("synth");
    let spec = SynthSpec {
        seed: a.seed,
        d: a.dim,
        v: a.vocab,
        n_classes: a.classes,
        n_train: a.train,
        n_test: a.test,
        noise_sigma: a.noise,
        mix: a.mix,
    };
    for (k, v) in [
        ("seed", a.seed.to_string()),
        ("dim", a.dim.to_string()),
        ("vocab", a.vocab.to_string()),
        ("classes", a.classes.to_string()),
        ("train", a.train.to_string()),
        ("test", a.test.to_string()),
        ("noise", a.noise.to_string()),
        ("mix", a.mix.to_string()),
        ("out", a.out.display().to_string()),
    ] {
        report.flag(k, v);
    }
    let bundle = gen_synthetic(&spec)?;
    write_bundle(&bundle, &a.out)?;
    report.input(&a.out)?;
    report.metric("synth", "", "n_train", bundle.n_train() as f64);
    report.metric("synth", "", "n_test", bundle.n_test() as f64);
    emit(&report)
}

fn bases(a: &BasesArgs) -> Result<(), CliError> {
    let mut report = Report::new("bases");
    report.flag("in", a.input.display());
    report.flag("out", a.out.display());
    report.flag("rcond", a.rcond);
    let bundle = load_bundle(&a.input, &mut report)?;
    let bases = head_bases(&bundle, a.rcond)?;
    bases.export(&a.out)?;

    let w = bundle.lm_head.to_dmatrix();
    let wp = pseudoinverse(&w, a.rcond)?;
    let penrose = check_penrose(&w, &wp, 1e-8)?;
    report.metric("bases", "", "vocab", bases.vocab_size() as f64);
    report.metric("bases", "", "dim", bases.dim() as f64);
    for (i, r) in penrose.residuals.iter().enumerate() {
        report.metric("bases", "", &format!("penrose_residual_{}", i + 1), *r);
    }
    emit(&report)
}

/// Accuracy, macro-F1, ARI and mean true-class probability on the test split.
fn class_metrics(
    report: &mut Report,
    stage: &str,
    scorer: &ClassScorer,
    bundle: &ReprBundle,
    reps: (&DMatrix<f64>, &DMatrix<f64>),
    mode: LogitsMode,
    tau: f64,
) -> Result<(), CliError> {
    let name = mode.name();
    let train_pred = scorer.predict_all(reps.0, mode)?;
    let test_pred = scorer.predict_all(reps.1, mode)?;
    let truth = &bundle.test_labels;
    report.metric(
        stage,
        name,
        "train_accuracy",
        metrics::accuracy(&train_pred, &bundle.train_labels)?,
    );
    report.metric(
        stage,
        name,
        "test_accuracy",
        metrics::accuracy(&test_pred, truth)?,
    );
    report.metric(
        stage,
        name,
        "test_macro_f1",
        metrics::macro_f1(&test_pred, truth, bundle.n_classes)?,
    );
    report.metric(stage, name, "test_ari", metrics::ari(&test_pred, truth)?);

    let mut prob = 0.0;
    for (i, &label) in truth.iter().enumerate() {
        let r: Vec<f64> = reps.1.row(i).iter().copied().collect();
        let mut scores = scorer.class_scores(&r, mode)?;
        if mode.is_exp() {
            scores = exp_transform(&scores);
        }
        prob += to_probs(&scores, tau).probs[label];
    }
    report.metric(
        stage,
        name,
        "test_true_class_prob",
        prob / truth.len() as f64,
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut report = Report::new("eval");
    report.flag("in", a.input.display());
    report.flag("mode", a.mode);
    report.flag("tau", a.tau);
    report.flag("rcond", a.rcond);
    if let Some(m) = &a.use_module {
        report.flag("use_module", m.display());
    }
    if a.mode == LogitsMode::SimGT {
        return Err(CliError::Invalid(
            "sim-gt needs ground-truth labels and cannot predict".into(),
        ));
    }
    if !(a.tau.is_finite() && a.tau > 0.0) {
        return Err(CliError::Invalid(format!(
            "tau must be positive, got {}",
            a.tau
        )));
    }
    let bundle = load_bundle(&a.input, &mut report)?;
    let module = a
        .use_module
        .as_deref()
        .map(|m| load_module(m, &bundle, &mut report))
        .transpose()?;
    let bases = head_bases(&bundle, a.rcond)?;
    let scorer = ClassScorer::new(&bundle, &bases)?;
    let (tr, te) = splits(&bundle, module.as_ref())?;
    let stage = if module.is_some() {
        "eval-module"
    } else {
        "eval"
    };
    class_metrics(
        &mut report,
        stage,
        &scorer,
        &bundle,
        (&tr, &te),
        a.mode,
        a.tau,
    )?;
    emit(&report)
}

fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let mut report = Report::new("train");
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        learning_rate: a.lr,
        mode: a.mode,
        tau: a.tau,
        loss_support: a.loss_support,
        optimizer: a.optimizer,
        clip_norm: a.clip_norm,
    };
    report.flag("in", a.input.display());
    report.flag("out", a.out.display());
    report.flag("epochs", a.epochs);
    report.flag("batch", a.batch);
    report.flag("seed", a.seed);
    report.flag("lr", a.lr);
    report.flag("mode", a.mode);
    report.flag("tau", a.tau);
    report.flag("loss_support", a.loss_support);
    report.flag("optimizer", a.optimizer);
    report.flag("clip_norm", a.clip_norm);
    report.flag("rcond", a.rcond);

    let bundle = load_bundle(&a.input, &mut report)?;
    let bases = head_bases(&bundle, a.rcond)?;
    let (params, result) = train(&bundle, &bases, &config)?;
    let meta = ModuleMeta {
        d: bundle.d,
        mode: a.mode,
        tau: a.tau,
        seed: a.seed,
        epochs: a.epochs,
    };
    write_module(&a.out, &params, &meta)?;
    eprintln!("train: wall time {:.3}s", result.wall_time.as_secs_f64());

    for (e, l) in result.epoch_losses.iter().enumerate() {
        report.push(
            "train",
            a.mode.name(),
            "",
            &format!("epoch_{}_loss", e + 1),
            l,
        );
    }
    for acc in &result.accuracy {
        report.metric("train", acc.mode.name(), "train_accuracy", acc.train);
        report.metric("train", acc.mode.name(), "test_accuracy", acc.test);
    }
    report.metric("train", "", "weight_count", result.weight_count as f64);
    report.metric("train", "", "param_count", result.param_count as f64);
    emit(&report)
}

fn knn_rows(
    report: &mut Report,
    stage: &str,
    bundle: &ReprBundle,
    tr: &DMatrix<f64>,
    te: &DMatrix<f64>,
    ks: &[usize],
) -> Result<(), CliError> {
    for &k in ks {
        let res = knn_eval(bundle, tr, te, KnnConfig::new(k))?;
        let ks = k.to_string();
        report.push(stage, "", &ks, "test_accuracy", res.accuracy);
        report.push(stage, "", &ks, "test_macro_f1", res.macro_f1);
        report.push(
            stage,
            "",
            &ks,
            "train_sibling_rate",
            sibling_rate(tr, &bundle.train_labels, k)?,
        );
    }
    Ok(())
}

fn knn(a: &KnnArgs) -> Result<(), CliError> {
    let mut report = Report::new("knn");
    report.flag("in", a.input.display());
    let ks: Vec<String> = a.k.iter().map(usize::to_string).collect();
    report.flag("k", ks.join(" "));
    if let Some(m) = &a.use_module {
        report.flag("use_module", m.display());
    }
    let bundle = load_bundle(&a.input, &mut report)?;
    let module = a
        .use_module
        .as_deref()
        .map(|m| load_module(m, &bundle, &mut report))
        .transpose()?;
    let (tr, te) = splits(&bundle, module.as_ref())?;
    let stage = if module.is_some() {
        "knn-post"
    } else {
        "knn-pre"
    };
    knn_rows(&mut report, stage, &bundle, &tr, &te, &a.k)?;
    emit(&report)
}

fn report(a: &ReportArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut report = Report::new("report");
    report.flag("in", a.input.display());
    report.flag("module", a.module.display());
    report.flag("out_dir", a.out_dir.display());
    let ks: Vec<String> = a.k.iter().map(usize::to_string).collect();
    report.flag("k", ks.join(" "));
    report.flag("tau", a.tau);
    report.flag("seed", a.seed);
    report.flag("rcond", a.rcond);

    let bundle = load_bundle(&a.input, &mut report)?;
    let module = load_module(&a.module, &bundle, &mut report)?;
    let bases = head_bases(&bundle, a.rcond)?;
    let scorer = ClassScorer::new(&bundle, &bases)?;
    std::fs::create_dir_all(&a.out_dir).map_err(CliError::io(&a.out_dir))?;

    for (side, module) in [("pre", None), ("post", Some(&module))] {
        let (tr, te) = splits(&bundle, module)?;
        for mode in LogitsMode::PREDICTIVE {
            class_metrics(
                &mut report,
                &format!("eval-{side}"),
                &scorer,
                &bundle,
                (&tr, &te),
                mode,
                a.tau,
            )?;
        }
        knn_rows(&mut report, &format!("knn-{side}"), &bundle, &tr, &te, &a.k)?;

        let points = pca_project(&te, 2, a.seed);
        let name = if side == "pre" {
            "scatter_before.svg"
        } else {
            "scatter_after.svg"
        };
        let title = if side == "pre" {
            "before clustering (test split, PCA)"
        } else {
            "after clustering (test split, PCA)"
        };
        let path = a.out_dir.join(name);
        std::fs::write(&path, svg::scatter(&points, &bundle.test_labels, title))
            .map_err(CliError::io(&path))?;
    }

    let csv_path = a.out_dir.join("report.csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(CliError::io(&csv_path))?;
    eprintln!("report: wall time {:.3}s", start.elapsed().as_secs_f64());
    emit(&report)
}
