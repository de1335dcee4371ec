//! Acceptance criteria P1-P10, run in order with one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines are always printed and the
//! timed criteria do not compete with other tests for the CPU.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vds_core::knn::{knn_eval, knn_predict, KnnConfig};
use vds_core::metrics::{accuracy, ari, macro_f1};
use vds_core::neural_cluster::{
    finite_difference_check, random_instance, train, transform_all, ClusterModuleParams,
    LossSupport, Objective, TrainConfig, TrainReport,
};
use vds_core::repr_store::{decode_bundle, encode_bundle, gen_synthetic, synthetic_class_means};
use vds_core::semantic_basis::{
    bases_from_head, check_penrose, head_bases, pseudoinverse, DEFAULT_RCOND,
};
use vds_core::semantic_logits::{argmax, estimate_flops, exp_transform, sim_logits, ClassScorer};
use vds_core::{LogitsMode, ReprBundle, SemanticBases, SynthSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// Shared fixture state --------------------------------------------------------

struct Trained {
    params: ClusterModuleParams,
    report: TrainReport,
    elapsed: Duration,
}

struct Fixture {
    bundle: ReprBundle,
    bases: SemanticBases,
    scorer: ClassScorer,
    setup: Duration,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let bundle = gen_synthetic(&SynthSpec::acceptance_fixture()).unwrap();
        let bases = head_bases(&bundle, DEFAULT_RCOND).unwrap();
        let scorer = ClassScorer::new(&bundle, &bases).unwrap();
        Fixture {
            bundle,
            bases,
            scorer,
            setup: start.elapsed(),
        }
    })
}

/// The fixture trained with the default configuration and the given loss mode.
fn trained(mode: LogitsMode) -> &'static Trained {
    static CELLS: [OnceLock<Trained>; 5] = [const { OnceLock::new() }; 5];
    let slot = match mode {
        LogitsMode::SimAll => 0,
        LogitsMode::MatMul => 1,
        LogitsMode::SimGT => 2,
        LogitsMode::SimAllExp => 3,
        LogitsMode::MatMulExp => 4,
    };
    CELLS[slot].get_or_init(|| {
        let fx = fixture();
        let start = Instant::now();
        let config = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        let (params, report) = train(&fx.bundle, &fx.bases, &config).unwrap();
        Trained {
            params,
            report,
            elapsed: start.elapsed(),
        }
    })
}

/// Test-split predictions in `mode`, after the module when given.
fn test_predictions(module: Option<&ClusterModuleParams>, mode: LogitsMode) -> Vec<usize> {
    let fx = fixture();
    let reps = fx.bundle.test_reps.to_dmatrix();
    let reps = match module {
        Some(p) => transform_all(p, &reps).unwrap(),
        None => reps,
    };
    fx.scorer.predict_all(&reps, mode).unwrap()
}

// P1 --------------------------------------------------------------------------

fn p1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut deficient = 0;
    for i in 0..50 {
        let rows = rng.random_range(1..=64);
        let cols = rng.random_range(1..=256);
        let w = if i % 3 == 0 && rows.min(cols) > 1 {
            deficient += 1;
            let rank = rng.random_range(1..rows.min(cols));
            gaussian(&mut rng, rows, rank) * gaussian(&mut rng, rank, cols)
        } else {
            gaussian(&mut rng, rows, cols)
        };
        let wp = pseudoinverse(&w, DEFAULT_RCOND).unwrap();
        worst = worst.max(check_penrose(&w, &wp, 1e-8).unwrap().max_residual());
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst < 1e-8 && elapsed < Duration::from_secs(5),
        format!(
            "max Penrose residual {worst:.2e} over 50 matrices ({deficient} rank-deficient) in {}",
            secs(elapsed)
        ),
    )
}

// P2 --------------------------------------------------------------------------

fn p2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let w = gaussian(&mut rng, 32, 128);
    let bases = bases_from_head(&w, DEFAULT_RCOND).unwrap();
    let residual = |s: &DMatrix<f64>, i: usize| {
        let mut r = s * &w;
        r[(0, i)] -= 1.0;
        r.norm()
    };
    let mut worst_drop = f64::NEG_INFINITY;
    for i in 0..128 {
        let s = DMatrix::from_row_slice(1, 32, &bases.row(i));
        let base = residual(&s, i);
        for _ in 0..100 {
            let dir = gaussian(&mut rng, 1, 32);
            let delta = &dir / dir.norm() * 1e-3;
            worst_drop = worst_drop.max(base - residual(&(&s + delta), i));
        }
    }
    Outcome::new(
        worst_drop <= 1e-9,
        format!(
            "largest residual decrease under 12800 perturbations of norm 1e-3: {worst_drop:.2e}"
        ),
    )
}

// P3 --------------------------------------------------------------------------

fn p3() -> Outcome {
    let got = [LogitsMode::SimAll, LogitsMode::MatMul, LogitsMode::SimGT]
        .map(|m| estimate_flops(m, 4096, 128256));
    Outcome::new(
        got == [3_152_019_456, 1_050_673_152, 24_576],
        format!("sim-all/mat-mul/sim-gt = {got:?}"),
    )
}

// P4 --------------------------------------------------------------------------

fn p4() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..20u64 {
        let inst = random_instance(32, 4, 4000 + seed).unwrap();
        for mode in LogitsMode::ALL {
            let obj = Objective::new(
                &inst.bundle,
                &inst.bases,
                mode,
                10.0,
                LossSupport::FullVocabulary,
            )
            .unwrap();
            let r = finite_difference_check(&inst.params, &inst.reps, &inst.labels, &obj, 1e-5)
                .unwrap();
            worst = worst.max(r.max_rel_error());
            checked += r.entries;
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max relative error {worst:.2e} over {checked} entries (5 modes x 20 seeds) in {}",
            secs(elapsed)
        ),
    )
}

// P5 --------------------------------------------------------------------------

/// Accuracy of the nearest true class centre on fresh draws from the
/// generator: the best any classifier can do on this data.
fn bayes_accuracy(spec: &SynthSpec, draws: usize) -> f64 {
    let centres = synthetic_class_means(spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xB4E5);
    let mut hits = 0;
    for _ in 0..draws {
        let c = rng.random_range(0..spec.n_classes);
        let x: Vec<f64> = (0..spec.d)
            .map(|j| centres[(c, j)] + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let nearest = (0..spec.n_classes)
            .map(|k| {
                (
                    centres
                        .row(k)
                        .iter()
                        .zip(&x)
                        .map(|(m, v)| (m - v).powi(2))
                        .sum::<f64>(),
                    k,
                )
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        hits += usize::from(nearest == c);
    }
    hits as f64 / draws as f64
}

fn p5() -> Outcome {
    let fx = fixture();
    let truth = &fx.bundle.test_labels;
    let baseline_pred = test_predictions(None, LogitsMode::SimAll);
    let baseline = accuracy(&baseline_pred, truth).unwrap();
    let pre_ari = ari(&baseline_pred, truth).unwrap();

    let t = trained(LogitsMode::SimAll);
    let post_pred = test_predictions(Some(&t.params), LogitsMode::SimAll);
    let post = accuracy(&post_pred, truth).unwrap();
    let post_ari = ari(&post_pred, truth).unwrap();
    let losses = &t.report.epoch_losses;
    let runtime = fx.setup + t.elapsed;

    let checks = [
        ("baseline <= 0.60", baseline <= 0.60),
        ("post >= 0.95", post >= 0.95),
        ("post ARI >= 0.90", post_ari >= 0.90),
        ("post ARI > pre ARI", post_ari > pre_ari),
        ("runtime < 180s", runtime < Duration::from_secs(180)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome::new(
        failed.is_empty(),
        format!(
            "baseline {baseline:.3}, post {post:.3}, ARI {pre_ari:.3} -> {post_ari:.3}, loss {:.3} -> {:.3}, {}; \
             Bayes-optimal accuracy on this generator {:.3} (nearest true centre, 200000 draws); failed: {failed:?}",
            losses[0],
            losses[losses.len() - 1],
            secs(runtime),
            bayes_accuracy(&SynthSpec::acceptance_fixture(), 200_000),
        ),
    )
}

// P6 --------------------------------------------------------------------------

fn brute_force_knn(query: &[f64], refs: &DMatrix<f64>, labels: &[usize], k: usize) -> usize {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let q = unit(query.to_vec());
    let mut all: Vec<(f64, usize)> = (0..refs.nrows())
        .map(|i| {
            let r = unit(refs.row(i).iter().copied().collect());
            (
                1.0 - r
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .clamp(-1.0, 1.0),
                i,
            )
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut tally: Vec<(usize, f64, usize)> = Vec::new();
    for &(d, i) in &all[..k] {
        match tally.iter_mut().find(|t| t.2 == labels[i]) {
            Some(t) => {
                t.0 += 1;
                t.1 += d;
            }
            None => tally.push((1, d, labels[i])),
        }
    }
    tally.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then((a.1 / a.0 as f64).total_cmp(&(b.1 / b.0 as f64)))
            .then(a.2.cmp(&b.2))
    });
    tally[0].2
}

fn p6() -> Outcome {
    let fx = fixture();
    let t = trained(LogitsMode::SimAll);
    let (tr, te) = (
        fx.bundle.train_reps.to_dmatrix(),
        fx.bundle.test_reps.to_dmatrix(),
    );
    let (tr_post, te_post) = (
        transform_all(&t.params, &tr).unwrap(),
        transform_all(&t.params, &te).unwrap(),
    );

    let mut lift_ok = true;
    let mut parts = Vec::new();
    for k in [1, 16] {
        let pre = knn_eval(&fx.bundle, &tr, &te, KnnConfig::new(k))
            .unwrap()
            .accuracy;
        let post = knn_eval(&fx.bundle, &tr_post, &te_post, KnnConfig::new(k))
            .unwrap()
            .accuracy;
        lift_ok &= post - pre >= 0.05;
        parts.push(format!("k={k}: {pre:.3} -> {post:.3} ({:+.3})", post - pre));
    }

    // 500 queries: the test split before and after the module, plus random directions.
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let labels = &fx.bundle.train_labels;
    let mut agree = 0;
    for q in 0..500 {
        let k = [1, 16][q % 2];
        let (query, refs): (Vec<f64>, &DMatrix<f64>) = match q {
            0..200 => (te.row(q).iter().copied().collect(), &tr),
            200..400 => (te_post.row(q - 200).iter().copied().collect(), &tr_post),
            _ => (
                (0..fx.bundle.d)
                    .map(|_| rng.sample(StandardNormal))
                    .collect(),
                &tr,
            ),
        };
        agree += usize::from(
            knn_predict(&query, refs, labels, KnnConfig::new(k)).unwrap()
                == brute_force_knn(&query, refs, labels, k),
        );
    }
    parts.push(format!("brute-force agreement {agree}/500"));
    Outcome::new(lift_ok && agree == 500, parts.join(", "))
}

// P7 --------------------------------------------------------------------------

fn p7() -> Outcome {
    let truth = &fixture().bundle.test_labels;
    let acc = |mode| accuracy(&test_predictions(Some(&trained(mode).params), mode), truth).unwrap();
    let sim = acc(LogitsMode::SimAll);
    let mm = acc(LogitsMode::MatMul);
    let sim_exp = acc(LogitsMode::SimAllExp);
    let mm_exp = acc(LogitsMode::MatMulExp);
    let checks = [
        ("|sim-all - mat-mul| <= 0.02", (sim - mm).abs() <= 0.02),
        (
            "|sim-all-exp - sim-all| <= 0.02",
            (sim_exp - sim).abs() <= 0.02,
        ),
        ("mat-mul-exp <= mat-mul + 0.02", mm_exp <= mm + 0.02),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome::new(
        failed.is_empty(),
        format!(
            "test accuracy per trained mode: sim-all {sim:.3}, mat-mul {mm:.3}, sim-all-exp {sim_exp:.3}, \
             mat-mul-exp {mm_exp:.3}; failed: {failed:?}"
        ),
    )
}

// P8 --------------------------------------------------------------------------

fn p8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut exp_ok = 0;
    for _ in 0..1000 {
        let len = rng.random_range(2..300);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let z: Vec<f64> = (0..len)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        exp_ok += usize::from(argmax(&exp_transform(&z)) == argmax(&z));
    }

    let bases = bases_from_head(&gaussian(&mut rng, 32, 96), DEFAULT_RCOND).unwrap();
    let mut scale_ok = 0;
    for _ in 0..1000 {
        let r: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        let alpha = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = r.iter().map(|x| alpha * x).collect();
        scale_ok += usize::from(
            argmax(&sim_logits(&r, &bases).unwrap())
                == argmax(&sim_logits(&scaled, &bases).unwrap()),
        );
    }
    Outcome::new(
        exp_ok == 1000 && scale_ok == 1000,
        format!("exp argmax preserved {exp_ok}/1000, rescaling argmax preserved {scale_ok}/1000"),
    )
}

// P9 --------------------------------------------------------------------------

/// ARI from the four pair counts over all `n(n-1)/2` pairs.
fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let denom = (both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither);
    if denom == 0.0 {
        return if only_a == 0.0 && only_b == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    2.0 * (both * neither - only_a * only_b) / denom
}

fn p9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let (ka, kb) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        worst = worst.max((ari(&a, &b).unwrap() - ari_pairs(&a, &b)).abs());
    }
    let worked = ari(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
    let f1 = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    Outcome::new(
        worst <= 1e-12 && (worked - 4.0 / 7.0).abs() <= 1e-12 && (f1 - 11.0 / 15.0).abs() <= 1e-12,
        format!("contingency vs pair counting max diff {worst:.1e} (200 instances); ARI example {worked:.6}; macro-F1 example {f1:.6}"),
    )
}

// P10 -------------------------------------------------------------------------

fn vds(args: &[&str], cwd: &Path) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_vds"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "vds {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn p10() -> Outcome {
    let fx = fixture();
    let bytes = encode_bundle(&fx.bundle).unwrap();
    let back = decode_bundle(&bytes).unwrap();
    let round_trip = back.bit_eq(&fx.bundle) && encode_bundle(&back).unwrap() == bytes;

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let commands: [&[&str]; 8] = [
        &[
            "synth",
            "--seed",
            "42",
            "--dim",
            "64",
            "--vocab",
            "200",
            "--classes",
            "5",
            "--train",
            "1000",
            "--test",
            "200",
            "--noise",
            "0.1",
            "--mix",
            "--out",
            "fx.vdsr",
        ],
        &["bases", "--in", "fx.vdsr", "--out", "bases.f32"],
        &["eval", "--in", "fx.vdsr", "--mode", "sim-all"],
        &["train", "--in", "fx.vdsr", "--out", "m.vdsm"],
        &[
            "eval",
            "--in",
            "fx.vdsr",
            "--mode",
            "mat-mul",
            "--use-module",
            "m.vdsm",
        ],
        &[
            "knn",
            "--in",
            "fx.vdsr",
            "--k",
            "1",
            "--k",
            "16",
            "--use-module",
            "m.vdsm",
        ],
        &[
            "report",
            "--in",
            "fx.vdsr",
            "--module",
            "m.vdsm",
            "--out-dir",
            "rep",
        ],
        &[
            "flops", "--mode", "sim-all", "--dim", "4096", "--vocab", "128256",
        ],
    ];
    let files = [
        "fx.vdsr",
        "bases.f32",
        "bases.f32.json",
        "m.vdsm",
        "rep/report.csv",
        "rep/scatter_before.svg",
        "rep/scatter_after.svg",
    ];
    // Two independent runs of the same flags, each in its own directory.
    let mut mismatched = Vec::new();
    for cmd in commands {
        let a = vds(cmd, dirs[0].path());
        let b = vds(cmd, dirs[1].path());
        if a != b {
            mismatched.push(cmd[0].to_string());
        }
    }
    for f in files {
        if std::fs::read(dirs[0].path().join(f)).unwrap()
            != std::fs::read(dirs[1].path().join(f)).unwrap()
        {
            mismatched.push(f.to_string());
        }
    }

    let t = trained(LogitsMode::SimAll);
    let d = fx.bundle.d;
    let weights_ok =
        t.report.weight_count * 8 == 33 * d * d && t.params.weight_count() == t.report.weight_count;
    Outcome::new(
        round_trip && mismatched.is_empty() && weights_ok,
        format!(
            "VDSR round trip bit-exact: {round_trip}; 8 subcommands + 7 output files identical across runs (mismatches: {mismatched:?}); weights {} = 33/8 * {d}^2: {weights_ok}",
            t.report.weight_count
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("P1", p1),
        ("P2", p2),
        ("P3", p3),
        ("P4", p4),
        ("P5", p5),
        ("P6", p6),
        ("P7", p7),
        ("P8", p8),
        ("P9", p9),
        ("P10", p10),
    ];
    let mut failures = 0;
    for (id, run) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::new(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failures += usize::from(!outcome.pass);
        println!(
            "{id:<4} {}  {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    println!("acceptance: {} passed, {failures} failed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
