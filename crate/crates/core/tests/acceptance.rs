//! Acceptance suite, run with its own `main` so the report is always shown:
//! every check prints one line
//! `ACCEPTANCE <id> <name>: PASS|FAIL|INFO <details>` and the process fails
//! if any gating check fails. Pass substrings as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- a1 a4`.
//!
//! Checks 6 and 7 share one mixture model trained from `data/train`.

mod common;

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use jgrsc::coder::{code_residual, residual_thresholds, CoderParams};
use jgrsc::gmm_prior::{collect_residual_groups, train_gmm_report, GmmModel, ResidualTrainingSet};
use jgrsc::metrics::psnr;
use jgrsc::patch_groups::{gather_group, group_image, scatter_accumulate, GroupingParams};
use jgrsc::pgm::load_pgm;
use jgrsc::sensing::{generate_measurement_matrix, initial_estimate, sample_image};
use jgrsc::solver::{reconstruct, x_update, SolverConfig, SolverState, XSolver};
use jgrsc::Image;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use common::{random_image, random_spd, rng};

/// Training settings for the shared model: moderate sample count so the
/// suite stays within a few minutes on one core.
const TRAIN_SAMPLES: usize = 5_000;
const TRAIN_EM_ITERS: usize = 30;
const TRAIN_SEED: u64 = 2024;
const SENSING_SEED: u64 = 1;

fn report(id: &str, name: &str, pass: bool, details: String) {
    println!(
        "ACCEPTANCE {id} {name}: {} {details}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn cameraman() -> Image {
    load_pgm(&data_dir().join("test/cameraman.pgm")).expect("data/test/cameraman.pgm")
}

fn shared_model() -> &'static GmmModel {
    static MODEL: OnceLock<GmmModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = data_dir().join("train");
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .expect("data/train")
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().map_or(false, |e| e == "pgm"))
            .collect();
        files.sort();
        let images: Vec<Image> = files.iter().map(|p| load_pgm(p).unwrap()).collect();
        let start = Instant::now();
        let data = collect_residual_groups(&images, 8, 60, 40, TRAIN_SAMPLES, TRAIN_SEED).unwrap();
        let report = train_gmm_report(&data, 64, TRAIN_EM_ITERS, jgrsc::gmm_prior::DEFAULT_RIDGE, TRAIN_SEED).unwrap();
        println!(
            "(model: K=64 on {} groups from {} images, {} EM iterations, {:.0}s)",
            data.len(),
            images.len(),
            report.iterations,
            start.elapsed().as_secs_f64()
        );
        report.model
    })
}

/// Minimizes `f` on `[lo, hi]`: coarse grid, then golden-section search
/// around the best grid point.
fn grid_golden_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let steps = 400;
    let h = (hi - lo) / steps as f64;
    let mut best = lo;
    for i in 0..=steps {
        let x = lo + h * i as f64;
        if f(x) < f(best) {
            best = x;
        }
    }
    let (mut a, mut b) = ((best - h).max(lo), (best + h).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    while b - a > 1e-10 {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}

fn a1_prox_oracle() -> bool {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(1..=8);
        let cols = r.gen_range(1..=4);
        let q = DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0)).qr().q();
        let eig = DVector::from_fn(n, |_, _| 10f64.powf(r.gen_range(-2.0..3.0)));
        let params = CoderParams::new(r.gen_range(0.0..4.0), 1.0);
        let residual = DMatrix::from_fn(n, cols, |_, _| r.gen_range(-30.0..30.0));
        let codes = code_residual(&residual, &q, &eig, &params).unwrap();
        let t = residual_thresholds(&eig, &params);
        for c in 0..cols {
            let col = residual.column(c).into_owned();
            for i in 0..n {
                // Coordinate i of 1/2 |x - D a|^2 + sum_j t_j |a_j| with the
                // other coordinates at the coder's values.
                let objective = |v: f64| {
                    let mut a = codes.column(c).into_owned();
                    a[i] = v;
                    0.5 * (&col - &q * &a).norm_squared() + t[i] * v.abs()
                };
                let bound = col.norm() + 1.0;
                let best = grid_golden_min(objective, -bound, bound);
                worst = worst.max((best - codes[(i, c)]).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 60.0;
    report("1", "prox oracle", pass, format!("max |diff| {worst:.2e} over 1000 instances in {secs:.1}s (tol 1e-4)"));
    pass
}

fn a2_x_update_direct_solve() -> bool {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let (bw, bh) = (r.gen_range(1..=2), r.gen_range(1..=2));
        let (w, h) = (4 * bw, 4 * bh);
        let rate = r.gen_range(0.1..=1.0);
        let mu = r.gen_range(0.05..1.0);
        let mat = generate_measurement_matrix(4, rate, case).unwrap();
        let meas = sample_image(&random_image(w, h, case), &mat).unwrap();
        let n = w * h;
        // Dense A = Phi^T Phi assembled from unit images.
        let mut a = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = Image::zeros(w, h);
            e.pixels_mut()[k] = 1.0;
            let col = meas.adjoint_of(&meas.forward(&e).unwrap());
            a.set_column(k, &DVector::from_column_slice(col.pixels()));
        }
        let mut state = SolverState::initial(&meas);
        state.z = random_image(w, h, case + 100);
        state.b = random_image(w, h, case + 200).map(|v| v - 128.0);
        let aty = meas.adjoint_of(meas.blocks());
        let rhs = DVector::from_iterator(
            n,
            (0..n).map(|k| aty.pixels()[k] + mu * (state.z.pixels()[k] + state.b.pixels()[k])),
        );
        let direct = (a + DMatrix::identity(n, n) * mu).lu().solve(&rhs).unwrap();
        let cfg = SolverConfig {
            mu,
            inner_grad_steps: 1500,
            x_solver: XSolver::Gradient,
            ..SolverConfig::for_subrate(0.3)
        };
        let x = x_update(&state, &meas, &cfg).unwrap();
        let diff = x.pixels().iter().zip(direct.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-6 && secs < 60.0;
    report("2", "x-update vs direct solve", pass, format!("max |diff| {worst:.2e} over 50 instances in {secs:.1}s (tol 1e-6)"));
    pass
}

fn a3_em_monotone_and_recovers() -> bool {
    let start = Instant::now();
    let (n_groups, m, p) = (2000, 8, 4);
    let n = p * p;
    let mut r = rng(3);
    let covs = [random_spd(n, 1.0, 10.0, &mut r), random_spd(n, 40.0, 400.0, &mut r)];
    let weights = [0.35, 0.65];
    let chols: Vec<DMatrix<f64>> = covs.iter().map(|c| c.clone().cholesky().unwrap().l()).collect();
    let groups: Vec<DMatrix<f64>> = (0..n_groups)
        .map(|_| {
            let k = usize::from(r.gen::<f64>() >= weights[0]);
            let z = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut r));
            &chols[k] * z
        })
        .collect();
    let data = ResidualTrainingSet::new(groups, p, m).unwrap();
    let rep = train_gmm_report(&data, 2, 200, 1e-6, 7).unwrap();

    let mut worst_drop = 0.0f64;
    for w in rep.log_likelihoods.windows(2) {
        worst_drop = worst_drop.max((w[0] - w[1]) / w[0].abs().max(1.0));
    }
    let monotone = worst_drop <= 1e-9;

    // Match learned components to the truth by covariance trace.
    let mut learned: Vec<_> = rep.model.components().iter().collect();
    learned.sort_by(|a, b| a.covariance.trace().total_cmp(&b.covariance.trace()));
    let mut weight_err = 0.0f64;
    let mut cov_err = 0.0f64;
    for (k, c) in learned.iter().enumerate() {
        weight_err = weight_err.max((c.weight - weights[k]).abs());
        cov_err = cov_err.max((&c.covariance - &covs[k]).norm() / covs[k].norm());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = monotone && weight_err <= 0.05 && cov_err <= 0.15 && secs < 300.0;
    report(
        "3",
        "EM monotone + recovery",
        pass,
        format!(
            "worst relative LL drop {worst_drop:.1e} (tol 1e-9), weight err {weight_err:.3} (tol 0.05), covariance err {:.1}% (tol 15%), {} iterations, {secs:.1}s",
            100.0 * cov_err,
            rep.iterations
        ),
    );
    pass
}

fn a4_aggregation_identity() -> bool {
    let params = GroupingParams::default();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let img = random_image(64, 64, 40 + seed);
        let groups = group_image(&img, &params)
            .unwrap()
            .iter()
            .map(|idx| gather_group(&img, idx).unwrap())
            .collect::<Vec<_>>();
        let agg = scatter_accumulate(&groups, 64, 64).unwrap();
        assert_eq!(agg.uncovered, 0);
        let err = agg.image.pixels().iter().zip(img.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    let pass = worst <= 1e-10;
    report("4", "aggregation identity", pass, format!("max |diff| {worst:.2e} over 10 images (tol 1e-10)"));
    pass
}

fn a5_full_sampling() -> bool {
    let img = cameraman();
    let model = shared_model();
    let mat = generate_measurement_matrix(32, 1.0, SENSING_SEED).unwrap();
    let meas = sample_image(&img, &mat).unwrap();
    let cfg = SolverConfig::for_subrate(1.0);
    let rec = reconstruct(&meas, model, &cfg, Some(&img)).unwrap();
    let p = psnr(&rec.image, &img).unwrap();
    let pass = p >= 100.0;
    report("5", "full sampling", pass, format!("PSNR {p:.2} dB after {} iterations (need >= 100)", rec.trace.len()));
    pass
}

struct EndToEnd {
    initial: f64,
    last: f64,
    spread: f64,
    iterations: usize,
    seconds: f64,
}

fn end_to_end(img: &Image, subrate: f64) -> EndToEnd {
    let model = shared_model();
    let mat = generate_measurement_matrix(32, subrate, SENSING_SEED).unwrap();
    let meas = sample_image(img, &mat).unwrap();
    let cfg = SolverConfig::for_subrate(subrate);
    let start = Instant::now();
    let rec = reconstruct(&meas, model, &cfg, Some(img)).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let trace: Vec<f64> = rec.trace.iter().map(|t| t.psnr.unwrap()).collect();
    let tail = &trace[trace.len().saturating_sub(10)..];
    let spread = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let initial = psnr(&meas.crop_to_original(&initial_estimate(&meas)).clamped(0.0, 255.0), img).unwrap();
    EndToEnd {
        initial,
        last: psnr(&rec.image, img).unwrap(),
        spread,
        iterations: trace.len(),
        seconds,
    }
}

fn a6_desk_scale_end_to_end() -> bool {
    let img = cameraman().center_crop(128, 128);
    let e = end_to_end(&img, 0.3);
    let gain = e.last - e.initial;
    let pass = gain >= 4.0 && e.spread < 0.1;
    report(
        "6",
        "desk-scale end to end",
        pass,
        format!(
            "initial {:.2} dB -> final {:.2} dB (gain {gain:.2}, need >= 4), last-10 spread {:.3} dB (need < 0.1), {} iterations, {:.0}s",
            e.initial, e.last, e.spread, e.iterations, e.seconds
        ),
    );
    pass
}

/// Reported only; reproducing the published figure is not gating.
fn a7_published_figure_stretch() -> bool {
    let img = cameraman();
    let e = end_to_end(&img, 0.3);
    let within = (e.last - 29.54).abs() <= 1.0;
    println!(
        "ACCEPTANCE 7 published-figure stretch (non-gating): INFO Cameraman 256x256 @ 0.3: {:.2} dB vs 29.54 +/- 1.0 ({}) in {:.0}s; House @ 0.2 skipped (image not in data/)",
        e.last,
        if within { "within" } else { "outside" },
        e.seconds
    );
    true
}

fn a8_determinism() -> bool {
    let dir = tempfile::TempDir::new().unwrap();
    let d = dir.path();
    let img = cameraman().center_crop(64, 64);
    jgrsc::pgm::save_pgm(&img, &d.join("in.pgm")).unwrap();
    jgrsc::gmm_prior::save_model(shared_model(), &d.join("m.jgmm")).unwrap();
    std::fs::write(d.join("run.cfg"), "max_iter = 8\n").unwrap();
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();
    let run = |tag: &str| {
        let code = jgrsc::cli::main_with_args([
            "jgrsc".to_string(), "sample".into(), "--image".into(), s("in.pgm"), "--subrate".into(), "0.3".into(),
            "--seed".into(), "5".into(), "--out".into(), s(&format!("{tag}.jcsm")),
        ]);
        assert_eq!(code, 0);
        let code = jgrsc::cli::main_with_args([
            "jgrsc".to_string(), "reconstruct".into(), "--meas".into(), s(&format!("{tag}.jcsm")),
            "--model".into(), s("m.jgmm"), "--config".into(), s("run.cfg"),
            "--out".into(), s(&format!("{tag}.pgm")), "--reference".into(), s("in.pgm"),
            "--trace".into(), s(&format!("{tag}.csv")),
        ]);
        assert_eq!(code, 0);
        (
            std::fs::read(d.join(format!("{tag}.pgm"))).unwrap(),
            std::fs::read(d.join(format!("{tag}.csv"))).unwrap(),
        )
    };
    let (img_a, trace_a) = run("a");
    let (img_b, trace_b) = run("b");
    let pass = img_a == img_b && trace_a == trace_b;
    report("8", "determinism", pass, format!("images identical: {}, traces identical: {}", img_a == img_b, trace_a == trace_b));
    pass
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, fn() -> bool); 8] = [
        ("a1_prox_oracle", a1_prox_oracle),
        ("a2_x_update_direct_solve", a2_x_update_direct_solve),
        ("a3_em_monotone_and_recovers", a3_em_monotone_and_recovers),
        ("a4_aggregation_identity", a4_aggregation_identity),
        ("a5_full_sampling", a5_full_sampling),
        ("a6_desk_scale_end_to_end", a6_desk_scale_end_to_end),
        ("a7_published_figure_stretch", a7_published_figure_stretch),
        ("a8_determinism", a8_determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let ok = std::panic::catch_unwind(check).unwrap_or_else(|_| {
            println!("ACCEPTANCE {name}: FAIL (panicked)");
            false
        });
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all gating checks passed");
    } else {
        println!("acceptance: FAILED {failed:?}");
        std::process::exit(1);
    }
}
