//! End-to-end acceptance checks. Runs without the libtest harness so every
//! check prints one PASS/FAIL line; the process fails if any check fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use iris_gate::cascade::{assess, classify3, hierarchical_eval, HierLabel};
use iris_gate::detector::{
    heuristic_lighting, loss_and_grad, Detector, DetectorError, FeatureVector,
    HeuristicLightingConfig, LogisticModel, FEATURE_LEN,
};
use iris_gate::imaging::{
    encode_png, haar_dwt2, haar_idwt2, standardize, Normalization, PlaneTensor, PreprocessConfig,
    DEFAULT_SIDE,
};
use iris_gate::metrics::{binary_metrics, collapse_binary, BinaryConfusion, HierConfusion};
use iris_gate::protocol::{
    run_logistic_experiment, stratified_split, ExperimentConfig, ExperimentReport, Prediction,
    TrainingExample,
};
use iris_gate::synthgen::{GenConfig, HierCounts};
use iris_gate_cli::{router, AppState, LoadedDetector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::Value;
use tower::ServiceExt;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err(format!($($msg)+));
            }
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// Score is one tensor value; counts its calls.
struct Stub {
    channel: usize,
    threshold: f64,
    calls: AtomicUsize,
}

impl Stub {
    fn new(channel: usize, threshold: f64) -> Self {
        Self {
            channel,
            threshold,
            calls: AtomicUsize::new(0),
        }
    }
    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Detector for Stub {
    fn kind(&self) -> &'static str {
        "stub"
    }
    fn threshold(&self) -> f64 {
        self.threshold
    }
    fn score(&self, t: &PlaneTensor) -> Result<f64, DetectorError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(f64::from(t.at(self.channel, 0, 0)))
    }
}

fn scores(s1: f32, s2: f32) -> PlaneTensor {
    PlaneTensor::new(2, 1, 1, vec![s1, s2]).unwrap()
}

// Stub inputs that the cascade classifies as `label` at thresholds 0.5.
fn forcing(label: HierLabel) -> PlaneTensor {
    match label {
        HierLabel::NoEye => scores(0.2, 0.9),
        HierLabel::EyeBadLight => scores(0.8, 0.1),
        HierLabel::EyeGoodLight => scores(0.8, 0.9),
    }
}

fn metric_oracle() -> Check {
    let rows = [[99, 0, 1], [1, 73, 26], [0, 0, 100]];
    let h = HierConfusion::from_rows(rows);
    let cm = collapse_binary(&h);
    // good-light column and row against the rest, tallied by hand
    ensure!(
        cm == BinaryConfusion::new(100, 27, 173, 0),
        "collapsed to {cm:?}"
    );
    let r = binary_metrics(&cm).map_err(|e| e.to_string())?;
    let (acc, p4, custom) = (r.accuracy.unwrap(), r.p4.unwrap(), r.custom.unwrap());
    let (prec, specificity) = (100.0 / 127.0, 173.0 / 200.0);
    let p4_hand = 4.0 / (1.0 / prec + 1.0 + 1.0 / specificity + 1.0);
    let custom_hand = 2.0 / (1.0 / prec + 1.0 / specificity);
    ensure!(
        close(p4, p4_hand, 1e-12) && close(custom, custom_hand, 1e-12),
        "formula mismatch"
    );
    ensure!(close(acc, 0.91, 5e-4), "accuracy {acc}");
    ensure!(close(p4, 0.9037, 5e-4), "p4 {p4}");
    ensure!(close(custom, 0.8244, 5e-4), "custom {custom}");

    // replay the same matrix through the cascade with forcing stubs
    let mut samples = Vec::new();
    for (truth, row) in HierLabel::ALL.iter().zip(rows) {
        for (pred, n) in HierLabel::ALL.iter().zip(row) {
            for _ in 0..n {
                samples.push((forcing(*pred), *truth));
            }
        }
    }
    let eval = hierarchical_eval(&samples, &Stub::new(0, 0.5), &Stub::new(1, 0.5))
        .map_err(|e| e.to_string())?;
    ensure!(eval.confusion == h, "replay gave {:?}", eval.confusion);
    ensure!(eval.binary == r, "replay metrics differ");
    Ok(format!("accuracy {acc:.4}, P4 {p4:.4}, Custom {custom:.4}"))
}

fn split_oracle() -> Check {
    let pop: Vec<Prediction> = (0..5200)
        .map(|i| Prediction {
            id: format!("s{i}"),
            label: i < 3700,
            predicted: false,
        })
        .collect();
    let s = stratified_split(&pop, [8, 1, 1], 0).map_err(|e| e.to_string())?;
    let pos = |v: &[Prediction]| v.iter().filter(|p| p.label).count();
    let sizes = [s.train.len(), s.validation.len(), s.test.len()];
    let positives = [pos(&s.train), pos(&s.validation), pos(&s.test)];
    ensure!(sizes == [4160, 520, 520], "sizes {sizes:?}");
    ensure!(positives == [2960, 370, 370], "positives {positives:?}");
    Ok(format!("sizes {sizes:?}, positives {positives:?}"))
}

fn wavelet_invariants() -> Check {
    let side = DEFAULT_SIDE as usize;
    let worst = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let data: Vec<f32> = (0..3 * side * side)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let t = PlaneTensor::new(3, side, side, data).unwrap();
            let energy =
                |t: &PlaneTensor| t.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>();
            let e0 = energy(&t);
            let mut worst = (0.0f64, 0.0f64);
            for levels in [1, 2] {
                let c = haar_dwt2(&t, levels).unwrap();
                let back = haar_idwt2(&c, levels).unwrap();
                let rel = (energy(&c) - e0).abs() / e0;
                let diff = t
                    .data()
                    .iter()
                    .zip(back.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                worst = (worst.0.max(rel), worst.1.max(f64::from(diff)));
            }
            worst
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    ensure!(worst.0 <= 1e-5, "energy relative error {:.3e}", worst.0);
    ensure!(worst.1 <= 1e-5, "round trip error {:.3e}", worst.1);
    Ok(format!(
        "200 transforms, max energy error {:.2e}, max round trip error {:.2e}",
        worst.0, worst.1
    ))
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let base = LogisticModel::new(PreprocessConfig::raw());
    let model = |w: &[f64]| LogisticModel {
        weights: w.to_vec(),
        ..base.clone()
    };
    for _ in 0..100 {
        let w: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let mut f: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.gen_range(0.0..1.0)).collect();
        f[FEATURE_LEN - 1] = 1.0;
        let f = FeatureVector::from_vec(f);
        let y = rng.gen_bool(0.5);
        let (_, grad) = loss_and_grad(&model(&w), &f, y).map_err(|e| e.to_string())?;
        for i in 0..FEATURE_LEN {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[i] += h;
            down[i] -= h;
            let lu = loss_and_grad(&model(&up), &f, y).unwrap().0;
            let ld = loss_and_grad(&model(&down), &f, y).unwrap().0;
            let fd = (lu - ld) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    ensure!(worst <= 1e-5, "relative error {worst:.3e}");
    Ok(format!(
        "100 cases x {FEATURE_LEN} weights, max relative error {worst:.2e}"
    ))
}

struct Corpus {
    tier1: Vec<TrainingExample>,
    tier2: Vec<TrainingExample>,
    tier2_heuristic_accuracy: f64,
    seconds: f64,
}

fn tier1_config() -> ExperimentConfig {
    ExperimentConfig {
        preprocess: PreprocessConfig {
            normalization: Normalization::PerImage,
            ..PreprocessConfig::raw()
        },
        ..ExperimentConfig::default()
    }
}

fn tier2_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

// Low-noise regime: sensor noise well below the dark-image contrast.
const NOISE_STD: [f64; 2] = [0.0, 0.005];

fn gen_config(seed: u64, counts: [usize; 3]) -> GenConfig {
    GenConfig {
        noise_std: NOISE_STD,
        seed,
        counts: HierCounts {
            no_eye: counts[0],
            eye_bad_light: counts[1],
            eye_good_light: counts[2],
        },
        ..GenConfig::default()
    }
}

// Renders and featurizes in one pass so no image outlives its features.
fn featurize_corpus(
    g: &GenConfig,
    cfg: &ExperimentConfig,
    label: fn(HierLabel) -> bool,
) -> Vec<(TrainingExample, bool)> {
    let model = cfg.base_model();
    let heuristic = HeuristicLightingConfig::default();
    g.plan()
        .par_iter()
        .map(|s| {
            let t = standardize(&g.render(s).unwrap(), cfg.preprocess.target_side).unwrap();
            let truth = label(s.label);
            let rule = heuristic_lighting(&t, &heuristic).unwrap().label;
            let ex = TrainingExample {
                id: s.id.clone(),
                features: model.features(&t).unwrap(),
                label: truth,
            };
            (ex, rule == truth)
        })
        .collect()
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let started = Instant::now();
        let tier1 = featurize_corpus(
            &gen_config(101, [1500, 700, 3000]),
            &tier1_config(),
            HierLabel::eye_present,
        )
        .into_iter()
        .map(|r| r.0)
        .collect();
        let rows = featurize_corpus(&gen_config(102, [0, 1100, 3000]), &tier2_config(), |l| {
            l == HierLabel::EyeGoodLight
        });
        let hits = rows.iter().filter(|r| r.1).count();
        let tier2_heuristic_accuracy = hits as f64 / rows.len() as f64;
        Corpus {
            tier1,
            tier2: rows.into_iter().map(|r| r.0).collect(),
            tier2_heuristic_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

struct Trained {
    tier1: (ExperimentReport, LogisticModel),
    tier2: (ExperimentReport, LogisticModel),
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let c = corpus();
        Trained {
            tier1: run_logistic_experiment(&tier1_config(), &c.tier1).unwrap(),
            tier2: run_logistic_experiment(&tier2_config(), &c.tier2).unwrap(),
        }
    })
}

fn protocol_determinism() -> Check {
    let c = corpus();
    let cfg = tier2_config();
    let a = run_logistic_experiment(&cfg, &c.tier2)
        .map_err(|e| e.to_string())?
        .0
        .to_json();
    let b = run_logistic_experiment(&cfg, &c.tier2)
        .map_err(|e| e.to_string())?
        .0
        .to_json();
    ensure!(a == b, "reports differ");
    Ok(format!(
        "{} samples, identical {}-byte reports",
        c.tier2.len(),
        a.len()
    ))
}

fn end_to_end() -> Check {
    let c = corpus();
    let t = trained();
    let (s1, s2) = (&t.tier1.0.aggregate.accuracy, &t.tier2.0.aggregate.accuracy);
    let n1 = (c.tier1.len(), c.tier1.iter().filter(|e| e.label).count());
    let n2 = (c.tier2.len(), c.tier2.iter().filter(|e| e.label).count());
    ensure!(
        n1 == (5200, 3700) && n2 == (4100, 3000),
        "corpus sizes {n1:?} {n2:?}"
    );
    let detail = format!(
        "tier 1 {:.4} +/- {:.4}, tier 2 {:.4} +/- {:.4}, tier 2 heuristic {:.4}, corpus built in {:.0}s",
        s1.mean, s1.std, s2.mean, s2.std, c.tier2_heuristic_accuracy, c.seconds
    );
    ensure!(
        s1.mean >= 0.95 && s1.std <= 0.03,
        "tier 1 below target: {detail}"
    );
    ensure!(
        s2.mean >= 0.90 && s2.std <= 0.03,
        "tier 2 below target: {detail}"
    );
    ensure!(
        t.tier1.0.runs.len() == 5 && t.tier2.0.runs.len() == 5,
        "expected 5 runs"
    );
    Ok(detail)
}

fn cascade_contract() -> Check {
    // short circuit
    let (t1, t2) = (Stub::new(0, 0.5), Stub::new(1, 0.5));
    for s1 in [0.0, 0.2, 0.49] {
        assess(&scores(s1, 0.9), &t1, &t2).map_err(|e| e.to_string())?;
    }
    ensure!(
        t2.calls() == 0,
        "tier 2 ran {} times on tier 1 rejects",
        t2.calls()
    );
    assess(&scores(0.5, 0.9), &t1, &t2).map_err(|e| e.to_string())?;
    ensure!(t2.calls() == 1, "tier 2 not run on a tier 1 accept");

    // agreement on random score fields and thresholds
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let (th1, th2) = (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
        let (a, b) = (Stub::new(0, th1), Stub::new(1, th2));
        let t = scores(rng.gen(), rng.gen());
        let v = assess(&t, &a, &b).map_err(|e| e.to_string())?;
        let label = classify3(&t, &a, &b).map_err(|e| e.to_string())?;
        let (s1, s2) = (f64::from(t.at(0, 0, 0)), f64::from(t.at(1, 0, 0)));
        let expected = if s1 < th1 {
            HierLabel::NoEye
        } else if s2 < th2 {
            HierLabel::EyeBadLight
        } else {
            HierLabel::EyeGoodLight
        };
        ensure!(
            v.label() == label && label == expected,
            "case {case}: {label:?} vs {expected:?}"
        );
        ensure!(
            v.tier_scores.lighting.is_some() == (s1 >= th1),
            "case {case}: lighting score presence"
        );
    }

    // mass conservation
    let truths = [
        HierLabel::NoEye,
        HierLabel::EyeBadLight,
        HierLabel::EyeGoodLight,
    ];
    let samples: Vec<(PlaneTensor, HierLabel)> = (0..600)
        .map(|i| (scores(rng.gen(), rng.gen()), truths[i % 3]))
        .collect();
    let e = hierarchical_eval(&samples, &Stub::new(0, 0.4), &Stub::new(1, 0.6))
        .map_err(|e| e.to_string())?;
    ensure!(e.confusion.total() == 600, "total {}", e.confusion.total());
    for l in truths {
        ensure!(
            e.confusion.row_sum(l) == 200,
            "row {l} sums to {}",
            e.confusion.row_sum(l)
        );
    }
    Ok("short circuit, 1000 agreement cases, 600-sample mass conservation".into())
}

async fn post(state: Arc<AppState>, ct: &str, body: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::post("/assess")
        .header("content-type", ct)
        .body(Body::from(body))
        .unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

fn service_round_trip() -> Check {
    let t = trained();
    let state = Arc::new(
        AppState::new(
            LoadedDetector::logistic(t.tier1.1.clone(), None),
            LoadedDetector::logistic(t.tier2.1.clone(), None),
            DEFAULT_SIDE,
            10 * 1024 * 1024,
        )
        .map_err(|e| e.to_string())?,
    );
    // fresh seed, disjoint from the training corpora
    let g = gen_config(9001, [1, 1, 1]);
    let pngs: Vec<Vec<u8>> = g
        .plan()
        .iter()
        .map(|s| encode_png(&g.render(s).unwrap()).unwrap())
        .collect();
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let expected = [
        ("NO_EYE_DETECTED", "retake"),
        ("POOR_LIGHTING", "retake"),
        ("OK", "accept"),
    ];
    for (png, (code, decision)) in pngs.iter().zip(expected) {
        let (status, v) = rt.block_on(post(state.clone(), "image/png", png.clone()));
        ensure!(status == StatusCode::OK, "status {status}");
        ensure!(
            v["feedback_code"] == code && v["decision"] == decision,
            "expected {code}, got {v}"
        );
    }
    let (status, _) = rt.block_on(post(state, "image/png", b"\x89PNG garbage".to_vec()));
    ensure!(
        status == StatusCode::BAD_REQUEST,
        "malformed body gave {status}"
    );

    // the CLI reaches the same verdict from saved models
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (m1, m2, img) = (
        dir.path().join("t1.json"),
        dir.path().join("t2.json"),
        dir.path().join("pl.png"),
    );
    t.tier1.1.save(&m1).map_err(|e| e.to_string())?;
    t.tier2.1.save(&m2).map_err(|e| e.to_string())?;
    std::fs::write(&img, &pngs[2]).map_err(|e| e.to_string())?;
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_iris-gate"))
        .args([
            "assess",
            "--tier1",
            m1.to_str().unwrap(),
            "--tier2",
            m2.to_str().unwrap(),
            img.to_str().unwrap(),
        ])
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "cli assess failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    ensure!(v["decision"] == "accept", "cli verdict {v}");
    Ok("no eye, poor lighting, accept, 400 on malformed body, cli accept".into())
}

fn p4_symmetry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut compared = 0;
    for _ in 0..2000 {
        let cm = BinaryConfusion::new(
            rng.gen_range(0..50),
            rng.gen_range(0..50),
            rng.gen_range(0..50),
            rng.gen_range(0..50),
        );
        if cm.total() == 0 {
            continue;
        }
        let (a, b) = (
            binary_metrics(&cm).unwrap().p4,
            binary_metrics(&cm.swapped()).unwrap().p4,
        );
        match (a, b) {
            (Some(x), Some(y)) => ensure!(close(x, y, 1e-12), "{cm:?}: {x} vs {y}"),
            (None, None) => {}
            _ => return Err(format!("{cm:?}: definedness differs")),
        }
        compared += 1;
    }
    ensure!(compared >= 1000, "only {compared} matrices");
    let cm = BinaryConfusion::new(90, 10, 50, 50);
    let (a, b) = (
        binary_metrics(&cm).unwrap().custom.unwrap(),
        binary_metrics(&cm.swapped()).unwrap().custom.unwrap(),
    );
    // precision 0.9, specificity 5/6 against precision 0.5, specificity 9/14
    ensure!(
        close(a, 2.0 / (1.0 / 0.9 + 1.2), 1e-12) && close(b, 2.0 / (2.0 + 14.0 / 9.0), 1e-12),
        "custom {a} {b}"
    );
    ensure!((a - b).abs() > 0.1, "custom unexpectedly symmetric");
    Ok(format!(
        "{compared} matrices, custom {a:.4} vs swapped {b:.4}"
    ))
}

fn main() {
    let checks: [(&str, fn() -> Check); 9] = [
        (
            "metric oracle on the reference hierarchical confusion",
            metric_oracle,
        ),
        ("stratified split arithmetic", split_oracle),
        ("wavelet energy and round trip", wavelet_invariants),
        ("gradient against central differences", gradient_check),
        ("protocol determinism", protocol_determinism),
        ("end-to-end synthetic pipeline", end_to_end),
        ("cascade contract", cascade_contract),
        ("service round trip", service_round_trip),
        ("P4 class-swap symmetry", p4_symmetry),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        checks.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
