//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any fails.
//!
//! ```text
//! cargo test --test acceptance -- --nocapture
//! ```

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use denet::density::{generate_density_map, DensityGrid, DotAnnotation, KernelPolicy};
use denet::eval::{count_image, evaluate, CountReport, EvalItem, ZeroEstimator};
use denet::fusion::{apply_masks, filter_detections, mock_detect, pixel_of, Detection, DetectionSet, FusionConfig};
use denet::loss::{combined_loss, counting_loss, euclidean_loss, CountContext, LossConfig};
use denet::model::{crop_output, gradcheck_end_to_end, pad_to_multiple, DensityEstimator, EnetConfig, EnetModel};
use denet::synth::{generate, SynthConfig};
use denet::tensor::gradcheck::{op_suite, DEFAULT_STEP};
use denet::tensor::{Tape, Tensor};
use denet::train::{
    build_training_set, prepare_sample, train, TrainConfig, TrainState, CHECKPOINT_FILE, CURVE_FILE, OPTIMIZER_FILE, STATE_FILE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SEEDS: u64 = 10;
const GRAD_ENTRIES: usize = 50;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const COUNT_TOL: f64 = 1e-6;
const COUNT_BUDGET: Duration = Duration::from_secs(60);
const LOSS_TOL: f64 = 1e-12;
const OVERFIT_MAE_FRAC: f64 = 0.10;
const OVERFIT_LOSS_DROP: f64 = 100.0;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);

/// Outcome of one criterion: pass flag plus the observed numbers.
type Verdict = (bool, String);

type Criterion = Box<dyn FnOnce(&mut Option<Overfit>) -> Verdict>;

fn random_points(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Vec<(f64, f64)> {
    (0..n).map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64))).collect()
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let (mut op_worst, mut e2e_worst, mut reports) = (0.0f64, 0.0f64, 0usize);
    for seed in 0..GRAD_SEEDS {
        for r in op_suite(seed, DEFAULT_STEP).unwrap() {
            op_worst = op_worst.max(r.max_rel_err);
            reports += 1;
        }
        let r = gradcheck_end_to_end(&EnetConfig::default(), seed, GRAD_ENTRIES, DEFAULT_STEP).unwrap();
        assert_eq!(r.entries, GRAD_ENTRIES);
        e2e_worst = e2e_worst.max(r.max_rel_err);
    }
    let took = t.elapsed();
    (
        op_worst < OP_TOL && e2e_worst < E2E_TOL && took < GRAD_BUDGET,
        format!("{reports} op checks, ops max {op_worst:.2e}, end to end max {e2e_worst:.2e}, {GRAD_SEEDS} seeds, {took:.1?}"),
    )
}

fn count_preservation() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (w, h) = (rng.random_range(32..=256), rng.random_range(32..=256));
        let n = rng.random_range(0..=200);
        let ann = DotAnnotation::new(format!("a{i}"), w, h, random_points(&mut rng, n, w, h));
        let policy = if i % 2 == 0 { KernelPolicy::fixed(rng.random_range(0.5..8.0)) } else { KernelPolicy::adaptive() };
        let grid = generate_density_map(&ann, &policy).unwrap();
        assert!(grid.values.iter().all(|&v| v >= 0.0));
        worst = worst.max((grid.sum() - n as f64).abs());
    }
    let took = t.elapsed();
    (worst < COUNT_TOL && took < COUNT_BUDGET, format!("1000 annotations, max |sum - n| {worst:.2e}, {took:.1?}"))
}

fn shapes() -> Verdict {
    let model = EnetModel::build(EnetConfig::default(), 3).unwrap();
    let mut tried = 0;
    for h in [8, 16, 24, 40, 64] {
        for w in [8, 32, 48, 72] {
            let mut tape = Tape::new();
            let (out, _) = model.forward(&mut tape, &Tensor::zeros(&[3, h, w])).unwrap();
            assert_eq!(tape.value(out).shape(), &[1, h, w]);
            tried += 1;
        }
    }
    for (h, w) in [(1, 1), (13, 29), (65, 70), (31, 8), (100, 57)] {
        let image = Tensor::from_fn(&[3, h, w], |i| (i % 7) as f64 / 7.0);
        let (padded, record) = pad_to_multiple(&image, 8).unwrap();
        assert_eq!(padded.shape()[1] % 8, 0);
        assert_eq!(padded.shape()[2] % 8, 0);
        let mut tape = Tape::new();
        let (out, _) = model.forward(&mut tape, &padded).unwrap();
        assert_eq!(crop_output(tape.value(out), &record).unwrap().shape(), &[1, h, w]);
        assert_eq!(model.estimate(&image).unwrap().shape(), &[1, h, w]);
        tried += 1;
    }
    (true, format!("{tried} extents, output matches input"))
}

fn loss_oracle(pred: &[f64], gt: &[f64], n_gt: usize, n_d: usize, alpha: f64, floor: f64) -> (f64, f64, f64) {
    let mut se = 0.0;
    let mut n_e = 0.0;
    for i in 0..pred.len() {
        se += (pred[i] - gt[i]) * (pred[i] - gt[i]);
        n_e += pred[i];
    }
    let le = se / pred.len() as f64;
    let d = (n_gt as f64 - n_d as f64 + 1.0).abs().max(floor);
    let r = (n_gt as f64 - n_d as f64 - n_e) / d;
    (le, r * r, le + alpha * r * r)
}

fn tape_losses(pred: &[f64], gt: &DensityGrid, ctx: CountContext, cfg: &LossConfig) -> (f64, f64, f64) {
    let shape = vec![1, gt.height, gt.width];
    let v = |tape: &Tape, x| tape.value(x).data()[0];
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(shape.clone(), pred.to_vec()).unwrap());
    let le = euclidean_loss(&mut tape, p, gt).unwrap();
    let lc = counting_loss(&mut tape, p, &ctx, cfg);
    let (le, lc) = (v(&tape, le), v(&tape, lc));
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(shape, pred.to_vec()).unwrap());
    let total = combined_loss(&mut tape, p, gt, &ctx, cfg).unwrap().total;
    (le, lc, v(&tape, total))
}

fn losses() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut cases = Vec::new();
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..10), rng.random_range(1..10));
        let pred: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..0.6)).collect();
        let gt: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..0.6)).collect();
        let n_gt = rng.random_range(0..60);
        let n_d = rng.random_range(0..=n_gt + 2);
        let alpha = if rng.random_bool(0.5) { 0.1 } else { rng.random_range(0.0..2.0) };
        cases.push((w, h, pred, gt, n_gt, n_d, alpha));
    }
    // N_GT = 10, N_D = 4, N_E = 3 gives (3/7)^2, and L_E = 0.5 with the default weight.
    let r = 0.5f64.sqrt();
    cases.push((2, 2, vec![0.75; 4], vec![0.75 + r, 0.75 - r, 0.75 + r, 0.75 - r], 10, 4, 0.1));
    for (w, h, pred, gt, n_gt, n_d, alpha) in &cases {
        let cfg = LossConfig { alpha: *alpha, ..Default::default() };
        let grid = DensityGrid { width: *w, height: *h, values: gt.clone() };
        let got = tape_losses(pred, &grid, CountContext { n_gt: *n_gt, n_d: *n_d }, &cfg);
        let want = loss_oracle(pred, gt, *n_gt, *n_d, *alpha, cfg.denom_floor);
        worst = worst.max((got.0 - want.0).abs()).max((got.1 - want.1).abs()).max((got.2 - want.2).abs());
    }
    let last = cases.last().unwrap();
    let grid = DensityGrid { width: 2, height: 2, values: last.3.clone() };
    let (le, lc, total) = tape_losses(&last.2, &grid, CountContext { n_gt: 10, n_d: 4 }, &LossConfig::default());
    let pinned = (lc - 0.183673).abs() < 1e-6 && (le - 0.5).abs() < 1e-12 && (total - (0.5 + 0.1 * 9.0 / 49.0)).abs() < 1e-12;
    (worst <= LOSS_TOL && pinned, format!("{} cases, max abs diff {worst:.2e}, L_C {lc:.6}, L {total:.6}", cases.len()))
}

fn fusion() -> Verdict {
    let cfg = FusionConfig::default();
    let model = EnetModel::build(EnetConfig::tiny(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..500u64 {
        let (w, h) = (rng.random_range(32..128), rng.random_range(32..128));
        let n = rng.random_range(0..50);
        let ann = DotAnnotation::new(format!("f{i}"), w, h, random_points(&mut rng, n, w, h));
        let image = Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.01..1.0));

        let k = rng.random_range(0..8);
        let dets = (0..k)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                let (bw, bh) = (rng.random_range(1.0..12.0), rng.random_range(0.05..0.5) * h as f64);
                Detection {
                    bbox: [x - bw / 2.0, y - bh / 2.0, x + bw / 2.0, y + bh / 2.0],
                    score: rng.random_range(0.0..1.0),
                    label: "person".into(),
                    mask_rle: None,
                }
            })
            .collect();
        let raw = DetectionSet { image_id: ann.image_id.clone(), detections: dets };
        let kept = filter_detections(&raw, &cfg, (w, h)).unwrap();
        let s = apply_masks(&image, &ann, &kept, &cfg).unwrap();
        let inside = ann.points.iter().filter(|&&p| {
            let (x, y) = pixel_of(p, w, h);
            s.region_mask[y * w + x]
        });
        assert_eq!(s.residual.count() + inside.count(), n, "scene {i}");
        for c in 0..3 {
            for j in 0..w * h {
                let (a, b) = (image.data()[c * w * h + j], s.masked_image.data()[c * w * h + j]);
                assert_eq!(b, if s.region_mask[j] { 0.0 } else { a }, "scene {i}");
            }
        }

        let full = mock_detect(&ann, 1.0, (h / 4).max(8), i).unwrap();
        let item = EvalItem { image: image.clone(), annotation: ann.clone(), detections: Some(full.clone()) };
        let r = count_image(&ZeroEstimator, &item, &cfg).unwrap();
        assert_eq!(r.c, n as f64, "scene {i}");
        let s = apply_masks(&image, &ann, &filter_detections(&full, &cfg, (w, h)).unwrap(), &cfg).unwrap();
        assert_eq!(generate_density_map(&s.residual, &KernelPolicy::adaptive()).unwrap().sum(), 0.0);

        let none = EvalItem { detections: Some(mock_detect(&ann, 0.0, 8, i).unwrap()), ..item };
        let r = count_image(&model, &none, &cfg).unwrap();
        assert_eq!(r.n_d, 0);
        assert_eq!(r.c, r.n_e);
        assert_eq!(r.n_e, model.estimate(&image).unwrap().sum());
    }
    (true, "500 scenes: conservation, masking, recall 1 and recall 0 identities exact".into())
}

/// Model trained on the four overfit scenes, shared with the fusion ranking.
struct Overfit {
    model: EnetModel,
    items: Vec<EvalItem>,
}

fn overfit(slot: &mut Option<Overfit>) -> Verdict {
    let t = Instant::now();
    let kernel = KernelPolicy::adaptive();
    let fusion = FusionConfig::default();
    let scenes = generate(4, &SynthConfig::default(), 42).unwrap();
    let mut base = Vec::new();
    let mut items = Vec::new();
    for s in &scenes {
        let d = mock_detect(&s.annotation, 0.3, 8, 42).unwrap();
        base.push(prepare_sample(&s.image, &s.annotation, &d, &fusion, &kernel).unwrap());
        items.push(EvalItem { image: s.image.clone(), annotation: s.annotation.clone(), detections: Some(d) });
    }
    let samples = build_training_set(&base, &kernel, 42).unwrap();
    let mut model = EnetModel::build(EnetConfig::default(), 42).unwrap();
    let cfg = TrainConfig { epochs: 200, seed: 42, ..Default::default() };
    let mut state = TrainState::new(&model, &cfg);
    let curve = train(&mut model, &samples, &LossConfig::default(), &cfg, &mut state, None).unwrap();
    let first = curve[0].loss_total;
    let last: Vec<f64> = curve.iter().filter(|r| r.epoch == cfg.epochs - 1).map(|r| r.loss_total).collect();
    let final_loss = last.iter().sum::<f64>() / last.len() as f64;
    let drop = first / final_loss;
    let rep = evaluate(&model, &items, &fusion).unwrap();
    let frac = rep.mae / rep.mean_gt();
    let took = t.elapsed();
    *slot = Some(Overfit { model, items });
    (
        frac < OVERFIT_MAE_FRAC && drop >= OVERFIT_LOSS_DROP && took < OVERFIT_BUDGET,
        format!(
            "MAE {:.4} ({:.2}% of mean GT {:.2}), loss {first:.3e} -> {final_loss:.3e} ({drop:.0}x), {took:.0?}",
            rep.mae,
            100.0 * frac,
            rep.mean_gt()
        ),
    )
}

fn fusion_ranking(trained: Option<&Overfit>) -> Verdict {
    let Some(trained) = trained else {
        return (false, "no trained model".into());
    };
    let fusion = FusionConfig::default();
    let held: Vec<EvalItem> = generate(8, &SynthConfig::default(), 4242)
        .unwrap()
        .into_iter()
        .map(|s| EvalItem { image: s.image, annotation: s.annotation, detections: None })
        .collect();
    let mae_at = |items: &[EvalItem], recall: f64| {
        let with: Vec<EvalItem> = items
            .iter()
            .map(|it| EvalItem { detections: Some(mock_detect(&it.annotation, recall, 8, 7).unwrap()), ..it.clone() })
            .collect();
        evaluate(&trained.model, &with, &fusion).unwrap().mae
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, items) in [("training", &trained.items), ("held-out", &held)] {
        let (m0, m5) = (mae_at(items, 0.0), mae_at(items, 0.5));
        ok &= m5 <= m0;
        parts.push(format!("{name} MAE {m0:.3} at recall 0, {m5:.3} at recall 0.5"));
    }
    (ok, parts.join("; "))
}

fn run_once(out: &std::path::Path) -> CountReport {
    let kernel = KernelPolicy::adaptive();
    let fusion = FusionConfig::default();
    let scenes = generate(3, &SynthConfig { width: 32, height: 32, min_dots: 6, max_dots: 12, ..Default::default() }, 8).unwrap();
    let mut base = Vec::new();
    let mut items = Vec::new();
    for s in &scenes {
        let d = mock_detect(&s.annotation, 0.5, 8, 8).unwrap();
        base.push(prepare_sample(&s.image, &s.annotation, &d, &fusion, &kernel).unwrap());
        items.push(EvalItem { image: s.image.clone(), annotation: s.annotation.clone(), detections: Some(d) });
    }
    let samples = build_training_set(&base, &kernel, 8).unwrap();
    let cfg = TrainConfig { epochs: 3, seed: 8, ..Default::default() };
    let mut model = EnetModel::build(EnetConfig::default(), 8).unwrap();
    let mut state = TrainState::new(&model, &cfg);
    train(&mut model, &samples, &LossConfig::default(), &cfg, &mut state, Some(out)).unwrap();
    let rep = evaluate(&model, &items, &fusion).unwrap();
    rep.save(out).unwrap();
    rep
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run_once(a.path()), run_once(b.path()));
    let files = [CHECKPOINT_FILE, OPTIMIZER_FILE, STATE_FILE, CURVE_FILE, "report.json", "report.csv"];
    let differing: Vec<&str> =
        files.iter().copied().filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap()).collect();
    let same_report = ra == rb && ra.mae.to_bits() == rb.mae.to_bits();
    (
        differing.is_empty() && same_report,
        if differing.is_empty() { format!("{} files identical across two runs", files.len()) } else { format!("differing: {differing:?}") },
    )
}

fn formats() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let model = EnetModel::build(EnetConfig::default(), 9).unwrap();
    model.save(&ckpt).unwrap();
    let loaded = EnetModel::load(EnetConfig::default(), &ckpt).unwrap();
    let ckpt2 = dir.path().join("m2.ckpt");
    loaded.save(&ckpt2).unwrap();
    let ckpt_ok = loaded.params().iter().zip(model.params()).all(|((na, a), (nb, b))| {
        na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    }) && std::fs::read(&ckpt).unwrap() == std::fs::read(&ckpt2).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut values: Vec<f64> = (0..37 * 23).map(|_| rng.random_range(0.0..1.0) * 10f64.powi(rng.random_range(-300..3))).collect();
    values[0] = f64::MIN_POSITIVE / 3.0;
    values[1] = 0.0;
    let grid = DensityGrid { width: 37, height: 23, values };
    let path = dir.path().join("g.grid");
    grid.save(&path).unwrap();
    let back = DensityGrid::load(&path).unwrap();
    let grid_ok = (back.width, back.height) == (37, 23) && back.values.iter().zip(&grid.values).all(|(a, b)| a.to_bits() == b.to_bits());

    let bad_annotations = [
        (r#"{"image_id": "a", "width": 10, "height": 10}"#, "points"),
        (r#"{"image_id": "a", "width": 10, "height": 10, "points": [[1, 2]], "extra": 0}"#, "extra"),
        (r#"{"image_id": "a", "width": 10, "height": 10, "points": [[11, 2]]}"#, "points[0]"),
        (r#"{"image_id": "a", "width": "ten", "height": 10, "points": []}"#, "width"),
    ];
    let bad_detections = [
        (r#"{"image_id": "x", "detections": [{"box": [0, 0, 5, 5], "score": 0.9}]}"#, "label"),
        (r#"{"image_id": "x", "detections": [{"box": [0, 0, 5], "score": 0.9, "label": "person"}]}"#, "box"),
        (r#"{"image_id": "x", "detections": [{"box": [0, 0, 5, 5], "score": 0.9, "label": "person", "z": 1}]}"#, "z"),
    ];
    let mut schema_ok = true;
    for (text, field) in bad_annotations {
        schema_ok &= DotAnnotation::from_json(text).is_err_and(|e| e.contains(field));
    }
    for (text, field) in bad_detections {
        schema_ok &= DetectionSet::from_json(text).is_err_and(|e| e.contains(field));
    }
    let invalid = DetectionSet::from_json(r#"{"image_id": "x", "detections": [{"box": [0, 0, 5, 5], "score": 1.5, "label": "person"}]}"#)
        .unwrap()
        .validate(20, 20);
    schema_ok &= invalid.is_err_and(|e| e.to_string().contains("detections[0]") && e.to_string().contains("score"));
    (
        ckpt_ok && grid_ok && schema_ok,
        format!("checkpoint bit-exact {ckpt_ok}, grid bit-exact {grid_ok}, schema violations named {schema_ok}"),
    )
}

fn main() {
    let mut trained = None;
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient suite", Box::new(|_| gradients())),
        ("count preservation", Box::new(|_| count_preservation())),
        ("shape invariant", Box::new(|_| shapes())),
        ("loss oracles", Box::new(|_| losses())),
        ("fusion identities", Box::new(|_| fusion())),
        ("overfit regression", Box::new(overfit)),
        ("fusion ranking", Box::new(|t| fusion_ranking(t.as_ref()))),
        ("determinism", Box::new(|_| determinism())),
        ("format round trips", Box::new(|_| formats())),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(|| check(&mut trained))) {
            Ok(v) => v,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        failed += usize::from(!ok);
        println!("{} {}. {name}: {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {} of 9 passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
