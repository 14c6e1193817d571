use denet::eval::{count_image, cross_validate, evaluate, mae_mse, make_folds, CountReport, EvalItem, ImageCount, ZeroEstimator};
use denet::fusion::{mock_detect, DetectionSet, FusionConfig};
use denet::model::{EnetConfig, EnetModel};
use denet::synth::{generate, SynthConfig};
use proptest::prelude::*;

fn row(c: f64, n_gt: usize) -> ImageCount {
    ImageCount { image_id: "r".into(), n_gt, n_d: 0, n_e: c, c }
}

fn items(n: usize, recall: Option<f64>, seed: u64) -> Vec<EvalItem> {
    generate(n, &SynthConfig::default(), seed)
        .unwrap()
        .into_iter()
        .map(|s| EvalItem {
            detections: Some(match recall {
                Some(r) => mock_detect(&s.annotation, r, 8, seed).unwrap(),
                None => DetectionSet::empty(s.annotation.image_id.clone()),
            }),
            image: s.image,
            annotation: s.annotation,
        })
        .collect()
}

fn silent_model() -> EnetModel {
    let mut m = EnetModel::build(EnetConfig::tiny(), 3).unwrap();
    m.param_mut("head.weight").unwrap().data_mut().fill(0.0);
    m.param_mut("head.bias").unwrap().data_mut().fill(0.0);
    m
}

#[test]
fn metric_cases() {
    assert_eq!(mae_mse(&[row(5.0, 7)]).unwrap(), (2.0, 4.0));
    assert_eq!(mae_mse(&[row(1.0, 0), row(0.0, 3)]).unwrap(), (2.0, 5.0));
    assert_eq!(mae_mse(&[row(3.0, 3), row(9.0, 9)]).unwrap(), (0.0, 0.0));
    let rep = CountReport::from_rows(vec![row(1.0, 0), row(0.0, 3)]).unwrap();
    assert_eq!(rep.rmse, 5.0f64.sqrt());
}

#[test]
fn full_recall_with_silent_head_is_exact() {
    let its = items(4, Some(1.0), 21);
    let rep = evaluate(&silent_model(), &its, &FusionConfig::default()).unwrap();
    for r in &rep.per_image {
        assert_eq!(r.n_e, 0.0);
        assert_eq!(r.c, r.n_gt as f64);
    }
    assert_eq!(rep.mae, 0.0);
}

#[test]
fn no_detections_and_zero_output_give_mean_count() {
    let its = items(5, None, 22);
    let rep = evaluate(&silent_model(), &its, &FusionConfig::default()).unwrap();
    assert_eq!(rep.mae, rep.mean_gt());
    let zero = evaluate(&ZeroEstimator, &its, &FusionConfig::default()).unwrap();
    assert_eq!(zero, rep);
}

#[test]
fn missing_detection_record_names_the_image() {
    let mut its = items(2, None, 23);
    its[1].detections = None;
    let err = evaluate(&ZeroEstimator, &its, &FusionConfig::default()).unwrap_err();
    assert!(err.to_string().contains(&its[1].annotation.image_id));
}

#[test]
fn evaluation_is_repeatable_and_fused() {
    let m = EnetModel::build(EnetConfig::tiny(), 8).unwrap();
    let its = items(3, Some(0.5), 24);
    let a = evaluate(&m, &its, &FusionConfig::default()).unwrap();
    let b = evaluate(&m, &its, &FusionConfig::default()).unwrap();
    assert_eq!(a, b);
    for (r, it) in a.per_image.iter().zip(&its) {
        assert_eq!(r.image_id, it.annotation.image_id);
        assert_eq!(r.c, r.n_d as f64 + r.n_e);
        assert_eq!(r, &count_image(&m, it, &FusionConfig::default()).unwrap());
    }
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let rep = CountReport::from_rows(vec![row(1.0, 0), row(0.5, 3)]).unwrap();
    rep.save(dir.path()).unwrap();
    let back: CountReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, rep);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("image_id,n_gt,n_d,n_e,c,abs_err"));
}

#[test]
fn fold_cases() {
    let s = make_folds(50, 5, 0).unwrap();
    assert_eq!(s.folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![10; 5]);
    let loo = make_folds(7, 7, 0).unwrap();
    assert!(loo.folds.iter().all(|f| f.len() == 1));
    assert_eq!(make_folds(50, 5, 9).unwrap(), make_folds(50, 5, 9).unwrap());
    assert_ne!(make_folds(50, 5, 9).unwrap(), make_folds(50, 5, 10).unwrap());
}

#[test]
fn cross_validation_covers_each_image_once() {
    let its = items(7, Some(0.3), 25);
    let mut seen = Vec::new();
    let rep = cross_validate(&its, 3, 4, &FusionConfig::default(), |f, train| {
        seen.push((f, train.to_vec()));
        Ok(ZeroEstimator)
    })
    .unwrap();
    assert_eq!(seen.len(), 3);
    let ids: Vec<&str> = rep.per_image.iter().map(|r| r.image_id.as_str()).collect();
    let want: Vec<&str> = its.iter().map(|i| i.annotation.image_id.as_str()).collect();
    assert_eq!(ids, want);
    let split = make_folds(7, 3, 4).unwrap();
    for (f, train) in seen {
        assert!(train.iter().all(|i| !split.folds[f].contains(i)));
        assert_eq!(train.len() + split.folds[f].len(), 7);
    }
}

proptest! {
    #[test]
    fn folds_partition(n in 1usize..200, k in 1usize..20, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let s = make_folds(n, k, seed).unwrap();
        let mut all = s.folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn singleton_metrics(c in 0.0f64..500.0, gt in 0usize..500) {
        let (mae, mse) = mae_mse(&[row(c, gt)]).unwrap();
        let e = (c - gt as f64).abs();
        prop_assert_eq!(mae, e);
        prop_assert_eq!(mse, e * e);
        prop_assert!(mae >= 0.0 && mse >= 0.0);
    }
}
