use super::*;
use crate::grid::{Grid, Shape};
use proptest::prelude::*;

fn cases(pos: &[f64], neg: &[f64]) -> Vec<ScoredCase> {
    pos.iter()
        .map(|&s| ScoredCase::new(s, true))
        .chain(neg.iter().map(|&s| ScoredCase::new(s, false)))
        .collect()
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Pair-counting AUC: wins plus half the ties over all pos/neg pairs.
fn pairwise_auc(cases: &[ScoredCase]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for p in cases.iter().filter(|c| c.positive) {
        for n in cases.iter().filter(|c| !c.positive) {
            pairs += 1.0;
            if p.score > n.score {
                wins += 1.0;
            } else if p.score == n.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Every midpoint, J compared as the integer tp·N + tn·P, last maximum kept.
fn brute_force_youden(cases: &[ScoredCase]) -> Option<(f64, i64)> {
    let mut distinct: Vec<f64> = cases.iter().map(|c| c.score).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let p = cases.iter().filter(|c| c.positive).count() as i64;
    let n = cases.len() as i64 - p;
    let mut best: Option<(f64, i64)> = None;
    for w in distinct.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let c = confusion(cases, t).unwrap();
        let num = c.tp as i64 * n + c.tn as i64 * p - p * n;
        match best {
            Some((_, b)) if num < b => {}
            _ => best = Some((t, num)),
        }
    }
    best
}

#[test]
fn table_two_counts_reproduce_printed_rates() {
    let c = ConfusionCounts::new(139, 16, 134, 15);
    assert_eq!(c.positives(), 154);
    assert_eq!(c.negatives(), 150);
    let m = basic_metrics(&c);
    assert_eq!(round3(m.sens), 0.903);
    assert_eq!(round3(m.spec), 0.893);
    assert_eq!(round3(m.accu), 0.898);
    assert_eq!(round3(m.preci), 0.897);
    assert!((m.sens - 0.9026).abs() < 5e-5);
    assert!((m.spec - 0.8933).abs() < 5e-5);
    assert!((m.accu - 0.8980).abs() < 5e-5);
    assert!((m.preci - 0.8968).abs() < 5e-5);
    assert!((m.f1 - 0.8997).abs() < 5e-5);
}

#[test]
fn confusion_from_scores_matches_counts() {
    // 154 positives and 150 negatives laid out so threshold 0.5 gives the
    // confusion matrix (139, 16, 134, 15).
    let mut v = Vec::new();
    v.extend((0..139).map(|_| ScoredCase::new(0.9, true)));
    v.extend((0..15).map(|_| ScoredCase::new(0.1, true)));
    v.extend((0..16).map(|_| ScoredCase::new(0.7, false)));
    v.extend((0..134).map(|_| ScoredCase::new(0.2, false)));
    assert_eq!(confusion(&v, 0.5).unwrap(), ConfusionCounts::new(139, 16, 134, 15));
}

#[test]
fn confusion_edge_cases() {
    let all_pos = cases(&[1.0; 5], &[]);
    assert_eq!(confusion(&all_pos, 0.5).unwrap(), ConfusionCounts::new(5, 0, 0, 0));
    let mixed = cases(&[0.4, 0.6], &[0.3, 0.9]);
    let c = confusion(&mixed, 0.95).unwrap();
    assert_eq!((c.tp, c.fp), (0, 0));
    assert!(matches!(confusion(&[], 0.5), Err(MetricsError::EmptyInput)));
    assert!(matches!(
        confusion(&[ScoredCase::new(f64::NAN, true)], 0.5),
        Err(MetricsError::NonFiniteScore(_))
    ));
}

#[test]
fn degenerate_denominators() {
    let perfect = basic_metrics(&ConfusionCounts::new(7, 0, 5, 0));
    assert_eq!(perfect, BasicMetrics { sens: 1.0, spec: 1.0, accu: 1.0, preci: 1.0, f1: 1.0 });
    let none_predicted = basic_metrics(&ConfusionCounts::new(0, 0, 5, 3));
    assert_eq!(none_predicted.preci, 0.0);
    assert_eq!(none_predicted.f1, 0.0);
    let empty = basic_metrics(&ConfusionCounts::default());
    assert_eq!(empty.accu, 0.0);
}

fn mask(shape: Shape, on: &[usize]) -> Mask {
    let mut m = Grid::filled(shape, false);
    for &i in on {
        m.as_mut_slice()[i] = true;
    }
    m
}

#[test]
fn dice_examples() {
    let s = Shape::new(4, 1, 1);
    let a = mask(s, &[0, 1]);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &mask(s, &[2, 3])).unwrap(), 0.0);
    assert_eq!(dice(&a, &mask(s, &[1, 2])).unwrap(), 0.5);
    assert_eq!(dice(&mask(s, &[]), &mask(s, &[])).unwrap(), 1.0);
    assert!(matches!(
        dice(&a, &mask(Shape::new(2, 2, 1), &[])),
        Err(MetricsError::ShapeMismatch(..))
    ));
}

#[test]
fn auc_examples() {
    let (auc, _) = roc_auc(&cases(&[0.9, 0.8], &[0.85, 0.3])).unwrap();
    assert!((auc - 0.75).abs() < 1e-12);
    let (auc, points) = roc_auc(&cases(&[0.9, 0.8], &[0.2, 0.1])).unwrap();
    assert_eq!(auc, 1.0);
    assert_eq!((points[0].fpr, points[0].tpr, points[0].threshold), (0.0, 0.0, None));
    let last = points.last().unwrap();
    assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    let (auc, _) = roc_auc(&cases(&[0.4, 0.4], &[0.4, 0.4, 0.4])).unwrap();
    assert_eq!(auc, 0.5);
    assert!(matches!(roc_auc(&cases(&[0.1], &[])), Err(MetricsError::OneClassOnly)));
}

#[test]
fn youden_examples() {
    let c = calibrate_threshold(&cases(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.6])).unwrap();
    assert!((c.threshold - 0.65).abs() < 1e-12);
    assert_eq!(c.youden_j, 1.0);

    // Interleaved identical scores: J = 0 at every midpoint, the highest wins.
    let tied = cases(&[0.2, 0.5, 0.8], &[0.2, 0.5, 0.8]);
    let c = calibrate_threshold(&tied).unwrap();
    assert_eq!(c.youden_j, 0.0);
    assert_eq!(c.threshold, (0.5 + 0.8) / 2.0);

    let one = calibrate_threshold(&cases(&[0.3], &[0.3])).unwrap();
    assert_eq!((one.threshold, one.youden_j), (0.3, 0.0));
    assert!(matches!(calibrate_threshold(&cases(&[0.1, 0.2], &[])), Err(MetricsError::OneClassOnly)));
}

#[test]
fn sens_at_spec_picks_best_admissible_point() {
    let v = cases(&[0.9, 0.8, 0.4], &[0.85, 0.3, 0.2, 0.1, 0.05, 0.04, 0.03, 0.02, 0.01, 0.0]);
    // Above 0.85: spec 1.0, sens 1/3. Below it only 0.85 is a false alarm
    // until 0.3, so spec stays 0.9 while every positive is found.
    assert_eq!(sens_at_spec(&v, 0.9).unwrap(), 1.0);
    assert!((sens_at_spec(&v, 0.95).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

fn report(model: &str, pos: &[f64], neg: &[f64]) -> EvaluationReport {
    let rows = cases(pos, neg)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let predicted = c.score >= 0.5;
            CaseRow {
                case_id: i as u64 + 1,
                positive: c.positive,
                score: c.score,
                predicted,
                outcome: CaseOutcome::of(predicted, c.positive),
                dice: c.positive.then_some(0.5 + c.score / 3.0),
                lesion_count: predicted as usize,
                total_volume_ml: 0.0,
                result_id: None,
            }
        })
        .collect();
    EvaluationReport::from_rows(model, "holdout", rows).unwrap()
}

#[test]
fn report_metrics_agree_with_counts() {
    let r = report("v1", &[0.9, 0.7, 0.3], &[0.6, 0.2, 0.1, 0.05]);
    assert_eq!(r.counts, ConfusionCounts::new(2, 1, 3, 1));
    assert_eq!(r.sens, 2.0 / 3.0);
    assert_eq!(r.spec, 0.75);
    assert_eq!(r.accu, 5.0 / 7.0);
    let expected_dice = [0.9, 0.7, 0.3].iter().map(|s| 0.5 + s / 3.0).sum::<f64>() / 3.0;
    assert!((r.dice.unwrap() - expected_dice).abs() < 1e-15);
}

#[test]
fn csv_round_trip_keeps_six_decimals() {
    let reports = vec![
        report("v1", &[0.91, 0.37, 0.66], &[0.12, 0.58]),
        report("v2", &[0.8, 0.71], &[0.33, 0.2, 0.05]),
    ];
    let text = export_csv(&reports).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    let parsed = parse_csv(&text).unwrap();
    assert_eq!(parsed.len(), 2);
    for (row, r) in parsed.iter().zip(&reports) {
        assert_eq!(row.model, r.model);
        for (a, b) in [
            (row.sens, r.sens),
            (row.spec, r.spec),
            (row.auc, r.auc),
            (row.accu, r.accu),
            (row.preci, r.preci),
            (row.f1, r.f1),
            (row.dice.unwrap(), r.dice.unwrap()),
        ] {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let no_dice = EvaluationReport { dice: None, ..reports[0].clone() };
    assert_eq!(parse_csv(&export_csv(&[no_dice]).unwrap()).unwrap()[0].dice, None);
}

#[test]
fn bar_chart_has_one_group_of_four_per_model() {
    let reports: Vec<_> = ["v1", "v2", "v3"].iter().map(|m| report(m, &[0.9, 0.4], &[0.3, 0.6])).collect();
    let svg = export(&reports, ExportFormat::SvgBars).unwrap();
    assert_eq!(svg.matches(r#"<g class="model""#).count(), 3);
    assert_eq!(svg.matches(r#"class="bar""#).count(), 12);
    for metric in ["sens", "spec", "accu", "auc"] {
        assert_eq!(svg.matches(&format!(r#"data-metric="{metric}""#)).count(), 3);
    }
}

#[test]
fn perfect_roc_polyline() {
    let r = report("v1", &[0.9, 0.8], &[0.2, 0.1]);
    let svg = export_roc_svg(&[r]);
    let line = svg.lines().find(|l| l.contains(r#"class="roc""#)).unwrap();
    let attr = line.split(r#"points=""#).nth(1).unwrap().split('"').next().unwrap();
    let pts: Vec<(f64, f64)> = attr
        .split(' ')
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect();
    assert_eq!(pts.first(), Some(&(0.0, 0.0)));
    assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    assert!(pts.contains(&(0.0, 1.0)));
    // Up the left edge, then along the top.
    assert!(pts.iter().all(|&(x, y)| x == 0.0 || y == 1.0), "{attr}");
    assert!(!svg.contains("href"), "svg must be self-contained");
}

#[test]
fn unsupported_export_format() {
    assert!(matches!("pdf".parse::<ExportFormat>(), Err(MetricsError::UnsupportedFormat(_))));
    assert_eq!("svg_roc".parse::<ExportFormat>().unwrap(), ExportFormat::SvgRoc);
}

fn scored_set() -> impl Strategy<Value = Vec<ScoredCase>> {
    // Scores on a coarse grid so ties are common.
    (2usize..=50)
        .prop_flat_map(|n| proptest::collection::vec((0u8..20, any::<bool>()), n))
        .prop_map(|v| v.into_iter().map(|(s, p)| ScoredCase::new(s as f64 / 19.0, p)).collect::<Vec<_>>())
        .prop_filter("both classes", |v| v.iter().any(|c| c.positive) && v.iter().any(|c| !c.positive))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn trapezoid_equals_mann_whitney(set in scored_set()) {
        let (auc, points) = roc_auc(&set).unwrap();
        let mw = mann_whitney_auc(&set).unwrap();
        prop_assert!((auc - mw).abs() < 1e-9);
        prop_assert!((auc - pairwise_auc(&set)).abs() < 1e-9);
        prop_assert!(points.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
    }

    #[test]
    fn auc_invariant_under_monotone_transform(set in scored_set()) {
        let (a, _) = roc_auc(&set).unwrap();
        let moved: Vec<_> = set.iter().map(|c| ScoredCase::new((3.0 * c.score).exp() - 7.0, c.positive)).collect();
        let (b, _) = roc_auc(&moved).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn label_swap_duality(set in scored_set(), t in 0.0f64..1.0) {
        let a = confusion(&set, t).unwrap().metrics();
        // Negating scores and flipping labels swaps the roles; `>=` becomes
        // `>` so nudge the threshold off the score grid.
        let t = t + 1e-9;
        let flipped: Vec<_> = set.iter().map(|c| ScoredCase::new(-c.score, !c.positive)).collect();
        let b = confusion(&flipped, -t).unwrap().metrics();
        let a2 = confusion(&set, t).unwrap().metrics();
        prop_assert_eq!(a2.sens, b.spec);
        prop_assert_eq!(a2.spec, b.sens);
        let _ = a;
    }

    #[test]
    fn calibration_map_is_monotone(set in scored_set(), probes in proptest::collection::vec(-0.5f64..1.5, 2..40)) {
        let map = isotonic_fit(&set).unwrap();
        let mut probes = probes;
        probes.sort_by(f64::total_cmp);
        let values: Vec<f64> = probes.iter().map(|&x| map.apply(x)).collect();
        prop_assert!(values.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dice_is_symmetric(a in proptest::collection::vec(any::<bool>(), 27), b in proptest::collection::vec(any::<bool>(), 27)) {
        let s = Shape::new(3, 3, 3);
        let a = Grid::from_vec(s, a).unwrap();
        let b = Grid::from_vec(s, b).unwrap();
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn youden_matches_exhaustive_scan(
        set in (2usize..=100)
            .prop_flat_map(|n| proptest::collection::vec((0u8..30, any::<bool>()), n))
            .prop_map(|v| v.into_iter().map(|(s, p)| ScoredCase::new(s as f64 / 29.0, p)).collect::<Vec<_>>())
            .prop_filter("both classes", |v| v.iter().any(|c| c.positive) && v.iter().any(|c| !c.positive))
    ) {
        let got = calibrate_threshold(&set).unwrap();
        match brute_force_youden(&set) {
            Some((t, num)) => {
                let p = set.iter().filter(|c| c.positive).count() as i64;
                let n = set.len() as i64 - p;
                prop_assert_eq!(got.threshold, t);
                prop_assert_eq!(got.youden_j, num as f64 / (p * n) as f64);
            }
            None => prop_assert_eq!(got.youden_j, 0.0),
        }
    }
}
