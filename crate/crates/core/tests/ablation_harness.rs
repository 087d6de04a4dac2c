mod common;

use selectroscope::ablation::{
    auc, auc_over_epochs, make_plan, mean_ci95, run_curve, AblationCurve, AblationOrdering, CurvePoint, Scope, SweepOptions, Unit,
};
use selectroscope::selectivity::SelectivityRecord;
use selectroscope::{trainer, ArchitectureSpec, Checkpoint, CheckpointMeta, Error, SelectivityReport, TapId};

fn meta(epoch: usize) -> CheckpointMeta {
    CheckpointMeta {
        epoch,
        batch_index: 4,
        seed: 0,
    }
}

#[test]
fn selective_order_matches_full_sort_oracle() {
    let spec = ArchitectureSpec {
        blocks_per_module: vec![3, 1],
        channels_per_module: vec![4, 4],
        strides: vec![1, 2],
        input_shape: [1, 4, 4],
        num_classes: 3,
    };
    // repeated SI values exercise the (block, channel) tie-break
    let si = [0.3, 0.9, 0.1, 0.9, 0.5, 0.0, 0.3, 0.7, 0.2, 0.9, 0.4, 0.6];
    let mut report = SelectivityReport::default();
    for b in 0..3 {
        let recs = (0..4)
            .map(|c| SelectivityRecord {
                si: si[b * 4 + c],
                mu_max: 1.0,
                mu_neg_max: 0.0,
                argmax_class: 0,
            })
            .collect();
        report.taps.insert(TapId { module: 0, block: b }, recs);
    }
    let plan = make_plan(&spec, Some(&report), 0, AblationOrdering::Selective, 4, 0).unwrap();

    let mut oracle: Vec<(f64, usize, usize)> = (0..12).map(|i| (si[i], i / 4, i % 4)).collect();
    // bubble sort: SI descending, then block, then channel
    for i in 0..oracle.len() {
        for j in 0..oracle.len() - 1 - i {
            let (a, b) = (oracle[j], oracle[j + 1]);
            let swap = a.0 < b.0 || (a.0 == b.0 && (a.1, a.2) > (b.1, b.2));
            if swap {
                oracle.swap(j, j + 1);
            }
        }
    }
    let want: Vec<Unit> = oracle.iter().map(|&(_, block, channel)| Unit { block, channel }).collect();
    assert_eq!(plan.units, want);
    assert_eq!(plan.fraction_steps, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
}

#[test]
fn hand_built_toy_loses_exactly_the_selective_class() {
    let (model, eval) = common::three_class_toy();
    let (ev, si) = trainer::evaluate_with_selectivity(&model, &eval, 7).unwrap();
    assert_eq!(ev.accuracy, 1.0);
    let plan = make_plan(model.spec(), Some(&si), 0, AblationOrdering::Selective, 3, 0).unwrap();
    assert_eq!(plan.units[0], Unit { block: 0, channel: 0 });
    let curve = run_curve(&model, meta(0), &plan, &eval, 7).unwrap();
    // 10 of the 30 samples are class 2; each becomes a class-1 prediction
    let class2 = eval.labels().iter().filter(|&&l| l == 2).count();
    assert_eq!(class2, 10);
    let expected = (eval.len() - class2) as f64 / eval.len() as f64;
    let raw: Vec<f64> = curve.points.iter().map(|p| p.raw_acc).collect();
    assert_eq!(raw, vec![1.0, expected, expected, expected]);
    assert_eq!(curve.points[1].ablated, 1);

    let masked = plan.mask(model.spec(), 1).unwrap();
    let logits = model.logits(eval.images(), Some(&masked)).unwrap();
    let preds = trainer::predictions(&logits);
    for (p, &l) in preds.iter().zip(eval.labels()) {
        assert_eq!(*p, if l == 2 { 1 } else { l });
    }
}

#[test]
fn identity_skip_module_curve_is_flat() {
    let (_, eval) = common::three_class_toy();
    let (mut model, _) = common::three_class_toy();
    // remove the selective unit's effect: the whole module is skip-only
    model.zero_residual_branches(0).unwrap();
    // the skip-only network sends class 2 = (s, s, 1) to class 1; give it a
    // head that still separates the classes on the raw input
    let fc = selectroscope::Tensor::new(vec![3, 3], vec![2.0, -1.0, 1.0, -1.0, 2.0, 1.0, 0.0, 0.0, -1.5]).unwrap();
    model.set_parameter("fc.weight", fc).unwrap();
    let base = trainer::evaluate(&model, &eval, 8).unwrap().accuracy;
    assert!(base > 0.0);

    for ordering in [AblationOrdering::Selective, AblationOrdering::Random] {
        let (_, si) = trainer::evaluate_with_selectivity(&model, &eval, 8).unwrap();
        let plan = make_plan(model.spec(), Some(&si), 0, ordering, 2, 1)
            .unwrap()
            .with_fractions(vec![0.0, 1.0])
            .unwrap();
        let curve = run_curve(&model, meta(0), &plan, &eval, 8).unwrap();
        for p in &curve.points {
            assert!((p.norm_acc - 100.0).abs() < 1e-9);
        }
        // step 0 is a plain evaluation
        assert_eq!(curve.points[0].raw_acc.to_bits(), base.to_bits());
    }
}

#[test]
fn zero_baseline_is_a_normalization_error() {
    let (model, eval) = common::three_class_toy();
    // the toy is perfect, so rotating every label makes it always wrong
    let rotated: Vec<usize> = eval.labels().iter().map(|l| (l + 1) % 3).collect();
    let wrong = selectroscope::data::Dataset::new(eval.images().clone(), rotated, 3, eval.split()).unwrap();
    let plan = make_plan(model.spec(), None, 0, AblationOrdering::Random, 2, 0).unwrap();
    assert!(matches!(run_curve(&model, meta(0), &plan, &wrong, 8), Err(Error::Normalization(_))));
}

#[test]
fn auc_examples() {
    let curve = |v: &[f64]| AblationCurve {
        checkpoint: meta(0),
        module: 0,
        ordering: AblationOrdering::Selective,
        seed: None,
        points: v
            .iter()
            .enumerate()
            .map(|(i, &n)| CurvePoint {
                fraction: i as f64 / (v.len() - 1) as f64,
                ablated: i,
                raw_acc: n / 100.0,
                norm_acc: n,
            })
            .collect(),
    };
    assert_eq!(auc(&curve(&[100.0, 100.0, 100.0])), 300.0);
    assert_eq!(auc(&curve(&[100.0, 0.0, 0.0])), 100.0);
    assert_eq!(auc(&curve(&[100.0, 73.5, 41.0, 12.25])), 226.75);
}

#[test]
fn ci_arithmetic_by_hand() {
    // mean 210, s = 10, t(0.975, 2) = 4.302653
    let (m, lo, hi) = mean_ci95(&[200.0, 220.0, 210.0]).unwrap();
    assert_eq!(m, 210.0);
    assert!((hi - 234.8414).abs() < 1e-4 && (lo - 185.1586).abs() < 1e-4);
}

fn identity_checkpoints() -> (Vec<Checkpoint>, selectroscope::data::Dataset) {
    let (mut model, eval) = common::three_class_toy();
    model.zero_residual_branches(0).unwrap();
    let fc = selectroscope::Tensor::new(vec![3, 3], vec![2.0, -1.0, 1.0, -1.0, 2.0, 1.0, 0.0, 0.0, -1.5]).unwrap();
    model.set_parameter("fc.weight", fc).unwrap();
    let mut second = model.clone();
    second
        .set_parameter("fc.bias", selectroscope::Tensor::new(vec![3], vec![0.1, 0.0, 0.0]).unwrap())
        .unwrap();
    let cks = vec![
        Checkpoint::from_model(&model, meta(0)),
        Checkpoint::from_model(&second, meta(1)),
    ];
    (cks, eval)
}

#[test]
fn auc_table_for_identity_module_and_order_independence() {
    let (cks, eval) = identity_checkpoints();
    let opts = SweepOptions {
        module: 0,
        orderings: vec![AblationOrdering::Selective, AblationOrdering::Random],
        steps: 3,
        random_seeds: vec![0, 1, 2],
        batch_size: 8,
        scope: Scope::Module,
    };
    let (curves, rows) = auc_over_epochs(&cks, &eval, &opts).unwrap();
    assert_eq!(curves.len(), 2 * 4);
    for r in &rows {
        assert!((r.auc - 400.0).abs() < 1e-9);
        assert!((r.ci_low - 400.0).abs() < 1e-9 && (r.ci_high - 400.0).abs() < 1e-9);
    }
    let reversed: Vec<Checkpoint> = cks.iter().rev().cloned().collect();
    let (curves2, rows2) = auc_over_epochs(&reversed, &eval, &opts).unwrap();
    assert_eq!(rows, rows2);
    assert_eq!(curves, curves2);

    let few = SweepOptions {
        random_seeds: vec![0, 1],
        ..opts
    };
    assert!(matches!(auc_over_epochs(&cks, &eval, &few), Err(Error::Plan(_))));
}

#[test]
fn auc_table_matches_hand_computed_curves() {
    // the toy at two checkpoints: intact, and with the selective unit's
    // output weight halved (class 2 still wins at s = 1, loses at s = 0.9)
    let (model, eval) = common::three_class_toy();
    let mut weaker = model.clone();
    let mut conv2 = vec![0.0; 27 * 3];
    conv2[4] = 2.0;
    weaker
        .set_parameter("m0.b0.conv2", selectroscope::Tensor::new(vec![3, 3, 3, 3], conv2).unwrap())
        .unwrap();
    let cks = vec![
        Checkpoint::from_model(&model, meta(0)),
        Checkpoint::from_model(&weaker, meta(1)),
    ];
    let opts = SweepOptions {
        module: 0,
        orderings: vec![AblationOrdering::Selective],
        steps: 3,
        random_seeds: vec![],
        batch_size: 30,
        scope: Scope::Module,
    };
    let (_, rows) = auc_over_epochs(&cks, &eval, &opts).unwrap();
    // epoch 0: baseline 30/30, after ablating unit 0: 20/30 → 100 + 3·(200/3)
    assert!((rows[0].auc - 300.0).abs() < 1e-9);
    // epoch 1: (0.9, 0.9) gives c0 = 0.9 + 0.6 = 1.5, c1 = 0.9:
    // z0 = −0.3, z1 = 0.3, z2 = −0.1 → class 1; (1, 1) gives c0 = 2, c1 = 1:
    // z0 = 0, z1 = 0, z2 = 0.5 → class 2. Baseline 25/30, ablated 20/30.
    let ablated = 100.0 * 20.0 / 25.0;
    assert!((rows[1].auc - (100.0 + 3.0 * ablated)).abs() < 1e-9);
    assert_eq!(rows[1].checkpoint.epoch, 1);
}

#[test]
fn per_block_scope_interleaves_each_blocks_ranking() {
    let spec = ArchitectureSpec {
        blocks_per_module: vec![2],
        channels_per_module: vec![3],
        strides: vec![1],
        input_shape: [1, 4, 4],
        num_classes: 2,
    };
    // block 0 is far more selective than block 1
    let si = [[0.9, 0.8, 0.7], [0.1, 0.3, 0.2]];
    let mut report = SelectivityReport::default();
    for (b, row) in si.iter().enumerate() {
        let recs = row
            .iter()
            .map(|&s| SelectivityRecord {
                si: s,
                mu_max: 1.0,
                mu_neg_max: 0.0,
                argmax_class: 0,
            })
            .collect();
        report.taps.insert(TapId { module: 0, block: b }, recs);
    }
    let global = make_plan(&spec, Some(&report), 0, AblationOrdering::Selective, 3, 0).unwrap();
    let u = |block, channel| Unit { block, channel };
    assert_eq!(global.units, vec![u(0, 0), u(0, 1), u(0, 2), u(1, 1), u(1, 2), u(1, 0)]);
    let local = global.per_block();
    assert_eq!(local.units, vec![u(0, 0), u(1, 1), u(0, 1), u(1, 2), u(0, 2), u(1, 0)]);
    // a third of the module is one unit from each block
    let mask = local.mask(&spec, local.ablated_counts()[1]).unwrap();
    assert_eq!(mask.get(TapId { module: 0, block: 0 }).unwrap(), &[true, false, false]);
    assert_eq!(mask.get(TapId { module: 0, block: 1 }).unwrap(), &[false, true, false]);
}
