use std::collections::BTreeMap;
use std::sync::OnceLock;

use vitguard::attacks::{
    generate_batch, AttackConfig, AttackContext, PatchLossVariant, PatchParams, PgdParams,
};
use vitguard::data::{Split, SyntheticSpec};
use vitguard::detectors::{Detector, DetectorConfig, Feature, ReconstructionPolicy, Threshold};
use vitguard::eval::{
    batch_fooling_rate, read_report, read_scores, roc_auc, run_experiment, tpr_at_fpr,
    write_outputs, Experiment, ExperimentOutput, ExperimentSeeds, ScoreSample,
};
use vitguard::image::LabeledDataset;
use vitguard::mae::{MaeConfig, MaeModel};
use vitguard::vit::{train_classifier, ClassifierModel, ModelConfig, TrainSpec};

struct Fixture {
    model: ClassifierModel,
    mae: MaeModel,
    test: LabeledDataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticSpec {
            train: 400,
            test: 30,
            ..SyntheticSpec::default()
        };
        let train = TrainSpec {
            epochs: 2,
            learning_rate: 2e-3,
            ..TrainSpec::default()
        };
        Fixture {
            model: train_classifier(
                &spec.generate(Split::Train, 0).unwrap(),
                &ModelConfig::default(),
                &train,
            )
            .unwrap(),
            mae: MaeModel::init(MaeConfig::default(), 0).unwrap(),
            test: spec.generate(Split::Test, 0).unwrap(),
        }
    })
}

fn attacks() -> Vec<AttackConfig> {
    vec![
        AttackConfig::Fgsm { eps: 0.1 },
        AttackConfig::Pgd(PgdParams {
            eps: 0.1,
            step: 0.02,
            steps: 5,
        }),
        AttackConfig::Patch(PatchParams {
            steps: 20,
            ..PatchParams::reference(PatchLossVariant::PostSoftmax)
        }),
    ]
}

fn run(attacks: &[AttackConfig]) -> ExperimentOutput {
    let f = fixture();
    run_experiment(&Experiment {
        model: &f.model,
        mae: &f.mae,
        surrogate: None,
        test: &f.test,
        attacks,
        layer: 1,
        policy: ReconstructionPolicy::default(),
        seeds: ExperimentSeeds {
            attack: 3,
            detect: 4,
        },
        config_echo: "# echo\n".into(),
    })
    .unwrap()
}

#[test]
fn empty_grid_still_reports() {
    let out = run(&[]);
    assert!(out.report.per_attack.is_empty());
    assert_eq!(out.report.config, "# echo\n");
    assert!(out.scores.is_empty());
}

#[test]
fn reruns_are_identical_apart_from_timestamps() {
    let grid = attacks();
    let (a, b) = (run(&grid), run(&grid));
    assert_eq!(a.report.per_attack, b.report.per_attack);
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.roc, b.roc);

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, pb) = (
        write_outputs(&a, da.path()).unwrap(),
        write_outputs(&b, db.path()).unwrap(),
    );
    assert_eq!(
        std::fs::read(pa.scores).unwrap(),
        std::fs::read(pb.scores).unwrap()
    );
    assert_eq!(pa.roc.len(), pb.roc.len());
}

#[test]
fn report_metrics_recompute_from_persisted_scores() {
    let out = run(&attacks());
    let dir = tempfile::tempdir().unwrap();
    let paths = write_outputs(&out, dir.path()).unwrap();
    let report = read_report(&paths.report).unwrap();
    assert_eq!(report.per_attack, out.report.per_attack);

    let mut groups: BTreeMap<(String, String), Vec<ScoreSample>> = BTreeMap::new();
    for r in read_scores(&paths.scores).unwrap() {
        groups
            .entry((r.attack.clone(), r.detector.clone()))
            .or_default()
            .push(ScoreSample::new(r.score, r.is_adversarial));
    }
    let mut checked = 0;
    for row in &report.per_attack {
        let Some(auc) = row.auc else { continue };
        let t01 = row.tpr_at_fpr_01.unwrap();
        let t05 = row.tpr_at_fpr_05.unwrap();
        for (det, want, w01, w05) in [
            ("I", auc.vitguard_i, t01.vitguard_i, t05.vitguard_i),
            ("II", auc.vitguard_ii, t01.vitguard_ii, t05.vitguard_ii),
        ] {
            let s = &groups[&(row.attack.clone(), det.to_string())];
            assert_eq!(s.iter().filter(|x| !x.is_adversarial).count(), row.n_clean);
            assert_eq!(s.iter().filter(|x| x.is_adversarial).count(), row.n_adv);
            assert_eq!(roc_auc(s).unwrap(), want);
            assert_eq!(tpr_at_fpr(s, 0.01).unwrap().tpr, w01);
            assert_eq!(tpr_at_fpr(s, 0.05).unwrap().tpr, w05);
            checked += 1;
        }
        let fool = row.fooling_rate.unwrap();
        assert!(fool.joint_fpr_05 <= fool.undetected);
        assert_eq!(fool.undetected, row.n_adv as f64 / row.n_correct as f64);
    }
    assert!(checked >= 4);
    assert_eq!(report.per_attack[2].attack, "patch_fool");
}

#[test]
fn fooling_rate_behind_detectors() {
    let f = fixture();
    let ctx = AttackContext::new(&f.model);
    let batch = generate_batch(
        &AttackConfig::Fgsm { eps: 0.15 },
        &ctx,
        f.test.images(),
        f.test.labels(),
        0,
    )
    .unwrap()
    .successful();
    assert!(!batch.adversarials.is_empty());
    let pair = |tau: f64| {
        let cfg = |feature| DetectorConfig::new(feature, 1, ReconstructionPolicy::default());
        (
            Detector::with_threshold(cfg(Feature::Attention), Threshold::fixed(tau)),
            Detector::with_threshold(cfg(Feature::Cls), Threshold::fixed(tau)),
        )
    };
    assert_eq!(batch_fooling_rate(&f.model, None, &batch, 0).unwrap(), 1.0);
    let (i, ii) = pair(f64::NEG_INFINITY);
    assert_eq!(
        batch_fooling_rate(&f.model, Some((&f.mae, &i, &ii)), &batch, 0).unwrap(),
        0.0
    );
    let (i, ii) = pair(f64::INFINITY);
    assert_eq!(
        batch_fooling_rate(&f.model, Some((&f.mae, &i, &ii)), &batch, 0).unwrap(),
        1.0
    );
}
