//! Detection metrics and experiment orchestration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{generate_batch, AdversarialBatch, AttackConfig, AttackContext};
use crate::container::write_atomic;
use crate::detectors::calibrate_threshold;
use crate::detectors::{
    joint_verdict, score_images, Detector, LayerScores, ReconstructionPolicy, RecoveryMode,
    Threshold,
};
use crate::error::{Error, Result};
use crate::image::LabeledDataset;
use crate::mae::MaeModel;
use crate::rng::stream;
use crate::vit::ClassifierModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub score: f64,
    pub is_adversarial: bool,
}

impl ScoreSample {
    pub fn new(score: f64, is_adversarial: bool) -> Self {
        Self {
            score,
            is_adversarial,
        }
    }
}

fn split(samples: &[ScoreSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Evaluation(format!("non-finite score {}", s.score)));
    }
    let pos: Vec<f64> = samples
        .iter()
        .filter(|s| s.is_adversarial)
        .map(|s| s.score)
        .collect();
    let neg: Vec<f64> = samples
        .iter()
        .filter(|s| !s.is_adversarial)
        .map(|s| s.score)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Evaluation(
            "ROC metrics need at least one adversarial and one clean sample".into(),
        ));
    }
    Ok((pos, neg))
}

/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` via mid-ranks.
pub fn roc_auc(samples: &[ScoreSample]) -> Result<f64> {
    let (pos, neg) = split(samples)?;
    let mut all: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| (s.score, s.is_adversarial))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Empirical ROC as `(FPR, TPR)` points from `(0,0)` to `(1,1)`, one per
/// distinct score threshold.
pub fn roc_curve(samples: &[ScoreSample]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = split(samples)?;
    let mut sorted: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| (s.score, s.is_adversarial))
        .collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(curve)
}

pub fn trapezoid_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    pub tpr: f64,
    pub achieved_fpr: f64,
    pub tau: f64,
}

/// Threshold calibrated on the clean scores; TPR is the fraction of
/// adversarial scores strictly above it.
pub fn tpr_at_fpr(samples: &[ScoreSample], target_fpr: f64) -> Result<TprAtFpr> {
    let (pos, neg) = split(samples)?;
    let t = calibrate_threshold(&neg, target_fpr)?;
    let frac = |v: &[f64]| v.iter().filter(|&&s| t.exceeds(s)).count() as f64 / v.len() as f64;
    Ok(TprAtFpr {
        tpr: frac(&pos),
        achieved_fpr: frac(&neg),
        tau: t.tau,
    })
}

/// Fraction of samples that are misclassified and, when detection results
/// are given, also not flagged.
pub fn fooling_rate(misclassified: &[bool], flagged: Option<&[bool]>) -> Result<f64> {
    if misclassified.is_empty() {
        return Err(Error::Evaluation("fooling rate of an empty batch".into()));
    }
    if let Some(f) = flagged {
        if f.len() != misclassified.len() {
            return Err(Error::Evaluation(
                "detection flags misaligned with batch".into(),
            ));
        }
    }
    let fooled = (0..misclassified.len())
        .filter(|&i| misclassified[i] && !flagged.is_some_and(|f| f[i]))
        .count();
    Ok(fooled as f64 / misclassified.len() as f64)
}

/// Fooling rate of a batch against the model, optionally behind the joint
/// detector. Sample `i` reconstructs with stream `i` of `seed`.
pub fn batch_fooling_rate(
    model: &ClassifierModel,
    joint: Option<(&MaeModel, &Detector, &Detector)>,
    batch: &AdversarialBatch,
    seed: u64,
) -> Result<f64> {
    let misclassified = batch
        .adversarials
        .par_iter()
        .zip(batch.labels.par_iter())
        .map(|(a, &y)| Ok(crate::vit::predict_one(model, a)? != y))
        .collect::<Result<Vec<bool>>>()?;
    let flagged = match joint {
        None => None,
        Some((mae, d1, d2)) => Some(
            batch
                .adversarials
                .par_iter()
                .enumerate()
                .map(|(i, a)| {
                    let v = crate::detectors::joint_detect(
                        a,
                        model,
                        mae,
                        d1,
                        d2,
                        &mut stream(seed, i as u64),
                    )?;
                    Ok(v.adversarial)
                })
                .collect::<Result<Vec<bool>>>()?,
        ),
    };
    fooling_rate(&misclassified, flagged.as_deref())
}

/// Per-detector pair of numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetric<T> {
    pub vitguard_i: T,
    pub vitguard_ii: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprRow {
    pub vitguard_i: f64,
    pub vitguard_ii: f64,
    pub joint: f64,
}

/// Fractions of the correctly classified attacked inputs whose adversarial
/// version is misclassified (and, for `joint_fpr_05`, also not flagged by
/// the joint detector with both thresholds at FPR 0.05).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoolingRow {
    pub undetected: f64,
    pub joint_fpr_05: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: String,
    pub attack_config: AttackConfig,
    pub layer: usize,
    pub recovery_mode: RecoveryMode,
    pub auc: Option<DetectorMetric<f64>>,
    pub tpr_at_fpr_01: Option<TprRow>,
    pub tpr_at_fpr_05: Option<TprRow>,
    pub fooling_rate: Option<FoolingRow>,
    pub n_attacked: usize,
    /// Attacked inputs the model classifies correctly.
    pub n_correct: usize,
    pub n_clean: usize,
    pub n_adv: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSeeds {
    pub attack: u64,
    pub detect: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: String,
    pub per_attack: Vec<AttackRow>,
    pub seeds: ExperimentSeeds,
    pub timestamps: Timestamps,
}

/// One line of the score sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub attack: String,
    pub detector: String,
    pub score: f64,
    pub is_adversarial: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub scores: Vec<ScoreRecord>,
    /// `(attack, detector) → ROC points`.
    pub roc: BTreeMap<(String, String), Vec<(f64, f64)>>,
}

/// Everything one evaluation run needs.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub model: &'a ClassifierModel,
    pub mae: &'a MaeModel,
    pub surrogate: Option<&'a ClassifierModel>,
    pub test: &'a LabeledDataset,
    pub attacks: &'a [AttackConfig],
    pub layer: usize,
    /// Policy for L_p attacks; patch attacks switch to full recovery.
    pub policy: ReconstructionPolicy,
    pub seeds: ExperimentSeeds,
    pub config_echo: String,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn samples(clean: &[f64], adv: &[f64]) -> Vec<ScoreSample> {
    clean
        .iter()
        .map(|&s| ScoreSample::new(s, false))
        .chain(adv.iter().map(|&s| ScoreSample::new(s, true)))
        .collect()
}

fn tpr_row(
    clean_i: &[f64],
    adv_i: &[f64],
    clean_ii: &[f64],
    adv_ii: &[f64],
    target: f64,
) -> Result<TprRow> {
    let t1 = calibrate_threshold(clean_i, target)?;
    let t2 = calibrate_threshold(clean_ii, target)?;
    let joint = adv_i
        .iter()
        .zip(adv_ii)
        .filter(|(&a, &c)| joint_verdict(a, &t1, c, &t2).adversarial)
        .count() as f64
        / adv_i.len() as f64;
    Ok(TprRow {
        vitguard_i: tpr_at_fpr(&samples(clean_i, adv_i), target)?.tpr,
        vitguard_ii: tpr_at_fpr(&samples(clean_ii, adv_ii), target)?.tpr,
        joint,
    })
}

/// Generates each attack on the test split, keeps the successful samples,
/// scores clean and adversarial inputs with both detectors at `layer`, and
/// aggregates the metrics.
pub fn run_experiment(exp: &Experiment) -> Result<ExperimentOutput> {
    let started = unix_now();
    let clock = Instant::now();
    exp.policy.validate()?;
    let model = exp.model;
    if exp.layer >= model.num_layers() {
        return Err(Error::Config(format!(
            "layer {} outside the model",
            exp.layer
        )));
    }
    let ctx = AttackContext {
        model,
        surrogate: exp.surrogate,
        mae: Some(exp.mae),
    };
    let mut clean_cache: Vec<(ReconstructionPolicy, Vec<LayerScores>)> = Vec::new();
    let mut rows = Vec::with_capacity(exp.attacks.len());
    let mut records = Vec::new();
    let mut roc = BTreeMap::new();
    let l = exp.layer;
    let n_correct = if exp.attacks.is_empty() {
        0
    } else {
        count_correct(model, exp.test)?
    };

    for (k, attack) in exp.attacks.iter().enumerate() {
        let policy = if attack.is_patch() {
            ReconstructionPolicy {
                recovery_mode: RecoveryMode::Full,
                mask_ratio: 0.5,
                ..exp.policy
            }
        } else {
            exp.policy
        };
        if !clean_cache.iter().any(|(p, _)| *p == policy) {
            let s = score_images(model, exp.mae, exp.test.images(), &policy, exp.seeds.detect)?;
            clean_cache.push((policy, s));
        }
        let clean = &clean_cache.iter().find(|(p, _)| *p == policy).unwrap().1;

        let attack_seed = exp.seeds.attack.wrapping_add(k as u64);
        let batch = generate_batch(
            attack,
            &ctx,
            exp.test.images(),
            exp.test.labels(),
            attack_seed,
        )?;
        let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.success[i]).collect();

        let adv_images: Vec<_> = idx.iter().map(|&i| batch.adversarials[i].clone()).collect();
        let adv_seed = exp.seeds.detect.wrapping_add(1 + k as u64);
        let adv = score_images(model, exp.mae, &adv_images, &policy, adv_seed)?;

        let name = attack.name().to_string();
        let clean_i: Vec<f64> = clean.iter().map(|s| s.attn[l]).collect();
        let clean_ii: Vec<f64> = clean.iter().map(|s| s.cls[l]).collect();
        let adv_i: Vec<f64> = adv.iter().map(|s| s.attn[l]).collect();
        let adv_ii: Vec<f64> = adv.iter().map(|s| s.cls[l]).collect();
        for (det, c, a) in [("I", &clean_i, &adv_i), ("II", &clean_ii, &adv_ii)] {
            for (j, &s) in c.iter().enumerate() {
                records.push(ScoreRecord {
                    id: format!("clean-{j}"),
                    attack: name.clone(),
                    detector: det.into(),
                    score: s,
                    is_adversarial: false,
                });
            }
            for (j, &s) in a.iter().enumerate() {
                records.push(ScoreRecord {
                    id: format!("adv-{}", idx[j]),
                    attack: name.clone(),
                    detector: det.into(),
                    score: s,
                    is_adversarial: true,
                });
            }
        }

        let mut row = AttackRow {
            attack: name.clone(),
            attack_config: *attack,
            layer: l,
            recovery_mode: policy.recovery_mode,
            auc: None,
            tpr_at_fpr_01: None,
            tpr_at_fpr_05: None,
            fooling_rate: None,
            n_attacked: batch.len(),
            n_correct,
            n_clean: clean.len(),
            n_adv: adv.len(),
        };
        if !adv.is_empty() && !clean.is_empty() {
            let s1 = samples(&clean_i, &adv_i);
            let s2 = samples(&clean_ii, &adv_ii);
            row.auc = Some(DetectorMetric {
                vitguard_i: roc_auc(&s1)?,
                vitguard_ii: roc_auc(&s2)?,
            });
            roc.insert((name.clone(), "I".to_string()), roc_curve(&s1)?);
            roc.insert((name.clone(), "II".to_string()), roc_curve(&s2)?);
            row.tpr_at_fpr_01 = Some(tpr_row(&clean_i, &adv_i, &clean_ii, &adv_ii, 0.01)?);
            let t05 = tpr_row(&clean_i, &adv_i, &clean_ii, &adv_ii, 0.05)?;
            row.tpr_at_fpr_05 = Some(t05);
            // Successful samples are misclassified by construction; the
            // remaining correctly classified inputs count as not fooled.
            let mut misclassified = vec![false; n_correct];
            misclassified[..adv.len()].fill(true);
            let t1 = calibrate_threshold(&clean_i, 0.05)?;
            let t2 = calibrate_threshold(&clean_ii, 0.05)?;
            let mut flagged = vec![false; n_correct];
            for (j, (&a, &c)) in adv_i.iter().zip(&adv_ii).enumerate() {
                flagged[j] = joint_verdict(a, &t1, c, &t2).adversarial;
            }
            row.fooling_rate = Some(FoolingRow {
                undetected: fooling_rate(&misclassified, None)?,
                joint_fpr_05: fooling_rate(&misclassified, Some(&flagged))?,
            });
        }
        rows.push(row);
    }

    Ok(ExperimentOutput {
        report: ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config: exp.config_echo.clone(),
            per_attack: rows,
            seeds: exp.seeds,
            timestamps: Timestamps {
                started_unix: started,
                finished_unix: unix_now(),
                wall_clock_seconds: clock.elapsed().as_secs_f64(),
            },
        },
        scores: records,
        roc,
    })
}

fn count_correct(model: &ClassifierModel, data: &LabeledDataset) -> Result<usize> {
    let hits = data
        .images()
        .par_iter()
        .zip(data.labels().par_iter())
        .map(|(x, &y)| Ok(usize::from(crate::vit::predict_one(model, x)? == y)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum())
}

/// Paths written by [`write_outputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPaths {
    pub report: PathBuf,
    pub scores: PathBuf,
    pub roc: Vec<PathBuf>,
}

/// Writes `report.json`, `scores.jsonl` and one `roc_<attack>_<detector>.csv`
/// per curve into `dir`, each atomically.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<OutputPaths> {
    let report = dir.join("report.json");
    let text = serde_json::to_string_pretty(&out.report).expect("serializable");
    write_atomic(&report, text.as_bytes())?;

    let scores = dir.join("scores.jsonl");
    let mut lines = String::new();
    for r in &out.scores {
        lines.push_str(&serde_json::to_string(r).expect("serializable"));
        lines.push('\n');
    }
    write_atomic(&scores, lines.as_bytes())?;

    let mut roc = Vec::new();
    for ((attack, det), curve) in &out.roc {
        let path = dir.join(format!("roc_{attack}_{det}.csv"));
        let mut csv = String::from("fpr,tpr\n");
        for (f, t) in curve {
            writeln!(csv, "{f},{t}").unwrap();
        }
        write_atomic(&path, csv.as_bytes())?;
        roc.push(path);
    }
    Ok(OutputPaths {
        report,
        scores,
        roc,
    })
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("report: {e}")))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("score line: {e}"))))
        .collect()
}

/// A threshold that never fires.
pub fn vacuous_threshold() -> Threshold {
    Threshold::fixed(f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(samples: &[ScoreSample]) -> f64 {
        let pos: Vec<f64> = samples
            .iter()
            .filter(|s| s.is_adversarial)
            .map(|s| s.score)
            .collect();
        let neg: Vec<f64> = samples
            .iter()
            .filter(|s| !s.is_adversarial)
            .map(|s| s.score)
            .collect();
        let mut acc = 0.0;
        for p in &pos {
            for n in &neg {
                acc += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    fn mk(pos: &[f64], neg: &[f64]) -> Vec<ScoreSample> {
        samples(neg, pos)
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(roc_auc(&mk(&[2.0, 4.0], &[1.0, 3.0])).unwrap(), 0.75);
        assert_eq!(roc_auc(&mk(&[5.0, 6.0], &[1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(roc_auc(&mk(&[1.0, 2.0], &[1.0, 2.0])).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&mk(&[1.0], &[])),
            Err(Error::Evaluation(_))
        ));
    }

    proptest! {
        #[test]
        fn auc_matches_pairs_and_trapezoid(
            pos in proptest::collection::vec(0u8..20, 1..40),
            neg in proptest::collection::vec(0u8..20, 1..40),
        ) {
            let p: Vec<f64> = pos.iter().map(|&v| f64::from(v)).collect();
            let n: Vec<f64> = neg.iter().map(|&v| f64::from(v)).collect();
            let s = mk(&p, &n);
            let auc = roc_auc(&s).unwrap();
            prop_assert!((auc - pairwise(&s)).abs() < 1e-12);
            prop_assert!((auc - trapezoid_area(&roc_curve(&s).unwrap())).abs() < 1e-12);
            let flipped: Vec<ScoreSample> = s.iter().map(|x| ScoreSample::new(x.score, !x.is_adversarial)).collect();
            prop_assert!((roc_auc(&flipped).unwrap() - (1.0 - auc)).abs() < 1e-12);
            let cubed: Vec<ScoreSample> = s.iter().map(|x| ScoreSample::new(x.score.powi(3) + 1.0, x.is_adversarial)).collect();
            prop_assert_eq!(roc_auc(&cubed).unwrap(), auc);
        }

        #[test]
        fn tpr_is_monotone_in_target(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..2.0)).collect();
            let n: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.5)).collect();
            let s = mk(&p, &n);
            let mut prev = 0.0;
            for t in [0.01, 0.02, 0.05, 0.1, 0.3] {
                let r = tpr_at_fpr(&s, t).unwrap();
                prop_assert!(r.tpr >= prev);
                prop_assert!(r.achieved_fpr <= t + 1e-12);
                prev = r.tpr;
            }
        }
    }

    #[test]
    fn separated_tpr_is_one() {
        let r = tpr_at_fpr(&mk(&[10.0, 11.0], &[1.0, 2.0, 3.0]), 0.05).unwrap();
        assert_eq!(r.tpr, 1.0);
        assert_eq!(r.achieved_fpr, 0.0);
    }

    #[test]
    fn fooling_rate_cases() {
        let mis = vec![true; 4];
        assert_eq!(fooling_rate(&mis, None).unwrap(), 1.0);
        assert_eq!(fooling_rate(&mis, Some(&[true; 4])).unwrap(), 0.0);
        assert_eq!(fooling_rate(&mis, Some(&[false; 4])).unwrap(), 1.0);
        assert_eq!(
            fooling_rate(&[true, false], Some(&[false, false])).unwrap(),
            0.5
        );
        assert!(fooling_rate(&[], None).is_err());
        assert!(!vacuous_threshold().exceeds(f64::MAX));
    }
}
