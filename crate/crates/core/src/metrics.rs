//! AUROC, per-subgroup AUROC, disparity gaps and equalized-odds gaps.
//!
//! Undefined quantities (a group with a single label class, fewer than two
//! defined groups) are reported as `None` and never imputed.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
///
/// Computed from tie groups after a sort, using exact integer pair counts,
/// so the value is identical to the quadratic pairwise count.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain {
            op: "auroc",
            detail: "NaN score".into(),
        });
    }
    let positives = labels.iter().filter(|&&y| y == 1).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({positives} positive, {negatives} negative)"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));

    // twice the Mann-Whitney U statistic
    let mut doubled: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        let (mut pos, mut neg) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == value {
            if labels[order[i]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        doubled += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAuroc {
    pub count: usize,
    pub positives: usize,
    pub auroc: Option<f64>,
}

/// AUROC restricted to each group `0..n_groups`.
pub fn subgroup_auroc(
    scores: &[f64],
    labels: &[u8],
    groups: &[usize],
    n_groups: usize,
) -> Result<Vec<GroupAuroc>> {
    if scores.len() != labels.len() || groups.len() != labels.len() {
        return Err(Error::shape("subgroup_auroc", &[scores.len(), labels.len()], &[groups.len()]));
    }
    let mut out = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for ((&sc, &y), &gr) in scores.iter().zip(labels).zip(groups) {
            if gr == g {
                s.push(sc);
                l.push(y);
            }
        }
        let auroc = match auroc(&s, &l) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        out.push(GroupAuroc {
            count: s.len(),
            positives: l.iter().filter(|&&y| y == 1).count(),
            auroc,
        });
    }
    Ok(out)
}

/// Largest absolute pairwise gap among defined values.
pub fn disparity(values: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "disparity needs at least two defined groups, got {}",
            defined.len()
        )));
    }
    let mut gap = 0.0f64;
    for (i, a) in defined.iter().enumerate() {
        for b in &defined[i + 1..] {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizedOdds {
    /// `None` for groups missing either class.
    pub per_group: Vec<Option<Rates>>,
    pub tpr_gap: Option<f64>,
    pub fpr_gap: Option<f64>,
}

/// TPR/FPR per group with `score >= threshold` predicted positive.
pub fn equalized_odds_gap(
    scores: &[f64],
    labels: &[u8],
    groups: &[usize],
    n_groups: usize,
    threshold: f64,
) -> Result<EqualizedOdds> {
    if scores.len() != labels.len() || groups.len() != labels.len() {
        return Err(Error::shape("equalized_odds_gap", &[scores.len(), labels.len()], &[groups.len()]));
    }
    // [tp, fn, fp, tn]
    let mut table = vec![[0usize; 4]; n_groups];
    for ((&s, &y), &g) in scores.iter().zip(labels).zip(groups) {
        let predicted = s >= threshold;
        let cell = match (y == 1, predicted) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        table[g][cell] += 1;
    }
    let per_group: Vec<Option<Rates>> = table
        .iter()
        .map(|&[tp, fnn, fp, tn]| {
            (tp + fnn > 0 && fp + tn > 0).then(|| Rates {
                tpr: tp as f64 / (tp + fnn) as f64,
                fpr: fp as f64 / (fp + tn) as f64,
            })
        })
        .collect();
    let tprs: Vec<Option<f64>> = per_group.iter().map(|r| r.map(|r| r.tpr)).collect();
    let fprs: Vec<Option<f64>> = per_group.iter().map(|r| r.map(|r| r.fpr)).collect();
    Ok(EqualizedOdds {
        tpr_gap: disparity(&tprs).ok(),
        fpr_gap: disparity(&fprs).ok(),
        per_group,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub category: String,
    pub count: usize,
    pub positives: usize,
    pub auroc: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub name: String,
    pub groups: Vec<GroupReport>,
    pub disparity: Option<f64>,
    pub tpr_gap: Option<f64>,
    pub fpr_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub threshold: f64,
    pub auroc: f64,
    pub attributes: Vec<AttributeReport>,
}

/// Overall and per-attribute metrics for scores aligned with `dataset`.
pub fn report(scores: &[f64], dataset: &Dataset, threshold: f64) -> Result<MetricsReport> {
    let labels = dataset.labels();
    if scores.len() != labels.len() {
        return Err(Error::shape("report", &[scores.len()], &[labels.len()]));
    }
    let overall = auroc(scores, &labels)?;
    let mut attributes = Vec::with_capacity(dataset.schema().len());
    for (j, attr) in dataset.schema().attributes().iter().enumerate() {
        let groups = dataset.groups(j);
        let k = attr.categories.len();
        let aurocs = subgroup_auroc(scores, &labels, &groups, k)?;
        let eo = equalized_odds_gap(scores, &labels, &groups, k, threshold)?;
        let values: Vec<Option<f64>> = aurocs.iter().map(|g| g.auroc).collect();
        attributes.push(AttributeReport {
            name: attr.name.clone(),
            groups: attr
                .categories
                .iter()
                .zip(aurocs)
                .zip(&eo.per_group)
                .map(|((category, a), rates)| GroupReport {
                    category: category.clone(),
                    count: a.count,
                    positives: a.positives,
                    auroc: a.auroc,
                    tpr: rates.map(|r| r.tpr),
                    fpr: rates.map(|r| r.fpr),
                })
                .collect(),
            disparity: disparity(&values).ok(),
            tpr_gap: eo.tpr_gap,
            fpr_gap: eo.fpr_gap,
        });
    }
    Ok(MetricsReport {
        n: scores.len(),
        threshold,
        auroc: overall,
        attributes,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

impl MetricsReport {
    /// Flat `(key, value)` pairs; keys are stable across versions.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("n".to_string(), self.n.to_string()),
            ("threshold".to_string(), self.threshold.to_string()),
            ("auroc".to_string(), self.auroc.to_string()),
        ];
        for a in &self.attributes {
            kv.push((format!("{}.disparity", a.name), fmt_opt(a.disparity)));
            kv.push((format!("{}.tpr_gap", a.name), fmt_opt(a.tpr_gap)));
            kv.push((format!("{}.fpr_gap", a.name), fmt_opt(a.fpr_gap)));
            for g in &a.groups {
                let p = format!("{}.{}", a.name, g.category);
                kv.push((format!("{p}.count"), g.count.to_string()));
                kv.push((format!("{p}.positives"), g.positives.to_string()));
                kv.push((format!("{p}.auroc"), fmt_opt(g.auroc)));
                kv.push((format!("{p}.tpr"), fmt_opt(g.tpr)));
                kv.push((format!("{p}.fpr"), fmt_opt(g.fpr)));
            }
        }
        kv
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["key", "value"])?;
        for (k, v) in self.key_values() {
            w.write_record([k, v])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeReport> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

/// Median, averaging the two middle values for even lengths.
pub fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Record, SensitiveAttribute, SensitiveSchema};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadratic pairwise count; the oracle for [`auroc`].
    fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut doubled = 0u128;
        let mut pairs = 0u128;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    doubled += 2;
                } else if scores[i] == scores[j] {
                    doubled += 1;
                }
            }
        }
        doubled as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        let (s, l) = ([0.1, 0.4, 0.35, 0.8], [0u8, 0, 1, 1]);
        assert_eq!(pairwise_auroc(&s, &l), 0.75);
        assert_eq!(auroc(&s, &l).unwrap(), 0.75);
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auroc(&[], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_matches_pairwise_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..300 {
            let n = rng.random_range(2..120);
            let levels = if case % 2 == 0 { 3 } else { 1000 };
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 7.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert_eq!(auroc(&scores, &labels).unwrap(), pairwise_auroc(&scores, &labels));
        }
    }

    #[test]
    fn subgroup_examples() {
        let scores = [0.1, 0.9, 0.2, 0.8, 0.3, 0.7];
        let labels = [0, 1, 0, 1, 1, 1];
        let groups = [0, 0, 1, 1, 2, 2];
        let out = subgroup_auroc(&scores, &labels, &groups, 3).unwrap();
        assert_eq!(out[0].auroc, Some(1.0));
        assert_eq!(out[0].auroc, out[1].auroc);
        assert_eq!(out[2].auroc, None);
        assert_eq!(out[2].positives, 2);
    }

    #[test]
    fn subgroup_equals_separate_computation() {
        let a = ([0.1, 0.5, 0.4, 0.9], [0u8, 1, 0, 1]);
        let b = ([0.6, 0.2, 0.3], [0u8, 1, 0]);
        let scores: Vec<f64> = a.0.iter().chain(&b.0).copied().collect();
        let labels: Vec<u8> = a.1.iter().chain(&b.1).copied().collect();
        let groups = [0, 0, 0, 0, 1, 1, 1];
        let out = subgroup_auroc(&scores, &labels, &groups, 2).unwrap();
        assert_eq!(out[0].auroc.unwrap(), auroc(&a.0, &a.1).unwrap());
        assert_eq!(out[1].auroc.unwrap(), auroc(&b.0, &b.1).unwrap());
    }

    #[test]
    fn disparity_examples() {
        assert!((disparity(&[Some(0.70), Some(0.69)]).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(disparity(&[Some(0.6); 3]).unwrap(), 0.0);
        let d = disparity(&[Some(0.6), Some(0.7), Some(0.65)]).unwrap();
        assert!((d - 0.1).abs() < 1e-12);
        assert!(disparity(&[Some(0.6), None]).is_err());
        assert_eq!(disparity(&[Some(0.5), None, Some(0.75)]).unwrap(), 0.25);
    }

    #[test]
    fn equalized_odds_examples() {
        let scores = [0.9, 0.1, 0.9, 0.1];
        let labels = [1, 0, 1, 0];
        let eo = equalized_odds_gap(&scores, &labels, &[0, 0, 1, 1], 2, 0.5).unwrap();
        assert_eq!((eo.tpr_gap, eo.fpr_gap), (Some(0.0), Some(0.0)));

        // group A: 4 of 5 positives caught, group B: 3 of 5; FPR 0 in both
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for (g, hits) in [(0usize, 4), (1, 3)] {
            for k in 0..5 {
                scores.push(if k < hits { 0.9 } else { 0.1 });
                labels.push(1);
                groups.push(g);
            }
            scores.push(0.2);
            labels.push(0);
            groups.push(g);
        }
        let eo = equalized_odds_gap(&scores, &labels, &groups, 2, 0.5).unwrap();
        assert!((eo.tpr_gap.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(eo.fpr_gap, Some(0.0));
    }

    #[test]
    fn equalized_odds_hand_tabulated() {
        // Group 0: (0.7,1) TP, (0.4,1) FN, (0.6,0) FP, (0.2,0) TN
        //   TPR 1/2, FPR 1/2
        // Group 1: (0.9,1) TP, (0.8,1) TP, (0.5,0) FP (>=), (0.1,0) TN
        //   TPR 1, FPR 1/2
        let scores = [0.7, 0.4, 0.6, 0.2, 0.9, 0.8, 0.5, 0.1];
        let labels = [1, 1, 0, 0, 1, 1, 0, 0];
        let groups = [0, 0, 0, 0, 1, 1, 1, 1];
        let eo = equalized_odds_gap(&scores, &labels, &groups, 2, 0.5).unwrap();
        assert_eq!(eo.per_group[0], Some(Rates { tpr: 0.5, fpr: 0.5 }));
        assert_eq!(eo.per_group[1], Some(Rates { tpr: 1.0, fpr: 0.5 }));
        assert_eq!(eo.tpr_gap, Some(0.5));
        assert_eq!(eo.fpr_gap, Some(0.0));
    }

    #[test]
    fn degenerate_group_is_flagged() {
        let eo = equalized_odds_gap(&[0.9, 0.2, 0.7], &[1, 0, 1], &[0, 0, 1], 2, 0.5).unwrap();
        assert_eq!(eo.per_group[1], None);
        assert_eq!(eo.tpr_gap, None);
    }

    fn toy_dataset(labels: &[u8], groups: &[usize]) -> Dataset {
        let schema = SensitiveSchema::new(vec![SensitiveAttribute {
            name: "insurance".into(),
            categories: vec!["private".into(), "public".into()],
        }])
        .unwrap();
        let records = labels
            .iter()
            .zip(groups)
            .map(|(&y, &g)| Record { x: vec![0.0], s: vec![g], y })
            .collect();
        Dataset::new(vec!["f".into()], "y", schema, records).unwrap()
    }

    #[test]
    fn report_is_internally_consistent_and_order_free() {
        let scores = [0.9, 0.3, 0.6, 0.4, 0.8, 0.2, 0.55, 0.45];
        let labels = [1, 0, 1, 0, 1, 0, 0, 1];
        let groups = [0, 0, 0, 0, 1, 1, 1, 1];
        let r = report(&scores, &toy_dataset(&labels, &groups), 0.5).unwrap();
        let a = r.attribute("insurance").unwrap();
        let per: Vec<Option<f64>> = a.groups.iter().map(|g| g.auroc).collect();
        assert_eq!(a.disparity, disparity(&per).ok());

        let perm = [7, 2, 5, 0, 3, 6, 1, 4];
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pl: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let pg: Vec<usize> = perm.iter().map(|&i| groups[i]).collect();
        let r2 = report(&ps, &toy_dataset(&pl, &pg), 0.5).unwrap();
        assert_eq!(r, r2);

        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("key,value\n"));
        assert!(csv.contains("insurance.disparity,"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["auroc"].as_f64(), Some(r.auroc));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn complement_symmetry_and_monotone_invariance(
            data in proptest::collection::vec((0u8..20, 0u8..2), 2..80)
        ) {
            let scores: Vec<f64> = data.iter().map(|&(s, _)| f64::from(s)).collect();
            let labels: Vec<u8> = data.iter().map(|&(_, y)| y).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auroc(&scores, &labels).unwrap();
            let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
            // exact in the pair counts; `1 - x` itself may round by an ulp
            let complement = 1.0 - auroc(&scores, &flipped).unwrap();
            prop_assert!((a - complement).abs() <= 2.0 * f64::EPSILON);
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() - 4.0).collect();
            prop_assert_eq!(a, auroc(&transformed, &labels).unwrap());
            prop_assert_eq!(a, pairwise_auroc(&scores, &labels));
        }

        #[test]
        fn disparity_is_label_permutation_invariant(v in proptest::collection::vec(0.0f64..1.0, 2..6)) {
            let opts: Vec<Option<f64>> = v.iter().copied().map(Some).collect();
            let mut rev = opts.clone();
            rev.reverse();
            prop_assert_eq!(disparity(&opts).unwrap(), disparity(&rev).unwrap());
            if v.len() == 2 {
                prop_assert_eq!(disparity(&opts).unwrap(), (v[0] - v[1]).abs());
            }
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(vec![]), None);
        assert_eq!(median(vec![0.3]), Some(0.3));
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }
}
