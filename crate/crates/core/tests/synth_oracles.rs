//! Oracles that check trained or generated quantities against ground truth.

use primed_core::cvae::{infer_substitute_confounders, CvaeConfig};
use primed_core::data::SplitRatios;
use primed_core::metrics::{self, auroc, disparity, equalized_odds_gap, subgroup_auroc};
use primed_core::pipeline::{fit_stage1, run_method, Prepared, Settings};
use primed_core::predictor::Method;
use primed_core::synth::{generate, pilot_sweep, SynthConfig};
use primed_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Newton-Raphson logistic regression; returns coefficients and standard
/// errors from the inverse observed information.
fn logistic_fit(design: &[Vec<f64>], y: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let p = design[0].len();
    let mut beta = vec![0.0; p];
    let mut info = vec![vec![0.0; p]; p];
    for _ in 0..30 {
        let mut grad = vec![0.0; p];
        info = vec![vec![0.0; p]; p];
        for (row, &yi) in design.iter().zip(y) {
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let w = mu * (1.0 - mu);
            for a in 0..p {
                grad[a] += (yi as f64 - mu) * row[a];
                for b in 0..p {
                    info[a][b] += w * row[a] * row[b];
                }
            }
        }
        let step = solve(&info, &grad);
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-10 {
            break;
        }
    }
    let se = (0..p)
        .map(|k| {
            let mut e = vec![0.0; p];
            e[k] = 1.0;
            solve(&info, &e)[k].sqrt()
        })
        .collect();
    (beta, se)
}

/// Gaussian elimination with partial pivoting.
fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &v)| {
            let mut r = row.clone();
            r.push(v);
            r
        })
        .collect();
    for c in 0..n {
        let pivot = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, pivot);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                let pivot_row = m[c].clone();
                for (dst, src) in m[r].iter_mut().zip(&pivot_row).skip(c) {
                    *dst -= f * src;
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

fn z_statistics(gamma: f64) -> Vec<f64> {
    let cfg = SynthConfig {
        gamma,
        seed: 21,
        ..SynthConfig::default()
    };
    let (data, truth) = generate(&cfg).unwrap();
    let k = truth.z.cols();
    let design: Vec<Vec<f64>> = data
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![1.0];
            row.extend(&r.x);
            row.push(r.s[0] as f64);
            row.extend(truth.z.row(i));
            row
        })
        .collect();
    let (beta, se) = logistic_fit(&design, &data.labels());
    let p = beta.len();
    (p - k..p).map(|j| beta[j] / se[j]).collect()
}

#[test]
fn gamma_zero_outcome_ignores_confounders_given_x_and_s() {
    let null = z_statistics(0.0);
    assert!(null.iter().all(|t| t.abs() < 3.0), "{null:?}");
    let confounded = z_statistics(2.0);
    assert!(confounded.iter().any(|t| t.abs() > 3.0), "{confounded:?}");
}

#[test]
fn no_confounding_and_no_group_effect_gives_small_disparity() {
    let base = SynthConfig {
        records: 20_000,
        eta: 0.0,
        ..SynthConfig::default()
    };
    let ratios = SplitRatios {
        train: 0.5,
        validation: 0.1,
        test: 0.4,
    };
    let seeds: Vec<u64> = (0..10).collect();
    let table = pilot_sweep(&base, &[0.0], &seeds, &ratios, &Settings::default())
    .unwrap();
    assert!(table.medians[0].disparity < 0.02, "{:?}", table.medians);
}

fn abs_corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).abs()
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row(r)[c]).collect()
}

/// Mean |corr| under the best one-to-one matching of columns.
fn best_matched(a: &Tensor, b: &Tensor) -> f64 {
    let k = a.cols();
    let corr: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| abs_corr(&column(a, i), &column(b, j))).collect())
        .collect();
    fn search(corr: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == corr.len() {
            return 0.0;
        }
        let mut best = f64::MIN;
        for j in 0..corr.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(corr[row][j] + search(corr, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    search(&corr, 0, &mut vec![false; k]) / k as f64
}

#[test]
fn learned_confounders_track_the_true_ones() {
    let cfg = SynthConfig {
        records: 2000,
        gamma: 3.0,
        seed: 5,
        ..SynthConfig::default()
    };
    let (data, truth) = generate(&cfg).unwrap();
    let prep = Prepared::new(&data, &SplitRatios::default(), 5).unwrap();
    let settings = Settings {
        cvae: CvaeConfig {
            latent_dim: cfg.confounders,
            ..CvaeConfig::default()
        },
        ..Settings::default()
    };
    let stage1 = fit_stage1(&prep, &settings).unwrap();
    let z = infer_substitute_confounders(&stage1.model, &prep.train.encode()).unwrap();
    assert_eq!(z, stage1.z_train);

    let true_rows: Vec<f64> = prep
        .split
        .train
        .iter()
        .flat_map(|&i| truth.z.row(i).to_vec())
        .collect();
    let true_z = Tensor::matrix(z.rows(), z.cols(), true_rows).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Tensor::matrix(
        z.rows(),
        z.cols(),
        (0..z.len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
    .unwrap();
    let signal = best_matched(&z, &true_z);
    let chance = best_matched(&z, &noise);
    assert!(signal > chance, "signal {signal}, noise {chance}");
}

#[test]
fn report_matches_standalone_metric_calls() {
    let (data, _) = generate(&SynthConfig {
        gamma: 2.0,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let prep = Prepared::new(&data, &SplitRatios::default(), 9).unwrap();
    let settings = Settings::default();
    let outcome = run_method(Method::Dnn, &prep, None, &settings).unwrap();
    let labels = prep.test.labels();
    let scores = &outcome.test_scores;
    let report = metrics::report(scores, &prep.test, settings.threshold).unwrap();
    assert_eq!(report, outcome.report);
    assert_eq!(report.auroc, auroc(scores, &labels).unwrap());
    let groups = subgroup_auroc(scores, &labels, &prep.test.groups(0), 2).unwrap();
    let per_group: Vec<Option<f64>> = groups.iter().map(|g| g.auroc).collect();
    assert_eq!(report.attributes[0].disparity, Some(disparity(&per_group).unwrap()));
    let eo = equalized_odds_gap(scores, &labels, &prep.test.groups(0), 2, settings.threshold)
        .unwrap();
    assert_eq!(report.attributes[0].tpr_gap, eo.tpr_gap);
    assert_eq!(report.attributes[0].fpr_gap, eo.fpr_gap);
}
