//! Evaluation statistics.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Area under the ROC curve via the Mann–Whitney rank statistic; tied
/// scores share their average rank, which gives ties half credit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&k| labels[k] == 1).map(|k| ranks[k]).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Fraction of correct predictions at threshold 0.5 on probabilities.
pub fn accuracy(probs: &[f64], labels: &[u8]) -> f64 {
    let ok = probs.iter().zip(labels).filter(|(&p, &l)| u8::from(p >= 0.5) == l).count();
    ok as f64 / probs.len().max(1) as f64
}

/// 1 − SS_res/SS_tot; `None` when the target has zero variance.
pub fn r2(pred: &[f64], target: &[f64]) -> Option<f64> {
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / target.len().max(1) as f64
}

/// Pearson correlation; `None` if either side is constant or shorter than 2.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-Wasserstein distance between two empirical distributions: the integral
/// of |F_a − F_b| over the merged support.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
    all.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0, 0);
    let mut w = 0.0;
    for k in 0..all.len().saturating_sub(1) {
        while ia < a.len() && a[ia] <= all[k] {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= all[k] {
            ib += 1;
        }
        w += (ia as f64 / na - ib as f64 / nb).abs() * (all[k + 1] - all[k]);
    }
    w
}

/// Sample mean and covariance (divisor n − 1) of row vectors.
pub fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    cov /= (n.max(2) - 1) as f64;
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// ‖μa − μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½).
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("Fréchet distance needs at least two samples per set"));
    }
    if a[0].len() != b[0].len() {
        return Err(Error::invalid(format!("feature dims {} vs {}", a[0].len(), b[0].len())));
    }
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let diff: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = sqrt_psd(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_psd(&inner).trace();
    Ok((diff + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// Mean and population standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Sorts pairs by `key`, splits them into `buckets` near-equal groups and
/// returns the mean `value` of each group, lowest key first.
pub fn bucket_means(key: &[f64], value: &[f64], buckets: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..key.len().min(value.len())).collect();
    order.sort_by(|&a, &b| key[a].total_cmp(&key[b]));
    let n = order.len();
    (0..buckets)
        .map(|b| {
            let part = &order[b * n / buckets..(b + 1) * n / buckets];
            part.iter().map(|&i| value[i]).sum::<f64>() / part.len().max(1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn bucket_means_follow_key_order() {
        let m = bucket_means(&[3.0, 1.0, 2.0, 6.0, 5.0, 4.0], &[30.0, 10.0, 20.0, 60.0, 50.0, 40.0], 3);
        assert_eq!(m, vec![15.0, 35.0, 55.0]);
    }

    fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_rank_equals_pair_counting() {
        let mut rng = Rng::new(8);
        let s: Vec<f64> = (0..50).map(|_| (rng.uniform() * 10.0).floor()).collect();
        let l: Vec<u8> = (0..50).map(|i| (i % 2) as u8).collect();
        assert_eq!(auc(&s, &l).unwrap(), brute_auc(&s, &l));
    }

    #[test]
    fn separable_scores_are_perfect() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [0, 0, 1, 1];
        assert_eq!(auc(&s, &l).unwrap(), 1.0);
        assert_eq!(accuracy(&s, &l), 1.0);
    }

    #[test]
    fn random_scores_give_half_auc() {
        let mut rng = Rng::new(21);
        let s: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
        let l: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
        assert!((auc(&s, &l).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn r2_definitions() {
        let t = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r2(&t, &t), Some(1.0));
        assert_eq!(mae(&t, &t), 0.0);
        assert_eq!(r2(&[3.5; 4], &t), Some(0.0));
        assert_eq!(r2(&[1.0, 2.0], &[3.0, 3.0]), None);
        let mut rng = Rng::new(4);
        let p: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let ym = y.iter().sum::<f64>() / 20.0;
        let direct = 1.0
            - p.iter().zip(&y).map(|(a, b)| (b - a) * (b - a)).sum::<f64>()
                / y.iter().map(|b| (b - ym) * (b - ym)).sum::<f64>();
        assert!((r2(&p, &y).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn pearson_bounds() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), None);
    }

    #[test]
    fn wasserstein_of_shift() {
        let a = [0.0, 1.0, 2.0];
        let b = [0.5, 1.5, 2.5];
        assert!((wasserstein1(&a, &b) - 0.5).abs() < 1e-12);
        assert_eq!(wasserstein1(&a, &a), 0.0);
    }

    #[test]
    fn frechet_of_identical_and_shifted_sets() {
        let mut rng = Rng::new(3);
        let a: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v + 2.0).collect()).collect();
        assert!((frechet_distance(&a, &b).unwrap() - 12.0).abs() < 1e-6);
    }
}
