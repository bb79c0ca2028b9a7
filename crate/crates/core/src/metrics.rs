//! Classification and ranking metrics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub aupr: f64,
    pub auroc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// AUROC (Mann-Whitney, ties count one half) and average precision of
/// `scores` for the positive class. Higher score means more positive.
pub fn ranking_metrics(scores: &[f64], labels: &[bool]) -> Result<RankingResult> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ranking metrics need both classes (positives {n_pos}, negatives {n_neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // walk tie groups from the highest score down
    let mut pairs_won = 0.0;
    let mut ap = 0.0;
    let mut pos_seen = 0usize;
    let mut neg_seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&r| labels[r]).count();
        let group_neg = (j - i) - group_pos;
        // positives in this group beat every negative below it and tie with the group's negatives
        pairs_won += group_pos as f64 * (n_neg - neg_seen - group_neg) as f64
            + 0.5 * group_pos as f64 * group_neg as f64;
        pos_seen += group_pos;
        neg_seen += group_neg;
        if group_pos > 0 {
            // every positive in a tie group gets the precision at the group's end
            ap += group_pos as f64 * pos_seen as f64 / j as f64;
        }
        i = j;
    }
    Ok(RankingResult {
        aupr: ap / n_pos as f64,
        auroc: pairs_won / (n_pos as f64 * n_neg as f64),
        n_pos,
        n_neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrierScore {
    pub raw: f64,
    pub scaled: f64,
}

/// Mean over examples of `sum_k (prob_k - y_k)^2`; `scaled` is `100 * raw`.
pub fn brier_score(probs: &[Vec<f64>], labels: &[usize]) -> Result<BrierScore> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Contract("brier score needs equal, non-empty inputs".into()));
    }
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        if l >= p.len() {
            return Err(Error::Contract(format!("label {l} out of range")));
        }
        total += p
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let y = if k == l { 1.0 } else { 0.0 };
                (v - y) * (v - y)
            })
            .sum::<f64>();
    }
    let raw = total / probs.len() as f64;
    Ok(BrierScore { raw, scaled: 100.0 * raw })
}

/// Overlap `sum_b min(h_a[b], h_b[b])` of two normalized histograms over
/// `bins` equal-width bins on [0, 1].
pub fn histogram_overlap(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return Err(Error::Contract("histogram overlap needs data and bins".into()));
    }
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for x in v {
            let b = ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            h[b] += 1.0;
        }
        h.iter_mut().for_each(|c| *c /= v.len() as f64);
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(ha.iter().zip(&hb).map(|(x, y)| x.min(*y)).sum())
}

fn midranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        order[i..j].iter().for_each(|&k| ranks[k] = r);
        i = j;
    }
    ranks
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract("spearman needs two equal series of length >= 2".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("spearman inputs must be finite".into()));
    }
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
