use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, then runs of tied scores.
fn tie_groups(scores: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups = Vec::new();
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && scores[idx[e]] == scores[idx[s]] {
            e += 1;
        }
        groups.push((s, e));
        s = e;
    }
    (idx, groups)
}

/// Area under the ROC curve from midranks: P(s+ > s-) + P(tie)/2.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("ROC AUC needs both classes".into()));
    }
    let (idx, groups) = tie_groups(scores);
    let n = scores.len();
    // Ascending ranks: position i in descending order has rank n - i.
    let mut rank_sum = 0.0;
    for (s, e) in groups {
        let mid = ((n - s) + (n - e + 1)) as f64 / 2.0;
        let k = idx[s..e].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum += mid * k as f64;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Step-wise area under the precision-recall curve: the sum of precision
/// times recall increment over descending thresholds, ties grouped.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::Data("PR AUC needs a positive".into()));
    }
    let (idx, groups) = tie_groups(scores);
    let mut tp = 0usize;
    let mut area = 0.0;
    for (s, e) in groups {
        let k = idx[s..e].iter().filter(|&&i| labels[i] == 1).count();
        if k > 0 {
            tp += k;
            area += (k as f64 / pos as f64) * (tp as f64 / e as f64);
        }
    }
    Ok(area)
}
