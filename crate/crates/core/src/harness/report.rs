use std::collections::BTreeMap;
use std::fmt::Write as _;

use cehr_tensor::Tensor;

use super::experiment::{ExperimentData, MetricReport, Task};
use super::pca::pca_2d;
use crate::error::Result;
use crate::event_store::quantile;
use crate::model::CehrModel;
use crate::sequence::{build_visits, Variant, Vocabulary, LT, W0};

/// `task,model,fraction,fold,auc,pr_auc`, one row per fold.
pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("task,model,fraction,fold,auc,pr_auc\n");
    for r in reports {
        for f in &r.folds {
            let _ = writeln!(s, "{},{},{},{},{:.17},{:.17}", r.task, r.model, r.fraction, f.fold, f.auc, f.pr_auc);
        }
    }
    s
}

fn ordered<'a>(xs: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = Vec::new();
    for x in xs {
        if !seen.contains(&x) {
            seen.push(x);
        }
    }
    seen
}

fn grid(out: &mut String, reports: &[&MetricReport], cell: fn(&MetricReport) -> String) {
    let tasks = ordered(reports.iter().map(|r| r.task.as_str()));
    let models = ordered(reports.iter().map(|r| r.model.as_str()));
    let _ = writeln!(out, "| model | {} |", tasks.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(tasks.len()));
    for m in models {
        let cells: Vec<String> = tasks
            .iter()
            .map(|t| {
                reports
                    .iter()
                    .find(|r| r.model == m && r.task == *t)
                    .map_or("n/a".into(), |r| cell(r))
            })
            .collect();
        let _ = writeln!(out, "| {m} | {} |", cells.join(" | "));
    }
}

/// Markdown grids of mean±std ROC AUC and PR AUC, models as rows and tasks
/// as columns, one section per training fraction.
pub fn report_md(title: &str, reports: &[MetricReport]) -> String {
    let mut out = format!("# {title}\n");
    let mut fractions: Vec<f64> = Vec::new();
    for r in reports {
        if !fractions.contains(&r.fraction) {
            fractions.push(r.fraction);
        }
    }
    for f in fractions {
        let sel: Vec<&MetricReport> = reports.iter().filter(|r| r.fraction == f).collect();
        let n = sel.first().map_or(0, |r| r.folds.len());
        let _ = writeln!(out, "\n## Training fraction {f} ({n} folds)\n\n### ROC AUC\n");
        grid(&mut out, &sel, MetricReport::auc_cell);
        let _ = writeln!(out, "\n### PR AUC\n");
        grid(&mut out, &sel, MetricReport::pr_auc_cell);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthRow {
    pub task: String,
    pub variant: Variant,
    pub n: usize,
    pub median: f64,
    pub p95: f64,
}

/// Token counts of each example's feature window, before windowing.
pub fn sequence_lengths(data: ExperimentData, task: &Task, variant: Variant) -> Result<Vec<usize>> {
    task.examples
        .iter()
        .map(|ex| {
            let p = data.store.patient(&ex.person_id)?;
            Ok(build_visits(&p.person, &ex.feature_visits(p), variant, data.vocab, data.types)?.len())
        })
        .collect()
}

pub fn sequence_length_report(data: ExperimentData, tasks: &[Task], variants: &[Variant]) -> Result<Vec<LengthRow>> {
    let mut rows = Vec::new();
    for t in tasks {
        for &v in variants {
            let mut l: Vec<f64> = sequence_lengths(data, t, v)?.into_iter().map(|x| x as f64).collect();
            l.sort_by(f64::total_cmp);
            let (median, p95) = if l.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (quantile(&l, 0.5), quantile(&l, 0.95))
            };
            rows.push(LengthRow {
                task: t.name.clone(),
                variant: v,
                n: l.len(),
                median,
                p95,
            });
        }
    }
    Ok(rows)
}

pub fn lengths_csv(rows: &[LengthRow]) -> String {
    let mut s = String::from("task,variant,n,median,p95\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.task, r.variant.name(), r.n, r.median, r.p95);
    }
    s
}

/// PCA of the learned artificial time token embeddings.
pub fn att_pca(model: &CehrModel, vocab: &Vocabulary) -> Result<Vec<(String, [f64; 2])>> {
    let ids: Vec<u32> = (W0..=LT).collect();
    let emb: Tensor = model.token_embeddings(&ids)?;
    let coords = pca_2d(&emb)?;
    Ok(ids.iter().map(|&i| vocab.token(i).to_string()).zip(coords).collect())
}

pub fn att_pca_csv(rows: &[(String, [f64; 2])]) -> String {
    let mut s = String::from("token,x,y\n");
    for (t, [x, y]) in rows {
        let _ = writeln!(s, "{t},{x},{y}");
    }
    s
}

/// Mean AUC per model across reports, keyed by model name.
pub fn mean_auc_by_model(reports: &[MetricReport]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        let e = acc.entry(r.model.clone()).or_default();
        e.0 += r.auc().0;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
