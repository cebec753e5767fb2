//! Markdown and CSV rendering of finished experiments. Every number comes
//! from a manifest artifact whose digest is checked first.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::ExperimentKind;
use super::manifest::RunManifest;
use super::matrix::MatrixResults;
use super::ood::OodResults;
use super::read_json;
use crate::error::{Error, Result};
use crate::eval::{csv_row, format_mean_se, format_p, MetricResult, SeLimit, CSV_HEADER};

pub const REPORT_MD: &str = "report.md";

/// A rendered bundle: file names with their contents.
pub type Bundle = Vec<(String, Vec<u8>)>;

fn p_cell(p: Option<f64>) -> String {
    p.map_or_else(|| "n/a".to_string(), format_p)
}

fn ci_cell(m: &MetricResult) -> String {
    format!("{:.3} [{:.3}, {:.3}]", m.value, m.lo, m.hi)
}

fn metric_csv(tables: &[&Vec<Vec<MetricResult>>]) -> Vec<u8> {
    let mut out = format!("{CSV_HEADER}\n");
    for t in tables {
        for m in t.iter().flatten() {
            out.push_str(&csv_row(m));
            out.push('\n');
        }
    }
    out.into_bytes()
}

fn md_table(md: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(md, "| {} |", header.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(md, "| {} |", r.join(" | "));
    }
    md.push('\n');
}

fn render_matrix(res: &MatrixResults, prefix: &str, md: &mut String, files: &mut Bundle) {
    let _ = writeln!(md, "## Pretraining cohort by label cohort\n");
    let _ = writeln!(md, "{} runs; cells show mean [95% CI].\n", res.runs);
    let mut header = vec!["pretraining".to_string()];
    header.extend(res.cohorts.iter().map(|c| c.name.clone()));
    header.push("row mean".into());
    for (title, table, means) in [
        ("Age MAE (years)", &res.mae, &res.row_mean_mae),
        ("Sex AUROC", &res.auroc, &res.row_mean_auroc),
    ] {
        let _ = writeln!(md, "### {title}\n");
        let rows: Vec<Vec<String>> = res
            .encoders
            .iter()
            .enumerate()
            .map(|(e, name)| {
                let mut row = vec![name.clone()];
                row.extend(table[e].iter().map(ci_cell));
                row.push(format!("{:.3}", means[e]));
                row
            })
            .collect();
        md_table(md, &header, &rows);
    }
    let _ = writeln!(md, "### Kruskal-Wallis across pretraining cohorts\n");
    let rows: Vec<Vec<String>> = res
        .kruskal
        .iter()
        .map(|k| {
            let name = res.cohorts.iter().find(|c| c.id == k.cohort).map_or("?", |c| &c.name);
            vec![name.to_string(), k.metric.clone(), format!("{:.4}", k.h), format_p(k.p)]
        })
        .collect();
    md_table(md, &["label cohort".into(), "metric".into(), "H".into(), "p".into()], &rows);

    files.push((format!("{prefix}matrix_metrics.csv"), metric_csv(&[&res.mae, &res.auroc])));
    let mut kw = String::from("cohort,metric,h,p\n");
    for k in &res.kruskal {
        let _ = writeln!(kw, "{},{},{:.6},{:.6}", k.cohort, k.metric, k.h, k.p);
    }
    files.push((format!("{prefix}kruskal.csv"), kw.into_bytes()));
}

fn render_ood(
    res: &OodResults,
    dir: &Path,
    manifest: &RunManifest,
    prefix: &str,
    md: &mut String,
    files: &mut Bundle,
) -> Result<()> {
    let head = res.cohorts.iter().find(|c| c.id == res.head_cohort).map_or("?", |c| c.name.as_str());
    let _ = writeln!(md, "## Out-of-distribution evaluation\n");
    let _ = writeln!(
        md,
        "Heads trained on {head}; {} runs on subsets of {} records; cells show mean(SE).\n",
        res.runs, res.subset_size
    );
    let mut header = vec!["batching".to_string()];
    header.extend(res.cohorts.iter().map(|c| c.name.clone()));
    header.push("mean".into());
    for (title, table, limit) in [
        ("Age MAE (years)", &res.mae, SeLimit::Mae),
        ("Sex AUROC", &res.auroc, SeLimit::Auc),
    ] {
        let _ = writeln!(md, "### {title}\n");
        let mut rows: Vec<Vec<String>> = res
            .encoders
            .iter()
            .enumerate()
            .map(|(e, name)| {
                let mut row = vec![name.clone()];
                row.extend(table[e].iter().map(|m| format_mean_se(m.value, m.se, limit)));
                let s = &res.summary[e];
                let rm = if limit == SeLimit::Mae { &s.row_mae } else { &s.row_auroc };
                row.push(format_mean_se(rm.value, rm.se, limit));
                row
            })
            .collect();
        let (test, ps) = if limit == SeLimit::Mae {
            ("p (Wilcoxon)", &res.wilcoxon_mae)
        } else {
            ("p (DeLong, median)", &res.delong_auroc)
        };
        let mut prow = vec![test.to_string()];
        prow.extend(ps.iter().map(|c| p_cell(c.p)));
        prow.push(String::new());
        rows.push(prow);
        md_table(md, &header, &rows);
    }

    let _ = writeln!(md, "### Degradation\n");
    let rows: Vec<Vec<String>> = res
        .summary
        .iter()
        .map(|s| {
            vec![
                s.encoder.clone(),
                format!("{:.3}", s.id_mae),
                format!("{:.3}", s.ood_mae),
                format!("{:.3}", s.degradation),
                format!("{:.3}", s.id_auroc),
                format!("{:.3}", s.ood_auroc),
            ]
        })
        .collect();
    let header: Vec<String> = ["batching", "ID MAE", "OOD MAE", "OOD - ID MAE", "ID AUROC", "OOD AUROC"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    md_table(md, &header, &rows);

    let _ = writeln!(md, "### Cohort probe\n");
    let rows: Vec<Vec<String>> = res
        .probe
        .iter()
        .map(|p| {
            vec![
                p.encoder.clone(),
                format!("{:.3}", p.score),
                format!("{:.3}", p.explained[0]),
                format!("{:.3}", p.explained[1]),
                format!("{prefix}pca_{}.csv", p.encoder),
            ]
        })
        .collect();
    let header: Vec<String> = ["batching", "probe AUROC", "PC1 var", "PC2 var", "coordinates"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    md_table(md, &header, &rows);

    let _ = writeln!(md, "### Age-binned MAE (first run)\n");
    let mut bins_csv = String::from("encoder,cohort,lo,hi,count,mae,normalized\n");
    for b in &res.bins {
        let name = res.cohorts.iter().find(|c| c.id == b.cohort).map_or("?", |c| &c.name);
        let _ = writeln!(md, "#### {} on {name}\n", b.encoder);
        let rows: Vec<Vec<String>> = b
            .table
            .bins
            .iter()
            .map(|bin| {
                let opt = |v: Option<f64>| v.map_or_else(|| "empty".to_string(), |x| format!("{x:.3}"));
                vec![
                    format!("{:.1}-{:.1}", bin.lo, bin.hi),
                    bin.count.to_string(),
                    opt(bin.mae),
                    opt(bin.normalized),
                ]
            })
            .collect();
        let header: Vec<String> = ["age", "n", "MAE", "normalized"].iter().map(|s| s.to_string()).collect();
        md_table(md, &header, &rows);
        for bin in &b.table.bins {
            let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
            let _ = writeln!(
                bins_csv,
                "{},{},{:.3},{:.3},{},{},{}",
                b.encoder,
                b.cohort,
                bin.lo,
                bin.hi,
                bin.count,
                opt(bin.mae),
                opt(bin.normalized)
            );
        }
    }

    let mut mean_rows: Vec<Vec<MetricResult>> = Vec::new();
    mean_rows.push(res.summary.iter().flat_map(|s| [s.row_mae.clone(), s.row_auroc.clone()]).collect());
    files.push((
        format!("{prefix}ood_metrics.csv"),
        metric_csv(&[&res.mae, &res.auroc, &mean_rows]),
    ));
    let mut tests = String::from("cohort,wilcoxon_mae_p,delong_auroc_p\n");
    for (w, d) in res.wilcoxon_mae.iter().zip(&res.delong_auroc) {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let _ = writeln!(tests, "{},{},{}", w.cohort, opt(w.p), opt(d.p));
    }
    files.push((format!("{prefix}ood_tests.csv"), tests.into_bytes()));
    let mut probe = String::from("encoder,score,pc1_explained,pc2_explained\n");
    for p in &res.probe {
        let _ = writeln!(probe, "{},{:.6},{:.6},{:.6}", p.encoder, p.score, p.explained[0], p.explained[1]);
    }
    files.push((format!("{prefix}probe.csv"), probe.into_bytes()));
    files.push((format!("{prefix}bins.csv"), bins_csv.into_bytes()));
    for p in &res.probe {
        let path = manifest.artifact_path(dir, &format!("pca/{}", p.encoder))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.push((format!("{prefix}pca_{}.csv", p.encoder), bytes));
    }
    Ok(())
}

/// Renders the report bundle for one or more experiment directories. With
/// several, file names are prefixed by the directory's position.
pub fn render_report(dirs: &[PathBuf]) -> Result<Bundle> {
    if dirs.is_empty() {
        return Err(Error::Empty("report needs at least one manifest".into()));
    }
    let mut md = String::from("# Experiment report\n\n");
    let mut files = Bundle::new();
    for (i, dir) in dirs.iter().enumerate() {
        let manifest = RunManifest::load(dir)?;
        manifest.verify(dir)?;
        let prefix = if dirs.len() > 1 { format!("{i}-") } else { String::new() };
        let _ = writeln!(
            md,
            "<!-- config {} code {} -->\n",
            manifest.config_digest, manifest.code_version
        );
        let results = manifest.artifact_path(dir, "results")?;
        match manifest.kind {
            ExperimentKind::Matrix => {
                render_matrix(&read_json::<MatrixResults>(&results)?, &prefix, &mut md, &mut files)
            }
            ExperimentKind::Ood => render_ood(
                &read_json::<OodResults>(&results)?,
                dir,
                &manifest,
                &prefix,
                &mut md,
                &mut files,
            )?,
        }
    }
    files.insert(0, (REPORT_MD.to_string(), md.into_bytes()));
    Ok(files)
}

/// Writes the bundle under `out`, returning the written paths.
pub fn write_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let bundle = render_report(dirs)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    bundle
        .into_iter()
        .map(|(name, bytes)| {
            let path = out.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
