use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};

use castdet::eval::EvalResult;
use castdet::train::MetricRecord;

use crate::plot::{line_chart, Series};
use crate::rundir::{read_json, read_lines, read_manifest};
use crate::stages::{medians, AblationSummary};

const HEADER: &str = "      mAP  mAP_base  mAP_novel     HM  mAR_base  mAR_novel";

fn row(r: &EvalResult) -> String {
    format!("{:>9.1} {:>9.1} {:>10.1} {:>6.1} {:>9.1} {:>10.1}", r.map, r.map_base, r.map_novel, r.hm, r.mar_base, r.mar_novel)
}

pub fn eval_table(r: &EvalResult) -> String {
    let mut s = format!("{HEADER}\n{}\n\nper-class AP\n", row(r));
    for (name, ap) in &r.per_class_ap {
        let _ = writeln!(s, "  {name:<10} {ap:6.1}");
    }
    s
}

pub fn ablation_table(summary: &AblationSummary) -> String {
    let mut s = format!("grid: {}\n{:<16} {:>5}{HEADER}\n", summary.grid, "variant", "runs");
    for (v, n, m) in medians(summary) {
        let g = |k: &str| m.get(k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            s,
            "{v:<16} {n:>5}{:>9.1} {:>9.1} {:>10.1} {:>6.1} {:>9.1} {:>10.1}",
            g("map"),
            g("map_base"),
            g("map_novel"),
            g("hm"),
            g("mar_base"),
            g("mar_novel")
        );
    }
    s.push_str("(medians over seeds)\n");
    s
}

/// Tables and curves for a training run or an ablation grid, written to
/// `<run>/report/`.
pub fn report(run: &Path) -> Result<(String, Vec<PathBuf>)> {
    let m = read_manifest(run)?;
    let out = run.join("report");
    std::fs::create_dir_all(&out)?;
    if m.stage == "ablate" {
        let summary: AblationSummary = read_json(&run.join("summary.json"))?;
        let t = ablation_table(&summary);
        let p = out.join("summary.txt");
        std::fs::write(&p, &t)?;
        return Ok((t, vec![p]));
    }
    ensure!(m.stage == "train", "nothing to report for a `{}` run", m.stage);
    let records: Vec<MetricRecord> = read_lines(&run.join("metrics.jsonl"))?;

    let mut table = format!("{:>9}{HEADER}\n", "iteration");
    let mut evals = Vec::new();
    let (mut l_s, mut l_u, mut l_d, mut total) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in &records {
        match r {
            MetricRecord::Eval { iteration, result, .. } => {
                let _ = writeln!(table, "{iteration:>9}{}", row(result));
                evals.push((*iteration as f64, result));
            }
            MetricRecord::Train { iteration, loss, .. } => {
                let x = *iteration as f64;
                l_s.push((x, loss.l_s));
                l_u.push((x, loss.l_u_cls + loss.l_u_reg));
                l_d.push((x, loss.l_d));
                total.push((x, loss.total));
            }
            MetricRecord::QueueFill { processed, stats } => {
                let _ = writeln!(table, "queue warm-up: {processed} images processed, {} entries", stats.total);
            }
        }
    }
    if let Some((_, last)) = evals.last() {
        let _ = write!(table, "\nfinal\n{}", eval_table(last));
    }

    let mut files = Vec::new();
    let mut legend = String::from("\ncurves\n");
    let mut plot = |name: &str, series: Vec<Series>| -> Result<()> {
        if series.iter().all(|s| s.points.is_empty()) {
            return Ok(());
        }
        let p = out.join(name);
        let _ = writeln!(legend, "  {name}: {}", series.iter().map(|s| format!("{} = {}", s.label, s.color_name())).collect::<Vec<_>>().join(", "));
        line_chart(&series, &p)?;
        files.push(p);
        Ok(())
    };
    plot(
        "loss.png",
        vec![Series::new("total", 0, total), Series::new("l_s", 1, l_s), Series::new("l_u", 2, l_u), Series::new("l_d", 3, l_d)],
    )?;
    plot(
        "recall.png",
        vec![
            Series::new("mAR_base", 0, evals.iter().map(|(x, r)| (*x, r.mar_base)).collect()),
            Series::new("mAR_novel", 1, evals.iter().map(|(x, r)| (*x, r.mar_novel)).collect()),
        ],
    )?;
    let classes: Vec<String> = evals.last().map(|(_, r)| r.per_class_ap.keys().cloned().collect()).unwrap_or_default();
    plot(
        "per_class_ap.png",
        classes
            .iter()
            .enumerate()
            .map(|(i, c)| Series::new(c, i, evals.iter().map(|(x, r)| (*x, r.per_class_ap.get(c).copied().unwrap_or(0.0))).collect()))
            .collect(),
    )?;
    table.push_str(&legend);
    let p = out.join("table.txt");
    std::fs::write(&p, &table)?;
    files.insert(0, p);
    Ok((table, files))
}
