//! Tables and plots over a set of run reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::pipeline::Report;

/// Reads `report.json` from each run directory.
pub fn collect_reports(dirs: &[PathBuf]) -> Result<Vec<(PathBuf, Report)>> {
    dirs.iter()
        .map(|d| {
            let text = fs::read_to_string(d.join("report.json"))?;
            Ok((d.clone(), serde_json::from_str(&text)?))
        })
        .collect()
}

pub fn to_csv(reports: &[(PathBuf, Report)]) -> String {
    let mut s = String::from("run,ablation,seed,acc1,acc5,acc20,mrr,m,param_count,trainable_count\n");
    for (dir, r) in reports {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{},{},{}",
            dir.display(),
            r.ablation,
            r.seed,
            r.acc1,
            r.acc5,
            r.acc20,
            r.mrr,
            r.m,
            r.footprint.param_count,
            r.footprint.trainable_count
        );
    }
    s
}

/// Mean and sample standard deviation of each metric per ablation label,
/// in first-seen order.
pub fn summarize(reports: &[(PathBuf, Report)]) -> Vec<(String, [(f64, f64); 4], usize)> {
    let mut labels: Vec<String> = Vec::new();
    for (_, r) in reports {
        if !labels.contains(&r.ablation) {
            labels.push(r.ablation.clone());
        }
    }
    labels
        .into_iter()
        .map(|l| {
            let rs: Vec<&Report> = reports.iter().map(|(_, r)| r).filter(|r| r.ablation == l).collect();
            let stat = |f: fn(&Report) -> f64| {
                let n = rs.len() as f64;
                let mean = rs.iter().map(|r| f(r)).sum::<f64>() / n;
                let var = if rs.len() > 1 {
                    rs.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (mean, var.sqrt())
            };
            let stats = [stat(|r| r.acc1), stat(|r| r.acc5), stat(|r| r.acc20), stat(|r| r.mrr)];
            (l, stats, rs.len())
        })
        .collect()
}

pub fn summary_table(reports: &[(PathBuf, Report)]) -> String {
    let mut s = format!(
        "{:<28} {:>4} {:>14} {:>14} {:>14} {:>14}\n",
        "setting", "n", "acc@1", "acc@5", "acc@20", "mrr"
    );
    for (l, st, n) in summarize(reports) {
        let _ = write!(s, "{l:<28} {n:>4}");
        for (m, sd) in st {
            let _ = write!(s, " {:>14}", format!("{m:.2}±{sd:.2}"));
        }
        s.push('\n');
    }
    s
}

/// Writes `summary.dat` and a gnuplot script drawing grouped bars of the
/// summary into `dir`.
pub fn write_gnuplot(dir: &Path, reports: &[(PathBuf, Report)]) -> Result<PathBuf> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports".into()));
    }
    fs::create_dir_all(dir)?;
    let mut dat = String::from("# setting acc1 sd acc5 sd acc20 sd mrr sd\n");
    for (l, st, _) in summarize(reports) {
        let _ = write!(dat, "\"{l}\"");
        for (m, sd) in st {
            let _ = write!(dat, " {m:.4} {sd:.4}");
        }
        dat.push('\n');
    }
    fs::write(dir.join("summary.dat"), dat)?;
    let script = "set terminal pngcairo size 1000,500\n\
set output 'summary.png'\n\
set style data histograms\n\
set style histogram errorbars gap 2 lw 1\n\
set style fill solid 0.6 border -1\n\
set ylabel 'score (x1e-2)'\n\
set xtics rotate by -30\n\
plot 'summary.dat' using 2:3:xtic(1) title 'acc@1', \\\n\
     '' using 4:5 title 'acc@5', \\\n\
     '' using 6:7 title 'acc@20', \\\n\
     '' using 8:9 title 'mrr'\n";
    let path = dir.join("summary.gp");
    fs::write(&path, script)?;
    Ok(path)
}
