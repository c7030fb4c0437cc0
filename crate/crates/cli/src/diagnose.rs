use std::fmt::Write as _;

use anyhow::{bail, Context, Result};

use crate::manifest::RunManifest;
use crate::{DiagnoseArgs, UsageError};

/// (step, log_odds_ratio, reward_margin) rows of a training metrics log.
pub fn read_curves(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (Some(s), Some(l), Some(r)) = (col("step"), col("log_odds_ratio"), col("reward_margin")) else {
        bail!(spatial_contrast::Error::Data(
            "metrics log lacks step/log_odds_ratio/reward_margin columns".into()
        ));
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let get = |c: usize| f.get(c).copied().unwrap_or("");
        let bad = || spatial_contrast::Error::Data(format!("metrics line {}: malformed row", i + 2));
        rows.push((
            get(s).parse().map_err(|_| bad())?,
            get(l).parse().map_err(|_| bad())?,
            get(r).parse().map_err(|_| bad())?,
        ));
    }
    Ok(rows)
}

/// Trailing moving average; the first `window - 1` entries average what is
/// available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= w {
            sum -= xs[i - w];
        }
        if w == 1 {
            out.push(xs[i]);
        } else {
            out.push(sum / (i + 1).min(w) as f64);
        }
    }
    out
}

pub fn curves_csv(rows: &[(usize, f64, f64)], window: usize) -> String {
    let lor: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let rm: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let (lor, rm) = (moving_average(&lor, window), moving_average(&rm, window));
    let mut s = String::from("step,log_odds_ratio,reward_margin\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", r.0, lor[i], rm[i]);
    }
    s
}

pub fn run(a: DiagnoseArgs) -> Result<()> {
    if a.window == 0 {
        bail!(UsageError("--window must be at least 1".into()));
    }
    if !a.metrics.is_file() {
        bail!(UsageError(format!("--metrics: {} does not exist", a.metrics.display())));
    }
    let text = std::fs::read_to_string(&a.metrics).with_context(|| format!("reading {}", a.metrics.display()))?;
    let rows = read_curves(&text)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, curves_csv(&rows, a.window)).with_context(|| format!("writing {}", a.out.display()))?;
    let mut m = RunManifest::start("diagnose", 0);
    m.input("metrics", &a.metrics).output("curves", &a.out);
    let dir = a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
    m.write(dir)?;
    eprintln!("{} rows -> {}", rows.len(), a.out.display());
    Ok(())
}
