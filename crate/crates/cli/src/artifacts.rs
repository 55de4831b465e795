//! Atomic artifact writing and gnuplot-ready data emission.

use anyhow::{bail, Context};
use std::path::{Path, PathBuf};

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    ));
    std::fs::write(&tmp, contents)
        .with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, &text)
}

/// Parse a diagnostics CSV (header + rows of floats).
fn read_csv_table(path: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .context("empty csv")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("parsing row '{line}'"))?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Emit gnuplot-ready .dat series from the artifacts of previous runs.
/// From heat-run diagnostics: entropy vs t, Fisher vs t with the -dEnt/dt
/// overlay (equal row counts), and second moment vs t. From edi-check and
/// jko-run artifacts: the EDI terms and the JKO-vs-heat error table.
pub fn emit_plot_data(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut produced = Vec::new();
    let diag = dir.join("diagnostics.csv");
    let mut found_any = false;
    if diag.exists() {
        found_any = true;
        let (header, rows) = read_csv_table(&diag)?;
        let col = |name: &str| header.iter().position(|h| h == name);
        let (t_i, ent_i, fis_i, mom_i) = (
            col("t").context("missing t column")?,
            col("entropy").context("missing entropy column")?,
            col("fisher").context("missing fisher column")?,
            col("moment").context("missing moment column")?,
        );
        let mut entropy = String::from("# t entropy\n");
        let mut moment = String::from("# t second_moment\n");
        for r in &rows {
            entropy.push_str(&format!("{:.17e} {:.17e}\n", r[t_i], r[ent_i]));
            moment.push_str(&format!("{:.17e} {:.17e}\n", r[t_i], r[mom_i]));
        }
        // overlay at interior times only, so all columns have equal length
        let mut fisher = String::from("# t fisher minus_dent_dt\n");
        for w in 1..rows.len().saturating_sub(1) {
            let dent = (rows[w + 1][ent_i] - rows[w - 1][ent_i])
                / (rows[w + 1][t_i] - rows[w - 1][t_i]);
            fisher.push_str(&format!(
                "{:.17e} {:.17e} {:.17e}\n",
                rows[w][t_i], rows[w][fis_i], -dent
            ));
        }
        for (name, text) in [
            ("entropy-vs-t.dat", entropy),
            ("fisher-vs-t.dat", fisher),
            ("moment-vs-t.dat", moment),
        ] {
            let p = dir.join(name);
            write_atomic(&p, &text)?;
            produced.push(p);
        }
    }
    let edi = dir.join("edi.json");
    if edi.exists() {
        found_any = true;
        let text = std::fs::read_to_string(&edi)?;
        let reports: Vec<serde_json::Value> = serde_json::from_str(&text)?;
        let mut out = String::from("# t_start t_end ent_drop action slope residual\n");
        for r in &reports {
            out.push_str(&format!(
                "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
                r["t_start"].as_f64().unwrap_or(f64::NAN),
                r["t_end"].as_f64().unwrap_or(f64::NAN),
                r["ent_start"].as_f64().unwrap_or(f64::NAN)
                    - r["ent_end"].as_f64().unwrap_or(f64::NAN),
                r["action"].as_f64().unwrap_or(f64::NAN),
                r["slope"].as_f64().unwrap_or(f64::NAN),
                r["residual"].as_f64().unwrap_or(f64::NAN),
            ));
        }
        let p = dir.join("edi-terms.dat");
        write_atomic(&p, &out)?;
        produced.push(p);
    }
    let jko = dir.join("jko.csv");
    if jko.exists() {
        found_any = true;
        let (header, rows) = read_csv_table(&jko)?;
        let mut out = String::from("# ");
        out.push_str(&header.join(" "));
        out.push('\n');
        for r in &rows {
            let vals: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        let p = dir.join("jko-error.dat");
        write_atomic(&p, &out)?;
        produced.push(p);
    }
    if !found_any {
        bail!(
            "no artifacts found in {}; expected diagnostics.csv, edi.json or jko.csv",
            dir.display()
        );
    }
    Ok(produced)
}
