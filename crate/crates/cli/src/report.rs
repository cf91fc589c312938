//! `report --run DIR`: summary table on stdout (also `summary.md`) and one SVG
//! per known CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::svg::{Plot, Series};
use crate::Failure;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, String> {
        let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
        let header = r.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize, String> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("missing column `{name}`"))
    }

    fn num(&self, row: &[String], name: &str) -> Result<f64, String> {
        let v = &row[self.col(name)?];
        v.parse().map_err(|_| format!("bad number `{v}` in column `{name}`"))
    }

    fn xy(&self, x: &str, y: &str) -> Result<Vec<(f64, f64)>, String> {
        self.rows.iter().map(|r| Ok((self.num(r, x)?, self.num(r, y)?))).collect()
    }
}

/// One summary line plus the plot for a CSV.
type Render = fn(&Table) -> Result<(String, Plot<'static>), String>;

fn last(v: &[(f64, f64)]) -> f64 {
    v.last().map_or(f64::NAN, |p| p.1)
}

fn pretrain(t: &Table) -> Result<(String, Plot<'static>), String> {
    let pts = t.xy("step", "loss")?;
    Ok((
        format!("{} steps, final loss {:.4}", pts.len(), last(&pts)),
        Plot {
            title: "Pretraining loss",
            x_label: "step",
            y_label: "loss",
            series: vec![Series {
                name: "loss".into(),
                points: pts,
            }],
        },
    ))
}

fn training(t: &Table) -> Result<(String, Plot<'static>), String> {
    let loss = t.xy("step", "loss")?;
    let w = t.xy("step", "w_clipped")?;
    let method = t.rows.first().map(|r| r[t.col("method").unwrap_or(0)].clone()).unwrap_or_default();
    Ok((
        format!("{method}: {} steps, final loss {:.4}", loss.len(), last(&loss)),
        Plot {
            title: "Preference loss",
            x_label: "step",
            y_label: "batch mean",
            series: vec![
                Series {
                    name: "loss".into(),
                    points: loss,
                },
                Series {
                    name: "clipped w".into(),
                    points: w,
                },
            ],
        },
    ))
}

fn weight_curve(t: &Table) -> Result<(String, Plot<'static>), String> {
    let mut pts = Vec::new();
    for r in &t.rows {
        let mid = 0.5 * (t.num(r, "t_lo")? + t.num(r, "t_hi")?);
        pts.push((mid, t.num(r, "mean_raw")?));
    }
    let first = pts.first().map_or(f64::NAN, |p| p.1);
    Ok((
        format!("{} bins, mean raw w from {first:.4} to {:.4}", pts.len(), last(&pts)),
        Plot {
            title: "Importance weight by timestep",
            x_label: "t",
            y_label: "mean raw w",
            series: vec![Series {
                name: "mean raw w".into(),
                points: pts,
            }],
        },
    ))
}

fn density(t: &Table) -> Result<(String, Plot<'static>), String> {
    let mut by_window: BTreeMap<(u64, u64), Vec<&Vec<String>>> = BTreeMap::new();
    for r in &t.rows {
        let key = (t.num(r, "t_lo")? as u64, t.num(r, "t_hi")? as u64);
        by_window.entry(key).or_default().push(r);
    }
    let mut series = Vec::new();
    let mut summary = Vec::new();
    for ((lo, hi), rows) in &by_window {
        let mut w = Vec::new();
        let mut l = Vec::new();
        let mut m = Vec::new();
        for r in rows {
            let step = t.num(r, "step")?;
            w.push((step, t.num(r, "logp_w")?));
            l.push((step, t.num(r, "logp_l")?));
            m.push((step, t.num(r, "margin")?));
        }
        summary.push(format!("[{lo},{hi}] final margin {:.4}", last(&m)));
        series.push(Series {
            name: format!("winner [{lo},{hi}]"),
            points: w,
        });
        series.push(Series {
            name: format!("loser [{lo},{hi}]"),
            points: l,
        });
        series.push(Series {
            name: format!("margin [{lo},{hi}]"),
            points: m,
        });
    }
    Ok((
        summary.join("; "),
        Plot {
            title: "Log-density relative to reference",
            x_label: "step",
            y_label: "mean log p - log p_ref",
            series,
        },
    ))
}

fn rounds(t: &Table) -> Result<(String, Plot<'static>), String> {
    let pts = t.xy("round", "mean_reward")?;
    let first = pts.first().map_or(f64::NAN, |p| p.1);
    Ok((
        format!("{} rounds, mean reward {first:.4} -> {:.4}", pts.len().saturating_sub(1), last(&pts)),
        Plot {
            title: "Mean oracle reward per round",
            x_label: "round",
            y_label: "mean reward",
            series: vec![Series {
                name: "mean reward".into(),
                points: pts,
            }],
        },
    ))
}

const PLOTS: [(&str, &str, Render); 5] = [
    ("pretrain.csv", "pretrain.svg", pretrain),
    ("training_log.csv", "loss.svg", training),
    ("weight_curve.csv", "weight_curve.svg", weight_curve),
    ("density.csv", "density.svg", density),
    ("rounds.csv", "rounds.svg", rounds),
];

/// Summary-only files.
fn extra_summary(dir: &Path, name: &str) -> Option<String> {
    let t = Table::read(&dir.join(name)).ok()?;
    match name {
        "rewards.csv" => {
            let parts: Vec<String> = t
                .rows
                .iter()
                .filter_map(|r| Some(format!("{} {:.4}", r.get(1)?, t.num(r, "mean_reward").ok()?)))
                .collect();
            Some(parts.join(", "))
        }
        "moments.csv" => {
            let parts: Vec<String> = t
                .rows
                .iter()
                .filter_map(|r| {
                    Some(format!(
                        "x{}: mean {:.4} var {:.4}",
                        r.get(1)?,
                        t.num(r, "mean").ok()?,
                        t.num(r, "var").ok()?
                    ))
                })
                .collect();
            Some(parts.join(", "))
        }
        "pairs.csv" => Some(format!("{} pairs", t.rows.len())),
        _ => None,
    }
}

pub fn report(dir: &Path) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::runtime(format!("{} is not a directory", dir.display())));
    }
    let mut table = String::from("| file | rows | summary |\n|---|---|---|\n");
    let mut rendered = 0;
    for (csv_name, svg_name, render) in PLOTS {
        let path = dir.join(csv_name);
        if !path.exists() {
            eprintln!("warning: {csv_name} missing, skipped");
            continue;
        }
        let t = match Table::read(&path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("warning: {csv_name} unreadable ({e}), skipped");
                continue;
            }
        };
        if t.rows.is_empty() {
            eprintln!("warning: {csv_name} has no rows, skipped");
            continue;
        }
        match render(&t) {
            Ok((summary, plot)) => {
                fs::write(dir.join(svg_name), plot.render())?;
                let _ = writeln!(table, "| {csv_name} | {} | {summary} |", t.rows.len());
                rendered += 1;
            }
            Err(e) => eprintln!("warning: {csv_name}: {e}, skipped"),
        }
    }
    for name in ["rewards.csv", "moments.csv", "pairs.csv"] {
        if let Some(s) = extra_summary(dir, name) {
            let _ = writeln!(table, "| {name} | | {s} |");
        }
    }
    if rendered == 0 {
        return Err(Failure::runtime(format!("no plottable CSVs in {}", dir.display())));
    }
    fs::write(dir.join("summary.md"), &table)?;
    print!("{table}");
    Ok(())
}
