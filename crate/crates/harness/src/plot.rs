//! SVG rendering of routing, training and ablation artifacts. Pure file
//! transformations with fixed number formatting, so equal inputs give
//! byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::train::RunReport;

const PALETTE: [&str; 4] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759"];

fn input_err(path: &Path, msg: impl Into<String>) -> HarnessError {
    HarnessError::Input {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// A parsed CSV table with named-column access.
pub struct Table {
    path: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r
            .headers()
            .map_err(|e| input_err(path, e.to_string()))?
            .iter()
            .map(String::from)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(|e| input_err(path, e.to_string()))?;
        Ok(Self {
            path: path.display().to_string(),
            headers,
            rows,
        })
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Input {
                path: self.path.clone(),
                msg: format!("missing column `{name}`"),
            })
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>> {
        let i = self.column_index(name)?;
        Ok(self
            .rows
            .iter()
            .map(|r| r.get(i).cloned().unwrap_or_default())
            .collect())
    }

    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        self.strings(name)?
            .iter()
            .enumerate()
            .map(|(row, s)| {
                s.trim().parse::<f64>().map_err(|_| HarnessError::Input {
                    path: self.path.clone(),
                    msg: format!("column `{name}` row {}: {s:?} is not a number", row + 1),
                })
            })
            .collect()
    }
}

fn svg_open(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#
    );
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, s: &str) {
    let s = s
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;");
    let _ = writeln!(
        out,
        r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{s}</text>"#
    );
}

/// One panel per K: bars of the mean routing weight of each expert.
pub fn routing_bars(path: &Path, csv_text: &str) -> Result<String> {
    let t = Table::parse(path, csv_text)?;
    let experts = t.numbers("expert_id")?;
    let weights = t.numbers("mean_weight")?;
    let ks = if t.has("k") {
        t.numbers("k")?
    } else {
        vec![0.0; experts.len()]
    };
    let mut panels: BTreeMap<u64, Vec<(u64, f64)>> = BTreeMap::new();
    for ((k, e), w) in ks.iter().zip(&experts).zip(&weights) {
        panels.entry(*k as u64).or_default().push((*e as u64, *w));
    }
    if panels.is_empty() {
        return Err(input_err(path, "no routing rows"));
    }
    let (pw, ph, bar_h) = (220.0, 200.0, 140.0);
    let mut out = String::new();
    svg_open(&mut out, pw * panels.len() as f64, ph + 20.0);
    for (p, (k, bars)) in panels.iter().enumerate() {
        let x0 = p as f64 * pw;
        let total: f64 = bars.iter().map(|b| b.1).sum();
        let title = if t.has("k") {
            format!("K = {k}")
        } else {
            "routing".to_string()
        };
        text(
            &mut out,
            x0 + pw / 2.0,
            16.0,
            "middle",
            &format!("{title} (sum {total:.3})"),
        );
        let bw = (pw - 40.0) / bars.len() as f64;
        for (i, (e, w)) in bars.iter().enumerate() {
            let h = bar_h * w.clamp(0.0, 1.0);
            let x = x0 + 20.0 + i as f64 * bw;
            let y = 30.0 + bar_h - h;
            let _ = writeln!(
                out,
                r#"<rect class="bar" x="{:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>expert {e}: {w:.4}</title></rect>"#,
                x + 2.0,
                bw - 4.0,
                PALETTE[*e as usize % PALETTE.len()]
            );
            text(
                &mut out,
                x + bw / 2.0,
                30.0 + bar_h + 14.0,
                "middle",
                &format!("e{e}"),
            );
            text(
                &mut out,
                x + bw / 2.0,
                y - 3.0,
                "middle",
                &format!("{w:.2}"),
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str) {
    let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
        p.join(" ")
    );
}

/// Training-loss and validation-mIoU curves of a run report.
pub fn loss_curves(path: &Path, json: &str) -> Result<String> {
    let r: RunReport = serde_json::from_str(json).map_err(|e| input_err(path, e.to_string()))?;
    if r.epochs.is_empty() {
        return Err(input_err(path, "report has no epochs"));
    }
    let (w, h, pad) = (480.0, 260.0, 40.0);
    let n = r.epochs.len().max(2) as f64 - 1.0;
    let max_loss = r.epochs.iter().map(|e| e.train_loss).fold(1e-12, f64::max);
    let sx = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let sy = |v: f64| h - pad - (h - 2.0 * pad) * v;
    let loss: Vec<(f64, f64)> = r
        .epochs
        .iter()
        .enumerate()
        .map(|(i, e)| (sx(i), sy(e.train_loss / max_loss)))
        .collect();
    let miou: Vec<(f64, f64)> = r
        .epochs
        .iter()
        .enumerate()
        .map(|(i, e)| (sx(i), sy(e.val.miou / 100.0)))
        .collect();
    let mut out = String::new();
    svg_open(&mut out, w, h);
    let _ = writeln!(
        out,
        r##"<path d="M{pad:.1},{:.1} V{:.1} H{:.1}" stroke="#333" fill="none"/>"##,
        pad,
        h - pad,
        w - pad
    );
    polyline(&mut out, &loss, PALETTE[0]);
    polyline(&mut out, &miou, PALETTE[1]);
    text(
        &mut out,
        w / 2.0,
        18.0,
        "middle",
        &format!(
            "run {} (seed {})",
            &r.config_hash[..8.min(r.config_hash.len())],
            r.seed
        ),
    );
    text(
        &mut out,
        w - pad,
        34.0,
        "end",
        &format!("train loss (max {max_loss:.3})"),
    );
    text(&mut out, w - pad, 50.0, "end", "val mIoU (0-100)");
    text(&mut out, w / 2.0, h - 10.0, "middle", "epoch");
    out.push_str("</svg>\n");
    Ok(out)
}

/// Bar chart of median mIoU per ablation row (Top-K or component table).
pub fn ablation_bars(path: &Path, csv_text: &str) -> Result<String> {
    let t = Table::parse(path, csv_text)?;
    let labels = if t.has("k") {
        t.strings("k")?
            .into_iter()
            .map(|k| format!("K={k}"))
            .collect()
    } else {
        t.strings("components")?
    };
    let miou = t.numbers("miou")?;
    let (w, h, pad) = (80.0 * labels.len() as f64 + 60.0, 240.0, 30.0);
    let top = miou.iter().copied().fold(1e-12, f64::max);
    let mut out = String::new();
    svg_open(&mut out, w, h);
    for (i, (l, m)) in labels.iter().zip(&miou).enumerate() {
        let bh = (h - 3.0 * pad) * m / top;
        let x = pad + i as f64 * 80.0;
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{:.1}" y="{:.1}" width="60.0" height="{bh:.1}" fill="{}"/>"#,
            x,
            h - 2.0 * pad - bh,
            PALETTE[i % PALETTE.len()]
        );
        text(
            &mut out,
            x + 30.0,
            h - 2.0 * pad - bh - 4.0,
            "middle",
            &format!("{m:.2}"),
        );
        text(&mut out, x + 30.0, h - pad, "middle", l);
    }
    text(&mut out, w / 2.0, 16.0, "middle", "median val mIoU");
    out.push_str("</svg>\n");
    Ok(out)
}

/// Dispatches on file content: run reports (JSON), routing CSVs (with
/// `expert_id`) and ablation CSVs (with `miou`).
pub fn render_file(path: &Path) -> Result<String> {
    let content = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        return loss_curves(path, &content);
    }
    let t = Table::parse(path, &content)?;
    if t.has("expert_id") || t.has("mean_weight") {
        routing_bars(path, &content)
    } else if t.has("miou") {
        ablation_bars(path, &content)
    } else {
        routing_bars(path, &content)
    }
}
