//! CSV emission for routing statistics and ablation tables.

use std::path::Path;

use sera_core::RoutingStats;

use crate::error::Result;
use crate::experiments::{ComponentRow, TopKRow};

pub const ROUTING_COLUMNS: [&str; 4] = ["k", "expert_id", "mean_weight", "selection_freq"];

/// One row per (K, expert).
pub fn routing_csv(stats: &[(usize, RoutingStats)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ROUTING_COLUMNS)?;
    for (k, s) in stats {
        for (e, (m, f)) in s.mean_weight.iter().zip(&s.selection_freq).enumerate() {
            w.write_record([
                k.to_string(),
                e.to_string(),
                format!("{m:.12}"),
                format!("{f:.12}"),
            ])?;
        }
    }
    finish(w)
}

pub fn topk_csv(rows: &[TopKRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "k",
        "miou",
        "oiou",
        "delta_miou_vs_k1",
        "delta_oiou_vs_k1",
        "seeds",
        "config_hashes",
    ])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            format!("{:.6}", r.miou),
            format!("{:.6}", r.oiou),
            format!("{:.6}", r.delta_miou),
            format!("{:.6}", r.delta_oiou),
            join(r.runs.iter().map(|s| s.seed.to_string())),
            join(r.runs.iter().map(|s| s.config_hash.clone())),
        ])?;
    }
    finish(w)
}

pub fn components_csv(rows: &[ComponentRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["components", "miou", "oiou", "seeds", "config_hashes"])?;
    for r in rows {
        w.write_record([
            r.components.clone(),
            format!("{:.6}", r.miou),
            format!("{:.6}", r.oiou),
            join(r.runs.iter().map(|s| s.seed.to_string())),
            join(r.runs.iter().map(|s| s.config_hash.clone())),
        ])?;
    }
    finish(w)
}

fn join(it: impl Iterator<Item = String>) -> String {
    it.collect::<Vec<_>>().join(";")
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
