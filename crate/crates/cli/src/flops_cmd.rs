//! Analytic FLOP reports per mechanism and grid.

use std::fmt::Write as _;

use edit_core::flops::{flop_model, FlopCount};
use edit_core::AttentionConfig;

pub struct FlopRow {
    pub cfg: AttentionConfig,
    pub count: FlopCount,
}

pub fn rows(cfgs: &[AttentionConfig]) -> Vec<FlopRow> {
    cfgs.iter()
        .map(|cfg| FlopRow {
            cfg: cfg.clone(),
            count: flop_model(cfg),
        })
        .collect()
}

pub fn table(rows: &[FlopRow]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<18} {:>5} {:>5} {:>8} {:>8} {:>14} {:>14} {:>14} {:>14} {:>16}",
        "mechanism", "H", "W", "n_image", "n_prompt", "projections", "feature_maps", "logits", "aggregate", "total"
    )
    .unwrap();
    for r in rows {
        let n_prompt = if r.cfg.mechanism.is_multimodal() {
            r.cfg.prompt_tokens
        } else {
            0
        };
        writeln!(
            out,
            "{:<18} {:>5} {:>5} {:>8} {:>8} {:>14} {:>14} {:>14} {:>14} {:>16}",
            r.cfg.mechanism.id(),
            r.cfg.height,
            r.cfg.width,
            r.cfg.n_image(),
            n_prompt,
            r.count.projections,
            r.count.feature_maps,
            r.count.logits,
            r.count.aggregate,
            r.count.total()
        )
        .unwrap();
    }
    out
}

pub const CSV_HEADER: &str =
    "mechanism,H,W,n_image,n_prompt,d,heads,projections,feature_maps,logits,aggregate,total";

pub fn csv_string(rows: &[FlopRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let n_prompt = if r.cfg.mechanism.is_multimodal() {
            r.cfg.prompt_tokens
        } else {
            0
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.cfg.mechanism.id(),
            r.cfg.height,
            r.cfg.width,
            r.cfg.n_image(),
            n_prompt,
            r.cfg.dim,
            r.cfg.heads,
            r.count.projections,
            r.count.feature_maps,
            r.count.logits,
            r.count.aggregate,
            r.count.total()
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use edit_core::Mechanism;

    #[test]
    fn table_lists_every_requested_config() {
        let cfgs = vec![
            AttentionConfig::new(Mechanism::Joint, 64, 4, 16, 16, 16).unwrap(),
            AttentionConfig::new(Mechanism::Hybrid, 64, 4, 16, 16, 16).unwrap(),
        ];
        let rows = rows(&cfgs);
        let text = table(&rows);
        assert!(text.contains("joint"));
        assert!(text.contains("hybrid"));
        let csv = csv_string(&rows);
        assert_eq!(csv.lines().count(), 3);
    }
}
