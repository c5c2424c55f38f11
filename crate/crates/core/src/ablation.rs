//! Short training runs of the ablation configurations, each expressed as a
//! set of config overrides on a base document.

use std::path::Path;

use candle_core::DType;
use serde::Serialize;

use crate::config::{build_config, parse_override};
use crate::error::Result;
use crate::metrics::{evaluate_fusion, MetricReport};
use crate::network::FusionNet;
use crate::plane::Plane;
use crate::training::{run_stage1, run_stage2, TrainConfig, TrainData};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationRow {
    pub id: &'static str,
    pub label: &'static str,
    pub overrides: &'static [&'static str],
}

pub const ROWS: &[AblationRow] = &[
    AblationRow {
        id: "I",
        label: "division -> subtraction in decomposition loss",
        overrides: &["loss_variant=subtraction"],
    },
    AblationRow {
        id: "II",
        label: "without decomposition loss",
        overrides: &["loss_variant=off"],
    },
    AblationRow {
        id: "III",
        label: "LT block -> INN in base encoder",
        overrides: &["network.bte_block_kind=inn"],
    },
    AblationRow {
        id: "IV",
        label: "INN -> LT block in detail encoder",
        overrides: &["network.dce_block_kind=lt"],
    },
    AblationRow {
        id: "V",
        label: "INN -> CNN block in detail encoder",
        overrides: &["network.dce_block_kind=cnn"],
    },
    AblationRow {
        id: "VI",
        label: "without two-stage training",
        overrides: &["two_stage=false"],
    },
    AblationRow {
        id: "Ours",
        label: "full model",
        overrides: &[],
    },
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub id: String,
    pub label: String,
    pub stage1_final_loss: Option<f64>,
    pub stage2_final_loss: f64,
    pub metrics: MetricReport,
}

/// Smoke-run settings shared by every row.
pub fn smoke_overrides(steps: usize) -> Vec<String> {
    vec![
        "epochs_stage1=1".into(),
        "epochs_stage2=1".into(),
        format!("steps_per_epoch={steps}"),
        "validate=false".into(),
        "resume=false".into(),
    ]
}

/// Config of one row: base document, then smoke settings, then the row delta.
pub fn row_config(base: &toml::Table, row: &AblationRow, steps: usize) -> Result<TrainConfig> {
    let overrides = smoke_overrides(steps)
        .iter()
        .map(String::as_str)
        .chain(row.overrides.iter().copied())
        .map(parse_override)
        .collect::<Result<Vec<_>>>()?;
    build_config(base.clone(), &overrides)
}

fn evaluate(net: &FusionNet, data: &TrainData) -> Result<MetricReport> {
    let pairs = if data.val.is_empty() { &data.train } else { &data.val };
    let mut reports = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = net.fuse(&p.lum_a.to_tensor(DType::F32)?, &p.lum_b.to_tensor(DType::F32)?)?;
        let fused = Plane::unbatch(&out.fused)?.remove(0);
        reports.push(evaluate_fusion(&fused, &p.lum_a, &p.lum_b)?);
    }
    Ok(MetricReport::mean(&reports))
}

/// Runs every row for `steps` optimizer steps per stage under `out/<id>/`.
/// Fusion metrics are measured on the validation pairs (training pairs when
/// there are none).
pub fn run_ablation(base: &toml::Table, data: &TrainData, out: &Path, steps: usize) -> Result<Vec<AblationResult>> {
    let mut results = Vec::with_capacity(ROWS.len());
    for row in ROWS {
        let cfg = row_config(base, row, steps)?;
        let dir = out.join(format!("row_{}", row.id));
        log::info!("ablation row {}: {}", row.id, row.label);
        let (stage1_final_loss, ckpt) = if cfg.two_stage {
            let s1 = run_stage1(&cfg, data, &dir)?;
            (s1.history.last().map(|r| r.mean_loss), Some(s1.checkpoint))
        } else {
            (None, None)
        };
        let s2 = run_stage2(&cfg, data, &dir, ckpt.as_deref())?;
        results.push(AblationResult {
            id: row.id.into(),
            label: row.label.into(),
            stage1_final_loss,
            stage2_final_loss: s2.history.last().map(|r| r.mean_loss).unwrap_or(f64::NAN),
            metrics: evaluate(&s2.net, data)?,
        });
    }
    Ok(results)
}

/// Text table with the EN, SD, VIF and SSIM columns.
pub fn format_table(results: &[AblationResult]) -> String {
    let mut s = format!(
        "{:<5} {:<48} {:>8} {:>8} {:>8} {:>8}\n",
        "row", "configuration", "EN", "SD", "VIF", "SSIM"
    );
    for r in results {
        s.push_str(&format!(
            "{:<5} {:<48} {:>8.4} {:>8.3} {:>8.4} {:>8.4}\n",
            r.id, r.label, r.metrics.en, r.metrics.sd, r.metrics.vif, r.metrics.ssim
        ));
    }
    s
}

pub fn write_csv(results: &[AblationResult], path: &Path) -> Result<()> {
    let err = |e: csv::Error| crate::error::FuseError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["row", "configuration", "stage1_loss", "stage2_loss", "EN", "SD", "VIF", "SSIM"])
        .map_err(err)?;
    for r in results {
        w.write_record([
            r.id.clone(),
            r.label.clone(),
            r.stage1_final_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
            format!("{:.6}", r.stage2_final_loss),
            format!("{:.6}", r.metrics.en),
            format!("{:.6}", r.metrics.sd),
            format!("{:.6}", r.metrics.vif),
            format!("{:.6}", r.metrics.ssim),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| crate::error::FuseError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossVariant;
    use crate::network::{BaseKind, DetailKind};

    #[test]
    fn every_row_is_a_pure_config_delta() {
        let base = toml::Table::new();
        let cfgs: Vec<TrainConfig> = ROWS.iter().map(|r| row_config(&base, r, 20).unwrap()).collect();
        assert_eq!(cfgs[0].loss_variant, LossVariant::Subtraction);
        assert_eq!(cfgs[1].loss_variant, LossVariant::Off);
        assert_eq!(cfgs[2].network.bte_block_kind, BaseKind::Inn);
        assert_eq!(cfgs[3].network.dce_block_kind, DetailKind::Lt);
        assert_eq!(cfgs[4].network.dce_block_kind, DetailKind::Cnn);
        assert!(!cfgs[5].two_stage);
        let ours = &cfgs[6];
        assert_eq!(ours.steps_per_epoch, Some(20));
        for (i, c) in cfgs[..6].iter().enumerate() {
            assert_ne!(c, ours, "row {} equals the full model", ROWS[i].id);
        }
    }
}
