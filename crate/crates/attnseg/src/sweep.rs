//! Masking-ratio sweep: trains one model per ratio and reports how
//! classification and pseudo-mask quality vary with the ratio.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::plot::{line_plot, Series, PALETTE};
use crate::train::{fit, FitOptions};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mask_ratio: f64,
    pub macro_f1: f64,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub frac_heads_pruned: f64,
}

/// Trains one model per masking ratio (same seed and data for all) and writes
/// sweep.csv plus sweep.png under `out_dir`. Per-ratio artifacts go to
/// `out_dir/ratio_<r>/`.
pub fn run_sweep(
    base: &RunConfig,
    ratios: &[f64],
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    out_dir: &Path,
    quiet: bool,
) -> Result<Vec<SweepPoint>> {
    if ratios.is_empty() {
        return Err(Error::Input("sweep needs at least one masking ratio".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut run = base.clone();
        run.train.mask_ratio = ratio;
        run.validate()?;
        let sub = out_dir.join(format!("ratio_{ratio}"));
        if !quiet {
            eprintln!("sweep: training at mask_ratio {ratio}");
        }
        let outcome = fit::<f32>(
            &run,
            train_ds,
            val_ds,
            &FitOptions { out_dir: Some(&sub), quiet, ..Default::default() },
        )?;
        points.push(SweepPoint {
            mask_ratio: ratio,
            macro_f1: outcome.final_eval.macro_f1,
            miou: outcome.final_eval.miou,
            pixel_accuracy: outcome.final_eval.pixel_accuracy,
            frac_heads_pruned: outcome.fraction_pruned,
        });
    }
    write_csv(&out_dir.join("sweep.csv"), &points)?;
    plot_points(&out_dir.join("sweep.png"), &points)?;
    Ok(points)
}

fn write_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(e.to_string()))?;
    for p in points {
        w.serialize(p).map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back a sweep.csv written by `write_csv`.
pub fn read_csv(path: &Path) -> Result<Vec<SweepPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Input(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let p: SweepPoint = rec.map_err(|e| Error::Input(e.to_string()))?;
        out.push(p);
    }
    Ok(out)
}

fn plot_points(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let series = vec![
        Series {
            label: "miou".into(),
            color: PALETTE[0],
            points: points.iter().map(|p| (p.mask_ratio, p.miou)).collect(),
        },
        Series {
            label: "f1".into(),
            color: PALETTE[1],
            points: points.iter().map(|p| (p.mask_ratio, p.macro_f1)).collect(),
        },
        Series {
            label: "pixacc".into(),
            color: PALETTE[2],
            points: points.iter().map(|p| (p.mask_ratio, p.pixel_accuracy)).collect(),
        },
    ];
    line_plot(path, "masking ratio sweep", "mask ratio", "score", &series)
}
