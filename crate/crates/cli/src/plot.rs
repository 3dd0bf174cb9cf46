//! SVG figures from evaluation and sweep artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use memscore::eval::{kde, Bandwidth, KdeCurve};
use plotters::prelude::*;

use crate::{PlotArgs, PlotKind};

const ORANGE: RGBColor = RGBColor(230, 126, 34);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(230, 126, 34),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

pub fn plot(a: PlotArgs) -> Result<()> {
    match a.kind {
        PlotKind::Kde => {
            let (Some(pred), Some(truth)) = (&a.pred, &a.truth) else {
                bail!("--kind kde needs --pred and --truth");
            };
            let p = read_scores(pred)?;
            let t = read_scores(truth)?;
            kde_figure(&kde(&p, Bandwidth::Auto)?, &kde(&t, Bandwidth::Auto)?, &a.out)?;
        }
        PlotKind::Sweep => {
            let Some(curves) = &a.curves else {
                bail!("--kind sweep needs --curves");
            };
            sweep_figure(&read_curves(curves)?, &a.out)?;
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

/// The `score` column of an `image_ref,score` CSV.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| path.display().to_string())?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "score")
        .with_context(|| format!("{}: no `score` column", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec
            .get(col)
            .unwrap_or("")
            .parse()
            .with_context(|| format!("{}: bad score on row {}", path.display(), i + 1))?;
        out.push(v);
    }
    if out.is_empty() {
        bail!("{}: no scores", path.display());
    }
    Ok(out)
}

/// Validation Spearman per run, as `(step, rho)` points.
pub fn read_curves(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| path.display().to_string())?;
    let h = r.headers()?.clone();
    let idx = |name: &str| {
        h.iter()
            .position(|c| c == name)
            .with_context(|| format!("{}: no `{name}` column", path.display()))
    };
    let (run, eta, bs, step, rho) = (idx("run")?, idx("eta")?, idx("batch_size")?, idx("step")?, idx("val_spearman")?);
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let Ok(rho) = rec[rho].parse::<f64>() else { continue };
        let label = format!("run {} eta={} bs={}", &rec[run], &rec[eta], &rec[bs]);
        let step: f64 = rec[step]
            .parse()
            .with_context(|| format!("{}: bad step `{}`", path.display(), &rec[step]))?;
        out.entry(label).or_default().push((step, rho));
    }
    if out.is_empty() {
        bail!("{}: no curves with a defined spearman", path.display());
    }
    Ok(out)
}

fn kde_figure(pred: &KdeCurve, truth: &KdeCurve, out: &Path) -> Result<()> {
    let ymax = pred
        .density
        .iter()
        .chain(&truth.density)
        .cloned()
        .fold(0.0, f64::max)
        * 1.05;
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..1.0, 0.0..ymax.max(1e-6))?;
    chart
        .configure_mesh()
        .x_desc("memorability score")
        .y_desc("density")
        .draw()?;
    chart
        .draw_series(LineSeries::new(
            pred.grid.iter().cloned().zip(pred.density.iter().cloned()),
            ORANGE.stroke_width(2),
        ))?
        .label("predictions")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], ORANGE.stroke_width(2)));
    chart
        .draw_series(LineSeries::new(
            truth.grid.iter().cloned().zip(truth.density.iter().cloned()),
            BLUE.stroke_width(2),
        ))?
        .label("ground truth")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], BLUE.stroke_width(2)));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

fn sweep_figure(curves: &BTreeMap<String, Vec<(f64, f64)>>, out: &Path) -> Result<()> {
    let xmax = curves
        .values()
        .flatten()
        .map(|p| p.0)
        .fold(1.0, f64::max);
    let (ymin, ymax) = curves
        .values()
        .flatten()
        .fold((0.0f64, 0.0f64), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..xmax, (ymin - 0.05)..(ymax + 0.05).min(1.0))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("validation spearman")
        .draw()?;
    for (i, (label, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().cloned(), color.stroke_width(2)))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}
