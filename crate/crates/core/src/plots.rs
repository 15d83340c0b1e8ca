//! Plot emission: per-model AUC box plots and per-feature density curves,
//! each as an SVG image plus the underlying CSV data.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::annotations::{quantile_sorted, DensityClass, DensitySummary, Feature};
use crate::error::{Error, Result};
use crate::evaluation::FoldScores;

/// Five-number summary of one (model, variant) cell's fold AUCs.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub model_name: String,
    pub variant: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub points: Vec<f64>,
}

impl BoxStats {
    pub fn from_scores(scores: &FoldScores) -> BoxStats {
        let mut sorted = scores.aucs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        BoxStats {
            model_name: scores.model_name.clone(),
            variant: scores.variant.to_string(),
            min: sorted[0],
            q1: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
            points: scores.aucs.clone(),
        }
    }
}

/// Writes box-plot data/SVG for the fold AUCs and density data/SVG per
/// feature. Returns the created files.
pub fn emit_plots(
    scores: &[FoldScores],
    densities: &[DensitySummary],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if scores.is_empty() && densities.is_empty() {
        return Err(Error::validation("nothing to plot"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    if !scores.is_empty() {
        let stats: Vec<BoxStats> = scores.iter().map(BoxStats::from_scores).collect();
        let csv_path = out_dir.join("auc_box_plot.csv");
        write_box_csv(&stats, &csv_path)?;
        written.push(csv_path);
        let svg_path = out_dir.join("auc_box_plot.svg");
        render_box_plot(&stats, &svg_path)?;
        written.push(svg_path);
    }

    for feature in Feature::ALL {
        let of_feature: Vec<&DensitySummary> =
            densities.iter().filter(|d| d.feature == feature).collect();
        if of_feature.is_empty() {
            continue;
        }
        let csv_path = out_dir.join(format!("density_{feature}.csv"));
        write_density_csv(&of_feature, &csv_path)?;
        written.push(csv_path);
        let svg_path = out_dir.join(format!("density_{feature}.svg"));
        render_density_plot(feature, &of_feature, &svg_path)?;
        written.push(svg_path);
    }

    Ok(written)
}

/// `model,variant,min,q1,median,q3,max,points` with fold points
/// semicolon-joined.
pub fn write_box_csv(stats: &[BoxStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record(["model", "variant", "min", "q1", "median", "q3", "max", "points"])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for s in stats {
        let points = s
            .points
            .iter()
            .map(|p| format!("{p}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            s.model_name.clone(),
            s.variant.clone(),
            format!("{}", s.min),
            format!("{}", s.q1),
            format!("{}", s.median),
            format!("{}", s.q3),
            format!("{}", s.max),
            points,
        ])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_box_csv(path: &Path) -> Result<Vec<BoxStats>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let field = |i: usize| -> Result<f64> {
            record[i].parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("bad number {:?}", &record[i]),
            })
        };
        out.push(BoxStats {
            model_name: record[0].to_string(),
            variant: record[1].to_string(),
            min: field(2)?,
            q1: field(3)?,
            median: field(4)?,
            q3: field(5)?,
            max: field(6)?,
            points: record[7]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().unwrap_or(f64::NAN))
                .collect(),
        });
    }
    Ok(out)
}

fn plot_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(
        path,
        std::io::Error::other(format!("plot rendering failed: {e}")),
    )
}

fn render_box_plot(stats: &[BoxStats], path: &Path) -> Result<()> {
    let y_min = stats.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    let y_max = stats.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((y_max - y_min) * 0.15).max(0.01);
    let (y_lo, y_hi) = (y_min - pad, y_max + pad);

    let root = SVGBackend::new(path, (1024, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_error(path, e))?;
    let labels: Vec<String> = stats
        .iter()
        .map(|s| format!("{} ({})", s.model_name, s.variant))
        .collect();
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .caption("Fold AUC per model", ("sans-serif", 22))
        .x_label_area_size(110)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.5f64..stats.len() as f64 - 0.5, y_lo..y_hi)
        .map_err(|e| plot_error(path, e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("AUC")
        .x_labels(stats.len())
        .x_label_formatter(&|x| {
            let i = x.round() as i64;
            if i >= 0 && (i as usize) < labels.len() && (x - i as f64).abs() < 0.26 {
                labels[i as usize].clone()
            } else {
                String::new()
            }
        })
        .x_label_style(("sans-serif", 11).into_text_style(&root).transform(FontTransform::Rotate90))
        .draw()
        .map_err(|e| plot_error(path, e))?;

    for (i, s) in stats.iter().enumerate() {
        let x = i as f64;
        let (half, cap) = (0.28, 0.12);
        let box_style = BLUE.mix(0.35).filled();
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(x - half, s.q1), (x + half, s.q3)],
                box_style,
            )))
            .map_err(|e| plot_error(path, e))?;
        let lines = [
            vec![(x - half, s.median), (x + half, s.median)],
            vec![(x, s.q3), (x, s.max)],
            vec![(x, s.min), (x, s.q1)],
            vec![(x - cap, s.max), (x + cap, s.max)],
            vec![(x - cap, s.min), (x + cap, s.min)],
        ];
        for line in lines {
            chart
                .draw_series(std::iter::once(PathElement::new(line, BLUE.stroke_width(2))))
                .map_err(|e| plot_error(path, e))?;
        }
        chart
            .draw_series(
                s.points
                    .iter()
                    .map(|&p| Circle::new((x, p), 3, BLACK.mix(0.6).filled())),
            )
            .map_err(|e| plot_error(path, e))?;
    }
    root.present().map_err(|e| plot_error(path, e))?;
    Ok(())
}

/// `feature,class,grid,density` in long format.
fn write_density_csv(densities: &[&DensitySummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record(["feature", "class", "grid", "density"])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for d in densities {
        for (x, y) in d.grid.iter().zip(&d.density) {
            w.write_record([
                d.feature.to_string(),
                d.class.to_string(),
                format!("{x}"),
                format!("{y}"),
            ])
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn render_density_plot(
    feature: Feature,
    densities: &[&DensitySummary],
    path: &Path,
) -> Result<()> {
    let x_lo = densities
        .iter()
        .map(|d| d.grid[0])
        .fold(f64::INFINITY, f64::min);
    let x_hi = densities
        .iter()
        .map(|d| *d.grid.last().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let y_hi = densities
        .iter()
        .flat_map(|d| d.density.iter())
        .fold(0.0f64, |a, &b| a.max(b))
        * 1.1;

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_error(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .caption(
            format!("f({feature}) \u{2014} {}", feature.long_name()),
            ("sans-serif", 22),
        )
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(x_lo..x_hi, 0.0..y_hi)
        .map_err(|e| plot_error(path, e))?;
    chart
        .configure_mesh()
        .x_desc(format!("normalized {} score", feature.long_name().to_lowercase()))
        .y_desc("density")
        .draw()
        .map_err(|e| plot_error(path, e))?;

    for d in densities {
        let color = match d.class {
            DensityClass::Benign => BLUE.to_rgba(),
            DensityClass::Malignant => RED.to_rgba(),
            DensityClass::All => BLACK.mix(0.5),
        };
        chart
            .draw_series(LineSeries::new(
                d.grid.iter().copied().zip(d.density.iter().copied()),
                color.stroke_width(2),
            ))
            .map_err(|e| plot_error(path, e))?
            .label(format!("{} (\u{3bc}={:.3}, \u{3c3}={:.3})", d.class, d.mean, d.std))
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .border_style(BLACK.mix(0.4))
        .background_style(WHITE.mix(0.9))
        .draw()
        .map_err(|e| plot_error(path, e))?;
    root.present().map_err(|e| plot_error(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Variant;

    fn scores_fixture(folds: usize) -> Vec<FoldScores> {
        let models = crate::evaluation::REPORT_MODELS;
        models
            .iter()
            .map(|m| {
                let aucs: Vec<f64> = (0..folds)
                    .map(|f| 0.7 + 0.01 * f as f64 + m.len() as f64 * 1e-3)
                    .collect();
                FoldScores::new(*m, Variant::Nonfrozen, aucs)
            })
            .collect()
    }

    #[test]
    fn box_plot_emits_six_groups_of_five_points() {
        let scores = scores_fixture(5);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&scores, &[], dir.path()).unwrap();
        assert!(files.iter().any(|f| f.ends_with("auc_box_plot.csv")));
        assert!(files.iter().any(|f| f.ends_with("auc_box_plot.svg")));
        let stats = read_box_csv(&dir.path().join("auc_box_plot.csv")).unwrap();
        assert_eq!(stats.len(), 6);
        assert!(stats.iter().all(|s| s.points.len() == 5));
    }

    #[test]
    fn single_fold_gives_degenerate_boxes() {
        let scores = scores_fixture(1);
        let stats: Vec<BoxStats> = scores.iter().map(BoxStats::from_scores).collect();
        for s in stats {
            assert_eq!(s.min, s.max);
            assert_eq!(s.median, s.min);
            assert_eq!(s.q1, s.q3);
        }
    }

    #[test]
    fn box_csv_round_trips_fold_points() {
        let scores = scores_fixture(3);
        let dir = tempfile::tempdir().unwrap();
        emit_plots(&scores, &[], dir.path()).unwrap();
        let stats = read_box_csv(&dir.path().join("auc_box_plot.csv")).unwrap();
        for (s, original) in stats.iter().zip(&scores) {
            assert_eq!(s.points, original.aucs);
            assert_eq!(s.model_name, original.model_name);
        }
    }

    #[test]
    fn density_plots_are_written_per_feature() {
        let ids: Vec<String> = (0..8).map(|i| format!("L{i}")).collect();
        let mut annotations = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            for f in Feature::ALL {
                annotations.push(crate::annotations::RawAnnotation {
                    lesion_id: id.clone(),
                    annotator_id: "S1".to_string(),
                    feature: f,
                    score: (i as f64 + f as usize as f64) * 0.37 - 1.3,
                });
            }
        }
        let table = crate::annotations::aggregate_per_lesion(&annotations, &ids).unwrap();
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let densities = crate::annotations::feature_density_summary(&table, &labels).unwrap();
        assert_eq!(densities.len(), 9); // 3 features x 3 classes

        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&[], &densities, dir.path()).unwrap();
        for f in ["A", "B", "C"] {
            assert!(files.iter().any(|p| p.ends_with(format!("density_{f}.csv"))));
            assert!(files.iter().any(|p| p.ends_with(format!("density_{f}.svg"))));
        }
        let svg = std::fs::read_to_string(dir.path().join("density_A.svg")).unwrap();
        assert!(svg.contains("<svg"));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&[], &[], dir.path()).is_err());
    }
}
