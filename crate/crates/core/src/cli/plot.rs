use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, AmocError, Result};
use crate::eval::{pca, read_embeddings, read_labels, EpsCurve, RobustnessReport};
use crate::train::EpochMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    EpsCurve,
    LossCurves,
    VariantBars,
    EmbeddingScatter,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self {
            x: span(&mut xs.clone()),
            y: span(&mut ys.clone()),
        }
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn header(s: &mut String, title: &str) {
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r#"<g stroke="black" fill="none"><line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, f.px(xv), y1 + 16.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 6.0, f.py(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(s, r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0, escape(ylabel));
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 14.0 * i as f64 + 6.0;
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#, W - RIGHT + 12.0, y - 8.0, color(i), W - RIGHT + 26.0, y + 1.0, escape(n));
    }
}

fn polyline(s: &mut String, f: &Frame, pts: &[(f64, f64)], i: usize) {
    let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#, color(i), coords.join(" "));
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p)?;
    serde_json::from_str(&text).map_err(|e| AmocError::Format(format!("{}: {e}", p.display())))
}

fn series_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame::new(
        series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)),
        series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)),
    );
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s, &f, xlabel, ylabel);
    for (i, (_, pts)) in series.iter().enumerate() {
        polyline(&mut s, &f, pts, i);
    }
    legend(&mut s, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn eps_curve(inputs: &[PathBuf]) -> Result<String> {
    let mut series = Vec::new();
    for p in inputs {
        let c: EpsCurve = read_json(p)?;
        let name = if c.label.is_empty() { stem(p) } else { c.label.clone() };
        series.push((name, c.points));
    }
    Ok(series_plot("Accuracy under attack", "epsilon", "accuracy (%)", &series))
}

fn loss_curves(inputs: &[PathBuf]) -> Result<String> {
    let mut series = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p)?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<EpochMetrics>(l).map_err(|e| AmocError::Format(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>>>()?;
        let s = stem(p);
        let pick = |f: fn(&EpochMetrics) -> f64| rows.iter().map(|m| (m.epoch as f64, f(m))).collect::<Vec<_>>();
        series.push((format!("{s} total"), pick(|m| m.loss)));
        series.push((format!("{s} ccc"), pick(|m| m.l_ccc)));
        series.push((format!("{s} variant"), pick(|m| m.l_variant)));
    }
    Ok(series_plot("Pre-training losses", "epoch", "loss", &series))
}

fn variant_bars(inputs: &[PathBuf]) -> Result<String> {
    let reports = inputs
        .iter()
        .map(|p| {
            let r: RobustnessReport = read_json(p)?;
            let name = if r.label.is_empty() { stem(p) } else { r.label.clone() };
            Ok((name, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut metrics = vec!["Clean".to_string()];
    for (_, r) in &reports {
        for a in &r.attacks {
            if !metrics.contains(&a.name) {
                metrics.push(a.name.clone());
            }
        }
    }
    let f = Frame {
        x: (0.0, reports.len() as f64),
        y: (0.0, 100.0),
    };
    let mut s = String::new();
    header(&mut s, "Accuracy by configuration");
    axes(&mut s, &f, "configuration", "accuracy (%)");
    let group = (W - LEFT - RIGHT) / reports.len() as f64;
    let bar = group * 0.8 / metrics.len() as f64;
    for (g, (name, r)) in reports.iter().enumerate() {
        let x0 = LEFT + g as f64 * group + group * 0.1;
        for (m, metric) in metrics.iter().enumerate() {
            let v = if m == 0 { Some(r.clean_accuracy) } else { r.accuracy_of(metric) };
            if let Some(v) = v {
                let y = f.py(v);
                let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#, x0 + m as f64 * bar, y, bar, H - BOTTOM - y, color(m));
            }
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, x0 + group * 0.4, H - BOTTOM + 30.0, escape(name));
    }
    legend(&mut s, &metrics);
    s.push_str("</svg>\n");
    Ok(s)
}

fn embedding_scatter(inputs: &[PathBuf]) -> Result<String> {
    let emb_path = &inputs[0];
    let label_path = match inputs.get(1) {
        Some(p) => p.clone(),
        None => emb_path.with_file_name("labels.txt"),
    };
    let emb = read_embeddings(emb_path)?;
    let labels = read_labels(&label_path)?;
    if labels.len() != emb.nrows() {
        return arg_err(format!("{} embeddings but {} labels", emb.nrows(), labels.len()));
    }
    let p = pca(&emb, 2)?;
    let f = Frame::new(p.projected.column(0).to_vec().into_iter(), p.projected.column(1).to_vec().into_iter());
    let mut s = String::new();
    header(&mut s, "Embeddings (PCA)");
    let xl = format!("PC1 ({:.1}%)", 100.0 * p.explained_ratio[0]);
    let yl = format!("PC2 ({:.1}%)", 100.0 * p.explained_ratio[1]);
    axes(&mut s, &f, &xl, &yl);
    for (row, &l) in p.projected.rows().into_iter().zip(&labels) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.7"/>"#, f.px(row[0]), f.py(row[1]), color(l));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    legend(&mut s, &(0..classes).map(|c| format!("class {c}")).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders one SVG of `kind` from `inputs` into `out`. Output depends only
/// on the inputs and their order.
pub fn emit_plots(inputs: &[PathBuf], kind: PlotKind, out: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return arg_err("plot needs at least one input file");
    }
    let svg = match kind {
        PlotKind::EpsCurve => eps_curve(inputs)?,
        PlotKind::LossCurves => loss_curves(inputs)?,
        PlotKind::VariantBars => variant_bars(inputs)?,
        PlotKind::EmbeddingScatter => embedding_scatter(inputs)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, svg)?;
    Ok(vec![out.to_path_buf()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Norm;
    use crate::eval::{write_embeddings, write_labels};
    use ndarray::Array2;

    #[test]
    fn two_point_curve_gives_one_polyline_with_two_vertices() {
        let dir = tempfile::tempdir().unwrap();
        let c = EpsCurve { label: "m".into(), norm: Norm::Linf, points: vec![(0.0, 90.0), (0.03, 40.0)] };
        let input = dir.path().join("c.json");
        fs::write(&input, serde_json::to_string(&c).unwrap()).unwrap();
        let out = dir.path().join("p.svg");
        emit_plots(&[input.clone()], PlotKind::EpsCurve, &out).unwrap();
        let svg = fs::read_to_string(&out).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 2);
        let out2 = dir.path().join("q.svg");
        emit_plots(&[input], PlotKind::EpsCurve, &out2).unwrap();
        assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());
    }

    #[test]
    fn empty_input_list_is_an_argument_error() {
        let err = emit_plots(&[], PlotKind::VariantBars, Path::new("x.svg")).unwrap_err();
        assert!(matches!(err, AmocError::Argument(_)));
    }

    #[test]
    fn scatter_draws_one_point_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let emb = Array2::from_shape_fn((37, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64 + (i % 2) as f64 * 5.0);
        let e = dir.path().join("embeddings.bin");
        write_embeddings(&e, &emb).unwrap();
        write_labels(dir.path().join("labels.txt"), &(0..37).map(|i| i % 2).collect::<Vec<_>>()).unwrap();
        let out = dir.path().join("s.svg");
        emit_plots(&[e], PlotKind::EmbeddingScatter, &out).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap().matches("<circle").count(), 37);
    }
}
