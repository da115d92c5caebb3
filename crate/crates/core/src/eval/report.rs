use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::{Deserialize, Serialize};

use super::metrics::{CurveReport, ScoredSet};
use crate::data::ensure_parent;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub regime: String,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

/// Files written by [`compare_regimes`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonArtifacts {
    pub rows: Vec<ComparisonRow>,
    pub files: Vec<PathBuf>,
}

const NAMED: [(&str, [u8; 3]); 3] = [
    ("baseline", [0x1f, 0x77, 0xb4]),
    ("aug_same_data", [0xff, 0x7f, 0x0e]),
    ("aug_pretrained", [0x2c, 0xa0, 0x2c]),
];
const EXTRA: [[u8; 3]; 4] = [[0xd6, 0x27, 0x28], [0x94, 0x67, 0xbd], [0x8c, 0x56, 0x4b], [0x7f, 0x7f, 0x7f]];

/// Fixed colour per regime name; unknown names cycle through a spare palette
/// by position.
pub fn regime_colour(regime: &str, position: usize) -> [u8; 3] {
    NAMED
        .iter()
        .find(|(n, _)| *n == regime)
        .map(|(_, c)| *c)
        .unwrap_or(EXTRA[position % EXTRA.len()])
}

fn validation_key(set: &ScoredSet) -> Vec<(&str, u8)> {
    let mut k: Vec<(&str, u8)> = set.ids.iter().map(String::as_str).zip(set.labels.iter().copied()).collect();
    k.sort_unstable();
    k
}

/// Table of `(regime, roc_auc, pr_auc)` in input order, written as
/// `metrics.csv` and `metrics.json`.
pub fn write_metrics_table(results: &[(ScoredSet, CurveReport)], metrics_dir: &Path) -> Result<Vec<ComparisonRow>> {
    let rows: Vec<ComparisonRow> = results
        .iter()
        .map(|(s, r)| ComparisonRow {
            regime: s.regime.clone(),
            roc_auc: r.roc_auc,
            pr_auc: r.pr_auc,
        })
        .collect();
    let mut csv = String::from("regime,roc_auc,pr_auc\n");
    for r in &rows {
        writeln!(csv, "{},{},{}", r.regime, r.roc_auc, r.pr_auc).expect("string write");
    }
    write_file(&metrics_dir.join("metrics.csv"), csv.as_bytes())?;
    write_file(
        &metrics_dir.join("metrics.json"),
        serde_json::to_string_pretty(&rows)?.as_bytes(),
    )?;
    Ok(rows)
}

/// Point lists `roc_<regime>.csv` (`fpr,tpr`) and `pr_<regime>.csv`
/// (`recall,precision`).
pub fn write_curves(results: &[(ScoredSet, CurveReport)], metrics_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for (set, rep) in results {
        for (kind, header, pts) in [
            ("roc", "fpr,tpr", &rep.roc_points),
            ("pr", "recall,precision", &rep.pr_points),
        ] {
            let mut s = format!("{header}\n");
            for (a, b) in pts {
                writeln!(s, "{a},{b}").expect("string write");
            }
            let p = metrics_dir.join(format!("{kind}_{}.csv", set.regime));
            write_file(&p, s.as_bytes())?;
            files.push(p);
        }
    }
    Ok(files)
}

/// Writes the metrics table, the curve point lists and a two-panel
/// (ROC | precision-recall) overlay as SVG and PNG. All regimes must have been
/// scored on the same validation samples.
pub fn compare_regimes(
    results: &[(ScoredSet, CurveReport)],
    metrics_dir: &Path,
    plots_dir: &Path,
) -> Result<ComparisonArtifacts> {
    if results.len() < 2 {
        return Err(Error::Invalid(format!(
            "comparison needs at least two regimes, got {}",
            results.len()
        )));
    }
    let reference = validation_key(&results[0].0);
    let mut names = BTreeMap::new();
    for (set, _) in results {
        if validation_key(set) != reference {
            return Err(Error::Invalid(format!(
                "regime {} was evaluated on a different validation set than {}",
                set.regime, results[0].0.regime
            )));
        }
        if names.insert(set.regime.as_str(), ()).is_some() {
            return Err(Error::Invalid(format!("duplicate regime {}", set.regime)));
        }
    }
    let rows = write_metrics_table(results, metrics_dir)?;
    let mut files = vec![metrics_dir.join("metrics.csv"), metrics_dir.join("metrics.json")];
    files.extend(write_curves(results, metrics_dir)?);
    let svg = plots_dir.join("curves.svg");
    write_file(&svg, render_svg(results).as_bytes())?;
    let png = plots_dir.join("curves.png");
    ensure_parent(&png)?;
    render_png(results).save(&png).map_err(|e| Error::Image {
        path: png.clone(),
        message: e.to_string(),
    })?;
    files.push(svg);
    files.push(png);
    Ok(ComparisonArtifacts { rows, files })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const PANEL: f64 = 360.0;
const MARGIN: f64 = 50.0;
const GAP: f64 = 60.0;
const WIDTH: f64 = 2.0 * PANEL + 2.0 * MARGIN + GAP;
const HEIGHT: f64 = PANEL + 2.0 * MARGIN + 20.0;

fn panel_origin(panel: usize) -> (f64, f64) {
    (MARGIN + panel as f64 * (PANEL + GAP), MARGIN)
}

fn to_px(panel: usize, x: f64, y: f64) -> (f64, f64) {
    let (ox, oy) = panel_origin(panel);
    (ox + x.clamp(0.0, 1.0) * PANEL, oy + (1.0 - y.clamp(0.0, 1.0)) * PANEL)
}

/// Polyline vertices in unit coordinates for each panel.
fn panel_paths(rep: &CurveReport) -> [Vec<(f64, f64)>; 2] {
    let roc = rep.roc_points.clone();
    let mut pr = Vec::with_capacity(rep.pr_points.len() * 2);
    for (i, &(r, p)) in rep.pr_points.iter().enumerate() {
        if i > 0 {
            let (pr_r, _) = rep.pr_points[i - 1];
            pr.push((pr_r, p));
        }
        pr.push((r, p));
    }
    [roc, pr]
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn render_svg(results: &[(ScoredSet, CurveReport)]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .ok();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).ok();
    let titles = ["a) ROC curve", "b) Precision-Recall curve"];
    let axes = [("False positive rate", "True positive rate"), ("Recall", "Precision")];
    for panel in 0..2 {
        let (ox, oy) = panel_origin(panel);
        writeln!(
            s,
            r#"<rect x="{ox}" y="{oy}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#
        )
        .ok();
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let (gx, _) = to_px(panel, t, 0.0);
            let (_, gy) = to_px(panel, 0.0, t);
            writeln!(
                s,
                r##"<line x1="{gx}" y1="{oy}" x2="{gx}" y2="{}" stroke="#dddddd"/><line x1="{ox}" y1="{gy}" x2="{}" y2="{gy}" stroke="#dddddd"/>"##,
                oy + PANEL,
                ox + PANEL
            )
            .ok();
            writeln!(
                s,
                r#"<text x="{gx}" y="{}" text-anchor="middle">{t}</text><text x="{}" y="{}" text-anchor="end">{t}</text>"#,
                oy + PANEL + 15.0,
                ox - 5.0,
                gy + 4.0
            )
            .ok();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
            ox + PANEL / 2.0,
            oy - 15.0,
            titles[panel]
        )
        .ok();
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            ox + PANEL / 2.0,
            oy + PANEL + 32.0,
            axes[panel].0
        )
        .ok();
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#,
            ox - 35.0,
            oy + PANEL / 2.0,
            ox - 35.0,
            oy + PANEL / 2.0,
            axes[panel].1
        )
        .ok();
    }
    for (i, (set, rep)) in results.iter().enumerate() {
        let colour = hex(regime_colour(&set.regime, i));
        for (panel, path) in panel_paths(rep).iter().enumerate() {
            let pts: Vec<String> = path
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = to_px(panel, x, y);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
                pts.join(" ")
            )
            .ok();
            let (lx, ly) = panel_origin(panel);
            let auc = if panel == 0 { rep.roc_auc } else { rep.pr_auc };
            let y = ly + PANEL - 12.0 - 16.0 * (results.len() - 1 - i) as f64;
            writeln!(
                s,
                r#"<rect x="{}" y="{}" width="12" height="4" fill="{colour}"/><text x="{}" y="{}">{} (AUC {:.4})</text>"#,
                lx + PANEL - 190.0,
                y - 4.0,
                lx + PANEL - 172.0,
                y,
                set.regime,
                auc
            )
            .ok();
        }
    }
    s.push_str("</svg>\n");
    s
}

fn render_png(results: &[(ScoredSet, CurveReport)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH as u32, HEIGHT as u32, Rgb([255, 255, 255]));
    for panel in 0..2 {
        let (ox, oy) = panel_origin(panel);
        for t in [0.25, 0.5, 0.75] {
            let (gx, _) = to_px(panel, t, 0.0);
            let (_, gy) = to_px(panel, 0.0, t);
            let grey = Rgb([221, 221, 221]);
            draw_line_segment_mut(&mut img, (gx as f32, oy as f32), (gx as f32, (oy + PANEL) as f32), grey);
            draw_line_segment_mut(&mut img, (ox as f32, gy as f32), ((ox + PANEL) as f32, gy as f32), grey);
        }
        draw_hollow_rect_mut(
            &mut img,
            Rect::at(ox as i32, oy as i32).of_size(PANEL as u32 + 1, PANEL as u32 + 1),
            Rgb([0, 0, 0]),
        );
    }
    for (i, (set, rep)) in results.iter().enumerate() {
        let colour = Rgb(regime_colour(&set.regime, i));
        for (panel, path) in panel_paths(rep).iter().enumerate() {
            for w in path.windows(2) {
                let a = to_px(panel, w[0].0, w[0].1);
                let b = to_px(panel, w[1].0, w[1].1);
                for d in [-1.0f64, 0.0, 1.0] {
                    draw_line_segment_mut(
                        &mut img,
                        ((a.0 + d) as f32, a.1 as f32),
                        ((b.0 + d) as f32, b.1 as f32),
                    colour,
                    );
                    draw_line_segment_mut(
                        &mut img,
                        (a.0 as f32, (a.1 + d) as f32),
                        (b.0 as f32, (b.1 + d) as f32),
                        colour,
                    );
                }
            }
            let (lx, ly) = panel_origin(panel);
            let y = ly + PANEL - 16.0 - 14.0 * (results.len() - 1 - i) as f64;
            draw_filled_rect_mut(
                &mut img,
                Rect::at((lx + PANEL - 40.0) as i32, y as i32).of_size(24, 8),
                colour,
            );
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::curve_report;

    fn set(regime: &str, scores: Vec<f64>) -> (ScoredSet, CurveReport) {
        let ids = (0..scores.len()).map(|i| format!("v{i}")).collect();
        let labels = (0..scores.len()).map(|i| u8::from(i % 3 == 0)).collect();
        let s = ScoredSet::new(regime, ids, scores, labels).unwrap();
        let r = curve_report(&s).unwrap();
        (s, r)
    }

    #[test]
    fn identical_sets_give_identical_rows_and_files() {
        let d = tempfile::tempdir().unwrap();
        let scores: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64 / 12.0).collect();
        let res = vec![set("baseline", scores.clone()), set("aug_same_data", scores)];
        let out = compare_regimes(&res, &d.path().join("m"), &d.path().join("p")).unwrap();
        assert_eq!(out.rows[0].roc_auc, out.rows[1].roc_auc);
        assert_eq!(out.rows[0].pr_auc, out.rows[1].pr_auc);
        for f in &out.files {
            assert!(f.exists(), "{}", f.display());
        }
        let csv = std::fs::read_to_string(d.path().join("m/roc_baseline.csv")).unwrap();
        assert!(csv.starts_with("fpr,tpr\n0,0\n"));
        assert!(std::fs::read_to_string(d.path().join("p/curves.svg")).unwrap().contains("b) Precision-Recall curve"));
    }

    #[test]
    fn differing_validation_sets_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        let a = set("baseline", vec![0.1, 0.5, 0.9, 0.3]);
        let mut b = set("aug_same_data", vec![0.1, 0.5, 0.9, 0.3]);
        b.0.ids[2] = "other".into();
        assert!(compare_regimes(&[a.clone(), b], d.path(), d.path()).is_err());
        assert!(compare_regimes(&[a], d.path(), d.path()).is_err());
    }

    #[test]
    fn colours_are_fixed_per_regime() {
        assert_eq!(regime_colour("baseline", 5), regime_colour("baseline", 0));
        assert_ne!(regime_colour("baseline", 0), regime_colour("aug_same_data", 0));
    }
}
