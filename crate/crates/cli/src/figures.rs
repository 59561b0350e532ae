//! Hand-rolled SVG emission for training curves and confusion-matrix
//! heatmaps. No plotting dependency; the output is plain text and diffable.

use audiofault_core::metrics::ConfusionMatrix;
use audiofault_core::model::TrainHistory;
use std::fmt::Write as _;

const PANEL_W: f64 = 560.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_B: f64 = 34.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_R: f64 = 16.0;

struct Panel {
    x0: f64,
    y0: f64,
}

fn polyline(out: &mut String, panel: &Panel, ys: &[f64], lo: f64, hi: f64, color: &str) {
    let n = ys.len();
    if n == 0 {
        return;
    }
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut points = String::new();
    for (i, &y) in ys.iter().enumerate() {
        let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let px = panel.x0 + MARGIN_L + fx * plot_w;
        let py = panel.y0 + MARGIN_T + (1.0 - (y - lo) / span) * plot_h;
        let _ = write!(points, "{px:.2},{py:.2} ");
    }
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>"#
    );
}

fn axes(out: &mut String, panel: &Panel, title: &str, lo: f64, hi: f64, epochs: usize) {
    let x0 = panel.x0 + MARGIN_L;
    let y0 = panel.y0 + MARGIN_T;
    let x1 = panel.x0 + PANEL_W - MARGIN_R;
    let y1 = panel.y0 + PANEL_H - MARGIN_B;
    let _ = writeln!(
        out,
        r##"<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#888"/>"##,
        w = x1 - x0,
        h = y1 - y0
    );
    let _ = writeln!(
        out,
        r#"<text x="{tx}" y="{ty}" font-size="13" text-anchor="middle" font-family="sans-serif">{title}</text>"#,
        tx = panel.x0 + PANEL_W / 2.0,
        ty = panel.y0 + 18.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{x}" y="{ya}" font-size="10" text-anchor="end" font-family="sans-serif">{hi:.3}</text>"#,
        x = x0 - 4.0,
        ya = y0 + 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{x}" y="{yb}" font-size="10" text-anchor="end" font-family="sans-serif">{lo:.3}</text>"#,
        x = x0 - 4.0,
        yb = y1
    );
    let _ = writeln!(
        out,
        r#"<text x="{tx}" y="{ty}" font-size="10" text-anchor="middle" font-family="sans-serif">epoch (1..{epochs})</text>"#,
        tx = (x0 + x1) / 2.0,
        ty = y1 + 24.0
    );
}

fn legend(out: &mut String, panel: &Panel, entries: &[(&str, &str)]) {
    let mut x = panel.x0 + MARGIN_L + 8.0;
    let y = panel.y0 + MARGIN_T + 14.0;
    for (label, color) in entries {
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{ry}" width="14" height="3" fill="{color}"/>"#,
            ry = y - 4.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{tx}" y="{y}" font-size="11" font-family="sans-serif">{label}</text>"#,
            tx = x + 18.0
        );
        x += 80.0;
    }
}

/// Two stacked panels: accuracy (train/val) and loss (train/val) per epoch.
pub fn training_curves_svg(title: &str, history: &TrainHistory) -> String {
    let n = history.epochs.len();
    let train_acc: Vec<f64> = history.epochs.iter().map(|e| e.train_acc).collect();
    let val_acc: Vec<f64> = history.epochs.iter().map(|e| e.val_acc).collect();
    let train_loss: Vec<f64> = history.epochs.iter().map(|e| e.train_loss).collect();
    let val_loss: Vec<f64> = history.epochs.iter().map(|e| e.val_loss).collect();

    let bounds = |a: &[f64], b: &[f64]| {
        let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-6);
        (lo - pad, hi + pad)
    };

    let total_h = 2.0 * PANEL_H + 20.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{total_h}" viewBox="0 0 {PANEL_W} {total_h}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="100%" height="100%" fill="white"/>"#
    );

    let acc_panel = Panel { x0: 0.0, y0: 0.0 };
    let (lo, hi) = bounds(&train_acc, &val_acc);
    axes(&mut out, &acc_panel, &format!("{title} accuracy"), lo, hi, n);
    polyline(&mut out, &acc_panel, &train_acc, lo, hi, "#1f77b4");
    polyline(&mut out, &acc_panel, &val_acc, lo, hi, "#d62728");
    legend(&mut out, &acc_panel, &[("train", "#1f77b4"), ("val", "#d62728")]);

    let loss_panel = Panel {
        x0: 0.0,
        y0: PANEL_H + 20.0,
    };
    let (lo, hi) = bounds(&train_loss, &val_loss);
    axes(&mut out, &loss_panel, &format!("{title} loss"), lo, hi, n);
    polyline(&mut out, &loss_panel, &train_loss, lo, hi, "#1f77b4");
    polyline(&mut out, &loss_panel, &val_loss, lo, hi, "#d62728");
    legend(&mut out, &loss_panel, &[("train", "#1f77b4"), ("val", "#d62728")]);

    out.push_str("</svg>\n");
    out
}

/// 2x2 confusion-matrix heatmap; cell intensity scales with count.
pub fn confusion_heatmap_svg(title: &str, cm: &ConfusionMatrix) -> String {
    let total = cm.total().max(1) as f64;
    let cell = 110.0;
    let ox = 120.0;
    let oy = 70.0;
    let w = ox + 2.0 * cell + 30.0;
    let h = oy + 2.0 * cell + 50.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{tx}" y="24" font-size="14" text-anchor="middle" font-family="sans-serif">{title}</text>"#,
        tx = w / 2.0
    );

    // rows: actual (abnormal, normal); cols: predicted (abnormal, normal)
    let cells = [
        (0, 0, cm.tpc, "TP"),
        (0, 1, cm.fnc, "FN"),
        (1, 0, cm.fpc, "FP"),
        (1, 1, cm.tnc, "TN"),
    ];
    for (row, col, count, tag) in cells {
        let x = ox + col as f64 * cell;
        let y = oy + row as f64 * cell;
        let intensity = (count as f64 / total * 255.0).round() as u8;
        let _ = writeln!(
            out,
            r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})" stroke="#444"/>"##,
            r = 255 - intensity / 2,
            g = 255 - intensity,
            b = 255 - intensity
        );
        let _ = writeln!(
            out,
            r#"<text x="{tx}" y="{ty}" font-size="13" text-anchor="middle" font-family="sans-serif">{tag} = {count}</text>"#,
            tx = x + cell / 2.0,
            ty = y + cell / 2.0 + 4.0
        );
    }
    for (i, label) in ["abnormal", "normal"].iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{tx}" y="{ty}" font-size="11" text-anchor="middle" font-family="sans-serif">pred {label}</text>"#,
            tx = ox + i as f64 * cell + cell / 2.0,
            ty = oy - 10.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{tx}" y="{ty}" font-size="11" text-anchor="end" font-family="sans-serif">actual {label}</text>"#,
            tx = ox - 8.0,
            ty = oy + i as f64 * cell + cell / 2.0 + 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}
