//! Shape-function tables, SVG plots, per-example explanations and ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::{density_histogram, fmt_f64, DEFAULT_BINS};
use crate::error::{NamError, Result};
use crate::pipeline::{Inputs, ModelFile};

pub const DEFAULT_GRID: usize = 256;
pub const SVG_WIDTH: f64 = 640.0;
pub const SVG_HEIGHT: f64 = 360.0;

/// One shape function sampled on a grid: one curve per ensemble member
/// plus the normalized data density at each grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTable {
    /// Grid in original feature units.
    pub x: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
    pub density: Vec<f64>,
}

impl ShapeTable {
    /// Header `x,f_1..f_M,density`, one grid point per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x");
        for m in 1..=self.curves.len() {
            let _ = write!(out, ",f_{m}");
        }
        out.push_str(",density\n");
        for i in 0..self.x.len() {
            out.push_str(&fmt_f64(self.x[i]));
            for c in &self.curves {
                out.push(',');
                out.push_str(&fmt_f64(c[i]));
            }
            out.push(',');
            out.push_str(&fmt_f64(self.density[i]));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let m = header.len().saturating_sub(2);
        let expected: Vec<String> = std::iter::once("x".to_string())
            .chain((1..=m).map(|i| format!("f_{i}")))
            .chain(std::iter::once("density".to_string()))
            .collect();
        if header.len() < 3 || header != expected {
            return Err(NamError::Data(format!(
                "shape table header must be x,f_1..f_M,density, got {}",
                header.join(",")
            )));
        }
        let mut t = ShapeTable {
            x: Vec::new(),
            curves: vec![Vec::new(); m],
            density: Vec::new(),
        };
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| NamError::Data(format!("row {}: bad value {c:?}", r + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            t.x.push(vals[0]);
            for (c, v) in t.curves.iter_mut().zip(&vals[1..=m]) {
                c.push(*v);
            }
            t.density.push(vals[m + 1]);
        }
        if t.x.is_empty() {
            return Err(NamError::Data("shape table has no rows".into()));
        }
        Ok(t)
    }
}

/// Shape table of feature `k` for shape head `head`. Density comes from
/// `column`, the feature's raw values.
pub fn shape_table(model: &ModelFile, k: usize, head: usize, grid: usize, column: &[f64]) -> Result<ShapeTable> {
    if !model.is_centered() {
        return Err(NamError::Usage("shape export requires a centered model".into()));
    }
    if k >= model.feature_names.len() {
        return Err(NamError::Index {
            index: k,
            len: model.feature_names.len(),
        });
    }
    let (zs, curves) = model.shape_curves(k, head, grid)?;
    let x: Vec<f64> = zs.iter().map(|z| model.preprocessor.inverse_value(k, *z)).collect();
    let hist = density_histogram(column, DEFAULT_BINS)
        .map_err(|_| NamError::Data(format!("feature {:?} has no observed values", model.feature_names[k])))?;
    let mut density: Vec<f64> = x.iter().map(|v| hist.density_at(*v)).collect();
    let top = density.iter().copied().fold(0.0, f64::max);
    if top > 0.0 {
        density.iter_mut().for_each(|d| *d /= top);
    }
    Ok(ShapeTable { x, curves, density })
}

/// File stem for a feature (and head, when the model has several).
pub fn shape_file_stem(k: usize, feature: &str, head: Option<&str>) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect()
    };
    match head {
        Some(h) => format!("shape_{k:03}_{}__{}", clean(feature), clean(h)),
        None => format!("shape_{k:03}_{}", clean(feature)),
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn span(lo: f64, hi: f64, pad: f64) -> (f64, f64) {
    if hi > lo {
        let p = (hi - lo) * pad;
        (lo - p, hi + p)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

/// Fixed 640x360 plot: density bars behind the member curves.
pub fn render_svg(table: &ShapeTable, title: &str) -> String {
    const LEFT: f64 = 64.0;
    const RIGHT: f64 = 16.0;
    const TOP: f64 = 32.0;
    const BOTTOM: f64 = 40.0;
    let pw = SVG_WIDTH - LEFT - RIGHT;
    let ph = SVG_HEIGHT - TOP - BOTTOM;
    let n = table.x.len();
    let x_lo = table.x.iter().copied().fold(f64::INFINITY, f64::min);
    let x_hi = table.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1) = if x_hi > x_lo { (x_lo, x_hi) } else { span(x_lo, x_hi, 0.0) };
    let all = table.curves.iter().flatten().copied();
    let y_lo = all.clone().fold(f64::INFINITY, f64::min);
    let y_hi = all.fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = span(y_lo, y_hi, 0.05);
    let px = |v: f64| LEFT + (v - x0) / (x1 - x0) * pw;
    let py = |v: f64| TOP + (y1 - v) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        SVG_WIDTH / 2.0,
        xml_escape(title)
    );
    let bar_w = pw / n.max(1) as f64;
    let _ = writeln!(s, r##"<g fill="#d62728" fill-opacity="0.3">"##);
    for (x, d) in table.x.iter().zip(&table.density) {
        if *d <= 0.0 {
            continue;
        }
        let h = d * ph;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
            (px(*x) - bar_w / 2.0).max(LEFT),
            TOP + ph - h,
            bar_w,
            h
        );
    }
    s.push_str("</g>\n");
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#888888" stroke-dasharray="4 3"/>"##,
            LEFT + pw,
            y = py(0.0)
        );
    }
    let opacity = if table.curves.len() > 1 { 0.4 } else { 1.0 };
    for c in &table.curves {
        let pts: Vec<String> = table
            .x
            .iter()
            .zip(c)
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#1f77b4" stroke-opacity="{opacity}" stroke-width="1.5" points="{}"/>"##,
            pts.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    let label = |s: &mut String, x: f64, y: f64, anchor: &str, v: f64| {
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{v:.3}</text>"#
        );
    };
    label(&mut s, LEFT, TOP + ph + 16.0, "start", x0);
    label(&mut s, LEFT + pw, TOP + ph + 16.0, "end", x1);
    label(&mut s, LEFT - 6.0, TOP + ph, "end", y0);
    label(&mut s, LEFT - 6.0, TOP + 10.0, "end", y1);
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub target: String,
    pub bias: f64,
    /// Sorted by decreasing magnitude.
    pub contributions: Vec<Contribution>,
    pub logit: f64,
    /// Model prediction (link applied).
    pub prediction: f64,
}

/// Per-target breakdown of row `row` of `inp`: bias plus one term per
/// feature, adding up to the logit.
pub fn explain(model: &ModelFile, inp: &Inputs, row: usize) -> Result<Vec<Explanation>> {
    if !model.is_centered() {
        return Err(NamError::Usage("explanations require a centered model".into()));
    }
    if row >= inp.rows() {
        return Err(NamError::Index {
            index: row,
            len: inp.rows(),
        });
    }
    let terms = model.terms(inp)?;
    let logits = model.logits(inp)?;
    let link = model.link();
    Ok(model
        .target_names
        .iter()
        .enumerate()
        .map(|(t, target)| {
            let mut contributions: Vec<Contribution> = model
                .feature_names
                .iter()
                .enumerate()
                .map(|(k, f)| Contribution {
                    feature: f.clone(),
                    value: terms.contribution(row, t, k),
                })
                .collect();
            contributions.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()));
            let logit = logits.get(row, t);
            Explanation {
                target: target.clone(),
                bias: terms.bias.get(row, t),
                contributions,
                logit,
                prediction: link.apply(logit),
            }
        })
        .collect())
}

/// Removes feature `k` and returns the largest per-target change in mean
/// logit over `inp`.
pub fn ablate(model: &mut ModelFile, k: usize, inp: &Inputs) -> Result<f64> {
    if !model.is_centered() {
        return Err(NamError::Usage("ablation requires a centered model".into()));
    }
    let mean_logits = |m: &ModelFile| -> Result<Vec<f64>> {
        let l = m.logits(inp)?;
        let n = l.rows() as f64;
        Ok(l.column_sums().into_iter().map(|s| s / n).collect())
    };
    let before = mean_logits(model)?;
    model.zero_out_feature(k)?;
    let after = mean_logits(model)?;
    Ok(before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
