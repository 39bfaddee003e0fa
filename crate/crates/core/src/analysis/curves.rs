use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{RunStatus, SummaryRow, SweepResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub value: f64,
    /// `None` for diverged points.
    pub final_val_loss: Option<f64>,
    pub status: RunStatus,
}

impl CurvePoint {
    pub fn completed(value: f64, loss: f64) -> Self {
        Self {
            value,
            final_val_loss: Some(loss),
            status: RunStatus::Completed,
        }
    }

    pub fn diverged(value: f64, step: usize) -> Self {
        Self {
            value,
            final_val_loss: None,
            status: RunStatus::Diverged { step },
        }
    }

    fn loss(&self) -> Option<f64> {
        if self.status.is_completed() {
            self.final_val_loss
        } else {
            None
        }
    }
}

/// Final validation loss against one swept hyperparameter for one optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub optimizer: String,
    /// Sorted by `value`.
    pub points: Vec<CurvePoint>,
    /// Divisor applied to the axis by [`SweepCurve::shifted`].
    pub shift: Option<f64>,
}

impl SweepCurve {
    pub fn new(optimizer: impl Into<String>, mut points: Vec<CurvePoint>) -> Self {
        points.sort_by(|a, b| a.value.total_cmp(&b.value));
        Self {
            optimizer: optimizer.into(),
            points,
            shift: None,
        }
    }

    /// Index of the lowest completed loss; the first one on ties.
    pub fn optimum_index(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.points.iter().enumerate() {
            if let Some(l) = p.loss() {
                if best.is_none_or(|(_, b)| l < b) {
                    best = Some((i, l));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.optimum_index().and_then(|i| self.points[i].loss())
    }

    /// Raw axis value of the optimum, undoing any shift.
    pub fn optimum_value(&self) -> Option<f64> {
        self.optimum_index().map(|i| self.raw(self.points[i].value))
    }

    fn raw(&self, value: f64) -> f64 {
        self.shift.map_or(value, |s| value * s)
    }

    /// The curve with its axis divided by the optimum's value, so the optimum
    /// sits at 1. Curves without a completed point come back unchanged.
    pub fn shifted(&self) -> SweepCurve {
        let Some(opt) = self.optimum_value() else {
            return self.clone();
        };
        let prev = self.shift.unwrap_or(1.0);
        SweepCurve {
            optimizer: self.optimizer.clone(),
            points: self
                .points
                .iter()
                .map(|p| CurvePoint {
                    value: p.value * prev / opt,
                    ..*p
                })
                .collect(),
            shift: Some(opt),
        }
    }

    pub fn all_diverged(&self) -> bool {
        self.optimum_index().is_none()
    }

    /// One curve per optimizer from summary rows, in first-seen order.
    pub fn from_summary(rows: &[SummaryRow]) -> Result<Vec<SweepCurve>> {
        let mut names: Vec<&str> = Vec::new();
        for r in rows {
            if !names.contains(&r.optimizer.as_str()) {
                names.push(&r.optimizer);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let points = rows
                    .iter()
                    .filter(|r| r.optimizer == name)
                    .map(|r| match (r.is_completed(), r.final_val_loss, r.divergence_step) {
                        (true, Some(l), _) => Ok(CurvePoint::completed(r.value, l)),
                        (false, _, Some(s)) => Ok(CurvePoint::diverged(r.value, s)),
                        _ => Err(Error::InvalidArgument(format!(
                            "summary row {name} @ {} has status `{}` without matching loss or step",
                            r.value, r.status
                        ))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SweepCurve::new(name, points))
            })
            .collect()
    }

    pub fn from_result(res: &SweepResult) -> Result<Vec<SweepCurve>> {
        Self::from_summary(&res.summary())
    }
}

/// Number of contiguous grid points around the optimum that completed with
/// loss ≤ `tol` × the optimal loss. Zero when nothing completed.
pub fn stability_width(curve: &SweepCurve, tol: f64) -> usize {
    let Some(opt) = curve.optimum_index() else {
        return 0;
    };
    let bound = tol * curve.points[opt].loss().expect("optimum completed");
    let ok = |i: usize| curve.points[i].loss().is_some_and(|l| l <= bound);
    let left = (0..opt).rev().take_while(|&i| ok(i)).count();
    let right = (opt + 1..curve.points.len()).take_while(|&i| ok(i)).count();
    left + 1 + right
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedRow {
    pub optimizer: String,
    pub raw_value: f64,
    pub shifted_value: f64,
    pub final_val_loss: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct PlotOutput {
    pub svg: PathBuf,
    pub csv: PathBuf,
    pub rows: Vec<AlignedRow>,
    pub warnings: Vec<String>,
}

/// Optionally aligns every curve's optimum to 1, then writes an SVG line
/// chart to `out` and the aligned table next to it with a `.csv` extension.
/// Diverged points are drawn as markers along the top edge.
pub fn align_and_plot(curves: &[SweepCurve], shift: bool, out: impl AsRef<Path>) -> Result<PlotOutput> {
    let out = out.as_ref();
    if curves.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let mut warnings = Vec::new();
    let mut aligned = Vec::with_capacity(curves.len());
    for c in curves {
        if c.all_diverged() {
            warnings.push(format!(
                "`{}` has no completed point; drawn as divergence markers only",
                c.optimizer
            ));
        }
        aligned.push(if shift { c.shifted() } else { c.clone() });
    }
    let mut rows = Vec::new();
    for c in &aligned {
        for p in &c.points {
            rows.push(AlignedRow {
                optimizer: c.optimizer.clone(),
                raw_value: c.raw(p.value),
                shifted_value: p.value,
                final_val_loss: p.loss(),
                status: p.status.as_str().into(),
            });
        }
    }
    let csv_path = out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["optimizer", "raw_value", "shifted_value", "final_val_loss", "status"])?;
    for r in &rows {
        w.write_record([
            r.optimizer.clone(),
            r.raw_value.to_string(),
            r.shifted_value.to_string(),
            r.final_val_loss.map(|l| l.to_string()).unwrap_or_default(),
            r.status.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let x_label = if shift { "value / optimal value" } else { "value" };
    let svg = render_svg(&aligned, x_label);
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))?;
    Ok(PlotOutput {
        svg: out.to_path_buf(),
        csv: csv_path,
        rows,
        warnings,
    })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn render_svg(curves: &[SweepCurve], x_label: &str) -> String {
    let (w, h) = (720.0, 460.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);

    let xs: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.value)).collect();
    let log_x = xs.iter().all(|&x| x > 0.0) && {
        let (lo, hi) = min_max(&xs);
        hi / lo > 10.0
    };
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let (mut x0, mut x1) = min_max(&xs.iter().map(|&x| tx(x)).collect::<Vec<_>>());
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let losses: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().filter_map(|p| p.loss()))
        .collect();
    let (mut y0, mut y1) = if losses.is_empty() {
        (0.0, 1.0)
    } else {
        min_max(&losses)
    };
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    y0 -= pad;
    y1 += pad;
    let px = |x: f64| left + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    // x ticks
    let ticks: Vec<f64> = if log_x {
        (x0.floor() as i64..=x1.ceil() as i64)
            .map(|e| e as f64)
            .filter(|&e| e >= x0 - 1e-9 && e <= x1 + 1e-9)
            .collect()
    } else {
        (0..=4).map(|i| x0 + (x1 - x0) * i as f64 / 4.0).collect()
    };
    for t in ticks {
        let x = left + (t - x0) / (x1 - x0) * pw;
        let label = if log_x {
            format!("1e{}", t as i64)
        } else {
            format!("{t:.3}")
        };
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 20.0
        );
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#,
        left + pw / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">final validation loss</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        // Lines connect consecutive completed points only.
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, s: &mut String| {
            if run.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    run.join(" ")
                );
            }
            run.clear();
        };
        for p in &c.points {
            match p.loss() {
                Some(l) => {
                    let (x, y) = (px(p.value), py(l));
                    run.push(format!("{x:.1},{y:.1}"));
                    let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
                }
                None => {
                    flush(&mut run, &mut s);
                    let (x, y) = (px(p.value), top + 8.0);
                    let _ = writeln!(
                        s,
                        r#"<path d="M{:.1},{:.1} L{:.1},{:.1} L{x:.1},{:.1} Z" fill="{color}"><title>diverged</title></path>"#,
                        x - 5.0,
                        y - 4.0,
                        x + 5.0,
                        y - 4.0,
                        y + 5.0
                    );
                }
            }
        }
        flush(&mut run, &mut s);
        let ly = top + 15.0 + 20.0 * k as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&c.optimizer)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(name: &str, pts: &[(f64, Option<f64>)]) -> SweepCurve {
        SweepCurve::new(
            name,
            pts.iter()
                .map(|&(v, l)| match l {
                    Some(l) => CurvePoint::completed(v, l),
                    None => CurvePoint::diverged(v, 10),
                })
                .collect(),
        )
    }

    #[test]
    fn optimum_and_width() {
        let c = curve(
            "a",
            &[
                (1.0, Some(3.0)),
                (0.1, Some(4.0)),
                (10.0, Some(3.2)),
                (100.0, None),
                (1000.0, Some(3.0)),
            ],
        );
        assert_eq!(c.points[0].value, 0.1);
        assert_eq!(c.optimum_index(), Some(1));
        assert_eq!(stability_width(&c, 1.1), 2);
        assert_eq!(stability_width(&c, 1.5), 3);
    }

    #[test]
    fn degenerate_widths() {
        let flat = curve("f", &[(1.0, Some(2.0)), (2.0, Some(2.0)), (3.0, Some(2.0))]);
        assert_eq!(stability_width(&flat, 1.05), 3);
        let single = curve("s", &[(1.0, None), (2.0, Some(2.0)), (3.0, None)]);
        assert_eq!(stability_width(&single, 1.05), 1);
        assert_eq!(stability_width(&curve("d", &[(1.0, None)]), 1.05), 0);
    }

    #[test]
    fn shift_moves_optima_to_one() {
        let a = curve("a", &[(1e-4, Some(3.0)), (1e-3, Some(2.0)), (1e-2, Some(2.5))]).shifted();
        let b = curve("b", &[(1e-4, Some(3.0)), (3.16e-4, Some(2.0)), (1e-3, Some(2.5))]).shifted();
        assert_eq!(a.points[a.optimum_index().unwrap()].value, 1.0);
        assert_eq!(b.points[b.optimum_index().unwrap()].value, 1.0);
        assert_eq!(a.optimum_value(), Some(1e-3));
        assert_eq!(a.shifted(), a);
    }

    #[test]
    fn plot_files_and_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let curves = [
            curve("adamw", &[(1e-3, Some(3.0)), (3.16e-3, Some(2.9)), (1e-2, None)]),
            curve("dead", &[(1.0, None), (10.0, None)]),
        ];
        let out = align_and_plot(&curves, true, dir.path().join("fig.svg")).unwrap();
        assert_eq!(out.warnings.len(), 1);
        let svg = std::fs::read_to_string(&out.svg).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.contains("diverged"));
        let csv = std::fs::read_to_string(&out.csv).unwrap();
        assert!(csv.starts_with("optimizer,raw_value,shifted_value,final_val_loss,status"));
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.contains("adamw,0.00316,1,2.9,completed"));
    }
}
