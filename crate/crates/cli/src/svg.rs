//! Hand-written SVG line charts of sweep aggregates. Output depends only on
//! the input rows, so identical sweeps give identical bytes.

use std::fmt::Write;

use fdseg::train::LossMode;

use crate::sweep::{Aggregate, SweepResult};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const Y_TICKS: usize = 5;
const CAP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Iou,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Iou => "iou",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Dice => "mean test Dice (base)",
            Metric::Iou => "mean test IoU (base)",
        }
    }

    fn of(self, a: &Aggregate) -> (f64, f64) {
        match self {
            Metric::Dice => (a.mean_dice, a.std_dice),
            Metric::Iou => (a.mean_iou, a.std_iou),
        }
    }
}

fn color(mode: LossMode) -> &'static str {
    match mode {
        LossMode::SegOnly => "#1f77b4",
        LossMode::SegFd => "#2ca02c",
        LossMode::SegFdExch => "#ff7f0e",
        LossMode::SegConStub => "#9467bd",
        LossMode::SegDeepsStub => "#8c564b",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Y range covering every mean ± std, snapped outward to 0.05 and clipped
/// to [0, 1].
fn y_range(points: &[(f64, f64)]) -> (f64, f64) {
    let finite = points.iter().filter(|(m, _)| m.is_finite());
    let lo = finite.clone().map(|(m, s)| m - s).fold(f64::INFINITY, f64::min);
    let hi = finite.map(|(m, s)| m + s).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let mut lo = ((lo * 20.0).floor() / 20.0).max(0.0);
    let mut hi = ((hi * 20.0).ceil() / 20.0).min(1.0);
    if hi - lo < 0.05 {
        if hi >= 1.0 {
            lo = hi - 0.05;
        } else {
            hi = lo + 0.05;
        }
    }
    (lo, hi)
}

/// One polyline per loss mode over the sweep conditions, with ±std whiskers.
pub fn chart(sweep: &SweepResult, metric: Metric, title: &str) -> String {
    let conditions = sweep.conditions();
    let modes = sweep.modes();
    let aggs = sweep.aggregates();
    let (lo, hi) = y_range(&aggs.iter().map(|a| metric.of(a)).collect::<Vec<_>>());
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_at = |i: usize| {
        if conditions.len() == 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i as f64 / (conditions.len() - 1) as f64
        }
    };
    let y_at = |v: f64| TOP + plot_h * (hi - v.clamp(lo, hi)) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + plot_w / 2.0, escape(title));

    for k in 0..=Y_TICKS {
        let v = lo + (hi - lo) * k as f64 / Y_TICKS as f64;
        let y = y_at(v);
        let _ = writeln!(s, r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##, LEFT + plot_w);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000000"/>"##,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    );
    let _ = writeln!(s, r##"<line x1="{LEFT:.2}" y1="{TOP:.2}" x2="{LEFT:.2}" y2="{:.2}" stroke="#000000"/>"##, TOP + plot_h);
    for (i, c) in conditions.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, x_at(i), TOP + plot_h + 18.0, escape(c));
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        metric.label()
    );

    for (m, mode) in modes.iter().enumerate() {
        let col = color(*mode);
        let pts: Vec<(f64, f64, f64)> = conditions
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let a = aggs.iter().find(|a| a.loss_mode == *mode && &a.condition == c)?;
                let (mean, std) = metric.of(a);
                mean.is_finite().then_some((x_at(i), mean, std))
            })
            .collect();
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|(x, v, _)| format!("{x:.2},{:.2}", y_at(*v))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{col}" stroke-width="2" points="{}"/>"#, path.join(" "));
        }
        for (x, v, sd) in &pts {
            let (y0, y1) = (y_at(v - sd), y_at(v + sd));
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{y1:.2}" stroke="{col}"/>"#);
            for y in [y0, y1] {
                let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{col}"/>"#, x - CAP, x + CAP);
            }
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{col}"/>"#, y_at(*v));
        }
        let ly = TOP + 10.0 + 20.0 * m as f64;
        let lx = WIDTH - RIGHT + 20.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{col}" stroke-width="2"/>"#, lx + 24.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 30.0, ly + 4.0, escape(mode.as_str()));
    }
    s.push_str("</svg>\n");
    s
}
