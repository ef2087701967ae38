//! Minimal deterministic SVG plotting: line charts for sweeps and trade-off
//! curves, scatter charts for 2-D feature projections. No external renderer —
//! the output is a self-contained SVG document with fixed geometry, so equal
//! inputs produce byte-identical files.

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 60.0;

/// Fixed series palette (colorblind-safe-ish, cycles past ten).
const PALETTE: [&str; 10] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb", "#222255",
    "#225555", "#553311",
];

/// One named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    // Stable short decimal so re-renders are byte-identical.
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Result<Self> {
        let mut x_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        let mut any = false;
        for &(x, y) in points {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Numerical(format!("non-finite plot point ({x}, {y})")));
            }
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
            any = true;
        }
        if !any {
            return Err(Error::Config("cannot plot an empty point set".into()));
        }
        // Degenerate spans get a unit pad so the data sits mid-frame.
        if x_max - x_min < 1e-12 {
            x_min -= 0.5;
            x_max += 0.5;
        }
        if y_max - y_min < 1e-12 {
            y_min -= 0.5;
            y_max += 0.5;
        }
        Ok(Self { x_min, x_max, y_min, y_max })
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x_min) / (self.x_max - self.x_min)
            * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM
            - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn axes(frame: &Frame, x_label: &str, y_label: &str) -> String {
    let x0 = MARGIN_LEFT;
    let x1 = WIDTH - MARGIN_RIGHT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    let mut out = String::new();
    out.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    // Five ticks per axis.
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = frame.x_min + t * (frame.x_max - frame.x_min);
        let yv = frame.y_min + t * (frame.y_max - frame.y_min);
        let xs = frame.sx(xv);
        let ys = frame.sy(yv);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y0}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{}</text>\n",
            fmt(xs),
            fmt(xs),
            y0 + 5.0,
            fmt(xs),
            y0 + 20.0,
            fmt(xv)
        ));
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{x0}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"11\">{}</text>\n",
            x0 - 5.0,
            fmt(ys),
            fmt(ys),
            x0 - 9.0,
            fmt(ys + 4.0),
            fmt(yv)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    ));
    out
}

fn legend(labels: &[String]) -> String {
    let mut out = String::new();
    let lx = WIDTH - MARGIN_RIGHT + 16.0;
    for (i, label) in labels.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = MARGIN_TOP + 14.0 + 18.0 * i as f64;
        out.push_str(&format!(
            "<rect x=\"{lx}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            fmt(ly - 9.0),
            lx + 15.0,
            fmt(ly),
            escape(label)
        ));
    }
    out
}

/// Render named series as polylines with markers on shared axes.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Config("cannot plot an empty series set".into()));
    }
    let frame = Frame::from_points(series.iter().flat_map(|s| s.points.iter()))?;
    let mut out = header(title);
    out.push_str(&axes(&frame, x_label, y_label));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{},{}", fmt(frame.sx(x)), fmt(frame.sy(y))))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                pts.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3.5\" fill=\"{color}\"/>\n",
                fmt(frame.sx(x)),
                fmt(frame.sy(y))
            ));
        }
    }
    out.push_str(&legend(
        &series.iter().map(|s| s.label.clone()).collect::<Vec<_>>(),
    ));
    out.push_str("</svg>\n");
    Ok(out)
}

/// Scatter of labeled 2-D points (e.g. class-colored feature projections).
pub fn scatter_plot(title: &str, groups: &[Series]) -> Result<String> {
    if groups.is_empty() || groups.iter().all(|g| g.points.is_empty()) {
        return Err(Error::Config("cannot plot an empty point set".into()));
    }
    let frame = Frame::from_points(groups.iter().flat_map(|g| g.points.iter()))?;
    let mut out = header(title);
    out.push_str(&axes(&frame, "component 1", "component 2"));
    for (i, g) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y) in &g.points {
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n",
                fmt(frame.sx(x)),
                fmt(frame.sy(y))
            ));
        }
    }
    out.push_str(&legend(
        &groups.iter().map(|g| g.label.clone()).collect::<Vec<_>>(),
    ));
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_renders_each_series_and_is_deterministic() {
        let series = vec![
            Series {
                label: "known".into(),
                points: vec![(0.01, 40.0), (0.03, 90.0), (0.05, 99.0)],
            },
            Series {
                label: "unknown".into(),
                points: vec![(0.01, 20.0), (0.03, 70.0), (0.05, 90.0)],
            },
        ];
        let svg = line_plot("sweep", "epsilon", "ASR (%)", &series).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 6);
        assert!(svg.contains("known") && svg.contains("unknown"));
        assert!(svg.starts_with("<svg ") && svg.trim_end().ends_with("</svg>"));
        let again = line_plot("sweep", "epsilon", "ASR (%)", &series).unwrap();
        assert_eq!(svg, again);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(line_plot("t", "x", "y", &[]).is_err());
        assert!(scatter_plot("t", &[]).is_err());
        let empty = vec![Series { label: "a".into(), points: vec![] }];
        assert!(line_plot("t", "x", "y", &empty).is_err());
    }

    #[test]
    fn non_finite_points_are_rejected() {
        let bad = vec![Series {
            label: "a".into(),
            points: vec![(0.0, f64::NAN)],
        }];
        assert!(line_plot("t", "x", "y", &bad).is_err());
    }

    #[test]
    fn coordinates_stay_inside_the_canvas() {
        let series = vec![Series {
            label: "s".into(),
            points: vec![(-5.0, 1e4), (3.0, -200.0), (100.0, 0.0)],
        }];
        let svg = line_plot("bounds", "x", "y", &series).unwrap();
        for part in svg.split("cx=\"").skip(1) {
            let v: f64 = part.split('"').next().unwrap().parse().unwrap();
            assert!((0.0..=WIDTH).contains(&v), "cx {v} out of canvas");
        }
        for part in svg.split("cy=\"").skip(1) {
            let v: f64 = part.split('"').next().unwrap().parse().unwrap();
            assert!((0.0..=HEIGHT).contains(&v), "cy {v} out of canvas");
        }
    }

    #[test]
    fn degenerate_single_point_still_renders() {
        let series = vec![Series { label: "p".into(), points: vec![(1.0, 50.0)] }];
        let svg = line_plot("point", "x", "y", &series).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }

    #[test]
    fn scatter_marks_every_point_with_its_group_color() {
        let groups = vec![
            Series { label: "class 0".into(), points: vec![(0.0, 0.1), (0.2, 0.1)] },
            Series { label: "class 1".into(), points: vec![(-0.4, -0.2)] },
        ];
        let svg = scatter_plot("projection", &groups).unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches(PALETTE[0]).count(), 3); // 2 markers + legend swatch
        assert_eq!(svg.matches(PALETTE[1]).count(), 2); // 1 marker + legend swatch
    }
}
