//! Minimal self-contained SVG plots.

use std::fmt::Write;

use ccto_core::geometry::{CoverSphere, Obstacle};

const PANEL: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// Data-to-pixel map of one rectangular panel.
pub struct Panel {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    xr: [f64; 2],
    yr: [f64; 2],
}

impl Panel {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let u = self.left + (x - self.xr[0]) / (self.xr[1] - self.xr[0]) * self.width;
        let v = self.top + self.height - (y - self.yr[0]) / (self.yr[1] - self.yr[0]) * self.height;
        (u, v)
    }

    fn scale(&self) -> f64 {
        self.width / (self.xr[1] - self.xr[0])
    }
}

/// Padded range of the values, never degenerate.
pub fn range(values: impl IntoIterator<Item = f64>) -> [f64; 2] {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return [0.0, 1.0];
    }
    let pad = ((hi - lo) * 0.05).max(1e-9 * lo.abs().max(1.0)).max(1e-6);
    [lo - pad, hi + pad]
}

/// Widens the shorter range so both axes share one scale.
pub fn equal_aspect(xr: [f64; 2], yr: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let (wx, wy) = (xr[1] - xr[0], yr[1] - yr[0]);
    let w = wx.max(wy);
    let grow = |r: [f64; 2], span: f64| {
        let mid = 0.5 * (r[0] + r[1]);
        [mid - 0.5 * w.max(span), mid + 0.5 * w.max(span)]
    };
    (grow(xr, wx), grow(yr, wy))
}

pub struct Figure {
    width: f64,
    height: f64,
    body: String,
}

impl Figure {
    /// A row of `panels` square panels.
    pub fn new(panels: usize, title: &str) -> Self {
        let width = panels as f64 * (PANEL + 2.0 * MARGIN);
        let height = PANEL + 2.0 * MARGIN + 20.0;
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<rect width="{width}" height="{height}" fill="white"/><text x="{:.1}" y="22" font-size="15" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            width / 2.0,
            escape(title)
        );
        Self { width, height, body }
    }

    pub fn panel(&mut self, index: usize, xr: [f64; 2], yr: [f64; 2], xlabel: &str, ylabel: &str) -> Panel {
        let panel = Panel {
            left: index as f64 * (PANEL + 2.0 * MARGIN) + MARGIN,
            top: MARGIN,
            width: PANEL,
            height: PANEL,
            xr,
            yr,
        };
        let (l, t) = (panel.left, panel.top);
        let _ = writeln!(
            self.body,
            r##"<rect x="{l:.1}" y="{t:.1}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#444"/>"##
        );
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = xr[0] + f * (xr[1] - xr[0]);
            let yv = yr[0] + f * (yr[1] - yr[0]);
            let (xp, _) = panel.px(xv, yr[0]);
            let (_, yp) = panel.px(xr[0], yv);
            let _ = writeln!(
                self.body,
                r##"<text x="{xp:.1}" y="{:.1}" font-size="10" text-anchor="middle" font-family="sans-serif">{}</text><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end" font-family="sans-serif">{}</text>"##,
                t + PANEL + 14.0,
                tick(xv),
                l - 4.0,
                yp + 3.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            self.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text><text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            l + PANEL / 2.0,
            t + PANEL + 32.0,
            escape(xlabel),
            l - 34.0,
            t + PANEL / 2.0,
            l - 34.0,
            t + PANEL / 2.0,
            escape(ylabel)
        );
        panel
    }

    pub fn polyline(&mut self, panel: &Panel, pts: impl IntoIterator<Item = (f64, f64)>, stroke: &str, width: f64, opacity: f64) {
        let mut d = String::new();
        for (x, y) in pts {
            let (u, v) = panel.px(x, y);
            let _ = write!(d, "{u:.2},{v:.2} ");
        }
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
            d.trim_end()
        );
    }

    pub fn circle(&mut self, panel: &Panel, x: f64, y: f64, r: f64, style: &str) {
        let (u, v) = panel.px(x, y);
        let _ = writeln!(
            self.body,
            r#"<circle cx="{u:.2}" cy="{v:.2}" r="{:.2}" {style}/>"#,
            r * panel.scale()
        );
    }

    pub fn rect(&mut self, panel: &Panel, min: (f64, f64), max: (f64, f64), style: &str) {
        let (u0, v1) = panel.px(min.0, min.1);
        let (u1, v0) = panel.px(max.0, max.1);
        let _ = writeln!(
            self.body,
            r#"<rect x="{u0:.2}" y="{v0:.2}" width="{:.2}" height="{:.2}" {style}/>"#,
            u1 - u0,
            v1 - v0
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub const OBSTACLE: &str = r##"fill="#c0392b" fill-opacity="0.55" stroke="#922b21""##;
pub const INFLATED: &str = r##"fill="none" stroke="#e67e22" stroke-dasharray="4 3""##;

/// Positions of `(a, b)` within an obstacle's coordinates, when it constrains both.
fn axes_of(dims: &[usize], a: usize, b: usize) -> Option<(usize, usize)> {
    Some((dims.iter().position(|&d| d == a)?, dims.iter().position(|&d| d == b)?))
}

pub fn draw_obstacles(fig: &mut Figure, panel: &Panel, obstacles: &[Obstacle], a: usize, b: usize) {
    for o in obstacles {
        let Some((i, j)) = axes_of(o.dims(), a, b) else { continue };
        match o {
            Obstacle::Sphere { center, radius, .. } => fig.circle(panel, center[i], center[j], *radius, OBSTACLE),
            Obstacle::Box { min, max, .. } => fig.rect(panel, (min[i], min[j]), (max[i], max[j]), OBSTACLE),
        }
    }
}

/// Covering spheres inflated by `radius`.
pub fn draw_cover(fig: &mut Figure, panel: &Panel, spheres: &[CoverSphere], radius: f64, a: usize, b: usize) {
    for s in spheres {
        let Some((i, j)) = axes_of(&s.dims, a, b) else { continue };
        fig.circle(panel, s.center[i], s.center[j], s.base_radius + radius, INFLATED);
    }
}

/// Extent of obstacles along state axis `a`.
pub fn obstacle_extent(obstacles: &[Obstacle], a: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for o in obstacles {
        let Some(i) = o.dims().iter().position(|&d| d == a) else { continue };
        match o {
            Obstacle::Sphere { center, radius, .. } => out.extend([center[i] - radius, center[i] + radius]),
            Obstacle::Box { min, max, .. } => out.extend([min[i], max[i]]),
        }
    }
    out
}

/// Axis pairs to show for a state of dimension `n` whose obstacles live in `position` axes.
pub fn projections(position: &[usize]) -> Vec<(usize, usize)> {
    match position.len() {
        0 | 1 => Vec::new(),
        2 => vec![(position[0], position[1])],
        _ => vec![
            (position[0], position[1]),
            (position[0], position[2]),
            (position[1], position[2]),
        ],
    }
}
