//! Minimal self-contained SVG plots.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 480.0;
const PAD: f64 = 40.0;

struct Frame {
    lo: (f64, f64),
    hi: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in it.filter(|v| v.is_finite()) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if !lo.is_finite() {
                return (0.0, 1.0);
            }
            if hi - lo < 1e-12 {
                return (lo - 0.5, hi + 0.5);
            }
            let m = 0.02 * (hi - lo);
            (lo - m, hi + m)
        };
        let (x0, x1) = range(&mut xs.clone());
        let (y0, y1) = range(&mut ys.clone());
        Frame {
            lo: (x0, y0),
            hi: (x1, y1),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let u = (x - self.lo.0) / (self.hi.0 - self.lo.0);
        let v = (y - self.lo.1) / (self.hi.1 - self.lo.1);
        (PAD + u * (W - 2.0 * PAD), H - PAD - v * (H - 2.0 * PAD))
    }
}

fn open(title: &str, f: &Frame, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{} [{:.3}, {:.3}]</text>"#,
        W / 2.0,
        H - 10.0,
        escape(xlabel),
        f.lo.0,
        f.hi.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {})">{} [{:.3}, {:.3}]</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel),
        f.lo.1,
        f.hi.1
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter plot of `(x, y)` pairs; non-finite points are skipped.
pub fn scatter(points: &[(f64, f64)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let f = Frame::fit(points.iter().map(|p| p.0), points.iter().map(|p| p.1));
    let mut s = open(title, &f, xlabel, ylabel);
    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        let (a, b) = f.px(x, y);
        let _ = writeln!(s, r#"<circle cx="{a:.1}" cy="{b:.1}" r="1" fill="steelblue" fill-opacity="0.5"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

/// Density-normalized histogram of `values` over `bins` equal bins.
pub fn histogram(values: &[f64], bins: usize, title: &str, xlabel: &str) -> String {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let bins = bins.max(1);
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let dens: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / (finite.len().max(1) as f64 * width))
        .collect();
    let top = dens.iter().copied().fold(0.0, f64::max).max(1e-300);
    let f = Frame {
        lo: (lo, 0.0),
        hi: (hi, top * 1.05),
    };
    let mut s = open(title, &f, xlabel, "density");
    for (i, d) in dens.iter().enumerate() {
        let (x0, y0) = f.px(lo + i as f64 * width, *d);
        let (x1, y1) = f.px(lo + (i + 1) as f64 * width, 0.0);
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="steelblue"/>"#,
            (x1 - x0).max(0.0),
            (y1 - y0).max(0.0)
        );
    }
    s.push_str("</svg>\n");
    s
}
