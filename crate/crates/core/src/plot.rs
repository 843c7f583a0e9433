//! Minimal static SVG charts. Every plotted number is also written to CSV by
//! the caller; these files are for viewing only.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) {
    let (x0, x1, y0, y1) = (PAD, W - PAD / 2.0, H - PAD, PAD);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 14.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
    for (v, px) in [(x.0, x0), (x.1, x1)] {
        let _ = writeln!(s, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, y0 + 16.0, fmt(v));
    }
    for (v, py) in [(y.0, y0), (y.1, y1)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 4.0, py + 4.0, fmt(v));
    }
}

fn fmt(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// Bin counts over `[lo, hi]` with `bins` equal bins.
pub fn histogram_counts(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return (0.0, 1.0, vec![0; bins]);
    }
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    (lo, hi, counts)
}

pub fn histogram(values: &[f64], bins: usize, title: &str, xlabel: &str) -> String {
    let (lo, hi, counts) = histogram_counts(values, bins);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = header(title);
    axes(&mut s, xlabel, "count", (lo, hi), (0.0, max));
    let width = (W - 1.5 * PAD) / counts.len() as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = (H - 2.0 * PAD) * c as f64 / max;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab5" stroke="white"/>"##,
            PAD + i as f64 * width,
            H - PAD - h,
            width,
            h
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bars of eigenvalues with the cumulative fraction drawn as a line on a
/// 0–1 scale.
pub fn scree(eigenvalues: &[f64], cumulative: &[f64], title: &str) -> String {
    let max = eigenvalues.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut s = header(title);
    axes(&mut s, "component", "eigenvalue", (1.0, eigenvalues.len() as f64), (0.0, max));
    let n = eigenvalues.len().max(1) as f64;
    let width = (W - 1.5 * PAD) / n;
    let mut line = String::new();
    for (i, (&e, &c)) in eigenvalues.iter().zip(cumulative).enumerate() {
        let h = (H - 2.0 * PAD) * e.max(0.0) / max;
        let x = PAD + i as f64 * width;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#4a7ab5" stroke="white"/>"##,
            H - PAD - h,
            width
        );
        let _ = write!(line, "{:.2},{:.2} ", x + width / 2.0, H - PAD - (H - 2.0 * PAD) * c);
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
        line.trim_end()
    );
    s.push_str("</svg>\n");
    s
}

/// Planar landmark configurations drawn as connected polylines: `originals`
/// in grey, `reduced` in blue and `root` in red.
pub fn shape_overlay(originals: &[Vec<f64>], reduced: &[Vec<f64>], root: &[f64], title: &str) -> String {
    let all = originals.iter().chain(reduced).chain(std::iter::once(&root.to_vec())).flatten().copied().collect::<Vec<_>>();
    let xs = all.iter().step_by(2).copied();
    let ys = all.iter().skip(1).step_by(2).copied();
    let (xmin, xmax) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (ymin, ymax) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = (xmax - xmin).max(ymax - ymin).max(f64::MIN_POSITIVE);
    let scale = (H - 2.0 * PAD).min(W - 2.0 * PAD) / span;
    let (cx, cy) = ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0);
    let to_px = |x: f64, y: f64| (W / 2.0 + (x - cx) * scale, H / 2.0 - (y - cy) * scale);
    let mut s = header(title);
    let mut draw = |c: &[f64], colour: &str, width: f64| {
        let pts: Vec<String> = c
            .chunks_exact(2)
            .map(|p| {
                let (x, y) = to_px(p[0], p[1]);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="{width}" stroke-opacity="0.8"/>"#,
            pts.join(" ")
        );
    };
    for c in originals {
        draw(c, "#999999", 1.0);
    }
    for c in reduced {
        draw(c, "#2c6fbb", 1.0);
    }
    draw(root, "#c0392b", 2.5);
    s.push_str("</svg>\n");
    s
}
