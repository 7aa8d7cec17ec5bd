//! SVG overlay of an interpretation on its signal: wave spans, retracted
//! evidence and the rhythm episodes.

use std::fmt::Write as _;

use crate::interpretation::{beat_territories, EditOp, Interpretation, Pattern};
use crate::signal_io::Record;

const PX_PER_S: f64 = 100.0;
const MIN_WIDTH: f64 = 600.0;
const HEIGHT: f64 = 260.0;
const BAND: f64 = 28.0;
const MARGIN: f64 = 10.0;

pub const P_COLOR: &str = "#2ca02c";
pub const QRS_COLOR: &str = "#1f77b4";
pub const T_COLOR: &str = "#ff7f0e";
pub const DELETED_COLOR: &str = "#9e9e9e";
pub const INSERTED_COLOR: &str = "#d62728";

fn pattern_color(p: Pattern) -> &'static str {
    match p {
        Pattern::Sinus => "#c6e5c6",
        Pattern::Afib => "#f4c2c2",
        Pattern::Tachy => "#fde3b0",
        Pattern::Brady => "#c9daf8",
        Pattern::Flutter => "#e6ccf0",
        Pattern::Bigeminy => "#fff2a8",
        Pattern::Trigeminy => "#f9e0c8",
        Pattern::VentTachy => "#f7b6d2",
        Pattern::Unexplained => "#e0e0e0",
    }
}

struct Frame {
    n: usize,
    width: f64,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn x(&self, i: usize) -> f64 {
        let span = (self.n.max(2) - 1) as f64;
        MARGIN + (self.width - 2.0 * MARGIN) * (i.min(self.n.saturating_sub(1)) as f64 / span)
    }

    fn y(&self, v: f64) -> f64 {
        let top = BAND + MARGIN;
        let bottom = HEIGHT - MARGIN;
        if self.hi > self.lo {
            bottom - (bottom - top) * (v - self.lo) / (self.hi - self.lo)
        } else {
            (top + bottom) / 2.0
        }
    }
}

/// Renders `itp` over `r`. Waves: P green, QRS blue, T orange. Deleted beats
/// are grey dashed markers, inserted beats red ones, and episode labels run
/// along the top.
pub fn render_interpretation(itp: &Interpretation, r: &Record) -> String {
    let finite = r.samples.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (0.0, 0.0) };
    let width = (r.duration_s() * PX_PER_S).max(MIN_WIDTH).round();
    let f = Frame {
        n: r.samples.len(),
        width,
        lo,
        hi,
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{HEIGHT}" viewBox="0 0 {width} {HEIGHT}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(&r.id));
    let _ = writeln!(s, r#"<rect class="background" x="0" y="0" width="{width}" height="{HEIGHT}" fill="white"/>"#);

    s.push_str("<g class=\"episodes\">\n");
    let terr = beat_territories(&itp.beats, itp.num_samples.max(r.samples.len()));
    for e in &itp.episodes {
        let (Some(a), Some(b)) = (terr.get(e.first), terr.get(e.last)) else {
            continue;
        };
        let (x0, x1) = (f.x(a.0), f.x(b.1));
        let _ = writeln!(
            s,
            r#"<rect class="episode" data-pattern="{p}" x="{x0:.1}" y="{MARGIN}" width="{w:.1}" height="{h}" fill="{c}" stroke="dimgray" stroke-width="0.5"/>"#,
            p = e.pattern,
            w = (x1 - x0).max(0.0),
            h = BAND - 4.0,
            c = pattern_color(e.pattern),
        );
        let _ = writeln!(
            s,
            r#"<text class="episode-label" x="{x:.1}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="middle">{p}</text>"#,
            x = (x0 + x1) / 2.0,
            y = MARGIN + BAND / 2.0 + 2.0,
            p = e.pattern,
        );
    }
    s.push_str("</g>\n<g class=\"waves\">\n");
    let top = BAND + MARGIN;
    let span = |s: &mut String, class: &str, on: usize, off: usize, color: &str| {
        let (x0, x1) = (f.x(on), f.x(off));
        let _ = writeln!(
            s,
            r#"<rect class="{class}" x="{x0:.1}" y="{top}" width="{w:.1}" height="{h}" fill="{color}" fill-opacity="0.25"/>"#,
            w = (x1 - x0).max(0.5),
            h = HEIGHT - MARGIN - top,
        );
    };
    for b in &itp.beats {
        if let Some(p) = b.p {
            span(&mut s, "wave-p", p.onset, p.offset, P_COLOR);
        }
        span(&mut s, "wave-qrs", b.qrs_onset, b.qrs_offset, QRS_COLOR);
        if let Some(t) = b.t {
            span(&mut s, "wave-t", t.onset, t.offset, T_COLOR);
        }
    }
    s.push_str("</g>\n");

    if !r.samples.is_empty() {
        s.push_str(r#"<polyline class="signal" fill="none" stroke="black" stroke-width="0.8" points=""#);
        for (i, v) in r.samples.iter().enumerate() {
            let v = if v.is_finite() { *v } else { lo };
            let _ = write!(s, "{:.1},{:.1} ", f.x(i), f.y(v));
        }
        s.push_str("\"/>\n");
    }

    s.push_str("<g class=\"edits\">\n");
    for e in &itp.edits {
        let (class, color) = match e.op {
            EditOp::Del => ("deleted", DELETED_COLOR),
            EditOp::Ins => ("inserted", INSERTED_COLOR),
        };
        let x = f.x(e.sample_index);
        let _ = writeln!(
            s,
            r#"<line class="{class}" data-sample="{i}" x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{y2}" stroke="{color}" stroke-width="1.5" stroke-dasharray="4 3"/>"#,
            i = e.sample_index,
            y2 = HEIGHT - MARGIN,
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if (c as u32) < 0x20 && c != '\t' && c != '\n' && c != '\r' => out.push('\u{fffd}'),
            c => out.push(c),
        }
    }
    out
}
