use std::fmt::Write;

use super::{bent_hyperplanes, Bbox, TpicReport};
use crate::error::{Error, Result};
use crate::net::Network;

const SIZE: f64 = 600.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// What a rendered picture contains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SvgSummary {
    /// Neurons with a non-empty zero set, one path each.
    pub curves: usize,
    /// Marked intersection witnesses.
    pub witnesses: usize,
}

/// Draws every neuron's zero set in a two-dimensional input box.
///
/// First-layer hyperplanes are solid, deeper bent hyperplanes dashed, and
/// each layer has its own color. Witnessed intersections from `tpic` are
/// marked with dots.
pub fn render_svg(net: &Network, bbox: &Bbox, tpic: Option<&TpicReport>) -> Result<(String, SvgSummary)> {
    if net.arch().input_dim() != 2 {
        return Err(Error::Unsupported("rendering needs a two-dimensional input".into()));
    }
    let bent = bent_hyperplanes(net, bbox)?;
    let sx = SIZE / (bbox.hi[0] - bbox.lo[0]);
    let sy = SIZE / (bbox.hi[1] - bbox.lo[1]);
    let px = |p: &[f64]| ((p[0] - bbox.lo[0]) * sx, (bbox.hi[1] - p[1]) * sy);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#)
        .unwrap();
    writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#).unwrap();
    let mut curves = 0;
    for h in &bent {
        if h.is_empty() {
            continue;
        }
        curves += 1;
        let l = h.neuron.layer;
        let color = PALETTE[(l - 1) % PALETTE.len()];
        let dash = if l == 1 { String::new() } else { format!(r#" stroke-dasharray="{},4""#, 2 + 4 * (l - 1)) };
        let mut d = String::new();
        for p in &h.pieces {
            let (x0, y0) = px(&p.points[0]);
            let (x1, y1) = px(&p.points[1]);
            write!(d, "M{x0:.3} {y0:.3} L{x1:.3} {y1:.3} ").unwrap();
        }
        writeln!(
            s,
            r#"<path class="neuron layer-{l}" data-neuron="{}" d="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            h.neuron,
            d.trim_end()
        )
        .unwrap();
    }
    let mut witnesses = 0;
    if let Some(t) = tpic {
        for p in t.pairs.iter().filter(|p| p.ok()) {
            let (x, y) = px(p.witness.as_ref().unwrap());
            witnesses += 1;
            writeln!(
                s,
                r#"<circle class="tpic" data-pair="{}-{}" cx="{x:.3}" cy="{y:.3}" r="3" fill="black"/>"#,
                p.lower, p.upper
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    Ok((s, SvgSummary { curves, witnesses }))
}
