//! Trajectory rendering: SVG with one polyline per period, and ASCII.

use std::fmt::Write;

use crate::base_space::BaseSpace;
use crate::feasibility::Grounding;
use crate::tlmdp::RolloutTrace;
use crate::{Error, Result};

const CELL: f64 = 24.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

fn grid_of(space: &BaseSpace) -> Result<(usize, usize)> {
    space
        .grid()
        .map(|g| (g.width, g.height))
        .ok_or_else(|| Error::Config("rendering needs a grid environment".into()))
}

fn centre(space: &BaseSpace, state: usize) -> (f64, f64) {
    let (x, y) = space.coords(state).expect("grid state");
    ((x as f64 + 0.5) * CELL, (y as f64 + 0.5) * CELL)
}

/// SVG image of the grid, obstacles, goal groundings and the trace.
pub fn render_svg(space: &BaseSpace, grounding: &Grounding, trace: &RolloutTrace) -> Result<String> {
    let (w, h) = grid_of(space)?;
    let mut s = String::new();
    let (pw, ph) = (w as f64 * CELL, h as f64 * CELL);
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{pw}" height="{ph}" viewBox="0 0 {pw} {ph}">"#
    )
    .unwrap();
    writeln!(s, r##"<rect width="{pw}" height="{ph}" fill="#ffffff" stroke="#000000"/>"##).unwrap();
    for o in space.obstacles() {
        let (x, y) = space.coords(o).expect("grid state");
        writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="#444444"/>"##,
            x as f64 * CELL,
            y as f64 * CELL
        )
        .unwrap();
    }
    for (g, t) in grounding.targets().iter().enumerate() {
        let (cx, cy) = centre(space, t.state);
        writeln!(
            s,
            r##"<circle cx="{cx}" cy="{cy}" r="{}" fill="none" stroke="#000000"/><text x="{cx}" y="{}" font-size="10" text-anchor="middle">{g}</text>"##,
            CELL * 0.4,
            cy + 3.5
        )
        .unwrap();
    }
    for (k, p) in trace.periods.iter().enumerate() {
        let mut points = String::new();
        let mut last = None;
        for sa in &p.path {
            if last == Some(sa.state) {
                continue;
            }
            last = Some(sa.state);
            let (cx, cy) = centre(space, sa.state);
            write!(points, "{cx},{cy} ").unwrap();
        }
        writeln!(
            s,
            r#"<polyline class="period" data-goal="{}" points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            p.goal,
            points.trim_end(),
            PALETTE[k % PALETTE.len()]
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Text map: `#` obstacle, goal index (base 36) at groundings, `*` on the
/// path, `S` at the start.
pub fn render_ascii(space: &BaseSpace, grounding: &Grounding, trace: &RolloutTrace) -> Result<String> {
    let (w, h) = grid_of(space)?;
    let mut cells = vec![vec!['.'; w]; h];
    let mut put = |state: usize, ch: char| {
        let (x, y) = space.coords(state).expect("grid state");
        cells[y][x] = ch;
    };
    for o in space.obstacles() {
        put(o, '#');
    }
    for p in &trace.periods {
        for sa in &p.path {
            put(sa.state, '*');
        }
    }
    put(trace.start.state, 'S');
    for (g, t) in grounding.targets().iter().enumerate() {
        put(t.state, std::char::from_digit((g % 36) as u32, 36).unwrap());
    }
    let mut out = String::with_capacity((w + 1) * h);
    for row in cells {
        out.extend(row);
        out.push('\n');
    }
    Ok(out)
}
