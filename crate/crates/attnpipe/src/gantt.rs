//! SVG timing diagrams from pipeline traces.
//!
//! One horizontal lane per stage replica, one rectangle per busy interval,
//! colored by task and labeled with task and layer when the rectangle is
//! wide enough. Output is a pure function of the trace, so diagrams diff
//! cleanly in golden-file tests.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::PipelineTrace;

const LANE_HEIGHT: f64 = 26.0;
const BAR_HEIGHT: f64 = 18.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_RIGHT: f64 = 12.0;
const MARGIN_BOTTOM: f64 = 26.0;
const PLOT_WIDTH: f64 = 1040.0;
const MIN_LABEL_WIDTH: f64 = 46.0;

const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac",
];

/// Render a trace as an SVG timing diagram.
pub fn render_svg(trace: &PipelineTrace) -> Result<String> {
    if trace.events.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let lanes: Vec<(usize, usize)> = (0..trace.stage_count)
        .flat_map(|stage| {
            (0..trace.replication[stage] as usize).map(move |replica| (stage, replica))
        })
        .collect();
    let lane_index = |stage: usize, replica: usize| -> usize {
        lanes
            .iter()
            .position(|&(s, r)| (s, r) == (stage, replica))
            .expect("event replica within replication")
    };

    let makespan = trace.makespan_cycles.max(1) as f64;
    let x_of = |cycle: u64| MARGIN_LEFT + cycle as f64 / makespan * PLOT_WIDTH;
    let width = MARGIN_LEFT + PLOT_WIDTH + MARGIN_RIGHT;
    let height = MARGIN_TOP + lanes.len() as f64 * LANE_HEIGHT + MARGIN_BOTTOM;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN_LEFT:.0}" y="20" font-family="monospace" font-size="13">pipeline trace: {} tasks, {} layers, {} stages, makespan {} cycles</text>"#,
        trace.tasks.len(),
        trace.layers,
        trace.stage_count,
        trace.makespan_cycles
    );

    for (idx, &(stage, replica)) in lanes.iter().enumerate() {
        let y = MARGIN_TOP + idx as f64 * LANE_HEIGHT;
        let label = if trace.replication[stage] > 1 {
            format!("S{stage}.{replica}")
        } else {
            format!("S{stage}")
        };
        let _ = writeln!(
            svg,
            r#"<text x="6" y="{:.1}" font-family="monospace" font-size="12">{label}</text>"#,
            y + BAR_HEIGHT - 4.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_LEFT:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            y + LANE_HEIGHT - 3.0,
            MARGIN_LEFT + PLOT_WIDTH,
            y + LANE_HEIGHT - 3.0
        );
    }

    // time axis: five evenly spaced tick labels
    for tick in 0..=4u64 {
        let cycle = trace.makespan_cycles * tick / 4;
        let x = x_of(cycle);
        let y = MARGIN_TOP + lanes.len() as f64 * LANE_HEIGHT;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" font-family="monospace" font-size="11" text-anchor="middle">{cycle}</text>"#,
            y + 16.0
        );
    }

    for e in &trace.events {
        let lane = lane_index(e.stage, e.replica);
        let y = MARGIN_TOP + lane as f64 * LANE_HEIGHT;
        let x = x_of(e.start);
        let w = (x_of(e.end) - x).max(0.5);
        let color = PALETTE[e.task % PALETTE.len()];
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.2}" y="{y:.1}" width="{w:.2}" height="{BAR_HEIGHT:.0}" fill="{color}" stroke="#333333" stroke-width="0.4"><title>task {} layer {} stage {} [{}, {})</title></rect>"##,
            e.task, e.layer, e.stage, e.start, e.end
        );
        if w >= MIN_LABEL_WIDTH {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.1}" font-family="monospace" font-size="10" fill="white">t{}l{}</text>"#,
                x + 3.0,
                y + BAR_HEIGHT - 5.0,
                e.task,
                e.layer
            );
        }
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Render and write a timing diagram; nothing is written for an empty trace.
pub fn emit_gantt(trace: &PipelineTrace, path: &Path) -> Result<()> {
    let svg = render_svg(trace)?;
    crate::workload::write_atomic(path, svg.as_bytes())
}
