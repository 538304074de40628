//! Static SVG of one logged timestep: agents, their planar tubes, the ego
//! plan and the goal.

use std::fmt::Write as _;

use anyhow::{anyhow, Result};
use reachcal::harness::EpisodeLog;
use reachcal::reachability::SpatialSet;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 5.0;

/// Ramp from saturated red (first step) to pale yellow (last step).
pub fn step_color(k: usize, horizon: usize) -> String {
    let f = if horizon > 1 {
        (k - 1) as f64 / (horizon - 1) as f64
    } else {
        0.0
    };
    let lerp = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(215.0, 255.0),
        lerp(25.0, 237.0),
        lerp(28.0, 160.0)
    )
}

struct View {
    min: [f64; 2],
    scale: f64,
    height: f64,
}

impl View {
    fn fit(points: &[[f64; 2]]) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let min = [lo[0] - MARGIN, lo[1] - MARGIN];
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]) + 2.0 * MARGIN;
        let scale = SIZE / span;
        Self {
            min,
            scale,
            height: (hi[1] - lo[1] + 2.0 * MARGIN) * scale,
        }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (
            (p[0] - self.min[0]) * self.scale,
            self.height - (p[1] - self.min[1]) * self.scale,
        )
    }
}

fn cells(set: &SpatialSet) -> impl Iterator<Item = [f64; 2]> + '_ {
    set.occupied()
}

/// Renders timestep `t` of `log`.
pub fn render_scene(log: &EpisodeLog, t: usize) -> Result<String> {
    let step = log.step(t).ok_or_else(|| anyhow!("timestep {t} is not in the log"))?;
    let mut points = vec![step.ego.xy(), log.goal];
    points.extend(step.agents.iter().map(|a| a.state.xy()));
    if let Some(p) = &step.plan {
        points.extend(p.trajectory.states.iter().map(|s| s.xy()));
    }
    for a in &step.agents {
        for s in &a.sets {
            points.extend(cells(s));
        }
    }
    let view = View::fit(&points);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.2} {:.2}">"#,
        SIZE, view.height, SIZE, view.height
    )?;
    writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##)?;

    // later steps first so earlier (smaller) sets end up on top
    let h = log.horizon;
    for k in (1..=h).rev() {
        let color = step_color(k, h);
        writeln!(svg, r#"<g class="step-{k}" fill="{color}" fill-opacity="0.55">"#)?;
        for a in &step.agents {
            let Some(set) = a.sets.get(k - 1) else { continue };
            let (w, hh) = (set.x.spacing() * view.scale, set.y.spacing() * view.scale);
            for c in cells(set) {
                let (x, y) = view.px(c);
                writeln!(
                    svg,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
                    x - w / 2.0,
                    y - hh / 2.0,
                    w,
                    hh
                )?;
            }
        }
        writeln!(svg, "</g>")?;
    }

    if let Some(p) = &step.plan {
        let pts: Vec<String> = p
            .trajectory
            .states
            .iter()
            .map(|s| {
                let (x, y) = view.px(s.xy());
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            svg,
            r##"<polyline class="plan" points="{}" fill="none" stroke="#2b83ba" stroke-width="2"/>"##,
            pts.join(" ")
        )?;
    }
    for a in &step.agents {
        let (x, y) = view.px(a.state.xy());
        writeln!(
            svg,
            r##"<circle class="agent" cx="{x:.2}" cy="{y:.2}" r="5" fill="#404040"/>"##
        )?;
    }
    let (x, y) = view.px(step.ego.xy());
    writeln!(
        svg,
        r##"<circle class="ego" cx="{x:.2}" cy="{y:.2}" r="6" fill="#2b83ba"/>"##
    )?;
    let (gx, gy) = view.px(log.goal);
    writeln!(
        svg,
        r##"<path class="goal" d="M {:.2} {:.2} L {:.2} {:.2} M {:.2} {:.2} L {:.2} {:.2}" stroke="#1a9641" stroke-width="3"/>"##,
        gx - 6.0,
        gy - 6.0,
        gx + 6.0,
        gy + 6.0,
        gx - 6.0,
        gy + 6.0,
        gx + 6.0,
        gy - 6.0
    )?;
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(step_color(1, 6), "#d7191c");
        assert_eq!(step_color(6, 6), "#ffeda0");
        assert_eq!(step_color(1, 1), "#d7191c");
    }
}
