//! Hand-rolled SVG overlay: expert demonstration paths in light gray
//! underneath evaluated rollout paths colored by classified mode, plus
//! obstacles, nominal starts, and goals.

use mimicd::env::{EnvSpec, Vec2};

const SCALE: f64 = 40.0;
const MARGIN: f64 = 1.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22",
];
const UNCLASSIFIED: &str = "#d62728";

struct Frame {
    min: Vec2,
    max: Vec2,
}

impl Frame {
    fn grow(&mut self, p: Vec2, pad: f64) {
        self.min.x = self.min.x.min(p.x - pad);
        self.min.y = self.min.y.min(p.y - pad);
        self.max.x = self.max.x.max(p.x + pad);
        self.max.y = self.max.y.max(p.y + pad);
    }

    /// World → pixel, with the y axis flipped to SVG convention.
    fn map(&self, p: Vec2) -> (f64, f64) {
        ((p.x - self.min.x) * SCALE, (self.max.y - p.y) * SCALE)
    }

    fn size(&self) -> (f64, f64) {
        (
            (self.max.x - self.min.x) * SCALE,
            (self.max.y - self.min.y) * SCALE,
        )
    }
}

fn polyline(frame: &Frame, path: &[Vec2], stroke: &str, width: f64, dashed: bool) -> String {
    let points: Vec<String> = path
        .iter()
        .map(|&p| {
            let (x, y) = frame.map(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let dash = if dashed {
        " stroke-dasharray=\"6 4\""
    } else {
        ""
    };
    format!(
        "<polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\" \
         stroke-opacity=\"0.75\"{dash} points=\"{}\"/>\n",
        points.join(" ")
    )
}

/// `expert` is one path set per demonstration; `episodes` pairs each
/// rollout's per-agent paths with its classified mode label (None =
/// unclassified).
pub fn overlay_svg(
    spec: &EnvSpec,
    expert: &[Vec<Vec<Vec2>>],
    episodes: &[(Vec<Vec<Vec2>>, Option<usize>)],
) -> String {
    let mut frame = Frame {
        min: Vec2::new(f64::INFINITY, f64::INFINITY),
        max: Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
    };
    for demo in expert {
        for path in demo {
            for &p in path {
                frame.grow(p, MARGIN);
            }
        }
    }
    for (paths, _) in episodes {
        for path in paths {
            for &p in path {
                frame.grow(p, MARGIN);
            }
        }
    }
    for o in &spec.obstacles {
        frame.grow(o.center, o.radius + MARGIN);
    }
    for &g in &spec.nominal_goals {
        frame.grow(g, MARGIN);
    }
    if !frame.min.is_finite() || !frame.max.is_finite() {
        frame = Frame {
            min: Vec2::new(-1.0, -1.0),
            max: Vec2::new(1.0, 1.0),
        };
    }

    let (w, h) = frame.size();
    let mut out = String::with_capacity(1 << 16);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.2} {h:.2}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    ));

    for o in &spec.obstacles {
        let (cx, cy) = frame.map(o.center);
        out.push_str(&format!(
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{:.2}\" fill=\"#e0e0e0\" \
             stroke=\"#9e9e9e\"/>\n",
            o.radius * SCALE
        ));
    }

    for demo in expert {
        for path in demo {
            out.push_str(&polyline(&frame, path, "#c8c8c8", 1.0, false));
        }
    }
    for (paths, label) in episodes {
        let (color, dashed) = match label {
            Some(m) => (PALETTE[m % PALETTE.len()], false),
            None => (UNCLASSIFIED, true),
        };
        for path in paths {
            out.push_str(&polyline(&frame, path, color, 1.5, dashed));
        }
    }

    for (&s, &g) in spec.nominal_starts.iter().zip(&spec.nominal_goals) {
        let (sx, sy) = frame.map(s);
        let (gx, gy) = frame.map(g);
        out.push_str(&format!(
            "<circle cx=\"{sx:.2}\" cy=\"{sy:.2}\" r=\"4\" fill=\"black\"/>\n\
             <circle cx=\"{gx:.2}\" cy=\"{gy:.2}\" r=\"6\" fill=\"none\" stroke=\"black\" \
             stroke-width=\"1.5\"/>\n"
        ));
    }

    out.push_str("</svg>\n");
    out
}
