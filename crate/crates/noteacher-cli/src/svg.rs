//! Minimal static SVG line charts with two y-axes: scores on the left,
//! counts on the right. No dependencies; the output is deterministic for
//! identical inputs.

/// One polyline: (x, y) points in data space plus draw styling.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub dashed: bool,
    /// "auroc" or "disagreement"; selects the y-axis and CSS class.
    pub class: &'static str,
}

const W: f64 = 880.0;
const H: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 64.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 72.0;

pub const PALETTE: [&str; 6] = [
    "#1b6ca8", "#e07b39", "#2e8b57", "#a83232", "#6a51a3", "#707070",
];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Render a dual-axis chart. Left axis spans [0, 1] (scores); the right
/// axis spans [0, max] of the count series.
pub fn dual_axis_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let plot_w = W - MARGIN_L - MARGIN_R;
    let plot_h = H - MARGIN_T - MARGIN_B;

    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let (x_min, x_max) = match (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    ) {
        (lo, hi) if lo.is_finite() && hi.is_finite() && hi > lo => (lo, hi),
        (lo, _) if lo.is_finite() => (lo - 0.5, lo + 0.5),
        _ => (0.0, 1.0),
    };
    let right_max = series
        .iter()
        .filter(|s| s.class == "disagreement")
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(1.0f64, f64::max);

    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let sy_left = |y: f64| MARGIN_T + (1.0 - y.clamp(0.0, 1.0)) * plot_h;
    let sy_right = |y: f64| MARGIN_T + (1.0 - (y / right_max).clamp(0.0, 1.0)) * plot_h;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        fmt(W / 2.0),
        escape(title)
    ));
    out.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(plot_w),
        fmt(plot_h)
    ));

    // Left axis: fixed score ticks.
    out.push_str("<g id=\"axis-left\" text-anchor=\"end\">\n");
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = sy_left(v);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\"/>\n",
            fmt(MARGIN_L - 5.0),
            fmt(y),
            fmt(MARGIN_L),
            fmt(y)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt(MARGIN_L - 9.0),
            fmt(y + 4.0),
            fmt(v)
        ));
    }
    out.push_str(&format!(
        "<text transform=\"rotate(-90 18 {mid})\" x=\"18\" y=\"{mid}\" \
         text-anchor=\"middle\">validation AUROC</text>\n",
        mid = fmt(MARGIN_T + plot_h / 2.0)
    ));
    out.push_str("</g>\n");

    // Right axis: count ticks.
    out.push_str("<g id=\"axis-right\" text-anchor=\"start\">\n");
    for i in 0..=4 {
        let v = right_max * i as f64 / 4.0;
        let y = sy_right(v);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\"/>\n",
            fmt(W - MARGIN_R),
            fmt(y),
            fmt(W - MARGIN_R + 5.0),
            fmt(y)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt(W - MARGIN_R + 9.0),
            fmt(y + 4.0),
            fmt(v)
        ));
    }
    out.push_str(&format!(
        "<text transform=\"rotate(90 {x} {mid})\" x=\"{x}\" y=\"{mid}\" \
         text-anchor=\"middle\">disagreement count</text>\n",
        x = fmt(W - 16.0),
        mid = fmt(MARGIN_T + plot_h / 2.0)
    ));
    out.push_str("</g>\n");

    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        fmt(MARGIN_L + plot_w / 2.0),
        fmt(H - 14.0),
        escape(x_label)
    ));

    // Series polylines.
    for s in series {
        if s.points.is_empty() {
            continue;
        }
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let sy = if s.class == "disagreement" {
                    sy_right(y)
                } else {
                    sy_left(y)
                };
                format!("{},{}", fmt(sx(x)), fmt(sy))
            })
            .collect();
        let dash = if s.dashed {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        out.push_str(&format!(
            "<polyline class=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"{} \
             points=\"{}\"/>\n",
            s.class,
            s.color,
            dash,
            coords.join(" ")
        ));
    }

    // Legend.
    out.push_str("<g id=\"legend\">\n");
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_T + 10.0 + 18.0 * i as f64;
        let dash = if s.dashed {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"{c}\" \
             stroke-width=\"1.8\"{dash}/>\n",
            x0 = fmt(MARGIN_L + 12.0),
            x1 = fmt(MARGIN_L + 40.0),
            y = fmt(y),
            c = s.color,
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt(MARGIN_L + 46.0),
            fmt(y + 4.0),
            escape(&s.label)
        ));
    }
    out.push_str("</g>\n");
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> String {
        let series = vec![
            Series {
                label: "run A net 1".into(),
                points: vec![(0.0, 0.5), (10.0, 0.7), (20.0, 0.8)],
                color: PALETTE[0],
                dashed: false,
                class: "auroc",
            },
            Series {
                label: "run A disagreement".into(),
                points: vec![(0.0, 12.0), (10.0, 6.0), (20.0, 3.0)],
                color: PALETTE[1],
                dashed: false,
                class: "disagreement",
            },
        ];
        dual_axis_chart("demo <chart>", "iteration", &series)
    }

    /// Stack-based well-formedness check over the emitted tags.
    fn assert_well_formed(svg: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = svg;
        while let Some(start) = rest.find('<') {
            let end = rest[start..].find('>').expect("unclosed tag") + start;
            let tag = &rest[start + 1..end];
            rest = &rest[end + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                assert_eq!(stack.pop().as_deref(), Some(name), "mismatched close");
            } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
                let name: String = tag
                    .chars()
                    .take_while(|c| c.is_ascii_alphanumeric())
                    .collect();
                stack.push(name);
            }
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn chart_is_well_formed_with_two_axes() {
        let svg = demo();
        assert_well_formed(&svg);
        assert!(svg.contains("id=\"axis-left\""));
        assert!(svg.contains("id=\"axis-right\""));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("&lt;chart&gt;"), "title must be escaped");
    }

    #[test]
    fn chart_is_deterministic() {
        assert_eq!(demo(), demo());
    }

    #[test]
    fn empty_series_are_skipped() {
        let svg = dual_axis_chart(
            "t",
            "x",
            &[Series {
                label: "empty".into(),
                points: vec![],
                color: PALETTE[0],
                dashed: true,
                class: "auroc",
            }],
        );
        assert_well_formed(&svg);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }
}
