//! Report figures as self-contained SVG.
//!
//! Three plots cover a run: per-task training-loss curves on a shared
//! continual timeline, each task's accuracy as later tasks arrive, and a
//! bar chart of consecutive-task winner overlap. The markup is emitted
//! directly — a few hundred lines of frame/polyline/rect/text — so the
//! artifacts have no library fingerprint and stay byte-deterministic.

use twta_core::evaluation::{AccuracyMatrix, OverlapRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;

/// Line/bar palette; series beyond its length cycle.
const PALETTE: [&str; 8] = [
    "#1f6feb", "#d1242f", "#2da44e", "#bf3989", "#9a6700", "#8250df", "#1b7c83", "#57606a",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{v:.0}")
    } else if v.abs() >= 100.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(f64::MIN_POSITIVE);
        MARGIN_L + (v - self.x_min) / span * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(f64::MIN_POSITIVE);
        HEIGHT - MARGIN_B - (v - self.y_min) / span * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

/// Open the document and draw the frame: background, plot box, five
/// horizontal gridlines with y tick labels, title, and axis titles.
/// X ticks are chart-specific and drawn by the callers.
fn open_chart(title: &str, x_label: &str, y_label: &str, frame: &Frame) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    ));
    for k in 0..=4 {
        let v = frame.y_min + (frame.y_max - frame.y_min) * k as f64 / 4.0;
        let y = frame.y(v);
        s.push_str(&format!(
            "  <line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#d0d7de\" stroke-width=\"1\"/>\n",
            WIDTH - MARGIN_R
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_num(v)
        ));
    }
    s.push_str(&format!(
        "  <rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"#57606a\" stroke-width=\"1\"/>\n",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0
    ));
    s.push_str(&format!(
        "  <text x=\"16\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">{y_label}</text>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0
    ));
    s
}

fn x_tick(s: &mut String, frame: &Frame, v: f64, label: &str) {
    let x = frame.x(v);
    s.push_str(&format!(
        "  <line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" \
         stroke=\"#57606a\" stroke-width=\"1\"/>\n",
        HEIGHT - MARGIN_B,
        HEIGHT - MARGIN_B + 5.0
    ));
    s.push_str(&format!(
        "  <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{label}</text>\n",
        HEIGHT - MARGIN_B + 18.0
    ));
}

fn legend(s: &mut String, entries: &[String]) {
    for (i, name) in entries.iter().enumerate() {
        let x = MARGIN_L + 10.0 + 92.0 * (i % 6) as f64;
        let y = MARGIN_T + 14.0 + 16.0 * (i / 6) as f64;
        s.push_str(&format!(
            "  <line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"{}\" stroke-width=\"2\"/>\n",
            y - 4.0,
            x + 18.0,
            y - 4.0,
            color(i)
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"11\">{name}</text>\n",
            x + 24.0
        ));
    }
}

fn polyline(s: &mut String, frame: &Frame, points: &[(f64, f64)], stroke: &str) {
    if points.is_empty() {
        return;
    }
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.1},{:.1}", frame.x(x), frame.y(y)))
        .collect();
    s.push_str(&format!(
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"2\"/>\n",
        coords.join(" ")
    ));
    if points.len() == 1 {
        // A single point would otherwise be invisible.
        s.push_str(&format!(
            "  <circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{stroke}\"/>\n",
            frame.x(points[0].0),
            frame.y(points[0].1)
        ));
    }
}

/// Training-loss curves on the continual timeline: task `t`'s epochs start
/// where task `t-1`'s ended, one colored polyline per task.
pub fn loss_curves_svg(losses_per_task: &[Vec<f64>]) -> String {
    let total_epochs: usize = losses_per_task.iter().map(|l| l.len()).sum();
    let mut y_max = 0.0f64;
    for l in losses_per_task {
        for &v in l {
            y_max = y_max.max(v);
        }
    }
    let frame = Frame {
        x_min: 1.0,
        x_max: total_epochs.max(2) as f64,
        y_min: 0.0,
        y_max: if y_max > 0.0 { y_max * 1.05 } else { 1.0 },
    };
    let mut s = open_chart("Training loss per task", "epoch (continual timeline)", "mean batch loss", &frame);
    let mut offset = 0usize;
    for (t, losses) in losses_per_task.iter().enumerate() {
        let points: Vec<(f64, f64)> = losses
            .iter()
            .enumerate()
            .map(|(e, &v)| ((offset + e + 1) as f64, v))
            .collect();
        polyline(&mut s, &frame, &points, color(t));
        if !losses.is_empty() {
            x_tick(&mut s, &frame, (offset + 1) as f64, &format!("{}", offset + 1));
        }
        offset += losses.len();
    }
    x_tick(&mut s, &frame, frame.x_max, &fmt_num(frame.x_max));
    legend(
        &mut s,
        &(0..losses_per_task.len())
            .map(|t| format!("task {t}"))
            .collect::<Vec<_>>(),
    );
    s.push_str("</svg>\n");
    s
}

/// Each task's test accuracy (percent) after every training stage at or
/// beyond it: row `k` of the matrix supplies the points at x = k.
pub fn accuracy_over_tasks_svg(matrix: &AccuracyMatrix) -> String {
    let n = matrix.n();
    let frame = Frame {
        x_min: 0.0,
        x_max: (n.max(2) - 1) as f64,
        y_min: 0.0,
        y_max: 100.0,
    };
    let mut s = open_chart(
        "Task accuracy over the continual run",
        "after training task",
        "accuracy (%)",
        &frame,
    );
    for k in 0..n {
        x_tick(&mut s, &frame, k as f64, &format!("{k}"));
    }
    for t in 0..n {
        let points: Vec<(f64, f64)> = (t..n)
            .map(|k| {
                let acc = matrix
                    .get(k, t)
                    .expect("matrix indices bounded by its size");
                (k as f64, 100.0 * acc)
            })
            .collect();
        polyline(&mut s, &frame, &points, color(t));
    }
    legend(&mut s, &(0..n).map(|t| format!("task {t}")).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Pooled winner overlap (percent) per consecutive task pair, with the
/// average drawn as a dashed rule.
pub fn overlap_bars_svg(overlaps: &[OverlapRow], average: Option<f64>) -> String {
    let n = overlaps.len().max(1);
    let frame = Frame {
        x_min: 0.0,
        x_max: n as f64,
        y_min: 0.0,
        y_max: 100.0,
    };
    let mut s = open_chart(
        "Winner overlap between consecutive tasks",
        "task pair",
        "overlap (%)",
        &frame,
    );
    let slot = (WIDTH - MARGIN_L - MARGIN_R) / n as f64;
    for (i, row) in overlaps.iter().enumerate() {
        let x = MARGIN_L + slot * i as f64 + slot * 0.2;
        let y = frame.y(row.pooled);
        let h = (HEIGHT - MARGIN_B) - y;
        s.push_str(&format!(
            "  <rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" \
             fill=\"{}\"/>\n",
            slot * 0.6,
            color(0)
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            x + slot * 0.3,
            y - 6.0,
            fmt_num(row.pooled)
        ));
        x_tick(
            &mut s,
            &frame,
            i as f64 + 0.5,
            &format!("{}-{}", row.earlier, row.later),
        );
    }
    if let Some(avg) = average {
        let y = frame.y(avg);
        s.push_str(&format!(
            "  <line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#d1242f\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>\n",
            WIDTH - MARGIN_R
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#d1242f\" \
             text-anchor=\"end\">avg {}</text>\n",
            WIDTH - MARGIN_R - 6.0,
            y - 6.0,
            fmt_num(avg)
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal well-formedness check: tags balance, attributes are quoted,
    /// exactly one root. The acceptance suite parses with a real XML
    /// parser; this guards the generator during unit runs.
    fn assert_tags_balance(svg: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut roots = 0;
        let mut rest = svg;
        while let Some(open) = rest.find('<') {
            rest = &rest[open + 1..];
            let close = rest.find('>').expect("unterminated tag");
            let tag = &rest[..close];
            rest = &rest[close + 1..];
            if tag.starts_with('?') || tag.starts_with('!') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                let top = stack.pop().unwrap_or_else(|| panic!("stray closer {name}"));
                assert_eq!(top, name, "mismatched closer");
                if stack.is_empty() {
                    roots += 1;
                }
            } else if !tag.ends_with('/') {
                let name: String = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
            }
            assert_eq!(tag.matches('"').count() % 2, 0, "unbalanced quotes in <{tag}>");
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
        assert_eq!(roots, 1, "expected exactly one root element");
    }

    #[test]
    fn loss_curves_emit_one_polyline_per_task() {
        let svg = loss_curves_svg(&[vec![2.0, 1.2, 0.7], vec![1.8, 0.9, 0.5]]);
        assert_tags_balance(&svg);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("Training loss"));
        assert!(svg.starts_with("<?xml"));
    }

    #[test]
    fn accuracy_plot_draws_shrinking_series() {
        let matrix = AccuracyMatrix::from_rows(vec![
            vec![0.95],
            vec![0.80, 0.90],
            vec![0.70, 0.85, 0.92],
        ])
        .unwrap();
        let svg = accuracy_over_tasks_svg(&matrix);
        assert_tags_balance(&svg);
        // Task 2 has a single point, rendered as polyline + circle.
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert_eq!(svg.matches("<circle").count(), 1);
    }

    #[test]
    fn overlap_bars_include_average_rule() {
        let rows = vec![
            OverlapRow {
                earlier: 0,
                later: 1,
                pooled: 37.5,
                per_layer: vec![25.0, 50.0],
            },
            OverlapRow {
                earlier: 1,
                later: 2,
                pooled: 12.5,
                per_layer: vec![12.5, 12.5],
            },
        ];
        let svg = overlap_bars_svg(&rows, Some(25.0));
        assert_tags_balance(&svg);
        assert_eq!(svg.matches("<rect").count(), 2 + 2); // background + box + bars
        assert!(svg.contains("37.50") && svg.contains("12.50"));
        assert!(svg.contains("avg 25"));
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn empty_series_still_produce_valid_documents() {
        let svg = loss_curves_svg(&[]);
        assert_tags_balance(&svg);
        let svg = overlap_bars_svg(&[], None);
        assert_tags_balance(&svg);
    }
}
