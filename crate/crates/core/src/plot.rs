//! Per-video score charts: predicted scores as bars, ground truth behind
//! them, selected key-shots shaded, and the difference-attention trace.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetKind, VideoRecord};
use crate::error::Result;
use crate::pipeline::{evaluate_scores, EvalConfig};
use crate::trainer::Model;

/// Numeric content of one chart, indexed by sampled frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub video: String,
    pub picks: Vec<usize>,
    pub scores: Vec<f64>,
    pub gtscore: Option<Vec<f64>>,
    /// 1 where the sampled frame falls in a selected key-shot.
    pub selected: Vec<u8>,
    pub attention: Option<Vec<f64>>,
    pub fscore: Option<f64>,
}

pub fn plot_series(
    model: &Model,
    video: &VideoRecord,
    kind: DatasetKind,
    cfg: &EvalConfig,
) -> Result<PlotSeries> {
    let trace = model.scorer.trace(&video.features_f64())?;
    let (selected, fscore) = if video.user_summaries.is_some() {
        let (prf, sel) = evaluate_scores(video, &trace.p, kind, cfg)?;
        (
            video.picks.iter().map(|&f| sel.frame_mask[f]).collect(),
            Some(prf.fscore),
        )
    } else {
        let seg = crate::pipeline::video_segmentation(video, &cfg.kts)?;
        let sel = crate::summarize::summarize(
            &trace.p,
            &video.picks,
            &seg,
            video.n_frames,
            &cfg.summary,
        )?;
        (
            video.picks.iter().map(|&f| sel.frame_mask[f]).collect(),
            None,
        )
    };
    Ok(PlotSeries {
        video: video.id.clone(),
        picks: video.picks.clone(),
        scores: trace.p,
        gtscore: video.gtscore_f64(),
        selected,
        attention: trace.attention,
        fscore,
    })
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

pub fn render_svg(s: &PlotSeries, width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    let (left, top, bottom) = (40.0, 24.0, 20.0);
    let plot_h = h - top - bottom;
    let n = s.scores.len().max(1);
    let bw = (w - left - 10.0) / n as f64;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let title = match s.fscore {
        Some(f) => format!("{} (F = {f:.2}%)", s.video),
        None => s.video.clone(),
    };
    let _ = writeln!(
        out,
        r#"<text x="{left}" y="16" font-family="sans-serif" font-size="12">{title}</text>"#
    );
    for (i, &sel) in s.selected.iter().enumerate() {
        if sel == 1 {
            let x = left + i as f64 * bw;
            let _ = writeln!(
                out,
                r##"<rect x="{x:.2}" y="{top}" width="{bw:.2}" height="{plot_h:.2}" fill="#f4d58d" opacity="0.6"/>"##
            );
        }
    }
    if let Some(gt) = &s.gtscore {
        for (i, &v) in gt.iter().enumerate() {
            let x = left + i as f64 * bw;
            let _ = writeln!(
                out,
                r##"<rect x="{x:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="#bbbbbb"/>"##,
                y(v),
                top + plot_h - y(v)
            );
        }
    }
    for (i, &v) in s.scores.iter().enumerate() {
        let x = left + i as f64 * bw + bw * 0.2;
        let _ = writeln!(
            out,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#3b6ea8"/>"##,
            y(v),
            bw * 0.6,
            top + plot_h - y(v)
        );
    }
    if let Some(a) = &s.attention {
        let pts: Vec<String> = min_max(a)
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", left + (i as f64 + 0.5) * bw, y(v)))
            .collect();
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="1.5"/>"##,
            pts.join(" ")
        );
    }
    let _ = writeln!(
        out,
        r##"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"##,
        top + plot_h,
        w - 10.0,
        top + plot_h
    );
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            out,
            r#"<text x="4" y="{:.2}" font-family="sans-serif" font-size="10">{tick:.1}</text>"#,
            y(tick) + 3.0
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_bar_per_score() {
        let s = PlotSeries {
            video: "v".into(),
            picks: vec![0, 1, 2],
            scores: vec![0.1, 0.5, 0.9],
            gtscore: None,
            selected: vec![0, 1, 0],
            attention: Some(vec![1.0, 2.0, 3.0]),
            fscore: None,
        };
        let svg = render_svg(&s, 300, 100);
        assert_eq!(svg.matches("#3b6ea8").count(), 3);
        assert_eq!(svg.matches("#f4d58d").count(), 1);
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn flat_attention_normalises_to_middle() {
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.5, 0.5]);
    }
}
