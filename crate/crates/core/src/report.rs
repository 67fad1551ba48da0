//! Report files: error table, switch summary, error chart and an
//! attention/edge dump of one scene.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::{rollout, PtdModel, StepDiagnostics};
use crate::scene::Scene;

/// Per-step diagnostics of one scene, keyed by entity id.
#[derive(Clone, Debug)]
pub struct SceneTrace {
    pub scene_id: String,
    pub ids: Vec<usize>,
    pub steps: Vec<StepDiagnostics>,
}

pub fn trace_scene(model: &PtdModel, scene: &Scene) -> Result<SceneTrace> {
    let mut tape = Tape::new();
    let out = rollout(&mut tape, model, scene)?;
    Ok(SceneTrace {
        scene_id: scene.scene_id.clone(),
        ids: out.layout.ids.clone(),
        steps: out.diagnostics,
    })
}

pub fn errors_csv(report: &EvalReport, baseline: Option<&EvalReport>) -> String {
    let mut s = String::from("step,human_mm,object_mm,all_mm");
    if baseline.is_some() {
        s.push_str(",ablation_human_mm,ablation_object_mm,ablation_all_mm");
    }
    s.push('\n');
    for k in 0..report.horizon {
        let _ = write!(
            s,
            "{},{:.6},{:.6},{:.6}",
            k + 1,
            report.human_error_mm[k],
            report.object_error_mm[k],
            report.all_error_mm[k]
        );
        if let Some(b) = baseline {
            let _ = write!(
                s,
                ",{:.6},{:.6},{:.6}",
                b.human_error_mm[k], b.object_error_mm[k], b.all_error_mm[k]
            );
        }
        s.push('\n');
    }
    s
}

pub fn summary_text(report: &EvalReport, baseline: Option<&EvalReport>) -> String {
    let mut s = String::new();
    let sw = &report.switch;
    let _ = writeln!(s, "scenes = {}", report.scenes.len());
    let _ = writeln!(s, "horizon = {}", report.horizon);
    let _ = writeln!(s, "ade_mm = {:.6}", report.ade_mm);
    let _ = writeln!(s, "ade_human_mm = {:.6}", report.ade_human_mm);
    let _ = writeln!(s, "ade_object_mm = {:.6}", report.ade_object_mm);
    if let Some(b) = baseline {
        let _ = writeln!(s, "ablation_ade_mm = {:.6}", b.ade_mm);
        let ratio = if b.ade_mm > 0.0 { report.ade_mm / b.ade_mm } else { f64::NAN };
        let _ = writeln!(s, "ade_ratio = {ratio:.6}");
    }
    let _ = writeln!(s, "switch_tp = {}", sw.tp);
    let _ = writeln!(s, "switch_fp = {}", sw.fp);
    let _ = writeln!(s, "switch_fn = {}", sw.fn_);
    let _ = writeln!(s, "switch_tn = {}", sw.tn);
    let _ = writeln!(s, "switch_precision = {:.6}", sw.precision);
    let _ = writeln!(s, "switch_recall = {:.6}", sw.recall);
    let _ = writeln!(s, "switch_f1 = {:.6}", sw.f1);
    let _ = writeln!(s, "# precision and recall are 1 when there are no predicted or labeled positives");
    let _ = writeln!(s, "source_persistent = {}", report.audit.persistent);
    let _ = writeln!(s, "source_transient = {}", report.audit.transient);
    let _ = writeln!(s, "# scene_id,interaction,ade_mm,switch_f1,transient_predictions");
    for sc in &report.scenes {
        let _ = writeln!(
            s,
            "scene = {},{},{:.6},{:.6},{}",
            sc.scene_id, sc.has_interaction as u8, sc.ade_mm, sc.switch.f1, sc.transient_predictions
        );
    }
    s
}

/// Line chart of mean error against horizon step.
pub fn errors_svg(report: &EvalReport, baseline: Option<&EvalReport>) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let mut series = vec![("PTD", "#1f77b4", &report.all_error_mm)];
    if let Some(b) = baseline {
        series.push(("persistent-only", "#d62728", &b.all_error_mm));
    }
    let ymax = series
        .iter()
        .flat_map(|(_, _, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let n = report.horizon.max(1);
    let x = |k: usize| pad + (w - 2.0 * pad) * if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v / ymax;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#, b = h - pad);
    let _ = writeln!(
        s,
        r#"<text x="{cx}" y="{ty}" font-size="12" text-anchor="middle">horizon step</text>"#,
        cx = w / 2.0,
        ty = h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{cy}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {cy})">mean error (mm)</text>"#,
        cy = h / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{tx}" y="{ty}" font-size="10" text-anchor="end">{ymax:.1}</text>"#,
        tx = pad - 4.0,
        ty = pad + 4.0
    );
    for (i, (name, color, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values.iter().enumerate().map(|(k, &v)| format!("{:.2},{:.2}", x(k), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline id="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{lx}" y="{ly}" font-size="12" fill="{color}">{name}</text>"#,
            lx = w - pad - 110.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn attention_csv(trace: &SceneTrace) -> String {
    let mut s = String::from("step,channel,entity,neighbor,weight\n");
    for (t, d) in trace.steps.iter().enumerate() {
        for (i, ws) in d.persistent_attention.iter().enumerate() {
            for &(j, w) in ws {
                let _ = writeln!(s, "{t},persistent,{},{},{w:.9}", trace.ids[i], trace.ids[j]);
            }
        }
        for sess in &d.sessions {
            for &(l, w) in &sess.attention {
                let _ = writeln!(s, "{t},transient,{},{},{w:.9}", trace.ids[sess.center], trace.ids[l]);
            }
        }
    }
    s
}

pub fn edges_csv(trace: &SceneTrace) -> String {
    let mut s = String::from("step,center,leaf,inward,outward\n");
    for (t, d) in trace.steps.iter().enumerate() {
        for sess in &d.sessions {
            for (l, &id) in trace.ids.iter().enumerate() {
                if l == sess.center {
                    continue;
                }
                let inward = sess.inward.contains(&l) as u8;
                let outward = sess.outward.contains(&l) as u8;
                let _ = writeln!(s, "{t},{},{id},{inward},{outward}", trace.ids[sess.center]);
            }
        }
    }
    s
}

/// Writes `errors.csv`, `summary.txt`, `errors.svg` and, with a trace,
/// `attention.csv` and `edges.csv`. Returns the written paths.
pub fn emit_report(
    report: &EvalReport,
    baseline: Option<&EvalReport>,
    trace: Option<&SceneTrace>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        ("errors.csv", errors_csv(report, baseline)),
        ("summary.txt", summary_text(report, baseline)),
        ("errors.svg", errors_svg(report, baseline)),
    ];
    if let Some(t) = trace {
        files.push(("attention.csv", attention_csv(t)));
        files.push(("edges.csv", edges_csv(t)));
    }
    let mut written = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}
