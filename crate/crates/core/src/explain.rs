//! Case-based explanations: which prototypes a window resembles, where each
//! prototype came from, and how many points each one adds to a class logit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EEGSample, Split};
use crate::error::{Error, Result};
use crate::eval::{binarize, POSITIVE_VOTES};
use crate::model::{argmax, points_contributed, ProtoEEGNet};

pub const DEFAULT_TOP_K: usize = 3;
/// Largest tolerated gap between a logit and the sum of its points.
pub const COMPLETENESS_TOL: f64 = 1e-12;

/// One prototype's similarity to the explained window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMatch {
    pub prototype: usize,
    pub class: usize,
    pub slot: usize,
    pub similarity: f64,
    pub source_sample_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRow {
    pub prototype: usize,
    /// Class the prototype belongs to.
    pub class: usize,
    pub slot: usize,
    pub similarity: f64,
    /// Head weight connecting the prototype to the explained class.
    pub class_connection: f64,
    /// `similarity * class_connection`
    pub points: f64,
    pub source_sample_id: u64,
}

/// Evidence for one class logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEvidence {
    pub class: usize,
    pub logit: f64,
    /// Sum of the points of every prototype, not just the listed rows.
    pub total_points: f64,
    /// `logit - total_points`
    pub residual: f64,
    /// Largest contributions by magnitude.
    pub rows: Vec<EvidenceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: u64,
    pub votes: u8,
    pub predicted_class: usize,
    pub probabilities: Vec<f64>,
    pub p_spike: f64,
    pub p_non_spike: f64,
    pub top_k: usize,
    /// Predicted class first, then the strongest class of the other polarity.
    pub classes: Vec<ClassEvidence>,
    /// Every prototype in bank order.
    pub matches: Vec<PrototypeMatch>,
}

impl Explanation {
    pub fn max_abs_residual(&self) -> f64 {
        self.classes.iter().map(|c| c.residual.abs()).fold(0.0, f64::max)
    }

    pub fn evidence(&self, class: usize) -> Option<&ClassEvidence> {
        self.classes.iter().find(|c| c.class == class)
    }
}

fn is_spike_class(class: usize) -> bool {
    class >= POSITIVE_VOTES as usize
}

/// Source sample of every prototype, or a provenance error if any prototype
/// was never pushed.
pub fn push_sources(model: &ProtoEEGNet) -> Result<Vec<u64>> {
    model
        .prototypes()
        .provenance()
        .iter()
        .enumerate()
        .map(|(j, p)| {
            p.map(|p| p.sample_id).ok_or_else(|| {
                Error::Provenance(format!(
                    "prototype {j} has never been pushed onto a training window; run a push first"
                ))
            })
        })
        .collect()
}

/// Explains the predicted class and the strongest opposite-polarity class.
pub fn explain(model: &ProtoEEGNet, sample: &EEGSample, top_k: usize) -> Result<Explanation> {
    explain_classes(model, sample, top_k, &[])
}

/// Like [`explain`], with evidence for `extra` classes appended.
pub fn explain_classes(model: &ProtoEEGNet, sample: &EEGSample, top_k: usize, extra: &[usize]) -> Result<Explanation> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let layout = model.layout();
    if let Some(&k) = extra.iter().find(|&&k| k >= layout.num_classes) {
        return Err(Error::Index(format!("class {k} out of range")));
    }
    let sources = push_sources(model)?;
    let pred = model.predict(&sample.input())?;
    let points = points_contributed(&pred.sims, model.head());
    let predicted = pred.predicted_class();
    let (p_spike, p_non_spike) = binarize(&pred.probs)?;

    let opposite: Vec<usize> = (0..layout.num_classes)
        .filter(|&k| is_spike_class(k) != is_spike_class(predicted))
        .collect();
    let mut wanted = vec![predicted];
    if !opposite.is_empty() {
        let logits: Vec<f64> = opposite.iter().map(|&k| pred.logits[k]).collect();
        wanted.push(opposite[argmax(&logits)]);
    }
    for &k in extra {
        if !wanted.contains(&k) {
            wanted.push(k);
        }
    }

    let top = top_k.min(layout.num_prototypes());
    let classes = wanted
        .into_iter()
        .map(|k| {
            let mut rows: Vec<EvidenceRow> = (0..layout.num_prototypes())
                .map(|j| EvidenceRow {
                    prototype: j,
                    class: layout.class_of(j),
                    slot: j - layout.prototypes_of(layout.class_of(j)).start,
                    similarity: pred.sims[j],
                    class_connection: model.head().get(k, j),
                    points: points[k][j],
                    source_sample_id: sources[j],
                })
                .collect();
            let total_points: f64 = points[k].iter().sum();
            rows.sort_by(|a, b| b.points.abs().total_cmp(&a.points.abs()).then(a.prototype.cmp(&b.prototype)));
            rows.truncate(top);
            ClassEvidence {
                class: k,
                logit: pred.logits[k],
                total_points,
                residual: pred.logits[k] - total_points,
                rows,
            }
        })
        .collect();

    let matches = (0..layout.num_prototypes())
        .map(|j| {
            let class = layout.class_of(j);
            PrototypeMatch {
                prototype: j,
                class,
                slot: j - layout.prototypes_of(class).start,
                similarity: pred.sims[j],
                source_sample_id: sources[j],
            }
        })
        .collect();

    let explanation = Explanation {
        sample_id: sample.sample_id,
        votes: sample.votes,
        predicted_class: predicted,
        probabilities: pred.probs,
        p_spike,
        p_non_spike,
        top_k: top,
        classes,
        matches,
    };
    let residual = explanation.max_abs_residual();
    if !(residual <= COMPLETENESS_TOL) {
        return Err(Error::Numeric(format!(
            "points do not add up to the logits (residual {residual:e})"
        )));
    }
    Ok(explanation)
}

/// Paths written by [`render_report`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub svg: PathBuf,
    pub text: PathBuf,
}

fn lookup<'a>(dataset: &'a Dataset, id: u64) -> Result<&'a EEGSample> {
    dataset
        .find(id)
        .ok_or_else(|| Error::Reference(format!("sample {id} is not in the dataset")))
}

/// Plain-text table with the same numbers as the graphic.
pub fn report_text(e: &Explanation) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "sample {} ({} votes)", e.sample_id, e.votes);
    let _ = writeln!(out, "predicted class {}", e.predicted_class);
    let _ = writeln!(out, "p_spike {}", e.p_spike);
    let _ = writeln!(out, "p_non_spike {}", e.p_non_spike);
    let probs: Vec<String> = e.probabilities.iter().map(|p| p.to_string()).collect();
    let _ = writeln!(out, "probabilities {}", probs.join(" "));
    for c in &e.classes {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "class {} logit {} total_points {} residual {}",
            c.class, c.logit, c.total_points, c.residual
        );
        let _ = writeln!(out, "prototype\tclass\tslot\tsimilarity\tclass_connection\tpoints\tsource");
        for r in &c.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.prototype, r.class, r.slot, r.similarity, r.class_connection, r.points, r.source_sample_id
            );
        }
    }
    out
}

const PANEL_W: f64 = 320.0;
const TRACE_GAP: f64 = 8.0;
const MARGIN: f64 = 16.0;
const TEXT_W: f64 = 330.0;
const LINE_H: f64 = 16.0;

/// Stacked channel traces of one window as SVG polylines.
fn traces(out: &mut String, sample: &EEGSample, channels: usize, steps: usize, x0: f64, y0: f64) {
    let peak = sample.values.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    let gain = if peak > 0.0 { 0.9 * TRACE_GAP / peak } else { 0.0 };
    let dx = PANEL_W / (steps.max(2) - 1) as f64;
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.2}" y="{y0:.2}" width="{PANEL_W:.2}" height="{:.2}" fill="none" stroke="#999"/>"##,
        channels as f64 * TRACE_GAP + TRACE_GAP
    );
    for c in 0..channels {
        let base = y0 + TRACE_GAP * (c as f64 + 1.0);
        let mut pts = String::new();
        for t in 0..steps {
            let v = sample.values[t * channels + c] as f64;
            let _ = write!(pts, "{:.2},{:.2} ", x0 + t as f64 * dx, base - v * gain);
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="black" stroke-width="0.5" points="{}"/>"#,
            pts.trim_end()
        );
    }
}

fn text(out: &mut String, x: f64, y: f64, s: &str) {
    let _ = writeln!(out, r#"<text x="{x:.2}" y="{y:.2}" font-family="monospace" font-size="11">{s}</text>"#);
}

/// SVG juxtaposing the window with each listed prototype's source window.
pub fn report_svg(e: &Explanation, dataset: &Dataset) -> Result<String> {
    let m = &dataset.manifest;
    let (channels, steps) = (m.channel_count, m.time_steps);
    let query = lookup(dataset, e.sample_id)?;
    let panel_h = channels as f64 * TRACE_GAP + TRACE_GAP;
    let row_h = panel_h.max(6.0 * LINE_H) + MARGIN;
    let header_h = 4.0 * LINE_H + MARGIN;
    let n_rows: usize = e.classes.iter().map(|c| c.rows.len()).sum();
    let width = 2.0 * PANEL_W + TEXT_W + 4.0 * MARGIN;
    let height = header_h + e.classes.len() as f64 * 2.0 * LINE_H + n_rows as f64 * row_h + MARGIN;

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut y = MARGIN + LINE_H;
    text(&mut out, MARGIN, y, &format!("sample {} ({} votes)", e.sample_id, e.votes));
    y += LINE_H;
    text(&mut out, MARGIN, y, &format!("predicted class {}", e.predicted_class));
    y += LINE_H;
    text(&mut out, MARGIN, y, &format!("p_spike {} p_non_spike {}", e.p_spike, e.p_non_spike));
    y += LINE_H + MARGIN;

    for c in &e.classes {
        y += LINE_H;
        text(
            &mut out,
            MARGIN,
            y,
            &format!("class {} logit {} total_points {}", c.class, c.logit, c.total_points),
        );
        y += LINE_H;
        for r in &c.rows {
            let source = lookup(dataset, r.source_sample_id)?;
            traces(&mut out, query, channels, steps, MARGIN, y);
            traces(&mut out, source, channels, steps, 2.0 * MARGIN + PANEL_W, y);
            let tx = 3.0 * MARGIN + 2.0 * PANEL_W;
            let lines = [
                format!("prototype {} (class {}, slot {})", r.prototype, r.class, r.slot),
                format!("source sample {}", r.source_sample_id),
                format!("similarity {}", r.similarity),
                format!("class connection {}", r.class_connection),
                format!("points {}", r.points),
            ];
            for (i, line) in lines.iter().enumerate() {
                text(&mut out, tx, y + (i as f64 + 1.0) * LINE_H, line);
            }
            y += row_h;
        }
    }
    let _ = writeln!(out, "</svg>");
    Ok(out)
}

/// Writes `explain_<sample_id>.{json,svg,txt}` into `dir`.
pub fn render_report(e: &Explanation, dataset: &Dataset, dir: &Path) -> Result<ReportFiles> {
    let svg = report_svg(e, dataset)?;
    std::fs::create_dir_all(dir)?;
    let stem = format!("explain_{}", e.sample_id);
    let files = ReportFiles {
        json: dir.join(format!("{stem}.json")),
        svg: dir.join(format!("{stem}.svg")),
        text: dir.join(format!("{stem}.txt")),
    };
    std::fs::write(&files.json, serde_json::to_string_pretty(e)? + "\n")?;
    std::fs::write(&files.svg, svg)?;
    std::fs::write(&files.text, report_text(e))?;
    Ok(files)
}

/// Quality of one prototype over the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSummary {
    pub prototype: usize,
    pub class: usize,
    pub slot: usize,
    pub source_sample_id: u64,
    pub source_split: Split,
    pub on_class_mean: f64,
    pub on_class_max: f64,
    /// `None` when every training window belongs to the prototype's class.
    pub off_class_max: Option<f64>,
    /// Some other class resembles the prototype more than its own does.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalReport {
    pub rows: Vec<PrototypeSummary>,
    pub flagged: Vec<usize>,
}

impl GlobalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("prototype\tclass\tslot\tsource\ton_class_mean\ton_class_max\toff_class_max\tflagged\n");
        for r in &self.rows {
            let off = r.off_class_max.map_or_else(|| "-".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.prototype, r.class, r.slot, r.source_sample_id, r.on_class_mean, r.on_class_max, off, r.flagged
            );
        }
        out
    }
}

/// Similarity statistics of every prototype over the training windows.
pub fn global_prototype_report(model: &ProtoEEGNet, dataset: &Dataset, batch_size: usize) -> Result<GlobalReport> {
    let sources = push_sources(model)?;
    let layout = model.layout();
    let train = dataset.split(Split::Train);
    let latents = crate::training::compute_latents(model, &train, batch_size)?;
    let mut rows = Vec::with_capacity(layout.num_prototypes());
    for (j, &source) in sources.iter().enumerate() {
        let class = layout.class_of(j);
        let source_split = dataset
            .manifest
            .split_of(source)
            .ok_or_else(|| Error::Reference(format!("source sample {source} of prototype {j} is not in the dataset")))?;
        let proto = model.prototypes().vector(j);
        let (mut sum, mut n) = (0.0, 0usize);
        let mut on_max = f64::NEG_INFINITY;
        let mut off_max: Option<f64> = None;
        for (s, z) in train.iter().zip(&latents) {
            let sim = crate::diffcore::dot(z, proto);
            if s.class() == class {
                sum += sim;
                n += 1;
                on_max = on_max.max(sim);
            } else {
                off_max = Some(off_max.map_or(sim, |m| m.max(sim)));
            }
        }
        if n == 0 {
            return Err(Error::Degenerate(format!("class {class} has no training windows")));
        }
        rows.push(PrototypeSummary {
            prototype: j,
            class,
            slot: j - layout.prototypes_of(class).start,
            source_sample_id: source,
            source_split,
            on_class_mean: sum / n as f64,
            on_class_max: on_max,
            off_class_max: off_max,
            flagged: off_max.is_some_and(|m| m > on_max),
        });
    }
    let flagged = rows.iter().filter(|r| r.flagged).map(|r| r.prototype).collect();
    Ok(GlobalReport { rows, flagged })
}

#[cfg(test)]
mod tests;
