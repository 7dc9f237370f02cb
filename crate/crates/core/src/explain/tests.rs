use super::*;
use crate::dataset::DatasetManifest;
use crate::model::HeadWeights;
use crate::test_support::{toy_dataset, toy_model_config};
use crate::training::push_prototypes;

const CLASSES: usize = 9;
const PER_CLASS: usize = 2;

/// Pushed toy model with an irregular head, plus its dataset.
fn pushed() -> (ProtoEEGNet, Dataset) {
    let data = toy_dataset(90, CLASSES, 5, 0);
    let mut model = ProtoEEGNet::new(toy_model_config(CLASSES, PER_CLASS), 8).unwrap();
    let train = data.split(Split::Train);
    push_prototypes(&mut model, &train, 16, 1).unwrap();
    let layout = model.layout();
    let w: Vec<f64> = (0..layout.num_classes * layout.num_prototypes())
        .map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0)
        .collect();
    model.set_head(HeadWeights::from_matrix(layout, w).unwrap()).unwrap();
    (model, data)
}

#[test]
fn unpushed_model_is_rejected() {
    let data = toy_dataset(9, CLASSES, 5, 0);
    let model = ProtoEEGNet::new(toy_model_config(CLASSES, PER_CLASS), 8).unwrap();
    assert!(matches!(explain(&model, &data.samples[0], 3), Err(Error::Provenance(_))));
    assert!(matches!(global_prototype_report(&model, &data, 8), Err(Error::Provenance(_))));
}

#[test]
fn rows_account_for_every_logit() {
    let (model, data) = pushed();
    for s in &data.samples {
        let e = explain(&model, s, 3).unwrap();
        let pred = model.predict(&s.input()).unwrap();
        assert_eq!(e.predicted_class, pred.predicted_class());
        assert_eq!(e.classes[0].class, e.predicted_class);
        let other = &e.classes[1];
        assert_ne!(other.class >= 4, e.predicted_class >= 4);
        for k in (0..CLASSES).filter(|&k| (k >= 4) == (other.class >= 4)) {
            assert!(pred.logits[k] <= other.logit);
        }
        for c in &e.classes {
            let brute: f64 = (0..model.layout().num_prototypes())
                .map(|j| pred.sims[j] * model.head().get(c.class, j))
                .sum();
            assert!((brute - c.logit).abs() <= 1e-12);
            assert!(c.residual.abs() <= 1e-12);
            assert_eq!(c.rows.len(), 3);
            for r in &c.rows {
                assert_eq!(r.points, r.similarity * r.class_connection);
                assert_eq!(r.similarity, pred.sims[r.prototype]);
            }
            for pair in c.rows.windows(2) {
                assert!(pair[0].points.abs() >= pair[1].points.abs());
            }
            let all = points_contributed(&pred.sims, model.head());
            let top = c.rows[0].points.abs();
            assert!(all[c.class].iter().all(|p| p.abs() <= top));
        }
        assert_eq!(e.matches.len(), CLASSES * PER_CLASS);
    }
}

#[test]
fn sources_are_training_windows_of_the_prototype_class() {
    let (model, data) = pushed();
    let e = explain(&model, &data.samples[3], 5).unwrap();
    for m in &e.matches {
        let src = data.find(m.source_sample_id).unwrap();
        assert_eq!(src.class(), m.class);
        assert_eq!(data.manifest.split_of(m.source_sample_id), Some(Split::Train));
    }
}

#[test]
fn push_source_explains_itself() {
    let (model, data) = pushed();
    for (j, p) in model.prototypes().provenance().iter().enumerate() {
        let src = data.find(p.unwrap().sample_id).unwrap();
        let e = explain(&model, src, 1).unwrap();
        assert!((e.matches[j].similarity - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn extra_classes_and_bad_arguments() {
    let (model, data) = pushed();
    let s = &data.samples[0];
    let e = explain_classes(&model, s, 2, &[0, 8, 0]).unwrap();
    let listed: Vec<usize> = e.classes.iter().map(|c| c.class).collect();
    assert_eq!(listed[0], e.predicted_class);
    assert!(listed.contains(&0) && listed.contains(&8));
    assert_eq!(listed.len(), listed.iter().collect::<std::collections::BTreeSet<_>>().len());
    assert!(matches!(explain(&model, s, 0), Err(Error::Config(_))));
    assert!(matches!(explain_classes(&model, s, 1, &[9]), Err(Error::Index(_))));
    let e = explain(&model, s, 1000).unwrap();
    assert_eq!(e.classes[0].rows.len(), CLASSES * PER_CLASS);
}

fn parse_row(line: &str) -> Vec<f64> {
    line.split('\t').map(|v| v.parse().unwrap()).collect()
}

#[test]
fn report_files_agree_with_the_explanation() {
    let (model, data) = pushed();
    let e = explain(&model, &data.samples[11], 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = render_report(&e, &data, dir.path()).unwrap();
    assert_eq!(files.svg.file_name().unwrap(), "explain_11.svg");

    let svg = std::fs::read_to_string(&files.svg).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    for r in &e.classes[0].rows {
        assert!(svg.contains(&format!("points {}", r.points)));
        assert!(svg.contains(&format!("similarity {}", r.similarity)));
    }

    let json: Explanation = serde_json::from_str(&std::fs::read_to_string(&files.json).unwrap()).unwrap();
    assert_eq!(json, e);

    let text = std::fs::read_to_string(&files.text).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| l.split('\t').count() == 7 && !l.starts_with("prototype"))
        .map(parse_row)
        .collect();
    let expected: Vec<&EvidenceRow> = e.classes.iter().flat_map(|c| &c.rows).collect();
    assert_eq!(rows.len(), expected.len());
    for (got, r) in rows.iter().zip(expected) {
        assert_eq!(got[0], r.prototype as f64);
        assert_eq!(got[3], r.similarity);
        assert_eq!(got[4], r.class_connection);
        assert_eq!(got[5], r.points);
        assert_eq!(got[6], r.source_sample_id as f64);
    }

    let again = tempfile::tempdir().unwrap();
    let files2 = render_report(&explain(&model, &data.samples[11], 3).unwrap(), &data, again.path()).unwrap();
    for (a, b) in [(&files.json, &files2.json), (&files.svg, &files2.svg), (&files.text, &files2.text)] {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}

#[test]
fn missing_source_is_a_reference_error() {
    let (model, data) = pushed();
    let e = explain(&model, &data.samples[0], 3).unwrap();
    let gone = e.classes[0].rows[0].source_sample_id;
    let samples: Vec<EEGSample> = data.samples.iter().filter(|s| s.sample_id != gone).cloned().collect();
    let splits = data.manifest.splits.iter().filter(|(id, _)| **id != gone).map(|(a, b)| (*a, *b)).collect();
    let pruned = Dataset {
        manifest: DatasetManifest {
            sample_count: samples.len(),
            splits,
            ..data.manifest.clone()
        },
        samples,
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(render_report(&e, &pruned, dir.path()), Err(Error::Reference(_))));
    assert!(matches!(global_prototype_report(&model, &pruned, 8), Err(Error::Reference(_))));
}

#[test]
fn global_report_after_push() {
    let (model, data) = pushed();
    let report = global_prototype_report(&model, &data, 7).unwrap();
    assert_eq!(report.rows.len(), CLASSES * PER_CLASS);
    for r in &report.rows {
        assert!(r.on_class_max >= 1.0 - 1e-9, "{r:?}");
        assert!(r.on_class_mean <= r.on_class_max);
        assert_eq!(r.source_split, Split::Train);
        assert_eq!(data.find(r.source_sample_id).unwrap().class(), r.class);
    }
    assert!(report.flagged.is_empty(), "{:?}", report.flagged);
    assert_eq!(report.to_text().lines().count(), 1 + CLASSES * PER_CLASS);
}

#[test]
fn global_report_flags_borrowed_prototypes() {
    let (mut model, data) = pushed();
    // give prototype 0 (class 0) the latent of a class-5 window
    let stranger = data.samples.iter().find(|s| s.class() == 5).unwrap();
    let z = model.embed(&stranger.input()).unwrap();
    model.prototypes_mut().set_vector(0, &z);
    let report = global_prototype_report(&model, &data, 8).unwrap();
    assert!(report.flagged.contains(&0));
    assert!(report.rows[0].flagged);
}
