use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use proptest::prelude::*;
use sonotag::data::{
    aggregate_annotators, header, parse_annotations, parse_annotations_str, relabel, synth_dataset, target_row_values,
    tone_frequency, write_annotations, AnnotationRow, DatasetIndex, RelabelMode, Split, SynthOptions,
};
use sonotag::dsp::{load_wav, logmel};
use sonotag::nn::MetadataRecord;
use sonotag::taxonomy::{LabelVector, System, Taxonomy};

fn row(tax: &Taxonomy, id: &str) -> AnnotationRow {
    AnnotationRow {
        clip_id: id.into(),
        split: Split::Train,
        verified: false,
        meta: MetadataRecord {
            week: 5,
            day: 1,
            hour: 13,
            latitude: 40.71,
            longitude: -73.99,
        },
        coarse: vec![0.0; tax.n_coarse()],
        fine: vec![0.0; tax.n_fine()],
        other: None,
    }
}

fn csv_with(tax: &Taxonomy, rows: &[AnnotationRow]) -> String {
    write_annotations(
        &sonotag::data::Annotations {
            has_other: false,
            rows: rows.to_vec(),
        },
        tax,
    )
    .unwrap()
}

#[test]
fn three_row_file_parses_and_round_trips() {
    let tax = Taxonomy::bundled();
    let mut rows = vec![row(&tax, "a"), row(&tax, "b"), row(&tax, "c")];
    rows[1].fine[4] = -1.0;
    rows[1].coarse[tax.parent(4)] = 1.0;
    rows[2].split = Split::Validate;
    rows[2].verified = true;
    let text = csv_with(&tax, &rows);
    let parsed = parse_annotations_str(&text, &tax, Path::new("x.csv")).unwrap();
    assert_eq!(parsed.rows, rows);
    assert_eq!(parsed.rows[1].fine[4], -1.0);
    assert_eq!(write_annotations(&parsed, &tax).unwrap(), text);
}

#[test]
fn range_and_value_errors_name_the_line() {
    let tax = Taxonomy::bundled();
    let mut bad = row(&tax, "a");
    bad.meta.hour = 24;
    let text = csv_with(&tax, &[row(&tax, "ok"), bad]);
    let err = parse_annotations_str(&text, &tax, Path::new("x.csv")).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");

    let text = csv_with(&tax, &[row(&tax, "a")]).replacen(",0,0\n", ",0,2\n", 1);
    assert!(parse_annotations_str(&text, &tax, Path::new("x.csv")).is_err());

    let mut head = header(&tax, false);
    head.retain(|h| h != "hour");
    let err = parse_annotations_str(&(head.join(",") + "\n"), &tax, Path::new("x.csv")).unwrap_err();
    assert!(err.to_string().contains("missing column hour"), "{err}");
}

#[test]
fn aggregation_rules() {
    let tax = Taxonomy::bundled();
    let zeros = row(&tax, "a");
    let t = aggregate_annotators(&tax, &[&zeros]).unwrap();
    assert_eq!(t, LabelVector::zeros(&tax));

    let mut a = row(&tax, "a");
    a.fine[0] = 1.0;
    a.coarse[tax.parent(0)] = 1.0;
    let b = row(&tax, "a");
    let t = aggregate_annotators(&tax, &[&a, &b]).unwrap();
    assert_eq!(t.fine[0], 1.0);
    assert_eq!(t.coarse[tax.parent(0)], 1.0);

    // unknown fine tags under a positive coarse are masked
    let c = 1;
    let mut u = row(&tax, "a");
    u.coarse[c] = 1.0;
    for &f in tax.children(c) {
        u.fine[f] = -1.0;
    }
    let t = aggregate_annotators(&tax, &[&u]).unwrap();
    for &f in tax.children(c) {
        assert_eq!(t.fine_mask[f], 0.0);
    }
    // under a negative coarse they are confident zeros
    u.coarse[c] = 0.0;
    let t = aggregate_annotators(&tax, &[&u]).unwrap();
    assert!(tax.children(c).iter().all(|&f| t.fine_mask[f] == 1.0 && t.fine[f] == 0.0));
    // a second annotator who answered removes the mask
    let mut v = row(&tax, "a");
    v.coarse[c] = 1.0;
    u.coarse[c] = 1.0;
    let t = aggregate_annotators(&tax, &[&u, &v]).unwrap();
    assert!(tax.children(c).iter().all(|&f| t.fine_mask[f] == 1.0));
}

proptest! {
    #[test]
    fn aggregation_is_idempotent(values in prop::collection::vec(prop_oneof![Just(-1.0f32), Just(0.0f32), Just(1.0f32), 0.0f32..1.0], 31)) {
        let tax = Taxonomy::bundled();
        let mut r = row(&tax, "p");
        r.coarse = values[..8].to_vec();
        r.fine = values[8..].to_vec();
        let once = aggregate_annotators(&tax, &[&r]).unwrap();
        let (coarse, fine) = target_row_values(&tax, &once);
        let again = AnnotationRow { coarse, fine, ..r };
        prop_assert_eq!(aggregate_annotators(&tax, &[&again]).unwrap(), once);
    }
}

fn tiny_synth(dir: &Path, n: usize, seed: u64) -> sonotag::data::Annotations {
    let tax = Taxonomy::bundled();
    let opts = SynthOptions {
        duration_secs: 1.0,
        ..SynthOptions::default()
    };
    synth_dataset(dir, n, seed, &tax, &opts).unwrap()
}

#[test]
fn synth_dataset_layout_and_determinism() {
    let tax = Taxonomy::bundled();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_synth(a.path(), 8, 3);
    tiny_synth(b.path(), 8, 3);
    let wavs: Vec<_> = std::fs::read_dir(a.path().join("audio")).unwrap().collect();
    assert_eq!(wavs.len(), 8);
    for name in ["annotations.csv", "audio/synth_0005.wav"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    let idx = DatasetIndex::load(a.path(), &tax).unwrap();
    assert_eq!(idx.len(), 8);
    assert_eq!(idx.select(&[Split::Validate]).len(), 2);
    assert!(idx.records.iter().all(|r| r.verified == (r.split == Split::Validate)));
    for (k, r) in idx.records.iter().enumerate() {
        let f = k % tax.n_fine();
        assert_eq!(r.targets.fine[f], 1.0);
        assert_eq!(r.targets.coarse[tax.parent(f)], 1.0);
        assert!(r.targets.is_hierarchy_consistent(&tax));
    }
    assert!(synth_dataset(a.path(), 1, 0, &tax, &SynthOptions::default()).is_err());
}

#[test]
fn each_tone_lands_in_its_own_mel_band() {
    let tax = Taxonomy::bundled();
    let mut bands = BTreeSet::new();
    let fb = sonotag::dsp::mel_filterbank(44100, 4096, 64, 0.0, 8000.0).unwrap();
    for i in 0..tax.n_fine() {
        let f = tone_frequency(&tax, i);
        let bin = (f * 4096.0 / 44100.0).round() as usize;
        let band = (0..64).max_by(|&a, &b| fb.row(a)[bin].total_cmp(&fb.row(b)[bin])).unwrap();
        bands.insert(band);
    }
    assert_eq!(bands.len(), tax.n_fine());
}

#[test]
fn synth_tone_is_visible_in_the_spectrogram() {
    let tax = Taxonomy::bundled();
    let dir = tempfile::tempdir().unwrap();
    tiny_synth(dir.path(), 2, 11);
    let idx = DatasetIndex::load(dir.path(), &tax).unwrap();
    let spec = logmel(&load_wav(&idx.records[0].audio).unwrap()).unwrap();
    assert_eq!(spec.bands(), 64);
    let energy: Vec<f64> = (0..64).map(|b| (0..spec.frames()).map(|t| spec.get(t, b) as f64).sum()).collect();
    let loudest = (0..64).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
    let f = tone_frequency(&tax, 0);
    let fb = sonotag::dsp::mel_filterbank(44100, 4096, 64, 0.0, 8000.0).unwrap();
    let bin = (f * 4096.0 / 44100.0).round() as usize;
    // clip 0 always carries tag 0; the loudest band is one of its tones
    let tags: Vec<usize> = (0..tax.n_fine()).filter(|&i| idx.records[0].targets.fine[i] == 1.0).collect();
    let bands: Vec<usize> = tags
        .iter()
        .map(|&t| {
            let bin = (tone_frequency(&tax, t) * 4096.0 / 44100.0).round() as usize;
            (0..64).max_by(|&a, &b| fb.row(a)[bin].total_cmp(&fb.row(b)[bin])).unwrap()
        })
        .collect();
    assert!(bands.contains(&loudest), "loudest {loudest}, tone bands {bands:?} (tag 0 bin {bin})");
}

#[test]
fn missing_audio_names_the_clip() {
    let tax = Taxonomy::bundled();
    let dir = tempfile::tempdir().unwrap();
    tiny_synth(dir.path(), 3, 1);
    std::fs::remove_file(dir.path().join("audio/synth_0001.wav")).unwrap();
    let err = DatasetIndex::load(dir.path(), &tax).unwrap_err();
    assert!(err.to_string().contains("synth_0001"), "{err}");
}

fn fake_predictions(idx: &DatasetIndex, dim: usize) -> BTreeMap<String, Vec<f64>> {
    idx.records
        .iter()
        .enumerate()
        .map(|(k, r)| (r.clip_id.clone(), (0..dim).map(|j| ((k * 31 + j * 7) % 97) as f64 / 97.0 * 0.98 + 0.01).collect()))
        .collect()
}

#[test]
fn relabel_protects_verified_rows_and_is_deterministic() {
    let tax = Taxonomy::bundled();
    let dir = tempfile::tempdir().unwrap();
    tiny_synth(dir.path(), 12, 5);
    let src = dir.path().join("annotations.csv");
    let original = parse_annotations(&src, &tax).unwrap();
    let idx = DatasetIndex::load(dir.path(), &tax).unwrap();
    let layout = tax.layout(System::Two);
    let preds = fake_predictions(&idx, layout.dim());
    let protected = idx.verified_ids();
    assert_eq!(protected.len(), 3);

    let (a, summary) = relabel(&src, &tax, &layout, &preds, &protected, RelabelMode::Soft).unwrap();
    let (b, _) = relabel(&src, &tax, &layout, &preds, &protected, RelabelMode::Soft).unwrap();
    assert_eq!(a, b);
    assert_eq!(summary.protected, 3);
    assert_eq!(summary.relabeled, 9);

    let src_text = std::fs::read_to_string(&src).unwrap();
    assert_eq!(a.lines().next(), src_text.lines().next());
    for line in src_text.lines().filter(|l| protected.iter().any(|p| l.starts_with(&format!("{p},")))) {
        assert!(a.lines().any(|l| l == line));
    }

    let out = dir.path().join("relabeled.csv");
    std::fs::write(&out, &a).unwrap();
    let re = DatasetIndex::load_with(dir.path(), &out, &tax).unwrap();
    assert_eq!(re.len(), idx.len());
    for (old, new) in idx.records.iter().zip(&re.records) {
        assert_eq!((&old.clip_id, old.split, old.verified, old.meta), (&new.clip_id, new.split, new.verified, new.meta));
        if protected.contains(&old.clip_id) {
            assert_eq!(old.targets, new.targets);
        } else {
            assert!(new.targets.fine_mask.iter().all(|&m| m == 1.0));
            assert!(new.targets.coarse.iter().chain(&new.targets.fine).all(|&v| v > 0.0 && v < 1.0));
            let p = &preds[&old.clip_id];
            assert_eq!(new.targets.fine[3], p[layout.fine_range().start + 3] as f32);
        }
    }
    assert!(original.rows.len() >= re.len());
}

#[test]
fn hard_relabeling_thresholds_and_missing_predictions_fail() {
    let tax = Taxonomy::bundled();
    let dir = tempfile::tempdir().unwrap();
    tiny_synth(dir.path(), 4, 6);
    let src = dir.path().join("annotations.csv");
    let idx = DatasetIndex::load(dir.path(), &tax).unwrap();
    let layout = tax.layout(System::Two);
    let mut preds = fake_predictions(&idx, layout.dim());
    let (text, _) = relabel(&src, &tax, &layout, &preds, &BTreeSet::new(), RelabelMode::Hard(0.5)).unwrap();
    let ann = parse_annotations_str(&text, &tax, &src).unwrap();
    assert!(ann.rows.iter().flat_map(|r| r.coarse.iter().chain(&r.fine)).all(|&v| v == 0.0 || v == 1.0));
    preds.remove("synth_0002");
    let err = relabel(&src, &tax, &layout, &preds, &BTreeSet::new(), RelabelMode::Soft).unwrap_err();
    assert!(err.to_string().contains("synth_0002"));
}
