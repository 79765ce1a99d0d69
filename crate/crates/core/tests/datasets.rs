mod common;

use std::fs;

use common::rng;
use mapnet::episodes::{load_embeddings, sample_episode, synth_generate, Split, SynthSpec};
use mapnet::Error;

fn small_spec() -> SynthSpec {
    SynthSpec {
        train_classes: 6,
        val_classes: 5,
        test_classes: 5,
        samples_per_class: 8,
        d_v: 5,
        d_a: 4,
        ..SynthSpec::default()
    }
}

#[test]
fn written_files_reload_bitwise() {
    let ds = synth_generate(&small_spec(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (f, a) = (dir.path().join("features.txt"), dir.path().join("attributes.txt"));
    ds.write_files(&f, &a).unwrap();
    let back = load_embeddings(&f, &a).unwrap();
    assert_eq!(back, ds);
    let header = fs::read_to_string(&a).unwrap();
    assert!(header.starts_with("#attributes 16 4\n"));
}

#[test]
fn malformed_files_are_rejected_with_location() {
    let ds = synth_generate(&small_spec(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (f, a) = (dir.path().join("features.txt"), dir.path().join("attributes.txt"));
    ds.write_files(&f, &a).unwrap();

    let attrs = fs::read_to_string(&a).unwrap();
    let short: String = attrs.lines().take(10).map(|l| format!("{l}\n")).collect();
    fs::write(&a, &short).unwrap();
    assert!(matches!(load_embeddings(&f, &a), Err(Error::Format { .. })));

    fs::write(&a, &attrs).unwrap();
    let feats = fs::read_to_string(&f).unwrap();
    let mut lines: Vec<String> = feats.lines().map(str::to_owned).collect();
    let mut fields: Vec<&str> = lines[1].split(' ').collect();
    fields[1] = "777";
    lines[1] = fields.join(" ");
    fs::write(&f, lines.join("\n") + "\n").unwrap();
    let err = load_embeddings(&f, &a).unwrap_err();
    assert!(matches!(err, Error::Format { line: 2, .. }), "{err:?}");
    assert!(err.to_string().contains("777"), "{err}");

    let missing = dir.path().join("nope.txt");
    let err = load_embeddings(&missing, &a).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("nope.txt"));
}

#[test]
fn class_draws_are_uniform() {
    let ds = synth_generate(&SynthSpec::default(), 0).unwrap();
    let test = ds.classes_in(Split::Test);
    let mut r = rng(17);
    let draws = 10_000;
    let mut counts = vec![0usize; ds.class_count()];
    for _ in 0..draws {
        let ep = sample_episode(&ds, Split::Test, 5, 1, 15, &mut r).unwrap();
        // Support features identify the drawn class through the sample rows.
        for row in 0..ep.support_count() {
            let x = ep.support_features().row(row);
            let hit = (0..ds.sample_count()).find(|&i| ds.features().row(i) == x).unwrap();
            counts[ds.labels()[hit]] += 1;
        }
    }
    let p = 5.0 / test.len() as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for &c in &test {
        let k = counts[c] as f64;
        assert!((k - mean).abs() <= 3.0 * sd, "class {c}: {k} vs {mean}");
        chi2 += (k - mean) * (k - mean) / mean;
    }
    // 19 degrees of freedom; 99.9th percentile is about 43.8.
    assert!(chi2 < 43.8, "chi2 {chi2}");
    assert!(counts.iter().enumerate().all(|(c, &k)| test.contains(&c) || k == 0));
}

#[test]
fn low_noise_classes_are_separable() {
    let spec = SynthSpec { noise: 0.1, ..SynthSpec::default() };
    let ds = synth_generate(&spec, 0).unwrap();
    let (n, d) = (ds.sample_count(), ds.feature_dim());
    let mut centres = vec![vec![0.0; d]; ds.class_count()];
    for i in 0..n {
        for (c, v) in centres[ds.labels()[i]].iter_mut().zip(ds.features().row(i)) {
            *c += v / spec.samples_per_class as f64;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let x = ds.features().row(i);
            let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..centres.len())
                .min_by(|&a, &b| dist(&centres[a]).total_cmp(&dist(&centres[b])))
                .unwrap();
            best == ds.labels()[i]
        })
        .count();
    assert!(correct as f64 / n as f64 > 0.99, "{correct}/{n}");
}

#[test]
fn serialized_episode_hides_query_labels_and_semantics() {
    let ds = synth_generate(&small_spec(), 1).unwrap();
    let ep = sample_episode(&ds, Split::Train, 3, 2, 6, &mut rng(2)).unwrap();
    let json = serde_json::to_value(&ep).unwrap();
    let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
    assert!(keys.iter().all(|k| !k.contains("query_label") && !k.contains("query_attr")), "{keys:?}");
    assert_eq!(json["support_labels"].as_array().unwrap().len(), 6);
}
