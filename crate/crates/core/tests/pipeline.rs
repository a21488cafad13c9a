mod common;

use std::path::Path;
use std::process::Command;

use common::Lcg;
use ncgm::datamodel::{self, read_sample, write_sample, Relation};
use ncgm::model::{self, ModelConfig};
use ncgm::par::Exec;
use ncgm::postprocess::ground_truth_html;
use ncgm::synth::{
    self, bezier_point, distort, generate, generate_corpus, read_manifest, sample_seed, CorpusSpec, Distortion,
    GenParams, Homography, Split,
};
use ncgm::tensor::ModelParams;
use ncgm::trainer::{self, lr_step, Plateau, TrainConfig};

#[test]
fn generated_tables_are_well_formed_and_deterministic() {
    let p = GenParams::default();
    for i in 0..60 {
        let seed = sample_seed(5, i);
        let t = generate(seed, &p).unwrap();
        assert_eq!(t, generate(seed, &p).unwrap());
        let s = &t.sample;
        assert!(datamodel::validate(s).is_empty(), "{:?}", datamodel::validate(s));
        assert!(s.n() <= p.max_elements);
        assert_eq!(s.spans().unwrap(), t.layout.element_spans());
        assert_eq!(ground_truth_html(s).unwrap(), t.layout.reference_html());
        let rows = s.spans().unwrap().iter().map(|x| x.end_row + 1).max().unwrap();
        for sp in s.spans().unwrap() {
            if sp.start_col == 0 || sp.end_row + 1 == rows {
                assert_eq!(sp.rowspan(), 1, "{sp:?}");
            }
        }
        for r in Relation::ALL {
            let m = s.relations.get(r);
            for a in 0..s.n() {
                for b in 0..s.n() {
                    if s.relations.cell.get(a, b) {
                        assert!(m.get(a, b));
                    }
                }
            }
        }
    }
    assert!(GenParams { rows: (3, 2), ..p.clone() }.validate().is_err());
    assert!(GenParams { rows: (5, 5), cols: (5, 5), ..p }.validate().is_err());
}

#[test]
fn distortions_keep_labels() {
    let (same, total, endpoint) = common::suites::distortion_invariance(25);
    assert_eq!(same, total);
    assert_eq!(endpoint, 0.0);
    let s = generate(sample_seed(1, 1), &GenParams::default()).unwrap().sample;
    let w = distort(&s, Distortion::Perspective, 3, 6.0, 8.0).unwrap();
    assert_ne!(w.elements, s.elements);
    assert!(distort(&s, Distortion::Bezier, 3, 6.0, 1000.0).is_err());
}

#[test]
fn homography_maps_its_correspondences() {
    let mut rng = Lcg(31);
    let src = [(0.0, 0.0), (100.0, 0.0), (100.0, 60.0), (0.0, 60.0)];
    for _ in 0..20 {
        let dst = src.map(|(x, y)| (x + rng.uniform(-8.0, 8.0), y + rng.uniform(-8.0, 8.0)));
        let h = Homography::from_points(&src, &dst).unwrap();
        let inv = h.inverse().unwrap();
        for (a, b) in src.iter().zip(&dst) {
            let p = h.apply(*a).unwrap();
            assert!((p.0 - b.0).abs() < 1e-9 && (p.1 - b.1).abs() < 1e-9);
            let q = inv.apply(*b).unwrap();
            assert!((q.0 - a.0).abs() < 1e-9 && (q.1 - a.1).abs() < 1e-9);
        }
    }
    let collapsed = [(0.0, 0.0); 4];
    assert!(Homography::from_points(&src, &collapsed).is_none());
    // Quadratic Bézier at t = 1/2 by the closed form.
    let p = [(0.0, 0.0), (2.0, 4.0), (4.0, 0.0)];
    assert_eq!(bezier_point(&p, 0.5), (2.0, 2.0));
}

#[test]
fn sample_documents_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate(sample_seed(2, 3), &GenParams::default()).unwrap().sample;
    let path = dir.path().join("s.json");
    write_sample(&path, &s).unwrap();
    assert_eq!(read_sample(&path).unwrap(), s);
    std::fs::write(&path, "{\"not\": 1}").unwrap();
    assert!(read_sample(&path).is_err());
}

#[test]
fn corpus_splits_and_exec_modes_agree() {
    let spec = CorpusSpec {
        count: 12,
        val: 2,
        test: 3,
        seed: 9,
        distortion: Distortion::Both,
        ..CorpusSpec::default()
    };
    let a = generate_corpus(&spec, Exec::Sequential).unwrap();
    let b = generate_corpus(&spec, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    let count = |s: Split| a.iter().filter(|e| e.split == s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (7, 2, 3));
    let dir = tempfile::tempdir().unwrap();
    synth::write_corpus(dir.path(), &a).unwrap();
    let rows = read_manifest(dir.path()).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[4].load().unwrap(), a[4].table.sample);
    assert!(generate_corpus(&CorpusSpec { val: 10, test: 5, ..spec }, Exec::Sequential).is_err());
}

fn tiny_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        lr: 1e-3,
        model: model::tiny_config(),
        ..TrainConfig::default()
    }
}

fn small_tables(count: usize) -> Vec<datamodel::TableSample> {
    let p = GenParams { rows: (2, 3), cols: (2, 3), max_elements: 12, ..GenParams::default() };
    (0..count).map(|i| generate(sample_seed(40, i), &p).unwrap().sample).collect()
}

#[test]
fn training_is_deterministic_and_exec_independent() {
    let data = small_tables(3);
    let a = trainer::train(&data, &[], &tiny_train(2, 4), None, Exec::Sequential).unwrap();
    let b = trainer::train(&data, &[], &tiny_train(2, 4), None, Exec::Parallel).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    let c = trainer::train(&data, &[], &tiny_train(2, 5), None, Exec::Sequential).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = small_tables(2);
    let cfg = tiny_train(0, 8);
    let dir = tempfile::tempdir().unwrap();
    let out = trainer::train(&data, &[], &cfg, Some(dir.path()), Exec::Sequential).unwrap();
    let init = model::init_params(&cfg.model, 8).unwrap();
    assert_eq!(out.params, init);
    assert!(out.log.is_empty());
    assert_eq!(ModelParams::load(dir.path().join("model.ncgm")).unwrap(), init);
    assert_eq!(ModelConfig::load(dir.path().join("model.cfg")).unwrap(), cfg.model);
}

#[test]
fn zero_learning_rate_leaves_params_alone() {
    let data = small_tables(1);
    let cfg = TrainConfig { lr: 0.0, ..tiny_train(1, 6) };
    let out = trainer::train(&data, &[], &cfg, None, Exec::Sequential).unwrap();
    assert_eq!(out.params, model::init_params(&cfg.model, 6).unwrap());
    assert_eq!(out.log.len(), 1);
}

#[test]
fn validation_split_drives_the_checkpoint() {
    let data = small_tables(4);
    let dir = tempfile::tempdir().unwrap();
    let out = trainer::train(&data[..3], &data[3..], &tiny_train(3, 1), Some(dir.path()), Exec::Parallel).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.val_loss.unwrap()).collect();
    let best = losses.iter().position(|&l| l == losses.iter().copied().fold(f64::INFINITY, f64::min)).unwrap();
    assert!(out.log.iter().all(|e| e.val_f1.is_some()));
    let saved = ModelParams::load(dir.path().join("model.ncgm")).unwrap();
    assert_eq!(saved, out.best);
    if best + 1 == losses.len() {
        assert_eq!(saved, out.params);
    }
}

#[test]
fn plateau_rule() {
    let cfg = TrainConfig { plateau_patience: 3, ..TrainConfig::default() };
    let flat = [1.0, 0.9, 0.9, 0.95, 0.9];
    assert!((lr_step(&flat, &cfg) - 1e-5).abs() < 1e-18);
    assert_eq!(lr_step(&[1.0, 0.9, 0.8, 0.7], &cfg), 1e-4);
    let mut p = Plateau::default();
    let decays: Vec<bool> = [1.0; 7].iter().map(|&l| p.observe(l, 3)).collect();
    assert_eq!(decays, [false, false, false, true, false, false, true]);
}

#[test]
fn bad_inputs_are_rejected() {
    let mut data = small_tables(1);
    let cfg = tiny_train(1, 0);
    assert!(trainer::train(&[], &[], &cfg, None, Exec::Sequential).is_err());
    let flipped = !data[0].relations.row.get(0, 1);
    data[0].relations.row.set(0, 1, flipped);
    assert!(trainer::train(&data, &[], &cfg, None, Exec::Sequential).is_err());
    let big = GenParams {
        rows: (5, 5),
        cols: (4, 4),
        span_prob: 0.0,
        multiline_prob: 0.0,
        max_elements: 20,
        ..GenParams::default()
    };
    let t = generate(1, &big).unwrap().sample;
    assert!(model::predict_sample(&model::init_params(&cfg.model, 0).unwrap(), &cfg.model, &t).is_err());
}

fn ncgm(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ncgm")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

const TINY: &str = "d=16\nheads=2\nd_k=8\nd_v=8\nimage_size=32\nconv_channels=2\nvocab=64\nlayers=3\n\
                    max_elements=16\nlr=0.001\n";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_generate_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let (code, text) = ncgm(&["--out", s(d.path()), "generate", "--seed", "3", "--count", "5", "--distort", "both"]);
        assert_eq!(code, 0, "{text}");
    }
    for f in ["manifest.tsv", "samples/t00004.json"] {
        let x = std::fs::read(a.path().join("corpus").join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join("corpus").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn cli_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = s(d.path());
    assert_eq!(ncgm(&["--help"]).0, 0);
    assert_eq!(ncgm(&["frobnicate"]).0, 1);
    assert_eq!(ncgm(&["--out", out, "generate", "--count", "2"]).0, 1, "seed is required");
    assert_eq!(ncgm(&["--out", out, "generate", "--seed", "1", "--rows", "x"]).0, 1);
    assert_eq!(ncgm(&["--out", out, "eval", "--gt"]).0, 2, "missing corpus");
    let cfg = d.path().join("bad.cfg");
    std::fs::write(&cfg, "colour=blue\n").unwrap();
    assert_eq!(ncgm(&["--out", out, "--config", s(&cfg), "generate", "--seed", "1"]).0, 1);
    assert_eq!(ncgm(&["--out", out, "generate", "--seed", "1", "--count", "3"]).0, 0);
    assert_eq!(ncgm(&["--out", out, "eval", "--gt", "--threshold", "1.5"]).0, 1);
    let garbled = d.path().join("corpus/samples/t00000.json");
    std::fs::write(&garbled, "{").unwrap();
    assert_eq!(ncgm(&["--out", out, "eval", "--gt"]).0, 2);
}

#[test]
fn cli_ground_truth_scores_perfectly() {
    let d = tempfile::tempdir().unwrap();
    let out = s(d.path());
    assert_eq!(ncgm(&["--out", out, "generate", "--seed", "4", "--count", "8", "--distort", "both"]).0, 0);
    let (code, text) = ncgm(&["--out", out, "eval", "--gt", "--sweep", "0.3,0.5,0.7"]);
    assert_eq!(code, 0, "{text}");
    let kv = std::fs::read_to_string(d.path().join("reports/metrics.kv")).unwrap();
    for key in ["cell.f1", "row.f1", "col.f1", "overall.f1", "teds", "bleu"] {
        let line = kv.lines().find(|l| l.starts_with(&format!("{key}="))).unwrap_or_else(|| panic!("{key} in {kv}"));
        assert_eq!(line.split('=').nth(1).unwrap().parse::<f64>().unwrap(), 1.0, "{line}");
    }
    let sweep = std::fs::read_to_string(d.path().join("reports/threshold_sweep.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
}

#[test]
fn cli_train_eval_analyze_sweep() {
    let d = tempfile::tempdir().unwrap();
    let out = s(d.path());
    let cfg = d.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    let (code, text) = ncgm(&["--out", out, "--config", c, "generate", "--seed", "6", "--count", "6", "--test", "2"]);
    assert_eq!(code, 0, "{text}");
    let (code, text) = ncgm(&["--out", out, "--config", c, "train", "--seed", "1", "--epochs", "2"]);
    assert_eq!(code, 0, "{text}");
    let log = std::fs::read_to_string(d.path().join("reports/train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let (code, text) = ncgm(&["--out", out, "eval", "--split", "test"]);
    assert_eq!(code, 0, "{text}");
    assert!(std::fs::read_to_string(d.path().join("reports/metrics.txt")).unwrap().contains("TEDS"));

    let (code, text) = ncgm(&["--out", out, "analyze", "--sample", "1"]);
    assert_eq!(code, 0, "{text}");
    let maps = d.path().join("maps");
    let index = std::fs::read_to_string(maps.join("index.tsv")).unwrap();
    let sets: std::collections::BTreeSet<String> =
        index.lines().skip(1).map(|l| l.split('\t').skip(1).take(3).collect::<Vec<_>>().join("/")).collect();
    assert_eq!(sets.len(), 18);
    assert_eq!(index.lines().count(), 1 + 18 * 2);
    let first = index.lines().nth(1).unwrap();
    let f: Vec<&str> = first.split('\t').collect();
    let (queries, keys): (usize, usize) = (f[5].parse().unwrap(), f[6].parse().unwrap());
    let pgm = std::fs::read(maps.join(f[0])).unwrap();
    let header = format!("P5\n{keys} {queries}\n255\n");
    assert!(pgm.starts_with(header.as_bytes()));
    assert_eq!(pgm.len(), header.len() + queries * keys);
    assert_eq!(*pgm[header.len()..].iter().max().unwrap(), 255);
    let curves = std::fs::read_to_string(maps.join("jsd_curves.tsv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 18);
    assert_eq!(ncgm(&["--out", out, "analyze", "--sample", "99"]).0, 1);

    let (code, text) = ncgm(&["--out", out, "--config", c, "sweep", "--seed", "1", "--epochs", "1", "--blocks", "1,2"]);
    assert_eq!(code, 0, "{text}");
    let table = std::fs::read_to_string(d.path().join("reports/block_sweep.txt")).unwrap();
    let blocks: Vec<usize> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap().parse().unwrap()).collect();
    assert_eq!(blocks, [1, 2]);
}

#[test]
fn zeroing_a_modality_changes_predictions() {
    let cfg = ModelConfig::default();
    let p = model::init_params(&cfg, 2).unwrap();
    let t = generate(sample_seed(2, 2), &GenParams::default()).unwrap().sample;
    let base = common::suites::prediction_hash(&p, &cfg, &t);
    for k in 0..3 {
        let mut z = cfg.clone();
        z.zeroed[k] = true;
        assert_ne!(common::suites::prediction_hash(&p, &z, &t), base);
    }
}
