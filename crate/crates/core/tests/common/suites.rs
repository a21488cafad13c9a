//! Checks shared by the regular integration tests and the acceptance
//! harness. Each returns measured quantities; callers decide the bars.

use std::time::Instant;

use ncgm::collab::{self, edge_count, CollabConfig, FusionMode};
use ncgm::datamodel::{build_adjacency, Relation};
use ncgm::features::{Modality, PreparedInputs};
use ncgm::head::{self, monte_carlo_sample, LossWeights};
use ncgm::metrics::{attention_jsd, bleu, teds};
use ncgm::model::{self, ModelConfig};
use ncgm::nn::{self, Init};
use ncgm::par::Exec;
use ncgm::postprocess::{belonging_lists, to_html, to_spans, StructureTree};
use ncgm::synth::{bezier_point, distort, generate, sample_seed, Distortion, GenParams, GeneratedTable};
use ncgm::tensor::{check_gradients, check_param_gradients, ModelParams, Tape, Tensor, Var};
use ncgm::trainer::{self, TrainConfig};
use ncgm::Result;

use super::Lcg;

/// Loss `Σ W ⊙ out` with a fixed random `W`, so every output entry matters.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = Lcg(seed ^ 0x5eed);
    let numel: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..numel).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut Lcg, seed: u64) -> Vec<OpCase> {
    let m = |rng: &mut Lcg, r, c| rng.matrix(r, c, 1.0);
    let vecn = |rng: &mut Lcg, n| Tensor::new(vec![n], (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
    let gidx: Vec<Option<usize>> = vec![Some(2), None, Some(0), Some(2), Some(1)];
    let mut cases: Vec<OpCase> = vec![
        ("matmul", vec![m(rng, 3, 4), m(rng, 4, 2)], Box::new(move |t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o, seed)
        })),
        ("matmul_nt", vec![m(rng, 3, 4), m(rng, 5, 4)], Box::new(move |t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            probe(t, o, seed)
        })),
        ("transpose", vec![m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.transpose(v[0])?;
            probe(t, o, seed)
        })),
        ("add", vec![m(rng, 3, 4), m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.add(v[0], v[1])?;
            probe(t, o, seed)
        })),
        ("sub", vec![m(rng, 3, 4), m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.sub(v[0], v[1])?;
            probe(t, o, seed)
        })),
        ("mul", vec![m(rng, 3, 4), m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.mul(v[0], v[1])?;
            probe(t, o, seed)
        })),
        ("add_row", vec![m(rng, 3, 4), vecn(rng, 4)], Box::new(move |t, v| {
            let o = t.add_row(v[0], v[1])?;
            probe(t, o, seed)
        })),
        ("scale", vec![m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.scale(v[0], -1.7);
            probe(t, o, seed)
        })),
        ("add_scalar", vec![m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.add_scalar(v[0], 0.3);
            probe(t, o, seed)
        })),
        ("relu", vec![m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.relu(v[0]);
            probe(t, o, seed)
        })),
        ("softmax_rows", vec![m(rng, 3, 5)], Box::new(move |t, v| {
            let o = t.softmax_rows(v[0])?;
            probe(t, o, seed)
        })),
        ("layer_norm", vec![m(rng, 3, 5), vecn(rng, 5), vecn(rng, 5)], Box::new(move |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, o, seed)
        })),
        ("concat_cols", vec![m(rng, 3, 2), m(rng, 3, 3)], Box::new(move |t, v| {
            let o = t.concat_cols(&[v[0], v[1]])?;
            probe(t, o, seed)
        })),
        ("concat_rows", vec![m(rng, 2, 3), m(rng, 4, 3)], Box::new(move |t, v| {
            let o = t.concat_rows(&[v[0], v[1]])?;
            probe(t, o, seed)
        })),
        ("slice_cols", vec![m(rng, 3, 6)], Box::new(move |t, v| {
            let o = t.slice_cols(v[0], 2, 3)?;
            probe(t, o, seed)
        })),
        ("gather_rows", vec![m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.gather_rows(v[0], gidx.clone())?;
            probe(t, o, seed)
        })),
        ("reshape", vec![m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.reshape(v[0], vec![2, 6])?;
            probe(t, o, seed)
        })),
        ("segment_max", vec![m(rng, 6, 3)], Box::new(move |t, v| {
            let o = t.segment_max(v[0], &[2, 3, 1])?;
            probe(t, o, seed)
        })),
        ("conv3x3_s2", vec![m(rng, 5 * 6, 2), m(rng, 18, 3), vecn(rng, 3)], Box::new(move |t, v| {
            let o = t.conv3x3_s2(v[0], v[1], v[2], 5, 6)?;
            probe(t, o, seed)
        })),
        ("sum", vec![m(rng, 3, 4)], Box::new(move |t, v| {
            let s = t.sum(v[0]);
            Ok(t.scale(s, 0.7))
        })),
        ("mean", vec![m(rng, 3, 4)], Box::new(move |t, v| {
            let s = t.mean(v[0]);
            Ok(t.scale(s, 1.3))
        })),
        ("row_sq_norm", vec![m(rng, 3, 4)], Box::new(move |t, v| {
            let o = t.row_sq_norm(v[0])?;
            probe(t, o, seed)
        })),
    ];
    cases.push(("cross_entropy", vec![m(rng, 4, 3)], Box::new(move |t, v| t.cross_entropy(v[0], &labels))));
    cases
}

/// Worst relative error per differentiable op over `points` seeded inputs.
pub fn op_gradients(points: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..points {
        let mut rng = Lcg(1000 + seed);
        for (name, inputs, f) in op_cases(&mut rng, seed) {
            let report = check_gradients(&inputs, None, 1e-5, |t, v| f(t, v)).expect("gradient check runs");
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(report.max_rel_error),
                None => worst.push((name, report.max_rel_error)),
            }
        }
    }
    worst
}

/// Small model and one labeled table for end-to-end loss checks.
pub fn tiny_problem(seed: u64) -> (ModelConfig, ModelParams, PreparedInputs, ncgm::datamodel::TableSample) {
    let cfg = model::tiny_config();
    let params = model::init_params(&cfg, seed).expect("init");
    let gen = GenParams {
        rows: (2, 3),
        cols: (2, 3),
        max_elements: 12,
        ..GenParams::default()
    };
    let sample = generate(sample_seed(seed, 0), &gen).expect("generate").sample;
    let inputs = PreparedInputs::new(&sample, &cfg.features).expect("inputs");
    (cfg, params, inputs, sample)
}

/// Worst relative error of the full sampled loss over `points` seeded
/// models, probing `per_point` random parameter coordinates each, plus the
/// number of redrawn probes whose stencil crossed a ReLU/max kink.
pub fn full_loss_gradient(points: u64, per_point: usize) -> (f64, usize) {
    let (mut worst, mut kinked) = (0.0f64, 0);
    for seed in 0..points {
        let (cfg, params, inputs, sample) = tiny_problem(seed);
        let samples = monte_carlo_sample(&sample.relations, 10, seed).expect("sampling");
        let names: Vec<String> = params.names().cloned().collect();
        let mut rng = Lcg(77 + seed);
        let mut checked = 0;
        for _ in 0..20 {
            if checked >= per_point {
                break;
            }
            let probes: Vec<(String, usize)> = (0..per_point - checked)
                .map(|_| {
                    let name = names[rng.below(names.len())].clone();
                    let numel = params.get(&name).unwrap().numel();
                    (name, rng.below(numel))
                })
                .collect();
            let report = check_param_gradients(&params, &probes, 1e-5, |tape, p| {
                let (e, _) = model::encode(tape, p, &cfg, &inputs)?;
                head::sampled_loss(tape, p, e, &samples, LossWeights::default())
            })
            .expect("gradient check runs");
            worst = worst.max(report.max_rel_error);
            checked += report.checked;
            kinked += report.kinked;
        }
        assert!(checked >= per_point, "seed {seed}: only {checked} smooth probes");
    }
    (worst, kinked)
}

/// (N, raw edge rows, compressed key rows) for each requested size.
pub fn compression_rows(sizes: &[usize]) -> Vec<(usize, usize, usize)> {
    let cfg = CollabConfig {
        max_elements: 16,
        ..CollabConfig::default()
    };
    let mut params = ModelParams::new();
    let mut init = Init::new(3);
    collab::init_ece(&mut params, &mut init, "ece", &cfg).expect("init");
    let mut rng = Lcg(5);
    sizes
        .iter()
        .map(|&n| {
            let mut tape = Tape::new();
            let c = tape.constant(rng.matrix(n, cfg.d(), 1.0));
            let edges = collab::edge_features(&mut tape, c).expect("edges");
            let edges = nn::linear(&mut tape, &params, "ece/edge", edges).expect("edge fc");
            let raw = tape.value(edges).rows();
            let kc = ncgm::attention::memory_compress(&mut tape, &params, "ece/cmha/mc", edges, n).expect("compress");
            let (_, weights) = collab::ece_layer(&mut tape, &params, "ece", c, &cfg.attention).expect("ece");
            assert_eq!(weights.shape()[2], tape.value(kc).rows());
            assert_eq!(raw, edge_count(n));
            (n, raw, tape.value(kc).rows())
        })
        .collect()
}

/// Largest elementwise gap between the block stack and the straight-line
/// reference at L = 2, N = 3.
pub fn block_stack_gap(seed: u64) -> f64 {
    let cfg = CollabConfig {
        attention: ncgm::attention::AttentionConfig {
            heads: 2,
            d_model: 4,
            d_k: 2,
            d_v: 2,
        },
        layers: 2,
        max_elements: 3,
        fusion: FusionMode::Ncgm,
    };
    let mut params = ModelParams::new();
    collab::init_blocks(&mut params, &mut Init::new(seed), &cfg).expect("init");
    // Non-trivial norm parameters so the reference exercises them too.
    let mut rng = Lcg(seed);
    for (name, t) in params.iter_mut() {
        if name.ends_with("/gamma") || name.ends_with("/beta") {
            for v in t.data_mut() {
                *v += rng.uniform(-0.3, 0.3);
            }
        }
    }
    let fa = rng.matrix(3, 4, 1.0);
    let fg = rng.matrix(3, 4, 1.0);
    let fc = rng.matrix(3, 4, 1.0);
    let mut tape = Tape::new();
    let f = ncgm::features::ModalityEmbeddings {
        geometry: tape.constant(fg.clone()),
        appearance: tape.constant(fa.clone()),
        content: tape.constant(fc.clone()),
    };
    let (e, _) = collab::forward_blocks(&mut tape, &params, &f, &cfg).expect("forward");
    let reference = super::blocks_straight_line(&params, &fa.to_rows(), &fg.to_rows(), &fc.to_rows(), 2, 2, 2);
    super::max_abs_diff(&tape.value(e).to_rows(), &reference)
}

pub struct RoundTrip {
    pub checked: usize,
    pub exact: usize,
    pub min_teds: f64,
    pub seconds: f64,
    pub first_failure: Option<String>,
}

fn pipeline(table: &GeneratedTable, sample: &ncgm::datamodel::TableSample) -> std::result::Result<f64, String> {
    let n = sample.n();
    let rel = build_adjacency(&sample.elements).map_err(|e| e.to_string())?;
    let ys: Vec<f64> = sample.elements.iter().map(|e| e.bbox.y).collect();
    let xs: Vec<f64> = sample.elements.iter().map(|e| e.bbox.x).collect();
    let lists = |r: Relation, keys: &[f64]| belonging_lists(&rel.get(r).to_probabilities(), n, 0.5, keys);
    let rows = lists(Relation::Row, &ys).map_err(|e| e.to_string())?;
    let cols = lists(Relation::Col, &xs).map_err(|e| e.to_string())?;
    let cells = lists(Relation::Cell, &xs).map_err(|e| e.to_string())?;
    let spans = to_spans(&rows, &cols, &cells, n).map_err(|e| e.to_string())?;
    if spans != table.layout.element_spans() {
        return Err(format!("spans differ: {spans:?} vs {:?}", table.layout.element_spans()));
    }
    let html = to_html(&spans).map_err(|e| e.to_string())?;
    let reference = table.layout.reference_html();
    if html != reference {
        return Err(format!("html differs: {} vs {}", html.concat(), reference.concat()));
    }
    let a = StructureTree::from_tokens(&html).map_err(|e| e.to_string())?;
    let b = StructureTree::from_tokens(&reference).map_err(|e| e.to_string())?;
    Ok(teds(&a, &b))
}

/// Ground truth through the whole post-processing chain, for `count` tables
/// both undistorted and with both distortions applied.
pub fn round_trip(count: usize) -> RoundTrip {
    let start = Instant::now();
    let gen = GenParams::default();
    let mut out = RoundTrip {
        checked: 0,
        exact: 0,
        min_teds: 1.0,
        seconds: 0.0,
        first_failure: None,
    };
    for i in 0..count {
        let seed = sample_seed(2024, i);
        let table = generate(seed, &gen).expect("generate");
        let warped = distort(&table.sample, Distortion::Both, seed, 6.0, 8.0).expect("distort");
        for sample in [&table.sample, &warped] {
            out.checked += 1;
            match pipeline(&table, sample) {
                Ok(t) => {
                    out.exact += 1;
                    out.min_teds = out.min_teds.min(t);
                }
                Err(e) => {
                    out.min_teds = 0.0;
                    out.first_failure.get_or_insert(format!("seed {seed}: {e}"));
                }
            }
        }
    }
    out.seconds = start.elapsed().as_secs_f64();
    out
}

/// Number of tables whose labels survive both warps unchanged, plus the
/// worst Bézier endpoint error over random control points.
pub fn distortion_invariance(count: usize) -> (usize, usize, f64) {
    let gen = GenParams::default();
    let mut same = 0;
    for i in 0..count {
        let seed = sample_seed(99, i);
        let s = generate(seed, &gen).expect("generate").sample;
        let ok = [Distortion::Perspective, Distortion::Bezier].iter().all(|&d| {
            let w = distort(&s, d, seed, 6.0, 8.0).expect("distort");
            let rebuilt = build_adjacency(&w.elements).expect("labels kept");
            w.relations == s.relations && rebuilt == s.relations && ncgm::datamodel::validate(&w).is_empty()
        });
        same += usize::from(ok);
    }
    let mut rng = Lcg(4);
    let mut endpoint: f64 = 0.0;
    for _ in 0..1000 {
        let p = [0, 1, 2].map(|_| (rng.uniform(-500.0, 500.0), rng.uniform(-500.0, 500.0)));
        let (a, b) = (bezier_point(&p, 0.0), bezier_point(&p, 1.0));
        endpoint = endpoint
            .max((a.0 - p[0].0).abs())
            .max((a.1 - p[0].1).abs())
            .max((b.0 - p[2].0).abs())
            .max((b.1 - p[2].1).abs());
    }
    (same, count, endpoint)
}

/// (name, measured, expected) for the closed-form metric cases.
pub fn metric_identities() -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    let spans = [
        ncgm::datamodel::Span::new(0, 0, 0, 1),
        ncgm::datamodel::Span::cell(1, 0),
        ncgm::datamodel::Span::cell(1, 1),
        ncgm::datamodel::Span::new(2, 2, 0, 1),
    ];
    let tree = StructureTree::from_spans(&spans).expect("tree");
    out.push(("teds(identical)".to_string(), teds(&tree, &tree), 1.0));
    let k = tree.size();
    let mut pruned = tree.clone();
    pruned.root.children[1].children.pop();
    out.push((format!("teds(k={k}, minus one leaf)"), teds(&tree, &pruned), 1.0 - 1.0 / k as f64));
    let html = to_html(&spans).expect("html");
    out.push(("bleu(identity)".to_string(), bleu(&html, &html).expect("bleu"), 1.0));
    let row = [0.1, 0.2, 0.3, 0.4];
    out.push(("jsd(identical heads)".to_string(), attention_jsd(&[&row, &row, &row]).expect("jsd"), 0.0));
    for k in [2usize, 3, 5] {
        let rows: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        out.push((format!("jsd({k} one-hot heads)"), attention_jsd(&refs).expect("jsd"), (k as f64).ln()));
    }
    out
}

pub fn overfit_tables(count: usize, seed: u64) -> Vec<ncgm::datamodel::TableSample> {
    let gen = GenParams::default();
    (0..count).map(|i| generate(sample_seed(seed, i), &gen).expect("generate").sample).collect()
}

pub struct Overfit {
    pub train_f1: f64,
    pub held_out_f1: f64,
    pub seconds: f64,
    pub first_losses: Vec<f64>,
}

/// The default model trained on 20 tables and scored on 5 more from the
/// same generator.
pub fn overfit(cfg: &TrainConfig) -> Result<Overfit> {
    let start = Instant::now();
    let all = overfit_tables(25, 7);
    let (train, held) = all.split_at(20);
    let out = trainer::train(train, &[], cfg, None, Exec::Parallel)?;
    let a = trainer::evaluate(&out.params, &cfg.model, train, cfg.threshold, Exec::Parallel)?;
    let b = trainer::evaluate(&out.params, &cfg.model, held, cfg.threshold, Exec::Parallel)?;
    Ok(Overfit {
        train_f1: a.overall_f1(),
        held_out_f1: b.overall_f1(),
        seconds: start.elapsed().as_secs_f64(),
        first_losses: out.log.iter().take(10).map(|e| e.loss).collect(),
    })
}

/// Hash of every predicted probability's bit pattern.
pub fn prediction_hash(params: &ModelParams, cfg: &ModelConfig, sample: &ncgm::datamodel::TableSample) -> u64 {
    use std::hash::{Hash, Hasher};
    let p = model::predict_sample(params, cfg, sample).expect("predict");
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for r in &p.probs {
        for v in r {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Trains each fusion variant for `epochs` and hashes predictions under each
/// single-modality zeroing. Returns (variant, final loss) and the hashes.
pub fn ablations(epochs: usize) -> Result<(Vec<(&'static str, f64)>, Vec<(String, u64)>)> {
    let tables = overfit_tables(6, 11);
    let mut trained = Vec::new();
    for fusion in [FusionMode::LateConcat, FusionMode::MixedEarly] {
        let mut cfg = TrainConfig {
            epochs,
            ..TrainConfig::default()
        };
        cfg.model.collab.fusion = fusion;
        let out = trainer::train(&tables, &[], &cfg, None, Exec::Parallel)?;
        trained.push((fusion.name(), out.log.last().map_or(f64::NAN, |e| e.loss)));
    }
    let base = ModelConfig::default();
    let params = model::init_params(&base, 1)?;
    let mut hashes = vec![("none".to_string(), prediction_hash(&params, &base, &tables[0]))];
    for m in Modality::ALL {
        let mut cfg = base.clone();
        cfg.zeroed[m.index()] = true;
        hashes.push((m.name().to_string(), prediction_hash(&params, &cfg, &tables[0])));
    }
    Ok((trained, hashes))
}
