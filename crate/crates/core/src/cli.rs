//! Command-line front end.
//!
//! Every subcommand works below one output root with a fixed layout:
//! `corpus/`, `checkpoints/`, `reports/` and `maps/`. Settings come from an
//! optional `key=value` file; flags given on the command line win.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::AttentionMap;
use crate::datamodel::{Relation, TableSample};
use crate::error::{Error, Result};
use crate::metrics::{self, jsd_curves, MetricsReport};
use crate::model::{self, parse_kv, ModelConfig};
use crate::par::Exec;
use crate::postprocess::{connected_components, threshold_graph};
use crate::synth::{generate_corpus, read_manifest, write_corpus, CorpusSpec, Distortion, Split};
use crate::tensor::ModelParams;
use crate::trainer::{self, block_sweep, sweep_table, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ncgm", version, about = "Table structure recognition with collaborative graph attention")]
pub struct Cli {
    /// key=value settings file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output root holding corpus/, checkpoints/, reports/ and maps/.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    /// Run on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a labeled corpus into <out>/corpus.
    Generate(GenerateArgs),
    /// Train on the corpus train split; checkpoints go to <out>/checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint; reports go to <out>/reports.
    Eval(EvalArgs),
    /// Dump attention heatmaps and diversity curves into <out>/maps.
    Analyze(AnalyzeArgs),
    /// Train once per block count and tabulate F1.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Tables held out for validation (taken after the training tables).
    #[arg(long)]
    pub val: Option<usize>,
    /// Tables held out for testing (taken last).
    #[arg(long)]
    pub test: Option<usize>,
    /// Grid rows, `N` or `MIN-MAX`.
    #[arg(long)]
    pub rows: Option<String>,
    /// Grid columns, `N` or `MIN-MAX`.
    #[arg(long)]
    pub cols: Option<String>,
    #[arg(long)]
    pub span_prob: Option<f64>,
    #[arg(long)]
    pub multiline_prob: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub max_elements: Option<usize>,
    /// none, perspective, bezier or both.
    #[arg(long)]
    pub distort: Option<String>,
    /// Perspective corner jitter in pixels.
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Curve offset in pixels.
    #[arg(long)]
    pub bend: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct ModelFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Flat epochs tolerated before the learning rate drops tenfold.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Monte Carlo partners per anchor.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// ncgm, late-concat or mixed-early.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Comma-separated modalities fed as zeros (geometry, appearance, content).
    #[arg(long)]
    pub zero: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Alternative corpus directory (default <out>/corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint directory (default <out>/checkpoints).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    pub gt: bool,
    /// Comma-separated thresholds; reports component counts at each.
    #[arg(long)]
    pub sweep: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Manifest position of the table whose maps are drawn.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Comma-separated block counts.
    #[arg(long, default_value = "1,3,5")]
    pub blocks: String,
}

const GEN_KEYS: &[&str] = &[
    "count", "val", "test", "rows", "cols", "span_prob", "multiline_prob", "width", "height", "max_elements", "distort",
    "jitter", "bend",
];
const TRAIN_KEYS: &[&str] = &[
    "lr", "patience", "lr_decay", "epochs", "seed", "lambda1", "lambda2", "margin", "samples", "threshold",
];
const MODEL_KEYS: &[&str] = &[
    "d", "image_size", "conv_channels", "vocab", "heads", "d_k", "d_v", "layers", "max_elements", "fusion",
    "zero_modalities",
];
const EVAL_KEYS: &[&str] = &["split", "sweep"];

type Settings = BTreeMap<String, String>;

fn load_settings(config: Option<&Path>) -> Result<Settings> {
    let Some(path) = config else {
        return Ok(Settings::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kv = parse_kv(&text)?;
    for k in kv.keys() {
        let known = [GEN_KEYS, TRAIN_KEYS, MODEL_KEYS, EVAL_KEYS].iter().any(|g| g.contains(&k.as_str()));
        if !known {
            return Err(Error::Usage(format!("{}: unknown setting {k:?}", path.display())));
        }
    }
    Ok(kv)
}

fn put<T: ToString>(s: &mut Settings, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        s.insert(key.to_string(), v.to_string());
    }
}

fn pick(s: &Settings, keys: &[&str]) -> Settings {
    s.iter()
        .filter(|(k, _)| keys.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn range(key: &str, v: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("{key} expects N or MIN-MAX, got {v:?}"));
    let (a, b) = v.split_once('-').unwrap_or((v, v));
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a, b))
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Usage(format!("{key}: cannot parse {v:?}")))
}

fn corpus_spec(s: &Settings) -> Result<CorpusSpec> {
    let mut spec = CorpusSpec::default();
    for (k, v) in s {
        match k.as_str() {
            "seed" => spec.seed = parse(k, v)?,
            "count" => spec.count = parse(k, v)?,
            "val" => spec.val = parse(k, v)?,
            "test" => spec.test = parse(k, v)?,
            "rows" => spec.gen.rows = range(k, v)?,
            "cols" => spec.gen.cols = range(k, v)?,
            "span_prob" => spec.gen.span_prob = parse(k, v)?,
            "multiline_prob" => spec.gen.multiline_prob = parse(k, v)?,
            "width" => spec.gen.width = parse(k, v)?,
            "height" => spec.gen.height = parse(k, v)?,
            "max_elements" => spec.gen.max_elements = parse(k, v)?,
            "distort" => spec.distortion = Distortion::parse(v)?,
            "jitter" => spec.jitter = parse(k, v)?,
            "bend" => spec.bend = parse(k, v)?,
            _ => {}
        }
    }
    Ok(spec)
}

fn require_seed(s: &Settings) -> Result<()> {
    if s.contains_key("seed") {
        Ok(())
    } else {
        Err(Error::Usage("a seed is required (--seed or seed= in the config file)".into()))
    }
}

fn model_flags(s: &mut Settings, f: &ModelFlags) {
    put(s, "seed", &f.seed);
    put(s, "epochs", &f.epochs);
    put(s, "lr", &f.lr);
    put(s, "patience", &f.patience);
    put(s, "samples", &f.samples);
    put(s, "layers", &f.layers);
    put(s, "fusion", &f.fusion);
    put(s, "zero_modalities", &f.zero);
    put(s, "threshold", &f.threshold);
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut keys = TRAIN_KEYS.to_vec();
    keys.extend_from_slice(MODEL_KEYS);
    cfg.apply_kv(&pick(s, &keys))?;
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_dir(out: &Path, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = explicit.clone().unwrap_or_else(|| out.join("corpus"));
    if !dir.join("manifest.tsv").is_file() {
        return Err(Error::Data(format!("no corpus at {} (manifest.tsv missing)", dir.display())));
    }
    Ok(dir)
}

fn checkpoint_dir(out: &Path, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = explicit.clone().unwrap_or_else(|| out.join("checkpoints"));
    for f in ["model.ncgm", "model.cfg"] {
        if !dir.join(f).is_file() {
            return Err(Error::Usage(format!("no checkpoint at {} ({f} missing)", dir.display())));
        }
    }
    Ok(dir)
}

fn load_split(dir: &Path, split: Option<Split>) -> Result<Vec<(String, TableSample)>> {
    read_manifest(dir)?
        .into_iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| Ok((r.id.clone(), r.load()?)))
        .collect()
}

fn parse_split(v: Option<&String>) -> Result<Option<Split>> {
    match v.map(String::as_str) {
        None | Some("all") => Ok(None),
        Some(s) => Split::parse(s).map(Some).map_err(|e| Error::Usage(e.to_string())),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_model(dir: &Path) -> Result<(ModelConfig, ModelParams)> {
    Ok((ModelConfig::load(dir.join("model.cfg"))?, ModelParams::load(dir.join("model.ncgm"))?))
}

/// Parses `args` and runs; the returned code is the process exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut s = load_settings(cli.config.as_deref())?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::Generate(a) => {
            put(&mut s, "seed", &a.seed);
            put(&mut s, "count", &a.count);
            put(&mut s, "val", &a.val);
            put(&mut s, "test", &a.test);
            put(&mut s, "rows", &a.rows);
            put(&mut s, "cols", &a.cols);
            put(&mut s, "span_prob", &a.span_prob);
            put(&mut s, "multiline_prob", &a.multiline_prob);
            put(&mut s, "width", &a.width);
            put(&mut s, "height", &a.height);
            put(&mut s, "max_elements", &a.max_elements);
            put(&mut s, "distort", &a.distort);
            put(&mut s, "jitter", &a.jitter);
            put(&mut s, "bend", &a.bend);
            require_seed(&s)?;
            cmd_generate(&cli.out, &corpus_spec(&s)?, exec)
        }
        Command::Train(a) => {
            model_flags(&mut s, &a.model);
            require_seed(&s)?;
            let corpus = corpus_dir(&cli.out, &a.model.corpus)?;
            cmd_train(&cli.out, &corpus, &train_config(&s)?, exec)
        }
        Command::Eval(a) => {
            put(&mut s, "threshold", &a.threshold);
            put(&mut s, "split", &a.split);
            put(&mut s, "sweep", &a.sweep);
            let corpus = corpus_dir(&cli.out, &a.corpus)?;
            let ckpt = if a.gt { None } else { Some(checkpoint_dir(&cli.out, &a.checkpoint)?) };
            let threshold: f64 = s.get("threshold").map_or(Ok(0.5), |v| parse("threshold", v))?;
            let sweep: Vec<f64> = match s.get("sweep") {
                Some(v) => v.split(',').map(|t| parse("sweep", t.trim())).collect::<Result<_>>()?,
                None => Vec::new(),
            };
            let split = parse_split(s.get("split"))?;
            cmd_eval(&cli.out, &corpus, ckpt.as_deref(), split, threshold, &sweep, exec)
        }
        Command::Analyze(a) => {
            put(&mut s, "split", &a.split);
            let corpus = corpus_dir(&cli.out, &a.corpus)?;
            let ckpt = checkpoint_dir(&cli.out, &a.checkpoint)?;
            cmd_analyze(&cli.out, &corpus, &ckpt, parse_split(s.get("split"))?, a.sample, exec)
        }
        Command::Sweep(a) => {
            model_flags(&mut s, &a.model);
            require_seed(&s)?;
            let corpus = corpus_dir(&cli.out, &a.model.corpus)?;
            let blocks: Vec<usize> = a
                .blocks
                .split(',')
                .map(|t| parse("blocks", t.trim()))
                .collect::<Result<_>>()?;
            cmd_sweep(&cli.out, &corpus, &train_config(&s)?, &blocks, exec)
        }
    }
}

pub fn cmd_generate(out: &Path, spec: &CorpusSpec, exec: Exec) -> Result<()> {
    let entries = generate_corpus(spec, exec)?;
    let dir = out.join("corpus");
    write_corpus(&dir, &entries)?;
    println!("wrote {} tables to {}", entries.len(), dir.display());
    Ok(())
}

fn samples_of(rows: Vec<(String, TableSample)>) -> Vec<TableSample> {
    rows.into_iter().map(|(_, s)| s).collect()
}

pub fn cmd_train(out: &Path, corpus: &Path, cfg: &TrainConfig, exec: Exec) -> Result<()> {
    let train = samples_of(load_split(corpus, Some(Split::Train))?);
    let val = samples_of(load_split(corpus, Some(Split::Val))?);
    let ckpt = out.join("checkpoints");
    let log_path = out.join("reports").join("train.log");
    let outcome = trainer::train(&train, &val, cfg, Some(&ckpt), exec)?;
    let mut log = String::new();
    for e in &outcome.log {
        let _ = writeln!(log, "{e}");
    }
    write_file(&log_path, &log)?;
    if let Some(last) = outcome.log.last() {
        println!("{last}");
    }
    println!("checkpoint in {}, log in {}", ckpt.display(), log_path.display());
    Ok(())
}

/// Components of each thresholded relation graph, summed over tables.
pub fn component_counts(probs: &[[Vec<f64>; 3]], sizes: &[usize], threshold: f64) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for (p, &n) in probs.iter().zip(sizes) {
        for k in 0..3 {
            out[k] += connected_components(&threshold_graph(&p[k], n, threshold)?).len();
        }
    }
    Ok(out)
}

pub fn cmd_eval(
    out: &Path,
    corpus: &Path,
    checkpoint: Option<&Path>,
    split: Option<Split>,
    threshold: f64,
    sweep: &[f64],
    exec: Exec,
) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Usage(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let data = samples_of(load_split(corpus, split)?);
    if data.is_empty() {
        return Err(Error::Usage("the selected split holds no tables".into()));
    }
    let probs: Vec<[Vec<f64>; 3]> = match checkpoint {
        None => data
            .iter()
            .map(|s| Relation::ALL.map(|r| s.relations.get(r).to_probabilities()))
            .collect(),
        Some(dir) => {
            let (cfg, params) = load_model(dir)?;
            let preds: Vec<Result<[Vec<f64>; 3]>> =
                exec.map(&data, |s| model::predict_sample(&params, &cfg, s).map(|p| p.probs));
            preds.into_iter().collect::<Result<_>>()?
        }
    };
    let report = score(&data, &probs, threshold, exec)?;
    let reports = out.join("reports");
    write_file(&reports.join("metrics.txt"), &format!("{report}\n"))?;
    write_file(&reports.join("metrics.kv"), &report.to_kv())?;
    println!("{report}");

    if !sweep.is_empty() {
        let sizes: Vec<usize> = data.iter().map(TableSample::n).collect();
        let mut text = String::from("threshold\tcell_components\trow_components\tcol_components\tf1\n");
        for &t in sweep {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Usage(format!("sweep threshold {t} outside (0, 1)")));
            }
            let c = component_counts(&probs, &sizes, t)?;
            let f1 = score(&data, &probs, t, exec)?.overall_f1();
            let _ = writeln!(text, "{t}\t{}\t{}\t{}\t{f1:.6}", c[0], c[1], c[2]);
        }
        write_file(&reports.join("threshold_sweep.tsv"), &text)?;
        print!("{text}");
    }
    Ok(())
}

fn score(data: &[TableSample], probs: &[[Vec<f64>; 3]], threshold: f64, exec: Exec) -> Result<MetricsReport> {
    let items: Vec<_> = data
        .iter()
        .zip(probs)
        .map(|(s, p)| {
            let pred = model::Prediction {
                n: s.n(),
                probs: p.clone(),
                maps: Vec::new(),
            };
            (pred.to_relations(threshold), s)
        })
        .collect();
    metrics::report_from_relations(&items, threshold, exec)
}

/// Binary PGM of one head: weights scaled so the map maximum is 255.
pub fn heatmap_pgm(map: &AttentionMap, head: usize) -> Vec<u8> {
    let (q, k) = (map.queries(), map.keys());
    let rows: Vec<&[f64]> = (0..q).map(|i| map.row(head, i)).collect();
    let peak = rows.iter().flat_map(|r| r.iter().copied()).fold(0.0f64, f64::max);
    let mut out = format!("P5\n{k} {q}\n255\n").into_bytes();
    for r in rows {
        for &w in r {
            let v = if peak > 0.0 { (w / peak * 255.0).round() } else { 0.0 };
            out.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn heatmap_name(map: &AttentionMap, head: usize) -> String {
    format!("block{}_{}_{}_head{}.pgm", map.layer, map.stage.name(), map.modality, head)
}

pub fn cmd_analyze(
    out: &Path,
    corpus: &Path,
    checkpoint: &Path,
    split: Option<Split>,
    index: usize,
    exec: Exec,
) -> Result<()> {
    let (cfg, params) = load_model(checkpoint)?;
    let data = load_split(corpus, split)?;
    let (id, chosen) = data
        .get(index)
        .ok_or_else(|| Error::Usage(format!("sample {index} out of range ({} tables)", data.len())))?;
    let maps_dir = out.join("maps");
    std::fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;

    let pred = model::predict_sample(&params, &cfg, chosen)?;
    let mut index_text = String::from("file\tblock\tstage\tmodality\thead\tqueries\tkeys\n");
    for m in &pred.maps {
        for h in 0..m.heads() {
            let name = heatmap_name(m, h);
            let path = maps_dir.join(&name);
            std::fs::write(&path, heatmap_pgm(m, h)).map_err(|e| Error::io(&path, e))?;
            let _ = writeln!(
                index_text,
                "{name}\t{}\t{}\t{}\t{h}\t{}\t{}",
                m.layer,
                m.stage.name(),
                m.modality,
                m.queries(),
                m.keys()
            );
        }
    }
    write_file(&maps_dir.join("index.tsv"), &index_text)?;

    let samples: Vec<&TableSample> = data.iter().map(|(_, s)| s).collect();
    let runs: Vec<Result<Vec<AttentionMap>>> =
        exec.map(&samples, |s| model::predict_sample(&params, &cfg, s).map(|p| p.maps));
    let runs: Vec<Vec<AttentionMap>> = runs.into_iter().collect::<Result<_>>()?;
    let mut curves = String::from("block\tmodality\tstage\tjsd\n");
    for p in jsd_curves(&runs)? {
        let _ = writeln!(curves, "{}\t{}\t{}\t{:.9}", p.layer, p.modality, p.stage.name(), p.value);
    }
    write_file(&maps_dir.join("jsd_curves.tsv"), &curves)?;
    println!(
        "{} map sets from {id} and diversity over {} tables in {}",
        pred.maps.len(),
        runs.len(),
        maps_dir.display()
    );
    Ok(())
}

pub fn cmd_sweep(out: &Path, corpus: &Path, cfg: &TrainConfig, blocks: &[usize], exec: Exec) -> Result<()> {
    let train = samples_of(load_split(corpus, Some(Split::Train))?);
    let test = samples_of(load_split(corpus, Some(Split::Test))?);
    let rows = block_sweep(blocks, &train, &test, cfg, exec)?;
    let table = sweep_table(&rows);
    write_file(&out.join("reports").join("block_sweep.txt"), &table)?;
    print!("{table}");
    Ok(())
}
