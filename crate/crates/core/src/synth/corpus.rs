// Corpus generation and the on-disk layout:
//
//   <dir>/samples/<id>.json     one sample document each
//   <dir>/manifest.tsv          id, file, split, distortion, seed, elements

use std::fmt;
use std::path::{Path, PathBuf};

use super::{apply_bezier, distort_perspective, generate, sample_seed, BezierWarp, GenParams, GeneratedTable};
use crate::datamodel::{read_sample, write_sample, TableSample};
use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    None,
    Perspective,
    Bezier,
    Both,
}

impl Distortion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Distortion::None),
            "perspective" => Ok(Distortion::Perspective),
            "bezier" => Ok(Distortion::Bezier),
            "both" => Ok(Distortion::Both),
            other => Err(Error::Usage(format!(
                "unknown distortion {other:?} (expected none, perspective, bezier or both)"
            ))),
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distortion::None => "none",
            Distortion::Perspective => "perspective",
            Distortion::Bezier => "bezier",
            Distortion::Both => "both",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub gen: GenParams,
    pub distortion: Distortion,
    /// Perspective corner jitter in pixels.
    pub jitter: f64,
    /// Curve offset in pixels.
    pub bend: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            count: 20,
            val: 0,
            test: 0,
            seed: 0,
            gen: GenParams::default(),
            distortion: Distortion::None,
            jitter: 6.0,
            bend: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub split: Split,
    pub distortion: Distortion,
    pub seed: u64,
    pub table: GeneratedTable,
}

fn split_of(spec: &CorpusSpec, i: usize) -> Split {
    let train = spec.count - spec.val - spec.test;
    if i < train {
        Split::Train
    } else if i < train + spec.val {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn distort(sample: &TableSample, d: Distortion, seed: u64, jitter: f64, bend: f64) -> Result<TableSample> {
    let bezier = |s: &TableSample| -> Result<TableSample> {
        if !(bend.abs() < s.image.height as f64 / 4.0) {
            return Err(Error::Usage(format!("bend {bend} is too large for a {}-pixel image", s.image.height)));
        }
        let warp = BezierWarp::random(seed ^ 0xbe21e5, s.image.width, s.image.height, bend);
        Ok(apply_bezier(s, &warp))
    };
    match d {
        Distortion::None => Ok(sample.clone()),
        Distortion::Perspective => distort_perspective(sample, jitter, seed),
        Distortion::Bezier => bezier(sample),
        Distortion::Both => bezier(&distort_perspective(sample, jitter, seed)?),
    }
}

pub fn generate_corpus(spec: &CorpusSpec, exec: Exec) -> Result<Vec<CorpusEntry>> {
    spec.gen.validate()?;
    if spec.val + spec.test > spec.count {
        return Err(Error::Usage(format!(
            "val ({}) plus test ({}) exceeds count ({})",
            spec.val, spec.test, spec.count
        )));
    }
    exec.map_range(spec.count, |i| {
        let seed = sample_seed(spec.seed, i);
        let mut table = generate(seed, &spec.gen)?;
        table.sample = distort(&table.sample, spec.distortion, seed, spec.jitter, spec.bend)?;
        Ok(CorpusEntry {
            id: format!("t{i:05}"),
            split: split_of(spec, i),
            distortion: spec.distortion,
            seed,
            table,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_corpus(dir: impl AsRef<Path>, entries: &[CorpusEntry]) -> Result<()> {
    let dir = dir.as_ref();
    let samples = dir.join("samples");
    std::fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    let mut manifest = String::from("id\tfile\tsplit\tdistortion\tseed\telements\n");
    for e in entries {
        let file = format!("samples/{}.json", e.id);
        write_sample(dir.join(&file), &e.table.sample)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id,
            file,
            e.split.name(),
            e.distortion,
            e.seed,
            e.table.sample.n()
        ));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub file: PathBuf,
    pub split: Split,
    pub distortion: Distortion,
}

impl ManifestRow {
    pub fn load(&self) -> Result<TableSample> {
        read_sample(&self.file)
    }
}

/// Manifest rows with `file` resolved against `dir`.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 4 {
            return Err(Error::data(format!("{}: line {} has {} fields", path.display(), no + 1, f.len())));
        }
        rows.push(ManifestRow {
            id: f[0].to_string(),
            file: dir.join(f[1]),
            split: Split::parse(f[2])?,
            distortion: Distortion::parse(f[3]).map_err(|e| Error::data(e.to_string()))?,
        });
    }
    Ok(rows)
}
