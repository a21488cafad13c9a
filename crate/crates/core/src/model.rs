//! The assembled network: embedders, collaborative blocks and relation heads.

use std::collections::BTreeMap;
use std::path::Path;

use crate::attention::{AttentionConfig, AttentionMap};
use crate::collab::{self, CollabConfig, FusionMode};
use crate::datamodel::{AdjMatrix, Relation, RelationMatrices, TableSample};
use crate::error::{Error, Result};
use crate::features::{self, FeatureConfig, Modality, PreparedInputs};
use crate::head::{self, RelationLogits};
use crate::nn::Init;
use crate::tensor::{ModelParams, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub collab: CollabConfig,
    /// Modalities replaced by zeros, indexed like [`Modality::ALL`].
    pub zeroed: [bool; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            features: FeatureConfig::default(),
            collab: CollabConfig::default(),
            zeroed: [false; 3],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.collab.validate()?;
        if self.features.d != self.collab.d() {
            return Err(Error::contract(format!(
                "embedding width {} differs from attention width {}",
                self.features.d,
                self.collab.d()
            )));
        }
        if self.features.image_size < 4 || self.features.conv_channels == 0 || self.features.vocab == 0 {
            return Err(Error::contract("image_size must be at least 4; channels and vocab positive"));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let a = &self.collab.attention;
        let zeroed: Vec<&str> = Modality::ALL
            .iter()
            .filter(|m| self.zeroed[m.index()])
            .map(|m| m.name())
            .collect();
        let zeroed = if zeroed.is_empty() { "none".to_string() } else { zeroed.join(",") };
        format!(
            "d={}\nimage_size={}\nconv_channels={}\nvocab={}\nheads={}\nd_k={}\nd_v={}\nlayers={}\nmax_elements={}\nfusion={}\nzero_modalities={}\n",
            self.features.d,
            self.features.image_size,
            self.features.conv_channels,
            self.features.vocab,
            a.heads,
            a.d_k,
            a.d_v,
            self.collab.layers,
            self.collab.max_elements,
            self.collab.fusion.name(),
            zeroed
        )
    }

    /// Applies `key=value` pairs on top of `self`; unknown keys are an error.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            let num = || -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Usage(format!("{k} expects a non-negative integer, got {v:?}")))
            };
            match k.as_str() {
                "d" => {
                    self.features.d = num()?;
                    self.collab.attention.d_model = self.features.d;
                }
                "image_size" => self.features.image_size = num()?,
                "conv_channels" => self.features.conv_channels = num()?,
                "vocab" => self.features.vocab = num()?,
                "heads" => self.collab.attention.heads = num()?,
                "d_k" => self.collab.attention.d_k = num()?,
                "d_v" => self.collab.attention.d_v = num()?,
                "layers" => self.collab.layers = num()?,
                "max_elements" => self.collab.max_elements = num()?,
                "fusion" => self.collab.fusion = FusionMode::parse(v)?,
                "zero_modalities" => self.zeroed = parse_zeroed(v)?,
                other => return Err(Error::Usage(format!("unknown model setting {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.apply_kv(&parse_kv(text)?)?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelConfig::from_kv_text(&text)
    }
}

pub fn parse_zeroed(v: &str) -> Result<[bool; 3]> {
    let mut out = [false; 3];
    if v == "none" || v.is_empty() {
        return Ok(out);
    }
    for name in v.split(',') {
        let m = Modality::ALL
            .into_iter()
            .find(|m| m.name() == name.trim())
            .ok_or_else(|| Error::Usage(format!("unknown modality {name:?}")))?;
        out[m.index()] = true;
    }
    Ok(out)
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::new();
    let mut init = Init::new(seed);
    features::init_features(&mut params, &mut init, &cfg.features)?;
    collab::init_blocks(&mut params, &mut init, &cfg.collab)?;
    head::init_heads(&mut params, &mut init, cfg.collab.fused_width())?;
    Ok(params)
}

/// Fused element embeddings `E` and every attention map.
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    inputs: &PreparedInputs,
) -> Result<(Var, Vec<AttentionMap>)> {
    if inputs.n > cfg.collab.max_elements {
        return Err(Error::contract(format!(
            "table has {} elements but the model was built for at most {}",
            inputs.n, cfg.collab.max_elements
        )));
    }
    let f = features::embed(tape, params, inputs, &cfg.features, cfg.zeroed)?;
    collab::forward_blocks(tape, params, &f, &cfg.collab)
}

/// Positive-class probabilities for all `N²` ordered pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub n: usize,
    /// Row-major `N×N` per relation, indexed like [`Relation::ALL`].
    pub probs: [Vec<f64>; 3],
    pub maps: Vec<AttentionMap>,
}

impl Prediction {
    pub fn get(&self, r: Relation) -> &[f64] {
        &self.probs[r as usize]
    }

    /// Thresholded, max-symmetrized binary matrices with unit diagonal.
    pub fn to_relations(&self, threshold: f64) -> RelationMatrices {
        let n = self.n;
        let bin = |p: &[f64]| AdjMatrix::from_fn(n, |i, j| i == j || p[i * n + j].max(p[j * n + i]) >= threshold);
        RelationMatrices {
            cell: bin(self.get(Relation::Cell)),
            row: bin(self.get(Relation::Row)),
            col: bin(self.get(Relation::Col)),
        }
    }
}

pub fn predict(params: &ModelParams, cfg: &ModelConfig, inputs: &PreparedInputs) -> Result<Prediction> {
    let mut tape = Tape::new();
    let (e, maps) = encode(&mut tape, params, cfg, inputs)?;
    let batch = head::pair_embeddings(&mut tape, e)?;
    let logits: RelationLogits = head::classify_relations(&mut tape, params, &batch)?;
    let probs = Relation::ALL.map(|r| logits.positive_probabilities(&tape, r));
    Ok(Prediction {
        n: inputs.n,
        probs,
        maps,
    })
}

pub fn predict_sample(params: &ModelParams, cfg: &ModelConfig, sample: &TableSample) -> Result<Prediction> {
    predict(params, cfg, &PreparedInputs::new(sample, &cfg.features)?)
}

/// Small configuration for tests and quick experiments.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        features: FeatureConfig {
            d: 8,
            image_size: 32,
            conv_channels: 2,
            vocab: 64,
        },
        collab: CollabConfig {
            attention: AttentionConfig {
                heads: 2,
                d_model: 8,
                d_k: 4,
                d_v: 4,
            },
            layers: 1,
            max_elements: 16,
            fusion: FusionMode::Ncgm,
        },
        zeroed: [false; 3],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::default();
        cfg.collab.fusion = FusionMode::LateConcat;
        cfg.zeroed = [true, false, true];
        cfg.collab.layers = 5;
        assert_eq!(ModelConfig::from_kv_text(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn kv_rejects_unknown_keys() {
        assert!(ModelConfig::from_kv_text("depth=3").is_err());
        assert!(ModelConfig::from_kv_text("layers").is_err());
        assert!(ModelConfig::from_kv_text("zero_modalities=smell").is_err());
    }

    #[test]
    fn parameter_names_are_namespaced() {
        let p = init_params(&tiny_config(), 0).unwrap();
        assert!(p.get("block1/ece/geometry/cmha/mha/wq").is_some());
        assert!(p.get("block1/ccs/content/cmha/mc/wh").is_some());
        assert!(p.get("head/row/fc4/w").is_some());
        assert!(p.all_finite());
    }
}
