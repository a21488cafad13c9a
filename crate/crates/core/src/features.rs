//! Per-element geometry, appearance and content embeddings.
//!
//! Everything that does not depend on parameters (normalized box features,
//! the resized raster, the pooling matrix, token ids) is computed once by
//! [`PreparedInputs::new`] so training can reuse it across epochs.

use crate::datamodel::{BoundingBox, TableSample};
use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::tensor::{ModelParams, Tape, Tensor, Var};

pub const CONTENT_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Geometry,
    Appearance,
    Content,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Geometry, Modality::Appearance, Modality::Content];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Geometry => "geometry",
            Modality::Appearance => "appearance",
            Modality::Content => "content",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub d: usize,
    /// Side of the square raster fed to the convolutions.
    pub image_size: usize,
    pub conv_channels: usize,
    pub vocab: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            d: 64,
            image_size: 512,
            conv_channels: 8,
            vocab: 4096,
        }
    }
}

impl FeatureConfig {
    /// Side of the feature map after two stride-2 convolutions.
    pub fn feature_side(&self) -> usize {
        self.image_size.div_ceil(2).div_ceil(2)
    }
}

/// The three `N×d` embedding streams, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct ModalityEmbeddings {
    pub geometry: Var,
    pub appearance: Var,
    pub content: Var,
}

impl ModalityEmbeddings {
    pub fn get(&self, m: Modality) -> Var {
        match m {
            Modality::Geometry => self.geometry,
            Modality::Appearance => self.appearance,
            Modality::Content => self.content,
        }
    }

    pub fn set(&mut self, m: Modality, v: Var) {
        match m {
            Modality::Geometry => self.geometry = v,
            Modality::Appearance => self.appearance = v,
            Modality::Content => self.content = v,
        }
    }
}

/// 32-bit FNV-1a.
fn fnv1a(s: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in s.bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub fn token_id(token: &str, vocab: usize) -> usize {
    fnv1a(token) as usize % vocab
}

/// `[x/W, y/H, w/W, h/H]` per box.
pub fn normalized_boxes(boxes: &[BoundingBox], width: f64, height: f64) -> Result<Tensor> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::contract(format!("image size must be positive, got {width}x{height}")));
    }
    if boxes.is_empty() {
        return Err(Error::contract("no element boxes"));
    }
    const SLACK: f64 = 1e-6;
    let mut data = Vec::with_capacity(boxes.len() * 4);
    for (i, b) in boxes.iter().enumerate() {
        let inside = b.w > 0.0
            && b.h > 0.0
            && b.left() >= -SLACK
            && b.top() >= -SLACK
            && b.right() <= width + SLACK
            && b.bottom() <= height + SLACK;
        if !inside {
            return Err(Error::contract(format!(
                "box {i} {b:?} lies outside the {width}x{height} image"
            )));
        }
        data.extend([b.x / width, b.y / height, b.w / width, b.h / height]);
    }
    Ok(Tensor::from_parts(vec![boxes.len(), 4], data))
}

/// Averaging matrix `N×(side·side)` from boxes to feature cells.
///
/// A box averages the cells whose centers fall inside it; a box too small to
/// contain any center takes the cell nearest its own center.
pub fn pooling_matrix(boxes: &[BoundingBox], width: f64, height: f64, side: usize) -> Tensor {
    let cells = side * side;
    let mut m = Tensor::zeros(&[boxes.len(), cells]);
    let s = side as f64;
    let range = |lo: f64, hi: f64| {
        let lo = lo.ceil().max(0.0);
        let hi = hi.floor().min(s - 1.0);
        (lo <= hi).then_some(lo as usize..=hi as usize)
    };
    for (i, b) in boxes.iter().enumerate() {
        let cols = range(b.left() / width * s - 0.5, b.right() / width * s - 0.5);
        let rows = range(b.top() / height * s - 0.5, b.bottom() / height * s - 0.5);
        let covered: Vec<usize> = match (rows, cols) {
            (Some(rows), Some(cols)) => rows.flat_map(|r| cols.clone().map(move |c| r * side + c)).collect(),
            _ => Vec::new(),
        };
        if covered.is_empty() {
            let c = ((b.x / width * s - 0.5).round().clamp(0.0, s - 1.0)) as usize;
            let r = ((b.y / height * s - 0.5).round().clamp(0.0, s - 1.0)) as usize;
            m.set(i, r * side + c, 1.0);
        } else {
            let wgt = 1.0 / covered.len() as f64;
            for k in covered {
                m.set(i, k, wgt);
            }
        }
    }
    m
}

/// Parameter-free inputs of one sample.
#[derive(Clone, Debug)]
pub struct PreparedInputs {
    pub n: usize,
    pub geometry: Tensor,
    /// Resized raster as a `(side·side)×1` column of intensities in [0, 1].
    pub raster: Tensor,
    pub pooling: Tensor,
    pub tokens: Vec<Vec<usize>>,
}

impl PreparedInputs {
    pub fn new(sample: &TableSample, cfg: &FeatureConfig) -> Result<Self> {
        let (w, h) = (sample.image.width as f64, sample.image.height as f64);
        if sample.image.width == 0 || sample.image.height == 0 {
            return Err(Error::contract("empty image"));
        }
        let boxes: Vec<BoundingBox> = sample.elements.iter().map(|e| e.bbox).collect();
        let geometry = normalized_boxes(&boxes, w, h)?;
        let resized = sample.image.resized(cfg.image_size, cfg.image_size);
        let raster = Tensor::from_parts(
            vec![cfg.image_size * cfg.image_size, 1],
            resized.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        );
        let pooling = pooling_matrix(&boxes, w, h, cfg.feature_side());
        let tokens = sample
            .elements
            .iter()
            .map(|e| e.text.iter().map(|t| token_id(t, cfg.vocab)).collect())
            .collect();
        Ok(PreparedInputs {
            n: boxes.len(),
            geometry,
            raster,
            pooling,
            tokens,
        })
    }
}

pub fn init_features(params: &mut ModelParams, init: &mut Init, cfg: &FeatureConfig) -> Result<()> {
    let (d, c) = (cfg.d, cfg.conv_channels);
    nn::init_linear(params, init, "embed/geometry/fc", 4, d)?;
    nn::init_linear(params, init, "embed/appearance/conv1", 9, c)?;
    nn::init_linear(params, init, "embed/appearance/conv2", 9 * c, c)?;
    nn::init_linear(params, init, "embed/appearance/fc", c, d)?;
    params.insert("embed/content/table", init.uniform(&[cfg.vocab, d], 0.5))?;
    nn::init_linear(params, init, "embed/content/conv", CONTENT_KERNEL * d, d)
}

pub fn geometry_embed(tape: &mut Tape, params: &ModelParams, normalized: &Tensor) -> Result<Var> {
    let x = tape.constant(normalized.clone());
    nn::linear(tape, params, "embed/geometry/fc", x)
}

pub fn appearance_embed(tape: &mut Tape, params: &ModelParams, inputs: &PreparedInputs, cfg: &FeatureConfig) -> Result<Var> {
    let side = cfg.image_size;
    let x = tape.constant(inputs.raster.clone());
    let w1 = tape.param(params, "embed/appearance/conv1/w")?;
    let b1 = tape.param(params, "embed/appearance/conv1/b")?;
    let h1 = tape.conv3x3_s2(x, w1, b1, side, side)?;
    let h1 = tape.relu(h1);
    let side1 = side.div_ceil(2);
    let w2 = tape.param(params, "embed/appearance/conv2/w")?;
    let b2 = tape.param(params, "embed/appearance/conv2/b")?;
    let h2 = tape.conv3x3_s2(h1, w2, b2, side1, side1)?;
    let h2 = tape.relu(h2);
    let pool = tape.constant(inputs.pooling.clone());
    let pooled = tape.matmul(pool, h2)?;
    nn::linear(tape, params, "embed/appearance/fc", pooled)
}

/// Hashed token lookup, width-7 convolution over the right-padded sequence,
/// then max over positions.
pub fn content_embed(tape: &mut Tape, params: &ModelParams, tokens: &[Vec<usize>]) -> Result<Var> {
    let table = tape.param(params, "embed/content/table")?;
    let d = tape.value(table).cols();
    let mut index = Vec::new();
    let mut windows = Vec::with_capacity(tokens.len());
    for seq in tokens {
        let padded = seq.len().max(CONTENT_KERNEL);
        let count = padded - CONTENT_KERNEL + 1;
        for start in 0..count {
            index.extend((start..start + CONTENT_KERNEL).map(|p| seq.get(p).copied()));
        }
        windows.push(count);
    }
    let total: usize = windows.iter().sum();
    let rows = tape.gather_rows(table, index)?;
    let patches = tape.reshape(rows, vec![total, CONTENT_KERNEL * d])?;
    let conv = nn::linear(tape, params, "embed/content/conv", patches)?;
    tape.segment_max(conv, &windows)
}

/// All three embeddings; modalities flagged in `zeroed` become zero matrices.
pub fn embed(
    tape: &mut Tape,
    params: &ModelParams,
    inputs: &PreparedInputs,
    cfg: &FeatureConfig,
    zeroed: [bool; 3],
) -> Result<ModalityEmbeddings> {
    let zero = |tape: &mut Tape| tape.constant(Tensor::zeros(&[inputs.n, cfg.d]));
    let geometry = if zeroed[0] {
        zero(tape)
    } else {
        geometry_embed(tape, params, &inputs.geometry)?
    };
    let appearance = if zeroed[1] {
        zero(tape)
    } else {
        appearance_embed(tape, params, inputs, cfg)?
    };
    let content = if zeroed[2] {
        zero(tape)
    } else {
        content_embed(tape, params, &inputs.tokens)?
    };
    Ok(ModalityEmbeddings {
        geometry,
        appearance,
        content,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{build_adjacency, Raster, Span, TableElement};

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox { x, y, w, h }
    }

    #[test]
    fn geometry_identity_projection() {
        let mut p = ModelParams::new();
        p.insert("embed/geometry/fc/w", Tensor::identity(4)).unwrap();
        p.insert("embed/geometry/fc/b", Tensor::zeros(&[4])).unwrap();
        let g = normalized_boxes(&[bx(50.0, 20.0, 25.0, 5.0)], 100.0, 40.0).unwrap();
        let mut t = Tape::new();
        let e = geometry_embed(&mut t, &p, &g).unwrap();
        assert_eq!(t.value(e).data(), &[0.5, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn geometry_rejects_outside_boxes() {
        let err = normalized_boxes(&[bx(5.0, 5.0, 4.0, 4.0), bx(99.0, 5.0, 4.0, 4.0)], 100.0, 40.0).unwrap_err();
        assert!(err.to_string().contains("box 1"));
    }

    #[test]
    fn pooling_matches_brute_force_cover() {
        let side = 8;
        let boxes = [bx(50.0, 50.0, 40.0, 30.0), bx(3.0, 97.0, 2.0, 2.0), bx(10.0, 10.0, 20.0, 20.0)];
        let m = pooling_matrix(&boxes, 100.0, 100.0, side);
        for (i, b) in boxes.iter().enumerate() {
            let mut covered = Vec::new();
            for r in 0..side {
                for c in 0..side {
                    let (cx, cy) = ((c as f64 + 0.5) * 100.0 / 8.0, (r as f64 + 0.5) * 100.0 / 8.0);
                    if cx >= b.left() && cx <= b.right() && cy >= b.top() && cy <= b.bottom() {
                        covered.push(r * side + c);
                    }
                }
            }
            let row = m.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if covered.is_empty() {
                assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 1);
            } else {
                for (k, &v) in row.iter().enumerate() {
                    let want = if covered.contains(&k) { 1.0 / covered.len() as f64 } else { 0.0 };
                    assert!((v - want).abs() < 1e-12, "box {i} cell {k}");
                }
            }
        }
    }

    #[test]
    fn single_token_content_matches_hand_convolution() {
        let mut p = ModelParams::new();
        let mut table = Tensor::zeros(&[16, 2]);
        let id = token_id("x", 16);
        table.set(id, 0, 1.5);
        table.set(id, 1, -2.0);
        p.insert("embed/content/table", table).unwrap();
        // Kernel rows: position 0 maps (a, b) -> (a, -b); other positions zero.
        let mut w = Tensor::zeros(&[14, 2]);
        w.set(0, 0, 1.0);
        w.set(1, 1, -1.0);
        p.insert("embed/content/conv/w", w).unwrap();
        p.insert("embed/content/conv/b", Tensor::new(vec![2], vec![0.1, 0.2]).unwrap()).unwrap();
        let mut t = Tape::new();
        let e = content_embed(&mut t, &p, &[vec![id], vec![]]).unwrap();
        assert_eq!(t.value(e).row(0), &[1.6, 2.2]);
        assert_eq!(t.value(e).row(1), &[0.1, 0.2]);
    }

    #[test]
    fn zero_image_gives_zero_appearance() {
        let cfg = FeatureConfig {
            d: 4,
            image_size: 16,
            conv_channels: 2,
            vocab: 8,
        };
        let mut p = ModelParams::new();
        init_features(&mut p, &mut Init::new(0), &cfg).unwrap();
        let elements = vec![
            TableElement {
                bbox: bx(10.0, 10.0, 8.0, 4.0),
                text: vec![],
                span: Some(Span::cell(0, 0)),
            },
            TableElement {
                bbox: bx(30.0, 10.0, 8.0, 4.0),
                text: vec![],
                span: Some(Span::cell(0, 1)),
            },
        ];
        let sample = TableSample {
            image: Raster::new(40, 20, 0),
            relations: build_adjacency(&elements).unwrap(),
            elements,
        };
        let inputs = PreparedInputs::new(&sample, &cfg).unwrap();
        let mut t = Tape::new();
        let e = appearance_embed(&mut t, &p, &inputs, &cfg).unwrap();
        assert!(t.value(e).data().iter().all(|&v| v == 0.0));
    }
}
