//! Collaborative blocks: edge features, the intra-modality extractor (ECE),
//! the cross-modality synthesizer (CCS), and the stacked two-stream forward.

use crate::attention::{self, AttentionConfig, AttentionMap, Stage};
use crate::error::{Error, Result};
use crate::features::{Modality, ModalityEmbeddings};
use crate::nn::{self, Init};
use crate::tensor::{ModelParams, Tape, Tensor, Var};

/// Order in which the three streams are processed within a block.
pub const STREAM_ORDER: [Modality; 3] = [Modality::Appearance, Modality::Geometry, Modality::Content];

/// How the three modality streams are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// ECE then CCS in every block; the final CCS outputs are summed.
    Ncgm,
    /// ECE only; the final ECE outputs are concatenated.
    LateConcat,
    /// The three embeddings are concatenated and projected into one stream
    /// before any block; ECE only.
    MixedEarly,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Ncgm => "ncgm",
            FusionMode::LateConcat => "late-concat",
            FusionMode::MixedEarly => "mixed-early",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ncgm" => Ok(FusionMode::Ncgm),
            "late-concat" => Ok(FusionMode::LateConcat),
            "mixed-early" => Ok(FusionMode::MixedEarly),
            other => Err(Error::Usage(format!(
                "unknown fusion mode {other:?} (expected ncgm, late-concat or mixed-early)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollabConfig {
    pub attention: AttentionConfig,
    pub layers: usize,
    /// Largest element count the compression weights are sized for.
    pub max_elements: usize,
    pub fusion: FusionMode,
}

impl Default for CollabConfig {
    fn default() -> Self {
        CollabConfig {
            attention: AttentionConfig::default(),
            layers: 3,
            max_elements: 16,
            fusion: FusionMode::Ncgm,
        }
    }
}

impl CollabConfig {
    pub fn d(&self) -> usize {
        self.attention.d_model
    }

    /// Width of the fused element embedding.
    pub fn fused_width(&self) -> usize {
        match self.fusion {
            FusionMode::LateConcat => 3 * self.d(),
            FusionMode::Ncgm | FusionMode::MixedEarly => self.d(),
        }
    }

    pub fn ece_max_group(&self) -> usize {
        attention::group_size(edge_count(self.max_elements.max(2)), self.max_elements.max(1))
    }

    /// Attention maps produced by one forward pass.
    pub fn maps_per_forward(&self) -> usize {
        match self.fusion {
            FusionMode::Ncgm => 6 * self.layers,
            FusionMode::LateConcat => 3 * self.layers,
            FusionMode::MixedEarly => self.layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.layers == 0 {
            return Err(Error::contract("at least one collaborative block is required"));
        }
        if self.max_elements == 0 {
            return Err(Error::contract("max_elements must be at least 1"));
        }
        Ok(())
    }

    /// Names of the streams that run through the blocks.
    fn streams(&self) -> Vec<&'static str> {
        match self.fusion {
            FusionMode::MixedEarly => vec!["mixed"],
            _ => STREAM_ORDER.iter().map(|m| m.name()).collect(),
        }
    }
}

pub fn edge_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Unordered pairs `i < j` in row-major order.
pub fn edge_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// One row `[x_i ‖ x_i − x_j]` per unordered pair `i < j`.
pub fn edge_features(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    if n < 2 {
        return Err(Error::contract(format!("edge features need at least 2 elements, got {n}")));
    }
    edges_from_pairs(tape, x, &edge_pairs(n))
}

fn edges_from_pairs(tape: &mut Tape, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let xi = tape.gather(x, &is)?;
    let xj = tape.gather(x, &js)?;
    let diff = tape.sub(xi, xj)?;
    tape.concat_cols(&[xi, diff])
}

pub fn init_ece(params: &mut ModelParams, init: &mut Init, prefix: &str, cfg: &CollabConfig) -> Result<()> {
    let d = cfg.d();
    nn::init_linear(params, init, &format!("{prefix}/edge"), 2 * d, d)?;
    attention::init_cmha(params, init, &format!("{prefix}/cmha"), &cfg.attention, cfg.ece_max_group(), 4 * d)
}

/// Queries are the stream's own features; keys and values are its projected
/// edge features. A single element attends to its own (zero-difference) edge.
pub fn ece_layer(tape: &mut Tape, params: &ModelParams, prefix: &str, c_prev: Var, cfg: &AttentionConfig) -> Result<(Var, Tensor)> {
    let n = tape.value(c_prev).rows();
    let edges = if n == 1 {
        edges_from_pairs(tape, c_prev, &[(0, 0)])?
    } else {
        edge_features(tape, c_prev)?
    };
    let edges = nn::linear(tape, params, &format!("{prefix}/edge"), edges)?;
    attention::cmha(tape, params, &format!("{prefix}/cmha"), c_prev, edges, edges, cfg)
}

pub fn init_ccs(params: &mut ModelParams, init: &mut Init, prefix: &str, cfg: &CollabConfig) -> Result<()> {
    let d = cfg.d();
    attention::init_cmha(params, init, &format!("{prefix}/cmha"), &cfg.attention, 2, 4 * d)
}

/// Union of two `N×d` streams with the two views of each element adjacent,
/// so compression groups `(c_a[i], c_b[i])` together.
pub fn interleave(tape: &mut Tape, c_a: Var, c_b: Var) -> Result<Var> {
    let n = tape.value(c_a).rows();
    let both = tape.concat_rows(&[c_a, c_b])?;
    let index: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
    tape.gather(both, &index)
}

pub fn ccs_layer(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    m_prev: Var,
    c_a: Var,
    c_b: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Tensor)> {
    let union = interleave(tape, c_a, c_b)?;
    attention::cmha(tape, params, &format!("{prefix}/cmha"), m_prev, union, union, cfg)
}

pub fn init_blocks(params: &mut ModelParams, init: &mut Init, cfg: &CollabConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.fusion == FusionMode::MixedEarly {
        nn::init_linear(params, init, "mixed/fc", 3 * cfg.d(), cfg.d())?;
    }
    for s in cfg.streams() {
        nn::init_layer_norm(params, &format!("input/{s}/ln"), cfg.d())?;
    }
    for l in 1..=cfg.layers {
        for s in cfg.streams() {
            init_ece(params, init, &format!("block{l}/ece/{s}"), cfg)?;
            if cfg.fusion == FusionMode::Ncgm {
                init_ccs(params, init, &format!("block{l}/ccs/{s}"), cfg)?;
            }
        }
    }
    Ok(())
}

/// Runs every block and fuses the streams into `E`. Returns the maps in
/// execution order.
pub fn forward_blocks(
    tape: &mut Tape,
    params: &ModelParams,
    f: &ModalityEmbeddings,
    cfg: &CollabConfig,
) -> Result<(Var, Vec<AttentionMap>)> {
    cfg.validate()?;
    let n = tape.value(f.geometry).rows();
    if n > cfg.max_elements {
        return Err(Error::contract(format!(
            "table has {n} elements but the model was built for at most {}",
            cfg.max_elements
        )));
    }
    let att = &cfg.attention;
    let mut maps = Vec::with_capacity(cfg.maps_per_forward());
    let record = |maps: &mut Vec<AttentionMap>, weights, layer, stage, modality: &str| {
        maps.push(AttentionMap {
            weights,
            layer,
            stage,
            modality: modality.to_string(),
        })
    };

    if cfg.fusion == FusionMode::MixedEarly {
        let cat = tape.concat_cols(&[f.appearance, f.geometry, f.content])?;
        let c = nn::linear(tape, params, "mixed/fc", cat)?;
        let mut c = nn::layer_norm(tape, params, "input/mixed/ln", c)?;
        for l in 1..=cfg.layers {
            let (next, w) = ece_layer(tape, params, &format!("block{l}/ece/mixed"), c, att)?;
            record(&mut maps, w, l, Stage::Ece, "mixed");
            c = next;
        }
        return Ok((c, maps));
    }

    // Stream inputs are normalized so that per-element differences are not
    // drowned out by the query-independent part of the first attention read.
    let mut intra = *f;
    for m in STREAM_ORDER {
        let x = nn::layer_norm(tape, params, &format!("input/{}/ln", m.name()), f.get(m))?;
        intra.set(m, x);
    }
    let mut inter = intra;
    for l in 1..=cfg.layers {
        for m in STREAM_ORDER {
            let (c, w) = ece_layer(tape, params, &format!("block{l}/ece/{}", m.name()), intra.get(m), att)?;
            record(&mut maps, w, l, Stage::Ece, m.name());
            intra.set(m, c);
        }
        if cfg.fusion == FusionMode::Ncgm {
            let mut next = inter;
            for m in STREAM_ORDER {
                let [a, b] = others(m);
                let prefix = format!("block{l}/ccs/{}", m.name());
                let (y, w) = ccs_layer(tape, params, &prefix, inter.get(m), intra.get(a), intra.get(b), att)?;
                record(&mut maps, w, l, Stage::Ccs, m.name());
                next.set(m, y);
            }
            inter = next;
        }
    }
    let fused = match cfg.fusion {
        FusionMode::Ncgm => {
            let ag = tape.add(inter.appearance, inter.geometry)?;
            tape.add(ag, inter.content)?
        }
        _ => tape.concat_cols(&[intra.appearance, intra.geometry, intra.content])?,
    };
    Ok((fused, maps))
}

/// The two streams a CCS unit reads for `m`, in processing order.
pub fn others(m: Modality) -> [Modality; 2] {
    let mut it = STREAM_ORDER.iter().copied().filter(|&o| o != m);
    [it.next().unwrap(), it.next().unwrap()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(layers: usize, fusion: FusionMode) -> CollabConfig {
        CollabConfig {
            attention: AttentionConfig {
                heads: 2,
                d_model: 4,
                d_k: 2,
                d_v: 2,
            },
            layers,
            max_elements: 6,
            fusion,
        }
    }

    fn embeddings(tape: &mut Tape, n: usize, d: usize, seed: u64) -> ModalityEmbeddings {
        let mut init = Init::new(seed);
        ModalityEmbeddings {
            geometry: tape.constant(init.uniform(&[n, d], 1.0)),
            appearance: tape.constant(init.uniform(&[n, d], 1.0)),
            content: tape.constant(init.uniform(&[n, d], 1.0)),
        }
    }

    #[test]
    fn edge_rows_follow_pair_order() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap());
        let e = edge_features(&mut t, x).unwrap();
        assert_eq!(t.value(e).to_rows(), vec![vec![1.0, -1.0], vec![1.0, -3.0], vec![2.0, -2.0]]);
        let one = t.constant(Tensor::zeros(&[1, 1]));
        assert!(edge_features(&mut t, one).is_err());
    }

    #[test]
    fn others_follow_stream_order() {
        assert_eq!(others(Modality::Appearance), [Modality::Geometry, Modality::Content]);
        assert_eq!(others(Modality::Geometry), [Modality::Appearance, Modality::Content]);
        assert_eq!(others(Modality::Content), [Modality::Appearance, Modality::Geometry]);
    }

    #[test]
    fn map_counts_per_fusion_mode() {
        for fusion in [FusionMode::Ncgm, FusionMode::LateConcat, FusionMode::MixedEarly] {
            let cfg = small_cfg(2, fusion);
            let mut p = ModelParams::new();
            init_blocks(&mut p, &mut Init::new(1), &cfg).unwrap();
            let mut t = Tape::new();
            let f = embeddings(&mut t, 5, 4, 2);
            let (e, maps) = forward_blocks(&mut t, &p, &f, &cfg).unwrap();
            assert_eq!(maps.len(), cfg.maps_per_forward());
            assert_eq!(t.value(e).shape(), &[5, cfg.fused_width()]);
            for m in &maps {
                assert_eq!(m.keys(), 5);
            }
        }
    }

    #[test]
    fn single_element_tables_run() {
        let cfg = small_cfg(1, FusionMode::Ncgm);
        let mut p = ModelParams::new();
        init_blocks(&mut p, &mut Init::new(1), &cfg).unwrap();
        let mut t = Tape::new();
        let f = embeddings(&mut t, 1, 4, 3);
        let (e, _) = forward_blocks(&mut t, &p, &f, &cfg).unwrap();
        assert!(t.value(e).is_finite());
    }

    #[test]
    fn too_many_elements_are_rejected() {
        let cfg = small_cfg(1, FusionMode::Ncgm);
        let mut p = ModelParams::new();
        init_blocks(&mut p, &mut Init::new(1), &cfg).unwrap();
        let mut t = Tape::new();
        let f = embeddings(&mut t, 7, 4, 3);
        assert!(forward_blocks(&mut t, &p, &f, &cfg).is_err());
    }
}
