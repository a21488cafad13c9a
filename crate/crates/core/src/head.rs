//! Pairwise relation heads, Monte Carlo pair sampling and the training loss.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{Relation, RelationMatrices};
use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::tensor::{ModelParams, Tape, Tensor, Var};

pub const HEAD_HIDDEN: usize = 256;
const HEAD_LAYERS: usize = 4;

/// Concatenated pair vectors `e_i ‖ e_j`.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    pub vectors: Var,
}

/// All `N²` ordered pairs, self-pairs included, row-major.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect()
}

pub fn pair_embeddings(tape: &mut Tape, e: Var) -> Result<PairBatch> {
    let n = tape.value(e).rows();
    select_pairs(tape, e, all_pairs(n))
}

pub fn select_pairs(tape: &mut Tape, e: Var, pairs: Vec<(usize, usize)>) -> Result<PairBatch> {
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let ei = tape.gather(e, &is)?;
    let ej = tape.gather(e, &js)?;
    let vectors = tape.concat_cols(&[ei, ej])?;
    Ok(PairBatch { pairs, vectors })
}

fn head_prefix(r: Relation, layer: usize) -> String {
    format!("head/{}/fc{layer}", r.name())
}

pub fn init_heads(params: &mut ModelParams, init: &mut Init, fused_width: usize) -> Result<()> {
    for r in Relation::ALL {
        let widths = [2 * fused_width, HEAD_HIDDEN, HEAD_HIDDEN, HEAD_HIDDEN, 2];
        for layer in 0..HEAD_LAYERS {
            nn::init_linear(params, init, &head_prefix(r, layer + 1), widths[layer], widths[layer + 1])?;
        }
    }
    Ok(())
}

/// Two-class logits for one relation.
pub fn relation_logits(tape: &mut Tape, params: &ModelParams, r: Relation, u: Var) -> Result<Var> {
    let want = params
        .get(&format!("{}/w", head_prefix(r, 1)))
        .map(|w| w.rows())
        .ok_or_else(|| Error::contract(format!("no {} head in parameters", r.name())))?;
    let have = tape.value(u).cols();
    if want != have {
        return Err(Error::contract(format!(
            "pair vectors are {have} wide but the {} head expects {want}",
            r.name()
        )));
    }
    let mut h = u;
    for layer in 1..=HEAD_LAYERS {
        h = nn::linear(tape, params, &head_prefix(r, layer), h)?;
        if layer < HEAD_LAYERS {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Logits for all three relations, indexed like [`Relation::ALL`].
#[derive(Clone, Copy, Debug)]
pub struct RelationLogits {
    pub logits: [Var; 3],
}

impl RelationLogits {
    pub fn get(&self, r: Relation) -> Var {
        self.logits[r as usize]
    }

    /// Softmax probability of the positive class per pair.
    pub fn positive_probabilities(&self, tape: &Tape, r: Relation) -> Vec<f64> {
        tape.value(self.get(r))
            .data()
            .chunks(2)
            .map(|z| {
                let m = z[0].max(z[1]);
                let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
                b / (a + b)
            })
            .collect()
    }
}

pub fn classify_relations(tape: &mut Tape, params: &ModelParams, batch: &PairBatch) -> Result<RelationLogits> {
    let mut logits = Vec::with_capacity(3);
    for r in Relation::ALL {
        logits.push(relation_logits(tape, params, r, batch.vectors)?);
    }
    Ok(RelationLogits {
        logits: [logits[0], logits[1], logits[2]],
    })
}

/// One anchor's contrastive triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContrastTriple {
    pub anchor: usize,
    pub positive: usize,
    pub negative: Option<usize>,
}

/// Sampled pairs and labels for one relation, anchor-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationSample {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    pub triples: Vec<ContrastTriple>,
}

fn draw(rng: &mut ChaCha8Rng, pool: &[usize], count: usize) -> Vec<usize> {
    if count == 0 || pool.is_empty() {
        return Vec::new();
    }
    if pool.len() >= count {
        sample_indices(rng, pool.len(), count).into_iter().map(|k| pool[k]).collect()
    } else {
        (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// For every anchor and relation, `S` partners: `⌈S/2⌉` positives and the rest
/// negatives (all positives when the anchor has no negatives). Classes too
/// small for their quota are drawn with replacement.
pub fn monte_carlo_sample(gt: &RelationMatrices, s: usize, seed: u64) -> Result<[RelationSample; 3]> {
    if s < 2 {
        return Err(Error::contract(format!("sample size must be at least 2, got {s}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = gt.n();
    let mut out = Vec::with_capacity(3);
    for r in Relation::ALL {
        let m = gt.get(r);
        let mut rs = RelationSample {
            pairs: Vec::with_capacity(n * s),
            labels: Vec::with_capacity(n * s),
            triples: Vec::with_capacity(n),
        };
        for a in 0..n {
            let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&j| m.get(a, j));
            let n_pos = if neg.is_empty() { s } else { s.div_ceil(2) };
            let p = draw(&mut rng, &pos, n_pos);
            let q = draw(&mut rng, &neg, s - n_pos);
            rs.triples.push(ContrastTriple {
                anchor: a,
                positive: p[0],
                negative: q.first().copied(),
            });
            for (j, label) in p.into_iter().map(|j| (j, 1)).chain(q.into_iter().map(|j| (j, 0))) {
                rs.pairs.push((a, j));
                rs.labels.push(label);
            }
        }
        out.push(rs);
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_class: f64,
    pub lambda_con: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_class: 1.0,
            lambda_con: 1.0,
            margin: 1.0,
        }
    }
}

/// Mean over anchors of `‖e_a − e⁺‖² + max(0, α − ‖e_a − e⁻‖²)`; the hinge is
/// dropped for anchors without a negative.
pub fn contrastive_loss(tape: &mut Tape, e: Var, triples: &[ContrastTriple], margin: f64) -> Result<Var> {
    let anchors: Vec<usize> = triples.iter().map(|t| t.anchor).collect();
    let positives: Vec<usize> = triples.iter().map(|t| t.positive).collect();
    let ea = tape.gather(e, &anchors)?;
    let ep = tape.gather(e, &positives)?;
    let dp = tape.sub(ea, ep)?;
    let dp = tape.row_sq_norm(dp)?;
    let mut total = tape.sum(dp);
    let with_neg: Vec<&ContrastTriple> = triples.iter().filter(|t| t.negative.is_some()).collect();
    if !with_neg.is_empty() {
        let a: Vec<usize> = with_neg.iter().map(|t| t.anchor).collect();
        let b: Vec<usize> = with_neg.iter().filter_map(|t| t.negative).collect();
        let ea = tape.gather(e, &a)?;
        let en = tape.gather(e, &b)?;
        let dn = tape.sub(ea, en)?;
        let dn = tape.row_sq_norm(dn)?;
        let gap = tape.scale(dn, -1.0);
        let gap = tape.add_scalar(gap, margin);
        let hinge = tape.relu(gap);
        let hinge = tape.sum(hinge);
        total = tape.add(total, hinge)?;
    }
    Ok(tape.scale(total, 1.0 / triples.len() as f64))
}

/// `Σ_r λ1·CE_r + λ2·Con_r` over the sampled pairs, where `logits[r]` holds
/// one row per entry of `samples[r].pairs`.
pub fn relation_loss(
    tape: &mut Tape,
    logits: &[Var; 3],
    e: Var,
    samples: &[RelationSample; 3],
    w: LossWeights,
) -> Result<Var> {
    if w.lambda_class < 0.0 || w.lambda_con < 0.0 {
        return Err(Error::contract("loss weights must be non-negative"));
    }
    let mut terms = Vec::with_capacity(6);
    for (z, rs) in logits.iter().zip(samples) {
        let ce = tape.cross_entropy(*z, &rs.labels)?;
        terms.push(tape.scale(ce, w.lambda_class));
        let con = contrastive_loss(tape, e, &rs.triples, w.margin)?;
        terms.push(tape.scale(con, w.lambda_con));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Builds logits for the sampled pairs and returns the loss.
pub fn sampled_loss(
    tape: &mut Tape,
    params: &ModelParams,
    e: Var,
    samples: &[RelationSample; 3],
    w: LossWeights,
) -> Result<Var> {
    let mut logits = Vec::with_capacity(3);
    for (r, rs) in Relation::ALL.into_iter().zip(samples) {
        let batch = select_pairs(tape, e, rs.pairs.clone())?;
        logits.push(relation_logits(tape, params, r, batch.vectors)?);
    }
    let unit = contrastive_view(tape, e)?;
    relation_loss(tape, &[logits[0], logits[1], logits[2]], unit, samples, w)
}

/// Rows of `e` centered and scaled to unit length, so squared distances
/// lie in `[0, 4]` and the unit margin is on the same scale regardless of
/// the embedding width.
pub fn contrastive_view(tape: &mut Tape, e: Var) -> Result<Var> {
    let width = tape.value(e).cols();
    let ones = tape.constant(Tensor::filled(&[width], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[width]));
    let standardized = tape.layer_norm(e, ones, zeros, nn::LN_EPS)?;
    Ok(tape.scale(standardized, 1.0 / (width as f64).sqrt()))
}
