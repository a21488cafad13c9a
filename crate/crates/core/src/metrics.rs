//! Relation precision/recall/F1, TEDS, BLEU and attention diversity.

use std::collections::HashMap;
use std::fmt;

use crate::attention::{AttentionMap, Stage};
use crate::datamodel::{AdjMatrix, Relation, RelationMatrices, TableSample};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::postprocess::{spans_from_relations, to_html, StructureTree, TreeNode};

/// Pair counts over unordered non-self pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::Add for PairCounts {
    type Output = PairCounts;
    fn add(self, o: PairCounts) -> PairCounts {
        PairCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

pub fn pair_counts(pred: &AdjMatrix, gt: &AdjMatrix) -> Result<PairCounts> {
    if pred.n() != gt.n() {
        return Err(Error::contract(format!("prediction has {} elements, ground truth {}", pred.n(), gt.n())));
    }
    let mut c = PairCounts::default();
    for i in 0..gt.n() {
        for j in i + 1..gt.n() {
            match (pred.get(i, j), gt.get(i, j)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub counts: PairCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when either denominator was empty and its ratio reported as 0.
    pub degenerate: bool,
}

impl Score {
    pub fn from_counts(counts: PairCounts) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let pred_pos = counts.tp + counts.fp;
        let gt_pos = counts.tp + counts.fn_;
        let precision = ratio(counts.tp, pred_pos);
        let recall = ratio(counts.tp, gt_pos);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Score {
            counts,
            precision,
            recall,
            f1,
            degenerate: pred_pos == 0 || gt_pos == 0,
        }
    }
}

/// Scores indexed like `Relation::ALL`.
pub fn relation_f1(pred: &RelationMatrices, gt: &RelationMatrices) -> Result<[Score; 3]> {
    let mut out = [Score::from_counts(PairCounts::default()); 3];
    for (k, r) in Relation::ALL.into_iter().enumerate() {
        out[k] = Score::from_counts(pair_counts(pred.get(r), gt.get(r))?);
    }
    Ok(out)
}

/// Ordered tree edit distance with unit insert, delete and rename costs.
pub fn tree_edit_distance(a: &TreeNode, b: &TreeNode) -> usize {
    struct Flat<'a> {
        labels: Vec<&'a str>,
        // Postorder index of each node's leftmost leaf.
        lml: Vec<usize>,
        keyroots: Vec<usize>,
    }
    fn flatten(root: &TreeNode) -> Flat<'_> {
        fn walk<'a>(n: &'a TreeNode, labels: &mut Vec<&'a str>, lml: &mut Vec<usize>) -> usize {
            let mut first = None;
            for c in &n.children {
                let l = walk(c, labels, lml);
                first.get_or_insert(l);
            }
            let me = first.unwrap_or(labels.len());
            labels.push(&n.label);
            lml.push(me);
            me
        }
        let (mut labels, mut lml) = (Vec::new(), Vec::new());
        walk(root, &mut labels, &mut lml);
        // A keyroot is the highest node with a given leftmost leaf.
        let mut highest: HashMap<usize, usize> = HashMap::new();
        for (i, &l) in lml.iter().enumerate() {
            highest.insert(l, i);
        }
        let mut keyroots: Vec<usize> = highest.into_values().collect();
        keyroots.sort_unstable();
        Flat { labels, lml, keyroots }
    }

    let (fa, fb) = (flatten(a), flatten(b));
    let (n, m) = (fa.labels.len(), fb.labels.len());
    let mut td = vec![vec![0usize; m]; n];
    for &i in &fa.keyroots {
        for &j in &fb.keyroots {
            let (li, lj) = (fa.lml[i], fb.lml[j]);
            let rows = i - li + 2;
            let cols = j - lj + 2;
            let mut fd = vec![vec![0usize; cols]; rows];
            for x in 1..rows {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..cols {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in 1..rows {
                for y in 1..cols {
                    let (ni, nj) = (li + x - 1, lj + y - 1);
                    let del = fd[x - 1][y] + 1;
                    let ins = fd[x][y - 1] + 1;
                    if fa.lml[ni] == li && fb.lml[nj] == lj {
                        let rename = usize::from(fa.labels[ni] != fb.labels[nj]);
                        fd[x][y] = del.min(ins).min(fd[x - 1][y - 1] + rename);
                        td[ni][nj] = fd[x][y];
                    } else {
                        let px = fa.lml[ni] - li;
                        let py = fb.lml[nj] - lj;
                        fd[x][y] = del.min(ins).min(fd[px][py] + td[ni][nj]);
                    }
                }
            }
        }
    }
    td[n - 1][m - 1]
}

pub fn teds(a: &StructureTree, b: &StructureTree) -> f64 {
    let d = tree_edit_distance(&a.root, &b.root);
    1.0 - d as f64 / a.size().max(b.size()) as f64
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU over (candidate, reference) token pairs: clipped 1..4-gram
/// precisions, uniform weights, brevity penalty and no smoothing.
pub fn corpus_bleu(pairs: &[(&[String], &[String])]) -> Result<f64> {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in pairs {
        if refr.is_empty() {
            return Err(Error::contract("empty reference"));
        }
        c_len += cand.len();
        r_len += refr.len();
        for n in 1..=4 {
            let rc = ngram_counts(refr, n);
            for (g, k) in ngram_counts(cand, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|k| (matched[k] as f64 / total[k] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

pub fn bleu(candidate: &[String], reference: &[String]) -> Result<f64> {
    corpus_bleu(&[(candidate, reference)])
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Entropy of the mean row minus the mean row entropy, in nats.
pub fn attention_jsd(rows: &[&[f64]]) -> Result<f64> {
    let Some(first) = rows.first() else {
        return Err(Error::contract("no attention rows"));
    };
    let n = first.len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(Error::contract(format!("row {i} has {} keys, expected {n}", r.len())));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-6 || r.iter().any(|&x| x < 0.0) {
            return Err(Error::contract(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    let k = rows.len() as f64;
    let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k).collect();
    let mean_h = rows.iter().map(|r| entropy(r)).sum::<f64>() / k;
    Ok((entropy(&mean) - mean_h).max(0.0))
}

/// Head diversity of one map, averaged over its query rows.
pub fn map_jsd(map: &AttentionMap) -> Result<f64> {
    let mut total = 0.0;
    for q in 0..map.queries() {
        let rows: Vec<&[f64]> = (0..map.heads()).map(|h| map.row(h, q)).collect();
        total += attention_jsd(&rows)?;
    }
    Ok(total / map.queries().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JsdPoint {
    pub layer: usize,
    pub modality: String,
    pub stage: Stage,
    pub value: f64,
}

/// Mean diversity per (block, modality, stage) over many forward passes.
pub fn jsd_curves(runs: &[Vec<AttentionMap>]) -> Result<Vec<JsdPoint>> {
    let mut acc: Vec<(JsdPoint, usize)> = Vec::new();
    for maps in runs {
        for m in maps {
            let v = map_jsd(m)?;
            match acc
                .iter_mut()
                .find(|(p, _)| p.layer == m.layer && p.stage == m.stage && p.modality == m.modality)
            {
                Some((p, k)) => {
                    p.value += v;
                    *k += 1;
                }
                None => acc.push((
                    JsdPoint {
                        layer: m.layer,
                        modality: m.modality.clone(),
                        stage: m.stage,
                        value: v,
                    },
                    1,
                )),
            }
        }
    }
    let mut out: Vec<JsdPoint> = acc
        .into_iter()
        .map(|(mut p, k)| {
            p.value /= k as f64;
            p
        })
        .collect();
    out.sort_by(|a, b| (a.layer, &a.modality, a.stage.name()).cmp(&(b.layer, &b.modality, b.stage.name())));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Indexed like `Relation::ALL`.
    pub relations: [Score; 3],
    pub teds: f64,
    pub bleu: f64,
    pub samples: usize,
    /// Samples whose predicted grid could not be laid out.
    pub structure_failures: usize,
    pub jsd: Vec<JsdPoint>,
}

impl MetricsReport {
    pub fn relation(&self, r: Relation) -> &Score {
        &self.relations[r as usize]
    }

    /// Micro-averaged F1 over the three relations.
    pub fn overall_f1(&self) -> f64 {
        let c = self.relations.iter().fold(PairCounts::default(), |a, s| a + s.counts);
        Score::from_counts(c).f1
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for r in Relation::ALL {
            let s = self.relation(r);
            out.push_str(&format!("{r}.precision={:.6}\n", s.precision));
            out.push_str(&format!("{r}.recall={:.6}\n", s.recall));
            out.push_str(&format!("{r}.f1={:.6}\n", s.f1));
            out.push_str(&format!("{r}.degenerate={}\n", s.degenerate));
        }
        out.push_str(&format!("overall.f1={:.6}\n", self.overall_f1()));
        out.push_str(&format!("teds={:.6}\nbleu={:.6}\n", self.teds, self.bleu));
        out.push_str(&format!("samples={}\nstructure_failures={}\n", self.samples, self.structure_failures));
        for p in &self.jsd {
            out.push_str(&format!("jsd.block{}.{}.{}={:.6}\n", p.layer, p.stage.name(), p.modality, p.value));
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<9} {:>9} {:>9} {:>9}", "relation", "precision", "recall", "f1")?;
        for r in Relation::ALL {
            let s = self.relation(r);
            let flag = if s.degenerate { " *" } else { "" };
            writeln!(f, "{:<9} {:>9.4} {:>9.4} {:>9.4}{flag}", r.name(), s.precision, s.recall, s.f1)?;
        }
        writeln!(f, "{:<9} {:>9} {:>9} {:>9.4}", "overall", "", "", self.overall_f1())?;
        writeln!(f, "TEDS {:.4}", self.teds)?;
        writeln!(f, "BLEU {:.4}", self.bleu)?;
        write!(f, "samples {}  structure failures {}", self.samples, self.structure_failures)
    }
}

/// Every metric for predicted relation matrices against labeled samples.
/// A prediction whose grid cannot be laid out scores against an empty table.
pub fn report_from_relations(
    items: &[(RelationMatrices, &TableSample)],
    threshold: f64,
    exec: Exec,
) -> Result<MetricsReport> {
    struct One {
        counts: [PairCounts; 3],
        cand: Vec<String>,
        refr: Vec<String>,
        teds: f64,
        failed: bool,
    }
    let per: Vec<Result<One>> = exec.map(items, |(pred, sample)| {
        let gt = &sample.relations;
        let mut counts = [PairCounts::default(); 3];
        for (k, r) in Relation::ALL.into_iter().enumerate() {
            counts[k] = pair_counts(pred.get(r), gt.get(r))?;
        }
        let refr = to_html(&sample.spans()?)?;
        let predicted = spans_from_relations(pred, &sample.elements, threshold).and_then(|s| to_html(&s));
        let failed = predicted.is_err();
        let cand = predicted.unwrap_or_else(|_| vec!["<table>".into(), "</table>".into()]);
        let teds = teds(&StructureTree::from_tokens(&cand)?, &StructureTree::from_tokens(&refr)?);
        Ok(One {
            counts,
            cand,
            refr,
            teds,
            failed,
        })
    });
    let per: Vec<One> = per.into_iter().collect::<Result<_>>()?;
    let mut counts = [PairCounts::default(); 3];
    for o in &per {
        for k in 0..3 {
            counts[k] = counts[k] + o.counts[k];
        }
    }
    let pairs: Vec<(&[String], &[String])> = per.iter().map(|o| (o.cand.as_slice(), o.refr.as_slice())).collect();
    let bleu = if per.is_empty() { 0.0 } else { corpus_bleu(&pairs)? };
    Ok(MetricsReport {
        relations: counts.map(Score::from_counts),
        teds: per.iter().map(|o| o.teds).sum::<f64>() / per.len().max(1) as f64,
        bleu,
        samples: per.len(),
        structure_failures: per.iter().filter(|o| o.failed).count(),
        jsd: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn one_hot_heads() {
        let rows: [&[f64]; 3] = [&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]];
        assert!((attention_jsd(&rows).unwrap() - 3f64.ln()).abs() < 1e-12);
        let same: [&[f64]; 2] = [&[0.25, 0.75], &[0.25, 0.75]];
        assert!(attention_jsd(&same).unwrap().abs() < 1e-12);
        assert!(attention_jsd(&[&[0.5, 0.6][..]]).is_err());
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let a = toks("a b c d e f");
        assert!((bleu(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&toks("x y z w v"), &a).unwrap(), 0.0);
        assert_eq!(bleu(&[], &a).unwrap(), 0.0);
    }

    #[test]
    fn leaf_deletion() {
        let t = StructureTree::from_tokens(&toks("<table> <tr> <td> </td> <td> </td> </tr> </table>")).unwrap();
        let mut u = t.clone();
        u.root.children[0].children.pop();
        assert!((teds(&t, &u) - (1.0 - 1.0 / 4.0)).abs() < 1e-12);
        assert_eq!(teds(&t, &t), 1.0);
    }

    #[test]
    fn all_negative_is_flagged() {
        let gt = AdjMatrix::from_fn(3, |_, _| true);
        let pred = AdjMatrix::from_fn(3, |i, j| i == j);
        let s = Score::from_counts(pair_counts(&pred, &gt).unwrap());
        assert!(s.degenerate);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }
}
