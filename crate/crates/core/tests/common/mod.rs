//! Independent reference implementations on plain nested vectors.
#![allow(dead_code)]

use ncgm::datamodel::{build_adjacency, BoundingBox, Raster, Span, TableElement, TableSample};
use ncgm::tensor::{ModelParams, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    t.to_rows()
}

pub fn param(p: &ModelParams, name: &str) -> Mat {
    let t = p.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    if t.shape().len() == 1 {
        vec![t.data().to_vec()]
    } else {
        t.to_rows()
    }
}

pub fn vec_param(p: &ModelParams, name: &str) -> Vec<f64> {
    p.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn softmax(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| gamma[j] * (v - mu) / (var + eps).sqrt() + beta[j])
                .collect()
        })
        .collect()
}

pub fn linear(p: &ModelParams, prefix: &str, x: &Mat) -> Mat {
    let w = param(p, &format!("{prefix}/w"));
    let b = vec_param(p, &format!("{prefix}/b"));
    matmul(x, &w).into_iter().map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect()).collect()
}

pub fn ln(p: &ModelParams, prefix: &str, x: &Mat) -> Mat {
    layer_norm(x, &vec_param(p, &format!("{prefix}/gamma")), &vec_param(p, &format!("{prefix}/beta")), 1e-5)
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Multi-head attention with per-head slices of the shared projections.
pub fn mha(p: &ModelParams, prefix: &str, q: &Mat, k: &Mat, v: &Mat, heads: usize, dk: usize, dv: usize) -> Mat {
    let qp = matmul(q, &param(p, &format!("{prefix}/wq")));
    let kp = matmul(k, &param(p, &format!("{prefix}/wk")));
    let vp = matmul(v, &param(p, &format!("{prefix}/wv")));
    let mut cat: Mat = vec![Vec::new(); q.len()];
    for h in 0..heads {
        let s = matmul(&cols(&qp, h * dk, dk), &transpose(&cols(&kp, h * dk, dk)));
        let s: Mat = s.iter().map(|r| r.iter().map(|x| x / (dk as f64).sqrt()).collect()).collect();
        let o = matmul(&softmax(&s), &cols(&vp, h * dv, dv));
        for (row, part) in cat.iter_mut().zip(o) {
            row.extend(part);
        }
    }
    matmul(&cat, &param(p, &format!("{prefix}/wo")))
}

/// Contiguous groups of `ceil(M/target)` rows, zero-padded to the width of
/// `wh`, projected and normalized.
pub fn compress(p: &ModelParams, prefix: &str, mem: &Mat, target: usize) -> Mat {
    let d = mem[0].len();
    let wh = param(p, &format!("{prefix}/wh"));
    let gmax = wh.len() / d;
    let g = mem.len().div_ceil(target).max(1);
    let grouped: Mat = (0..target)
        .map(|r| {
            let mut row = vec![0.0; gmax * d];
            for s in 0..g {
                if let Some(src) = mem.get(r * g + s) {
                    row[s * d..(s + 1) * d].copy_from_slice(src);
                }
            }
            row
        })
        .collect();
    ln(p, &format!("{prefix}/ln"), &matmul(&grouped, &wh))
}

pub fn cmha(p: &ModelParams, prefix: &str, q: &Mat, mem: &Mat, heads: usize, dk: usize) -> Mat {
    let kc = compress(p, &format!("{prefix}/mc"), mem, q.len());
    let att = mha(p, &format!("{prefix}/mha"), q, &kc, &kc, heads, dk, dk);
    let p1 = ln(p, &format!("{prefix}/ln1"), &add(q, &att));
    let hidden = relu(&linear(p, &format!("{prefix}/ffn1"), &p1));
    let f = linear(p, &format!("{prefix}/ffn2"), &hidden);
    ln(p, &format!("{prefix}/ln2"), &add(&f, &p1))
}

/// Edge rows `[c_i, c_i - c_j]` for `i < j`.
pub fn edges(c: &Mat) -> Mat {
    let n = c.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let mut row = c[i].clone();
            row.extend(c[i].iter().zip(&c[j]).map(|(a, b)| a - b));
            out.push(row);
        }
    }
    out
}

pub fn ece(p: &ModelParams, prefix: &str, c: &Mat, heads: usize, dk: usize) -> Mat {
    let e = linear(p, &format!("{prefix}/edge"), &edges(c));
    cmha(p, &format!("{prefix}/cmha"), c, &e, heads, dk)
}

pub fn ccs(p: &ModelParams, prefix: &str, m: &Mat, a: &Mat, b: &Mat, heads: usize, dk: usize) -> Mat {
    let mut union = Vec::new();
    for i in 0..a.len() {
        union.push(a[i].clone());
        union.push(b[i].clone());
    }
    cmha(p, &format!("{prefix}/cmha"), m, &union, heads, dk)
}

/// The collaborative block stack for the summed-stream model, written out
/// without loops over modalities. Inputs are (appearance, geometry, content).
pub fn blocks_straight_line(p: &ModelParams, fa: &Mat, fg: &Mat, fc: &Mat, layers: usize, heads: usize, dk: usize) -> Mat {
    let mut ca = ln(p, "input/appearance/ln", fa);
    let mut cg = ln(p, "input/geometry/ln", fg);
    let mut cc = ln(p, "input/content/ln", fc);
    let (mut ma, mut mg, mut mc) = (ca.clone(), cg.clone(), cc.clone());
    for l in 1..=layers {
        ca = ece(p, &format!("block{l}/ece/appearance"), &ca, heads, dk);
        cg = ece(p, &format!("block{l}/ece/geometry"), &cg, heads, dk);
        cc = ece(p, &format!("block{l}/ece/content"), &cc, heads, dk);
        let na = ccs(p, &format!("block{l}/ccs/appearance"), &ma, &cg, &cc, heads, dk);
        let ng = ccs(p, &format!("block{l}/ccs/geometry"), &mg, &ca, &cc, heads, dk);
        let nc = ccs(p, &format!("block{l}/ccs/content"), &mc, &ca, &cg, heads, dk);
        ma = na;
        mg = ng;
        mc = nc;
    }
    add(&add(&ma, &mg), &mc)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Labeled table from spans: one element per span, boxes laid out on a
/// 40×20 grid inside a blank image.
pub fn table_from_spans(spans: &[Span]) -> TableSample {
    let rows = spans.iter().map(|s| s.end_row + 1).max().unwrap_or(1);
    let cols = spans.iter().map(|s| s.end_col + 1).max().unwrap_or(1);
    let elements: Vec<TableElement> = spans
        .iter()
        .enumerate()
        .map(|(k, s)| TableElement {
            bbox: BoundingBox::from_corners(
                40.0 * s.start_col as f64 + 5.0,
                20.0 * s.start_row as f64 + 5.0,
                40.0 * (s.end_col + 1) as f64 - 5.0,
                20.0 * (s.end_row + 1) as f64 - 5.0,
            ),
            text: vec![format!("w{k}")],
            span: Some(*s),
        })
        .collect();
    let relations = build_adjacency(&elements).expect("labeled elements");
    TableSample {
        image: Raster::new(40 * cols, 20 * rows, 255),
        elements,
        relations,
    }
}

/// Deterministic pseudo-random stream for oracle inputs.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| self.uniform(-scale, scale)).collect();
        Tensor::new(vec![rows, cols], data).expect("shape")
    }
}
pub mod suites;
