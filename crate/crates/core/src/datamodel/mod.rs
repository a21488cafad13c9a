//! Table samples, element boxes and ground-truth relation matrices.

mod io;

pub use io::{read_sample, write_sample, SampleDocument};

use std::fmt;

use crate::error::{Error, Result};

/// Axis-aligned text-segment box, center-anchored, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox {
            x: 0.5 * (x0 + x1),
            y: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn left(&self) -> f64 {
        self.x - 0.5 * self.w
    }

    pub fn top(&self) -> f64 {
        self.y - 0.5 * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + 0.5 * self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + 0.5 * self.h
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (l, t, r, b) = (self.left(), self.top(), self.right(), self.bottom());
        [(l, t), (r, t), (r, b), (l, b)]
    }

    /// Clip to `[0,width]×[0,height]`, keeping at least one pixel of extent.
    pub fn clipped(&self, width: f64, height: f64) -> Self {
        let clamp1 = |lo: f64, hi: f64, limit: f64| {
            let mut lo = lo.clamp(0.0, limit);
            let mut hi = hi.clamp(0.0, limit);
            if hi - lo < 1.0 {
                let c = (0.5 * (lo + hi)).clamp(0.5, limit - 0.5);
                lo = c - 0.5;
                hi = c + 0.5;
            }
            (lo, hi)
        };
        let (x0, x1) = clamp1(self.left(), self.right(), width);
        let (y0, y1) = clamp1(self.top(), self.bottom(), height);
        BoundingBox::from_corners(x0, y0, x1, y1)
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox::from_corners(
            self.left().min(other.left()),
            self.top().min(other.top()),
            self.right().max(other.right()),
            self.bottom().max(other.bottom()),
        )
    }
}

/// Inclusive grid span of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start_row: usize,
    pub end_row: usize,
    pub start_col: usize,
    pub end_col: usize,
}

impl Span {
    pub fn new(start_row: usize, end_row: usize, start_col: usize, end_col: usize) -> Self {
        Span {
            start_row,
            end_row,
            start_col,
            end_col,
        }
    }

    pub fn cell(row: usize, col: usize) -> Self {
        Span::new(row, row, col, col)
    }

    pub fn rowspan(&self) -> usize {
        self.end_row - self.start_row + 1
    }

    pub fn colspan(&self) -> usize {
        self.end_col - self.start_col + 1
    }

    pub fn rows_overlap(&self, other: &Span) -> bool {
        self.start_row <= other.end_row && other.start_row <= self.end_row
    }

    pub fn cols_overlap(&self, other: &Span) -> bool {
        self.start_col <= other.end_col && other.start_col <= self.end_col
    }

    pub fn is_ordered(&self) -> bool {
        self.start_row <= self.end_row && self.start_col <= self.end_col
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableElement {
    pub bbox: BoundingBox,
    pub text: Vec<String>,
    pub span: Option<Span>,
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Raster {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel-center coordinates; `None` outside.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(x > -0.5 && y > -0.5 && x < self.width as f64 - 0.5 && y < self.height as f64 - 0.5) {
            return None;
        }
        let xf = x.clamp(0.0, (self.width - 1) as f64);
        let yf = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (xf.floor() as usize, yf.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (xf - x0 as f64, yf - y0 as f64);
        let p = |xx, yy| self.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Bilinear rescale to `width×height`, aligning pixel centers.
    pub fn resized(&self, width: usize, height: usize) -> Raster {
        let mut out = Raster::new(width, height, 0);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let v = self.sample_bilinear(fx, fy).unwrap_or(0.0);
                out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Cell,
    Row,
    Col,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Cell, Relation::Row, Relation::Col];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Cell => "cell",
            Relation::Row => "row",
            Relation::Col => "col",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Square 0/1 matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl AdjMatrix {
    pub fn zeros(n: usize) -> Self {
        AdjMatrix {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = AdjMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.bits[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::data("adjacency matrix is not square"));
        }
        Ok(AdjMatrix::from_fn(n, |i, j| rows[i][j] != 0))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.n + j] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j) as u8).collect())
            .collect()
    }

    /// Dense 0/1 values, row-major, usable wherever probabilities are expected.
    pub fn to_probabilities(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> AdjMatrix {
        AdjMatrix::from_fn(self.n, |i, j| self.get(perm[i], perm[j]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationMatrices {
    pub cell: AdjMatrix,
    pub row: AdjMatrix,
    pub col: AdjMatrix,
}

impl RelationMatrices {
    pub fn get(&self, r: Relation) -> &AdjMatrix {
        match r {
            Relation::Cell => &self.cell,
            Relation::Row => &self.row,
            Relation::Col => &self.col,
        }
    }

    pub fn get_mut(&mut self, r: Relation) -> &mut AdjMatrix {
        match r {
            Relation::Cell => &mut self.cell,
            Relation::Row => &mut self.row,
            Relation::Col => &mut self.col,
        }
    }

    pub fn n(&self) -> usize {
        self.cell.n()
    }

    pub fn permuted(&self, perm: &[usize]) -> RelationMatrices {
        RelationMatrices {
            cell: self.cell.permuted(perm),
            row: self.row.permuted(perm),
            col: self.col.permuted(perm),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableSample {
    pub image: Raster,
    pub elements: Vec<TableElement>,
    pub relations: RelationMatrices,
}

impl TableSample {
    pub fn n(&self) -> usize {
        self.elements.len()
    }

    pub fn spans(&self) -> Result<Vec<Span>> {
        self.elements
            .iter()
            .enumerate()
            .map(|(i, e)| e.span.ok_or_else(|| Error::contract(format!("element {i} has no span"))))
            .collect()
    }
}

/// Row/col adjacency by span-interval intersection; cell adjacency by equal spans.
pub fn build_adjacency(elements: &[TableElement]) -> Result<RelationMatrices> {
    let spans: Vec<Span> = elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            e.span
                .ok_or_else(|| Error::contract(format!("element {i} is missing its ground-truth span")))
        })
        .collect::<Result<_>>()?;
    let n = spans.len();
    Ok(RelationMatrices {
        cell: AdjMatrix::from_fn(n, |i, j| spans[i] == spans[j]),
        row: AdjMatrix::from_fn(n, |i, j| spans[i].rows_overlap(&spans[j])),
        col: AdjMatrix::from_fn(n, |i, j| spans[i].cols_overlap(&spans[j])),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoElements,
    EmptyImage,
    MatrixSize { relation: Relation, n: usize, expected: usize },
    Asymmetric { relation: Relation, i: usize, j: usize },
    ZeroDiagonal { relation: Relation, i: usize },
    CellImpliesRow { i: usize, j: usize },
    CellImpliesCol { i: usize, j: usize },
    NonPositiveBox { i: usize },
    BoxOutOfBounds { i: usize },
    UnorderedSpan { i: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoElements => write!(f, "sample has no elements"),
            Violation::EmptyImage => write!(f, "image is empty or its pixel buffer has the wrong length"),
            Violation::MatrixSize { relation, n, expected } => {
                write!(f, "{relation} matrix is {n}x{n}, expected {expected}x{expected}")
            }
            Violation::Asymmetric { relation, i, j } => write!(f, "{relation} matrix asymmetric at ({i},{j})"),
            Violation::ZeroDiagonal { relation, i } => write!(f, "{relation} matrix has zero diagonal at {i}"),
            Violation::CellImpliesRow { i, j } => write!(f, "cell implies row violated at ({i},{j})"),
            Violation::CellImpliesCol { i, j } => write!(f, "cell implies col violated at ({i},{j})"),
            Violation::NonPositiveBox { i } => write!(f, "element {i} has a non-positive box size"),
            Violation::BoxOutOfBounds { i } => write!(f, "element {i} box lies outside the image"),
            Violation::UnorderedSpan { i } => write!(f, "element {i} span start exceeds end"),
        }
    }
}

/// Every broken invariant of `sample`; empty when the sample is well formed.
pub fn validate(sample: &TableSample) -> Vec<Violation> {
    const SLACK: f64 = 1e-6;
    let mut out = Vec::new();
    let n = sample.n();
    if n == 0 {
        out.push(Violation::NoElements);
    }
    let img = &sample.image;
    if img.width == 0 || img.height == 0 || img.pixels.len() != img.width * img.height {
        out.push(Violation::EmptyImage);
    }
    let (w, h) = (img.width as f64, img.height as f64);
    for (i, e) in sample.elements.iter().enumerate() {
        let b = e.bbox;
        if !(b.w > 0.0 && b.h > 0.0) {
            out.push(Violation::NonPositiveBox { i });
        }
        if b.left() < -SLACK || b.top() < -SLACK || b.right() > w + SLACK || b.bottom() > h + SLACK {
            out.push(Violation::BoxOutOfBounds { i });
        }
        if let Some(s) = e.span {
            if !s.is_ordered() {
                out.push(Violation::UnorderedSpan { i });
            }
        }
    }
    for rel in Relation::ALL {
        let m = sample.relations.get(rel);
        if m.n() != n {
            out.push(Violation::MatrixSize {
                relation: rel,
                n: m.n(),
                expected: n,
            });
            continue;
        }
        for i in 0..n {
            if !m.get(i, i) {
                out.push(Violation::ZeroDiagonal { relation: rel, i });
            }
            for j in i + 1..n {
                if m.get(i, j) != m.get(j, i) {
                    out.push(Violation::Asymmetric { relation: rel, i, j });
                }
            }
        }
    }
    let r = &sample.relations;
    if r.cell.n() == n && r.row.n() == n && r.col.n() == n {
        for i in 0..n {
            for j in 0..n {
                if r.cell.get(i, j) && !r.row.get(i, j) {
                    out.push(Violation::CellImpliesRow { i, j });
                }
                if r.cell.get(i, j) && !r.col.get(i, j) {
                    out.push(Violation::CellImpliesCol { i, j });
                }
            }
        }
    }
    out
}
