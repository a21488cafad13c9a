//! Synthetic ruled tables with exact labels, plus the two distortions.
//!
//! Layouts obey a few rules so that every grid row and column can be read
//! back from the relation matrices alone:
//!
//! * cells in the first column never span rows,
//! * row spans never reach the last row, and last-row cells are 1×1,
//! * no cell is empty.
//!
//! A cell may hold two text lines; each line is its own element and both share
//! the cell's span.

mod corpus;
mod warp;

pub use corpus::{
    distort, generate_corpus, read_manifest, write_corpus, CorpusEntry, CorpusSpec, Distortion, ManifestRow, Split,
};
pub use warp::{
    apply_bezier, apply_homography, bezier_point, distort_bezier, distort_perspective, BezierWarp, Homography, Point,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{build_adjacency, BoundingBox, Raster, Span, TableElement, TableSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    /// Inclusive range of grid rows.
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    /// Chance that a free grid position starts a merged cell.
    pub span_prob: f64,
    /// Chance that a cell holds two text lines.
    pub multiline_prob: f64,
    pub width: usize,
    pub height: usize,
    pub max_elements: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            rows: (2, 4),
            cols: (2, 4),
            span_prob: 0.15,
            multiline_prob: 0.1,
            width: 256,
            height: 160,
            max_elements: 16,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.rows;
        let (c0, c1) = self.cols;
        if r0 == 0 || c0 == 0 || r0 > r1 || c0 > c1 {
            return Err(Error::Usage(format!(
                "row and column ranges must be non-empty and start at 1 or more, got {r0}..={r1} and {c0}..={c1}"
            )));
        }
        if !(0.0..1.0).contains(&self.span_prob) || !(0.0..1.0).contains(&self.multiline_prob) {
            return Err(Error::Usage("span and multi-line probabilities must lie in [0, 1)".into()));
        }
        if r1 * c1 > self.max_elements {
            return Err(Error::Usage(format!(
                "a {r1}x{c1} grid can exceed the limit of {} elements",
                self.max_elements
            )));
        }
        if self.width < 16 * c1 || self.height < 14 * r1 {
            return Err(Error::Usage(format!(
                "canvas {}x{} is too small for {r1}x{c1} cells",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// One logical cell: its span and one token list per text line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutCell {
    pub span: Span,
    pub lines: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableLayout {
    pub rows: usize,
    pub cols: usize,
    /// Reading order: by start row, then start column.
    pub cells: Vec<LayoutCell>,
}

const WORDS: [&str; 16] = [
    "name", "total", "mean", "year", "model", "score", "rate", "count", "type", "size", "loss", "gain", "item",
    "code", "unit", "note",
];

fn random_token(rng: &mut ChaCha8Rng, header: bool) -> String {
    if header || rng.random_bool(0.3) {
        WORDS[rng.random_range(0..WORDS.len())].to_string()
    } else if rng.random_bool(0.5) {
        format!("{}", rng.random_range(0..1000))
    } else {
        format!("{}.{}", rng.random_range(0..100), rng.random_range(0..10))
    }
}

fn random_line(rng: &mut ChaCha8Rng, header: bool) -> Vec<String> {
    let k = rng.random_range(1..=2);
    (0..k).map(|_| random_token(rng, header)).collect()
}

pub fn generate_layout(seed: u64, p: &GenParams) -> Result<TableLayout> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(p.rows.0..=p.rows.1);
    let cols = rng.random_range(p.cols.0..=p.cols.1);
    let mut taken = vec![false; rows * cols];
    let mut cells = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if taken[r * cols + c] {
                continue;
            }
            let (mut rs, mut cs) = (1, 1);
            if rng.random_bool(p.span_prob) {
                let max_rs = if c == 0 || r + 1 >= rows { 1 } else { (rows - 1 - r).min(3) };
                let max_cs = if r + 1 == rows {
                    1
                } else {
                    (c..cols).take_while(|&cc| !taken[r * cols + cc]).count().min(3)
                };
                rs = rng.random_range(1..=max_rs);
                cs = rng.random_range(1..=max_cs);
                let free = (r..r + rs).all(|rr| (c..c + cs).all(|cc| !taken[rr * cols + cc]));
                if !free {
                    (rs, cs) = (1, 1);
                }
            }
            for rr in r..r + rs {
                for cc in c..c + cs {
                    taken[rr * cols + cc] = true;
                }
            }
            cells.push(LayoutCell {
                span: Span::new(r, r + rs - 1, c, c + cs - 1),
                lines: vec![random_line(&mut rng, r == 0)],
            });
        }
    }
    let mut budget = p.max_elements - cells.len();
    for cell in &mut cells {
        if budget > 0 && rng.random_bool(p.multiline_prob) {
            let header = cell.span.start_row == 0;
            cell.lines.push(random_line(&mut rng, header));
            budget -= 1;
        }
    }
    Ok(TableLayout { rows, cols, cells })
}

pub fn td_token(span: &Span) -> String {
    let mut t = String::from("<td");
    if span.rowspan() > 1 {
        t.push_str(&format!(" rowspan=\"{}\"", span.rowspan()));
    }
    if span.colspan() > 1 {
        t.push_str(&format!(" colspan=\"{}\"", span.colspan()));
    }
    t.push('>');
    t
}

impl TableLayout {
    /// Tag sequence written straight from the layout.
    pub fn reference_html(&self) -> Vec<String> {
        let mut out = vec!["<table>".to_string()];
        for r in 0..self.rows {
            out.push("<tr>".into());
            for cell in self.cells.iter().filter(|c| c.span.start_row == r) {
                out.push(td_token(&cell.span));
                out.push("</td>".into());
            }
            out.push("</tr>".into());
        }
        out.push("</table>".into());
        out
    }

    pub fn element_spans(&self) -> Vec<Span> {
        self.cells
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.span, c.lines.len()))
            .collect()
    }

    pub fn element_count(&self) -> usize {
        self.cells.iter().map(|c| c.lines.len()).sum()
    }
}

const MARGIN: usize = 4;
const RULE_INK: u8 = 90;
const TEXT_INK: u8 = 20;
const LINE_HEIGHT: usize = 5;
const LINE_GAP: usize = 3;

fn boundaries(rng: &mut ChaCha8Rng, parts: usize, extent: usize, spread: f64) -> Vec<usize> {
    let weights: Vec<f64> = (0..parts).map(|_| rng.random_range(1.0..=spread)).collect();
    let total: f64 = weights.iter().sum();
    let usable = (extent - 2 * MARGIN) as f64;
    let mut out = vec![MARGIN];
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        out.push(MARGIN + (usable * acc / total).round() as usize);
    }
    out
}

/// Draws the layout: ruled grid lines (broken inside merged cells) and one
/// filled rectangle per token.
pub fn render(layout: &TableLayout, p: &GenParams, seed: u64) -> Result<TableSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f7_ab1e);
    let xs = boundaries(&mut rng, layout.cols, p.width, 2.0);
    let ys = boundaries(&mut rng, layout.rows, p.height, 1.4);
    let mut img = Raster::new(p.width, p.height, 255);

    let covering = |r: usize, c: usize| layout.cells.iter().position(|cell| {
        let s = cell.span;
        r >= s.start_row && r <= s.end_row && c >= s.start_col && c <= s.end_col
    });
    for k in 0..=layout.rows {
        for c in 0..layout.cols {
            let inside = k > 0 && k < layout.rows && covering(k - 1, c) == covering(k, c);
            if !inside {
                for x in xs[c]..=xs[c + 1].min(p.width - 1) {
                    img.set(x, ys[k].min(p.height - 1), RULE_INK);
                }
            }
        }
    }
    for k in 0..=layout.cols {
        for r in 0..layout.rows {
            let inside = k > 0 && k < layout.cols && covering(r, k - 1) == covering(r, k);
            if !inside {
                for y in ys[r]..=ys[r + 1].min(p.height - 1) {
                    img.set(xs[k].min(p.width - 1), y, RULE_INK);
                }
            }
        }
    }

    let mut elements = Vec::with_capacity(layout.element_count());
    for cell in &layout.cells {
        let s = cell.span;
        let (x0, x1) = (xs[s.start_col], xs[s.end_col + 1]);
        let (y0, y1) = (ys[s.start_row], ys[s.end_row + 1]);
        let lines = cell.lines.len();
        let block = lines * LINE_HEIGHT + (lines - 1) * LINE_GAP;
        let mut top = y0 + (y1 - y0).saturating_sub(block) / 2;
        for line in &cell.lines {
            let room = (x1 - x0).saturating_sub(6);
            let chars: usize = line.iter().map(|t| t.chars().count()).sum();
            let gaps = 3 * (line.len() - 1);
            let char_w = ((room.saturating_sub(gaps)) / chars.max(1)).clamp(1, 3);
            let mut widths: Vec<usize> = line.iter().map(|t| t.chars().count() * char_w).collect();
            while widths.iter().sum::<usize>() + 3 * (widths.len() - 1) > room && widths.len() > 1 {
                widths.pop();
            }
            let total = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
            let mut left = x0 + (x1 - x0).saturating_sub(total) / 2;
            let start = left;
            for w in &widths {
                for y in top..top + LINE_HEIGHT {
                    for x in left..left + w {
                        img.set(x, y, TEXT_INK);
                    }
                }
                left += w + 3;
            }
            let bbox = BoundingBox::from_corners(start as f64, top as f64, (start + total) as f64, (top + LINE_HEIGHT) as f64);
            elements.push(TableElement {
                bbox,
                text: line[..widths.len()].to_vec(),
                span: Some(s),
            });
            top += LINE_HEIGHT + LINE_GAP;
        }
    }
    let relations = build_adjacency(&elements)?;
    Ok(TableSample {
        image: img,
        elements,
        relations,
    })
}

/// A labeled sample together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTable {
    pub layout: TableLayout,
    pub sample: TableSample,
}

pub fn generate(seed: u64, p: &GenParams) -> Result<GeneratedTable> {
    let layout = generate_layout(seed, p)?;
    let sample = render(&layout, p, seed)?;
    Ok(GeneratedTable { layout, sample })
}

pub fn generate_table(seed: u64, p: &GenParams) -> Result<TableSample> {
    Ok(generate(seed, p)?.sample)
}

/// Seed of the `i`-th sample of a run started from `base`.
pub fn sample_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
