//! Relation matrices back to structure: belonging lists, grid spans, HTML
//! tag sequences, XML cell documents and the tag tree used by TEDS.

use std::collections::BTreeMap;
use std::fmt;

use quick_xml::events::{BytesDecl, BytesEnd, BytesStart, BytesText, Event};
use quick_xml::{Reader, Writer};

use crate::datamodel::{BoundingBox, Relation, RelationMatrices, Span, TableElement, TableSample};
use crate::error::{Error, Result};
use crate::synth::td_token;

/// Above this many maximal cliques the grouping falls back to connected
/// components.
const CLIQUE_CAP: usize = 4096;

/// Square matrix of pair scores, row-major.
pub fn threshold_graph(adj: &[f64], n: usize, threshold: f64) -> Result<Vec<Vec<bool>>> {
    if adj.len() != n * n {
        return Err(Error::Shape {
            op: "belonging_lists",
            left: vec![adj.len()],
            right: vec![n, n],
        });
    }
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| i != j && adj[i * n + j].max(adj[j * n + i]) >= threshold)
                .collect()
        })
        .collect())
}

pub fn connected_components(graph: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let n = graph.len();
    let mut label = vec![usize::MAX; n];
    let mut out = Vec::new();
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![s];
        let mut members = Vec::new();
        label[s] = id;
        while let Some(u) = stack.pop() {
            members.push(u);
            for v in 0..n {
                if graph[u][v] && label[v] == usize::MAX {
                    label[v] = id;
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Maximal cliques by Bron–Kerbosch with pivoting; `None` past `cap`.
pub fn maximal_cliques(graph: &[Vec<bool>], cap: usize) -> Option<Vec<Vec<usize>>> {
    fn expand(g: &[Vec<bool>], r: &mut Vec<usize>, p: Vec<usize>, x: Vec<usize>, out: &mut Vec<Vec<usize>>, cap: usize) -> bool {
        if p.is_empty() && x.is_empty() {
            let mut c = r.clone();
            c.sort_unstable();
            out.push(c);
            return out.len() <= cap;
        }
        let pivot = p
            .iter()
            .chain(&x)
            .copied()
            .max_by_key(|&u| (p.iter().filter(|&&v| g[u][v]).count(), std::cmp::Reverse(u)))
            .expect("p or x is non-empty");
        let candidates: Vec<usize> = p.iter().copied().filter(|&v| !g[pivot][v]).collect();
        let (mut p, mut x) = (p, x);
        for v in candidates {
            r.push(v);
            let np = p.iter().copied().filter(|&u| g[v][u]).collect();
            let nx = x.iter().copied().filter(|&u| g[v][u]).collect();
            let ok = expand(g, r, np, nx, out, cap);
            r.pop();
            if !ok {
                return false;
            }
            p.retain(|&u| u != v);
            x.push(v);
        }
        true
    }
    let mut out = Vec::new();
    let all = (0..graph.len()).collect();
    expand(graph, &mut Vec::new(), all, Vec::new(), &mut out, cap).then_some(out)
}

/// Groups of mutually related elements, ordered by `keys` (y for rows, x
/// for columns).
///
/// The thresholded, max-symmetrized graph is split into maximal cliques; on
/// transitive input these are exactly its connected components. A group's
/// position is the mean key of the members that belong to no other group,
/// or of all members when every member is shared.
pub fn belonging_lists(adj: &[f64], n: usize, threshold: f64, keys: &[f64]) -> Result<Vec<Vec<usize>>> {
    if keys.len() != n {
        return Err(Error::contract(format!("{} sort keys for {n} elements", keys.len())));
    }
    let graph = threshold_graph(adj, n, threshold)?;
    let groups = maximal_cliques(&graph, CLIQUE_CAP).unwrap_or_else(|| connected_components(&graph));
    let mut count = vec![0usize; n];
    for g in &groups {
        for &i in g {
            count[i] += 1;
        }
    }
    let mean = |idx: &mut dyn Iterator<Item = usize>| {
        let (s, k) = idx.fold((0.0, 0usize), |(s, k), i| (s + keys[i], k + 1));
        (k > 0).then(|| s / k as f64)
    };
    let mut keyed: Vec<(f64, usize, Vec<usize>)> = groups
        .into_iter()
        .map(|g| {
            let exclusive = mean(&mut g.iter().copied().filter(|&i| count[i] == 1));
            let k = exclusive.or_else(|| mean(&mut g.iter().copied())).unwrap_or(0.0);
            (k, g[0], g)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, _, g)| g).collect())
}

/// Spans from ordered row and column groups; elements sharing a cell group
/// take the union of their spans.
pub fn to_spans(row_groups: &[Vec<usize>], col_groups: &[Vec<usize>], cell_groups: &[Vec<usize>], n: usize) -> Result<Vec<Span>> {
    let extent = |groups: &[Vec<usize>], what: &str| -> Result<Vec<(usize, usize)>> {
        let mut lo = vec![usize::MAX; n];
        let mut hi = vec![0; n];
        for (k, g) in groups.iter().enumerate() {
            for &i in g {
                if i >= n {
                    return Err(Error::contract(format!("{what} group refers to element {i} of {n}")));
                }
                lo[i] = lo[i].min(k);
                hi[i] = hi[i].max(k);
            }
        }
        lo.iter()
            .zip(&hi)
            .enumerate()
            .map(|(i, (&l, &h))| {
                if l == usize::MAX {
                    Err(Error::contract(format!("element {i} belongs to no {what} group")))
                } else {
                    Ok((l, h))
                }
            })
            .collect()
    };
    let rows = extent(row_groups, "row")?;
    let cols = extent(col_groups, "column")?;
    let mut spans: Vec<Span> = rows
        .iter()
        .zip(&cols)
        .map(|(&(r0, r1), &(c0, c1))| Span::new(r0, r1, c0, c1))
        .collect();

    // Union-find over cell groups, then one merged span per class.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for g in cell_groups {
        for w in g.windows(2) {
            if w[0] >= n || w[1] >= n {
                return Err(Error::contract("cell group refers to a missing element"));
            }
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[a] = b;
        }
    }
    let mut merged: BTreeMap<usize, Span> = BTreeMap::new();
    for (i, s) in spans.iter().enumerate() {
        let root = find(&mut parent, i);
        merged
            .entry(root)
            .and_modify(|m| {
                *m = Span::new(
                    m.start_row.min(s.start_row),
                    m.end_row.max(s.end_row),
                    m.start_col.min(s.start_col),
                    m.end_col.max(s.end_col),
                )
            })
            .or_insert(*s);
    }
    for (i, s) in spans.iter_mut().enumerate() {
        *s = merged[&find(&mut parent, i)];
    }
    Ok(spans)
}

/// Spans of `sample` recovered from relation scores.
pub fn spans_from_scores(
    scores: &[Vec<f64>; 3],
    elements: &[TableElement],
    threshold: f64,
) -> Result<Vec<Span>> {
    let n = elements.len();
    let ys: Vec<f64> = elements.iter().map(|e| e.bbox.y).collect();
    let xs: Vec<f64> = elements.iter().map(|e| e.bbox.x).collect();
    let rows = belonging_lists(&scores[Relation::Row as usize], n, threshold, &ys)?;
    let cols = belonging_lists(&scores[Relation::Col as usize], n, threshold, &xs)?;
    let cells = belonging_lists(&scores[Relation::Cell as usize], n, threshold, &xs)?;
    to_spans(&rows, &cols, &cells, n)
}

pub fn spans_from_relations(rel: &RelationMatrices, elements: &[TableElement], threshold: f64) -> Result<Vec<Span>> {
    let scores = Relation::ALL.map(|r| rel.get(r).to_probabilities());
    spans_from_scores(&scores, elements, threshold)
}

/// Two logical cells claiming the same grid position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridConflict {
    pub row: usize,
    pub col: usize,
    pub first: Span,
    pub second: Span,
}

impl fmt::Display for GridConflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}) claimed by {:?} and {:?}", self.row, self.col, self.first, self.second)
    }
}

/// Distinct spans in row-major order of their start.
pub fn logical_cells(spans: &[Span]) -> Vec<Span> {
    let mut cells: Vec<Span> = spans.to_vec();
    cells.sort_by_key(|s| (s.start_row, s.start_col, s.end_row, s.end_col));
    cells.dedup();
    cells
}

/// Grid occupancy; `Err` lists every position claimed twice.
fn occupancy(cells: &[Span]) -> std::result::Result<(usize, usize, Vec<Option<usize>>), Vec<GridConflict>> {
    let rows = cells.iter().map(|s| s.end_row + 1).max().unwrap_or(0);
    let cols = cells.iter().map(|s| s.end_col + 1).max().unwrap_or(0);
    let mut grid: Vec<Option<usize>> = vec![None; rows * cols];
    let mut conflicts = Vec::new();
    for (k, s) in cells.iter().enumerate() {
        for r in s.start_row..=s.end_row {
            for c in s.start_col..=s.end_col {
                match grid[r * cols + c] {
                    Some(other) => conflicts.push(GridConflict {
                        row: r,
                        col: c,
                        first: cells[other],
                        second: *s,
                    }),
                    None => grid[r * cols + c] = Some(k),
                }
            }
        }
    }
    if conflicts.is_empty() {
        Ok((rows, cols, grid))
    } else {
        Err(conflicts)
    }
}

/// `<table>`, then per grid row `<tr>`, one `<td …>`/`</td>` per cell
/// starting in that row (empty positions become plain cells), `</tr>`, and
/// finally `</table>`.
pub fn to_html(spans: &[Span]) -> Result<Vec<String>> {
    if spans.iter().any(|s| !s.is_ordered()) {
        return Err(Error::contract("span start exceeds its end"));
    }
    let cells = logical_cells(spans);
    let (rows, cols, grid) = occupancy(&cells).map_err(|c| {
        let listed: Vec<String> = c.iter().map(ToString::to_string).collect();
        Error::data(format!("inconsistent grid: {}", listed.join("; ")))
    })?;
    let mut out = vec!["<table>".to_string()];
    for r in 0..rows {
        out.push("<tr>".into());
        for c in 0..cols {
            match grid[r * cols + c] {
                Some(k) if cells[k].start_row == r && cells[k].start_col == c => {
                    out.push(td_token(&cells[k]));
                    out.push("</td>".into());
                }
                Some(_) => {}
                None => {
                    out.push("<td>".into());
                    out.push("</td>".into());
                }
            }
        }
        out.push("</tr>".into());
    }
    out.push("</table>".into());
    Ok(out)
}

/// One cell of the XML document.
#[derive(Clone, Debug, PartialEq)]
pub struct XmlCell {
    pub span: Span,
    pub bbox: BoundingBox,
    pub content: String,
}

/// Logical cells with merged boxes and contents, in row-major order.
pub fn xml_cells(spans: &[Span], elements: &[TableElement]) -> Result<Vec<XmlCell>> {
    if spans.len() != elements.len() {
        return Err(Error::contract(format!("{} spans for {} elements", spans.len(), elements.len())));
    }
    Ok(logical_cells(spans)
        .into_iter()
        .map(|span| {
            let members: Vec<&TableElement> = spans
                .iter()
                .zip(elements)
                .filter(|(s, _)| **s == span)
                .map(|(_, e)| e)
                .collect();
            let bbox = members[1..].iter().fold(members[0].bbox, |b, e| b.union(&e.bbox));
            let content = members.iter().flat_map(|e| e.text.iter().map(String::as_str)).collect::<Vec<_>>().join(" ");
            XmlCell { span, bbox, content }
        })
        .collect())
}

fn xml_err(e: impl fmt::Display) -> Error {
    Error::data(format!("xml: {e}"))
}

/// Document of `<cell start-row end-row start-col end-col>` nodes, each with
/// a `<bbox x0 y0 x1 y1/>` and a `<content>` child.
pub fn to_xml(spans: &[Span], elements: &[TableElement]) -> Result<String> {
    let cells = xml_cells(spans, elements)?;
    let mut w = Writer::new_with_indent(Vec::new(), b' ', 2);
    let io = |r: std::io::Result<()>| r.map_err(xml_err);
    io(w.write_event(Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None))))?;
    io(w.write_event(Event::Start(BytesStart::new("table"))))?;
    for c in &cells {
        let mut cell = BytesStart::new("cell");
        for (k, v) in [
            ("start-row", c.span.start_row),
            ("end-row", c.span.end_row),
            ("start-col", c.span.start_col),
            ("end-col", c.span.end_col),
        ] {
            cell.push_attribute((k, v.to_string().as_str()));
        }
        io(w.write_event(Event::Start(cell)))?;
        let mut bbox = BytesStart::new("bbox");
        for (k, v) in [
            ("x0", c.bbox.left()),
            ("y0", c.bbox.top()),
            ("x1", c.bbox.right()),
            ("y1", c.bbox.bottom()),
        ] {
            bbox.push_attribute((k, v.to_string().as_str()));
        }
        io(w.write_event(Event::Empty(bbox)))?;
        io(w.write_event(Event::Start(BytesStart::new("content"))))?;
        io(w.write_event(Event::Text(BytesText::new(&c.content))))?;
        io(w.write_event(Event::End(BytesEnd::new("content"))))?;
        io(w.write_event(Event::End(BytesEnd::new("cell"))))?;
    }
    io(w.write_event(Event::End(BytesEnd::new("table"))))?;
    let mut bytes = w.into_inner();
    bytes.push(b'\n');
    String::from_utf8(bytes).map_err(xml_err)
}

pub fn parse_xml(text: &str) -> Result<Vec<XmlCell>> {
    let mut reader = Reader::from_str(text);
    let mut cells = Vec::new();
    let mut current: Option<(BTreeMap<String, String>, Option<BoundingBox>, String)> = None;
    let mut in_content = false;
    let attrs = |e: &BytesStart| -> Result<BTreeMap<String, String>> {
        e.attributes()
            .map(|a| {
                let a = a.map_err(xml_err)?;
                let k = String::from_utf8_lossy(a.key.as_ref()).into_owned();
                Ok((k, a.unescape_value().map_err(xml_err)?.into_owned()))
            })
            .collect()
    };
    let num = |m: &BTreeMap<String, String>, k: &str| -> Result<f64> {
        m.get(k)
            .ok_or_else(|| Error::data(format!("xml: missing attribute {k}")))?
            .parse()
            .map_err(|_| Error::data(format!("xml: attribute {k} is not a number")))
    };
    loop {
        match reader.read_event().map_err(xml_err)? {
            Event::Start(e) if e.name().as_ref() == b"cell" => current = Some((attrs(&e)?, None, String::new())),
            Event::Empty(e) if e.name().as_ref() == b"cell" => {
                attrs(&e)?;
                return Err(Error::data("xml: cell without bbox"));
            }
            Event::Start(e) if e.name().as_ref() == b"content" => in_content = true,
            Event::End(e) if e.name().as_ref() == b"content" => in_content = false,
            Event::Empty(e) if e.name().as_ref() == b"bbox" => {
                let a = attrs(&e)?;
                let b = BoundingBox::from_corners(num(&a, "x0")?, num(&a, "y0")?, num(&a, "x1")?, num(&a, "y1")?);
                if let Some(c) = current.as_mut() {
                    c.1 = Some(b);
                }
            }
            Event::Text(t) if in_content => {
                if let Some(c) = current.as_mut() {
                    c.2.push_str(&t.decode().map_err(xml_err)?);
                }
            }
            Event::GeneralRef(r) if in_content => {
                let resolved = match r.resolve_char_ref().map_err(xml_err)? {
                    Some(ch) => ch.to_string(),
                    None => {
                        let name = r.decode().map_err(xml_err)?;
                        quick_xml::escape::resolve_predefined_entity(&name)
                            .ok_or_else(|| Error::data(format!("xml: unknown entity {name}")))?
                            .to_string()
                    }
                };
                if let Some(c) = current.as_mut() {
                    c.2.push_str(&resolved);
                }
            }
            Event::End(e) if e.name().as_ref() == b"cell" => {
                let (a, bbox, content) = current.take().ok_or_else(|| Error::data("xml: stray </cell>"))?;
                let idx = |k: &str| num(&a, k).map(|v| v as usize);
                cells.push(XmlCell {
                    span: Span::new(idx("start-row")?, idx("end-row")?, idx("start-col")?, idx("end-col")?),
                    bbox: bbox.ok_or_else(|| Error::data("xml: cell without bbox"))?,
                    content,
                });
            }
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(cells)
}

/// Ordered labeled tree of a tag sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub label: String,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn leaf(label: impl Into<String>) -> Self {
        TreeNode {
            label: label.into(),
            children: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(TreeNode::size).sum::<usize>()
    }
}

/// `table` → `tr` → `td` tree; td labels carry their span attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructureTree {
    pub root: TreeNode,
}

fn tag_label(token: &str) -> Option<(bool, String)> {
    let inner = token.strip_prefix('<')?.strip_suffix('>')?;
    match inner.strip_prefix('/') {
        Some(name) => Some((false, name.to_string())),
        None => Some((true, inner.to_string())),
    }
}

impl StructureTree {
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        let mut stack: Vec<TreeNode> = Vec::new();
        let mut root = None;
        for t in tokens {
            let (open, label) = tag_label(t).ok_or_else(|| Error::data(format!("not a tag: {t:?}")))?;
            if open {
                if root.is_some() {
                    return Err(Error::data("content after the closing root tag"));
                }
                stack.push(TreeNode::leaf(label));
                continue;
            }
            let node = stack.pop().ok_or_else(|| Error::data(format!("unmatched {t}")))?;
            let name = node.label.split_whitespace().next().unwrap_or_default();
            if name != label {
                return Err(Error::data(format!("{t} closes <{}>", node.label)));
            }
            match stack.last_mut() {
                Some(parent) => parent.children.push(node),
                None => root = Some(node),
            }
        }
        if !stack.is_empty() {
            return Err(Error::data("unclosed tags"));
        }
        Ok(StructureTree {
            root: root.ok_or_else(|| Error::data("empty tag sequence"))?,
        })
    }

    pub fn from_spans(spans: &[Span]) -> Result<Self> {
        StructureTree::from_tokens(&to_html(spans)?)
    }

    pub fn to_tokens(&self) -> Vec<String> {
        fn walk(n: &TreeNode, out: &mut Vec<String>) {
            out.push(format!("<{}>", n.label));
            for c in &n.children {
                walk(c, out);
            }
            let name = n.label.split_whitespace().next().unwrap_or_default();
            out.push(format!("</{name}>"));
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    pub fn size(&self) -> usize {
        self.root.size()
    }
}

/// Tag sequence of a labeled sample's ground truth.
pub fn ground_truth_html(sample: &TableSample) -> Result<Vec<String>> {
    to_html(&sample.spans()?)
}
