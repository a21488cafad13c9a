// JSON document form of a TableSample.
//
//   {
//     "format": "ncgm-table-sample/1",
//     "width": W, "height": H,
//     "image": base64 of the W*H grayscale bytes, row-major,
//     "elements": [ { "box": {"x","y","w","h"}, "text": [tokens],
//                     "span": {"start_row","end_row","start_col","end_col"} | null } ],
//     "relations": { "cell": ["0110", ...], "row": [...], "col": [...] }   (optional)
//   }
//
// When "relations" is absent it is rebuilt from the spans on read.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{build_adjacency, AdjMatrix, BoundingBox, Raster, RelationMatrices, Span, TableElement, TableSample};
use crate::error::{Error, Result};

const FORMAT: &str = "ncgm-table-sample/1";

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SampleDocument {
    pub format: String,
    pub width: usize,
    pub height: usize,
    pub image: String,
    pub elements: Vec<ElementDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relations: Option<RelationsDoc>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ElementDoc {
    #[serde(rename = "box")]
    pub bbox: BoxDoc,
    pub text: Vec<String>,
    pub span: Option<SpanDoc>,
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq)]
pub struct BoxDoc {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq)]
pub struct SpanDoc {
    pub start_row: usize,
    pub end_row: usize,
    pub start_col: usize,
    pub end_col: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct RelationsDoc {
    pub cell: Vec<String>,
    pub row: Vec<String>,
    pub col: Vec<String>,
}

fn matrix_to_doc(m: &AdjMatrix) -> Vec<String> {
    m.to_rows()
        .into_iter()
        .map(|r| r.into_iter().map(|b| if b == 1 { '1' } else { '0' }).collect())
        .collect()
}

fn matrix_from_doc(rows: &[String]) -> Result<AdjMatrix> {
    let parsed: Vec<Vec<u8>> = rows
        .iter()
        .map(|r| {
            r.chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(Error::data(format!("bad adjacency character {other:?}"))),
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    AdjMatrix::from_rows(&parsed)
}

impl SampleDocument {
    pub fn from_sample(s: &TableSample, with_relations: bool) -> Self {
        SampleDocument {
            format: FORMAT.to_string(),
            width: s.image.width,
            height: s.image.height,
            image: base64::engine::general_purpose::STANDARD.encode(&s.image.pixels),
            elements: s
                .elements
                .iter()
                .map(|e| ElementDoc {
                    bbox: BoxDoc {
                        x: e.bbox.x,
                        y: e.bbox.y,
                        w: e.bbox.w,
                        h: e.bbox.h,
                    },
                    text: e.text.clone(),
                    span: e.span.map(|s| SpanDoc {
                        start_row: s.start_row,
                        end_row: s.end_row,
                        start_col: s.start_col,
                        end_col: s.end_col,
                    }),
                })
                .collect(),
            relations: with_relations.then(|| RelationsDoc {
                cell: matrix_to_doc(&s.relations.cell),
                row: matrix_to_doc(&s.relations.row),
                col: matrix_to_doc(&s.relations.col),
            }),
        }
    }

    pub fn into_sample(self) -> Result<TableSample> {
        if self.format != FORMAT {
            return Err(Error::data(format!("unknown sample format {:?}", self.format)));
        }
        let pixels = base64::engine::general_purpose::STANDARD
            .decode(self.image.as_bytes())
            .map_err(|e| Error::data(format!("image is not valid base64: {e}")))?;
        if pixels.len() != self.width * self.height {
            return Err(Error::data(format!(
                "image has {} bytes, expected {}x{}",
                pixels.len(),
                self.width,
                self.height
            )));
        }
        let elements: Vec<TableElement> = self
            .elements
            .into_iter()
            .map(|e| TableElement {
                bbox: BoundingBox {
                    x: e.bbox.x,
                    y: e.bbox.y,
                    w: e.bbox.w,
                    h: e.bbox.h,
                },
                text: e.text,
                span: e.span.map(|s| Span::new(s.start_row, s.end_row, s.start_col, s.end_col)),
            })
            .collect();
        let relations = match self.relations {
            Some(r) => RelationMatrices {
                cell: matrix_from_doc(&r.cell)?,
                row: matrix_from_doc(&r.row)?,
                col: matrix_from_doc(&r.col)?,
            },
            None => build_adjacency(&elements)?,
        };
        Ok(TableSample {
            image: Raster {
                width: self.width,
                height: self.height,
                pixels,
            },
            elements,
            relations,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("sample documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::data(format!("malformed sample document: {e}")))
    }
}

pub fn write_sample(path: impl AsRef<Path>, s: &TableSample) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, SampleDocument::from_sample(s, true).to_json()).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: impl AsRef<Path>) -> Result<TableSample> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SampleDocument::from_json(&text)?.into_sample()
}
