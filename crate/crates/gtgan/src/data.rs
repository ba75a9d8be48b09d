//! Synthetic dataset generation and newline-delimited JSON persistence.
//!
//! Samples come from recursive guillotine partitions of the canvas, with
//! optional room deletions that leave non-connected nodes in the diagram.
//! The bubble diagram is always derived from the final layout through the
//! same extraction rule used at evaluation time, so the round-trip
//! invariant holds by construction and is re-checked on load.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use gtgan_autodiff::{Rng, Tensor64};

use crate::error::{GtganError, Result};
use crate::graph::{extract_bubble_diagram, BubbleDiagram, Layout, Rect, ALL_ROOM_TYPES};

pub const DATASET_SCHEMA: &str = "gtgan-dataset-v1";
/// Smallest allowed room edge, in pixels.
const MIN_ROOM_EDGE: u32 = 2;
const MAX_SYNTH_ATTEMPTS: usize = 200;

/// Room-count bands for train/eval splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoomCountSubset {
    #[serde(rename = "1-3")]
    R1To3,
    #[serde(rename = "4-6")]
    R4To6,
    #[serde(rename = "7-9")]
    R7To9,
    #[serde(rename = "10-12")]
    R10To12,
    #[serde(rename = "13+")]
    R13Plus,
}

impl RoomCountSubset {
    /// Inclusive room-count range. The open-ended band is capped at the
    /// exact edit-distance feasibility bound so every sample stays
    /// evaluatable.
    pub fn range(self) -> (usize, usize) {
        match self {
            Self::R1To3 => (1, 3),
            Self::R4To6 => (4, 6),
            Self::R7To9 => (7, 9),
            Self::R10To12 => (10, 12),
            Self::R13Plus => (13, 13),
        }
    }

    pub const ALL: [Self; 5] = [
        Self::R1To3,
        Self::R4To6,
        Self::R7To9,
        Self::R10To12,
        Self::R13Plus,
    ];
}

impl fmt::Display for RoomCountSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::R1To3 => "1-3",
            Self::R4To6 => "4-6",
            Self::R7To9 => "7-9",
            Self::R10To12 => "10-12",
            Self::R13Plus => "13+",
        };
        f.write_str(s)
    }
}

impl FromStr for RoomCountSubset {
    type Err = GtganError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1-3" => Ok(Self::R1To3),
            "4-6" => Ok(Self::R4To6),
            "7-9" => Ok(Self::R7To9),
            "10-12" => Ok(Self::R10To12),
            "13+" => Ok(Self::R13Plus),
            other => Err(GtganError::InvalidInput(format!(
                "unknown subset {other:?}; expected 1-3, 4-6, 7-9, 10-12 or 13+"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub subset: RoomCountSubset,
    pub seed: u64,
    pub canvas: u32,
    /// Sampling weights over the ten room types.
    pub type_weights: [f64; 10],
    /// Probability that a sample is built with extra rooms which are then
    /// deleted, leaving spatially isolated (non-connected) nodes.
    pub deletion_prob: f64,
}

impl DatasetSpec {
    pub fn new(count: usize, subset: RoomCountSubset, seed: u64, canvas: u32) -> Self {
        Self {
            count,
            subset,
            seed,
            canvas,
            type_weights: [1.0; 10],
            deletion_prob: 0.3,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRepr {
    canvas: u32,
    diagram: BubbleDiagram,
    layout: Layout,
}

/// One training pair: bubble diagram, ground-truth rectangles, and the
/// per-room binary masks rasterized from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SampleRepr", into = "SampleRepr")]
pub struct Sample {
    pub canvas: u32,
    pub diagram: BubbleDiagram,
    pub layout: Layout,
    pub masks: Vec<Tensor64>,
}

impl Sample {
    /// Builds a sample, deriving masks and checking the diagram/layout
    /// round-trip invariant.
    pub fn new(canvas: u32, diagram: BubbleDiagram, layout: Layout) -> Result<Self> {
        for room in &layout.rooms {
            if !room.within_canvas(canvas) {
                return Err(GtganError::InvalidInput(format!(
                    "room {room:?} exceeds canvas {canvas}"
                )));
            }
        }
        let extracted = extract_bubble_diagram(&layout);
        if extracted != diagram {
            return Err(GtganError::InvalidInput(
                "diagram does not round-trip through its layout".into(),
            ));
        }
        let masks = layout
            .rooms
            .iter()
            .map(|r| mask_from_rect(r, canvas))
            .collect();
        Ok(Self {
            canvas,
            diagram,
            layout,
            masks,
        })
    }

    pub fn room_count(&self) -> usize {
        self.layout.rooms.len()
    }
}

impl TryFrom<SampleRepr> for Sample {
    type Error = GtganError;

    fn try_from(repr: SampleRepr) -> Result<Self> {
        Self::new(repr.canvas, repr.diagram, repr.layout)
    }
}

impl From<Sample> for SampleRepr {
    fn from(s: Sample) -> Self {
        Self {
            canvas: s.canvas,
            diagram: s.diagram,
            layout: s.layout,
        }
    }
}

/// Binary mask whose set pixels exactly cover the rectangle.
pub fn mask_from_rect(rect: &Rect, canvas: u32) -> Tensor64 {
    let s = canvas as usize;
    Tensor64::from_fn(vec![1, s, s], |i| {
        let y = (i / s) as u32;
        let x = (i % s) as u32;
        if rect.contains(x, y) {
            1.0
        } else {
            0.0
        }
    })
}

fn weighted_type(weights: &[f64; 10], rng: &mut Rng) -> crate::graph::RoomType {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.uniform() * total;
    for (i, &w) in weights.iter().enumerate() {
        draw -= w;
        if draw < 0.0 {
            return ALL_ROOM_TYPES[i];
        }
    }
    ALL_ROOM_TYPES[9]
}

/// Splits the canvas into `rooms` axis-aligned rectangles by repeated
/// guillotine cuts of a random splittable leaf. Returns `None` when the
/// partition cannot reach the requested count.
fn guillotine(canvas: u32, rooms: usize, rng: &mut Rng) -> Option<Vec<(u32, u32, u32, u32)>> {
    let mut leaves = vec![(0u32, 0u32, canvas - 1, canvas - 1)];
    while leaves.len() < rooms {
        let splittable: Vec<usize> = leaves
            .iter()
            .enumerate()
            .filter(|(_, &(x0, y0, x1, y1))| {
                x1 - x0 + 1 >= 2 * MIN_ROOM_EDGE || y1 - y0 + 1 >= 2 * MIN_ROOM_EDGE
            })
            .map(|(i, _)| i)
            .collect();
        if splittable.is_empty() {
            return None;
        }
        let idx = splittable[rng.below(splittable.len())];
        let (x0, y0, x1, y1) = leaves.swap_remove(idx);
        let can_v = x1 - x0 + 1 >= 2 * MIN_ROOM_EDGE;
        let can_h = y1 - y0 + 1 >= 2 * MIN_ROOM_EDGE;
        let vertical = match (can_v, can_h) {
            (true, true) => rng.chance(0.5),
            (true, false) => true,
            _ => false,
        };
        if vertical {
            let cut = x0 + MIN_ROOM_EDGE - 1 + rng.below((x1 - x0 + 2 - 2 * MIN_ROOM_EDGE) as usize + 1) as u32;
            leaves.push((x0, y0, cut, y1));
            leaves.push((cut + 1, y0, x1, y1));
        } else {
            let cut = y0 + MIN_ROOM_EDGE - 1 + rng.below((y1 - y0 + 2 - 2 * MIN_ROOM_EDGE) as usize + 1) as u32;
            leaves.push((x0, y0, x1, cut));
            leaves.push((x0, cut + 1, x1, y1));
        }
    }
    Some(leaves)
}

/// Generates one sample: a guillotine partition with the room count drawn
/// from the subset band, random weighted room types, and (sometimes) extra
/// rooms deleted afterwards to produce non-connected nodes.
pub fn synthesize_sample(spec: &DatasetSpec, rng: &mut Rng) -> Result<Sample> {
    let (lo, hi) = spec.subset.range();
    for _ in 0..MAX_SYNTH_ATTEMPTS {
        let k = rng.range_inclusive(lo, hi);
        let extra = if k > 1 && rng.chance(spec.deletion_prob) {
            rng.range_inclusive(1, 2)
        } else {
            0
        };
        let Some(mut cells) = guillotine(spec.canvas, k + extra, rng) else {
            continue;
        };
        for _ in 0..extra {
            cells.swap_remove(rng.below(cells.len()));
        }
        // Canonical room order: top-left corner, row-major.
        cells.sort_by_key(|&(x0, y0, _, _)| (y0, x0));
        let rooms = cells
            .into_iter()
            .map(|(x0, y0, x1, y1)| {
                Rect::new(x0, y0, x1, y1, weighted_type(&spec.type_weights, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = Layout::new(rooms);
        let diagram = extract_bubble_diagram(&layout);
        return Sample::new(spec.canvas, diagram, layout);
    }
    Err(GtganError::InvalidInput(format!(
        "could not partition a {}px canvas into {lo}..={hi} rooms",
        spec.canvas
    )))
}

/// Deterministic dataset: one forked generator per sample.
pub fn synthesize_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let mut rng = Rng::new(spec.seed);
    (0..spec.count)
        .map(|_| {
            let mut child = rng.fork();
            synthesize_sample(spec, &mut child)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
}

pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer(
        &mut file,
        &DatasetHeader {
            schema: DATASET_SCHEMA.into(),
        },
    )?;
    file.write_all(b"\n")?;
    for sample in samples {
        serde_json::to_writer(&mut file, sample)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 {
            let header: DatasetHeader =
                serde_json::from_str(&line).map_err(|e| GtganError::DataFormat {
                    line: line_no,
                    msg: format!("bad header: {e}"),
                })?;
            if header.schema != DATASET_SCHEMA {
                return Err(GtganError::DataFormat {
                    line: line_no,
                    msg: format!("schema {:?}, expected {DATASET_SCHEMA:?}", header.schema),
                });
            }
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| GtganError::DataFormat {
            line: line_no,
            msg: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}
