//! Evaluation: the graph-edit-distance compatibility metric, layout
//! rasterization, and a histogram diversity proxy over raster sets.

use std::cmp::Reverse;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gtgan_autodiff::{ParamStore64, Rng, Tensor64};

use crate::error::{GtganError, Result};
use crate::generator::{generate, Generator};
use crate::graph::{
    extract_bubble_diagram, graph_edit_distance, BubbleDiagram, Layout, RoomType,
    ROOM_TYPE_COUNT,
};

/// Fixed room-type palette (RGB), index-aligned with the type codes.
pub const RASTER_PALETTE: [[u8; 3]; ROOM_TYPE_COUNT] = [
    [238, 67, 49],   // living room
    [250, 165, 25],  // kitchen
    [81, 140, 202],  // bedroom
    [117, 199, 219], // bathroom
    [150, 86, 162],  // closet
    [119, 187, 77],  // balcony
    [237, 112, 159], // corridor
    [249, 223, 70],  // dining room
    [132, 151, 85],  // laundry room
    [140, 140, 140], // unknown
];

pub const RASTER_BACKGROUND: [u8; 3] = [255, 255, 255];

/// Graph edit distance between the input diagram and the diagram read back
/// off the generated layout. Lower is better; zero means the layout realizes
/// every requested adjacency and nothing else.
pub fn compatibility(input: &BubbleDiagram, layout: &Layout) -> Result<u32> {
    if layout.rooms.is_empty() {
        return Err(GtganError::InvalidInput(
            "compatibility of an empty layout".into(),
        ));
    }
    graph_edit_distance(input, &extract_bubble_diagram(layout))
}

/// RGB image of a layout at a given canvas size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub size: u32,
    /// Row-major RGB triples.
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[(y * self.size + x) as usize]
    }

    /// Fraction of canvas pixels covered by each room-type color.
    pub fn coverage_histogram(&self) -> [f64; ROOM_TYPE_COUNT] {
        let mut hist = [0.0; ROOM_TYPE_COUNT];
        for px in &self.pixels {
            if let Some(code) = RASTER_PALETTE.iter().position(|c| c == px) {
                hist[code] += 1.0;
            }
        }
        let total = self.pixels.len() as f64;
        for h in &mut hist {
            *h /= total;
        }
        hist
    }

    /// Binary PPM (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        for px in &self.pixels {
            out.extend_from_slice(px);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Paints rooms largest-area first on a white canvas so smaller rooms
/// overdraw larger ones. Area ties break by room-type code, then by
/// coordinates, making the raster independent of room list order.
pub fn rasterize(layout: &Layout, canvas: u32) -> Raster {
    let mut order: Vec<&crate::graph::Rect> = layout.rooms.iter().collect();
    order.sort_by_key(|r| {
        (
            Reverse(r.area()),
            r.room_type.code(),
            r.x_min,
            r.y_min,
            r.x_max,
            r.y_max,
        )
    });
    let mut pixels = vec![RASTER_BACKGROUND; (canvas * canvas) as usize];
    for room in order {
        let color = RASTER_PALETTE[room.room_type.code()];
        for y in room.y_min..=room.y_max.min(canvas - 1) {
            for x in room.x_min..=room.x_max.min(canvas - 1) {
                pixels[(y * canvas + x) as usize] = color;
            }
        }
    }
    Raster {
        size: canvas,
        pixels,
    }
}

/// Grayscale PGM (P5) encoding of a probability mask, for mask dumps.
pub fn mask_to_pgm(mask: &Tensor64) -> Vec<u8> {
    let shape = mask.shape();
    let (h, w) = match shape.len() {
        3 => (shape[1], shape[2]),
        _ => (shape[0], shape[1]),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        mask.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Mean pairwise L2 distance between color-coverage histograms, averaged
/// over all ordered pairs (self-pairs included, so uniformly duplicating the
/// set leaves the value unchanged). Higher means more diverse. This proxy is
/// not comparable to feature-space distribution distances reported by
/// pretrained-network metrics.
pub fn diversity_proxy(rasters: &[Raster]) -> Result<f64> {
    if rasters.len() < 2 {
        return Err(GtganError::InvalidInput(
            "diversity needs at least two rasters".into(),
        ));
    }
    let hists: Vec<[f64; ROOM_TYPE_COUNT]> =
        rasters.iter().map(Raster::coverage_histogram).collect();
    let n = hists.len();
    let mut total = 0.0;
    for a in &hists {
        for b in &hists {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            total += d2.sqrt();
        }
    }
    Ok(total / (n * n) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub compatibility: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_compatibility: f64,
    pub median_compatibility: f64,
    pub diversity_proxy: f64,
    pub samples: Vec<SampleEval>,
}

/// Generates one layout per input diagram (seeds forked deterministically
/// from `seed`) and aggregates compatibility plus the diversity proxy.
pub fn evaluate(
    generator: &Generator,
    params: &ParamStore64,
    diagrams: &[BubbleDiagram],
    seed: u64,
) -> Result<(EvalReport, Vec<Layout>)> {
    if diagrams.is_empty() {
        return Err(GtganError::InvalidInput("empty evaluation set".into()));
    }
    let mut rng = Rng::new(seed);
    let mut samples = Vec::with_capacity(diagrams.len());
    let mut rasters = Vec::with_capacity(diagrams.len());
    let mut layouts = Vec::with_capacity(diagrams.len());
    for (index, diagram) in diagrams.iter().enumerate() {
        let (layout, _, _) = generate(generator, params, diagram, rng.next_u64())?;
        let ged = compatibility(diagram, &layout)?;
        samples.push(SampleEval {
            index,
            compatibility: ged,
        });
        rasters.push(rasterize(&layout, generator.config.mask_size as u32));
        layouts.push(layout);
    }
    let mut values: Vec<u32> = samples.iter().map(|s| s.compatibility).collect();
    values.sort_unstable();
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    let median = if values.len() % 2 == 1 {
        values[values.len() / 2] as f64
    } else {
        (values[values.len() / 2 - 1] as f64 + values[values.len() / 2] as f64) / 2.0
    };
    let diversity = if rasters.len() >= 2 {
        diversity_proxy(&rasters)?
    } else {
        0.0
    };
    Ok((
        EvalReport {
            mean_compatibility: mean,
            median_compatibility: median,
            diversity_proxy: diversity,
            samples,
        },
        layouts,
    ))
}

/// True room-type intent of a palette color, used by tests.
pub fn palette_color(t: RoomType) -> [u8; 3] {
    RASTER_PALETTE[t.code()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Rect;

    #[test]
    fn compatibility_of_ground_truth_layout_is_zero() {
        let layout = Layout::new(vec![
            Rect::new(0, 0, 15, 31, RoomType::LivingRoom).unwrap(),
            Rect::new(16, 0, 31, 31, RoomType::Kitchen).unwrap(),
        ]);
        let diagram = extract_bubble_diagram(&layout);
        assert_eq!(compatibility(&diagram, &layout).unwrap(), 0);
    }

    #[test]
    fn breaking_one_adjacency_costs_one() {
        let layout = Layout::new(vec![
            Rect::new(0, 0, 10, 10, RoomType::LivingRoom).unwrap(),
            Rect::new(11, 0, 20, 10, RoomType::Kitchen).unwrap(),
        ]);
        let diagram = extract_bubble_diagram(&layout);
        assert_eq!(diagram.edge_count(), 1);
        // Translate the kitchen away so the adjacency is lost.
        let broken = Layout::new(vec![
            layout.rooms[0],
            Rect::new(25, 20, 31, 30, RoomType::Kitchen).unwrap(),
        ]);
        assert_eq!(compatibility(&diagram, &broken).unwrap(), 1);
    }

    #[test]
    fn empty_layout_rasterizes_white() {
        let raster = rasterize(&Layout::new(vec![]), 8);
        assert!(raster.pixels.iter().all(|&p| p == RASTER_BACKGROUND));
    }

    #[test]
    fn full_canvas_room_paints_uniformly() {
        let layout = Layout::new(vec![Rect::new(0, 0, 7, 7, RoomType::Balcony).unwrap()]);
        let raster = rasterize(&layout, 8);
        assert!(raster
            .pixels
            .iter()
            .all(|&p| p == palette_color(RoomType::Balcony)));
    }

    #[test]
    fn smaller_room_overdraws_overlap() {
        let layout = Layout::new(vec![
            Rect::new(0, 0, 7, 7, RoomType::LivingRoom).unwrap(),
            Rect::new(2, 2, 4, 4, RoomType::Closet).unwrap(),
        ]);
        let raster = rasterize(&layout, 8);
        assert_eq!(raster.pixel(3, 3), palette_color(RoomType::Closet));
        assert_eq!(raster.pixel(0, 0), palette_color(RoomType::LivingRoom));
        // Raster independent of room list order.
        let swapped = Layout::new(vec![layout.rooms[1], layout.rooms[0]]);
        assert_eq!(rasterize(&swapped, 8), raster);
    }

    #[test]
    fn identical_rasters_have_zero_diversity() {
        let layout = Layout::new(vec![Rect::new(0, 0, 5, 5, RoomType::Kitchen).unwrap()]);
        let r = rasterize(&layout, 8);
        assert_eq!(diversity_proxy(&[r.clone(), r]).unwrap(), 0.0);
    }

    #[test]
    fn duplicating_a_set_preserves_diversity() {
        let a = rasterize(
            &Layout::new(vec![Rect::new(0, 0, 3, 7, RoomType::Kitchen).unwrap()]),
            8,
        );
        let b = rasterize(
            &Layout::new(vec![Rect::new(0, 0, 7, 7, RoomType::Bedroom).unwrap()]),
            8,
        );
        let base = diversity_proxy(&[a.clone(), b.clone()]).unwrap();
        let doubled = diversity_proxy(&[a.clone(), b.clone(), a, b]).unwrap();
        assert!((base - doubled).abs() <= 1e-15);
    }

    #[test]
    fn diversity_matches_hand_computation_on_three_rasters() {
        let r1 = rasterize(
            &Layout::new(vec![Rect::new(0, 0, 7, 7, RoomType::Kitchen).unwrap()]),
            8,
        );
        let r2 = rasterize(
            &Layout::new(vec![Rect::new(0, 0, 7, 3, RoomType::Kitchen).unwrap()]),
            8,
        );
        let r3 = rasterize(&Layout::new(vec![]), 8);
        // Histograms: kitchen coverage 1.0, 0.5, 0.0; all other bins zero.
        // Pairwise distances: |1-.5|=.5, |1-0|=1, |.5-0|=.5; ordered pairs
        // double each, self pairs zero: mean = 2*(0.5+1+0.5)/9.
        let want = 2.0 * 2.0 / 9.0;
        let got = diversity_proxy(&[r1, r2, r3]).unwrap();
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn fewer_than_two_rasters_is_an_error() {
        let r = rasterize(&Layout::new(vec![]), 8);
        assert!(diversity_proxy(&[r]).is_err());
        assert!(diversity_proxy(&[]).is_err());
    }

    #[test]
    fn mask_pgm_has_correct_header_and_payload() {
        let mut mask = Tensor64::zeros(vec![1, 2, 2]);
        mask.data_mut()[0] = 1.0;
        mask.data_mut()[3] = 0.5;
        let pgm = mask_to_pgm(&mask);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[255, 0, 0, 128]);
    }
}
