//! Graph-transformer generator: node feature initialization, three
//! message-passing levels with transposed-convolution upsampling between
//! them, and the mask head with rectangle fitting.

use serde::{Deserialize, Serialize};

use gtgan_autodiff::{Bound, ParamStore64, Rng, Tape64, Tensor64, Var};

use crate::error::{GtganError, Result};
use crate::graph::{one_hot, BubbleDiagram, Layout, Rect, ROOM_TYPE_COUNT};
use crate::mpn::{AttentionRecord, ConvMpnVariant, MpnConfig, MpnLayer};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub base_channels: usize,
    /// Output mask edge length; must be divisible by 4 (two doublings from
    /// the initial volume resolution).
    pub mask_size: usize,
    pub heads: usize,
    pub blocks: usize,
    pub variant: ConvMpnVariant,
    pub use_cna: bool,
    pub use_nna: bool,
    pub use_gmb: bool,
    pub use_head_projections: bool,
    pub share_branch_weights: bool,
    /// Channel widths of the first two head convolutions (the third emits
    /// the single mask channel).
    pub head_channels: (usize, usize),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise_dim: 128,
            base_channels: 16,
            mask_size: 32,
            heads: 2,
            blocks: 8,
            variant: ConvMpnVariant::Eq2,
            use_cna: true,
            use_nna: true,
            use_gmb: true,
            use_head_projections: false,
            share_branch_weights: false,
            head_channels: (256, 128),
        }
    }
}

impl GeneratorConfig {
    /// Shrunk dimensions for CPU-scale training runs and fast tests.
    pub fn desk() -> Self {
        Self {
            noise_dim: 16,
            base_channels: 8,
            mask_size: 12,
            heads: 1,
            blocks: 1,
            head_channels: (16, 8),
            ..Self::default()
        }
    }

    /// Even smaller dimensions for finite-difference sweeps.
    pub fn tiny() -> Self {
        Self {
            noise_dim: 4,
            base_channels: 4,
            mask_size: 8,
            heads: 1,
            blocks: 1,
            head_channels: (8, 4),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_size == 0 || !self.mask_size.is_multiple_of(4) {
            return Err(GtganError::InvalidInput(format!(
                "mask_size {} must be a positive multiple of 4",
                self.mask_size
            )));
        }
        if self.noise_dim == 0
            || self.base_channels == 0
            || self.heads == 0
            || self.blocks == 0
            || self.head_channels.0 == 0
            || self.head_channels.1 == 0
        {
            return Err(GtganError::InvalidInput(
                "generator dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.noise_dim + ROOM_TYPE_COUNT
    }

    fn level_size(&self, level: usize) -> usize {
        (self.mask_size / 4) << level
    }

    fn mpn_config(&self) -> MpnConfig {
        MpnConfig {
            channels: self.base_channels,
            heads: self.heads,
            blocks: self.blocks,
            variant: self.variant,
            use_cna: self.use_cna,
            use_nna: self.use_nna,
            use_gmb: self.use_gmb,
            use_head_projections: self.use_head_projections,
            share_branch_weights: self.share_branch_weights,
        }
    }
}

/// Everything a generator forward pass leaves on the tape.
pub struct GenForward {
    /// Per-room sigmoid masks of shape `[1, S, S]`.
    pub masks: Vec<Var>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn level(&self, l: usize) -> MpnLayer {
        MpnLayer::new(format!("gen.mpn{l}"), self.config.mpn_config())
    }

    /// Deterministic parameter initialization: Kaiming-uniform weights, zero
    /// biases, zero attention gates.
    pub fn init_params(&self, seed: u64) -> ParamStore64 {
        let cfg = &self.config;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore64::new();
        let c = cfg.base_channels;
        let s0 = cfg.level_size(0);
        let expand_out = c * s0 * s0;
        let feat = cfg.feature_dim();
        p.add_kaiming("gen.expand.w", vec![expand_out, feat], feat, &mut rng);
        p.add_zeros("gen.expand.b", vec![expand_out]);

        for level in 0..3 {
            self.level(level).register(&mut p, &mut rng);
            if level < 2 {
                p.add_kaiming(
                    format!("gen.up{level}.w"),
                    vec![c, c, 4, 4],
                    c * 16,
                    &mut rng,
                );
                p.add_zeros(format!("gen.up{level}.b"), vec![c]);
            }
        }

        let (h0, h1) = cfg.head_channels;
        p.add_kaiming("gen.head.conv0.w", vec![h0, c, 3, 3], c * 9, &mut rng);
        p.add_zeros("gen.head.conv0.b", vec![h0]);
        p.add_kaiming("gen.head.conv1.w", vec![h1, h0, 3, 3], h0 * 9, &mut rng);
        p.add_zeros("gen.head.conv1.b", vec![h1]);
        p.add_kaiming("gen.head.conv2.w", vec![1, h1, 3, 3], h1 * 9, &mut rng);
        p.add_zeros("gen.head.conv2.b", vec![1]);
        p
    }

    /// Full forward pass from per-node feature vectors to sigmoid masks.
    /// `features` come from [`init_node_features`] (or a permuted copy for
    /// equivariance checks).
    pub fn forward(
        &self,
        tape: &mut Tape64,
        params: &Bound,
        g: &BubbleDiagram,
        features: &[Vec<f64>],
    ) -> Result<GenForward> {
        let cfg = &self.config;
        if g.node_count() == 0 {
            return Err(GtganError::InvalidInput("empty bubble diagram".into()));
        }
        if features.len() != g.node_count() {
            return Err(GtganError::InvalidInput(format!(
                "{} feature vectors for {} nodes",
                features.len(),
                g.node_count()
            )));
        }
        let mut attention = Vec::new();

        // Expand each feature vector to the initial volume with the shared
        // linear layer.
        let c = cfg.base_channels;
        let s0 = cfg.level_size(0);
        let w = params.var("gen.expand.w");
        let b = params.var("gen.expand.b");
        let mut nodes: Vec<Var> = Vec::with_capacity(g.node_count());
        for f in features {
            if f.len() != cfg.feature_dim() {
                return Err(GtganError::InvalidInput(format!(
                    "feature vector length {} != {}",
                    f.len(),
                    cfg.feature_dim()
                )));
            }
            let v = tape.constant(Tensor64::new(vec![f.len()], f.clone())?);
            let expanded = tape.linear(v, w, Some(b))?;
            nodes.push(tape.reshape(expanded, vec![c, s0, s0])?);
        }

        for level in 0..3 {
            nodes = self
                .level(level)
                .forward(tape, params, g, &nodes, &mut attention)?;
            if level < 2 {
                let up_w = params.var(&format!("gen.up{level}.w"));
                let up_b = params.var(&format!("gen.up{level}.b"));
                for node in nodes.iter_mut() {
                    let up = tape.conv_transpose2d(*node, up_w, 2, 1)?;
                    let up = tape.add_chan_bias(up, up_b)?;
                    *node = tape.leaky_relu(up, 0.1);
                }
            }
        }

        let masks = nodes
            .iter()
            .map(|&node| self.generation_head(tape, params, node))
            .collect::<Result<Vec<_>>>()?;
        Ok(GenForward { masks, attention })
    }

    /// Mask head: three 3x3 convolutions narrowing to one channel, then a
    /// sigmoid into [0, 1].
    pub fn generation_head(&self, tape: &mut Tape64, params: &Bound, node: Var) -> Result<Var> {
        let h = tape.conv2d(node, params.var("gen.head.conv0.w"), 1, 1)?;
        let h = tape.add_chan_bias(h, params.var("gen.head.conv0.b"))?;
        let h = tape.leaky_relu(h, 0.1);
        let h = tape.conv2d(h, params.var("gen.head.conv1.w"), 1, 1)?;
        let h = tape.add_chan_bias(h, params.var("gen.head.conv1.b"))?;
        let h = tape.leaky_relu(h, 0.1);
        let h = tape.conv2d(h, params.var("gen.head.conv2.w"), 1, 1)?;
        let h = tape.add_chan_bias(h, params.var("gen.head.conv2.b"))?;
        Ok(tape.sigmoid(h))
    }
}

/// Per-node input features: `noise_dim` standard-normal entries followed by
/// the one-hot room type.
pub fn init_node_features(g: &BubbleDiagram, seed: u64, noise_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    g.node_types()
        .iter()
        .map(|&t| {
            let mut v: Vec<f64> = (0..noise_dim).map(|_| rng.normal()).collect();
            v.extend(one_hot(t));
            v
        })
        .collect()
}

/// Tightest axis-aligned bounding box of mask pixels at or above the
/// threshold; `None` when no pixel clears it. Mask shape `[1, S, S]` or
/// `[S, S]` in row-major (y, x) order.
pub fn fit_rectangle(mask: &Tensor64, threshold: f64) -> Option<(u32, u32, u32, u32)> {
    let shape = mask.shape();
    let (height, width) = match shape.len() {
        3 if shape[0] == 1 => (shape[1], shape[2]),
        2 => (shape[0], shape[1]),
        _ => return None,
    };
    let data = mask.data();
    let mut bounds: Option<(u32, u32, u32, u32)> = None;
    for y in 0..height {
        for x in 0..width {
            if data[y * width + x] >= threshold {
                let (x, y) = (x as u32, y as u32);
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    bounds
}

/// Attention records paired with their computed matrices.
pub type AttentionDump = Vec<(AttentionRecord, Tensor64)>;

/// Deterministic end-to-end generation: layout, raw masks, and recorded
/// attention values. Rooms whose mask never clears the threshold degrade to
/// a single-pixel rectangle at the mask argmax so the layout always has one
/// room per input node.
pub fn generate(
    generator: &Generator,
    params: &ParamStore64,
    g: &BubbleDiagram,
    seed: u64,
) -> Result<(Layout, Vec<Tensor64>, AttentionDump)> {
    let features = init_node_features(g, seed, generator.config.noise_dim);
    let mut tape = Tape64::new();
    let bound = params.bind_frozen(&mut tape);
    let fwd = generator.forward(&mut tape, &bound, g, &features)?;
    let masks: Vec<Tensor64> = fwd.masks.iter().map(|&m| tape.value(m).clone()).collect();
    let attention = fwd
        .attention
        .into_iter()
        .map(|rec| {
            let value = tape.value(rec.var).clone();
            (rec, value)
        })
        .collect();
    let rooms = masks
        .iter()
        .enumerate()
        .map(|(r, mask)| {
            let (x0, y0, x1, y1) = fit_rectangle(mask, 0.5).unwrap_or_else(|| argmax_pixel(mask));
            Rect::new(x0, y0, x1, y1, g.node_type(r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Layout::new(rooms), masks, attention))
}

fn argmax_pixel(mask: &Tensor64) -> (u32, u32, u32, u32) {
    let shape = mask.shape();
    let width = shape[shape.len() - 1];
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &v) in mask.data().iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    let y = (best.0 / width) as u32;
    let x = (best.0 % width) as u32;
    (x, y, x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RoomType;
    use gtgan_autodiff::Tape;

    pub(crate) fn chain(n: usize) -> BubbleDiagram {
        let types = [
            RoomType::LivingRoom,
            RoomType::Kitchen,
            RoomType::Bedroom,
            RoomType::Bathroom,
            RoomType::Closet,
        ];
        let nodes: Vec<RoomType> = (0..n).map(|i| types[i % types.len()]).collect();
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        BubbleDiagram::new(nodes, &edges).unwrap()
    }

    #[test]
    fn node_features_have_noise_then_one_hot() {
        let g = chain(3);
        let feats = init_node_features(&g, 7, 128);
        assert_eq!(feats.len(), 3);
        for (r, f) in feats.iter().enumerate() {
            assert_eq!(f.len(), 138);
            assert_eq!(f[128..], one_hot(g.node_type(r))[..]);
        }
        assert_eq!(feats, init_node_features(&g, 7, 128));
        assert_ne!(feats, init_node_features(&g, 8, 128));
    }

    #[test]
    fn node_feature_noise_moments() {
        let g = BubbleDiagram::new(vec![RoomType::Unknown; 100], &[]).unwrap();
        let mut values = Vec::new();
        for seed in 0..100 {
            for f in init_node_features(&g, seed, 128) {
                values.extend_from_slice(&f[..128]);
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn expand_is_shared_and_zero_preserving() {
        let generator = Generator::new(GeneratorConfig::default()).unwrap();
        let params = generator.init_params(1);
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let feat = [vec![0.25; 138], vec![0.25; 138], vec![0.0; 138]];
        let w = bound.var("gen.expand.w");
        let b = bound.var("gen.expand.b");
        let mut volumes = Vec::new();
        for f in &feat {
            let v = tape.constant(Tensor64::new(vec![138], f.clone()).unwrap());
            let e = tape.linear(v, w, Some(b)).unwrap();
            volumes.push(tape.reshape(e, vec![16, 8, 8]).unwrap());
        }
        assert_eq!(tape.shape(volumes[0]), &[16, 8, 8]);
        assert_eq!(tape.value(volumes[0]).data(), tape.value(volumes[1]).data());
        assert!(tape.value(volumes[2]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_masks_have_mask_shape_for_all_variants() {
        for variant in [
            ConvMpnVariant::Eq2,
            ConvMpnVariant::Eq3,
            ConvMpnVariant::Eq4,
            ConvMpnVariant::TransformerOnly,
        ] {
            let config = GeneratorConfig {
                variant,
                ..GeneratorConfig::tiny()
            };
            let generator = Generator::new(config).unwrap();
            let params = generator.init_params(11);
            let g = chain(3);
            let mut tape = Tape64::new();
            let bound = params.bind_frozen(&mut tape);
            let features = init_node_features(&g, 5, generator.config.noise_dim);
            let fwd = generator.forward(&mut tape, &bound, &g, &features).unwrap();
            assert_eq!(fwd.masks.len(), 3);
            for &m in &fwd.masks {
                let s = generator.config.mask_size;
                assert_eq!(tape.shape(m), &[1, s, s], "{variant:?}");
            }
        }
    }

    #[test]
    fn isolated_node_at_init_reduces_to_cnn_of_input() {
        // Singleton graph, eq4, attention gates at zero, modeling block off:
        // the update must equal the plain CNN applied to the node volume.
        let config = GeneratorConfig {
            variant: ConvMpnVariant::Eq4,
            use_gmb: false,
            ..GeneratorConfig::tiny()
        };
        let generator = Generator::new(config).unwrap();
        let params = generator.init_params(21);
        let g = BubbleDiagram::new(vec![RoomType::Balcony], &[]).unwrap();
        let mut tape = Tape64::new();
        let bound = params.bind_frozen(&mut tape);
        let c = generator.config.base_channels;
        let s0 = generator.config.level_size(0);
        let x = tape.constant(Tensor64::from_fn(vec![c, s0, s0], |i| (i as f64).sin()));
        let mut attention = Vec::new();
        let updated = generator
            .level(0)
            .forward(&mut tape, &bound, &g, &[x], &mut attention)
            .unwrap();

        let w0 = bound.var("gen.mpn0.cnn0.w");
        let b0 = bound.var("gen.mpn0.cnn0.b");
        let w1 = bound.var("gen.mpn0.cnn1.w");
        let b1 = bound.var("gen.mpn0.cnn1.b");
        let h = tape.conv2d(x, w0, 1, 1).unwrap();
        let h = tape.add_chan_bias(h, b0).unwrap();
        let h = tape.leaky_relu(h, 0.1);
        let h = tape.conv2d(h, w1, 1, 1).unwrap();
        let h = tape.add_chan_bias(h, b1).unwrap();
        let direct = tape.leaky_relu(h, 0.1);
        assert_eq!(tape.value(updated[0]).data(), tape.value(direct).data());
    }

    #[test]
    fn head_range_and_zero_weight_midpoint() {
        let generator = Generator::new(GeneratorConfig::tiny()).unwrap();
        let params = generator.init_params(31);
        let g = chain(2);
        let mut tape = Tape64::new();
        let bound = params.bind_frozen(&mut tape);
        let features = init_node_features(&g, 2, generator.config.noise_dim);
        let fwd = generator.forward(&mut tape, &bound, &g, &features).unwrap();
        for &m in &fwd.masks {
            assert!(tape
                .value(m)
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }

        let mut zeroed = generator.init_params(32);
        for name in ["gen.head.conv0.w", "gen.head.conv1.w", "gen.head.conv2.w"] {
            let t = zeroed.get_mut(name).unwrap();
            let shape = t.shape().to_vec();
            *t = Tensor64::zeros(shape);
        }
        let mut tape = Tape64::new();
        let bound = zeroed.bind_frozen(&mut tape);
        let c = generator.config.base_channels;
        let s = generator.config.mask_size;
        let x = tape.constant(Tensor64::from_fn(vec![c, s, s], |i| i as f64));
        let mask = generator.generation_head(&mut tape, &bound, x).unwrap();
        assert!(tape.value(mask).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fit_rectangle_single_pixel_and_empty() {
        let mut mask = Tensor64::zeros(vec![1, 32, 32]);
        mask.data_mut()[5 * 32 + 7] = 0.9;
        assert_eq!(fit_rectangle(&mask, 0.5), Some((7, 5, 7, 5)));
        assert_eq!(fit_rectangle(&Tensor64::zeros(vec![1, 32, 32]), 0.5), None);
    }

    #[test]
    fn fit_rectangle_matches_full_scan_oracle() {
        let mut rng = Rng::new(41);
        for _ in 0..50 {
            let mask = Tensor64::from_fn(vec![1, 12, 12], |_| rng.uniform());
            let got = fit_rectangle(&mask, 0.5);
            let mut expect: Option<(u32, u32, u32, u32)> = None;
            for y in 0..12u32 {
                for x in 0..12u32 {
                    if mask.data()[(y * 12 + x) as usize] >= 0.5 {
                        expect = Some(match expect {
                            None => (x, y, x, y),
                            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                        });
                    }
                }
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn generate_is_deterministic_with_one_room_per_node() {
        let generator = Generator::new(GeneratorConfig::tiny()).unwrap();
        let params = generator.init_params(51);
        let g = chain(4);
        let (layout_a, masks_a, _) = generate(&generator, &params, &g, 9).unwrap();
        let (layout_b, masks_b, _) = generate(&generator, &params, &g, 9).unwrap();
        assert_eq!(layout_a.rooms.len(), g.node_count());
        assert_eq!(layout_a, layout_b);
        for (a, b) in masks_a.iter().zip(&masks_b) {
            assert_eq!(a.data(), b.data());
        }
        for (r, room) in layout_a.rooms.iter().enumerate() {
            assert_eq!(room.room_type, g.node_type(r));
        }
    }

    #[test]
    fn volume_shape_trace_through_both_upsamplings() {
        // Full-size configuration (single block and head to keep it quick):
        // 16x8x8 volumes, doubled twice, masks 1x32x32.
        let config = GeneratorConfig {
            blocks: 1,
            heads: 1,
            ..GeneratorConfig::default()
        };
        let generator = Generator::new(config).unwrap();
        let params = generator.init_params(61);
        let g = chain(5);
        let mut tape = Tape64::new();
        let bound = params.bind_frozen(&mut tape);
        let features = init_node_features(&g, 3, 128);
        assert_eq!(features[0].len(), 138);
        let fwd = generator.forward(&mut tape, &bound, &g, &features).unwrap();
        assert_eq!(fwd.masks.len(), 5);
        for &m in &fwd.masks {
            assert_eq!(tape.shape(m), &[1, 32, 32]);
        }
        let mut sizes: Vec<usize> = fwd
            .attention
            .iter()
            .map(|rec| tape.shape(rec.var)[0])
            .collect();
        sizes.sort_unstable();
        sizes.dedup();
        assert_eq!(sizes, vec![64, 256, 1024]);
    }
}
