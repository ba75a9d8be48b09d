//! Node-classification discriminator: embeds each room mask with its type,
//! runs two message-passing rounds with stride-2 downsampling, reduces each
//! room to a feature vector, and scores the sum-pooled graph for realism
//! plus a multi-label room-type prediction.

use serde::{Deserialize, Serialize};

use gtgan_autodiff::{Bound, ParamStore64, Rng, Tape64, Tensor64, Var};

use crate::error::{GtganError, Result};
use crate::graph::{one_hot, BubbleDiagram, RoomType, ROOM_TYPE_COUNT};
use crate::mpn::{AttentionRecord, ConvMpnVariant, MpnConfig, MpnLayer};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub mask_size: usize,
    pub room_vector_dim: usize,
    /// Channels of the reshaped room-type volume concatenated to the mask.
    pub type_channels: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Attention and graph-modeling in the message passing; disabled it
    /// degrades to the plain pooled-concat update.
    pub use_gte: bool,
    pub use_cls_head: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            mask_size: 32,
            room_vector_dim: 128,
            type_channels: 8,
            heads: 2,
            blocks: 8,
            use_gte: true,
            use_cls_head: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            mask_size: 12,
            room_vector_dim: 32,
            heads: 1,
            blocks: 1,
            ..Self::default()
        }
    }

    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            mask_size: 8,
            room_vector_dim: 8,
            type_channels: 4,
            heads: 1,
            blocks: 1,
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
        if self.base_channels == 0
            || self.room_vector_dim == 0
            || self.type_channels == 0
            || self.heads == 0
            || self.blocks == 0
        {
            return Err(GtganError::InvalidInput(
                "discriminator dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    fn mpn_config(&self) -> MpnConfig {
        MpnConfig {
            channels: self.base_channels,
            heads: self.heads,
            blocks: self.blocks,
            variant: ConvMpnVariant::Eq2,
            use_cna: self.use_gte,
            use_nna: self.use_gte,
            use_gmb: self.use_gte,
            use_head_projections: false,
            share_branch_weights: false,
        }
    }

    /// Convolution stack reducing a `[C, S/4, S/4]` room volume to the room
    /// vector: stride-2 convolutions down to 2x2 (doubling channels), then a
    /// full-kernel convolution to `room_vector_dim x 1 x 1`.
    fn rv_stack(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        let mut specs = Vec::new();
        let mut spatial = self.mask_size / 4;
        let mut channels = self.base_channels;
        while spatial > 2 {
            let k = if spatial.is_multiple_of(2) { 4 } else { 3 };
            specs.push((channels, channels * 2, k, 2, 1));
            spatial = (spatial + 2 - k) / 2 + 1;
            channels *= 2;
        }
        specs.push((channels, self.room_vector_dim, spatial, 1, 0));
        specs
    }
}

/// Realism score and room-type prediction for one graph of masks.
pub struct DiscOut {
    /// Scalar realism score (pre-activation critic value).
    pub realism: Var,
    /// Ten pre-sigmoid logits over room categories.
    pub type_logits: Option<Var>,
    pub room_vectors: Vec<Var>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn level(&self, l: usize) -> MpnLayer {
        MpnLayer::new(format!("disc.mpn{l}"), self.config.mpn_config())
    }

    pub fn init_params(&self, seed: u64) -> ParamStore64 {
        let cfg = &self.config;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore64::new();
        let c = cfg.base_channels;
        let s = cfg.mask_size;
        let tc = cfg.type_channels;

        let type_out = tc * s * s;
        p.add_kaiming(
            "disc.embed.type_lin.w",
            vec![type_out, ROOM_TYPE_COUNT],
            ROOM_TYPE_COUNT,
            &mut rng,
        );
        p.add_zeros("disc.embed.type_lin.b", vec![type_out]);
        let widths = [tc + 1, c, c, c];
        for i in 0..3 {
            p.add_kaiming(
                format!("disc.embed.cnn{i}.w"),
                vec![widths[i + 1], widths[i], 3, 3],
                widths[i] * 9,
                &mut rng,
            );
            p.add_zeros(format!("disc.embed.cnn{i}.b"), vec![widths[i + 1]]);
        }

        for round in 0..2 {
            self.level(round).register(&mut p, &mut rng);
            p.add_kaiming(
                format!("disc.down{round}.w"),
                vec![c, c, 4, 4],
                c * 16,
                &mut rng,
            );
            p.add_zeros(format!("disc.down{round}.b"), vec![c]);
        }

        for (i, (in_c, out_c, k, _, _)) in cfg.rv_stack().into_iter().enumerate() {
            p.add_kaiming(
                format!("disc.rv.conv{i}.w"),
                vec![out_c, in_c, k, k],
                in_c * k * k,
                &mut rng,
            );
            p.add_zeros(format!("disc.rv.conv{i}.b"), vec![out_c]);
        }

        let rv = cfg.room_vector_dim;
        p.add_kaiming("disc.score.w", vec![1, rv], rv, &mut rng);
        p.add_zeros("disc.score.b", vec![1]);
        if cfg.use_cls_head {
            p.add_kaiming("disc.cls.w", vec![ROOM_TYPE_COUNT, rv], rv, &mut rng);
            p.add_zeros("disc.cls.b", vec![ROOM_TYPE_COUNT]);
        }
        p
    }

    /// Shared room embedding: one-hot type expanded to a volume, channel
    /// concatenated with the mask, then three convolutions.
    pub fn embed_room(
        &self,
        tape: &mut Tape64,
        params: &Bound,
        mask: Var,
        room_type: RoomType,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = cfg.mask_size;
        if tape.shape(mask) != [1, s, s] {
            return Err(GtganError::InvalidInput(format!(
                "mask shape {:?}, expected [1, {s}, {s}]",
                tape.shape(mask)
            )));
        }
        let t = tape.constant(Tensor64::new(vec![ROOM_TYPE_COUNT], one_hot(room_type))?);
        let expanded = tape.linear(
            t,
            params.var("disc.embed.type_lin.w"),
            Some(params.var("disc.embed.type_lin.b")),
        )?;
        let type_vol = tape.reshape(expanded, vec![cfg.type_channels, s, s])?;
        let mut h = tape.concat0(&[type_vol, mask])?;
        for i in 0..3 {
            let conv = tape.conv2d(h, params.var(&format!("disc.embed.cnn{i}.w")), 1, 1)?;
            let biased = tape.add_chan_bias(conv, params.var(&format!("disc.embed.cnn{i}.b")))?;
            h = tape.leaky_relu(biased, 0.1);
        }
        Ok(h)
    }

    /// Scores a graph of room masks. `masks` may be generator outputs,
    /// ground-truth rasters, or interpolates; one per graph node, in node
    /// order.
    pub fn forward(
        &self,
        tape: &mut Tape64,
        params: &Bound,
        g: &BubbleDiagram,
        masks: &[Var],
    ) -> Result<DiscOut> {
        let cfg = &self.config;
        if masks.len() != g.node_count() || masks.is_empty() {
            return Err(GtganError::InvalidInput(format!(
                "{} masks for {} graph nodes",
                masks.len(),
                g.node_count()
            )));
        }
        let mut attention = Vec::new();
        let mut rooms: Vec<Var> = masks
            .iter()
            .zip(g.node_types())
            .map(|(&m, &t)| self.embed_room(tape, params, m, t))
            .collect::<Result<Vec<_>>>()?;

        for round in 0..2 {
            rooms = self
                .level(round)
                .forward(tape, params, g, &rooms, &mut attention)?;
            let w = params.var(&format!("disc.down{round}.w"));
            let b = params.var(&format!("disc.down{round}.b"));
            for room in rooms.iter_mut() {
                let down = tape.conv2d(*room, w, 2, 1)?;
                let down = tape.add_chan_bias(down, b)?;
                *room = tape.leaky_relu(down, 0.1);
            }
        }

        let specs = cfg.rv_stack();
        let room_vectors: Vec<Var> = rooms
            .iter()
            .map(|&room| {
                let mut h = room;
                for (i, (_, out_c, _, stride, pad)) in specs.iter().enumerate() {
                    let conv =
                        tape.conv2d(h, params.var(&format!("disc.rv.conv{i}.w")), *stride, *pad)?;
                    let biased =
                        tape.add_chan_bias(conv, params.var(&format!("disc.rv.conv{i}.b")))?;
                    h = tape.leaky_relu(biased, 0.1);
                    debug_assert_eq!(tape.shape(h)[0], *out_c);
                }
                Ok(tape.reshape(h, vec![cfg.room_vector_dim])?)
            })
            .collect::<Result<Vec<_>>>()?;

        let pooled = tape.sum_many(&room_vectors)?;
        let score = tape.linear(
            pooled,
            params.var("disc.score.w"),
            Some(params.var("disc.score.b")),
        )?;
        let realism = tape.reshape(score, vec![])?;
        let type_logits = if cfg.use_cls_head {
            Some(tape.linear(
                pooled,
                params.var("disc.cls.w"),
                Some(params.var("disc.cls.b")),
            )?)
        } else {
            None
        };
        Ok(DiscOut {
            realism,
            type_logits,
            room_vectors,
            attention,
        })
    }
}

/// Multi-hot vector of the room types present in a layout.
pub fn present_types(types: &[RoomType]) -> Tensor64 {
    let mut v = vec![0.0; ROOM_TYPE_COUNT];
    for t in types {
        v[t.code()] = 1.0;
    }
    Tensor64::new(vec![ROOM_TYPE_COUNT], v).expect("fixed-size vector")
}

/// Mean binary cross-entropy between type logits and the multi-hot target.
pub fn classification_loss(tape: &mut Tape64, logits: Var, target: &Tensor64) -> Result<Var> {
    let t = tape.constant(target.clone());
    Ok(tape.bce_with_logits(logits, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gtgan_autodiff::Rng;

    fn masks_for(
        tape: &mut Tape64,
        n: usize,
        s: usize,
        rng: &mut Rng,
    ) -> Vec<Var> {
        (0..n)
            .map(|_| tape.constant(Tensor64::from_fn(vec![1, s, s], |_| rng.uniform())))
            .collect()
    }

    fn diagram4() -> BubbleDiagram {
        BubbleDiagram::new(
            vec![
                RoomType::LivingRoom,
                RoomType::Kitchen,
                RoomType::Bedroom,
                RoomType::Bathroom,
            ],
            &[(0, 1), (0, 2), (2, 3)],
        )
        .unwrap()
    }

    #[test]
    fn embed_room_shapes_match_published_sizes() {
        let config = DiscriminatorConfig {
            blocks: 1,
            heads: 1,
            ..DiscriminatorConfig::default()
        };
        let disc = Discriminator::new(config).unwrap();
        let params = disc.init_params(3);
        assert_eq!(
            params.get("disc.embed.type_lin.w").unwrap().shape(),
            &[8 * 32 * 32, 10]
        );
        let mut tape = Tape64::new();
        let bound = params.bind_frozen(&mut tape);
        let mask = tape.constant(Tensor64::zeros(vec![1, 32, 32]));
        let emb = disc
            .embed_room(&mut tape, &bound, mask, RoomType::Kitchen)
            .unwrap();
        assert_eq!(tape.shape(emb), &[16, 32, 32]);

        // Shared weights: identical inputs embed identically.
        let mask2 = tape.constant(Tensor64::zeros(vec![1, 32, 32]));
        let emb2 = disc
            .embed_room(&mut tape, &bound, mask2, RoomType::Kitchen)
            .unwrap();
        assert_eq!(tape.value(emb).data(), tape.value(emb2).data());
    }

    #[test]
    fn room_vectors_have_configured_length() {
        let config = DiscriminatorConfig {
            blocks: 1,
            heads: 1,
            ..DiscriminatorConfig::default()
        };
        let disc = Discriminator::new(config).unwrap();
        let params = disc.init_params(5);
        let g = BubbleDiagram::new(
            vec![RoomType::LivingRoom, RoomType::Kitchen, RoomType::Bedroom],
            &[(0, 1), (1, 2)],
        )
        .unwrap();
        let mut tape = Tape64::new();
        let bound = params.bind_frozen(&mut tape);
        let mut rng = Rng::new(7);
        let masks = masks_for(&mut tape, 3, 32, &mut rng);
        let out = disc.forward(&mut tape, &bound, &g, &masks).unwrap();
        for &rv in &out.room_vectors {
            assert_eq!(tape.shape(rv), &[128]);
        }
        assert_eq!(tape.shape(out.realism), &[] as &[usize]);
        assert_eq!(tape.shape(out.type_logits.unwrap()), &[10]);
    }

    #[test]
    fn outputs_are_room_permutation_invariant() {
        let disc = Discriminator::new(DiscriminatorConfig::tiny()).unwrap();
        let params = disc.init_params(11);
        let g = diagram4();
        let mut rng = Rng::new(13);
        let mask_data: Vec<Tensor64> = (0..4)
            .map(|_| Tensor64::from_fn(vec![1, 8, 8], |_| rng.uniform()))
            .collect();

        let mut tape = Tape64::new();
        let bound = params.bind_frozen(&mut tape);
        let masks: Vec<Var> = mask_data.iter().map(|m| tape.constant(m.clone())).collect();
        let out = disc.forward(&mut tape, &bound, &g, &masks).unwrap();
        let base_score = tape.value(out.realism).item().unwrap();
        let base_logits = tape.value(out.type_logits.unwrap()).data().to_vec();

        // Reverse the room order and relabel the graph to match.
        let perm = vec![3, 2, 1, 0];
        let pg = g.permuted(&perm).unwrap();
        let mut tape2 = Tape64::new();
        let bound2 = params.bind_frozen(&mut tape2);
        let mut permuted_masks = vec![None; 4];
        for (i, m) in mask_data.iter().enumerate() {
            permuted_masks[perm[i]] = Some(tape2.constant(m.clone()));
        }
        let masks2: Vec<Var> = permuted_masks.into_iter().map(Option::unwrap).collect();
        let out2 = disc.forward(&mut tape2, &bound2, &pg, &masks2).unwrap();
        let score2 = tape2.value(out2.realism).item().unwrap();
        let logits2 = tape2.value(out2.type_logits.unwrap()).data().to_vec();

        assert!((base_score - score2).abs() <= 1e-9);
        for (a, b) in base_logits.iter().zip(&logits2) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn classification_loss_fixed_points() {
        let mut tape = Tape64::new();
        let target = present_types(&[RoomType::Kitchen, RoomType::Bedroom]);

        // Confident correct logits push the loss toward zero.
        let strong: Vec<f64> = (0..10)
            .map(|i| if target.data()[i] > 0.5 { 40.0 } else { -40.0 })
            .collect();
        let lv = tape.constant(Tensor64::new(vec![10], strong).unwrap());
        let loss = classification_loss(&mut tape, lv, &target).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-12);

        // Zero logits cost ln 2 per element.
        let zv = tape.constant(Tensor64::zeros(vec![10]));
        let loss = classification_loss(&mut tape, zv, &target).unwrap();
        assert!((tape.value(loss).item().unwrap() - (2.0f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn classification_loss_matches_direct_formula() {
        let mut rng = Rng::new(17);
        let logits = Tensor64::from_fn(vec![10], |_| rng.normal());
        let target = present_types(&[RoomType::Balcony, RoomType::Unknown]);
        let expect: f64 = logits
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| {
                let s = 1.0 / (1.0 + (-x).exp());
                -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 10.0;
        let mut tape = Tape64::new();
        let lv = tape.constant(logits);
        let loss = classification_loss(&mut tape, lv, &target).unwrap();
        assert!((tape.value(loss).item().unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn mask_count_mismatch_is_an_input_error() {
        let disc = Discriminator::new(DiscriminatorConfig::tiny()).unwrap();
        let params = disc.init_params(19);
        let g = diagram4();
        let mut tape = Tape64::new();
        let bound = params.bind_frozen(&mut tape);
        let mut rng = Rng::new(23);
        let masks = masks_for(&mut tape, 3, 8, &mut rng);
        assert!(disc.forward(&mut tape, &bound, &g, &masks).is_err());
    }
}
