//! Shared convolutional message-passing layer with the graph-transformer
//! encoder: gated connected/non-connected node attention plus the graph
//! modeling block, stacked `blocks` deep, then a variant-specific combine.
//!
//! Both the generator and the discriminator instantiate this layer under
//! their own parameter prefixes.

use serde::{Deserialize, Serialize};

use gtgan_autodiff::{Bound, ParamStore64, Rng, Tape64, Var};

use crate::error::{GtganError, Result};
use crate::graph::BubbleDiagram;

/// Which message-passing combine rule a layer uses. The first three mirror
/// the ablation variants of the combine equation; `TransformerOnly` drops
/// the convolutional combine entirely and propagates the attention residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMpnVariant {
    /// CNN[residual ; pooled connected ; pooled non-connected].
    Eq2,
    /// CNN[attention sum (no identity) ; pooled ; pooled].
    Eq3,
    /// CNN[residual] without the concatenated pools.
    Eq4,
    /// No CNN: the attention residual is the node update.
    TransformerOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpnConfig {
    pub channels: usize,
    pub heads: usize,
    pub blocks: usize,
    pub variant: ConvMpnVariant,
    pub use_cna: bool,
    pub use_nna: bool,
    pub use_gmb: bool,
    /// Optional learned per-head projection before the attention product.
    pub use_head_projections: bool,
    /// Share encoder weights between the connected and non-connected
    /// branches instead of keeping separate stacks.
    pub share_branch_weights: bool,
}

/// Attention matrix recorded during a forward pass, for inspection dumps.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// Parameter prefix of the layer that produced the map.
    pub layer: String,
    pub branch: &'static str,
    pub block: usize,
    pub node: usize,
    pub head: usize,
    pub var: Var,
}

/// One message-passing layer bound to a parameter prefix.
#[derive(Debug, Clone)]
pub struct MpnLayer {
    pub prefix: String,
    pub config: MpnConfig,
}

impl MpnLayer {
    pub fn new(prefix: impl Into<String>, config: MpnConfig) -> Self {
        Self {
            prefix: prefix.into(),
            config,
        }
    }

    fn branch_enabled(&self, branch: &str) -> bool {
        match branch {
            "n" => self.config.use_cna,
            _ => self.config.use_nna,
        }
    }

    fn branch_param_prefix(&self, branch: &str) -> String {
        let b = if self.config.share_branch_weights && self.branch_enabled("n") {
            "n"
        } else {
            branch
        };
        format!("{}.gte_{b}", self.prefix)
    }

    pub fn cnn_in_channels(&self) -> Option<usize> {
        let c = self.config.channels;
        match self.config.variant {
            ConvMpnVariant::Eq2 | ConvMpnVariant::Eq3 => Some(3 * c),
            ConvMpnVariant::Eq4 => Some(c),
            ConvMpnVariant::TransformerOnly => None,
        }
    }

    /// Registers this layer's parameters: zero attention gates, Kaiming
    /// modeling-block and convolution weights, zero biases.
    pub fn register(&self, p: &mut ParamStore64, rng: &mut Rng) {
        let cfg = &self.config;
        let c = cfg.channels;
        for branch in ["n", "nn"] {
            if !self.branch_enabled(branch) {
                continue;
            }
            if cfg.share_branch_weights && branch == "nn" && self.branch_enabled("n") {
                continue;
            }
            let prefix = self.branch_param_prefix(branch);
            for block in 0..cfg.blocks {
                p.add_scalar(format!("{prefix}.b{block}.gate"), 0.0);
                if cfg.use_gmb {
                    p.add_kaiming(format!("{prefix}.b{block}.gmb_p"), vec![c, c], c, rng);
                }
                if cfg.use_head_projections {
                    for head in 0..cfg.heads {
                        p.add_kaiming(format!("{prefix}.b{block}.proj{head}"), vec![c, c], c, rng);
                    }
                }
            }
        }
        if let Some(in_c) = self.cnn_in_channels() {
            let mid = 2 * c;
            p.add_kaiming(
                format!("{}.cnn0.w", self.prefix),
                vec![mid, in_c, 3, 3],
                in_c * 9,
                rng,
            );
            p.add_zeros(format!("{}.cnn0.b", self.prefix), vec![mid]);
            p.add_kaiming(
                format!("{}.cnn1.w", self.prefix),
                vec![c, mid, 3, 3],
                mid * 9,
                rng,
            );
            p.add_zeros(format!("{}.cnn1.b", self.prefix), vec![c]);
        }
    }

    /// One message-passing update: pool neighbor volumes, run the encoder
    /// stacks on both branches, and combine per the configured variant.
    pub fn forward(
        &self,
        tape: &mut Tape64,
        params: &Bound,
        g: &BubbleDiagram,
        nodes: &[Var],
        attention: &mut Vec<AttentionRecord>,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let n = nodes.len();
        if n != g.node_count() || n == 0 {
            return Err(GtganError::InvalidInput(format!(
                "{} volumes for {} graph nodes",
                n,
                g.node_count()
            )));
        }
        let shape = tape.shape(nodes[0]).to_vec();

        let pool = |tape: &mut Tape64, members: &[usize]| -> Result<Var> {
            if members.is_empty() {
                Ok(tape.zeros_const(shape.clone()))
            } else {
                let vols: Vec<Var> = members.iter().map(|&m| nodes[m]).collect();
                Ok(tape.sum_many(&vols)?)
            }
        };

        let mut pooled_n = Vec::with_capacity(n);
        let mut pooled_nn = Vec::with_capacity(n);
        let mut cards_n = Vec::with_capacity(n);
        let mut cards_nn = Vec::with_capacity(n);
        for r in 0..n {
            let neigh = g.neighbors(r);
            let non = g.non_neighbors(r);
            cards_n.push(neigh.len());
            cards_nn.push(non.len());
            pooled_n.push(pool(tape, &neigh)?);
            pooled_nn.push(pool(tape, &non)?);
        }

        let deltas_n = if cfg.use_cna {
            Some(self.gte_stack(tape, params, g, nodes, &pooled_n, &cards_n, "n", attention)?)
        } else {
            None
        };
        let deltas_nn = if cfg.use_nna {
            Some(self.gte_stack(tape, params, g, nodes, &pooled_nn, &cards_nn, "nn", attention)?)
        } else {
            None
        };

        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let mut residual_terms = vec![nodes[r]];
            let mut attention_terms = Vec::new();
            if let Some(d) = &deltas_n {
                residual_terms.push(d[r]);
                attention_terms.push(d[r]);
            }
            if let Some(d) = &deltas_nn {
                residual_terms.push(d[r]);
                attention_terms.push(d[r]);
            }
            let fused = tape.sum_many(&residual_terms)?;
            let combined = match cfg.variant {
                ConvMpnVariant::Eq2 => tape.concat0(&[fused, pooled_n[r], pooled_nn[r]])?,
                ConvMpnVariant::Eq3 => {
                    let inner = if attention_terms.is_empty() {
                        tape.zeros_const(shape.clone())
                    } else {
                        tape.sum_many(&attention_terms)?
                    };
                    tape.concat0(&[inner, pooled_n[r], pooled_nn[r]])?
                }
                ConvMpnVariant::Eq4 => fused,
                ConvMpnVariant::TransformerOnly => {
                    out.push(fused);
                    continue;
                }
            };
            let w0 = params.var(&format!("{}.cnn0.w", self.prefix));
            let b0 = params.var(&format!("{}.cnn0.b", self.prefix));
            let w1 = params.var(&format!("{}.cnn1.w", self.prefix));
            let b1 = params.var(&format!("{}.cnn1.b", self.prefix));
            let h = tape.conv2d(combined, w0, 1, 1)?;
            let h = tape.add_chan_bias(h, b0)?;
            let h = tape.leaky_relu(h, 0.1);
            let h = tape.conv2d(h, w1, 1, 1)?;
            let h = tape.add_chan_bias(h, b1)?;
            out.push(tape.leaky_relu(h, 0.1));
        }
        Ok(out)
    }

    /// Encoder stack for one branch: `blocks` repetitions of gated node
    /// attention with a residual add, each followed by the graph modeling
    /// block. Returns per-node deltas relative to the stack input, so the
    /// caller's residual sum reduces to the input exactly when the gates are
    /// zero and the modeling block is disabled.
    #[allow(clippy::too_many_arguments)]
    fn gte_stack(
        &self,
        tape: &mut Tape64,
        params: &Bound,
        g: &BubbleDiagram,
        nodes: &[Var],
        pooled: &[Var],
        cards: &[usize],
        branch: &'static str,
        attention: &mut Vec<AttentionRecord>,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let prefix = self.branch_param_prefix(branch);
        let mut xs = nodes.to_vec();
        for block in 0..cfg.blocks {
            let gate = params.var(&format!("{prefix}.b{block}.gate"));
            let projections: Option<Vec<Var>> = cfg.use_head_projections.then(|| {
                (0..cfg.heads)
                    .map(|h| params.var(&format!("{prefix}.b{block}.proj{h}")))
                    .collect()
            });
            for r in 0..xs.len() {
                let layer = self.prefix.clone();
                let att = node_attention(
                    tape,
                    xs[r],
                    pooled[r],
                    cards[r],
                    gate,
                    cfg.heads,
                    projections.as_deref(),
                    &mut |head, var| {
                        attention.push(AttentionRecord {
                            layer: layer.clone(),
                            branch,
                            block,
                            node: r,
                            head,
                            var,
                        });
                    },
                )?;
                xs[r] = tape.add(xs[r], att)?;
            }
            if cfg.use_gmb {
                let p = params.var(&format!("{prefix}.b{block}.gmb_p"));
                xs = gmb(tape, &xs, g, p)?;
            }
        }
        xs.iter()
            .zip(nodes)
            .map(|(&x, &x0)| Ok(tape.sub(x, x0)?))
            .collect()
    }
}

/// Gated multi-head node attention between a query volume and a pooled
/// neighbor volume. Volumes are flattened to (spatial x channel) matrices so
/// the attention map is spatial; with an empty pool the output is the zero
/// volume and the scaled product is never formed.
#[allow(clippy::too_many_arguments)]
pub fn node_attention(
    tape: &mut Tape64,
    x: Var,
    pooled: Var,
    card: usize,
    gate: Var,
    heads: usize,
    projections: Option<&[Var]>,
    record: &mut dyn FnMut(usize, Var),
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if card == 0 {
        return Ok(tape.zeros_const(shape));
    }
    let flat_x = tape.reshape(x, vec![c, h * w])?;
    let xm = tape.transpose(flat_x)?; // [HW, C]
    let flat_p = tape.reshape(pooled, vec![c, h * w])?;
    let pm = tape.transpose(flat_p)?; // [HW, C]
    let scale = 1.0 / (card as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (q, k) = match projections {
            Some(ps) => (tape.matmul(xm, ps[head])?, tape.matmul(pm, ps[head])?),
            None => (xm, pm),
        };
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, scale);
        let att = tape.softmax(scaled, 1)?;
        record(head, att);
        head_outputs.push(tape.matmul(att, xm)?);
    }
    let summed = tape.sum_many(&head_outputs)?;
    let gated = tape.mul_scalar(summed, gate)?;
    let back = tape.transpose(gated)?;
    Ok(tape.reshape(back, vec![c, h, w])?)
}

/// Residual fusion of a node volume with its two attention branch outputs.
pub fn gte_residual(tape: &mut Tape64, g_r: Var, cna_out: Var, nna_out: Var) -> Result<Var> {
    Ok(tape.sum_many(&[g_r, cna_out, nna_out])?)
}

/// Graph modeling block: row-normalized (A + I) mixing across nodes, a
/// shared channel transform, and a GeLU, applied per spatial position.
pub fn gmb(tape: &mut Tape64, nodes: &[Var], g: &BubbleDiagram, p: Var) -> Result<Vec<Var>> {
    let n = nodes.len();
    if n != g.node_count() {
        return Err(GtganError::InvalidInput(format!(
            "{} volumes for {} graph nodes",
            n,
            g.node_count()
        )));
    }
    let shape = tape.shape(nodes[0]).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let mut members = g.neighbors(r);
        members.push(r);
        members.sort_unstable();
        let weight = 1.0 / members.len() as f64;
        let scaled: Vec<Var> = members
            .iter()
            .map(|&m| tape.scale(nodes[m], weight))
            .collect();
        let mixed = tape.sum_many(&scaled)?;
        let flat = tape.reshape(mixed, vec![c, h * w])?;
        let xm = tape.transpose(flat)?;
        let ym = tape.matmul(xm, p)?;
        let act = tape.gelu(ym);
        let back = tape.transpose(act)?;
        out.push(tape.reshape(back, vec![c, h, w])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RoomType;
    use gtgan_autodiff::Tensor64;

    #[test]
    fn attention_zero_gate_gives_zero_volume() {
        let mut tape = Tape64::new();
        let x = tape.constant(Tensor64::from_fn(vec![1, 2, 2], |i| i as f64 + 1.0));
        let pooled = tape.constant(Tensor64::from_fn(vec![1, 2, 2], |i| 0.5 * i as f64 - 1.0));
        let gate = tape.input(Tensor64::scalar(0.0), true);
        let out = node_attention(&mut tape, x, pooled, 2, gate, 2, None, &mut |_, _| {}).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut tape = Tape64::new();
        let x = tape.constant(Tensor64::from_fn(vec![2, 2, 2], |i| (i as f64).sin()));
        let pooled = tape.constant(Tensor64::from_fn(vec![2, 2, 2], |i| (i as f64).cos()));
        let gate = tape.constant(Tensor64::scalar(0.3));
        let mut atts = Vec::new();
        node_attention(&mut tape, x, pooled, 3, gate, 2, None, &mut |_, var| {
            atts.push(var)
        })
        .unwrap();
        assert_eq!(atts.len(), 2);
        for att in atts {
            let m = tape.value(att);
            assert_eq!(m.shape(), &[4, 4]);
            for row in 0..4 {
                let s: f64 = m.data()[row * 4..(row + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn attention_matches_hand_computation() {
        // One channel, 2x2 volume: the attention map is 4x4 over spatial
        // positions; recompute it with bare f64 arithmetic.
        let xv = [0.4, -0.7, 1.1, 0.2];
        let pv = [0.9, 0.1, -0.3, 0.5];
        let card = 2usize;
        let gate = 0.8;
        let heads = 2;

        let scale = 1.0 / (card as f64).sqrt();
        let mut expected = [0.0; 4];
        for i in 0..4 {
            let mut row = [0.0; 4];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = xv[i] * pv[j] * scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let att_row: Vec<f64> = exps.iter().map(|e| e / total).collect();
            let out_i: f64 = att_row.iter().zip(&xv).map(|(a, x)| a * x).sum();
            expected[i] = gate * heads as f64 * out_i;
        }

        let mut tape = Tape64::new();
        let x = tape.constant(Tensor64::new(vec![1, 2, 2], xv.to_vec()).unwrap());
        let pooled = tape.constant(Tensor64::new(vec![1, 2, 2], pv.to_vec()).unwrap());
        let gate_v = tape.constant(Tensor64::scalar(gate));
        let out =
            node_attention(&mut tape, x, pooled, card, gate_v, heads, None, &mut |_, _| {})
                .unwrap();
        for (got, want) in tape.value(out).data().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn attention_empty_pool_is_zero_volume() {
        let mut tape = Tape64::new();
        let x = tape.constant(Tensor64::from_fn(vec![2, 2, 2], |i| i as f64));
        let pooled = tape.zeros_const(vec![2, 2, 2]);
        let gate = tape.constant(Tensor64::scalar(0.9));
        let out = node_attention(&mut tape, x, pooled, 0, gate, 2, None, &mut |_, _| {}).unwrap();
        let v = tape.value(out);
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(v.is_finite());
    }

    #[test]
    fn gte_residual_is_identity_at_init_bitwise() {
        let mut tape = Tape64::new();
        let g_r = tape.constant(Tensor64::from_fn(vec![2, 3, 3], |i| (i as f64) * 0.37 - 2.0));
        let pooled = tape.constant(Tensor64::from_fn(vec![2, 3, 3], |i| (i as f64) * -0.11));
        let alpha = tape.constant(Tensor64::scalar(0.0));
        let beta = tape.constant(Tensor64::scalar(0.0));
        let cna =
            node_attention(&mut tape, g_r, pooled, 3, alpha, 2, None, &mut |_, _| {}).unwrap();
        let nna =
            node_attention(&mut tape, g_r, pooled, 2, beta, 2, None, &mut |_, _| {}).unwrap();
        let fused = gte_residual(&mut tape, g_r, cna, nna).unwrap();
        let before: Vec<u64> = tape.value(g_r).data().iter().map(|v| v.to_bits()).collect();
        let after: Vec<u64> = tape
            .value(fused)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn gte_residual_sums_elementwise() {
        let mut tape = Tape64::new();
        let zero = tape.zeros_const(vec![1, 2, 2]);
        let a = tape.constant(Tensor64::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor64::new(vec![1, 2, 2], vec![0.5, -0.5, 1.5, -1.5]).unwrap());
        let fused = gte_residual(&mut tape, zero, a, b).unwrap();
        assert_eq!(tape.value(fused).data(), &[1.5, 1.5, 4.5, 2.5]);

        let mut rng = Rng::new(3);
        let xs: Vec<Tensor64> = (0..3)
            .map(|_| Tensor64::from_fn(vec![2, 2, 2], |_| rng.normal()))
            .collect();
        let want: Vec<f64> = (0..8)
            .map(|i| xs.iter().map(|t| t.data()[i]).sum())
            .collect();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let fused = gte_residual(&mut tape, vars[0], vars[1], vars[2]).unwrap();
        for (got, wanted) in tape.value(fused).data().iter().zip(&want) {
            assert!((got - wanted).abs() <= 1e-15);
        }
    }

    #[test]
    fn gmb_single_node_with_identity_weight_is_gelu() {
        let g = BubbleDiagram::new(vec![RoomType::Kitchen], &[]).unwrap();
        let mut tape = Tape64::new();
        let x = tape.constant(Tensor64::new(vec![1, 1, 2], vec![0.7, -1.2]).unwrap());
        let p = tape.constant(Tensor64::new(vec![1, 1], vec![1.0]).unwrap());
        let out = gmb(&mut tape, &[x], &g, p).unwrap();
        let got = tape.value(out[0]).data();
        for (g_out, &v) in got.iter().zip(&[0.7f64, -1.2]) {
            let phi = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
            assert!((g_out - v * phi).abs() <= 1e-12);
        }
    }

    #[test]
    fn gmb_two_node_path_matches_hand_arithmetic() {
        let g =
            BubbleDiagram::new(vec![RoomType::Kitchen, RoomType::Bedroom], &[(0, 1)]).unwrap();
        let (u, v, p) = (0.6, -0.4, 1.3);
        let mut tape = Tape64::new();
        let xu = tape.constant(Tensor64::new(vec![1, 1, 1], vec![u]).unwrap());
        let xv = tape.constant(Tensor64::new(vec![1, 1, 1], vec![v]).unwrap());
        let pw = tape.constant(Tensor64::new(vec![1, 1], vec![p]).unwrap());
        let out = gmb(&mut tape, &[xu, xv], &g, pw).unwrap();
        let gelu = |x: f64| x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let want = gelu(0.5 * (u + v) * p);
        assert!((tape.value(out[0]).data()[0] - want).abs() <= 1e-12);
        assert!((tape.value(out[1]).data()[0] - want).abs() <= 1e-12);
    }

    #[test]
    fn gmb_mixing_rows_are_normalized() {
        // Row-normalized (A + I): mixing a constant volume across any graph
        // reproduces the constant before the channel transform; with the
        // identity transform the output is gelu(constant) everywhere.
        let g = BubbleDiagram::new(
            vec![RoomType::Kitchen, RoomType::Bedroom, RoomType::Closet],
            &[(0, 1)],
        )
        .unwrap();
        let mut tape = Tape64::new();
        let xs: Vec<Var> = (0..3)
            .map(|_| tape.constant(Tensor64::full(vec![1, 1, 1], 0.9)))
            .collect();
        let p = tape.constant(Tensor64::new(vec![1, 1], vec![1.0]).unwrap());
        let out = gmb(&mut tape, &xs, &g, p).unwrap();
        let gelu = |x: f64| x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        for &o in &out {
            assert!((tape.value(o).data()[0] - gelu(0.9)).abs() <= 1e-12);
        }
    }
}
