//! Shared local-feature extractor: three spatial graph-convolution layers
//! `A·relu(X·Φ2) + relu(X·Φ1)` with one batch norm per layer, plus global
//! max readout of the concatenated layer outputs.

use std::rc::Rc;

use rand::Rng;

use crate::data::GraphSample;
use crate::error::Result;
use crate::tensor::{AdjList, BatchNorm, Mode, ParamBank, Tape, Tensor, TensorId};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub layer_dims: Vec<usize>,
    /// Whole node feature vectors are dropped from the input with this
    /// probability in train mode.
    pub input_dropout: f64,
    /// Optional symmetric degree normalization of the adjacency; off by
    /// default, matching the raw-adjacency convolution form.
    pub normalize_adjacency: bool,
}

impl BackboneConfig {
    pub fn standard(input_dim: usize) -> Self {
        BackboneConfig {
            input_dim,
            layer_dims: vec![64, 64, 64],
            input_dropout: 0.2,
            normalize_adjacency: false,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims.iter().sum()
    }

    pub fn last_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least one layer")
    }
}

/// One spatial convolution: `Φ1` transforms the node itself, `Φ2` the
/// neighbor aggregate.
#[derive(Debug, Clone)]
pub struct SpatialConvLayer {
    pub phi1: crate::tensor::ParamId,
    pub phi2: crate::tensor::ParamId,
    pub bn: BatchNorm,
}

impl SpatialConvLayer {
    pub fn new(
        bank: &mut ParamBank,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let phi1 = bank.param(format!("{prefix}.phi1"), Tensor::glorot(d_in, d_out, rng));
        let phi2 = bank.param(format!("{prefix}.phi2"), Tensor::glorot(d_in, d_out, rng));
        let bn = BatchNorm::new(bank, &format!("{prefix}.bn"), d_out);
        SpatialConvLayer { phi1, phi2, bn }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bank: &ParamBank,
        x: TensorId,
        adj: &Rc<AdjList>,
        mode: Mode,
    ) -> Result<TensorId> {
        let phi1 = tape.param(bank, self.phi1);
        let phi2 = tape.param(bank, self.phi2);
        let self_term = tape.matmul(x, phi1)?;
        let self_term = tape.relu(self_term);
        let nbr_term = tape.matmul(x, phi2)?;
        let nbr_term = tape.relu(nbr_term);
        let aggregated = tape.neighbor_sum(adj, nbr_term)?;
        let summed = tape.add(aggregated, self_term)?;
        self.bn.forward(tape, bank, summed, mode)
    }
}

pub struct BackboneOutput {
    pub per_layer: Vec<TensorId>,
    pub concat: TensorId,
    pub x_max: TensorId,
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    pub layers: Vec<SpatialConvLayer>,
}

impl Backbone {
    pub fn new(bank: &mut ParamBank, cfg: BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(cfg.layer_dims.len());
        let mut d_in = cfg.input_dim;
        for (i, &d_out) in cfg.layer_dims.iter().enumerate() {
            layers.push(SpatialConvLayer::new(
                bank,
                &format!("backbone.layer{i}"),
                d_in,
                d_out,
                rng,
            ));
            d_in = d_out;
        }
        Backbone { cfg, layers }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bank: &ParamBank,
        sample: &GraphSample,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<BackboneOutput> {
        let adj = sample.adj_list(self.cfg.normalize_adjacency);
        let x0 = tape.constant(
            vec![sample.num_nodes, sample.feature_dim],
            sample.features.clone(),
        );
        let mut x = tape.row_dropout(x0, self.cfg.input_dropout, mode, rng)?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            x = layer.forward(tape, bank, x, &adj, mode)?;
            per_layer.push(x);
        }
        let mut concat = per_layer[0];
        for &l in &per_layer[1..] {
            concat = tape.concat_cols(concat, l)?;
        }
        let x_max = tape.rowwise_max(concat)?;
        Ok(BackboneOutput {
            per_layer,
            concat,
            x_max,
        })
    }

    pub fn commit_running_stats(&mut self, bank: &mut ParamBank) {
        for layer in &mut self.layers {
            layer.bn.commit_running_stats(bank);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_separable, GraphSample};
    use crate::tensor::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_graph(n: usize, d: usize, features: Vec<f64>) -> GraphSample {
        let edges = (0..n - 1).map(|i| (i as u32, (i + 1) as u32)).collect();
        GraphSample::new(0, n, edges, features, d, 0).unwrap()
    }

    fn empty_graph(n: usize, d: usize, features: Vec<f64>) -> GraphSample {
        GraphSample::new(0, n, vec![], features, d, 0).unwrap()
    }

    #[test]
    fn zero_adjacency_reduces_to_self_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = ParamBank::new();
        let mut layer = SpatialConvLayer::new(&mut bank, "l", 3, 2, &mut rng);
        let g = empty_graph(4, 3, (0..12).map(|v| v as f64 / 3.0 - 1.5).collect());
        let adj = g.adj_list(false);

        let mut tape = Tape::new();
        let x = tape.constant(vec![4, 3], g.features.clone());
        let out = layer
            .forward(&mut tape, &bank, x, &adj, Mode::Train)
            .unwrap();

        // reference path: bn(relu(X·Φ1)) with identical parameters
        let mut bn_ref = layer.bn.clone();
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(vec![4, 3], g.features.clone());
        let phi1 = tape2.param(&bank, layer.phi1);
        let z = tape2.matmul(x2, phi1).unwrap();
        let z = tape2.relu(z);
        let expect = bn_ref.forward(&mut tape2, &bank, z, Mode::Train).unwrap();

        assert_eq!(tape.data(out), tape2.data(expect));
    }

    #[test]
    fn identity_phis_and_bypassed_bn_give_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bank = ParamBank::new();
        let mut layer = SpatialConvLayer::new(&mut bank, "l", 2, 2, &mut rng);
        bank.get_mut(layer.phi1)
            .data
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        bank.get_mut(layer.phi2)
            .data
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        layer.bn.eps = 0.0; // running stats are (0, 1): eval bn is the identity
        let g = empty_graph(3, 2, vec![1.0, -2.0, 0.5, 3.0, -0.25, 0.0]);
        let adj = g.adj_list(false);
        let mut tape = Tape::new();
        let x = tape.constant(vec![3, 2], g.features.clone());
        let out = layer.forward(&mut tape, &bank, x, &adj, Mode::Eval).unwrap();
        assert_eq!(tape.data(out), &[1.0, 0.0, 0.5, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn path_graph_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bank = ParamBank::new();
        let mut layer = SpatialConvLayer::new(&mut bank, "l", 2, 2, &mut rng);
        bank.get_mut(layer.phi1)
            .data
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]); // identity
        bank.get_mut(layer.phi2)
            .data
            .copy_from_slice(&[0.0, 1.0, 1.0, 0.0]); // swap columns
        layer.bn.eps = 0.0;
        let g = path_graph(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let adj = g.adj_list(false);
        let mut tape = Tape::new();
        let x = tape.constant(vec![4, 2], g.features.clone());
        let out = layer.forward(&mut tape, &bank, x, &adj, Mode::Eval).unwrap();
        let expected = [2.0, 0.0, 1.0, 3.0, 2.0, 3.0, 3.0, 1.0];
        assert_eq!(tape.data(out), &expected);
    }

    #[test]
    fn spatial_conv_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bank = ParamBank::new();
        let mut layer = SpatialConvLayer::new(&mut bank, "l", 2, 3, &mut rng);
        let ds = generate_separable(1, 5);
        let g = &ds.samples[0];
        let n = g.num_nodes;
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 2) % n).collect();
        let gp = g.permuted(&perm);

        let run = |layer: &mut SpatialConvLayer, bank: &ParamBank, g: &GraphSample| {
            let mut tape = Tape::new();
            let x = tape.constant(vec![g.num_nodes, 2], g.features.clone());
            let adj = g.adj_list(false);
            let out = layer.forward(&mut tape, bank, x, &adj, Mode::Eval).unwrap();
            tape.data(out).to_vec()
        };
        let base = run(&mut layer, &bank, g);
        let permuted = run(&mut layer, &bank, &gp);
        for i in 0..n {
            for j in 0..3 {
                let a = base[i * 3 + j];
                let b = permuted[perm[i] * 3 + j];
                assert!((a - b).abs() < 1e-9, "({i},{j}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn backbone_shapes_and_single_node_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bank = ParamBank::new();
        let cfg = BackboneConfig::standard(2);
        let mut backbone = Backbone::new(&mut bank, cfg, &mut rng);
        let g = GraphSample::new(0, 1, vec![], vec![0.5, 1.0], 2, 0).unwrap();
        let mut tape = Tape::new();
        let out = backbone
            .forward(&mut tape, &bank, &g, Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(tape.shape(out.concat), &[1, 192]);
        for l in &out.per_layer {
            assert_eq!(tape.shape(*l), &[1, 64]);
        }
        assert_eq!(tape.shape(out.x_max), &[192]);
        assert_eq!(tape.data(out.x_max), tape.data(out.concat));
    }

    #[test]
    fn x_max_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bank = ParamBank::new();
        let mut backbone = Backbone::new(&mut bank, BackboneConfig::standard(2), &mut rng);
        let ds = generate_separable(2, 8);
        for g in &ds.samples {
            let n = g.num_nodes;
            let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
            let gp = g.permuted(&perm);
            let mut run = |g: &GraphSample| {
                let mut tape = Tape::new();
                let out = backbone
                    .forward(&mut tape, &bank, g, Mode::Eval, &mut rng)
                    .unwrap();
                tape.data(out.x_max).to_vec()
            };
            let a = run(g);
            let b = run(&gp);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn whole_backbone_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = ParamBank::new();
        let cfg = BackboneConfig {
            input_dim: 2,
            layer_dims: vec![3, 3, 3],
            input_dropout: 0.0,
            normalize_adjacency: false,
        };
        let mut backbone = Backbone::new(&mut bank, cfg, &mut rng);
        let g = path_graph(5, 2, (0..10).map(|v| (v as f64 * 0.37).sin()).collect());
        let weights: Vec<f64> = (0..9).map(|v| ((v * v) as f64 * 0.11).cos()).collect();

        let loss = |backbone: &mut Backbone, bank: &ParamBank| -> f64 {
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = backbone
                .forward(&mut tape, bank, &g, Mode::Train, &mut r)
                .unwrap();
            let w = tape.constant(vec![9], weights.clone());
            let m = tape.mul_elem(out.x_max, w).unwrap();
            let s = tape.sum(m);
            tape.scalar_value(s)
        };

        // analytic gradients
        {
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = backbone
                .forward(&mut tape, &bank, &g, Mode::Train, &mut r)
                .unwrap();
            let w = tape.constant(vec![9], weights.clone());
            let m = tape.mul_elem(out.x_max, w).unwrap();
            let s = tape.sum(m);
            tape.backward(s).unwrap();
            bank.zero_grads();
            tape.accumulate_into(&mut bank);
        }
        let report = check_gradients(&mut bank, |b| Ok(loss(&mut backbone, b)), 1e-5).unwrap();
        assert!(
            report.max_rel_err() < 1e-4,
            "max rel err {}",
            report.max_rel_err()
        );
    }
}
