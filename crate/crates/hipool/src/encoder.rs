//! The hierarchical pooling layer and its composition into a document
//! encoder: window clustering, cluster-sum pooling, cross-cluster attention,
//! adjacency lifting, and a symmetric-normalized graph convolution, stacked
//! and collapsed by a column-wise aggregator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    build_clusters, build_cross_mask, build_low_adjacency, gcn_normalize, lift_adjacency,
    ClusterAssignment, CrossMask, LowAdjacency,
};
use crate::tensor::{Tape, Tensor, Var};

/// Trainable weights of one pooling layer.
#[derive(Debug, Clone)]
pub struct HiPoolLayerParams {
    /// Square attention weight, side = incoming feature dimension.
    pub w_atten: Tensor,
    /// Graph-convolution weight, d_in × d_out.
    pub w_gcn: Tensor,
}

/// Column-wise reduction collapsing node embeddings into one document vector.
/// `Simple` bypasses the graph layers entirely and sums the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Sum,
    Mean,
    Std,
    Simple,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregator::Sum),
            "mean" => Ok(Aggregator::Mean),
            "std" => Ok(Aggregator::Std),
            "simple" => Ok(Aggregator::Simple),
            other => Err(Error::Config(format!(
                "unknown aggregator {other:?} (expected sum|mean|std|simple)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    /// Cluster stride; window width is 2p.
    pub p: usize,
    pub num_layers: usize,
    /// Feature dimension of the incoming chunk embeddings.
    pub d: usize,
    pub aggregator: Aggregator,
    pub low_adjacency: LowAdjacency,
    /// Optional softmax over unmasked attention scores (raw scores otherwise).
    pub attention_softmax: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            p: 2,
            num_layers: 2,
            d: 32,
            aggregator: Aggregator::Sum,
            low_adjacency: LowAdjacency::Chain,
            attention_softmax: false,
        }
    }
}

/// Tape handles for one layer's registered weights.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_atten: Var,
    pub w_gcn: Var,
}

/// Sᵀ·H: each high-level node is the sum of its member low-level nodes.
pub fn pool_nodes(tape: &mut Tape, s: &ClusterAssignment, h: Var) -> Result<Var> {
    if tape.shape(h)[0] != s.n() {
        return Err(Error::dimension("pool_nodes", tape.shape(h), s.matrix().shape()));
    }
    let sv = tape.constant(s.matrix());
    let st = tape.transpose(sv)?;
    tape.matmul(st, h)
}

/// Scores each (cluster, low-level node) pair as H_high·W_atten·Hᵀ, keeps
/// only out-of-cluster positions via the mask, and adds the gathered
/// low-level information back onto the pooled representations.
pub fn cross_attention(
    tape: &mut Tape,
    h: Var,
    h_high: Var,
    mask: &CrossMask,
    w_atten: Var,
    use_softmax: bool,
) -> Result<Var> {
    let ht = tape.transpose(h)?;
    let proj = tape.matmul(h_high, w_atten)?;
    let scores = tape.matmul(proj, ht)?; // m×n
    let mask_v = tape.constant(mask.matrix());
    let mask_t = tape.transpose(mask_v)?;
    let masked = if use_softmax {
        tape.masked_softmax(scores, mask_t)?
    } else {
        tape.mul(scores, mask_t)?
    };
    let gathered = tape.matmul(masked, h)?;
    tape.add(gathered, h_high)
}

/// One full layer: cluster, pool, attend, lift, normalize, convolve.
/// Returns the new node matrix and the unnormalized lifted adjacency, which
/// becomes the next layer's low-level adjacency.
pub fn hipool_layer(
    tape: &mut Tape,
    h: Var,
    adjacency: &Tensor,
    p: usize,
    use_softmax: bool,
    layer: &LayerVars,
) -> Result<(Var, Tensor)> {
    let n = tape.shape(h)[0];
    let s = build_clusters(n, p)?;
    let mask = build_cross_mask(&s);
    let h_high = pool_nodes(tape, &s, h)?;
    let h_att = cross_attention(tape, h, h_high, &mask, layer.w_atten, use_softmax)?;
    let a_high = lift_adjacency(adjacency, &s)?;
    let a_hat = gcn_normalize(&a_high)?;
    let a_hat_v = tape.constant(&a_hat);
    let mixed = tape.matmul(a_hat_v, h_att)?;
    let projected = tape.matmul(mixed, layer.w_gcn)?;
    let h_next = tape.relu(projected);
    Ok((h_next, a_high))
}

/// Column-wise reduction of the final node matrix into a 1×d document
/// vector. `Simple` reduces by summation, matching its layer-0 use.
pub fn aggregate(tape: &mut Tape, h: Var, mode: Aggregator) -> Result<Var> {
    match mode {
        Aggregator::Sum | Aggregator::Simple => tape.col_sum(h),
        Aggregator::Mean => tape.col_mean(h),
        Aggregator::Std => tape.col_std(h),
    }
}

/// Column sum of the raw chunk embeddings, bypassing all graph machinery.
pub fn simple_baseline(tape: &mut Tape, h: Var) -> Result<Var> {
    tape.col_sum(h)
}

/// Runs the configured number of layers over the low-level adjacency, then
/// aggregates. In `Simple` mode the layers are skipped entirely.
pub fn encode(
    tape: &mut Tape,
    chunk_embeddings: Var,
    cfg: &EncoderConfig,
    layers: &[LayerVars],
) -> Result<Var> {
    if cfg.aggregator == Aggregator::Simple {
        return simple_baseline(tape, chunk_embeddings);
    }
    if layers.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "encoder expects {} layer parameter sets, got {}",
            cfg.num_layers,
            layers.len()
        )));
    }
    let n = tape.shape(chunk_embeddings)[0];
    let mut adjacency = build_low_adjacency(n, cfg.low_adjacency)?.matrix().clone();
    let mut h = chunk_embeddings;
    for layer in layers {
        let (next, lifted) = hipool_layer(tape, h, &adjacency, cfg.p, cfg.attention_softmax, layer)?;
        h = next;
        adjacency = lifted;
    }
    aggregate(tape, h, cfg.aggregator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, values).unwrap()
    }

    #[test]
    fn pool_single_cluster_sums_rows() {
        let s = build_clusters(2, 2).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let pooled = pool_nodes(&mut tape, &s, h).unwrap();
        assert_eq!(tape.values(pooled), &[1.0, 1.0]);
    }

    #[test]
    fn pool_four_nodes_two_clusters() {
        let s = build_clusters(4, 2).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(
            &Tensor::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![2.0, 0.0],
            ])
            .unwrap(),
        );
        let pooled = pool_nodes(&mut tape, &s, h).unwrap();
        assert_eq!(tape.values(pooled), &[4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn pool_zeros_stay_zero() {
        let s = build_clusters(5, 2).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(&Tensor::zeros(5, 3));
        let pooled = pool_nodes(&mut tape, &s, h).unwrap();
        assert!(tape.values(pooled).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_is_linear_exactly() {
        // Integer-valued inputs keep the float arithmetic exact.
        let s = build_clusters(4, 2).unwrap();
        let h1 = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]])
            .unwrap();
        let h2 = Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0], vec![4.0, 2.0], vec![1.0, 1.0]])
            .unwrap();
        let (alpha, beta) = (3.0, 2.0);
        let pool_of = |t: &Tensor| {
            let mut tape = Tape::new();
            let h = tape.constant(t);
            let p = pool_nodes(&mut tape, &s, h).unwrap();
            tape.values(p).to_vec()
        };
        let mut combo = Tensor::zeros(4, 2);
        for i in 0..8 {
            combo.values_mut()[i] = alpha * h1.values()[i] + beta * h2.values()[i];
        }
        let lhs = pool_of(&combo);
        let p1 = pool_of(&h1);
        let p2 = pool_of(&h2);
        for i in 0..lhs.len() {
            assert_eq!(lhs[i], alpha * p1[i] + beta * p2[i]);
        }
    }

    #[test]
    fn cross_attention_worked_example() {
        let s = build_clusters(4, 2).unwrap();
        let mask = build_cross_mask(&s);
        let mut tape = Tape::new();
        let h = tape.constant(
            &Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap(),
        );
        let w = tape.constant(&Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let h_high = pool_nodes(&mut tape, &s, h).unwrap();
        assert_eq!(tape.values(h_high), &[10.0, 7.0]);
        let out = cross_attention(&mut tape, h, h_high, &mask, w, false).unwrap();
        assert_eq!(tape.values(out), &[10.0, 42.0]);
    }

    #[test]
    fn cross_attention_all_zero_mask_returns_pooled() {
        let s = build_clusters(2, 2).unwrap();
        let mask = build_cross_mask(&s); // single cluster: mask is all zeros
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let h = tape.constant(&rand_tensor(2, 3, &mut rng));
        let w = tape.constant(&rand_tensor(3, 3, &mut rng));
        let h_high = pool_nodes(&mut tape, &s, h).unwrap();
        let out = cross_attention(&mut tape, h, h_high, &mask, w, false).unwrap();
        assert_eq!(tape.values(out), tape.values(h_high));
    }

    #[test]
    fn cross_attention_zero_weight_returns_pooled_and_ignores_mask() {
        let s = build_clusters(4, 2).unwrap();
        let mask = build_cross_mask(&s);
        let all_ones = CrossMask::from_matrix_for_tests(
            Tensor::matrix(4, 2, vec![1.0; 8]).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h_t = rand_tensor(4, 2, &mut rng);
        let run = |m: &CrossMask| {
            let mut tape = Tape::new();
            let h = tape.constant(&h_t);
            let w = tape.constant(&Tensor::zeros(2, 2));
            let h_high = pool_nodes(&mut tape, &s, h).unwrap();
            let out = cross_attention(&mut tape, h, h_high, m, w, false).unwrap();
            (tape.values(out).to_vec(), tape.values(h_high).to_vec())
        };
        let (out_a, pooled) = run(&mask);
        let (out_b, _) = run(&all_ones);
        assert_eq!(out_a, pooled);
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn layer_on_single_node_produces_single_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let h = tape.constant(&rand_tensor(1, 4, &mut rng));
        let w_atten = tape.constant(&rand_tensor(4, 4, &mut rng));
        let w_gcn = tape.constant(&rand_tensor(4, 4, &mut rng));
        let adjacency = Tensor::zeros(1, 1);
        let (next, lifted) = hipool_layer(
            &mut tape,
            h,
            &adjacency,
            2,
            false,
            &LayerVars { w_atten, w_gcn },
        )
        .unwrap();
        assert_eq!(tape.shape(next), &[1, 4]);
        assert_eq!(lifted.shape(), &[1, 1]);
    }

    #[test]
    fn two_layers_halve_the_node_count_each_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig {
            d: 6,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let x = tape.constant(&rand_tensor(8, 6, &mut rng));
        let adjacency = build_low_adjacency(8, cfg.low_adjacency).unwrap();
        let l0 = LayerVars {
            w_atten: tape.constant(&rand_tensor(6, 6, &mut rng)),
            w_gcn: tape.constant(&rand_tensor(6, 6, &mut rng)),
        };
        let (h1, a1) = hipool_layer(&mut tape, x, adjacency.matrix(), 2, false, &l0).unwrap();
        assert_eq!(tape.shape(h1), &[4, 6]);
        assert_eq!(a1.shape(), &[4, 4]);
        let l1 = LayerVars {
            w_atten: tape.constant(&rand_tensor(6, 6, &mut rng)),
            w_gcn: tape.constant(&rand_tensor(6, 6, &mut rng)),
        };
        let (h2, a2) = hipool_layer(&mut tape, h1, &a1, 2, false, &l1).unwrap();
        assert_eq!(tape.shape(h2), &[2, 6]);
        assert_eq!(a2.shape(), &[2, 2]);
    }

    #[test]
    fn full_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let d = 8;
        let x = rand_tensor(n, d, &mut rng);
        let w_atten = rand_tensor(d, d, &mut rng);
        let w_gcn = rand_tensor(d, d, &mut rng);
        let adjacency = build_low_adjacency(n, LowAdjacency::Chain).unwrap();
        let err = grad_check(
            &[x, w_atten, w_gcn],
            |tape, vars| {
                let layer = LayerVars {
                    w_atten: vars[1],
                    w_gcn: vars[2],
                };
                let (h, _) = hipool_layer(tape, vars[0], adjacency.matrix(), 2, false, &layer)?;
                let sq = tape.mul(h, h)?;
                let c = tape.col_sum(sq)?;
                tape.row_sum(c)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "layer grad error {err}");
    }

    #[test]
    fn aggregate_modes_on_worked_matrix() {
        let run = |mode: Aggregator| {
            let mut tape = Tape::new();
            let h = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
            let out = aggregate(&mut tape, h, mode).unwrap();
            tape.values(out).to_vec()
        };
        assert_eq!(run(Aggregator::Sum), vec![4.0, 6.0]);
        assert_eq!(run(Aggregator::Mean), vec![2.0, 3.0]);
        for (got, want) in run(Aggregator::Std).iter().zip([1.0, 1.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn simple_baseline_is_a_column_sum() {
        let mut tape = Tape::new();
        let h = tape.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let s = simple_baseline(&mut tape, h).unwrap();
        assert_eq!(tape.values(s), &[1.0, 1.0]);

        let single = tape.constant(&Tensor::matrix(1, 3, vec![4.0, 5.0, 6.0]).unwrap());
        let out = simple_baseline(&mut tape, single).unwrap();
        assert_eq!(tape.values(out), &[4.0, 5.0, 6.0]);

        // Definitional identity with the sum aggregator at layer 0.
        let via_aggregate = aggregate(&mut tape, h, Aggregator::Sum).unwrap();
        let via_simple = simple_baseline(&mut tape, h).unwrap();
        assert_eq!(tape.values(via_aggregate), tape.values(via_simple));
    }

    #[test]
    fn encode_shape_contract_and_simple_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig {
            d: 16,
            ..Default::default()
        };
        let x_t = rand_tensor(8, 16, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(&x_t);
        let layers: Vec<LayerVars> = (0..2)
            .map(|_| LayerVars {
                w_atten: tape.constant(&rand_tensor(16, 16, &mut rng)),
                w_gcn: tape.constant(&rand_tensor(16, 16, &mut rng)),
            })
            .collect();
        let doc = encode(&mut tape, x, &cfg, &layers).unwrap();
        assert_eq!(tape.shape(doc), &[1, 16]);

        let simple_cfg = EncoderConfig {
            aggregator: Aggregator::Simple,
            ..cfg
        };
        let doc_simple = encode(&mut tape, x, &simple_cfg, &[]).unwrap();
        let expect = {
            let mut tape2 = Tape::new();
            let x2 = tape2.constant(&x_t);
            let c = tape2.col_sum(x2).unwrap();
            tape2.values(c).to_vec()
        };
        assert_eq!(tape.values(doc_simple), &expect[..]);
    }

    #[test]
    fn encode_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(5, 4, &mut rng);
        let w: Vec<Tensor> = (0..4).map(|_| rand_tensor(4, 4, &mut rng)).collect();
        let cfg = EncoderConfig {
            d: 4,
            ..Default::default()
        };
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let layers = vec![
                LayerVars {
                    w_atten: tape.constant(&w[0]),
                    w_gcn: tape.constant(&w[1]),
                },
                LayerVars {
                    w_atten: tape.constant(&w[2]),
                    w_gcn: tape.constant(&w[3]),
                },
            ];
            let doc = encode(&mut tape, xv, &cfg, &layers).unwrap();
            tape.values(doc).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encode_with_softmax_attention_still_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 5;
        let d = 4;
        let x = rand_tensor(n, d, &mut rng);
        let wa = rand_tensor(d, d, &mut rng);
        let wg = rand_tensor(d, d, &mut rng);
        let cfg = EncoderConfig {
            d,
            num_layers: 1,
            attention_softmax: true,
            ..Default::default()
        };
        let err = grad_check(
            &[x, wa, wg],
            |tape, vars| {
                let layers = [LayerVars {
                    w_atten: vars[1],
                    w_gcn: vars[2],
                }];
                let doc = encode(tape, vars[0], &cfg, &layers)?;
                tape.row_sum(doc)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "softmax encode grad error {err}");
    }
}
