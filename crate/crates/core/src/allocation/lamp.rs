use crate::error::Result;
use crate::masking::{check_sparsity, prune_count, Mask, MaskSet};
use crate::net::NetworkSpec;
use crate::tensor::Tensor;

/// LAMP score of every weight: `w_i² / Σ_{j ≥ i} w_j²` over the layer's
/// weights sorted by ascending magnitude (ties by flat index). A layer of
/// zeros scores 0 throughout.
pub fn lamp_scores(weight: &Tensor) -> Vec<f64> {
    let w = weight.data();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()));
    let mut scores = vec![0.0; w.len()];
    let mut suffix = 0.0f64;
    for &i in order.iter().rev() {
        let sq = (w[i] as f64) * (w[i] as f64);
        suffix += sq;
        scores[i] = if suffix > 0.0 { sq / suffix } else { 0.0 };
    }
    scores
}

/// Removes the `floor(S · Σ n)` weights with the smallest LAMP scores across
/// all prunable layers. No calibration data is involved. Ties are broken by
/// layer order, then by magnitude order within the layer.
pub fn lamp_allocate(net: &NetworkSpec, target: f64) -> Result<MaskSet> {
    check_sparsity(target)?;
    let mut pool: Vec<(f64, usize, usize, usize)> = Vec::new();
    let mut shapes = Vec::new();
    for (li, layer) in net.prunable().iter().enumerate() {
        let conv = net.conv(layer)?;
        let w = conv.weight.data();
        let scores = lamp_scores(&conv.weight);
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()));
        pool.extend(
            order
                .iter()
                .enumerate()
                .map(|(rank, &i)| (scores[i], li, rank, i)),
        );
        shapes.push((layer.clone(), conv.weight.shape().to_vec(), w.len()));
    }
    let k = prune_count(target, pool.len());
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut bits: Vec<Vec<u8>> = shapes.iter().map(|(_, _, n)| vec![1u8; *n]).collect();
    for &(_, li, _, i) in &pool[..k] {
        bits[li][i] = 0;
    }
    shapes
        .into_iter()
        .zip(bits)
        .map(|((name, shape, _), b)| Ok((name.clone(), Mask::new(name, shape, b)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::magnitude_mask;
    use crate::net::{Conv2d, LayerNode, Op, INPUT};

    #[test]
    fn suffix_sum_scores() {
        let s = lamp_scores(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!((s[0] - 0.2).abs() < 1e-12);
        assert_eq!(s[1], 1.0);
        let s = lamp_scores(&Tensor::new(vec![3], vec![-3.0, 0.5, 1.0]).unwrap());
        assert_eq!(s[0], 1.0);
        assert!(lamp_scores(&Tensor::zeros(vec![3]))
            .iter()
            .all(|&v| v == 0.0));
    }

    fn single(weights: Vec<f32>) -> NetworkSpec {
        let n = weights.len();
        let conv = Conv2d {
            out_ch: 1,
            in_ch: 1,
            kh: 1,
            kw: n,
            stride: 1,
            padding: 0,
            weight: Tensor::new(vec![1, 1, 1, n], weights).unwrap(),
            bias: None,
        };
        NetworkSpec::new(
            vec![LayerNode::new("c", Op::Conv2d(conv), &[INPUT])],
            vec![1, 1, n],
            vec!["c".into()],
            None,
        )
        .unwrap()
    }

    #[test]
    fn single_layer_matches_magnitude() {
        let w = vec![0.3, -0.1, 0.0, 0.7, -0.2, 0.3, 0.05, -0.9];
        let net = single(w);
        for s in [0.0, 0.25, 0.5, 0.875, 1.0] {
            let lamp = lamp_allocate(&net, s).unwrap();
            let mag = magnitude_mask("c", &net.conv("c").unwrap().weight, s).unwrap();
            assert_eq!(lamp["c"], mag, "s = {s}");
        }
    }
}
