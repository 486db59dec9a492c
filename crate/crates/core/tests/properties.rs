use indexmap::IndexMap;
use proptest::prelude::*;

use repairprune::allocation::{greedy_allocate, uniform_allocate, ScoreSource, ScoreTable};
use repairprune::arch::{gaussian_images, gen_toynet, ToyNetSpec};
use repairprune::diagnostics::distortion;
use repairprune::masking::{
    global_magnitude_mask, global_sparsity, magnitude_mask, prune_count, Allocation,
};
use repairprune::net::{Conv2d, LayerNode, NetworkSpec, Op, INPUT};
use repairprune::tensor::Tensor;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let len = shape.iter().product::<usize>();
    prop::collection::vec(-4.0f32..4.0, len)
        .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn small_net(seed: u64) -> NetworkSpec {
    gen_toynet(
        seed,
        &ToyNetSpec {
            channels: vec![4, 8],
            input_shape: [3, 8, 8],
            init_images: 16,
            ..Default::default()
        },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_prunes_exact_count_and_nests(
        w in tensor(vec![4, 3, 3, 3]),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m_lo = magnitude_mask("c", &w, lo).unwrap();
        let m_hi = magnitude_mask("c", &w, hi).unwrap();
        prop_assert_eq!(m_lo.zeros(), prune_count(lo, w.len()));
        prop_assert_eq!(m_hi.zeros(), prune_count(hi, w.len()));
        for (x, y) in m_lo.bits().iter().zip(m_hi.bits()) {
            prop_assert!(*x == 1 || *y == 0);
        }
    }

    #[test]
    fn uniform_allocation_hits_target_exactly(
        counts in prop::collection::vec(1usize..100_000, 1..12),
        s in 0.0f64..=1.0,
    ) {
        let names: Vec<String> = (0..counts.len()).map(|i| format!("l{i}")).collect();
        let counts: IndexMap<String, usize> = names.iter().cloned().zip(counts).collect();
        let alloc = uniform_allocate(&names, s).unwrap();
        prop_assert_eq!(global_sparsity(&alloc, &counts).unwrap(), s);
    }

    #[test]
    fn distortion_is_nonnegative(a in tensor(vec![2, 3, 4, 4]), b in tensor(vec![2, 3, 4, 4])) {
        let d = distortion(&a, &b, 1e-8).unwrap();
        prop_assert!(d >= 0.0 && d.is_finite());
        prop_assert_eq!(distortion(&a, &a, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn greedy_meets_budget_with_unequal_counts(
        raw_grid in prop::collection::btree_set(0u32..=1000, 2..6),
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..6),
        counts in prop::collection::vec(1usize..10_000, 6),
        frac in 0.0f64..=1.0,
    ) {
        let grid: Vec<f64> = raw_grid.iter().map(|&v| v as f64 / 1000.0).collect();
        let g: IndexMap<String, Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("l{i}"), r[..grid.len()].to_vec()))
            .collect();
        let counts: IndexMap<String, usize> =
            g.keys().cloned().zip(counts.iter().copied()).collect();
        let top = *grid.last().unwrap();
        let target = (top * frac).max(1e-3).min(top);
        let table = ScoreTable::new(ScoreSource::Rr, grid.clone(), g).unwrap();
        let alloc = greedy_allocate(&table, &counts, target).unwrap();
        prop_assert!(global_sparsity(&alloc, &counts).unwrap() >= target - 1e-12);
        prop_assert!(alloc.iter().all(|(_, s)| grid.contains(&s)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn global_mask_removes_exact_total(seed in 0u64..1000, s in 0.0f64..=1.0) {
        let net = small_net(seed);
        let masks = global_magnitude_mask(&net, s).unwrap();
        let n: usize = net.prunable_counts().values().sum();
        let zeros: usize = masks.values().map(|m| m.zeros()).sum();
        prop_assert_eq!(zeros, prune_count(s, n));
        let alloc = Allocation::from_masks(&masks);
        prop_assert!((global_sparsity(&alloc, &net.prunable_counts()).unwrap() - zeros as f64 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn forward_is_per_image(seed in 0u64..1000) {
        let net = small_net(seed);
        let batch = gaussian_images(seed + 1, 4, net.input_shape()).unwrap();
        let whole = net.forward(&batch, &[]).unwrap().output;
        let parts: Vec<Tensor> = (0..4)
            .map(|i| net.forward(&batch.slice_batch(i, i + 1).unwrap(), &[]).unwrap().output)
            .collect();
        prop_assert_eq!(whole, Tensor::concat_batch(&parts).unwrap());
    }

    #[test]
    fn conv_relu_is_positively_homogeneous(
        w in tensor(vec![3, 2, 3, 3]),
        x in tensor(vec![2, 2, 5, 5]),
    ) {
        let conv = Conv2d {
            out_ch: 3,
            in_ch: 2,
            kh: 3,
            kw: 3,
            stride: 1,
            padding: 1,
            weight: w,
            bias: None,
        };
        let net = NetworkSpec::new(
            vec![
                LayerNode::new("conv", Op::Conv2d(conv), &[INPUT]),
                LayerNode::new("relu", Op::Relu, &["conv"]),
            ],
            vec![2, 5, 5],
            vec!["conv".into()],
            None,
        )
        .unwrap();
        let y = net.forward(&x, &[]).unwrap().output;
        let y2 = net.forward(&x.scaled(2.0), &[]).unwrap().output;
        prop_assert_eq!(y.scaled(2.0), y2);
    }
}
