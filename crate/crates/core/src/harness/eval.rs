//! Labeled evaluation data. This is the only place label tensors are read.

use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::net::NetworkSpec;
use crate::tensor::Tensor;

/// Image batches `batch/<i>` with class ids `labels/<i>` (stored as f32).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    batches: Vec<Tensor>,
    labels: Vec<Vec<usize>>,
}

impl EvalSet {
    pub fn new(batches: Vec<Tensor>, labels: Vec<Vec<usize>>) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        if batches.len() != labels.len()
            || batches
                .iter()
                .zip(&labels)
                .any(|(b, l)| b.shape()[0] != l.len())
        {
            return Err(Error::Config(
                "every evaluation batch needs one label per image".into(),
            ));
        }
        Ok(Self { batches, labels })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let batches = c.indexed_f32("batch/")?;
        let labels = c
            .indexed_f32("labels/")?
            .iter()
            .map(|t| {
                t.data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::InvalidTensor(format!(
                                "label {v} is not a class index"
                            )))
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Self::new(batches, labels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push_indexed("batch/", &self.batches);
        let labels: Vec<Tensor> = self
            .labels
            .iter()
            .map(|l| {
                Tensor::new(vec![l.len()], l.iter().map(|&v| v as f32).collect())
                    .expect("label shape")
            })
            .collect();
        c.push_indexed("labels/", &labels);
        c
    }

    pub fn num_images(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }
}

/// Top-1 accuracy. Equal logits resolve to the lowest class index.
pub fn evaluate_topk(net: &NetworkSpec, eval: &EvalSet) -> Result<f64> {
    let mut correct = 0usize;
    for (batch, labels) in eval.batches.iter().zip(&eval.labels) {
        let out = net.forward(batch, &[])?.output;
        let classes = out.len() / labels.len();
        for (row, &y) in out.data().chunks_exact(classes).zip(labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            correct += usize::from(pred == y);
        }
    }
    Ok(correct as f64 / eval.num_images() as f64)
}

/// Labels equal to the dense network's own predictions, for toy setups
/// without ground truth.
pub fn self_labeled(net: &NetworkSpec, batches: Vec<Tensor>) -> Result<EvalSet> {
    let mut labels = Vec::new();
    for b in &batches {
        let out = net.forward(b, &[])?.output;
        let classes = out.len() / b.shape()[0];
        labels.push(
            out.data()
                .chunks_exact(classes)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
                })
                .collect(),
        );
    }
    EvalSet::new(batches, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerNode, Linear, Op, INPUT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Linear head that passes its two inputs through as logits.
    fn passthrough() -> NetworkSpec {
        let l = Linear {
            in_features: 2,
            out_features: 2,
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: None,
        };
        NetworkSpec::new(
            vec![LayerNode::new("fc", Op::Linear(l), &[INPUT])],
            vec![2],
            vec![],
            None,
        )
        .unwrap()
    }

    #[test]
    fn perfect_and_anti_logits() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]).unwrap();
        let good = EvalSet::new(vec![x.clone()], vec![vec![0, 1, 0]]).unwrap();
        assert_eq!(evaluate_topk(&passthrough(), &good).unwrap(), 1.0);
        let bad = EvalSet::new(vec![x], vec![vec![1, 0, 1]]).unwrap();
        assert_eq!(evaluate_topk(&passthrough(), &bad).unwrap(), 0.0);
    }

    #[test]
    fn constant_prediction_on_balanced_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2000;
        let x = Tensor::new(vec![n, 2], (0..n).flat_map(|_| [1.0, 0.0]).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let acc = evaluate_topk(
            &passthrough(),
            &EvalSet::new(vec![x], vec![labels]).unwrap(),
        )
        .unwrap();
        // 4 binomial standard deviations at n = 2000
        assert!(
            (acc - 0.5).abs() < 4.0 * (0.25f64 / n as f64).sqrt(),
            "{acc}"
        );
    }

    #[test]
    fn container_round_trip() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = EvalSet::new(vec![x], vec![vec![0, 1]]).unwrap();
        let back = EvalSet::from_container(
            &Container::from_bytes(&e.to_container().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, e);
        assert!(EvalSet::new(vec![Tensor::zeros(vec![2, 2])], vec![vec![0]]).is_err());
    }
}
