//! The multi-task objective `task + lambda * adv`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{self, Bound, Mode, ModelConfig};

/// Scalar pieces of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean Gaussian NLL over the batch.
    pub task: f64,
    /// Mean domain cross-entropy over the batch.
    pub adv: f64,
    pub lambda: f64,
    pub total: f64,
}

/// A batch of pooled features, targets and domain labels.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, F]`
    pub x: Array,
    /// `[B, A]`
    pub y: Array,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Nodes produced by [`batch_objective`].
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub total: NodeId,
    pub task: NodeId,
    pub adv: Option<NodeId>,
    pub latent: NodeId,
}

/// Builds `mean GNLL + lambda * mean CE(domain(grl(h)))` on `tape`.
///
/// With `adversarial == false` the domain branch is left off the tape
/// entirely and `adv` reports 0.
pub fn batch_objective(
    config: &ModelConfig,
    bound: &Bound,
    tape: &mut Tape,
    batch: &Batch,
    lambda: f64,
    adversarial: bool,
    mode: &mut Mode<'_>,
) -> Result<(ObjectiveNodes, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let rows = batch.x.shape().first().copied().unwrap_or(0);
    if rows != batch.len() || batch.y.shape() != [batch.len(), config.num_aspects()] {
        return Err(Error::shape(
            "batch_objective",
            format!(
                "x {:?}, y {:?}, {} labels",
                batch.x.shape(),
                batch.y.shape(),
                batch.labels.len()
            ),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let x = tape.leaf(batch.x.clone())?;
    let h = model::encode(config, bound, tape, x, mode)?;
    let (m, chol) = model::quality_head(config, bound, tape, h)?;
    let task = tape.gnll(m, chol, &batch.y)?;
    let task_value = tape.value(task).item();
    if !adversarial {
        let breakdown = LossBreakdown {
            task: task_value,
            adv: 0.0,
            lambda,
            total: task_value,
        };
        let nodes = ObjectiveNodes {
            total: task,
            task,
            adv: None,
            latent: h,
        };
        return Ok((nodes, breakdown));
    }
    let logits = model::domain_head(bound, tape, h, 1.0)?;
    let adv = tape.softmax_cross_entropy(logits, &batch.labels)?;
    let weighted = tape.scale(adv, lambda)?;
    let total = tape.add(task, weighted)?;
    let breakdown = LossBreakdown {
        task: task_value,
        adv: tape.value(adv).item(),
        lambda,
        total: tape.value(total).item(),
    };
    let nodes = ObjectiveNodes {
        total,
        task,
        adv: Some(adv),
        latent: h,
    };
    Ok((nodes, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::rng::{self, Stream};
    use rand::Rng as _;

    fn setup() -> (ModelConfig, ModelParams, Batch) {
        let config = ModelConfig {
            input_dim: 4,
            encoder_hidden: vec![6],
            latent_dim: 3,
            aspects: vec!["a".into(), "b".into()],
            domain_hidden: vec![4],
            num_domains: 3,
            dropout_rate: 0.0,
            seed: 5,
        };
        let params = ModelParams::init(&config).unwrap();
        let mut r = rng::stream(1, Stream::Generator, 0);
        let b = 5;
        let x = Array::new(vec![b, 4], (0..b * 4).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Array::new(vec![b, 2], (0..b * 2).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = (0..b).map(|i| i % 3).collect();
        (config, params, Batch { x, y, labels })
    }

    fn run(c: &ModelConfig, p: &ModelParams, batch: &Batch, lambda: f64) -> (LossBreakdown, Vec<Array>) {
        let mut tape = Tape::new();
        let bound = Bound::bind(p, &mut tape).unwrap();
        let (nodes, br) =
            batch_objective(c, &bound, &mut tape, batch, lambda, true, &mut Mode::Infer).unwrap();
        let g = tape.backward(nodes.total).unwrap();
        (br, bound.encoder_ids().into_iter().map(|id| g.wrt(id)).collect())
    }

    #[test]
    fn total_is_task_plus_weighted_adv() {
        let (c, p, batch) = setup();
        for lambda in [0.0, 0.1, 0.5, 1.0] {
            let (br, _) = run(&c, &p, &batch, lambda);
            assert!((br.total - (br.task + lambda * br.adv)).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_zero_matches_task_only() {
        let (c, p, batch) = setup();
        let (br, with_branch) = run(&c, &p, &batch, 0.0);
        assert_eq!(br.total, br.task);
        let mut tape = Tape::new();
        let bound = Bound::bind(&p, &mut tape).unwrap();
        let (nodes, _) =
            batch_objective(&c, &bound, &mut tape, &batch, 0.0, false, &mut Mode::Infer).unwrap();
        let g = tape.backward(nodes.total).unwrap();
        for (a, id) in with_branch.iter().zip(bound.encoder_ids()) {
            assert_eq!(a, &g.wrt(id));
        }
    }

    #[test]
    fn lambda_scales_adversarial_gradient() {
        let (c, p, batch) = setup();
        let (_, g0) = run(&c, &p, &batch, 0.0);
        let (_, g1) = run(&c, &p, &batch, 0.1);
        let (_, g5) = run(&c, &p, &batch, 0.5);
        for ((a0, a1), a5) in g0.iter().zip(&g1).zip(&g5) {
            for ((x0, x1), x5) in a0.data().iter().zip(a1.data()).zip(a5.data()) {
                assert!(((x5 - x0) - 5.0 * (x1 - x0)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn breakdown_arithmetic_at_half() {
        // task 3, adv 1, lambda 0.5 -> 3.5
        let br = LossBreakdown {
            task: 3.0,
            adv: 1.0,
            lambda: 0.5,
            total: 3.0 + 0.5 * 1.0,
        };
        assert_eq!(br.total, 3.5);
    }

    #[test]
    fn single_sample_batch_equals_per_sample_losses() {
        let (c, p, batch) = setup();
        let one = Batch {
            x: Array::new(vec![1, 4], batch.x.row(2).to_vec()).unwrap(),
            y: Array::new(vec![1, 2], batch.y.row(2).to_vec()).unwrap(),
            labels: vec![batch.labels[2]],
        };
        let (br, _) = run(&c, &p, &one, 0.5);
        let mut tape = Tape::new();
        let bound = Bound::bind(&p, &mut tape).unwrap();
        let x = tape.leaf(Array::new(vec![1, 4], batch.x.row(2).to_vec()).unwrap()).unwrap();
        let h = model::encode(&c, &bound, &mut tape, x, &mut Mode::Infer).unwrap();
        let (m, chol) = model::quality_head(&c, &bound, &mut tape, h).unwrap();
        let mrow = tape.slice(m, 0, 2).unwrap();
        let y = Array::new(vec![1, 2], batch.y.row(2).to_vec()).unwrap();
        let nll = tape.gnll(mrow, chol, &y).unwrap();
        assert_eq!(br.task, tape.value(nll).item());
    }

    #[test]
    fn misaligned_labels_rejected() {
        let (c, p, mut batch) = setup();
        batch.labels.pop();
        let mut tape = Tape::new();
        let bound = Bound::bind(&p, &mut tape).unwrap();
        let r = batch_objective(&c, &bound, &mut tape, &batch, 0.5, true, &mut Mode::Infer);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
