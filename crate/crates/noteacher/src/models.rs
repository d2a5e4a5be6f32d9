//! Small MLP scorers and their on-tape forward passes.
//!
//! Parameters live in plain tensors between steps; each training step enters
//! them onto a fresh tape as leaves ([`Mlp::enter`]), runs the forward pass,
//! and reads gradients back out by leaf id. Inputs come either as flat
//! feature rows or as variable-length bags of instance rows that are
//! max-pooled after the trunk (the layers before the final linear head).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TaskKind;
use crate::rng::StreamRng;
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// One linear layer: `w` is `in x out`, `b` is `1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

/// A multi-layer perceptron producing logits. The last layer is the head;
/// everything before it is the trunk that bag pooling runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Tape leaves for one entering of the parameters, `(w, b)` per layer.
pub struct MlpNodes {
    pub params: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    /// Fresh network with uniform Glorot weights (`+/- sqrt(6/(fan_in +
    /// fan_out))`) and zero biases, drawn from the caller's init stream.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        for (name, d) in [("input_dim", input_dim), ("output_dim", output_dim)] {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if hidden.contains(&0) {
            return Err(Error::Config(
                "hidden layer widths must be at least 1".into(),
            ));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut w = Tensor::zeros(fan_in, fan_out);
                for v in w.data_mut() {
                    *v = rng.uniform(-bound, bound);
                }
                Layer {
                    w,
                    b: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    /// Flat views of all parameter tensors, `[w0, b0, w1, b1, ...]` — the
    /// order the optimizer and the gradient read-back rely on.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    /// Enter every parameter onto the tape as a leaf.
    pub fn enter(&self, t: &mut Tape) -> MlpNodes {
        let params = self
            .layers
            .iter()
            .map(|l| (t.leaf(l.w.clone()), t.leaf(l.b.clone())))
            .collect();
        MlpNodes { params }
    }

    fn apply_layer(
        &self,
        t: &mut Tape,
        (w, b): (NodeId, NodeId),
        x: NodeId,
        with_activation: bool,
    ) -> Result<NodeId> {
        let z = t.matmul(x, w)?;
        let z = t.add_row_vec(z, b)?;
        if !with_activation {
            return Ok(z);
        }
        match self.activation {
            Activation::Relu => t.relu(z),
            Activation::Tanh => t.tanh(z),
        }
    }

    fn trunk(&self, t: &mut Tape, nodes: &MlpNodes, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for &layer in &nodes.params[..nodes.params.len() - 1] {
            h = self.apply_layer(t, layer, h, true)?;
        }
        Ok(h)
    }

    /// Logits for a batch of flat feature rows.
    pub fn forward(&self, t: &mut Tape, nodes: &MlpNodes, x: NodeId) -> Result<NodeId> {
        let h = self.trunk(t, nodes, x)?;
        self.apply_layer(t, *nodes.params.last().unwrap(), h, false)
    }

    /// Logits for a batch of bags: each bag's instance rows go through the
    /// trunk, max-pool to one row, and the pooled rows share the head. Bags
    /// of one instance pool to themselves, so an all-singleton batch takes
    /// the stacked fast path with identical values and gradients.
    pub fn forward_bags(&self, t: &mut Tape, nodes: &MlpNodes, bags: &[Tensor]) -> Result<NodeId> {
        if bags.is_empty() {
            return Err(Error::Config("forward_bags needs at least one bag".into()));
        }
        if bags.iter().all(|b| b.rows() == 1) {
            let mut data = Vec::with_capacity(bags.len() * bags[0].cols());
            for b in bags {
                data.extend_from_slice(b.data());
            }
            let x = t.leaf(Tensor::from_vec(bags.len(), bags[0].cols(), data));
            return self.forward(t, nodes, x);
        }
        let mut pooled = Vec::with_capacity(bags.len());
        for bag in bags {
            let x = t.leaf(bag.clone());
            let h = self.trunk(t, nodes, x)?;
            pooled.push(t.max_over_rows(h)?);
        }
        let stacked = t.concat_rows(&pooled)?;
        self.apply_layer(t, *nodes.params.last().unwrap(), stacked, false)
    }

    /// Plain (no-tape) probabilities for a batch of bags — the cheap path
    /// for validation and scoring.
    pub fn predict_bags(&self, bags: &[Tensor], kind: TaskKind) -> Result<Tensor> {
        let mut t = Tape::new();
        let nodes = self.enter(&mut t);
        let logits = self.forward_bags(&mut t, &nodes, bags)?;
        let probs = output_probs(&mut t, logits, kind)?;
        Ok(t.value(probs).clone())
    }
}

/// Row-wise softmax, computed as `exp(z - logsumexp(z))` so large logits
/// cannot overflow.
pub fn softmax_rows(t: &mut Tape, z: NodeId) -> Result<NodeId> {
    let lse = t.logsumexp_rows(z)?;
    let neg = t.neg(lse)?;
    let shifted = t.add_col_vec(z, neg)?;
    t.exp(shifted)
}

/// Map logits to probabilities for the task: per-label sigmoid for
/// multi-label, row softmax for uni-label.
pub fn output_probs(t: &mut Tape, logits: NodeId, kind: TaskKind) -> Result<NodeId> {
    match kind {
        TaskKind::MultiLabel => t.sigmoid(logits),
        TaskKind::UniLabel => softmax_rows(t, logits),
    }
}

/// Exponential moving average update, `target <- decay * target +
/// (1 - decay) * source`, applied parameter-by-parameter.
pub fn ema_update(target: &mut Mlp, source: &Mlp, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidHyperParam {
            name: "ema_decay",
            value: decay,
            reason: "must lie in [0, 1)",
        });
    }
    let src = source.param_tensors();
    let mut dst = target.param_tensors_mut();
    if src.len() != dst.len() {
        return Err(Error::Config(
            "EMA target and source have different architectures".into(),
        ));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if d.shape() != s.shape() {
            return Err(Error::Config(
                "EMA target and source have different architectures".into(),
            ));
        }
        for (dv, &sv) in d.data_mut().iter_mut().zip(s.data()) {
            *dv = decay * *dv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_rng() -> StreamRng {
        StreamRng::new(17, "init-1")
    }

    #[test]
    fn init_is_glorot_bounded_with_zero_bias() {
        let mut rng = tiny_rng();
        let m = Mlp::new(8, &[16], 3, Activation::Relu, &mut rng).unwrap();
        let bound0 = (6.0 / 24.0f64).sqrt();
        assert!(m.layers[0].w.data().iter().all(|v| v.abs() <= bound0));
        assert!(m.layers[0].b.data().iter().all(|&v| v == 0.0));
        let bound1 = (6.0 / 19.0f64).sqrt();
        assert!(m.layers[1].w.data().iter().all(|v| v.abs() <= bound1));
        // Different streams give different networks; same stream, the same.
        let m2 = Mlp::new(8, &[16], 3, Activation::Relu, &mut tiny_rng()).unwrap();
        assert_eq!(m, m2);
        let mut other = StreamRng::new(17, "init-2");
        let m3 = Mlp::new(8, &[16], 3, Activation::Relu, &mut other).unwrap();
        assert_ne!(m, m3);
    }

    #[test]
    fn rejects_zero_widths() {
        let mut rng = tiny_rng();
        assert!(Mlp::new(0, &[4], 2, Activation::Relu, &mut rng).is_err());
        assert!(Mlp::new(4, &[0], 2, Activation::Relu, &mut rng).is_err());
        assert!(Mlp::new(4, &[4], 0, Activation::Relu, &mut rng).is_err());
    }

    #[test]
    fn forward_matches_hand_computation() {
        let mut rng = tiny_rng();
        let mut m = Mlp::new(2, &[2], 1, Activation::Relu, &mut rng).unwrap();
        m.layers[0].w = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]);
        m.layers[0].b = Tensor::from_vec(1, 2, vec![0.1, -0.2]);
        m.layers[1].w = Tensor::from_vec(2, 1, vec![1.0, 3.0]);
        m.layers[1].b = Tensor::from_vec(1, 1, vec![0.25]);
        // x = [1, 2]: pre = [1*1+2*0.5+0.1, -1+4-0.2] = [2.1, 2.8]
        // relu no-op; logit = 2.1 + 3*2.8 + 0.25 = 10.75.
        let mut t = Tape::new();
        let nodes = m.enter(&mut t);
        let x = t.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let logits = m.forward(&mut t, &nodes, x).unwrap();
        assert!((t.value(logits).item() - 10.75).abs() < 1e-12);
    }

    #[test]
    fn bag_pooling_takes_the_columnwise_max() {
        let mut rng = tiny_rng();
        let mut m = Mlp::new(2, &[], 2, Activation::Relu, &mut rng).unwrap();
        // Identity head so pooled features pass straight through.
        m.layers[0].w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        m.layers[0].b = Tensor::from_vec(1, 2, vec![0.0, 0.0]);
        let bags = [
            Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]),
            Tensor::from_rows(&[vec![-1.0, -2.0]]),
        ];
        // No hidden layers: the trunk is empty, pooling runs on raw rows.
        let mut t = Tape::new();
        let nodes = m.enter(&mut t);
        let logits = m.forward_bags(&mut t, &nodes, &bags).unwrap();
        assert_eq!(t.value(logits).data(), &[3.0, 5.0, -1.0, -2.0]);
    }

    #[test]
    fn singleton_bags_match_flat_forward_exactly() {
        let mut rng = tiny_rng();
        let m = Mlp::new(3, &[4], 2, Activation::Tanh, &mut rng).unwrap();
        let rows = [
            Tensor::from_vec(1, 3, vec![0.3, -0.2, 0.9]),
            Tensor::from_vec(1, 3, vec![-0.5, 0.1, 0.4]),
        ];
        let mut t1 = Tape::new();
        let n1 = m.enter(&mut t1);
        let by_bags = m.forward_bags(&mut t1, &n1, &rows).unwrap();
        let mut t2 = Tape::new();
        let n2 = m.enter(&mut t2);
        let stacked = t2.leaf(Tensor::from_rows(&[
            rows[0].data().to_vec(),
            rows[1].data().to_vec(),
        ]));
        let by_flat = m.forward(&mut t2, &n2, stacked).unwrap();
        assert_eq!(t1.value(by_bags), t2.value(by_flat));
        // Gradients agree too.
        let s1 = t1.mean_all(by_bags).unwrap();
        let s2 = t2.mean_all(by_flat).unwrap();
        let g1 = t1.backward(s1).unwrap();
        let g2 = t2.backward(s2).unwrap();
        for (a, b) in n1.params.iter().zip(&n2.params) {
            assert_eq!(g1.wrt(a.0), g2.wrt(b.0));
            assert_eq!(g1.wrt(a.1), g2.wrt(b.1));
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_stable() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::from_rows(&[vec![0.0, 1.0], vec![1000.0, 998.0]]));
        let p = softmax_rows(&mut t, z).unwrap();
        let v = t.value(p);
        for r in 0..2 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let e = 1.0 / (1.0 + 1.0f64.exp());
        assert!((v[(0, 0)] - e).abs() < 1e-12);
        assert!(v.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn ema_follows_the_closed_form() {
        let mut rng = tiny_rng();
        let target0 = Mlp::new(2, &[3], 1, Activation::Relu, &mut rng).unwrap();
        let mut source = target0.clone();
        // Freeze the source at a constant 0.7 everywhere.
        for p in source.param_tensors_mut() {
            for v in p.data_mut() {
                *v = 0.7;
            }
        }
        let mut target = target0.clone();
        let decay = 0.9;
        let steps = 25;
        for _ in 0..steps {
            ema_update(&mut target, &source, decay).unwrap();
        }
        // t_n = c + decay^n (t_0 - c) for constant source c.
        let factor = decay.powi(steps);
        for (after, before) in target.param_tensors().iter().zip(target0.param_tensors()) {
            for (&a, &b) in after.data().iter().zip(before.data()) {
                let expected = 0.7 + factor * (b - 0.7);
                assert!((a - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_validates_decay_and_architecture() {
        let mut rng = tiny_rng();
        let a = Mlp::new(2, &[3], 1, Activation::Relu, &mut rng).unwrap();
        let mut b = a.clone();
        assert!(ema_update(&mut b, &a, 1.0).is_err());
        assert!(ema_update(&mut b, &a, -0.1).is_err());
        let other = Mlp::new(2, &[4], 1, Activation::Relu, &mut rng).unwrap();
        assert!(ema_update(&mut b, &other, 0.9).is_err());
    }

    #[test]
    fn serde_roundtrip_is_bit_exact() {
        let mut rng = tiny_rng();
        let m = Mlp::new(5, &[7, 3], 2, Activation::Tanh, &mut rng).unwrap();
        let blob = serde_json::to_string(&m).unwrap();
        let back: Mlp = serde_json::from_str(&blob).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.param_tensors().iter().zip(back.param_tensors()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    proptest! {
        #[test]
        fn forward_shapes_hold(
            input_dim in 1usize..6,
            h1 in 0usize..5,
            output_dim in 1usize..4,
            n in 1usize..5,
        ) {
            let hidden: Vec<usize> = if h1 == 0 { vec![] } else { vec![h1] };
            let mut rng = StreamRng::new(3, "init-1");
            let m = Mlp::new(input_dim, &hidden, output_dim, Activation::Relu, &mut rng).unwrap();
            let mut t = Tape::new();
            let nodes = m.enter(&mut t);
            let x = t.leaf(Tensor::zeros(n, input_dim));
            let logits = m.forward(&mut t, &nodes, x).unwrap();
            prop_assert_eq!(t.value(logits).shape(), (n, output_dim));
            let probs = output_probs(&mut t, logits, TaskKind::UniLabel).unwrap();
            for r in 0..n {
                let s: f64 = t.value(probs).row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
