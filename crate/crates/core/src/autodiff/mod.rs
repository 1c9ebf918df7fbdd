//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use gradcheck::{grad_check, grad_check_fn, projection};
pub use graph::{Graph, Node, Var};
pub use ops::{Op, OpId};
pub use tensor::Tensor;

use crate::error::Result;

/// Evaluates an op by name; only ops without attributes can be built from a
/// bare name.
pub fn forward(op_id: &str, inputs: &[Tensor]) -> Result<Tensor> {
    let op = match op_id.parse::<OpId>()? {
        OpId::MatMul => Op::MatMul,
        OpId::Add => Op::Add,
        OpId::Mul => Op::Mul,
        OpId::Softmax => Op::Softmax,
        OpId::LogSoftmax => Op::LogSoftmax,
        OpId::LogSumExp => Op::LogSumExp,
        OpId::LayerNorm => Op::LayerNorm { eps: 1e-5 },
        OpId::Relu => Op::Relu,
        OpId::Transpose => Op::Transpose,
        OpId::ReduceSum => Op::ReduceSum,
        OpId::ReduceMean => Op::ReduceMean,
        OpId::DepthwiseConv1d => Op::DepthwiseConv1d,
        OpId::Concat => Op::Concat { axis: 0 },
        OpId::Scale => Op::Scale(1.0),
        other => {
            return Err(crate::error::Error::InvalidConfig(format!(
                "op `{other}` needs attributes; build it with `Op` directly"
            )))
        }
    };
    let refs: Vec<&Tensor> = inputs.iter().collect();
    op.forward(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_of_ones() {
        let out = forward("matmul", &[t(&[2, 3], &[1.0; 6]), t(&[3, 1], &[1.0; 3])]).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let out = forward("softmax", &[t(&[2], &[0.0, 0.0])]).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn logsumexp_closed_form() {
        let out = forward("logsumexp", &[t(&[2], &[1.0f64.ln(), 3.0f64.ln()])]).unwrap();
        assert!(out.shape().is_empty());
        assert!((out.item() - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let err = forward("matmul", &[t(&[2, 3], &[0.0; 6]), t(&[2, 3], &[0.0; 6])]).unwrap_err();
        match err {
            Error::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(matches!(forward("conv3d", &[]), Err(Error::UnknownOp(name)) if name == "conv3d"));
        for id in OpId::ALL {
            assert_eq!(id.name().parse::<OpId>().unwrap(), id);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.3, -1.0, 2.0, 5.0]).with_requires_grad(true));
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![2.0, -3.0]).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -6.0]);
    }

    #[test]
    fn diamond_sums_path_gradients() {
        // loss = sum(3x) + sum(x*x): both paths read x
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.5, -0.5, 4.0]).with_requires_grad(true));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.mul(x, x).unwrap();
        let sa = g.sum(a).unwrap();
        let sb = g.sum(b).unwrap();
        let loss = g.add(sa, sb).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0 + 3.0, 3.0 - 1.0, 3.0 + 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(s)) if s == vec![2]));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let y = g.scale(x, 2.0).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        assert!(g.record().is_empty());

        let p = g.leaf(Tensor::vector(vec![0.0, 0.0]).with_requires_grad(true));
        let d = g.add(c, p).unwrap();
        assert_eq!(g.record().len(), 1);
        // record is topologically ordered: inputs precede their node's output
        for node in g.record() {
            assert!(node.inputs.iter().all(|v| v.index() < node.output.index()));
        }
        let _ = d;
    }

    #[test]
    fn bias_add_expands_leading_dims() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_requires_grad(true));
        let b = g.leaf(t(&[3], &[10.0, 20.0, 30.0]).with_requires_grad(true));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert!(g.add(b, x).is_err());
    }

    #[test]
    fn softmax_grad_check_at_symmetric_point() {
        let err = grad_check(&Op::Softmax, &[Tensor::vector(vec![0.0; 3])], 1e-4).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn conv_rejects_short_input() {
        let x = Tensor::zeros(&[1, 2]);
        let w = Tensor::zeros(&[2, 2, 3]);
        let err = Op::Conv1dStrided { stride: 2 }.forward(&[&x, &w]).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { len: 1, field: 2, .. }));
    }

    #[test]
    fn forward_is_deterministic() {
        let x = t(&[2, 4], &[0.1, -0.7, 2.2, 0.0, 1.3, -3.1, 0.5, 0.9]);
        let gamma = Tensor::vector(vec![1.0, 0.5, -0.3, 2.0]);
        let beta = Tensor::vector(vec![0.0, 0.1, 0.2, 0.3]);
        let op = Op::LayerNorm { eps: 1e-5 };
        let a = op.forward(&[&x, &gamma, &beta]).unwrap();
        let b = op.forward(&[&x, &gamma, &beta]).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
