use super::ops::Op;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor owned by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation.
#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Tensor arena plus the computation record.
///
/// Every value lives in the arena. A node is appended to the record only when
/// at least one of its inputs requires a gradient, so pure inference builds no
/// record at all. Nodes are appended in evaluation order, which makes the
/// record topologically sorted by construction.
#[derive(Default, Debug)]
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an input tensor; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.values.push(tensor);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.values[v.0].grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.values[v.0].requires_grad()
    }

    pub fn record(&self) -> &[Node] {
        &self.nodes
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.values[v.0]).collect();
        let out = op.forward(&refs)?;
        let tracked = refs.iter().any(|t| t.requires_grad());
        let var = self.leaf(out.with_requires_grad(tracked));
        if tracked {
            self.nodes.push(Node {
                op,
                inputs: inputs.to_vec(),
                output: var,
            });
        }
        Ok(var)
    }

    /// Reverse pass from a scalar loss. Gradients are added into the `grad`
    /// buffer of every reachable tensor that requires one; existing buffers
    /// are accumulated into, never reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.values[loss.0].shape();
        if !(shape.is_empty() || shape == [1]) {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for node in self.nodes.iter().rev() {
            let Some(out_grad) = grads[node.output.0].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let needs: Vec<bool> = inputs.iter().map(|t| t.requires_grad()).collect();
            let input_grads = node
                .op
                .vjp(&inputs, &self.values[node.output.0], &out_grad, &needs)?;
            for (var, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the output's gradient for callers that inspect it
            grads[node.output.0] = Some(out_grad);
        }
        for (value, grad) in self.values.iter_mut().zip(grads) {
            if let (true, Some(g)) = (value.requires_grad(), grad) {
                value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[x])
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LogSumExp, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Op::EmbeddingLookup(ids.to_vec()), &[table])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: f64) -> Result<Var> {
        self.apply(Op::MaskedFill { mask, value }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::ReduceSum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::ReduceMean, &[x])
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.apply(Op::Conv1dStrided { stride }, &[x, w])
    }

    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        self.apply(Op::DepthwiseConv1d, &[x, w])
    }

    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
        self.apply(
            Op::CtcLoss {
                target: target.to_vec(),
                blank,
            },
            &[log_probs],
        )
    }
}
