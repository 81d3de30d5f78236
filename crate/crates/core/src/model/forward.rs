use std::collections::HashMap;

use super::ModelParams;
use crate::autodiff::{BatchStats, Grads, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalization behavior: batch statistics while training, running averages otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus the parameters bound onto it.
pub struct Forward<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ModelParams<T>,
    bound: HashMap<usize, Var>,
    mode: Mode,
    grad_params: bool,
    /// Batch statistics seen by each normalization, keyed by its name prefix.
    pub norm_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// `grad_params` marks trainable parameters as differentiation targets.
    pub fn new(params: &'a ModelParams<T>, mode: Mode, grad_params: bool) -> Self {
        Self { tape: Tape::new(), params, bound: HashMap::new(), mode, grad_params, norm_stats: Vec::new() }
    }

    pub fn params(&self) -> &'a ModelParams<T> {
        self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Places an input tensor on the tape.
    pub fn input(&mut self, t: Tensor<T>, needs_grad: bool) -> Var {
        self.tape.leaf(t, needs_grad)
    }

    /// Binds a named parameter (once per pass).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let params = self.params;
        let idx = params.index_of(name).ok_or_else(|| {
            crate::error::Error::InvalidArgument(format!("model has no parameter `{name}`"))
        })?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let e = &params.entries()[idx];
        let v = self.tape.leaf(e.value.clone(), self.grad_params && e.trainable());
        self.bound.insert(idx, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// 3x3 convolution (no bias) followed by normalization, named `{name}.conv` / `{name}.bn`.
    pub fn conv_norm(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.conv.weight"))?;
        let y = self.tape.conv2d(x, w, None, stride, 1)?;
        self.norm(y, &format!("{name}.bn"))
    }

    pub fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, g, b, None)?;
                self.norm_stats.push((name.to_string(), stats.expect("batch statistics")));
                Ok(y)
            }
            Mode::Eval => {
                let params = self.params;
                let rm = params.get(&format!("{name}.running_mean"))?.data();
                let rv = params.get(&format!("{name}.running_var"))?.data();
                Ok(self.tape.batch_norm(x, g, b, Some((rm, rv)))?.0)
            }
        }
    }

    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.tape.linear(x, w, b)
    }

    /// Gradients of every bound trainable parameter, sorted by parameter index.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(usize, Tensor<T>)> {
        let mut out: Vec<(usize, Tensor<T>)> = self
            .bound
            .iter()
            .filter_map(|(&idx, &v)| grads.get(v).map(|g| (idx, g.clone())))
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    }

    /// Tape variable bound to parameter `idx`, if used in this pass.
    pub fn bound_var(&self, idx: usize) -> Option<Var> {
        self.bound.get(&idx).copied()
    }
}
