use super::graph::{Graph, OpKind, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Corrupt this op's backward rule in the analytic pass.
    pub fault: Option<OpKind>,
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        GradCheck { eps, fault: None }
    }

    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }

    /// Max over all coordinates of all `inputs` of
    /// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut graph = match self.fault {
            Some(kind) => Graph::with_fault(kind),
            None => Graph::new(),
        };
        let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
        let loss = f(&mut graph, &vars)?;
        graph.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        drop(graph);

        let eval = |probe: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            g.value(out)
                .item()
                .ok_or_else(|| Error::Usage("gradient check needs a scalar function".into()))
        };

        let mut probe = inputs.to_vec();
        let mut worst: f64 = 0.0;
        for (t, grad) in analytic.iter().enumerate() {
            for i in 0..probe[t].len() {
                let orig = probe[t].data()[i];
                probe[t].data_mut()[i] = orig + self.eps;
                let plus = eval(&probe)?;
                probe[t].data_mut()[i] = orig - self.eps;
                let minus = eval(&probe)?;
                probe[t].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = grad.data()[i];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

/// [`GradCheck::run`] with no fault injection.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck::new(eps).run(f, inputs)
}
