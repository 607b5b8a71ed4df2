//! Parameterized layers: parameter ids in a [`ParamStore`] plus the forward
//! that binds them onto a [`Graph`].

use stpnet_autodiff::{BatchNormMode, Conv2dSpec, Element, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let w = store.he_uniform(format!("{name}.w"), &[cout, cin / spec.groups, k, k]);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[cout]));
        Self { w, b, spec }
    }

    /// Zero weights and bias; used for residual output projections.
    pub fn zeroed<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.zeros(format!("{name}.w"), &[cout, cin, 1, 1]);
        let b = Some(store.zeros(format!("{name}.b"), &[cout]));
        Self { w, b, spec: Conv2dSpec::default() }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = self.b.map(|b| g.param(b)).transpose()?;
        Ok(g.tape.conv2d(x, w, b, self.spec)?)
    }
}

/// Batch normalization with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[c]),
            beta: store.zeros(format!("{name}.beta"), &[c]),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(&[c])),
        }
    }

    /// Train graphs normalize with batch statistics and update the running
    /// averages; eval graphs use the running averages.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        if g.is_train() {
            let (y, stats) = g.tape.batch_norm(x, gamma, beta, BatchNormMode::Train)?;
            let stats = stats.expect("train mode reports statistics");
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let keep = T::one() - m;
            let store = g.store_mut();
            for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
                store.get_mut(id).data_mut().iter_mut().zip(batch).for_each(|(r, &s)| *r = keep * *r + m * s);
            }
            Ok(y)
        } else {
            let mean = g.store().get(self.running_mean).data().to_vec();
            let var = g.store().get(self.running_var).data().to_vec();
            Ok(g.tape.batch_norm(x, gamma, beta, BatchNormMode::Eval { mean: &mean, var: &var })?.0)
        }
    }
}

/// Convolution, batch normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, 3, Conv2dSpec::same3x3(1), false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.relu(y)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize) -> Self {
        Self { w: store.he_uniform(format!("{name}.w"), &[output, input]), b: store.zeros(format!("{name}.b"), &[output]) }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        Ok(g.tape.linear(x, w, Some(b))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self { gamma: store.ones(format!("{name}.gamma"), &[d]), beta: store.zeros(format!("{name}.beta"), &[d]) }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        Ok(g.tape.layer_norm(x, gamma, beta)?)
    }
}
