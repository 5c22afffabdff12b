//! AdamW with decoupled weight decay over a [`ParamStore`].

use lift3d_autograd::Array;

use crate::error::{ensure, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamStore,
    v: ParamStore,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&ParamStore, &ParamStore) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: ParamStore, v: ParamStore, t: u64) -> Result<()> {
        ensure!(
            m.names().eq(self.m.names()) && v.names().eq(self.v.names()),
            "optimizer moment names do not match the parameters"
        );
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).unwrap_or_else(|| panic!("missing gradient for {name}"));
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            update(p, g, m, v, lr, b1, b2, bc1, bc2, self.eps, self.weight_decay);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut Array,
    g: &Array,
    m: &mut Array,
    v: &mut Array,
    lr: f64,
    b1: f64,
    b2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
    wd: f64,
) {
    let (pd, gd) = (p.data_mut(), g.data());
    let (md, vd) = (m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
        vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
        let mh = md[i] / bc1;
        let vh = vd[i] / bc2;
        pd[i] -= lr * (mh / (vh.sqrt() + eps) + wd * pd[i]);
    }
}
