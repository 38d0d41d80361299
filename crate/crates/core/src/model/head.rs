use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::encoder::init_normal;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Projection head placed on the CLS output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSpec {
    /// Three GELU-separated linear layers of width `hidden`, row L2
    /// normalization, then a bias-free weight-normalized layer to `out`
    /// prototypes.
    Dino { hidden: usize, out: usize },
    /// Plain MLP through `dims` (GELU between layers, none after the last).
    Mlp { dims: Vec<usize> },
}

impl HeadSpec {
    pub fn out_dim(&self) -> usize {
        match self {
            HeadSpec::Dino { out, .. } => *out,
            HeadSpec::Mlp { dims } => dims.last().copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadIds {
    layers: Vec<(ParamId, ParamId)>,
    last: Option<ParamId>,
}

impl HeadIds {
    pub(crate) fn build(store: &mut ParamStore, rng: &mut Rng, d: usize, spec: &HeadSpec) -> Self {
        let widths: Vec<usize> = match spec {
            HeadSpec::Dino { hidden, .. } => vec![d, *hidden, *hidden, *hidden],
            HeadSpec::Mlp { dims } => core::iter::once(d).chain(dims.iter().copied()).collect(),
        };
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wid = store.add(&format!("head.l{i}.w"), init_normal(rng, &[w[0], w[1]]), true);
                let bid = store.add(&format!("head.l{i}.b"), Tensor::zeros(&[w[1]]), false);
                (wid, bid)
            })
            .collect();
        let last = match spec {
            HeadSpec::Dino { hidden, out } => Some(store.add("head.last.v", init_normal(rng, &[*out, *hidden]), true)),
            HeadSpec::Mlp { .. } => None,
        };
        Self { layers, last }
    }

    /// Id of the weight-normalized final layer, if any.
    pub(crate) fn last(&self) -> Option<ParamId> {
        self.last
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, freeze_last: bool) -> Var {
        let n = self.layers.len();
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.matmul(h, wv);
            h = g.add_row(y, bv);
            if i + 1 < n {
                h = g.gelu(h);
            }
        }
        match self.last {
            Some(v) => {
                let h = g.row_l2_normalize(h, 1e-12);
                let vv = if freeze_last {
                    g.param_frozen(store, v)
                } else {
                    g.param(store, v)
                };
                let wn = g.row_l2_normalize(vv, 1e-12);
                g.matmul_nt(h, wn)
            }
            None => h,
        }
    }
}
