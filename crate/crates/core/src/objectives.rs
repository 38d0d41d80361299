//! Self-supervised losses and the teacher update rules.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::HeadSpec;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

pub const KOLEO_EPS: f64 = 1e-8;
pub const BARLOW_STD_FLOOR: f64 = 1e-8;
pub const VICREG_EPS: f64 = 1e-4;

/// Large negative logit used to remove self-similarities.
const NEG_LARGE: f64 = -1e9;

/// Teacher targets `softmax((t − c)/τ_t)` per row; computed without gradients.
pub fn teacher_targets(teacher_logits: &Tensor, center: &[f64], tau_t: f64) -> Tensor {
    let (rows, cols) = (teacher_logits.rows(), teacher_logits.cols());
    assert_eq!(center.len(), cols, "center width");
    let data = teacher_logits
        .data()
        .chunks(cols)
        .flat_map(|r| r.iter().zip(center).map(|(t, c)| (t - c) / tau_t))
        .collect();
    Tensor::matrix(rows, cols, data)
        .unwrap()
        .softmax(1)
        .expect("finite teacher logits")
}

/// Cross-entropy between teacher targets and the student's tempered
/// log-softmax, averaged over rows.
pub fn dino_global_loss(g: &mut Graph, student_logits: Var, targets: &Tensor, tau_s: f64) -> Var {
    let b = targets.rows() as f64;
    let s = g.scale(student_logits, 1.0 / tau_s);
    let ls = g.log_softmax_rows(s);
    let t = g.input(targets.clone());
    let prod = g.mul(t, ls);
    let total = g.sum(prod);
    g.scale(total, -1.0 / b)
}

/// `c ← m·c + (1 − m)·mean_rows(teacher_logits)`.
pub fn update_center(center: &mut [f64], teacher_logits: &Tensor, momentum: f64) {
    let (rows, cols) = (teacher_logits.rows(), teacher_logits.cols());
    assert_eq!(center.len(), cols, "center width");
    let mut mean = vec![0.0; cols];
    for r in teacher_logits.data().chunks(cols) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for (c, m) in center.iter_mut().zip(&mean) {
        *c = momentum * *c + (1.0 - momentum) * (m / rows as f64);
    }
}

/// Nearest-neighbour entropy estimator on L2-normalized rows:
/// `−mean_i log(min_{j≠i} ‖x_i − x_j‖ + ε)`.
pub fn koleo_loss(g: &mut Graph, x: Var) -> Var {
    let rows = g.value(x).rows();
    assert!(rows >= 2, "koleo needs at least two rows");
    let n = g.row_l2_normalize(x, 1e-12);
    let nv = g.value(n);
    let nn: Vec<usize> = (0..rows)
        .map(|i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..rows {
                if j == i {
                    continue;
                }
                let d: f64 = nv.row(i).iter().zip(nv.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect();
    let a = g.gather_rows(&[n], (0..rows).map(|i| Some((0, i))).collect());
    let b = g.gather_rows(&[n], nn.into_iter().map(|j| Some((0, j))).collect());
    let diff = g.sub(a, b);
    let dist = g.row_norm(diff);
    let dist = g.add_scalar(dist, KOLEO_EPS);
    let logs = g.ln(dist);
    let m = g.mean(logs);
    g.scale(m, -1.0)
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s` elementwise.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<(), TensorError> {
    teacher.check_manifest(student)?;
    if m == 1.0 {
        return Ok(());
    }
    for (t, s) in teacher.entries_mut().iter_mut().zip(student.entries()) {
        for (a, b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Normalized-temperature cross entropy over `2B` anchors; each anchor's
/// positive is its cross-view partner.
pub fn ntxent_loss(g: &mut Graph, z1: Var, z2: Var, temperature: f64) -> Var {
    let b = g.value(z1).rows();
    assert!(b >= 2, "nt-xent needs at least two rows");
    let idx = (0..b)
        .map(|i| Some((0, i)))
        .chain((0..b).map(|i| Some((1, i))))
        .collect();
    let z = g.gather_rows(&[z1, z2], idx);
    let n = g.row_l2_normalize(z, 1e-12);
    let sim = g.matmul_nt(n, n);
    let sim = g.scale(sim, 1.0 / temperature);
    let m = 2 * b;
    let mut diag = vec![0.0; m * m];
    for i in 0..m {
        diag[i * m + i] = NEG_LARGE;
    }
    let mask = g.input(Tensor::matrix(m, m, diag).unwrap());
    let logits = g.add(sim, mask);
    let ls = g.log_softmax_rows(logits);
    let pos = (0..m).map(|i| i * m + (i + b) % m).collect();
    let picked = g.gather(ls, pos);
    let mean = g.mean(picked);
    g.scale(mean, -1.0)
}

/// Column-centered copy of `z` and its per-column sum of squares.
fn center_columns(g: &mut Graph, z: Var) -> (Var, Var) {
    let b = g.value(z).rows() as f64;
    let s = g.sum_rows(z);
    let neg_mean = g.scale(s, -1.0 / b);
    let c = g.add_row(z, neg_mean);
    let sq = g.square(c);
    let ss = g.sum_rows(sq);
    (c, ss)
}

fn diagonal(g: &mut Graph, m: Var) -> Var {
    let q = g.value(m).rows();
    g.gather(m, (0..q).map(|i| i * q + i).collect())
}

fn off_diagonal_square_sum(g: &mut Graph, m: Var) -> Var {
    let d = diagonal(g, m);
    let all = g.square(m);
    let all = g.sum(all);
    let dd = g.square(d);
    let dd = g.sum(dd);
    g.sub(all, dd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicRegWeights {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub hinge: f64,
}

impl Default for VicRegWeights {
    fn default() -> Self {
        Self {
            invariance: 25.0,
            variance: 25.0,
            covariance: 1.0,
            hinge: 1.0,
        }
    }
}

/// Invariance (mean squared difference) + variance hinge on the unbiased
/// per-feature std (averaged over both views) + squared off-diagonal
/// covariance divided by width (summed over both views).
pub fn vicreg_loss(g: &mut Graph, z1: Var, z2: Var, w: VicRegWeights) -> Var {
    let (b, q) = (g.value(z1).rows(), g.value(z1).cols());
    assert!(b >= 2, "vicreg needs at least two rows");
    let diff = g.sub(z1, z2);
    let sq = g.square(diff);
    let inv = g.mean(sq);

    let mut var_terms = Vec::new();
    let mut cov_terms = Vec::new();
    for z in [z1, z2] {
        let (c, ss) = center_columns(g, z);
        let var = g.scale(ss, 1.0 / (b as f64 - 1.0));
        let var = g.add_scalar(var, VICREG_EPS);
        let std = g.sqrt(var);
        let neg = g.scale(std, -1.0);
        let gap = g.add_scalar(neg, w.hinge);
        let hinge = g.relu(gap);
        var_terms.push(g.mean(hinge));
        let ct = g.transpose(c);
        let cov = g.matmul(ct, c);
        let cov = g.scale(cov, 1.0 / (b as f64 - 1.0));
        let off = off_diagonal_square_sum(g, cov);
        cov_terms.push(g.scale(off, 1.0 / q as f64));
    }
    let var = g.add(var_terms[0], var_terms[1]);
    let var = g.scale(var, 0.5);
    let cov = g.add(cov_terms[0], cov_terms[1]);
    let a = g.scale(inv, w.invariance);
    let v = g.scale(var, w.variance);
    let c = g.scale(cov, w.covariance);
    let t = g.add(a, v);
    g.add(t, c)
}

/// Per-feature standardization with population std floored at
/// [`BARLOW_STD_FLOOR`].
fn standardize(g: &mut Graph, z: Var) -> Var {
    let b = g.value(z).rows() as f64;
    let (c, ss) = center_columns(g, z);
    let var = g.scale(ss, 1.0 / b);
    let floor2 = BARLOW_STD_FLOOR * BARLOW_STD_FLOOR;
    let lift: Vec<f64> = g.value(var).data().iter().map(|v| (floor2 - v).max(0.0)).collect();
    if lift.iter().any(|v| *v > 0.0) {
        log::warn!("barlow twins: zero-variance feature, std floored at {BARLOW_STD_FLOOR}");
    }
    let lift = g.input(Tensor::new(vec![lift.len()], lift).unwrap());
    let var = g.add(var, lift);
    let std = g.sqrt(var);
    let inv = g.recip(std);
    g.mul_row(c, inv)
}

/// `Σ_i (C_ii − 1)² + λ Σ_{i≠j} C_ij²` with `C = ẑ1ᵀẑ2 / B`.
pub fn barlow_loss(g: &mut Graph, z1: Var, z2: Var, lambda_off: f64) -> Var {
    let b = g.value(z1).rows();
    assert!(b >= 2, "barlow twins needs at least two rows");
    let a = standardize(g, z1);
    let c = standardize(g, z2);
    let at = g.transpose(a);
    let cc = g.matmul(at, c);
    let cc = g.scale(cc, 1.0 / b as f64);
    let d = diagonal(g, cc);
    let d1 = g.add_scalar(d, -1.0);
    let d1 = g.square(d1);
    let on = g.sum(d1);
    let off = off_diagonal_square_sum(g, cc);
    let off = g.scale(off, lambda_off);
    g.add(on, off)
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Teacher–student distillation with KoLeo regularization.
    Dino,
    #[serde(rename = "ntxent")]
    NtXent {
        temperature: f64,
    },
    #[serde(rename = "vicreg")]
    VicReg(VicRegWeights),
    Barlow {
        lambda_off: f64,
    },
}

/// Width of the plug-in projectors.
pub const PLUGIN_WIDTH: usize = 128;

impl Objective {
    /// Default hyperparameters by name: `dino`, `ntxent`, `vicreg`, `barlow`.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "dino" => Objective::Dino,
            "ntxent" => Objective::NtXent { temperature: 0.5 },
            "vicreg" => Objective::VicReg(VicRegWeights::default()),
            "barlow" => Objective::Barlow { lambda_off: 5e-3 },
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Dino => "dino",
            Objective::NtXent { .. } => "ntxent",
            Objective::VicReg(_) => "vicreg",
            Objective::Barlow { .. } => "barlow",
        }
    }

    pub fn is_distillation(&self) -> bool {
        matches!(self, Objective::Dino)
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        let ok = match self {
            Objective::Dino => true,
            Objective::NtXent { temperature } => *temperature > 0.0,
            Objective::VicReg(w) => w.invariance > 0.0 && w.variance > 0.0 && w.covariance > 0.0 && w.hinge > 0.0,
            Objective::Barlow { lambda_off } => *lambda_off > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err("objective hyperparameters must be positive")
        }
    }

    /// Head placed on the CLS output for this objective.
    pub fn head_spec(&self, proj_dim: usize, head_hidden: usize) -> HeadSpec {
        match self {
            Objective::Dino => HeadSpec::Dino {
                hidden: head_hidden,
                out: proj_dim,
            },
            Objective::NtXent { .. } => HeadSpec::Mlp {
                dims: vec![PLUGIN_WIDTH, PLUGIN_WIDTH],
            },
            Objective::VicReg(_) | Objective::Barlow { .. } => HeadSpec::Mlp {
                dims: vec![PLUGIN_WIDTH, PLUGIN_WIDTH, PLUGIN_WIDTH],
            },
        }
    }

    /// Two-view loss for the plug-in objectives.
    pub fn plugin_loss(&self, g: &mut Graph, z1: Var, z2: Var) -> Option<Var> {
        Some(match *self {
            Objective::Dino => return None,
            Objective::NtXent { temperature } => ntxent_loss(g, z1, z2, temperature),
            Objective::VicReg(w) => vicreg_loss(g, z1, z2, w),
            Objective::Barlow { lambda_off } => barlow_loss(g, z1, z2, lambda_off),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_momentum_extremes() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]);
        let mut c = vec![5.0, 5.0];
        update_center(&mut c, &t, 1.0);
        assert_eq!(c, vec![5.0, 5.0]);
        update_center(&mut c, &t, 0.0);
        assert_eq!(c, vec![2.0, 4.0]);
    }

    #[test]
    fn antipodal_koleo() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]));
        let l = koleo_loss(&mut g, x);
        assert!((g.value(l).item() + libm::log(2.0 + KOLEO_EPS)).abs() < 1e-15);
    }

    #[test]
    fn objective_names_round_trip() {
        for n in ["dino", "ntxent", "vicreg", "barlow"] {
            assert_eq!(Objective::from_name(n).unwrap().name(), n);
        }
        assert!(Objective::from_name("byol").is_none());
    }
}
