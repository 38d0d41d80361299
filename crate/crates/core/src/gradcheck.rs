//! Central finite-difference gradient checks.
//!
//! This is an oracle for the reverse-mode graph: the numeric side only ever
//! evaluates forward values.

use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Denominator floor for the relative error, so that gradients that are
/// zero on both sides do not divide by zero.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the analytic gradient of `build` against central differences
/// with step `h` for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("scalar loss");

    let eval = |ins: &[Tensor]| {
        let mut g = Graph::no_grad();
        let vs: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let l = build(&mut g, &vs);
        g.value(l).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[ti]);
        for j in 0..t.len() {
            let x = t.data()[j];
            work[ti].data_mut()[j] = x + h;
            let fp = eval(&work);
            work[ti].data_mut()[j] = x - h;
            let fm = eval(&work);
            work[ti].data_mut()[j] = x;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g[j]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (ti, j);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.checked += 1;
        }
    }
    report
}

/// Central differences over every element of every parameter in `store`.
/// Returns the worst relative error per parameter, by name.
pub fn check_store<F>(store: &ParamStore, h: f64, build: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let mut work = store.clone();
    work.zero_grad();
    g.backward(loss).expect("scalar loss").accumulate_into(&mut work);
    let analytic = work.clone();
    let eval = |s: &ParamStore| {
        let mut g = Graph::no_grad();
        let l = build(&mut g, s);
        g.value(l).item()
    };
    let mut worst = Vec::new();
    for id in store.ids() {
        let mut max_rel: f64 = 0.0;
        for j in 0..store.value(id).len() {
            let x = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = x + h;
            let fp = eval(&work);
            work.value_mut(id).data_mut()[j] = x - h;
            let fm = eval(&work);
            work.value_mut(id).data_mut()[j] = x;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.grad(id).data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(if rel.is_nan() { f64::INFINITY } else { rel });
        }
        worst.push((store.entry(id).name.clone(), max_rel));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::tensor::Segment;
    use alloc::vec;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, Purpose::Init);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_ok(r: GradCheckReport) {
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(random(&[3, 4], 1));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn dot_product_gradients_swap() {
        let (xt, yt) = (random(&[5], 1), random(&[5], 2));
        let mut g = Graph::new();
        let x = g.leaf(xt.clone());
        let y = g.leaf(yt.clone());
        let p = g.mul(x, y);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), yt.data());
        assert_eq!(grads.wrt(y).unwrap(), xt.data());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(random(&[2, 2], 1));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_node_gradients_sum() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.add(x, x);
        let z = g.mul(y, x);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[12.0]);
    }

    #[test]
    fn elementwise_and_reduction_ops() {
        for seed in 0..20 {
            let a = random(&[3, 4], seed);
            let b = random(&[3, 4], seed + 100);
            let pos = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
            assert_ok(check(&[a.clone(), b.clone(), pos], 1e-5, |g, v| {
                let s = g.sub(v[0], v[1]);
                let m = g.mul(s, v[0]);
                let e = g.exp(m);
                let l = g.ln(v[2]);
                let q = g.sqrt(v[2]);
                let q = g.recip(q);
                let r = g.relu(v[1]);
                let sq = g.square(r);
                let t = g.add(e, l);
                let t = g.add(t, q);
                let t = g.add(t, sq);
                let t = g.scale(t, 0.7);
                let t = g.add_scalar(t, 2.0);
                let tt = g.transpose(t);
                let cs = g.sum_rows(tt);
                let rs = g.row_sum(t);
                let a1 = g.mean(cs);
                let a2 = g.sum(rs);
                g.add(a1, a2)
            }));
        }
    }

    #[test]
    fn matrix_ops() {
        for seed in 0..20 {
            let a = random(&[3, 4], seed);
            let b = random(&[4, 5], seed + 1);
            let c = random(&[2, 4], seed + 2);
            let row = random(&[5], seed + 3);
            assert_ok(check(&[a, b, c, row], 1e-5, |g, v| {
                let ab = g.matmul(v[0], v[1]);
                let ab = g.add_row(ab, v[3]);
                let ab = g.mul_row(ab, v[3]);
                let act = g.gelu(ab);
                let nt = g.matmul_nt(v[0], v[2]);
                let s1 = g.softmax_rows(act);
                let s2 = g.log_softmax_rows(nt);
                let w = g.square(s1);
                let a1 = g.sum(w);
                let a2 = g.sum(s2);
                let a2 = g.scale(a2, 0.1);
                g.add(a1, a2)
            }));
        }
    }

    #[test]
    fn normalization_ops() {
        for seed in 0..20 {
            let x = random(&[4, 6], seed);
            let gain = random(&[6], seed + 1);
            let bias = random(&[6], seed + 2);
            let w = random(&[6, 6], seed + 3);
            assert_ok(check(&[x, gain, bias, w], 1e-5, |g, v| {
                let ln = g.layer_norm(v[0], v[1], v[2], 1e-5);
                let h = g.matmul(ln, v[3]);
                let n = g.row_l2_normalize(h, 1e-12);
                let norms = g.row_norm(v[0]);
                let n2 = g.mul(n, h);
                let a = g.sum(n2);
                let b = g.sum(norms);
                g.add(a, b)
            }));
        }
    }

    #[test]
    fn gather_ops() {
        for seed in 0..20 {
            let a = random(&[3, 4], seed);
            let b = random(&[2, 4], seed + 1);
            assert_ok(check(&[a, b], 1e-5, |g, v| {
                let rows = g.gather_rows(
                    &[v[0], v[1]],
                    vec![Some((0, 2)), None, Some((1, 0)), Some((0, 2)), Some((1, 1))],
                );
                let sq = g.square(rows);
                let picked = g.gather(sq, vec![0, 5, 5, 19]);
                let e = g.exp(picked);
                g.sum(e)
            }));
        }
    }

    #[test]
    fn feature_embed_and_attention() {
        for seed in 0..20 {
            let d = 4;
            let w = random(&[3, d], seed);
            let b = random(&[3, d], seed + 1);
            let q = random(&[2, d], seed + 2);
            let wv = random(&[d, d], seed + 3);
            let x: Vec<f64> = random(&[2, 3], seed + 4).into_data();
            assert_ok(check(&[w, b, q, wv], 1e-5, |g, v| {
                let e = g.feature_embed(x.clone(), v[0], v[1]);
                let vals = g.matmul(e, v[3]);
                let segs = vec![
                    Segment {
                        q_start: 0,
                        q_len: 2,
                        kv_start: 0,
                        kv_len: 3,
                    },
                    Segment {
                        q_start: 0,
                        q_len: 2,
                        kv_start: 3,
                        kv_len: 3,
                    },
                ];
                let o = g.attention(v[2], e, vals, segs, 2, 0.7);
                let s = g.square(o);
                g.sum(s)
            }));
        }
    }

    #[test]
    fn focal_op() {
        for seed in 0..20 {
            let z = random(&[6], seed);
            let z = Tensor::new(vec![6], z.data().iter().map(|v| v * 4.0).collect()).unwrap();
            let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
            assert_ok(check(&[z], 1e-5, |g, v| g.focal_loss(v[0], &labels, 0.75, 2.0)));
        }
    }
}
