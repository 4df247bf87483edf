//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is checking.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms. Rounding in
/// the loss (about 1e-16·|L| / step) makes an exactly-zero gradient, such as
/// an attention key bias, read as ~1e-10 numerically.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `Σ out ⊙ R` with a fixed random `R ~ U(-1, 1)`; a generic scalar loss that
/// does not vanish under normalisation layers the way a plain sum does.
pub fn probe_loss(g: &mut Graph<'_>, out: Var, rng: &mut RngStream) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let r = Tensor::new(&shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let r = g.input(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

/// Checks every element of each parameter in `ids`. `forward` must build the
/// same scalar loss on whatever graph it is handed. `fault` names an
/// operation whose backward rule is deliberately corrupted in the analytic
/// pass (test fixture).
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    fault: Option<&'static str>,
    forward: F,
) -> Result<Vec<CheckEntry>>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut analytic = GradStore::zeros_like(store);
    {
        let mut g = Graph::new(store);
        if let Some(op) = fault {
            g.inject_backward_fault(op);
        }
        let loss = forward(&mut g)?;
        g.backward(loss)?.accumulate_into(&mut analytic);
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = forward(&mut g)?;
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss during finite differences".into()));
        }
        Ok(v)
    };
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).numel();
        let mut worst = 0.0f64;
        for j in 0..n {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.get(id)[j], numeric));
        }
        out.push(CheckEntry {
            name: store.name(id).into(),
            elements: n,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

/// Checks the gradient with respect to a non-parameter input `x`.
pub fn check_input<F>(store: &ParamStore, x: &Tensor, step: f64, forward: F) -> Result<CheckEntry>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let xv = g.leaf(x.clone());
        let loss = forward(&mut g, xv)?;
        let grads = g.backward(loss)?;
        grads
            .wrt(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| alloc::vec![0.0; x.numel()])
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new(store);
        let xv = g.leaf(t.clone());
        let l = forward(&mut g, xv)?;
        Ok(g.scalar(l))
    };
    let mut work = x.clone();
    let mut worst = 0.0f64;
    for j in 0..x.numel() {
        let orig = x.data()[j];
        work.data_mut()[j] = orig + step;
        let plus = eval(&work)?;
        work.data_mut()[j] = orig - step;
        let minus = eval(&work)?;
        work.data_mut()[j] = orig;
        worst = worst.max(relative_error(analytic[j], (plus - minus) / (2.0 * step)));
    }
    Ok(CheckEntry {
        name: "input".into(),
        elements: x.numel(),
        max_rel_err: worst,
    })
}

pub fn worst(entries: &[CheckEntry]) -> f64 {
    entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;
    use crate::rng::StreamKind;

    fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_differences() {
        let mut rng = RngStream::new(3, StreamKind::Check);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, &[3, 4])).unwrap();
        let b = store.add("b", random(&mut rng, &[4, 2])).unwrap();
        let entries = check_params(&store, &[a, b], DEFAULT_STEP, None, |g| {
            let (pa, pb) = (g.param(a), g.param(b));
            let c = g.matmul(pa, pb)?;
            Ok(g.sum(c))
        })
        .unwrap();
        assert!(worst(&entries) <= 1e-6, "{entries:?}");
    }

    /// Every differentiable primitive on small random shapes, rel err ≤ 1e-6.
    #[test]
    fn primitives_match_differences() {
        let mut rng = RngStream::new(11, StreamKind::Check);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, &[4, 6])).unwrap();
        let y = store.add("y", random(&mut rng, &[4, 6])).unwrap();
        let m = store.add("m", random(&mut rng, &[6, 3])).unwrap();
        let bias = store.add("bias", random(&mut rng, &[6])).unwrap();
        let gamma = store.add("gamma", random(&mut rng, &[6])).unwrap();
        let beta = store.add("beta", random(&mut rng, &[6])).unwrap();
        let w = store.add("w", random(&mut rng, &[3, 6, 5])).unwrap();
        let wb = store.add("wb", random(&mut rng, &[5])).unwrap();
        let w4 = store.add("w4", random(&mut rng, &[4, 6, 2])).unwrap();
        let wb4 = store.add("wb4", random(&mut rng, &[2])).unwrap();
        let mix = store.add("mix", random(&mut rng, &[1, 3])).unwrap();
        let mu = store.add("mu", random(&mut rng, &[1, 3])).unwrap();
        let sig = store.add("sig", random(&mut rng, &[1, 3])).unwrap();
        let ids: Vec<ParamId> = store.ids().collect();
        let probe_seed = rng.next_u64();
        let entries = check_params(&store, &ids, DEFAULT_STEP, None, |g| {
            let mut pr = RngStream::new(probe_seed, StreamKind::Check);
            let (px, py, pm) = (g.param(x), g.param(y), g.param(m));
            let mut terms = Vec::new();
            let mm = g.matmul(px, pm)?;
            terms.push(probe_loss(g, mm, &mut pr)?);
            let nt = g.matmul_nt(px, py)?;
            terms.push(probe_loss(g, nt, &mut pr)?);
            let a = g.add(px, py)?;
            let s = g.sub(a, py)?;
            let p = g.mul(s, py)?;
            terms.push(probe_loss(g, p, &mut pr)?);
            let pb = g.param(bias);
            let r = g.add_row(px, pb)?;
            let r = g.affine(r, 1.7, -0.2);
            for act in 0..6 {
                let v = match act {
                    0 => g.sigmoid(r),
                    1 => g.tanh(r),
                    2 => g.softplus(r),
                    3 => g.exp(r),
                    4 => g.abs(r),
                    _ => g.relu(r),
                };
                terms.push(probe_loss(g, v, &mut pr)?);
            }
            let sm = g.softmax_rows(r)?;
            terms.push(probe_loss(g, sm, &mut pr)?);
            let (pg, pbeta) = (g.param(gamma), g.param(beta));
            let ln = g.layer_norm(py, pg, pbeta, 1e-5)?;
            terms.push(probe_loss(g, ln, &mut pr)?);
            let (pw, pwb) = (g.param(w), g.param(wb));
            let cv = g.conv1d_same(px, pw, pwb)?;
            terms.push(probe_loss(g, cv, &mut pr)?);
            let (pw4, pwb4) = (g.param(w4), g.param(wb4));
            let cv4 = g.conv1d(py, pw4, pwb4, 2)?;
            terms.push(probe_loss(g, cv4, &mut pr)?);
            let ga = g.gather_rows(px, &[2, 2, 0, 3, 1, 1])?;
            terms.push(probe_loss(g, ga, &mut pr)?);
            let cc = g.concat_cols(&[px, py])?;
            let sc = g.slice_cols(cc, 4, 5)?;
            terms.push(probe_loss(g, sc, &mut pr)?);
            let cr = g.concat_rows(&[px, py])?;
            let sr = g.slice_rows(cr, 3, 3)?;
            terms.push(probe_loss(g, sr, &mut pr)?);
            let mp = g.max_pool_prev(px);
            terms.push(probe_loss(g, mp, &mut pr)?);
            let (pmix, pmu, psig) = (g.param(mix), g.param(mu), g.param(sig));
            let wmix = g.softmax_rows(pmix)?;
            let mu2 = g.affine(pmu, 2.0, 1.5);
            let s2 = g.softplus(psig);
            let s2 = g.affine(s2, 1.0, 0.3);
            let dens = g.gmm_density(wmix, mu2, s2, 5)?;
            terms.push(probe_loss(g, dens, &mut pr)?);
            let rs = g.reshape(px, &[6, 4])?;
            terms.push(probe_loss(g, rs, &mut pr)?);
            let l1 = g.l1(px, py)?;
            terms.push(l1);
            let mean = g.mean(px);
            terms.push(mean);
            let total = g.add_all(&terms)?;
            Ok(total)
        })
        .unwrap();
        for e in &entries {
            assert!(e.max_rel_err <= 1e-6, "{e:?}");
        }
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let mut rng = RngStream::new(5, StreamKind::Check);
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let w = pb.glorot("w", &[3, 3], 3, 3).unwrap();
        let entries = check_params(&store, &[w], DEFAULT_STEP, Some("tanh"), |g| {
            let p = g.param(w);
            let t = g.tanh(p);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(worst(&entries) > 0.1);
    }

    #[test]
    fn input_check_sees_relu_mask() {
        let store = ParamStore::new();
        let x = Tensor::new(&[1, 3], alloc::vec![0.5, -0.7, 1.2]).unwrap();
        let e = check_input(&store, &x, DEFAULT_STEP, |g, xv| {
            let r = g.relu(xv);
            let sq = g.mul(r, r)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(e.max_rel_err < 1e-8);
    }
}
