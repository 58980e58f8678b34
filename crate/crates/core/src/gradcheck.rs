//! Central finite-difference verification of reverse-mode gradients.
//!
//! The scalar objective is a fixed random weighting of the checked op's
//! output, accumulated in f64, so the comparison is limited by the op's own
//! f32 arithmetic rather than by a lossy final reduction.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Arr, Graph, Val};
use crate::nn::ParamStore;

/// Tolerances and sampling policy for one check.
#[derive(Clone, Debug)]
pub struct FdSpec {
    /// Central-difference step.
    pub eps: f32,
    /// Maximum allowed `|a - n| / max(|a|, |n|)`.
    pub rtol: f32,
    /// Absolute short-circuit: differences at or below this always pass.
    pub atol: f32,
    /// Elements checked per tensor (all of them if the tensor is smaller).
    pub max_checks: usize,
    pub seed: u64,
}

impl Default for FdSpec {
    fn default() -> Self {
        // At f32 the finite difference carries quantization noise of about
        // ulp(out) * n / (2 eps) ~ 2.5e-4 absolute, so differences below
        // 5e-4 are indistinguishable from roundoff and auto-pass; genuine
        // backward bugs show up as O(1) relative errors.
        FdSpec { eps: 2e-3, rtol: 1e-3, atol: 5e-4, max_checks: 8, seed: 0xFD }
    }
}

/// Outcome of a passing check.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f32,
}

fn weights_like(shape: &[usize], seed: u64) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|_| {
            let mag = 0.5 + rng.random::<f32>();
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Arr::from_shape_vec(IxDyn(shape), v).unwrap()
}

fn objective(out: &Arr, w: &Arr) -> f64 {
    out.iter().zip(w.iter()).map(|(&o, &wi)| o as f64 * wi as f64).sum()
}

fn pick_indices(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < n {
        picked.insert(rng.random_range(0..len));
    }
    picked.into_iter().collect()
}

fn compare(analytic: f32, numeric: f64, spec: &FdSpec, what: &str) -> Result<f32, String> {
    let n = numeric as f32;
    let diff = (analytic - n).abs();
    if diff <= spec.atol {
        return Ok(0.0);
    }
    let rel = diff / analytic.abs().max(n.abs());
    if rel <= spec.rtol {
        Ok(rel)
    } else {
        Err(format!(
            "{what}: analytic {analytic:.6e} vs fd {n:.6e} (rel {rel:.3e}, diff {diff:.3e})"
        ))
    }
}

/// Checks gradients with respect to explicit input tensors. `build` is
/// invoked on a fresh eval-mode graph per objective evaluation and must be
/// deterministic given its inputs.
pub fn fd_check_inputs<F>(
    store: &ParamStore,
    inputs: &[Arr],
    build: F,
    spec: &FdSpec,
) -> Result<FdReport, String>
where
    F: Fn(&Graph, &[Val]) -> Val,
{
    let eval = |ins: &[Arr]| -> Arr {
        let g = Graph::new(store, false, spec.seed);
        let vals: Vec<Val> = ins
            .iter()
            .enumerate()
            .map(|(i, a)| g.input(a.clone(), &format!("fd.in{i}")))
            .collect();
        let out = build(&g, &vals);
        g.value(out)
    };

    let g = Graph::new(store, false, spec.seed);
    let vals: Vec<Val> = inputs
        .iter()
        .enumerate()
        .map(|(i, a)| g.input(a.clone(), &format!("fd.in{i}")))
        .collect();
    let out = build(&g, &vals);
    let w = weights_like(&g.shape(out), spec.seed ^ 0x5eed);
    let grads = g.backward_with(out, w.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1d);
    let mut work: Vec<Arr> = inputs.to_vec();
    let mut checked = 0usize;
    let mut max_rel = 0f32;
    for ti in 0..inputs.len() {
        let analytic = grads.of(vals[ti]).cloned();
        let idxs = pick_indices(inputs[ti].len(), spec.max_checks, &mut rng);
        for &ei in &idxs {
            let orig = work[ti].as_slice().unwrap()[ei];
            work[ti].as_slice_mut().unwrap()[ei] = orig + spec.eps;
            let op = eval(&work);
            work[ti].as_slice_mut().unwrap()[ei] = orig - spec.eps;
            let om = eval(&work);
            work[ti].as_slice_mut().unwrap()[ei] = orig;
            let numeric = (objective(&op, &w) - objective(&om, &w)) / (2.0 * spec.eps as f64);
            let a = analytic
                .as_ref()
                .map(|t| t.as_slice().unwrap()[ei])
                .unwrap_or(0.0);
            let rel = compare(a, numeric, spec, &format!("input {ti} elem {ei}"))?;
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(FdReport { checked, max_rel })
}

/// Checks gradients with respect to store parameters. `build` binds the
/// parameters it uses via `Graph::param` and returns the op output.
pub fn fd_check_params<F>(
    store: &mut ParamStore,
    param_ids: &[usize],
    build: F,
    spec: &FdSpec,
) -> Result<FdReport, String>
where
    F: Fn(&Graph) -> Val,
{
    let run = |st: &ParamStore| -> Arr {
        let g = Graph::new(st, false, spec.seed);
        let out = build(&g);
        g.value(out)
    };
    let out0 = run(store);
    let w = weights_like(out0.shape(), spec.seed ^ 0x5eed);
    let analytic: Vec<Option<Arr>> = {
        let g = Graph::new(store, false, spec.seed);
        let out = build(&g);
        let grads = g.backward_with(out, w.clone());
        g.param_grads(&grads)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9bad);
    let mut checked = 0usize;
    let mut max_rel = 0f32;
    for &pid in param_ids {
        let len = store.value(pid).len();
        let idxs = pick_indices(len, spec.max_checks, &mut rng);
        for &ei in &idxs {
            let orig = store.value(pid).as_slice().unwrap()[ei];
            store.value_mut(pid).as_slice_mut().unwrap()[ei] = orig + spec.eps;
            let op = run(store);
            store.value_mut(pid).as_slice_mut().unwrap()[ei] = orig - spec.eps;
            let om = run(store);
            store.value_mut(pid).as_slice_mut().unwrap()[ei] = orig;
            let numeric = (objective(&op, &w) - objective(&om, &w)) / (2.0 * spec.eps as f64);
            let a = analytic[pid]
                .as_ref()
                .map(|t| t.as_slice().unwrap()[ei])
                .unwrap_or(0.0);
            let rel = compare(a, numeric, spec, &format!("param '{}' elem {ei}", store.name(pid)))?;
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(FdReport { checked, max_rel })
}
