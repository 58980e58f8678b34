//! Training harness: Adam with global-norm clipping, the halving
//! learning-rate schedule, NaN diagnostics, per-epoch validation and
//! dataset evaluation.

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Moments;
use crate::config::RunConfig;
use crate::error::{HgError, Result};
use crate::features::prepare_scene;
use crate::graph::{Arr, Graph};
use crate::metrics::{aggregate, score_scene, MetricReport};
use crate::model::HgNet;
use crate::nn::ParamStore;
use crate::objectives::scene_loss;
use crate::scenegen::SceneSample;

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;
const CLIP_NORM: f32 = 1.0;

/// Adam with bias correction. Parameters whose gradient is `None` are
/// skipped entirely, moments included, so disabled submodules stay
/// bitwise at initialization.
pub struct Adam {
    m: Vec<Arr>,
    v: Vec<Arr>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros =
            |st: &ParamStore| (0..st.len()).map(|i| Arr::zeros(st.value(i).raw_dim())).collect();
        Adam { m: zeros(store), v: zeros(store), step: 0 }
    }

    /// Resumes from checkpointed moments.
    pub fn resume(store: &ParamStore, mo: Moments) -> Result<Self> {
        if mo.m.len() != store.len() || mo.v.len() != store.len() {
            return Err(HgError::Incompatible(format!(
                "moments cover {} parameters, model has {}",
                mo.m.len(),
                store.len()
            )));
        }
        for id in 0..store.len() {
            if mo.m[id].shape() != store.value(id).shape()
                || mo.v[id].shape() != store.value(id).shape()
            {
                return Err(HgError::Incompatible(format!(
                    "moment shapes for '{}' do not match the parameter",
                    store.name(id)
                )));
            }
        }
        Ok(Adam { m: mo.m, v: mo.v, step: mo.step })
    }

    pub fn moments(&self) -> Moments {
        Moments { m: self.m.clone(), v: self.v.clone(), step: self.step }
    }

    /// One update with learning rate `lr`. Gradients are first rescaled so
    /// their global norm does not exceed [`CLIP_NORM`].
    pub fn apply(&mut self, store: &mut ParamStore, grads: Vec<Option<Arr>>, lr: f32) {
        assert_eq!(grads.len(), store.len(), "gradient list must align with the store");
        let mut sq = 0f64;
        for gr in grads.iter().flatten() {
            for &x in gr.iter() {
                sq += x as f64 * x as f64;
            }
        }
        let norm = sq.sqrt() as f32;
        let scale = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (id, gopt) in grads.into_iter().enumerate() {
            let Some(mut gr) = gopt else { continue };
            if scale != 1.0 {
                gr.mapv_inplace(|x| x * scale);
            }
            Zip::from(&mut self.m[id]).and(&gr).for_each(|m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
            Zip::from(&mut self.v[id]).and(&gr).for_each(|v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
            Zip::from(store.value_mut(id))
                .and(&self.m[id])
                .and(&self.v[id])
                .for_each(|p, &m, &v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + EPS));
        }
    }
}

/// lr · factor^⌊epoch / every⌋; `every = 0` disables decay.
pub fn lr_for_epoch(cfg: &RunConfig, epoch: usize) -> f32 {
    if cfg.lr_decay_every == 0 {
        return cfg.lr;
    }
    cfg.lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Mean per-scene loss values of one step or epoch. `l_occ` and `l_flow`
/// are the raw sums entering the objective; `total` is the normalized loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossScalars {
    pub l_occ: f64,
    pub l_flow: f64,
    pub total: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub train: LossScalars,
    pub val: MetricReport,
}

pub struct TrainResult {
    pub model: HgNet,
    pub store: ParamStore,
    pub moments: Moments,
    pub logs: Vec<EpochLog>,
}

fn check_geometry(cfg: &RunConfig, scenes: &[SceneSample]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        if s.gt_observed.shape() != [cfg.t, cfg.h, cfg.w]
            || s.hist_occupancy.shape() != [cfg.t_h + 1, cfg.h, cfg.w]
        {
            return Err(HgError::Incompatible(format!(
                "scene {i} geometry {:?}/{:?} does not match config ({}, {}, {}, t_h {})",
                s.gt_observed.shape(),
                s.hist_occupancy.shape(),
                cfg.t,
                cfg.h,
                cfg.w,
                cfg.t_h
            )));
        }
    }
    Ok(())
}

/// One optimizer update over `batch`, averaging gradients across scenes.
/// Aborts with the first non-finite tensor's label if the loss is NaN.
pub fn train_step(
    model: &HgNet,
    store: &mut ParamStore,
    opt: &mut Adam,
    cfg: &RunConfig,
    batch: &[&SceneSample],
    lr: f32,
    seed: u64,
) -> Result<LossScalars> {
    assert!(!batch.is_empty());
    let flags = HgNet::ablations(cfg);
    let mut acc: Vec<Option<Arr>> = vec![None; store.len()];
    let mut sums = LossScalars { l_occ: 0.0, l_flow: 0.0, total: 0.0 };
    for (k, sample) in batch.iter().enumerate() {
        let sc = prepare_scene(cfg, sample);
        let g = Graph::new(store, true, seed.wrapping_add(k as u64));
        let (bundle, _) = model.forward(&g, &sc, flags)?;
        let loss = scene_loss(&g, &bundle, &sc)?;
        let total = g.value(loss.total)[[]];
        if !total.is_finite() {
            return Err(HgError::NonFinite {
                tensor: g.first_non_finite().unwrap_or_else(|| "loss".into()),
            });
        }
        sums.l_occ += g.value(loss.l_occ)[[]] as f64;
        sums.l_flow += g.value(loss.l_flow)[[]] as f64;
        sums.total += total as f64;
        let grads = g.backward(loss.total);
        for (slot, pg) in acc.iter_mut().zip(g.param_grads(&grads)) {
            if let Some(pgv) = pg {
                match slot {
                    Some(a) => *a += &pgv,
                    None => *slot = Some(pgv),
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for slot in acc.iter_mut() {
        if let Some(a) = slot {
            a.mapv_inplace(|x| x * inv);
        }
    }
    opt.apply(store, acc, lr);
    let n = batch.len() as f64;
    Ok(LossScalars { l_occ: sums.l_occ / n, l_flow: sums.l_flow / n, total: sums.total / n })
}

/// Runs eval-mode forward passes over `scenes` and aggregates the metrics
/// (mean over scenes, then timesteps).
pub fn evaluate(
    model: &HgNet,
    store: &ParamStore,
    cfg: &RunConfig,
    scenes: &[SceneSample],
) -> Result<MetricReport> {
    if scenes.is_empty() {
        return Err(HgError::EmptyData("evaluation dataset is empty".into()));
    }
    check_geometry(cfg, scenes)?;
    let flags = HgNet::ablations(cfg);
    let mut scores = Vec::with_capacity(scenes.len());
    for sample in scenes {
        let sc = prepare_scene(cfg, sample);
        let g = Graph::new(store, false, 0);
        let (bundle, _) = model.forward(&g, &sc, flags)?;
        scores.push(score_scene(
            &g.value(bundle.flow),
            &g.value(bundle.observed),
            &g.value(bundle.occluded),
            &sc,
        )?);
    }
    aggregate(&scores)
}

/// Full training run from a fresh initialization: `cfg.epochs` epochs of
/// seeded-shuffle minibatches with per-epoch validation.
pub fn train(
    cfg: &RunConfig,
    train_scenes: &[SceneSample],
    val_scenes: &[SceneSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(HgError::EmptyData("training dataset is empty".into()));
    }
    check_geometry(cfg, train_scenes)?;
    let mut store = ParamStore::new();
    let model = HgNet::new(&mut store, cfg);
    store.init_all(cfg.seed);
    let mut opt = Adam::new(&store);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_for_epoch(cfg, epoch);
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);
        let mut sums = LossScalars { l_occ: 0.0, l_flow: 0.0, total: 0.0 };
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &train_scenes[i]).collect();
            let step_seed = cfg
                .seed
                .wrapping_add((epoch as u64) << 32)
                .wrapping_add(steps as u64 * 1024);
            let ls = train_step(&model, &mut store, &mut opt, cfg, &batch, lr, step_seed)?;
            sums.l_occ += ls.l_occ;
            sums.l_flow += ls.l_flow;
            sums.total += ls.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let train_loss =
            LossScalars { l_occ: sums.l_occ / n, l_flow: sums.l_flow / n, total: sums.total / n };
        let val = evaluate(&model, &store, cfg, val_scenes)?;
        let log = EpochLog { epoch, lr, train: train_loss, val };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainResult { model, store, moments: opt.moments(), logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::simulate_scene;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            h: 32,
            w: 32,
            t_h: 2,
            t: 1,
            d: 8,
            c_cov: 4,
            batch: 2,
            epochs: 1,
            dropout: 0.0,
            n_agents: 4,
            ..RunConfig::default()
        }
    }

    fn tiny_scenes(cfg: &RunConfig, seeds: std::ops::Range<u64>) -> Vec<SceneSample> {
        seeds.map(|s| simulate_scene(s, &cfg.scene_config()).unwrap()).collect()
    }

    #[test]
    fn lr_schedule_halves_every_two_epochs() {
        let cfg = RunConfig::default();
        assert_eq!(lr_for_epoch(&cfg, 0), 1e-4);
        assert_eq!(lr_for_epoch(&cfg, 1), 1e-4);
        assert_eq!(lr_for_epoch(&cfg, 2), 5e-5);
        assert_eq!(lr_for_epoch(&cfg, 3), 5e-5);
        assert_eq!(lr_for_epoch(&cfg, 4), 2.5e-5);
        let flat = RunConfig { lr_decay_every: 0, ..RunConfig::default() };
        assert_eq!(lr_for_epoch(&flat, 9), flat.lr);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut st = ParamStore::new();
        st.register("p", &[2], crate::nn::Init::Zeros);
        let mut opt = Adam::new(&st);
        // Gradient (0.6, 0.8) has norm 1.0, so clipping leaves it alone.
        let g = Arr::from_shape_vec(IxDyn(&[2]), vec![0.6f32, 0.8]).unwrap();
        opt.apply(&mut st, vec![Some(g)], 0.1);
        // After bias correction the first update is lr·g/(|g| + eps).
        assert_abs_diff_eq!(st.value(0)[[0]], -0.1, epsilon = 1e-5);
        assert_abs_diff_eq!(st.value(0)[[1]], -0.1, epsilon = 1e-5);
    }

    #[test]
    fn gradient_clipping_rescales_large_updates() {
        let mut st = ParamStore::new();
        st.register("p", &[1], crate::nn::Init::Zeros);
        let mut opt = Adam::new(&st);
        let g = Arr::from_shape_vec(IxDyn(&[1]), vec![1000f32]).unwrap();
        opt.apply(&mut st, vec![Some(g)], 0.1);
        // Clipped to norm 1, so the step is the same as for gradient 1.
        let mut st2 = ParamStore::new();
        st2.register("p", &[1], crate::nn::Init::Zeros);
        let mut opt2 = Adam::new(&st2);
        let g2 = Arr::from_shape_vec(IxDyn(&[1]), vec![1f32]).unwrap();
        opt2.apply(&mut st2, vec![Some(g2)], 0.1);
        assert_eq!(st.value(0)[[0]].to_bits(), st2.value(0)[[0]].to_bits());
    }

    #[test]
    fn none_gradients_leave_parameters_and_moments_untouched() {
        let mut st = ParamStore::new();
        st.register("a", &[2], crate::nn::Init::TruncNormal(0.5));
        st.register("b", &[2], crate::nn::Init::TruncNormal(0.5));
        st.init_all(3);
        let before = st.value(1).clone();
        let mut opt = Adam::new(&st);
        let g = Arr::from_shape_vec(IxDyn(&[2]), vec![0.1f32, -0.2]).unwrap();
        opt.apply(&mut st, vec![Some(g), None], 0.01);
        assert_eq!(
            st.value(1).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(opt.m[1].iter().all(|&v| v == 0.0));
        assert_ne!(st.value(0)[[0]], 0.5940194, "sanity: first param moved");
    }

    #[test]
    fn same_seed_reproduces_epoch_zero_loss() {
        let cfg = tiny_cfg();
        let scenes = tiny_scenes(&cfg, 0..4);
        let val = tiny_scenes(&cfg, 100..102);
        let run = |cfg: &RunConfig| {
            let r = train(cfg, &scenes, &val, |_| {}).unwrap();
            r.logs[0].train.total
        };
        let a = run(&cfg);
        let b = run(&cfg);
        assert_eq!(a.to_bits(), b.to_bits(), "same seed must give identical loss");
        let other = RunConfig { seed: cfg.seed + 1, ..cfg.clone() };
        assert_ne!(run(&other).to_bits(), a.to_bits(), "different seed should differ");
    }

    #[test]
    fn nan_parameters_abort_with_a_tensor_name() {
        let cfg = tiny_cfg();
        let scenes = tiny_scenes(&cfg, 0..1);
        let mut store = ParamStore::new();
        let model = HgNet::new(&mut store, &cfg);
        store.init_all(cfg.seed);
        // Poison the flow grid head only: flow predictions carry no range
        // validation, so the NaN reaches the loss instead of tripping the
        // occupancy contract first.
        let id = store.id("flow.fpn.out.w").unwrap();
        store.value_mut(id).fill(f32::NAN);
        let mut opt = Adam::new(&store);
        match train_step(&model, &mut store, &mut opt, &cfg, &[&scenes[0]], 1e-4, 0) {
            Err(HgError::NonFinite { tensor }) => assert!(!tensor.is_empty()),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn disabled_submodules_stay_at_initialization() {
        let cfg = RunConfig {
            fgat_enabled: false,
            memory_enabled: false,
            ..tiny_cfg()
        };
        let scenes = tiny_scenes(&cfg, 0..2);
        let mut store = ParamStore::new();
        let model = HgNet::new(&mut store, &cfg);
        store.init_all(cfg.seed);
        let frozen: Vec<usize> = (0..store.len())
            .filter(|&i| {
                let n = store.name(i);
                n.contains(".fgat.offset")
                    || n.contains(".fgat.rel_bias")
                    || n.contains(".mem.")
                    || n == "dec.covariates"
            })
            .map(|i| i)
            .collect();
        assert!(!frozen.is_empty());
        let before: Vec<Vec<u32>> = frozen
            .iter()
            .map(|&i| store.value(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut opt = Adam::new(&store);
        let batch: Vec<&SceneSample> = scenes.iter().collect();
        train_step(&model, &mut store, &mut opt, &cfg, &batch, 1e-3, 7).unwrap();
        for (&i, b) in frozen.iter().zip(&before) {
            let now: Vec<u32> = store.value(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, b, "parameter '{}' moved while disabled", store.name(i));
        }
        let wq = store.id("flow.fgat.wq.w").unwrap();
        assert!(store.value(wq).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn evaluate_rejects_empty_and_mismatched_datasets() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let model = HgNet::new(&mut store, &cfg);
        store.init_all(1);
        assert!(matches!(
            evaluate(&model, &store, &cfg, &[]),
            Err(HgError::EmptyData(_))
        ));
        let other = RunConfig { h: 64, w: 64, ..tiny_cfg() };
        let wrong = tiny_scenes(&other, 0..1);
        assert!(matches!(
            evaluate(&model, &store, &cfg, &wrong),
            Err(HgError::Incompatible(_))
        ));
    }

    #[test]
    fn evaluate_produces_a_valid_report() {
        let cfg = tiny_cfg();
        let scenes = tiny_scenes(&cfg, 5..8);
        let mut store = ParamStore::new();
        let model = HgNet::new(&mut store, &cfg);
        store.init_all(cfg.seed);
        let rep = evaluate(&model, &store, &cfg, &scenes).unwrap();
        rep.validate().unwrap();
    }
}
