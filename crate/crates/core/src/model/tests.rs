use super::*;
use crate::autodiff::grad_check_norm;
use crate::data::{Neighbor, SplitTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> BatConfig {
    BatConfig {
        behavior_hidden: 4,
        interaction_hidden: 5,
        position_hidden: 5,
        decoder_hidden: 6,
        input_embed: 4,
        behavior_embed: 3,
        attention_dim: 4,
        priority_hidden: 4,
        context_embed: 5,
        encoding_dim: 6,
        t_h: 0.6,
        t_f: 0.4,
        ..BatConfig::default()
    }
}

fn track(start: CartPoint, v: CartPoint, n: usize, offset: usize) -> Vec<CartPoint> {
    (0..n)
        .map(|i| start.translated(v.x * (i + offset) as f64 * 0.2, v.y * (i + offset) as f64 * 0.2))
        .collect()
}

/// Ego heading +y with two neighbors, one of which appears late.
fn toy_scene(h: usize, f: usize) -> Scene {
    let v = CartPoint::new(0.3, 12.0);
    let ego_history = track(CartPoint::new(0.0, 0.0), v, h, 0);
    let ego_future: Vec<CartPoint> = track(CartPoint::new(0.0, 0.0), CartPoint::new(-0.8, 11.0), f, h)
        .into_iter()
        .collect();
    let a = track(CartPoint::new(3.5, 6.0), CartPoint::new(0.0, 10.0), h, 0);
    let mut b: Vec<Option<CartPoint>> = track(CartPoint::new(-3.5, -4.0), CartPoint::new(0.5, 14.0), h, 0)
        .into_iter()
        .map(Some)
        .collect();
    b[0] = None;
    Scene {
        ego_id: 1,
        ref_frame: 0,
        ego_history,
        ego_future,
        neighbors: vec![
            Neighbor {
                id: 4,
                history: a.into_iter().map(Some).collect(),
            },
            Neighbor { id: 9, history: b },
        ],
        ego_lanes: Vec::new(),
        maneuver: ManeuverClass::new(Lateral::Left, Longitudinal::Brake),
        split_tag: SplitTag::Left,
    }
}

fn default_scene() -> Scene {
    let c = BatConfig::default();
    toy_scene(c.history_steps(), c.future_steps())
}

fn close(a: &MultimodalPrediction, b: &MultimodalPrediction, tol: f64) {
    for k in 0..9 {
        assert!((a.maneuver_probs[k] - b.maneuver_probs[k]).abs() < tol);
        for (x, y) in a.modes[k].iter().zip(&b.modes[k]) {
            for (u, w) in [
                (x.mu_rho, y.mu_rho),
                (x.mu_theta, y.mu_theta),
                (x.sigma_rho, y.sigma_rho),
                (x.sigma_theta, y.sigma_theta),
                (x.corr, y.corr),
            ] {
                assert!((u - w).abs() < tol, "{u} vs {w}");
            }
        }
    }
}

#[test]
fn maneuver_index_round_trips() {
    for i in 0..9 {
        assert_eq!(ManeuverClass::from_index(i).unwrap().index(), i);
    }
    assert!(ManeuverClass::from_index(9).is_err());
    assert_eq!(ManeuverClass::default().name(), "keep-maintain");
}

#[test]
fn squash_gives_valid_parameters() {
    let g = squash_output([0.0; 5], 20.0);
    assert!(g.is_valid());
    // Density at the mean of an uncorrelated Gaussian.
    let g = GaussianParams {
        mu_rho: 10.0,
        mu_theta: 0.4,
        sigma_rho: 1.0,
        sigma_theta: 1.0,
        corr: 0.0,
    };
    assert!((g.density(g.mean()) - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
    for raw in [[-50.0, 3.0, -40.0, -40.0, 30.0], [50.0, -3.0, 40.0, 40.0, -30.0]] {
        let g = squash_output(raw, 20.0);
        assert!(g.sigma_rho > 0.0 && g.sigma_theta > 0.0 && g.corr.abs() < 1.0, "{g:?}");
    }
}

#[test]
fn prediction_shapes_and_sums() {
    let model = BatModel::new(BatConfig::default()).unwrap();
    let params = model.init_params();
    let pred = model.predict(&params, &default_scene()).unwrap();
    assert_eq!(pred.modes.len(), 9);
    assert!(pred.modes.iter().all(|m| m.len() == 25));
    assert!(pred.modes.iter().flatten().all(GaussianParams::is_valid));
    for probs in [&pred.lateral_probs[..], &pred.longitudinal_probs[..], &pred.maneuver_probs[..]] {
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(probs.iter().all(|&p| p > 0.0));
    }
    assert_eq!(pred.attention.len(), 2);
    assert!((pred.attention.iter().map(|a| a.1).sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn parameter_set_depends_on_variant() {
    let full = BatModel::new(BatConfig::default()).unwrap().init_params();
    for v in ModelVariant::ALL {
        let cfg = v.apply(&BatConfig::default());
        let model = BatModel::new(cfg.clone()).unwrap();
        let params = model.init_params();
        model.check_params(&params).unwrap();
        let has = |prefix: &str| params.names().any(|n| n.starts_with(prefix));
        assert_eq!(has("behavior."), cfg.use_behavior, "{v:?}");
        assert_eq!(has("interaction."), cfg.use_interaction, "{v:?}");
        assert_eq!(has("priority.attention"), cfg.use_interaction && cfg.use_priority, "{v:?}");
        assert!(params.size() <= full.size());
        model.predict(&params, &default_scene()).unwrap();
    }
    let mut broken = full.clone();
    broken.insert("decoder.output.w", Tensor::zeros(&[3, 3]));
    assert!(BatModel::new(BatConfig::default()).unwrap().check_params(&broken).is_err());
}

#[test]
fn zero_radius_ignores_neighbors() {
    let cfg = BatConfig {
        r: 0.0,
        ..BatConfig::default()
    };
    let model = BatModel::new(cfg).unwrap();
    let params = model.init_params();
    let scene = default_scene();
    let prepared = model.prepare(&scene).unwrap();
    assert!(prepared.neighbor_ids.is_empty());
    assert!(prepared.behavior.iter().flatten().all(|f| f.iter().all(|&x| x == 0.0)));
    let mut alone = scene.clone();
    alone.neighbors.clear();
    close(&model.predict(&params, &scene).unwrap(), &model.predict(&params, &alone).unwrap(), 0.0 + 1e-15);
}

#[test]
fn neighbor_order_does_not_matter() {
    let model = BatModel::new(BatConfig::default()).unwrap();
    let params = model.init_params();
    let scene = default_scene();
    let mut swapped = scene.clone();
    swapped.neighbors.reverse();
    let a = model.predict(&params, &scene).unwrap();
    let b = model.predict(&params, &swapped).unwrap();
    close(&a, &b, 1e-12);
    let mut wa = a.attention.clone();
    let mut wb = b.attention.clone();
    wa.sort_by_key(|x| x.0);
    wb.sort_by_key(|x| x.0);
    for (x, y) in wa.iter().zip(&wb) {
        assert_eq!(x.0, y.0);
        assert!((x.1 - y.1).abs() < 1e-12);
    }
}

#[test]
fn rigid_motion_does_not_change_local_prediction() {
    let model = BatModel::new(BatConfig::default()).unwrap();
    let params = model.init_params();
    let scene = default_scene();
    let base = model.predict(&params, &scene).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let angle = rng.random_range(-3.0..3.0);
        let (dx, dy) = (rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0));
        let moved = scene.map_points(|p| p.rotated_about(CartPoint::default(), angle).translated(dx, dy));
        close(&base, &model.predict(&params, &moved).unwrap(), 1e-7);
    }
}

#[test]
fn batch_matches_single() {
    let model = BatModel::new(BatConfig::default()).unwrap();
    let params = model.init_params();
    let a = default_scene();
    let mut b = a.map_points(|p| p.rotated_about(CartPoint::default(), 0.3));
    b.neighbors.truncate(1);
    let mut c = a.clone();
    c.neighbors.clear();
    let batch = model.predict_batch(&params, &[a.clone(), b.clone(), c.clone()]).unwrap();
    for (scene, pred) in [a, b, c].iter().zip(&batch) {
        close(&model.predict(&params, scene).unwrap(), pred, 1e-12);
    }
}

#[test]
fn behavior_off_matches_zero_features() {
    let cfg = BatConfig {
        use_behavior: false,
        ..BatConfig::default()
    };
    let model = BatModel::new(cfg).unwrap();
    let prepared = model.prepare(&default_scene()).unwrap();
    assert!(prepared.behavior.is_empty());
}

#[test]
fn prepare_rejects_bad_scenes() {
    let model = BatModel::new(BatConfig::default()).unwrap();
    let mut short = default_scene();
    short.ego_history.pop();
    assert!(model.prepare(&short).is_err());
    let mut nan = default_scene();
    nan.ego_history[3].x = f64::NAN;
    assert!(matches!(model.prepare(&nan), Err(CoreError::NonFinite(_))));
    let mut inference = default_scene();
    inference.ego_future.clear();
    assert!(model.prepare(&inference).is_ok());
}

#[test]
fn loss_is_finite_and_decomposes() {
    let model = BatModel::new(BatConfig::default()).unwrap();
    let params = model.init_params();
    let prepared = model.prepare(&default_scene()).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let w = LossWeights {
        alpha_rmse: 0.5,
        beta_ce: 2.0,
    };
    let (_, parts) = model.loss(&mut tape, &p, &[&prepared], w).unwrap();
    assert!(parts.total.is_finite());
    assert!((parts.total - (parts.nll + 0.5 * parts.displacement + 2.0 * parts.ce)).abs() < 1e-9);
}

#[test]
fn loss_matches_scalar_reference() {
    // Rebuild the sequence term from the prediction with the scalar losses.
    let model = BatModel::new(BatConfig::default()).unwrap();
    let params = model.init_params();
    let scene = default_scene();
    let prepared = model.prepare(&scene).unwrap();
    let pred = model.predict_prepared(&params, &[&prepared]).unwrap().pop().unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let (_, parts) = model.loss(&mut tape, &p, &[&prepared], LossWeights::default()).unwrap();
    let label = scene.maneuver;
    let mode = &pred.modes[label.index()];
    let f = mode.len() as f64;
    let nll: f64 = mode
        .iter()
        .zip(&prepared.target_polar)
        .map(|(g, &t)| crate::objective::bivariate_nll(g, t).unwrap())
        .sum::<f64>()
        / f;
    let expected = nll - pred.maneuver_probs[label.index()].ln();
    assert!((parts.nll - expected).abs() < 1e-9, "{} vs {expected}", parts.nll);
    let ce = crate::objective::maneuver_ce(&pred.lateral_probs, &pred.longitudinal_probs, label).unwrap();
    assert!((parts.ce - ce).abs() < 1e-9);
    let disp: f64 = (0..mode.len())
        .map(|t| {
            let m = pred.mode_mean_local(label.index(), t);
            let g = prepared.target_local[t];
            (m.x - g.x).powi(2) + (m.y - g.y).powi(2)
        })
        .sum::<f64>()
        / f;
    assert!((parts.displacement - disp).abs() < 1e-6 * disp.max(1.0));
}

/// Fills every parameter from `U(-1, 1)`.
///
/// At the default init many partials behind the softmax context embedding are
/// ~1e-8, where central differences only see roundoff; unit-scale draws keep
/// the check meaningful without changing the function being differentiated.
fn unit_scale(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
}

/// Worst norm-wise relative error over parameter tensors at eps = 1e-5.
fn gradient_error(cfg: BatConfig, draw: u64) -> f64 {
    let model = BatModel::new(cfg.clone()).unwrap();
    let mut store = model.init_params();
    unit_scale(&mut store, draw);
    let h = cfg.history_steps();
    let scenes = [toy_scene(h, cfg.future_steps()), {
        let mut s = toy_scene(h, cfg.future_steps()).map_points(|p| p.rotated_about(CartPoint::default(), 0.7));
        s.neighbors.truncate(1);
        s.maneuver = ManeuverClass::new(Lateral::Right, Longitudinal::Accelerate);
        s
    }];
    let prepared: Vec<PreparedScene> = scenes.iter().map(|s| model.prepare(s).unwrap()).collect();
    let batch: Vec<&PreparedScene> = prepared.iter().collect();
    let mut worst: f64 = 0.0;
    for (name, value) in store.iter() {
        let idx: Vec<usize> = (0..value.len()).collect();
        let err = grad_check_norm(
            |tape: &mut Tape, v: Var| -> Result<Var> {
                let p = store.bind_with(tape, name, v);
                Ok(model.loss(tape, &p, &batch, LossWeights::default())?.0)
            },
            value,
            1e-5,
            &idx,
        )
        .unwrap();
        assert!(err < 1e-3, "{name}: {err}");
        worst = worst.max(err);
    }
    worst
}

#[test]
fn end_to_end_gradients_full_model() {
    for draw in 0..3 {
        gradient_error(small_config(), draw);
    }
}

#[test]
fn end_to_end_gradients_variants() {
    for v in [ModelVariant::A, ModelVariant::B, ModelVariant::C, ModelVariant::D] {
        gradient_error(v.apply(&small_config()), 7);
    }
}

#[test]
fn end_to_end_gradients_axis_frame() {
    let cfg = BatConfig {
        frame_mode: FrameMode::Axis,
        ..small_config()
    };
    gradient_error(cfg, 11);
}


