use rand::Rng;
use reflmap::envsim::{generate_environment, sample_measurements, Environment, EnvironmentSpec, MeasurementSet, NoiseModel};
use reflmap::geometry::{forward_path, invert_measurement, MeasurementVariance, Point2, C0};
use reflmap::grid::{GridGeometry, GridMask};
use reflmap::localizer::*;
use reflmap::mapbuilder::SheafMask;
use reflmap::polygon::Polygon;
use reflmap::rng;

const PITCH: f64 = 0.25;

fn square(side: f64) -> Vec<Point2> {
    vec![Point2::ORIGIN, Point2::new(side, 0.0), Point2::new(side, side), Point2::new(0.0, side)]
}

/// Reflectors on cell centers of the sheaf grid, so the truth sheaf holds
/// them exactly.
fn snapped_env(seed: u64, count: usize) -> (Environment, GridGeometry) {
    let geometry = GridGeometry::covering(Point2::ORIGIN, Point2::new(30.0, 30.0), PITCH, 5.0).unwrap();
    let mut r = rng::stream(seed, 99, 0);
    let mut reflectors = Vec::new();
    while reflectors.len() < count {
        let p = Point2::new(r.random_range(-4.0..34.0), r.random_range(-4.0..34.0));
        // keep reflectors off the rol interior edge band and apart from each other
        let q = geometry.center_of(geometry.index_of(p).unwrap());
        if (q.x > 1.0 && q.x < 29.0 && q.y > 1.0 && q.y < 29.0) || reflectors.iter().any(|o: &Point2| o.distance(q) < 3.0) {
            continue;
        }
        reflectors.push(q);
    }
    let spec = EnvironmentSpec::Points {
        reflectors,
        rol: square(30.0),
        boundary: None,
        bs: Point2::new(15.1, 14.9),
        reflectivity: None,
    };
    (generate_environment(&spec, seed).unwrap(), geometry)
}

fn truth_sheaf(env: &Environment, g: GridGeometry) -> SheafMask {
    SheafMask::from_mask(env.truth_sheaf(g), 0.05, f64::NAN)
}

#[test]
fn single_cell_at_mapped_reflector_scores_cell_area() {
    let g = GridGeometry::new(Point2::ORIGIN, PITCH, 80, 80).unwrap();
    let s = g.cell_center(40, 60);
    let p_u = Point2::new(3.0, 4.0);
    let bs = Point2::new(10.0, 2.0);
    let m = forward_path(p_u, bs, s).unwrap();
    let set = MeasurementSet::new(vec![(m, MeasurementVariance::new(1e-6, 1e-20).unwrap())]);
    let mut mask = GridMask::empty(g);
    mask.cells[g.index(40, 60)] = true;
    let sheaf = SheafMask::from_mask(mask, 0.05, f64::NAN);
    let rol = Polygon::new(square(20.0)).unwrap();
    let ctx = ScoreContext::new(&set, &sheaf, bs, rol, ScoreOptions::default()).unwrap();
    let q = q_score(&ctx, p_u);
    assert!((q - PITCH * PITCH).abs() < 1e-12 * PITCH * PITCH, "{q}");
}

#[test]
fn far_sheaf_scores_nothing() {
    let g = GridGeometry::new(Point2::new(500.0, 500.0), PITCH, 10, 10).unwrap();
    let sheaf = SheafMask::from_mask(GridMask::full(g), 0.05, f64::NAN);
    let p_u = Point2::new(3.0, 4.0);
    let bs = Point2::new(10.0, 2.0);
    let m = forward_path(p_u, bs, Point2::new(6.0, 12.0)).unwrap();
    let set = MeasurementSet::new(vec![(m, MeasurementVariance::new(1e-6, 1e-20).unwrap())]);
    let opts = ScoreOptions { restrict_to_sectors: false, ..Default::default() };
    let ctx = ScoreContext::new(&set, &sheaf, bs, Polygon::new(square(20.0)).unwrap(), opts).unwrap();
    assert!(q_score(&ctx, p_u) < 1e-30 * PITCH * PITCH);
}

#[test]
fn empty_inputs_are_rejected() {
    let g = GridGeometry::new(Point2::ORIGIN, PITCH, 4, 4).unwrap();
    let rol = Polygon::new(square(1.0)).unwrap();
    let full = SheafMask::from_mask(GridMask::full(g), 0.05, f64::NAN);
    assert!(matches!(
        ScoreContext::new(&MeasurementSet::default(), &full, Point2::ORIGIN, rol.clone(), ScoreOptions::default()),
        Err(LocalizeError::EmptyMeasurements)
    ));
    let m = forward_path(Point2::ORIGIN, Point2::new(0.5, 0.0), Point2::new(0.5, 0.5)).unwrap();
    let set = MeasurementSet::new(vec![(m, MeasurementVariance::default())]);
    let empty = SheafMask::from_mask(GridMask::empty(g), 0.05, f64::NAN);
    assert!(matches!(
        ScoreContext::new(&set, &empty, Point2::ORIGIN, rol, ScoreOptions::default()),
        Err(LocalizeError::EmptySheaf)
    ));
}

#[test]
fn infeasible_everywhere_scores_zero() {
    let g = GridGeometry::new(Point2::ORIGIN, PITCH, 40, 40).unwrap();
    let sheaf = SheafMask::from_mask(GridMask::full(g), 0.05, f64::NAN);
    let bs = Point2::new(5.0, 5.0);
    // 2 m path, candidate 8 m from the BS
    let m = reflmap::geometry::Measurement::new(0.3, 2.0 / C0).unwrap();
    let set = MeasurementSet::new(vec![(m, MeasurementVariance::default())]);
    let ctx = ScoreContext::new(&set, &sheaf, bs, Polygon::new(square(20.0)).unwrap(), ScoreOptions::default()).unwrap();
    let e = ctx.evaluate(Point2::new(13.0, 5.0));
    assert_eq!(e.value, 0.0);
    assert!(e.all_infeasible(1));
    assert!(e.log_value.is_finite());
}

#[test]
fn sector_subset_examples() {
    let g = GridGeometry::new(Point2::new(-5.0, -5.0), 0.5, 21, 21).unwrap();
    let full = SheafMask::from_mask(GridMask::full(g), 0.05, f64::NAN);
    let all = sector_subset(&full, Point2::ORIGIN, 1.0, std::f64::consts::PI);
    assert_eq!(all.mask, full.mask);

    let mut one = GridMask::empty(g);
    let north = g.index_of(Point2::new(0.0, 4.0)).unwrap();
    one.cells[north] = true;
    let sheaf = SheafMask::from_mask(one.clone(), 0.05, f64::NAN);
    assert_eq!(sector_subset(&sheaf, Point2::ORIGIN, std::f64::consts::FRAC_PI_2, 0.1).mask, one);
    assert!(sector_subset(&sheaf, Point2::ORIGIN, 0.0, 0.1).is_empty());
}

#[test]
fn annulus_contains_user_and_grows_unbounded() {
    let rol = rol_region(&Polygon::new(square(20.0)).unwrap(), 0.5);
    let g = GridGeometry::new(Point2::ORIGIN, PITCH, 80, 80).unwrap();
    let q = g.cell_center(10, 70);
    let mut mask = GridMask::empty(g);
    mask.cells[g.index(10, 70)] = true;
    let sector = Region { mask };
    let bs = Point2::new(12.0, 3.0);
    let p_u = Point2::new(14.3, 9.1);
    let tau = forward_path(p_u, bs, q).unwrap().tau();
    let k = annulus_region(&rol, bs, &sector, tau - 1e-10, tau + 1e-10);
    assert!(k.contains(p_u));
    assert!(k.area() < 0.5 * rol.area());
    let everything = annulus_region(&rol, bs, &sector, 1e-12, 1.0);
    assert_eq!(everything.mask, rol.mask);
    let empty = annulus_region(&rol, bs, &Region { mask: GridMask::empty(g) }, tau - 1e-9, tau + 1e-9);
    assert!(empty.is_empty());
}

fn context_for(env: &Environment, g: GridGeometry, p_u: Point2, n_r: usize, noise: &NoiseModel, epoch: u64) -> ScoreContext {
    let set = sample_measurements(env, p_u, n_r, noise, epoch).unwrap();
    ScoreContext::new(&set, &truth_sheaf(env, g), env.bs, env.rol.clone(), ScoreOptions::default()).unwrap()
}

#[test]
fn zero_noise_prelocalization_is_sound_and_shrinks() {
    let (env, g) = snapped_env(3, 12);
    let noise = NoiseModel::noiseless(1);
    let mut r = rng::stream(5, 1, 0);
    for epoch in 0..40 {
        let p_u = env.random_point_in_rol(&mut r);
        let set = sample_measurements(&env, p_u, 3, &noise, epoch).unwrap();
        let sheaf = truth_sheaf(&env, g);
        let mut last_area = f64::INFINITY;
        for n in 1..=3 {
            let sub = MeasurementSet::new(set.entries[..n].to_vec());
            let ctx = ScoreContext::new(&sub, &sheaf, env.bs, env.rol.clone(), ScoreOptions::default()).unwrap();
            let pre = prelocalize(&ctx, &PrelocalizeOptions::default());
            assert!(!pre.fallback);
            assert!(pre.region.contains(p_u), "epoch {epoch}: truth {p_u} not in region");
            assert!(pre.region.area() <= last_area);
            last_area = pre.region.area();
        }
    }
}

#[test]
fn score_is_permutation_invariant() {
    let (env, g) = snapped_env(4, 10);
    let noise = NoiseModel::from_degrees_ns(0.345, 3.0, 2).unwrap();
    let p_u = Point2::new(11.0, 19.0);
    let set = sample_measurements(&env, p_u, 4, &noise, 0).unwrap();
    let mut rev = set.clone();
    rev.entries.reverse();
    let sheaf = truth_sheaf(&env, g);
    let a = ScoreContext::new(&set, &sheaf, env.bs, env.rol.clone(), ScoreOptions::default()).unwrap();
    let b = ScoreContext::new(&rev, &sheaf, env.bs, env.rol.clone(), ScoreOptions::default()).unwrap();
    for p in [p_u, Point2::new(3.0, 3.0), Point2::new(20.0, 7.5)] {
        assert_eq!(a.evaluate(p), b.evaluate(p));
    }
}

#[test]
fn widening_covariances_never_lowers_the_score() {
    let (env, g) = snapped_env(6, 10);
    let noise = NoiseModel::from_degrees_ns(0.345, 3.0, 2).unwrap();
    let p_u = Point2::new(8.0, 21.0);
    let set = sample_measurements(&env, p_u, 3, &noise, 0).unwrap();
    let sheaf = truth_sheaf(&env, g);
    let base = ScoreContext::new(&set, &sheaf, env.bs, env.rol.clone(), ScoreOptions::default()).unwrap();
    for t in [1.0, 1.5, 4.0] {
        let mut wide = set.clone();
        for e in &mut wide.entries {
            e.1 = MeasurementVariance::new(e.1.var_theta * t, e.1.var_tau * t).unwrap();
        }
        let ctx = ScoreContext::new(&wide, &sheaf, env.bs, env.rol.clone(), ScoreOptions::default()).unwrap();
        for p in [p_u, Point2::new(10.0, 20.0), Point2::new(25.0, 3.0)] {
            assert!(ctx.evaluate(p).log_value >= base.evaluate(p).log_value - 1e-12);
        }
    }
}

#[test]
fn truth_beats_offset_position() {
    let (env, g) = snapped_env(7, 12);
    let noise = NoiseModel::noiseless(0);
    let mut r = rng::stream(8, 1, 0);
    for epoch in 0..20 {
        let p_u = env.random_point_in_rol(&mut r);
        let ctx = context_for(&env, g, p_u, 3, &noise, epoch);
        let dir = Point2::from_angle(epoch as f64);
        let off = env.rol.clamp(p_u + dir * 5.0);
        assert!(ctx.evaluate(p_u).log_value > ctx.evaluate(off).log_value);
    }
}

#[test]
fn zero_noise_localization_hits_truth() {
    let (env, g) = snapped_env(11, 12);
    let noise = NoiseModel::noiseless(0);
    let mut r = rng::stream(12, 1, 0);
    let mut misses = Vec::new();
    for epoch in 0..30 {
        let p_u = env.random_point_in_rol(&mut r);
        let ctx = context_for(&env, g, p_u, 3, &noise, epoch);
        let res = localize(&ctx, &LocalizeConfig { seed: epoch, ..Default::default() }).unwrap();
        assert!((res.score - q_score(&ctx, res.p_hat)).abs() <= 1e-9 * res.score.abs());
        assert!(env.rol.contains(res.p_hat));
        if res.p_hat.distance(p_u) >= PITCH {
            misses.push((epoch, p_u, res.p_hat));
        }
    }
    assert!(misses.len() <= 1, "{misses:?}");
}

#[test]
fn ascent_endpoint_matches_grid_oracle() {
    let (env, g) = snapped_env(13, 12);
    let noise = NoiseModel::noiseless(0);
    let mut r = rng::stream(14, 1, 0);
    for epoch in 0..5 {
        let p_u = env.random_point_in_rol(&mut r);
        let ctx = context_for(&env, g, p_u, 3, &noise, epoch);
        let res = localize(&ctx, &LocalizeConfig::default()).unwrap();
        let (oracle, _) = grid_argmax_localize(&ctx, &res.region, 0.1).unwrap();
        assert!(res.p_hat.distance(oracle) < PITCH, "{} vs {}", res.p_hat, oracle);
    }
}

#[test]
fn start_at_local_maximum_stays() {
    let (env, g) = snapped_env(15, 12);
    let p_u = Point2::new(12.0, 17.0);
    let ctx = context_for(&env, g, p_u, 3, &NoiseModel::noiseless(0), 0);
    let (peak, _) = grid_argmax_localize(&ctx, &rol_region(ctx.rol(), 0.5), 0.01).unwrap();
    let r = gradient_ascent(&ctx, peak, &AscentParams::default(), ctx.rol()).unwrap();
    assert!(r.iterations <= 2);
    assert!(r.point.distance(peak) < 0.01);
}

#[test]
fn localization_is_deterministic_and_parallel_independent() {
    let (env, g) = snapped_env(16, 12);
    let noise = NoiseModel::from_degrees_ns(0.345, 3.0, 4).unwrap();
    let ctx = context_for(&env, g, Point2::new(9.0, 9.0), 3, &noise, 0);
    let a = localize(&ctx, &LocalizeConfig { seed: 5, ..Default::default() }).unwrap();
    let b = localize(&ctx, &LocalizeConfig { seed: 5, parallel: false, ..Default::default() }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_cell_rol_returns_its_center() {
    let g = GridGeometry::new(Point2::ORIGIN, PITCH, 40, 40).unwrap();
    let s = Point2::new(5.0, 8.0);
    let sheaf = SheafMask::from_mask(
        {
            let mut m = GridMask::empty(g);
            m.cells[g.index_of(s).unwrap()] = true;
            m
        },
        0.05,
        f64::NAN,
    );
    let rol = Polygon::rectangle(Point2::new(2.0, 2.0), Point2::new(2.5, 2.5)).unwrap();
    let bs = Point2::new(1.0, 1.0);
    let m = forward_path(Point2::new(2.25, 2.25), bs, s).unwrap();
    let set = MeasurementSet::new(vec![(m, MeasurementVariance::default())]);
    let ctx = ScoreContext::new(&set, &sheaf, bs, rol, ScoreOptions::default()).unwrap();
    let res = localize(&ctx, &LocalizeConfig::default()).unwrap();
    assert_eq!(res.p_hat, Point2::new(2.25, 2.25));
}

#[test]
fn shared_reflector_model_is_available() {
    let (env, g) = snapped_env(17, 12);
    let set = sample_measurements(&env, Point2::new(9.0, 9.0), 3, &NoiseModel::noiseless(0), 0).unwrap();
    let opts = ScoreOptions { model: ScoreModel::SharedReflector, ..Default::default() };
    let ctx = ScoreContext::new(&set, &truth_sheaf(&env, g), env.bs, env.rol.clone(), opts).unwrap();
    assert!(ctx.evaluate(Point2::new(9.0, 9.0)).log_value.is_finite());
    // the mapped reflectors of distinct paths never coincide, so the shared
    // variable cannot sit on all of them at once
    let s: Vec<Point2> = set.entries.iter().map(|(m, _)| invert_measurement(m, Point2::new(9.0, 9.0), env.bs).unwrap()).collect();
    assert!(s[0].distance(s[1]) > 1.0);
}
