//! Subcommand bodies. Every command writes into one output directory and
//! finishes with `manifest.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use reflmap::bounds::{monte_carlo_ambiguity, write_sweep_csv, BoundSweepRow, MonteCarloOptions};
use reflmap::envsim::{read_measurement_log, write_measurement_log, Environment, EnvironmentSpec, MeasurementSet, NoiseModel};
use reflmap::geometry::Point2;
use reflmap::grid::{GridField, GridMask};
use reflmap::localizer::{q_log_score, rol_region, LocalizeConfig};
use reflmap::mapbuilder::{convergence_curve, SheafMask};
use reflmap::rng::derive_seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cdf::CdfTable;
use crate::config::{hex, ExperimentConfig};
use crate::pipeline::{self, stage};
use crate::CliError;

pub const ENVIRONMENT_FILE: &str = "environment.json";
pub const TEST_POINTS_FILE: &str = "offline_test_points.csv";
pub const OFFLINE_LOG_FILE: &str = "offline_measurements.csv";
pub const POSITIONS_FILE: &str = "online_positions.csv";
pub const ONLINE_LOG_FILE: &str = "online_measurements.csv";
pub const SHEAF_FILE: &str = "sheaf.mask";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Collects the files a command writes so the manifest can hash them.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<Manifest, CliError> {
        self.files.sort();
        let mut files = Vec::with_capacity(self.files.len());
        for f in &self.files {
            let bytes = std::fs::read(self.dir.join(f))?;
            files.push(FileDigest { path: f.clone(), sha256: hex(&Sha256::digest(&bytes)) });
        }
        let manifest = Manifest {
            command: command.to_string(),
            config_sha256: cfg.hash()?,
            seed: cfg.seed,
            versions: Versions { reflmap_core: reflmap::VERSION.into(), reflmap_cli: env!("CARGO_PKG_VERSION").into() },
            files,
        };
        let mut w = BufWriter::new(File::create(self.dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub reflmap_core: String,
    pub reflmap_cli: String,
}

/// Run record: what was run, with which config, and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: Versions,
    pub files: Vec<FileDigest>,
}

fn open(dir: &Path, name: &str) -> Result<BufReader<File>, CliError> {
    let p = dir.join(name);
    File::open(&p).map(BufReader::new).map_err(|_| CliError::MissingInput(p.display().to_string()))
}

#[derive(Serialize, Deserialize)]
struct PointRow {
    index: usize,
    x: f64,
    y: f64,
}

fn write_points(w: impl Write, pts: &[Point2]) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    for (index, p) in pts.iter().enumerate() {
        out.serialize(PointRow { index, x: p.x, y: p.y })?;
    }
    out.flush()?;
    Ok(())
}

fn read_points(r: impl std::io::Read) -> Result<Vec<Point2>, CliError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: PointRow = row?;
        if row.index != out.len() {
            return Err(CliError::Runtime(format!("point file out of order at index {}", row.index)));
        }
        out.push(Point2::new(row.x, row.y));
    }
    Ok(out)
}

fn indexed(sets: &[MeasurementSet]) -> impl Iterator<Item = (u64, &MeasurementSet)> {
    sets.iter().enumerate().map(|(k, s)| (k as u64, s))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub reflectors: usize,
    pub test_points: usize,
    pub offline_paths: usize,
    pub offline_blind: usize,
    pub online_positions: usize,
    pub online_blind: usize,
    /// `Vol(S_A) / Vol(region union)` for the ratio family.
    pub realized_ratio: Option<f64>,
}

/// Environment, offline boundary log and online user log.
pub fn cmd_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SimulateSummary, CliError> {
    let mut out = Outputs::new(out_dir)?;
    let env = pipeline::environment(cfg)?;
    let (tps, offline) = pipeline::offline_measurements(&env, cfg)?;
    let positions = pipeline::user_positions(&env, cfg.online.positions, cfg.seed);
    let noise = cfg.noise.model(derive_seed(cfg.seed, stage::ONLINE_NOISE))?;
    let online = pipeline::online_measurements(&env, &positions, cfg.online.n_r, cfg.online.activation, &noise)?;

    out.create(ENVIRONMENT_FILE)?.write_all(env.to_json()?.as_bytes())?;
    write_points(out.create(TEST_POINTS_FILE)?, &tps)?;
    write_measurement_log(out.create(OFFLINE_LOG_FILE)?, indexed(&offline))?;
    write_points(out.create(POSITIONS_FILE)?, &positions)?;
    write_measurement_log(out.create(ONLINE_LOG_FILE)?, indexed(&online))?;
    let summary = SimulateSummary {
        reflectors: env.reflectors.len(),
        test_points: tps.len(),
        offline_paths: offline.iter().map(|s| s.len()).sum(),
        offline_blind: offline.iter().filter(|s| s.blind).count(),
        online_positions: positions.len(),
        online_blind: online.iter().filter(|s| s.blind).count(),
        realized_ratio: env.realized_ratio(),
    };
    out.json("simulate_summary.json", &summary)?;
    out.finish("simulate", cfg)?;
    Ok(summary)
}

fn load_environment(dir: &Path) -> Result<Environment, CliError> {
    let mut s = String::new();
    std::io::Read::read_to_string(&mut open(dir, ENVIRONMENT_FILE)?, &mut s)?;
    Ok(Environment::from_json(&s)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildMapSummary {
    pub samples: usize,
    pub skipped: usize,
    pub step_scale: f64,
    pub diff_norms: Vec<f64>,
    pub sheaf_area_m2: f64,
    pub sheaf_threshold: f64,
    /// Fraction of true reflectors inside the sheaf.
    pub reflector_coverage: f64,
}

#[derive(Serialize)]
struct SampleRow {
    test_point: usize,
    x: f64,
    y: f64,
    cov_xx: f64,
    cov_xy: f64,
    cov_yy: f64,
    truth_index: i64,
}

#[derive(Serialize)]
struct DiffRow {
    iteration: usize,
    diff_norm: f64,
    iterate_norm: f64,
}

/// Prefix sizes for the convergence curve: 10, 20, 50, then every 100 up to
/// `n`, then `n`.
pub fn convergence_sizes(n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [10, 20, 50].into_iter().chain((1..).map(|k| 100 * k)).take_while(|&m| m <= n).collect();
    if out.last() != Some(&n) && n > 0 {
        out.push(n);
    }
    out
}

/// Recovery grid, sheaf mask and convergence curve from the offline log in
/// `dir`.
pub fn cmd_build_map(cfg: &ExperimentConfig, dir: &Path) -> Result<BuildMapSummary, CliError> {
    let env = load_environment(dir)?;
    let tps = read_points(open(dir, TEST_POINTS_FILE)?)?;
    let epochs = read_measurement_log(open(dir, OFFLINE_LOG_FILE)?)?;
    let (samples, skipped) = pipeline::invert_offline(&env, &tps, &epochs)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(format!("{OFFLINE_LOG_FILE} holds no invertible measurement")));
    }
    let map = pipeline::build_map(&env, &samples, cfg)?;
    let mut out = Outputs::new(dir)?;

    {
        let mut w = csv::Writer::from_writer(out.create("offline_samples.csv")?);
        for s in &samples {
            w.serialize(SampleRow {
                test_point: s.test_point,
                x: s.estimate.x,
                y: s.estimate.y,
                cov_xx: s.covariance.xx,
                cov_xy: s.covariance.xy,
                cov_yy: s.covariance.yy,
                truth_index: s.truth.map_or(-1, |i| i as i64),
            })?;
        }
        w.flush()?;
    }
    map.recovery.field.write_binary(out.create("recovery.grid")?)?;
    map.recovery.field.write_csv(out.create("recovery.csv")?)?;
    map.sheaf.mask.write_binary(out.create(SHEAF_FILE)?)?;
    map.sheaf.mask.write_csv(out.create("sheaf.csv")?)?;
    {
        let mut w = csv::Writer::from_writer(out.create("recovery_diffs.csv")?);
        for (k, (d, n)) in map.recovery.diff_norms.iter().zip(&map.recovery.iterate_norms).enumerate() {
            w.serialize(DiffRow { iteration: k + 1, diff_norm: *d, iterate_norm: *n })?;
        }
        w.flush()?;
    }
    let lambdas: Vec<(f64, f64)> = cfg.offline.convergence_lambdas.iter().map(|l| (l[0], l[1])).collect();
    let shuffled = map.cloud.shuffled(derive_seed(cfg.seed, stage::CONVERGENCE));
    let rows = convergence_curve(&shuffled, &lambdas, &convergence_sizes(map.cloud.len()))?;
    {
        let mut w = csv::Writer::from_writer(out.create("convergence.csv")?);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    let summary = BuildMapSummary {
        samples: samples.len(),
        skipped,
        step_scale: map.recovery.step_scale,
        diff_norms: map.recovery.diff_norms.clone(),
        sheaf_area_m2: map.sheaf.area,
        sheaf_threshold: map.sheaf.threshold,
        reflector_coverage: map.sheaf.coverage(&env.reflectors),
    };
    out.json("build_map_summary.json", &summary)?;
    out.finish("build-map", cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationRow {
    pub epoch: u64,
    pub x_true: f64,
    pub y_true: f64,
    pub x_hat: f64,
    pub y_hat: f64,
    pub error_m: f64,
    pub log_score: f64,
    /// Area of the pre-localization region over the rol grid area.
    pub region_area_fraction: f64,
    pub region_fallback: bool,
    pub starts: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizeSummary {
    pub epochs: usize,
    pub blind: usize,
    pub median_error_m: Option<f64>,
}

/// Localizes every online epoch against the sheaf in `dir`.
pub fn cmd_localize(cfg: &ExperimentConfig, dir: &Path) -> Result<(LocalizeSummary, Vec<LocalizationRow>), CliError> {
    let env = load_environment(dir)?;
    let mask = GridMask::read_binary(open(dir, SHEAF_FILE)?)?;
    let sheaf = SheafMask::from_mask(mask, cfg.offline.epsilon, f64::NAN);
    let positions = read_points(open(dir, POSITIONS_FILE)?)?;
    let epochs = read_measurement_log(open(dir, ONLINE_LOG_FILE)?)?;
    if epochs.is_empty() {
        return Err(CliError::Runtime(format!("{ONLINE_LOG_FILE} holds no measurements")));
    }
    let rol_area = rol_region(&env.rol, cfg.online.localize.prelocalize.pitch).area();
    let results = epochs
        .par_iter()
        .map(|(epoch, set)| {
            let p_u = *positions
                .get(*epoch as usize)
                .ok_or_else(|| CliError::Runtime(format!("epoch {epoch} has no position")))?;
            let config = LocalizeConfig { seed: derive_seed(cfg.online.localize.seed, *epoch), parallel: false, ..cfg.online.localize };
            let r = pipeline::localize_epoch(set, &sheaf, env.bs, &env.rol, cfg.online.score, &config)?;
            Ok(r.map(|(r, ctx)| {
                let row = LocalizationRow {
                    epoch: *epoch,
                    x_true: p_u.x,
                    y_true: p_u.y,
                    x_hat: r.p_hat.x,
                    y_hat: r.p_hat.y,
                    error_m: r.p_hat.distance(p_u),
                    log_score: r.log_score,
                    region_area_fraction: r.region.area() / rol_area,
                    region_fallback: r.region_fallback,
                    starts: r.starts,
                    iterations: r.iterations,
                };
                (row, ctx)
            }))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut out = Outputs::new(dir)?;
    let blind = positions.len() - results.iter().filter(|r| r.is_some()).count();
    let mut rows = Vec::new();
    let mut first_ctx = None;
    for (row, ctx) in results.into_iter().flatten() {
        first_ctx.get_or_insert(ctx);
        rows.push(row);
    }
    {
        let mut w = csv::Writer::from_writer(out.create("localization.csv")?);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    if let (Some(pitch), Some(ctx)) = (cfg.online.surface_pitch, first_ctx) {
        let g = rol_region(&env.rol, pitch).geometry();
        let surface = GridField::from_values(g, g_centers(g).par_iter().map(|p| q_log_score(&ctx, *p)).collect())?;
        surface.write_binary(out.create("score_surface.grid")?)?;
    }
    let errors = CdfTable::from_errors(rows.iter().map(|r| r.error_m).collect())?;
    let summary = LocalizeSummary { epochs: rows.len(), blind, median_error_m: (!errors.is_empty()).then(|| errors.median()) };
    out.json("localize_summary.json", &summary)?;
    out.finish("localize", cfg)?;
    Ok((summary, rows))
}

fn g_centers(g: reflmap::grid::GridGeometry) -> Vec<Point2> {
    (0..g.len()).map(|i| g.center_of(i)).collect()
}

/// One parameter cell of the CDF experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfCell {
    pub sigma_theta_deg: f64,
    pub sigma_tau_ns: f64,
    pub n_r: usize,
}

impl CdfCellSummary {
    pub fn cell(&self) -> CdfCell {
        CdfCell { sigma_theta_deg: self.sigma_theta_deg, sigma_tau_ns: self.sigma_tau_ns, n_r: self.n_r }
    }
}

impl CdfCell {
    pub fn label(&self) -> String {
        format!("theta{}deg_tau{}ns_nr{}", self.sigma_theta_deg, self.sigma_tau_ns, self.n_r)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CdfCellSummary {
    pub sigma_theta_deg: f64,
    pub sigma_tau_ns: f64,
    pub n_r: usize,
    pub trials: usize,
    pub blind: usize,
    pub fallback: usize,
    /// Set when every trial was blind.
    pub all_blind: bool,
    pub p25_m: f64,
    pub median_m: f64,
    pub p75_m: f64,
}

/// The noise sweep at `fixed_n_r`, then the path-count sweep at the base
/// noise, without duplicates.
pub fn cdf_cells(cfg: &ExperimentConfig) -> Vec<CdfCell> {
    let mut cells: Vec<CdfCell> = cfg
        .cdf
        .noise_levels
        .iter()
        .map(|[t, u]| CdfCell { sigma_theta_deg: *t, sigma_tau_ns: *u, n_r: cfg.cdf.fixed_n_r })
        .collect();
    for &n_r in &cfg.cdf.n_r_values {
        let c = CdfCell { sigma_theta_deg: cfg.noise.sigma_theta_deg, sigma_tau_ns: cfg.noise.sigma_tau_ns, n_r };
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    cells
}

/// Runs `trials` localizations for one cell against a fixed map.
pub fn run_cdf_cell(
    cfg: &ExperimentConfig,
    env: &Environment,
    sheaf: &SheafMask,
    cell: CdfCell,
    index: usize,
) -> Result<(CdfTable, CdfCellSummary), CliError> {
    let mut env = env.clone();
    if cell.n_r == 2 {
        if let Some(side) = cfg.cdf.two_path_rol_side {
            env.rol = pipeline::square_rol(&env, side)?;
        }
    }
    let cell_seed = derive_seed(cfg.seed, stage::CDF_CELL ^ index as u64);
    let noise = NoiseModel::from_degrees_ns(cell.sigma_theta_deg, cell.sigma_tau_ns, cell_seed)?;
    let positions = pipeline::user_positions(&env, cfg.cdf.trials, cell_seed);
    let outcomes = positions
        .par_iter()
        .enumerate()
        .map(|(t, p_u)| {
            let set = reflmap::envsim::sample_measurements_with(
                &env,
                *p_u,
                cell.n_r,
                &noise,
                t as u64,
                &reflmap::envsim::SampleOptions { activation: cfg.online.activation, ..Default::default() },
            )?;
            let config = LocalizeConfig { seed: derive_seed(cell_seed, t as u64), parallel: false, ..cfg.online.localize };
            let r = pipeline::localize_epoch(&set, sheaf, env.bs, &env.rol, cfg.online.score, &config)?;
            Ok(r.map(|(r, _)| (r.p_hat.distance(*p_u), r.region_fallback)))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let blind = outcomes.iter().filter(|o| o.is_none()).count();
    let fallback = outcomes.iter().flatten().filter(|o| o.1).count();
    let table = CdfTable::from_errors(outcomes.into_iter().flatten().map(|o| o.0).collect())?;
    let summary = CdfCellSummary {
        sigma_theta_deg: cell.sigma_theta_deg,
        sigma_tau_ns: cell.sigma_tau_ns,
        n_r: cell.n_r,
        trials: table.len(),
        blind,
        fallback,
        all_blind: table.is_empty(),
        p25_m: table.quantile(0.25),
        median_m: table.median(),
        p75_m: table.quantile(0.75),
    };
    Ok((table, summary))
}

/// Builds the map once, then one CDF per parameter cell.
pub fn cmd_experiment_cdf(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(CdfTable, CdfCellSummary)>, CliError> {
    let env = pipeline::environment(cfg)?;
    let (tps, sets) = pipeline::offline_measurements(&env, cfg)?;
    let epochs: Vec<(u64, MeasurementSet)> = sets.into_iter().enumerate().map(|(k, s)| (k as u64, s)).collect();
    let (samples, _) = pipeline::invert_offline(&env, &tps, &epochs)?;
    if samples.is_empty() {
        return Err(CliError::Runtime("offline phase produced no reflector samples".into()));
    }
    let map = pipeline::build_map(&env, &samples, cfg)?;

    let mut out = Outputs::new(out_dir)?;
    let mut results = Vec::new();
    for (i, cell) in cdf_cells(cfg).into_iter().enumerate() {
        let (table, summary) = run_cdf_cell(cfg, &env, &map.sheaf, cell, i)?;
        table.write_csv(out.create(&format!("cdf_{}.csv", cell.label()))?)?;
        results.push((table, summary));
    }
    {
        let mut w = csv::Writer::from_writer(out.create("cdf_summary.csv")?);
        for (_, s) in &results {
            w.serialize(s)?;
        }
        w.flush()?;
    }
    out.finish("experiment-cdf", cfg)?;
    Ok(results)
}

#[derive(Serialize)]
struct OffsetRow {
    dx: f64,
    dy: f64,
}

/// Analytic sweep plus Monte Carlo dominance rows for every ensemble ratio.
pub fn cmd_bounds(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<BoundSweepRow>, CliError> {
    let b = &cfg.bounds;
    let mut sweep = Vec::new();
    for &n_r in &b.sweep_n_r {
        for &ratio in &b.sweep_ratios {
            sweep.push(BoundSweepRow::analytic(b.vol_sa, ratio, n_r, b.monte_carlo.epsilon)?);
        }
    }
    let mut out = Outputs::new(out_dir)?;
    write_sweep_csv(out.create("bounds_sweep.csv")?, &sweep)?;

    let mut dominance = Vec::new();
    for (i, &ratio) in b.ensemble_ratios.iter().enumerate() {
        let spec = ensemble_spec(&cfg.environment, ratio);
        let opts = MonteCarloOptions { seed: derive_seed(cfg.seed, i as u64), ..b.monte_carlo };
        let est = monte_carlo_ambiguity(&spec, &opts)?;
        let row = BoundSweepRow::analytic(est.mean_vol_sa, ratio, opts.n_r as u32, opts.epsilon)?.with_empirical(&est);
        let mut w = csv::Writer::from_writer(out.create(&format!("ambiguity_offsets_ratio{ratio}.csv"))?);
        for o in &est.offsets {
            w.serialize(OffsetRow { dx: o.x, dy: o.y })?;
        }
        w.flush()?;
        dominance.push(row);
    }
    write_sweep_csv(out.create("bounds_dominance.csv")?, &dominance)?;
    out.finish("bounds", cfg)?;
    Ok(dominance)
}

/// The configured ratio-family spec with `ratio` substituted, or the
/// defaults of that family when the experiment uses another one.
pub fn ensemble_spec(base: &EnvironmentSpec, ratio: f64) -> EnvironmentSpec {
    match base {
        EnvironmentSpec::RatioScatter { width, height, disk_radius, reflector_count, raster_pitch, bs, .. } => {
            EnvironmentSpec::RatioScatter {
                ratio,
                width: *width,
                height: *height,
                disk_radius: *disk_radius,
                reflector_count: *reflector_count,
                raster_pitch: *raster_pitch,
                bs: *bs,
            }
        }
        _ => EnvironmentSpec::RatioScatter {
            ratio,
            width: 200.0,
            height: 200.0,
            disk_radius: 4.0,
            reflector_count: 500,
            raster_pitch: 0.25,
            bs: None,
        },
    }
}
