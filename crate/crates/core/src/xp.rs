//! Experiment drivers: configuration, scenario runners, CSV tables and SVG
//! convergence plots.
//!
//! Every runner produces [`ResultRow`]s whose CSV form depends only on the
//! configuration (thread count and output directory excluded), so reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fields::{
    load_spe10_component, make_channels, make_constant, make_instability_field, make_noise, make_source,
    CellGridField, ChannelSpec, SourceTag, Spe10Component,
};
use crate::lod::{
    choose_k, corrector_basis, coarse_infsup, decay_profile, multiscale_infsup, solve_multiscale,
    solve_multiscale_corrected, solve_reference, solve_standard_coarse, source_correctors, timed, CorrectorBasis,
    Discretization, MultiscaleSolution,
};
use crate::mesh::{build_hierarchy, build_hierarchy_with_factor, build_structured_mesh, Domain, MeshHierarchy};
use crate::saddle::SolveOptions;

/// Named experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Convergence,
    Instability,
    Lshape,
    Spe10,
    Decay,
    Infsup,
    Oracle,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::Convergence,
        Scenario::Instability,
        Scenario::Lshape,
        Scenario::Spe10,
        Scenario::Decay,
        Scenario::Infsup,
        Scenario::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Convergence => "convergence",
            Scenario::Instability => "instability",
            Scenario::Lshape => "lshape",
            Scenario::Spe10 => "spe10",
            Scenario::Decay => "decay",
            Scenario::Infsup => "infsup",
            Scenario::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

/// Diffusion coefficient family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffKind {
    Constant,
    Noise,
    Channels,
    Instability,
    Spe10,
}

impl CoeffKind {
    fn name(self) -> &'static str {
        match self {
            CoeffKind::Constant => "constant",
            CoeffKind::Noise => "noise",
            CoeffKind::Channels => "channels",
            CoeffKind::Instability => "instability",
            CoeffKind::Spe10 => "spe10",
        }
    }
}

impl fmt::Display for CoeffKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoeffKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            CoeffKind::Constant,
            CoeffKind::Noise,
            CoeffKind::Channels,
            CoeffKind::Instability,
            CoeffKind::Spe10,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown coefficient `{s}`")))
    }
}

/// Patch layers of a source corrector, possibly relative to `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EllChoice {
    /// No source correction.
    None,
    Fixed(usize),
    SameAsK,
    KPlusOne,
    /// Patches covering the whole domain.
    Saturated,
}

impl EllChoice {
    /// Layer count for corrector layers `k`; `None` means no correction.
    pub fn resolve(self, k: usize, saturation: usize) -> Option<usize> {
        match self {
            EllChoice::None => None,
            EllChoice::Fixed(l) => Some(l),
            EllChoice::SameAsK => Some(k),
            EllChoice::KPlusOne => Some(k + 1),
            EllChoice::Saturated => Some(saturation),
        }
    }
}

impl fmt::Display for EllChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EllChoice::None => f.write_str("none"),
            EllChoice::Fixed(l) => write!(f, "{l}"),
            EllChoice::SameAsK => f.write_str("k"),
            EllChoice::KPlusOne => f.write_str("k+1"),
            EllChoice::Saturated => f.write_str("inf"),
        }
    }
}

impl FromStr for EllChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "-" => Ok(EllChoice::None),
            "k" => Ok(EllChoice::SameAsK),
            "k+1" => Ok(EllChoice::KPlusOne),
            "inf" => Ok(EllChoice::Saturated),
            _ => s
                .parse()
                .map(EllChoice::Fixed)
                .map_err(|_| Error::Config(format!("bad source corrector layers `{s}` (none, N, k, k+1, inf)"))),
        }
    }
}

impl Serialize for EllChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EllChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// Serde through `Display`/`FromStr`.
mod as_string {
    use super::*;

    pub fn serialize<T: fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr,
        T::Err: fmt::Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// Full description of one experiment. JSON field names match the CLI flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(with = "as_string")]
    pub domain: Domain,
    pub coeff: CoeffKind,
    /// `log` of the coefficient contrast for noise and channels.
    pub amplitude: f64,
    pub seed: u64,
    pub coarse_level: Vec<u32>,
    pub fine_level: Vec<u32>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    /// Explicit patch layers; empty means `choose_k` per `C`.
    pub k: Vec<usize>,
    pub ell: Vec<EllChoice>,
    #[serde(with = "as_string")]
    pub source: SourceTag,
    pub tol: f64,
    pub out: PathBuf,
    /// Worker threads for corrector solves; `0` lets the pool decide.
    pub threads: usize,
    pub spe10_file: Option<PathBuf>,
    #[serde(with = "as_string")]
    pub spe10_component: Spe10Component,
    pub spe10_layer: usize,
    pub full: bool,
}

impl ExperimentConfig {
    /// Desk-scale defaults of a scenario, or the published problem sizes with `full`.
    pub fn defaults(scenario: Scenario, full: bool) -> Self {
        let mut cfg = ExperimentConfig {
            scenario,
            domain: Domain::UnitSquare,
            coeff: CoeffKind::Noise,
            amplitude: 10.0,
            seed: 1,
            coarse_level: vec![2, 3, 4, 5],
            fine_level: vec![7],
            c: vec![0.5],
            k: Vec::new(),
            ell: Vec::new(),
            source: SourceTag::CheckerQuarters,
            tol: 1e-10,
            out: PathBuf::from("out"),
            threads: 0,
            spe10_file: None,
            spe10_component: Spe10Component::Kx,
            spe10_layer: 85,
            full,
        };
        match scenario {
            Scenario::Convergence => {
                if full {
                    cfg.coarse_level = vec![2, 3, 4, 5, 6];
                    cfg.fine_level = vec![8];
                    cfg.c = vec![0.25, 0.5];
                }
            }
            Scenario::Instability => {
                cfg.coeff = CoeffKind::Instability;
                cfg.source = SourceTag::HalfplanePm1;
                cfg.coarse_level = vec![2];
                cfg.fine_level = if full { vec![5, 6, 7, 8, 9] } else { vec![5, 6, 7, 8] };
                cfg.k = vec![2];
            }
            Scenario::Lshape => {
                cfg.domain = Domain::LShape;
                cfg.source = SourceTag::LshapeLinear;
                cfg.c = vec![0.25, 0.5];
                // l_shape level l has cells of size 2^-(l+1)
                cfg.coarse_level = if full { vec![1, 2, 3, 4, 5] } else { vec![1, 2, 3, 4] };
                cfg.fine_level = if full { vec![7] } else { vec![6] };
            }
            Scenario::Spe10 => {
                cfg.domain = Domain::spe10_coarse();
                cfg.coeff = CoeffKind::Spe10;
                cfg.source = SourceTag::spe10_wells();
                cfg.coarse_level = vec![0];
                cfg.fine_level = Vec::new();
                cfg.k = vec![1, 2, 3];
                cfg.ell = vec![
                    EllChoice::None,
                    EllChoice::Fixed(0),
                    EllChoice::SameAsK,
                    EllChoice::KPlusOne,
                    EllChoice::Saturated,
                ];
            }
            Scenario::Decay => {
                cfg.coarse_level = vec![3];
                cfg.fine_level = vec![6];
                cfg.k = vec![1, 2, 3, 4];
            }
            Scenario::Infsup => {
                cfg.coarse_level = vec![2];
                cfg.fine_level = vec![5];
                cfg.k = vec![1, 2];
            }
            Scenario::Oracle => {
                cfg.coeff = CoeffKind::Constant;
                cfg.source = SourceTag::HalfplanePm1;
                cfg.coarse_level = vec![0];
                cfg.fine_level = vec![1];
            }
        }
        cfg
    }

    /// Defaults, then the keys of a JSON config file, then command-line overrides.
    pub fn resolve(
        scenario: Scenario,
        full: bool,
        file: Option<&serde_json::Value>,
        overrides: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<Self> {
        let file_full = file.and_then(|f| f.get("full")).and_then(|v| v.as_bool()).unwrap_or(false);
        let mut value = serde_json::to_value(Self::defaults(scenario, full || file_full))?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        if let Some(f) = file {
            let map = f
                .as_object()
                .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))?;
            for (key, v) in map {
                if key == "scenario" && v.as_str() != Some(scenario.name()) {
                    return Err(Error::Config(format!("config file is for scenario {v}, not {scenario}")));
                }
                obj.insert(key.clone(), v.clone());
            }
        }
        for (key, v) in overrides {
            obj.insert(key.clone(), v.clone());
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks level ordering and parameter ranges.
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.c.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Config(format!("C values must be finite and nonnegative: {:?}", self.c)));
        }
        if self.coarse_level.is_empty() {
            return Err(Error::Config("at least one coarse level is needed".into()));
        }
        if self.scenario != Scenario::Spe10 {
            if self.fine_level.is_empty() {
                return Err(Error::Config("at least one fine level is needed".into()));
            }
            for &f in &self.fine_level {
                for &c in &self.coarse_level {
                    if f <= c {
                        return Err(Error::Config(format!("fine level {f} must exceed coarse level {c}")));
                    }
                }
            }
        }
        if self.k.is_empty() && self.c.is_empty() {
            return Err(Error::Config("either k or C must be given".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the JSON form with thread count
    /// and output directory cleared.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.threads = 0;
        canon.out = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            ..SolveOptions::default()
        }
    }
}

/// Per-row diagnostics that are not part of the CSV table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowDiagnostics {
    pub correctors: usize,
    pub reference_seconds: f64,
    pub corrector_seconds: f64,
    pub coarse_seconds: f64,
    /// Largest flux magnitude at triangle centroids of the row's solution.
    pub max_flux: f64,
    pub reference_max_flux: f64,
    /// Fitted decay factor (decay rows only).
    pub theta: Option<f64>,
    pub failure: Option<String>,
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Scenario and series label, e.g. `convergence/noise/C=0.5`.
    pub scenario: String,
    #[serde(rename = "H")]
    pub coarse_h: f64,
    #[serde(rename = "h")]
    pub fine_h: f64,
    pub k: Option<usize>,
    pub ell: String,
    pub err_energy: f64,
    pub err_l2: f64,
    pub div_residual: f64,
    pub config_hash: String,
    #[serde(skip)]
    pub diagnostics: RowDiagnostics,
}

impl ResultRow {
    fn new(scenario: String, h: &MeshHierarchy, k: Option<usize>, ell: String, hash: &str) -> Self {
        ResultRow {
            scenario,
            coarse_h: h.coarse_size(),
            fine_h: h.fine_size(),
            k,
            ell,
            err_energy: f64::NAN,
            err_l2: f64::NAN,
            div_residual: f64::NAN,
            config_hash: hash.to_string(),
            diagnostics: RowDiagnostics::default(),
        }
    }

    fn fail(&mut self, e: &Error) {
        log::warn!("{} H={} h={}: {e}", self.scenario, self.coarse_h, self.fine_h);
        self.diagnostics.failure = Some(e.to_string());
    }
}

/// Inf-sup probe result of one space pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfSupRow {
    pub pair: String,
    #[serde(rename = "H")]
    pub coarse_h: f64,
    #[serde(rename = "h")]
    pub fine_h: f64,
    pub k: Option<usize>,
    pub value: Option<f64>,
    pub kernel_dim: usize,
    pub config_hash: String,
}

/// Everything a scenario produces.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub infsup: Vec<InfSupRow>,
    /// Set when the scenario could not run, with the reason.
    pub skipped: Option<String>,
}

/// Coefficient of a scenario, resolved on the unit square grid of the finest level.
pub fn build_coefficient(cfg: &ExperimentConfig, fine_cells_per_unit: usize) -> Result<CellGridField> {
    let n = fine_cells_per_unit.clamp(1, 128);
    match cfg.coeff {
        CoeffKind::Constant => make_constant(1.0),
        CoeffKind::Noise => make_noise(n, cfg.amplitude, cfg.seed),
        CoeffKind::Channels => make_channels(n, cfg.amplitude.exp(), &ChannelSpec::default()),
        CoeffKind::Instability => make_instability_field(),
        CoeffKind::Spe10 => {
            let path = cfg
                .spe10_file
                .as_deref()
                .ok_or_else(|| Error::Config("the spe10 coefficient needs --spe10-file".into()))?;
            load_spe10_component(path, cfg.spe10_layer, cfg.spe10_component)
        }
    }
}

fn cells_per_unit(domain: &Domain, level: u32) -> Result<usize> {
    Ok((1.0 / domain.mesh_size(level)?).round() as usize)
}

/// Builds the coefficient and checks it against every fine mesh before any solve.
fn aligned_coefficient(cfg: &ExperimentConfig) -> Result<CellGridField> {
    let finest = *cfg.fine_level.iter().max().expect("validated");
    let field = build_coefficient(cfg, cells_per_unit(&cfg.domain, finest)?)?;
    for &l in &cfg.fine_level {
        field.eval_on_mesh(&build_structured_mesh(&cfg.domain, l)?)?;
    }
    Ok(field)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs the scenario of `cfg`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    with_threads(cfg.threads, || match cfg.scenario {
        Scenario::Convergence | Scenario::Lshape => run_convergence(cfg).map(rows_only),
        Scenario::Instability => run_instability(cfg).map(rows_only),
        Scenario::Spe10 => run_spe10(cfg),
        Scenario::Decay => run_decay(cfg).map(rows_only),
        Scenario::Infsup => run_infsup(cfg).map(|infsup| RunOutput {
            infsup,
            ..Default::default()
        }),
        Scenario::Oracle => run_oracle(cfg).map(rows_only),
    })?
}

fn rows_only(rows: Vec<ResultRow>) -> RunOutput {
    RunOutput {
        rows,
        ..Default::default()
    }
}

fn fine_integrals(cfg: &ExperimentConfig, h: &MeshHierarchy) -> Result<Vec<f64>> {
    make_source(&cfg.source, &cfg.domain)?.triangle_integrals(h.fine())
}

/// Fills the error columns of `row` from a multiscale solution.
fn score(
    row: &mut ResultRow,
    d: &Discretization,
    reference: &[f64],
    sol: Result<MultiscaleSolution>,
    div_target: &[f64],
) {
    match sol {
        Ok(s) => {
            let (e, l2) = d.relative_errors(reference, &s.flux);
            row.err_energy = e;
            row.err_l2 = l2;
            row.div_residual = d.divergence_residual(&s.flux, div_target);
            row.diagnostics.max_flux = d.fine_space().max_centroid_flux(&s.flux);
        }
        Err(e) => row.fail(&e),
    }
}

/// Patch layers for each requested `C` (or the explicit `k` list), with labels.
fn layer_choices(cfg: &ExperimentConfig, h: &MeshHierarchy) -> Result<Vec<(String, usize)>> {
    let sat = h.saturation_layers().max(1);
    if !cfg.k.is_empty() {
        return Ok(cfg.k.iter().map(|&k| (format!("k={k}"), k)).collect());
    }
    cfg.c
        .iter()
        .map(|&c| Ok((format!("C={c}"), choose_k(h.coarse_size(), h.fine_size(), c)?.min(sat))))
        .collect()
}

/// Multiscale solves over a range of coarse levels against one fine reference;
/// adds standard coarse rows for the unit-square study.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let field = aligned_coefficient(cfg)?;
    let hash = cfg.hash();
    let fine_level = cfg.fine_level[0];
    let mut rows = Vec::new();
    let mut reference: Option<(Vec<f64>, f64, f64)> = None;
    for &cl in &cfg.coarse_level {
        let h = build_hierarchy(&cfg.domain, cl, fine_level)?;
        let d = Discretization::from_field(&h, &field, cfg.solve_options())?;
        let f = fine_integrals(cfg, &h)?;
        if reference.is_none() {
            let (r, secs) = timed(|| solve_reference(&d, &f));
            let r = r?;
            let m = d.fine_space().max_centroid_flux(&r.flux);
            reference = Some((r.flux, secs, m));
        }
        let (u_ref, ref_secs, ref_max) = reference.as_ref().unwrap();
        let projected = d.coarse_projected_integrals(&f);
        let prefix = format!("{}/{}", cfg.scenario, cfg.coeff);
        let mut cache: BTreeMap<usize, (Result<CorrectorBasis>, f64)> = BTreeMap::new();
        for (label, k) in layer_choices(cfg, &h)? {
            let mut row = ResultRow::new(format!("{prefix}/{label}"), &h, Some(k), "-".into(), &hash);
            let (basis, secs) = cache.entry(k).or_insert_with(|| timed(|| corrector_basis(&d, k)));
            row.diagnostics.reference_seconds = *ref_secs;
            row.diagnostics.reference_max_flux = *ref_max;
            row.diagnostics.corrector_seconds = *secs;
            match basis {
                Ok(b) => {
                    row.diagnostics.correctors = b.len();
                    let (sol, coarse_secs) = timed(|| solve_multiscale(&d, b, &f));
                    row.diagnostics.coarse_seconds = coarse_secs;
                    score(&mut row, &d, u_ref, sol, &projected);
                }
                Err(e) => row.fail(e),
            }
            rows.push(row);
        }
        if cfg.scenario == Scenario::Convergence {
            let mut row = ResultRow::new(format!("{prefix}/standard"), &h, None, "-".into(), &hash);
            let (sol, secs) = timed(|| solve_standard_coarse(&d, &f));
            row.diagnostics.coarse_seconds = secs;
            row.diagnostics.reference_max_flux = *ref_max;
            score(&mut row, &d, u_ref, sol, &projected);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Fixed coarse mesh, decreasing fine mesh size; localized and ideal correctors.
pub fn run_instability(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let field = aligned_coefficient(cfg)?;
    let hash = cfg.hash();
    let cl = cfg.coarse_level[0];
    let mut rows = Vec::new();
    for &fl in &cfg.fine_level {
        let h = build_hierarchy(&cfg.domain, cl, fl)?;
        let d = Discretization::from_field(&h, &field, cfg.solve_options())?;
        let f = fine_integrals(cfg, &h)?;
        let projected = d.coarse_projected_integrals(&f);
        let (reference, ref_secs) = timed(|| solve_reference(&d, &f));
        let reference = reference?;
        let ref_max = d.fine_space().max_centroid_flux(&reference.flux);
        let mut runs: Vec<(String, usize)> = layer_choices(cfg, &h)?;
        runs.push(("ideal".into(), h.saturation_layers()));
        for (label, k) in runs {
            let mut row = ResultRow::new(format!("instability/{label}"), &h, Some(k), "-".into(), &hash);
            row.diagnostics.reference_seconds = ref_secs;
            row.diagnostics.reference_max_flux = ref_max;
            let (basis, secs) = timed(|| corrector_basis(&d, k));
            row.diagnostics.corrector_seconds = secs;
            match basis {
                Ok(b) => {
                    row.diagnostics.correctors = b.len();
                    let (sol, coarse_secs) = timed(|| solve_multiscale(&d, &b, &f));
                    row.diagnostics.coarse_seconds = coarse_secs;
                    score(&mut row, &d, &reference.flux, sol, &projected);
                }
                Err(e) => row.fail(&e),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Layered-reservoir study on the 6x22 / 60x220 rectangle meshes. Skips with
/// an explanation if the permeability file is not available.
pub fn run_spe10(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let path = match &cfg.spe10_file {
        Some(p) if p.exists() => p.clone(),
        other => {
            let why = match other {
                Some(p) => format!("{} does not exist", p.display()),
                None => "no permeability file given".into(),
            };
            return Ok(RunOutput {
                skipped: Some(format!(
                    "{why}; download spe_perm.dat (SPE comparative solution project, model 2) and pass \
                     --spe10-file PATH"
                )),
                ..Default::default()
            });
        }
    };
    let cfg = ExperimentConfig {
        spe10_file: Some(path),
        ..cfg.clone()
    };
    let hash = cfg.hash();
    let field = build_coefficient(&cfg, 0)?;
    let h = build_hierarchy_with_factor(&cfg.domain, cfg.coarse_level[0], 10)?;
    let d = Discretization::from_field(&h, &field, cfg.solve_options())?;
    let f = fine_integrals(&cfg, &h)?;
    let projected = d.coarse_projected_integrals(&f);
    let (reference, ref_secs) = timed(|| solve_reference(&d, &f));
    let reference = reference?;
    let ref_max = d.fine_space().max_centroid_flux(&reference.flux);
    let sat = h.saturation_layers();
    let mut correctors: BTreeMap<usize, Result<Vec<crate::lod::SourceCorrector>>> = BTreeMap::new();
    let mut rows = Vec::new();
    for k in layer_choices(&cfg, &h)?.into_iter().map(|(_, k)| k) {
        let (basis, secs) = timed(|| corrector_basis(&d, k));
        for &choice in &cfg.ell {
            let ell = choice.resolve(k, sat);
            let label = match (choice, ell) {
                (EllChoice::Saturated, _) => "inf".to_string(),
                (_, Some(l)) => l.to_string(),
                (_, None) => "-".to_string(),
            };
            let mut row = ResultRow::new("spe10".into(), &h, Some(k), label, &hash);
            row.diagnostics.reference_seconds = ref_secs;
            row.diagnostics.reference_max_flux = ref_max;
            row.diagnostics.corrector_seconds = secs;
            let basis = match &basis {
                Ok(b) => b,
                Err(e) => {
                    row.fail(e);
                    rows.push(row);
                    continue;
                }
            };
            row.diagnostics.correctors = basis.len();
            let (sol, target) = match ell {
                None => (solve_multiscale(&d, basis, &f), &projected),
                Some(l) => {
                    let cs = correctors.entry(l).or_insert_with(|| source_correctors(&d, l, &f));
                    match cs {
                        Ok(cs) => (solve_multiscale_corrected(&d, basis, &f, cs), &f),
                        Err(e) => (Err(Error::Config(e.to_string())), &f),
                    }
                }
            };
            score(&mut row, &d, &reference.flux, sol, target);
            rows.push(row);
        }
    }
    Ok(RunOutput {
        rows,
        ..Default::default()
    })
}

/// Truncation error of the element corrector of coarse triangle 0 (a domain
/// corner) for its interior edge, per patch layer count.
pub fn run_decay(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let field = aligned_coefficient(cfg)?;
    let hash = cfg.hash();
    let h = build_hierarchy(&cfg.domain, cfg.coarse_level[0], cfg.fine_level[0])?;
    let d = Discretization::from_field(&h, &field, cfg.solve_options())?;
    let seed = 0;
    let dof = d
        .coarse_space()
        .local_dofs(seed)
        .iter()
        .find_map(|(c, _)| *c)
        .ok_or_else(|| Error::Config("the seed triangle has no interior edge".into()))?;
    let mut v = vec![0.0; d.coarse_space().dim()];
    v[dof] = 1.0;
    let k_max = cfg.k.iter().copied().max().unwrap_or(4).max(1);
    let (report, secs) = timed(|| decay_profile(&d, seed, &v, k_max));
    let report = report?;
    Ok((1..=k_max)
        .filter(|k| cfg.k.is_empty() || cfg.k.contains(k))
        .map(|k| {
            let mut row = ResultRow::new("decay".into(), &h, Some(k), "-".into(), &hash);
            row.err_energy = report.distances[k - 1] / report.ideal_norm.max(f64::MIN_POSITIVE);
            row.err_l2 = report.relative_l2[k - 1];
            row.div_residual = report.divergence;
            row.diagnostics.theta = report.theta;
            row.diagnostics.corrector_seconds = secs;
            row
        })
        .collect())
}

/// Inf-sup probes of the standard coarse pair and of multiscale pairs.
pub fn run_infsup(cfg: &ExperimentConfig) -> Result<Vec<InfSupRow>> {
    let field = aligned_coefficient(cfg)?;
    let hash = cfg.hash();
    let h = build_hierarchy(&cfg.domain, cfg.coarse_level[0], cfg.fine_level[0])?;
    let d = Discretization::from_field(&h, &field, cfg.solve_options())?;
    let row = |pair: &str, k, est: crate::lod::InfSupEstimate| InfSupRow {
        pair: pair.into(),
        coarse_h: h.coarse_size(),
        fine_h: h.fine_size(),
        k,
        value: est.value,
        kernel_dim: est.kernel_dim,
        config_hash: hash.clone(),
    };
    let mut out = vec![row("standard", None, coarse_infsup(&d)?)];
    for (_, k) in layer_choices(cfg, &h)? {
        let basis = corrector_basis(&d, k)?;
        out.push(row("multiscale", Some(k), multiscale_infsup(&d, &basis)?));
    }
    Ok(out)
}

/// Dense bordered KKT solve of the reference problem, with the zero-mean
/// pressure condition as an extra row.
pub fn dense_reference(d: &Discretization, f_fine: &[f64]) -> Result<Vec<f64>> {
    let m = d.mass().matrix.to_dense();
    let b = d.div().matrix.to_dense();
    let (n, p) = (m.nrows(), b.nrows());
    let areas = d.hierarchy().fine().areas();
    let dim = n + p + 1;
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(&m);
    k.view_mut((n, 0), (p, n)).copy_from(&b);
    k.view_mut((0, n), (n, p)).copy_from(&b.transpose());
    for (t, a) in areas.iter().enumerate() {
        k[(n + t, n + p)] = *a;
        k[(n + p, n + t)] = *a;
    }
    let mut rhs = DVector::zeros(dim);
    for (t, v) in f_fine.iter().enumerate() {
        rhs[n + t] = -v;
    }
    let x = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solver {
            detail: "dense KKT matrix is singular".into(),
            relative_residual: f64::NAN,
        })?;
    Ok(x.rows(0, n).iter().copied().collect())
}

/// Sparse reference solve against [`dense_reference`] on a small mesh.
pub fn run_oracle(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let field = aligned_coefficient(cfg)?;
    let hash = cfg.hash();
    let h = build_hierarchy(&cfg.domain, cfg.coarse_level[0], cfg.fine_level[0])?;
    let d = Discretization::from_field(&h, &field, cfg.solve_options())?;
    let f = fine_integrals(cfg, &h)?;
    let sparse = solve_reference(&d, &f)?;
    let dense = dense_reference(&d, &f)?;
    let mut row = ResultRow::new("oracle".into(), &h, None, "-".into(), &hash);
    row.err_energy = d.relative_errors(&dense, &sparse.flux).0;
    row.err_l2 = dense.iter().zip(&sparse.flux).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    row.div_residual = d.divergence_residual(&sparse.flux, &f);
    Ok(vec![row])
}

/// Writes rows with the header
/// `scenario,H,h,k,ell,err_energy,err_l2,div_residual,config_hash`.
/// No file is created for an empty table.
pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    write_table(rows, path)
}

/// Writes inf-sup rows with header `pair,H,h,k,value,kernel_dim,config_hash`.
pub fn emit_infsup_csv(rows: &[InfSupRow], path: &Path) -> Result<()> {
    write_table(rows, path)
}

fn write_table<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Config(format!("refusing to write an empty table to {}", path.display())));
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a table written by [`emit_csv`]; diagnostics come back empty.
pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Horizontal axis of a convergence plot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotAxis {
    CoarseSize,
    FineSize,
}

/// Layout of an SVG error plot.
#[derive(Clone, Debug)]
pub struct PlotSpec {
    pub title: String,
    pub x: PlotAxis,
    /// Slopes of dashed guide lines `y ~ x^s`.
    pub reference_slopes: Vec<f64>,
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// Log-log plot of `err_energy` with one polyline per `scenario` label.
pub fn emit_svg_plot(rows: &[ResultRow], path: &Path, spec: &PlotSpec) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Config(format!("refusing to plot an empty table to {}", path.display())));
    }
    let mut series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let x = match spec.x {
            PlotAxis::CoarseSize => r.coarse_h,
            PlotAxis::FineSize => r.fine_h,
        };
        let idx = match series.iter().position(|(s, _)| *s == r.scenario) {
            Some(i) => i,
            None => {
                series.push((&r.scenario, Vec::new()));
                series.len() - 1
            }
        };
        if x > 0.0 && r.err_energy > 0.0 && r.err_energy.is_finite() {
            series[idx].1.push((x.log10(), r.err_energy.log10()));
        }
    }
    let pts = || series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 0.0, -1.0, 0.0);
    }
    let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));

    let (w, hgt, left, top, right, bottom) = (640.0, 480.0, 70.0, 40.0, 190.0, 50.0);
    let pw = w - left - right;
    let ph = hgt - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    s += &format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{hgt}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{hgt}\" fill=\"white\"/>\n");
    s += &format!("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", left + pw / 2.0, xml_escape(&spec.title));
    s += &format!("<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n");
    for e in x0 as i32..=x1 as i32 {
        let x = sx(e as f64);
        s += &format!("<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>\n", top, top + ph);
        s += &format!("<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">1e{e}</text>\n", top + ph + 16.0);
    }
    for e in y0 as i32..=y1 as i32 {
        let y = sy(e as f64);
        s += &format!("<line x1=\"{left}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n", left + pw);
        s += &format!("<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">1e{e}</text>\n", left - 6.0, y + 4.0);
    }
    let xlabel = match spec.x {
        PlotAxis::CoarseSize => "H",
        PlotAxis::FineSize => "h",
    };
    s += &format!("<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{xlabel}</text>\n", left + pw / 2.0, hgt - 8.0);
    s += &format!(
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">relative energy error</text>\n",
        top + ph / 2.0,
        top + ph / 2.0
    );
    // guide lines through the top-right data corner
    for (i, &slope) in spec.reference_slopes.iter().enumerate() {
        let (ax, ay) = (x1, y1 - 0.5);
        let bx = x0.max(ax - (ay - y0) / slope.max(1e-9));
        let by = ay - slope * (ax - bx);
        s += &format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n",
            sx(ax),
            sy(ay),
            sx(bx),
            sy(by)
        );
        s += &format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"gray\">H^{slope}</text>\n",
            sx(bx) + 4.0,
            sy(by) - 4.0 - 12.0 * i as f64
        );
    }
    for (i, (name, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        );
        for &(x, y) in p {
            s += &format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n", sx(x), sy(y));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        s += &format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"12\" height=\"3\" fill=\"{color}\"/>\n",
            left + pw + 10.0,
            ly - 4.0
        );
        s += &format!("<text x=\"{:.2}\" y=\"{ly:.2}\">{}</text>\n", left + pw + 26.0, xml_escape(name));
    }
    s += "</svg>\n";
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Runs a scenario and writes its tables and plot into `cfg.out`.
/// Returns the output and the written files.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<(RunOutput, Vec<PathBuf>)> {
    let out = run(cfg)?;
    let mut files = Vec::new();
    if out.skipped.is_some() {
        return Ok((out, files));
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let base = cfg.out.join(cfg.scenario.name());
    if !out.rows.is_empty() {
        let csv = base.with_extension("csv");
        emit_csv(&out.rows, &csv)?;
        files.push(csv);
        let plot = match cfg.scenario {
            Scenario::Convergence | Scenario::Lshape => Some((PlotAxis::CoarseSize, vec![1.0, 2.0])),
            Scenario::Instability => Some((PlotAxis::FineSize, vec![])),
            _ => None,
        };
        if let Some((axis, slopes)) = plot {
            let svg = base.with_extension("svg");
            let spec = PlotSpec {
                title: format!("{} ({})", cfg.scenario, cfg.coeff),
                x: axis,
                reference_slopes: slopes,
            };
            emit_svg_plot(&out.rows, &svg, &spec)?;
            files.push(svg);
        }
    }
    if !out.infsup.is_empty() {
        let csv = base.with_extension("csv");
        emit_infsup_csv(&out.infsup, &csv)?;
        files.push(csv);
    }
    Ok((out, files))
}
