//! `rtlod`: runs the multiscale experiments and writes CSV tables and SVG plots.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use rtlod::xp::{run_and_write, ExperimentConfig, RunOutput, Scenario};
use rtlod::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rtlod", version, about = "Mixed multiscale (LOD) Darcy flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Localization error against H for a fixed fine mesh.
    Convergence(RunArgs),
    /// Fixed H, k = 2, decreasing h with a thin high-conductivity bump.
    Instability(RunArgs),
    /// Convergence on the L-shaped domain with a source outside Q_H.
    Lshape(RunArgs),
    /// Two-well reservoir layer with source correctors.
    Spe10(RunArgs),
    /// Truncation error of one element corrector per patch layer.
    Decay(RunArgs),
    /// Numerical inf-sup probes of coarse and multiscale pairs.
    Infsup(RunArgs),
    /// Sparse reference solve against a dense KKT solve on 8 triangles.
    Oracle(RunArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON config with the same field names as these flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// unit_square, l_shape, spe10 or rect(nx,ny,width,height).
    #[arg(long)]
    domain: Option<String>,
    /// constant, noise, channels, instability or spe10.
    #[arg(long)]
    coeff: Option<String>,
    /// Natural log of the noise/channel contrast.
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// checker_quarters, halfplane_pm1, lshape_linear or wells.
    #[arg(long)]
    source: Option<String>,
    /// Levels as `2,3,4` or the inclusive range `2..5`.
    #[arg(long)]
    coarse_level: Option<String>,
    #[arg(long)]
    fine_level: Option<String>,
    /// Patch-size constants, comma separated.
    #[arg(long = "C", value_delimiter = ',')]
    c: Option<Vec<f64>>,
    /// Explicit patch layers, comma separated (overrides C).
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Source corrector layers: none, N, k, k+1 or inf, comma separated.
    #[arg(long, value_delimiter = ',')]
    ell: Option<Vec<String>>,
    /// Relative residual required from every saddle solve.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    spe10_file: Option<PathBuf>,
    /// kx, ky or kz.
    #[arg(long)]
    spe10_component: Option<String>,
    /// 1-based layer of the permeability file.
    #[arg(long)]
    spe10_layer: Option<usize>,
    /// Published problem sizes instead of desk-scale defaults.
    #[arg(long)]
    full: bool,
}

fn parse_levels(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::Config(format!("bad level list `{s}` (use `2,3,4` or `2..5`)"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

impl RunArgs {
    fn overrides(&self) -> Result<Map<String, Value>> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(v) = &self.domain {
            put("domain", json!(v));
        }
        if let Some(v) = &self.coeff {
            put("coeff", json!(v));
        }
        if let Some(v) = self.amplitude {
            put("amplitude", json!(v));
        }
        if let Some(v) = self.seed {
            put("seed", json!(v));
        }
        if let Some(v) = &self.source {
            put("source", json!(v));
        }
        if let Some(v) = &self.coarse_level {
            put("coarse_level", json!(parse_levels(v)?));
        }
        if let Some(v) = &self.fine_level {
            put("fine_level", json!(parse_levels(v)?));
        }
        if let Some(v) = &self.c {
            put("C", json!(v));
        }
        if let Some(v) = &self.k {
            put("k", json!(v));
        }
        if let Some(v) = &self.ell {
            put("ell", json!(v));
        }
        if let Some(v) = self.tol {
            put("tol", json!(v));
        }
        if let Some(v) = self.threads {
            put("threads", json!(v));
        }
        if let Some(v) = &self.out {
            put("out", json!(v));
        }
        if let Some(v) = &self.spe10_file {
            put("spe10_file", json!(v));
        }
        if let Some(v) = &self.spe10_component {
            put("spe10_component", json!(v));
        }
        if let Some(v) = self.spe10_layer {
            put("spe10_layer", json!(v));
        }
        if self.full {
            put("full", json!(true));
        }
        Ok(m)
    }

    fn config(&self, scenario: Scenario) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Some(serde_json::from_str::<Value>(&text)?)
            }
            None => None,
        };
        ExperimentConfig::resolve(scenario, self.full, file.as_ref(), &self.overrides()?)
    }
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

fn print_output(cfg: &ExperimentConfig, out: &RunOutput) {
    if !out.rows.is_empty() {
        println!(
            "{:<32} {:>10} {:>10} {:>3} {:>4} {:>12} {:>12} {:>10}",
            "series", "H", "h", "k", "ell", "err_energy", "err_l2", "div_res"
        );
        for r in &out.rows {
            println!(
                "{:<32} {:>10.3e} {:>10.3e} {:>3} {:>4} {:>12.4e} {:>12.4e} {:>10.2e}",
                r.scenario,
                r.coarse_h,
                r.fine_h,
                fmt_opt(r.k),
                r.ell,
                r.err_energy,
                r.err_l2,
                r.div_residual
            );
            if let Some(theta) = r.diagnostics.theta {
                println!("    fitted decay factor {theta:.4}");
            }
            if let Some(f) = &r.diagnostics.failure {
                println!("    failed: {f}");
            }
        }
    }
    for r in &out.infsup {
        println!(
            "{:<12} H={:.3e} h={:.3e} k={} inf-sup={} kernel={}",
            r.pair,
            r.coarse_h,
            r.fine_h,
            fmt_opt(r.k),
            r.value.map_or_else(|| "none".into(), |v| format!("{v:.6}")),
            r.kernel_dim
        );
    }
    println!("config hash {}", cfg.hash());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (scenario, args) = match &cli.command {
        Command::Convergence(a) => (Scenario::Convergence, a),
        Command::Instability(a) => (Scenario::Instability, a),
        Command::Lshape(a) => (Scenario::Lshape, a),
        Command::Spe10(a) => (Scenario::Spe10, a),
        Command::Decay(a) => (Scenario::Decay, a),
        Command::Infsup(a) => (Scenario::Infsup, a),
        Command::Oracle(a) => (Scenario::Oracle, a),
    };
    let result = args.config(scenario).and_then(|cfg| run_and_write(&cfg).map(|r| (cfg, r)));
    match result {
        Ok((cfg, (out, files))) => {
            if let Some(reason) = &out.skipped {
                println!("SKIPPED {scenario}: {reason}");
                return ExitCode::SUCCESS;
            }
            print_output(&cfg, &out);
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
