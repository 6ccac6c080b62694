//! Run configuration, command dispatch, and persistence.
//!
//! Every command reads one versioned JSON config, writes CSV artifacts
//! with fixed column order into an output directory, and finishes with a
//! manifest naming each file, its size, the config hash, and wall-clock
//! timings. Identical config + seed reproduces byte-identical CSVs.

use crate::acim::{build_ulam, stationary_density};
use crate::ergodic::{
    abramov_check, entropy_formula_check, lorenz_seed_box, spectrum_structure,
    unstable_density_profile, ProfileParams,
};
use crate::expansive::{expansiveness_probe, sample_orbit, sensitivity_probe, ProbeParams};
use crate::flow::FlowSystem;
use crate::hyptimes::{ht_frequency, HTParams};
use crate::map1d::BranchMap1D;
use crate::models::{
    exit_time, geometric_lorenz_map, lorenz_field, GeometricLorenzSpec, GeometricLorenzSystem,
    LorenzLikeEigenvalues,
};
use crate::numerics::unit_hash;
use crate::ode::StepControl;
use crate::sections::{lorenz_wing_sections, SectionPoint, SectionedSystem};
use crate::suspension::{
    invariance_test, lift_measure, return_time_roof, Quadrature, SectionReturnBase, Suspension,
    ROOF_CAP,
};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

type State = Vector3<f64>;

pub const CONFIG_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: u32 = 1;

/// Failures are split by exit code: validation errors (bad config, bad
/// flags, degenerate parameters) exit 2, numerical failures exit 3.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

fn num<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Numerical(e.to_string())
}

fn val<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Validation(e.to_string())
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

macro_rules! cfg_block {
    ($name:ident { $($(#[$m:meta])* $field:ident : $ty:ty = $default:expr),+ $(,)? }) => {
        #[derive(Debug, Clone, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            $( $(#[$m])* pub $field: $ty, )+
        }
        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default, )+ }
            }
        }
    };
}

cfg_block!(LorenzCfg {
    sigma: f64 = 10.0,
    r: f64 = 28.0,
    b: f64 = 8.0 / 3.0,
});

cfg_block!(GeometricCfg {
    lambda1: f64 = 1.0,
    lambda2: f64 = -0.52,
    lambda3: f64 = -2.0,
    mu: f64 = 1.95,
    half_width: f64 = 1.0,
    nu: f64 = 0.25,
    t_loop: f64 = 1.0,
});

cfg_block!(SimulateCfg {
    t: f64 = 50.0,
    dt: f64 = 0.01,
    x0: [f64; 3] = [1.0, 1.0, 20.0],
});

cfg_block!(SectionsCfg {
    z_plane: f64 = 27.0,
    burn: f64 = 50.0,
    t_orbit: f64 = 300.0,
});

cfg_block!(QuotientCfg {
    n_points: usize = 2000,
});

cfg_block!(AcimCfg {
    bins: usize = 4096,
    tol: f64 = 1e-10,
});

cfg_block!(HyptimesCfg {
    n_seeds: usize = 100,
    n_iters: usize = 2000,
    b: f64 = 0.02,
    c: f64 = 0.1,
    delta: f64 = 5e-4,
});

cfg_block!(SuspendCfg {
    n_samples: usize = 50_000,
    burn: usize = 200,
    n_observables: usize = 10,
    /// Semiflow times probed by the invariance test.
    ts: Vec<f64> = vec![0.3],
});

cfg_block!(LyapunovCfg {
    n_seeds: usize = 16,
    t: f64 = 600.0,
    burn: f64 = 50.0,
});

cfg_block!(EntropyCfg {
    n_seeds: usize = 4,
    t: f64 = 500.0,
    burn: f64 = 50.0,
    abramov_returns: usize = 100_000,
    abramov_bins: usize = 4096,
});

cfg_block!(ProfileCfg {
    n_hits: usize = 200_000,
    burn: usize = 200,
    bands: usize = 8,
    bins: usize = 32,
});

cfg_block!(ExpansiveCfg {
    epsilon: f64 = 0.1,
    n_pairs: usize = 200,
    n_controls: usize = 20,
    t: f64 = 100.0,
});

cfg_block!(SensitivityCfg {
    r0: f64 = 1e-7,
    delta_s: f64 = 1.0,
    n_perturb: usize = 16,
    t_cap: f64 = 80.0,
    burn: f64 = 50.0,
});

/// One versioned JSON document configuring every command. Unknown keys are
/// rejected with the offending key named in the error.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Ambient flow for the flow-level commands; the map and section
    /// commands always use the `geometric` block.
    pub system: String,
    pub seed: u64,
    /// Default output directory; the --out flag overrides it.
    pub out: Option<String>,
    pub lorenz: LorenzCfg,
    pub geometric: GeometricCfg,
    pub simulate: SimulateCfg,
    pub sections: SectionsCfg,
    pub quotient: QuotientCfg,
    pub acim: AcimCfg,
    pub hyptimes: HyptimesCfg,
    pub suspend: SuspendCfg,
    pub lyapunov: LyapunovCfg,
    pub entropy: EntropyCfg,
    pub density_profile: ProfileCfg,
    pub expansive: ExpansiveCfg,
    pub sensitivity: SensitivityCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            system: "lorenz".to_string(),
            seed: 17,
            out: None,
            lorenz: LorenzCfg::default(),
            geometric: GeometricCfg::default(),
            simulate: SimulateCfg::default(),
            sections: SectionsCfg::default(),
            quotient: QuotientCfg::default(),
            acim: AcimCfg::default(),
            hyptimes: HyptimesCfg::default(),
            suspend: SuspendCfg::default(),
            lyapunov: LyapunovCfg::default(),
            entropy: EntropyCfg::default(),
            density_profile: ProfileCfg::default(),
            expansive: ExpansiveCfg::default(),
            sensitivity: SensitivityCfg::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Validation(format!(
                "config version {} unsupported, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.system != "lorenz" {
            return Err(HarnessError::Validation(format!(
                "system '{}' unknown; supported: lorenz (the geometric model \
                 is section-based and drives the map commands)",
                self.system
            )));
        }
        let l = &self.lorenz;
        if !(l.sigma > 0.0 && l.r > 0.0 && l.b > 0.0) {
            return Err(HarnessError::Validation(
                "lorenz parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialized config (fixed field order).
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

/// Parse a config file, or produce the default when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, HarnessError> {
    let Some(p) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(p)
        .map_err(|e| HarnessError::Validation(format!("config {}: {e}", p.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Validation(format!("config schema error: {e}")))?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Commands and manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Sections,
    Quotient,
    Acim,
    Hyptimes,
    Suspend,
    Lyapunov,
    Entropy,
    DensityProfile,
    Expansive,
    Sensitivity,
    All,
}

impl CommandKind {
    pub const SINGLES: [CommandKind; 11] = [
        CommandKind::Simulate,
        CommandKind::Sections,
        CommandKind::Quotient,
        CommandKind::Acim,
        CommandKind::Hyptimes,
        CommandKind::Suspend,
        CommandKind::Lyapunov,
        CommandKind::Entropy,
        CommandKind::DensityProfile,
        CommandKind::Expansive,
        CommandKind::Sensitivity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Sections => "sections",
            CommandKind::Quotient => "quotient",
            CommandKind::Acim => "acim",
            CommandKind::Hyptimes => "hyptimes",
            CommandKind::Suspend => "suspend",
            CommandKind::Lyapunov => "lyapunov",
            CommandKind::Entropy => "entropy",
            CommandKind::DensityProfile => "density-profile",
            CommandKind::Expansive => "expansive",
            CommandKind::Sensitivity => "sensitivity",
            CommandKind::All => "all",
        }
    }

    /// CSV schema documentation, surfaced through --help.
    pub fn schema_help(&self) -> &'static str {
        match self {
            CommandKind::Simulate => "trajectory.csv: t,x,y,z",
            CommandKind::Sections => {
                "sections.csv: name,origin_x,origin_y,origin_z,e_u_x,e_u_y,e_u_z,\
                 e_v_x,e_v_y,e_v_z,crossing_sign,delta\n\
                 wing_report.csv: section,hits,transversality,delta_witness,stable_contraction"
            }
            CommandKind::Quotient => "quotient.csv: branch_id,x,f_x,tau,r",
            CommandKind::Acim => {
                "density.csv: bin_left,bin_right,density\nchain.csv: i,j,p (row-stochastic COO)"
            }
            CommandKind::Hyptimes => "hyptimes.csv: seed,seed_used,theta,n_times,times \
                 (times ';'-separated hyperbolic iterates)",
            CommandKind::Suspend => {
                "suspend.csv: observable_id,estimate,stderr,n_samples\n\
                 suspend_summary.csv: invariance_deviation,mu_tau,truncated_mass,excluded,\
                 n_base_samples"
            }
            CommandKind::Lyapunov => "spectrum.csv: seed_x,seed_y,seed_z,lambda_1,lambda_2,\
                 lambda_3,sum,div_avg,classified",
            CommandKind::Entropy => {
                "entropy.csv: seed_x,seed_y,seed_z,qr,lambda_0,unstable_rate,quality,cu_rate\n\
                 entropy_summary.csv: qr,unstable,cu_minus_l0,max_pairwise_rel,excluded\n\
                 abramov.csv: map_exponent_ulam,flow_exponent,mean_tau_ulam,mean_tau_orbit,\
                 product,rel_gap,restarts"
            }
            CommandKind::DensityProfile => {
                "profile.csv: band_id,u_lo,u_hi,v_left,v_right,density (band_id -1 pools \
                 all bands)\nprofile_tau.csv: v_left,v_right,mean_tau\n\
                 profile_summary.csv: gamma_v,near_gamma_density,median_density,sup_density,\
                 n_hits,restarts"
            }
            CommandKind::Expansive => {
                "expansive.csv: delta,n_pairs_close,n_violations\n\
                 expansive_summary.csv: delta_hat,epsilon,n_pairs,n_controls,note \
                 (the probe falsifies or measures; it never proves)"
            }
            CommandKind::Sensitivity => {
                "sensitivity.csv: perturb_id,separation_time,capped\n\
                 sensitivity_summary.csv: median,predicted,r0,delta_s,lambda_plus,capped,t_cap"
            }
            CommandKind::All => "every command above, merged into one manifest",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestFile {
    pub path: String,
    pub bytes: u64,
}

/// Written as manifest.json beside the artifacts. Every listed file exists
/// and is non-empty when the run reports success.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    pub command: String,
    pub config_sha256: String,
    pub files: Vec<ManifestFile>,
    pub timings_ms: Vec<(String, u128)>,
}

/// Create or reuse the output directory. A non-empty directory is refused
/// without `force` so distinct runs cannot silently mix.
fn prepare_out_dir(out: &Path, force: bool) -> Result<(), HarnessError> {
    if out.exists() {
        let n = fs::read_dir(out)
            .map_err(|e| HarnessError::Validation(format!("out dir {}: {e}", out.display())))?
            .count();
        if n > 0 && !force {
            return Err(HarnessError::Validation(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out)
            .map_err(|e| HarnessError::Validation(format!("out dir {}: {e}", out.display())))?;
    }
    Ok(())
}

fn write_file(out: &Path, name: &str, content: &str) -> Result<PathBuf, HarnessError> {
    let path = out.join(name);
    fs::write(&path, content).map_err(|e| num(format!("write {}: {e}", path.display())))?;
    Ok(path)
}

/// Shortest-roundtrip float formatting: deterministic and lossless.
fn f(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

/// Execute one command (or `all`), write its artifacts and manifest.json
/// into `out`, and return the manifest.
pub fn run(
    cmd: CommandKind,
    cfg: &RunConfig,
    out: &Path,
    force: bool,
) -> Result<RunManifest, HarnessError> {
    cfg.validate()?;
    prepare_out_dir(out, force)?;
    let mut files: Vec<PathBuf> = Vec::new();
    let mut timings: Vec<(String, u128)> = Vec::new();
    let singles: &[CommandKind] = match cmd {
        CommandKind::All => &CommandKind::SINGLES,
        _ => std::slice::from_ref(&cmd),
    };
    for c in singles {
        let t0 = Instant::now();
        let mut written = dispatch(*c, cfg, out)?;
        timings.push((c.name().to_string(), t0.elapsed().as_millis()));
        files.append(&mut written);
    }
    let mut entries = Vec::with_capacity(files.len());
    for p in &files {
        let meta = fs::metadata(p).map_err(|e| num(format!("missing artifact {}: {e}", p.display())))?;
        if meta.len() == 0 {
            return Err(num(format!("artifact {} is empty", p.display())));
        }
        entries.push(ManifestFile {
            path: p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            bytes: meta.len(),
        });
    }
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION,
        command: cmd.name().to_string(),
        config_sha256: cfg.sha256(),
        files: entries,
        timings_ms: timings,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(num)?;
    write_file(out, "manifest.json", &json)?;
    Ok(manifest)
}

fn dispatch(cmd: CommandKind, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    match cmd {
        CommandKind::Simulate => cmd_simulate(cfg, out),
        CommandKind::Sections => cmd_sections(cfg, out),
        CommandKind::Quotient => cmd_quotient(cfg, out),
        CommandKind::Acim => cmd_acim(cfg, out),
        CommandKind::Hyptimes => cmd_hyptimes(cfg, out),
        CommandKind::Suspend => cmd_suspend(cfg, out),
        CommandKind::Lyapunov => cmd_lyapunov(cfg, out),
        CommandKind::Entropy => cmd_entropy(cfg, out),
        CommandKind::DensityProfile => cmd_profile(cfg, out),
        CommandKind::Expansive => cmd_expansive(cfg, out),
        CommandKind::Sensitivity => cmd_sensitivity(cfg, out),
        CommandKind::All => unreachable!("expanded by run()"),
    }
}

fn lorenz_flow(cfg: &RunConfig) -> FlowSystem {
    lorenz_field(cfg.lorenz.sigma, cfg.lorenz.r, cfg.lorenz.b)
}

fn geometric_spec(cfg: &RunConfig) -> Result<GeometricLorenzSpec, HarnessError> {
    let g = &cfg.geometric;
    let eigenvalues = LorenzLikeEigenvalues::new(g.lambda1, g.lambda2, g.lambda3)
        .map_err(|e| val(format!("geometric config: {e}")))?;
    Ok(GeometricLorenzSpec {
        eigenvalues,
        mu: g.mu,
        half_width: g.half_width,
    })
}

fn geometric_system(cfg: &RunConfig) -> Result<GeometricLorenzSystem, HarnessError> {
    let spec = geometric_spec(cfg)?;
    GeometricLorenzSystem::with_wing(spec, cfg.geometric.nu, cfg.geometric.t_loop)
        .map_err(|e| val(format!("geometric config: {e}")))
}

fn geometric_map(cfg: &RunConfig) -> Result<BranchMap1D, HarnessError> {
    let spec = geometric_spec(cfg)?;
    geometric_lorenz_map(&spec).map_err(|e| val(format!("geometric config: {e}")))
}

fn default_ctrl() -> StepControl {
    StepControl {
        tol: 1e-9,
        max_step: 0.25,
        ..StepControl::default()
    }
}

// ---------------------------------------------------------------------------
// Individual commands
// ---------------------------------------------------------------------------

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let s = &cfg.simulate;
    if !(s.t > 0.0) {
        return Err(HarnessError::Validation(
            "simulate: horizon T must be positive (an empty trajectory is not a run)".into(),
        ));
    }
    if !(s.dt > 0.0 && s.dt <= s.t) {
        return Err(HarnessError::Validation(
            "simulate: dt must be positive and at most T".into(),
        ));
    }
    let flow = lorenz_flow(cfg);
    let n_steps = (s.t / s.dt).round().max(1.0) as usize;
    let orbit = sample_orbit(
        &flow,
        State::new(s.x0[0], s.x0[1], s.x0[2]),
        n_steps,
        s.dt,
        &default_ctrl(),
    )
    .map_err(num)?;
    let mut csv = String::from("t,x,y,z\n");
    for (k, p) in orbit.points.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{},{}", f(k as f64 * s.dt), f(p[0]), f(p[1]), f(p[2]));
    }
    Ok(vec![write_file(out, "trajectory.csv", &csv)?])
}

fn cmd_sections(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let s = &cfg.sections;
    if !(s.t_orbit > 0.0 && s.burn >= 0.0) {
        return Err(HarnessError::Validation(
            "sections: orbit time must be positive".into(),
        ));
    }
    let (sys, report) = lorenz_wing_sections(lorenz_flow(cfg), s.z_plane, s.burn, s.t_orbit)
        .map_err(num)?;
    let mut csv = String::from(
        "name,origin_x,origin_y,origin_z,e_u_x,e_u_y,e_u_z,e_v_x,e_v_y,e_v_z,crossing_sign,delta\n",
    );
    for sec in sys.sections_vec() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            sec.name,
            f(sec.origin[0]),
            f(sec.origin[1]),
            f(sec.origin[2]),
            f(sec.e_u[0]),
            f(sec.e_u[1]),
            f(sec.e_u[2]),
            f(sec.e_v[0]),
            f(sec.e_v[1]),
            f(sec.e_v[2]),
            f(sec.crossing_sign),
            f(sec.delta)
        );
    }
    let mut rep = String::from("section,hits,transversality,delta_witness,stable_contraction\n");
    for i in 0..2 {
        let _ = writeln!(
            rep,
            "{},{},{},{},{}",
            i,
            report.hits[i],
            f(report.transversality[i]),
            f(report.delta_witness[i]),
            f(report.stable_contraction[i])
        );
    }
    Ok(vec![
        write_file(out, "sections.csv", &csv)?,
        write_file(out, "wing_report.csv", &rep)?,
    ])
}

fn cmd_quotient(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let n = cfg.quotient.n_points;
    if n < 10 {
        return Err(HarnessError::Validation(
            "quotient: n_points must be at least 10".into(),
        ));
    }
    let map = geometric_map(cfg)?;
    let lambda1 = cfg.geometric.lambda1;
    let t_loop = cfg.geometric.t_loop;
    let mut csv = String::from("branch_id,x,f_x,tau,r\n");
    for i in 0..n {
        let mut x = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
        if x.abs() < 1e-15 {
            x = 1e-12;
        }
        let branch = map.branch_index(x).ok_or_else(|| {
            HarnessError::Numerical(format!("quotient: no branch at x = {x}"))
        })?;
        let fx = map.eval(x).map_err(num)?;
        let r = map.deriv(x).map_err(num)?.abs();
        let tau = exit_time(lambda1, x.abs()) + t_loop;
        let _ = writeln!(csv, "{},{},{},{},{}", branch, f(x), f(fx), f(tau), f(r));
    }
    Ok(vec![write_file(out, "quotient.csv", &csv)?])
}

fn cmd_acim(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let a = &cfg.acim;
    if !(2..=1_000_000).contains(&a.bins) {
        return Err(HarnessError::Validation(
            "acim: bins must lie in [2, 1e6]".into(),
        ));
    }
    if !(a.tol > 0.0) {
        return Err(HarnessError::Validation("acim: tol must be positive".into()));
    }
    let map = geometric_map(cfg)?;
    let chain = build_ulam(&map, a.bins).map_err(num)?;
    let dec = stationary_density(&chain, a.tol).map_err(num)?;
    // dominant recurrent component by mass
    let c_star = (0..dec.densities.len())
        .max_by(|&i, &j| {
            let mi: f64 = dec.masses(i).iter().sum();
            let mj: f64 = dec.masses(j).iter().sum();
            mi.partial_cmp(&mj).unwrap()
        })
        .ok_or_else(|| HarnessError::Numerical("acim: no recurrent component".into()))?;
    let density = &dec.densities[c_star];
    let mut csv = String::from("bin_left,bin_right,density\n");
    for j in 0..density.len() {
        let _ = writeln!(
            csv,
            "{},{},{}",
            f(dec.edges[j]),
            f(dec.edges[j + 1]),
            f(density[j])
        );
    }
    let mut coo = String::from("i,j,p\n");
    for (i, j, p) in chain.coo() {
        let _ = writeln!(coo, "{i},{j},{}", f(p));
    }
    Ok(vec![
        write_file(out, "density.csv", &csv)?,
        write_file(out, "chain.csv", &coo)?,
    ])
}

fn cmd_hyptimes(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let h = &cfg.hyptimes;
    if h.n_iters < 1000 {
        return Err(HarnessError::Validation(
            "hyptimes: n_iters must be at least 1000".into(),
        ));
    }
    if h.n_seeds == 0 {
        return Err(HarnessError::Validation(
            "hyptimes: n_seeds must be positive".into(),
        ));
    }
    let map = geometric_map(cfg)?;
    let params = HTParams {
        b: h.b,
        c: h.c,
        delta: h.delta,
    };
    params
        .validate(&map)
        .map_err(|e| val(format!("hyptimes config: {e}")))?;
    let seeds: Vec<f64> = (0..h.n_seeds)
        .map(|i| {
            let u = 2.0 * unit_hash(i as f64 + 0.11, cfg.seed ^ 0x47) - 1.0;
            // keep seeds off the singular leaf
            if u.abs() < 1e-6 {
                1e-6
            } else {
                u
            }
        })
        .collect();
    let freq = ht_frequency(&map, &seeds, h.n_iters, &params).map_err(num)?;
    let mut csv = String::from("seed,seed_used,theta,n_times,times\n");
    for r in &freq.records {
        let times: Vec<String> = r.times.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            f(r.seed),
            f(r.seed_used),
            f(r.theta),
            r.times.len(),
            times.join(";")
        );
    }
    Ok(vec![write_file(out, "hyptimes.csv", &csv)?])
}

fn cmd_suspend(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let s = &cfg.suspend;
    if s.n_samples < 1000 {
        return Err(HarnessError::Validation(
            "suspend: n_samples must be at least 1000".into(),
        ));
    }
    if s.n_observables == 0 || s.ts.iter().any(|&t| t < 0.0) {
        return Err(HarnessError::Validation(
            "suspend: need observables and non-negative probe times".into(),
        ));
    }
    let sys = geometric_system(cfg)?;
    let base = SectionReturnBase {
        sys: &sys,
        t_min: 0.0,
    };
    let roof_inf = 0.9 * cfg.geometric.t_loop;
    let susp = Suspension::new(&base, return_time_roof(&sys, 0.0, roof_inf));
    let ingoing = sys.ingoing()[0];
    let mut p = SectionPoint {
        section: ingoing,
        u: 0.3,
        v: 0.61803,
    };
    for _ in 0..s.burn {
        p = sys.first_return(&p, 0.0).map_err(num)?.end;
    }
    let mut samples = Vec::with_capacity(s.n_samples);
    let w = 1.0 / s.n_samples as f64;
    for _ in 0..s.n_samples {
        samples.push((p, w));
        p = sys.first_return(&p, 0.0).map_err(num)?.end;
    }
    let lifted = lift_measure(
        &samples,
        &return_time_roof(&sys, 0.0, roof_inf),
        ROOF_CAP,
        Quadrature::Jittered(cfg.seed ^ 0x5A),
    );
    let phis: Vec<Box<dyn Fn(&SectionPoint, f64) -> f64 + Sync>> = (0..s.n_observables)
        .map(|j| {
            let a = unit_hash(j as f64, cfg.seed ^ 0x31) * 2.0 + 0.5;
            let b = unit_hash(j as f64, cfg.seed ^ 0x32) * 2.0 - 1.0;
            Box::new(move |q: &SectionPoint, t: f64| (a * q.v + b * q.u).sin() * (-t / 4.0).exp())
                as Box<dyn Fn(&SectionPoint, f64) -> f64 + Sync>
        })
        .collect();
    let mut csv = String::from("observable_id,estimate,stderr,n_samples\n");
    for (j, phi) in phis.iter().enumerate() {
        let (est, se) = lifted.eval_with_stderr(phi.as_ref());
        let _ = writeln!(csv, "{j},{},{},{}", f(est), f(se), lifted.n_samples());
    }
    let refs: Vec<&(dyn Fn(&SectionPoint, f64) -> f64 + Sync)> =
        phis.iter().map(|b| b.as_ref()).collect();
    let dev = invariance_test(&susp, &lifted, &refs, &s.ts).map_err(num)?;
    let mut summary = String::from(
        "invariance_deviation,mu_tau,truncated_mass,excluded,n_base_samples\n",
    );
    let _ = writeln!(
        summary,
        "{},{},{},{},{}",
        f(dev),
        f(lifted.mu_tau),
        f(lifted.truncated_mass),
        lifted.excluded,
        samples.len()
    );
    Ok(vec![
        write_file(out, "suspend.csv", &csv)?,
        write_file(out, "suspend_summary.csv", &summary)?,
    ])
}

fn cmd_lyapunov(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let l = &cfg.lyapunov;
    if l.n_seeds == 0 || !(l.t > 0.0) {
        return Err(HarnessError::Validation(
            "lyapunov: need seeds and a positive horizon".into(),
        ));
    }
    let flow = lorenz_flow(cfg);
    let seeds = lorenz_seed_box(l.n_seeds, cfg.seed ^ 0x4C);
    let rep = spectrum_structure(&flow, &seeds, l.t, l.burn).map_err(num)?;
    let mut csv =
        String::from("seed_x,seed_y,seed_z,lambda_1,lambda_2,lambda_3,sum,div_avg,classified\n");
    for s in &rep.per_seed {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            f(s.seed[0]),
            f(s.seed[1]),
            f(s.seed[2]),
            f(s.exponents[0]),
            f(s.exponents[1]),
            f(s.exponents[2]),
            f(s.sum),
            f(s.div_avg),
            s.classified
        );
    }
    Ok(vec![write_file(out, "spectrum.csv", &csv)?])
}

fn cmd_entropy(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let e = &cfg.entropy;
    if e.n_seeds == 0 || !(e.t > 0.0) {
        return Err(HarnessError::Validation(
            "entropy: need seeds and a positive horizon".into(),
        ));
    }
    if e.abramov_returns < 1000 {
        return Err(HarnessError::Validation(
            "entropy: abramov_returns must be at least 1000".into(),
        ));
    }
    let flow = lorenz_flow(cfg);
    let seeds = lorenz_seed_box(e.n_seeds, cfg.seed ^ 0x3E);
    let rep = entropy_formula_check(&flow, &seeds, e.t, e.burn).map_err(num)?;
    let mut csv = String::from(
        "seed_x,seed_y,seed_z,qr,lambda_0,unstable_rate,quality,cu_rate\n",
    );
    for s in &rep.per_seed {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            f(s.seed[0]),
            f(s.seed[1]),
            f(s.seed[2]),
            f(s.exponents[0]),
            f(s.exponents[1]),
            f(s.unstable_rate),
            f(s.quality),
            f(s.cu_rate)
        );
    }
    let mut summary = String::from("qr,unstable,cu_minus_l0,max_pairwise_rel,excluded\n");
    let _ = writeln!(
        summary,
        "{},{},{},{},{}",
        f(rep.qr),
        f(rep.unstable),
        f(rep.cu_minus_l0),
        f(rep.max_pairwise_rel),
        rep.excluded
    );
    let sys = geometric_system(cfg)?;
    let ab = abramov_check(&sys, e.abramov_returns, e.abramov_bins, 200).map_err(num)?;
    let mut abr = String::from(
        "map_exponent_ulam,flow_exponent,mean_tau_ulam,mean_tau_orbit,product,rel_gap,restarts\n",
    );
    let _ = writeln!(
        abr,
        "{},{},{},{},{},{},{}",
        f(ab.map_exponent_ulam),
        f(ab.flow_exponent),
        f(ab.mean_tau_ulam),
        f(ab.mean_tau_orbit),
        f(ab.product),
        f(ab.rel_gap),
        ab.restarts
    );
    Ok(vec![
        write_file(out, "entropy.csv", &csv)?,
        write_file(out, "entropy_summary.csv", &summary)?,
        write_file(out, "abramov.csv", &abr)?,
    ])
}

fn cmd_profile(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let p = &cfg.density_profile;
    if p.bands == 0 || p.bins < 2 {
        return Err(HarnessError::Validation(
            "density-profile: need at least one band and two bins".into(),
        ));
    }
    if p.n_hits < 1000 {
        return Err(HarnessError::Validation(
            "density-profile: n_hits must be at least 1000".into(),
        ));
    }
    let sys = geometric_system(cfg)?;
    let start = SectionPoint {
        section: sys.ingoing()[0],
        u: 0.3,
        v: 0.41,
    };
    let params = ProfileParams {
        n_hits: p.n_hits,
        burn: p.burn,
        n_bands: p.bands,
        bins: p.bins,
        min_hits: (p.n_hits / 2).max(1000),
        ..ProfileParams::default()
    };
    let prof = unstable_density_profile(&sys, start, &params).map_err(num)?;
    let mut csv = String::from("band_id,u_lo,u_hi,v_left,v_right,density\n");
    for (b, band) in prof.bands.iter().enumerate() {
        for (j, d) in band.density.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                b,
                f(band.u_lo),
                f(band.u_hi),
                f(prof.v_edges[j]),
                f(prof.v_edges[j + 1]),
                f(*d)
            );
        }
    }
    for (j, d) in prof.pooled.iter().enumerate() {
        let _ = writeln!(
            csv,
            "-1,0,1,{},{},{}",
            f(prof.v_edges[j]),
            f(prof.v_edges[j + 1]),
            f(*d)
        );
    }
    let mut tau = String::from("v_left,v_right,mean_tau\n");
    for (j, t) in prof.mean_tau.iter().enumerate() {
        let _ = writeln!(tau, "{},{},{}", f(prof.v_edges[j]), f(prof.v_edges[j + 1]), f(*t));
    }
    let mut summary = String::from(
        "gamma_v,near_gamma_density,median_density,sup_density,n_hits,restarts\n",
    );
    let _ = writeln!(
        summary,
        "{},{},{},{},{},{}",
        prof.gamma_v.map(f).unwrap_or_default(),
        f(prof.near_gamma_density),
        f(prof.median_density),
        f(prof.sup_density),
        prof.n_hits_used,
        prof.restarts
    );
    Ok(vec![
        write_file(out, "profile.csv", &csv)?,
        write_file(out, "profile_tau.csv", &tau)?,
        write_file(out, "profile_summary.csv", &summary)?,
    ])
}

fn cmd_expansive(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let e = &cfg.expansive;
    if !(e.epsilon > 0.0) || e.n_pairs == 0 || !(e.t > 0.0) {
        return Err(HarnessError::Validation(
            "expansive: need positive epsilon, pairs, and window".into(),
        ));
    }
    let flow = lorenz_flow(cfg);
    let params = ProbeParams {
        epsilon: e.epsilon,
        n_pairs: e.n_pairs,
        n_controls: e.n_controls,
        t: e.t,
        seed: cfg.seed ^ 0xE7,
        ..ProbeParams::default()
    };
    let rep = expansiveness_probe(&flow, &params).map_err(num)?;
    let mut csv = String::from("delta,n_pairs_close,n_violations\n");
    for (d, n_close, n_viol) in &rep.rows {
        let _ = writeln!(csv, "{},{n_close},{n_viol}", f(*d));
    }
    let mut summary = String::from("delta_hat,epsilon,n_pairs,n_controls,note\n");
    let _ = writeln!(
        summary,
        "{},{},{},{},\"{}\"",
        f(rep.delta_hat),
        f(rep.epsilon),
        e.n_pairs,
        e.n_controls,
        rep.disclaimer
    );
    Ok(vec![
        write_file(out, "expansive.csv", &csv)?,
        write_file(out, "expansive_summary.csv", &summary)?,
    ])
}

fn cmd_sensitivity(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let s = &cfg.sensitivity;
    if !(s.r0 > 0.0 && s.r0 <= 1e-4) {
        return Err(HarnessError::Validation(
            "sensitivity: r0 must lie in (0, 1e-4]".into(),
        ));
    }
    if !(s.delta_s > s.r0) || s.n_perturb == 0 || !(s.t_cap > 0.0) {
        return Err(HarnessError::Validation(
            "sensitivity: need delta_s > r0, perturbations, and a time cap".into(),
        ));
    }
    let flow = lorenz_flow(cfg);
    let ctrl = default_ctrl();
    let x0 = State::new(cfg.simulate.x0[0], cfg.simulate.x0[1], cfg.simulate.x0[2]);
    let burned = flow.flow_to(x0, s.burn.max(1.0), &ctrl).map_err(num)?;
    let lam = flow
        .qr_lyapunov(burned, 300.0, 1.0, &ctrl)
        .map_err(num)?
        .exponents[0];
    if !(lam > 0.0) {
        return Err(HarnessError::Numerical(format!(
            "sensitivity: non-positive top exponent {lam}"
        )));
    }
    let rep = sensitivity_probe(&flow, x0, s.r0, s.delta_s, s.n_perturb, lam, s.t_cap, s.burn)
        .map_err(num)?;
    let mut csv = String::from("perturb_id,separation_time,capped\n");
    for (i, t) in rep.times.iter().enumerate() {
        match t {
            Some(t) => {
                let _ = writeln!(csv, "{i},{},false", f(*t));
            }
            None => {
                let _ = writeln!(csv, "{i},,true");
            }
        }
    }
    let mut summary = String::from("median,predicted,r0,delta_s,lambda_plus,capped,t_cap\n");
    let _ = writeln!(
        summary,
        "{},{},{},{},{},{},{}",
        rep.median.map(f).unwrap_or_default(),
        f(rep.predicted),
        f(rep.r0),
        f(rep.delta_s),
        f(lam),
        rep.capped,
        f(rep.t_cap)
    );
    Ok(vec![
        write_file(out, "sensitivity.csv", &csv)?,
        write_file(out, "sensitivity_summary.csv", &summary)?,
    ])
}
