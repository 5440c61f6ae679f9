use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use taylor_hjb::config::{parse_degrees, parse_scales, study_directions, RunConfig, Setup, Y0Spec};
use taylor_hjb::dynamics::{cost_jp, simulate_closed_loop};
use taylor_hjb::lyapchain::{assemble_r, cache_path, load_or_expand, lyapunov_residual, ExpansionCoeffs};
use taylor_hjb::spectral::riccati_residual;
use taylor_hjb::study::{check_scales, run_study, write_records_csv, write_slopes_csv, StudyPlan};
use taylor_hjb::valuefn::Remainder;
use taylor_hjb::{Result, SymTensor};

pub(crate) fn load(config: &Path) -> Result<(RunConfig, Setup)> {
    let cfg = RunConfig::load(config)?;
    let setup = cfg.setup()?;
    Ok((cfg, setup))
}

pub(crate) fn coefficients(setup: &Setup, cache_dir: &Path, p: usize) -> Result<(ExpansionCoeffs, bool)> {
    let (coeffs, hit) = load_or_expand(cache_dir, &setup.system, p, setup.k0.as_ref())?;
    log::info!(
        "expansion p={p} {} {}",
        if hit { "loaded from" } else { "written to" },
        cache_path(cache_dir, &setup.system, p).display()
    );
    Ok((coeffs, hit))
}

pub fn expand(config: &Path, cache_dir: &Path, p: usize, out: Option<&Path>) -> Result<u8> {
    let (_, setup) = load(config)?;
    let sys = &setup.system;
    let (coeffs, hit) = coefficients(&setup, cache_dir, p)?;
    let q = nalgebra::DMatrix::identity(sys.dim(), sys.dim());
    println!("system {} (dim {}), degree {p}", sys.label, sys.dim());
    println!("cache {}", if hit { "hit" } else { "miss" });
    println!(
        "riccati residual {:e}, closed-loop abscissa {:.6}",
        riccati_residual(&sys.a, &sys.b, &q, sys.alpha, &coeffs.pi),
        coeffs.spectrum.abscissa()
    );
    let mut forms = vec![SymTensor::from_matrix(&coeffs.pi)?];
    for t in &coeffs.tensors {
        let k = t.order();
        let r = assemble_r(k, &forms, &sys.n, &sys.b)?;
        let res = lyapunov_residual(&coeffs.closed_loop, t, &r, sys.alpha, 20, k as u64)?;
        println!("T_{k}: frobenius norm {:e}, lyapunov residual {res:e}", t.frobenius_norm());
        forms.push(t.clone());
    }
    if let Some(out) = out {
        fs::write(out, coeffs.to_cache_json(sys)?)?;
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    config: &Path,
    cache_dir: &Path,
    p: usize,
    y0: &str,
    out: &Path,
    full_state: bool,
    report: Option<&Path>,
) -> Result<u8> {
    let (cfg, setup) = load(config)?;
    let spec: Y0Spec = y0.parse()?;
    let y0 = spec.resolve(&setup)?;
    let (coeffs, _) = coefficients(&setup, cache_dir, p)?;
    let sim = cfg.sim_options(coeffs.spectrum.abscissa());
    let traj = simulate_closed_loop(&setup.system, &coeffs, &y0, &sim)?;
    let remainder = Remainder::new(&coeffs, &setup.system)?;
    let cost = cost_jp(&traj, &setup.system, &coeffs, &remainder, sim.tail_tol_for(&y0))?;
    traj.write_csv(BufWriter::new(File::create(out)?), full_state)?;
    let json = serde_json::to_string_pretty(&cost)?;
    match report {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    if cost.tail_flag {
        log::warn!("trajectory ended above the tail tolerance; the tail estimate is unreliable");
    }
    Ok(0)
}

pub struct StudyArgs {
    pub p: Option<String>,
    pub scales: Option<String>,
    pub directions: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: PathBuf,
    pub slopes: Option<PathBuf>,
}

pub fn study(config: &Path, cache_dir: &Path, args: StudyArgs) -> Result<u8> {
    let (cfg, setup) = load(config)?;
    let degrees = match &args.p {
        Some(s) => parse_degrees(s)?,
        None => cfg.study.p.clone(),
    };
    let scales = match &args.scales {
        Some(s) => parse_scales(s)?,
        None => cfg.study.scales.clone(),
    };
    check_scales(&scales)?;
    let count = args.directions.unwrap_or(cfg.study.directions);
    let seed = args.seed.unwrap_or(cfg.study.seed);
    let pmax = degrees.iter().copied().max().unwrap_or(2);
    let (coeffs, _) = coefficients(&setup, cache_dir, pmax)?;
    let rate = coeffs.spectrum.abscissa();
    let plan = StudyPlan {
        degrees,
        scales,
        directions: study_directions(&setup, count, seed),
        sim: cfg.sim_options(rate),
        oracle: cfg.oracle_options(rate),
        quality: cfg.oracle.quality,
    };
    let output = run_study(&setup, &coeffs, &plan, args.jobs)?;
    write_records_csv(BufWriter::new(File::create(&args.out)?), &output.records)?;
    let slopes_path = args.slopes.unwrap_or_else(|| {
        let mut name = args.out.file_stem().unwrap_or_default().to_os_string();
        name.push(".slopes.csv");
        args.out.with_file_name(name)
    });
    write_slopes_csv(BufWriter::new(File::create(&slopes_path)?), &output.slopes)?;
    println!("seed {seed}; records in {}, slopes in {}", args.out.display(), slopes_path.display());
    for f in &output.slopes {
        let slope = f.slope.map_or("-".to_string(), |s| format!("{s:.3}"));
        println!(
            "p={} {:<16} {:<18} slope {slope:>7} ({} points, {:?})",
            f.p,
            f.direction,
            f.quantity.name(),
            f.points,
            f.status
        );
    }
    Ok(0)
}
