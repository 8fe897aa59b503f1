//! The experiment pipelines behind the subcommands. Stages fail softly:
//! artifacts of completed stages are kept and failures are recorded in the
//! report, per-beta where a single temperature is at fault (e.g. a critical
//! beta for the two-overlap limit).

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};

use igff::acceptance;
use igff::analytics::build_speed_profile;
use igff::field::FieldContext;
use igff::gibbs::{empirical_two_overlap_cdf, GibbsEnsemble, McEstimate, TwoOverlapCdf};
use igff::rpc::{
    cascade_gg_check, cascade_two_overlap_atoms, match_field_to_cascade,
    poisson_dirichlet_moments, CascadeFunctional, CascadeParams, PairTable,
};
use igff::seed::derive_seed;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::report::{float_tag, read_float_csv, write_csv, CsvCell, RunReport, StageReport, Timings};

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<bool> {
    let out_dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(out_dir).with_context(|| format!("creating {out_dir:?}"))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let mut report = RunReport::new(cfg);
    let mut timings = Timings::new();
    match cfg.kind {
        ExperimentKind::Analytics => {
            run_stage(&mut report, &mut timings, "analytics", || {
                stage_analytics(cfg, out_dir)
            });
        }
        ExperimentKind::Simulate => {
            run_stage(&mut report, &mut timings, "simulate", || {
                stage_simulate(cfg, out_dir)
            });
        }
        ExperimentKind::Rpc => {
            run_stage(&mut report, &mut timings, "rpc", || stage_rpc(cfg, out_dir));
        }
        ExperimentKind::Verify => {
            let t = Instant::now();
            let gates = acceptance::run_all();
            for g in &gates {
                println!("{}", g.line());
            }
            timings.record("verify", t.elapsed().as_secs_f64());
            report.gates = Some(gates);
        }
    }
    report.write(out_dir)?;
    timings.write(out_dir)?;
    Ok(report.all_ok())
}

fn run_stage(
    report: &mut RunReport,
    timings: &mut Timings,
    name: &str,
    body: impl FnOnce() -> Result<StageReport>,
) {
    let t = Instant::now();
    let stage = match body() {
        Ok(s) => s,
        Err(e) => StageReport {
            name: name.into(),
            ok: false,
            artifacts: vec![],
            notes: vec![],
            error: Some(format!("{e:#}")),
        },
    };
    timings.record(name, t.elapsed().as_secs_f64());
    report.stages.push(stage);
}

fn stage_analytics(cfg: &ExperimentConfig, out: &Path) -> Result<StageReport> {
    let params = cfg.field_params()?;
    let profile = build_speed_profile(&params);
    let mut artifacts = Vec::new();
    let mut notes = Vec::new();

    let mut grid: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
    grid.extend_from_slice(params.lambda());
    grid.extend_from_slice(profile.eff_scales());
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    artifacts.push(write_csv(
        out,
        "speed_profile.csv",
        "s,speed,hull",
        grid.iter().map(|&s| {
            vec![
                CsvCell::Float(s),
                CsvCell::Float(profile.speed(s)),
                CsvCell::Float(profile.hull(s)),
            ]
        }),
    )?);

    let levels = profile.critical_levels();
    artifacts.push(write_csv(
        out,
        "critical_levels.csv",
        "level,gamma",
        levels
            .iter()
            .enumerate()
            .map(|(l, &g)| vec![CsvCell::UInt(l as u64), CsvCell::Float(g)]),
    )?);

    let gs = profile.gamma_star();
    artifacts.push(write_csv(
        out,
        "entropy.csv",
        "gamma,entropy",
        (0..=200).map(|k| {
            let g = gs * k as f64 / 200.0;
            vec![
                CsvCell::Float(g),
                CsvCell::Float(profile.entropy(g).unwrap()),
            ]
        }),
    )?);

    artifacts.push(write_csv(
        out,
        "free_energy.csv",
        "beta,l_beta,free_energy,free_energy_split,argmax_gamma,max_value",
        cfg.betas.iter().map(|&beta| {
            let (gbar, fmax) = profile.free_energy_by_maximization(beta);
            vec![
                CsvCell::Float(beta),
                CsvCell::UInt(profile.l_beta(beta) as u64),
                CsvCell::Float(profile.free_energy(beta)),
                CsvCell::Float(profile.free_energy_split(beta)),
                CsvCell::Float(gbar),
                CsvCell::Float(fmax),
            ]
        }),
    )?);

    let mut atom_rows = Vec::new();
    let mut rpc_params = Vec::new();
    for &beta in &cfg.betas {
        match profile.limit_law(beta) {
            Ok(law) => {
                let mut cum = 0.0;
                for &(q, mass) in law.atoms() {
                    cum += mass;
                    atom_rows.push(vec![
                        CsvCell::Float(beta),
                        CsvCell::Float(q),
                        CsvCell::Float(mass),
                        CsvCell::Float(cum),
                    ]);
                }
                rpc_params.push(serde_json::json!({
                    "beta": beta,
                    "levels": law.rpc.levels,
                    "zetas": law.rpc.zetas,
                    "qs": law.rpc.qs,
                }));
            }
            Err(e) => notes.push(format!("beta {beta}: {e}")),
        }
    }
    artifacts.push(write_csv(
        out,
        "two_overlap_closed.csv",
        "beta,atom,mass,cdf",
        atom_rows,
    )?);
    fs::write(
        out.join("rpc_params.json"),
        serde_json::to_string_pretty(&rpc_params)?,
    )?;
    artifacts.push("rpc_params.json".into());

    Ok(StageReport {
        name: "analytics".into(),
        ok: true,
        artifacts,
        notes,
        error: None,
    })
}

/// Overlap grid for the empirical distribution: the closed-form atoms, the
/// midpoints between them, and a coarse uniform background.
fn overlap_grid(atoms: &[(f64, f64)]) -> Vec<f64> {
    let mut grid = vec![-0.1, 1.0];
    for k in 0..10 {
        grid.push(k as f64 / 10.0);
    }
    for (j, &(q, _)) in atoms.iter().enumerate() {
        grid.push(q);
        if j + 1 < atoms.len() {
            grid.push(0.5 * (q + atoms[j + 1].0));
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    grid
}

fn stage_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<StageReport> {
    let params = cfg.field_params()?;
    let profile = build_speed_profile(&params);
    let mut artifacts = Vec::new();
    let mut notes = Vec::new();
    let mut summary = Vec::new();
    for &n in &cfg.ns {
        let ctx = FieldContext::new(n, &params, &[])?;
        for &beta in &cfg.betas {
            let tag = format!("n{n}_b{}", float_tag(beta));
            let mut rows = Vec::new();
            let mut f_vals = Vec::new();
            let mut masses = Vec::new();
            for i in 0..cfg.field_samples as u64 {
                let seed = derive_seed(cfg.master_seed, "sim-field", &[n as u64, i]);
                let sample = ctx.sample(seed);
                let ens = GibbsEnsemble::new(n, &sample.psi, beta)?;
                let f_rho = match ens.clone().restrict(&sample.psi, cfg.rho) {
                    Ok(r) => r.restricted().unwrap().f_n_rho,
                    Err(_) => f64::NAN,
                };
                masses.push(ens.mass_outside(cfg.rho));
                f_vals.push(ens.f_n);
                rows.push(vec![
                    CsvCell::UInt(seed),
                    CsvCell::UInt(n as u64),
                    CsvCell::Float(beta),
                    CsvCell::Float(ens.f_n),
                    CsvCell::Float(f_rho),
                    CsvCell::Float(ens.max_psi),
                ]);
            }
            artifacts.push(write_csv(
                out,
                &format!("fn_samples_{tag}.csv"),
                "seed,n,beta,f_n,f_n_rho,max_psi",
                rows,
            )?);
            let f_est = McEstimate::from_values(&f_vals, cfg.master_seed);
            let mass_est = McEstimate::from_values(&masses, cfg.master_seed);
            let mut sorted = f_vals.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            summary.push(serde_json::json!({
                "n": n,
                "beta": beta,
                "f_limit": profile.free_energy(beta),
                "f_mean": f_est.mean,
                "f_se": f_est.standard_error,
                "f_median": sorted[sorted.len() / 2],
                "boundary_mass_mean": mass_est.mean,
                "boundary_mass_se": mass_est.standard_error,
                "rho": cfg.rho,
                "samples": cfg.field_samples,
            }));
            match profile.limit_law(beta) {
                Ok(law) => {
                    let grid = overlap_grid(law.atoms());
                    let cdf = empirical_two_overlap_cdf(
                        &ctx,
                        beta,
                        1.0,
                        &grid,
                        cfg.field_samples,
                        cfg.replicas,
                        derive_seed(cfg.master_seed, "sim-tod", &[n as u64]),
                    )?;
                    artifacts.push(write_csv(
                        out,
                        &format!("two_overlap_cdf_{tag}.csv"),
                        "r,cdf,se",
                        cdf.r_grid.iter().zip(&cdf.cdf).zip(&cdf.standard_error).map(
                            |((&r, &c), &s)| {
                                vec![CsvCell::Float(r), CsvCell::Float(c), CsvCell::Float(s)]
                            },
                        ),
                    )?);
                }
                Err(e) => notes.push(format!("two-overlap cdf at n {n}, beta {beta}: {e}")),
            }
        }
    }
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    artifacts.push("summary.json".into());
    Ok(StageReport {
        name: "simulate".into(),
        ok: true,
        artifacts,
        notes,
        error: None,
    })
}

fn stage_rpc(cfg: &ExperimentConfig, out: &Path) -> Result<StageReport> {
    let params = cfg.field_params()?;
    let profile = build_speed_profile(&params);
    let mut artifacts = Vec::new();
    let mut notes = Vec::new();
    for (bi, &beta) in cfg.betas.iter().enumerate() {
        let tag = format!("b{}", float_tag(beta));
        let law = match profile.limit_law(beta) {
            Ok(l) => l,
            Err(e) => {
                notes.push(format!("beta {beta}: {e}"));
                continue;
            }
        };
        if law.rpc.levels == 0 {
            notes.push(format!(
                "beta {beta}: zero-level cascade (single atom at 0), nothing to sample"
            ));
            continue;
        }
        let cascade = CascadeParams::from_limit_law(&law.rpc, cfg.rpc.truncation)?;
        let atoms = cascade_two_overlap_atoms(
            &cascade,
            cfg.rpc.trees,
            cfg.rpc.pairs_per_tree,
            derive_seed(cfg.master_seed, "rpc-atoms", &[bi as u64]),
        );
        artifacts.push(write_csv(
            out,
            &format!("rpc_atoms_{tag}.csv"),
            "q,closed_mass,estimate,se",
            law.atoms().iter().zip(&atoms.mass).map(|(&(q, mass), est)| {
                vec![
                    CsvCell::Float(q),
                    CsvCell::Float(mass),
                    CsvCell::Float(est.mean),
                    CsvCell::Float(est.standard_error),
                ]
            }),
        )?);
        let indicator = vec![0.0, 1.0]
            .into_iter()
            .chain(std::iter::repeat(1.0))
            .take(cascade.levels + 1)
            .collect::<Vec<f64>>();
        let f = CascadeFunctional {
            s: 2,
            k: 0,
            g_by_depth: indicator.clone(),
            h_factors: vec![PairTable {
                i: 0,
                j: 1,
                by_depth: indicator,
            }],
        };
        let gg = cascade_gg_check(
            &cascade,
            &f,
            cfg.rpc.trees,
            cfg.rpc.tuples_per_tree,
            derive_seed(cfg.master_seed, "rpc-gg", &[bi as u64]),
        )?;
        let moments = poisson_dirichlet_moments(
            &cascade,
            cfg.rpc.trees,
            derive_seed(cfg.master_seed, "rpc-pd", &[bi as u64]),
        );
        let checks = serde_json::json!({
            "beta": beta,
            "gg_residual": gg,
            "pd_moments": moments,
            "pd_targets": cascade.zetas.iter().map(|z| 1.0 - z).collect::<Vec<f64>>(),
        });
        let name = format!("rpc_checks_{tag}.json");
        fs::write(out.join(&name), serde_json::to_string_pretty(&checks)?)?;
        artifacts.push(name);
        // three-way match when a field CDF artifact is available
        if let Some(&n) = cfg.ns.iter().max() {
            let field_path = out.join(format!("two_overlap_cdf_n{n}_{tag}.csv"));
            if field_path.exists() {
                let rows = read_float_csv(&field_path)?;
                let field = TwoOverlapCdf {
                    n,
                    beta,
                    rho: 1.0,
                    r_grid: rows.iter().map(|r| r[0]).collect(),
                    cdf: rows.iter().map(|r| r[1]).collect(),
                    standard_error: rows.iter().map(|r| r[2]).collect(),
                    sample_count: cfg.field_samples,
                    seed: cfg.master_seed,
                };
                let report = match_field_to_cascade(&field, &law, &atoms);
                let name = format!("match_{tag}.json");
                fs::write(out.join(&name), serde_json::to_string_pretty(&report)?)?;
                artifacts.push(name);
            } else {
                notes.push(format!(
                    "no field CDF artifact for n {n}, beta {beta}; three-way match skipped"
                ));
            }
        }
    }
    Ok(StageReport {
        name: "rpc".into(),
        ok: true,
        artifacts,
        notes,
        error: None,
    })
}

pub fn run_plotdata(cfg: &ExperimentConfig) -> Result<bool> {
    let out = Path::new(&cfg.out_dir);
    fs::create_dir_all(out)?;
    let params = cfg.field_params()?;
    let profile = build_speed_profile(&params);
    let mut artifacts = Vec::new();
    let mut notes = Vec::new();

    let mut grid: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
    grid.extend_from_slice(params.lambda());
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    artifacts.push(write_csv(
        out,
        "fig_speed.csv",
        "s,speed,hull",
        grid.iter().map(|&s| {
            vec![
                CsvCell::Float(s),
                CsvCell::Float(profile.speed(s)),
                CsvCell::Float(profile.hull(s)),
            ]
        }),
    )?);

    if cfg.betas.is_empty() {
        notes.push("empty beta list: no overlap-distribution figures".into());
    }
    for &beta in &cfg.betas {
        let tag = float_tag(beta);
        // free-energy figure from the per-sample artifacts
        let mut fe_rows = Vec::new();
        for &n in &cfg.ns {
            let path = out.join(format!("fn_samples_n{n}_b{tag}.csv"));
            if !path.exists() {
                continue;
            }
            let rows = read_float_csv(&path)?;
            let mut fs_col: Vec<f64> = rows.iter().map(|r| r[3]).collect();
            fs_col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if fs_col.is_empty() {
                continue;
            }
            fe_rows.push(vec![
                CsvCell::UInt(n as u64),
                CsvCell::Float(fs_col[fs_col.len() / 2]),
                CsvCell::Float(profile.free_energy(beta)),
            ]);
        }
        if fe_rows.is_empty() {
            notes.push(format!("beta {beta}: no free-energy samples found"));
        } else {
            artifacts.push(write_csv(
                out,
                &format!("fig_free_energy_b{tag}.csv"),
                "n,f_median,f_limit",
                fe_rows,
            )?);
        }
        // overlap CDF figure: field + cascade + closed form
        let Ok(law) = profile.limit_law(beta) else {
            notes.push(format!("beta {beta}: critical, no overlap figure"));
            continue;
        };
        let field_path = cfg
            .ns
            .iter()
            .max()
            .map(|&n| out.join(format!("two_overlap_cdf_n{n}_b{tag}.csv")));
        let Some(field_path) = field_path.filter(|p| p.exists()) else {
            notes.push(format!("beta {beta}: no field CDF artifact"));
            continue;
        };
        let field_rows = read_float_csv(&field_path)?;
        let rpc_path = out.join(format!("rpc_atoms_b{tag}.csv"));
        let rpc_rows = if rpc_path.exists() {
            Some(read_float_csv(&rpc_path)?)
        } else {
            None
        };
        let rpc_cdf = |r: f64| -> f64 {
            match &rpc_rows {
                Some(rows) => rows
                    .iter()
                    .filter(|row| row[0] <= r)
                    .map(|row| row[2])
                    .sum(),
                None => f64::NAN,
            }
        };
        artifacts.push(write_csv(
            out,
            &format!("fig_overlap_cdf_b{tag}.csv"),
            "r,cdf_field,cdf_rpc,cdf_closed",
            field_rows.iter().map(|row| {
                vec![
                    CsvCell::Float(row[0]),
                    CsvCell::Float(row[1]),
                    CsvCell::Float(rpc_cdf(row[0])),
                    CsvCell::Float(law.cdf(row[0])),
                ]
            }),
        )?);
    }
    let report = serde_json::json!({
        "artifacts": artifacts,
        "notes": notes,
    });
    fs::write(
        out.join("plotdata_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(true)
}
