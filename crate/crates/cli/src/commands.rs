//! The six experiment commands. Each validates its schema, builds the model,
//! delegates to the library and writes data files atomically.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use susylab_core::disc::discretize;
use susylab_core::dyncheck::{verify_hypotheses, HypothesisPlan};
use susylab_core::grid::{Axis, Grid};
use susylab_core::potential::{barrier_report, builtin, find_critical_points, ScalarField};
use susylab_core::semigroup::equilibration_report;
use susylab_core::spectral::{
    count_in_disc, eigs_near_zero, projection, splitting_sweep, EigsOptions, SpectralResult,
    SweepConfig, SweepFamily,
};
use susylab_core::stochastic::{
    invariant_distance, make_chain, make_kinetic, make_overdamped, simulate_ensemble,
    transition_statistics, SdeModel, TrajectoryEnsemble,
};
use susylab_core::susy::{assemble_chain, assemble_kfp, assemble_witten, FamilyTag, SusySpec};

use crate::config::{parse_potential_ref, RawConfig, Section, SectionSchema};
use crate::output::OutputDir;
use crate::CliError;

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn num_err(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

// ---------------------------------------------------------------------------
// model assembly

pub struct ModelSetup {
    pub spec: SusySpec,
    pub v: Option<ScalarField>,
    pub chain_parts: Option<(ScalarField, ScalarField, ScalarField)>,
    pub gamma: f64,
    pub h: Option<f64>,
}

fn load_potential(section: &Section, key: &str) -> Result<ScalarField, CliError> {
    let (name, params) = parse_potential_ref(section.str_value(key).map_err(cfg_err)?)
        .map_err(cfg_err)?;
    builtin(&name, &params).map_err(cfg_err)
}

pub fn build_model(cfg: &RawConfig) -> Result<ModelSetup, CliError> {
    let model = Section::of(cfg, "model").map_err(cfg_err)?;
    let family = model.str_value("family").map_err(cfg_err)?;
    let gamma = model.f64_value("gamma").map_err(cfg_err)?;
    let h = model.f64_or("h", f64::NAN).map_err(cfg_err)?;
    let h = if h.is_nan() { None } else { Some(h) };
    match family {
        "witten" => {
            let v = load_potential(&model, "potential")?;
            Ok(ModelSetup {
                spec: assemble_witten(gamma, &v).map_err(num_err)?,
                v: Some(v),
                chain_parts: None,
                gamma,
                h,
            })
        }
        "kfp" => {
            let v = load_potential(&model, "potential")?;
            Ok(ModelSetup {
                spec: assemble_kfp(gamma, &v).map_err(num_err)?,
                v: Some(v),
                chain_parts: None,
                gamma,
                h,
            })
        }
        "chain" => {
            let v1 = load_potential(&model, "potential1")?;
            let v2 = load_potential(&model, "potential2")?;
            let vc = load_potential(&model, "potential_c")?;
            Ok(ModelSetup {
                spec: assemble_chain(gamma, &v1, &v2, &vc).map_err(num_err)?,
                v: None,
                chain_parts: Some((v1, v2, vc)),
                gamma,
                h,
            })
        }
        other => Err(CliError::Config(format!(
            "unknown family `{other}` (expected witten | kfp | chain)"
        ))),
    }
}

fn build_grid(cfg: &RawConfig, dim: usize, h: Option<f64>) -> Result<Grid, CliError> {
    let grid = Section::of(cfg, "grid").map_err(cfg_err)?;
    let bounds = grid.range_list("box").map_err(cfg_err)?;
    if bounds.len() != dim {
        return Err(CliError::Config(format!(
            "grid box has {} axes, operator has {dim}",
            bounds.len()
        )));
    }
    if let Some(ns) = grid.raw("n") {
        let _ = ns;
        let ns = grid.usize_list("n").map_err(cfg_err)?;
        if ns.len() != dim {
            return Err(CliError::Config(format!(
                "grid n has {} axes, operator has {dim}",
                ns.len()
            )));
        }
        let axes = bounds
            .iter()
            .zip(&ns)
            .map(|(&(lo, hi), &n)| Axis::new(lo, hi, n))
            .collect();
        Grid::new(axes).map_err(num_err)
    } else {
        let rule = grid.f64_or("spacing_rule", 5.0).map_err(cfg_err)?;
        let h = h.ok_or_else(|| {
            CliError::Config("grid spacing_rule needs `h` in [model]".to_string())
        })?;
        Grid::from_spacing(&bounds, h / rule).map_err(num_err)
    }
}

fn solver_options(cfg: &RawConfig, seed_override: Option<u64>) -> Result<EigsOptions, CliError> {
    let s = Section::of(cfg, "solver").map_err(cfg_err)?;
    Ok(EigsOptions {
        k: s.usize_or("k", 4).map_err(cfg_err)?,
        tol: s.f64_or("tol", 1e-12).map_err(cfg_err)?,
        max_restarts: s.usize_or("max_restarts", 8).map_err(cfg_err)?,
        seed: seed_override.unwrap_or(s.u64_or("seed", 42).map_err(cfg_err)?),
        compute_left: true,
    })
}

const MODEL_KEYS: SectionSchema = SectionSchema {
    name: "model",
    mandatory: true,
    required: &["family", "gamma"],
    optional: &[
        "potential",
        "potential1",
        "potential2",
        "potential_c",
        "h",
        "temperature",
        "t1",
        "t2",
    ],
};

const OUTPUT_KEYS: SectionSchema = SectionSchema {
    name: "output",
    mandatory: true,
    required: &["dir"],
    optional: &[],
};

const GRID_KEYS: SectionSchema = SectionSchema {
    name: "grid",
    mandatory: true,
    required: &["box"],
    optional: &["n", "spacing_rule"],
};

const SOLVER_KEYS: SectionSchema = SectionSchema {
    name: "solver",
    mandatory: true,
    required: &[],
    optional: &["k", "tol", "max_restarts", "seed"],
};

pub fn out_dir(cfg: &RawConfig, override_dir: Option<&Path>) -> Result<OutputDir, CliError> {
    let dir = match override_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let out = Section::of(cfg, "output").map_err(cfg_err)?;
            out.str_value("dir").map_err(cfg_err)?.into()
        }
    };
    OutputDir::create(&dir, &cfg.hash)
}

// ---------------------------------------------------------------------------
// analyze-potential

pub fn cmd_analyze_potential(cfg: &RawConfig, out: &OutputDir) -> Result<(), CliError> {
    cfg.validate(&[MODEL_KEYS, GRID_KEYS, OUTPUT_KEYS]).map_err(cfg_err)?;
    let setup = build_model(cfg)?;
    let grid = Section::of(cfg, "grid").map_err(cfg_err)?;
    let bounds = grid.range_list("box").map_err(cfg_err)?;
    if bounds.len() != setup.spec.dim {
        return Err(CliError::Config(format!(
            "grid box has {} axes, phase has {}",
            bounds.len(),
            setup.spec.dim
        )));
    }
    let seeds = if setup.spec.dim > 2 { 3 } else { 50 };
    let search = find_critical_points(&setup.spec.phase, &bounds, seeds, 1e-10, 1e-6)
        .map_err(num_err)?;
    let report = barrier_report(&search.points);
    out.write_json(
        "critical_points.json",
        json!({
            "report": report,
            "seed_failures": search.seed_failures,
        }),
    )?;
    out.write_run_meta("analyze-potential")
}

// ---------------------------------------------------------------------------
// spectrum

fn spectrum_csv(out: &OutputDir, name: &str, res: &SpectralResult) -> Result<(), CliError> {
    let rows: Vec<Vec<f64>> = res
        .eigenvalues
        .iter()
        .zip(&res.residuals)
        .enumerate()
        .map(|(i, (l, r))| vec![res.h, l.re, l.im, *r, i as f64])
        .collect();
    out.write_csv(name, "h,re_mu,im_mu,residual,index", &rows)
}

pub fn cmd_spectrum(
    cfg: &RawConfig,
    out: &OutputDir,
    seed: Option<u64>,
) -> Result<(), CliError> {
    cfg.validate(&[MODEL_KEYS, GRID_KEYS, SOLVER_KEYS, OUTPUT_KEYS])
        .map_err(cfg_err)?;
    let setup = build_model(cfg)?;
    let h = setup
        .h
        .ok_or_else(|| CliError::Config("spectrum needs `h` in [model]".into()))?;
    let grid = build_grid(cfg, setup.spec.dim, setup.h)?;
    let op = discretize(&setup.spec, &grid, h).map_err(num_err)?;
    let opts = solver_options(cfg, seed)?;
    let res = eigs_near_zero(&op, &opts).map_err(num_err)?;
    spectrum_csv(out, "spectrum.csv", &res)?;

    // counts over the radius ladder h/4, h/10, h/40 and projector norms for
    // the eigenvalues inside h/4
    let mut counts = Vec::new();
    for divisor in [4.0, 10.0, 40.0] {
        let radius = h / divisor;
        match count_in_disc(&res, radius) {
            Ok(c) => counts.push(json!({
                "radius": radius,
                "count": c.count,
                "gap_margin": c.gap_margin,
            })),
            Err(e) => counts.push(json!({
                "radius": radius,
                "error": e.to_string(),
            })),
        }
    }
    let metastable: Vec<usize> = res
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, l)| l.norm() < h / 4.0)
        .map(|(i, _)| i)
        .collect();
    let mut projector_norms = Vec::new();
    for &i in &metastable {
        let p = projection(&res, &[i]).map_err(num_err)?;
        projector_norms.push(json!({
            "index": i,
            "eigenvalue": { "re": res.eigenvalues[i].re, "im": res.eigenvalues[i].im },
            "operator_norm": p.operator_norm_estimate,
        }));
    }
    out.write_json(
        "projectors.json",
        json!({
            "h": h,
            "counts": counts,
            "metastable_indices": metastable,
            "projector_norms": projector_norms,
        }),
    )?;
    out.write_run_meta("spectrum")
}

// ---------------------------------------------------------------------------
// splitting

pub fn cmd_splitting(
    cfg: &RawConfig,
    out: &OutputDir,
    seed: Option<u64>,
) -> Result<(), CliError> {
    cfg.validate(&[
        MODEL_KEYS,
        GRID_KEYS,
        SectionSchema {
            name: "sweep",
            mandatory: true,
            required: &["h_values"],
            optional: &["v_box"],
        },
        SOLVER_KEYS,
        OUTPUT_KEYS,
    ])
    .map_err(cfg_err)?;
    let setup = build_model(cfg)?;
    let v = setup
        .v
        .clone()
        .ok_or_else(|| CliError::Config("splitting needs a witten or kfp model".into()))?;
    let family = match setup.spec.family {
        FamilyTag::Witten => SweepFamily::Witten,
        FamilyTag::Kfp => SweepFamily::Kfp,
        other => {
            return Err(CliError::Config(format!(
                "splitting sweep unsupported for {other:?}"
            )))
        }
    };
    let grid = Section::of(cfg, "grid").map_err(cfg_err)?;
    let grid_bounds = grid.range_list("box").map_err(cfg_err)?;
    let spacing_rule = grid.f64_or("spacing_rule", 5.0).map_err(cfg_err)?;
    let sweep = Section::of(cfg, "sweep").map_err(cfg_err)?;
    let h_values = sweep.f64_list("h_values").map_err(cfg_err)?;
    let v_bounds = match sweep.raw("v_box") {
        Some(_) => sweep.range_list("v_box").map_err(cfg_err)?,
        None => grid_bounds[..v.dim()].to_vec(),
    };
    let opts = solver_options(cfg, seed)?;
    let sweep_cfg = SweepConfig {
        family,
        gamma: setup.gamma,
        v,
        v_bounds,
        grid_bounds,
        spacing_rule,
        k: opts.k,
        tol: opts.tol,
        max_restarts: opts.max_restarts,
        seed: opts.seed,
    };
    let fit = splitting_sweep(&sweep_cfg, &h_values).map_err(num_err)?;
    let rows: Vec<Vec<f64>> = fit
        .samples
        .iter()
        .zip(&fit.prefactors)
        .map(|(&(h, mu), &a)| vec![h, mu, (mu / h).ln(), a])
        .collect();
    out.write_csv("splitting.csv", "h,mu1,ln_mu1_over_h,prefactor", &rows)?;
    out.write_json(
        "splitting.json",
        serde_json::to_value(&fit).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    out.write_run_meta("splitting")
}

// ---------------------------------------------------------------------------
// evolve

pub fn cmd_evolve(cfg: &RawConfig, out: &OutputDir, seed: Option<u64>) -> Result<(), CliError> {
    cfg.validate(&[
        MODEL_KEYS,
        GRID_KEYS,
        SOLVER_KEYS,
        SectionSchema {
            name: "evolution",
            mandatory: true,
            required: &["t_end", "dt"],
            optional: &["samples"],
        },
        OUTPUT_KEYS,
    ])
    .map_err(cfg_err)?;
    let setup = build_model(cfg)?;
    let h = setup
        .h
        .ok_or_else(|| CliError::Config("evolve needs `h` in [model]".into()))?;
    let grid = build_grid(cfg, setup.spec.dim, setup.h)?;
    let op = discretize(&setup.spec, &grid, h).map_err(num_err)?;
    let opts = solver_options(cfg, seed)?;
    let res = eigs_near_zero(&op, &opts).map_err(num_err)?;
    let metastable: Vec<usize> = res
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, l)| l.norm() < h / 4.0)
        .map(|(i, _)| i)
        .collect();

    let evo = Section::of(cfg, "evolution").map_err(cfg_err)?;
    let t_end = evo.f64_value("t_end").map_err(cfg_err)?;
    let dt = evo.f64_value("dt").map_err(cfg_err)?;
    let samples = evo.usize_or("samples", 100).map_err(cfg_err)?;
    let times: Vec<f64> = (0..=samples)
        .map(|i| t_end * i as f64 / samples as f64)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xE0);
    let mut u0: Vec<f64> = (0..op.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = u0.iter().map(|x| x * x).sum::<f64>().sqrt();
    u0.iter_mut().for_each(|x| *x /= n0);

    let report = equilibration_report(&op, &res, &metastable, &u0, &times, dt).map_err(num_err)?;
    let rows: Vec<Vec<f64>> = report
        .times
        .iter()
        .zip(report.remainder_norms.iter().zip(&report.state_norms))
        .map(|(&t, (&r, &s))| vec![t, r, s])
        .collect();
    out.write_csv("evolution.csv", "t,remainder_norm,state_norm", &rows)?;
    out.write_json(
        "evolution.json",
        json!({
            "fitted_rate": report.fitted_rate,
            "gap": report.gap,
            "ratio": report.ratio,
            "dt": report.dt_used,
            "monotone_after_transient": report.monotone_after_transient,
            "metastable_indices": metastable,
        }),
    )?;
    out.write_run_meta("evolve")
}

// ---------------------------------------------------------------------------
// sde

fn build_sde_model(cfg: &RawConfig, setup: &ModelSetup) -> Result<SdeModel, CliError> {
    let model = Section::of(cfg, "model").map_err(cfg_err)?;
    match setup.spec.family {
        FamilyTag::Witten => {
            let t = model.f64_value("temperature").map_err(cfg_err)?;
            make_overdamped(setup.v.as_ref().unwrap(), setup.gamma, t).map_err(num_err)
        }
        FamilyTag::Kfp => {
            let t = model.f64_value("temperature").map_err(cfg_err)?;
            make_kinetic(setup.v.as_ref().unwrap(), setup.gamma, t).map_err(num_err)
        }
        FamilyTag::Chain => {
            let t1 = model.f64_value("t1").map_err(cfg_err)?;
            let t2 = model.f64_value("t2").map_err(cfg_err)?;
            let (v1, v2, vc) = setup.chain_parts.as_ref().unwrap();
            make_chain(v1, v2, vc, setup.gamma, t1, t2).map_err(num_err)
        }
        FamilyTag::Custom => Err(CliError::Config("no SDE for custom specs".into())),
    }
}

fn write_ensemble_binary(out: &OutputDir, ens: &TrajectoryEnsemble) -> Result<(), CliError> {
    // flat little-endian layout: magic, version, dims, then times and states
    let mut bytes = Vec::with_capacity(64 + 8 * ens.data.len());
    bytes.extend_from_slice(b"SLEN");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    for v in [
        ens.dim as u64,
        ens.n_traj as u64,
        ens.n_snapshots() as u64,
        ens.seed,
        ens.stride as u64,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&ens.dt.to_le_bytes());
    bytes.extend_from_slice(&ens.t_end.to_le_bytes());
    for t in &ens.snapshot_times {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    for v in &ens.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_atomic("ensemble.bin", &bytes)?;
    out.write_json(
        "ensemble.json",
        json!({
            "format": "SLEN v1: header (magic, u32 version, u64 dim/n_traj/n_snapshots/seed/stride, f64 dt/t_end), then snapshot times and row-major [traj][snapshot][component] states, all little-endian f64",
            "dim": ens.dim,
            "n_traj": ens.n_traj,
            "n_snapshots": ens.n_snapshots(),
            "seed": ens.seed,
            "stride": ens.stride,
            "dt": ens.dt,
            "t_end": ens.t_end,
        }),
    )
}

pub fn cmd_sde(cfg: &RawConfig, out: &OutputDir, seed: Option<u64>) -> Result<(), CliError> {
    cfg.validate(&[
        MODEL_KEYS,
        SectionSchema {
            name: "sde",
            mandatory: true,
            required: &["n_traj", "dt", "t_end", "initial"],
            optional: &[
                "seed",
                "stride",
                "burn_in",
                "tasks",
                "axes",
                "bins",
                "hist_box",
                "tube_radius",
                "wells_box",
            ],
        },
        OUTPUT_KEYS,
    ])
    .map_err(cfg_err)?;
    let setup = build_model(cfg)?;
    let model = build_sde_model(cfg, &setup)?;
    let sde = Section::of(cfg, "sde").map_err(cfg_err)?;
    let n_traj = sde.usize_value("n_traj").map_err(cfg_err)?;
    let dt = sde.f64_value("dt").map_err(cfg_err)?;
    let t_end = sde.f64_value("t_end").map_err(cfg_err)?;
    let stride = sde.usize_or("stride", 100).map_err(cfg_err)?;
    let burn_in = sde.f64_or("burn_in", 0.5).map_err(cfg_err)?;
    let sde_seed = seed.unwrap_or(sde.u64_or("seed", 7).map_err(cfg_err)?);
    let initial = sde.f64_list("initial").map_err(cfg_err)?;
    let ens = simulate_ensemble(&model, &initial, n_traj, t_end, dt, sde_seed, stride)
        .map_err(num_err)?;
    write_ensemble_binary(out, &ens)?;

    let tasks: Vec<String> = sde
        .raw("tasks")
        .unwrap_or("invariant")
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();

    for task in &tasks {
        match task.as_str() {
            "invariant" => {
                let axes = sde.usize_list("axes").map_err(cfg_err)?;
                let bins = sde.usize_or("bins", 50).map_err(cfg_err)?;
                let bounds = sde.range_list("hist_box").map_err(cfg_err)?;
                let h = setup
                    .h
                    .ok_or_else(|| CliError::Config("invariant task needs `h` in [model]".into()))?;
                let tv = invariant_distance(&ens, &setup.spec, h, &axes, bins, &bounds, burn_in)
                    .map_err(num_err)?;
                out.write_json(
                    "invariant.json",
                    json!({
                        "tv_distance": tv,
                        "axes": axes,
                        "bins": bins,
                        "burn_in": burn_in,
                    }),
                )?;
            }
            "transition" => {
                let v = setup.v.as_ref().ok_or_else(|| {
                    CliError::Config("transition task needs a scalar potential".into())
                })?;
                let wells_box = match sde.raw("wells_box") {
                    Some(_) => sde.range_list("wells_box").map_err(cfg_err)?,
                    None => vec![(-2.0, 2.0); v.dim()],
                };
                let crit = find_critical_points(v, &wells_box, 40, 1e-10, 1e-6).map_err(num_err)?;
                let report = barrier_report(&crit.points);
                let r = sde.f64_or("tube_radius", 0.3).map_err(cfg_err)?;
                let stats = transition_statistics(&ens, &report, r).map_err(num_err)?;
                out.write_json(
                    "transitions.json",
                    json!({
                        "stats": stats,
                        "tube_radius": r,
                        "barrier": report.min_barrier(),
                    }),
                )?;
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown sde task `{other}` (expected invariant | transition)"
                )))
            }
        }
    }
    out.write_run_meta("sde")
}

// ---------------------------------------------------------------------------
// check-hypotheses

pub fn cmd_check_hypotheses(
    cfg: &RawConfig,
    out: &OutputDir,
    seed: Option<u64>,
) -> Result<(), CliError> {
    cfg.validate(&[
        MODEL_KEYS,
        SectionSchema {
            name: "dyncheck",
            mandatory: true,
            required: &["t0", "radii", "crit_box", "far_box"],
            optional: &[
                "sphere_samples",
                "ratio_c",
                "crit_seeds",
                "far_samples",
                "far_floor",
                "exclusion_radius",
                "measure_threshold",
                "measure_floor",
                "measure_base_points",
                "measure_time_samples",
                "seed",
            ],
        },
        OUTPUT_KEYS,
    ])
    .map_err(cfg_err)?;
    let setup = build_model(cfg)?;
    let dc = Section::of(cfg, "dyncheck").map_err(cfg_err)?;
    let crit_bounds = dc.range_list("crit_box").map_err(cfg_err)?;
    let far_bounds = dc.range_list("far_box").map_err(cfg_err)?;
    if crit_bounds.len() != setup.spec.dim || far_bounds.len() != 2 * setup.spec.dim {
        return Err(CliError::Config(format!(
            "dyncheck boxes: crit_box needs {} axes and far_box {}",
            setup.spec.dim,
            2 * setup.spec.dim
        )));
    }
    let plan = HypothesisPlan {
        t0: dc.f64_value("t0").map_err(cfg_err)?,
        radii: dc.f64_list("radii").map_err(cfg_err)?,
        sphere_samples: dc.usize_or("sphere_samples", 40).map_err(cfg_err)?,
        ratio_c: dc.f64_or("ratio_c", 50.0).map_err(cfg_err)?,
        crit_bounds,
        crit_seeds_per_axis: dc
            .usize_or("crit_seeds", if setup.spec.dim > 2 { 3 } else { 8 })
            .map_err(cfg_err)?,
        far_bounds,
        far_samples: dc.usize_or("far_samples", 60).map_err(cfg_err)?,
        far_floor: dc.f64_or("far_floor", 1e-3).map_err(cfg_err)?,
        exclusion_radius: dc.f64_or("exclusion_radius", 0.25).map_err(cfg_err)?,
        measure_threshold: dc.f64_or("measure_threshold", 1e-3).map_err(cfg_err)?,
        measure_floor: dc.f64_or("measure_floor", 1e-3).map_err(cfg_err)?,
        measure_base_points: dc.usize_or("measure_base_points", 12).map_err(cfg_err)?,
        measure_time_samples: dc.usize_or("measure_time_samples", 101).map_err(cfg_err)?,
        seed: seed.unwrap_or(dc.u64_or("seed", 42).map_err(cfg_err)?),
    };
    let report = verify_hypotheses(&setup.spec, &plan);
    out.write_json(
        "hypotheses.json",
        serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    out.write_run_meta("check-hypotheses")
}
