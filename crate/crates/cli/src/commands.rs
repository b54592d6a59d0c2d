//! One function per subcommand. Each writes CSV/JSON artifacts through [`Outputs`].

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use spinchern::dynamics::{
    chern_dynamical, fmt_f64, prepare_ground, quench_convergence, DynamicalOptions, Preparation, PrepOptions,
    QuenchProtocol, VelocityMode, DEFAULT_RAMP_FRACTION, PREP_TOTAL_TIME,
};
use spinchern::fit::FitResult;
use spinchern::geometry::{
    chern_exact, chern_fhs, monopole_count, phase_diagram_with, ChernMethod, ChernResult, FhsOptions, GeometryConfig, KuboBackend,
    PhaseTemplate, RobustnessCase, SweepParameter, Surface, DEFAULT_N_THETA, REFERENCE_EXPONENTIAL, REFERENCE_SLOPE,
};
use spinchern::nmr::{
    chain_targets, compile_refocusing, compile_xy, quench_noise_ensemble, verify_sequence, NmrSystem, SignPattern,
    DEFAULT_SEGMENT_BUDGET,
};
use spinchern::spectra::{scan_degeneracies, sector_spectrum, DEFAULT_GAP_TOL};
use spinchern::spinops::{build_xy_chain, ChainSpec, FieldModel, FieldPoint};

use crate::config::{Method, RunConfig};
use crate::{svg, CliError, Command, Outputs};

pub const DEFAULT_T_F: f64 = 0.35;
pub const DEFAULT_FHS_N_THETA: usize = 61;
pub const DEFAULT_GAP_FACTOR: f64 = 10.0;

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn dispatch(command: &Command, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    match command {
        Command::Spectrum => spectrum(cfg, out),
        Command::Chern => chern(cfg, out),
        Command::PhaseDiagram => phase_diagram(cfg, out),
        Command::Transition => transition(cfg, out),
        Command::Prepare => prepare(cfg, out),
        Command::Quench => quench(cfg, out),
        Command::Degeneracy => degeneracy(cfg, out),
        Command::Compile => compile(cfg, out),
        Command::Noise => noise(cfg, out),
        Command::Recipe { .. } => Err(bad("recipes resolve to a concrete command")),
    }
}

fn csv(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut s = String::from(header);
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s.into_bytes()
}

pub fn dynamical_options(cfg: &RunConfig) -> DynamicalOptions {
    DynamicalOptions {
        n_samples: cfg.n_samples.unwrap_or(101),
        dt: cfg.dt,
        velocity: cfg.velocity.unwrap_or(VelocityMode::Single),
        ramp_fraction: cfg.ramp_fraction.unwrap_or(DEFAULT_RAMP_FRACTION),
        ..Default::default()
    }
}

pub fn prep_options(cfg: &RunConfig) -> PrepOptions {
    PrepOptions {
        n_steps: cfg.n_steps.unwrap_or(32),
        total_time: cfg.total_time.unwrap_or(PREP_TOTAL_TIME),
        ..Default::default()
    }
}

fn initial_state(cfg: &RunConfig, spec: &ChainSpec, h_r_hz: f64) -> Result<Preparation, CliError> {
    Ok(match cfg.prep_path {
        None => Preparation::Exact,
        Some(path) => Preparation::State(prepare_ground(spec, path, h_r_hz, &prep_options(cfg))?.0),
    })
}

/// Chern number of one chain at one field strength with the configured method.
pub fn chern_one(cfg: &RunConfig, spec: &ChainSpec, h_r_hz: f64, method: Method) -> Result<ChernResult, CliError> {
    let model = FieldModel::from_chain(spec)?;
    let geo = GeometryConfig::default();
    Ok(match method {
        Method::Exact => chern_exact(
            &model,
            h_r_hz,
            cfg.n_theta.unwrap_or(DEFAULT_N_THETA),
            cfg.kubo_backend.unwrap_or(KuboBackend::Auto),
            &geo,
        )?,
        Method::Fhs => chern_fhs(
            &model,
            h_r_hz,
            &FhsOptions {
                n_theta: cfg.n_theta.unwrap_or(DEFAULT_FHS_N_THETA),
                n_phi: cfg.n_phi,
                surface: Surface::Sphere,
            },
            &geo,
        )?,
        Method::Dynamical => {
            let t_f = cfg.t_f.unwrap_or(DEFAULT_T_F);
            let prep = initial_state(cfg, spec, h_r_hz)?;
            chern_dynamical(&model, h_r_hz, t_f, &prep, &dynamical_options(cfg))?.result
        }
    })
}

fn spectrum(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let spec = cfg.chain()?;
    let h_z = cfg.h_z_hz.unwrap_or(0.0);
    let s = sector_spectrum(&spec, &FieldPoint::along_z(h_z))?;
    let rows = s.sectors.iter().enumerate().flat_map(|(n, levels)| {
        levels
            .iter()
            .enumerate()
            .map(move |(k, &e)| vec![n.to_string(), k.to_string(), fmt_f64(e)])
    });
    out.write("spectrum.csv", &csv("particle_number,index,energy_rad_s", rows))?;
    let (_, e0) = s.ground();
    let tol = 1e-8 * (1.0 + e0.abs());
    let ground_rows: Vec<(usize, usize)> = s
        .sectors
        .iter()
        .enumerate()
        .flat_map(|(n, levels)| {
            levels
                .iter()
                .enumerate()
                .filter(move |(_, &e)| e - e0 < tol)
                .map(move |(k, _)| (n, k))
        })
        .collect();
    #[derive(Serialize)]
    struct Summary {
        h_z_hz: f64,
        ground_energy_rad_s: f64,
        ground_degeneracy: usize,
        /// `(particle_number, index)` of every ground-level row.
        ground_rows: Vec<(usize, usize)>,
    }
    out.write_json(
        "spectrum.json",
        &Summary {
            h_z_hz: h_z,
            ground_energy_rad_s: e0,
            ground_degeneracy: ground_rows.len(),
            ground_rows,
        },
    )
}

fn chern_csv(results: &[ChernResult]) -> Vec<u8> {
    csv(
        "h_r_hz,chern,err_estimate,method",
        results.iter().map(|r| {
            vec![
                fmt_f64(r.h_r_hz),
                fmt_f64(r.value),
                fmt_f64(r.error_estimate),
                r.method.as_str().to_string(),
            ]
        }),
    )
}

fn chern(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let spec = cfg.chain()?;
    let method = cfg.method();
    let results = cfg
        .h_r_list()?
        .par_iter()
        .map(|&h| chern_one(cfg, &spec, h, method))
        .collect::<Result<Vec<_>, _>>()?;
    out.write("chern.csv", &chern_csv(&results))
}

fn template(cfg: &RunConfig, axes: [&spinchern::geometry::SweepAxis; 2]) -> Result<PhaseTemplate, CliError> {
    let spec = cfg.chain()?;
    let sweeps_field = axes.iter().any(|a| a.parameter == SweepParameter::FieldHr);
    let h_r_hz = if sweeps_field {
        cfg.h_r_hz.as_ref().and_then(|v| v.first().copied()).unwrap_or(1.0)
    } else {
        match cfg.h_r_hz.as_deref() {
            Some([h]) => *h,
            _ => return Err(bad("phase diagram without an h_r axis needs exactly one `h_r_hz`")),
        }
    };
    Ok(PhaseTemplate { spec, h_r_hz })
}

fn cell_rows(a1: &[f64], a2: &[f64]) -> impl Iterator<Item = (usize, usize)> {
    let n2 = a2.len();
    (0..a1.len()).flat_map(move |i| (0..n2).map(move |j| (i, j)))
}

fn opt(v: Option<f64>) -> String {
    fmt_f64(v.unwrap_or(f64::NAN))
}

fn phase_diagram(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let (a1, a2) = (cfg.axis(1)?, cfg.axis(2)?);
    let tpl = template(cfg, [&a1, &a2])?;
    if cfg.t_f_list.is_some() {
        return convergence(cfg, &tpl, &a1, &a2, out);
    }
    let method = cfg.method();
    let tag = match method {
        Method::Exact => ChernMethod::KuboIntegral,
        Method::Fhs => ChernMethod::FhsLattice,
        Method::Dynamical => ChernMethod::Dynamical,
    };
    let d = phase_diagram_with(&tpl, &a1, &a2, tag, |spec, h| {
        chern_one(cfg, spec, h, method).map_err(|e| match e {
            CliError::Compute(e) | CliError::Infeasible(e) => e,
            other => spinchern::Error::InvalidInput(other.to_string()),
        })
    })?;
    let rows = cell_rows(&a1.samples, &a2.samples).map(|(i, j)| {
        let c = &d.cells[i][j];
        vec![
            fmt_f64(a1.samples[i]),
            fmt_f64(a2.samples[j]),
            opt(c.value),
            opt(c.error_estimate),
        ]
    });
    out.write("phase_diagram.csv", &csv("axis1,axis2,chern,err_estimate", rows))?;
    #[derive(Serialize)]
    struct Failed {
        axis1: f64,
        axis2: f64,
        error: String,
    }
    #[derive(Serialize)]
    struct Summary {
        axis1: String,
        axis2: String,
        h_r_hz: f64,
        method: String,
        plateaus: Vec<i64>,
        failed: Vec<Failed>,
    }
    let failed = cell_rows(&a1.samples, &a2.samples)
        .filter_map(|(i, j)| {
            d.cells[i][j].error.clone().map(|error| Failed {
                axis1: a1.samples[i],
                axis2: a2.samples[j],
                error,
            })
        })
        .collect();
    out.write_json(
        "phase_diagram.json",
        &Summary {
            axis1: a1.name.clone(),
            axis2: a2.name.clone(),
            h_r_hz: tpl.h_r_hz,
            method: method.as_str().into(),
            plateaus: d.plateaus(),
            failed,
        },
    )?;
    out.write("phase_diagram.svg", svg::heatmap(&d).as_bytes())
}

fn convergence(
    cfg: &RunConfig,
    tpl: &PhaseTemplate,
    a1: &spinchern::geometry::SweepAxis,
    a2: &spinchern::geometry::SweepAxis,
    out: &mut Outputs,
) -> Result<(), CliError> {
    let t_f = cfg.t_f_list.clone().unwrap_or_default();
    let table = quench_convergence(tpl, a1, a2, &t_f, &dynamical_options(cfg), &GeometryConfig::default())?;
    let mut header = String::from("axis1,axis2,exact,min_gap_rad_s");
    for t in &t_f {
        let _ = write!(header, ",dynamical_t_f_{t}");
    }
    let rows = cell_rows(&a1.samples, &a2.samples).map(|(i, j)| {
        let mut r = vec![
            fmt_f64(a1.samples[i]),
            fmt_f64(a2.samples[j]),
            opt(table.exact.cells[i][j].value),
            opt(table.min_gap[i][j]),
        ];
        r.extend(table.dynamical.iter().map(|d| opt(d.cells[i][j].value)));
        r
    });
    out.write("convergence.csv", &csv(&header, rows))?;
    let factor = cfg.gap_factor.unwrap_or(DEFAULT_GAP_FACTOR);
    let mask = table.gapped_mask(factor);
    #[derive(Serialize)]
    struct Summary {
        h_r_hz: f64,
        t_f: Vec<f64>,
        gap_factor: f64,
        gapped_cells: usize,
        max_deviation_all: Vec<f64>,
        max_deviation_interior: Vec<f64>,
        max_deviation_gapped: Vec<f64>,
    }
    out.write_json(
        "convergence.json",
        &Summary {
            h_r_hz: tpl.h_r_hz,
            t_f: t_f.clone(),
            gap_factor: factor,
            gapped_cells: mask.iter().flatten().filter(|&&m| m).count(),
            max_deviation_all: table.max_deviation(false),
            max_deviation_interior: table.max_deviation(true),
            max_deviation_gapped: table.max_deviation_masked(&mask),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Step {
    pub lo: f64,
    pub hi: f64,
    pub location: f64,
    pub from: i64,
    pub to: i64,
}

/// Bisects every interval of `xs` across which the rounded value of `f` changes.
pub fn locate_steps<F>(xs: &[f64], values: &[f64], tol: f64, f: F) -> Result<Vec<Step>, CliError>
where
    F: Fn(f64) -> Result<f64, CliError>,
{
    let mut steps = Vec::new();
    for k in 0..xs.len().saturating_sub(1) {
        let (from, to) = (values[k].round() as i64, values[k + 1].round() as i64);
        if from == to {
            continue;
        }
        let (mut lo, mut hi) = (xs[k], xs[k + 1]);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if f(mid)?.round() as i64 == from {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        steps.push(Step {
            lo,
            hi,
            location: 0.5 * (lo + hi),
            from,
            to,
        });
    }
    Ok(steps)
}

/// The chain with even bonds at `j12` and odd bonds at `j23`.
pub fn ssh_at(base: &ChainSpec, j12: f64, j23: f64) -> Result<ChainSpec, CliError> {
    let couplings = (0..base.n_sites - 1).map(|b| if b % 2 == 0 { j12 } else { j23 }).collect();
    base.with_couplings(couplings).map_err(|e| bad(e.to_string()))
}

fn transition(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let base = cfg.chain()?;
    let j12 = cfg
        .j12_hz
        .clone()
        .filter(|v| v.len() >= 2)
        .ok_or_else(|| bad("`j12_hz` must list at least two couplings"))?;
    let j23 = cfg.j23_hz.unwrap_or(69.7);
    let h = cfg.single_h_r(50.0)?;
    let specs = j12.iter().map(|&j| ssh_at(&base, j, j23)).collect::<Result<Vec<_>, _>>()?;
    let t_f = cfg.t_f.unwrap_or(DEFAULT_T_F);
    let rows = specs
        .par_iter()
        .map(|s| {
            let exact = chern_one(cfg, s, h, Method::Exact)?;
            let model = FieldModel::from_chain(s)?;
            let d = chern_dynamical(&model, h, t_f, &initial_state(cfg, s, h)?, &dynamical_options(cfg))?;
            let gap = d.record.gap.iter().copied().fold(f64::INFINITY, f64::min);
            Ok((exact.value, d.result.value, gap))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    out.write(
        "transition.csv",
        &csv(
            "j12_hz,exact,dynamical,min_gap_rad_s",
            j12.iter()
                .zip(&rows)
                .map(|(j, (e, d, g))| vec![fmt_f64(*j), fmt_f64(*e), fmt_f64(*d), fmt_f64(*g)]),
        ),
    )?;
    let exact: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let tol = cfg.step_tol_hz.unwrap_or(1e-3);
    // Steps sit where a z-axis crossing passes through the sphere, so they are
    // bisected on the monopole count rather than on the rounded integral.
    let steps = locate_steps(&j12, &exact, tol, |j| {
        let spec = ssh_at(&base, j, j23)?;
        let model = FieldModel::from_chain(&spec)?;
        if model.is_u1_symmetric() {
            Ok(monopole_count(&model, h, 1e-9)? as f64)
        } else {
            Ok(chern_one(cfg, &spec, h, Method::Fhs)?.value)
        }
    })?;
    #[derive(Serialize)]
    struct Summary {
        h_r_hz: f64,
        j23_hz: f64,
        tol_hz: f64,
        steps: Vec<Step>,
    }
    out.write_json(
        "transition.json",
        &Summary {
            h_r_hz: h,
            j23_hz: j23,
            tol_hz: tol,
            steps,
        },
    )
}

fn prepare(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let spec = cfg.chain()?;
    let path = cfg.path_id.unwrap_or(1);
    let h = cfg.single_h_r(10.0)?;
    let (_, report, schedule) = prepare_ground(&spec, path, h, &prep_options(cfg)).map_err(|e| match e {
        spinchern::Error::InvalidInput(m) => bad(m),
        other => CliError::Compute(other),
    })?;
    out.write(
        "prepare.csv",
        &csv(
            "step,time_s,fidelity",
            report
                .fidelities
                .iter()
                .enumerate()
                .map(|(k, f)| vec![(k + 1).to_string(), fmt_f64(report.knot_times[k + 1]), fmt_f64(*f)]),
        ),
    )?;
    out.write(
        "schedule.csv",
        &csv(
            "segment,time_s,value",
            schedule.segments.iter().flat_map(|seg| {
                seg.times
                    .iter()
                    .zip(&seg.values)
                    .map(|(t, v)| vec![seg.name.clone(), fmt_f64(*t), fmt_f64(*v)])
            }),
        ),
    )?;
    #[derive(Serialize)]
    struct Summary<'a> {
        path_id: u8,
        h_r_hz: f64,
        min_fidelity: f64,
        report: &'a spinchern::dynamics::PrepReport,
    }
    out.write_json(
        "prepare.json",
        &Summary {
            path_id: path,
            h_r_hz: h,
            min_fidelity: report.fidelities.iter().copied().fold(1.0, f64::min),
            report: &report,
        },
    )
}

fn quench(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let spec = cfg.chain()?;
    let h = cfg.single_h_r(10.0)?;
    let t_f = cfg.t_f.unwrap_or(DEFAULT_T_F);
    let model = FieldModel::from_chain(&spec)?;
    let d = chern_dynamical(&model, h, t_f, &initial_state(cfg, &spec, h)?, &dynamical_options(cfg))?;
    out.write("quench.csv", d.record.to_csv().as_bytes())?;
    out.write(
        "curvature.csv",
        &csv(
            "theta,curvature",
            d.profile
                .theta
                .iter()
                .zip(&d.profile.values)
                .map(|(t, f)| vec![fmt_f64(*t), fmt_f64(*f)]),
        ),
    )?;
    #[derive(Serialize)]
    struct Summary<'a> {
        h_r_hz: f64,
        t_f: f64,
        chern: f64,
        err_estimate: f64,
        v_theta: f64,
        warnings: &'a [String],
    }
    out.write_json(
        "quench.json",
        &Summary {
            h_r_hz: h,
            t_f,
            chern: d.result.value,
            err_estimate: d.result.error_estimate,
            v_theta: d.record.v_theta,
            warnings: &d.record.warnings,
        },
    )
}

fn degeneracy(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let spec = cfg.chain()?;
    let range = cfg.h_z_range_hz.unwrap_or([-200.0, 200.0]);
    let set = scan_degeneracies(
        &spec,
        range,
        cfg.coarse_steps.unwrap_or(400),
        cfg.gap_tol.unwrap_or(DEFAULT_GAP_TOL),
    )?;
    out.write(
        "degeneracy.csv",
        &csv(
            "h_z_hz,gap_rad_s,n_below,n_above,charge,multiplicity",
            set.points.iter().map(|p| {
                vec![
                    fmt_f64(p.h_z_hz),
                    fmt_f64(p.gap),
                    p.n_below.to_string(),
                    p.n_above.to_string(),
                    p.charge.to_string(),
                    p.multiplicity.to_string(),
                ]
            }),
        ),
    )?;
    out.write_json("degeneracy.json", &set)?;
    let Some(case) = cfg.robustness else {
        return Ok(());
    };
    let perturbations = cfg
        .perturbations_hz
        .clone()
        .ok_or_else(|| bad("`robustness` needs `perturbations_hz`"))?;
    let fit = spinchern::geometry::robustness_fit(&spec, case, &perturbations)?;
    out.write(
        "robustness.csv",
        &csv(
            "perturbation_hz,dh_z_hz",
            fit.data.iter().map(|(x, y)| vec![fmt_f64(*x), fmt_f64(*y)]),
        ),
    )?;
    #[derive(Serialize)]
    struct Summary<'a> {
        case: RobustnessCase,
        fit: &'a FitResult,
        /// Coefficients quoted with the measured data, for comparison only.
        reference_coefficients: Vec<f64>,
    }
    out.write_json(
        "robustness.json",
        &Summary {
            case,
            fit: &fit.fit,
            reference_coefficients: match case {
                RobustnessCase::Topological => REFERENCE_EXPONENTIAL.to_vec(),
                RobustnessCase::Trivial => vec![REFERENCE_SLOPE],
            },
        },
    )
}

fn compile(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let spec = cfg.chain()?;
    let mut system = NmrSystem::crotonic_acid();
    if spec.n_sites != system.n_spins() {
        return Err(bad(format!("the NMR register has {} spins", system.n_spins())));
    }
    if let Some(shifts) = &cfg.shifts_hz {
        system = system.with_shifts(shifts.clone()).map_err(|e| bad(e.to_string()))?;
    }
    let targets = chain_targets(&system, &spec).map_err(CliError::Infeasible)?;
    let budget = cfg.segment_budget.unwrap_or(DEFAULT_SEGMENT_BUDGET);
    let (pattern, _) = compile_refocusing(&system, &targets, budget)?;
    let slices = cfg.trotter_slices.unwrap_or(8);
    let j_max = spec.couplings_hz.iter().fold(0.0f64, |m, j| m.max(j.abs()));
    let effective_time = cfg
        .effective_time
        .unwrap_or(if j_max > 0.0 { 1.0 / j_max } else { 1.0 / 69.7 });
    let sequence = compile_xy(&pattern, slices, effective_time)?;
    let fidelity = verify_sequence(&system, &sequence, &build_xy_chain(&spec)?, effective_time)?;
    out.write("sequence.txt", sequence.to_text().as_bytes())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        shifts_hz: &'a [f64],
        targets: Vec<(usize, usize, f64)>,
        pattern: &'a SignPattern,
        trotter_slices: usize,
        effective_time_s: f64,
        sequence_duration_s: f64,
        n_events: usize,
        fidelity: f64,
    }
    out.write_json(
        "compile.json",
        &Summary {
            shifts_hz: &system.shift_hz,
            targets: targets.iter().map(|&(i, j, w)| (i + 1, j + 1, w)).collect(),
            pattern: &pattern,
            trotter_slices: slices,
            effective_time_s: effective_time,
            sequence_duration_s: sequence.total_duration(),
            n_events: sequence.events.len(),
            fidelity,
        },
    )
}

fn noise(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let spec = cfg.chain()?;
    let h = cfg.single_h_r(50.0)?;
    let t_f = cfg.t_f.unwrap_or(DEFAULT_T_F);
    let spread = cfg.spread.unwrap_or(0.03);
    let n_draws = cfg.n_draws.unwrap_or(50);
    let seed = cfg.seed.unwrap_or(0);
    let opts = dynamical_options(cfg);
    let model = FieldModel::from_chain(&spec)?;
    let q = quench_noise_ensemble(&model, h, t_f, spread, n_draws, seed, &opts).map_err(|e| match e {
        spinchern::Error::InvalidInput(m) => bad(m),
        other => CliError::Compute(other),
    })?;
    let protocol = QuenchProtocol {
        n_samples: opts.n_samples,
        ramp_fraction: opts.ramp_fraction,
        ..QuenchProtocol::new(h, t_f)
    };
    let (times, theta) = protocol.samples();
    let n = spec.n_sites;
    let m = opts.n_samples;
    let mut header = String::from("t,theta");
    for j in 1..=n {
        let _ = write!(header, ",mean_x{j},std_x{j},ideal_x{j}");
    }
    let rows = (0..m).map(|k| {
        let mut r = vec![fmt_f64(times[k]), fmt_f64(theta[k])];
        for j in 0..n {
            let i = j * m + k;
            r.extend([
                fmt_f64(q.stats.mean[i]),
                fmt_f64(q.stats.std[i]),
                fmt_f64(q.stats.reference[i]),
            ]);
        }
        r
    });
    out.write("noise.csv", &csv(&header, rows))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        h_r_hz: f64,
        t_f: f64,
        spread: f64,
        n_draws: usize,
        seed: u64,
        sigma_q_per_spin: &'a [f64],
        sigma_q: f64,
        chern_reference: f64,
        chern_mean: f64,
        chern_std: f64,
        amplitude_scales: &'a [f64],
    }
    out.write_json(
        "noise.json",
        &Summary {
            h_r_hz: h,
            t_f,
            spread,
            n_draws,
            seed,
            sigma_q_per_spin: &q.sigma_q_per_spin,
            sigma_q: q.sigma_q,
            chern_reference: q.chern_reference,
            chern_mean: q.chern_mean,
            chern_std: q.chern_std,
            amplitude_scales: &q.stats.scales,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_are_bisected() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let f = |x: f64| Ok(if x < 1.37 { 2.0 } else { 0.0 });
        let vals: Vec<f64> = xs.iter().map(|&x| f(x).unwrap()).collect();
        let s = locate_steps(&xs, &vals, 1e-6, f).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].location - 1.37).abs() < 1e-6);
        assert_eq!((s[0].from, s[0].to), (2, 0));
    }

    #[test]
    fn csv_layout() {
        let b = csv("a,b", [vec!["1".into(), "2".into()]]);
        assert_eq!(String::from_utf8(b).unwrap(), "a,b\n1,2\n");
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
    }
}
