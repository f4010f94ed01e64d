//! One function per subcommand. Each reads the validated configuration and
//! writes its declared artifacts.

use molrmog_core::calculus::{hessian_empirical, overlap_analysis_both, OverlapReport};
use molrmog_core::objective::{estimation_gap_experiment, theta_grid, EstimationConfig};
use molrmog_core::optimizer::{contraction_check, gd_train, init_near, step_rule};
use molrmog_core::oracle::score_fd_check;
use molrmog_core::rng::derive_seed;
use molrmog_core::sampler::{direct_samples, reverse_sample, sample_quality, MixtureField, SamplerConfig};
use molrmog_core::{LatentExpert, MolrMogModel};
use nalgebra::DVector;
use serde_json::json;

use crate::artifacts::{fmt_f64, Artifacts};
use crate::config::{expert_for, ExperimentConfig};
use crate::error::CliResult;

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn coords(x: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    x.iter().map(|v| fmt_f64(*v))
}

fn coord_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

pub fn gen(cfg: &ExperimentConfig, model: &MolrMogModel, out: &mut Artifacts) -> CliResult<()> {
    let data = model.sample_data(cfg.gen.n, cfg.seed);
    let mut header = vec!["k".to_string(), "l".to_string()];
    header.extend(coord_header("x", model.ambient_dim));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "data.csv",
        &header,
        data.iter().map(|s| {
            let mut row = vec![s.k.to_string(), s.l.to_string()];
            row.extend(coords(&s.x));
            row
        }),
    )
}

pub fn score_check(cfg: &ExperimentConfig, model: &MolrMogModel, out: &mut Artifacts) -> CliResult<()> {
    let rows = score_fd_check(model, &cfg.schedule, cfg.score_check.trials, cfg.score_check.h, cfg.seed)?;
    out.csv(
        "score_fd_errors.csv",
        &["trial", "kind", "dim", "t", "rel_err"],
        rows.iter().map(|r| {
            vec![
                r.trial.to_string(),
                r.kind.name().to_string(),
                r.dim.to_string(),
                fmt_f64(r.t),
                fmt_f64(r.rel_err),
            ]
        }),
    )
}

pub fn estimation(cfg: &ExperimentConfig, model: &MolrMogModel, out: &mut Artifacts) -> CliResult<()> {
    let e = &cfg.estimation;
    let truth: Vec<LatentExpert> = model.subspaces.iter().map(LatentExpert::from_subspace).collect();
    let grid = theta_grid(&truth, e.half_width, e.grid_size);
    let est = EstimationConfig {
        n_schedule: e.n_schedule.clone(),
        trials: e.trials,
        n_mc: cfg.loss.n_mc,
        t: cfg.fixed_time()?,
        delta: e.delta,
        support_mass: e.support_mass,
    };
    let report = estimation_gap_experiment(model, &grid, &cfg.schedule, &est, cfg.seed)?;
    out.csv(
        "estimation.csv",
        &["n", "sup_gap", "stderr"],
        report
            .rows
            .iter()
            .map(|r| vec![r.n.to_string(), fmt_f64(r.sup_gap), fmt_f64(r.stderr)]),
    )?;
    out.json("estimation.json", &report)
}

pub fn hessian(cfg: &ExperimentConfig, model: &MolrMogModel, out: &mut Artifacts) -> CliResult<()> {
    let h = &cfg.hessian;
    let coef = cfg.schedule.coefficients(cfg.fixed_time()?)?;
    let expert = expert_for(model, h.subspace, h.tying)?;
    let report = hessian_empirical(&expert, coef, h.n_mc, cfg.seed, h.jac_mode)?;
    out.csv(
        "hessian_spectrum.csv",
        &["index", "eigenvalue"],
        report
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(i, v)| vec![i.to_string(), fmt_f64(*v)]),
    )?;
    out.csv(
        "blocks.csv",
        &["block", "fro_norm", "lambda_min"],
        report
            .blocks
            .iter()
            .map(|b| vec![b.name.clone(), fmt_f64(b.fro_norm), opt(b.lambda_min)]),
    )?;
    let cross = report.block("muU");
    out.json(
        "hessian.json",
        &json!({
            "alpha_formula": report.alpha_formula,
            "lambda_min_H": report.lambda_min,
            "lambda_max_H": report.lambda_max,
            "corr_r": report.corr_r,
            "factor2": report.factor2,
            "alpha_mean_block": report.alpha_mean_block,
            "lambda_min_mumu": report.block("mumu").and_then(|b| b.lambda_min),
            "cross_fro_norm": cross.map(|b| b.fro_norm),
            "cross_stderr": cross.map(|b| b.stderr),
            "tying": h.tying,
            "jac_mode": h.jac_mode,
            "n_mc": report.n_mc,
            "blocks": report.blocks,
        }),
    )
}

fn scaled_subspace_model(model: &MolrMogModel, k: usize, scale: f64) -> MolrMogModel {
    let mut sub = model.subspaces[k].clone();
    for c in &mut sub.components {
        c.mu *= scale;
    }
    MolrMogModel {
        ambient_dim: model.ambient_dim,
        subspaces: vec![sub],
    }
}

pub fn overlap(cfg: &ExperimentConfig, model: &MolrMogModel, out: &mut Artifacts) -> CliResult<()> {
    let o = &cfg.overlap;
    let coef = cfg.schedule.coefficients(cfg.fixed_time()?)?;
    let mut sweep: Vec<(f64, [OverlapReport; 2])> = Vec::new();
    for &scale in &o.mean_scales {
        let scaled = scaled_subspace_model(model, o.subspace, scale);
        let expert = expert_for(&scaled, 0, o.tying)?;
        let radius = scaled.support_radius(o.support_mass)?;
        let samples: Vec<DVector<f64>> = expert
            .mixture(coef)?
            .sample(o.n_samples, cfg.seed)
            .into_iter()
            .map(|(_, x)| x)
            .collect();
        sweep.push((scale, overlap_analysis_both(&expert, coef, &samples, radius)?));
    }
    let mut rows = Vec::new();
    for (scale, reports) in &sweep {
        for r in reports {
            rows.push(vec![
                fmt_f64(*scale),
                serde_json::to_value(r.mode)?.as_str().unwrap_or_default().to_string(),
                fmt_f64(r.xi_max),
                fmt_f64(r.eps_overlap),
                fmt_f64(r.lambda_base),
                fmt_f64(r.c_used),
                fmt_f64(r.alpha_eff),
                fmt_f64(r.lambda_min_h),
                fmt_f64(r.lambda_min_h_diag),
                fmt_f64(r.delta_h_norm),
                fmt_f64(r.weyl_gap),
            ]);
        }
    }
    out.csv(
        "overlap.csv",
        &[
            "mean_scale",
            "mode",
            "xi_max",
            "eps_overlap",
            "lambda_base",
            "c_used",
            "alpha_eff",
            "lambda_min_h",
            "lambda_min_h_diag",
            "delta_h_norm",
            "weyl_gap",
        ],
        rows,
    )?;
    let entries: Vec<_> = sweep
        .iter()
        .map(|(scale, reports)| json!({"mean_scale": scale, "reports": reports}))
        .collect();
    out.json("overlap.json", &json!({"tying": o.tying, "sweep": entries}))
}

pub fn train(cfg: &ExperimentConfig, model: &MolrMogModel, out: &mut Artifacts) -> CliResult<()> {
    let g = &cfg.gd;
    let coef = cfg.schedule.coefficients(cfg.fixed_time()?)?;
    let truth = expert_for(model, g.subspace, g.tying)?;
    let data: Vec<DVector<f64>> = truth
        .mixture(coef)?
        .sample(g.n, cfg.seed)
        .into_iter()
        .map(|(_, x)| x)
        .collect();
    let theta0 = init_near(&truth, g.gd.init_radius, derive_seed(cfg.seed, 1))?;
    let (rule, local) = step_rule(&g.gd, &truth, coef, &data)?;
    let trace = gd_train(&theta0, &truth, coef, &data, &g.gd, rule)?;
    let check = contraction_check(&trace, trace.rho_bound, g.slack);
    out.csv(
        "trace.csv",
        &["m", "loss", "grad_norm", "dist", "ratio"],
        trace.rows.iter().map(|r| {
            vec![
                r.m.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.grad_norm),
                fmt_f64(r.dist),
                if r.m == 0 { String::new() } else { fmt_f64(r.ratio) },
            ]
        }),
    )?;
    let last = trace.rows.last().map(|r| r.dist).unwrap_or(f64::NAN);
    out.json(
        "train.json",
        &json!({
            "eta": trace.eta,
            "kappa": trace.kappa,
            "rho_bound": trace.rho_bound,
            "converged": trace.converged,
            "iterations": trace.rows.len().saturating_sub(1),
            "initial_dist": trace.initial_dist,
            "final_dist": last,
            "relative_dist": last / trace.initial_dist,
            "floor": trace.floor,
            "local_constants": local,
            "contraction": check,
        }),
    )
}

pub fn sample(cfg: &ExperimentConfig, model: &MolrMogModel, out: &mut Artifacts) -> CliResult<()> {
    let s = &cfg.sampler;
    let sched = &cfg.schedule;
    let run = SamplerConfig {
        seed: derive_seed(cfg.seed, s.seed),
        ..*s
    };
    let field = MixtureField::ambient(model, *sched);
    let samples = reverse_sample(&field, sched, &run, None)?;
    let quality = sample_quality(&samples, model, sched, sched.t_min)?;
    let direct = direct_samples(model, sched, sched.t_min, s.n, derive_seed(run.seed, 2))?;
    let baseline = sample_quality(&direct, model, sched, sched.t_min)?;
    let header = coord_header("x", model.ambient_dim);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("samples.csv", &header, samples.iter().map(|x| coords(x).collect()))?;
    out.json(
        "quality.json",
        &json!({
            "steps": s.steps,
            "reverse": quality,
            "direct": baseline,
        }),
    )
}
