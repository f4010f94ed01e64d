//! Consolidated PASS/FAIL summary over whatever artifacts a directory holds.

use std::path::Path;

use serde_json::Value;

use crate::artifacts::{fmt_f64, read_json, Artifacts};
use crate::error::{CliError, CliResult};

pub const SCORE_REL_TOL: f64 = 1e-5;
pub const SLOPE_TARGET: f64 = -0.5;
pub const SLOPE_TOL: f64 = 0.1;
pub const CURVATURE_REL_TOL: f64 = 0.2;
pub const CROSS_BLOCK_SE: f64 = 4.0;
pub const ALPHA_FRACTION: f64 = 0.8;
pub const GD_REL_DIST: f64 = 1e-3;
pub const WEIGHT_TOL: f64 = 0.01;
/// Twice the four-standard-error band of direct sampling.
pub const MOMENT_Z: f64 = 8.0;
pub const WEYL_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub section: &'static str,
    pub check: String,
    pub value: String,
    pub threshold: String,
    pub status: Status,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Info,
}

impl Status {
    fn from_bool(ok: bool) -> Self {
        if ok { Status::Pass } else { Status::Fail }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
        }
    }
}

fn num(v: &Value, key: &str) -> f64 {
    v.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

fn row(section: &'static str, check: &str, value: f64, threshold: String, ok: bool) -> ReportRow {
    ReportRow {
        section,
        check: check.to_string(),
        value: fmt_f64(value),
        threshold,
        status: Status::from_bool(ok),
    }
}

fn score_rows(dir: &Path) -> CliResult<Option<Vec<ReportRow>>> {
    let path = dir.join("score_fd_errors.csv");
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h == "rel_err")
        .ok_or_else(|| CliError::Validation("score_fd_errors.csv lacks a rel_err column".into()))?;
    let mut max = 0.0f64;
    let mut count = 0usize;
    for rec in rdr.records() {
        let v: f64 = rec?[col].parse().unwrap_or(f64::NAN);
        max = if v.is_nan() { f64::NAN } else { max.max(v) };
        count += 1;
    }
    Ok(Some(vec![row(
        "score",
        &format!("max relative FD error over {count} checks"),
        max,
        format!("<= {}", fmt_f64(SCORE_REL_TOL)),
        max <= SCORE_REL_TOL,
    )]))
}

fn estimation_rows(v: &Value) -> Vec<ReportRow> {
    let slope = num(v, "slope");
    let rows = v.get("rows").and_then(Value::as_array).cloned().unwrap_or_default();
    let under = rows.iter().filter(|r| num(r, "sup_gap") <= num(r, "bound")).count();
    vec![
        row(
            "estimation",
            "log-log slope of sup-gap in n",
            slope,
            format!("{} +/- {}", fmt_f64(SLOPE_TARGET), fmt_f64(SLOPE_TOL)),
            (slope - SLOPE_TARGET).abs() <= SLOPE_TOL,
        ),
        row(
            "estimation",
            "sample sizes with gap under the bound",
            under as f64,
            format!("= {}", rows.len()),
            !rows.is_empty() && under == rows.len(),
        ),
    ]
}

fn hessian_rows(v: &Value) -> Vec<ReportRow> {
    let mut out = Vec::new();
    let lmin = num(v, "lambda_min_H");
    if let Some(alpha) = v.get("alpha_formula").and_then(Value::as_f64) {
        out.push(row(
            "hessian",
            "lambda_min(H) against the closed-form alpha",
            lmin,
            format!(">= {} * {}", ALPHA_FRACTION, fmt_f64(alpha)),
            lmin >= ALPHA_FRACTION * alpha,
        ));
    } else {
        out.push(ReportRow {
            section: "hessian",
            check: "lambda_min(H)".into(),
            value: fmt_f64(lmin),
            threshold: "no closed form for this factor rank".into(),
            status: Status::Info,
        });
    }
    if v.get("tying").and_then(Value::as_str) == Some("symmetric") {
        let target = num(v, "alpha_mean_block");
        let got = num(v, "lambda_min_mumu");
        out.push(row(
            "hessian",
            "lambda_min(H_mumu) against s^2/(s^2+gamma^2)^2",
            got,
            format!("{} +/- {}%", fmt_f64(target), CURVATURE_REL_TOL * 100.0),
            ((got - target) / target).abs() <= CURVATURE_REL_TOL,
        ));
    }
    if let (Some(norm), Some(se)) = (
        v.get("cross_fro_norm").and_then(Value::as_f64),
        v.get("cross_stderr").and_then(Value::as_f64),
    ) {
        out.push(row(
            "hessian",
            "||H_muU||_F",
            norm,
            format!("<= {} SE = {}", CROSS_BLOCK_SE, fmt_f64(CROSS_BLOCK_SE * se)),
            norm <= CROSS_BLOCK_SE * se,
        ));
    }
    out
}

fn train_rows(v: &Value) -> Vec<ReportRow> {
    let rel = num(v, "relative_dist");
    let mut out = vec![row(
        "train",
        "final distance relative to initial",
        rel,
        format!("<= {}", fmt_f64(GD_REL_DIST)),
        rel <= GD_REL_DIST,
    )];
    if let Some(c) = v.get("contraction") {
        let rho = num(c, "rho");
        let slack = num(c, "slack");
        out.push(row(
            "train",
            &format!("fraction of ratios <= rho + slack (rho = {})", fmt_f64(rho)),
            num(c, "fraction"),
            format!(">= {}", molrmog_core::optimizer::CONTRACTION_PASS_FRACTION),
            c.get("passed").and_then(Value::as_bool).unwrap_or(false) && !(slack.is_nan()),
        ));
    }
    out
}

fn overlap_rows(v: &Value) -> Vec<ReportRow> {
    let sweep = v.get("sweep").and_then(Value::as_array).cloned().unwrap_or_default();
    let mut worst = f64::INFINITY;
    let mut weyl_ok = true;
    let mut by_mode: Vec<(String, Vec<(f64, f64, f64)>)> = Vec::new();
    for entry in &sweep {
        let scale = num(entry, "mean_scale");
        for r in entry.get("reports").and_then(Value::as_array).into_iter().flatten() {
            let gap = num(r, "weyl_gap");
            let tol = WEYL_REL_TOL * num(r, "h_norm").max(1.0);
            weyl_ok &= gap >= -tol;
            worst = worst.min(gap);
            let mode = r.get("mode").and_then(Value::as_str).unwrap_or("").to_string();
            let point = (scale, num(r, "eps_overlap"), num(r, "alpha_eff"));
            match by_mode.iter_mut().find(|(m, _)| *m == mode) {
                Some((_, pts)) => pts.push(point),
                None => by_mode.push((mode, vec![point])),
            }
        }
    }
    let mut out = vec![row(
        "overlap",
        "smallest Weyl gap lambda_min(H) - (lambda_min(H_diag) - ||dH||)",
        worst,
        format!(">= -{} * max(1, ||H||)", fmt_f64(WEYL_REL_TOL)),
        weyl_ok && !sweep.is_empty(),
    )];
    for (mode, mut pts) in by_mode {
        pts.sort_by(|a, b| b.0.total_cmp(&a.0));
        let last = pts.last().map(|p| p.1).unwrap_or(f64::NAN);
        if mode == "two_mode_sup" {
            // The supremum saturates at 1/4 once the sample reaches the decision boundary.
            let monotone = pts.windows(2).all(|w| w[1].1 >= w[0].1);
            out.push(ReportRow {
                section: "overlap",
                check: format!("eps_overlap ({mode}) as means shrink"),
                value: fmt_f64(last),
                threshold: format!("non-decreasing: {monotone}"),
                status: Status::Info,
            });
        } else {
            out.push(row(
                "overlap",
                &format!("eps_overlap ({mode}) increasing as means shrink"),
                last,
                "strictly increasing".into(),
                pts.windows(2).all(|w| w[1].1 > w[0].1),
            ));
        }
        for (scale, _, alpha) in &pts {
            out.push(ReportRow {
                section: "overlap",
                check: format!("alpha_eff ({mode}) at mean scale {}", fmt_f64(*scale)),
                value: fmt_f64(*alpha),
                threshold: String::new(),
                status: Status::Info,
            });
        }
    }
    out
}

fn sampler_rows(v: &Value) -> Vec<ReportRow> {
    let Some(q) = v.get("reverse") else {
        return Vec::new();
    };
    let w = num(q, "max_weight_err");
    let mz = num(q, "max_mean_z");
    let cz = num(q, "max_cov_z");
    vec![
        row("sample", "max per-mode weight error", w, format!("<= {}", fmt_f64(WEIGHT_TOL)), w <= WEIGHT_TOL),
        row("sample", "max mean error in standard errors", mz, format!("<= {}", fmt_f64(MOMENT_Z)), mz <= MOMENT_Z),
        row("sample", "max covariance error in standard errors", cz, format!("<= {}", fmt_f64(MOMENT_Z)), cz <= MOMENT_Z),
    ]
}

/// Collects every acceptance row the artifacts in `dir` support.
pub fn collect(dir: &Path) -> CliResult<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut found = false;
    if let Some(r) = score_rows(dir)? {
        found = true;
        rows.extend(r);
    }
    type Section = fn(&Value) -> Vec<ReportRow>;
    let sections: [(&str, Section); 5] = [
        ("estimation.json", estimation_rows),
        ("hessian.json", hessian_rows),
        ("train.json", train_rows),
        ("overlap.json", overlap_rows),
        ("quality.json", sampler_rows),
    ];
    for (file, f) in sections {
        if let Some(v) = read_json(dir, file)? {
            found = true;
            rows.extend(f(&v));
        }
    }
    if !found && !dir.join("data.csv").exists() {
        return Err(CliError::NoArtifactsFound(dir.to_path_buf()));
    }
    Ok(rows)
}

pub fn write(dir: &Path, out: &mut Artifacts) -> CliResult<()> {
    let rows = collect(dir)?;
    let mut md = String::from("# Run report\n\n");
    if rows.is_empty() {
        md.push_str("Only generated data was found; no checks apply.\n");
    } else {
        let passed = rows.iter().filter(|r| r.status == Status::Pass).count();
        let failed = rows.iter().filter(|r| r.status == Status::Fail).count();
        md.push_str(&format!("{passed} passed, {failed} failed.\n\n"));
        md.push_str("| section | check | value | threshold | status |\n|---|---|---|---|---|\n");
        for r in &rows {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.section,
                r.check,
                r.value,
                r.threshold,
                r.status.as_str()
            ));
        }
    }
    out.text("report.md", &md)?;
    out.csv(
        "report.csv",
        &["section", "check", "value", "threshold", "status"],
        rows.iter().map(|r| {
            vec![
                r.section.to_string(),
                r.check.clone(),
                r.value.clone(),
                r.threshold.clone(),
                r.status.as_str().to_string(),
            ]
        }),
    )
}
