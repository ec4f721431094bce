//! CSV exports. Every file has a header row; numbers use `.` decimals and the
//! shortest representation that parses back to the same `f64`.

use mflq_core::costs::{ConvergenceTable, CostReport, Estimate, SlopeFit};
use mflq_core::simulator::{Ensemble, Mode, PathRecord};
use mflq_core::TimeGridFn;
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory CSV writer cannot fail")
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn put<I, S>(w: &mut csv::Writer<Vec<u8>>, record: I)
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(record).expect("in-memory CSV writer cannot fail");
}

/// One row per grid time; each block flattened row-major into `name[i][j]` columns.
/// All blocks must share the grid.
pub fn grid_csv(blocks: &[(&str, &TimeGridFn)]) -> Vec<u8> {
    let mut w = writer();
    let mut header = vec!["t".to_string()];
    for (name, f) in blocks {
        let (r, c) = f.shape();
        for i in 0..r {
            for j in 0..c {
                header.push(format!("{name}[{i}][{j}]"));
            }
        }
    }
    put(&mut w, &header);
    let Some((_, first)) = blocks.first() else {
        return finish(w);
    };
    for k in 0..=first.steps() {
        let mut row = vec![fmt_num(first.time(k))];
        for (_, f) in blocks {
            let m = f.value(k);
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    row.push(fmt_num(m[(i, j)]));
                }
            }
        }
        put(&mut w, &row);
    }
    finish(w)
}

/// Named columns of equal length.
pub fn columns_csv(columns: &[(String, Vec<f64>)]) -> Vec<u8> {
    let mut w = writer();
    put(&mut w, columns.iter().map(|(n, _)| n.as_str()));
    let len = columns.first().map_or(0, |c| c.1.len());
    for k in 0..len {
        put(&mut w, columns.iter().map(|(_, v)| fmt_num(v[k])));
    }
    finish(w)
}

/// Stored series of one path record, with the width of one time slice.
pub fn record_blocks(rec: &PathRecord) -> Vec<(&'static str, &[f64])> {
    [
        ("leader", &rec.leader),
        ("leader_control", &rec.leader_control),
        ("follower_mean", &rec.follower_mean),
        ("mean_field", &rec.mean_field),
        ("limit_leader", &rec.limit_leader),
        ("stacked", &rec.stacked),
        ("dual", &rec.dual),
        ("zeta0", &rec.zeta0),
        ("aux_gap", &rec.aux_gap),
        ("follower_running", &rec.follower_running),
        ("leader_running", &rec.leader_running),
        ("followers", &rec.followers),
        ("follower_controls", &rec.follower_controls),
    ]
    .into_iter()
    .filter(|(_, v)| !v.is_empty())
    .map(|(n, v)| (n, v.as_slice()))
    .collect()
}

/// Long format `(path, t, block, index, value)`.
pub fn ensemble_csv(ens: &Ensemble) -> Vec<u8> {
    let mut w = writer();
    put(&mut w, ["path", "t", "block", "index", "value"]);
    let len = ens.stored_len();
    for rec in &ens.paths {
        let path = rec.path.to_string();
        let blocks = record_blocks(rec);
        for (j, t) in ens.times.iter().enumerate() {
            let t = fmt_num(*t);
            for (name, data) in &blocks {
                let width = data.len() / len;
                for (r, v) in data[j * width..(j + 1) * width].iter().enumerate() {
                    put(&mut w, [path.as_str(), t.as_str(), name, &r.to_string(), &fmt_num(*v)]);
                }
            }
        }
    }
    finish(w)
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::OpenLoop => "openloop",
        Mode::Feedback => "feedback",
    }
}

/// Extra report rows computed by the pipeline.
#[derive(Debug, Clone, Default)]
pub struct ReportExtras {
    pub meanfield_gap_abs: Option<f64>,
    /// path mean of (1/T)∫ x^(N) dt, first component
    pub time_mean_follower_average: Option<Estimate>,
    /// path mean of (1/T)∫ x̄ dt, first component
    pub time_mean_mean_field: Option<Estimate>,
    pub s_t_printed: Option<f64>,
    pub closed_form_social_printed: Option<f64>,
}

/// `quantity,value,se` rows; empty cells where a value does not apply.
pub fn cost_report_csv(r: &CostReport, extras: &ReportExtras) -> Vec<u8> {
    let mut w = writer();
    put(&mut w, ["quantity", "value", "se"]);
    let text = |w: &mut csv::Writer<Vec<u8>>, k: &str, v: String| put(w, [k, v.as_str(), ""]);
    text(&mut w, "mode", mode_name(r.mode).into());
    text(&mut w, "population", r.population.to_string());
    text(&mut w, "paths", r.paths.to_string());
    let est = |w: &mut csv::Writer<Vec<u8>>, k: &str, e: Option<Estimate>| {
        put(w, [k.to_string(), opt_num(e.map(|e| e.mean)), opt_num(e.map(|e| e.se))]);
    };
    let val = |w: &mut csv::Writer<Vec<u8>>, k: &str, v: Option<f64>| put(w, [k.to_string(), opt_num(v), String::new()]);
    est(&mut w, "leader_cost", Some(r.leader));
    est(&mut w, "social_cost", Some(r.social));
    est(&mut w, "per_capita_social", Some(r.per_capita_social()));
    val(&mut w, "closed_form_leader", r.closed_form_leader);
    val(&mut w, "closed_form_social", r.closed_form_social);
    est(&mut w, "s_t", r.s_t);
    val(&mut w, "s_t_printed", extras.s_t_printed);
    val(&mut w, "closed_form_social_printed", extras.closed_form_social_printed);
    val(&mut w, "meanfield_gap", r.meanfield_gap);
    val(&mut w, "meanfield_gap_abs", extras.meanfield_gap_abs);
    est(&mut w, "time_mean_follower_average", extras.time_mean_follower_average);
    est(&mut w, "time_mean_mean_field", extras.time_mean_mean_field);
    est(&mut w, "epsilon_follower", r.epsilon_follower);
    est(&mut w, "epsilon_leader", r.epsilon_leader);
    finish(w)
}

/// Per-path realized costs.
pub fn path_costs_csv(ens: &Ensemble) -> Vec<u8> {
    let pc = mflq_core::costs::path_costs(ens);
    let mut w = writer();
    put(&mut w, ["path", "leader_cost", "social_cost"]);
    for (rec, (l, s)) in ens.paths.iter().zip(pc.leader.iter().zip(&pc.social)) {
        put(&mut w, [rec.path.to_string(), fmt_num(*l), fmt_num(*s)]);
    }
    finish(w)
}

pub fn convergence_csv(t: &ConvergenceTable) -> Vec<u8> {
    let mut w = writer();
    put(
        &mut w,
        [
            "N",
            "gap",
            "gap_abs",
            "eps1",
            "eps1_se",
            "eps2",
            "eps2_se",
            "social",
            "social_se",
            "closed_form_social",
            "social_gap",
            "leader",
            "leader_se",
            "closed_form_leader",
            "leader_gap",
        ],
    );
    for r in &t.rows {
        put(
            &mut w,
            [
                r.population.to_string(),
                fmt_num(r.gap),
                fmt_num(r.gap_abs),
                opt_num(r.epsilon_follower.map(|e| e.mean)),
                opt_num(r.epsilon_follower.map(|e| e.se)),
                opt_num(r.epsilon_leader.map(|e| e.mean)),
                opt_num(r.epsilon_leader.map(|e| e.se)),
                fmt_num(r.social.mean),
                fmt_num(r.social.se),
                fmt_num(r.closed_form_social),
                fmt_num(r.social_gap()),
                fmt_num(r.leader.mean),
                fmt_num(r.leader.se),
                fmt_num(r.closed_form_leader),
                fmt_num(r.leader_gap()),
            ],
        );
    }
    finish(w)
}

/// Two-sided 95% interval of a slope fitted to `points` log-log pairs.
pub fn slope_interval(fit: &SlopeFit, points: usize) -> (f64, f64) {
    let df = points.saturating_sub(2).max(1) as f64;
    let q = StudentsT::new(0.0, 1.0, df).expect("valid t distribution").inverse_cdf(0.975);
    (fit.slope - q * fit.se, fit.slope + q * fit.se)
}

/// `quantity,slope,se,ci_low,ci_high,status`; status is `not applicable` when the
/// quantity sits at rounding level and no slope can be fitted.
pub fn slopes_csv(t: &ConvergenceTable) -> Vec<u8> {
    let mut w = writer();
    put(&mut w, ["quantity", "slope", "se", "ci95_low", "ci95_high", "status"]);
    let n = t.rows.len();
    for (name, fit) in [("gap", t.gap_slope), ("social_gap", t.social_gap_slope), ("leader_gap", t.leader_gap_slope)] {
        match fit {
            Some(f) => {
                let (lo, hi) = slope_interval(&f, n);
                put(&mut w, [name.into(), fmt_num(f.slope), fmt_num(f.se), fmt_num(lo), fmt_num(hi), "fitted".into()]);
            }
            None => put(&mut w, [name, "", "", "", "", "not applicable"]),
        }
    }
    finish(w)
}
