use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Scalar};
use crate::seeding::{derive_seed, rng_from, tags};
use crate::toycorpus::Corpus;
use crate::vae::SystemVariant;
use crate::verify::Verifier;

use super::metrics::{
    calibrate_thresholds, disentanglement_probe, eval_distinctiveness, eval_intelligibility_proxy,
    eval_similarity_curve, interpolation_pairs, median, normalize_rows, ContentProbe, Disentanglement, EvalConfig,
    SimilarityCurve, Threshold, TrainedSystem,
};

/// One metric over every system: per-seed raw rows, per-seed normalized
/// rows and the medians reported in the tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub columns: Vec<String>,
    pub raw: BTreeMap<SystemVariant, Vec<Vec<f64>>>,
    pub median_raw: BTreeMap<SystemVariant, Vec<f64>>,
    /// `None` when some baseline cell was zero in some seed; the raw
    /// medians are then the reported values.
    pub normalized: Option<BTreeMap<SystemVariant, Vec<f64>>>,
    pub normalization_error: Option<String>,
}

impl MetricTable {
    /// Normalizes each seed against the baseline of the same seed, then
    /// takes cell-wise medians.
    pub fn build(columns: Vec<String>, raw: BTreeMap<SystemVariant, Vec<Vec<f64>>>, baseline: SystemVariant) -> Self {
        let med = |rows: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..columns.len())
                .map(|j| median(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
                .collect()
        };
        let median_raw = raw.iter().map(|(&v, rows)| (v, med(rows))).collect();
        let n_seeds = raw.values().next().map_or(0, Vec::len);
        let per_seed: Result<Vec<BTreeMap<SystemVariant, Vec<f64>>>> = (0..n_seeds)
            .map(|s| {
                let seed_rows = raw.iter().map(|(&v, rows)| (v, rows[s].clone())).collect();
                normalize_rows(&seed_rows, baseline)
            })
            .collect();
        let (normalized, normalization_error) = match per_seed {
            Ok(seeds) => {
                let table = raw
                    .keys()
                    .map(|v| (*v, med(&seeds.iter().map(|m| m[v].clone()).collect())))
                    .collect();
                (Some(table), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            columns,
            raw,
            median_raw,
            normalized,
            normalization_error,
        }
    }

    /// Reported row: normalized when available, raw otherwise.
    pub fn row(&self, v: SystemVariant) -> Option<&Vec<f64>> {
        match &self.normalized {
            Some(n) => n.get(&v),
            None => self.median_raw.get(&v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub variant: SystemVariant,
    pub steps_trained: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub eval_seeds: Vec<u64>,
    pub systems: Vec<SystemSummary>,
    pub verifier_eer: f64,
    pub probe_accuracy: f64,
    /// Thresholds per evaluation seed are identical; they depend only on
    /// the verifier and the natural data.
    pub thresholds: Vec<Threshold>,
    pub far_table: MetricTable,
    pub intelligibility_table: MetricTable,
    pub similarity_curves: BTreeMap<SystemVariant, Vec<SimilarityCurve>>,
    pub disentanglement: BTreeMap<SystemVariant, Disentanglement>,
}

/// Scores behind the FAR table, dumped so it can be recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub genuine_scores: Vec<f64>,
    pub percentiles: Vec<f64>,
    /// `system → seed → all synthetic pair scores`.
    pub synthetic_scores: BTreeMap<SystemVariant, Vec<Vec<f64>>>,
}

pub struct EvalInputs<'a, T: Scalar> {
    pub corpus: &'a Corpus,
    pub frames: &'a [Matrix<T>],
    pub systems: &'a [TrainedSystem<'a, T>],
    pub verifier: &'a Verifier<T>,
    pub probe: &'a ContentProbe,
}

/// Per-seed evaluation seeds derived from the base eval seed.
pub fn eval_seeds(cfg: &EvalConfig) -> Vec<u64> {
    (0..cfg.n_eval_seeds as u64)
        .map(|s| derive_seed(cfg.eval_seed, &[tags::EVAL, s]))
        .collect()
}

/// Runs every protocol. Systems evaluated under the same seed consume the
/// same random streams, so their differences are not sampling noise in
/// the draws themselves.
pub fn evaluate<T: Scalar>(inputs: &EvalInputs<'_, T>, cfg: &EvalConfig) -> Result<(EvalReport, RawScores)> {
    cfg.validate()?;
    let EvalInputs {
        corpus,
        frames,
        systems,
        verifier,
        probe,
    } = *inputs;
    let baseline = SystemVariant::BaselineLookup;
    if !systems.iter().any(|s| s.variant == baseline) {
        return Err(Error::Contract("evaluation needs the baseline system".into()));
    }
    let (genuine, thresholds) = calibrate_thresholds(verifier, corpus, frames, &cfg.percentiles)?;
    let seeds = eval_seeds(cfg);

    let mut far_raw = BTreeMap::new();
    let mut scores = BTreeMap::new();
    let mut intel_raw = BTreeMap::new();
    for sys in systems {
        let mut far_rows = Vec::new();
        let mut score_rows = Vec::new();
        let mut intel_rows = Vec::new();
        for &seed in &seeds {
            let row = eval_distinctiveness(
                sys,
                verifier,
                &thresholds,
                cfg.n_synthetic_profiles,
                &mut rng_from(seed, &[1]),
            )?;
            far_rows.push(row.far);
            score_rows.push(row.scores);
            intel_rows.push(eval_intelligibility_proxy(
                sys,
                probe,
                &cfg.profile_counts,
                &mut rng_from(seed, &[2]),
            )?);
        }
        far_raw.insert(sys.variant, far_rows);
        scores.insert(sys.variant, score_rows);
        intel_raw.insert(sys.variant, intel_rows);
    }

    let pairs = interpolation_pairs(
        corpus,
        cfg.n_interpolation_pairs,
        &mut rng_from(cfg.eval_seed, &[tags::EVAL, 1 << 32]),
    )?;
    let mut similarity_curves = BTreeMap::new();
    let mut disentanglement = BTreeMap::new();
    for sys in systems {
        let curves = pairs
            .iter()
            .map(|&(a, b, c)| eval_similarity_curve(sys, verifier, corpus, frames, (a, b), c, &cfg.interpolation_grid))
            .collect::<Result<Vec<_>>>()?;
        similarity_curves.insert(sys.variant, curves);
        if !sys.variant.is_baseline() {
            disentanglement.insert(sys.variant, disentanglement_probe(sys, corpus, frames)?);
        }
    }

    let pct_cols = cfg.percentiles.iter().map(|p| format!("p{p}")).collect();
    let count_cols = cfg.profile_counts.iter().map(|k| format!("k{k}")).collect();
    let report = EvalReport {
        config: cfg.clone(),
        eval_seeds: seeds,
        systems: systems
            .iter()
            .map(|s| SystemSummary {
                variant: s.variant,
                steps_trained: s.steps_trained,
            })
            .collect(),
        verifier_eer: verifier.held_out_eer,
        probe_accuracy: probe.held_out_accuracy,
        thresholds,
        far_table: MetricTable::build(pct_cols, far_raw, baseline),
        intelligibility_table: MetricTable::build(count_cols, intel_raw, baseline),
        similarity_curves,
        disentanglement,
    };
    let raw = RawScores {
        genuine_scores: genuine,
        percentiles: cfg.percentiles.clone(),
        synthetic_scores: scores,
    };
    Ok((report, raw))
}

/// Cell-wise median over systems' curves: `system → [(w, median score)]`.
pub fn median_curves(report: &EvalReport) -> BTreeMap<SystemVariant, Vec<(f64, f64)>> {
    report
        .similarity_curves
        .iter()
        .filter(|(_, c)| !c.is_empty())
        .map(|(&v, curves)| {
            let pts = (0..curves[0].points.len())
                .map(|i| {
                    let w = curves[0].points[i].0;
                    (w, median(&curves.iter().map(|c| c.points[i].1).collect::<Vec<_>>()))
                })
                .collect();
            (v, pts)
        })
        .collect()
}

fn table_csv(t: &MetricTable) -> String {
    let mut s = format!("system,{}\n", t.columns.join(","));
    for v in t.median_raw.keys() {
        let row = t.row(*v).unwrap();
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
        let _ = writeln!(s, "{v},{}", cells.join(","));
    }
    s
}

pub fn far_table_csv(report: &EvalReport) -> String {
    table_csv(&report.far_table)
}

pub fn intelligibility_table_csv(report: &EvalReport) -> String {
    table_csv(&report.intelligibility_table)
}

/// Long format: one row per system, pair and grid point.
pub fn similarity_curve_csv(report: &EvalReport) -> String {
    let mut s = String::from("system,pair,utterance_1,utterance_2,content_id,w,similarity\n");
    for (v, curves) in &report.similarity_curves {
        for (i, c) in curves.iter().enumerate() {
            for (w, y) in &c.points {
                let _ = writeln!(
                    s,
                    "{v},{i},{},{},{},{w:.2},{y:.12}",
                    c.utterance_1, c.utterance_2, c.content_id
                );
            }
        }
    }
    s
}

const COLORS: [&str; 5] = ["#444444", "#1f77b4", "#ff7f0e", "#2ca02c", "#999999"];

/// Self-contained line plot of the median similarity curves.
pub fn similarity_svg(report: &EvalReport) -> String {
    let curves = median_curves(report);
    let (w, h, m) = (640.0, 420.0, 60.0);
    let y_min = curves
        .values()
        .flat_map(|c| c.iter().map(|p| p.1))
        .fold(0.0f64, f64::min)
        .floor();
    let px = |x: f64| m + x * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y_min) / (1.0 - y_min) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>",
        h - m,
        w - m,
        h - m,
        h - m
    );
    for i in 0..=10 {
        let x = i as f64 / 10.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{x:.1}</text>",
            px(x),
            h - m + 16.0
        );
    }
    for i in 0..=4 {
        let y = y_min + (1.0 - y_min) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{y:.2}</text>",
            m - 6.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">w</text>",
        w / 2.0,
        h - 18.0
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">cosine similarity</text>",
        h / 2.0,
        h / 2.0
    );
    for (i, (v, pts)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"><title>{v}</title></polyline>",
            path.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"{color}\">{v}</text>",
            m + 10.0,
            m + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.json`, `far_table.csv`, `intelligibility_table.csv`,
/// `similarity_curve.csv`, `similarity_curve.svg` and `raw_scores.json`.
pub fn write_report(dir: &Path, report: &EvalReport, raw: &RawScores) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("far_table.csv"), far_table_csv(report))?;
    fs::write(dir.join("intelligibility_table.csv"), intelligibility_table_csv(report))?;
    fs::write(dir.join("similarity_curve.csv"), similarity_curve_csv(report))?;
    fs::write(dir.join("similarity_curve.svg"), similarity_svg(report))?;
    fs::write(dir.join("raw_scores.json"), serde_json::to_string(raw)?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn read_raw_scores(path: &Path) -> Result<RawScores> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
