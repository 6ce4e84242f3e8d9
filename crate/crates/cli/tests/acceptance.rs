//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 3 to 6 share five training seeds of all four systems on the
//! default corpus, evaluated with the default evaluation config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use spvae::evalmetrics::{evaluate, median, ContentProbe, EvalInputs, EvalReport, RawScores, TrainedSystem};
use spvae::latent::sample_prior;
use spvae::ndcore::{grad_check, GradCheckConfig, Matrix};
use spvae::seeding::rng_from;
use spvae::toycorpus::{generate_corpus, split_speakers, CorpusConfig};
use spvae::vae::{
    corpus_frames, kl_to_standard_normal, loss_and_grads, reconstruction_l1, reparameterize, total_loss, triplet_loss,
    LossWeights, ModelDims, ModelParams, SystemVariant, TrainExample, Trainer, TripletConfig,
};
use spvae::verify::{train_verifier, Verifier};
use spvae_cli::RunConfig;

use SystemVariant::{BaselineLookup, Vae, VaeTriplet, VaeTripletShuffle};

const TRAIN_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(outcomes: &mut Vec<Outcome>, id: u32, name: &'static str, pass: bool, detail: String) {
    println!(
        "{} criterion {id} ({name}): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    outcomes.push(Outcome { id, name, pass, detail });
}

fn mins(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

fn main() {
    let mut outcomes = Vec::new();
    gradient_check(&mut outcomes);
    closed_forms(&mut outcomes);
    let study = Study::run();
    far_ordering(&mut outcomes, &study);
    interpolation_smoothness(&mut outcomes, &study);
    intelligibility(&mut outcomes, &study);
    disentanglement(&mut outcomes, &study);
    determinism(&mut outcomes);
    verifier_and_recomputation(&mut outcomes, &study);

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "\nacceptance: {} of {} criteria pass",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        for o in &failed {
            println!("  failed {} ({}): {}", o.id, o.name, o.detail);
        }
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. Full-loss gradient against central differences

fn gradient_check(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let cfg = CorpusConfig {
        n_speakers: 8,
        utts_per_speaker: 4,
        voice_dim: 2,
        n_contents: 3,
        frames: 5,
        feature_dim: 8,
        seed: 11,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let frames = corpus_frames::<f64>(&corpus);
    let dims = ModelDims {
        latent_dim: 2,
        encoder_hidden: vec![6],
        decoder_hidden: vec![7],
        ..ModelDims::new(8, 5, 3)
    };
    let weights = LossWeights::default();
    let mut worst = 0.0f64;
    let mut active_hinges = 0;
    for seed in 0..10u64 {
        let params = ModelParams::<f64>::init(dims.clone(), &[0, 1], seed).unwrap();
        let mut rng = rng_from(seed, &[]);
        // Speaker s owns utterances 4s..4s+3.
        let batch: Vec<TrainExample<'_, f64>> = [(0usize, 0usize, 1usize), (1, 2, 0)]
            .iter()
            .map(|&(spk, row, other)| TrainExample {
                reference: &frames[4 * spk],
                target: &frames[4 * spk + 1],
                content_id: corpus.utterances[4 * spk + 1].content_id as usize,
                table_row: row,
                triplet: Some((&frames[4 * spk + 2], &frames[4 * other + 3])),
                eps: sample_prior::<f64, _>(2, &mut rng, seed, 0).z,
            })
            .collect();
        let (b, g) = loss_and_grads(&params, &batch, &weights, VaeTripletShuffle).unwrap();
        if b.triplet > 0.0 {
            active_hinges += 1;
        }
        let err = grad_check(
            &params,
            &g,
            |m| total_loss(m, &batch, &weights, VaeTripletShuffle),
            GradCheckConfig {
                step: 1e-5,
                samples: usize::MAX,
                floor: 1e-6,
            },
            &mut rng,
        )
        .unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60);
    report(
        out,
        1,
        "full-loss gradient",
        pass,
        format!(
            "max relative error {worst:.2e} over every coordinate, 10 seeds (triplet hinge active in {active_hinges}); {:.1} s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Closed-form examples

fn closed_forms(out: &mut Vec<Outcome>) {
    let alpha = TripletConfig::new(0.5).unwrap();
    let ones = Matrix::from_fn(3, 4, |_, _| 1.0);
    let zeros = Matrix::<f64>::zeros(3, 4);
    let checks: [(&str, bool); 9] = [
        (
            "eps = 0 gives z = mu",
            reparameterize(&[0.3, -2.0], &[0.7, 1.5], &[0.0, 0.0]).unwrap() == vec![0.3, -2.0],
        ),
        (
            "z = mu + sigma * eps",
            reparameterize(&[1.0, 2.0], &[0.5, 1.0], &[2.0, -1.0]).unwrap() == vec![2.0, 1.0],
        ),
        (
            "KL of the prior is 0",
            kl_to_standard_normal(&[0.0; 4], &[1.0; 4]).unwrap() == 0.0,
        ),
        (
            "KL with mu = 1 is 0.5",
            kl_to_standard_normal(&[1.0], &[1.0]).unwrap() == 0.5,
        ),
        (
            "triplet beyond the margin is 0",
            triplet_loss(&[0.0], &[0.0], &[1.0], alpha).unwrap() == 0.0,
        ),
        (
            "collapsed triplet returns the margin",
            triplet_loss(&[0.2], &[0.2], &[0.2], alpha).unwrap() == 0.5,
        ),
        (
            "equal distances return the margin",
            triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, -1.0], alpha).unwrap() == 0.5,
        ),
        (
            "L1 of identical frames is 0",
            reconstruction_l1(&ones, &ones).unwrap() == 0.0,
        ),
        (
            "L1 of zeros against ones is 1",
            reconstruction_l1(&zeros, &ones).unwrap() == 1.0,
        ),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = if failed.is_empty() {
        format!("{} exact examples", checks.len())
    } else {
        format!("mismatched: {}", failed.join("; "))
    };
    report(out, 2, "closed forms", failed.is_empty(), detail);
}

// ---------------------------------------------------------------------------
// Shared study: default corpus, five training seeds, four systems

struct SeedRun {
    seed: u64,
    report: EvalReport,
    raw: RawScores,
    train_time: BTreeMap<SystemVariant, Duration>,
    eval_time: Duration,
}

struct Study {
    verifier: Verifier<f64>,
    runs: Vec<SeedRun>,
}

impl Study {
    fn run() -> Self {
        let base = RunConfig::defaults(VaeTripletShuffle);
        let corpus = split_speakers(
            &generate_corpus(&base.corpus_config()).unwrap(),
            base.held_out_fraction,
            base.split_seed,
        )
        .unwrap();
        let frames = corpus_frames::<f64>(&corpus);
        let verifier = train_verifier::<f64>(&corpus, &base.verifier_config()).unwrap();
        let eval_cfg = base.eval_config();
        let probe = ContentProbe::train(&corpus, &eval_cfg.probe).unwrap();
        let mut runs = Vec::new();
        for seed in TRAIN_SEEDS {
            let mut models = Vec::new();
            let mut train_time = BTreeMap::new();
            for v in SystemVariant::ALL {
                let start = Instant::now();
                let cfg = RunConfig {
                    train_seed: seed,
                    ..RunConfig::defaults(v)
                };
                let mut t = Trainer::<f64>::new(cfg.train_config(), &corpus).unwrap();
                t.run(&corpus, &frames, cfg.train_steps, |_, _| {}).unwrap();
                train_time.insert(v, start.elapsed());
                models.push((v, t.params, t.step));
            }
            let start = Instant::now();
            let systems: Vec<TrainedSystem<'_, f64>> = models
                .iter()
                .map(|(v, p, steps)| TrainedSystem::new(*v, p, *steps).unwrap())
                .collect();
            let inputs = EvalInputs {
                corpus: &corpus,
                frames: &frames,
                systems: &systems,
                verifier: &verifier,
                probe: &probe,
            };
            let (report, raw) = evaluate(&inputs, &eval_cfg).unwrap();
            let eval_time = start.elapsed();
            println!(
                "  training seed {seed}: trained in {}, evaluated in {}",
                mins(train_time.values().sum()),
                mins(eval_time)
            );
            runs.push(SeedRun {
                seed,
                report,
                raw,
                train_time,
                eval_time,
            });
        }
        Study { verifier, runs }
    }

    fn time(&self, systems: &[SystemVariant]) -> Duration {
        self.runs
            .iter()
            .map(|r| systems.iter().map(|v| r.train_time[v]).sum::<Duration>() + r.eval_time)
            .sum()
    }
}

fn fmt_row(row: &[f64]) -> String {
    let cells: Vec<String> = row.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", cells.join(", "))
}

fn cell_medians(rows: &[Vec<f64>]) -> Vec<f64> {
    (0..rows[0].len())
        .map(|j| median(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect()
}

// ---------------------------------------------------------------------------
// 3. Normalized FAR ordering

fn far_chain(shuffle: &[f64], triplet: &[f64], vae: &[f64]) -> bool {
    (0..shuffle.len()).all(|j| shuffle[j] <= triplet[j] && triplet[j] <= vae[j] && vae[j] < 1.0)
}

fn far_ordering(out: &mut Vec<Outcome>, study: &Study) {
    let mut rows: BTreeMap<SystemVariant, Vec<Vec<f64>>> = BTreeMap::new();
    let mut chain_seeds = 0;
    let mut endpoint_seeds = 0;
    let mut unnormalized = 0;
    for r in &study.runs {
        let t = &r.report.far_table;
        if t.normalized.is_none() {
            unnormalized += 1;
            continue;
        }
        let row = |v| t.row(v).unwrap().clone();
        if far_chain(&row(VaeTripletShuffle), &row(VaeTriplet), &row(Vae)) {
            chain_seeds += 1;
        }
        if row(VaeTripletShuffle).iter().all(|&x| x < 1.0) {
            endpoint_seeds += 1;
        }
        for v in SystemVariant::ALL {
            rows.entry(v).or_default().push(row(v));
        }
    }
    let n = study.runs.len();
    if unnormalized > 0 {
        let detail = format!("baseline FAR was zero in {unnormalized}/{n} seeds, so the table is not normalizable");
        report(out, 3, "FAR ordering", false, detail);
        return;
    }
    let elapsed = study.time(&SystemVariant::ALL);
    let med: BTreeMap<_, _> = rows.iter().map(|(v, r)| (*v, cell_medians(r))).collect();
    let base_one = med[&BaselineLookup].iter().all(|&x| x == 1.0);
    let median_chain = far_chain(&med[&VaeTripletShuffle], &med[&VaeTriplet], &med[&Vae]);
    let pass =
        base_one && median_chain && chain_seeds >= 3 && endpoint_seeds == n && elapsed < Duration::from_secs(7200);
    let detail = format!(
        "median FAR shuffle {} triplet {} vae {} baseline {}; chain in {chain_seeds}/{n} seeds, shuffle < 1 in {endpoint_seeds}/{n}; {}",
        fmt_row(&med[&VaeTripletShuffle]),
        fmt_row(&med[&VaeTriplet]),
        fmt_row(&med[&Vae]),
        fmt_row(&med[&BaselineLookup]),
        mins(elapsed)
    );
    report(out, 3, "FAR ordering", pass, detail);
}

// ---------------------------------------------------------------------------
// 4. Similarity curve smoothness

fn interpolation_smoothness(out: &mut Vec<Outcome>, study: &Study) {
    let start = Instant::now();
    let run = &study.runs[0];
    let proposed = &run.report.similarity_curves[&VaeTripletShuffle];
    let baseline = &run.report.similarity_curves[&BaselineLookup];
    let smooth = proposed
        .iter()
        .filter(|c| c.max_adjacent_drop() < 0.35 && c.weakly_decreasing(0.1))
        .count();
    let jumpier = proposed
        .iter()
        .zip(baseline)
        .filter(|(p, b)| b.max_adjacent_drop() >= p.max_adjacent_drop())
        .count();
    let drops = |cs: &[spvae::evalmetrics::SimilarityCurve]| {
        fmt_row(&cs.iter().map(|c| c.max_adjacent_drop()).collect::<Vec<_>>())
    };
    let elapsed =
        run.train_time[&VaeTripletShuffle] + run.train_time[&BaselineLookup] + run.eval_time + start.elapsed();
    let pass = proposed.len() == 10 && smooth >= 8 && jumpier >= 6 && elapsed < Duration::from_secs(900);
    report(
        out,
        4,
        "interpolation smoothness",
        pass,
        format!(
            "training seed {}: proposed smooth in {smooth}/10, baseline max drop ≥ proposed in {jumpier}/10 (need 6); max drops proposed {} baseline {}; {}",
            run.seed,
            drops(proposed),
            drops(baseline),
            mins(elapsed)
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Normalized intelligibility

fn intelligibility(out: &mut Vec<Outcome>, study: &Study) {
    let mut rows: BTreeMap<SystemVariant, Vec<Vec<f64>>> = BTreeMap::new();
    let mut unnormalized = 0;
    for r in &study.runs {
        let t = &r.report.intelligibility_table;
        if t.normalized.is_none() {
            unnormalized += 1;
        }
        for v in SystemVariant::ALL {
            rows.entry(v).or_default().push(t.row(v).unwrap().clone());
        }
    }
    let med: BTreeMap<_, _> = rows.iter().map(|(v, r)| (*v, cell_medians(r))).collect();
    let (t, s) = (&med[&VaeTriplet], &med[&VaeTripletShuffle]);
    let gap = t.iter().zip(s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let elapsed = study.time(&[BaselineLookup, VaeTriplet, VaeTripletShuffle]);
    let pass =
        unnormalized == 0 && t.iter().chain(s).all(|&x| x <= 1.0) && gap < 0.05 && elapsed < Duration::from_secs(1800);
    report(
        out,
        5,
        "intelligibility",
        pass,
        format!(
            "median normalized error vae_triplet {} vae_triplet_shuffle {} (vae {}), largest gap {gap:.3}; {}",
            fmt_row(t),
            fmt_row(s),
            fmt_row(&med[&Vae]),
            mins(elapsed)
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Disentanglement

fn disentanglement(out: &mut Vec<Outcome>, study: &Study) {
    let pick = |v: SystemVariant, f: fn(&spvae::evalmetrics::Disentanglement) -> f64| {
        median(
            &study
                .runs
                .iter()
                .map(|r| f(&r.report.disentanglement[&v]))
                .collect::<Vec<_>>(),
        )
    };
    let (r2_on, r2_off) = (
        pick(VaeTripletShuffle, |d| d.speaker_r2),
        pick(VaeTriplet, |d| d.speaker_r2),
    );
    let (acc_on, acc_off) = (
        pick(VaeTripletShuffle, |d| d.content_accuracy),
        pick(VaeTriplet, |d| d.content_accuracy),
    );
    let pass = r2_on > r2_off && acc_on < acc_off;
    report(
        out,
        6,
        "disentanglement",
        pass,
        format!(
            "median speaker R² shuffle on {r2_on:.4} vs off {r2_off:.4}; content accuracy on {acc_on:.4} vs off {acc_off:.4}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Determinism through the command-line tool

fn spvae(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spvae"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(
                    p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

fn small_config(v: SystemVariant) -> RunConfig {
    RunConfig {
        n_speakers: 16,
        utts_per_speaker: 8,
        voice_dim: 4,
        n_contents: 4,
        frames: 8,
        feature_dim: 8,
        latent_dim: 4,
        encoder_hidden: vec![16],
        decoder_hidden: vec![24],
        batch_size: 8,
        train_steps: 120,
        checkpoint_every: 40,
        verifier_steps: 300,
        n_synthetic_profiles: 40,
        profile_counts: vec![1, 5],
        n_eval_seeds: 2,
        n_interpolation_pairs: 3,
        probe_noise_std: 0.5,
        probe_noise_draws: 50,
        corpus_seed: 21,
        split_seed: 3,
        ..RunConfig::defaults(v)
    }
}

fn determinism(out: &mut Vec<Outcome>) {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let result = (|| -> Result<Vec<String>, String> {
        let p = |name: &str| root.join(name).to_string_lossy().into_owned();
        let mut checks: Vec<(String, bool)> = Vec::new();
        let mut compare =
            |label: String, a: &str, b: &str| checks.push((label, tree(Path::new(a)) == tree(Path::new(b))));
        for v in SystemVariant::ALL {
            fs::write(root.join(format!("{v}.json")), small_config(v).to_json()).unwrap();
        }
        let cfg = p("vae_triplet_shuffle.json");
        for run in ["corpus_a", "corpus_b"] {
            spvae(&["gen-corpus", "--config", &cfg, "--out", &p(run)])?;
        }
        compare("gen-corpus".into(), &p("corpus_a"), &p("corpus_b"));
        let corpus = p("corpus_a");
        let mut checkpoints = Vec::new();
        for v in SystemVariant::ALL {
            let c = p(&format!("{v}.json"));
            for run in ["a", "b"] {
                spvae(&[
                    "train",
                    "--config",
                    &c,
                    "--corpus",
                    &corpus,
                    "--out",
                    &p(&format!("train_{v}_{run}")),
                ])?;
            }
            compare(
                format!("train {v}"),
                &p(&format!("train_{v}_a")),
                &p(&format!("train_{v}_b")),
            );
            checkpoints.push("--checkpoint".to_string());
            checkpoints.push(p(&format!("train_{v}_a/checkpoint.json")));
        }
        for run in ["eval_a", "eval_b"] {
            let mut args = vec!["eval", "--config", &cfg, "--corpus", &corpus, "--out"];
            let o = p(run);
            args.push(&o);
            args.extend(checkpoints.iter().map(String::as_str));
            spvae(&args)?;
        }
        compare("eval".into(), &p("eval_a"), &p("eval_b"));

        // Stop mid-run, resume from the copied checkpoint, compare with the
        // uninterrupted run.
        let part = p("resume");
        spvae(&[
            "train",
            "--config",
            &cfg,
            "--corpus",
            &corpus,
            "--out",
            &part,
            "--stop-after",
            "57",
        ])?;
        let ck = p("resume_from.json");
        fs::copy(root.join("resume/checkpoint.json"), &ck).unwrap();
        spvae(&[
            "train", "--config", &cfg, "--corpus", &corpus, "--out", &part, "--resume", &ck,
        ])?;
        let full = root.join("train_vae_triplet_shuffle_a");
        for f in ["checkpoint.json", "loss_history.csv"] {
            let equal = fs::read(full.join(f)).unwrap() == fs::read(root.join("resume").join(f)).unwrap();
            checks.push((format!("resume {f}"), equal));
        }
        let differ: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
        if differ.is_empty() {
            Ok(checks.iter().map(|c| c.0.clone()).collect())
        } else {
            Err(format!("outputs differ: {}", differ.join(", ")))
        }
    })();
    match result {
        Ok(same) => report(
            out,
            7,
            "determinism",
            true,
            format!("byte-identical: {}", same.join(", ")),
        ),
        Err(e) => report(out, 7, "determinism", false, e),
    }
}

// ---------------------------------------------------------------------------
// 8. Verifier quality and recomputation from dumped scores

/// Nearest-rank percentile written out as a count: the smallest score
/// with at least `p`% of all scores at or below it.
fn percentile_by_count(scores: &[f64], p: f64) -> f64 {
    let need = p / 100.0 * scores.len() as f64;
    scores
        .iter()
        .copied()
        .filter(|&s| scores.iter().filter(|&&x| x <= s).count() as f64 >= need)
        .fold(f64::INFINITY, f64::min)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn verifier_and_recomputation(out: &mut Vec<Outcome>, study: &Study) {
    let eer = study.verifier.held_out_eer;
    let mut far_err = 0.0f64;
    let mut threshold_err = 0.0f64;
    let mut sim_err = 0.0f64;
    for r in &study.runs {
        let thresholds: Vec<f64> = r
            .raw
            .percentiles
            .iter()
            .map(|&p| percentile_by_count(&r.raw.genuine_scores, p))
            .collect();
        for (t, reported) in thresholds.iter().zip(&r.report.thresholds) {
            threshold_err = threshold_err.max((t - reported.threshold).abs());
        }
        for (v, seeds) in &r.raw.synthetic_scores {
            let per_seed: Vec<Vec<f64>> = seeds
                .iter()
                .map(|scores| {
                    thresholds
                        .iter()
                        .map(|&t| scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64)
                        .collect()
                })
                .collect();
            let reported = &r.report.far_table.raw[v];
            if reported.len() != per_seed.len() || reported.iter().zip(&per_seed).any(|(a, b)| a.len() != b.len()) {
                far_err = f64::INFINITY;
            }
            for (a, b) in reported.iter().flatten().zip(per_seed.iter().flatten()) {
                far_err = far_err.max((a - b).abs());
            }
        }
        for curves in r.report.similarity_curves.values() {
            for c in curves {
                let end = c.embeddings.last().unwrap();
                for ((_, s), e) in c.points.iter().zip(&c.embeddings) {
                    sim_err = sim_err.max((s - cosine(e, end)).abs());
                }
            }
        }
    }
    let pass = eer < 0.10 && far_err <= 1e-12 && threshold_err <= 1e-12 && sim_err <= 1e-12;
    report(
        out,
        8,
        "verifier and recomputation",
        pass,
        format!(
            "held-out EER {eer:.4}; max recomputation error thresholds {threshold_err:.1e}, FAR {far_err:.1e}, similarity {sim_err:.1e}"
        ),
    );
}
