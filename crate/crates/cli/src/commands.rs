use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use spvae::evalmetrics::{
    evaluate, read_raw_scores, read_report, write_report, ContentProbe, EvalInputs, EvalReport, MetricTable,
    TrainedSystem,
};
use spvae::latent::{encode_profile, interpolate_profiles, save_profiles, Provenance, SyntheticProfile};
use spvae::seeding::{rng_from, tags};
use spvae::toycorpus::{generate_corpus, split_speakers, write_frames, Corpus};
use spvae::vae::{corpus_frames, Checkpoint, LossBreakdown, ModelParams, SystemVariant, Trainer};
use spvae::verify::{train_verifier, VerifierCheckpoint};

use crate::config::RunConfig;
use crate::failure::Failure;
use crate::manifest::{hash_path, write_file, ManifestWriter, StageStatus};

#[derive(Debug, Parser)]
#[command(name = "spvae", version, about = "Speaker-profile VAE pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Replaces the seed the command draws from (corpus, training,
    /// evaluation or prior sampling, depending on the command).
    #[arg(long)]
    pub seed_override: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and split the synthetic corpus.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one system variant.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many steps have been taken in total.
        #[arg(long)]
        stop_after: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Produce profiles from a checkpoint and decode them.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: SynthMode,
        /// Corpus holding the reference utterances.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Reference utterance index; give two for interpolation.
        #[arg(long = "ref")]
        refs: Vec<usize>,
        /// Interpolation weight on the first reference; repeatable.
        #[arg(long = "w")]
        weights: Vec<f64>,
        /// Number of prior draws.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Content ids to decode each profile with.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        contents: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate one checkpoint per system variant.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Repeat once per system variant.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Reuse a trained verifier instead of training one.
        #[arg(long)]
        verifier: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Regenerate tables and the plot from an evaluation directory.
    Report {
        /// Directory written by `eval`.
        #[arg(long)]
        from: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthMode {
    Prior,
    Interpolate,
    Encode,
}

pub fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::GenCorpus { config, common } => gen_corpus(&config, &common),
        Command::Train {
            config,
            corpus,
            resume,
            stop_after,
            common,
        } => train(&config, &corpus, resume.as_deref(), stop_after, &common),
        Command::Synthesize {
            checkpoint,
            mode,
            corpus,
            refs,
            weights,
            count,
            contents,
            common,
        } => synthesize(
            &checkpoint,
            &SynthArgs {
                mode,
                corpus,
                refs,
                weights,
                count,
                contents,
            },
            &common,
        ),
        Command::Eval {
            config,
            corpus,
            checkpoints,
            verifier,
            common,
        } => eval(&config, &corpus, &checkpoints, verifier.as_deref(), &common),
        Command::Report { from, common } => report(&from, &common),
    }
}

/// Creates `dir`, refusing a non-empty one unless forced.
fn prepare_out(dir: &Path, force: bool, allow_existing: bool) -> Result<(), Failure> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::conflict(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Failure::io("listing output directory", e))?
            .next()
            .is_some();
        if non_empty && !force && !allow_existing {
            return Err(Failure::conflict(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Failure::io("creating output directory", e))
}

fn load_config(
    path: &Path,
    seed_override: Option<u64>,
    apply: impl FnOnce(&mut RunConfig, u64),
) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed_override {
        apply(&mut cfg, s);
    }
    Ok(cfg)
}

/// Runs `body`, marking `stage` complete or failed in the manifest.
fn staged<T>(
    m: &mut ManifestWriter,
    stage: &str,
    body: impl FnOnce(&mut ManifestWriter) -> Result<T, Failure>,
) -> Result<T, Failure> {
    m.stage(stage, StageStatus::Pending)?;
    match body(m) {
        Ok(v) => {
            m.stage(stage, StageStatus::Complete)?;
            Ok(v)
        }
        Err(f) => {
            m.fail(stage, &f)?;
            Err(f)
        }
    }
}

// ---------------------------------------------------------------------------

fn gen_corpus(config: &Path, common: &Common) -> Result<String, Failure> {
    let cfg = load_config(config, common.seed_override, |c, s| c.corpus_seed = s)?;
    prepare_out(&common.out, common.force, false)?;
    let mut m = ManifestWriter::new(&common.out, "gen-corpus");
    m.store_config(&cfg.to_json())?;
    staged(&mut m, "gen_corpus", |m| {
        m.record_artifact("corpus_manifest", spvae::toycorpus::MANIFEST_FILE)?;
        m.record_artifact("frames", "frames")?;
        let corpus = split_speakers(
            &generate_corpus(&cfg.corpus_config())?,
            cfg.held_out_fraction,
            cfg.split_seed,
        )?;
        corpus.save(&common.out)?;
        Ok(format!(
            "wrote {} utterances from {} speakers ({} held out) to {}",
            corpus.utterances.len(),
            corpus.speakers.len(),
            corpus.held_out_speakers().len(),
            common.out.display()
        ))
    })
}

/// Loads a corpus and checks it was generated from the config's corpus
/// parameters with the config's split.
fn load_matching_corpus(dir: &Path, cfg: &RunConfig) -> Result<Corpus, Failure> {
    let corpus = Corpus::load(dir)?;
    if corpus.config != cfg.corpus_config() {
        return Err(Failure::config(format!(
            "corpus at {} was generated with different parameters than the run config",
            dir.display()
        )));
    }
    match &corpus.split {
        Some(s) if s.seed == cfg.split_seed => Ok(corpus),
        _ => Err(Failure::config("corpus has no speaker split matching split_seed")),
    }
}

const LOSS_HEADER: &str = "step,l1,kl,triplet,total\n";

fn loss_row(step: u64, l: &LossBreakdown) -> String {
    format!("{step},{},{},{},{}\n", l.l1_recon, l.kl, l.triplet, l.total)
}

/// History rows for steps before `step`, read back from an earlier run.
fn truncated_history(path: &Path, step: u64) -> Result<String, Failure> {
    let mut out = String::from(LOSS_HEADER);
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| Failure::io("reading loss history", e))?;
    for line in text.lines().skip(1) {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Failure::config(format!("malformed loss history line: {line}")))?;
        if s < step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn train(
    config: &Path,
    corpus_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
    common: &Common,
) -> Result<String, Failure> {
    let cfg = load_config(config, common.seed_override, |c, s| c.train_seed = s)?;
    // Resuming continues the run that already lives in `out`.
    prepare_out(&common.out, common.force, resume.is_some())?;
    let corpus = load_matching_corpus(corpus_dir, &cfg)?;
    let train_cfg = cfg.train_config();

    let mut trainer: Trainer<f64> = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config != train_cfg {
                return Err(Failure::config(format!(
                    "checkpoint {} was trained with a different configuration",
                    p.display()
                )));
            }
            ckpt.trainer()?
        }
        None => Trainer::new(train_cfg.clone(), &corpus)?,
    };
    let history_path = common.out.join("loss_history.csv");
    let mut history = if resume.is_some() {
        truncated_history(&history_path, trainer.step)?
    } else {
        LOSS_HEADER.to_string()
    };

    let mut m = ManifestWriter::new(&common.out, "train");
    m.store_config(&cfg.to_json())?;
    m.record_input("corpus", hash_path(corpus_dir)?)?;
    if let Some(p) = resume {
        m.record_input("resume_checkpoint", hash_path(p)?)?;
    }
    m.record_artifact("checkpoint", "checkpoint.json")?;
    m.record_artifact("loss_history", "loss_history.csv")?;
    if resume.is_none() && common.out.join("checkpoints").exists() {
        fs::remove_dir_all(common.out.join("checkpoints")).map_err(|e| Failure::io("clearing old checkpoints", e))?;
    }
    fs::create_dir_all(common.out.join("checkpoints")).map_err(|e| Failure::io("creating checkpoints dir", e))?;

    let frames = corpus_frames::<f64>(&corpus);
    let target = stop_after.unwrap_or(train_cfg.steps).min(train_cfg.steps);
    let every = cfg.checkpoint_every;
    let result = staged(&mut m, "train", |m| {
        while trainer.step < target {
            let next = ((trainer.step / every + 1) * every).min(target);
            let res = trainer.run(&corpus, &frames, next, |step, loss| {
                history.push_str(&loss_row(step, loss))
            });
            if let Err(e) = res {
                // The failing step is rejected before any update, so the
                // trainer still holds the last good state.
                write_file(&m.dir().join("loss_history.csv"), history.as_bytes())?;
                Checkpoint::capture(&trainer).save(&m.dir().join("checkpoint.json"))?;
                return Err(Failure::from_core(e));
            }
            if trainer.step.is_multiple_of(every) {
                let rel = format!("checkpoints/step_{:08}.json", trainer.step);
                m.record_artifact("periodic_checkpoint", &rel)?;
                Checkpoint::capture(&trainer).save(&m.dir().join(&rel))?;
            }
        }
        write_file(&m.dir().join("loss_history.csv"), history.as_bytes())?;
        Checkpoint::capture(&trainer).save(&m.dir().join("checkpoint.json"))?;
        Ok(())
    });
    result?;
    Ok(format!(
        "trained {} to step {} of {}; checkpoint in {}",
        cfg.variant,
        trainer.step,
        train_cfg.steps,
        common.out.display()
    ))
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    mode: SynthMode,
    corpus: Option<PathBuf>,
    refs: Vec<usize>,
    weights: Vec<f64>,
    count: usize,
    contents: Vec<usize>,
}

fn utterance_ref(index: usize) -> String {
    format!("utt:{index}")
}

fn synthesize(checkpoint: &Path, args: &SynthArgs, common: &Common) -> Result<String, Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let params: ModelParams<f64> = ckpt.model()?;
    let system = TrainedSystem::new(ckpt.config.variant, &params, ckpt.step)?;
    if let Some(&c) = args.contents.iter().find(|&&c| c >= params.dims.n_contents) {
        return Err(Failure::config(format!(
            "content id {c} out of range; the model knows {} contents",
            params.dims.n_contents
        )));
    }
    let need_refs = match args.mode {
        SynthMode::Prior => 0,
        SynthMode::Encode => 1,
        SynthMode::Interpolate => 2,
    };
    if args.mode == SynthMode::Interpolate && args.refs.len() != 2 {
        return Err(Failure::config(format!(
            "interpolate needs exactly two reference utterances (--ref), got {}",
            args.refs.len()
        )));
    }
    if args.mode == SynthMode::Encode && args.refs.is_empty() {
        return Err(Failure::config("encode needs at least one reference utterance (--ref)"));
    }
    if args.mode == SynthMode::Interpolate && args.weights.is_empty() {
        return Err(Failure::config("interpolate needs at least one weight (--w)"));
    }
    let corpus = match (&args.corpus, need_refs) {
        (_, 0) => None,
        (Some(dir), _) => Some((Corpus::load(dir)?, dir)),
        (None, _) => return Err(Failure::config("reference utterances need --corpus")),
    };

    prepare_out(&common.out, common.force, false)?;
    let mut m = ManifestWriter::new(&common.out, "synthesize");
    m.record_input("checkpoint", hash_path(checkpoint)?)?;
    if let Some((_, dir)) = &corpus {
        m.record_input("corpus", hash_path(dir)?)?;
    }
    staged(&mut m, "synthesize", |m| {
        let profiles = match args.mode {
            SynthMode::Prior => {
                let seed = common.seed_override.unwrap_or(0);
                let mut rng = rng_from(seed, &[tags::PRIOR]);
                system
                    .sample_profiles(args.count, &mut rng)
                    .into_iter()
                    .enumerate()
                    .map(|(i, z)| SyntheticProfile {
                        provenance: Provenance::PriorSample { seed, index: i as u64 },
                        z,
                    })
                    .collect::<Vec<_>>()
            }
            SynthMode::Encode | SynthMode::Interpolate => {
                let (corpus, _) = corpus.as_ref().unwrap();
                let frames = corpus_frames::<f64>(corpus);
                let mut encoded = Vec::new();
                for &u in &args.refs {
                    if u >= corpus.utterances.len() {
                        return Err(Failure::config(format!(
                            "reference utterance {u} out of range; the corpus has {}",
                            corpus.utterances.len()
                        )));
                    }
                    let p = if ckpt.config.variant.is_baseline() {
                        SyntheticProfile {
                            provenance: Provenance::Encoded {
                                utterance_ref: utterance_ref(u),
                            },
                            z: system.profile_of(corpus, &frames, u)?,
                        }
                    } else {
                        encode_profile(&params, &frames[u], &utterance_ref(u))?
                    };
                    encoded.push(p);
                }
                if args.mode == SynthMode::Encode {
                    encoded
                } else {
                    let (r1, r2) = (utterance_ref(args.refs[0]), utterance_ref(args.refs[1]));
                    args.weights
                        .iter()
                        .map(|&w| interpolate_profiles(&encoded[0], &r1, &encoded[1], &r2, w))
                        .collect::<Result<Vec<_>, _>>()?
                }
            }
        };
        m.record_artifact("profiles", "profiles.json")?;
        fs::create_dir_all(common.out.join("frames")).map_err(|e| Failure::io("creating frames dir", e))?;
        for i in 0..profiles.len() {
            for &c in &args.contents {
                m.record_artifact("decoded_frames", &frame_file(i, c))?;
            }
        }
        save_profiles(&common.out.join("profiles.json"), &profiles)?;
        for (i, p) in profiles.iter().enumerate() {
            for &c in &args.contents {
                write_frames(&common.out.join(frame_file(i, c)), &system.synthesize(&p.z, c)?)?;
            }
        }
        Ok(format!(
            "wrote {} profiles x {} contents to {}",
            profiles.len(),
            args.contents.len(),
            common.out.display()
        ))
    })
}

pub fn frame_file(profile: usize, content: usize) -> String {
    format!("frames/profile_{profile:04}_content_{content:03}.bin")
}

// ---------------------------------------------------------------------------

fn eval(
    config: &Path,
    corpus_dir: &Path,
    checkpoints: &[PathBuf],
    verifier: Option<&Path>,
    common: &Common,
) -> Result<String, Failure> {
    let cfg = load_config(config, common.seed_override, |c, s| c.eval_seed = s)?;
    let corpus = load_matching_corpus(corpus_dir, &cfg)?;
    let mut loaded = Vec::new();
    for p in checkpoints {
        let ckpt = Checkpoint::load(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
        loaded.push((p, ckpt));
    }
    let present: BTreeSet<SystemVariant> = loaded.iter().map(|(_, c)| c.config.variant).collect();
    if present.len() != loaded.len() {
        return Err(Failure::config(
            "more than one checkpoint given for the same system variant",
        ));
    }
    let missing: Vec<&str> = SystemVariant::ALL
        .into_iter()
        .filter(|v| !present.contains(v))
        .map(|v| v.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Failure::config(format!(
            "missing checkpoints for systems: {}",
            missing.join(", ")
        )));
    }
    loaded.sort_by_key(|(_, c)| c.config.variant);

    prepare_out(&common.out, common.force, false)?;
    let mut m = ManifestWriter::new(&common.out, "eval");
    m.store_config(&cfg.to_json())?;
    m.record_input("corpus", hash_path(corpus_dir)?)?;
    for (p, c) in &loaded {
        m.record_input(&format!("checkpoint:{}", c.config.variant), hash_path(p)?)?;
    }
    if let Some(p) = verifier {
        m.record_input("verifier", hash_path(p)?)?;
    }

    let frames = corpus_frames::<f64>(&corpus);
    let verifier = staged(&mut m, "verifier", |m| {
        m.record_artifact("verifier", "verifier.json")?;
        let v = match verifier {
            Some(p) => VerifierCheckpoint::load(p)?.restore()?,
            None => train_verifier::<f64>(&corpus, &cfg.verifier_config())?,
        };
        VerifierCheckpoint::capture(&v).save(&common.out.join("verifier.json"))?;
        Ok(v)
    })?;
    let eval_cfg = cfg.eval_config();
    let probe = staged(&mut m, "content_probe", |_| {
        Ok(ContentProbe::train(&corpus, &eval_cfg.probe)?)
    })?;
    let params: Vec<ModelParams<f64>> = loaded.iter().map(|(_, c)| c.model()).collect::<Result<_, _>>()?;
    let systems: Vec<TrainedSystem<'_, f64>> = loaded
        .iter()
        .zip(&params)
        .map(|((_, c), p)| TrainedSystem::new(c.config.variant, p, c.step))
        .collect::<Result<_, _>>()?;
    let (report, _) = staged(&mut m, "evaluate", |m| {
        for (role, path) in REPORT_FILES {
            m.record_artifact(role, path)?;
        }
        let inputs = EvalInputs {
            corpus: &corpus,
            frames: &frames,
            systems: &systems,
            verifier: &verifier,
            probe: &probe,
        };
        let (report, raw) = evaluate(&inputs, &eval_cfg)?;
        write_report(&common.out, &report, &raw)?;
        Ok((report, raw))
    })?;
    finish_tables(&report)
}

const REPORT_FILES: [(&str, &str); 6] = [
    ("report", "report.json"),
    ("raw_scores", "raw_scores.json"),
    ("far_table", "far_table.csv"),
    ("intelligibility_table", "intelligibility_table.csv"),
    ("similarity_curve", "similarity_curve.csv"),
    ("similarity_plot", "similarity_curve.svg"),
];

/// Tables as printed to the terminal; a table that could not be
/// normalized is an error after the files have been written.
fn finish_tables(report: &EvalReport) -> Result<String, Failure> {
    let text = render_tables(report);
    for (name, t) in [
        ("FAR", &report.far_table),
        ("intelligibility", &report.intelligibility_table),
    ] {
        if let Some(e) = &t.normalization_error {
            return Err(Failure::numeric(format!(
                "{text}\n{name} table could not be normalized: {e}"
            )));
        }
    }
    Ok(text)
}

fn report(from: &Path, common: &Common) -> Result<String, Failure> {
    let report = read_report(&from.join("report.json"))?;
    let raw = read_raw_scores(&from.join("raw_scores.json"))?;
    prepare_out(&common.out, common.force, false)?;
    let mut m = ManifestWriter::new(&common.out, "report");
    m.record_input("report", hash_path(&from.join("report.json"))?)?;
    m.record_input("raw_scores", hash_path(&from.join("raw_scores.json"))?)?;
    staged(&mut m, "report", |m| {
        for (role, path) in REPORT_FILES {
            m.record_artifact(role, path)?;
        }
        Ok(write_report(&common.out, &report, &raw)?)
    })?;
    finish_tables(&report)
}

pub fn render_tables(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "verifier held-out EER {:.4}, content probe accuracy {:.4}",
        report.verifier_eer, report.probe_accuracy
    );
    render_table(&mut s, "FAR relative to baseline", &report.far_table);
    render_table(
        &mut s,
        "Intelligibility error relative to baseline",
        &report.intelligibility_table,
    );
    let _ = writeln!(s, "\nDisentanglement (speaker R², content accuracy)");
    for (v, d) in &report.disentanglement {
        let _ = writeln!(
            s,
            "  {:<22}{:>8.4}{:>8.4}",
            v.as_str(),
            d.speaker_r2,
            d.content_accuracy
        );
    }
    s
}

fn render_table(s: &mut String, title: &str, t: &MetricTable) {
    let _ = writeln!(s, "\n{title}");
    let _ = write!(s, "  {:<22}", "system");
    for c in &t.columns {
        let _ = write!(s, "{c:>10}");
    }
    let _ = writeln!(s);
    for v in SystemVariant::ALL {
        if let Some(row) = t.row(v) {
            let _ = write!(s, "  {:<22}", v.as_str());
            for x in row {
                let _ = write!(s, "{x:>10.3}");
            }
            let _ = writeln!(s);
        }
    }
}
