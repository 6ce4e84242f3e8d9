use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

use spvae::evalmetrics::{median, normalize_rows, read_raw_scores, read_report};
use spvae::latent::{encode_profile, load_profiles};
use spvae::toycorpus::{read_frames, Corpus};
use spvae::vae::{corpus_frames, Checkpoint, ModelParams, SystemVariant, Trainer};
use spvae::verify::threshold_from_percentile;
use spvae_cli::{RunConfig, RunManifest, StageStatus};

fn spvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spvae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small enough to train in well under a second per hundred steps.
fn tiny(variant: SystemVariant) -> RunConfig {
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
        train_steps: 150,
        checkpoint_every: 50,
        verifier_steps: 300,
        n_synthetic_profiles: 40,
        profile_counts: vec![1, 5],
        n_eval_seeds: 2,
        n_interpolation_pairs: 3,
        probe_noise_std: 0.5,
        probe_noise_draws: 50,
        corpus_seed: 21,
        split_seed: 3,
        train_seed: 5,
        ..RunConfig::defaults(variant)
    }
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn gen_corpus(root: &Path, cfg: &RunConfig) -> PathBuf {
    let c = write_config(root, "corpus_config.json", cfg);
    let out = root.join("corpus");
    ok(&["gen-corpus", "--config", s(&c), "--out", s(&out)]);
    out
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn files_in(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// gen-corpus

#[test]
fn gen_corpus_twice_gives_identical_files() {
    let tmp = TempDir::new().unwrap();
    let c = write_config(tmp.path(), "c.json", &tiny(SystemVariant::Vae));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-corpus", "--config", s(&c), "--out", s(&a)]);
    ok(&["gen-corpus", "--config", s(&c), "--out", s(&b)]);
    let (fa, fb) = (files_in(&a), files_in(&b));
    assert!(fa.len() > 16 * 8);
    assert_eq!(fa, fb);
}

#[test]
fn missing_field_exits_two_naming_it() {
    let tmp = TempDir::new().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&tiny(SystemVariant::Vae).to_json()).unwrap();
    v.as_object_mut().unwrap().remove("utts_per_speaker");
    let c = tmp.path().join("c.json");
    fs::write(&c, v.to_string()).unwrap();
    let out = spvae(&["gen-corpus", "--config", s(&c), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("utts_per_speaker"));
}

#[test]
fn corpus_manifest_lists_every_utterance() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny(SystemVariant::Vae);
    cfg.n_speakers = 11;
    cfg.utts_per_speaker = 7;
    let dir = gen_corpus(tmp.path(), &cfg);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("corpus.json")).unwrap()).unwrap();
    assert_eq!(doc["utterances"].as_array().unwrap().len(), 77);
    assert_eq!(fs::read_dir(dir.join("frames")).unwrap().count(), 77);
    let m = manifest(&dir);
    assert_eq!(m.stages["gen_corpus"], StageStatus::Complete);
    assert_eq!(
        m.config_hash.as_deref(),
        Some(spvae_cli::manifest::sha256_hex(&fs::read(dir.join("config.json")).unwrap()).as_str())
    );
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = TempDir::new().unwrap();
    let c = write_config(tmp.path(), "c.json", &tiny(SystemVariant::Vae));
    let out = tmp.path().join("o");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let r = spvae(&["gen-corpus", "--config", s(&c), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    ok(&["gen-corpus", "--config", s(&c), "--out", s(&out), "--force"]);
}

#[test]
fn inconsistent_variant_flags_exit_two() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny(SystemVariant::Vae);
    cfg.shuffle = true;
    let c = tmp.path().join("c.json");
    fs::write(&c, cfg.to_json()).unwrap();
    let out = spvae(&["gen-corpus", "--config", s(&c), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shuffle"));
}

#[test]
fn seed_override_changes_the_corpus_and_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let c = write_config(tmp.path(), "c.json", &tiny(SystemVariant::Vae));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-corpus", "--config", s(&c), "--out", s(&a)]);
    ok(&["gen-corpus", "--config", s(&c), "--out", s(&b), "--seed-override", "99"]);
    assert_ne!(
        fs::read(a.join("corpus.json")).unwrap(),
        fs::read(b.join("corpus.json")).unwrap()
    );
    let stored = RunConfig::load(&b.join("config.json")).unwrap();
    assert_eq!(stored.corpus_seed, 99);
}

// ---------------------------------------------------------------------------
// train

fn loss_history(dir: &Path) -> BTreeMap<u64, f64> {
    fs::read_to_string(dir.join("loss_history.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect()
}

#[test]
fn smoke_run_lowers_the_loss() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny(SystemVariant::VaeTripletShuffle);
    cfg.n_speakers = 4;
    cfg.train_steps = 600;
    cfg.checkpoint_every = 200;
    let corpus = gen_corpus(tmp.path(), &cfg);
    let c = write_config(tmp.path(), "train.json", &cfg);
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&c), "--corpus", s(&corpus), "--out", s(&out)]);
    let h = loss_history(&out);
    assert_eq!(h.len(), 600);
    assert!(h[&500] < h[&10], "{} vs {}", h[&500], h[&10]);
    for k in [200, 400, 600] {
        assert!(out.join(format!("checkpoints/step_{k:08}.json")).exists());
    }
    assert_eq!(manifest(&out).stages["train"], StageStatus::Complete);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny(SystemVariant::VaeTripletShuffle);
    cfg.train_steps = 70;
    cfg.checkpoint_every = 20;
    let corpus = gen_corpus(tmp.path(), &cfg);
    let c = write_config(tmp.path(), "train.json", &cfg);
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    ok(&["train", "--config", s(&c), "--corpus", s(&corpus), "--out", s(&full)]);
    ok(&[
        "train",
        "--config",
        s(&c),
        "--corpus",
        s(&corpus),
        "--out",
        s(&part),
        "--stop-after",
        "33",
    ]);
    assert_eq!(Checkpoint::load(&part.join("checkpoint.json")).unwrap().step, 33);
    // Resume from the checkpoint that lands mid-epoch and off the save grid.
    let resume = tmp.path().join("resume.json");
    fs::copy(part.join("checkpoint.json"), &resume).unwrap();
    ok(&[
        "train",
        "--config",
        s(&c),
        "--corpus",
        s(&corpus),
        "--out",
        s(&part),
        "--resume",
        s(&resume),
    ]);
    assert_eq!(
        fs::read(full.join("checkpoint.json")).unwrap(),
        fs::read(part.join("checkpoint.json")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("loss_history.csv")).unwrap(),
        fs::read(part.join("loss_history.csv")).unwrap()
    );
}

#[test]
fn each_variant_updates_only_its_parameter_blocks() {
    let tmp = TempDir::new().unwrap();
    let base = tiny(SystemVariant::Vae);
    let corpus_dir = gen_corpus(tmp.path(), &base);
    let corpus = Corpus::load(&corpus_dir).unwrap();
    for v in [SystemVariant::BaselineLookup, SystemVariant::Vae] {
        let mut cfg = tiny(v);
        cfg.train_steps = 30;
        cfg.checkpoint_every = 30;
        let c = write_config(tmp.path(), &format!("{v}.json"), &cfg);
        let out = tmp.path().join(v.as_str());
        ok(&["train", "--config", s(&c), "--corpus", s(&corpus_dir), "--out", s(&out)]);
        let trained = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
        let init = Checkpoint::capture(&Trainer::<f64>::new(cfg.train_config(), &corpus).unwrap());
        for (a, b) in trained.params.iter().zip(&init.params) {
            assert_eq!(a.name, b.name);
            let moved = a.data != b.data;
            let expected = v.trains_block(&a.name);
            assert_eq!(moved, expected, "{v}: block {}", a.name);
        }
        if v.is_baseline() {
            assert!(trained.params.iter().any(|p| p.name.starts_with("baseline.")));
        }
    }
}

#[test]
fn nan_loss_exits_four_and_keeps_the_last_good_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny(SystemVariant::Vae);
    cfg.learning_rate = 1e300;
    let corpus = gen_corpus(tmp.path(), &cfg);
    let c = write_config(tmp.path(), "train.json", &cfg);
    let out = tmp.path().join("run");
    let r = spvae(&["train", "--config", s(&c), "--corpus", s(&corpus), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert!(ckpt.step < cfg.train_steps);
    assert!(ckpt.params.iter().all(|p| p.data.iter().all(|x| x.is_finite())));
    assert_eq!(loss_history(&out).len() as u64, ckpt.step);
    let m = manifest(&out);
    assert_eq!(m.stages["train"], StageStatus::Failed);
    assert!(m.failure.unwrap().contains("non-finite"));
}

// ---------------------------------------------------------------------------
// Trained systems shared by the synthesis and evaluation tests

struct Trained {
    _tmp: TempDir,
    root: PathBuf,
    corpus: PathBuf,
    config: PathBuf,
    checkpoints: BTreeMap<SystemVariant, PathBuf>,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        let corpus = gen_corpus(&root, &tiny(SystemVariant::Vae));
        let mut checkpoints = BTreeMap::new();
        for v in SystemVariant::ALL {
            let c = write_config(&root, &format!("{v}.json"), &tiny(v));
            let out = root.join(format!("run_{v}"));
            ok(&["train", "--config", s(&c), "--corpus", s(&corpus), "--out", s(&out)]);
            checkpoints.insert(v, out.join("checkpoint.json"));
        }
        let config = write_config(&root, "eval.json", &tiny(SystemVariant::VaeTripletShuffle));
        Trained {
            _tmp: tmp,
            root,
            corpus,
            config,
            checkpoints,
        }
    })
}

fn fresh_dir(name: &str) -> PathBuf {
    let t = trained();
    let mut i = 0;
    loop {
        let p = t.root.join(format!("{name}_{i}"));
        if fs::create_dir(&p).is_ok() {
            return p;
        }
        i += 1;
    }
}

// ---------------------------------------------------------------------------
// synthesize

#[test]
fn interpolation_at_w_one_decodes_like_reference_one() {
    let t = trained();
    // The baseline can only look up training speakers.
    let corpus = Corpus::load(&t.corpus).unwrap();
    let train = corpus.train_utterances();
    let u1 = train[0];
    let u2 = *train
        .iter()
        .find(|&&u| corpus.utterances[u].speaker_id != corpus.utterances[u1].speaker_id)
        .unwrap();
    let (u1, u2) = (u1.to_string(), u2.to_string());
    for v in SystemVariant::ALL {
        let ck = s(&t.checkpoints[&v]);
        let (a, b) = (fresh_dir("interp"), fresh_dir("enc"));
        #[rustfmt::skip]
        ok(&["synthesize", "--checkpoint", ck, "--mode", "interpolate", "--corpus", s(&t.corpus),
             "--ref", &u1, "--ref", &u2, "--w", "1", "--contents", "0,2", "--out", s(&a), "--force"]);
        #[rustfmt::skip]
        ok(&["synthesize", "--checkpoint", ck, "--mode", "encode", "--corpus", s(&t.corpus),
             "--ref", &u1, "--contents", "0,2", "--out", s(&b), "--force"]);
        for c in [0, 2] {
            let f = spvae_cli::commands::frame_file(0, c);
            assert_eq!(
                fs::read(a.join(&f)).unwrap(),
                fs::read(b.join(&f)).unwrap(),
                "{v} content {c}"
            );
        }
    }
}

#[test]
fn prior_sampling_is_reproducible() {
    let t = trained();
    let ck = s(&t.checkpoints[&SystemVariant::VaeTripletShuffle]);
    let run = |seed: &str| {
        let d = fresh_dir("prior");
        #[rustfmt::skip]
        ok(&["synthesize", "--checkpoint", ck, "--mode", "prior", "--count", "5",
             "--seed-override", seed, "--out", s(&d), "--force"]);
        files_in(&d)
    };
    let (a, b, c) = (run("4"), run("4"), run("5"));
    assert_eq!(a, b);
    assert_ne!(a["profiles.json"], c["profiles.json"]);
    assert_eq!(a.keys().filter(|k| k.ends_with(".bin")).count(), 5);
}

#[test]
fn encoded_profiles_match_the_library_encoder() {
    let t = trained();
    let ckpt_path = &t.checkpoints[&SystemVariant::VaeTriplet];
    let d = fresh_dir("encode");
    #[rustfmt::skip]
    ok(&["synthesize", "--checkpoint", s(ckpt_path), "--mode", "encode", "--corpus", s(&t.corpus),
         "--ref", "0", "--ref", "17", "--out", s(&d), "--force"]);
    let profiles = load_profiles::<f64>(&d.join("profiles.json")).unwrap();
    let corpus = Corpus::load(&t.corpus).unwrap();
    let frames = corpus_frames::<f64>(&corpus);
    let params: ModelParams<f64> = Checkpoint::load(ckpt_path).unwrap().model().unwrap();
    for (p, u) in profiles.iter().zip([0, 17]) {
        let expected = encode_profile(&params, &frames[u], &format!("utt:{u}")).unwrap();
        assert_eq!(p, &expected);
    }
    let decoded = read_frames(&d.join(spvae_cli::commands::frame_file(1, 0))).unwrap();
    assert_eq!(decoded, params.decode(&profiles[1].z, 0).unwrap());
}

#[test]
fn interpolation_without_two_references_exits_two() {
    let t = trained();
    let d = fresh_dir("bad");
    #[rustfmt::skip]
    let r = spvae(&["synthesize", "--checkpoint", s(&t.checkpoints[&SystemVariant::Vae]), "--mode", "interpolate",
                    "--corpus", s(&t.corpus), "--ref", "1", "--w", "0.5", "--out", s(&d), "--force"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("two reference"));
}

// ---------------------------------------------------------------------------
// eval and report

fn run_eval(extra: &[&str]) -> (PathBuf, Output) {
    let t = trained();
    let d = fresh_dir("eval");
    let mut args = vec![
        "eval".to_string(),
        "--config".into(),
        s(&t.config).into(),
        "--corpus".into(),
        s(&t.corpus).into(),
        "--out".into(),
        s(&d).into(),
        "--force".into(),
    ];
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    (d.clone(), spvae(&refs))
}

fn all_checkpoint_args() -> Vec<String> {
    trained()
        .checkpoints
        .values()
        .flat_map(|p| ["--checkpoint".to_string(), s(p).to_string()])
        .collect()
}

fn evaluated() -> &'static PathBuf {
    static E: OnceLock<PathBuf> = OnceLock::new();
    E.get_or_init(|| {
        let args = all_checkpoint_args();
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let (d, out) = run_eval(&refs);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        d
    })
}

#[test]
fn baseline_rows_are_exactly_one() {
    let d = evaluated();
    let report = read_report(&d.join("report.json")).unwrap();
    for t in [&report.far_table, &report.intelligibility_table] {
        assert!(t.normalization_error.is_none(), "{:?}", t.normalization_error);
        assert!(t.row(SystemVariant::BaselineLookup).unwrap().iter().all(|&x| x == 1.0));
    }
    let csv = fs::read_to_string(d.join("far_table.csv")).unwrap();
    assert!(
        csv.lines().any(|l| l == "baseline_lookup,1.000000,1.000000,1.000000"),
        "{csv}"
    );
    for f in [
        "similarity_curve.csv",
        "similarity_curve.svg",
        "intelligibility_table.csv",
        "verifier.json",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
    let m = manifest(d);
    for stage in ["verifier", "content_probe", "evaluate"] {
        assert_eq!(m.stages[stage], StageStatus::Complete);
    }
}

#[test]
fn rerunning_eval_reproduces_the_report_bytes() {
    let first = evaluated();
    let args = all_checkpoint_args();
    let mut refs: Vec<&str> = args.iter().map(String::as_str).collect();
    // Checkpoint order on the command line does not matter.
    refs.reverse();
    let mut pairs: Vec<[&str; 2]> = refs.chunks(2).map(|c| [c[1], c[0]]).collect();
    pairs.rotate_left(1);
    let refs: Vec<&str> = pairs.concat();
    let (second, out) = run_eval(&refs);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "report.json",
        "raw_scores.json",
        "far_table.csv",
        "similarity_curve.svg",
        "run_manifest.json",
    ] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn far_rows_recompute_from_raw_scores() {
    let d = evaluated();
    let report = read_report(&d.join("report.json")).unwrap();
    let raw = read_raw_scores(&d.join("raw_scores.json")).unwrap();
    let thresholds: Vec<f64> = raw
        .percentiles
        .iter()
        .map(|&p| threshold_from_percentile(&raw.genuine_scores, p).unwrap())
        .collect();
    let n_seeds = report.eval_seeds.len();
    let mut per_seed: Vec<BTreeMap<SystemVariant, Vec<f64>>> = vec![BTreeMap::new(); n_seeds];
    for (v, seeds) in &raw.synthetic_scores {
        for (i, scores) in seeds.iter().enumerate() {
            let far = thresholds
                .iter()
                .map(|&t| scores.iter().filter(|&&x| x >= t).count() as f64 / scores.len() as f64)
                .collect();
            per_seed[i].insert(*v, far);
        }
    }
    for v in SystemVariant::ALL {
        let raw_med: Vec<f64> = (0..thresholds.len())
            .map(|j| median(&per_seed.iter().map(|m| m[&v][j]).collect::<Vec<_>>()))
            .collect();
        let reported = &report.far_table.median_raw[&v];
        for (a, b) in raw_med.iter().zip(reported) {
            assert!((a - b).abs() <= 1e-12, "{v}: {a} vs {b}");
        }
    }
    if let Some(normalized) = &report.far_table.normalized {
        let per_seed_norm: Vec<_> = per_seed
            .iter()
            .map(|m| normalize_rows(m, SystemVariant::BaselineLookup).unwrap())
            .collect();
        for v in SystemVariant::ALL {
            for j in 0..thresholds.len() {
                let m = median(&per_seed_norm.iter().map(|r| r[&v][j]).collect::<Vec<_>>());
                assert!((m - normalized[&v][j]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn missing_variant_exits_two_listing_it() {
    let t = trained();
    let args = [
        "--checkpoint",
        s(&t.checkpoints[&SystemVariant::BaselineLookup]),
        "--checkpoint",
        s(&t.checkpoints[&SystemVariant::Vae]),
    ];
    let (_, out) = run_eval(&args);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("vae_triplet") && err.contains("vae_triplet_shuffle"),
        "{err}"
    );
}

#[test]
fn report_regenerates_the_tables() {
    let d = evaluated();
    let out = fresh_dir("report");
    let text = ok(&["report", "--from", s(d), "--out", s(&out), "--force"]);
    assert!(text.contains("baseline_lookup") && text.contains("p60"), "{text}");
    for f in [
        "far_table.csv",
        "intelligibility_table.csv",
        "similarity_curve.csv",
        "similarity_curve.svg",
    ] {
        assert_eq!(fs::read(d.join(f)).unwrap(), fs::read(out.join(f)).unwrap(), "{f}");
    }
}
