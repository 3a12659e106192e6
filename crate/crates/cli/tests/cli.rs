use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evklab::experiment::{
    read_metrics_csv, Artifact, BenchRecord, EditRecord, MetricsRow, RunManifest, BENCH_JSON, CORPUS_FILE,
    MANIFEST_FILE, METRICS_CSV, METRICS_JSON, OUTCOME_FILE, POST_CHECKPOINT, PRE_CHECKPOINT, SUMMARY_CSV,
    TRAIN_LOG_FILE,
};
use evklab::model::{load, TrainLog};
use serde_json::json;

const TINY: &str = r#"{
    "corpus": {"n_subjects": 12, "n_relations": 2, "n_objects": 4, "templates_per_relation": 2,
               "n_edits": 4, "neighbors_per_request": 2},
    "model": {"n_layers": 2, "d_model": 16, "d_ff": 32, "n_heads": 2},
    "train": {"steps": 60, "eval_every": 20},
    "edit": {"k0_samples": 64, "v_steps": 6, "align": {"k_early": 2, "k_late": 4}},
    "bench": {"samples_per_prompt": 2},
    "eval": {"decode_length": 5},
    "rounds": 2,
    "batch": 2
}"#;

fn evklab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evklab"))
        .args(args)
        .env("EVKLAB_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = evklab(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Run {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("config.json");
        fs::write(&path, config).unwrap();
        let out = tmp.path().join("out");
        Self {
            config: path,
            out,
            _tmp: tmp,
        }
    }

    fn cmd(&self, command: &str, extra: &[&str]) -> String {
        let mut args = vec![
            command,
            "--config",
            self.config.to_str().unwrap(),
            "--out",
            self.out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        ok(&args)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn bytes(&self, name: &str) -> Vec<u8> {
        fs::read(self.file(name)).unwrap()
    }
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn pipeline_commands_produce_consistent_artifacts() {
    let run = Run::new(TINY);
    run.cmd("gen-corpus", &[]);
    let corpus_bytes = run.bytes(CORPUS_FILE);
    run.cmd("gen-corpus", &[]);
    assert_eq!(run.bytes(CORPUS_FILE), corpus_bytes);

    run.cmd("train", &[]);
    let log: Artifact<TrainLog> = read(&run.file(TRAIN_LOG_FILE));
    assert!(log.data.rows.windows(2).all(|w| w[0].step < w[1].step));
    assert_eq!(log.config.corpus.n_subjects, 12);

    // Resuming with zero steps leaves the checkpoint byte-identical.
    let pre = run.bytes(PRE_CHECKPOINT);
    run.cmd("train", &["--resume"]);
    assert_ne!(run.bytes(PRE_CHECKPOINT), pre, "resume trains further");
    let pre = run.bytes(PRE_CHECKPOINT);
    let zero = TINY.replace(r#""steps": 60"#, r#""steps": 0"#);
    fs::write(&run.config, &zero).unwrap();
    run.cmd("train", &["--resume"]);
    assert_eq!(run.bytes(PRE_CHECKPOINT), pre);
    fs::write(&run.config, TINY).unwrap();

    let printed = run.cmd("edit", &[]);
    assert!(printed.contains("round 1"), "{printed}");
    let outcome: Artifact<EditRecord> = read(&run.file(OUTCOME_FILE));
    assert_eq!(outcome.data.requests.len(), 4);
    assert_eq!(outcome.data.rounds.len(), 2);
    let m_pre = load(&run.file(PRE_CHECKPOINT)).unwrap();
    let m_post = load(&run.file(POST_CHECKPOINT)).unwrap();
    for (l, &n) in outcome.data.checkpoint_delta_norms.iter().enumerate() {
        let diff = m_post.w_out(l).sub(m_pre.w_out(l)).unwrap().frobenius_norm();
        assert_eq!(diff, n);
    }
    // Only layer 0 is edited; the per-round norms add up to at least the total.
    let per_round: f64 = outcome.data.rounds.iter().map(|r| r.edit.delta_norms[0]).sum();
    assert!(per_round + 1e-12 >= outcome.data.checkpoint_delta_norms[0]);
    assert_eq!(outcome.data.checkpoint_delta_norms[1], 0.0);

    run.cmd("bench", &[]);
    let bench: Artifact<BenchRecord> = read(&run.file(BENCH_JSON));
    assert_eq!(bench.data.post.es.len(), 4 * 2);
    assert_eq!(bench.data.pre.es_score, 100.0);
    assert_eq!(bench.data.pre.ts_score, Some(100.0));
    assert!(bench.data.pre.es.iter().all(|&x| x == 1.0));

    run.cmd("eval", &[]);
    let metrics: Artifact<Vec<MetricsRow>> = read(&run.file(METRICS_JSON));
    assert_eq!(metrics.data.len(), 4);
    let csv_rows = read_metrics_csv(&run.bytes(METRICS_CSV)).unwrap();
    assert_eq!(csv_rows.len(), metrics.data.len());
    for (c, j) in csv_rows.iter().zip(&metrics.data) {
        assert_eq!(c.model, j.model);
        assert_eq!(c.style, j.report.style);
        assert_eq!(c.efficacy, j.report.efficacy);
        assert_eq!(c.specificity, j.report.specificity);
        assert_eq!(c.fluency, j.report.fluency);
        assert_eq!(c.consistency, j.report.consistency);
    }
    for r in metrics.data.iter().filter(|r| r.model == "pre") {
        assert_eq!(r.report.specificity, 1.0);
    }

    run.cmd("report", &[]);
    let summary = fs::read_to_string(run.file(SUMMARY_CSV)).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next().unwrap(), "model,style,Eff.,Gen.,Spe.,Flu.,Consis.,ES,TS");
    let post_zsre: Vec<&str> = lines.find(|l| l.starts_with("post,zsre_top1")).unwrap().split(',').collect();
    let post = metrics.data.iter().find(|r| r.model == "post").unwrap();
    assert_eq!(post_zsre[2].parse::<f64>().unwrap(), post.report.efficacy);
    assert_eq!(post_zsre[7].parse::<f64>().unwrap(), bench.data.post.es_score);

    let manifest: RunManifest = read(&run.file(MANIFEST_FILE));
    assert!(manifest.verify(&run.out).is_empty());
    assert!(manifest.version.starts_with('v'));
    for phase in ["gen-corpus", "train", "edit", "bench", "eval", "report"] {
        assert!(manifest.timings.contains_key(phase), "{phase}");
    }
}

#[test]
fn align_off_and_zero_lambda_give_identical_checkpoints() {
    let base = Run::new(TINY);
    base.cmd("gen-corpus", &[]);
    base.cmd("train", &[]);
    let edit_with = |flags: &[&str]| {
        let r = Run::new(TINY);
        fs::create_dir_all(&r.out).unwrap();
        for f in [CORPUS_FILE, PRE_CHECKPOINT] {
            fs::copy(base.file(f), r.file(f)).unwrap();
        }
        r.cmd("edit", flags);
        r.bytes(POST_CHECKPOINT)
    };
    let off = edit_with(&["--align", "off"]);
    let zero = edit_with(&["--lambda", "0"]);
    let on = edit_with(&["--align", "on"]);
    assert_eq!(off, zero);
    assert_ne!(off, on);
}

#[test]
fn failed_edit_leaves_only_the_pre_edit_checkpoint() {
    let run = Run::new(TINY);
    run.cmd("gen-corpus", &[]);
    run.cmd("train", &[]);
    let out = evklab(&[
        "edit",
        "--config",
        run.config.to_str().unwrap(),
        "--out",
        run.out.to_str().unwrap(),
        "--rounds",
        "3",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("need 6 requests"));
    assert!(run.file(PRE_CHECKPOINT).exists());
    assert!(!run.file(POST_CHECKPOINT).exists());
    assert!(!run.file(OUTCOME_FILE).exists());
    let leftovers: Vec<_> = fs::read_dir(&run.out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn counterfact_requests_are_ingested() {
    let run = Run::new(TINY);
    run.cmd("gen-corpus", &[]);
    run.cmd("train", &[]);
    let corpus: Artifact<evklab::corpus::Corpus> = read(&run.file(CORPUS_FILE));
    let c = &corpus.data;
    let records: Vec<_> = c.requests[..4]
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let word = |t: usize| c.vocabulary.word(t).unwrap().to_string();
            let prompt = r.prompt.text.replace(&r.subject, "{}");
            json!({
                "case_id": 100 + i,
                "requested_rewrite": {
                    "prompt": prompt,
                    "subject": r.subject,
                    "relation_id": r.relation,
                    "target_new": {"str": word(r.target_new)},
                    "target_true": {"str": word(r.target_true)}
                },
                "paraphrase_prompts": r.paraphrase_prompts.iter().map(|p| &p.text).collect::<Vec<_>>(),
                "neighborhood_prompts": r.neighborhood_prompts.iter().map(|p| &p.text).collect::<Vec<_>>(),
                "attribute_prompts": r.attribution_prompts.iter().map(|p| &p.text).collect::<Vec<_>>()
            })
        })
        .collect();
    let path = run.out.join("requests.json");
    fs::write(&path, serde_json::to_vec(&records).unwrap()).unwrap();
    run.cmd("edit", &["--requests", path.to_str().unwrap()]);
    let outcome: Artifact<EditRecord> = read(&run.file(OUTCOME_FILE));
    let ids: Vec<usize> = outcome.data.requests.iter().map(|r| r.case_id).collect();
    assert_eq!(ids, vec![100, 101, 102, 103]);
    for (got, want) in outcome.data.requests.iter().zip(&c.requests) {
        assert_eq!(got.prompt.tokens, want.prompt.tokens);
        assert_eq!(got.target_new, want.target_new);
    }
}

#[test]
fn bad_configs_and_flags_are_rejected() {
    let run = Run::new(r#"{"seed": 1, "rounds_": 2}"#);
    let out = evklab(&["gen-corpus", "--config", run.config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds_"));

    let run = Run::new(TINY);
    let out = evklab(&[
        "edit",
        "--config",
        run.config.to_str().unwrap(),
        "--align",
        "off",
        "--lambda",
        "0.3",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("conflicts"));

    let out = Command::new(env!("CARGO_BIN_EXE_evklab"))
        .args(["report", "--out", run.out.to_str().unwrap()])
        .env("EVKLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("EVKLAB_THREADS"));
}

#[test]
fn report_on_empty_directory_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evklab(&["report", "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("metrics.json"), "{stderr}");
    assert!(stderr.contains("bench.json"), "{stderr}");
    assert_eq!(
        fs::read_to_string(tmp.path().join(SUMMARY_CSV)).unwrap().trim(),
        "model,style,Eff.,Gen.,Spe.,Flu.,Consis.,ES,TS"
    );
}
