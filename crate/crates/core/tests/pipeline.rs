mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use neural_scoring::config::{Ablation, Precision, RunConfig};
use neural_scoring::evalkit::{ConditionMetrics, System};
use neural_scoring::pipeline::{
    cmd_eval, cmd_pretrain, cmd_probe, cmd_synth, cmd_train, train_dir, CONFIG_FILE, FINAL_CKPT,
};
use neural_scoring::synthcorpus::{read_trial_list, Condition};
use neural_scoring::Error;

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn every_stage_runs_and_repeats_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config(tmp.path());
    let out = tmp.path();

    let layout = cmd_synth(&cfg, false).unwrap();
    for c in Condition::ALL {
        assert!(layout.trial_list(c).is_file());
    }
    let pre = cmd_pretrain(&cfg, false).unwrap();
    assert!(pre.final_loss < pre.initial_loss);
    let train = cmd_train(&cfg, &[], false).unwrap();
    assert_eq!(train.checkpoint, train_dir(&cfg, &[]).join(FINAL_CKPT));
    for e in 1..=cfg.train.epochs {
        assert!(train_dir(&cfg, &[]).join(format!("epoch-{e:03}.ckpt")).is_file());
    }
    assert_eq!(lines(&train_dir(&cfg, &[]).join("log.jsonl")), cfg.train.epochs);
    let ns = cmd_eval(&cfg, System::Ns, None, false).unwrap();
    let cos = cmd_eval(&cfg, System::Cosine, None, false).unwrap();
    for rows in [&ns, &cos] {
        assert_eq!(rows.len(), Condition::ALL.len() + 1);
        assert_eq!(rows.last().unwrap().condition, "overall");
        let pooled: usize = rows[..rows.len() - 1].iter().map(|r| r.n_target + r.n_nontarget).sum();
        let overall = rows.last().unwrap();
        assert_eq!(overall.n_target + overall.n_nontarget, pooled);
    }
    for c in Condition::ALL {
        let trials = read_trial_list(&layout.trial_list(c)).unwrap();
        for system in ["ns", "cosine"] {
            let dir = out.join("eval").join(system);
            assert_eq!(lines(&dir.join(format!("scores_{c}.txt"))), trials.len());
            assert!(dir.join(format!("det_{c}.csv")).is_file());
        }
    }
    let json: Vec<ConditionMetrics> =
        serde_json::from_str(&fs::read_to_string(out.join("eval/ns/metrics.json")).unwrap()).unwrap();
    assert_eq!(json, ns);

    cmd_probe(&cfg, None, false).unwrap();
    let probe = fs::read_to_string(out.join("probe/probe.csv")).unwrap();
    let rows: Vec<&str> = probe.lines().collect();
    assert_eq!(rows[0], "snr_db,cos_A,cos_B");
    assert_eq!(rows.len(), 1 + 7);
    for stage in ["corpus", "pretrain", "train/ns", "eval/ns", "eval/cosine", "probe"] {
        assert!(
            out.join(stage).join(CONFIG_FILE).is_file() || stage == "corpus",
            "{stage}"
        );
    }

    let first = snapshot(out);
    let final_ckpt = fs::read(train_dir(&cfg, &[]).join(FINAL_CKPT)).unwrap();
    cmd_synth(&cfg, true).unwrap();
    cmd_pretrain(&cfg, true).unwrap();
    cmd_train(&cfg, &[], true).unwrap();
    cmd_eval(&cfg, System::Ns, None, true).unwrap();
    cmd_eval(&cfg, System::Cosine, None, true).unwrap();
    cmd_probe(&cfg, None, true).unwrap();
    let second = snapshot(out);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        // Training logs carry wallclock time.
        if name.ends_with("log.jsonl") && name.starts_with("train") {
            continue;
        }
        assert!(bytes == &second[name], "{name} differs between runs");
    }
    assert_eq!(final_ckpt, fs::read(train_dir(&cfg, &[]).join(FINAL_CKPT)).unwrap());

    // Existing outputs are protected.
    for result in [
        cmd_synth(&cfg, false).map(|_| ()),
        cmd_pretrain(&cfg, false).map(|_| ()),
        cmd_train(&cfg, &[], false).map(|_| ()),
        cmd_eval(&cfg, System::Cosine, None, false).map(|_| ()),
        cmd_probe(&cfg, None, false).map(|_| ()),
    ] {
        assert!(matches!(result, Err(Error::Config(_))), "{result:?}");
    }

    // Ablations train into their own directories and evaluate with their
    // own architecture.
    let ablations = [Ablation::NoPe, Ablation::Layers(2)];
    let summary = cmd_train(&cfg, &ablations, false).unwrap();
    assert!(summary.checkpoint.ends_with("train/no-pe+layers=2/final.ckpt"));
    let sidecar = RunConfig::load(&summary.checkpoint.with_file_name(CONFIG_FILE)).unwrap();
    assert_eq!(sidecar.model.layers, 2);
    assert!(!sidecar.model.positional_encoding);
    cmd_eval(&cfg, System::Ns, Some(&summary.checkpoint), false).unwrap();
    assert!(out.join("eval/ns-no-pe+layers=2/metrics.json").is_file());

    let shared = cmd_train(&cfg, &[Ablation::SharedEncoder, Ablation::M(1)], false).unwrap();
    let sidecar = RunConfig::load(&shared.checkpoint.with_file_name(CONFIG_FILE)).unwrap();
    assert!(sidecar.model.shared_encoder);
    assert_eq!(sidecar.train.enrollments, 1);
    cmd_eval(&cfg, System::Ns, Some(&shared.checkpoint), false).unwrap();
}

#[test]
fn missing_inputs_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config(tmp.path());
    let e = cmd_eval(&cfg, System::Ns, Some(&tmp.path().join("nope.ckpt")), false).unwrap_err();
    assert!(matches!(e, Error::Data(_)));
    assert_eq!(e.exit_code(), 3);
    assert!(matches!(cmd_pretrain(&cfg, false), Err(Error::Data(_))));
    assert!(matches!(cmd_probe(&cfg, None, false), Err(Error::Data(_))));
}

#[test]
fn single_precision_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_run_config(tmp.path());
    cfg.precision = Precision::F32;
    cfg.train.epochs = 1;
    cfg.train.avg_last_k = 1;
    cmd_synth(&cfg, false).unwrap();
    cmd_pretrain(&cfg, false).unwrap();
    cmd_train(&cfg, &[], false).unwrap();
    let rows = cmd_eval(&cfg, System::Ns, None, false).unwrap();
    assert!(rows
        .iter()
        .all(|r| r.eer.is_finite() && (0.0..=1.0).contains(&r.min_dcf)));
}
