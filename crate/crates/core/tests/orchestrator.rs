//! Jobs driven through the orchestrator the way the CLI drives them.

use std::collections::BTreeMap;
use std::path::Path;

use kfed::orchestrator::{
    check_policy, load_knowledge, report, run_config, run_job, JobConfig, JobError, KnowledgeModel,
};
use kfed::model_federation::VerticalProtocol;
use kfed::sandbox::{id_digest, ingest_csv, job_id_key, Normalization, PartyDataset, Schema};
use kfed::synth::{credit_scenario, horizontal_sites, write_party};
use kfed::transport::{AuditLog, PartyId};

const PARTIES: &str = r#"
[[party]]
id = "bank"
role = "label_holder"
data = "bank{suffix}.csv"
schema = "bank{suffix}.schema.toml"

[[party]]
id = "bureau"
role = "data"
data = "bureau{suffix}.csv"
schema = "bureau{suffix}.schema.toml"

[[party]]
id = "coordinator"
role = "arbitrator"
"#;

/// Writes a small credit scenario plus learn and apply configs.
fn credit_dir(dir: &Path, rounds: u32) {
    let z = Normalization::Zscore;
    let (bank, bureau) = credit_scenario(240, 5);
    write_party(&bank, dir, "bank", "default", z).unwrap();
    write_party(&bureau, dir, "bureau", "", z).unwrap();
    let (bank, bureau) = credit_scenario(60, 6);
    let bank = PartyDataset::from_parts("bank", bank.entity_ids().to_vec(), bank.columns().to_vec(), None).unwrap();
    write_party(&bank, dir, "bank_new", "", z).unwrap();
    write_party(&bureau, dir, "bureau_new", "", z).unwrap();

    let learn = format!(
        r#"[job]
id = "credit-learn"
kind = "learn"
level = "model"
layout = "cross_feature"
seed = 7
output = "runs/learn"
psi_group = "test256"

[policy]
he_enabled = true
alignment = "psi"
{}
[vertical]
rounds = {rounds}
learning_rate = 0.5
protocol = "label_transfer"
key_bits = 512
feature_threshold = 0.08
eval_fraction = 0.2
"#,
        PARTIES.replace("{suffix}", "")
    );
    let apply = format!(
        r#"[job]
id = "credit-apply"
kind = "apply"
level = "model"
layout = "cross_feature"
seed = 7
output = "runs/apply"
psi_group = "test256"
knowledge = "runs/learn/knowledge.json"

[policy]
he_enabled = true
alignment = "psi"
{}"#,
        PARTIES.replace("{suffix}", "_new")
    );
    std::fs::write(dir.join("learn.toml"), learn).unwrap();
    std::fs::write(dir.join("apply.toml"), apply).unwrap();
}

fn horizontal_dir(dir: &Path, masking: bool) {
    for (p, ds) in horizontal_sites(3, 80, 9).iter().enumerate() {
        write_party(ds, dir, &format!("site{p}"), "outcome", Normalization::None).unwrap();
    }
    let mut cfg = format!(
        "[job]\nid = \"h\"\nkind = \"learn\"\nlevel = \"model\"\nlayout = \"cross_sample\"\nseed = 2\noutput = \"runs/learn\"\n\n\
         [policy]\nmasking = {masking}\n\n[training]\nmodel = \"logistic\"\nrounds = 12\nlearning_rate = 0.5\n"
    );
    for p in 0..3 {
        cfg.push_str(&format!(
            "\n[[party]]\nid = \"site{p}\"\nrole = \"data\"\ndata = \"site{p}.csv\"\nschema = \"site{p}.schema.toml\"\n"
        ));
    }
    cfg.push_str("\n[[party]]\nid = \"coordinator\"\nrole = \"arbitrator\"\n");
    std::fs::write(dir.join("learn.toml"), cfg).unwrap();
}

#[test]
fn vertical_apply_scores_match_the_stored_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    credit_dir(dir, 8);
    let learned = run_job(&dir.join("learn.toml")).unwrap();
    assert_eq!(learned.metrics.len(), 8);
    let applied = run_job(&dir.join("apply.toml")).unwrap();

    let k = load_knowledge(&dir.join("runs/learn/knowledge.json")).unwrap();
    let KnowledgeModel::Vertical { model } = &k.model else { panic!("expected a vertical model") };
    // Recompute every score from the raw files, the stored transforms and
    // the stored weights.
    let load = |party: &str, stem: &str, features: &[String]| -> BTreeMap<String, Vec<f64>> {
        let schema = Schema::load(&dir.join(format!("{stem}.schema.toml"))).unwrap();
        let raw = ingest_csv(&dir.join(format!("{stem}.csv")), &schema, PartyId::new(party)).unwrap();
        let scaled = k.preprocessing[&PartyId::new(party)].apply(&raw).unwrap();
        let names: Vec<&str> = features.iter().map(String::as_str).collect();
        let rows = scaled.select_columns(&names).unwrap().rows();
        raw.entity_ids().iter().cloned().zip(rows).collect()
    };
    let a = load("bank", "bank_new", &model.label_features);
    let b = load("bureau", "bureau_new", &model.feature_features);
    let key = job_id_key("credit-apply", "");
    let expected: BTreeMap<String, f64> = a
        .iter()
        .filter_map(|(id, xa)| b.get(id).map(|xb| (id_digest(&key, id), model.predict(xa, xb))))
        .collect();
    assert!(!expected.is_empty());
    assert_eq!(applied.judgements.len(), expected.len());
    for j in &applied.judgements {
        assert_eq!(j.party, PartyId::new("bank"));
        let want = expected[&j.entity];
        assert!((j.score - want).abs() <= 1e-12, "{}: {} vs {want}", j.entity, j.score);
    }
}

#[test]
fn transcripts_outside_the_policy_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    horizontal_dir(dir, true);
    let cfg = JobConfig::load(&dir.join("learn.toml")).unwrap();
    run_config(&cfg).unwrap();
    let log = AuditLog::load(&dir.join("runs/learn/audit.log")).unwrap();
    check_policy(&cfg, &log).unwrap();

    // the same transcript under a policy without masking: control traffic
    // for the mask agreement is not allowed
    let mut unmasked = cfg.clone();
    unmasked.policy.masking = false;
    assert!(matches!(check_policy(&unmasked, &log), Err(JobError::Policy(_))));

    // model updates under a knowledge-level job
    let mut other = cfg.clone();
    other.job.level = kfed::orchestrator::Level::Knowledge;
    let err = check_policy(&other, &log).unwrap_err();
    assert!(err.to_string().contains("not permitted"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn vertical_policy_follows_the_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    credit_dir(dir, 3);
    let cfg = JobConfig::load(&dir.join("learn.toml")).unwrap();
    run_config(&cfg).unwrap();
    let log = AuditLog::load(&dir.join("runs/learn/audit.log")).unwrap();
    let mut plain = cfg.clone();
    let v = plain.vertical.as_mut().unwrap();
    v.protocol = VerticalProtocol::Plaintext;
    v.feature_threshold = None;
    assert!(matches!(check_policy(&plain, &log), Err(JobError::Policy(_))));
}

#[test]
fn report_has_one_row_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    horizontal_dir(dir, false);
    let summary = run_job(&dir.join("learn.toml")).unwrap();
    let rep = report(&summary.output_dir).unwrap();
    assert_eq!(rep.rounds, 12);
    assert_eq!(rep.job_id, "h");
    let curve = std::fs::read_to_string(summary.output_dir.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 13);
    assert!(rep.final_loss.unwrap() < rep.first_loss.unwrap());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for r in &roots {
        horizontal_dir(r.path(), true);
        run_job(&r.path().join("learn.toml")).unwrap();
    }
    for f in ["metrics.csv", "knowledge.json", "audit.log", "manifest.txt"] {
        let [a, b] = [&roots[0], &roots[1]].map(|r| std::fs::read(r.path().join("runs/learn").join(f)).unwrap());
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn apply_needs_the_learned_knowledge() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    credit_dir(dir, 2);
    let cfg = JobConfig::load(&dir.join("apply.toml")).unwrap();
    cfg.check_data_inputs().unwrap();
    let err = run_config(&cfg).unwrap_err();
    assert!(err.to_string().contains("run the learn job first"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn stored_knowledge_of_another_layout_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    credit_dir(dir, 2);
    // replaces the credit learn.toml; its runs/learn holds a cross-sample model
    horizontal_dir(dir, false);
    run_job(&dir.join("learn.toml")).unwrap();
    let err = run_job(&dir.join("apply.toml")).unwrap_err();
    assert!(err.to_string().contains("stored knowledge is model cross_sample"), "{err}");
}
