use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kfed::sandbox::Normalization;
use kfed::synth::{horizontal_sites, write_party};

fn kfed(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kfed")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

#[test]
fn every_shipped_config_validates() {
    let mut seen = 0;
    for scenario in std::fs::read_dir(demo()).unwrap() {
        let scenario = scenario.unwrap().path();
        for f in std::fs::read_dir(&scenario).unwrap() {
            let f = f.unwrap().path();
            if f.extension().is_some_and(|e| e == "toml") && !f.to_string_lossy().ends_with(".schema.toml") {
                let o = kfed(&["validate", f.file_name().unwrap().to_str().unwrap()], &scenario);
                assert_eq!(code(&o), 0, "{}: {}", f.display(), text(&o));
                assert!(text(&o).starts_with("ok: job "), "{}", text(&o));
                seen += 1;
            }
        }
    }
    assert!(seen >= 12, "only {seen} configs found");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&kfed(&["frobnicate"], tmp.path())), 2);
    assert_eq!(code(&kfed(&[], tmp.path())), 2);
    assert_eq!(code(&kfed(&["validate", "missing.toml"], tmp.path())), 2);

    std::fs::write(tmp.path().join("bad.toml"), "[job]\nid = \"x\"\nkind = \"learn\"\n").unwrap();
    let o = kfed(&["run", "bad.toml"], tmp.path());
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("error:"));
}

#[test]
fn keygen_writes_a_secret_and_prints_the_public_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kfed(&["keygen", "--out", "k.hex", "--party", "site0"], tmp.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let secret = std::fs::read_to_string(tmp.path().join("k.hex")).unwrap();
    assert_eq!(secret.trim().len(), 64);
    assert!(!text(&o).contains(secret.trim()), "the secret must not be printed");
}

fn sites(dir: &Path, n: usize) {
    for (p, ds) in horizontal_sites(n, 60, 5).iter().enumerate() {
        write_party(ds, dir, &format!("site{p}"), "outcome", Normalization::None).unwrap();
    }
}

#[test]
fn psi_and_audit_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    sites(dir, 2);
    let party = |file: &str, id: &str, stem: &str| {
        std::fs::write(dir.join(file), format!("id = \"{id}\"\ndata = \"{stem}.csv\"\nschema = \"{stem}.schema.toml\"\n")).unwrap()
    };
    party("p0.toml", "site0", "site0");
    party("p1.toml", "site1", "site1");
    party("same.toml", "other", "site0");
    let o = kfed(&["psi", "p0.toml", "p1.toml", "--group", "test256"], dir);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("intersection size: 0"), "{}", text(&o));
    let o = kfed(&["psi", "p0.toml", "same.toml", "--group", "test256", "--audit-out", "psi.log"], dir);
    assert!(text(&o).contains("intersection size: 60"), "{}", text(&o));

    let first_id = std::fs::read_to_string(dir.join("site0.csv")).unwrap().lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    std::fs::write(dir.join("ids.txt"), format!("first id={first_id}\n")).unwrap();
    let clean = kfed(&["audit", "psi.log", "--forbid", "ids.txt"], dir);
    assert_eq!(code(&clean), 0, "{}", text(&clean));

    // a log that does carry the id is reported with exit 1
    std::fs::write(dir.join("leaky.txt"), format!("some record mentioning {first_id}\n")).unwrap();
    std::fs::create_dir(dir.join("run")).unwrap();
    std::fs::rename(dir.join("leaky.txt"), dir.join("run/leaky.txt")).unwrap();
    let leak = kfed(&["audit", "run", "--forbid", "ids.txt"], dir);
    assert_eq!(code(&leak), 1, "{}", text(&leak));
    assert!(text(&leak).contains("first id"), "{}", text(&leak));
}

fn horizontal_config(dir: &Path, party_extra: &[String]) {
    let mut cfg = format!(
        "[job]\nid = \"h-cli\"\nkind = \"learn\"\nlevel = \"model\"\nlayout = \"cross_sample\"\nseed = 4\noutput = \"runs/learn\"\n\n\
         [policy]\nmasking = true\n\n[training]\nmodel = \"logistic\"\nrounds = 6\nlearning_rate = 0.5\nfeatures = [\"x1\", \"x2\", \"x3\"]\n"
    );
    for (p, e) in party_extra.iter().enumerate().take(2) {
        cfg.push_str(&format!("\n[[party]]\nid = \"site{p}\"\nrole = \"data\"\ndata = \"site{p}.csv\"\nschema = \"site{p}.schema.toml\"\n{e}"));
    }
    cfg.push_str(&format!("\n[[party]]\nid = \"coordinator\"\nrole = \"arbitrator\"\n{}", party_extra[2]));
    std::fs::write(dir.join("learn.toml"), cfg).unwrap();
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    sites(dir, 2);
    horizontal_config(dir, &[String::new(), String::new(), String::new()]);
    let o = kfed(&["run", "learn.toml"], dir);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let r = kfed(&["report", "runs/learn"], dir);
    assert_eq!(code(&r), 0, "{}", text(&r));
    let curve = std::fs::read_to_string(dir.join("runs/learn/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 7);
    assert_eq!(code(&kfed(&["report", "nowhere"], dir)), 1);
}

#[test]
fn socket_mode_matches_the_simulated_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    sites(dir, 2);
    let names = ["site0", "site1", "coordinator"];
    let mut publics = Vec::new();
    for n in names {
        let o = kfed(&["keygen", "--out", &format!("{n}.key")], dir);
        assert_eq!(code(&o), 0, "{}", text(&o));
        let out = String::from_utf8_lossy(&o.stdout).into_owned();
        let public = out.lines().find_map(|l| l.strip_prefix("public_key = ")).unwrap().trim_matches('"').to_string();
        publics.push(public);
    }
    let ports: Vec<u16> = (0..3)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port())
        .collect();
    let extra: Vec<String> = (0..3)
        .map(|i| format!("address = \"127.0.0.1:{}\"\npublic_key = \"{}\"\nkey_file = \"{}.key\"\n", ports[i], publics[i], names[i]))
        .collect();
    horizontal_config(dir, &extra);

    let children: Vec<_> = names
        .iter()
        .map(|n| {
            Command::new(env!("CARGO_BIN_EXE_kfed"))
                .args(["run", "learn.toml", "--party", n])
                .current_dir(dir)
                .stdout(std::process::Stdio::piped())
                .stderr(std::process::Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    for (n, c) in names.iter().zip(children) {
        let o = c.wait_with_output().unwrap();
        assert_eq!(code(&o), 0, "{n}: {}", text(&o));
    }
    let socket_metrics = std::fs::read(dir.join("runs/learn/metrics.csv")).unwrap();

    // the simulated run of the same job reaches the same model
    let sim = tempfile::tempdir().unwrap();
    sites(sim.path(), 2);
    horizontal_config(sim.path(), &[String::new(), String::new(), String::new()]);
    assert_eq!(code(&kfed(&["run", "learn.toml"], sim.path())), 0);
    assert_eq!(socket_metrics, std::fs::read(sim.path().join("runs/learn/metrics.csv")).unwrap());
}
