//! The `clockforge` binary: outputs, manifests and exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clockforge"))
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    bin()
        .arg(sub)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("CLOCKFORGE_OUT")
        .env_remove("CLOCKFORGE_THREADS")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn bounds_are_deterministic_and_manifested() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "n_atoms = [2, 5]\ndelta_phi = [0.2, 0.6]\n";
    let cfg = write(tmp.path(), "b.toml", text);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run("bounds", &cfg, &a, &["--threads", "1"]), 0);
    assert_eq!(run("bounds", &cfg, &b, &["--threads", "2"]), 0);
    let csv = fs::read_to_string(a.join("bounds.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("bounds.csv")).unwrap());
    assert_eq!(csv.lines().count(), 5);

    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let digest: String = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(m["config_sha256"], digest.as_str());
    assert_eq!(m["command"], "bounds");
    assert_eq!(m["config"]["n_atoms"], serde_json::json!([2, 5]));
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "bounds.csv"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "a.toml",
        "[source]\nkind = \"generate\"\nt_c = 0.1\nn_cycles = 4000\nseed = 1\nnoise = { kind = \"coherence\", exponent = \"white_fm\" }\n",
    );
    let out = |name: &str, extra: &[&str]| {
        let d = tmp.path().join(name);
        assert_eq!(run("allan", &cfg, &d, extra), 0);
        fs::read_to_string(d.join("adev.csv")).unwrap()
    };
    let plain = out("p", &[]);
    let same = out("s", &["--seed", "1"]);
    let other = out("o", &["--seed", "2"]);
    assert_eq!(plain, same);
    assert_ne!(plain, other);
    let m = fs::read_to_string(tmp.path().join("o/manifest.json")).unwrap();
    assert!(m.contains("\"seed\": 2"));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let unknown = write(tmp.path(), "u.toml", "n_atoms = [2]\ndelta_phi = [0.2]\nextra = 1\n");
    assert_eq!(run("bounds", &unknown, &out, &[]), 2);
    let negative = write(tmp.path(), "n.toml", "n_atoms = [2]\ndelta_phi = [-0.2]\n");
    assert_eq!(run("bounds", &negative, &out, &[]), 2);
    assert_eq!(run("bounds", &tmp.path().join("missing.toml"), &out, &[]), 2);
    assert_eq!(run("bounds", &negative, &out, &["--threads", "0"]), 2);
    let status = bin().arg("no-such-command").status().unwrap();
    assert_eq!(status.code(), Some(2));
    assert_eq!(bin().arg("--help").status().unwrap().code(), Some(0));
}

#[test]
fn numerical_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    // a grid ending before the optimum leaves the minimum on the boundary
    let cfg = write(
        tmp.path(),
        "d.toml",
        "families = [\"css_linear\"]\nn_atoms = [8]\ntd_over_z = [0.0]\nt_over_z = { lo = 0.001, hi = 0.01, points = 20 }\n",
    );
    assert_eq!(run("deadtime", &cfg, &tmp.path().join("out"), &[]), 3);
}

#[test]
fn fringe_hops_exit_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        "n_atoms = 8\nprotocol = { kind = \"ghz_parity\" }\nt_over_z = [0.3]\nn_cycles = 30000\nruns = 1\nseed = 3\n",
    );
    let out = tmp.path().join("out");
    assert_eq!(run("clock", &cfg, &out, &[]), 4);
    let flags: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("flags.json")).unwrap()).unwrap();
    assert_eq!(flags[0]["fringe_hop"]["detected"], true);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["exit_code"], 4);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for (name, ty) in [
        ("bounds", "bounds"),
        ("protocol", "protocol"),
        ("optimize", "optimize"),
        ("clock", "clock"),
        ("prior", "prior"),
        ("deadtime", "deadtime"),
        ("allan", "allan"),
    ] {
        let text = fs::read_to_string(dir.join(format!("{name}.toml"))).unwrap();
        let ok = match ty {
            "bounds" => toml::from_str::<clockforge::cli::BoundsConfig>(&text).is_ok(),
            "protocol" => toml::from_str::<clockforge::cli::ProtocolConfig>(&text).is_ok(),
            "optimize" => toml::from_str::<clockforge::cli::OptimizeConfig>(&text).is_ok(),
            "clock" => toml::from_str::<clockforge::cli::ClockFileConfig>(&text).is_ok(),
            "prior" => toml::from_str::<clockforge::cli::PriorConfig>(&text).is_ok(),
            "deadtime" => toml::from_str::<clockforge::cli::DeadtimeConfig>(&text).is_ok(),
            _ => toml::from_str::<clockforge::cli::AllanConfig>(&text).is_ok(),
        };
        assert!(ok, "{name}.toml");
    }
}
