//! End-to-end pipeline checks on a bundled synthetic fixture: every stage
//! runs, reruns are byte-identical, and missing upstream artifacts produce
//! dependency errors naming the absent file.

use std::path::Path;

use rnx_core::config::RunConfig;
use rnx_core::pipeline::{run_pipeline, Stage};
use rnx_core::quotes::{synth_panel, write_quotes, OptionQuote, SynthModel};

fn write_fixture(dir: &Path) -> RunConfig {
    let strikes: Vec<f64> = (0..13).map(|i| 70.0 + 5.0 * i as f64).collect();
    let panel = synth_panel(
        6,
        10,
        0.5,
        &SynthModel::FlatVol(0.2),
        &SynthModel::FlatVol(0.3),
        &strikes,
        0.25,
        100.0,
        0.02,
        0.0,
        11,
    )
    .unwrap();

    let quotes: Vec<OptionQuote> = panel
        .slices
        .iter()
        .flat_map(|s| {
            s.strikes.iter().zip(&s.calls).map(move |(&k, &c)| OptionQuote {
                ticker: s.ticker.clone(),
                quote_date: s.quote_date,
                expiry: s.expiry,
                strike: k,
                is_call: true,
                bid: c,
                ask: c,
                mid: c,
                forward: s.forward,
                rate: s.rate,
                div_yield: s.div_yield,
                iv_raw: None,
            })
        })
        .collect();
    let quotes_path = dir.join("quotes.csv");
    write_quotes(&quotes_path, &quotes).unwrap();

    // first three firms exposed to the burning zip; fire covers the back half
    // of the sample so treatment matches the synthetic panel's switch-on day
    let mut exposures = String::from("ticker,zip,share_estabs,share_emp,share_sales\n");
    for firm in 0..6 {
        let zip = if firm < 3 { "95000" } else { "90001" };
        exposures.push_str(&format!("F{firm:04},{zip},0.5,0.5,0.5\n"));
    }
    let exposures_path = dir.join("exposures.csv");
    std::fs::write(&exposures_path, exposures).unwrap();

    let fires_path = dir.join("fires.csv");
    std::fs::write(&fires_path, "zip,start_date,end_date\n95000,2017-01-07,2017-01-11\n").unwrap();

    // daily returns with a handful of wildfire days
    let mut returns = String::from("date,market_return,stock_return,wildfire\n");
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut unif = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let start = chrono::NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
    for day in 0..600 {
        let date = start + chrono::Duration::days(day);
        let zm = (unif() + unif() + unif() - 1.5) * 2.0; // ~N(0,1)
        let zs = (unif() + unif() + unif() - 1.5) * 2.0;
        let market = 0.01 * zm;
        let stock = 0.8 * market + 0.012 * zs;
        let wildfire = (300..310).contains(&day);
        returns.push_str(&format!("{date},{market},{stock},{wildfire}\n"));
    }
    let returns_path = dir.join("returns.csv");
    std::fs::write(&returns_path, returns).unwrap();

    RunConfig {
        quotes: quotes_path,
        exposures: exposures_path,
        fires: fires_path,
        returns: Some(returns_path),
        output_dir: dir.join("out"),
        grid_size: 60,
        n_paths: 20_000,
        calibration_starts: 2,
        seed: 17,
        ..Default::default()
    }
}

#[test]
fn full_pipeline_end_to_end_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_fixture(tmp.path());

    let manifests = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert_eq!(manifests.len(), Stage::ALL.len());
    for name in [
        "quotes_clean.csv",
        "treatment.csv",
        "quotes_european.csv",
        "quotes_repaired.csv",
        "violations.json",
        "arbitrage_gaps.csv",
        "densities.csv",
        "moments.csv",
        "garch.json",
        "physical_density.csv",
        "kernel_curves.csv",
        "gamma.json",
        "calibration.json",
        "smile.json",
        "permanent.json",
        "rnd_te.csv",
    ] {
        assert!(cfg.output_dir.join(name).exists(), "missing {name}");
    }

    // density surface CSV is tidy with the documented columns
    let dens = std::fs::read_to_string(cfg.output_dir.join("densities.csv")).unwrap();
    assert!(dens.starts_with("ticker,quote_date,maturity,forward,rate,grid_k,density"));
    let kc = std::fs::read_to_string(cfg.output_dir.join("kernel_curves.csv")).unwrap();
    assert!(kc.lines().next().unwrap().contains("log_moneyness"));
    let te = std::fs::read_to_string(cfg.output_dir.join("rnd_te.csv")).unwrap();
    assert!(te.starts_with("point,delta,ci_low,ci_high"));

    // rerun: identical seeds and inputs produce identical manifests
    let manifests2 = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert_eq!(manifests, manifests2);
}

#[test]
fn missing_upstream_artifact_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_fixture(tmp.path());
    let err = run_pipeline(&cfg, &[Stage::Rnd]).unwrap_err();
    assert!(
        err.to_string().contains("quotes_repaired.csv"),
        "unexpected error: {err}"
    );
}

#[test]
fn stage_isolation_upstream_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_fixture(tmp.path());
    let first = run_pipeline(&cfg, &Stage::ALL).unwrap();
    // deleting downstream outputs never changes upstream reruns
    std::fs::remove_file(cfg.output_dir.join("densities.csv")).unwrap();
    std::fs::remove_file(cfg.output_dir.join("gamma.json")).unwrap();
    let again = run_pipeline(&cfg, &[Stage::Ingest, Stage::Deamericanize, Stage::Repair]).unwrap();
    for m in &again {
        let orig = first.iter().find(|f| f.stage == m.stage).unwrap();
        assert_eq!(orig, m);
    }
}

#[test]
fn cli_config_and_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_rnx");

    let out = std::process::Command::new(bin)
        .args(["config", "print-defaults"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let parsed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(parsed["grid_size"], 100);
    assert_eq!(parsed["maturity_bins"], 10);

    // invalid config -> exit code 2
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"grid_size\": 5}").unwrap();
    let out = std::process::Command::new(bin)
        .args(["config", "validate", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // missing dependency through the CLI -> exit code 2 (missing artifact)
    let cfg = write_fixture(tmp.path());
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out = std::process::Command::new(bin)
        .args(["run", "--stages", "rnd", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("quotes_repaired.csv"), "stderr: {stderr}");
}

#[test]
fn prop1_verify_cli() {
    let bin = env!("CARGO_BIN_EXE_rnx");
    let out = std::process::Command::new(bin)
        .args([
            "prop1-verify",
            "--q",
            "0.5",
            "--q-w",
            "0.1",
            "--beta",
            "0.8",
            "--sigma",
            "0.15",
            "--sigma-w",
            "0.3",
            "--gamma",
            "4.0",
            "--n-paths",
            "200000",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let slope = parsed["theoretical_slope"].as_f64().unwrap();
    assert!((slope - -0.77142).abs() < 5e-4);
    assert_eq!(parsed["consistent"], true);
}
