//! Stage orchestration: ingest → de-Americanize → repair → density
//! extraction → GARCH → pricing kernel → calibration → panel estimators.
//!
//! Every stage hashes its inputs and the config, writes versioned outputs
//! into the run directory, and records a manifest. Reruns with identical
//! inputs and seed are byte-identical (wall time is kept out of the
//! manifest's reproducible part). On failure, anything the stage already
//! wrote is renamed with a `.partial` suffix instead of being deleted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::garch::{
    fit_garch_wildfire, fit_market_garch, forecast_density, ForecastState, MarketFit, ReturnSeries,
    WildfireFit,
};
use crate::jumps::{calibrate, CalibrationResult, IvQuote};
use crate::kernel::{estimate_gamma_w, pricing_kernel, GammaFe, KernelSlice, RiskAversionEstimate};
use crate::panel::{
    permanent_effect_regression, rnd_te_binned, smile_regression, BinScheme, DensityObs, FEResult,
    PermanentObs, PersistentFlag, SmileObs, TEProfile,
};
use crate::pricing::{de_americanize, implied_vol, BsInputs};
use crate::quotes::{
    compute_treatment, load_exposures, load_fires, load_quotes, write_quotes, write_rejects,
    write_treatment, OptionQuote, SurfaceSlice, TreatmentCalendar,
};
use crate::repair::{arbitrage_gap_panel, repair_slice, RepairedSlice};
use crate::rnd::{extract_rnd_on, rnd_moments, DensityCurve, DensityKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Deamericanize,
    Repair,
    Rnd,
    Garch,
    Kernel,
    Calibrate,
    Panel,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Deamericanize,
        Stage::Repair,
        Stage::Rnd,
        Stage::Garch,
        Stage::Kernel,
        Stage::Calibrate,
        Stage::Panel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Deamericanize => "deamericanize",
            Stage::Repair => "repair",
            Stage::Rnd => "rnd",
            Stage::Garch => "garch",
            Stage::Kernel => "kernel",
            Stage::Calibrate => "calibrate",
            Stage::Panel => "panel",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown stage '{s}'")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub stage: String,
    /// sha256 of each input file, keyed by file name.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of the canonical config JSON.
    pub config_hash: String,
    pub seed: u64,
    /// sha256 of each output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn sha256_str(s: &str) -> String {
    hex(&Sha256::digest(s.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn require(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingArtifact(path.display().to_string()))
    }
}

/// Tracks files a stage has written so failures can retain them as partials.
struct StageOutputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl StageOutputs {
    fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), written: Vec::new() }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents)?;
        Ok(())
    }

    fn keep_partials(&self) {
        for p in &self.written {
            if p.exists() {
                let mut partial = p.clone().into_os_string();
                partial.push(".partial");
                let _ = std::fs::rename(p, PathBuf::from(partial));
            }
        }
    }
}

/// Run the requested pipeline stages in declaration order.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage]) -> Result<Vec<Manifest>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let config_hash = sha256_str(&cfg.to_json());
    let mut manifests = Vec::new();
    for stage in Stage::ALL {
        if !stages.contains(&stage) {
            continue;
        }
        let mut out = StageOutputs::new(&cfg.output_dir);
        let started = std::time::Instant::now();
        let inputs = match run_stage(cfg, stage, &mut out) {
            Ok(inputs) => inputs,
            Err(e) => {
                out.keep_partials();
                return Err(e);
            }
        };
        let mut input_hashes = BTreeMap::new();
        for p in &inputs {
            input_hashes.insert(file_key(p), sha256_file(p)?);
        }
        let mut output_hashes = BTreeMap::new();
        for p in &out.written {
            output_hashes.insert(file_key(p), sha256_file(p)?);
        }
        let manifest = Manifest {
            stage: stage.name().to_string(),
            inputs: input_hashes,
            config_hash: config_hash.clone(),
            seed: cfg.seed,
            outputs: output_hashes,
        };
        let mpath = cfg.output_dir.join(format!("manifest_{}.json", stage.name()));
        std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest json"))?;
        let tpath = cfg.output_dir.join(format!("timing_{}.json", stage.name()));
        std::fs::write(
            &tpath,
            format!("{{\"stage\":\"{}\",\"wall_ms\":{}}}\n", stage.name(), started.elapsed().as_millis()),
        )?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

fn file_key(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn run_stage(cfg: &RunConfig, stage: Stage, out: &mut StageOutputs) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::Ingest => stage_ingest(cfg, out),
        Stage::Deamericanize => stage_deamericanize(cfg, out),
        Stage::Repair => stage_repair(cfg, out),
        Stage::Rnd => stage_rnd(cfg, out),
        Stage::Garch => stage_garch(cfg, out),
        Stage::Kernel => stage_kernel(cfg, out),
        Stage::Calibrate => stage_calibrate(cfg, out),
        Stage::Panel => stage_panel(cfg, out),
    }
}

// ---------------------------------------------------------------- ingest

fn stage_ingest(cfg: &RunConfig, out: &mut StageOutputs) -> Result<Vec<PathBuf>> {
    let quotes = load_quotes(&require(&cfg.quotes)?)?;
    let exposures = load_exposures(&require(&cfg.exposures)?)?;
    let fires = load_fires(&require(&cfg.fires)?)?;

    let mut dates: Vec<NaiveDate> = quotes.records.iter().map(|q| q.quote_date).collect();
    dates.sort();
    dates.dedup();
    let treatment = compute_treatment(&exposures.records, &fires.records, &dates, cfg.threshold)?;

    write_quotes(&out.path("quotes_clean.csv"), &quotes.records)?;
    let mut rejects = quotes.rejects;
    rejects.extend(exposures.rejects);
    rejects.extend(fires.rejects);
    write_rejects(&out.path("ingest_rejects.csv"), &rejects)?;
    write_treatment(&out.path("treatment.csv"), &treatment.calendar)?;
    out.write(
        "ingest_summary.json",
        &format!(
            "{{\"n_quotes\":{},\"n_rejects\":{},\"unknown_fire_zips\":{}}}\n",
            quotes.records.len(),
            rejects.len(),
            treatment.unknown_zip_count
        ),
    )?;
    Ok(vec![cfg.quotes.clone(), cfg.exposures.clone(), cfg.fires.clone()])
}

// -------------------------------------------------------- deamericanize

fn spot_of(q: &OptionQuote) -> f64 {
    q.forward * (-(q.rate - q.div_yield) * q.maturity_years()).exp()
}

fn stage_deamericanize(cfg: &RunConfig, out: &mut StageOutputs) -> Result<Vec<PathBuf>> {
    let input = require(&cfg.output_dir.join("quotes_clean.csv"))?;
    let quotes = load_quotes(&input)?;
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for q in quotes.records {
        if !cfg.american {
            kept.push(q);
            continue;
        }
        let t = q.maturity_years();
        match de_americanize(
            q.mid,
            spot_of(&q),
            q.strike,
            q.rate,
            q.div_yield,
            t,
            q.is_call,
            cfg.n_steps,
        ) {
            Ok(euro) => {
                let mut q2 = q.clone();
                q2.bid = euro;
                q2.ask = euro;
                q2.mid = euro;
                kept.push(q2);
            }
            Err(_) => dropped += 1,
        }
    }
    write_quotes(&out.path("quotes_european.csv"), &kept)?;
    out.write(
        "deamericanize_summary.json",
        &format!("{{\"kept\":{},\"dropped_out_of_band\":{}}}\n", kept.len(), dropped),
    )?;
    Ok(vec![input])
}

// ---------------------------------------------------------------- repair

/// Group quotes into per (ticker, quote date, expiry) call curves; puts are
/// mapped to calls through parity, duplicates at a strike averaged.
pub fn slices_from_quotes(quotes: &[OptionQuote]) -> Vec<SurfaceSlice> {
    let mut groups: BTreeMap<(String, NaiveDate, NaiveDate), Vec<&OptionQuote>> = BTreeMap::new();
    for q in quotes {
        groups
            .entry((q.ticker.clone(), q.quote_date, q.expiry))
            .or_default()
            .push(q);
    }
    let mut slices = Vec::new();
    for ((ticker, quote_date, expiry), qs) in groups {
        let t = qs[0].maturity_years();
        let (forward, rate, div_yield) = (qs[0].forward, qs[0].rate, qs[0].div_yield);
        let df = (-rate * t).exp();
        let mut by_strike: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
        for q in qs {
            let call = if q.is_call { q.mid } else { q.mid + df * (forward - q.strike) };
            let key = q.strike.to_bits();
            let e = by_strike.entry(key).or_insert((q.strike, Vec::new()));
            e.1.push(call);
        }
        let mut pairs: Vec<(f64, f64)> = by_strike
            .values()
            .map(|(k, cs)| (*k, cs.iter().sum::<f64>() / cs.len() as f64))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let slice = SurfaceSlice {
            ticker,
            quote_date,
            expiry,
            maturity_years: t,
            strikes: pairs.iter().map(|p| p.0).collect(),
            calls: pairs.iter().map(|p| p.1).collect(),
            forward,
            rate,
            div_yield,
        };
        if slice.validate().is_ok() {
            slices.push(slice);
        }
    }
    slices
}

fn quotes_from_slice(slice: &SurfaceSlice) -> Vec<OptionQuote> {
    slice
        .strikes
        .iter()
        .zip(&slice.calls)
        .map(|(&k, &c)| OptionQuote {
            ticker: slice.ticker.clone(),
            quote_date: slice.quote_date,
            expiry: slice.expiry,
            strike: k,
            is_call: true,
            bid: c,
            ask: c,
            mid: c,
            forward: slice.forward,
            rate: slice.rate,
            div_yield: slice.div_yield,
            iv_raw: None,
        })
        .collect()
}

fn load_treatment(path: &Path) -> Result<Vec<TreatmentCalendar>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut cal = Vec::new();
    for rec in rdr.deserialize() {
        let row: TreatmentCalendar = rec.map_err(Error::Csv)?;
        cal.push(row);
    }
    Ok(cal)
}

fn stage_repair(cfg: &RunConfig, out: &mut StageOutputs) -> Result<Vec<PathBuf>> {
    let input = require(&cfg.output_dir.join("quotes_european.csv"))?;
    let treatment_path = require(&cfg.output_dir.join("treatment.csv"))?;
    let quotes = load_quotes(&input)?;
    let slices = slices_from_quotes(&quotes.records);
    let repaired: Vec<RepairedSlice> = slices
        .par_iter()
        .map(repair_slice)
        .collect::<Result<Vec<_>>>()?;

    let mut all_quotes = Vec::new();
    let mut violations = String::from("[\n");
    for (i, r) in repaired.iter().enumerate() {
        all_quotes.extend(quotes_from_slice(&r.slice));
        if i > 0 {
            violations.push_str(",\n");
        }
        violations.push_str(&format!(
            "{{\"ticker\":\"{}\",\"quote_date\":\"{}\",\"expiry\":\"{}\",\"butterfly\":{},\"call_spread\":{},\"bounds\":{},\"max_abs_adjust\":{}}}",
            r.slice.ticker,
            r.slice.quote_date,
            r.slice.expiry,
            r.violations_before.butterfly,
            r.violations_before.call_spread,
            r.violations_before.bounds,
            r.max_abs_adjust
        ));
    }
    violations.push_str("\n]\n");
    write_quotes(&out.path("quotes_repaired.csv"), &all_quotes)?;
    out.write("violations.json", &violations)?;

    let treatment = load_treatment(&treatment_path)?;
    let gaps = arbitrage_gap_panel(&repaired, &treatment);
    let mut csv_text = String::from("ticker,date,expiry,strike,delta,abs_delta,log_abs_delta,treated_now,after_first,after_last\n");
    for g in &gaps {
        csv_text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            g.ticker,
            g.date,
            g.expiry,
            g.strike,
            g.delta,
            g.abs_delta,
            g.log_abs_delta.map(|v| v.to_string()).unwrap_or_default(),
            g.treated_now.map(|v| v.to_string()).unwrap_or_default(),
            g.after_first.map(|v| v.to_string()).unwrap_or_default(),
            g.after_last.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    out.write("arbitrage_gaps.csv", &csv_text)?;
    Ok(vec![input, treatment_path])
}

// ------------------------------------------------------------------- rnd

const DENSITY_HEADER: &str = "ticker,quote_date,maturity,forward,rate,grid_k,density";

/// Tidy density-surface CSV (`maturity,grid_k,density` plus slice keys).
pub fn density_surface_csv(rows: &[(String, NaiveDate, f64, f64, f64, &DensityCurve)]) -> String {
    let mut text = String::from(DENSITY_HEADER);
    text.push('\n');
    for (ticker, date, maturity, forward, rate, curve) in rows {
        for (k, v) in curve.grid.iter().zip(&curve.values) {
            text.push_str(&format!("{ticker},{date},{maturity},{forward},{rate},{k},{v}\n"));
        }
    }
    text
}

fn stage_rnd(cfg: &RunConfig, out: &mut StageOutputs) -> Result<Vec<PathBuf>> {
    let input = require(&cfg.output_dir.join("quotes_repaired.csv"))?;
    let quotes = load_quotes(&input)?;
    let slices = slices_from_quotes(&quotes.records);
    let curves: Vec<(SurfaceSlice, DensityCurve)> = slices
        .into_par_iter()
        .map(|s| {
            let c = extract_rnd_on(&s, None, cfg.bandwidth_mult, cfg.grid_size)?;
            Ok((s, c))
        })
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<(String, NaiveDate, f64, f64, f64, &DensityCurve)> = curves
        .iter()
        .map(|(s, c)| (s.ticker.clone(), s.quote_date, s.maturity_years, s.forward, s.rate, c))
        .collect();
    out.write("densities.csv", &density_surface_csv(&rows))?;

    let mut moments = String::from("ticker,quote_date,maturity,mass,mean,variance,skewness,excess_kurtosis\n");
    for (s, c) in &curves {
        if let Ok(m) = rnd_moments(c) {
            moments.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.ticker,
                s.quote_date,
                s.maturity_years,
                c.mass,
                m.mean,
                m.variance,
                m.skewness.map(|v| v.to_string()).unwrap_or_default(),
                m.excess_kurtosis.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
    }
    out.write("moments.csv", &moments)?;
    Ok(vec![input])
}

#[derive(Debug, Clone)]
struct DensityRow {
    ticker: String,
    quote_date: NaiveDate,
    maturity: f64,
    forward: f64,
    rate: f64,
    grid_k: f64,
    density: f64,
}

fn load_densities(path: &Path) -> Result<Vec<DensityRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let r = rec.map_err(Error::Csv)?;
        rows.push(DensityRow {
            ticker: r[0].to_string(),
            quote_date: r[1]
                .parse()
                .map_err(|e| Error::Data(format!("bad date in densities: {e}")))?,
            maturity: r[2].parse().map_err(|e| Error::Data(format!("bad maturity: {e}")))?,
            forward: r[3].parse().map_err(|e| Error::Data(format!("bad forward: {e}")))?,
            rate: r[4].parse().map_err(|e| Error::Data(format!("bad rate: {e}")))?,
            grid_k: r[5].parse().map_err(|e| Error::Data(format!("bad grid: {e}")))?,
            density: r[6].parse().map_err(|e| Error::Data(format!("bad density: {e}")))?,
        });
    }
    Ok(rows)
}

fn curves_from_rows(rows: &[DensityRow], kind: DensityKind) -> Vec<(String, NaiveDate, f64, f64, DensityCurve)> {
    let mut groups: BTreeMap<(String, NaiveDate, u64), Vec<&DensityRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.ticker.clone(), r.quote_date, r.maturity.to_bits()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((ticker, date, _), rs)| {
            let maturity = rs[0].maturity;
            let rate = rs[0].rate;
            let forward = rs[0].forward;
            let grid: Vec<f64> = rs.iter().map(|r| r.grid_k).collect();
            let values: Vec<f64> = rs.iter().map(|r| r.density).collect();
            let mass = crate::math::trapezoid(&grid, &values);
            let curve = DensityCurve {
                unsupported: vec![false; grid.len()],
                grid,
                values,
                maturity,
                discount: (-rate * maturity).exp(),
                kind,
                mass,
                bandwidth: 0.0,
            };
            (ticker, date, rate, forward, curve)
        })
        .collect()
}

// ----------------------------------------------------------------- garch

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReturnRow {
    date: NaiveDate,
    market_return: f64,
    stock_return: f64,
    wildfire: bool,
}

fn load_returns(path: &Path) -> Result<ReturnSeries> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut dates = Vec::new();
    let mut market = Vec::new();
    let mut stock = Vec::new();
    let mut flags = Vec::new();
    for rec in rdr.deserialize() {
        let row: ReturnRow = rec.map_err(Error::Csv)?;
        dates.push(row.date);
        market.push(row.market_return);
        stock.push(row.stock_return);
        flags.push(row.wildfire);
    }
    Ok(ReturnSeries {
        ticker: "STOCK".to_string(),
        dates,
        log_returns: stock,
        wildfire_flags: flags,
        market_returns: market,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GarchArtifacts {
    pub market: MarketFit,
    pub stock: WildfireFit,
    pub hazard: f64,
}

fn stage_garch(cfg: &RunConfig, out: &mut StageOutputs) -> Result<Vec<PathBuf>> {
    let returns_path = cfg
        .returns
        .clone()
        .ok_or_else(|| Error::MissingArtifact("returns CSV (config `returns`)".into()))?;
    let returns_path = require(&returns_path)?;
    let densities_path = require(&cfg.output_dir.join("densities.csv"))?;

    let series = load_returns(&returns_path)?;
    let market = fit_market_garch(&series.market_returns)?;
    let stock = fit_garch_wildfire(&series, &market.params, cfg.n_lags)?;
    let treated = series.wildfire_flags.iter().filter(|&&f| f).count();
    let hazard = (treated as f64 + 1.0) / (series.wildfire_flags.len() as f64 + 2.0);

    let artifacts = GarchArtifacts { market: market.clone(), stock: stock.clone(), hazard };
    out.write(
        "garch.json",
        &serde_json::to_string_pretty(&artifacts).expect("garch json"),
    )?;

    // physical density forecast on the first RND slice's grid and horizon
    let rows = load_densities(&densities_path)?;
    let curves = curves_from_rows(&rows, DensityKind::RiskNeutral);
    let (ticker, date, rate, forward, rn) = curves
        .first()
        .ok_or_else(|| Error::Data("densities.csv has no slices".into()))?;
    let horizon = (rn.maturity * crate::quotes::DAYS_PER_YEAR).round().max(1.0) as usize;

    let mkt_uncond =
        market.params.omega / (1.0 - market.params.zeta - market.params.xi).max(1e-8);
    let stock_uncond = (stock.params.omega + stock.params.rho_vol * mkt_uncond)
        / (1.0 - stock.params.zeta - stock.params.xi).max(1e-8);
    let state = ForecastState {
        spot: *forward * (-(rate) * rn.maturity).exp(),
        market_variance: mkt_uncond,
        stock_variance: stock_uncond.max(crate::garch::VARIANCE_FLOOR),
        last_market_innovation_sq: mkt_uncond,
        last_stock_innovation_sq: stock_uncond.max(crate::garch::VARIANCE_FLOOR),
        wildfire_yesterday: series.wildfire_flags.last().copied().unwrap_or(false),
    };
    let phys = forecast_density(
        &market.params,
        &stock.params,
        &state,
        horizon,
        cfg.n_paths.max(10_000),
        hazard,
        &rn.grid,
        cfg.seed,
    )?;
    let rows = vec![(ticker.clone(), *date, phys.maturity, *forward, *rate, &phys)];
    out.write("physical_density.csv", &density_surface_csv(&rows))?;
    Ok(vec![returns_path, densities_path])
}

// ---------------------------------------------------------------- kernel

/// Kernel-curve CSV including log moneyness.
pub fn kernel_curve_csv(slices: &[KernelSlice], tickers: &[String], dates: &[NaiveDate]) -> String {
    let mut text = String::from("ticker,quote_date,maturity,grid_k,log_moneyness,kernel\n");
    for s in slices {
        let ticker = &tickers[s.firm as usize];
        let date = dates[s.date as usize];
        for i in 0..s.curve.grid.len() {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                ticker,
                date,
                s.curve.maturity,
                s.curve.grid[i],
                s.curve.log_moneyness[i],
                s.curve.kernel_values[i]
            ));
        }
    }
    text
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelArtifacts {
    pub gamma_w: RiskAversionEstimate,
    pub n_slices: usize,
    pub dropped_points: usize,
}

fn stage_kernel(cfg: &RunConfig, out: &mut StageOutputs) -> Result<Vec<PathBuf>> {
    let rnd_path = require(&cfg.output_dir.join("densities.csv"))?;
    let phys_path = require(&cfg.output_dir.join("physical_density.csv"))?;
    let rnd_curves = curves_from_rows(&load_densities(&rnd_path)?, DensityKind::RiskNeutral);
    let phys_curves = curves_from_rows(&load_densities(&phys_path)?, DensityKind::Physical);
    let (_, _, _, _, phys) = phys_curves
        .first()
        .ok_or_else(|| Error::Data("physical_density.csv has no curve".into()))?;

    let mut tickers: Vec<String> = rnd_curves.iter().map(|c| c.0.clone()).collect();
    tickers.sort();
    tickers.dedup();
    let mut dates: Vec<NaiveDate> = rnd_curves.iter().map(|c| c.1).collect();
    dates.sort();
    dates.dedup();

    let mut slices = Vec::new();
    let mut dropped_points = 0usize;
    for (ticker, date, rate, _, rn) in &rnd_curves {
        if rn.grid.len() != phys.grid.len()
            || rn
                .grid
                .iter()
                .zip(&phys.grid)
                .any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0))
        {
            continue; // kernel defined only on the shared grid
        }
        match pricing_kernel(rn, phys, *rate, rn.maturity) {
            Ok(curve) => {
                dropped_points += curve.dropped;
                slices.push(KernelSlice {
                    firm: tickers.iter().position(|t| t == ticker).unwrap() as u32,
                    date: dates.iter().position(|d| d == date).unwrap() as u32,
                    curve,
                });
            }
            Err(Error::Data(_)) => dropped_points += rn.grid.len(),
            Err(e) => return Err(e),
        }
    }
    if slices.is_empty() {
        return Err(Error::Data("no kernel slices could be formed".into()));
    }

    let n_firms = {
        let mut f: Vec<u32> = slices.iter().map(|s| s.firm).collect();
        f.sort_unstable();
        f.dedup();
        f.len()
    };
    let n_dates = {
        let mut d: Vec<u32> = slices.iter().map(|s| s.date).collect();
        d.sort_unstable();
        d.dedup();
        d.len()
    };
    let fe = if n_firms >= 2 && n_dates >= 2 { GammaFe::Pooled } else { GammaFe::None };
    let gamma_w = estimate_gamma_w(&slices, fe)?;

    out.write("kernel_curves.csv", &kernel_curve_csv(&slices, &tickers, &dates))?;
    let artifacts = KernelArtifacts { gamma_w, n_slices: slices.len(), dropped_points };
    out.write("gamma.json", &serde_json::to_string_pretty(&artifacts).expect("gamma json"))?;
    Ok(vec![rnd_path, phys_path])
}

// ------------------------------------------------------------- calibrate

fn iv_quotes_for_slice(s: &SurfaceSlice) -> Vec<IvQuote> {
    s.strikes
        .iter()
        .zip(&s.calls)
        .filter_map(|(&k, &c)| {
            let inp = BsInputs {
                forward: s.forward,
                strike: k,
                rate: s.rate,
                maturity: s.maturity_years,
                vol: 0.0,
                is_call: true,
            };
            implied_vol(c, &inp).ok().map(|iv| IvQuote {
                strike: k,
                maturity: s.maturity_years,
                forward: s.forward,
                iv,
                weight: 1.0,
            })
        })
        .collect()
}

fn stage_calibrate(cfg: &RunConfig, out: &mut StageOutputs) -> Result<Vec<PathBuf>> {
    let input = require(&cfg.output_dir.join("quotes_european.csv"))?;
    let quotes = load_quotes(&input)?;
    let slices = slices_from_quotes(&quotes.records);

    // one calibration per ticker on its most recent quote date
    let mut latest: BTreeMap<String, NaiveDate> = BTreeMap::new();
    for s in &slices {
        let e = latest.entry(s.ticker.clone()).or_insert(s.quote_date);
        if s.quote_date > *e {
            *e = s.quote_date;
        }
    }
    let tasks: Vec<(String, Vec<&SurfaceSlice>)> = latest
        .iter()
        .map(|(t, d)| {
            (
                t.clone(),
                slices.iter().filter(|s| &s.ticker == t && &s.quote_date == d).collect(),
            )
        })
        .collect();

    let results: Vec<(String, CalibrationResult)> = tasks
        .par_iter()
        .map(|(ticker, group)| {
            let mut ivs = Vec::new();
            for s in group {
                ivs.extend(iv_quotes_for_slice(s));
            }
            let (rate, div_yield) = (group[0].rate, group[0].div_yield);
            let res = calibrate(
                cfg.model,
                &ivs,
                rate,
                div_yield,
                &cfg.bounds,
                cfg.calibration_starts,
                cfg.seed,
            )?;
            Ok((ticker.clone(), res))
        })
        .collect::<Result<Vec<_>>>()?;

    let map: BTreeMap<String, &CalibrationResult> =
        results.iter().map(|(t, r)| (t.clone(), r)).collect();
    out.write(
        "calibration.json",
        &serde_json::to_string_pretty(&map).expect("calibration json"),
    )?;
    Ok(vec![input])
}

// ----------------------------------------------------------------- panel

/// TE-profile CSV: `point,delta,ci_low,ci_high`.
pub fn te_profile_csv(profile: &TEProfile) -> String {
    let mut text = String::from("point,delta,ci_low,ci_high\n");
    for i in 0..profile.points.len() {
        text.push_str(&format!(
            "{},{},{},{}\n",
            profile.points[i], profile.delta[i], profile.ci_low[i], profile.ci_high[i]
        ));
    }
    text
}

struct Interner {
    map: BTreeMap<String, u32>,
}

impl Interner {
    fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    fn id(&mut self, key: &str) -> u32 {
        let next = self.map.len() as u32;
        *self.map.entry(key.to_string()).or_insert(next)
    }
}

fn stage_panel(cfg: &RunConfig, out: &mut StageOutputs) -> Result<Vec<PathBuf>> {
    let quotes_path = require(&cfg.output_dir.join("quotes_european.csv"))?;
    let treatment_path = require(&cfg.output_dir.join("treatment.csv"))?;
    let densities_path = require(&cfg.output_dir.join("densities.csv"))?;

    let treatment = load_treatment(&treatment_path)?;
    let flags: BTreeMap<(String, NaiveDate), (bool, bool, bool)> = treatment
        .iter()
        .map(|c| ((c.ticker.clone(), c.date), (c.treated_now, c.after_first, c.after_last)))
        .collect();
    let flag_of = |ticker: &str, date: NaiveDate| {
        flags.get(&(ticker.to_string(), date)).copied().unwrap_or((false, false, false))
    };

    // smile and permanent-effect regressions from quote IVs
    let quotes = load_quotes(&quotes_path)?;
    let mut firms = Interner::new();
    let mut days = Interner::new();
    let mut smile = Vec::new();
    let mut permanent = Vec::new();
    for q in &quotes.records {
        let t = q.maturity_years();
        let inp = BsInputs {
            forward: q.forward,
            strike: q.strike,
            rate: q.rate,
            maturity: t,
            vol: 0.0,
            is_call: q.is_call,
        };
        let Ok(iv) = implied_vol(q.mid, &inp) else { continue };
        let (treated_now, after_first, after_last) = flag_of(&q.ticker, q.quote_date);
        let moneyness = q.strike / spot_of(q);
        let firm = firms.id(&q.ticker);
        let date = days.id(&q.quote_date.to_string());
        smile.push(SmileObs {
            firm,
            date,
            moneyness,
            sqrt_maturity: t.sqrt(),
            iv,
            treated: treated_now,
        });
        permanent.push(PermanentObs {
            firm,
            date,
            moneyness,
            sqrt_maturity: t.sqrt(),
            iv,
            after_first,
            after_last,
        });
    }
    if smile.is_empty() {
        return Err(Error::Data("no quotes produced usable implied vols".into()));
    }
    let smile_fits: Vec<FEResult> = smile_regression(&smile)?;
    out.write(
        "smile.json",
        &serde_json::to_string_pretty(&smile_fits).expect("smile json"),
    )?;
    let perm_fits = permanent_effect_regression(&permanent, PersistentFlag::AfterFirst)?;
    out.write(
        "permanent.json",
        &serde_json::to_string_pretty(&perm_fits).expect("permanent json"),
    )?;

    // binned density treatment-effect profile
    let rows = load_densities(&densities_path)?;
    let mut dens_obs = Vec::new();
    for r in &rows {
        let (treated_now, _, _) = flag_of(&r.ticker, r.quote_date);
        dens_obs.push(DensityObs {
            firm: firms.id(&r.ticker),
            date: days.id(&r.quote_date.to_string()),
            moneyness: r.grid_k / r.forward,
            value: r.density,
            treated: treated_now,
        });
    }
    let profile = rnd_te_binned(&dens_obs, 30, BinScheme::Quantile)?;
    out.write("rnd_te.csv", &te_profile_csv(&profile))?;
    Ok(vec![quotes_path, treatment_path, densities_path])
}
