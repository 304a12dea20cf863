//! Quote-panel, exposure, and fire-event IO; treatment indicators; and
//! synthetic surface/panel generators used as test harness inputs.
//!
//! Files carry ISO-8601 dates; in-memory types use `chrono::NaiveDate` and
//! year fractions are actual days / 365.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jumps::{self, KouParams, MertonParams};
use crate::pricing::{bs_price, BsInputs};

pub const DAYS_PER_YEAR: f64 = 365.0;

pub fn year_fraction(from: NaiveDate, to: NaiveDate) -> f64 {
    (to - from).num_days() as f64 / DAYS_PER_YEAR
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptionQuote {
    pub ticker: String,
    pub quote_date: NaiveDate,
    pub expiry: NaiveDate,
    pub strike: f64,
    pub is_call: bool,
    pub bid: f64,
    pub ask: f64,
    pub mid: f64,
    pub forward: f64,
    pub rate: f64,
    pub div_yield: f64,
    pub iv_raw: Option<f64>,
}

impl OptionQuote {
    pub fn maturity_years(&self) -> f64 {
        year_fraction(self.quote_date, self.expiry)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.bid < 0.0 || self.ask < self.bid {
            return Err(format!("need ask >= bid >= 0, got bid {} ask {}", self.bid, self.ask));
        }
        if self.strike <= 0.0 {
            return Err(format!("strike must be positive, got {}", self.strike));
        }
        if self.expiry <= self.quote_date {
            return Err(format!("expiry {} not after quote date {}", self.expiry, self.quote_date));
        }
        if self.forward <= 0.0 {
            return Err(format!("forward must be positive, got {}", self.forward));
        }
        Ok(())
    }
}

/// One call-price curve at a fixed (ticker, quote date, expiry).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceSlice {
    pub ticker: String,
    pub quote_date: NaiveDate,
    pub expiry: NaiveDate,
    pub maturity_years: f64,
    pub strikes: Vec<f64>,
    pub calls: Vec<f64>,
    pub forward: f64,
    pub rate: f64,
    pub div_yield: f64,
}

impl SurfaceSlice {
    pub fn validate(&self) -> Result<()> {
        if self.strikes.len() != self.calls.len() {
            return Err(Error::Data("strike and call vectors differ in length".into()));
        }
        if self.strikes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("strikes must be strictly ascending".into()));
        }
        if self.maturity_years <= 0.0 {
            return Err(Error::Data("maturity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExposureRecord {
    pub ticker: String,
    pub zip: String,
    pub share_estabs: f64,
    pub share_emp: f64,
    pub share_sales: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FireEvent {
    pub zip: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreatmentCalendar {
    pub ticker: String,
    pub date: NaiveDate,
    pub treated_now: bool,
    pub after_first: bool,
    pub after_last: bool,
}

/// A row that failed parsing or an invariant, with its 1-based data row
/// number (header excluded) and the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectRecord {
    pub row: usize,
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport<T> {
    pub records: Vec<T>,
    pub rejects: Vec<RejectRecord>,
}

pub const QUOTES_HEADER: [&str; 11] = [
    "ticker", "quote_date", "expiry", "strike", "cp_flag", "bid", "ask", "forward", "rate",
    "div_yield", "iv",
];

fn require_columns(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h.trim() == *w)
                .ok_or_else(|| Error::MissingColumn((*w).into()))
        })
        .collect()
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| format!("bad date '{s}': {e}"))
}

fn parse_f64(s: &str, name: &str) -> std::result::Result<f64, String> {
    s.trim().parse::<f64>().map_err(|e| format!("bad {name} '{s}': {e}"))
}

/// Load an option-quote CSV. Unparseable or invariant-violating rows land in
/// the rejects report; only structural problems (missing columns, unreadable
/// file) are fatal.
pub fn load_quotes(path: &Path) -> Result<LoadReport<OptionQuote>> {
    let mut reader = csv::Reader::from_path(path)?;
    let idx = require_columns(reader.headers()?, &QUOTES_HEADER)?;
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.push(RejectRecord { row: rownum, reason: e.to_string(), raw: String::new() });
                continue;
            }
        };
        let raw = row.iter().collect::<Vec<_>>().join(",");
        match parse_quote_row(&row, &idx) {
            Ok(q) => records.push(q),
            Err(reason) => rejects.push(RejectRecord { row: rownum, reason, raw }),
        }
    }
    Ok(LoadReport { records, rejects })
}

fn parse_quote_row(row: &csv::StringRecord, idx: &[usize]) -> std::result::Result<OptionQuote, String> {
    let get = |j: usize| row.get(idx[j]).unwrap_or("");
    let cp = get(4).trim();
    let is_call = match cp {
        "C" | "c" => true,
        "P" | "p" => false,
        other => return Err(format!("bad cp_flag '{other}'")),
    };
    let bid = parse_f64(get(5), "bid")?;
    let ask = parse_f64(get(6), "ask")?;
    let iv_field = get(10).trim();
    let iv_raw = if iv_field.is_empty() { None } else { Some(parse_f64(iv_field, "iv")?) };
    let q = OptionQuote {
        ticker: get(0).trim().to_string(),
        quote_date: parse_date(get(1))?,
        expiry: parse_date(get(2))?,
        strike: parse_f64(get(3), "strike")?,
        is_call,
        bid,
        ask,
        mid: 0.5 * (bid + ask),
        forward: parse_f64(get(7), "forward")?,
        rate: parse_f64(get(8), "rate")?,
        div_yield: parse_f64(get(9), "div_yield")?,
        iv_raw,
    };
    q.check()?;
    Ok(q)
}

/// Write quotes in the canonical CSV layout (round-trips `load_quotes`).
pub fn write_quotes(path: &Path, quotes: &[OptionQuote]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(QUOTES_HEADER)?;
    for q in quotes {
        w.write_record([
            q.ticker.as_str(),
            &q.quote_date.to_string(),
            &q.expiry.to_string(),
            &format!("{}", q.strike),
            if q.is_call { "C" } else { "P" },
            &format!("{}", q.bid),
            &format!("{}", q.ask),
            &format!("{}", q.forward),
            &format!("{}", q.rate),
            &format!("{}", q.div_yield),
            &q.iv_raw.map(|v| format!("{v}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

/// Load exposure shares. Per-ticker share sums above 1 + 1e-6 for any
/// measure reject the whole ticker (data error, not fatal).
pub fn load_exposures(path: &Path) -> Result<LoadReport<ExposureRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let idx = require_columns(reader.headers()?, &["ticker", "zip", "share_estabs", "share_emp", "share_sales"])?;
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.push(RejectRecord { row: rownum, reason: e.to_string(), raw: String::new() });
                continue;
            }
        };
        let raw = row.iter().collect::<Vec<_>>().join(",");
        let parse = || -> std::result::Result<ExposureRecord, String> {
            let get = |j: usize| row.get(idx[j]).unwrap_or("");
            let rec = ExposureRecord {
                ticker: get(0).trim().to_string(),
                zip: get(1).trim().to_string(),
                share_estabs: parse_f64(get(2), "share_estabs")?,
                share_emp: parse_f64(get(3), "share_emp")?,
                share_sales: parse_f64(get(4), "share_sales")?,
            };
            for (name, v) in [
                ("share_estabs", rec.share_estabs),
                ("share_emp", rec.share_emp),
                ("share_sales", rec.share_sales),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name} {v} outside [0,1]"));
                }
            }
            Ok(rec)
        };
        match parse() {
            Ok(rec) => records.push(rec),
            Err(reason) => rejects.push(RejectRecord { row: rownum, reason, raw }),
        }
    }
    // per-ticker sum invariant
    let mut sums: BTreeMap<&str, [f64; 3]> = BTreeMap::new();
    for r in &records {
        let s = sums.entry(r.ticker.as_str()).or_default();
        s[0] += r.share_estabs;
        s[1] += r.share_emp;
        s[2] += r.share_sales;
    }
    let bad: BTreeSet<String> = sums
        .iter()
        .filter(|(_, s)| s.iter().any(|&v| v > 1.0 + 1e-6))
        .map(|(t, _)| t.to_string())
        .collect();
    if !bad.is_empty() {
        records.retain(|r| !bad.contains(&r.ticker));
        for t in &bad {
            rejects.push(RejectRecord {
                row: 0,
                reason: format!("ticker {t}: a share measure sums above 1"),
                raw: String::new(),
            });
        }
    }
    Ok(LoadReport { records, rejects })
}

pub fn load_fires(path: &Path) -> Result<LoadReport<FireEvent>> {
    let mut reader = csv::Reader::from_path(path)?;
    let idx = require_columns(reader.headers()?, &["zip", "start_date", "end_date"])?;
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.push(RejectRecord { row: rownum, reason: e.to_string(), raw: String::new() });
                continue;
            }
        };
        let raw = row.iter().collect::<Vec<_>>().join(",");
        let parse = || -> std::result::Result<FireEvent, String> {
            let get = |j: usize| row.get(idx[j]).unwrap_or("");
            let ev = FireEvent {
                zip: get(0).trim().to_string(),
                start_date: parse_date(get(1))?,
                end_date: parse_date(get(2))?,
            };
            if ev.end_date < ev.start_date {
                return Err("end_date before start_date".into());
            }
            Ok(ev)
        };
        match parse() {
            Ok(ev) => records.push(ev),
            Err(reason) => rejects.push(RejectRecord { row: rownum, reason, raw }),
        }
    }
    Ok(LoadReport { records, rejects })
}

pub fn write_rejects(path: &Path, rejects: &[RejectRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "reason", "raw"])?;
    for r in rejects {
        w.write_record([&r.row.to_string(), &r.reason, &r.raw])?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

pub fn write_treatment(path: &Path, cal: &[TreatmentCalendar]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "ticker,date,treated_now,after_first,after_last")?;
    for c in cal {
        writeln!(f, "{},{},{},{},{}", c.ticker, c.date, c.treated_now, c.after_first, c.after_last)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TreatmentOutcome {
    pub calendar: Vec<TreatmentCalendar>,
    /// Fire events referencing zips absent from the exposure table.
    pub unknown_zip_count: usize,
}

/// Per-ticker daily treatment flags. A firm is treated on day t when, for
/// some single measure (establishments, employment, or sales), its summed
/// share across zips with an active fire that day reaches `threshold`.
pub fn compute_treatment(
    exposures: &[ExposureRecord],
    fires: &[FireEvent],
    dates: &[NaiveDate],
    threshold: f64,
) -> Result<TreatmentOutcome> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Parameter(format!("threshold must lie in (0,1], got {threshold}")));
    }
    let mut dates = dates.to_vec();
    dates.sort();
    dates.dedup();

    let known_zips: BTreeSet<&str> = exposures.iter().map(|e| e.zip.as_str()).collect();
    let unknown_zip_count = fires.iter().filter(|f| !known_zips.contains(f.zip.as_str())).count();

    let mut tickers: Vec<&str> = exposures.iter().map(|e| e.ticker.as_str()).collect();
    tickers.sort();
    tickers.dedup();

    let mut calendar = Vec::with_capacity(tickers.len() * dates.len());
    for t in &tickers {
        let rows: Vec<&ExposureRecord> = exposures.iter().filter(|e| e.ticker == *t).collect();
        let treated: Vec<bool> = dates
            .iter()
            .map(|&d| {
                let mut sums = [0.0_f64; 3];
                for r in &rows {
                    let burning = fires.iter().any(|f| f.zip == r.zip && f.start_date <= d && d <= f.end_date);
                    if burning {
                        sums[0] += r.share_estabs;
                        sums[1] += r.share_emp;
                        sums[2] += r.share_sales;
                    }
                }
                sums.iter().any(|&s| s >= threshold - 1e-12)
            })
            .collect();
        let last_treated = treated.iter().rposition(|&x| x);
        let mut seen = false;
        for (i, &d) in dates.iter().enumerate() {
            seen = seen || treated[i];
            calendar.push(TreatmentCalendar {
                ticker: t.to_string(),
                date: d,
                treated_now: treated[i],
                after_first: seen,
                after_last: last_treated.map_or(false, |j| i >= j),
            });
        }
    }
    Ok(TreatmentOutcome { calendar, unknown_zip_count })
}

/// Pricing model feeding the synthetic surface generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SynthModel {
    FlatVol(f64),
    Merton(MertonParams),
    Kou(KouParams),
}

impl SynthModel {
    pub fn call_price(&self, strike: f64, forward: f64, rate: f64, maturity: f64) -> Result<f64> {
        match self {
            SynthModel::FlatVol(vol) => Ok(bs_price(&BsInputs {
                forward,
                strike,
                rate,
                maturity,
                vol: *vol,
                is_call: true,
            })),
            SynthModel::Merton(p) => jumps::merton_price(p, strike, forward, maturity, true),
            SynthModel::Kou(p) => jumps::kou_price(p, strike, forward, maturity, true),
        }
    }
}

/// Arbitrage-free call curve from a pricing model on a given strike grid.
pub fn synth_surface(
    model: &SynthModel,
    strikes: &[f64],
    maturity: f64,
    forward: f64,
    rate: f64,
    ticker: &str,
    quote_date: NaiveDate,
) -> Result<SurfaceSlice> {
    let calls = strikes
        .iter()
        .map(|&k| model.call_price(k, forward, rate, maturity))
        .collect::<Result<Vec<f64>>>()?;
    let expiry = quote_date + chrono::Duration::days((maturity * DAYS_PER_YEAR).round() as i64);
    let slice = SurfaceSlice {
        ticker: ticker.to_string(),
        quote_date,
        expiry,
        maturity_years: maturity,
        strikes: strikes.to_vec(),
        calls,
        forward,
        rate,
        div_yield: match model {
            SynthModel::FlatVol(_) => 0.0,
            SynthModel::Merton(p) => p.div_yield,
            SynthModel::Kou(p) => p.div_yield,
        },
    };
    slice.validate()?;
    Ok(slice)
}

#[derive(Debug, Clone)]
pub struct SynthPanel {
    pub slices: Vec<SurfaceSlice>,
    pub treatment: Vec<TreatmentCalendar>,
}

/// Seeded synthetic panel: treated firms priced under `treated_model` while
/// treated, everything else under `control_model`; optional multiplicative
/// lognormal price noise.
#[allow(clippy::too_many_arguments)]
pub fn synth_panel(
    n_firms: usize,
    n_days: usize,
    treated_fraction: f64,
    control_model: &SynthModel,
    treated_model: &SynthModel,
    strikes: &[f64],
    maturity: f64,
    forward: f64,
    rate: f64,
    noise: f64,
    seed: u64,
) -> Result<SynthPanel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(2017, 1, 2).expect("static date");
    let n_treated = ((n_firms as f64) * treated_fraction).round() as usize;
    let mut slices = Vec::new();
    let mut treatment = Vec::new();
    for firm in 0..n_firms {
        let ticker = format!("F{firm:04}");
        let is_treated_firm = firm < n_treated;
        // treated firms switch on mid-sample and stay on
        let on_from = n_days / 2;
        let mut seen = false;
        for day in 0..n_days {
            let date = start + chrono::Duration::days(day as i64);
            let treated_now = is_treated_firm && day >= on_from;
            seen = seen || treated_now;
            let model = if treated_now { treated_model } else { control_model };
            let mut slice = synth_surface(model, strikes, maturity, forward, rate, &ticker, date)?;
            if noise > 0.0 {
                for c in slice.calls.iter_mut() {
                    let z: f64 = rng.gen_range(-1.0..1.0);
                    *c *= (noise * z).exp();
                }
            }
            slices.push(slice);
            treatment.push(TreatmentCalendar {
                ticker: ticker.clone(),
                date,
                treated_now,
                after_first: seen,
                after_last: is_treated_firm && day >= on_from,
            });
        }
    }
    Ok(SynthPanel { slices, treatment })
}
