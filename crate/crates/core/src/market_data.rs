//! Daily returns panels: CSV ingestion, the monthly universe filter,
//! rolling standardization, and a seeded synthetic generator that plants a
//! known factor structure plus mean-reverting residuals for verification.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

/// Trailing window used for volatility scaling.
pub const TRAILING_VOL_DAYS: usize = 252;

const UNIVERSE_MEDIAN_DAYS: usize = 20;
const MIN_CLOSE_USD: f64 = 5.0;
const MIN_MEDIAN_MKTCAP_USD: f64 = 1e9;
const MIN_MEDIAN_DOLLAR_VOLUME_USD: f64 = 1e6;

/// Dated N-stock panel of daily simple excess returns with price,
/// market-cap, and traded-value sidecars. Immutable once built.
#[derive(Debug, Clone)]
pub struct ReturnsPanel {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    returns: Matrix,
    close: Matrix,
    mktcap: Matrix,
    dollar_volume: Matrix,
    missing: Vec<bool>,
}

impl ReturnsPanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        tickers: Vec<String>,
        returns: Matrix,
        close: Matrix,
        mktcap: Matrix,
        dollar_volume: Matrix,
        missing: Vec<bool>,
    ) -> Result<Self> {
        let t = dates.len();
        let n = tickers.len();
        for w in dates.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidSpec(format!(
                    "dates not strictly increasing at {}",
                    w[1]
                )));
            }
        }
        for m in [&returns, &close, &mktcap, &dollar_volume] {
            if m.rows() != t || m.cols() != n {
                return Err(Error::DimensionMismatch { expected: t * n, got: m.rows() * m.cols() });
            }
        }
        if missing.len() != t * n {
            return Err(Error::DimensionMismatch { expected: t * n, got: missing.len() });
        }
        for ti in 0..t {
            for i in 0..n {
                if !missing[ti * n + i] {
                    let r = returns[(ti, i)];
                    if !r.is_finite() || r <= -1.0 {
                        return Err(Error::InvalidSpec(format!(
                            "return {r} for {} on {} outside (-1, inf)",
                            tickers[i], dates[ti]
                        )));
                    }
                }
            }
        }
        Ok(Self { dates, tickers, returns, close, mktcap, dollar_volume, missing })
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.tickers.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn ret(&self, day: usize, stock: usize) -> f64 {
        self.returns[(day, stock)]
    }

    pub fn close(&self, day: usize, stock: usize) -> f64 {
        self.close[(day, stock)]
    }

    pub fn mktcap(&self, day: usize, stock: usize) -> f64 {
        self.mktcap[(day, stock)]
    }

    pub fn dollar_volume(&self, day: usize, stock: usize) -> f64 {
        self.dollar_volume[(day, stock)]
    }

    pub fn is_missing(&self, day: usize, stock: usize) -> bool {
        self.missing[day * self.tickers.len() + stock]
    }

    /// True when the stock has no missing observation in `[start, end]`.
    pub fn complete_in(&self, stock: usize, start: usize, end: usize) -> bool {
        (start..=end).all(|d| !self.is_missing(d, stock))
    }

    /// Day index of the last trading day of each calendar month.
    pub fn month_end_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, d) in self.dates.iter().enumerate() {
            let is_last = match self.dates.get(i + 1) {
                Some(next) => next.month() != d.month() || next.year() != d.year(),
                None => true,
            };
            if is_last {
                out.push(i);
            }
        }
        out
    }

    /// Writes the panel back out in the loader's CSV schema, skipping
    /// missing cells. Floats use shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "date,ticker,return,close,mktcap,dollar_volume")?;
        for t in 0..self.n_days() {
            for i in 0..self.n_stocks() {
                if self.is_missing(t, i) {
                    continue;
                }
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    self.dates[t],
                    self.tickers[i],
                    self.returns[(t, i)],
                    self.close[(t, i)],
                    self.mktcap[(t, i)],
                    self.dollar_volume[(t, i)]
                )?;
            }
        }
        Ok(())
    }
}

/// Monthly eligibility screen. `eligible[k]` applies from rebalance day
/// `rebalance_days[k]` (inclusive) until the next rebalance.
#[derive(Debug, Clone)]
pub struct UniverseMask {
    pub rebalance_days: Vec<usize>,
    pub eligible: Vec<Vec<bool>>,
}

impl UniverseMask {
    /// Mask in effect when forming weights at the end of `day`: the latest
    /// rebalance at or before it. `None` before the first rebalance.
    pub fn eligible_at(&self, day: usize) -> Option<&[bool]> {
        let pos = self.rebalance_days.partition_point(|&d| d <= day);
        if pos == 0 {
            None
        } else {
            Some(&self.eligible[pos - 1])
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Monthly universe filter: close >= $5, 20-day median market cap >= $1bn,
/// and 20-day median dollar volume >= $1m, all measured on data up to and
/// including the month-end. Stocks with an incomplete 20-day window are
/// ineligible.
pub fn build_universe(panel: &ReturnsPanel) -> UniverseMask {
    let n = panel.n_stocks();
    let mut rebalance_days = Vec::new();
    let mut eligible = Vec::new();
    for me in panel.month_end_indices() {
        if me + 1 < UNIVERSE_MEDIAN_DAYS {
            continue;
        }
        let start = me + 1 - UNIVERSE_MEDIAN_DAYS;
        let mut mask = vec![false; n];
        for (i, m) in mask.iter_mut().enumerate() {
            if !panel.complete_in(i, start, me) {
                continue;
            }
            if panel.close(me, i) < MIN_CLOSE_USD {
                continue;
            }
            let mut caps: Vec<f64> = (start..=me).map(|d| panel.mktcap(d, i)).collect();
            let mut vols: Vec<f64> = (start..=me).map(|d| panel.dollar_volume(d, i)).collect();
            *m = median(&mut caps) >= MIN_MEDIAN_MKTCAP_USD
                && median(&mut vols) >= MIN_MEDIAN_DOLLAR_VOLUME_USD;
        }
        rebalance_days.push(me);
        eligible.push(mask);
    }
    UniverseMask { rebalance_days, eligible }
}

/// Standardized window: `z` is `t_tau × stocks.len()` over the days
/// `[t - t_tau + 1, t]`, with the per-stock window mean and sample
/// standard deviation used for the transform.
#[derive(Debug, Clone)]
pub struct StandardizedWindow {
    pub z: Matrix,
    pub stocks: Vec<usize>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub cap: f64,
}

impl StandardizedWindow {
    /// Standardizes a single later observation with this window's
    /// statistics (and cap), e.g. the held-out day after the window.
    pub fn standardize_day(&self, panel: &ReturnsPanel, day: usize) -> Vec<f64> {
        self.stocks
            .iter()
            .enumerate()
            .map(|(j, &i)| clip((panel.ret(day, i) - self.mu[j]) / self.sigma[j], self.cap))
            .collect()
    }
}

fn clip(x: f64, cap: f64) -> f64 {
    if cap.is_finite() {
        x.clamp(-cap, cap)
    } else {
        x
    }
}

/// Z-scores returns over `[t - t_tau + 1, t]` per stock, keeping only
/// candidates with a complete window. Entries are clipped to `±cap` when
/// `cap` is finite. `candidates = None` means all stocks.
pub fn standardize_window(
    panel: &ReturnsPanel,
    t: usize,
    t_tau: usize,
    cap: f64,
    candidates: Option<&[usize]>,
) -> Result<StandardizedWindow> {
    if t + 1 < t_tau {
        return Err(Error::InsufficientData { need: t_tau, have: t + 1 });
    }
    let start = t + 1 - t_tau;
    let all: Vec<usize>;
    let cands = match candidates {
        Some(c) => c,
        None => {
            all = (0..panel.n_stocks()).collect();
            &all
        }
    };
    let stocks: Vec<usize> =
        cands.iter().copied().filter(|&i| panel.complete_in(i, start, t)).collect();
    let mut mu = Vec::with_capacity(stocks.len());
    let mut sigma = Vec::with_capacity(stocks.len());
    for &i in &stocks {
        let xs: Vec<f64> = (start..=t).map(|d| panel.ret(d, i)).collect();
        let m = crate::linalg::mean(&xs);
        let s = crate::linalg::sample_std(&xs);
        if s == 0.0 {
            return Err(Error::DegenerateSeries(panel.tickers[i].clone()));
        }
        mu.push(m);
        sigma.push(s);
    }
    let mut z = Matrix::zeros(t_tau, stocks.len());
    for (row, d) in (start..=t).enumerate() {
        for (j, &i) in stocks.iter().enumerate() {
            z[(row, j)] = clip((panel.ret(d, i) - mu[j]) / sigma[j], cap);
        }
    }
    Ok(StandardizedWindow { z, stocks, mu, sigma, cap })
}

/// Volatility-scaled window: each observation divided by the trailing
/// 252-day sample standard deviation ending the day before it. No mean
/// subtraction, no clipping.
#[derive(Debug, Clone)]
pub struct VolScaledWindow {
    pub s: Matrix,
    pub stocks: Vec<usize>,
}

pub fn volatility_scale_window(
    panel: &ReturnsPanel,
    t: usize,
    t_tau: usize,
    candidates: Option<&[usize]>,
) -> Result<VolScaledWindow> {
    if t + 1 < t_tau + TRAILING_VOL_DAYS {
        return Err(Error::InsufficientData { need: t_tau + TRAILING_VOL_DAYS, have: t + 1 });
    }
    let start = t + 1 - t_tau;
    let hist_start = start - TRAILING_VOL_DAYS;
    let all: Vec<usize>;
    let cands = match candidates {
        Some(c) => c,
        None => {
            all = (0..panel.n_stocks()).collect();
            &all
        }
    };
    let stocks: Vec<usize> =
        cands.iter().copied().filter(|&i| panel.complete_in(i, hist_start, t)).collect();
    let mut s = Matrix::zeros(t_tau, stocks.len());
    for (row, d) in (start..=t).enumerate() {
        for (j, &i) in stocks.iter().enumerate() {
            let xs: Vec<f64> =
                (d - TRAILING_VOL_DAYS..d).map(|dd| panel.ret(dd, i)).collect();
            let sd = crate::linalg::sample_std(&xs);
            if sd == 0.0 {
                return Err(Error::DegenerateSeries(panel.tickers[i].clone()));
            }
            s[(row, j)] = panel.ret(d, i) / sd;
        }
    }
    Ok(VolScaledWindow { s, stocks })
}

/// Ornstein-Uhlenbeck ground truth for one synthetic stock. `sigma` is the
/// diffusion coefficient per √year; the stationary standard deviation is
/// `sigma / √(2κ)`.
#[derive(Debug, Clone, Copy)]
pub struct OuTruth {
    pub kappa_per_year: f64,
    pub mean: f64,
    pub sigma_per_sqrt_year: f64,
}

impl OuTruth {
    pub fn from_sigma_eq(kappa_per_year: f64, mean: f64, sigma_eq: f64) -> Self {
        Self { kappa_per_year, mean, sigma_per_sqrt_year: sigma_eq * (2.0 * kappa_per_year).sqrt() }
    }

    pub fn sigma_eq(&self) -> f64 {
        self.sigma_per_sqrt_year / (2.0 * self.kappa_per_year).sqrt()
    }

    /// Exact one-day AR(1) slope, `e^(-κ/252)`.
    pub fn ar_slope(&self) -> f64 {
        (-self.kappa_per_year / TRADING_DAYS_PER_YEAR).exp()
    }
}

/// Per-stock sidecar override so universe-filter tests can plant
/// failing stocks.
#[derive(Debug, Clone, Copy)]
pub struct SidecarOverride {
    pub stock: usize,
    pub close: f64,
    pub mktcap: f64,
    pub dollar_volume: f64,
}

/// Recipe for a synthetic panel: `r_{i,t} = Σ_j B_{ij} f_{j,t} + ΔX_{i,t}`
/// with i.i.d. Gaussian factors and exact-discretization OU residual paths.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_stocks: usize,
    pub n_factors: usize,
    pub n_days: usize,
    pub loadings: Matrix,
    pub factor_vols_daily: Vec<f64>,
    pub ou: Vec<OuTruth>,
    pub seed: u64,
    pub start_date: NaiveDate,
    pub default_close: f64,
    pub default_mktcap: f64,
    pub default_dollar_volume: f64,
    pub overrides: Vec<SidecarOverride>,
}

impl SyntheticSpec {
    /// Homogeneous spec: seeded uniform loadings in `±loading_scale`, one
    /// shared factor volatility, and identical OU parameters per stock
    /// (given via the stationary standard deviation).
    pub fn uniform(
        n_stocks: usize,
        n_factors: usize,
        n_days: usize,
        seed: u64,
        kappa_per_year: f64,
        sigma_eq: f64,
        factor_vol_daily: f64,
        loading_scale: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ad1265);
        let mut loadings = Matrix::zeros(n_stocks, n_factors);
        if loading_scale > 0.0 {
            for v in loadings.data_mut() {
                *v = rand::Rng::gen_range(&mut rng, -loading_scale..loading_scale);
            }
        }
        Self {
            n_stocks,
            n_factors,
            n_days,
            loadings,
            factor_vols_daily: vec![factor_vol_daily; n_factors],
            ou: vec![OuTruth::from_sigma_eq(kappa_per_year, 0.0, sigma_eq); n_stocks],
            seed,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 5).unwrap(),
            default_close: 50.0,
            default_mktcap: 5e9,
            default_dollar_volume: 5e7,
            overrides: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.loadings.rows() != self.n_stocks || self.loadings.cols() != self.n_factors {
            return Err(Error::InvalidSpec("loading matrix shape mismatch".into()));
        }
        if self.factor_vols_daily.len() != self.n_factors {
            return Err(Error::InvalidSpec("factor vol count mismatch".into()));
        }
        if self.ou.len() != self.n_stocks {
            return Err(Error::InvalidSpec("per-stock OU parameter count mismatch".into()));
        }
        if self.factor_vols_daily.iter().any(|&v| v <= 0.0) && self.n_factors > 0 {
            return Err(Error::InvalidSpec("factor volatilities must be positive".into()));
        }
        for ou in &self.ou {
            if ou.kappa_per_year <= 0.0 {
                return Err(Error::InvalidSpec("kappa must be positive".into()));
            }
            if ou.sigma_per_sqrt_year < 0.0 {
                return Err(Error::InvalidSpec("sigma must be non-negative".into()));
            }
        }
        if self.n_days == 0 || self.n_stocks == 0 {
            return Err(Error::InvalidSpec("empty panel requested".into()));
        }
        Ok(())
    }
}

/// Ground-truth record emitted alongside a synthetic panel.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    /// T × k factor returns.
    pub factors: Matrix,
    /// T × N residual increments ΔX.
    pub residual_increments: Matrix,
    /// (T+1) × N residual levels, row 0 being the stationary start.
    pub residual_paths: Matrix,
    pub ou: Vec<OuTruth>,
    pub loadings: Matrix,
}

fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if d.weekday() != Weekday::Sat && d.weekday() != Weekday::Sun {
            out.push(d);
        }
        d = d.succ_opt().expect("date overflow");
    }
    out
}

/// Deterministic synthetic panel, bit-identical under a fixed seed.
pub fn generate_synthetic_panel(spec: &SyntheticSpec) -> Result<(ReturnsPanel, SyntheticTruth)> {
    spec.validate()?;
    let (t, n, k) = (spec.n_days, spec.n_stocks, spec.n_factors);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut factors = Matrix::zeros(t, k);
    for row in 0..t {
        for j in 0..k {
            let z: f64 = StandardNormal.sample(&mut rng);
            factors[(row, j)] = z * spec.factor_vols_daily[j];
        }
    }

    let mut paths = Matrix::zeros(t + 1, n);
    let mut increments = Matrix::zeros(t, n);
    for (i, ou) in spec.ou.iter().enumerate() {
        let b = ou.ar_slope();
        let sig_eq = ou.sigma_eq();
        let innov = sig_eq * (1.0 - b * b).sqrt();
        let z0: f64 = StandardNormal.sample(&mut rng);
        paths[(0, i)] = ou.mean + sig_eq * z0;
        for row in 0..t {
            let z: f64 = StandardNormal.sample(&mut rng);
            let prev = paths[(row, i)];
            let next = ou.mean + (prev - ou.mean) * b + innov * z;
            paths[(row + 1, i)] = next;
            increments[(row, i)] = next - prev;
        }
    }

    let mut returns = Matrix::zeros(t, n);
    for row in 0..t {
        for i in 0..n {
            let mut r = increments[(row, i)];
            for j in 0..k {
                r += spec.loadings[(i, j)] * factors[(row, j)];
            }
            returns[(row, i)] = r;
        }
    }

    let mut close = Matrix::zeros(t, n);
    let mut mktcap = Matrix::zeros(t, n);
    let mut volume = Matrix::zeros(t, n);
    let mut per_stock: Vec<(f64, f64, f64)> =
        vec![(spec.default_close, spec.default_mktcap, spec.default_dollar_volume); n];
    for o in &spec.overrides {
        if o.stock >= n {
            return Err(Error::InvalidSpec(format!("override stock {} out of range", o.stock)));
        }
        per_stock[o.stock] = (o.close, o.mktcap, o.dollar_volume);
    }
    for row in 0..t {
        for (i, &(c, m, v)) in per_stock.iter().enumerate() {
            close[(row, i)] = c;
            mktcap[(row, i)] = m;
            volume[(row, i)] = v;
        }
    }

    let dates = business_days(spec.start_date, t);
    let tickers: Vec<String> = (0..n).map(|i| format!("S{i:04}")).collect();
    let panel = ReturnsPanel::new(
        dates,
        tickers,
        returns,
        close,
        mktcap,
        volume,
        vec![false; t * n],
    )?;
    let truth = SyntheticTruth {
        factors,
        residual_increments: increments,
        residual_paths: paths,
        ou: spec.ou.clone(),
        loadings: spec.loadings.clone(),
    };
    Ok((panel, truth))
}

const PANEL_HEADER: [&str; 6] = ["date", "ticker", "return", "close", "mktcap", "dollar_volume"];

fn parse_date(s: &str, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| Error::Parse { line, msg: format!("bad date `{s}`: {e}") })
}

fn parse_f64(s: &str, field: &str, line: u64) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|e| Error::Parse { line, msg: format!("bad {field} `{s}`: {e}") })
}

/// Loads a dense panel from `date,ticker,return,close,mktcap,dollar_volume`
/// rows. Absent (date, ticker) pairs become missing cells; duplicates are
/// rejected.
pub fn load_returns_panel<P: AsRef<Path>>(path: P) -> Result<ReturnsPanel> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != PANEL_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {:?}, got {:?}", PANEL_HEADER.join(","), got.join(",")),
        });
    }

    struct Row {
        ret: f64,
        close: f64,
        mktcap: f64,
        volume: f64,
    }
    let mut cells: BTreeMap<(NaiveDate, String), Row> = BTreeMap::new();
    let mut dates: BTreeSet<NaiveDate> = BTreeSet::new();
    let mut tickers: BTreeSet<String> = BTreeSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 6 {
            return Err(Error::Parse { line, msg: format!("expected 6 fields, got {}", record.len()) });
        }
        let date = parse_date(&record[0], line)?;
        let ticker = record[1].trim().to_string();
        if ticker.is_empty() {
            return Err(Error::Parse { line, msg: "empty ticker".into() });
        }
        let row = Row {
            ret: parse_f64(&record[2], "return", line)?,
            close: parse_f64(&record[3], "close", line)?,
            mktcap: parse_f64(&record[4], "mktcap", line)?,
            volume: parse_f64(&record[5], "dollar_volume", line)?,
        };
        if cells.insert((date, ticker.clone()), row).is_some() {
            return Err(Error::DuplicateRow { date: date.to_string(), ticker });
        }
        dates.insert(date);
        tickers.insert(ticker);
    }
    let dates: Vec<NaiveDate> = dates.into_iter().collect();
    let tickers: Vec<String> = tickers.into_iter().collect();
    let (t, n) = (dates.len(), tickers.len());
    let mut returns = Matrix::zeros(t, n);
    let mut close = Matrix::zeros(t, n);
    let mut mktcap = Matrix::zeros(t, n);
    let mut volume = Matrix::zeros(t, n);
    let mut missing = vec![true; t * n];
    for (ti, date) in dates.iter().enumerate() {
        for (i, ticker) in tickers.iter().enumerate() {
            if let Some(row) = cells.get(&(*date, ticker.clone())) {
                returns[(ti, i)] = row.ret;
                close[(ti, i)] = row.close;
                mktcap[(ti, i)] = row.mktcap;
                volume[(ti, i)] = row.volume;
                missing[ti * n + i] = false;
            }
        }
    }
    ReturnsPanel::new(dates, tickers, returns, close, mktcap, volume, missing)
}

/// Exogenous factor-return history, e.g. Fama-French daily files.
#[derive(Debug, Clone)]
pub struct FactorReturns {
    pub dates: Vec<NaiveDate>,
    pub names: Vec<String>,
    /// T × k factor returns.
    pub values: Matrix,
    pub risk_free: Vec<f64>,
}

impl FactorReturns {
    /// Row index for each panel date; errors when a panel date is absent.
    pub fn align_to(&self, panel: &ReturnsPanel) -> Result<Vec<usize>> {
        let index: BTreeMap<NaiveDate, usize> =
            self.dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        panel
            .dates()
            .iter()
            .map(|d| {
                index
                    .get(d)
                    .copied()
                    .ok_or_else(|| Error::MisalignedDates(format!("no factor returns for {d}")))
            })
            .collect()
    }
}

/// Loads factor returns from `date,<factor names...>,rf` CSV rows.
pub fn load_factor_returns<P: AsRef<Path>>(path: P) -> Result<FactorReturns> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let cols: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    if cols.len() < 3 || cols[0] != "date" || cols[cols.len() - 1] != "rf" {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header `date,<factors...>,rf` with at least one factor".into(),
        });
    }
    let names: Vec<String> = cols[1..cols.len() - 1].to_vec();
    let k = names.len();
    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rf = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != k + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", k + 2, record.len()),
            });
        }
        let date = parse_date(&record[0], line)?;
        if let Some(last) = dates.last() {
            if date <= *last {
                return Err(Error::Parse { line, msg: format!("dates not increasing at {date}") });
            }
        }
        dates.push(date);
        let mut row = Vec::with_capacity(k);
        for j in 0..k {
            row.push(parse_f64(&record[j + 1], &names[j], line)?);
        }
        rows.push(row);
        rf.push(parse_f64(&record[k + 1], "rf", line)?);
    }
    let values = Matrix::from_rows(&rows);
    Ok(FactorReturns { dates, names, values, risk_free: rf })
}

/// Writes factor returns in the loader's schema.
pub fn write_factor_returns<W: Write>(factors: &FactorReturns, out: &mut W) -> Result<()> {
    writeln!(out, "date,{},rf", factors.names.join(","))?;
    for (i, date) in factors.dates.iter().enumerate() {
        let row: Vec<String> = factors.values.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},{}", date, row.join(","), factors.risk_free[i])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(contents: &str) -> std::path::PathBuf {
        use std::sync::atomic::{AtomicU64, Ordering};
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let id = COUNTER.fetch_add(1, Ordering::SeqCst);
        let path = std::env::temp_dir().join(format!(
            "statarb_panel_test_{}_{id}.csv",
            std::process::id()
        ));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn load_well_formed_panel() {
        let csv = "date,ticker,return,close,mktcap,dollar_volume\n\
            2020-01-02,A,0.01,10,2e9,5e6\n\
            2020-01-02,B,-0.02,20,3e9,6e6\n\
            2020-01-03,A,0.005,10.1,2e9,5e6\n\
            2020-01-03,B,0.001,19.9,3e9,6e6\n\
            2020-01-06,A,-0.004,10.0,2e9,5e6\n\
            2020-01-06,B,0.002,19.95,3e9,6e6\n";
        let path = write_temp(csv);
        let panel = load_returns_panel(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(panel.n_days(), 3);
        assert_eq!(panel.n_stocks(), 2);
        assert_eq!(panel.tickers(), &["A".to_string(), "B".to_string()]);
        assert_eq!(panel.ret(0, 0), 0.01);
        assert_eq!(panel.ret(2, 1), 0.002);
        assert!((0..3).all(|t| (0..2).all(|i| !panel.is_missing(t, i))));
    }

    #[test]
    fn absent_pair_becomes_missing() {
        let csv = "date,ticker,return,close,mktcap,dollar_volume\n\
            2020-01-02,A,0.01,10,2e9,5e6\n\
            2020-01-02,B,-0.02,20,3e9,6e6\n\
            2020-01-03,A,0.005,10.1,2e9,5e6\n\
            2020-01-06,A,-0.004,10.0,2e9,5e6\n\
            2020-01-06,B,0.002,19.95,3e9,6e6\n";
        let path = write_temp(csv);
        let panel = load_returns_panel(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert!(panel.is_missing(1, 1));
        assert!(!panel.is_missing(1, 0));
    }

    #[test]
    fn malformed_return_names_line() {
        let csv = "date,ticker,return,close,mktcap,dollar_volume\n\
            2020-01-02,A,0.01,10,2e9,5e6\n\
            2020-01-03,A,abc,10,2e9,5e6\n";
        let path = write_temp(csv);
        let err = load_returns_panel(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("return"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_pair_rejected() {
        let csv = "date,ticker,return,close,mktcap,dollar_volume\n\
            2020-01-02,A,0.01,10,2e9,5e6\n\
            2020-01-02,A,0.02,10,2e9,5e6\n";
        let path = write_temp(csv);
        let err = load_returns_panel(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, Error::DuplicateRow { .. }));
    }

    fn universe_test_panel(close_b: f64, mktcap_b: f64, volume_b: f64) -> ReturnsPanel {
        let mut spec = SyntheticSpec::uniform(3, 1, 60, 42, 5.0, 0.02, 0.005, 1.0);
        spec.overrides.push(SidecarOverride {
            stock: 1,
            close: close_b,
            mktcap: mktcap_b,
            dollar_volume: volume_b,
        });
        generate_synthetic_panel(&spec).unwrap().0
    }

    #[test]
    fn universe_close_threshold() {
        let panel = universe_test_panel(4.99, 5e9, 5e7);
        let mask = build_universe(&panel);
        assert!(!mask.eligible[0][1], "close $4.99 must be ineligible");
        assert!(mask.eligible[0][0]);
    }

    #[test]
    fn universe_mktcap_threshold() {
        let panel = universe_test_panel(50.0, 0.9e9, 5e7);
        let mask = build_universe(&panel);
        assert!(!mask.eligible[0][1], "median mktcap $0.9bn must be ineligible");
    }

    #[test]
    fn universe_passing_with_margin() {
        let panel = universe_test_panel(50.0, 1e10, 1e7);
        let mask = build_universe(&panel);
        assert!(mask.eligible[0][1]);
    }

    #[test]
    fn universe_ignores_data_after_rebalance() {
        let spec = SyntheticSpec::uniform(4, 1, 80, 9, 5.0, 0.02, 0.005, 1.0);
        let (panel, _) = generate_synthetic_panel(&spec).unwrap();
        let mask_full = build_universe(&panel);
        let first_rebalance = mask_full.rebalance_days[0];

        // Rebuild a panel whose sidecars are perturbed strictly after the
        // first rebalance; the first mask must be unchanged.
        let mut close = Matrix::zeros(panel.n_days(), panel.n_stocks());
        let mut mktcap = Matrix::zeros(panel.n_days(), panel.n_stocks());
        let mut volume = Matrix::zeros(panel.n_days(), panel.n_stocks());
        let mut returns = Matrix::zeros(panel.n_days(), panel.n_stocks());
        for t in 0..panel.n_days() {
            for i in 0..panel.n_stocks() {
                let bump = if t > first_rebalance { 0.0 } else { 1.0 };
                close[(t, i)] = panel.close(t, i) * bump + if bump == 0.0 { 1.0 } else { 0.0 };
                mktcap[(t, i)] = panel.mktcap(t, i) * bump;
                volume[(t, i)] = panel.dollar_volume(t, i) * bump;
                returns[(t, i)] = panel.ret(t, i);
            }
        }
        let perturbed = ReturnsPanel::new(
            panel.dates().to_vec(),
            panel.tickers().to_vec(),
            returns,
            close,
            mktcap,
            volume,
            vec![false; panel.n_days() * panel.n_stocks()],
        )
        .unwrap();
        let mask_perturbed = build_universe(&perturbed);
        assert_eq!(mask_full.eligible[0], mask_perturbed.eligible[0]);
    }

    #[test]
    fn standardize_hand_example() {
        // returns (-1%, 0%, +1%): mu = 0, sample std = 1% -> z = (-1, 0, 1).
        let dates = business_days(NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(), 3);
        let returns = Matrix::from_rows(&[vec![-0.01], vec![0.0], vec![0.01]]);
        let ones = Matrix::from_vec(3, 1, vec![50.0, 50.0, 50.0]);
        let caps = Matrix::from_vec(3, 1, vec![5e9; 3]);
        let vols = Matrix::from_vec(3, 1, vec![5e7; 3]);
        let panel = ReturnsPanel::new(
            dates,
            vec!["A".into()],
            returns,
            ones,
            caps,
            vols,
            vec![false; 3],
        )
        .unwrap();
        let w = standardize_window(&panel, 2, 3, f64::INFINITY, None).unwrap();
        assert!((w.z[(0, 0)] + 1.0).abs() <= 1e-12);
        assert!(w.z[(1, 0)].abs() <= 1e-12);
        assert!((w.z[(2, 0)] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn standardize_constant_series_errors() {
        let dates = business_days(NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(), 5);
        let returns = Matrix::from_vec(5, 1, vec![0.01; 5]);
        let ones = Matrix::from_vec(5, 1, vec![50.0; 5]);
        let caps = Matrix::from_vec(5, 1, vec![5e9; 5]);
        let vols = Matrix::from_vec(5, 1, vec![5e7; 5]);
        let panel =
            ReturnsPanel::new(dates, vec!["A".into()], returns, ones, caps, vols, vec![false; 5])
                .unwrap();
        assert!(matches!(
            standardize_window(&panel, 4, 5, 3.0, None),
            Err(Error::DegenerateSeries(_))
        ));
    }

    #[test]
    fn standardize_caps_outlier_exactly() {
        // An in-window observation can reach at most (n-1)/sqrt(n) sigma of
        // its own window, so use 30 days to leave room above 3.
        let mut rets: Vec<f64> =
            (0..29).map(|i| if i % 2 == 0 { 0.001 } else { -0.001 }).collect();
        rets.push(0.2);
        let t = rets.len();
        let dates = business_days(NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(), t);
        let returns = Matrix::from_vec(t, 1, rets);
        let ones = Matrix::from_vec(t, 1, vec![50.0; t]);
        let caps = Matrix::from_vec(t, 1, vec![5e9; t]);
        let vols = Matrix::from_vec(t, 1, vec![5e7; t]);
        let panel = ReturnsPanel::new(
            dates,
            vec!["A".into()],
            returns,
            ones,
            caps,
            vols,
            vec![false; t],
        )
        .unwrap();
        let w = standardize_window(&panel, t - 1, t, 3.0, None).unwrap();
        assert_eq!(w.z[(t - 1, 0)], 3.0);
        let unclipped = standardize_window(&panel, t - 1, t, f64::INFINITY, None).unwrap();
        assert!(unclipped.z[(t - 1, 0)] > 3.0);
    }

    #[test]
    fn standardized_columns_have_unit_moments() {
        let spec = SyntheticSpec::uniform(6, 2, 300, 3, 5.0, 0.02, 0.005, 1.0);
        let (panel, _) = generate_synthetic_panel(&spec).unwrap();
        let w = standardize_window(&panel, 299, 252, f64::INFINITY, None).unwrap();
        for j in 0..w.stocks.len() {
            let col = w.z.col(j);
            let mu = crate::linalg::mean(&col);
            let sd = crate::linalg::sample_std(&col);
            assert!(mu.abs() <= 1e-10, "column mean {mu}");
            assert!((sd - 1.0).abs() <= 1e-10, "column std {sd}");
        }
    }

    #[test]
    fn vol_scale_hand_values() {
        // Stock with constant trailing vol: r / sigma.
        let t = TRAILING_VOL_DAYS + 2;
        let mut rets = Vec::with_capacity(t);
        for i in 0..TRAILING_VOL_DAYS {
            rets.push(if i % 2 == 0 { 0.01 } else { -0.01 });
        }
        rets.push(0.02);
        rets.push(0.0);
        let dates = business_days(NaiveDate::from_ymd_opt(2015, 1, 5).unwrap(), t);
        let returns = Matrix::from_vec(t, 1, rets);
        let ones = Matrix::from_vec(t, 1, vec![50.0; t]);
        let caps = Matrix::from_vec(t, 1, vec![5e9; t]);
        let vols = Matrix::from_vec(t, 1, vec![5e7; t]);
        let panel = ReturnsPanel::new(
            dates,
            vec!["A".into()],
            returns,
            ones,
            caps,
            vols,
            vec![false; t],
        )
        .unwrap();
        let w = volatility_scale_window(&panel, t - 1, 2, None).unwrap();
        // Trailing std of the alternating ±1% block is slightly above 1%;
        // first scaled entry uses exactly that window.
        let hist: Vec<f64> =
            (0..TRAILING_VOL_DAYS).map(|i| if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
        let sd = crate::linalg::sample_std(&hist);
        assert!((w.s[(0, 0)] - 0.02 / sd).abs() <= 1e-12);
        assert_eq!(w.s[(1, 0)], 0.0);
    }

    #[test]
    fn vol_scale_minus_z_identity() {
        // S - Z = mu/sigma_win + r*(1/sigma_trail - 1/sigma_win): check the
        // exact identity entrywise, then the drift recovery on average.
        let mut spec = SyntheticSpec::uniform(4, 1, 800, 12, 6.0, 0.015, 0.004, 0.8);
        for ou in &mut spec.ou {
            ou.mean = 0.0;
        }
        let (panel, _) = generate_synthetic_panel(&spec).unwrap();
        let t = 799;
        let t_tau = 252;
        let z = standardize_window(&panel, t, t_tau, f64::INFINITY, None).unwrap();
        let s = volatility_scale_window(&panel, t, t_tau, None).unwrap();
        assert_eq!(z.stocks, s.stocks);
        let start = t + 1 - t_tau;
        for (j, &i) in z.stocks.iter().enumerate() {
            let mut mean_diff = 0.0;
            for (row, d) in (start..=t).enumerate() {
                let r = panel.ret(d, i);
                let hist: Vec<f64> =
                    (d - TRAILING_VOL_DAYS..d).map(|dd| panel.ret(dd, i)).collect();
                let sd_trail = crate::linalg::sample_std(&hist);
                let expect =
                    z.mu[j] / z.sigma[j] + r * (1.0 / sd_trail - 1.0 / z.sigma[j]);
                let diff = s.s[(row, j)] - z.z[(row, j)];
                assert!((diff - expect).abs() <= 1e-12, "identity violated");
                mean_diff += diff;
            }
            mean_diff /= t_tau as f64;
            // With nearly-stationary vol the average difference recovers
            // mu/sigma.
            assert!(
                (mean_diff - z.mu[j] / z.sigma[j]).abs()
                    <= 0.3 * (z.mu[j] / z.sigma[j]).abs() + 0.02,
                "mean S-Z {mean_diff} vs mu/sigma {}",
                z.mu[j] / z.sigma[j]
            );
        }
    }

    #[test]
    fn synthetic_degenerate_spec_gives_zero_returns() {
        let mut spec = SyntheticSpec::uniform(3, 2, 50, 1, 5.0, 0.02, 0.005, 1.0);
        for v in spec.loadings.data_mut() {
            *v = 0.0;
        }
        for ou in &mut spec.ou {
            ou.sigma_per_sqrt_year = 0.0;
        }
        let (panel, _) = generate_synthetic_panel(&spec).unwrap();
        for t in 0..50 {
            for i in 0..3 {
                assert_eq!(panel.ret(t, i), 0.0);
            }
        }
    }

    #[test]
    fn synthetic_same_seed_bit_identical() {
        let spec = SyntheticSpec::uniform(5, 2, 120, 77, 8.0, 0.02, 0.005, 1.0);
        let (a, ta) = generate_synthetic_panel(&spec).unwrap();
        let (b, tb) = generate_synthetic_panel(&spec).unwrap();
        assert_eq!(a.returns.data(), b.returns.data());
        assert_eq!(ta.factors.data(), tb.factors.data());
        assert_eq!(ta.residual_paths.data(), tb.residual_paths.data());
    }

    #[test]
    fn synthetic_rejects_bad_kappa() {
        let mut spec = SyntheticSpec::uniform(2, 1, 30, 1, 5.0, 0.02, 0.005, 1.0);
        spec.ou[0].kappa_per_year = 0.0;
        assert!(matches!(generate_synthetic_panel(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn synthetic_increment_autocorrelation_matches_ou() {
        // Lag-1 autocorrelation of exact-discretization OU increments is
        // -(1-b)/2 with b = e^(-kappa/252).
        let kappa = 8.0;
        let spec = SyntheticSpec::uniform(1, 1, 10_000, 123, kappa, 0.02, 1e-12, 0.0);
        let (_, truth) = generate_synthetic_panel(&spec).unwrap();
        let dx = truth.residual_increments.col(0);
        let n = dx.len();
        let mu = crate::linalg::mean(&dx);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            den += (dx[i] - mu) * (dx[i] - mu);
            if i + 1 < n {
                num += (dx[i] - mu) * (dx[i + 1] - mu);
            }
        }
        let rho = num / den;
        let b = (-kappa / TRADING_DAYS_PER_YEAR).exp();
        let expect = -(1.0 - b) / 2.0;
        let se = 1.0 / (n as f64).sqrt();
        assert!(
            (rho - expect).abs() <= 3.0 * se,
            "autocorr {rho} vs {expect} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn panel_csv_round_trip() {
        let spec = SyntheticSpec::uniform(3, 1, 40, 5, 5.0, 0.02, 0.005, 1.0);
        let (panel, _) = generate_synthetic_panel(&spec).unwrap();
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        let path = write_temp(std::str::from_utf8(&buf).unwrap());
        let reloaded = load_returns_panel(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(panel.dates(), reloaded.dates());
        assert_eq!(panel.tickers(), reloaded.tickers());
        assert_eq!(panel.returns.data(), reloaded.returns.data());
    }

    #[test]
    fn factor_returns_round_trip_and_alignment() {
        let spec = SyntheticSpec::uniform(2, 2, 30, 8, 5.0, 0.02, 0.005, 1.0);
        let (panel, truth) = generate_synthetic_panel(&spec).unwrap();
        let fr = FactorReturns {
            dates: panel.dates().to_vec(),
            names: vec!["f1".into(), "f2".into()],
            values: truth.factors.clone(),
            risk_free: vec![0.0; 30],
        };
        let mut buf = Vec::new();
        write_factor_returns(&fr, &mut buf).unwrap();
        let path = write_temp(std::str::from_utf8(&buf).unwrap());
        let loaded = load_factor_returns(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(loaded.values.data(), truth.factors.data());
        let idx = loaded.align_to(&panel).unwrap();
        assert_eq!(idx, (0..30).collect::<Vec<_>>());
    }
}
