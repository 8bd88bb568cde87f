//! Out-of-sample residual generation: rolling exogenous-factor regressions,
//! PCA eigenportfolio models re-estimated daily, and autoencoder models in
//! ten architecture variants with three residual-extraction options.
//!
//! All three backends share the same alignment: the residual for day `t`
//! comes from a model fitted on data through `t-1` combined with the
//! realized return of day `t`.

use std::io::Write;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::linalg::{lstsq_min_norm, sym_eigen, Matrix};
use crate::market_data::{
    standardize_window, volatility_scale_window, FactorReturns, ReturnsPanel, StandardizedWindow,
    UniverseMask, VolScaledWindow,
};
use crate::seeding::derive_seed;
use crate::tensor_nn::{
    adam_step, mse_loss, Activation, AdamState, LayerSpec, Mode, Network,
};

/// Rolling regression window for residual extraction (days).
pub const FIT_WINDOW_DAYS: usize = 60;

/// Estimation window for PCA / autoencoder models (days).
pub const MODEL_WINDOW_DAYS: usize = 252;

/// Cap applied to standardized autoencoder inputs (standard deviations).
pub const AE_INPUT_CAP: f64 = 3.0;

/// Latent width shared by all autoencoder variants.
pub const AE_LATENT: usize = 20;

pub const AE_EPOCHS: usize = 10;
pub const AE_LEARNING_RATE: f64 = 0.001;

/// Ordinary least squares fit with optional intercept.
#[derive(Debug, Clone)]
pub struct OLSFit {
    /// Coefficients on the regressors, excluding any intercept.
    pub beta: Vec<f64>,
    pub alpha: Option<f64>,
    /// In-sample residuals over the fit window.
    pub residuals: Vec<f64>,
    pub r2: f64,
    /// True when the solver dropped near-null directions (minimum-norm
    /// convention instead of a hard failure).
    pub rank_deficient: bool,
}

impl OLSFit {
    /// Projection used for out-of-sample residuals: `βᵀx`, intercept
    /// excluded even when it was fitted.
    pub fn project(&self, x: &[f64]) -> f64 {
        crate::linalg::dot(&self.beta, x)
    }
}

/// Least squares of `y` on `x` (T × k). With `intercept`, a ones column is
/// fitted but reported separately in `alpha`. Rank-deficient designs fall
/// back to the minimum-norm solution and are flagged.
pub fn ols_fit(x: &Matrix, y: &[f64], intercept: bool) -> Result<OLSFit> {
    let t = x.rows();
    let k = x.cols();
    if y.len() != t {
        return Err(Error::DimensionMismatch { expected: t, got: y.len() });
    }
    if t <= k + 1 {
        return Err(Error::InsufficientData { need: k + 2, have: t });
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ols regressors".into()));
    }
    let design = if intercept {
        let mut d = Matrix::zeros(t, k + 1);
        for i in 0..t {
            d[(i, 0)] = 1.0;
            for j in 0..k {
                d[(i, j + 1)] = x[(i, j)];
            }
        }
        d
    } else {
        x.clone()
    };
    let solution = lstsq_min_norm(&design, y)?;
    let fitted = design.mat_vec(&solution.beta);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let ssr: f64 = residuals.iter().map(|r| r * r).sum();
    let sst: f64 = if intercept {
        let ybar = crate::linalg::mean(y);
        y.iter().map(|v| (v - ybar) * (v - ybar)).sum()
    } else {
        y.iter().map(|v| v * v).sum()
    };
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 0.0 };
    let (alpha, beta) = if intercept {
        (Some(solution.beta[0]), solution.beta[1..].to_vec())
    } else {
        (None, solution.beta.clone())
    };
    Ok(OLSFit { beta, alpha, residuals, r2, rank_deficient: solution.rank_deficient() })
}

/// Dated residual matrix with a presence mask and provenance tag.
#[derive(Debug, Clone)]
pub struct ResidualPanel {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub values: Matrix,
    pub present: Vec<bool>,
    pub model: String,
    pub variant: String,
    /// (day, stock) pairs whose regression was rank-deficient.
    pub flagged: Vec<(usize, usize)>,
}

impl ResidualPanel {
    fn empty(panel: &ReturnsPanel, model: &str, variant: &str) -> Self {
        let (t, n) = (panel.n_days(), panel.n_stocks());
        Self {
            dates: panel.dates().to_vec(),
            tickers: panel.tickers().to_vec(),
            values: Matrix::zeros(t, n),
            present: vec![false; t * n],
            model: model.to_string(),
            variant: variant.to_string(),
            flagged: Vec::new(),
        }
    }

    fn set(&mut self, day: usize, stock: usize, value: f64) {
        self.values[(day, stock)] = value;
        self.present[day * self.tickers.len() + stock] = true;
    }

    pub fn is_present(&self, day: usize, stock: usize) -> bool {
        self.present[day * self.tickers.len() + stock]
    }

    pub fn value(&self, day: usize, stock: usize) -> f64 {
        self.values[(day, stock)]
    }

    /// True when the stock has residuals on every day in `[start, end]`.
    pub fn complete_in(&self, stock: usize, start: usize, end: usize) -> bool {
        (start..=end).all(|d| self.is_present(d, stock))
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "date,ticker,residual,model,variant")?;
        for t in 0..self.dates.len() {
            for i in 0..self.tickers.len() {
                if self.is_present(t, i) {
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        self.dates[t],
                        self.tickers[i],
                        self.values[(t, i)],
                        self.model,
                        self.variant
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Stocks tradable at day `t`: the latest monthly mask at or before `t`,
/// or every stock when no universe is supplied. `None` means the day has
/// no universe yet and should be skipped.
fn candidates_at(
    panel: &ReturnsPanel,
    universe: Option<&UniverseMask>,
    day: usize,
) -> Option<Vec<usize>> {
    match universe {
        None => Some((0..panel.n_stocks()).collect()),
        Some(u) => u.eligible_at(day).map(|mask| {
            mask.iter().enumerate().filter_map(|(i, &e)| e.then_some(i)).collect()
        }),
    }
}

/// Rolling exogenous-factor residuals: for each day `d`, betas come from
/// regressing the stock on the factor returns over the previous
/// `fit_days`, the intercept is fitted but not projected, and
/// `ε_d = r_d − βᵀ f_d`.
pub fn exogenous_residuals(
    panel: &ReturnsPanel,
    factors: &FactorReturns,
    fit_days: usize,
    universe: Option<&UniverseMask>,
) -> Result<ResidualPanel> {
    let map = factors.align_to(panel)?;
    let k = factors.values.cols();
    let mut out = ResidualPanel::empty(panel, "FF", &factors.names.join("+"));
    for day in fit_days..panel.n_days() {
        let t = day - 1;
        let Some(cands) = candidates_at(panel, universe, t) else {
            continue;
        };
        let start = day - fit_days;
        let mut x = Matrix::zeros(fit_days, k);
        for (row, d) in (start..day).enumerate() {
            for j in 0..k {
                x[(row, j)] = factors.values[(map[d], j)];
            }
        }
        let f_next: Vec<f64> = (0..k).map(|j| factors.values[(map[day], j)]).collect();
        for i in cands {
            if !panel.complete_in(i, start, day) {
                continue;
            }
            let y: Vec<f64> = (start..day).map(|d| panel.ret(d, i)).collect();
            let fit = ols_fit(&x, &y, true)?;
            out.set(day, i, panel.ret(day, i) - fit.project(&f_next));
            if fit.rank_deficient {
                out.flagged.push((day, i));
            }
        }
    }
    Ok(out)
}

/// PCA factor model estimated on one standardized window: correlation
/// matrix, leading eigenpairs, and the eigenportfolio factor-return
/// history over the window.
#[derive(Debug, Clone)]
pub struct PCAFactorModel {
    pub stocks: Vec<usize>,
    pub correlation: Matrix,
    /// Top-k eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// N_valid × k; column j is the j-th principal component, sign-fixed
    /// so its largest-magnitude entry is positive.
    pub eigenvectors: Matrix,
    /// Window sample volatility per retained stock.
    pub sigma: Vec<f64>,
    /// t_tau × k eigenportfolio returns over the estimation window.
    pub factor_history: Matrix,
}

impl PCAFactorModel {
    /// Eigenportfolio returns at an arbitrary day using this model's
    /// weights `v_i / σ_i`; stocks missing that day contribute nothing.
    pub fn factor_returns_at(&self, panel: &ReturnsPanel, day: usize) -> Vec<f64> {
        let k = self.eigenvalues.len();
        let mut f = vec![0.0; k];
        for (idx, &stock) in self.stocks.iter().enumerate() {
            if panel.is_missing(day, stock) {
                continue;
            }
            let r = panel.ret(day, stock);
            for (j, fj) in f.iter_mut().enumerate() {
                *fj += self.eigenvectors[(idx, j)] / self.sigma[idx] * r;
            }
        }
        f
    }
}

/// Estimates the PCA model at day `t` from the unclipped standardized
/// window `[t - t_tau + 1, t]`, keeping the top `k` components.
pub fn pca_factors(
    panel: &ReturnsPanel,
    t: usize,
    t_tau: usize,
    k: usize,
    candidates: Option<&[usize]>,
) -> Result<PCAFactorModel> {
    let window = standardize_window(panel, t, t_tau, f64::INFINITY, candidates)?;
    let n_valid = window.stocks.len();
    if k == 0 || k > n_valid {
        return Err(Error::InvalidK { k, n_valid });
    }
    let mut corr = window.z.t_matmul(&window.z);
    let scale = 1.0 / (t_tau as f64 - 1.0);
    for v in corr.data_mut() {
        *v *= scale;
    }
    let eig = sym_eigen(&corr)?;
    let eigenvalues = eig.values[..k].to_vec();
    let mut eigenvectors = Matrix::zeros(n_valid, k);
    for j in 0..k {
        let col = eig.vectors.col(j);
        // Sign convention: flip so the largest-|entry| component is positive.
        let mut arg = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[arg].abs() {
                arg = i;
            }
        }
        let flip = if col[arg] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n_valid {
            eigenvectors[(i, j)] = flip * col[i];
        }
    }
    let start = t + 1 - t_tau;
    let mut factor_history = Matrix::zeros(t_tau, k);
    for (row, d) in (start..=t).enumerate() {
        for j in 0..k {
            let mut f = 0.0;
            for (idx, &stock) in window.stocks.iter().enumerate() {
                f += eigenvectors[(idx, j)] / window.sigma[idx] * panel.ret(d, stock);
            }
            factor_history[(row, j)] = f;
        }
    }
    Ok(PCAFactorModel {
        stocks: window.stocks,
        correlation: corr,
        eigenvalues,
        eigenvectors,
        sigma: window.sigma,
        factor_history,
    })
}

/// Daily re-estimated PCA residuals: eigenportfolios from the window
/// ending `d-1`, per-stock regression of raw returns on the factor history
/// over the last `fit_days`, and `ε_d = r_d − βᵀ f_d` with day `d` unused
/// by either estimation step.
pub fn pca_residuals(
    panel: &ReturnsPanel,
    k: usize,
    t_tau: usize,
    fit_days: usize,
    universe: Option<&UniverseMask>,
) -> Result<ResidualPanel> {
    let mut out = ResidualPanel::empty(panel, "PCA", &k.to_string());
    for day in t_tau..panel.n_days() {
        let t = day - 1;
        let Some(cands) = candidates_at(panel, universe, t) else {
            continue;
        };
        let model = pca_factors(panel, t, t_tau, k, Some(&cands))?;
        let hist_rows = model.factor_history.rows();
        let mut x = Matrix::zeros(fit_days, k);
        for row in 0..fit_days {
            for j in 0..k {
                x[(row, j)] = model.factor_history[(hist_rows - fit_days + row, j)];
            }
        }
        let f_next = model.factor_returns_at(panel, day);
        for (idx, &stock) in model.stocks.iter().enumerate() {
            if panel.is_missing(day, stock) {
                continue;
            }
            let y: Vec<f64> = (day - fit_days..day).map(|d| panel.ret(d, stock)).collect();
            let fit = ols_fit(&x, &y, true)?;
            out.set(day, stock, panel.ret(day, stock) - fit.project(&f_next));
            if fit.rank_deficient {
                out.flagged.push((day, stock));
            }
            let _ = idx;
        }
    }
    Ok(out)
}

/// Autoencoder architecture variant per the residual-generation grid:
/// encoder activation, bias usage, dropout, and encoder depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AEVariant(u8);

impl AEVariant {
    pub fn new(id: u8) -> Result<Self> {
        if id > 9 {
            return Err(Error::InvalidSpec(format!("autoencoder variant {id} outside 0-9")));
        }
        Ok(Self(id))
    }

    pub fn id(&self) -> u8 {
        self.0
    }

    pub fn activation(&self) -> Activation {
        if self.0 <= 4 {
            Activation::Tanh
        } else {
            Activation::Relu
        }
    }

    pub fn has_bias(&self) -> bool {
        matches!(self.0, 0 | 1 | 2 | 5 | 6 | 7)
    }

    pub fn dropout_p(&self) -> f64 {
        if matches!(self.0, 0 | 1 | 5 | 6) {
            0.25
        } else {
            0.0
        }
    }

    pub fn encoder_layers(&self) -> usize {
        if matches!(self.0, 1 | 4 | 6 | 9) {
            3
        } else {
            1
        }
    }

    /// Encoder stack (1 layer, or a 64-32 funnel for the 3-layer variants)
    /// plus a single tanh decoder back to the input width.
    pub fn layer_specs(&self, n_inputs: usize, latent: usize) -> Vec<LayerSpec> {
        let act = self.activation();
        let bias = self.has_bias();
        let p = self.dropout_p();
        let mut specs = Vec::new();
        if self.encoder_layers() == 1 {
            specs.push(LayerSpec::new(n_inputs, latent, act).with_bias(bias).with_dropout(p));
        } else {
            specs.push(LayerSpec::new(n_inputs, 64, act).with_bias(bias).with_dropout(p));
            specs.push(LayerSpec::new(64, 32, act).with_bias(bias).with_dropout(p));
            specs.push(LayerSpec::new(32, latent, act).with_bias(bias).with_dropout(p));
        }
        specs.push(LayerSpec::new(latent, n_inputs, Activation::Tanh).with_bias(bias));
        specs
    }
}

/// How residuals are read off a trained autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualOption {
    /// Option 1: standardized return minus its reconstruction.
    Reconstruction,
    /// Option 2: regress raw returns on encoder outputs of standardized
    /// returns, subtract the projected factor return.
    FactorRegression,
    /// Option 3: as option 2 with volatility-scaled encoder inputs.
    VolScaledRegression,
}

impl ResidualOption {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Self::Reconstruction),
            2 => Ok(Self::FactorRegression),
            3 => Ok(Self::VolScaledRegression),
            other => Err(Error::InvalidSpec(format!("residual option {other} outside 1-3"))),
        }
    }

    pub fn index(&self) -> u8 {
        match self {
            Self::Reconstruction => 1,
            Self::FactorRegression => 2,
            Self::VolScaledRegression => 3,
        }
    }
}

/// Full-window-batch MSE training: one Adam step per epoch, with eval-mode
/// loss recorded after each. Deterministic under `seed` (init and any
/// dropout masks come from the same stream).
pub fn train_network_mse(
    z: &Matrix,
    specs: Vec<LayerSpec>,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(Network, Vec<f64>)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init_with_rng(specs, &mut rng)?;
    net.set_mode(Mode::Train);
    let mut state = AdamState::new(&net, learning_rate);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let trace = net.forward(z, &mut rng)?;
        let (_, dout) = mse_loss(z, trace.output())?;
        let grads = net.backward(&trace, &dout)?;
        adam_step(&mut net, &grads, &mut state)?;
        losses.push(mse_loss(z, &net.eval(z)?)?.0);
    }
    net.set_mode(Mode::Eval);
    Ok((net, losses))
}

/// Trains one autoencoder variant on a capped standardized window
/// (rows = days, columns = stocks).
pub fn train_autoencoder(z: &Matrix, variant: AEVariant, seed: u64) -> Result<Network> {
    if z.cols() < AE_LATENT {
        return Err(Error::InsufficientData { need: AE_LATENT, have: z.cols() });
    }
    let specs = variant.layer_specs(z.cols(), AE_LATENT);
    Ok(train_network_mse(z, specs, AE_EPOCHS, AE_LEARNING_RATE, seed)?.0)
}

fn encoder_output(net: &Network, x: &Matrix) -> Result<Matrix> {
    net.eval_layers(x, net.layers().len() - 1)
}

/// Option 1 residuals at day `t`: `ε_i = Z_{i,t} − Ẑ_{i,t}` with day `t`
/// standardized by the training window's statistics.
pub fn ae_reconstruction_residuals(
    net: &Network,
    window: &StandardizedWindow,
    panel: &ReturnsPanel,
    t: usize,
) -> Result<Vec<(usize, f64)>> {
    let z_t = window.standardize_day(panel, t);
    let input = Matrix::from_vec(1, z_t.len(), z_t.clone());
    let recon = net.eval(&input)?;
    Ok(window
        .stocks
        .iter()
        .enumerate()
        .map(|(j, &stock)| (stock, z_t[j] - recon[(0, j)]))
        .collect())
}

/// Options 2/3 residuals at day `t`: regress each stock's raw returns over
/// the last `fit_days` on the encoder outputs (rows of `enc_fit`), then
/// subtract `βᵀ enc_t`. Returns (stock, residual, rank_deficient).
fn ae_regression_residuals(
    panel: &ReturnsPanel,
    stocks: &[usize],
    enc_fit: &Matrix,
    enc_t: &[f64],
    t: usize,
    fit_days: usize,
) -> Result<Vec<(usize, f64, bool)>> {
    let mut out = Vec::with_capacity(stocks.len());
    for &stock in stocks {
        let y: Vec<f64> = (t - fit_days..t).map(|d| panel.ret(d, stock)).collect();
        let fit = ols_fit(enc_fit, &y, true)?;
        out.push((stock, panel.ret(t, stock) - fit.project(enc_t), fit.rank_deficient));
    }
    Ok(out)
}

/// Option 2: encoder inputs are the training window's standardized rows.
pub fn ae_factor_regression_residuals(
    net: &Network,
    window: &StandardizedWindow,
    panel: &ReturnsPanel,
    t: usize,
    fit_days: usize,
) -> Result<Vec<(usize, f64, bool)>> {
    let rows = window.z.rows();
    if rows < fit_days {
        return Err(Error::InsufficientData { need: fit_days, have: rows });
    }
    let mut fit_input = Matrix::zeros(fit_days, window.z.cols());
    for row in 0..fit_days {
        fit_input.row_mut(row).copy_from_slice(window.z.row(rows - fit_days + row));
    }
    let enc_fit = encoder_output(net, &fit_input)?;
    let z_t = window.standardize_day(panel, t);
    let enc_t = encoder_output(net, &Matrix::from_vec(1, z_t.len(), z_t))?;
    ae_regression_residuals(panel, &window.stocks, &enc_fit, enc_t.row(0), t, fit_days)
}

/// Option 3: encoder inputs are volatility-scaled returns; `svals` must
/// cover days `[t - fit_days, t]` for the same stock set as the net.
pub fn ae_vol_scaled_residuals(
    net: &Network,
    svals: &VolScaledWindow,
    panel: &ReturnsPanel,
    t: usize,
    fit_days: usize,
) -> Result<Vec<(usize, f64, bool)>> {
    if svals.s.rows() != fit_days + 1 {
        return Err(Error::DimensionMismatch { expected: fit_days + 1, got: svals.s.rows() });
    }
    let mut fit_input = Matrix::zeros(fit_days, svals.s.cols());
    for row in 0..fit_days {
        fit_input.row_mut(row).copy_from_slice(svals.s.row(row));
    }
    let enc_fit = encoder_output(net, &fit_input)?;
    let enc_t = encoder_output(net, &Matrix::from_vec(1, svals.s.cols(), svals.s.row(fit_days).to_vec()))?;
    ae_regression_residuals(panel, &svals.stocks, &enc_fit, enc_t.row(0), t, fit_days)
}

/// Earliest day with a residual for the given option.
pub fn ae_first_residual_day(option: ResidualOption) -> usize {
    match option {
        ResidualOption::Reconstruction | ResidualOption::FactorRegression => MODEL_WINDOW_DAYS,
        // The 60-day regression needs a trailing 252-day vol for each input.
        ResidualOption::VolScaledRegression => {
            (FIT_WINDOW_DAYS + crate::market_data::TRAILING_VOL_DAYS).max(MODEL_WINDOW_DAYS)
        }
    }
}

/// Daily-retrained autoencoder residual panel. Each day `d` trains a fresh
/// variant net (seeded per day) on the standardized window ending `d-1`
/// and extracts residuals for day `d` per the chosen option.
pub fn ae_residuals_panel(
    panel: &ReturnsPanel,
    variant: AEVariant,
    option: ResidualOption,
    base_seed: u64,
    universe: Option<&UniverseMask>,
) -> Result<ResidualPanel> {
    let tag = format!("ae-v{}-opt{}", variant.id(), option.index());
    let mut out = ResidualPanel::empty(panel, "AE", &format!("{}/{}", variant.id(), option.index()));
    for day in ae_first_residual_day(option)..panel.n_days() {
        let t_fit = day - 1;
        let Some(mut cands) = candidates_at(panel, universe, t_fit) else {
            continue;
        };
        // Only stocks still quoted at day `day` can receive residuals, and
        // option 3 additionally needs the trailing-vol history.
        cands.retain(|&i| !panel.is_missing(day, i));
        if option == ResidualOption::VolScaledRegression {
            let hist_start = day - FIT_WINDOW_DAYS - crate::market_data::TRAILING_VOL_DAYS;
            cands.retain(|&i| panel.complete_in(i, hist_start, day));
        }
        let window =
            standardize_window(panel, t_fit, MODEL_WINDOW_DAYS, AE_INPUT_CAP, Some(&cands))?;
        if window.stocks.len() < AE_LATENT {
            continue; // too thin to model; skip the day
        }
        let seed = derive_seed(base_seed, &tag, day);
        let net = train_autoencoder(&window.z, variant, seed)?;
        match option {
            ResidualOption::Reconstruction => {
                for (stock, value) in ae_reconstruction_residuals(&net, &window, panel, day)? {
                    out.set(day, stock, value);
                }
            }
            ResidualOption::FactorRegression => {
                for (stock, value, deficient) in
                    ae_factor_regression_residuals(&net, &window, panel, day, FIT_WINDOW_DAYS)?
                {
                    out.set(day, stock, value);
                    if deficient {
                        out.flagged.push((day, stock));
                    }
                }
            }
            ResidualOption::VolScaledRegression => {
                let svals = volatility_scale_window(
                    panel,
                    day,
                    FIT_WINDOW_DAYS + 1,
                    Some(&window.stocks),
                )?;
                if svals.stocks != window.stocks {
                    return Err(Error::MisalignedDates(
                        "volatility-scaled stock set diverged from training set".into(),
                    ));
                }
                for (stock, value, deficient) in
                    ae_vol_scaled_residuals(&net, &svals, panel, day, FIT_WINDOW_DAYS)?
                {
                    out.set(day, stock, value);
                    if deficient {
                        out.flagged.push((day, stock));
                    }
                }
            }
        }
    }
    Ok(out)
}
