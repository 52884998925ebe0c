//! End-to-end orchestration: pointwise fits, smoothing, covariance-field
//! estimation, and band construction.

use crate::covariance::{estimate_g_marginal, estimate_g_mom, smooth_covariance, CovarianceField};
use crate::data::{FitManifest, FitResult, FunctionalDataset};
use crate::error::Result;
use crate::inference::{
    analytic, cma_bands, cma_critical_value, compute_pairwise, pointwise_bands, BandData,
    BandKind, CmaSource, ConfidenceBand, PairwiseCovariance,
};
use crate::pointwise::{
    fit_all, fit_location_with, DesignContext, PointwiseFit, PointwiseModelConfig,
};
use crate::smoothing::{psmooth, sandwich_smooth, SmootherMatrix};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Estimator of the random-effect cross-covariance field used by the
/// analytic bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GMethod {
    /// Marginal outcome covariance minus the fixed-effect part (random
    /// intercepts only).
    Marginal,
    /// Moment regression on residual cross-products.
    MomResiduals,
    /// Moment regression on raw outcome cross-products.
    MomRawOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub pointwise: PointwiseModelConfig,
    /// P-spline knots for the scalar coefficient curves.
    pub knots_beta: usize,
    /// Sandwich-smoother knots along the response domain.
    pub knots_s: usize,
    /// Sandwich-smoother knots along the predictor domain.
    pub knots_u: usize,
    pub g_method: GMethod,
    /// Knots for smoothing the covariance field.
    pub g_knots: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            pointwise: PointwiseModelConfig::default(),
            knots_beta: 8,
            knots_s: 10,
            knots_u: 5,
            g_method: GMethod::Marginal,
            g_knots: 10,
        }
    }
}

/// Fitted pipeline state shared by the inference paths.
pub struct FittedModel {
    pub ctx: DesignContext,
    pub fits: Vec<PointwiseFit>,
    pub result: FitResult,
    /// Per scalar coefficient: the P-spline smoother used for its curve.
    pub s_beta: Vec<SmootherMatrix>,
    /// Per predictor: response-domain and predictor-domain smoothers.
    pub s_response: Vec<SmootherMatrix>,
    pub s_predictor: Vec<SmootherMatrix>,
    pub config: FitConfig,
}

impl FittedModel {
    pub fn n_locations(&self) -> usize {
        self.fits.len()
    }

    pub fn manifest(&self) -> FitManifest {
        FitManifest {
            n_obs: self.ctx.n_obs(),
            n_locations: self.n_locations(),
            n_scalar: self.ctx.p,
            n_random: self.ctx.q(),
            n_predictors: self.ctx.blocks.len(),
            r: self
                .ctx
                .blocks
                .iter()
                .map(|b| b.phi.values.nrows())
                .collect(),
            k_g: self.config.pointwise.k_g,
            k_w: self.config.pointwise.k_w,
            k_w_effective: self
                .ctx
                .blocks
                .iter()
                .map(|b| b.fpca.n_components())
                .collect(),
            family: "gaussian".to_string(),
            converged: self.fits.iter().map(|f| f.converged).collect(),
            boundary: self.fits.iter().map(|f| f.boundary).collect(),
            config: serde_json::to_value(&self.config).expect("serializable config"),
        }
    }
}

fn assemble_result(
    ctx: &DesignContext,
    fits: &[PointwiseFit],
    cfg: &FitConfig,
) -> Result<(FitResult, Vec<SmootherMatrix>, Vec<SmootherMatrix>, Vec<SmootherMatrix>)> {
    let l_len = fits.len();
    let p = ctx.p;
    let k = ctx.blocks.len();

    let beta_hat = DMatrix::from_fn(p, l_len, |i, l| fits[l].beta_star[i]);
    let spline_coefs: Vec<DMatrix<f64>> = ctx
        .blocks
        .iter()
        .map(|block| {
            DMatrix::from_fn(block.cols.len(), l_len, |i, l| {
                fits[l].beta_star[block.cols.start + i]
            })
        })
        .collect();
    let gamma_hat: Vec<DMatrix<f64>> = ctx
        .blocks
        .iter()
        .zip(spline_coefs.iter())
        .map(|(block, g)| &block.phi.values * g)
        .collect();
    let lambda = DMatrix::from_fn(k, l_len, |kk, l| fits[l].lambda[kk]);
    let var_components = fits
        .iter()
        .map(|f| (f.h.clone(), f.sigma2_eps))
        .collect();

    // smooth scalar coefficient curves
    let mut beta_smooth = DMatrix::zeros(p, l_len);
    let mut s_beta = Vec::with_capacity(p);
    for i in 0..p {
        let row = DVector::from_fn(l_len, |l, _| beta_hat[(i, l)]);
        let (smoothed, sm) = psmooth(&row, &ctx.grid_s, cfg.knots_beta)?;
        for l in 0..l_len {
            beta_smooth[(i, l)] = smoothed[l];
        }
        s_beta.push(sm);
    }

    // sandwich-smooth the coefficient surfaces
    let mut gamma_smooth = Vec::with_capacity(k);
    let mut s_response = Vec::with_capacity(k);
    let mut s_predictor = Vec::with_capacity(k);
    for (kk, block) in ctx.blocks.iter().enumerate() {
        let grid_u = &block.fpca.grid_u;
        let (smoothed, s1, s2) =
            sandwich_smooth(&gamma_hat[kk], grid_u, &ctx.grid_s, cfg.knots_u, cfg.knots_s)?;
        gamma_smooth.push(smoothed);
        s_response.push(s1);
        s_predictor.push(s2);
    }

    Ok((
        FitResult {
            beta_hat,
            beta_smooth,
            gamma_hat,
            gamma_smooth,
            spline_coefs,
            lambda,
            var_components,
        },
        s_beta,
        s_response,
        s_predictor,
    ))
}

/// Fit the full pipeline (pointwise fits + smoothing) on a dataset.
pub fn fit_model(d: &FunctionalDataset, cfg: &FitConfig) -> Result<FittedModel> {
    let output = fit_all(d, &cfg.pointwise)?;
    let (ctx, fits) = output.into_fits()?;
    let (result, s_beta, s_response, s_predictor) = assemble_result(&ctx, &fits, cfg)?;
    Ok(FittedModel {
        ctx,
        fits,
        result,
        s_beta,
        s_response,
        s_predictor,
        config: cfg.clone(),
    })
}

/// Rebuild the fitted-model state from serialized estimates: the design is
/// reconstructed from the dataset, variance components and smoothing
/// parameters come from the saved result, and the cached system inverses are
/// recomputed exactly.
pub fn rebuild_model(
    d: &FunctionalDataset,
    result: &FitResult,
    cfg: &FitConfig,
) -> Result<FittedModel> {
    let ctx = DesignContext::build(d, &cfg.pointwise)?;
    let l_len = d.n_locations();
    let mut fits = Vec::with_capacity(l_len);
    for l in 0..l_len {
        let (h, sigma2_eps) = (
            result.var_components[l].0.clone(),
            result.var_components[l].1,
        );
        let lambda: Vec<f64> = (0..ctx.blocks.len())
            .map(|k| result.lambda[(k, l)])
            .collect();
        let y = d.y.column(l).into_owned();
        let (beta_star, xtvx_inv) = fit_location_with(&ctx, &y, &h, sigma2_eps, &lambda)?;
        fits.push(PointwiseFit {
            beta_star,
            h,
            sigma2_eps,
            lambda,
            xtvx_inv,
            converged: true,
            boundary: false,
        });
    }
    let (result, s_beta, s_response, s_predictor) = assemble_result(&ctx, &fits, cfg)?;
    Ok(FittedModel {
        ctx,
        fits,
        result,
        s_beta,
        s_response,
        s_predictor,
        config: cfg.clone(),
    })
}

/// Estimate, diagonal-correct, smooth, and trim the random-effect covariance
/// field used by the analytic bands. The diagonal blocks are replaced with
/// the per-location REML estimates, which are exact at coincident locations.
pub fn covariance_field(model: &FittedModel, d: &FunctionalDataset) -> Result<CovarianceField> {
    let ctx = &model.ctx;
    let l_len = model.n_locations();
    let mut field = match model.config.g_method {
        GMethod::Marginal => {
            let betas: Vec<DVector<f64>> =
                model.fits.iter().map(|f| f.beta_star.clone()).collect();
            estimate_g_marginal(&d.y, &ctx.xstar, &betas, ctx.q(), &ctx.grid_s)?
        }
        GMethod::MomResiduals => {
            let mut residuals = d.y.clone();
            for l in 0..l_len {
                let fitted = &ctx.xstar * &model.fits[l].beta_star;
                for r in 0..d.n_obs() {
                    residuals[(r, l)] -= fitted[r];
                }
            }
            estimate_g_mom(&residuals, &d.z, &d.subject_id, &ctx.grid_s)?
        }
        GMethod::MomRawOutcome => estimate_g_mom(&d.y, &d.z, &d.subject_id, &ctx.grid_s)?,
    };
    for l in 0..l_len {
        field.set_block(l, l, &model.fits[l].h);
    }
    let knots = model.config.g_knots.min(l_len.saturating_sub(4));
    smooth_covariance(&field, knots)
}

fn clamp_variance(v: f64) -> f64 {
    if v.is_finite() {
        v.max(0.0)
    } else {
        0.0
    }
}

/// Analytic pointwise bands for every scalar coefficient curve and every
/// coefficient surface, at the smoothed estimates.
pub fn analytic_bands(
    model: &FittedModel,
    pairwise: &PairwiseCovariance,
    level: f64,
) -> Result<Vec<ConfidenceBand>> {
    let mut bands = Vec::new();
    let l_len = model.n_locations();
    for i in 0..model.ctx.p {
        let cov = pairwise.scalar_curve_cov(i);
        let smoothed_cov = analytic::smoothed_curve_cov(&cov, &model.s_beta[i]);
        let var = DVector::from_fn(l_len, |l, _| clamp_variance(smoothed_cov[(l, l)]));
        let est = DVector::from_fn(l_len, |l, _| model.result.beta_smooth[(i, l)]);
        bands.push(pointwise_bands(
            &format!("beta_{i}"),
            &BandData::Curve(est),
            &BandData::Curve(var),
            level,
            BandKind::PointwiseAnalytic,
        )?);
    }
    for (k, block) in model.ctx.blocks.iter().enumerate() {
        let var = analytic::surface_var_smoothed_diag(
            pairwise,
            block.cols.clone(),
            &block.phi.values,
            &model.s_response[k],
            &model.s_predictor[k],
        )
        .map(clamp_variance);
        bands.push(pointwise_bands(
            &format!("gamma_{}", k + 1),
            &BandData::Surface(model.result.gamma_smooth[k].clone()),
            &BandData::Surface(var),
            level,
            BandKind::PointwiseAnalytic,
        )?);
    }
    Ok(bands)
}

/// CMA band for one scalar coefficient from the analytic covariance.
#[allow(clippy::too_many_arguments)]
pub fn cma_band_scalar(
    model: &FittedModel,
    pairwise: &PairwiseCovariance,
    coef: usize,
    level: f64,
    n_samples: usize,
    seed: u64,
    joint: bool,
) -> Result<ConfidenceBand> {
    let l_len = model.n_locations();
    let cov = pairwise.scalar_curve_cov(coef);
    let smoothed_cov = analytic::smoothed_curve_cov(&cov, &model.s_beta[coef]);
    let var = DVector::from_fn(l_len, |l, _| clamp_variance(smoothed_cov[(l, l)]));
    let est = DVector::from_fn(l_len, |l, _| model.result.beta_smooth[(coef, l)]);
    let q = cma_critical_value(
        &est,
        &var,
        CmaSource::AnalyticMc {
            covariance: &smoothed_cov,
            n_samples,
            seed,
            joint,
        },
        level,
    )?;
    cma_bands(
        &format!("beta_{coef}"),
        &BandData::Curve(est),
        &BandData::Curve(var),
        q,
        level,
        BandKind::CmaAnalytic,
    )
}

/// CMA band for one coefficient surface from the analytic covariance. The
/// full smoothed-surface covariance is materialized, so this is intended for
/// moderate grid sizes.
#[allow(clippy::too_many_arguments)]
pub fn cma_band_surface(
    model: &FittedModel,
    pairwise: &PairwiseCovariance,
    k: usize,
    level: f64,
    n_samples: usize,
    seed: u64,
    joint: bool,
) -> Result<ConfidenceBand> {
    let block = &model.ctx.blocks[k];
    let raw_cov = analytic::surface_cov_full(pairwise, block.cols.clone(), &block.phi.values);
    let smoothed_cov = analytic::propagate_smoother_variance(
        &raw_cov,
        &model.s_response[k],
        &model.s_predictor[k],
    )?;
    let r = block.phi.values.nrows();
    let l_len = model.n_locations();
    let est_mat = model.result.gamma_smooth[k].clone();
    let est = DVector::from_fn(r * l_len, |idx, _| est_mat[(idx % r, idx / r)]);
    let var = DVector::from_fn(r * l_len, |idx, _| clamp_variance(smoothed_cov[(idx, idx)]));
    let q = cma_critical_value(
        &est,
        &var,
        CmaSource::AnalyticMc {
            covariance: &smoothed_cov,
            n_samples,
            seed,
            joint,
        },
        level,
    )?;
    let var_mat = DMatrix::from_fn(r, l_len, |i, j| var[j * r + i]);
    cma_bands(
        &format!("gamma_{}", k + 1),
        &BandData::Surface(est_mat),
        &BandData::Surface(var_mat),
        q,
        level,
        BandKind::CmaAnalytic,
    )
}

/// Convenience wrapper: covariance field, pairwise covariances, then bands.
pub fn analytic_inference(
    model: &FittedModel,
    d: &FunctionalDataset,
    level: f64,
) -> Result<(Vec<ConfidenceBand>, PairwiseCovariance, CovarianceField)> {
    let field = covariance_field(model, d)?;
    let pairwise = compute_pairwise(&model.ctx, &model.fits, &field)?;
    let bands = analytic_bands(model, &pairwise, level)?;
    Ok((bands, pairwise, field))
}
