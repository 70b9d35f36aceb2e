//! Rectified-flow schedule, latent shape arithmetic and the I2V Euler sampler.
//!
//! The forward path is `z_t = (1 - t) x0 + t eps`, so the velocity is
//! `dz/dt = eps - x0` and sampling integrates from `t = 1` down to `t = 0`.
//!
//! Latent tokens are ordered frame-major, then row-major within a frame, so
//! the reference frame occupies the first `latent_height * latent_width`
//! rows of a `(N, 128)` latent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Pos3;
use crate::denoiser::ConditioningInputs;
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::{random_normal, Rng};
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 128;
pub const SPATIAL_DOWNSAMPLE: usize = 32;
pub const TEMPORAL_DOWNSAMPLE: usize = 8;

/// Rectified-flow coefficients and the derived log-SNR family at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowPoint {
    pub a: f64,
    pub b: f64,
    /// `ln(a^2 / b^2)`
    pub lambda: f64,
    /// `2 (a'/a - b'/b)`
    pub lambda_prime: f64,
    /// `-lambda' b^2 / 2`
    pub weight: f64,
}

/// `(a, b) = (1 - t, t)`, defined on the closed interval.
pub fn coefficients(t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} is outside [0, 1]")));
    }
    Ok((1.0 - t, t))
}

pub fn schedule_eval(t: f64) -> Result<FlowPoint> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!(
            "log-SNR terms need t in (0, 1), got {t}"
        )));
    }
    let (a, b) = coefficients(t)?;
    let (da, db) = (-1.0, 1.0);
    let lambda = (a * a / (b * b)).ln();
    let lambda_prime = 2.0 * (da / a - db / b);
    let weight = -0.5 * lambda_prime * b * b;
    Ok(FlowPoint {
        a,
        b,
        lambda,
        lambda_prime,
        weight,
    })
}

fn token_rows(x: &Tensor, tokens: usize) -> Result<usize> {
    if x.rank() < 2 {
        return Err(shape_err(format!("expected (..., N, D), got {:?}", x.dims())));
    }
    let n = x.dims()[x.rank() - 2];
    if n != tokens {
        return Err(shape_err(format!("{tokens} timesteps for {n} tokens")));
    }
    Ok(n)
}

/// Per token `i`: `z = (1 - t_i) x0 + t_i eps`. The endpoints return the
/// corresponding input unchanged.
pub fn noise_forward(x0: &Tensor, eps: &Tensor, t: &[f32]) -> Result<Tensor> {
    x0.same_shape(eps)?;
    let n = token_rows(x0, t.len())?;
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("timestep {bad} outside [0, 1]")));
    }
    let d = x0.last_dim();
    let mut out = x0.clone();
    if d == 0 {
        return Ok(out);
    }
    for (row, (dst, e)) in out
        .data_mut()
        .chunks_exact_mut(d)
        .zip(eps.data().chunks_exact(d))
        .enumerate()
    {
        let ti = t[row % n];
        if ti == 0.0 {
            continue;
        }
        if ti == 1.0 {
            dst.copy_from_slice(e);
            continue;
        }
        let keep = 1.0 - ti;
        for (z, &ev) in dst.iter_mut().zip(e) {
            *z = keep * *z + ti * ev;
        }
    }
    Ok(out)
}

/// Pixel video extent and its latent grid. `"1280x720x17"` is width x height x frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

impl LatentSpec {
    pub fn new(width: usize, height: usize, frames: usize) -> Result<Self> {
        let s = Self {
            width,
            height,
            frames,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("video extent must be positive"));
        }
        if self.frames % TEMPORAL_DOWNSAMPLE != 1 {
            return Err(invalid(format!(
                "frame count {} is not 1 mod {TEMPORAL_DOWNSAMPLE}",
                self.frames
            )));
        }
        Ok(())
    }

    pub fn latent_width(&self) -> usize {
        self.width.div_ceil(SPATIAL_DOWNSAMPLE)
    }

    pub fn latent_height(&self) -> usize {
        self.height.div_ceil(SPATIAL_DOWNSAMPLE)
    }

    pub fn latent_frames(&self) -> usize {
        1 + (self.frames - 1) / TEMPORAL_DOWNSAMPLE
    }

    /// Tokens in one latent frame.
    pub fn frame_tokens(&self) -> usize {
        self.latent_width() * self.latent_height()
    }

    /// `(frame, row, column)` of every token in sampling order.
    pub fn positions(&self) -> Vec<Pos3> {
        let (h, w) = (self.latent_height(), self.latent_width());
        (0..self.latent_frames())
            .flat_map(|f| {
                (0..h).flat_map(move |r| (0..w).map(move |c| [f as i64, r as i64, c as i64]))
            })
            .collect()
    }
}

impl fmt::Display for LatentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.frames)
    }
}

impl FromStr for LatentSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('x').collect();
        if parts.len() != 3 {
            return Err(invalid(format!("expected WIDTHxHEIGHTxFRAMES, got {s:?}")));
        }
        let num = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| invalid(format!("bad extent {p:?} in {s:?}")))
        };
        Self::new(num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }
}

pub fn token_count(spec: &LatentSpec) -> Result<usize> {
    spec.validate()?;
    Ok(spec.frame_tokens() * spec.latent_frames())
}

/// Reference-frame tokens get `t = 0`, every other token `t_global`.
pub fn token_timesteps(spec: &LatentSpec, t_global: f32) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&t_global) {
        return Err(Error::Domain(format!("t = {t_global} outside [0, 1]")));
    }
    let n = token_count(spec)?;
    let mut t = vec![t_global; n];
    t[..spec.frame_tokens()].fill(0.0);
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    #[default]
    Velocity,
    /// Model predicts `eps`; converted via `x0 = (z - t eps) / (1 - t)`, `v = eps - x0`.
    Noise,
}

/// Largest `t` used in the noise-to-velocity conversion, which is singular at 1.
pub const NOISE_MODE_T_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: PredictionMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 2,
            mode: PredictionMode::Velocity,
        }
    }
}

impl SamplerConfig {
    /// `steps + 1` knots from 1 to 0, strictly decreasing.
    pub fn grid(&self) -> Result<Vec<f64>> {
        uniform_grid(1.0, self.steps)
    }
}

/// `steps + 1` uniform knots from `t_start` down to exactly 0.
pub fn uniform_grid(t_start: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(invalid("sampler needs at least one step"));
    }
    if !(t_start > 0.0 && t_start <= 1.0) {
        return Err(Error::Domain(format!("start time {t_start} outside (0, 1]")));
    }
    Ok((0..=steps)
        .map(|k| t_start * (steps - k) as f64 / steps as f64)
        .collect())
}

/// A network predicting velocity (or noise) for a `(N, D)` token matrix.
pub trait VelocityModel {
    fn predict(&self, z: &Tensor, cond: &ConditioningInputs) -> Result<Tensor>;
}

impl<F> VelocityModel for F
where
    F: Fn(&Tensor, &ConditioningInputs) -> Result<Tensor>,
{
    fn predict(&self, z: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
        self(z, cond)
    }
}

/// Settings for one Euler integration.
#[derive(Debug, Clone)]
pub struct EulerRun<'a> {
    pub grid: Vec<f64>,
    pub mode: PredictionMode,
    /// Rows held fixed at `t = 0`, written back after every update.
    pub reference: Option<&'a Tensor>,
    pub motion_score: f32,
    pub positions: &'a [Pos3],
}

/// Euler steps `z <- z - (t_k - t_{k+1}) v(z, t_k)` over the grid.
pub fn euler_integrate(model: &dyn VelocityModel, z: Tensor, run: &EulerRun<'_>) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(shape_err(format!("expected (N, D) latent, got {:?}", z.dims())));
    }
    if run.grid.len() < 2 {
        return Err(invalid("sampler needs at least one step"));
    }
    let (n, d) = (z.dims()[0], z.dims()[1]);
    let held = match run.reference {
        Some(r) => {
            if r.rank() != 2 || r.dims()[1] != d || r.dims()[0] > n {
                return Err(shape_err(format!(
                    "reference {:?} does not fit latent {:?}",
                    r.dims(),
                    z.dims()
                )));
            }
            r.dims()[0]
        }
        None => 0,
    };
    let mut z = z;
    if let Some(r) = run.reference {
        z.data_mut()[..held * d].copy_from_slice(r.data());
    }
    for w in run.grid.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let dt = (t - t_next) as f32;
        let mut tt = vec![t as f32; n];
        tt[..held].fill(0.0);
        let cond = ConditioningInputs {
            token_timesteps: tt,
            motion_score: run.motion_score,
            positions: run.positions.to_vec(),
        };
        let pred = model.predict(&z, &cond)?;
        z.same_shape(&pred)?;
        let velocity = match run.mode {
            PredictionMode::Velocity => pred,
            PredictionMode::Noise => noise_to_velocity(&z, &pred, t)?,
        };
        let data = z.data_mut();
        for (zi, vi) in data[held * d..].iter_mut().zip(&velocity.data()[held * d..]) {
            *zi -= dt * vi;
        }
        if let Some(r) = run.reference {
            data[..held * d].copy_from_slice(r.data());
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("sampler state"));
        }
    }
    Ok(z)
}

fn noise_to_velocity(z: &Tensor, eps_hat: &Tensor, t: f64) -> Result<Tensor> {
    let t = t.min(NOISE_MODE_T_MAX) as f32;
    let data = z
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&zv, &ev)| {
            let x0 = (zv - t * ev) / (1.0 - t);
            ev - x0
        })
        .collect();
    Tensor::new(z.dims(), data)
}

/// Generates an `(N, 128)` latent whose first frame is `reference_latent`.
pub fn euler_sample_i2v(
    model: &dyn VelocityModel,
    spec: &LatentSpec,
    sampler: &SamplerConfig,
    reference_latent: &Tensor,
    motion: f32,
    seed: u64,
) -> Result<Tensor> {
    let n = token_count(spec)?;
    let hw = spec.frame_tokens();
    if reference_latent.dims() != [hw, LATENT_CHANNELS] {
        return Err(shape_err(format!(
            "reference latent {:?}, expected [{hw}, {LATENT_CHANNELS}]",
            reference_latent.dims()
        )));
    }
    if !motion.is_finite() {
        return Err(invalid("motion score must be finite"));
    }
    let noise = random_normal(&mut Rng::new(seed), &[n, LATENT_CHANNELS])?;
    let positions = spec.positions();
    let run = EulerRun {
        grid: sampler.grid()?,
        mode: sampler.mode,
        reference: Some(reference_latent),
        motion_score: motion,
        positions: &positions,
    };
    euler_integrate(model, noise, &run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeightMode {
    #[default]
    Unit,
    /// `w(t) * lambda'(t)` exactly as the objective is usually printed; negative on (0, 1).
    Literal,
}

/// Mean over elements of `weight(t_token) * (pred - eps)^2`.
pub fn training_loss_flow(
    pred: &Tensor,
    eps: &Tensor,
    t: &[f32],
    mode: LossWeightMode,
) -> Result<f64> {
    pred.same_shape(eps)?;
    let n = token_rows(pred, t.len())?;
    let weights: Vec<f64> = match mode {
        LossWeightMode::Unit => vec![1.0; n],
        LossWeightMode::Literal => t
            .iter()
            .map(|&ti| schedule_eval(ti as f64).map(|p| p.weight * p.lambda_prime))
            .collect::<Result<_>>()?,
    };
    if pred.is_empty() {
        return Ok(0.0);
    }
    let d = pred.last_dim();
    let mut total = 0.0f64;
    for (row, (p, e)) in pred
        .data()
        .chunks_exact(d)
        .zip(eps.data().chunks_exact(d))
        .enumerate()
    {
        let sq: f64 = p
            .iter()
            .zip(e)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        total += weights[row % n] * sq;
    }
    Ok(total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_midpoint() {
        let p = schedule_eval(0.5).unwrap();
        assert_eq!((p.a, p.b), (0.5, 0.5));
        assert!(p.lambda.abs() < 1e-12);
        assert!((p.lambda_prime + 8.0).abs() < 1e-12);
        assert!((p.weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(coefficients(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(coefficients(1.0).unwrap(), (0.0, 1.0));
        assert!(matches!(schedule_eval(0.0), Err(Error::Domain(_))));
        assert!(matches!(schedule_eval(1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn weight_product_is_negative_inside() {
        for t in [0.01, 0.2, 0.5, 0.8, 0.99] {
            let p = schedule_eval(t).unwrap();
            assert!(p.weight * p.lambda_prime < 0.0);
        }
    }

    #[test]
    fn noise_forward_endpoints_and_interior() {
        let mut rng = Rng::new(1);
        let x0 = random_normal(&mut rng, &[4, 3]).unwrap();
        let eps = random_normal(&mut rng, &[4, 3]).unwrap();
        let z = noise_forward(&x0, &eps, &[0.0; 4]).unwrap();
        assert_eq!(z.data(), x0.data());
        let z = noise_forward(&x0, &eps, &[1.0; 4]).unwrap();
        assert_eq!(z.data(), eps.data());
        let z = noise_forward(&x0, &eps, &[0.25; 4]).unwrap();
        for ((zv, xv), ev) in z.data().iter().zip(x0.data()).zip(eps.data()) {
            assert!((zv - (0.75 * xv + 0.25 * ev)).abs() <= 1e-7);
        }
    }

    #[test]
    fn noise_forward_per_token() {
        let x0 = Tensor::full(&[2, 2, 2], 1.0).unwrap();
        let eps = Tensor::full(&[2, 2, 2], 3.0).unwrap();
        let z = noise_forward(&x0, &eps, &[0.0, 0.5]).unwrap();
        assert_eq!(z.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert!(noise_forward(&x0, &eps, &[0.0]).is_err());
    }

    #[test]
    fn token_counts() {
        let s: LatentSpec = "1280x720x17".parse().unwrap();
        assert_eq!(
            (s.latent_width(), s.latent_height(), s.latent_frames()),
            (40, 23, 3)
        );
        assert_eq!(token_count(&s).unwrap(), 2760);
        assert_eq!(token_count(&LatentSpec::new(32, 32, 1).unwrap()).unwrap(), 1);
        assert_eq!(token_count(&LatentSpec::new(256, 256, 17).unwrap()).unwrap(), 192);
        assert!(LatentSpec::new(256, 256, 16).is_err());
        assert!("1280x720".parse::<LatentSpec>().is_err());
    }

    #[test]
    fn reference_frame_timesteps() {
        let s = LatentSpec::new(1280, 720, 17).unwrap();
        let t = token_timesteps(&s, 0.7).unwrap();
        assert_eq!(t.len(), 2760);
        assert!(t[..920].iter().all(|&v| v == 0.0));
        assert!(t[920..].iter().all(|&v| v == 0.7));
        assert!(token_timesteps(&s, 0.0).unwrap().iter().all(|&v| v == 0.0));
        assert!(token_timesteps(&s, 1.5).is_err());
    }

    #[test]
    fn positions_are_frame_major() {
        let s = LatentSpec::new(64, 96, 9).unwrap();
        let p = s.positions();
        assert_eq!(p.len(), 2 * 3 * 2);
        assert_eq!(p[0], [0, 0, 0]);
        assert_eq!(p[1], [0, 0, 1]);
        assert_eq!(p[2], [0, 1, 0]);
        assert_eq!(p[6], [1, 0, 0]);
    }

    #[test]
    fn grid_shape() {
        for steps in [1, 2, 7, 30] {
            let g = SamplerConfig {
                steps,
                mode: PredictionMode::Velocity,
            }
            .grid()
            .unwrap();
            assert_eq!(g.len(), steps + 1);
            assert_eq!((g[0], g[steps]), (1.0, 0.0));
            assert!(g.windows(2).all(|w| w[0] > w[1]));
        }
        assert!(uniform_grid(1.0, 0).is_err());
    }

    #[test]
    fn loss_modes() {
        let eps = Tensor::zeros(&[2, 3]).unwrap();
        let ones = Tensor::full(&[2, 3], 1.0).unwrap();
        assert_eq!(training_loss_flow(&eps, &eps, &[0.5, 0.5], LossWeightMode::Unit).unwrap(), 0.0);
        assert_eq!(training_loss_flow(&ones, &eps, &[0.5, 0.5], LossWeightMode::Unit).unwrap(), 1.0);
        let lit = training_loss_flow(&ones, &eps, &[0.5, 0.5], LossWeightMode::Literal).unwrap();
        assert!((lit + 8.0).abs() < 1e-12);
        assert!(training_loss_flow(&ones, &eps, &[0.0, 0.5], LossWeightMode::Literal).is_err());
    }
}
