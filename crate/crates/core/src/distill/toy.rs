//! Desk-scale distillation on a 2-D Gaussian mixture.
//!
//! Every network is a `3 -> H -> 2` tanh MLP predicting velocity from
//! `(z_1, z_2, t)`. The teacher's hidden layer is random and its output layer
//! is a ridge least-squares fit to `eps - x0`; the student and the fake-score
//! model start as copies of the teacher. Gradients are central finite
//! differences, probes evaluated in parallel and merged in parameter order.
//!
//! Scores follow `s(z, t) = (x0_pred(z, t) - z) / t` with
//! `x0_pred = z - t v(z, t)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{loss_adv_discriminator, loss_adv_generator, mse};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

const LEAKY_SLOPE: f64 = 0.2;
const MAX_STUDENT_PARAMS: usize = 256;
const TEACHER_WEIGHT_SCALE: f64 = 1.5;
const TEACHER_BIAS_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitches {
    pub reg: bool,
    pub adv: bool,
    pub dm: bool,
}

impl LossSwitches {
    pub const ALL: Self = Self {
        reg: true,
        adv: true,
        dm: true,
    };
    pub const REG_ONLY: Self = Self {
        reg: true,
        adv: false,
        dm: false,
    };

    pub fn any(&self) -> bool {
        self.reg || self.adv || self.dm
    }
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for LossSwitches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.reg, "reg"), (self.adv, "adv"), (self.dm, "dm")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

/// `+`-joined subset of `reg`, `adv`, `dm`, or `all`.
impl FromStr for LossSwitches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::ALL);
        }
        let mut out = Self {
            reg: false,
            adv: false,
            dm: false,
        };
        for part in s.split('+') {
            match part.trim() {
                "reg" => out.reg = true,
                "adv" => out.adv = true,
                "dm" => out.dm = true,
                other => return Err(invalid(format!("unknown loss {other:?}"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reg: f64,
    pub adv: f64,
    pub dm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 1.0,
            adv: 0.05,
            dm: 0.25,
        }
    }
}

/// Teacher activation a discriminator head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    Hidden,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub taps: Vec<FeatureTap>,
    /// Width of the single hidden layer of each head.
    pub hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            taps: vec![FeatureTap::Hidden, FeatureTap::Output],
            hidden: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub fd_step: f64,
    pub weights: LossWeights,
    /// Range of the per-sample noise level for the adversarial and DM branches.
    pub noise_range: [f64; 2],
    pub hidden: usize,
    pub discriminator: DiscriminatorConfig,
    pub mixture_components: usize,
    pub mixture_radius: f64,
    pub mixture_std: f64,
    pub data_points: usize,
    pub teacher_fit_samples: usize,
    pub ridge: f64,
    pub teacher_steps: usize,
    pub eval_points: usize,
    pub projections: usize,
    pub trace_every: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            batch: 64,
            learning_rate: 1e-2,
            fd_step: 1e-3,
            weights: LossWeights::default(),
            noise_range: [0.02, 0.98],
            hidden: 32,
            discriminator: DiscriminatorConfig::default(),
            mixture_components: 8,
            mixture_radius: 1.5,
            mixture_std: 0.12,
            data_points: 4096,
            teacher_fit_samples: 20_000,
            ridge: 1e-3,
            teacher_steps: 20,
            eval_points: 1024,
            projections: 64,
            trace_every: 50,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let mlp = Mlp { hidden: self.hidden };
        if self.hidden == 0 || mlp.len() > MAX_STUDENT_PARAMS {
            return Err(Error::Config(format!(
                "student has {} parameters; the limit is {MAX_STUDENT_PARAMS}",
                mlp.len()
            )));
        }
        if self.batch == 0 || self.eval_points == 0 || self.projections == 0 {
            return Err(Error::Config("batch, eval_points and projections must be positive".into()));
        }
        if self.data_points == 0 || self.teacher_fit_samples == 0 || self.mixture_components == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        if self.teacher_steps == 0 {
            return Err(Error::Config("teacher_steps must be positive".into()));
        }
        let [lo, hi] = self.noise_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("noise_range {lo}..{hi} must lie inside (0, 1)")));
        }
        if !(self.learning_rate > 0.0 && self.fd_step > 0.0 && self.ridge >= 0.0) {
            return Err(Error::Config("learning_rate and fd_step must be positive".into()));
        }
        if self.discriminator.taps.is_empty() || self.discriminator.hidden == 0 {
            return Err(Error::Config("discriminator needs at least one tap and a hidden width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub distance: f64,
    /// Loss on the batch drawn for this iteration; absent for the final point.
    pub student_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySeeds {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    /// Sliced W1 between teacher 1-step and teacher multi-step samples.
    pub baseline_distance: f64,
    /// Sliced W1 between student 1-step and teacher multi-step samples.
    pub final_distance: f64,
    pub ratio: f64,
    pub iterations: usize,
    pub student_parameters: usize,
    pub switches: LossSwitches,
    pub seeds: ToySeeds,
    pub teacher_checksum_before: String,
    pub teacher_checksum_after: String,
    pub trace: Vec<TracePoint>,
}

type P2 = [f64; 2];

/// `3 -> hidden -> 2` tanh MLP. Layout: `w1 (3, H)`, `b1 (H)`, `w2 (H, 2)`, `b2 (2)`.
#[derive(Debug, Clone, Copy)]
struct Mlp {
    hidden: usize,
}

impl Mlp {
    fn len(&self) -> usize {
        3 * self.hidden + self.hidden + 2 * self.hidden + 2
    }

    fn features(&self, p: &[f64], z: P2, t: f64, h: &mut [f64]) {
        let n = self.hidden;
        let (w1, b1) = (&p[..3 * n], &p[3 * n..4 * n]);
        for j in 0..n {
            h[j] = (z[0] * w1[j] + z[1] * w1[n + j] + t * w1[2 * n + j] + b1[j]).tanh();
        }
    }

    fn head(&self, p: &[f64], h: &[f64]) -> P2 {
        let n = self.hidden;
        let (w2, b2) = (&p[4 * n..6 * n], &p[6 * n..]);
        let mut out = [b2[0], b2[1]];
        for j in 0..n {
            out[0] += h[j] * w2[2 * j];
            out[1] += h[j] * w2[2 * j + 1];
        }
        out
    }

    fn velocity(&self, p: &[f64], z: P2, t: f64, h: &mut [f64]) -> P2 {
        self.features(p, z, t, h);
        self.head(p, h)
    }

    fn x0(&self, p: &[f64], z: P2, t: f64, h: &mut [f64]) -> P2 {
        let v = self.velocity(p, z, t, h);
        [z[0] - t * v[0], z[1] - t * v[1]]
    }

    /// Euler from `t = 1` to 0 in `steps` uniform steps.
    fn sample(&self, p: &[f64], eps: &[P2], steps: usize) -> Vec<P2> {
        let mut h = vec![0.0; self.hidden];
        eps.iter()
            .map(|&e| {
                let mut z = e;
                for k in 0..steps {
                    let t = 1.0 - k as f64 / steps as f64;
                    let dt = 1.0 / steps as f64;
                    let v = self.velocity(p, z, t, &mut h);
                    z = [z[0] - dt * v[0], z[1] - dt * v[1]];
                }
                z
            })
            .collect()
    }
}

/// `input -> hidden -> 1` head with leaky ReLU. Layout: `w (input, hidden)`, `b`, `w2`, `b2`.
#[derive(Debug, Clone, Copy)]
struct Head {
    input: usize,
    hidden: usize,
}

impl Head {
    fn len(&self) -> usize {
        self.input * self.hidden + 2 * self.hidden + 1
    }

    fn score(&self, p: &[f64], x: &[f64]) -> f64 {
        let (i, m) = (self.input, self.hidden);
        let (w, b, w2, b2) = (&p[..i * m], &p[i * m..i * m + m], &p[i * m + m..i * m + 2 * m], p[i * m + 2 * m]);
        let mut s = b2;
        for j in 0..m {
            let mut a = b[j];
            for (k, xk) in x.iter().enumerate() {
                a += xk * w[k * m + j];
            }
            s += w2[j] * if a > 0.0 { a } else { LEAKY_SLOPE * a };
        }
        s
    }
}

/// Student, frozen teacher, fake-score model and discriminator heads.
#[derive(Debug, Clone)]
pub struct DistillEnsemble {
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
    pub fake_score: Vec<f64>,
    pub discriminator: Vec<f64>,
}

/// FNV-1a over the bit patterns.
fn checksum(p: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in p {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn normal2(rng: &mut Rng) -> P2 {
    [rng.normal_f64(), rng.normal_f64()]
}

fn mixture(cfg: &ToyConfig, rng: &mut Rng) -> Vec<P2> {
    (0..cfg.data_points)
        .map(|_| {
            let k = rng.below(cfg.mixture_components);
            let angle = 2.0 * std::f64::consts::PI * k as f64 / cfg.mixture_components as f64;
            let e = normal2(rng);
            [
                cfg.mixture_radius * libm::cos(angle) + cfg.mixture_std * e[0],
                cfg.mixture_radius * libm::sin(angle) + cfg.mixture_std * e[1],
            ]
        })
        .collect()
}

/// Random hidden layer, ridge least-squares output layer on `eps - x0`.
fn fit_teacher(cfg: &ToyConfig, mlp: Mlp, data: &[P2], rng: &mut Rng) -> Result<Vec<f64>> {
    let n = mlp.hidden;
    let mut p = vec![0.0; mlp.len()];
    for v in &mut p[..3 * n] {
        *v = TEACHER_WEIGHT_SCALE * rng.normal_f64();
    }
    for v in &mut p[3 * n..4 * n] {
        *v = TEACHER_BIAS_SCALE * rng.normal_f64();
    }
    let f = n + 1;
    let mut gram = DMatrix::<f64>::zeros(f, f);
    let mut rhs = DMatrix::<f64>::zeros(f, 2);
    let mut h = vec![0.0; n];
    let mut row = vec![1.0; f];
    for _ in 0..cfg.teacher_fit_samples {
        let x0 = data[rng.below(data.len())];
        let eps = normal2(rng);
        let t = rng.uniform();
        let z = [(1.0 - t) * x0[0] + t * eps[0], (1.0 - t) * x0[1] + t * eps[1]];
        mlp.features(&p, z, t, &mut h);
        row[..n].copy_from_slice(&h);
        for a in 0..f {
            for b in 0..f {
                gram[(a, b)] += row[a] * row[b];
            }
            rhs[(a, 0)] += row[a] * (eps[0] - x0[0]);
            rhs[(a, 1)] += row[a] * (eps[1] - x0[1]);
        }
    }
    for a in 0..f {
        gram[(a, a)] += cfg.ridge;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Domain("teacher ridge system is not positive definite".into()))?;
    let sol = chol.solve(&rhs);
    for j in 0..n {
        p[4 * n + 2 * j] = sol[(j, 0)];
        p[4 * n + 2 * j + 1] = sol[(j, 1)];
    }
    p[6 * n] = sol[(n, 0)];
    p[6 * n + 1] = sol[(n, 1)];
    Ok(p)
}

/// Mean over projections of the 1-D W1 distance between equal-size point sets.
pub(crate) fn sliced_w1(a: &[P2], b: &[P2], projections: &[P2]) -> f64 {
    let mut pa = vec![0.0; a.len()];
    let mut pb = vec![0.0; b.len()];
    let mut total = 0.0;
    for d in projections {
        for (o, x) in pa.iter_mut().zip(a) {
            *o = x[0] * d[0] + x[1] * d[1];
        }
        for (o, x) in pb.iter_mut().zip(b) {
            *o = x[0] * d[0] + x[1] * d[1];
        }
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    total / projections.len() as f64
}

fn unit_directions(count: usize, rng: &mut Rng) -> Vec<P2> {
    (0..count)
        .map(|_| loop {
            let v = normal2(rng);
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            if n > 1e-12 {
                break [v[0] / n, v[1] / n];
            }
        })
        .collect()
}

/// Central differences, one parallel probe per parameter, collected in order.
fn fd_gradient<F>(params: &[f64], step: f64, loss: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut p = params.to_vec();
            p[i] = params[i] + step;
            let up = loss(&p);
            p[i] = params[i] - step;
            let down = loss(&p);
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn descend(params: &mut [f64], grad: &[f64], lr: f64, what: &str, iteration: usize) -> Result<()> {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "{what} parameters became non-finite at iteration {iteration}"
        )));
    }
    Ok(())
}

fn noised(x: &[P2], t: &[f64], e: &[P2]) -> Vec<P2> {
    x.iter()
        .zip(t)
        .zip(e)
        .map(|((x, &t), e)| [(1.0 - t) * x[0] + t * e[0], (1.0 - t) * x[1] + t * e[1]])
        .collect()
}

fn flat(x: &[P2]) -> Vec<f64> {
    x.iter().flat_map(|p| p.iter().copied()).collect()
}

struct Critic<'a> {
    mlp: Mlp,
    teacher: &'a [f64],
    heads: Vec<(FeatureTap, Head, usize)>,
}

impl Critic<'_> {
    fn new<'b>(mlp: Mlp, teacher: &'b [f64], cfg: &DiscriminatorConfig) -> Critic<'b> {
        let mut offset = 0;
        let heads = cfg
            .taps
            .iter()
            .map(|&tap| {
                let input = match tap {
                    FeatureTap::Hidden => mlp.hidden,
                    FeatureTap::Output => 2,
                };
                let head = Head {
                    input,
                    hidden: cfg.hidden,
                };
                let at = offset;
                offset += head.len();
                (tap, head, at)
            })
            .collect();
        Critic { mlp, teacher, heads }
    }

    fn len(&self) -> usize {
        self.heads.iter().map(|(_, h, _)| h.len()).sum()
    }

    /// Teacher taps `(hidden, output)` per sample.
    fn taps(&self, x: &[P2], t: &[f64]) -> Vec<(Vec<f64>, P2)> {
        let mut h = vec![0.0; self.mlp.hidden];
        x.iter()
            .zip(t)
            .map(|(&z, &t)| {
                let v = self.mlp.velocity(self.teacher, z, t, &mut h);
                (h.clone(), v)
            })
            .collect()
    }

    /// Scores indexed `[branch][sample]`.
    fn scores(&self, d: &[f64], taps: &[(Vec<f64>, P2)]) -> Vec<Vec<f64>> {
        self.heads
            .iter()
            .map(|(tap, head, at)| {
                let p = &d[*at..*at + head.len()];
                taps.iter()
                    .map(|(h, v)| match tap {
                        FeatureTap::Hidden => head.score(p, h),
                        FeatureTap::Output => head.score(p, v),
                    })
                    .collect()
            })
            .collect()
    }
}

/// One full toy run: teacher fit, distillation with the enabled losses, report.
pub fn toy_distill_run(cfg: &ToyConfig, switches: LossSwitches, seed: u64) -> Result<ToyReport> {
    cfg.validate()?;
    if !switches.any() {
        return Err(invalid("no distillation losses enabled"));
    }
    let mlp = Mlp { hidden: cfg.hidden };
    let data = mixture(cfg, &mut Rng::fork(seed, 0));
    let teacher = fit_teacher(cfg, mlp, &data, &mut Rng::fork(seed, 1))?;
    let mut eval_rng = Rng::fork(seed, 2);
    let eval_noise: Vec<P2> = (0..cfg.eval_points).map(|_| normal2(&mut eval_rng)).collect();
    let projections = unit_directions(cfg.projections, &mut Rng::fork(seed, 3));

    let critic = Critic::new(mlp, &teacher, &cfg.discriminator);
    let mut init_rng = Rng::fork(seed, 4);
    let mut discriminator = vec![0.0; critic.len()];
    for (_, head, at) in &critic.heads {
        let p = &mut discriminator[*at..*at + head.len()];
        let (i, m) = (head.input, head.hidden);
        for v in &mut p[..i * m] {
            *v = init_rng.normal_f64() / (i as f64).sqrt();
        }
        for v in &mut p[i * m + m..i * m + 2 * m] {
            *v = init_rng.normal_f64() / (m as f64).sqrt();
        }
    }
    let mut ens = DistillEnsemble {
        student: teacher.clone(),
        teacher: teacher.clone(),
        fake_score: teacher.clone(),
        discriminator,
    };
    let checksum_before = checksum(&ens.teacher);

    let target = mlp.sample(&ens.teacher, &eval_noise, cfg.teacher_steps);
    let distance = |student: &[f64]| sliced_w1(&mlp.sample(student, &eval_noise, 1), &target, &projections);
    let baseline = distance(&ens.teacher);

    let mut rng = Rng::fork(seed, 5);
    let mut trace = Vec::new();
    let w = cfg.weights;
    let b = cfg.batch;
    let mut h = vec![0.0; mlp.hidden];
    for it in 0..cfg.iterations {
        let eps: Vec<P2> = (0..b).map(|_| normal2(&mut rng)).collect();
        let t: Vec<f64> = (0..b)
            .map(|_| rng.uniform_range(cfg.noise_range[0], cfg.noise_range[1]))
            .collect();
        let e2: Vec<P2> = (0..b).map(|_| normal2(&mut rng)).collect();
        let real: Vec<P2> = (0..b).map(|_| data[rng.below(data.len())]).collect();

        let reg_target = switches
            .reg
            .then(|| flat(&mlp.sample(&ens.teacher, &eps, cfg.teacher_steps)));
        let current = mlp.sample(&ens.student, &eps, 1);
        let current_t = noised(&current, &t, &e2);
        // s_fake - s_real at the current samples, held constant for this step.
        let field: Option<Vec<f64>> = switches.dm.then(|| {
            current_t
                .iter()
                .zip(&t)
                .flat_map(|(&z, &tt)| {
                    let xr = mlp.x0(&ens.teacher, z, tt, &mut h);
                    let xf = mlp.x0(&ens.fake_score, z, tt, &mut h);
                    (0..2).map(move |c| (xf[c] - z[c]) / tt - (xr[c] - z[c]) / tt)
                })
                .collect()
        });

        let student_loss = |p: &[f64]| -> f64 {
            let xs = mlp.sample(p, &eps, 1);
            let mut loss = 0.0;
            if let Some(target) = &reg_target {
                loss += w.reg * mse(&flat(&xs), target);
            }
            if switches.adv {
                let taps = critic.taps(&noised(&xs, &t, &e2), &t);
                let scores = critic.scores(&ens.discriminator, &taps);
                loss += w.adv * loss_adv_generator(&scores).unwrap_or(f64::NAN);
            }
            if let Some(g) = &field {
                let x = flat(&xs);
                loss += w.dm * g.iter().zip(&x).map(|(g, x)| g * x).sum::<f64>() / x.len() as f64;
            }
            loss
        };

        if it % cfg.trace_every.max(1) == 0 {
            trace.push(TracePoint {
                iteration: it,
                distance: distance(&ens.student),
                student_loss: Some(student_loss(&ens.student)),
            });
        }

        let grad = fd_gradient(&ens.student, cfg.fd_step, student_loss);
        descend(&mut ens.student, &grad, cfg.learning_rate, "student", it)?;

        if switches.adv {
            let fake_taps = critic.taps(&current_t, &t);
            let real_taps = critic.taps(&noised(&real, &t, &e2), &t);
            let d_loss = |d: &[f64]| -> f64 {
                loss_adv_discriminator(&critic.scores(d, &real_taps), &critic.scores(d, &fake_taps))
                    .unwrap_or(f64::NAN)
            };
            let grad = fd_gradient(&ens.discriminator, cfg.fd_step, d_loss);
            descend(&mut ens.discriminator, &grad, cfg.learning_rate, "discriminator", it)?;
        }
        if switches.dm {
            let targets = flat(&current);
            let f_loss = |p: &[f64]| -> f64 {
                let mut h = vec![0.0; mlp.hidden];
                let pred: Vec<f64> = current_t
                    .iter()
                    .zip(&t)
                    .flat_map(|(&z, &tt)| mlp.x0(p, z, tt, &mut h))
                    .collect();
                mse(&pred, &targets)
            };
            let grad = fd_gradient(&ens.fake_score, cfg.fd_step, f_loss);
            descend(&mut ens.fake_score, &grad, cfg.learning_rate, "fake-score", it)?;
        }
    }

    let final_distance = distance(&ens.student);
    if !final_distance.is_finite() {
        return Err(Error::NonFinite("final distance"));
    }
    trace.push(TracePoint {
        iteration: cfg.iterations,
        distance: final_distance,
        student_loss: None,
    });
    Ok(ToyReport {
        baseline_distance: baseline,
        final_distance,
        ratio: final_distance / baseline,
        iterations: cfg.iterations,
        student_parameters: mlp.len(),
        switches,
        seeds: ToySeeds { seed },
        teacher_checksum_before: checksum_before,
        teacher_checksum_after: checksum(&ens.teacher),
        trace,
    })
}
