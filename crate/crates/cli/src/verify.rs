//! The invariant suite behind `mi2v verify`.
//!
//! Every check is seeded and reports only deterministic quantities, so two
//! runs with the same seed write byte-identical reports.

use mi2v_core::attention::{
    apply_rope3d, attend, linear_attention_reference, linear_attention_streaming, AttentionKind,
    AttentionParams, ExecStrategy, QkNorm, RopeConfig,
};
use mi2v_core::contract::{batched_contract, Contraction};
use mi2v_core::denoiser::{init_weights, parameter_count, Denoiser, DenoiserConfig};
use mi2v_core::distill::{
    dmd_gradient_field, dmd_surrogate, dmd_surrogate_gradient, fake_score_gradient,
    loss_adv_discriminator, loss_fake_score, loss_regression, regression_gradient,
    toy_distill_run, LossSwitches, ToyConfig,
};
use mi2v_core::flow::{
    coefficients, euler_integrate, euler_sample_i2v, schedule_eval, token_count, uniform_grid,
    EulerRun, LatentSpec, PredictionMode, SamplerConfig,
};
use mi2v_core::io::{decode_container, encode_container};
use mi2v_core::tensor::{relative_error, rms_normalize, softmax_rows};
use mi2v_core::{random_normal, Result, Rng, Tensor};
use serde::Serialize;

/// Deliberate corruptions used to prove that checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Perturbs the streaming linear-attention output before comparison.
    DualForm,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

type Outcome = Result<(f64, String)>;

struct Suite {
    seed: u64,
    checks: Vec<CheckResult>,
}

impl Suite {
    fn run(&mut self, name: &'static str, tolerance: f64, f: impl FnOnce(&mut Rng) -> Outcome) {
        let mut rng = Rng::fork(self.seed, self.checks.len() as u64);
        let result = match f(&mut rng) {
            Ok((metric, detail)) => CheckResult {
                name,
                passed: metric <= tolerance,
                metric,
                tolerance,
                detail,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                metric: f64::INFINITY,
                tolerance,
                detail: format!("error: {e}"),
            },
        };
        self.checks.push(result);
    }
}

pub fn run_verify(seed: u64, fault: Option<Fault>) -> VerifyReport {
    let mut s = Suite {
        seed,
        checks: Vec::new(),
    };
    s.run("rng_moments", 0.01, rng_moments);
    s.run("contraction_oracle", 0.0, contraction_oracle);
    s.run("softmax_row_sums", 1e-6, softmax_sums);
    s.run("rms_closed_form", 1e-5, |_| rms_closed_form());
    s.run("dual_form", 1e-4, |rng| dual_form(rng, fault));
    s.run("strategy_neutrality", 1e-5, strategy_neutrality);
    s.run("rope_norm", 1e-6, rope_norm);
    s.run("rope_relative_phase", 1e-5, rope_relative_phase);
    s.run("schedule_midpoint", 1e-9, |_| schedule_midpoint());
    s.run("schedule_endpoints", 0.0, |_| schedule_endpoints());
    s.run("token_grid", 0.0, |_| token_grid());
    s.run("layer_schedule", 0.0, |_| layer_schedule());
    s.run("zero_init", 0.0, zero_init);
    s.run("parameter_fixture", 0.0, |_| parameter_fixture());
    s.run("one_step_linear_field", 1e-5, one_step_linear_field);
    s.run("first_frame_preservation", 0.0, first_frame);
    s.run("loss_gradients", 1e-4, loss_gradients);
    s.run("hinge_identities", 0.0, hinge_identities);
    s.run("dmd_zero_field", 0.0, dmd_zero_field);
    s.run("container_round_trip", 0.0, container_round_trip);
    s.run("toy_noop", 0.0, |_| toy_noop(seed));
    let passed = s.checks.iter().all(|c| c.passed);
    VerifyReport {
        seed,
        passed,
        checks: s.checks,
    }
}

fn count(bad: usize, total: usize) -> Outcome {
    Ok((bad as f64, format!("{bad} violations in {total}")))
}

fn rng_moments(rng: &mut Rng) -> Outcome {
    let n = 1_000_000;
    let (mut sum, mut sq) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let v = rng.normal() as f64;
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    Ok((mean.abs().max((var - 1.0).abs()), format!("mean {mean:.5}, variance {var:.5}")))
}

fn naive(a: &Tensor, b: &Tensor, spec: Contraction) -> Vec<f32> {
    let (da, db) = (a.dims(), b.dims());
    let (i, j, k) = match spec {
        Contraction::MatMul => (da[1], da[2], db[2]),
        Contraction::MatMulBT => (da[1], da[2], db[1]),
        Contraction::MatMulAT => (da[2], da[1], db[2]),
    };
    let batch = da[0].max(db[0]);
    let mut out = Vec::with_capacity(batch * i * k);
    for bi in 0..batch {
        let (ba, bb) = (if da[0] == 1 { 0 } else { bi }, if db[0] == 1 { 0 } else { bi });
        for ii in 0..i {
            for kk in 0..k {
                let mut acc = 0.0f32;
                for jj in 0..j {
                    let av = match spec {
                        Contraction::MatMulAT => a.data()[ba * j * i + jj * i + ii],
                        _ => a.data()[ba * i * j + ii * j + jj],
                    };
                    let bv = match spec {
                        Contraction::MatMulBT => b.data()[bb * k * j + kk * j + jj],
                        _ => b.data()[bb * j * k + jj * k + kk],
                    };
                    acc += av * bv;
                }
                out.push(acc);
            }
        }
    }
    out
}

fn contraction_oracle(rng: &mut Rng) -> Outcome {
    let mut bad = 0;
    let cases = 60;
    for c in 0..cases {
        let spec = Contraction::ALL[c % 3];
        let (b, i, j, k) = (1 + rng.below(3), 1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8));
        let (ad, bd) = match spec {
            Contraction::MatMul => ([b, i, j], [b, j, k]),
            Contraction::MatMulBT => ([b, i, j], [b, k, j]),
            Contraction::MatMulAT => ([b, j, i], [b, j, k]),
        };
        let x = random_normal(rng, &ad)?;
        let y = random_normal(rng, &bd)?;
        if batched_contract(&x, &y, spec)?.data() != naive(&x, &y, spec).as_slice() {
            bad += 1;
        }
    }
    count(bad, cases)
}

fn softmax_sums(rng: &mut Rng) -> Outcome {
    let x = random_normal(rng, &[64, 33])?.map(|v| 20.0 * v);
    let y = softmax_rows(&x)?;
    let worst = y
        .data()
        .chunks(33)
        .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((worst, "largest |row sum - 1|".into()))
}

fn rms_closed_form() -> Outcome {
    let y = rms_normalize(&Tensor::new(&[2], vec![3.0, 4.0])?, &[1.0, 1.0], 0.0)?;
    let want = [0.848528, 1.131371];
    let err = y
        .data()
        .iter()
        .zip(want)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);
    Ok((err, format!("{:?}", y.data())))
}

fn dual_form(rng: &mut Rng, fault: Option<Fault>) -> Outcome {
    let mut worst = 0.0f64;
    let cases = 100;
    for _ in 0..cases {
        let s = 1 + rng.below(512);
        let h = [1, 4][rng.below(2)];
        let d = [8, 32][rng.below(2)];
        let params = AttentionParams::random(h * d, h, rng)?;
        let x = random_normal(rng, &[1, s, h * d])?;
        let mut fast = linear_attention_streaming(&x, &params, ExecStrategy::ALL)?;
        if fault == Some(Fault::DualForm) {
            fast = fast.map(|v| v * 1.01 + 1e-3);
        }
        let slow = linear_attention_reference(&x, &params)?;
        worst = worst.max(relative_error(fast.data(), slow.data()));
    }
    Ok((worst, format!("worst relative error over {cases} cases")))
}

fn strategy_neutrality(rng: &mut Rng) -> Outcome {
    let (c, heads, s) = (64, 4, 97);
    let mut params = AttentionParams::random(c, heads, rng)?.with_rope(RopeConfig::for_head_dim(16)?)?;
    params = params.with_qk_norm(QkNorm {
        q_gain: (0..c).map(|_| 1.0 + 0.1 * rng.normal()).collect(),
        k_gain: (0..c).map(|_| 1.0 + 0.1 * rng.normal()).collect(),
    })?;
    let x = random_normal(rng, &[2, s, c])?;
    let pos: Vec<_> = (0..s as i64).map(|i| [i / 25, (i / 5) % 5, i % 5]).collect();
    let mut worst = 0.0f64;
    for kind in [AttentionKind::Linear, AttentionKind::Softmax] {
        let base = attend(kind, &x, Some(&pos), &params, ExecStrategy::BASELINE)?;
        for st in ExecStrategy::combinations() {
            let y = attend(kind, &x, Some(&pos), &params, st)?;
            worst = worst.max(relative_error(y.data(), base.data()));
        }
    }
    Ok((worst, "worst relative deviation from baseline, 8 strategies x 2 kinds".into()))
}

fn rope_norm(rng: &mut Rng) -> Outcome {
    let rope = RopeConfig::for_head_dim(32)?;
    let x = random_normal(rng, &[1, 16, 64])?;
    let pos: Vec<_> = (0..16).map(|i| [i, 3 * i - 7, 100 - i]).collect();
    let y = apply_rope3d(&x, &pos, &rope)?;
    let worst = x
        .data()
        .chunks(2)
        .zip(y.data().chunks(2))
        .map(|(a, b)| {
            let na = (a[0] as f64).hypot(a[1] as f64);
            let nb = (b[0] as f64).hypot(b[1] as f64);
            (na - nb).abs()
        })
        .fold(0.0, f64::max);
    Ok((worst, "largest change of a rotated pair norm".into()))
}

fn rope_relative_phase(rng: &mut Rng) -> Outcome {
    let rope = RopeConfig::for_head_dim(32)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = random_normal(rng, &[1, 1, 32])?;
        let k = random_normal(rng, &[1, 1, 32])?;
        let p1 = [rng.below(9) as i64, rng.below(9) as i64, rng.below(9) as i64];
        let p2 = [rng.below(9) as i64, rng.below(9) as i64, rng.below(9) as i64];
        let delta = [rng.below(5) as i64, rng.below(5) as i64, rng.below(5) as i64];
        let shift = |p: [i64; 3]| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
        };
        let a = dot(&apply_rope3d(&q, &[p1], &rope)?, &apply_rope3d(&k, &[p2], &rope)?);
        let b = dot(&apply_rope3d(&q, &[shift(p1)], &rope)?, &apply_rope3d(&k, &[shift(p2)], &rope)?);
        worst = worst.max((a - b).abs());
    }
    Ok((worst, "largest change of <rot q, rot k> under a common shift".into()))
}

fn schedule_midpoint() -> Outcome {
    let p = schedule_eval(0.5)?;
    let got = [p.a, p.b, p.lambda, p.lambda_prime, p.weight];
    let want = [0.5, 0.5, 0.0, -8.0, 1.0];
    let err = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err, format!("{got:?}")))
}

fn schedule_endpoints() -> Outcome {
    let ok = coefficients(0.0)? == (1.0, 0.0) && coefficients(1.0)? == (0.0, 1.0);
    Ok((if ok { 0.0 } else { 1.0 }, "(a, b) at t = 0 and t = 1".into()))
}

fn token_grid() -> Outcome {
    let spec: LatentSpec = "1280x720x17".parse()?;
    let grid = (spec.latent_width(), spec.latent_height(), spec.latent_frames());
    let n = token_count(&spec)?;
    let ok = n == 2760 && grid == (40, 23, 3);
    Ok((if ok { 0.0 } else { 1.0 }, format!("{n} tokens, grid {grid:?}")))
}

fn layer_schedule() -> Outcome {
    let kinds = DenoiserConfig::desk().layer_kinds();
    let bad = kinds
        .iter()
        .enumerate()
        .filter(|(i, k)| (**k == AttentionKind::Softmax) != (*i == 7 || *i == 15))
        .count();
    count(bad, kinds.len())
}

fn zero_init(rng: &mut Rng) -> Outcome {
    let model = Denoiser::init(DenoiserConfig::micro(), rng.next_u64())?;
    let spec = LatentSpec::new(64, 64, 9)?;
    let n = token_count(&spec)?;
    let z = random_normal(rng, &[1, n, 128])?;
    let cond = mi2v_core::denoiser::ConditioningInputs {
        token_timesteps: mi2v_core::flow::token_timesteps(&spec, 0.6)?,
        motion_score: 1.0,
        positions: spec.positions(),
    };
    let v = model.forward(&z, &cond)?;
    let nonzero = v.data().iter().filter(|&&x| x != 0.0).count();
    count(nonzero, v.len())
}

fn parameter_fixture() -> Outcome {
    let cfg = DenoiserConfig {
        layers: 1,
        softmax_layers: Default::default(),
        ..DenoiserConfig::micro()
    };
    let n = parameter_count(&cfg)?;
    let counted = init_weights(&cfg, 0)?.scalar_count();
    let ok = n == 3712 && counted == n;
    Ok((if ok { 0.0 } else { 1.0 }, format!("{n} analytic, {counted} stored")))
}

fn one_step_linear_field(rng: &mut Rng) -> Outcome {
    let x0 = random_normal(rng, &[12, 4])?;
    let eps = random_normal(rng, &[12, 4])?;
    let v: Vec<f32> = eps.data().iter().zip(x0.data()).map(|(e, x)| e - x).collect();
    let v = Tensor::new(&[12, 4], v)?;
    let field = move |_: &Tensor, _: &mi2v_core::denoiser::ConditioningInputs| Ok(v.clone());
    let run = EulerRun {
        grid: uniform_grid(1.0, 1)?,
        mode: PredictionMode::Velocity,
        reference: None,
        motion_score: 0.0,
        positions: &[],
    };
    let out = euler_integrate(&field, eps, &run)?;
    let err = out
        .data()
        .iter()
        .zip(x0.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    Ok((err, "largest |x0_hat - x0| after one step".into()))
}

fn first_frame(rng: &mut Rng) -> Outcome {
    let cfg = DenoiserConfig::micro();
    let mut weights = init_weights(&cfg, rng.next_u64())?;
    weights.output = random_normal(rng, &[cfg.hidden, 128])?.map(|v| 0.3 * v);
    let model = Denoiser::new(cfg, weights)?;
    let spec = LatentSpec::new(96, 64, 9)?;
    let reference = random_normal(rng, &[spec.frame_tokens(), 128])?;
    let mut bad = 0;
    for steps in [1, 2, 20, 30] {
        let sampler = SamplerConfig {
            steps,
            ..SamplerConfig::default()
        };
        let out = euler_sample_i2v(&model, &spec, &sampler, &reference, 2.0, rng.next_u64())?;
        let head = &out.data()[..reference.len()];
        if head.iter().zip(reference.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad += 1;
        }
    }
    count(bad, 4)
}

/// Worst relative error of `analytic` against central differences of `loss`
/// around `x`, dividing by the realized f32 step.
fn fd_error(x: &Tensor, analytic: &[f64], loss: impl Fn(&Tensor) -> Result<f64>) -> Result<f64> {
    let h = 1e-3f32;
    let mut fd = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let step = up.data()[i] as f64 - down.data()[i] as f64;
        fd.push((loss(&up)? - loss(&down)?) / step);
    }
    let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let diff = fd
        .iter()
        .zip(analytic)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

fn loss_gradients(rng: &mut Rng) -> Outcome {
    let x = random_normal(rng, &[16])?;
    let y = random_normal(rng, &[16])?;
    let reg = fd_error(&x, &regression_gradient(&x, &y)?, |p| loss_regression(p, &y))?;
    let fake = fd_error(&x, &fake_score_gradient(&x, &y)?, |p| loss_fake_score(p, &y))?;
    let s_real = random_normal(rng, &[16])?;
    let s_fake = random_normal(rng, &[16])?;
    let g = dmd_gradient_field(&s_real, &s_fake)?;
    let dmd = fd_error(&x, &dmd_surrogate_gradient(&g), |p| dmd_surrogate(&g, p))?;
    Ok((
        reg.max(fake).max(dmd),
        format!("regression {reg:.2e}, fake-score {fake:.2e}, dmd {dmd:.2e}"),
    ))
}

fn hinge_identities(rng: &mut Rng) -> Outcome {
    let mut bad = 0;
    let real = vec![vec![1.0, 2.5, 1.0], vec![3.0, 1.0, 1.2]];
    let fake = vec![vec![-1.0, -1.5, -4.0], vec![-1.0, -1.0, -2.0]];
    if loss_adv_discriminator(&real, &fake)? != 0.0 {
        bad += 1;
    }
    if loss_adv_discriminator(&[vec![0.0]], &[vec![0.0]])? != 2.0 {
        bad += 1;
    }
    for _ in 0..200 {
        let r = vec![(0..4).map(|_| 3.0 * rng.normal_f64()).collect::<Vec<_>>()];
        let f = vec![(0..4).map(|_| 3.0 * rng.normal_f64()).collect::<Vec<_>>()];
        if loss_adv_discriminator(&r, &f)? < 0.0 {
            bad += 1;
        }
    }
    count(bad, 202)
}

fn dmd_zero_field(rng: &mut Rng) -> Outcome {
    let s = random_normal(rng, &[4, 8])?;
    let g = dmd_gradient_field(&s, &s)?;
    let nonzero = g.data().iter().filter(|&&v| v != 0.0).count();
    count(nonzero, g.len())
}

fn container_round_trip(rng: &mut Rng) -> Outcome {
    let entries = vec![
        ("a".to_string(), random_normal(rng, &[3, 7])?),
        ("b".to_string(), random_normal(rng, &[2, 2, 2, 5])?),
        ("c".to_string(), Tensor::scalar(-0.0)),
    ];
    let back = decode_container(&encode_container(&entries)?)?;
    let bad = entries
        .iter()
        .zip(&back)
        .filter(|((n1, t1), (n2, t2))| {
            n1 != n2
                || t1.dims() != t2.dims()
                || t1.data().iter().zip(t2.data()).any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .count();
    count(bad + entries.len().abs_diff(back.len()), entries.len())
}

fn toy_noop(seed: u64) -> Outcome {
    let cfg = ToyConfig {
        iterations: 0,
        teacher_fit_samples: 2000,
        eval_points: 256,
        data_points: 512,
        ..ToyConfig::default()
    };
    let r = toy_distill_run(&cfg, LossSwitches::ALL, seed)?;
    let gap = (r.final_distance - r.baseline_distance).abs();
    Ok((gap, format!("baseline {:.6}", r.baseline_distance)))
}
