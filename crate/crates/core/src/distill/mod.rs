//! Timestep-distillation losses and the multi-step teacher target.
//!
//! Scores are treated as constants wherever they enter a student gradient.
//! Adversarial scores are indexed `[branch][sample]`.

mod toy;

pub use toy::{
    toy_distill_run, DiscriminatorConfig, LossSwitches, LossWeights, ToyConfig, ToyReport,
    TracePoint, FeatureTap,
};

use crate::attention::Pos3;
use crate::error::{invalid, shape_err, Error, Result};
use crate::flow::{euler_integrate, uniform_grid, EulerRun, PredictionMode, VelocityModel};
use crate::tensor::Tensor;

/// Euler integration of `x_t` from `t_start` down to 0 with the teacher.
pub fn teacher_multistep(
    teacher: &dyn VelocityModel,
    x_t: &Tensor,
    t_start: f64,
    steps: usize,
) -> Result<Tensor> {
    let run = EulerRun {
        grid: uniform_grid(t_start, steps)?,
        mode: PredictionMode::Velocity,
        reference: None,
        motion_score: 0.0,
        positions: &[],
    };
    euler_integrate(teacher, x_t.clone(), &run)
}

/// As [`teacher_multistep`], with the first `reference.rows` tokens held at the reference.
pub fn teacher_multistep_i2v(
    teacher: &dyn VelocityModel,
    x_t: &Tensor,
    t_start: f64,
    steps: usize,
    reference: &Tensor,
    motion_score: f32,
    positions: &[Pos3],
) -> Result<Tensor> {
    let run = EulerRun {
        grid: uniform_grid(t_start, steps)?,
        mode: PredictionMode::Velocity,
        reference: Some(reference),
        motion_score,
        positions,
    };
    euler_integrate(teacher, x_t.clone(), &run)
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Mean squared error between the student output and the teacher target.
pub fn loss_regression(student_out: &Tensor, teacher_target: &Tensor) -> Result<f64> {
    student_out.same_shape(teacher_target)?;
    Ok(mse(&widen(student_out), &widen(teacher_target)))
}

/// `2 (x - y) / n`, the gradient of [`loss_regression`] in its first argument.
pub fn regression_gradient(student_out: &Tensor, teacher_target: &Tensor) -> Result<Vec<f64>> {
    student_out.same_shape(teacher_target)?;
    let n = student_out.len().max(1) as f64;
    Ok(student_out
        .data()
        .iter()
        .zip(teacher_target.data())
        .map(|(&x, &y)| 2.0 * (x as f64 - y as f64) / n)
        .collect())
}

fn check_scores(scores: &[Vec<f64>]) -> Result<usize> {
    let n = scores
        .first()
        .map(Vec::len)
        .ok_or_else(|| invalid("no discriminator branches"))?;
    if n == 0 {
        return Err(invalid("no samples"));
    }
    if scores.iter().any(|b| b.len() != n) {
        return Err(shape_err("branches hold different sample counts"));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator score"));
    }
    Ok(n)
}

/// `-mean_i sum_k D_k(i)`.
pub fn loss_adv_generator(scores: &[Vec<f64>]) -> Result<f64> {
    let n = check_scores(scores)?;
    let total: f64 = (0..n).map(|i| scores.iter().map(|b| b[i]).sum::<f64>()).sum();
    Ok(-total / n as f64)
}

/// `mean_i sum_k [relu(1 - real_k(i)) + relu(1 + fake_k(i))]`.
pub fn loss_adv_discriminator(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let nr = check_scores(real)?;
    let nf = check_scores(fake)?;
    if real.len() != fake.len() {
        return Err(invalid(format!(
            "{} real branches vs {} fake branches",
            real.len(),
            fake.len()
        )));
    }
    let r: f64 = real.iter().flatten().map(|&s| (1.0 - s).max(0.0)).sum::<f64>() / nr as f64;
    let f: f64 = fake.iter().flatten().map(|&s| (1.0 + s).max(0.0)).sum::<f64>() / nf as f64;
    Ok(r + f)
}

/// `g = s_fake - s_real`, the gradient of the reverse KL with respect to the generated sample.
pub fn dmd_gradient_field(s_real: &Tensor, s_fake: &Tensor) -> Result<Tensor> {
    s_real.same_shape(s_fake)?;
    let data = s_fake
        .data()
        .iter()
        .zip(s_real.data())
        .map(|(f, r)| f - r)
        .collect();
    Tensor::new(s_real.dims(), data)
}

/// `mean(g * x0_hat)`; its derivative in `x0_hat` is `g / n`.
pub fn dmd_surrogate(field: &Tensor, x0_hat: &Tensor) -> Result<f64> {
    field.same_shape(x0_hat)?;
    if field.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = field
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(&g, &x)| g as f64 * x as f64)
        .sum();
    Ok(s / field.len() as f64)
}

pub fn dmd_surrogate_gradient(field: &Tensor) -> Vec<f64> {
    let n = field.len().max(1) as f64;
    field.data().iter().map(|&g| g as f64 / n).collect()
}

/// Mean squared error of the fake-score prediction against the generated sample.
pub fn loss_fake_score(f_pred: &Tensor, x0_hat: &Tensor) -> Result<f64> {
    loss_regression(f_pred, x0_hat)
}

/// Gradient of [`loss_fake_score`] in `f_pred`.
pub fn fake_score_gradient(f_pred: &Tensor, x0_hat: &Tensor) -> Result<Vec<f64>> {
    regression_gradient(f_pred, x0_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConditioningInputs;
    use crate::rng::{random_normal, Rng};

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn regression_examples() {
        let x = t(&[1.0, 2.0, 3.0]);
        assert_eq!(loss_regression(&x, &x).unwrap(), 0.0);
        let y = t(&[-1.0, 0.0, 1.0]);
        assert_eq!(loss_regression(&x, &y).unwrap(), 4.0);
        assert!(loss_regression(&x, &t(&[1.0])).is_err());
    }

    #[test]
    fn fake_score_examples() {
        let x = t(&[0.5, -0.5]);
        assert_eq!(loss_fake_score(&x, &x).unwrap(), 0.0);
        assert_eq!(loss_fake_score(&t(&[1.5, 0.5]), &x).unwrap(), 1.0);
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(loss_adv_generator(&[vec![0.0; 3], vec![0.0; 3]]).unwrap(), 0.0);
        assert_eq!(loss_adv_generator(&[vec![1.0], vec![2.0]]).unwrap(), -3.0);
        assert!(loss_adv_generator(&[]).is_err());
        let a = loss_adv_generator(&[vec![0.3, 0.1]]).unwrap();
        let b = loss_adv_generator(&[vec![0.3, 0.2]]).unwrap();
        assert!(b < a);

        assert_eq!(loss_adv_discriminator(&[vec![0.0]], &[vec![0.0]]).unwrap(), 2.0);
        let real = vec![vec![1.0, 3.0], vec![1.5, 1.0]];
        let fake = vec![vec![-1.0, -2.0], vec![-4.0, -1.0]];
        assert_eq!(loss_adv_discriminator(&real, &fake).unwrap(), 0.0);
        assert!(loss_adv_discriminator(&real, &fake[..1]).is_err());
    }

    #[test]
    fn dmd_examples() {
        let g = dmd_gradient_field(&t(&[1.0, 0.0]), &t(&[0.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[-1.0, 1.0]);
        let s = t(&[0.25, -3.0, 7.5]);
        let zero = dmd_gradient_field(&s, &s).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let swapped = dmd_gradient_field(&t(&[0.0, 1.0]), &t(&[1.0, 0.0])).unwrap();
        assert_eq!(swapped.data(), &[1.0, -1.0]);
    }

    #[test]
    fn teacher_steps_one_is_one_update() {
        let field = |z: &Tensor, _: &ConditioningInputs| Ok(z.map(|v| 0.5 * v + 1.0));
        let x = random_normal(&mut Rng::new(1), &[3, 2]).unwrap();
        let out = teacher_multistep(&field, &x, 0.6, 1).unwrap();
        for (o, xi) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, xi - 0.6f32 * (0.5 * xi + 1.0));
        }
        assert!(teacher_multistep(&field, &x, 0.6, 0).is_err());
    }

    #[test]
    fn teacher_twenty_steps_near_fine_integration() {
        let field = |z: &Tensor, c: &ConditioningInputs| {
            let t = c.token_timesteps[0];
            Ok(z.map(|v| 0.05 * v.sin() + 0.02 * t))
        };
        let x = random_normal(&mut Rng::new(4), &[8, 4]).unwrap();
        let coarse = teacher_multistep(&field, &x, 1.0, 20).unwrap();
        let fine = teacher_multistep(&field, &x, 1.0, 2000).unwrap();
        let worst = coarse
            .data()
            .iter()
            .zip(fine.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn teacher_i2v_keeps_reference_rows() {
        let field = |z: &Tensor, _: &ConditioningInputs| Ok(z.map(|v| v.cos()));
        let x = random_normal(&mut Rng::new(2), &[6, 3]).unwrap();
        let r = random_normal(&mut Rng::new(3), &[2, 3]).unwrap();
        let out = teacher_multistep_i2v(&field, &x, 1.0, 4, &r, 1.0, &[]).unwrap();
        assert_eq!(&out.data()[..6], r.data());
    }
}
