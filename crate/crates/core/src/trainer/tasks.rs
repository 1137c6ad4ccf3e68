//! Built-in training tasks. Losses are mean squared errors over a batch.

use serde::{Deserialize, Serialize};

use crate::problem::{Batch, SpectralProblem};
use crate::rng::{self, Stream};
use crate::{Error, Result};

pub const DEFAULT_VALIDATION_SIZE: usize = 10_000;
pub const DEFAULT_VALIDATION_SEED: u64 = 0x5E_ED0F_7A11;

/// A task exposes fresh-sample gradients and a fixed held-out loss.
pub trait Task: Send {
    fn num_params(&self) -> usize;

    fn initial_params(&self, rng: &mut Stream) -> Vec<f64>;

    /// Draws `batch_size` fresh samples, writes the gradient of the batch loss
    /// into `grad` and returns that loss.
    fn batch_gradient(
        &mut self,
        params: &[f64],
        batch_size: usize,
        rng: &mut Stream,
        grad: &mut [f64],
    ) -> f64;

    fn validation_loss(&self, params: &[f64]) -> f64;
}

/// On-disk task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    LeastSquares {
        d: usize,
        a: f64,
        b: f64,
        sigma2: f64,
        #[serde(default = "default_validation_size")]
        validation_size: usize,
        #[serde(default = "default_validation_seed")]
        validation_seed: u64,
    },
    /// `y = Σ_j v_j tanh(w_j·x) + noise` with `x ~ N(0, I)`; the student has the
    /// same form with `student_hidden` units.
    TeacherStudent {
        input_dim: usize,
        teacher_hidden: usize,
        student_hidden: usize,
        #[serde(default)]
        noise_std: f64,
        #[serde(default = "default_validation_size")]
        validation_size: usize,
        /// Seeds both the teacher and the validation inputs.
        #[serde(default = "default_validation_seed")]
        validation_seed: u64,
    },
}

fn default_validation_size() -> usize {
    DEFAULT_VALIDATION_SIZE
}

fn default_validation_seed() -> u64 {
    DEFAULT_VALIDATION_SEED
}

impl TaskSpec {
    pub fn id(&self) -> &'static str {
        match self {
            TaskSpec::LeastSquares { .. } => "least_squares",
            TaskSpec::TeacherStudent { .. } => "teacher_student",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Task>> {
        Ok(match *self {
            TaskSpec::LeastSquares {
                d,
                a,
                b,
                sigma2,
                validation_size,
                validation_seed,
            } => Box::new(LeastSquaresTask::new(
                SpectralProblem::power_law(d, a, b, sigma2)?,
                validation_size,
                validation_seed,
            )?),
            TaskSpec::TeacherStudent {
                input_dim,
                teacher_hidden,
                student_hidden,
                noise_std,
                validation_size,
                validation_seed,
            } => Box::new(TeacherStudentTask::new(
                input_dim,
                teacher_hidden,
                student_hidden,
                noise_std,
                validation_size,
                validation_seed,
            )?),
        })
    }
}

/// Least squares on a [`SpectralProblem`], starting from the problem's init.
///
/// The validation loss is the mean squared error on a fixed sample, computed
/// from its second-moment statistics so each evaluation costs `O(d²)`.
#[derive(Debug, Clone)]
pub struct LeastSquaresTask {
    problem: SpectralProblem,
    buffer: Batch,
    gram: Vec<f64>,
    cross: Vec<f64>,
    mean_y2: f64,
}

impl LeastSquaresTask {
    pub fn new(
        problem: SpectralProblem,
        validation_size: usize,
        validation_seed: u64,
    ) -> Result<Self> {
        let d = problem.dim();
        let held_out = problem.sample_batch(validation_size, &mut rng::stream(validation_seed))?;
        let n = validation_size as f64;
        let mut gram = vec![0.0; d * d];
        let mut cross = vec![0.0; d];
        let mut mean_y2 = 0.0;
        for (x, y) in held_out.rows() {
            for i in 0..d {
                cross[i] += x[i] * y / n;
                let row = &mut gram[i * d..(i + 1) * d];
                for j in 0..d {
                    row[j] += x[i] * x[j] / n;
                }
            }
            mean_y2 += y * y / n;
        }
        Ok(Self {
            problem,
            buffer: Batch::zeros(0, d),
            gram,
            cross,
            mean_y2,
        })
    }

    pub fn problem(&self) -> &SpectralProblem {
        &self.problem
    }
}

impl Task for LeastSquaresTask {
    fn num_params(&self) -> usize {
        self.problem.dim()
    }

    fn initial_params(&self, _rng: &mut Stream) -> Vec<f64> {
        self.problem.init().to_vec()
    }

    fn batch_gradient(
        &mut self,
        w: &[f64],
        batch_size: usize,
        rng: &mut Stream,
        grad: &mut [f64],
    ) -> f64 {
        if self.buffer.len() != batch_size {
            self.buffer = Batch::zeros(batch_size, self.problem.dim());
        }
        self.problem.fill_batch(&mut self.buffer, rng);
        grad.fill(0.0);
        let scale = 2.0 / batch_size as f64;
        let mut loss = 0.0;
        for (x, y) in self.buffer.rows() {
            let r: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - y;
            loss += r * r;
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += scale * r * xi;
            }
        }
        loss / batch_size as f64
    }

    fn validation_loss(&self, w: &[f64]) -> f64 {
        let d = w.len();
        let mut quad = 0.0;
        for i in 0..d {
            let row = &self.gram[i * d..(i + 1) * d];
            quad += w[i] * row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        }
        let lin: f64 = self.cross.iter().zip(w).map(|(a, b)| a * b).sum();
        quad - 2.0 * lin + self.mean_y2
    }
}

/// Teacher-student regression with one tanh hidden layer.
///
/// Parameters are laid out as the `hidden × input_dim` first-layer matrix in
/// row-major order followed by the `hidden` output weights.
#[derive(Debug, Clone)]
pub struct TeacherStudentTask {
    input_dim: usize,
    hidden: usize,
    teacher: Vec<f64>,
    teacher_hidden: usize,
    noise_std: f64,
    val_x: Vec<f64>,
    val_y: Vec<f64>,
}

impl TeacherStudentTask {
    pub fn new(
        input_dim: usize,
        teacher_hidden: usize,
        student_hidden: usize,
        noise_std: f64,
        validation_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || teacher_hidden == 0 || student_hidden == 0 || validation_size == 0 {
            return Err(Error::InvalidArgument(
                "teacher-student sizes must be positive".into(),
            ));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise_std must be nonnegative, got {noise_std}"
            )));
        }
        let mut rng = rng::stream(seed);
        let teacher = init_mlp(input_dim, teacher_hidden, &mut rng);
        let mut task = Self {
            input_dim,
            hidden: student_hidden,
            teacher,
            teacher_hidden,
            noise_std,
            val_x: Vec::new(),
            val_y: Vec::new(),
        };
        let (x, y) = task.draw(validation_size, &mut rng);
        task.val_x = x;
        task.val_y = y;
        Ok(task)
    }

    fn draw(&self, n: usize, rng: &mut Stream) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; n * self.input_dim];
        let mut y = vec![0.0; n];
        for (row, yi) in x.chunks_exact_mut(self.input_dim).zip(y.iter_mut()) {
            row.iter_mut().for_each(|v| *v = rng::normal(rng));
            *yi = mlp_forward(&self.teacher, self.teacher_hidden, row)
                + self.noise_std * rng::normal(rng);
        }
        (x, y)
    }

    /// Mean squared error on `(xs, ys)` and its gradient.
    pub fn loss_and_grad(&self, params: &[f64], xs: &[f64], ys: &[f64], grad: &mut [f64]) -> f64 {
        let (d, h) = (self.input_dim, self.hidden);
        let (w, v) = params.split_at(h * d);
        grad.fill(0.0);
        let scale = 2.0 / ys.len() as f64;
        let mut act = vec![0.0; h];
        let mut loss = 0.0;
        for (x, y) in xs.chunks_exact(d).zip(ys) {
            let mut f = 0.0;
            for j in 0..h {
                let z: f64 = w[j * d..(j + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum();
                act[j] = z.tanh();
                f += v[j] * act[j];
            }
            let r = f - y;
            loss += r * r;
            let (gw, gv) = grad.split_at_mut(h * d);
            for j in 0..h {
                gv[j] += scale * r * act[j];
                let back = scale * r * v[j] * (1.0 - act[j] * act[j]);
                for (g, xk) in gw[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *g += back * xk;
                }
            }
        }
        loss / ys.len() as f64
    }

    pub fn loss(&self, params: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
        let loss: f64 = xs
            .chunks_exact(self.input_dim)
            .zip(ys)
            .map(|(x, y)| {
                let r = mlp_forward(params, self.hidden, x) - y;
                r * r
            })
            .sum();
        loss / ys.len() as f64
    }
}

impl Task for TeacherStudentTask {
    fn num_params(&self) -> usize {
        self.hidden * (self.input_dim + 1)
    }

    fn initial_params(&self, rng: &mut Stream) -> Vec<f64> {
        init_mlp(self.input_dim, self.hidden, rng)
    }

    fn batch_gradient(
        &mut self,
        params: &[f64],
        batch_size: usize,
        rng: &mut Stream,
        grad: &mut [f64],
    ) -> f64 {
        let (xs, ys) = self.draw(batch_size, rng);
        self.loss_and_grad(params, &xs, &ys, grad)
    }

    fn validation_loss(&self, params: &[f64]) -> f64 {
        self.loss(params, &self.val_x, &self.val_y)
    }
}

fn init_mlp(d: usize, h: usize, rng: &mut Stream) -> Vec<f64> {
    let (sw, sv) = (1.0 / (d as f64).sqrt(), 1.0 / (h as f64).sqrt());
    let mut p: Vec<f64> = (0..h * d).map(|_| sw * rng::normal(rng)).collect();
    p.extend((0..h).map(|_| sv * rng::normal(rng)));
    p
}

fn mlp_forward(params: &[f64], h: usize, x: &[f64]) -> f64 {
    let d = x.len();
    let (w, v) = params.split_at(h * d);
    (0..h)
        .map(|j| {
            let z: f64 = w[j * d..(j + 1) * d]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum();
            v[j] * z.tanh()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_validation_matches_direct_mse() {
        let p = SpectralProblem::power_law(8, 2.0, 3.0, 0.1).unwrap();
        let task = LeastSquaresTask::new(p.clone(), 500, 3).unwrap();
        let held_out = p.sample_batch(500, &mut rng::stream(3)).unwrap();
        let w: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let direct: f64 = held_out
            .rows()
            .map(|(x, y)| {
                let r: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - y;
                r * r
            })
            .sum::<f64>()
            / 500.0;
        assert!((task.validation_loss(&w) - direct).abs() < 1e-12 * direct.max(1.0));
    }

    #[test]
    fn least_squares_validation_near_population_risk() {
        let p = SpectralProblem::power_law(16, 2.0, 3.0, 0.01).unwrap();
        let task = LeastSquaresTask::new(p.clone(), DEFAULT_VALIDATION_SIZE, 11).unwrap();
        let w = vec![0.0; 16];
        let pop = p.population_risk(&w).unwrap();
        let val = task.validation_loss(&w);
        assert!((val / pop - 1.0).abs() < 0.05, "{val} vs {pop}");
    }

    #[test]
    fn least_squares_gradient_is_mean_residual_times_x() {
        let p = SpectralProblem::power_law(4, 2.0, 3.0, 0.0).unwrap();
        let mut task = LeastSquaresTask::new(p.clone(), 10, 0).unwrap();
        // At the target the noiseless gradient vanishes.
        let mut g = vec![1.0; 4];
        let loss = task.batch_gradient(p.target(), 8, &mut rng::stream(5), &mut g);
        assert!(loss < 1e-24);
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn teacher_student_gradient_matches_finite_differences() {
        let task = TeacherStudentTask::new(5, 3, 4, 0.1, 10, 9).unwrap();
        let mut rng = rng::stream(21);
        let n = task.num_params();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let params: Vec<f64> = (0..n).map(|_| rng::normal(&mut rng)).collect();
            let (xs, ys) = task.draw(16, &mut rng);
            let mut g = vec![0.0; n];
            task.loss_and_grad(&params, &xs, &ys, &mut g);
            let mut fd = vec![0.0; n];
            for k in 0..n {
                let mut p = params.clone();
                p[k] += h;
                let up = task.loss(&p, &xs, &ys);
                p[k] -= 2.0 * h;
                let down = task.loss(&p, &xs, &ys);
                fd[k] = (up - down) / (2.0 * h);
            }
            let diff = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(diff / scale);
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn teacher_student_loss_matches_gradient_pass() {
        let task = TeacherStudentTask::new(3, 2, 2, 0.0, 20, 1).unwrap();
        let p = task.initial_params(&mut rng::stream(4));
        let mut g = vec![0.0; task.num_params()];
        let a = task.loss_and_grad(&p, &task.val_x, &task.val_y, &mut g);
        assert!((a - task.validation_loss(&p)).abs() < 1e-14);
    }

    #[test]
    fn spec_roundtrip() {
        let spec = TaskSpec::TeacherStudent {
            input_dim: 8,
            teacher_hidden: 4,
            student_hidden: 8,
            noise_std: 0.1,
            validation_size: 100,
            validation_seed: 2,
        };
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(toml::from_str::<TaskSpec>(&text).unwrap(), spec);
        let ls: TaskSpec =
            toml::from_str("kind = \"least_squares\"\nd = 4\na = 2.0\nb = 3.0\nsigma2 = 0.01")
                .unwrap();
        assert_eq!(ls.id(), "least_squares");
        assert_eq!(ls.build().unwrap().num_params(), 4);
    }
}
