//! Seeded synthetic tasks. Batch `step` is drawn from its own ChaCha stream,
//! so any batch can be regenerated without replaying earlier ones.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::graph::Target;
use crate::tensor::Tensor;

/// Stream reserved for held-out evaluation batches.
const EVAL_STREAM: u64 = u64::MAX;

pub trait DataSource: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Training batch number `step`.
    fn batch(&self, step: usize, size: usize) -> (Tensor, Target);
    /// A fixed held-out batch.
    fn eval_batch(&self, size: usize) -> (Tensor, Target);
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `y = W₂ tanh(W₁ x + b₁) + b₂ + noise` with a fixed random teacher and `x ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct TeacherRegression {
    seed: u64,
    input_dim: usize,
    output_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    hidden: usize,
    noise: f64,
}

impl TeacherRegression {
    pub fn new(seed: u64, input_dim: usize, hidden: usize, output_dim: usize, noise: f64) -> Self {
        let mut rng = stream(seed, 0);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let w1 = normal(hidden * input_dim, (1.0 / input_dim as f64).sqrt());
        let b1 = normal(hidden, 0.1);
        let w2 = normal(output_dim * hidden, (1.0 / hidden as f64).sqrt());
        let b2 = normal(output_dim, 0.1);
        Self { seed, input_dim, output_dim, w1, b1, w2, b2, hidden, noise }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, size: usize) -> (Tensor, Target) {
        let (d, h, o) = (self.input_dim, self.hidden, self.output_dim);
        let mut xs = Vec::with_capacity(size * d);
        let mut ys = Vec::with_capacity(size * o);
        for _ in 0..size {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let z: Vec<f64> = (0..h)
                .map(|j| (self.b1[j] + (0..d).map(|k| self.w1[j * d + k] * x[k]).sum::<f64>()).tanh())
                .collect();
            for i in 0..o {
                let clean = self.b2[i] + (0..h).map(|j| self.w2[i * h + j] * z[j]).sum::<f64>();
                let eps: f64 = rng.sample(StandardNormal);
                ys.push(clean + self.noise * eps);
            }
            xs.extend(x);
        }
        let x = Tensor::matrix(size, d, xs).expect("sizes agree");
        let y = Tensor::matrix(size, o, ys).expect("sizes agree");
        (x, Target::Values(y))
    }
}

impl DataSource for TeacherRegression {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn batch(&self, step: usize, size: usize) -> (Tensor, Target) {
        self.draw(&mut stream(self.seed, step as u64 + 1), size)
    }

    fn eval_batch(&self, size: usize) -> (Tensor, Target) {
        self.draw(&mut stream(self.seed, EVAL_STREAM), size)
    }
}

/// Two interleaved spiral arms in the plane, one per class.
#[derive(Debug, Clone)]
pub struct Spiral {
    seed: u64,
    turns: f64,
    noise: f64,
}

impl Spiral {
    pub fn new(seed: u64, turns: f64, noise: f64) -> Self {
        Self { seed, turns, noise }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, size: usize) -> (Tensor, Target) {
        let mut xs = Vec::with_capacity(size * 2);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let label = rng.gen_range(0..2usize);
            let r: f64 = rng.gen_range(0.05..1.0);
            let theta = 2.0 * PI * self.turns * r + PI * label as f64;
            let (n1, n2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            xs.push(r * theta.cos() + self.noise * n1);
            xs.push(r * theta.sin() + self.noise * n2);
            labels.push(label);
        }
        (Tensor::matrix(size, 2, xs).expect("sizes agree"), Target::Classes(labels))
    }
}

impl DataSource for Spiral {
    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn batch(&self, step: usize, size: usize) -> (Tensor, Target) {
        self.draw(&mut stream(self.seed, step as u64 + 1), size)
    }

    fn eval_batch(&self, size: usize) -> (Tensor, Target) {
        self.draw(&mut stream(self.seed, EVAL_STREAM), size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_reproducible_and_distinct() {
        let task = TeacherRegression::new(3, 4, 8, 1, 0.01);
        let (a, ta) = task.batch(5, 16);
        let (b, tb) = task.batch(5, 16);
        assert_eq!((a.data(), &ta), (b.data(), &tb));
        assert_ne!(task.batch(6, 16).0.data(), a.data());
        assert_ne!(task.eval_batch(16).0.data(), a.data());
    }

    #[test]
    fn spiral_labels_are_binary() {
        let (x, t) = Spiral::new(0, 1.5, 0.02).batch(0, 64);
        assert_eq!(x.shape(), &[64, 2]);
        match t {
            Target::Classes(l) => assert!(l.iter().all(|&v| v < 2) && l.contains(&0) && l.contains(&1)),
            _ => panic!("spiral yields classes"),
        }
    }
}
