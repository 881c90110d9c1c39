//! Finite-difference verification of every autodiff primitive and a small Res-UNet.
//!
//! Each case builds a scalar from leaf inputs, runs the reverse sweep, and
//! compares every analytic partial against a central difference in `f64`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::loss::{total_loss, LossConfig};
use crate::resunet::{build_model, ResUNetConfig};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-6;
/// Lower bound on the relative-error denominator so that near-zero partials
/// are judged by absolute error instead.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Adds `delta` to the first analytic partial of the named case (test hook).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub case: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: DEFAULT_STEP, tolerance: DEFAULT_TOLERANCE, floor: DEFAULT_FLOOR, seed: 7, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Scalar partials compared.
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
    pub passed: bool,
    pub elapsed_secs: f64,
}

impl GradcheckReport {
    pub fn entry(&self, name: &str) -> Option<&GradcheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{:<6} {:<20} max_rel={:.3e} max_abs={:.3e} n={}\n",
                if e.passed { "PASS" } else { "FAIL" },
                e.name,
                e.max_rel_error,
                e.max_abs_error,
                e.checked
            ));
        }
        s.push_str(&format!(
            "{} ({} cases, tolerance {:.0e}, {:.2}s)\n",
            if self.passed { "gradcheck passed" } else { "gradcheck FAILED" },
            self.entries.len(),
            self.tolerance,
            self.elapsed_secs
        ));
        s
    }
}

/// Relative error with the denominator floored at `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError> + 'a;

struct Checker<'o> {
    opts: &'o GradcheckOptions,
    rng: ChaCha8Rng,
    entries: Vec<GradcheckEntry>,
}

impl Checker<'_> {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    /// Values bounded away from zero, so relu kinks are never straddled.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        let mut t = self.uniform(shape, 0.1, 1.0);
        for v in t.data_mut() {
            if self.rng.random_bool(0.5) {
                *v = -*v;
            }
        }
        t
    }

    /// Distinct values spaced well beyond the finite-difference step.
    fn distinct(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut ranks: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            ranks.swap(i, self.rng.random_range(0..=i));
        }
        let data = ranks.into_iter().map(|r| r as f64 * 0.05 - 1.0).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    /// Reduces a tensor to a scalar through a fixed random weighting.
    fn weighted_mean(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var, AutodiffError> {
        let w = g.constant(weights.clone());
        let prod = g.mul(y, w)?;
        g.mean(prod)
    }

    fn run(&mut self, name: &str, inputs: Vec<Tensor<f64>>, build: &Builder<'_>) -> Result<(), AutodiffError> {
        let eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>), AutodiffError> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), grads)).collect();
            let out = build(&mut g, &vars)?;
            let value = g.value(out).item();
            if !grads {
                return Ok((value, Vec::new()));
            }
            g.backward(out)?;
            let gs = vars.iter().zip(xs).map(|(&v, x)| g.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec)).collect();
            Ok((value, gs))
        };
        let (_, mut analytic) = eval(&inputs, true)?;
        if let Some(f) = self.opts.fault.as_ref().filter(|f| f.case == name) {
            if let Some(first) = analytic.iter_mut().find_map(|g| g.first_mut()) {
                *first += f.delta;
            }
        }
        let h = self.opts.step;
        let (mut max_rel, mut max_abs, mut checked) = (0.0f64, 0.0f64, 0usize);
        let mut xs = inputs;
        for i in 0..xs.len() {
            for j in 0..xs[i].numel() {
                let orig = xs[i].data()[j];
                xs[i].data_mut()[j] = orig + h;
                let (plus, _) = eval(&xs, false)?;
                xs[i].data_mut()[j] = orig - h;
                let (minus, _) = eval(&xs, false)?;
                xs[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[i][j];
                max_rel = max_rel.max(relative_error(a, numeric, self.opts.floor));
                max_abs = max_abs.max((a - numeric).abs());
                checked += 1;
            }
        }
        let passed = max_rel <= self.opts.tolerance && max_rel.is_finite();
        self.entries.push(GradcheckEntry { name: name.to_string(), max_rel_error: max_rel, max_abs_error: max_abs, checked, passed });
        Ok(())
    }
}

/// Runs every primitive case plus the composite network.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, AutodiffError> {
    let start = Instant::now();
    let mut c = Checker { opts, rng: ChaCha8Rng::seed_from_u64(opts.seed), entries: Vec::new() };

    for (name, stride, pad, size) in [("conv2d", 1, 1, 6), ("conv2d_strided", 2, 1, 7)] {
        let (x, k, b) = (c.uniform(&[2, 3, size, size], -1.0, 1.0), c.uniform(&[4, 3, 3, 3], -1.0, 1.0), c.uniform(&[4], -1.0, 1.0));
        let out = (size + 2 * pad - 3) / stride + 1;
        let w = c.uniform(&[2, 4, out, out], -1.0, 1.0);
        c.run(name, vec![x, k, b], &|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            Checker::weighted_mean(g, y, &w)
        })?;
    }

    let (x, k, b) = (c.uniform(&[2, 3, 3, 3], -1.0, 1.0), c.uniform(&[3, 2, 2, 2], -1.0, 1.0), c.uniform(&[2], -1.0, 1.0));
    let w = c.uniform(&[2, 2, 6, 6], -1.0, 1.0);
    c.run("conv_transpose2d", vec![x, k, b], &|g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
        Checker::weighted_mean(g, y, &w)
    })?;

    let x = c.away_from_zero(&[2, 2, 4, 4]);
    let w = c.uniform(&[2, 2, 4, 4], -1.0, 1.0);
    c.run("relu", vec![x], &|g, v| {
        let y = g.relu(v[0])?;
        Checker::weighted_mean(g, y, &w)
    })?;

    let x = c.distinct(&[2, 2, 4, 6]);
    let w = c.uniform(&[2, 2, 2, 3], -1.0, 1.0);
    c.run("max_pool2d", vec![x], &|g, v| {
        let y = g.max_pool2d(v[0])?;
        Checker::weighted_mean(g, y, &w)
    })?;

    let (a, b) = (c.uniform(&[2, 2, 3, 3], -1.0, 1.0), c.uniform(&[2, 3, 3, 3], -1.0, 1.0));
    let w = c.uniform(&[2, 5, 3, 3], -1.0, 1.0);
    c.run("concat_channels", vec![a, b], &|g, v| {
        let y = g.concat_channels(v[0], v[1])?;
        Checker::weighted_mean(g, y, &w)
    })?;

    type Binary = fn(&mut Graph<f64>, Var, Var) -> Result<Var, AutodiffError>;
    let binaries: [(&str, Binary); 3] = [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul)];
    for (name, op) in binaries {
        let (a, b) = (c.uniform(&[3, 4], -1.0, 1.0), c.uniform(&[3, 4], -1.0, 1.0));
        let w = c.uniform(&[3, 4], -1.0, 1.0);
        c.run(name, vec![a, b], &|g, v| {
            let y = op(g, v[0], v[1])?;
            Checker::weighted_mean(g, y, &w)
        })?;
    }

    let x = c.uniform(&[3, 4], -1.0, 1.0);
    let w = c.uniform(&[3, 4], -1.0, 1.0);
    c.run("affine", vec![x], &|g, v| {
        let y = g.affine(v[0], -1.7, 0.3)?;
        Checker::weighted_mean(g, y, &w)
    })?;

    let x = c.uniform(&[2, 5], -1.0, 1.0);
    c.run("sum", vec![x], &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq)
    })?;

    let x = c.uniform(&[2, 5], -1.0, 1.0);
    c.run("mean", vec![x], &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.mean(sq)
    })?;

    let x = c.uniform(&[2, 3, 3, 3], -2.0, 2.0);
    let w = c.uniform(&[2, 3, 3, 3], -1.0, 1.0);
    c.run("softmax_channels", vec![x], &|g, v| {
        let y = g.softmax_channels(v[0])?;
        Checker::weighted_mean(g, y, &w)
    })?;

    let x = c.uniform(&[2, 3, 3, 3], -1.0, 1.0);
    let w = c.uniform(&[2, 1, 3, 3], -1.0, 1.0);
    c.run("select_channel", vec![x], &|g, v| {
        let y = g.select_channel(v[0], 1)?;
        Checker::weighted_mean(g, y, &w)
    })?;

    let p = c.uniform(&[2, 1, 4, 4], 0.05, 0.95);
    let target: Vec<f64> = (0..32).map(|_| f64::from(u8::from(c.rng.random_bool(0.4)))).collect();
    c.run("soft_dice", vec![p], &|g, v| g.soft_dice(v[0], &target, 1.0))?;

    let q = c.uniform(&[2, 3, 3, 3], 0.05, 1.0);
    let labels: Vec<usize> = (0..18).map(|_| c.rng.random_range(0..3)).collect();
    c.run("cross_entropy", vec![q], &|g, v| g.cross_entropy(v[0], &labels, &[1.0, 2.5, 0.7]))?;

    composite(&mut c)?;

    let passed = c.entries.iter().all(|e| e.passed);
    Ok(GradcheckReport { entries: c.entries, tolerance: opts.tolerance, passed, elapsed_secs: start.elapsed().as_secs_f64() })
}

/// Two-down/two-up Res-UNet under the hybrid loss, checked against every
/// parameter and the input image.
fn composite(c: &mut Checker<'_>) -> Result<(), AutodiffError> {
    let cfg = ResUNetConfig { in_channels: 2, num_classes: 2, depth: 2, base_channels: 2, seed: c.opts.seed };
    let model = build_model::<f64>(&cfg).expect("valid composite config");
    let x = c.uniform(&[1, 2, 8, 8], -1.0, 1.0);
    let labels: Vec<usize> = (0..64).map(|_| usize::from(c.rng.random_bool(0.3))).collect();
    let mut inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    inputs.push(x);
    let loss_cfg = LossConfig::default();
    let n = model.params().len();
    c.run("resunet_composite", inputs, &|g, v| {
        let y = model.forward_graph(g, &v[..n], v[n]).map_err(|e| match e {
            crate::resunet::ModelError::Autodiff(a) => a,
            other => AutodiffError::InvalidArgument(other.to_string()),
        })?;
        let terms = total_loss(g, y, &labels, &loss_cfg, &[1.0, 3.0]).map_err(|e| match e {
            crate::loss::LossError::Autodiff(a) => a,
            other => AutodiffError::InvalidArgument(other.to_string()),
        })?;
        Ok(terms.total)
    })
}
