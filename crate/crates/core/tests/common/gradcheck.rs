//! Central finite-difference checks of the two training objectives in f64.
//!
//! Probed coordinates are every input pixel plus a random 1% of the scalar
//! parameters that the objective touches. A probe is dropped when the pair of
//! perturbed evaluations falls on different sides of a kink: a sign change of
//! an `|.|` argument or an ordering change inside an elementwise maximum.

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use corrfuse::losses::{stage1_total_loss, stage2_total_loss, LossVariant, LossWeights};
use corrfuse::network::{groups, FusionNet, NetworkSpec};

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Stage1,
    Stage2,
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub inputs_checked: usize,
    pub params_checked: usize,
    pub excluded: usize,
    pub worst_rel: f64,
    pub worst_at: String,
    pub failures: Vec<String>,
}

impl GradReport {
    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        if rel > self.worst_rel {
            self.worst_rel = rel;
            self.worst_at = what.clone();
        }
        if rel > REL_TOL || !rel.is_finite() {
            self.failures
                .push(format!("{what}: analytic {analytic:.9e} numeric {numeric:.9e} rel {rel:.3e}"));
        }
    }
}

pub fn small_spec() -> NetworkSpec {
    NetworkSpec {
        sfe_blocks: 1,
        embed_dim: 8,
        heads: 2,
        bte_blocks: 1,
        inn_layers: 1,
        decoder_blocks: 1,
        ..NetworkSpec::default()
    }
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn with_value(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut data = to_vec(t);
    data[i] = v;
    Tensor::from_vec(data, t.dims(), t.device()).unwrap()
}

/// Raw Sobel responses `(gx, gy)` of every `(h, w)` plane of `data`, reflect padded.
fn sobel_raw(data: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let refl = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let i = if i < 0 { -i } else { i };
        (if i >= n { 2 * (n - 1) - i } else { i }) as usize
    };
    let (mut gx, mut gy) = (Vec::new(), Vec::new());
    for p in 0..planes {
        let at = |x: isize, y: isize| data[p * h * w + refl(y, h) * w + refl(x, w)];
        for y in 0..h as isize {
            for x in 0..w as isize {
                gx.push(
                    at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                        - at(x - 1, y - 1)
                        - 2.0 * at(x - 1, y)
                        - at(x - 1, y + 1),
                );
                gy.push(
                    at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                        - at(x - 1, y - 1)
                        - 2.0 * at(x, y - 1)
                        - at(x + 1, y - 1),
                );
            }
        }
    }
    (gx, gy)
}

/// Sign with a dead band. Reflect padding makes border Sobel responses
/// identically zero up to rounding; those stay in class 0.
fn side(v: f64) -> i8 {
    if v.abs() < 1e-12 {
        0
    } else if v > 0.0 {
        1
    } else {
        -1
    }
}

/// Side of every kink of the stage-II objective at the given point.
fn kink_signature(fused: &Tensor, a: &Tensor, b: &Tensor) -> Vec<i8> {
    let (n, _, h, w) = fused.dims4().unwrap();
    let (f, a, b) = (to_vec(fused), to_vec(a), to_vec(b));
    let mut sig = Vec::new();
    for i in 0..f.len() {
        sig.push(side(a[i] - b[i]));
        sig.push(side(f[i] - a[i].max(b[i])));
    }
    let mag = |(gx, gy): (Vec<f64>, Vec<f64>)| -> (Vec<i8>, Vec<f64>) {
        let signs = gx.iter().chain(&gy).map(|v| side(*v)).collect();
        (signs, gx.iter().zip(&gy).map(|(x, y)| x.abs() + y.abs()).collect())
    };
    let (sf, gf) = mag(sobel_raw(&f, n, h, w));
    let (sa, ga) = mag(sobel_raw(&a, n, h, w));
    let (sb, gb) = mag(sobel_raw(&b, n, h, w));
    sig.extend(sf);
    sig.extend(sa);
    sig.extend(sb);
    for i in 0..gf.len() {
        sig.push(side(ga[i] - gb[i]));
        sig.push(side(gf[i] - ga[i].max(gb[i])));
    }
    sig
}

struct Problem {
    net: FusionNet,
    objective: Objective,
    weights: LossWeights,
}

impl Problem {
    /// Total loss and the kink signature at `(a, b)`.
    fn eval(&self, a: &Tensor, b: &Tensor) -> (Tensor, Vec<i8>) {
        let variant = LossVariant::Division;
        match self.objective {
            Objective::Stage1 => {
                let out = self.net.reconstruct(a, b).unwrap();
                let l = stage1_total_loss(
                    a,
                    &out.recon_a,
                    b,
                    &out.recon_b,
                    &out.dec_a,
                    &out.dec_b,
                    &self.weights,
                    variant,
                )
                .unwrap();
                (l.total, Vec::new())
            }
            Objective::Stage2 => {
                let out = self.net.fuse(a, b).unwrap();
                let l = stage2_total_loss(&out.fused, a, b, &out.dec_a, &out.dec_b, &self.weights, variant).unwrap();
                let sig = kink_signature(&out.fused, a, b);
                (l.total, sig)
            }
        }
    }

    fn value(&self, a: &Tensor, b: &Tensor) -> (f64, Vec<i8>) {
        let (l, sig) = self.eval(a, b);
        (l.to_scalar::<f64>().unwrap(), sig)
    }
}

/// Random source pair in `[0.1, 0.9]` whose pixels differ by at least 0.05.
fn sources(n: usize, size: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let count = n * size * size;
    let a: Vec<f64> = (0..count).map(|_| rng.gen_range(0.1..0.9)).collect();
    let b: Vec<f64> = a
        .iter()
        .map(|&x| loop {
            let y = rng.gen_range(0.1..0.9);
            if (x - y).abs() >= 0.05 {
                break y;
            }
        })
        .collect();
    let t = |v: Vec<f64>| Tensor::from_vec(v, (n, 1, size, size), &Device::Cpu).unwrap();
    (t(a), t(b))
}

/// Checks one objective on `(2, 1, size, size)` inputs with a perturbed
/// random network.
pub fn check(objective: Objective, size: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = FusionNet::new(&small_spec(), DType::F64, seed).unwrap();
    // Move every parameter off its initial value so zero-initialized
    // projections do not hide whole sub-graphs.
    for (_, var) in net.store().iter() {
        let noisy: Vec<f64> = to_vec(var.as_tensor())
            .into_iter()
            .map(|v| v + 0.1 * rng.gen_range(-1.0..1.0))
            .collect();
        var.set(&Tensor::from_vec(noisy, var.dims(), &Device::Cpu).unwrap()).unwrap();
    }
    let problem = Problem {
        net,
        objective,
        weights: LossWeights::default(),
    };
    let (a, b) = sources(2, size, &mut rng);
    let (va, vb) = (Var::from_tensor(&a).unwrap(), Var::from_tensor(&b).unwrap());
    let (loss, _) = problem.eval(va.as_tensor(), vb.as_tensor());
    let grads = loss.backward().unwrap();

    let mut report = GradReport::default();
    let probe = |report: &mut GradReport, what: String, analytic: f64, plus: (f64, Vec<i8>), minus: (f64, Vec<i8>)| {
        if plus.1 != minus.1 {
            report.excluded += 1;
            return false;
        }
        report.record(what, analytic, (plus.0 - minus.0) / (2.0 * STEP));
        true
    };

    for (label, src, var) in [("a", &a, &va), ("b", &b, &vb)] {
        let g = to_vec(grads.get(var.as_tensor()).expect("input gradient"));
        let base = to_vec(src);
        for i in 0..base.len() {
            let shifted = |d: f64| with_value(src, i, base[i] + d);
            let (plus, minus) = if label == "a" {
                (problem.value(&shifted(STEP), &b), problem.value(&shifted(-STEP), &b))
            } else {
                (problem.value(&a, &shifted(STEP)), problem.value(&a, &shifted(-STEP)))
            };
            if probe(&mut report, format!("input {label}[{i}]"), g[i], plus, minus) {
                report.inputs_checked += 1;
            }
        }
    }

    let in_objective = |name: &str| match objective {
        Objective::Stage1 => name.starts_with(groups::ENCODER) || name.starts_with(groups::DECODER),
        Objective::Stage2 => true,
    };
    let mut scalars: Vec<(String, usize)> = problem
        .net
        .store()
        .iter()
        .filter(|(name, _)| in_objective(name))
        .flat_map(|(name, var)| (0..var.elem_count()).map(move |i| (name.clone(), i)))
        .collect();
    let sample = scalars.len().div_ceil(100);
    scalars.shuffle(&mut rng);
    for (name, i) in scalars.into_iter().take(sample) {
        let var = problem.net.store().get(&name).unwrap();
        let g = grads.get(var.as_tensor()).map(to_vec).map(|v| v[i]).unwrap_or(0.0);
        let orig = var.as_tensor().copy().unwrap();
        let x0 = to_vec(&orig)[i];
        var.set(&with_value(&orig, i, x0 + STEP)).unwrap();
        let plus = problem.value(&a, &b);
        var.set(&with_value(&orig, i, x0 - STEP)).unwrap();
        let minus = problem.value(&a, &b);
        var.set(&orig).unwrap();
        if probe(&mut report, format!("{name}[{i}]"), g, plus, minus) {
            report.params_checked += 1;
        }
    }
    report
}
