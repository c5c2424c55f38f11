//! Direct, unoptimized reference versions of the fusion metrics. Histograms
//! are hash maps, filters are full 2-d window sums and the Sobel kernels are
//! written out as 3x3 arrays.

use std::collections::HashMap;
use std::f64::consts::PI;

use corrfuse::plane::Plane;

fn bin(v: f64) -> usize {
    let b = (v.clamp(0.0, 1.0) * 256.0).floor() as usize;
    if b > 255 {
        255
    } else {
        b
    }
}

fn plogp_bits(counts: impl Iterator<Item = usize>, n: usize) -> f64 {
    let n = n as f64;
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln() / 2f64.ln()
        })
        .sum()
}

pub fn entropy(p: &Plane) -> f64 {
    let mut hist: HashMap<usize, usize> = HashMap::new();
    for &v in &p.data {
        *hist.entry(bin(v)).or_default() += 1;
    }
    plogp_bits(hist.into_values(), p.data.len())
}

pub fn std_dev(p: &Plane) -> f64 {
    let n = p.data.len() as f64;
    let s: f64 = p.data.iter().map(|v| v * 255.0).sum();
    let s2: f64 = p.data.iter().map(|v| (v * 255.0).powi(2)).sum();
    (s2 / n - (s / n).powi(2)).max(0.0).sqrt()
}

pub fn spatial_frequency(p: &Plane) -> f64 {
    let (w, h) = (p.width, p.height);
    let px = |x: usize, y: usize| 255.0 * p.data[y * w + x];
    let mut rf = Vec::new();
    let mut cf = Vec::new();
    for y in 0..h {
        for x in 1..w {
            rf.push(px(x, y) - px(x - 1, y));
        }
    }
    for y in 1..h {
        for x in 0..w {
            cf.push(px(x, y) - px(x, y - 1));
        }
    }
    let ms = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|d| d * d).sum::<f64>() / v.len() as f64
        }
    };
    (ms(&rf) + ms(&cf)).sqrt()
}

/// `sum p(x, y) log2(p(x, y) / (p(x) p(y)))`.
pub fn mutual_information(x: &Plane, y: &Plane) -> f64 {
    let n = x.data.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut px: HashMap<usize, f64> = HashMap::new();
    let mut py: HashMap<usize, f64> = HashMap::new();
    for (&a, &b) in x.data.iter().zip(&y.data) {
        *joint.entry((bin(a), bin(b))).or_default() += 1.0 / n;
        *px.entry(bin(a)).or_default() += 1.0 / n;
        *py.entry(bin(b)).or_default() += 1.0 / n;
    }
    joint
        .iter()
        .map(|(&(i, j), &p)| p * (p / (px[&i] * py[&j])).log2())
        .sum::<f64>()
        .max(0.0)
}

/// Mean product of z-scores.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let sd = |v: &[f64], m: f64| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    let (ma, mb) = (mean(a), mean(b));
    let (sa, sb) = (sd(a, ma), sd(b, mb));
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| ((x - ma) / sa) * ((y - mb) / sb)).sum::<f64>() / n
}

pub fn scd(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    let diff = |p: &Plane, q: &Plane| -> Vec<f64> { p.data.iter().zip(&q.data).map(|(x, y)| x - y).collect() };
    pearson(&diff(f, b), &a.data) + pearson(&diff(f, a), &b.data)
}

/// 2-d Gaussian window, normalized over all of its entries.
fn window(n: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut k = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-r2 / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    k.iter_mut().flatten().for_each(|v| *v /= total);
    k
}

type Grid = Vec<Vec<f64>>;

fn grid(p: &Plane, scale: f64) -> Grid {
    (0..p.height)
        .map(|y| (0..p.width).map(|x| scale * p.data[y * p.width + x]).collect())
        .collect()
}

fn filter2(g: &Grid, k: &Grid) -> Option<Grid> {
    let n = k.len();
    let (h, w) = (g.len(), g[0].len());
    if h < n || w < n {
        return None;
    }
    Some(
        (0..=h - n)
            .map(|y| {
                (0..=w - n)
                    .map(|x| {
                        let mut s = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                s += k[i][j] * g[y + i][x + j];
                            }
                        }
                        s
                    })
                    .collect()
            })
            .collect(),
    )
}

fn zip_with(a: &Grid, b: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).collect())
        .collect()
}

pub fn vifp(reference: &Plane, dist: &Plane) -> f64 {
    let sigma_nsq = 2.0;
    let mut r = grid(reference, 255.0);
    let mut d = grid(dist, 255.0);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = 2usize.pow(5 - scale) + 1;
        let k = window(n, n as f64 / 5.0);
        if scale > 1 {
            let (Some(fr), Some(fd)) = (filter2(&r, &k), filter2(&d, &k)) else {
                break;
            };
            let every_other = |g: Grid| -> Grid {
                g.into_iter().step_by(2).map(|row| row.into_iter().step_by(2).collect()).collect()
            };
            r = every_other(fr);
            d = every_other(fd);
        }
        let (Some(mu1), Some(mu2)) = (filter2(&r, &k), filter2(&d, &k)) else {
            break;
        };
        let e11 = filter2(&zip_with(&r, &r, |a, b| a * b), &k).unwrap();
        let e22 = filter2(&zip_with(&d, &d, |a, b| a * b), &k).unwrap();
        let e12 = filter2(&zip_with(&r, &d, |a, b| a * b), &k).unwrap();
        for y in 0..mu1.len() {
            for x in 0..mu1[0].len() {
                let (m1, m2) = (mu1[y][x], mu2[y][x]);
                let mut s1 = f64::max(e11[y][x] - m1 * m1, 0.0);
                let s2 = f64::max(e22[y][x] - m2 * m2, 0.0);
                let s12 = e12[y][x] - m1 * m2;
                let mut g = s12 / (s1 + 1e-10);
                let mut sv = s2 - g * s12;
                if s1 < 1e-10 {
                    g = 0.0;
                    sv = s2;
                    s1 = 0.0;
                }
                if s2 < 1e-10 {
                    g = 0.0;
                    sv = 0.0;
                }
                if g < 0.0 {
                    sv = s2;
                    g = 0.0;
                }
                sv = sv.max(1e-10);
                num += (1.0 + g * g * s1 / (sv + sigma_nsq)).log10();
                den += (1.0 + s1 / sigma_nsq).log10();
            }
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn vif(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    vifp(a, f) + vifp(b, f)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn correlate3(p: &Plane, k: &[[f64; 3]; 3], x: usize, y: usize) -> f64 {
    let mut s = 0.0;
    for (dy, row) in k.iter().enumerate() {
        for (dx, &kv) in row.iter().enumerate() {
            let sx = mirror(x as isize + dx as isize - 1, p.width);
            let sy = mirror(y as isize + dy as isize - 1, p.height);
            s += kv * p.data[sy * p.width + sx];
        }
    }
    s
}

fn strength_angle(p: &Plane, x: usize, y: usize) -> (f64, f64) {
    let gx = correlate3(p, &SOBEL_X, x, y);
    let gy = correlate3(p, &SOBEL_Y, x, y);
    let angle = if gx == 0.0 { PI / 2.0 } else { (gy / gx).atan() };
    (gx.hypot(gy), angle)
}

pub fn qabf(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    let (kg, sg, ka, sa) = (-10.0, 0.5, -20.0, 0.75);
    let sig = |k: f64, s: f64, v: f64| 1.0 / (1.0 + (k * (v - s)).exp());
    let q = |gs: f64, as_: f64, gf: f64, af: f64| {
        let g = if gs == 0.0 || gf == 0.0 {
            0.0
        } else if gs > gf {
            gf / gs
        } else {
            gs / gf
        };
        let ang = 1.0 - (as_ - af).abs() / (PI / 2.0);
        (sig(kg, sg, g) / sig(kg, sg, 1.0)) * (sig(ka, sa, ang) / sig(ka, sa, 1.0))
    };
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..f.height {
        for x in 0..f.width {
            let (gf, af) = strength_angle(f, x, y);
            let (ga, aa) = strength_angle(a, x, y);
            let (gb, ab) = strength_angle(b, x, y);
            num += q(ga, aa, gf, af) * ga + q(gb, ab, gf, af) * gb;
            den += ga + gb;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn ssim(x: &Plane, y: &Plane) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = window(11, 1.5);
    let (gx, gy) = (grid(x, 1.0), grid(y, 1.0));
    let mx = filter2(&gx, &k).unwrap();
    let my = filter2(&gy, &k).unwrap();
    let exx = filter2(&zip_with(&gx, &gx, |a, b| a * b), &k).unwrap();
    let eyy = filter2(&zip_with(&gy, &gy, |a, b| a * b), &k).unwrap();
    let exy = filter2(&zip_with(&gx, &gy, |a, b| a * b), &k).unwrap();
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..mx.len() {
        for j in 0..mx[0].len() {
            let (a, b) = (mx[i][j], my[i][j]);
            let vx = exx[i][j] - a * a;
            let vy = eyy[i][j] - b * b;
            let cxy = exy[i][j] - a * b;
            total += (2.0 * a * b + c1) * (2.0 * cxy + c2) / ((a * a + b * b + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

/// All eight metrics in table order.
pub fn all(f: &Plane, a: &Plane, b: &Plane) -> [f64; 8] {
    [
        entropy(f),
        std_dev(f),
        spatial_frequency(f),
        mutual_information(f, a) + mutual_information(f, b),
        scd(f, a, b),
        vif(f, a, b),
        qabf(f, a, b),
        0.5 * (ssim(f, a) + ssim(f, b)),
    ]
}
