//! Fusion quality metrics.
//!
//! Inputs are [`Plane`]s in `[0, 1]`. Conventions, fixed so the numbers are
//! reproducible:
//!
//! * Histograms use 256 uniform bins over `[0, 1]`; bin `min(floor(256 v), 255)`,
//!   so the last bin is closed on the right.
//! * **EN**: Shannon entropy of the fused histogram, in bits.
//! * **SD**: population standard deviation of the fused image on the 0-255 scale.
//! * **SF**: `sqrt(RF^2 + CF^2)` on the 0-255 scale, where RF (CF) is the root
//!   mean square of horizontal (vertical) first differences, averaged over the
//!   number of differences.
//! * **MI**: `MI(F, A) + MI(F, B)`, each `H(X) + H(Y) - H(X, Y)` in bits from a
//!   256x256 joint histogram.
//! * **SCD**: `CC(F - B, A) + CC(F - A, B)` with Pearson correlations
//!   (0 for a zero-variance operand).
//! * **VIF**: `VIFP(A, F) + VIFP(B, F)`, pixel-domain visual information
//!   fidelity over 4 scales (Gaussian windows of 17, 9, 5, 3 taps with
//!   sigma = taps / 5, valid filtering, 2x decimation between scales), noise
//!   variance 2 on the 0-255 scale. Scales whose image is smaller than the
//!   window are skipped; a zero denominator yields 0.
//! * **Qabf**: gradient preservation with Sobel edge strength `g` and
//!   orientation `atan(gy / gx)` (`pi / 2` when `gx = 0`), reflect padding.
//!   Sigmoid constants `kg = -10, sg = 0.5, ka = -20, sa = 0.75`, each sigmoid
//!   scaled so perfect preservation scores exactly 1. Weights are the source
//!   edge strengths; 0 when no source has edges.
//! * **SSIM**: mean of `SSIM(F, A)` and `SSIM(F, B)` (11x11 Gaussian window,
//!   sigma 1.5, valid windows, C1 = 0.01^2, C2 = 0.03^2).

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::losses::{gaussian_taps, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::plane::Plane;

pub const BINS: usize = 256;

pub const QABF_KG: f64 = -10.0;
pub const QABF_SG: f64 = 0.5;
pub const QABF_KA: f64 = -20.0;
pub const QABF_SA: f64 = 0.75;

pub const VIF_NOISE_VAR: f64 = 2.0;
pub const VIF_SCALES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub mi: f64,
    pub scd: f64,
    pub vif: f64,
    pub qabf: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 8] = ["EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM"];

    pub fn values(&self) -> [f64; 8] {
        [self.en, self.sd, self.sf, self.mi, self.scd, self.vif, self.qabf, self.ssim]
    }

    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let [en, sd, sf, mi, scd, vif, qabf, ssim] = acc.map(|v| v / n);
        MetricReport {
            en,
            sd,
            sf,
            mi,
            scd,
            vif,
            qabf,
            ssim,
        }
    }
}

#[inline]
pub fn quantize(v: f64, bins: usize) -> usize {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    ((v * bins as f64).floor() as usize).min(bins - 1)
}

fn entropy_of(counts: &[f64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum()
}

pub fn entropy(p: &Plane) -> f64 {
    let mut hist = vec![0.0; BINS];
    for &v in &p.data {
        hist[quantize(v, BINS)] += 1.0;
    }
    entropy_of(&hist, p.data.len() as f64)
}

pub fn std_dev(p: &Plane) -> f64 {
    let n = p.data.len() as f64;
    let mean = p.data.iter().map(|v| v * 255.0).sum::<f64>() / n;
    let var = p.data.iter().map(|v| (v * 255.0 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

pub fn spatial_frequency(p: &Plane) -> f64 {
    let (w, h) = p.dims();
    let mut row = 0.0;
    let mut n_row = 0usize;
    let mut col = 0.0;
    let mut n_col = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                row += (255.0 * (p.at(x, y) - p.at(x - 1, y))).powi(2);
                n_row += 1;
            }
            if y > 0 {
                col += (255.0 * (p.at(x, y) - p.at(x, y - 1))).powi(2);
                n_col += 1;
            }
        }
    }
    let rf2 = if n_row > 0 { row / n_row as f64 } else { 0.0 };
    let cf2 = if n_col > 0 { col / n_col as f64 } else { 0.0 };
    (rf2 + cf2).sqrt()
}

pub fn mutual_information(x: &Plane, y: &Plane, bins: usize) -> Result<f64> {
    check_dims(x, y)?;
    let bins = bins.max(1);
    let mut joint = vec![0.0; bins * bins];
    let mut hx = vec![0.0; bins];
    let mut hy = vec![0.0; bins];
    for (&a, &b) in x.data.iter().zip(&y.data) {
        let (i, j) = (quantize(a, bins), quantize(b, bins));
        joint[i * bins + j] += 1.0;
        hx[i] += 1.0;
        hy[j] += 1.0;
    }
    let n = x.data.len() as f64;
    let mi = entropy_of(&hx, n) + entropy_of(&hy, n) - entropy_of(&joint, n);
    Ok(mi.max(0.0))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

pub fn scd(fused: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    check_dims(fused, a)?;
    check_dims(fused, b)?;
    let f_minus_b: Vec<f64> = fused.data.iter().zip(&b.data).map(|(f, b)| f - b).collect();
    let f_minus_a: Vec<f64> = fused.data.iter().zip(&a.data).map(|(f, a)| f - a).collect();
    Ok(pearson(&f_minus_b, &a.data) + pearson(&f_minus_a, &b.data))
}

/// Separable "valid" correlation with the same taps along both axes.
fn filter_valid(p: &Plane, taps: &[f64]) -> Option<Plane> {
    let n = taps.len();
    let (w, h) = p.dims();
    if w < n || h < n {
        return None;
    }
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &p.data[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| taps[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    Some(Plane {
        width: ow,
        height: oh,
        data: out,
    })
}

fn decimate(p: &Plane) -> Plane {
    let (w, h) = (p.width.div_ceil(2), p.height.div_ceil(2));
    Plane::from_fn(w, h, |x, y| p.at(2 * x, 2 * y))
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

/// Pixel-domain multi-scale VIF of `dist` against `reference`.
pub fn vifp(reference: &Plane, dist: &Plane) -> Result<f64> {
    check_dims(reference, dist)?;
    let mut r = reference.map(|v| v * 255.0);
    let mut d = dist.map(|v| v * 255.0);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=VIF_SCALES {
        let n = (1usize << (VIF_SCALES + 1 - scale)) + 1;
        let taps = gaussian_taps(n, n as f64 / 5.0);
        if scale > 1 {
            match (filter_valid(&r, &taps), filter_valid(&d, &taps)) {
                (Some(fr), Some(fd)) => {
                    r = decimate(&fr);
                    d = decimate(&fd);
                }
                _ => break,
            }
        }
        let (Some(mu1), Some(mu2)) = (filter_valid(&r, &taps), filter_valid(&d, &taps)) else {
            break;
        };
        let e11 = filter_valid(&product(&r, &r), &taps).expect("same size");
        let e22 = filter_valid(&product(&d, &d), &taps).expect("same size");
        let e12 = filter_valid(&product(&r, &d), &taps).expect("same size");
        for i in 0..mu1.data.len() {
            let (m1, m2) = (mu1.data[i], mu2.data[i]);
            let mut s1 = (e11.data[i] - m1 * m1).max(0.0);
            let s2 = (e22.data[i] - m2 * m2).max(0.0);
            let s12 = e12.data[i] - m1 * m2;
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
            if sv <= 1e-10 {
                sv = 1e-10;
            }
            num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + s1 / VIF_NOISE_VAR).log10();
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

pub fn vif(fused: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    Ok(vifp(a, fused)? + vifp(b, fused)?)
}

/// Sobel responses with reflect padding: `(gx, gy)`.
fn sobel_xy(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (p.width as isize, p.height as isize);
    let reflect = |i: isize, n: isize| -> usize {
        if n == 1 {
            0
        } else if i < 0 {
            (-i) as usize
        } else if i >= n {
            (2 * n - 2 - i) as usize
        } else {
            i as usize
        }
    };
    let px = |x: isize, y: isize| p.at(reflect(x, w), reflect(y, h));
    let mut gx = Vec::with_capacity(p.data.len());
    let mut gy = Vec::with_capacity(p.data.len());
    for y in 0..h {
        for x in 0..w {
            gx.push(
                (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                    - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1)),
            );
            gy.push(
                (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                    - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1)),
            );
        }
    }
    (gx, gy)
}

fn edge_strength_orientation(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (gx, gy) = sobel_xy(p);
    let g = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let a = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| if x == 0.0 { FRAC_PI_2 } else { (y / x).atan() })
        .collect();
    (g, a)
}

fn edge_preservation(g_src: &[f64], a_src: &[f64], g_f: &[f64], a_f: &[f64]) -> Vec<f64> {
    let gamma_g = 1.0 + (QABF_KG * (1.0 - QABF_SG)).exp();
    let gamma_a = 1.0 + (QABF_KA * (1.0 - QABF_SA)).exp();
    (0..g_src.len())
        .map(|i| {
            let (gs, gf) = (g_src[i], g_f[i]);
            let rel_g = if gs == 0.0 || gf == 0.0 { 0.0 } else { gs.min(gf) / gs.max(gf) };
            let rel_a = 1.0 - (a_src[i] - a_f[i]).abs() / FRAC_PI_2;
            let qg = gamma_g / (1.0 + (QABF_KG * (rel_g - QABF_SG)).exp());
            let qa = gamma_a / (1.0 + (QABF_KA * (rel_a - QABF_SA)).exp());
            qg * qa
        })
        .collect()
}

pub fn qabf(fused: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    check_dims(fused, a)?;
    check_dims(fused, b)?;
    let (ga, aa) = edge_strength_orientation(a);
    let (gb, ab) = edge_strength_orientation(b);
    let (gf, af) = edge_strength_orientation(fused);
    let qa = edge_preservation(&ga, &aa, &gf, &af);
    let qb = edge_preservation(&gb, &ab, &gf, &af);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..ga.len() {
        num += qa[i] * ga[i] + qb[i] * gb[i];
        den += ga[i] + gb[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Mean SSIM over valid windows.
pub fn ssim(x: &Plane, y: &Plane) -> Result<f64> {
    check_dims(x, y)?;
    if x.width < SSIM_WINDOW || x.height < SSIM_WINDOW {
        return Err(FuseError::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            x.width, x.height
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let f = |p: &Plane| filter_valid(p, &taps).expect("checked size");
    let (mx, my) = (f(x), f(y));
    let (exx, eyy, exy) = (f(&product(x, x)), f(&product(y, y)), f(&product(x, y)));
    let n = mx.data.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (mx.data[i], my.data[i]);
            let sx = exx.data[i] - a * a;
            let sy = eyy.data[i] - b * b;
            let sxy = exy.data[i] - a * b;
            ((2.0 * a * b + SSIM_C1) * (2.0 * sxy + SSIM_C2)) / ((a * a + b * b + SSIM_C1) * (sx + sy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

fn check_dims(a: &Plane, b: &Plane) -> Result<()> {
    if !a.same_dims(b) {
        return Err(FuseError::shape(format!(
            "images differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn evaluate_fusion(fused: &Plane, a: &Plane, b: &Plane) -> Result<MetricReport> {
    check_dims(fused, a)?;
    check_dims(fused, b)?;
    Ok(MetricReport {
        en: entropy(fused),
        sd: std_dev(fused),
        sf: spatial_frequency(fused),
        mi: mutual_information(fused, a, BINS)? + mutual_information(fused, b, BINS)?,
        scd: scd(fused, a, b)?,
        vif: vif(fused, a, b)?,
        qabf: qabf(fused, a, b)?,
        ssim: 0.5 * (ssim(fused, a)? + ssim(fused, b)?),
    })
}

/// Per-image reports plus the corpus mean.
#[derive(Debug, Clone, Default)]
pub struct MetricTable {
    pub rows: Vec<(String, MetricReport)>,
}

impl MetricTable {
    pub fn push(&mut self, name: impl Into<String>, report: MetricReport) {
        self.rows.push((name.into(), report));
    }

    pub fn mean(&self) -> MetricReport {
        let reports: Vec<_> = self.rows.iter().map(|(_, r)| *r).collect();
        MetricReport::mean(&reports)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| FuseError::Data(format!("csv: {e}"));
        let mut header = vec!["image".to_string()];
        header.extend(MetricReport::COLUMNS.iter().map(|c| c.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        let mean = ("mean".to_string(), self.mean());
        for (name, r) in self.rows.iter().chain(std::iter::once(&mean)) {
            let mut rec = vec![name.clone()];
            rec.extend(r.values().iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| FuseError::Data(format!("csv: {e}")))?;
        Ok(())
    }

    /// Aligned text table, one row per image plus the mean.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|(n, _)| n.len())
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        let mut s = format!("{:<width$}", "image");
        for c in MetricReport::COLUMNS {
            s.push_str(&format!(" {c:>9}"));
        }
        s.push('\n');
        let mean = ("mean".to_string(), self.mean());
        for (name, r) in self.rows.iter().chain(std::iter::once(&mean)) {
            s.push_str(&format!("{name:<width$}"));
            for v in r.values() {
                s.push_str(&format!(" {v:>9.4}"));
            }
            s.push('\n');
        }
        s.push_str("SSIM is the mean of SSIM(F, A) and SSIM(F, B).\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(seed: u64, w: usize, h: usize) -> Plane {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn constant_image_degenerate_metrics() {
        let c = Plane::filled(16, 16, 0.37);
        assert_eq!(entropy(&c), 0.0);
        assert!(std_dev(&c) < 1e-9);
        assert_eq!(spatial_frequency(&c), 0.0);
    }

    #[test]
    fn uniform_levels_have_eight_bits() {
        let p = Plane::from_fn(16, 16, |x, y| (y * 16 + x) as f64 / 255.0);
        assert!((entropy(&p) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_spatial_frequency() {
        let p = Plane::from_fn(8, 8, |x, y| ((x + y) % 2) as f64);
        assert!((spatial_frequency(&p) / 255.0 - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_identities() {
        let x = noise(1, 32, 32);
        let en = entropy(&x);
        assert!((mutual_information(&x, &x, BINS).unwrap() - en).abs() < 1e-9);
        let inv = Plane::from_fn(32, 32, |i, j| (255.0 - (x.at(i, j) * 255.0).floor()) / 255.0);
        let xq = Plane::from_fn(32, 32, |i, j| (x.at(i, j) * 255.0).floor() / 255.0);
        assert!((mutual_information(&xq, &inv, BINS).unwrap() - entropy(&xq)).abs() < 1e-9);
    }

    #[test]
    fn scd_of_orthogonal_sum_is_two() {
        // zero-mean, orthogonal patterns
        let a = Plane::from_fn(8, 8, |x, _| if x % 2 == 0 { 1.0 } else { -1.0 });
        let b = Plane::from_fn(8, 8, |_, y| if y % 2 == 0 { 1.0 } else { -1.0 });
        let f = Plane::from_fn(8, 8, |x, y| a.at(x, y) + b.at(x, y));
        assert!((scd(&f, &a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn qabf_perfect_transfer() {
        let x = noise(2, 24, 24);
        assert!((qabf(&x, &x, &x).unwrap() - 1.0).abs() < 1e-3);
        let flat = Plane::filled(8, 8, 0.5);
        assert_eq!(qabf(&flat, &flat, &flat).unwrap(), 0.0);
        let q = qabf(&flat, &x.crop(0, 0, 8, 8).unwrap(), &x.crop(8, 8, 8, 8).unwrap()).unwrap();
        assert!((0.0..=1.0).contains(&q));
    }

    #[test]
    fn ssim_and_vif_of_identical_images() {
        let x = noise(3, 40, 40);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((vifp(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim(&Plane::filled(8, 8, 0.0), &Plane::filled(8, 8, 0.0)).is_err());
    }

    #[test]
    fn metric_ssim_agrees_with_loss_ssim() {
        use candle_core::DType;
        let x = noise(4, 20, 18);
        let y = noise(5, 20, 18);
        let via_tensor = crate::losses::ssim_index(&x.to_tensor(DType::F64).unwrap(), &y.to_tensor(DType::F64).unwrap()).unwrap();
        let via_tensor = crate::losses::scalar(&via_tensor).unwrap();
        assert!((via_tensor - ssim(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_ranges_and_mismatch() {
        let (f, a, b) = (noise(6, 32, 32), noise(7, 32, 32), noise(8, 32, 32));
        let r = evaluate_fusion(&f, &a, &b).unwrap();
        assert!((0.0..=8.0).contains(&r.en));
        assert!((0.0..=1.0).contains(&r.qabf));
        assert!(r.ssim > -1.0 && r.ssim <= 1.0);
        assert!(evaluate_fusion(&f, &a, &noise(9, 31, 32)).is_err());
    }

    #[test]
    fn table_emits_all_columns() {
        let mut t = MetricTable::default();
        let (f, a, b) = (noise(10, 16, 16), noise(11, 16, 16), noise(12, 16, 16));
        t.push("x.png", evaluate_fusion(&f, &a, &b).unwrap());
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "image,EN,SD,SF,MI,SCD,VIF,Qabf,SSIM");
        assert!(lines.next().unwrap().starts_with("x.png,"));
        assert!(lines.next().unwrap().starts_with("mean,"));
        assert!(t.to_text().contains("Qabf"));
    }
}
