//! Chebyshev Type II bandpass filter bank and the multi-view transform.
//!
//! Filters are designed as analog lowpass prototypes, transformed to
//! bandpass, discretized with the bilinear transform (frequency
//! prewarping), and realized as cascaded second-order sections. The
//! default bank covers 4-40 Hz in nine non-overlapping 4 Hz bands with a
//! 2 Hz transition width and 30 dB stopband attenuation.
//!
//! Order selection finds the minimum analog-prototype order meeting the
//! stopband spec with a 3 dB passband bound, then places the critical
//! frequencies at the geometric midpoint between the passband-binding and
//! stopband-binding positions, so the rounded-up order's surplus turns
//! into margin on both specs.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Bandpass design specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub pass_low_hz: f64,
    pub pass_high_hz: f64,
    pub transition_hz: f64,
    pub stop_atten_db: f64,
    /// Passband deviation bound used for order selection.
    pub passband_ripple_db: f64,
    pub sample_rate_hz: f64,
}

impl BandSpec {
    pub fn new(pass_low_hz: f64, pass_high_hz: f64, sample_rate_hz: f64) -> BandSpec {
        BandSpec {
            pass_low_hz,
            pass_high_hz,
            transition_hz: 2.0,
            stop_atten_db: 30.0,
            passband_ripple_db: 3.0,
            sample_rate_hz,
        }
    }

    pub fn stop_low_hz(&self) -> f64 {
        self.pass_low_hz - self.transition_hz
    }

    pub fn stop_high_hz(&self) -> f64 {
        self.pass_high_hz + self.transition_hz
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::FilterDesign("sample rate must be positive".into()));
        }
        if !(0.0 < self.pass_low_hz && self.pass_low_hz < self.pass_high_hz && self.pass_high_hz < nyquist) {
            return Err(Error::FilterDesign(format!(
                "passband {}-{} Hz invalid for nyquist {} Hz",
                self.pass_low_hz, self.pass_high_hz, nyquist
            )));
        }
        if self.stop_low_hz() <= 0.0 {
            return Err(Error::FilterDesign(format!(
                "lower stopband edge {} Hz <= 0",
                self.stop_low_hz()
            )));
        }
        if self.stop_high_hz() >= nyquist {
            return Err(Error::FilterDesign(format!(
                "upper stopband edge {} Hz >= nyquist {} Hz",
                self.stop_high_hz(),
                nyquist
            )));
        }
        if !(self.stop_atten_db > 0.0) || !(self.passband_ripple_db > 0.0) {
            return Err(Error::FilterDesign(
                "attenuation and ripple bounds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One second-order section: `b0 + b1 z^-1 + b2 z^-2` over
/// `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Section {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    fn poles(&self) -> [Complex64; 2] {
        roots_of_monic_quadratic(self.a[0], self.a[1])
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = Complex64::new(self.b[0], 0.0) + z_inv * (self.b[1] + z_inv * self.b[2]);
        let den = Complex64::new(1.0, 0.0) + z_inv * (self.a[0] + z_inv * self.a[1]);
        num / den
    }
}

/// Roots of z^2 + c1 z + c0.
fn roots_of_monic_quadratic(c1: f64, c0: f64) -> [Complex64; 2] {
    let disc = Complex64::new(c1 * c1 - 4.0 * c0, 0.0).sqrt();
    let c1 = Complex64::new(c1, 0.0);
    [(-c1 + disc) / 2.0, (-c1 - disc) / 2.0]
}

/// A designed bandpass filter as cascaded second-order sections.
#[derive(Debug, Clone)]
pub struct SosFilter {
    pub sections: Vec<Section>,
    pub band: BandSpec,
    /// Order of the analog lowpass prototype.
    pub prototype_order: usize,
    /// Order of the digital bandpass (pole count).
    pub digital_order: usize,
}

/// Filtering direction mode for [`SosFilter::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Forward-backward filtering with reflected edge padding; zero group
    /// delay. Default.
    ZeroPhase,
    /// Single causal pass from zero initial state.
    Causal,
}

impl Default for FilterMode {
    fn default() -> Self {
        FilterMode::ZeroPhase
    }
}

// ---------------------------------------------------------------------------
// Design
// ---------------------------------------------------------------------------

/// Prewarped analog frequency for the bilinear transform.
fn prewarp(f_hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f_hz / fs).tan()
}

/// Chebyshev Type II analog lowpass prototype with stopband edge at 1
/// rad/s, as zeros/poles/gain.
fn cheb2_prototype(n: usize, rs_db: f64) -> (Vec<Complex64>, Vec<Complex64>, f64) {
    let de = 1.0 / (10f64.powf(0.1 * rs_db) - 1.0).sqrt();
    let mu = (1.0 / de).asinh() / n as f64;

    let mut zeros = Vec::new();
    let mut k_vals: Vec<i64> = Vec::new();
    if n % 2 == 1 {
        let mut m = -(n as i64) + 1;
        while m < 0 {
            k_vals.push(m);
            m += 2;
        }
        let mut m = 2i64;
        while m < n as i64 {
            k_vals.push(m);
            m += 2;
        }
    } else {
        let mut m = -(n as i64) + 1;
        while m < n as i64 {
            k_vals.push(m);
            m += 2;
        }
    }
    for &m in &k_vals {
        let s = (m as f64 * PI / (2.0 * n as f64)).sin();
        zeros.push(-(Complex64::new(0.0, 1.0) / s).conj());
    }

    let mut poles = Vec::new();
    let mut m = -(n as i64) + 1;
    while m < n as i64 {
        let p = -(Complex64::new(0.0, 1.0) * PI * m as f64 / (2.0 * n as f64)).exp();
        let p = Complex64::new(mu.sinh() * p.re, mu.cosh() * p.im);
        poles.push(1.0 / p);
        m += 2;
    }

    let num: Complex64 = poles.iter().map(|p| -p).product();
    let den: Complex64 = zeros.iter().map(|z| -z).product();
    let k = (num / den).re;
    (zeros, poles, k)
}

/// Lowpass prototype -> bandpass, by center frequency and bandwidth.
fn lp_to_bp(
    zeros: &[Complex64],
    poles: &[Complex64],
    k: f64,
    wo: f64,
    bw: f64,
) -> (Vec<Complex64>, Vec<Complex64>, f64) {
    let degree = poles.len() - zeros.len();
    let transform = |r: &Complex64| {
        let scaled = r * (bw / 2.0);
        let root = (scaled * scaled - Complex64::new(wo * wo, 0.0)).sqrt();
        (scaled + root, scaled - root)
    };
    let mut z_bp = Vec::with_capacity(2 * zeros.len() + degree);
    for z in zeros {
        let (a, b) = transform(z);
        z_bp.push(a);
        z_bp.push(b);
    }
    let mut p_bp = Vec::with_capacity(2 * poles.len());
    for p in poles {
        let (a, b) = transform(p);
        p_bp.push(a);
        p_bp.push(b);
    }
    for _ in 0..degree {
        z_bp.push(Complex64::new(0.0, 0.0));
    }
    (z_bp, p_bp, k * bw.powi(degree as i32))
}

/// Analog -> digital via the bilinear transform.
fn bilinear(
    zeros: &[Complex64],
    poles: &[Complex64],
    k: f64,
    fs: f64,
) -> (Vec<Complex64>, Vec<Complex64>, f64) {
    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let degree = poles.len() - zeros.len();
    let z_d: Vec<Complex64> = zeros.iter().map(|z| (fs2 + z) / (fs2 - z)).collect();
    let mut z_d = z_d;
    let p_d: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let num: Complex64 = zeros.iter().map(|z| fs2 - z).product();
    let den: Complex64 = poles.iter().map(|p| fs2 - p).product();
    let k_d = k * (num / den).re;
    for _ in 0..degree {
        z_d.push(Complex64::new(-1.0, 0.0));
    }
    (z_d, p_d, k_d)
}

/// Group roots into conjugate pairs (plus pairs of reals), each pair
/// represented by its two members.
fn pair_roots(roots: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    let tol = 1e-8;
    let mut complex_pos: Vec<Complex64> = Vec::new();
    let mut reals: Vec<f64> = Vec::new();
    for r in roots {
        if r.im.abs() > tol * (1.0 + r.re.abs()) {
            if r.im > 0.0 {
                complex_pos.push(*r);
            }
        } else {
            reals.push(r.re);
        }
    }
    complex_pos.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    reals.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut pairs: Vec<(Complex64, Complex64)> =
        complex_pos.iter().map(|z| (*z, z.conj())).collect();
    let mut i = 0;
    while i + 1 < reals.len() {
        pairs.push((
            Complex64::new(reals[i], 0.0),
            Complex64::new(reals[i + 1], 0.0),
        ));
        i += 2;
    }
    pairs
}

/// Combine paired zeros and poles into second-order sections. Pole pairs
/// closest to the unit circle are matched with their nearest zero pairs;
/// the overall gain lands on the first section.
fn zpk_to_sos(zeros: &[Complex64], poles: &[Complex64], k: f64) -> Vec<Section> {
    let mut zero_pairs = pair_roots(zeros);
    let mut pole_pairs = pair_roots(poles);
    pole_pairs.sort_by(|a, b| b.0.norm().partial_cmp(&a.0.norm()).unwrap());

    let mut sections = Vec::with_capacity(pole_pairs.len());
    for (p1, p2) in pole_pairs {
        let idx = zero_pairs
            .iter()
            .enumerate()
            .min_by(|(_, z), (_, w)| {
                let dz = (z.0 - p1).norm();
                let dw = (w.0 - p1).norm();
                dz.partial_cmp(&dw).unwrap()
            })
            .map(|(i, _)| i);
        let (z1, z2) = match idx {
            Some(i) => zero_pairs.remove(i),
            None => (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)),
        };
        let b = [1.0, -(z1 + z2).re, (z1 * z2).re];
        let a = [-(p1 + p2).re, (p1 * p2).re];
        sections.push(Section { b, a });
    }
    if let Some(first) = sections.first_mut() {
        for c in &mut first.b {
            *c *= k;
        }
    }
    sections
}

/// Design a minimum-order Chebyshev Type II bandpass filter meeting the
/// given spec, realized as second-order sections.
pub fn design_cheby2_bandpass(spec: &BandSpec) -> Result<SosFilter> {
    spec.validate()?;
    let fs = spec.sample_rate_hz;
    let wp1 = prewarp(spec.pass_low_hz, fs);
    let wp2 = prewarp(spec.pass_high_hz, fs);
    let ws1 = prewarp(spec.stop_low_hz(), fs);
    let ws2 = prewarp(spec.stop_high_hz(), fs);
    let bw = wp2 - wp1;
    let wo_sq = wp1 * wp2;

    // Prototype-domain frequency of each stopband edge, with the passband
    // edge normalized to 1.
    let proto_ratio = |ws: f64| ((ws * ws - wo_sq) / (ws * bw)).abs();
    let ratio_spec = proto_ratio(ws1).min(proto_ratio(ws2));
    if ratio_spec <= 1.0 {
        return Err(Error::FilterDesign(format!(
            "stopband edges too close to passband (selectivity ratio {ratio_spec:.4} <= 1)"
        )));
    }

    let g_stop = 10f64.powf(0.1 * spec.stop_atten_db);
    let g_pass = 10f64.powf(0.1 * spec.passband_ripple_db);
    let discr = ((g_stop - 1.0) / (g_pass - 1.0)).sqrt();
    let n = (discr.acosh() / ratio_spec.acosh()).ceil() as usize;
    if n == 0 || n > 50 {
        return Err(Error::FilterDesign(format!(
            "infeasible spec: prototype order {n}"
        )));
    }

    // Ratio at which order n meets both specs exactly; placing the design
    // between it and the spec's own ratio gives margin on both sides.
    let ratio_binding = (discr.acosh() / n as f64).cosh();
    let ratio_design = (ratio_binding * ratio_spec).sqrt();

    // Map the design ratio back to a geometrically symmetric stopband pair.
    let ws_high = ratio_design * bw / 2.0 + (ratio_design * ratio_design * bw * bw / 4.0 + wo_sq).sqrt();
    let ws_low = wo_sq / ws_high;

    let (z, p, k) = cheb2_prototype(n, spec.stop_atten_db);
    let (z, p, k) = lp_to_bp(&z, &p, k, (ws_low * ws_high).sqrt(), ws_high - ws_low);
    let (z, p, k) = bilinear(&z, &p, k, fs);
    let sections = zpk_to_sos(&z, &p, k);

    let filter = SosFilter {
        sections,
        band: spec.clone(),
        prototype_order: n,
        digital_order: 2 * n,
    };
    if !filter.is_stable(1e-9) {
        return Err(Error::FilterDesign(format!(
            "designed filter unstable for band {}-{} Hz",
            spec.pass_low_hz, spec.pass_high_hz
        )));
    }
    Ok(filter)
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

impl SosFilter {
    /// Magnitude of all pole locations; stable when all are inside the
    /// unit circle by at least `margin`.
    pub fn pole_magnitudes(&self) -> Vec<f64> {
        self.sections
            .iter()
            .flat_map(|s| s.poles().into_iter().map(|p| p.norm()))
            .collect()
    }

    pub fn is_stable(&self, margin: f64) -> bool {
        self.pole_magnitudes().iter().all(|&m| m < 1.0 - margin)
    }

    /// Complex frequency response at `f_hz`.
    pub fn response_at(&self, f_hz: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / self.band.sample_rate_hz;
        let z_inv = Complex64::new(0.0, -w).exp();
        self.sections
            .iter()
            .map(|s| s.response(z_inv))
            .product()
    }

    /// Magnitude response in dB at `f_hz`.
    pub fn magnitude_db(&self, f_hz: f64) -> f64 {
        20.0 * self.response_at(f_hz).norm().max(1e-300).log10()
    }

    /// Single causal pass, zero initial state (direct form II transposed).
    pub fn filter_causal(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for v in y.iter_mut() {
                let xn = *v;
                let yn = s.b[0] * xn + s1;
                s1 = s.b[1] * xn - s.a[0] * yn + s2;
                s2 = s.b[2] * xn - s.a[1] * yn;
                *v = yn;
            }
        }
        y
    }

    /// Per-section steady-state initial conditions for a constant input of
    /// amplitude `x0`.
    fn steady_state_zi(&self, x0: f64) -> Vec<[f64; 2]> {
        let mut zi = Vec::with_capacity(self.sections.len());
        let mut scale = x0;
        for s in &self.sections {
            let g = s.dc_gain();
            zi.push([
                scale * (s.b[1] + s.b[2] - (s.a[0] + s.a[1]) * g),
                scale * (s.b[2] - s.a[1] * g),
            ]);
            scale *= g;
        }
        zi
    }

    fn filter_with_zi(&self, x: &mut [f64], zi: &[[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(zi) {
            let mut s1 = z[0];
            let mut s2 = z[1];
            for v in x.iter_mut() {
                let xn = *v;
                let yn = s.b[0] * xn + s1;
                s1 = s.b[1] * xn - s.a[0] * yn + s2;
                s2 = s.b[2] * xn - s.a[1] * yn;
                *v = yn;
            }
        }
    }

    /// Zero-phase filtering: reflect-pad by 3x the digital order, run the
    /// cascade forward, reverse, run forward again, reverse, and strip the
    /// padding. Each pass starts from steady-state initial conditions
    /// matched to its first sample.
    pub fn filter_zero_phase(&self, x: &[f64]) -> Result<Vec<f64>> {
        let padlen = 3 * self.digital_order;
        if x.len() <= padlen {
            return Err(Error::SignalTooShort {
                len: x.len(),
                min: padlen + 1,
            });
        }
        let t = x.len();
        let mut ext = Vec::with_capacity(t + 2 * padlen);
        for i in 0..padlen {
            ext.push(2.0 * x[0] - x[padlen - i]);
        }
        ext.extend_from_slice(x);
        for i in 0..padlen {
            ext.push(2.0 * x[t - 1] - x[t - 2 - i]);
        }

        let zi = self.steady_state_zi(ext[0]);
        self.filter_with_zi(&mut ext, &zi);
        ext.reverse();
        let zi = self.steady_state_zi(ext[0]);
        self.filter_with_zi(&mut ext, &zi);
        ext.reverse();

        Ok(ext[padlen..padlen + t].to_vec())
    }

    /// Filter one series in the requested mode; output length equals input
    /// length.
    pub fn apply(&self, x: &[f64], mode: FilterMode) -> Result<Vec<f64>> {
        match mode {
            FilterMode::ZeroPhase => self.filter_zero_phase(x),
            FilterMode::Causal => Ok(self.filter_causal(x)),
        }
    }

    /// Coefficient table: one section per line, six floats
    /// (b0 b1 b2 a0 a1 a2) with a0 = 1.
    pub fn coefficient_table(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            out.push_str(&format!(
                "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
                s.b[0], s.b[1], s.b[2], 1.0, s.a[0], s.a[1]
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Filter bank
// ---------------------------------------------------------------------------

/// Ordered set of bandpass filters producing the multi-view representation.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub filters: Vec<SosFilter>,
}

/// The default band edges: nine non-overlapping 4 Hz bands from 4 to 40 Hz.
pub fn default_band_edges() -> Vec<(f64, f64)> {
    (0..9).map(|i| (4.0 + 4.0 * i as f64, 8.0 + 4.0 * i as f64)).collect()
}

impl FilterBank {
    /// Design a bank from band edges; edges must be sorted ascending and
    /// non-overlapping.
    pub fn design(
        edges: &[(f64, f64)],
        transition_hz: f64,
        stop_atten_db: f64,
        passband_ripple_db: f64,
        sample_rate_hz: f64,
    ) -> Result<FilterBank> {
        if edges.is_empty() {
            return Err(Error::FilterDesign("empty band list".into()));
        }
        for w in edges.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::FilterDesign(format!(
                    "bands {:?} and {:?} overlap or are out of order",
                    w[0], w[1]
                )));
            }
        }
        let filters = edges
            .iter()
            .map(|&(lo, hi)| {
                design_cheby2_bandpass(&BandSpec {
                    pass_low_hz: lo,
                    pass_high_hz: hi,
                    transition_hz,
                    stop_atten_db,
                    passband_ripple_db,
                    sample_rate_hz,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FilterBank { filters })
    }

    /// The nine-band default at the given sampling rate.
    pub fn default_bank(sample_rate_hz: f64) -> Result<FilterBank> {
        FilterBank::design(&default_band_edges(), 2.0, 30.0, 3.0, sample_rate_hz)
    }

    pub fn n_bands(&self) -> usize {
        self.filters.len()
    }

    /// Filter every channel of a (C, T) trial with every band filter,
    /// producing the (N_b, C, T) multi-view buffer in row-major order.
    pub fn multi_view(&self, x: &[f64], channels: usize, samples: usize, mode: FilterMode) -> Result<Vec<f64>> {
        assert_eq!(x.len(), channels * samples);
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "trial sample {} (channel {}, t {})",
                pos,
                pos / samples,
                pos % samples
            )));
        }
        let mut out = vec![0.0; self.n_bands() * channels * samples];
        for (b, filt) in self.filters.iter().enumerate() {
            for c in 0..channels {
                let row = &x[c * samples..(c + 1) * samples];
                let filtered = filt.apply(row, mode)?;
                let dst = (b * channels + c) * samples;
                out[dst..dst + samples].copy_from_slice(&filtered);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn band_8_12() -> SosFilter {
        design_cheby2_bandpass(&BandSpec::new(8.0, 12.0, 250.0)).unwrap()
    }

    #[test]
    fn stopband_edges_attenuated_at_least_30_db() {
        let f = band_8_12();
        assert!(f.magnitude_db(6.0) <= -30.0, "{}", f.magnitude_db(6.0));
        assert!(f.magnitude_db(14.0) <= -30.0, "{}", f.magnitude_db(14.0));
    }

    #[test]
    fn passband_center_within_3_db() {
        let f = band_8_12();
        assert!(f.magnitude_db(10.0) >= -3.0, "{}", f.magnitude_db(10.0));
    }

    #[test]
    fn infeasible_stopband_edge_is_rejected() {
        let spec = BandSpec::new(1.0, 5.0, 250.0);
        assert!(matches!(
            design_cheby2_bandpass(&spec),
            Err(Error::FilterDesign(_))
        ));
    }

    #[test]
    fn all_default_bands_meet_spec_on_dense_grid() {
        let bank = FilterBank::default_bank(250.0).unwrap();
        assert_eq!(bank.n_bands(), 9);
        for f in &bank.filters {
            assert!(f.is_stable(1e-9));
            let spec = &f.band;
            // Grid over the whole axis plus exact checks at the edges.
            for i in 0..4096 {
                let freq = 125.0 * i as f64 / 4095.0;
                let mag = f.magnitude_db(freq);
                if freq <= spec.stop_low_hz() || freq >= spec.stop_high_hz() {
                    assert!(
                        mag <= -30.0 + 1e-6,
                        "band {:?} leaks {mag:.2} dB at {freq:.3} Hz",
                        (spec.pass_low_hz, spec.pass_high_hz)
                    );
                }
                if freq >= spec.pass_low_hz && freq <= spec.pass_high_hz {
                    assert!(
                        mag >= -3.0 - 1e-6,
                        "band {:?} sags {mag:.2} dB at {freq:.3} Hz",
                        (spec.pass_low_hz, spec.pass_high_hz)
                    );
                }
            }
        }
    }

    #[test]
    fn dc_is_rejected_in_zero_phase_mode() {
        let bank = FilterBank::default_bank(250.0).unwrap();
        let x = vec![1.0; 1000];
        for f in &bank.filters {
            let y = f.filter_zero_phase(&x).unwrap();
            let max = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max <= 10f64.powf(-30.0 / 20.0), "max {max}");
        }
    }

    #[test]
    fn sine_in_passband_keeps_rms_within_3_db() {
        let f = band_8_12();
        let fs = 250.0;
        let t = 1000;
        let x: Vec<f64> = (0..t)
            .map(|i| (2.0 * PI * 10.0 * i as f64 / fs).sin())
            .collect();
        let y = f.filter_zero_phase(&x).unwrap();
        let edge = 250; // discard 1 s per edge
        let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
        let rin = rms(&x[edge..t - edge]);
        let rout = rms(&y[edge..t - edge]);
        let ratio_db = 20.0 * (rout / rin).log10();
        assert!(ratio_db.abs() <= 3.0, "rms ratio {ratio_db} dB");
    }

    #[test]
    fn zeros_map_to_zeros() {
        let f = band_8_12();
        let y = f.filter_zero_phase(&vec![0.0; 500]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_signal_is_rejected_in_zero_phase_mode() {
        let f = band_8_12();
        let n = 3 * f.digital_order; // need strictly more than the padding
        let err = f.filter_zero_phase(&vec![0.0; n]).unwrap_err();
        assert!(matches!(err, Error::SignalTooShort { .. }));
    }

    #[test]
    fn zero_phase_peak_correlation_at_lag_zero() {
        let f = band_8_12();
        let fs = 250.0;
        let t = 1000usize;
        let x: Vec<f64> = (0..t)
            .map(|i| (2.0 * PI * 10.0 * i as f64 / fs).sin())
            .collect();
        let y = f.filter_zero_phase(&x).unwrap();
        let corr = |lag: i64| -> f64 {
            let mut s = 0.0;
            for i in 300..700i64 {
                s += x[i as usize] * y[(i + lag) as usize];
            }
            s
        };
        let c0 = corr(0);
        for lag in -12..=12i64 {
            if lag != 0 {
                assert!(corr(lag) <= c0 + 1e-12, "lag {lag} beats lag 0");
            }
        }
    }

    #[test]
    fn multiview_shape_and_energy_split() {
        let bank = FilterBank::default_bank(250.0).unwrap();
        let c = 3usize;
        let t = 1000usize;
        let fs = 250.0;
        let mut x = vec![0.0; c * t];
        for i in 0..t {
            let ti = i as f64 / fs;
            x[i] = (2.0 * PI * 10.0 * ti).sin() + (2.0 * PI * 30.0 * ti).sin();
        }
        let mv = bank.multi_view(&x, c, t, FilterMode::ZeroPhase).unwrap();
        assert_eq!(mv.len(), 9 * c * t);

        let edge = 125;
        let band_rms = |b: usize| {
            let row = &mv[(b * c) * t..(b * c) * t + t];
            let seg = &row[edge..t - edge];
            (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt()
        };
        let r_mu = band_rms(1); // 8-12 Hz
        let r_beta = band_rms(6); // 28-32 Hz
        for b in 0..9 {
            if b != 1 && b != 6 {
                let r = band_rms(b);
                assert!(r <= 0.05 * r_mu, "band {b} rms {r} vs mu {r_mu}");
                assert!(r <= 0.05 * r_beta, "band {b} rms {r} vs beta {r_beta}");
            }
        }
    }

    #[test]
    fn multiview_rejects_non_finite() {
        let bank = FilterBank::default_bank(250.0).unwrap();
        let mut x = vec![0.0; 2 * 500];
        x[600] = f64::NAN;
        assert!(matches!(
            bank.multi_view(&x, 2, 500, FilterMode::ZeroPhase),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn multiview_of_zeros_is_zeros() {
        let bank = FilterBank::default_bank(250.0).unwrap();
        let mv = bank
            .multi_view(&vec![0.0; 2 * 400], 2, 400, FilterMode::ZeroPhase)
            .unwrap();
        assert!(mv.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_mode_settles_to_stopband_level_on_dc() {
        let f = band_8_12();
        let y = f.filter_causal(&vec![1.0; 2000]);
        let tail = &y[1500..];
        let max = tail.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 10f64.powf(-30.0 / 20.0), "tail max {max}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn prop_multiview_is_linear(
            seed_a in 0u64..1000,
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            use rand::{Rng, SeedableRng};
            let bank = FilterBank::design(&[(8.0, 12.0)], 2.0, 30.0, 3.0, 250.0).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed_a);
            let t = 300usize;
            let x: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();

            let fx = bank.multi_view(&x, 1, t, FilterMode::ZeroPhase).unwrap();
            let fy = bank.multi_view(&y, 1, t, FilterMode::ZeroPhase).unwrap();
            let fc = bank.multi_view(&combo, 1, t, FilterMode::ZeroPhase).unwrap();
            for i in 0..fc.len() {
                let expect = alpha * fx[i] + beta * fy[i];
                prop_assert!((fc[i] - expect).abs() < 1e-9,
                    "index {i}: {} vs {}", fc[i], expect);
            }
        }
    }
}
