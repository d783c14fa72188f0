//! Linear point-scatterer forward model for row-column apertures with
//! per-column bias polarity.
//!
//! Each sub-element is an omnidirectional point with `1/d` spreading. For
//! event `e`, receive column `r` and scatterer `s` the record accumulates
//!
//! ```text
//! sum_{i,j} sum_{i'} apod[i] * txb[j] * rxb[r] * a_s / (d_ij * d_i'r)
//!     * g(t - tau_i - (d_ij + d_i'r) / c)
//! ```
//!
//! Synthesis runs in the frequency domain so that delays are exact (no
//! sample rounding). The transmit and receive sums factor per bin:
//! `Y = rxb * G * R_r * T_e` with `R_r = sum_i A_ir` and
//! `T_e = u_e^T A txb_e`, `A_ij = exp(-i w d_ij / c) / d_ij`, which keeps the
//! cost at `O(n^2)` per scatterer and bin instead of `O(n^4)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::array::ArrayConfig;
use crate::channel::ChannelData;
use crate::error::{check_shape, domain, Result};
use crate::phantoms::{Phantom, Scatterer};
use crate::sequences::{Orientation, Sequence, TransmitEvent};

/// Gaussian-modulated cosine excitation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    pub center_freq_hz: f64,
    pub frac_bandwidth: f64,
}

/// Envelope widths kept on either side of a pulse.
const SUPPORT_SIGMAS: f64 = 6.0;
/// Spectral half-width (in spectral sigmas) kept during synthesis; the
/// Gaussian tail beyond it is below 1e-12 of the peak.
const BAND_SIGMAS: f64 = 7.5;
/// Phasor recurrences are reseeded from exact values at this interval.
const RESEED_EVERY: usize = 32;
/// Scatterers per deterministic accumulation chunk.
const CHUNK: usize = 64;

impl Pulse {
    pub fn new(center_freq_hz: f64, frac_bandwidth: f64) -> Self {
        Self {
            center_freq_hz,
            frac_bandwidth,
        }
    }

    pub fn from_config(cfg: &ArrayConfig) -> Self {
        Self::new(cfg.center_freq_hz, cfg.frac_bandwidth)
    }

    /// `sqrt(2 ln 2) / (pi * bw * f_c)`, placing the -6 dB two-sided
    /// spectral width at `bw * f_c`.
    pub fn sigma_t(&self) -> f64 {
        (2.0 * 2f64.ln()).sqrt() / (PI * self.frac_bandwidth * self.center_freq_hz)
    }

    pub fn sigma_f(&self) -> f64 {
        1.0 / (2.0 * PI * self.sigma_t())
    }

    pub fn half_support(&self) -> f64 {
        SUPPORT_SIGMAS * self.sigma_t()
    }

    /// Continuous Fourier transform of the excitation.
    pub fn spectrum(&self, f: f64) -> f64 {
        let s = self.sigma_t();
        let k = 2.0 * PI * PI * s * s;
        let fc = self.center_freq_hz;
        0.5 * s * (2.0 * PI).sqrt() * ((-k * (f - fc).powi(2)).exp() + (-k * (f + fc).powi(2)).exp())
    }
}

/// `g(t) = exp(-t^2 / (2 sigma_t^2)) * cos(2 pi f_c t)`.
pub fn excitation(pulse: &Pulse, t: f64) -> f64 {
    let s = pulse.sigma_t();
    (-t * t / (2.0 * s * s)).exp() * (2.0 * PI * pulse.center_freq_hz * t).cos()
}

/// Time window of a simulated record.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Window {
    /// Starts at the trigger; long enough for the latest echo.
    #[default]
    FromTrigger,
    /// Cropped to the span of possible echoes (sample aligned, `t0 >= 0`).
    Fit,
    Fixed { t0_s: f64, n_samples: usize },
}

/// Sample count for a record starting at the trigger: the longest
/// transmit-plus-receive path, the largest row delay and the pulse tail.
pub fn required_samples(cfg: &ArrayConfig, seq: &Sequence, phantom: &Phantom, pulse: &Pulse) -> usize {
    let (_, hi) = echo_span(cfg, seq, phantom);
    ((hi + pulse.half_support()) * cfg.sampling_freq_hz).ceil() as usize + 1
}

/// Earliest and latest pulse-center arrival over all scatterers and events.
fn echo_span(cfg: &ArrayConfig, seq: &Sequence, phantom: &Phantom) -> (f64, f64) {
    let half = (cfg.n as f64 - 1.0) / 2.0 * cfg.pitch_m;
    let c = cfg.sound_speed_m_s;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for s in &phantom.scatterers {
        let near = |v: f64| (v.abs() - half).max(0.0);
        let far = |v: f64| v.abs() + half;
        let d_min = (near(s.x).powi(2) + near(s.y).powi(2) + s.z * s.z).sqrt();
        let d_max = (far(s.x).powi(2) + far(s.y).powi(2) + s.z * s.z).sqrt();
        lo = lo.min(2.0 * d_min / c);
        hi = hi.max(2.0 * d_max / c);
    }
    if !lo.is_finite() {
        lo = 0.0;
    }
    (lo, hi + seq.max_delay())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    pub window: Window,
}

/// Simulates one record per event of `seq` for `phantom`.
pub fn simulate(
    cfg: &ArrayConfig,
    seq: &Sequence,
    phantom: &Phantom,
    pulse: &Pulse,
    opts: &SimOptions,
) -> Result<ChannelData> {
    cfg.validate()?;
    phantom.validate()?;
    if seq.is_empty() {
        return Err(domain("sequence has no events"));
    }
    for ev in &seq.events {
        check_shape("row_delays_s", cfg.n, ev.row_delays_s.len())?;
        check_shape("row_apod", cfg.n, ev.row_apod.len())?;
        check_shape("col_bias", cfg.n, ev.col_bias.len())?;
        check_shape("rx_bias", cfg.n, ev.rx_bias.len())?;
    }
    let fs = cfg.sampling_freq_hz;
    let (t0_s, n_samples) = match opts.window {
        Window::FromTrigger => (0.0, required_samples(cfg, seq, phantom, pulse)),
        Window::Fit => {
            let (lo, hi) = echo_span(cfg, seq, phantom);
            let first = ((lo - pulse.half_support()) * fs).floor().max(0.0);
            let last = ((hi + pulse.half_support()) * fs).ceil() + 1.0;
            (first / fs, (last - first).max(1.0) as usize)
        }
        Window::Fixed { t0_s, n_samples } => (t0_s, n_samples),
    };
    let mut out = ChannelData::zeros(seq.len(), cfg.n, n_samples, fs, t0_s, cfg.sound_speed_m_s);
    if phantom.is_empty() || n_samples == 0 {
        return Ok(out);
    }

    let plan = SynthesisPlan::new(cfg, pulse, t0_s, n_samples);
    let scatterers: Vec<Scatterer> = match seq.orientation {
        Orientation::RowsTransmit => phantom.scatterers.clone(),
        Orientation::ColumnsTransmit => phantom.transposed().scatterers,
    };
    let model = EventModel::new(cfg, &seq.events, &plan);

    // Chunks are reduced in index order so the sum is independent of the
    // number of worker threads.
    let mut spectra = vec![Complex64::new(0.0, 0.0); seq.len() * cfg.n * plan.bins.len()];
    let chunks: Vec<&[Scatterer]> = scatterers.chunks(CHUNK).collect();
    let batch = 8usize;
    for group in chunks.chunks(batch) {
        let partials: Vec<Vec<Complex64>> = group
            .par_iter()
            .map(|chunk| {
                let mut acc = vec![Complex64::new(0.0, 0.0); spectra.len()];
                let mut work = Workspace::new(cfg.n, plan.bins.len(), &model);
                for s in chunk.iter() {
                    accumulate_scatterer(cfg, &plan, &model, s, &mut work, &mut acc);
                }
                acc
            })
            .collect();
        for p in partials {
            for (a, b) in spectra.iter_mut().zip(&p) {
                *a += b;
            }
        }
    }
    plan.synthesize(&spectra, &mut out);
    Ok(out)
}

/// Frequency grid and FFT geometry of one synthesis.
struct SynthesisPlan {
    /// Start of the synthesis period (before `t0` by the guard interval).
    t_start: f64,
    guard: usize,
    oversample: usize,
    n_fft: usize,
    df: f64,
    /// Indices of retained frequency bins.
    bins: Vec<usize>,
    /// Pulse spectrum times the synthesis phase reference, per retained bin.
    kernel: Vec<Complex64>,
}

impl SynthesisPlan {
    fn new(cfg: &ArrayConfig, pulse: &Pulse, t0_s: f64, n_samples: usize) -> Self {
        let fs = cfg.sampling_freq_hz;
        let guard = (pulse.half_support() * fs).ceil() as usize + 2;
        let n_base = smooth_size(n_samples + 2 * guard);
        let f_hi = pulse.center_freq_hz + BAND_SIGMAS * pulse.sigma_f();
        let f_lo = (pulse.center_freq_hz - BAND_SIGMAS * pulse.sigma_f()).max(0.0);
        let mut oversample = 1;
        while oversample as f64 * fs / 2.0 < f_hi {
            oversample *= 2;
        }
        let n_fft = n_base * oversample;
        let df = fs / n_base as f64;
        let t_start = t0_s - guard as f64 / fs;
        let k_lo = (f_lo / df).floor() as usize;
        let k_hi = ((f_hi / df).ceil() as usize).min(n_fft / 2 - 1);
        let bins: Vec<usize> = (k_lo..=k_hi).collect();
        let kernel = bins
            .iter()
            .map(|&k| {
                let f = k as f64 * df;
                Complex64::from_polar(pulse.spectrum(f), 2.0 * PI * f * t_start)
            })
            .collect();
        Self {
            t_start,
            guard,
            oversample,
            n_fft,
            df,
            bins,
            kernel,
        }
    }

    fn freq(&self, b: usize) -> f64 {
        self.bins[b] as f64 * self.df
    }

    /// Inverse transform of every accumulated one-sided spectrum.
    fn synthesize(&self, spectra: &[Complex64], out: &mut ChannelData) {
        let nb = self.bins.len();
        let n_fft = self.n_fft;
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
        let (guard, q, df) = (self.guard, self.oversample, self.df);
        let bins = &self.bins;
        let ns = out.n_samples;
        out.data
            .par_chunks_mut(ns)
            .zip(spectra.par_chunks(nb))
            .for_each_init(
                || vec![Complex64::new(0.0, 0.0); n_fft],
                |buf, (trace, spec)| {
                    buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                    for (&k, &y) in bins.iter().zip(spec) {
                        buf[k] = if k == 0 { y } else { 2.0 * y };
                    }
                    ifft.process(buf);
                    for (m, v) in trace.iter_mut().enumerate() {
                        *v = buf[q * (guard + m)].re * df;
                    }
                },
            );
        debug_assert!(self.t_start <= out.t0_s);
    }
}

/// Smallest `2^a 3^b 5^c >= n`, an efficient FFT length.
fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Event structure shared by all scatterers: events are grouped either by
/// identical delay profiles or by identical transmit bias, whichever yields
/// fewer groups.
struct EventModel<'a> {
    events: &'a [TransmitEvent],
    by_delay: bool,
    /// Group index of each event.
    group_of: Vec<usize>,
    /// Representative event of each group.
    reps: Vec<usize>,
    /// `apod_i * exp(-i w tau_i)` as `[row-set][row][bin]`; row sets are the
    /// groups when grouping by delay, otherwise the events.
    row_phasors: Vec<Complex64>,
}

impl<'a> EventModel<'a> {
    fn new(cfg: &ArrayConfig, events: &'a [TransmitEvent], plan: &SynthesisPlan) -> Self {
        let group = |same: &dyn Fn(&TransmitEvent, &TransmitEvent) -> bool| {
            let mut reps: Vec<usize> = Vec::new();
            let mut group_of = Vec::with_capacity(events.len());
            for (e, ev) in events.iter().enumerate() {
                match reps.iter().position(|&r| same(&events[r], ev)) {
                    Some(g) => group_of.push(g),
                    None => {
                        group_of.push(reps.len());
                        reps.push(e);
                    }
                }
            }
            (group_of, reps)
        };
        let (d_of, d_reps) =
            group(&|a, b| a.row_delays_s == b.row_delays_s && a.row_apod == b.row_apod);
        let (b_of, b_reps) = group(&|a, b| a.col_bias == b.col_bias);
        let by_delay = d_reps.len() <= b_reps.len();
        let (group_of, reps) = if by_delay {
            (d_of, d_reps)
        } else {
            (b_of, b_reps)
        };
        let sets: Vec<usize> = if by_delay {
            reps.clone()
        } else {
            (0..events.len()).collect()
        };
        let nb = plan.bins.len();
        let mut row_phasors = Vec::with_capacity(sets.len() * cfg.n * nb);
        for &e in &sets {
            let ev = &events[e];
            for i in 0..cfg.n {
                let (a, tau) = (ev.row_apod[i], ev.row_delays_s[i]);
                row_phasors.extend(
                    (0..nb).map(|b| Complex64::from_polar(a, -2.0 * PI * plan.freq(b) * tau)),
                );
            }
        }
        Self {
            events,
            by_delay,
            group_of,
            reps,
            row_phasors,
        }
    }
}

/// Per-thread scratch buffers for one scatterer.
struct Workspace {
    dist: Vec<f64>,
    p_re: Vec<f64>,
    p_im: Vec<f64>,
    z_re: Vec<f64>,
    z_im: Vec<f64>,
    /// Receive column responses `R[j][bin]`.
    rx: Vec<Complex64>,
    /// Group reductions: `[group][n][bin]`.
    reduced: Vec<Complex64>,
    /// Transmit responses `T[e][bin]`, scaled by amplitude and kernel.
    tx: Vec<Complex64>,
}

impl Workspace {
    fn new(n: usize, n_bins: usize, model: &EventModel) -> Self {
        Self {
            dist: vec![0.0; n * n],
            p_re: vec![0.0; n * n],
            p_im: vec![0.0; n * n],
            z_re: vec![0.0; n * n],
            z_im: vec![0.0; n * n],
            rx: vec![Complex64::new(0.0, 0.0); n * n_bins],
            reduced: vec![Complex64::new(0.0, 0.0); model.reps.len() * n * n_bins],
            tx: vec![Complex64::new(0.0, 0.0); model.events.len() * n_bins],
        }
    }
}

fn accumulate_scatterer(
    cfg: &ArrayConfig,
    plan: &SynthesisPlan,
    model: &EventModel,
    s: &Scatterer,
    w: &mut Workspace,
    acc: &mut [Complex64],
) {
    let n = cfg.n;
    let nb = plan.bins.len();
    let c = cfg.sound_speed_m_s;
    let coords = cfg.element_coords();
    for i in 0..n {
        let dy = coords[i] - s.y;
        for j in 0..n {
            let dx = coords[j] - s.x;
            w.dist[i * n + j] = (dx * dx + dy * dy + s.z * s.z).sqrt();
        }
    }
    let step = 2.0 * PI * plan.df / c;
    for (e, d) in w.dist.iter().enumerate() {
        let (sn, cs) = (-step * d).sin_cos();
        w.z_re[e] = cs;
        w.z_im[e] = sn;
    }

    // Per-group row weights u[i](f) = apod_i * exp(-i w tau_i) or, when
    // grouping by bias, column weights +-1.
    let groups = model.reps.len();
    w.rx.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
    w.reduced.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
    let mut row_w_re = vec![0.0; groups * n];
    let mut row_w_im = vec![0.0; groups * n];
    let mut col_re = vec![0.0; n];
    let mut col_im = vec![0.0; n];
    let mut red_re = vec![0.0; groups * n];
    let mut red_im = vec![0.0; groups * n];

    for b in 0..nb {
        let f = plan.freq(b);
        if b % RESEED_EVERY == 0 {
            let k = 2.0 * PI * f / c;
            for (e, &d) in w.dist.iter().enumerate() {
                let (sn, cs) = (-k * d).sin_cos();
                w.p_re[e] = cs / d;
                w.p_im[e] = sn / d;
            }
        } else {
            for e in 0..n * n {
                let (pr, pi) = (w.p_re[e], w.p_im[e]);
                let (zr, zi) = (w.z_re[e], w.z_im[e]);
                w.p_re[e] = pr * zr - pi * zi;
                w.p_im[e] = pr * zi + pi * zr;
            }
        }
        col_re.iter_mut().for_each(|v| *v = 0.0);
        col_im.iter_mut().for_each(|v| *v = 0.0);
        red_re.iter_mut().for_each(|v| *v = 0.0);
        red_im.iter_mut().for_each(|v| *v = 0.0);

        if model.by_delay {
            for g in 0..groups * n {
                let u = model.row_phasors[g * nb + b];
                row_w_re[g] = u.re;
                row_w_im[g] = u.im;
            }
            for i in 0..n {
                let pr = &w.p_re[i * n..(i + 1) * n];
                let pi = &w.p_im[i * n..(i + 1) * n];
                for j in 0..n {
                    col_re[j] += pr[j];
                    col_im[j] += pi[j];
                }
                for g in 0..groups {
                    let (ur, ui) = (row_w_re[g * n + i], row_w_im[g * n + i]);
                    if ur == 0.0 && ui == 0.0 {
                        continue;
                    }
                    let rr = &mut red_re[g * n..(g + 1) * n];
                    let ri = &mut red_im[g * n..(g + 1) * n];
                    for j in 0..n {
                        rr[j] += ur * pr[j] - ui * pi[j];
                        ri[j] += ur * pi[j] + ui * pr[j];
                    }
                }
            }
        } else {
            for i in 0..n {
                let pr = &w.p_re[i * n..(i + 1) * n];
                let pi = &w.p_im[i * n..(i + 1) * n];
                for j in 0..n {
                    col_re[j] += pr[j];
                    col_im[j] += pi[j];
                }
                for (g, &rep) in model.reps.iter().enumerate() {
                    let bias = &model.events[rep].col_bias;
                    let (mut sr, mut si) = (0.0, 0.0);
                    for j in 0..n {
                        let bj = bias[j] as f64;
                        sr += bj * pr[j];
                        si += bj * pi[j];
                    }
                    red_re[g * n + i] = sr;
                    red_im[g * n + i] = si;
                }
            }
        }
        for j in 0..n {
            w.rx[j * nb + b] = Complex64::new(col_re[j], col_im[j]);
        }
        for g in 0..groups * n {
            w.reduced[g * nb + b] = Complex64::new(red_re[g], red_im[g]);
        }
    }

    // Transmit response per event.
    let n_events = model.events.len();
    for e in 0..n_events {
        let ev = &model.events[e];
        let g = model.group_of[e];
        let t = &mut w.tx[e * nb..(e + 1) * nb];
        t.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        if model.by_delay {
            for (j, &bj) in ev.col_bias.iter().enumerate() {
                if bj == 0 {
                    continue;
                }
                let red = &w.reduced[(g * n + j) * nb..(g * n + j + 1) * nb];
                let bj = bj as f64;
                for (tv, rv) in t.iter_mut().zip(red) {
                    *tv += bj * rv;
                }
            }
        } else {
            for i in 0..n {
                if ev.row_apod[i] == 0.0 {
                    continue;
                }
                let red = &w.reduced[(g * n + i) * nb..(g * n + i + 1) * nb];
                let u = &model.row_phasors[(e * n + i) * nb..(e * n + i + 1) * nb];
                for ((tv, rv), uv) in t.iter_mut().zip(red).zip(u) {
                    *tv += uv * rv;
                }
            }
        }
        for (tv, k) in t.iter_mut().zip(&plan.kernel) {
            *tv *= k * s.amplitude;
        }
    }

    // Outer product into the accumulator.
    for e in 0..n_events {
        let t = &w.tx[e * nb..(e + 1) * nb];
        for (r, &rb) in model.events[e].rx_bias.iter().enumerate() {
            if rb == 0 {
                continue;
            }
            let rb = rb as f64;
            let rx = &w.rx[r * nb..(r + 1) * nb];
            let dst = &mut acc[(e * n + r) * nb..(e * n + r + 1) * nb];
            for ((d, tv), rv) in dst.iter_mut().zip(t).zip(rx) {
                *d += rb * (tv * rv);
            }
        }
    }
}

/// Adds white Gaussian noise at `snr_db` relative to the mean signal power.
/// An infinite SNR returns the input unchanged.
pub fn add_noise(data: &ChannelData, snr_db: f64, seed: u64) -> Result<ChannelData> {
    if data.data.is_empty() {
        return Err(domain("cannot add noise to an empty record"));
    }
    if snr_db == f64::INFINITY {
        return Ok(data.clone());
    }
    if snr_db.is_nan() {
        return Err(domain("SNR is NaN"));
    }
    let power = data.data.iter().map(|v| v * v).sum::<f64>() / data.data.len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut out = data.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut out.data {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequences::{make_forces_sequence, make_tpw_sequence, make_vls_sequence};

    fn cfg(n: usize) -> ArrayConfig {
        ArrayConfig::lambda_pitch(n, 5e6, 0.6, 20e6).unwrap()
    }

    fn single(pos: [f64; 3]) -> Phantom {
        Phantom::new(vec![Scatterer::new(pos[0], pos[1], pos[2], 1.0)])
    }

    /// Direct time-domain evaluation of the forward model.
    fn brute_force(
        cfg: &ArrayConfig,
        seq: &Sequence,
        ph: &Phantom,
        pulse: &Pulse,
        t0: f64,
        ns: usize,
    ) -> ChannelData {
        let n = cfg.n;
        let c = cfg.sound_speed_m_s;
        let fs = cfg.sampling_freq_hz;
        let mut out = ChannelData::zeros(seq.len(), n, ns, fs, t0, c);
        for (e, ev) in seq.events.iter().enumerate() {
            for r in 0..n {
                for s in &ph.scatterers {
                    for i in 0..n {
                        for j in 0..n {
                            let w = ev.row_apod[i] * ev.col_bias[j] as f64 * ev.rx_bias[r] as f64;
                            if w == 0.0 {
                                continue;
                            }
                            let p = crate::array::subelement_position(cfg, i, j).unwrap();
                            let dtx = ((p[0] - s.x).powi(2) + (p[1] - s.y).powi(2) + s.z * s.z).sqrt();
                            for i2 in 0..n {
                                let q = crate::array::subelement_position(cfg, i2, r).unwrap();
                                let drx = ((q[0] - s.x).powi(2) + (q[1] - s.y).powi(2) + s.z * s.z).sqrt();
                                let amp = w * s.amplitude / (dtx * drx);
                                let delay = ev.row_delays_s[i] + (dtx + drx) / c;
                                for (m, v) in out.trace_mut(e, r).iter_mut().enumerate() {
                                    let t = t0 + m as f64 / fs;
                                    *v += amp * excitation(pulse, t - delay);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn max_rel_diff(a: &ChannelData, b: &ChannelData) -> f64 {
        let peak = b.peak_abs();
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
            / peak
    }

    #[test]
    fn excitation_values() {
        let p = Pulse::new(5e6, 0.6);
        assert_eq!(excitation(&p, 0.0), 1.0);
        let s = p.sigma_t();
        assert!((s - 124.9e-9).abs() < 0.1e-9);
        assert!(excitation(&p, 5.0 * s).abs() < 1e-5);
        assert!(excitation(&p, -5.0 * s).abs() < 1e-5);
    }

    #[test]
    fn spectrum_matches_quadrature() {
        let p = Pulse::new(5e6, 0.6);
        let dt = p.sigma_t() / 200.0;
        for &f in &[0.0, 2e6, 5e6, 7.3e6] {
            let mut re = 0.0;
            let mut im = 0.0;
            for k in -4000..=4000 {
                let t = k as f64 * dt;
                let g = excitation(&p, t);
                re += g * (2.0 * PI * f * t).cos() * dt;
                im -= g * (2.0 * PI * f * t).sin() * dt;
            }
            assert!((re - p.spectrum(f)).abs() < 1e-12 * p.spectrum(5e6));
            assert!(im.abs() < 1e-12 * p.spectrum(5e6));
        }
    }

    #[test]
    fn empty_phantom_gives_zeros() {
        let c = cfg(4);
        let seq = make_forces_sequence(&c, 5e-3).unwrap();
        let out = simulate(&c, &seq, &Phantom::default(), &Pulse::from_config(&c), &SimOptions::default()).unwrap();
        assert!(out.n_samples > 0);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_element_peak() {
        let c = ArrayConfig::new(1, 3e-4, 5e6, 0.6, 1540.0, 20e6).unwrap();
        let seq = make_tpw_sequence(&c, &[0.0]).unwrap();
        // 2d/c = 10 us lands exactly on sample 200.
        let d = 7.7e-3;
        let out = simulate(&c, &seq, &single([0.0, 0.0, d]), &Pulse::from_config(&c), &SimOptions::default()).unwrap();
        let tr = out.trace(0, 0);
        let (imax, vmax) = tr
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        assert_eq!(imax, 200);
        assert!((vmax - 1.0 / (d * d)).abs() < 1e-9 / (d * d), "{vmax}");
    }

    #[test]
    fn matches_time_domain_brute_force() {
        let c = cfg(2);
        let pulse = Pulse::from_config(&c);
        let ph = Phantom::new(vec![
            Scatterer::new(0.2e-3, -0.1e-3, 3e-3, 1.0),
            Scatterer::new(-0.4e-3, 0.3e-3, 3.6e-3, -0.7),
        ]);
        let seqs = [
            make_forces_sequence(&c, 3e-3).unwrap(),
            make_tpw_sequence(&c, &[0.1, -0.2]).unwrap(),
            make_vls_sequence(&c, 2, -1e-3, 1).unwrap(),
        ];
        for seq in &seqs {
            let fast = simulate(&c, seq, &ph, &pulse, &SimOptions::default()).unwrap();
            let slow = brute_force(&c, seq, &ph, &pulse, fast.t0_s, fast.n_samples);
            assert!(max_rel_diff(&fast, &slow) < 1e-9, "{:?}", seq.kind());
        }
    }

    #[test]
    fn transmit_polarity_of_one_column_negates_its_contribution() {
        let c = cfg(2);
        let pulse = Pulse::from_config(&c);
        let ph = single([0.3e-3, 0.1e-3, 3e-3]);
        let base = make_tpw_sequence(&c, &[0.0]).unwrap().events[0].clone();
        let mk = |tx: [i8; 2]| {
            let mut ev = base.clone();
            ev.col_bias = tx.to_vec();
            ev.rx_bias = vec![1, 1];
            Sequence::custom(&c, vec![ev]).unwrap()
        };
        let win = SimOptions {
            window: Window::Fixed { t0_s: 0.0, n_samples: 120 },
        };
        let both = simulate(&c, &mk([1, 1]), &ph, &pulse, &win).unwrap();
        let flipped = simulate(&c, &mk([1, -1]), &ph, &pulse, &win).unwrap();
        let col0 = simulate(&c, &mk([1, 0]), &ph, &pulse, &win).unwrap();
        let col1 = simulate(&c, &mk([0, 1]), &ph, &pulse, &win).unwrap();
        let peak = both.peak_abs();
        for k in 0..both.data.len() {
            assert!((both.data[k] - (col0.data[k] + col1.data[k])).abs() < 1e-12 * peak);
            assert!((flipped.data[k] - (col0.data[k] - col1.data[k])).abs() < 1e-12 * peak);
        }
        // Flipping transmit and receive polarity together leaves the product unchanged.
        let mut ev = base.clone();
        ev.col_bias = vec![-1, -1];
        ev.rx_bias = vec![-1, -1];
        let full = simulate(&c, &Sequence::custom(&c, vec![ev]).unwrap(), &ph, &pulse, &win).unwrap();
        assert!(max_rel_diff(&full, &both) < 1e-12);
    }

    #[test]
    fn linear_in_scatterers() {
        let c = cfg(4);
        let pulse = Pulse::from_config(&c);
        let seq = make_forces_sequence(&c, 4e-3).unwrap();
        let a = single([0.2e-3, 0.0, 4e-3]);
        let b = Phantom::new(vec![Scatterer::new(-0.5e-3, 0.2e-3, 5e-3, -2.0)]);
        let win = SimOptions {
            window: Window::Fixed { t0_s: 1e-6, n_samples: 200 },
        };
        let ab = simulate(&c, &seq, &a.union(&b), &pulse, &win).unwrap();
        let sa = simulate(&c, &seq, &a, &pulse, &win).unwrap();
        let sb = simulate(&c, &seq, &b, &pulse, &win).unwrap();
        let peak = ab.peak_abs();
        for k in 0..ab.data.len() {
            assert!((ab.data[k] - sa.data[k] - sb.data[k]).abs() < 1e-12 * peak);
        }
    }

    #[test]
    fn fit_window_matches_trigger_window() {
        let c = cfg(4);
        let pulse = Pulse::from_config(&c);
        let seq = make_tpw_sequence(&c, &[0.1]).unwrap();
        let ph = single([0.1e-3, 0.0, 6e-3]);
        let full = simulate(&c, &seq, &ph, &pulse, &SimOptions::default()).unwrap();
        let fit = simulate(&c, &seq, &ph, &pulse, &SimOptions { window: Window::Fit }).unwrap();
        assert!(fit.t0_s > 0.0 && fit.n_samples < full.n_samples);
        let off = (fit.t0_s * c.sampling_freq_hz).round() as usize;
        let peak = full.peak_abs();
        for r in 0..4 {
            for (m, &v) in fit.trace(0, r).iter().enumerate() {
                assert!((v - full.trace(0, r)[off + m]).abs() < 1e-10 * peak);
            }
        }
    }

    #[test]
    fn rejects_scatterer_at_surface() {
        let c = cfg(2);
        let seq = make_tpw_sequence(&c, &[0.0]).unwrap();
        let err = simulate(&c, &seq, &single([0.0, 0.0, 0.0]), &Pulse::from_config(&c), &SimOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn swapping_transmit_and_receive_columns_is_reciprocal() {
        let c = cfg(2);
        let pulse = Pulse::from_config(&c);
        let ph = single([0.15e-3, -0.2e-3, 2e-3]);
        let mk = |tx_col: usize, rx_col: usize| {
            let mut col_bias = vec![0; 2];
            col_bias[tx_col] = 1;
            let mut rx_bias = vec![0; 2];
            rx_bias[rx_col] = 1;
            let ev = TransmitEvent {
                row_delays_s: vec![0.0; 2],
                row_apod: vec![1.0; 2],
                col_bias,
                rx_bias,
                delay_ref_s: 0.0,
                label: String::new(),
            };
            Sequence::custom(&c, vec![ev]).unwrap()
        };
        let win = SimOptions { window: Window::Fixed { t0_s: 0.0, n_samples: 80 } };
        let ab = simulate(&c, &mk(0, 1), &ph, &pulse, &win).unwrap();
        let ba = simulate(&c, &mk(1, 0), &ph, &pulse, &win).unwrap();
        let peak = ab.peak_abs();
        assert!(peak > 0.0);
        for (x, y) in ab.trace(0, 1).iter().zip(ba.trace(0, 0)) {
            assert!((x - y).abs() < 1e-12 * peak);
        }
    }

    #[test]
    fn noise_cases() {
        let mut cd = ChannelData::zeros(1, 10, 100_000, 20e6, 0.0, 1540.0);
        for (i, v) in cd.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.3).sin();
        }
        assert_eq!(add_noise(&cd, f64::INFINITY, 1).unwrap(), cd);
        let a = add_noise(&cd, 0.0, 9).unwrap();
        let b = add_noise(&cd, 0.0, 9).unwrap();
        assert_eq!(a, b);
        let signal = cd.data.iter().map(|v| v * v).sum::<f64>() / cd.data.len() as f64;
        let noise = a
            .data
            .iter()
            .zip(&cd.data)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / cd.data.len() as f64;
        assert!((noise / signal - 1.0).abs() < 0.05);
    }
}
