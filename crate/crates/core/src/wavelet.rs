//! Orthonormal Daubechies filter banks and the periodic 2-D multi-scale DWT.
//!
//! Conventions: the analysis low-pass `h` sums to √2 (haar is `(1/√2, 1/√2)`),
//! the high-pass is `g[n] = (-1)^n h[L-1-n]`, and analysis keeps even phases:
//! `a[k] = Σ_n h[n] x[(2k + n) mod N]`. Each level filters along the width
//! axis, then along the height axis. Sub-bands are stored in the order
//! `LL, LH, HL, HH` where the first letter is the filter applied along the
//! width and the second the filter applied along the height.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::manifest::Manifest;
use crate::rng::StreamRng;
use crate::tensor_io::{read_f64_with_shape, write_tensor, RawTensor};

/// Sub-band names in storage order.
pub const BAND_NAMES: [&str; 4] = ["LL", "LH", "HL", "HH"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Wavelet {
    Haar,
    Db2,
    Db4,
    Db6,
}

impl Wavelet {
    pub const ALL: [Wavelet; 4] = [Wavelet::Haar, Wavelet::Db2, Wavelet::Db4, Wavelet::Db6];

    /// Number of vanishing moments `p`; the filters have `2p` taps.
    pub fn order(self) -> usize {
        match self {
            Wavelet::Haar => 1,
            Wavelet::Db2 => 2,
            Wavelet::Db4 => 4,
            Wavelet::Db6 => 6,
        }
    }

    pub fn from_order(p: usize) -> Result<Self> {
        match p {
            1 => Ok(Wavelet::Haar),
            2 => Ok(Wavelet::Db2),
            4 => Ok(Wavelet::Db4),
            6 => Ok(Wavelet::Db6),
            _ => Err(Error::UnsupportedOrder(p)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Wavelet::Haar => "haar",
            Wavelet::Db2 => "db2",
            Wavelet::Db4 => "db4",
            Wavelet::Db6 => "db6",
        }
    }

    fn scaling_taps(self) -> &'static [f64] {
        match self {
            Wavelet::Haar => &HAAR,
            Wavelet::Db2 => &DB2,
            Wavelet::Db4 => &DB4,
            Wavelet::Db6 => &DB6,
        }
    }
}

impl fmt::Display for Wavelet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Wavelet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Wavelet::Haar),
            "db2" => Ok(Wavelet::Db2),
            "db4" => Ok(Wavelet::Db4),
            "db6" => Ok(Wavelet::Db6),
            other => Err(Error::invalid(format!(
                "unknown wavelet `{other}` (expected haar, db2, db4 or db6)"
            ))),
        }
    }
}

const HAAR: [f64; 2] = [
    std::f64::consts::FRAC_1_SQRT_2,
    std::f64::consts::FRAC_1_SQRT_2,
];

const DB2: [f64; 4] = [
    0.48296291314453414337,
    0.83651630373780790558,
    0.22414386804201338103,
    -0.12940952255126038117,
];

const DB4: [f64; 8] = [
    0.23037781330889650086,
    0.71484657055291564709,
    0.63088076792985890788,
    -0.027983769416859854211,
    -0.18703481171909308408,
    0.030841381835560763627,
    0.032883011666885199735,
    -0.010597401785069032105,
];

const DB6: [f64; 12] = [
    0.11154074335010946362,
    0.49462389039845308568,
    0.75113390802109535068,
    0.31525035170919762909,
    -0.22626469396543982008,
    -0.12976686756726193556,
    0.097501605587323049102,
    0.027522865530305728626,
    -0.031582039317486029565,
    0.00055384220116149613925,
    0.0047772575109455106396,
    -0.0010773010853084795649,
];

/// Analysis and synthesis filters of one orthonormal Daubechies wavelet.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    wavelet: Wavelet,
    pub lo_analysis: Vec<f64>,
    pub hi_analysis: Vec<f64>,
    pub lo_synthesis: Vec<f64>,
    pub hi_synthesis: Vec<f64>,
}

/// Largest violation of the orthonormality and moment conditions.
#[derive(Debug, Clone, Copy)]
pub struct FilterResiduals {
    pub orthonormality: f64,
    pub vanishing_moments: f64,
}

/// Builds the bank for `dbp`, `p ∈ {1, 2, 4, 6}`.
pub fn make_filter_bank(p: usize) -> Result<FilterBank> {
    FilterBank::new(Wavelet::from_order(p)?)
}

impl FilterBank {
    /// Builds the bank from the tabulated taps and validates them.
    pub fn new(wavelet: Wavelet) -> Result<Self> {
        let bank = Self::from_taps(wavelet, wavelet.scaling_taps().to_vec());
        let r = bank.residuals();
        if r.orthonormality > 1e-12 || r.vanishing_moments > 1e-10 {
            return Err(Error::invalid(format!(
                "{wavelet} taps fail validation: orthonormality {:.3e}, moments {:.3e}",
                r.orthonormality, r.vanishing_moments
            )));
        }
        Ok(bank)
    }

    fn from_taps(wavelet: Wavelet, lo: Vec<f64>) -> Self {
        let n = lo.len();
        let hi: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { lo[n - 1 - i] } else { -lo[n - 1 - i] })
            .collect();
        let lo_synthesis = lo.iter().rev().copied().collect();
        let hi_synthesis = hi.iter().rev().copied().collect();
        Self {
            wavelet,
            lo_analysis: lo,
            hi_analysis: hi,
            lo_synthesis,
            hi_synthesis,
        }
    }

    pub fn wavelet(&self) -> Wavelet {
        self.wavelet
    }

    pub fn len(&self) -> usize {
        self.lo_analysis.len()
    }

    /// Analysis low-pass taps `h`.
    pub fn lowpass(&self) -> &[f64] {
        &self.lo_analysis
    }

    /// Analysis high-pass taps `g`.
    pub fn highpass(&self) -> &[f64] {
        &self.hi_analysis
    }

    pub fn is_empty(&self) -> bool {
        self.lo_analysis.is_empty()
    }

    pub fn residuals(&self) -> FilterResiduals {
        let lo = &self.lo_analysis;
        let hi = &self.hi_analysis;
        let n = lo.len() as isize;
        let corr = |a: &[f64], b: &[f64], shift: isize| -> f64 {
            (0..n)
                .filter_map(|i| {
                    let j = i + shift;
                    (0..n).contains(&j).then(|| a[i as usize] * b[j as usize])
                })
                .sum()
        };
        let mut ortho: f64 = 0.0;
        for k in -(n / 2)..=(n / 2) {
            let delta = if k == 0 { 1.0 } else { 0.0 };
            ortho = ortho
                .max((corr(lo, lo, 2 * k) - delta).abs())
                .max((corr(hi, hi, 2 * k) - delta).abs())
                .max(corr(lo, hi, 2 * k).abs());
        }
        let p = self.wavelet.order();
        let moments = (0..p)
            .map(|m| {
                hi.iter()
                    .enumerate()
                    .map(|(i, h)| (i as f64).powi(m as i32) * h)
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max);
        FilterResiduals {
            orthonormality: ortho,
            vanishing_moments: moments,
        }
    }

    fn analyze_line(&self, input: &[f64], lo_out: &mut [f64], hi_out: &mut [f64]) {
        let n = input.len();
        let lo = &self.lo_analysis;
        let hi = &self.hi_analysis;
        for k in 0..n / 2 {
            let (mut a, mut d) = (0.0, 0.0);
            for (t, (&l, &h)) in lo.iter().zip(hi).enumerate() {
                let x = input[(2 * k + t) % n];
                a += l * x;
                d += h * x;
            }
            lo_out[k] = a;
            hi_out[k] = d;
        }
    }

    fn synthesize_line(&self, lo_in: &[f64], hi_in: &[f64], out: &mut [f64]) {
        let n = out.len();
        out.fill(0.0);
        let taps = self.len();
        // Analysis tap t at phase 2k corresponds to synthesis tap taps-1-t.
        for k in 0..n / 2 {
            let (a, d) = (lo_in[k], hi_in[k]);
            for r in 0..taps {
                let idx = (2 * k + taps - 1 - r) % n;
                out[idx] += a * self.lo_synthesis[r] + d * self.hi_synthesis[r];
            }
        }
    }

    /// One separable level on a single `h × w` plane, returning `[LL, LH, HL, HH]` concatenated.
    fn analyze_plane(&self, plane: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (h2, w2) = (h / 2, w / 2);
        // Width pass.
        let mut lo_w = vec![0.0; h * w2];
        let mut hi_w = vec![0.0; h * w2];
        for y in 0..h {
            self.analyze_line(
                &plane[y * w..(y + 1) * w],
                &mut lo_w[y * w2..(y + 1) * w2],
                &mut hi_w[y * w2..(y + 1) * w2],
            );
        }
        // Height pass.
        let band = h2 * w2;
        let mut out = vec![0.0; 4 * band];
        let mut col = vec![0.0; h];
        let mut col_lo = vec![0.0; h2];
        let mut col_hi = vec![0.0; h2];
        for (src, lo_slot, hi_slot) in [(&lo_w, 0, 1), (&hi_w, 2, 3)] {
            for x in 0..w2 {
                for y in 0..h {
                    col[y] = src[y * w2 + x];
                }
                self.analyze_line(&col, &mut col_lo, &mut col_hi);
                for y in 0..h2 {
                    out[lo_slot * band + y * w2 + x] = col_lo[y];
                    out[hi_slot * band + y * w2 + x] = col_hi[y];
                }
            }
        }
        out
    }

    /// Inverse of [`Self::analyze_plane`]; `bands` holds `[LL, LH, HL, HH]` of size `h2 × w2` each.
    fn synthesize_plane(&self, bands: [&[f64]; 4], h2: usize, w2: usize) -> Vec<f64> {
        let (h, w) = (2 * h2, 2 * w2);
        let mut lo_w = vec![0.0; h * w2];
        let mut hi_w = vec![0.0; h * w2];
        let mut col_lo = vec![0.0; h2];
        let mut col_hi = vec![0.0; h2];
        let mut col = vec![0.0; h];
        for (dst, lo_band, hi_band) in [(&mut lo_w, bands[0], bands[1]), (&mut hi_w, bands[2], bands[3])] {
            for x in 0..w2 {
                for y in 0..h2 {
                    col_lo[y] = lo_band[y * w2 + x];
                    col_hi[y] = hi_band[y * w2 + x];
                }
                self.synthesize_line(&col_lo, &col_hi, &mut col);
                for y in 0..h {
                    dst[y * w2 + x] = col[y];
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            self.synthesize_line(
                &lo_w[y * w2..(y + 1) * w2],
                &hi_w[y * w2..(y + 1) * w2],
                &mut out[y * w..(y + 1) * w],
            );
        }
        out
    }
}

/// Output of one analysis level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCoefficients {
    /// `C × H/2 × W/2` approximation (LL).
    pub approx: Field,
    /// `(C, 3, H/2, W/2)` details in the order LH, HL, HH.
    pub details: Vec<f64>,
}

fn check_even(h: usize, w: usize) -> Result<()> {
    for d in [h, w] {
        if d < 2 || d % 2 != 0 {
            return Err(Error::Divisibility { dim: d, levels: 1 });
        }
    }
    Ok(())
}

/// Single-level 2-D analysis with periodic boundaries.
pub fn dwt2_level(field: &Field, bank: &FilterBank) -> Result<LevelCoefficients> {
    let (c, h, w) = field.shape();
    check_even(h, w)?;
    let (h2, w2) = (h / 2, w / 2);
    let band = h2 * w2;
    let planes: Vec<Vec<f64>> = (0..c)
        .into_par_iter()
        .map(|ch| bank.analyze_plane(field.channel(ch), h, w))
        .collect();
    let mut approx = Vec::with_capacity(c * band);
    let mut details = Vec::with_capacity(3 * c * band);
    for p in &planes {
        approx.extend_from_slice(&p[..band]);
        details.extend_from_slice(&p[band..]);
    }
    Ok(LevelCoefficients {
        approx: Field::new(c, h2, w2, approx)?,
        details,
    })
}

/// Inverse of [`dwt2_level`].
pub fn idwt2_level(approx: &Field, details: &[f64], bank: &FilterBank) -> Result<Field> {
    let (c, h2, w2) = approx.shape();
    let band = h2 * w2;
    if details.len() != 3 * c * band {
        return Err(Error::shape(format!(
            "details hold {} values, expected {} for approximation {:?}",
            details.len(),
            3 * c * band,
            approx.shape()
        )));
    }
    let planes: Vec<Vec<f64>> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let d = &details[3 * ch * band..3 * (ch + 1) * band];
            bank.synthesize_plane(
                [approx.channel(ch), &d[..band], &d[band..2 * band], &d[2 * band..]],
                h2,
                w2,
            )
        })
        .collect();
    Field::new(c, 2 * h2, 2 * w2, planes.concat())
}

/// Shape of a pyramid: pixel grid plus number of scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub levels: usize,
}

impl PyramidShape {
    pub fn new(channels: usize, height: usize, width: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::invalid("number of scales must be at least 1"));
        }
        if channels == 0 {
            return Err(Error::invalid("number of channels must be at least 1"));
        }
        let block = 1usize
            .checked_shl(levels as u32)
            .ok_or_else(|| Error::invalid("too many scales"))?;
        for d in [height, width] {
            if d == 0 || d % block != 0 {
                return Err(Error::Divisibility { dim: d, levels });
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            levels,
        })
    }

    /// `(H_j, W_j)` for scale `j ∈ 1..=levels`.
    pub fn dims(&self, j: usize) -> (usize, usize) {
        (self.height >> j, self.width >> j)
    }

    /// Number of values stored at scale `j`: `C · 4 · H_j · W_j`.
    pub fn scale_len(&self, j: usize) -> usize {
        let (h, w) = self.dims(j);
        self.channels * 4 * h * w
    }
}

/// Multi-scale coefficients `{ w_j ∈ R^{C×4×H_j×W_j} }`, `j = 1..=J` (finest first).
///
/// At every scale the LL slot holds the approximation at that scale; only the
/// scale-`J` LL is consumed by the inverse transform.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    wavelet: Wavelet,
    shape: PyramidShape,
    scales: Vec<Vec<f64>>,
}

impl WaveletPyramid {
    pub fn zeros(wavelet: Wavelet, shape: PyramidShape) -> Self {
        let scales = (1..=shape.levels).map(|j| vec![0.0; shape.scale_len(j)]).collect();
        Self {
            wavelet,
            shape,
            scales,
        }
    }

    pub fn from_scales(wavelet: Wavelet, shape: PyramidShape, scales: Vec<Vec<f64>>) -> Result<Self> {
        if scales.len() != shape.levels {
            return Err(Error::shape(format!(
                "{} scale tensors for {} levels",
                scales.len(),
                shape.levels
            )));
        }
        for (i, s) in scales.iter().enumerate() {
            if s.len() != shape.scale_len(i + 1) {
                return Err(Error::shape(format!(
                    "scale {} holds {} values, expected {}",
                    i + 1,
                    s.len(),
                    shape.scale_len(i + 1)
                )));
            }
        }
        Ok(Self {
            wavelet,
            shape,
            scales,
        })
    }

    pub fn wavelet(&self) -> Wavelet {
        self.wavelet
    }

    pub fn shape(&self) -> &PyramidShape {
        &self.shape
    }

    pub fn levels(&self) -> usize {
        self.shape.levels
    }

    /// Tensor at scale `j` (1-based), layout `(C, 4, H_j, W_j)`.
    pub fn scale(&self, j: usize) -> &[f64] {
        &self.scales[j - 1]
    }

    pub fn scale_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.scales[j - 1]
    }

    pub fn scales(&self) -> &[Vec<f64>] {
        &self.scales
    }

    pub fn into_scales(self) -> Vec<Vec<f64>> {
        self.scales
    }

    /// One `H_j × W_j` sub-band.
    pub fn band(&self, j: usize, channel: usize, band: usize) -> &[f64] {
        let (h, w) = self.shape.dims(j);
        let n = h * w;
        let off = (channel * 4 + band) * n;
        &self.scales[j - 1][off..off + n]
    }

    pub fn is_compatible(&self, other: &Self) -> bool {
        self.wavelet == other.wavelet && self.shape == other.shape
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "pyramids differ: {} {:?} vs {} {:?}",
                self.wavelet, self.shape, other.wavelet, other.shape
            )))
        }
    }

    /// Elementwise `f(self, other)` into a new pyramid.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_compatible(other)?;
        let scales = self
            .scales
            .iter()
            .zip(&other.scales)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        Ok(Self {
            wavelet: self.wavelet,
            shape: self.shape,
            scales,
        })
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.scales.iter_mut().zip(&other.scales) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.scales.iter().flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.scales
            .iter()
            .flatten()
            .zip(other.scales.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Energy of the coefficients that the inverse transform consumes: scale-`J`
    /// LL plus every detail band. Equals the pixel-space energy (Parseval).
    pub fn energy(&self) -> f64 {
        self.band_energies().iter().map(|b| b.energy).sum()
    }

    /// Energy per retained sub-band (details at every scale, LL at the coarsest), summed over channels.
    pub fn band_energies(&self) -> Vec<BandEnergy> {
        let mut out = Vec::new();
        for j in 1..=self.levels() {
            let first_band = if j == self.levels() { 0 } else { 1 };
            for b in first_band..4 {
                let energy = (0..self.shape.channels)
                    .map(|c| self.band(j, c, b).iter().map(|v| v * v).sum::<f64>())
                    .sum();
                out.push(BandEnergy { scale: j, band: b, energy });
            }
        }
        out
    }

    /// Writes `scale_<j>.wfmt` per scale (f64) and `pyramid.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = Manifest::new();
        m.push("filter", self.wavelet);
        m.push("levels", self.levels());
        m.push("channels", self.shape.channels);
        m.push("height", self.shape.height);
        m.push("width", self.shape.width);
        for j in 1..=self.levels() {
            let (h, w) = self.shape.dims(j);
            let dims = [self.shape.channels, 4, h, w];
            m.push(format!("scale_{j}"), format!("{}x{}x{}x{}", dims[0], dims[1], dims[2], dims[3]));
            write_tensor(
                &dir.join(format!("scale_{j}.wfmt")),
                &RawTensor::f64(dims.to_vec(), self.scale(j).to_vec()),
            )?;
        }
        m.write(&dir.join("pyramid.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join("pyramid.txt"))?;
        let wavelet: Wavelet = m.require::<String>("filter")?.parse()?;
        let shape = PyramidShape::new(
            m.require("channels")?,
            m.require("height")?,
            m.require("width")?,
            m.require("levels")?,
        )?;
        let scales = (1..=shape.levels)
            .map(|j| {
                let (h, w) = shape.dims(j);
                read_f64_with_shape(&dir.join(format!("scale_{j}.wfmt")), &[shape.channels, 4, h, w])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_scales(wavelet, shape, scales)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandEnergy {
    pub scale: usize,
    pub band: usize,
    pub energy: f64,
}

/// Multi-scale analysis: `J` recursive levels on the approximation.
pub fn dwt_multiscale(field: &Field, bank: &FilterBank, levels: usize) -> Result<WaveletPyramid> {
    let (c, h, w) = field.shape();
    let shape = PyramidShape::new(c, h, w, levels)?;
    let mut scales = Vec::with_capacity(levels);
    let mut current = field.clone();
    for j in 1..=levels {
        let level = dwt2_level(&current, bank)?;
        let (hj, wj) = shape.dims(j);
        let band = hj * wj;
        let mut tensor = Vec::with_capacity(shape.scale_len(j));
        for ch in 0..c {
            tensor.extend_from_slice(level.approx.channel(ch));
            tensor.extend_from_slice(&level.details[3 * ch * band..3 * (ch + 1) * band]);
        }
        scales.push(tensor);
        current = level.approx;
    }
    WaveletPyramid::from_scales(bank.wavelet(), shape, scales)
}

/// Inverse multi-scale transform; reads the LL slot of the coarsest scale only.
pub fn idwt_multiscale(pyramid: &WaveletPyramid, bank: &FilterBank) -> Result<Field> {
    if pyramid.wavelet() != bank.wavelet() {
        return Err(Error::invalid(format!(
            "pyramid was produced by {} but bank is {}",
            pyramid.wavelet(),
            bank.wavelet()
        )));
    }
    let shape = *pyramid.shape();
    let c = shape.channels;
    let levels = shape.levels;
    let (hj, wj) = shape.dims(levels);
    let band = hj * wj;
    let coarse = pyramid.scale(levels);
    let mut approx = Field::new(
        c,
        hj,
        wj,
        (0..c).flat_map(|ch| coarse[4 * ch * band..(4 * ch + 1) * band].iter().copied()).collect(),
    )?;
    for j in (1..=levels).rev() {
        let (hj, wj) = shape.dims(j);
        let band = hj * wj;
        let t = pyramid.scale(j);
        let details: Vec<f64> = (0..c)
            .flat_map(|ch| t[(4 * ch + 1) * band..(4 * ch + 4) * band].iter().copied())
            .collect();
        approx = idwt2_level(&approx, &details, bank)?;
    }
    Ok(approx)
}

/// Sample statistics of one retained sub-band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStats {
    pub scale: usize,
    pub band: usize,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Pearson correlation between two sub-bands.
#[derive(Debug, Clone, PartialEq)]
pub struct BandCorrelation {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub count: usize,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianityReport {
    pub wavelet: Wavelet,
    pub levels: usize,
    pub pixels: usize,
    pub bands: Vec<BandStats>,
    pub correlations: Vec<BandCorrelation>,
}

impl GaussianityReport {
    pub fn max_variance_deviation(&self) -> f64 {
        self.bands.iter().map(|b| (b.variance - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_mean(&self) -> f64 {
        self.bands.iter().map(|b| b.mean.abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_correlation(&self) -> f64 {
        self.correlations.iter().map(|c| c.correlation.abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    sx: f64,
    sxx: f64,
}

#[derive(Clone, Copy, Default)]
struct CoMoments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl CoMoments {
    fn add(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    fn merge(&mut self, o: &Self) {
        self.n += o.n;
        self.sx += o.sx;
        self.sy += o.sy;
        self.sxx += o.sxx;
        self.syy += o.syy;
        self.sxy += o.sxy;
    }

    fn correlation(&self) -> f64 {
        let mx = self.sx / self.n;
        let my = self.sy / self.n;
        let cov = self.sxy / self.n - mx * my;
        let vx = self.sxx / self.n - mx * mx;
        let vy = self.syy / self.n - my * my;
        cov / (vx * vy).sqrt()
    }
}

/// Transforms standard Gaussian pixel noise and measures per-sub-band
/// moments plus correlations between distinct retained sub-bands: co-located
/// pairs within a scale, and parent/child pairs across adjacent scales
/// (coarse `(y, x)` against fine `(2y, 2x)`).
pub fn pyramid_gaussianity_check(
    bank: &FilterBank,
    levels: usize,
    n_samples: usize,
    seed: u64,
) -> Result<GaussianityReport> {
    if levels == 0 || levels > 6 {
        return Err(Error::invalid("gaussianity check supports 1..=6 scales"));
    }
    let side = 128usize;
    let n_fields = n_samples.div_ceil(side * side).max(1);
    let shape = PyramidShape::new(1, side, side, levels)?;

    // Retained bands: (scale, band).
    let retained: Vec<(usize, usize)> = (1..=levels)
        .flat_map(|j| {
            let first = if j == levels { 0 } else { 1 };
            (first..4).map(move |b| (j, b))
        })
        .collect();
    let mut pairs: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for (i, &a) in retained.iter().enumerate() {
        for &b in &retained[i + 1..] {
            if a.0 == b.0 || b.0 == a.0 + 1 {
                pairs.push((a, b));
            }
        }
    }

    let root = StreamRng::new(seed);
    let partials: Vec<(Vec<Moments>, Vec<CoMoments>)> = (0..n_fields)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let mut data = vec![0.0; side * side];
            rng.fill_normal(&mut data);
            let field = Field::new(1, side, side, data).expect("valid field");
            let pyr = dwt_multiscale(&field, bank, levels).expect("dyadic field");
            let moments = retained
                .iter()
                .map(|&(j, b)| {
                    let band = pyr.band(j, 0, b);
                    Moments {
                        n: band.len() as f64,
                        sx: band.iter().sum(),
                        sxx: band.iter().map(|v| v * v).sum(),
                    }
                })
                .collect();
            let comoments = pairs
                .iter()
                .map(|&((ja, ba), (jb, bb))| {
                    let mut acc = CoMoments::default();
                    let a = pyr.band(ja, 0, ba);
                    let b = pyr.band(jb, 0, bb);
                    if ja == jb {
                        a.iter().zip(b).for_each(|(&x, &y)| acc.add(x, y));
                    } else {
                        // ja is the finer scale.
                        let (hb, wb) = shape.dims(jb);
                        let wa = shape.dims(ja).1;
                        for y in 0..hb {
                            for x in 0..wb {
                                acc.add(a[2 * y * wa + 2 * x], b[y * wb + x]);
                            }
                        }
                    }
                    acc
                })
                .collect();
            (moments, comoments)
        })
        .collect();

    let mut moments = vec![Moments::default(); retained.len()];
    let mut comoments = vec![CoMoments::default(); pairs.len()];
    for (m, c) in &partials {
        for (acc, v) in moments.iter_mut().zip(m) {
            acc.n += v.n;
            acc.sx += v.sx;
            acc.sxx += v.sxx;
        }
        for (acc, v) in comoments.iter_mut().zip(c) {
            acc.merge(v);
        }
    }

    let bands = retained
        .iter()
        .zip(&moments)
        .map(|(&(scale, band), m)| {
            let mean = m.sx / m.n;
            BandStats {
                scale,
                band,
                count: m.n as usize,
                mean,
                variance: m.sxx / m.n - mean * mean,
            }
        })
        .collect();
    let correlations = pairs
        .iter()
        .zip(&comoments)
        .map(|(&(a, b), c)| BandCorrelation {
            a,
            b,
            count: c.n as usize,
            correlation: c.correlation(),
        })
        .collect();
    Ok(GaussianityReport {
        wavelet: bank.wavelet(),
        levels,
        pixels: n_fields * side * side,
        bands,
        correlations,
    })
}
