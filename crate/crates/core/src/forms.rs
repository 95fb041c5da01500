//! Alternative input representations: grayscale, YCbCr and CIELAB channels,
//! and the nine 3×3 Laws texture maps.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{invalid, shape_err, Error, Result};

const L3: [f64; 3] = [1.0, 2.0, 1.0];
const E3: [f64; 3] = [-1.0, 0.0, 1.0];
const S3: [f64; 3] = [-1.0, 2.0, -1.0];

/// The nine 3×3 Laws kernels, `L1 … L9` = L3L3, E3E3, S3S3, L3S3, S3L3,
/// L3E3, E3L3, S3E3, E3S3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LawsKernel {
    L1,
    L2,
    L3,
    L4,
    L5,
    L6,
    L7,
    L8,
    L9,
}

impl LawsKernel {
    pub const ALL: [LawsKernel; 9] = [Self::L1, Self::L2, Self::L3, Self::L4, Self::L5, Self::L6, Self::L7, Self::L8, Self::L9];

    pub fn index(self) -> usize {
        self as usize + 1
    }

    fn factors(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Self::L1 => (L3, L3),
            Self::L2 => (E3, E3),
            Self::L3 => (S3, S3),
            Self::L4 => (L3, S3),
            Self::L5 => (S3, L3),
            Self::L6 => (L3, E3),
            Self::L7 => (E3, L3),
            Self::L8 => (S3, E3),
            Self::L9 => (E3, S3),
        }
    }

    /// Outer product of the column factor with the row factor.
    pub fn kernel(self) -> [[f64; 3]; 3] {
        let (col, row) = self.factors();
        let mut k = [[0.0; 3]; 3];
        for (i, ki) in k.iter_mut().enumerate() {
            for (j, kij) in ki.iter_mut().enumerate() {
                *kij = col[i] * row[j];
            }
        }
        k
    }
}

/// One way of presenting an image to a base classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InputForm {
    Rgb,
    Gray,
    YcbcrY,
    YcbcrCb,
    YcbcrCr,
    LabL,
    LabA,
    LabB,
    Laws(LawsKernel),
}

impl InputForm {
    pub fn channel_count(self) -> usize {
        match self {
            Self::Rgb => 3,
            _ => 1,
        }
    }

    /// Builds this representation of `set`. Laws maps of colour input are
    /// taken from its grayscale conversion.
    pub fn apply(self, set: &LabeledImageSet) -> Result<LabeledImageSet> {
        match self {
            Self::Rgb => {
                if set.channels() != 3 {
                    return Err(shape_err(format!("RGB form needs 3 channels, got {}", set.channels())));
                }
                Ok(set.clone())
            }
            Self::Gray => to_grayscale(set),
            Self::YcbcrY | Self::YcbcrCb | Self::YcbcrCr => {
                let [y, cb, cr] = to_ycbcr(set)?;
                Ok(match self {
                    Self::YcbcrY => y,
                    Self::YcbcrCb => cb,
                    _ => cr,
                })
            }
            Self::LabL | Self::LabA | Self::LabB => {
                let [l, a, b] = to_lab(set)?;
                Ok(match self {
                    Self::LabL => l,
                    Self::LabA => a,
                    _ => b,
                })
            }
            Self::Laws(k) => laws_filter(&to_grayscale(set)?, k),
        }
    }
}

impl fmt::Display for InputForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rgb => f.write_str("RGB"),
            Self::Gray => f.write_str("GRAY"),
            Self::YcbcrY => f.write_str("YCBCR_Y"),
            Self::YcbcrCb => f.write_str("YCBCR_CB"),
            Self::YcbcrCr => f.write_str("YCBCR_CR"),
            Self::LabL => f.write_str("LAB_L"),
            Self::LabA => f.write_str("LAB_A"),
            Self::LabB => f.write_str("LAB_B"),
            Self::Laws(k) => write!(f, "LAWS_L{}", k.index()),
        }
    }
}

impl FromStr for InputForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "RGB" => Self::Rgb,
            "GRAY" => Self::Gray,
            "YCBCR_Y" => Self::YcbcrY,
            "YCBCR_CB" => Self::YcbcrCb,
            "YCBCR_CR" => Self::YcbcrCr,
            "LAB_L" => Self::LabL,
            "LAB_A" => Self::LabA,
            "LAB_B" => Self::LabB,
            other => {
                let k = other
                    .strip_prefix("LAWS_L")
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|d| (1..=9).contains(d))
                    .ok_or_else(|| invalid(format!("unknown input form `{other}`")))?;
                Self::Laws(LawsKernel::ALL[k - 1])
            }
        })
    }
}

impl TryFrom<String> for InputForm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InputForm> for String {
    fn from(f: InputForm) -> String {
        f.to_string()
    }
}

fn require_rgb(set: &LabeledImageSet, what: &str) -> Result<()> {
    if set.channels() != 3 {
        return Err(shape_err(format!("{what} needs 3-channel input, got {}", set.channels())));
    }
    Ok(())
}

/// Maps every RGB pixel through `f`, producing three single-channel sets.
fn per_pixel3(set: &LabeledImageSet, names: [&str; 3], f: impl Fn(f64, f64, f64) -> [f64; 3] + Sync) -> Result<[LabeledImageSet; 3]> {
    let (n, _, h, w) = set.images.dim();
    let mut outs = [Array4::<f32>::zeros((n, 1, h, w)), Array4::<f32>::zeros((n, 1, h, w)), Array4::<f32>::zeros((n, 1, h, w))];
    let [o0, o1, o2] = &mut outs;
    let r = set.images.index_axis(Axis(1), 0);
    let g = set.images.index_axis(Axis(1), 1);
    let b = set.images.index_axis(Axis(1), 2);
    Zip::from(o0.index_axis_mut(Axis(1), 0))
        .and(o1.index_axis_mut(Axis(1), 0))
        .and(o2.index_axis_mut(Axis(1), 0))
        .and(&r)
        .and(&g)
        .and(&b)
        .par_for_each(|a, bb, c, &r, &g, &b| {
            let [x, y, z] = f(r as f64, g as f64, b as f64);
            *a = x as f32;
            *bb = y as f32;
            *c = z as f32;
        });
    let [a, b, c] = outs;
    let base = &set.name;
    Ok([
        set.with_images(a, format!("{base}/{}", names[0]))?,
        set.with_images(b, format!("{base}/{}", names[1]))?,
        set.with_images(c, format!("{base}/{}", names[2]))?,
    ])
}

/// BT.601 luma. Single-channel input passes through unchanged.
pub fn to_grayscale(set: &LabeledImageSet) -> Result<LabeledImageSet> {
    match set.channels() {
        1 => Ok(set.clone()),
        3 => {
            let (n, _, h, w) = set.images.dim();
            let mut out = Array4::<f32>::zeros((n, 1, h, w));
            Zip::from(out.index_axis_mut(Axis(1), 0))
                .and(set.images.index_axis(Axis(1), 0))
                .and(set.images.index_axis(Axis(1), 1))
                .and(set.images.index_axis(Axis(1), 2))
                .par_for_each(|o, &r, &g, &b| {
                    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                    *o = y.clamp(0.0, 1.0) as f32;
                });
            set.with_images(out, format!("{}/GRAY", set.name))
        }
        c => Err(shape_err(format!("grayscale of {c}-channel input"))),
    }
}

/// Full-range BT.601 YCbCr with chroma offset to 0.5.
pub fn ycbcr_pixel(r: f64, g: f64, b: f64) -> [f64; 3] {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    [y.clamp(0.0, 1.0), cb.clamp(0.0, 1.0), cr.clamp(0.0, 1.0)]
}

pub fn to_ycbcr(set: &LabeledImageSet) -> Result<[LabeledImageSet; 3]> {
    require_rgb(set, "YCbCr")?;
    per_pixel3(set, ["YCBCR_Y", "YCBCR_CB", "YCBCR_CR"], ycbcr_pixel)
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIELAB under D65, rescaled to `[0, 1]`: `L/100`, `(a+128)/255`,
/// `(b+128)/255`.
pub fn lab_pixel(r: f64, g: f64, b: f64) -> [f64; 3] {
    let (r, g, b) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / 0.950_47), lab_f(y / 1.0), lab_f(z / 1.088_83));
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let bb = 200.0 * (fy - fz);
    [(l / 100.0).clamp(0.0, 1.0), ((a + 128.0) / 255.0).clamp(0.0, 1.0), ((bb + 128.0) / 255.0).clamp(0.0, 1.0)]
}

pub fn to_lab(set: &LabeledImageSet) -> Result<[LabeledImageSet; 3]> {
    require_rgb(set, "Lab")?;
    per_pixel3(set, ["LAB_L", "LAB_A", "LAB_B"], lab_pixel)
}

/// Same-size 3×3 cross-correlation with zero padding, before any rescaling.
pub fn laws_response(image: ArrayView2<'_, f32>, kernel: LawsKernel) -> Array2<f64> {
    let k = kernel.kernel();
    let (h, w) = image.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, ki) in k.iter().enumerate() {
                let rr = r as isize + i as isize - 1;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for (j, &kij) in ki.iter().enumerate() {
                    let cc = c as isize + j as isize - 1;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += kij * image[[rr as usize, cc as usize]] as f64;
                }
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Laws texture map of each image, min–max rescaled per image to `[0, 1]`
/// (a flat response maps to all zeros).
pub fn laws_filter(set: &LabeledImageSet, kernel: LawsKernel) -> Result<LabeledImageSet> {
    if set.channels() != 1 {
        return Err(shape_err(format!("Laws filtering needs single-channel input, got {}", set.channels())));
    }
    let mut out = Array4::<f32>::zeros(set.images.raw_dim());
    Zip::from(out.outer_iter_mut()).and(set.images.outer_iter()).par_for_each(|mut dst, src| {
        let resp = laws_response(src.index_axis(Axis(0), 0), kernel);
        let (lo, hi) = resp.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let mut ch = dst.index_axis_mut(Axis(0), 0);
        Zip::from(&mut ch).and(&resp).for_each(|d, &v| {
            *d = if range > 0.0 { ((v - lo) / range) as f32 } else { 0.0 };
        });
    });
    set.with_images(out, format!("{}/LAWS_L{}", set.name, kernel.index()))
}
