//! Browser demo. A [`Scene`] is one synthetic target-domain sample; the page
//! re-renders it as the sliders move: the image and its labels, its
//! low/high frequency split, and its spectrum with the low-pass mask.

use earth_adapter::bench::{generate_sample, DomainSpec, Sample};
use earth_adapter::spectral::{dft2d, freq_mask, high_frequency_energy, split_frequency};
use earth_adapter::Tensor;
use wasm_bindgen::prelude::*;

pub const SIZE: usize = 32;
const CLASSES: usize = 4;
/// Palette offset at full shift.
const OFFSET: [f64; 3] = [0.3, 0.0, -0.3];
const LABEL_COLORS: [[u8; 3]; CLASSES] = [[230, 230, 230], [200, 70, 50], [70, 170, 60], [50, 90, 200]];
const MASK_TINT: [u8; 3] = [255, 190, 40];

fn js(e: earth_adapter::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGBA bytes of a `3 × H × W` image in `[0, 1]`.
pub fn rgba(img: &Tensor) -> Vec<u8> {
    let [_, h, w] = img.shape() else { panic!("expected 3 x H x W") };
    let n = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(4 * n);
    for p in 0..n {
        out.extend_from_slice(&[to_byte(d[p]), to_byte(d[n + p]), to_byte(d[2 * n + p]), 255]);
    }
    out
}

#[wasm_bindgen]
pub struct Scene {
    sample: Sample,
}

impl Scene {
    pub fn build(seed: u32, shift: f64, amplitude: f64, period: u32) -> Result<Scene, String> {
        if !(0.0..=1.0).contains(&shift) {
            return Err("shift must lie in [0, 1]".into());
        }
        let mut spec = DomainSpec::target(CLASSES, SIZE, OFFSET.map(|o| o * shift), amplitude);
        spec.artifact.period = period as usize;
        spec.validate().map_err(|e| e.to_string())?;
        let sample = generate_sample(&spec, seed as u64).map_err(|e| e.to_string())?;
        Ok(Scene { sample })
    }
}

#[wasm_bindgen]
impl Scene {
    /// `shift` scales a warm palette offset; `amplitude` and `period` set
    /// the diagonal stripe artifact.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, shift: f64, amplitude: f64, period: u32) -> Result<Scene, JsValue> {
        Scene::build(seed, shift, amplitude, period).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        SIZE
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.sample.image)
    }

    pub fn labels_rgba(&self) -> Vec<u8> {
        self.sample
            .label
            .iter()
            .flat_map(|&c| {
                let [r, g, b] = LABEL_COLORS[c as usize % CLASSES];
                [r, g, b, 255]
            })
            .collect()
    }

    /// Low part, then the high part offset by 0.5, as two RGBA images back
    /// to back.
    pub fn split_rgba(&self, rho: f64) -> Result<Vec<u8>, JsValue> {
        let (low, high) = split_frequency(&self.sample.image, rho).map_err(js)?;
        let mut out = rgba(&low);
        out.extend(rgba(&high.map(|v| v + 0.5)));
        Ok(out)
    }

    /// Share of the image's non-DC energy outside the low-pass mask.
    pub fn high_share(&self, rho: f64) -> Result<f64, JsValue> {
        let img = &self.sample.image;
        let (high, _) = high_frequency_energy(img, rho).map_err(js)?;
        let n = (SIZE * SIZE) as f64;
        let centered: f64 = (0..3)
            .map(|c| {
                let ch = &img.data()[c * SIZE * SIZE..(c + 1) * SIZE * SIZE];
                let mean = ch.iter().sum::<f64>() / n;
                ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            })
            .sum();
        // Parseval with the unnormalized forward transform
        Ok(if centered > 0.0 { high / (n * centered) } else { 0.0 })
    }

    /// Log power spectrum (centered, channel-summed) in gray, with bins
    /// inside the low-pass mask tinted.
    pub fn spectrum_rgba(&self, rho: f64) -> Result<Vec<u8>, JsValue> {
        let spec = dft2d(&self.sample.image).map_err(js)?;
        let mask = freq_mask(SIZE, SIZE, rho).map_err(js)?;
        let logs: Vec<f64> = (0..SIZE * SIZE)
            .map(|i| {
                let p: f64 = (0..3).map(|c| spec.power(c, i / SIZE, i % SIZE)).sum();
                (1.0 + p).ln()
            })
            .collect();
        let hi = logs.iter().copied().fold(0.0, f64::max).max(1e-12);
        Ok(logs
            .iter()
            .zip(mask.bins())
            .flat_map(|(&l, &inside)| {
                let g = l / hi;
                let px = if inside {
                    MASK_TINT.map(|t| to_byte(0.35 * t as f64 / 255.0 + 0.65 * g))
                } else {
                    [to_byte(g); 3]
                };
                [px[0], px[1], px[2], 255]
            })
            .collect())
    }
}
