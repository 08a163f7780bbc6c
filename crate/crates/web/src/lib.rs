//! WebAssembly bindings for the demo page in `www/`.
//!
//! Images cross the boundary as RGBA bytes, row major, the layout of
//! `ImageData.data`.

use dcdeblur::dark_channel::{dark_channel_map, dark_channel_sparsity};
use dcdeblur::data::{apply_blur, random_motion_kernel, synthetic_sharp_image, BlurKernel};
use dcdeblur::{rng, Error, Real, Result, Tensor};
use wasm_bindgen::prelude::*;

fn from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Tensor> {
    if rgba.len() != width * height * 4 {
        return Err(Error::Data(format!(
            "expected {} RGBA bytes for {width}x{height}, got {}",
            width * height * 4,
            rgba.len()
        )));
    }
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgba.chunks_exact(4).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = Real::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![1, 3, height, width], data)
}

fn to_rgba(image: &Tensor) -> Result<Vec<u8>> {
    let (_, c, h, w) = image.dims4()?;
    let plane = h * w;
    let d = image.data();
    let byte = |v: Real| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(byte(d[ch.min(c - 1) * plane + i]));
        }
        out.push(255);
    }
    Ok(out)
}

pub fn dark_channel_image(
    rgba: &[u8],
    width: usize,
    height: usize,
    window: usize,
) -> Result<Vec<u8>> {
    let image = from_rgba(rgba, width, height)?;
    to_rgba(&dark_channel_map(&image, window)?.values)
}

pub fn sparsity_of(
    rgba: &[u8],
    width: usize,
    height: usize,
    window: usize,
    threshold: Real,
) -> Result<Real> {
    dark_channel_sparsity(&from_rgba(rgba, width, height)?, window, threshold)
}

pub fn kernel_for(length: Real, seed: u64) -> Result<BlurKernel> {
    random_motion_kernel(length, &mut rng::seeded(seed))
}

pub fn blurred_image(
    rgba: &[u8],
    width: usize,
    height: usize,
    kernel: &BlurKernel,
) -> Result<Vec<u8>> {
    to_rgba(&apply_blur(&from_rgba(rgba, width, height)?, kernel)?)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Synthetic sharp test scene.
#[wasm_bindgen(js_name = syntheticImage)]
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> Result<Vec<u8>, JsError> {
    to_rgba(&synthetic_sharp_image(
        height,
        width,
        &mut rng::seeded(seed),
    ))
    .map_err(js)
}

/// Dark channel map as a gray RGBA image.
#[wasm_bindgen(js_name = darkChannel)]
pub fn dark_channel(
    rgba: &[u8],
    width: usize,
    height: usize,
    window: usize,
) -> Result<Vec<u8>, JsError> {
    dark_channel_image(rgba, width, height, window).map_err(js)
}

/// Fraction of dark channel pixels above `threshold`.
#[wasm_bindgen]
pub fn sparsity(
    rgba: &[u8],
    width: usize,
    height: usize,
    window: usize,
    threshold: f64,
) -> Result<f64, JsError> {
    sparsity_of(rgba, width, height, window, threshold).map_err(js)
}

/// A random motion kernel and the image blurred with it.
#[wasm_bindgen]
pub struct MotionBlur {
    kernel: BlurKernel,
    blurred: Vec<u8>,
}

#[wasm_bindgen]
impl MotionBlur {
    #[wasm_bindgen(constructor)]
    pub fn new(
        rgba: &[u8],
        width: usize,
        height: usize,
        length: f64,
        seed: u64,
    ) -> Result<MotionBlur, JsError> {
        let kernel = kernel_for(length, seed).map_err(js)?;
        let blurred = blurred_image(rgba, width, height, &kernel).map_err(js)?;
        Ok(MotionBlur { kernel, blurred })
    }

    #[wasm_bindgen(getter, js_name = kernelSize)]
    pub fn kernel_size(&self) -> usize {
        self.kernel.size
    }

    /// Kernel taps scaled so the largest is white, as RGBA.
    #[wasm_bindgen(js_name = kernelImage)]
    pub fn kernel_image(&self) -> Vec<u8> {
        let peak = self
            .kernel
            .taps
            .iter()
            .copied()
            .fold(0.0, Real::max)
            .max(Real::EPSILON);
        self.kernel
            .taps
            .iter()
            .flat_map(|&t| {
                let v = (t / peak * 255.0).round() as u8;
                [v, v, v, 255]
            })
            .collect()
    }

    #[wasm_bindgen(getter)]
    pub fn blurred(&self) -> Vec<u8> {
        self.blurred.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(w: usize, h: usize) -> Vec<u8> {
        to_rgba(&synthetic_sharp_image(h, w, &mut rng::seeded(3))).unwrap()
    }

    #[test]
    fn rgba_roundtrip() {
        let rgba = scene(9, 5);
        let t = from_rgba(&rgba, 9, 5).unwrap();
        assert_eq!(t.shape(), &[1, 3, 5, 9]);
        assert_eq!(to_rgba(&t).unwrap(), rgba);
        assert!(from_rgba(&rgba, 9, 6).is_err());
    }

    #[test]
    fn dark_channel_is_gray_and_below_every_channel() {
        let rgba = scene(24, 16);
        let dc = dark_channel_image(&rgba, 24, 16, 3).unwrap();
        for (px, d) in rgba.chunks_exact(4).zip(dc.chunks_exact(4)) {
            assert!(d[0] == d[1] && d[1] == d[2] && d[3] == 255);
            assert!(d[0] <= px[0].min(px[1]).min(px[2]));
        }
    }

    #[test]
    fn blur_raises_sparsity() {
        let rgba = scene(48, 48);
        let kernel = kernel_for(9.0, 1).unwrap();
        let blurred = blurred_image(&rgba, 48, 48, &kernel).unwrap();
        let t = 1.0 / 255.0;
        assert!(
            sparsity_of(&blurred, 48, 48, 7, t).unwrap()
                >= sparsity_of(&rgba, 48, 48, 7, t).unwrap()
        );
    }

    #[test]
    fn kernel_image_has_one_white_tap() {
        let rgba = scene(32, 32);
        let m = MotionBlur::new(&rgba, 32, 32, 7.0, 2).unwrap();
        let img = m.kernel_image();
        assert_eq!(img.len(), m.kernel_size() * m.kernel_size() * 4);
        assert!(img.chunks_exact(4).any(|p| p[0] == 255));
        assert_eq!(m.blurred().len(), rgba.len());
    }
}
