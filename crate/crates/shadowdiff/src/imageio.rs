//! PNG round-tripping between files and `[C,H,W]` float tensors in `[0,1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a `[3,H,W]` tensor as RGB or a `[1,H,W]` tensor as grayscale.
pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    match c {
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        to_u8(img[y * w + x]),
                        to_u8(img[h * w + y * w + x]),
                        to_u8(img[2 * h * w + y * w + x]),
                    ]);
                    buf.put_pixel(x as u32, y as u32, px);
                }
            }
            Ok(buf.save(path)?)
        }
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(img[y * w + x])]));
                }
            }
            Ok(buf.save(path)?)
        }
        _ => Err(Error::InvalidArgument(format!(
            "cannot save {c}-channel tensor as PNG"
        ))),
    }
}

/// Load a PNG as a `[3,H,W]` tensor in `[0,1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                data[ch * h * w + y * w + x] = px[ch] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Load a PNG as a single-channel `[1,H,W]` tensor in `[0,1]`.
pub fn load_png_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0;
        }
    }
    Tensor::new(&[1, h, w], data)
}
