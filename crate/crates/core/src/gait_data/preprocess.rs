use std::path::Path;

use crate::{Error, Result};

/// Side of a preprocessed frame.
pub const SIDE: usize = 64;

/// Binary mask, row-major, one byte per pixel (0 or 1).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SilhouetteFrame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for SilhouetteFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SilhouetteFrame({}x{}, {} on)", self.width, self.height, self.foreground())
    }
}

impl SilhouetteFrame {
    /// Any nonzero value is foreground.
    pub fn new(width: usize, height: usize, values: &[u8]) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::shape(
                "silhouette",
                format!("{width}x{height} frame with {} values", values.len()),
            ));
        }
        Ok(SilhouetteFrame {
            width,
            height,
            pixels: values.iter().map(|&v| u8::from(v != 0)).collect(),
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let pixels = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| u8::from(f(r, c)))
            .collect();
        SilhouetteFrame { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col] != 0
    }

    pub fn foreground(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    /// Number of pixels that differ; frames must have equal size.
    pub fn diff(&self, other: &SilhouetteFrame) -> usize {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.pixels.iter().zip(&other.pixels).filter(|(a, b)| a != b).count()
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        SilhouetteFrame::new(w as usize, h as usize, img.as_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().map(|&p| p * 255).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("sized buffer");
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Crop window in source coordinates; may extend past the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: i64,
    pub left: i64,
    pub side: usize,
}

/// Square window whose side is the larger bounding-box extent, starting at
/// the top foreground row and centred on the mean foreground column.
pub fn crop_window(raw: &SilhouetteFrame) -> Result<CropWindow> {
    let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
    let (mut count, mut col_sum) = (0usize, 0.0f64);
    for r in 0..raw.height {
        for c in 0..raw.width {
            if raw.get(r, c) {
                top = top.min(r);
                bottom = bottom.max(r);
                left = left.min(c);
                right = right.max(c);
                count += 1;
                col_sum += c as f64 + 0.5;
            }
        }
    }
    if count == 0 {
        return Err(Error::BlankSilhouette);
    }
    let side = (bottom - top + 1).max(right - left + 1);
    let centre = col_sum / count as f64;
    Ok(CropWindow {
        top: top as i64,
        left: (centre - side as f64 / 2.0).round() as i64,
        side,
    })
}

/// Bounding-box crop and nearest-neighbour resize to 64×64.
///
/// Pixels of the window outside the source image are background. Fails with
/// [`Error::BlankSilhouette`] when the input, or the resized output, has no
/// foreground.
pub fn preprocess_frame(raw: &SilhouetteFrame) -> Result<SilhouetteFrame> {
    let win = crop_window(raw)?;
    let source = |i: usize| ((i as f64 + 0.5) * win.side as f64 / SIDE as f64).floor() as i64;
    let out = SilhouetteFrame::from_fn(SIDE, SIDE, |r, c| {
        let (y, x) = (win.top + source(r), win.left + source(c));
        let inside = (0..raw.height as i64).contains(&y) && (0..raw.width as i64).contains(&x);
        // values are already 0/1; the threshold keeps the output binary
        inside && f64::from(raw.pixels[y as usize * raw.width + x as usize]) >= 0.5
    });
    if out.foreground() == 0 {
        return Err(Error::BlankSilhouette);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_frame_silhouette_is_unchanged() {
        // symmetric about the vertical centre line, touching all four edges
        let f = SilhouetteFrame::from_fn(64, 64, |r, c| {
            let d = (c as i64 * 2 - 63).abs();
            r == 0 || r == 63 || d >= 63 || d < (r as i64 % 23) * 2
        });
        assert_eq!(preprocess_frame(&f).unwrap(), f);
    }

    #[test]
    fn blank_frames_are_rejected() {
        let f = SilhouetteFrame::new(10, 7, &[0; 70]).unwrap();
        let err = preprocess_frame(&f).unwrap_err();
        assert_eq!(err.to_string(), "blank silhouette");
    }

    #[test]
    fn single_pixel_fills_the_frame() {
        let f = SilhouetteFrame::from_fn(9, 9, |r, c| r == 4 && c == 4);
        assert_eq!(preprocess_frame(&f).unwrap().foreground(), 64 * 64);
    }

    #[test]
    fn output_is_binary() {
        let raw = SilhouetteFrame::new(3, 1, &[7, 0, 255]).unwrap();
        assert_eq!(raw.pixels(), &[1, 0, 1]);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let f = SilhouetteFrame::from_fn(13, 7, |r, c| (r * c) % 3 == 0);
        let p = dir.path().join("f.png");
        f.write_png(&p).unwrap();
        assert_eq!(SilhouetteFrame::read_png(&p).unwrap(), f);
    }
}
