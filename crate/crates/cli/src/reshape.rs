//! Fifth-order reshaping for inpainting: each image axis is split into a
//! (fine, coarse) factor pair, turning an `h x w x 3` image into a
//! `hf x hc x wf x wc x 3` tensor by contiguous column-major index
//! splitting (fine index fastest).  Non-factorable axes are padded by edge
//! replication to the nearest composite size.

use tc_core::error::{Error, Result};
use tc_core::tensor::DenseTensor;

use crate::image::Image;

/// Factor pair `m = fine * coarse` with `fine >= coarse >= 2` chosen to
/// minimize `fine - coarse` (e.g. 135 -> 15 * 9, 198 -> 18 * 11).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split {
    pub fine: usize,
    pub coarse: usize,
}

/// The most balanced nontrivial factorization, if any.
pub fn balanced_split(m: usize) -> Option<Split> {
    let mut best: Option<Split> = None;
    let mut a = 2usize;
    while a * a <= m {
        if m.is_multiple_of(a) {
            best = Some(Split {
                fine: m / a,
                coarse: a,
            });
        }
        a += 1;
    }
    best
}

/// Smallest `m' >= m` with a nontrivial factorization, plus its split.
pub fn pad_to_splittable(m: usize) -> (usize, Split) {
    let mut mm = m.max(4);
    loop {
        if let Some(s) = balanced_split(mm) {
            return (mm, s);
        }
        mm += 1;
    }
}

/// Index bookkeeping for one inpainting reshape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReshapeInfo {
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub h_split: Split,
    pub w_split: Split,
}

impl ReshapeInfo {
    pub fn plan(h: usize, w: usize) -> Self {
        let (padded_h, h_split) = pad_to_splittable(h);
        let (padded_w, w_split) = pad_to_splittable(w);
        Self {
            orig_h: h,
            orig_w: w,
            padded_h,
            padded_w,
            h_split,
            w_split,
        }
    }

    pub fn padded(&self) -> bool {
        self.padded_h != self.orig_h || self.padded_w != self.orig_w
    }

    /// Fifth-order dims `(hf, hc, wf, wc, 3)`.
    pub fn tensor_dims(&self) -> Vec<usize> {
        vec![
            self.h_split.fine,
            self.h_split.coarse,
            self.w_split.fine,
            self.w_split.coarse,
            Image::CHANNELS,
        ]
    }
}

/// Image to fifth-order tensor; padding replicates edge pixels.
pub fn image_to_tensor5(img: &Image) -> (DenseTensor<f64>, ReshapeInfo) {
    let info = ReshapeInfo::plan(img.height, img.width);
    let dims = info.tensor_dims();
    let t = DenseTensor::from_fn(&dims, |ix| {
        let row = (ix[0] + info.h_split.fine * ix[1]).min(img.height - 1);
        let col = (ix[2] + info.w_split.fine * ix[3]).min(img.width - 1);
        img.get(row, col, ix[4]) as f64
    });
    (t, info)
}

/// Inverse reshape: crops any padding, clamps, and quantizes.
pub fn tensor5_to_image(t: &DenseTensor<f64>, info: &ReshapeInfo) -> Result<Image> {
    if t.dims() != info.tensor_dims().as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "tensor dims {:?} do not match reshape plan {:?}",
            t.dims(),
            info.tensor_dims()
        )));
    }
    let mut img = Image::new(info.orig_h, info.orig_w);
    for row in 0..info.orig_h {
        let (a, b) = (row % info.h_split.fine, row / info.h_split.fine);
        for col in 0..info.orig_w {
            let (c, d) = (col % info.w_split.fine, col / info.w_split.fine);
            for ch in 0..Image::CHANNELS {
                let v = t.get(&[a, b, c, d, ch]).round().clamp(0.0, 255.0);
                img.set(row, col, ch, v as u8);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::bundled_texture;

    #[test]
    fn odd_composite_dimensions_split_balanced() {
        assert_eq!(balanced_split(135), Some(Split { fine: 15, coarse: 9 }));
        assert_eq!(balanced_split(198), Some(Split { fine: 18, coarse: 11 }));
        let info = ReshapeInfo::plan(135, 198);
        assert_eq!(info.tensor_dims(), vec![15, 9, 18, 11, 3]);
        assert!(!info.padded());
    }

    #[test]
    fn texture_dimensions() {
        assert_eq!(balanced_split(60), Some(Split { fine: 10, coarse: 6 }));
        assert_eq!(balanced_split(90), Some(Split { fine: 10, coarse: 9 }));
        let info = ReshapeInfo::plan(60, 90);
        assert_eq!(info.tensor_dims(), vec![10, 6, 10, 9, 3]);
    }

    #[test]
    fn primes_pad_to_composites() {
        assert_eq!(balanced_split(61), None);
        let (m, s) = pad_to_splittable(61);
        assert_eq!(m, 62);
        assert_eq!(s, Split { fine: 31, coarse: 2 });
        let info = ReshapeInfo::plan(61, 90);
        assert!(info.padded());
        assert_eq!(info.padded_h, 62);
    }

    #[test]
    fn reshape_roundtrip_is_bit_exact() {
        let img = bundled_texture();
        let (t, info) = image_to_tensor5(&img);
        let back = tensor5_to_image(&t, &info).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn padded_reshape_roundtrip_crops_exactly() {
        // 7 is prime: the height pads to 8 = 4 * 2.
        let mut img = Image::new(7, 6);
        for r in 0..7 {
            for c in 0..6 {
                for ch in 0..3 {
                    img.set(r, c, ch, (37 * r + 11 * c + 5 * ch) as u8);
                }
            }
        }
        let (t, info) = image_to_tensor5(&img);
        assert!(info.padded());
        let back = tensor5_to_image(&t, &info).unwrap();
        assert_eq!(back, img);
    }
}
