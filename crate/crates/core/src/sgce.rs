//! Skeleton-guided channel expansion: RGB glyph plus its skeleton as a fourth plane.

use crate::error::{Error, Result};
use crate::imgcore::{BinaryGrid, ColorSpace, RasterImage};
use crate::skeleton::ske;
use crate::tensor::{Element, Tensor};

/// A 4-channel `(R, G, B, S)` image where `S ∈ {0, 1}` marks skeleton pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedInput {
    image: RasterImage,
}

impl ExpandedInput {
    pub fn image(&self) -> &RasterImage {
        &self.image
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn skeleton(&self) -> BinaryGrid {
        let bits = self.image.plane(3).iter().map(|&s| (s > 0.5) as u8).collect();
        BinaryGrid::new(self.width(), self.height(), bits).expect("plane size")
    }

    /// The untouched RGB planes.
    pub fn rgb(&self) -> RasterImage {
        let data = self
            .image
            .data()
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect();
        RasterImage::new(self.width(), self.height(), ColorSpace::Rgb, data).expect("rgb planes")
    }
}

/// Appends `ske(img)` as channel 4.
pub fn expand(img: &RasterImage, threshold: f64) -> Result<ExpandedInput> {
    let skeleton = ske(img, threshold)?;
    fuse(img, &skeleton)
}

/// Combines an RGB image with an already computed skeleton.
pub fn fuse(img: &RasterImage, skeleton: &BinaryGrid) -> Result<ExpandedInput> {
    if img.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            actual: img.channels(),
        });
    }
    if (skeleton.width(), skeleton.height()) != (img.width(), img.height()) {
        return Err(Error::ShapeMismatch(format!(
            "skeleton {}x{} for image {}x{}",
            skeleton.width(),
            skeleton.height(),
            img.width(),
            img.height()
        )));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .zip(skeleton.bits())
        .flat_map(|(p, &s)| [p[0], p[1], p[2], s as f64])
        .collect();
    Ok(ExpandedInput {
        image: RasterImage::new(img.width(), img.height(), ColorSpace::Rgbs, data)?,
    })
}

/// Planar `4×H×W` tensor with every channel mapped to `[-1, 1]` by `v ↦ 2v - 1`.
pub fn to_model_input<T: Element>(e: &ExpandedInput) -> Tensor<T> {
    planar_normalized(&e.image)
}

/// Planar `3×H×W` tensor of an RGB image in `[-1, 1]`.
pub fn rgb_to_tensor<T: Element>(img: &RasterImage) -> Result<Tensor<T>> {
    if img.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            actual: img.channels(),
        });
    }
    Ok(planar_normalized(img))
}

fn planar_normalized<T: Element>(img: &RasterImage) -> Tensor<T> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = Vec::with_capacity(w * h * c);
    for ch in 0..c {
        data.extend(img.data().iter().skip(ch).step_by(c).map(|&v| T::from_f64(2.0 * v - 1.0)));
    }
    Tensor::new(vec![c, h, w], data).expect("planar shape")
}

/// `1×H×W` skeleton plane in `{-1, +1}`.
pub fn skeleton_plane<T: Element>(grid: &BinaryGrid) -> Tensor<T> {
    let data = grid
        .bits()
        .iter()
        .map(|&b| if b == 1 { T::one() } else { -T::one() })
        .collect();
    Tensor::new(vec![1, grid.height(), grid.width()], data).expect("plane shape")
}

/// Inverse of [`rgb_to_tensor`] for a `3×H×W` tensor, clamped into `[0, 1]`.
pub fn tensor_to_image<T: Element>(t: &Tensor<T>) -> Result<RasterImage> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "expected a C×H×W tensor, got {other:?}"
            )))
        }
    };
    let space = ColorSpace::from_channels(c)?;
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            let v = t.data()[ch * plane + i].as_f64();
            data.push(((v + 1.0) / 2.0).clamp(0.0, 1.0));
        }
    }
    RasterImage::new(w, h, space, data)
}

/// Skeletons of a `[N, 3, H, W]` batch of generator outputs, as `[N, 1, H, W]` planes.
pub fn skeleton_planes<T: Element>(batch: &Tensor<T>, threshold: f64) -> Result<(Tensor<T>, Vec<BinaryGrid>)> {
    let grids = batch
        .unstack()
        .iter()
        .map(|t| ske(&tensor_to_image(t)?, threshold))
        .collect::<Result<Vec<_>>>()?;
    let planes: Vec<Tensor<T>> = grids.iter().map(skeleton_plane).collect();
    Ok((Tensor::stack(&planes)?, grids))
}
