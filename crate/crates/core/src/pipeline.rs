//! Inference: one edit or one inpainting request through a trained
//! generator.

use crate::data::{build_incomplete, color_decode, color_encode, one_hot, ColorPalette, LabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{fuse_pixels, make_mask, BoxCorners, EditBox, Mask};
use crate::networks::Generator;

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub incomplete: LabelMap,
    /// Raw generator output, rendered.
    pub initial: RgbImage,
    /// Generator output inside the box, the original rendering outside.
    pub manipulated_color: RgbImage,
    pub manipulated_labels: LabelMap,
}

/// Fills the box with the target label, regenerates it and fuses the result
/// with the untouched context. Fusion happens on 8-bit pixels, so every
/// pixel outside the box is bit-equal to the input rendering.
pub fn edit_map(generator: &Generator, palette: &ColorPalette, labels: &LabelMap, edit: &EditBox) -> Result<EditOutcome> {
    labels.validate(palette)?;
    palette.validate_target(edit.target_label)?;
    edit.corners.validate(labels.height(), labels.width())?;
    let expected = palette.len() + 1;
    if generator.spec().in_channels != expected {
        return Err(Error::Config(format!(
            "generator takes {} channels but the palette needs {expected}",
            generator.spec().in_channels
        )));
    }
    let incomplete = build_incomplete(labels, edit)?;
    let mask = make_mask(&edit.corners, labels.height(), labels.width())?;
    let input = one_hot(&incomplete, palette)?.concat_channels(&mask.to_tensor())?;
    let initial = RgbImage::from_tensor(&generator.forward(&input)?)?;
    let context = color_encode(&incomplete, palette)?;
    let fused = fuse_pixels(initial.data(), context.data(), 3, &mask)?;
    let manipulated_color = RgbImage::new(labels.height(), labels.width(), fused)?;
    let manipulated_labels = color_decode(&manipulated_color, palette);
    Ok(EditOutcome {
        incomplete,
        initial,
        manipulated_color,
        manipulated_labels,
    })
}

/// Regenerates the hole of an RGB image.
pub fn inpaint_image(generator: &Generator, image: &RgbImage, hole: &BoxCorners) -> Result<RgbImage> {
    if generator.spec().in_channels != 4 {
        return Err(Error::Config("not an inpainting generator".into()));
    }
    let mask = make_mask(hole, image.height(), image.width())?;
    let keep = Mask::from_fn(mask.height(), mask.width(), |r, c| !mask.get(r, c));
    let input = image.to_tensor().masked(&keep)?.concat_channels(&mask.to_tensor())?;
    let initial = RgbImage::from_tensor(&generator.forward(&input)?)?;
    RgbImage::new(image.height(), image.width(), fuse_pixels(initial.data(), image.data(), 3, &mask)?)
}
