//! A scripted stand-in for a person painting feedback masks.

use crate::datasets::dominant_colour_masks;
use crate::error::Result;
use crate::grid::Grid;
use crate::policy::RewardMap;
use crate::rewards::{decode_human_mask, FeedbackProvider, MASK_NEGATIVE, MASK_NEUTRAL, MASK_POSITIVE};

/// Marks water-coloured pixels negative and vegetation positive, or the
/// reverse when `invert` is set. Masks go through the wire coding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScriptedPainter {
    pub invert: bool,
}

impl ScriptedPainter {
    pub fn paint(&self, image: &Grid) -> Result<Vec<u8>> {
        let (water, green) = dominant_colour_masks(image)?;
        let (on_water, on_green) = if self.invert {
            (MASK_POSITIVE, MASK_NEGATIVE)
        } else {
            (MASK_NEGATIVE, MASK_POSITIVE)
        };
        Ok(water
            .iter()
            .zip(&green)
            .map(|(&w, &g)| match (w, g) {
                (true, _) => on_water,
                (_, true) => on_green,
                _ => MASK_NEUTRAL,
            })
            .collect())
    }
}

impl FeedbackProvider for ScriptedPainter {
    fn feedback(&mut self, _epoch: usize, images: &[Grid]) -> Result<Vec<RewardMap>> {
        images
            .iter()
            .map(|img| decode_human_mask(&self.paint(img)?, img.height(), img.width()))
            .collect()
    }
}

/// Soft water area: mean over pixels of `clamp(3 (b - max(r, g)), 0, 1)`.
pub fn water_area(image: &Grid) -> f64 {
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    let total: f64 = (0..r.len())
        .map(|i| (3.0 * (b[i] - r[i].max(g[i]))).clamp(0.0, 1.0))
        .sum();
    total / r.len() as f64
}
