//! Rendering single samples from a loaded model.

use anyhow::Result;
use compogan_core::explorer::{apply_edit, DirectionBank, EditSpec};
use compogan_core::generator::{CompositionResult, Latents};
use compogan_core::grouping::LabelMap;
use compogan_core::raster::{tensor_to_image, RgbImage};
use compogan_core::rng;

use crate::checkpoint::Model;
use crate::imageio::{colorize, mask_labels, upscale};

/// The shared latent triple drawn from `seed`.
pub fn latents_for_seed(model: &Model, seed: u64) -> Result<Latents<f32>> {
    let z = rng::normal_vec::<f32>(&mut rng::seeded(seed), model.config.generator.latent_dim);
    Ok(Latents::Shared(model.generator.map_latent(&model.params, &z)?))
}

pub struct Render {
    pub image: RgbImage,
    /// Argmax of the final mask.
    pub mask: LabelMap,
    /// Argmax of the coarse mask.
    pub coarse_mask: LabelMap,
    pub result: CompositionResult<f32>,
}

impl Render {
    pub fn mask_overlay(&self, palette: &[[u8; 3]]) -> RgbImage {
        colorize(&self.mask, palette)
    }

    /// Coarse mask colorized and upscaled to the image size.
    pub fn coarse_overlay(&self, palette: &[[u8; 3]]) -> RgbImage {
        let factor = (self.image.width / self.coarse_mask.width()).max(1);
        upscale(&colorize(&self.coarse_mask, palette), factor)
    }
}

/// Generates one sample; `spec` edits are applied when non-empty.
pub fn render(model: &Model, latents: &Latents<f32>, bank: Option<&DirectionBank>, spec: &EditSpec) -> Result<Render> {
    let result = match bank {
        Some(b) if !spec.is_empty() => apply_edit(&model.generator, &model.params, latents, b, spec)?,
        None if !spec.is_empty() => anyhow::bail!("edits need a direction bank"),
        _ => model.generator.generate(&model.params, latents)?,
    };
    Ok(Render {
        image: tensor_to_image(&result.image, 0),
        mask: mask_labels(&result.final_mask, 0)?,
        coarse_mask: mask_labels(&result.mask, 0)?,
        result,
    })
}

pub fn render_seed(model: &Model, seed: u64, bank: Option<&DirectionBank>, spec: &EditSpec) -> Result<Render> {
    render(model, &latents_for_seed(model, seed)?, bank, spec)
}
