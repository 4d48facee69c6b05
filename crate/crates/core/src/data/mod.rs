//! Image codecs, dataset manifests, sample loading, alignment and checkpoints.

mod align;
mod checkpoint;
mod image;
mod manifest;
mod sample;
mod synth;

pub use align::{crop, pad_to, pad_to_multiple, CropRecord};
pub use checkpoint::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use image::{
    decode_image, encode_pnm, load_image, probability_byte, probability_raster, tensor_raster,
    write_pnm, Raster,
};
pub use manifest::{build_manifest, Manifest, ManifestEntry, MANIFEST_FILE};
pub use sample::{binarize, ensure_rgb, load_sample, Augment, NoAugment, Sample};
pub use synth::{
    crop_window, synth_rasters, synth_sample, write_synthetic_dataset, SynthRasters, SynthSpec,
};
