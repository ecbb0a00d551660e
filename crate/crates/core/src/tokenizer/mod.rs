//! Patch tokenization, embeddings and mask plans.

mod embed;
mod mask;
mod patch;

pub use embed::{
    embed_decoder_tokens, embed_encoder_tokens, modality_key, patch_tensor, positional,
    positional_axes,
};
pub use mask::{
    mask_quota, sample_mask_plan, span_pool, MaskOptions, MaskPlan, MaskStrategy, ModalityMask,
};
pub use patch::{
    patchify_frames, patchify_spectrogram, uniform_frame_indices, unpatchify_frames,
    unpatchify_spectrogram, AudioPatch, Modality, PatchCoords, PatchSet, TokenCoord, VideoClip,
};
