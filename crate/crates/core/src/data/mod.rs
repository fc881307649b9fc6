//! Annotations, image tensors and training-time augmentation.

mod augment;
mod convert;
mod image;
mod manifest;
mod masking;
pub mod synthetic;

pub use self::augment::{augment, augment_scene, sample_rng, AugmentConfig};
pub use self::convert::{convert_gazefollow, convert_video_attention_target};
pub use self::image::{
    image_dims, image_from_rgb, image_to_rgb, load_image, normalize_imagenet, resize_image, FsImageSource,
    ImageSource, ImageTensor, MemoryImageSource, IMAGENET_MEAN, IMAGENET_STD,
};
pub use self::manifest::{
    load_manifest, parse_manifest, write_manifest, GazeSample, HeadBox, ManifestRecord, Split,
};
pub use self::masking::{head_overlap_fraction, mask_background_patches};
