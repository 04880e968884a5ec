//! Aligned audio-visual samples: 1 fps frames, alignment to acoustic frames,
//! image augmentation, manifests and the synthetic scene generator.

pub mod align;
pub mod augment;
pub mod batch;
pub mod corpus;
pub mod image;
pub mod manifest;
pub mod synth;

pub use align::{align, AlignedSample, VisualInput};
pub use augment::{augment_image, AugmentConfig};
pub use batch::batches;
pub use corpus::{avf_path, read_frames, ClipData, Corpus, FeatureSource};
pub use image::{downsample_video, ImageTensor};
pub use manifest::{split_train_val, Manifest, ManifestEntry, Split};
pub use synth::{generate_synthetic, synth_clip, ConfusionMode, SyntheticSpec};
