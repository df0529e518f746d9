//! CT preprocessing, subject records and clips, the synthetic generator,
//! dataset splits and the on-disk dataset layout.

mod disk;
mod preprocess;
mod record;
mod split;
mod synth;

pub use disk::{
    decode_pgm, encode_pgm, parallel_map, preprocess_dataset, read_frame, read_labels, read_subject, worker_count,
    write_labels, write_subject, write_synth_dataset, Dataset, FrameFormat, FrameValues, LabelRow, PreprocessOptions,
    Sample, LABELS_FILE, THREADS_VAR,
};
pub use preprocess::{center_crop, crop_offset, downsample, embed_center, hu_window, prepare_frame, Image, WindowSpec};
pub use record::{assemble_clip, Clip, Modality, SubjectRecord, CLIP_FRAMES, MAX_FRAMES, MIN_FRAMES};
pub use split::{split_dataset, Split, VAL_FRACTION};
pub use synth::{
    synth_geometry, synth_subject, synth_subject_with, SynthConfig, VeinGeometry, NEGATIVE_SQUEEZE, POSITIVE_SQUEEZE,
    VEIN_FRAMES, VEIN_LEVEL,
};
