//! Synthetic bubbles and swatches, the dataset file format, and batching.

mod batch;
mod export;
mod file;
mod generate;
mod image;

pub use batch::{balanced_batches, select, train_val_split};
pub use export::{encode_pgm, export_pgm_dir};
pub use file::{decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use generate::{gen_bubble, gen_swatch, BubbleStyle, DatasetSpec, SwatchSpec};
pub use image::{quantize, BubbleImage, Label, Provenance, HEIGHT, PIXELS, WIDTH};
