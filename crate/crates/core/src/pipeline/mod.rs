//! Deployment path: preprocessing, folding, serialization, embedding and verification metrics.

mod embed;
mod fold;
mod image;
mod metrics;
mod model_file;

pub use embed::{cosine_similarity, embed, embed_batch, embed_tensor, embeddings_from_output, Embedding};
pub use fold::fold_batchnorm;
pub use image::{
    encode_ppm, encode_tensor, parse_ppm, parse_tensor, preprocess, preprocess_batch, read_ppm, write_ppm, Input,
    RawImage,
};
pub use metrics::{
    accuracy_at, best_threshold, evaluate_kfold, fold_ranges, kfold_accuracy, tar_at_far, tar_points, EvalReport,
    FoldResult, Pair, PairList, TarPoint,
};
pub use model_file::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
