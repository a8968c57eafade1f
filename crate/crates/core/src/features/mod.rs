//! Offline semantic anchors: visual features from a (frozen) latent-diffusion
//! U-Net and class-prompt text features, persisted in a feature store.

pub mod extract;
pub mod projection;
pub mod provider;
pub mod schedule;
pub mod store;

pub use extract::{
    encode_class_prompts, encode_latent, extract_visual_features, global_average_pool, FeatureExtractionConfig,
    TextFeatureSet, VisualFeatureSet,
};
pub use projection::{fit_projection, text_projection, Projection};
pub use provider::{
    DiffusionProvider, FeatureProvider, ProviderKind, SampleContext, SyntheticProvider, SyntheticProviderConfig,
};
pub use schedule::{add_noise, NoiseSchedule};
pub use store::{build_store, load_store, load_store_for, save_store, slice_store, ClientAnchors, FeatureStore, StoreManifest};
