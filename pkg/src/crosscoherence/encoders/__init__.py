from crosscoherence.encoders.autoencoder import (
    AutoencoderConfig,
    DecoderConfig,
    PointAutoencoder,
    PointDecoder,
    TrainingDivergedError,
    decode_cloud,
    reconstruction_loss,
    train_autoencoder,
)
from crosscoherence.encoders.checkpoint import load_checkpoint, load_module, save_checkpoint, save_module
from crosscoherence.encoders.pointnet import (
    EncoderConfig,
    LocalFeatureSet,
    PointNetEncoder,
    SetAbstraction,
    SetAbstractionConfig,
    encode_global,
    encode_local,
    set_abstraction,
)
from crosscoherence.encoders.text import (
    BuiltinTextEncoder,
    FileEmbeddingProvider,
    TextEmbeddingSequence,
    Vocabulary,
    embed_text,
    tokenize,
)
