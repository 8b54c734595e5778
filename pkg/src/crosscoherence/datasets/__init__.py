from crosscoherence.datasets.formats import (
    DatasetManifest,
    ManifestError,
    ShapeRecord,
    load_manifest,
    load_triplets,
    read_cloud,
    save_manifest,
    save_triplets,
    write_cloud,
)
from crosscoherence.datasets.synthetic import (
    AttributeOracle,
    ShapeAttributes,
    SyntheticConfig,
    build_shape,
    caption_from_attributes,
    generate_synthetic,
    parse_caption,
)
