from .formats import (
    FEATURE_DIMS,
    BadMagicError,
    FeatureRecord,
    FormatError,
    MVClip,
    TruncatedFileError,
    VersionMismatchError,
    feature_table,
    read_feature_cache,
    read_feature_header,
    read_mv_clip,
    write_feature_cache,
    write_mv_clip,
)
from .manifest import (
    ManifestEntry,
    SplitManifest,
    read_class_index,
    read_manifest,
    write_class_index,
    write_manifest,
)
from .storage import (
    FrameDirectorySource,
    InMemoryFrameSource,
    load_split_clips,
    save_synthetic_dataset,
)
from .synthetic import (
    ClassSignature,
    SyntheticDataset,
    class_names_for,
    class_signatures,
    generate_synthetic_dataset,
    motion_signature,
    palette_color,
)
