"""dsguard: reversible image-dataset protection.

Protect: perturb each image toward a cross-class target in feature space,
rearrange the clean blocks to mimic that carrier, and hide the encrypted
inverse recipe in the result's LSB plane. Restore: extract, decrypt, and
invert with the secret key.
"""

from .dataset import (
    DatasetRecord,
    Manifest,
    ManifestEntry,
    RestoreFailure,
    load_cifar_binary,
    load_dataset,
    load_image_dir,
    load_protected,
    protect_dataset,
    restore_dataset,
    write_protected,
)
from .errors import (
    AuthenticationError,
    CapacityError,
    DatasetError,
    DsguardError,
    GeometryError,
    KeyFileError,
    LossyFormatError,
    MalformedPayloadError,
    PlanFormatError,
)
from .fsp import (
    FeatureExtractor,
    PerturbConfig,
    choose_target,
    extract_features,
    fsp_gradient,
    fsp_loss,
    fsp_perturb,
)
from .imageops import (
    PSNR_INFINITE,
    BlockGrid,
    BlockStats,
    as_image,
    assemble,
    block_stats,
    psnr,
    rotate_block,
    split_blocks,
)
from .rit import (
    PairingPlan,
    RitParams,
    build_plan,
    invert_plan,
    pair_blocks,
    parse_plan,
    serialize_plan,
    transform_block,
)
from .stego import (
    KeyRecord,
    SequencePayload,
    build_payload,
    decrypt_sequence,
    encrypt_sequence,
    extract_payload,
    lsb_capacity,
    lsb_embed,
    lsb_extract,
)

__version__ = "0.1.0"
