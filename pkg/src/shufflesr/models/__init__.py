from .unet import (
    VARIANTS,
    COND_INDEX,
    GeneratorConfig,
    ConditionalUNet,
    build_generator,
    init_stage1_from_teacher,
    init_stage2_from_stage1,
    timestep_embedding,
)
from .vae import VAEConfig, ToyVAE, build_vae
from .heads import (
    DiscriminatorHeadSet,
    build_heads,
    discriminate,
    extract_features,
    freeze,
    logit_mean,
)
from .fixmod import FixModRefiner, fixmod_apply, haar_approximation, train_refiner
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    pack_module,
    unpack_module,
    pack_optimizer,
    unpack_optimizer,
)

__all__ = [
    "VARIANTS",
    "COND_INDEX",
    "GeneratorConfig",
    "ConditionalUNet",
    "build_generator",
    "init_stage1_from_teacher",
    "init_stage2_from_stage1",
    "timestep_embedding",
    "VAEConfig",
    "ToyVAE",
    "build_vae",
    "DiscriminatorHeadSet",
    "build_heads",
    "discriminate",
    "extract_features",
    "freeze",
    "logit_mean",
    "FixModRefiner",
    "fixmod_apply",
    "haar_approximation",
    "train_refiner",
    "Checkpoint",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "pack_module",
    "unpack_module",
    "pack_optimizer",
    "unpack_optimizer",
]
