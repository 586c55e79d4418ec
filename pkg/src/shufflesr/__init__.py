"""One-step pixel-space super-resolution without a learned autoencoder.

The package replaces the usual encoder/decoder pair with the exact
pixel-unshuffle/shuffle rearrangement, distills a latent-space one-step model
into a fully pixel-space student in two adversarial stages, and fights the
resulting shuffle-periodic artifacts on three fronts: a masked Fourier-space
training loss, random-phase padding of discriminator inputs, and pad-based
guidance at inference time.
"""

from .tensor_ops import (
    PadSpec,
    ShapeError,
    TileConfig,
    crop,
    pad,
    pixel_shuffle,
    pixel_unshuffle,
    tile_merge,
    tile_split,
)
from .frequency import (
    FrequencyMask,
    SpectrumReport,
    artifact_score,
    build_mask,
    fft_amplitude,
    mfs_loss,
)
from .losses import (
    DEFAULT_LAMBDAS,
    LossBundle,
    adv_d_loss,
    adv_g_loss,
    match_loss,
    perceptual_loss,
    register_perceptual_scorer,
    ssim as ssim_torch,
    stage1_losses,
    stage2_losses,
)
from .models import (
    Checkpoint,
    ConditionalUNet,
    DiscriminatorHeadSet,
    GeneratorConfig,
    ToyVAE,
    VAEConfig,
    build_generator,
    build_heads,
    build_vae,
    fixmod_apply,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    BatchStream,
    Corpus,
    DataError,
    DegradationConfig,
    SamplePair,
    degrade,
    held_out_pairs,
    load_user_corpus,
    make_synthetic_corpus,
)
from .distill import (
    ModelSpec,
    NumericAbort,
    StageConfig,
    TeacherBundle,
    TeacherConfig,
    load_student,
    load_teacher,
    randpad,
    run_stage,
    train_teacher,
)
from .inference import (
    GuidanceConfig,
    apply_fixmod,
    infer_cfg,
    infer_ensemble,
    infer_padcfg,
    infer_plain,
    infer_tiled,
    run_guided,
)
from .evalbench import MetricReport, compare_runs, evaluate, psnr, register_metric, write_report
from .evalbench import ssim as ssim_numpy
from .profiling import ProfileRecord, ProfileSpec, plot_profile, profile_pipeline, write_profile_csv
from .manifest import REGISTRY, generate_repro_manifest, verify_registry

__version__ = "0.1.0"
